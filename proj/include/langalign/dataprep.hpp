#pragma once

#include <chrono>
#include <cstddef>
#include <filesystem>
#include <functional>
#include <map>
#include <memory>
#include <optional>
#include <set>
#include <stdexcept>
#include <string>
#include <string_view>
#include <variant>
#include <vector>

#include "langalign/tokenizer.hpp"

namespace langalign {

struct PreferencePair {
    std::string prompt;
    std::string chosen;
    std::string rejected;

    bool operator==(const PreferencePair&) const = default;
};

// One line of a chat or preference JSONL file. `source` keeps the original
// JSON object text so fields we do not model survive a rewrite.
struct CorpusRecord {
    std::string id;
    std::optional<std::string> license;
    std::variant<Conversation, PreferencePair> payload;
    std::size_t char_count = 0;
    std::string source;

    bool is_chat() const { return std::holds_alternative<Conversation>(payload); }
    const Conversation& chat() const { return std::get<Conversation>(payload); }
    const PreferencePair& preference() const { return std::get<PreferencePair>(payload); }
};

// Number of UTF-8 code points (continuation bytes are not counted).
std::size_t utf8_length(std::string_view text);
std::size_t count_chars(const CorpusRecord& record);

class FormatError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

// Each parser accepts either record kind; the kind is decided per line by
// the presence of "messages" or "prompt".
CorpusRecord parse_record(std::string_view json_line);
std::string serialize_record(const CorpusRecord& record);
std::vector<CorpusRecord> read_jsonl(const std::filesystem::path& path);
void write_jsonl(const std::filesystem::path& path, const std::vector<CorpusRecord>& records);

// --- chunking -------------------------------------------------------------

std::vector<std::string> chunk_document(std::string_view text);
std::string reassemble(const std::vector<std::string>& chunks);

enum class ChunkStatus { pending, done, failed };

struct Chunk {
    std::size_t index = 0;
    std::string source;
    std::optional<std::string> translated;
    ChunkStatus status = ChunkStatus::pending;
};

struct TranslationJob {
    std::string doc_id;
    std::vector<Chunk> chunks;

    static TranslationJob from_text(std::string doc_id, std::string_view text);
    bool complete() const;
};

class ChunkError : public std::runtime_error {
public:
    ChunkError(const std::string& what, std::size_t index)
        : std::runtime_error(what), index_(index) {}
    std::size_t index() const { return index_; }

private:
    std::size_t index_;
};

// Joins translated chunks. Missing or failed chunks throw ChunkError.
std::string reassemble(const TranslationJob& job);

// Splits a chunk longer than `limit` characters at the last sentence end
// (". ", "! ", "? ") that fits, falling back to a hard cut on a code-point
// boundary. Concatenating the pieces gives the input.
std::vector<std::string> split_long_chunk(std::string_view chunk, std::size_t limit);

// --- backends ---------------------------------------------------------------

// translate() must return one output per input, in order, and be callable
// from several threads at once.
class TranslationBackend {
public:
    virtual ~TranslationBackend() = default;
    virtual std::vector<std::string> translate(const std::vector<std::string>& texts) = 0;
    virtual std::string name() const = 0;
};

class BackendError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

class IdentityBackend : public TranslationBackend {
public:
    std::vector<std::string> translate(const std::vector<std::string>& texts) override {
        return texts;
    }
    std::string name() const override { return "identity"; }
};

// Word-for-word substitution. Tokens are split on spaces; punctuation stays
// attached, so lookups fall back to the word with trailing .,!?;: stripped.
class DictionaryBackend : public TranslationBackend {
public:
    explicit DictionaryBackend(std::map<std::string, std::string> entries);
    static DictionaryBackend load(const std::filesystem::path& tsv);
    static DictionaryBackend english_german();

    std::vector<std::string> translate(const std::vector<std::string>& texts) override;
    std::string name() const override { return "dictionary"; }

private:
    std::map<std::string, std::string> entries_;
};

// POSTs {"texts":[...]} to `url` and expects {"translations":[...]}.
class HttpBackend : public TranslationBackend {
public:
    HttpBackend(std::string url, std::string auth_token, std::chrono::seconds timeout);
    std::vector<std::string> translate(const std::vector<std::string>& texts) override;
    std::string name() const override { return "http"; }

private:
    std::string scheme_host_port_;
    std::string path_;
    std::string auth_token_;
    std::chrono::seconds timeout_;
};

// --- corpus translation -----------------------------------------------------

struct TranslateOptions {
    std::size_t max_in_flight = 8;
    int max_attempts = 3;
    double backoff_seconds = 1.0;  // doubled after every failed attempt
    std::size_t chunk_limit = 2000;
    // Replaced in tests to avoid real sleeping.
    std::function<void(double)> sleep = nullptr;
};

struct CostModel {
    double rate_per_million_chars = 0.0;
    double fixed_cost = 0.0;

    void validate() const;
};

struct CostLine {
    std::string id;
    std::size_t chars = 0;
    double cost = 0.0;
};

struct TranslationFailure {
    std::size_t record_index = 0;
    std::string id;
    std::string error;
};

struct TranslationResult {
    std::vector<CorpusRecord> records;  // successful ones, input order
    std::vector<TranslationFailure> failures;
    std::vector<CostLine> costs;  // one per input record
    std::size_t backend_calls = 0;
};

TranslationResult translate_corpus(const std::vector<CorpusRecord>& records,
                                   TranslationBackend& backend, const TranslateOptions& options,
                                   const CostModel& cost_model = {});

double estimate_cost(double chars, const CostModel& model);
double estimate_cost(const std::vector<CorpusRecord>& records, const CostModel& model);
void write_cost_csv(const std::filesystem::path& path, const std::vector<CostLine>& lines);

// --- filtering ----------------------------------------------------------------

struct FilterOptions {
    std::set<std::string> allowed_licenses;
    std::size_t max_tokens = 2048;
    // Strict: records without a license tag are dropped as "unlicensed".
    // Lenient: they pass the license check.
    bool strict = true;
};

struct FilterResult {
    std::vector<CorpusRecord> kept;
    std::map<std::string, std::size_t> dropped;  // reason -> count
};

// Preference records are measured as the longer of prompt+chosen and
// prompt+rejected, templated as one user/assistant exchange.
std::size_t templated_length(const CorpusRecord& record, const Tokenizer& tokenizer);

FilterResult filter_records(const std::vector<CorpusRecord>& records, const FilterOptions& options,
                            const Tokenizer& tokenizer);

}  // namespace langalign
