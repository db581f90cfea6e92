#pragma once

#include <cstdint>
#include <filesystem>
#include <set>
#include <stdexcept>
#include <string>
#include <vector>

#include "langalign/dpo.hpp"
#include "langalign/eval.hpp"
#include "langalign/model.hpp"
#include "langalign/sft.hpp"

namespace langalign {

// One problem with a config field. line is 0 for values that did not come
// from the file (defaults, --set overrides, cross-field checks).
struct ConfigDiagnostic {
    std::string field;
    int line = 0;
    std::string message;

    std::string to_string() const;
};

class ConfigError : public std::runtime_error {
public:
    explicit ConfigError(std::vector<ConfigDiagnostic> diagnostics);
    const std::vector<ConfigDiagnostic>& diagnostics() const { return diagnostics_; }

private:
    std::vector<ConfigDiagnostic> diagnostics_;
};

// The stages a command needs; validation only demands what they use.
enum class Stage { translate, prepare, sft, dpo, eval };
std::set<Stage> all_stages();

struct DataprepSection {
    std::string backend = "identity";  // identity | dictionary | http
    std::string url;
    std::string dictionary;  // TSV for the dictionary backend, empty: built-in
    std::size_t max_in_flight = 8;
    int max_attempts = 3;
    double backoff_seconds = 1.0;
    std::int64_t timeout_seconds = 60;
    std::size_t chunk_limit = 2000;
    double rate_per_million_chars = 20.0;
    double fixed_cost = 0.0;
    std::vector<std::string> allowed_licenses{"apache-2.0", "cc-by-4.0", "mit"};
    bool strict_license = true;
    std::size_t max_tokens = 2048;
};

struct EvalSection {
    std::vector<std::string> tasks;
    Normalization normalization = Normalization::none;
    PromptFormat format = PromptFormat::chat;
    std::size_t threads = 1;
};

struct PipelineConfig {
    std::uint64_t seed = 0;
    bool has_seed = false;
    std::string out_dir = "runs";
    int tokenizer_vocab_size = 512;
    ModelConfig model{128, 128, 4, 4, 2, 352, 2048, 10000.0, 1e-5};  // vocab comes from the tokenizer
    DataprepSection dataprep;
    std::string sft_data;
    double sft_eval_fraction = 0.05;
    SftConfig sft;
    std::string dpo_data;
    std::size_t dpo_max_len = 2048;
    DpoConfig dpo;
    EvalSection eval;
    // Relative paths resolve against this directory (the config file's).
    std::filesystem::path base_dir = ".";

    std::filesystem::path resolve(const std::string& path) const;
    // Seeds derived from the single config seed.
    std::uint64_t init_seed() const { return seed; }
    std::uint64_t sft_seed() const { return seed + 1; }
    std::uint64_t dpo_seed() const { return seed + 2; }
};

// Parses INI-style text: [section] headers, key = value lines, # or ; comments.
// Keys before the first header are top-level (only `seed`). `overrides` are
// "section.key=value" strings applied after the file. Relative paths resolve
// against base_dir. Throws ConfigError listing every problem found.
PipelineConfig parse_config(const std::string& text, const std::string& source_name,
                            const std::vector<std::string>& overrides = {},
                            const std::set<Stage>& stages = all_stages(),
                            const std::filesystem::path& base_dir = ".");

PipelineConfig load_config(const std::filesystem::path& path,
                           const std::vector<std::string>& overrides = {},
                           const std::set<Stage>& stages = all_stages());

// Normalized INI with every field, defaults included.
std::string normalized_config(const PipelineConfig& config);

}  // namespace langalign
