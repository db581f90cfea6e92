#include "langalign/dataprep.hpp"

#include <httplib.h>

#include <atomic>
#include <cmath>
#include <fstream>
#include <json.hpp>
#include <regex>
#include <sstream>
#include <thread>

namespace langalign {

using ojson = nlohmann::ordered_json;

std::size_t utf8_length(std::string_view text) {
    std::size_t n = 0;
    for (unsigned char c : text) {
        if ((c & 0xC0) != 0x80) ++n;
    }
    return n;
}

std::size_t count_chars(const CorpusRecord& record) {
    if (record.is_chat()) {
        std::size_t n = 0;
        for (const auto& turn : record.chat().turns) n += utf8_length(turn.content);
        return n;
    }
    const auto& p = record.preference();
    return utf8_length(p.prompt) + utf8_length(p.chosen) + utf8_length(p.rejected);
}

namespace {

std::string require_string(const ojson& j, const char* key) {
    if (!j.contains(key) || !j.at(key).is_string()) {
        throw FormatError(std::string("missing or non-string field \"") + key + "\"");
    }
    return j.at(key).get<std::string>();
}

// Pointers to every translatable text field, in a fixed order.
std::vector<std::string*> text_fields(CorpusRecord& record) {
    std::vector<std::string*> out;
    if (auto* conv = std::get_if<Conversation>(&record.payload)) {
        for (auto& turn : conv->turns) out.push_back(&turn.content);
    } else {
        auto& p = std::get<PreferencePair>(record.payload);
        out = {&p.prompt, &p.chosen, &p.rejected};
    }
    return out;
}

}  // namespace

CorpusRecord parse_record(std::string_view json_line) {
    ojson j;
    try {
        j = ojson::parse(json_line);
    } catch (const nlohmann::json::exception& e) {
        throw FormatError(std::string("invalid JSON: ") + e.what());
    }
    if (!j.is_object()) {
        throw FormatError("record is not a JSON object");
    }
    CorpusRecord rec;
    rec.id = require_string(j, "id");
    if (j.contains("license") && !j.at("license").is_null()) {
        if (!j.at("license").is_string()) {
            throw FormatError("field \"license\" must be a string");
        }
        rec.license = j.at("license").get<std::string>();
    }
    if (j.contains("messages")) {
        const auto& msgs = j.at("messages");
        if (!msgs.is_array()) {
            throw FormatError("field \"messages\" must be an array");
        }
        Conversation conv;
        for (const auto& m : msgs) {
            if (!m.is_object()) {
                throw FormatError("message is not an object");
            }
            Role role;
            try {
                role = parse_role(require_string(m, "role"));
            } catch (const std::invalid_argument& e) {
                throw FormatError(e.what());
            }
            conv.turns.push_back({role, require_string(m, "content")});
        }
        rec.payload = std::move(conv);
    } else if (j.contains("prompt")) {
        rec.payload = PreferencePair{require_string(j, "prompt"), require_string(j, "chosen"),
                                     require_string(j, "rejected")};
    } else {
        throw FormatError("record has neither \"messages\" nor \"prompt\"");
    }
    rec.char_count = count_chars(rec);
    rec.source = std::string(json_line);
    return rec;
}

std::string serialize_record(const CorpusRecord& record) {
    ojson j;
    ojson original;
    if (!record.source.empty()) {
        original = ojson::parse(record.source);
        j = original;
    } else {
        j["id"] = record.id;
        if (record.license) j["license"] = *record.license;
    }
    j["id"] = record.id;
    if (record.license) {
        j["license"] = *record.license;
    }
    if (record.is_chat()) {
        ojson msgs = ojson::array();
        for (const auto& turn : record.chat().turns) {
            ojson m;
            m["role"] = to_string(turn.role);
            m["content"] = turn.content;
            msgs.push_back(std::move(m));
        }
        // Keep any extra per-message keys from the source.
        if (j.contains("messages") && j["messages"].size() == msgs.size()) {
            for (std::size_t i = 0; i < msgs.size(); ++i) {
                j["messages"][i]["role"] = msgs[i]["role"];
                j["messages"][i]["content"] = msgs[i]["content"];
            }
        } else {
            j["messages"] = std::move(msgs);
        }
    } else {
        const auto& p = record.preference();
        j["prompt"] = p.prompt;
        j["chosen"] = p.chosen;
        j["rejected"] = p.rejected;
    }
    // Unchanged records keep their exact source bytes (spacing, escapes, key order).
    if (!record.source.empty() && j == original) return record.source;
    return j.dump();
}

std::vector<CorpusRecord> read_jsonl(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) {
        throw std::runtime_error("cannot open " + path.string());
    }
    std::vector<CorpusRecord> out;
    std::string line;
    std::size_t line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
        try {
            out.push_back(parse_record(line));
        } catch (const FormatError& e) {
            throw FormatError(path.string() + ":" + std::to_string(line_no) + ": " + e.what());
        }
    }
    return out;
}

void write_jsonl(const std::filesystem::path& path, const std::vector<CorpusRecord>& records) {
    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) {
        throw std::runtime_error("cannot write " + path.string());
    }
    for (const auto& r : records) {
        out << serialize_record(r) << '\n';
    }
}

std::vector<std::string> chunk_document(std::string_view text) {
    std::vector<std::string> chunks;
    std::size_t start = 0;
    while (true) {
        const auto nl = text.find('\n', start);
        if (nl == std::string_view::npos) {
            chunks.emplace_back(text.substr(start));
            return chunks;
        }
        chunks.emplace_back(text.substr(start, nl - start));
        start = nl + 1;
    }
}

std::string reassemble(const std::vector<std::string>& chunks) {
    std::string out;
    for (std::size_t i = 0; i < chunks.size(); ++i) {
        if (i) out.push_back('\n');
        out += chunks[i];
    }
    return out;
}

TranslationJob TranslationJob::from_text(std::string doc_id, std::string_view text) {
    TranslationJob job{std::move(doc_id), {}};
    auto pieces = chunk_document(text);
    for (std::size_t i = 0; i < pieces.size(); ++i) {
        job.chunks.push_back({i, std::move(pieces[i]), std::nullopt, ChunkStatus::pending});
    }
    return job;
}

bool TranslationJob::complete() const {
    return std::all_of(chunks.begin(), chunks.end(),
                       [](const Chunk& c) { return c.status == ChunkStatus::done; });
}

std::string reassemble(const TranslationJob& job) {
    std::vector<std::string> parts;
    for (std::size_t i = 0; i < job.chunks.size(); ++i) {
        const auto& c = job.chunks[i];
        if (c.index != i) {
            throw ChunkError("job " + job.doc_id + ": missing chunk " + std::to_string(i), i);
        }
        if (c.status != ChunkStatus::done || !c.translated) {
            throw ChunkError("job " + job.doc_id + ": chunk " + std::to_string(i) +
                                 (c.status == ChunkStatus::failed ? " failed" : " not translated"),
                             i);
        }
        parts.push_back(*c.translated);
    }
    return reassemble(parts);
}

std::vector<std::string> split_long_chunk(std::string_view chunk, std::size_t limit) {
    if (limit == 0) {
        throw std::invalid_argument("split_long_chunk: limit must be positive");
    }
    std::vector<std::string> pieces;
    while (utf8_length(chunk) > limit) {
        // Byte offset just past the limit-th code point.
        std::size_t cut = 0;
        for (std::size_t seen = 0; cut < chunk.size(); ++cut) {
            if ((static_cast<unsigned char>(chunk[cut]) & 0xC0) != 0x80) {
                if (seen == limit) break;
                ++seen;
            }
        }
        std::size_t split = 0;
        for (std::size_t i = cut; i-- > 0;) {
            if (i + 2 <= cut && chunk[i + 1] == ' ' &&
                (chunk[i] == '.' || chunk[i] == '!' || chunk[i] == '?')) {
                split = i + 2;
                break;
            }
        }
        if (split == 0) split = cut;
        pieces.emplace_back(chunk.substr(0, split));
        chunk.remove_prefix(split);
    }
    pieces.emplace_back(chunk);
    return pieces;
}

DictionaryBackend::DictionaryBackend(std::map<std::string, std::string> entries)
    : entries_(std::move(entries)) {}

DictionaryBackend DictionaryBackend::load(const std::filesystem::path& tsv) {
    std::ifstream in(tsv);
    if (!in) {
        throw std::runtime_error("cannot open dictionary " + tsv.string());
    }
    std::map<std::string, std::string> entries;
    std::string line;
    while (std::getline(in, line)) {
        const auto tab = line.find('\t');
        if (tab == std::string::npos) continue;
        entries[line.substr(0, tab)] = line.substr(tab + 1);
    }
    return DictionaryBackend(std::move(entries));
}

DictionaryBackend DictionaryBackend::english_german() {
    return DictionaryBackend({
        {"the", "die"},       {"a", "ein"},           {"and", "und"},
        {"is", "ist"},        {"cat", "Katze"},       {"dog", "Hund"},
        {"house", "Haus"},    {"hello", "hallo"},     {"yes", "ja"},
        {"no", "nein"},       {"please", "bitte"},    {"thanks", "danke"},
        {"water", "Wasser"},  {"book", "Buch"},       {"good", "gut"},
        {"small", "klein"},   {"big", "groß"},        {"red", "rot"},
        {"green", "grün"},    {"blue", "blau"},       {"I", "ich"},
        {"you", "du"},        {"we", "wir"},          {"write", "schreibe"},
        {"answer", "Antwort"}, {"question", "Frage"}, {"day", "Tag"},
    });
}

std::vector<std::string> DictionaryBackend::translate(const std::vector<std::string>& texts) {
    static constexpr std::string_view kTrailing = ".,!?;:";
    std::vector<std::string> out;
    out.reserve(texts.size());
    for (const auto& text : texts) {
        std::string result;
        std::size_t start = 0;
        while (start <= text.size()) {
            auto end = text.find(' ', start);
            if (end == std::string::npos) end = text.size();
            std::string word = text.substr(start, end - start);
            std::string tail;
            while (!word.empty() && kTrailing.find(word.back()) != std::string_view::npos) {
                tail.insert(tail.begin(), word.back());
                word.pop_back();
            }
            if (auto it = entries_.find(word); it != entries_.end()) {
                word = it->second;
            }
            result += word + tail;
            if (end == text.size()) break;
            result.push_back(' ');
            start = end + 1;
        }
        out.push_back(std::move(result));
    }
    return out;
}

HttpBackend::HttpBackend(std::string url, std::string auth_token, std::chrono::seconds timeout)
    : auth_token_(std::move(auth_token)), timeout_(timeout) {
    static const std::regex pattern(R"(^(http://[^/]+)(/.*)?$)");
    std::smatch m;
    if (!std::regex_match(url, m, pattern)) {
        throw std::invalid_argument("translation backend URL must look like http://host[:port]/path, got '" +
                                    url + "'");
    }
    scheme_host_port_ = m[1].str();
    path_ = m[2].matched ? m[2].str() : "/";
}

std::vector<std::string> HttpBackend::translate(const std::vector<std::string>& texts) {
    httplib::Client client(scheme_host_port_);
    client.set_connection_timeout(timeout_);
    client.set_read_timeout(timeout_);
    client.set_write_timeout(timeout_);
    httplib::Headers headers;
    if (!auth_token_.empty()) {
        headers.emplace("Authorization", "Bearer " + auth_token_);
    }
    nlohmann::json body;
    body["texts"] = texts;
    auto res = client.Post(path_, headers, body.dump(), "application/json");
    if (!res) {
        throw BackendError("translation request to " + scheme_host_port_ + path_ +
                           " failed: " + httplib::to_string(res.error()));
    }
    if (res->status != 200) {
        throw BackendError("translation service returned HTTP " + std::to_string(res->status));
    }
    try {
        auto reply = nlohmann::json::parse(res->body);
        auto out = reply.at("translations").get<std::vector<std::string>>();
        if (out.size() != texts.size()) {
            throw BackendError("translation service returned " + std::to_string(out.size()) +
                               " texts for " + std::to_string(texts.size()));
        }
        return out;
    } catch (const nlohmann::json::exception& e) {
        throw BackendError(std::string("malformed translation reply: ") + e.what());
    }
}

void CostModel::validate() const {
    if (!(rate_per_million_chars >= 0.0) || !std::isfinite(rate_per_million_chars)) {
        throw std::invalid_argument("cost rate must be a finite value >= 0");
    }
    if (!std::isfinite(fixed_cost)) {
        throw std::invalid_argument("fixed cost must be finite");
    }
}

double estimate_cost(double chars, const CostModel& model) {
    model.validate();
    return model.fixed_cost + chars * model.rate_per_million_chars / 1e6;
}

double estimate_cost(const std::vector<CorpusRecord>& records, const CostModel& model) {
    double chars = 0;
    for (const auto& r : records) chars += static_cast<double>(r.char_count);
    return estimate_cost(chars, model);
}

void write_cost_csv(const std::filesystem::path& path, const std::vector<CostLine>& lines) {
    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
    std::ofstream out(path, std::ios::trunc);
    if (!out) {
        throw std::runtime_error("cannot write " + path.string());
    }
    out << "id,chars,cost\n";
    char buf[64];
    for (const auto& l : lines) {
        std::string id = l.id;
        if (id.find_first_of(",\"\n") != std::string::npos) {
            std::string quoted = "\"";
            for (char c : id) {
                if (c == '"') quoted += '"';
                quoted += c;
            }
            id = quoted + "\"";
        }
        std::snprintf(buf, sizeof buf, "%.6f", l.cost);
        out << id << ',' << l.chars << ',' << buf << '\n';
    }
}

namespace {

std::vector<std::string> call_with_retries(TranslationBackend& backend,
                                           const std::vector<std::string>& batch,
                                           const TranslateOptions& options,
                                           std::atomic<std::size_t>& calls) {
    double delay = options.backoff_seconds;
    for (int attempt = 1;; ++attempt) {
        try {
            ++calls;
            auto out = backend.translate(batch);
            if (out.size() != batch.size()) {
                throw BackendError("backend returned " + std::to_string(out.size()) +
                                   " texts for " + std::to_string(batch.size()));
            }
            return out;
        } catch (const std::exception& e) {
            if (attempt >= options.max_attempts) {
                throw BackendError("after " + std::to_string(attempt) + " attempts: " + e.what());
            }
        }
        if (options.sleep) {
            options.sleep(delay);
        } else {
            std::this_thread::sleep_for(std::chrono::duration<double>(delay));
        }
        delay *= 2.0;
    }
}

CorpusRecord translate_record(const CorpusRecord& input, TranslationBackend& backend,
                              const TranslateOptions& options, std::atomic<std::size_t>& calls) {
    CorpusRecord rec = input;
    auto fields = text_fields(rec);

    // Per field, per chunk: how many pieces went to the backend.
    std::vector<std::vector<std::size_t>> layout(fields.size());
    std::vector<std::string> batch;
    for (std::size_t f = 0; f < fields.size(); ++f) {
        for (const auto& chunk : chunk_document(*fields[f])) {
            if (chunk.empty()) {
                layout[f].push_back(0);
                continue;
            }
            auto pieces = split_long_chunk(chunk, options.chunk_limit);
            layout[f].push_back(pieces.size());
            for (auto& p : pieces) batch.push_back(std::move(p));
        }
    }
    if (batch.empty()) {
        return rec;
    }
    const auto translated = call_with_retries(backend, batch, options, calls);
    std::size_t next = 0;
    for (std::size_t f = 0; f < fields.size(); ++f) {
        std::vector<std::string> chunks;
        for (std::size_t count : layout[f]) {
            std::string joined;
            for (std::size_t k = 0; k < count; ++k) joined += translated[next++];
            chunks.push_back(std::move(joined));
        }
        *fields[f] = reassemble(chunks);
    }
    rec.char_count = count_chars(rec);
    return rec;
}

}  // namespace

TranslationResult translate_corpus(const std::vector<CorpusRecord>& records,
                                   TranslationBackend& backend, const TranslateOptions& options,
                                   const CostModel& cost_model) {
    if (options.max_in_flight < 1) {
        throw std::invalid_argument("max_in_flight must be >= 1");
    }
    if (options.max_attempts < 1) {
        throw std::invalid_argument("max_attempts must be >= 1");
    }
    cost_model.validate();

    const std::size_t n = records.size();
    std::vector<std::optional<CorpusRecord>> slots(n);
    std::vector<std::string> errors(n);
    std::atomic<std::size_t> next{0};
    std::atomic<std::size_t> calls{0};
    auto worker = [&] {
        for (std::size_t i = next++; i < n; i = next++) {
            try {
                slots[i] = translate_record(records[i], backend, options, calls);
            } catch (const std::exception& e) {
                errors[i] = e.what();
            }
        }
    };
    const std::size_t threads = std::min(options.max_in_flight, std::max<std::size_t>(n, 1));
    if (threads == 1) {
        worker();
    } else {
        std::vector<std::thread> pool;
        for (std::size_t t = 0; t < threads; ++t) pool.emplace_back(worker);
        for (auto& t : pool) t.join();
    }

    TranslationResult result;
    for (std::size_t i = 0; i < n; ++i) {
        const double cost =
            static_cast<double>(records[i].char_count) * cost_model.rate_per_million_chars / 1e6;
        result.costs.push_back({records[i].id, records[i].char_count, cost});
        if (slots[i]) {
            result.records.push_back(std::move(*slots[i]));
        } else {
            result.failures.push_back({i, records[i].id, errors[i]});
        }
    }
    result.backend_calls = calls;
    return result;
}

std::size_t templated_length(const CorpusRecord& record, const Tokenizer& tokenizer) {
    if (record.is_chat()) {
        return tokenizer.token_length(record.chat());
    }
    const auto& p = record.preference();
    const Conversation chosen{{{Role::user, p.prompt}, {Role::assistant, p.chosen}}};
    const Conversation rejected{{{Role::user, p.prompt}, {Role::assistant, p.rejected}}};
    return std::max(tokenizer.token_length(chosen), tokenizer.token_length(rejected));
}

FilterResult filter_records(const std::vector<CorpusRecord>& records, const FilterOptions& options,
                            const Tokenizer& tokenizer) {
    FilterResult result;
    for (const auto& rec : records) {
        std::string reason;
        if (!rec.license) {
            if (options.strict) reason = "unlicensed";
        } else if (!options.allowed_licenses.count(*rec.license)) {
            reason = "license";
        }
        if (reason.empty()) {
            if (rec.is_chat()) {
                try {
                    rec.chat().validate(true);
                } catch (const std::invalid_argument&) {
                    reason = "invalid";
                }
            } else if (rec.preference().chosen == rec.preference().rejected) {
                reason = "invalid";
            }
        }
        if (reason.empty() && templated_length(rec, tokenizer) > options.max_tokens) {
            reason = "too_long";
        }
        if (reason.empty()) {
            result.kept.push_back(rec);
        } else {
            ++result.dropped[reason];
        }
    }
    return result;
}

}  // namespace langalign
