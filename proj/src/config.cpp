#include "langalign/config.hpp"

#include <charconv>
#include <fstream>
#include <functional>
#include <map>
#include <sstream>

namespace langalign {

std::string ConfigDiagnostic::to_string() const {
    std::string out = field;
    if (line > 0) out += " (line " + std::to_string(line) + ")";
    return out + ": " + message;
}

namespace {

std::string join_diagnostics(const std::vector<ConfigDiagnostic>& diagnostics) {
    std::string out = "invalid config";
    for (const auto& d : diagnostics) out += "\n  " + d.to_string();
    return out;
}

}  // namespace

ConfigError::ConfigError(std::vector<ConfigDiagnostic> diagnostics)
    : std::runtime_error(join_diagnostics(diagnostics)), diagnostics_(std::move(diagnostics)) {}

std::set<Stage> all_stages() {
    return {Stage::translate, Stage::prepare, Stage::sft, Stage::dpo, Stage::eval};
}

std::filesystem::path PipelineConfig::resolve(const std::string& path) const {
    const std::filesystem::path p(path);
    return p.is_absolute() ? p : base_dir / p;
}

namespace {

std::string trim(std::string_view s) {
    const auto b = s.find_first_not_of(" \t\r");
    if (b == std::string_view::npos) return {};
    const auto e = s.find_last_not_of(" \t\r");
    return std::string(s.substr(b, e - b + 1));
}

template <typename N>
N parse_number(const std::string& text) {
    N value{};
    const char* end = text.data() + text.size();
    const auto [ptr, ec] = std::from_chars(text.data(), end, value);
    if (ec != std::errc() || ptr != end || text.empty()) {
        if constexpr (std::is_floating_point_v<N>) {
            throw std::invalid_argument("expected a number, got '" + text + "'");
        } else if constexpr (std::is_unsigned_v<N>) {
            throw std::invalid_argument("expected a non-negative integer, got '" + text + "'");
        } else {
            throw std::invalid_argument("expected an integer, got '" + text + "'");
        }
    }
    return value;
}

bool parse_bool(const std::string& text) {
    if (text == "true" || text == "yes" || text == "1") return true;
    if (text == "false" || text == "no" || text == "0") return false;
    throw std::invalid_argument("expected true or false, got '" + text + "'");
}

std::vector<std::string> parse_list(const std::string& text) {
    std::vector<std::string> out;
    std::stringstream ss(text);
    std::string item;
    while (std::getline(ss, item, ',')) {
        item = trim(item);
        if (!item.empty()) out.push_back(item);
    }
    return out;
}

std::string format_double(double v) {
    char buf[64];
    const auto r = std::to_chars(buf, buf + sizeof buf, v);
    std::string s(buf, r.ptr);
    if (s.find_first_of(".en") == std::string::npos) s += ".0";
    return s;
}

std::string format_list(const std::vector<std::string>& items) {
    std::string out;
    for (std::size_t i = 0; i < items.size(); ++i) out += (i ? ", " : "") + items[i];
    return out;
}

struct Field {
    std::string name;
    std::function<void(PipelineConfig&, const std::string&)> set;
    std::function<std::string(const PipelineConfig&)> get;
};

template <typename N>
Field number(const std::string& name, N PipelineConfig::*member) {
    return {name, [member](PipelineConfig& c, const std::string& v) { c.*member = parse_number<N>(v); },
            [member](const PipelineConfig& c) {
                if constexpr (std::is_floating_point_v<N>) return format_double(c.*member);
                else return std::to_string(c.*member);
            }};
}

template <typename N, typename S>
Field number(const std::string& name, S PipelineConfig::*section, N S::*member) {
    return {name,
            [section, member](PipelineConfig& c, const std::string& v) {
                (c.*section).*member = parse_number<N>(v);
            },
            [section, member](const PipelineConfig& c) {
                if constexpr (std::is_floating_point_v<N>) return format_double((c.*section).*member);
                else return std::to_string((c.*section).*member);
            }};
}

Field text(const std::string& name, std::string PipelineConfig::*member) {
    return {name, [member](PipelineConfig& c, const std::string& v) { c.*member = v; },
            [member](const PipelineConfig& c) { return c.*member; }};
}

template <typename S>
Field text(const std::string& name, S PipelineConfig::*section, std::string S::*member) {
    return {name, [section, member](PipelineConfig& c, const std::string& v) { (c.*section).*member = v; },
            [section, member](const PipelineConfig& c) { return (c.*section).*member; }};
}

Field schedule(const std::string& name, std::function<ScheduleKind&(PipelineConfig&)> ref) {
    return {name, [ref](PipelineConfig& c, const std::string& v) { ref(c) = parse_schedule_kind(v); },
            [ref](const PipelineConfig& c) { return to_string(ref(const_cast<PipelineConfig&>(c))); }};
}

const std::vector<Field>& fields() {
    using C = PipelineConfig;
    static const std::vector<Field> table = [] {
        std::vector<Field> f;
        f.push_back({"seed",
                     [](C& c, const std::string& v) {
                         c.seed = parse_number<std::uint64_t>(v);
                         c.has_seed = true;
                     },
                     [](const C& c) { return c.has_seed ? std::to_string(c.seed) : std::string(); }});
        f.push_back(text("run.out_dir", &C::out_dir));
        f.push_back(number("tokenizer.vocab_size", &C::tokenizer_vocab_size));

        f.push_back(number("model.d_model", &C::model, &ModelConfig::d_model));
        f.push_back(number("model.n_layers", &C::model, &ModelConfig::n_layers));
        f.push_back(number("model.n_heads", &C::model, &ModelConfig::n_heads));
        f.push_back(number("model.n_kv_heads", &C::model, &ModelConfig::n_kv_heads));
        f.push_back(number("model.d_ff", &C::model, &ModelConfig::d_ff));
        f.push_back(number("model.max_seq_len", &C::model, &ModelConfig::max_seq_len));
        f.push_back(number("model.rope_theta", &C::model, &ModelConfig::rope_theta));
        f.push_back(number("model.norm_eps", &C::model, &ModelConfig::norm_eps));

        f.push_back(text("dataprep.backend", &C::dataprep, &DataprepSection::backend));
        f.push_back(text("dataprep.url", &C::dataprep, &DataprepSection::url));
        f.push_back(text("dataprep.dictionary", &C::dataprep, &DataprepSection::dictionary));
        f.push_back(number("dataprep.max_in_flight", &C::dataprep, &DataprepSection::max_in_flight));
        f.push_back(number("dataprep.max_attempts", &C::dataprep, &DataprepSection::max_attempts));
        f.push_back(number("dataprep.backoff_seconds", &C::dataprep, &DataprepSection::backoff_seconds));
        f.push_back(number("dataprep.timeout_seconds", &C::dataprep, &DataprepSection::timeout_seconds));
        f.push_back(number("dataprep.chunk_limit", &C::dataprep, &DataprepSection::chunk_limit));
        f.push_back(number("dataprep.rate_per_million_chars", &C::dataprep,
                           &DataprepSection::rate_per_million_chars));
        f.push_back(number("dataprep.fixed_cost", &C::dataprep, &DataprepSection::fixed_cost));
        f.push_back({"dataprep.allowed_licenses",
                     [](C& c, const std::string& v) { c.dataprep.allowed_licenses = parse_list(v); },
                     [](const C& c) { return format_list(c.dataprep.allowed_licenses); }});
        f.push_back({"dataprep.strict_license",
                     [](C& c, const std::string& v) { c.dataprep.strict_license = parse_bool(v); },
                     [](const C& c) { return std::string(c.dataprep.strict_license ? "true" : "false"); }});
        f.push_back(number("dataprep.max_tokens", &C::dataprep, &DataprepSection::max_tokens));

        f.push_back(text("sft.data", &C::sft_data));
        f.push_back(number("sft.eval_fraction", &C::sft_eval_fraction));
        f.push_back(number("sft.batch_size", &C::sft, &SftConfig::batch_size));
        f.push_back(number("sft.total_steps", &C::sft, &SftConfig::total_steps));
        f.push_back(number("sft.max_len", &C::sft, &SftConfig::max_len));
        f.push_back(number("sft.neftune_alpha", &C::sft, &SftConfig::neftune_alpha));
        f.push_back(schedule("sft.schedule", [](C& c) -> ScheduleKind& { return c.sft.schedule; }));
        f.push_back(number("sft.warmup_steps", &C::sft, &SftConfig::warmup_steps));
        f.push_back(number("sft.peak_lr", &C::sft, &SftConfig::peak_lr));
        f.push_back(number("sft.min_lr", &C::sft, &SftConfig::min_lr));
        f.push_back(number("sft.clip_norm", &C::sft, &SftConfig::clip_norm));
        f.push_back(number("sft.eval_every", &C::sft, &SftConfig::eval_every));

        f.push_back(text("dpo.data", &C::dpo_data));
        f.push_back(number("dpo.max_len", &C::dpo_max_len));
        f.push_back(number("dpo.beta", &C::dpo, &DpoConfig::beta));
        f.push_back(number("dpo.batch_size", &C::dpo, &DpoConfig::batch_size));
        f.push_back(number("dpo.epochs", &C::dpo, &DpoConfig::epochs));
        f.push_back(schedule("dpo.schedule", [](C& c) -> ScheduleKind& { return c.dpo.schedule; }));
        f.push_back(number("dpo.warmup_steps", &C::dpo, &DpoConfig::warmup_steps));
        f.push_back(number("dpo.peak_lr", &C::dpo, &DpoConfig::peak_lr));
        f.push_back(number("dpo.min_lr", &C::dpo, &DpoConfig::min_lr));
        f.push_back(number("dpo.clip_norm", &C::dpo, &DpoConfig::clip_norm));
        f.push_back(number("dpo.eval_fraction", &C::dpo, &DpoConfig::eval_fraction));
        f.push_back(number("dpo.eval_every", &C::dpo, &DpoConfig::eval_every));

        f.push_back({"eval.tasks",
                     [](C& c, const std::string& v) { c.eval.tasks = parse_list(v); },
                     [](const C& c) { return format_list(c.eval.tasks); }});
        f.push_back({"eval.normalization",
                     [](C& c, const std::string& v) { c.eval.normalization = parse_normalization(v); },
                     [](const C& c) { return to_string(c.eval.normalization); }});
        f.push_back({"eval.format",
                     [](C& c, const std::string& v) { c.eval.format = parse_prompt_format(v); },
                     [](const C& c) { return to_string(c.eval.format); }});
        f.push_back(number("eval.threads", &C::eval, &EvalSection::threads));
        return f;
    }();
    return table;
}

const Field* find_field(const std::string& name) {
    for (const auto& f : fields()) {
        if (f.name == name) return &f;
    }
    return nullptr;
}

struct Assignment {
    std::string field;
    std::string value;
    int line;
};

class Validator {
public:
    Validator(const PipelineConfig& c, const std::map<std::string, int>& lines,
              std::vector<ConfigDiagnostic>& out)
        : c_(c), lines_(lines), out_(out) {}

    void fail(const std::string& field, const std::string& message) {
        const auto it = lines_.find(field);
        out_.push_back({field, it == lines_.end() ? 0 : it->second, message});
    }
    void require(const std::string& field) {
        if (!lines_.count(field)) fail(field, "required field is missing");
    }
    void check(bool ok, const std::string& field, const std::string& message) {
        if (!ok) fail(field, message);
    }
    void path_exists(const std::string& field, const std::string& path) {
        if (!path.empty() && !std::filesystem::exists(c_.resolve(path))) {
            fail(field, "path does not exist: " + c_.resolve(path).string());
        }
    }

private:
    const PipelineConfig& c_;
    const std::map<std::string, int>& lines_;
    std::vector<ConfigDiagnostic>& out_;
};

void validate(const PipelineConfig& c, const std::map<std::string, int>& lines,
              const std::set<Stage>& stages, std::vector<ConfigDiagnostic>& out) {
    Validator v(c, lines, out);
    if (stages.count(Stage::prepare) || stages.count(Stage::sft) || stages.count(Stage::dpo) ||
        stages.count(Stage::eval)) {
        v.require("seed");
    }

    v.check(c.tokenizer_vocab_size >= Tokenizer::kFirstMerge, "tokenizer.vocab_size",
            "must be >= " + std::to_string(Tokenizer::kFirstMerge));
    const auto& m = c.model;
    v.check(m.d_model > 0, "model.d_model", "must be > 0");
    v.check(m.n_layers > 0, "model.n_layers", "must be > 0");
    v.check(m.n_heads > 0 && m.d_model % std::max(m.n_heads, 1) == 0, "model.n_heads",
            "must be > 0 and divide model.d_model");
    v.check(m.n_heads > 0 && m.d_model % std::max(m.n_heads, 1) == 0 && (m.d_model / std::max(m.n_heads, 1)) % 2 == 0,
            "model.d_model", "head dimension d_model / n_heads must be even");
    v.check(m.n_kv_heads > 0 && m.n_heads % std::max(m.n_kv_heads, 1) == 0, "model.n_kv_heads",
            "must be > 0 and divide model.n_heads");
    v.check(m.d_ff > 0, "model.d_ff", "must be > 0");
    v.check(m.max_seq_len > 0, "model.max_seq_len", "must be > 0");
    v.check(m.rope_theta > 0.0, "model.rope_theta", "must be > 0");
    v.check(m.norm_eps > 0.0, "model.norm_eps", "must be > 0");

    const auto& d = c.dataprep;
    v.check(d.backend == "identity" || d.backend == "dictionary" || d.backend == "http",
            "dataprep.backend", "must be identity, dictionary or http, got '" + d.backend + "'");
    if (stages.count(Stage::translate) && d.backend == "http") {
        v.check(!d.url.empty(), "dataprep.url", "required when dataprep.backend = http");
    }
    v.path_exists("dataprep.dictionary", d.dictionary);
    v.check(d.max_in_flight >= 1, "dataprep.max_in_flight", "must be >= 1");
    v.check(d.max_attempts >= 1, "dataprep.max_attempts", "must be >= 1");
    v.check(d.backoff_seconds >= 0.0, "dataprep.backoff_seconds", "must be >= 0");
    v.check(d.timeout_seconds > 0, "dataprep.timeout_seconds", "must be > 0");
    v.check(d.chunk_limit >= 1, "dataprep.chunk_limit", "must be >= 1");
    v.check(d.rate_per_million_chars >= 0.0, "dataprep.rate_per_million_chars", "must be >= 0");
    v.check(d.fixed_cost >= 0.0, "dataprep.fixed_cost", "must be >= 0");
    v.check(d.max_tokens >= 1, "dataprep.max_tokens", "must be >= 1");

    if (stages.count(Stage::prepare)) {
        v.require("sft.data");
        v.require("dpo.data");
        v.path_exists("sft.data", c.sft_data);
        v.path_exists("dpo.data", c.dpo_data);
    }
    const auto seq_len = static_cast<std::size_t>(std::max(m.max_seq_len, 0));
    const auto& s = c.sft;
    v.check(c.sft_eval_fraction >= 0.0 && c.sft_eval_fraction < 1.0, "sft.eval_fraction",
            "must be in [0, 1)");
    v.check(s.batch_size >= 1, "sft.batch_size", "must be >= 1");
    v.check(s.total_steps >= 1, "sft.total_steps", "must be >= 1");
    v.check(s.max_len >= 1 && s.max_len <= seq_len, "sft.max_len",
            "must be in [1, model.max_seq_len = " + std::to_string(seq_len) + "]");
    v.check(s.neftune_alpha >= 0.0, "sft.neftune_alpha", "must be >= 0");
    v.check(s.warmup_steps >= -1 && s.warmup_steps <= s.total_steps, "sft.warmup_steps",
            "must be -1 (10% of total_steps) or in [0, sft.total_steps]");
    if (stages.count(Stage::sft)) {
        v.require("sft.peak_lr");
        if (lines.count("sft.peak_lr")) v.check(s.peak_lr > 0.0, "sft.peak_lr", "must be > 0");
    }
    v.check(s.min_lr >= 0.0, "sft.min_lr", "must be >= 0");
    v.check(s.clip_norm >= 0.0, "sft.clip_norm", "must be >= 0 (0 disables clipping)");
    v.check(s.eval_every >= 0, "sft.eval_every", "must be >= 0");

    const auto& p = c.dpo;
    v.check(c.dpo_max_len >= 1 && c.dpo_max_len <= seq_len, "dpo.max_len",
            "must be in [1, model.max_seq_len = " + std::to_string(seq_len) + "]");
    v.check(p.beta > 0.0, "dpo.beta", "must be > 0");
    v.check(p.batch_size >= 1, "dpo.batch_size", "must be >= 1");
    v.check(p.epochs >= 0, "dpo.epochs", "must be >= 0");
    v.check(p.warmup_steps >= -1, "dpo.warmup_steps", "must be -1 (10% of steps) or >= 0");
    if (stages.count(Stage::dpo)) {
        v.require("dpo.peak_lr");
        if (lines.count("dpo.peak_lr")) v.check(p.peak_lr > 0.0, "dpo.peak_lr", "must be > 0");
    }
    v.check(p.min_lr >= 0.0, "dpo.min_lr", "must be >= 0");
    v.check(p.clip_norm >= 0.0, "dpo.clip_norm", "must be >= 0 (0 disables clipping)");
    v.check(p.eval_fraction >= 0.0 && p.eval_fraction < 1.0, "dpo.eval_fraction", "must be in [0, 1)");
    v.check(p.eval_every >= 0, "dpo.eval_every", "must be >= 0");

    if (stages.count(Stage::eval)) {
        v.require("eval.tasks");
        for (const auto& t : c.eval.tasks) v.path_exists("eval.tasks", t);
    }
    v.check(c.eval.threads >= 1, "eval.threads", "must be >= 1");
}

}  // namespace

PipelineConfig parse_config(const std::string& text, const std::string& source_name,
                            const std::vector<std::string>& overrides,
                            const std::set<Stage>& stages, const std::filesystem::path& base_dir) {
    std::vector<ConfigDiagnostic> diagnostics;
    std::vector<Assignment> assignments;

    std::stringstream in(text);
    std::string raw;
    std::string section;
    int line_no = 0;
    while (std::getline(in, raw)) {
        ++line_no;
        const std::string line = trim(raw);
        if (line.empty() || line[0] == '#' || line[0] == ';') continue;
        if (line.front() == '[') {
            if (line.back() != ']') {
                diagnostics.push_back({source_name, line_no, "unterminated section header"});
                continue;
            }
            section = trim(std::string_view(line).substr(1, line.size() - 2));
            continue;
        }
        const auto eq = line.find('=');
        if (eq == std::string::npos) {
            diagnostics.push_back({source_name, line_no, "expected key = value, got '" + line + "'"});
            continue;
        }
        const std::string key = trim(std::string_view(line).substr(0, eq));
        const std::string name = section.empty() ? key : section + "." + key;
        assignments.push_back({name, trim(std::string_view(line).substr(eq + 1)), line_no});
    }
    for (const auto& o : overrides) {
        const auto eq = o.find('=');
        if (eq == std::string::npos) {
            diagnostics.push_back({o, 0, "override must look like section.key=value"});
            continue;
        }
        assignments.push_back({trim(o.substr(0, eq)), trim(o.substr(eq + 1)), 0});
    }

    PipelineConfig config;
    config.base_dir = base_dir;
    std::map<std::string, int> lines;  // fields that were set, with their line
    for (const auto& a : assignments) {
        const Field* field = find_field(a.field);
        if (!field) {
            diagnostics.push_back({a.field, a.line, "unknown field"});
            continue;
        }
        if (a.line > 0) {
            const auto prev = lines.find(a.field);
            if (prev != lines.end() && prev->second > 0) {
                diagnostics.push_back({a.field, a.line,
                                       "duplicate (first set on line " + std::to_string(prev->second) + ")"});
                continue;
            }
        }
        try {
            field->set(config, a.value);
            lines[a.field] = a.line;
        } catch (const std::exception& e) {
            diagnostics.push_back({a.field, a.line, e.what()});
            lines[a.field] = a.line;
        }
    }
    if (diagnostics.empty()) validate(config, lines, stages, diagnostics);
    if (!diagnostics.empty()) throw ConfigError(std::move(diagnostics));
    return config;
}

PipelineConfig load_config(const std::filesystem::path& path, const std::vector<std::string>& overrides,
                           const std::set<Stage>& stages) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw ConfigError({{path.string(), 0, "cannot read config file"}});
    std::stringstream ss;
    ss << in.rdbuf();
    const auto base = path.has_parent_path() ? path.parent_path() : std::filesystem::path(".");
    return parse_config(ss.str(), path.string(), overrides, stages, base);
}

std::string normalized_config(const PipelineConfig& config) {
    std::string out;
    std::string current;
    for (const auto& f : fields()) {
        const auto dot = f.name.find('.');
        const std::string section = dot == std::string::npos ? "" : f.name.substr(0, dot);
        const std::string key = dot == std::string::npos ? f.name : f.name.substr(dot + 1);
        if (section != current) {
            out += "\n[" + section + "]\n";
            current = section;
        }
        const std::string value = f.get(config);
        out += key + " =" + (value.empty() ? "" : " " + value) + "\n";
    }
    return out;
}

}  // namespace langalign
