#include "langalign/pipeline.hpp"

#include <chrono>
#include <cstdio>
#include <cstdlib>
#include <ctime>
#include <fstream>
#include <json.hpp>

#include "langalign/dpo.hpp"
#include "langalign/sft.hpp"

namespace langalign {

std::filesystem::path default_run_dir(const PipelineConfig& config) {
    const std::time_t now = std::time(nullptr);
    std::tm utc{};
    gmtime_r(&now, &utc);
    char stamp[32];
    std::strftime(stamp, sizeof stamp, "%Y%m%d-%H%M%S", &utc);
    return config.resolve(config.out_dir) / (std::string(stamp) + "-seed" + std::to_string(config.seed));
}

namespace {

std::string fmt(const char* pattern, double v) {
    char buf[64];
    std::snprintf(buf, sizeof buf, pattern, v);
    return buf;
}

void write_text(const std::filesystem::path& path, const std::string& text) {
    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw std::runtime_error("cannot write " + path.string());
    out << text;
}

void require_file(const std::filesystem::path& path, const std::string& producer) {
    if (!std::filesystem::exists(path)) {
        throw std::runtime_error("missing " + path.string() + " (run " + producer + " first)");
    }
}

bool license_ok(const CorpusRecord& r, const PipelineConfig& config) {
    if (!r.license) return !config.dataprep.strict_license;
    const auto& allowed = config.dataprep.allowed_licenses;
    return std::find(allowed.begin(), allowed.end(), *r.license) != allowed.end();
}

void append_texts(const CorpusRecord& r, std::vector<std::string>& out) {
    if (r.is_chat()) {
        for (const auto& t : r.chat().turns) out.push_back(t.content);
    } else {
        const auto& p = r.preference();
        out.push_back(p.prompt);
        out.push_back(p.chosen);
        out.push_back(p.rejected);
    }
}

nlohmann::ordered_json filter_summary(std::size_t read, const FilterResult& f) {
    nlohmann::ordered_json j;
    j["read"] = read;
    j["kept"] = f.kept.size();
    j["dropped"] = nlohmann::ordered_json::object();
    for (const auto& [reason, n] : f.dropped) j["dropped"][reason] = n;
    return j;
}

std::vector<CorpusRecord> read_kind(const std::filesystem::path& path, bool want_chat) {
    auto records = read_jsonl(path);
    for (const auto& r : records) {
        if (r.is_chat() != want_chat) {
            throw FormatError(path.string() + ": record " + r.id + " is a " +
                              (r.is_chat() ? "chat" : "preference") + " record, expected " +
                              (want_chat ? "chat" : "preference"));
        }
    }
    return records;
}

ModelConfig model_config(const PipelineConfig& config, const Tokenizer& tokenizer) {
    ModelConfig m = config.model;
    m.vocab_size = tokenizer.vocab_size();
    return m;
}

}  // namespace

std::unique_ptr<TranslationBackend> make_backend(const PipelineConfig& config) {
    const auto& d = config.dataprep;
    if (d.backend == "identity") return std::make_unique<IdentityBackend>();
    if (d.backend == "dictionary") {
        if (d.dictionary.empty()) {
            return std::make_unique<DictionaryBackend>(DictionaryBackend::english_german());
        }
        return std::make_unique<DictionaryBackend>(DictionaryBackend::load(config.resolve(d.dictionary)));
    }
    if (d.backend == "http") {
        const char* token = std::getenv(kTranslateTokenEnv);
        return std::make_unique<HttpBackend>(d.url, token ? token : "",
                                             std::chrono::seconds(d.timeout_seconds));
    }
    throw std::invalid_argument("unknown backend '" + d.backend + "'");
}

TranslateSummary run_translate(const PipelineConfig& config, const std::filesystem::path& input,
                               const std::filesystem::path& output,
                               const std::filesystem::path& cost_csv, const Logger& log) {
    const auto records = read_jsonl(input);
    auto backend = make_backend(config);
    TranslateOptions options;
    options.max_in_flight = config.dataprep.max_in_flight;
    options.max_attempts = config.dataprep.max_attempts;
    options.backoff_seconds = config.dataprep.backoff_seconds;
    options.chunk_limit = config.dataprep.chunk_limit;
    const CostModel cost{config.dataprep.rate_per_million_chars, config.dataprep.fixed_cost};
    const auto result = translate_corpus(records, *backend, options, cost);
    write_jsonl(output, result.records);
    if (!cost_csv.empty()) write_cost_csv(cost_csv, result.costs);

    TranslateSummary s;
    s.records = result.records.size();
    s.failures = result.failures.size();
    s.backend_calls = result.backend_calls;
    s.total_cost = estimate_cost(records, cost);
    for (const auto& f : result.failures) {
        log("failed " + f.id + " (record " + std::to_string(f.record_index) + "): " + f.error);
    }
    log("translated " + std::to_string(s.records) + "/" + std::to_string(records.size()) +
        " records with " + backend->name() + " in " + std::to_string(s.backend_calls) +
        " backend calls, estimated cost " + fmt("%.2f", s.total_cost));
    return s;
}

void run_prepare(const PipelineConfig& config, const RunLayout& run, const Logger& log) {
    const auto sft_records = read_kind(config.resolve(config.sft_data), true);
    const auto dpo_records = read_kind(config.resolve(config.dpo_data), false);

    std::vector<std::string> texts{"system\n", "user\n", "assistant\n"};
    for (const auto* set : {&sft_records, &dpo_records}) {
        for (const auto& r : *set) {
            if (license_ok(r, config)) append_texts(r, texts);
        }
    }
    const auto tokenizer = Tokenizer::train(texts, config.tokenizer_vocab_size);
    log("tokenizer: " + std::to_string(tokenizer.vocab_size()) + " tokens from " +
        std::to_string(texts.size()) + " texts");

    FilterOptions options;
    options.allowed_licenses = {config.dataprep.allowed_licenses.begin(),
                                config.dataprep.allowed_licenses.end()};
    options.strict = config.dataprep.strict_license;
    options.max_tokens = std::min(config.dataprep.max_tokens, config.sft.max_len);
    const auto sft = filter_records(sft_records, options, tokenizer);
    options.max_tokens = std::min(config.dataprep.max_tokens, config.dpo_max_len);
    const auto dpo = filter_records(dpo_records, options, tokenizer);
    if (sft.kept.empty()) throw std::runtime_error("prepare: every SFT record was filtered out");
    if (dpo.kept.empty()) throw std::runtime_error("prepare: every preference record was filtered out");

    std::filesystem::create_directories(run.tokenizer().parent_path());
    tokenizer.save(run.tokenizer());
    write_jsonl(run.sft_data(), sft.kept);
    write_jsonl(run.dpo_data(), dpo.kept);

    nlohmann::ordered_json report;
    report["tokenizer"] = {{"vocab_size", tokenizer.vocab_size()}, {"merges", tokenizer.merge_count()}};
    report["sft"] = filter_summary(sft_records.size(), sft);
    report["dpo"] = filter_summary(dpo_records.size(), dpo);
    write_text(run.prepare_report(), report.dump(2) + "\n");
    log("prepare: kept " + std::to_string(sft.kept.size()) + "/" + std::to_string(sft_records.size()) +
        " SFT and " + std::to_string(dpo.kept.size()) + "/" + std::to_string(dpo_records.size()) +
        " preference records");
}

void run_sft(const PipelineConfig& config, const RunLayout& run, const Logger& log) {
    require_file(run.tokenizer(), "prepare");
    require_file(run.sft_data(), "prepare");
    const auto tokenizer = Tokenizer::load(run.tokenizer());
    const auto records = read_kind(run.sft_data(), true);

    std::vector<TemplatedSequence> train, eval;
    for (const auto& r : records) {
        auto seq = tokenizer.apply_chat_template(r.chat());
        (in_eval_split(r.id, config.sft_eval_fraction, config.seed) ? eval : train).push_back(std::move(seq));
    }
    if (train.empty()) throw std::runtime_error("train-sft: no training sequences after the eval split");

    const auto init = init_params<float>(model_config(config, tokenizer), config.init_seed());
    SftConfig sft = config.sft;
    sft.seed = config.sft_seed();
    log("train-sft: " + std::to_string(train.size()) + " train / " + std::to_string(eval.size()) +
        " eval sequences, " + std::to_string(init.parameter_count()) + " parameters");
    const auto every = std::max<std::int64_t>(1, sft.total_steps / 10);
    const auto result = train_sft(
        sft, std::span<const TemplatedSequence>(train), init, std::span<const TemplatedSequence>(eval),
        [&](const SftMetric& m) {
            if (m.step % every == 0 || m.eval_loss) {
                std::string line = "  step " + std::to_string(m.step) + " lr " + fmt("%.3g", m.lr) +
                                   " loss " + fmt("%.4f", m.loss);
                if (m.eval_loss) line += " eval " + fmt("%.4f", *m.eval_loss);
                log(line);
            }
        });
    save_checkpoint(result.params, run.sft_checkpoint());
    write_sft_metrics(run.sft_metrics(), result.metrics);
    log("train-sft: packing efficiency " + fmt("%.3f", result.packing_efficiency) + ", wrote " +
        run.sft_checkpoint().string());
}

void run_dpo(const PipelineConfig& config, const RunLayout& run, const Logger& log) {
    require_file(run.tokenizer(), "prepare");
    require_file(run.dpo_data(), "prepare");
    require_file(run.sft_checkpoint(), "train-sft");
    const auto tokenizer = Tokenizer::load(run.tokenizer());
    const auto sft_params = load_checkpoint<float>(run.sft_checkpoint());
    if (sft_params.config.vocab_size != tokenizer.vocab_size()) {
        throw std::runtime_error("train-dpo: checkpoint vocab does not match the tokenizer");
    }
    std::vector<EncodedPair> pairs;
    for (const auto& r : read_kind(run.dpo_data(), false)) {
        pairs.push_back(encode_pair(tokenizer, r.id, r.preference(), config.dpo_max_len));
    }
    DpoConfig dpo = config.dpo;
    dpo.seed = config.dpo_seed();
    const auto result = train_dpo(dpo, sft_params, std::span<const EncodedPair>(pairs),
                                  [&](const DpoMetric& m) {
                                      if (m.eval_acc || m.step % 10 == 0) {
                                          std::string line = "  step " + std::to_string(m.step) +
                                                             " loss " + fmt("%.4f", m.loss) +
                                                             " margin " + fmt("%.4f", m.margin) +
                                                             " acc " + fmt("%.3f", m.acc);
                                          if (m.eval_acc) line += " eval_acc " + fmt("%.3f", *m.eval_acc);
                                          log(line);
                                      }
                                  });
    save_checkpoint(result.params, run.dpo_checkpoint());
    write_dpo_metrics(run.dpo_metrics(), result.metrics);
    write_text(run.dpo_summary(), summary_json(result.summary) + "\n");
    log("train-dpo: " + std::to_string(result.summary.steps) + " steps, train accuracy " +
        fmt("%.3f", result.summary.initial_train_acc) + " -> " + fmt("%.3f", result.summary.train_acc));
}

EvalReport run_eval(const PipelineConfig& config, const RunLayout& run, const Logger& log) {
    require_file(run.tokenizer(), "prepare");
    const auto tokenizer = Tokenizer::load(run.tokenizer());
    const bool have_sft = std::filesystem::exists(run.sft_checkpoint());
    const bool have_dpo = std::filesystem::exists(run.dpo_checkpoint());
    if (!have_sft && !have_dpo) throw std::runtime_error("eval: no checkpoint in " + run.dir.string());

    EvalOptions options;
    options.normalization = config.eval.normalization;
    options.format = config.eval.format;
    options.threads = config.eval.threads;
    std::vector<std::filesystem::path> tasks;
    for (const auto& t : config.eval.tasks) tasks.push_back(config.resolve(t));

    const auto main_params = load_checkpoint<float>(have_dpo ? run.dpo_checkpoint() : run.sft_checkpoint());
    EvalReport report;
    for (const auto& path : tasks) {
        const auto items = load_task(path);
        report.tasks.push_back(evaluate(main_params, tokenizer, items, options, path.stem().string()));
        log("eval " + report.tasks.back().name + ": accuracy " + fmt("%.4f", report.tasks.back().accuracy));
    }
    write_text(run.eval_report(), report_json(report));
    write_text(run.eval_table(), report_table(report));

    if (have_sft && have_dpo) {
        const auto sft_params = load_checkpoint<float>(run.sft_checkpoint());
        const auto c = compare_models(NamedModel{"sft", sft_params, tokenizer},
                                      NamedModel{"dpo", main_params, tokenizer}, tasks, options);
        const auto table = comparison_table(c);
        write_text(run.comparison(), table);
        log("comparison:\n" + table);
    }
    return report;
}

}  // namespace langalign
