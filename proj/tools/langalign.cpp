#include <CLI11.hpp>

#include <cstdio>
#include <fstream>
#include <iostream>
#include <sstream>

#include "langalign/config.hpp"
#include "langalign/pipeline.hpp"
#include "langalign/synthetic.hpp"

using namespace langalign;

namespace {

constexpr int kOk = 0;
constexpr int kUsage = 1;
constexpr int kRuntime = 2;

class UsageError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

void log_line(const std::string& line) { std::cerr << line << '\n'; }

struct ConfigFlags {
    std::string path;
    std::vector<std::string> overrides;
    std::optional<std::uint64_t> seed;

    void add_to(CLI::App* cmd, bool required) {
        auto* opt = cmd->add_option("-c,--config", path, "pipeline config (INI)");
        if (required) opt->required();
        cmd->add_option("--set", overrides, "override a config field, e.g. --set dpo.beta=0.2");
        cmd->add_option("--seed", seed, "same as seed in the config");
    }

    std::vector<std::string> all_overrides(std::vector<std::string> extra = {}) const {
        auto out = overrides;
        if (seed) out.push_back("seed=" + std::to_string(*seed));
        out.insert(out.end(), extra.begin(), extra.end());
        return out;
    }

    PipelineConfig load(const std::set<Stage>& stages, std::vector<std::string> extra = {}) const {
        if (path.empty()) return parse_config("", "<flags>", all_overrides(extra), stages);
        return load_config(path, all_overrides(extra), stages);
    }
};

RunLayout layout_for(const std::string& run_dir, const PipelineConfig& config, bool create) {
    if (!run_dir.empty()) return RunLayout{run_dir};
    if (!create) throw UsageError("--run-dir is required");
    return RunLayout{default_run_dir(config)};
}

std::string exact(double v) {
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return buf;
}

std::string money(double v) {
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.2f", v);
    return buf;
}

void write_toy_data(const std::filesystem::path& dir, std::uint64_t seed) {
    auto sft = synthetic::ordering_chats(400, seed);
    auto research_only = synthetic::ordering_chats(12, seed + 100, "cc-by-nc-4.0");
    for (auto& r : research_only) r.id = "nc-" + r.id;
    auto untagged = synthetic::ordering_chats(6, seed + 200);
    for (auto& r : untagged) {
        r.id = "untagged-" + r.id;
        r.license.reset();
        r.source.clear();
    }
    sft.insert(sft.end(), research_only.begin(), research_only.end());
    sft.insert(sft.end(), untagged.begin(), untagged.end());

    auto dpo = synthetic::preference_corpus(320, seed + 1);
    auto dpo_nc = synthetic::preference_corpus(10, seed + 300, "cc-by-nc-4.0");
    for (auto& r : dpo_nc) r.id = "nc-" + r.id;
    dpo.insert(dpo.end(), dpo_nc.begin(), dpo_nc.end());

    write_jsonl(dir / "sft.jsonl", sft);
    write_jsonl(dir / "dpo.jsonl", dpo);
    write_task(dir / "tasks" / "ordering4.jsonl", synthetic::ordering_task(120, seed + 2, 4));
    write_task(dir / "tasks" / "ordering2.jsonl", synthetic::ordering_task(120, seed + 3, 2));
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Language-transfer alignment pipeline: translate, prepare, SFT, DPO, evaluate."};
    app.require_subcommand(1);

    // cost-estimate
    auto* cost = app.add_subcommand("cost-estimate", "translation cost for a character count or corpus");
    ConfigFlags cost_cfg;
    std::optional<double> cost_chars;
    std::string cost_input;
    std::optional<double> cost_rate, cost_fixed;
    cost_cfg.add_to(cost, false);
    auto* chars_opt = cost->add_option("--chars", cost_chars, "number of characters");
    auto* input_opt = cost->add_option("--input", cost_input, "JSONL corpus to count");
    chars_opt->excludes(input_opt);
    cost->add_option("--rate", cost_rate, "currency per million characters (dataprep.rate_per_million_chars)");
    cost->add_option("--fixed", cost_fixed, "fixed cost (dataprep.fixed_cost)");

    // translate
    auto* translate = app.add_subcommand("translate", "translate a chat or preference JSONL corpus");
    ConfigFlags tr_cfg;
    std::string tr_input, tr_output, tr_costs;
    std::optional<std::string> tr_backend, tr_url, tr_dictionary;
    std::optional<std::size_t> tr_in_flight;
    tr_cfg.add_to(translate, false);
    translate->add_option("-i,--input", tr_input, "input JSONL")->required();
    translate->add_option("-o,--output", tr_output, "output JSONL")->required();
    translate->add_option("--cost-csv", tr_costs, "write per-record costs (id,chars,cost)");
    translate->add_option("--backend", tr_backend, "identity | dictionary | http (dataprep.backend)");
    translate->add_option("--url", tr_url, "http backend endpoint (dataprep.url)");
    translate->add_option("--dictionary", tr_dictionary, "TSV for the dictionary backend (dataprep.dictionary)");
    translate->add_option("--max-in-flight", tr_in_flight, "concurrent backend calls (dataprep.max_in_flight)");

    // stage commands
    struct StageCommand {
        CLI::App* app;
        ConfigFlags cfg;
        std::string run_dir;
    };
    std::map<std::string, StageCommand> stages;
    for (const auto& [name, help] : std::vector<std::pair<std::string, std::string>>{
             {"prepare", "filter corpora and train the tokenizer into a new run directory"},
             {"train-sft", "supervised finetuning from the prepared data"},
             {"train-dpo", "DPO from the SFT checkpoint"},
             {"eval", "multiple-choice evaluation of the run's checkpoints"},
             {"run-all", "prepare, train-sft, train-dpo and eval in one run directory"}}) {
        auto& s = stages[name];
        s.app = app.add_subcommand(name, help);
        s.cfg.add_to(s.app, true);
        s.app->add_option("--run-dir", s.run_dir,
                          name == "prepare" || name == "run-all"
                              ? "run directory (default: <run.out_dir>/<timestamp>-seed<seed>)"
                              : "run directory written by the earlier stages");
    }

    // validate-config
    auto* validate = app.add_subcommand("validate-config", "check a config and print it with defaults");
    std::string validate_path;
    std::vector<std::string> validate_overrides;
    validate->add_option("config", validate_path, "config file")->required();
    validate->add_option("--set", validate_overrides, "override a config field");

    // toy-data
    auto* toy = app.add_subcommand("toy-data", "write the synthetic German toy corpora and tasks");
    std::string toy_dir;
    std::uint64_t toy_seed = 7;
    toy->add_option("-o,--out", toy_dir, "output directory")->required();
    toy->add_option("--seed", toy_seed, "generator seed");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? kOk : kUsage;
    }

    try {
        if (cost->parsed()) {
            std::vector<std::string> extra;
            if (cost_rate) extra.push_back("dataprep.rate_per_million_chars=" + exact(*cost_rate));
            if (cost_fixed) extra.push_back("dataprep.fixed_cost=" + exact(*cost_fixed));
            const auto config = cost_cfg.load({Stage::translate}, extra);
            const CostModel model{config.dataprep.rate_per_million_chars, config.dataprep.fixed_cost};
            double total = 0.0;
            if (cost_chars) {
                if (*cost_chars < 0) throw UsageError("--chars must be >= 0");
                total = estimate_cost(*cost_chars, model);
            } else if (!cost_input.empty()) {
                total = estimate_cost(read_jsonl(cost_input), model);
            } else {
                throw UsageError("cost-estimate needs --chars or --input");
            }
            std::cout << money(total) << '\n';
        } else if (translate->parsed()) {
            std::vector<std::string> extra;
            if (tr_backend) extra.push_back("dataprep.backend=" + *tr_backend);
            if (tr_url) extra.push_back("dataprep.url=" + *tr_url);
            if (tr_dictionary) extra.push_back("dataprep.dictionary=" + *tr_dictionary);
            if (tr_in_flight) extra.push_back("dataprep.max_in_flight=" + std::to_string(*tr_in_flight));
            const auto config = tr_cfg.load({Stage::translate}, extra);
            const auto s = run_translate(config, tr_input, tr_output, tr_costs, log_line);
            if (s.failures > 0) return kRuntime;
        } else if (validate->parsed()) {
            const auto config = load_config(validate_path, validate_overrides);
            std::cout << "# normalized " << validate_path << '\n' << normalized_config(config);
        } else if (toy->parsed()) {
            write_toy_data(toy_dir, toy_seed);
            log_line("wrote toy data to " + toy_dir);
        } else {
            for (auto& [name, s] : stages) {
                if (!s.app->parsed()) continue;
                std::set<Stage> needs;
                if (name == "prepare") needs = {Stage::prepare};
                if (name == "train-sft") needs = {Stage::sft};
                if (name == "train-dpo") needs = {Stage::dpo};
                if (name == "eval") needs = {Stage::eval};
                if (name == "run-all") needs = {Stage::prepare, Stage::sft, Stage::dpo, Stage::eval};
                const auto config = s.cfg.load(needs);
                const auto run = layout_for(s.run_dir, config, name == "prepare" || name == "run-all");
                std::filesystem::create_directories(run.dir);
                if (name == "prepare" || name == "run-all") {
                    log_line("run directory: " + run.dir.string());
                    run_prepare(config, run, log_line);
                }
                if (name == "train-sft" || name == "run-all") run_sft(config, run, log_line);
                if (name == "train-dpo" || name == "run-all") run_dpo(config, run, log_line);
                if (name == "eval" || name == "run-all") {
                    const auto report = run_eval(config, run, log_line);
                    std::cout << report_table(report);
                }
                if (name == "prepare") std::cout << run.dir.string() << '\n';
            }
        }
    } catch (const ConfigError& e) {
        std::cerr << e.what() << '\n';
        return kUsage;
    } catch (const UsageError& e) {
        std::cerr << "error: " << e.what() << '\n';
        return kUsage;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << '\n';
        return kRuntime;
    }
    return kOk;
}
