#pragma once

#include <filesystem>
#include <functional>
#include <memory>
#include <string>

#include "langalign/config.hpp"
#include "langalign/dataprep.hpp"
#include "langalign/eval.hpp"

namespace langalign {

// Where each stage reads and writes inside one run directory.
struct RunLayout {
    std::filesystem::path dir;

    std::filesystem::path tokenizer() const { return dir / "prepare" / "tokenizer.json"; }
    std::filesystem::path sft_data() const { return dir / "prepare" / "sft.jsonl"; }
    std::filesystem::path dpo_data() const { return dir / "prepare" / "dpo.jsonl"; }
    std::filesystem::path prepare_report() const { return dir / "prepare" / "report.json"; }
    std::filesystem::path sft_checkpoint() const { return dir / "sft" / "model.ckpt"; }
    std::filesystem::path sft_metrics() const { return dir / "sft" / "metrics.jsonl"; }
    std::filesystem::path dpo_checkpoint() const { return dir / "dpo" / "model.ckpt"; }
    std::filesystem::path dpo_metrics() const { return dir / "dpo" / "metrics.jsonl"; }
    std::filesystem::path dpo_summary() const { return dir / "dpo" / "summary.json"; }
    std::filesystem::path eval_report() const { return dir / "eval" / "report.json"; }
    std::filesystem::path eval_table() const { return dir / "eval" / "report.txt"; }
    std::filesystem::path comparison() const { return dir / "eval" / "comparison.txt"; }
};

// <out_dir>/<UTC timestamp>-seed<seed>
std::filesystem::path default_run_dir(const PipelineConfig& config);

using Logger = std::function<void(const std::string&)>;

// Auth token for the http backend comes from this environment variable.
inline constexpr const char* kTranslateTokenEnv = "LANGALIGN_TRANSLATE_TOKEN";

std::unique_ptr<TranslationBackend> make_backend(const PipelineConfig& config);

struct TranslateSummary {
    std::size_t records = 0;
    std::size_t failures = 0;
    std::size_t backend_calls = 0;
    double total_cost = 0.0;
};

// Failed records are left out of `output` and reported through the logger.
TranslateSummary run_translate(const PipelineConfig& config, const std::filesystem::path& input,
                               const std::filesystem::path& output,
                               const std::filesystem::path& cost_csv, const Logger& log);

// License and length filtering, tokenizer training on the licensed texts.
void run_prepare(const PipelineConfig& config, const RunLayout& run, const Logger& log);
void run_sft(const PipelineConfig& config, const RunLayout& run, const Logger& log);
void run_dpo(const PipelineConfig& config, const RunLayout& run, const Logger& log);
// Scores the DPO model when one exists, else the SFT model. With both, also
// writes the side-by-side comparison.
EvalReport run_eval(const PipelineConfig& config, const RunLayout& run, const Logger& log);

}  // namespace langalign
