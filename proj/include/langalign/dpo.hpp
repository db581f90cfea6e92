#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "langalign/dataprep.hpp"
#include "langalign/model.hpp"
#include "langalign/optim.hpp"
#include "langalign/tokenizer.hpp"

namespace langalign {

// Prompt in chat form up to the assistant header; completions are content
// plus the closing delimiter.
struct EncodedPair {
    std::string id;
    std::vector<int> prompt;
    std::vector<int> chosen;
    std::vector<int> rejected;
};

// Throws SequenceLengthError when prompt+completion exceeds max_len, and
// std::invalid_argument when chosen == rejected.
EncodedPair encode_pair(const Tokenizer& tokenizer, const std::string& id,
                        const PreferencePair& pair, std::size_t max_len);

struct DpoStats {
    double loss = 0.0;
    double chosen_reward = 0.0;    // mean beta * (log pi - log ref) of chosen
    double rejected_reward = 0.0;  // same for rejected
    double margin = 0.0;           // chosen_reward - rejected_reward
    double accuracy = 0.0;         // ties count 0.5
    std::size_t pairs = 0;
};

template <typename T>
struct DpoLoss {
    Tensor<T> loss;
    DpoStats stats;
};

// Reference log-probs, two per pair (chosen, rejected), computed without
// gradients.
template <typename T>
std::vector<double> reference_logprobs(const ModelParams<T>& ref,
                                       std::span<const EncodedPair> pairs);

template <typename T>
DpoLoss<T> dpo_loss(const ModelParams<T>& policy, const ModelParams<T>& ref,
                    std::span<const EncodedPair> batch, double beta);

// Same objective against precomputed reference log-probs.
template <typename T>
DpoLoss<T> dpo_loss(const ModelParams<T>& policy, std::span<const double> ref_logprobs,
                    std::span<const EncodedPair> batch, double beta);

template <typename T>
double implicit_reward(const ModelParams<T>& policy, const ModelParams<T>& ref,
                       std::span<const int> prompt, std::span<const int> completion, double beta);

// Loss statistics over a whole set, evaluated in batches without gradients.
template <typename T>
DpoStats preference_stats(const ModelParams<T>& policy, std::span<const double> ref_logprobs,
                          std::span<const EncodedPair> pairs, double beta,
                          std::size_t batch_size = 32);

// True when the pair id hashes into the held-out fraction.
bool in_eval_split(const std::string& id, double fraction, std::uint64_t seed);

struct DpoConfig {
    double beta = 0.1;
    std::size_t batch_size = 64;
    std::int64_t epochs = 1;
    ScheduleKind schedule = ScheduleKind::linear;
    std::int64_t warmup_steps = -1;  // -1: 10% of the derived step count
    double peak_lr = 0.0;            // must be set
    double min_lr = 0.0;
    double clip_norm = 1.0;
    double eval_fraction = 0.05;
    std::int64_t eval_every = 0;  // 0: evaluate at the end only
    std::uint64_t seed = 0;
    AdamConfig adam{};

    void validate() const;
};

struct DpoMetric {
    std::int64_t step = 0;
    double lr = 0.0;
    double loss = 0.0;
    double margin = 0.0;
    double acc = 0.0;
    std::optional<double> eval_acc;
};

struct DpoSummary {
    std::int64_t steps = 0;
    std::size_t train_pairs = 0;
    std::size_t eval_pairs = 0;
    double initial_train_acc = 0.0;
    double train_acc = 0.0;  // whole train split, final params
    std::optional<double> eval_acc;
    std::optional<double> best_eval_acc;
    std::int64_t best_eval_step = 0;
    double final_margin = 0.0;
};

struct DpoResult {
    ModelParams<float> params;
    std::vector<DpoMetric> metrics;
    DpoSummary summary;
};

using DpoCallback = std::function<void(const DpoMetric&)>;

// The reference is a deep copy of `sft_params` taken before the first step.
DpoResult train_dpo(const DpoConfig& config, const ModelParams<float>& sft_params,
                    std::span<const EncodedPair> pairs, const DpoCallback& on_step = nullptr);

std::string metric_json(const DpoMetric& m);
std::string summary_json(const DpoSummary& s);
void write_dpo_metrics(const std::filesystem::path& path, const std::vector<DpoMetric>& metrics);

}  // namespace langalign
