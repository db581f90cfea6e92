#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "langalign/model.hpp"
#include "langalign/optim.hpp"
#include "langalign/rng.hpp"
#include "langalign/tokenizer.hpp"

namespace langalign {

// One fixed-length row. Real segments get ids 0..k-1; the PAD tail, if any,
// is one more trailing segment with mask 0.
struct PackedRow {
    std::vector<int> token_ids;
    std::vector<int> segment_ids;
    std::vector<int> positions;
    std::vector<std::uint8_t> loss_mask;
    std::vector<std::size_t> members;  // indices into the packed input
    std::size_t used = 0;              // non-PAD tokens

    std::size_t segments() const { return members.size(); }
};

// Greedy first-fit in arrival order: each sequence goes into the first row
// with room, else a new row. Oversize sequences throw SequenceLengthError
// naming the offending id (or index when ids are not given).
std::vector<PackedRow> pack_sequences(std::span<const TemplatedSequence> sequences,
                                      std::size_t max_len, int pad_id = 0,
                                      std::span<const std::string> ids = {});

// Uniform noise in [-alpha/sqrt(L*d), alpha/sqrt(L*d)], one value per
// embedding component of `rows` tokens.
template <typename T>
std::vector<T> neftune_noise(std::size_t rows, std::size_t width, std::size_t seq_len,
                             double alpha, Rng& rng);

template <typename T>
Tensor<T> neftune_noise(const Tensor<T>& embeddings, double alpha, Rng& rng);

// Flattens the non-PAD tokens of `rows` into one layout. Targets are the
// next token inside the same segment where that token's mask is set, else -1.
struct FlatBatch {
    TokenLayout layout;
    std::vector<int> targets;
    std::vector<int> member_of;  // per token: index into the packed input, -1 for none
    std::size_t masked = 0;
};

FlatBatch flatten_rows(std::span<const PackedRow> rows);

// Masked mean next-token cross-entropy. `embedding_noise` is forwarded to the
// model (empty for evaluation). Throws if no position is masked.
template <typename T>
Tensor<T> sft_loss(const ModelParams<T>& params, std::span<const PackedRow> rows,
                   std::span<const T> embedding_noise = {});

// Masked mean loss of every packed sequence, keyed by PackedRow::members.
template <typename T>
std::vector<double> per_sequence_losses(const ModelParams<T>& params,
                                        std::span<const PackedRow> rows,
                                        std::size_t n_sequences);

struct SftConfig {
    std::size_t batch_size = 16;  // packed rows per step
    std::int64_t total_steps = 300;
    std::size_t max_len = 2048;
    double neftune_alpha = 5.0;
    std::uint64_t seed = 0;
    ScheduleKind schedule = ScheduleKind::cosine;
    std::int64_t warmup_steps = -1;  // -1: 10% of total_steps
    double peak_lr = 0.0;            // must be set
    double min_lr = 0.0;
    double clip_norm = 1.0;
    std::int64_t eval_every = 0;  // 0: eval only at the end, when an eval set exists
    AdamConfig adam{};

    // Resolves the schedule against total_steps and checks ranges.
    ScheduleSpec resolved_schedule() const;
    void validate() const;
};

struct SftMetric {
    std::int64_t step = 0;
    double lr = 0.0;
    double loss = 0.0;
    std::optional<double> eval_loss;
    std::size_t tokens = 0;
};

struct SftResult {
    ModelParams<float> params;
    std::vector<SftMetric> metrics;
    double packing_efficiency = 0.0;  // non-PAD share of the first epoch's rows
};

using SftCallback = std::function<void(const SftMetric&)>;

SftResult train_sft(const SftConfig& config, std::span<const TemplatedSequence> train,
                    const ModelParams<float>& init, std::span<const TemplatedSequence> eval = {},
                    const SftCallback& on_step = nullptr);

std::string metric_json(const SftMetric& m);
void write_sft_metrics(const std::filesystem::path& path, const std::vector<SftMetric>& metrics);

}  // namespace langalign
