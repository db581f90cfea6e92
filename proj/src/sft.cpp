#include "langalign/sft.hpp"

#include <cmath>
#include <fstream>
#include <json.hpp>
#include <numeric>

#include "langalign/ops.hpp"

namespace langalign {

std::vector<PackedRow> pack_sequences(std::span<const TemplatedSequence> sequences,
                                      std::size_t max_len, int pad_id,
                                      std::span<const std::string> ids) {
    if (max_len == 0) {
        throw std::invalid_argument("pack_sequences: max_len must be positive");
    }
    std::vector<PackedRow> rows;
    for (std::size_t i = 0; i < sequences.size(); ++i) {
        const auto& seq = sequences[i];
        const std::string name = i < ids.size() ? ids[i] : "#" + std::to_string(i);
        if (seq.token_ids.size() != seq.loss_mask.size()) {
            throw std::invalid_argument("pack_sequences: sequence " + name +
                                        " has mismatched ids and mask");
        }
        if (seq.token_ids.empty()) {
            throw std::invalid_argument("pack_sequences: sequence " + name + " is empty");
        }
        const std::size_t len = seq.token_ids.size();
        if (len > max_len) {
            throw SequenceLengthError("pack_sequences: sequence " + name + " has " +
                                      std::to_string(len) + " tokens, max_len is " +
                                      std::to_string(max_len));
        }
        auto it = std::find_if(rows.begin(), rows.end(),
                               [&](const PackedRow& r) { return r.used + len <= max_len; });
        if (it == rows.end()) {
            rows.emplace_back();
            it = std::prev(rows.end());
        }
        PackedRow& row = *it;
        const int segment = static_cast<int>(row.members.size());
        row.token_ids.insert(row.token_ids.end(), seq.token_ids.begin(), seq.token_ids.end());
        row.loss_mask.insert(row.loss_mask.end(), seq.loss_mask.begin(), seq.loss_mask.end());
        row.segment_ids.insert(row.segment_ids.end(), len, segment);
        for (std::size_t p = 0; p < len; ++p) row.positions.push_back(static_cast<int>(p));
        row.members.push_back(i);
        row.used += len;
    }
    for (auto& row : rows) {
        const int pad_segment = static_cast<int>(row.members.size());
        for (std::size_t p = 0; row.token_ids.size() < max_len; ++p) {
            row.token_ids.push_back(pad_id);
            row.loss_mask.push_back(0);
            row.segment_ids.push_back(pad_segment);
            row.positions.push_back(static_cast<int>(p));
        }
    }
    return rows;
}

template <typename T>
std::vector<T> neftune_noise(std::size_t rows, std::size_t width, std::size_t seq_len,
                             double alpha, Rng& rng) {
    if (alpha < 0.0) {
        throw std::invalid_argument("neftune alpha must be >= 0");
    }
    std::vector<T> noise(rows * width, T(0));
    if (alpha == 0.0 || noise.empty()) {
        return noise;
    }
    const double bound = alpha / std::sqrt(static_cast<double>(seq_len * width));
    for (auto& v : noise) v = static_cast<T>(rng.uniform(-bound, bound));
    return noise;
}

template <typename T>
Tensor<T> neftune_noise(const Tensor<T>& embeddings, double alpha, Rng& rng) {
    if (embeddings.rank() != 2) {
        throw std::invalid_argument("neftune_noise expects [L x d] embeddings");
    }
    const auto noise = neftune_noise<T>(embeddings.dim(0), embeddings.dim(1), embeddings.dim(0),
                                        alpha, rng);
    std::vector<T> out(embeddings.data().begin(), embeddings.data().end());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] += noise[i];
    return Tensor<T>(embeddings.shape(), std::move(out));
}

FlatBatch flatten_rows(std::span<const PackedRow> rows) {
    FlatBatch flat;
    for (const auto& row : rows) {
        std::size_t start = 0;
        for (std::size_t k = 0; k < row.members.size(); ++k) {
            std::size_t end = start;
            while (end < row.used && row.segment_ids[end] == static_cast<int>(k)) ++end;
            flat.layout.append_segment(
                std::span<const int>(row.token_ids.data() + start, end - start));
            for (std::size_t t = start; t < end; ++t) {
                const bool scored = t + 1 < end && row.loss_mask[t + 1] != 0;
                flat.targets.push_back(scored ? row.token_ids[t + 1] : -1);
                flat.member_of.push_back(scored ? static_cast<int>(row.members[k]) : -1);
                flat.masked += scored ? 1 : 0;
            }
            start = end;
        }
    }
    return flat;
}

template <typename T>
Tensor<T> sft_loss(const ModelParams<T>& params, std::span<const PackedRow> rows,
                   std::span<const T> embedding_noise) {
    const FlatBatch flat = flatten_rows(rows);
    if (flat.masked == 0) {
        throw std::invalid_argument("sft_loss: batch has no masked positions");
    }
    const Tensor<T> logits = forward(params, flat.layout, embedding_noise);
    const Tensor<T> lp = ops::token_logprobs(logits, flat.targets);
    return ops::scale(ops::sum(lp), static_cast<T>(-1.0 / static_cast<double>(flat.masked)));
}

template <typename T>
std::vector<double> per_sequence_losses(const ModelParams<T>& params,
                                        std::span<const PackedRow> rows,
                                        std::size_t n_sequences) {
    NoGradGuard no_grad;
    const FlatBatch flat = flatten_rows(rows);
    const Tensor<T> lp = ops::token_logprobs(forward(params, flat.layout), flat.targets);
    std::vector<double> sum(n_sequences, 0.0);
    std::vector<std::size_t> count(n_sequences, 0);
    for (std::size_t t = 0; t < flat.member_of.size(); ++t) {
        const int m = flat.member_of[t];
        if (m < 0) continue;
        sum[static_cast<std::size_t>(m)] -= static_cast<double>(lp.data()[t]);
        ++count[static_cast<std::size_t>(m)];
    }
    for (std::size_t i = 0; i < n_sequences; ++i) {
        sum[i] = count[i] ? sum[i] / static_cast<double>(count[i]) : std::nan("");
    }
    return sum;
}

ScheduleSpec SftConfig::resolved_schedule() const {
    ScheduleSpec spec;
    spec.kind = schedule;
    spec.total_steps = total_steps;
    spec.warmup_steps = warmup_steps < 0 ? ScheduleSpec::default_warmup(total_steps) : warmup_steps;
    spec.peak_lr = peak_lr;
    spec.min_lr = min_lr;
    return spec;
}

void SftConfig::validate() const {
    if (batch_size < 1) throw std::invalid_argument("sft.batch_size must be >= 1");
    if (total_steps < 0) throw std::invalid_argument("sft.total_steps must be >= 0");
    if (max_len < 1) throw std::invalid_argument("sft.max_len must be >= 1");
    if (!(neftune_alpha >= 0.0)) throw std::invalid_argument("sft.neftune_alpha must be >= 0");
    if (!(clip_norm >= 0.0)) throw std::invalid_argument("sft.clip_norm must be >= 0");
    if (!(peak_lr > 0.0)) throw std::invalid_argument("sft.peak_lr must be > 0");
    if (eval_every < 0) throw std::invalid_argument("sft.eval_every must be >= 0");
    adam.validate();
    if (total_steps > 0) resolved_schedule().validate();
}

namespace {

std::vector<float> batch_noise(std::span<const PackedRow> rows, std::size_t width, double alpha,
                               Rng& rng) {
    std::vector<float> noise;
    for (const auto& row : rows) {
        auto part = neftune_noise<float>(row.used, width, row.token_ids.size(), alpha, rng);
        noise.insert(noise.end(), part.begin(), part.end());
    }
    return noise;
}

std::vector<PackedRow> pack_epoch(std::span<const TemplatedSequence> data, std::size_t max_len,
                                  Rng& rng) {
    std::vector<std::size_t> order(data.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    rng.shuffle(std::span<std::size_t>(order));
    std::vector<TemplatedSequence> shuffled;
    shuffled.reserve(order.size());
    for (auto i : order) shuffled.push_back(data[i]);
    return pack_sequences(shuffled, max_len);
}

}  // namespace

SftResult train_sft(const SftConfig& config, std::span<const TemplatedSequence> train,
                    const ModelParams<float>& init, std::span<const TemplatedSequence> eval,
                    const SftCallback& on_step) {
    config.validate();
    if (train.empty()) {
        throw std::invalid_argument("train_sft: empty dataset");
    }
    SftResult result{init.clone(false), {}, 0.0};
    if (config.total_steps == 0) {
        return result;
    }
    const ScheduleSpec schedule = config.resolved_schedule();
    ModelParams<float>& params = result.params;
    params.set_requires_grad(true);
    auto tensors = params.tensors();
    auto state = AdamState<float>::init(tensors, config.adam);
    Rng rng(config.seed);
    const std::size_t width = static_cast<std::size_t>(params.config.d_model);

    std::vector<PackedRow> eval_rows;
    if (!eval.empty()) eval_rows = pack_sequences(eval, config.max_len);

    std::vector<PackedRow> rows = pack_epoch(train, config.max_len, rng);
    {
        std::size_t used = 0;
        for (const auto& r : rows) used += r.used;
        result.packing_efficiency =
            static_cast<double>(used) / static_cast<double>(rows.size() * config.max_len);
    }
    std::size_t cursor = 0;
    for (std::int64_t step = 0; step < config.total_steps; ++step) {
        if (cursor >= rows.size()) {
            rows = pack_epoch(train, config.max_len, rng);
            cursor = 0;
        }
        const std::size_t take = std::min(config.batch_size, rows.size() - cursor);
        const std::span<const PackedRow> batch(rows.data() + cursor, take);
        cursor += take;

        const auto noise = batch_noise(batch, width, config.neftune_alpha, rng);
        zero_grads(std::span<Tensor<float>>(tensors));
        Tensor<float> loss = sft_loss(params, batch, std::span<const float>(noise));
        const double loss_value = loss.item();
        const double lr = lr_at(schedule, step);
        if (!std::isfinite(loss_value)) {
            throw NonFiniteError("sft: non-finite loss " + std::to_string(loss_value) +
                                 " at step " + std::to_string(step + 1) +
                                 " (lr " + std::to_string(lr) + ")");
        }
        backward(loss);
        if (config.clip_norm > 0.0) {
            clip_grad_norm(std::span<Tensor<float>>(tensors), config.clip_norm);
        }
        adam_step(std::span<Tensor<float>>(tensors), state, lr);

        SftMetric metric;
        metric.step = step + 1;
        metric.lr = lr;
        metric.loss = loss_value;
        for (const auto& r : batch) metric.tokens += r.used;
        const bool last = step + 1 == config.total_steps;
        const bool periodic = config.eval_every > 0 && (step + 1) % config.eval_every == 0;
        if (!eval_rows.empty() && (last || periodic)) {
            NoGradGuard no_grad;
            metric.eval_loss = sft_loss(params, std::span<const PackedRow>(eval_rows)).item();
        }
        if (on_step) on_step(metric);
        result.metrics.push_back(metric);
    }
    params.set_requires_grad(false);
    return result;
}

std::string metric_json(const SftMetric& m) {
    nlohmann::ordered_json j;
    j["step"] = m.step;
    j["lr"] = m.lr;
    j["loss"] = m.loss;
    if (m.eval_loss) j["eval_loss"] = *m.eval_loss;
    j["tokens"] = m.tokens;
    return j.dump();
}

void write_sft_metrics(const std::filesystem::path& path, const std::vector<SftMetric>& metrics) {
    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw std::runtime_error("cannot write " + path.string());
    for (const auto& m : metrics) out << metric_json(m) << '\n';
}

template std::vector<float> neftune_noise(std::size_t, std::size_t, std::size_t, double, Rng&);
template std::vector<double> neftune_noise(std::size_t, std::size_t, std::size_t, double, Rng&);
template Tensor<float> neftune_noise(const Tensor<float>&, double, Rng&);
template Tensor<double> neftune_noise(const Tensor<double>&, double, Rng&);
template Tensor<float> sft_loss(const ModelParams<float>&, std::span<const PackedRow>,
                                std::span<const float>);
template Tensor<double> sft_loss(const ModelParams<double>&, std::span<const PackedRow>,
                                 std::span<const double>);
template std::vector<double> per_sequence_losses(const ModelParams<float>&,
                                                 std::span<const PackedRow>, std::size_t);
template std::vector<double> per_sequence_losses(const ModelParams<double>&,
                                                 std::span<const PackedRow>, std::size_t);

}  // namespace langalign
