#include "langalign/dpo.hpp"

#include <cmath>
#include <fstream>
#include <json.hpp>
#include <numeric>

#include "langalign/ops.hpp"
#include "langalign/rng.hpp"

namespace langalign {

EncodedPair encode_pair(const Tokenizer& tokenizer, const std::string& id,
                        const PreferencePair& pair, std::size_t max_len) {
    if (pair.chosen == pair.rejected) {
        throw std::invalid_argument("preference pair " + id + ": chosen equals rejected");
    }
    EncodedPair out{id, tokenizer.chat_prompt(pair.prompt), tokenizer.chat_completion(pair.chosen),
                    tokenizer.chat_completion(pair.rejected)};
    const std::size_t longest =
        out.prompt.size() + std::max(out.chosen.size(), out.rejected.size());
    if (longest > max_len) {
        throw SequenceLengthError("preference pair " + id + " needs " + std::to_string(longest) +
                                  " tokens, max_len is " + std::to_string(max_len));
    }
    return out;
}

namespace {

std::vector<ScoredSequence> scored(std::span<const EncodedPair> pairs) {
    std::vector<ScoredSequence> out;
    out.reserve(2 * pairs.size());
    for (const auto& p : pairs) {
        out.push_back({p.prompt, p.chosen});
        out.push_back({p.prompt, p.rejected});
    }
    return out;
}

void check_beta(double beta) {
    if (!(beta > 0.0) || !std::isfinite(beta)) {
        throw std::invalid_argument("dpo beta must be > 0");
    }
}

}  // namespace

template <typename T>
std::vector<double> reference_logprobs(const ModelParams<T>& ref,
                                       std::span<const EncodedPair> pairs) {
    NoGradGuard no_grad;
    const auto seqs = scored(pairs);
    const auto lp = completion_logprobs(ref, std::span<const ScoredSequence>(seqs));
    return {lp.data().begin(), lp.data().end()};
}

template <typename T>
DpoLoss<T> dpo_loss(const ModelParams<T>& policy, std::span<const double> ref_logprobs,
                    std::span<const EncodedPair> batch, double beta) {
    check_beta(beta);
    const std::size_t n = batch.size();
    if (n == 0) {
        throw std::invalid_argument("dpo_loss: empty batch");
    }
    if (ref_logprobs.size() != 2 * n) {
        throw std::invalid_argument("dpo_loss: reference log-probs do not match the batch");
    }
    const auto seqs = scored(batch);
    const Tensor<T> lp = completion_logprobs(policy, std::span<const ScoredSequence>(seqs));

    // z_i = beta * ((pi_w - ref_w) - (pi_l - ref_l))
    std::vector<T> sign(2 * n);
    std::vector<int> group(2 * n);
    std::vector<T> ref_diff(n);
    for (std::size_t i = 0; i < n; ++i) {
        sign[2 * i] = T(1);
        sign[2 * i + 1] = T(-1);
        group[2 * i] = group[2 * i + 1] = static_cast<int>(i);
        ref_diff[i] = static_cast<T>(ref_logprobs[2 * i] - ref_logprobs[2 * i + 1]);
    }
    const Tensor<T> policy_diff =
        ops::segment_sum(ops::mul(lp, Tensor<T>({2 * n}, std::move(sign))), group,
                         static_cast<int>(n));
    const Tensor<T> z =
        ops::scale(ops::sub(policy_diff, Tensor<T>({n}, std::move(ref_diff))), static_cast<T>(beta));
    Tensor<T> loss = ops::scale(ops::mean(ops::log_sigmoid(z)), T(-1));

    DpoStats stats;
    stats.pairs = n;
    stats.loss = static_cast<double>(loss.item());
    for (std::size_t i = 0; i < n; ++i) {
        const double dw = static_cast<double>(lp.data()[2 * i]) - ref_logprobs[2 * i];
        const double dl = static_cast<double>(lp.data()[2 * i + 1]) - ref_logprobs[2 * i + 1];
        stats.chosen_reward += beta * dw;
        stats.rejected_reward += beta * dl;
        stats.accuracy += dw > dl ? 1.0 : dw == dl ? 0.5 : 0.0;
    }
    stats.chosen_reward /= static_cast<double>(n);
    stats.rejected_reward /= static_cast<double>(n);
    stats.margin = stats.chosen_reward - stats.rejected_reward;
    stats.accuracy /= static_cast<double>(n);
    return {std::move(loss), stats};
}

template <typename T>
DpoLoss<T> dpo_loss(const ModelParams<T>& policy, const ModelParams<T>& ref,
                    std::span<const EncodedPair> batch, double beta) {
    check_beta(beta);
    const auto ref_lp = reference_logprobs(ref, batch);
    return dpo_loss(policy, std::span<const double>(ref_lp), batch, beta);
}

template <typename T>
double implicit_reward(const ModelParams<T>& policy, const ModelParams<T>& ref,
                       std::span<const int> prompt, std::span<const int> completion, double beta) {
    check_beta(beta);
    return beta * (sequence_logprob(policy, prompt, completion) -
                   sequence_logprob(ref, prompt, completion));
}

template <typename T>
DpoStats preference_stats(const ModelParams<T>& policy, std::span<const double> ref_logprobs,
                          std::span<const EncodedPair> pairs, double beta,
                          std::size_t batch_size) {
    NoGradGuard no_grad;
    DpoStats total;
    if (pairs.empty()) return total;
    batch_size = std::max<std::size_t>(batch_size, 1);
    for (std::size_t start = 0; start < pairs.size(); start += batch_size) {
        const std::size_t n = std::min(batch_size, pairs.size() - start);
        const auto s = dpo_loss(policy, ref_logprobs.subspan(2 * start, 2 * n),
                                pairs.subspan(start, n), beta)
                           .stats;
        const double w = static_cast<double>(n);
        total.loss += s.loss * w;
        total.chosen_reward += s.chosen_reward * w;
        total.rejected_reward += s.rejected_reward * w;
        total.accuracy += s.accuracy * w;
    }
    const double count = static_cast<double>(pairs.size());
    total.pairs = pairs.size();
    total.loss /= count;
    total.chosen_reward /= count;
    total.rejected_reward /= count;
    total.accuracy /= count;
    total.margin = total.chosen_reward - total.rejected_reward;
    return total;
}

bool in_eval_split(const std::string& id, double fraction, std::uint64_t seed) {
    std::uint64_t h = fnv1a64(id.data(), id.size(), fnv1a64(&seed, sizeof seed));
    // fnv's high bits barely move for ids that differ in the last byte
    h ^= h >> 30;
    h *= 0xbf58476d1ce4e5b9ULL;
    h ^= h >> 27;
    h *= 0x94d049bb133111ebULL;
    h ^= h >> 31;
    return static_cast<double>(h >> 11) * 0x1.0p-53 < fraction;
}

void DpoConfig::validate() const {
    check_beta(beta);
    if (batch_size < 1) throw std::invalid_argument("dpo.batch_size must be >= 1");
    if (epochs < 0) throw std::invalid_argument("dpo.epochs must be >= 0");
    if (!(peak_lr > 0.0)) throw std::invalid_argument("dpo.peak_lr must be > 0");
    if (!(clip_norm >= 0.0)) throw std::invalid_argument("dpo.clip_norm must be >= 0");
    if (!(eval_fraction >= 0.0 && eval_fraction < 1.0)) {
        throw std::invalid_argument("dpo.eval_fraction must be in [0, 1)");
    }
    if (eval_every < 0) throw std::invalid_argument("dpo.eval_every must be >= 0");
    adam.validate();
}

DpoResult train_dpo(const DpoConfig& config, const ModelParams<float>& sft_params,
                    std::span<const EncodedPair> pairs, const DpoCallback& on_step) {
    config.validate();
    if (pairs.empty()) {
        throw std::invalid_argument("train_dpo: empty preference dataset");
    }
    DpoResult result{sft_params.clone(false), {}, {}};
    const ModelParams<float> reference = sft_params.clone(false);

    std::vector<EncodedPair> train, eval;
    for (const auto& p : pairs) {
        (in_eval_split(p.id, config.eval_fraction, config.seed) ? eval : train).push_back(p);
    }
    if (train.empty()) {
        throw std::invalid_argument("train_dpo: every pair fell into the eval split");
    }
    auto& summary = result.summary;
    summary.train_pairs = train.size();
    summary.eval_pairs = eval.size();

    const std::vector<double> train_ref = reference_logprobs(reference, std::span<const EncodedPair>(train));
    const std::vector<double> eval_ref =
        eval.empty() ? std::vector<double>{} : reference_logprobs(reference, std::span<const EncodedPair>(eval));
    auto train_stats = [&](const ModelParams<float>& p) {
        return preference_stats(p, std::span<const double>(train_ref),
                                std::span<const EncodedPair>(train), config.beta);
    };
    auto eval_accuracy = [&](const ModelParams<float>& p) -> std::optional<double> {
        if (eval.empty()) return std::nullopt;
        return preference_stats(p, std::span<const double>(eval_ref),
                                std::span<const EncodedPair>(eval), config.beta)
            .accuracy;
    };

    summary.initial_train_acc = train_stats(result.params).accuracy;
    const std::int64_t per_epoch =
        static_cast<std::int64_t>((train.size() + config.batch_size - 1) / config.batch_size);
    summary.steps = per_epoch * config.epochs;
    if (summary.steps == 0) {
        summary.train_acc = summary.initial_train_acc;
        summary.eval_acc = eval_accuracy(result.params);
        return result;
    }

    ScheduleSpec schedule;
    schedule.kind = config.schedule;
    schedule.total_steps = summary.steps;
    schedule.warmup_steps = config.warmup_steps < 0 ? ScheduleSpec::default_warmup(summary.steps)
                                                    : config.warmup_steps;
    schedule.peak_lr = config.peak_lr;
    schedule.min_lr = config.min_lr;
    schedule.validate();

    ModelParams<float>& policy = result.params;
    policy.set_requires_grad(true);
    auto tensors = policy.tensors();
    auto state = AdamState<float>::init(tensors, config.adam);
    Rng rng(config.seed);
    std::vector<std::size_t> order(train.size());

    std::int64_t step = 0;
    for (std::int64_t epoch = 0; epoch < config.epochs; ++epoch) {
        std::iota(order.begin(), order.end(), std::size_t{0});
        rng.shuffle(std::span<std::size_t>(order));
        for (std::size_t start = 0; start < order.size(); start += config.batch_size, ++step) {
            const std::size_t n = std::min(config.batch_size, order.size() - start);
            std::vector<EncodedPair> batch;
            std::vector<double> batch_ref;
            for (std::size_t k = start; k < start + n; ++k) {
                batch.push_back(train[order[k]]);
                batch_ref.push_back(train_ref[2 * order[k]]);
                batch_ref.push_back(train_ref[2 * order[k] + 1]);
            }
            zero_grads(std::span<Tensor<float>>(tensors));
            auto [loss, stats] = dpo_loss(policy, std::span<const double>(batch_ref),
                                          std::span<const EncodedPair>(batch), config.beta);
            const double lr = lr_at(schedule, step);
            if (!std::isfinite(stats.loss)) {
                throw NonFiniteError("dpo: non-finite loss at step " + std::to_string(step + 1));
            }
            backward(loss);
            if (config.clip_norm > 0.0) {
                clip_grad_norm(std::span<Tensor<float>>(tensors), config.clip_norm);
            }
            adam_step(std::span<Tensor<float>>(tensors), state, lr);

            DpoMetric metric{step + 1, lr, stats.loss, stats.margin, stats.accuracy, std::nullopt};
            const bool last = step + 1 == summary.steps;
            if (last || (config.eval_every > 0 && (step + 1) % config.eval_every == 0)) {
                metric.eval_acc = eval_accuracy(policy);
                if (metric.eval_acc &&
                    (!summary.best_eval_acc || *metric.eval_acc > *summary.best_eval_acc)) {
                    summary.best_eval_acc = metric.eval_acc;
                    summary.best_eval_step = metric.step;
                }
            }
            if (on_step) on_step(metric);
            result.metrics.push_back(metric);
        }
    }
    policy.set_requires_grad(false);
    const auto final_stats = train_stats(policy);
    summary.train_acc = final_stats.accuracy;
    summary.final_margin = final_stats.margin;
    summary.eval_acc = result.metrics.back().eval_acc;
    return result;
}

namespace {

nlohmann::ordered_json optional_json(const std::optional<double>& v) {
    return v ? nlohmann::ordered_json(*v) : nlohmann::ordered_json(nullptr);
}

}  // namespace

std::string metric_json(const DpoMetric& m) {
    nlohmann::ordered_json j;
    j["step"] = m.step;
    j["lr"] = m.lr;
    j["loss"] = m.loss;
    j["margin"] = m.margin;
    j["acc"] = m.acc;
    if (m.eval_acc) j["eval_acc"] = *m.eval_acc;
    return j.dump();
}

std::string summary_json(const DpoSummary& s) {
    nlohmann::ordered_json j;
    j["train_acc"] = s.train_acc;
    j["eval_acc"] = optional_json(s.eval_acc);
    j["best_eval_acc"] = optional_json(s.best_eval_acc);
    j["best_eval_step"] = s.best_eval_step;
    j["initial_train_acc"] = s.initial_train_acc;
    j["final_margin"] = s.final_margin;
    j["steps"] = s.steps;
    j["train_pairs"] = s.train_pairs;
    j["eval_pairs"] = s.eval_pairs;
    return j.dump(2);
}

void write_dpo_metrics(const std::filesystem::path& path, const std::vector<DpoMetric>& metrics) {
    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw std::runtime_error("cannot write " + path.string());
    for (const auto& m : metrics) out << metric_json(m) << '\n';
}

template std::vector<double> reference_logprobs(const ModelParams<float>&,
                                                std::span<const EncodedPair>);
template std::vector<double> reference_logprobs(const ModelParams<double>&,
                                                std::span<const EncodedPair>);
template DpoLoss<float> dpo_loss(const ModelParams<float>&, const ModelParams<float>&,
                                 std::span<const EncodedPair>, double);
template DpoLoss<double> dpo_loss(const ModelParams<double>&, const ModelParams<double>&,
                                  std::span<const EncodedPair>, double);
template DpoLoss<float> dpo_loss(const ModelParams<float>&, std::span<const double>,
                                 std::span<const EncodedPair>, double);
template DpoLoss<double> dpo_loss(const ModelParams<double>&, std::span<const double>,
                                  std::span<const EncodedPair>, double);
template double implicit_reward(const ModelParams<float>&, const ModelParams<float>&,
                                std::span<const int>, std::span<const int>, double);
template double implicit_reward(const ModelParams<double>&, const ModelParams<double>&,
                                std::span<const int>, std::span<const int>, double);
template DpoStats preference_stats(const ModelParams<float>&, std::span<const double>,
                                   std::span<const EncodedPair>, double, std::size_t);
template DpoStats preference_stats(const ModelParams<double>&, std::span<const double>,
                                   std::span<const EncodedPair>, double, std::size_t);

}  // namespace langalign
