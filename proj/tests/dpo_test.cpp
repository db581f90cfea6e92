#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>

#include "grad_check.hpp"
#include "langalign/dpo.hpp"
#include "langalign/synthetic.hpp"

using namespace langalign;

namespace {

const Tokenizer& toy_tokenizer() {
    static const Tokenizer tok = [] {
        const auto corpus = synthetic::tokenizer_corpus();
        return Tokenizer::train(corpus, 320);
    }();
    return tok;
}

ModelConfig small_config() {
    ModelConfig c;
    c.vocab_size = toy_tokenizer().vocab_size();
    c.d_model = 16;
    c.n_layers = 2;
    c.n_heads = 4;
    c.n_kv_heads = 2;
    c.d_ff = 32;
    c.max_seq_len = 128;
    return c;
}

std::vector<EncodedPair> toy_pairs(std::size_t n, std::uint64_t seed) {
    std::vector<EncodedPair> out;
    for (const auto& rec : synthetic::preference_corpus(n, seed)) {
        out.push_back(encode_pair(toy_tokenizer(), rec.id,
                                  std::get<PreferencePair>(rec.payload), 128));
    }
    return out;
}

// Hand-written pairs over raw ids for the tiny gradient model.
std::vector<EncodedPair> id_pairs() {
    return {{"a", {1, 2, 3}, {4, 5}, {5, 4, 6}},
            {"b", {2}, {7, 1}, {3}},
            {"c", {6, 6, 1}, {2, 2, 2}, {8, 2}}};
}

double log1p_exp_neg(double z) { return std::log1p(std::exp(-z)); }

}  // namespace

TEST(DpoLoss, EqualsLn2WhenPolicyIsReference) {
    const auto p = init_params<double>(small_config(), 1);
    const auto pairs = toy_pairs(6, 2);
    const auto r = dpo_loss(p, p, std::span<const EncodedPair>(pairs), 0.1);
    EXPECT_NEAR(r.loss.item(), std::log(2.0), 1e-12);
    EXPECT_NEAR(r.stats.accuracy, 0.5, 1e-12);
    EXPECT_NEAR(r.stats.margin, 0.0, 1e-12);
}

TEST(DpoLoss, ClosedFormForKnownLogRatios) {
    const auto p = init_params<double>(small_config(), 3);
    const auto pairs = toy_pairs(1, 4);
    const auto lp = reference_logprobs(p, std::span<const EncodedPair>(pairs));
    // policy - ref is +0.5 on chosen and -0.5 on rejected.
    const std::vector<double> ref{lp[0] - 0.5, lp[1] + 0.5};
    const auto r = dpo_loss(p, std::span<const double>(ref), std::span<const EncodedPair>(pairs), 0.1);
    EXPECT_NEAR(r.loss.item(), 0.644397, 1e-6);
    EXPECT_NEAR(r.loss.item(), log1p_exp_neg(0.1), 1e-12);
    EXPECT_NEAR(r.stats.chosen_reward, 0.05, 1e-12);
    EXPECT_NEAR(r.stats.rejected_reward, -0.05, 1e-12);
    EXPECT_DOUBLE_EQ(r.stats.accuracy, 1.0);
}

TEST(DpoLoss, TendsToLn2AsBetaVanishes) {
    const auto policy = init_params<double>(small_config(), 5);
    const auto ref = init_params<double>(small_config(), 6);
    const auto pairs = toy_pairs(4, 7);
    const auto r = dpo_loss(policy, ref, std::span<const EncodedPair>(pairs), 1e-9);
    EXPECT_NEAR(r.loss.item(), std::log(2.0), 1e-8);
}

TEST(DpoLoss, RejectsNonPositiveBeta) {
    const auto p = init_params<double>(small_config(), 1);
    const auto pairs = toy_pairs(1, 2);
    EXPECT_THROW(dpo_loss(p, p, std::span<const EncodedPair>(pairs), 0.0), std::invalid_argument);
    EXPECT_THROW(dpo_loss(p, p, std::span<const EncodedPair>(pairs), -0.1), std::invalid_argument);
}

TEST(DpoLoss, ImplicitRewardIsLinearInBetaAndMatchesMargin) {
    const auto policy = init_params<double>(small_config(), 8);
    const auto ref = init_params<double>(small_config(), 9);
    const auto pairs = toy_pairs(1, 10);
    const auto& e = pairs[0];
    const double r1 = implicit_reward(policy, ref, std::span<const int>(e.prompt),
                                      std::span<const int>(e.chosen), 0.1);
    const double r3 = implicit_reward(policy, ref, std::span<const int>(e.prompt),
                                      std::span<const int>(e.chosen), 0.3);
    EXPECT_NEAR(r3, 3.0 * r1, 1e-10 * std::max(1.0, std::abs(r3)));
    const double rl = implicit_reward(policy, ref, std::span<const int>(e.prompt),
                                      std::span<const int>(e.rejected), 0.1);
    const auto stats = dpo_loss(policy, ref, std::span<const EncodedPair>(pairs), 0.1).stats;
    EXPECT_NEAR(r1 - rl, stats.margin, 1e-9);
    EXPECT_NEAR(stats.loss, log1p_exp_neg(r1 - rl), 1e-9);
}

TEST(DpoLoss, PermutationInvariant) {
    const auto policy = init_params<double>(small_config(), 11);
    const auto ref = init_params<double>(small_config(), 12);
    auto pairs = toy_pairs(8, 13);
    const double a = dpo_loss(policy, ref, std::span<const EncodedPair>(pairs), 0.1).loss.item();
    std::reverse(pairs.begin(), pairs.end());
    std::rotate(pairs.begin(), pairs.begin() + 3, pairs.end());
    const double b = dpo_loss(policy, ref, std::span<const EncodedPair>(pairs), 0.1).loss.item();
    EXPECT_NEAR(a, b, 1e-12);
}

TEST(DpoLoss, GradientMatchesFiniteDifferences) {
    ModelConfig cfg;
    cfg.vocab_size = 9;
    cfg.d_model = 8;
    cfg.n_layers = 2;
    cfg.n_heads = 2;
    cfg.n_kv_heads = 1;
    cfg.d_ff = 12;
    cfg.max_seq_len = 16;
    auto policy = init_params<double>(cfg, 14);
    for (auto& [name, t] : policy.named()) {
        if (name.find("norm") == std::string::npos) {
            for (auto& v : t.mutable_data()) v *= 10.0;
        }
    }
    const auto ref = init_params<double>(cfg, 15);
    const auto pairs = id_pairs();
    const auto ref_lp = reference_logprobs(ref, std::span<const EncodedPair>(pairs));
    const double beta = 0.05;
    policy.set_requires_grad(true);
    backward(dpo_loss(policy, std::span<const double>(ref_lp), std::span<const EncodedPair>(pairs), beta).loss);
    const auto r = oracle::check_gradients<double>(
        policy.named(),
        [&]() -> double {
            NoGradGuard g;
            return dpo_loss(policy, std::span<const double>(ref_lp),
                            std::span<const EncodedPair>(pairs), beta)
                .loss.item();
        },
        1e-5);
    EXPECT_LE(r.max_rel_error, 1e-6) << r.worst_tensor << "[" << r.worst_index << "]";
}

TEST(DpoLoss, OneSmallStepRaisesTheMargin) {
    auto policy = init_params<float>(small_config(), 16);
    const auto ref = policy.clone(false);
    const auto pairs = toy_pairs(16, 17);
    const auto ref_lp = reference_logprobs(ref, std::span<const EncodedPair>(pairs));
    policy.set_requires_grad(true);
    auto tensors = policy.tensors();
    auto state = AdamState<float>::init(std::span<const Tensor<float>>(tensors), AdamConfig{});
    backward(dpo_loss(policy, std::span<const double>(ref_lp), std::span<const EncodedPair>(pairs), 0.1).loss);
    adam_step(std::span<Tensor<float>>(tensors), state, 1e-4);
    const auto after = preference_stats(policy, std::span<const double>(ref_lp),
                                        std::span<const EncodedPair>(pairs), 0.1);
    EXPECT_GT(after.margin, 0.0);
    EXPECT_LT(after.loss, std::log(2.0));
}

TEST(EncodePair, UsesChatPromptAndCompletion) {
    const auto& tok = toy_tokenizer();
    const PreferencePair p{"Ordne die Wörter: Hund der", "der Hund.", "Hund der."};
    const auto e = encode_pair(tok, "x", p, 128);
    EXPECT_EQ(e.prompt, tok.chat_prompt(p.prompt));
    EXPECT_EQ(e.chosen, tok.chat_completion(p.chosen));
    EXPECT_EQ(e.rejected, tok.chat_completion(p.rejected));
    EXPECT_THROW(encode_pair(tok, "x", p, 8), SequenceLengthError);
    EXPECT_THROW(encode_pair(tok, "x", PreferencePair{"a", "b", "b"}, 128), std::invalid_argument);
}

TEST(EvalSplit, HashFractionIsStableAndRoughlyRight) {
    std::size_t held = 0;
    for (int i = 0; i < 4000; ++i) {
        const std::string id = "pair-" + std::to_string(i);
        const bool a = in_eval_split(id, 0.05, 3);
        EXPECT_EQ(a, in_eval_split(id, 0.05, 3));
        held += a;
    }
    EXPECT_NEAR(static_cast<double>(held) / 4000.0, 0.05, 0.015);
    EXPECT_FALSE(in_eval_split("pair-1", 0.0, 3));
}

TEST(DpoTraining, ZeroEpochsReturnsInputUnchanged) {
    const auto sft = init_params<float>(small_config(), 18);
    const auto pairs = toy_pairs(10, 19);
    DpoConfig cfg;
    cfg.peak_lr = 1e-3;
    cfg.epochs = 0;
    const auto result = train_dpo(cfg, sft, std::span<const EncodedPair>(pairs));
    EXPECT_EQ(result.params.checksum(), sft.checksum());
    EXPECT_TRUE(result.metrics.empty());
    EXPECT_EQ(result.summary.steps, 0);
}

TEST(DpoTraining, MarginTrendsUpAndReferenceStaysFrozen) {
    const auto sft = init_params<float>(small_config(), 20);
    const auto before = sft.checksum();
    const auto pairs = toy_pairs(200, 21);
    DpoConfig cfg;
    cfg.peak_lr = 2e-3;
    cfg.batch_size = 8;
    cfg.epochs = 3;
    cfg.eval_fraction = 0.1;
    cfg.seed = 22;
    const auto result = train_dpo(cfg, sft, std::span<const EncodedPair>(pairs));
    EXPECT_EQ(sft.checksum(), before);
    ASSERT_GE(result.metrics.size(), 50u);
    auto window_mean = [&](std::size_t from) {
        double s = 0.0;
        for (std::size_t i = from; i < from + 10; ++i) s += result.metrics[i].margin;
        return s / 10.0;
    };
    EXPECT_GT(window_mean(40), window_mean(0));
    EXPECT_GT(window_mean(40), 0.0);
    EXPECT_EQ(result.summary.train_pairs + result.summary.eval_pairs, pairs.size());
    ASSERT_TRUE(result.summary.eval_acc.has_value());
    EXPECT_TRUE(result.metrics.back().eval_acc.has_value());
}

TEST(DpoTraining, DeterministicForFixedSeed) {
    const auto sft = init_params<float>(small_config(), 23);
    const auto pairs = toy_pairs(24, 24);
    DpoConfig cfg;
    cfg.peak_lr = 1e-3;
    cfg.batch_size = 8;
    cfg.seed = 25;
    const auto a = train_dpo(cfg, sft, std::span<const EncodedPair>(pairs));
    const auto b = train_dpo(cfg, sft, std::span<const EncodedPair>(pairs));
    EXPECT_EQ(a.params.checksum(), b.params.checksum());
    ASSERT_EQ(a.metrics.size(), b.metrics.size());
    for (std::size_t i = 0; i < a.metrics.size(); ++i) {
        EXPECT_EQ(metric_json(a.metrics[i]), metric_json(b.metrics[i]));
    }
}

TEST(DpoConfig, ValidatesRanges) {
    DpoConfig cfg;
    cfg.peak_lr = 1e-3;
    EXPECT_NO_THROW(cfg.validate());
    cfg.beta = 0.0;
    EXPECT_THROW(cfg.validate(), std::invalid_argument);
    cfg.beta = 0.1;
    cfg.eval_fraction = 1.0;
    EXPECT_THROW(cfg.validate(), std::invalid_argument);
    cfg.eval_fraction = 0.05;
    cfg.peak_lr = 0.0;
    EXPECT_THROW(cfg.validate(), std::invalid_argument);
}
