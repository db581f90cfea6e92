#include <gtest/gtest.h>

#include <cmath>
#include <numeric>

#include "grad_check.hpp"
#include "langalign/ops.hpp"
#include "langalign/sft.hpp"

using namespace langalign;

namespace {

TemplatedSequence seq_of_length(std::size_t n, int base = 5, std::uint8_t mask_from = 1) {
    TemplatedSequence s;
    for (std::size_t i = 0; i < n; ++i) {
        s.token_ids.push_back(base + static_cast<int>(i % 7));
        s.loss_mask.push_back(i >= mask_from ? 1 : 0);
    }
    return s;
}

TemplatedSequence random_sequence(Rng& rng, std::size_t max_len, int vocab) {
    const std::size_t n = 2 + rng.below(max_len - 1);
    TemplatedSequence s;
    const std::size_t prompt = rng.below(n - 1);
    for (std::size_t i = 0; i < n; ++i) {
        s.token_ids.push_back(1 + static_cast<int>(rng.below(static_cast<std::uint64_t>(vocab - 1))));
        s.loss_mask.push_back(i > prompt ? 1 : 0);
    }
    return s;
}

ModelConfig tiny_config() {
    ModelConfig c;
    c.vocab_size = 17;
    c.d_model = 16;
    c.n_layers = 2;
    c.n_heads = 4;
    c.n_kv_heads = 2;
    c.d_ff = 24;
    c.max_seq_len = 64;
    return c;
}

std::vector<std::size_t> member_lengths(const PackedRow& row,
                                        const std::vector<TemplatedSequence>& seqs) {
    std::vector<std::size_t> out;
    for (auto m : row.members) out.push_back(seqs[m].size());
    return out;
}

}  // namespace

TEST(Packing, FirstFitInArrivalOrder) {
    std::vector<TemplatedSequence> seqs{seq_of_length(5), seq_of_length(3), seq_of_length(6),
                                        seq_of_length(2)};
    const auto rows = pack_sequences(seqs, 8);
    ASSERT_EQ(rows.size(), 2u);
    EXPECT_EQ(member_lengths(rows[0], seqs), (std::vector<std::size_t>{5, 3}));
    EXPECT_EQ(member_lengths(rows[1], seqs), (std::vector<std::size_t>{6, 2}));
    EXPECT_EQ(rows[0].segment_ids, (std::vector<int>{0, 0, 0, 0, 0, 1, 1, 1}));
    EXPECT_EQ(rows[0].positions, (std::vector<int>{0, 1, 2, 3, 4, 0, 1, 2}));
}

TEST(Packing, ExactFitHasNoPadding) {
    std::vector<TemplatedSequence> seqs{seq_of_length(8)};
    const auto rows = pack_sequences(seqs, 8);
    ASSERT_EQ(rows.size(), 1u);
    EXPECT_EQ(rows[0].used, 8u);
    EXPECT_EQ(rows[0].token_ids, seqs[0].token_ids);
}

TEST(Packing, OversizeSequenceNamesItsId) {
    std::vector<TemplatedSequence> seqs{seq_of_length(3), seq_of_length(9)};
    std::vector<std::string> ids{"kurz", "zu-lang"};
    try {
        pack_sequences(seqs, 8, 0, ids);
        FAIL() << "expected SequenceLengthError";
    } catch (const SequenceLengthError& e) {
        EXPECT_NE(std::string(e.what()).find("zu-lang"), std::string::npos);
    }
}

TEST(Packing, InvariantsOnRandomInputs) {
    Rng rng(1);
    for (int trial = 0; trial < 200; ++trial) {
        const std::size_t max_len = 4 + rng.below(30);
        std::vector<TemplatedSequence> seqs;
        std::size_t total = 0;
        for (std::size_t i = 0, n = 1 + rng.below(20); i < n; ++i) {
            seqs.push_back(random_sequence(rng, max_len, 50));
            total += seqs.back().size();
        }
        const auto rows = pack_sequences(seqs, max_len);
        std::size_t non_pad = 0;
        std::vector<int> seen(seqs.size(), 0);
        for (const auto& row : rows) {
            ASSERT_EQ(row.token_ids.size(), max_len);
            ASSERT_EQ(row.segment_ids.size(), max_len);
            ASSERT_EQ(row.loss_mask.size(), max_len);
            for (std::size_t t = 1; t < max_len; ++t) {
                const int step = row.segment_ids[t] - row.segment_ids[t - 1];
                EXPECT_TRUE(step == 0 || step == 1);
                if (step == 1) EXPECT_EQ(row.positions[t], 0);
            }
            for (std::size_t t = row.used; t < max_len; ++t) EXPECT_EQ(row.loss_mask[t], 0);
            non_pad += row.used;
            std::size_t offset = 0;
            for (auto m : row.members) {
                ++seen[m];
                const auto& s = seqs[m];
                EXPECT_TRUE(std::equal(s.token_ids.begin(), s.token_ids.end(),
                                       row.token_ids.begin() + static_cast<std::ptrdiff_t>(offset)));
                offset += s.size();
            }
        }
        EXPECT_EQ(non_pad, total);
        for (int count : seen) EXPECT_EQ(count, 1);
    }
}

TEST(Neftune, ZeroAlphaIsIdentity) {
    Rng rng(2);
    Tensor<float> emb({3, 4}, std::vector<float>(12, 0.25f));
    const auto out = neftune_noise(emb, 0.0, rng);
    EXPECT_TRUE(std::equal(out.data().begin(), out.data().end(), emb.data().begin()));
}

TEST(Neftune, NoiseIsBoundedAndCentred) {
    Rng rng(3);
    const std::size_t L = 50, d = 40;
    const double alpha = 5.0;
    const double bound = alpha / std::sqrt(static_cast<double>(L * d));
    double sum = 0;
    std::size_t n = 0;
    while (n < 100000) {
        for (double v : neftune_noise<double>(L, d, L, alpha, rng)) {
            EXPECT_LE(std::abs(v), bound);
            sum += v;
            ++n;
        }
    }
    const double sigma = bound / std::sqrt(3.0);
    EXPECT_LE(std::abs(sum / static_cast<double>(n)), 3 * sigma / std::sqrt(static_cast<double>(n)));
    EXPECT_THROW(neftune_noise<double>(1, 1, 1, -1.0, rng), std::invalid_argument);
}

TEST(SftLoss, UniformModelGivesLogVocab) {
    const auto p = zero_params<double>(tiny_config());
    Rng rng(4);
    std::vector<TemplatedSequence> seqs;
    for (int i = 0; i < 5; ++i) seqs.push_back(random_sequence(rng, 12, 17));
    const auto rows = pack_sequences(seqs, 32);
    EXPECT_NEAR(sft_loss(p, std::span<const PackedRow>(rows)).item(), std::log(17.0), 1e-12);
}

TEST(SftLoss, NearPerfectModelApproachesZero) {
    ModelConfig cfg = tiny_config();
    auto p = zero_params<double>(cfg);
    // Every hidden state is e0 and the head puts a huge logit on token 3.
    for (int v = 0; v < cfg.vocab_size; ++v) {
        p.token_embedding.mutable_data()[static_cast<std::size_t>(v) * 16] = 1.0;
    }
    p.lm_head.mutable_data()[3 * 16] = 20.0;
    TemplatedSequence s{{3, 3, 3, 3, 3}, {0, 1, 1, 1, 1}};
    const auto rows = pack_sequences(std::vector<TemplatedSequence>{s}, 8);
    EXPECT_LT(sft_loss(p, std::span<const PackedRow>(rows)).item(), 1e-6);
}

TEST(SftLoss, RejectsBatchWithoutMaskedPositions) {
    const auto p = zero_params<double>(tiny_config());
    TemplatedSequence s{{3, 4, 5}, {0, 0, 0}};
    const auto rows = pack_sequences(std::vector<TemplatedSequence>{s}, 8);
    EXPECT_THROW(sft_loss(p, std::span<const PackedRow>(rows)), std::invalid_argument);
}

TEST(SftLoss, PackingDoesNotChangePerSequenceLoss) {
    Rng rng(5);
    const auto p = init_params<float>(tiny_config(), 6);
    for (int trial = 0; trial < 20; ++trial) {
        std::vector<TemplatedSequence> seqs;
        for (int i = 0, n = 2 + static_cast<int>(rng.below(6)); i < n; ++i) {
            seqs.push_back(random_sequence(rng, 16, 17));
        }
        const auto rows = pack_sequences(seqs, 40);
        const auto packed = per_sequence_losses(p, std::span<const PackedRow>(rows), seqs.size());
        for (std::size_t i = 0; i < seqs.size(); ++i) {
            const auto alone = pack_sequences(std::span<const TemplatedSequence>(&seqs[i], 1), 40);
            const double single = sft_loss(p, std::span<const PackedRow>(alone)).item();
            EXPECT_LE(std::abs(packed[i] - single), 1e-5);
        }
    }
}

TEST(SftLoss, InvariantToRowOrder) {
    Rng rng(7);
    const auto p = init_params<double>(tiny_config(), 8);
    std::vector<TemplatedSequence> seqs;
    for (int i = 0; i < 8; ++i) seqs.push_back(random_sequence(rng, 10, 17));
    auto rows = pack_sequences(seqs, 16);
    ASSERT_GT(rows.size(), 1u);
    const double a = sft_loss(p, std::span<const PackedRow>(rows)).item();
    std::reverse(rows.begin(), rows.end());
    const double b = sft_loss(p, std::span<const PackedRow>(rows)).item();
    EXPECT_NEAR(a, b, 1e-12);
}

TEST(SftLoss, GradientMatchesFiniteDifferences) {
    ModelConfig cfg = tiny_config();
    cfg.vocab_size = 9;
    cfg.d_model = 8;
    cfg.n_heads = 2;
    cfg.n_kv_heads = 1;
    cfg.d_ff = 12;
    auto p = init_params<double>(cfg, 9);
    for (auto& [name, t] : p.named()) {
        if (name.find("norm") == std::string::npos) {
            for (auto& v : t.mutable_data()) v *= 10.0;
        }
    }
    p.set_requires_grad(true);
    Rng rng(10);
    std::vector<TemplatedSequence> seqs;
    for (int i = 0; i < 3; ++i) seqs.push_back(random_sequence(rng, 7, 9));
    const auto rows = pack_sequences(seqs, 16);
    backward(sft_loss(p, std::span<const PackedRow>(rows)));
    const auto r = oracle::check_gradients<double>(
        p.named(),
        [&]() -> double {
            NoGradGuard g;
            return sft_loss(p, std::span<const PackedRow>(rows)).item();
        },
        1e-5);
    EXPECT_LE(r.max_rel_error, 1e-6) << r.worst_tensor << "[" << r.worst_index << "]";
}

class TrainSft : public ::testing::Test {
protected:
    std::vector<TemplatedSequence> data;
    ModelParams<float> init = init_params<float>(tiny_config(), 11);
    SftConfig config;

    void SetUp() override {
        Rng rng(12);
        for (int i = 0; i < 40; ++i) {
            // Second half repeats the first: learnable.
            TemplatedSequence s;
            std::vector<int> half;
            for (int k = 0; k < 4; ++k) half.push_back(5 + static_cast<int>(rng.below(6)));
            for (int rep = 0; rep < 2; ++rep) {
                for (int id : half) {
                    s.token_ids.push_back(id);
                    s.loss_mask.push_back(static_cast<std::uint8_t>(rep));
                }
            }
            data.push_back(s);
        }
        config.batch_size = 4;
        config.total_steps = 30;
        config.max_len = 32;
        config.peak_lr = 3e-3;
        config.seed = 13;
    }
};

TEST_F(TrainSft, IdenticalSeedsGiveIdenticalLogs) {
    const auto a = train_sft(config, data, init, std::span<const TemplatedSequence>(data).first(8));
    const auto b = train_sft(config, data, init, std::span<const TemplatedSequence>(data).first(8));
    ASSERT_EQ(a.metrics.size(), 30u);
    for (std::size_t i = 0; i < a.metrics.size(); ++i) {
        EXPECT_EQ(metric_json(a.metrics[i]), metric_json(b.metrics[i]));
    }
    EXPECT_EQ(a.params.checksum(), b.params.checksum());
    EXPECT_TRUE(a.metrics.back().eval_loss.has_value());
}

TEST_F(TrainSft, ZeroStepsReturnsInitialParams) {
    config.total_steps = 0;
    const auto r = train_sft(config, data, init);
    EXPECT_EQ(r.params.checksum(), init.checksum());
    EXPECT_TRUE(r.metrics.empty());
}

TEST_F(TrainSft, LossDecreasesAndEvalIsNoiseFree) {
    config.total_steps = 60;
    const auto r = train_sft(config, data, init);
    const auto rows = pack_sequences(data, 32);
    NoGradGuard g;
    const double before = sft_loss(init, std::span<const PackedRow>(rows)).item();
    const double after = sft_loss(r.params, std::span<const PackedRow>(rows)).item();
    const double again = sft_loss(r.params, std::span<const PackedRow>(rows)).item();
    EXPECT_LT(after, 0.8 * before);
    EXPECT_EQ(after, again);
    for (const auto& m : r.metrics) EXPECT_TRUE(std::isfinite(m.loss));
}

TEST_F(TrainSft, ValidatesConfig) {
    config.peak_lr = 0.0;
    EXPECT_THROW(train_sft(config, data, init), std::invalid_argument);
    config.peak_lr = 1e-3;
    config.batch_size = 0;
    EXPECT_THROW(train_sft(config, data, init), std::invalid_argument);
    config.batch_size = 1;
    EXPECT_THROW(train_sft(config, std::span<const TemplatedSequence>{}, init),
                 std::invalid_argument);
}
