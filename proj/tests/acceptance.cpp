// Acceptance suite: one PASS/FAIL line per criterion. Pass criterion numbers
// as arguments to run a subset.
#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <functional>
#include <numbers>
#include <set>
#include <sstream>

#include <json.hpp>

#include "grad_check.hpp"
#include "langalign/config.hpp"
#include "langalign/dpo.hpp"
#include "langalign/eval.hpp"
#include "langalign/pipeline.hpp"
#include "langalign/sft.hpp"
#include "langalign/synthetic.hpp"
#include "reference_model.hpp"
#include "unigram_model.hpp"

using namespace langalign;

namespace {

const std::filesystem::path kSource = LANGALIGN_SOURCE_DIR;

struct Outcome {
    bool pass = false;
    std::string detail;
};

struct Criterion {
    int id;
    std::string name;
    double budget_seconds;
    std::function<Outcome()> run;
};

std::string fmt(const char* f, auto... args) {
    char buf[512];
    std::snprintf(buf, sizeof buf, f, args...);
    return buf;
}

std::string slurp(const std::filesystem::path& p) {
    std::ifstream in(p, std::ios::binary);
    std::stringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

std::filesystem::path scratch(const std::string& name) {
    auto dir = std::filesystem::temp_directory_path() / "langalign_acceptance";
    std::filesystem::create_directories(dir);
    return dir / name;
}

template <typename T>
void sharpen(ModelParams<T>& p, T factor) {
    for (auto& [name, t] : p.named()) {
        if (name.find("norm") != std::string::npos) continue;
        for (auto& v : t.mutable_data()) v *= factor;
    }
}

std::vector<int> random_ids(Rng& rng, std::size_t n, int vocab) {
    std::vector<int> ids(n);
    for (auto& id : ids) id = static_cast<int>(rng.below(static_cast<std::uint64_t>(vocab)));
    return ids;
}

TemplatedSequence random_sequence(Rng& rng, std::size_t max_len, int vocab) {
    const std::size_t n = 2 + rng.below(max_len - 1);
    const std::size_t prompt = rng.below(n - 1);
    TemplatedSequence s;
    s.token_ids = random_ids(rng, n, vocab);
    for (std::size_t i = 0; i < n; ++i) s.loss_mask.push_back(i > prompt ? 1 : 0);
    return s;
}

EncodedPair random_pair(Rng& rng, int vocab, std::size_t max_part) {
    EncodedPair p;
    p.id = std::to_string(rng.next_u64());
    p.prompt = random_ids(rng, 1 + rng.below(max_part), vocab);
    p.chosen = random_ids(rng, 1 + rng.below(max_part), vocab);
    do {
        p.rejected = random_ids(rng, 1 + rng.below(max_part), vocab);
    } while (p.rejected == p.chosen);
    return p;
}

std::size_t parameter_count(const ModelParams<double>& p) {
    std::size_t n = 0;
    for (auto& [name, t] : p.named()) n += t.data().size();
    return n;
}

Outcome dpo_fixed_point() {
    Rng rng(101);
    double worst = 0.0;
    bool acc_ok = true;
    for (int trial = 0; trial < 20; ++trial) {
        ModelConfig cfg;
        cfg.vocab_size = 8 + static_cast<int>(rng.below(40));
        cfg.n_heads = 1 << rng.below(3);
        cfg.n_kv_heads = std::max(1, cfg.n_heads >> rng.below(2));
        cfg.d_model = cfg.n_heads * 2 * static_cast<int>(1 + rng.below(4));
        cfg.n_layers = 1 + static_cast<int>(rng.below(3));
        cfg.d_ff = 8 + static_cast<int>(rng.below(24));
        cfg.max_seq_len = 64;
        auto policy = init_params<double>(cfg, rng.next_u64());
        sharpen(policy, 5.0);
        std::vector<EncodedPair> batch;
        for (std::size_t i = 0, n = 1 + rng.below(12); i < n; ++i) {
            batch.push_back(random_pair(rng, cfg.vocab_size, 10));
        }
        const auto ref = policy.clone(false);
        const double beta = 0.01 + rng.uniform();
        const auto r = dpo_loss(policy, ref, std::span<const EncodedPair>(batch), beta);
        worst = std::max(worst, std::abs(r.loss.item() - std::numbers::ln2));
        acc_ok = acc_ok && r.stats.accuracy == 0.5;
    }
    return {worst <= 1e-6 && acc_ok, fmt("max |loss - ln2| = %.2e, accuracy 0.5 in all trials: %s", worst,
                                         acc_ok ? "yes" : "no")};
}

Outcome gradient_oracle() {
    ModelConfig cfg;
    cfg.vocab_size = 11;
    cfg.d_model = 8;
    cfg.n_layers = 2;
    cfg.n_heads = 2;
    cfg.n_kv_heads = 1;
    cfg.d_ff = 12;
    cfg.max_seq_len = 32;
    auto params = init_params<double>(cfg, 202);
    sharpen(params, 10.0);
    const std::size_t n_params = parameter_count(params);

    Rng rng(203);
    std::vector<TemplatedSequence> seqs;
    for (int i = 0; i < 3; ++i) seqs.push_back(random_sequence(rng, 8, cfg.vocab_size));
    const auto rows = pack_sequences(seqs, 16);

    auto sft_params = params.clone(false);
    sft_params.set_requires_grad(true);
    backward(sft_loss(sft_params, std::span<const PackedRow>(rows)));
    const auto sft = oracle::check_gradients<double>(
        sft_params.named(),
        [&]() -> double {
            NoGradGuard g;
            return sft_loss(sft_params, std::span<const PackedRow>(rows)).item();
        },
        1e-5);

    std::vector<EncodedPair> pairs;
    for (int i = 0; i < 3; ++i) pairs.push_back(random_pair(rng, cfg.vocab_size, 4));
    const auto ref = init_params<double>(cfg, 204);
    const auto ref_lp = reference_logprobs(ref, std::span<const EncodedPair>(pairs));
    auto policy = params.clone(false);
    policy.set_requires_grad(true);
    const double beta = 0.05;
    backward(dpo_loss(policy, std::span<const double>(ref_lp), std::span<const EncodedPair>(pairs), beta).loss);
    const auto dpo = oracle::check_gradients<double>(
        policy.named(),
        [&]() -> double {
            NoGradGuard g;
            return dpo_loss(policy, std::span<const double>(ref_lp), std::span<const EncodedPair>(pairs), beta)
                .loss.item();
        },
        1e-5);

    const bool pass = n_params <= 10000 && sft.max_rel_error <= 1e-6 && dpo.max_rel_error <= 1e-6;
    return {pass, fmt("%zu params; max rel error sft %.2e (%s), dpo %.2e (%s)", n_params, sft.max_rel_error,
                      sft.worst_tensor.c_str(), dpo.max_rel_error, dpo.worst_tensor.c_str())};
}

Outcome packing_isolation() {
    Rng rng(301);
    ModelConfig cfg;
    cfg.vocab_size = 29;
    cfg.d_model = 16;
    cfg.n_layers = 2;
    cfg.n_heads = 4;
    cfg.n_kv_heads = 2;
    cfg.d_ff = 24;
    cfg.max_seq_len = 64;
    auto p = init_params<float>(cfg, 302);
    sharpen(p, 4.0f);
    double worst = 0.0;
    bool conserved = true;
    for (int trial = 0; trial < 100; ++trial) {
        const std::size_t max_len = 24 + rng.below(40);
        std::vector<TemplatedSequence> seqs;
        std::size_t total = 0;
        for (std::size_t i = 0, n = 2 + rng.below(10); i < n; ++i) {
            seqs.push_back(random_sequence(rng, 20, cfg.vocab_size));
            total += seqs.back().size();
        }
        const auto rows = pack_sequences(seqs, max_len);
        std::size_t used = 0, members = 0;
        for (const auto& row : rows) {
            used += row.used;
            members += row.members.size();
        }
        conserved = conserved && used == total && members == seqs.size();
        const auto packed = per_sequence_losses(p, std::span<const PackedRow>(rows), seqs.size());
        for (std::size_t i = 0; i < seqs.size(); ++i) {
            const auto alone = pack_sequences(std::span<const TemplatedSequence>(&seqs[i], 1), seqs[i].size());
            NoGradGuard g;
            const double single = sft_loss(p, std::span<const PackedRow>(alone)).item();
            worst = std::max(worst, std::abs(packed[i] - single));
        }
    }
    return {worst <= 1e-5 && conserved,
            fmt("max |packed - unpacked| = %.2e, tokens conserved: %s", worst, conserved ? "yes" : "no")};
}

Outcome gqa_degeneracy() {
    Rng rng(401);
    double worst = 0.0;
    for (int trial = 0; trial < 10; ++trial) {
        ModelConfig cfg;
        cfg.vocab_size = 20 + static_cast<int>(rng.below(30));
        cfg.n_heads = 1 << rng.below(3);
        cfg.n_kv_heads = cfg.n_heads;
        cfg.d_model = cfg.n_heads * 4;
        cfg.n_layers = 1 + static_cast<int>(rng.below(3));
        cfg.d_ff = 24;
        cfg.max_seq_len = 64;
        auto p = init_params<float>(cfg, rng.next_u64());
        sharpen(p, 15.0f);
        const auto ids = random_ids(rng, 1 + rng.below(30), cfg.vocab_size);
        TokenLayout layout;
        layout.append_segment(ids);
        const auto logits = forward(p, layout);
        const auto ref = oracle::reference_logits(p, ids);
        const std::size_t w = logits.dim(1);
        for (std::size_t t = 0; t < ids.size(); ++t) {
            for (std::size_t v = 0; v < w; ++v) {
                worst = std::max(worst, std::abs(static_cast<double>(logits.data()[t * w + v]) - ref[t][v]));
            }
        }
    }
    return {worst <= 1e-5, fmt("max abs logit diff = %.2e over 10 configs", worst)};
}

Outcome sft_convergence() {
    const auto records = synthetic::copy_corpus(2000, 5, 5, 1);
    std::vector<std::string> texts;
    for (const auto& r : records) {
        for (const auto& t : r.chat().turns) texts.push_back(t.content);
    }
    for (const char* role : {"system\n", "user\n", "assistant\n"}) texts.push_back(role);
    const auto tok = Tokenizer::train(texts, 400);
    std::vector<TemplatedSequence> seqs;
    for (const auto& r : records) seqs.push_back(tok.apply_chat_template(r.chat()));

    ModelConfig cfg;
    cfg.vocab_size = tok.vocab_size();
    cfg.d_model = 128;
    cfg.n_layers = 4;
    cfg.n_heads = 4;
    cfg.n_kv_heads = 2;
    cfg.d_ff = 352;
    cfg.max_seq_len = 64;
    SftConfig sc;
    sc.batch_size = 16;
    sc.total_steps = 300;
    sc.max_len = 64;
    sc.schedule = ScheduleKind::constant;
    sc.warmup_steps = 20;
    sc.peak_lr = 1e-3;
    sc.neftune_alpha = 1.0;
    sc.seed = 1;
    const auto result = train_sft(sc, seqs, init_params<float>(cfg, 1));

    const std::vector<TemplatedSequence> probe(seqs.begin(), seqs.begin() + 200);
    const auto rows = pack_sequences(probe, 64);
    NoGradGuard g;
    const double loss = sft_loss(result.params, std::span<const PackedRow>(rows)).item();
    return {loss < 0.1, fmt("masked train loss %.4f after 300 steps (uniform ln V = %.3f)", loss,
                            std::log(static_cast<double>(cfg.vocab_size)))};
}

Outcome dpo_convergence() {
    const auto records = synthetic::preference_corpus(640, 601);
    std::vector<std::string> texts = synthetic::tokenizer_corpus();
    for (const auto& r : records) {
        const auto& pair = std::get<PreferencePair>(r.payload);
        texts.insert(texts.end(), {pair.prompt, pair.chosen, pair.rejected});
    }
    const auto tok = Tokenizer::train(texts, 400);
    std::vector<EncodedPair> pairs;
    for (const auto& r : records) {
        pairs.push_back(encode_pair(tok, r.id, std::get<PreferencePair>(r.payload), 128));
    }
    ModelConfig cfg;
    cfg.vocab_size = tok.vocab_size();
    cfg.d_model = 64;
    cfg.n_layers = 2;
    cfg.n_heads = 4;
    cfg.n_kv_heads = 2;
    cfg.d_ff = 176;
    cfg.max_seq_len = 128;
    DpoConfig dc;
    dc.beta = 0.1;
    dc.batch_size = 16;
    dc.epochs = 1;
    dc.peak_lr = 1e-3;
    dc.seed = 602;
    const auto result = train_dpo(dc, init_params<float>(cfg, 603), pairs);
    const auto& s = result.summary;
    const bool start_ok = std::abs(s.initial_train_acc - 0.5) <= 0.05;
    return {start_ok && s.train_acc > 0.95,
            fmt("train accuracy %.3f -> %.3f after one epoch (%lld steps, %zu pairs)", s.initial_train_acc,
                s.train_acc, static_cast<long long>(s.steps), s.train_pairs)};
}

std::string mixed_text(Rng& rng, std::size_t words) {
    static const std::vector<std::string> vocab{"Hund", "über", "straße", "Grüße", "der", "die", "das",
                                                "\"zitat\"", "tab\t", "\\pfad", "ñ", "日本", "emoji🙂"};
    static const std::vector<std::string> breaks{"\n", "\r\n", "\n\n", "\r\n\r\n", "\r", " "};
    std::string out;
    for (std::size_t i = 0; i < words; ++i) {
        out += vocab[rng.below(vocab.size())];
        out += rng.below(4) == 0 ? breaks[rng.below(breaks.size())] : " ";
    }
    return out;
}

Outcome translation_pipeline() {
    const auto input = scratch("mixed_10mb.jsonl");
    {
        Rng rng(701);
        std::ofstream out(input, std::ios::binary);
        std::size_t bytes = 0;
        for (std::size_t i = 0; bytes < 10u * 1024 * 1024; ++i) {
            std::string line;
            if (i % 3 == 0) {
                nlohmann::ordered_json j{{"id", "p" + std::to_string(i)},
                                         {"license", "mit"},
                                         {"prompt", mixed_text(rng, 10 + rng.below(60))},
                                         {"chosen", mixed_text(rng, 10 + rng.below(80))},
                                         {"rejected", mixed_text(rng, 10 + rng.below(80))}};
                line = j.dump();
            } else {
                nlohmann::json turns = nlohmann::json::array();
                for (std::size_t t = 0, n = 1 + rng.below(4); t < n; ++t) {
                    turns.push_back({{"role", t % 2 ? "assistant" : "user"},
                                     {"content", mixed_text(rng, rng.below(120))}});
                }
                nlohmann::ordered_json j{{"id", "c" + std::to_string(i)}, {"messages", turns}};
                line = i % 2 ? j.dump() : j.dump(1);
                if (i % 2 == 0) {
                    std::erase(line, '\n');
                }
            }
            out << line << '\n';
            bytes += line.size() + 1;
        }
    }
    const std::string original = slurp(input);
    bool identical = true;
    std::string first;
    for (int in_flight : {1, 8, 32}) {
        const auto config = parse_config("", "acceptance", {"dataprep.max_in_flight=" + std::to_string(in_flight)},
                                         {Stage::translate});
        const auto output = scratch("mixed_out_" + std::to_string(in_flight) + ".jsonl");
        const auto s = run_translate(config, input, output, {}, [](const std::string&) {});
        const std::string got = slurp(output);
        identical = identical && s.failures == 0 && got == original;
        if (first.empty()) first = got;
        identical = identical && got == first;
    }
    return {identical, fmt("%.1f MB corpus, identity output bit-exact for max_in_flight 1/8/32: %s",
                           static_cast<double>(original.size()) / (1024.0 * 1024.0), identical ? "yes" : "no")};
}

Outcome cost_math() {
    const double commercial = estimate_cost(1.5e9, CostModel{20.0, 0.0});
    const double open_source = estimate_cost(1.5e9, CostModel{0.2, 0.0});
    const double ratio = commercial / open_source;
    return {commercial == 30000.0 && open_source == 300.0 && ratio == 100.0,
            fmt("commercial %.2f, open-source %.2f, ratio %.6g", commercial, open_source, ratio)};
}

Outcome eval_oracle() {
    std::vector<std::string> corpus = synthetic::tokenizer_corpus();
    const auto tok = Tokenizer::train(corpus, 320);
    Rng rng(901);
    double worst = 0.0;
    const auto items = synthetic::ordering_task(50, 902, 4);
    for (const auto& item : items) {
        const auto probs = oracle::random_distribution(rng, static_cast<std::size_t>(tok.vocab_size()));
        const auto p = oracle::unigram_model(probs);
        const auto r = score_choices(p, tok, item, EvalOptions{});
        for (std::size_t c = 0; c < item.choices.size(); ++c) {
            const double expected = oracle::brute_force_probability(probs, tok.encode(item.choices[c]));
            worst = std::max(worst, std::abs(std::exp(r.scores[c]) - expected));
            worst = std::max(worst, std::abs(r.scores[c] - std::log(expected)));
        }
    }

    std::vector<MultipleChoiceItem> balanced;
    for (std::size_t i = 0; i < 1000; ++i) {
        MultipleChoiceItem item;
        item.context = "frage " + std::to_string(i);
        for (char c : {'a', 'b', 'c', 'd'}) item.choices.push_back(std::string(3, c));
        item.answer_index = static_cast<int>(rng.below(4));
        balanced.push_back(item);
    }
    ModelConfig cfg;
    cfg.vocab_size = tok.vocab_size();
    cfg.d_model = 8;
    cfg.n_layers = 1;
    cfg.n_heads = 2;
    cfg.n_kv_heads = 1;
    cfg.d_ff = 8;
    cfg.max_seq_len = 64;
    const auto report = evaluate(zero_params<float>(cfg), tok, balanced, EvalOptions{});
    const bool pass = worst <= 1e-9 && report.accuracy >= 0.21 && report.accuracy <= 0.29;
    return {pass, fmt("max oracle deviation %.2e; uniform accuracy %.3f on n=1000", worst, report.accuracy)};
}

Outcome determinism() {
    const auto config = load_config(kSource / "configs" / "toy.ini");
    const auto dir = scratch("toy_run");
    std::filesystem::remove_all(dir);
    const RunLayout run{dir};
    const Logger quiet = [](const std::string&) {};
    run_prepare(config, run, quiet);
    run_sft(config, run, quiet);
    run_dpo(config, run, quiet);
    run_eval(config, run, quiet);
    const std::string got = slurp(run.eval_report());
    const std::string golden = slurp(kSource / "tests" / "golden" / "toy_report.json");
    const bool same = !golden.empty() && got == golden;
    std::string detail = same ? fmt("eval report matches golden (%zu bytes)", golden.size())
                              : fmt("eval report differs from golden (%zu vs %zu bytes)", got.size(), golden.size());
    return {same, detail};
}

}  // namespace

int main(int argc, char** argv) {
    const std::vector<Criterion> criteria{
        {1, "DPO fixed point", 10, dpo_fixed_point},
        {2, "gradient oracle", 120, gradient_oracle},
        {3, "packing isolation", 60, packing_isolation},
        {4, "GQA degeneracy", 10, gqa_degeneracy},
        {5, "SFT convergence", 300, sft_convergence},
        {6, "DPO convergence", 600, dpo_convergence},
        {7, "translation pipeline", 60, translation_pipeline},
        {8, "cost math", 1, cost_math},
        {9, "eval oracle", 60, eval_oracle},
        {10, "determinism", 1200, determinism},
    };
    std::set<int> only;
    for (int i = 1; i < argc; ++i) only.insert(std::atoi(argv[i]));

    int failed = 0;
    for (const auto& c : criteria) {
        if (!only.empty() && !only.contains(c.id)) continue;
        const auto t0 = std::chrono::steady_clock::now();
        Outcome o;
        try {
            o = c.run();
        } catch (const std::exception& e) {
            o = {false, std::string("exception: ") + e.what()};
        }
        const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
        const bool in_time = secs < c.budget_seconds;
        const bool pass = o.pass && in_time;
        failed += !pass;
        std::printf("%s  %2d %-22s %s; %.1f s (budget %.0f s)\n", pass ? "PASS" : "FAIL", c.id, c.name.c_str(),
                    o.detail.c_str(), secs, c.budget_seconds);
        std::fflush(stdout);
    }
    return failed == 0 ? 0 : 1;
}
