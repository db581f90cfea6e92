#include "langalign/model.hpp"

#include <cmath>

#include "langalign/ops.hpp"
#include "langalign/rng.hpp"

namespace langalign {

void ModelConfig::validate() const {
    auto positive = [](int v, const char* name) {
        if (v <= 0) {
            throw std::invalid_argument(std::string("model.") + name + " must be positive");
        }
    };
    positive(vocab_size, "vocab_size");
    positive(d_model, "d_model");
    positive(n_layers, "n_layers");
    positive(n_heads, "n_heads");
    positive(n_kv_heads, "n_kv_heads");
    positive(d_ff, "d_ff");
    positive(max_seq_len, "max_seq_len");
    if (n_heads % n_kv_heads != 0) {
        throw std::invalid_argument("model.n_heads must be a multiple of model.n_kv_heads");
    }
    if (d_model % n_heads != 0) {
        throw std::invalid_argument("model.d_model must be a multiple of model.n_heads");
    }
    if (head_dim() % 2 != 0) {
        throw std::invalid_argument("model head dimension must be even for rotary embeddings");
    }
    if (!(rope_theta > 0.0) || !(norm_eps > 0.0)) {
        throw std::invalid_argument("model.rope_theta and model.norm_eps must be positive");
    }
}

template <typename T>
std::vector<std::pair<std::string, Tensor<T>>> ModelParams<T>::named() const {
    std::vector<std::pair<std::string, Tensor<T>>> out;
    out.emplace_back("token_embedding", token_embedding);
    for (std::size_t i = 0; i < layers.size(); ++i) {
        const auto& l = layers[i];
        const std::string p = "layers." + std::to_string(i) + ".";
        out.emplace_back(p + "attn_norm", l.attn_norm);
        out.emplace_back(p + "wq", l.wq);
        out.emplace_back(p + "wk", l.wk);
        out.emplace_back(p + "wv", l.wv);
        out.emplace_back(p + "wo", l.wo);
        out.emplace_back(p + "mlp_norm", l.mlp_norm);
        out.emplace_back(p + "w_gate", l.w_gate);
        out.emplace_back(p + "w_up", l.w_up);
        out.emplace_back(p + "w_down", l.w_down);
    }
    out.emplace_back("final_norm", final_norm);
    out.emplace_back("lm_head", lm_head);
    return out;
}

template <typename T>
std::vector<Tensor<T>> ModelParams<T>::tensors() const {
    std::vector<Tensor<T>> out;
    for (auto& [name, t] : named()) {
        out.push_back(t);
    }
    return out;
}

template <typename T>
std::size_t ModelParams<T>::parameter_count() const {
    std::size_t n = 0;
    for (const auto& t : tensors()) {
        n += t.numel();
    }
    return n;
}

template <typename T>
ModelParams<T> ModelParams<T>::clone(bool requires_grad) const {
    ModelParams out;
    out.config = config;
    out.token_embedding = token_embedding.clone(requires_grad);
    for (const auto& l : layers) {
        out.layers.push_back({l.attn_norm.clone(requires_grad), l.wq.clone(requires_grad),
                              l.wk.clone(requires_grad), l.wv.clone(requires_grad),
                              l.wo.clone(requires_grad), l.mlp_norm.clone(requires_grad),
                              l.w_gate.clone(requires_grad), l.w_up.clone(requires_grad),
                              l.w_down.clone(requires_grad)});
    }
    out.final_norm = final_norm.clone(requires_grad);
    out.lm_head = lm_head.clone(requires_grad);
    return out;
}

template <typename T>
void ModelParams<T>::set_requires_grad(bool value) {
    for (auto& t : tensors()) {
        t.set_requires_grad(value);
    }
}

template <typename T>
std::uint64_t ModelParams<T>::checksum() const {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (const auto& t : tensors()) {
        auto d = t.data();
        h = fnv1a64(d.data(), d.size() * sizeof(T), h);
    }
    return h;
}

template <typename T>
void ModelParams<T>::validate() const {
    config.validate();
    const auto d = static_cast<std::size_t>(config.d_model);
    const auto v = static_cast<std::size_t>(config.vocab_size);
    const auto kv = static_cast<std::size_t>(config.kv_dim());
    const auto ff = static_cast<std::size_t>(config.d_ff);
    auto expect = [](const Tensor<T>& t, const Shape& shape, const std::string& name) {
        if (!t.defined() || t.shape() != shape) {
            throw std::invalid_argument("parameter " + name + " has shape " +
                                        (t.defined() ? shape_to_string(t.shape()) : "<none>") +
                                        ", expected " + shape_to_string(shape));
        }
        if (!all_finite(t.data())) {
            throw NonFiniteError("parameter " + name + " has non-finite values");
        }
    };
    if (layers.size() != static_cast<std::size_t>(config.n_layers)) {
        throw std::invalid_argument("layer count does not match config");
    }
    expect(token_embedding, {v, d}, "token_embedding");
    for (std::size_t i = 0; i < layers.size(); ++i) {
        const auto& l = layers[i];
        const std::string p = "layers." + std::to_string(i) + ".";
        expect(l.attn_norm, {d}, p + "attn_norm");
        expect(l.wq, {d, d}, p + "wq");
        expect(l.wk, {kv, d}, p + "wk");
        expect(l.wv, {kv, d}, p + "wv");
        expect(l.wo, {d, d}, p + "wo");
        expect(l.mlp_norm, {d}, p + "mlp_norm");
        expect(l.w_gate, {ff, d}, p + "w_gate");
        expect(l.w_up, {ff, d}, p + "w_up");
        expect(l.w_down, {d, ff}, p + "w_down");
    }
    expect(final_norm, {d}, "final_norm");
    expect(lm_head, {v, d}, "lm_head");
}

namespace {

template <typename T>
Tensor<T> random_matrix(std::size_t rows, std::size_t cols, double stddev, Rng& rng) {
    std::vector<T> data(rows * cols);
    for (auto& x : data) {
        x = static_cast<T>(rng.normal() * stddev);
    }
    return Tensor<T>({rows, cols}, std::move(data), true);
}

template <typename T>
ModelParams<T> build_params(const ModelConfig& config, Rng* rng) {
    config.validate();
    const auto d = static_cast<std::size_t>(config.d_model);
    const auto v = static_cast<std::size_t>(config.vocab_size);
    const auto kv = static_cast<std::size_t>(config.kv_dim());
    const auto ff = static_cast<std::size_t>(config.d_ff);
    const double std_in = 0.02;
    const double std_out = 0.02 / std::sqrt(2.0 * config.n_layers);
    auto mat = [rng](std::size_t r, std::size_t c, double s) {
        if (rng == nullptr) {
            return Tensor<T>::zeros({r, c}, true);
        }
        return random_matrix<T>(r, c, s, *rng);
    };
    ModelParams<T> p;
    p.config = config;
    p.token_embedding = mat(v, d, std_in);
    for (int i = 0; i < config.n_layers; ++i) {
        LayerParams<T> l;
        l.attn_norm = Tensor<T>::filled({d}, T(1), true);
        l.wq = mat(d, d, std_in);
        l.wk = mat(kv, d, std_in);
        l.wv = mat(kv, d, std_in);
        l.wo = mat(d, d, std_out);
        l.mlp_norm = Tensor<T>::filled({d}, T(1), true);
        l.w_gate = mat(ff, d, std_in);
        l.w_up = mat(ff, d, std_in);
        l.w_down = mat(d, ff, std_out);
        p.layers.push_back(std::move(l));
    }
    p.final_norm = Tensor<T>::filled({d}, T(1), true);
    p.lm_head = mat(v, d, std_in);
    return p;
}

}  // namespace

template <typename T>
ModelParams<T> init_params(const ModelConfig& config, std::uint64_t seed) {
    Rng rng(seed);
    return build_params<T>(config, &rng);
}

template <typename T>
ModelParams<T> zero_params(const ModelConfig& config) {
    return build_params<T>(config, nullptr);
}

template <typename To, typename From>
ModelParams<To> convert_params(const ModelParams<From>& params) {
    auto convert = [](const Tensor<From>& t) {
        auto d = t.data();
        std::vector<To> out(d.begin(), d.end());
        return Tensor<To>(t.shape(), std::move(out), t.requires_grad());
    };
    ModelParams<To> out;
    out.config = params.config;
    out.token_embedding = convert(params.token_embedding);
    for (const auto& l : params.layers) {
        out.layers.push_back({convert(l.attn_norm), convert(l.wq), convert(l.wk), convert(l.wv),
                              convert(l.wo), convert(l.mlp_norm), convert(l.w_gate),
                              convert(l.w_up), convert(l.w_down)});
    }
    out.final_norm = convert(params.final_norm);
    out.lm_head = convert(params.lm_head);
    return out;
}

std::size_t TokenLayout::append_segment(std::span<const int> ids) {
    const std::size_t start = token_ids.size();
    const int seg = segment_ids.empty() ? 0 : segment_ids.back() + 1;
    for (std::size_t i = 0; i < ids.size(); ++i) {
        token_ids.push_back(ids[i]);
        segment_ids.push_back(seg);
        positions.push_back(static_cast<int>(i));
    }
    return start;
}

std::vector<int> TokenLayout::segment_starts() const {
    std::vector<int> starts(segment_ids.size());
    for (std::size_t i = 0; i < segment_ids.size(); ++i) {
        starts[i] = (i == 0 || segment_ids[i] != segment_ids[i - 1]) ? static_cast<int>(i)
                                                                     : starts[i - 1];
    }
    return starts;
}

template <typename T>
Tensor<T> forward(const ModelParams<T>& params, const TokenLayout& layout,
                  std::span<const T> embedding_noise) {
    const auto& cfg = params.config;
    const std::size_t n = layout.size();
    if (n == 0) {
        throw std::invalid_argument("forward: empty input");
    }
    if (layout.segment_ids.size() != n || layout.positions.size() != n) {
        throw std::invalid_argument("forward: token, segment, and position lengths differ");
    }
    const auto starts = layout.segment_starts();
    for (std::size_t i = 0; i < n; ++i) {
        const auto seg_len = i - static_cast<std::size_t>(starts[i]) + 1;
        if (seg_len > static_cast<std::size_t>(cfg.max_seq_len)) {
            throw SequenceLengthError("segment starting at token " + std::to_string(starts[i]) +
                                      " exceeds max_seq_len " + std::to_string(cfg.max_seq_len));
        }
        if (layout.token_ids[i] < 0 || layout.token_ids[i] >= cfg.vocab_size) {
            throw std::out_of_range("forward: token id " + std::to_string(layout.token_ids[i]) +
                                    " outside vocabulary of " + std::to_string(cfg.vocab_size));
        }
    }
    const T eps = static_cast<T>(cfg.norm_eps);

    Tensor<T> x = ops::embedding(params.token_embedding, layout.token_ids);
    if (!embedding_noise.empty()) {
        if (embedding_noise.size() != x.numel()) {
            throw std::invalid_argument("forward: embedding noise has the wrong size");
        }
        x = ops::add(x, Tensor<T>(x.shape(),
                                  std::vector<T>(embedding_noise.begin(), embedding_noise.end())));
    }
    for (const auto& layer : params.layers) {
        Tensor<T> h = ops::rms_norm(x, layer.attn_norm, eps);
        Tensor<T> q = ops::rope(ops::matmul_nt(h, layer.wq), layout.positions, cfg.n_heads,
                                cfg.rope_theta);
        Tensor<T> k = ops::rope(ops::matmul_nt(h, layer.wk), layout.positions, cfg.n_kv_heads,
                                cfg.rope_theta);
        Tensor<T> v = ops::matmul_nt(h, layer.wv);
        Tensor<T> attn = ops::segment_attention(q, k, v, starts, cfg.n_heads, cfg.n_kv_heads);
        x = ops::add(x, ops::matmul_nt(attn, layer.wo));

        h = ops::rms_norm(x, layer.mlp_norm, eps);
        Tensor<T> gated =
            ops::silu_mul(ops::matmul_nt(h, layer.w_gate), ops::matmul_nt(h, layer.w_up));
        x = ops::add(x, ops::matmul_nt(gated, layer.w_down));
    }
    x = ops::rms_norm(x, params.final_norm, eps);
    return ops::matmul_nt(x, params.lm_head);
}

template <typename T>
Tensor<T> completion_logprobs(const ModelParams<T>& params,
                              std::span<const ScoredSequence> sequences) {
    TokenLayout layout;
    std::vector<int> targets;
    std::vector<int> group;
    for (std::size_t s = 0; s < sequences.size(); ++s) {
        const auto& seq = sequences[s];
        if (seq.prompt_ids.empty() && !seq.completion_ids.empty()) {
            throw std::invalid_argument("completion_logprobs: completion needs a non-empty prompt");
        }
        const std::size_t total = seq.prompt_ids.size() + seq.completion_ids.size();
        if (total > static_cast<std::size_t>(params.config.max_seq_len)) {
            throw SequenceLengthError("prompt+completion length " + std::to_string(total) +
                                      " exceeds max_seq_len " +
                                      std::to_string(params.config.max_seq_len));
        }
        std::vector<int> ids = seq.prompt_ids;
        ids.insert(ids.end(), seq.completion_ids.begin(), seq.completion_ids.end());
        layout.append_segment(ids);
        // Position p predicts token p+1; score only predictions of completion tokens.
        for (std::size_t p = 0; p < ids.size(); ++p) {
            const bool scored = p + 1 < ids.size() && p + 1 >= seq.prompt_ids.size();
            targets.push_back(scored ? ids[p + 1] : -1);
            group.push_back(scored ? static_cast<int>(s) : -1);
        }
    }
    if (layout.size() == 0) {
        return Tensor<T>::zeros({sequences.size()});
    }
    Tensor<T> logits = forward(params, layout);
    Tensor<T> lp = ops::token_logprobs(logits, targets);
    return ops::segment_sum(lp, group, static_cast<int>(sequences.size()));
}

template <typename T>
double sequence_logprob(const ModelParams<T>& params, std::span<const int> prompt_ids,
                        std::span<const int> completion_ids) {
    if (completion_ids.empty()) {
        return 0.0;
    }
    NoGradGuard no_grad;
    ScoredSequence seq{{prompt_ids.begin(), prompt_ids.end()},
                       {completion_ids.begin(), completion_ids.end()}};
    TokenLayout layout;
    std::vector<int> ids = seq.prompt_ids;
    ids.insert(ids.end(), seq.completion_ids.begin(), seq.completion_ids.end());
    if (ids.size() > static_cast<std::size_t>(params.config.max_seq_len)) {
        throw SequenceLengthError("prompt+completion length " + std::to_string(ids.size()) +
                                  " exceeds max_seq_len " +
                                  std::to_string(params.config.max_seq_len));
    }
    if (seq.prompt_ids.empty()) {
        throw std::invalid_argument("sequence_logprob: completion needs a non-empty prompt");
    }
    layout.append_segment(ids);
    Tensor<T> logits = forward(params, layout);
    std::vector<int> targets(ids.size(), -1);
    for (std::size_t p = seq.prompt_ids.size() - 1; p + 1 < ids.size(); ++p) {
        targets[p] = ids[p + 1];
    }
    Tensor<T> lp = ops::token_logprobs(logits, targets);
    double total = 0.0;
    for (std::size_t p = 0; p < targets.size(); ++p) {
        if (targets[p] >= 0) {
            total += static_cast<double>(lp.data()[p]);
        }
    }
    return total;
}

template struct ModelParams<float>;
template struct ModelParams<double>;
template ModelParams<float> init_params(const ModelConfig&, std::uint64_t);
template ModelParams<double> init_params(const ModelConfig&, std::uint64_t);
template ModelParams<float> zero_params(const ModelConfig&);
template ModelParams<double> zero_params(const ModelConfig&);
template ModelParams<float> convert_params(const ModelParams<double>&);
template ModelParams<double> convert_params(const ModelParams<float>&);
template ModelParams<float> convert_params(const ModelParams<float>&);
template ModelParams<double> convert_params(const ModelParams<double>&);
template Tensor<float> forward(const ModelParams<float>&, const TokenLayout&,
                               std::span<const float>);
template Tensor<double> forward(const ModelParams<double>&, const TokenLayout&,
                                std::span<const double>);
template Tensor<float> completion_logprobs(const ModelParams<float>&,
                                           std::span<const ScoredSequence>);
template Tensor<double> completion_logprobs(const ModelParams<double>&,
                                            std::span<const ScoredSequence>);
template double sequence_logprob(const ModelParams<float>&, std::span<const int>,
                                 std::span<const int>);
template double sequence_logprob(const ModelParams<double>&, std::span<const int>,
                                 std::span<const int>);

}  // namespace langalign
