// Plain-loop multi-head transformer in double precision. Shares nothing with
// the library forward beyond the parameter layout; used as an oracle.
#pragma once

#include <cmath>
#include <stdexcept>
#include <vector>

#include "langalign/model.hpp"

namespace langalign::oracle {

using Matrix = std::vector<std::vector<double>>;

template <typename T>
Matrix to_matrix(const Tensor<T>& t) {
    const std::size_t rows = t.dim(0), cols = t.dim(1);
    Matrix m(rows, std::vector<double>(cols));
    for (std::size_t r = 0; r < rows; ++r) {
        for (std::size_t c = 0; c < cols; ++c) {
            m[r][c] = static_cast<double>(t.data()[r * cols + c]);
        }
    }
    return m;
}

template <typename T>
std::vector<double> to_vector(const Tensor<T>& t) {
    return {t.data().begin(), t.data().end()};
}

// y = W x for W [out x in]
inline std::vector<double> matvec(const Matrix& w, const std::vector<double>& x) {
    std::vector<double> y(w.size(), 0.0);
    for (std::size_t o = 0; o < w.size(); ++o) {
        for (std::size_t i = 0; i < x.size(); ++i) {
            y[o] += w[o][i] * x[i];
        }
    }
    return y;
}

inline std::vector<double> rms(const std::vector<double>& x, const std::vector<double>& g,
                               double eps) {
    double ss = 0;
    for (double v : x) ss += v * v;
    const double inv = 1.0 / std::sqrt(ss / static_cast<double>(x.size()) + eps);
    std::vector<double> y(x.size());
    for (std::size_t i = 0; i < x.size(); ++i) y[i] = x[i] * inv * g[i];
    return y;
}

inline void rotate(std::vector<double>& v, std::size_t offset, std::size_t hd, int pos,
                   double theta) {
    const std::size_t half = hd / 2;
    for (std::size_t i = 0; i < half; ++i) {
        const double angle = pos * std::pow(theta, -2.0 * i / static_cast<double>(hd));
        const double a = v[offset + i], b = v[offset + i + half];
        v[offset + i] = a * std::cos(angle) - b * std::sin(angle);
        v[offset + i + half] = a * std::sin(angle) + b * std::cos(angle);
    }
}

// Single causal sequence, positions 0..n-1, standard multi-head attention.
// Requires n_kv_heads == n_heads.
template <typename T>
Matrix reference_logits(const ModelParams<T>& p, const std::vector<int>& tokens) {
    const auto& cfg = p.config;
    if (cfg.n_kv_heads != cfg.n_heads) {
        throw std::invalid_argument("reference model is plain multi-head attention");
    }
    const std::size_t n = tokens.size();
    const std::size_t d = static_cast<std::size_t>(cfg.d_model);
    const std::size_t heads = static_cast<std::size_t>(cfg.n_heads);
    const std::size_t hd = d / heads;
    const Matrix emb = to_matrix(p.token_embedding);
    Matrix x(n);
    for (std::size_t t = 0; t < n; ++t) x[t] = emb[static_cast<std::size_t>(tokens[t])];

    for (const auto& layer : p.layers) {
        const Matrix wq = to_matrix(layer.wq), wk = to_matrix(layer.wk), wv = to_matrix(layer.wv),
                     wo = to_matrix(layer.wo), wg = to_matrix(layer.w_gate),
                     wu = to_matrix(layer.w_up), wd = to_matrix(layer.w_down);
        const auto g1 = to_vector(layer.attn_norm), g2 = to_vector(layer.mlp_norm);
        Matrix q(n), k(n), v(n);
        for (std::size_t t = 0; t < n; ++t) {
            const auto h = rms(x[t], g1, cfg.norm_eps);
            q[t] = matvec(wq, h);
            k[t] = matvec(wk, h);
            v[t] = matvec(wv, h);
            for (std::size_t head = 0; head < heads; ++head) {
                rotate(q[t], head * hd, hd, static_cast<int>(t), cfg.rope_theta);
                rotate(k[t], head * hd, hd, static_cast<int>(t), cfg.rope_theta);
            }
        }
        for (std::size_t t = 0; t < n; ++t) {
            std::vector<double> attn(d, 0.0);
            for (std::size_t head = 0; head < heads; ++head) {
                std::vector<double> s(t + 1);
                double mx = -1e300;
                for (std::size_t j = 0; j <= t; ++j) {
                    double dot = 0;
                    for (std::size_t i = 0; i < hd; ++i) {
                        dot += q[t][head * hd + i] * k[j][head * hd + i];
                    }
                    s[j] = dot / std::sqrt(static_cast<double>(hd));
                    mx = std::max(mx, s[j]);
                }
                double z = 0;
                for (auto& e : s) z += (e = std::exp(e - mx));
                for (std::size_t j = 0; j <= t; ++j) {
                    for (std::size_t i = 0; i < hd; ++i) {
                        attn[head * hd + i] += s[j] / z * v[j][head * hd + i];
                    }
                }
            }
            const auto o = matvec(wo, attn);
            for (std::size_t i = 0; i < d; ++i) x[t][i] += o[i];
        }
        for (std::size_t t = 0; t < n; ++t) {
            const auto h = rms(x[t], g2, cfg.norm_eps);
            auto gate = matvec(wg, h);
            const auto up = matvec(wu, h);
            for (std::size_t i = 0; i < gate.size(); ++i) {
                gate[i] = gate[i] / (1.0 + std::exp(-gate[i])) * up[i];
            }
            const auto down = matvec(wd, gate);
            for (std::size_t i = 0; i < d; ++i) x[t][i] += down[i];
        }
    }
    const auto gf = to_vector(p.final_norm);
    const Matrix head = to_matrix(p.lm_head);
    Matrix logits(n);
    for (std::size_t t = 0; t < n; ++t) logits[t] = matvec(head, rms(x[t], gf, cfg.norm_eps));
    return logits;
}

// Copies a GQA model into an equivalent plain multi-head model by duplicating
// each kv head for every query head in its group.
template <typename T>
ModelParams<T> expand_kv_heads(const ModelParams<T>& p) {
    ModelConfig cfg = p.config;
    const std::size_t group = static_cast<std::size_t>(cfg.n_heads / cfg.n_kv_heads);
    const std::size_t hd = static_cast<std::size_t>(cfg.head_dim());
    const std::size_t d = static_cast<std::size_t>(cfg.d_model);
    cfg.n_kv_heads = cfg.n_heads;
    ModelParams<T> out = p.clone(false);
    out.config = cfg;
    for (std::size_t l = 0; l < p.layers.size(); ++l) {
        for (auto which : {&LayerParams<T>::wk, &LayerParams<T>::wv}) {
            const auto& src = p.layers[l].*which;
            std::vector<T> data(d * d);
            for (std::size_t h = 0; h < static_cast<std::size_t>(cfg.n_heads); ++h) {
                const std::size_t kv = h / group;
                for (std::size_t r = 0; r < hd; ++r) {
                    for (std::size_t c = 0; c < d; ++c) {
                        data[(h * hd + r) * d + c] = src.data()[(kv * hd + r) * d + c];
                    }
                }
            }
            out.layers[l].*which = Tensor<T>({d, d}, std::move(data));
        }
    }
    out.validate();
    return out;
}

}  // namespace langalign::oracle
