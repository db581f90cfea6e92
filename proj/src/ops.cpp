#include "langalign/ops.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <limits>
#include <stdexcept>
#include <string>

namespace langalign::ops {

namespace {

template <typename T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MapMat = Eigen::Map<RowMat<T>>;
template <typename T>
using ConstMapMat = Eigen::Map<const RowMat<T>>;

template <typename T>
void require_same_shape(const Tensor<T>& a, const Tensor<T>& b, const char* op) {
    if (a.shape() != b.shape()) {
        throw std::invalid_argument(std::string(op) + ": shape mismatch " +
                                    shape_to_string(a.shape()) + " vs " +
                                    shape_to_string(b.shape()));
    }
}

template <typename T>
void require_matrix(const Tensor<T>& a, const char* op) {
    if (a.rank() != 2) {
        throw std::invalid_argument(std::string(op) + ": expected a matrix, got " +
                                    shape_to_string(a.shape()));
    }
}

template <typename T>
TensorNode<T>& parent(TensorNode<T>& self, std::size_t i) {
    return *self.parents[i];
}

template <typename T, typename F, typename D>
Tensor<T> unary(const Tensor<T>& a, const char* name, F f, D df) {
    auto in = a.data();
    std::vector<T> out(in.size());
    for (std::size_t i = 0; i < in.size(); ++i) {
        out[i] = f(in[i]);
    }
    return make_result<T>(a.shape(), std::move(out), name, {a}, [df](TensorNode<T>& self) {
        auto& p = parent(self, 0);
        for (std::size_t i = 0; i < self.grad.size(); ++i) {
            p.grad[i] += self.grad[i] * df(p.data[i], self.data[i]);
        }
    });
}

}  // namespace

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
    require_same_shape(a, b, "add");
    std::vector<T> out(a.numel());
    auto x = a.data();
    auto y = b.data();
    for (std::size_t i = 0; i < out.size(); ++i) {
        out[i] = x[i] + y[i];
    }
    return make_result<T>(a.shape(), std::move(out), "add", {a, b}, [](TensorNode<T>& self) {
        for (std::size_t k = 0; k < 2; ++k) {
            auto& p = parent(self, k);
            if (!p.requires_grad) {
                continue;
            }
            for (std::size_t i = 0; i < self.grad.size(); ++i) {
                p.grad[i] += self.grad[i];
            }
        }
    });
}

template <typename T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
    require_same_shape(a, b, "sub");
    std::vector<T> out(a.numel());
    auto x = a.data();
    auto y = b.data();
    for (std::size_t i = 0; i < out.size(); ++i) {
        out[i] = x[i] - y[i];
    }
    return make_result<T>(a.shape(), std::move(out), "sub", {a, b}, [](TensorNode<T>& self) {
        auto& pa = parent(self, 0);
        auto& pb = parent(self, 1);
        for (std::size_t i = 0; i < self.grad.size(); ++i) {
            if (pa.requires_grad) {
                pa.grad[i] += self.grad[i];
            }
            if (pb.requires_grad) {
                pb.grad[i] -= self.grad[i];
            }
        }
    });
}

template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
    require_same_shape(a, b, "mul");
    std::vector<T> out(a.numel());
    auto x = a.data();
    auto y = b.data();
    for (std::size_t i = 0; i < out.size(); ++i) {
        out[i] = x[i] * y[i];
    }
    return make_result<T>(a.shape(), std::move(out), "mul", {a, b}, [](TensorNode<T>& self) {
        auto& pa = parent(self, 0);
        auto& pb = parent(self, 1);
        for (std::size_t i = 0; i < self.grad.size(); ++i) {
            if (pa.requires_grad) {
                pa.grad[i] += self.grad[i] * pb.data[i];
            }
            if (pb.requires_grad) {
                pb.grad[i] += self.grad[i] * pa.data[i];
            }
        }
    });
}

template <typename T>
Tensor<T> scale(const Tensor<T>& a, T factor) {
    return unary(
        a, "scale", [factor](T x) { return x * factor; },
        [factor](T, T) { return factor; });
}

template <typename T>
Tensor<T> sum(const Tensor<T>& a) {
    T total = 0;
    for (T v : a.data()) {
        total += v;
    }
    return make_result<T>(Shape{1}, {total}, "sum", {a}, [](TensorNode<T>& self) {
        auto& p = parent(self, 0);
        const T g = self.grad[0];
        for (auto& pg : p.grad) {
            pg += g;
        }
    });
}

template <typename T>
Tensor<T> mean(const Tensor<T>& a) {
    if (a.numel() == 0) {
        throw std::invalid_argument("mean of an empty tensor");
    }
    return scale(sum(a), T(1) / static_cast<T>(a.numel()));
}

template <typename T>
Tensor<T> tanh(const Tensor<T>& a) {
    return unary(
        a, "tanh", [](T x) { return std::tanh(x); }, [](T, T y) { return T(1) - y * y; });
}

template <typename T>
Tensor<T> exp(const Tensor<T>& a) {
    return unary(
        a, "exp", [](T x) { return std::exp(x); }, [](T, T y) { return y; });
}

template <typename T>
Tensor<T> log_sigmoid(const Tensor<T>& a) {
    return unary(
        a, "log_sigmoid",
        [](T x) { return std::min(x, T(0)) - std::log1p(std::exp(-std::abs(x))); },
        // d/dx log sigmoid(x) = sigmoid(-x)
        [](T x, T) {
            return x >= 0 ? std::exp(-x) / (T(1) + std::exp(-x)) : T(1) / (T(1) + std::exp(x));
        });
}

template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
    require_matrix(a, "matmul");
    require_matrix(b, "matmul");
    const auto n = static_cast<Eigen::Index>(a.dim(0));
    const auto k = static_cast<Eigen::Index>(a.dim(1));
    const auto m = static_cast<Eigen::Index>(b.dim(1));
    if (static_cast<Eigen::Index>(b.dim(0)) != k) {
        throw std::invalid_argument("matmul: inner dimensions differ " +
                                    shape_to_string(a.shape()) + " * " +
                                    shape_to_string(b.shape()));
    }
    std::vector<T> out(static_cast<std::size_t>(n * m));
    MapMat<T>(out.data(), n, m).noalias() =
        ConstMapMat<T>(a.data().data(), n, k) * ConstMapMat<T>(b.data().data(), k, m);
    return make_result<T>(Shape{a.dim(0), b.dim(1)}, std::move(out), "matmul", {a, b},
                          [n, k, m](TensorNode<T>& self) {
                              auto& pa = parent(self, 0);
                              auto& pb = parent(self, 1);
                              ConstMapMat<T> g(self.grad.data(), n, m);
                              if (pa.requires_grad) {
                                  MapMat<T>(pa.grad.data(), n, k).noalias() +=
                                      g * ConstMapMat<T>(pb.data.data(), k, m).transpose();
                              }
                              if (pb.requires_grad) {
                                  MapMat<T>(pb.grad.data(), k, m).noalias() +=
                                      ConstMapMat<T>(pa.data.data(), n, k).transpose() * g;
                              }
                          });
}

template <typename T>
Tensor<T> matmul_nt(const Tensor<T>& x, const Tensor<T>& w) {
    require_matrix(x, "matmul_nt");
    require_matrix(w, "matmul_nt");
    const auto n = static_cast<Eigen::Index>(x.dim(0));
    const auto k = static_cast<Eigen::Index>(x.dim(1));
    const auto m = static_cast<Eigen::Index>(w.dim(0));
    if (static_cast<Eigen::Index>(w.dim(1)) != k) {
        throw std::invalid_argument("matmul_nt: width mismatch " + shape_to_string(x.shape()) +
                                    " vs weight " + shape_to_string(w.shape()));
    }
    std::vector<T> out(static_cast<std::size_t>(n * m));
    MapMat<T>(out.data(), n, m).noalias() =
        ConstMapMat<T>(x.data().data(), n, k) * ConstMapMat<T>(w.data().data(), m, k).transpose();
    return make_result<T>(Shape{x.dim(0), w.dim(0)}, std::move(out), "matmul_nt", {x, w},
                          [n, k, m](TensorNode<T>& self) {
                              auto& px = parent(self, 0);
                              auto& pw = parent(self, 1);
                              ConstMapMat<T> g(self.grad.data(), n, m);
                              if (px.requires_grad) {
                                  MapMat<T>(px.grad.data(), n, k).noalias() +=
                                      g * ConstMapMat<T>(pw.data.data(), m, k);
                              }
                              if (pw.requires_grad) {
                                  MapMat<T>(pw.grad.data(), m, k).noalias() +=
                                      g.transpose() * ConstMapMat<T>(px.data.data(), n, k);
                              }
                          });
}

template <typename T>
Tensor<T> rms_norm(const Tensor<T>& x, const Tensor<T>& gain, T eps) {
    require_matrix(x, "rms_norm");
    const std::size_t rows = x.dim(0);
    const std::size_t width = x.dim(1);
    if (gain.numel() != width) {
        throw std::invalid_argument("rms_norm: gain width " + std::to_string(gain.numel()) +
                                    " != " + std::to_string(width));
    }
    auto in = x.data();
    auto g = gain.data();
    std::vector<T> out(in.size());
    std::vector<T> inv_rms(rows);
    for (std::size_t r = 0; r < rows; ++r) {
        const T* row = in.data() + r * width;
        T ss = 0;
        for (std::size_t c = 0; c < width; ++c) {
            ss += row[c] * row[c];
        }
        const T inv = T(1) / std::sqrt(ss / static_cast<T>(width) + eps);
        inv_rms[r] = inv;
        for (std::size_t c = 0; c < width; ++c) {
            out[r * width + c] = row[c] * inv * g[c];
        }
    }
    return make_result<T>(
        x.shape(), std::move(out), "rms_norm", {x, gain},
        [rows, width, inv_rms = std::move(inv_rms)](TensorNode<T>& self) {
            auto& px = parent(self, 0);
            auto& pg = parent(self, 1);
            for (std::size_t r = 0; r < rows; ++r) {
                const T inv = inv_rms[r];
                const T* row = px.data.data() + r * width;
                const T* dy = self.grad.data() + r * width;
                T dot = 0;
                for (std::size_t c = 0; c < width; ++c) {
                    const T xhat = row[c] * inv;
                    const T dxhat = dy[c] * pg.data[c];
                    dot += dxhat * xhat;
                    if (pg.requires_grad) {
                        pg.grad[c] += dy[c] * xhat;
                    }
                }
                if (!px.requires_grad) {
                    continue;
                }
                dot /= static_cast<T>(width);
                T* dx = px.grad.data() + r * width;
                for (std::size_t c = 0; c < width; ++c) {
                    const T xhat = row[c] * inv;
                    dx[c] += inv * (dy[c] * pg.data[c] - xhat * dot);
                }
            }
        });
}

template <typename T>
Tensor<T> silu_mul(const Tensor<T>& gate, const Tensor<T>& up) {
    require_same_shape(gate, up, "silu_mul");
    auto a = gate.data();
    auto b = up.data();
    std::vector<T> out(a.size());
    for (std::size_t i = 0; i < a.size(); ++i) {
        const T s = T(1) / (T(1) + std::exp(-a[i]));
        out[i] = a[i] * s * b[i];
    }
    return make_result<T>(gate.shape(), std::move(out), "silu_mul", {gate, up},
                          [](TensorNode<T>& self) {
                              auto& pa = parent(self, 0);
                              auto& pb = parent(self, 1);
                              for (std::size_t i = 0; i < self.grad.size(); ++i) {
                                  const T a = pa.data[i];
                                  const T s = T(1) / (T(1) + std::exp(-a));
                                  const T silu = a * s;
                                  if (pa.requires_grad) {
                                      const T dsilu = s * (T(1) + a * (T(1) - s));
                                      pa.grad[i] += self.grad[i] * pb.data[i] * dsilu;
                                  }
                                  if (pb.requires_grad) {
                                      pb.grad[i] += self.grad[i] * silu;
                                  }
                              }
                          });
}

template <typename T>
Tensor<T> embedding(const Tensor<T>& table, std::span<const int> ids) {
    require_matrix(table, "embedding");
    const std::size_t vocab = table.dim(0);
    const std::size_t width = table.dim(1);
    std::vector<int> idx(ids.begin(), ids.end());
    std::vector<T> out(idx.size() * width);
    auto t = table.data();
    for (std::size_t n = 0; n < idx.size(); ++n) {
        if (idx[n] < 0 || static_cast<std::size_t>(idx[n]) >= vocab) {
            throw std::out_of_range("embedding: token id " + std::to_string(idx[n]) +
                                    " outside vocabulary of " + std::to_string(vocab));
        }
        std::copy_n(t.data() + static_cast<std::size_t>(idx[n]) * width, width,
                    out.data() + n * width);
    }
    Shape shape{idx.size(), width};
    return make_result<T>(std::move(shape), std::move(out), "embedding", {table},
                          [width, idx = std::move(idx)](TensorNode<T>& self) {
                              auto& p = parent(self, 0);
                              for (std::size_t n = 0; n < idx.size(); ++n) {
                                  T* dst = p.grad.data() + static_cast<std::size_t>(idx[n]) * width;
                                  const T* src = self.grad.data() + n * width;
                                  for (std::size_t c = 0; c < width; ++c) {
                                      dst[c] += src[c];
                                  }
                              }
                          });
}

template <typename T>
Tensor<T> rope(const Tensor<T>& x, std::span<const int> positions, int n_heads, double theta) {
    require_matrix(x, "rope");
    const std::size_t rows = x.dim(0);
    const std::size_t width = x.dim(1);
    if (positions.size() != rows) {
        throw std::invalid_argument("rope: positions length does not match rows");
    }
    if (n_heads <= 0 || width % static_cast<std::size_t>(n_heads) != 0) {
        throw std::invalid_argument("rope: width not divisible by head count");
    }
    const std::size_t head_dim = width / static_cast<std::size_t>(n_heads);
    if (head_dim % 2 != 0) {
        throw std::invalid_argument("rope: head_dim must be even");
    }
    const std::size_t half = head_dim / 2;
    std::vector<T> cosines(rows * half);
    std::vector<T> sines(rows * half);
    for (std::size_t r = 0; r < rows; ++r) {
        for (std::size_t i = 0; i < half; ++i) {
            const double freq =
                std::pow(theta, -2.0 * static_cast<double>(i) / static_cast<double>(head_dim));
            const double angle = static_cast<double>(positions[r]) * freq;
            cosines[r * half + i] = static_cast<T>(std::cos(angle));
            sines[r * half + i] = static_cast<T>(std::sin(angle));
        }
    }
    auto in = x.data();
    std::vector<T> out(in.size());
    for (std::size_t r = 0; r < rows; ++r) {
        for (std::size_t h = 0; h < static_cast<std::size_t>(n_heads); ++h) {
            const std::size_t base = r * width + h * head_dim;
            for (std::size_t i = 0; i < half; ++i) {
                const T c = cosines[r * half + i];
                const T s = sines[r * half + i];
                const T x1 = in[base + i];
                const T x2 = in[base + i + half];
                out[base + i] = x1 * c - x2 * s;
                out[base + i + half] = x1 * s + x2 * c;
            }
        }
    }
    return make_result<T>(
        x.shape(), std::move(out), "rope", {x},
        [rows, width, head_dim, half, n_heads, cosines = std::move(cosines),
         sines = std::move(sines)](TensorNode<T>& self) {
            auto& p = parent(self, 0);
            for (std::size_t r = 0; r < rows; ++r) {
                for (std::size_t h = 0; h < static_cast<std::size_t>(n_heads); ++h) {
                    const std::size_t base = r * width + h * head_dim;
                    for (std::size_t i = 0; i < half; ++i) {
                        const T c = cosines[r * half + i];
                        const T s = sines[r * half + i];
                        const T d1 = self.grad[base + i];
                        const T d2 = self.grad[base + i + half];
                        p.grad[base + i] += d1 * c + d2 * s;
                        p.grad[base + i + half] += -d1 * s + d2 * c;
                    }
                }
            }
        });
}

template <typename T>
Tensor<T> segment_attention(const Tensor<T>& q, const Tensor<T>& k, const Tensor<T>& v,
                            std::span<const int> segment_start, int n_heads, int n_kv_heads) {
    require_matrix(q, "segment_attention");
    require_matrix(k, "segment_attention");
    require_matrix(v, "segment_attention");
    const std::size_t rows = q.dim(0);
    if (k.dim(0) != rows || v.dim(0) != rows || segment_start.size() != rows) {
        throw std::invalid_argument("segment_attention: row counts differ");
    }
    if (n_heads <= 0 || n_kv_heads <= 0 || n_heads % n_kv_heads != 0) {
        throw std::invalid_argument("segment_attention: n_heads must be a multiple of n_kv_heads");
    }
    const std::size_t hq = static_cast<std::size_t>(n_heads);
    const std::size_t hkv = static_cast<std::size_t>(n_kv_heads);
    const std::size_t q_width = q.dim(1);
    if (q_width % hq != 0) {
        throw std::invalid_argument("segment_attention: query width not divisible by heads");
    }
    const std::size_t head_dim = q_width / hq;
    const std::size_t kv_width = head_dim * hkv;
    if (k.dim(1) != kv_width || v.dim(1) != kv_width) {
        throw std::invalid_argument("segment_attention: kv width must be head_dim * n_kv_heads");
    }
    const std::size_t group = hq / hkv;
    const T inv_sqrt = T(1) / std::sqrt(static_cast<T>(head_dim));

    std::vector<int> starts(segment_start.begin(), segment_start.end());
    // Ragged probability storage: for row i, head h, entries for j in starts[i]..i.
    std::vector<std::size_t> offsets(rows + 1, 0);
    for (std::size_t i = 0; i < rows; ++i) {
        const auto s = static_cast<std::size_t>(starts[i]);
        if (starts[i] < 0 || s > i) {
            throw std::invalid_argument("segment_attention: invalid segment start at row " +
                                        std::to_string(i));
        }
        offsets[i + 1] = offsets[i] + (i - s + 1) * hq;
    }
    std::vector<T> probs(offsets[rows]);

    auto qd = q.data();
    auto kd = k.data();
    auto vd = v.data();
    std::vector<T> out(rows * q_width, T(0));
    for (std::size_t i = 0; i < rows; ++i) {
        const std::size_t s = static_cast<std::size_t>(starts[i]);
        const std::size_t len = i - s + 1;
        for (std::size_t h = 0; h < hq; ++h) {
            const std::size_t g = h / group;
            const T* qi = qd.data() + i * q_width + h * head_dim;
            T* p = probs.data() + offsets[i] + h * len;
            T max_score = -std::numeric_limits<T>::infinity();
            for (std::size_t j = 0; j < len; ++j) {
                const T* kj = kd.data() + (s + j) * kv_width + g * head_dim;
                T dot = 0;
                for (std::size_t c = 0; c < head_dim; ++c) {
                    dot += qi[c] * kj[c];
                }
                p[j] = dot * inv_sqrt;
                max_score = std::max(max_score, p[j]);
            }
            T denom = 0;
            for (std::size_t j = 0; j < len; ++j) {
                p[j] = std::exp(p[j] - max_score);
                denom += p[j];
            }
            T* oi = out.data() + i * q_width + h * head_dim;
            for (std::size_t j = 0; j < len; ++j) {
                p[j] /= denom;
                const T* vj = vd.data() + (s + j) * kv_width + g * head_dim;
                for (std::size_t c = 0; c < head_dim; ++c) {
                    oi[c] += p[j] * vj[c];
                }
            }
        }
    }

    return make_result<T>(
        q.shape(), std::move(out), "segment_attention", {q, k, v},
        [rows, hq, group, head_dim, q_width, kv_width, inv_sqrt, starts = std::move(starts),
         offsets = std::move(offsets), probs = std::move(probs)](TensorNode<T>& self) {
            auto& pq = parent(self, 0);
            auto& pk = parent(self, 1);
            auto& pv = parent(self, 2);
            std::vector<T> dp;
            for (std::size_t i = 0; i < rows; ++i) {
                const std::size_t s = static_cast<std::size_t>(starts[i]);
                const std::size_t len = i - s + 1;
                dp.resize(len);
                for (std::size_t h = 0; h < hq; ++h) {
                    const std::size_t g = h / group;
                    const T* p = probs.data() + offsets[i] + h * len;
                    const T* dout = self.grad.data() + i * q_width + h * head_dim;
                    T weighted = 0;
                    for (std::size_t j = 0; j < len; ++j) {
                        const std::size_t row = (s + j) * kv_width + g * head_dim;
                        T dot = 0;
                        for (std::size_t c = 0; c < head_dim; ++c) {
                            dot += dout[c] * pv.data[row + c];
                        }
                        dp[j] = dot;
                        weighted += p[j] * dot;
                        if (pv.requires_grad) {
                            for (std::size_t c = 0; c < head_dim; ++c) {
                                pv.grad[row + c] += p[j] * dout[c];
                            }
                        }
                    }
                    const std::size_t qrow = i * q_width + h * head_dim;
                    for (std::size_t j = 0; j < len; ++j) {
                        const T ds = p[j] * (dp[j] - weighted) * inv_sqrt;
                        const std::size_t row = (s + j) * kv_width + g * head_dim;
                        for (std::size_t c = 0; c < head_dim; ++c) {
                            if (pq.requires_grad) {
                                pq.grad[qrow + c] += ds * pk.data[row + c];
                            }
                            if (pk.requires_grad) {
                                pk.grad[row + c] += ds * pq.data[qrow + c];
                            }
                        }
                    }
                }
            }
        });
}

template <typename T>
Tensor<T> token_logprobs(const Tensor<T>& logits, std::span<const int> targets) {
    require_matrix(logits, "token_logprobs");
    const std::size_t rows = logits.dim(0);
    const std::size_t vocab = logits.dim(1);
    if (targets.size() != rows) {
        throw std::invalid_argument("token_logprobs: targets length does not match rows");
    }
    std::vector<int> tgt(targets.begin(), targets.end());
    std::vector<T> lse(rows, T(0));
    std::vector<T> out(rows, T(0));
    auto d = logits.data();
    for (std::size_t r = 0; r < rows; ++r) {
        if (tgt[r] < 0) {
            continue;
        }
        if (static_cast<std::size_t>(tgt[r]) >= vocab) {
            throw std::out_of_range("token_logprobs: target " + std::to_string(tgt[r]) +
                                    " outside vocabulary");
        }
        const T* row = d.data() + r * vocab;
        const T mx = *std::max_element(row, row + vocab);
        T acc = 0;
        for (std::size_t c = 0; c < vocab; ++c) {
            acc += std::exp(row[c] - mx);
        }
        lse[r] = mx + std::log(acc);
        out[r] = row[tgt[r]] - lse[r];
    }
    return make_result<T>(Shape{rows}, std::move(out), "token_logprobs", {logits},
                          [vocab, tgt = std::move(tgt), lse = std::move(lse)](TensorNode<T>& self) {
                              auto& p = parent(self, 0);
                              for (std::size_t r = 0; r < tgt.size(); ++r) {
                                  if (tgt[r] < 0) {
                                      continue;
                                  }
                                  const T g = self.grad[r];
                                  const T* row = p.data.data() + r * vocab;
                                  T* dst = p.grad.data() + r * vocab;
                                  for (std::size_t c = 0; c < vocab; ++c) {
                                      dst[c] -= g * std::exp(row[c] - lse[r]);
                                  }
                                  dst[tgt[r]] += g;
                              }
                          });
}

template <typename T>
Tensor<T> segment_sum(const Tensor<T>& x, std::span<const int> group, int n_groups) {
    if (group.size() != x.numel()) {
        throw std::invalid_argument("segment_sum: group length does not match input");
    }
    std::vector<int> grp(group.begin(), group.end());
    std::vector<T> out(static_cast<std::size_t>(n_groups), T(0));
    auto d = x.data();
    for (std::size_t i = 0; i < grp.size(); ++i) {
        if (grp[i] < 0) {
            continue;
        }
        if (grp[i] >= n_groups) {
            throw std::out_of_range("segment_sum: group index out of range");
        }
        out[static_cast<std::size_t>(grp[i])] += d[i];
    }
    return make_result<T>(Shape{static_cast<std::size_t>(n_groups)}, std::move(out),
                          "segment_sum", {x}, [grp = std::move(grp)](TensorNode<T>& self) {
                              auto& p = parent(self, 0);
                              for (std::size_t i = 0; i < grp.size(); ++i) {
                                  if (grp[i] >= 0) {
                                      p.grad[i] += self.grad[static_cast<std::size_t>(grp[i])];
                                  }
                              }
                          });
}

template <typename T>
Tensor<T> argmax_rows(const Tensor<T>& x) {
    require_matrix(x, "argmax_rows");
    const std::size_t rows = x.dim(0);
    const std::size_t cols = x.dim(1);
    std::vector<T> out(rows);
    auto d = x.data();
    for (std::size_t r = 0; r < rows; ++r) {
        const T* row = d.data() + r * cols;
        out[r] = static_cast<T>(std::max_element(row, row + cols) - row);
    }
    return make_result<T>(Shape{rows}, std::move(out), "argmax_rows", {x}, BackwardFn<T>{});
}

#define LANGALIGN_INSTANTIATE_OPS(T)                                                           \
    template Tensor<T> add(const Tensor<T>&, const Tensor<T>&);                                \
    template Tensor<T> sub(const Tensor<T>&, const Tensor<T>&);                                \
    template Tensor<T> mul(const Tensor<T>&, const Tensor<T>&);                                \
    template Tensor<T> scale(const Tensor<T>&, T);                                             \
    template Tensor<T> sum(const Tensor<T>&);                                                  \
    template Tensor<T> mean(const Tensor<T>&);                                                 \
    template Tensor<T> tanh(const Tensor<T>&);                                                 \
    template Tensor<T> exp(const Tensor<T>&);                                                  \
    template Tensor<T> log_sigmoid(const Tensor<T>&);                                          \
    template Tensor<T> matmul(const Tensor<T>&, const Tensor<T>&);                             \
    template Tensor<T> matmul_nt(const Tensor<T>&, const Tensor<T>&);                          \
    template Tensor<T> rms_norm(const Tensor<T>&, const Tensor<T>&, T);                        \
    template Tensor<T> silu_mul(const Tensor<T>&, const Tensor<T>&);                           \
    template Tensor<T> embedding(const Tensor<T>&, std::span<const int>);                      \
    template Tensor<T> rope(const Tensor<T>&, std::span<const int>, int, double);              \
    template Tensor<T> segment_attention(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&, \
                                         std::span<const int>, int, int);                      \
    template Tensor<T> token_logprobs(const Tensor<T>&, std::span<const int>);                 \
    template Tensor<T> segment_sum(const Tensor<T>&, std::span<const int>, int);               \
    template Tensor<T> argmax_rows(const Tensor<T>&);

LANGALIGN_INSTANTIATE_OPS(float)
LANGALIGN_INSTANTIATE_OPS(double)

#undef LANGALIGN_INSTANTIATE_OPS

}  // namespace langalign::ops
