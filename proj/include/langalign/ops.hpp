#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "langalign/tensor.hpp"

// Differentiable tensor ops. Matrices are row-major [rows x cols].
namespace langalign::ops {

template <typename T> Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b);
template <typename T> Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b);
template <typename T> Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b);
template <typename T> Tensor<T> scale(const Tensor<T>& a, T factor);
template <typename T> Tensor<T> sum(const Tensor<T>& a);
template <typename T> Tensor<T> mean(const Tensor<T>& a);
template <typename T> Tensor<T> tanh(const Tensor<T>& a);
template <typename T> Tensor<T> exp(const Tensor<T>& a);
// log(sigmoid(x)), evaluated without overflow for large |x|.
template <typename T> Tensor<T> log_sigmoid(const Tensor<T>& a);

// [N x K] * [K x M]
template <typename T> Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b);
// x [N x K] times w [M x K] transposed: the linear layer y = x W^T.
template <typename T> Tensor<T> matmul_nt(const Tensor<T>& x, const Tensor<T>& w);

// Row-wise RMS normalization with a learned gain of width D.
template <typename T> Tensor<T> rms_norm(const Tensor<T>& x, const Tensor<T>& gain, T eps);

// silu(gate) * up, elementwise.
template <typename T> Tensor<T> silu_mul(const Tensor<T>& gate, const Tensor<T>& up);

// Gathers rows of `table` [V x D] for each id.
template <typename T> Tensor<T> embedding(const Tensor<T>& table, std::span<const int> ids);

// Rotary position embedding over x [N x heads*head_dim], half-split pairing
// (component i rotates with component i + head_dim/2).
template <typename T>
Tensor<T> rope(const Tensor<T>& x, std::span<const int> positions, int n_heads, double theta);

// Grouped-query causal attention. Token i attends to tokens
// segment_start[i]..i. Query head h reads kv head h / (n_heads / n_kv_heads).
template <typename T>
Tensor<T> segment_attention(const Tensor<T>& q, const Tensor<T>& k, const Tensor<T>& v,
                            std::span<const int> segment_start, int n_heads, int n_kv_heads);

// out[n] = log softmax(logits[n])[targets[n]]; rows with target < 0 yield 0.
template <typename T>
Tensor<T> token_logprobs(const Tensor<T>& logits, std::span<const int> targets);

// out[s] = sum of x[n] with group[n] == s; group < 0 is ignored.
template <typename T>
Tensor<T> segment_sum(const Tensor<T>& x, std::span<const int> group, int n_groups);

// Row-wise argmax as values. Has no gradient; backward through it is an error.
template <typename T> Tensor<T> argmax_rows(const Tensor<T>& x);

}  // namespace langalign::ops
