#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "langalign/tensor.hpp"

namespace langalign {

struct ModelConfig {
    int vocab_size = 512;
    int d_model = 64;
    int n_layers = 2;
    int n_heads = 4;
    int n_kv_heads = 2;
    int d_ff = 176;
    int max_seq_len = 2048;
    double rope_theta = 10000.0;
    double norm_eps = 1e-5;

    int head_dim() const { return d_model / n_heads; }
    int kv_dim() const { return head_dim() * n_kv_heads; }
    void validate() const;
    bool operator==(const ModelConfig&) const = default;
};

template <typename T>
struct LayerParams {
    Tensor<T> attn_norm;  // [d_model]
    Tensor<T> wq;         // [d_model x d_model]
    Tensor<T> wk;         // [kv_dim x d_model]
    Tensor<T> wv;         // [kv_dim x d_model]
    Tensor<T> wo;         // [d_model x d_model]
    Tensor<T> mlp_norm;   // [d_model]
    Tensor<T> w_gate;     // [d_ff x d_model]
    Tensor<T> w_up;       // [d_ff x d_model]
    Tensor<T> w_down;     // [d_model x d_ff]
};

template <typename T>
struct ModelParams {
    ModelConfig config;
    Tensor<T> token_embedding;  // [vocab x d_model]
    std::vector<LayerParams<T>> layers;
    Tensor<T> final_norm;  // [d_model]
    Tensor<T> lm_head;     // [vocab x d_model]

    // Deterministic order shared by the optimizer, checkpoints, and tests.
    std::vector<std::pair<std::string, Tensor<T>>> named() const;
    std::vector<Tensor<T>> tensors() const;
    std::size_t parameter_count() const;

    // Independent copy of every tensor (no shared storage).
    ModelParams clone(bool requires_grad) const;
    void set_requires_grad(bool value);
    // Hash of all parameter bytes, for immutability checks.
    std::uint64_t checksum() const;
    // Throws unless shapes match the config and all values are finite.
    void validate() const;
};

// Weights ~ N(0, 0.02), output projections scaled by 1/sqrt(2 n_layers),
// norm gains 1.
template <typename T>
ModelParams<T> init_params(const ModelConfig& config, std::uint64_t seed);

// All-zero weights with unit norm gains; yields uniform next-token logits.
template <typename T>
ModelParams<T> zero_params(const ModelConfig& config);

template <typename To, typename From>
ModelParams<To> convert_params(const ModelParams<From>& params);

// One flat token stream holding any number of independent segments. Segments
// are maximal runs of equal segment_ids; attention never crosses them.
struct TokenLayout {
    std::vector<int> token_ids;
    std::vector<int> segment_ids;
    std::vector<int> positions;

    std::size_t size() const { return token_ids.size(); }
    // Appends `ids` as a new segment with positions 0..n-1. Returns its start.
    std::size_t append_segment(std::span<const int> ids);
    // Index of the first token of the segment containing each token.
    std::vector<int> segment_starts() const;
};

class SequenceLengthError : public std::invalid_argument {
public:
    using std::invalid_argument::invalid_argument;
};

// Logits [tokens x vocab]. `embedding_noise`, when non-empty, is added to the
// token embeddings (one value per embedding component).
template <typename T>
Tensor<T> forward(const ModelParams<T>& params, const TokenLayout& layout,
                  std::span<const T> embedding_noise = {});

// Sum over completion tokens of log p(token | preceding tokens), scored as a
// single segment prompt+completion.
template <typename T>
double sequence_logprob(const ModelParams<T>& params, std::span<const int> prompt_ids,
                        std::span<const int> completion_ids);

struct ScoredSequence {
    std::vector<int> prompt_ids;
    std::vector<int> completion_ids;
};

// Differentiable completion log-probs, one entry per sequence, all scored in
// a single packed forward pass.
template <typename T>
Tensor<T> completion_logprobs(const ModelParams<T>& params,
                              std::span<const ScoredSequence> sequences);

class CheckpointError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

inline constexpr char kCheckpointMagic[8] = {'L', 'A', 'L', 'G', 'C', 'K', 'P', 'T'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

// Layout: 8-byte magic, u32 version, u64 header length, UTF-8 JSON header
// (config, payload_bytes, tensor directory), then little-endian payloads, each
// starting on a 64-byte boundary relative to the payload origin.
template <typename T>
void save_checkpoint(const ModelParams<T>& params, const std::filesystem::path& path);

// Validates the whole file before constructing anything.
template <typename T>
ModelParams<T> load_checkpoint(const std::filesystem::path& path);

}  // namespace langalign
