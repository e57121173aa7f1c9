#pragma once

#include "ctxlm/common.hpp"
#include "ctxlm/embedder.hpp"
#include "ctxlm/tokenizer.hpp"

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json_fwd.hpp>

namespace ctxlm::model {

enum class Kind { contextual, base };

/// Architecture description for both model kinds. The contextual kind is an
/// encoder-decoder: a bidirectional transformer over projected context
/// vectors feeding per-layer cross-attention in a causal decoder. The base
/// kind is the decoder alone, without cross-attention.
struct ArchConfig {
  Kind kind = Kind::contextual;
  // context encoder (contextual kind only)
  int d_model_enc = 0;
  int n_layers_enc = 0;
  int heads_enc = 0;
  int ffn_enc = 0;
  // decoder
  int d_model_dec = 0;
  int n_layers_dec = 0;
  int heads_dec = 0;
  int ffn_dec = 0;
  int vocab_size = 0;
  int d_ctx = 0;
  int max_seq_len = 0;
  float dropout = 0.1f;
  bool tie_embeddings = true;

  void validate() const;  // throws InvalidArch

  /// Paper-scale presets. Encoder 512 wide / ffn 2048 at 12 layers (~38M),
  /// decoder 768/12/12/3072 (~121M with the memory bridge), base
  /// 1024/12/16/4096 (~160M); 8K vocab, 384-d context vectors.
  static ArchConfig contextual_paper();
  static ArchConfig base_paper();

  /// Desk-scale presets used by the synthetic recipes.
  static ArchConfig contextual_tiny(int vocab_size, int d_ctx = 64);
  static ArchConfig base_tiny(int vocab_size);

  nlohmann::json to_json() const;
  static ArchConfig from_json(const nlohmann::json& j);

  bool operator==(const ArchConfig&) const = default;
};

/// Exact closed-form parameter count for an architecture.
std::int64_t param_count(const ArchConfig& arch);

struct ParamSplit {
  std::int64_t encoder = 0;  // context encoder (bridge from d_ctx included)
  std::int64_t decoder = 0;  // decoder, cross-attention and memory bridge included
  std::int64_t total = 0;
};
ParamSplit param_count_split(const ArchConfig& arch);

/// Returns the base-kind config closest to `target` parameters without
/// exceeding it by more than 1%, varying d_model_dec on the template's
/// head-dim grid with ffn = 4*d. Throws Unreachable when even the smallest
/// width overshoots.
ArchConfig match_width(const ArchConfig& templ, std::int64_t target);

// ---------------------------------------------------------------------------
// Parameters
// ---------------------------------------------------------------------------

template <typename T>
struct LinearP {
  Mat<T> w;  // in x out
  Vec<T> b;
};

template <typename T>
struct NormP {
  Vec<T> gain;
  Vec<T> bias;
};

template <typename T>
struct AttnP {
  LinearP<T> q, k, v, o;
};

template <typename T>
struct BlockP {
  NormP<T> ln_attn;
  AttnP<T> self;
  bool has_cross = false;
  NormP<T> ln_cross;
  AttnP<T> cross;
  NormP<T> ln_ffn;
  LinearP<T> fc_in, fc_out;
};

template <typename T>
struct ModelParams {
  ArchConfig arch;
  std::uint64_t seed = 0;

  // context pathway (contextual kind only)
  Vec<T> null_ctx;            // learned-null vector for the sentinel slot
  LinearP<T> ctx_in;          // d_ctx -> d_model_enc
  std::vector<BlockP<T>> enc;
  NormP<T> enc_ln;
  LinearP<T> mem;             // d_model_enc -> d_model_dec

  // decoder
  Mat<T> tok_emb;             // vocab x d_model_dec
  Mat<T> pos_emb;             // max_seq_len x d_model_dec
  std::vector<BlockP<T>> dec;
  NormP<T> dec_ln;
  Mat<T> out_proj;            // d_model_dec x vocab, only when not tied
};

using ModelParameters = ModelParams<float>;

/// Allocates all tensors for `arch`, zero-filled.
template <typename T>
ModelParams<T> make_params(const ArchConfig& arch);

/// Deterministic initialization: scaled normals (std 0.02, residual output
/// projections scaled by 1/sqrt(2*n_layers)), unit layer-norm gains, zero
/// biases, zero learned-null vector.
template <typename T>
ModelParams<T> init_params(const ArchConfig& arch, std::uint64_t seed);

/// Flat view over every parameter tensor in declaration order. `decay`
/// marks rank-2 tensors, the ones AdamW applies weight decay to.
template <typename T>
struct TensorRef {
  std::string name;
  T* data;
  std::int64_t rows;
  std::int64_t cols;
  bool decay;
  std::int64_t size() const { return rows * cols; }
};

template <typename T>
std::vector<TensorRef<T>> tensor_refs(ModelParams<T>& params);

// ---------------------------------------------------------------------------
// Forward / gradients
// ---------------------------------------------------------------------------

/// Logits for every input position (rows = |tokens|, cols = vocab). Eval
/// mode: no dropout. Position t sees tokens[0..t] and, for the contextual
/// kind, the context vectors; ctx[0] is the sentinel slot and empty-flagged
/// vectors are masked out.
template <typename T>
Mat<T> forward(const ModelParams<T>& params,
               const std::vector<embed::ContextVector>& ctx,
               std::span<const int> tokens);

template <typename T>
struct LogLikelihood {
  std::vector<T> per_token;  // entry t-1 scores tokens[t], t >= 1
  T total = 0;
};

/// Natural-log likelihood of tokens[1..] given tokens[0] (BOS) and context.
template <typename T>
LogLikelihood<T> log_likelihood(const ModelParams<T>& params,
                                const std::vector<embed::ContextVector>& ctx,
                                std::span<const int> tokens);

/// Per-position log-probability rows (log-softmax of forward logits).
template <typename T>
Mat<T> log_prob_rows(const ModelParams<T>& params,
                     const std::vector<embed::ContextVector>& ctx,
                     std::span<const int> tokens);

struct BatchItem {
  std::vector<embed::ContextVector> ctx;
  bpe::TokenSequence tokens;
};

template <typename T>
struct GradientResult {
  ModelParams<T> grads;
  T loss = 0;  // mean per-token negative log-likelihood
  std::int64_t target_tokens = 0;
};

/// Exact reverse-mode gradients of the batch-mean token NLL for every
/// parameter. Pass a Rng to enable dropout (training mode); scoring paths
/// leave it null.
template <typename T>
GradientResult<T> gradients(const ModelParams<T>& params,
                            const std::vector<BatchItem>& batch,
                            Rng* dropout_rng = nullptr);

// ---------------------------------------------------------------------------
// Checkpoints
// ---------------------------------------------------------------------------

/// Versioned binary checkpoint: header (format version, arch JSON, seed),
/// then tensors in declaration order, each prefixed by name and shape,
/// little-endian 32-bit floats.
void save_checkpoint(const ModelParameters& params,
                     const std::filesystem::path& path);
ModelParameters load_checkpoint(const std::filesystem::path& path);

extern template struct ModelParams<float>;
extern template struct ModelParams<double>;

}  // namespace ctxlm::model
