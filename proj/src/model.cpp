#include "ctxlm/model.hpp"

#include <nlohmann/json.hpp>

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdlib>
#include <cstring>
#include <fstream>
#include <limits>

namespace ctxlm::model {

using json = nlohmann::json;

// ---------------------------------------------------------------------------
// ArchConfig
// ---------------------------------------------------------------------------

void ArchConfig::validate() const {
  auto positive = [](int v, const char* what) {
    if (v <= 0) throw InvalidArch(std::string(what) + " must be positive");
  };
  positive(d_model_dec, "d_model_dec");
  positive(n_layers_dec, "n_layers_dec");
  positive(heads_dec, "heads_dec");
  positive(ffn_dec, "ffn_dec");
  positive(vocab_size, "vocab_size");
  positive(max_seq_len, "max_seq_len");
  if (d_model_dec % heads_dec != 0) {
    throw InvalidArch("d_model_dec must be divisible by heads_dec");
  }
  if (kind == Kind::contextual) {
    positive(d_model_enc, "d_model_enc");
    positive(n_layers_enc, "n_layers_enc");
    positive(heads_enc, "heads_enc");
    positive(ffn_enc, "ffn_enc");
    if (d_model_enc % heads_enc != 0) {
      throw InvalidArch("d_model_enc must be divisible by heads_enc");
    }
    if (d_ctx < 8) throw InvalidArch("d_ctx must be >= 8");
  }
  if (dropout < 0.0f || dropout >= 1.0f) {
    throw InvalidArch("dropout must be in [0, 1)");
  }
}

ArchConfig ArchConfig::contextual_paper() {
  ArchConfig a;
  a.kind = Kind::contextual;
  a.d_model_enc = 512;
  a.n_layers_enc = 12;
  a.heads_enc = 8;
  a.ffn_enc = 2048;
  a.d_model_dec = 768;
  a.n_layers_dec = 12;
  a.heads_dec = 12;
  a.ffn_dec = 3072;
  a.vocab_size = 8000;
  a.d_ctx = 384;
  a.max_seq_len = 1024;
  return a;
}

ArchConfig ArchConfig::base_paper() {
  ArchConfig a;
  a.kind = Kind::base;
  a.d_model_dec = 1024;
  a.n_layers_dec = 12;
  a.heads_dec = 16;
  a.ffn_dec = 4096;
  a.vocab_size = 8000;
  a.d_ctx = 384;
  a.max_seq_len = 1024;
  return a;
}

ArchConfig ArchConfig::contextual_tiny(int vocab_size, int d_ctx) {
  ArchConfig a;
  a.kind = Kind::contextual;
  a.d_model_enc = 32;
  a.n_layers_enc = 1;
  a.heads_enc = 2;
  a.ffn_enc = 64;
  a.d_model_dec = 48;
  a.n_layers_dec = 2;
  a.heads_dec = 4;
  a.ffn_dec = 96;
  a.vocab_size = vocab_size;
  a.d_ctx = d_ctx;
  a.max_seq_len = 64;
  a.dropout = 0.0f;
  return a;
}

ArchConfig ArchConfig::base_tiny(int vocab_size) {
  ArchConfig a;
  a.kind = Kind::base;
  a.d_model_dec = 48;
  a.n_layers_dec = 2;
  a.heads_dec = 12;  // head_dim 4: a fine width grid for match_width
  a.ffn_dec = 192;
  a.vocab_size = vocab_size;
  a.d_ctx = 64;
  a.max_seq_len = 64;
  a.dropout = 0.0f;
  return a;
}

json ArchConfig::to_json() const {
  json j;
  j["kind"] = kind == Kind::contextual ? "contextual" : "base";
  j["d_model_enc"] = d_model_enc;
  j["n_layers_enc"] = n_layers_enc;
  j["heads_enc"] = heads_enc;
  j["ffn_enc"] = ffn_enc;
  j["d_model_dec"] = d_model_dec;
  j["n_layers_dec"] = n_layers_dec;
  j["heads_dec"] = heads_dec;
  j["ffn_dec"] = ffn_dec;
  j["vocab_size"] = vocab_size;
  j["d_ctx"] = d_ctx;
  j["max_seq_len"] = max_seq_len;
  j["dropout"] = dropout;
  j["tie_embeddings"] = tie_embeddings;
  return j;
}

ArchConfig ArchConfig::from_json(const json& j) {
  ArchConfig a;
  const std::string kind = j.value("kind", "contextual");
  if (kind == "contextual") {
    a.kind = Kind::contextual;
  } else if (kind == "base") {
    a.kind = Kind::base;
  } else {
    throw InvalidArch("unknown kind '" + kind + "'");
  }
  a.d_model_enc = j.value("d_model_enc", 0);
  a.n_layers_enc = j.value("n_layers_enc", 0);
  a.heads_enc = j.value("heads_enc", 0);
  a.ffn_enc = j.value("ffn_enc", 0);
  a.d_model_dec = j.value("d_model_dec", 0);
  a.n_layers_dec = j.value("n_layers_dec", 0);
  a.heads_dec = j.value("heads_dec", 0);
  a.ffn_dec = j.value("ffn_dec", 0);
  a.vocab_size = j.value("vocab_size", 0);
  a.d_ctx = j.value("d_ctx", 0);
  a.max_seq_len = j.value("max_seq_len", 0);
  a.dropout = j.value("dropout", 0.1f);
  a.tie_embeddings = j.value("tie_embeddings", true);
  a.validate();
  return a;
}

// ---------------------------------------------------------------------------
// Parameter accounting
// ---------------------------------------------------------------------------

namespace {

std::int64_t linear_count(std::int64_t in, std::int64_t out) {
  return in * out + out;
}

std::int64_t block_count(std::int64_t d, std::int64_t ffn, bool cross) {
  std::int64_t count = 0;
  count += 4 * linear_count(d, d);        // self attention q,k,v,o
  count += 2 * d;                         // ln_attn
  if (cross) {
    count += 4 * linear_count(d, d);      // cross attention
    count += 2 * d;                       // ln_cross
  }
  count += linear_count(d, ffn) + linear_count(ffn, d);
  count += 2 * d;                         // ln_ffn
  return count;
}

}  // namespace

ParamSplit param_count_split(const ArchConfig& arch) {
  arch.validate();
  ParamSplit split;
  const std::int64_t d = arch.d_model_dec;
  const bool ctx = arch.kind == Kind::contextual;

  std::int64_t dec = 0;
  dec += static_cast<std::int64_t>(arch.vocab_size) * d;  // token embeddings
  dec += static_cast<std::int64_t>(arch.max_seq_len) * d; // positions
  dec += arch.n_layers_dec * block_count(d, arch.ffn_dec, ctx);
  dec += 2 * d;                                           // final layer norm
  if (!arch.tie_embeddings) dec += d * static_cast<std::int64_t>(arch.vocab_size);
  if (ctx) dec += linear_count(arch.d_model_enc, d);      // memory bridge

  std::int64_t enc = 0;
  if (ctx) {
    const std::int64_t e = arch.d_model_enc;
    enc += arch.d_ctx;                        // learned-null vector
    enc += linear_count(arch.d_ctx, e);       // input bridge
    enc += arch.n_layers_enc * block_count(e, arch.ffn_enc, false);
    enc += 2 * e;                             // final layer norm
  }
  split.encoder = enc;
  split.decoder = dec;
  split.total = enc + dec;
  return split;
}

std::int64_t param_count(const ArchConfig& arch) {
  return param_count_split(arch).total;
}

ArchConfig match_width(const ArchConfig& templ, std::int64_t target) {
  if (templ.kind == Kind::base && param_count(templ) == target) return templ;
  const int head_dim = templ.d_model_dec / templ.heads_dec;
  const std::int64_t ceiling = target + target / 100;

  std::optional<ArchConfig> best;
  std::int64_t best_gap = std::numeric_limits<std::int64_t>::max();
  for (int d = head_dim;; d += head_dim) {
    ArchConfig cfg = templ;
    cfg.kind = Kind::base;
    cfg.d_model_enc = cfg.n_layers_enc = cfg.heads_enc = cfg.ffn_enc = 0;
    cfg.d_model_dec = d;
    cfg.heads_dec = d / head_dim;
    cfg.ffn_dec = 4 * d;
    const std::int64_t count = param_count(cfg);
    if (count > ceiling) break;
    const std::int64_t gap = std::abs(count - target);
    if (gap < best_gap) {
      best_gap = gap;
      best = cfg;
    }
  }
  if (!best) {
    throw Unreachable("no base width fits " + std::to_string(target) +
                      " parameters within 1%");
  }
  return *best;
}

// ---------------------------------------------------------------------------
// Allocation / initialization / tensor walking
// ---------------------------------------------------------------------------

namespace {

template <typename T>
void alloc_linear(LinearP<T>& p, int in, int out) {
  p.w = Mat<T>::Zero(in, out);
  p.b = Vec<T>::Zero(out);
}

template <typename T>
void alloc_norm(NormP<T>& p, int d) {
  p.gain = Vec<T>::Zero(d);
  p.bias = Vec<T>::Zero(d);
}

template <typename T>
void alloc_block(BlockP<T>& b, int d, int ffn, bool cross) {
  alloc_norm(b.ln_attn, d);
  alloc_linear(b.self.q, d, d);
  alloc_linear(b.self.k, d, d);
  alloc_linear(b.self.v, d, d);
  alloc_linear(b.self.o, d, d);
  b.has_cross = cross;
  if (cross) {
    alloc_norm(b.ln_cross, d);
    alloc_linear(b.cross.q, d, d);
    alloc_linear(b.cross.k, d, d);
    alloc_linear(b.cross.v, d, d);
    alloc_linear(b.cross.o, d, d);
  }
  alloc_norm(b.ln_ffn, d);
  alloc_linear(b.fc_in, d, ffn);
  alloc_linear(b.fc_out, ffn, d);
}

}  // namespace

template <typename T>
ModelParams<T> make_params(const ArchConfig& arch) {
  arch.validate();
  ModelParams<T> p;
  p.arch = arch;
  if (arch.kind == Kind::contextual) {
    p.null_ctx = Vec<T>::Zero(arch.d_ctx);
    alloc_linear(p.ctx_in, arch.d_ctx, arch.d_model_enc);
    p.enc.resize(arch.n_layers_enc);
    for (auto& b : p.enc) alloc_block(b, arch.d_model_enc, arch.ffn_enc, false);
    alloc_norm(p.enc_ln, arch.d_model_enc);
    alloc_linear(p.mem, arch.d_model_enc, arch.d_model_dec);
  }
  p.tok_emb = Mat<T>::Zero(arch.vocab_size, arch.d_model_dec);
  p.pos_emb = Mat<T>::Zero(arch.max_seq_len, arch.d_model_dec);
  p.dec.resize(arch.n_layers_dec);
  for (auto& b : p.dec) {
    alloc_block(b, arch.d_model_dec, arch.ffn_dec, arch.kind == Kind::contextual);
  }
  alloc_norm(p.dec_ln, arch.d_model_dec);
  if (!arch.tie_embeddings) {
    p.out_proj = Mat<T>::Zero(arch.d_model_dec, arch.vocab_size);
  }
  return p;
}

namespace {

template <typename T>
void push_linear(std::vector<TensorRef<T>>& refs, const std::string& prefix,
                 LinearP<T>& p) {
  refs.push_back({prefix + ".w", p.w.data(), p.w.rows(), p.w.cols(), true});
  refs.push_back({prefix + ".b", p.b.data(), p.b.rows(), 1, false});
}

template <typename T>
void push_norm(std::vector<TensorRef<T>>& refs, const std::string& prefix,
               NormP<T>& p) {
  refs.push_back({prefix + ".gain", p.gain.data(), p.gain.rows(), 1, false});
  refs.push_back({prefix + ".bias", p.bias.data(), p.bias.rows(), 1, false});
}

template <typename T>
void push_block(std::vector<TensorRef<T>>& refs, const std::string& prefix,
                BlockP<T>& b) {
  push_norm(refs, prefix + ".ln_attn", b.ln_attn);
  push_linear(refs, prefix + ".self.q", b.self.q);
  push_linear(refs, prefix + ".self.k", b.self.k);
  push_linear(refs, prefix + ".self.v", b.self.v);
  push_linear(refs, prefix + ".self.o", b.self.o);
  if (b.has_cross) {
    push_norm(refs, prefix + ".ln_cross", b.ln_cross);
    push_linear(refs, prefix + ".cross.q", b.cross.q);
    push_linear(refs, prefix + ".cross.k", b.cross.k);
    push_linear(refs, prefix + ".cross.v", b.cross.v);
    push_linear(refs, prefix + ".cross.o", b.cross.o);
  }
  push_norm(refs, prefix + ".ln_ffn", b.ln_ffn);
  push_linear(refs, prefix + ".fc_in", b.fc_in);
  push_linear(refs, prefix + ".fc_out", b.fc_out);
}

}  // namespace

template <typename T>
std::vector<TensorRef<T>> tensor_refs(ModelParams<T>& p) {
  std::vector<TensorRef<T>> refs;
  if (p.arch.kind == Kind::contextual) {
    refs.push_back({"null_ctx", p.null_ctx.data(), p.null_ctx.rows(), 1, false});
    push_linear(refs, "ctx_in", p.ctx_in);
    for (std::size_t i = 0; i < p.enc.size(); ++i) {
      push_block(refs, "enc.block" + std::to_string(i), p.enc[i]);
    }
    push_norm(refs, "enc_ln", p.enc_ln);
    push_linear(refs, "mem", p.mem);
  }
  refs.push_back({"tok_emb", p.tok_emb.data(), p.tok_emb.rows(), p.tok_emb.cols(), true});
  refs.push_back({"pos_emb", p.pos_emb.data(), p.pos_emb.rows(), p.pos_emb.cols(), true});
  for (std::size_t i = 0; i < p.dec.size(); ++i) {
    push_block(refs, "dec.block" + std::to_string(i), p.dec[i]);
  }
  push_norm(refs, "dec_ln", p.dec_ln);
  if (!p.arch.tie_embeddings) {
    refs.push_back({"out_proj", p.out_proj.data(), p.out_proj.rows(),
                    p.out_proj.cols(), true});
  }
  return refs;
}

namespace {

bool ends_with(const std::string& s, std::string_view suffix) {
  return s.size() >= suffix.size() &&
         s.compare(s.size() - suffix.size(), suffix.size(), suffix) == 0;
}

}  // namespace

template <typename T>
ModelParams<T> init_params(const ArchConfig& arch, std::uint64_t seed) {
  ModelParams<T> p = make_params<T>(arch);
  p.seed = seed;
  Rng rng(seed);
  const double enc_resid = arch.n_layers_enc > 0
                               ? 1.0 / std::sqrt(2.0 * arch.n_layers_enc)
                               : 1.0;
  const double dec_resid = 1.0 / std::sqrt(2.0 * arch.n_layers_dec);

  for (auto& ref : tensor_refs(p)) {
    if (ref.name == "null_ctx") continue;  // stays zero
    if (ends_with(ref.name, ".gain")) {
      std::fill(ref.data, ref.data + ref.size(), T(1));
      continue;
    }
    if (ends_with(ref.name, ".bias") || ends_with(ref.name, ".b")) {
      continue;  // zero
    }
    double scale = 0.02;
    if (ends_with(ref.name, ".o.w") || ends_with(ref.name, ".fc_out.w")) {
      scale *= ref.name.rfind("enc.", 0) == 0 ? enc_resid : dec_resid;
    }
    for (std::int64_t i = 0; i < ref.size(); ++i) {
      ref.data[i] = static_cast<T>(rng.next_gaussian() * scale);
    }
  }
  return p;
}

// ---------------------------------------------------------------------------
// Layers
// ---------------------------------------------------------------------------

namespace {

constexpr double kLnEps = 1e-5;

template <typename T>
struct NormCache {
  Mat<T> xhat;
  Vec<T> inv_std;
};

template <typename T>
Mat<T> layer_norm_fwd(const Mat<T>& x, const NormP<T>& p, NormCache<T>& cache) {
  const auto rows = x.rows();
  const auto cols = x.cols();
  cache.xhat.resize(rows, cols);
  cache.inv_std.resize(rows);
  Mat<T> y(rows, cols);
  for (Eigen::Index r = 0; r < rows; ++r) {
    const T mean = x.row(r).mean();
    const T var = (x.row(r).array() - mean).square().mean();
    const T inv = T(1) / std::sqrt(var + T(kLnEps));
    cache.inv_std[r] = inv;
    cache.xhat.row(r) = (x.row(r).array() - mean) * inv;
    y.row(r) = cache.xhat.row(r).cwiseProduct(p.gain.transpose()) +
               p.bias.transpose();
  }
  return y;
}

template <typename T>
Mat<T> layer_norm_bwd(const Mat<T>& dy, const NormP<T>& p,
                      const NormCache<T>& cache, NormP<T>& grad) {
  const auto rows = dy.rows();
  const auto cols = dy.cols();
  Mat<T> dx(rows, cols);
  for (Eigen::Index r = 0; r < rows; ++r) {
    const auto xhat = cache.xhat.row(r);
    Eigen::Matrix<T, 1, Eigen::Dynamic> dxhat =
        dy.row(r).cwiseProduct(p.gain.transpose());
    const T mean_dxhat = dxhat.mean();
    const T mean_dxhat_xhat = dxhat.cwiseProduct(xhat).mean();
    dx.row(r) = (dxhat.array() - mean_dxhat - xhat.array() * mean_dxhat_xhat) *
                cache.inv_std[r];
    grad.gain += dy.row(r).cwiseProduct(xhat).transpose();
    grad.bias += dy.row(r).transpose();
  }
  return dx;
}

template <typename T>
Mat<T> linear_fwd(const Mat<T>& x, const LinearP<T>& p) {
  Mat<T> y = x * p.w;
  y.rowwise() += p.b.transpose();
  return y;
}

template <typename T>
void linear_bwd(const Mat<T>& dy, const Mat<T>& x, const LinearP<T>& p,
                LinearP<T>& grad, Mat<T>& dx_accum) {
  dx_accum.noalias() += dy * p.w.transpose();
  grad.w.noalias() += x.transpose() * dy;
  grad.b += dy.colwise().sum().transpose();
}

template <typename T>
T gelu_value(T x) {
  return T(0.5) * x * (T(1) + std::erf(x * T(M_SQRT1_2)));
}

template <typename T>
T gelu_grad(T x) {
  constexpr double kInvSqrt2Pi = 0.3989422804014327;
  return T(0.5) * (T(1) + std::erf(x * T(M_SQRT1_2))) +
         x * T(kInvSqrt2Pi) * std::exp(T(-0.5) * x * x);
}

template <typename T>
void softmax_rows_inplace(Mat<T>& m) {
  for (Eigen::Index r = 0; r < m.rows(); ++r) {
    const T max = m.row(r).maxCoeff();
    m.row(r) = (m.row(r).array() - max).exp();
    m.row(r) /= m.row(r).sum();
  }
}

template <typename T>
struct AttnCache {
  Mat<T> q, k, v;          // (Tq x d), (Tk x d), (Tk x d)
  std::vector<Mat<T>> p;   // per head, (Tq x Tk)
  Mat<T> concat;           // head outputs before the o projection
};

template <typename T>
Mat<T> attention_fwd(const Mat<T>& xq, const Mat<T>& xkv, const AttnP<T>& p,
                     int heads, bool causal, AttnCache<T>& cache) {
  const int d = static_cast<int>(p.q.w.cols());
  const int hd = d / heads;
  const T scale = T(1) / std::sqrt(static_cast<T>(hd));
  cache.q = linear_fwd(xq, p.q);
  cache.k = linear_fwd(xkv, p.k);
  cache.v = linear_fwd(xkv, p.v);
  cache.p.assign(heads, Mat<T>());
  cache.concat.resize(xq.rows(), d);

  for (int h = 0; h < heads; ++h) {
    const auto qh = cache.q.middleCols(h * hd, hd);
    const auto kh = cache.k.middleCols(h * hd, hd);
    const auto vh = cache.v.middleCols(h * hd, hd);
    Mat<T> scores = qh * kh.transpose() * scale;
    if (causal) {
      for (Eigen::Index i = 0; i < scores.rows(); ++i) {
        for (Eigen::Index j = i + 1; j < scores.cols(); ++j) {
          scores(i, j) = -std::numeric_limits<T>::infinity();
        }
      }
    }
    softmax_rows_inplace(scores);
    cache.p[h] = std::move(scores);
    cache.concat.middleCols(h * hd, hd).noalias() = cache.p[h] * vh;
  }
  return linear_fwd(cache.concat, p.o);
}

template <typename T>
void attention_bwd(const Mat<T>& dy, const Mat<T>& xq, const Mat<T>& xkv,
                   const AttnP<T>& p, int heads, const AttnCache<T>& cache,
                   AttnP<T>& grad, Mat<T>& dxq, Mat<T>& dxkv) {
  const int d = static_cast<int>(p.q.w.cols());
  const int hd = d / heads;
  const T scale = T(1) / std::sqrt(static_cast<T>(hd));

  Mat<T> dconcat = Mat<T>::Zero(cache.concat.rows(), cache.concat.cols());
  linear_bwd(dy, cache.concat, p.o, grad.o, dconcat);

  Mat<T> dq = Mat<T>::Zero(cache.q.rows(), cache.q.cols());
  Mat<T> dk = Mat<T>::Zero(cache.k.rows(), cache.k.cols());
  Mat<T> dv = Mat<T>::Zero(cache.v.rows(), cache.v.cols());

  for (int h = 0; h < heads; ++h) {
    const auto qh = cache.q.middleCols(h * hd, hd);
    const auto kh = cache.k.middleCols(h * hd, hd);
    const auto vh = cache.v.middleCols(h * hd, hd);
    const Mat<T>& probs = cache.p[h];
    const auto doh = dconcat.middleCols(h * hd, hd);

    Mat<T> dprobs = doh * vh.transpose();
    dv.middleCols(h * hd, hd).noalias() = probs.transpose() * doh;

    // softmax backward: ds = p .* (dp - rowdot(dp, p))
    Mat<T> dscores(probs.rows(), probs.cols());
    for (Eigen::Index r = 0; r < probs.rows(); ++r) {
      const T dot = dprobs.row(r).cwiseProduct(probs.row(r)).sum();
      dscores.row(r) =
          probs.row(r).cwiseProduct((dprobs.row(r).array() - dot).matrix());
    }
    dq.middleCols(h * hd, hd).noalias() = dscores * kh * scale;
    dk.middleCols(h * hd, hd).noalias() = dscores.transpose() * qh * scale;
  }

  linear_bwd(dq, xq, p.q, grad.q, dxq);
  linear_bwd(dk, xkv, p.k, grad.k, dxkv);
  linear_bwd(dv, xkv, p.v, grad.v, dxkv);
}

// Inverted dropout; an empty mask means "off".
template <typename T>
Mat<T> make_dropout_mask(Eigen::Index rows, Eigen::Index cols, T rate,
                         Rng* rng) {
  if (rng == nullptr || rate <= T(0)) return Mat<T>();
  Mat<T> mask(rows, cols);
  const T keep_scale = T(1) / (T(1) - rate);
  for (Eigen::Index r = 0; r < rows; ++r) {
    for (Eigen::Index c = 0; c < cols; ++c) {
      mask(r, c) = rng->next_unit() >= rate ? keep_scale : T(0);
    }
  }
  return mask;
}

template <typename T>
void apply_mask(Mat<T>& x, const Mat<T>& mask) {
  if (mask.size() != 0) x = x.cwiseProduct(mask);
}

template <typename T>
struct BlockCache {
  Mat<T> x_in;
  NormCache<T> ln_attn;
  Mat<T> attn_in;
  AttnCache<T> self;
  Mat<T> drop_self;
  Mat<T> x_after_self;
  NormCache<T> ln_cross;
  Mat<T> cross_in;
  AttnCache<T> cross;
  Mat<T> drop_cross;
  Mat<T> x_after_cross;
  NormCache<T> ln_ffn;
  Mat<T> ffn_in;
  Mat<T> h_pre;   // fc_in output, pre-activation
  Mat<T> h_act;   // gelu(h_pre)
  Mat<T> drop_ffn;
};

// Pre-norm residual block. `memory` is null for encoder blocks and the base
// kind.
template <typename T>
Mat<T> block_fwd(const Mat<T>& x, const BlockP<T>& p, int heads, bool causal,
                 const Mat<T>* memory, T rate, Rng* rng, BlockCache<T>& cache) {
  cache.x_in = x;
  cache.attn_in = layer_norm_fwd(x, p.ln_attn, cache.ln_attn);
  Mat<T> attn = attention_fwd(cache.attn_in, cache.attn_in, p.self, heads,
                              causal, cache.self);
  cache.drop_self = make_dropout_mask<T>(attn.rows(), attn.cols(), rate, rng);
  apply_mask(attn, cache.drop_self);
  cache.x_after_self = x + attn;

  Mat<T> cur = cache.x_after_self;
  if (p.has_cross) {
    cache.cross_in = layer_norm_fwd(cur, p.ln_cross, cache.ln_cross);
    Mat<T> cross = attention_fwd(cache.cross_in, *memory, p.cross, heads,
                                 false, cache.cross);
    cache.drop_cross =
        make_dropout_mask<T>(cross.rows(), cross.cols(), rate, rng);
    apply_mask(cross, cache.drop_cross);
    cache.x_after_cross = cur + cross;
    cur = cache.x_after_cross;
  }

  cache.ffn_in = layer_norm_fwd(cur, p.ln_ffn, cache.ln_ffn);
  cache.h_pre = linear_fwd(cache.ffn_in, p.fc_in);
  cache.h_act = cache.h_pre.unaryExpr([](T v) { return gelu_value(v); });
  Mat<T> ffn = linear_fwd(cache.h_act, p.fc_out);
  cache.drop_ffn = make_dropout_mask<T>(ffn.rows(), ffn.cols(), rate, rng);
  apply_mask(ffn, cache.drop_ffn);
  return cur + ffn;
}

// Returns dx; accumulates parameter grads and (for cross blocks) dmemory.
template <typename T>
Mat<T> block_bwd(const Mat<T>& dy, const BlockP<T>& p, int heads,
                 const BlockCache<T>& cache, BlockP<T>& grad, Mat<T>* dmemory,
                 const Mat<T>* memory) {
  // FFN sublayer
  Mat<T> dffn = dy;
  apply_mask(dffn, cache.drop_ffn);
  Mat<T> dh_act = Mat<T>::Zero(cache.h_act.rows(), cache.h_act.cols());
  linear_bwd(dffn, cache.h_act, p.fc_out, grad.fc_out, dh_act);
  Mat<T> dh_pre =
      dh_act.binaryExpr(cache.h_pre, [](T g, T x) { return g * gelu_grad(x); });
  Mat<T> dffn_in = Mat<T>::Zero(cache.ffn_in.rows(), cache.ffn_in.cols());
  linear_bwd(dh_pre, cache.ffn_in, p.fc_in, grad.fc_in, dffn_in);
  Mat<T> dcur = dy + layer_norm_bwd(dffn_in, p.ln_ffn, cache.ln_ffn, grad.ln_ffn);

  // Cross-attention sublayer
  if (p.has_cross) {
    Mat<T> dcross = dcur;
    apply_mask(dcross, cache.drop_cross);
    Mat<T> dcross_in = Mat<T>::Zero(cache.cross_in.rows(), cache.cross_in.cols());
    attention_bwd(dcross, cache.cross_in, *memory, p.cross, heads, cache.cross,
                  grad.cross, dcross_in, *dmemory);
    dcur += layer_norm_bwd(dcross_in, p.ln_cross, cache.ln_cross, grad.ln_cross);
  }

  // Self-attention sublayer
  Mat<T> dself = dcur;
  apply_mask(dself, cache.drop_self);
  Mat<T> dattn_in = Mat<T>::Zero(cache.attn_in.rows(), cache.attn_in.cols());
  attention_bwd(dself, cache.attn_in, cache.attn_in, p.self, heads, cache.self,
                grad.self, dattn_in, dattn_in);
  return dcur + layer_norm_bwd(dattn_in, p.ln_attn, cache.ln_attn, grad.ln_attn);
}

// ---------------------------------------------------------------------------
// Whole-sequence forward / backward
// ---------------------------------------------------------------------------

template <typename T>
struct SeqCache {
  // context pathway
  Mat<T> ctx_raw;     // rows: null slot + non-empty variables
  Mat<T> enc_x0;
  std::vector<BlockCache<T>> enc_blocks;
  std::vector<Mat<T>> enc_xs;  // input to each encoder block
  NormCache<T> enc_ln;
  Mat<T> enc_normed;
  Mat<T> memory;
  // decoder
  Mat<T> emb_drop;
  Mat<T> dec_x0;
  std::vector<BlockCache<T>> dec_blocks;
  std::vector<Mat<T>> dec_xs;
  NormCache<T> dec_ln;
  Mat<T> dec_normed;
};

template <typename T>
Mat<T> forward_seq(const ModelParams<T>& params,
                   const std::vector<embed::ContextVector>& ctx,
                   std::span<const int> tokens, Rng* rng, SeqCache<T>& cache) {
  const ArchConfig& arch = params.arch;
  const auto T_len = static_cast<Eigen::Index>(tokens.size());
  if (T_len > arch.max_seq_len) {
    throw SequenceTooLong(std::to_string(tokens.size()) + " > max_seq_len " +
                          std::to_string(arch.max_seq_len));
  }
  for (const int id : tokens) {
    if (id < 0 || id >= arch.vocab_size) throw InvalidTokenId(std::to_string(id));
  }
  const T rate = static_cast<T>(arch.dropout);
  const bool contextual = arch.kind == Kind::contextual;

  if (contextual) {
    if (ctx.empty()) {
      throw MissingContext("contextual model requires at least the sentinel");
    }
    // Compact the context: the sentinel slot becomes the learned-null row
    // and empty-flagged variables are dropped (equivalent to masking).
    std::vector<const embed::ContextVector*> active;
    for (std::size_t i = 1; i < ctx.size(); ++i) {
      if (!ctx[i].is_empty) active.push_back(&ctx[i]);
    }
    cache.ctx_raw.resize(1 + static_cast<Eigen::Index>(active.size()), arch.d_ctx);
    cache.ctx_raw.row(0) = params.null_ctx.transpose();
    for (std::size_t i = 0; i < active.size(); ++i) {
      if (active[i]->values.size() != arch.d_ctx) {
        throw MissingContext("context vector dimension mismatch");
      }
      cache.ctx_raw.row(static_cast<Eigen::Index>(i + 1)) =
          active[i]->values.template cast<T>().transpose();
    }

    cache.enc_x0 = linear_fwd(cache.ctx_raw, params.ctx_in);
    cache.enc_blocks.resize(params.enc.size());
    cache.enc_xs.clear();
    Mat<T> x = cache.enc_x0;
    const Mat<T>* no_memory = nullptr;
    for (std::size_t i = 0; i < params.enc.size(); ++i) {
      cache.enc_xs.push_back(x);
      x = block_fwd(x, params.enc[i], arch.heads_enc, false, no_memory, rate,
                    rng, cache.enc_blocks[i]);
    }
    cache.enc_normed = layer_norm_fwd(x, params.enc_ln, cache.enc_ln);
    cache.memory = linear_fwd(cache.enc_normed, params.mem);
  }

  // Decoder
  Mat<T> x(T_len, arch.d_model_dec);
  for (Eigen::Index t = 0; t < T_len; ++t) {
    x.row(t) = params.tok_emb.row(tokens[t]).template cast<T>() +
               params.pos_emb.row(t).template cast<T>();
  }
  cache.emb_drop = make_dropout_mask<T>(x.rows(), x.cols(), rate, rng);
  apply_mask(x, cache.emb_drop);
  cache.dec_x0 = x;

  cache.dec_blocks.resize(params.dec.size());
  cache.dec_xs.clear();
  for (std::size_t i = 0; i < params.dec.size(); ++i) {
    cache.dec_xs.push_back(x);
    x = block_fwd(x, params.dec[i], arch.heads_dec, true,
                  contextual ? &cache.memory : nullptr, rate, rng,
                  cache.dec_blocks[i]);
  }
  cache.dec_normed = layer_norm_fwd(x, params.dec_ln, cache.dec_ln);

  if (arch.tie_embeddings) {
    return cache.dec_normed * params.tok_emb.transpose();
  }
  return cache.dec_normed * params.out_proj;
}

template <typename T>
void backward_seq(const ModelParams<T>& params, std::span<const int> tokens,
                  const SeqCache<T>& cache, const Mat<T>& dlogits,
                  ModelParams<T>& grads) {
  const ArchConfig& arch = params.arch;
  const bool contextual = arch.kind == Kind::contextual;

  // Output projection
  Mat<T> ddec_normed;
  if (arch.tie_embeddings) {
    ddec_normed = dlogits * params.tok_emb;
    grads.tok_emb.noalias() += dlogits.transpose() * cache.dec_normed;
  } else {
    ddec_normed = dlogits * params.out_proj.transpose();
    grads.out_proj.noalias() += cache.dec_normed.transpose() * dlogits;
  }

  Mat<T> dx = layer_norm_bwd(ddec_normed, params.dec_ln, cache.dec_ln, grads.dec_ln);

  Mat<T> dmemory;
  if (contextual) {
    dmemory = Mat<T>::Zero(cache.memory.rows(), cache.memory.cols());
  }
  for (std::size_t i = params.dec.size(); i-- > 0;) {
    dx = block_bwd(dx, params.dec[i], arch.heads_dec, cache.dec_blocks[i],
                   grads.dec[i], contextual ? &dmemory : nullptr,
                   contextual ? &cache.memory : nullptr);
  }

  apply_mask(dx, cache.emb_drop);
  for (Eigen::Index t = 0; t < dx.rows(); ++t) {
    grads.tok_emb.row(tokens[t]) += dx.row(t);
    grads.pos_emb.row(t) += dx.row(t);
  }

  if (contextual) {
    Mat<T> denc_normed = Mat<T>::Zero(cache.enc_normed.rows(), cache.enc_normed.cols());
    linear_bwd(dmemory, cache.enc_normed, params.mem, grads.mem, denc_normed);
    Mat<T> de = layer_norm_bwd(denc_normed, params.enc_ln, cache.enc_ln, grads.enc_ln);
    Mat<T>* no_dmemory = nullptr;
    const Mat<T>* no_memory = nullptr;
    for (std::size_t i = params.enc.size(); i-- > 0;) {
      de = block_bwd(de, params.enc[i], arch.heads_enc, cache.enc_blocks[i],
                     grads.enc[i], no_dmemory, no_memory);
    }
    Mat<T> dctx_raw = Mat<T>::Zero(cache.ctx_raw.rows(), cache.ctx_raw.cols());
    linear_bwd(de, cache.ctx_raw, params.ctx_in, grads.ctx_in, dctx_raw);
    grads.null_ctx += dctx_raw.row(0).transpose();
    // Gradients for rows > 0 fall on the fixed input embeddings and are
    // discarded.
  }
}

template <typename T>
Mat<T> log_softmax_rows(const Mat<T>& logits) {
  Mat<T> out(logits.rows(), logits.cols());
  for (Eigen::Index r = 0; r < logits.rows(); ++r) {
    const T max = logits.row(r).maxCoeff();
    const T lse = max + std::log((logits.row(r).array() - max).exp().sum());
    out.row(r) = logits.row(r).array() - lse;
  }
  return out;
}

}  // namespace

// ---------------------------------------------------------------------------
// Public entry points
// ---------------------------------------------------------------------------

template <typename T>
Mat<T> forward(const ModelParams<T>& params,
               const std::vector<embed::ContextVector>& ctx,
               std::span<const int> tokens) {
  SeqCache<T> cache;
  return forward_seq(params, ctx, tokens, nullptr, cache);
}

template <typename T>
LogLikelihood<T> log_likelihood(const ModelParams<T>& params,
                                const std::vector<embed::ContextVector>& ctx,
                                std::span<const int> tokens) {
  LogLikelihood<T> out;
  if (tokens.size() < 2) return out;
  const Mat<T> logits = forward(params, ctx, tokens);
  const Mat<T> logp = log_softmax_rows(logits);
  out.per_token.reserve(tokens.size() - 1);
  for (std::size_t t = 1; t < tokens.size(); ++t) {
    const T lp = logp(static_cast<Eigen::Index>(t - 1), tokens[t]);
    out.per_token.push_back(lp);
    out.total += lp;
  }
  return out;
}

template <typename T>
Mat<T> log_prob_rows(const ModelParams<T>& params,
                     const std::vector<embed::ContextVector>& ctx,
                     std::span<const int> tokens) {
  return log_softmax_rows(forward(params, ctx, tokens));
}

template <typename T>
GradientResult<T> gradients(const ModelParams<T>& params,
                            const std::vector<BatchItem>& batch,
                            Rng* dropout_rng) {
  if (batch.empty()) throw EmptyInput("gradient batch is empty");
  GradientResult<T> result;
  result.grads = make_params<T>(params.arch);
  result.grads.seed = params.seed;

  std::int64_t total_targets = 0;
  for (const auto& item : batch) {
    if (item.tokens.size() >= 2) {
      total_targets += static_cast<std::int64_t>(item.tokens.size()) - 1;
    }
  }
  if (total_targets == 0) {
    throw EmptyInput("batch contains no target tokens");
  }
  result.target_tokens = total_targets;
  const T inv_total = T(1) / static_cast<T>(total_targets);

  T loss_sum = 0;
  for (const auto& item : batch) {
    if (item.tokens.size() < 2) continue;
    SeqCache<T> cache;
    const Mat<T> logits =
        forward_seq(params, item.ctx, std::span<const int>(item.tokens),
                    dropout_rng, cache);
    const auto T_len = logits.rows();

    Mat<T> dlogits = Mat<T>::Zero(T_len, logits.cols());
    for (Eigen::Index t = 0; t + 1 < T_len; ++t) {
      const int target = item.tokens[static_cast<std::size_t>(t) + 1];
      const T max = logits.row(t).maxCoeff();
      Eigen::Matrix<T, 1, Eigen::Dynamic> probs =
          (logits.row(t).array() - max).exp();
      const T sum = probs.sum();
      probs /= sum;
      loss_sum -= std::log(probs[target]);
      dlogits.row(t) = probs * inv_total;
      dlogits(t, target) -= inv_total;
    }
    backward_seq(params, std::span<const int>(item.tokens), cache, dlogits,
                 result.grads);
  }

  result.loss = loss_sum * inv_total;
  if (!std::isfinite(static_cast<double>(result.loss))) {
    throw NonFiniteLoss("batch loss is not finite");
  }
  return result;
}

// ---------------------------------------------------------------------------
// Checkpoints
// ---------------------------------------------------------------------------

namespace {

constexpr char kMagic[8] = {'c', 't', 'x', 'l', 'm', 'c', 'k', '1'};

void write_u32(std::ostream& out, std::uint32_t v) {
  out.write(reinterpret_cast<const char*>(&v), sizeof(v));
}

void write_u64(std::ostream& out, std::uint64_t v) {
  out.write(reinterpret_cast<const char*>(&v), sizeof(v));
}

std::uint32_t read_u32(std::istream& in) {
  std::uint32_t v = 0;
  in.read(reinterpret_cast<char*>(&v), sizeof(v));
  return v;
}

std::uint64_t read_u64(std::istream& in) {
  std::uint64_t v = 0;
  in.read(reinterpret_cast<char*>(&v), sizeof(v));
  return v;
}

}  // namespace

void save_checkpoint(const ModelParameters& params,
                     const std::filesystem::path& path) {
  static_assert(std::endian::native == std::endian::little,
                "checkpoint format assumes a little-endian host");
  std::ofstream out(path, std::ios::binary);
  if (!out) throw CheckpointError("cannot write " + path.string());
  out.write(kMagic, sizeof(kMagic));
  json header;
  header["format_version"] = 1;
  header["arch"] = params.arch.to_json();
  header["seed"] = params.seed;
  const std::string header_str = header.dump();
  write_u32(out, static_cast<std::uint32_t>(header_str.size()));
  out.write(header_str.data(), static_cast<std::streamsize>(header_str.size()));

  auto& mutable_params = const_cast<ModelParameters&>(params);
  for (const auto& ref : tensor_refs(mutable_params)) {
    write_u32(out, static_cast<std::uint32_t>(ref.name.size()));
    out.write(ref.name.data(), static_cast<std::streamsize>(ref.name.size()));
    write_u64(out, static_cast<std::uint64_t>(ref.rows));
    write_u64(out, static_cast<std::uint64_t>(ref.cols));
    out.write(reinterpret_cast<const char*>(ref.data),
              static_cast<std::streamsize>(ref.size() * sizeof(float)));
  }
  if (!out) throw CheckpointError("write failed: " + path.string());
}

ModelParameters load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw CheckpointError("cannot open " + path.string());
  char magic[8];
  in.read(magic, sizeof(magic));
  if (!in || std::memcmp(magic, kMagic, sizeof(kMagic)) != 0) {
    throw CheckpointError("bad magic in " + path.string());
  }
  const std::uint32_t header_len = read_u32(in);
  std::string header_str(header_len, '\0');
  in.read(header_str.data(), header_len);
  json header;
  try {
    header = json::parse(header_str);
  } catch (const json::exception& e) {
    throw CheckpointError(std::string("bad header json: ") + e.what());
  }
  if (header.value("format_version", 0) != 1) {
    throw CheckpointError("unsupported checkpoint format version");
  }
  ModelParameters params = make_params<float>(ArchConfig::from_json(header["arch"]));
  params.seed = header.value("seed", std::uint64_t{0});

  for (const auto& ref : tensor_refs(params)) {
    const std::uint32_t name_len = read_u32(in);
    std::string name(name_len, '\0');
    in.read(name.data(), name_len);
    const auto rows = static_cast<std::int64_t>(read_u64(in));
    const auto cols = static_cast<std::int64_t>(read_u64(in));
    if (!in || name != ref.name || rows != ref.rows || cols != ref.cols) {
      throw CheckpointError("tensor mismatch at '" + ref.name + "' in " +
                            path.string());
    }
    in.read(reinterpret_cast<char*>(ref.data),
            static_cast<std::streamsize>(ref.size() * sizeof(float)));
  }
  if (!in) throw CheckpointError("truncated checkpoint: " + path.string());
  return params;
}

// ---------------------------------------------------------------------------
// Explicit instantiations
// ---------------------------------------------------------------------------

template struct ModelParams<float>;
template struct ModelParams<double>;

template ModelParams<float> make_params<float>(const ArchConfig&);
template ModelParams<double> make_params<double>(const ArchConfig&);
template ModelParams<float> init_params<float>(const ArchConfig&, std::uint64_t);
template ModelParams<double> init_params<double>(const ArchConfig&, std::uint64_t);
template std::vector<TensorRef<float>> tensor_refs<float>(ModelParams<float>&);
template std::vector<TensorRef<double>> tensor_refs<double>(ModelParams<double>&);
template Mat<float> forward<float>(const ModelParams<float>&,
                                   const std::vector<embed::ContextVector>&,
                                   std::span<const int>);
template Mat<double> forward<double>(const ModelParams<double>&,
                                     const std::vector<embed::ContextVector>&,
                                     std::span<const int>);
template LogLikelihood<float> log_likelihood<float>(
    const ModelParams<float>&, const std::vector<embed::ContextVector>&,
    std::span<const int>);
template LogLikelihood<double> log_likelihood<double>(
    const ModelParams<double>&, const std::vector<embed::ContextVector>&,
    std::span<const int>);
template Mat<float> log_prob_rows<float>(const ModelParams<float>&,
                                         const std::vector<embed::ContextVector>&,
                                         std::span<const int>);
template Mat<double> log_prob_rows<double>(
    const ModelParams<double>&, const std::vector<embed::ContextVector>&,
    std::span<const int>);
template GradientResult<float> gradients<float>(const ModelParams<float>&,
                                                const std::vector<BatchItem>&,
                                                Rng*);
template GradientResult<double> gradients<double>(const ModelParams<double>&,
                                                  const std::vector<BatchItem>&,
                                                  Rng*);

}  // namespace ctxlm::model
