#pragma once

#include "ctxlm/common.hpp"
#include "ctxlm/corpus.hpp"

#include <filesystem>
#include <map>
#include <string>
#include <vector>

namespace ctxlm::embed {

/// One context variable as a fixed-dimension vector. Non-empty source text
/// yields a unit-norm vector; empty text yields an all-zero vector flagged
/// empty so the model can mask it.
struct ContextVector {
  VecF values;
  bool is_empty = false;
};

enum class Backend { builtin_hash, external };

struct EmbedderConfig {
  int d_ctx = 384;
  Backend backend = Backend::builtin_hash;
  /// Hash "key: value" (default) or just the value (`--values-only`).
  bool include_keys = true;
  /// TSV of precomputed vectors for the external backend.
  std::filesystem::path external_path;
};

/// Maps context variable text to vectors. The built-in backend hashes
/// lowercase character n-grams (n = 3..5) into d_ctx signed buckets and
/// L2-normalizes; it is deterministic and dependency-free. The external
/// backend serves vectors precomputed offline.
class Embedder {
 public:
  explicit Embedder(EmbedderConfig config);

  const EmbedderConfig& config() const { return config_; }

  ContextVector embed_text(const std::string& key, const std::string& value) const;

  /// One vector per variable in canonical order, with the sentinel slot
  /// prepended at position 0. The sentinel is a placeholder (all zeros,
  /// not empty-flagged); the model substitutes its learned-null parameter.
  std::vector<ContextVector> embed_context_set(const corpus::ContextSet& ctx) const;

  static ContextVector sentinel(int d_ctx);

 private:
  EmbedderConfig config_;
  std::map<std::pair<std::string, std::string>, VecF> external_;
};

/// Parses the precomputed-embedding TSV: key <TAB> value <TAB> comma-separated
/// floats. Vectors are L2-normalized on load.
std::map<std::pair<std::string, std::string>, VecF> load_external_table(
    const std::filesystem::path& path, int d_ctx);

}  // namespace ctxlm::embed
