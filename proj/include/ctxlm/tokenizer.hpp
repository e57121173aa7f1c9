#pragma once

#include "ctxlm/common.hpp"

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <utility>
#include <vector>

namespace ctxlm::bpe {

/// Reserved token ids.
struct Specials {
  static constexpr int pad = 0;
  static constexpr int bos = 1;
  static constexpr int eos = 2;
  static constexpr int unk = 3;
  static constexpr int count = 4;
};

struct TrainOptions {
  int vocab_cap = 8000;
  /// When enabled, 256 byte units sit right after the specials and encode
  /// never produces UNK. Disable for tiny-cap experiments.
  bool byte_fallback = true;
};

struct EncodeOptions {
  bool add_bos = false;
  bool add_eos = false;
};

using TokenSequence = std::vector<int>;

/// Byte-pair-encoding subword model. Words are split on whitespace, each one
/// gets a leading word-boundary marker unit, and merges are learned greedily
/// on most-frequent adjacent pairs (ties broken by lexicographically smallest
/// pair). Immutable after training; encode/decode are pure.
class BpeModel {
 public:
  BpeModel() = default;  // empty model; train() or load() produce usable ones

  /// The word-boundary marker (U+2581), its own base unit.
  static const std::string& boundary();

  static BpeModel train(const std::vector<std::string>& texts,
                        const TrainOptions& options = {});

  TokenSequence encode(std::string_view text, const EncodeOptions& = {}) const;
  std::string decode(std::span<const int> tokens) const;

  int vocab_size() const { return static_cast<int>(id_to_unit_.size()); }
  bool byte_fallback() const { return byte_fallback_; }
  const std::vector<std::pair<std::string, std::string>>& merges() const {
    return merges_;
  }
  int base_vocab_size() const { return n_base_; }

  /// Token id for a unit string, or -1.
  int unit_id(std::string_view unit) const;
  const std::string& unit_string(int id) const;

  /// A copy of this model keeping only the first `n` merges. Used to check
  /// that adding merges never increases the token count of a text.
  BpeModel with_merge_prefix(std::size_t n) const;

  // Versioned text serialization (header, base vocab block, merges block).
  std::string to_text() const;
  static BpeModel from_text(const std::string& text);
  void save(const std::filesystem::path& path) const;
  static BpeModel load(const std::filesystem::path& path);

 private:
  void rebuild_index();
  std::vector<std::string> word_units(std::string_view word) const;
  void apply_merges(std::vector<std::string>& units, std::size_t merge_limit) const;

  bool byte_fallback_ = true;
  int n_base_ = 0;  // byte units (if any) + character units, excludes specials
  std::vector<std::string> id_to_unit_;
  std::unordered_map<std::string, int> unit_to_id_;
  std::vector<std::pair<std::string, std::string>> merges_;
  std::unordered_map<std::string, std::size_t> merge_rank_;  // "l\x1fr" -> rank
};

}  // namespace ctxlm::bpe
