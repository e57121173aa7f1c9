#pragma once

#include "ctxlm/common.hpp"

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <string_view>
#include <vector>

namespace ctxlm::corpus {

// ---------------------------------------------------------------------------
// Canonical key registry
//
// Fixed order: speaker keys alphabetical, production keys alphabetical,
// then the past-dialogue slots. Everything downstream (context sets,
// embeddings, serialized files) relies on this order being stable.
// ---------------------------------------------------------------------------

inline constexpr int kPastSlots = 3;

/// All 17 canonical keys (14 metadata + 3 past-dialogue slots), in order.
const std::vector<std::string>& canonical_keys();
/// The 8 speaker keys.
const std::vector<std::string>& speaker_keys();
/// The 7 primary speaker profile keys (speaker_keys minus additional_info).
const std::vector<std::string>& speaker_profile_keys();
/// The 6 production keys.
const std::vector<std::string>& production_keys();
/// The 14 metadata keys (speaker + production, no past slots).
const std::vector<std::string>& metadata_keys();

/// Index of `key` in canonical order, or -1 if the key is not registered.
int key_index(std::string_view key);
bool is_registered_key(std::string_view key);
bool is_speaker_key(std::string_view key);
bool is_production_key(std::string_view key);
bool is_past_key(std::string_view key);

/// Expands mask patterns ("speaker.*", "production.*", "doc.*", exact keys,
/// or "*" for all metadata keys) into a concrete key set.
std::set<std::string> expand_mask(const std::vector<std::string>& patterns);

// ---------------------------------------------------------------------------
// Domain types
// ---------------------------------------------------------------------------

struct ContextVariable {
  std::string key;
  std::string value;  // empty string means absent

  bool operator==(const ContextVariable&) const = default;
};

/// An ordered set of context variables. Variables are kept in canonical key
/// order and keys are unique; insertion order does not matter.
class ContextSet {
 public:
  ContextSet() = default;

  /// Inserts or overwrites a variable. Throws UnknownKey for keys outside
  /// the registry.
  void set(std::string_view key, std::string value);

  const std::string* find(std::string_view key) const;
  bool has(std::string_view key) const;
  std::string value_or_empty(std::string_view key) const;

  const std::vector<ContextVariable>& variables() const { return vars_; }
  bool empty() const { return vars_.empty(); }
  std::size_t size() const { return vars_.size(); }

  /// Keeps only the variables whose key is in `mask` (order preserved).
  ContextSet select(const std::set<std::string>& mask) const;

  /// Union with `other`; values in `other` win on key conflicts.
  ContextSet merged_with(const ContextSet& other) const;

  bool operator==(const ContextSet&) const = default;

 private:
  std::vector<ContextVariable> vars_;  // sorted by canonical key index
};

enum class Split { train, valid, test, test_unseen };

const char* split_name(Split s);
std::optional<Split> split_from_name(std::string_view name);

struct Sample {
  std::string utterance;
  std::string speaker_id;
  std::string production_id;
  Split split = Split::train;
  ContextSet context;

  bool operator==(const Sample&) const = default;
};

struct CorpusSplits {
  std::vector<Sample> train;
  std::vector<Sample> valid;
  std::vector<Sample> test;
  std::vector<Sample> test_unseen;

  /// speaker_id -> speaker profile (all speaker keys, absent values "").
  std::map<std::string, ContextSet> speakers;
  /// production_id -> production profile.
  std::map<std::string, ContextSet> productions;

  const std::vector<Sample>& split(Split s) const;
  std::vector<Sample>& split(Split s);
  std::size_t total_samples() const;

  bool operator==(const CorpusSplits&) const = default;
};

// ---------------------------------------------------------------------------
// Normalization
// ---------------------------------------------------------------------------

/// Text cleanup applied to every utterance and metadata value: markup tags
/// removed, punctuation mapped to canonical ASCII forms, runs of 2+ periods
/// collapsed to exactly three, whitespace runs collapsed, ends trimmed.
/// Total and idempotent.
std::string normalize_text(const std::string& raw);

/// Exact-match surface -> canonical rewrites for discrete metadata values
/// (e.g. "m" and "M" both become "A man"). Unlisted values pass through.
class SynonymTable {
 public:
  /// The built-in table shipped with the library.
  static const SynonymTable& builtin();

  /// Loads a two-column TSV (surface <TAB> canonical). Validates that no
  /// canonical form is itself a surface mapping elsewhere, which keeps
  /// normalize_metadata idempotent.
  static SynonymTable load(const std::filesystem::path& path);
  static SynonymTable from_entries(
      std::vector<std::pair<std::string, std::string>> entries,
      std::string version);

  const std::string& version() const { return version_; }
  std::string apply(const std::string& value) const;

 private:
  std::map<std::string, std::string> entries_;
  std::string version_;
};

/// Metadata normalization: values are text-normalized, discrete synonyms are
/// canonicalized, bare categorical codes are rewritten as natural-language
/// statements, and absent keys of any group present in the set (speaker /
/// production / doc) are filled with "". Idempotent and key-preserving.
ContextSet normalize_metadata(const ContextSet& ctx,
                              const SynonymTable& synonyms = SynonymTable::builtin());

// ---------------------------------------------------------------------------
// Loading / saving
// ---------------------------------------------------------------------------

struct LoadOptions {
  /// Drop samples whose speaker profile is entirely empty.
  bool drop_unannotated = false;
  const SynonymTable* synonyms = nullptr;  // nullptr -> builtin
};

/// Reads the JSONL corpus layout, normalizing every record. One JSON object
/// per line: {"utterance", "speaker_id", "production_id", "split", "context"}.
CorpusSplits load_corpus(const std::filesystem::path& path,
                         const LoadOptions& options = {});
CorpusSplits parse_corpus(std::istream& in, const LoadOptions& options = {});

/// Writes the corpus in the same JSONL layout, one sample per line, splits in
/// fixed order. load_corpus(save_corpus(c)) round-trips exactly.
void save_corpus(const CorpusSplits& corpus, const std::filesystem::path& path);
void write_corpus(const CorpusSplits& corpus, std::ostream& out);

// ---------------------------------------------------------------------------
// Context construction
// ---------------------------------------------------------------------------

/// Turns one document's dialogue into samples whose context carries the k
/// most recent past lines in slots doc.past_1 (most recent) .. doc.past_k.
/// Slots with no history hold "".
std::vector<Sample> build_past_context(
    const std::vector<std::pair<std::int64_t, std::string>>& dialogue,
    int k = kPastSlots);

/// Returns a copy of `s` whose context keeps only keys in `mask`.
Sample select_metadata(const Sample& s, const std::set<std::string>& mask);

// ---------------------------------------------------------------------------
// Synthetic corpora
// ---------------------------------------------------------------------------

struct SyntheticSpec {
  int n_speakers = 20;
  int n_productions = 5;
  int lines_per_speaker = 100;
  double marker_strength = 0.5;  // in [0,1]
  int n_unseen_speakers = 10;
};

/// Deterministic synthetic corpus. Speaker and production profiles draw
/// attribute values from small pools; utterances mix a uniform background
/// word distribution with the profile's own attribute words at rate
/// marker_strength. Unseen speakers share the pools but have disjoint ids
/// and appear only in test_unseen.
CorpusSplits generate_synthetic(std::uint64_t seed, const SyntheticSpec& spec);

struct DialogueSpec {
  int n_docs = 200;
  int lines_per_doc = 12;
  double marker_strength = 0.5;
};

/// Synthetic document-level corpus for past-dialogue pre-training: each
/// document draws one hidden profile and every line mixes background words
/// with that profile's attribute words, so past lines predict future tokens.
/// Contexts carry doc.past_1..3; every 10th document goes to valid.
CorpusSplits generate_synthetic_dialogue(std::uint64_t seed,
                                         const DialogueSpec& spec);

/// Word pools used by the synthetic generators; exposed so tests can compute
/// expected token frequencies from the sampling scheme.
struct SyntheticPools {
  std::vector<std::string> professions;
  std::vector<std::string> ages;
  std::vector<std::string> countries;
  std::vector<std::string> genres;
  std::vector<std::string> production_countries;
  std::vector<std::string> background;

  /// background + all marker words, in sampling order.
  std::vector<std::string> word_pool() const;
  /// Number of marker attributes per sample (profession, age, country,
  /// genre, production country).
  static constexpr int kMarkerAttrs = 5;
};
const SyntheticPools& synthetic_pools();

}  // namespace ctxlm::corpus
