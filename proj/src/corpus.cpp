#include "ctxlm/corpus.hpp"

#include "ctxlm/detail/utf8.hpp"

#include <nlohmann/json.hpp>

#include <algorithm>
#include <array>
#include <cctype>
#include <cstdio>
#include <fstream>
#include <sstream>

namespace ctxlm::corpus {

using json = nlohmann::json;
using ordered_json = nlohmann::ordered_json;

// ---------------------------------------------------------------------------
// Registry
// ---------------------------------------------------------------------------

namespace {

std::vector<std::string> make_speaker_keys() {
  return {"speaker.additional_info", "speaker.age",        "speaker.country",
          "speaker.description",     "speaker.gender",     "speaker.profession",
          "speaker.quote",           "speaker.religion"};
}

std::vector<std::string> make_production_keys() {
  return {"production.country", "production.genre", "production.pg_rating",
          "production.plot",    "production.writers", "production.year"};
}

std::vector<std::string> make_canonical_keys() {
  std::vector<std::string> keys = make_speaker_keys();
  for (auto& k : make_production_keys()) keys.push_back(k);
  for (int i = 1; i <= kPastSlots; ++i) {
    keys.push_back("doc.past_" + std::to_string(i));
  }
  return keys;
}

}  // namespace

const std::vector<std::string>& canonical_keys() {
  static const std::vector<std::string> keys = make_canonical_keys();
  return keys;
}

const std::vector<std::string>& speaker_keys() {
  static const std::vector<std::string> keys = make_speaker_keys();
  return keys;
}

const std::vector<std::string>& speaker_profile_keys() {
  static const std::vector<std::string> keys = [] {
    std::vector<std::string> out;
    for (const auto& k : make_speaker_keys()) {
      if (k != "speaker.additional_info") out.push_back(k);
    }
    return out;
  }();
  return keys;
}

const std::vector<std::string>& production_keys() {
  static const std::vector<std::string> keys = make_production_keys();
  return keys;
}

const std::vector<std::string>& metadata_keys() {
  static const std::vector<std::string> keys = [] {
    std::vector<std::string> out = make_speaker_keys();
    for (auto& k : make_production_keys()) out.push_back(k);
    return out;
  }();
  return keys;
}

int key_index(std::string_view key) {
  const auto& keys = canonical_keys();
  for (std::size_t i = 0; i < keys.size(); ++i) {
    if (keys[i] == key) return static_cast<int>(i);
  }
  return -1;
}

bool is_registered_key(std::string_view key) { return key_index(key) >= 0; }

bool is_speaker_key(std::string_view key) {
  return key.rfind("speaker.", 0) == 0 && is_registered_key(key);
}

bool is_production_key(std::string_view key) {
  return key.rfind("production.", 0) == 0 && is_registered_key(key);
}

bool is_past_key(std::string_view key) {
  return key.rfind("doc.past_", 0) == 0 && is_registered_key(key);
}

std::set<std::string> expand_mask(const std::vector<std::string>& patterns) {
  std::set<std::string> out;
  for (const auto& p : patterns) {
    if (p == "*") {
      out.insert(metadata_keys().begin(), metadata_keys().end());
    } else if (p == "speaker.*") {
      out.insert(speaker_keys().begin(), speaker_keys().end());
    } else if (p == "production.*") {
      out.insert(production_keys().begin(), production_keys().end());
    } else if (p == "doc.*") {
      for (int i = 1; i <= kPastSlots; ++i)
        out.insert("doc.past_" + std::to_string(i));
    } else if (is_registered_key(p)) {
      out.insert(p);
    } else {
      throw UnknownKey("mask pattern '" + p + "' matches no canonical key");
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// ContextSet
// ---------------------------------------------------------------------------

void ContextSet::set(std::string_view key, std::string value) {
  const int idx = key_index(key);
  if (idx < 0) throw UnknownKey("'" + std::string(key) + "'");
  auto it = std::find_if(vars_.begin(), vars_.end(),
                         [&](const ContextVariable& v) { return v.key == key; });
  if (it != vars_.end()) {
    it->value = std::move(value);
    return;
  }
  ContextVariable var{std::string(key), std::move(value)};
  auto pos = std::find_if(vars_.begin(), vars_.end(), [&](const ContextVariable& v) {
    return key_index(v.key) > idx;
  });
  vars_.insert(pos, std::move(var));
}

const std::string* ContextSet::find(std::string_view key) const {
  for (const auto& v : vars_) {
    if (v.key == key) return &v.value;
  }
  return nullptr;
}

bool ContextSet::has(std::string_view key) const { return find(key) != nullptr; }

std::string ContextSet::value_or_empty(std::string_view key) const {
  const std::string* v = find(key);
  return v ? *v : std::string();
}

ContextSet ContextSet::select(const std::set<std::string>& mask) const {
  for (const auto& key : mask) {
    if (!is_registered_key(key)) throw UnknownKey("'" + key + "'");
  }
  ContextSet out;
  for (const auto& v : vars_) {
    if (mask.count(v.key)) out.set(v.key, v.value);
  }
  return out;
}

ContextSet ContextSet::merged_with(const ContextSet& other) const {
  ContextSet out = *this;
  for (const auto& v : other.variables()) out.set(v.key, v.value);
  return out;
}

const std::vector<Sample>& CorpusSplits::split(Split s) const {
  switch (s) {
    case Split::train: return train;
    case Split::valid: return valid;
    case Split::test: return test;
    case Split::test_unseen: return test_unseen;
  }
  throw InvalidSpec("bad split");
}

std::vector<Sample>& CorpusSplits::split(Split s) {
  return const_cast<std::vector<Sample>&>(
      static_cast<const CorpusSplits*>(this)->split(s));
}

std::size_t CorpusSplits::total_samples() const {
  return train.size() + valid.size() + test.size() + test_unseen.size();
}

const char* split_name(Split s) {
  switch (s) {
    case Split::train: return "train";
    case Split::valid: return "valid";
    case Split::test: return "test";
    case Split::test_unseen: return "test_unseen";
  }
  return "?";
}

std::optional<Split> split_from_name(std::string_view name) {
  if (name == "train") return Split::train;
  if (name == "valid") return Split::valid;
  if (name == "test") return Split::test;
  if (name == "test_unseen") return Split::test_unseen;
  return std::nullopt;
}

// ---------------------------------------------------------------------------
// normalize_text
// ---------------------------------------------------------------------------

namespace {

// Removes <tag>-style markup. A tag starts with '<', an optional '/', then an
// ASCII letter, and runs to the next '>' with no '<' in between; anything
// else ('< 3', 'a < b') is left alone. Repeats until stable so nested
// fragments cannot reassemble into new tags.
std::string strip_tags_once(const std::string& s, bool* changed) {
  std::string out;
  out.reserve(s.size());
  std::size_t i = 0;
  while (i < s.size()) {
    if (s[i] == '<') {
      std::size_t j = i + 1;
      if (j < s.size() && s[j] == '/') ++j;
      if (j < s.size() && std::isalpha(static_cast<unsigned char>(s[j]))) {
        std::size_t end = j;
        while (end < s.size() && s[end] != '>' && s[end] != '<') ++end;
        if (end < s.size() && s[end] == '>') {
          *changed = true;
          i = end + 1;
          continue;
        }
      }
    }
    out.push_back(s[i]);
    ++i;
  }
  return out;
}

std::string strip_tags(std::string s) {
  bool changed = true;
  while (changed) {
    changed = false;
    s = strip_tags_once(s, &changed);
  }
  return s;
}

// Canonical ASCII forms for common typographic punctuation.
std::string map_punctuation(const std::string& s) {
  std::string out;
  out.reserve(s.size());
  std::size_t i = 0;
  while (i < s.size()) {
    const std::uint32_t cp = detail::next_codepoint(s, i);
    switch (cp) {
      case 0x201C: case 0x201D: case 0x201E: case 0x201F:
      case 0x00AB: case 0x00BB:
        out.push_back('"');
        break;
      case 0x2018: case 0x2019: case 0x201A: case 0x201B:
      case 0x2039: case 0x203A: case 0x00B4:
        out.push_back('\'');
        break;
      case 0x2013: case 0x2014: case 0x2015: case 0x2212:
        out.push_back('-');
        break;
      case 0x2026:
        out += "...";
        break;
      case 0x00A0: case 0x2009: case 0x200A: case 0x202F:
      case 0x205F: case 0x3000:
        out.push_back(' ');
        break;
      default:
        detail::append_codepoint(out, cp);
    }
  }
  return out;
}

std::string collapse_dots(const std::string& s) {
  std::string out;
  out.reserve(s.size());
  std::size_t i = 0;
  while (i < s.size()) {
    if (s[i] == '.') {
      std::size_t j = i;
      while (j < s.size() && s[j] == '.') ++j;
      out += (j - i >= 2) ? "..." : ".";
      i = j;
    } else {
      out.push_back(s[i]);
      ++i;
    }
  }
  return out;
}

std::string collapse_whitespace(const std::string& s) {
  std::string out;
  out.reserve(s.size());
  bool in_space = false;
  for (char c : s) {
    const bool ws = c == ' ' || c == '\t' || c == '\n' || c == '\r' ||
                    c == '\f' || c == '\v';
    if (ws) {
      in_space = true;
      continue;
    }
    if (in_space && !out.empty()) out.push_back(' ');
    in_space = false;
    out.push_back(c);
  }
  return out;
}

}  // namespace

std::string normalize_text(const std::string& raw) {
  return collapse_whitespace(collapse_dots(map_punctuation(strip_tags(raw))));
}

// ---------------------------------------------------------------------------
// SynonymTable / normalize_metadata
// ---------------------------------------------------------------------------

namespace {

std::vector<std::pair<std::string, std::string>> builtin_synonyms() {
  return {
      {"m", "A man"},        {"M", "A man"},
      {"male", "A man"},     {"Male", "A man"},
      {"man", "A man"},      {"A Man", "A man"},
      {"f", "A woman"},      {"F", "A woman"},
      {"female", "A woman"}, {"Female", "A woman"},
      {"woman", "A woman"},  {"A Woman", "A woman"},
      {"n/a", ""},           {"N/A", ""},
      {"unknown", "Unknown"},{"UNKNOWN", "Unknown"},
      {"?", "Unknown"},
  };
}

}  // namespace

SynonymTable SynonymTable::from_entries(
    std::vector<std::pair<std::string, std::string>> entries,
    std::string version) {
  SynonymTable table;
  table.version_ = std::move(version);
  for (auto& [surface, canonical] : entries) {
    table.entries_[surface] = canonical;
  }
  // A canonical form must not itself be a surface rewriting to something
  // else, otherwise repeated application would keep changing values.
  for (const auto& [surface, canonical] : table.entries_) {
    auto it = table.entries_.find(canonical);
    if (it != table.entries_.end() && it->second != canonical) {
      throw ParseError("synonym table is not idempotent: '" + surface +
                       "' -> '" + canonical + "' -> '" + it->second + "'");
    }
  }
  return table;
}

const SynonymTable& SynonymTable::builtin() {
  static const SynonymTable table =
      SynonymTable::from_entries(builtin_synonyms(), "builtin-1");
  return table;
}

SynonymTable SynonymTable::load(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ParseError("cannot open synonym table: " + path.string());
  std::vector<std::pair<std::string, std::string>> entries;
  std::string line;
  int line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty() || line[0] == '#') continue;
    const auto tab = line.find('\t');
    if (tab == std::string::npos) {
      throw ParseError("synonym table line " + std::to_string(line_no) +
                       ": expected two tab-separated columns");
    }
    entries.emplace_back(line.substr(0, tab), line.substr(tab + 1));
  }
  return from_entries(std::move(entries), path.filename().string());
}

std::string SynonymTable::apply(const std::string& value) const {
  auto it = entries_.find(value);
  return it == entries_.end() ? value : it->second;
}

namespace {

bool starts_with(const std::string& s, std::string_view prefix) {
  return s.rfind(prefix, 0) == 0;
}

bool all_digits(const std::string& s) {
  if (s.empty()) return false;
  return std::all_of(s.begin(), s.end(),
                     [](char c) { return std::isdigit(static_cast<unsigned char>(c)); });
}

// Bare categorical codes become natural-language statements; already
// rewritten values are left alone so the pass stays idempotent.
std::string rewrite_categorical(const std::string& key, std::string value) {
  if (value.empty()) return value;
  if (key == "production.pg_rating") {
    if (!starts_with(value, "PG Rating: ")) return "PG Rating: " + value;
  } else if (key == "production.year") {
    if (all_digits(value)) return "Released in " + value;
  } else if (key == "production.writers") {
    if (!starts_with(value, "Written by: ")) return "Written by: " + value;
  }
  return value;
}

}  // namespace

ContextSet normalize_metadata(const ContextSet& ctx, const SynonymTable& synonyms) {
  ContextSet out;
  bool saw_speaker = false, saw_production = false, saw_doc = false;
  for (const auto& var : ctx.variables()) {
    if (!is_registered_key(var.key)) throw UnknownKey("'" + var.key + "'");
    saw_speaker |= is_speaker_key(var.key);
    saw_production |= is_production_key(var.key);
    saw_doc |= is_past_key(var.key);
    std::string value = normalize_text(var.value);
    value = synonyms.apply(value);
    value = rewrite_categorical(var.key, std::move(value));
    out.set(var.key, std::move(value));
  }
  // Absent fields of any group present become explicit empty strings.
  auto complete = [&](const std::vector<std::string>& keys) {
    for (const auto& k : keys) {
      if (!out.has(k)) out.set(k, "");
    }
  };
  if (saw_speaker) complete(speaker_keys());
  if (saw_production) complete(production_keys());
  if (saw_doc) {
    for (int i = 1; i <= kPastSlots; ++i) {
      const std::string k = "doc.past_" + std::to_string(i);
      if (!out.has(k)) out.set(k, "");
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// load / save
// ---------------------------------------------------------------------------

namespace {

void register_profiles(CorpusSplits& corpus, const Sample& s) {
  auto fill = [](ContextSet& profile, const Sample& sample,
                 const std::vector<std::string>& keys) {
    for (const auto& k : keys) {
      const std::string* v = sample.context.find(k);
      if (v && !v->empty() && profile.value_or_empty(k).empty()) {
        profile.set(k, *v);
      } else if (!profile.has(k)) {
        profile.set(k, "");
      }
    }
  };
  fill(corpus.speakers[s.speaker_id], s, speaker_keys());
  fill(corpus.productions[s.production_id], s, production_keys());
}

bool profile_empty(const ContextSet& profile) {
  for (const auto& v : profile.variables()) {
    if (!v.value.empty()) return false;
  }
  return true;
}

}  // namespace

CorpusSplits parse_corpus(std::istream& in, const LoadOptions& options) {
  const SynonymTable& synonyms =
      options.synonyms ? *options.synonyms : SynonymTable::builtin();
  CorpusSplits corpus;
  std::set<std::string> train_valid_speakers;
  std::set<std::string> unseen_speakers;

  std::string line;
  int line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    json record;
    try {
      record = json::parse(line);
    } catch (const json::exception& e) {
      throw ParseError("line " + std::to_string(line_no) + ": " + e.what());
    }
    auto require_string = [&](const char* field) -> std::string {
      if (!record.contains(field) || !record[field].is_string()) {
        throw ParseError("line " + std::to_string(line_no) +
                         ": missing string field '" + field + "'");
      }
      return record[field].get<std::string>();
    };

    Sample s;
    s.utterance = normalize_text(require_string("utterance"));
    if (s.utterance.empty()) {
      throw ParseError("line " + std::to_string(line_no) +
                       ": utterance empty after normalization");
    }
    s.speaker_id = require_string("speaker_id");
    s.production_id = require_string("production_id");
    const std::string split_str = require_string("split");
    const auto split = split_from_name(split_str);
    if (!split) {
      throw ParseError("line " + std::to_string(line_no) + ": unknown split '" +
                       split_str + "'");
    }
    s.split = *split;

    if (record.contains("context")) {
      if (!record["context"].is_object()) {
        throw ParseError("line " + std::to_string(line_no) +
                         ": 'context' must be an object");
      }
      ContextSet ctx;
      for (const auto& [key, value] : record["context"].items()) {
        if (!value.is_string()) {
          throw ParseError("line " + std::to_string(line_no) +
                           ": context value for '" + key + "' must be a string");
        }
        try {
          ctx.set(key, value.get<std::string>());
        } catch (const UnknownKey& e) {
          throw ParseError("line " + std::to_string(line_no) + ": " + e.what());
        }
      }
      s.context = normalize_metadata(ctx, synonyms);
    }

    if (s.split == Split::test_unseen) {
      unseen_speakers.insert(s.speaker_id);
    } else if (s.split != Split::test) {
      train_valid_speakers.insert(s.speaker_id);
    }

    register_profiles(corpus, s);
    corpus.split(s.split).push_back(std::move(s));
  }

  for (const auto& id : unseen_speakers) {
    if (train_valid_speakers.count(id)) {
      throw SplitViolation("speaker '" + id +
                           "' appears in test_unseen and in train/valid");
    }
  }

  if (options.drop_unannotated) {
    for (Split sp : {Split::train, Split::valid, Split::test, Split::test_unseen}) {
      auto& samples = corpus.split(sp);
      samples.erase(std::remove_if(samples.begin(), samples.end(),
                                   [&](const Sample& s) {
                                     return profile_empty(corpus.speakers[s.speaker_id]);
                                   }),
                    samples.end());
    }
  }
  return corpus;
}

CorpusSplits load_corpus(const std::filesystem::path& path,
                         const LoadOptions& options) {
  std::ifstream in(path);
  if (!in) throw ParseError("cannot open corpus file: " + path.string());
  return parse_corpus(in, options);
}

void write_corpus(const CorpusSplits& corpus, std::ostream& out) {
  for (Split sp : {Split::train, Split::valid, Split::test, Split::test_unseen}) {
    for (const Sample& s : corpus.split(sp)) {
      ordered_json record;
      record["utterance"] = s.utterance;
      record["speaker_id"] = s.speaker_id;
      record["production_id"] = s.production_id;
      record["split"] = split_name(sp);
      ordered_json ctx = ordered_json::object();
      for (const auto& v : s.context.variables()) ctx[v.key] = v.value;
      record["context"] = std::move(ctx);
      out << record.dump() << '\n';
    }
  }
}

void save_corpus(const CorpusSplits& corpus, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw ParseError("cannot write corpus file: " + path.string());
  write_corpus(corpus, out);
}

// ---------------------------------------------------------------------------
// build_past_context / select_metadata
// ---------------------------------------------------------------------------

std::vector<Sample> build_past_context(
    const std::vector<std::pair<std::int64_t, std::string>>& dialogue, int k) {
  if (k < 0 || k > kPastSlots) {
    throw InvalidSpec("past-context depth must be in [0, " +
                      std::to_string(kPastSlots) + "]");
  }
  for (std::size_t i = 1; i < dialogue.size(); ++i) {
    if (dialogue[i].first < dialogue[i - 1].first) {
      throw NonMonotonicTimestamps("line " + std::to_string(i));
    }
  }
  std::vector<std::string> lines;
  lines.reserve(dialogue.size());
  for (const auto& [ts, text] : dialogue) lines.push_back(normalize_text(text));

  std::vector<Sample> out;
  out.reserve(lines.size());
  for (std::size_t i = 0; i < lines.size(); ++i) {
    Sample s;
    s.utterance = lines[i];
    s.split = Split::train;
    for (int j = 1; j <= k; ++j) {
      const std::string key = "doc.past_" + std::to_string(j);
      s.context.set(key, static_cast<std::size_t>(j) <= i ? lines[i - j] : "");
    }
    out.push_back(std::move(s));
  }
  return out;
}

Sample select_metadata(const Sample& s, const std::set<std::string>& mask) {
  Sample out = s;
  out.context = s.context.select(mask);
  return out;
}

// ---------------------------------------------------------------------------
// Synthetic corpora
// ---------------------------------------------------------------------------

const SyntheticPools& synthetic_pools() {
  static const SyntheticPools pools = {
      // professions
      {"chef", "spy", "pirate", "doctor", "wizard", "banker", "farmer",
       "singer", "pilot", "judge"},
      // ages
      {"teen", "adult", "elder"},
      // speaker countries
      {"norway", "japan", "brazil", "egypt", "canada", "poland"},
      // genres
      {"comedy", "drama", "horror", "romance", "western", "scifi", "mystery",
       "sport"},
      // production countries
      {"france", "italy", "spain", "mexico"},
      // background words
      {"well",    "right",  "look",    "come",   "time",   "good",  "know",
       "think",   "going",  "really",  "thing",  "never",  "every", "little",
       "great",   "house",  "water",   "night",  "story",  "light", "music",
       "money",   "friend", "family",  "moment", "morning","question",
       "answer",  "window", "garden",  "river",  "mountain"},
  };
  return pools;
}

std::vector<std::string> SyntheticPools::word_pool() const {
  std::vector<std::string> pool = background;
  auto add = [&](const std::vector<std::string>& v) {
    pool.insert(pool.end(), v.begin(), v.end());
  };
  add(professions);
  add(ages);
  add(countries);
  add(genres);
  add(production_countries);
  return pool;
}

namespace {

struct SpeakerDraw {
  std::string profession, age, country;
};

struct ProductionDraw {
  std::string genre, country, rating;
  int year = 0;
};

std::string pad_id(const char* prefix, int i) {
  char buf[16];
  std::snprintf(buf, sizeof(buf), "%s%03d", prefix, i);
  return buf;
}

ContextSet speaker_profile(const SpeakerDraw& d) {
  ContextSet p;
  p.set("speaker.profession", d.profession);
  p.set("speaker.age", d.age);
  p.set("speaker.country", d.country);
  p.set("speaker.description",
        "a " + d.age + " " + d.profession + " from " + d.country);
  return normalize_metadata(p);
}

ContextSet production_profile(const ProductionDraw& d) {
  ContextSet p;
  p.set("production.genre", d.genre);
  p.set("production.country", d.country);
  p.set("production.pg_rating", d.rating);
  p.set("production.year", std::to_string(d.year));
  p.set("production.plot", "a " + d.genre + " film from " + d.country);
  return normalize_metadata(p);
}

// One utterance: each word slot is a profile marker with probability
// marker_strength, otherwise uniform over the full word pool (which also
// contains every marker word, so marker frequency stays well-defined at
// strength zero).
std::string synth_utterance(Rng& rng, double strength,
                            const std::array<const std::string*, 5>& markers,
                            const std::vector<std::string>& pool) {
  const int n_words = 6 + static_cast<int>(rng.next_below(5));
  std::string text;
  for (int w = 0; w < n_words; ++w) {
    if (w > 0) text.push_back(' ');
    if (rng.next_unit() < strength) {
      text += *markers[rng.next_below(markers.size())];
    } else {
      text += pool[rng.next_below(pool.size())];
    }
  }
  return text;
}

}  // namespace

CorpusSplits generate_synthetic(std::uint64_t seed, const SyntheticSpec& spec) {
  if (spec.n_speakers < 1 || spec.n_productions < 1 ||
      spec.lines_per_speaker < 1 || spec.n_unseen_speakers < 0 ||
      spec.marker_strength < 0.0 || spec.marker_strength > 1.0) {
    throw InvalidSpec("synthetic spec out of range");
  }
  const SyntheticPools& pools = synthetic_pools();

  // Distinct speaker attribute combinations, shuffled deterministically.
  std::vector<SpeakerDraw> combos;
  for (const auto& prof : pools.professions)
    for (const auto& age : pools.ages)
      for (const auto& country : pools.countries)
        combos.push_back({prof, age, country});
  const int total_speakers = spec.n_speakers + spec.n_unseen_speakers;
  if (total_speakers > static_cast<int>(combos.size())) {
    throw InvalidSpec("too many speakers for the attribute pools (max " +
                      std::to_string(combos.size()) + ")");
  }
  std::vector<ProductionDraw> prod_combos;
  for (const auto& genre : pools.genres)
    for (const auto& country : pools.production_countries)
      prod_combos.push_back({genre, country, "", 0});
  if (spec.n_productions > static_cast<int>(prod_combos.size())) {
    throw InvalidSpec("too many productions for the attribute pools (max " +
                      std::to_string(prod_combos.size()) + ")");
  }

  Rng rng(seed);
  rng.shuffle(combos);
  rng.shuffle(prod_combos);

  static const std::array<const char*, 3> kRatings = {"G", "PG", "R"};
  std::vector<ProductionDraw> prods(prod_combos.begin(),
                                    prod_combos.begin() + spec.n_productions);
  for (auto& p : prods) {
    p.rating = kRatings[rng.next_below(3)];
    p.year = 1960 + static_cast<int>(rng.next_below(40));
  }

  CorpusSplits corpus;
  const std::vector<std::string> pool = pools.word_pool();

  auto emit_speaker = [&](int index, bool unseen) {
    const SpeakerDraw& draw = combos[index];
    const int prod_index = index % spec.n_productions;
    const ProductionDraw& prod = prods[prod_index];
    const std::string speaker_id = pad_id(unseen ? "usp" : "sp", index);
    const std::string production_id = pad_id("pr", prod_index);

    const ContextSet sp_profile = speaker_profile(draw);
    const ContextSet pr_profile = production_profile(prod);
    const ContextSet full = sp_profile.merged_with(pr_profile);
    corpus.speakers[speaker_id] = normalize_metadata(sp_profile);
    corpus.productions[production_id] = pr_profile;

    const std::array<const std::string*, 5> markers = {
        &draw.profession, &draw.age, &draw.country, &prod.genre, &prod.country};

    for (int l = 0; l < spec.lines_per_speaker; ++l) {
      Sample s;
      s.utterance = synth_utterance(rng, spec.marker_strength, markers, pool);
      s.speaker_id = speaker_id;
      s.production_id = production_id;
      s.context = full;
      if (unseen) {
        s.split = Split::test_unseen;
      } else if (l % 10 == 8) {
        s.split = Split::valid;
      } else if (l % 10 == 9) {
        s.split = Split::test;
      } else {
        s.split = Split::train;
      }
      corpus.split(s.split).push_back(std::move(s));
    }
  };

  for (int i = 0; i < spec.n_speakers; ++i) emit_speaker(i, false);
  for (int i = spec.n_speakers; i < total_speakers; ++i) emit_speaker(i, true);
  return corpus;
}

CorpusSplits generate_synthetic_dialogue(std::uint64_t seed,
                                         const DialogueSpec& spec) {
  if (spec.n_docs < 1 || spec.lines_per_doc < 1 || spec.marker_strength < 0.0 ||
      spec.marker_strength > 1.0) {
    throw InvalidSpec("dialogue spec out of range");
  }
  const SyntheticPools& pools = synthetic_pools();
  const std::vector<std::string> pool = pools.word_pool();
  Rng rng(seed);

  CorpusSplits corpus;
  for (int d = 0; d < spec.n_docs; ++d) {
    const std::string& prof = pools.professions[rng.next_below(pools.professions.size())];
    const std::string& age = pools.ages[rng.next_below(pools.ages.size())];
    const std::string& country = pools.countries[rng.next_below(pools.countries.size())];
    const std::string& genre = pools.genres[rng.next_below(pools.genres.size())];
    const std::string& pcountry =
        pools.production_countries[rng.next_below(pools.production_countries.size())];
    const std::array<const std::string*, 5> markers = {&prof, &age, &country,
                                                       &genre, &pcountry};

    std::vector<std::pair<std::int64_t, std::string>> dialogue;
    for (int l = 0; l < spec.lines_per_doc; ++l) {
      dialogue.emplace_back(l, synth_utterance(rng, spec.marker_strength,
                                               markers, pool));
    }
    std::vector<Sample> samples = build_past_context(dialogue, kPastSlots);
    const Split target = (d % 10 == 9) ? Split::valid : Split::train;
    for (auto& s : samples) {
      s.speaker_id = pad_id("doc", d);
      s.production_id = pad_id("doc", d);
      s.split = target;
      register_profiles(corpus, s);
      corpus.split(target).push_back(std::move(s));
    }
  }
  return corpus;
}

}  // namespace ctxlm::corpus
