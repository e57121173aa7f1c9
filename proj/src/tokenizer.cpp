#include "ctxlm/tokenizer.hpp"

#include "ctxlm/detail/utf8.hpp"

#include <algorithm>
#include <array>
#include <cctype>
#include <cstdio>
#include <fstream>
#include <map>
#include <set>
#include <sstream>

namespace ctxlm::bpe {

namespace {

constexpr const char* kFormatLine = "ctxlm-bpe 1";
const std::array<const char*, 4> kSpecialNames = {"<pad>", "<bos>", "<eos>",
                                                  "<unk>"};

std::string byte_unit_name(int b) {
  char buf[8];
  std::snprintf(buf, sizeof(buf), "<0x%02X>", b);
  return buf;
}

std::vector<std::string_view> split_words(std::string_view text) {
  std::vector<std::string_view> words;
  std::size_t i = 0;
  while (i < text.size()) {
    while (i < text.size() && std::isspace(static_cast<unsigned char>(text[i]))) ++i;
    std::size_t start = i;
    while (i < text.size() && !std::isspace(static_cast<unsigned char>(text[i]))) ++i;
    if (i > start) words.push_back(text.substr(start, i - start));
  }
  return words;
}

}  // namespace

const std::string& BpeModel::boundary() {
  static const std::string marker = "\xE2\x96\x81";  // U+2581
  return marker;
}

// ---------------------------------------------------------------------------
// Training
// ---------------------------------------------------------------------------

BpeModel BpeModel::train(const std::vector<std::string>& texts,
                         const TrainOptions& options) {
  using Pair = std::pair<std::string, std::string>;

  // Word frequencies over the whole corpus.
  std::map<std::string, std::int64_t> word_count;
  for (const auto& text : texts) {
    for (const auto word : split_words(text)) {
      ++word_count[std::string(word)];
    }
  }
  if (word_count.empty()) throw EmptyCorpus("no words in training corpus");

  // Base alphabet: the boundary marker plus every code point seen.
  std::set<std::string> alphabet;
  alphabet.insert(boundary());
  for (const auto& [word, n] : word_count) {
    for (auto& cp : detail::codepoint_split(word)) alphabet.insert(std::move(cp));
  }

  BpeModel model;
  model.byte_fallback_ = options.byte_fallback;
  for (const char* name : kSpecialNames) model.id_to_unit_.emplace_back(name);
  if (options.byte_fallback) {
    for (int b = 0; b < 256; ++b) model.id_to_unit_.push_back(byte_unit_name(b));
  }
  for (const auto& cp : alphabet) model.id_to_unit_.push_back(cp);
  model.n_base_ = static_cast<int>(model.id_to_unit_.size()) - Specials::count;

  if (options.vocab_cap < model.vocab_size()) {
    throw InvalidVocabCap("vocab cap " + std::to_string(options.vocab_cap) +
                          " below base alphabet + specials (" +
                          std::to_string(model.vocab_size()) + ")");
  }

  // Unit sequences per word type, plus pair statistics. Counts are weighted
  // by word frequency; every adjacent position counts.
  std::vector<std::vector<std::string>> seqs;
  std::vector<std::int64_t> freqs;
  seqs.reserve(word_count.size());
  for (const auto& [word, n] : word_count) {
    std::vector<std::string> units;
    units.push_back(boundary());
    for (auto& cp : detail::codepoint_split(word)) units.push_back(std::move(cp));
    seqs.push_back(std::move(units));
    freqs.push_back(n);
  }

  std::map<Pair, std::int64_t> pair_count;
  std::map<Pair, std::set<std::size_t>> pair_words;
  auto add_word_pairs = [&](std::size_t w, std::int64_t sign) {
    const auto& units = seqs[w];
    for (std::size_t i = 0; i + 1 < units.size(); ++i) {
      Pair p{units[i], units[i + 1]};
      auto it = pair_count.emplace(p, 0).first;
      it->second += sign * freqs[w];
      if (sign > 0) {
        pair_words[p].insert(w);
      } else if (it->second <= 0) {
        pair_count.erase(it);
        auto pw = pair_words.find(p);
        if (pw != pair_words.end()) {
          pw->second.erase(w);
          if (pw->second.empty()) pair_words.erase(pw);
        }
      }
    }
  };
  for (std::size_t w = 0; w < seqs.size(); ++w) add_word_pairs(w, +1);

  while (model.vocab_size() < options.vocab_cap && !pair_count.empty()) {
    // Most frequent pair; on ties the lexicographically smallest wins, which
    // the ascending map order gives us for free.
    Pair best;
    std::int64_t best_count = 0;
    for (const auto& [pair, count] : pair_count) {
      if (count > best_count) {
        best = pair;
        best_count = count;
      }
    }

    const std::string merged = best.first + best.second;
    const std::set<std::size_t> affected = pair_words[best];
    for (std::size_t w : affected) {
      add_word_pairs(w, -1);
      auto& units = seqs[w];
      std::vector<std::string> next;
      next.reserve(units.size());
      std::size_t i = 0;
      while (i < units.size()) {
        if (i + 1 < units.size() && units[i] == best.first &&
            units[i + 1] == best.second) {
          next.push_back(merged);
          i += 2;
        } else {
          next.push_back(std::move(units[i]));
          ++i;
        }
      }
      units = std::move(next);
      add_word_pairs(w, +1);
    }

    model.merges_.push_back(best);
    model.id_to_unit_.push_back(merged);
  }

  model.rebuild_index();
  return model;
}

void BpeModel::rebuild_index() {
  unit_to_id_.clear();
  merge_rank_.clear();
  const int byte_units = byte_fallback_ ? 256 : 0;
  for (int id = Specials::count + byte_units;
       id < static_cast<int>(id_to_unit_.size()); ++id) {
    unit_to_id_[id_to_unit_[id]] = id;
  }
  for (std::size_t r = 0; r < merges_.size(); ++r) {
    merge_rank_[merges_[r].first + '\x1f' + merges_[r].second] = r;
  }
}

// ---------------------------------------------------------------------------
// Encoding / decoding
// ---------------------------------------------------------------------------

void BpeModel::apply_merges(std::vector<std::string>& units,
                            std::size_t merge_limit) const {
  // Repeatedly apply the lowest-ranked merge present; equivalent to replaying
  // the merge list in training order.
  while (units.size() >= 2) {
    std::size_t best_rank = merge_limit;
    for (std::size_t i = 0; i + 1 < units.size(); ++i) {
      auto it = merge_rank_.find(units[i] + '\x1f' + units[i + 1]);
      if (it != merge_rank_.end() && it->second < best_rank) {
        best_rank = it->second;
      }
    }
    if (best_rank >= merge_limit) break;
    const auto& [left, right] = merges_[best_rank];
    const std::string merged = left + right;
    std::vector<std::string> next;
    next.reserve(units.size());
    std::size_t i = 0;
    while (i < units.size()) {
      if (i + 1 < units.size() && units[i] == left && units[i + 1] == right) {
        next.push_back(merged);
        i += 2;
      } else {
        next.push_back(std::move(units[i]));
        ++i;
      }
    }
    units = std::move(next);
  }
}

std::vector<std::string> BpeModel::word_units(std::string_view word) const {
  std::vector<std::string> units;
  units.push_back(boundary());
  for (auto& cp : detail::codepoint_split(word)) units.push_back(std::move(cp));
  apply_merges(units, merges_.size());
  return units;
}

TokenSequence BpeModel::encode(std::string_view text,
                               const EncodeOptions& options) const {
  TokenSequence out;
  if (options.add_bos) out.push_back(Specials::bos);
  for (const auto word : split_words(text)) {
    for (const auto& unit : word_units(word)) {
      auto it = unit_to_id_.find(unit);
      if (it != unit_to_id_.end()) {
        out.push_back(it->second);
      } else if (byte_fallback_) {
        for (const unsigned char b : unit) {
          out.push_back(Specials::count + static_cast<int>(b));
        }
      } else {
        out.push_back(Specials::unk);
      }
    }
  }
  if (options.add_eos) out.push_back(Specials::eos);
  return out;
}

std::string BpeModel::decode(std::span<const int> tokens) const {
  const int byte_units = byte_fallback_ ? 256 : 0;
  std::string joined;
  for (const int id : tokens) {
    if (id < 0 || id >= vocab_size()) {
      throw InvalidTokenId(std::to_string(id));
    }
    if (id < Specials::count) continue;  // specials stripped (UNK included)
    if (byte_fallback_ && id < Specials::count + byte_units) {
      joined.push_back(static_cast<char>(id - Specials::count));
      continue;
    }
    joined += id_to_unit_[id];
  }
  // Boundary markers back to spaces.
  std::string out;
  out.reserve(joined.size());
  std::size_t i = 0;
  const std::string& marker = boundary();
  while (i < joined.size()) {
    if (joined.compare(i, marker.size(), marker) == 0) {
      out.push_back(' ');
      i += marker.size();
    } else {
      out.push_back(joined[i]);
      ++i;
    }
  }
  if (!out.empty() && out.front() == ' ') out.erase(out.begin());
  return out;
}

int BpeModel::unit_id(std::string_view unit) const {
  auto it = unit_to_id_.find(std::string(unit));
  return it == unit_to_id_.end() ? -1 : it->second;
}

const std::string& BpeModel::unit_string(int id) const {
  if (id < 0 || id >= vocab_size()) throw InvalidTokenId(std::to_string(id));
  return id_to_unit_[id];
}

BpeModel BpeModel::with_merge_prefix(std::size_t n) const {
  BpeModel out = *this;
  if (n >= merges_.size()) return out;
  out.merges_.resize(n);
  out.id_to_unit_.resize(Specials::count + n_base_ + n);
  out.rebuild_index();
  return out;
}

// ---------------------------------------------------------------------------
// Serialization
// ---------------------------------------------------------------------------

std::string BpeModel::to_text() const {
  std::ostringstream out;
  out << kFormatLine << '\n';
  out << "vocab_size " << vocab_size() << '\n';
  out << "byte_fallback " << (byte_fallback_ ? 1 : 0) << '\n';
  const int byte_units = byte_fallback_ ? 256 : 0;
  const int n_chars = n_base_ - byte_units;
  out << "chars " << n_chars << '\n';
  for (int i = 0; i < n_chars; ++i) {
    out << id_to_unit_[Specials::count + byte_units + i] << '\n';
  }
  out << "merges " << merges_.size() << '\n';
  for (const auto& [l, r] : merges_) out << l << ' ' << r << '\n';
  return out.str();
}

BpeModel BpeModel::from_text(const std::string& text) {
  std::istringstream in(text);
  std::string line;
  auto next_line = [&]() -> std::string {
    if (!std::getline(in, line)) throw ParseError("bpe model file truncated");
    return line;
  };
  if (next_line() != kFormatLine) {
    throw ParseError("unrecognized bpe model header");
  }
  auto parse_kv = [&](const char* key) -> long {
    const std::string l = next_line();
    std::istringstream ls(l);
    std::string k;
    long v = 0;
    if (!(ls >> k >> v) || k != key) {
      throw ParseError("bpe model: expected '" + std::string(key) + " N'");
    }
    return v;
  };
  const long declared_vocab = parse_kv("vocab_size");
  const long fallback = parse_kv("byte_fallback");
  const long n_chars = parse_kv("chars");

  BpeModel model;
  model.byte_fallback_ = fallback != 0;
  for (const char* name : kSpecialNames) model.id_to_unit_.emplace_back(name);
  if (model.byte_fallback_) {
    for (int b = 0; b < 256; ++b) model.id_to_unit_.push_back(byte_unit_name(b));
  }
  for (long i = 0; i < n_chars; ++i) model.id_to_unit_.push_back(next_line());
  model.n_base_ = static_cast<int>(model.id_to_unit_.size()) - Specials::count;

  const long n_merges = parse_kv("merges");
  for (long i = 0; i < n_merges; ++i) {
    const std::string l = next_line();
    const auto space = l.find(' ');
    if (space == std::string::npos || space + 1 >= l.size()) {
      throw ParseError("bpe model: bad merge line '" + l + "'");
    }
    model.merges_.emplace_back(l.substr(0, space), l.substr(space + 1));
    model.id_to_unit_.push_back(model.merges_.back().first +
                                model.merges_.back().second);
  }
  if (model.vocab_size() != declared_vocab) {
    throw ParseError("bpe model: vocab_size mismatch");
  }
  model.rebuild_index();
  return model;
}

void BpeModel::save(const std::filesystem::path& path) const {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw ParseError("cannot write bpe model: " + path.string());
  out << to_text();
}

BpeModel BpeModel::load(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ParseError("cannot open bpe model: " + path.string());
  std::ostringstream buf;
  buf << in.rdbuf();
  return from_text(buf.str());
}

}  // namespace ctxlm::bpe
