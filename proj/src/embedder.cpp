#include "ctxlm/embedder.hpp"

#include <algorithm>
#include <cctype>
#include <fstream>
#include <sstream>

namespace ctxlm::embed {

namespace {

std::uint64_t fnv1a(const char* data, std::size_t len, std::uint64_t h) {
  constexpr std::uint64_t kPrime = 0x100000001b3ull;
  for (std::size_t i = 0; i < len; ++i) {
    h ^= static_cast<unsigned char>(data[i]);
    h *= kPrime;
  }
  return h;
}

constexpr std::uint64_t kFnvOffset = 0xcbf29ce484222325ull;

std::string ascii_lower(const std::string& s) {
  std::string out = s;
  std::transform(out.begin(), out.end(), out.begin(), [](unsigned char c) {
    return static_cast<char>(std::tolower(c));
  });
  return out;
}

}  // namespace

ContextVector Embedder::sentinel(int d_ctx) {
  ContextVector v;
  v.values = VecF::Zero(d_ctx);
  v.is_empty = false;
  return v;
}

Embedder::Embedder(EmbedderConfig config) : config_(std::move(config)) {
  if (config_.d_ctx < 8) {
    throw InvalidSpec("embedder dimension must be >= 8");
  }
  if (config_.backend == Backend::external) {
    external_ = load_external_table(config_.external_path, config_.d_ctx);
  }
}

ContextVector Embedder::embed_text(const std::string& key,
                                   const std::string& value) const {
  ContextVector out;
  out.values = VecF::Zero(config_.d_ctx);
  if (value.empty()) {
    out.is_empty = true;
    return out;
  }

  if (config_.backend == Backend::external) {
    auto it = external_.find({key, value});
    if (it == external_.end()) {
      throw MissingEmbedding("no precomputed vector for key '" + key + "'");
    }
    out.values = it->second;
    return out;
  }

  const std::string text =
      ascii_lower(config_.include_keys ? key + ": " + value : value);
  const int d = config_.d_ctx;
  auto add_gram = [&](const char* data, std::size_t len) {
    const std::uint64_t h = fnv1a(data, len, kFnvOffset);
    const int bucket = static_cast<int>((h >> 1) % static_cast<std::uint64_t>(d));
    out.values[bucket] += (h & 1) ? 1.0f : -1.0f;
  };
  bool any = false;
  for (std::size_t n = 3; n <= 5; ++n) {
    if (text.size() < n) break;
    for (std::size_t i = 0; i + n <= text.size(); ++i) {
      add_gram(text.data() + i, n);
      any = true;
    }
  }
  if (!any) add_gram(text.data(), text.size());

  const float norm = out.values.norm();
  if (norm > 0.0f) {
    out.values /= norm;
  } else {
    // All grams cancelled; fall back to a single deterministic spike.
    const std::uint64_t h = fnv1a(text.data(), text.size(), kFnvOffset);
    out.values[(h >> 1) % static_cast<std::uint64_t>(d)] = 1.0f;
  }
  return out;
}

std::vector<ContextVector> Embedder::embed_context_set(
    const corpus::ContextSet& ctx) const {
  std::vector<ContextVector> out;
  out.reserve(ctx.size() + 1);
  out.push_back(sentinel(config_.d_ctx));
  for (const auto& var : ctx.variables()) {
    out.push_back(embed_text(var.key, var.value));
  }
  return out;
}

std::map<std::pair<std::string, std::string>, VecF> load_external_table(
    const std::filesystem::path& path, int d_ctx) {
  std::ifstream in(path);
  if (!in) {
    throw ParseError("cannot open embedding table: " + path.string());
  }
  std::map<std::pair<std::string, std::string>, VecF> table;
  std::string line;
  int line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    const auto tab1 = line.find('\t');
    const auto tab2 = tab1 == std::string::npos ? tab1 : line.find('\t', tab1 + 1);
    if (tab2 == std::string::npos) {
      throw ParseError("embedding table line " + std::to_string(line_no) +
                       ": expected key<TAB>value<TAB>floats");
    }
    const std::string key = line.substr(0, tab1);
    const std::string value = line.substr(tab1 + 1, tab2 - tab1 - 1);
    VecF vec = VecF::Zero(d_ctx);
    std::istringstream floats(line.substr(tab2 + 1));
    std::string item;
    int i = 0;
    while (std::getline(floats, item, ',')) {
      if (i >= d_ctx) break;
      vec[i++] = std::stof(item);
    }
    if (i != d_ctx) {
      throw ParseError("embedding table line " + std::to_string(line_no) +
                       ": expected " + std::to_string(d_ctx) + " floats, got " +
                       std::to_string(i));
    }
    const float norm = vec.norm();
    if (norm > 0.0f) vec /= norm;
    table[{key, value}] = std::move(vec);
  }
  return table;
}

}  // namespace ctxlm::embed
