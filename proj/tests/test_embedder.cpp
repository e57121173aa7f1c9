#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "ctxlm/embedder.hpp"

#include <filesystem>
#include <fstream>
#include <set>

using namespace ctxlm;
using namespace ctxlm::embed;

namespace {

Embedder make_embedder(int d = 64) {
  EmbedderConfig cfg;
  cfg.d_ctx = d;
  return Embedder(cfg);
}

}  // namespace

TEST_CASE("embedding is deterministic and unit norm") {
  const Embedder embedder = make_embedder();
  const ContextVector a = embedder.embed_text("speaker.profession", "Spy");
  const ContextVector b = embedder.embed_text("speaker.profession", "Spy");
  CHECK(a.values == b.values);
  CHECK(!a.is_empty);
  CHECK(std::abs(a.values.norm() - 1.0f) <= 1e-6f);

  const ContextVector spy384 =
      Embedder(EmbedderConfig{}).embed_text("speaker.profession", "Spy");
  CHECK(spy384.values.size() == 384);
  CHECK(std::abs(spy384.values.norm() - 1.0f) <= 1e-6f);
}

TEST_CASE("empty value gives the zero vector flagged empty") {
  const Embedder embedder = make_embedder();
  const ContextVector v = embedder.embed_text("speaker.religion", "");
  CHECK(v.is_empty);
  CHECK(v.values.norm() == 0.0f);
}

TEST_CASE("the key participates in hashing") {
  const Embedder embedder = make_embedder();
  const ContextVector a = embedder.embed_text("speaker.country", "France");
  const ContextVector b = embedder.embed_text("production.country", "France");
  CHECK(a.values != b.values);

  EmbedderConfig values_only;
  values_only.d_ctx = 64;
  values_only.include_keys = false;
  const Embedder vo(values_only);
  CHECK(vo.embed_text("speaker.country", "France").values ==
        vo.embed_text("production.country", "France").values);
}

TEST_CASE("embed_context_set prepends the sentinel slot") {
  const Embedder embedder = make_embedder();
  corpus::ContextSet ctx;
  for (const auto& key : corpus::metadata_keys()) ctx.set(key, "value");
  const auto vectors = embedder.embed_context_set(ctx);
  CHECK(vectors.size() == 15);  // sentinel + 14
  CHECK(!vectors[0].is_empty);
  CHECK(vectors[0].values.norm() == 0.0f);

  const auto only_sentinel = embedder.embed_context_set(corpus::ContextSet{});
  CHECK(only_sentinel.size() == 1);
}

TEST_CASE("empty-valued variables are flagged for masking") {
  const Embedder embedder = make_embedder();
  corpus::ContextSet ctx;
  ctx.set("speaker.profession", "chef");
  ctx.set("speaker.religion", "");
  const auto vectors = embedder.embed_context_set(ctx);
  REQUIRE(vectors.size() == 3);
  CHECK(!vectors[1].is_empty);  // profession (canonical order)
  CHECK(vectors[2].is_empty);   // religion
}

TEST_CASE("input order does not change output order") {
  const Embedder embedder = make_embedder();
  corpus::ContextSet a;
  a.set("speaker.age", "teen");
  a.set("production.genre", "comedy");
  corpus::ContextSet b;
  b.set("production.genre", "comedy");
  b.set("speaker.age", "teen");
  const auto va = embedder.embed_context_set(a);
  const auto vb = embedder.embed_context_set(b);
  REQUIRE(va.size() == vb.size());
  for (std::size_t i = 0; i < va.size(); ++i) {
    CHECK(va[i].values == vb[i].values);
  }
}

TEST_CASE("no collisions among 10k random pairs at d_ctx=64") {
  const Embedder embedder = make_embedder(64);
  Rng rng(17);
  const auto& keys = corpus::metadata_keys();
  std::set<std::string> seen_values;
  std::set<std::vector<float>> seen_vectors;
  int pairs = 0;
  while (pairs < 10000) {
    std::string value;
    const int len = 3 + static_cast<int>(rng.next_below(10));
    for (int i = 0; i < len; ++i) {
      value.push_back(static_cast<char>('a' + rng.next_below(26)));
    }
    const std::string& key = keys[rng.next_below(keys.size())];
    if (!seen_values.insert(key + "\x1f" + value).second) continue;
    ++pairs;
    const ContextVector v = embedder.embed_text(key, value);
    std::vector<float> flat(v.values.data(), v.values.data() + v.values.size());
    CHECK(seen_vectors.insert(flat).second);
  }
}

TEST_CASE("external backend serves precomputed vectors") {
  const auto path = std::filesystem::temp_directory_path() / "ctxlm_embed.tsv";
  {
    std::ofstream out(path);
    out << "speaker.profession\tchef\t";
    for (int i = 0; i < 8; ++i) out << (i == 0 ? "" : ",") << (i + 1);
    out << "\n";
  }
  EmbedderConfig cfg;
  cfg.d_ctx = 8;
  cfg.backend = Backend::external;
  cfg.external_path = path;
  const Embedder embedder(cfg);
  const ContextVector v = embedder.embed_text("speaker.profession", "chef");
  CHECK(std::abs(v.values.norm() - 1.0f) <= 1e-6f);  // normalized on load
  CHECK(v.values[7] > v.values[0]);
  CHECK_THROWS_AS(embedder.embed_text("speaker.profession", "spy"),
                  MissingEmbedding);
  // empty values bypass the table
  CHECK(embedder.embed_text("speaker.profession", "").is_empty);
  std::filesystem::remove(path);
}

TEST_CASE("d_ctx below 8 is rejected") {
  EmbedderConfig cfg;
  cfg.d_ctx = 4;
  CHECK_THROWS_AS(Embedder{cfg}, InvalidSpec);
}
