#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "ctxlm/cli.hpp"
#include "ctxlm/corpus.hpp"
#include "ctxlm/metrics.hpp"
#include "ctxlm/model.hpp"

#include <nlohmann/json.hpp>

#include <filesystem>
#include <fstream>
#include <sstream>

using namespace ctxlm;
namespace fs = std::filesystem;

namespace {

int run_cli(const std::vector<std::string>& args) {
  std::vector<const char*> argv = {"ctxlm"};
  for (const auto& a : args) argv.push_back(a.c_str());
  return cli::run(static_cast<int>(argv.size()), argv.data());
}

std::string slurp(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  REQUIRE(in.good());
  std::ostringstream buf;
  buf << in.rdbuf();
  return buf.str();
}

struct TempDir {
  fs::path path;
  TempDir() {
    path = fs::temp_directory_path() /
           ("ctxlm_cli_" + std::to_string(::getpid()));
    fs::create_directories(path);
  }
  ~TempDir() { fs::remove_all(path); }
  std::string operator/(const char* name) const { return (path / name).string(); }
};

}  // namespace

TEST_CASE("end-to-end pipeline: preprocess, bpe, train, score") {
  TempDir dir;

  // raw corpus with markup and denormalized metadata
  {
    corpus::SyntheticSpec spec;
    spec.n_speakers = 5;
    spec.n_productions = 2;
    spec.lines_per_speaker = 30;
    spec.marker_strength = 0.6;
    spec.n_unseen_speakers = 2;
    const auto c = corpus::generate_synthetic(77, spec);
    corpus::save_corpus(c, dir / "clean.jsonl");

    std::ofstream raw(dir / "raw.jsonl");
    raw << R"({"utterance": "<i>Hello there..</i>", "speaker_id": "x", )"
        << R"("production_id": "p", "split": "train", )"
        << R"("context": {"production.pg_rating": "R", "speaker.gender": "m"}})"
        << "\n";
    raw << slurp(dir / "clean.jsonl");
  }

  REQUIRE(run_cli({"preprocess", "--in", dir / "raw.jsonl", "--out",
                   dir / "corpus.jsonl"}) == 0);
  const auto corpus_data = corpus::load_corpus(dir / "corpus.jsonl");
  CHECK(corpus_data.train.front().utterance == "Hello there...");
  CHECK(corpus_data.train.front().context.value_or_empty("production.pg_rating") ==
        "PG Rating: R");
  CHECK(corpus_data.train.front().context.value_or_empty("speaker.gender") ==
        "A man");

  REQUIRE(run_cli({"train-bpe", "--in", dir / "corpus.jsonl", "--out",
                   dir / "tok.bpe", "--vocab-cap", "240",
                   "--no-byte-fallback"}) == 0);
  CHECK(fs::exists(dir / "tok.bpe"));

  {
    std::ofstream cfg(dir / "config.json");
    cfg << R"({"train": {"max_epochs": 2, "learning_rate": 0.004,)"
        << R"( "batch_tokens": 900, "seed": 3},)"
        << R"( "embedder": {"d_ctx": 32}})" << "\n";
  }
  REQUIRE(run_cli({"pretrain", "--corpus", dir / "corpus.jsonl", "--bpe",
                   dir / "tok.bpe", "--config", dir / "config.json",
                   "--context-source", "metadata", "--out",
                   dir / "ctx.ckpt"}) == 0);
  CHECK(fs::exists(dir / "ctx.ckpt"));
  CHECK(fs::exists(dir / "ctx.ckpt.runrecord.csv"));
  CHECK(fs::exists(dir / "ctx.ckpt.manifest.json"));
  CHECK(slurp(dir / "ctx.ckpt.runrecord.csv").rfind("epoch,train_loss,valid_loss",
                                                    0) == 0);

  REQUIRE(run_cli({"pretrain", "--corpus", dir / "corpus.jsonl", "--bpe",
                   dir / "tok.bpe", "--config", dir / "config.json",
                   "--arch-preset", "tiny-base", "--out", dir / "base.ckpt"}) ==
          0);

  REQUIRE(run_cli({"finetune", "--corpus", dir / "corpus.jsonl", "--bpe",
                   dir / "tok.bpe", "--config", dir / "config.json", "--init",
                   dir / "ctx.ckpt", "--keys", "speaker.*", "--out",
                   dir / "ctx_ft.ckpt"}) == 0);

  REQUIRE(run_cli({"score-ppl", "--corpus", dir / "corpus.jsonl", "--bpe",
                   dir / "tok.bpe", "--ckpt", dir / "ctx_ft.ckpt", "--split",
                   "test", "--out", dir / "ppl.csv"}) == 0);
  CHECK(slurp(dir / "ppl.csv").rfind("sample_id,n_tokens,ppl", 0) == 0);

  REQUIRE(run_cli({"score-smrr", "--corpus", dir / "corpus.jsonl", "--bpe",
                   dir / "tok.bpe", "--ckpt", dir / "ctx_ft.ckpt", "--split",
                   "test_unseen", "--out-matrix", dir / "matrix.csv"}) == 0);
  CHECK(fs::exists(dir / "matrix.csv"));

  REQUIRE(run_cli({"score-pmi", "--corpus", dir / "corpus.jsonl", "--bpe",
                   dir / "tok.bpe", "--ctx-ckpt", dir / "ctx_ft.ckpt",
                   "--base-ckpt", dir / "base.ckpt", "--split", "test", "--out",
                   dir / "pmi"}) == 0);
  CHECK(fs::exists(dir / "pmi.csv"));
  const auto summary = nlohmann::json::parse(slurp(dir / "pmi.summary.json"));
  CHECK(summary.contains("macro"));
  CHECK(summary.contains("micro"));
  CHECK(summary.contains("stderr"));

  // deterministic outputs: rerunning reproduces the files byte for byte
  const std::string pmi_csv = slurp(dir / "pmi.csv");
  const std::string pmi_manifest = slurp(dir / "pmi.manifest.json");
  REQUIRE(run_cli({"score-pmi", "--corpus", dir / "corpus.jsonl", "--bpe",
                   dir / "tok.bpe", "--ctx-ckpt", dir / "ctx_ft.ckpt",
                   "--base-ckpt", dir / "base.ckpt", "--split", "test", "--out",
                   dir / "pmi"}) == 0);
  CHECK(slurp(dir / "pmi.csv") == pmi_csv);
  CHECK(slurp(dir / "pmi.manifest.json") == pmi_manifest);

  REQUIRE(run_cli({"token-deltas", "--corpus", dir / "corpus.jsonl", "--bpe",
                   dir / "tok.bpe", "--ctx-ckpt", dir / "ctx_ft.ckpt",
                   "--base-ckpt", dir / "base.ckpt", "--split", "test",
                   "--min-count", "1", "--out", dir / "deltas.json"}) == 0);
  CHECK(nlohmann::json::parse(slurp(dir / "deltas.json"))
            .contains("top_gaining_tokens"));

  REQUIRE(run_cli({"lerp-score", "--corpus", dir / "corpus.jsonl", "--bpe",
                   dir / "tok.bpe", "--ckpt-a", dir / "base.ckpt", "--ckpt-b",
                   dir / "base.ckpt", "--split", "test"}) == 0);

  REQUIRE(run_cli({"speaker-finetune", "--corpus", dir / "corpus.jsonl",
                   "--bpe", dir / "tok.bpe", "--config", dir / "config.json",
                   "--init", dir / "base.ckpt", "--speaker",
                   corpus_data.train.back().speaker_id, "--out-dir",
                   dir / "spft"}) == 0);
  CHECK(fs::exists(fs::path(dir / "spft") / "ft1.ckpt"));
  CHECK(fs::exists(fs::path(dir / "spft") / "sp.ckpt"));
}

TEST_CASE("score-smrr --scores is a thin wrapper over the library") {
  TempDir dir;
  metrics::ScoreMatrix matrix;
  matrix.scores.resize(3, 3);
  matrix.scores << -10, -12, -11, -11, -9, -13, -12, -13, -8;
  matrix.speaker_ids = {"a", "b", "c"};
  {
    std::ofstream out(dir / "matrix.csv");
    out << matrix.to_csv();
  }
  CHECK(run_cli({"score-smrr", "--scores", dir / "matrix.csv"}) == 0);
  CHECK(run_cli({"smrr", "--scores", dir / "matrix.csv"}) == 0);
  // equivalence is checked through the library call on the same file
  std::ifstream in(dir / "matrix.csv");
  const auto loaded = metrics::ScoreMatrix::from_csv(in);
  CHECK(metrics::smrr(loaded) == metrics::smrr(matrix));
}

TEST_CASE("exit codes: usage 1, data 2") {
  TempDir dir;
  CHECK(run_cli({"no-such-subcommand"}) == 1);
  CHECK(run_cli({"score-smrr"}) == 1);  // neither --scores nor model inputs
  CHECK(run_cli({"preprocess", "--in", dir / "missing.jsonl", "--out",
                 dir / "out.jsonl"}) == 2);
  {
    std::ofstream bad(dir / "bad.jsonl");
    bad << "{not json}\n";
  }
  CHECK(run_cli({"preprocess", "--in", dir / "bad.jsonl", "--out",
                 dir / "out.jsonl"}) == 2);
}

TEST_CASE("tiny recipe produces the summary artifacts") {
  TempDir dir;
  setenv("CTXLM_SEED", "301", 1);
  REQUIRE(run_cli({"run-recipe", "--name", "rqb-synthetic", "--out-dir",
                   dir / "rqb", "--scale", "tiny", "--threads", "4"}) == 0);
  unsetenv("CTXLM_SEED");

  const auto summary =
      nlohmann::json::parse(slurp(fs::path(dir / "rqb") / "summary.json"));
  CHECK(summary["recipe"] == "rqb-synthetic");
  CHECK(summary["seeds"].size() == 5);
  CHECK(summary["seeds"][0] == 301);
  CHECK(summary["arms"].contains("base"));
  CHECK(summary["arms"].contains("lmcue_sp"));
  CHECK(fs::exists(fs::path(dir / "rqb") / "base.csv"));
  CHECK(fs::exists(fs::path(dir / "rqb") / "corpus.jsonl"));
  // the base arm ignores context, so every speaker ties at exactly 1/n
  const double base_smrr = summary["arms"]["base"]["smrr_mean"].get<double>();
  const int n_unseen = 3;  // tiny scale holds out three speakers
  CHECK(base_smrr == doctest::Approx(1.0 / n_unseen).epsilon(1e-12));
}
