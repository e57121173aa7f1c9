#pragma once

#include "ctxlm/corpus.hpp"
#include "ctxlm/embedder.hpp"
#include "ctxlm/metrics.hpp"
#include "ctxlm/model.hpp"
#include "ctxlm/scoring.hpp"
#include "ctxlm/tokenizer.hpp"
#include "ctxlm/trainer.hpp"

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

namespace ctxlm::recipes {

enum class Scale { tiny, desk };

/// Everything the synthetic experiments share: a generated corpus, a BPE
/// model trained on its train split, the hashed-n-gram embedder and the two
/// architecture presets (the base arm is parameter-matched to the contextual
/// one).
struct SyntheticBench {
  corpus::CorpusSplits corpus;
  bpe::BpeModel tokenizer;
  embed::Embedder embedder;
  model::ArchConfig contextual_arch;
  model::ArchConfig base_arch;

  train::Pipeline pipeline() const { return {&tokenizer, &embedder}; }
};

struct BenchOptions {
  std::uint64_t corpus_seed = 2024;
  corpus::SyntheticSpec spec;       // defaults tuned per scale by make_bench
  int vocab_cap = 320;
  int d_ctx = 48;
};

SyntheticBench make_bench(Scale scale, const BenchOptions& options = {});

/// Training configs used by the synthetic experiments.
train::TrainConfig bench_train_config(Scale scale, std::uint64_t seed,
                                      train::ContextSource source,
                                      std::set<std::string> mask = {});

/// Trains one arm from scratch and returns the best parameters.
model::ModelParameters train_arm(const SyntheticBench& bench,
                                 const model::ArchConfig& arch,
                                 const train::TrainConfig& cfg);

/// The five seeds every recipe runs; CTXLM_SEED=S rebases them to S..S+4.
std::vector<std::uint64_t> recipe_seeds(
    std::optional<std::uint64_t> override_base = std::nullopt);

struct RecipeOptions {
  std::filesystem::path out_dir;
  Scale scale = Scale::desk;
  int threads = 1;
  std::optional<std::uint64_t> seed_base;  // from CTXLM_SEED
};

/// Built-in experiment recipes. Each writes per-arm CSVs and a summary JSON
/// under out_dir and returns the summary path.
std::filesystem::path run_rqa_synthetic(const RecipeOptions& options);
std::filesystem::path run_rqb_synthetic(const RecipeOptions& options);
std::filesystem::path run_rqc_synthetic(const RecipeOptions& options);
std::filesystem::path run_appc_synthetic(const RecipeOptions& options);

std::filesystem::path run_recipe(const std::string& name,
                                 const RecipeOptions& options);
const std::vector<std::string>& recipe_names();

}  // namespace ctxlm::recipes
