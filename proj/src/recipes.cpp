#include "ctxlm/recipes.hpp"

#include <nlohmann/json.hpp>

#include <atomic>
#include <fstream>
#include <functional>
#include <sstream>
#include <thread>

namespace ctxlm::recipes {

using json = nlohmann::json;

namespace {

void write_file(const std::filesystem::path& path, const std::string& data) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw ParseError("cannot write " + path.string());
  out << data;
}

// Runs jobs over a fixed-size index space; results land in preallocated
// slots, so the output is independent of the thread count.
void run_jobs(std::size_t count, int threads,
              const std::function<void(std::size_t)>& job) {
  if (threads <= 1 || count < 2) {
    for (std::size_t i = 0; i < count; ++i) job(i);
    return;
  }
  std::atomic<std::size_t> next{0};
  std::vector<std::thread> pool;
  const int n = std::min<int>(threads, static_cast<int>(count));
  for (int t = 0; t < n; ++t) {
    pool.emplace_back([&]() {
      for (std::size_t i = next.fetch_add(1); i < count; i = next.fetch_add(1)) {
        job(i);
      }
    });
  }
  for (auto& t : pool) t.join();
}

double mean_of(const std::vector<double>& values) {
  double sum = 0.0;
  for (const double v : values) sum += v;
  return sum / static_cast<double>(values.size());
}

std::string format_csv(const std::vector<std::string>& header,
                       const std::vector<std::vector<double>>& rows,
                       const std::vector<std::uint64_t>& seeds) {
  std::ostringstream out;
  out.precision(10);
  out << "seed";
  for (const auto& h : header) out << ',' << h;
  out << '\n';
  for (std::size_t r = 0; r < rows.size(); ++r) {
    out << seeds[r];
    for (const double v : rows[r]) out << ',' << v;
    out << '\n';
  }
  return out.str();
}

json ttest_json(const std::string& a, const std::string& b,
                const metrics::TTestResult& r) {
  json j;
  j["a"] = a;
  j["b"] = b;
  j["t_stat"] = std::isfinite(r.t_stat) ? json(r.t_stat) : json("inf");
  j["significant"] = r.significant;
  j["degenerate_variance"] = r.degenerate_variance;
  return j;
}

}  // namespace

SyntheticBench make_bench(Scale scale, const BenchOptions& options) {
  BenchOptions opt = options;
  if (scale == Scale::tiny) {
    opt.spec.n_speakers = std::min(opt.spec.n_speakers, 6);
    opt.spec.n_productions = std::min(opt.spec.n_productions, 2);
    opt.spec.lines_per_speaker = std::min(opt.spec.lines_per_speaker, 30);
    opt.spec.n_unseen_speakers = std::min(opt.spec.n_unseen_speakers, 3);
    opt.vocab_cap = std::min(opt.vocab_cap, 220);
    opt.d_ctx = std::min(opt.d_ctx, 32);
  }

  SyntheticBench bench{
      corpus::generate_synthetic(opt.corpus_seed, opt.spec),
      bpe::BpeModel(),
      embed::Embedder(embed::EmbedderConfig{.d_ctx = opt.d_ctx,
                                            .backend = embed::Backend::builtin_hash,
                                            .include_keys = true,
                                            .external_path = {}}),
      {},
      {}};

  std::vector<std::string> texts;
  texts.reserve(bench.corpus.train.size());
  for (const auto& s : bench.corpus.train) texts.push_back(s.utterance);
  bench.tokenizer = bpe::BpeModel::train(
      texts, {.vocab_cap = opt.vocab_cap, .byte_fallback = false});

  bench.contextual_arch =
      model::ArchConfig::contextual_tiny(bench.tokenizer.vocab_size(), opt.d_ctx);
  bench.base_arch =
      model::match_width(model::ArchConfig::base_tiny(bench.tokenizer.vocab_size()),
                         model::param_count(bench.contextual_arch));
  return bench;
}

train::TrainConfig bench_train_config(Scale scale, std::uint64_t seed,
                                      train::ContextSource source,
                                      std::set<std::string> mask) {
  train::TrainConfig cfg;
  cfg.learning_rate = 5e-3;
  cfg.batch_tokens = scale == Scale::desk ? 2000 : 1200;
  cfg.max_epochs = scale == Scale::desk ? 14 : 4;
  cfg.patience = 5;
  cfg.seed = seed;
  cfg.context_source = source;
  cfg.metadata_mask = std::move(mask);
  return cfg;
}

model::ModelParameters train_arm(const SyntheticBench& bench,
                                 const model::ArchConfig& arch,
                                 const train::TrainConfig& cfg) {
  const auto params = model::init_params<float>(arch, cfg.seed);
  return train::train(params, bench.corpus, bench.pipeline(), cfg).params;
}

std::vector<std::uint64_t> recipe_seeds(std::optional<std::uint64_t> override_base) {
  const std::uint64_t base = override_base.value_or(101);
  return {base, base + 1, base + 2, base + 3, base + 4};
}

const std::vector<std::string>& recipe_names() {
  static const std::vector<std::string> names = {
      "rqa-synthetic", "rqb-synthetic", "rqc-synthetic", "appc-synthetic"};
  return names;
}

// ---------------------------------------------------------------------------
// Arm definitions shared by the rqa/rqb recipes
// ---------------------------------------------------------------------------

namespace {

struct Arm {
  std::string name;
  bool contextual;
  std::vector<std::string> mask_patterns;  // empty -> no context
};

const std::vector<Arm>& standard_arms() {
  static const std::vector<Arm> arms = {
      {"base", false, {}},
      {"lmcue_s", true, {"speaker.*"}},
      {"lmcue_p", true, {"production.*"}},
      {"lmcue_sp", true, {"speaker.*", "production.*"}},
  };
  return arms;
}

model::ModelParameters train_standard_arm(const SyntheticBench& bench,
                                          const Arm& arm, Scale scale,
                                          std::uint64_t seed) {
  const auto source = arm.contextual ? train::ContextSource::metadata
                                     : train::ContextSource::none;
  const auto mask = arm.contextual ? corpus::expand_mask(arm.mask_patterns)
                                   : std::set<std::string>{};
  const auto cfg = bench_train_config(scale, seed, source, mask);
  return train_arm(bench, arm.contextual ? bench.contextual_arch : bench.base_arch,
                   cfg);
}

}  // namespace

// ---------------------------------------------------------------------------
// rqa-synthetic: seen-speaker perplexity, contextual arms vs the
// parameter-matched base model
// ---------------------------------------------------------------------------

std::filesystem::path run_rqa_synthetic(const RecipeOptions& options) {
  std::filesystem::create_directories(options.out_dir);
  const SyntheticBench bench = make_bench(options.scale);
  corpus::save_corpus(bench.corpus, options.out_dir / "corpus.jsonl");
  bench.tokenizer.save(options.out_dir / "tokenizer.bpe");

  const auto seeds = recipe_seeds(options.seed_base);
  const auto& arms = standard_arms();
  std::vector<std::vector<double>> ppl(arms.size(),
                                       std::vector<double>(seeds.size(), 0.0));

  run_jobs(arms.size() * seeds.size(), options.threads, [&](std::size_t idx) {
    const std::size_t a = idx / seeds.size();
    const std::size_t s = idx % seeds.size();
    const Arm& arm = arms[a];
    const auto params = train_standard_arm(bench, arm, options.scale, seeds[s]);
    const auto source = arm.contextual ? train::ContextSource::metadata
                                       : train::ContextSource::none;
    const auto mask = arm.contextual ? corpus::expand_mask(arm.mask_patterns)
                                     : std::set<std::string>{};
    ppl[a][s] = scoring::split_perplexity(params, bench.pipeline(), bench.corpus,
                                          corpus::Split::test, source, mask)
                    .ppl;
  });

  json summary;
  summary["recipe"] = "rqa-synthetic";
  summary["seeds"] = seeds;
  json arms_json = json::object();
  for (std::size_t a = 0; a < arms.size(); ++a) {
    std::vector<std::vector<double>> rows;
    for (std::size_t s = 0; s < seeds.size(); ++s) rows.push_back({ppl[a][s]});
    write_file(options.out_dir / (arms[a].name + ".csv"),
               format_csv({"test_ppl"}, rows, seeds));
    arms_json[arms[a].name] = {{"test_ppl_mean", mean_of(ppl[a])},
                               {"test_ppl", ppl[a]}};
  }
  summary["arms"] = arms_json;

  json comparisons = json::array();
  for (std::size_t a = 1; a < arms.size(); ++a) {
    const auto r = metrics::compare_runs(ppl[0], ppl[a],
                                         metrics::Direction::a_greater);
    comparisons.push_back(ttest_json("base", arms[a].name, r));
  }
  summary["comparisons"] = comparisons;

  const auto path = options.out_dir / "summary.json";
  write_file(path, summary.dump(2) + "\n");
  return path;
}

// ---------------------------------------------------------------------------
// rqb-synthetic: zero-shot transfer to unseen speakers (perplexity + sMRR)
// ---------------------------------------------------------------------------

std::filesystem::path run_rqb_synthetic(const RecipeOptions& options) {
  std::filesystem::create_directories(options.out_dir);
  const SyntheticBench bench = make_bench(options.scale);
  corpus::save_corpus(bench.corpus, options.out_dir / "corpus.jsonl");
  bench.tokenizer.save(options.out_dir / "tokenizer.bpe");

  const auto seeds = recipe_seeds(options.seed_base);
  const auto& arms = standard_arms();
  std::vector<std::vector<double>> ppl(arms.size(),
                                       std::vector<double>(seeds.size(), 0.0));
  std::vector<std::vector<double>> smrr_values(
      arms.size(), std::vector<double>(seeds.size(), 0.0));

  run_jobs(arms.size() * seeds.size(), options.threads, [&](std::size_t idx) {
    const std::size_t a = idx / seeds.size();
    const std::size_t s = idx % seeds.size();
    const Arm& arm = arms[a];
    const auto params = train_standard_arm(bench, arm, options.scale, seeds[s]);
    const auto source = arm.contextual ? train::ContextSource::metadata
                                       : train::ContextSource::none;
    const auto mask = arm.contextual ? corpus::expand_mask(arm.mask_patterns)
                                     : std::set<std::string>{};
    const train::Pipeline pipeline = bench.pipeline();
    ppl[a][s] = scoring::split_perplexity(params, pipeline, bench.corpus,
                                          corpus::Split::test_unseen, source, mask)
                    .ppl;
    const auto sets = scoring::collect_speaker_sets(
        bench.corpus, corpus::Split::test_unseen, mask);
    const auto scorer = arm.contextual ? scoring::contextual_scorer(params, pipeline)
                                       : scoring::base_scorer(params, pipeline);
    smrr_values[a][s] = metrics::smrr(scoring::build_score_matrix(sets, scorer));
  });

  json summary;
  summary["recipe"] = "rqb-synthetic";
  summary["seeds"] = seeds;
  json arms_json = json::object();
  for (std::size_t a = 0; a < arms.size(); ++a) {
    std::vector<std::vector<double>> rows;
    for (std::size_t s = 0; s < seeds.size(); ++s) {
      rows.push_back({ppl[a][s], smrr_values[a][s]});
    }
    write_file(options.out_dir / (arms[a].name + ".csv"),
               format_csv({"test_unseen_ppl", "smrr"}, rows, seeds));
    arms_json[arms[a].name] = {{"test_unseen_ppl_mean", mean_of(ppl[a])},
                               {"smrr_mean", mean_of(smrr_values[a])},
                               {"test_unseen_ppl", ppl[a]},
                               {"smrr", smrr_values[a]}};
  }
  summary["arms"] = arms_json;

  json comparisons = json::array();
  for (std::size_t a = 1; a < arms.size(); ++a) {
    comparisons.push_back(ttest_json(
        "base", arms[a].name,
        metrics::compare_runs(ppl[0], ppl[a], metrics::Direction::a_greater)));
  }
  summary["comparisons"] = comparisons;

  const auto path = options.out_dir / "summary.json";
  write_file(path, summary.dump(2) + "\n");
  return path;
}

// ---------------------------------------------------------------------------
// rqc-synthetic: PMI of hypothesis streams under matched vs permuted contexts
// ---------------------------------------------------------------------------

std::filesystem::path run_rqc_synthetic(const RecipeOptions& options) {
  std::filesystem::create_directories(options.out_dir);
  BenchOptions bench_options;
  bench_options.corpus_seed = 2026;
  bench_options.spec.n_speakers = 16;
  bench_options.spec.n_productions = 4;
  bench_options.spec.lines_per_speaker = 100;
  bench_options.spec.marker_strength = 0.35;
  bench_options.spec.n_unseen_speakers = 0;
  const SyntheticBench bench = make_bench(options.scale, bench_options);
  corpus::save_corpus(bench.corpus, options.out_dir / "corpus.jsonl");
  bench.tokenizer.save(options.out_dir / "tokenizer.bpe");

  const auto seeds = recipe_seeds(options.seed_base);
  const std::set<std::string> mask = corpus::expand_mask({"*"});
  std::vector<double> matched(seeds.size(), 0.0), permuted(seeds.size(), 0.0);
  std::vector<double> matched_micro(seeds.size(), 0.0),
      permuted_micro(seeds.size(), 0.0);
  std::vector<double> matched_se(seeds.size(), 0.0), permuted_se(seeds.size(), 0.0);

  run_jobs(seeds.size(), options.threads, [&](std::size_t s) {
    const std::uint64_t seed = seeds[s];
    const auto ctx_params = train_arm(
        bench, bench.contextual_arch,
        bench_train_config(options.scale, seed, train::ContextSource::metadata,
                           mask));
    const auto base_params = train_arm(
        bench, bench.base_arch,
        bench_train_config(options.scale, seed, train::ContextSource::none));

    const metrics::Tandem tandem{&ctx_params, &base_params, &bench.embedder,
                                 &bench.tokenizer};
    const auto matched_items = scoring::pmi_items_for_split(
        bench.corpus, corpus::Split::test, mask, nullptr, std::nullopt);
    const auto permuted_items = scoring::pmi_items_for_split(
        bench.corpus, corpus::Split::test, mask, nullptr, seed ^ 0xc0ffee);

    const auto matched_report = metrics::corpus_pmi(tandem, matched_items, seed);
    const auto permuted_report = metrics::corpus_pmi(tandem, permuted_items, seed);
    matched[s] = matched_report.macro;
    matched_micro[s] = matched_report.micro;
    matched_se[s] = matched_report.stderr_macro;
    permuted[s] = permuted_report.macro;
    permuted_micro[s] = permuted_report.micro;
    permuted_se[s] = permuted_report.stderr_macro;
  });

  std::vector<std::vector<double>> rows;
  for (std::size_t s = 0; s < seeds.size(); ++s) {
    rows.push_back({matched[s], matched_micro[s], matched_se[s], permuted[s],
                    permuted_micro[s], permuted_se[s]});
  }
  write_file(options.out_dir / "pmi.csv",
             format_csv({"matched_macro", "matched_micro", "matched_stderr",
                         "permuted_macro", "permuted_micro", "permuted_stderr"},
                        rows, seeds));

  json summary;
  summary["recipe"] = "rqc-synthetic";
  summary["seeds"] = seeds;
  summary["matched"] = {{"macro_mean", mean_of(matched)},
                        {"micro_mean", mean_of(matched_micro)},
                        {"macro", matched}};
  summary["permuted"] = {{"macro_mean", mean_of(permuted)},
                         {"micro_mean", mean_of(permuted_micro)},
                         {"macro", permuted}};
  summary["comparisons"] = json::array(
      {ttest_json("matched", "permuted",
                  metrics::compare_runs(matched, permuted,
                                        metrics::Direction::a_greater))});
  const auto path = options.out_dir / "summary.json";
  write_file(path, summary.dump(2) + "\n");
  return path;
}

// ---------------------------------------------------------------------------
// appc-synthetic: past-dialogue pre-training against from-scratch training
// ---------------------------------------------------------------------------

std::filesystem::path run_appc_synthetic(const RecipeOptions& options) {
  std::filesystem::create_directories(options.out_dir);
  const bool desk = options.scale == Scale::desk;

  corpus::DialogueSpec dialogue_spec;
  dialogue_spec.n_docs = desk ? 160 : 30;
  dialogue_spec.lines_per_doc = 12;
  dialogue_spec.marker_strength = 0.5;
  const corpus::CorpusSplits pretrain_corpus =
      corpus::generate_synthetic_dialogue(3030, dialogue_spec);

  corpus::SyntheticSpec finetune_spec;
  finetune_spec.n_speakers = desk ? 12 : 6;
  finetune_spec.n_productions = 3;
  finetune_spec.lines_per_speaker = desk ? 40 : 20;
  finetune_spec.marker_strength = 0.6;
  finetune_spec.n_unseen_speakers = 0;
  const corpus::CorpusSplits finetune_corpus =
      corpus::generate_synthetic(2025, finetune_spec);

  std::vector<std::string> texts;
  for (const auto& s : pretrain_corpus.train) texts.push_back(s.utterance);
  const bpe::BpeModel tokenizer = bpe::BpeModel::train(
      texts, {.vocab_cap = desk ? 320 : 220, .byte_fallback = false});
  const int d_ctx = desk ? 48 : 32;
  const embed::Embedder embedder(
      embed::EmbedderConfig{.d_ctx = d_ctx,
                            .backend = embed::Backend::builtin_hash,
                            .include_keys = true,
                            .external_path = {}});
  const train::Pipeline pipeline{&tokenizer, &embedder};
  const model::ArchConfig arch =
      model::ArchConfig::contextual_tiny(tokenizer.vocab_size(), d_ctx);

  corpus::save_corpus(pretrain_corpus, options.out_dir / "pretrain_corpus.jsonl");
  corpus::save_corpus(finetune_corpus, options.out_dir / "finetune_corpus.jsonl");
  tokenizer.save(options.out_dir / "tokenizer.bpe");

  const auto seeds = recipe_seeds(options.seed_base);
  std::vector<double> pretrained_ppl(seeds.size(), 0.0);
  std::vector<double> scratch_ppl(seeds.size(), 0.0);

  run_jobs(seeds.size(), options.threads, [&](std::size_t s) {
    const std::uint64_t seed = seeds[s];
    auto pretrain_cfg = bench_train_config(options.scale, seed,
                                           train::ContextSource::past_dialogue);
    pretrain_cfg.max_epochs = desk ? 8 : 3;
    auto finetune_cfg = bench_train_config(options.scale, seed,
                                           train::ContextSource::metadata);

    const auto init = model::init_params<float>(arch, seed);
    const auto pretrained =
        train::train(init, pretrain_corpus, pipeline, pretrain_cfg).params;
    const auto finetuned =
        train::train(pretrained, finetune_corpus, pipeline, finetune_cfg);
    const auto scratch =
        train::train(init, finetune_corpus, pipeline, finetune_cfg);
    pretrained_ppl[s] = std::exp(finetuned.record.best_valid_loss);
    scratch_ppl[s] = std::exp(scratch.record.best_valid_loss);
  });

  std::vector<std::vector<double>> rows;
  for (std::size_t s = 0; s < seeds.size(); ++s) {
    rows.push_back({pretrained_ppl[s], scratch_ppl[s]});
  }
  write_file(options.out_dir / "valid_ppl.csv",
             format_csv({"pretrained_then_finetuned_ppl", "from_scratch_ppl"},
                        rows, seeds));

  json summary;
  summary["recipe"] = "appc-synthetic";
  summary["seeds"] = seeds;
  summary["pretrained_then_finetuned"] = {{"valid_ppl_mean", mean_of(pretrained_ppl)},
                                          {"valid_ppl", pretrained_ppl}};
  summary["from_scratch"] = {{"valid_ppl_mean", mean_of(scratch_ppl)},
                             {"valid_ppl", scratch_ppl}};
  summary["comparisons"] = json::array(
      {ttest_json("from_scratch", "pretrained_then_finetuned",
                  metrics::compare_runs(scratch_ppl, pretrained_ppl,
                                        metrics::Direction::a_greater))});
  const auto path = options.out_dir / "summary.json";
  write_file(path, summary.dump(2) + "\n");
  return path;
}

std::filesystem::path run_recipe(const std::string& name,
                                 const RecipeOptions& options) {
  if (name == "rqa-synthetic") return run_rqa_synthetic(options);
  if (name == "rqb-synthetic") return run_rqb_synthetic(options);
  if (name == "rqc-synthetic") return run_rqc_synthetic(options);
  if (name == "appc-synthetic") return run_appc_synthetic(options);
  throw UsageError("unknown recipe '" + name + "'");
}

}  // namespace ctxlm::recipes
