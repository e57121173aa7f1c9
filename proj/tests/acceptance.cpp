// Acceptance suite: one pass/fail line per criterion. Exit code 0 only if
// every criterion holds.
#include "ctxlm/corpus.hpp"
#include "ctxlm/embedder.hpp"
#include "ctxlm/metrics.hpp"
#include "ctxlm/model.hpp"
#include "ctxlm/recipes.hpp"
#include "ctxlm/scoring.hpp"
#include "ctxlm/tokenizer.hpp"
#include "ctxlm/trainer.hpp"
#include "oracles.hpp"

#include <chrono>
#include <cmath>
#include <cstdio>
#include <functional>
#include <sstream>
#include <thread>

using namespace ctxlm;

namespace {

int hw_threads() {
  return std::max(1u, std::thread::hardware_concurrency());
}

struct Check {
  bool ok = true;
  std::ostringstream detail;

  void expect(bool condition, const std::string& what) {
    if (!condition) {
      ok = false;
      detail << (detail.str().empty() ? "" : "; ") << "FAILED: " << what;
    }
  }
  void note(const std::string& what) {
    detail << (detail.str().empty() ? "" : "; ") << what;
  }
};

double seconds_since(std::chrono::steady_clock::time_point start) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - start)
      .count();
}

std::string fmt(double v) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.4g", v);
  return buf;
}

double mean_of(const std::vector<double>& v) {
  double s = 0.0;
  for (const double x : v) s += x;
  return s / static_cast<double>(v.size());
}

// ---------------------------------------------------------------------------
// 1. Gradient oracle
// ---------------------------------------------------------------------------

Check criterion_gradients() {
  Check check;
  const auto start = std::chrono::steady_clock::now();

  model::ArchConfig arch;
  arch.kind = model::Kind::contextual;
  arch.d_model_enc = 8;
  arch.n_layers_enc = 1;
  arch.heads_enc = 2;
  arch.ffn_enc = 16;
  arch.d_model_dec = 8;
  arch.n_layers_dec = 1;
  arch.heads_dec = 2;
  arch.ffn_dec = 16;
  arch.vocab_size = 16;
  arch.d_ctx = 8;
  arch.max_seq_len = 16;
  arch.dropout = 0.0f;

  embed::EmbedderConfig embed_cfg;
  embed_cfg.d_ctx = 8;
  const embed::Embedder embedder(embed_cfg);
  corpus::ContextSet ctx_set;
  ctx_set.set("speaker.profession", "chef");
  ctx_set.set("speaker.age", "");
  ctx_set.set("production.genre", "comedy");
  const auto ctx = embedder.embed_context_set(ctx_set);

  auto params = model::init_params<double>(arch, 2029);
  std::vector<model::BatchItem> batch;
  batch.push_back({ctx, {1, 4, 7, 11, 2}});
  batch.push_back({ctx, {1, 9, 9, 3, 14, 2}});

  const auto analytic = model::gradients<double>(params, batch);
  auto grads = analytic.grads;
  const auto grad_refs = model::tensor_refs(grads);
  auto param_refs = model::tensor_refs(params);

  // central differences with h = 1e-5 over EVERY parameter; relative error
  // uses a 1e-3 floor so true-zero gradients compare in absolute terms
  const double h = 1e-5;
  double max_rel = 0.0;
  std::int64_t checked = 0;
  for (std::size_t t = 0; t < param_refs.size(); ++t) {
    auto& ref = param_refs[t];
    for (std::int64_t i = 0; i < ref.size(); ++i) {
      const double saved = ref.data[i];
      ref.data[i] = saved + h;
      const double up = model::gradients<double>(params, batch).loss;
      ref.data[i] = saved - h;
      const double down = model::gradients<double>(params, batch).loss;
      ref.data[i] = saved;
      const double numeric = (up - down) / (2.0 * h);
      const double analytic_g = grad_refs[t].data[i];
      const double rel =
          std::abs(analytic_g - numeric) /
          std::max({std::abs(analytic_g), std::abs(numeric), 1e-3});
      max_rel = std::max(max_rel, rel);
      ++checked;
    }
  }
  const double elapsed = seconds_since(start);
  check.expect(max_rel <= 1e-4,
               "max relative error " + fmt(max_rel) + " > 1e-4");
  check.expect(elapsed < 120.0, "runtime " + fmt(elapsed) + "s >= 2 min");
  check.note(std::to_string(checked) + " params, max rel err " + fmt(max_rel) +
             ", " + fmt(elapsed) + "s");
  return check;
}

// ---------------------------------------------------------------------------
// 2. Uniform-model perplexity
// ---------------------------------------------------------------------------

Check criterion_uniform_ppl() {
  Check check;
  corpus::SyntheticSpec spec;
  spec.n_speakers = 6;
  spec.n_productions = 2;
  spec.lines_per_speaker = 30;
  const auto corpus_data = corpus::generate_synthetic(8, spec);
  std::vector<std::string> texts;
  for (const auto& s : corpus_data.train) texts.push_back(s.utterance);
  const auto tokenizer =
      bpe::BpeModel::train(texts, {.vocab_cap = 240, .byte_fallback = false});
  embed::EmbedderConfig embed_cfg;
  embed_cfg.d_ctx = 32;
  const embed::Embedder embedder(embed_cfg);
  const train::Pipeline pipeline{&tokenizer, &embedder};

  for (const bool contextual : {true, false}) {
    model::ArchConfig arch =
        contextual ? model::ArchConfig::contextual_tiny(tokenizer.vocab_size(), 32)
                   : model::ArchConfig::base_tiny(tokenizer.vocab_size());
    const auto zero = model::make_params<float>(arch);
    const auto result = scoring::split_perplexity(
        zero, pipeline, corpus_data, corpus::Split::test,
        contextual ? train::ContextSource::metadata : train::ContextSource::none,
        {});
    const double expected = arch.vocab_size;
    check.expect(std::abs(result.ppl - expected) <= 0.001 * expected,
                 std::string(contextual ? "contextual" : "base") + " ppl " +
                     fmt(result.ppl) + " vs vocab " + fmt(expected));
    check.note(std::string(contextual ? "contextual" : "base") + " ppl " +
               fmt(result.ppl) + " (vocab " + std::to_string(arch.vocab_size) +
               ")");
  }
  return check;
}

// ---------------------------------------------------------------------------
// 3. sMRR oracle equivalence
// ---------------------------------------------------------------------------

Check criterion_smrr_oracle() {
  Check check;
  Rng rng(40415);
  int mismatches = 0;
  for (int trial = 0; trial < 1000; ++trial) {
    metrics::ScoreMatrix matrix;
    matrix.scores.resize(10, 10);
    for (int j = 0; j < 10; ++j) {
      for (int i = 0; i < 10; ++i) {
        // a coarse value grid guarantees plenty of deliberate ties
        matrix.scores(j, i) = std::floor(rng.next_unit() * 5.0) * 0.5;
      }
    }
    const double lib = metrics::smrr(matrix);
    const double oracle = oracles::mean_reciprocal_rank(matrix.scores);
    if (std::abs(lib - oracle) > 1e-12) ++mismatches;
    for (int k = 0; k < 10; ++k) {
      std::vector<double> column(10);
      for (int j = 0; j < 10; ++j) column[static_cast<std::size_t>(j)] = matrix.scores(j, k);
      if (metrics::speaker_rr(matrix, k) !=
          oracles::reciprocal_rank(column, k)) {
        ++mismatches;
      }
    }
  }
  check.expect(mismatches == 0,
               std::to_string(mismatches) + " oracle disagreements");

  metrics::ScoreMatrix full_tie;
  full_tie.scores = MatD::Constant(10, 10, -7.5);
  check.expect(metrics::smrr(full_tie) == 0.1, "full tie must be exactly 1/n");
  check.note("1000 random 10x10 matrices incl. ties, full-tie = 1/n exact");
  return check;
}

// ---------------------------------------------------------------------------
// 4 + 5. RQA perplexity trend and RQB zero-shot sMRR (shared training runs)
// ---------------------------------------------------------------------------

struct RqaRqbResults {
  std::vector<double> base_ppl, sp_ppl;           // test split
  std::vector<double> base_smrr, sp_smrr;         // test_unseen split
  double seconds = 0.0;
};

RqaRqbResults run_rqa_rqb() {
  const auto start = std::chrono::steady_clock::now();
  const auto bench = recipes::make_bench(recipes::Scale::desk);
  const auto seeds = recipes::recipe_seeds();
  const auto mask = corpus::expand_mask({"speaker.*", "production.*"});

  RqaRqbResults out;
  out.base_ppl.resize(seeds.size());
  out.sp_ppl.resize(seeds.size());
  out.base_smrr.resize(seeds.size());
  out.sp_smrr.resize(seeds.size());

  std::atomic<std::size_t> next{0};
  auto worker = [&]() {
    for (std::size_t idx = next.fetch_add(1); idx < 2 * seeds.size();
         idx = next.fetch_add(1)) {
      const bool contextual = idx < seeds.size();
      const std::size_t s = idx % seeds.size();
      const auto cfg = recipes::bench_train_config(
          recipes::Scale::desk, seeds[s],
          contextual ? train::ContextSource::metadata : train::ContextSource::none,
          contextual ? mask : std::set<std::string>{});
      const auto params = recipes::train_arm(
          bench, contextual ? bench.contextual_arch : bench.base_arch, cfg);
      const train::Pipeline pipeline = bench.pipeline();

      const double ppl =
          scoring::split_perplexity(params, pipeline, bench.corpus,
                                    corpus::Split::test, cfg.context_source,
                                    cfg.metadata_mask)
              .ppl;
      const auto sets = scoring::collect_speaker_sets(
          bench.corpus, corpus::Split::test_unseen, mask);
      const auto scorer = contextual
                              ? scoring::contextual_scorer(params, pipeline)
                              : scoring::base_scorer(params, pipeline);
      const double smrr_value =
          metrics::smrr(scoring::build_score_matrix(sets, scorer));
      if (contextual) {
        out.sp_ppl[s] = ppl;
        out.sp_smrr[s] = smrr_value;
      } else {
        out.base_ppl[s] = ppl;
        out.base_smrr[s] = smrr_value;
      }
    }
  };
  std::vector<std::thread> pool;
  for (int t = 0; t < hw_threads(); ++t) pool.emplace_back(worker);
  for (auto& t : pool) t.join();
  out.seconds = seconds_since(start);
  return out;
}

Check criterion_rqa(const RqaRqbResults& results) {
  Check check;
  const double base_mean = mean_of(results.base_ppl);
  const double sp_mean = mean_of(results.sp_ppl);
  const double reduction = 100.0 * (base_mean - sp_mean) / base_mean;
  check.expect(sp_mean <= 0.95 * base_mean,
               "ppl reduction " + fmt(reduction) + "% < 5%");
  const auto ttest = metrics::compare_runs(results.base_ppl, results.sp_ppl,
                                           metrics::Direction::a_greater);
  check.expect(ttest.significant,
               "t = " + fmt(ttest.t_stat) + " <= 1.65 (df=4)");
  check.expect(results.seconds < 1800.0,
               "runtime " + fmt(results.seconds) + "s >= 30 min");
  check.note("base ppl " + fmt(base_mean) + ", contextual ppl " + fmt(sp_mean) +
             " (-" + fmt(reduction) + "%), t " + fmt(ttest.t_stat) + ", " +
             fmt(results.seconds) + "s");
  return check;
}

Check criterion_rqb(const RqaRqbResults& results) {
  Check check;
  const double sp_mean = mean_of(results.sp_smrr);
  check.expect(sp_mean >= 0.5, "contextual sMRR " + fmt(sp_mean) + " < 0.5");
  for (const double v : results.base_smrr) {
    check.expect(v == 0.1, "base sMRR " + fmt(v) + " != 1/10 exactly");
  }
  check.note("contextual sMRR " + fmt(sp_mean) + ", base sMRR exactly 0.1 on " +
             std::to_string(results.base_smrr.size()) + " seeds");
  return check;
}

// ---------------------------------------------------------------------------
// 6. RQC PMI: matched above zero, permuted compatible with zero
// ---------------------------------------------------------------------------

Check criterion_rqc() {
  Check check;
  recipes::BenchOptions options;
  options.corpus_seed = 2026;
  options.spec.n_speakers = 16;
  options.spec.n_productions = 4;
  options.spec.lines_per_speaker = 100;
  options.spec.marker_strength = 0.35;
  options.spec.n_unseen_speakers = 0;
  const auto bench = recipes::make_bench(recipes::Scale::desk, options);
  const auto seeds = recipes::recipe_seeds();
  const auto mask = corpus::expand_mask({"*"});

  std::vector<double> matched(seeds.size()), permuted(seeds.size());
  std::vector<double> permuted_se(seeds.size());
  std::atomic<std::size_t> next{0};
  auto worker = [&]() {
    for (std::size_t s = next.fetch_add(1); s < seeds.size();
         s = next.fetch_add(1)) {
      const auto ctx_params = recipes::train_arm(
          bench, bench.contextual_arch,
          recipes::bench_train_config(recipes::Scale::desk, seeds[s],
                                      train::ContextSource::metadata, mask));
      const auto base_params = recipes::train_arm(
          bench, bench.base_arch,
          recipes::bench_train_config(recipes::Scale::desk, seeds[s],
                                      train::ContextSource::none));
      const metrics::Tandem tandem{&ctx_params, &base_params, &bench.embedder,
                                   &bench.tokenizer};
      const auto matched_items = scoring::pmi_items_for_split(
          bench.corpus, corpus::Split::test, mask, nullptr, std::nullopt);
      const auto permuted_items = scoring::pmi_items_for_split(
          bench.corpus, corpus::Split::test, mask, nullptr, seeds[s] ^ 0xc0ffee);
      const auto matched_report =
          metrics::corpus_pmi(tandem, matched_items, seeds[s]);
      const auto permuted_report =
          metrics::corpus_pmi(tandem, permuted_items, seeds[s]);
      matched[s] = matched_report.macro;
      permuted[s] = permuted_report.macro;
      permuted_se[s] = permuted_report.stderr_macro;
    }
  };
  std::vector<std::thread> pool;
  for (int t = 0; t < hw_threads(); ++t) pool.emplace_back(worker);
  for (auto& t : pool) t.join();

  for (std::size_t s = 0; s < seeds.size(); ++s) {
    check.expect(matched[s] > 0.0, "matched macro PMI " + fmt(matched[s]) +
                                       " <= 0 (seed " +
                                       std::to_string(seeds[s]) + ")");
    check.expect(std::abs(permuted[s]) <= 3.0 * permuted_se[s],
                 "permuted macro " + fmt(permuted[s]) + " outside 3 x stderr " +
                     fmt(permuted_se[s]) + " (seed " +
                     std::to_string(seeds[s]) + ")");
  }
  const auto ttest =
      metrics::compare_runs(matched, permuted, metrics::Direction::a_greater);
  check.expect(ttest.significant,
               "matched vs permuted t = " + fmt(ttest.t_stat) + " <= 1.65");
  check.note("matched " + fmt(mean_of(matched)) + ", permuted " +
             fmt(mean_of(permuted)) + " (se " + fmt(mean_of(permuted_se)) +
             "), t " + fmt(ttest.t_stat));
  return check;
}

// ---------------------------------------------------------------------------
// 7. Lerp contract
// ---------------------------------------------------------------------------

Check criterion_lerp() {
  Check check;
  corpus::SyntheticSpec spec;
  spec.n_speakers = 4;
  spec.n_productions = 2;
  spec.lines_per_speaker = 20;
  const auto corpus_data = corpus::generate_synthetic(3, spec);
  std::vector<std::string> texts;
  for (const auto& s : corpus_data.train) texts.push_back(s.utterance);
  const auto tokenizer =
      bpe::BpeModel::train(texts, {.vocab_cap = 240, .byte_fallback = false});
  const auto arch = model::ArchConfig::base_tiny(tokenizer.vocab_size());
  const auto params = model::init_params<float>(arch, 33);

  double worst = 0.0;
  for (int i = 0; i < 20; ++i) {
    const auto tokens = tokenizer.encode(
        corpus_data.train[static_cast<std::size_t>(i)].utterance,
        {.add_bos = true, .add_eos = true});
    const auto lerp = train::lerp_scores(params, params, tokens);
    const auto ll = model::log_likelihood<float>(params, {}, tokens);
    for (std::size_t t = 0; t < lerp.per_token.size(); ++t) {
      worst = std::max(worst, std::abs(lerp.per_token[t] -
                                       static_cast<double>(ll.per_token[t])));
    }
  }
  check.expect(worst <= 1e-9,
               "self-interpolation deviates by " + fmt(worst) + " > 1e-9");

  // opposing one-hot models mix to (0.5, 0.5)
  model::ArchConfig two;
  two.kind = model::Kind::base;
  two.d_model_dec = 4;
  two.n_layers_dec = 1;
  two.heads_dec = 1;
  two.ffn_dec = 8;
  two.vocab_size = 2;
  two.max_seq_len = 4;
  two.dropout = 0.0f;
  two.tie_embeddings = false;
  auto one_hot_a = model::make_params<float>(two);
  one_hot_a.dec_ln.gain.setOnes();
  one_hot_a.tok_emb(0, 0) = 1.0f;
  one_hot_a.out_proj(0, 0) = 60.0f;
  one_hot_a.out_proj(0, 1) = -60.0f;
  auto one_hot_b = model::make_params<float>(two);
  one_hot_b.dec_ln.gain.setOnes();
  one_hot_b.tok_emb(0, 0) = 1.0f;
  one_hot_b.out_proj(0, 0) = -60.0f;
  one_hot_b.out_proj(0, 1) = 60.0f;
  const bpe::TokenSequence pair_tokens = {0, 0};
  const MatD mix = train::lerp_distributions(one_hot_a, one_hot_b, pair_tokens);
  check.expect(std::abs(mix(0, 0) - 0.5) <= 1e-9 &&
                   std::abs(mix(0, 1) - 0.5) <= 1e-9,
               "(1,0)+(0,1) mix is (" + fmt(mix(0, 0)) + "," + fmt(mix(0, 1)) +
                   ")");
  check.note("self-lerp max deviation " + fmt(worst) + ", hand case ok");
  return check;
}

// ---------------------------------------------------------------------------
// 8. Tokenizer
// ---------------------------------------------------------------------------

Check criterion_tokenizer() {
  Check check;
  const std::vector<std::string> corpus_texts = {
      "the quick brown fox jumps over the lazy dog",
      "pack my box with five dozen liquor jugs",
      "how vexingly quick daft zebras jump"};
  const auto model = bpe::BpeModel::train(
      corpus_texts, {.vocab_cap = 400, .byte_fallback = true});
  const auto model_again = bpe::BpeModel::train(
      corpus_texts, {.vocab_cap = 400, .byte_fallback = true});
  check.expect(model.to_text() == model_again.to_text(),
               "retraining is not byte-identical");

  Rng rng(808);
  const std::string alphabet = "abcdefghijklmnopqrstuvwxyz ',.!?-";
  int failures = 0;
  for (int trial = 0; trial < 10000; ++trial) {
    std::string text;
    const int len = static_cast<int>(rng.next_below(40));
    for (int i = 0; i < len; ++i) {
      text.push_back(alphabet[rng.next_below(alphabet.size())]);
    }
    if (trial % 7 == 0) text += " caf\xC3\xA9";  // exercise byte fallback
    const std::string normalized = corpus::normalize_text(text);
    if (model.decode(model.encode(normalized)) != normalized) ++failures;
  }
  check.expect(failures == 0,
               std::to_string(failures) + "/10000 round-trips failed");

  const auto abab =
      bpe::BpeModel::train({"abab", "abab"}, {.vocab_cap = 10, .byte_fallback = false});
  check.expect(!abab.merges().empty() &&
                   abab.merges()[0] == std::pair<std::string, std::string>("a", "b"),
               "first merge on abab corpus is not (a,b)");
  check.note("10000 round-trips, deterministic retrain, first merge (a,b)");
  return check;
}

// ---------------------------------------------------------------------------
// 9. Early stopping
// ---------------------------------------------------------------------------

Check criterion_early_stopping() {
  Check check;
  Rng rng(111);
  int mismatches = 0;
  for (int trial = 0; trial < 1000; ++trial) {
    const int patience = 1 + static_cast<int>(rng.next_below(5));
    const int len = 1 + static_cast<int>(rng.next_below(24));
    std::vector<double> losses(static_cast<std::size_t>(len));
    for (auto& l : losses) l = 1.0 + 0.2 * std::floor(rng.next_unit() * 10.0);

    train::EarlyStopper stopper(patience, 1e-5);
    int stopped_at = len;
    for (int e = 0; e < len; ++e) {
      stopper.update(losses[static_cast<std::size_t>(e)]);
      if (stopper.should_stop()) {
        stopped_at = e + 1;
        break;
      }
    }
    if (stopped_at != oracles::stopping_epoch(losses, patience, 1e-5)) {
      ++mismatches;
    }
  }
  check.expect(mismatches == 0,
               std::to_string(mismatches) + " stopping-epoch mismatches");

  // the default patience on a flat sequence
  const std::vector<double> flat = {3, 3, 3, 3, 3, 3};
  check.expect(oracles::stopping_epoch(flat, 5, 1e-5) == 6,
               "oracle disagrees on the flat sequence");
  train::EarlyStopper stopper(5, 1e-5);
  int stopped_at = 0;
  for (std::size_t e = 0; e < flat.size(); ++e) {
    stopper.update(flat[e]);
    if (stopper.should_stop()) {
      stopped_at = static_cast<int>(e) + 1;
      break;
    }
  }
  check.expect(stopped_at == 6, "patience-5 flat sequence stopped at " +
                                    std::to_string(stopped_at));
  check.note("1000 random sequences, patience 1..5, flat case stops at 6");
  return check;
}

// ---------------------------------------------------------------------------
// 10. Param matching
// ---------------------------------------------------------------------------

Check criterion_param_matching() {
  Check check;
  const std::int64_t target = model::param_count(model::ArchConfig::contextual_tiny(512));
  const auto matched = model::match_width(model::ArchConfig::base_tiny(512), target);
  const std::int64_t count = model::param_count(matched);
  check.expect(std::abs(count - target) * 100 <= target,
               "match_width lands " + fmt(100.0 * std::abs(count - target) /
                                          static_cast<double>(target)) +
                   "% away from the target");

  const auto split = model::param_count_split(model::ArchConfig::contextual_paper());
  const std::int64_t base_count = model::param_count(model::ArchConfig::base_paper());
  auto within = [](std::int64_t value, double target_m) {
    return std::abs(value - target_m * 1e6) <= 0.02 * target_m * 1e6;
  };
  check.expect(within(split.encoder, 38.0),
               "paper encoder " + fmt(split.encoder / 1e6) + "M vs 38M");
  check.expect(within(split.decoder, 121.0),
               "paper decoder " + fmt(split.decoder / 1e6) + "M vs 121M");
  check.expect(within(split.total, 159.0),
               "paper total " + fmt(split.total / 1e6) + "M vs 159M");
  check.expect(within(base_count, 159.0),
               "paper base " + fmt(base_count / 1e6) + "M vs 159M");
  check.note("tiny match gap " +
             fmt(100.0 * std::abs(count - target) / static_cast<double>(target)) +
             "%, paper enc/dec/total " + fmt(split.encoder / 1e6) + "/" +
             fmt(split.decoder / 1e6) + "/" + fmt(split.total / 1e6) +
             "M, base " + fmt(base_count / 1e6) + "M");
  return check;
}

// ---------------------------------------------------------------------------
// 11. Pre-training trend
// ---------------------------------------------------------------------------

Check criterion_pretraining_trend() {
  Check check;
  corpus::DialogueSpec dialogue_spec;
  dialogue_spec.n_docs = 160;
  dialogue_spec.lines_per_doc = 12;
  dialogue_spec.marker_strength = 0.5;
  const auto pretrain_corpus = corpus::generate_synthetic_dialogue(3030, dialogue_spec);

  corpus::SyntheticSpec finetune_spec;
  finetune_spec.n_speakers = 12;
  finetune_spec.n_productions = 3;
  finetune_spec.lines_per_speaker = 40;
  finetune_spec.marker_strength = 0.6;
  finetune_spec.n_unseen_speakers = 0;
  const auto finetune_corpus = corpus::generate_synthetic(2025, finetune_spec);

  std::vector<std::string> texts;
  for (const auto& s : pretrain_corpus.train) texts.push_back(s.utterance);
  const auto tokenizer =
      bpe::BpeModel::train(texts, {.vocab_cap = 320, .byte_fallback = false});
  embed::EmbedderConfig embed_cfg;
  embed_cfg.d_ctx = 48;
  const embed::Embedder embedder(embed_cfg);
  const train::Pipeline pipeline{&tokenizer, &embedder};
  const auto arch = model::ArchConfig::contextual_tiny(tokenizer.vocab_size(), 48);

  const auto seeds = recipes::recipe_seeds();
  std::vector<double> pretrained_ppl(seeds.size()), scratch_ppl(seeds.size());
  std::atomic<std::size_t> next{0};
  auto worker = [&]() {
    for (std::size_t s = next.fetch_add(1); s < seeds.size();
         s = next.fetch_add(1)) {
      auto pretrain_cfg = recipes::bench_train_config(
          recipes::Scale::desk, seeds[s], train::ContextSource::past_dialogue);
      pretrain_cfg.max_epochs = 8;
      const auto finetune_cfg = recipes::bench_train_config(
          recipes::Scale::desk, seeds[s], train::ContextSource::metadata);
      const auto init = model::init_params<float>(arch, seeds[s]);
      const auto pretrained =
          train::train(init, pretrain_corpus, pipeline, pretrain_cfg).params;
      pretrained_ppl[s] = std::exp(
          train::train(pretrained, finetune_corpus, pipeline, finetune_cfg)
              .record.best_valid_loss);
      scratch_ppl[s] = std::exp(
          train::train(init, finetune_corpus, pipeline, finetune_cfg)
              .record.best_valid_loss);
    }
  };
  std::vector<std::thread> pool;
  for (int t = 0; t < hw_threads(); ++t) pool.emplace_back(worker);
  for (auto& t : pool) t.join();

  const double pre = mean_of(pretrained_ppl);
  const double scratch = mean_of(scratch_ppl);
  check.expect(pre <= 0.98 * scratch,
               "pretrained " + fmt(pre) + " not 2% below scratch " + fmt(scratch));
  check.note("pretrained valid ppl " + fmt(pre) + " vs from-scratch " +
             fmt(scratch) + " (-" + fmt(100.0 * (scratch - pre) / scratch) +
             "%)");
  return check;
}

}  // namespace

int main() {
  struct Criterion {
    int id;
    const char* name;
    std::function<Check()> run;
  };

  // 4 and 5 share one set of training runs
  RqaRqbResults rqa_rqb;
  bool rqa_rqb_ready = false;
  auto ensure_rqa_rqb = [&]() {
    if (!rqa_rqb_ready) {
      rqa_rqb = run_rqa_rqb();
      rqa_rqb_ready = true;
    }
  };

  const std::vector<Criterion> criteria = {
      {1, "gradient oracle (finite differences)", criterion_gradients},
      {2, "uniform-model perplexity equals vocab size", criterion_uniform_ppl},
      {3, "sMRR matches the brute-force ranking oracle", criterion_smrr_oracle},
      {4, "synthetic seen-speaker perplexity trend",
       [&]() {
         ensure_rqa_rqb();
         return criterion_rqa(rqa_rqb);
       }},
      {5, "synthetic zero-shot sMRR on unseen speakers",
       [&]() {
         ensure_rqa_rqb();
         return criterion_rqb(rqa_rqb);
       }},
      {6, "synthetic PMI: matched positive, permuted null", criterion_rqc},
      {7, "lerp contract", criterion_lerp},
      {8, "tokenizer round-trip, determinism, first merge", criterion_tokenizer},
      {9, "early stopping oracle", criterion_early_stopping},
      {10, "parameter matching and paper-scale budget", criterion_param_matching},
      {11, "past-dialogue pre-training beats from-scratch",
       criterion_pretraining_trend},
  };

  int failures = 0;
  for (const auto& criterion : criteria) {
    Check check;
    try {
      check = criterion.run();
    } catch (const std::exception& e) {
      check.ok = false;
      check.note(std::string("exception: ") + e.what());
    }
    std::printf("[%2d] %-50s %s%s%s\n", criterion.id, criterion.name,
                check.ok ? "PASS" : "FAIL",
                check.detail.str().empty() ? "" : "  -- ",
                check.detail.str().c_str());
    std::fflush(stdout);
    if (!check.ok) ++failures;
  }
  if (failures > 0) {
    std::printf("%d criterion(s) failed\n", failures);
    return 1;
  }
  std::printf("all %zu criteria passed\n", criteria.size());
  return 0;
}
