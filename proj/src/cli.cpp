#include "ctxlm/cli.hpp"

#include "ctxlm/corpus.hpp"
#include "ctxlm/manifest.hpp"
#include "ctxlm/metrics.hpp"
#include "ctxlm/model.hpp"
#include "ctxlm/recipes.hpp"
#include "ctxlm/scoring.hpp"
#include "ctxlm/tokenizer.hpp"
#include "ctxlm/trainer.hpp"

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include <atomic>
#include <cstdlib>
#include <fstream>
#include <iostream>
#include <sstream>
#include <thread>

namespace ctxlm::cli {

using json = nlohmann::json;

namespace {

json load_config_file(const std::string& path) {
  if (path.empty()) return json::object();
  std::ifstream in(path);
  if (!in) throw UsageError("cannot open config file: " + path);
  try {
    return json::parse(in);
  } catch (const json::exception& e) {
    throw ParseError("config file " + path + ": " + e.what());
  }
}

train::TrainConfig train_config_from(const json& config) {
  if (config.contains("train")) {
    return train::TrainConfig::from_json(config["train"]);
  }
  return {};
}

embed::EmbedderConfig embedder_config_from(const json& config, int default_d_ctx) {
  embed::EmbedderConfig cfg;
  cfg.d_ctx = default_d_ctx;
  if (!config.contains("embedder")) return cfg;
  const json& e = config["embedder"];
  cfg.d_ctx = e.value("d_ctx", cfg.d_ctx);
  if (e.contains("backend")) {
    const std::string backend = e["backend"].get<std::string>();
    if (backend == "builtin_hash") {
      cfg.backend = embed::Backend::builtin_hash;
    } else if (backend == "external") {
      cfg.backend = embed::Backend::external;
    } else {
      throw UsageError("unknown embedder backend '" + backend + "'");
    }
  }
  cfg.include_keys = e.value("include_keys", cfg.include_keys);
  if (e.contains("external_path")) {
    cfg.external_path = e["external_path"].get<std::string>();
  }
  return cfg;
}

model::ArchConfig arch_from(const json& config, const std::string& preset,
                            int vocab_size, int d_ctx) {
  model::ArchConfig arch;
  if (config.contains("arch")) {
    json arch_json = config["arch"];
    arch_json["vocab_size"] = vocab_size;
    arch = model::ArchConfig::from_json(arch_json);
  } else if (preset == "tiny-contextual") {
    arch = model::ArchConfig::contextual_tiny(vocab_size, d_ctx);
  } else if (preset == "tiny-base") {
    arch = model::ArchConfig::base_tiny(vocab_size);
  } else if (preset == "paper-contextual") {
    arch = model::ArchConfig::contextual_paper();
    arch.vocab_size = vocab_size;
  } else if (preset == "paper-base") {
    arch = model::ArchConfig::base_paper();
    arch.vocab_size = vocab_size;
  } else {
    throw UsageError("unknown arch preset '" + preset + "'");
  }
  arch.validate();
  return arch;
}

train::ContextSource parse_source(const std::string& name) {
  const auto source = train::context_source_from_name(name);
  if (!source) throw UsageError("unknown context source '" + name + "'");
  return *source;
}

std::set<std::string> mask_from(const std::vector<std::string>& patterns) {
  if (patterns.empty()) return {};
  return corpus::expand_mask(patterns);
}

corpus::Split parse_split(const std::string& name) {
  const auto split = corpus::split_from_name(name);
  if (!split) throw UsageError("unknown split '" + name + "'");
  return *split;
}

void write_text(const std::filesystem::path& path, const std::string& data) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw ParseError("cannot write " + path.string());
  out << data;
}

struct TrainInvocation {
  std::string corpus_path;
  std::string bpe_path;
  std::string config_path;
  std::string out_path;
  std::string context_source;
  std::vector<std::string> keys;
  std::uint64_t seed = 0;
  bool seed_given = false;
};

void add_train_flags(CLI::App* cmd, TrainInvocation& inv) {
  cmd->add_option("--corpus", inv.corpus_path, "corpus JSONL file")->required();
  cmd->add_option("--bpe", inv.bpe_path, "trained BPE model file")->required();
  cmd->add_option("--config", inv.config_path,
                  "JSON config file ({\"arch\", \"train\", \"embedder\"})");
  cmd->add_option("--out", inv.out_path, "output checkpoint path")->required();
  cmd->add_option("--context-source", inv.context_source,
                  "past_dialogue | metadata | none");
  cmd->add_option("--keys", inv.keys,
                  "metadata mask patterns (speaker.*, production.*, exact keys)");
  cmd->add_option("--seed", inv.seed, "run seed")->each([&](const std::string&) {
    inv.seed_given = true;
  });
}

struct TrainSetup {
  corpus::CorpusSplits corpus;
  bpe::BpeModel tokenizer;
  embed::Embedder embedder;
  train::TrainConfig cfg;
  json config;

  TrainSetup(const TrainInvocation& inv, train::ContextSource default_source)
      : corpus(corpus::load_corpus(inv.corpus_path)),
        tokenizer(bpe::BpeModel::load(inv.bpe_path)),
        embedder(embedder_config_from(load_config_file(inv.config_path), 384)),
        cfg(),
        config(load_config_file(inv.config_path)) {
    cfg = train_config_from(config);
    cfg.context_source = default_source;
    if (!inv.context_source.empty()) {
      cfg.context_source = parse_source(inv.context_source);
    }
    if (!inv.keys.empty()) cfg.metadata_mask = mask_from(inv.keys);
    if (inv.seed_given) cfg.seed = inv.seed;
  }

  train::Pipeline pipeline() const { return {&tokenizer, &embedder}; }
};

void emit_train_outputs(const TrainInvocation& inv, const std::string& command,
                        const train::TrainResult& result) {
  model::save_checkpoint(result.params, inv.out_path);
  const std::filesystem::path record_path =
      std::filesystem::path(inv.out_path).concat(".runrecord.csv");
  write_text(record_path, result.record.to_csv());

  json config_snapshot = json::parse(result.record.config_json);
  manifest::RunManifest run;
  run.command = command;
  run.config = &config_snapshot;
  run.seed = config_snapshot.value("seed", std::uint64_t{0});
  run.inputs = {inv.corpus_path, inv.bpe_path};
  run.outputs = {inv.out_path, record_path};
  manifest::write_manifest(run, inv.out_path);

  std::cout << "best_epoch " << result.record.best_epoch << "\n"
            << "best_valid_loss " << result.record.best_valid_loss << "\n"
            << "checkpoint " << inv.out_path << "\n";
}

// Shared flags for the tandem-scoring subcommands (score-pmi, token-deltas).
struct TandemInvocation {
  std::string corpus_path, bpe_path, ctx_ckpt, base_ckpt, split = "test";
  std::vector<std::string> keys;
};

void add_tandem_flags(CLI::App* cmd, TandemInvocation& inv) {
  cmd->add_option("--corpus", inv.corpus_path)->required();
  cmd->add_option("--bpe", inv.bpe_path)->required();
  cmd->add_option("--ctx-ckpt", inv.ctx_ckpt, "contextual model checkpoint")
      ->required();
  cmd->add_option("--base-ckpt", inv.base_ckpt, "base model checkpoint")
      ->required();
  cmd->add_option("--split", inv.split, "corpus split (default test)");
  cmd->add_option("--keys", inv.keys, "metadata mask patterns");
}

int dispatch(CLI::App& app, int argc, const char* const* argv) {
  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    // CLI11 has its own exit-code scheme; fold every parse failure into the
    // documented usage code.
    const int code = app.exit(e);
    return code == 0 ? 0 : 1;
  }
  return 0;
}

}  // namespace

int run(int argc, const char* const* argv) {
  CLI::App app{"context-conditioned language modeling toolkit"};
  app.require_subcommand(1);
  int exit_code = 0;

  // ------------------------------------------------------------------ preprocess
  struct {
    std::string in, out, synonyms;
    bool drop_unannotated = false;
  } pre;
  {
    auto* cmd = app.add_subcommand("preprocess",
                                   "normalize a raw JSONL corpus");
    cmd->add_option("--in", pre.in, "raw corpus JSONL")->required();
    cmd->add_option("--out", pre.out, "normalized corpus JSONL")->required();
    cmd->add_option("--synonyms", pre.synonyms, "synonym table TSV");
    cmd->add_flag("--drop-unannotated", pre.drop_unannotated,
                  "drop samples whose speaker profile is entirely empty");
    cmd->callback([&]() {
      corpus::LoadOptions options;
      options.drop_unannotated = pre.drop_unannotated;
      corpus::SynonymTable table;
      if (!pre.synonyms.empty()) {
        table = corpus::SynonymTable::load(pre.synonyms);
        options.synonyms = &table;
      }
      const auto corpus_data = corpus::load_corpus(pre.in, options);
      corpus::save_corpus(corpus_data, pre.out);
      manifest::RunManifest run;
      run.command = "preprocess";
      run.inputs = {pre.in};
      run.outputs = {pre.out};
      manifest::write_manifest(run, pre.out);
      std::cout << "train " << corpus_data.train.size() << "\nvalid "
                << corpus_data.valid.size() << "\ntest "
                << corpus_data.test.size() << "\ntest_unseen "
                << corpus_data.test_unseen.size() << "\n";
    });
  }

  // ------------------------------------------------------------------ train-bpe
  struct {
    std::string in, out, split = "train";
    int vocab_cap = 8000;
    bool no_byte_fallback = false;
  } bpe_cmd;
  {
    auto* cmd = app.add_subcommand("train-bpe", "train the subword model");
    cmd->add_option("--in", bpe_cmd.in, "corpus JSONL")->required();
    cmd->add_option("--out", bpe_cmd.out, "output model file")->required();
    cmd->add_option("--vocab-cap", bpe_cmd.vocab_cap, "vocabulary cap");
    cmd->add_option("--split", bpe_cmd.split, "split to train on (default train)");
    cmd->add_flag("--no-byte-fallback", bpe_cmd.no_byte_fallback);
    cmd->callback([&]() {
      const auto corpus_data = corpus::load_corpus(bpe_cmd.in);
      std::vector<std::string> texts;
      for (const auto& s : corpus_data.split(parse_split(bpe_cmd.split))) {
        texts.push_back(s.utterance);
      }
      const auto model = bpe::BpeModel::train(
          texts,
          {.vocab_cap = bpe_cmd.vocab_cap, .byte_fallback = !bpe_cmd.no_byte_fallback});
      model.save(bpe_cmd.out);
      manifest::RunManifest run;
      run.command = "train-bpe";
      run.inputs = {bpe_cmd.in};
      run.outputs = {bpe_cmd.out};
      manifest::write_manifest(run, bpe_cmd.out);
      std::cout << "vocab_size " << model.vocab_size() << "\nmerges "
                << model.merges().size() << "\n";
    });
  }

  // ------------------------------------------------------------------ pretrain
  struct : TrainInvocation {
    std::string arch_preset = "tiny-contextual";
  } pretrain;
  {
    auto* cmd = app.add_subcommand(
        "pretrain", "train a model from scratch (past-dialogue context by default)");
    add_train_flags(cmd, pretrain);
    cmd->add_option("--arch-preset", pretrain.arch_preset,
                    "tiny-contextual | tiny-base | paper-contextual | paper-base");
    cmd->callback([&]() {
      TrainSetup setup(pretrain, train::ContextSource::past_dialogue);
      const auto arch = arch_from(setup.config, pretrain.arch_preset,
                                  setup.tokenizer.vocab_size(),
                                  setup.embedder.config().d_ctx);
      if (arch.kind == model::Kind::base) {
        setup.cfg.context_source = train::ContextSource::none;
      }
      const auto params = model::init_params<float>(arch, setup.cfg.seed);
      const auto result =
          train::train(params, setup.corpus, setup.pipeline(), setup.cfg);
      emit_train_outputs(pretrain, "pretrain", result);
    });
  }

  // ------------------------------------------------------------------ finetune
  struct : TrainInvocation {
    std::string init;
  } finetune;
  {
    auto* cmd = app.add_subcommand(
        "finetune", "continue training a checkpoint (metadata context by default)");
    add_train_flags(cmd, finetune);
    cmd->add_option("--init", finetune.init, "initial checkpoint")->required();
    cmd->callback([&]() {
      TrainSetup setup(finetune, train::ContextSource::metadata);
      const auto params = model::load_checkpoint(finetune.init);
      if (params.arch.kind == model::Kind::base) {
        setup.cfg.context_source = train::ContextSource::none;
      }
      const auto result =
          train::train(params, setup.corpus, setup.pipeline(), setup.cfg);
      emit_train_outputs(finetune, "finetune", result);
    });
  }

  // ------------------------------------------------------------ speaker-finetune
  struct : TrainInvocation {
    std::string init, speaker, out_dir;
  } spft;
  {
    auto* cmd = app.add_subcommand(
        "speaker-finetune",
        "two-stage adaptation: full train split, then one speaker's lines");
    cmd->add_option("--corpus", spft.corpus_path)->required();
    cmd->add_option("--bpe", spft.bpe_path)->required();
    cmd->add_option("--config", spft.config_path);
    cmd->add_option("--init", spft.init, "initial checkpoint")->required();
    cmd->add_option("--speaker", spft.speaker, "speaker id")->required();
    cmd->add_option("--out-dir", spft.out_dir)->required();
    cmd->add_option("--seed", spft.seed)->each([&](const std::string&) {
      spft.seed_given = true;
    });
    cmd->callback([&]() {
      spft.out_path = spft.out_dir;  // for TrainSetup only
      TrainSetup setup(spft, train::ContextSource::none);
      const auto params = model::load_checkpoint(spft.init);
      const auto result = train::speaker_finetune_pipeline(
          params, setup.corpus, spft.speaker, setup.pipeline(), setup.cfg);
      std::filesystem::create_directories(spft.out_dir);
      const auto ft1_path = std::filesystem::path(spft.out_dir) / "ft1.ckpt";
      const auto sp_path = std::filesystem::path(spft.out_dir) / "sp.ckpt";
      model::save_checkpoint(result.ft1, ft1_path);
      model::save_checkpoint(result.sp, sp_path);
      write_text(std::filesystem::path(spft.out_dir) / "ft1.runrecord.csv",
                 result.ft1_record.to_csv());
      write_text(std::filesystem::path(spft.out_dir) / "sp.runrecord.csv",
                 result.sp_record.to_csv());
      json config_snapshot = json::parse(result.sp_record.config_json);
      manifest::RunManifest run;
      run.command = "speaker-finetune";
      run.config = &config_snapshot;
      run.seed = setup.cfg.seed;
      run.inputs = {spft.corpus_path, spft.bpe_path, spft.init};
      run.outputs = {ft1_path, sp_path};
      manifest::write_manifest(run, sp_path);
      std::cout << "ft1 " << ft1_path.string() << "\nsp " << sp_path.string()
                << "\n";
    });
  }

  // ------------------------------------------------------------------ score-ppl
  struct {
    std::string corpus_path, bpe_path, ckpt, split = "test", context_source, out;
    std::vector<std::string> keys;
    int threads = 1;
  } ppl_cmd;
  {
    auto* cmd = app.add_subcommand("score-ppl", "perplexity over a split");
    cmd->add_option("--corpus", ppl_cmd.corpus_path)->required();
    cmd->add_option("--bpe", ppl_cmd.bpe_path)->required();
    cmd->add_option("--ckpt", ppl_cmd.ckpt)->required();
    cmd->add_option("--split", ppl_cmd.split);
    cmd->add_option("--context-source", ppl_cmd.context_source);
    cmd->add_option("--keys", ppl_cmd.keys);
    cmd->add_option("--out", ppl_cmd.out, "per-sample CSV path");
    cmd->add_option("--threads", ppl_cmd.threads);
    cmd->callback([&]() {
      const auto corpus_data = corpus::load_corpus(ppl_cmd.corpus_path);
      const auto tokenizer = bpe::BpeModel::load(ppl_cmd.bpe_path);
      const auto params = model::load_checkpoint(ppl_cmd.ckpt);
      const embed::Embedder embedder(
          embed::EmbedderConfig{.d_ctx = std::max(params.arch.d_ctx, 8),
                                .backend = embed::Backend::builtin_hash,
                                .include_keys = true,
                                .external_path = {}});
      const train::Pipeline pipeline{&tokenizer, &embedder};
      auto source = params.arch.kind == model::Kind::contextual
                        ? train::ContextSource::metadata
                        : train::ContextSource::none;
      if (!ppl_cmd.context_source.empty()) {
        source = parse_source(ppl_cmd.context_source);
      }
      const auto result = scoring::split_perplexity(
          params, pipeline, corpus_data, parse_split(ppl_cmd.split), source,
          mask_from(ppl_cmd.keys), ppl_cmd.threads);
      if (!ppl_cmd.out.empty()) {
        std::ostringstream csv;
        csv.precision(10);
        csv << "sample_id,n_tokens,ppl\n";
        for (std::size_t i = 0; i < result.sample_ids.size(); ++i) {
          csv << result.sample_ids[i] << ',' << result.sample_tokens[i] << ','
              << result.sample_ppl[i] << '\n';
        }
        write_text(ppl_cmd.out, csv.str());
      }
      std::cout.precision(10);
      std::cout << "ppl " << result.ppl << "\ntokens " << result.tokens << "\n";
    });
  }

  // ------------------------------------------------------------------ score-smrr
  struct {
    std::string scores, corpus_path, bpe_path, ckpt, split = "test_unseen",
                out_matrix;
    std::vector<std::string> keys;
    bool mean = false;
    int threads = 1;
  } smrr_cmd;
  {
    auto* cmd = app.add_subcommand(
        "score-smrr", "speaker mean reciprocal rank (pessimistic ties)");
    cmd->alias("smrr");
    cmd->add_option("--scores", smrr_cmd.scores,
                    "precomputed score matrix CSV (skips model scoring)");
    cmd->add_option("--corpus", smrr_cmd.corpus_path);
    cmd->add_option("--bpe", smrr_cmd.bpe_path);
    cmd->add_option("--ckpt", smrr_cmd.ckpt);
    cmd->add_option("--split", smrr_cmd.split);
    cmd->add_option("--keys", smrr_cmd.keys);
    cmd->add_flag("--mean", smrr_cmd.mean,
                  "score utterance sets by mean instead of total log-likelihood");
    cmd->add_option("--out-matrix", smrr_cmd.out_matrix, "score matrix CSV path");
    cmd->add_option("--threads", smrr_cmd.threads);
    cmd->callback([&]() {
      metrics::ScoreMatrix matrix;
      if (!smrr_cmd.scores.empty()) {
        std::ifstream in(smrr_cmd.scores);
        if (!in) throw ParseError("cannot open " + smrr_cmd.scores);
        matrix = metrics::ScoreMatrix::from_csv(in);
      } else {
        if (smrr_cmd.corpus_path.empty() || smrr_cmd.bpe_path.empty() ||
            smrr_cmd.ckpt.empty()) {
          throw UsageError(
              "score-smrr needs either --scores or --corpus/--bpe/--ckpt");
        }
        const auto corpus_data = corpus::load_corpus(smrr_cmd.corpus_path);
        const auto tokenizer = bpe::BpeModel::load(smrr_cmd.bpe_path);
        const auto params = model::load_checkpoint(smrr_cmd.ckpt);
        const embed::Embedder embedder(
            embed::EmbedderConfig{.d_ctx = std::max(params.arch.d_ctx, 8),
                                  .backend = embed::Backend::builtin_hash,
                                  .include_keys = true,
                                  .external_path = {}});
        const train::Pipeline pipeline{&tokenizer, &embedder};
        const auto sets = scoring::collect_speaker_sets(
            corpus_data, parse_split(smrr_cmd.split), mask_from(smrr_cmd.keys));
        const auto scorer =
            params.arch.kind == model::Kind::contextual
                ? scoring::contextual_scorer(params, pipeline, !smrr_cmd.mean)
                : scoring::base_scorer(params, pipeline, !smrr_cmd.mean);
        matrix = scoring::build_score_matrix(sets, scorer, smrr_cmd.threads);
        if (!smrr_cmd.out_matrix.empty()) {
          write_text(smrr_cmd.out_matrix, matrix.to_csv());
        }
      }
      std::cout.precision(10);
      std::cout << "smrr " << metrics::smrr(matrix) << "\nspeakers "
                << matrix.n() << "\n";
    });
  }

  // ------------------------------------------------------------------ score-pmi
  struct : TandemInvocation {
    std::string hyps, out = "pmi";
    std::uint64_t permute_seed = 0;
    bool permute = false;
    std::uint64_t run_seed = 0;
  } pmi_cmd;
  {
    auto* cmd = app.add_subcommand(
        "score-pmi", "context-specificity of hypotheses under a model tandem");
    add_tandem_flags(cmd, pmi_cmd);
    cmd->add_option("--hyps", pmi_cmd.hyps,
                    "hypotheses JSONL ({\"sample_id\", \"hypothesis\"}); "
                    "defaults to the utterances themselves");
    cmd->add_option("--permute-contexts", pmi_cmd.permute_seed,
                    "shuffle contexts across samples with this seed")
        ->each([&](const std::string&) { pmi_cmd.permute = true; });
    cmd->add_option("--run-seed", pmi_cmd.run_seed, "label recorded in reports");
    cmd->add_option("--out", pmi_cmd.out, "output prefix (default 'pmi')");
    cmd->callback([&]() {
      const auto corpus_data = corpus::load_corpus(pmi_cmd.corpus_path);
      const auto tokenizer = bpe::BpeModel::load(pmi_cmd.bpe_path);
      const auto ctx_params = model::load_checkpoint(pmi_cmd.ctx_ckpt);
      const auto base_params = model::load_checkpoint(pmi_cmd.base_ckpt);
      const embed::Embedder embedder(
          embed::EmbedderConfig{.d_ctx = std::max(ctx_params.arch.d_ctx, 8),
                                .backend = embed::Backend::builtin_hash,
                                .include_keys = true,
                                .external_path = {}});
      const metrics::Tandem tandem{&ctx_params, &base_params, &embedder,
                                   &tokenizer};
      std::map<std::string, std::string> hyps;
      const std::map<std::string, std::string>* hyps_ptr = nullptr;
      if (!pmi_cmd.hyps.empty()) {
        hyps = scoring::load_hypotheses(pmi_cmd.hyps);
        hyps_ptr = &hyps;
      }
      const auto items = scoring::pmi_items_for_split(
          corpus_data, parse_split(pmi_cmd.split), mask_from(pmi_cmd.keys),
          hyps_ptr,
          pmi_cmd.permute ? std::optional<std::uint64_t>(pmi_cmd.permute_seed)
                          : std::nullopt);
      const auto report = metrics::corpus_pmi(tandem, items, pmi_cmd.run_seed);
      write_text(pmi_cmd.out + ".csv", report.to_csv());
      write_text(pmi_cmd.out + ".summary.json", report.summary_json() + "\n");
      manifest::RunManifest run;
      run.command = "score-pmi";
      run.seed = pmi_cmd.run_seed;
      run.inputs = {pmi_cmd.corpus_path, pmi_cmd.bpe_path, pmi_cmd.ctx_ckpt,
                    pmi_cmd.base_ckpt};
      run.outputs = {pmi_cmd.out + ".csv", pmi_cmd.out + ".summary.json"};
      manifest::write_manifest(run, pmi_cmd.out);
      std::cout.precision(10);
      std::cout << "pmi_macro " << report.macro << "\npmi_micro " << report.micro
                << "\nsegments " << report.n() << "\nstderr "
                << report.stderr_macro << "\n";
    });
  }

  // ------------------------------------------------------------------ token-deltas
  struct : TandemInvocation {
    std::string out = "token_deltas.json";
    int top_k = 10;
    int min_words = 4;
    std::int64_t min_count = 3;
  } deltas_cmd;
  {
    auto* cmd = app.add_subcommand(
        "token-deltas",
        "tokens and segments whose likelihood moves most under context");
    add_tandem_flags(cmd, deltas_cmd);
    cmd->add_option("--top-k", deltas_cmd.top_k);
    cmd->add_option("--min-words", deltas_cmd.min_words,
                    "segment word-length filter");
    cmd->add_option("--min-count", deltas_cmd.min_count,
                    "token occurrence filter");
    cmd->add_option("--out", deltas_cmd.out);
    cmd->callback([&]() {
      const auto corpus_data = corpus::load_corpus(deltas_cmd.corpus_path);
      const auto tokenizer = bpe::BpeModel::load(deltas_cmd.bpe_path);
      const auto ctx_params = model::load_checkpoint(deltas_cmd.ctx_ckpt);
      const auto base_params = model::load_checkpoint(deltas_cmd.base_ckpt);
      const embed::Embedder embedder(
          embed::EmbedderConfig{.d_ctx = std::max(ctx_params.arch.d_ctx, 8),
                                .backend = embed::Backend::builtin_hash,
                                .include_keys = true,
                                .external_path = {}});
      const metrics::Tandem tandem{&ctx_params, &base_params, &embedder,
                                   &tokenizer};
      const auto items = scoring::pmi_items_for_split(
          corpus_data, parse_split(deltas_cmd.split), mask_from(deltas_cmd.keys));
      metrics::TokenDeltaOptions options;
      options.top_k = deltas_cmd.top_k;
      options.min_words = deltas_cmd.min_words;
      options.min_count = deltas_cmd.min_count;
      const auto report = metrics::token_delta_report(tandem, items, options);
      write_text(deltas_cmd.out, report.to_json() + "\n");
      std::cout << "report " << deltas_cmd.out << "\ndegenerate "
                << (report.degenerate ? 1 : 0) << "\n";
    });
  }

  // ------------------------------------------------------------------ lerp-score
  struct {
    std::string corpus_path, bpe_path, ckpt_a, ckpt_b, split = "test", out;
    double weight = 0.5;
  } lerp_cmd;
  {
    auto* cmd = app.add_subcommand(
        "lerp-score", "perplexity of the probability-space model interpolation");
    cmd->add_option("--corpus", lerp_cmd.corpus_path)->required();
    cmd->add_option("--bpe", lerp_cmd.bpe_path)->required();
    cmd->add_option("--ckpt-a", lerp_cmd.ckpt_a)->required();
    cmd->add_option("--ckpt-b", lerp_cmd.ckpt_b)->required();
    cmd->add_option("--split", lerp_cmd.split);
    cmd->add_option("--lerp-weight", lerp_cmd.weight, "weight on model A");
    cmd->add_option("--out", lerp_cmd.out, "per-sample CSV path");
    cmd->callback([&]() {
      const auto corpus_data = corpus::load_corpus(lerp_cmd.corpus_path);
      const auto tokenizer = bpe::BpeModel::load(lerp_cmd.bpe_path);
      const auto a = model::load_checkpoint(lerp_cmd.ckpt_a);
      const auto b = model::load_checkpoint(lerp_cmd.ckpt_b);
      const auto split = parse_split(lerp_cmd.split);
      const auto& samples = corpus_data.split(split);
      if (samples.empty()) throw EmptySplit(lerp_cmd.split);
      std::vector<double> all_logprobs;
      std::ostringstream csv;
      csv.precision(10);
      csv << "sample_id,n_tokens,ppl\n";
      for (std::size_t i = 0; i < samples.size(); ++i) {
        const auto tokens =
            tokenizer.encode(samples[i].utterance, {.add_bos = true, .add_eos = true});
        const auto scores = train::lerp_scores(a, b, tokens, lerp_cmd.weight);
        all_logprobs.insert(all_logprobs.end(), scores.per_token.begin(),
                            scores.per_token.end());
        if (!scores.per_token.empty()) {
          csv << scoring::sample_id(split, i) << ',' << scores.per_token.size()
              << ',' << metrics::perplexity(scores.per_token) << '\n';
        }
      }
      if (!lerp_cmd.out.empty()) write_text(lerp_cmd.out, csv.str());
      std::cout.precision(10);
      std::cout << "ppl " << metrics::perplexity(all_logprobs) << "\ntokens "
                << all_logprobs.size() << "\n";
    });
  }

  // ------------------------------------------------------------------ ablate-metadata
  struct {
    std::string corpus_path, bpe_path, init, config_path, out = "ablation.csv";
    std::vector<std::string> keys = {"speaker.*"};
    std::uint64_t seed = 1;
    int threads = 1;
  } ablate_cmd;
  {
    auto* cmd = app.add_subcommand(
        "ablate-metadata",
        "fine-tune one metadata key at a time and report perplexity");
    cmd->add_option("--corpus", ablate_cmd.corpus_path)->required();
    cmd->add_option("--bpe", ablate_cmd.bpe_path)->required();
    cmd->add_option("--init", ablate_cmd.init, "pretrained contextual checkpoint")
        ->required();
    cmd->add_option("--config", ablate_cmd.config_path);
    cmd->add_option("--keys", ablate_cmd.keys,
                    "patterns; each matching key becomes one ablation row");
    cmd->add_option("--seed", ablate_cmd.seed);
    cmd->add_option("--out", ablate_cmd.out);
    cmd->add_option("--threads", ablate_cmd.threads);
    cmd->callback([&]() {
      const auto corpus_data = corpus::load_corpus(ablate_cmd.corpus_path);
      const auto tokenizer = bpe::BpeModel::load(ablate_cmd.bpe_path);
      const auto init = model::load_checkpoint(ablate_cmd.init);
      if (init.arch.kind != model::Kind::contextual) {
        throw UsageError("--init must be a contextual checkpoint");
      }
      const json config = load_config_file(ablate_cmd.config_path);
      const embed::Embedder embedder(
          embedder_config_from(config, init.arch.d_ctx));
      const train::Pipeline pipeline{&tokenizer, &embedder};

      train::TrainConfig cfg = train_config_from(config);
      cfg.seed = ablate_cmd.seed;
      cfg.context_source = train::ContextSource::metadata;

      // Baseline: the bare decoder of the contextual model, trained without
      // any context pathway.
      model::ArchConfig decoder_arch = init.arch;
      decoder_arch.kind = model::Kind::base;
      decoder_arch.d_model_enc = decoder_arch.n_layers_enc =
          decoder_arch.heads_enc = decoder_arch.ffn_enc = 0;
      train::TrainConfig base_cfg = cfg;
      base_cfg.context_source = train::ContextSource::none;
      const auto baseline_params =
          train::train(model::init_params<float>(decoder_arch, cfg.seed),
                       corpus_data, pipeline, base_cfg)
              .params;
      const double baseline_ppl =
          scoring::split_perplexity(baseline_params, pipeline, corpus_data,
                                    corpus::Split::test,
                                    train::ContextSource::none, {})
              .ppl;

      const auto mask = mask_from(ablate_cmd.keys);
      const std::vector<std::string> keys(mask.begin(), mask.end());
      std::vector<double> ppl(keys.size(), 0.0);
      std::vector<std::thread> pool;
      std::atomic<std::size_t> next{0};
      auto worker = [&]() {
        for (std::size_t k = next.fetch_add(1); k < keys.size();
             k = next.fetch_add(1)) {
          train::TrainConfig key_cfg = cfg;
          key_cfg.metadata_mask = {keys[k]};
          const auto params =
              train::train(init, corpus_data, pipeline, key_cfg).params;
          ppl[k] = scoring::split_perplexity(params, pipeline, corpus_data,
                                             corpus::Split::test,
                                             train::ContextSource::metadata,
                                             {keys[k]})
                       .ppl;
        }
      };
      const int n_threads =
          std::max(1, std::min<int>(ablate_cmd.threads,
                                    static_cast<int>(keys.size())));
      for (int t = 0; t < n_threads; ++t) pool.emplace_back(worker);
      for (auto& t : pool) t.join();

      std::ostringstream csv;
      csv.precision(10);
      csv << "key,test_ppl,baseline_ppl,ppl_reduction_pct\n";
      csv << "baseline_decoder," << baseline_ppl << ',' << baseline_ppl << ",0\n";
      for (std::size_t k = 0; k < keys.size(); ++k) {
        csv << keys[k] << ',' << ppl[k] << ',' << baseline_ppl << ','
            << 100.0 * (baseline_ppl - ppl[k]) / baseline_ppl << '\n';
      }
      write_text(ablate_cmd.out, csv.str());
      manifest::RunManifest run;
      run.command = "ablate-metadata";
      run.seed = ablate_cmd.seed;
      run.inputs = {ablate_cmd.corpus_path, ablate_cmd.bpe_path, ablate_cmd.init};
      run.outputs = {ablate_cmd.out};
      manifest::write_manifest(run, ablate_cmd.out);
      std::cout << "rows " << keys.size() + 1 << "\nout " << ablate_cmd.out
                << "\n";
    });
  }

  // ------------------------------------------------------------------ run-recipe
  struct {
    std::string name, out_dir, scale = "desk";
    int threads = 1;
  } recipe_cmd;
  {
    auto* cmd = app.add_subcommand("run-recipe", "built-in synthetic experiments");
    cmd->add_option("--name", recipe_cmd.name,
                    "rqa-synthetic | rqb-synthetic | rqc-synthetic | appc-synthetic")
        ->required();
    cmd->add_option("--out-dir", recipe_cmd.out_dir)->required();
    cmd->add_option("--scale", recipe_cmd.scale, "desk (default) | tiny");
    cmd->add_option("--threads", recipe_cmd.threads);
    cmd->callback([&]() {
      recipes::RecipeOptions options;
      options.out_dir = recipe_cmd.out_dir;
      options.threads = recipe_cmd.threads;
      if (recipe_cmd.scale == "desk") {
        options.scale = recipes::Scale::desk;
      } else if (recipe_cmd.scale == "tiny") {
        options.scale = recipes::Scale::tiny;
      } else {
        throw UsageError("unknown scale '" + recipe_cmd.scale + "'");
      }
      if (const char* env = std::getenv("CTXLM_SEED")) {
        options.seed_base = std::strtoull(env, nullptr, 10);
      }
      const auto summary = recipes::run_recipe(recipe_cmd.name, options);
      manifest::RunManifest run;
      run.command = "run-recipe " + recipe_cmd.name;
      run.seed = options.seed_base.value_or(101);
      run.outputs = {summary};
      manifest::write_manifest(run, summary);
      std::cout << "summary " << summary.string() << "\n";
    });
  }

  try {
    exit_code = dispatch(app, argc, argv);
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    switch (e.category()) {
      case Error::Category::usage: return 1;
      case Error::Category::data: return 2;
      case Error::Category::numeric: return 3;
    }
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  }
  return exit_code;
}

}  // namespace ctxlm::cli
