#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "ctxlm/scoring.hpp"
#include "ctxlm/trainer.hpp"
#include "oracles.hpp"

#include <cmath>

using namespace ctxlm;
using namespace ctxlm::train;

namespace {

struct TinySetup {
  corpus::CorpusSplits corpus;
  bpe::BpeModel tokenizer;
  embed::Embedder embedder;
  model::ArchConfig arch;

  TinySetup()
      : corpus(make_corpus()),
        tokenizer(make_tokenizer(corpus)),
        embedder(make_embedder()),
        arch(make_arch(tokenizer.vocab_size())) {}

  static corpus::CorpusSplits make_corpus() {
    corpus::SyntheticSpec spec;
    spec.n_speakers = 6;
    spec.n_productions = 2;
    spec.lines_per_speaker = 60;
    spec.marker_strength = 0.7;
    spec.n_unseen_speakers = 2;
    return corpus::generate_synthetic(1234, spec);
  }

  static bpe::BpeModel make_tokenizer(const corpus::CorpusSplits& c) {
    std::vector<std::string> texts;
    for (const auto& s : c.train) texts.push_back(s.utterance);
    return bpe::BpeModel::train(texts, {.vocab_cap = 220, .byte_fallback = false});
  }

  static embed::Embedder make_embedder() {
    embed::EmbedderConfig cfg;
    cfg.d_ctx = 48;
    return embed::Embedder(cfg);
  }

  static model::ArchConfig make_arch(int vocab) {
    model::ArchConfig a;
    a.kind = model::Kind::contextual;
    a.d_model_enc = 16;
    a.n_layers_enc = 1;
    a.heads_enc = 2;
    a.ffn_enc = 32;
    a.d_model_dec = 32;
    a.n_layers_dec = 2;
    a.heads_dec = 4;
    a.ffn_dec = 64;
    a.vocab_size = vocab;
    a.d_ctx = 48;
    a.max_seq_len = 48;
    a.dropout = 0.0f;
    return a;
  }

  Pipeline pipeline() const { return {&tokenizer, &embedder}; }

  TrainConfig config() const {
    TrainConfig cfg;
    cfg.learning_rate = 5e-3;
    cfg.batch_tokens = 1200;
    cfg.max_epochs = 12;
    cfg.patience = 5;
    cfg.seed = 7;
    cfg.context_source = ContextSource::metadata;
    return cfg;
  }
};

const TinySetup& tiny() {
  static const TinySetup setup;
  return setup;
}

}  // namespace

TEST_CASE("early stopping matches the oracle simulation") {
  SUBCASE("flat sequence with patience 5 stops after epoch 6") {
    const std::vector<double> losses = {3, 3, 3, 3, 3, 3};
    EarlyStopper stopper(5, 1e-5);
    int stopped_at = 0;
    for (std::size_t e = 0; e < losses.size(); ++e) {
      stopper.update(losses[e]);
      if (stopper.should_stop()) {
        stopped_at = static_cast<int>(e) + 1;
        break;
      }
    }
    CHECK(stopped_at == 6);
    CHECK(oracles::stopping_epoch(losses, 5, 1e-5) == 6);
  }

  SUBCASE("random sequences, patience 1..5") {
    Rng rng(2024);
    for (int trial = 0; trial < 1000; ++trial) {
      const int patience = 1 + static_cast<int>(rng.next_below(5));
      const int len = 1 + static_cast<int>(rng.next_below(20));
      std::vector<double> losses(len);
      for (auto& l : losses) {
        l = 1.0 + 0.25 * std::floor(rng.next_unit() * 8.0);  // ties happen
      }
      EarlyStopper stopper(patience, 1e-5);
      int stopped_at = len;
      for (int e = 0; e < len; ++e) {
        stopper.update(losses[static_cast<std::size_t>(e)]);
        if (stopper.should_stop()) {
          stopped_at = e + 1;
          break;
        }
      }
      CHECK(stopped_at == oracles::stopping_epoch(losses, patience, 1e-5));
    }
  }

  SUBCASE("improvements below min_delta do not reset patience") {
    EarlyStopper stopper(2, 1e-5);
    stopper.update(1.0);
    CHECK(!stopper.update(1.0 - 1e-7));
    CHECK(!stopper.update(1.0 - 2e-7));
    CHECK(stopper.should_stop());
  }
}

TEST_CASE("training reduces validation loss on learnable data") {
  const TinySetup& setup = tiny();
  const auto params = model::init_params<float>(setup.arch, 11);
  const TrainResult result =
      ctxlm::train::train(params, setup.corpus, setup.pipeline(), setup.config());

  REQUIRE(result.record.valid_loss.size() >= 2);
  CHECK(result.record.best_valid_loss < result.record.valid_loss.front());
  CHECK(result.record.stopping_epoch <= setup.config().max_epochs);

  // best-checkpoint contract: returned parameters reproduce the best epoch
  double nll = 0.0;
  std::int64_t targets = 0;
  for (const auto& s : setup.corpus.valid) {
    const auto ids = setup.tokenizer.encode(s.utterance, {true, true});
    const auto ctx = setup.embedder.embed_context_set(
        context_for(s, setup.corpus, ContextSource::metadata, {}));
    const auto ll = model::log_likelihood<float>(result.params, ctx, ids);
    nll -= ll.total;
    targets += static_cast<std::int64_t>(ll.per_token.size());
  }
  const double recomputed = nll / static_cast<double>(targets);
  CHECK(recomputed == doctest::Approx(result.record.best_valid_loss).epsilon(1e-6));
  CHECK(result.record.best_valid_loss ==
        doctest::Approx(*std::min_element(result.record.valid_loss.begin(),
                                          result.record.valid_loss.end()))
            .epsilon(1e-12));
}

TEST_CASE("identical seeds give identical loss trajectories") {
  const TinySetup& setup = tiny();
  const auto params = model::init_params<float>(setup.arch, 11);
  TrainConfig cfg = setup.config();
  cfg.max_epochs = 3;
  const TrainResult a = ctxlm::train::train(params, setup.corpus, setup.pipeline(), cfg);
  const TrainResult b = ctxlm::train::train(params, setup.corpus, setup.pipeline(), cfg);
  CHECK(a.record.train_loss == b.record.train_loss);
  CHECK(a.record.valid_loss == b.record.valid_loss);
}

TEST_CASE("a trained contextual model reacts to the profile") {
  const TinySetup& setup = tiny();
  const auto params = model::init_params<float>(setup.arch, 11);
  const TrainResult result =
      ctxlm::train::train(params, setup.corpus, setup.pipeline(), setup.config());

  // two seen speakers with different professions
  std::string spk_a, spk_b;
  for (const auto& [id, profile] : setup.corpus.speakers) {
    if (id.rfind("usp", 0) == 0) continue;
    if (spk_a.empty()) {
      spk_a = id;
    } else if (setup.corpus.speakers.at(spk_a).value_or_empty("speaker.profession") !=
               profile.value_or_empty("speaker.profession")) {
      spk_b = id;
      break;
    }
  }
  REQUIRE(!spk_b.empty());

  const auto ctx_a = setup.embedder.embed_context_set(setup.corpus.speakers.at(spk_a));
  const auto ctx_b = setup.embedder.embed_context_set(setup.corpus.speakers.at(spk_b));
  const auto bos = setup.tokenizer.encode("", {true, false});
  const MatF la = model::forward<float>(result.params, ctx_a, bos);
  const MatF lb = model::forward<float>(result.params, ctx_b, bos);
  CHECK(la != lb);

  // the conditioning is learned: a speaker's own lines score higher under
  // their profile than under the other speaker's
  const auto score_speaker = [&](const std::string& speaker,
                                 const std::vector<embed::ContextVector>& ctx) {
    double total = 0.0;
    for (const auto& s : setup.corpus.test) {
      if (s.speaker_id != speaker) continue;
      const auto ids = setup.tokenizer.encode(s.utterance, {true, true});
      total += model::log_likelihood<float>(result.params, ctx, ids).total;
    }
    return total;
  };
  CHECK(score_speaker(spk_a, ctx_a) > score_speaker(spk_a, ctx_b));
  CHECK(score_speaker(spk_b, ctx_b) > score_speaker(spk_b, ctx_a));

  // argmax of the next-token distribution differs between the two profiles
  Eigen::Index argmax_a = 0, argmax_b = 0;
  la.row(0).maxCoeff(&argmax_a);
  lb.row(0).maxCoeff(&argmax_b);
  CHECK(argmax_a != argmax_b);
}

TEST_CASE("train rejects bad setups") {
  const TinySetup& setup = tiny();
  const auto params = model::init_params<float>(setup.arch, 1);

  corpus::CorpusSplits empty_train = setup.corpus;
  empty_train.train.clear();
  CHECK_THROWS_AS(ctxlm::train::train(params, empty_train, setup.pipeline(), setup.config()),
                  EmptySplit);

  TrainConfig bad = setup.config();
  bad.context_source = ContextSource::none;
  CHECK_THROWS_AS(ctxlm::train::train(params, setup.corpus, setup.pipeline(), bad),
                  InvalidSpec);

  TrainConfig bad_lr = setup.config();
  bad_lr.learning_rate = 0.0;
  CHECK_THROWS_AS(ctxlm::train::train(params, setup.corpus, setup.pipeline(), bad_lr),
                  InvalidSpec);
}

TEST_CASE("speaker fine-tune pipeline adapts to the speaker") {
  const TinySetup& setup = tiny();
  model::ArchConfig base_arch = setup.arch;
  base_arch.kind = model::Kind::base;
  base_arch.d_model_enc = base_arch.n_layers_enc = base_arch.heads_enc =
      base_arch.ffn_enc = 0;
  const auto params = model::init_params<float>(base_arch, 5);

  CHECK_THROWS_AS(speaker_finetune_pipeline(params, setup.corpus, "sp999",
                                            setup.pipeline(), setup.config()),
                  UnknownSpeaker);

  TrainConfig cfg = setup.config();
  cfg.context_source = ContextSource::none;
  cfg.max_epochs = 4;
  const std::string speaker = setup.corpus.train.front().speaker_id;
  const SpeakerFinetune result = speaker_finetune_pipeline(
      params, setup.corpus, speaker, setup.pipeline(), cfg);

  CHECK(result.ft1.arch == result.sp.arch);

  // held-out perplexity for that speaker: sp should not be worse than ft1
  corpus::CorpusSplits held = setup.corpus;
  held.test.erase(std::remove_if(held.test.begin(), held.test.end(),
                                 [&](const corpus::Sample& s) {
                                   return s.speaker_id != speaker;
                                 }),
                  held.test.end());
  REQUIRE(!held.test.empty());
  const auto ppl_ft1 = scoring::split_perplexity(
      result.ft1, setup.pipeline(), held, corpus::Split::test,
      ContextSource::none, {});
  const auto ppl_sp = scoring::split_perplexity(
      result.sp, setup.pipeline(), held, corpus::Split::test,
      ContextSource::none, {});
  CHECK(ppl_sp.ppl <= ppl_ft1.ppl * 1.02);
}

TEST_CASE("lerp of a model with itself is exact") {
  const TinySetup& setup = tiny();
  model::ArchConfig arch = setup.arch;
  arch.kind = model::Kind::base;
  arch.d_model_enc = arch.n_layers_enc = arch.heads_enc = arch.ffn_enc = 0;
  const auto params = model::init_params<float>(arch, 9);
  const bpe::TokenSequence tokens = setup.tokenizer.encode(
      setup.corpus.train.front().utterance, {true, true});

  const LerpResult lerp = lerp_scores(params, params, tokens);
  const auto ll = model::log_likelihood<float>(params, {}, tokens);
  REQUIRE(lerp.per_token.size() == ll.per_token.size());
  for (std::size_t t = 0; t < lerp.per_token.size(); ++t) {
    CHECK(std::abs(lerp.per_token[t] - static_cast<double>(ll.per_token[t])) <=
          1e-6);
  }
}

TEST_CASE("lerp hand case: opposing one-hot models average to a half") {
  model::ArchConfig arch;
  arch.kind = model::Kind::base;
  arch.d_model_dec = 4;
  arch.n_layers_dec = 1;
  arch.heads_dec = 1;
  arch.ffn_dec = 8;
  arch.vocab_size = 2;
  arch.max_seq_len = 8;
  arch.dropout = 0.0f;

  // Untied output projections with a large scale drive the softmax pair to
  // (1, 0) and (0, 1) up to ~1e-45.
  arch.tie_embeddings = false;
  auto model_a = model::make_params<float>(arch);
  model_a.dec_ln.gain.setOnes();
  model_a.tok_emb(0, 0) = 1.0f;
  model_a.out_proj(0, 0) = 60.0f;
  model_a.out_proj(0, 1) = -60.0f;
  auto model_b = model::make_params<float>(arch);
  model_b.dec_ln.gain.setOnes();
  model_b.tok_emb(0, 0) = 1.0f;
  model_b.out_proj(0, 0) = -60.0f;
  model_b.out_proj(0, 1) = 60.0f;

  const bpe::TokenSequence tokens = {0, 0};
  const MatD mix = lerp_distributions(model_a, model_b, tokens);
  CHECK(mix(0, 0) == doctest::Approx(0.5).epsilon(1e-9));
  CHECK(mix(0, 1) == doctest::Approx(0.5).epsilon(1e-9));
}

TEST_CASE("lerp distributions are convex combinations") {
  const TinySetup& setup = tiny();
  model::ArchConfig arch = setup.arch;
  arch.kind = model::Kind::base;
  arch.d_model_enc = arch.n_layers_enc = arch.heads_enc = arch.ffn_enc = 0;
  const auto a = model::init_params<float>(arch, 1);
  const auto b = model::init_params<float>(arch, 2);
  const bpe::TokenSequence tokens = setup.tokenizer.encode(
      setup.corpus.train.front().utterance, {true, true});

  const MatD mix = lerp_distributions(a, b, tokens);
  const MatF lpa = model::log_prob_rows<float>(a, {}, tokens);
  const MatF lpb = model::log_prob_rows<float>(b, {}, tokens);
  for (Eigen::Index r = 0; r < mix.rows(); ++r) {
    double sum = 0.0;
    for (Eigen::Index c = 0; c < mix.cols(); ++c) {
      const double pa = std::exp(static_cast<double>(lpa(r, c)));
      const double pb = std::exp(static_cast<double>(lpb(r, c)));
      CHECK(mix(r, c) >= std::min(pa, pb) - 1e-12);
      CHECK(mix(r, c) <= std::max(pa, pb) + 1e-12);
      sum += mix(r, c);
    }
    CHECK(std::abs(sum - 1.0) <= 1e-6);
  }
}

TEST_CASE("lerp rejects mismatched models") {
  const TinySetup& setup = tiny();
  model::ArchConfig arch = setup.arch;
  arch.kind = model::Kind::base;
  arch.d_model_enc = arch.n_layers_enc = arch.heads_enc = arch.ffn_enc = 0;
  const auto a = model::init_params<float>(arch, 1);

  model::ArchConfig other = arch;
  other.vocab_size = arch.vocab_size + 1;
  const auto b = model::init_params<float>(other, 1);
  CHECK_THROWS_AS(lerp_scores(a, b, {1, 2, 3}), VocabMismatch);

  const auto contextual = model::init_params<float>(setup.arch, 1);
  CHECK_THROWS_AS(lerp_scores(a, contextual, {1, 2, 3}), InvalidArch);
}

TEST_CASE("run record serializes per-epoch losses") {
  RunRecord record;
  record.train_loss = {2.5, 2.0};
  record.valid_loss = {2.6, 2.2};
  const std::string csv = record.to_csv();
  CHECK(csv.find("epoch,train_loss,valid_loss\n") == 0);
  CHECK(csv.find("1,2.5,2.6") != std::string::npos);
  CHECK(csv.find("2,2,2.2") != std::string::npos);
}
