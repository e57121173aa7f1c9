#include "ctxlm/trainer.hpp"

#include <nlohmann/json.hpp>

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>

namespace ctxlm::train {

using json = nlohmann::json;

const char* context_source_name(ContextSource s) {
  switch (s) {
    case ContextSource::past_dialogue: return "past_dialogue";
    case ContextSource::metadata: return "metadata";
    case ContextSource::none: return "none";
  }
  return "?";
}

std::optional<ContextSource> context_source_from_name(std::string_view name) {
  if (name == "past_dialogue") return ContextSource::past_dialogue;
  if (name == "metadata") return ContextSource::metadata;
  if (name == "none") return ContextSource::none;
  return std::nullopt;
}

void TrainConfig::validate() const {
  if (learning_rate <= 0.0) throw InvalidSpec("learning_rate must be > 0");
  if (batch_tokens < 1) throw InvalidSpec("batch_tokens must be >= 1");
  if (max_epochs < 1) throw InvalidSpec("max_epochs must be >= 1");
  if (patience < 1) throw InvalidSpec("patience must be >= 1");
}

json TrainConfig::to_json() const {
  json j;
  j["learning_rate"] = learning_rate;
  j["batch_tokens"] = batch_tokens;
  j["max_epochs"] = max_epochs;
  j["patience"] = patience;
  j["seed"] = seed;
  j["context_source"] = context_source_name(context_source);
  j["metadata_mask"] = std::vector<std::string>(metadata_mask.begin(),
                                                metadata_mask.end());
  j["weight_decay"] = weight_decay;
  j["beta1"] = beta1;
  j["beta2"] = beta2;
  j["adam_eps"] = adam_eps;
  j["warmup_frac"] = warmup_frac;
  j["grad_clip"] = grad_clip;
  j["min_improvement"] = min_improvement;
  return j;
}

TrainConfig TrainConfig::from_json(const json& j) {
  TrainConfig cfg;
  cfg.learning_rate = j.value("learning_rate", cfg.learning_rate);
  cfg.batch_tokens = j.value("batch_tokens", cfg.batch_tokens);
  cfg.max_epochs = j.value("max_epochs", cfg.max_epochs);
  cfg.patience = j.value("patience", cfg.patience);
  cfg.seed = j.value("seed", cfg.seed);
  if (j.contains("context_source")) {
    const auto source =
        context_source_from_name(j["context_source"].get<std::string>());
    if (!source) {
      throw InvalidSpec("unknown context_source '" +
                        j["context_source"].get<std::string>() + "'");
    }
    cfg.context_source = *source;
  }
  if (j.contains("metadata_mask")) {
    for (const auto& k : j["metadata_mask"]) {
      cfg.metadata_mask.insert(k.get<std::string>());
    }
  }
  cfg.weight_decay = j.value("weight_decay", cfg.weight_decay);
  cfg.beta1 = j.value("beta1", cfg.beta1);
  cfg.beta2 = j.value("beta2", cfg.beta2);
  cfg.adam_eps = j.value("adam_eps", cfg.adam_eps);
  cfg.warmup_frac = j.value("warmup_frac", cfg.warmup_frac);
  cfg.grad_clip = j.value("grad_clip", cfg.grad_clip);
  cfg.min_improvement = j.value("min_improvement", cfg.min_improvement);
  cfg.validate();
  return cfg;
}

std::string RunRecord::to_csv() const {
  std::ostringstream out;
  out << "epoch,train_loss,valid_loss\n";
  for (std::size_t e = 0; e < valid_loss.size(); ++e) {
    out << (e + 1) << ',' << train_loss[e] << ',' << valid_loss[e] << '\n';
  }
  return out.str();
}

bool EarlyStopper::update(double loss) {
  if (loss < best_ - min_delta_) {
    best_ = loss;
    bad_epochs_ = 0;
    return true;
  }
  ++bad_epochs_;
  return false;
}

// ---------------------------------------------------------------------------
// Context construction
// ---------------------------------------------------------------------------

corpus::ContextSet context_for(const corpus::Sample& sample,
                               const corpus::CorpusSplits& corpus,
                               ContextSource source,
                               const std::set<std::string>& mask) {
  switch (source) {
    case ContextSource::none:
      return {};
    case ContextSource::past_dialogue: {
      std::set<std::string> past;
      for (int i = 1; i <= corpus::kPastSlots; ++i) {
        past.insert("doc.past_" + std::to_string(i));
      }
      return sample.context.select(past);
    }
    case ContextSource::metadata: {
      corpus::ContextSet profile;
      auto speaker = corpus.speakers.find(sample.speaker_id);
      if (speaker != corpus.speakers.end()) profile = speaker->second;
      auto production = corpus.productions.find(sample.production_id);
      if (production != corpus.productions.end()) {
        profile = profile.merged_with(production->second);
      }
      if (profile.empty()) profile = sample.context;
      const std::set<std::string>& effective =
          mask.empty() ? std::set<std::string>(corpus::metadata_keys().begin(),
                                               corpus::metadata_keys().end())
                       : mask;
      return profile.select(effective);
    }
  }
  return {};
}

// ---------------------------------------------------------------------------
// Training
// ---------------------------------------------------------------------------

namespace {

struct PreparedSample {
  model::BatchItem item;
  std::size_t n_tokens = 0;
};

std::vector<PreparedSample> prepare_samples(
    const std::vector<corpus::Sample>& samples,
    const corpus::CorpusSplits& corpus, const Pipeline& pipeline,
    const TrainConfig& cfg, bool contextual) {
  std::vector<PreparedSample> out;
  out.reserve(samples.size());
  // Context vectors are cached per distinct context set; profiles repeat
  // heavily across a speaker's lines.
  std::map<std::string, std::vector<embed::ContextVector>> ctx_cache;
  for (const auto& s : samples) {
    PreparedSample prepared;
    prepared.item.tokens =
        pipeline.tokenizer->encode(s.utterance, {.add_bos = true, .add_eos = true});
    prepared.n_tokens = prepared.item.tokens.size();
    if (contextual) {
      const corpus::ContextSet ctx =
          context_for(s, corpus, cfg.context_source, cfg.metadata_mask);
      std::string key;
      for (const auto& v : ctx.variables()) {
        key += v.key;
        key += '\x1f';
        key += v.value;
        key += '\x1e';
      }
      auto it = ctx_cache.find(key);
      if (it == ctx_cache.end()) {
        it = ctx_cache.emplace(key, pipeline.embedder->embed_context_set(ctx)).first;
      }
      prepared.item.ctx = it->second;
    }
    out.push_back(std::move(prepared));
  }
  return out;
}

/// Token-budget batches over length-bucketed, seed-shuffled samples.
std::vector<std::vector<std::size_t>> make_batches(
    const std::vector<PreparedSample>& samples, int batch_tokens, Rng& rng) {
  std::vector<std::size_t> order(samples.size());
  std::iota(order.begin(), order.end(), 0);
  rng.shuffle(order);
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) {
                     return samples[a].n_tokens < samples[b].n_tokens;
                   });
  std::vector<std::vector<std::size_t>> batches;
  std::vector<std::size_t> current;
  std::size_t current_tokens = 0;
  for (const std::size_t idx : order) {
    const std::size_t n = samples[idx].n_tokens;
    if (!current.empty() &&
        current_tokens + n > static_cast<std::size_t>(batch_tokens)) {
      batches.push_back(std::move(current));
      current.clear();
      current_tokens = 0;
    }
    current.push_back(idx);
    current_tokens += n;
  }
  if (!current.empty()) batches.push_back(std::move(current));
  rng.shuffle(batches);
  return batches;
}

double mean_valid_loss(const model::ModelParameters& params,
                       const std::vector<PreparedSample>& valid) {
  double nll = 0.0;
  std::int64_t targets = 0;
  for (const auto& s : valid) {
    if (s.item.tokens.size() < 2) continue;
    const auto ll = model::log_likelihood<float>(params, s.item.ctx, s.item.tokens);
    nll -= ll.total;
    targets += static_cast<std::int64_t>(ll.per_token.size());
  }
  if (targets == 0) throw EmptySplit("validation split has no target tokens");
  return nll / static_cast<double>(targets);
}

class AdamW {
 public:
  AdamW(const model::ArchConfig& arch, const TrainConfig& cfg)
      : cfg_(cfg),
        m_(model::make_params<float>(arch)),
        v_(model::make_params<float>(arch)) {}

  void step(model::ModelParameters& params, model::ModelParameters& grads,
            double lr) {
    ++t_;
    auto param_refs = model::tensor_refs(params);
    auto grad_refs = model::tensor_refs(grads);
    auto m_refs = model::tensor_refs(m_);
    auto v_refs = model::tensor_refs(v_);

    if (cfg_.grad_clip > 0.0) {
      double sq = 0.0;
      for (const auto& g : grad_refs) {
        for (std::int64_t i = 0; i < g.size(); ++i) {
          sq += static_cast<double>(g.data[i]) * g.data[i];
        }
      }
      const double norm = std::sqrt(sq);
      if (norm > cfg_.grad_clip) {
        const float scale = static_cast<float>(cfg_.grad_clip / norm);
        for (const auto& g : grad_refs) {
          for (std::int64_t i = 0; i < g.size(); ++i) g.data[i] *= scale;
        }
      }
    }

    const double bc1 = 1.0 - std::pow(cfg_.beta1, t_);
    const double bc2 = 1.0 - std::pow(cfg_.beta2, t_);
    for (std::size_t k = 0; k < param_refs.size(); ++k) {
      const auto& p = param_refs[k];
      const auto& g = grad_refs[k];
      const auto& m = m_refs[k];
      const auto& v = v_refs[k];
      const bool decay = p.decay && cfg_.weight_decay > 0.0;
      for (std::int64_t i = 0; i < p.size(); ++i) {
        const double gi = g.data[i];
        const double mi = cfg_.beta1 * m.data[i] + (1.0 - cfg_.beta1) * gi;
        const double vi = cfg_.beta2 * v.data[i] + (1.0 - cfg_.beta2) * gi * gi;
        m.data[i] = static_cast<float>(mi);
        v.data[i] = static_cast<float>(vi);
        double update = (mi / bc1) / (std::sqrt(vi / bc2) + cfg_.adam_eps);
        if (decay) update += cfg_.weight_decay * p.data[i];
        p.data[i] = static_cast<float>(p.data[i] - lr * update);
      }
    }
  }

 private:
  TrainConfig cfg_;
  model::ModelParameters m_, v_;
  long t_ = 0;
};

}  // namespace

TrainResult train(const model::ModelParameters& params,
                  const corpus::CorpusSplits& corpus, const Pipeline& pipeline,
                  const TrainConfig& cfg) {
  cfg.validate();
  if (pipeline.tokenizer == nullptr || pipeline.embedder == nullptr) {
    throw InvalidSpec("pipeline requires a tokenizer and an embedder");
  }
  const bool contextual = params.arch.kind == model::Kind::contextual;
  if (!contextual && cfg.context_source != ContextSource::none) {
    throw InvalidSpec("base-kind models train with context_source=none");
  }
  if (contextual && cfg.context_source == ContextSource::none) {
    throw InvalidSpec("contextual models need past_dialogue or metadata context");
  }
  if (corpus.train.empty()) throw EmptySplit("train");
  if (corpus.valid.empty()) throw EmptySplit("valid");

  const auto train_samples =
      prepare_samples(corpus.train, corpus, pipeline, cfg, contextual);
  const auto valid_samples =
      prepare_samples(corpus.valid, corpus, pipeline, cfg, contextual);

  TrainResult result;
  result.params = params;
  result.record.config_json = cfg.to_json().dump();

  model::ModelParameters best = params;
  EarlyStopper stopper(cfg.patience, cfg.min_improvement);
  AdamW optimizer(params.arch, cfg);
  Rng dropout_rng(cfg.seed ^ 0x9e3779b97f4a7c15ull);

  // Step budget for the warmup / inverse-sqrt schedule, estimated from the
  // first epoch's batch count.
  Rng probe_rng(cfg.seed);
  const std::size_t batches_per_epoch =
      make_batches(train_samples, cfg.batch_tokens, probe_rng).size();
  const double total_steps =
      static_cast<double>(batches_per_epoch) * cfg.max_epochs;
  const double warmup = std::max(1.0, cfg.warmup_frac * total_steps);

  long step = 0;
  int best_epoch = 0;
  for (int epoch = 1; epoch <= cfg.max_epochs; ++epoch) {
    Rng epoch_rng(cfg.seed + static_cast<std::uint64_t>(epoch) * 0x9e3779b9ull);
    const auto batches = make_batches(train_samples, cfg.batch_tokens, epoch_rng);

    double epoch_nll = 0.0;
    std::int64_t epoch_targets = 0;
    for (const auto& batch_idx : batches) {
      std::vector<model::BatchItem> batch;
      batch.reserve(batch_idx.size());
      for (const std::size_t i : batch_idx) batch.push_back(train_samples[i].item);

      model::GradientResult<float> grad_result;
      try {
        grad_result = model::gradients<float>(
            result.params, batch,
            params.arch.dropout > 0.0f ? &dropout_rng : nullptr);
      } catch (const NonFiniteLoss& e) {
        throw DivergedLoss(e.what());
      }
      epoch_nll += static_cast<double>(grad_result.loss) *
                   static_cast<double>(grad_result.target_tokens);
      epoch_targets += grad_result.target_tokens;

      ++step;
      const double lr =
          cfg.learning_rate *
          std::min(static_cast<double>(step) / warmup,
                   std::sqrt(warmup / static_cast<double>(step)));
      optimizer.step(result.params, grad_result.grads, lr);
    }

    const double train_loss = epoch_nll / static_cast<double>(epoch_targets);
    const double valid_loss = mean_valid_loss(result.params, valid_samples);
    if (!std::isfinite(train_loss) || !std::isfinite(valid_loss)) {
      throw DivergedLoss("epoch " + std::to_string(epoch));
    }
    result.record.train_loss.push_back(train_loss);
    result.record.valid_loss.push_back(valid_loss);
    result.record.stopping_epoch = epoch;

    if (stopper.update(valid_loss)) {
      best = result.params;
      best_epoch = epoch;
    }
    if (stopper.should_stop()) break;
  }

  result.params = std::move(best);
  result.record.best_epoch = best_epoch;
  result.record.best_valid_loss = stopper.best();
  return result;
}

SpeakerFinetune speaker_finetune_pipeline(const model::ModelParameters& pretrained,
                                          const corpus::CorpusSplits& corpus,
                                          const std::string& speaker_id,
                                          const Pipeline& pipeline,
                                          const TrainConfig& cfg) {
  std::vector<corpus::Sample> speaker_train;
  std::vector<corpus::Sample> speaker_valid;
  for (const auto& s : corpus.train) {
    if (s.speaker_id == speaker_id) speaker_train.push_back(s);
  }
  for (const auto& s : corpus.valid) {
    if (s.speaker_id == speaker_id) speaker_valid.push_back(s);
  }
  if (speaker_train.empty()) {
    throw UnknownSpeaker("'" + speaker_id + "' has no train samples");
  }

  TrainConfig base_cfg = cfg;
  base_cfg.context_source = ContextSource::none;

  SpeakerFinetune out;
  TrainResult ft1 = train(pretrained, corpus, pipeline, base_cfg);
  out.ft1 = std::move(ft1.params);
  out.ft1_record = std::move(ft1.record);

  corpus::CorpusSplits speaker_corpus;
  speaker_corpus.train = std::move(speaker_train);
  speaker_corpus.valid =
      speaker_valid.empty() ? corpus.valid : std::move(speaker_valid);
  speaker_corpus.speakers = corpus.speakers;
  speaker_corpus.productions = corpus.productions;

  TrainResult sp = train(out.ft1, speaker_corpus, pipeline, base_cfg);
  out.sp = std::move(sp.params);
  out.sp_record = std::move(sp.record);
  return out;
}

// ---------------------------------------------------------------------------
// Lerp
// ---------------------------------------------------------------------------

MatD lerp_distributions(const model::ModelParameters& model_a,
                        const model::ModelParameters& model_b,
                        const bpe::TokenSequence& tokens, double weight) {
  if (model_a.arch.vocab_size != model_b.arch.vocab_size) {
    throw VocabMismatch(std::to_string(model_a.arch.vocab_size) + " vs " +
                        std::to_string(model_b.arch.vocab_size));
  }
  if (model_a.arch.kind != model::Kind::base ||
      model_b.arch.kind != model::Kind::base) {
    throw InvalidArch("lerp interpolates base-kind models");
  }
  if (weight < 0.0 || weight > 1.0) throw InvalidSpec("lerp weight in [0,1]");

  const std::vector<embed::ContextVector> no_ctx;
  const MatF la = model::log_prob_rows<float>(model_a, no_ctx, tokens);
  const MatF lb = model::log_prob_rows<float>(model_b, no_ctx, tokens);
  MatD out(la.rows(), la.cols());
  for (Eigen::Index r = 0; r < la.rows(); ++r) {
    for (Eigen::Index c = 0; c < la.cols(); ++c) {
      out(r, c) = weight * std::exp(static_cast<double>(la(r, c))) +
                  (1.0 - weight) * std::exp(static_cast<double>(lb(r, c)));
    }
  }
  return out;
}

LerpResult lerp_scores(const model::ModelParameters& model_a,
                       const model::ModelParameters& model_b,
                       const bpe::TokenSequence& tokens, double weight) {
  LerpResult result;
  if (tokens.size() < 2) return result;
  const MatD probs = lerp_distributions(model_a, model_b, tokens, weight);
  for (std::size_t t = 1; t < tokens.size(); ++t) {
    const double lp =
        std::log(probs(static_cast<Eigen::Index>(t - 1), tokens[t]));
    result.per_token.push_back(lp);
    result.total += lp;
  }
  return result;
}

}  // namespace ctxlm::train
