#pragma once

#include "ctxlm/common.hpp"
#include "ctxlm/corpus.hpp"
#include "ctxlm/embedder.hpp"
#include "ctxlm/model.hpp"
#include "ctxlm/tokenizer.hpp"

#include <cstdint>
#include <set>
#include <string>
#include <vector>

#include <nlohmann/json_fwd.hpp>

namespace ctxlm::train {

enum class ContextSource { past_dialogue, metadata, none };

const char* context_source_name(ContextSource s);
std::optional<ContextSource> context_source_from_name(std::string_view name);

struct TrainConfig {
  double learning_rate = 3e-3;
  int batch_tokens = 2000;
  int max_epochs = 40;
  int patience = 5;
  std::uint64_t seed = 1;
  ContextSource context_source = ContextSource::metadata;
  /// Metadata keys fed to the context encoder; empty = all metadata keys.
  std::set<std::string> metadata_mask;

  // Optimizer defaults, recorded in every RunRecord. The schedule is linear
  // warmup over 4% of the step budget, then inverse-sqrt decay.
  double weight_decay = 0.01;
  double beta1 = 0.9;
  double beta2 = 0.98;
  double adam_eps = 1e-8;
  double warmup_frac = 0.04;
  double grad_clip = 1.0;
  /// An epoch improves only when validation loss drops by at least this much.
  double min_improvement = 1e-5;

  void validate() const;
  nlohmann::json to_json() const;
  static TrainConfig from_json(const nlohmann::json& j);
};

struct RunRecord {
  std::vector<double> train_loss;  // per epoch
  std::vector<double> valid_loss;  // per epoch
  int stopping_epoch = 0;          // number of epochs actually run
  int best_epoch = 0;              // 1-based epoch of the returned parameters
  double best_valid_loss = 0.0;
  std::string config_json;         // config snapshot

  /// CSV rows: epoch,train_loss,valid_loss
  std::string to_csv() const;
};

/// Tracks best validation loss; stop after `patience` epochs without an
/// improvement of at least `min_delta`.
class EarlyStopper {
 public:
  EarlyStopper(int patience, double min_delta)
      : patience_(patience), min_delta_(min_delta) {}

  /// Feeds one epoch's validation loss; returns true if it improved on the
  /// best seen so far.
  bool update(double loss);
  bool should_stop() const { return bad_epochs_ >= patience_; }
  double best() const { return best_; }

 private:
  int patience_;
  double min_delta_;
  double best_ = std::numeric_limits<double>::infinity();
  int bad_epochs_ = 0;
};

struct TrainResult {
  model::ModelParameters params;
  RunRecord record;
};

struct Pipeline {
  const bpe::BpeModel* tokenizer = nullptr;
  const embed::Embedder* embedder = nullptr;
};

/// Minibatch training with token-budget batches, AdamW-style updates and
/// early stopping on validation loss; returns the best-validation parameters.
TrainResult train(const model::ModelParameters& params,
                  const corpus::CorpusSplits& corpus, const Pipeline& pipeline,
                  const TrainConfig& cfg);

/// Two-stage speaker adaptation: ft1 trains on the full train split with no
/// context, sp continues from ft1 on the speaker's own samples.
struct SpeakerFinetune {
  model::ModelParameters ft1;
  model::ModelParameters sp;
  RunRecord ft1_record;
  RunRecord sp_record;
};
SpeakerFinetune speaker_finetune_pipeline(const model::ModelParameters& pretrained,
                                          const corpus::CorpusSplits& corpus,
                                          const std::string& speaker_id,
                                          const Pipeline& pipeline,
                                          const TrainConfig& cfg);

/// Probability-space interpolation of two base-kind models: per position,
/// p = weight*p_a + (1-weight)*p_b, then log. Returns the per-target-token
/// log probabilities (positions 1..|tokens|-1).
struct LerpResult {
  std::vector<double> per_token;
  double total = 0.0;
};
LerpResult lerp_scores(const model::ModelParameters& model_a,
                       const model::ModelParameters& model_b,
                       const bpe::TokenSequence& tokens, double weight = 0.5);

/// Full interpolated distributions per position (rows sum to 1).
MatD lerp_distributions(const model::ModelParameters& model_a,
                        const model::ModelParameters& model_b,
                        const bpe::TokenSequence& tokens, double weight = 0.5);

/// Builds the context set a sample is conditioned on: registry profiles for
/// metadata (filtered by mask), the sample's doc.past_* slots for
/// past_dialogue, empty for none.
corpus::ContextSet context_for(const corpus::Sample& sample,
                               const corpus::CorpusSplits& corpus,
                               ContextSource source,
                               const std::set<std::string>& mask);

}  // namespace ctxlm::train
