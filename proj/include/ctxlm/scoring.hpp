#pragma once

#include "ctxlm/corpus.hpp"
#include "ctxlm/metrics.hpp"
#include "ctxlm/model.hpp"
#include "ctxlm/trainer.hpp"

#include <filesystem>
#include <functional>
#include <map>
#include <set>
#include <string>
#include <vector>

namespace ctxlm::scoring {

/// Stable derived identifier for the i-th sample of a split: "<split>/<i>".
std::string sample_id(corpus::Split split, std::size_t index);

struct SplitPerplexity {
  double ppl = 0.0;
  std::int64_t tokens = 0;
  std::vector<std::string> sample_ids;
  std::vector<double> sample_ppl;
  std::vector<int> sample_tokens;
};

/// Token-level perplexity of a model over one split, conditioning each sample
/// per `source`/`mask`.
SplitPerplexity split_perplexity(const model::ModelParameters& params,
                                 const train::Pipeline& pipeline,
                                 const corpus::CorpusSplits& corpus,
                                 corpus::Split split,
                                 train::ContextSource source,
                                 const std::set<std::string>& mask, int threads = 1);

/// Scores one speaker's utterance set under one speaker profile; the sMRR
/// machinery is agnostic to what kind of model sits behind it.
using ProfileScorer = std::function<double(
    const corpus::ContextSet& profile,
    const std::vector<const corpus::Sample*>& utterances)>;

/// Contextual scorer: one parameter set conditioned on the given profile.
/// `total` selects total (default) vs mean log-likelihood per utterance set.
ProfileScorer contextual_scorer(const model::ModelParameters& params,
                                const train::Pipeline& pipeline,
                                bool total = true);

/// Base scorer: ignores the profile entirely, so all rows tie exactly.
ProfileScorer base_scorer(const model::ModelParameters& params,
                          const train::Pipeline& pipeline, bool total = true);

/// Speakers of a split in sorted id order, with their conditioning profiles
/// (speaker profile merged with their production's profile, filtered by
/// mask) and utterance sets.
struct SpeakerSets {
  std::vector<std::string> speaker_ids;
  std::vector<corpus::ContextSet> profiles;
  std::vector<std::vector<const corpus::Sample*>> utterances;
};
SpeakerSets collect_speaker_sets(const corpus::CorpusSplits& corpus,
                                 corpus::Split split,
                                 const std::set<std::string>& mask);

/// n x n matrix: scores(j, i) = scorer(profile_j, utterances_i). Cells are
/// computed in parallel; assembly order is fixed so results are
/// deterministic regardless of thread count.
metrics::ScoreMatrix build_score_matrix(const SpeakerSets& sets,
                                        const ProfileScorer& scorer,
                                        int threads = 1);

/// JSONL hypotheses: {"sample_id": str, "hypothesis": str} per line.
std::map<std::string, std::string> load_hypotheses(
    const std::filesystem::path& path);

/// PMI items for a split. Hypotheses default to the utterances themselves;
/// when a hypothesis map is given, every sample id must resolve.
/// `permute_seed` shuffles the context assignment across samples (the
/// mismatched-context null).
std::vector<metrics::PmiItem> pmi_items_for_split(
    const corpus::CorpusSplits& corpus, corpus::Split split,
    const std::set<std::string>& mask,
    const std::map<std::string, std::string>* hypotheses = nullptr,
    std::optional<std::uint64_t> permute_seed = std::nullopt);

}  // namespace ctxlm::scoring
