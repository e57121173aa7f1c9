#pragma once

#include "ctxlm/common.hpp"
#include "ctxlm/corpus.hpp"
#include "ctxlm/embedder.hpp"
#include "ctxlm/model.hpp"
#include "ctxlm/tokenizer.hpp"

#include <iosfwd>
#include <span>
#include <string>
#include <vector>

namespace ctxlm::metrics {

// ---------------------------------------------------------------------------
// Perplexity
// ---------------------------------------------------------------------------

/// exp(-mean(per_token_logprobs)), natural log base.
double perplexity(std::span<const double> per_token_logprobs);

// ---------------------------------------------------------------------------
// Speaker reciprocal rank
// ---------------------------------------------------------------------------

/// scores(j, i) = total log-likelihood of speaker i's utterance set under the
/// model personalised for speaker j.
struct ScoreMatrix {
  MatD scores;
  std::vector<std::string> speaker_ids;

  int n() const { return static_cast<int>(scores.rows()); }
  void validate() const;  // square, finite

  std::string to_csv() const;
  static ScoreMatrix from_csv(std::istream& in);
};

/// Reciprocal rank of the matching model for speaker k. Models are ranked by
/// scores(., k) descending; ties are pessimistic: the matching model takes
/// the worst position inside its tied block. `tie_tolerance` widens tie
/// equality beyond exact float equality.
double speaker_rr(const ScoreMatrix& matrix, int k, double tie_tolerance = 0.0);

/// Mean speaker_rr over all speakers; in [1/n, 1].
double smrr(const ScoreMatrix& matrix, double tie_tolerance = 0.0);

// ---------------------------------------------------------------------------
// PMI
// ---------------------------------------------------------------------------

/// The contextual/non-contextual model pair PMI is computed with. Both models
/// must share the tokenizer and vocabulary.
struct Tandem {
  const model::ModelParameters* ctx_model = nullptr;
  const model::ModelParameters* base_model = nullptr;
  const embed::Embedder* embedder = nullptr;
  const bpe::BpeModel* tokenizer = nullptr;

  void validate() const;  // VocabMismatch / InvalidArch
};

struct PmiSegment {
  std::vector<double> per_token;  // logp_ctx - logp_base per target token
  double mean = 0.0;
};

/// Per-token PMI of a tokenized hypothesis under a context set.
PmiSegment segment_pmi(const model::ModelParameters& ctx_model,
                       const model::ModelParameters& base_model,
                       const embed::Embedder& embedder,
                       const corpus::ContextSet& ctx,
                       const bpe::TokenSequence& hypothesis);

struct PmiItem {
  std::string id;
  corpus::ContextSet ctx;
  std::string hypothesis;
};

struct PmiReport {
  std::vector<std::string> segment_ids;
  std::vector<double> segment_means;
  std::vector<int> segment_tokens;
  double macro = 0.0;         // unweighted mean of segment means
  double micro = 0.0;         // token-weighted mean
  double stderr_macro = 0.0;  // sd(segment means)/sqrt(n)
  std::uint64_t run_seed = 0;

  std::size_t n() const { return segment_means.size(); }
  std::string to_csv() const;       // segment_id,n_tokens,pmi_mean
  std::string summary_json() const; // {macro, micro, n, stderr}
};

/// Corpus-level PMI: hypotheses are tokenized internally (BOS/EOS added) and
/// each segment is scored against its context set. The corpus mean is the
/// macro average; the micro (token-weighted) average is reported alongside.
PmiReport corpus_pmi(const Tandem& tandem, const std::vector<PmiItem>& items,
                     std::uint64_t run_seed = 0);

// ---------------------------------------------------------------------------
// Token deltas
// ---------------------------------------------------------------------------

struct TokenDelta {
  std::string token;
  double mean_delta = 0.0;
  std::int64_t count = 0;
};

struct SegmentDelta {
  std::string id;
  std::string text;
  double mean_delta = 0.0;
};

struct TokenDeltaOptions {
  int top_k = 10;
  int min_words = 4;       // word-length filter for the sentence lists
  std::int64_t min_count = 3;  // occurrence filter for the token lists
};

struct TokenDeltaReport {
  std::vector<TokenDelta> top_gaining_tokens;
  std::vector<TokenDelta> top_losing_tokens;
  std::vector<SegmentDelta> top_gaining_segments;
  std::vector<SegmentDelta> top_losing_segments;
  bool degenerate = false;  // all deltas zero, ranking meaningless

  std::string to_json() const;
};

/// Aggregates per-token PMI by token type and ranks the biggest gains and
/// losses, plus the top gaining/losing segments above the word-length filter.
TokenDeltaReport token_delta_report(const Tandem& tandem,
                                    const std::vector<PmiItem>& items,
                                    const TokenDeltaOptions& options = {});

// ---------------------------------------------------------------------------
// Run comparison
// ---------------------------------------------------------------------------

enum class Direction { a_greater, b_greater };

struct TTestResult {
  double t_stat = 0.0;
  bool significant = false;
  bool degenerate_variance = false;  // zero-variance differences
};

/// Paired one-tailed t-test over exactly five runs per side; significant when
/// t > 1.65 (df = 4) in the hypothesized direction.
TTestResult compare_runs(std::span<const double> means_a,
                         std::span<const double> means_b, Direction direction);

inline constexpr double kSignificanceThreshold = 1.65;

}  // namespace ctxlm::metrics
