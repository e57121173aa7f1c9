#include "ctxlm/metrics.hpp"

#include <nlohmann/json.hpp>

#include <algorithm>
#include <cmath>
#include <limits>
#include <map>
#include <sstream>

namespace ctxlm::metrics {

using json = nlohmann::json;

// ---------------------------------------------------------------------------
// Perplexity
// ---------------------------------------------------------------------------

double perplexity(std::span<const double> per_token_logprobs) {
  if (per_token_logprobs.empty()) {
    throw EmptyInput("perplexity needs at least one token");
  }
  double sum = 0.0;
  for (const double lp : per_token_logprobs) sum += lp;
  return std::exp(-sum / static_cast<double>(per_token_logprobs.size()));
}

// ---------------------------------------------------------------------------
// ScoreMatrix / sMRR
// ---------------------------------------------------------------------------

void ScoreMatrix::validate() const {
  if (scores.rows() != scores.cols()) {
    throw InvalidSpec("score matrix must be square");
  }
  if (!speaker_ids.empty() &&
      static_cast<Eigen::Index>(speaker_ids.size()) != scores.rows()) {
    throw InvalidSpec("speaker registry size must match the matrix");
  }
  for (Eigen::Index j = 0; j < scores.rows(); ++j) {
    for (Eigen::Index i = 0; i < scores.cols(); ++i) {
      if (!std::isfinite(scores(j, i))) {
        throw InvalidSpec("score matrix entries must be finite");
      }
    }
  }
}

std::string ScoreMatrix::to_csv() const {
  std::ostringstream out;
  out.precision(17);
  out << "model_id";
  for (int i = 0; i < n(); ++i) {
    out << ',' << (speaker_ids.empty() ? "s" + std::to_string(i) : speaker_ids[i]);
  }
  out << '\n';
  for (int j = 0; j < n(); ++j) {
    out << (speaker_ids.empty() ? "s" + std::to_string(j) : speaker_ids[j]);
    for (int i = 0; i < n(); ++i) out << ',' << scores(j, i);
    out << '\n';
  }
  return out.str();
}

ScoreMatrix ScoreMatrix::from_csv(std::istream& in) {
  std::string line;
  if (!std::getline(in, line)) throw ParseError("empty score matrix file");
  auto split = [](const std::string& l) {
    std::vector<std::string> cells;
    std::stringstream ss(l);
    std::string cell;
    while (std::getline(ss, cell, ',')) cells.push_back(cell);
    return cells;
  };
  const auto header = split(line);
  if (header.size() < 2) throw ParseError("score matrix header too short");
  const int n = static_cast<int>(header.size()) - 1;

  ScoreMatrix matrix;
  matrix.scores.resize(n, n);
  matrix.speaker_ids.assign(header.begin() + 1, header.end());
  int row = 0;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    if (row >= n) throw ParseError("score matrix has too many rows");
    const auto cells = split(line);
    if (static_cast<int>(cells.size()) != n + 1) {
      throw ParseError("score matrix row " + std::to_string(row + 1) +
                       " has wrong arity");
    }
    for (int i = 0; i < n; ++i) {
      try {
        matrix.scores(row, i) = std::stod(cells[i + 1]);
      } catch (const std::exception&) {
        throw ParseError("bad number in score matrix row " +
                         std::to_string(row + 1));
      }
    }
    ++row;
  }
  if (row != n) throw ParseError("score matrix is not square");
  matrix.validate();
  return matrix;
}

double speaker_rr(const ScoreMatrix& matrix, int k, double tie_tolerance) {
  matrix.validate();
  const int n = matrix.n();
  if (k < 0 || k >= n) throw InvalidSpec("speaker index out of range");
  const double own = matrix.scores(k, k);
  // Pessimistic rank: every strictly better model plus the whole tied block.
  int rank = 0;
  for (int j = 0; j < n; ++j) {
    const double s = matrix.scores(j, k);
    if (s > own + tie_tolerance || std::abs(s - own) <= tie_tolerance) ++rank;
  }
  return 1.0 / static_cast<double>(rank);
}

double smrr(const ScoreMatrix& matrix, double tie_tolerance) {
  matrix.validate();
  const int n = matrix.n();
  if (n == 0) throw EmptyInput("empty score matrix");
  double sum = 0.0;
  for (int k = 0; k < n; ++k) sum += speaker_rr(matrix, k, tie_tolerance);
  return sum / static_cast<double>(n);
}

// ---------------------------------------------------------------------------
// PMI
// ---------------------------------------------------------------------------

void Tandem::validate() const {
  if (ctx_model == nullptr || base_model == nullptr || embedder == nullptr ||
      tokenizer == nullptr) {
    throw InvalidSpec("tandem needs both models, an embedder and a tokenizer");
  }
  if (ctx_model->arch.vocab_size != base_model->arch.vocab_size) {
    throw VocabMismatch(std::to_string(ctx_model->arch.vocab_size) + " vs " +
                        std::to_string(base_model->arch.vocab_size));
  }
  if (ctx_model->arch.kind != model::Kind::contextual) {
    throw InvalidArch("tandem ctx_model must be contextual kind");
  }
  if (base_model->arch.kind != model::Kind::base) {
    throw InvalidArch("tandem base_model must be base kind");
  }
  if (tokenizer->vocab_size() != ctx_model->arch.vocab_size) {
    throw VocabMismatch("tokenizer vocab " +
                        std::to_string(tokenizer->vocab_size()) +
                        " vs model vocab " +
                        std::to_string(ctx_model->arch.vocab_size));
  }
}

PmiSegment segment_pmi(const model::ModelParameters& ctx_model,
                       const model::ModelParameters& base_model,
                       const embed::Embedder& embedder,
                       const corpus::ContextSet& ctx,
                       const bpe::TokenSequence& hypothesis) {
  if (ctx_model.arch.vocab_size != base_model.arch.vocab_size) {
    throw VocabMismatch(std::to_string(ctx_model.arch.vocab_size) + " vs " +
                        std::to_string(base_model.arch.vocab_size));
  }
  PmiSegment segment;
  if (hypothesis.size() < 2) return segment;

  const auto ctx_vectors = embedder.embed_context_set(ctx);
  const auto ll_ctx = model::log_likelihood<float>(ctx_model, ctx_vectors, hypothesis);
  const std::vector<embed::ContextVector> no_ctx;
  const auto ll_base = model::log_likelihood<float>(base_model, no_ctx, hypothesis);

  segment.per_token.resize(ll_ctx.per_token.size());
  double sum = 0.0;
  for (std::size_t t = 0; t < ll_ctx.per_token.size(); ++t) {
    segment.per_token[t] = static_cast<double>(ll_ctx.per_token[t]) -
                           static_cast<double>(ll_base.per_token[t]);
    sum += segment.per_token[t];
  }
  segment.mean = sum / static_cast<double>(segment.per_token.size());
  return segment;
}

PmiReport corpus_pmi(const Tandem& tandem, const std::vector<PmiItem>& items,
                     std::uint64_t run_seed) {
  tandem.validate();
  if (items.empty()) throw EmptyInput("corpus_pmi needs at least one segment");

  PmiReport report;
  report.run_seed = run_seed;
  double micro_sum = 0.0;
  std::int64_t micro_tokens = 0;
  for (const auto& item : items) {
    const bpe::TokenSequence tokens =
        tandem.tokenizer->encode(item.hypothesis, {.add_bos = true, .add_eos = true});
    const PmiSegment segment = segment_pmi(*tandem.ctx_model, *tandem.base_model,
                                           *tandem.embedder, item.ctx, tokens);
    if (segment.per_token.empty()) continue;
    report.segment_ids.push_back(item.id);
    report.segment_means.push_back(segment.mean);
    report.segment_tokens.push_back(static_cast<int>(segment.per_token.size()));
    for (const double v : segment.per_token) micro_sum += v;
    micro_tokens += static_cast<std::int64_t>(segment.per_token.size());
  }
  if (report.segment_means.empty()) {
    throw EmptyInput("no scorable segments (all hypotheses empty)");
  }

  const auto n = static_cast<double>(report.segment_means.size());
  double macro_sum = 0.0;
  for (const double m : report.segment_means) macro_sum += m;
  report.macro = macro_sum / n;
  report.micro = micro_sum / static_cast<double>(micro_tokens);

  double sq = 0.0;
  for (const double m : report.segment_means) {
    sq += (m - report.macro) * (m - report.macro);
  }
  report.stderr_macro =
      report.segment_means.size() > 1 ? std::sqrt(sq / (n - 1.0) / n) : 0.0;
  return report;
}

std::string PmiReport::to_csv() const {
  std::ostringstream out;
  out.precision(10);
  out << "segment_id,n_tokens,pmi_mean\n";
  for (std::size_t i = 0; i < segment_means.size(); ++i) {
    out << segment_ids[i] << ',' << segment_tokens[i] << ',' << segment_means[i]
        << '\n';
  }
  return out.str();
}

std::string PmiReport::summary_json() const {
  json j;
  j["macro"] = macro;
  j["micro"] = micro;
  j["n"] = n();
  j["stderr"] = stderr_macro;
  j["run_seed"] = run_seed;
  return j.dump(2);
}

// ---------------------------------------------------------------------------
// Token deltas
// ---------------------------------------------------------------------------

namespace {

int word_count(const std::string& text) {
  int words = 0;
  bool in_word = false;
  for (const char c : text) {
    const bool ws = c == ' ' || c == '\t';
    if (!ws && !in_word) ++words;
    in_word = !ws;
  }
  return words;
}

}  // namespace

TokenDeltaReport token_delta_report(const Tandem& tandem,
                                    const std::vector<PmiItem>& items,
                                    const TokenDeltaOptions& options) {
  tandem.validate();
  struct Acc {
    double sum = 0.0;
    std::int64_t count = 0;
  };
  std::map<int, Acc> per_type;
  std::vector<SegmentDelta> segments;
  bool any_nonzero = false;

  for (const auto& item : items) {
    const bpe::TokenSequence tokens =
        tandem.tokenizer->encode(item.hypothesis, {.add_bos = true, .add_eos = true});
    const PmiSegment segment = segment_pmi(*tandem.ctx_model, *tandem.base_model,
                                           *tandem.embedder, item.ctx, tokens);
    if (segment.per_token.empty()) continue;
    for (std::size_t t = 0; t < segment.per_token.size(); ++t) {
      Acc& acc = per_type[tokens[t + 1]];
      acc.sum += segment.per_token[t];
      ++acc.count;
      any_nonzero |= segment.per_token[t] != 0.0;
    }
    if (word_count(item.hypothesis) >= options.min_words) {
      segments.push_back({item.id, item.hypothesis, segment.mean});
    }
  }

  TokenDeltaReport report;
  report.degenerate = !any_nonzero;

  std::vector<TokenDelta> deltas;
  for (const auto& [token_id, acc] : per_type) {
    if (acc.count < options.min_count) continue;
    deltas.push_back({tandem.tokenizer->unit_string(token_id),
                      acc.sum / static_cast<double>(acc.count), acc.count});
  }
  std::sort(deltas.begin(), deltas.end(), [](const TokenDelta& a, const TokenDelta& b) {
    return a.mean_delta != b.mean_delta ? a.mean_delta > b.mean_delta
                                        : a.token < b.token;
  });
  const auto k = static_cast<std::size_t>(options.top_k);
  for (std::size_t i = 0; i < deltas.size() && i < k; ++i) {
    report.top_gaining_tokens.push_back(deltas[i]);
  }
  for (std::size_t i = 0; i < deltas.size() && i < k; ++i) {
    report.top_losing_tokens.push_back(deltas[deltas.size() - 1 - i]);
  }

  std::sort(segments.begin(), segments.end(),
            [](const SegmentDelta& a, const SegmentDelta& b) {
              return a.mean_delta != b.mean_delta ? a.mean_delta > b.mean_delta
                                                  : a.id < b.id;
            });
  for (std::size_t i = 0; i < segments.size() && i < k; ++i) {
    report.top_gaining_segments.push_back(segments[i]);
  }
  for (std::size_t i = 0; i < segments.size() && i < k; ++i) {
    report.top_losing_segments.push_back(segments[segments.size() - 1 - i]);
  }
  return report;
}

std::string TokenDeltaReport::to_json() const {
  auto token_json = [](const std::vector<TokenDelta>& v) {
    json arr = json::array();
    for (const auto& d : v) {
      arr.push_back({{"token", d.token},
                     {"mean_delta", d.mean_delta},
                     {"count", d.count}});
    }
    return arr;
  };
  auto segment_json = [](const std::vector<SegmentDelta>& v) {
    json arr = json::array();
    for (const auto& d : v) {
      arr.push_back(
          {{"id", d.id}, {"text", d.text}, {"mean_delta", d.mean_delta}});
    }
    return arr;
  };
  json j;
  j["degenerate"] = degenerate;
  j["top_gaining_tokens"] = token_json(top_gaining_tokens);
  j["top_losing_tokens"] = token_json(top_losing_tokens);
  j["top_gaining_segments"] = segment_json(top_gaining_segments);
  j["top_losing_segments"] = segment_json(top_losing_segments);
  return j.dump(2);
}

// ---------------------------------------------------------------------------
// compare_runs
// ---------------------------------------------------------------------------

TTestResult compare_runs(std::span<const double> means_a,
                         std::span<const double> means_b, Direction direction) {
  constexpr std::size_t kRuns = 5;
  if (means_a.size() != kRuns || means_b.size() != kRuns) {
    throw InsufficientRuns("compare_runs takes exactly five paired values");
  }
  std::array<double, kRuns> diffs;
  for (std::size_t i = 0; i < kRuns; ++i) {
    diffs[i] = direction == Direction::a_greater ? means_a[i] - means_b[i]
                                                 : means_b[i] - means_a[i];
  }
  double mean = 0.0;
  for (const double d : diffs) mean += d;
  mean /= kRuns;
  double sq = 0.0;
  for (const double d : diffs) sq += (d - mean) * (d - mean);
  const double sd = std::sqrt(sq / (kRuns - 1));

  TTestResult result;
  if (sd == 0.0) {
    result.degenerate_variance = true;
    if (mean > 0.0) {
      result.t_stat = std::numeric_limits<double>::infinity();
      result.significant = true;
    } else if (mean < 0.0) {
      result.t_stat = -std::numeric_limits<double>::infinity();
    } else {
      result.t_stat = 0.0;
    }
    return result;
  }
  result.t_stat = mean / (sd / std::sqrt(static_cast<double>(kRuns)));
  result.significant = result.t_stat > kSignificanceThreshold;
  return result;
}

}  // namespace ctxlm::metrics
