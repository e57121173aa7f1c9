#include "ctxlm/scoring.hpp"

#include <nlohmann/json.hpp>

#include <algorithm>
#include <atomic>
#include <fstream>
#include <thread>

namespace ctxlm::scoring {

using json = nlohmann::json;

std::string sample_id(corpus::Split split, std::size_t index) {
  return std::string(corpus::split_name(split)) + "/" + std::to_string(index);
}

namespace {

void parallel_for(std::size_t count, int threads, const std::function<void(std::size_t)>& fn) {
  if (threads <= 1 || count < 2) {
    for (std::size_t i = 0; i < count; ++i) fn(i);
    return;
  }
  std::atomic<std::size_t> next{0};
  auto worker = [&]() {
    for (std::size_t i = next.fetch_add(1); i < count; i = next.fetch_add(1)) {
      fn(i);
    }
  };
  std::vector<std::thread> pool;
  const int n_threads = std::min<int>(threads, static_cast<int>(count));
  pool.reserve(static_cast<std::size_t>(n_threads));
  for (int t = 0; t < n_threads; ++t) pool.emplace_back(worker);
  for (auto& t : pool) t.join();
}

}  // namespace

SplitPerplexity split_perplexity(const model::ModelParameters& params,
                                 const train::Pipeline& pipeline,
                                 const corpus::CorpusSplits& corpus,
                                 corpus::Split split,
                                 train::ContextSource source,
                                 const std::set<std::string>& mask, int threads) {
  const auto& samples = corpus.split(split);
  if (samples.empty()) {
    throw EmptySplit(corpus::split_name(split));
  }
  SplitPerplexity out;
  out.sample_ids.resize(samples.size());
  out.sample_ppl.resize(samples.size());
  out.sample_tokens.resize(samples.size());
  std::vector<double> totals(samples.size(), 0.0);

  parallel_for(samples.size(), threads, [&](std::size_t i) {
    const auto& s = samples[i];
    const bpe::TokenSequence tokens =
        pipeline.tokenizer->encode(s.utterance, {.add_bos = true, .add_eos = true});
    std::vector<embed::ContextVector> ctx;
    if (params.arch.kind == model::Kind::contextual) {
      ctx = pipeline.embedder->embed_context_set(
          train::context_for(s, corpus, source, mask));
    }
    const auto ll = model::log_likelihood<float>(params, ctx, tokens);
    out.sample_ids[i] = sample_id(split, i);
    out.sample_tokens[i] = static_cast<int>(ll.per_token.size());
    out.sample_ppl[i] =
        ll.per_token.empty()
            ? 0.0
            : std::exp(-static_cast<double>(ll.total) /
                       static_cast<double>(ll.per_token.size()));
    totals[i] = ll.total;
  });

  double nll = 0.0;
  for (std::size_t i = 0; i < samples.size(); ++i) {
    nll -= totals[i];
    out.tokens += out.sample_tokens[i];
  }
  if (out.tokens == 0) throw EmptySplit("no target tokens in split");
  out.ppl = std::exp(nll / static_cast<double>(out.tokens));
  return out;
}

ProfileScorer contextual_scorer(const model::ModelParameters& params,
                                const train::Pipeline& pipeline, bool total) {
  return [&params, &pipeline, total](
             const corpus::ContextSet& profile,
             const std::vector<const corpus::Sample*>& utterances) {
    const auto ctx = pipeline.embedder->embed_context_set(profile);
    double sum = 0.0;
    std::int64_t tokens = 0;
    for (const corpus::Sample* s : utterances) {
      const bpe::TokenSequence ids = pipeline.tokenizer->encode(
          s->utterance, {.add_bos = true, .add_eos = true});
      const auto ll = model::log_likelihood<float>(params, ctx, ids);
      sum += ll.total;
      tokens += static_cast<std::int64_t>(ll.per_token.size());
    }
    return total || tokens == 0 ? sum : sum / static_cast<double>(tokens);
  };
}

ProfileScorer base_scorer(const model::ModelParameters& params,
                          const train::Pipeline& pipeline, bool total) {
  return [&params, &pipeline, total](
             const corpus::ContextSet&,
             const std::vector<const corpus::Sample*>& utterances) {
    const std::vector<embed::ContextVector> no_ctx;
    double sum = 0.0;
    std::int64_t tokens = 0;
    for (const corpus::Sample* s : utterances) {
      const bpe::TokenSequence ids = pipeline.tokenizer->encode(
          s->utterance, {.add_bos = true, .add_eos = true});
      const auto ll = model::log_likelihood<float>(params, no_ctx, ids);
      sum += ll.total;
      tokens += static_cast<std::int64_t>(ll.per_token.size());
    }
    return total || tokens == 0 ? sum : sum / static_cast<double>(tokens);
  };
}

SpeakerSets collect_speaker_sets(const corpus::CorpusSplits& corpus,
                                 corpus::Split split,
                                 const std::set<std::string>& mask) {
  const auto& samples = corpus.split(split);
  if (samples.empty()) throw EmptySplit(corpus::split_name(split));

  std::map<std::string, std::vector<const corpus::Sample*>> by_speaker;
  for (const auto& s : samples) by_speaker[s.speaker_id].push_back(&s);

  const std::set<std::string> effective =
      mask.empty() ? std::set<std::string>(corpus::metadata_keys().begin(),
                                           corpus::metadata_keys().end())
                   : mask;

  SpeakerSets sets;
  for (auto& [speaker_id, utterances] : by_speaker) {
    corpus::ContextSet profile;
    auto sp = corpus.speakers.find(speaker_id);
    if (sp != corpus.speakers.end()) profile = sp->second;
    auto pr = corpus.productions.find(utterances.front()->production_id);
    if (pr != corpus.productions.end()) {
      profile = profile.merged_with(pr->second);
    }
    sets.speaker_ids.push_back(speaker_id);
    sets.profiles.push_back(profile.select(effective));
    sets.utterances.push_back(std::move(utterances));
  }
  return sets;
}

metrics::ScoreMatrix build_score_matrix(const SpeakerSets& sets,
                                        const ProfileScorer& scorer,
                                        int threads) {
  const auto n = sets.speaker_ids.size();
  metrics::ScoreMatrix matrix;
  matrix.speaker_ids = sets.speaker_ids;
  matrix.scores.resize(static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(n));

  parallel_for(n * n, threads, [&](std::size_t cell) {
    const auto j = static_cast<Eigen::Index>(cell / n);  // model / profile
    const auto i = static_cast<Eigen::Index>(cell % n);  // utterance set
    matrix.scores(j, i) =
        scorer(sets.profiles[static_cast<std::size_t>(j)],
               sets.utterances[static_cast<std::size_t>(i)]);
  });
  return matrix;
}

std::map<std::string, std::string> load_hypotheses(
    const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ParseError("cannot open hypotheses file: " + path.string());
  std::map<std::string, std::string> out;
  std::string line;
  int line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    json record;
    try {
      record = json::parse(line);
    } catch (const json::exception& e) {
      throw ParseError("hypotheses line " + std::to_string(line_no) + ": " +
                       e.what());
    }
    if (!record.contains("sample_id") || !record["sample_id"].is_string() ||
        !record.contains("hypothesis") || !record["hypothesis"].is_string()) {
      throw ParseError("hypotheses line " + std::to_string(line_no) +
                       ": expected {\"sample_id\", \"hypothesis\"}");
    }
    out[record["sample_id"].get<std::string>()] =
        record["hypothesis"].get<std::string>();
  }
  return out;
}

std::vector<metrics::PmiItem> pmi_items_for_split(
    const corpus::CorpusSplits& corpus, corpus::Split split,
    const std::set<std::string>& mask,
    const std::map<std::string, std::string>* hypotheses,
    std::optional<std::uint64_t> permute_seed) {
  const auto& samples = corpus.split(split);
  if (samples.empty()) throw EmptySplit(corpus::split_name(split));

  std::vector<metrics::PmiItem> items;
  items.reserve(samples.size());
  for (std::size_t i = 0; i < samples.size(); ++i) {
    metrics::PmiItem item;
    item.id = sample_id(split, i);
    item.ctx = train::context_for(samples[i], corpus,
                                  train::ContextSource::metadata, mask);
    if (hypotheses != nullptr) {
      auto it = hypotheses->find(item.id);
      if (it == hypotheses->end()) {
        throw ParseError("no hypothesis for sample '" + item.id + "'");
      }
      item.hypothesis = corpus::normalize_text(it->second);
    } else {
      item.hypothesis = samples[i].utterance;
    }
    items.push_back(std::move(item));
  }

  if (permute_seed) {
    std::vector<std::size_t> order(items.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    Rng rng(*permute_seed);
    rng.shuffle(order);
    std::vector<corpus::ContextSet> contexts;
    contexts.reserve(items.size());
    for (const auto& item : items) contexts.push_back(item.ctx);
    for (std::size_t i = 0; i < items.size(); ++i) {
      items[i].ctx = contexts[order[i]];
    }
  }
  return items;
}

}  // namespace ctxlm::scoring
