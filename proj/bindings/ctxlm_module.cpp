#include <pybind11/pybind11.h>
#include <pybind11/stl.h>
#include <pybind11/stl/filesystem.h>

#include "ctxlm/corpus.hpp"
#include "ctxlm/embedder.hpp"
#include "ctxlm/metrics.hpp"
#include "ctxlm/model.hpp"
#include "ctxlm/scoring.hpp"
#include "ctxlm/tokenizer.hpp"
#include "ctxlm/trainer.hpp"

namespace py = pybind11;
using namespace ctxlm;

namespace {

metrics::ScoreMatrix matrix_from_rows(const std::vector<std::vector<double>>& rows) {
  metrics::ScoreMatrix matrix;
  const auto n = static_cast<Eigen::Index>(rows.size());
  matrix.scores.resize(n, n);
  for (Eigen::Index j = 0; j < n; ++j) {
    if (static_cast<Eigen::Index>(rows[static_cast<std::size_t>(j)].size()) != n) {
      throw InvalidSpec("score matrix rows must be square");
    }
    for (Eigen::Index i = 0; i < n; ++i) {
      matrix.scores(j, i) = rows[static_cast<std::size_t>(j)][static_cast<std::size_t>(i)];
    }
  }
  return matrix;
}

}  // namespace

PYBIND11_MODULE(ctxlm, m) {
  m.doc() = "context-conditioned language modeling toolkit";

  py::register_exception<Error>(m, "CtxlmError");

  // ----------------------------------------------------------------- corpus
  m.def("normalize_text", &corpus::normalize_text, py::arg("raw"));
  m.def("canonical_keys", [] { return corpus::canonical_keys(); });
  m.def("metadata_keys", [] { return corpus::metadata_keys(); });

  py::class_<corpus::ContextSet>(m, "ContextSet")
      .def(py::init<>())
      .def("set", &corpus::ContextSet::set, py::arg("key"), py::arg("value"))
      .def("value",
           [](const corpus::ContextSet& self, const std::string& key) {
             return self.value_or_empty(key);
           })
      .def("keys",
           [](const corpus::ContextSet& self) {
             std::vector<std::string> keys;
             for (const auto& v : self.variables()) keys.push_back(v.key);
             return keys;
           })
      .def("__len__", &corpus::ContextSet::size);

  m.def("normalize_metadata",
        [](const corpus::ContextSet& ctx) { return corpus::normalize_metadata(ctx); },
        py::arg("ctx"));

  py::class_<corpus::SyntheticSpec>(m, "SyntheticSpec")
      .def(py::init<>())
      .def_readwrite("n_speakers", &corpus::SyntheticSpec::n_speakers)
      .def_readwrite("n_productions", &corpus::SyntheticSpec::n_productions)
      .def_readwrite("lines_per_speaker", &corpus::SyntheticSpec::lines_per_speaker)
      .def_readwrite("marker_strength", &corpus::SyntheticSpec::marker_strength)
      .def_readwrite("n_unseen_speakers", &corpus::SyntheticSpec::n_unseen_speakers);

  py::class_<corpus::CorpusSplits>(m, "CorpusSplits")
      .def(py::init<>())
      .def("counts",
           [](const corpus::CorpusSplits& self) {
             py::dict d;
             d["train"] = self.train.size();
             d["valid"] = self.valid.size();
             d["test"] = self.test.size();
             d["test_unseen"] = self.test_unseen.size();
             return d;
           })
      .def("speaker_ids",
           [](const corpus::CorpusSplits& self) {
             std::vector<std::string> ids;
             for (const auto& [id, profile] : self.speakers) ids.push_back(id);
             return ids;
           })
      .def("speaker_profile",
           [](const corpus::CorpusSplits& self, const std::string& id) {
             return self.speakers.at(id);
           })
      .def("utterances",
           [](const corpus::CorpusSplits& self, const std::string& split) {
             const auto parsed = corpus::split_from_name(split);
             if (!parsed) throw InvalidSpec("unknown split '" + split + "'");
             std::vector<std::string> out;
             for (const auto& s : self.split(*parsed)) out.push_back(s.utterance);
             return out;
           })
      .def("save", [](const corpus::CorpusSplits& self,
                      const std::filesystem::path& path) {
        corpus::save_corpus(self, path);
      });

  m.def("load_corpus",
        [](const std::filesystem::path& path, bool drop_unannotated) {
          corpus::LoadOptions options;
          options.drop_unannotated = drop_unannotated;
          return corpus::load_corpus(path, options);
        },
        py::arg("path"), py::arg("drop_unannotated") = false);
  m.def("generate_synthetic", &corpus::generate_synthetic, py::arg("seed"),
        py::arg("spec"));

  // --------------------------------------------------------------- tokenizer
  py::class_<bpe::BpeModel>(m, "BpeModel")
      .def_static(
          "train",
          [](const std::vector<std::string>& texts, int vocab_cap,
             bool byte_fallback) {
            return bpe::BpeModel::train(
                texts, {.vocab_cap = vocab_cap, .byte_fallback = byte_fallback});
          },
          py::arg("texts"), py::arg("vocab_cap") = 8000,
          py::arg("byte_fallback") = true)
      .def_static("load", &bpe::BpeModel::load, py::arg("path"))
      .def("save", &bpe::BpeModel::save, py::arg("path"))
      .def(
          "encode",
          [](const bpe::BpeModel& self, const std::string& text, bool bos,
             bool eos) {
            return self.encode(text, {.add_bos = bos, .add_eos = eos});
          },
          py::arg("text"), py::arg("bos") = false, py::arg("eos") = false)
      .def("decode",
           [](const bpe::BpeModel& self, const std::vector<int>& tokens) {
             return self.decode(tokens);
           })
      .def_property_readonly("vocab_size", &bpe::BpeModel::vocab_size)
      .def_property_readonly("merges", &bpe::BpeModel::merges)
      .def("unit", &bpe::BpeModel::unit_string, py::arg("token_id"));

  // ---------------------------------------------------------------- embedder
  py::class_<embed::Embedder>(m, "Embedder")
      .def(py::init([](int d_ctx, bool include_keys) {
             embed::EmbedderConfig cfg;
             cfg.d_ctx = d_ctx;
             cfg.include_keys = include_keys;
             return embed::Embedder(cfg);
           }),
           py::arg("d_ctx") = 384, py::arg("include_keys") = true)
      .def("embed_text",
           [](const embed::Embedder& self, const std::string& key,
              const std::string& value) {
             const auto v = self.embed_text(key, value);
             return py::make_tuple(
                 std::vector<float>(v.values.data(), v.values.data() + v.values.size()),
                 v.is_empty);
           })
      .def("context_vector_count",
           [](const embed::Embedder& self, const corpus::ContextSet& ctx) {
             return self.embed_context_set(ctx).size();
           });

  // ------------------------------------------------------------------- model
  py::class_<model::ArchConfig>(m, "ArchConfig")
      .def_static("contextual_tiny", &model::ArchConfig::contextual_tiny,
                  py::arg("vocab_size"), py::arg("d_ctx") = 64)
      .def_static("base_tiny", &model::ArchConfig::base_tiny, py::arg("vocab_size"))
      .def_static("contextual_paper", &model::ArchConfig::contextual_paper)
      .def_static("base_paper", &model::ArchConfig::base_paper)
      .def_readwrite("vocab_size", &model::ArchConfig::vocab_size)
      .def_readwrite("d_ctx", &model::ArchConfig::d_ctx)
      .def_readwrite("max_seq_len", &model::ArchConfig::max_seq_len)
      .def_readwrite("dropout", &model::ArchConfig::dropout)
      .def_property_readonly("kind", [](const model::ArchConfig& self) {
        return self.kind == model::Kind::contextual ? "contextual" : "base";
      });

  m.def("param_count", &model::param_count, py::arg("arch"));
  m.def("param_count_split", [](const model::ArchConfig& arch) {
    const auto split = model::param_count_split(arch);
    py::dict d;
    d["encoder"] = split.encoder;
    d["decoder"] = split.decoder;
    d["total"] = split.total;
    return d;
  });
  m.def("match_width", &model::match_width, py::arg("template_arch"),
        py::arg("target"));

  py::class_<model::ModelParameters>(m, "ModelParameters")
      .def_property_readonly("seed",
                             [](const model::ModelParameters& p) { return p.seed; })
      .def_property_readonly("arch",
                             [](const model::ModelParameters& p) { return p.arch; })
      .def("save", [](const model::ModelParameters& p,
                      const std::filesystem::path& path) {
        model::save_checkpoint(p, path);
      });

  m.def("init_params",
        [](const model::ArchConfig& arch, std::uint64_t seed) {
          return model::init_params<float>(arch, seed);
        },
        py::arg("arch"), py::arg("seed"));
  m.def("load_checkpoint", &model::load_checkpoint, py::arg("path"));
  m.def(
      "log_likelihood",
      [](const model::ModelParameters& params, const embed::Embedder& embedder,
         const corpus::ContextSet& ctx, const std::vector<int>& tokens) {
        const auto vectors = params.arch.kind == model::Kind::contextual
                                 ? embedder.embed_context_set(ctx)
                                 : std::vector<embed::ContextVector>{};
        const auto ll = model::log_likelihood<float>(params, vectors, tokens);
        return py::make_tuple(ll.per_token, ll.total);
      },
      py::arg("params"), py::arg("embedder"), py::arg("ctx"), py::arg("tokens"));

  // ----------------------------------------------------------------- trainer
  py::class_<train::TrainConfig>(m, "TrainConfig")
      .def(py::init<>())
      .def_readwrite("learning_rate", &train::TrainConfig::learning_rate)
      .def_readwrite("batch_tokens", &train::TrainConfig::batch_tokens)
      .def_readwrite("max_epochs", &train::TrainConfig::max_epochs)
      .def_readwrite("patience", &train::TrainConfig::patience)
      .def_readwrite("seed", &train::TrainConfig::seed)
      .def_property(
          "context_source",
          [](const train::TrainConfig& cfg) {
            return std::string(train::context_source_name(cfg.context_source));
          },
          [](train::TrainConfig& cfg, const std::string& name) {
            const auto source = train::context_source_from_name(name);
            if (!source) throw InvalidSpec("unknown context source '" + name + "'");
            cfg.context_source = *source;
          })
      .def_readwrite("metadata_mask", &train::TrainConfig::metadata_mask);

  m.def(
      "train",
      [](const model::ModelParameters& params, const corpus::CorpusSplits& corpus,
         const bpe::BpeModel& tokenizer, const embed::Embedder& embedder,
         const train::TrainConfig& cfg) {
        const train::Pipeline pipeline{&tokenizer, &embedder};
        auto result = train::train(params, corpus, pipeline, cfg);
        py::dict record;
        record["train_loss"] = result.record.train_loss;
        record["valid_loss"] = result.record.valid_loss;
        record["stopping_epoch"] = result.record.stopping_epoch;
        record["best_epoch"] = result.record.best_epoch;
        record["best_valid_loss"] = result.record.best_valid_loss;
        return py::make_tuple(std::move(result.params), record);
      },
      py::arg("params"), py::arg("corpus"), py::arg("tokenizer"),
      py::arg("embedder"), py::arg("config"));

  m.def(
      "lerp_scores",
      [](const model::ModelParameters& a, const model::ModelParameters& b,
         const std::vector<int>& tokens, double weight) {
        const auto result = train::lerp_scores(a, b, tokens, weight);
        return py::make_tuple(result.per_token, result.total);
      },
      py::arg("model_a"), py::arg("model_b"), py::arg("tokens"),
      py::arg("weight") = 0.5);

  // ----------------------------------------------------------------- metrics
  m.def("perplexity",
        [](const std::vector<double>& logprobs) { return metrics::perplexity(logprobs); },
        py::arg("per_token_logprobs"));
  m.def(
      "speaker_rr",
      [](const std::vector<std::vector<double>>& scores, int k) {
        return metrics::speaker_rr(matrix_from_rows(scores), k);
      },
      py::arg("scores"), py::arg("k"));
  m.def("smrr",
        [](const std::vector<std::vector<double>>& scores) {
          return metrics::smrr(matrix_from_rows(scores));
        },
        py::arg("scores"));
  m.def(
      "compare_runs",
      [](const std::vector<double>& a, const std::vector<double>& b,
         const std::string& direction) {
        metrics::Direction dir;
        if (direction == "a_greater") {
          dir = metrics::Direction::a_greater;
        } else if (direction == "b_greater") {
          dir = metrics::Direction::b_greater;
        } else {
          throw InvalidSpec("direction must be a_greater or b_greater");
        }
        const auto result = metrics::compare_runs(a, b, dir);
        py::dict d;
        d["t_stat"] = result.t_stat;
        d["significant"] = result.significant;
        d["degenerate_variance"] = result.degenerate_variance;
        return d;
      },
      py::arg("means_a"), py::arg("means_b"), py::arg("direction"));
  m.def(
      "segment_pmi",
      [](const model::ModelParameters& ctx_model,
         const model::ModelParameters& base_model, const embed::Embedder& embedder,
         const corpus::ContextSet& ctx, const std::vector<int>& hypothesis) {
        const auto segment =
            metrics::segment_pmi(ctx_model, base_model, embedder, ctx, hypothesis);
        return py::make_tuple(segment.per_token, segment.mean);
      },
      py::arg("ctx_model"), py::arg("base_model"), py::arg("embedder"),
      py::arg("ctx"), py::arg("hypothesis"));
}
