"""Smoke tests for the python module: the main operations round-trip through
the bindings and agree with values computable by hand."""

import math
import os
import sys

import pytest

sys.path.insert(0, os.environ.get("CTXLM_PY_DIR", "."))

ctxlm = pytest.importorskip("ctxlm")


def test_normalize_text():
    assert ctxlm.normalize_text("<i>Hello</i>") == "Hello"
    assert ctxlm.normalize_text("Wait.. what") == "Wait... what"
    assert ctxlm.normalize_text("  a   b ") == "a b"


def test_registry_and_metadata():
    assert len(ctxlm.canonical_keys()) == 17
    assert len(ctxlm.metadata_keys()) == 14
    ctx = ctxlm.ContextSet()
    ctx.set("production.pg_rating", "R")
    normalized = ctxlm.normalize_metadata(ctx)
    assert normalized.value("production.pg_rating") == "PG Rating: R"


def test_synthetic_corpus_counts():
    spec = ctxlm.SyntheticSpec()
    spec.n_speakers = 4
    spec.n_productions = 2
    spec.lines_per_speaker = 20
    spec.n_unseen_speakers = 2
    corpus = ctxlm.generate_synthetic(5, spec)
    counts = corpus.counts()
    assert counts["test_unseen"] == 40
    assert counts["train"] + counts["valid"] + counts["test"] == 80
    assert len(corpus.speaker_ids()) == 6


def test_tokenizer_round_trip():
    model = ctxlm.BpeModel.train(["abab", "abab"], vocab_cap=10,
                                 byte_fallback=False)
    assert model.merges[0] == ("a", "b")
    for text in ["ab", "abab ab", "ba"]:
        assert model.decode(model.encode(text)) == text
    with_specials = model.encode("ab", bos=True, eos=True)
    assert with_specials[0] == 1 and with_specials[-1] == 2


def test_embedder():
    embedder = ctxlm.Embedder(d_ctx=64)
    values, empty = embedder.embed_text("speaker.profession", "Spy")
    assert not empty
    assert abs(math.sqrt(sum(v * v for v in values)) - 1.0) < 1e-6
    _, empty2 = embedder.embed_text("speaker.profession", "")
    assert empty2


def test_param_accounting():
    arch = ctxlm.ArchConfig.contextual_paper()
    split = ctxlm.param_count_split(arch)
    assert abs(split["encoder"] - 38e6) < 0.02 * 38e6
    assert abs(split["decoder"] - 121e6) < 0.02 * 121e6
    assert abs(split["total"] - 159e6) < 0.02 * 159e6
    tiny = ctxlm.ArchConfig.contextual_tiny(512)
    matched = ctxlm.match_width(ctxlm.ArchConfig.base_tiny(512),
                                ctxlm.param_count(tiny))
    assert abs(ctxlm.param_count(matched) - ctxlm.param_count(tiny)) <= (
        ctxlm.param_count(tiny) // 100)


def test_uniform_model_scoring():
    model = ctxlm.BpeModel.train(["some words here", "more words"],
                                 vocab_cap=64, byte_fallback=False)
    arch = ctxlm.ArchConfig.base_tiny(model.vocab_size)
    params = ctxlm.init_params(arch, seed=7)
    embedder = ctxlm.Embedder(d_ctx=64)
    tokens = model.encode("some words", bos=True, eos=True)
    per_token, total = ctxlm.log_likelihood(params, embedder,
                                            ctxlm.ContextSet(), tokens)
    assert len(per_token) == len(tokens) - 1
    assert abs(total - sum(per_token)) < 1e-4
    ppl = ctxlm.perplexity(per_token)
    assert ppl > 1.0


def test_metrics():
    full_tie = [[1.0] * 5 for _ in range(5)]
    assert ctxlm.smrr(full_tie) == pytest.approx(0.2)
    assert ctxlm.speaker_rr([[2.0, 1.0], [0.0, 0.0]], 0) == 1.0
    assert ctxlm.perplexity([-math.log(8000.0)] * 3) == pytest.approx(8000.0)
    result = ctxlm.compare_runs([2, 3, 4, 5, 6], [1, 2, 3, 4, 5], "a_greater")
    assert result["significant"] and result["degenerate_variance"]


def test_tiny_training_runs():
    spec = ctxlm.SyntheticSpec()
    spec.n_speakers = 4
    spec.n_productions = 2
    spec.lines_per_speaker = 30
    spec.marker_strength = 0.6
    spec.n_unseen_speakers = 0
    corpus = ctxlm.generate_synthetic(11, spec)
    tokenizer = ctxlm.BpeModel.train(corpus.utterances("train"), vocab_cap=200,
                                     byte_fallback=False)
    embedder = ctxlm.Embedder(d_ctx=32)
    arch = ctxlm.ArchConfig.contextual_tiny(tokenizer.vocab_size, 32)
    params = ctxlm.init_params(arch, seed=1)
    cfg = ctxlm.TrainConfig()
    cfg.max_epochs = 3
    cfg.learning_rate = 5e-3
    cfg.batch_tokens = 800
    cfg.context_source = "metadata"
    trained, record = ctxlm.train(params, corpus, tokenizer, embedder, cfg)
    assert record["stopping_epoch"] <= 3
    assert record["valid_loss"][-1] <= record["valid_loss"][0]
    assert trained.arch.vocab_size == tokenizer.vocab_size


def test_pmi_zero_for_identical_behaviour():
    tokenizer = ctxlm.BpeModel.train(["chef cooks", "spy hides"], vocab_cap=64,
                                     byte_fallback=False)
    embedder = ctxlm.Embedder(d_ctx=32)
    ctx_arch = ctxlm.ArchConfig.contextual_tiny(tokenizer.vocab_size, 32)
    base_arch = ctxlm.ArchConfig.base_tiny(tokenizer.vocab_size)
    # zero-initialized models are both uniform
    ctx_params = ctxlm.init_params(ctx_arch, seed=1)
    base_params = ctxlm.init_params(base_arch, seed=1)
    ctx = ctxlm.ContextSet()
    ctx.set("speaker.profession", "chef")
    tokens = tokenizer.encode("chef cooks", bos=True, eos=True)
    per_token, mean = ctxlm.segment_pmi(ctx_params, base_params, embedder, ctx,
                                        tokens)
    assert len(per_token) == len(tokens) - 1
    assert mean == pytest.approx(sum(per_token) / len(per_token))
