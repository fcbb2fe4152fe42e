import math

import numpy as np
import pytest

from ironymt.autodiff import RngStream, Tensor, cross_entropy
from ironymt.encoder import EncoderConfig, encoder_forward
from ironymt.errors import CheckpointConfigError, ConfigError, DataError, FingerprintError
from ironymt.pretrain import (Corpus, PretrainConfig, filter_corpus, mlm_eval, mlm_logits, nsp_documents,
                              pretrain, split_sentences, untrained_checkpoint)
from ironymt.synthetic import SyntheticLanguage, generate_corpus
from ironymt.tokenization import build_word_vocab, encode_batch, make_nsp_pairs, mask_for_mlm, train_subword_vocab


@pytest.fixture(scope="module")
def lines():
    return generate_corpus(SyntheticLanguage(4), 24, seed=4, sentences=(2, 4))


@pytest.fixture(scope="module")
def vocab(lines):
    return train_subword_vocab(lines, 150)


def small(vocab, **kw):
    return EncoderConfig(layers=1, hidden=16, heads=2, ffn_inner=32, vocab_size=len(vocab), max_len=24, **kw)


def test_config_validation():
    with pytest.raises(ConfigError):
        PretrainConfig(mlm_weight=0.0, nsp_weight=0.0)
    with pytest.raises(ConfigError):
        PretrainConfig(nsp_weight=-1.0)
    c = PretrainConfig.continued()
    assert (c.lr, c.epochs, c.min_doc_words) == (2e-5, 10, 21)
    assert PretrainConfig.from_dict(c.to_dict()) == c


def test_filter_length_threshold():
    twenty = " ".join(["w"] * 20)
    assert len(filter_corpus([twenty], 21)) == 0
    assert len(filter_corpus([twenty + " w"], 21)) == 1
    assert len(filter_corpus([], 21)) == 0


def test_filter_keeps_order_of_long_lines():
    rng = np.random.default_rng(0)
    long_at = set(rng.choice(100, 40, replace=False).tolist())
    raw = [" ".join([f"t{i}"] * (25 if i in long_at else 12)) for i in range(100)]
    corpus = filter_corpus(raw, 21, "in-domain")
    assert [d[0].split()[0] for d in corpus.documents] == [f"t{i}" for i in sorted(long_at)]
    assert corpus.provenance == "in-domain"


def test_corpus_rejects_empty_sentences_and_bad_tag():
    with pytest.raises(DataError):
        Corpus([["a b", "  "]])
    with pytest.raises(ConfigError):
        Corpus([], "web")


def test_sentence_splitting_and_tweet_grouping():
    assert split_sentences("one two. three four! five") == ["one two.", "three four!", "five"]
    tweets = Corpus([[f"tweet {i}"] for i in range(9)])
    docs = nsp_documents(tweets, group_size=4)
    assert [len(d) for d in docs] == [4, 5]
    assert sum(docs, []) == [f"tweet {i}" for i in range(9)]


def test_requires_subword_vocab_and_matching_config(lines, vocab):
    corpus = filter_corpus(lines)
    with pytest.raises(ConfigError):
        pretrain(corpus, build_word_vocab(lines, 50), PretrainConfig(epochs=1), 0, encoder_config=small(vocab))
    ckpt, _ = pretrain(corpus, vocab, PretrainConfig(epochs=1, batch=16), 0, encoder_config=small(vocab))
    with pytest.raises(CheckpointConfigError, match="hidden"):
        pretrain(corpus, vocab, PretrainConfig(epochs=1), 0, initial=ckpt,
                 encoder_config=EncoderConfig(layers=1, hidden=8, heads=2, ffn_inner=32,
                                              vocab_size=len(vocab), max_len=24))


def test_initial_nsp_loss_near_ln2(lines, vocab):
    cfg = small(vocab, dropout=0.0)
    params = {k: Tensor(v) for k, v in untrained_checkpoint(cfg, vocab, 0).params.items()}
    pairs = make_nsp_pairs(nsp_documents(filter_corpus(lines)), RngStream(0, "p"))
    labels = np.array([p.is_next for p in pairs])
    assert abs(labels.mean() - 0.5) < 0.1
    batch = encode_batch([p.first for p in pairs], vocab, cfg.max_len, [p.second for p in pairs])
    _, pooled = encoder_forward(batch, params, cfg)
    loss = cross_entropy(pooled @ params["nsp.W"] + params["nsp.b"], labels).item()
    assert loss == pytest.approx(math.log(2), rel=0.1)


def test_untrained_mlm_eval_near_ln_vocab_and_deterministic(lines, vocab):
    ckpt = untrained_checkpoint(small(vocab), vocab, 1)
    corpus = filter_corpus(lines)
    a = mlm_eval(ckpt, corpus, vocab, seed=3)
    assert a == pytest.approx(math.log(len(vocab)), rel=0.1)
    assert mlm_eval(ckpt, corpus, vocab, seed=3) == a


def test_mlm_eval_errors(lines, vocab):
    ckpt = untrained_checkpoint(small(vocab), vocab, 1)
    with pytest.raises(FingerprintError):
        mlm_eval(ckpt, filter_corpus(lines), train_subword_vocab(lines, 120), seed=0)
    with pytest.raises(DataError):
        mlm_eval(ckpt, Corpus([]), vocab, seed=0)


def test_mlm_loss_ignores_unselected_positions(lines, vocab):
    cfg = small(vocab, dropout=0.0)
    params = {k: Tensor(v) for k, v in untrained_checkpoint(cfg, vocab, 2).params.items()}
    masked = mask_for_mlm(encode_batch(lines[:4], vocab, cfg.max_len), vocab, 0.3, RngStream(0, "m"))
    hidden, _ = encoder_forward(masked.inputs, params, cfg)
    logits, targets = mlm_logits(hidden, masked.mlm_targets, params)
    assert targets.size == int((masked.mlm_targets >= 0).sum())
    keep = (masked.mlm_targets >= 0)[..., None]
    zeroed = Tensor(np.where(keep, hidden.data, 0.0))
    logits2, _ = mlm_logits(zeroed, masked.mlm_targets, params)
    assert np.array_equal(logits.data, logits2.data)


def test_zero_mask_rate_yields_no_mlm_loss(lines, vocab):
    cfg = PretrainConfig(mask_rate=0.0, nsp_weight=0.0, epochs=1, batch=16)
    init = untrained_checkpoint(small(vocab), vocab, 0)
    ckpt, trace = pretrain(filter_corpus(lines), vocab, cfg, 0, initial=init)
    assert trace[0][1] == 0.0
    assert all(np.array_equal(ckpt.params[k], v) for k, v in init.params.items())


def test_training_is_deterministic_and_reduces_loss(lines, vocab):
    corpus = filter_corpus(lines)
    cfg = PretrainConfig(epochs=3, batch=16)
    a, ta = pretrain(corpus, vocab, cfg, 5, encoder_config=small(vocab))
    b, tb = pretrain(corpus, vocab, cfg, 5, encoder_config=small(vocab))
    assert ta == tb and all(np.array_equal(a.params[k], b.params[k]) for k in a.params)
    assert a.provenance == "pretrained-generic" and a.meta["epochs_completed"] == 3
    before = mlm_eval(untrained_checkpoint(small(vocab), vocab, 5), corpus, vocab, seed=1)
    assert mlm_eval(a, corpus, vocab, seed=1) < before


def test_resume_matches_uninterrupted_run_bitwise(lines, vocab):
    corpus = filter_corpus(lines)
    full, full_trace = pretrain(corpus, vocab, PretrainConfig(epochs=2, batch=16), 7, encoder_config=small(vocab))
    half, _ = pretrain(corpus, vocab, PretrainConfig(epochs=1, batch=16), 7, encoder_config=small(vocab))
    resumed, trace = pretrain(corpus, vocab, PretrainConfig(epochs=1, batch=16), 7, initial=half, resume=True)
    assert trace == full_trace[1:]
    assert resumed.meta["epochs_completed"] == 2
    for k in full.params:
        assert np.array_equal(full.params[k], resumed.params[k]), k
    assert resumed.optimizer["step"] == full.optimizer["step"]


def test_resume_needs_saved_state(lines, vocab):
    init = untrained_checkpoint(small(vocab), vocab, 0)
    with pytest.raises(ConfigError):
        pretrain(filter_corpus(lines), vocab, PretrainConfig(epochs=1), 0, initial=init, resume=True)
