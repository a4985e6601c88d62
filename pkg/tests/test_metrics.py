import math

import numpy as np
import pytest

from layerfuse.errors import ContractError, ShapeError
from layerfuse.data import MaskedBatch, label_set
from layerfuse.metrics import Chunk, extract_chunks, masked_nll, micro_f1, perplexity


def brute_chunks(tags):
    """Every maximal span [i, j) whose first tag opens type X (B-X, or an I-X
    not continuing X) and whose remaining tags are I-X."""
    out = set()
    n = len(tags)
    for i in range(n):
        if tags[i] == "O":
            continue
        typ = tags[i][2:]
        opens = tags[i].startswith("B-") or i == 0 or tags[i - 1][2:] != typ or \
            tags[i - 1] == "O"
        if not opens:
            continue
        j = i + 1
        while j < n and tags[j] == f"I-{typ}":
            j += 1
        out.add((typ, i, j))
    return out


def brute_f1(gold, pred):
    tp = fp = fn = 0
    for g, p in zip(gold, pred):
        gs, ps = brute_chunks(g), brute_chunks(p)
        tp += len(gs & ps)
        fp += len(ps - gs)
        fn += len(gs - ps)
    prec = tp / (tp + fp) if tp + fp else 0.0
    rec = tp / (tp + fn) if tp + fn else 0.0
    return 2 * prec * rec / (prec + rec) if prec + rec else 0.0


def test_chunk_examples():
    assert extract_chunks(["B-PER", "I-PER", "O"]) == [Chunk("PER", 0, 2)]
    assert extract_chunks(["O", "O", "O"]) == []
    assert extract_chunks(["B-PER", "B-PER"]) == [Chunk("PER", 0, 1), Chunk("PER", 1, 2)]
    assert extract_chunks(["I-LOC", "I-LOC", "I-ORG"]) == [Chunk("LOC", 0, 2), Chunk("ORG", 2, 3)]


def test_malformed_tag_names_index():
    with pytest.raises(ContractError, match="index 1"):
        extract_chunks(["O", "X-PER"])


def test_micro_f1_examples():
    gold = [["B-PER", "I-PER", "O", "B-LOC"]]
    assert micro_f1(gold, gold).f1 == 1.0
    assert micro_f1(gold, [["O"] * 4]).f1 == 0.0
    rep = micro_f1(gold, [["B-PER", "I-PER", "B-ORG", "O"]])
    assert (rep.precision, rep.recall, rep.f1) == (0.5, 0.5, 0.5)
    assert rep.per_type["ORG"].fp == 1 and rep.per_type["LOC"].fn == 1


def test_oracle_equivalence_on_random_pairs():
    rng = np.random.default_rng(0)
    labels = label_set()
    for _ in range(1000):
        n_sent = rng.integers(1, 4)
        gold, pred = [], []
        for _ in range(n_sent):
            n = int(rng.integers(1, 9))
            gold.append([labels[k] for k in rng.integers(0, len(labels), n)])
            pred.append([labels[k] for k in rng.integers(0, len(labels), n)])
        assert micro_f1(gold, pred).f1 == brute_f1(gold, pred)


def test_length_mismatch():
    with pytest.raises(ShapeError):
        micro_f1([["O"]], [["O", "O"]])
    with pytest.raises(ShapeError):
        micro_f1([["O"]], [])


def test_report_csv_and_pretty():
    rep = micro_f1([["B-PER", "O"]], [["B-PER", "B-LOC"]])
    lines = rep.to_csv().splitlines()
    assert lines[0] == "type,precision,recall,f1,tp,fp,fn,support"
    assert lines[-1] == "micro,50.00,100.00,66.67,1,1,0,1"
    assert "micro" in rep.pretty()


def _batch(targets):
    targets = np.asarray(targets)
    return MaskedBatch(np.where(targets >= 0, 2, 7), targets, targets >= 0)


def test_uniform_predictor_perplexity_is_vocab_size():
    V = 37
    batch = _batch([[3, -1, 10, 36]])
    ppl = perplexity(lambda ids, mask: np.zeros(ids.shape + (V,)), [batch])
    assert ppl == pytest.approx(V, rel=1e-9)


def test_perfect_predictor_perplexity_is_one():
    V = 9
    targets = np.array([[1, 4, -1, 8]])

    def model(ids, mask):
        logits = np.full(ids.shape + (V,), -1e4)
        for i, t in enumerate(targets[0]):
            logits[0, i, max(t, 0)] = 0.0
        return logits

    assert perplexity(model, [_batch(targets)]) == 1.0


def test_two_position_closed_form():
    probs = np.array([[[0.5, 0.5, 0.0 + 1e-300], [0.25, 0.75, 1e-300]]])
    nll, n = masked_nll(np.log(probs), np.array([[0, 0]]))
    assert n == 2
    assert math.exp(nll / n) == pytest.approx(2 * math.sqrt(2), rel=1e-12)


def test_perplexity_needs_masked_positions():
    with pytest.raises(ContractError):
        perplexity(lambda ids, mask: np.zeros(ids.shape + (3,)), [_batch([[-1, -1]])])
