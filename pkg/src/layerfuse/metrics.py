"""Chunk-level micro F1 for BIO tagging and MLM perplexity."""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import ContractError, ShapeError
from .tensor import Tensor


@dataclass(frozen=True)
class Chunk:
    type: str
    start: int
    end: int  # exclusive


def _split_tag(tag: str, index: int) -> tuple[str, str]:
    if tag == "O":
        return "O", ""
    if len(tag) > 2 and tag[1] == "-" and tag[0] in "BI":
        return tag[0], tag[2:]
    raise ContractError(f"malformed BIO tag {tag!r} at index {index}")


def extract_chunks(labels: Sequence[str]) -> list[Chunk]:
    """Chunks of a BIO sequence. ``I-X`` that does not continue an ``X`` chunk
    opens a new one, as a repaired ``B-X`` would."""
    chunks: list[Chunk] = []
    cur_type, start = None, 0
    for i, tag in enumerate(labels):
        prefix, typ = _split_tag(tag, i)
        if prefix == "I" and typ == cur_type:
            continue
        if cur_type is not None:
            chunks.append(Chunk(cur_type, start, i))
        cur_type, start = (typ, i) if prefix in ("B", "I") else (None, i)
    if cur_type is not None:
        chunks.append(Chunk(cur_type, start, len(labels)))
    return chunks


@dataclass
class Counts:
    tp: int = 0
    fp: int = 0
    fn: int = 0

    @property
    def precision(self) -> float:
        return self.tp / (self.tp + self.fp) if self.tp + self.fp else 0.0

    @property
    def recall(self) -> float:
        return self.tp / (self.tp + self.fn) if self.tp + self.fn else 0.0

    @property
    def f1(self) -> float:
        p, r = self.precision, self.recall
        return 2 * p * r / (p + r) if p + r else 0.0

    @property
    def support(self) -> int:
        return self.tp + self.fn


@dataclass
class F1Report:
    micro: Counts
    per_type: dict[str, Counts] = field(default_factory=dict)

    @property
    def precision(self) -> float:
        return self.micro.precision

    @property
    def recall(self) -> float:
        return self.micro.recall

    @property
    def f1(self) -> float:
        return self.micro.f1

    def rows(self) -> list[tuple[str, Counts]]:
        return [(t, self.per_type[t]) for t in sorted(self.per_type)] + [("micro", self.micro)]

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["type", "precision", "recall", "f1", "tp", "fp", "fn", "support"])
        for name, c in self.rows():
            w.writerow([name, f"{100 * c.precision:.2f}", f"{100 * c.recall:.2f}",
                        f"{100 * c.f1:.2f}", c.tp, c.fp, c.fn, c.support])
        return buf.getvalue()

    def pretty(self) -> str:
        lines = [f"{'type':<8}{'P%':>8}{'R%':>8}{'F1%':>8}{'support':>9}"]
        for name, c in self.rows():
            lines.append(f"{name:<8}{100 * c.precision:>8.2f}{100 * c.recall:>8.2f}"
                         f"{100 * c.f1:>8.2f}{c.support:>9d}")
        return "\n".join(lines)


def micro_f1(gold: Sequence[Sequence[str]], pred: Sequence[Sequence[str]]) -> F1Report:
    """Exact-match chunk F1 pooled over all sentences and entity types."""
    if len(gold) != len(pred):
        raise ShapeError(f"{len(gold)} gold sentences vs {len(pred)} predicted")
    per_type: dict[str, Counts] = {}
    for i, (g, p) in enumerate(zip(gold, pred)):
        if len(g) != len(p):
            raise ShapeError(f"sentence {i}: {len(g)} gold tags vs {len(p)} predicted")
        gs, ps = set(extract_chunks(g)), set(extract_chunks(p))
        for c in gs | ps:
            counts = per_type.setdefault(c.type, Counts())
            if c in gs and c in ps:
                counts.tp += 1
            elif c in ps:
                counts.fp += 1
            else:
                counts.fn += 1
    micro = Counts(sum(c.tp for c in per_type.values()),
                   sum(c.fp for c in per_type.values()),
                   sum(c.fn for c in per_type.values()))
    return F1Report(micro, per_type)


# perplexity ------------------------------------------------------------------

def masked_nll(logits: np.ndarray, targets: np.ndarray) -> tuple[float, int]:
    """Summed negative log-likelihood (nats) over positions with target >= 0."""
    logits = np.asarray(logits, dtype=np.float64)
    flat = logits.reshape(-1, logits.shape[-1])
    tgt = np.asarray(targets).reshape(-1)
    rows = np.flatnonzero(tgt >= 0)
    if rows.size == 0:
        return 0.0, 0
    sel = flat[rows]
    top = sel.max(axis=1, keepdims=True)
    logz = top[:, 0] + np.log(np.exp(sel - top).sum(axis=1))
    return float(np.sum(logz - sel[np.arange(rows.size), tgt[rows]])), int(rows.size)


def perplexity(model: Callable, batches: Iterable) -> float:
    """``exp`` of the mean cross-entropy over every masked position.

    ``model`` maps ``(input_ids, attention_mask)`` to logits ``[B, T, V]``;
    each batch carries ``input_ids`` and ``targets`` (-1 where not masked).
    """
    total, count = 0.0, 0
    for batch in batches:
        attention = batch.input_ids != 0
        logits = model(batch.input_ids, attention)
        if isinstance(logits, Tensor):
            logits = logits.data
        nll, n = masked_nll(logits, batch.targets)
        total += nll
        count += n
    if count == 0:
        raise ContractError("perplexity needs at least one masked position")
    return math.exp(total / count)
