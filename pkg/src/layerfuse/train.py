"""Experiment execution: MLM pretraining, FE/FT adaptation runs and grids."""

from __future__ import annotations

import csv
import dataclasses
import io
import itertools
import logging
import math
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy import stats

from . import tensor as T
from .config import ExperimentConfig
from .data import (FewShotSpec, SplitCorpus, TaggedSentence, Vocab, encode_batch, few_shot_indices,
                   label_set, mlm_mask, read_conll, synth_ner_corpus)
from .encoder import Encoder, EncoderConfig, freeze_base
from .errors import ContractError, TrainingDiverged
from .fusion import FusionKind
from .metrics import masked_nll, micro_f1
from .model import FusionModel, load_encoder
from .optim import AdamW, linear_decay_lr
from .tensor import Tensor, no_grad

log = logging.getLogger(__name__)

# stream ids mixed into the run seed; one generator per purpose
_INIT, _SHUFFLE, _DROPOUT, _MASK, _DEV_MASK = 1, 3, 4, 5, 6


def _rng(seed: int, stream: int) -> np.random.Generator:
    return np.random.default_rng([seed, stream])


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    dev_metric: float
    lr: float
    seconds: float = 0.0


@dataclass
class RunHistory:
    metric: str = "f1"                       # "f1" (higher is better) or "perplexity"
    records: list[EpochRecord] = field(default_factory=list)
    best_epoch: int | None = None
    best_metric: float | None = None
    best_state: dict[str, np.ndarray] | None = None
    total_steps: int = 0
    seed: int = 0

    @property
    def higher_is_better(self) -> bool:
        return self.metric == "f1"

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["epoch", "train_loss", "dev_metric", "lr"])
        for r in self.records:
            w.writerow([r.epoch, repr(r.train_loss), repr(r.dev_metric), repr(r.lr)])
        return buf.getvalue()


def best_dev(history: RunHistory | Sequence[float], higher_is_better: bool = True
             ) -> tuple[int, float]:
    """1-based epoch of the best dev score; ties go to the earliest epoch."""
    if isinstance(history, RunHistory):
        higher_is_better = history.higher_is_better
        values = [r.dev_metric for r in history.records]
    else:
        values = list(history)
    if not values:
        raise ContractError("best_dev needs a non-empty history")
    best = 0
    for i, v in enumerate(values):
        if (v > values[best]) if higher_is_better else (v < values[best]):
            best = i
    return best + 1, values[best]


# shared inputs ---------------------------------------------------------------

@dataclass
class Workspace:
    """Corpus, vocabulary and base encoder shared by every cell of a grid."""

    corpus: SplitCorpus
    vocab: Vocab
    encoder: Encoder
    labels: list[str]
    _features: dict = field(default_factory=dict, repr=False)

    @property
    def enc_cfg(self) -> EncoderConfig:
        return self.encoder.cfg

    def features(self, split: str, chunk: int = 64) -> list[np.ndarray]:
        """Frozen-encoder layer outputs per sentence, each ``[L, n+2, d]``.

        Computed once in fixed chunks of corpus order so every run sees the
        same numbers regardless of which subset it trains on.
        """
        if split not in self._features:
            sents = getattr(self.corpus, split)
            out: list[np.ndarray] = []
            self.encoder.eval()
            with no_grad():
                for start in range(0, len(sents), chunk):
                    part = sents[start:start + chunk]
                    ids, mask, _ = encode_batch(part, self.vocab)
                    z = self.encoder(ids, mask)
                    stacked = np.stack([zi.data for zi in z.z])
                    for b, s in enumerate(part):
                        out.append(stacked[:, b, : len(s) + 2].copy())
            self._features[split] = out
        return self._features[split]


def load_corpus(cfg: ExperimentConfig) -> SplitCorpus:
    d = cfg.data
    if d.train_path:
        return SplitCorpus(read_conll(d.train_path),
                           read_conll(d.dev_path) if d.dev_path else [],
                           read_conll(d.test_path) if d.test_path else [])
    return synth_ner_corpus(d.corpus_seed, d.corpus_size)


def build_workspace(cfg: ExperimentConfig, encoder: Encoder | None = None) -> Workspace:
    corpus = load_corpus(cfg)
    vocab = Vocab.build(corpus.train)
    if encoder is None:
        if cfg.encoder_checkpoint:
            encoder = load_encoder(cfg.encoder_checkpoint)
        else:
            enc_cfg = dataclasses.replace(cfg.encoder, vocab_size=len(vocab))
            encoder = Encoder(enc_cfg, _rng(cfg.seed, 100))
            if cfg.pretrain.epochs > 0:
                pretrain_encoder(encoder, corpus, vocab, cfg)
    if encoder.cfg.vocab_size != len(vocab):
        raise ContractError(
            f"encoder vocab_size {encoder.cfg.vocab_size} != corpus vocabulary {len(vocab)}"
        )
    return Workspace(corpus, vocab, encoder, label_set(), {})


# training loops ----------------------------------------------------------------

def _mlm_epoch_batches(sents, vocab, batch_size, order):
    for start in range(0, len(order), batch_size):
        ids, mask, _ = encode_batch([sents[i] for i in order[start:start + batch_size]], vocab)
        yield ids, mask


def _dev_masked_batches(sents, vocab, batch_size, seed, rate):
    rng = _rng(seed, _DEV_MASK)
    out = []
    for start in range(0, len(sents), batch_size):
        ids, _, _ = encode_batch(sents[start:start + batch_size], vocab)
        out.append(mlm_mask(ids, rng, rate, len(vocab)))
    return out


def _perplexity(model: FusionModel, batches) -> float:
    total, count = 0.0, 0
    with no_grad():
        for mb in batches:
            logits = model(mb.input_ids, mb.input_ids != 0)
            nll, n = masked_nll(logits.data, mb.targets)
            total += nll
            count += n
    if count == 0:
        raise ContractError("no masked positions in the dev set")
    return math.exp(total / count)


def pretrain_encoder(encoder: Encoder, corpus: SplitCorpus, vocab: Vocab,
                     cfg: ExperimentConfig) -> RunHistory:
    """MLM pretraining of ``encoder`` in place, with a plain vocabulary head."""
    p = cfg.pretrain
    from .fusion import FusionSpec

    model = FusionModel(encoder.cfg, FusionSpec(kind="base"), len(vocab), _rng(cfg.seed, 101),
                        head_kind="vocabulary-head", encoder=encoder)
    freeze_base(model, "FT")
    history = _train_mlm(model, corpus.train, corpus.dev, vocab, epochs=p.epochs,
                         batch_size=p.batch_size, max_lr=p.max_lr, weight_decay=p.weight_decay,
                         mask_rate=p.mask_rate, seed=cfg.seed * 7919 + 17, train_encoder=True)
    encoder.eval()
    log.info("pretrained encoder: final dev perplexity %.4f", history.records[-1].dev_metric)
    return history


def _train_mlm(model: FusionModel, train: Sequence[TaggedSentence], dev, vocab: Vocab, *,
               epochs: int, batch_size: int, max_lr: float, weight_decay: float,
               mask_rate: float, seed: int, train_encoder: bool, eval_batch_size: int = 64
               ) -> RunHistory:
    params = [p for p in model.parameters() if not p.frozen]
    opt = AdamW(params, weight_decay=weight_decay)
    shuffle, masker = _rng(seed, _SHUFFLE), _rng(seed, _MASK)
    model.encoder.dropout_rng = _rng(seed, _DROPOUT)
    dev_batches = _dev_masked_batches(dev, vocab, eval_batch_size, seed, mask_rate)
    steps_per_epoch = math.ceil(len(train) / batch_size)
    total = epochs * steps_per_epoch
    history = RunHistory(metric="perplexity", total_steps=total, seed=seed)
    step = 0
    for epoch in range(1, epochs + 1):
        t0 = time.perf_counter()
        model.encoder.train(train_encoder)
        losses = []
        for ids, _ in _mlm_epoch_batches(train, vocab, batch_size, shuffle.permutation(len(train))):
            mb = mlm_mask(ids, masker, mask_rate, len(vocab))
            logits = model(mb.input_ids, ids != 0)
            loss = T.cross_entropy(logits, mb.targets)
            if not np.isfinite(loss.data):
                raise TrainingDiverged(epoch, step, history)
            model.zero_grad()
            T.backward(loss)
            opt.step(linear_decay_lr(step, total, max_lr))
            step += 1
            losses.append(float(loss.data))
        model.eval()
        ppl = _perplexity(model, dev_batches)
        history.records.append(EpochRecord(epoch, float(np.mean(losses)), ppl,
                                           linear_decay_lr(step, total, max_lr),
                                           time.perf_counter() - t0))
        _update_best(history, model)
    return history


def _update_best(history: RunHistory, model: FusionModel) -> None:
    rec = history.records[-1]
    better = (history.best_metric is None
              or (rec.dev_metric > history.best_metric if history.higher_is_better
                  else rec.dev_metric < history.best_metric))
    if better:
        history.best_epoch, history.best_metric = rec.epoch, rec.dev_metric
        history.best_state = {n: p.data.copy() for n, p in model.named_parameters()
                              if not p.frozen}


def _gather(feats: list[np.ndarray], idx: Sequence[int]):
    width = max(feats[i].shape[1] for i in idx)
    n_layers, _, d = feats[idx[0]].shape
    out = np.zeros((n_layers, len(idx), width, d))
    mask = np.zeros((len(idx), width), dtype=bool)
    for b, i in enumerate(idx):
        n = feats[i].shape[1]
        out[:, b, :n] = feats[i]
        mask[b, :n] = True
    return [Tensor(layer) for layer in out], mask


def _padded_labels(sents, idx, label_index, width):
    labels = np.full((len(idx), width), -1, dtype=np.int64)
    for b, i in enumerate(idx):
        s = sents[i]
        labels[b, 1:len(s) + 1] = [label_index[t] for t in s.labels]
    return labels


def predict_tags(model: FusionModel, ws: Workspace, split: str, idx: Sequence[int] | None = None,
                 use_cache: bool = True, batch_size: int = 64) -> list[list[str]]:
    sents = getattr(ws.corpus, split)
    idx = list(range(len(sents))) if idx is None else list(idx)
    model.eval()
    tags: list[list[str]] = []
    with no_grad():
        for start in range(0, len(idx), batch_size):
            part = idx[start:start + batch_size]
            if use_cache:
                z, mask = _gather(ws.features(split), part)
                logits = model.head_forward(z, mask)
            else:
                ids, mask, _ = encode_batch([sents[i] for i in part], ws.vocab)
                logits = model(ids, mask)
            best = logits.data.argmax(axis=-1)
            for b, i in enumerate(part):
                n = len(sents[i])
                tags.append([ws.labels[k] for k in best[b, 1:n + 1]])
    return tags


def dev_f1(model: FusionModel, ws: Workspace, use_cache: bool, batch_size: int = 64) -> float:
    pred = predict_tags(model, ws, "dev", use_cache=use_cache, batch_size=batch_size)
    return micro_f1([s.labels for s in ws.corpus.dev], pred).f1


def build_model(cfg: ExperimentConfig, ws: Workspace, seed: int) -> FusionModel:
    task = cfg.train.task.upper()
    encoder = Encoder(ws.enc_cfg, np.random.default_rng(0))
    encoder.load_state_dict(ws.encoder.state_dict())
    if task == "NER":
        model = FusionModel(ws.enc_cfg, cfg.fusion, len(ws.labels), _rng(seed, _INIT),
                            encoder=encoder)
    else:
        model = FusionModel(ws.enc_cfg, cfg.fusion, len(ws.vocab), _rng(seed, _INIT),
                            head_kind="vocabulary-head", encoder=encoder)
    freeze_base(model, cfg.train.mode)
    return model


def run_experiment(cfg: ExperimentConfig, trial: int = 0, ws: Workspace | None = None,
                   return_model: bool = False):
    """One training run; seed is ``cfg.seed + trial``.

    Returns the :class:`RunHistory` (and the trained model when
    ``return_model``). Raises :class:`TrainingDiverged` on a non-finite loss.
    """
    cfg.validate()
    ws = ws if ws is not None else build_workspace(cfg)
    t = cfg.train
    seed = cfg.seed + trial
    model = build_model(cfg, ws, seed)
    train_all = ws.corpus.train
    if t.n_shot is None:
        train_idx = np.arange(len(train_all))
    else:
        train_idx = few_shot_indices(len(train_all), FewShotSpec(t.n_shot, t.n_classes, seed))

    if t.task.upper() == "MLM":
        history = _train_mlm(model, [train_all[i] for i in train_idx], ws.corpus.dev, ws.vocab,
                             epochs=t.epochs, batch_size=t.batch_size, max_lr=t.max_lr,
                             weight_decay=t.weight_decay, mask_rate=t.mask_rate, seed=seed,
                             train_encoder=t.mode.upper() == "FT",
                             eval_batch_size=t.eval_batch_size)
    else:
        history = _train_ner(model, ws, train_idx, cfg, seed)
    history.seed = seed
    return (history, model) if return_model else history


def _train_ner(model: FusionModel, ws: Workspace, train_idx: np.ndarray,
               cfg: ExperimentConfig, seed: int) -> RunHistory:
    t = cfg.train
    fe = t.mode.upper() == "FE"
    label_index = {lab: i for i, lab in enumerate(ws.labels)}
    sents = ws.corpus.train
    params = [p for p in model.parameters() if not p.frozen]
    opt = AdamW(params, weight_decay=t.weight_decay)
    shuffle = _rng(seed, _SHUFFLE)
    model.encoder.dropout_rng = _rng(seed, _DROPOUT)
    steps_per_epoch = math.ceil(len(train_idx) / t.batch_size)
    total = t.epochs * steps_per_epoch
    history = RunHistory(metric="f1", total_steps=total)
    feats = ws.features("train") if fe else None
    step = 0
    for epoch in range(1, t.epochs + 1):
        t0 = time.perf_counter()
        model.train()
        if fe:
            model.encoder.eval()
        order = train_idx[shuffle.permutation(len(train_idx))]
        losses = []
        for start in range(0, len(order), t.batch_size):
            part = order[start:start + t.batch_size]
            if fe:
                z, mask = _gather(feats, part)
                logits = model.head_forward(z, mask)
                labels = _padded_labels(sents, part, label_index, mask.shape[1])
            else:
                ids, mask, labels = encode_batch([sents[i] for i in part], ws.vocab, label_index)
                logits = model(ids, mask)
            loss = T.cross_entropy(logits, labels)
            if not np.isfinite(loss.data):
                raise TrainingDiverged(epoch, step, history)
            model.zero_grad()
            T.backward(loss)
            opt.step(linear_decay_lr(step, total, t.max_lr))
            step += 1
            losses.append(float(loss.data))
        f1 = dev_f1(model, ws, use_cache=fe, batch_size=t.eval_batch_size)
        history.records.append(EpochRecord(epoch, float(np.mean(losses)), f1,
                                           linear_decay_lr(step, total, t.max_lr),
                                           time.perf_counter() - t0))
        _update_best(history, model)
        log.debug("epoch %d loss %.4f dev_f1 %.4f", epoch, losses[-1], f1)
    return history


# grids ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Cell:
    fusion: str
    n_shot: int
    epochs: int
    trial: int

    @property
    def key(self) -> str:
        return f"{self.fusion}_N{self.n_shot}_E{self.epochs}_T{self.trial}"


@dataclass
class CellResult:
    cell: Cell
    history: RunHistory | None
    error: str | None = None

    @property
    def best(self) -> float | None:
        return None if self.history is None else self.history.best_metric


@dataclass
class GridResult:
    cells: list[CellResult]

    @property
    def failed(self) -> list[CellResult]:
        return [c for c in self.cells if c.error is not None]

    def scores(self, fusion: str, n_shot: int, epochs: int) -> list[float]:
        return [c.best for c in self.cells
                if c.cell.fusion == fusion and c.cell.n_shot == n_shot
                and c.cell.epochs == epochs and c.error is None]

    def aggregate(self) -> list[dict]:
        keys = sorted({(c.cell.fusion, c.cell.n_shot, c.cell.epochs) for c in self.cells},
                      key=lambda k: (k[2], k[1], k[0]))
        rows = []
        for fusion, n, e in keys:
            vals = np.array(self.scores(fusion, n, e), dtype=np.float64)
            rows.append({
                "fusion": fusion, "n_shot": n, "epochs": e, "trials": int(vals.size),
                "mean": float(vals.mean()) if vals.size else float("nan"),
                "ci95": ci_half_width(vals),
                "median": float(np.median(vals)) if vals.size else float("nan"),
                "std": float(vals.std(ddof=1)) if vals.size > 1 else 0.0,
            })
        return rows

    def aggregate_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["fusion", "n_shot", "epochs", "trials", "mean", "ci95", "median", "std"])
        for r in self.aggregate():
            w.writerow([r["fusion"], r["n_shot"], r["epochs"], r["trials"], f"{r['mean']:.6f}",
                        f"{r['ci95']:.6f}", f"{r['median']:.6f}", f"{r['std']:.6f}"])
        return buf.getvalue()

    def plot_csv(self) -> str:
        """Long form: one row per trial; x=n_shot, hue=fusion, facet=epochs."""
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["epochs", "n_shot", "fusion", "trial", "best_dev_f1", "best_epoch"])
        for c in sorted(self.cells, key=lambda c: (c.cell.epochs, c.cell.n_shot, c.cell.fusion,
                                                    c.cell.trial)):
            if c.error is None:
                w.writerow([c.cell.epochs, c.cell.n_shot, c.cell.fusion, c.cell.trial,
                            f"{c.best:.6f}", c.history.best_epoch])
        return buf.getvalue()


def ci_half_width(values: np.ndarray, level: float = 0.95) -> float:
    """Student-t confidence-interval half width of the mean."""
    n = len(values)
    if n < 2:
        return 0.0
    return float(stats.t.ppf(0.5 + level / 2, n - 1) * np.std(values, ddof=1) / math.sqrt(n))


def grid_cells(fusions, n_shots, epochs_list, trials) -> list[Cell]:
    return [Cell(FusionKind.parse(f).value, n, e, t)
            for f, n, e, t in itertools.product(fusions, n_shots, epochs_list, range(trials))]


def cell_config(base: ExperimentConfig, cell: Cell) -> ExperimentConfig:
    return base.replace(fusion__kind=cell.fusion, train__n_shot=cell.n_shot,
                        train__epochs=cell.epochs)


def run_cell(base: ExperimentConfig, cell: Cell, ws: Workspace) -> CellResult:
    try:
        history = run_experiment(cell_config(base, cell), trial=cell.trial, ws=ws)
        return CellResult(cell, history)
    except (TrainingDiverged, ContractError, ValueError) as exc:
        log.warning("cell %s failed: %s", cell.key, exc)
        return CellResult(cell, None, f"{type(exc).__name__}: {exc}")


_worker_state: dict = {}


def _worker_init(base_json: str, encoder_state: dict, enc_cfg: dict) -> None:
    from .config import from_dict
    import json

    base = from_dict(json.loads(base_json))
    encoder = Encoder(EncoderConfig(**enc_cfg), np.random.default_rng(0))
    encoder.load_state_dict(encoder_state)
    _worker_state["base"] = base
    _worker_state["ws"] = build_workspace(base, encoder)


def _worker_run(cell: Cell) -> CellResult:
    res = run_cell(_worker_state["base"], cell, _worker_state["ws"])
    if res.history is not None:
        res.history.best_state = None
    return res


def run_grid(base: ExperimentConfig, n_shots=None, epochs_list=None, fusions=None,
             trials: int | None = None, ws: Workspace | None = None, jobs: int = 1,
             progress=None) -> GridResult:
    """Cartesian product of settings x trials. Failed cells are recorded, not raised."""
    g = base.grid
    cells = grid_cells(fusions or g.fusions, n_shots or g.n_shots, epochs_list or g.epochs,
                       trials or g.trials)
    ws = ws if ws is not None else build_workspace(base)
    results: dict[Cell, CellResult] = {}
    if jobs <= 1:
        for cell in cells:
            res = run_cell(base, cell, ws)
            res.history and setattr(res.history, "best_state", None)
            results[cell] = res
            if progress:
                progress(res)
    else:
        init = (base.to_json(), ws.encoder.state_dict(), ws.enc_cfg.to_dict())
        with ProcessPoolExecutor(jobs, initializer=_worker_init, initargs=init) as pool:
            for res in pool.map(_worker_run, cells):
                results[res.cell] = res
                if progress:
                    progress(res)
    return GridResult([results[c] for c in cells])
