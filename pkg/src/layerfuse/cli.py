"""Command-line front end.

Exit codes: 0 success, 1 verification or training failure, 2 configuration
or input error. Settings resolve as defaults < ``--config`` file < ``--set``
overrides < dedicated flags such as ``--seed``.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from .checkpoint import atomic_write_bytes
from .config import ExperimentConfig, from_dict, load_config
from .data import Vocab, encode_batch, write_conll
from .errors import (ConfigError, ConllParseError, ContractError, InputError, ShapeError,
                     TrainingDiverged)
from .fusion import FusionKind, FusionSpec, count_added_params
from .metrics import micro_f1
from .model import FusionModel, save_encoder

log = logging.getLogger("layerfuse")

OUT_ENV = "LAYERFUSE_OUT"

# added-parameter counts reported for a 24-layer, 1024-wide encoder
REFERENCE_COUNTS = {"extra": 25.19e6, "concat": 25.18e6, "dwatt": 26.38e6, "average": 0.0}


class CliError(Exception):
    def __init__(self, message: str, code: int):
        super().__init__(message)
        self.code = code


def write_text(path: Path, text: str) -> None:
    atomic_write_bytes(path, text.encode("utf-8"))


# configuration ---------------------------------------------------------------

def _set_override(raw: dict, item: str) -> None:
    if "=" not in item:
        raise ConfigError(f"expected section.field=value, got {item!r}", "--set")
    key, value = item.split("=", 1)
    try:
        parsed = json.loads(value)
    except json.JSONDecodeError:
        parsed = value
    node = raw
    parts = key.split(".")
    for part in parts[:-1]:
        node = node.setdefault(part, {})
        if not isinstance(node, dict):
            raise ConfigError("not a section", key)
    node[parts[-1]] = parsed


def resolve_config(args) -> ExperimentConfig:
    raw = load_config(args.config).to_dict() if args.config else ExperimentConfig().to_dict()
    for item in args.set or []:
        _set_override(raw, item)
    if args.seed is not None:
        raw["seed"] = args.seed
    return from_dict(raw)


def out_dir(args) -> Path:
    root = args.out or os.path.join(os.environ.get(OUT_ENV, "runs"), args.command)
    path = Path(root)
    path.mkdir(parents=True, exist_ok=True)
    return path


def snapshot(cfg: ExperimentConfig, out: Path, ws=None) -> None:
    """Write the resolved config; with a workspace, record the derived vocabulary size."""
    if ws is not None:
        cfg = cfg.replace(encoder__vocab_size=len(ws.vocab))
    write_text(out / "config.json", cfg.to_json())


# subcommands -------------------------------------------------------------------

def cmd_pretrain(args) -> int:
    from .train import build_workspace

    cfg = resolve_config(args)
    out = out_dir(args)
    cfg = cfg.replace(encoder_checkpoint=None)
    snapshot(cfg, out)
    ws = build_workspace(cfg)
    snapshot(cfg, out, ws)
    save_encoder(ws.encoder, out / "encoder.ckpt", {"seed": cfg.seed})
    ws.vocab.save(out / "vocab.txt")
    print(f"encoder written to {out / 'encoder.ckpt'}")
    return 0


def cmd_train(args) -> int:
    from .train import build_workspace, predict_tags, run_experiment

    cfg = resolve_config(args)
    out = out_dir(args)
    snapshot(cfg, out)

    ws = build_workspace(cfg)
    snapshot(cfg, out, ws)
    history, model = run_experiment(cfg, trial=args.trial, ws=ws, return_model=True)
    write_text(out / "history.csv", history.to_csv())
    if history.best_state is not None:
        model.load_state_dict(history.best_state, strict=False)
    model.save(out / "model.ckpt", {"seed": history.seed, "best_epoch": history.best_epoch,
                                    "best_metric": history.best_metric})
    ws.vocab.save(out / "vocab.txt")
    if history.metric == "f1":
        pred = predict_tags(model, ws, "dev", use_cache=False)
        report = micro_f1([s.labels for s in ws.corpus.dev], pred)
        write_text(out / "dev_report.csv", report.to_csv())
    print(f"best dev {history.metric} {history.best_metric:.4f} at epoch {history.best_epoch}")
    return 0


def cmd_grid(args) -> int:
    from .train import build_workspace, run_grid

    cfg = resolve_config(args)
    out = out_dir(args)
    snapshot(cfg, out)
    ws = build_workspace(cfg)
    snapshot(cfg, out, ws)
    cells_dir = out / "cells"
    cells_dir.mkdir(exist_ok=True)

    def record(res):
        if res.error is None:
            write_text(cells_dir / f"{res.cell.key}.csv", res.history.to_csv())
            log.info("%s best %.4f", res.cell.key, res.best)
        else:
            write_text(cells_dir / f"{res.cell.key}.error", res.error + "\n")

    result = run_grid(cfg, ws=ws, jobs=args.jobs, progress=record)
    write_text(out / "aggregate.csv", result.aggregate_csv())
    write_text(out / "plot_data.csv", result.plot_csv())
    print(result.aggregate_csv(), end="")
    if result.failed:
        for res in result.failed:
            print(f"FAILED {res.cell.key}: {res.error}", file=sys.stderr)
        return 1
    return 0


def cmd_eval(args) -> int:
    from .metrics import perplexity
    from .train import load_corpus

    cfg = resolve_config(args)
    out = out_dir(args)
    snapshot(cfg, out)
    model = FusionModel.load(args.model)
    corpus = load_corpus(cfg)
    vocab = Vocab.load(args.vocab) if args.vocab else Vocab.build(corpus.train)
    sents = getattr(corpus, args.split)
    if not sents:
        raise CliError(f"split {args.split!r} is empty", 2)
    model.eval()
    from .tensor import no_grad

    if model.task.kind == "vocabulary-head":
        from .data import mlm_mask

        rng = np.random.default_rng([cfg.seed, 6])
        batches = []
        for start in range(0, len(sents), 64):
            ids, _, _ = encode_batch(sents[start:start + 64], vocab)
            batches.append(mlm_mask(ids, rng, cfg.train.mask_rate, len(vocab)))
        with no_grad():
            ppl = perplexity(model, batches)
        write_text(out / "eval.csv", f"split,perplexity\n{args.split},{ppl!r}\n")
        print(f"{args.split} perplexity {ppl:.4f}")
        return 0

    from .data import label_set

    labels = label_set()
    pred = []
    with no_grad():
        for start in range(0, len(sents), 64):
            part = sents[start:start + 64]
            ids, mask, _ = encode_batch(part, vocab)
            best = model(ids, mask).data.argmax(axis=-1)
            pred += [[labels[k] for k in best[b, 1:len(s) + 1]] for b, s in enumerate(part)]
    report = micro_f1([s.labels for s in sents], pred)
    write_text(out / "eval.csv", report.to_csv())
    print(report.pretty())
    return 0


def cmd_grad_check(args) -> int:
    from .gradcheck import TOLERANCE, check_components

    rows = check_components(seed=args.seed or 0, inject_fault=args.inject_fault)
    width = max(len(f"{r.component}:{r.name}") for r in rows)
    lines = [f"{'parameter':<{width}}  max_rel_err  status"]
    for r in rows:
        status = "ok" if r.ok else "FAIL"
        lines.append(f"{r.component + ':' + r.name:<{width}}  {r.error:11.3e}  {status}")
    print("\n".join(lines))
    bad = [r for r in rows if not r.ok]
    if bad:
        names = ", ".join(f"{r.component}:{r.name}" for r in bad)
        print(f"gradient check failed (tolerance {TOLERANCE:g}): {names}", file=sys.stderr)
        return 1
    return 0


def param_count_rows(L: int, d: int, d_pos: int, gamma: float, n_extra: int = 2,
                     ffn_mult: int = 4) -> list[tuple[str, int]]:
    rows = []
    for kind in (FusionKind.BASE, FusionKind.EXTRA, FusionKind.AVERAGE, FusionKind.CONCAT,
                 FusionKind.DWATT):
        spec = FusionSpec(kind=kind, n_extra=n_extra, d_pos=d_pos, gamma_q=gamma, gamma_v=gamma)
        rows.append((kind.value, count_added_params(spec, L, d, ffn_mult)))
    return rows


def cmd_param_count(args) -> int:
    show_ref = args.L == 24 and args.d == 1024
    header = f"{'fusion':<8}{'added_params':>14}"
    if show_ref:
        header += f"{'reference':>12}{'rel_diff':>10}"
    print(header)
    for kind, n in param_count_rows(args.L, args.d, args.d_pos, args.gamma, args.n_extra,
                                    args.ffn_mult):
        line = f"{kind:<8}{n:>14,d}"
        if show_ref and kind in REFERENCE_COUNTS:
            ref = REFERENCE_COUNTS[kind]
            diff = abs(n - ref) / ref if ref else float(n != 0)
            ref_text = f"{ref / 1e6:.2f}M" if ref else "-"
            line += f"{ref_text:>12}{100 * diff:>9.2f}%"
        print(line)
    return 0


def cmd_synth_data(args) -> int:
    from .train import load_corpus

    cfg = resolve_config(args)
    out = out_dir(args)
    snapshot(cfg, out)
    corpus = load_corpus(cfg)
    for split in ("train", "dev", "test"):
        write_conll(out / f"{split}.conll", getattr(corpus, split))
    print(f"wrote {len(corpus.train)}/{len(corpus.dev)}/{len(corpus.test)} sentences to {out}")
    return 0


# parser ------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON config file")
    common.add_argument("--set", action="append", metavar="SECTION.FIELD=VALUE",
                        help="override one config value (JSON-parsed), repeatable")
    common.add_argument("--out", help=f"output directory (default ${OUT_ENV}/<command>)")
    common.add_argument("--seed", type=int, help="root seed")
    common.add_argument("-v", "--verbose", action="count", default=0)

    parser = argparse.ArgumentParser(prog="layerfuse",
                                     description="Depth-wise layer fusion experiments")
    sub = parser.add_subparsers(dest="command", required=True)

    sub.add_parser("pretrain", parents=[common], help="MLM-pretrain the base encoder")
    p = sub.add_parser("train", parents=[common], help="one training run")
    p.add_argument("--trial", type=int, default=0)
    p = sub.add_parser("grid", parents=[common], help="N-shot x epochs x fusion grid")
    p.add_argument("--jobs", type=int, default=1)
    p = sub.add_parser("eval", parents=[common], help="score a saved model")
    p.add_argument("--model", required=True)
    p.add_argument("--vocab")
    p.add_argument("--split", choices=["dev", "test"], default="test")
    p = sub.add_parser("grad-check", parents=[common], help="finite-difference gradient check")
    p.add_argument("--inject-fault", action="store_true", help=argparse.SUPPRESS)
    p = sub.add_parser("param-count", parents=[common], help="added parameters per fusion kind")
    p.add_argument("--L", type=int, default=24)
    p.add_argument("--d", type=int, default=1024)
    p.add_argument("--d-pos", type=int, default=24)
    p.add_argument("--gamma", type=float, default=0.5)
    p.add_argument("--n-extra", type=int, default=2)
    p.add_argument("--ffn-mult", type=int, default=4)
    sub.add_parser("synth-data", parents=[common], help="write the synthetic corpus as CoNLL")
    return parser


COMMANDS = {
    "pretrain": cmd_pretrain,
    "train": cmd_train,
    "grid": cmd_grid,
    "eval": cmd_eval,
    "grad-check": cmd_grad_check,
    "param-count": cmd_param_count,
    "synth-data": cmd_synth_data,
}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    level = [logging.WARNING, logging.INFO, logging.DEBUG][min(args.verbose, 2)]
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code
    except (ConfigError, InputError, ConllParseError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (TrainingDiverged, ContractError, ShapeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
