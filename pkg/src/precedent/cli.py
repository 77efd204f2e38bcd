"""Command-line entry point: ``precedent <command> [flags]``.

Artifacts live in the ``--out`` directory; each stage reads what the
previous ones wrote there.  Exit codes: 0 success, 2 bad input, 3 missing
artifact, 4 numerical failure, 5 configuration error.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

THREAD_ENV = "PRECEDENT_THREADS"
_THREAD_VARS = ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS", "NUMBA_NUM_THREADS")

EXIT_OK, EXIT_INPUT, EXIT_MISSING, EXIT_NUMERIC, EXIT_CONFIG = 0, 2, 3, 4, 5

log = logging.getLogger("precedent")


def _cap_threads() -> None:
    n = os.environ.get(THREAD_ENV)
    if n:
        for var in _THREAD_VARS:
            os.environ[var] = n


class CliError(Exception):
    def __init__(self, message: str, code: int):
        super().__init__(message)
        self.code = code


# --------------------------------------------------------------------------
# argument parsing
# --------------------------------------------------------------------------

COMMANDS = ("gen-corpus", "ingest", "train-retriever", "build-store", "train", "eval", "sweep", "pipeline")


def build_parser() -> argparse.ArgumentParser:
    from .config import describe_keys

    keys = "config keys (JSON file via --config, or --set KEY=VALUE):\n" + describe_keys()
    env = f"environment:\n  {THREAD_ENV}  cap on BLAS / numba threads\n  PRECEDENT_DISABLE_NUMBA=1  use the pure-numpy kernels"
    fmt = argparse.RawDescriptionHelpFormatter
    parser = argparse.ArgumentParser(prog="precedent", description=__doc__, epilog=keys + "\n\n" + env,
                                     formatter_class=fmt)
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON run config")
    common.add_argument("--seed", type=int)
    common.add_argument("--task", choices=["A", "B"])
    common.add_argument("--regime", help="training regime (train.regime)")
    common.add_argument("--retriever", choices=["self", "binary", "lor"], help="retriever.regime")
    common.add_argument("--fusion", choices=["mean", "cross", "stacked"], help="fusion.variant")
    common.add_argument("--k", type=int, help="precedents per case (train.k and interp.k)")
    common.add_argument("--lambda", dest="lam", type=float, help="interp.lambda")
    common.add_argument("--tau", type=float, help="interp.tau")
    common.add_argument("--out", help="artifact directory")
    common.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override any config key")

    helps = {
        "gen-corpus": "generate the synthetic corpus and split manifest",
        "ingest": "read a JSONL case file into the corpus cache",
        "train-retriever": "train the precedent retriever on label-overlap pairs",
        "build-store": "embed the training split into the precedent datastore",
        "train": "train one regime (baseline first; fusion regimes start from it)",
        "eval": "score a trained regime on validation and test",
        "sweep": "grid-search kNN interpolation on validation",
        "pipeline": "every stage in order for one regime",
    }
    for name in COMMANDS:
        p = sub.add_parser(name, parents=[common], help=helps[name], epilog=keys, formatter_class=fmt)
        if name == "gen-corpus":
            p.add_argument("--cases", type=int, help="corpus.cases")
            p.add_argument("--labels", type=int, help="corpus.labels")
        if name == "ingest":
            p.add_argument("--input", required=True, help="JSONL case file")
        if name in ("sweep", "pipeline"):
            p.add_argument("--k-grid", help="sweep.k_grid, comma separated")
            p.add_argument("--lambda-grid", help="sweep.lambda_grid, comma separated")
            p.add_argument("--tau-grid", help="sweep.tau_grid, comma separated")
        if name in ("train", "pipeline"):
            p.add_argument("--epochs", type=int, help="train.epochs (fusion regimes) or train.baseline_epochs")
    return parser


def resolve_config(args):
    from .config import ConfigError, RunConfig

    over = {
        "seed": args.seed, "task": args.task, "train.regime": args.regime, "retriever.regime": args.retriever,
        "fusion.variant": args.fusion, "interp.lambda": args.lam, "interp.tau": args.tau, "out": args.out,
    }
    if args.k is not None:
        over["train.k"] = over["interp.k"] = args.k
    for extra in ("cases", "labels"):
        if getattr(args, extra, None) is not None:
            over[f"corpus.{extra}"] = getattr(args, extra)
    for flag in ("k_grid", "lambda_grid", "tau_grid"):
        if getattr(args, flag, None) is not None:
            over[f"sweep.{flag}"] = getattr(args, flag)
    if getattr(args, "epochs", None) is not None:
        key = "train.baseline_epochs" if (args.regime or "") == "baseline" else "train.epochs"
        over[key] = args.epochs
    for item in args.set:
        if "=" not in item:
            raise ConfigError(f"--set expects KEY=VALUE, got {item!r}")
        k, v = item.split("=", 1)
        try:
            over[k.strip()] = json.loads(v)
        except json.JSONDecodeError:
            over[k.strip()] = v
    return RunConfig.resolve(args.config, over)


# --------------------------------------------------------------------------
# artifact helpers
# --------------------------------------------------------------------------


class Run:
    """Paths and loaders for one artifact directory."""

    def __init__(self, cfg):
        self.cfg = cfg
        self.dir = Path(cfg["out"])
        self.task = cfg["task"]

    def path(self, name: str) -> Path:
        return self.dir / name

    def need(self, name: str, producer: str) -> Path:
        p = self.path(name)
        if not p.exists():
            raise CliError(f"missing artifact {p} (run '{producer}' first)", EXIT_MISSING)
        return p

    def echo_config(self, command: str) -> None:
        self.dir.mkdir(parents=True, exist_ok=True)
        self.path(f"config.{command}.json").write_text(self.cfg.to_json() + "\n")

    def write_json(self, name: str, obj) -> None:
        from .metrics import _json_default

        self.path(name).write_text(json.dumps(obj, indent=2, sort_keys=True, default=_json_default) + "\n")

    def corpus(self):
        from .corpus import CorpusSplit, load_corpus

        corpus = load_corpus(self.need("corpus.bin", "gen-corpus"))
        manifest = json.loads(self.need("manifest.json", "gen-corpus").read_text())
        return corpus, CorpusSplit.from_manifest(manifest)

    def load_model(self, ckpt: str, producer: str, corpus, retriever_regime=None, fusion_cfg=None):
        from .diffcore import load_checkpoint
        from .jointtrain import ModelBundle

        store = load_checkpoint(self.need(ckpt, producer))
        return ModelBundle.from_store(store, self.cfg.encoder(), corpus.n_labels, corpus.vocab_size,
                                      retriever_regime, fusion_cfg)

    def experiment(self, corpus, split, need_retriever: bool):
        """Experiment pre-loaded with this directory's baseline (and retriever)."""
        from .diffcore import load_checkpoint
        from .jointtrain import RET, Experiment

        ex = Experiment(corpus, split, self.cfg.experiment(), self.cfg["seed"])
        ex.baselines[self.task] = self.load_model(f"baseline_{self.task}.ckpt", "train --regime baseline", corpus)
        regime = self.cfg["retriever.regime"]
        if need_retriever and regime != "self":
            params = load_checkpoint(self.need(f"retriever_{regime}.ckpt", "train-retriever"))
            ex.retrievers[regime] = (params.subset([RET]), {})
        return ex

    def store(self, name: str, producer: str, dim: int):
        from . import datastore as ds

        return ds.load(self.need(name, producer), expected_dim=dim)


def _report(result) -> dict:
    from dataclasses import asdict

    out = {"row": result.metrics_row(), "validation": asdict(result.validation), "test": asdict(result.test),
           "best_epoch": result.best_epoch, "history": result.history, "seconds": round(result.seconds, 3)}
    if result.interpolation is not None:
        i = result.interpolation
        out["interpolation"] = {"k": i.k, "lambda": i.lam, "tau": i.tau}
    if result.snapshot_versions:
        out["snapshot_versions"] = [sorted(set(v)) for v in result.snapshot_versions]
        out["refreshes"] = result.refreshes
    return out


ROW_COLUMNS = ("regime", "task", "seed", "macro_f1", "micro_f1", "hard_macro_f1", "lor", "best_epoch")


def _write_rows(path: Path, rows: list[dict]) -> None:
    import csv

    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=ROW_COLUMNS)
        w.writeheader()
        for r in rows:
            w.writerow({k: ("" if r.get(k) is None else r[k]) for k in ROW_COLUMNS})


def _print_row(row: dict) -> None:
    def f(x):
        return "-" if x is None else f"{100 * x:.2f}"

    print(f"{row['regime']:<16} task {row['task']}  Mac-F1 {f(row['macro_f1'])}  Mic-F1 {f(row['micro_f1'])}  "
          f"H.Ma-F1 {f(row['hard_macro_f1'])}  LOR {'-' if row['lor'] is None else format(row['lor'], '.3f')}")


# --------------------------------------------------------------------------
# commands
# --------------------------------------------------------------------------


def cmd_gen_corpus(run: Run, args) -> None:
    from .corpus import generate_synthetic

    cfg = run.cfg
    corpus, split = generate_synthetic(seed=cfg["seed"], n_cases=cfg["corpus.cases"], n_labels=cfg["corpus.labels"],
                                       vocab_size=cfg["corpus.vocab"])
    if tuple(cfg["corpus.fractions"]) != (0.8, 0.1, 0.1):
        from .corpus import chronological_split

        split = chronological_split(corpus, cfg["corpus.fractions"])
    _save_corpus(run, corpus, split)
    print(f"wrote {len(corpus)} cases to {run.path('corpus.bin')} ({split.sizes()})")


def _save_corpus(run: Run, corpus, split) -> None:
    from .corpus import save_corpus

    run.dir.mkdir(parents=True, exist_ok=True)
    save_corpus(corpus, run.path("corpus.bin"))
    manifest = split.to_manifest(corpus)
    manifest["n_labels"] = corpus.n_labels
    manifest["vocab_size"] = corpus.vocab_size
    manifest["warnings"] = dict(corpus.warnings)
    run.write_json("manifest.json", manifest)


def cmd_ingest(run: Run, args) -> None:
    from .corpus import VocabPolicy, ingest_jsonl

    cfg = run.cfg
    if not Path(args.input).exists():
        raise CliError(f"input file not found: {args.input}", EXIT_INPUT)
    corpus, split = ingest_jsonl(args.input, VocabPolicy(max_size=cfg["corpus.max_vocab"]), cfg["corpus.labels"],
                                 cfg["encoder.max_tokens_per_paragraph"], cfg["encoder.max_paragraphs"],
                                 tuple(cfg["corpus.fractions"]))
    _save_corpus(run, corpus, split)
    n_warn = corpus.warnings.get("violated_not_alleged", 0)
    print(f"ingested {len(corpus)} cases ({split.sizes()}); {n_warn} violated-but-not-alleged warnings")


def cmd_train_retriever(run: Run, args) -> None:
    corpus, split = run.corpus()
    regime = run.cfg["retriever.regime"]
    if regime == "self":
        print("self-retrieval reuses the baseline encoder; nothing to train")
        return
    from .diffcore import save_checkpoint
    from .jointtrain import Experiment

    ex = Experiment(corpus, split, run.cfg.experiment(), run.cfg["seed"])
    params, hist = ex.retriever_params(regime)
    save_checkpoint(params, run.path(f"retriever_{regime}.ckpt"))
    run.write_json(f"retriever_{regime}.json", hist)
    init, final = hist.get("heldout_mse_init"), hist["heldout_mse"][-1]
    print(f"retriever ({regime}) held-out pair MSE {init:.4f} -> {final:.4f}")


def cmd_build_store(run: Run, args) -> None:
    from . import datastore as ds

    corpus, split = run.corpus()
    ex = run.experiment(corpus, split, need_retriever=True)
    model, snap = ex.prepared(run.task, run.cfg["retriever.regime"])
    ds.save(snap, run.path(f"store_{run.task}.bin"))
    print(f"stored {len(snap)} training cases (dim {snap.dim}, task {run.task}, version {snap.version})")


def cmd_train(run: Run, args) -> None:
    from .diffcore import save_checkpoint
    from .jointtrain import Experiment

    cfg = run.cfg
    regime = cfg["train.regime"]
    corpus, split = run.corpus()
    if regime == "baseline":
        ex = Experiment(corpus, split, cfg.experiment(), cfg["seed"])
        result = ex.baseline(run.task)
        save_checkpoint(result.model.store, run.path(f"baseline_{run.task}.ckpt"))
        run.write_json(f"baseline_{run.task}.json", _report(result))
        _print_row(result.metrics_row())
        return
    if regime == "inference-only":
        cmd_sweep(run, args)
        return
    result = _train_fusion(run, corpus, split, regime)
    _print_row(result.metrics_row())


def _train_fusion(run: Run, corpus, split, regime: str):
    from . import datastore as ds
    from .diffcore import save_checkpoint

    # fail on configuration problems before any training
    reg = run.cfg.experiment()
    ex = run.experiment(corpus, split, need_retriever=True)
    ex.regime(regime)
    snap = run.store(f"store_{run.task}.bin", "build-store", reg.enc.embedding_dim)
    result = ex.run(regime, run.task, snapshot=snap)
    tag = f"{regime}_{run.task}"
    save_checkpoint(result.model.store, run.path(f"model_{tag}.ckpt"))
    ds.save(result.snapshot, run.path(f"store_{tag}.bin"))
    report = _report(result)
    report["fusion"] = {"variant": run.cfg["fusion.variant"], "layers": run.cfg["fusion.layers"]}
    report["retriever"] = run.cfg["retriever.regime"]
    report["k"] = run.cfg["train.k"]
    run.write_json(f"model_{tag}.json", report)
    return result


def cmd_sweep(run: Run, args):
    corpus, split = run.corpus()
    cfg = run.cfg
    ex = run.experiment(corpus, split, need_retriever=True)
    model, _ = ex.prepared(run.task, cfg["retriever.regime"])
    snap = run.store(f"store_{run.task}.bin", "build-store", model.retriever.dim)
    grids = (cfg["sweep.k_grid"], cfg["sweep.lambda_grid"], cfg["sweep.tau_grid"])
    kmax = max(grids[0])
    if kmax > len(snap):
        grids = ([k for k in grids[0] if k <= len(snap)] or [len(snap)], grids[1], grids[2])
    result = ex.run("inference-only", run.task, snapshot=snap, sweep_grids=grids)
    from .interpolation import REPORT_COLUMNS
    import csv

    with open(run.path(f"sweep_{run.task}.csv"), "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=REPORT_COLUMNS)
        w.writeheader()
        for r in result.sweep_rows:
            w.writerow({k: ("" if r[k] is None else r[k]) for k in REPORT_COLUMNS})
    run.write_json(f"sweep_{run.task}.json", _report(result))
    best = result.interpolation
    print(f"best on validation: k={best.k} lambda={best.lam} tau={best.tau} "
          f"(macro-F1 {100 * result.validation.macro_f1:.2f})")
    _print_row(result.metrics_row())
    return result


def cmd_eval(run: Run, args):
    from .fusion import FusionConfig
    from .jointtrain import evaluate_split, RegimeResult

    cfg = run.cfg
    regime = cfg["train.regime"]
    corpus, split = run.corpus()
    task = run.task
    train_alleged = corpus.alleged_matrix(list(split.train))
    if regime == "baseline":
        model = run.load_model(f"baseline_{task}.ckpt", "train --regime baseline", corpus)
        val = evaluate_split(model, corpus, split.validation, task, None, 1)
        test = evaluate_split(model, corpus, split.test, task, None, 1)
        meta = {}
        snap = None
    elif regime == "inference-only":
        return _eval_interpolation(run, corpus, split)
    else:
        tag = f"{regime}_{task}"
        meta = json.loads(run.need(f"model_{tag}.json", f"train --regime {regime}").read_text())
        fcfg = FusionConfig(meta["fusion"]["variant"], meta["fusion"]["layers"])
        model = run.load_model(f"model_{tag}.ckpt", f"train --regime {regime}", corpus, meta["retriever"], fcfg)
        snap = run.store(f"store_{tag}.bin", f"train --regime {regime}", model.retriever.dim)
        k = args.k if args.k is not None else meta["k"]
        val = evaluate_split(model, corpus, split.validation, task, snap, k, train_alleged)
        test = evaluate_split(model, corpus, split.test, task, snap, k, train_alleged)
    result = RegimeResult(regime, task, cfg["seed"], meta.get("best_epoch", 0), val, test, model, snap)
    _write_eval(run, result)
    return result


def _eval_interpolation(run: Run, corpus, split):
    from .interpolation import InterpolationConfig
    from .jointtrain import RegimeResult, apply_interpolation, predict_probs, _retrieve_for_eval, _without_fusion
    from .metrics import evaluate, lor_at_k
    import numpy as np

    cfg = run.cfg
    task = run.task
    fixed = (cfg["interp.k"], cfg["interp.lambda"], cfg["interp.tau"])
    if any(v is None for v in fixed):
        best = json.loads(run.need(f"sweep_{task}.json", "sweep").read_text())["interpolation"]
        fixed = tuple(best[n] if v is None else v for n, v in zip(("k", "lambda", "tau"), fixed))
    icfg = InterpolationConfig(int(fixed[0]), float(fixed[2]), float(fixed[1]))
    ex = run.experiment(corpus, split, need_retriever=True)
    model, _ = ex.prepared(task, cfg["retriever.regime"])
    snap = run.store(f"store_{task}.bin", "build-store", model.retriever.dim)
    train_alleged = corpus.alleged_matrix(list(split.train))
    reports = []
    for ids in (split.validation, split.test):
        probs, _ = predict_probs(_without_fusion(model), corpus, ids, None, 1)
        _, idx, dist = _retrieve_for_eval(model, snap, corpus.subset(ids), icfg.k)
        final = apply_interpolation(probs, idx, dist, snap.values, icfg)
        rep = evaluate(final.predict(), corpus.label_matrix(ids, task), task, corpus.alleged_matrix(ids))
        valid = idx >= 0
        rep.lor_at_k = lor_at_k(corpus.alleged_matrix(ids), train_alleged[np.where(valid, idx, 0)], valid)
        reports.append(rep)
    result = RegimeResult("inference-only", task, cfg["seed"], 0, reports[0], reports[1], model, snap,
                          interpolation=icfg)
    _write_eval(run, result)
    return result


def _write_eval(run: Run, result) -> None:
    tag = f"{result.regime}_{result.task}"
    run.write_json(f"eval_{tag}.json", _report(result))
    _write_rows(run.path(f"eval_{tag}.csv"), [result.metrics_row()])
    run.path(f"eval_{tag}_per_label.csv").write_text(result.test.to_csv())
    _print_row(result.metrics_row())


def cmd_pipeline(run: Run, args) -> None:
    """gen-corpus -> train-retriever -> baseline -> build-store -> regime -> sweep -> eval."""
    cfg = run.cfg
    regime = cfg["train.regime"]
    if cfg["corpus.source"] == "synthetic":
        cmd_gen_corpus(run, args)
    else:
        args.input = cfg["corpus.source"]
        cmd_ingest(run, args)
    cmd_train_retriever(run, args)
    cfg.values["train.regime"] = "baseline"
    cmd_train(run, args)
    cmd_build_store(run, args)
    cmd_sweep(run, args)
    rows = [cmd_eval(run, args).metrics_row()]
    if regime not in ("baseline", "inference-only"):
        cfg.values["train.regime"] = regime
        cmd_train(run, args)
    cfg.values["train.regime"] = regime
    if regime != "baseline":
        rows.append(cmd_eval(run, args).metrics_row())
    _write_rows(run.path(f"table_{run.task}.csv"), rows)


HANDLERS = {
    "gen-corpus": cmd_gen_corpus,
    "ingest": cmd_ingest,
    "train-retriever": cmd_train_retriever,
    "build-store": cmd_build_store,
    "train": cmd_train,
    "eval": cmd_eval,
    "sweep": cmd_sweep,
    "pipeline": cmd_pipeline,
}


def main(argv: list[str] | None = None) -> int:
    _cap_threads()
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")

    from .config import ConfigError
    from .corpus import CorpusError
    from .datastore import DatastoreError, DimensionError
    from .diffcore import CheckpointError
    from .jointtrain import MissingArtifact

    try:
        cfg = resolve_config(args)
        run = Run(cfg)
        run.echo_config(args.command)
        HANDLERS[args.command](run, args)
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except DimensionError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except MissingArtifact as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_MISSING
    except CorpusError as exc:
        print(f"input error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except (DatastoreError, CheckpointError) as exc:
        print(f"input error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except FloatingPointError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
