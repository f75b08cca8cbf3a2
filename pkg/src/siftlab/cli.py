"""``siftlab`` command line.

Every verb writes ``manifest.json`` and ``config.txt`` into the output
directory before any result file; ``siftlab <verb> --config config.txt``
re-runs it.  Exit codes: 0 ok, 2 configuration error, 3 numeric divergence,
4 I/O or file-format error.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import platform
import sys
from pathlib import Path

import numpy as np

from . import __version__, analysis, harness, kernels, landscape, persistence
from .autodiff import NonFiniteLossError
from .config import SEED_KEYS, ConfigError, RunConfig, apply_overrides, load_config
from .models import is_dense_only, select_trainable
from .sift import IncrementMismatchError, NonFiniteGradientError, calibrate_mask, memory_report, merge_increment
from .tasks import batches, fixed_batches

log = logging.getLogger("siftlab")

VERBS = ("pretrain", "calibrate", "train", "analyze-grads", "scan-landscape", "verify-bound",
         "merge", "report", "compare")
EXIT_OK, EXIT_CONFIG, EXIT_DIVERGED, EXIT_IO = 0, 2, 3, 4
PRETRAIN_PREFIXES = ("model.", "task.", "pretrain.")


class Diverged(Exception):
    pass


# ----------------------------------------------------------------------
# run context

class Run:
    def __init__(self, verb: str, cfg: RunConfig, out: Path):
        self.verb, self.cfg, self.out = verb, cfg, out

    def path(self, name: str) -> Path:
        return self.out / name

    def write_manifest(self, extra: dict | None = None) -> None:
        self.out.mkdir(parents=True, exist_ok=True)
        (self.out / "config.txt").write_text(self.cfg.to_text(), encoding="utf-8")
        manifest = {
            "verb": self.verb,
            "config": dict(self.cfg),
            "seeds": {k: self.cfg[k] for k in SEED_KEYS},
            "versions": {"siftlab": __version__, "numpy": np.__version__,
                         "python": platform.python_version(), "kernels": kernels.BACKEND},
        }
        manifest.update(extra or {})
        persistence.write_report_json(self.path(f"manifest.{self.verb}.json"), manifest)
        persistence.write_report_json(self.path("manifest.json"), manifest)


def _pretrain_key(cfg: RunConfig) -> dict:
    return {k: v for k, v in sorted(cfg.items()) if k.startswith(PRETRAIN_PREFIXES)}


def load_or_pretrain(run: Run) -> harness.PretrainResult:
    """Reuse ``theta0/theta1.ckpt`` from the output directory when they were made with the same settings."""
    cfg = run.cfg
    ds = harness.task_from_config(cfg)
    info_path = run.path("pretrain.json")
    t0, t1 = run.path("theta0.ckpt"), run.path("theta1.ckpt")
    if info_path.exists() and t0.exists() and t1.exists():
        info = json.loads(info_path.read_text(encoding="utf-8"))
        if info.get("settings") == _pretrain_key(cfg):
            from .models import make_model
            model = make_model(harness.model_config(cfg, ds))
            log.info("reusing pre-trained checkpoints in %s", run.out)
            return harness.PretrainResult(model, persistence.load_checkpoint(t0),
                                          persistence.load_checkpoint(t1), ds, info["history"])
    pre = harness.pretrain(cfg, ds)
    persistence.save_checkpoint(t0, pre.theta0)
    persistence.save_checkpoint(t1, pre.theta1)
    persistence.write_report_json(info_path, {
        "settings": _pretrain_key(cfg), "history": pre.history,
        "param_count": pre.theta1.n_elements(),
        "pretrain_eval_acc": harness.accuracy(pre.model, pre.theta1, ds, "pretrain"),
        "finetune_eval_acc_before": harness.accuracy(pre.model, pre.theta1, ds),
    })
    return pre


# ----------------------------------------------------------------------
# verbs

def cmd_pretrain(run: Run) -> dict:
    pre = load_or_pretrain(run)
    persistence.write_metrics_csv(run.path("pretrain_metrics.csv"), pre.history)
    return {"final_train_loss": pre.history[-1]["train_loss"]}


def _masked_names(cfg: RunConfig, params) -> list[str]:
    return [n for n in select_trainable(params, cfg["train.filter"]) if not is_dense_only(n)]


def cmd_calibrate(run: Run) -> dict:
    cfg = run.cfg
    pre = load_or_pretrain(run)
    names = _masked_names(cfg, pre.theta1)
    stream = batches(pre.dataset, "finetune-train", cfg["train.batch_size"], cfg["train.order_seed"])
    mask = calibrate_mask(pre.model, pre.theta1, names, stream, cfg["train.rate"],
                          cfg["train.calibration_batches"], cfg["train.granularity"])
    persistence.save_mask(run.path("mask.bin"), mask)
    rep = memory_report(mask, pre.theta1).as_dict()
    persistence.write_report_json(run.path("memory_report.json"), rep)
    return {"masked_elements": mask.size(), "grad_ratio": rep["grad_ratio"]}


def cmd_train(run: Run) -> dict:
    cfg = run.cfg
    pre = load_or_pretrain(run)
    res = harness.finetune(cfg, pre.model, pre.theta1, pre.dataset)
    persistence.write_metrics_csv(run.path("metrics.csv"), res.metrics)
    if res.mask is not None and res.mask.indices:
        persistence.save_mask(run.path("mask.bin"), res.mask)
    if res.memory is not None:
        persistence.write_report_json(run.path("memory_report.json"), res.memory.as_dict())
    if res.method == "full":
        persistence.save_checkpoint(run.path("finetuned.ckpt"), res.params)
    else:
        # dense-trained tensors (classifier, layer norms) ride along as full-index entries
        persistence.save_increment(run.path("increment.bin"), res.optimizer.increment(include_dense=True))
    summary = {"method": res.method, "rate": cfg["train.rate"], "diverged": res.diverged,
               "trainable": res.trainable, "masked_names": res.masked_names, "dense_names": res.dense_names,
               "final": res.metrics[-1]}
    persistence.write_report_json(run.path("train.json"), summary)
    if res.diverged:
        raise Diverged(f"training diverged in epoch {len(res.metrics)}; partial artifacts in {run.out}")
    return {"eval_acc": res.final_accuracy}


def cmd_analyze_grads(run: Run) -> dict:
    cfg = run.cfg
    pre = load_or_pretrain(run)
    names = select_trainable(pre.theta0, cfg["train.filter"])
    fractions = cfg.list_of("analysis.fractions")
    out = {"names": names, "fractions": fractions}
    for label, params in (("theta0", pre.theta0), ("theta1", pre.theta1)):
        grads = harness.finetune_gradients(cfg, pre.model, params, pre.dataset, names, cfg["analysis.grad_batches"],
                                           cfg["train.order_seed"])
        flat = analysis.flatten_grads(grads)
        prof = analysis.sparsity_profile(flat, fractions)
        hist = analysis.grad_histogram(flat, cfg["analysis.bins"], log_scale=True)
        out[label] = {"energy_fraction": prof.energy_fraction, "abs_fraction": prof.abs_fraction, "n": prof.n,
                      "histogram": {"log10_edges": hist.edges, "counts": hist.counts, "min": hist.min,
                                    "max": hist.max, "mean": hist.mean, "std": hist.std}}
    out["capture"] = harness.capture_study(cfg, pre)
    persistence.write_report_json(run.path("grads.json"), out)
    return {"n": out["theta1"]["n"], "capture_mean_gap": {k: v["mean_gap"] for k, v in out["capture"].items()}}


def cmd_scan_landscape(run: Run) -> dict:
    cfg = run.cfg
    pre = load_or_pretrain(run)
    evals = fixed_batches(pre.dataset, "finetune-eval", 256)
    evals = harness._limit(evals, cfg["scan.eval_size"])
    fn = landscape.dataset_loss_fn(pre.model, evals)
    alphas = landscape.default_alpha_grid(cfg["scan.alpha_points"])
    betas = landscape.default_beta_grid(cfg["scan.beta_points"])
    meta = {"split": "finetune-eval", "eval_size": cfg["scan.eval_size"],
            "direction_seed": cfg["scan.direction_seed"]}
    threads = cfg["run.threads"]
    s1 = landscape.scan_1d(fn, pre.theta0, pre.theta1, alphas, threads, meta)
    d1 = landscape.direction(pre.theta0, pre.theta1)
    d2 = landscape.gen_second_direction(d1, cfg["scan.direction_seed"])
    s2 = landscape.scan_2d(fn, pre.theta0, d1, d2, alphas, betas, threads, meta)
    persistence.write_scan_csv(run.path("scan_1d.csv"), s1)
    persistence.write_scan_csv(run.path("scan_2d.csv"), s2)
    return {"nonfinite_points": int(s1.nonfinite.sum() + s2.nonfinite.sum())}


def cmd_verify_bound(run: Run) -> dict:
    pre = load_or_pretrain(run)
    rep = harness.verify_bound_rows(run.cfg, pre)
    rep["concentration_top1pct"] = harness.concentration(run.cfg, pre, 0.01)
    persistence.write_report_json(run.path("bound.json"), rep)
    return {"all_hold": rep["all_hold"], "rows": len(rep["rows"])}


def cmd_merge(run: Run, checkpoint: str | None, increment: str | None) -> dict:
    base = persistence.load_checkpoint(checkpoint or run.path("theta1.ckpt"))
    inc = persistence.load_increment(increment or run.path("increment.bin"))
    merged = merge_increment(base, inc)
    persistence.save_checkpoint(run.path("merged.ckpt"), merged)
    changed = sum(int(np.sum(merged[k] != base[k])) for k in base)
    return {"tensors": len(inc), "values": inc.n_values(), "changed_entries": changed}


REPORT_SOURCES = ("pretrain.json", "train.json", "memory_report.json", "grads.json", "bound.json", "compare.json")


def cmd_report(run: Run) -> dict:
    found = {}
    for name in REPORT_SOURCES:
        p = run.path(name)
        if p.exists():
            found[name[:-5]] = json.loads(p.read_text(encoding="utf-8"))
    if not found:
        raise FileNotFoundError(f"no result files in {run.out}")
    summary = {}
    if "train" in found:
        summary["train"] = {k: found["train"][k] for k in ("method", "rate", "diverged", "final")}
    if "memory_report" in found:
        summary["memory_ratio"] = found["memory_report"]["grad_ratio"]
    if "bound" in found:
        summary["bound_all_hold"] = found["bound"]["all_hold"]
        summary["concentration_top1pct"] = found["bound"]["concentration_top1pct"]
    if "compare" in found:
        summary["compare"] = {"table": found["compare"]["table"], "ordering": found["compare"]["ordering"]}
    if "grads" in found:
        summary["capture_mean_gap"] = {k: v["mean_gap"] for k, v in found["grads"]["capture"].items()}
    persistence.write_report_json(run.path("report.json"), {"sources": sorted(found), "summary": summary})
    return summary


def cmd_compare(run: Run) -> dict:
    cfg = run.cfg
    methods = cfg.list_of("compare.methods", str)
    rates = cfg.list_of("compare.rates", float)
    seeds = cfg.list_of("compare.seeds", int)
    result = harness.compare(cfg, methods, rates, seeds)
    persistence.write_report_json(run.path("compare.json"), result)
    persistence.write_metrics_csv(run.path("compare.csv"), result["rows"])
    return {"ordering": result["ordering"]}


# ----------------------------------------------------------------------
# entry point

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="siftlab", description="Sparse increment fine-tuning experiments.")
    p.add_argument("verb", choices=VERBS)
    p.add_argument("--config", help="key = value config file")
    p.add_argument("--out", help="output directory (default: $SIFTLAB_OUT or ./runs)")
    p.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                   help="override one config key (repeatable)")
    p.add_argument("--seed", type=int, help="set every *seed key at once")
    p.add_argument("--threads", type=int, help="worker threads for scan grids")
    p.add_argument("--checkpoint", help="merge: base checkpoint (default OUT/theta1.ckpt)")
    p.add_argument("--increment", help="merge: increment file (default OUT/increment.bin)")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def resolve_config(args) -> RunConfig:
    cfg = load_config(args.config) if args.config else RunConfig()
    if args.seed is not None:
        if args.seed < 0:
            raise ConfigError("--seed must be non-negative")
        for k in SEED_KEYS:
            cfg[k] = args.seed
    if args.threads is not None:
        if args.threads < 1:
            raise ConfigError("--threads must be >= 1")
        cfg["run.threads"] = args.threads
    apply_overrides(cfg, args.overrides)
    for key in ("train.method",):
        if cfg[key] not in harness.METHODS:
            raise ConfigError(f"{key} must be one of {harness.METHODS}, got {cfg[key]!r}")
    if not (0.0 < cfg["train.rate"] <= 1.0):
        raise ConfigError(f"train.rate must lie in (0, 1], got {cfg['train.rate']}")
    return cfg


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = resolve_config(args)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    out = Path(args.out or os.environ.get("SIFTLAB_OUT") or "runs")
    run = Run(args.verb, cfg, out)
    try:
        run.write_manifest()
        if args.verb == "merge":
            summary = cmd_merge(run, args.checkpoint, args.increment)
        else:
            summary = COMMANDS[args.verb](run)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except (Diverged, NonFiniteLossError, NonFiniteGradientError, harness.DivergenceError) as e:
        print(f"diverged: {e}", file=sys.stderr)
        return EXIT_DIVERGED
    except (OSError, persistence.FormatError, IncrementMismatchError) as e:
        print(f"i/o error: {e}", file=sys.stderr)
        return EXIT_IO
    except ValueError as e:
        # bad values that survive parsing (unknown filter, task kind, ...) are configuration problems
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    print(persistence.report_json_text(summary), end="")
    return EXIT_OK


COMMANDS = {
    "pretrain": cmd_pretrain,
    "calibrate": cmd_calibrate,
    "train": cmd_train,
    "analyze-grads": cmd_analyze_grads,
    "scan-landscape": cmd_scan_landscape,
    "verify-bound": cmd_verify_bound,
    "report": cmd_report,
    "compare": cmd_compare,
}

if __name__ == "__main__":
    sys.exit(main())
