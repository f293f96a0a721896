"""Command line: single runs, seed/constant/buffer sweeps, the tabular probe and reports.

Configuration files are flat ``key = value`` lines (``#`` starts a comment).
Any key can be overridden on the command line as ``--key value``,
``--key=value`` or ``key=value``.

    vrer train  --config run.cfg --out runs/a
    vrer sweep  --config sweep.cfg --out runs/sweep --sweep c --sweep_values 1.001,1.05,1.2
    vrer probe  --out runs/probe --env chain --K 500
    vrer report --out runs/sweep
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import math
import sys
import traceback
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import stats

from .selection import SelectionConfig
from .trainer import TrainConfig, make_mdp, tabular_convergence_probe, train

SWEEP_AXES = ("none", "c", "buffer")
SELECTION_KEYS = ("rule", "c", "Uf", "block_length", "test_mode")
EXPERIMENT_KEYS = ("sweep", "sweep_values", "macro_replications", "out_dir", "paired_baseline")
NULLABLE = {"Uf", "block_length", "grad_norm_clip"}


class ConfigError(ValueError):
    pass


@dataclass
class ExperimentSpec:
    train: TrainConfig = field(default_factory=TrainConfig)
    sweep: str = "none"
    sweep_values: tuple = ()
    macro_replications: int = 1
    out_dir: str = "runs"
    paired_baseline: bool = True

    def __post_init__(self):
        if self.sweep not in SWEEP_AXES:
            raise ConfigError(f"sweep must be one of {SWEEP_AXES}, got {self.sweep!r}")
        if self.sweep != "none" and not self.sweep_values:
            raise ConfigError(f"sweep over {self.sweep} needs sweep_values")
        if self.macro_replications < 1:
            raise ConfigError("macro_replications must be at least 1")
        if self.sweep == "c":
            for v in self.sweep_values:
                SelectionConfig(self.train.selection.rule, v, self.train.selection.Uf,
                                self.train.selection.block_length, self.train.selection.test_mode)
        if self.sweep == "buffer" and any(int(v) < 1 or int(v) != v for v in self.sweep_values):
            raise ConfigError("buffer sweep values must be positive integers")

    def points(self):
        """``(label, TrainConfig)`` for every sweep value, without seeds applied."""
        if self.sweep == "none":
            return [("vrer", self.train)]
        out = []
        for v in self.sweep_values:
            if self.sweep == "c":
                sel = dataclasses.replace(self.train.selection, c=float(v))
                out.append((f"c={v:g}", dataclasses.replace(self.train, selection=sel)))
            else:
                out.append((f"B={int(v)}", dataclasses.replace(self.train, buffer_capacity=int(v))))
        return out


# ---------------------------------------------------------------------------
# parsing
# ---------------------------------------------------------------------------


def _defaults():
    d = {f.name: getattr(TrainConfig(), f.name) for f in dataclasses.fields(TrainConfig) if f.name != "selection"}
    sel = SelectionConfig()
    d.update({k: getattr(sel, k) for k in SELECTION_KEYS})
    spec = ExperimentSpec.__dataclass_fields__
    d.update({k: spec[k].default for k in EXPERIMENT_KEYS})
    return d


def _parse_bool(text):
    t = text.strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"expected a boolean, got {text!r}")


def _convert(key, text, default):
    text = text.strip()
    if key in NULLABLE and text.lower() in ("none", "inf", ""):
        return None
    if key == "sweep_values":
        return tuple(float(v) for v in text.replace("[", "").replace("]", "").split(",") if v.strip())
    if key == "hidden":
        return tuple(int(v) for v in text.split(",") if v.strip())
    if key in ("Uf",):
        return float(text)
    if key == "block_length":
        return int(text)
    if isinstance(default, bool):
        return _parse_bool(text)
    if isinstance(default, int):
        return int(text)
    if isinstance(default, float):
        return float(text)
    return text


def read_config_file(path) -> dict:
    """Parse ``key = value`` lines into raw strings, rejecting unknown or repeated keys."""
    known = _defaults()
    out = {}
    try:
        lines = Path(path).read_text().splitlines()
    except OSError as e:
        raise ConfigError(f"{path}: {e.strerror}") from e
    for lineno, raw in enumerate(lines, 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{lineno}: expected 'key = value', got {raw.strip()!r}")
        key, value = (p.strip() for p in line.split("=", 1))
        if key not in known:
            raise ConfigError(f"{path}:{lineno}: unknown key {key!r}")
        if key in out:
            raise ConfigError(f"{path}:{lineno}: duplicate key {key!r}")
        out[key] = (value, f"{path}:{lineno}")
    return out


def parse_overrides(tokens) -> dict:
    """``--key value``, ``--key=value`` or ``key=value`` tokens into raw strings."""
    out = {}
    it = iter(tokens)
    for tok in it:
        if tok.startswith("--"):
            body = tok[2:]
            if "=" in body:
                key, value = body.split("=", 1)
            else:
                key = body
                try:
                    value = next(it)
                except StopIteration:
                    raise ConfigError(f"flag --{key} needs a value") from None
        elif "=" in tok:
            key, value = tok.split("=", 1)
        else:
            raise ConfigError(f"cannot parse argument {tok!r}")
        out[key.replace("-", "_")] = (value, f"flag --{key}")
    return out


def build_spec(raw: dict) -> ExperimentSpec:
    known = _defaults()
    values = dict(known)
    for key, (text, where) in raw.items():
        if key not in known:
            raise ConfigError(f"{where}: unknown key {key!r}")
        try:
            values[key] = _convert(key, text, known[key])
        except ValueError as e:
            raise ConfigError(f"{where}: bad value for {key}: {e}") from None
    try:
        sel = SelectionConfig(**{k: values.pop(k) for k in SELECTION_KEYS})
        exp = {k: values.pop(k) for k in EXPERIMENT_KEYS}
        return ExperimentSpec(TrainConfig(selection=sel, **values), **exp)
    except ConfigError:
        raise
    except ValueError as e:
        raise ConfigError(str(e)) from None


def parse_config(path=None, overrides=()) -> ExperimentSpec:
    """Fully-defaulted spec from an optional config file plus command-line overrides."""
    raw = read_config_file(path) if path else {}
    raw.update(parse_overrides(overrides) if not isinstance(overrides, dict)
               else {k: (str(v), f"override {k}") for k, v in overrides.items()})
    return build_spec(raw)


def spec_to_text(spec: ExperimentSpec) -> str:
    """Every key of ``spec`` in config-file syntax; ``parse_config`` reads it back unchanged."""
    flat = {f.name: getattr(spec.train, f.name) for f in dataclasses.fields(TrainConfig) if f.name != "selection"}
    flat.update({k: getattr(spec.train.selection, k) for k in SELECTION_KEYS})
    flat.update({k: getattr(spec, k) for k in EXPERIMENT_KEYS})
    lines = []
    for k, v in flat.items():
        if v is None:
            v = "none"
        elif isinstance(v, tuple):
            v = ",".join(repr(x) if isinstance(x, float) else str(x) for x in v)
        elif isinstance(v, float):
            v = repr(v)
        lines.append(f"{k} = {v}")
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# experiments
# ---------------------------------------------------------------------------


def read_csv(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def _float(x):
    return math.nan if x in ("", None) else float(x)


def final_window_return(run_dir) -> float:
    """Mean return of episodes ending in the last 10,000 steps (last 10% for runs under 100k steps)."""
    run_dir = Path(run_dir)
    metrics = read_csv(run_dir / "metrics.csv")
    if not metrics:
        return math.nan
    total = int(metrics[-1]["steps"])
    window = 10_000 if total >= 100_000 else total / 10
    rets = [float(r["return"]) for r in read_csv(run_dir / "episodes.csv") if int(r["step"]) > total - window]
    return float(np.mean(rets)) if rets else math.nan


def run_summary(run_dir) -> dict:
    metrics = read_csv(Path(run_dir) / "metrics.csv")
    zeta = [_float(m["zeta_hat"]) for m in metrics]
    zeta = [z for z in zeta if not math.isnan(z)]
    return {
        "final_return": final_window_return(run_dir),
        "reuse_ratio": float(np.mean([float(m["reuse_ratio"]) for m in metrics])),
        "zeta_hat": float(np.mean(zeta)) if zeta else math.nan,
    }


def _mean_std(xs):
    xs = [x for x in xs if not math.isnan(x)]
    if not xs:
        return math.nan, math.nan
    return float(np.mean(xs)), (float(np.std(xs, ddof=1)) if len(xs) > 1 else math.nan)


SUMMARY_COLUMNS = ("series", "replications", "failed", "return_mean", "return_std", "reuse_mean",
                   "reuse_std", "zeta_diff_mean", "zeta_diff_std", "baseline_return_mean", "baseline_return_std")


def summarize(out_dir, reps=None):
    """Recompute the summary table from the per-run CSVs below ``out_dir``."""
    out_dir = Path(out_dir)
    series = sorted(p.name for p in out_dir.iterdir() if p.is_dir() and p.name != "baseline")
    baseline = out_dir / "baseline"
    rows = []
    for name in series:
        rep_dirs = sorted(p for p in (out_dir / name).iterdir() if p.is_dir() and p.name.startswith("rep"))
        ok = [p for p in rep_dirs if (p / "metrics.csv").exists() and not (p / "error.txt").exists()]
        runs = [run_summary(p) for p in ok]
        base = [run_summary(baseline / p.name) if (baseline / p.name / "metrics.csv").exists() else None for p in ok]
        diffs = [b["zeta_hat"] - r["zeta_hat"] for r, b in zip(runs, base) if b is not None]
        rm, rs = _mean_std([r["final_return"] for r in runs])
        um, us = _mean_std([r["reuse_ratio"] for r in runs])
        dm, ds = _mean_std(diffs)
        bm, bs = _mean_std([b["final_return"] for b in base if b is not None])
        rows.append({"series": name, "replications": len(ok), "failed": len(rep_dirs) - len(ok),
                     "return_mean": rm, "return_std": rs, "reuse_mean": um, "reuse_std": us,
                     "zeta_diff_mean": dm, "zeta_diff_std": ds,
                     "baseline_return_mean": bm, "baseline_return_std": bs})
    with open(out_dir / "summary.csv", "w", newline="") as fh:
        w = csv.DictWriter(fh, SUMMARY_COLUMNS, lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in r.items()})
    return rows


def _run_one(config, run_dir, log):
    run_dir.mkdir(parents=True, exist_ok=True)
    try:
        train(config, run_dir)
        return True
    except Exception:
        (run_dir / "error.txt").write_text(traceback.format_exc())
        print(f"run {run_dir} failed; see error.txt", file=log)
        return False


def run_experiment(spec: ExperimentSpec, log=sys.stderr):
    """Run every sweep point (and the paired baseline) for each replication.

    Replication ``r`` uses seed ``train.seed + r`` for every series, so baseline and
    VRER runs see the same environment and initialisation streams.  Returns
    ``(summary_rows, all_ok)``.
    """
    out = Path(spec.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.txt").write_text(spec_to_text(spec))
    ok = True
    for r in range(spec.macro_replications):
        seed = spec.train.seed + r
        if spec.paired_baseline:
            sel = dataclasses.replace(spec.train.selection, rule="none")
            base = dataclasses.replace(spec.train, selection=sel, seed=seed)
            ok &= _run_one(base, out / "baseline" / f"rep{r}", log)
        for label, cfg in spec.points():
            ok &= _run_one(dataclasses.replace(cfg, seed=seed), out / label / f"rep{r}", log)
    rows = summarize(out)
    emit_plot_data(out)
    return rows, ok


def t_interval(samples, level=0.95):
    """``(mean, low, high)`` of the Student-t interval; bounds are None below two samples."""
    x = np.asarray(samples, dtype=np.float64)
    m = float(x.mean())
    if len(x) < 2:
        return m, None, None
    half = stats.t.ppf(0.5 + level / 2, len(x) - 1) * x.std(ddof=1) / math.sqrt(len(x))
    return m, m - half, m + half


def emit_plot_data(run_dir, metric="mean_return"):
    """Long-format ``series, step, mean, ci_low, ci_high`` of ``metric`` across replications."""
    run_dir = Path(run_dir)
    rows = []
    for series in sorted(p for p in run_dir.iterdir() if p.is_dir()):
        reps = [read_csv(p / "metrics.csv") for p in sorted(series.iterdir())
                if p.is_dir() and (p / "metrics.csv").exists() and not (p / "error.txt").exists()]
        if not reps:
            continue
        length = min(len(r) for r in reps)
        for i in range(length):
            vals = [_float(r[i][metric]) for r in reps]
            vals = [v for v in vals if not math.isnan(v)]
            if not vals:
                continue
            m, lo, hi = t_interval(vals)
            rows.append((series.name, reps[0][i]["steps"], m, lo, hi))
    with open(run_dir / "plot_data.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(("series", "step", "mean", "ci_low", "ci_high"))
        for s, step, m, lo, hi in rows:
            w.writerow((s, step, repr(m), "" if lo is None else repr(lo), "" if hi is None else repr(hi)))
    return rows


# ---------------------------------------------------------------------------
# entry point
# ---------------------------------------------------------------------------


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(prog="vrer", description=__doc__.split("\n")[0])
    ap.add_argument("verb", choices=("train", "sweep", "probe", "report"))
    ap.add_argument("--config", help="key = value configuration file")
    ap.add_argument("--out", help="output directory (same as --out_dir)")
    args, rest = ap.parse_known_args(argv)
    try:
        if args.out:
            rest = list(rest) + [f"out_dir={args.out}"]
        spec = parse_config(args.config, rest)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return 2
    out = Path(spec.out_dir)
    if args.verb == "train":
        out.mkdir(parents=True, exist_ok=True)
        (out / "config.txt").write_text(spec_to_text(spec))
        return 0 if _run_one(spec.train, out, sys.stderr) else 1
    if args.verb == "sweep":
        rows, ok = run_experiment(spec)
        for r in rows:
            print(f"{r['series']}: return {r['return_mean']:.2f} reuse {r['reuse_mean']:.3f} "
                  f"({r['replications']} ok, {r['failed']} failed)")
        return 0 if ok else 1
    if args.verb == "probe":
        cfg = spec.train
        if cfg.env != "chain":
            cfg = dataclasses.replace(cfg, env="chain")
        out.mkdir(parents=True, exist_ok=True)
        try:
            avg = tabular_convergence_probe(make_mdp(cfg), cfg)
        except Exception as e:
            print(f"probe failed: {e}", file=sys.stderr)
            return 1
        with open(out / "probe.csv", "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(("k", "running_avg_sq_grad_norm"))
            for k, v in enumerate(avg, 1):
                w.writerow((k, repr(float(v))))
        print(f"final running average {avg[-1]:.6g}")
        return 0
    if not out.is_dir():
        print(f"no such run directory: {out}", file=sys.stderr)
        return 1
    summarize(out)
    emit_plot_data(out)
    return 0


if __name__ == "__main__":
    sys.exit(main())
