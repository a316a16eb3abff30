"""Command-line interface: predict, toy, and bench.

Configuration is a flat ``key = value`` text file; every key has a
mirror flag (``--markov-order`` sets ``markov_order``) and flags win.
Exit codes: 0 success, 2 usage/input error, 3 numerical failure,
4 protocol failure.
"""

from __future__ import annotations

import argparse
import sys
import time
from dataclasses import dataclass, field, fields
from pathlib import Path

import numpy as np

from .baselines import Prediction, fgp_predict, pic_predict_direct
from .blockmat import NumericalError, jitter_log
from .data import Dataset, load_csv, write_csv, write_predictions_csv
from .kernel import Hyperparams
from .lma import LmaConfig, lma_predict_summary
from .parallel import AbortedRunError, ProtocolError, run_parallel_lma
from .partition import partition_inputs, select_support
from .synth import sample_gp_dataset

__all__ = ["RunConfig", "rmse", "cmd_predict", "cmd_toy", "cmd_bench", "main"]

# 1-D continuity-demo settings (lengthscale, noise/signal std, mean).
TOY_LENGTHSCALE = 1.2270
TOY_NOISE_STD = 0.0939
TOY_SIGNAL_STD = 0.6836
TOY_PRIOR_MEAN = 1.1072
TOY_BOUNDARIES = (-2.5, 0.0, 2.5)
TOY_GRID_SPACING = 1e-3
FGP_BENCH_CAP = 2000


@dataclass
class RunConfig:
    """Flat run configuration; flags mirror these keys one-to-one."""

    method: str = "lma"
    train: str = ""
    test: str = ""
    out: str = ""
    markov_order: int = 1
    support_size: int = 16
    blocks: int = 4
    workers: int = 1
    seed: int = 0
    want_cov: bool = False
    trace: bool = False
    signal_var: float = 1.0
    noise_var: float = 0.1
    lengthscales: str = "1.0"
    prior_mean: float = 0.0
    sizes: str = "2000,4000"
    n_test: int = 200

    def hyperparams(self, d: int) -> Hyperparams:
        ls = np.array([float(v) for v in str(self.lengthscales).split(",")])
        if ls.size == 1 and d > 1:
            ls = np.full(d, ls[0])
        return Hyperparams(self.signal_var, self.noise_var, ls, self.prior_mean)

    def lma_config(self) -> LmaConfig:
        return LmaConfig(
            self.markov_order,
            self.support_size,
            self.blocks,
            partition_seed=self.seed,
            support_seed=self.seed + 1,
        )

    def echo(self) -> dict:
        return {f"config.{f.name}": getattr(self, f.name) for f in fields(self)}


def parse_config_file(path: str) -> dict:
    """Flat ``key = value`` file; '#' starts a comment."""
    out = {}
    for lineno, raw in enumerate(Path(path).read_text().splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"{path}: line {lineno}: expected 'key = value'")
        key, val = (s.strip() for s in line.split("=", 1))
        out[key] = val
    return out


def rmse(pred_mean, truth) -> float:
    """Root mean square error between two equal-length vectors."""
    a = np.asarray(pred_mean, dtype=np.float64).ravel()
    b = np.asarray(truth, dtype=np.float64).ravel()
    if a.size != b.size or a.size < 1:
        raise ValueError(f"length mismatch: {a.size} vs {b.size}")
    return float(np.sqrt(np.mean((a - b) ** 2)))


def _write_metrics(path, entries: dict) -> None:
    with open(str(path), "w") as fh:
        for key, val in entries.items():
            fh.write(f"{key} = {val}\n")


def _write_trace(path, stats) -> None:
    with open(str(path), "w") as fh:
        fh.write("seq,kind,src,dst,rows,cols\n")
        for seq, kind, src, dst, rows, cols, *_rest in stats.trace:
            fh.write(f"{seq},{kind},{src},{dst},{rows},{cols}\n")


def _cost_models(cfg: RunConfig, n: int, t: int) -> dict:
    s, b, m = cfg.support_size, max(cfg.markov_order, 1), cfg.blocks
    blk = b * n / m
    return {
        "cost_model_sequential": f"O(n*s^2 + B*n*(B*n/M)^2 + t*n*(s + B*n/M)) ~ {n * s * s + b * n * blk * blk + t * n * (s + blk):.3e}",
        "cost_model_parallel": f"O(s^3 + (B*n/M)^3 + t*(n/M)*(s + B*n/M)) ~ {s**3 + blk**3 + t * (n / m) * (s + blk):.3e}",
    }


def run_method(cfg: RunConfig, train: Dataset, test_X) -> tuple[Prediction, object]:
    """Dispatch on method; returns (prediction, parallel stats or None)."""
    h = cfg.hyperparams(train.d)
    if cfg.method == "fgp":
        return fgp_predict(train, test_X, h, cfg.want_cov), None
    if cfg.method == "pic":
        lcfg = cfg.lma_config()
        part = partition_inputs(train, test_X, lcfg.blocks, lcfg.partition_seed)
        support = select_support(train, lcfg.support_size, lcfg.support_seed)
        return pic_predict_direct(train, test_X, h, support, part, cfg.want_cov), None
    if cfg.method == "lma":
        lcfg = cfg.lma_config()
        if cfg.workers > 1 and lcfg.markov_order >= 1 and lcfg.blocks >= 2:
            return run_parallel_lma(train, test_X, h, lcfg, cfg.workers, cfg.want_cov)
        return lma_predict_summary(train, test_X, h, lcfg, cfg.want_cov), None
    raise ValueError(f"unknown method {cfg.method!r} (expected fgp, pic, or lma)")


def cmd_predict(cfg: RunConfig) -> int:
    train = load_csv(cfg.train)
    if train.y is None:
        raise ValueError(f"{cfg.train}: training file needs a y column")
    test = load_csv(cfg.test)
    jitter_log.reset()
    t0 = time.perf_counter()
    pred, stats = run_method(cfg, train, test.X)
    wall = time.perf_counter() - t0
    write_predictions_csv(cfg.out, test.X, pred.mean, pred.variance)
    metrics: dict = {
        "n_train": train.n,
        "n_test": test.n,
        "wall_time_s": f"{wall:.6f}",
    }
    if test.y is not None:
        metrics["rmse"] = f"{rmse(pred.mean, test.y):.10f}"
    metrics.update({f"jitter.{k}": v for k, v in jitter_log.snapshot().items()})
    if cfg.method == "lma":
        metrics.update(_cost_models(cfg, train.n, test.n))
    if stats is not None:
        metrics["messages.count"] = stats.message_count
        metrics["messages.bytes"] = stats.message_bytes
        for phase, secs in stats.phase_times_s.items():
            metrics[f"wall_time_s.{phase}"] = f"{secs:.6f}"
        if cfg.trace:
            _write_trace(f"{cfg.out}.trace", stats)
    metrics.update(cfg.echo())
    _write_metrics(f"{cfg.out}.metrics", metrics)
    return 0


# ---------------------------------------------------------------------------
# 1-D toy demo
# ---------------------------------------------------------------------------


def toy_dataset(seed: int = 0, per_block: int = 100) -> Dataset:
    """Noisy 1 + cos(x) samples, stratified so each quarter of [-5, 5]
    gets exactly ``per_block`` points and the even split lands on the
    documented boundaries."""
    rng = np.random.default_rng(seed)
    edges = (-5.0,) + TOY_BOUNDARIES + (5.0,)
    xs = np.concatenate(
        [rng.uniform(edges[i], edges[i + 1], per_block) for i in range(4)]
    )
    y = 1.0 + np.cos(xs) + 0.1 * rng.standard_normal(xs.size)
    return Dataset(xs.reshape(-1, 1), y)


def toy_hyperparams() -> Hyperparams:
    return Hyperparams(
        TOY_SIGNAL_STD**2, TOY_NOISE_STD**2, np.array([TOY_LENGTHSCALE]), TOY_PRIOR_MEAN
    )


def jump_statistics(grid: np.ndarray, mean: np.ndarray, part=None, boundaries=TOY_BOUNDARIES):
    """(max jump across block boundaries, max within-block one-step increment).

    With a partition the boundary steps are where consecutive grid
    points change block assignment (the points where a per-block
    predictor can jump); otherwise the stated coordinate boundaries are
    used.
    """
    diffs = np.abs(np.diff(mean))
    straddle = np.zeros(diffs.size, dtype=bool)
    if part is not None:
        assign = np.empty(grid.size, dtype=np.int64)
        for m in range(part.M):
            assign[part.test_blocks[m]] = m
        straddle = assign[1:] != assign[:-1]
    else:
        for b in boundaries:
            hits = np.nonzero((grid[:-1] < b) & (grid[1:] >= b))[0]
            straddle[hits] = True
    jump = float(diffs[straddle].max()) if straddle.any() else 0.0
    interior = float(diffs[~straddle].max()) if (~straddle).any() else 0.0
    return jump, interior


def local_gp_predict(train: Dataset, test_X, h: Hyperparams, part) -> Prediction:
    """Each test block predicted from its own train block alone."""
    test_X = np.asarray(test_X, dtype=np.float64)
    if test_X.ndim == 1:
        test_X = test_X.reshape(-1, 1)
    mean = np.empty(test_X.shape[0])
    var = np.empty(test_X.shape[0])
    for m in range(part.M):
        u_idx = part.test_blocks[m]
        if not len(u_idx):
            continue
        sub = Dataset(train.X[part.train_blocks[m]], train.y[part.train_blocks[m]])
        p = fgp_predict(sub, test_X[u_idx], h)
        mean[u_idx] = p.mean
        var[u_idx] = p.variance
    return Prediction(mean, var)


def cmd_toy(cfg: RunConfig) -> int:
    out_dir = Path(cfg.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    train = toy_dataset(cfg.seed)
    h = toy_hyperparams()
    grid = np.arange(-5.0, 5.0 + TOY_GRID_SPACING / 2, TOY_GRID_SPACING)
    test_X = grid.reshape(-1, 1)
    lcfg = LmaConfig(1, 16, 4, partition_seed=cfg.seed, support_seed=cfg.seed + 1)
    part = partition_inputs(train, test_X, lcfg.blocks, lcfg.partition_seed)

    t0 = time.perf_counter()
    pred_lma = lma_predict_summary(train, test_X, h, lcfg)
    pred_fgp = fgp_predict(train, test_X, h)
    pred_local = local_gp_predict(train, test_X, h, part)
    wall = time.perf_counter() - t0

    write_csv(out_dir / "toy_train.csv", train)
    curves = {"lma": pred_lma, "fgp": pred_fgp, "localgp": pred_local}
    for name, pred in curves.items():
        sd = np.sqrt(pred.variance)
        arr = np.column_stack([grid, pred.mean, pred.mean - 1.96 * sd, pred.mean + 1.96 * sd])
        with open(out_dir / f"toy_curve_{name}.csv", "w") as fh:
            fh.write("x,mean,lo95,hi95\n")
            for row in arr:
                fh.write(",".join(repr(float(v)) for v in row) + "\n")

    metrics: dict = {"wall_time_s": f"{wall:.6f}", "grid_spacing": TOY_GRID_SPACING}
    for name, pred in curves.items():
        jump, interior = jump_statistics(grid, pred.mean, part=part)
        metrics[f"{name}.boundary_jump"] = f"{jump:.8e}"
        metrics[f"{name}.interior_increment"] = f"{interior:.8e}"
    metrics["rmse_lma_vs_fgp"] = f"{rmse(pred_lma.mean, pred_fgp.mean):.8e}"
    metrics["rmse_fgp_vs_truth"] = f"{rmse(pred_fgp.mean, 1.0 + np.cos(grid)):.8e}"
    for m in range(part.M):
        xs = train.X[part.train_blocks[m], 0]
        metrics[f"block{m + 1}.x_range"] = f"[{xs.min():.4f}, {xs.max():.4f}]"
    metrics.update(cfg.echo())
    _write_metrics(out_dir / "toy_metrics.txt", metrics)
    return 0


# ---------------------------------------------------------------------------
# Benchmark
# ---------------------------------------------------------------------------


def cmd_bench(cfg: RunConfig) -> int:
    sizes = [int(s) for s in str(cfg.sizes).split(",") if s.strip()]
    methods = [m.strip() for m in cfg.method.split(",") if m.strip()]
    d = 2
    h = cfg.hyperparams(d)
    rows = []
    for method in sorted(methods):
        for n in sizes:
            if method == "fgp" and n > FGP_BENCH_CAP:
                continue
            train, test = sample_gp_dataset(n, cfg.n_test, d, h, seed=cfg.seed)
            sub = RunConfig(**{**cfg.__dict__, "method": method})
            jitter_log.reset()
            t0 = time.perf_counter()
            pred, stats = run_method(sub, train, test.X)
            wall = time.perf_counter() - t0
            speedup = ""
            if method == "lma" and cfg.workers > 1:
                t1 = time.perf_counter()
                lma_predict_summary(train, test.X, h, cfg.lma_config())
                t_centralized = time.perf_counter() - t1
                speedup = f"{t_centralized / wall:.3f}"
            rows.append(
                {
                    "method": method,
                    "n": n,
                    "M": cfg.blocks if method != "fgp" else "",
                    "B": cfg.markov_order if method == "lma" else "",
                    "S": cfg.support_size if method != "fgp" else "",
                    "rmse": f"{rmse(pred.mean, test.y):.8f}",
                    "time_s": f"{wall:.4f}",
                    "speedup": speedup,
                }
            )
    rows.sort(key=lambda r: (r["method"], r["n"]))
    with open(cfg.out, "w") as fh:
        cols = ["method", "n", "M", "B", "S", "rmse", "time_s", "speedup"]
        fh.write(",".join(cols) + "\n")
        for row in rows:
            fh.write(",".join(str(row[c]) for c in cols) + "\n")
    return 0


# ---------------------------------------------------------------------------
# Argument handling
# ---------------------------------------------------------------------------


def _add_common(p: argparse.ArgumentParser, required_paths):
    p.add_argument("--config", help="flat key = value configuration file")
    p.add_argument("--method", help="fgp | pic | lma (bench accepts a comma list)")
    p.add_argument("--train", required="train" in required_paths, help="training CSV path")
    p.add_argument("--test", required="test" in required_paths, help="test CSV path")
    p.add_argument("--out", required="out" in required_paths, help="output path")
    p.add_argument("--markov-order", type=int, dest="markov_order")
    p.add_argument("--support-size", type=int, dest="support_size")
    p.add_argument("--blocks", type=int)
    p.add_argument("--workers", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--want-cov", action="store_true", dest="want_cov", default=None)
    p.add_argument("--trace", action="store_true", default=None)
    p.add_argument("--signal-var", type=float, dest="signal_var")
    p.add_argument("--noise-var", type=float, dest="noise_var")
    p.add_argument("--lengthscales")
    p.add_argument("--prior-mean", type=float, dest="prior_mean")
    p.add_argument("--sizes")
    p.add_argument("--n-test", type=int, dest="n_test")


def build_config(args: argparse.Namespace) -> RunConfig:
    cfg = RunConfig()
    if args.config:
        file_vals = parse_config_file(args.config)
        for key, val in file_vals.items():
            if not hasattr(cfg, key):
                raise ValueError(f"unknown config key {key!r}")
            cur = getattr(cfg, key)
            if isinstance(cur, bool):
                setattr(cfg, key, val.lower() in ("1", "true", "yes"))
            elif isinstance(cur, int):
                setattr(cfg, key, int(val))
            elif isinstance(cur, float):
                setattr(cfg, key, float(val))
            else:
                setattr(cfg, key, val)
    for f in fields(RunConfig):
        val = getattr(args, f.name, None)
        if val is not None:
            setattr(cfg, f.name, val)
    return cfg


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="lmagp",
        description="GP regression with a low-rank plus block-Markov residual approximation",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    _add_common(sub.add_parser("predict", help="predict test outputs"), ("train", "test", "out"))
    _add_common(sub.add_parser("toy", help="1-D continuity demo"), ("out",))
    _add_common(sub.add_parser("bench", help="synthetic benchmark table"), ("out",))
    args = parser.parse_args(argv)
    try:
        cfg = build_config(args)
        if args.command == "predict":
            return cmd_predict(cfg)
        if args.command == "toy":
            return cmd_toy(cfg)
        return cmd_bench(cfg)
    except (ProtocolError, AbortedRunError) as exc:
        print(f"protocol failure: {exc}", file=sys.stderr)
        return 4
    except NumericalError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return 3
    except (ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
