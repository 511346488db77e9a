"""Experiment harness.

Parses flat key=value experiment configs, runs seeded one-level SGD or
multilevel V-cycle training to a work-unit budget, logs train/validation
losses for the fine network and the first auxiliary (first-coarsened)
network, and emits metrics CSVs plus a best-loss summary table.  One work
unit is the cost of one fine-level minibatch gradient evaluation; coarser
evaluations are scaled by their parameter-count ratio.
"""

import csv
import math
import os
import re
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, fields, replace

import numpy as np

from .checkpoints import load_network, save_network
from .conv import ConvLayer
from .nets import DenseLayer, Minibatch, Network, forward_batch, loss, uniform_init
from .poisson import RegressionDataset, read_dataset
from .training import (
    DivergenceError,
    Hierarchy,
    MinibatchScheduler,
    SmootherConfig,
    StabilityConfig,
    v_cycle,
)
from .transfer import coarsen_network

CSV_FIELDS = ["work_units", "cycle", "level", "train_l2", "train_linf", "val_l2", "val_linf", "wall_s"]


class ConfigError(ValueError):
    """Malformed experiment configuration."""


@dataclass(frozen=True)
class ExperimentConfig:
    """All knobs for one experiment; see README for the key reference."""

    dataset: str = ""
    arch: str = "dense:128,dense:128"
    activation: str = "relu"
    output_activation: bool = False
    depth: int = 1
    learning_rate: float = 0.01
    momentum: float = 0.9
    weight_decay: float = 0.0
    steps_per_smooth: int = 4
    batch_size: int = 200
    tau_batches: int = 2
    rematch_period: int = 50
    theta: float = 0.1
    weighted: bool = True
    match_order: str = "natural"
    eta: float = math.sqrt(2.0)
    eta_depth: int = 3
    alpha_p: float = 1.0
    alpha_m: float = 0.2
    gamma: float = 0.125
    max_work_units: float = 5000.0
    eval_every: float = 25.0
    seeds: tuple = (0,)
    smoothing_window: int = 33
    out_dir: str = ""
    checkpoint_every: int = 0
    workers: int = 1

    def __post_init__(self):
        if self.depth < 1:
            raise ConfigError("depth must be >= 1")
        if self.smoothing_window < 1 or self.smoothing_window % 2 == 0:
            raise ConfigError("smoothing_window must be odd and positive")
        if self.eval_every <= 0:
            raise ConfigError("eval_every must be positive")
        if self.max_work_units <= 0:
            raise ConfigError("max_work_units must be positive")
        if self.match_order not in ("natural", "random"):
            raise ConfigError("match_order must be 'natural' or 'random'")
        if not self.seeds:
            raise ConfigError("at least one seed is required")


@dataclass
class MetricRecord:
    """One evaluation point; level 0 is the fine network, k the k-th auxiliary."""

    work_units: float
    cycle: int
    level: int
    train_l2: float
    train_linf: float
    val_l2: float
    val_linf: float
    wall_s: float


@dataclass
class RunResult:
    """Metrics and best losses for one (config, seed) training run."""

    seed: int
    depth: int
    records: list
    best: dict  # level tag -> {"train_l2": ..., "train_linf": ..., "val_l2": ..., "val_linf": ...}
    failed: bool = False
    reason: str = ""

    def label(self, level: int) -> str:
        return str(self.depth) if level == 0 else f"{self.depth}aux"


_BOOL_VALUES = {"true": True, "1": True, "yes": True, "false": False, "0": False, "no": False}


def _coerce(name: str, kind, text: str):
    if kind is bool:
        v = _BOOL_VALUES.get(text.strip().lower())
        if v is None:
            raise ConfigError(f"{name}: expected a boolean, got {text!r}")
        return v
    if kind is int:
        return int(text)
    if kind is float:
        return float(text)
    if kind is tuple:
        return tuple(int(tok) for tok in text.replace(",", " ").split())
    return text.strip()


def parse_config(path, overrides: dict | None = None) -> ExperimentConfig:
    """Read a flat key=value config file ('#' starts a comment)."""
    values = {}
    with open(path) as fh:
        for lineno, raw in enumerate(fh, 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"{path}:{lineno}: expected key = value, got {raw.strip()!r}")
            key, text = (part.strip() for part in line.split("=", 1))
            values[key] = text
    if overrides:
        values.update({k: str(v) for k, v in overrides.items()})
    field_types = {f.name: f.type for f in fields(ExperimentConfig)}
    type_map = {"str": str, "int": int, "float": float, "bool": bool, "tuple": tuple}
    kwargs = {}
    for key, text in values.items():
        if key not in field_types:
            raise ConfigError(f"unknown config key {key!r}")
        kind = field_types[key]
        if isinstance(kind, str):
            kind = type_map[kind]
        kwargs[key] = _coerce(key, kind, text)
    return ExperimentConfig(**kwargs)


def config_text(cfg: ExperimentConfig) -> str:
    lines = []
    for f in fields(ExperimentConfig):
        v = getattr(cfg, f.name)
        if isinstance(v, tuple):
            v = ",".join(str(x) for x in v)
        lines.append(f"{f.name} = {v}")
    return "\n".join(lines) + "\n"


_CONV_TOKEN = re.compile(r"^conv:(\d+)k(\d+)s(\d+)p(\d+)$")
_DENSE_TOKEN = re.compile(r"^dense:(\d+)$")


def build_network(
    arch: str,
    input_shape,
    output_size: int,
    activation: str = "relu",
    output_activation: bool = False,
    rng: np.random.Generator | None = None,
) -> Network:
    """Build a network from an architecture string.

    Tokens are comma separated: ``dense:<width>`` for a hidden dense layer,
    ``conv:<channels>k<kernel>s<stride>p<pad>`` for a (square) conv layer.
    Conv tokens must come first.  A dense output layer onto ``output_size``
    is appended automatically.
    """
    layers = []
    if isinstance(input_shape, tuple):
        c, h, w = input_shape
        desc = ("chan", c, h, w)
    else:
        desc = ("flat", int(input_shape))
    seen_dense = False
    for token in (t.strip() for t in arch.split(",") if t.strip()):
        m = _CONV_TOKEN.match(token)
        if m:
            if seen_dense or desc[0] != "chan":
                raise ConfigError(f"conv token {token!r} must precede dense layers "
                                  "and needs a channel input")
            out_c, k, s, p = (int(g) for g in m.groups())
            layers.append(
                ConvLayer(np.zeros((out_c, desc[1], k, k)), np.zeros(out_c),
                          stride=(s, s), padding=(p, p))
            )
            oh = (desc[2] + 2 * p - k) // s + 1
            ow = (desc[3] + 2 * p - k) // s + 1
            desc = ("chan", out_c, oh, ow)
            continue
        m = _DENSE_TOKEN.match(token)
        if m:
            seen_dense = True
            width = int(m.group(1))
            n_in = desc[1] if desc[0] == "flat" else desc[1] * desc[2] * desc[3]
            layers.append(DenseLayer(np.zeros((width, n_in)), np.zeros(width)))
            desc = ("flat", width)
            continue
        raise ConfigError(f"unrecognized architecture token {token!r}")
    n_in = desc[1] if desc[0] == "flat" else desc[1] * desc[2] * desc[3]
    layers.append(DenseLayer(np.zeros((output_size, n_in)), np.zeros(output_size)))
    net = Network(
        layers,
        activation=activation,
        output_activation=output_activation,
        input_shape=input_shape if isinstance(input_shape, tuple) else int(input_shape),
    )
    if rng is not None:
        uniform_init(net, rng)
    return net


def dataset_splits(ds: RegressionDataset):
    """(train inputs, train targets, val inputs, val targets) as flat arrays."""
    xi, yo = ds.flat_inputs(), ds.flat_outputs()
    return xi[ds.train_idx], yo[ds.train_idx], xi[ds.val_idx], yo[ds.val_idx]


def _network_input_shape(cfg: ExperimentConfig, ds: RegressionDataset):
    if cfg.arch.lstrip().startswith("conv"):
        return (ds.channels, ds.n, ds.n)
    return ds.channels * ds.n * ds.n


def run_seed(cfg: ExperimentConfig, seed: int, ds: RegressionDataset) -> RunResult:
    """Train one seed to the work budget, logging metrics per eval interval."""
    xtr, ytr, xva, yva = dataset_splits(ds)
    if cfg.batch_size > xtr.shape[0]:
        raise ConfigError(
            f"batch_size {cfg.batch_size} exceeds training split size {xtr.shape[0]}"
        )
    train_mb = Minibatch(xtr, ytr)
    val_mb = Minibatch(xva, yva)
    net = build_network(
        cfg.arch,
        _network_input_shape(cfg, ds),
        ytr.shape[1],
        activation=cfg.activation,
        output_activation=cfg.output_activation,
        rng=np.random.default_rng([seed, 202]),
    )
    scheduler = MinibatchScheduler(
        xtr, ytr, cfg.batch_size, np.random.default_rng([seed, 101])
    )
    smoother = SmootherConfig(
        learning_rate=cfg.learning_rate,
        momentum_coeff=cfg.momentum,
        weight_decay=cfg.weight_decay,
        steps_per_smooth=cfg.steps_per_smooth,
    )
    stab = StabilityConfig(
        eta=cfg.eta,
        eta_depth=cfg.eta_depth,
        alpha_p=cfg.alpha_p,
        alpha_m=cfg.alpha_m,
        gamma=cfg.gamma,
    )
    match_rng = np.random.default_rng([seed, 303]) if cfg.match_order == "random" else None
    hierarchy = Hierarchy.build(
        net,
        cfg.depth,
        rematch_period=cfg.rematch_period,
        tau_batches=cfg.tau_batches,
        theta=cfg.theta,
        weighted=cfg.weighted,
        match_rng=match_rng,
    )

    records = []
    t0 = time.perf_counter()
    eval_levels = (0, 1) if cfg.depth > 1 else (0,)

    def evaluate(cycle: int) -> None:
        wall = time.perf_counter() - t0
        for level in eval_levels:
            lnet = hierarchy.levels[level].net
            lt = loss(lnet, train_mb)
            lv = loss(lnet, val_mb)
            if not all(map(math.isfinite, (lt.l2, lt.linf, lv.l2, lv.linf))):
                raise DivergenceError(
                    f"non-finite loss at level {level} (cycle {cycle})",
                    level=level,
                    cycle=cycle,
                )
            records.append(
                MetricRecord(hierarchy.work.total, cycle, level,
                             lt.l2, lt.linf, lv.l2, lv.linf, wall)
            )

    def checkpoint() -> None:
        if not cfg.out_dir:
            return
        os.makedirs(cfg.out_dir, exist_ok=True)
        for level, state in enumerate(hierarchy.levels):
            save_network(
                state.net, os.path.join(cfg.out_dir, f"ckpt_s{seed}_L{level}.mlfasnet")
            )

    failed = False
    reason = ""
    try:
        evaluate(0)
        next_eval = cfg.eval_every
        while hierarchy.work.total < cfg.max_work_units:
            v_cycle(hierarchy, 0, smoother, stab, scheduler)
            if hierarchy.work.total >= next_eval:
                evaluate(hierarchy.cycles_run)
                next_eval = (hierarchy.work.total // cfg.eval_every + 1) * cfg.eval_every
            if cfg.checkpoint_every and hierarchy.cycles_run % cfg.checkpoint_every == 0:
                checkpoint()
        evaluate(hierarchy.cycles_run)
        checkpoint()
    except DivergenceError as e:
        failed = True
        reason = str(e)

    best = {}
    for level in eval_levels:
        pts = [r for r in records if r.level == level]
        if pts:
            best[level] = {
                "train_l2": min(r.train_l2 for r in pts),
                "train_linf": min(r.train_linf for r in pts),
                "val_l2": min(r.val_l2 for r in pts),
                "val_linf": min(r.val_linf for r in pts),
            }
    return RunResult(seed=seed, depth=cfg.depth, records=records, best=best,
                     failed=failed, reason=reason)


def _run_seed_from_path(cfg: ExperimentConfig, seed: int) -> RunResult:
    try:
        from threadpoolctl import threadpool_limits

        with threadpool_limits(limits=1):
            return run_seed(cfg, seed, read_dataset(cfg.dataset))
    except ImportError:
        return run_seed(cfg, seed, read_dataset(cfg.dataset))


def run_experiment(cfg: ExperimentConfig, ds: RegressionDataset | None = None) -> list[RunResult]:
    """Run every seed of a config; failed runs are kept and marked.

    Seeds run as independent processes when ``workers`` > 1 (the dataset is
    then re-read per worker, so ``cfg.dataset`` must be a path).
    """
    if ds is None:
        ds = read_dataset(cfg.dataset)
    if cfg.workers > 1 and len(cfg.seeds) > 1:
        if not cfg.dataset:
            raise ConfigError("parallel runs need a dataset path")
        with ProcessPoolExecutor(max_workers=cfg.workers) as pool:
            futures = [pool.submit(_run_seed_from_path, cfg, seed) for seed in cfg.seeds]
            results = [f.result() for f in futures]
    else:
        results = [run_seed(cfg, seed, ds) for seed in cfg.seeds]
    if cfg.out_dir:
        os.makedirs(cfg.out_dir, exist_ok=True)
        for run in results:
            if run.records:
                emit_csv(run.records, os.path.join(cfg.out_dir, f"metrics_s{run.seed}.csv"))
        emit_summary_table(results, os.path.join(cfg.out_dir, "summary.csv"))
        with open(os.path.join(cfg.out_dir, "run_metadata.txt"), "w") as fh:
            fh.write(config_text(cfg))
            fh.write(
                "# work unit: one fine-level minibatch gradient evaluation;"
                " coarser levels scaled by parameter-count ratio\n"
            )
    return results


def smooth_series(values, window: int) -> np.ndarray:
    """Centered moving arithmetic mean; edges use truncated windows."""
    v = np.asarray(values, dtype=np.float64)
    if window < 1 or window % 2 == 0:
        raise ValueError(f"window must be odd and positive, got {window}")
    if window > v.size:
        raise ValueError(f"window {window} exceeds series length {v.size}")
    half = window // 2
    csum = np.concatenate([[0.0], np.cumsum(v)])
    i = np.arange(v.size)
    lo = np.maximum(0, i - half)
    hi = np.minimum(v.size, i + half + 1)
    return (csum[hi] - csum[lo]) / (hi - lo)


def emit_csv(records: list, path) -> None:
    """Write metric records as CSV; refuses an empty record list."""
    if not records:
        raise ValueError("no records to emit")
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(CSV_FIELDS)
        for r in records:
            writer.writerow(
                [r.work_units, r.cycle, r.level, r.train_l2, r.train_linf,
                 r.val_l2, r.val_linf, r.wall_s]
            )


def load_metrics_csv(path) -> list[MetricRecord]:
    out = []
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        for row in reader:
            out.append(
                MetricRecord(
                    work_units=float(row["work_units"]),
                    cycle=int(row["cycle"]),
                    level=int(row["level"]),
                    train_l2=float(row["train_l2"]),
                    train_linf=float(row["train_linf"]),
                    val_l2=float(row["val_l2"]),
                    val_linf=float(row["val_linf"]),
                    wall_s=float(row["wall_s"]),
                )
            )
    return out


def emit_summary_table(runs: list, path) -> list[dict]:
    """Best-loss summary keyed by (level tag, seed); also written as CSV."""
    if not runs:
        raise ValueError("no runs to summarize")
    rows = []
    for run in runs:
        for level, best in sorted(run.best.items()):
            rows.append(
                {
                    "level": run.label(level),
                    "seed": run.seed,
                    "status": "failed" if run.failed else "ok",
                    "best_train_l2": best["train_l2"],
                    "best_train_linf": best["train_linf"],
                    "best_val_l2": best["val_l2"],
                    "best_val_linf": best["val_linf"],
                }
            )
        if not run.best:
            rows.append(
                {
                    "level": run.label(0),
                    "seed": run.seed,
                    "status": "failed",
                    "best_train_l2": math.nan,
                    "best_train_linf": math.nan,
                    "best_val_l2": math.nan,
                    "best_val_linf": math.nan,
                }
            )
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(rows[0].keys()))
        writer.writeheader()
        writer.writerows(rows)
    return rows


def _layer_desc(layer) -> str:
    if isinstance(layer, ConvLayer):
        kh, kw = layer.kernel_size
        return (
            f"conv {layer.in_channels}->{layer.out_channels} "
            f"k{kh}x{kw} s{layer.stride} p{layer.padding}"
        )
    return f"dense {layer.n_in}->{layer.n_out}"


def inspect_hierarchy(paths, theta: float = 0.1) -> str:
    """Text report over a stack of per-level checkpoints (fine first).

    Reports widths, parameter counts, per-layer coarsening ratios against
    the next checkpoint, and the aggregate-size histogram a matching of the
    level's current parameters produces.
    """
    nets = [load_network(p) for p in paths]
    lines = []
    for lvl, (path, net) in enumerate(zip(paths, nets)):
        lines.append(f"level {lvl}: {path}")
        for k, layer in enumerate(net.layers):
            lines.append(f"  layer {k}: {_layer_desc(layer)}")
        lines.append(f"  interface units: {net.unit_counts()}")
        lines.append(f"  parameters: {net.param_count()}")
        if lvl > 0:
            ratio = net.param_count() / nets[0].param_count()
            lines.append(f"  parameter ratio vs level 0: {ratio:.4f}")
        if lvl + 1 < len(nets):
            coarse = nets[lvl + 1]
            t = coarsen_network(net, theta=theta)
            fine_units = net.unit_counts()
            next_units = coarse.unit_counts()
            for k in range(1, len(fine_units) - 1):
                matching = t.interfaces[k].matching
                sizes = matching.aggregate_sizes()
                hist = {int(s): int(c) for s, c in
                        zip(*np.unique(sizes, return_counts=True))}
                lines.append(
                    f"  interface {k}: units {fine_units[k]} -> {next_units[k]} "
                    f"(ratio {next_units[k] / fine_units[k]:.3f}), "
                    f"matching now gives {matching.num_aggregates} aggregates, "
                    f"size histogram {hist}"
                )
    return "\n".join(lines)
