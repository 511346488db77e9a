"""Multilevel training engine.

The smoother is plain SGD with momentum and optional weight decay.  A
V-cycle pre-smooths a level, restricts the iterate and momentum to the
next-coarser network, computes a stochastic tau correction that tilts the
coarse objective toward first-order consistency with the fine one, solves
(or recurses on) the tilted coarse problem, applies damped coarse-grid
corrections to parameters and momentum, and post-smooths.  Minibatches come
from one shared shuffled cyclic stream; each restriction draws the next
``m`` batches for the tau correction and the coarse smoothing reuses those
same batches cyclically.
"""

import itertools
import math
from dataclasses import dataclass, replace

import numpy as np

from .nets import Minibatch, Network, ParamVector, backward, flatten, unflatten
from .transfer import (
    TransferLevel,
    coarse_grid_correction,
    coarsen_network,
    refresh_weights,
    restrict_gradient,
    restrict_network,
    restrict_params,
)


class DivergenceError(RuntimeError):
    """Non-finite state detected during training."""

    def __init__(self, message: str, level: int | None = None, cycle: int | None = None):
        super().__init__(message)
        self.level = level
        self.cycle = cycle


@dataclass(frozen=True)
class SmootherConfig:
    """SGD-with-momentum settings for one smoothing block.

    ``steps_per_smooth`` may be 0 to disable movement at a level (useful
    for degenerate-cycle checks).
    """

    learning_rate: float
    momentum_coeff: float = 0.9
    weight_decay: float = 0.0
    steps_per_smooth: int = 1

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if not 0.0 <= self.momentum_coeff < 1.0:
            raise ValueError("momentum_coeff must lie in [0, 1)")
        if self.weight_decay < 0:
            raise ValueError("weight_decay must be nonnegative")
        if self.steps_per_smooth < 0:
            raise ValueError("steps_per_smooth must be nonnegative")


@dataclass(frozen=True)
class StabilityConfig:
    """Damping knobs for deeper hierarchies.

    The learning rate is divided by ``eta`` per level for the first
    ``eta_depth`` levels and then held; ``alpha_p`` and ``alpha_m`` damp the
    parameter and momentum coarse-grid corrections; ``gamma`` scales the tau
    tilt of the coarse objective.
    """

    eta: float = math.sqrt(2.0)
    eta_depth: int = 3
    alpha_p: float = 1.0
    alpha_m: float = 0.2
    gamma: float = 0.125

    def __post_init__(self):
        if self.eta < 1.0:
            raise ValueError("eta must be >= 1")
        if self.eta_depth < 0:
            raise ValueError("eta_depth must be nonnegative")
        for name in ("alpha_p", "alpha_m"):
            v = getattr(self, name)
            if not 0.0 < v <= 1.0:
                raise ValueError(f"{name} must lie in (0, 1]")
        if not 0.0 <= self.gamma <= 1.0:
            raise ValueError("gamma must lie in [0, 1]")


@dataclass
class TauCorrection:
    """Coarse-shaped tilt vector for the auxiliary objective."""

    vec: ParamVector


class MinibatchScheduler:
    """Shuffled cyclic minibatch stream over a fixed sample set.

    One shared cursor serves both smoothing steps and tau-group draws; the
    permutation is redrawn whenever an epoch is exhausted.  Iterating the
    scheduler yields minibatches forever.
    """

    def __init__(self, inputs, targets, batch_size: int, rng: np.random.Generator):
        self.inputs = np.asarray(inputs, dtype=np.float64)
        self.targets = np.asarray(targets, dtype=np.float64)
        n = self.inputs.shape[0]
        if self.targets.shape[0] != n:
            raise ValueError("inputs and targets disagree on sample count")
        if batch_size < 1:
            raise ValueError("batch_size must be positive")
        if batch_size > n:
            raise ValueError(f"batch_size {batch_size} exceeds dataset size {n}")
        self.batch_size = batch_size
        self.n_samples = n
        self.batches_per_epoch = -(-n // batch_size)
        self.rng = rng
        self._order = None
        self._pos = 0

    def __iter__(self):
        return self

    def __next__(self) -> Minibatch:
        return self.next_batch()

    def next_batch(self) -> Minibatch:
        if self._order is None or self._pos >= self.batches_per_epoch:
            self._order = self.rng.permutation(self.n_samples)
            self._pos = 0
        lo = self._pos * self.batch_size
        hi = min(lo + self.batch_size, self.n_samples)
        idx = self._order[lo:hi]
        self._pos += 1
        return Minibatch(self.inputs[idx], self.targets[idx])

    def next_tau_group(self, m: int) -> list[Minibatch]:
        """Draw the next m minibatches in shuffled cyclic order."""
        if m < 1:
            raise ValueError("tau group size must be positive")
        return [self.next_batch() for _ in range(m)]


def next_tau_group(scheduler: MinibatchScheduler, m: int) -> list[Minibatch]:
    return scheduler.next_tau_group(m)


def sgd_smooth(
    net: Network,
    momentum: ParamVector,
    cfg: SmootherConfig,
    batches,
    tau: TauCorrection | None = None,
    gamma: float = 0.0,
):
    """Run ``steps_per_smooth`` SGD-with-momentum steps on the network.

    Per step: grad = batch gradient + weight_decay * x - gamma * tau (the
    tau tilt is linear, so its gradient contribution is constant), then
    momentum = momentum_coeff * momentum + grad and x = x - lr * momentum.
    The network and momentum are updated in place.
    """
    batch_iter = iter(batches)
    x = flatten(net)
    for _ in range(cfg.steps_per_smooth):
        batch = next(batch_iter)
        grad = backward(net, batch).data
        if cfg.weight_decay:
            grad += cfg.weight_decay * x.data
        if tau is not None and gamma != 0.0:
            grad -= gamma * tau.vec.data
        momentum.data *= cfg.momentum_coeff
        momentum.data += grad
        x.data -= cfg.learning_rate * momentum.data
        unflatten(net, x)
    return net, momentum


def compute_tau(
    fine: Network,
    coarse: Network,
    t: TransferLevel,
    tau_batches: list[Minibatch],
    n_total_minibatches: int,
) -> TauCorrection:
    """Stochastic tau correction between a network and its coarse version.

    Gradients are accumulated over the given batches on both levels; the
    coarse accumulation minus the restricted fine accumulation is scaled by
    N/m, with N the number of minibatches per epoch and m the group size.
    The caller must have installed the restricted iterate in ``coarse``.
    """
    if not tau_batches:
        raise ValueError("tau correction needs at least one minibatch")
    fine_acc = None
    coarse_acc = None
    for batch in tau_batches:
        gf = backward(fine, batch)
        gc = backward(coarse, batch)
        if fine_acc is None:
            fine_acc, coarse_acc = gf, gc
        else:
            fine_acc.data += gf.data
            coarse_acc.data += gc.data
    restricted = restrict_gradient(t, fine_acc)
    scale = n_total_minibatches / len(tau_batches)
    vec = ParamVector(scale * (coarse_acc.data - restricted.data), coarse_acc.segments)
    if not np.isfinite(vec.data).all():
        raise DivergenceError("non-finite tau correction")
    return TauCorrection(vec=vec)


def work_units(level_param_count: int, fine_param_count: int) -> float:
    """Cost of one minibatch gradient evaluation at a level, in fine units."""
    return level_param_count / fine_param_count


class WorkCounter:
    """Monotone accumulator of gradient-evaluation work."""

    def __init__(self):
        self.total = 0.0

    def add(self, units: float) -> float:
        if units < 0:
            raise ValueError("work units are nonnegative")
        self.total += units
        return self.total


@dataclass
class LevelState:
    """Mutable per-level training state."""

    net: Network
    momentum: ParamVector
    transfer: TransferLevel | None = None  # to the next-coarser level
    tau: TauCorrection | None = None


class Hierarchy:
    """Stack of progressively narrower networks plus cycle bookkeeping."""

    def __init__(
        self,
        levels: list[LevelState],
        depth: int,
        rematch_period: int = 10,
        tau_batches: int = 2,
        theta: float = 0.1,
        weighted: bool = True,
        match_rng: np.random.Generator | None = None,
    ):
        if depth < 1:
            raise ValueError("depth must be >= 1")
        if rematch_period < 1:
            raise ValueError("rematch_period must be positive")
        if tau_batches < 1:
            raise ValueError("tau_batches must be positive")
        self.levels = levels
        self.depth = depth
        self.rematch_period = rematch_period
        self.tau_batches = tau_batches
        self.theta = theta
        self.weighted = weighted
        self.match_rng = match_rng
        self.cycles_run = 0
        self.work = WorkCounter()

    @classmethod
    def build(
        cls,
        net: Network,
        depth: int,
        rematch_period: int = 10,
        tau_batches: int = 2,
        theta: float = 0.1,
        weighted: bool = True,
        match_rng: np.random.Generator | None = None,
    ) -> "Hierarchy":
        levels = [LevelState(net=net, momentum=flatten(net).zeros_like())]
        h = cls(
            levels,
            depth,
            rematch_period=rematch_period,
            tau_batches=tau_batches,
            theta=theta,
            weighted=weighted,
            match_rng=match_rng,
        )
        h.rematch()
        return h

    def rematch(self) -> None:
        """Recompute matchings and rebuild the coarse nets, fine to coarse."""
        for lvl in range(self.depth - 1):
            state = self.levels[lvl]
            t = coarsen_network(
                state.net, theta=self.theta, weighted=self.weighted, order_rng=self.match_rng
            )
            state.transfer = t
            coarse = restrict_network(state.net, t)
            coarse_state = LevelState(net=coarse, momentum=flatten(coarse).zeros_like())
            if lvl + 1 < len(self.levels):
                self.levels[lvl + 1] = coarse_state
            else:
                self.levels.append(coarse_state)

    def param_ratio(self, level: int) -> float:
        return work_units(self.levels[level].net.param_count(), self.levels[0].net.param_count())


def _cfg_for(cfgs, level: int) -> SmootherConfig:
    if isinstance(cfgs, SmootherConfig):
        return cfgs
    return cfgs[min(level, len(cfgs) - 1)]


def _effective_cfg(cfgs, level: int, stab: StabilityConfig) -> SmootherConfig:
    cfg = _cfg_for(cfgs, level)
    scale = stab.eta ** min(level, stab.eta_depth)
    if scale == 1.0:
        return cfg
    return replace(cfg, learning_rate=cfg.learning_rate / scale)


def _check_finite(h: Hierarchy, level: int, stage: str) -> None:
    state = h.levels[level]
    for arr, name in ((flatten(state.net).data, "parameters"), (state.momentum.data, "momentum")):
        if not np.isfinite(arr).all():
            raise DivergenceError(
                f"non-finite {name} at level {level} after {stage} "
                f"(cycle {h.cycles_run})",
                level=level,
                cycle=h.cycles_run,
            )


def _smooth_level(h: Hierarchy, level: int, cfg: SmootherConfig, batches, gamma: float) -> None:
    if cfg.steps_per_smooth == 0:
        return
    state = h.levels[level]
    sgd_smooth(state.net, state.momentum, cfg, batches, tau=state.tau, gamma=gamma)
    h.work.add(cfg.steps_per_smooth * h.param_ratio(level))
    _check_finite(h, level, "smoothing")


def v_cycle(
    h: Hierarchy,
    level: int,
    cfgs,
    stab: StabilityConfig,
    scheduler: MinibatchScheduler,
    _batches=None,
) -> Hierarchy:
    """One V-cycle starting at ``level`` (call with level=0).

    At the entry level the matchings are rebuilt every ``rematch_period``
    cycles and smoothing consumes the shared batch stream; deeper levels
    smooth on the tau-group batches handed down by their parent.  The
    coarsest level degenerates to a single smoothing block, so depth 1 is
    plain SGD.
    """
    state = h.levels[level]
    if level == 0:
        if h.cycles_run > 0 and h.cycles_run % h.rematch_period == 0:
            h.rematch()
        _batches = iter(scheduler)
    cfg = _effective_cfg(cfgs, level, stab)

    _smooth_level(h, level, cfg, _batches, stab.gamma)

    if level < h.depth - 1:
        if h.weighted:
            state.transfer = refresh_weights(state.transfer, state.net, weighted=True)
        t = state.transfer
        coarse = h.levels[level + 1]
        x_c = restrict_params(t, flatten(state.net))
        unflatten(coarse.net, x_c)
        coarse.momentum = restrict_params(t, state.momentum)

        group = scheduler.next_tau_group(h.tau_batches)
        try:
            coarse.tau = compute_tau(
                state.net, coarse.net, t, group, scheduler.batches_per_epoch
            )
        except DivergenceError as e:
            raise DivergenceError(
                f"{e} during restriction to level {level + 1} (cycle {h.cycles_run})",
                level=level + 1,
                cycle=h.cycles_run,
            ) from e
        h.work.add(h.tau_batches * (h.param_ratio(level) + h.param_ratio(level + 1)))

        v_cycle(h, level + 1, cfgs, stab, scheduler, _batches=itertools.cycle(group))

        x_new = coarse_grid_correction(
            flatten(state.net), flatten(coarse.net), t, alpha=stab.alpha_p
        )
        unflatten(state.net, x_new)
        state.momentum = coarse_grid_correction(
            state.momentum, coarse.momentum, t, alpha=stab.alpha_m
        )
        _check_finite(h, level, "coarse-grid correction")

        _smooth_level(h, level, cfg, _batches, stab.gamma)

    if level == 0:
        h.cycles_run += 1
    return h
