"""Baseline, cycle-consistent, and alternating generation/refinement training."""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field, replace

import numpy as np

from .losses import LossConfig, LossTerms, baseline_terms, cycle_terms
from .ndtensor import Adam, Tape, Tensor, add, concat_channels
from .nets import ArchConfig, ModelParams, deformation_forward, init_params, refine_forward
from .stn import warp

__all__ = [
    "TrainConfig",
    "StepRecord",
    "TrainHistory",
    "TrainingError",
    "stack_pair",
    "train",
    "train_baseline",
    "train_cycle",
    "train_refine",
    "predict",
    "MODES",
]

log = logging.getLogger(__name__)

MODES = ("baseline", "cycle", "refine")


class TrainingError(RuntimeError):
    def __init__(self, message: str, record: "StepRecord | None" = None):
        super().__init__(message)
        self.record = record


@dataclass(frozen=True)
class TrainConfig:
    mode: str = "baseline"
    lambda_base: float = 1.0
    lambda_refine: float = 4.0
    epochs: int = 10
    phase_epochs: int = 3
    outer_iterations: int = 4
    lr: float = 1e-4
    batch_size: int = 1
    seed: int = 0
    cc_window: int = 9
    cc_epsilon: float = 1e-5
    # ablation switches
    cycle_detach_warped: bool = False
    refine_in_phase_one: bool = False

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {self.mode!r}")
        for name in ("epochs", "phase_epochs", "outer_iterations", "batch_size"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1, got {getattr(self, name)}")
        if self.batch_size != 1:
            raise ValueError("only batch_size 1 is supported")
        if self.lr <= 0:
            raise ValueError(f"lr must be > 0, got {self.lr}")
        if self.lambda_base < 0 or self.lambda_refine < 0:
            raise ValueError("lambda values must be >= 0")

    def loss_config(self, lam: float) -> LossConfig:
        return LossConfig(lam, self.cc_window, self.cc_epsilon)


@dataclass
class StepRecord:
    step: int
    epoch: int
    phase: str
    total: float
    cc: float
    smooth: float


@dataclass
class TrainHistory:
    records: list[StepRecord] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.records)

    def epoch_means(self) -> dict[int, float]:
        out: dict[int, list[float]] = {}
        for r in self.records:
            out.setdefault(r.epoch, []).append(r.total)
        return {k: float(np.mean(v)) for k, v in out.items()}

    def phases(self) -> list[str]:
        """Phase label of each epoch, in order."""
        seen: dict[int, str] = {}
        for r in self.records:
            seen.setdefault(r.epoch, r.phase)
        return [seen[k] for k in sorted(seen)]

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["step", "epoch", "phase", "total", "cc", "smooth"])
            for r in self.records:
                w.writerow([r.step, r.epoch, r.phase, repr(r.total), repr(r.cc), repr(r.smooth)])


def stack_pair(x, y) -> Tensor:
    """``[2, *dims]`` tensor holding the ordered pair (source, target)."""
    x = x.data if isinstance(x, Tensor) else np.asarray(x)
    y = y.data if isinstance(y, Tensor) else np.asarray(y)
    if x.shape != y.shape:
        raise ValueError(f"source dims {x.shape} differ from target dims {y.shape}")
    return Tensor(np.stack([x, y]))


def _epoch_order(seed: int, epoch: int, n: int) -> np.ndarray:
    return np.random.default_rng([seed, epoch]).permutation(n)


class _Run:
    """Shared step bookkeeping for the three training loops."""

    def __init__(self, dataset, cfg: TrainConfig):
        if not dataset:
            raise ValueError("training needs at least one pair")
        dims = dataset[0].x.shape
        for i, p in enumerate(dataset):
            if p.x.shape != dims or p.y.shape != dims:
                raise ValueError(f"pair {i} has dims {p.x.shape}/{p.y.shape}, expected {dims}")
        self.data = [(Tensor(p.x[None]), Tensor(p.y[None]), stack_pair(p.x, p.y)) for p in dataset]
        self.cfg = cfg
        self.history = TrainHistory()
        self.step = 0
        self.epoch = 0

    def epoch_pairs(self):
        for i in _epoch_order(self.cfg.seed, self.epoch, len(self.data)):
            yield self.data[i]

    def log_step(self, phase: str, terms: LossTerms) -> None:
        rec = StepRecord(self.step, self.epoch, phase, terms.total.item(), terms.cc.item(), terms.smooth.item())
        if not all(math.isfinite(v) for v in (rec.total, rec.cc, rec.smooth)):
            raise TrainingError(f"non-finite loss at step {rec.step} (epoch {rec.epoch}, phase {phase}): {rec}", rec)
        self.history.records.append(rec)
        self.step += 1


def _new_params(cfg: TrainConfig, arch: ArchConfig | None, dims, refine: bool) -> ModelParams:
    arch = arch or ArchConfig(ndim=len(dims))
    arch = replace(arch, refine=refine)
    arch.check_dims(dims)
    return init_params(cfg.seed, arch)


def _baseline_epochs(run: _Run, params: ModelParams, opt: Adam, n_epochs: int, lam: float, phase: str) -> None:
    lcfg = run.cfg.loss_config(lam)
    for _ in range(n_epochs):
        for x, y, pair in run.epoch_pairs():
            with Tape() as tape:
                u = deformation_forward(params, pair)
                terms = baseline_terms(x, y, u, lcfg)
            run.log_step(phase, terms)
            tape.backward(terms.total)
            opt.step()
        run.epoch += 1


def train_baseline(dataset, cfg: TrainConfig = TrainConfig(), arch: ArchConfig | None = None,
                   params: ModelParams | None = None, _epochs: int | None = None):
    """One Adam step per pair on ``CC(y, warp(x, u)) + lambda_base * ||Du||``.

    Returns ``(params, history)``. ``_epochs`` overrides the epoch count (tests
    use 0 to exercise the no-training path).
    """
    run = _Run(dataset, cfg)
    params = params or _new_params(cfg, arch, dataset[0].x.shape, refine=False)
    opt = Adam(params.deformation, lr=cfg.lr)
    n = cfg.epochs if _epochs is None else _epochs
    _baseline_epochs(run, params, opt, n, cfg.lambda_base, "I")
    return params, run.history


def train_cycle(dataset, cfg: TrainConfig = TrainConfig(mode="cycle"), arch: ArchConfig | None = None,
                params: ModelParams | None = None):
    """Forward and backward passes through the same deformation unit per step.

    ``u_fwd = D(x, y)``, ``y~ = warp(x, u_fwd)``, ``u_bwd = D(y~, x)``,
    ``x~ = warp(y~, u_bwd)``; one update on the summed objective with
    gradients flowing through both passes.
    """
    run = _Run(dataset, cfg)
    params = params or _new_params(cfg, arch, dataset[0].x.shape, refine=False)
    opt = Adam(params.deformation, lr=cfg.lr)
    lcfg = cfg.loss_config(cfg.lambda_base)
    for _ in range(cfg.epochs):
        for x, y, pair in run.epoch_pairs():
            with Tape() as tape:
                u_fwd = deformation_forward(params, pair)
                y_tilde = warp(x, u_fwd)
                y_in = y_tilde.detach() if cfg.cycle_detach_warped else y_tilde
                u_bwd = deformation_forward(params, concat_channels(y_in, x))
                x_tilde = warp(y_in, u_bwd)
                terms = cycle_terms(x, y, u_fwd, x_tilde, u_bwd, lcfg, y_tilde=y_tilde)
            run.log_step("I", terms)
            tape.backward(terms.total)
            opt.step()
        run.epoch += 1
    return params, run.history


def train_refine(dataset, cfg: TrainConfig = TrainConfig(mode="refine"), arch: ArchConfig | None = None,
                 params: ModelParams | None = None, on_phase_end=None):
    """Alternate phase I (update D at ``lambda_base``) and phase II (update R at ``lambda_refine``).

    Phase II treats ``u = D(x, y)`` as a constant and trains ``u' = u + R(u)``.
    ``on_phase_end(iteration, phase, params)``, if given, runs after every phase.
    """
    run = _Run(dataset, cfg)
    params = params or _new_params(cfg, arch, dataset[0].x.shape, refine=True)
    if params.refine is None:
        raise ValueError("refine training needs parameters with a refinement block")
    opt_d = Adam(params.deformation, lr=cfg.lr)
    opt_r = Adam(params.refine, lr=cfg.lr)
    alpha = params.arch.alpha
    lcfg_1 = cfg.loss_config(cfg.lambda_base)
    lcfg_2 = cfg.loss_config(cfg.lambda_refine)
    for it in range(cfg.outer_iterations):
        if cfg.refine_in_phase_one:
            frozen = {k: v.detach() for k, v in params.refine.items()}
            for _ in range(cfg.phase_epochs):
                for x, y, pair in run.epoch_pairs():
                    with Tape() as tape:
                        u = deformation_forward(params, pair)
                        u = add(u, refine_forward(frozen, u, alpha))
                        terms = baseline_terms(x, y, u, lcfg_1)
                    run.log_step("I", terms)
                    tape.backward(terms.total)
                    opt_d.step()
                run.epoch += 1
        else:
            _baseline_epochs(run, params, opt_d, cfg.phase_epochs, cfg.lambda_base, "I")
        if on_phase_end is not None:
            on_phase_end(it, "I", params)
        for _ in range(cfg.phase_epochs):
            for x, y, pair in run.epoch_pairs():
                u = deformation_forward(params, pair)  # no tape: constant for phase II
                with Tape() as tape:
                    u_ref = add(u, refine_forward(params.refine, u, alpha))
                    terms = baseline_terms(x, y, u_ref, lcfg_2)
                run.log_step("II", terms)
                tape.backward(terms.total)
                opt_r.step()
            run.epoch += 1
        if on_phase_end is not None:
            on_phase_end(it, "II", params)
    return params, run.history


def train(dataset, cfg: TrainConfig, arch: ArchConfig | None = None):
    fn = {"baseline": train_baseline, "cycle": train_cycle, "refine": train_refine}[cfg.mode]
    log.info("training %s on %d pairs", cfg.mode, len(dataset))
    return fn(dataset, cfg, arch)


def predict(params: ModelParams, x, y, mode: str | None = None):
    """``(u, warp(x, u))`` as arrays, with no tape recording.

    With a refinement block (or ``mode == "refine"``) the field is ``u + R(u)``.
    """
    x = np.asarray(x.data if isinstance(x, Tensor) else x)
    y = np.asarray(y.data if isinstance(y, Tensor) else y)
    if mode == "refine" and params.refine is None:
        raise ValueError("refine prediction needs a refinement block")
    u = deformation_forward(params, stack_pair(x, y))
    if params.refine is not None and mode != "baseline" and mode != "cycle":
        u = add(u, refine_forward(params.refine, u, params.arch.alpha))
    return u.data, warp(x, u).data
