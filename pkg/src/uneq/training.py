"""Data-free adversarial training of two generators against one discriminator."""
from __future__ import annotations

import dataclasses
import enum
import hashlib
import json
import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

from . import tensor as T
from .losses import (
    DIVERSITY_MEASURES,
    DiscriminatorMode,
    GeneratorObjective,
    LossArrangement,
    diametric_pair,
    discriminator_classifier_loss,
    diversity_competition_loss,
    embedding_proximity_loss,
    swap_classification_loss,
)
from .networks import (
    GrowthState,
    NetworkConfig,
    as_tensors,
    discriminator_forward,
    generate,
    init_params,
)
from .tensor import NonFiniteError, Tape, Tensor

logger = logging.getLogger(__name__)

NETWORKS = ("g1", "g2", "d")


class Status(str, enum.Enum):
    HEALTHY = "HEALTHY"
    EXPLODING = "EXPLODING"
    STATIC = "STATIC"


@dataclass(frozen=True)
class TrainConfig:
    seed: int = 0
    batch_size: int = 8
    steps: int = 1000
    lr_g: float = 1e-3
    lr_d: float = 1e-3
    beta1: float = 0.0
    beta2: float = 0.99
    eps: float = 1e-8
    arrangement: LossArrangement = field(default_factory=LossArrangement)
    network: NetworkConfig = field(default_factory=NetworkConfig)
    max_stage: int = 3
    steps_per_stage: int = 1000
    fade_fraction: float = 0.5
    diag_window: int = 50
    explode_threshold: float = 1e3
    stasis_threshold: float = 1e-5
    checkpoint_every: int = 100

    def __post_init__(self):
        if self.batch_size < 2:
            raise ValueError(f"batch_size must be >= 2 (diversity needs pairs), got {self.batch_size}")
        if self.steps < 0:
            raise ValueError(f"steps must be >= 0, got {self.steps}")
        if self.seed < 0:
            raise ValueError(f"seed must be non-negative, got {self.seed}")
        if not 0.0 < self.fade_fraction <= 1.0:
            raise ValueError(f"fade_fraction must lie in (0, 1], got {self.fade_fraction}")
        if not 0 <= self.max_stage <= self.network.max_stage:
            raise ValueError(
                f"max_stage {self.max_stage} not covered by channel schedule {self.network.channels}"
            )
        if self.steps_per_stage < 1:
            raise ValueError("steps_per_stage must be >= 1")
        if self.diag_window < 2:
            raise ValueError("diag_window must be >= 2")
        if self.checkpoint_every < 1:
            raise ValueError("checkpoint_every must be >= 1")
        for name in ("lr_g", "lr_d", "eps", "explode_threshold", "stasis_threshold"):
            v = getattr(self, name)
            if not math.isfinite(v) or v < 0:
                raise ValueError(f"{name} must be finite and >= 0, got {v}")
        for name in ("beta1", "beta2"):
            v = getattr(self, name)
            if not 0.0 <= v < 1.0:
                raise ValueError(f"{name} must lie in [0, 1), got {v}")

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["network"]["channels"] = list(self.network.channels)
        for k, v in d["arrangement"].items():
            if isinstance(v, enum.Enum):
                d["arrangement"][k] = v.value
        return d

    def dynamics_hash(self) -> bytes:
        """sha256 over everything that shapes the trajectory (not run length)."""
        d = self.to_dict()
        for k in ("steps", "checkpoint_every", "diag_window"):
            d.pop(k)
        return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).digest()


@dataclass
class TrainState:
    params: dict[str, dict[str, np.ndarray]]
    adam_m: dict[str, dict[str, np.ndarray]]
    adam_v: dict[str, dict[str, np.ndarray]]
    step: int
    rng_state: dict
    growth: GrowthState


@dataclass
class DiagnosticsRecord:
    step: int
    stage: int
    alpha: float
    loss_d: float
    loss_g1: float
    loss_g2: float
    grad_norm_d: float
    grad_norm_g1: float
    grad_norm_g2: float
    diversity_g1: float
    diversity_g2: float
    update_norm_d: float | None = None
    update_norm_g1: float | None = None
    update_norm_g2: float | None = None
    status: str = Status.HEALTHY.value

    def to_json(self) -> str:
        d = {k: (None if isinstance(v, float) and not math.isfinite(v) else v)
             for k, v in dataclasses.asdict(self).items()}
        return json.dumps(d, allow_nan=False)

    @classmethod
    def from_dict(cls, d: dict) -> "DiagnosticsRecord":
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ValueError(f"unknown diagnostics fields {sorted(unknown)}")
        vals = {}
        for f in dataclasses.fields(cls):
            if f.name not in d:
                if f.default is dataclasses.MISSING:
                    raise ValueError(f"missing diagnostics field {f.name!r}")
                continue
            v = d[f.name]
            if f.name in ("step", "stage", "status"):
                vals[f.name] = v
            elif v is None and f.name.startswith("update_norm"):
                vals[f.name] = None
            else:
                vals[f.name] = float("nan") if v is None else float(v)
        return cls(**vals)

    @property
    def grad_norms(self) -> tuple[float, float, float]:
        return (self.grad_norm_d, self.grad_norm_g1, self.grad_norm_g2)

    @property
    def update_norms(self) -> tuple | None:
        u = (self.update_norm_d, self.update_norm_g1, self.update_norm_g2)
        return None if any(x is None for x in u) else u

    def numeric_values(self) -> list[float]:
        vals = [self.alpha, self.loss_d, self.loss_g1, self.loss_g2, *self.grad_norms,
                self.diversity_g1, self.diversity_g2]
        return vals + list(self.update_norms or ())


# -- schedule and optimiser -------------------------------------------------

def growth_schedule(step: int, config: TrainConfig) -> GrowthState:
    if step < 0:
        raise ValueError(f"step must be >= 0, got {step}")
    stage = min(step // config.steps_per_stage, config.max_stage)
    if stage == 0:
        return GrowthState(0, 1.0)
    into = step - stage * config.steps_per_stage
    fade = config.fade_fraction * config.steps_per_stage
    return GrowthState(stage, min(1.0, into / fade))


def adam_update(param: np.ndarray, grad: np.ndarray, m: np.ndarray, v: np.ndarray,
                lr: float, beta1: float, beta2: float, eps: float, t: int):
    """One bias-corrected Adam step at 1-based iteration ``t``.

    Returns new (param, m, v); inputs are not modified.
    """
    if param.shape != grad.shape or m.shape != param.shape or v.shape != param.shape:
        raise ValueError("adam_update: param/grad/moment shapes differ")
    if not np.isfinite(grad).all():
        raise NonFiniteError("adam_update: non-finite gradient")
    m = beta1 * m + (1.0 - beta1) * grad
    v = beta2 * v + (1.0 - beta2) * (grad * grad)
    mhat = m / (1.0 - beta1 ** t)
    vhat = v / (1.0 - beta2 ** t)
    return param - lr * mhat / (np.sqrt(vhat) + eps), m, v


# -- state ---------------------------------------------------------------------

def _rng_from_state(state: dict) -> np.random.Generator:
    rng = np.random.Generator(np.random.PCG64())
    rng.bit_generator.state = state
    return rng


def init_state(config: TrainConfig) -> TrainState:
    net = config.network
    params = {
        "g1": init_params((config.seed, 1), net, "generator", config.max_stage),
        "g2": init_params((config.seed, 2), net, "generator", config.max_stage),
        "d": init_params((config.seed, 3), net, "discriminator", config.max_stage),
    }
    zeros = lambda: {n: {k: np.zeros_like(v) for k, v in params[n].items()} for n in NETWORKS}
    rng = np.random.default_rng((config.seed, 0))
    return TrainState(params, zeros(), zeros(), 0, rng.bit_generator.state, growth_schedule(0, config))


def _grad_norm(grads: Iterable[np.ndarray]) -> float:
    return math.sqrt(sum(float(np.square(g, dtype=np.float64).sum()) for g in grads))


@dataclass
class _NetUpdate:
    loss: float
    grad_norm: float
    update_norm: float
    ok: bool


def _step_network(name: str, state: TrainState, params, m, v, loss_fn: Callable, lr: float,
                  config: TrainConfig, t: int) -> _NetUpdate:
    """Differentiate ``loss_fn`` w.r.t. one network and apply Adam to it alone."""
    leaves = as_tensors(params[name], requires_grad=True)
    try:
        with Tape() as tape:
            loss = loss_fn(leaves)
        tape.backward(loss)
    except NonFiniteError as exc:
        logger.warning("step %d: %s forward/backward non-finite (%s); update skipped", state.step, name, exc)
        return _NetUpdate(float("nan"), float("nan"), 0.0, False)
    grads = {k: (leaf.grad if leaf.grad is not None else np.zeros_like(leaf.data))
             for k, leaf in leaves.items()}
    gnorm = _grad_norm(grads.values())
    lval = loss.item()
    if not (math.isfinite(lval) and math.isfinite(gnorm)):
        logger.warning("step %d: %s produced non-finite loss/grad; update skipped", state.step, name)
        return _NetUpdate(lval, gnorm, 0.0, False)
    new_p, new_m, new_v = {}, {}, {}
    delta_sq = 0.0
    for k, p in params[name].items():
        new_p[k], new_m[k], new_v[k] = adam_update(
            p, grads[k], m[name][k], v[name][k], lr, config.beta1, config.beta2, config.eps, t
        )
        delta_sq += float(np.square(new_p[k] - p, dtype=np.float64).sum())
    params[name], m[name], v[name] = new_p, new_m, new_v
    return _NetUpdate(lval, gnorm, math.sqrt(delta_sq), True)


def _generator_loss(me: int, config: TrainConfig, growth: GrowthState, d_const, z_self, z_other,
                    other_params, diag: dict):
    """Build the loss closure for generator ``me`` (1 or 2)."""
    arr = config.arrangement
    other_img = generate(Tensor(z_other), as_tensors(other_params), growth)
    other_emb = None
    if arr.generator_objective is GeneratorObjective.EMBEDDING_PROXIMITY:
        _, other_emb = discriminator_forward(other_img, d_const, growth)

    def loss_fn(leaves):
        img = generate(Tensor(z_self), leaves, growth)
        logit, emb = discriminator_forward(img, d_const, growth)
        if arr.generator_objective is GeneratorObjective.SWAP_CLASSIFICATION:
            objective = swap_classification_loss(logit, me)
        else:
            objective = embedding_proximity_loss(emb, other_emb, arr.distance_for(me))
        compete = diversity_competition_loss(img, other_img, arr.diversity_margin, arr.diversity_measure)
        diag["diversity"] = DIVERSITY_MEASURES[arr.diversity_measure](T.detach(img)).item()
        return objective + compete * arr.diversity_weight

    return loss_fn


def train_step(state: TrainState, config: TrainConfig) -> tuple[TrainState, DiagnosticsRecord]:
    """One D -> G1 -> G2 update. ``state`` is left untouched."""
    arr = config.arrangement
    rng = _rng_from_state(state.rng_state)
    shape = (config.batch_size, config.network.latent_dim)
    z_d1, z_d2, z_g1, z_g2 = (rng.standard_normal(shape, dtype=np.float32) for _ in range(4))
    growth = state.growth
    t = state.step + 1
    params = dict(state.params)
    m, v = dict(state.adam_m), dict(state.adam_v)
    exploding = False

    # discriminator
    def d_loss(leaves):
        x1 = generate(Tensor(z_d1), as_tensors(params["g1"]), growth)
        x2 = generate(Tensor(z_d2), as_tensors(params["g2"]), growth)
        l1, _ = discriminator_forward(x1, leaves, growth)
        l2, _ = discriminator_forward(x2, leaves, growth)
        if arr.discriminator_mode is DiscriminatorMode.CLASSIFIER:
            return discriminator_classifier_loss(l1, l2)
        # opposed losses on different batches
        assert z_d1 is not z_d2
        return diametric_pair(l1)[0] + diametric_pair(l2)[1]

    d = _step_network("d", state, params, m, v, d_loss, config.lr_d, config, t)

    results = {}
    for me, other, z_self, z_other in ((1, 2, z_g1, z_g2), (2, 1, z_g2, z_g1)):
        diag = {"diversity": float("nan")}
        try:
            d_const = as_tensors(params["d"])
            fn = _generator_loss(me, config, growth, d_const, z_self, z_other, params[f"g{other}"], diag)
        except NonFiniteError as exc:
            logger.warning("step %d: g%d target evaluation non-finite (%s)", state.step, me, exc)
            results[me] = (_NetUpdate(float("nan"), float("nan"), 0.0, False), diag)
            continue
        results[me] = (_step_network(f"g{me}", state, params, m, v, fn, config.lr_g, config, t), diag)

    g1, diag1 = results[1]
    g2, diag2 = results[2]
    rec = DiagnosticsRecord(
        step=state.step, stage=growth.stage, alpha=growth.alpha,
        loss_d=d.loss, loss_g1=g1.loss, loss_g2=g2.loss,
        grad_norm_d=d.grad_norm, grad_norm_g1=g1.grad_norm, grad_norm_g2=g2.grad_norm,
        diversity_g1=diag1["diversity"], diversity_g2=diag2["diversity"],
        update_norm_d=d.update_norm, update_norm_g1=g1.update_norm, update_norm_g2=g2.update_norm,
    )
    exploding = not (d.ok and g1.ok and g2.ok) or any(
        not math.isfinite(x) for x in rec.numeric_values()
    ) or max(rec.grad_norms) > config.explode_threshold
    rec.status = (Status.EXPLODING if exploding else Status.HEALTHY).value

    new_state = TrainState(
        params=params, adam_m=m, adam_v=v, step=state.step + 1,
        rng_state=rng.bit_generator.state, growth=growth_schedule(state.step + 1, config),
    )
    return new_state, rec


# -- diagnostics -----------------------------------------------------------

def stability_diagnose(window: Sequence[DiagnosticsRecord], config: TrainConfig) -> Status:
    """Classify a window of records.

    EXPLODING: any grad norm above threshold or any non-finite value.
    STATIC: each generator's diversity variance and the mean grad norm fall
    below the stasis threshold, or every recorded parameter update in the
    window is below it (the system is frozen).
    """
    if len(window) < 2:
        raise ValueError("stability_diagnose needs a window of at least 2 records")
    for r in window:
        if r.status == Status.EXPLODING.value:
            return Status.EXPLODING
        if any(not math.isfinite(x) for x in r.numeric_values()):
            return Status.EXPLODING
        if max(r.grad_norms) > config.explode_threshold:
            return Status.EXPLODING
    thr = config.stasis_threshold
    div1 = np.array([r.diversity_g1 for r in window], dtype=np.float64)
    div2 = np.array([r.diversity_g2 for r in window], dtype=np.float64)
    gn = np.array([r.grad_norms for r in window], dtype=np.float64)
    if div1.var() < thr and div2.var() < thr and gn.mean() < thr:
        return Status.STATIC
    updates = [r.update_norms for r in window]
    if all(u is not None for u in updates) and np.max(updates) < thr:
        return Status.STATIC
    return Status.HEALTHY


def sliding_windows(records: Sequence[DiagnosticsRecord], size: int) -> list[Sequence[DiagnosticsRecord]]:
    if len(records) < 2:
        raise ValueError("need at least 2 records to form a window")
    size = min(size, len(records))
    return [records[i:i + size] for i in range(len(records) - size + 1)]


def run_training(config: TrainConfig, state: TrainState | None = None,
                 on_record: Callable[[DiagnosticsRecord], None] | None = None,
                 on_step: Callable[[TrainState], None] | None = None,
                 until: int | None = None) -> tuple[TrainState, list[DiagnosticsRecord], bool]:
    """Run until ``until`` (default ``config.steps``) steps are done.

    Stops early when EXPLODING persists for ``diag_window`` consecutive
    records; the last return value is True in that case.
    """
    state = init_state(config) if state is None else state
    until = config.steps if until is None else until
    records: list[DiagnosticsRecord] = []
    streak = 0
    while state.step < until:
        state, rec = train_step(state, config)
        records.append(rec)
        if on_record:
            on_record(rec)
        if on_step:
            on_step(state)
        streak = streak + 1 if rec.status == Status.EXPLODING.value else 0
        if streak >= config.diag_window:
            logger.error("EXPLODING for %d consecutive steps; stopping at step %d", streak, state.step)
            return state, records, True
    return state, records, False
