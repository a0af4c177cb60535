"""Finite-difference sweep over every differentiable op and a tiny ensemble.

Each registry entry builds ``(f, x, eps, coords)`` from a seeded generator:
``f`` maps a tensor to a scalar, ``x`` is the point to check at. Inputs to
non-smooth ops are drawn at least 0.1 away from their kinks.
"""
from __future__ import annotations

import time
from typing import Callable

import numpy as np

from . import tensor as T
from .losses import (
    DistanceKind,
    color_diversity,
    diametric_pair,
    discriminator_classifier_loss,
    distance,
    diversity_competition_loss,
    embedding_proximity_loss,
    swap_classification_loss,
)
from .networks import GrowthState, NetworkConfig, as_tensors, discriminator_forward, generate, init_params
from .tensor import Tensor

TOLERANCE = 1e-3
OP_EPS = 1e-3
ENSEMBLE_EPS = 1e-6
ENSEMBLE_COORDS = 3

REGISTRY: dict[str, Callable] = {}


def register(name: str):
    def deco(fn):
        REGISTRY[name] = fn
        return fn
    return deco


def _away(rng, shape, lo=0.1, hi=1.5):
    """Values with |x| in [lo, hi] and random sign."""
    return rng.uniform(lo, hi, shape) * rng.choice([-1.0, 1.0], shape)


def _weighted(op, shape_rng):
    """sum(op(x) * R) with a fixed random R, so every output coordinate matters."""
    cache = {}

    def f(x):
        y = op(x)
        if "R" not in cache:
            cache["R"] = Tensor(shape_rng.standard_normal(y.shape))
        return T.sum(y * cache["R"])

    return f


def _unary(op, shape, sampler=None):
    def build(rng):
        x = sampler(rng, shape) if sampler else rng.standard_normal(shape)
        return _weighted(op, rng), x, OP_EPS, None
    return build


def _positive(rng, shape):
    return rng.uniform(0.5, 2.0, shape)


for _name, _op, _shape, _sampler in [
    ("neg", T.neg, (3, 4), None),
    ("scale", lambda x: T.scale(x, -1.7), (3, 4), None),
    ("add_scalar", lambda x: T.add_scalar(x, 0.3), (3, 4), None),
    ("abs", T.abs, (3, 4), _away),
    ("sqrt", T.sqrt, (3, 4), _positive),
    ("floored_sqrt", lambda x: T.floored_sqrt(x, 1e-12), (3, 4), _positive),
    ("square", T.square, (3, 4), None),
    ("tanh", T.tanh, (3, 4), None),
    ("sigmoid", T.sigmoid, (3, 4), None),
    ("softplus", T.softplus, (3, 4), None),
    ("leaky_relu", lambda x: T.leaky_relu(x, 0.2), (3, 4), _away),
    ("relu", T.relu, (3, 4), _away),
    ("expand", lambda x: T.expand(x, (2, 3, 4)), (3, 1), None),
    ("reshape", lambda x: T.reshape(x, (4, 3)), (3, 4), None),
    ("sum", lambda x: T.sum(x, axis=1), (3, 4), None),
    ("mean", lambda x: T.mean(x, axis=(0, 2)), (2, 3, 4), None),
    ("variance", T.variance, (3, 4), None),
    ("upsample_nearest2x", T.upsample_nearest2x, (2, 3, 3, 3), None),
    ("avgpool2x", T.avgpool2x, (2, 3, 4, 4), None),
    ("pixel_norm", T.pixel_norm, (2, 4, 3, 3), None),
]:
    register(_name)(_unary(_op, _shape, _sampler))


def _binary(name, op, shape_a, shape_b, sampler_b=None):
    def build_a(rng):
        b = Tensor(sampler_b(rng, shape_b) if sampler_b else rng.standard_normal(shape_b))
        return _weighted(lambda x: op(x, b), rng), rng.standard_normal(shape_a), OP_EPS, None

    def build_b(rng):
        a = Tensor(rng.standard_normal(shape_a))
        x = sampler_b(rng, shape_b) if sampler_b else rng.standard_normal(shape_b)
        return _weighted(lambda x: op(a, x), rng), x, OP_EPS, None

    register(f"{name}[a]")(build_a)
    register(f"{name}[b]")(build_b)


_binary("add", T.add, (3, 4), (3, 4))
_binary("sub", T.sub, (3, 4), (3, 4))
_binary("mul", T.mul, (3, 4), (3, 4))
_binary("div", T.div, (3, 4), (3, 4), _away)
_binary("matmul", T.matmul, (3, 4), (4, 2))


def _conv_entries(name, op, x_shape, w_shape):
    def builder(which):
        def build(rng):
            parts = {"input": rng.standard_normal(x_shape), "weight": rng.standard_normal(w_shape),
                     "bias": rng.standard_normal(w_shape[0])}
            fixed = {k: Tensor(v) for k, v in parts.items() if k != which}

            def op_of(x):
                args = dict(fixed, **{which: x})
                return op(args["input"], args["weight"], args["bias"])

            return _weighted(op_of, rng), parts[which], OP_EPS, None
        return build

    for which in ("input", "weight", "bias"):
        register(f"{name}[{which}]")(builder(which))


_conv_entries("conv2d", T.conv2d, (2, 3, 5, 5), (4, 3, 3, 3))
_conv_entries("conv1x1", T.conv1x1, (2, 3, 4, 4), (5, 3))


# -- loss functions ---------------------------------------------------------

@register("distance[l1]")
def _(rng):
    b = Tensor(rng.standard_normal((4, 6)))
    # keep a - b away from zero
    x = b.data + _away(rng, (4, 6))
    return (lambda a: T.sum(distance(a, b, DistanceKind.L1))), x, OP_EPS, None


@register("distance[l2]")
def _(rng):
    b = Tensor(rng.standard_normal((4, 6)))
    return (lambda a: T.sum(distance(a, b, DistanceKind.L2))), rng.standard_normal((4, 6)), OP_EPS, None


@register("distance[cosine]")
def _(rng):
    b = Tensor(rng.standard_normal((4, 6)))
    return (lambda a: T.sum(distance(a, b, DistanceKind.COSINE))), rng.standard_normal((4, 6)), OP_EPS, None


def _distinct_colour_batch(rng, b=4, r=4):
    # per-image offsets spaced >= 0.1 apart so no mean-colour gap sits near 0
    offsets = (np.arange(b)[:, None] * 0.25 + rng.uniform(0, 0.05, (b, 3)))[rng.permutation(b)]
    return rng.standard_normal((b, 3, r, r)) * 0.01 + offsets[:, :, None, None]


@register("color_diversity")
def _(rng):
    return color_diversity, _distinct_colour_batch(rng), OP_EPS, None


@register("diversity_competition_loss")
def _(rng):
    other = Tensor(_distinct_colour_batch(rng))
    # margin large enough that the hinge stays active
    return (lambda x: diversity_competition_loss(x, other, margin=2.0)), _distinct_colour_batch(rng), OP_EPS, None


@register("swap_classification_loss")
def _(rng):
    return (lambda x: swap_classification_loss(x, 1)), rng.standard_normal((5, 1)) * 2, OP_EPS, None


@register("embedding_proximity_loss")
def _(rng):
    other = Tensor(rng.standard_normal((4, 6)))
    return (lambda x: embedding_proximity_loss(x, other, DistanceKind.L2)), rng.standard_normal((4, 6)), OP_EPS, None


@register("discriminator_classifier_loss")
def _(rng):
    other = Tensor(rng.standard_normal((5, 1)))
    return (lambda x: discriminator_classifier_loss(x, other)), rng.standard_normal((5, 1)) * 2, OP_EPS, None


@register("diametric_pair")
def _(rng):
    return (lambda x: diametric_pair(x)[0] * 0.7 + diametric_pair(x * 1.3)[1]), rng.standard_normal((5, 1)), OP_EPS, None


# -- tiny end-to-end ensemble ---------------------------------------------

TINY = NetworkConfig(latent_dim=8, embed_dim=8, channels=(4, 3))


def _tiny_world(rng, stage=0, alpha=1.0):
    seed = int(rng.integers(2**31))
    g1 = init_params((seed, 1), TINY, "generator", dtype=np.float64)
    g2 = init_params((seed, 2), TINY, "generator", dtype=np.float64)
    d = init_params((seed, 3), TINY, "discriminator", dtype=np.float64)
    z = [rng.standard_normal((3, TINY.latent_dim)) for _ in range(4)]
    return g1, g2, d, z, GrowthState(stage, alpha)


def _ensemble_param_checks(name, loss_of, which, stage=0, alpha=1.0):
    """One entry per parameter tensor of network ``which``."""
    def build_all(rng):
        g1, g2, d, z, growth = _tiny_world(rng, stage, alpha)
        nets = {"g1": g1, "g2": g2, "d": d}
        cache: dict = {}
        checks = []
        for pname, value in nets[which].items():
            def f(x, pname=pname):
                p = {k: as_tensors(v) for k, v in nets.items()}
                p[which] = dict(p[which], **{pname: x})
                return loss_of(p, z, growth, cache)
            k = min(ENSEMBLE_COORDS, value.size)
            coords = rng.choice(value.size, size=k, replace=False)
            checks.append((f, value, ENSEMBLE_EPS, coords))
        return checks

    build_all.multi = True
    REGISTRY[name] = build_all


def _d_classifier(p, z, growth, cache):
    x1 = generate(Tensor(z[0]), p["g1"], growth)
    x2 = generate(Tensor(z[1]), p["g2"], growth)
    return discriminator_classifier_loss(discriminator_forward(x1, p["d"], growth)[0],
                                         discriminator_forward(x2, p["d"], growth)[0])


def _d_diametric(p, z, growth, cache):
    x1 = generate(Tensor(z[0]), p["g1"], growth)
    x2 = generate(Tensor(z[1]), p["g2"], growth)
    return (diametric_pair(discriminator_forward(x1, p["d"], growth)[0])[0]
            + diametric_pair(discriminator_forward(x2, p["d"], growth)[0])[1])


def _other_batch(p, z, growth, cache):
    # g2 and d are fixed during a g1 check
    if "other" not in cache:
        other = generate(Tensor(z[3]), p["g2"], growth)
        cache["other"] = T.detach(other)
        cache["other_emb"] = T.detach(discriminator_forward(cache["other"], p["d"], growth)[1])
    return cache["other"], cache["other_emb"]


def _g1_swap(p, z, growth, cache):
    x = generate(Tensor(z[2]), p["g1"], growth)
    other, _ = _other_batch(p, z, growth, cache)
    logit, _ = discriminator_forward(x, p["d"], growth)
    return swap_classification_loss(logit, 1) + diversity_competition_loss(x, other, 1.0)


def _proximity(kind):
    def loss(p, z, growth, cache):
        x = generate(Tensor(z[2]), p["g1"], growth)
        other, other_emb = _other_batch(p, z, growth, cache)
        _, emb = discriminator_forward(x, p["d"], growth)
        return embedding_proximity_loss(emb, other_emb, kind) + diversity_competition_loss(x, other, 1.0)
    return loss


_ensemble_param_checks("ensemble4x4[d:classifier]", _d_classifier, "d")
_ensemble_param_checks("ensemble4x4[d:diametric]", _d_diametric, "d")
_ensemble_param_checks("ensemble4x4[g1:swap]", _g1_swap, "g1")
_ensemble_param_checks("ensemble4x4[g1:proximity-l2]", _proximity(DistanceKind.L2), "g1")
_ensemble_param_checks("ensemble4x4[g1:proximity-cosine]", _proximity(DistanceKind.COSINE), "g1")
_ensemble_param_checks("ensemble8x8-fade[g1:proximity-l1]", _proximity(DistanceKind.L1), "g1", stage=1, alpha=0.5)
_ensemble_param_checks("ensemble8x8-fade[d:diametric]", _d_diametric, "d", stage=1, alpha=0.5)


def check_entry(build, rng) -> float:
    built = build(rng)
    checks = built if getattr(build, "multi", False) else [built]
    return max(T.grad_check(f, x, eps, coords) for f, x, eps, coords in checks)


def run_gradcheck(seed: int = 0, n_seeds: int = 10, registry: dict | None = None,
                  tolerance: float = TOLERANCE, out=print) -> tuple[dict[str, float], bool]:
    """Max relative error per entry across ``n_seeds`` seeds; ok iff all < tolerance."""
    registry = REGISTRY if registry is None else registry
    results: dict[str, float] = {}
    t0 = time.perf_counter()
    for name, build in registry.items():
        worst = 0.0
        for k in range(n_seeds):
            rng = np.random.default_rng((seed, k, sum(name.encode())))
            err = check_entry(build, rng)
            worst = max(worst, err) if np.isfinite(err) else float("inf")
        results[name] = worst
        out(f"{name:40s} max_rel_err={worst:.3e} {'ok' if worst < tolerance else 'FAIL'}")
    ok = all(v < tolerance for v in results.values())
    out(f"{len(results)} entries, {n_seeds} seeds, {time.perf_counter() - t0:.1f}s: {'PASS' if ok else 'FAIL'}")
    return results, ok
