"""Side-by-side synchronised latent walks of both generators."""
from __future__ import annotations

import enum
import hashlib
import json
import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .checkpoint import checkpoint_load
from .networks import GrowthState, as_tensors, generate, latent_dim
from .tensor import Tensor
from .training import TrainState

logger = logging.getLogger(__name__)

SLERP_PARALLEL_ANGLE = 1e-4


class Interpolation(str, enum.Enum):
    LERP = "lerp"
    SLERP = "slerp"


class RenderError(Exception):
    pass


@dataclass(frozen=True)
class Keyframe:
    z1: np.ndarray
    z2: np.ndarray

    def __post_init__(self):
        if self.z1.shape != self.z2.shape or self.z1.ndim != 1:
            raise ValueError("keyframe latents must be 1-d vectors of equal length")
        if not (np.isfinite(self.z1).all() and np.isfinite(self.z2).all()):
            raise ValueError("keyframe latents must be finite")


@dataclass(frozen=True)
class RenderPlan:
    keyframes: tuple[Keyframe, ...]
    frames_per_segment: int = 30
    interpolation: Interpolation = Interpolation.SLERP
    loop: bool = False

    def __post_init__(self):
        object.__setattr__(self, "keyframes", tuple(self.keyframes))
        object.__setattr__(self, "interpolation", Interpolation(self.interpolation))
        if len(self.keyframes) < 2:
            raise ValueError("a render plan needs at least 2 keyframes")
        if self.frames_per_segment < 1:
            raise ValueError("frames_per_segment must be >= 1")

    @property
    def segments(self) -> int:
        return len(self.keyframes) if self.loop else len(self.keyframes) - 1

    @property
    def frame_count(self) -> int:
        return self.segments * self.frames_per_segment + 1

    def timeline(self) -> list[tuple[int, float]]:
        """(segment start keyframe, t) for every frame; t is shared by both generators."""
        out = [(s, k / self.frames_per_segment)
               for s in range(self.segments) for k in range(self.frames_per_segment)]
        # closing frame: end of the last segment
        out.append((self.segments - 1, 1.0))
        return out

    def describe(self) -> dict:
        return {
            "keyframes": len(self.keyframes),
            "frames_per_segment": self.frames_per_segment,
            "interpolation": self.interpolation.value,
            "loop": self.loop,
        }

    def digest(self) -> str:
        h = hashlib.sha256(json.dumps(self.describe(), sort_keys=True).encode())
        for kf in self.keyframes:
            h.update(np.ascontiguousarray(kf.z1, dtype="<f4").tobytes())
            h.update(np.ascontiguousarray(kf.z2, dtype="<f4").tobytes())
        return h.hexdigest()


def sample_keyframes(seed: int, count: int, dim: int = 64, shared: bool = False) -> list[Keyframe]:
    """Independent standard-normal latent pairs; ``shared`` reuses z1 for G2."""
    if count < 2:
        raise ValueError(f"need at least 2 keyframes, got {count}")
    rng = np.random.default_rng(seed)
    out = []
    for _ in range(count):
        z1 = rng.standard_normal(dim, dtype=np.float32)
        z2 = z1.copy() if shared else rng.standard_normal(dim, dtype=np.float32)
        out.append(Keyframe(z1, z2))
    return out


def interpolate(a: np.ndarray, b: np.ndarray, t: float, mode: Interpolation | str = Interpolation.SLERP) -> np.ndarray:
    if not 0.0 <= t <= 1.0:
        raise ValueError(f"t must lie in [0, 1], got {t}")
    mode = Interpolation(mode)
    a = np.asarray(a)
    b = np.asarray(b)
    if t == 0.0:
        return a.copy()
    if t == 1.0:
        return b.copy()
    a64, b64 = a.astype(np.float64), b.astype(np.float64)
    if mode is Interpolation.SLERP:
        na, nb = np.linalg.norm(a64), np.linalg.norm(b64)
        if na > 0 and nb > 0:
            cos = np.clip(a64 @ b64 / (na * nb), -1.0, 1.0)
            omega = np.arccos(cos)
            if omega >= SLERP_PARALLEL_ANGLE:
                so = np.sin(omega)
                out = np.sin((1.0 - t) * omega) / so * a64 + np.sin(t * omega) / so * b64
                return out.astype(a.dtype)
    return ((1.0 - t) * a64 + t * b64).astype(a.dtype)


def to_pixels(images: np.ndarray) -> np.ndarray:
    """[-1, 1] float images [b, 3, h, w] -> uint8 [b, h, w, 3]."""
    px = np.rint((np.clip(images, -1.0, 1.0) + 1.0) * 127.5)
    return px.astype(np.uint8).transpose(0, 2, 3, 1)


def generate_pair(state: TrainState, z1: np.ndarray, z2: np.ndarray, growth: GrowthState | None = None) -> np.ndarray:
    """One composed frame: G1 on the left, G2 on the right -> uint8 [R, 2R, 3]."""
    growth = state.growth if growth is None else growth
    left = generate(Tensor(z1[None, :]), as_tensors(state.params["g1"]), growth).data
    right = generate(Tensor(z2[None, :]), as_tensors(state.params["g2"]), growth).data
    return np.concatenate([to_pixels(left)[0], to_pixels(right)[0]], axis=1)


def write_image(pixels, path) -> None:
    """Binary PPM (P6), rows top to bottom."""
    px = np.asarray(pixels)
    if px.ndim != 3 or px.shape[2] != 3:
        raise ValueError(f"expected [h, w, 3] pixels, got shape {px.shape}")
    if px.size and (np.min(px) < 0 or np.max(px) > 255):
        raise ValueError("pixel values must lie in [0, 255]")
    if px.dtype.kind == "f" and not np.array_equal(px, np.rint(px)):
        raise ValueError("pixel values must be integers")
    h, w, _ = px.shape
    with open(path, "wb") as f:
        f.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        f.write(px.astype(np.uint8).tobytes())


def read_ppm(path) -> np.ndarray:
    """Inverse of :func:`write_image` for files it produced."""
    data = Path(path).read_bytes()
    parts = data.split(b"\n", 3)
    if len(parts) != 4 or parts[0] != b"P6" or parts[2] != b"255":
        raise ValueError(f"{path}: not a P6 file with maxval 255")
    w, h = (int(x) for x in parts[1].split())
    payload = parts[3]
    if len(payload) != w * h * 3:
        raise ValueError(f"{path}: payload is {len(payload)} bytes, expected {w * h * 3}")
    return np.frombuffer(payload, dtype=np.uint8).reshape(h, w, 3)


def frame_latents(plan: RenderPlan, index: int) -> tuple[np.ndarray, np.ndarray, float]:
    seg, t = plan.timeline()[index]
    a = plan.keyframes[seg]
    b = plan.keyframes[(seg + 1) % len(plan.keyframes)]
    return (interpolate(a.z1, b.z1, t, plan.interpolation),
            interpolate(a.z2, b.z2, t, plan.interpolation), t)


def render_sequence(checkpoint, plan: RenderPlan, out_dir, keyframe_seed: int | None = None) -> dict:
    """Write frame_%06d.ppm files and manifest.json; returns the manifest.

    ``checkpoint`` is a path or an already loaded :class:`TrainState`.
    """
    state = checkpoint if isinstance(checkpoint, TrainState) else checkpoint_load(checkpoint)
    dim = latent_dim(state.params["g1"])
    if plan.keyframes[0].z1.shape[0] != dim:
        raise RenderError(f"keyframe latents have dim {plan.keyframes[0].z1.shape[0]}, generators expect {dim}")
    out_dir = Path(out_dir)
    try:
        out_dir.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise RenderError(f"cannot create output directory {out_dir}: {exc.strerror}") from None

    timeline = plan.timeline()
    frame = None
    for i in range(len(timeline)):
        z1, z2, _ = frame_latents(plan, i)
        frame = generate_pair(state, z1, z2)
        try:
            write_image(frame, out_dir / f"frame_{i:06d}.ppm")
        except OSError as exc:
            raise RenderError(f"cannot write frames to {out_dir}: {exc.strerror}") from None
    height, width = frame.shape[:2]
    manifest = {
        "frames": len(timeline),
        "width": width,
        "height": height,
        "keyframe_seed": keyframe_seed,
        "plan": plan.describe(),
        "plan_hash": plan.digest(),
        "stage": state.growth.stage,
        "alpha": state.growth.alpha,
    }
    (out_dir / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    logger.info("rendered %d frames (%dx%d) to %s", len(timeline), width, height, out_dir)
    return manifest
