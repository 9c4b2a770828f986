"""Guidance terms for consensus-guided counterfactual diffusion.

Per reverse step the sampler needs a classifier score and a distance
score (gradients taken through the one-step clean estimate), the
block-wise consensus filter that keeps classifier gradient blocks only
where they agree in angle with the diffusion model's implicit classifier
``eps_c - eps_uc``, and the assembly of the guided noise prediction.
The cone projection used by robust-model guidance baselines and an
angle histogram helper live here too.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, fields
from importlib import resources

import numpy as np

from . import world as wd
from .classifiers import Model, input_grad
from .errors import DegenerateInput, InvalidArgument
from .latent import AffineCodec, decode, pullback_grad

MODES = ("consensus", "none", "cone", "uncond-only")
DISTANCES = ("L1", "L2")
NORM_FLOOR = 1e-12


@dataclass(frozen=True)
class GuidanceConfig:
    eta: float = 2.0
    lambda_c: float = 3.0
    lambda_d: float = 1.0
    gamma_deg: float = 45.0
    block_size: int = 1
    overwrite: float | tuple[float, ...] = 0.0
    distance: str = "L1"
    mode: str = "consensus"
    cone_alpha_deg: float = 30.0
    grad_through_score: bool = False
    cone_aligned_returns_w: bool = False

    def __post_init__(self):
        if self.eta < 0 or self.lambda_c < 0 or self.lambda_d < 0:
            raise InvalidArgument("eta, lambda_c and lambda_d must be non-negative")
        if not 0.0 <= self.gamma_deg <= 180.0:
            raise InvalidArgument(f"gamma_deg must lie in [0, 180], got {self.gamma_deg}")
        if int(self.block_size) != self.block_size or self.block_size < 1:
            raise InvalidArgument(f"block_size must be a positive integer, got {self.block_size}")
        if self.distance not in DISTANCES:
            raise InvalidArgument(f"distance must be one of {DISTANCES}, got {self.distance!r}")
        if self.mode not in MODES:
            raise InvalidArgument(f"mode must be one of {MODES}, got {self.mode!r}")
        if not 0.0 <= self.cone_alpha_deg <= 180.0:
            raise InvalidArgument("cone_alpha_deg must lie in [0, 180]")
        if isinstance(self.overwrite, list):
            object.__setattr__(self, "overwrite", tuple(self.overwrite))

    def to_dict(self) -> dict:
        d = asdict(self)
        if isinstance(d["overwrite"], tuple):
            d["overwrite"] = list(d["overwrite"])
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "GuidanceConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise InvalidArgument(f"unknown guidance keys: {sorted(unknown)}")
        return cls(**d)


def load_presets() -> dict:
    text = resources.files("cfdiff").joinpath("data/presets.json").read_text()
    return json.loads(text)


def get_preset(name: str) -> GuidanceConfig:
    presets = load_presets()
    if name not in presets:
        raise InvalidArgument(f"unknown guidance preset {name!r}; available: {sorted(presets)}")
    return GuidanceConfig.from_dict(presets[name]["guidance"])


# -- one-step clean estimate and score terms -----------------------------------

def predict_x0(z_t, eps, alpha_bar_t: float) -> np.ndarray:
    if not 0.0 < alpha_bar_t <= 1.0:
        raise InvalidArgument(f"alpha_bar_t must lie in (0, 1], got {alpha_bar_t}")
    z_t = np.asarray(z_t, dtype=np.float64)
    return (z_t - np.sqrt(1.0 - alpha_bar_t) * np.asarray(eps)) / np.sqrt(alpha_bar_t)


def _check_open(alpha_bar_t: float) -> None:
    if not 0.0 < alpha_bar_t < 1.0:
        raise InvalidArgument(f"alpha_bar_t must lie in (0, 1), got {alpha_bar_t}")


def _to_latent(g_ambient, z_t, alpha_bar_t, codec, world, grad_through_score) -> np.ndarray:
    """Chain an ambient gradient at D(x0_hat) back to z_t and scale by sqrt(1 - ab)."""
    g = pullback_grad(codec, g_ambient)
    if grad_through_score:
        jac_eps = wd.epsilon_uncond_jacobian(world, z_t, alpha_bar_t)
        jac_x0 = (np.eye(g.shape[-1]) - np.sqrt(1.0 - alpha_bar_t) * jac_eps) / np.sqrt(alpha_bar_t)
        g = np.einsum("...j,...ji->...i", g, jac_x0)
    else:
        g = g / np.sqrt(alpha_bar_t)
    return np.sqrt(1.0 - alpha_bar_t) * g


def cls_score(
    z_t,
    alpha_bar_t: float,
    c: int,
    classifier: Model,
    codec: AffineCodec,
    world: wd.MixtureWorld,
    eps_uc=None,
    grad_through_score: bool = False,
) -> np.ndarray:
    """``sqrt(1 - ab) * grad_z CE(f(D(x0_hat)), c)``.

    By default ``eps_uc`` is held fixed inside ``x0_hat`` (stop-gradient);
    ``grad_through_score`` includes the exact Jacobian of the oracle score.
    """
    _check_open(alpha_bar_t)
    if eps_uc is None:
        eps_uc = wd.epsilon_uncond(world, z_t, alpha_bar_t)
    x0 = predict_x0(z_t, eps_uc, alpha_bar_t)
    g = input_grad(classifier, decode(codec, x0), c)
    return _to_latent(g, z_t, alpha_bar_t, codec, world, grad_through_score)


def distance_grad(x, x_F, distance: str = "L1") -> np.ndarray:
    diff = np.asarray(x, dtype=np.float64) - np.asarray(x_F, dtype=np.float64)
    if distance == "L1":
        return np.sign(diff)
    if distance == "L2":
        norm = np.linalg.norm(diff, axis=-1, keepdims=True)
        return diff / np.maximum(norm, NORM_FLOOR)
    raise InvalidArgument(f"distance must be one of {DISTANCES}, got {distance!r}")


def dist_score(
    z_t,
    alpha_bar_t: float,
    x_F,
    codec: AffineCodec,
    world: wd.MixtureWorld,
    distance: str = "L1",
    eps_uc=None,
    grad_through_score: bool = False,
) -> np.ndarray:
    """``sqrt(1 - ab) * grad_z d(D(x0_hat), x_F)``; L1 uses sign(0) = 0."""
    _check_open(alpha_bar_t)
    if eps_uc is None:
        eps_uc = wd.epsilon_uncond(world, z_t, alpha_bar_t)
    x0 = predict_x0(z_t, eps_uc, alpha_bar_t)
    g = distance_grad(decode(codec, x0), x_F, distance)
    return _to_latent(g, z_t, alpha_bar_t, codec, world, grad_through_score)


# -- consensus filter ------------------------------------------------------------

def vector_angle(u, v) -> np.ndarray:
    """Angle in degrees along the last axis.

    Uses 2*atan2(|u|v| - v|u||, |u|v| + v|u||), which is exact for parallel
    and anti-parallel scalars where arccos of a rounded cosine is not.
    Zero vectors give nan.
    """
    u = np.asarray(u, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    nu = np.linalg.norm(u, axis=-1, keepdims=True)
    nv = np.linalg.norm(v, axis=-1, keepdims=True)
    a, b = u * nv, v * nu
    ang = 2.0 * np.arctan2(np.linalg.norm(a - b, axis=-1), np.linalg.norm(a + b, axis=-1))
    ang = np.degrees(ang)
    return np.where((nu[..., 0] == 0) | (nv[..., 0] == 0), np.nan, ang)


def _block_starts(length: int, block_size: int) -> np.ndarray:
    if int(block_size) != block_size or block_size < 1:
        raise InvalidArgument(f"block_size must be a positive integer, got {block_size}")
    return np.arange(0, length, int(block_size))


def block_angles(cls, implicit, block_size: int = 1) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Per-block angle (degrees), and zero-block flags for both inputs."""
    cls = np.asarray(cls, dtype=np.float64)
    implicit = np.asarray(implicit, dtype=np.float64)
    if cls.shape != implicit.shape:
        raise InvalidArgument(f"length mismatch: {cls.shape} vs {implicit.shape}")
    starts = _block_starts(cls.shape[-1], block_size)
    sizes = np.diff(np.append(starts, cls.shape[-1]))
    nu = np.sqrt(np.add.reduceat(cls * cls, starts, axis=-1))
    nv = np.sqrt(np.add.reduceat(implicit * implicit, starts, axis=-1))
    a = cls * np.repeat(nv, sizes, axis=-1)
    b = implicit * np.repeat(nu, sizes, axis=-1)
    diff = np.sqrt(np.add.reduceat((a - b) ** 2, starts, axis=-1))
    summ = np.sqrt(np.add.reduceat((a + b) ** 2, starts, axis=-1))
    ang = np.degrees(2.0 * np.arctan2(diff, summ))
    cls_zero = nu == 0
    imp_zero = nv == 0
    # undefined angle against a zero implicit block counts as fully misaligned
    ang = np.where(imp_zero, 180.0, ang)
    return ang, cls_zero, imp_zero


def consensus_mask(cls, implicit, gamma_deg: float, block_size: int = 1) -> np.ndarray:
    """True for blocks whose classifier gradient is kept."""
    ang, cls_zero, _ = block_angles(cls, implicit, block_size)
    return (ang <= gamma_deg) | cls_zero


def consensus_filter(cls, implicit, gamma_deg: float, block_size: int = 1, overwrite=0.0) -> np.ndarray:
    """Keep ``cls`` blocks within ``gamma_deg`` of the implicit classifier; overwrite the rest.

    Blocks are consecutive coordinate ranges of ``block_size`` (the last may
    be shorter). A zero classifier block stays zero.
    """
    if not 0.0 <= gamma_deg <= 180.0:
        raise InvalidArgument(f"gamma_deg must lie in [0, 180], got {gamma_deg}")
    cls = np.asarray(cls, dtype=np.float64)
    ang, cls_zero, _ = block_angles(cls, implicit, block_size)
    keep = ang <= gamma_deg
    starts = _block_starts(cls.shape[-1], block_size)
    sizes = np.diff(np.append(starts, cls.shape[-1]))
    keep_c = np.repeat(keep, sizes, axis=-1)
    zero_c = np.repeat(cls_zero, sizes, axis=-1)
    fill = np.broadcast_to(np.asarray(overwrite, dtype=np.float64), cls.shape)
    return np.where(keep_c | zero_c, np.where(zero_c, 0.0, cls), fill)


def assemble_epsilon(eps_uc, eps_c, consensus, dist, eta: float, lambda_c: float, lambda_d: float) -> np.ndarray:
    """Guided noise prediction.

    ``eps_uc + eta * (lambda_c * unit(consensus) + lambda_d * unit(dist)) * |eps_c|``;
    a term whose norm is below 1e-12 contributes nothing.
    """
    arrays = [np.asarray(a, dtype=np.float64) for a in (eps_uc, eps_c, consensus, dist)]
    if len({a.shape for a in arrays}) != 1:
        raise InvalidArgument(f"shape mismatch: {[a.shape for a in arrays]}")
    eps_uc, eps_c, consensus, dist = arrays

    def unit(v):
        n = np.linalg.norm(v, axis=-1, keepdims=True)
        return np.where(n < NORM_FLOOR, 0.0, v / np.where(n < NORM_FLOOR, 1.0, n))

    scale = np.linalg.norm(eps_c, axis=-1, keepdims=True)
    return eps_uc + eta * (lambda_c * unit(consensus) + lambda_d * unit(dist)) * scale


# -- cone projection -------------------------------------------------------------

def _check_units(v, w) -> tuple[np.ndarray, np.ndarray]:
    v = np.asarray(v, dtype=np.float64)
    w = np.asarray(w, dtype=np.float64)
    if v.shape != w.shape or v.ndim != 1:
        raise InvalidArgument("v and w must be 1-D vectors of equal length")
    if abs(np.linalg.norm(v) - 1.0) > 1e-8 or abs(np.linalg.norm(w) - 1.0) > 1e-8:
        raise InvalidArgument("cone_project expects unit vectors")
    return v, w


def cone_direction(v, w, alpha_deg: float) -> np.ndarray:
    """Unit vector on the cone boundary around ``v`` in the plane of ``v`` and ``w``."""
    v, w = _check_units(v, w)
    perp = w - (w @ v) * v
    pnorm = np.linalg.norm(perp)
    if pnorm < 1e-12:
        raise DegenerateInput("w is collinear with v; the cone projection direction is undefined")
    alpha = np.deg2rad(alpha_deg)
    return np.sin(alpha) * perp / pnorm + np.cos(alpha) * v


def cone_project(v, w, alpha_deg: float, aligned_returns_w: bool = False) -> np.ndarray:
    """Project unit gradient ``w`` onto the cone of half-angle ``alpha_deg`` around unit ``v``.

    When the angle between ``w`` and ``v`` is within the cone the target
    direction ``v`` is returned (``w`` with ``aligned_returns_w``).
    """
    v, w = _check_units(v, w)
    if float(vector_angle(w, v)) <= alpha_deg:
        return w.copy() if aligned_returns_w else v.copy()
    u = cone_direction(v, w, alpha_deg)
    return (u @ w) * u


# -- angle diagnostics -------------------------------------------------------------

@dataclass
class AngleStats:
    angles: np.ndarray
    counts: np.ndarray
    edges: np.ndarray
    threshold_deg: float
    fraction_above: float
    degenerate: int

    @property
    def n_pairs(self) -> int:
        return int(self.angles.size) + self.degenerate

    def summary(self) -> dict:
        return {
            "n_pairs": self.n_pairs,
            "degenerate": self.degenerate,
            "threshold_deg": self.threshold_deg,
            "fraction_above": self.fraction_above,
            "bin_edges_deg": self.edges.tolist(),
            "counts": self.counts.tolist(),
        }


def angle_stats(pairs, threshold_deg: float = 60.0, bin_width: float = 5.0) -> AngleStats:
    """Histogram of angles between paired vectors over [0, 180] degrees.

    ``pairs`` is a sequence of ``(g1, g2)`` or a tuple of two ``(N, d)``
    arrays. Pairs containing a zero vector are skipped and tallied.
    """
    if isinstance(pairs, tuple) and len(pairs) == 2 and np.ndim(pairs[0]) == 2:
        g1, g2 = (np.asarray(p, dtype=np.float64) for p in pairs)
    else:
        if len(pairs) == 0:
            raise InvalidArgument("angle_stats needs at least one pair")
        g1 = np.array([p[0] for p in pairs], dtype=np.float64)
        g2 = np.array([p[1] for p in pairs], dtype=np.float64)
    if g1.shape != g2.shape or g1.ndim != 2 or g1.shape[0] == 0:
        raise InvalidArgument("pairs must be non-empty with matching dimensions")
    ang = vector_angle(g1, g2)
    ok = ~np.isnan(ang)
    ang = ang[ok]
    edges = np.arange(0.0, 180.0 + bin_width / 2, bin_width)
    counts, _ = np.histogram(ang, bins=edges)
    frac = float(np.mean(ang > threshold_deg)) if ang.size else float("nan")
    return AngleStats(ang, counts, edges, float(threshold_deg), frac, int((~ok).sum()))
