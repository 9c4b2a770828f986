"""Class-labelled isotropic Gaussian-mixture worlds with exact score oracles.

A world stands in for a class-conditional diffusion model: the forward
process maps component ``k`` to mean ``sqrt(ab) * mu_k`` and variance
``ab * v_k + (1 - ab)``, so the noisy marginal stays a mixture and its
score, noise prediction and class posterior are available in closed form.

All oracle functions accept a single latent vector ``(m,)`` or a batch
``(N, m)`` and broadcast over leading axes.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import InvalidArgument

LOG_FLOOR = 1e-300


@dataclass(frozen=True)
class MixtureComponent:
    mean: tuple[float, ...]
    variance: float
    weight: float
    class_label: int
    attributes: tuple[float, ...] = ()


@dataclass(frozen=True, eq=False)
class MixtureWorld:
    means: np.ndarray  # (K, m)
    variances: np.ndarray  # (K,)
    weights: np.ndarray  # (K,)
    labels: np.ndarray  # (K,)
    attributes: np.ndarray  # (K, A)
    class_count: int
    name: str = "custom"

    @property
    def latent_dim(self) -> int:
        return self.means.shape[1]

    @property
    def n_components(self) -> int:
        return self.means.shape[0]

    @property
    def n_attributes(self) -> int:
        return self.attributes.shape[1]

    @property
    def components(self) -> list[MixtureComponent]:
        return [
            MixtureComponent(
                tuple(self.means[k].tolist()),
                float(self.variances[k]),
                float(self.weights[k]),
                int(self.labels[k]),
                tuple(self.attributes[k].tolist()),
            )
            for k in range(self.n_components)
        ]

    def class_weights(self) -> np.ndarray:
        return np.bincount(self.labels, weights=self.weights, minlength=self.class_count)

    def class_means(self) -> np.ndarray:
        """Weight-averaged component mean of every class, shape ``(K, m)``."""
        out = np.zeros((self.class_count, self.latent_dim))
        np.add.at(out, self.labels, self.weights[:, None] * self.means)
        return out / self.class_weights()[:, None]


def make_world(components: list[MixtureComponent], class_count: int | None = None, name: str = "custom") -> MixtureWorld:
    if not components:
        raise InvalidArgument("a world needs at least one component")
    means = np.array([c.mean for c in components], dtype=np.float64)
    if means.ndim != 2 or means.shape[1] < 1:
        raise InvalidArgument("component means must share a latent dimension >= 1")
    variances = np.array([c.variance for c in components], dtype=np.float64)
    weights = np.array([c.weight for c in components], dtype=np.float64)
    labels = np.array([c.class_label for c in components], dtype=np.int64)
    n_attr = {len(c.attributes) for c in components}
    if len(n_attr) != 1:
        raise InvalidArgument("all components must carry the same number of attributes")
    attributes = np.array([c.attributes for c in components], dtype=np.float64).reshape(len(components), n_attr.pop())
    if class_count is None:
        class_count = int(labels.max()) + 1
    if np.any(variances <= 0):
        raise InvalidArgument("component variances must be positive")
    if np.any(weights <= 0):
        raise InvalidArgument("component weights must be positive")
    if abs(weights.sum() - 1.0) > 1e-12:
        raise InvalidArgument(f"component weights must sum to 1, got {weights.sum()!r}")
    if np.any((attributes < 0) | (attributes > 1)):
        raise InvalidArgument("attribute probabilities must lie in [0, 1]")
    if labels.min() < 0 or labels.max() >= class_count:
        raise InvalidArgument("class labels out of range")
    missing = set(range(class_count)) - set(labels.tolist())
    if missing:
        raise InvalidArgument(f"classes without components: {sorted(missing)}")
    for arr in (means, variances, weights, labels, attributes):
        arr.setflags(write=False)
    return MixtureWorld(means, variances, weights, labels, attributes, int(class_count), name)


def _check_class(world: MixtureWorld, c) -> int:
    if c is None or int(c) != c or not 0 <= c < world.class_count:
        raise InvalidArgument(f"class must be in [0, {world.class_count}), got {c!r}")
    return int(c)


def _check_alpha_bar(alpha_bar_t: float, allow_one: bool = True) -> float:
    ab = float(alpha_bar_t)
    if not (0.0 < ab <= 1.0) or (ab == 1.0 and not allow_one):
        raise InvalidArgument(f"alpha_bar_t must lie in (0, 1{']' if allow_one else ')'}, got {alpha_bar_t!r}")
    return ab


def _as_latent(world: MixtureWorld, z) -> np.ndarray:
    z = np.asarray(z, dtype=np.float64)
    if z.shape[-1:] != (world.latent_dim,):
        raise InvalidArgument(f"expected latent dimension {world.latent_dim}, got shape {z.shape}")
    return z


@dataclass(frozen=True)
class NoisyMarginal:
    means: np.ndarray
    variances: np.ndarray
    weights: np.ndarray
    labels: np.ndarray


def noisy_marginal(world: MixtureWorld, cls: int | None, alpha_bar_t: float) -> NoisyMarginal:
    """Mixture parameters of ``z_t`` after forward noising to level ``alpha_bar_t``."""
    ab = _check_alpha_bar(alpha_bar_t)
    idx = np.arange(world.n_components)
    if cls is not None:
        idx = np.flatnonzero(world.labels == _check_class(world, cls))
    weights = world.weights[idx]
    return NoisyMarginal(
        np.sqrt(ab) * world.means[idx],
        ab * world.variances[idx] + (1.0 - ab),
        weights / weights.sum(),
        world.labels[idx],
    )


def _log_joint(world: MixtureWorld, z: np.ndarray, ab: float):
    """Per-component log(w_k N(z; a mu_k, s_k I)) and score directions ``(a mu_k - z) / s_k``."""
    s = ab * world.variances + (1.0 - ab)
    diff = np.sqrt(ab) * world.means - z[..., None, :]  # (..., K, m)
    sq = np.einsum("...km,...km->...k", diff, diff)
    m = world.latent_dim
    log_joint = np.log(world.weights) - 0.5 * m * np.log(2 * np.pi * s) - 0.5 * sq / s
    return log_joint, diff / s[:, None]


def _softmax(logits: np.ndarray, mask: np.ndarray | None = None) -> np.ndarray:
    if mask is not None:
        logits = np.where(mask, logits, -np.inf)
    top = logits.max(axis=-1, keepdims=True)
    e = np.exp(logits - top)
    return e / e.sum(axis=-1, keepdims=True)


def _logsumexp(a: np.ndarray, mask: np.ndarray | None = None) -> np.ndarray:
    if mask is not None:
        a = np.where(mask, a, -np.inf)
    top = a.max(axis=-1, keepdims=True)
    return (top + np.log(np.exp(a - top).sum(axis=-1, keepdims=True)))[..., 0]


def log_density(world: MixtureWorld, z, alpha_bar_t: float = 1.0, cls: int | None = None) -> np.ndarray:
    """log p_t(z), or log p_t(z | cls) when a class is given."""
    ab = _check_alpha_bar(alpha_bar_t)
    z = _as_latent(world, z)
    log_joint, _ = _log_joint(world, z, ab)
    if cls is None:
        return _logsumexp(log_joint)
    mask = world.labels == _check_class(world, cls)
    return _logsumexp(log_joint, mask) - np.log(world.weights[mask].sum())


def score(world: MixtureWorld, z, alpha_bar_t: float, cls: int | None = None) -> np.ndarray:
    """Exact gradient of log p_t(z) (or log p_t(z | cls)) with respect to ``z``."""
    ab = _check_alpha_bar(alpha_bar_t)
    z = _as_latent(world, z)
    log_joint, direction = _log_joint(world, z, ab)
    mask = None if cls is None else world.labels == _check_class(world, cls)
    resp = _softmax(log_joint, mask)
    return np.einsum("...k,...km->...m", resp, direction)


def epsilon_uncond(world: MixtureWorld, z_t, alpha_bar_t: float) -> np.ndarray:
    """Noise prediction of the unconditional branch: ``-sqrt(1 - ab) * score``."""
    ab = _check_alpha_bar(alpha_bar_t, allow_one=False)
    return -np.sqrt(1.0 - ab) * score(world, z_t, ab)


def epsilon_cond(world: MixtureWorld, z_t, alpha_bar_t: float, c: int) -> np.ndarray:
    ab = _check_alpha_bar(alpha_bar_t, allow_one=False)
    return -np.sqrt(1.0 - ab) * score(world, z_t, ab, _check_class(world, c))


def epsilon_uncond_jacobian(world: MixtureWorld, z_t, alpha_bar_t: float) -> np.ndarray:
    """d eps_uc / d z_t, i.e. ``-sqrt(1 - ab)`` times the Hessian of log p_t. Shape ``(..., m, m)``."""
    ab = _check_alpha_bar(alpha_bar_t, allow_one=False)
    z = _as_latent(world, z_t)
    log_joint, d = _log_joint(world, z, ab)
    resp = _softmax(log_joint)
    s = ab * world.variances + (1.0 - ab)
    mean_d = np.einsum("...k,...km->...m", resp, d)
    hess = (
        -np.einsum("...k,k->...", resp, 1.0 / s)[..., None, None] * np.eye(world.latent_dim)
        + np.einsum("...k,...ki,...kj->...ij", resp, d, d)
        - mean_d[..., :, None] * mean_d[..., None, :]
    )
    return -np.sqrt(1.0 - ab) * hess


def bayes_class_posterior(world: MixtureWorld, z_t, c: int, alpha_bar_t: float = 1.0) -> np.ndarray:
    """Exact p(c | z_t) under the noisy marginals at level ``alpha_bar_t`` (1 means clean data)."""
    return np.exp(bayes_log_posterior(world, z_t, c, alpha_bar_t))


def bayes_log_posterior(world: MixtureWorld, z_t, c: int, alpha_bar_t: float = 1.0) -> np.ndarray:
    ab = _check_alpha_bar(alpha_bar_t)
    z = _as_latent(world, z_t)
    log_joint, _ = _log_joint(world, z, ab)
    mask = world.labels == _check_class(world, c)
    return _logsumexp(log_joint, mask) - _logsumexp(log_joint)


def bayes_posteriors(world: MixtureWorld, z_t, alpha_bar_t: float = 1.0) -> np.ndarray:
    """All class posteriors, shape ``(..., class_count)``."""
    resp = responsibilities(world, z_t, alpha_bar_t)
    out = np.zeros(resp.shape[:-1] + (world.class_count,))
    for c in range(world.class_count):
        out[..., c] = resp[..., world.labels == c].sum(axis=-1)
    return out


def bayes_log_posterior_grad(world: MixtureWorld, z_t, alpha_bar_t: float, c: int) -> np.ndarray:
    """Gradient of log p(c | z_t): responsibility-difference weighted component scores."""
    ab = _check_alpha_bar(alpha_bar_t)
    z = _as_latent(world, z_t)
    log_joint, direction = _log_joint(world, z, ab)
    mask = world.labels == _check_class(world, c)
    delta = _softmax(log_joint, mask) - _softmax(log_joint)
    return np.einsum("...k,...km->...m", delta, direction)


def responsibilities(world: MixtureWorld, z, alpha_bar_t: float = 1.0) -> np.ndarray:
    ab = _check_alpha_bar(alpha_bar_t)
    log_joint, _ = _log_joint(world, _as_latent(world, z), ab)
    return _softmax(log_joint)


def oracle_features(world: MixtureWorld, z) -> np.ndarray:
    """Clean-data component responsibilities; plays the role of a self-supervised embedding."""
    return responsibilities(world, z, 1.0)


def attribute_probs(world: MixtureWorld, z) -> np.ndarray:
    return responsibilities(world, z, 1.0) @ world.attributes


def sample(world: MixtureWorld, n: int, seed, cls: int | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Draw ``n`` i.i.d. latent points and their class labels."""
    if int(n) != n or n < 1:
        raise InvalidArgument(f"n must be a positive integer, got {n!r}")
    idx = np.arange(world.n_components)
    if cls is not None:
        idx = np.flatnonzero(world.labels == _check_class(world, cls))
    p = world.weights[idx] / world.weights[idx].sum()
    rng = np.random.default_rng(seed)
    comp = idx[rng.choice(len(idx), size=int(n), p=p)]
    noise = rng.standard_normal((int(n), world.latent_dim))
    z = world.means[comp] + np.sqrt(world.variances[comp])[:, None] * noise
    return z, world.labels[comp].copy()


# -- serialization -----------------------------------------------------------

def world_to_dict(world: MixtureWorld) -> dict:
    return {
        "name": world.name,
        "latent_dim": world.latent_dim,
        "class_count": world.class_count,
        "components": [
            {
                "mean": list(c.mean),
                "variance": c.variance,
                "weight": c.weight,
                "class": c.class_label,
                "attributes": list(c.attributes),
            }
            for c in world.components
        ],
    }


def world_from_dict(d: dict) -> MixtureWorld:
    comps = [
        MixtureComponent(tuple(c["mean"]), c["variance"], c["weight"], c["class"], tuple(c.get("attributes", ())))
        for c in d["components"]
    ]
    world = make_world(comps, d.get("class_count"), d.get("name", "custom"))
    if world.latent_dim != d["latent_dim"]:
        raise InvalidArgument("latent_dim does not match component means")
    return world


def save_world(world: MixtureWorld, path) -> None:
    Path(path).write_text(json.dumps(world_to_dict(world), indent=2) + "\n")


def load_world(path) -> MixtureWorld:
    return world_from_dict(json.loads(Path(path).read_text()))


# -- presets -----------------------------------------------------------------

def _two_moons_gauss() -> MixtureWorld:
    # two Gaussians per moon; upper moon is class 0
    means = [(0.732, 0.5), (-2.732, 0.5), (-0.732, -0.5), (2.732, -0.5)]
    labels = [0, 0, 1, 1]
    attrs = [(0.9, 0.1, 0.1), (0.9, 0.9, 0.9), (0.1, 0.9, 0.1), (0.1, 0.1, 0.9)]
    comps = [MixtureComponent(mu, 0.09, 0.25, c, a) for mu, c, a in zip(means, labels, attrs)]
    return make_world(comps, 2, "two-moons-gauss")


def _triad() -> MixtureWorld:
    angles = np.deg2rad([90.0, 210.0, 330.0])
    attrs = [(0.9, 0.8, 0.3), (0.1, 0.2, 0.7), (0.1, 0.5, 0.9)]
    comps = [
        MixtureComponent((2 * np.cos(a), 2 * np.sin(a)), 0.25, 1 / 3, k, attrs[k])
        for k, a in enumerate(angles)
    ]
    # 1/3 * 3 is not exactly 1 in binary; fix the last weight
    comps[-1] = MixtureComponent(comps[-1].mean, 0.25, 1 - 2 / 3, 2, attrs[2])
    return make_world(comps, 3, "triad")


def _hyper8() -> MixtureWorld:
    rng = np.random.default_rng(8)
    m, n_cls = 16, 8
    centers = 1.5 * rng.standard_normal((n_cls, m))
    attrs = rng.uniform(0.05, 0.95, size=(n_cls, 4))
    comps = []
    for c in range(n_cls):
        for _ in range(2):
            mu = centers[c] + 0.5 * rng.standard_normal(m)
            comps.append(MixtureComponent(tuple(mu), 0.5, 1 / 16, c, tuple(attrs[c])))
    return make_world(comps, n_cls, "hyper8")


PRESETS = {
    "two-moons-gauss": _two_moons_gauss,
    "triad": _triad,
    "hyper8": _hyper8,
}


def get_world(name_or_path: str) -> MixtureWorld:
    """Preset by name, otherwise a JSON world file."""
    if name_or_path in PRESETS:
        return PRESETS[name_or_path]()
    path = Path(name_or_path)
    if not path.exists():
        raise InvalidArgument(f"unknown world preset or file: {name_or_path!r}")
    return load_world(path)
