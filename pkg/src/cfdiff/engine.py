"""Counterfactual generation: abduction followed by guided DDIM denoising.

The factual is encoded, noised to a start position on the sampling ladder
and denoised with a guided noise prediction built from the exact world
oracles, the target classifier and the distance to the factual. The
loop always runs the full remaining ladder.

Episode randomness: a batch with master seed ``s`` gives episode ``i`` the
integer seed ``derive_seed(s, i)``, taken from
``SeedSequence(s, spawn_key=(i,))``. Each episode owns a private
generator, so results do not depend on how episodes are spread over
worker threads.
"""

from __future__ import annotations

import json
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from . import guidance as gd
from . import world as wd
from .classifiers import Model, logits, predict, predict_proba, input_grad
from .errors import DegenerateInput, InvalidArgument, NumericalFailure
from .latent import AffineCodec, decode, encode
from .schedule import NoiseSchedule


@dataclass
class TrajectoryStep:
    t: int
    z_t: np.ndarray
    x0_hat: np.ndarray
    logits: np.ndarray
    consensus_pass_fraction: float

    def to_dict(self) -> dict:
        return {
            "t": self.t,
            "z_t": self.z_t.tolist(),
            "x0_hat": self.x0_hat.tolist(),
            "logits": self.logits.tolist(),
            "consensus_pass_fraction": self.consensus_pass_fraction,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "TrajectoryStep":
        return cls(d["t"], np.asarray(d["z_t"]), np.asarray(d["x0_hat"]), np.asarray(d["logits"]), d["consensus_pass_fraction"])


@dataclass
class CounterfactualRecord:
    x_F: np.ndarray
    y_F: int
    y_CF: int
    x_CF: np.ndarray
    seed: int
    config: dict
    trajectory: list[TrajectoryStep] | None = None
    metrics: dict = field(default_factory=dict)
    record_id: int = 0

    def to_dict(self, trajectory_ref: str | None = None) -> dict:
        return {
            "id": self.record_id,
            "seed": self.seed,
            "y_F": self.y_F,
            "y_CF": self.y_CF,
            "x_F": self.x_F.tolist(),
            "x_CF": self.x_CF.tolist(),
            "config": self.config,
            "trajectory_ref": trajectory_ref,
            "metrics": self.metrics,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "CounterfactualRecord":
        return cls(
            np.asarray(d["x_F"], dtype=np.float64),
            int(d["y_F"]),
            int(d["y_CF"]),
            np.asarray(d["x_CF"], dtype=np.float64),
            int(d["seed"]),
            d.get("config", {}),
            None,
            d.get("metrics", {}),
            int(d.get("id", 0)),
        )


def derive_seed(master_seed: int, index: int) -> int:
    return int(np.random.SeedSequence(int(master_seed), spawn_key=(int(index),)).generate_state(1, np.uint64)[0])


def start_position(schedule: NoiseSchedule, t_start_fraction: float) -> int:
    """Ladder position nearest ``t_start_fraction * len(ladder)``, clipped to the ladder."""
    if not 0.0 <= t_start_fraction <= 1.0:
        raise InvalidArgument(f"t_start_fraction must lie in [0, 1], got {t_start_fraction}")
    n = len(schedule.timesteps)
    return int(min(max(np.floor(t_start_fraction * n + 0.5), 0), n - 1))


def abduct(x_F, schedule: NoiseSchedule, t_start: int, codec: AffineCodec, seed) -> np.ndarray:
    """Forward-noise the encoded factual to ladder position ``t_start``.

    ``seed`` may be an int or a ``np.random.Generator``; one standard-normal
    vector is drawn from it.
    """
    if int(t_start) != t_start or not 0 <= t_start < len(schedule.timesteps):
        raise InvalidArgument(f"t_start must be a ladder position in [0, {len(schedule.timesteps)}), got {t_start}")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    z0 = encode(codec, x_F)
    ab = schedule.alpha_bar[schedule.timesteps[int(t_start)]]
    noise = rng.standard_normal(z0.shape)
    return np.sqrt(ab) * z0 + np.sqrt(1.0 - ab) * noise


def ddim_step(z_t, eps_hat, alpha_bar_t: float, alpha_bar_prev: float, sigma_t: float = 0.0, noise=None) -> np.ndarray:
    if not (0.0 < alpha_bar_t <= 1.0 and 0.0 < alpha_bar_prev <= 1.0):
        raise InvalidArgument("alpha_bar values must lie in (0, 1]")
    if sigma_t < 0 or sigma_t**2 > 1.0 - alpha_bar_prev + 1e-15:
        raise InvalidArgument(f"sigma_t={sigma_t} violates 0 <= sigma_t^2 <= 1 - alpha_bar_prev")
    x0 = gd.predict_x0(z_t, eps_hat, alpha_bar_t)
    out = np.sqrt(alpha_bar_prev) * x0 + np.sqrt(max(1.0 - alpha_bar_prev - sigma_t**2, 0.0)) * np.asarray(eps_hat)
    if sigma_t > 0:
        if noise is None:
            raise InvalidArgument("sigma_t > 0 requires a noise draw")
        out = out + sigma_t * np.asarray(noise)
    return out


def _unit(v: np.ndarray) -> np.ndarray | None:
    n = np.linalg.norm(v)
    return None if n < gd.NORM_FLOOR else v / n


def guided_epsilon(
    z_t: np.ndarray,
    alpha_bar_t: float,
    y_CF: int,
    x_F: np.ndarray,
    world: wd.MixtureWorld,
    codec: AffineCodec,
    classifier: Model,
    config: gd.GuidanceConfig,
) -> tuple[np.ndarray, dict]:
    """One step of guidance: returns the guided noise prediction and diagnostics."""
    eps_uc = wd.epsilon_uncond(world, z_t, alpha_bar_t)
    eps_c = wd.epsilon_cond(world, z_t, alpha_bar_t, y_CF)
    x0 = gd.predict_x0(z_t, eps_uc, alpha_bar_t)
    info = {"x0": x0, "eps_uc": eps_uc, "eps_c": eps_c, "cls": None, "implicit": eps_c - eps_uc}
    if config.mode == "uncond-only":
        info["pass_fraction"] = 0.0
        return eps_uc, info

    through = config.grad_through_score
    cls = gd.cls_score(z_t, alpha_bar_t, y_CF, classifier, codec, world, eps_uc, through)
    dist = gd.dist_score(z_t, alpha_bar_t, x_F, codec, world, config.distance, eps_uc, through)
    info["cls"] = cls
    if config.mode == "consensus":
        consensus = gd.consensus_filter(cls, info["implicit"], config.gamma_deg, config.block_size, config.overwrite)
        info["pass_fraction"] = float(np.mean(gd.consensus_mask(cls, info["implicit"], config.gamma_deg, config.block_size)))
    elif config.mode == "none":
        consensus = cls
        info["pass_fraction"] = 1.0
    else:  # cone: Bayes-oracle gradient at the clean estimate plays the robust model
        consensus, info["pass_fraction"] = _cone_guidance(cls, x0, y_CF, world, config)
    return gd.assemble_epsilon(eps_uc, eps_c, consensus, dist, config.eta, config.lambda_c, config.lambda_d), info


def _cone_guidance(cls, x0, y_CF, world, config) -> tuple[np.ndarray, float]:
    v = _unit(cls)
    if v is None:
        return np.zeros_like(cls), 1.0
    w = _unit(-wd.bayes_log_posterior_grad(world, x0, 1.0, y_CF))
    if w is None:
        return cls, 1.0
    aligned = float(gd.vector_angle(w, v)) <= config.cone_alpha_deg
    try:
        proj = gd.cone_project(v, w, config.cone_alpha_deg, config.cone_aligned_returns_w)
    except DegenerateInput:
        return np.zeros_like(cls), 0.0
    return proj * np.linalg.norm(cls), 1.0 if aligned else 0.0


def generate(
    x_F,
    y_CF: int,
    world: wd.MixtureWorld,
    codec: AffineCodec,
    classifier: Model,
    schedule: NoiseSchedule,
    config: gd.GuidanceConfig,
    t_start_fraction: float = 0.5,
    seed: int = 0,
    record_trajectory: bool = False,
    y_F: int | None = None,
    record_id: int = 0,
    on_step: Callable[[int, dict], None] | None = None,
) -> CounterfactualRecord:
    """Produce one counterfactual for ``x_F`` toward class ``y_CF``.

    ``y_F`` defaults to the classifier's prediction at ``x_F``. ``on_step``
    receives ``(t, info)`` after the guidance terms of every step.
    """
    if int(y_CF) != y_CF or not 0 <= y_CF < world.class_count:
        raise InvalidArgument(f"y_CF must be a class in [0, {world.class_count}), got {y_CF!r}")
    x_F = np.asarray(x_F, dtype=np.float64)
    y_CF = int(y_CF)
    if y_F is None:
        y_F = predict(classifier, x_F)
    rng = np.random.default_rng(seed)
    ladder = schedule.timesteps
    pos = start_position(schedule, t_start_fraction)
    z = abduct(x_F, schedule, pos, codec, rng)
    steps = [] if record_trajectory else None

    for i in range(pos, 0, -1):
        t, t_prev = int(ladder[i]), int(ladder[i - 1])
        ab, abp = float(schedule.alpha_bar[t]), float(schedule.alpha_bar[t_prev])
        eps_hat, info = guided_epsilon(z, ab, y_CF, x_F, world, codec, classifier, config)
        if on_step is not None:
            on_step(t, info)
        if steps is not None:
            x0_amb = decode(codec, info["x0"])
            steps.append(TrajectoryStep(t, z.copy(), x0_amb, logits(classifier, x0_amb), info["pass_fraction"]))
        sigma = schedule.sigma(t, t_prev)
        noise = rng.standard_normal(z.shape) if sigma > 0 else None
        z = ddim_step(z, eps_hat, ab, abp, sigma, noise)
        if not np.all(np.isfinite(z)):
            raise NumericalFailure(f"non-finite latent state after the step from t={t} to t={t_prev}")

    snapshot = {
        "guidance": config.to_dict(),
        "schedule": schedule.to_dict(),
        "t_start_fraction": t_start_fraction,
        "start_position": pos,
    }
    return CounterfactualRecord(x_F, int(y_F), y_CF, decode(codec, z), int(seed), snapshot, steps, {}, record_id)


def generate_diverse(x_F, y_CF, world, codec, classifier, schedule, config, seeds, t_start_fraction=0.5, record_trajectory=False):
    """One counterfactual per abduction seed, identical configuration otherwise."""
    seeds = list(seeds)
    if not seeds:
        raise InvalidArgument("generate_diverse needs at least one seed")
    return [
        generate(x_F, y_CF, world, codec, classifier, schedule, config, t_start_fraction, s, record_trajectory, record_id=i)
        for i, s in enumerate(seeds)
    ]


def worker_count(default: int | None = None) -> int:
    env = os.environ.get("CFDIFF_THREADS")
    if env:
        return max(1, int(env))
    return default or 1


def generate_batch(
    factuals: np.ndarray,
    targets,
    world,
    codec,
    classifier,
    schedule,
    config,
    t_start_fraction: float = 0.5,
    master_seed: int = 0,
    record_trajectory: bool = False,
    threads: int | None = None,
) -> list[CounterfactualRecord]:
    """Run one episode per factual; episode ``i`` uses ``derive_seed(master_seed, i)``."""

    def run(i):
        return generate(
            factuals[i], int(targets[i]), world, codec, classifier, schedule, config,
            t_start_fraction, derive_seed(master_seed, i), record_trajectory, record_id=i,
        )

    n_workers = threads or worker_count()
    if n_workers <= 1:
        return [run(i) for i in range(len(factuals))]
    with ThreadPoolExecutor(max_workers=n_workers) as pool:
        return list(pool.map(run, range(len(factuals))))


# -- target selection --------------------------------------------------------------

TARGET_MODES = ("posterior-topk", "feature-topk", "distance-topk", "fixed")


def select_target_class(
    x_F,
    y_F: int,
    world: wd.MixtureWorld,
    classifier: Model,
    codec: AffineCodec,
    mode: str = "posterior-topk",
    k: int = 1,
    seed=0,
    fixed_class: int | None = None,
) -> int:
    """Pick a counterfactual class other than ``y_F``.

    ``posterior-topk`` ranks by the classifier's softmax at ``x_F``;
    ``feature-topk`` by cosine similarity between oracle features of the
    encoded factual and of each class mean; ``distance-topk`` by distance
    between class means. The choice is uniform among the top ``k``.
    """
    if mode == "fixed":
        if fixed_class is None or not 0 <= fixed_class < world.class_count:
            raise InvalidArgument("fixed mode needs a valid fixed_class")
        return int(fixed_class)
    if not 1 <= k < world.class_count:
        raise InvalidArgument(f"k must lie in [1, {world.class_count - 1}], got {k}")
    if mode == "posterior-topk":
        scores = predict_proba(classifier, x_F)
    elif mode == "feature-topk":
        f = wd.oracle_features(world, encode(codec, x_F))
        g = wd.oracle_features(world, world.class_means())
        scores = (g @ f) / (np.linalg.norm(g, axis=1) * np.linalg.norm(f))
    elif mode == "distance-topk":
        means = world.class_means()
        scores = -np.linalg.norm(means - means[y_F], axis=1)
    else:
        raise InvalidArgument(f"unknown target mode {mode!r}")
    candidates = [c for c in np.argsort(-scores, kind="stable") if c != y_F][:k]
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    return int(candidates[rng.integers(len(candidates))])


# -- raw-gradient baseline -----------------------------------------------------------

def adversarial_baseline(x_F, y_CF, classifier: Model, steps: int = 100, step_size: float = 0.05, budget_l2: float = 1.0) -> np.ndarray:
    """L2 projected gradient descent on cross-entropy toward ``y_CF`` in ambient space.

    Steps follow the normalized gradient; after each step the perturbation
    is projected back onto the ball of radius ``budget_l2`` around ``x_F``.
    Works on a single vector or a batch.
    """
    if budget_l2 < 0:
        raise InvalidArgument("budget_l2 must be non-negative")
    x_F = np.asarray(x_F, dtype=np.float64)
    if budget_l2 == 0:
        return x_F.copy()
    x = x_F.copy()
    for _ in range(steps):
        g = input_grad(classifier, x, y_CF)
        gn = np.linalg.norm(g, axis=-1, keepdims=True)
        x = x - step_size * g / np.where(gn == 0, 1.0, gn)
        delta = x - x_F
        dn = np.linalg.norm(delta, axis=-1, keepdims=True)
        x = x_F + delta * np.minimum(1.0, budget_l2 / np.where(dn == 0, 1.0, dn))
    return x


def adversarial_at_flip_ratio(
    x_F, y_CF, classifier: Model, target_flip_ratio: float, steps: int = 100,
    budget_hi: float = 8.0, iters: int = 30,
) -> tuple[np.ndarray, float]:
    """Smallest L2 budget (by bisection) whose PGD batch reaches ``target_flip_ratio``.

    Step size is fixed at budget/20. Returns the perturbed batch and the budget.
    """
    x_F = np.atleast_2d(np.asarray(x_F, dtype=np.float64))
    y_CF = np.asarray(y_CF)

    def attack(b):
        x = adversarial_baseline(x_F, y_CF, classifier, steps, b / 20.0, b)
        return x, float(np.mean(np.atleast_1d(predict(classifier, x)) == y_CF))

    x_hi, fr_hi = attack(budget_hi)
    if fr_hi < target_flip_ratio:
        return x_hi, budget_hi
    lo, hi = 0.0, budget_hi
    for _ in range(iters):
        mid = 0.5 * (lo + hi)
        x_mid, fr_mid = attack(mid)
        if fr_mid >= target_flip_ratio:
            hi, x_hi = mid, x_mid
        else:
            lo = mid
    return x_hi, hi


# -- JSONL I/O ---------------------------------------------------------------------

def write_records(path, records: list[CounterfactualRecord], trajectory_path=None) -> None:
    path = Path(path)
    lines, traj_lines = [], []
    for rec in records:
        ref = None
        if trajectory_path is not None and rec.trajectory is not None:
            ref = f"{Path(trajectory_path).name}#{rec.record_id}"
            traj_lines.append(json.dumps({"id": rec.record_id, "steps": [s.to_dict() for s in rec.trajectory]}))
        lines.append(json.dumps(rec.to_dict(ref), sort_keys=True))
    path.write_text("".join(line + "\n" for line in lines))
    if trajectory_path is not None:
        Path(trajectory_path).write_text("".join(line + "\n" for line in traj_lines))


def read_records(path) -> list[CounterfactualRecord]:
    out = []
    for line in Path(path).read_text().splitlines():
        if line.strip():
            out.append(CounterfactualRecord.from_dict(json.loads(line)))
    return out


def read_trajectories(path) -> dict[int, list[TrajectoryStep]]:
    out = {}
    for line in Path(path).read_text().splitlines():
        if line.strip():
            d = json.loads(line)
            out[int(d["id"])] = [TrajectoryStep.from_dict(s) for s in d["steps"]]
    return out
