"""Counterfactual evaluation metrics.

Validity (flip ratio, COUT, feature similarity), closeness (Lp),
realism (Frechet and split-Frechet distance) and attribute metrics
(MNAC, CD) computed against the synthetic oracles.
"""

from __future__ import annotations

import csv
import io
import json
from dataclasses import asdict, dataclass
from itertools import combinations
from typing import Callable, Sequence

import numpy as np

from . import world as wd
from .classifiers import Model, predict, predict_proba
from .errors import DegenerateInput, InvalidArgument
from .latent import AffineCodec, encode

CSV_COLUMNS = (
    "n",
    "flip_ratio",
    "cout_mean",
    "l1_mean",
    "l2_mean",
    "feat_sim_mean",
    "frechet",
    "split_frechet",
    "mnac_mean",
    "cd_mean",
)


@dataclass
class MetricReport:
    n: int
    flip_ratio: float
    cout_mean: float
    l1_mean: float
    l2_mean: float
    feat_sim_mean: float
    frechet: float
    split_frechet: float
    mnac_mean: float
    cd_mean: float

    def validate(self) -> None:
        checks = {
            "n": self.n >= 1,
            "flip_ratio": 0.0 <= self.flip_ratio <= 1.0,
            "cout_mean": -1.0 <= self.cout_mean <= 1.0,
            "l1_mean": self.l1_mean >= 0,
            "l2_mean": self.l2_mean >= 0,
            "feat_sim_mean": -1.0 - 1e-12 <= self.feat_sim_mean <= 1.0 + 1e-12,
            "frechet": self.frechet >= 0 or np.isnan(self.frechet),
            "split_frechet": self.split_frechet >= 0 or np.isnan(self.split_frechet),
            "mnac_mean": self.mnac_mean >= 0,
            "cd_mean": self.cd_mean >= 0 or np.isnan(self.cd_mean),
        }
        bad = [k for k, ok in checks.items() if not ok]
        if bad:
            raise InvalidArgument(f"metric values out of range: {bad}")

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2) + "\n"

    def to_csv(self, header: bool = True) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        if header:
            writer.writerow(CSV_COLUMNS)
        writer.writerow([repr(getattr(self, c)) for c in CSV_COLUMNS])
        return buf.getvalue()


def flip_ratio(records, classifier: Model) -> float:
    if len(records) == 0:
        raise InvalidArgument("flip_ratio needs at least one record")
    x_cf = np.array([r.x_CF for r in records])
    targets = np.array([r.y_CF for r in records])
    return float(np.mean(predict(classifier, x_cf) == targets))


def insertion_order(x_F, x_CF) -> np.ndarray:
    """Coordinates by normalized absolute change, descending; ties keep index order."""
    diff = np.abs(np.asarray(x_F, dtype=np.float64) - np.asarray(x_CF, dtype=np.float64))
    span = diff.max() - diff.min()
    mask = (diff - diff.min()) / span if span > 0 else np.zeros_like(diff)
    return np.argsort(-mask, kind="stable")


def perturbation_path(x_F, x_CF, n_steps: int) -> np.ndarray:
    """``x^(0) = x_F, ..., x^(T) = x_CF`` by inserting counterfactual coordinates in batches."""
    if int(n_steps) != n_steps or n_steps < 1:
        raise InvalidArgument(f"n_steps must be a positive integer, got {n_steps}")
    x_F = np.asarray(x_F, dtype=np.float64)
    x_CF = np.asarray(x_CF, dtype=np.float64)
    batches = np.array_split(insertion_order(x_F, x_CF), int(n_steps))
    path = [x_F.copy()]
    cur = x_F.copy()
    for idx in batches:
        cur[idx] = x_CF[idx]
        path.append(cur.copy())
    return np.array(path)


def aupc(probs: np.ndarray) -> float:
    """Trapezoid area under a perturbation curve sampled at T+1 equally spaced steps."""
    T = len(probs) - 1
    return float(np.sum(0.5 * (probs[:-1] + probs[1:])) / T)


def cout(x_F, x_CF, classifier: Model, y_F: int, y_CF: int, n_steps: int | None = None) -> float:
    """AUPC(y_CF) - AUPC(y_F) along the insertion path; ``n_steps`` defaults to one per coordinate."""
    if n_steps is None:
        n_steps = np.asarray(x_F).shape[-1]
    probs = predict_proba(classifier, perturbation_path(x_F, x_CF, n_steps))
    return aupc(probs[:, y_CF]) - aupc(probs[:, y_F])


def lp_norms(x_F, x_CF, p: int = 2) -> float:
    if p not in (1, 2):
        raise InvalidArgument(f"p must be 1 or 2, got {p}")
    return float(np.linalg.norm(np.asarray(x_F, dtype=np.float64) - np.asarray(x_CF, dtype=np.float64), ord=p))


def feature_similarity(x_F, x_CF, feature_fn: Callable[[np.ndarray], np.ndarray]) -> float:
    a, b = feature_fn(x_F), feature_fn(x_CF)
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0 or nb == 0:
        raise DegenerateInput("zero feature vector; cosine similarity undefined")
    return float(a @ b / (na * nb))


def _sqrt_psd(mat: np.ndarray) -> np.ndarray:
    vals, vecs = np.linalg.eigh(0.5 * (mat + mat.T))
    return (vecs * np.sqrt(np.clip(vals, 0.0, None))) @ vecs.T


def frechet_from_moments(mu1, cov1, mu2, cov2) -> float:
    """``|mu1 - mu2|^2 + Tr(S1 + S2 - 2 (S1 S2)^(1/2))``.

    The trace of ``(S1 S2)^(1/2)`` is taken from the eigenvalues of the
    symmetric product ``S1^(1/2) S2 S1^(1/2)``, negatives clamped to 0.
    """
    root1 = _sqrt_psd(cov1)
    middle = root1 @ cov2 @ root1
    vals = np.linalg.eigvalsh(0.5 * (middle + middle.T))
    tr_sqrt = np.sum(np.sqrt(np.clip(vals, 0.0, None)))
    diff = np.asarray(mu1) - np.asarray(mu2)
    return float(max(diff @ diff + np.trace(cov1) + np.trace(cov2) - 2.0 * tr_sqrt, 0.0))


def frechet(set_a, set_b) -> float:
    a = np.asarray(set_a, dtype=np.float64)
    b = np.asarray(set_b, dtype=np.float64)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[1]:
        raise InvalidArgument("frechet expects two (N, d) arrays of equal d")
    d = a.shape[1]
    if a.shape[0] < d + 1 or b.shape[0] < d + 1:
        raise InvalidArgument(f"each set needs at least {d + 1} samples")
    return frechet_from_moments(
        a.mean(axis=0), np.atleast_2d(np.cov(a, rowvar=False)), b.mean(axis=0), np.atleast_2d(np.cov(b, rowvar=False))
    )


def split_frechet(factuals, counterfactuals) -> float:
    """Average of Frechet(CF of even half, factuals of odd half) and the reverse."""
    f = np.asarray(factuals, dtype=np.float64)
    c = np.asarray(counterfactuals, dtype=np.float64)
    if f.shape != c.shape:
        raise InvalidArgument("factuals and counterfactuals must be paired")
    even, odd = slice(0, None, 2), slice(1, None, 2)
    return 0.5 * (frechet(c[even], f[odd]) + frechet(c[odd], f[even]))


def _attributes(world: wd.MixtureWorld, x, codec: AffineCodec | None) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    return wd.attribute_probs(world, encode(codec, x) if codec is not None else x)


def mnac(pairs: Sequence, world: wd.MixtureWorld, beta: float = 0.5, codec: AffineCodec | None = None) -> float:
    """Mean number of attributes whose thresholded oracle prediction changes.

    ``pairs`` holds ``(x_F, x_CF)``; ambient vectors are encoded with ``codec`` when given.
    """
    if world.n_attributes < 1:
        raise InvalidArgument("world has no attributes")
    if len(pairs) == 0:
        raise InvalidArgument("mnac needs at least one pair")
    f = _attributes(world, [p[0] for p in pairs], codec)
    c = _attributes(world, [p[1] for p in pairs], codec)
    return float(np.mean(np.sum((f > beta) != (c > beta), axis=1)))


def _pearson_or_zero(a: np.ndarray, b: np.ndarray) -> float:
    a = a - a.mean()
    b = b - b.mean()
    den = np.sqrt((a @ a) * (b @ b))
    return 0.0 if den == 0 else float(a @ b / den)


def pairwise_deltas(probs: np.ndarray) -> np.ndarray:
    """``delta[a][(i, j)] = p_i^a - p_j^a`` over unordered pairs ``i < j``; shape ``(A, P)``."""
    i, j = np.array(list(combinations(range(len(probs)), 2))).T
    return (probs[i] - probs[j]).T


def correlation_profile(probs: np.ndarray, q: int) -> np.ndarray:
    deltas = pairwise_deltas(probs)
    return np.array([_pearson_or_zero(deltas[q], deltas[a]) for a in range(deltas.shape[0])])


def cd(pairs: Sequence, world: wd.MixtureWorld, q: int = 0, codec: AffineCodec | None = None) -> float:
    """Correlation difference for query attribute ``q``.

    One Pearson correlation per attribute over all sample pairs, for the
    factual and counterfactual sets separately; the outer sample mean
    therefore reduces to that single value.
    """
    if len(pairs) < 3:
        raise InvalidArgument("cd needs at least 3 pairs")
    if world.n_attributes < 2:
        raise InvalidArgument("cd needs at least 2 attributes")
    if not 0 <= q < world.n_attributes:
        raise InvalidArgument(f"query attribute out of range: {q}")
    f = _attributes(world, [p[0] for p in pairs], codec)
    c = _attributes(world, [p[1] for p in pairs], codec)
    df, dc = pairwise_deltas(f), pairwise_deltas(c)
    if np.all(np.ptp(df, axis=1) == 0) and np.all(np.ptp(dc, axis=1) == 0):
        raise DegenerateInput("all attribute deltas are constant")
    return float(np.sum(np.abs(correlation_profile(c, q) - correlation_profile(f, q))))


def evaluate(
    records,
    classifier: Model,
    world: wd.MixtureWorld,
    codec: AffineCodec,
    reference=None,
    cout_steps: int | None = None,
    beta: float = 0.5,
    query_attribute: int = 0,
    features: str = "raw",
) -> MetricReport:
    """Full report over a list of records.

    ``reference`` is the sample set the counterfactuals' Frechet distance is
    measured against (defaults to the factuals). ``features="oracle"``
    switches both Frechet metrics to oracle features instead of raw
    ambient coordinates.
    """
    if len(records) == 0:
        raise InvalidArgument("no records to evaluate")
    xf = np.array([r.x_F for r in records])
    xc = np.array([r.x_CF for r in records])
    pairs = list(zip(xf, xc))

    def feats(x):
        return wd.oracle_features(world, encode(codec, x))

    couts = [cout(r.x_F, r.x_CF, classifier, r.y_F, r.y_CF, cout_steps) for r in records]
    sims = [feature_similarity(r.x_F, r.x_CF, feats) for r in records]
    ref = xf if reference is None else np.asarray(reference, dtype=np.float64)
    embed = feats if features == "oracle" else (lambda x: x)
    # too few samples for a covariance fit leaves the realism metrics undefined
    try:
        fd = frechet(embed(xc), embed(ref))
    except InvalidArgument:
        fd = float("nan")
    try:
        sfd = split_frechet(embed(xf), embed(xc))
    except InvalidArgument:
        sfd = float("nan")
    try:
        cd_val = cd(pairs, world, query_attribute, codec) if world.n_attributes >= 2 else float("nan")
    except (InvalidArgument, DegenerateInput):
        cd_val = float("nan")
    report = MetricReport(
        n=len(records),
        flip_ratio=flip_ratio(records, classifier),
        cout_mean=float(np.mean(couts)),
        l1_mean=float(np.mean([lp_norms(a, b, 1) for a, b in pairs])),
        l2_mean=float(np.mean([lp_norms(a, b, 2) for a, b in pairs])),
        feat_sim_mean=float(np.mean(sims)),
        frechet=fd,
        split_frechet=sfd,
        mnac_mean=mnac(pairs, world, beta, codec) if world.n_attributes else 0.0,
        cd_mean=cd_val,
    )
    report.validate()
    return report
