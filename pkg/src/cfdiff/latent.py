"""Affine encoder/decoder pair standing in for a latent-diffusion autoencoder.

``decode(z) = W.T @ z + b`` with orthonormal rows in ``W``, so
``encode(x) = W @ (x - b)`` is an exact left inverse and inputs that are
off the decoder's range are orthogonally projected onto it.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import InvalidArgument


@dataclass(frozen=True, eq=False)
class AffineCodec:
    W: np.ndarray  # (m, n)
    b: np.ndarray  # (n,)
    seed: int | None = None
    identity: bool = False

    @property
    def latent_dim(self) -> int:
        return self.W.shape[0]

    @property
    def ambient_dim(self) -> int:
        return self.W.shape[1]

    def to_dict(self) -> dict:
        return {"ambient_dim": self.ambient_dim, "latent_dim": self.latent_dim, "seed": self.seed, "identity": self.identity}


def _freeze(codec: AffineCodec) -> AffineCodec:
    codec.W.setflags(write=False)
    codec.b.setflags(write=False)
    return codec


def make_codec(ambient_dim: int, latent_dim: int, seed: int) -> AffineCodec:
    """Random codec: QR-orthonormalized Gaussian rows and a small Gaussian offset."""
    if not 1 <= latent_dim <= ambient_dim:
        raise InvalidArgument(f"need 1 <= latent_dim <= ambient_dim, got {latent_dim}, {ambient_dim}")
    rng = np.random.default_rng(seed)
    q, r = np.linalg.qr(rng.standard_normal((ambient_dim, latent_dim)))
    q = q * np.sign(np.diag(r))  # make the factorization unique
    b = 0.1 * rng.standard_normal(ambient_dim)
    return _freeze(AffineCodec(np.ascontiguousarray(q.T), b, int(seed), False))


def identity_codec(dim: int) -> AffineCodec:
    if dim < 1:
        raise InvalidArgument(f"dimension must be >= 1, got {dim}")
    return _freeze(AffineCodec(np.eye(dim), np.zeros(dim), None, True))


def codec_from_dict(d: dict) -> AffineCodec:
    if d.get("identity", False):
        if d.get("latent_dim", d["ambient_dim"]) != d["ambient_dim"]:
            raise InvalidArgument("identity codec requires latent_dim == ambient_dim")
        return identity_codec(d["ambient_dim"])
    return make_codec(d["ambient_dim"], d["latent_dim"], d.get("seed", 0))


def _check(arr, dim: int, what: str) -> np.ndarray:
    arr = np.asarray(arr, dtype=np.float64)
    if arr.shape[-1:] != (dim,):
        raise InvalidArgument(f"{what} must have trailing dimension {dim}, got shape {arr.shape}")
    return arr


def encode(codec: AffineCodec, x) -> np.ndarray:
    x = _check(x, codec.ambient_dim, "ambient vector")
    return (x - codec.b) @ codec.W.T


def decode(codec: AffineCodec, z) -> np.ndarray:
    z = _check(z, codec.latent_dim, "latent vector")
    return z @ codec.W + codec.b


def pullback_grad(codec: AffineCodec, g_ambient) -> np.ndarray:
    """Apply the decoder's Jacobian transpose (``W``) to an ambient gradient."""
    g = _check(g_ambient, codec.ambient_dim, "ambient gradient")
    return g @ codec.W.T
