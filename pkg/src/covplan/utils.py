"""Small shared helpers: canonical hashing, seeded substreams, matrix checks."""

from __future__ import annotations

import hashlib
import json

import numpy as np

from .errors import DomainError

SYM_ATOL = 1e-9


def np_to_list(value):
    """Recursively convert numpy scalars/arrays to plain Python for JSON."""
    if isinstance(value, np.ndarray):
        return value.tolist()
    if isinstance(value, (np.floating, np.integer)):
        return value.item()
    if isinstance(value, dict):
        return {k: np_to_list(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [np_to_list(v) for v in value]
    return value


def canonical_json(obj) -> str:
    return json.dumps(np_to_list(obj), sort_keys=True, separators=(",", ":"))


def content_hash(obj) -> str:
    """Stable sha256 over the canonical JSON form of ``obj``."""
    return hashlib.sha256(canonical_json(obj).encode("utf-8")).hexdigest()


def substream(seed: int, *names: str) -> np.random.Generator:
    """Derive a named, reproducible random stream from one root seed."""
    keys = [int(seed)]
    for name in names:
        digest = hashlib.sha256(str(name).encode("utf-8")).digest()
        keys.append(int.from_bytes(digest[:8], "big"))
    return np.random.default_rng(np.random.SeedSequence(keys))


def check_symmetric(mat: np.ndarray, name: str = "matrix") -> np.ndarray:
    mat = np.asarray(mat, dtype=float)
    if mat.ndim != 2 or mat.shape[0] != mat.shape[1]:
        raise DomainError(f"{name} must be square, got shape {mat.shape}")
    scale = max(1.0, float(np.abs(mat).max()))
    if np.abs(mat - mat.T).max() > SYM_ATOL * scale:
        raise DomainError(f"{name} is not symmetric")
    return 0.5 * (mat + mat.T)


def check_sym_psd(mat: np.ndarray, name: str = "matrix") -> np.ndarray:
    """Validate symmetric positive semidefinite; returns the symmetrized copy."""
    sym = check_symmetric(mat, name)
    eigvals = np.linalg.eigvalsh(sym)
    scale = max(1.0, float(eigvals[-1]))
    if eigvals[0] < -SYM_ATOL * scale:
        raise DomainError(f"{name} is not positive semidefinite (min eigenvalue {eigvals[0]:g})")
    return sym


def check_sym_pd(mat: np.ndarray, name: str = "matrix") -> np.ndarray:
    sym = check_symmetric(mat, name)
    try:
        np.linalg.cholesky(sym)
    except np.linalg.LinAlgError:
        raise DomainError(f"{name} is not positive definite") from None
    return sym


def wrap_angle(theta: float) -> float:
    """Wrap an angle to (-pi, pi]."""
    wrapped = float(np.arctan2(np.sin(theta), np.cos(theta)))
    if wrapped == -np.pi:
        wrapped = np.pi
    return wrapped
