"""Temperature-scaled cosine softmax, cross-entropy alignment loss and its gradients."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .embedding import ClassifierMatrix, DegenerateEmbeddingError, TemperatureParam, as_embedding


@dataclass(frozen=True)
class GradientBundle:
    d_embedding: np.ndarray
    d_log_scale: float


def _check(e, C: ClassifierMatrix) -> np.ndarray:
    e = as_embedding(e)
    if e.size != C.dim:
        raise ValueError(f"embedding dimension {e.size} != classifier dimension {C.dim}")
    if np.linalg.norm(e) == 0.0:
        raise DegenerateEmbeddingError("degenerate embedding: zero norm")
    return e


def _check_target(t: int, C: ClassifierMatrix) -> int:
    if not 0 <= int(t) < C.n_classes:
        raise IndexError(f"target {t} out of range for {C.n_classes} classes")
    return int(t)


def cosines(E: np.ndarray, C: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Row-wise cosines of ``E`` (m, D) against unit columns of ``C`` (D, n).

    Returns the cosine matrix (m, n) and the row norms (m,).
    """
    norms = np.linalg.norm(E, axis=1)
    if np.any(norms == 0.0):
        raise DegenerateEmbeddingError("degenerate embedding: zero norm")
    return (E @ C) / norms[:, None], norms


def log_softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=-1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def target_nll(logits: np.ndarray, targets: np.ndarray) -> np.ndarray:
    """-log softmax(logits)[t] per row, accurate to full relative precision as the loss -> 0."""
    rows = np.arange(logits.shape[0])
    rel = logits - logits[rows, targets][:, None]
    rel[rows, targets] = -np.inf
    top = np.maximum(rel.max(axis=1), 0.0)
    rest = np.exp(rel - top[:, None]).sum(axis=1)
    # top == 0 means the target holds the maximum: log(1 + rest) via log1p
    return np.where(top > 0.0, top + np.log(np.exp(-top) + rest), np.log1p(rest))


def batch_scores(E: np.ndarray, C: np.ndarray, scale: float) -> np.ndarray:
    cos, _ = cosines(E, C)
    return np.exp(log_softmax(cos * scale))


def batch_loss_grad(
    E: np.ndarray, C: np.ndarray, scale: float, targets: np.ndarray
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Vectorized loss and gradients for many embeddings at once.

    Returns per-row losses (m,), d loss / d E (m, D) and d loss / d log_scale (m,).
    The clip-boundary rule for the temperature is applied by the caller.
    """
    targets = np.asarray(targets, dtype=np.intp)
    cos, norms = cosines(E, C)
    logp = log_softmax(cos * scale)
    rows = np.arange(E.shape[0])
    losses = target_nll(cos * scale, targets)
    delta = np.exp(logp)
    # s_t - 1 as minus the other probabilities; avoids cancellation when s_t -> 1
    delta[rows, targets] = 0.0
    delta[rows, targets] = -delta.sum(axis=1)
    # d cos_i / d e = (c_i - cos_i * e / |e|) / |e|
    coef = delta * scale
    dE = (coef @ C.T - np.sum(coef * cos, axis=1)[:, None] * E / norms[:, None]) / norms[:, None]
    dlog = np.sum(delta * cos, axis=1) * scale
    return losses, dE, dlog


def similarity_scores(e, C: ClassifierMatrix, tau: TemperatureParam) -> np.ndarray:
    e = _check(e, C)
    return batch_scores(e[None, :], C.matrix, tau.scale)[0]


def alignment_loss(e, C: ClassifierMatrix, tau: TemperatureParam, t: int) -> float:
    e = _check(e, C)
    t = _check_target(t, C)
    cos, _ = cosines(e[None, :], C.matrix)
    return float(target_nll(cos * tau.scale, np.array([t]))[0])


def temperature_grad(d_log_scale: float, tau: TemperatureParam) -> float:
    """Zero the temperature gradient when a descent step would push past the clip."""
    if tau.at_boundary() and d_log_scale < 0.0:
        return 0.0
    return d_log_scale


def alignment_loss_grad(e, C: ClassifierMatrix, tau: TemperatureParam, t: int) -> GradientBundle:
    e = _check(e, C)
    t = _check_target(t, C)
    _, dE, dlog = batch_loss_grad(e[None, :], C.matrix, tau.scale, np.array([t]))
    return GradientBundle(dE[0], temperature_grad(float(dlog[0]), tau))
