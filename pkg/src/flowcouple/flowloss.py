"""Flow-matching loss, content consistency loss (CCL) and their weighted sum.

All gradients here are with respect to the network output ``pred``; the
trainer pushes them through :meth:`VelocityNet.backward_batch`.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .coupling import CouplingSample, EditInstance
from .numcore import ContractError

NORM_EPS = 1e-12
DEFAULT_ALPHA = 0.1


@dataclass
class LossBreakdown:
    fm: float
    ccl: float
    alpha: float
    total: float
    ccl_degenerate: bool = False

    @classmethod
    def of(cls, fm: float, ccl: float, alpha: float, degenerate: bool = False) -> "LossBreakdown":
        return cls(float(fm), float(ccl), float(alpha), float(fm + alpha * ccl), degenerate)


def target_velocity(s: CouplingSample) -> np.ndarray:
    return s.x1 - s.x0


def fm_loss(pred, s: CouplingSample) -> float:
    """Mean squared error against the straight-path velocity."""
    pred = np.asarray(pred, dtype=np.float64)
    target = target_velocity(s)
    if pred.shape != target.shape:
        raise ContractError(f"prediction has length {pred.shape[0]}, expected {target.shape[0]}")
    r = pred - target
    return float(r @ r) / r.size


def fm_grad(pred, s: CouplingSample) -> np.ndarray:
    pred = np.asarray(pred, dtype=np.float64)
    return 2.0 * (pred - target_velocity(s)) / pred.size


def slice_outputs(pred) -> tuple[np.ndarray, np.ndarray]:
    """Split a ``2*d_s`` output into its source and target halves."""
    pred = np.asarray(pred, dtype=np.float64)
    n = pred.shape[-1]
    if n % 2:
        raise ContractError(f"prediction length {n} is odd; cannot split into source/target halves")
    return pred[..., : n // 2], pred[..., n // 2:]


def _unit(v, norm_eps: float):
    norm = np.linalg.norm(v, axis=-1, keepdims=True)
    return v / (norm + norm_eps), norm


def _ccl_rows(preds, texts, norm_eps: float):
    z_src, z_tgt = slice_outputs(preds)
    if texts.shape != z_src.shape:
        raise ContractError(f"text embedding dimension {texts.shape[-1]} != d_s = {z_src.shape[-1]}")
    # one latent block per half, so mean-pooling over blocks is the identity
    delta = z_tgt - z_src
    text_hat, _ = _unit(texts, norm_eps)
    delta_hat, delta_norm = _unit(delta, norm_eps)
    diff = text_hat - delta_hat
    return np.einsum("ij,ij->i", diff, diff), diff, delta, delta_norm


def ccl(pred, inst: EditInstance, norm_eps: float = NORM_EPS) -> float:
    """Squared distance between the unit text embedding and the unit delta of
    the predicted target/source halves. Lies in [0, 4]."""
    value, *_ = _ccl_rows(np.atleast_2d(pred), np.atleast_2d(inst.x_text), norm_eps)
    return float(value[0])


def ccl_is_degenerate(pred) -> bool:
    """True when the predicted halves coincide, leaving the delta direction undefined."""
    z_src, z_tgt = slice_outputs(pred)
    return not np.any(z_tgt - z_src)


def ccl_backward_batch(preds, texts, norm_eps: float = NORM_EPS):
    """Per-row CCL values and their gradients w.r.t. ``preds`` (shape ``(B, 2*d_s)``)."""
    preds = np.atleast_2d(np.asarray(preds, dtype=np.float64))
    texts = np.atleast_2d(np.asarray(texts, dtype=np.float64))
    value, diff, delta, norm = _ccl_rows(preds, texts, norm_eps)
    g_hat = -2.0 * diff
    denom = norm + norm_eps
    # Jacobian of v / (|v| + e) is I/(|v|+e) - v v^T / ((|v|+e)^2 |v|)
    safe = np.where(norm > 0, norm, 1.0)
    radial = np.einsum("ij,ij->i", delta, g_hat)[:, None] / (denom * denom * safe)
    g_delta = g_hat / denom - np.where(norm > 0, radial, 0.0) * delta
    return value, np.concatenate([-g_delta, g_delta], axis=1)


def ccl_backward(pred, inst: EditInstance, norm_eps: float = NORM_EPS) -> np.ndarray:
    _, grad = ccl_backward_batch(pred, inst.x_text, norm_eps)
    return grad[0]


def combined_loss(pred, s: CouplingSample, inst: EditInstance, alpha: float = DEFAULT_ALPHA) -> LossBreakdown:
    if alpha < 0:
        raise ContractError(f"alpha must be non-negative, got {alpha}")
    return LossBreakdown.of(fm_loss(pred, s), ccl(pred, inst), alpha, ccl_is_degenerate(pred))


def combined_grad(pred, s: CouplingSample, inst: EditInstance, alpha: float = DEFAULT_ALPHA) -> np.ndarray:
    grad = fm_grad(pred, s)
    if alpha:
        grad = grad + alpha * ccl_backward(pred, inst)
    return grad


def batch_loss_and_grad(preds, targets, texts, alpha: float):
    """Row-wise fm and ccl values plus d(mean total)/d(preds) for a batch.

    Rows are reduced in ascending order so the result does not depend on how a
    batch was assembled.
    """
    preds = np.asarray(preds, dtype=np.float64)
    n, d = preds.shape
    resid = preds - targets
    fm = np.einsum("ij,ij->i", resid, resid) / d
    grad = (2.0 / d) * resid
    if alpha:
        ccl_vals, ccl_g = ccl_backward_batch(preds, texts)
        grad = grad + alpha * ccl_g
    else:
        ccl_vals, _, _, _ = _ccl_rows(preds, np.asarray(texts, dtype=np.float64), NORM_EPS)
    return fm, ccl_vals, grad / n
