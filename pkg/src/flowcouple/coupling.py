"""Coupled (x0, x1) training pairs.

``x1`` is always ``concat(x_src, x_tgt)``. Every sample records ``eps`` such
that ``x0 == x1 + eps`` holds, so the straight-path velocity target is
``x1 - x0 == -eps`` for every coupling kind.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import linear_sum_assignment

from .numcore import ContractError
from .rng import as_generator

INDEPENDENT = "independent"
LOCAL_GAUSSIAN = "local_gaussian"
MINIBATCH_OT = "minibatch_ot"
KINDS = (INDEPENDENT, LOCAL_GAUSSIAN, MINIBATCH_OT)

SIGMA_FLOOR = 1e-3
MAX_OT_BATCH = 64
MAX_BRUTE_FORCE = 8


@dataclass
class EditInstance:
    x_src: np.ndarray
    x_tgt: np.ndarray
    x_text: np.ndarray
    x_vit: np.ndarray
    edit_mask: np.ndarray
    task_id: int = 0
    seed: int = 0

    def __post_init__(self):
        self.x_src = np.asarray(self.x_src, dtype=np.float64)
        self.x_tgt = np.asarray(self.x_tgt, dtype=np.float64)
        self.x_text = np.asarray(self.x_text, dtype=np.float64)
        self.x_vit = np.asarray(self.x_vit, dtype=np.float64)
        self.edit_mask = np.asarray(self.edit_mask, dtype=bool)
        d_s = self.x_src.shape[0]
        if self.x_tgt.shape != (d_s,) or self.edit_mask.shape != (d_s,):
            raise ContractError(f"x_tgt and edit_mask must have length d_s = {d_s}")
        if self.x_text.shape != (d_s,):
            raise ContractError(f"x_text has dimension {self.x_text.shape[0]}, expected d_t == d_s = {d_s}")

    @property
    def d_s(self) -> int:
        return self.x_src.shape[0]

    @property
    def x1(self) -> np.ndarray:
        return np.concatenate([self.x_src, self.x_tgt])

    @property
    def context(self) -> np.ndarray:
        return np.concatenate([self.x_text, self.x_vit])


@dataclass
class CouplingSample:
    x0: np.ndarray
    x1: np.ndarray
    eps: np.ndarray
    sigma: float
    kind: str

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ContractError(f"unknown coupling kind {self.kind!r}")


@dataclass
class FlowState:
    x_t: np.ndarray
    t: float


def source_sigma(x_src, floor: float = SIGMA_FLOOR) -> float:
    """Scalar noise scale: population std over all elements of x_src, floored."""
    return max(float(np.std(x_src)), floor)


def local_gaussian_couple(inst: EditInstance, rng, sigma: float | None = None) -> CouplingSample:
    """x0 = x1 + eps with eps ~ N(0, sigma^2 I) on both halves.

    ``sigma`` defaults to :func:`source_sigma` of the instance; passing it
    explicitly is for synthetic tasks where the per-instance std is meaningless
    (e.g. one-dimensional latents).
    """
    rng = as_generator(rng)
    if sigma is None:
        sigma = source_sigma(inst.x_src)
    x1 = inst.x1
    x0 = x1 + sigma * rng.standard_normal(x1.shape[0])
    # x1 - (x1 + n) != -n in floating point; the recorded difference makes
    # x1 - x0 == -eps bitwise
    return CouplingSample(x0=x0, x1=x1, eps=x0 - x1, sigma=float(sigma), kind=LOCAL_GAUSSIAN)


def independent_couple(inst: EditInstance, rng) -> CouplingSample:
    rng = as_generator(rng)
    x1 = inst.x1
    x0 = rng.standard_normal(x1.shape[0])
    return CouplingSample(x0=x0, x1=x1, eps=x0 - x1, sigma=1.0, kind=INDEPENDENT)


def snr(x_tgt, sigma: float) -> float:
    """||x_tgt||^2 / (sigma^2 * d_z)."""
    if not sigma > 0:
        raise ContractError(f"sigma must be positive, got {sigma}")
    x_tgt = np.asarray(x_tgt, dtype=np.float64)
    return float(x_tgt @ x_tgt) / (sigma * sigma * x_tgt.size)


def interpolate(s: CouplingSample, t: float) -> FlowState:
    if not 0.0 <= t <= 1.0:
        raise ContractError(f"t = {t} outside [0, 1]")
    # Exact at both endpoints: the unused term is multiplied by 0.0
    return FlowState(x_t=(1.0 - t) * s.x0 + t * s.x1, t=float(t))


def squared_cost(x0_batch, x1_batch) -> np.ndarray:
    a = np.asarray(x0_batch, dtype=np.float64)
    b = np.asarray(x1_batch, dtype=np.float64)
    diff = a[:, None, :] - b[None, :, :]
    return np.einsum("ijk,ijk->ij", diff, diff)


def assignment_cost(cost, perm) -> float:
    cost = np.asarray(cost)
    # fixed summation order so equal assignments give bitwise-equal totals
    total = 0.0
    for i, j in enumerate(perm):
        total += float(cost[i, j])
    return total


def _cost_tol(value: float) -> float:
    return 1e-9 * (1.0 + abs(value))


def brute_force_assign(cost) -> tuple[int, ...]:
    """Exhaustive minimum-cost permutation; ties go to the lexicographically smallest."""
    cost = np.asarray(cost, dtype=np.float64)
    n = cost.shape[0]
    if cost.shape != (n, n):
        raise ContractError(f"cost matrix must be square, got {cost.shape}")
    if n > MAX_BRUTE_FORCE:
        raise ContractError(f"brute force limited to B <= {MAX_BRUTE_FORCE}, got {n}")
    best, best_cost = None, np.inf
    # permutations() yields in lexicographic order; only a strict improvement replaces
    for perm in itertools.permutations(range(n)):
        c = assignment_cost(cost, perm)
        if best is None or c < best_cost - _cost_tol(best_cost):
            best, best_cost = perm, c
    return tuple(best) if best is not None else ()


def _optimal_value(cost: np.ndarray) -> float:
    if cost.size == 0:
        return 0.0
    rows, cols = linear_sum_assignment(cost)
    return float(cost[rows, cols].sum())


def _is_unique_optimum(cost: np.ndarray, perm, value: float) -> bool:
    # an alternative optimum must avoid at least one edge of perm
    n = cost.shape[0]
    if n <= 1:
        return True
    for i in range(n):
        banned = cost.copy()
        banned[i, perm[i]] = np.inf
        try:
            alt = _optimal_value(banned)
        except ValueError:  # no feasible assignment avoids this edge
            continue
        if alt <= value + _cost_tol(value):
            return False
    return True


def solve_assignment(cost) -> tuple[int, ...]:
    """Exact minimum-cost assignment, lexicographically smallest among optima.

    The optimal value comes from a Hungarian-type solver; the permutation is
    then fixed row by row, taking the smallest column that keeps the remaining
    subproblem optimal.
    """
    cost = np.asarray(cost, dtype=np.float64)
    n = cost.shape[0]
    if cost.shape != (n, n):
        raise ContractError(f"cost matrix must be square, got {cost.shape}")
    rows, cols = linear_sum_assignment(cost)
    perm = [0] * n
    for r, c in zip(rows, cols):
        perm[r] = int(c)
    remaining_value = assignment_cost(cost, perm)
    if _is_unique_optimum(cost, perm, remaining_value):
        return tuple(perm)

    chosen: list[int] = []
    free = list(range(n))
    for i in range(n):
        for j in free:
            rest = [c for c in free if c != j]
            sub = cost[np.ix_(range(i + 1, n), rest)]
            value = cost[i, j] + _optimal_value(sub)
            if value <= remaining_value + _cost_tol(remaining_value):
                chosen.append(j)
                free = rest
                remaining_value -= cost[i, j]
                break
        else:  # pragma: no cover - numerical safety net
            return tuple(perm)
    return tuple(chosen)


def minibatch_ot_couple(x0_batch, x1_batch) -> tuple[int, ...]:
    """Permutation ``p`` pairing ``x0_batch[i]`` with ``x1_batch[p[i]]`` at minimal
    total squared distance."""
    x0_batch = np.atleast_2d(np.asarray(x0_batch, dtype=np.float64))
    x1_batch = np.atleast_2d(np.asarray(x1_batch, dtype=np.float64))
    b = x0_batch.shape[0]
    if x1_batch.shape != x0_batch.shape:
        raise ContractError(f"batch shapes differ: {x0_batch.shape} vs {x1_batch.shape}")
    if not 1 <= b <= MAX_OT_BATCH:
        raise ContractError(f"minibatch OT needs 1 <= B <= {MAX_OT_BATCH}, got {b}")
    return solve_assignment(squared_cost(x0_batch, x1_batch))


def minibatch_ot_samples(insts, rng) -> list[CouplingSample]:
    """Independent Gaussian sources re-paired to the batch targets by exact OT."""
    rng = as_generator(rng)
    x1 = np.stack([inst.x1 for inst in insts])
    x0 = rng.standard_normal(x1.shape)
    perm = minibatch_ot_couple(x0, x1)
    return [
        CouplingSample(x0=x0[i], x1=x1[j], eps=x0[i] - x1[j], sigma=1.0, kind=MINIBATCH_OT)
        for i, j in enumerate(perm)
    ]


@dataclass
class ReflowDiagnostics:
    dropped: int = 0
    dropped_indices: list[int] = field(default_factory=list)


def reflow_pairs(net, insts, steps: int, rng=0, kind: str = INDEPENDENT, samples=None,
                 diagnostics: ReflowDiagnostics | None = None) -> list[CouplingSample]:
    """Re-pair each x0 with the Euler endpoint of the current field started at it.

    Sources come from ``samples`` when given (one per instance), otherwise they
    are drawn fresh with the requested coupling ``kind``. Non-finite
    trajectories are dropped and tallied in ``diagnostics``.
    """
    from .sampler import euler_sample_batch

    if steps < 1:
        raise ContractError("reflow needs at least one Euler step")
    if diagnostics is None:
        diagnostics = ReflowDiagnostics()
    insts = list(insts)
    if not insts:
        return []
    if samples is None:
        rng = as_generator(rng)
        if kind == LOCAL_GAUSSIAN:
            samples = [local_gaussian_couple(inst, rng) for inst in insts]
        elif kind == INDEPENDENT:
            samples = [independent_couple(inst, rng) for inst in insts]
        elif kind == MINIBATCH_OT:
            samples = []
            for lo in range(0, len(insts), MAX_OT_BATCH):
                samples += minibatch_ot_samples(insts[lo:lo + MAX_OT_BATCH], rng)
        else:
            raise ContractError(f"unknown coupling kind {kind!r}")
    if len(samples) != len(insts):
        raise ContractError("need exactly one source sample per instance")
    x0 = np.stack([s.x0 for s in samples])
    contexts = np.stack([inst.context for inst in insts])
    trajs = euler_sample_batch(net, x0, contexts, steps)
    out = []
    for i, (s, traj) in enumerate(zip(samples, trajs)):
        if not traj.valid:
            diagnostics.dropped += 1
            diagnostics.dropped_indices.append(i)
            continue
        x1 = traj.states[-1].copy()
        out.append(CouplingSample(x0=s.x0.copy(), x1=x1, eps=s.x0 - x1, sigma=s.sigma, kind=s.kind))
    return out
