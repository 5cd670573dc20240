"""Fixed-step Euler integration of a learned velocity field."""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from .coupling import INDEPENDENT, LOCAL_GAUSSIAN, EditInstance, source_sigma
from .numcore import ContractError, VelocityNet
from .rng import as_generator

DEFAULT_STEPS = {LOCAL_GAUSSIAN: 25, INDEPENDENT: 50}


@dataclass
class Trajectory:
    """States at t_k = k/K for k = 0..K and the K velocities that produced them.

    An invalid trajectory was truncated at the first non-finite state, so it
    holds fewer than K + 1 states.
    """

    states: np.ndarray
    times: np.ndarray
    velocities: np.ndarray
    nfe: int
    valid: bool = True

    @property
    def endpoint(self) -> np.ndarray:
        return self.states[-1]


def init_inference_state(inst: EditInstance, kind: str, rng) -> np.ndarray:
    """Starting point for sampling.

    ``local_gaussian`` seeds BOTH halves from the source latent, since the
    target latent is unknown at inference: ``concat(x_src + e1, x_src + e2)``.
    """
    rng = as_generator(rng)
    d = 2 * inst.d_s
    if kind == INDEPENDENT:
        return rng.standard_normal(d)
    if kind == LOCAL_GAUSSIAN:
        sigma = source_sigma(inst.x_src)
        base = np.concatenate([inst.x_src, inst.x_src])
        return base + sigma * rng.standard_normal(d)
    raise ContractError(f"inference initialization must be independent or local_gaussian, got {kind!r}")


def euler_sample_batch(net: VelocityNet, x0, contexts, steps: int, on_eval=None) -> list[Trajectory]:
    """Integrate each row of ``x0`` with K uniform Euler steps.

    ``on_eval(k, t)`` is called once per network evaluation (one per step for
    the whole batch). A row that becomes non-finite is frozen and reported as an
    invalid, truncated trajectory.
    """
    if steps < 1:
        raise ContractError(f"need K >= 1 Euler steps, got {steps}")
    x = np.atleast_2d(np.array(x0, dtype=np.float64))
    contexts = np.atleast_2d(np.asarray(contexts, dtype=np.float64))
    n, d = x.shape
    states = np.empty((steps + 1, n, d))
    vels = np.empty((steps, n, d))
    states[0] = x
    alive = np.all(np.isfinite(x), axis=1)
    stop = np.where(alive, steps + 1, 1)  # number of valid states per row
    dt = 1.0 / steps
    times = np.arange(steps + 1) / steps
    for k in range(steps):
        t = k / steps
        with np.errstate(over="ignore", invalid="ignore"):
            v = net.forward_batch(x, np.full(n, t), contexts)
        if on_eval is not None:
            on_eval(k, t)
        with np.errstate(over="ignore", invalid="ignore"):
            x_next = x + dt * v
        ok = alive & np.all(np.isfinite(v), axis=1) & np.all(np.isfinite(x_next), axis=1)
        newly_dead = alive & ~ok
        stop[newly_dead] = k + 1
        alive = ok
        x = np.where(alive[:, None], x_next, x)
        vels[k] = v
        states[k + 1] = x

    out = []
    for i in range(n):
        m = int(stop[i])
        valid = m == steps + 1
        out.append(Trajectory(
            states=states[:m, i].copy(),
            times=times[:m].copy(),
            velocities=vels[: m - 1, i].copy(),
            nfe=steps,
            valid=valid,
        ))
    return out


def euler_sample(net: VelocityNet, x0, context, steps: int, on_eval=None) -> Trajectory:
    return euler_sample_batch(net, np.asarray(x0)[None, :], np.asarray(context)[None, :], steps, on_eval)[0]


def straightness(traj: Trajectory) -> float:
    """Mean over steps of ||v_k - (x_K - x_0)||^2; zero for a straight path."""
    if not traj.valid:
        raise ContractError("straightness is undefined for an invalid trajectory")
    chord = traj.states[-1] - traj.states[0]
    dev = traj.velocities - chord
    return float(np.mean(np.einsum("kd,kd->k", dev, dev)))


def decode_edit(traj: Trajectory, inst: EditInstance | None = None) -> np.ndarray:
    """Edited latent = target half of the final state."""
    if not traj.valid:
        raise ContractError("cannot decode an invalid trajectory")
    end = traj.states[-1]
    return end[end.shape[0] // 2:].copy()


def dump_trajectory(traj: Trajectory, path) -> None:
    """CSV with columns step,t,coordinate_index,value."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["step", "t", "coordinate_index", "value"])
        for k, (t, state) in enumerate(zip(traj.times, traj.states)):
            for j, v in enumerate(state):
                w.writerow([k, repr(float(t)), j, repr(float(v))])
