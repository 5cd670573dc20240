"""Synthetic edit pairs with known edit masks, and mask-split fidelity metrics.

Latents are ``d_s``-vectors read as a flattened square grid (8x8 by default).
Sources are smooth low-frequency fields scaled into [-1, 1]; each task edits
a contiguous index block (or everything, for ``global_scale``).
"""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from .coupling import EditInstance
from .numcore import ContractError
from .rng import derive

TASK_NAMES = ("brighten_region", "invert_region", "shift_block", "global_scale")
DEFAULT_D_S = 64
DEFAULT_D_V = 16
VIT_POOL = 4
_TEXT_BASIS_SEED = 20240917
_MAX_FREQ = 2


@dataclass(frozen=True)
class EditTaskSpec:
    task_id: int
    name: str
    region: tuple[int, int]  # half-open index range [start, stop)
    magnitude: float

    def validate(self, d_s: int) -> None:
        if self.name not in TASK_NAMES:
            raise ContractError(f"unknown task {self.name!r}")
        lo, hi = self.region
        if not 0 <= lo < hi <= d_s:
            raise ContractError(f"region {self.region} not within [0, {d_s})")
        if self.name == "global_scale" and (lo, hi) != (0, d_s):
            raise ContractError("global_scale must cover the full index range")


@dataclass
class EditMetrics:
    preserved_rmse: float
    edited_rmse: float
    context_score: float


def default_suite(d_s: int = DEFAULT_D_S) -> list[EditTaskSpec]:
    """The four standard tasks: three local edits on disjoint quarter-blocks, one global."""
    q = d_s // 4
    return [
        EditTaskSpec(0, "brighten_region", (q // 2, q // 2 + q), 0.5),
        EditTaskSpec(1, "invert_region", (q + q // 2, 2 * q + q // 2), 1.0),
        EditTaskSpec(2, "shift_block", (2 * q + q // 2, 3 * q + q // 2), 3.0),
        EditTaskSpec(3, "global_scale", (0, d_s), 0.5),
    ]


def text_basis(d_t: int) -> np.ndarray:
    """Fixed orthonormal rows; row ``k`` embeds instruction ``k``."""
    rng = np.random.default_rng(_TEXT_BASIS_SEED + d_t)
    q, _ = np.linalg.qr(rng.standard_normal((d_t, d_t)))
    return q.T


def text_embedding(task: EditTaskSpec, d_t: int) -> np.ndarray:
    if task.task_id >= d_t:
        raise ContractError(f"task_id {task.task_id} needs d_t > {task.task_id}")
    sign = -1.0 if task.magnitude < 0 else 1.0
    return sign * text_basis(d_t)[task.task_id]


def smooth_field(d_s: int, rng) -> np.ndarray:
    """Random mixture of low-frequency cosines on the grid, max |value| == 1."""
    side = int(round(np.sqrt(d_s)))
    if side * side == d_s:
        yy, xx = np.divmod(np.arange(d_s), side)
        u, v = (xx + 0.5) / side, (yy + 0.5) / side
    else:
        u, v = (np.arange(d_s) + 0.5) / d_s, np.zeros(d_s)
    field = np.zeros(d_s)
    for fx in range(_MAX_FREQ + 1):
        for fy in range(_MAX_FREQ + 1):
            amp = rng.standard_normal() / (1.0 + fx + fy)
            phase = rng.uniform(0, 2 * np.pi)
            field += amp * np.cos(np.pi * (fx * u + fy * v) + phase)
    peak = np.max(np.abs(field))
    return field / peak if peak > 0 else field


def apply_task(task: EditTaskSpec, x_src: np.ndarray) -> np.ndarray:
    lo, hi = task.region
    x = x_src.copy()
    if task.name == "brighten_region":
        x[lo:hi] = x_src[lo:hi] + task.magnitude
    elif task.name == "invert_region":
        x[lo:hi] = -x_src[lo:hi]
    elif task.name == "shift_block":
        x[lo:hi] = np.roll(x_src[lo:hi], int(round(task.magnitude)))
    elif task.name == "global_scale":
        x = (1.0 + task.magnitude) * x_src
    return x


def vit_features(x_src: np.ndarray, d_v: int) -> np.ndarray:
    """Block means over groups of four, zero-padded (or cut) to ``d_v``."""
    n = x_src.shape[0] // VIT_POOL
    pooled = x_src[: n * VIT_POOL].reshape(n, VIT_POOL).mean(axis=1)
    out = np.zeros(d_v)
    m = min(n, d_v)
    out[:m] = pooled[:m]
    return out


def gen_instance(task: EditTaskSpec, seed: int, d_s: int = DEFAULT_D_S, d_v: int = DEFAULT_D_V) -> EditInstance:
    task.validate(d_s)
    x_src = smooth_field(d_s, derive(seed, "editlab.source", task.task_id))
    mask = np.zeros(d_s, dtype=bool)
    mask[task.region[0]:task.region[1]] = True
    return EditInstance(
        x_src=x_src,
        x_tgt=apply_task(task, x_src),
        x_text=text_embedding(task, d_s),
        x_vit=vit_features(x_src, d_v),
        edit_mask=mask,
        task_id=task.task_id,
        seed=seed,
    )


def gen_dataset(tasks, seeds, d_s: int = DEFAULT_D_S, d_v: int = DEFAULT_D_V) -> list[EditInstance]:
    return [gen_instance(task, s, d_s, d_v) for s in seeds for task in tasks]


def _rmse(diff: np.ndarray) -> float:
    return float(np.sqrt(np.mean(diff * diff))) if diff.size else 0.0


def edit_metrics(pred_latent, inst: EditInstance) -> EditMetrics:
    """RMSE against x_tgt split by the edit mask.

    An empty side of the mask (e.g. the preserved set of a global edit) scores 0.
    """
    pred = np.asarray(pred_latent, dtype=np.float64)
    if pred.shape != (inst.d_s,):
        raise ContractError(f"edited latent has length {pred.shape[0]}, expected d_s = {inst.d_s}")
    diff = pred - inst.x_tgt
    preserved = _rmse(diff[~inst.edit_mask])
    edited = _rmse(diff[inst.edit_mask])
    return EditMetrics(preserved, edited, float(np.exp(-preserved)))


def over_edit_index(pred_latent, inst: EditInstance) -> float:
    """Preserved-region error relative to edited-region error; large means leakage."""
    m = edit_metrics(pred_latent, inst)
    return m.preserved_rmse / (m.edited_rmse + 1e-9)


DATASET_COLUMNS = ["task_id", "seed", "coordinate_index", "x_src", "x_tgt", "mask"]


def dump_dataset(insts, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(DATASET_COLUMNS)
        for inst in insts:
            for j in range(inst.d_s):
                w.writerow([inst.task_id, inst.seed, j, repr(float(inst.x_src[j])),
                            repr(float(inst.x_tgt[j])), int(inst.edit_mask[j])])


def load_dataset(path, tasks, d_v: int = DEFAULT_D_V) -> list[EditInstance]:
    """Inverse of :func:`dump_dataset`; x_text and x_vit are rebuilt from ``tasks``."""
    by_id = {t.task_id: t for t in tasks}
    rows: dict[tuple[int, int], list] = {}
    order = []
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames != DATASET_COLUMNS:
            raise ContractError(f"dataset header {reader.fieldnames} != {DATASET_COLUMNS}")
        for rec in reader:
            key = (int(rec["task_id"]), int(rec["seed"]))
            if key not in rows:
                rows[key] = []
                order.append(key)
            rows[key].append((int(rec["coordinate_index"]), float(rec["x_src"]),
                              float(rec["x_tgt"]), rec["mask"] == "1"))
    out = []
    for task_id, seed in order:
        if task_id not in by_id:
            raise ContractError(f"dataset references unknown task_id {task_id}")
        coords = sorted(rows[(task_id, seed)])
        if [c[0] for c in coords] != list(range(len(coords))):
            raise ContractError(f"instance (task {task_id}, seed {seed}) has gaps in coordinate_index")
        x_src = np.array([c[1] for c in coords])
        out.append(EditInstance(
            x_src=x_src,
            x_tgt=np.array([c[2] for c in coords]),
            x_text=text_embedding(by_id[task_id], len(coords)),
            x_vit=vit_features(x_src, d_v),
            edit_mask=np.array([c[3] for c in coords]),
            task_id=task_id,
            seed=seed,
        ))
    return out
