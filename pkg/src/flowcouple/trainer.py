"""Training loop with curriculum-scheduled coupling selection.

Randomness is keyed by ``(seed, purpose, step, instance_index)`` through
:func:`flowcouple.rng.derive`, so a run is fully determined by its config,
seed and dataset.
"""

from __future__ import annotations

import csv
import io
import logging
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from . import coupling as cp
from .coupling import CouplingSample, EditInstance
from .flowloss import DEFAULT_ALPHA, LossBreakdown, batch_loss_and_grad
from .fsutil import atomic_write_text
from .numcore import AdamState, ContractError, NonFiniteGradientError, VelocityNet, adam_step, save_checkpoint
from .rng import as_generator, derive

log = logging.getLogger(__name__)

REGIMES = ("curriculum", "pure_local", "pure_independent", "minibatch_ot")
METRICS_HEADER = ["step", "fm_loss", "ccl_loss", "total_loss", "local_frac_running", "wallclock_ms"]


class NonFiniteLossError(FloatingPointError):
    def __init__(self, step: int, detail: str = "loss"):
        super().__init__(f"non-finite {detail} at training step {step}; step aborted")
        self.step = step


@dataclass
class CurriculumSchedule:
    warmup_steps: int = 300
    warmup_local_frac: float = 0.25
    main_local_frac: float = 0.5
    max_steps: int = 1000

    def __post_init__(self):
        for name in ("warmup_local_frac", "main_local_frac"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ContractError(f"{name} = {v} is not a probability")
        if not 0 <= self.warmup_steps <= self.max_steps:
            raise ContractError(f"warmup_steps {self.warmup_steps} must be in [0, max_steps={self.max_steps}]")

    def local_frac(self, step: int) -> float:
        return self.warmup_local_frac if step < self.warmup_steps else self.main_local_frac

    def phase(self, step: int) -> str:
        return "warmup" if step < self.warmup_steps else "main"


@dataclass
class TrainConfig:
    batch_size: int = 32
    learning_rate: float = 1e-3
    alpha: float = DEFAULT_ALPHA
    d_s: int = 64
    d_t: int = 64
    d_v: int = 16
    seed: int = 0
    coupling_regime: str = "curriculum"
    reflow_rounds: int = 0
    reflow_euler_steps: int = 25
    hidden_width: int = 128
    hidden_layers: int = 2
    checkpoint_interval: int = 100
    fixed_sigma: float | None = None
    record_wallclock: bool = False

    def __post_init__(self):
        if self.batch_size < 1:
            raise ContractError("batch_size must be >= 1")
        for name in ("d_s", "d_t", "d_v"):
            if getattr(self, name) < 1:
                raise ContractError(f"{name} must be >= 1")
        if self.d_t != self.d_s:
            raise ContractError(f"d_t ({self.d_t}) must equal d_s ({self.d_s})")
        if self.coupling_regime not in REGIMES:
            raise ContractError(f"coupling_regime {self.coupling_regime!r} not in {REGIMES}")
        if self.alpha < 0:
            raise ContractError("alpha must be non-negative")
        if self.coupling_regime == "minibatch_ot" and self.batch_size > cp.MAX_OT_BATCH:
            raise ContractError(f"minibatch_ot needs batch_size <= {cp.MAX_OT_BATCH}")

    @property
    def context_dim(self) -> int:
        return self.d_t + self.d_v

    @property
    def hidden(self) -> tuple[int, ...]:
        return (self.hidden_width,) * self.hidden_layers

    def new_net(self) -> VelocityNet:
        return VelocityNet.init(self.d_s, self.context_dim, self.hidden, derive(self.seed, "init"))

    def new_adam(self, net: VelocityNet) -> AdamState:
        return AdamState.for_params(net.params(), learning_rate=self.learning_rate)


def choose_coupling(schedule: CurriculumSchedule, step: int, rng) -> str:
    """Bernoulli draw of the coupling kind for one training sample."""
    if step < 0:
        raise ContractError("step must be non-negative")
    u = as_generator(rng).random()
    return cp.LOCAL_GAUSSIAN if u < schedule.local_frac(step) else cp.INDEPENDENT


@dataclass
class BatchLoss(LossBreakdown):
    n_local: int = 0
    n_samples: int = 0


def build_samples(batch, schedule, step: int, config: TrainConfig) -> tuple[list[CouplingSample], np.ndarray]:
    """Couplings and interpolation times for one batch."""
    regime = config.coupling_regime
    if regime == "minibatch_ot":
        samples = cp.minibatch_ot_samples(batch, derive(config.seed, "train.ot", step))
        ts = np.array([derive(config.seed, "train.t", step, i).random() for i in range(len(batch))])
        return samples, ts
    samples, ts = [], np.empty(len(batch))
    for i, inst in enumerate(batch):
        rng = derive(config.seed, "train.sample", step, i)
        if regime == "curriculum":
            kind = choose_coupling(schedule, step, rng)
        else:
            kind = cp.LOCAL_GAUSSIAN if regime == "pure_local" else cp.INDEPENDENT
        ts[i] = rng.random()
        if kind == cp.LOCAL_GAUSSIAN:
            samples.append(cp.local_gaussian_couple(inst, rng, sigma=config.fixed_sigma))
        else:
            samples.append(cp.independent_couple(inst, rng))
    return samples, ts


def fit_arrays(net: VelocityNet, adam: AdamState, x0, x1, ts, contexts, texts, alpha: float, step: int,
               n_local: int = 0) -> BatchLoss:
    """One Adam update on the mean combined loss; rows are (x0, x1, t) triples."""
    ts = np.asarray(ts, dtype=np.float64)
    if ts.size == 0:
        raise ContractError("empty batch")
    x_t = (1.0 - ts)[:, None] * x0 + ts[:, None] * x1
    targets = x1 - x0
    preds, acts = net.forward_batch(x_t, ts, contexts, keep_cache=True)
    fm, ccl_vals, g_out = batch_loss_and_grad(preds, targets, texts, alpha)
    loss = BatchLoss.of(float(np.mean(fm)), float(np.mean(ccl_vals)), alpha)
    if not np.isfinite(loss.total):
        raise NonFiniteLossError(step)
    grads = net.backward_batch(acts, g_out)
    try:
        adam_step(net.params(), grads, adam)
    except NonFiniteGradientError as exc:
        raise NonFiniteLossError(step, "gradient") from exc
    return BatchLoss(loss.fm, loss.ccl, loss.alpha, loss.total, False, n_local, ts.size)


def fit_samples(net: VelocityNet, adam: AdamState, samples, ts, insts, alpha: float, step: int) -> BatchLoss:
    """:func:`fit_arrays` over coupled samples and their instances' conditioning."""
    if not samples:
        raise ContractError("empty batch")
    return fit_arrays(
        net, adam,
        np.stack([s.x0 for s in samples]),
        np.stack([s.x1 for s in samples]),
        ts,
        np.stack([inst.context for inst in insts]),
        np.stack([inst.x_text for inst in insts]),
        alpha, step,
        n_local=sum(s.kind == cp.LOCAL_GAUSSIAN for s in samples),
    )


def train_step(net, adam, batch, schedule, step: int, config: TrainConfig) -> BatchLoss:
    """Sample couplings and times for ``batch`` and apply one optimizer update.

    On a non-finite loss or gradient the update is skipped, parameters and
    optimizer state are left untouched and :class:`NonFiniteLossError` is raised.
    """
    samples, ts = build_samples(batch, schedule, step, config)
    return fit_samples(net, adam, samples, ts, batch, config.alpha, step)


def _select(dataset, step: int, config: TrainConfig, label: str = "train.batch"):
    if callable(dataset):
        return dataset(step, derive(config.seed, label, step), config.batch_size)
    n = len(dataset)
    if n == 0:
        raise ContractError("dataset is empty")
    rng = derive(config.seed, label, step)
    idx = rng.choice(n, size=min(config.batch_size, n), replace=False) if n > 1 else np.zeros(1, dtype=int)
    return [dataset[i] for i in sorted(idx)]


@dataclass
class RunResult:
    net: VelocityNet
    adam: AdamState
    metrics: list[dict]
    checkpoints: list[Path] = field(default_factory=list)
    metrics_path: Path | None = None
    coupling_counts: dict = field(default_factory=dict)
    aborted_steps: list[int] = field(default_factory=list)
    reflow_dropped: int = 0
    wallclock_s: float = 0.0


def _fmt(x: float) -> str:
    return repr(float(x))


def metrics_csv(rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(METRICS_HEADER)
    for r in rows:
        w.writerow([r["step"], _fmt(r["fm_loss"]), _fmt(r["ccl_loss"]), _fmt(r["total_loss"]),
                    _fmt(r["local_frac_running"]), r["wallclock_ms"]])
    return buf.getvalue()


def train_run(config: TrainConfig, dataset, schedule: CurriculumSchedule, out_dir=None,
              net: VelocityNet | None = None, adam: AdamState | None = None) -> RunResult:
    """Run ``schedule.max_steps`` training steps, then ``config.reflow_rounds`` reflow rounds.

    With ``out_dir`` set, a checkpoint is written every
    ``config.checkpoint_interval`` steps and at the end, and ``metrics.csv``
    holds one row per completed step. ``wallclock_ms`` is 0 unless
    ``config.record_wallclock`` is set, keeping the log reproducible.
    """
    net = net if net is not None else config.new_net()
    adam = adam if adam is not None else config.new_adam(net)
    out = Path(out_dir) if out_dir is not None else None
    result = RunResult(net, adam, [])
    counts = {"warmup": {"local_gaussian": 0, "other": 0}, "main": {"local_gaussian": 0, "other": 0},
              "reflow": {"local_gaussian": 0, "other": 0}}
    result.coupling_counts = counts
    t_start = time.perf_counter()
    seen_local = seen_total = 0

    def checkpoint(name: str):
        if out is not None:
            result.checkpoints.append(save_checkpoint(out / name, net, adam))

    def record(step: int, loss: BatchLoss, phase: str):
        nonlocal seen_local, seen_total
        seen_local += loss.n_local
        seen_total += loss.n_samples
        counts[phase]["local_gaussian"] += loss.n_local
        counts[phase]["other"] += loss.n_samples - loss.n_local
        ms = int(round((time.perf_counter() - t_start) * 1000)) if config.record_wallclock else 0
        result.metrics.append({
            "step": step, "fm_loss": loss.fm, "ccl_loss": loss.ccl, "total_loss": loss.total,
            "local_frac_running": seen_local / seen_total if seen_total else 0.0, "wallclock_ms": ms,
        })

    def run_steps(first: int, n: int, phase_of, make_batch):
        for step in range(first, first + n):
            try:
                loss = make_batch(step)
            except NonFiniteLossError as exc:
                log.error("%s", exc)
                result.aborted_steps.append(step)
                continue
            record(step, loss, phase_of(step))
            done = step + 1
            if out is not None and config.checkpoint_interval > 0 and done % config.checkpoint_interval == 0:
                checkpoint(f"ckpt_{done:06d}.fckp")

    try:
        run_steps(0, schedule.max_steps, schedule.phase,
                  lambda step: train_step(net, adam, _select(dataset, step, config), schedule, step, config))

        step0 = schedule.max_steps
        for r in range(config.reflow_rounds):
            insts = list(dataset) if not callable(dataset) else dataset(-1 - r, derive(config.seed, "reflow.data", r), 512)
            diag = cp.ReflowDiagnostics()
            pairs = cp.reflow_pairs(net, insts, config.reflow_euler_steps, derive(config.seed, "reflow.pairs", r),
                                    samples=None, diagnostics=diag)
            dropped = set(diag.dropped_indices)
            kept = [inst for i, inst in enumerate(insts) if i not in dropped]
            result.reflow_dropped += diag.dropped

            def reflow_batch(step, pairs=pairs, kept=kept):
                rng = derive(config.seed, "reflow.batch", step)
                k = min(config.batch_size, len(pairs))
                idx = sorted(rng.choice(len(pairs), size=k, replace=False))
                ts = derive(config.seed, "reflow.t", step).random(k)
                return fit_samples(net, adam, [pairs[i] for i in idx], ts, [kept[i] for i in idx],
                                   config.alpha, step)

            run_steps(step0, schedule.max_steps, lambda s: "reflow", reflow_batch)
            step0 += schedule.max_steps

        checkpoint("final.fckp")
        if out is not None:
            result.metrics_path = atomic_write_text(out / "metrics.csv", metrics_csv(result.metrics))
    except OSError:
        if out is not None:
            try:
                checkpoint("partial.fckp")
            except OSError:
                log.exception("could not write partial checkpoint")
        raise
    result.wallclock_s = time.perf_counter() - t_start
    return result
