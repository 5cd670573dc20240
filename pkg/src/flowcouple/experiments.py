"""Reference experiments and the oracle suite.

Three synthetic problems with known answers:

* 1-D Gaussian task under local Gaussian coupling (data N(0, s^2), noise
  N(0, sigma^2)). The optimal field is linear in x_t with slope
  k(t) = -(1-t) sigma^2 / (s^2 + (1-t)^2 sigma^2).
* Two-Gaussian toy in 2-D with independent coupling, used for reflow.
* The four-task synthetic edit suite, used to compare coupling regimes.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from . import coupling as cp
from . import editlab, flowloss, sampler, trainer
from .numcore import AdamState, VelocityNet, finite_diff_grad, net_backward, net_forward
from .rng import derive

ORACLE_TIMES = (0.0, 0.25, 0.5, 0.75)


# -- gradient checks ---------------------------------------------------------

def grad_rel_error(analytic, numeric) -> float:
    """Largest per-parameter relative error.

    The denominator is floored at 1e-3 * max(1, max|analytic|) so components
    that are zero up to finite-difference noise do not dominate.
    """
    a = np.concatenate([g.ravel() for g in analytic])
    f = np.concatenate([g.ravel() for g in numeric])
    floor = 1e-3 * max(1.0, float(np.max(np.abs(a))) if a.size else 1.0)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(f)), floor)
    return float(np.max(np.abs(a - f) / denom)) if a.size else 0.0


def random_problem(rng, d_s: int = 3, d_v: int = 2, hidden=(6, 5)):
    net = VelocityNet.init(d_s, d_s + d_v, hidden, rng)
    inst = cp.EditInstance(
        x_src=rng.standard_normal(d_s),
        x_tgt=rng.standard_normal(d_s),
        x_text=rng.standard_normal(d_s),
        x_vit=rng.standard_normal(d_v),
        edit_mask=np.arange(d_s) < max(1, d_s // 2),
    )
    kind = rng.integers(3)
    if kind == 0:
        s = cp.local_gaussian_couple(inst, rng)
    elif kind == 1:
        s = cp.independent_couple(inst, rng)
    else:
        s = cp.minibatch_ot_samples([inst], rng)[0]
    return net, inst, s, float(rng.random())


def gradient_check(n_draws: int = 50, seed: int = 0, alpha: float = 0.5, step: float = 1e-5) -> dict:
    """Analytic vs central-difference gradients for the bare network output and
    for the full combined loss; returns the worst relative errors."""
    worst_net = worst_loss = 0.0
    for k in range(n_draws):
        rng = derive(seed, "oracle.grad", k)
        net, inst, s, t = random_problem(rng)
        x_t = cp.interpolate(s, t).x_t
        ctx = inst.context
        up = rng.standard_normal(net.output_dim)
        worst_net = max(worst_net, grad_rel_error(
            net_backward(net, x_t, t, ctx, up), finite_diff_grad(net, x_t, t, ctx, up, step)))

        pred = net_forward(net, x_t, t, ctx)
        g_pred = flowloss.combined_grad(pred, s, inst, alpha)
        analytic = net_backward(net, x_t, t, ctx, g_pred)
        numeric = finite_diff_grad(net, x_t, t, ctx, None, step,
                                   objective=lambda out: flowloss.combined_loss(out, s, inst, alpha).total)
        worst_loss = max(worst_loss, grad_rel_error(analytic, numeric))
    return {"net_rel_err": worst_net, "loss_rel_err": worst_loss}


# -- 1-D Gaussian closed form ------------------------------------------------

def gaussian_k(t, s: float = 1.0, sigma: float = 1.0):
    """Slope of E[-eps | x_t] for x ~ N(0, s^2), eps ~ N(0, sigma^2), x_t = x + (1-t) eps."""
    t = np.asarray(t, dtype=np.float64)
    return -(1 - t) * sigma**2 / (s**2 + (1 - t) ** 2 * sigma**2)


def gaussian_regression_k(t: float, n: int, rng, s: float = 1.0, sigma: float = 1.0) -> float:
    """Least-squares slope of -eps on x_t from Monte Carlo draws."""
    x = s * rng.standard_normal(n)
    eps = sigma * rng.standard_normal(n)
    x_t = x + (1 - t) * eps
    return float(np.dot(x_t, -eps) / np.dot(x_t, x_t))


_GAUSS_CONTEXT = np.array([1.0, 0.0])  # x_text = [1], x_vit = [0]


@dataclass
class GaussianOracleResult:
    times: tuple
    expected: list
    fitted: list
    regression: list
    rel_errors: list
    seconds: float


def fitted_slope(net: VelocityNet, t: float, rng, n: int = 20000, s: float = 1.0, sigma: float = 1.0) -> float:
    """Average least-squares slope of each output coordinate on its input coordinate."""
    x = s * rng.standard_normal((n, 2))
    x_t = x + (1 - t) * sigma * rng.standard_normal((n, 2))
    ctx = np.broadcast_to(_GAUSS_CONTEXT, (n, 2))
    out = net.forward_batch(x_t, np.full(n, t), ctx)
    slopes = []
    for j in range(2):
        xc = x_t[:, j] - x_t[:, j].mean()
        slopes.append(float(np.dot(xc, out[:, j] - out[:, j].mean()) / np.dot(xc, xc)))
    return float(np.mean(slopes))


def train_gaussian_field(seed: int = 0, steps: int = 16000, batch: int = 1024, width: int = 16,
                         lr: float = 3e-3, s: float = 1.0, sigma: float = 1.0) -> VelocityNet:
    """Fit the 1-D task (d_s = 1, both halves i.i.d.) with a step-decayed learning rate."""
    net = VelocityNet.init(1, 2, (width, width), derive(seed, "gauss.init"))
    adam = AdamState.for_params(net.params(), learning_rate=lr)
    ctx = np.broadcast_to(_GAUSS_CONTEXT, (batch, 2))
    text = np.ones((batch, 1))
    for step in range(steps):
        if step == steps // 2:
            adam.learning_rate = lr / 10
        elif step == 3 * steps // 4:
            adam.learning_rate = lr / 100
        rng = derive(seed, "gauss.batch", step)
        x1 = s * rng.standard_normal((batch, 2))
        x0 = x1 + sigma * rng.standard_normal((batch, 2))
        trainer.fit_arrays(net, adam, x0, x1, rng.random(batch), ctx, text, 0.0, step)
    return net


def gaussian_oracle(seed: int = 0, steps: int = 16000, s: float = 1.0, sigma: float = 1.0) -> GaussianOracleResult:
    start = time.perf_counter()
    net = train_gaussian_field(seed, steps, s=s, sigma=sigma)
    expected = [float(gaussian_k(t, s, sigma)) for t in ORACLE_TIMES]
    fitted = [fitted_slope(net, t, derive(seed, "gauss.eval", i), s=s, sigma=sigma)
              for i, t in enumerate(ORACLE_TIMES)]
    regression = [gaussian_regression_k(t, 400_000, derive(seed, "gauss.ls", i), s, sigma)
                  for i, t in enumerate(ORACLE_TIMES)]
    rel = [abs(f / e - 1.0) for f, e in zip(fitted, expected)]
    return GaussianOracleResult(ORACLE_TIMES, expected, fitted, regression, rel, time.perf_counter() - start)


# -- two-Gaussian reflow toy ---------------------------------------------------

_TOY_CONTEXT = np.array([1.0, 0.0])


def two_gaussian_targets(rng, n: int, separation: float = 3.0, spread: float = 0.5) -> np.ndarray:
    side = np.where(rng.random(n) < 0.5, -1.0, 1.0)
    return np.stack([separation * side, np.zeros(n)], axis=1) + spread * rng.standard_normal((n, 2))


def _fit_toy(net, seed: int, steps: int, batch: int, lr: float, label: str, pairs=None):
    adam = AdamState.for_params(net.params(), learning_rate=lr)
    ctx = np.broadcast_to(_TOY_CONTEXT, (batch, 2))
    text = np.ones((batch, 1))
    for step in range(steps):
        if step == steps // 2:
            adam.learning_rate = lr / 10
        rng = derive(seed, label, step)
        if pairs is None:
            x1 = two_gaussian_targets(rng, batch)
            x0 = rng.standard_normal((batch, 2))
        else:
            idx = np.sort(rng.choice(len(pairs[0]), size=batch, replace=False))
            x0, x1 = pairs[0][idx], pairs[1][idx]
        trainer.fit_arrays(net, adam, x0, x1, rng.random(batch), ctx, text, 0.0, step)
    return net


def toy_straightness(net: VelocityNet, seed: int, steps: int, n: int = 500) -> float:
    """Median straightness over held-out N(0, I) starts."""
    x0 = derive(seed, "toy.heldout").standard_normal((n, 2))
    trajs = sampler.euler_sample_batch(net, x0, np.broadcast_to(_TOY_CONTEXT, (n, 2)), steps)
    return float(np.median([sampler.straightness(tr) for tr in trajs if tr.valid]))


@dataclass
class ReflowResult:
    straightness: list  # median per round, round 0 = before any reflow
    dropped: int
    seconds: float


def reflow_experiment(seed: int = 0, rounds: int = 1, steps: int = 3000, euler_steps: int = 50,
                      pool: int = 8192, batch: int = 256, lr: float = 3e-3) -> ReflowResult:
    start = time.perf_counter()
    net = VelocityNet.init(1, 2, (64, 64), derive(seed, "toy.init"))
    _fit_toy(net, seed, steps, batch, lr, "toy.train")
    history = [toy_straightness(net, seed, euler_steps)]
    dropped = 0
    for r in range(rounds):
        rng = derive(seed, "toy.pool", r)
        x0 = rng.standard_normal((pool, 2))
        insts = [cp.EditInstance(a[:1], a[1:], np.ones(1), np.zeros(1), np.array([True])) for a in x0]
        samples = [cp.CouplingSample(a, a, np.zeros(2), 1.0, cp.INDEPENDENT) for a in x0]
        diag = cp.ReflowDiagnostics()
        pairs = cp.reflow_pairs(net, insts, euler_steps, samples=samples, diagnostics=diag)
        dropped += diag.dropped
        arr = (np.stack([p.x0 for p in pairs]), np.stack([p.x1 for p in pairs]))
        net = _fit_toy(net.copy(), seed, steps, batch, lr, f"toy.reflow{r}", pairs=arr)
        history.append(toy_straightness(net, seed, euler_steps))
    return ReflowResult(history, dropped, time.perf_counter() - start)


# -- coupling-regime comparison on the edit suite ----------------------------

@dataclass
class RegimeRun:
    seed: int
    preserved: dict = field(default_factory=dict)  # (regime, K) -> mean preserved RMSE
    edited: dict = field(default_factory=dict)
    over_edit: dict = field(default_factory=dict)


REGIME_SETUPS = {
    # name: (training regime, alpha, inference init)
    "lgcc": ("curriculum", flowloss.DEFAULT_ALPHA, cp.LOCAL_GAUSSIAN),
    "independent": ("pure_independent", 0.0, cp.INDEPENDENT),
}


def suite_datasets(seed: int, n_train: int = 64, n_eval: int = 8, d_s: int = editlab.DEFAULT_D_S,
                   d_v: int = editlab.DEFAULT_D_V):
    """Training and held-out instances of the four-task suite; instance seeds never overlap."""
    if n_train > 1000 or n_eval > 1000:
        raise ValueError("at most 1000 instances per task and split")
    tasks = editlab.default_suite(d_s)
    train = editlab.gen_dataset(tasks, range(1000 * seed, 1000 * seed + n_train), d_s, d_v)
    evals = editlab.gen_dataset(tasks, range(10**9 + 1000 * seed, 10**9 + 1000 * seed + n_eval), d_s, d_v)
    return train, evals


def evaluate(net: VelocityNet, insts, kind: str, steps: int, seed: int):
    x0 = np.stack([sampler.init_inference_state(inst, kind, derive(seed, "eval.init", i))
                   for i, inst in enumerate(insts)])
    trajs = sampler.euler_sample_batch(net, x0, np.stack([inst.context for inst in insts]), steps)
    out = []
    for tr, inst in zip(trajs, insts):
        if not tr.valid:
            out.append((np.inf, np.inf, np.inf))
            continue
        edit = sampler.decode_edit(tr, inst)
        m = editlab.edit_metrics(edit, inst)
        out.append((m.preserved_rmse, m.edited_rmse, editlab.over_edit_index(edit, inst)))
    return out


def regime_run(seed: int, steps_by_setup: dict, max_steps: int = 1000, batch_size: int = 32) -> RegimeRun:
    """Train one net per setup on the same data and evaluate at each requested K.

    Each instance's preserved RMSE is averaged over the held-out set (all four
    tasks; the global task has no preserved region and contributes 0).
    """
    train, evals = suite_datasets(seed)
    run = RegimeRun(seed)
    for name, ks in steps_by_setup.items():
        regime, alpha, init = REGIME_SETUPS[name]
        cfg = trainer.TrainConfig(seed=seed, coupling_regime=regime, alpha=alpha, batch_size=batch_size)
        result = trainer.train_run(cfg, train, trainer.CurriculumSchedule(max_steps=max_steps))
        for k in ks:
            rows = np.array(evaluate(result.net, evals, init, k, seed))
            run.preserved[(name, k)] = float(np.mean(rows[:, 0]))
            run.edited[(name, k)] = float(np.mean(rows[:, 1]))
            run.over_edit[(name, k)] = float(np.mean(rows[:, 2]))
    return run


@dataclass
class MethodLevelResult:
    runs: list
    medians: dict
    speedup_ok: bool  # lgcc@10 <= independent@50
    equal_k_ok: bool  # lgcc@5 < independent@5
    seconds: float


def method_level(seeds=range(20), max_steps: int = 1000) -> MethodLevelResult:
    start = time.perf_counter()
    plan = {"lgcc": (5, 10), "independent": (5, 50)}
    runs = [regime_run(s, plan, max_steps=max_steps) for s in seeds]
    keys = [("lgcc", 5), ("lgcc", 10), ("independent", 5), ("independent", 50)]
    med = {k: float(np.median([r.preserved[k] for r in runs])) for k in keys}
    return MethodLevelResult(
        runs, med,
        med[("lgcc", 10)] <= med[("independent", 50)],
        med[("lgcc", 5)] < med[("independent", 5)],
        time.perf_counter() - start,
    )


# -- oracle suite ------------------------------------------------------------

@dataclass
class OracleResult:
    name: str
    passed: bool
    measured: dict
    message: str = ""


def ot_equivalence(trials: int = 1000, seed: int = 0, max_b: int = 7) -> dict:
    """Assignment solver vs exhaustive enumeration on random and tie-heavy costs."""
    mismatches = ties = 0
    for k in range(trials):
        rng = derive(seed, "oracle.ot", k)
        b = int(rng.integers(1, max_b + 1))
        if k % 2:
            cost = rng.integers(0, 3, size=(b, b)).astype(np.float64)
            ties += 1
        else:
            cost = cp.squared_cost(rng.standard_normal((b, 3)), rng.standard_normal((b, 3)))
        fast, brute = cp.solve_assignment(cost), cp.brute_force_assign(cost)
        if fast != brute or cp.assignment_cost(cost, fast) != cp.assignment_cost(cost, brute):
            mismatches += 1
    return {"trials": trials, "tie_trials": ties, "mismatches": mismatches}


def coupling_identities(n: int = 200, seed: int = 0) -> dict:
    bad = 0
    for k in range(n):
        rng = derive(seed, "oracle.identity", k)
        d = int(rng.integers(1, 9))
        inst = cp.EditInstance(rng.standard_normal(d) * 10.0 ** rng.integers(-3, 4), rng.standard_normal(d),
                               rng.standard_normal(d), np.zeros(1), np.arange(d) == 0)
        samples = [cp.local_gaussian_couple(inst, rng), cp.independent_couple(inst, rng),
                   *cp.minibatch_ot_samples([inst, inst], rng)]
        for s in samples:
            ok = (np.array_equal(s.x1 - s.x0, -s.eps)
                  and np.array_equal(cp.interpolate(s, 0.0).x_t, s.x0)
                  and np.array_equal(cp.interpolate(s, 1.0).x_t, s.x1))
            bad += not ok
    return {"samples": 4 * n, "violations": bad}


def snr_concentration(seeds: int = 100, d_z: int = 1024) -> dict:
    """SNR of unit-variance targets at matched noise scale sigma = 1, per seed.

    Also reports the variant where sigma is estimated per instance from an
    independent unit-variance source; its per-seed spread is wider (sd about
    sqrt(4 / d_z)), so only its mean over seeds is meaningful.
    """
    matched, estimated = [], []
    for k in range(seeds):
        rng = derive(k, "oracle.snr")
        x_tgt, x_src = rng.standard_normal(d_z), rng.standard_normal(d_z)
        matched.append(cp.snr(x_tgt, 1.0))
        estimated.append(cp.snr(x_tgt, cp.source_sigma(x_src)))
    return {
        "min": float(min(matched)), "max": float(max(matched)), "mean": float(np.mean(matched)),
        "estimated_sigma_mean": float(np.mean(estimated)),
        "estimated_sigma_min": float(min(estimated)), "estimated_sigma_max": float(max(estimated)),
    }


def ccl_reference_values(d: int = 8, seed: int = 0) -> dict:
    rng = derive(seed, "oracle.ccl")
    text = rng.standard_normal(d)
    ortho = rng.standard_normal(d)
    ortho -= (ortho @ text) / (text @ text) * text
    src = rng.standard_normal(d)

    def value(delta, txt=text):
        inst = cp.EditInstance(np.zeros(d), np.zeros(d), txt, np.zeros(1), np.arange(d) == 0)
        return flowloss.ccl(np.concatenate([src, src + delta]), inst)

    aligned, antipodal, orthogonal = value(2.5 * text), value(-0.7 * text), value(3.0 * ortho)
    delta = rng.standard_normal(d)
    scale_drift = max(abs(value(delta, c * text) - value(delta)) for c in (1e-3, 0.5, 7.0, 1e4))
    return {"aligned": aligned, "antipodal": antipodal, "orthogonal": orthogonal, "scale_drift": scale_drift}


def curriculum_frequencies(draws: int = 100_000, seed: int = 0,
                           schedule: trainer.CurriculumSchedule | None = None) -> dict:
    schedule = schedule or trainer.CurriculumSchedule()
    out = {}
    for label, step in (("warmup", 0), ("main", schedule.warmup_steps)):
        rng = derive(seed, "oracle.curriculum", step)
        n_local = sum(trainer.choose_coupling(schedule, step, rng) == cp.LOCAL_GAUSSIAN for _ in range(draws))
        out[label] = n_local / draws
    return out


ORACLES = ("grad", "ot", "identities", "snr", "ccl", "curriculum", "gaussian")


def run_oracles(only=None, seed: int = 0, inject_failure: bool = False, gaussian_steps: int = 16000):
    """Run the oracle suite; ``inject_failure`` plants a known defect that the
    gradient oracle must catch."""
    selected = list(only) if only else list(ORACLES)
    results = []
    for name in selected:
        if name == "grad":
            m = gradient_check(seed=seed)
            if inject_failure:
                m = dict(m, loss_rel_err=_injected_grad_error(seed))
            ok = m["net_rel_err"] < 1e-4 and m["loss_rel_err"] < 1e-4
            results.append(OracleResult(name, ok, m, "max relative error < 1e-4"))
        elif name == "ot":
            m = ot_equivalence(seed=seed)
            results.append(OracleResult(name, m["mismatches"] == 0, m, "solver == brute force, B <= 7"))
        elif name == "identities":
            m = coupling_identities(seed=seed)
            results.append(OracleResult(name, m["violations"] == 0, m, "x1 - x0 == -eps, endpoints exact"))
        elif name == "snr":
            m = snr_concentration()
            ok = 0.85 <= m["min"] and m["max"] <= 1.15 and 0.85 <= m["estimated_sigma_mean"] <= 1.15
            results.append(OracleResult(name, ok, m, "SNR in [0.85, 1.15]"))
        elif name == "ccl":
            m = ccl_reference_values(seed=seed)
            ok = (abs(m["aligned"]) < 1e-6 and abs(m["antipodal"] - 4) < 1e-6
                  and abs(m["orthogonal"] - 2) < 1e-6 and m["scale_drift"] < 1e-9)
            results.append(OracleResult(name, ok, m, "0 / 4 / 2 and scale invariance"))
        elif name == "curriculum":
            m = curriculum_frequencies(seed=seed)
            ok = abs(m["warmup"] - 0.25) <= 0.01 and abs(m["main"] - 0.5) <= 0.01
            results.append(OracleResult(name, ok, m, "0.25 / 0.50 within 0.01"))
        elif name == "gaussian":
            g = gaussian_oracle(seed=seed, steps=gaussian_steps)
            m = {f"k({t})": {"target": e, "fitted": f, "least_squares": r}
                 for t, e, f, r in zip(g.times, g.expected, g.fitted, g.regression)}
            m["max_rel_err"] = max(g.rel_errors)
            results.append(OracleResult(name, max(g.rel_errors) < 0.05, m, "fitted slope within 5%"))
        else:
            raise ValueError(f"unknown oracle {name!r}; choose from {ORACLES}")
    return results


def _injected_grad_error(seed: int) -> float:
    # a 1% error on the CCL normalization Jacobian must be visible to the oracle
    rng = derive(seed, "oracle.grad", 0)
    net, inst, s, t = random_problem(rng)
    x_t = cp.interpolate(s, t).x_t
    pred = net_forward(net, x_t, t, inst.context)
    g_bad = flowloss.fm_grad(pred, s) + 0.5 * 1.01 * flowloss.ccl_backward(pred, inst)
    analytic = net_backward(net, x_t, t, inst.context, g_bad)
    numeric = finite_diff_grad(net, x_t, t, inst.context, None, 1e-5,
                               objective=lambda out: flowloss.combined_loss(out, s, inst, 0.5).total)
    return grad_rel_error(analytic, numeric)
