import numpy as np
import pytest

from flowcouple import trainer
from flowcouple.coupling import LOCAL_GAUSSIAN
from flowcouple.editlab import default_suite, gen_dataset
from flowcouple.numcore import ContractError, load_checkpoint
from flowcouple.rng import derive

SMALL = dict(d_s=4, d_t=4, d_v=2, hidden_width=8, batch_size=8, checkpoint_interval=5)


def small_dataset(n=12, seed=0):
    r = np.random.default_rng(seed)
    from conftest import small_instance
    return [small_instance(r, d_s=4, d_v=2) for _ in range(n)]


def local_fraction(schedule, step, draws=100_000, seed=0):
    rng = derive(seed, "test.curriculum", step)
    return np.mean([trainer.choose_coupling(schedule, step, rng) == LOCAL_GAUSSIAN for _ in range(draws)])


def test_curriculum_fractions():
    sched = trainer.CurriculumSchedule()
    assert abs(local_fraction(sched, 0) - 0.25) <= 0.01
    assert abs(local_fraction(sched, 300) - 0.50) <= 0.01


def test_curriculum_within_binomial_bounds():
    sched = trainer.CurriculumSchedule(warmup_steps=10, warmup_local_frac=0.1, main_local_frac=0.8, max_steps=20)
    for step, p in ((3, 0.1), (10, 0.8), (5000, 0.8)):
        n = 20_000
        assert abs(local_fraction(sched, step, n) - p) <= 3 * np.sqrt(p * (1 - p) / n)


def test_zero_warmup_fraction_never_local():
    sched = trainer.CurriculumSchedule(warmup_local_frac=0.0)
    rng = np.random.default_rng(0)
    assert all(trainer.choose_coupling(sched, s % 300, rng) != LOCAL_GAUSSIAN for s in range(5000))


def test_schedule_validation():
    with pytest.raises(ContractError):
        trainer.CurriculumSchedule(warmup_steps=20, max_steps=10)
    with pytest.raises(ContractError):
        trainer.CurriculumSchedule(main_local_frac=1.5)
    with pytest.raises(ContractError):
        trainer.TrainConfig(d_s=4, d_t=5)
    with pytest.raises(ContractError):
        trainer.TrainConfig(batch_size=0)
    with pytest.raises(ContractError):
        trainer.TrainConfig(coupling_regime="nope")


def test_zero_learning_rate_keeps_params(rng):
    cfg = trainer.TrainConfig(learning_rate=0.0, **SMALL)
    net = cfg.new_net()
    before = [p.copy() for p in net.params()]
    adam = cfg.new_adam(net)
    loss = trainer.train_step(net, adam, small_dataset(), trainer.CurriculumSchedule(), 0, cfg)
    assert all(np.array_equal(a, b) for a, b in zip(before, net.params()))
    assert np.isfinite(loss.total) and loss.total > 0
    assert loss.total == loss.fm + cfg.alpha * loss.ccl


def test_nonfinite_loss_aborts_without_mutation():
    cfg = trainer.TrainConfig(**SMALL)
    net = cfg.new_net()
    net.biases[-1][:] = 1e308
    adam = cfg.new_adam(net)
    before = [p.copy() for p in net.params()]
    with pytest.raises(trainer.NonFiniteLossError, match="step 7"):
        trainer.train_step(net, adam, small_dataset(), trainer.CurriculumSchedule(), 7, cfg)
    assert all(np.array_equal(a, b) for a, b in zip(before, net.params()))
    assert adam.step_count == 0


def test_run_logs_aborted_steps(tmp_path):
    cfg = trainer.TrainConfig(**SMALL)
    net = cfg.new_net()
    net.biases[-1][:] = 1e308
    res = trainer.train_run(cfg, small_dataset(), trainer.CurriculumSchedule(warmup_steps=0, max_steps=3),
                            out_dir=tmp_path, net=net)
    assert res.aborted_steps == [0, 1, 2] and res.metrics == []


def test_max_steps_zero_writes_initial_checkpoint_only(tmp_path):
    cfg = trainer.TrainConfig(**SMALL)
    res = trainer.train_run(cfg, small_dataset(), trainer.CurriculumSchedule(warmup_steps=0, max_steps=0),
                            out_dir=tmp_path)
    assert [p.name for p in res.checkpoints] == ["final.fckp"]
    net, adam = load_checkpoint(tmp_path / "final.fckp")
    assert adam.step_count == 0
    init = cfg.new_net()
    assert all(np.array_equal(a, b) for a, b in zip(net.params(), init.params()))
    assert (tmp_path / "metrics.csv").read_text() == ",".join(trainer.METRICS_HEADER) + "\n"


def test_checkpoint_interval_and_metrics(tmp_path):
    cfg = trainer.TrainConfig(**SMALL)
    res = trainer.train_run(cfg, small_dataset(), trainer.CurriculumSchedule(warmup_steps=4, max_steps=12),
                            out_dir=tmp_path)
    assert sorted(p.name for p in tmp_path.glob("*.fckp")) == ["ckpt_000005.fckp", "ckpt_000010.fckp", "final.fckp"]
    lines = (tmp_path / "metrics.csv").read_text().splitlines()
    assert lines[0] == "step,fm_loss,ccl_loss,total_loss,local_frac_running,wallclock_ms"
    assert len(lines) == 13
    counts = res.coupling_counts
    assert sum(counts["warmup"].values()) == 4 * 8 and sum(counts["main"].values()) == 8 * 8
    _, adam = load_checkpoint(tmp_path / "final.fckp")
    assert adam.step_count == 12


def test_run_is_bitwise_deterministic(tmp_path):
    for regime in ("curriculum", "minibatch_ot"):
        cfg = trainer.TrainConfig(coupling_regime=regime, reflow_rounds=1, reflow_euler_steps=3, **SMALL)
        sched = trainer.CurriculumSchedule(warmup_steps=3, max_steps=6)
        a, b = tmp_path / f"{regime}_a", tmp_path / f"{regime}_b"
        trainer.train_run(cfg, small_dataset(), sched, out_dir=a)
        trainer.train_run(cfg, small_dataset(), sched, out_dir=b)
        for name in ("metrics.csv", "final.fckp", "ckpt_000005.fckp", "ckpt_000010.fckp"):
            assert (a / name).read_bytes() == (b / name).read_bytes(), name


def test_seed_changes_results(tmp_path):
    sched = trainer.CurriculumSchedule(warmup_steps=0, max_steps=3)
    r0 = trainer.train_run(trainer.TrainConfig(seed=0, **SMALL), small_dataset(), sched)
    r1 = trainer.train_run(trainer.TrainConfig(seed=1, **SMALL), small_dataset(), sched)
    assert r0.metrics[0]["fm_loss"] != r1.metrics[0]["fm_loss"]


def test_io_failure_leaves_partial_checkpoint(tmp_path, monkeypatch):
    def boom(path, text):
        raise OSError("disk full")

    monkeypatch.setattr(trainer, "atomic_write_text", boom)
    with pytest.raises(OSError):
        trainer.train_run(trainer.TrainConfig(**SMALL), small_dataset(), trainer.CurriculumSchedule(
            warmup_steps=0, max_steps=2), out_dir=tmp_path)
    assert (tmp_path / "partial.fckp").exists()
    load_checkpoint(tmp_path / "partial.fckp")


def test_pure_regimes_use_one_coupling():
    data = small_dataset()
    sched = trainer.CurriculumSchedule(warmup_steps=0, max_steps=4)
    local = trainer.train_run(trainer.TrainConfig(coupling_regime="pure_local", **SMALL), data, sched)
    indep = trainer.train_run(trainer.TrainConfig(coupling_regime="pure_independent", **SMALL), data, sched)
    assert local.coupling_counts["main"]["other"] == 0
    assert indep.coupling_counts["main"]["local_gaussian"] == 0


def test_training_reduces_loss_on_edit_suite():
    data = gen_dataset(default_suite(16), range(8), d_s=16, d_v=4)
    cfg = trainer.TrainConfig(d_s=16, d_t=16, d_v=4, hidden_width=32, batch_size=16, learning_rate=3e-3)
    res = trainer.train_run(cfg, data, trainer.CurriculumSchedule(warmup_steps=50, max_steps=200))
    fm = [r["fm_loss"] for r in res.metrics]
    assert np.mean(fm[-20:]) < 0.7 * np.mean(fm[:20])


@pytest.mark.slow
def test_gaussian_field_slope(gaussian_result):
    i = gaussian_result.times.index(0.5)
    assert gaussian_result.expected[i] == pytest.approx(-0.4)
    assert abs(gaussian_result.fitted[i] / -0.4 - 1.0) < 0.05


@pytest.mark.slow
def test_curriculum_beats_independent_at_k5_ten_seeds(method_level_result):
    runs = method_level_result.runs[:10]
    lgcc = np.median([r.preserved[("lgcc", 5)] for r in runs])
    indep = np.median([r.preserved[("independent", 5)] for r in runs])
    assert lgcc < indep
