import numpy as np
import pytest

from stepdistill.data_metrics import ToyDataset, agreement
from stepdistill.diffusion import GaussianOracleDenoiser, Parameterization
from stepdistill.distill import (
    DistillConfig,
    PerfectStudentDenoiser,
    RungEvalSettings,
    distill_iteration,
    distill_target,
    distill_targets,
    model_x_hat_fn,
    oracle_x_hat_fn,
    progressive_distill,
    rung_step_counts,
)
from stepdistill.net import Model
from stepdistill.checkpoint import Checkpoint
from stepdistill.rngstream import stream
from stepdistill.samplers import SamplerKind, SamplerSpec, ddim_step_from_x_hat, sample_batch
from stepdistill.schedule import ScheduleError, alpha_sigma, make_grid


class ConstantTeacher:
    def __init__(self, c):
        self.c = c

    def __call__(self, z, pt):
        from stepdistill.diffusion import Prediction

        x_hat = np.full_like(np.asarray(z, dtype=np.float64), self.c)
        if pt.sigma == 0.0:
            zeros = np.zeros_like(x_hat)
            return Prediction(x_hat=x_hat, eps_hat=zeros, v_hat=zeros)
        eps_hat = (z - pt.alpha * x_hat) / pt.sigma
        return Prediction(x_hat=x_hat, eps_hat=eps_hat, v_hat=pt.alpha * eps_hat - pt.sigma * x_hat)


def random_teacher_model(seed=0, dim=1, param=Parameterization.V) -> Model:
    model = Model.initialize(dim, param, stream(seed, "teacher"), hidden_dims=(16, 16))
    model.params = stream(seed, "weights").standard_normal(model.params.size) * 0.4
    model.ema_params = model.params.copy()
    return model


def teacher_checkpoint(seed=0, dim=1) -> Checkpoint:
    model = random_teacher_model(seed, dim)
    return Checkpoint(
        model=model,
        opt_m=np.zeros(model.params.size),
        opt_v=np.zeros(model.params.size),
        metadata={"kind": "original", "weighting": "snr-plus-one"},
    )


class TestDistillTarget:
    def test_constant_teacher_returns_constant(self):
        teacher = ConstantTeacher(0.42)
        for n, i in ((4, 4), (4, 2), (8, 5), (1, 1)):
            target = distill_target(np.array([0.6]), i / n, teacher, n)
            assert target[0] == pytest.approx(0.42, abs=1e-12)

    def test_final_segment_collapses_to_z_end(self):
        # t'' = 0 makes the formula x = z_end exactly
        teacher = GaussianOracleDenoiser(mean=0.2, variance=0.7)
        n = 4
        z = np.array([0.9])
        pt_t = alpha_sigma(1.0 / n)
        pt_mid = alpha_sigma(0.5 / n)
        z_mid = ddim_step_from_x_hat(z, teacher(z, pt_t).x_hat, pt_t, pt_mid)
        z_end = ddim_step_from_x_hat(z_mid, teacher(z_mid, pt_mid).x_hat, pt_mid, alpha_sigma(0.0))
        target = distill_target(z, 1.0 / n, teacher, n)
        np.testing.assert_allclose(target, z_end, atol=1e-12)

    def test_round_trip_with_random_teacher_nets(self):
        # one student DDIM step with the target lands on the two-step state
        rng = stream(50, "roundtrip")
        teacher_model = random_teacher_model(7)
        teacher = teacher_model.denoiser(use_ema=True)
        for _ in range(200):
            n = int(rng.integers(1, 17))
            i = int(rng.integers(1, n + 1))
            t = i / n
            z = rng.standard_normal((1, 1))
            target = distill_target(z, t, teacher, n)
            pt_t = alpha_sigma(t)
            pt_mid = alpha_sigma(t - 0.5 / n)
            pt_end = alpha_sigma(max(t - 1.0 / n, 0.0))
            z_mid = ddim_step_from_x_hat(z, teacher(z, pt_t).x_hat, pt_t, pt_mid)
            z_end = ddim_step_from_x_hat(z_mid, teacher(z_mid, pt_mid).x_hat, pt_mid, pt_end)
            student_step = ddim_step_from_x_hat(z, target, pt_t, pt_end)
            np.testing.assert_allclose(student_step, z_end, atol=1e-9)

    def test_target_is_deterministic(self):
        teacher = random_teacher_model(3).denoiser()
        z = np.array([0.3])
        a = distill_target(z, 0.5, teacher, 4)
        b = distill_target(z, 0.5, teacher, 4)
        np.testing.assert_array_equal(a, b)

    def test_off_grid_time_rejected(self):
        with pytest.raises(ScheduleError):
            distill_target(np.zeros(1), 0.3, ConstantTeacher(0.0), 4)

    def test_vectorized_matches_scalar(self):
        model = random_teacher_model(9)
        teacher_fn = model_x_hat_fn(model, use_ema=True)
        teacher_den = model.denoiser(use_ema=True)
        rng = stream(51, "vec")
        n = 8
        z = rng.standard_normal((16, 1))
        i = rng.integers(1, n + 1, size=16)
        t = i / n
        batch = distill_targets(z, t, n, teacher_fn)
        for k in range(16):
            single = distill_target(z[k], float(t[k]), teacher_den, n)
            np.testing.assert_allclose(batch[k], single, atol=1e-12)

    def test_oracle_teacher_adapter(self):
        oracle = GaussianOracleDenoiser(mean=0.1, variance=0.5)
        fn = oracle_x_hat_fn(oracle)
        out = fn(np.array([[0.5]]), np.array([0.5]))
        expected = oracle(np.array([[0.5]]), alpha_sigma(0.5)).x_hat
        np.testing.assert_allclose(out, expected, atol=1e-14)


class TestPerfectStudent:
    def test_matches_two_step_teacher_trajectories(self):
        teacher = random_teacher_model(21).denoiser()
        n = 4
        student = PerfectStudentDenoiser(teacher=teacher, n_steps=n)
        spec = SamplerSpec(kind=SamplerKind.DDIM)
        s = sample_batch(student, spec, make_grid(n), seed=13, count=32, dim=1)
        t = sample_batch(teacher, spec, make_grid(2 * n), seed=13, count=32, dim=1)
        np.testing.assert_allclose(s, t, atol=1e-9)

    def test_agreement_metric_is_zero(self):
        teacher = random_teacher_model(22).denoiser()
        student = PerfectStudentDenoiser(teacher=teacher, n_steps=2)
        assert agreement(teacher, student, 2, count=16, seed=14, dim=1) < 1e-9


class TestRungStepCounts:
    def test_halving(self):
        assert rung_step_counts(4, 1, 2) == [2, 1]
        assert rung_step_counts(64, 1, 2) == [32, 16, 8, 4, 2, 1]

    def test_divide_by_four(self):
        assert rung_step_counts(64, 1, 4) == [16, 4, 1]

    def test_invalid(self):
        with pytest.raises(ValueError):
            rung_step_counts(8, 1, 4)  # 8 -> 2 -> cannot reach 1
        with pytest.raises(ValueError):
            rung_step_counts(6, 1, 4)


class TestDistillIteration:
    def test_zero_updates_is_bitwise_copy(self):
        teacher = teacher_checkpoint()
        cfg = DistillConfig(seed=5)
        student = distill_iteration(teacher, 4, ToyDataset(kind="gauss1d"), cfg, updates=0)
        assert student.model.params.tobytes() == teacher.model.params.tobytes()
        assert student.model.ema_params.tobytes() == teacher.model.ema_params.tobytes()
        assert student.metadata["n_steps"] == 4

    def test_seed_reproducibility(self):
        teacher = teacher_checkpoint()
        cfg = DistillConfig(seed=5, batch_size=16)
        ds = ToyDataset(kind="gauss1d")
        a = distill_iteration(teacher, 2, ds, cfg, updates=20)
        b = distill_iteration(teacher, 2, ds, cfg, updates=20)
        assert a.model.params.tobytes() == b.model.params.tobytes()

    def test_discrete_grid_includes_zero_snr_point(self):
        # with n_student=1 every training time is t=1 (pure noise); training
        # must proceed for the stable parameterizations
        teacher = teacher_checkpoint()
        cfg = DistillConfig(seed=6, batch_size=16)
        student = distill_iteration(teacher, 1, ToyDataset(kind="gauss1d"), cfg, updates=10)
        assert np.all(np.isfinite(student.model.params))

    def test_default_update_counts(self):
        cfg = DistillConfig(updates_per_iteration=7, updates_small_n=9)
        teacher = teacher_checkpoint()
        ds = ToyDataset(kind="gauss1d")
        assert distill_iteration(teacher, 4, ds, cfg).metadata["distill_updates"] == 7
        assert distill_iteration(teacher, 2, ds, cfg).metadata["distill_updates"] == 9
        assert distill_iteration(teacher, 1, ds, cfg).metadata["distill_updates"] == 9


class TestProgressiveDistill:
    def test_ladder_structure_and_lineage(self):
        teacher = teacher_checkpoint()
        cfg = DistillConfig(
            start_steps=4, end_steps=1, updates_per_iteration=5, updates_small_n=5, seed=3
        )
        settings = RungEvalSettings(count=256, agreement_count=32, seed=1)
        ladder = progressive_distill(teacher, ToyDataset(kind="gauss1d"), cfg, settings)
        assert ladder.step_counts() == [4, 2, 1]
        assert ladder.rungs[0].agreement is None
        for rung in ladder.rungs[1:]:
            assert rung.agreement is not None and np.isfinite(rung.agreement)
        for rung in ladder.rungs:
            assert np.isfinite(rung.energy_distance)
            assert rung.w1 is not None  # 1-D dataset
        assert ladder.rungs[1].checkpoint.metadata["teacher_kind"] == "original"
        assert ladder.rungs[2].checkpoint.metadata["teacher_n_steps"] == 2

    def test_oracle_teacher_one_step_student(self, gauss_base):
        # distill the trained 1-D model 2 -> 1; the one-step student must
        # track its teacher's two-step sampler closely
        base, _curve = gauss_base
        cfg = DistillConfig(
            start_steps=2, end_steps=1, updates_per_iteration=3000, updates_small_n=3000, seed=8
        )
        settings = RungEvalSettings(count=1024, agreement_count=1000, seed=4)
        ladder = progressive_distill(base, ToyDataset(kind="gauss1d"), cfg, settings)
        assert ladder.rungs[-1].agreement <= 1e-2


class TestLadderShape:
    def test_monotone_degradation_across_rungs(self, ring_ladder):
        # sample quality may only degrade as steps shrink, within a 10% band
        eds = [r.energy_distance for r in ring_ladder.rungs]  # N descending
        for coarser, finer in zip(eds[1:], eds[:-1]):
            assert coarser >= 0.9 * finer
