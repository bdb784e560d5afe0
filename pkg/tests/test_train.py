import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from rdimkd.exceptions import Diverged, EpochOutOfRange, InvalidDims, ShapeMismatch, ValidationError
from rdimkd.linalg import SeededRng
from rdimkd.losses import DistillSpec
from rdimkd.nets import build_network, forward, inherit_init, mlp_specs, network_to_text
from rdimkd.projection import Method, max_orthonormality_error
from rdimkd.train import (
    DatasetSpec,
    TrainSpec,
    accuracy,
    build_projectors,
    cosine_lr,
    distill_student,
    generate_dataset,
    metrics_csv,
    run_ablation_grid,
    train_baseline,
    train_teacher,
    toy_student_specs,
    toy_teacher_specs,
)

SMALL = DatasetSpec(n_train=64, n_test=100)
FAST = TrainSpec(epochs=5, batch_size=16, lr_init=0.02)
TEACHER_SPECS = mlp_specs(2, [16, 16], 2, taps=(0, 1))
STUDENT_SPECS = mlp_specs(2, [4, 4], 2, taps=(1, 2), splits={1: 16, 2: 16})


@pytest.fixture(scope="module")
def data():
    return generate_dataset(SMALL)


@pytest.fixture(scope="module")
def teacher(data):
    return train_teacher(TEACHER_SPECS, data, TrainSpec(epochs=20, batch_size=16, lr_init=0.05))


def result_text(res):
    return metrics_csv([res]) + network_to_text(res.student)


class TestDataset:
    def test_deterministic(self):
        a, b = generate_dataset(SMALL), generate_dataset(SMALL)
        for name in ("x_train", "y_train", "x_test", "y_test"):
            assert np.array_equal(getattr(a, name), getattr(b, name))

    def test_seed_changes_data(self):
        a = generate_dataset(SMALL)
        b = generate_dataset(DatasetSpec(n_train=64, n_test=100, seed=1))
        assert not np.array_equal(a.x_train, b.x_train)

    def test_mixture_balance(self):
        d = generate_dataset(DatasetSpec("gaussian_mixture", n_train=300, n_test=30, classes=3))
        assert np.bincount(d.y_train).tolist() == [100, 100, 100]

    @given(st.sampled_from(["moons", "spirals", "gaussian_mixture"]), st.integers(3, 60), st.integers(0, 100))
    def test_balance_and_finite(self, kind, n, seed):
        classes = 2 if kind == "moons" else 3
        d = generate_dataset(DatasetSpec(kind, n_train=n, n_test=n, classes=classes, seed=seed))
        counts = np.bincount(d.y_train, minlength=classes)
        assert counts.max() - counts.min() <= 1
        assert np.all(np.isfinite(d.x_train)) and np.all(np.isfinite(d.x_test))

    @pytest.mark.parametrize("kw", [{"kind": "circles"}, {"classes": 1}, {"kind": "moons", "classes": 3},
                                    {"n_train": 1}, {"noise": -0.1}])
    def test_invalid(self, kw):
        with pytest.raises(ValidationError):
            DatasetSpec(**kw)

    def test_noiseless_moons_separable_by_width_8(self):
        # empirical oracle run: seed 0 at the default lr 0.1
        d = generate_dataset(DatasetSpec(noise=0.0))
        net = train_teacher(mlp_specs(2, [8], 2), d, TrainSpec(epochs=200))
        assert net.meta["train_accuracy"] == 1.0


class TestTrainSpec:
    @pytest.mark.parametrize("kw", [{"lr_init": 0.0}, {"momentum": 1.0}, {"momentum": -0.1},
                                    {"weight_decay": -1.0}, {"schedule": "step"}, {"batch_size": 0},
                                    {"epochs": -1}])
    def test_invalid(self, kw):
        with pytest.raises(ValidationError):
            TrainSpec(**kw)


class TestCosineLr:
    def test_start(self):
        assert cosine_lr(0, 100, 0.1) == 0.1

    def test_middle(self):
        assert math.isclose(cosine_lr(50, 100, 0.1), 0.05, rel_tol=1e-12)

    def test_last(self):
        assert math.isclose(cosine_lr(99, 100, 0.1), 0.1 * (1 + math.cos(0.99 * math.pi)) / 2, rel_tol=1e-12)
        assert math.isclose(cosine_lr(99, 100, 0.1), 2.467e-5, rel_tol=1e-3)

    @pytest.mark.parametrize("epoch", [-1, 100])
    def test_out_of_range(self, epoch):
        with pytest.raises(EpochOutOfRange):
            cosine_lr(epoch, 100, 0.1)

    @given(st.integers(2, 500), st.floats(1e-4, 1.0))
    def test_strictly_decreasing(self, total, lr):
        vals = [cosine_lr(e, total, lr) for e in range(total)]
        assert all(a > b for a, b in zip(vals, vals[1:]))


class TestTeacher:
    def test_zero_epochs_is_init(self, data):
        net = train_teacher(TEACHER_SPECS, data, TrainSpec(epochs=0, seed=3))
        init = build_network(TEACHER_SPECS, 3)
        for a, b in zip(net.layers, init.layers):
            assert np.array_equal(a.weight, b.weight)

    def test_deterministic(self, data):
        a = train_teacher(TEACHER_SPECS, data, FAST)
        b = train_teacher(TEACHER_SPECS, data, FAST)
        assert network_to_text(a) == network_to_text(b)

    def test_meta(self, teacher):
        assert teacher.meta["role"] == "teacher"
        assert 0.0 <= teacher.meta["test_accuracy"] <= 1.0

    def test_wide_teacher_accuracy(self):
        d = generate_dataset(DatasetSpec(noise=0.1))
        net = train_teacher(toy_teacher_specs(), d, TrainSpec(lr_init=0.02))
        assert net.meta["test_accuracy"] >= 0.97

    def test_diverged(self, data):
        with pytest.raises(Diverged):
            train_teacher(TEACHER_SPECS, data, TrainSpec(epochs=30, lr_init=1e4, momentum=0.9))


class TestProjectors:
    def test_widths_and_dims(self, teacher, data):
        ps = build_projectors(teacher, data.x_train, DistillSpec("random", 4, 1, 0, "11", 0), [16, 16])
        assert [p.k.shape for p in ps] == [(16, 4), (16, 4)]
        assert not np.array_equal(ps[0].k, ps[1].k)

    @pytest.mark.parametrize("method", ["random", "pca", "pca-last"])
    def test_r1_is_identity(self, teacher, data, method):
        ps = build_projectors(teacher, data.x_train, DistillSpec(method, 1, 1, 0, "11", 0), [16, 16])
        assert all(p.method is Method.IDENTITY for p in ps)

    @pytest.mark.parametrize("method", ["gaussian", "autoencoder"])
    def test_r1_rejected_for_nonorthonormal(self, teacher, data, method):
        with pytest.raises(InvalidDims):
            build_projectors(teacher, data.x_train, DistillSpec(method, 1, 1, 0, "11", 0), [16, 16])

    def test_pca_uses_teacher_features(self, teacher, data):
        p = build_projectors(teacher, data.x_train, DistillSpec("pca", 4, 1, 0, "11", 0), [16, 16], "t#1")[0]
        assert p.source == "t#1" and max_orthonormality_error(p.k) <= 1e-10


class TestDistill:
    def test_result_shape(self, teacher, data):
        res = distill_student(STUDENT_SPECS, teacher, data, FAST, DistillSpec(mask="11"))
        assert len(res.metrics) == FAST.epochs
        assert 0.0 <= res.test_accuracy <= 1.0
        assert all(len(m.kd) == 2 for m in res.metrics)
        assert all(m.kd[0] > 0 for m in res.metrics)
        m = res.metrics[0]
        assert math.isclose(m.total_loss, m.task_loss + sum(m.kd) + m.kl_loss, rel_tol=1e-12)

    @pytest.mark.parametrize("distill", [DistillSpec(alpha=0.0, mask="11"), DistillSpec(mask="00")])
    def test_inert_equals_baseline(self, teacher, data, distill):
        base = train_baseline(STUDENT_SPECS, data, FAST)
        kd = distill_student(STUDENT_SPECS, teacher, data, FAST, distill)
        assert result_text(base) == result_text(kd)

    def test_reproducible(self, teacher, data):
        spec = DistillSpec("rand-each", 4, 1, 0.5, "11", 3)
        a = distill_student(STUDENT_SPECS, teacher, data, FAST, spec)
        b = distill_student(STUDENT_SPECS, teacher, data, FAST, spec)
        assert result_text(a) == result_text(b)
        assert a.metrics[0].kl_loss > 0

    def test_teacher_as_own_student(self, teacher, data):
        train = TrainSpec(epochs=3, batch_size=16, lr_init=1e-12, momentum=0.0, weight_decay=0.0)
        res = distill_student(TEACHER_SPECS, teacher, data, train, DistillSpec(mask="11"), inherit=True)
        assert max(max(m.kd) for m in res.metrics) < 1e-6

    def test_inherit_kd_at_start(self, teacher, data):
        student, _ = inherit_init(build_network(TEACHER_SPECS, 9), teacher)
        ps = build_projectors(teacher, data.x_train, DistillSpec(mask="11"), teacher.tap_dims)
        _, t_taps = forward(teacher, data.x_train[:16])
        _, s_taps = forward(student, data.x_train[:16])
        from rdimkd.losses import rdimkd_loss

        assert max(rdimkd_loss(a, b, p.k, 1.0) for a, b, p in zip(t_taps, s_taps, ps)) < 1e-10

    def test_width_mismatch(self, teacher, data):
        bad = mlp_specs(2, [4, 4], 2, taps=(1, 2))
        with pytest.raises(ShapeMismatch):
            distill_student(bad, teacher, data, FAST, DistillSpec(mask="11"))

    def test_tap_count_mismatch(self, teacher, data):
        bad = mlp_specs(2, [4, 4], 2, taps=(1,), splits={1: 16})
        with pytest.raises(ShapeMismatch):
            distill_student(bad, teacher, data, FAST, DistillSpec(mask="1"))

    def test_mask_length(self, teacher, data):
        with pytest.raises(ShapeMismatch):
            distill_student(STUDENT_SPECS, teacher, data, FAST, DistillSpec(mask="1"))

    def test_metrics_csv_columns(self, teacher, data):
        res = distill_student(STUDENT_SPECS, teacher, data, FAST, DistillSpec(mask="11"))
        lines = metrics_csv([res]).splitlines()
        assert lines[0] == "trial_seed,epoch,lr,task_loss,kd_0,kd_1,kl_loss,total_loss,test_accuracy"
        assert len(lines) == 1 + FAST.epochs

    def test_toy_presets_conform(self):
        t = build_network(toy_teacher_specs(), 0)
        s = build_network(toy_student_specs(), 0)
        assert t.tap_dims == s.tap_dims == [64, 64]


class TestGrid:
    def test_single_cell_equals_single_run(self, teacher, data):
        grid = run_ablation_grid(teacher, STUDENT_SPECS, data, FAST, ["random"], [4], [1.0], ["11"], [0])
        single = distill_student(STUDENT_SPECS, teacher, data, FAST, DistillSpec("random", 4, 1, 0, "11", 0))
        assert grid.rows()[0]["mean_acc"] == single.test_accuracy

    def test_paired_deltas(self, teacher, data):
        grid = run_ablation_grid(teacher, STUDENT_SPECS, data, FAST, ["none", "random"], [4], [1.0], ["11"],
                                 [0, 1], reference="none")
        rows = grid.trial_rows()
        none = {r["seed"]: r["test_accuracy"] for r in rows if r["method"] == "none"}
        for r in rows:
            assert r["paired_delta"] == r["test_accuracy"] - none[r["seed"]]
        assert "paired_delta" in grid.trials_csv().splitlines()[0]

    def test_row_count_order_and_seeds(self, teacher, data):
        grid = run_ablation_grid(teacher, STUDENT_SPECS, data, TrainSpec(epochs=1, lr_init=0.02),
                                 ["baseline", "random"], [4, 2], [10.0, 0.1], ["11", "01"], [0, 1])
        rows = grid.rows()
        assert len(rows) == 2 * 2 * 2 * 2
        assert len(grid.grid_csv().splitlines()) == 1 + 16
        assert [r["alpha"] for r in rows[:4]] == [0.1, 0.1, 10.0, 10.0]
        assert [r["r"] for r in rows[:8]] == [2.0] * 4 + [4.0] * 4
        assert all(r["n_seeds"] == 2 for r in rows)
        for ci in range(len(grid.cells)):
            assert all((ci, s) in grid.accuracies for s in grid.seeds)

    def test_parallel_matches_serial(self, teacher, data):
        args = (teacher, STUDENT_SPECS, data, TrainSpec(epochs=2, lr_init=0.02), ["random", "pca"], [4], [1.0],
                ["11"], [0, 1])
        assert run_ablation_grid(*args).grid_csv() == run_ablation_grid(*args, jobs=2).grid_csv()

    def test_empty_grid(self, teacher, data):
        with pytest.raises(ValidationError):
            run_ablation_grid(teacher, STUDENT_SPECS, data, FAST, [], [4], [1.0], ["11"], [0])

    def test_on_diverge_invalid(self, teacher, data):
        with pytest.raises(ValidationError):
            run_ablation_grid(teacher, STUDENT_SPECS, data, FAST, ["random"], [4], [1.0], ["11"], [0],
                              on_diverge="ignore")


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
class TestGridDivergence:
    HOT = TrainSpec(epochs=3, batch_size=16, lr_init=1e6, schedule="constant")

    def test_raise_by_default(self, teacher, data):
        with pytest.raises(Diverged):
            run_ablation_grid(teacher, STUDENT_SPECS, data, self.HOT, ["random"], [4], [1e6], ["11"], [0])

    def test_record_counts_and_skips(self, teacher, data):
        grid = run_ablation_grid(teacher, STUDENT_SPECS, data, self.HOT, ["random"], [4], [1e6], ["11"], [0, 1],
                                 on_diverge="record")
        row = grid.rows()[0]
        assert row["n_diverged"] == 2
        assert np.isnan(row["mean_acc"]) and row["std_acc"] == 0.0
        assert grid.grid_csv().splitlines()[0].endswith("n_diverged")
