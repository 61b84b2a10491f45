import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from trident.data import PairedArrays, SyntheticConfig, generate_synthetic
from trident.losses import ContractError, LossConfig
from trident.models import BranchTopology, EncoderSpec, ProjectorSpec
from trident.training import (
    TRACE_FIELDS,
    TrainingDiverged,
    TrainMode,
    TrainRunConfig,
    TrainTrace,
    class_weights,
    lr_schedule,
    pretrain,
    regression_mse,
    train_gene_regressor,
    train_supervised,
    warmup_steps,
)

TINY_ENC = EncoderSpec(channels=(8, 16, 16, 16))
TINY_PROJ = ProjectorSpec((32, 32, 32))


def tiny_cfg(**kw):
    base = dict(encoder=TINY_ENC, projector=TINY_PROJ, epochs=2, batch_size=16, primary_aug=None, privileged_aug=None)
    return TrainRunConfig(**{**base, **kw})


@pytest.fixture(scope="module")
def tiny_data():
    return generate_synthetic(SyntheticConfig(seed=0, n_train=64, n_valid=16, n_test=32))


class TestSchedule:
    def test_starts_at_zero(self):
        assert lr_schedule(0, 1000, 1e-3) == 0.0

    def test_peak_at_warmup_end(self):
        w = warmup_steps(1000, 0.1)
        assert w == 100
        assert lr_schedule(w, 1000, 1e-3) == pytest.approx(1e-3)

    def test_ends_near_zero(self):
        total, max_lr = 1000, 1e-3
        last = lr_schedule(total - 1, total, max_lr)
        assert last <= max_lr * math.pi / (total - warmup_steps(total, 0.1))

    def test_out_of_range(self):
        with pytest.raises(ContractError):
            lr_schedule(10, 10, 1e-3)
        with pytest.raises(ContractError):
            lr_schedule(-1, 10, 1e-3)

    @settings(max_examples=40)
    # the cosine slope bound pi/total needs the warmup to cover at most half the run
    @given(st.integers(2, 3000), st.floats(0.01, 0.45))
    def test_continuity(self, total, wf):
        max_lr = 1e-3
        w = warmup_steps(total, wf)
        lrs = np.array([lr_schedule(s, total, max_lr, wf) for s in range(total)])
        bound = max_lr * max(1 / w, math.pi / total) * (1 + 1e-9)
        assert np.all(np.abs(np.diff(lrs)) <= bound + 1e-15)
        assert lrs.min() >= 0 and lrs.max() <= max_lr


class TestClassWeights:
    def test_hand_example(self):
        labels = np.array([0, 0, 0, 1, 1, 2])
        np.testing.assert_allclose(class_weights(labels, 3), [6 / 9, 6 / 6, 6 / 3])

    def test_absent_class(self):
        with pytest.warns(UserWarning, match="absent"):
            w = class_weights(np.array([0, 0, 2]), 3)
        assert w[1] == 0.0


class TestConfig:
    def test_invariants(self):
        with pytest.raises(ContractError):
            TrainRunConfig(epochs=0)
        with pytest.raises(ContractError):
            TrainRunConfig(batch_size=1)
        with pytest.raises(ContractError):
            TrainRunConfig(warmup_fraction=1.0)

    def test_mode_coerced(self):
        assert TrainRunConfig(mode="supervised").mode is TrainMode.SUPERVISED


class TestPretrain:
    def test_trace_shape_and_pair_names(self, tiny_data):
        res = pretrain(tiny_data["train"], tiny_cfg())
        assert len(res.trace.steps) == 2 * (64 // 16)
        assert set(res.trace.steps[0]["pairs"]) == {"12", "1p", "2p"}
        assert len(res.trace.epoch_mean_std) == 2
        assert [s["step"] for s in res.trace.steps] == list(range(8))

    def test_partial_batch_dropped(self, tiny_data):
        res = pretrain(tiny_data["train"], tiny_cfg(batch_size=24, epochs=1))
        assert len(res.trace.steps) == 64 // 24

    def test_seed_determinism(self, tiny_data):
        a = pretrain(tiny_data["train"], tiny_cfg(seed=3))
        b = pretrain(tiny_data["train"], tiny_cfg(seed=3))
        np.testing.assert_allclose(a.trace.losses, b.trace.losses, rtol=1e-6)

    def test_topology_equivalence(self, tiny_data):
        train = tiny_data["train"]
        copy = PairedArrays(train.ids, train.primary, train.primary.copy(), train.labels, train.groups)
        shared = tiny_cfg(topology=BranchTopology.named("trident", share_privileged_weights=True))
        unpriv = tiny_cfg(topology=BranchTopology.named("trident-unpriv", share_privileged_weights=True))
        a = pretrain(copy, shared)
        b = pretrain(PairedArrays(train.ids, train.primary, None, train.labels, train.groups), unpriv)
        np.testing.assert_array_equal(a.trace.losses, b.trace.losses)

    def test_missing_privileged(self, tiny_data):
        train = tiny_data["train"]
        bare = PairedArrays(train.ids, train.primary, None, train.labels)
        with pytest.raises(ContractError):
            pretrain(bare, tiny_cfg())

    def test_batch_larger_than_data(self, tiny_data):
        with pytest.raises(ContractError):
            pretrain(tiny_data["train"], tiny_cfg(batch_size=128))

    def test_non_finite_aborts_with_trace(self, tiny_data):
        train = tiny_data["train"]
        bad = train.primary.copy()
        bad[20:] = np.nan
        data = PairedArrays(train.ids, bad, train.privileged, train.labels)
        with pytest.raises(TrainingDiverged) as info:
            pretrain(data, tiny_cfg(topology=BranchTopology.named("siamese-unpriv")))
        assert isinstance(info.value.trace, TrainTrace)

    def test_trace_csv_round_trip(self, tiny_data, tmp_path):
        res = pretrain(tiny_data["train"], tiny_cfg())
        path = res.trace.write_csv(tmp_path / "trace.csv")
        assert path.read_text().splitlines()[0] == ",".join(TRACE_FIELDS)
        back = TrainTrace.read_csv(path)
        np.testing.assert_allclose(back.losses, res.trace.losses)
        np.testing.assert_allclose(back.epoch_mean_std, res.trace.epoch_mean_std)

    def test_infonce_runs(self, tiny_data):
        res = pretrain(tiny_data["train"], tiny_cfg(loss=LossConfig(family="infonce"), epochs=1))
        assert np.all(np.isfinite(res.trace.losses))


def test_first_epoch_improves_on_synthetic():
    from trident import desk

    data = generate_synthetic(SyntheticConfig(seed=0))["train"]
    res = pretrain(data, desk.run_config("trident", epochs=1))
    losses = res.trace.losses
    assert losses[-10:].mean() < losses[:10].mean()


class TestBaselines:
    def test_supervised_separable(self):
        rng = np.random.default_rng(0)
        y = rng.integers(0, 2, 64)
        x = np.where(y[:, None, None, None] == 1, 0.9, 0.1) * np.ones((64, 32, 32, 1))
        x = (x + rng.normal(0, 0.02, x.shape)).astype(np.float32)
        data = PairedArrays([str(i) for i in range(64)], x, None, {"a": y})
        res = train_supervised(data, tiny_cfg(epochs=15, mode="supervised", primary_aug=None))
        assert res.train_accuracy == 1.0

    def test_supervised_missing_label(self, tiny_data):
        with pytest.raises(ContractError):
            train_supervised(tiny_data["train"], tiny_cfg(label="z"))

    def test_gene_regressor_zero_counts(self, tiny_data):
        train = tiny_data["train"]
        data = PairedArrays(train.ids, train.primary, np.zeros((64, 4), np.float32), train.labels)
        res = train_gene_regressor(data, tiny_cfg(epochs=20, max_lr=1e-2))
        assert regression_mse(res.model, data) < 1e-3

    def test_gene_regressor_learns_visible_feature(self):
        splits = generate_synthetic(SyntheticConfig(seed=1, n_train=512, n_valid=128, n_test=16))

        def with_counts(arr):
            counts = np.repeat(2.0 + 3.0 * arr.labels["a"][:, None], 4, 1).astype(np.float32)
            return PairedArrays(arr.ids, arr.primary, counts, arr.labels)

        train, valid = with_counts(splits["train"]), with_counts(splits["valid"])
        res = train_gene_regressor(train, tiny_cfg(epochs=20, batch_size=32, max_lr=3e-2))
        assert regression_mse(res.model, valid) < valid.privileged.var()

    def test_gene_regressor_needs_counts(self, tiny_data):
        with pytest.raises(ContractError):
            train_gene_regressor(tiny_data["train"], tiny_cfg())
