"""Optimizer math, loss-variant supervision regimes, and the training loop."""

import json

import numpy as np
import pytest

from incidentkit import dataset as ds
from incidentkit import model as md
from incidentkit.errors import ConfigError, DataError, NumericError
from incidentkit.trainer import (
    AdamState,
    TrainConfig,
    _assert_places_aug_masked,
    _incident_ce_targets,
    adam_step,
    train,
)

from conftest import make_store


def toy_problem(tiny_tax, n_per_class=20, with_aug=0, seed=0):
    """Linearly separable blobs: 3 incident x 2 place clusters in 6-d."""
    rng = np.random.default_rng(seed)
    records, rows = [], []
    rid = 0
    for ci, inc in enumerate(tiny_tax.incidents):
        for _ in range(n_per_class):
            pl = tiny_tax.places[rid % 2]
            center = np.zeros(6)
            center[ci] = 4.0
            center[3 + (rid % 2)] = 4.0
            rows.append(center + rng.normal(scale=0.5, size=6))
            records.append(
                ds.PartialLabelRecord(
                    id=f"t{rid:04d}", embedding_index=rid, incident_pos=inc, place_pos=pl
                )
            )
            rid += 1
    for _ in range(with_aug):
        center = np.zeros(6)
        center[3 + (rid % 2)] = 4.0
        rows.append(center + rng.normal(scale=0.5, size=6))
        records.append(
            ds.PartialLabelRecord(
                id=f"t{rid:04d}",
                embedding_index=rid,
                place_pos=tiny_tax.places[rid % 2],
                source="places_aug",
            )
        )
        rid += 1
    return records, make_store(np.array(rows))


FAST = dict(lr=1e-2, batch_size=16, min_epochs=3, max_epochs=6, hidden=(8,),
            split_ratios=(0.8, 0.1, 0.1))


class TestAdam:
    def test_first_step_hand_case(self):
        params = md.ModelParams(trunk=[], incident_head=(np.array([[1.0]]), np.zeros(1)),
                                place_head=(np.array([[0.0]]), np.zeros(1)))
        grads = md.ParamGrads(trunk=[], incident_head=(np.array([[2.0]]), np.zeros(1)),
                              place_head=(np.array([[0.0]]), np.zeros(1)))
        state = AdamState.for_params(params)
        adam_step(params, grads, state, lr=0.1)
        # bias correction makes the first update lr * g / (|g| + eps)
        assert params.incident_head[0][0, 0] == pytest.approx(0.9, abs=1e-8)
        assert state.t == 1

    def test_zero_gradient_is_fixed_point(self):
        params = md.init_params(3, 2, 2, hidden=(2,), rng=np.random.default_rng(0))
        before = [t.copy() for t in params.tensors()]
        grads = md.ParamGrads(
            trunk=[(np.zeros_like(w), np.zeros_like(b)) for w, b in params.trunk],
            incident_head=tuple(np.zeros_like(t) for t in params.incident_head),
            place_head=tuple(np.zeros_like(t) for t in params.place_head),
        )
        adam_step(params, grads, AdamState.for_params(params), lr=0.5)
        for t, orig in zip(params.tensors(), before):
            assert np.array_equal(t, orig)

    def test_deterministic(self):
        def run():
            rng = np.random.default_rng(1)
            params = md.init_params(3, 2, 2, hidden=(2,), rng=np.random.default_rng(0))
            state = AdamState.for_params(params)
            for _ in range(5):
                g = md.ParamGrads(
                    trunk=[(rng.normal(size=w.shape), rng.normal(size=b.shape))
                           for w, b in params.trunk],
                    incident_head=tuple(rng.normal(size=t.shape) for t in params.incident_head),
                    place_head=tuple(rng.normal(size=t.shape) for t in params.place_head),
                )
                adam_step(params, g, state, lr=0.01)
            return params

        a, b = run(), run()
        for ta, tb in zip(a.tensors(), b.tensors()):
            assert np.array_equal(ta, tb)

    def test_non_finite_gradient_rejected(self):
        params = md.init_params(2, 2, 2, hidden=(2,), rng=np.random.default_rng(0))
        grads = md.ParamGrads(
            trunk=[(np.full_like(w, np.nan), np.zeros_like(b)) for w, b in params.trunk],
            incident_head=tuple(np.zeros_like(t) for t in params.incident_head),
            place_head=tuple(np.zeros_like(t) for t in params.place_head),
        )
        with pytest.raises(NumericError, match="non-finite"):
            adam_step(params, grads, AdamState.for_params(params), lr=0.1)


class TestConfig:
    def test_defaults_follow_training_recipe(self):
        cfg = TrainConfig()
        assert cfg.loss_variant == "cn"
        assert cfg.use_class_negatives and cfg.use_places_aug
        assert cfg.lr == 1e-4
        assert cfg.batch_size == 256
        assert cfg.min_epochs == 10

    @pytest.mark.parametrize(
        "kw",
        [dict(loss_variant="hinge"), dict(lr=0.0), dict(batch_size=0),
         dict(min_epochs=5, max_epochs=3), dict(reduction="total_sum")],
    )
    def test_invalid_config_rejected(self, kw):
        with pytest.raises(ConfigError):
            TrainConfig(**kw).validate()


class TestCeTargets:
    def _records(self, tiny_tax):
        return [
            ds.PartialLabelRecord(id="pos", embedding_index=0, incident_pos="flood"),
            ds.PartialLabelRecord(id="aug", embedding_index=1, place_pos="street",
                                  source="places_aug"),
            ds.PartialLabelRecord(id="neg", embedding_index=2,
                                  incident_neg=frozenset({"fire"})),
            ds.PartialLabelRecord(id="none", embedding_index=3, place_pos="street"),
        ]

    def test_with_class_negatives(self, tiny_tax):
        idx, mask = _incident_ce_targets(self._records(tiny_tax), tiny_tax, True)
        n = tiny_tax.n_incidents
        assert idx.tolist() == [1, n, n, 0]
        assert mask.tolist() == [1.0, 1.0, 1.0, 0.0]

    def test_without_class_negatives(self, tiny_tax):
        idx, mask = _incident_ce_targets(self._records(tiny_tax), tiny_tax, False)
        n = tiny_tax.n_incidents
        assert mask.tolist() == [1.0, 1.0, 0.0, 0.0]
        assert idx[1] == n


class TestPlacesAugGuard:
    def test_leaked_gradient_raises(self, tiny_tax):
        records = [
            ds.PartialLabelRecord(id="a", embedding_index=0, incident_pos="fire"),
            ds.PartialLabelRecord(id="b", embedding_index=1, place_pos="street",
                                  source="places_aug"),
        ]
        store = make_store(np.zeros((2, 3)))
        (batch,) = ds.batch_iter(records, store, tiny_tax, 2, seed=0, epoch=0)
        bad = np.ones((2, tiny_tax.n_incidents))
        with pytest.raises(NumericError, match="places_aug"):
            _assert_places_aug_masked(batch, bad)

    def test_masked_gradient_passes(self, tiny_tax):
        records = [
            ds.PartialLabelRecord(id="a", embedding_index=0, incident_pos="fire"),
            ds.PartialLabelRecord(id="b", embedding_index=1, place_pos="street",
                                  source="places_aug"),
        ]
        store = make_store(np.zeros((2, 3)))
        (batch,) = ds.batch_iter(records, store, tiny_tax, 2, seed=0, epoch=0)
        aug_row = [i for i, r in enumerate(batch.records) if r.source == "places_aug"][0]
        good = np.ones((2, tiny_tax.n_incidents))
        good[aug_row] = 0.0
        _assert_places_aug_masked(batch, good)


class TestTrainLoop:
    def test_loss_decreases_on_separable_data(self, tiny_tax):
        records, store = toy_problem(tiny_tax)
        result = train(records, store, tiny_tax, TrainConfig(seed=0, **FAST))
        assert result.epochs_run >= 3
        assert result.log[-1]["train_loss"] < result.log[0]["train_loss"]
        assert set(result.log[0]) == {
            "epoch", "train_loss", "val_loss", "val_incident_map", "val_place_map"
        }

    def test_training_is_deterministic(self, tiny_tax):
        records, store = toy_problem(tiny_tax)
        r1 = train(records, store, tiny_tax, TrainConfig(seed=7, **FAST))
        r2 = train(records, store, tiny_tax, TrainConfig(seed=7, **FAST))
        assert r1.log == r2.log
        for a, b in zip(r1.params.tensors(), r2.params.tensors()):
            assert np.array_equal(a, b)

    def test_log_file_lines_are_json(self, tiny_tax, tmp_path):
        records, store = toy_problem(tiny_tax)
        path = tmp_path / "log.jsonl"
        result = train(records, store, tiny_tax, TrainConfig(seed=0, **FAST), log_path=path)
        lines = path.read_text().splitlines()
        assert len(lines) == result.epochs_run
        assert [json.loads(l) for l in lines] == result.log

    def test_places_aug_records_train_cleanly_under_cn(self, tiny_tax):
        # the in-loop guard raises if any augmentation row leaks gradient
        records, store = toy_problem(tiny_tax, with_aug=12)
        result = train(records, store, tiny_tax, TrainConfig(seed=0, **FAST))
        assert result.epochs_run >= 3

    def test_use_places_aug_false_drops_aug_records(self, tiny_tax):
        records, store = toy_problem(tiny_tax, with_aug=12)
        cfg = TrainConfig(seed=0, use_places_aug=False, **FAST)
        result = train(records, store, tiny_tax, cfg)
        split_ids = result.split.train | result.split.val | result.split.test
        aug_ids = {r.id for r in records if r.source == "places_aug"}
        assert not (split_ids & aug_ids)
        assert len(split_ids) == len(records) - len(aug_ids)

    def test_ce_variant_trains(self, tiny_tax):
        records, store = toy_problem(tiny_tax, with_aug=8)
        cfg = TrainConfig(seed=0, loss_variant="ce", **FAST)
        result = train(records, store, tiny_tax, cfg)
        assert result.log[-1]["train_loss"] < result.log[0]["train_loss"]

    def test_respects_max_epochs(self, tiny_tax):
        records, store = toy_problem(tiny_tax)
        cfg = TrainConfig(seed=0, lr=1e-2, batch_size=16, min_epochs=1, max_epochs=2,
                          hidden=(8,), split_ratios=(0.8, 0.1, 0.1))
        result = train(records, store, tiny_tax, cfg)
        assert result.epochs_run <= 2

    def test_empty_pool_rejected(self, tiny_tax):
        store = make_store(np.zeros((1, 3)))
        with pytest.raises(DataError, match="empty"):
            train([], store, tiny_tax, TrainConfig(seed=0, **FAST))

    def test_explicit_split_is_honored(self, tiny_tax):
        records, store = toy_problem(tiny_tax)
        ids = sorted(r.id for r in records)
        manifest = ds.SplitManifest(
            train=frozenset(ids[:48]), val=frozenset(ids[48:54]), test=frozenset(ids[54:])
        )
        result = train(records, store, tiny_tax, TrainConfig(seed=0, **FAST), split=manifest)
        assert result.split is manifest
