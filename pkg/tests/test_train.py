import csv

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from patchforge import functional as F
from patchforge.errors import ContractError, DivergenceError, InvalidInputError
from patchforge.models import build_adn, build_refinenet
from patchforge.tensor import Tensor, no_grad
from patchforge.train import (
    TrainConfig,
    confusion_matrix,
    evaluate_logits,
    export_features,
    fuse_slice_vote,
    predict_logits,
    report_from_predictions,
    train_arrays,
    write_class_csv,
    write_confusion_csv,
    write_features_csv,
    write_loss_csv,
    write_slide_csv,
)


def tiny_refinenet(seed=0, dtype=np.float32):
    return build_refinenet(num_classes=3, dtype=dtype, seed=seed, widths=[4, 4, 8, 8, 8, 8], hidden=16)


def array_batches(x, y):
    return lambda idx: (x[idx], y[idx])


class TestSchedule:
    def test_default_milestones_split_thirds(self):
        assert TrainConfig(epochs=9).resolved_milestones() == (3, 6)
        assert TrainConfig(epochs=1).resolved_milestones() == (1, 2)

    @pytest.mark.parametrize("epoch,lr", [(0, 0.05), (1, 0.05), (2, 0.01), (3, 0.01), (4, 0.001),
                                          (5, 0.0001), (9, 0.0001)])
    def test_three_stage_rates(self, epoch, lr):
        cfg = TrainConfig(epochs=10, milestones=(2, 4, 5))
        assert cfg.lr_at(epoch) == pytest.approx(lr, rel=1e-12)

    def test_schedule_recoverable_from_lr_log(self):
        rng = np.random.default_rng(0)
        x = rng.standard_normal((8, 3, 32, 32)).astype(np.float32)
        y = np.arange(8) % 3
        cfg = TrainConfig(epochs=6, batch=4, milestones=(2, 4), lr=0.01, lr_second=0.005)
        res = train_arrays(tiny_refinenet(), 8, array_batches(x, y), cfg)
        assert res.lrs == pytest.approx([0.01, 0.01, 0.005, 0.005, 0.0005, 0.0005])
        assert [e for e, _, _ in res.rows()] == list(range(6))

    @pytest.mark.parametrize("kw", [dict(lr=0), dict(lr_second=-1), dict(lr_decay=0),
                                    dict(batch=0), dict(epochs=-1), dict(milestones=(3, 3))])
    def test_invalid_config(self, kw):
        with pytest.raises(ContractError):
            TrainConfig(**kw)


class TestTrainLoop:
    def test_zero_epochs_leave_parameters_untouched(self):
        m = tiny_refinenet()
        before = {k: v.data.copy() for k, v in m.named_parameters().items()}
        x = np.zeros((4, 3, 32, 32), dtype=np.float32)
        res = train_arrays(m, 4, array_batches(x, np.zeros(4, dtype=int)), TrainConfig(epochs=0))
        assert res.losses == []
        for k, v in m.named_parameters().items():
            assert np.array_equal(v.data, before[k])

    def test_seeded_training_is_reproducible(self):
        rng = np.random.default_rng(1)
        x = rng.standard_normal((12, 3, 32, 32)).astype(np.float32)
        y = np.arange(12) % 3
        cfg = TrainConfig(epochs=2, batch=4, seed=5)
        a, b = tiny_refinenet(), tiny_refinenet()
        ra = train_arrays(a, 12, array_batches(x, y), cfg)
        rb = train_arrays(b, 12, array_batches(x, y), cfg)
        assert ra.losses == rb.losses
        for (k, va), vb in zip(a.named_parameters().items(), b.named_parameters().values()):
            assert np.array_equal(va.data, vb.data), k

    @pytest.mark.parametrize("seed", range(20))
    def test_single_sample_step_lowers_its_loss(self, seed):
        rng = np.random.default_rng(seed)
        m = tiny_refinenet(seed=seed, dtype=np.float64)
        x = rng.standard_normal((1, 3, 64, 64))
        y = np.array([int(rng.integers(3))])

        def loss():
            m.train()
            with no_grad():
                return F.softmax_cross_entropy(m(Tensor(x)), y).value

        before = loss()
        train_arrays(m, 1, array_batches(x, y), TrainConfig(epochs=1, batch=1, lr=1e-4, seed=seed))
        assert loss() < before

    def test_divergence_names_epoch_and_rate(self):
        rng = np.random.default_rng(2)
        x = (rng.standard_normal((8, 3, 32, 32)) * 1e3).astype(np.float32)
        y = np.arange(8) % 3
        with pytest.raises(DivergenceError) as exc, np.errstate(over="ignore", invalid="ignore"):
            train_arrays(tiny_refinenet(), 8, array_batches(x, y),
                         TrainConfig(epochs=3, batch=4, lr=1e30, lr_second=1e30))
        assert exc.value.epoch == 0 and exc.value.lr == 1e30
        assert "epoch 0" in str(exc.value)

    def test_on_epoch_can_stop_early(self):
        x = np.zeros((4, 3, 32, 32), dtype=np.float32)
        res = train_arrays(tiny_refinenet(), 4, array_batches(x, np.zeros(4, dtype=int)),
                           TrainConfig(epochs=10), on_epoch=lambda e, r: e == 1)
        assert len(res.losses) == 2

    def test_empty_training_set_rejected(self):
        with pytest.raises(InvalidInputError):
            train_arrays(tiny_refinenet(), 0, None, TrainConfig(epochs=1))


class TestMetrics:
    def test_perfect_predictions(self):
        truth = [0, 1, 2, 2, 1, 0]
        rep = report_from_predictions(truth, truth, 3)
        assert rep.aca == 1.0
        assert np.array_equal(rep.confusion, np.diag([2, 2, 2]))

    def test_confusion_rows_and_trace(self):
        rng = np.random.default_rng(3)
        truth = rng.integers(0, 4, 500)
        pred = rng.integers(0, 4, 500)
        rep = report_from_predictions(truth, pred, 4)
        assert np.array_equal(rep.confusion.sum(axis=1), np.bincount(truth, minlength=4))
        assert rep.aca == np.trace(rep.confusion) / 500
        assert rep.count == 500
        for k in range(4):
            assert rep.per_class[k] == rep.confusion[k, k] / rep.confusion[k].sum()

    def test_empty_class_row_is_nan(self):
        rep = report_from_predictions([0, 0, 1], [0, 1, 1], 3)
        assert np.isnan(rep.per_class[2])
        assert rep.as_dict()["per_class"][2] is None

    def test_per_class_rate_replay(self):
        # balanced set of 10000 per class replaying four per-class rates
        rates = [0.9630, 0.9236, 0.9350, 0.9423]
        n = 10000
        truth, pred = [], []
        for k, r in enumerate(rates):
            hits = round(r * n)
            truth += [k] * n
            pred += [k] * hits + [(k + 1) % 4] * (n - hits)
        rep = report_from_predictions(truth, pred, 4)
        assert round(100 * rep.aca, 2) == 94.10
        assert [round(100 * v, 2) for v in rep.per_class] == [96.30, 92.36, 93.50, 94.23]

    @settings(max_examples=50, deadline=None)
    @given(st.lists(st.tuples(st.integers(0, 3), st.integers(0, 3)), min_size=1, max_size=60),
           st.randoms(use_true_random=False))
    def test_aca_permutation_invariant(self, pairs, rnd):
        shuffled = list(pairs)
        rnd.shuffle(shuffled)
        a = report_from_predictions(*zip(*pairs), 4)
        b = report_from_predictions(*zip(*shuffled), 4)
        assert a.aca == b.aca
        assert np.array_equal(a.confusion, b.confusion)

    def test_logit_ties_take_first_index(self):
        rep = evaluate_logits(np.array([[1.0, 1.0, 0.0], [0.0, 2.0, 2.0]]), [0, 1])
        assert rep.aca == 1.0

    def test_confusion_counts_repeated_pairs(self):
        m = confusion_matrix([1, 1, 1], [2, 2, 0], 3)
        assert m[1, 2] == 2 and m[1, 0] == 1 and m.sum() == 3


class TestVoting:
    def test_majority(self):
        p = np.eye(3)[[1, 1, 2]]
        assert fuse_slice_vote({"s": p}) == {"s": 1}

    def test_tie_goes_to_larger_confidence_mass(self):
        # votes 1,1,2,2; class 1 mass 1.7, class 2 mass 1.9
        q = np.array([[0.0, 0.9, 0.0], [0.0, 0.8, 0.0], [0.0, 0.0, 0.95], [0.0, 0.0, 0.95]])
        assert q[:, 1].sum() == pytest.approx(1.7) and q[:, 2].sum() == pytest.approx(1.9)
        assert fuse_slice_vote({"s": q}) == {"s": 2}

    def test_unanimous_ignores_confidence(self):
        p = np.array([[0.1, 0.5, 0.4], [0.0, 0.34, 0.33], [0.3, 0.4, 0.3]])
        assert fuse_slice_vote({"s": p}) == {"s": 1}

    def test_exact_tie_falls_to_lower_index(self):
        p = np.array([[0.6, 0.4], [0.4, 0.6]])
        assert fuse_slice_vote({"s": p}) == {"s": 0}

    @settings(max_examples=50, deadline=None)
    @given(st.integers(1, 12), st.integers(0, 10_000), st.randoms(use_true_random=False))
    def test_order_invariant(self, n, seed, rnd):
        p = np.random.default_rng(seed).dirichlet(np.ones(4), size=n)
        perm = list(range(n))
        rnd.shuffle(perm)
        assert fuse_slice_vote({"s": p}) == fuse_slice_vote({"s": p[perm]})

    def test_slide_without_patches_rejected(self):
        with pytest.raises(InvalidInputError):
            fuse_slice_vote({"s": np.zeros((0, 3))})


class _Rec:
    def __init__(self, row):
        self.id, self.label, self.row = f"p{row}", row % 2, row


class _ArraySource:
    def __init__(self, x):
        self.x = x

    def batch(self, records):
        return self.x[[r.row for r in records]]


class TestFeatures:
    def test_refinenet_penultimate_is_256(self):
        m = build_refinenet(num_classes=4, seed=0)
        x = np.random.default_rng(4).standard_normal((3, 3, 32, 32)).astype(np.float32)
        rows = export_features(m, _ArraySource(x), [_Rec(0), _Rec(1), _Rec(1)])
        assert len(rows) == 3
        assert all(len(v) == 256 for _, _, v in rows)
        assert np.array_equal(rows[1][2], rows[2][2])

    def test_adn_penultimate_width(self):
        m = build_adn(num_classes=4, seed=0)
        x = np.random.default_rng(5).standard_normal((2, 3, 16, 16)).astype(np.float32)
        with no_grad():
            f = m.features(Tensor(x)).data
        assert f.shape == (2, 128)

    def test_unknown_layer(self):
        with pytest.raises(ContractError):
            export_features(tiny_refinenet(), _ArraySource(np.zeros((1, 3, 32, 32))), [_Rec(0)], layer="conv9")

    def test_predict_rows_independent_of_batch(self):
        m = build_refinenet(num_classes=4, seed=1)
        x = np.random.default_rng(6).standard_normal((9, 3, 32, 32)).astype(np.float32)
        full = predict_logits(m, x, batch=9)
        split = predict_logits(m, x, batch=2)
        one = np.concatenate([predict_logits(m, x[i:i + 1]) for i in range(9)])
        assert np.array_equal(full, split) and np.array_equal(full, one)


class TestWriters:
    def test_csv_headers(self, tmp_path):
        rep = report_from_predictions([0, 1, 1], [0, 1, 0], 2)
        write_class_csv(tmp_path / "c.csv", rep, ["a", "b"])
        write_confusion_csv(tmp_path / "m.csv", rep, ["a", "b"])
        write_features_csv(tmp_path / "f.csv", [("p0", 0, np.array([1.0, 2.0]))])
        write_slide_csv(tmp_path / "s.csv", {"s2": 1, "s1": 0}, ["a", "b"], {"s1": 3})
        rows = lambda n: list(csv.reader(open(tmp_path / n)))
        assert rows("c.csv") == [["class", "aca"], ["a", "1.0"], ["b", "0.5"]]
        assert rows("m.csv") == [["true\\pred", "a", "b"], ["a", "1", "0"], ["b", "1", "1"]]
        assert rows("f.csv") == [["id", "label", "f0", "f1"], ["p0", "0", "1.0", "2.0"]]
        assert rows("s.csv")[1:] == [["s1", "0", "a", "3"], ["s2", "1", "b", ""]]

    def test_loss_csv_round_trips_floats(self, tmp_path):
        rng = np.random.default_rng(7)
        x = rng.standard_normal((4, 3, 32, 32)).astype(np.float32)
        res = train_arrays(tiny_refinenet(), 4, array_batches(x, np.arange(4) % 3),
                           TrainConfig(epochs=2, batch=2))
        write_loss_csv(tmp_path / "l.csv", res)
        rows = list(csv.reader(open(tmp_path / "l.csv")))
        assert rows[0] == ["epoch", "loss", "lr"]
        assert [float(r[1]) for r in rows[1:]] == res.losses
