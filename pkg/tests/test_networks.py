import numpy as np
import pytest

from fundoscope.networks import (CEIL_POOL_NOTE, CLASSIFIER_NOTE, GLOBAL_TABLE, LOCAL_TABLE, TrainConfig,
                                 TrainingDiverged, binary_lesion_score, build_global, build_local,
                                 check_miniature, describe, format_table, grade, infer_patch, infer_patches,
                                 referable_score, train)
from fundoscope.nncore import ShapeError
from fundoscope.synthdata import patch_corpus


def table_rows(rows):
    return [(r["row"], r["type"], r["kernel"], r["stride"]) for r in rows if r["row"] is not None]


class TestArchitecture:
    def test_local_matches_table(self):
        rows = describe(build_local(64))
        assert table_rows(rows) == LOCAL_TABLE
        flagged = [r for r in rows if r["note"]]
        assert [r["note"] for r in flagged] == [CLASSIFIER_NOTE]

    def test_global_matches_table(self):
        rows = describe(build_global(256))
        assert table_rows(rows) == GLOBAL_TABLE
        flagged = [r for r in rows if r["note"]]
        assert [(r["row"], r["note"]) for r in flagged] == [(18, CEIL_POOL_NOTE)]

    def test_global_spatial_trace(self):
        net = build_global(256, width_divisor=16)
        pools = [s for spec, s in zip(net.layers, net.shapes) if spec.kind == "MaxPool2D"]
        assert [p[-1] for p in pools] == [128, 64, 32, 16, 8, 4, 2, 1, 1]

    def test_local_output_and_validation(self):
        assert build_local(32, width_divisor=8).output_dim == 4
        with pytest.raises(ValueError):
            build_local(30)

    def test_format_table_flags(self):
        text = format_table(describe(build_global(256, width_divisor=16)))
        assert text.count("[DEVIATION]") == 1

    def test_gradcheck_miniature(self):
        rep = check_miniature("local", seed=0, max_entries=3, size=16)
        assert rep.passed, rep.errors

    def test_gradcheck_sets_aside_unresolvable_kink(self):
        # seed 15 probes a BN shift whose ReLU switch lies ~1e-7 away: only
        # round-off-limited steps avoid it, so it is reported, not maximised
        rep = check_miniature("local", seed=15)
        assert rep.kinks >= 1 and set(rep.kink_limited) == {"04.BatchNorm.beta"}
        assert rep.passed and rep.to_dict()["kink_limited"]


class TestTraining:
    def test_learns_patch_corpus(self):
        X, y = patch_corpus(40, 16, seed=0)
        Xv, yv = patch_corpus(15, 16, seed=1)
        net = build_local(16, width_divisor=16, seed=0)
        _, hist = train(net, X / 255, y, Xv / 255, yv, TrainConfig(epochs=6, batch_size=16, seed=0))
        assert max(hist.val_accuracy) > 0.6
        assert hist.best_epoch == int(np.argmax(hist.val_accuracy)) + 1
        assert net.mode == "infer"

    def test_deterministic_under_seed(self):
        X, y = patch_corpus(10, 16, seed=0)
        runs = []
        for _ in range(2):
            net = build_local(16, width_divisor=16, seed=3, dtype=np.float64)
            _, hist = train(net, X / 255, y, X / 255, y, TrainConfig(epochs=2, batch_size=8, seed=4))
            runs.append((hist.metrics(), net.params[0]["W"].copy()))
        assert runs[0][0] == runs[1][0]
        np.testing.assert_array_equal(runs[0][1], runs[1][1])

    def test_divergence_is_reported(self):
        X, y = patch_corpus(4, 16, seed=0)
        net = build_local(16, width_divisor=16, seed=0)
        X[0, 0, 0, 0] = np.nan
        with pytest.raises(TrainingDiverged):
            train(net, X, y, X, y, TrainConfig(epochs=1, batch_size=16, class_balance="none"))

    def test_history_csv(self):
        X, y = patch_corpus(4, 16, seed=0)
        net = build_local(16, width_divisor=16, seed=0)
        _, hist = train(net, X / 255, y, X / 255, y, TrainConfig(epochs=2, batch_size=8))
        lines = hist.to_csv().splitlines()
        assert lines[0].startswith("epoch,train_loss") and len(lines) == 3

    def test_config_validation(self):
        with pytest.raises(ValueError):
            TrainConfig(batch_size=1)
        with pytest.raises(ValueError):
            TrainConfig(class_balance="smote")


class TestInference:
    def test_single_and_batch_agree(self):
        net = build_local(16, width_divisor=16, seed=0)
        X = np.random.default_rng(0).uniform(0, 1, (5, 3, 16, 16))
        labels, p, probs = infer_patches(net, X)
        for k in range(5):
            assert infer_patch(net, X[k]) == (labels[k], pytest.approx(p[k]))
        np.testing.assert_allclose(probs.sum(axis=1), 1, atol=1e-6)

    def test_wrong_patch_size(self):
        with pytest.raises(ShapeError):
            infer_patch(build_local(16, width_divisor=16), np.zeros((3, 32, 32)))

    def test_grade_output(self):
        net = build_global(32, width_divisor=16)
        g, p = grade(net, np.zeros((3, 32, 32)))
        assert 0 <= g <= 3 and p.shape == (4,)
        with pytest.raises(ShapeError):
            grade(net, np.zeros((3, 16, 16)))

    def test_score_heads(self):
        p = np.array([[0.1, 0.2, 0.3, 0.4], [0.7, 0.1, 0.1, 0.1]])
        np.testing.assert_allclose(referable_score(p), [0.7, 0.2])
        np.testing.assert_allclose(binary_lesion_score(p), [0.9, 0.3])
