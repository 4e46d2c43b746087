import math

import numpy as np
import pytest

from precofact import ensemble as ens
from precofact import metrics
from precofact.errors import ContractError, DatasetFormatError, JoinError


def pset(rows, tag="m", ids=None):
    rows = np.asarray(rows, dtype=np.float32)
    ids = ids or tuple(f"s{i}" for i in range(rows.shape[0]))
    return ens.PredictionSet(sample_ids=ids, probabilities=rows, model_tag=tag)


def dirichlet_set(n, seed, tag):
    rng = np.random.default_rng(seed)
    return pset(rng.dirichlet(np.ones(5), size=n).astype(np.float32), tag=tag)


class TestEnsembleConfig:
    def test_weights_need_not_sum_to_one(self):
        config = ens.EnsembleConfig(weights=(0.6, 0.2, 0.1, 0.2, 0.3), power=0.5)
        assert sum(config.weights) == pytest.approx(1.4)

    def test_positivity_enforced(self):
        with pytest.raises(ContractError):
            ens.EnsembleConfig(weights=(0.5, 0.0), power=1.0)
        with pytest.raises(ContractError):
            ens.EnsembleConfig(weights=(0.5,), power=0.0)
        with pytest.raises(ContractError):
            ens.EnsembleConfig(weights=(), power=1.0)


class TestCombine:
    def test_identity_case_bit_exact(self):
        member = dirichlet_set(8, seed=0, tag="solo")
        out = ens.combine([member], ens.EnsembleConfig(weights=(1.0,), power=1.0))
        np.testing.assert_array_equal(out.probabilities, member.probabilities)
        assert out.sample_ids == member.sample_ids
        assert out.model_tag == "ensemble"

    def test_power_half_spot_value(self):
        a = pset([[0.25, 0.25, 0.25, 0.15, 0.10]])
        b = pset([[0.81, 0.10, 0.05, 0.02, 0.02]])
        out = ens.combine(
            [a, b], ens.EnsembleConfig(weights=(0.5, 0.5), power=0.5)
        )
        # 0.5 * sqrt(0.25) + 0.5 * sqrt(0.81) = 0.25 + 0.45 = 0.7
        assert out.probabilities[0, 0] == pytest.approx(0.7, abs=1e-9)

    def test_published_configuration_accepted(self):
        members = [dirichlet_set(6, seed=i, tag=f"m{i}") for i in range(5)]
        config = ens.EnsembleConfig(weights=(0.6, 0.2, 0.1, 0.2, 0.3), power=0.5)
        out = ens.combine(members, config)
        assert out.probabilities.shape == (6, 5)

    def test_zero_probability_with_fractional_power(self):
        a = pset([[1.0, 0.0, 0.0, 0.0, 0.0]])
        out = ens.combine([a], ens.EnsembleConfig(weights=(2.0,), power=0.5))
        np.testing.assert_allclose(out.probabilities, [[2.0, 0, 0, 0, 0]])

    def test_output_not_renormalized(self):
        members = [dirichlet_set(4, seed=9, tag="a"), dirichlet_set(4, seed=10, tag="b")]
        out = ens.combine(
            members, ens.EnsembleConfig(weights=(2.0, 3.0), power=1.0)
        )
        np.testing.assert_allclose(out.probabilities.sum(axis=1), 5.0, rtol=1e-5)

    def test_weight_scaling_preserves_argmax(self):
        members = [dirichlet_set(30, seed=i, tag=f"m{i}") for i in range(3)]
        base = ens.combine(
            members, ens.EnsembleConfig(weights=(0.6, 0.2, 0.3), power=0.5)
        )
        scaled = ens.combine(
            members, ens.EnsembleConfig(weights=(6.0, 2.0, 3.0), power=0.5)
        )
        np.testing.assert_array_equal(
            metrics.argmax_predict(base.probabilities),
            metrics.argmax_predict(scaled.probabilities),
        )

    def test_member_permutation_with_weights(self):
        members = [dirichlet_set(10, seed=i, tag=f"m{i}") for i in range(3)]
        weights = (0.6, 0.2, 0.3)
        a = ens.combine(members, ens.EnsembleConfig(weights=weights, power=0.5))
        perm = [2, 0, 1]
        b = ens.combine(
            [members[i] for i in perm],
            ens.EnsembleConfig(weights=tuple(weights[i] for i in perm), power=0.5),
        )
        np.testing.assert_allclose(a.probabilities, b.probabilities, atol=1e-6)

    def test_weights_summing_to_one_with_unit_power_keep_distributions(self):
        members = [dirichlet_set(12, seed=i, tag=f"m{i}") for i in range(2)]
        out = ens.combine(
            members, ens.EnsembleConfig(weights=(0.4, 0.6), power=1.0)
        )
        np.testing.assert_allclose(out.probabilities.sum(axis=1), 1.0, atol=1e-5)

    def test_id_join_respects_order_differences(self):
        rows = np.eye(5, dtype=np.float32)[:3]
        a = pset(rows, ids=("x", "y", "z"), tag="a")
        b = pset(rows[::-1], ids=("z", "y", "x"), tag="b")
        out = ens.combine(
            [a, b], ens.EnsembleConfig(weights=(1.0, 1.0), power=1.0)
        )
        # both members agree per id after the join, so scores double
        np.testing.assert_allclose(out.probabilities, rows * 2)
        assert out.sample_ids == ("x", "y", "z")

    def test_mismatched_id_sets_error_lists_ids(self):
        a = pset(np.eye(5, dtype=np.float32)[:2], ids=("a", "b"))
        b = pset(np.eye(5, dtype=np.float32)[:2], ids=("a", "c"), tag="other")
        with pytest.raises(JoinError, match="'b'.*'c'"):
            ens.combine([a, b], ens.EnsembleConfig(weights=(1.0, 1.0), power=1.0))

    def test_weight_count_mismatch(self):
        a = dirichlet_set(3, seed=0, tag="a")
        with pytest.raises(ContractError):
            ens.combine([a], ens.EnsembleConfig(weights=(0.5, 0.5), power=1.0))


class TestGridSearch:
    def test_identity_grid_returns_single_score(self):
        member = dirichlet_set(20, seed=3, tag="solo")
        labels = metrics.argmax_predict(member.probabilities)
        config, table = ens.grid_search(
            [member], weight_grid=[(1.0,)], power_grid=[1.0], labels=labels
        )
        assert config.weights == (1.0,)
        assert len(table) == 1
        assert table[0][2] == 1.0

    def test_dominant_member_selected(self):
        rng = np.random.default_rng(4)
        labels = rng.integers(0, 5, size=40)
        perfect = np.eye(5, dtype=np.float32)[labels]
        noisy = rng.dirichlet(np.ones(5), size=40).astype(np.float32)
        good = pset(perfect * 0.9 + 0.02, tag="good")
        bad = pset(noisy, tag="bad")
        # corner weights approximate using one member only
        config, _ = ens.grid_search(
            [good, bad],
            weight_grid=[(1.0, 1e-9), (1e-9, 1.0)],
            power_grid=[1.0],
            labels=labels,
        )
        assert config.weights[0] == 1.0

    def test_grid_beats_or_matches_best_single(self):
        rng = np.random.default_rng(5)
        labels = rng.integers(0, 5, size=60)
        members = []
        singles = []
        for i in range(3):
            noise = rng.dirichlet(np.ones(5) * 2, size=60).astype(np.float32)
            onehot = np.eye(5, dtype=np.float32)[labels]
            mix = (0.3 + 0.2 * i) * onehot + (0.7 - 0.2 * i) * noise
            member = pset(mix, tag=f"m{i}")
            members.append(member)
            preds = metrics.argmax_predict(member.probabilities)
            singles.append(metrics.evaluate(preds, labels).weighted_f1)

        eps = 1e-9
        corners = [(1.0, eps, eps), (eps, 1.0, eps), (eps, eps, 1.0)]
        blends = [(0.5, 0.3, 0.2), (1.0, 1.0, 1.0)]
        config, table = ens.grid_search(
            members, weight_grid=corners + blends, power_grid=[0.5, 1.0],
            labels=labels,
        )
        best = max(score for _, _, score in table)
        assert best >= max(singles) - 1e-12

    def test_empty_grid_rejected(self):
        member = dirichlet_set(3, seed=6, tag="m")
        with pytest.raises(ContractError):
            ens.grid_search([member], weight_grid=[], power_grid=[1.0],
                            labels=[0, 1, 2])

    def test_deterministic_and_parallel_equal(self):
        members = [dirichlet_set(30, seed=i, tag=f"m{i}") for i in range(2)]
        labels = np.random.default_rng(7).integers(0, 5, size=30)
        grid = [(a, b) for a in (0.2, 0.5, 1.0) for b in (0.2, 0.5, 1.0)]
        c1, t1 = ens.grid_search(members, grid, [0.5, 1.0], labels, workers=1)
        c2, t2 = ens.grid_search(members, grid, [0.5, 1.0], labels, workers=4)
        assert c1 == c2
        assert t1 == t2


class TestPredictionFiles:
    def test_round_trip(self, tmp_path):
        preds = dirichlet_set(9, seed=8, tag="model-a")
        path = tmp_path / "p.pcfp"
        ens.write_predictions(preds, path)
        loaded = ens.read_predictions(path)
        assert loaded.sample_ids == preds.sample_ids
        assert loaded.model_tag == "model-a"
        np.testing.assert_array_equal(loaded.probabilities, preds.probabilities)

    def test_rewrite_byte_identical(self, tmp_path):
        preds = dirichlet_set(5, seed=9, tag="model-b")
        p1, p2 = tmp_path / "a.pcfp", tmp_path / "b.pcfp"
        ens.write_predictions(preds, p1)
        ens.write_predictions(ens.read_predictions(p1), p2)
        assert p1.read_bytes() == p2.read_bytes()

    def test_combined_file_round_trips(self, tmp_path):
        members = [dirichlet_set(4, seed=i, tag=f"m{i}") for i in range(2)]
        out = ens.combine(
            members, ens.EnsembleConfig(weights=(0.7, 0.7), power=0.5)
        )
        path = tmp_path / "e.pcfp"
        ens.write_predictions(out, path)
        loaded = ens.read_predictions(path)
        # disk stores float32; in-memory combination stays double
        np.testing.assert_array_equal(
            loaded.probabilities, out.probabilities.astype(np.float32)
        )

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "x.pcfp"
        path.write_bytes(b"WHAT" + b"\x00" * 16)
        with pytest.raises(DatasetFormatError) as exc:
            ens.read_predictions(path)
        assert exc.value.category == "bad-magic"

    def test_truncation_detected(self, tmp_path):
        preds = dirichlet_set(6, seed=10, tag="m")
        path = tmp_path / "t.pcfp"
        ens.write_predictions(preds, path)
        raw = path.read_bytes()
        path.write_bytes(raw[:-3])
        with pytest.raises(DatasetFormatError) as exc:
            ens.read_predictions(path)
        assert exc.value.category == "truncated-record"


def test_power_half_matches_direct_evaluation():
    # full row check of the combination formula against direct math
    rng = np.random.default_rng(11)
    a = rng.dirichlet(np.ones(5), size=3).astype(np.float32)
    b = rng.dirichlet(np.ones(5), size=3).astype(np.float32)
    out = ens.combine(
        [pset(a, tag="a"), pset(b, tag="b")],
        ens.EnsembleConfig(weights=(0.6, 0.2), power=0.5),
    )
    expected = 0.6 * np.sqrt(a.astype(np.float64)) + 0.2 * np.sqrt(b.astype(np.float64))
    np.testing.assert_allclose(out.probabilities, expected, rtol=1e-6)
    assert math.isclose(
        float(out.probabilities[0].sum()),
        float(expected[0].sum()), rel_tol=1e-6,
    )
