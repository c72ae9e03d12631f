import hashlib
import json
import math
from fractions import Fraction

import numpy as np
import pytest

from quann.synthgen import (SCALAR_TASKS, TASKS, VECTOR_TASKS, Dataset, DatasetRecord, TaskSpec, default_task,
                            generate_dataset, iter_batches, oracle, oracle_scalar, oracle_vector, read_dataset,
                            write_dataset)


def random_points(rng, kind, n):
    if kind in SCALAR_TASKS:
        return rng.integers(1, 10, size=(n, 1)).astype(float)
    p = rng.uniform(-10, 11, size=(n, 4))
    # plant exact duplicates so the tie rules get exercised
    p[-1] = p[0]
    return p


def l1_objective(points, z):
    # exact rationals: points between the two middle order statistics tie exactly
    return sum(abs(Fraction(float(a)) - Fraction(float(b))) for row in points for a, b in zip(row, z))


class TestVectorOracles:
    def test_medoid_example(self):
        # distance sums 2, 1 + sqrt 2, 1 + sqrt 2
        np.testing.assert_array_equal(oracle_vector("medoid", [[0, 0], [1, 0], [0, 1]]), [0, 0])

    def test_skewness_symmetric_is_zero(self):
        p = np.array([[-1.0, 5.0], [0.0, 6.0], [1.0, 7.0]])
        np.testing.assert_array_equal(oracle_vector("skewness", p), [0.0, 0.0])

    def test_skewness_constant_coordinate(self):
        p = np.array([[2.0, 0.0], [2.0, 0.0], [2.0, 3.0]])
        out = oracle_vector("skewness", p)
        assert out[0] == 0.0
        # (1/n) sum z^3 for {0, 0, 3}: z = (-1/sqrt2, -1/sqrt2, sqrt2)
        assert out[1] == pytest.approx((2 * -(0.5 ** 1.5) + 2 ** 1.5) / 3, rel=1e-14)

    def test_variance_example(self):
        assert oracle_vector("variance", [1.0, 2.0, 3.0])[0] == pytest.approx(2 / 3, rel=1e-15)

    def test_log_sum_exp_singleton(self):
        np.testing.assert_array_equal(oracle_vector("log_sum_exp", [[3.5, -2.0]]), [3.5, -2.0])

    def test_log_sum_exp_stable(self):
        assert oracle_vector("log_sum_exp", [[1000.0], [1000.0]])[0] == pytest.approx(1000 + math.log(2))

    def test_midpoint_pair(self):
        np.testing.assert_array_equal(oracle_vector("midpoint", [[0.0, 2.0], [4.0, -2.0]]), [2.0, 0.0])

    def test_midpoint_needs_two(self):
        with pytest.raises(ValueError):
            oracle_vector("midpoint", [[1.0, 2.0]])

    def test_midpoint_brute_force(self, rng):
        for _ in range(50):
            p = rng.normal(size=(int(rng.integers(2, 12)), 3))
            best = max(((np.linalg.norm(a - b), i, j) for i, a in enumerate(p) for j, b in enumerate(p) if i < j))
            _, i, j = best
            np.testing.assert_allclose(oracle_vector("midpoint", p), 0.5 * (p[i] + p[j]), rtol=1e-15)

    def test_median_even_takes_midpoint(self):
        np.testing.assert_array_equal(oracle_vector("marginal_median", [[1.0], [4.0], [2.0], [10.0]]), [3.0])
        np.testing.assert_array_equal(oracle_vector("geometric_median", [[1.0], [4.0], [2.0], [10.0]]), [3.0])

    def test_quadratic_mean_and_row_max(self):
        assert oracle_vector("quadratic_mean", [[3.0], [4.0]])[0] == pytest.approx(math.sqrt(12.5))
        np.testing.assert_array_equal(oracle_vector("row_max", [[1, 9], [5, 2]]), [5, 9])

    def test_vec_max_norm_tie(self):
        np.testing.assert_array_equal(oracle_vector("vec_max_norm", [[0.0, 1.0], [1.0, 0.0], [0.1, 0.1]]),
                                      [0.0, 1.0])

    def test_medoid_tie_is_lexicographic(self):
        # two points: both have distance sum 1
        for order in ([[1.0, 0.0], [0.0, 5.0]], [[0.0, 5.0], [1.0, 0.0]]):
            np.testing.assert_array_equal(oracle_vector("medoid", order), [0.0, 5.0])

    def test_unknown_kind(self):
        with pytest.raises(ValueError):
            oracle_vector("mean", [[1.0]])
        with pytest.raises(ValueError):
            oracle_vector("row_max", np.zeros((0, 2)))


class TestScalarOracles:
    def test_examples(self):
        assert oracle_scalar("harmonic_mean", [1, 1]) == 1.0
        assert oracle_scalar("geometric_mean", [1, 4]) == pytest.approx(2.0, rel=1e-15)
        assert oracle_scalar("mode", [3, 3, 7]) == 3.0
        assert oracle_scalar("mode", [7, 3]) == 3.0
        assert oracle_scalar("midrange", [1, 9, 4]) == 5.0
        assert oracle_scalar("sum_s", [1, 2, 3]) == 6.0
        assert oracle_scalar("max_s", [1, 8, 3]) == 8.0
        assert oracle_scalar("median", [5, 1, 3]) == 3.0
        assert oracle_scalar("mean", [1, 2]) == 1.5
        assert oracle_scalar("variance_s", [1, 3]) == 1.0
        assert oracle_scalar("log_mean_exp", [2.0, 2.0]) == pytest.approx(2.0, abs=1e-15)

    def test_domain(self):
        with pytest.raises(ValueError, match="positive"):
            oracle_scalar("geometric_mean", [1, 0])
        with pytest.raises(ValueError, match="positive"):
            oracle_scalar("harmonic_mean", [-1, 2])
        with pytest.raises(ValueError):
            oracle_scalar("mean", [])

    def test_oracle_dispatch_shape(self):
        assert oracle("mean", [[1.0], [3.0]]).shape == (1,)
        assert oracle("row_max", [[1.0, 3.0]]).shape == (2,)


class TestOracleProperties:
    @pytest.mark.parametrize("kind", TASKS)
    def test_permutation_invariant_exactly(self, kind, rng):
        for _ in range(20):
            p = random_points(rng, kind, int(rng.integers(2, 40)))
            base = oracle(kind, p)
            for _ in range(5):
                assert oracle(kind, p[rng.permutation(len(p))]).tobytes() == base.tobytes()

    def test_geometric_median_dominates(self, rng):
        p = rng.uniform(-10, 11, size=(15, 4))
        z = oracle_vector("geometric_median", p)
        best = l1_objective(p, z)
        for c in rng.uniform(-10, 11, size=(1000, 4)):
            assert best <= l1_objective(p, c)

    def test_geometric_median_dominates_pairs(self, rng):
        # n = 2: the whole box between the points is optimal
        p = rng.uniform(-10, 11, size=(2, 4))
        z = oracle_vector("geometric_median", p)
        lo, hi = p.min(axis=0), p.max(axis=0)
        for c in rng.uniform(lo, hi, size=(200, 4)):
            assert l1_objective(p, z) <= l1_objective(p, c)

    def test_medoid_brute_force(self, rng):
        for _ in range(30):
            p = rng.normal(size=(int(rng.integers(1, 15)), 3))
            sums = [sum(np.linalg.norm(a - b) for b in p) for a in p]
            got = oracle_vector("medoid", p)
            assert any((got == row).all() for row in p)
            assert sum(np.linalg.norm(got - b) for b in p) <= min(sums) + 1e-12

    def test_mean_type_affine_equivariance(self, rng):
        for _ in range(20):
            x = rng.uniform(0, 1, size=(9, 3))
            a, b = rng.uniform(0.1, 1), rng.uniform(-10, 10, size=3)
            for kind in ("marginal_median", "geometric_median", "midpoint"):
                np.testing.assert_allclose(oracle_vector(kind, a * x + b), a * oracle_vector(kind, x) + b,
                                           rtol=1e-12, atol=1e-12)
            np.testing.assert_allclose(oracle_scalar("mean", a * x[:, 0] + b[0]),
                                       a * oracle_scalar("mean", x[:, 0]) + b[0], rtol=1e-12)

    def test_row_max_commutes_with_positive_affine(self, rng):
        for _ in range(20):
            x = rng.uniform(0, 1, size=(9, 3))
            a, b = rng.uniform(0.01, 1), rng.uniform(-10, 10, size=3)
            # rounding is monotone, so the max commutes bit for bit
            np.testing.assert_array_equal(oracle_vector("row_max", a * x + b), a * x.max(axis=0) + b)


class TestTaskSpec:
    def test_unknown_kind_lists_valid(self):
        with pytest.raises(ValueError, match="row_max"):
            TaskSpec("maximum")

    def test_cardinality_bounds(self):
        with pytest.raises(ValueError):
            TaskSpec("row_max", n_min=1)
        with pytest.raises(ValueError):
            TaskSpec("row_max", n_min=10, n_max=5)

    def test_scalar_dim(self):
        with pytest.raises(ValueError, match="dim=1"):
            TaskSpec("mean", dim=16)

    def test_defaults(self):
        assert default_task("row_max") == TaskSpec("row_max", 2, 1024, 16)
        assert default_task("mode").dim == 1 and default_task("mode").target_width == 1
        assert TaskSpec.from_dict(default_task("skewness").to_dict()) == default_task("skewness")


def small_dataset(kind="row_max", seed=3, counts=(6, 3, 2)):
    task = TaskSpec(kind, n_max=20) if kind in VECTOR_TASKS else default_task(kind)
    return generate_dataset(task, counts, seed)


class TestGenerate:
    def test_counts_and_ranges(self):
        ds = small_dataset(counts=(40, 5, 5))
        assert ds.counts == (40, 5, 5)
        for rec in ds.train + ds.val + ds.test:
            assert 2 <= len(rec.points) <= 20 and rec.points.shape[1] == 16
            assert (rec.points > -10).all() and (rec.points < 11).all()
            assert rec.target.tobytes() == oracle("row_max", rec.points).tobytes()

    def test_scalar_records(self):
        ds = small_dataset("mode", counts=(30, 1, 1))
        for rec in ds.train:
            assert rec.points.shape[1] == 1 and set(rec.points.ravel()) <= set(range(1, 10))

    def test_deterministic(self):
        a, b = small_dataset(seed=8), small_dataset(seed=8)
        assert [r.to_json() for r in a.train] == [r.to_json() for r in b.train]
        assert [r.to_json() for r in small_dataset(seed=9).train] != [r.to_json() for r in a.train]

    def test_splits_differ(self):
        ds = small_dataset(counts=(3, 3, 3))
        assert ds.train[0].to_json() != ds.val[0].to_json() != ds.test[0].to_json()

    def test_prefix_stable(self):
        # per-record streams: asking for more records keeps the earlier ones
        short, long = small_dataset(counts=(3, 1, 1)), small_dataset(counts=(7, 2, 2))
        assert [r.to_json() for r in short.train] == [r.to_json() for r in long.train[:3]]

    def test_counts_positive(self):
        with pytest.raises(ValueError):
            generate_dataset(default_task("row_max"), (0, 1, 1), 0)

    def test_iter_batches(self):
        ds = small_dataset(counts=(5, 1, 1))
        chunks = list(iter_batches(ds.train, 2))
        assert [len(c[0]) for c in chunks] == [2, 2, 1]
        assert chunks[0][1].shape == (2, 16)


def sha(path):
    return hashlib.sha256(path.read_bytes()).hexdigest()


class TestFiles:
    def test_record_json_round_trip(self, rng):
        rec = DatasetRecord(rng.normal(size=(3, 2)), rng.normal(size=2))
        back = DatasetRecord.from_json(rec.to_json())
        assert back.points.tobytes() == rec.points.tobytes() and back.target.tobytes() == rec.target.tobytes()

    def test_write_read(self, tmp_path):
        ds = small_dataset()
        manifest = json.loads(write_dataset(ds, tmp_path / "d").read_text())
        assert manifest["task"] == "row_max" and manifest["counts"] == {"train": 6, "val": 3, "test": 2}
        assert manifest["seed"] == 3 and manifest["dim"] == 16 and manifest["generator_version"] == 1
        back = read_dataset(tmp_path / "d")
        assert back.task == ds.task and back.counts == ds.counts
        assert all(a.to_json() == b.to_json() for a, b in zip(back.train, ds.train))

    def test_hashes_idempotent(self, tmp_path):
        write_dataset(small_dataset(), tmp_path / "a")
        write_dataset(small_dataset(), tmp_path / "b")
        for name in ("train.jsonl", "val.jsonl", "test.jsonl", "manifest.json"):
            assert sha(tmp_path / "a" / name) == sha(tmp_path / "b" / name)

    def test_tampered_target(self, tmp_path):
        write_dataset(small_dataset(), tmp_path)
        path = tmp_path / "train.jsonl"
        lines = path.read_text().splitlines()
        obj = json.loads(lines[0])
        obj["target"][0] += 1.0
        lines[0] = json.dumps(obj)
        path.write_text("\n".join(lines) + "\n")
        with pytest.raises(ValueError, match="oracle"):
            read_dataset(tmp_path)

    def test_malformed_line_number(self, tmp_path):
        write_dataset(small_dataset(), tmp_path)
        path = tmp_path / "val.jsonl"
        lines = path.read_text().splitlines()
        lines[1] = lines[1][:20]
        path.write_text("\n".join(lines) + "\n")
        with pytest.raises(ValueError, match=r"val\.jsonl:2"):
            read_dataset(tmp_path)

    def test_missing_manifest(self, tmp_path):
        with pytest.raises(OSError, match="manifest"):
            read_dataset(tmp_path)

    def test_unwritable_target(self, tmp_path):
        blocker = tmp_path / "file"
        blocker.write_text("x")
        with pytest.raises(OSError, match="file"):
            write_dataset(small_dataset(), blocker / "sub")

    def test_dataset_split_names(self):
        with pytest.raises(ValueError):
            Dataset(default_task("mean"), 0).split("dev")
