"""MI estimator against brute-force oracles, MIG edge cases, attribution,
and latent traversal plumbing."""

import math
import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from favae.datasets import gen_2d_reaching
from favae.metrics import (
    LatentFactorTable,
    MigReport,
    adaptive_bins,
    build_latent_table,
    default_traversal_values,
    discrete_entropy,
    export_traversal_csv,
    export_traversal_svg,
    ladder_attribution,
    latent_traversal,
    median_path_reference,
    mig,
    mutual_info,
)
from favae.model import LadderConfig, LadderModel


def mi_bruteforce(z, v, bins):
    """Independent plug-in MI: manual binning, dict-of-counts, double loop."""
    z = list(map(float, z))
    lo, hi = min(z), max(z)
    if hi <= lo:
        zb = [0] * len(z)
    else:
        width = (hi - lo) / bins
        zb = [min(bins - 1, int((val - lo) / width)) for val in z]
    n = len(z)
    joint, zc, vc = {}, {}, {}
    for a, b in zip(zb, v):
        joint[(a, b)] = joint.get((a, b), 0) + 1
        zc[a] = zc.get(a, 0) + 1
        vc[b] = vc.get(b, 0) + 1
    total = 0.0
    for (a, b), c in joint.items():
        total += (c / n) * math.log((c * n) / (zc[a] * vc[b]))
    return total


class TestMutualInfo:
    def test_identity_coding_two_levels(self):
        v = np.array([0, 1, 0, 1, 0, 1, 0, 1])
        z = v.astype(float)
        assert mutual_info(z, v, bins=2) == pytest.approx(math.log(2), abs=1e-12)

    def test_independent_noise_is_near_zero(self):
        rng = np.random.default_rng(0)
        n, bins, k = 4000, 10, 2
        z = rng.standard_normal(n)
        v = rng.integers(0, k, n)
        bias_bound = (bins - 1) * (k - 1) / (2 * n)
        assert mutual_info(z, v, bins=bins) < 10 * bias_bound

    def test_matches_bruteforce_small_table(self):
        z = np.array([0.11, 0.23, 0.31, 0.42, 0.58, 0.69, 0.82, 0.94])
        v = np.array([0, 0, 1, 1, 0, 0, 1, 1])
        got = mutual_info(z, v, bins=2)
        assert got == pytest.approx(mi_bruteforce(z, v, 2), abs=1e-12)
        assert got == pytest.approx(0.0, abs=1e-12)  # halves are balanced

    @pytest.mark.parametrize("seed", range(5))
    def test_matches_bruteforce_random(self, seed):
        rng = np.random.default_rng(seed)
        n = rng.integers(8, 60)
        z = rng.standard_normal(n)
        v = rng.integers(0, 4, n)
        for bins in (2, 3, 7):
            assert mutual_info(z, v, bins) == pytest.approx(
                mi_bruteforce(z, v, bins), abs=1e-12)

    def test_constant_latent_returns_zero(self):
        assert mutual_info(np.ones(10), np.arange(10) % 2, bins=5) == 0.0

    def test_symmetry_on_discrete_inputs(self):
        rng = np.random.default_rng(1)
        a = rng.integers(0, 3, 50)
        b = rng.integers(0, 3, 50)
        # identity binning on 0..2 makes both directions the same histogram
        assert mutual_info(a.astype(float), b, bins=3) == pytest.approx(
            mutual_info(b.astype(float), a, bins=3), abs=1e-12)

    @given(st.data())
    @settings(max_examples=60, deadline=None)
    def test_bounds_property(self, data):
        n = data.draw(st.integers(4, 40))
        bins = data.draw(st.integers(2, 8))
        k = data.draw(st.integers(2, 4))
        z = np.array(data.draw(st.lists(
            st.floats(-100, 100, allow_nan=False), min_size=n, max_size=n)))
        v = np.array(data.draw(st.lists(st.integers(0, k - 1), min_size=n, max_size=n)))
        mi = mutual_info(z, v, bins)
        assert mi >= -1e-12
        assert mi <= math.log(bins) + 1e-9
        assert mi <= discrete_entropy(v) + 1e-9

    def test_bad_inputs(self):
        with pytest.raises(ValueError):
            mutual_info(np.ones(3), np.ones(4, dtype=int), 2)
        with pytest.raises(ValueError):
            mutual_info(np.ones(1), np.ones(1, dtype=int), 2)
        with pytest.raises(ValueError):
            mutual_info(np.ones(5), np.ones(5, dtype=int), 1)


def full_factorial(cards):
    grids = np.meshgrid(*[np.arange(c) for c in cards], indexing="ij")
    return np.stack([g.reshape(-1) for g in grids], axis=1)


class TestMig:
    def test_perfect_distinct_codes_give_one(self):
        factors = full_factorial((2, 3))
        table = LatentFactorTable(
            latents=factors.astype(float) + 0.0,
            ladder_index=np.zeros(2, dtype=int),
            factor_levels=factors,
            factor_names=("a", "b"),
            n_bins=3,
        )
        report = mig(table)
        assert report.mig == pytest.approx(1.0, abs=1e-12)
        assert report.concentration_flag is False
        assert report.argmax_dim == [0, 1]

    def test_noisy_codes_degrade_gracefully(self):
        # latent_j = factor_j level + sigma * noise; extra pure-noise dims
        # contribute only the plug-in bias (B-1)(K-1)/(2N) to the runner-up
        rng = np.random.default_rng(2)
        factors = np.tile(full_factorial((2, 5)), (40, 1))  # N = 400
        scores = {}
        for sigma in (0.0, 0.1, 1.0):
            latents = factors.astype(float) + sigma * rng.standard_normal((400, 2))
            noise = rng.standard_normal((400, 3))
            table = LatentFactorTable(
                latents=np.concatenate([latents, noise], axis=1),
                ladder_index=np.zeros(5, dtype=int),
                factor_levels=factors,
                factor_names=("a", "b"),
                n_bins=20,
            )
            scores[sigma] = mig(table).mig
        assert scores[0.0] > 0.9
        assert scores[0.1] > 0.85
        assert scores[1.0] < scores[0.1] - 0.3

    def test_pure_noise_scores_near_zero(self):
        rng = np.random.default_rng(8)
        factors = np.tile(full_factorial((2, 5)), (40, 1))
        table = LatentFactorTable(
            latents=rng.standard_normal((400, 5)),
            ladder_index=np.zeros(5, dtype=int),
            factor_levels=factors,
            factor_names=("a", "b"),
            n_bins=20,
        )
        assert mig(table).mig < 0.05

    def test_duplicated_latent_gives_zero(self):
        factors = full_factorial((2, 2))
        code = factors[:, 0] + 2 * factors[:, 1]
        table = LatentFactorTable(
            latents=np.stack([code, code], axis=1).astype(float),
            ladder_index=np.zeros(2, dtype=int),
            factor_levels=factors,
            factor_names=("a", "b"),
            n_bins=4,
        )
        report = mig(table)
        assert report.mig == pytest.approx(0.0, abs=1e-12)

    def test_concentration_flag_on_single_informative_latent(self):
        factors = np.tile(full_factorial((2, 2)), (25, 1))
        code = factors[:, 0] + 2 * factors[:, 1]
        rng = np.random.default_rng(3)
        latents = np.stack([code.astype(float), rng.standard_normal(100) * 1e-3],
                           axis=1)
        table = LatentFactorTable(
            latents=latents,
            ladder_index=np.array([0, 1]),
            factor_levels=factors,
            factor_names=("a", "b"),
            n_bins=4,
        )
        report = mig(table)
        assert report.concentration_flag is True
        assert report.argmax_dim == [0, 0]

    def test_single_level_factor_excluded_with_warning(self):
        rng = np.random.default_rng(4)
        factors = np.stack([np.zeros(40, dtype=int), np.arange(40) % 2], axis=1)
        latents = np.stack([factors[:, 1].astype(float),
                            rng.standard_normal(40)], axis=1)
        table = LatentFactorTable(latents, np.array([0, 0]), factors,
                                  ("const", "real"), n_bins=2)
        with pytest.warns(RuntimeWarning, match="single level"):
            report = mig(table)
        assert math.isnan(report.per_factor_gap[0])
        assert report.mig == pytest.approx(report.per_factor_gap[1])

    def test_permutation_invariance(self):
        rng = np.random.default_rng(5)
        factors = np.tile(full_factorial((2, 3)), (10, 1))
        latents = np.concatenate(
            [factors.astype(float) + rng.standard_normal((60, 2)) * 0.05,
             rng.standard_normal((60, 2))], axis=1)
        table = LatentFactorTable(latents, np.zeros(4, dtype=int), factors,
                                  ("a", "b"), n_bins=6)
        perm = np.array([2, 0, 3, 1])
        shuffled = LatentFactorTable(latents[:, perm], np.zeros(4, dtype=int),
                                     factors, ("a", "b"), n_bins=6)
        assert mig(table).mig == pytest.approx(mig(shuffled).mig, abs=1e-12)

    def test_linear_transform_of_one_latent_is_invariant(self):
        rng = np.random.default_rng(6)
        factors = np.tile(full_factorial((2, 3)), (10, 1))
        latents = factors.astype(float) + rng.standard_normal((60, 2)) * 0.1
        table = LatentFactorTable(latents.copy(), np.zeros(2, dtype=int), factors,
                                  ("a", "b"), n_bins=5)
        scaled = latents.copy()
        scaled[:, 0] = 3.5 * scaled[:, 0] - 2.0
        table2 = LatentFactorTable(scaled, np.zeros(2, dtype=int), factors,
                                   ("a", "b"), n_bins=5)
        assert mig(table).mig == pytest.approx(mig(table2).mig, abs=1e-12)

    def test_json_roundtrip(self):
        factors = full_factorial((2, 2))
        table = LatentFactorTable(factors.astype(float), np.array([0, 1]),
                                  factors, ("a", "b"), n_bins=2)
        report = mig(table)
        again = MigReport.from_json(report.to_json())
        assert again == report
        assert report.to_json() == again.to_json()


class TestLadderAttribution:
    def _report_with_argmax(self, dims):
        return MigReport(mig=0.5, per_factor_gap=[0.5] * len(dims),
                         mi_matrix=[], normalized_mi=[], factor_entropy=[],
                         argmax_dim=list(dims), concentration_flag=False,
                         n_bins=5, factor_names=["f"] * len(dims))

    def test_counts_single_ladder_winner(self):
        ladder_index = np.array([0] * 8 + [1] * 4 + [2] * 2)
        reports = [self._report_with_argmax([13, 0, 1]) for _ in range(10)]
        counts = ladder_attribution(ladder_index, reports)
        assert counts.shape == (3, 3)
        np.testing.assert_array_equal(counts[0], [0, 0, 10])
        np.testing.assert_array_equal(counts[1], [10, 0, 0])

    def test_rows_sum_to_run_count(self):
        ladder_index = np.array([0, 0, 1, 1, 2])
        rng = np.random.default_rng(7)
        reports = [self._report_with_argmax(rng.integers(0, 5, size=5))
                   for _ in range(7)]
        counts = ladder_attribution(ladder_index, reports)
        assert counts.shape == (5, 3)
        np.testing.assert_array_equal(counts.sum(axis=1), np.full(5, 7))


@pytest.fixture(scope="module")
def tiny_model_and_data():
    ds = gen_2d_reaching(100)
    cfg = LadderConfig(n_ladders=3, latent_dims=(3, 2, 2), channels=4,
                       block_depth=1, input_channels=2, t_steps=100)
    return LadderModel(cfg, seed=0), ds


class TestLatentTable:
    def test_adaptive_bins(self):
        assert adaptive_bins(400) == 20
        assert adaptive_bins(20) == 5
        assert adaptive_bins(3) == 2
        assert adaptive_bins(10_000) == 20

    def test_build_table(self, tiny_model_and_data):
        model, ds = tiny_model_and_data
        table = build_latent_table(model, ds)
        assert table.latents.shape == (20, 7)
        assert table.factor_levels.shape == (20, 3)
        np.testing.assert_array_equal(table.ladder_index, [0, 0, 0, 1, 1, 2, 2])
        assert table.n_bins == 5
        report = mig(table)
        assert 0.0 <= report.mig <= 1.0


class TestLatentTraversal:
    def test_identity_traversal_equals_reconstruction(self, tiny_model_and_data):
        model, ds = tiny_model_and_data
        ref = ds.sequences()[4]
        means = model.posterior_means_per_ladder(ref[None])
        out = latent_traversal(model, ref, ladder=1, dim=0,
                               values=np.array([means[1][0, 0]]))
        assert len(out) == 1
        np.testing.assert_array_equal(out[0], model.reconstruct(ref[None])[0])

    def test_output_count_and_shape(self, tiny_model_and_data):
        model, ds = tiny_model_and_data
        ref = ds.sequences()[0]
        out = latent_traversal(model, ref, ladder=0, dim=2)
        assert len(out) == 8
        for traj in out:
            assert traj.shape == (2, 100)

    def test_default_grid(self):
        vals = default_traversal_values()
        assert len(vals) == 8
        assert vals[0] == -3.0 and vals[-1] == 3.0

    def test_invalid_location_raises(self, tiny_model_and_data):
        model, ds = tiny_model_and_data
        ref = ds.sequences()[0]
        with pytest.raises(ValueError, match="ladder"):
            latent_traversal(model, ref, ladder=5, dim=0)
        with pytest.raises(ValueError, match="dim"):
            latent_traversal(model, ref, ladder=0, dim=9)

    def test_median_reference_is_deterministic(self):
        ds = gen_2d_reaching(100)
        idx = median_path_reference(ds)
        assert idx == median_path_reference(ds)
        assert 0 <= idx < 20

    def test_exports(self, tiny_model_and_data, tmp_path):
        model, ds = tiny_model_and_data
        ref = ds.sequences()[0]
        values = default_traversal_values()
        out = latent_traversal(model, ref, ladder=2, dim=0, values=values)
        csv_path = tmp_path / "trav.csv"
        svg_path = tmp_path / "trav.svg"
        export_traversal_csv(out, values, csv_path)
        export_traversal_svg(out, values, svg_path)
        lines = csv_path.read_text().strip().split("\n")
        assert len(lines) == 1 + 8 * 100
        svg = svg_path.read_text()
        assert svg.count("<polyline") == 8
        assert svg.startswith("<svg")
