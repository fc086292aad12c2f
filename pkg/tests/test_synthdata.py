import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from civae import synthdata as sd
from civae.flows import gt_mixing

BIG = 100_000


@pytest.fixture(scope="module")
def big():
    return {name: gen(BIG, 0) for name, gen in sd.GENERATORS.items()}


def window_mean(values, mask):
    v = values[mask]
    return v.mean(), v.std(ddof=1) / math.sqrt(len(v))


class TestMoments:
    def test_sine_quarter_turn(self):
        mean, var = sd.sine_moments(np.array([np.pi / 2]))
        np.testing.assert_allclose(mean[0], [np.pi / 2, 2.0], rtol=1e-15)
        assert var[0] == pytest.approx(0.125, rel=1e-15)

    def test_sine_variance_vanishes_at_zero(self):
        assert sd.sine_moments(np.array([0.0]))[1][0] == sd.VAR_FLOOR

    def test_quadratic_origin(self):
        mean, var = sd.quadratic_moments(np.array([0.0]))
        np.testing.assert_array_equal(mean[0], [0.0, 0.0])
        assert var[0] == pytest.approx(0.25, rel=1e-15)

    def test_quadratic_floor(self):
        assert sd.quadratic_moments(np.array([-np.pi / 2]))[1][0] == sd.VAR_FLOOR

    def test_two_circles_angle_zero(self):
        mean, var = sd.two_circles_moments(np.array([0.0]), np.array([1.0]))
        np.testing.assert_array_equal(mean[0], [1.0, 0.0])
        assert var[0] == pytest.approx(0.1, rel=1e-15)

    @pytest.mark.parametrize("angle", [-np.pi, np.pi])
    def test_two_circles_floor(self, angle):
        assert sd.two_circles_moments(np.array([angle]), np.array([2.0]))[1][0] == sd.VAR_FLOOR


class TestMonteCarlo:
    def test_sine_window_mean(self, big):
        ds = big["sine"]
        m, se = window_mean(ds.Z[:, 1], np.abs(ds.U[:, 0] - np.pi / 2) < 0.05)
        # exact conditional mean averaged over the window: 2 sin is nearly flat here
        target = 2 * (math.cos(np.pi / 2 - 0.05) - math.cos(np.pi / 2 + 0.05)) / 0.1
        assert abs(m - target) < 3 * se
        assert abs(target - 2.0) < 1e-3

    def test_quadratic_window_mean(self, big):
        ds = big["quadratic"]
        m, se = window_mean(ds.Z[:, 1], np.abs(ds.U[:, 0] - 1.0) < 0.05)
        target = ((1.05 ** 3 - 0.95 ** 3) / 3) / 0.1
        assert abs(m - target) < 3 * se

    def test_two_circles_class_balance(self, big):
        ds = big["two_circles"]
        p = ds.U[:, 2].mean()
        assert abs(p - 0.5) < 3 * math.sqrt(0.25 / BIG)
        np.testing.assert_array_equal(ds.U[:, 1] + ds.U[:, 2], 1.0)
        np.testing.assert_array_equal(ds.labels, ds.U[:, 2])

    @pytest.mark.parametrize("scheme", ["sine", "quadratic", "two_circles"])
    def test_binned_conditional_moments(self, big, scheme):
        ds = big[scheme]
        u = ds.U[:, 0]
        edges = np.quantile(u, np.linspace(0, 1, 11))
        if scheme == "two_circles":
            mean, var = sd.two_circles_moments(u, ds.labels + 1.0)
        else:
            mean, var = getattr(sd, f"{scheme}_moments")(u)
        # standardise by the per-row formula so bins pool cleanly
        r = (ds.Z - mean) / np.sqrt(var)[:, None]
        for lo, hi in zip(edges[:-1], edges[1:]):
            sel = r[(u >= lo) & (u < hi)]
            n = len(sel)
            assert np.all(np.abs(sel.mean(0)) < 3 / math.sqrt(n))
            assert np.all(np.abs(sel.var(0) - 1) < 3 * math.sqrt(2 / n))

    @pytest.mark.parametrize("scheme", ["sine", "quadratic", "two_circles"])
    def test_observation_residual_variance(self, big, scheme):
        ds = big[scheme]
        flow = gt_mixing(2, ds.provenance["flow_seed"])
        v = (ds.X - flow(ds.Z)).var(0)
        assert v.shape == (100,)
        assert np.all((v > 0.9) & (v < 1.1))


class TestGenerate:
    def test_shapes(self):
        ds = sd.generate("two_circles", 50, 1)
        assert ds.X.shape == (50, 100) and ds.U.shape == (50, 3) and ds.Z.shape == (50, 2)

    @pytest.mark.parametrize("scheme", sorted(sd.GENERATORS))
    def test_bit_identical(self, scheme):
        a, b = sd.generate(scheme, 200, 7), sd.generate(scheme, 200, 7)
        for f in ("X", "U", "Z", "split"):
            np.testing.assert_array_equal(getattr(a, f), getattr(b, f))

    def test_seeds_differ(self):
        assert not np.array_equal(sd.generate("sine", 20, 0).X, sd.generate("sine", 20, 1).X)

    def test_prefix_stable(self):
        a, b = sd.gen_sine(100, 3), sd.gen_sine(10, 3)
        np.testing.assert_array_equal(a.U[:10], b.U)

    def test_unknown_scheme(self):
        with pytest.raises(ValueError, match="unknown scheme"):
            sd.generate("spiral", 10, 0)

    def test_empty_rejected(self):
        with pytest.raises(ValueError):
            sd.gen_sine(0, 0)

    def test_custom_mixing(self):
        flow = gt_mixing(2, seed=5, d_x=10)
        ds = sd.gen_quadratic(30, 0, gt_flow=flow)
        assert ds.d_x == 10 and ds.provenance["flow_seed"] == 5

    def test_row_counts_checked(self):
        with pytest.raises(ValueError):
            sd.LabeledDataset(np.zeros((3, 2)), np.zeros((2, 1)), None, None, None, {})


class TestSplit:
    def test_exact_division(self):
        ds = sd.generate("sine", 10, 0)
        assert ds.split_counts() == {"train": 8, "val": 1, "test": 1}

    def test_hundred_rows(self):
        assert sd.generate("sine", 100, 0).split_counts() == {"train": 80, "val": 10, "test": 10}

    def test_same_seed_same_tags(self):
        ds = sd.gen_sine(40, 0)
        np.testing.assert_array_equal(sd.split(ds, seed=3).split, sd.split(ds, seed=3).split)

    @pytest.mark.parametrize("fractions", [(0.5, 0.5, 0.5), (0.8, 0.3, -0.1), (1.0, 0.0)])
    def test_invalid_fractions(self, fractions):
        with pytest.raises(ValueError):
            sd.split(sd.gen_sine(10, 0), fractions)

    def test_subset(self):
        ds = sd.generate("sine", 30, 2)
        tr = ds.subset("train")
        assert len(tr) == 24
        assert set(tr.split) == {"train"}

    @settings(max_examples=40, deadline=None)
    @given(n=st.integers(1, 400), seed=st.integers(0, 10_000),
           f=st.tuples(st.integers(0, 10), st.integers(0, 10), st.integers(1, 10)))
    def test_disjoint_and_exhaustive(self, n, seed, f):
        total = sum(f)
        fractions = tuple(v / total for v in f)
        ds = sd.split(sd.LabeledDataset(np.arange(n, dtype=float)[:, None], np.zeros((n, 1)),
                                        None, None, None, {}), fractions, seed)
        parts = [set(ds.subset(t).X[:, 0].astype(int)) for t in sd.SPLITS]
        assert sum(len(p) for p in parts) == n
        assert set().union(*parts) == set(range(n))
        assert list(ds.split_counts().values()) == list(sd.split_sizes(n, fractions))


class TestSerialization:
    def test_roundtrip(self, tmp_path):
        ds = sd.generate("two_circles", 40, 5)
        sd.save(ds, tmp_path, extra={"n": 40})
        again = sd.load(tmp_path)
        for f in ("X", "U", "Z", "split", "labels"):
            np.testing.assert_array_equal(getattr(again, f), getattr(ds, f))
        assert again.provenance == ds.provenance

    def test_manifest(self, tmp_path):
        sd.save(sd.generate("sine", 100, 0), tmp_path)
        m = json.loads((tmp_path / "manifest.json").read_text())
        assert m["format_version"] == sd.FORMAT_VERSION
        assert m["split_counts"] == {"train": 80, "val": 10, "test": 10}
        assert (m["d_X"], m["d_U"], m["d_Z"]) == (100, 1, 2)

    def test_external_table_gets_split(self, tmp_path):
        np.savetxt(tmp_path / "X.csv", np.ones((10, 3)), delimiter=",")
        np.savetxt(tmp_path / "U.csv", np.ones((10, 1)), delimiter=",")
        (tmp_path / "manifest.json").write_text(json.dumps({"format_version": 1, "n": 10}))
        ds = sd.load(tmp_path)
        assert ds.Z is None and ds.split_counts() == {"train": 8, "val": 1, "test": 1}

    def test_missing_manifest(self, tmp_path):
        with pytest.raises(FileNotFoundError):
            sd.load(tmp_path)

    def test_bad_version(self, tmp_path):
        sd.save(sd.generate("sine", 10, 0), tmp_path)
        m = json.loads((tmp_path / "manifest.json").read_text())
        m["format_version"] = 2
        (tmp_path / "manifest.json").write_text(json.dumps(m))
        with pytest.raises(ValueError, match="format version"):
            sd.load(tmp_path)

    def test_row_count_mismatch(self, tmp_path):
        sd.save(sd.generate("sine", 10, 0), tmp_path)
        m = json.loads((tmp_path / "manifest.json").read_text())
        m["n"] = 11
        (tmp_path / "manifest.json").write_text(json.dumps(m))
        with pytest.raises(ValueError, match="rows"):
            sd.load(tmp_path)
