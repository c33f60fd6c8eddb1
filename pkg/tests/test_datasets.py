import numpy as np
import pytest
from scipy import stats

from sbbridge.datasets import (
    DatasetSpec,
    SampleBatch,
    gauss8_centers,
    generate,
    load_batch_csv,
    save_batch_csv,
    train_test_split,
)


def test_dirac_copies():
    batch = generate(DatasetSpec("dirac", 5, seed=0, point=1.5))
    np.testing.assert_array_equal(batch.points, np.full((5, 1), 1.5))


def test_gaussian1d_moments():
    batch = generate(DatasetSpec("gaussian1d", 100_000, seed=3, mean=1.0, var=2.0))
    assert abs(batch.points.mean() - 1.0) < 0.02
    assert abs(batch.points.var() - 2.0) < 0.05


def test_gauss8_mode_counts_multinomial():
    n = 100_000
    batch = generate(DatasetSpec("gauss8", n, seed=4))
    centers = gauss8_centers()
    d2 = ((batch.points[:, None, :] - centers[None, :, :]) ** 2).sum(axis=2)
    counts = np.bincount(d2.argmin(axis=1), minlength=8)
    sd = np.sqrt(n * (1 / 8) * (7 / 8))
    assert np.abs(counts - n / 8).max() < 3 * sd


def test_2d_sets_are_standardized():
    for name in ("gauss8", "moons"):
        pts = generate(DatasetSpec(name, 200_000, seed=5)).points
        assert np.abs(pts.mean(axis=0)).max() < 0.02
        # documented constants give overall (rms) unit scale
        rms = np.sqrt((pts.var(axis=0)).mean())
        assert abs(rms - 1.0) < 0.02


def test_student_t_ks_against_analytic_cdf():
    pts = generate(DatasetSpec("student_t", 10_000, seed=6, dof=2.0)).points[:, 0]
    xs = np.sort(pts)
    ecdf = np.arange(1, xs.size + 1) / xs.size
    ks = np.abs(ecdf - stats.t.cdf(xs, df=2.0)).max()
    assert ks < 0.05


def test_multimodal_two_sided():
    pts = generate(DatasetSpec("multimodal1d", 50_000, seed=7)).points[:, 0]
    frac_left = (pts < 0).mean()
    assert abs(frac_left - 0.5) < 0.02
    assert abs(pts[pts < 0].mean() + 2.0) < 0.02
    assert abs(pts[pts > 0].mean() - 2.0) < 0.02


def test_seed_determinism():
    a = generate(DatasetSpec("moons", 1000, seed=11))
    b = generate(DatasetSpec("moons", 1000, seed=11))
    np.testing.assert_array_equal(a.points, b.points)
    c = generate(DatasetSpec("moons", 1000, seed=12))
    assert not np.array_equal(a.points, c.points)


def test_unknown_name_rejected():
    with pytest.raises(ValueError):
        generate(DatasetSpec("mystery", 10, seed=0))
    with pytest.raises(ValueError):
        DatasetSpec("gauss8", 0, seed=0)
    with pytest.raises(ValueError):
        DatasetSpec("student_t", 10, seed=0, dof=-1.0)


def test_split_sizes_union_determinism():
    batch = generate(DatasetSpec("gaussian1d", 10, seed=8))
    first, second = train_test_split(batch, 0.8, seed=1)
    assert first.n == 8 and second.n == 2
    merged = np.sort(np.concatenate([first.points, second.points]), axis=0)
    np.testing.assert_array_equal(merged, np.sort(batch.points, axis=0))
    again = train_test_split(batch, 0.8, seed=1)
    np.testing.assert_array_equal(first.points, again[0].points)
    with pytest.raises(ValueError):
        train_test_split(batch, 0.999999, seed=0)   # degenerate empty side
    with pytest.raises(ValueError):
        train_test_split(batch, 1.2, seed=0)


def test_csv_round_trip(tmp_path):
    batch = generate(DatasetSpec("moons", 50, seed=9))
    path = save_batch_csv(batch, tmp_path / "pts.csv")
    back = load_batch_csv(path)
    np.testing.assert_array_equal(back.points, batch.points)
    assert path.read_text().splitlines()[0] == "x_1,x_2"


def test_sample_batch_properties():
    b = SampleBatch(np.zeros((3, 2)), "target", seed=5)
    assert b.n == 3 and b.dim == 2 and b.provenance == "target"
