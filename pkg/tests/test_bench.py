import numpy as np
import pytest

from gshadow.bench import CSV_HEADER, bench_rays, bench_shadows
from gshadow.body import posed_set
from gshadow.gaussian_core import GaussianSet


@pytest.fixture(scope="module")
def gset():
    from gshadow.scene import load_scene

    s = load_scene()
    return posed_set(s.body, s.skeleton, s.poses[0])


def test_empty_set_all_agree():
    rep = bench_shadows(GaussianSet.from_gaussians([]), 500, samples=(2, 16))
    assert [r.method for r in rep.rows] == ["analytic", "sampled-2", "sampled-16"]
    assert all(r.mean_abs_delta == 0.0 for r in rep.rows)
    assert all(r.seconds > 0 for r in rep.rows)


def test_sample_count_ordering(gset):
    rep = bench_shadows(gset, 20_000, samples=(2, 16, 64))
    deltas = [rep.row(f"sampled-{n}").mean_abs_delta for n in (2, 16, 64)]
    assert deltas[0] > deltas[1] > deltas[2]
    assert deltas[2] <= 1e-2
    assert rep.row("analytic").mean_abs_delta == 0.0


def test_rays_deterministic(gset):
    a = bench_rays(gset, 100, seed=4)
    b = bench_rays(gset, 100, seed=4)
    assert np.array_equal(a[0], b[0]) and np.array_equal(a[1], b[1])
    np.testing.assert_allclose(np.linalg.norm(a[1], axis=1), 1.0, atol=1e-14)


def test_deltas_reproducible(gset):
    a = bench_shadows(gset, 2000, samples=(8,), seed=1)
    b = bench_shadows(gset, 2000, samples=(8,), seed=1)
    assert a.row("sampled-8").mean_abs_delta == b.row("sampled-8").mean_abs_delta


def test_report_formats(gset):
    rep = bench_shadows(gset, 1000, samples=(4,))
    lines = rep.to_csv().splitlines()
    assert lines[0] == ",".join(CSV_HEADER) == "method,gaussians,rays,seconds,mean_abs_delta"
    assert lines[1].startswith(f"analytic,{len(gset)},1000,")
    assert len(lines) == 3
    table = rep.to_table().splitlines()
    assert len({len(line) for line in table}) == 1
    assert "x analytic" in table[0]
    assert rep.speedup("analytic") == 1.0


def test_unknown_row(gset):
    rep = bench_shadows(gset, 10, samples=())
    with pytest.raises(KeyError):
        rep.row("sampled-64")
