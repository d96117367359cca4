import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from fedglu.evaluation import (GROUPS, ZONES, EmptyCohort, EmptySet, Zone, cega_classify, cega_summary, cega_svg,
                               cega_zone_indices, clip_predictions, group_percentages, region_rmse, rmse,
                               zone_counts, zone_percentages)

pairs = st.lists(st.tuples(st.floats(40, 400), st.floats(40, 400)), min_size=1, max_size=60)


def test_rmse_examples():
    assert rmse([100, 200], [110, 190]) == 10.0
    assert rmse([70], [40]) == 30.0
    assert rmse([5, 6], [5, 6]) == 0.0
    with pytest.raises(EmptySet):
        rmse([], [])


def test_region_boundaries():
    rr = region_rmse([70.0, 180.0, 100.0], [80.0, 170.0, 100.0])
    assert rr.hypo is None and rr.hyper is None
    assert rr.n_normal == 3 and rr.combined is None


@given(pairs)
def test_region_rmse_matches_filter_oracle(ps):
    y, p = np.array(ps).T
    rr = region_rmse(y, p)
    for name, keep in (("hypo", lambda v: v < 70), ("normal", lambda v: 70 <= v <= 180), ("hyper", lambda v: v > 180)):
        sub = [(a, b) for a, b in ps if keep(a)]
        expected = None if not sub else float(np.sqrt(sum((a - b) ** 2 for a, b in sub) / len(sub)))
        got = getattr(rr, name)
        assert (got is None) == (expected is None)
        if expected is not None:
            assert got == pytest.approx(expected, rel=1e-12, abs=1e-12)
    assert rr.n_hypo + rr.n_normal + rr.n_hyper == len(ps)


@pytest.mark.parametrize("y,p,zone", [
    (100, 100, Zone.A), (60, 60, Zone.A), (65, 190, Zone.E_LEFT_UPPER), (250, 120, Zone.D_RIGHT),
    (150, 300, Zone.C_UPPER), (300, 50, Zone.E_RIGHT_LOWER), (170, 50, Zone.C_LOWER), (50, 100, Zone.D_LEFT),
    (100, 150, Zone.B), (300, 200, Zone.B),
])
def test_golden_zones(y, p, zone):
    assert cega_classify(y, p) is zone
    assert ZONES[int(cega_zone_indices([y], [p])[0])] is zone


def test_grid_sweep_is_a_partition():
    g = np.arange(40, 401, dtype=float)
    y, p = np.meshgrid(g, g, indexing="ij")
    idx = cega_zone_indices(y.ravel(), p.ravel())
    assert idx.min() >= 0 and idx.max() < len(ZONES)
    # scalar and vectorised classifiers agree on every grid point
    scalar = np.array([ZONES.index(cega_classify(a, b)) for a, b in zip(y.ravel()[::7], p.ravel()[::7])])
    np.testing.assert_array_equal(scalar, idx[::7])
    assert sum(zone_counts(y, p).values()) == g.size ** 2


@given(pairs)
def test_percentages_sum_to_100(ps):
    y, p = np.array(ps).T
    assert sum(zone_percentages(y, p).values()) == pytest.approx(100.0, abs=1e-9)
    assert sum(group_percentages(y, p).values()) == pytest.approx(100.0, abs=1e-9)


@given(st.lists(st.floats(40, 400), min_size=1, max_size=50))
def test_perfect_predictions_all_zone_a(y):
    assert zone_percentages(y, y)["A"] == 100.0


def test_cega_summary_population_std():
    y = np.array([100.0] * 50)
    perfect = (y, y)
    two_pct_b = (y, np.concatenate([np.full(49, 100.0), [130.0]]))  # 1 of 50 in B
    s = cega_summary({"a": perfect, "b": two_pct_b})
    assert s.group_mean["A+B"] == 100.0
    bad = (y, np.concatenate([np.full(49, 100.0), [300.0]]))  # 1 of 50 in C => A+B = 98
    s = cega_summary({"a": perfect, "b": bad})
    assert s.group_mean["A+B"] == pytest.approx(99.0)
    assert s.group_std["A+B"] == pytest.approx(1.0)
    assert set(s.group_mean) == set(GROUPS)


def test_cega_summary_empty():
    with pytest.raises(EmptyCohort):
        cega_summary({})


def test_clip_predictions():
    np.testing.assert_array_equal(clip_predictions([10.0, 200.0, 900.0]), [40.0, 200.0, 400.0])


def test_svg_is_well_formed():
    import xml.etree.ElementTree as ET
    root = ET.fromstring(cega_svg([100, 200], [110, 50], title="demo"))
    assert root.tag.endswith("svg")
    assert sum(1 for el in root.iter() if el.tag.endswith("circle")) == 2
