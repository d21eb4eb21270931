import warnings
from collections import namedtuple

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from salunet.dataset import Sample, SyntheticConfig, generate_synthetic
from salunet.saliency_filter import (
    ConfidenceParams,
    ConfidenceReport,
    EmptySaliencyWarning,
    assess,
    confidence_decision,
    extract_contours,
    filter_dataset,
    reduce_to_top_contour,
    write_reports,
)

from oracles import contour_oracle

C = namedtuple("C", "cum_intensity mean_intensity")
DEFAULTS = ConfidenceParams()

# (contours as (I_c, M_c), expected (rejected, rule)); every row is evaluated by
# hand against the rules with a1=2, a2=3, a3=0.2, a4=0.55.
DECISION_TABLE = [
    ("empty map", [], (False, None)),
    ("single contour", [(50, 0.7)], (False, None)),
    # 100 < 2*60 and 0.5 < 0.8
    ("rule 1 fires", [(100, 0.5), (60, 0.8)], (True, 1)),
    # 100 < 2*50 is false; 0.5+0.2 < 0.52 false; 0.52 > 0.55 false
    ("rule 1 boundary on I", [(100, 0.5), (50, 0.52)], (False, None)),
    # equal means: 0.5 < 0.5 false; argmax-M resolves to the top contour
    ("rule 1 boundary on M", [(100, 0.5), (60, 0.5)], (False, None)),
    # 100 < 80 false; 100 < 120 and 0.3+0.2 < 0.54; 0.54 > 0.55 false
    ("rule 2 fires", [(100, 0.3), (40, 0.54)], (True, 2)),
    # 120 < 3*40 is false
    ("rule 2 boundary on I", [(120, 0.3), (40, 0.54)], (False, None)),
    # 0.25+0.2 == 0.45 exactly, so the strict comparison fails
    ("rule 2 boundary on M", [(100, 0.25), (40, 0.45)], (False, None)),
    # 100 < 40 false; 100 < 60 false; 0.9 > 0.55 and argmax differ
    ("rule 3 fires", [(100, 0.4), (20, 0.9)], (True, 3)),
    ("rule 3 boundary on a4", [(100, 0.4), (20, 0.55)], (False, None)),
    ("rule 3 same argmax", [(100, 0.9), (20, 0.4)], (False, None)),
    # all three predicates hold; rule 1 is evaluated first
    ("rule 1 precedence", [(100, 0.3), (60, 0.9)], (True, 1)),
    # rules 2 and 3 hold, rule 1 does not
    ("rule 2 precedence", [(100, 0.3), (40, 0.9)], (True, 2)),
    # I_2nd is 45; 100 < 90 false; 0.7 < 0.6 false; 0.6 > 0.55, argmax-M is the I=30 contour
    ("three contours, rule 3", [(100, 0.5), (30, 0.6), (45, 0.56)], (True, 3)),
    # tied I: the higher-mean contour leads, so it is its own argmax-M
    ("tied cumulative intensity", [(80, 0.6), (80, 0.7)], (False, None)),
    # 100 < 120 but the top contour also has the largest mean
    ("comparable I, top is brightest", [(100, 0.8), (60, 0.5)], (False, None)),
]


@pytest.mark.parametrize("name,contours,expected", DECISION_TABLE, ids=[r[0] for r in DECISION_TABLE])
def test_decision_table(name, contours, expected):
    cs = [C(i, m) for i, m in contours]
    assert confidence_decision(cs, DEFAULTS) == expected
    assert confidence_decision(cs[::-1], DEFAULTS) == expected


class TestExtractContours:
    def test_all_zero(self):
        assert extract_contours(np.zeros((6, 6)), 0.3) == []

    def test_three_pixel_blob(self):
        s = np.zeros((6, 6))
        s[2, 1:4] = [0.5, 0.6, 0.7]
        (c,) = extract_contours(s, 0.3)
        assert c.area == 3
        assert c.cum_intensity == pytest.approx(1.8, abs=1e-12)
        assert c.mean_intensity == pytest.approx(0.6, abs=1e-12)
        assert c.anchor == (2, 1)

    def test_two_blobs_ordered(self):
        s = np.zeros((6, 6))
        s[0:2, 0:3] = 0.4       # I = 2.4
        s[3:6, 2:4] = 0.5       # I = 3.0, row 2 is all zero between them
        cs = extract_contours(s, 0.3)
        ref = contour_oracle(s, 0.3)
        assert len(cs) == 2 == len(ref)
        for c, (area, total, mean, anchor) in zip(cs, ref):
            assert (c.area, c.anchor) == (area, anchor)
            assert c.cum_intensity == pytest.approx(total, abs=1e-12)
            assert c.mean_intensity == pytest.approx(mean, abs=1e-12)
        assert cs[0].cum_intensity > cs[1].cum_intensity

    def test_diagonal_pixels_connect(self):
        s = np.zeros((4, 4))
        s[0, 0] = s[1, 1] = s[2, 2] = 0.9
        assert [c.area for c in extract_contours(s, 0.3)] == [3]

    def test_threshold_is_strict(self):
        s = np.full((3, 3), 0.3)
        assert extract_contours(s, 0.3) == []

    def test_tie_break_on_anchor(self):
        s = np.zeros((5, 5))
        s[0, 0] = 0.5
        s[4, 4] = 0.5
        assert [c.anchor for c in extract_contours(s, 0.3)] == [(0, 0), (4, 4)]

    @settings(max_examples=60, deadline=None)
    @given(st.integers(0, 2**32 - 1), st.floats(0.05, 0.9))
    def test_matches_oracle_and_partitions(self, seed, threshold):
        rng = np.random.default_rng(seed)
        s = np.round(rng.random((9, 9)), 2)
        cs = extract_contours(s, threshold)
        ref = contour_oracle(s, threshold)
        assert [(c.area, c.anchor) for c in cs] == [(r[0], r[3]) for r in ref]
        assert sum(c.area for c in cs) == int((s > threshold).sum())
        for c in cs:
            assert c.area == len(c.pixels) >= 1
            assert c.mean_intensity == pytest.approx(c.cum_intensity / c.area, rel=1e-12)
            assert 0 < c.mean_intensity <= 1
            assert s[tuple(c.pixels.T)].min() > threshold


@settings(max_examples=100, deadline=None)
@given(
    st.lists(st.tuples(st.floats(0.1, 500), st.floats(0.31, 1.0)), min_size=0, max_size=6),
    st.randoms(use_true_random=False),
)
def test_decision_permutation_invariant(stats_list, rnd):
    cs = [C(i, m) for i, m in stats_list]
    shuffled = cs[:]
    rnd.shuffle(shuffled)
    assert confidence_decision(cs) == confidence_decision(shuffled)


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2**32 - 1), st.floats(0.5, 1.0))
def test_scaling_preserves_rule1_and_argmax(seed, factor):
    rng = np.random.default_rng(seed)
    s = np.zeros((12, 12))
    for _ in range(3):
        r, c = rng.integers(0, 10, size=2)
        s[r:r + 2, c:c + 2] = np.maximum(s[r:r + 2, c:c + 2], rng.uniform(0.62, 1.0))
    scaled = s * factor
    # only meaningful if no pixel crosses the threshold
    if ((s > 0.3) != (scaled > 0.3)).any():
        return
    a, b = extract_contours(s, 0.3), extract_contours(scaled, 0.3)
    assert [c.area for c in a] == [c.area for c in b]
    for x, y in zip(a, b):
        assert y.cum_intensity == pytest.approx(factor * x.cum_intensity, rel=1e-12)
        assert y.mean_intensity == pytest.approx(factor * x.mean_intensity, rel=1e-12)
    if len(a) >= 2:
        def rule1(cs):
            m_max = max(c.mean_intensity for c in cs)
            return cs[0].cum_intensity < 2 * cs[1].cum_intensity and cs[0].mean_intensity < m_max

        def argmax_differ(cs):
            m_max = max(c.mean_intensity for c in cs)
            return next(c for c in cs if c.mean_intensity == m_max) is not cs[0]

        assert rule1(a) == rule1(b)
        assert argmax_differ(a) == argmax_differ(b)


def _sample(sid, saliency, mask=None):
    shape = saliency.shape
    mask = np.zeros(shape, dtype=np.uint8) if mask is None else mask
    return Sample(sid, np.zeros(shape), mask, saliency)


class TestFilterDataset:
    def test_single_contour_maps_all_kept(self):
        samples = []
        for k in range(5):
            s = np.zeros((10, 10))
            s[k:k + 3, k:k + 3] = 0.4 + 0.1 * k
            samples.append(_sample(f"s{k}", s))
        kept, reports = filter_dataset(samples)
        assert kept == samples
        assert not any(r.rejected for r in reports)

    def test_constructed_rule1_map_rejected(self):
        s = np.zeros((12, 12))
        s[0:4, 0:5] = 0.5   # A=20, I=10, M=0.5
        s[7:10, 7:10] = 0.8  # A=9,  I=7.2, M=0.8; 10 < 14.4 and 0.5 < 0.8
        kept, (report,) = filter_dataset([_sample("amb", s)])
        assert kept == []
        assert report.rejected and report.fired_rule == 1
        assert [c[0] for c in report.contours] == [20, 9]

    def test_ground_truth_is_ignored(self):
        s = np.zeros((12, 12))
        s[0:4, 0:5] = 0.5
        s[7:10, 7:10] = 0.8
        mask = np.zeros((12, 12), dtype=np.uint8)
        mask[7:10, 7:10] = 1
        a = filter_dataset([_sample("x", s)])[1][0]
        b = filter_dataset([_sample("x", s, mask)])[1][0]
        assert (a.rejected, a.fired_rule) == (b.rejected, b.fired_rule)

    def test_synthetic_low_quality_rejected(self):
        low = generate_synthetic(SyntheticConfig(count=12, size=96, quality_mix=(0, 0, 1, 0), seed=5))
        kept, reports = filter_dataset(low)
        assert kept == []
        assert {r.fired_rule for r in reports} == {1}

    def test_synthetic_satisfactory_kept(self):
        good = generate_synthetic(SyntheticConfig(count=12, size=96, quality_mix=(1, 0, 0, 0), seed=5))
        kept, _ = filter_dataset(good)
        assert len(kept) == 12

    def test_counts_and_idempotence(self):
        mixed = generate_synthetic(SyntheticConfig(count=30, size=96, quality_mix=(0.4, 0.2, 0.3, 0.1), seed=9))
        kept, reports = filter_dataset(mixed)
        assert len(kept) + sum(r.rejected for r in reports) == len(mixed)
        again, reports2 = filter_dataset(kept)
        assert again == kept
        assert not any(r.rejected for r in reports2)

    def test_a4_zero_removes_any_argmax_disagreement(self):
        mixed = generate_synthetic(SyntheticConfig(count=30, size=96, quality_mix=(0.4, 0.3, 0.3, 0.0), seed=2))
        p = ConfidenceParams(a4=0.0)
        kept, _ = filter_dataset(mixed, p)
        for s in mixed:
            cs = extract_contours(s.saliency, p.threshold)
            m_max = max((c.mean_intensity for c in cs), default=None)
            disagree = len(cs) >= 2 and next(c for c in cs if c.mean_intensity == m_max) is not cs[0]
            if disagree:
                assert s not in kept

    def test_report_csv(self, tmp_path):
        s = np.zeros((12, 12))
        s[0:4, 0:5] = 0.5
        s[7:10, 7:10] = 0.8
        reports = [assess("amb", s), assess("empty", np.zeros((4, 4)))]
        write_reports(reports, tmp_path / "r.csv")
        lines = (tmp_path / "r.csv").read_text().splitlines()
        assert lines[0] == "id,n_contours,I_max,I_2nd,M_of_Imax,M_max,rejected,fired_rule"
        fields = lines[1].split(",")
        assert fields[:2] == ["amb", "2"] and fields[6:] == ["1", "1"]
        assert [float(x) for x in fields[2:6]] == pytest.approx([10.0, 7.2, 0.5, 0.8], abs=1e-12)
        assert lines[2] == "empty,0,,,,,0,"

    def test_report_invariant(self):
        with pytest.raises(ValueError):
            ConfidenceReport("x", [], rejected=True, fired_rule=None)


class TestReduceToTopContour:
    def test_single_contour(self):
        s = np.full((8, 8), 0.1)
        s[2:5, 2:5] = 0.7
        out = reduce_to_top_contour(s)
        expected = np.where(s > 0.3, s, 0.0)
        assert np.array_equal(out, expected)

    def test_keeps_largest_cumulative(self):
        s = np.zeros((6, 6))
        s[0, 0:3] = [0.5, 0.6, 0.7]  # I = 1.8
        s[4, 3:6] = [0.3, 0.3, 0.3]  # at threshold: excluded entirely
        s[3, 0:3] = [0.3001, 0.3, 0.3]
        s[5, 0:2] = [0.45, 0.45]     # I = 0.9
        out = reduce_to_top_contour(s)
        assert np.array_equal(out[0, 0:3], s[0, 0:3])
        out[0, 0:3] = 0
        assert not out.any()
        assert len(extract_contours(reduce_to_top_contour(s), 0.3)) == 1

    def test_empty_map_warns(self):
        with pytest.warns(EmptySaliencyWarning):
            out = reduce_to_top_contour(np.zeros((5, 5)))
        assert not out.any()

    def test_synthetic_maps_reduce_to_one_contour(self):
        samples = generate_synthetic(SyntheticConfig(count=10, size=96, quality_mix=(0.2, 0.3, 0.5, 0.0), seed=4))
        with warnings.catch_warnings():
            warnings.simplefilter("error")
            for s in samples:
                assert len(extract_contours(reduce_to_top_contour(s.saliency), 0.3)) == 1


class TestParams:
    @pytest.mark.parametrize("kw", [
        {"threshold": 0.0}, {"threshold": 1.0}, {"a1": 1.0}, {"a2": 1.5},
        {"a3": 0.0}, {"a3": 1.0}, {"a4": 1.0}, {"a4": -0.1},
    ])
    def test_invalid(self, kw):
        with pytest.raises(ValueError):
            ConfidenceParams(**kw)

    def test_defaults(self):
        assert ConfidenceParams() == ConfidenceParams(0.3, 2, 3, 0.2, 0.55)
