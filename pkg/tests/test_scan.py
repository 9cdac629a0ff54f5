import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from endoqtl.genmap import LinkageMap, parse_map
from endoqtl.scan import (
    ScanOptions,
    Scanner,
    call_peaks,
    classify_imprinting,
    excursion_peaks,
    left_marker,
    local_maxima,
    scan_grid,
)
from endoqtl.simgen import TruthSpec, simulate_dataset

MAP = parse_map("chrom\tmarker\tpos\n1\ta\t0\n1\tb\t10\n1\tc\t25\n2\td\t0\n2\te\t6\n")


def test_scan_grid_anchored_at_left_markers():
    grid = scan_grid(MAP, 4.0)
    assert grid == [("1", 0.0), ("1", 4.0), ("1", 8.0), ("1", 10.0), ("1", 14.0), ("1", 18.0), ("1", 22.0),
                    ("1", 25.0), ("2", 0.0), ("2", 4.0), ("2", 6.0)]


@given(st.floats(0.5, 30))
def test_scan_grid_contains_markers_and_is_sorted(step):
    grid = scan_grid(MAP, step)
    for c in MAP.chromosomes:
        pos = [p for ch, p in grid if ch == c.name]
        assert pos == sorted(pos)
        assert set(c.positions.tolist()) <= set(pos)
        assert max(np.diff(pos)) <= step + 1e-9


def test_left_marker_and_label():
    assert left_marker(MAP, "1", 10.0) == ("b", 0.0)
    assert left_marker(MAP, "1", 16.5) == ("b", 6.5)
    assert left_marker(MAP, "1", 25.0) == ("c", 0.0)


def test_local_maxima_and_excursions():
    v = [0, 3, 1, 5, 5, 2, 8, 1]
    assert local_maxima(v) == [1, 3, 6]
    assert excursion_peaks(v, 2.5) == [1, 3, 6]
    assert excursion_peaks(v, 4.0) == [3, 6]
    assert excursion_peaks(v, 10.0) == []


@given(st.lists(st.floats(0, 100), min_size=1, max_size=40), st.floats(0, 100))
def test_excursion_peaks_one_per_excursion(values, level):
    peaks = excursion_peaks(values, level)
    assert all(values[i] >= level for i in peaks)
    # each excursion (maximal run above level) holds at most one peak
    runs = []
    i = 0
    while i < len(values):
        if values[i] >= level:
            j = i
            while j + 1 < len(values) and values[j + 1] >= level:
                j += 1
            runs.append((i, j))
            i = j + 1
        else:
            i += 1
    for a, b in runs:
        assert sum(a <= p <= b for p in peaks) <= 1


@pytest.mark.parametrize("p_imp, p_m, p_f, expected", [
    (0.5, 0.01, 0.01, "none"),
    (0.01, 0.3, 0.001, "complete-maternal"),
    (0.01, 0.001, 0.3, "complete-paternal"),
    (0.01, 0.001, 0.001, "partial"),
    (0.01, 0.3, 0.3, "partial"),
])
def test_classify_imprinting(p_imp, p_m, p_f, expected):
    assert classify_imprinting(p_imp, p_m, p_f, 0.05) == expected


@pytest.fixture(scope="module")
def qtl_scanner():
    lm = LinkageMap.evenly_spaced({"1": 60, "2": 30}, 10)
    truth = TruthSpec(qtl=[dict(chrom="1", pos=30, sigma_m2=0.2, sigma_f2=1.5, sigma_mf2=0.0)], sigma_g2=0.3,
                      sigma_e2=1.0, means=(1, 0, -1), design=dict(families=24, offspring=15))
    data = simulate_dataset(lm, truth, 4)
    return Scanner(data, "trait", ScanOptions(step=5.0))


@pytest.fixture(scope="module")
def qtl_profile(qtl_scanner):
    return qtl_scanner.scan()


def test_scan_finds_simulated_qtl(qtl_profile):
    top = qtl_profile.top()
    assert top.chromosome == "1"
    assert abs(top.position - 30) <= 10
    assert top.p_value < 0.01
    assert all(p.converged for p in qtl_profile.points)
    assert all(p.lr >= 0 for p in qtl_profile.points)


def test_scan_is_worker_invariant(qtl_scanner, qtl_profile):
    again = qtl_scanner.scan(workers=3)
    assert [(p.chromosome, p.position, p.lr) for p in again.points] == \
        [(p.chromosome, p.position, p.lr) for p in qtl_profile.points]


def test_call_peaks_with_thresholds(qtl_scanner, qtl_profile):
    top = qtl_profile.top()
    calls = call_peaks(qtl_profile, genome_threshold=top.lr - 1e-6, chrom_thresholds={"1": 5.0, "2": 5.0},
                       scanner=qtl_scanner)
    genome = [c for c in calls if c.significance == "genome-wide"]
    assert len(genome) == 1
    c = genome[0]
    assert c.peak_position == top.position
    assert c.imprinting in ("partial", "complete-maternal", "complete-paternal", "none")
    assert 0 <= c.p_imp <= 1 and 0 <= c.p_M <= 1
    assert c.marker == left_marker(qtl_scanner.map, "1", c.peak_position)[0]
    assert calls == sorted(calls, key=lambda x: (x.chromosome, x.peak_position))


def test_call_peaks_none_above_threshold(qtl_profile):
    assert call_peaks(qtl_profile, genome_threshold=1e6, chrom_thresholds={"1": 1e6}) == []


def test_call_peaks_pointwise_without_thresholds(qtl_scanner, qtl_profile):
    calls = call_peaks(qtl_profile, scanner=qtl_scanner, imprinting_alpha=0.01)
    assert calls and all(c.significance == "none" and c.p_value < 0.01 for c in calls)


def test_battery_consistency(qtl_scanner, qtl_profile):
    top = qtl_profile.top()
    bat = qtl_scanner.test_battery(top.chromosome, top.position, always_complete=True)
    full = bat["full"]
    for key in ("imprinting", "maternal", "paternal"):
        assert bat[key].fit_null.reml_loglik <= full.reml_loglik + 1e-8
    assert bat["qtl"].statistic >= top.lr - 1e-6
    assert bat["maternal_effect"].df == 2


def test_multi_mode_background_terms():
    lm = LinkageMap.evenly_spaced({"1": 40}, 10)
    truth = TruthSpec(qtl=[], sigma_g2=0.3, sigma_e2=1.0, means=(0, 0, 0), design=dict(families=8, offspring=6))
    data = simulate_dataset(lm, truth, 1)
    sc = Scanner(data, "trait", ScanOptions(step=5.0, mode="multi"))
    assert sc.background_columns("1", 0.0) == (None, 2)
    assert sc.background_columns("1", 15.0) == (0, 3)
    assert sc.background_columns("1", 40.0) == (2, None)
    assert sc.problem("1", 15.0).param_names == ("m", "f", "mf", "g", "L", "R", "e")
    assert sc.problem("1", 0.0).param_names == ("m", "f", "mf", "g", "R", "e")
    prof = sc.scan()
    assert all(math.isnan(p.p_value) for p in prof.points)
    with pytest.raises(ValueError):
        call_peaks(prof)
    assert all(p.omega_hat.sigma_R2 is not None for p in prof.points if p.position < 30)


def test_scan_options_validate():
    with pytest.raises(ValueError):
        ScanOptions(step=0)
    with pytest.raises(ValueError):
        ScanOptions(mode="both")
