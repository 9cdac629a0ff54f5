import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from endoqtl.genmap import (
    MISSING,
    CrossType,
    InputError,
    LinkageMap,
    format_float,
    haldane_recomb,
    parse_dataset,
    parse_map,
)

MAP_TSV = "chrom\tmarker\tpos_cM\n1\ta\t0\n1\tb\t12.5\n1\tc\t30\n2\td\t5\n2\te\t20\n"
GENO_TSV = (
    "family\tcross\tindividual\ta\tb\tc\td\te\n"
    "F1\tQQxQq\ti1\t0\t0\t1\tNA\t0\n"
    "F1\tQQxQq\ti2\t1\t1\t1\t0\t0\n"
    "F2\tQqxqq\ti1\t0\t1\tNA\t1\t1\n"
)
PHENO_TSV = "family\tindividual\ttraits\nF1\ti1\tht=1.5\tw=2\nF1\ti2\tht=2.5\nF2\ti1\tht=-1\tw=0.25\n"


def test_haldane_known_values():
    assert haldane_recomb(0.0) == 0.0
    assert math.isclose(haldane_recomb(100.0), 0.5 * (1 - math.exp(-2)))
    assert haldane_recomb(300.0) < 0.5
    with pytest.raises(ValueError):
        haldane_recomb(-1.0)


@given(st.floats(0, 500), st.floats(0, 500))
def test_haldane_monotone_and_bounded(a, b):
    lo, hi = sorted((a, b))
    assert 0 <= haldane_recomb(lo) <= haldane_recomb(hi) < 0.5


@given(st.floats(0, 200), st.floats(0, 200))
def test_haldane_additive_on_map_scale(d1, d2):
    # no interference: r12 = r1 + r2 - 2 r1 r2
    r1, r2 = haldane_recomb(d1), haldane_recomb(d2)
    assert math.isclose(haldane_recomb(d1 + d2), r1 + r2 - 2 * r1 * r2, abs_tol=1e-12)


def test_cross_parsing_and_maternal_class():
    assert CrossType.parse("QQxQq") is CrossType.QQxQq
    assert [c.maternal_class for c in CrossType] == [0, 1, 2, 1]
    with pytest.raises(InputError, match="unknown cross"):
        CrossType.parse("QQxqq")


def test_cross_genotypes():
    g = CrossType.QQxQq.genotypes()
    assert [str(x) for x in g] == ["Q_mQ_mQ_f", "Q_mQ_mq_f"]
    g = CrossType.QqxQQ.genotypes()
    assert [str(x) for x in g] == ["Q_mQ_mQ_f", "q_mq_mQ_f"]
    g = CrossType.qqxQq.genotypes()
    assert [str(x) for x in g] == ["q_mq_mQ_f", "q_mq_mq_f"]
    g = CrossType.Qqxqq.genotypes()
    assert [str(x) for x in g] == ["Q_mQ_mq_f", "q_mq_mq_f"]


def test_parse_map_sorts_and_keeps_chromosome_order():
    m = parse_map("chrom\tmarker\tpos_cM\n2\tx\t10\n1\tb\t5\n2\tw\t0\n1\ta\t0\n")
    assert [c.name for c in m.chromosomes] == ["2", "1"]
    assert m.marker_names == ["w", "x", "a", "b"]


@pytest.mark.parametrize(
    "text, msg",
    [
        ("chrom\tmarker\tpos_cM\n1\ta\t0\n", "fewer than 2"),
        ("chrom\tmarker\tpos_cM\n1\ta\t0\n1\tb\t0\n", "increasing"),
        ("chrom\tmarker\tpos_cM\n1\ta\t0\n1\ta\t5\n", "duplicate"),
        ("chrom\tmarker\tpos_cM\n1\ta\tzero\n1\tb\t5\n", "non-numeric"),
        ("", "empty"),
    ],
)
def test_parse_map_rejects(text, msg):
    with pytest.raises(InputError, match=msg):
        parse_map(text)


def test_map_tsv_round_trip():
    m = LinkageMap.evenly_spaced({"1": 37.3, "X": 20}, 7.1)
    assert parse_map(m.to_tsv()) == m


def test_locate():
    m = parse_map(MAP_TSV)
    assert m.locate("1", 0.0) == (0, 1)
    assert m.locate("1", 12.5) == (1, 2)
    assert m.locate("1", 30.0) == (1, 2)
    with pytest.raises(ValueError):
        m.locate("1", 31.0)


def test_parse_dataset():
    m = parse_map(MAP_TSV)
    d = parse_dataset(m, GENO_TSV, PHENO_TSV)
    assert [f.family_id for f in d.families] == ["F1", "F2"]
    assert d.traits == ["ht", "w"]
    f1 = d.families[0]
    assert f1.codes[0, 3] == MISSING
    assert np.isnan(f1.phenotypes["w"][1])
    assert f1.phenotypes["ht"].tolist() == [1.5, 2.5]


def test_dataset_round_trip():
    m = parse_map(MAP_TSV)
    d = parse_dataset(m, GENO_TSV, PHENO_TSV)
    d2 = parse_dataset(m, d.genotype_tsv(), d.phenotype_tsv())
    assert d2.genotype_tsv() == d.genotype_tsv()
    assert d2.phenotype_tsv() == d.phenotype_tsv()


@pytest.mark.parametrize(
    "geno, pheno, msg",
    [
        (GENO_TSV.replace("QQxQq\ti1", "QQxqq\ti1"), PHENO_TSV, "unknown cross"),
        (GENO_TSV.replace("i1\t0\t0\t1", "i1\t2\t0\t1"), PHENO_TSV, "not 0, 1 or NA"),
        (GENO_TSV, PHENO_TSV + "F3\ti9\tht=1\n", "no genotype row"),
        (GENO_TSV.replace("\te\n", "\tz\n", 1), PHENO_TSV, "do not match"),
        (GENO_TSV + "F2\tQqxqq\ti1\t0\t0\t0\t0\t0\n", PHENO_TSV, "duplicate"),
        (GENO_TSV, PHENO_TSV.replace("ht=-1", "ht=abc"), "non-numeric"),
    ],
)
def test_parse_dataset_rejects(geno, pheno, msg):
    with pytest.raises(InputError, match=msg):
        parse_dataset(parse_map(MAP_TSV), geno, pheno)


@settings(max_examples=200)
@given(st.floats(allow_nan=False, allow_infinity=False))
def test_format_float_round_trips(x):
    assert float(format_float(x)) == x


def test_format_float_nan():
    assert format_float(float("nan")) == "NA"
