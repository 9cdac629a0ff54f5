"""Parent-specific IBD sharing in triploid endosperm of backcross families.

Founder convention: all alleles of one inbred line are identical by descent,
alleles from different lines never are. For two endosperms ``i`` and ``j``
the three shares are

* ``pi_mm = 4/3 * [m_i == m_j]``
* ``pi_mf = 2/3 * ([m_i == f_j] + [f_i == m_j])``
* ``pi_ff = 1/3 * [f_i == f_j]``

where ``m`` and ``f`` are the founder lines of the maternal and paternal
alleles. The same expressions hold for an individual with itself.
"""

from __future__ import annotations

from dataclasses import dataclass
from fractions import Fraction
from typing import Dict, Optional, Sequence, Tuple

import numpy as np

from .genmap import MISSING, CrossType, Family, LinkageMap, TriploidGenotype, haldane_recomb

COMPONENTS = ("m", "mf", "f")


@dataclass(frozen=True)
class IbdDecomposition:
    pi_mm: Fraction
    pi_mf_cross: Fraction
    pi_ff: Fraction

    @property
    def total(self):
        return self.pi_mm + self.pi_mf_cross + self.pi_ff

    @property
    def coancestry(self):
        return self.total / 3

    def as_tuple(self):
        return (self.pi_mm, self.pi_mf_cross, self.pi_ff)


@dataclass(frozen=True)
class IbdMatrices:
    """Expected IBD matrices of one family at one test position."""

    Pi_m: np.ndarray
    Pi_mf: np.ndarray
    Pi_f: np.ndarray
    Phi: np.ndarray
    Pi_L: Optional[np.ndarray] = None
    Pi_R: Optional[np.ndarray] = None

    @property
    def size(self) -> int:
        return self.Phi.shape[0]


def pair_ibd(cross: CrossType, g_i: TriploidGenotype, g_j: TriploidGenotype) -> IbdDecomposition:
    allowed = cross.genotypes()
    for g in (g_i, g_j):
        if g not in allowed:
            raise ValueError(f"genotype {g} cannot arise from cross {cross.value}")
    same = lambda a, b: Fraction(int(a == b))
    return IbdDecomposition(
        Fraction(4, 3) * same(g_i.maternal_allele, g_j.maternal_allele),
        Fraction(2, 3) * (same(g_i.maternal_allele, g_j.paternal_allele)
                          + same(g_i.paternal_allele, g_j.maternal_allele)),
        Fraction(1, 3) * same(g_i.paternal_allele, g_j.paternal_allele),
    )


def _build_tables() -> np.ndarray:
    # tables[cross, component, code_i, code_j]
    out = np.zeros((4, 3, 2, 2))
    for c, cross in enumerate(CrossType):
        for a in (0, 1):
            for b in (0, 1):
                d = pair_ibd(cross, cross.genotype(a), cross.genotype(b))
                out[c, :, a, b] = [float(x) for x in d.as_tuple()]
    return out


CROSS_INDEX: Dict[CrossType, int] = {c: i for i, c in enumerate(CrossType)}
IBD_TABLES = _build_tables()


def qtl_origin_prob(code_left: int, code_right: int, r1: float, r2: float) -> float:
    """P(the F1 parent transmitted allele 1 at the test position | flanking codes).

    `r1` and `r2` are recombination fractions from the left and right flanking
    markers to the test position. Missing codes (`MISSING` or None) are ignored.
    """
    if not (0 <= r1 < 0.5 and 0 <= r2 < 0.5):
        raise ValueError("recombination fractions must lie in [0, 0.5)")
    return float(origin_prob_array(np.array([_code(code_left)]), np.array([_code(code_right)]), r1, r2)[0])


def _code(c) -> int:
    return MISSING if c is None else int(c)


def origin_prob_array(left: np.ndarray, right: np.ndarray, r1: float, r2: float) -> np.ndarray:
    left = np.asarray(left)
    right = np.asarray(right)
    like1 = np.ones(left.shape)
    like0 = np.ones(left.shape)
    for codes, r in ((left, r1), (right, r2)):
        obs = codes != MISSING
        like1 = np.where(obs, like1 * np.where(codes == 1, 1 - r, r), like1)
        like0 = np.where(obs, like0 * np.where(codes == 0, 1 - r, r), like0)
    return like1 / (like1 + like0)


def expected_pair_ibd(cross: CrossType, p_i: float, p_j: float, same_individual: bool = False) -> IbdDecomposition:
    """Mixture of genotype-pair shares weighted by the origin probabilities.

    Exact rationals are kept when the probabilities are rationals (or 0/1).
    """
    gens = cross.genotypes()
    probs_i = (1 - p_i, p_i)
    probs_j = (1 - p_j, p_j)
    acc = [0, 0, 0]
    if same_individual:
        pairs = [(probs_i[a], gens[a], gens[a]) for a in (0, 1)]
    else:
        pairs = [(probs_i[a] * probs_j[b], gens[a], gens[b]) for a in (0, 1) for b in (0, 1)]
    for w, gi, gj in pairs:
        if w == 0:
            continue
        d = pair_ibd(cross, gi, gj)
        for k, v in enumerate(d.as_tuple()):
            acc[k] = acc[k] + w * v
    return IbdDecomposition(*acc)


def polygenic_phi(cross: CrossType) -> Tuple[Fraction, Fraction]:
    """Genome-average expected total IBD (off-diagonal, diagonal) for a cross."""
    half = Fraction(1, 2)
    off = expected_pair_ibd(cross, half, half).total
    diag = expected_pair_ibd(cross, half, half, same_individual=True).total
    return off, diag


def _phi_values() -> np.ndarray:
    return np.array([[float(x) for x in polygenic_phi(c)] for c in CrossType])


PHI_VALUES = _phi_values()  # (4, 2): off-diagonal, diagonal


def phi_matrix(cross: CrossType, n: int) -> np.ndarray:
    off, diag = PHI_VALUES[CROSS_INDEX[cross]]
    out = np.full((n, n), off)
    np.fill_diagonal(out, diag)
    return out


def expected_matrices(cross_idx: np.ndarray, p: np.ndarray) -> np.ndarray:
    """Batched expected share matrices.

    `cross_idx` is (K,), `p` is (K, n) origin probabilities. Returns an array of
    shape (3, K, n, n) holding Pi_m, Pi_mf, Pi_f.
    """
    q = np.stack([1 - p, p], axis=-1)  # (K, n, 2)
    tables = IBD_TABLES[cross_idx]  # (K, 3, 2, 2)
    mats = np.einsum("kia,kcab,kjb->ckij", q, tables, q)
    diag = np.einsum("kia,kcaa->cki", q, tables)
    n = p.shape[1]
    idx = np.arange(n)
    mats[:, :, idx, idx] = diag
    return mats


def expected_total(cross_idx: np.ndarray, p: np.ndarray) -> np.ndarray:
    """Expected total IBD matrices (K, n, n)."""
    return expected_matrices(cross_idx, p).sum(axis=0)


def origin_probs(codes: np.ndarray, linkage_map: LinkageMap, chrom: str, position: float) -> np.ndarray:
    """Origin probabilities at `position` for a code array of shape (..., M)."""
    c = linkage_map.chromosome(chrom)
    li, ri = linkage_map.locate(chrom, position)
    off = linkage_map.marker_offset(chrom)
    pos = c.positions
    d1 = max(position - pos[li], 0.0)
    d2 = max(pos[ri] - position, 0.0)
    return origin_prob_array(codes[..., off + li], codes[..., off + ri], haldane_recomb(d1), haldane_recomb(d2))


def family_matrices(family: Family, linkage_map: LinkageMap, chromosome: str, position_cM: float) -> IbdMatrices:
    p = origin_probs(family.codes, linkage_map, chromosome, position_cM)
    mats = expected_matrices(np.array([CROSS_INDEX[family.cross]]), p[None, :])[:, 0]
    return IbdMatrices(mats[0], mats[1], mats[2], phi_matrix(family.cross, family.size))


def marker_total_ibd(family: Family, marker_column: int) -> np.ndarray:
    """Expected total IBD at a marker (origin probability 1/2 where missing)."""
    codes = family.codes[:, marker_column]
    p = np.where(codes == MISSING, 0.5, codes.astype(float))
    return expected_total(np.array([CROSS_INDEX[family.cross]]), p[None, :])[0]
