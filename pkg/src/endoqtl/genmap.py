"""Linkage maps, reciprocal backcross genotypes and family datasets.

Marker genotypes are stored as the allele transmitted by the F1 parent of each
cross (0 = ``Q``, 1 = ``q``, -1 = missing). Together with the cross type this
fixes the triploid endosperm genotype, because the other parent is an inbred
homozygote.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field
from typing import Dict, Iterable, List, Mapping, Optional, Sequence, Tuple

import numpy as np

MISSING = -1


class InputError(ValueError):
    """Malformed or inconsistent input file content."""


def haldane_recomb(d: float) -> float:
    """Recombination fraction for a map distance `d` in centimorgans."""
    if d < 0 or math.isnan(d):
        raise ValueError(f"map distance must be non-negative, got {d}")
    return 0.5 * (1.0 - math.exp(-2.0 * d / 100.0))


def haldane_recomb_array(d: np.ndarray) -> np.ndarray:
    d = np.asarray(d, dtype=float)
    if np.any(d < 0):
        raise ValueError("map distances must be non-negative")
    return 0.5 * (1.0 - np.exp(-2.0 * d / 100.0))


class CrossType(enum.Enum):
    """The four reciprocal backcrosses, maternal parent first."""

    QQxQq = "QQxQq"
    QqxQQ = "QqxQQ"
    qqxQq = "qqxQq"
    Qqxqq = "Qqxqq"

    @classmethod
    def parse(cls, token: str) -> "CrossType":
        try:
            return cls(token)
        except ValueError:
            raise InputError(f"unknown cross type {token!r}") from None

    @property
    def maternal_class(self) -> int:
        """Index of the maternal genotype class: 0 = AA, 1 = Aa, 2 = aa."""
        return _MATERNAL_CLASS[self]

    @property
    def f1_is_mother(self) -> bool:
        return self in (CrossType.QqxQQ, CrossType.Qqxqq)

    def genotype(self, code: int) -> "TriploidGenotype":
        if code not in (0, 1):
            raise ValueError(f"transmitted-allele code must be 0 or 1, got {code}")
        mother, father = self.value.split("x")
        f1_allele = "Qq"[code]
        if self.f1_is_mother:
            return TriploidGenotype(f1_allele, father[0])
        return TriploidGenotype(mother[0], f1_allele)

    def genotypes(self) -> Tuple["TriploidGenotype", "TriploidGenotype"]:
        return self.genotype(0), self.genotype(1)


_MATERNAL_CLASS = {
    CrossType.QQxQq: 0,
    CrossType.QqxQQ: 1,
    CrossType.qqxQq: 2,
    CrossType.Qqxqq: 1,
}

MATERNAL_CLASS_NAMES = ("AA", "Aa", "aa")


@dataclass(frozen=True)
class TriploidGenotype:
    """Endosperm genotype: the maternal allele (present twice) and the paternal one."""

    maternal_allele: str
    paternal_allele: str

    def __post_init__(self):
        if self.maternal_allele not in ("Q", "q") or self.paternal_allele not in ("Q", "q"):
            raise ValueError("alleles must be 'Q' or 'q'")

    def __str__(self) -> str:
        m, f = self.maternal_allele, self.paternal_allele
        return f"{m}_m{m}_m{f}_f"


@dataclass(frozen=True)
class Marker:
    name: str
    position: float


@dataclass(frozen=True)
class Chromosome:
    name: str
    markers: Tuple[Marker, ...]

    @property
    def positions(self) -> np.ndarray:
        return np.array([m.position for m in self.markers])

    @property
    def start(self) -> float:
        return self.markers[0].position

    @property
    def end(self) -> float:
        return self.markers[-1].position


@dataclass(frozen=True)
class LinkageMap:
    chromosomes: Tuple[Chromosome, ...]

    def __post_init__(self):
        seen = set()
        for chrom in self.chromosomes:
            if len(chrom.markers) < 2:
                raise InputError(f"chromosome {chrom.name!r} has fewer than 2 markers")
            pos = chrom.positions
            if np.any(np.diff(pos) <= 0):
                raise InputError(f"marker positions on chromosome {chrom.name!r} are not strictly increasing")
            for m in chrom.markers:
                if m.name in seen:
                    raise InputError(f"duplicate marker name {m.name!r}")
                seen.add(m.name)
        names = [c.name for c in self.chromosomes]
        if len(set(names)) != len(names):
            raise InputError("duplicate chromosome name")

    @property
    def marker_names(self) -> List[str]:
        return [m.name for c in self.chromosomes for m in c.markers]

    @property
    def n_markers(self) -> int:
        return sum(len(c.markers) for c in self.chromosomes)

    def chromosome(self, name: str) -> Chromosome:
        for c in self.chromosomes:
            if c.name == name:
                return c
        raise KeyError(f"no chromosome named {name!r}")

    def marker_offset(self, name: str) -> int:
        """Column of the chromosome's first marker in the genome-wide code matrix."""
        off = 0
        for c in self.chromosomes:
            if c.name == name:
                return off
            off += len(c.markers)
        raise KeyError(f"no chromosome named {name!r}")

    def locate(self, chrom: str, position: float) -> Tuple[int, int]:
        """Indices (within the chromosome) of the markers bracketing `position`.

        A position exactly on a marker other than the last one belongs to the
        interval that starts at that marker.
        """
        c = self.chromosome(chrom)
        pos = c.positions
        tol = 1e-9
        if position < pos[0] - tol or position > pos[-1] + tol:
            raise ValueError(
                f"position {position} cM lies outside chromosome {chrom!r} span [{pos[0]}, {pos[-1]}]"
            )
        right = int(np.searchsorted(pos, position + tol, side="right"))
        right = min(max(right, 1), len(pos) - 1)
        return right - 1, right

    def to_tsv(self) -> str:
        lines = ["chrom\tmarker\tpos_cM"]
        for c in self.chromosomes:
            for m in c.markers:
                lines.append(f"{c.name}\t{m.name}\t{format_float(m.position)}")
        return "\n".join(lines) + "\n"

    @classmethod
    def evenly_spaced(cls, lengths: Mapping[str, float], spacing: float, prefix: str = "m") -> "LinkageMap":
        """Map with markers every `spacing` cM from 0 to each chromosome length."""
        chroms = []
        for name, length in lengths.items():
            n = int(round(length / spacing)) + 1
            markers = tuple(
                Marker(f"{prefix}{name}_{i + 1}", float(i * spacing)) for i in range(n)
            )
            chroms.append(Chromosome(str(name), markers))
        return cls(tuple(chroms))


def format_float(x: float) -> str:
    """Lossless decimal text for a float (17 significant digits)."""
    if x is None or (isinstance(x, float) and math.isnan(x)):
        return "NA"
    return format(float(x), ".17g")


def _data_lines(text: str) -> List[Tuple[int, List[str]]]:
    rows = []
    for lineno, line in enumerate(text.splitlines(), start=1):
        if not line.strip():
            continue
        rows.append((lineno, line.rstrip("\r\n").split("\t")))
    if not rows:
        raise InputError("file is empty (a header line is required)")
    return rows[1:]


def parse_map(text: str) -> LinkageMap:
    """Parse ``chrom<TAB>marker<TAB>pos_cM`` rows (header first, any row order)."""
    per_chrom: Dict[str, List[Marker]] = {}
    for lineno, cols in _data_lines(text):
        if len(cols) != 3:
            raise InputError(f"map line {lineno}: expected 3 tab-separated fields, got {len(cols)}")
        chrom, name, pos = (c.strip() for c in cols)
        try:
            value = float(pos)
        except ValueError:
            raise InputError(f"map line {lineno}: non-numeric position {pos!r}") from None
        if not math.isfinite(value):
            raise InputError(f"map line {lineno}: non-finite position {pos!r}")
        per_chrom.setdefault(chrom, []).append(Marker(name, value))
    chroms = []
    for chrom, markers in per_chrom.items():
        markers.sort(key=lambda m: m.position)
        chroms.append(Chromosome(chrom, tuple(markers)))
    return LinkageMap(tuple(chroms))


@dataclass(frozen=True)
class Family:
    family_id: str
    cross: CrossType
    individual_ids: Tuple[str, ...]
    codes: np.ndarray  # (n, M) int8, MISSING for unobserved
    phenotypes: Mapping[str, np.ndarray] = field(default_factory=dict)  # trait -> (n,), nan missing

    def __post_init__(self):
        codes = np.asarray(self.codes, dtype=np.int8)
        if codes.ndim != 2 or codes.shape[0] != len(self.individual_ids):
            raise InputError(f"family {self.family_id!r}: code matrix shape does not match individuals")
        if len(self.individual_ids) < 1:
            raise InputError(f"family {self.family_id!r} has no individuals")
        if not np.all(np.isin(codes, (MISSING, 0, 1))):
            raise InputError(f"family {self.family_id!r}: codes must be 0, 1 or NA")
        codes.setflags(write=False)
        object.__setattr__(self, "codes", codes)
        phen = {}
        for trait, values in self.phenotypes.items():
            v = np.array(values, dtype=float)
            if v.shape != (len(self.individual_ids),):
                raise InputError(f"family {self.family_id!r}: trait {trait!r} has wrong length")
            v.setflags(write=False)
            phen[trait] = v
        object.__setattr__(self, "phenotypes", phen)

    @property
    def size(self) -> int:
        return len(self.individual_ids)

    def genotype(self, individual: int, marker: int) -> Optional[TriploidGenotype]:
        code = int(self.codes[individual, marker])
        return None if code == MISSING else self.cross.genotype(code)

    def with_phenotype(self, trait: str, values: Sequence[float]) -> "Family":
        phen = dict(self.phenotypes)
        phen[trait] = np.asarray(values, dtype=float)
        return Family(self.family_id, self.cross, self.individual_ids, self.codes, phen)


@dataclass(frozen=True)
class FamilyDataset:
    linkage_map: LinkageMap
    families: Tuple[Family, ...]

    def __post_init__(self):
        if len(self.families) < 1:
            raise InputError("dataset has no families")
        m = self.linkage_map.n_markers
        ids = set()
        for fam in self.families:
            if fam.codes.shape[1] != m:
                raise InputError(
                    f"family {fam.family_id!r}: {fam.codes.shape[1]} marker codes, map has {m}"
                )
            if fam.family_id in ids:
                raise InputError(f"duplicate family id {fam.family_id!r}")
            ids.add(fam.family_id)

    @property
    def traits(self) -> List[str]:
        out: List[str] = []
        for fam in self.families:
            for t in fam.phenotypes:
                if t not in out:
                    out.append(t)
        return out

    @property
    def n_individuals(self) -> int:
        return sum(f.size for f in self.families)

    def genotype_tsv(self) -> str:
        header = ["family", "cross", "individual"] + self.linkage_map.marker_names
        lines = ["\t".join(header)]
        for fam in self.families:
            for i, ind in enumerate(fam.individual_ids):
                codes = ["NA" if c == MISSING else str(int(c)) for c in fam.codes[i]]
                lines.append("\t".join([fam.family_id, fam.cross.value, ind] + codes))
        return "\n".join(lines) + "\n"

    def phenotype_tsv(self) -> str:
        lines = ["family\tindividual\ttraits"]
        for fam in self.families:
            for i, ind in enumerate(fam.individual_ids):
                pairs = [
                    f"{t}={format_float(v[i])}"
                    for t, v in fam.phenotypes.items()
                    if not math.isnan(v[i])
                ]
                lines.append("\t".join([fam.family_id, ind] + pairs))
        return "\n".join(lines) + "\n"


def _parse_code(token: str, lineno: int) -> int:
    token = token.strip()
    if token in ("NA", "na", "."):
        return MISSING
    if token in ("0", "1"):
        return int(token)
    raise InputError(f"genotype line {lineno}: code {token!r} is not 0, 1 or NA")


def parse_dataset(linkage_map: LinkageMap, genotype_text: str, phenotype_text: str) -> FamilyDataset:
    """Build a validated dataset from genotype and phenotype TSV text."""
    lines = [l for l in genotype_text.splitlines() if l.strip()]
    if not lines:
        raise InputError("genotype file is empty")
    header = lines[0].rstrip("\r\n").split("\t")
    if len(header) < 3:
        raise InputError("genotype header must start with family, cross, individual")
    marker_cols = [h.strip() for h in header[3:]]
    expected = linkage_map.marker_names
    if sorted(marker_cols) != sorted(expected) or len(set(marker_cols)) != len(marker_cols):
        missing = sorted(set(expected) - set(marker_cols))
        extra = sorted(set(marker_cols) - set(expected))
        raise InputError(f"genotype markers do not match map (missing {missing}, unknown {extra})")
    order = [marker_cols.index(name) for name in expected]

    fam_order: List[str] = []
    fam_cross: Dict[str, CrossType] = {}
    fam_rows: Dict[str, List[Tuple[str, List[int]]]] = {}
    for lineno, line in enumerate(lines[1:], start=2):
        cols = line.rstrip("\r\n").split("\t")
        if len(cols) != len(header):
            raise InputError(f"genotype line {lineno}: expected {len(header)} fields, got {len(cols)}")
        fid, cross_tok, ind = cols[0].strip(), cols[1].strip(), cols[2].strip()
        cross = CrossType.parse(cross_tok)
        if fid in fam_cross and fam_cross[fid] is not cross:
            raise InputError(f"genotype line {lineno}: family {fid!r} listed with two cross types")
        if fid not in fam_cross:
            fam_order.append(fid)
            fam_cross[fid] = cross
            fam_rows[fid] = []
        raw = [_parse_code(c, lineno) for c in cols[3:]]
        if any(ind == other for other, _ in fam_rows[fid]):
            raise InputError(f"genotype line {lineno}: duplicate individual {ind!r} in family {fid!r}")
        fam_rows[fid].append((ind, [raw[j] for j in order]))

    phen: Dict[Tuple[str, str], Dict[str, float]] = {}
    for lineno, cols in _data_lines(phenotype_text):
        if len(cols) < 2:
            raise InputError(f"phenotype line {lineno}: expected family and individual")
        key = (cols[0].strip(), cols[1].strip())
        if key[0] not in fam_rows or all(key[1] != ind for ind, _ in fam_rows[key[0]]):
            raise InputError(
                f"phenotype line {lineno}: individual {key[1]!r} of family {key[0]!r} has no genotype row"
            )
        if key in phen:
            raise InputError(f"phenotype line {lineno}: duplicate phenotype row for {key}")
        values: Dict[str, float] = {}
        for item in cols[2:]:
            item = item.strip()
            if not item:
                continue
            trait, sep, val = item.partition("=")
            if not sep or not trait:
                raise InputError(f"phenotype line {lineno}: expected trait=value, got {item!r}")
            try:
                values[trait] = float(val)
            except ValueError:
                raise InputError(f"phenotype line {lineno}: non-numeric value {val!r}") from None
        phen[key] = values

    traits: List[str] = []
    for values in phen.values():
        for t in values:
            if t not in traits:
                traits.append(t)

    families = []
    for fid in fam_order:
        rows = fam_rows[fid]
        ids = tuple(ind for ind, _ in rows)
        codes = np.array([c for _, c in rows], dtype=np.int8).reshape(len(rows), len(expected))
        phenotypes = {
            t: np.array([phen.get((fid, ind), {}).get(t, np.nan) for ind in ids])
            for t in traits
        }
        families.append(Family(fid, fam_cross[fid], ids, codes, phenotypes))
    return FamilyDataset(linkage_map, tuple(families))


def read_inputs(map_path: str, genotype_path: str, phenotype_path: str) -> FamilyDataset:
    with open(map_path) as fh:
        lmap = parse_map(fh.read())
    with open(genotype_path) as fh:
        geno = fh.read()
    with open(phenotype_path) as fh:
        phen = fh.read()
    return parse_dataset(lmap, geno, phen)
