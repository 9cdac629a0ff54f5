"""Simulation of reciprocal backcross endosperm data and power studies."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from pydantic import BaseModel, Field, model_validator

from . import inference
from .genmap import CrossType, Family, FamilyDataset, LinkageMap, format_float, haldane_recomb_array
from .ibdcore import CROSS_INDEX, IBD_TABLES, PHI_VALUES
from .scan import ScanOptions, Scanner

log = logging.getLogger(__name__)

CROSSES = tuple(CrossType)


class QtlSpec(BaseModel):
    chrom: str
    pos: float
    sigma_m2: float = Field(0.0, ge=0)
    sigma_f2: float = Field(0.0, ge=0)
    sigma_mf2: float = Field(0.0, ge=0)


class Design(BaseModel):
    families: int = Field(..., ge=1)
    offspring: int = Field(..., ge=1)
    total: Optional[int] = None
    allocation: Optional[List[int]] = None  # families per cross type, in CrossType order

    @model_validator(mode="after")
    def _check(self):
        if self.total is not None and self.total != self.families * self.offspring:
            raise ValueError(
                f"total: {self.total} != families * offspring = {self.families * self.offspring}"
            )
        if self.allocation is not None:
            if len(self.allocation) != 4 or any(a < 0 for a in self.allocation):
                raise ValueError("allocation: need four non-negative counts")
            if sum(self.allocation) != self.families:
                raise ValueError("allocation: counts must sum to families")
        return self

    def crosses(self) -> List[CrossType]:
        if self.allocation is None:
            return [CROSSES[k % 4] for k in range(self.families)]
        out = []
        for cross, count in zip(CROSSES, self.allocation):
            out += [cross] * count
        return out

    @property
    def label(self) -> str:
        return f"{self.families}x{self.offspring}"


class TruthSpec(BaseModel):
    name: Optional[str] = None
    qtl: List[QtlSpec] = Field(default_factory=list)
    sigma_g2: float = Field(0.0, ge=0)
    sigma_e2: float = Field(1.0, gt=0)
    means: Tuple[float, float, float] = (0.0, 0.0, 0.0)
    design: Design

    @property
    def label(self) -> str:
        return self.name or self.design.label

    def null(self) -> "TruthSpec":
        q = [x.model_copy(update={"sigma_m2": 0.0, "sigma_f2": 0.0, "sigma_mf2": 0.0}) for x in self.qtl]
        return self.model_copy(update={"qtl": q})

    @model_validator(mode="after")
    def _check_effects(self):
        for i, q in enumerate(self.qtl):
            if q.sigma_mf2 > math.sqrt(q.sigma_m2 * q.sigma_f2) + 1e-12:
                raise ValueError(
                    f"qtl.{i}.sigma_mf2: {q.sigma_mf2} exceeds sqrt(sigma_m2 * sigma_f2) = "
                    f"{math.sqrt(q.sigma_m2 * q.sigma_f2):.6g}; no allele-effect model has this covariance"
                )
        return self

    def validate_against(self, linkage_map: LinkageMap) -> None:
        for i, q in enumerate(self.qtl):
            try:
                c = linkage_map.chromosome(q.chrom)
            except KeyError:
                raise ValueError(f"qtl.{i}.chrom: unknown chromosome {q.chrom!r}") from None
            if not c.start <= q.pos <= c.end:
                raise ValueError(f"qtl.{i}.pos: {q.pos} outside [{c.start}, {c.end}]")


def simulate_genotypes(linkage_map: LinkageMap, design: Design, seed, qtl: Sequence[QtlSpec] = ()
                       ) -> Tuple[FamilyDataset, List[np.ndarray]]:
    """Draw F1-transmitted alleles along each chromosome as a Markov chain.

    Returns the dataset (marker codes only) and, per family, an (n, n_qtl)
    array of the transmitted allele at each QTL.
    """
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    crosses = design.crosses()
    n_ind = design.families * design.offspring
    marker_codes = []
    qtl_codes = np.zeros((n_ind, len(qtl)), dtype=np.int8)
    for c in linkage_map.chromosomes:
        pos = list(c.positions)
        loci = [(p, "m", i) for i, p in enumerate(pos)]
        loci += [(q.pos, "q", j) for j, q in enumerate(qtl) if q.chrom == c.name]
        loci.sort(key=lambda t: (t[0], t[1] == "q"))
        x = np.array([t[0] for t in loci])
        r = haldane_recomb_array(np.diff(x))
        first = rng.random(n_ind) < 0.5
        flips = rng.random((n_ind, len(loci) - 1)) < r
        path = np.concatenate([first[:, None], flips], axis=1)
        codes = (np.cumsum(path, axis=1) % 2).astype(np.int8)
        mcols = [k for k, t in enumerate(loci) if t[1] == "m"]
        marker_codes.append(codes[:, mcols])
        for k, t in enumerate(loci):
            if t[1] == "q":
                qtl_codes[:, t[2]] = codes[:, k]
    allcodes = np.concatenate(marker_codes, axis=1)
    families = []
    qtl_out = []
    width = len(str(design.families))
    for k, cross in enumerate(crosses):
        rows = slice(k * design.offspring, (k + 1) * design.offspring)
        fid = f"F{k + 1:0{width}d}"
        ids = tuple(f"{fid}_{i + 1}" for i in range(design.offspring))
        families.append(Family(fid, cross, ids, allcodes[rows]))
        qtl_out.append(qtl_codes[rows])
    return FamilyDataset(linkage_map, tuple(families)), qtl_out


def realized_covariance(cross: CrossType, qtl_codes: np.ndarray, truth: TruthSpec) -> np.ndarray:
    """Covariance of one family from the realized QTL genotypes (exact shares)."""
    n = qtl_codes.shape[0]
    ci = CROSS_INDEX[cross]
    off, diag = PHI_VALUES[ci]
    sigma = np.full((n, n), off * truth.sigma_g2)
    sigma[np.diag_indices(n)] = diag * truth.sigma_g2 + truth.sigma_e2
    for j, q in enumerate(truth.qtl):
        codes = qtl_codes[:, j].astype(int)
        tab = IBD_TABLES[ci]  # (3, 2, 2): m, mf, f
        shares = tab[:, codes][:, :, codes]
        sigma += shares[0] * q.sigma_m2 + shares[1] * q.sigma_mf2 + shares[2] * q.sigma_f2
    return sigma


def allele_effect_covariance(q: QtlSpec) -> np.ndarray:
    """Covariance of the (maternal-role, paternal-role) effects of one founder allele.

    With these per-allele effects the covariance of two endosperms reproduces
    the sharing rule: 4/3 per shared maternal allele, 1/3 per shared paternal
    allele and 2/3 per maternal-paternal match.
    """
    return np.array([[4 / 3 * q.sigma_m2, 2 / 3 * q.sigma_mf2],
                     [2 / 3 * q.sigma_mf2, 1 / 3 * q.sigma_f2]])


def _sqrtm_psd(sigma: np.ndarray) -> np.ndarray:
    vals, vecs = np.linalg.eigh(sigma)
    scale = max(float(np.max(np.abs(vals))), 1e-300)
    if vals.min() < -1e-10 * scale:
        raise ValueError(f"covariance is not positive semidefinite (min eigenvalue {vals.min():.3g})")
    vals = np.clip(vals, 0.0, None)
    return (vecs * np.sqrt(vals)) @ vecs.T


def _founder_indices(cross: CrossType, codes: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """Founder allele (0 = Q, 1 = q) carried in maternal and paternal role."""
    gens = cross.genotypes()
    mat = np.array([int(g.maternal_allele == "q") for g in gens])
    pat = np.array([int(g.paternal_allele == "q") for g in gens])
    codes = codes.astype(int)
    return mat[codes], pat[codes]


def draw_family_phenotypes(cross: CrossType, qtl_codes: np.ndarray, truth: TruthSpec, rng: np.random.Generator,
                           n_draws: int = 1) -> np.ndarray:
    """Independent phenotype draws (n_draws, n) for one family with fixed QTL genotypes.

    Each draw samples fresh founder-allele effects at every QTL, a polygenic
    vector with covariance Phi * sigma_g2 and independent residuals.
    """
    n = qtl_codes.shape[0]
    ci = CROSS_INDEX[cross]
    off, diag = PHI_VALUES[ci]
    phi = np.full((n, n), off)
    phi[np.diag_indices(n)] = diag
    y = np.full((n_draws, n), float(truth.means[cross.maternal_class]))
    y += rng.standard_normal((n_draws, n)) @ (_sqrtm_psd(phi) * math.sqrt(truth.sigma_g2)).T
    y += rng.standard_normal((n_draws, n)) * math.sqrt(truth.sigma_e2)
    for j, q in enumerate(truth.qtl):
        root = _sqrtm_psd(allele_effect_covariance(q))
        # effects[d, allele, role]; alleles Q and q are independent
        effects = rng.standard_normal((n_draws, 2, 2)) @ root.T
        mat, pat = _founder_indices(cross, qtl_codes[:, j])
        y += effects[:, mat, 0] + effects[:, pat, 1]
    return y


def simulate_phenotypes(dataset: FamilyDataset, qtl_codes: Sequence[np.ndarray], truth: TruthSpec, seed,
                        trait: str = "trait") -> FamilyDataset:
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    fams = []
    for fam, codes in zip(dataset.families, qtl_codes):
        y = draw_family_phenotypes(fam.cross, codes, truth, rng)[0]
        fams.append(fam.with_phenotype(trait, y))
    return FamilyDataset(dataset.linkage_map, tuple(fams))


def simulate_dataset(linkage_map: LinkageMap, truth: TruthSpec, seed, trait: str = "trait") -> FamilyDataset:
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    geno, qcodes = simulate_genotypes(linkage_map, truth.design, rng, truth.qtl)
    return simulate_phenotypes(geno, qcodes, truth, rng, trait)


@dataclass
class StudyReport:
    rows: List[Dict[str, object]] = field(default_factory=list)

    COLUMNS = ("design", "families", "offspring", "mode", "n_rep", "n_failed", "threshold",
               "power", "power_se", "imprinting_rate", "rmse_pos", "rmse_pos_se",
               "mean_sigma_m2", "mean_sigma_f2", "mean_sigma_mf2", "mean_sigma_g2", "mean_sigma_e2")

    def to_csv(self) -> str:
        lines = [",".join(self.COLUMNS)]
        for r in self.rows:
            vals = []
            for c in self.COLUMNS:
                v = r[c]
                vals.append(format_float(v) if isinstance(v, float) else str(v))
            lines.append(",".join(vals))
        return "\n".join(lines) + "\n"

    def row(self, design: str, mode: Optional[str] = None) -> Dict[str, object]:
        for r in self.rows:
            if r["design"] == design and (mode is None or r["mode"] == mode):
                return r
        raise KeyError(design)


def _replicate(args) -> Optional[Dict[str, float]]:
    linkage_map, truth, options, seed, key, alpha = args
    rng = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=key))
    try:
        data = simulate_dataset(linkage_map, truth, rng)
        scanner = Scanner(data, "trait", options)
        profile = scanner.scan(workers=1)
    except (np.linalg.LinAlgError, ValueError, FloatingPointError) as exc:
        log.warning("replicate %s failed: %s", key, exc)
        return None
    out = {"max_lr": max(profile.max_lr().values())}
    if truth.qtl:
        q = truth.qtl[0]
        top = profile.top(q.chrom)
        out["peak"] = top.position
        out["error"] = top.position - q.pos
        om = top.omega_hat
        out.update(sigma_m2=om.sigma_m2, sigma_f2=om.sigma_f2, sigma_mf2=om.sigma_mf2,
                   sigma_g2=om.sigma_g2, sigma_e2=om.sigma_e2)
        try:
            bat = scanner.test_battery(q.chrom, top.position, alpha)
            out["p_imp"] = bat["imprinting"].p_value
        except (np.linalg.LinAlgError, ValueError):
            out["p_imp"] = math.nan
    return out


def _map_jobs(fn, jobs, workers: int):
    if workers > 1:
        from concurrent.futures import ProcessPoolExecutor

        with ProcessPoolExecutor(max_workers=workers) as ex:
            return list(ex.map(fn, jobs, chunksize=max(1, len(jobs) // (4 * workers))))
    return [fn(j) for j in jobs]


def null_threshold(linkage_map: LinkageMap, truth: TruthSpec, options: ScanOptions, n_null: int,
                   alpha: float, seed: int, design_index: int = 0, workers: int = 1) -> float:
    """Empirical (1 - alpha) quantile of the genome-wide max LR under the null truth."""
    null = truth.null()
    jobs = [(linkage_map, null, options, seed, (design_index, 0, i), alpha) for i in range(n_null)]
    res = [r for r in _map_jobs(_replicate, jobs, workers) if r is not None]
    return inference.empirical_threshold([r["max_lr"] for r in res], alpha)


def run_study(designs: Sequence[TruthSpec], linkage_map: LinkageMap, n_rep: int, alpha: float = 0.05,
              seed: int = 0, mode: str = "single", step: float = 2.0, threshold: Optional[float] = None,
              n_null: Optional[int] = None, workers: int = 1, tol: float = 1e-6,
              max_iter: int = 200) -> StudyReport:
    """Monte Carlo power study, one report row per design.

    Detection means the genome-wide maximum LR reaches the threshold. Unless a
    fixed `threshold` is given, each design gets its own threshold from
    `n_null` (default `n_rep`) replicates simulated under its null truth.
    Position error is measured at the highest LR on the first QTL's
    chromosome, over all successful replicates.
    """
    if n_rep < 1:
        raise ValueError("n_rep must be at least 1")
    options = ScanOptions(step=step, tol=tol, max_iter=max_iter, mode=mode)
    report = StudyReport()
    for d, truth in enumerate(designs):
        truth.validate_against(linkage_map)
        thr = threshold
        if thr is None:
            thr = null_threshold(linkage_map, truth, options, n_null or n_rep, alpha, seed, d, workers)
        jobs = [(linkage_map, truth, options, seed, (d, 1, i), alpha) for i in range(n_rep)]
        res = _map_jobs(_replicate, jobs, workers)
        ok = [r for r in res if r is not None]
        n_ok = len(ok)
        det = np.array([r["max_lr"] >= thr for r in ok], dtype=float)
        power = float(det.mean()) if n_ok else math.nan
        row: Dict[str, object] = {
            "design": truth.label, "families": truth.design.families, "offspring": truth.design.offspring,
            "mode": mode, "n_rep": n_rep, "n_failed": n_rep - n_ok, "threshold": float(thr),
            "power": power, "power_se": math.sqrt(power * (1 - power) / n_ok) if n_ok else math.nan,
        }
        if truth.qtl and n_ok:
            err2 = np.array([r["error"] ** 2 for r in ok])
            rmse = math.sqrt(err2.mean())
            # delta-method standard error of the RMSE
            rmse_se = float(err2.std(ddof=1) / math.sqrt(n_ok) / (2 * rmse)) if rmse > 0 and n_ok > 1 else 0.0
            imp = np.array([bool(r["max_lr"] >= thr and r.get("p_imp", 1.0) < alpha) for r in ok], dtype=float)
            row.update(imprinting_rate=float(imp.mean()), rmse_pos=rmse, rmse_pos_se=rmse_se)
            for k in ("sigma_m2", "sigma_f2", "sigma_mf2", "sigma_g2", "sigma_e2"):
                row[f"mean_{k}"] = float(np.mean([r[k] for r in ok]))
        else:
            row.update(imprinting_rate=math.nan, rmse_pos=math.nan, rmse_pos_se=math.nan)
            for k in ("sigma_m2", "sigma_f2", "sigma_mf2", "sigma_g2", "sigma_e2"):
                row[f"mean_{k}"] = math.nan
        report.rows.append(row)
    return report
