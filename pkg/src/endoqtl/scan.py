"""Interval scans over the linkage map and peak calling."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, replace
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import inference
from .genmap import FamilyDataset, LinkageMap
from .ibdcore import CROSS_INDEX, PHI_VALUES, expected_matrices, expected_total, origin_probs
from .vcmodel import ModelFit, RemlProblem, TraitData, VarianceComponents, FixedEffects
from .genmap import MISSING

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class ScanOptions:
    step: float = 2.0
    tol: float = 1e-6
    max_iter: int = 200
    mode: str = "single"  # single | multi
    workers: int = 1
    chunk: int = 16

    def __post_init__(self):
        if not self.step > 0:
            raise ValueError("step must be positive")
        if self.mode not in ("single", "multi"):
            raise ValueError("mode must be 'single' or 'multi'")


@dataclass
class ScanPoint:
    chromosome: str
    position: float
    lr: float
    p_value: float
    omega_hat: VarianceComponents
    beta_hat: FixedEffects
    converged: bool
    boundary: bool
    theta: Optional[np.ndarray] = field(default=None, repr=False)
    param_names: Tuple[str, ...] = field(default=(), repr=False)


@dataclass
class ScanProfile:
    trait: str
    mode: str
    points: List[ScanPoint]
    context: Optional["Scanner"] = field(default=None, repr=False)

    def chromosome_points(self, chrom: str) -> List[ScanPoint]:
        return [p for p in self.points if p.chromosome == chrom]

    @property
    def chromosomes(self) -> List[str]:
        out: List[str] = []
        for p in self.points:
            if p.chromosome not in out:
                out.append(p.chromosome)
        return out

    def max_lr(self) -> Dict[str, float]:
        out: Dict[str, float] = {}
        for p in self.points:
            out[p.chromosome] = max(out.get(p.chromosome, 0.0), p.lr)
        return out

    def top(self, chrom: Optional[str] = None) -> ScanPoint:
        pts = self.points if chrom is None else self.chromosome_points(chrom)
        return max(pts, key=lambda p: (p.lr, -p.position))


def scan_grid(linkage_map: LinkageMap, step: float) -> List[Tuple[str, float]]:
    """Every marker plus points every `step` cM measured from each interval's left marker."""
    grid = []
    for c in linkage_map.chromosomes:
        pos = c.positions
        for a, b in zip(pos[:-1], pos[1:]):
            k = 0
            while True:
                x = a + k * step
                if x >= b - 1e-9:
                    break
                grid.append((c.name, float(x)))
                k += 1
        grid.append((c.name, float(pos[-1])))
    return grid


@dataclass
class _FamilyGroup:
    index: np.ndarray  # family positions in TraitData order
    cross_idx: np.ndarray  # (K,)
    codes: np.ndarray  # (K, n, M)
    phi: np.ndarray  # (K, n, n)


class Scanner:
    """Holds one trait of a dataset and evaluates models at map positions."""

    def __init__(self, dataset: FamilyDataset, trait: str, options: ScanOptions = ScanOptions(),
                 data: Optional[TraitData] = None):
        self.dataset = dataset
        self.trait = trait
        self.options = options
        self.map = dataset.linkage_map
        self.data = data if data is not None else TraitData.from_dataset(dataset, trait)
        fams = {f.family_id: f for f in dataset.families}
        sizes = np.array([len(y) for y in self.data.y])
        self.groups: List[_FamilyGroup] = []
        for s in sorted(set(sizes.tolist())):
            idx = np.flatnonzero(sizes == s)
            codes = np.stack([fams[self.data.family_ids[i]].codes[self.data.keep[i]] for i in idx])
            cross_idx = np.array([CROSS_INDEX[self.data.crosses[i]] for i in idx])
            off, diag = PHI_VALUES[cross_idx, 0], PHI_VALUES[cross_idx, 1]
            phi = np.broadcast_to(off[:, None, None], (len(idx), s, s)).copy()
            ar = np.arange(s)
            phi[:, ar, ar] = diag[:, None]
            self.groups.append(_FamilyGroup(idx, cross_idx, codes, phi))
        self._marker_cache: Dict[int, List[np.ndarray]] = {}
        self._null_cache: Dict[object, ModelFit] = {}

    # -- matrices ---------------------------------------------------------
    def _marker_totals(self, column: int) -> List[np.ndarray]:
        if column not in self._marker_cache:
            out = []
            for g in self.groups:
                codes = g.codes[:, :, column]
                p = np.where(codes == MISSING, 0.5, codes.astype(float))
                out.append(expected_total(g.cross_idx, p))
            self._marker_cache[column] = out
        return self._marker_cache[column]

    def background_columns(self, chrom: str, position: float) -> Tuple[Optional[int], Optional[int]]:
        li, ri = self.map.locate(chrom, position)
        n = len(self.map.chromosome(chrom).markers)
        off = self.map.marker_offset(chrom)
        L = off + li - 1 if li - 1 >= 0 else None
        R = off + ri + 1 if ri + 1 < n else None
        return L, R

    def component_stacks(self, chrom: str, position: float, multi: Optional[bool] = None):
        multi = self.options.mode == "multi" if multi is None else multi
        out = []
        Lc, Rc = self.background_columns(chrom, position) if multi else (None, None)
        for gi, g in enumerate(self.groups):
            p = origin_probs(g.codes, self.map, chrom, position)
            mats = expected_matrices(g.cross_idx, p)
            comp = {"m": mats[0], "mf": mats[1], "f": mats[2], "g": g.phi}
            if Lc is not None:
                comp["L"] = self._marker_totals(Lc)[gi]
            if Rc is not None:
                comp["R"] = self._marker_totals(Rc)[gi]
            out.append((g.index, comp))
        return out

    def null_stacks(self, chrom: str, position: float):
        multi = self.options.mode == "multi"
        Lc, Rc = self.background_columns(chrom, position) if multi else (None, None)
        out = []
        for gi, g in enumerate(self.groups):
            comp = {"g": g.phi}
            if Lc is not None:
                comp["L"] = self._marker_totals(Lc)[gi]
            if Rc is not None:
                comp["R"] = self._marker_totals(Rc)[gi]
            out.append((g.index, comp))
        return out

    def problem(self, chrom: str, position: float, model: str = "full", pooled_means: bool = False) -> RemlProblem:
        stacks = self.null_stacks(chrom, position) if model == "null" else self.component_stacks(chrom, position)
        return RemlProblem.from_groups(self.data, stacks, model=model, pooled_means=pooled_means)

    # -- fitting ----------------------------------------------------------
    def null_key(self, chrom: str, position: float):
        if self.options.mode == "single":
            return "single"
        return self.background_columns(chrom, position)

    def null_fit(self, chrom: str, position: float) -> ModelFit:
        key = self.null_key(chrom, position)
        if key not in self._null_cache:
            prob = self.problem(chrom, position, "null")
            self._null_cache[key] = prob.fit(tol=self.options.tol, max_iter=self.options.max_iter)
        return self._null_cache[key]

    def _fit_with_fallback(self, prob: RemlProblem, init: Optional[np.ndarray],
                           floor: Optional[ModelFit] = None, null_start: Optional[np.ndarray] = None) -> ModelFit:
        o = self.options
        fit = prob.fit(init, o.tol, o.max_iter)
        if fit.converged and (floor is None or fit.reml_loglik >= floor.reml_loglik - 1e-8):
            return fit
        candidates = [fit]
        if init is not None:
            candidates.append(prob.fit(None, o.tol, o.max_iter))
        if null_start is not None:
            candidates.append(prob.fit(null_start, o.tol, o.max_iter))
        good = [f for f in candidates if f.converged] or candidates
        return max(good, key=lambda f: f.reml_loglik)

    def _null_start(self, prob: RemlProblem, null: ModelFit) -> np.ndarray:
        theta = np.zeros(len(prob.param_names))
        for i, name in enumerate(prob.param_names):
            if name in null.param_names:
                theta[i] = null.param(name)
        return theta

    def fit_full(self, chrom: str, position: float, init: Optional[np.ndarray | Dict[str, float]] = None,
                 model: str = "full", pooled_means: bool = False) -> ModelFit:
        null = self.null_fit(chrom, position)
        prob = self.problem(chrom, position, model, pooled_means)
        if isinstance(init, dict):
            init = np.array([init.get(name, 0.0) for name in prob.param_names])
        floor = null if not pooled_means else None
        return self._fit_with_fallback(prob, init, floor, self._null_start(prob, null) if floor else None)

    def evaluate(self, chrom: str, position: float, init: Optional[np.ndarray | Dict[str, float]] = None) -> ScanPoint:
        null = self.null_fit(chrom, position)
        full = self.fit_full(chrom, position, init)
        res = inference.qtl_test(full, null)
        p = res.p_value if self.options.mode == "single" else math.nan
        return ScanPoint(chrom, position, res.statistic, p, full.omega, full.beta,
                         full.converged and null.converged, bool(full.boundary), full.theta, full.param_names)

    def _run_chunk(self, positions: Sequence[Tuple[str, float]]) -> List[ScanPoint]:
        out = []
        init = None
        for chrom, pos in positions:
            pt = self.evaluate(chrom, pos, init)
            # keyed by name: background terms come and go near chromosome ends
            init = dict(zip(pt.param_names, pt.theta)) if pt.converged else None
            out.append(pt)
        return out

    def chunks(self) -> List[List[Tuple[str, float]]]:
        grid = scan_grid(self.map, self.options.step)
        chunks: List[List[Tuple[str, float]]] = []
        for c in self.map.chromosomes:
            pts = [g for g in grid if g[0] == c.name]
            for i in range(0, len(pts), self.options.chunk):
                chunks.append(pts[i:i + self.options.chunk])
        return chunks

    def scan(self, workers: Optional[int] = None) -> ScanProfile:
        workers = self.options.workers if workers is None else workers
        chunks = self.chunks()
        if workers > 1 and len(chunks) > 1:
            from concurrent.futures import ProcessPoolExecutor

            with ProcessPoolExecutor(max_workers=workers) as ex:
                parts = list(ex.map(_chunk_job, [(self, ch) for ch in chunks]))
        else:
            parts = [self._run_chunk(ch) for ch in chunks]
        points = [p for part in parts for p in part]
        return ScanProfile(self.trait, self.options.mode, points, self)

    def with_y(self, y_blocks: Sequence[np.ndarray]) -> "Scanner":
        return Scanner(self.dataset, self.trait, self.options, self.data.with_y(y_blocks))

    # -- tests at a position ----------------------------------------------
    def test_battery(self, chrom: str, position: float, imprinting_alpha: float = 0.05,
                     full: Optional[ModelFit] = None, always_complete: bool = False) -> Dict[str, object]:
        full = full or self.fit_full(chrom, position)
        null = self.null_fit(chrom, position)
        equal, full = self._nested(chrom, position, "equal", full)
        nested = {}
        imp = inference.imprinting_test(full, equal)
        if always_complete or (imp.reliable and imp.p_value < imprinting_alpha):
            for which in ("no_maternal", "no_paternal"):
                nested[which], full = self._nested(chrom, position, which, full)
        # `full` may have been improved by a nested restart, so build every
        # statistic from its final value.
        out: Dict[str, object] = {"full": full, "qtl": inference.qtl_test(full, null)}
        if self.options.mode == "multi":
            out["qtl"].p_value = math.nan
        out["imprinting"] = inference.imprinting_test(full, equal)
        if nested:
            out["maternal"] = inference.complete_imprinting_test(full, nested["no_maternal"], "maternal")
            out["paternal"] = inference.complete_imprinting_test(full, nested["no_paternal"], "paternal")
        if len(self.data.observed_classes) >= 2:
            pooled = self.fit_full(chrom, position, init=full.theta, pooled_means=True)
            out["maternal_effect"] = inference.maternal_effect_test(full, pooled)
        return out

    def _nested(self, chrom: str, position: float, model: str, full: ModelFit) -> Tuple[ModelFit, ModelFit]:
        """Fit a nested model from the full estimates; returns (nested, full).

        If the nested optimum beats the full fit, the full model is refit from
        the nested solution, since the full model contains it.
        """
        prob = self.problem(chrom, position, model)
        init = np.zeros(len(prob.param_names))
        for i, name in enumerate(prob.param_names):
            if name == "m=f":
                init[i] = 0.5 * (full.param("m") + full.param("f"))
            else:
                init[i] = full.param(name)
        fit = self._fit_with_fallback(prob, init)
        if fit.reml_loglik > full.reml_loglik + 1e-8:
            start = np.zeros(len(full.param_names))
            for i, name in enumerate(full.param_names):
                for j, nested_name in enumerate(fit.param_names):
                    if name in nested_name.split("="):
                        start[i] = fit.theta[j]
            refit = self._fit_with_fallback(self.problem(chrom, position, full.model), start)
            if refit.reml_loglik > full.reml_loglik:
                log.debug("full model at %s:%g improved by restart from model %s", chrom, position, model)
                full = refit
            if fit.reml_loglik > full.reml_loglik + 1e-8:
                log.warning("nested model %s beats the full model at %s:%g", model, chrom, position)
        return fit, full


def _chunk_job(args):
    scanner, chunk = args
    return scanner._run_chunk(chunk)


def single_scan(dataset: FamilyDataset, trait: str, step: float = 2.0, **opts) -> ScanProfile:
    return Scanner(dataset, trait, ScanOptions(step=step, mode="single", **opts)).scan()


def multi_scan(dataset: FamilyDataset, trait: str, step: float = 2.0, **opts) -> ScanProfile:
    return Scanner(dataset, trait, ScanOptions(step=step, mode="multi", **opts)).scan()


# -- peaks -----------------------------------------------------------------

def local_maxima(values: Sequence[float]) -> List[int]:
    """Indices of strict local maxima; a plateau counts once, at its first index."""
    v = np.asarray(values, dtype=float)
    n = len(v)
    out = []
    i = 0
    while i < n:
        j = i
        while j + 1 < n and v[j + 1] == v[i]:
            j += 1
        left = v[i - 1] if i > 0 else -np.inf
        right = v[j + 1] if j + 1 < n else -np.inf
        if v[i] > left and v[i] > right:
            out.append(i)
        i = j + 1
    return out


def excursion_peaks(values: Sequence[float], level: float) -> List[int]:
    """Highest local maximum of each run of consecutive values >= `level`."""
    v = np.asarray(values, dtype=float)
    maxima = set(local_maxima(v))
    out = []
    i = 0
    while i < len(v):
        if v[i] < level:
            i += 1
            continue
        j = i
        while j + 1 < len(v) and v[j + 1] >= level:
            j += 1
        cands = [k for k in range(i, j + 1) if k in maxima]
        if cands:
            out.append(max(cands, key=lambda k: (v[k], -k)))
        i = j + 1
    return out


@dataclass
class QtlCall:
    trait: str
    chromosome: str
    peak_position: float
    marker: str
    offset: float
    lr_peak: float
    p_value: float
    significance: str  # genome-wide | suggestive | none
    imprinting: str  # none | partial | complete-maternal | complete-paternal | NA
    omega: VarianceComponents
    beta: FixedEffects
    p_M: float = math.nan
    p_imp: float = math.nan
    p_m: float = math.nan
    p_f: float = math.nan
    imprinting_boundary: bool = False

    @property
    def position_label(self) -> str:
        if abs(self.offset) < 1e-9:
            return self.marker
        return f"{self.marker}+{self.offset:.2f}cM"


def left_marker(linkage_map: LinkageMap, chrom: str, position: float) -> Tuple[str, float]:
    c = linkage_map.chromosome(chrom)
    pos = c.positions
    i = int(np.searchsorted(pos, position + 1e-9, side="right")) - 1
    i = max(i, 0)
    return c.markers[i].name, float(position - pos[i])


def classify_imprinting(p_imp: float, p_m: float, p_f: float, alpha: float) -> str:
    """Imprinting class from the test battery.

    ``p_m`` tests sigma_m2 = 0 (silent maternal allele), ``p_f`` tests
    sigma_f2 = 0 (silent paternal allele).
    """
    if not p_imp < alpha:
        return "none"
    if p_m >= alpha and p_f < alpha:
        return "complete-maternal"
    if p_f >= alpha and p_m < alpha:
        return "complete-paternal"
    return "partial"


def call_peaks(profile: ScanProfile, genome_threshold: Optional[float] = None,
               chrom_thresholds: Optional[Dict[str, float]] = None,
               imprinting_alpha: float = 0.05, scanner: Optional[Scanner] = None) -> List[QtlCall]:
    """Peaks of the LR profile with significance and imprinting classification.

    Without thresholds (single-QTL mode only) peaks with pointwise mixture
    p-value below `imprinting_alpha` are reported with significance "none".
    """
    scanner = scanner or profile.context
    if not profile.points:
        return []
    if genome_threshold is None and profile.mode == "multi":
        raise ValueError("multi-QTL profiles need permutation thresholds; asymptotic p-values are not defined")
    chrom_thresholds = chrom_thresholds or {}
    calls = []
    for chrom in profile.chromosomes:
        pts = profile.chromosome_points(chrom)
        lrs = [p.lr for p in pts]
        if genome_threshold is None:
            idx = [i for i in local_maxima(lrs) if pts[i].p_value < imprinting_alpha]
        else:
            level = min(genome_threshold, chrom_thresholds.get(chrom, genome_threshold))
            idx = excursion_peaks(lrs, level)
        for i in idx:
            pt = pts[i]
            if genome_threshold is None:
                sig = "none"
            elif pt.lr >= genome_threshold:
                sig = "genome-wide"
            elif chrom in chrom_thresholds and pt.lr >= chrom_thresholds[chrom]:
                sig = "suggestive"
            else:
                continue
            marker, offset = left_marker(profile.context.map if profile.context else scanner.map, chrom, pt.position)
            call = QtlCall(profile.trait, chrom, pt.position, marker, offset, pt.lr, pt.p_value, sig, "NA",
                           pt.omega_hat, pt.beta_hat)
            if scanner is not None:
                _annotate(call, scanner, imprinting_alpha)
            calls.append(call)
    return calls


def _annotate(call: QtlCall, scanner: Scanner, alpha: float) -> None:
    battery = scanner.test_battery(call.chromosome, call.peak_position, alpha)
    full = battery["full"]
    call.omega, call.beta = full.omega, full.beta
    imp = battery["imprinting"]
    call.p_imp = imp.p_value
    call.imprinting_boundary = imp.boundary_flag
    if "maternal" in battery:
        call.p_m = battery["maternal"].p_value
        call.p_f = battery["paternal"].p_value
    if "maternal_effect" in battery:
        call.p_M = battery["maternal_effect"].p_value
    call.imprinting = classify_imprinting(call.p_imp, call.p_m, call.p_f, alpha)


# -- permutation --------------------------------------------------------------

@dataclass
class PermutationScan:
    """Picklable scan function for `inference.permutation_threshold`."""

    scanner: Scanner

    def __call__(self, y_blocks: Sequence[np.ndarray]) -> Dict[str, float]:
        s = self.scanner.with_y(y_blocks)
        return s.scan(workers=1).max_lr()


def permutation_thresholds(scanner: Scanner, n_perm: int = 1000, alpha: float = 0.05, seed: int = 0,
                           workers: int = 1) -> inference.Thresholds:
    return inference.permutation_threshold(scanner.data.y, PermutationScan(scanner), n_perm, alpha, seed, workers)
