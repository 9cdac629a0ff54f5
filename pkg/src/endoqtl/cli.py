"""Command-line entry points: simulate, scan, permute, power and test.

All outputs go to the directory given by ``--out``. Files are written to
temporary names and renamed only after every output of the command has been
produced, so a failing run leaves no partial results behind.

Exit codes: 0 success, 2 input validation error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import math
import os
import sys
import tempfile
import warnings
from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from pydantic import ValidationError

from . import __version__
from .genmap import InputError, LinkageMap, format_float, parse_map, read_inputs
from .scan import QtlCall, ScanOptions, ScanProfile, Scanner, call_peaks, permutation_thresholds
from .simgen import Design, TruthSpec, run_study, simulate_dataset

log = logging.getLogger("endoqtl")

EXIT_OK = 0
EXIT_INPUT = 2
EXIT_NUMERICAL = 3

PROFILE_COLUMNS = ("chrom", "pos_cM", "LR", "p", "sigma_m2", "sigma_f2", "sigma_mf2", "sigma_g2",
                   "sigma_e2", "mu1", "mu2", "mu3", "converged")
CALL_COLUMNS = ("trait", "chrom", "pos_cM", "marker", "offset_cM", "position", "LR", "p", "significance",
                "imprinting", "mu1", "mu2", "mu3", "sigma_m2", "sigma_f2", "sigma_mf2", "sigma_g2",
                "sigma_e2", "sigma_L2", "sigma_R2", "p_M", "p_imp", "p_m", "p_f")
THRESHOLD_COLUMNS = ("scope", "chrom", "alpha", "threshold", "n_perm", "seed")
TEST_COLUMNS = ("test", "chrom", "pos_cM", "statistic", "p", "null_distribution", "df", "reliable")
GENOME_SCOPE = "genome"
CHROM_SCOPE = "chromosome"
ALL_CHROMS = "all"


@dataclass
class RunConfig:
    command: str
    map: Optional[str] = None
    geno: Optional[str] = None
    pheno: Optional[str] = None
    out: str = "."
    trait: Optional[str] = None
    step: float = 2.0
    tol: float = 1e-6
    max_iter: int = 200
    n_perm: int = 1000
    alpha: float = 0.05
    seed: int = 0
    workers: int = 1
    mode: str = "single"
    thresholds: Optional[str] = None
    truth: Optional[str] = None
    designs: Optional[str] = None
    n_rep: int = 100
    n_null: Optional[int] = None
    chrom: Optional[str] = None
    pos: Optional[float] = None

    @classmethod
    def from_args(cls, ns: argparse.Namespace) -> "RunConfig":
        keys = cls.__dataclass_fields__.keys()
        return cls(**{k: getattr(ns, k) for k in keys if hasattr(ns, k)})

    def scan_options(self) -> ScanOptions:
        return ScanOptions(step=self.step, tol=self.tol, max_iter=self.max_iter, mode=self.mode,
                           workers=self.workers)


class NumericalFailure(RuntimeError):
    pass


# -- atomic outputs ----------------------------------------------------------

class Outputs:
    """Collects output files and publishes them together."""

    def __init__(self, directory: str):
        self.directory = directory
        self.pending: List[Tuple[str, str]] = []

    def add(self, name: str, text: str) -> None:
        self.pending.append((name, text))

    def commit(self) -> List[str]:
        os.makedirs(self.directory, exist_ok=True)
        staged = []
        try:
            for name, text in self.pending:
                fd, tmp = tempfile.mkstemp(prefix=f".{name}.", dir=self.directory)
                with os.fdopen(fd, "w", newline="\n") as fh:
                    fh.write(text)
                staged.append((tmp, os.path.join(self.directory, name)))
        except BaseException:
            for tmp, _ in staged:
                os.unlink(tmp)
            raise
        for tmp, final in staged:
            os.replace(tmp, final)
        return [final for _, final in staged]


# -- formatting ----------------------------------------------------------------

def _fmt(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if v is None:
        return "NA"
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return format_float(float(v))


def _csv(columns: Sequence[str], rows: Sequence[Sequence[object]], sep: str = ",") -> str:
    lines = [sep.join(columns)]
    lines += [sep.join(_fmt(v) if not isinstance(v, str) else v for v in r) for r in rows]
    return "\n".join(lines) + "\n"


def profile_csv(profile: ScanProfile) -> str:
    rows = []
    for p in profile.points:
        o, b = p.omega_hat, p.beta_hat
        rows.append((p.chromosome, p.position, p.lr, p.p_value, o.sigma_m2, o.sigma_f2, o.sigma_mf2,
                     o.sigma_g2, o.sigma_e2, b.mu1, b.mu2, b.mu3, p.converged))
    return _csv(PROFILE_COLUMNS, rows)


def calls_csv(calls: Sequence[QtlCall]) -> str:
    rows = []
    for c in calls:
        o, b = c.omega, c.beta
        rows.append((c.trait, c.chromosome, c.peak_position, c.marker, c.offset, c.position_label, c.lr_peak,
                     c.p_value, c.significance, c.imprinting, b.mu1, b.mu2, b.mu3, o.sigma_m2, o.sigma_f2,
                     o.sigma_mf2, o.sigma_g2, o.sigma_e2, o.sigma_L2, o.sigma_R2, c.p_M, c.p_imp, c.p_m,
                     c.p_f))
    return _csv(CALL_COLUMNS, rows)


def thresholds_tsv(genome: float, per_chrom: Dict[str, float], alpha: float, n_perm: int, seed: int) -> str:
    rows = [(GENOME_SCOPE, ALL_CHROMS, alpha, genome, n_perm, seed)]
    rows += [(CHROM_SCOPE, c, alpha, v, n_perm, seed) for c, v in per_chrom.items()]
    return _csv(THRESHOLD_COLUMNS, rows, sep="\t")


def parse_thresholds(text: str) -> Tuple[float, Dict[str, float]]:
    lines = [l for l in text.splitlines() if l.strip()]
    if not lines or tuple(lines[0].split("\t")) != THRESHOLD_COLUMNS:
        raise InputError(f"thresholds header must be {' '.join(THRESHOLD_COLUMNS)!r} (tab-separated)")
    genome = None
    per: Dict[str, float] = {}
    for lineno, line in enumerate(lines[1:], start=2):
        cols = line.split("\t")
        if len(cols) != len(THRESHOLD_COLUMNS):
            raise InputError(f"thresholds line {lineno}: expected {len(THRESHOLD_COLUMNS)} fields")
        try:
            value = float(cols[3])
        except ValueError:
            raise InputError(f"thresholds line {lineno}: non-numeric threshold {cols[3]!r}") from None
        if cols[0] == GENOME_SCOPE:
            genome = value
        elif cols[0] == CHROM_SCOPE:
            per[cols[1]] = value
        else:
            raise InputError(f"thresholds line {lineno}: unknown scope {cols[0]!r}")
    if genome is None:
        raise InputError("thresholds file has no genome row")
    return genome, per


# -- SVG ---------------------------------------------------------------------

def profile_svg(profile: ScanProfile, linkage_map: LinkageMap, genome: Optional[float] = None,
                per_chrom: Optional[Dict[str, float]] = None, width: int = 900, height: int = 320) -> str:
    """LR profile along the genome; solid genome-wide and dashed chromosome-wide thresholds."""
    per_chrom = per_chrom or {}
    left, right, top, bottom, gap = 60, 20, 20, 50, 20
    chroms = linkage_map.chromosomes
    total = sum(c.end - c.start for c in chroms) or 1.0
    plot_w = width - left - right - gap * (len(chroms) - 1)
    ymax = max([p.lr for p in profile.points] + [genome or 0.0] + list(per_chrom.values()) + [1.0]) * 1.1
    plot_h = height - top - bottom

    def y(v: float) -> float:
        return top + plot_h * (1 - v / ymax)

    parts = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
             f'viewBox="0 0 {width} {height}" font-family="sans-serif" font-size="11">',
             f'<title>LR profile: {profile.trait}</title>',
             f'<line x1="{left}" y1="{top}" x2="{left}" y2="{top + plot_h}" stroke="black"/>',
             f'<text x="15" y="{top + plot_h / 2:.1f}" transform="rotate(-90 15 {top + plot_h / 2:.1f})" '
             f'text-anchor="middle">LR</text>']
    for k in range(5):
        v = ymax / 1.1 * k / 4
        parts.append(f'<text x="{left - 5}" y="{y(v) + 4:.1f}" text-anchor="end">{v:.1f}</text>')
    x0 = float(left)
    for c in chroms:
        span = c.end - c.start
        w = plot_w * span / total

        def x(pos: float, x0=x0, w=w, c=c, span=span) -> float:
            return x0 + (w * (pos - c.start) / span if span > 0 else 0.0)

        parts.append(f'<g class="chromosome" data-chrom="{c.name}">')
        parts.append(f'<line x1="{x0:.2f}" y1="{top + plot_h}" x2="{x0 + w:.2f}" y2="{top + plot_h}" stroke="black"/>')
        for m in c.markers:
            parts.append(f'<line class="marker" x1="{x(m.position):.2f}" y1="{top + plot_h}" '
                         f'x2="{x(m.position):.2f}" y2="{top + plot_h + 5}" stroke="black"/>')
        parts.append(f'<text x="{x0 + w / 2:.2f}" y="{height - 15}" text-anchor="middle">{c.name}</text>')
        pts = profile.chromosome_points(c.name)
        if pts:
            coords = " ".join(f"{x(p.position):.2f},{y(p.lr):.2f}" for p in pts)
            parts.append(f'<polyline class="lr" points="{coords}" fill="none" stroke="steelblue" stroke-width="1.5"/>')
        if c.name in per_chrom:
            yy = y(per_chrom[c.name])
            parts.append(f'<line class="threshold-chromosome" x1="{x0:.2f}" y1="{yy:.2f}" x2="{x0 + w:.2f}" '
                         f'y2="{yy:.2f}" stroke="gray" stroke-dasharray="6,4"/>')
        parts.append("</g>")
        x0 += w + gap
    if genome is not None:
        yy = y(genome)
        parts.append(f'<line class="threshold-genome" x1="{left}" y1="{yy:.2f}" x2="{width - right}" '
                     f'y2="{yy:.2f}" stroke="black"/>')
    parts.append("</svg>")
    return "\n".join(parts) + "\n"


# -- commands ----------------------------------------------------------------

def _require(cfg: RunConfig, *names: str) -> None:
    missing = [n for n in names if getattr(cfg, n) is None]
    if missing:
        raise InputError("missing required option(s): " + ", ".join("--" + n.replace("_", "-") for n in missing))


def _load(cfg: RunConfig):
    _require(cfg, "map", "geno", "pheno")
    dataset = read_inputs(cfg.map, cfg.geno, cfg.pheno)
    traits = dataset.traits
    trait = cfg.trait
    if trait is None:
        if len(traits) != 1:
            raise InputError(f"--trait is required when the phenotype file holds {len(traits)} traits")
        trait = traits[0]
    elif trait not in traits:
        raise InputError(f"trait {trait!r} not found (available: {', '.join(traits)})")
    return dataset, trait


def _read_json(path: str):
    with open(path) as fh:
        try:
            return json.load(fh)
        except json.JSONDecodeError as exc:
            raise InputError(f"{path}: invalid JSON ({exc})") from None


def _read_map(path: str) -> LinkageMap:
    with open(path) as fh:
        return parse_map(fh.read())


def cmd_simulate(cfg: RunConfig, out: Outputs) -> None:
    _require(cfg, "map", "truth")
    lmap = _read_map(cfg.map)
    truth = TruthSpec.model_validate(_read_json(cfg.truth))
    truth.validate_against(lmap)
    data = simulate_dataset(lmap, truth, cfg.seed, cfg.trait or "trait")
    out.add("map.tsv", lmap.to_tsv())
    out.add("genotypes.tsv", data.genotype_tsv())
    out.add("phenotypes.tsv", data.phenotype_tsv())


def cmd_scan(cfg: RunConfig, out: Outputs) -> None:
    dataset, trait = _load(cfg)
    genome, per = (None, {})
    if cfg.thresholds is not None:
        with open(cfg.thresholds) as fh:
            genome, per = parse_thresholds(fh.read())
    if cfg.mode == "multi" and genome is None:
        raise InputError("--mode multi requires --thresholds (asymptotic p-values do not apply)")
    scanner = Scanner(dataset, trait, cfg.scan_options())
    profile = scanner.scan()
    if not all(np.isfinite(p.lr) for p in profile.points):
        raise NumericalFailure("non-finite LR statistic in the profile")
    calls = call_peaks(profile, genome, per, cfg.alpha, scanner)
    out.add("profile.csv", profile_csv(profile))
    out.add("calls.csv", calls_csv(calls))
    out.add("profile.svg", profile_svg(profile, dataset.linkage_map, genome, per))


def cmd_permute(cfg: RunConfig, out: Outputs) -> None:
    dataset, trait = _load(cfg)
    scanner = Scanner(dataset, trait, cfg.scan_options())
    with warnings.catch_warnings():
        warnings.simplefilter("always")
        th = permutation_thresholds(scanner, cfg.n_perm, cfg.alpha, cfg.seed, cfg.workers)
    out.add("thresholds.tsv", thresholds_tsv(th.genome, th.per_chromosome, cfg.alpha, cfg.n_perm, cfg.seed))


def cmd_power(cfg: RunConfig, out: Outputs) -> None:
    _require(cfg, "map", "designs")
    lmap = _read_map(cfg.map)
    spec = _read_json(cfg.designs)
    if not isinstance(spec, dict) or "truth" not in spec or "designs" not in spec:
        raise InputError("designs file must be a JSON object with keys 'truth' and 'designs'")
    designs = []
    for i, d in enumerate(spec["designs"]):
        try:
            design = Design.model_validate(d)
        except ValidationError as exc:
            raise InputError(f"designs.{i}: {_validation_message(exc)}") from None
        designs.append(TruthSpec.model_validate({**spec["truth"], "design": design.model_dump()}))
    report = run_study(designs, lmap, cfg.n_rep, cfg.alpha, cfg.seed, cfg.mode, cfg.step,
                       n_null=cfg.n_null, workers=cfg.workers, tol=cfg.tol, max_iter=cfg.max_iter)
    out.add("power.csv", report.to_csv())


def cmd_test(cfg: RunConfig, out: Outputs) -> None:
    _require(cfg, "chrom", "pos")
    dataset, trait = _load(cfg)
    scanner = Scanner(dataset, trait, cfg.scan_options())
    try:
        dataset.linkage_map.locate(cfg.chrom, cfg.pos)
    except (KeyError, ValueError) as exc:
        raise InputError(f"--chrom/--pos: {exc}") from None
    battery = scanner.test_battery(cfg.chrom, cfg.pos, cfg.alpha, always_complete=True)
    rows = []
    for name in ("qtl", "imprinting", "maternal", "paternal", "maternal_effect"):
        if name not in battery:
            continue
        r = battery[name]
        rows.append((name, cfg.chrom, cfg.pos, r.statistic, r.p_value, r.null_kind,
                     r.df if r.df is not None else None, r.reliable))
    out.add("tests.csv", _csv(TEST_COLUMNS, rows))


COMMANDS = {"simulate": cmd_simulate, "scan": cmd_scan, "permute": cmd_permute, "power": cmd_power,
            "test": cmd_test}


def _validation_message(exc: ValidationError) -> str:
    msgs = []
    for e in exc.errors():
        loc = ".".join(str(p) for p in e["loc"])
        msg = e["msg"]
        msgs.append(f"{loc}: {msg}" if loc else msg)
    return "; ".join(msgs)


# -- argument parsing ----------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="endoqtl", description="Imprinted QTL mapping in triploid endosperm.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p: argparse.ArgumentParser, data: bool = True) -> None:
        p.add_argument("--map", help="linkage map TSV")
        if data:
            p.add_argument("--geno", help="genotype TSV")
            p.add_argument("--pheno", help="phenotype TSV")
            p.add_argument("--trait", help="trait to analyse (required if several)")
        p.add_argument("--out", default=".", help="output directory")
        p.add_argument("--seed", type=int, default=0)
        p.add_argument("--workers", type=int, default=1)
        p.add_argument("-v", "--verbose", action="store_true")

    def fitting(p: argparse.ArgumentParser) -> None:
        p.add_argument("--step", type=float, default=2.0, help="grid step in cM")
        p.add_argument("--tol", type=float, default=1e-6)
        p.add_argument("--max-iter", dest="max_iter", type=int, default=200)
        p.add_argument("--mode", choices=("single", "multi"), default="single")
        p.add_argument("--alpha", type=float, default=0.05)

    p = sub.add_parser("simulate", help="simulate a dataset from a truth file")
    common(p, data=False)
    p.add_argument("--truth", help="truth JSON")
    p.add_argument("--trait", help="trait name (default 'trait')")

    p = sub.add_parser("scan", help="genome scan with peak calls and SVG profile")
    common(p)
    fitting(p)
    p.add_argument("--thresholds", help="thresholds TSV from 'permute'")

    p = sub.add_parser("permute", help="permutation thresholds")
    common(p)
    fitting(p)
    p.add_argument("--n-perm", dest="n_perm", type=int, default=1000)

    p = sub.add_parser("power", help="Monte Carlo power study over designs")
    common(p, data=False)
    fitting(p)
    p.add_argument("--designs", help="designs JSON")
    p.add_argument("--n-rep", dest="n_rep", type=int, default=100)
    p.add_argument("--n-null", dest="n_null", type=int, default=None)

    p = sub.add_parser("test", help="hypothesis battery at one position")
    common(p)
    fitting(p)
    p.add_argument("--chrom")
    p.add_argument("--pos", type=float)
    return parser


def _check_config(cfg: RunConfig) -> None:
    if not cfg.step > 0:
        raise InputError("--step must be positive")
    if not cfg.tol > 0:
        raise InputError("--tol must be positive")
    if cfg.max_iter < 1:
        raise InputError("--max-iter must be at least 1")
    if not 0 < cfg.alpha < 1:
        raise InputError("--alpha must lie in (0, 1)")
    if cfg.n_perm < 1:
        raise InputError("--n-perm must be at least 1")
    if cfg.n_rep < 1:
        raise InputError("--n-rep must be at least 1")
    if cfg.workers < 1:
        raise InputError("--workers must be at least 1")


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        ns = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_INPUT
    logging.basicConfig(level=logging.DEBUG if getattr(ns, "verbose", False) else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    cfg = RunConfig.from_args(ns)
    out = Outputs(cfg.out)
    try:
        _check_config(cfg)
        COMMANDS[cfg.command](cfg, out)
        out.commit()
    except ValidationError as exc:
        print(f"error: {_validation_message(exc)}", file=sys.stderr)
        return EXIT_INPUT
    except (InputError, OSError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except (NumericalFailure, np.linalg.LinAlgError, FloatingPointError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
