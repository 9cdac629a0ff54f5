"""Imprinted QTL mapping in triploid endosperm of reciprocal backcross families."""

__version__ = "0.1.0"

from .genmap import CrossType, FamilyDataset, InputError, LinkageMap, parse_dataset, parse_map, read_inputs
from .ibdcore import IbdMatrices, family_matrices, pair_ibd, qtl_origin_prob
from .inference import MixtureWeights, mixture_pvalue, mixture_weights
from .scan import ScanOptions, ScanProfile, Scanner, call_peaks, multi_scan, single_scan
from .simgen import Design, QtlSpec, TruthSpec, run_study, simulate_dataset
from .vcmodel import ModelFit, VarianceComponents, assemble_sigma, fit_reml

__all__ = [
    "CrossType", "FamilyDataset", "InputError", "LinkageMap", "parse_dataset", "parse_map", "read_inputs",
    "IbdMatrices", "family_matrices", "pair_ibd", "qtl_origin_prob",
    "MixtureWeights", "mixture_pvalue", "mixture_weights",
    "ScanOptions", "ScanProfile", "Scanner", "call_peaks", "multi_scan", "single_scan",
    "Design", "QtlSpec", "TruthSpec", "run_study", "simulate_dataset",
    "ModelFit", "VarianceComponents", "assemble_sigma", "fit_reml",
]
