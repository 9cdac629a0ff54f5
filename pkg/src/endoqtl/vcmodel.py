"""Variance-components model for endosperm traits and its REML fit.

The phenotypic covariance of family ``k`` is

    Sigma_k = Pi_m s_m + Pi_mf s_mf + Pi_f s_f + Phi s_g [+ Pi_L s_L + Pi_R s_R] + I s_e

and the fixed effects are the three maternal-class means. Families are
independent, so all matrix work is done per family; families of equal size are
stacked and processed as one batch.

The restricted log-likelihood is reported as

    -1/2 [ sum_k log|Sigma_k| + log|X' Sigma^-1 X| + y' P y ] - (N - p)/2 log(2 pi)

with ``p`` the number of fixed-effect columns.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, replace
from typing import Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np

from .genmap import CrossType, FamilyDataset
from .ibdcore import IbdMatrices

log = logging.getLogger(__name__)

LOG2PI = math.log(2 * math.pi)

# Model name -> variance terms (each a tuple of summed components), residual excluded.
MODEL_TERMS: Dict[str, Tuple[Tuple[str, ...], ...]] = {
    "full": (("m",), ("f",), ("mf",), ("g",)),
    "null": (("g",),),
    "equal": (("m", "f"), ("mf",), ("g",)),
    "no_maternal": (("f",), ("mf",), ("g",)),
    "no_paternal": (("m",), ("mf",), ("g",)),
    "residual": (),
}
BACKGROUND = ("L", "R")


class NotPositiveDefinite(np.linalg.LinAlgError):
    def __init__(self, family: object):
        super().__init__(f"covariance matrix of family {family} is not positive definite")
        self.family = family


@dataclass(frozen=True)
class VarianceComponents:
    sigma_m2: float = 0.0
    sigma_f2: float = 0.0
    sigma_mf2: float = 0.0
    sigma_g2: float = 0.0
    sigma_e2: float = 1.0
    sigma_L2: Optional[float] = None
    sigma_R2: Optional[float] = None

    def __post_init__(self):
        for name in ("sigma_m2", "sigma_f2", "sigma_mf2", "sigma_g2", "sigma_L2", "sigma_R2"):
            v = getattr(self, name)
            if v is not None and v < 0:
                raise ValueError(f"{name} must be non-negative, got {v}")
        if not self.sigma_e2 > 0:
            raise ValueError("sigma_e2 must be strictly positive")

    def scaled(self, c: float) -> "VarianceComponents":
        kw = {k: (None if v is None else v * c) for k, v in self.__dict__.items()}
        return VarianceComponents(**kw)


@dataclass(frozen=True)
class FixedEffects:
    mu1: float
    mu2: float
    mu3: float

    def as_array(self) -> np.ndarray:
        return np.array([self.mu1, self.mu2, self.mu3])


@dataclass
class ModelFit:
    """Result of one REML fit.

    ``fisher_info`` spans every variance parameter in ``param_names`` (boundary
    ones included); ``free`` marks those not pinned at zero at exit.
    """

    model: str
    param_names: Tuple[str, ...]
    theta: np.ndarray
    omega: VarianceComponents
    beta: FixedEffects
    reml_loglik: float
    ml_loglik: float
    fisher_info: np.ndarray
    score: np.ndarray
    free: np.ndarray
    score_norm_at_exit: float
    converged: bool
    iterations: int
    ridge: bool = False
    pooled_means: bool = False
    n_classes: int = 3
    history: List[float] = field(default_factory=list, repr=False)

    @property
    def boundary(self) -> Tuple[str, ...]:
        return tuple(n for n, t in zip(self.param_names, self.theta) if n != "e" and t <= 0)

    def param(self, name: str) -> float:
        return float(self.theta[self.param_names.index(name)])


def assemble_sigma(matrices: IbdMatrices, omega: VarianceComponents) -> np.ndarray:
    n = matrices.size
    parts = [
        (matrices.Pi_m, omega.sigma_m2),
        (matrices.Pi_mf, omega.sigma_mf2),
        (matrices.Pi_f, omega.sigma_f2),
        (matrices.Phi, omega.sigma_g2),
        (matrices.Pi_L, omega.sigma_L2),
        (matrices.Pi_R, omega.sigma_R2),
    ]
    sigma = np.eye(n) * omega.sigma_e2
    for mat, s in parts:
        if mat is None or not s:
            continue
        if mat.shape != (n, n):
            raise ValueError(f"IBD matrix of shape {mat.shape} does not match family size {n}")
        sigma = sigma + mat * s
    return sigma


@dataclass
class TraitData:
    """Phenotypes of one trait, laid out per family, with the maternal-class design.

    Individuals with a missing value are dropped; ``keep[k]`` indexes the
    retained rows of family ``k``.
    """

    family_ids: Tuple[str, ...]
    crosses: Tuple[CrossType, ...]
    y: Tuple[np.ndarray, ...]
    keep: Tuple[np.ndarray, ...]

    @classmethod
    def from_dataset(cls, dataset: FamilyDataset, trait: str) -> "TraitData":
        ids, crosses, ys, keeps = [], [], [], []
        for fam in dataset.families:
            if trait not in fam.phenotypes:
                continue
            v = fam.phenotypes[trait]
            keep = np.flatnonzero(~np.isnan(v))
            if keep.size == 0:
                continue
            ids.append(fam.family_id)
            crosses.append(fam.cross)
            ys.append(v[keep])
            keeps.append(keep)
        if not ids:
            raise ValueError(f"no observations for trait {trait!r}")
        return cls(tuple(ids), tuple(crosses), tuple(ys), tuple(keeps))

    @property
    def classes(self) -> np.ndarray:
        return np.array([c.maternal_class for c in self.crosses])

    @property
    def observed_classes(self) -> List[int]:
        return sorted(set(self.classes.tolist()))

    def design(self, pooled: bool = False) -> List[np.ndarray]:
        cols = [0] if pooled else self.observed_classes
        out = []
        for cls_, y in zip(self.classes, self.y):
            X = np.zeros((y.size, len(cols)))
            X[:, 0 if pooled else cols.index(cls_)] = 1.0
            out.append(X)
        return out

    def with_y(self, ys: Sequence[np.ndarray]) -> "TraitData":
        return replace(self, y=tuple(np.asarray(v, dtype=float) for v in ys))


@dataclass
class _Group:
    index: np.ndarray  # positions of the families in the dataset order
    y: np.ndarray  # (K, n)
    X: np.ndarray  # (K, n, p)
    V: Optional[np.ndarray] = None  # (C, K, n, n), last entry the identity


@dataclass
class _Eval:
    loglik: float
    ml_loglik: float
    beta: np.ndarray
    score: Optional[np.ndarray] = None
    info: Optional[np.ndarray] = None


def _group_by_size(n_per_family: Sequence[int]) -> List[np.ndarray]:
    sizes = np.asarray(n_per_family)
    return [np.flatnonzero(sizes == s) for s in sorted(set(sizes.tolist()))]


def _reml_core(groups: Sequence[_Group], sigmas: Sequence[np.ndarray], family_ids=None,
               derivs: bool = True) -> _Eval:
    p = groups[0].X.shape[2]
    A = np.zeros((p, p))
    b = np.zeros(p)
    logdet = 0.0
    n_total = 0
    cache = []
    for g, S in zip(groups, sigmas):
        try:
            L = np.linalg.cholesky(S)
        except np.linalg.LinAlgError:
            bad = _first_non_pd(S)
            fid = g.index[bad] if family_ids is None else family_ids[g.index[bad]]
            raise NotPositiveDefinite(fid) from None
        logdet += 2.0 * np.log(np.diagonal(L, axis1=1, axis2=2)).sum()
        W = np.linalg.inv(S)
        W = 0.5 * (W + np.swapaxes(W, 1, 2))
        Z = W @ g.X  # (K, n, p)
        A += np.einsum("kip,kiq->pq", g.X, Z)
        b += np.einsum("kip,ki->p", Z, g.y)
        n_total += g.y.size
        cache.append((W, Z))
    sign, logdet_A = np.linalg.slogdet(A)
    if sign <= 0:
        raise np.linalg.LinAlgError("fixed-effect information matrix is singular")
    Ainv = np.linalg.inv(A)
    beta = Ainv @ b
    yPy = 0.0
    Pys = []
    for g, (W, Z) in zip(groups, cache):
        r = g.y - g.X @ beta
        Py = np.einsum("kij,kj->ki", W, r)
        yPy += float((r * Py).sum())
        Pys.append(Py)
    loglik = -0.5 * (logdet + logdet_A + yPy) - 0.5 * (n_total - p) * LOG2PI
    ml = -0.5 * (logdet + yPy + n_total * LOG2PI)
    ev = _Eval(loglik, ml, beta)
    if not derivs:
        return ev

    C = groups[0].V.shape[0]
    trWV = np.zeros(C)
    quad = np.zeros(C)
    G = np.zeros((C, p, p))
    T1 = np.zeros((C, C))
    M = np.zeros((C, C, p, p))
    for g, (W, Z), Py in zip(groups, cache, Pys):
        V = g.V
        B = W[None] @ V  # (C, K, n, n)
        trWV += np.einsum("ckii->c", B)
        quad += np.einsum("ki,ckij,kj->c", Py, V, Py)
        U = V @ Z[None]  # (C, K, n, p)
        G += np.einsum("kip,ckiq->cpq", Z, U)
        Bf = B.reshape(C, -1)
        Bt = np.swapaxes(B, 2, 3).reshape(C, -1)
        T1 += Bf @ Bt.T
        H = B @ Z[None]  # W V Z
        M += np.einsum("akip,bkiq->abpq", U, H)
    trPV = trWV - np.einsum("pq,cqp->c", Ainv, G)
    ev.score = -0.5 * (trPV - quad)
    AG = np.einsum("pq,cqr->cpr", Ainv, G)
    cross = np.einsum("pq,abqp->ab", Ainv, M)
    last = np.einsum("apq,bqp->ab", AG, AG)
    info = 0.5 * (T1 - 2.0 * cross + last)
    ev.info = 0.5 * (info + info.T)
    return ev


def _first_non_pd(S: np.ndarray) -> int:
    for k in range(S.shape[0]):
        try:
            np.linalg.cholesky(S[k])
        except np.linalg.LinAlgError:
            return k
    return 0


def _stack_blocks(blocks: Sequence[np.ndarray], idx: np.ndarray) -> np.ndarray:
    return np.stack([np.asarray(blocks[i], dtype=float) for i in idx])


def _groups_from_blocks(y_blocks, X_blocks, component_blocks=None) -> List[_Group]:
    groups = []
    for idx in _group_by_size([len(y) for y in y_blocks]):
        V = None
        if component_blocks is not None:
            V = np.stack([_stack_blocks(comp, idx) for comp in component_blocks])
        groups.append(_Group(idx, _stack_blocks(y_blocks, idx), _stack_blocks(X_blocks, idx), V))
    return groups


def reml_loglik(y_blocks: Sequence[np.ndarray], X_blocks: Sequence[np.ndarray],
                sigma_blocks: Sequence[np.ndarray], family_ids: Optional[Sequence[str]] = None) -> float:
    """Restricted log-likelihood of independent families (see module docstring)."""
    groups = _groups_from_blocks(y_blocks, X_blocks)
    sigmas = [_stack_blocks(sigma_blocks, g.index) for g in groups]
    return _reml_core(groups, sigmas, family_ids, derivs=False).loglik


def score_and_information(y_blocks, X_blocks, sigma_blocks, component_blocks) -> Tuple[np.ndarray, np.ndarray]:
    """REML score and expected information for the given coefficient matrices.

    `component_blocks[a][k]` is the matrix multiplying variance parameter ``a``
    in family ``k``.
    """
    groups = _groups_from_blocks(y_blocks, X_blocks, component_blocks)
    sigmas = [_stack_blocks(sigma_blocks, g.index) for g in groups]
    ev = _reml_core(groups, sigmas)
    return ev.score, ev.info


class RemlProblem:
    """A trait, a design and a set of variance terms ready for fitting."""

    def __init__(self, groups: List[_Group], param_names: Sequence[str], family_ids: Sequence[str],
                 class_columns: Sequence[int], model: str = "custom", pooled: bool = False):
        self.groups = groups
        self.param_names = tuple(param_names)
        self.family_ids = tuple(family_ids)
        self.class_columns = tuple(class_columns)
        self.model = model
        self.pooled = pooled
        self.lower = np.zeros(len(self.param_names))
        self.n_total = sum(g.y.size for g in groups)

    @classmethod
    def build(cls, data: TraitData, comps: Mapping[str, Sequence[np.ndarray]] | Sequence[Mapping[str, np.ndarray]],
              model: str = "full", pooled_means: bool = False, background: bool = True) -> "RemlProblem":
        """Assemble a problem from per-family component matrices.

        `comps` is either a mapping component -> list of per-family matrices or
        a list (one per family) of mappings component -> matrix. Background
        terms ``L`` and ``R`` are added when present and `background` is set.
        """
        if not isinstance(comps, Mapping):
            keys = set(comps[0])
            comps = {c: [m[c] for m in comps] for c in keys}
        terms = list(MODEL_TERMS[model])
        if background:
            terms += [(b,) for b in BACKGROUND if b in comps and comps[b] is not None]
        names = ["=".join(t) for t in terms] + ["e"]
        Xs = data.design(pooled_means)
        groups = []
        for idx in _group_by_size([len(y) for y in data.y]):
            K, n = len(idx), len(data.y[idx[0]])
            V = np.empty((len(terms) + 1, K, n, n))
            for a, term in enumerate(terms):
                V[a] = sum(_stack_blocks(comps[c], idx) for c in term)
            V[-1] = np.eye(n)
            groups.append(_Group(idx, _stack_blocks(data.y, idx), _stack_blocks(Xs, idx), V))
        cols = [0] if pooled_means else data.observed_classes
        return cls(groups, names, data.family_ids, cols, model, pooled_means)

    @classmethod
    def from_groups(cls, data: TraitData, stacks: Sequence[Tuple[np.ndarray, Mapping[str, np.ndarray]]],
                    model: str = "full", pooled_means: bool = False, background: bool = True) -> "RemlProblem":
        """Assemble from pre-stacked groups: (family index array, comp -> (K, n, n))."""
        terms = list(MODEL_TERMS[model])
        first = stacks[0][1]
        if background:
            terms += [(b,) for b in BACKGROUND if first.get(b) is not None]
        names = ["=".join(t) for t in terms] + ["e"]
        Xs = data.design(pooled_means)
        groups = []
        for idx, comp in stacks:
            K, n = comp["g"].shape[:2]
            V = np.empty((len(terms) + 1, K, n, n))
            for a, term in enumerate(terms):
                V[a] = comp[term[0]] if len(term) == 1 else sum(comp[c] for c in term)
            V[-1] = np.eye(n)
            groups.append(_Group(idx, _stack_blocks(data.y, idx), _stack_blocks(Xs, idx), V))
        cols = [0] if pooled_means else data.observed_classes
        return cls(groups, names, data.family_ids, cols, model, pooled_means)

    def with_y(self, y_blocks: Sequence[np.ndarray]) -> "RemlProblem":
        groups = [replace(g, y=_stack_blocks(y_blocks, g.index)) for g in self.groups]
        out = RemlProblem(groups, self.param_names, self.family_ids, self.class_columns, self.model, self.pooled)
        return out

    def sigmas(self, theta: np.ndarray) -> List[np.ndarray]:
        return [np.tensordot(theta, g.V, axes=1) for g in self.groups]

    def evaluate(self, theta: np.ndarray, derivs: bool = True) -> _Eval:
        return _reml_core(self.groups, self.sigmas(theta), self.family_ids, derivs)

    def ols_residual_variance(self) -> float:
        y = np.concatenate([g.y.reshape(-1) for g in self.groups])
        X = np.concatenate([g.X.reshape(-1, g.X.shape[2]) for g in self.groups])
        coef, *_ = np.linalg.lstsq(X, y, rcond=None)
        r = y - X @ coef
        dof = max(len(y) - X.shape[1], 1)
        return float(r @ r / dof)

    def default_init(self) -> np.ndarray:
        v = self.ols_residual_variance()
        if not v > 0:
            v = 1.0
        k = len(self.param_names) - 1
        theta = np.full(len(self.param_names), v / (2 * max(k, 1)))
        theta[-1] = v / 2
        return theta

    def beta_effects(self, beta: np.ndarray) -> FixedEffects:
        mus = [math.nan] * 3
        if self.pooled:
            mus = [float(beta[0])] * 3
        else:
            for col, cls_ in enumerate(self.class_columns):
                mus[cls_] = float(beta[col])
        return FixedEffects(*mus)

    def omega(self, theta: np.ndarray) -> VarianceComponents:
        vals: Dict[str, Optional[float]] = {"m": 0.0, "f": 0.0, "mf": 0.0, "g": 0.0, "e": 0.0, "L": None, "R": None}
        for name, t in zip(self.param_names, theta):
            if name == "m=f":
                vals["m"] = vals["f"] = float(t)
            else:
                vals[name] = float(t)
        return VarianceComponents(vals["m"], vals["f"], vals["mf"], vals["g"], max(vals["e"], 1e-300),
                                  vals["L"], vals["R"])

    def fit(self, init: Optional[np.ndarray] = None, tol: float = 1e-6, max_iter: int = 200) -> ModelFit:
        return _fisher_scoring(self, init, tol, max_iter)


STALL_GAIN = 1e-9
STALL_STEP = 2.0 ** -5
STALL_ITERATIONS = 5


def _resid_floor(problem: RemlProblem, theta: np.ndarray) -> float:
    return 1e-10 * max(float(np.sum(theta)), 1e-12)


def _fisher_scoring(problem: RemlProblem, init, tol: float, max_iter: int) -> ModelFit:
    theta = problem.default_init() if init is None else np.array(init, dtype=float)
    theta = np.maximum(theta, 0.0)
    theta[-1] = max(theta[-1], _resid_floor(problem, theta))
    ev = None
    for _ in range(60):
        try:
            ev = problem.evaluate(theta)
            break
        except NotPositiveDefinite:
            theta[:-1] *= 0.5
    if ev is None:
        theta[:-1] = 0.0
        ev = problem.evaluate(theta)

    ridge = False
    converged = False
    history = [ev.loglik]
    it = 0
    stalled = 0
    while True:
        free = (theta[:-1] > 0) | (ev.score[:-1] > 0)
        free = np.append(free, True)
        snorm = float(np.linalg.norm(ev.score[free]))
        if snorm < tol:
            converged = True
            break
        if it >= max_iter or stalled >= STALL_ITERATIONS:
            break
        it += 1
        F = ev.info[np.ix_(free, free)]
        s = ev.score[free]
        try:
            if np.linalg.cond(F) > 1e12:
                raise np.linalg.LinAlgError
            step = np.linalg.solve(F, s)
        except np.linalg.LinAlgError:
            ridge = True
            lam = 1e-6 * max(float(np.trace(F)) / F.shape[0], 1e-12)
            step = np.linalg.solve(F + lam * np.eye(F.shape[0]), s)
        t = 1.0
        accepted = False
        for _ in range(50):
            cand = theta.copy()
            cand[free] += t * step
            cand[:-1] = np.maximum(cand[:-1], 0.0)
            cand[-1] = max(cand[-1], _resid_floor(problem, cand))
            try:
                # full steps are usually accepted, so only they pay for derivatives up front
                trial = problem.evaluate(cand, derivs=t == 1.0)
            except np.linalg.LinAlgError:  # indefinite or numerically singular trial point
                t *= 0.5
                continue
            if trial.loglik >= ev.loglik - 1e-10 * max(1.0, abs(ev.loglik)):
                accepted = True
                break
            t *= 0.5
        if not accepted:
            break
        ev_c = trial if trial.score is not None else problem.evaluate(cand)
        # Expected and observed curvature can differ enough for full steps to
        # overshoot (oscillation) or undershoot (slow linear convergence); move
        # to the secant root of the directional derivative when that happens.
        d = cand - theta
        g0 = float(ev.score @ d)
        g1 = float(ev_c.score @ d)
        if g0 > 0 and abs(g1) > 0.05 * g0 and g1 < g0:
            ts = min(g0 / (g0 - g1), 8.0)
            alt = theta + ts * d
            alt[:-1] = np.maximum(alt[:-1], 0.0)
            alt[-1] = max(alt[-1], _resid_floor(problem, alt))
            try:
                if problem.evaluate(alt, derivs=False).loglik >= ev_c.loglik:
                    cand, ev_c = alt, problem.evaluate(alt)
            except np.linalg.LinAlgError:
                pass
        moved = float(np.max(np.abs(cand - theta)))
        gain = ev_c.loglik - ev.loglik
        theta, ev = cand, ev_c
        history.append(ev.loglik)
        if moved == 0.0:
            break
        # creeping along the positive-definite boundary: stop, unconverged
        small = gain < STALL_GAIN * max(1.0, abs(ev.loglik)) and t < STALL_STEP
        stalled = stalled + 1 if small else 0

    free = np.append((theta[:-1] > 0) | (ev.score[:-1] > 0), True)
    return ModelFit(
        model=problem.model,
        param_names=problem.param_names,
        theta=theta,
        omega=problem.omega(theta),
        beta=problem.beta_effects(ev.beta),
        reml_loglik=float(ev.loglik),
        ml_loglik=float(ev.ml_loglik),
        fisher_info=ev.info,
        score=ev.score,
        free=free,
        score_norm_at_exit=float(np.linalg.norm(ev.score[free])),
        converged=converged,
        iterations=it,
        ridge=ridge,
        pooled_means=problem.pooled,
        n_classes=len(problem.class_columns),
        history=history,
    )


def fit_reml(data: TraitData, matrices_per_family: Sequence[IbdMatrices], mode: str = "full",
             pooled_means: bool = False, init: Optional[np.ndarray] = None,
             tol: float = 1e-6, max_iter: int = 200) -> ModelFit:
    """Fit one of the named models in `MODEL_TERMS` by REML Fisher scoring.

    Matrices must cover the retained individuals of each family, in the order
    of ``data.family_ids``.
    """
    comps = [_matrix_dict(m) for m in matrices_per_family]
    problem = RemlProblem.build(data, comps, model=mode, pooled_means=pooled_means)
    return problem.fit(init, tol, max_iter)


def _matrix_dict(m: IbdMatrices) -> Dict[str, np.ndarray]:
    out = {"m": m.Pi_m, "mf": m.Pi_mf, "f": m.Pi_f, "g": m.Phi}
    if m.Pi_L is not None:
        out["L"] = m.Pi_L
    if m.Pi_R is not None:
        out["R"] = m.Pi_R
    return out


def subset_matrices(m: IbdMatrices, keep: np.ndarray) -> IbdMatrices:
    ix = np.ix_(keep, keep)
    sub = lambda a: None if a is None else a[ix]
    return IbdMatrices(m.Pi_m[ix], m.Pi_mf[ix], m.Pi_f[ix], m.Phi[ix], sub(m.Pi_L), sub(m.Pi_R))
