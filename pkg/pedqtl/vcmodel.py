"""
Multivariate variance component model

    vec(Y) ~ N(A C gamma, sum_k multiplier_k * Sigma_k (x) K_k)

fitted by maximum likelihood over the observed person-trait cells. The
covariance is block diagonal over pedigrees, so every likelihood, gradient
and GLS quantity is accumulated block by block from Cholesky factors.

Observation rows follow vec(Y) order (trait-major, then person) with
missing cells deleted; blocks hold row indices into that vector.
"""

import logging
from dataclasses import dataclass, field, replace
from typing import Collection, Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
import scipy.linalg as la
from scipy.optimize import minimize
from scipy.stats import chi2

from .errors import ConfigError, ModelError, NumericError
from .genio import AnalysisSet, TraitTable
from .helper.workers import map_ordered
from .kinship import (KernelKind, KernelMatrix, build_additive_kernel, build_household_kernel, delta7,
                      identity_kernel, linked_blocks, pedigree_kernel, x_linked_kinship)

logger = logging.getLogger(__name__)

INTERCEPT = "(Intercept)"
COMPONENT_MULTIPLIERS = {"additive": 2.0, "dominance": 1.0, "household": 1.0, "x_additive": 2.0, "environment": 1.0}
DEFAULT_COMPONENTS = ("additive", "environment")
FAILED_EVALUATION = 1e300
GLOBAL_BLOCK_LABEL = "all"


# ---------------------------------------------------------------------------
# Model description
# ---------------------------------------------------------------------------

def _row_partition(person: np.ndarray, n: int, person_blocks: Sequence[np.ndarray],
                   labels: Sequence[str]) -> Tuple[Tuple[np.ndarray, ...], Tuple[str, ...]]:
    """Observation rows per person block; blocks without observed cells are dropped"""
    block_of = np.full(n, -1, dtype=np.int64)
    for b, members in enumerate(person_blocks):
        block_of[np.asarray(members, dtype=np.int64)] = b
    if (block_of < 0).any():
        raise ValueError("Person blocks must cover every individual")
    row_block = block_of[person]
    labels = tuple(labels) if labels else tuple(str(b) for b in range(len(person_blocks)))
    kept = [b for b in range(len(person_blocks)) if (row_block == b).any()]
    return tuple(np.flatnonzero(row_block == b) for b in kept), tuple(labels[b] for b in kept)


@dataclass(frozen=True)
class ObservationIndex:
    """
    Maps observed (person, trait) cells to rows of the observation vector

    blocks partition the rows for the likelihood; groups partition them per
    pedigree for reporting and equal blocks unless pedigrees were joined.
    """
    n: int
    trait_count: int
    person: np.ndarray
    trait: np.ndarray
    blocks: Tuple[np.ndarray, ...]
    person_ids: Tuple[str, ...] = ()
    block_labels: Tuple[str, ...] = ()
    groups: Tuple[np.ndarray, ...] = ()
    group_labels: Tuple[str, ...] = ()

    @classmethod
    def from_mask(cls, observed: np.ndarray, person_blocks: Sequence[np.ndarray],
                  person_ids: Sequence[str] = (), block_labels: Sequence[str] = (),
                  person_groups: Optional[Sequence[np.ndarray]] = None,
                  group_labels: Sequence[str] = ()) -> "ObservationIndex":
        observed = np.asarray(observed, dtype=bool)
        n, trait_count = observed.shape
        trait, person = np.nonzero(observed.T)
        blocks, labels = _row_partition(person, n, person_blocks, block_labels)
        if person_groups is None:
            groups, glabels = blocks, labels
        else:
            groups, glabels = _row_partition(person, n, person_groups, group_labels)
        return cls(n=n, trait_count=trait_count, person=person, trait=trait, blocks=blocks,
                   person_ids=tuple(person_ids), block_labels=labels, groups=groups, group_labels=glabels)

    @property
    def size(self) -> int:
        return len(self.person)

    def vec(self, values: np.ndarray) -> np.ndarray:
        """Observed cells of an n x T matrix in row order"""
        return np.asarray(values, dtype=np.float64)[self.person, self.trait]

    def trait_columns(self, x: np.ndarray) -> np.ndarray:
        """
        Design for per-person values entering every trait separately

        Args:
            x: n-vector (or n x k matrix) of per-person values

        Returns:
            N_obs x T (or N_obs x T x k) with x[person] in the column of the row's trait
        """
        x = np.asarray(x, dtype=np.float64)
        values = x[self.person]
        if x.ndim == 1:
            out = np.zeros((self.size, self.trait_count))
            out[np.arange(self.size), self.trait] = values
            return out
        out = np.zeros((self.size, self.trait_count, x.shape[1]))
        out[np.arange(self.size), self.trait, :] = values
        return out


@dataclass(frozen=True, eq=False)
class MeanModel:
    """nu = A beta with beta = C gamma"""
    design: np.ndarray
    constraint: np.ndarray
    coef_names: Tuple[str, ...] = ()
    param_names: Tuple[str, ...] = ()
    coef: Optional[np.ndarray] = None

    @property
    def reduced_design(self) -> np.ndarray:
        return self.design @ self.constraint

    def augment(self, columns: np.ndarray, names: Sequence[str]) -> "MeanModel":
        """Append unconstrained columns (e.g. SNP allele counts per trait)"""
        columns = np.asarray(columns, dtype=np.float64)
        k = columns.shape[1]
        return MeanModel(
            design=np.hstack([self.design, columns]),
            constraint=la.block_diag(self.constraint, np.eye(k)),
            coef_names=tuple(self.coef_names) + tuple(names),
            param_names=tuple(self.param_names) + tuple(names),
        )


@dataclass(frozen=True, eq=False)
class VarianceComponent:
    label: str
    sigma: np.ndarray
    kernel: KernelMatrix
    multiplier: float = 1.0


@dataclass(frozen=True, eq=False)
class CovarianceModel:
    components: Tuple[VarianceComponent, ...]

    def __post_init__(self):
        if not any(c.kernel.kind == KernelKind.IDENTITY for c in self.components):
            raise ModelError("The covariance model needs a component with the identity kernel")

    @property
    def sigmas(self) -> List[np.ndarray]:
        return [c.sigma for c in self.components]

    @property
    def labels(self) -> List[str]:
        return [c.label for c in self.components]

    def with_sigmas(self, sigmas: Sequence[np.ndarray]) -> "CovarianceModel":
        return CovarianceModel(tuple(replace(c, sigma=np.asarray(s)) for c, s in zip(self.components, sigmas)))


@dataclass(frozen=True)
class CovariateTerm:
    """A mean-model term; columns name the covariate column used for each trait"""
    name: str
    columns: Tuple[str, ...]


@dataclass(frozen=True)
class FitOptions:
    tol: float = 1e-8
    max_iter: int = 1000
    grad_tol: float = 1e-5
    threads: int = 1
    fast_path: bool = True


@dataclass(frozen=True, eq=False)
class ModelFrame:
    """Everything a likelihood evaluation needs; rotation is set on the eigen fast path"""
    y: np.ndarray
    mean: MeanModel
    cov: CovarianceModel
    idx: ObservationIndex
    rotation: Optional[np.ndarray] = None

    def rotate_persons(self, x: np.ndarray) -> np.ndarray:
        """Apply the frame's person-space rotation to per-person values"""
        return x if self.rotation is None else self.rotation.T @ x


@dataclass(frozen=True, eq=False)
class FitResult:
    loglik: float
    beta_hat: np.ndarray
    beta_se: np.ndarray
    gamma_hat: np.ndarray
    gamma_cov: np.ndarray
    sigma_hats: Tuple[Tuple[str, np.ndarray], ...]
    converged: bool
    iterations: int
    residual: np.ndarray
    history: Tuple[float, ...]
    gradient_max: float
    frame: ModelFrame
    work_frame: ModelFrame
    coef_names: Tuple[str, ...] = ()
    param_names: Tuple[str, ...] = ()

    @property
    def gamma_se(self) -> np.ndarray:
        return np.sqrt(np.clip(np.diag(self.gamma_cov), 0.0, None))

    def sigma(self, label: str) -> np.ndarray:
        for name, value in self.sigma_hats:
            if name == label:
                return value
        raise KeyError(label)


# ---------------------------------------------------------------------------
# Mean model construction
# ---------------------------------------------------------------------------

def apply_time_constraint(terms: Sequence[str], trait_count: int,
                          constrained: Collection[str] = ()) -> np.ndarray:
    """
    Constraint matrix tying the per-trait coefficients of flagged terms

    Coefficients are term-major: column j * T + t of the design is term j for trait t.

    Returns:
        p x r matrix C with beta = C gamma
    """
    unknown = set(constrained) - set(terms)
    if unknown:
        raise ModelError(f"Cannot constrain unknown terms: {', '.join(sorted(unknown))}")
    p = len(terms) * trait_count
    columns = []
    for j, term in enumerate(terms):
        if term in constrained:
            column = np.zeros(p)
            column[j * trait_count:(j + 1) * trait_count] = 1.0
            columns.append(column)
        else:
            for t in range(trait_count):
                column = np.zeros(p)
                column[j * trait_count + t] = 1.0
                columns.append(column)
    return np.column_stack(columns) if columns else np.zeros((p, 0))


def parse_covariate_terms(specs: Sequence[str], trait_count: int) -> List[CovariateTerm]:
    """'sex' shares one column across traits; 'age=age_1|age_2' binds one column per trait"""
    terms = []
    for spec in specs:
        if "=" in spec:
            name, columns = (s.strip() for s in spec.split("=", 1))
            per_trait = tuple(c.strip() for c in columns.split("|"))
            if len(per_trait) != trait_count:
                raise ModelError(f"Covariate {name} lists {len(per_trait)} columns for {trait_count} traits")
        else:
            name = spec.strip()
            per_trait = (name,) * trait_count
        terms.append(CovariateTerm(name=name, columns=per_trait))
    return terms


def covariate_columns(terms: Sequence[CovariateTerm]) -> List[str]:
    """Distinct phenotype-file columns the terms read, in first-use order"""
    seen: Dict[str, None] = {}
    for term in terms:
        for column in term.columns:
            seen.setdefault(column, None)
    return list(seen)


def build_mean_model(traits: TraitTable, idx: ObservationIndex, terms: Sequence[CovariateTerm] = (),
                     interactions: Sequence[Tuple[str, str]] = (),
                     constrain: Collection[str] = ()) -> MeanModel:
    """
    Per-trait intercepts plus per-trait covariate and interaction columns

    Args:
        traits: Trait table aligned with idx
        idx: Observation index
        terms: Covariate terms
        interactions: Pairs of term names multiplied per trait
        constrain: Term names whose T coefficients are tied
    """
    T = idx.trait_count
    by_name = {term.name: term for term in terms}
    column_of = {name: i for i, name in enumerate(traits.covariate_names)}

    def term_values(term: CovariateTerm) -> np.ndarray:
        return np.column_stack([traits.covariates[:, column_of[c]] for c in term.columns])

    values = [np.ones((idx.n, T))]
    names = [INTERCEPT]
    for term in terms:
        values.append(term_values(term))
        names.append(term.name)
    for left, right in interactions:
        if left not in by_name or right not in by_name:
            raise ModelError(f"Interaction {left}*{right} refers to a covariate that is not in the model")
        values.append(term_values(by_name[left]) * term_values(by_name[right]))
        names.append(f"{left}*{right}")

    design = np.zeros((idx.size, len(names) * T))
    rows = np.arange(idx.size)
    for j, v in enumerate(values):
        design[rows, j * T + idx.trait] = v[idx.person, idx.trait]

    trait_names = traits.trait_names
    coef_names = tuple(f"{trait_names[t]}:{name}" for name in names for t in range(T))
    param_names = tuple(
        p for name in names
        for p in ([name] if name in constrain else [f"{trait_names[t]}:{name}" for t in range(T)])
    )
    return MeanModel(
        design=design,
        constraint=apply_time_constraint(names, T, constrain),
        coef_names=coef_names,
        param_names=param_names,
    )


def initial_sigmas(values: np.ndarray, labels: Sequence[str]) -> List[np.ndarray]:
    """Scale-aware positive definite starting values from the sample trait covariance"""
    frame = pd.DataFrame(values)
    sample = frame.cov(min_periods=2).to_numpy()
    variances = frame.var().to_numpy()
    fallback = np.where(np.isfinite(variances) & (variances > 0), variances, 1.0)
    bad = ~np.isfinite(sample)
    sample[bad] = 0.0
    diag = np.diag(sample).copy()
    diag[~(diag > 0)] = fallback[~(diag > 0)]
    np.fill_diagonal(sample, diag)
    ridge = 1e-6 * float(np.mean(diag))
    for _ in range(20):
        try:
            la.cholesky(sample, lower=True)
            break
        except la.LinAlgError:
            sample = sample + ridge * np.eye(len(diag))
            ridge *= 10.0
    starts = []
    for label in labels:
        if label == "environment":
            starts.append(sample / 2.0)
        elif label == "additive":
            starts.append(sample / 4.0)
        else:
            starts.append(0.01 * np.eye(len(diag)))
    return starts


# ---------------------------------------------------------------------------
# Likelihood
# ---------------------------------------------------------------------------

@dataclass
class _Block:
    label: str
    rows: np.ndarray
    trait: np.ndarray
    onehot: np.ndarray
    kernels: List[np.ndarray]


@dataclass
class Evaluation:
    loglik: float
    gamma: np.ndarray
    beta: np.ndarray
    gamma_cov: np.ndarray
    residual: np.ndarray
    gradient: Optional[np.ndarray] = None
    factors: List[tuple] = field(default_factory=list)


def _lower_indices(T: int):
    return np.tril_indices(T)


def pack_factors(sigmas: Sequence[np.ndarray]) -> np.ndarray:
    """Stack the lower-triangular Cholesky entries of each Sigma_k"""
    parts = []
    for sigma in sigmas:
        T = sigma.shape[0]
        try:
            factor = la.cholesky(sigma, lower=True)
        except la.LinAlgError:
            eigenvalues, vectors = la.eigh(sigma)
            factor = la.cholesky((vectors * np.clip(eigenvalues, 1e-10, None)) @ vectors.T, lower=True)
        parts.append(factor[_lower_indices(T)])
    return np.concatenate(parts)


def unpack_factors(theta: np.ndarray, count: int, T: int) -> List[np.ndarray]:
    size = T * (T + 1) // 2
    factors = []
    for k in range(count):
        factor = np.zeros((T, T))
        factor[_lower_indices(T)] = theta[k * size:(k + 1) * size]
        factors.append(factor)
    return factors


class LikelihoodEvaluator:
    """Block-wise loglikelihood, GLS and analytic gradient for one model frame"""

    def __init__(self, frame: ModelFrame, threads: int = 1):
        self.frame = frame
        self.threads = threads
        self.reduced = frame.mean.reduced_design
        self.multipliers = np.array([c.multiplier for c in frame.cov.components])
        idx = frame.idx
        self.blocks: List[_Block] = [
            self.make_block(rows, idx.block_labels[b] if b < len(idx.block_labels) else str(b))
            for b, rows in enumerate(idx.blocks)
        ]

    def make_block(self, rows: np.ndarray, label: str) -> _Block:
        """Kernel and trait pieces for any subset of observation rows"""
        idx = self.frame.idx
        persons = idx.person[rows]
        trait = idx.trait[rows]
        onehot = np.zeros((len(rows), idx.trait_count))
        onehot[np.arange(len(rows)), trait] = 1.0
        kernels = [c.kernel.values[np.ix_(persons, persons)] for c in self.frame.cov.components]
        return _Block(label, rows, trait, onehot, kernels)

    def block_covariance(self, block: _Block, sigmas: Sequence[np.ndarray]) -> np.ndarray:
        cov = np.zeros((len(block.rows), len(block.rows)))
        for mult, sigma, kernel in zip(self.multipliers, sigmas, block.kernels):
            cov += mult * sigma[np.ix_(block.trait, block.trait)] * kernel
        return cov

    def _factor(self, block: _Block, sigmas: Sequence[np.ndarray]):
        cov = self.block_covariance(block, sigmas)
        try:
            return la.cho_factor(cov, lower=True, check_finite=False)
        except la.LinAlgError as e:
            raise NumericError(f"Covariance of block {block.label} is not positive definite") from e

    def evaluate(self, sigmas: Sequence[np.ndarray], beta: Optional[np.ndarray] = None,
                 gradient: bool = False) -> Evaluation:
        """
        Loglikelihood (constant -N/2 ln 2pi excluded) at the given Sigma_k

        Args:
            sigmas: One T x T matrix per component
            beta: Mean coefficients; the GLS estimate when None
            gradient: Also return dL/dSigma_k for every component
        """
        y, A, reduced = self.frame.y, self.frame.mean.design, self.reduced
        r = reduced.shape[1]

        def first_pass(block: _Block):
            factor = self._factor(block, sigmas)
            Xb = reduced[block.rows]
            WX = la.cho_solve(factor, Xb, check_finite=False)
            Wy = la.cho_solve(factor, y[block.rows], check_finite=False)
            return factor, Xb.T @ WX, Xb.T @ Wy

        parts = map_ordered(first_pass, self.blocks, threads=self.threads)
        factors = [p[0] for p in parts]
        info = np.zeros((r, r))
        score = np.zeros(r)
        for _, XtWX, XtWy in parts:
            info += XtWX
            score += XtWy
        try:
            gamma_cov = la.pinvh(info) if r else np.zeros((0, 0))
        except la.LinAlgError as e:
            raise ModelError("GLS information matrix is singular") from e

        if beta is None:
            gamma = gamma_cov @ score
            beta = self.frame.mean.constraint @ gamma
        else:
            beta = np.asarray(beta, dtype=np.float64)
            gamma = la.lstsq(self.frame.mean.constraint, beta)[0] if r else np.zeros(0)
        residual = y - A @ beta

        def second_pass(item):
            block, factor = item
            res = residual[block.rows]
            alpha = la.cho_solve(factor, res, check_finite=False)
            logdet = 2.0 * np.sum(np.log(np.diag(factor[0])))
            quad = float(res @ alpha)
            grads = None
            if gradient:
                inverse = la.cho_solve(factor, np.eye(len(block.rows)), check_finite=False)
                M = np.outer(alpha, alpha) - inverse
                grads = [0.5 * mult * (block.onehot.T @ (M * kernel) @ block.onehot)
                         for mult, kernel in zip(self.multipliers, block.kernels)]
            return logdet, quad, grads

        results = map_ordered(second_pass, list(zip(self.blocks, factors)), threads=self.threads)
        loglik = 0.0
        grads = [np.zeros_like(s) for s in sigmas] if gradient else None
        for logdet, quad, block_grads in results:
            loglik += -0.5 * logdet - 0.5 * quad
            if gradient:
                for k, g in enumerate(block_grads):
                    grads[k] += g
        return Evaluation(loglik=loglik, gamma=gamma, beta=beta, gamma_cov=gamma_cov,
                          residual=residual, gradient=grads, factors=factors)

    def factor_gradient(self, theta: np.ndarray, beta: Optional[np.ndarray] = None) -> Tuple[float, np.ndarray, Evaluation]:
        """Loglikelihood and its gradient with respect to the packed Cholesky factors"""
        count = len(self.frame.cov.components)
        T = self.frame.idx.trait_count
        factors = unpack_factors(theta, count, T)
        sigmas = [L @ L.T for L in factors]
        ev = self.evaluate(sigmas, beta=beta, gradient=True)
        lower = _lower_indices(T)
        grad = np.concatenate([(2.0 * G @ L)[lower] for G, L in zip(ev.gradient, factors)])
        return ev.loglik, grad, ev


def build_observed_covariance(cov: CovarianceModel, idx: ObservationIndex) -> List[np.ndarray]:
    """
    Per-block covariance of the observed cells

    Raises:
        NumericError: naming the first block that is not positive definite
    """
    frame = ModelFrame(y=np.zeros(idx.size), mean=MeanModel(np.zeros((idx.size, 0)), np.zeros((0, 0))),
                       cov=cov, idx=idx)
    evaluator = LikelihoodEvaluator(frame)
    matrices = []
    for block in evaluator.blocks:
        matrix = evaluator.block_covariance(block, cov.sigmas)
        try:
            la.cholesky(matrix, lower=True)
        except la.LinAlgError as e:
            raise NumericError(f"Covariance of block {block.label} is not positive definite") from e
        matrices.append(matrix)
    return matrices


def loglikelihood(y_obs: np.ndarray, mean: MeanModel, cov: CovarianceModel, idx: ObservationIndex,
                  beta: Optional[np.ndarray] = None) -> float:
    """
    L = -1/2 ln det Sigma - 1/2 r' Sigma^-1 r summed over blocks

    beta defaults to mean.coef, then to the GLS estimate.
    """
    beta = beta if beta is not None else mean.coef
    frame = ModelFrame(y=np.asarray(y_obs, dtype=np.float64), mean=mean, cov=cov, idx=idx)
    return LikelihoodEvaluator(frame).evaluate(cov.sigmas, beta=beta).loglik


# ---------------------------------------------------------------------------
# Fitting
# ---------------------------------------------------------------------------

def _eigen_frame(frame: ModelFrame) -> Optional[ModelFrame]:
    """
    Rotate a single-block, complete-data {K, I} model by the eigenvectors of K

    After rotation each eigen-coordinate is its own block with covariance
    m d_i Sigma_K + Sigma_I.
    """
    idx, cov = frame.idx, frame.cov
    if len(idx.blocks) != 1 or idx.size != idx.n * idx.trait_count or len(cov.components) != 2:
        return None
    kinds = [c.kernel.kind == KernelKind.IDENTITY for c in cov.components]
    if sum(kinds) != 1:
        return None
    structured = cov.components[kinds.index(False)]
    eigenvalues, vectors = la.eigh(structured.kernel.values)
    eigenvalues = np.clip(eigenvalues, 0.0, None)

    n, T = idx.n, idx.trait_count
    # complete data in vec order: row t * n + i
    def rotate_rows(values: np.ndarray) -> np.ndarray:
        shaped = values.reshape(T, n, -1)
        return np.einsum('ij,tjk->tik', vectors.T, shaped).reshape(values.shape)

    y = rotate_rows(frame.y.reshape(-1, 1)).ravel()
    design = rotate_rows(frame.mean.design)
    components = []
    for c in cov.components:
        if c.kernel.kind == KernelKind.IDENTITY:
            components.append(c)
        else:
            components.append(replace(c, kernel=KernelMatrix(np.diag(eigenvalues), c.kernel.kind)))
    rotated_idx = ObservationIndex.from_mask(
        np.ones((n, T), dtype=bool), [np.array([i]) for i in range(n)],
        block_labels=[f"eigen{i}" for i in range(n)],
    )
    return ModelFrame(y=y, mean=replace(frame.mean, design=design), cov=CovarianceModel(tuple(components)),
                      idx=rotated_idx, rotation=vectors)


def _check_design(mean: MeanModel) -> None:
    reduced = mean.reduced_design
    if reduced.shape[1] and np.linalg.matrix_rank(reduced) < reduced.shape[1]:
        raise ModelError(
            f"Reduced design has rank {np.linalg.matrix_rank(reduced)} < {reduced.shape[1]} columns; "
            "drop collinear covariates or constraints"
        )


def fit_frame(frame: ModelFrame, work: ModelFrame, start: Sequence[np.ndarray],
              opts: FitOptions = FitOptions()) -> FitResult:
    """Maximize the profile loglikelihood of work over the Cholesky factors of each Sigma_k"""
    _check_design(work.mean)
    evaluator = LikelihoodEvaluator(work, threads=opts.threads)
    count = len(work.cov.components)
    T = work.idx.trait_count
    theta0 = pack_factors(start)

    cache: Dict[bytes, float] = {}
    history: List[float] = []

    def objective(theta: np.ndarray):
        try:
            value, grad, _ = evaluator.factor_gradient(theta)
        except (NumericError, ModelError):
            return FAILED_EVALUATION, np.zeros_like(theta)
        cache[theta.tobytes()] = value
        return -value, -grad

    def record(theta: np.ndarray):
        value = cache.get(theta.tobytes())
        if value is None:
            value = evaluator.factor_gradient(theta)[0]
        history.append(value)
        logger.debug(f"iteration {len(history) - 1}: loglikelihood {value:.10f}")

    record(theta0)
    result = minimize(
        objective, theta0, jac=True, method="L-BFGS-B", callback=record,
        options={'maxiter': opts.max_iter, 'ftol': opts.tol, 'gtol': opts.grad_tol, 'maxcor': 20},
    )
    loglik, grad, ev = evaluator.factor_gradient(result.x)
    factors = unpack_factors(result.x, count, T)
    sigmas = [L @ L.T for L in factors]
    if not history or history[-1] != loglik:
        history.append(loglik)

    converged = bool(result.success)
    if not converged:
        logger.warning(f"Variance component fit did not converge after {result.nit} iterations: {result.message}")

    beta = ev.beta
    beta_cov = work.mean.constraint @ ev.gamma_cov @ work.mean.constraint.T
    residual = frame.y - frame.mean.design @ beta
    fitted_cov = frame.cov.with_sigmas(sigmas)
    return FitResult(
        loglik=float(loglik),
        beta_hat=beta,
        beta_se=np.sqrt(np.clip(np.diag(beta_cov), 0.0, None)),
        gamma_hat=ev.gamma,
        gamma_cov=ev.gamma_cov,
        sigma_hats=tuple((c.label, s) for c, s in zip(frame.cov.components, sigmas)),
        converged=converged,
        iterations=int(result.nit),
        residual=residual,
        history=tuple(history),
        gradient_max=float(np.max(np.abs(grad))) if len(grad) else 0.0,
        frame=replace(frame, cov=fitted_cov),
        work_frame=replace(work, cov=work.cov.with_sigmas(sigmas)),
        coef_names=frame.mean.coef_names,
        param_names=frame.mean.param_names,
    )


def fit_null(y: np.ndarray, mean: MeanModel, cov: CovarianceModel, idx: ObservationIndex,
             opts: FitOptions = FitOptions()) -> FitResult:
    """
    Maximum likelihood fit of the model without SNP effects

    The starting Sigma_k are taken from cov. Each evaluation performs the GLS
    update of gamma, so the quasi-Newton search runs on the profile
    loglikelihood of the variance parameters.

    Raises:
        ModelError: when A C is rank deficient
    """
    _check_design(mean)
    frame = ModelFrame(y=np.asarray(y, dtype=np.float64), mean=mean, cov=cov, idx=idx)
    work = _eigen_frame(frame) if opts.fast_path else None
    if work is not None:
        logger.info("Using the eigen-rotation fast path (single block, complete data, two components)")
    else:
        work = frame
    result = fit_frame(frame, work, cov.sigmas, opts)
    logger.info(
        f"Null model loglikelihood {result.loglik:.4f} after {result.iterations} iterations "
        f"(converged: {result.converged})"
    )
    return result


def refit_with_columns(nullfit: FitResult, x: np.ndarray, names: Sequence[str],
                       opts: FitOptions = FitOptions()) -> FitResult:
    """Refit the null model with per-trait columns of per-person values x added, warm started"""
    frame, work = nullfit.frame, nullfit.work_frame
    original = frame.idx.trait_columns(x)
    alt_frame = replace(frame, mean=frame.mean.augment(original, names))
    if work.rotation is None:
        alt_work = replace(alt_frame, cov=work.cov)
    else:
        rotated = work.idx.trait_columns(work.rotate_persons(x))
        alt_work = replace(work, mean=work.mean.augment(rotated, names))
    return fit_frame(alt_frame, alt_work, [s for _, s in nullfit.sigma_hats], opts)


# ---------------------------------------------------------------------------
# Diagnostics and output
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class OutlierRecord:
    kind: str
    label: str
    statistic: float
    df: int
    p_value: float


def pedigree_outlier_report(fit: FitResult) -> List[OutlierRecord]:
    """
    Mahalanobis residual statistics per pedigree and per individual

    Pedigrees that share a likelihood block (a household spanning pedigrees,
    a global SNP kernel) are still reported one by one from their marginal
    covariance. Each statistic is compared with a chi-square on the number
    of observed cells; records are sorted by ascending p-value (pedigrees and
    individuals interleaved by p-value, ties keep pedigree first).
    """
    frame = fit.frame
    evaluator = LikelihoodEvaluator(frame)
    sigmas = frame.cov.sigmas
    idx = frame.idx
    groups = idx.groups or idx.blocks
    labels = idx.group_labels or idx.block_labels
    records: List[OutlierRecord] = []
    for g, rows in enumerate(groups):
        block = evaluator.make_block(rows, labels[g] if g < len(labels) else str(g))
        cov = evaluator.block_covariance(block, sigmas)
        res = fit.residual[block.rows]
        factor = la.cho_factor(cov, lower=True)
        d = float(res @ la.cho_solve(factor, res))
        records.append(OutlierRecord("pedigree", block.label, d, len(res), float(chi2.sf(d, len(res)))))
        persons = idx.person[block.rows]
        for person in np.unique(persons):
            local = np.flatnonzero(persons == person)
            sub = cov[np.ix_(local, local)]
            r = res[local]
            d_i = float(r @ la.solve(sub, r, assume_a='pos'))
            label = idx.person_ids[person] if idx.person_ids else str(person)
            records.append(OutlierRecord("individual", label, d_i, len(local), float(chi2.sf(d_i, len(local)))))
    order = sorted(range(len(records)), key=lambda i: (records[i].p_value, records[i].kind != "pedigree", i))
    return [records[i] for i in order]


def write_outlier_report(records: Sequence[OutlierRecord], path: str) -> None:
    frame = pd.DataFrame(
        [(r.kind, r.label, r.statistic, r.df, r.p_value) for r in records],
        columns=["kind", "label", "statistic", "df", "p_value"],
    )
    frame.to_csv(path, sep="\t", index=False, float_format="%.6g")


def null_summary_table(fit: FitResult) -> pd.DataFrame:
    return pd.DataFrame({
        'coefficient': list(fit.param_names) or [f"gamma{i}" for i in range(len(fit.gamma_hat))],
        'estimate': fit.gamma_hat,
        'std_error': fit.gamma_se,
    })


def write_null_summary(fit: FitResult, path: str, trait_names: Sequence[str] = ()) -> None:
    """Coefficient table, fitted Sigma_k per component and the loglikelihood"""
    table = null_summary_table(fit)
    lines = [
        f"loglikelihood\t{fit.loglik:.6f}",
        f"converged\t{'yes' if fit.converged else 'no'}",
        f"iterations\t{fit.iterations}",
        "",
        table.to_string(index=False, float_format=lambda v: f"{v:.6g}"),
        "",
    ]
    components = {c.label: c for c in fit.frame.cov.components}
    for label, sigma in fit.sigma_hats:
        component = components[label]
        names = list(trait_names) or [f"trait{t + 1}" for t in range(sigma.shape[0])]
        lines.append(f"Sigma[{label}] (multiplier {component.multiplier:g}, kernel {component.kernel.kind.value})")
        lines.append(pd.DataFrame(sigma, index=names, columns=names).to_string(float_format=lambda v: f"{v:.6g}"))
        lines.append("")
    with open(path, 'w') as f:
        f.write("\n".join(lines))
    logger.info(f"Wrote null model summary to {path}")


# ---------------------------------------------------------------------------
# Model assembly
# ---------------------------------------------------------------------------

def _is_global(kernels: Dict[str, KernelMatrix], n: int) -> bool:
    return any(
        k.kind != KernelKind.IDENTITY and k.block_structure is not None
        and len(k.block_structure) == 1 and len(k.block_structure[0]) == n
        for k in kernels.values()
    )


def observation_index(analysis: AnalysisSet, kernels: Optional[Dict[str, KernelMatrix]] = None) -> ObservationIndex:
    """
    Observed cells of the analysis set

    Likelihood blocks are the pedigrees, joined where a kernel links members
    of different pedigrees (a shared household), or a single global block
    under a SNP-based global kernel. Pedigrees remain the reporting groups.
    """
    pedigree_blocks = analysis.blocks()
    pedigree_labels = [analysis.pedigrees[analysis.members[b[0], 0]].pedigree_id for b in pedigree_blocks]
    if kernels and _is_global(kernels, analysis.n) and len(pedigree_blocks) > 1:
        blocks = [np.arange(analysis.n)]
        labels = [GLOBAL_BLOCK_LABEL]
    else:
        structured = [k.values for k in (kernels or {}).values() if k.kind != KernelKind.IDENTITY]
        joined = linked_blocks(pedigree_blocks, structured)
        blocks = [np.sort(np.concatenate([pedigree_blocks[b] for b in group])) for group in joined]
        labels = ["+".join(pedigree_labels[b] for b in group) for group in joined]
    return ObservationIndex.from_mask(analysis.traits.value_mask, blocks, analysis.person_ids, labels,
                                      person_groups=pedigree_blocks, group_labels=pedigree_labels)


def build_kernels(analysis: AnalysisSet, components: Sequence[str] = DEFAULT_COMPONENTS,
                  kinship_mode: str = "theoretical", block_size: int = 4096,
                  threads: int = 1) -> Dict[str, KernelMatrix]:
    """One structure kernel per requested component, aligned with the analysis set"""
    kernels: Dict[str, KernelMatrix] = {}
    for label in components:
        if label == "additive":
            kernels[label] = build_additive_kernel(kinship_mode, analysis, block_size=block_size, threads=threads)
        elif label == "dominance":
            kernels[label] = pedigree_kernel(analysis, delta7)
        elif label == "household":
            kernels[label] = build_household_kernel(analysis)
        elif label == "x_additive":
            kernels[label] = pedigree_kernel(analysis, x_linked_kinship)
        elif label == "environment":
            kernels[label] = identity_kernel(analysis.n)
        else:
            raise ConfigError(f"Unknown variance component {label}")
    return kernels


def subset_kernels(kernels: Dict[str, KernelMatrix], rows: np.ndarray) -> Dict[str, KernelMatrix]:
    return {label: kernel.subset(rows) for label, kernel in kernels.items()}


def build_covariance_model(analysis: AnalysisSet, kernels: Dict[str, KernelMatrix]) -> CovarianceModel:
    """Components in the given order with scale-aware starting Sigma_k"""
    labels = list(kernels)
    starts = initial_sigmas(analysis.traits.values, labels)
    return CovarianceModel(tuple(
        VarianceComponent(label, sigma, kernels[label], COMPONENT_MULTIPLIERS[label])
        for label, sigma in zip(labels, starts)
    ))


def fit_null_model(analysis: AnalysisSet, terms: Sequence[CovariateTerm] = (),
                   interactions: Sequence[Tuple[str, str]] = (), constrain: Sequence[str] = (),
                   components: Sequence[str] = DEFAULT_COMPONENTS, kinship_mode: str = "theoretical",
                   opts: FitOptions = FitOptions(), kernels: Optional[Dict[str, KernelMatrix]] = None,
                   block_size: int = 4096) -> FitResult:
    """Kernels, observation index, mean model and covariance model, then fit_null"""
    if kernels is None:
        kernels = build_kernels(analysis, components, kinship_mode, block_size, opts.threads)
    idx = observation_index(analysis, kernels)
    mean = build_mean_model(analysis.traits, idx, terms, interactions, constrain)
    cov = build_covariance_model(analysis, kernels)
    return fit_null(idx.vec(analysis.traits.values), mean, cov, idx, opts)


