"""IRLS fitting for logistic and gamma(log) GLMs, cluster-robust
sandwich covariance, Wald tests, and average marginal effects."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.linalg
from scipy import stats

MAX_ITERATIONS = 100
REL_DEVIANCE_TOL = 1e-9
ABS_DEVIANCE_TOL = 1e-12
# The clip bounds fitted logistic probabilities away from 0/1 so a
# quasi-separated nuisance column saturates (|eta| ~ 23) instead of
# overflowing; constant responses are rejected up front.
MU_EPS = 1e-10


class GlmError(Exception):
    pass


class RankDeficient(GlmError):
    def __init__(self, columns: list[str]):
        self.columns = columns
        super().__init__(f"design matrix rank deficient; dependent columns: {columns}")


class SeparationSuspected(GlmError):
    pass


class TooFewClusters(GlmError):
    pass


class SingularSubmatrix(GlmError):
    pass


BINOMIAL_LOGIT = "binomial_logit"
GAMMA_LOG = "gamma_log"


class _Logit:
    name = BINOMIAL_LOGIT

    @staticmethod
    def check_response(y):
        if not np.all((y == 0) | (y == 1)):
            raise ValueError("logistic response must be binary in {0, 1}")
        if len(y) and (np.all(y == 0) or np.all(y == 1)):
            raise SeparationSuspected(
                "constant binary response; the intercept diverges"
            )

    @staticmethod
    def init_mu(y):
        return (y + 0.5) / 2.0

    @staticmethod
    def link(mu):
        return np.log(mu / (1.0 - mu))

    @staticmethod
    def inv_link(eta):
        return 1.0 / (1.0 + np.exp(-eta))

    @staticmethod
    def inv_link_deriv(eta):
        mu = 1.0 / (1.0 + np.exp(-eta))
        return mu * (1.0 - mu)

    @staticmethod
    def irls_weights(mu):
        # W = (dmu/deta)^2 / V(mu) = mu(1-mu) under the canonical link
        return mu * (1.0 - mu)

    @staticmethod
    def working_response(eta, y, mu):
        return eta + (y - mu) / (mu * (1.0 - mu))

    @staticmethod
    def deviance(y, mu):
        return -2.0 * np.sum(y * np.log(mu) + (1.0 - y) * np.log(1.0 - mu))

    @staticmethod
    def score_scale(mu):
        # (dmu/deta) / V(mu), multiplying (y - mu) in the quasi-score
        return np.ones_like(mu)

    @staticmethod
    def clip_mu(mu):
        return np.clip(mu, MU_EPS, 1.0 - MU_EPS)

    has_dispersion = False


class _GammaLog:
    name = GAMMA_LOG

    @staticmethod
    def check_response(y):
        if not np.all(y > 0):
            raise ValueError("gamma response must be strictly positive")

    @staticmethod
    def init_mu(y):
        return np.asarray(y, dtype=float).copy()

    @staticmethod
    def link(mu):
        return np.log(mu)

    @staticmethod
    def inv_link(eta):
        return np.exp(eta)

    @staticmethod
    def inv_link_deriv(eta):
        return np.exp(eta)

    @staticmethod
    def irls_weights(mu):
        # (dmu/deta)^2 / V = mu^2 / mu^2 = 1 under the log link
        return np.ones_like(mu)

    @staticmethod
    def working_response(eta, y, mu):
        return eta + (y - mu) / mu

    @staticmethod
    def deviance(y, mu):
        return 2.0 * np.sum((y - mu) / mu - np.log(y / mu))

    @staticmethod
    def score_scale(mu):
        return 1.0 / mu

    @staticmethod
    def clip_mu(mu):
        return np.maximum(mu, MU_EPS)

    has_dispersion = True


_FAMILIES = {BINOMIAL_LOGIT: _Logit, GAMMA_LOG: _GammaLog}


@dataclass(frozen=True)
class ModelSpec:
    family: str
    response: str
    terms: tuple[str, ...]
    cluster: str
    intercept: bool = True

    def __post_init__(self):
        if self.family not in _FAMILIES:
            raise ValueError(f"unknown family {self.family!r}")


@dataclass
class FitResult:
    family: str
    names: list[str]
    coefficients: np.ndarray
    model_cov: np.ndarray
    robust_cov: np.ndarray | None
    dispersion: float | None
    deviance: float
    n_iterations: int
    converged: bool
    n_obs: int
    n_clusters: int | None
    dropped_columns: list[str] = field(default_factory=list)
    deviance_trace: list[float] = field(default_factory=list)
    X: np.ndarray | None = None
    y: np.ndarray | None = None
    mu: np.ndarray | None = None
    cluster_ids: np.ndarray | None = None

    def coef(self, name: str) -> float:
        return float(self.coefficients[self.names.index(name)])

    def robust_se(self, name: str) -> float:
        i = self.names.index(name)
        # cancellation can leave a -1e-30-scale diagonal on exact-null fits
        return float(np.sqrt(max(self.robust_cov[i, i], 0.0)))


def build_design(
    data: dict[str, np.ndarray],
    terms: tuple[str, ...] | list[str],
    intercept: bool = True,
) -> tuple[np.ndarray, list[str]]:
    """Design matrix from named columns; 'a:b' terms are products."""
    cols = []
    names = []
    n = None
    if intercept:
        names.append("intercept")
    for term in terms:
        parts = term.split(":")
        col = None
        for part in parts:
            v = np.asarray(data[part], dtype=float)
            col = v if col is None else col * v
        cols.append(col)
        names.append(term)
        n = len(col)
    if intercept:
        cols.insert(0, np.ones(n if n is not None else 0))
    return np.column_stack(cols), names


def _dependent_columns(X: np.ndarray, names: list[str]) -> list[int]:
    """Pivoted-QR detection of linearly dependent columns."""
    if X.shape[1] == 0:
        return []
    _, R, piv = scipy.linalg.qr(X, mode="economic", pivoting=True)
    diag = np.abs(np.diag(R))
    if diag.size == 0 or diag[0] == 0.0:
        return list(range(X.shape[1]))
    tol = diag[0] * max(X.shape) * np.finfo(float).eps
    bad = [int(piv[i]) for i in range(len(diag)) if diag[i] <= tol]
    bad += [int(p) for p in piv[len(diag):]]
    return sorted(bad)


def _wls_step(X: np.ndarray, w: np.ndarray, z: np.ndarray) -> np.ndarray:
    """Weighted least squares via QR on the scaled system."""
    sw = np.sqrt(w)
    Q, R = np.linalg.qr(X * sw[:, None])
    return scipy.linalg.solve_triangular(R, Q.T @ (z * sw))


def fit_arrays(
    X: np.ndarray,
    y: np.ndarray,
    family: str,
    names: list[str] | None = None,
    cluster_ids: np.ndarray | None = None,
    drop_collinear: bool = False,
    max_iterations: int = MAX_ITERATIONS,
) -> FitResult:
    """IRLS fit on a prebuilt design matrix.

    Collinear columns raise RankDeficient unless drop_collinear, in which
    case they are removed and reported on the result.
    """
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=float)
    if names is None:
        names = [f"x{i}" for i in range(X.shape[1])]
    fam = _FAMILIES[family]
    fam.check_response(y)

    dropped: list[str] = []
    bad = _dependent_columns(X, names)
    if bad:
        if not drop_collinear:
            raise RankDeficient([names[i] for i in bad])
        dropped = [names[i] for i in bad]
        keep = [i for i in range(X.shape[1]) if i not in bad]
        X = X[:, keep]
        names = [names[i] for i in keep]

    n, p = X.shape
    mu = fam.clip_mu(fam.init_mu(y))
    eta = fam.link(mu)
    deviance = fam.deviance(y, mu)
    trace = [float(deviance)]
    converged = False
    beta = np.zeros(p)
    iterations = 0
    for iterations in range(1, max_iterations + 1):
        w = fam.irls_weights(mu)
        z = fam.working_response(eta, y, mu)
        beta = _wls_step(X, w, z)
        eta = X @ beta
        mu = fam.clip_mu(fam.inv_link(eta))
        new_deviance = fam.deviance(y, mu)
        trace.append(float(new_deviance))
        change = abs(new_deviance - deviance)
        if change < ABS_DEVIANCE_TOL or change < REL_DEVIANCE_TOL * (abs(deviance) + 1e-300):
            deviance = new_deviance
            converged = True
            break
        deviance = new_deviance

    # Quasi-separated columns saturate against the probability clip and the
    # fit proceeds (matching standard GLM software); complete separation via
    # a constant response is rejected in check_response above.
    w = fam.irls_weights(mu)
    info = (X * w[:, None]).T @ X  # expected information X'WX
    info_inv = np.linalg.inv(info)
    info_inv = (info_inv + info_inv.T) / 2.0

    dispersion = None
    model_cov = info_inv
    if fam.has_dispersion:
        pearson = np.sum(((y - mu) / mu) ** 2)
        dispersion = float(pearson / (n - p)) if n > p else float("nan")
        model_cov = dispersion * info_inv

    result = FitResult(
        family=family,
        names=list(names),
        coefficients=beta,
        model_cov=model_cov,
        robust_cov=None,
        dispersion=dispersion,
        deviance=float(deviance),
        n_iterations=iterations,
        converged=converged,
        n_obs=n,
        n_clusters=None,
        dropped_columns=dropped,
        deviance_trace=trace,
        X=X,
        y=y,
        mu=mu,
        cluster_ids=None,
    )
    if cluster_ids is not None:
        result.cluster_ids = np.asarray(cluster_ids)
        result.n_clusters = len(np.unique(result.cluster_ids))
        if converged:
            result.robust_cov = cluster_robust_cov(result, result.cluster_ids)
    return result


def fit(
    spec: ModelSpec,
    data: dict[str, np.ndarray],
    drop_collinear: bool = False,
) -> FitResult:
    """Fit a ModelSpec against a named-column table."""
    X, names = build_design(data, spec.terms, spec.intercept)
    y = np.asarray(data[spec.response], dtype=float)
    cluster_ids = np.asarray(data[spec.cluster])
    return fit_arrays(
        X, y, spec.family, names=names, cluster_ids=cluster_ids,
        drop_collinear=drop_collinear,
    )


def _scores(fit_result: FitResult) -> np.ndarray:
    """Per-observation quasi-score contributions (n x p)."""
    fam = _FAMILIES[fit_result.family]
    resid = (fit_result.y - fit_result.mu) * fam.score_scale(fit_result.mu)
    return fit_result.X * resid[:, None]


def cluster_robust_cov(fit_result: FitResult, cluster_ids) -> np.ndarray:
    """Sandwich B^-1 M B^-1 over per-cluster score sums.

    Finite-sample correction G/(G-1) * (N-1)/(N-p); with singleton
    clusters this collapses to the HC1 factor N/(N-p).
    """
    if not fit_result.converged:
        raise GlmError("cluster_robust_cov requires a converged fit")
    cluster_ids = np.asarray(cluster_ids)
    n, p = fit_result.X.shape
    uniq, inverse = np.unique(cluster_ids, return_inverse=True)
    G = len(uniq)
    if G < 2:
        raise TooFewClusters(f"need at least 2 clusters, got {G}")

    s = _scores(fit_result)
    cluster_sums = np.zeros((G, p))
    np.add.at(cluster_sums, inverse, s)
    meat = cluster_sums.T @ cluster_sums

    fam = _FAMILIES[fit_result.family]
    w = fam.irls_weights(fit_result.mu)
    bread = np.linalg.inv((fit_result.X * w[:, None]).T @ fit_result.X)
    correction = (G / (G - 1.0)) * ((n - 1.0) / (n - p))
    cov = correction * bread @ meat @ bread
    return (cov + cov.T) / 2.0


def hc1_cov(fit_result: FitResult) -> np.ndarray:
    """Heteroskedasticity-consistent covariance with the N/(N-p) factor."""
    n, p = fit_result.X.shape
    s = _scores(fit_result)
    meat = s.T @ s
    fam = _FAMILIES[fit_result.family]
    w = fam.irls_weights(fit_result.mu)
    bread = np.linalg.inv((fit_result.X * w[:, None]).T @ fit_result.X)
    cov = (n / (n - p)) * bread @ meat @ bread
    return (cov + cov.T) / 2.0


@dataclass(frozen=True)
class WaldResult:
    statistic: float
    df: int
    p_value: float


def wald_test(
    fit_result: FitResult,
    indices: list[int] | list[str],
    use_robust: bool = True,
) -> WaldResult:
    """Joint chi-square test that the selected coefficients are zero."""
    idx = [
        fit_result.names.index(i) if isinstance(i, str) else int(i)
        for i in indices
    ]
    cov = fit_result.robust_cov if use_robust else fit_result.model_cov
    if cov is None:
        raise GlmError("no robust covariance on this fit")
    b = fit_result.coefficients[idx]
    V = cov[np.ix_(idx, idx)]
    try:
        sol = np.linalg.solve(V, b)
    except np.linalg.LinAlgError:
        raise SingularSubmatrix(f"covariance submatrix for {indices} is singular")
    if not np.all(np.isfinite(sol)):
        raise SingularSubmatrix(f"covariance submatrix for {indices} is singular")
    W = float(b @ sol)
    df = len(idx)
    return WaldResult(W, df, float(stats.chi2.sf(W, df)))


@dataclass(frozen=True)
class MarginalEffect:
    effect: float
    se: float
    ci_low: float
    ci_high: float


def marginal_effect(
    fit_result: FitResult, term: str, level: float = 0.95
) -> MarginalEffect:
    """Average marginal effect of a binary design column by standardization.

    Mean over rows of [prediction at term=1 minus prediction at term=0];
    interval by the delta method on the robust covariance.
    """
    if term not in fit_result.names:
        return MarginalEffect(0.0, 0.0, 0.0, 0.0)
    fam = _FAMILIES[fit_result.family]
    j = fit_result.names.index(term)
    X1 = fit_result.X.copy()
    X0 = fit_result.X.copy()
    X1[:, j] = 1.0
    X0[:, j] = 0.0
    eta1 = X1 @ fit_result.coefficients
    eta0 = X0 @ fit_result.coefficients
    effect = float(np.mean(fam.inv_link(eta1) - fam.inv_link(eta0)))
    grad = np.mean(
        fam.inv_link_deriv(eta1)[:, None] * X1
        - fam.inv_link_deriv(eta0)[:, None] * X0,
        axis=0,
    )
    cov = fit_result.robust_cov if fit_result.robust_cov is not None else fit_result.model_cov
    var = float(grad @ cov @ grad)
    se = float(np.sqrt(max(var, 0.0)))
    zcrit = float(stats.norm.ppf(0.5 + level / 2.0))
    return MarginalEffect(effect, se, effect - zcrit * se, effect + zcrit * se)


def confidence_interval(
    fit_result: FitResult, name: str, level: float = 0.95
) -> tuple[float, float]:
    b = fit_result.coef(name)
    se = fit_result.robust_se(name)
    zcrit = float(stats.norm.ppf(0.5 + level / 2.0))
    return b - zcrit * se, b + zcrit * se
