from __future__ import annotations
import logging
import math
from dataclasses import dataclass, field
from typing import Optional, Sequence, Tuple
import numpy as np
from scipy import stats

logger = logging.getLogger(__name__)


class SurvivalException(Exception): pass
class EmptyInputException(SurvivalException): pass
class EmptyGroupException(SurvivalException): pass
class NoEventsException(SurvivalException): pass
class InsufficientEventsException(SurvivalException): pass
class ConstantCovariateException(SurvivalException): pass
class NonConvergenceException(SurvivalException): pass
class SeparationException(SurvivalException): pass
class NoPermissiblePairsException(SurvivalException): pass
class DegenerateGroupsException(SurvivalException): pass


Z_95 = 1.959963984540054
COX_TOLERANCE = 1e-9
COX_MAX_ITERATIONS = 100
COX_MAX_HALVINGS = 40
SEPARATION_LIMIT = 20.0


@dataclass(frozen=True)
class SurvivalSample:
    time: float
    event: int
    covariates: Tuple[float, ...] = ()

    def __post_init__(self):
        if not self.time > 0:
            raise ValueError(f"survival time must be positive, got {self.time}")
        if self.event not in (0, 1):
            raise ValueError(f"event must be 0 or 1, got {self.event}")
        object.__setattr__(self, "covariates", tuple(float(x) for x in self.covariates))
        if not all(math.isfinite(x) for x in self.covariates):
            raise ValueError("covariates must be finite")


@dataclass
class KmCurve:
    event_times: np.ndarray
    surv: np.ndarray
    at_risk: np.ndarray
    events: np.ndarray
    censor_times: np.ndarray

    def survival_at(self, t: float) -> float:
        """
        S(t), right-continuous: includes the drop at an event time equal to t
        """
        index = np.searchsorted(self.event_times, t, side="right")
        return 1.0 if index == 0 else float(self.surv[index - 1])


@dataclass
class LogrankResult:
    chi2: float
    p: float


@dataclass
class CoxModel:
    beta: np.ndarray
    covariance: np.ndarray
    loglik: float
    loglik_null: float
    iterations: int
    means: np.ndarray            # covariates are centred on these before fitting
    baseline_times: np.ndarray   # distinct event times
    baseline_cumhaz: np.ndarray  # Breslow Λ0 at each baseline time, at the centred mean
    max_time: float
    names: list = field(default_factory=list)

    @property
    def standard_errors(self) -> np.ndarray:
        return np.sqrt(np.diag(self.covariance))

    def linear_predictor(self, covariates: Sequence[float]) -> float:
        return float(np.dot(self.beta, np.asarray(covariates, dtype=np.float64) - self.means))

    def cumulative_hazard_at(self, t: float) -> float:
        """
        Λ0(t), left-continuous: hazard accumulated over event times strictly before t
        """
        index = np.searchsorted(self.baseline_times, t, side="left")
        return 0.0 if index == 0 else float(self.baseline_cumhaz[index - 1])


@dataclass
class HazardRatioResult:
    hr: float
    ci_low: float
    ci_high: float
    p_value: float
    beta: float = 0.0
    se: float = 0.0


@dataclass
class AnovaResult:
    F: float
    p: float
    df_between: int
    df_within: int
    zero_within_variance: bool = False


def _arrays(samples: Sequence[SurvivalSample]) -> Tuple[np.ndarray, np.ndarray]:
    return (np.array([s.time for s in samples], dtype=np.float64),
            np.array([s.event for s in samples], dtype=np.int64))

def km_estimate(samples: Sequence[SurvivalSample]) -> KmCurve:
    """
    Product-limit estimate of the survival function.
    Subjects censored at an event time stay in the risk set for that time.

    :raises: EmptyInputException
    """
    if not samples:
        raise EmptyInputException("no samples")
    times, events = _arrays(samples)
    event_times = np.unique(times[events == 1])
    at_risk = np.array([int(np.sum(times >= t)) for t in event_times], dtype=np.int64)
    deaths = np.array([int(np.sum((times == t) & (events == 1))) for t in event_times], dtype=np.int64)
    surv = np.cumprod(1.0 - deaths / at_risk) if len(event_times) else np.zeros(0)
    return KmCurve(
        event_times=event_times,
        surv=surv,
        at_risk=at_risk,
        events=deaths,
        censor_times=np.sort(times[events == 0])
    )

def chi2_sf(x: float, df: int = 1) -> float:
    return float(stats.chi2.sf(x, df))

def f_sf(x: float, df1: int, df2: int) -> float:
    return float(stats.f.sf(x, df1, df2))

def logrank(group_a: Sequence[SurvivalSample], group_b: Sequence[SurvivalSample]) -> LogrankResult:
    """
    Two-group log-rank test with one degree of freedom

    :raises: EmptyGroupException, NoEventsException
    """
    if not group_a or not group_b:
        raise EmptyGroupException("both groups need at least one sample")
    times_a, events_a = _arrays(group_a)
    times_b, events_b = _arrays(group_b)
    times = np.concatenate([times_a, times_b])
    events = np.concatenate([events_a, events_b])
    if not events.any():
        raise NoEventsException("no events in either group")

    observed_minus_expected = 0.0
    variance = 0.0
    for t in np.unique(times[events == 1]):
        n_a = np.sum(times_a >= t)
        n = np.sum(times >= t)
        d_a = np.sum((times_a == t) & (events_a == 1))
        d = np.sum((times == t) & (events == 1))
        observed_minus_expected += d_a - d * n_a / n
        if n > 1:
            variance += d * (n_a / n) * (1.0 - n_a / n) * (n - d) / (n - 1)

    if variance <= 0.0:
        return LogrankResult(chi2=0.0, p=1.0)
    chi2 = observed_minus_expected ** 2 / variance
    return LogrankResult(chi2=float(chi2), p=chi2_sf(chi2, 1))


# region [Cox proportional hazards]

def _efron_terms(X: np.ndarray, T: np.ndarray, E: np.ndarray, beta: np.ndarray) -> Tuple[float, np.ndarray, np.ndarray]:
    """
    Efron partial log-likelihood with its gradient and hessian
    """
    n, p = X.shape
    eta = X @ beta
    shift = eta.max()
    phi = np.exp(eta - shift)
    loglik = 0.0
    gradient = np.zeros(p)
    hessian = np.zeros((p, p))

    for t in np.unique(T[E == 1]):
        risk = T >= t
        dead = (T == t) & (E == 1)
        deaths = int(dead.sum())

        risk_phi = phi[risk].sum()
        risk_phi_x = phi[risk] @ X[risk]
        risk_phi_x_x = (X[risk].T * phi[risk]) @ X[risk]
        tie_phi = phi[dead].sum()
        tie_phi_x = phi[dead] @ X[dead]
        tie_phi_x_x = (X[dead].T * phi[dead]) @ X[dead]

        loglik += eta[dead].sum()
        gradient += X[dead].sum(axis=0)
        for l in range(deaths):
            fraction = l / deaths
            s0 = risk_phi - fraction * tie_phi
            s1 = risk_phi_x - fraction * tie_phi_x
            s2 = risk_phi_x_x - fraction * tie_phi_x_x
            mean = s1 / s0
            loglik -= math.log(s0) + shift
            gradient -= mean
            hessian -= s2 / s0 - np.outer(mean, mean)
    return loglik, gradient, hessian

def cox_partial_loglik(samples: Sequence[SurvivalSample], beta: Sequence[float]) -> float:
    """
    Efron partial log-likelihood of uncentred covariates at `beta`
    """
    T, E = _arrays(samples)
    X = np.array([s.covariates for s in samples], dtype=np.float64)
    return _efron_terms(X, T, E, np.asarray(beta, dtype=np.float64))[0]

def _breslow(X: np.ndarray, T: np.ndarray, E: np.ndarray, beta: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    risk_scores = np.exp(X @ beta)
    times = np.unique(T[E == 1])
    increments = np.array([np.sum((T == t) & (E == 1)) / risk_scores[T >= t].sum() for t in times])
    return times, np.cumsum(increments)

def cox_fit(samples: Sequence[SurvivalSample], names: Optional[Sequence[str]] = None) -> CoxModel:
    """
    Fit a Cox proportional hazards model by Newton-Raphson with step halving
    on the Efron partial likelihood. Covariates are centred on their means.

    :raises: InsufficientEventsException with fewer than two events
    :raises: ConstantCovariateException, SeparationException, NonConvergenceException
    """
    if not samples:
        raise EmptyInputException("no samples")
    T, E = _arrays(samples)
    X = np.array([s.covariates for s in samples], dtype=np.float64)
    if X.ndim != 2 or X.shape[1] == 0:
        raise ValueError("samples carry no covariates")
    if int(E.sum()) < 2:
        raise InsufficientEventsException(f"Cox regression needs at least two events, got {int(E.sum())}")
    names = list(names) if names is not None else [f"x{i}" for i in range(X.shape[1])]

    means = X.mean(axis=0)
    scales = X.std(axis=0)
    constant = [names[i] for i in range(X.shape[1]) if scales[i] == 0.0]
    if constant:
        raise ConstantCovariateException(f"constant covariate(s): {', '.join(constant)}")
    Xc = X - means

    beta = np.zeros(X.shape[1])
    loglik, gradient, hessian = _efron_terms(Xc, T, E, beta)
    loglik_null = loglik
    for iteration in range(1, COX_MAX_ITERATIONS + 1):
        try:
            step = np.linalg.solve(-hessian, gradient)
        except np.linalg.LinAlgError:
            raise NonConvergenceException("observed information is singular")

        for _ in range(COX_MAX_HALVINGS):
            candidate = beta + step
            new_loglik, new_gradient, new_hessian = _efron_terms(Xc, T, E, candidate)
            if np.isfinite(new_loglik) and new_loglik >= loglik - COX_TOLERANCE:
                break
            step = step / 2.0
        else:
            raise NonConvergenceException("step halving failed to improve the partial likelihood")

        if np.any(np.abs(candidate * scales) > SEPARATION_LIMIT):
            raise SeparationException(
                f"standardized coefficient exceeded {SEPARATION_LIMIT} at iteration {iteration}: "
                "the covariates separate the outcomes"
            )
        converged = abs(new_loglik - loglik) < COX_TOLERANCE
        beta, loglik, gradient, hessian = candidate, new_loglik, new_gradient, new_hessian
        if converged:
            break
    else:
        raise NonConvergenceException(f"no convergence after {COX_MAX_ITERATIONS} iterations")

    try:
        covariance = np.linalg.inv(-hessian)
    except np.linalg.LinAlgError:
        raise NonConvergenceException("observed information is singular at the estimate")
    covariance = (covariance + covariance.T) / 2.0
    baseline_times, baseline_cumhaz = _breslow(Xc, T, E, beta)
    logger.debug("Cox fit converged in %d iterations, loglik %.6f", iteration, loglik)
    return CoxModel(
        beta=beta,
        covariance=covariance,
        loglik=float(loglik),
        loglik_null=float(loglik_null),
        iterations=iteration,
        means=means,
        baseline_times=baseline_times,
        baseline_cumhaz=baseline_cumhaz,
        max_time=float(T.max()),
        names=names
    )

def _wald(beta: float, se: float) -> HazardRatioResult:
    z = beta / se
    return HazardRatioResult(
        hr=math.exp(beta),
        ci_low=math.exp(beta - Z_95 * se),
        ci_high=math.exp(beta + Z_95 * se),
        p_value=float(2.0 * stats.norm.sf(abs(z))),
        beta=float(beta),
        se=float(se)
    )

def cox_summary(model: CoxModel) -> dict[str, HazardRatioResult]:
    """
    Per-covariate hazard ratio with Wald 95% CI and p-value
    """
    return {name: _wald(float(beta), float(se))
            for name, beta, se in zip(model.names, model.beta, model.standard_errors)}

def hazard_ratio_groups(group_a: Sequence[SurvivalSample], group_b: Sequence[SurvivalSample]) -> HazardRatioResult:
    """
    Hazard ratio of group A against group B from a univariate Cox model on the group indicator
    """
    if not group_a or not group_b:
        raise EmptyGroupException("both groups need at least one sample")
    samples = [SurvivalSample(s.time, s.event, (1.0,)) for s in group_a] + \
              [SurvivalSample(s.time, s.event, (0.0,)) for s in group_b]
    model = cox_fit(samples, names=["group"])
    return _wald(float(model.beta[0]), float(model.standard_errors[0]))

# endregion


def c_index(risk: Sequence[float], samples: Sequence[SurvivalSample]) -> float:
    """
    Harrell's concordance index. A pair is usable when the earlier time is an event;
    at equal times only when exactly one of the two is an event. Tied risks count 0.5.

    :raises: NoPermissiblePairsException
    """
    risk = np.asarray(risk, dtype=np.float64)
    if len(risk) != len(samples):
        raise ValueError(f"{len(risk)} risk scores for {len(samples)} samples")
    times, events = _arrays(samples)

    # row i is the subject failing first, column j the comparison subject
    earlier = times[:, None] < times[None, :]
    same_time = (times[:, None] == times[None, :]) & (events[None, :] == 0)
    permissible = (events[:, None] == 1) & (earlier | same_time)

    n_permissible = int(permissible.sum())
    if n_permissible == 0:
        raise NoPermissiblePairsException("no comparable pairs")
    concordant = int(np.sum(permissible & (risk[:, None] > risk[None, :])))
    tied = int(np.sum(permissible & (risk[:, None] == risk[None, :])))
    return (concordant + 0.5 * tied) / n_permissible

def anova_oneway(groups: Sequence[Sequence[float]]) -> AnovaResult:
    """
    One-way analysis of variance.
    Zero within-group variance gives F=inf, p=0 when means differ and F=0, p=1 when all values are equal.

    :raises: DegenerateGroupsException with fewer than two groups or a group with fewer than two values
    """
    arrays = [np.asarray(g, dtype=np.float64) for g in groups]
    if len(arrays) < 2 or any(len(g) < 2 for g in arrays):
        raise DegenerateGroupsException("need at least two groups of at least two values")
    k = len(arrays)
    n = sum(len(g) for g in arrays)
    grand_mean = np.concatenate(arrays).mean()
    ss_between = sum(len(g) * (g.mean() - grand_mean) ** 2 for g in arrays)
    ss_within = sum(((g - g.mean()) ** 2).sum() for g in arrays)
    df_between, df_within = k - 1, n - k
    # squared rounding error of n deviations, each off by at most n ulps of the largest value
    largest = max(float(np.abs(g).max()) for g in arrays)
    noise = n * (n * np.finfo(np.float64).eps * largest) ** 2

    if ss_within <= noise:
        if ss_between <= noise:
            logger.warning("ANOVA on identical values")
            return AnovaResult(F=0.0, p=1.0, df_between=df_between, df_within=df_within,
                               zero_within_variance=True)
        logger.warning("ANOVA groups have zero within-group variance")
        return AnovaResult(F=math.inf, p=0.0, df_between=df_between, df_within=df_within,
                           zero_within_variance=True)

    F = (ss_between / df_between) / (ss_within / df_within)
    return AnovaResult(F=float(F), p=f_sf(F, df_between, df_within),
                       df_between=df_between, df_within=df_within)
