"""MAP calibration of item parameters, with Laplace uncertainty.

Two objectives are available, both over observed entries only:

``"marginal"`` (default)
    sum_i log int prod_j p(y_ij | theta, item_j) N(theta; 0, 1) dtheta + sum_j log prior(item_j)

    The integral is a trapezoid rule on a fixed theta grid. Respondent
    thetas are then scored by MAP with the items held at their mode.

``"joint"``
    sum_ij log p(y_ij | theta_i, item_j) + sum_j log prior(item_j) + sum_i log N(theta_i; 0, 1)

    Thetas are free parameters. This objective has two known pathologies:
    the likelihood is invariant under theta -> c*theta, alpha -> alpha/c, so
    the mode shrinks the thetas until the alpha prior pushes back; and the
    thetas can fit one item's interior scores exactly, after which that
    item's omega grows without practical bound. On many realistic datasets
    the optimizer follows the second path and reports non-convergence.

Both are maximized in an unconstrained space (log alpha, beta, omega, gamma1,
log(gamma2 - gamma1)) with L-BFGS and polished with Newton steps on a
finite-difference Hessian of the analytic gradient; the joint Hessian is
arrow-shaped, so its solves reduce to a Schur complement over the items. The
Hessian at the optimum gives the Laplace standard errors.

Prior densities are applied to the natural parameters (no Jacobian terms),
so the optimum is the posterior mode in the natural parameterization.
"""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field
from typing import Mapping, Sequence

import numpy as np
from scipy import linalg, optimize, special

from .data import SavedModel, ScoreMatrix, TestMeta
from .errors import (
    ConvergenceError,
    InsufficientDataError,
    SingularHessianError,
    ValidationError,
)
from .model import (
    ItemBank,
    ItemParams,
    Theta,
    item_information_array,
    loglik_parts,
    shape_params_array,
)
from .scoring import ScoringMode, _solve
from .simulation import sample_scores

logger = logging.getLogger(__name__)

PARAM_NAMES = ("alpha", "beta", "omega", "gamma1", "gamma2")
_LOG_SQRT_2PI = 0.5 * math.log(2.0 * math.pi)


@dataclass(frozen=True)
class NormalPrior:
    mean: float
    sd: float

    def __post_init__(self):
        if not self.sd > 0:
            raise ValidationError("prior sd must be > 0")

    def logpdf(self, x):
        z = (x - self.mean) / self.sd
        return -0.5 * z * z - math.log(self.sd) - _LOG_SQRT_2PI

    def dlogpdf(self, x):
        return -(x - self.mean) / self.sd**2

    def to_dict(self):
        return {"dist": "normal", "mean": self.mean, "sd": self.sd}


@dataclass(frozen=True)
class LogNormalPrior:
    mu: float
    sigma: float

    def __post_init__(self):
        if not self.sigma > 0:
            raise ValidationError("prior sigma must be > 0")

    def logpdf_log(self, log_x):
        """Log density of x, written as a function of log x."""
        z = (log_x - self.mu) / self.sigma
        return -0.5 * z * z - math.log(self.sigma) - _LOG_SQRT_2PI - log_x

    def dlogpdf_log(self, log_x):
        """d/d(log x) of the density of x (still no Jacobian for the log map)."""
        return -(log_x - self.mu) / self.sigma**2 - 1.0

    def to_dict(self):
        return {"dist": "lognormal", "mu": self.mu, "sigma": self.sigma}


def _prior_from_dict(d):
    if d.get("dist") == "lognormal":
        return LogNormalPrior(float(d["mu"]), float(d["sigma"]))
    if d.get("dist", "normal") == "normal":
        return NormalPrior(float(d["mean"]), float(d["sd"]))
    raise ValidationError(f"unknown prior distribution {d.get('dist')!r}")


@dataclass(frozen=True)
class PriorConfig:
    beta: NormalPrior = NormalPrior(0.0, 2.0)
    alpha: LogNormalPrior = LogNormalPrior(0.0, 1.0)
    omega: NormalPrior = NormalPrior(0.0, 10.0)
    gamma1: NormalPrior = NormalPrior(-2.0, 1.0)
    gamma2: NormalPrior = NormalPrior(2.0, 1.0)
    theta: NormalPrior = NormalPrior(0.0, 1.0)

    def __post_init__(self):
        if not isinstance(self.alpha, LogNormalPrior):
            raise ValidationError("alpha prior must be lognormal")
        for name in ("beta", "omega", "gamma1", "gamma2", "theta"):
            if not isinstance(getattr(self, name), NormalPrior):
                raise ValidationError(f"{name} prior must be normal")

    def to_dict(self) -> dict:
        return {name: getattr(self, name).to_dict() for name in
                ("beta", "alpha", "omega", "gamma1", "gamma2", "theta")}

    @classmethod
    def from_dict(cls, d: Mapping) -> "PriorConfig":
        known = {"beta", "alpha", "omega", "gamma1", "gamma2", "theta"}
        unknown = set(d) - known
        if unknown:
            raise ValidationError(f"unknown prior keys {sorted(unknown)}")
        return cls(**{k: _prior_from_dict(v) for k, v in d.items()})


@dataclass(frozen=True)
class OptimizerConfig:
    """Settings for :func:`calibrate`.

    ``method`` is ``"marginal"`` or ``"joint"`` (see the module docstring).
    ``gtol`` bounds the max-abs gradient of the negative log posterior at the
    returned solution. ``init_jitter`` > 0 perturbs the start point with
    N(0, init_jitter) noise drawn from ``seed``. ``quadrature_nodes`` is the
    size of the theta grid on [-6, 6] for the marginal method. ``se_mode``
    applies to the joint method: ``"joint"`` (item standard errors account
    for uncertainty in the thetas) or ``"conditional"`` (thetas held fixed).
    """

    method: str = "marginal"
    gtol: float = 1e-6
    max_iter: int = 2000
    newton_steps: int = 50
    seed: int = 0
    init_jitter: float = 0.0
    hessian_step: float = 1e-5
    quadrature_nodes: int = 121
    compute_se: bool = True
    se_mode: str = "joint"
    raise_on_failure: bool = True

    def __post_init__(self):
        if self.method not in ("marginal", "joint"):
            raise ValidationError("method must be 'marginal' or 'joint'")
        if self.se_mode not in ("joint", "conditional"):
            raise ValidationError("se_mode must be 'joint' or 'conditional'")
        if self.quadrature_nodes < 21:
            raise ValidationError("quadrature_nodes must be >= 21")


# ---------------------------------------------------------------------------
# posteriors


def _natural_items(items):
    """(J, 5) unconstrained rows -> alpha, beta, omega, gamma1, gamma2, gap."""
    alpha = np.exp(items[:, 0])
    gap = np.exp(items[:, 4])
    return alpha, items[:, 1], items[:, 2], items[:, 3], items[:, 3] + gap, gap


def _pack_items(bank: ItemBank) -> np.ndarray:
    alpha, beta, omega, g1, g2 = bank.arrays()
    if np.any(alpha <= 0):
        raise ValidationError("calibration needs alpha > 0 for every item")
    return np.column_stack([np.log(alpha), beta, omega, g1, np.log(g2 - g1)])


def _item_prior(items, priors: PriorConfig):
    """Log prior of the items and its gradient in the unconstrained space."""
    alpha, beta, omega, g1, g2, gap = _natural_items(items)
    p = priors
    value = float(
        np.sum(p.alpha.logpdf_log(items[:, 0]))
        + np.sum(p.beta.logpdf(beta))
        + np.sum(p.omega.logpdf(omega))
        + np.sum(p.gamma1.logpdf(g1))
        + np.sum(p.gamma2.logpdf(g2))
    )
    d_g2 = p.gamma2.dlogpdf(g2)
    grad = np.column_stack([
        p.alpha.dlogpdf_log(items[:, 0]),
        p.beta.dlogpdf(beta),
        p.omega.dlogpdf(omega),
        p.gamma1.dlogpdf(g1) + d_g2,
        gap * d_g2,
    ])
    return value, grad


class _JointPosterior:
    def __init__(self, data: ScoreMatrix, priors: PriorConfig):
        self.y = np.asarray(data.values, dtype=float)
        self.n, self.j = self.y.shape
        self.priors = priors
        self.size = 5 * self.j + self.n

    def split(self, u):
        return u[: 5 * self.j].reshape(self.j, 5), u[5 * self.j :]

    def pack(self, bank: ItemBank, thetas) -> np.ndarray:
        return np.concatenate([_pack_items(bank).ravel(), np.asarray(thetas, dtype=float)])

    def value_and_grad(self, u):
        """Negative log posterior and its gradient in the unconstrained space."""
        items, theta = self.split(u)
        alpha, beta, omega, g1, g2, gap = _natural_items(items)
        p = self.priors
        th = theta[:, None]
        logp, d_eta, d_omega, d_u1, d_u2, d_gap = loglik_parts(alpha, beta, omega, g1, g2, th, self.y)
        common = d_eta - d_u1 - d_u2
        d_g2 = (d_u2 + d_gap).sum(axis=0)

        prior_value, grad_items = _item_prior(items, p)
        grad_items[:, 0] += alpha * (th * common).sum(axis=0)
        grad_items[:, 1] += d_eta.sum(axis=0)
        grad_items[:, 2] += d_omega.sum(axis=0)
        grad_items[:, 3] += (d_u1 - d_gap).sum(axis=0) + d_g2
        grad_items[:, 4] += gap * d_g2
        grad_theta = (alpha * common).sum(axis=1) + p.theta.dlogpdf(theta)

        value = float(logp.sum()) + prior_value + float(np.sum(p.theta.logpdf(theta)))
        return -value, -np.concatenate([grad_items.ravel(), grad_theta])

    def hessian_blocks(self, u, h: float = 1e-5):
        """Central-difference Hessian of the negative log posterior, by block.

        Returns ``(A, B, D)``: the item block (5J x 5J), the item-theta block
        (5J x N) and the diagonal of the theta block (N,). Only 5J + 1
        gradient pairs are needed because theta_i's gradient depends on no
        other theta.
        """
        m = 5 * self.j
        A = np.empty((m, m))
        B = np.empty((m, self.n))
        for k in range(m):
            e = np.zeros_like(u)
            e[k] = h
            col = (self.value_and_grad(u + e)[1] - self.value_and_grad(u - e)[1]) / (2 * h)
            A[:, k] = col[:m]
            B[k, :] = col[m:]
        e = np.zeros_like(u)
        e[m:] = h
        D = (self.value_and_grad(u + e)[1][m:] - self.value_and_grad(u - e)[1][m:]) / (2 * h)
        return 0.5 * (A + A.T), B, D


class _MarginalPosterior:
    """Items-only posterior with theta integrated against its prior.

    For every observation the log density at node theta_q is

        lower*L_jq + upper*U_jq + interior*K_jq + (a_jq - 1)*log y + (b_jq - 1)*log(1 - y)

    so the (respondent, node) log-likelihood is five (N x J)(J x Q) products
    and all special functions are evaluated on the J x Q tables only.
    """

    def __init__(self, data: ScoreMatrix, priors: PriorConfig, nodes: int = 121):
        y = np.asarray(data.values, dtype=float)
        self.n, self.j = y.shape
        self.priors = priors
        self.size = 5 * self.j
        self.lower = (y == 0.0).astype(float)
        self.upper = (y == 1.0).astype(float)
        inside = (y > 0.0) & (y < 1.0)
        self.inside = inside.astype(float)
        y_in = np.where(inside, y, 0.5)
        self.log_y = np.where(inside, np.log(y_in), 0.0)
        self.log_1my = np.where(inside, np.log1p(-y_in), 0.0)
        self.theta = np.linspace(-6.0, 6.0, nodes)
        h = self.theta[1] - self.theta[0]
        w = np.full(nodes, h)
        w[[0, -1]] *= 0.5
        self.log_w = np.log(w) + priors.theta.logpdf(self.theta)

    def _tables(self, items):
        alpha, beta, omega, g1, g2, gap = _natural_items(items)
        th = self.theta[None, :]
        a_th = alpha[:, None] * th
        u1 = g1[:, None] - a_th
        u2 = g2[:, None] - a_th
        a, b = shape_params_array(alpha[:, None], beta[:, None], omega[:, None], th)
        log_gap = np.log(-np.expm1(-gap))[:, None]
        L = special.log_expit(u1)
        U = special.log_expit(-u2)
        K = special.log_expit(u2) + special.log_expit(-u1) + log_gap - special.betaln(a, b)
        return alpha, gap, a_th, u1, u2, a, b, L, U, K

    def _loglik_nodes(self, a, b, L, U, K):
        return (
            self.lower @ L + self.upper @ U + self.inside @ K
            + self.log_y @ (a - 1.0) + self.log_1my @ (b - 1.0)
        )

    def value_and_grad(self, v):
        items = v.reshape(self.j, 5)
        alpha, gap, a_th, u1, u2, a, b, L, U, K = self._tables(items)
        ll = self._loglik_nodes(a, b, L, U, K) + self.log_w[None, :]
        marg = special.logsumexp(ll, axis=1)
        W = np.exp(ll - marg[:, None])  # posterior node weights, (N, Q)

        s_low = (W.T @ self.lower).T  # (J, Q)
        s_up = (W.T @ self.upper).T
        s_in = (W.T @ self.inside).T
        s_ly = (W.T @ self.log_y).T
        s_l1y = (W.T @ self.log_1my).T

        psi_ab = special.digamma(a + b)
        da = a * (s_ly - s_in * (special.digamma(a) - psi_ab))  # d/d(log a) summed
        db = b * (s_l1y - s_in * (special.digamma(b) - psi_ab))
        d_eta = 0.5 * (da - db)
        d_omega = 0.5 * (da + db)
        d_u1 = s_low * special.expit(-u1) - s_in * special.expit(u1)
        d_u2 = -s_up * special.expit(u2) + s_in * special.expit(-u2)
        d_gap = s_in.sum(axis=1) / np.expm1(gap)
        d_g2 = d_u2.sum(axis=1) + d_gap

        prior_value, grad = _item_prior(items, self.priors)
        grad[:, 0] += (a_th * (d_eta - d_u1 - d_u2)).sum(axis=1)
        grad[:, 1] += d_eta.sum(axis=1)
        grad[:, 2] += d_omega.sum(axis=1)
        grad[:, 3] += d_u1.sum(axis=1) - d_gap + d_g2
        grad[:, 4] += gap * d_g2
        return -(float(marg.sum()) + prior_value), -grad.ravel()

    def hessian(self, v, h: float = 1e-5):
        H = np.empty((self.size, self.size))
        for k in range(self.size):
            e = np.zeros_like(v)
            e[k] = h
            H[:, k] = (self.value_and_grad(v + e)[1] - self.value_and_grad(v - e)[1]) / (2 * h)
        return 0.5 * (H + H.T)


def _schur(A, B, D):
    if np.any(D <= 0):
        bad = int(np.sum(D <= 0))
        raise SingularHessianError(f"{bad} theta curvature entries are not positive")
    BD = B / D
    return A - BD @ B.T, BD


def _cho(S, what="Hessian"):
    """Cholesky factor, or a SingularHessianError explaining why not."""
    if not np.all(np.isfinite(S)):
        raise SingularHessianError(f"{what} has non-finite entries")
    zero_rows = np.flatnonzero(np.all(np.abs(S) == 0.0, axis=1))
    if zero_rows.size:
        raise SingularHessianError(f"{what} has all-zero rows {zero_rows.tolist()}")
    try:
        return linalg.cho_factor(S, lower=True)
    except linalg.LinAlgError:
        eig = np.linalg.eigvalsh(0.5 * (S + S.T))
        scale = max(abs(eig).max(), 1e-300)
        if abs(eig).min() <= 1e-12 * scale:
            raise SingularHessianError(f"{what} is singular (min |eigenvalue| {abs(eig).min():.3g})") from None
        raise SingularHessianError(
            f"{what} is not positive definite ({int(np.sum(eig < 0))} negative eigenvalues, "
            f"min {eig.min():.3g})"
        ) from None


def covariance_from_hessian(H) -> np.ndarray:
    """Inverse of a symmetric positive-definite negative-log-posterior Hessian.

    Raises ``SingularHessianError`` for zero rows, singular or indefinite
    input; nothing is regularized.
    """
    H = np.asarray(H, dtype=float)
    factor = _cho(H)
    return linalg.cho_solve(factor, np.eye(H.shape[0]))


# ---------------------------------------------------------------------------
# results


@dataclass
class LaplaceResult:
    se: dict[str, dict[str, float]]
    theta_se: np.ndarray
    item_cov: dict[str, np.ndarray]
    condition_number: float


@dataclass
class CalibratedModel:
    bank: ItemBank
    respondent_ids: tuple[str, ...]
    thetas: np.ndarray
    log_posterior: float
    prior: PriorConfig
    config: OptimizerConfig
    diagnostics: dict
    data_fingerprint: str
    se: dict[str, dict[str, float]] = field(default_factory=dict)
    theta_se: np.ndarray | None = None
    item_cov: dict[str, np.ndarray] = field(default_factory=dict)

    def theta_estimates(self) -> list[Theta]:
        se = self.theta_se if self.theta_se is not None else [None] * len(self.thetas)
        return [Theta(float(t), None if s is None else float(s)) for t, s in zip(self.thetas, se)]

    def to_saved(self, meta: Mapping[str, TestMeta] | None = None) -> SavedModel:
        diag = self.diagnostics
        method = {
            "marginal": "marginal MAP (theta integrated out) with Laplace approximation",
            "joint": "joint MAP with Laplace approximation",
        }[self.config.method]
        provenance = {
            "method": method,
            "dataset_sha256": self.data_fingerprint,
            "n_respondents": len(self.respondent_ids),
            "seed": self.config.seed,
            "optimizer": asdict(self.config),
            "log_posterior": self.log_posterior,
            "converged": diag.get("converged"),
            "iterations": diag.get("iterations"),
            "grad_norm": diag.get("grad_norm"),
        }
        return SavedModel(
            bank=self.bank,
            meta={t: m for t, m in (meta or {}).items() if t in self.bank},
            prior_config=self.prior.to_dict(),
            provenance=provenance,
            se={k: dict(v) for k, v in self.se.items()},
            item_cov={k: np.array(v) for k, v in self.item_cov.items()},
        )


# ---------------------------------------------------------------------------
# calibration


def _check_data(data: ScoreMatrix):
    n, j = data.shape
    if j < 2:
        raise InsufficientDataError(f"need at least 2 tests, got {j}")
    if n < 10:
        raise InsufficientDataError(f"need at least 10 respondents, got {n}", code="INSUFFICIENT_RESPONDENTS")
    interior = ((data.values > 0) & (data.values < 1)).sum(axis=0)
    empty = [t for t, k in zip(data.test_ids, interior) if k == 0]
    if empty:
        raise ValidationError(f"tests {empty} have no interior observations", code="DEGENERATE_TEST")


def initial_thetas(data: ScoreMatrix) -> np.ndarray:
    """Standardized mean of per-test standardized scores."""
    y = data.values
    mean = np.nanmean(y, axis=0)
    sd = np.nanstd(y, axis=0)
    z = (y - mean) / np.where(sd > 0, sd, 1.0)
    with np.errstate(invalid="ignore"):
        score = np.nanmean(z, axis=1)
    score = np.nan_to_num(score, nan=0.0)
    spread = score.std()
    return (score - score.mean()) / spread if spread > 0 else np.zeros_like(score)


def _initial_items(j: int, priors: PriorConfig) -> np.ndarray:
    g1 = priors.gamma1.mean
    g2 = max(priors.gamma2.mean, g1 + 0.5)
    item0 = np.array([priors.alpha.mu, priors.beta.mean, priors.omega.mean, g1, math.log(g2 - g1)])
    return np.tile(item0, (j, 1))


def _line_search(post, u, f, g, d):
    t = 1.0
    slope = float(g @ d)
    for _ in range(40):
        f_new, g_new = post.value_and_grad(u + t * d)
        if np.isfinite(f_new) and f_new <= f + 1e-4 * t * slope:
            return u + t * d, f_new, g_new
        t *= 0.5
    return None


def _newton_polish(post, u, f, g, config: OptimizerConfig, trace: list):
    """Damped Newton steps until the gradient is below ``gtol``."""
    joint = isinstance(post, _JointPosterior)
    m = 5 * post.j
    steps = 0
    for steps in range(1, config.newton_steps + 1):
        if np.max(np.abs(g)) <= config.gtol:
            return u, f, g, steps - 1
        try:
            if joint:
                A, B, D = post.hessian_blocks(u, config.hessian_step)
                S, BD = _schur(A, B, D)
                factor = _cho(S, "Schur complement")
                g_i, g_t = g[:m], g[m:]
                d_i = -linalg.cho_solve(factor, g_i - BD @ g_t)
                d = np.concatenate([d_i, -(g_t + B.T @ d_i) / D])
            else:
                d = -linalg.cho_solve(_cho(post.hessian(u, config.hessian_step)), g)
        except SingularHessianError as exc:
            logger.warning("Newton polish stopped: %s", exc)
            return u, f, g, steps - 1
        step = _line_search(post, u, f, g, d)
        if step is None:
            return u, f, g, steps - 1
        u, f, g = step
        trace.append(-f)
    return u, f, g, steps


def calibrate(
    data: ScoreMatrix,
    priors: PriorConfig | None = None,
    config: OptimizerConfig | None = None,
    meta: Mapping[str, TestMeta] | None = None,
) -> CalibratedModel:
    """Fit all item parameters (and calibration-set thetas) by MAP.

    ``meta`` only contributes ``median_minutes`` to the returned items.
    Deterministic for a given ``data``, ``priors`` and ``config``.
    """
    priors = priors or PriorConfig()
    config = config or OptimizerConfig()
    _check_data(data)
    rng = np.random.default_rng(config.seed)
    u0 = _initial_items(data.shape[1], priors).ravel()
    if config.method == "joint":
        post = _JointPosterior(data, priors)
        u0 = np.concatenate([u0, initial_thetas(data)])
    else:
        post = _MarginalPosterior(data, priors, config.quadrature_nodes)
    if config.init_jitter > 0:
        u0 = u0 + rng.normal(0.0, config.init_jitter, u0.shape)

    trace = []

    def record(intermediate_result):
        trace.append(-float(intermediate_result.fun))

    res = optimize.minimize(
        post.value_and_grad,
        u0,
        jac=True,
        method="L-BFGS-B",
        callback=record,
        options={"maxiter": config.max_iter, "gtol": config.gtol, "ftol": 1e-15, "maxcor": 30},
    )
    u, f = res.x, float(res.fun)
    g = post.value_and_grad(u)[1]
    u, f, g, newton = _newton_polish(post, u, f, g, config, trace)
    grad_norm = float(np.max(np.abs(g)))
    converged = grad_norm <= config.gtol

    items = u[: 5 * post.j].reshape(post.j, 5)
    alpha, beta, omega, g1, g2, _ = _natural_items(items)
    minutes = {t: (m.median_minutes if m else None) for t, m in (meta or {}).items()}
    bank = ItemBank(
        tuple(
            ItemParams(
                id=tid,
                alpha=float(alpha[k]),
                beta=float(beta[k]),
                omega=float(omega[k]),
                gamma1=float(g1[k]),
                gamma2=float(g2[k]),
                median_minutes=minutes.get(tid),
            )
            for k, tid in enumerate(data.test_ids)
        )
    )
    if config.method == "joint":
        thetas, theta_se = np.array(u[5 * post.j :]), None
    else:
        thetas, theta_se, _ = _solve(bank.arrays(), np.asarray(data.values, dtype=float), ScoringMode.MAP)
    diagnostics = {
        "method": config.method,
        "converged": converged,
        "grad_norm": grad_norm,
        "iterations": int(res.nit),
        "newton_steps": newton,
        "lbfgs_message": str(res.message),
        "trace": trace,
    }
    model = CalibratedModel(
        bank=bank,
        respondent_ids=data.respondent_ids,
        thetas=thetas,
        log_posterior=-f,
        prior=priors,
        config=config,
        diagnostics=diagnostics,
        data_fingerprint=data.fingerprint(),
        theta_se=theta_se,
    )
    if not converged:
        logger.warning("calibration did not reach gtol: |grad| = %.3g", grad_norm)
        if config.raise_on_failure:
            err = ConvergenceError(
                f"gradient norm {grad_norm:.3g} > {config.gtol} after {res.nit} L-BFGS "
                f"iterations and {newton} Newton steps",
                diagnostics,
            )
            err.model = model
            raise err
    if config.compute_se and converged:
        lap = laplace_uncertainty(model, data, mode=config.se_mode)
        model.se, model.theta_se, model.item_cov = lap.se, lap.theta_se, lap.item_cov
        model.diagnostics["condition_number"] = lap.condition_number
    return model


def laplace_uncertainty(
    model: CalibratedModel, data: ScoreMatrix, mode: str = "joint", h: float | None = None
) -> LaplaceResult:
    """Standard errors from the inverse negative Hessian at the mode.

    Covariances are formed in the unconstrained space and mapped to the
    natural parameters with the delta method. For a joint-method model,
    ``mode="joint"`` uses the item block of the full inverse (Schur
    complement) and ``mode="conditional"`` inverts the item block alone. For
    a marginal-method model the item Hessian already accounts for theta
    uncertainty, ``mode`` is ignored, and theta standard errors come from the
    MAP scoring curvature.
    """
    h = h or model.config.hessian_step
    m = 5 * len(data.test_ids)
    if model.config.method == "marginal":
        post = _MarginalPosterior(data, model.prior, model.config.quadrature_nodes)
        H = post.hessian(_pack_items(model.bank).ravel(), h)
        cov_items = linalg.cho_solve(_cho(H, "item Hessian"), np.eye(m))
        _, theta_se, _ = _solve(model.bank.arrays(), np.asarray(data.values, dtype=float), ScoringMode.MAP)
        cond = float(np.linalg.cond(H))
    else:
        post = _JointPosterior(data, model.prior)
        A, B, D = post.hessian_blocks(post.pack(model.bank, model.thetas), h)
        if mode == "joint":
            S, BD = _schur(A, B, D)
            cov_items = linalg.cho_solve(_cho(S, "item-block Schur complement"), np.eye(m))
            theta_var = 1.0 / D + np.einsum("kn,kn->n", BD, cov_items @ BD)
            cond = float(np.linalg.cond(S))
        elif mode == "conditional":
            if np.any(D <= 0):
                raise SingularHessianError("theta curvature entries are not positive")
            cov_items = linalg.cho_solve(_cho(A, "item block"), np.eye(m))
            theta_var = 1.0 / D
            cond = float(np.linalg.cond(A))
        else:
            raise ValidationError("mode must be 'joint' or 'conditional'")
        theta_se = np.sqrt(theta_var)

    alpha, _, _, _, _, gap = _natural_items(_pack_items(model.bank))
    se, item_cov = {}, {}
    for k, tid in enumerate(data.test_ids):
        block = cov_items[5 * k : 5 * k + 5, 5 * k : 5 * k + 5]
        T = np.eye(5)
        T[0, 0] = alpha[k]
        T[4, 3:5] = (1.0, gap[k])
        nat = T @ block @ T.T
        se[tid] = {name: float(math.sqrt(max(v, 0.0))) for name, v in zip(PARAM_NAMES, np.diag(nat))}
        item_cov[tid] = block
    return LaplaceResult(se, np.asarray(theta_se, dtype=float), item_cov, cond)


# ---------------------------------------------------------------------------
# information bands and posterior predictive checks


@dataclass
class InformationBand:
    item_id: str
    theta_grid: np.ndarray
    mean_curve: np.ndarray
    draws: np.ndarray


def _item_unconstrained(item: ItemParams) -> np.ndarray:
    return np.array(
        [math.log(item.alpha), item.beta, item.omega, item.gamma1, math.log(item.gamma2 - item.gamma1)]
    )


def sample_information_band(
    model,
    item_id: str,
    theta_grid: Sequence[float],
    n_draws: int,
    seed: int = 0,
    se_scale: float = 1.0,
) -> InformationBand:
    """Information curves for parameter draws from the item's Laplace Gaussian.

    Draws are taken in the unconstrained space (log alpha, ..., log gap) so
    every draw is a valid item. ``mean_curve`` is the curve at the point
    estimate; ``draws`` has shape ``(n_draws, len(theta_grid))``. Works with
    either a :class:`CalibratedModel` or a loaded :class:`SavedModel`.
    """
    item = model.bank[item_id]
    grid = np.asarray(theta_grid, dtype=float)
    mean_curve = np.atleast_1d(
        item_information_array(item.alpha, item.beta, item.omega, item.gamma1, item.gamma2, grid)
    )
    if n_draws <= 0:
        return InformationBand(item_id, grid, mean_curve, np.empty((0, grid.size)))
    if item_id not in model.item_cov:
        raise ValidationError(f"no Laplace covariance stored for item {item_id!r}")
    cov = np.asarray(model.item_cov[item_id]) * se_scale**2
    w, V = np.linalg.eigh(0.5 * (cov + cov.T))
    L = V * np.sqrt(np.clip(w, 0.0, None))
    rng = np.random.default_rng(seed)
    z = rng.standard_normal((n_draws, 5))
    u = _item_unconstrained(item) + z @ L.T
    alpha = np.exp(u[:, 0:1])
    g1 = u[:, 3:4]
    g2 = g1 + np.exp(u[:, 4:5])
    draws = item_information_array(alpha, u[:, 1:2], u[:, 2:3], g1, g2, grid[None, :])
    return InformationBand(item_id, grid, mean_curve, np.asarray(draws))


@dataclass
class PPCResult:
    test_id: str
    bin_edges: np.ndarray
    observed: np.ndarray
    replicated: np.ndarray
    observed_boundary: np.ndarray
    replicated_boundary: np.ndarray
    expected_boundary: np.ndarray

    def envelope_coverage(self) -> float:
        """Fraction of bins where the observed density lies within the replicate range."""
        lo = self.replicated.min(axis=0)
        hi = self.replicated.max(axis=0)
        return float(np.mean((self.observed >= lo) & (self.observed <= hi)))


def posterior_predictive_check(
    model: CalibratedModel, data: ScoreMatrix, n_reps: int = 100, seed: int = 0, bins: int = 20
) -> dict[str, PPCResult]:
    """Observed vs replicated score histograms per test.

    Each replicate draws every respondent's theta from N(theta_hat, se^2)
    (the point estimate when no standard errors are available) and keeps the
    observed missingness pattern. Boundary proportions are reported separately
    alongside their model expectation.
    """
    if n_reps < 1:
        raise ValidationError("n_reps must be >= 1")
    bank = model.bank.subset(data.test_ids)
    thetas = np.asarray(model.thetas, dtype=float)
    if thetas.size != data.shape[0]:
        raise ValidationError("model thetas do not match the data's respondents")
    mask = data.mask
    edges = np.linspace(0.0, 1.0, bins + 1)
    rng = np.random.default_rng(seed)
    spread = np.zeros_like(thetas) if model.theta_se is None else np.asarray(model.theta_se, dtype=float)
    reps = []
    for _ in range(n_reps):
        draw = thetas + spread * rng.standard_normal(thetas.size)
        reps.append(np.where(mask, sample_scores(bank, draw, rng), np.nan))

    alpha, _, _, g1, g2 = bank.arrays()
    p_low = special.expit(g1 - alpha * thetas[:, None])
    p_high = 1.0 - special.expit(g2 - alpha * thetas[:, None])

    out = {}
    for j, tid in enumerate(data.test_ids):
        obs = data.values[mask[:, j], j]
        n_obs = max(obs.size, 1)
        rep_cols = [r[mask[:, j], j] for r in reps]
        out[tid] = PPCResult(
            test_id=tid,
            bin_edges=edges,
            observed=np.histogram(obs, bins=edges, density=True)[0],
            replicated=np.array([np.histogram(c, bins=edges, density=True)[0] for c in rep_cols]),
            observed_boundary=np.array([(obs == 0).mean(), (obs == 1).mean()]),
            replicated_boundary=np.array([[(c == 0).mean(), (c == 1).mean()] for c in rep_cols]),
            expected_boundary=np.array(
                [p_low[mask[:, j], j].sum() / n_obs, p_high[mask[:, j], j].sum() / n_obs]
            ),
        )
    return out


def ppc_rows(ppc: Mapping[str, PPCResult]):
    """Long-format rows ``(test_id, series, bin_lo, bin_hi, density)`` for CSV output."""
    for tid, res in ppc.items():
        lo, hi = res.bin_edges[:-1], res.bin_edges[1:]
        for k in range(lo.size):
            yield (tid, "observed", float(lo[k]), float(hi[k]), float(res.observed[k]))
        for r, rep in enumerate(res.replicated):
            for k in range(lo.size):
                yield (tid, f"rep{r}", float(lo[k]), float(hi[k]), float(rep[k]))
