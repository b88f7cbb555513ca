"""Simulation designs with analytically known estimands.

A latent triple (delta, eps, tau) is jointly normal; treatment take-up under
each instrument arm is a threshold crossing in delta, calibrated so
always-takers, compliers and never-takers have fixed population shares; the
observed covariate is x = delta + eta with independent noise eta.  Because
delta | x is again normal, the conditional compliance probability alpha(x)
and the conditional treatment-effect moments have closed forms, which makes
exact population estimands available for bias and coverage evaluation.

Two conditional treatment-effect objects appear below and differ whenever
tau correlates with the take-up latent:

* ``oracle_tau_of_x`` -- E[tau | X=x], the unconditional conditional-mean
  effect (linear in x).
* ``complier_effect_of_x`` -- E[tau * 1{complier} | X=x], the intent-to-treat
  effect g(x) = alpha(x) * E[tau | complier, X=x].

Estimands (LATE and weighted LATEs) are ratios of integrals of g and alpha
against the x marginal; using E[tau|X=x] in their place would understate
effects by the signal-shrinkage factor of the posterior for delta.  Both are
cross-checked against brute-force Monte Carlo in the tests.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np
from scipy import integrate

from .errors import ConfigError, FactorizationError, NumericalError, WeightError
from .mathcore import RngStream, mvn_sample, std_normal_cdf, std_normal_pdf, std_normal_quantile

__all__ = [
    "DgpConfig",
    "SimSample",
    "PopulationEstimands",
    "build_sigma",
    "dgp_preset",
    "draw_sample",
    "oracle_alpha_of_x",
    "oracle_tau_of_x",
    "complier_effect_of_x",
    "population_estimands",
    "empirical_weighted_estimand",
    "cf_estimand",
    "x_marginal_sd",
    "DGP_PRESETS",
]


@dataclass(frozen=True)
class DgpConfig:
    """All simulation parameters.

    Correlations refer to the latent triple (delta, eps, tau): rho_de links
    take-up and baseline outcome (selection), rho_dt links take-up and the
    treatment effect, rho_te links effect and baseline.  zeta scales
    heteroscedasticity of the untreated outcome in delta; sigma_eta is the
    irreducible noise in the covariate x = delta + eta; s_at and s_nt are the
    always-/never-taker shares; p_z the instrument assignment probability.
    """

    rho_de: float = 0.5
    rho_dt: float = 0.0
    rho_te: float = 0.0
    sigma_tau: float = 0.0
    tau_mean: float = 0.0
    zeta: float = 0.0
    sigma_eta: float = 1.0
    s_at: float = 0.05
    s_nt: float = 0.70
    p_z: float = 0.5
    n: int = 1000

    def __post_init__(self) -> None:
        if self.sigma_eta <= 0:
            raise ConfigError("sigma_eta must be positive", field="sigma_eta")
        if self.sigma_tau < 0:
            raise ConfigError("sigma_tau must be nonnegative", field="sigma_tau")
        if not (0.0 < self.s_at < 1.0 and 0.0 < self.s_nt < 1.0):
            raise ConfigError("shares must lie in (0, 1)", field="s_at/s_nt")
        if self.s_at + self.s_nt >= 1.0:
            raise ConfigError("always- and never-taker shares must leave a positive complier share", field="s_at/s_nt")
        if not 0.0 < self.p_z < 1.0:
            raise ConfigError("p_z must lie in (0, 1)", field="p_z")
        if self.n < 1:
            raise ConfigError("n must be at least 1", field="n")
        for name in ("rho_de", "rho_dt", "rho_te"):
            if abs(getattr(self, name)) > 1.0:
                raise ConfigError(f"{name} must lie in [-1, 1]", field=name)
        build_sigma(self)  # PSD check

    @property
    def complier_share(self) -> float:
        return 1.0 - self.s_at - self.s_nt

    @property
    def threshold_never(self) -> float:
        """delta above this is a taker under assignment (D(1) = 1)."""
        return float(std_normal_quantile(self.s_nt))

    @property
    def threshold_always(self) -> float:
        """delta above this is a taker even without assignment (D(0) = 1)."""
        return float(std_normal_quantile(1.0 - self.s_at))


# DGP presets: 1 constant effect / homoscedastic; 2 effects correlated with
# take-up; 3 and 4 heteroscedastic with positive / negative tilt.
DGP_PRESETS: dict[int, dict[str, float]] = {
    1: {"sigma_tau": 0.0, "rho_dt": 0.0, "zeta": 0.0},
    2: {"sigma_tau": 0.5, "rho_dt": 0.5, "zeta": 0.0},
    3: {"sigma_tau": 0.0, "rho_dt": 0.0, "zeta": 0.25},
    4: {"sigma_tau": 0.0, "rho_dt": 0.0, "zeta": -0.25},
}


def dgp_preset(dgp_id: int, sigma_eta: float = 1.0, n: int = 1000, **overrides) -> DgpConfig:
    """Config for one of the four built-in designs at a given noise level."""
    if dgp_id not in DGP_PRESETS:
        raise ConfigError(f"unknown dgp id {dgp_id}; expected 1..4", field="dgp")
    params: dict = dict(DGP_PRESETS[dgp_id])
    params.update(sigma_eta=sigma_eta, n=n)
    params.update(overrides)
    return DgpConfig(**params)


def build_sigma(cfg: DgpConfig) -> np.ndarray:
    """Latent covariance over (delta, eps, tau); raises ConfigError if indefinite."""
    s_t = cfg.sigma_tau
    sigma = np.array(
        [
            [1.0, cfg.rho_de, cfg.rho_dt * s_t],
            [cfg.rho_de, 1.0, cfg.rho_te * s_t],
            [cfg.rho_dt * s_t, cfg.rho_te * s_t, s_t**2],
        ]
    )
    from .mathcore import cholesky

    try:
        cholesky(sigma)
    except FactorizationError as err:
        raise ConfigError(
            "latent covariance is indefinite for correlations "
            f"(rho_de={cfg.rho_de}, rho_dt={cfg.rho_dt}, rho_te={cfg.rho_te})",
            field="rho",
        ) from err
    return sigma


@dataclass
class SimSample:
    """One simulated dataset, latents retained for diagnostics."""

    x: np.ndarray
    z: np.ndarray
    d: np.ndarray
    y: np.ndarray
    delta: np.ndarray
    tau: np.ndarray
    eta: np.ndarray
    d0: np.ndarray
    d1: np.ndarray


def draw_sample(cfg: DgpConfig, rng: RngStream) -> SimSample:
    """Draw one dataset of size cfg.n.

    Substreams: latents on child(0), covariate noise on child(1), assignment
    on child(2) -- so the same seed reproduces the same sample bit for bit.
    With sigma_tau == 0 the effect is the constant tau_mean and the
    degenerate covariance row is dropped before factorization.
    """
    n = cfg.n
    if cfg.sigma_tau > 0.0:
        latents = mvn_sample(np.zeros(3), build_sigma(cfg), n, rng.child(0))
        delta, eps, tau_dev = latents[:, 0], latents[:, 1], latents[:, 2]
    else:
        sigma2 = np.array([[1.0, cfg.rho_de], [cfg.rho_de, 1.0]])
        latents = mvn_sample(np.zeros(2), sigma2, n, rng.child(0))
        delta, eps = latents[:, 0], latents[:, 1]
        tau_dev = np.zeros(n)
    tau = cfg.tau_mean + tau_dev
    eta = cfg.sigma_eta * rng.child(1).generator().standard_normal(n)
    z = (rng.child(2).generator().random(n) < cfg.p_z).astype(float)
    d1 = (delta > cfg.threshold_never).astype(float)
    d0 = (delta > cfg.threshold_always).astype(float)
    d = d0 * (1.0 - z) + d1 * z
    y = d * tau + (1.0 + cfg.zeta * delta) * eps
    return SimSample(x=delta + eta, z=z, d=d, y=y, delta=delta, tau=tau, eta=eta, d0=d0, d1=d1)


def x_marginal_sd(cfg: DgpConfig) -> float:
    """Standard deviation of the covariate marginal, sqrt(1 + sigma_eta^2)."""
    return float(np.sqrt(1.0 + cfg.sigma_eta**2))


def _posterior_params(x, cfg: DgpConfig):
    """Mean and sd of delta | X = x (normal-normal updating)."""
    x = np.asarray(x, dtype=float)
    var_x = 1.0 + cfg.sigma_eta**2
    mean = x / var_x
    sd = np.sqrt(cfg.sigma_eta**2 / var_x)
    return mean, sd


def oracle_alpha_of_x(x, cfg: DgpConfig):
    """Conditional compliance probability alpha(x) = P(complier | X = x).

    Equals Phi((t_a - m)/s) - Phi((t_n - m)/s) for the taker thresholds t_n
    < t_a and the posterior moments (m, s) of delta given x.  Values lie in
    [0, 1] and integrate to the complier share under the x marginal.
    """
    mean, sd = _posterior_params(x, cfg)
    upper = (cfg.threshold_always - mean) / sd
    lower = (cfg.threshold_never - mean) / sd
    out = std_normal_cdf(upper) - std_normal_cdf(lower)
    return float(out) if np.isscalar(x) else out


def oracle_tau_of_x(x, cfg: DgpConfig):
    """Conditional mean effect E[tau | X = x] = tau_mean + rho_dt sigma_tau x / (1 + sigma_eta^2).

    Note this conditions on x only; see :func:`complier_effect_of_x` for the
    complier-weighted object that enters the LATE-type estimands.
    """
    x = np.asarray(x, dtype=float)
    out = cfg.tau_mean + cfg.rho_dt * cfg.sigma_tau * x / (1.0 + cfg.sigma_eta**2)
    return float(out) if out.ndim == 0 else out


def complier_effect_of_x(x, cfg: DgpConfig):
    """Intent-to-treat effect g(x) = E[tau * 1{complier} | X = x].

    With delta | x ~ N(m, s^2) and complier band (t_n, t_a], the truncated
    first moment gives

        g(x) = tau_mean * alpha(x)
             + rho_dt sigma_tau * (m alpha(x) + s (phi(l) - phi(u)))

    for l = (t_n - m)/s, u = (t_a - m)/s.  The ratio g(x) / alpha(x) is the
    complier-conditional effect E[tau | complier, X = x]; numerator form is
    kept to avoid dividing by vanishing tail compliance.
    """
    mean, sd = _posterior_params(x, cfg)
    upper = (cfg.threshold_always - mean) / sd
    lower = (cfg.threshold_never - mean) / sd
    alpha = std_normal_cdf(upper) - std_normal_cdf(lower)
    partial_first_moment = mean * alpha + sd * (std_normal_pdf(lower) - std_normal_pdf(upper))
    out = cfg.tau_mean * alpha + cfg.rho_dt * cfg.sigma_tau * partial_first_moment
    return float(out) if np.isscalar(x) else out


@dataclass(frozen=True)
class PopulationEstimands:
    """LATE, a weighted LATE, and the complier share, with the method used."""

    late: float
    weighted_late: float
    complier_share: float
    method: str


def _quad(fn, cfg: DgpConfig) -> float:
    sd = x_marginal_sd(cfg)
    out = integrate.quad(fn, -10.0 * sd, 10.0 * sd, epsabs=1e-9, epsrel=1e-9, limit=400, full_output=1)
    if len(out) > 3:
        raise NumericalError(f"quadrature failed: {out[3]}")
    val, abserr = out[0], out[1]
    if abserr > 1e-6 * max(abs(val), 1.0):
        raise NumericalError(f"quadrature error {abserr:.2e} too large for value {val:.6e}")
    return float(val)


def _resolve_weight_fn(cfg: DgpConfig, weight_kind):
    if weight_kind == "unit":
        return lambda x: np.ones_like(np.asarray(x, dtype=float))
    if weight_kind == "oracle_alpha":
        return lambda x: oracle_alpha_of_x(x, cfg)
    if callable(weight_kind):
        return weight_kind
    raise ValueError(f"weight_kind must be 'unit', 'oracle_alpha', or a callable, got {weight_kind!r}")


def population_estimands(
    cfg: DgpConfig,
    weight_kind="unit",
    method: str = "quadrature",
    rng: RngStream | None = None,
    m_draws: int = 10_000_000,
) -> PopulationEstimands:
    """Population LATE and w-weighted LATE for a weight function of x.

    quadrature (default): one-dimensional adaptive integration of
    g(x) and alpha(x) products against the x marginal over +/- 10 sd.
    oracle_mc: brute-force draws of the latents; the LATE is then the plain
    mean of realized effects among compliers and the weighted LATE the
    w(x)-weighted complier mean, which provides an implementation-independent
    cross-check of the closed forms.
    """
    weight_fn = _resolve_weight_fn(cfg, weight_kind)
    if method == "quadrature":
        sd = x_marginal_sd(cfg)

        def marginal(x):
            return std_normal_pdf(np.asarray(x) / sd) / sd

        alpha_mass = _quad(lambda x: oracle_alpha_of_x(x, cfg) * marginal(x), cfg)
        effect_mass = _quad(lambda x: complier_effect_of_x(x, cfg) * marginal(x), cfg)
        w_alpha = _quad(lambda x: weight_fn(x) * oracle_alpha_of_x(x, cfg) * marginal(x), cfg)
        w_effect = _quad(lambda x: weight_fn(x) * complier_effect_of_x(x, cfg) * marginal(x), cfg)
        if alpha_mass <= 0 or w_alpha <= 0:
            raise WeightError("weight function annihilates the complier population")
        return PopulationEstimands(
            late=effect_mass / alpha_mass,
            weighted_late=w_effect / w_alpha,
            complier_share=alpha_mass,
            method="quadrature",
        )
    if method == "oracle_mc":
        if rng is None:
            raise ValueError("oracle_mc requires an RngStream")
        gen = rng.generator()
        cov_dt = cfg.rho_dt * cfg.sigma_tau
        delta = gen.standard_normal(m_draws)
        if cfg.sigma_tau > 0:
            resid_sd = np.sqrt(max(cfg.sigma_tau**2 - cov_dt**2, 0.0))
            tau = cfg.tau_mean + cov_dt * delta + resid_sd * gen.standard_normal(m_draws)
        else:
            tau = np.full(m_draws, cfg.tau_mean)
        x = delta + cfg.sigma_eta * gen.standard_normal(m_draws)
        compl = (delta > cfg.threshold_never) & (delta <= cfg.threshold_always)
        w = np.asarray(weight_fn(x[compl]), dtype=float)
        if not w.sum() > 0:
            raise WeightError("weight function annihilates the complier draws")
        return PopulationEstimands(
            late=float(tau[compl].mean()),
            weighted_late=float((w * tau[compl]).sum() / w.sum()),
            complier_share=float(compl.mean()),
            method="oracle_mc",
        )
    raise ValueError(f"unknown method {method!r}")


def empirical_weighted_estimand(x: np.ndarray, w: np.ndarray, cfg: DgpConfig) -> float:
    """Sample analogue sum_i w_i g(x_i) / sum_i w_i alpha(x_i).

    This is the weighted-LATE target induced by realized weights on a
    realized covariate draw (used for in-sample weight estimates, whose
    target varies with the sample).
    """
    x = np.asarray(x, dtype=float)
    w = np.asarray(w, dtype=float)
    den = float((w * oracle_alpha_of_x(x, cfg)).sum())
    if den <= 0:
        raise WeightError("weights put no mass on compliers")
    num = float((w * complier_effect_of_x(x, cfg)).sum())
    return num / den


def cf_estimand(fitted_models, cfg: DgpConfig, m_oracle: int, rng: RngStream) -> float:
    """Hybrid weighted-LATE target induced by per-fold weight models.

    Evaluates, on a fresh draw of m_oracle covariate values, the fold
    average of E[g(X) w_j(X)] over the fold average of E[alpha(X) w_j(X)],
    where w_j is the positive part of each fold model's prediction (the same
    function the estimator weights by).
    """
    if m_oracle < 100_000:
        raise ValueError("m_oracle must be at least 1e5 for a usable oracle draw")
    if not fitted_models:
        raise ValueError("need at least one fitted model")
    x = x_marginal_sd(cfg) * rng.generator().standard_normal(m_oracle)
    alpha = oracle_alpha_of_x(x, cfg)
    effect = complier_effect_of_x(x, cfg)
    num = 0.0
    den = 0.0
    for model in fitted_models:
        w = np.maximum(np.asarray(model.predict(x), dtype=float), 0.0)
        num += float((effect * w).mean())
        den += float((alpha * w).mean())
    if den <= 0:
        raise WeightError("fold weight models put no mass on compliers")
    return num / den
