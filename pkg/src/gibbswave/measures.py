"""
Gaussian free measure, Gibbs reweighting, and Monte Carlo estimators.

In the orthonormal real coordinates of :mod:`gibbswave.linear_system`
the free measure is a centered product Gaussian::

    phi coordinate at |k| : variance T / (1 + k^2)
    pi coordinate         : variance T
    r_j                   : variance T_j

which in Hermitian coefficients means ``phi_hat_0 ~ N(0, T)``,
``Re phi_hat_k, Im phi_hat_k ~ N(0, T / (2 (1 + k^2)))`` for k >= 1, and
likewise for pi without the ``1 + k^2`` factor. The Gibbs measures weight
this by ``exp(-(mu / 4T) integral phi_M^4 dx)``.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from .linear_system import real_wavenumbers, state_dim, state_to_vector, vector_to_state
from .spectral_field import SystemState, project_low, quartic_integral, sobolev_weights

FULL = "full"


def nu0_scales(T: float, m_grid: int, temperatures) -> np.ndarray:
    """Standard deviations of the free measure in real coordinates."""
    k2 = 1.0 + real_wavenumbers(m_grid).astype(float) ** 2
    temps = np.asarray(temperatures, dtype=float).reshape(-1)
    return np.sqrt(np.concatenate([T / k2, np.full(k2.size, T), temps]))


def sample_nu0_vectors(T: float, m_grid: int, K: int, rng: np.random.Generator,
                       size: tuple = (), temperatures=None) -> np.ndarray:
    temps = np.full(K, T) if temperatures is None else temperatures
    scale = nu0_scales(T, m_grid, temps)
    return rng.standard_normal(tuple(size) + (state_dim(m_grid, K),)) * scale


def sample_nu0(T: float, m_grid: int, K: int, rng: np.random.Generator,
               size=None, temperatures=None) -> SystemState:
    """Exact draws from the free Gaussian measure.

    ``size`` adds leading batch axes. ``temperatures`` overrides the
    reservoir variances (default: all equal to ``T``).
    """
    if T < 0:
        raise ValueError("temperature must be nonnegative")
    size = () if size is None else (size,) if np.isscalar(size) else tuple(size)
    x = sample_nu0_vectors(T, m_grid, K, rng, size, temperatures)
    return vector_to_state(x, m_grid, K)


def expected_u_norm_sq(T: float, m_grid: int, s: float) -> float:
    """``2T sum_{|k| <= m} (1 + k^2)^(s-1)``, the free-measure mean of ||u||_{H^s}^2."""
    return float(2.0 * T * np.sum(sobolev_weights(m_grid, s - 1.0)))


def _phi_coeffs(x: np.ndarray, m: int) -> np.ndarray:
    from .linear_system import real_to_component

    return real_to_component(x[..., : 2 * m + 1])


def quartic_action_vector(x, m: int, mu: float, T: float, reweight_cutoff=FULL) -> np.ndarray:
    x = np.asarray(x)
    if mu == 0:
        return np.zeros(x.shape[:-1])
    phi = _phi_coeffs(x, m)
    if reweight_cutoff != FULL and reweight_cutoff is not None and reweight_cutoff < m:
        phi = phi[..., m - reweight_cutoff : m + reweight_cutoff + 1]
    return (mu / (4.0 * T)) * quartic_integral(phi)


def quartic_action(state: SystemState, mu: float, T: float, reweight_cutoff=FULL) -> np.ndarray:
    """``(mu / 4T) integral (P_M phi)^4 dx``; ``reweight_cutoff="full"`` uses all of phi."""
    phi = state.field.phi_hat
    if reweight_cutoff != FULL and reweight_cutoff is not None:
        phi = project_low(phi, reweight_cutoff)
    if mu == 0:
        return np.zeros(state.batch_shape)
    return (mu / (4.0 * T)) * quartic_integral(phi)


# --------------------------------------------------------------------------
# Independence Metropolis
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class GibbsSampler:
    """Independence Metropolis sampler for the Gibbs measure nu_M.

    Proposals are fresh free-measure draws, accepted with probability
    ``min(1, exp(action(current) - action(proposal)))``.
    """

    temperature: float
    mu: float
    m_grid: int
    reweight_cutoff: int | str = FULL
    n_reservoirs: int = 1
    seed: int = 0

    def __post_init__(self):
        if not self.temperature > 0:
            raise ValueError("temperature must be positive")
        if self.mu < 0:
            raise ValueError("mu must be >= 0")
        rc = self.reweight_cutoff
        if rc != FULL and not (0 <= int(rc) <= self.m_grid):
            raise ValueError(f"reweight_cutoff must be 'full' or in [0, {self.m_grid}]")

    def action(self, x) -> np.ndarray:
        return quartic_action_vector(x, self.m_grid, self.mu, self.temperature, self.reweight_cutoff)

    def propose(self, rng, size) -> np.ndarray:
        return sample_nu0_vectors(self.temperature, self.m_grid, self.n_reservoirs, rng, size)


@dataclass
class GibbsSamples:
    vectors: np.ndarray  # (n_chains, n_per_chain, D)
    actions: np.ndarray  # (n_chains, n_per_chain)
    acceptance_rate: float
    m_grid: int
    n_reservoirs: int

    @property
    def n_samples(self) -> int:
        return self.actions.size

    def states(self) -> SystemState:
        """All samples as one batched state, chain-major order."""
        x = self.vectors.reshape(-1, self.vectors.shape[-1])
        return vector_to_state(x, self.m_grid, self.n_reservoirs)

    def ess(self) -> float:
        return effective_sample_size(self.actions)

    def split_rhat(self) -> float:
        return split_rhat(self.actions)


def sample_gibbs(sampler: GibbsSampler, n_samples: int, burn_in: int = 1000,
                 rng: np.random.Generator | None = None, n_chains: int = 1,
                 thin: int = 1) -> GibbsSamples:
    """Run ``n_chains`` independence-Metropolis chains in lockstep.

    Each chain contributes ``n_samples // n_chains`` draws after
    ``burn_in`` sweeps, keeping every ``thin``-th state. Chains start from
    a free-measure draw.
    """
    if n_samples < 1:
        raise ValueError("n_samples must be >= 1")
    if n_samples % n_chains:
        raise ValueError("n_samples must be a multiple of n_chains")
    rng = np.random.default_rng(sampler.seed) if rng is None else rng
    per_chain = n_samples // n_chains
    x = sampler.propose(rng, (n_chains,))
    a = sampler.action(x)
    n_acc = 0
    n_prop = 0
    out_x = np.empty((n_chains, per_chain, x.shape[-1]))
    out_a = np.empty((n_chains, per_chain))
    total = burn_in + per_chain * thin
    kept = 0
    for it in range(total):
        y = sampler.propose(rng, (n_chains,))
        b = sampler.action(y)
        u = rng.random(n_chains)
        accept = np.log(u) < (a - b)
        x = np.where(accept[:, None], y, x)
        a = np.where(accept, b, a)
        n_acc += int(accept.sum())
        n_prop += n_chains
        if it >= burn_in and (it - burn_in) % thin == thin - 1:
            out_x[:, kept] = x
            out_a[:, kept] = a
            kept += 1
    rate = n_acc / n_prop if n_prop else 1.0
    if rate < 0.01:
        warnings.warn(
            f"acceptance rate {rate:.3%} is below 1%; mu/T is too large for this grid",
            RuntimeWarning,
            stacklevel=2,
        )
    return GibbsSamples(out_x, out_a, rate, sampler.m_grid, sampler.n_reservoirs)


def gibbs_initial_vectors(sampler: GibbsSampler, rngs, burn_in: int) -> np.ndarray:
    """One independent chain per generator in ``rngs``; returns the final states.

    Proposals for chain ``i`` come only from ``rngs[i]``, so the result for a
    given chain does not depend on how chains are grouped.
    """
    D = state_dim(sampler.m_grid, sampler.n_reservoirs)
    scale = nu0_scales(sampler.temperature, sampler.m_grid, np.full(sampler.n_reservoirs, sampler.temperature))
    z = np.stack([g.standard_normal((burn_in + 1, D)) for g in rngs], axis=1)
    u = np.stack([g.random(burn_in) for g in rngs], axis=1)
    x = z[0] * scale
    a = sampler.action(x)
    for it in range(burn_in):
        y = z[it + 1] * scale
        b = sampler.action(y)
        accept = np.log(u[it]) < (a - b)
        x = np.where(accept[:, None], y, x)
        a = np.where(accept, b, a)
    return x


def autocorrelation(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=float) - np.mean(x)
    n = x.size
    f = np.fft.rfft(x, n=2 * n)
    ac = np.fft.irfft(f * np.conj(f))[:n]
    return ac / ac[0] if ac[0] > 0 else np.zeros(n)


def effective_sample_size(chains: np.ndarray) -> float:
    """ESS from the action trace, using Geyer's initial positive sequence."""
    chains = np.atleast_2d(chains)
    n_chains, n = chains.shape
    if n < 4:
        return float(chains.size)
    rho = np.mean([autocorrelation(c) for c in chains], axis=0)
    tau = 1.0
    for t in range(1, n - 1, 2):
        pair = rho[t] + rho[t + 1]
        if pair <= 0:
            break
        tau += 2.0 * pair
    return float(chains.size / tau)


def split_rhat(chains: np.ndarray) -> float:
    """Split-R-hat over chains of a scalar trace."""
    chains = np.atleast_2d(chains)
    n = chains.shape[1] // 2
    if n < 2:
        return float("nan")
    halves = np.concatenate([chains[:, :n], chains[:, n : 2 * n]], axis=0)
    W = np.mean(np.var(halves, axis=1, ddof=1))
    B = n * np.var(np.mean(halves, axis=1), ddof=1)
    if W == 0:
        return 1.0
    var_plus = (n - 1) / n * W + B / n
    return float(np.sqrt(var_plus / W))


# --------------------------------------------------------------------------
# Partition functions and reweighting
# --------------------------------------------------------------------------

def jackknife_mean(w: np.ndarray) -> tuple[float, float]:
    """Delete-one jackknife estimate and standard error of a mean."""
    w = np.asarray(w, dtype=float)
    n = w.size
    total = w.sum()
    loo = (total - w) / (n - 1)
    est = total / n
    se = np.sqrt((n - 1) / n * np.sum((loo - loo.mean()) ** 2))
    return float(est), float(se)


def estimate_Z(mu: float, T: float, m_grid: int, reweight_cutoff=FULL, n: int = 10_000,
               rng: np.random.Generator | None = None) -> tuple[float, float]:
    """Monte Carlo ``Z_M = E_nu0[exp(-action)]`` with a jackknife standard error."""
    if n < 1000:
        raise ValueError("n must be >= 1000")
    rng = np.random.default_rng() if rng is None else rng
    x = sample_nu0_vectors(T, m_grid, 1, rng, (n,))
    w = np.exp(-quartic_action_vector(x, m_grid, mu, T, reweight_cutoff))
    return jackknife_mean(w)


def estimate_Z_family(mu: float, T: float, m_grid: int, cutoffs, n: int = 10_000,
                      rng: np.random.Generator | None = None) -> dict:
    """``Z_M`` for several cutoffs from common free-measure draws.

    Returns ``{M: (estimate, se)}`` plus ``weights`` (the per-draw factors),
    so differences between cutoffs can be assessed with paired errors.
    """
    rng = np.random.default_rng() if rng is None else rng
    x = sample_nu0_vectors(T, m_grid, 1, rng, (n,))
    weights = {M: np.exp(-quartic_action_vector(x, m_grid, mu, T, M)) for M in cutoffs}
    out = {M: jackknife_mean(w) for M, w in weights.items()}
    out["weights"] = weights
    return out


def importance_estimate(values: np.ndarray, log_weights: np.ndarray) -> tuple[float, float]:
    """Self-normalized importance estimate of a mean and its delta-method error."""
    lw = np.asarray(log_weights) - np.max(log_weights)
    w = np.exp(lw)
    wn = w / w.sum()
    est = float(np.sum(wn * values))
    se = float(np.sqrt(np.sum(wn**2 * (values - est) ** 2)))
    return est, se


# --------------------------------------------------------------------------
# Tightness
# --------------------------------------------------------------------------

@dataclass
class TightnessRow:
    cutoff: int
    beta: float
    tail_mass: float
    tail_se: float
    Z: float
    Z_se: float
    bound: float
    within_bound: bool


@dataclass
class TightnessTable:
    s: float
    rows: list

    @property
    def all_within_bound(self) -> bool:
        return all(r.within_bound for r in self.rows)

    def masses(self, cutoff: int) -> np.ndarray:
        return np.array([r.tail_mass for r in self.rows if r.cutoff == cutoff])


def tightness_report(mu: float, T: float, cutoffs, s: float, betas, n: int = 20_000,
                     rng: np.random.Generator | None = None, m_grid: int | None = None,
                     K: int = 1, n_sigma: float = 3.0) -> TightnessTable:
    """Tail masses ``nu_M{||u||_{H^s} > beta}`` against the Cauchy-Schwarz bound.

    Masses are self-normalized importance estimates over common free-measure
    draws on grid ``m_grid`` (default: the largest cutoff). The bound is
    ``(E_nu0 ||u||^2)^(1/2) / (beta Z_M)`` with the exact free-measure second
    moment (field part plus ``K T`` for the reservoirs) and the estimated Z_M.
    """
    if not s < 0.5:
        raise ValueError(f"tightness needs s < 1/2, got {s}")
    cutoffs = list(cutoffs)
    m = max(cutoffs) if m_grid is None else m_grid
    rng = np.random.default_rng() if rng is None else rng
    x = sample_nu0_vectors(T, m, K, rng, (n,))
    from .linear_system import vector_sobolev_norm

    norms = vector_sobolev_norm(x, m, K, s)
    second_moment = expected_u_norm_sq(T, m, s) + K * T
    rows = []
    for M in cutoffs:
        la = -quartic_action_vector(x, m, mu, T, M)
        Z, Z_se = jackknife_mean(np.exp(la))
        for beta in betas:
            ind = (norms > beta).astype(float)
            mass, se = importance_estimate(ind, la)
            bound = np.sqrt(second_moment) / (beta * Z)
            rows.append(TightnessRow(M, float(beta), mass, se, Z, Z_se, float(bound),
                                     bool(mass <= bound + n_sigma * se)))
    return TightnessTable(s, rows)
