"""
The truncated linear generator and its exact Gaussian propagation.

States are mapped to real orthonormal coordinates before any matrix work.
For a field component with Hermitian coefficients ``c`` on ``|k| <= m`` the
coordinates are::

    [c_0, sqrt(2) Re c_1 .. sqrt(2) Re c_m, sqrt(2) Im c_1 .. sqrt(2) Im c_m]

(the coefficients of the orthonormal cos/sin basis), so the Euclidean
norm equals the L^2 norm. A full state vector is ``[phi, pi, r]`` with
dimension ``D = 2 (2m + 1) + K``.

In these coordinates the linear system reads::

    phi' = pi
    pi'  = -(1 + k^2) phi - A r
    r'   = A^T pi - r            (+ sqrt(2 T) dW)

where column ``j`` of ``A`` holds the coordinates of the coupling function
``alpha_j`` (projected to the dynamics cutoff).
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import linalg

from .spectral_field import (
    FourierField,
    SystemState,
    apply_B,
    apply_B_inverse,
    check_hermitian,
    field_from_function,
    grid_size,
    hermitian_from_nonnegative,
    inner_product,
    project_low,
    resize,
    wavenumbers,
)

_SQRT2 = np.sqrt(2.0)


# --------------------------------------------------------------------------
# Coupling configuration
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class CouplingConfig:
    """Coupling functions, reservoir temperatures and nonlinearity strength.

    Parameters
    ----------
    alphas : array_like, shape (K, 2*m_alpha + 1)
        Hermitian coefficient arrays of the coupling functions alpha_j.
    temperatures : array_like, shape (K,)
        Nonnegative temperatures T_j (zero gives the deterministic system).
    mu : float
        Nonnegative quartic coupling.
    gamma_check : float, optional
        If given, :meth:`alpha_sobolev_norms` can be used to confirm the
        coupling functions have finite H^gamma norm on the grid.
    """

    alphas: np.ndarray
    temperatures: np.ndarray
    mu: float = 0.0
    gamma_check: float | None = None

    def __post_init__(self):
        alphas = np.array(self.alphas, dtype=complex)
        if alphas.ndim == 1:
            alphas = alphas[None, :]
        temps = np.array(self.temperatures, dtype=float).reshape(-1)
        if alphas.shape[0] < 1:
            raise ValueError("need at least one reservoir (K >= 1)")
        if temps.shape != (alphas.shape[0],):
            raise ValueError(
                f"temperatures has {temps.size} entries but there are {alphas.shape[0]} alphas"
            )
        if np.any(temps < 0) or not np.all(np.isfinite(temps)):
            raise ValueError("temperatures must be finite and nonnegative")
        if not np.isfinite(self.mu) or self.mu < 0:
            raise ValueError(f"mu must be >= 0 (defocusing), got {self.mu}")
        for j, a in enumerate(alphas):
            check_hermitian(a, f"alpha_{j + 1}")
        alphas.setflags(write=False)
        temps.setflags(write=False)
        object.__setattr__(self, "alphas", alphas)
        object.__setattr__(self, "temperatures", temps)
        object.__setattr__(self, "mu", float(self.mu))

    @classmethod
    def from_functions(cls, funcs, temperatures, mu=0.0, m_alpha=64, **kw) -> "CouplingConfig":
        alphas = np.stack([field_from_function(f, m_alpha) for f in funcs])
        return cls(alphas, temperatures, mu, **kw)

    @property
    def n_reservoirs(self) -> int:
        return self.alphas.shape[0]

    @property
    def is_equilibrium(self) -> bool:
        return bool(np.all(self.temperatures == self.temperatures[0]))

    def alpha_coeffs(self, m_grid: int, cutoff: int | None = None) -> np.ndarray:
        """Coupling coefficients on grid ``m_grid``, projected to ``|k| <= cutoff``."""
        a = resize(self.alphas, m_grid)
        if cutoff is not None:
            a = project_low(a, cutoff)
        return a

    def alpha_sobolev_norms(self, gamma: float | None = None) -> np.ndarray:
        from .spectral_field import component_sobolev_norm

        g = self.gamma_check if gamma is None else gamma
        if g is None:
            raise ValueError("no gamma given")
        return component_sobolev_norm(self.alphas, g)

    def with_mu(self, mu: float) -> "CouplingConfig":
        return CouplingConfig(self.alphas, self.temperatures, mu, self.gamma_check)

    def with_temperatures(self, temperatures) -> "CouplingConfig":
        return CouplingConfig(self.alphas, temperatures, self.mu, self.gamma_check)

    def to_dict(self) -> dict:
        return {
            "alphas": [[[float(z.real), float(z.imag)] for z in a] for a in self.alphas],
            "temperatures": [float(t) for t in self.temperatures],
            "mu": self.mu,
            "gamma_check": self.gamma_check,
        }

    def digest(self) -> str:
        """Stable hash of the configuration (hex sha256)."""
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()


# --------------------------------------------------------------------------
# Real coordinates
# --------------------------------------------------------------------------

def state_dim(m_grid: int, n_reservoirs: int) -> int:
    return 2 * (2 * m_grid + 1) + n_reservoirs


def grid_from_dim(dim: int, n_reservoirs: int) -> int:
    n = dim - n_reservoirs
    if n <= 0 or n % 2 or (n // 2) % 2 != 1:
        raise ValueError(f"dimension {dim} is not 2(2m+1)+K for K={n_reservoirs}")
    return (n // 2 - 1) // 2


def component_to_real(coeffs) -> np.ndarray:
    """Hermitian coefficients -> orthonormal real coordinates (same length)."""
    coeffs = np.asarray(coeffs)
    m = grid_size(coeffs)
    pos = coeffs[..., m + 1 :]
    return np.concatenate(
        [coeffs[..., m : m + 1].real, _SQRT2 * pos.real, _SQRT2 * pos.imag], axis=-1
    )


def real_to_component(x) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    m = grid_size(x)
    half = np.empty(x.shape[:-1] + (m + 1,), dtype=complex)
    half[..., 0] = x[..., 0]
    half[..., 1:] = (x[..., 1 : m + 1] + 1j * x[..., m + 1 :]) / _SQRT2
    return hermitian_from_nonnegative(half)


def real_wavenumbers(m: int) -> np.ndarray:
    """|k| for each real coordinate of one field component."""
    k = np.arange(1, m + 1)
    return np.concatenate([[0], k, k])


def state_to_vector(state: SystemState) -> np.ndarray:
    f = state.field
    return np.concatenate(
        [component_to_real(f.phi_hat), component_to_real(f.pi_hat), state.r], axis=-1
    )


def vector_to_state(x, m_grid: int, n_reservoirs: int, time: float = 0.0) -> SystemState:
    x = np.asarray(x, dtype=float)
    n = 2 * m_grid + 1
    if x.shape[-1] != 2 * n + n_reservoirs:
        raise ValueError(f"vector length {x.shape[-1]} != {2 * n + n_reservoirs}")
    return SystemState(
        FourierField(real_to_component(x[..., :n]), real_to_component(x[..., n : 2 * n])),
        x[..., 2 * n :],
        time,
    )


def _component_map(m_from: int, m_to: int):
    k = min(m_from, m_to)
    src = np.concatenate([[0], np.arange(1, k + 1), m_from + np.arange(1, k + 1)])
    dst = np.concatenate([[0], np.arange(1, k + 1), m_to + np.arange(1, k + 1)])
    return src, dst


def embed_vector(x, m_from: int, m_to: int, n_reservoirs: int) -> np.ndarray:
    """Move real-coordinate states between grids (zero-pad up, truncate down)."""
    x = np.asarray(x, dtype=float)
    if m_from == m_to:
        return x.copy()
    src, dst = _component_map(m_from, m_to)
    nf, nt = 2 * m_from + 1, 2 * m_to + 1
    y = np.zeros(x.shape[:-1] + (2 * nt + n_reservoirs,))
    y[..., dst] = x[..., src]
    y[..., nt + dst] = x[..., nf + src]
    y[..., 2 * nt :] = x[..., 2 * nf :]
    return y


def reversal_signs(m_grid: int, n_reservoirs: int, reflect: bool = True) -> np.ndarray:
    """Coordinate signs of ``(phi, pi, r) -> (phi, -pi, r)``, optionally composed with ``x -> -x``.

    The linear and cubic forces are reversed by this map, and the reflection
    is a symmetry whenever every coupling function is even. Both preserve
    the free and Gibbs measures.
    """
    n = 2 * m_grid + 1
    sin = np.concatenate([np.ones(m_grid + 1), -np.ones(m_grid)]) if reflect else np.ones(n)
    return np.concatenate([sin, -sin, np.ones(n_reservoirs)])


def sobolev_weight_vector(m_grid: int, n_reservoirs: int, s: float) -> np.ndarray:
    """Weights ``w`` with ``sum w x^2 = ||(u, r)||_{H^s}^2`` in real coordinates.

    Uses ``||u||_{H^s}^2 = ||phi||_{H^s}^2 + ||pi||_{H^{s-1}}^2``, which is
    exact for real phi, pi (the cross terms cancel between k and -k).
    """
    k2 = 1.0 + real_wavenumbers(m_grid).astype(float) ** 2
    return np.concatenate([k2**s, k2 ** (s - 1.0), np.ones(n_reservoirs)])


def vector_sobolev_norm(x, m_grid: int, n_reservoirs: int, s: float) -> np.ndarray:
    w = sobolev_weight_vector(m_grid, n_reservoirs, s)
    return np.sqrt(np.sum(w * np.asarray(x) ** 2, axis=-1))


def linear_energy(x, m_grid: int, n_reservoirs: int) -> np.ndarray:
    """Quadratic energy ``(||u||_{H^1}^2 + |r|^2) / 2`` of real-coordinate states."""
    return 0.5 * vector_sobolev_norm(x, m_grid, n_reservoirs, 1.0) ** 2


# --------------------------------------------------------------------------
# Generator
# --------------------------------------------------------------------------

def coupling_matrix(cfg: CouplingConfig, m_grid: int, cutoff: int | None = None) -> np.ndarray:
    """Columns are the real coordinates of each (projected) alpha_j; shape (2m+1, K)."""
    return component_to_real(cfg.alpha_coeffs(m_grid, cutoff)).T


def assemble_generator(cfg: CouplingConfig, m_grid: int, cutoff: int | None = None) -> np.ndarray:
    """Dense real matrix of the linear generator L0 = B0 + P.

    ``cutoff`` projects the coupling functions to ``|k| <= cutoff``;
    the free part acts on the whole grid.
    """
    if m_grid < 1:
        raise ValueError("m_grid must be >= 1")
    n = 2 * m_grid + 1
    K = cfg.n_reservoirs
    A = coupling_matrix(cfg, m_grid, cutoff)
    k2 = 1.0 + real_wavenumbers(m_grid).astype(float) ** 2
    L = np.zeros((2 * n + K, 2 * n + K))
    L[:n, n : 2 * n] = np.eye(n)
    L[n : 2 * n, :n] = -np.diag(k2)
    L[n : 2 * n, 2 * n :] = -A
    L[2 * n :, n : 2 * n] = A.T
    L[2 * n :, 2 * n :] = -np.eye(K)
    return L


def generator_action_complex(state: SystemState, cfg: CouplingConfig, cutoff: int | None = None):
    """Time derivative of (u, r) under the noiseless linear system, in complex form.

        du/dt = -i B u - i B^{-1} sum_j alpha_j r_j
        dr/dt = <B alpha, Im u> - r

    Returns ``(du_hat, dr)``. Used to cross-check :func:`assemble_generator`.
    """
    m = state.m_grid
    alphas = cfg.alpha_coeffs(m, cutoff)
    u = state.field.u_hat()
    forcing = np.tensordot(state.r, alphas, axes=([-1], [0]))
    du = -1j * apply_B(u) - 1j * apply_B_inverse(forcing)
    # Im u is the real field B^{-1} pi, with Hermitian coefficients
    im_u = (u - np.conj(u[..., ::-1])) / 2j
    dr = np.real(np.stack([inner_product(apply_B(a), im_u) for a in alphas], axis=-1)) - state.r
    return du, dr


# --------------------------------------------------------------------------
# Exact Gaussian propagator
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class LinearPropagator:
    """One-step exact transition of the linear stochastic system.

    ``x(t + dt) = mean_map @ x(t) + noise_factor @ xi`` with ``xi`` a
    standard Gaussian vector of length ``noise_dim``.
    """

    dt: float
    mean_map: np.ndarray
    noise_factor: np.ndarray
    covariance: np.ndarray
    m_grid: int
    n_reservoirs: int
    cutoff: int | None = None
    cfg_digest: str = ""
    meta: dict = field(default_factory=dict, compare=False)

    @property
    def dim(self) -> int:
        return self.mean_map.shape[0]

    @property
    def noise_dim(self) -> int:
        return self.noise_factor.shape[1]

    @property
    def effective_cutoff(self) -> int:
        return self.m_grid if self.cutoff is None else self.cutoff


def noise_injection(cfg: CouplingConfig, m_grid: int) -> np.ndarray:
    """Diffusion matrix ``v sqrt(2T)``: maps K Brownian increments into r."""
    K = cfg.n_reservoirs
    v = np.zeros((state_dim(m_grid, K), K))
    v[-K:, :] = np.diag(np.sqrt(2.0 * cfg.temperatures))
    return v


def van_loan_covariance(L: np.ndarray, Q: np.ndarray, dt: float):
    """``(exp(dt L), integral_0^dt e^{sL} Q e^{sL^T} ds)`` from one block exponential."""
    D = L.shape[0]
    block = np.zeros((2 * D, 2 * D))
    block[:D, :D] = L
    block[:D, D:] = Q
    block[D:, D:] = -L.T
    E = linalg.expm(dt * block)
    F = E[:D, :D]
    cov = E[:D, D:] @ F.T
    return F, 0.5 * (cov + cov.T)


def psd_factor(cov: np.ndarray, order: np.ndarray, rel_tol: float = 1e-12) -> np.ndarray:
    """Factor ``G`` with ``G G^T ~= cov`` for a rank-deficient PSD matrix.

    Eigenvalues below ``rel_tol * ||cov||`` are clipped to zero, then an
    unpivoted Cholesky sweep in the fixed coordinate ``order`` builds the
    factor, skipping vanishing pivots. The fixed order makes the factor
    canonical: no sign or rotation ambiguity between nearby matrices.
    Returns only the nonzero columns.
    """
    evals, evecs = np.linalg.eigh(cov)
    scale = max(float(np.max(np.abs(evals), initial=0.0)), np.finfo(float).tiny)
    tol = rel_tol * scale
    if evals.min(initial=0.0) < -1e-10 * max(scale, 1.0):
        raise ValueError(f"covariance has a negative eigenvalue {evals.min():.3e}")
    evals = np.where(evals > tol, evals, 0.0)
    C = (evecs * evals) @ evecs.T
    C = C[np.ix_(order, order)]
    D = C.shape[0]
    cols = []
    for j in range(D):
        d = C[j, j]
        if d <= tol:
            continue
        col = np.zeros(D)
        col[j:] = C[j:, j] / np.sqrt(d)
        C[j:, j:] -= np.outer(col[j:], col[j:])
        cols.append(col)
    G = np.zeros((D, len(cols)))
    if cols:
        G[order, :] = np.stack(cols, axis=1)
    return G


def build_propagator(
    L: np.ndarray, cfg: CouplingConfig, dt: float, cutoff: int | None = None
) -> LinearPropagator:
    """Exact one-step map for ``dx = L x dt + v sqrt(2T) dW`` over ``dt``."""
    if not dt > 0:
        raise ValueError(f"dt must be positive, got {dt}")
    if not np.all(np.isfinite(L)):
        raise ValueError("generator has non-finite entries")
    K = cfg.n_reservoirs
    m = grid_from_dim(L.shape[0], K)
    v = noise_injection(cfg, m)
    mean_map, cov = van_loan_covariance(L, v @ v.T, dt)
    if not (np.all(np.isfinite(mean_map)) and np.all(np.isfinite(cov))):
        raise ValueError("propagator has non-finite entries (dt too large?)")
    n = 2 * m + 1
    order = np.concatenate([np.arange(2 * n, 2 * n + K), np.arange(n, 2 * n), np.arange(n)])
    G = psd_factor(cov, order)
    return LinearPropagator(dt, mean_map, G, cov, m, K, cutoff, cfg.digest())


def make_propagator(
    cfg: CouplingConfig, m_grid: int, dt: float, cutoff: int | None = None, cache=None
) -> LinearPropagator:
    """Assemble the generator and build its propagator, optionally via a cache."""
    if cache is not None:
        return cache.get(cfg, m_grid, dt, cutoff)
    return build_propagator(assemble_generator(cfg, m_grid, cutoff), cfg, dt, cutoff)


def propagate(x: np.ndarray, prop: LinearPropagator, xi: np.ndarray | None) -> np.ndarray:
    """Apply one exact step to real-coordinate states ``x`` (batch-first)."""
    y = x @ prop.mean_map.T
    if xi is not None and prop.noise_dim:
        y = y + xi @ prop.noise_factor.T
    return y


def draw_noise(rng: np.random.Generator, batch_shape: tuple, prop: LinearPropagator) -> np.ndarray:
    return rng.standard_normal(batch_shape + (prop.noise_dim,))


def step_linear(state: SystemState, prop: LinearPropagator, rng: np.random.Generator | None) -> SystemState:
    """One exact Gaussian step of the linear system; ``rng=None`` drops the noise."""
    if state.m_grid != prop.m_grid or state.n_reservoirs != prop.n_reservoirs:
        raise ValueError(
            f"state grid (m={state.m_grid}, K={state.n_reservoirs}) does not match propagator "
            f"(m={prop.m_grid}, K={prop.n_reservoirs})"
        )
    x = state_to_vector(state)
    xi = None if rng is None else draw_noise(rng, state.batch_shape, prop)
    y = propagate(x, prop, xi)
    return vector_to_state(y, prop.m_grid, prop.n_reservoirs, state.time + prop.dt)


# --------------------------------------------------------------------------
# Semigroup bound diagnostic
# --------------------------------------------------------------------------

def semigroup_time_grid(t_max: float, per_decade: int = 25, t_min: float = 1e-2) -> np.ndarray:
    """Geometric grid anchored at ``t_min``; grids for different ``t_max`` nest."""
    n = int(np.floor(per_decade * np.log10(t_max / t_min) + 1e-9))
    t = t_min * 10.0 ** (np.arange(n + 1) / per_decade)
    t = t[t < t_max * (1 - 1e-12)]
    return np.concatenate([[0.0], t, [t_max]])


@dataclass
class SemigroupBound:
    s: float
    t_max: float
    sup_ratio: float
    t_at_sup: float
    times: np.ndarray
    ratios: np.ndarray


def check_semigroup_bound(
    L: np.ndarray,
    s: float,
    t_max: float,
    n_reservoirs: int,
    n_samples: int | None = None,
    rng: np.random.Generator | None = None,
    per_decade: int = 25,
) -> SemigroupBound:
    """Largest H^s growth of ``exp(t L)`` over a geometric time grid.

    With ``n_samples=None`` the growth at each time is the exact operator
    norm in the H^s-weighted metric (the sup over all states); otherwise it
    is the max over ``n_samples`` random unit-H^s states.
    """
    if not 0 < s <= 1:
        raise ValueError(f"s must lie in (0, 1], got {s}")
    if t_max <= 0:
        raise ValueError("t_max must be positive")
    m = grid_from_dim(L.shape[0], n_reservoirs)
    w = np.sqrt(sobolev_weight_vector(m, n_reservoirs, s))
    times = semigroup_time_grid(t_max, per_decade)
    if len(times) < 50:
        times = np.unique(np.concatenate([times, np.geomspace(1e-3, t_max, 50)]))
    if n_samples is not None:
        rng = np.random.default_rng() if rng is None else rng
        z = rng.standard_normal((n_samples, L.shape[0]))
        z /= np.linalg.norm(z, axis=1, keepdims=True)
        x0 = z / w  # unit H^s norm
    ratios = np.empty(len(times))
    for i, t in enumerate(times):
        E = linalg.expm(t * L)
        if n_samples is None:
            ratios[i] = np.linalg.norm((w[:, None] * E) / w[None, :], 2)
        else:
            y = x0 @ E.T
            ratios[i] = np.max(np.sqrt(np.sum((w * y) ** 2, axis=1)))
    i = int(np.argmax(ratios))
    return SemigroupBound(s, t_max, float(ratios[i]), float(times[i]), times, ratios)


# --------------------------------------------------------------------------
# Propagator cache
# --------------------------------------------------------------------------

class PropagatorCache:
    """On-disk cache of propagators keyed by (config hash, m_grid, cutoff, dt).

    Entries are ``.npz`` files; a corrupt or missing entry is rebuilt.
    """

    def __init__(self, directory):
        self.directory = Path(directory)
        self.directory.mkdir(parents=True, exist_ok=True)

    def key(self, cfg: CouplingConfig, m_grid: int, dt: float, cutoff: int | None) -> str:
        blob = f"{cfg.digest()}|{m_grid}|{cutoff}|{dt!r}".encode()
        return hashlib.sha256(blob).hexdigest()[:32]

    def get(self, cfg, m_grid, dt, cutoff=None) -> LinearPropagator:
        path = self.directory / f"{self.key(cfg, m_grid, dt, cutoff)}.npz"
        if path.exists():
            try:
                with np.load(path) as z:
                    return LinearPropagator(
                        float(z["dt"]), z["mean_map"], z["noise_factor"], z["covariance"],
                        m_grid, cfg.n_reservoirs, cutoff, cfg.digest(),
                    )
            except (OSError, KeyError, ValueError):
                path.unlink(missing_ok=True)
        prop = build_propagator(assemble_generator(cfg, m_grid, cutoff), cfg, dt, cutoff)
        tmp = path.with_suffix(".tmp.npz")
        np.savez(tmp, dt=prop.dt, mean_map=prop.mean_map,
                 noise_factor=prop.noise_factor, covariance=prop.covariance)
        tmp.replace(path)
        return prop


__all__ = [
    "CouplingConfig",
    "LinearPropagator",
    "PropagatorCache",
    "SemigroupBound",
    "assemble_generator",
    "build_propagator",
    "check_semigroup_bound",
    "component_to_real",
    "coupling_matrix",
    "draw_noise",
    "embed_vector",
    "generator_action_complex",
    "grid_from_dim",
    "linear_energy",
    "make_propagator",
    "noise_injection",
    "propagate",
    "psd_factor",
    "real_to_component",
    "real_wavenumbers",
    "reversal_signs",
    "semigroup_time_grid",
    "sobolev_weight_vector",
    "state_dim",
    "state_to_vector",
    "step_linear",
    "van_loan_covariance",
    "vector_sobolev_norm",
    "vector_to_state",
]
