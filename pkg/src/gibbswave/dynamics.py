"""
Nonlinear Galerkin dynamics with a Strang splitting integrator.

One step of size ``dt`` is::

    exact linear-stochastic map over dt/2
    kick       pi <- pi - dt * mu * P_M (phi_M ** 3)
    exact linear-stochastic map over dt/2

Every sub-flow is exact (the kick leaves phi unchanged), so the only
discretization error is the splitting error. Heavy loops work on real
coordinate vectors (see :mod:`gibbswave.linear_system`) with a leading
batch axis; :class:`SystemState` objects are built only at the edges.
"""

from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Mapping

import numpy as np
from scipy import fft as sfft

from .linear_system import (
    CouplingConfig,
    LinearPropagator,
    linear_energy,
    make_propagator,
    propagate,
    real_to_component,
    sobolev_weight_vector,
    state_to_vector,
    vector_to_state,
)
from .spectral_field import (
    SQRT2PI,
    FourierField,
    SystemState,
    apply_B,
    cubic,
    dealias_size,
    inner_product,
    project_high,
    project_low,
    quartic_integral,
    sobolev_norm,
)

BLOWUP_THRESHOLD = 1e12
_SQRT2 = np.sqrt(2.0)


class BlowUpError(FloatingPointError):
    """Raised when a trajectory leaves the finite range; carries the failure time."""

    def __init__(self, time: float, message: str = ""):
        self.time = time
        super().__init__(message or f"trajectory blew up at t={time:.6g}")


class ContractionError(RuntimeError):
    def __init__(self, ratio: float, iteration: int):
        self.ratio = ratio
        self.iteration = iteration
        super().__init__(
            f"Picard iteration is not contracting (ratio {ratio:.3g} >= 1 at iteration "
            f"{iteration}); t_span is too large for this data size"
        )


# --------------------------------------------------------------------------
# Nonlinear force on real coordinates
# --------------------------------------------------------------------------

def low_mode_index(m: int, cutoff: int) -> np.ndarray:
    """Positions of the ``|k| <= cutoff`` entries inside one real component."""
    k = np.arange(1, cutoff + 1)
    return np.concatenate([[0], k, m + k])


def cubic_force(phi_real: np.ndarray, m: int, cutoff: int, n_pad: int | None = None) -> np.ndarray:
    """Real coordinates of ``P_M (phi_M ** 3)`` on the full grid ``m``.

    Only the ``|k| <= cutoff`` part of phi is used and returned; the
    product is computed alias-free on ``n_pad >= 4*cutoff + 1`` points.
    """
    M = cutoff
    n = dealias_size(M) if n_pad is None else n_pad
    idx = low_mode_index(m, M)
    y = phi_real[..., idx]
    half = np.zeros(y.shape[:-1] + (n // 2 + 1,), dtype=complex)
    half[..., 0] = y[..., 0]
    half[..., 1 : M + 1] = (y[..., 1 : M + 1] + 1j * y[..., M + 1 :]) / _SQRT2
    vals = sfft.irfft(half, n=n, axis=-1) * (n / SQRT2PI)
    h = sfft.rfft(vals**3, axis=-1)[..., : M + 1] * (SQRT2PI / n)
    out = np.zeros_like(phi_real)
    out[..., idx] = np.concatenate(
        [h[..., :1].real, _SQRT2 * h[..., 1:].real, _SQRT2 * h[..., 1:].imag], axis=-1
    )
    return out


def energy_vector(x, m: int, K: int, mu: float, cutoff: int | None = None) -> np.ndarray:
    """Energy of real-coordinate states; the quartic term uses phi_M."""
    e = linear_energy(x, m, K)
    if mu:
        phi = real_to_component(np.asarray(x)[..., : 2 * m + 1])
        if cutoff is not None and cutoff < m:
            phi = project_low(phi, cutoff)
        e = e + 0.25 * mu * quartic_integral(phi)
    return e


def energy(state: SystemState, mu: float, cutoff: int | None = None) -> np.ndarray:
    """``||u||_{H^1}^2 / 2 + |r|^2 / 2 + (mu/4) integral phi^4``.

    ``cutoff`` replaces phi by its projection on ``|k| <= cutoff`` in the
    quartic term (the conserved quantity of the cut-off system).
    """
    return energy_vector(state_to_vector(state), state.m_grid, state.n_reservoirs, mu, cutoff)


# --------------------------------------------------------------------------
# Splitting integrator
# --------------------------------------------------------------------------

class SplittingIntegrator:
    """Strang splitting for the cut-off system on a fixed grid.

    Parameters
    ----------
    cfg : CouplingConfig
    m_grid : int
        Representation grid.
    dt : float
        Full step; the linear propagator is built for ``dt / 2``.
    cutoff : int, optional
        Galerkin cutoff M <= m_grid applied to alpha and the nonlinearity.
    """

    def __init__(self, cfg: CouplingConfig, m_grid: int, dt: float, cutoff: int | None = None,
                 cache=None, half_prop: LinearPropagator | None = None):
        cutoff = m_grid if cutoff is None else cutoff
        if not 0 <= cutoff <= m_grid:
            raise ValueError(f"cutoff M={cutoff} must lie in [0, m_grid={m_grid}]")
        self.cfg = cfg
        self.m = m_grid
        self.K = cfg.n_reservoirs
        self.dt = float(dt)
        self.cutoff = cutoff
        self.mu = cfg.mu
        if half_prop is None:
            half_prop = make_propagator(cfg, m_grid, dt / 2, cutoff, cache)
        elif not np.isclose(2 * half_prop.dt, dt, rtol=1e-14, atol=0):
            raise ValueError("half_prop.dt must equal dt / 2")
        self.half_prop = half_prop
        self.n_pad = dealias_size(cutoff)
        self._pi = slice(2 * m_grid + 1, 2 * (2 * m_grid + 1))

    @property
    def noise_dim(self) -> int:
        return self.half_prop.noise_dim

    def kick(self, x: np.ndarray, h: float) -> np.ndarray:
        if self.mu == 0.0:
            return x
        n = 2 * self.m + 1
        force = cubic_force(x[..., :n], self.m, self.cutoff, self.n_pad)
        x = x.copy()
        x[..., self._pi] -= (h * self.mu) * force
        return x

    def step(self, x: np.ndarray, xi: np.ndarray | None) -> np.ndarray:
        """Advance states by one step; ``xi`` has shape ``(..., 2, noise_dim)`` or is None."""
        a = None if xi is None else xi[..., 0, :]
        b = None if xi is None else xi[..., 1, :]
        x = propagate(x, self.half_prop, a)
        x = self.kick(x, self.dt)
        return propagate(x, self.half_prop, b)

    def draw(self, rng: np.random.Generator, batch_shape: tuple = ()) -> np.ndarray:
        """Noise for one step: two half-step innovations, drawn in order."""
        return rng.standard_normal(batch_shape + (2, self.noise_dim))

    def check(self, x: np.ndarray, time: float) -> None:
        if not np.all(np.isfinite(x)) or np.max(np.abs(x), initial=0.0) > BLOWUP_THRESHOLD:
            raise BlowUpError(time)

    def integrate(self, x0: np.ndarray, n_steps: int, noise=None, stride: int = 1,
                  observe: Callable | None = None, t0: float = 0.0):
        """Run ``n_steps`` steps from ``x0``.

        ``noise`` is None (deterministic), a Generator, or an array of shape
        ``(n_steps, ..., 2, noise_dim)``. Every ``stride`` steps (and at the
        start) ``observe(x, t)`` is called if given, else the state is kept.
        Returns ``(times, records)``.
        """
        x = np.array(x0, dtype=float)
        batch = x.shape[:-1]
        times, records = [], []

        def record(t):
            times.append(t)
            records.append(x.copy() if observe is None else observe(x, t))

        record(t0)
        for n in range(n_steps):
            if noise is None:
                xi = None
            elif isinstance(noise, np.random.Generator):
                xi = self.draw(noise, batch)
            else:
                xi = noise[n]
            x = self.step(x, xi)
            t = t0 + (n + 1) * self.dt
            self.check(x, t)
            if (n + 1) % stride == 0:
                record(t)
        return np.array(times), records


def step_nonlinear(state: SystemState, half_prop: LinearPropagator, cfg: CouplingConfig,
                   rng: np.random.Generator | None) -> SystemState:
    """One Strang step of size ``2 * half_prop.dt``.

    ``half_prop`` must be built for ``dt / 2`` with the cutoff of the run;
    the noise for the two half steps is drawn from ``rng`` in order, so
    with ``mu = 0`` this matches two :func:`step_linear` calls.
    """
    if state.m_grid != half_prop.m_grid:
        raise ValueError("state grid does not match propagator grid")
    integ = SplittingIntegrator(cfg, half_prop.m_grid, 2 * half_prop.dt,
                                half_prop.effective_cutoff, half_prop=half_prop)
    x = state_to_vector(state)
    if rng is None:
        xi = None
    else:
        xi = np.stack([rng.standard_normal(state.batch_shape + (integ.noise_dim,))
                       for _ in range(2)], axis=-2)
    y = integ.step(x, xi)
    t = state.time + integ.dt
    integ.check(y, t)
    return vector_to_state(y, integ.m, integ.K, t)


# --------------------------------------------------------------------------
# Picard iteration of the Duhamel map
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class NoisePath:
    """Pre-drawn innovations: ``xi[n, h]`` drives half step ``h`` of step ``n``.

    Each innovation is a standard Gaussian vector fed through the noise
    factor of the half-step propagator, so the path defines the Brownian
    forcing exactly in law and is shared by the Picard solver and the
    splitting integrator.
    """

    dt: float
    xi: np.ndarray

    @classmethod
    def draw(cls, rng: np.random.Generator, n_steps: int, dt: float, noise_dim: int) -> "NoisePath":
        return cls(dt, rng.standard_normal((n_steps, 2, noise_dim)))

    @property
    def n_steps(self) -> int:
        return self.xi.shape[0]


@dataclass
class PicardResult:
    times: np.ndarray
    trajectory: np.ndarray  # (n_times, D) real coordinates
    iterations: int
    distances: list
    ratios: list
    contraction_ratio: float
    m_grid: int
    n_reservoirs: int

    def state(self, i: int = -1) -> SystemState:
        return vector_to_state(self.trajectory[i], self.m_grid, self.n_reservoirs, self.times[i])


def picard_solve(initial: SystemState, cfg: CouplingConfig, t_span: float, noise_path: NoisePath | None,
                 *, dt: float | None = None, cutoff: int | None = None, s: float = 0.5,
                 tol: float = 1e-10, max_iter: int = 50, n_directions: int = 16,
                 cache=None) -> PicardResult:
    """Fixed-point iteration of the Duhamel map on a uniform time grid.

    The stochastic convolution plus ``exp(t L0) u(0)`` is computed once,
    exactly, from the noise path. The nonlinear Duhamel integral uses the
    left-endpoint rule with exact ``exp((t - t') L0)`` factors. Iteration
    stops when the sup-in-time H^s distance of successive iterates drops
    below ``tol``.

    ``ratios`` are the observed distance ratios of successive iterates.
    ``contraction_ratio`` is the Lipschitz constant of the Duhamel map at
    the fixed point in the sup-in-time H^s metric, estimated as the largest
    response to ``n_directions`` random time-constant perturbations. The
    iterate ratios understate it, because a correction first enters pi and
    reaches phi only after a further time integration.

    Raises :class:`ContractionError` if the distance ratio is >= 1 on three
    consecutive iterations.
    """
    if noise_path is None:
        if dt is None:
            raise ValueError("dt is required without a noise path")
    else:
        dt = noise_path.dt
    n_steps = int(round(t_span / dt))
    if not np.isclose(n_steps * dt, t_span, rtol=1e-9):
        raise ValueError(f"t_span={t_span} is not a multiple of dt={dt}")
    if noise_path is not None and noise_path.n_steps < n_steps:
        raise ValueError("noise path is shorter than t_span")
    m, K = initial.m_grid, initial.n_reservoirs
    integ = SplittingIntegrator(cfg, m, dt, cutoff, cache)
    Ah = integ.half_prop.mean_map
    A = Ah @ Ah
    n = 2 * m + 1
    w = sobolev_weight_vector(m, K, s)

    lin = np.empty((n_steps + 1, Ah.shape[0]))
    lin[0] = state_to_vector(initial)
    for k in range(n_steps):
        xi = None if noise_path is None else noise_path.xi[k]
        y = propagate(lin[k], integ.half_prop, None if xi is None else xi[0])
        lin[k + 1] = propagate(y, integ.half_prop, None if xi is None else xi[1])

    def force(U):
        f = np.zeros_like(U)
        if cfg.mu:
            f[..., n : 2 * n] = -cfg.mu * cubic_force(U[..., :n], m, integ.cutoff, integ.n_pad)
        return f

    def convolve(F):
        # left-endpoint Duhamel sum; F has time on axis -2
        out = np.zeros_like(F)
        acc = np.zeros(F.shape[:-2] + F.shape[-1:])
        for k in range(n_steps):
            acc = (acc + dt * F[..., k, :]) @ A.T
            out[..., k + 1, :] = acc
        return out

    def duhamel(U):
        return lin + convolve(force(U))

    U = lin
    distances, ratios = [], []
    streak = 0
    scale = max(1.0, float(np.max(np.sqrt(np.sum(w * lin**2, axis=1)))))
    floor = 1e-13 * scale
    it = 0
    for it in range(1, max_iter + 1):
        U_new = duhamel(U)
        if not np.all(np.isfinite(U_new)):
            raise BlowUpError(t_span, "Picard iterate became non-finite")
        d = float(np.max(np.sqrt(np.sum(w * (U_new - U) ** 2, axis=1))))
        distances.append(d)
        U = U_new
        if len(distances) >= 2 and distances[-2] > floor:
            ratio = d / distances[-2]
            ratios.append(ratio)
            streak = streak + 1 if ratio >= 1 else 0
            if streak >= 3:
                raise ContractionError(ratio, it)
        if d < tol:
            break
    contraction = 0.0
    if cfg.mu and n_directions:
        rng = np.random.default_rng(0)
        z = rng.standard_normal((n_directions, 1, U.shape[1]))
        z /= np.sqrt(np.sum(w * z**2, axis=-1, keepdims=True))
        eps = 1e-6 * scale
        resp = convolve(force(U + eps * z) - force(U))
        contraction = float(np.max(np.sqrt(np.sum(w * resp**2, axis=-1)))) / eps
    times = dt * np.arange(n_steps + 1)
    return PicardResult(times, U, it, distances, ratios, contraction, m, K)


# --------------------------------------------------------------------------
# Coupled pairs and the high/low splitting functional
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class CoupledPair:
    """Nonlinear and linear (mu = 0) solutions driven by the same noise."""

    nonlinear: SystemState
    linear: SystemState
    shared_noise_seed: object = None

    @classmethod
    def start(cls, initial: SystemState, seed=None) -> "CoupledPair":
        return cls(initial, initial, seed)


def split_state(pair: CoupledPair, N: int) -> SystemState:
    """``(u - P_{>N} u0, r - r0)`` as a state."""
    if pair.nonlinear.time != pair.linear.time:
        raise ValueError(
            f"pair members are at different times ({pair.nonlinear.time} vs {pair.linear.time})"
        )
    u, u0 = pair.nonlinear, pair.linear
    high = project_high(u0.field, N)
    f = u.field
    tilde = FourierField(f.phi_hat - high.phi_hat, f.pi_hat - high.pi_hat)
    return SystemState(tilde, u.r - u0.r, u.time)


def bourgain_functional(pair: CoupledPair, N: int, mu: float, cutoff: int | None = None) -> np.ndarray:
    """Energy of the split state ``(u - P_{>N} u0, r - r0)``."""
    return energy(split_state(pair, N), mu, cutoff)


def bourgain_drift(pair: CoupledPair, N: int, cfg: CouplingConfig, cutoff: int | None = None) -> np.ndarray:
    """Right-hand side of the differential of the splitting functional.

    ``Im<B u~, mu phi_M^3 - mu phi~^3 + r0 P_N alpha> - |r~|^2
    + r~ . Im<B u0, P_N alpha>`` with ``<f, g> = sum conj(f_k) g_k``
    and alpha projected to the dynamics cutoff.
    """
    u, u0 = pair.nonlinear, pair.linear
    m = u.m_grid
    tilde = split_state(pair, N)
    alphas = project_low(cfg.alpha_coeffs(m, cutoff), N)
    phi = u.field.phi_hat
    if cutoff is not None and cutoff < m:
        phi = project_low(phi, cutoff)
    X = cfg.mu * (cubic(phi) - cubic(tilde.field.phi_hat))
    X = X + np.tensordot(u0.r, alphas, axes=([-1], [0]))
    Bu_t = apply_B(tilde.field.u_hat())
    Bu_0 = apply_B(u0.field.u_hat())
    term1 = np.imag(inner_product(Bu_t, X))
    cross = np.stack([np.imag(inner_product(Bu_0, a)) for a in alphas], axis=-1)
    return term1 - np.sum(tilde.r**2, axis=-1) + np.sum(tilde.r * cross, axis=-1)


@dataclass
class PairTrajectory:
    """Coupled nonlinear/linear trajectories sampled every step."""

    times: np.ndarray
    nonlinear: np.ndarray  # (n_times, ..., D)
    linear: np.ndarray
    m_grid: int
    n_reservoirs: int
    dt: float
    cutoff: int | None = None

    def pair(self, i: int) -> CoupledPair:
        t = self.times[i]
        return CoupledPair(
            vector_to_state(self.nonlinear[i], self.m_grid, self.n_reservoirs, t),
            vector_to_state(self.linear[i], self.m_grid, self.n_reservoirs, t),
        )


def simulate_pair(initial: SystemState, cfg: CouplingConfig, dt: float, n_steps: int,
                  rng: np.random.Generator | None, cutoff: int | None = None, cache=None) -> PairTrajectory:
    """Evolve u and u0 from the same data with identical noise arrays each step."""
    integ = SplittingIntegrator(cfg, initial.m_grid, dt, cutoff, cache)
    lin_integ = SplittingIntegrator(cfg.with_mu(0.0), initial.m_grid, dt, cutoff,
                                    half_prop=integ.half_prop)
    x = state_to_vector(initial)
    x0 = x.copy()
    X, X0 = [x], [x0]
    for k in range(n_steps):
        xi = None if rng is None else integ.draw(rng, x.shape[:-1])
        x = integ.step(x, xi)
        x0 = lin_integ.step(x0, xi)
        integ.check(x, (k + 1) * dt)
        X.append(x)
        X0.append(x0)
    times = initial.time + dt * np.arange(n_steps + 1)
    return PairTrajectory(times, np.array(X), np.array(X0), initial.m_grid,
                          initial.n_reservoirs, dt, cutoff)


@dataclass
class DriftCheck:
    times: np.ndarray
    I_N: np.ndarray
    finite_difference: np.ndarray
    formula: np.ndarray
    max_residual: float
    quadratic_variation: float


def verify_I_N_drift(traj: PairTrajectory, N: int, cfg: CouplingConfig) -> DriftCheck:
    """Compare the centered difference of I_N with the drift formula.

    Also returns ``sum (Delta I_N)^2`` over the trajectory, which is O(dt)
    for a process with no martingale part.
    """
    cutoff = traj.cutoff
    I = np.array([bourgain_functional(traj.pair(i), N, cfg.mu, cutoff) for i in range(len(traj.times))])
    fd = (I[2:] - I[:-2]) / (2 * traj.dt)
    rhs = np.array([bourgain_drift(traj.pair(i), N, cfg, cutoff) for i in range(1, len(traj.times) - 1)])
    resid = np.abs(fd - rhs)
    qv = float(np.sum(np.diff(I, axis=0) ** 2, axis=0).mean())
    return DriftCheck(traj.times, I, fd, rhs, float(np.max(resid)), qv)


# --------------------------------------------------------------------------
# Observation logs
# --------------------------------------------------------------------------

Observer = Callable[[CoupledPair], float]


def energy_observer(mu: float, cutoff: int | None = None) -> Observer:
    return lambda p: float(energy(p.nonlinear, mu, cutoff))


def sobolev_observer(s: float) -> Observer:
    return lambda p: float(sobolev_norm(p.nonlinear, s))


def reservoir_observer(j: int) -> Observer:
    return lambda p: float(p.nonlinear.r[j])


def quartic_observer() -> Observer:
    return lambda p: float(quartic_integral(p.nonlinear.field.phi_hat))


def bourgain_observer(N: int, mu: float, cutoff: int | None = None) -> Observer:
    def obs(p):
        if p.linear is None:
            raise ValueError("I_N needs a coupled run (coupled=True)")
        return float(bourgain_functional(p, N, mu, cutoff))

    return obs


def default_observers(mu: float, s_values=(1 / 3, 0.49), n_reservoirs: int = 1,
                      bourgain_N=(), cutoff: int | None = None) -> dict:
    obs = {"energy": energy_observer(mu, cutoff)}
    for s in s_values:
        obs[f"hs_norm_{s:.4g}"] = sobolev_observer(s)
    for j in range(n_reservoirs):
        obs[f"r_{j + 1}"] = reservoir_observer(j)
    obs["phi4"] = quartic_observer()
    for N in bourgain_N:
        obs[f"I_{N}"] = bourgain_observer(N, mu, cutoff)
    return obs


@dataclass
class ObservationLog:
    """Observables recorded along a trajectory.

    CSV layout: header ``time,<observer names in insertion order>``, one
    row per observation, floats written with 17 significant digits. The
    JSON sidecar holds ``metadata`` plus the column order.
    """

    times: np.ndarray
    columns: dict
    metadata: dict = field(default_factory=dict)
    error: str | None = None

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        names = list(self.columns)
        w.writerow(["time"] + names)
        for i, t in enumerate(self.times):
            w.writerow([format(t, ".17g")] + [format(self.columns[n][i], ".17g") for n in names])
        return buf.getvalue()

    def sidecar(self) -> dict:
        return {"columns": ["time"] + list(self.columns), "metadata": self.metadata, "error": self.error}

    def write(self, prefix) -> None:
        prefix = Path(prefix)
        prefix.parent.mkdir(parents=True, exist_ok=True)
        prefix.with_suffix(".csv").write_text(self.to_csv())
        prefix.with_suffix(".json").write_text(json.dumps(self.sidecar(), indent=2, sort_keys=True))

    @classmethod
    def read(cls, prefix) -> "ObservationLog":
        prefix = Path(prefix)
        side = json.loads(prefix.with_suffix(".json").read_text())
        rows = list(csv.reader(prefix.with_suffix(".csv").read_text().splitlines()))
        data = np.array(rows[1:], dtype=float).reshape(-1, len(rows[0]))
        cols = {name: data[:, i + 1] for i, name in enumerate(rows[0][1:])}
        return cls(data[:, 0], cols, side["metadata"], side.get("error"))


def run_trajectory(initial: SystemState, cfg: CouplingConfig, dt: float, t_final: float,
                   rng: np.random.Generator | None, observers: Mapping[str, Observer], *,
                   cutoff: int | None = None, stride: int = 10, coupled: bool = False,
                   seed=None, cache=None) -> ObservationLog:
    """Integrate one trajectory, recording observables every ``stride`` steps.

    With ``coupled=True`` the linear companion u0 is evolved with the same
    noise and observers see it as ``pair.linear``. A blow-up stops the run;
    the partial log is attached to the raised :class:`BlowUpError` as
    ``.log``.
    """
    if initial.batch_shape:
        raise ValueError("run_trajectory integrates a single trajectory")
    n_steps = int(round(t_final / dt))
    integ = SplittingIntegrator(cfg, initial.m_grid, dt, cutoff, cache)
    lin_integ = None
    if coupled:
        lin_integ = SplittingIntegrator(cfg.with_mu(0.0), initial.m_grid, dt, cutoff,
                                        half_prop=integ.half_prop)
    m, K = initial.m_grid, initial.n_reservoirs
    names = list(observers)
    times, rows = [], []

    def record(x, x0, t):
        u = vector_to_state(x, m, K, t)
        u0 = vector_to_state(x0, m, K, t) if coupled else None
        p = CoupledPair(u, u0, seed)
        times.append(t)
        rows.append([float(observers[n](p)) for n in names])

    meta = {
        "seed": seed,
        "dt": dt,
        "t_final": t_final,
        "m_grid": m,
        "cutoff": integ.cutoff,
        "stride": stride,
        "cfg_hash": cfg.digest(),
        "coupled": coupled,
    }
    x = state_to_vector(initial)
    x0 = x.copy()
    t0 = initial.time
    record(x, x0, t0)
    for k in range(n_steps):
        xi = None if rng is None else integ.draw(rng)
        x = integ.step(x, xi)
        if coupled:
            x0 = lin_integ.step(x0, xi)
        t = t0 + (k + 1) * dt
        try:
            integ.check(x, t)
        except BlowUpError as err:
            log = ObservationLog(np.array(times), {n: np.array([r[i] for r in rows]) for i, n in enumerate(names)},
                                 meta, str(err))
            err.log = log
            raise
        if (k + 1) % stride == 0:
            record(x, x0, t)
    cols = {n: np.array([r[i] for r in rows]) for i, n in enumerate(names)}
    return ObservationLog(np.array(times), cols, meta)
