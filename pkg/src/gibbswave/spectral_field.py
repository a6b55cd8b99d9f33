"""
Spectral representation of real periodic fields on [0, 2*pi].

Coefficient arrays are stored as full Hermitian complex arrays of length
``2*m + 1`` in centered order, index ``j`` holding wavenumber ``k = j - m``.
Leading axes are batch axes, so an ensemble of fields is just an array of
shape ``(..., 2*m + 1)``.

The Fourier convention is unitary::

    f_hat[k] = (2*pi)**-0.5 * integral_0^{2 pi} f(x) exp(-i k x) dx

so that ``||f||_{L^2}^2 = sum_k |f_hat[k]|^2`` without extra factors.

The complex field used for norms is ``u = phi + (i/B) pi`` with
``B = sqrt(1 - d^2/dx^2)``; its coefficients are
``u_hat[k] = phi_hat[k] + i (1 + k^2)**-0.5 * pi_hat[k]``.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np
from scipy import fft as sfft

SQRT2PI = np.sqrt(2.0 * np.pi)
_HERMITIAN_TOL = 1e-12


def wavenumbers(m: int) -> np.ndarray:
    """Integer wavenumbers ``-m .. m`` in storage order."""
    return np.arange(-m, m + 1)


def grid_size(coeffs) -> int:
    """Representation cutoff ``m`` of a centered coefficient array."""
    n = np.shape(coeffs)[-1]
    if n % 2 != 1:
        raise ValueError(f"coefficient axis must have odd length 2m+1, got {n}")
    return (n - 1) // 2


def omega(m: int) -> np.ndarray:
    """Symbol of B on modes ``-m .. m``: sqrt(1 + k^2)."""
    k = wavenumbers(m)
    return np.sqrt(1.0 + k * k)


# --------------------------------------------------------------------------
# Physical <-> spectral transforms
# --------------------------------------------------------------------------

def physical_grid(n: int) -> np.ndarray:
    return 2.0 * np.pi * np.arange(n) / n


def to_physical(coeffs, n: int | None = None) -> np.ndarray:
    """Evaluate a real field on ``n`` equispaced points of [0, 2*pi).

    ``n`` defaults to ``2*m + 1``; it must be at least ``2*m + 1``.
    """
    coeffs = np.asarray(coeffs)
    m = grid_size(coeffs)
    if n is None:
        n = 2 * m + 1
    if n < 2 * m + 1:
        raise ValueError(f"need at least {2 * m + 1} points for m={m}, got {n}")
    half = np.zeros(coeffs.shape[:-1] + (n // 2 + 1,), dtype=complex)
    half[..., : m + 1] = coeffs[..., m:]
    return sfft.irfft(half, n=n, axis=-1) * (n / SQRT2PI)


def from_physical(values, m: int) -> np.ndarray:
    """Unitary Fourier coefficients ``-m .. m`` of samples on [0, 2*pi).

    Requires ``len(values) >= 2*m + 1``; modes beyond the sampling
    resolution alias, as usual.
    """
    values = np.asarray(values, dtype=float)
    n = values.shape[-1]
    if n < 2 * m + 1:
        raise ValueError(f"need at least {2 * m + 1} samples for m={m}, got {n}")
    half = sfft.rfft(values, axis=-1)[..., : m + 1] * (SQRT2PI / n)
    return hermitian_from_nonnegative(half)


def hermitian_from_nonnegative(half) -> np.ndarray:
    """Full centered array from the ``k = 0 .. m`` coefficients."""
    half = np.asarray(half, dtype=complex)
    out = np.concatenate([np.conj(half[..., :0:-1]), half], axis=-1)
    m = half.shape[-1] - 1
    out[..., m] = out[..., m].real
    return out


def is_hermitian(coeffs, tol: float = _HERMITIAN_TOL) -> bool:
    coeffs = np.asarray(coeffs)
    scale = max(1.0, float(np.max(np.abs(coeffs), initial=0.0)))
    mirror = np.conj(coeffs[..., ::-1])
    return bool(np.max(np.abs(coeffs - mirror), initial=0.0) <= tol * scale)


def check_hermitian(coeffs, name: str = "coefficients") -> None:
    if not is_hermitian(coeffs):
        raise ValueError(f"{name} are not Hermitian-symmetric (field is not real)")


def field_from_function(func, m: int, oversample: int = 4) -> np.ndarray:
    """Coefficients of ``func(x)`` sampled on an oversampled grid."""
    n = oversample * (2 * m + 1)
    return from_physical(func(physical_grid(n)), m)


def resize(coeffs, m_new: int) -> np.ndarray:
    """Zero-pad or truncate a centered coefficient array to cutoff ``m_new``."""
    coeffs = np.asarray(coeffs)
    m = grid_size(coeffs)
    if m_new == m:
        return coeffs.copy()
    if m_new < m:
        return coeffs[..., m - m_new : m + m_new + 1].copy()
    out = np.zeros(coeffs.shape[:-1] + (2 * m_new + 1,), dtype=coeffs.dtype)
    out[..., m_new - m : m_new + m + 1] = coeffs
    return out


# --------------------------------------------------------------------------
# Field and state containers
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class FourierField:
    """The real field pair (phi, pi) in spectral form.

    Arrays may carry leading batch axes; the last axis is the mode axis.
    """

    phi_hat: np.ndarray
    pi_hat: np.ndarray

    def __post_init__(self):
        phi = np.array(self.phi_hat, dtype=complex)
        pi = np.array(self.pi_hat, dtype=complex)
        if phi.shape != pi.shape:
            raise ValueError(f"phi_hat {phi.shape} and pi_hat {pi.shape} differ in shape")
        grid_size(phi)
        phi.setflags(write=False)
        pi.setflags(write=False)
        object.__setattr__(self, "phi_hat", phi)
        object.__setattr__(self, "pi_hat", pi)

    @property
    def m_grid(self) -> int:
        return grid_size(self.phi_hat)

    @property
    def batch_shape(self) -> tuple:
        return self.phi_hat.shape[:-1]

    @classmethod
    def zeros(cls, m_grid: int, batch_shape: tuple = ()) -> "FourierField":
        z = np.zeros(batch_shape + (2 * m_grid + 1,), dtype=complex)
        return cls(z, z)

    @classmethod
    def from_physical(cls, phi_values, pi_values, m_grid: int) -> "FourierField":
        return cls(from_physical(phi_values, m_grid), from_physical(pi_values, m_grid))

    def to_physical(self, n: int | None = None) -> tuple[np.ndarray, np.ndarray]:
        return to_physical(self.phi_hat, n), to_physical(self.pi_hat, n)

    def u_hat(self) -> np.ndarray:
        """Coefficients of the complex field ``u = phi + (i/B) pi``."""
        return self.phi_hat + 1j * self.pi_hat / omega(self.m_grid)

    def validate(self) -> None:
        check_hermitian(self.phi_hat, "phi_hat")
        check_hermitian(self.pi_hat, "pi_hat")


@dataclass(frozen=True)
class SystemState:
    """A field pair plus the reservoir vector ``r`` at a given time."""

    field: FourierField
    r: np.ndarray
    time: float = 0.0

    def __post_init__(self):
        r = np.array(self.r, dtype=float)
        if r.ndim == 0:
            r = r.reshape(1)
        if r.shape[:-1] != self.field.batch_shape:
            raise ValueError(
                f"r batch shape {r.shape[:-1]} does not match field batch shape "
                f"{self.field.batch_shape}"
            )
        r.setflags(write=False)
        object.__setattr__(self, "r", r)
        object.__setattr__(self, "time", float(self.time))

    @property
    def m_grid(self) -> int:
        return self.field.m_grid

    @property
    def n_reservoirs(self) -> int:
        return self.r.shape[-1]

    @property
    def batch_shape(self) -> tuple:
        return self.field.batch_shape

    @classmethod
    def zeros(cls, m_grid: int, n_reservoirs: int, batch_shape: tuple = ()) -> "SystemState":
        return cls(FourierField.zeros(m_grid, batch_shape), np.zeros(batch_shape + (n_reservoirs,)))

    @classmethod
    def from_arrays(cls, phi_hat, pi_hat, r, time: float = 0.0) -> "SystemState":
        return cls(FourierField(phi_hat, pi_hat), r, time)

    def with_time(self, time: float) -> "SystemState":
        return replace(self, time=time)

    def __getitem__(self, index) -> "SystemState":
        """Select batch members; the mode and reservoir axes are kept."""
        if not self.batch_shape:
            raise IndexError("unbatched state cannot be indexed")
        return SystemState(
            FourierField(self.field.phi_hat[index], self.field.pi_hat[index]),
            self.r[index],
            self.time,
        )

    def validate(self) -> None:
        self.field.validate()
        if not np.all(np.isfinite(self.r)):
            raise ValueError("reservoir vector has non-finite entries")


# --------------------------------------------------------------------------
# Operators
# --------------------------------------------------------------------------

def apply_B(coeffs) -> np.ndarray:
    """Multiply each mode by sqrt(1 + k^2)."""
    coeffs = np.asarray(coeffs)
    return coeffs * omega(grid_size(coeffs))


def apply_B_inverse(coeffs) -> np.ndarray:
    coeffs = np.asarray(coeffs)
    return coeffs / omega(grid_size(coeffs))


def sobolev_weights(m: int, s: float) -> np.ndarray:
    k = wavenumbers(m)
    return (1.0 + k * k) ** s


def component_sobolev_norm(coeffs, s: float) -> np.ndarray:
    """H^s norm of one field component: (sum (1+k^2)^s |c_k|^2)^(1/2)."""
    coeffs = np.asarray(coeffs)
    w = sobolev_weights(grid_size(coeffs), s)
    return np.sqrt(np.sum(w * np.abs(coeffs) ** 2, axis=-1))


def u_sobolev_norm(field: FourierField, s: float) -> np.ndarray:
    """H^s norm of the complex field u, without the reservoir part."""
    return component_sobolev_norm(field.u_hat(), s)


def sobolev_norm(state: SystemState, s: float) -> np.ndarray:
    """``(|r|^2 + ||u||_{H^s}^2)^(1/2)`` using u_hat directly."""
    u2 = u_sobolev_norm(state.field, s) ** 2
    return np.sqrt(np.sum(state.r**2, axis=-1) + u2)


def lp_norm(coeffs, p, oversample: int = 2) -> np.ndarray:
    """L^p([0, 2*pi]) norm via an oversampled physical grid.

    For even ``p`` the grid has at least ``p*m + 1`` points, so the
    trapezoid rule integrates the trigonometric polynomial ``|f|^p``
    exactly. ``p = inf`` uses the grid maximum.
    """
    coeffs = np.asarray(coeffs)
    m = grid_size(coeffs)
    if oversample < 2:
        raise ValueError("oversample factor must be >= 2")
    if p in (np.inf, "inf"):
        vals = to_physical(coeffs, oversample * (2 * m + 1))
        return np.max(np.abs(vals), axis=-1)
    if p not in (2, 4, 6):
        raise ValueError(f"unsupported p={p!r}; choose from 2, 4, 6, inf")
    n = max(oversample * (2 * m + 1), p * m + 2)
    vals = to_physical(coeffs, n)
    integral = (2.0 * np.pi / n) * np.sum(np.abs(vals) ** p, axis=-1)
    return integral ** (1.0 / p)


def quartic_integral(coeffs) -> np.ndarray:
    """Exact ``integral phi^4 dx`` of a trigonometric polynomial."""
    coeffs = np.asarray(coeffs)
    m = grid_size(coeffs)
    n = sfft.next_fast_len(4 * m + 2)
    vals = to_physical(coeffs, n)
    return (2.0 * np.pi / n) * np.sum(vals**4, axis=-1)


def _project(coeffs, n_keep: int, low: bool) -> np.ndarray:
    coeffs = np.asarray(coeffs)
    m = grid_size(coeffs)
    if not 0 <= n_keep <= m:
        raise ValueError(f"projection cutoff N={n_keep} outside [0, m_grid={m}]")
    mask = np.abs(wavenumbers(m)) <= n_keep
    if not low:
        mask = ~mask
    return np.where(mask, coeffs, 0.0)


def project_low(obj, N: int):
    """Keep modes ``|k| <= N``.

    Accepts a coefficient array, a FourierField or a SystemState. The
    reservoir vector of a state passes through unchanged.
    """
    if isinstance(obj, SystemState):
        return replace(obj, field=project_low(obj.field, N))
    if isinstance(obj, FourierField):
        return FourierField(_project(obj.phi_hat, N, True), _project(obj.pi_hat, N, True))
    return _project(obj, N, True)


def project_high(obj, N: int):
    """Keep modes ``|k| > N``; the reservoir vector of a state is zeroed."""
    if isinstance(obj, SystemState):
        return SystemState(project_high(obj.field, N), np.zeros_like(obj.r), obj.time)
    if isinstance(obj, FourierField):
        return FourierField(_project(obj.phi_hat, N, False), _project(obj.pi_hat, N, False))
    return _project(obj, N, False)


def dealias_size(m: int) -> int:
    """Smallest fast FFT length that makes cubing alias-free on ``|k| <= m``."""
    return sfft.next_fast_len(4 * m + 1)


def cubic(coeffs, n_points: int | None = None) -> np.ndarray:
    """Coefficients of ``phi**3`` on ``|k| <= m``, free of aliasing.

    The field is zero padded to ``n_points >= 4*m + 1`` physical points,
    cubed pointwise and transformed back.
    """
    coeffs = np.asarray(coeffs)
    m = grid_size(coeffs)
    n = dealias_size(m) if n_points is None else int(n_points)
    if n < 4 * m + 1:
        raise ValueError(f"cubic needs >= {4 * m + 1} points for m={m}, got {n}")
    vals = to_physical(coeffs, n)
    return from_physical(vals**3, m)


def inner_product(f, g) -> np.ndarray:
    """``Re sum_k conj(f_k) g_k``, i.e. ``integral f g dx`` for real fields."""
    f = np.asarray(f)
    g = np.asarray(g)
    if f.shape[-1] != g.shape[-1]:
        raise ValueError(
            f"grid mismatch: {grid_size(f)} vs {grid_size(g)} (coefficient lengths "
            f"{f.shape[-1]} and {g.shape[-1]})"
        )
    return np.sum(np.conj(f) * g, axis=-1)


def inner_product_alpha(alpha_j, pi) -> np.ndarray:
    """``<alpha_j, pi> = integral alpha_j pi dx`` for real fields.

    Raises if the coefficient sum has an imaginary part above 1e-12 (relative),
    which signals a non-Hermitian input.
    """
    z = inner_product(alpha_j, pi)
    scale = max(1.0, float(np.max(np.abs(z), initial=0.0)))
    if np.max(np.abs(np.imag(z)), initial=0.0) > _HERMITIAN_TOL * scale:
        raise ValueError("inner product has an imaginary part; inputs are not real fields")
    return np.real(z)


# --------------------------------------------------------------------------
# Serialization
# --------------------------------------------------------------------------
#
# Binary layout (all little-endian):
#   header   "<4sHHIIQ"  magic b"GWFS", version=1, reserved=0, m_grid, K, count
#   record   time (f8), phi_hat (2m+1 complex as interleaved re/im f8),
#            pi_hat (same), r (K f8)
# Records for a batched state are written in C order over the batch axes.

_MAGIC = b"GWFS"
_VERSION = 1
_HEADER = struct.Struct("<4sHHIIQ")


def _flatten(state: SystemState):
    m, K = state.m_grid, state.n_reservoirs
    phi = state.field.phi_hat.reshape(-1, 2 * m + 1)
    pi = state.field.pi_hat.reshape(-1, 2 * m + 1)
    r = state.r.reshape(-1, K)
    return phi, pi, r


def state_to_bytes(state: SystemState) -> bytes:
    phi, pi, r = _flatten(state)
    count = phi.shape[0]
    m, K = state.m_grid, state.n_reservoirs
    rec = np.empty((count, 1 + 4 * (2 * m + 1) + K), dtype="<f8")
    rec[:, 0] = state.time
    rec[:, 1 : 1 + 2 * (2 * m + 1)] = phi.view(float).reshape(count, -1)
    rec[:, 1 + 2 * (2 * m + 1) : 1 + 4 * (2 * m + 1)] = pi.view(float).reshape(count, -1)
    rec[:, 1 + 4 * (2 * m + 1) :] = r
    return _HEADER.pack(_MAGIC, _VERSION, 0, m, K, count) + rec.tobytes()


def state_from_bytes(data: bytes) -> SystemState:
    magic, version, _, m, K, count = _HEADER.unpack_from(data, 0)
    if magic != _MAGIC:
        raise ValueError("not a field record (bad magic)")
    if version != _VERSION:
        raise ValueError(f"unsupported field record version {version}")
    width = 1 + 4 * (2 * m + 1) + K
    rec = np.frombuffer(data, dtype="<f8", offset=_HEADER.size, count=count * width)
    rec = rec.reshape(count, width).astype(float)
    n = 2 * m + 1
    phi = rec[:, 1 : 1 + 2 * n].copy().view(complex)
    pi = rec[:, 1 + 2 * n : 1 + 4 * n].copy().view(complex)
    r = rec[:, 1 + 4 * n :]
    times = np.unique(rec[:, 0])
    if count == 1:
        return SystemState.from_arrays(phi[0], pi[0], r[0], rec[0, 0])
    if times.size != 1:
        raise ValueError("records carry different times; load them individually")
    return SystemState.from_arrays(phi, pi, r, times[0])


def save_state(path, state: SystemState) -> None:
    Path(path).write_bytes(state_to_bytes(state))


def load_state(path) -> SystemState:
    return state_from_bytes(Path(path).read_bytes())


def state_to_json(state: SystemState) -> str:
    """Small-fixture text form; coefficient lists hold ``[re, im]`` pairs."""
    if state.batch_shape:
        raise ValueError("JSON form is for single states; use the binary layout for batches")

    def pairs(c):
        return [[float(z.real), float(z.imag)] for z in c]

    doc = {
        "m_grid": state.m_grid,
        "K": state.n_reservoirs,
        "time": state.time,
        "phi_hat": pairs(state.field.phi_hat),
        "pi_hat": pairs(state.field.pi_hat),
        "r": [float(x) for x in state.r],
    }
    return json.dumps(doc, indent=1)


def state_from_json(text: str) -> SystemState:
    doc = json.loads(text)
    m, K = int(doc["m_grid"]), int(doc["K"])

    def unpairs(lst, name):
        arr = np.asarray(lst, dtype=float)
        if arr.shape != (2 * m + 1, 2):
            raise ValueError(f"{name} must have {2 * m + 1} [re, im] pairs")
        return arr[:, 0] + 1j * arr[:, 1]

    r = np.asarray(doc["r"], dtype=float)
    if r.shape != (K,):
        raise ValueError(f"r must have K={K} entries")
    return SystemState.from_arrays(
        unpairs(doc["phi_hat"], "phi_hat"), unpairs(doc["pi_hat"], "pi_hat"), r, doc.get("time", 0.0)
    )
