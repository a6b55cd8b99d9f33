"""
Experiment drivers. Each takes an :class:`ExperimentConfig` and returns an
:class:`EnsembleReport` whose assertions state their own thresholds.

Random numbers come only from :func:`gibbswave.ensemble.stream`, keyed by
the master seed, a purpose string, a tag (usually the cutoff) and the
trajectory index.
"""

from __future__ import annotations

import numpy as np
from scipy import special, stats

from . import __version__
from .config import EXPERIMENTS, ConfigError, ExperimentConfig
from .dynamics import (
    NoisePath,
    SplittingIntegrator,
    bourgain_functional,
    energy_vector,
    picard_solve,
    CoupledPair,
)
from .ensemble import BlockNoise, gather, ordered_map, stream, streams
from .linear_system import (
    CouplingConfig,
    assemble_generator,
    check_semigroup_bound,
    embed_vector,
    real_to_component,
    real_wavenumbers,
    reversal_signs,
    sobolev_weight_vector,
    state_dim,
    vector_sobolev_norm,
    vector_to_state,
)
from .measures import (
    FULL,
    GibbsSampler,
    estimate_Z,
    estimate_Z_family,
    expected_u_norm_sq,
    gibbs_initial_vectors,
    importance_estimate,
    jackknife_mean,
    quartic_action_vector,
    sample_gibbs,
    sample_nu0_vectors,
    tightness_report,
)
from .report import Z95, EnsembleReport, ObservableSummary, z_threshold
from .spectral_field import project_low, quartic_integral


def _new_report(cfg: ExperimentConfig) -> EnsembleReport:
    meta = {
        "config": cfg.hashed_dict(),
        "config_hash": cfg.digest(),
        "code_version": __version__,
        "seed": cfg.seed,
    }
    return EnsembleReport(cfg.experiment, metadata=meta)


def _linear_fit(x, y) -> tuple:
    """Least-squares slope, intercept and R^2."""
    res = stats.linregress(np.asarray(x, float), np.asarray(y, float))
    return float(res.slope), float(res.intercept), float(res.rvalue**2)


def _advance(integ: SplittingIntegrator, x: np.ndarray, n_steps: int, noise) -> np.ndarray:
    for _ in range(n_steps):
        x = integ.step(x, None if noise is None else noise())
    integ.check(x, n_steps * integ.dt)
    return x


# --------------------------------------------------------------------------
# Invariance of the Gibbs measure
# --------------------------------------------------------------------------

def invariance_observables(x: np.ndarray, m: int, K: int, mu: float, s_values) -> tuple:
    """The paired-test observables as an array ``(..., n_obs)`` plus their names."""
    n = 2 * m + 1
    cols = {}
    for s in s_values:
        cols[f"hs_norm_sq_{s:.4g}"] = vector_sobolev_norm(x, m, K, s) ** 2
    cols["r_sq"] = np.sum(x[..., 2 * n :] ** 2, axis=-1)
    phi = real_to_component(x[..., :n])
    pi = real_to_component(x[..., n : 2 * n])
    cols["phi4"] = quartic_integral(phi)
    k = np.arange(-m, m + 1)
    u = phi + 1j * pi / np.sqrt(1.0 + k**2)
    cols["u0_sq"] = np.abs(u[..., m]) ** 2
    cols["u1_sq"] = np.abs(u[..., m + 1]) ** 2
    cols["energy"] = energy_vector(x, m, K, mu)
    return np.stack(list(cols.values()), axis=-1), list(cols)


def cubature_points(dim: int) -> np.ndarray:
    """Symmetric degree-3 Gaussian cubature: ``+-sqrt(dim) e_i``, equal weights."""
    e = np.sqrt(dim) * np.eye(dim)
    return np.concatenate([e, -e])


def gauss_hermite_grid(temperatures, n_nodes: int) -> tuple:
    """Tensor Gauss-Hermite nodes and weights for independent N(0, T_j) reservoirs."""
    z, w = np.polynomial.hermite_e.hermegauss(n_nodes)
    w = w / w.sum()
    K = len(temperatures)
    grids = np.meshgrid(*([z] * K), indexing="ij")
    nodes = np.stack([g.reshape(-1) for g in grids], axis=-1) * np.sqrt(temperatures)
    wts = np.prod(np.stack(np.meshgrid(*([w] * K), indexing="ij")).reshape(K, -1), axis=0)
    return nodes, wts


def _invariance_cutoff(cfg: ExperimentConfig, coupling: CouplingConfig, M: int, report: EnsembleReport):
    phys, samp, opts = cfg.physics, cfg.sampling, cfg.options
    T = float(coupling.temperatures[0])
    K = coupling.n_reservoirs
    mu = coupling.mu
    dt, t_final = phys["dt"], phys["t_final"]
    n_steps = int(round(t_final / dt))
    seed, n = cfg.seed, samp["ensemble"]
    block = opts["noise_block"]
    sampler = GibbsSampler(T, mu, M, FULL, K)
    integ = SplittingIntegrator(coupling, M, dt)
    integ_half = SplittingIntegrator(coupling, M, dt / 2) if opts["richardson"] else None
    s_values = phys["s_values"]

    def obs(x):
        return invariance_observables(x, M, K, mu, s_values)[0]

    def task(idx):
        x0 = gibbs_initial_vectors(sampler, streams(seed, "init", idx, M), samp["burn_in"])
        out = {"f0": obs(x0)}
        noise = BlockNoise(streams(seed, "noise", idx, M), (2, integ.noise_dim), block)
        out["f1"] = obs(_advance(integ, x0, n_steps, noise))
        if integ_half is not None:
            noise = BlockNoise(streams(seed, "noise_half", idx, M), (2, integ_half.noise_dim), block)
            out["f2"] = obs(_advance(integ_half, x0, 2 * n_steps, noise))
        return out

    res = gather(ordered_map(task, n, samp["chunk_size"], samp["workers"]))
    names = invariance_observables(np.zeros(state_dim(M, K)), M, K, mu, s_values)[1]
    z = z_threshold(len(names), opts["z"], opts["bonferroni"])
    report.tolerances[f"M={M}"] = {"z": z, "rule": "max(z*se, 4/3*|d(dt)-d(dt/2)|)"}
    d1 = res["f1"] - res["f0"]
    for i, name in enumerate(names):
        f0, f1 = res["f0"][:, i], res["f1"][:, i]
        report.observables.append(ObservableSummary.from_samples(
            f"M={M} {name}", [0.0, t_final], np.stack([f0, f1], axis=1)))
        se = d1[:, i].std(ddof=1) / np.sqrt(n)
        tol = z * se
        bias = 0.0
        if "f2" in res:
            d2 = res["f2"][:, i] - f0
            bias = 4.0 / 3.0 * abs(d1[:, i].mean() - d2.mean())
            tol = max(tol, bias)
        summ = ObservableSummary.from_samples(f"M={M} delta {name}", [t_final], d1[:, i])
        summ.tolerance = float(tol)
        summ.passed = bool(abs(d1[:, i].mean()) <= tol)
        report.observables.append(summ)
        paired = d1[:, i].var(ddof=1)
        unpaired = f0.var(ddof=1) + f1.var(ddof=1)
        report.check(f"M={M} paired variance below unpaired: {name}", paired, unpaired, "<")
    report.tables[f"M={M} invariance"] = {
        "names": names,
        "mean_difference": d1.mean(axis=0),
        "standard_error": d1.std(axis=0, ddof=1) / np.sqrt(n),
        "richardson_bias": (4.0 / 3.0 * np.abs(d1.mean(axis=0) - (res["f2"] - res["f0"]).mean(axis=0))
                            if "f2" in res else None),
        "noise_dim": integ.noise_dim,
    }


def weak_generator_estimates(cfg: ExperimentConfig, coupling: CouplingConfig, M: int) -> dict:
    """``(E f(u(delta)) - E f(u(0))) / delta`` for one splitting step of each size.

    Variance reduction, all of it exact under the Gibbs measure: the
    reservoir coordinates (independent Gaussians there) are integrated by
    Gauss-Hermite quadrature, the step noise by Gaussian cubature, and
    every field sample is paired with its time reversal (composed with a
    reflection when the couplings are even).
    """
    samp, opts = cfg.sampling, cfg.options
    T = float(coupling.temperatures[0])
    K, mu = coupling.n_reservoirs, coupling.mu
    n = opts["weak_ensemble"] or samp["ensemble"]
    seed = cfg.seed
    deltas = [float(d) for d in opts["weak_deltas"]]
    s_values = cfg.physics["s_values"]
    sampler = GibbsSampler(T, mu, M, FULL, K)
    even = bool(np.allclose(coupling.alphas.imag, 0.0))
    signs = reversal_signs(M, K, reflect=even)
    integs = [SplittingIntegrator(coupling, M, d) for d in deltas]
    nodes, wts = gauss_hermite_grid(coupling.temperatures, opts["weak_r_nodes"])
    nD = 2 * (2 * M + 1)

    def obs(x):
        return invariance_observables(x, M, K, mu, s_values)[0]

    def task(idx):
        nc = len(idx)
        x = gibbs_initial_vectors(sampler, streams(seed, "weak_init", idx, M), samp["burn_in"])
        x = np.concatenate([x, x * signs])
        X = np.repeat(x[:, None, :], len(wts), axis=1)
        X[..., nD:] = nodes
        f0 = np.einsum("q,nqo->no", wts, obs(X))
        out = {}
        for d, integ in zip(deltas, integs):
            R = integ.noise_dim
            pts = cubature_points(2 * R).reshape(-1, 2, R)
            Y = integ.step(X[:, :, None, :], pts)
            Ef = np.einsum("q,nqo->no", wts, obs(Y).mean(axis=2))
            g = (Ef - f0) / d
            out[repr(d)] = 0.5 * (g[:nc] + g[nc:])
        return out

    res = gather(ordered_map(task, n, samp["chunk_size"], samp["workers"]))
    names = invariance_observables(np.zeros(state_dim(M, K)), M, K, mu, s_values)[1]
    return {"deltas": deltas, "names": names, "values": [res[repr(d)] for d in deltas], "n": n,
            "reflected": even}


def _weak_generator(cfg, coupling, M, report):
    est = weak_generator_estimates(cfg, coupling, M)
    deltas, names, n = est["deltas"], est["names"], est["n"]
    z = cfg.options["z"]
    report.tolerances[f"M={M} weak generator"] = {
        "rule": "|Q| strictly decreasing as delta halves; |2Q(last)-Q(prev)| <= z*(2se_last+se_prev)",
        "z": z,
    }
    slopes = {}
    for i, name in enumerate(names):
        vals = np.stack([v[:, i] for v in est["values"]], axis=1)
        report.observables.append(ObservableSummary.from_samples(f"M={M} weak {name}", deltas, vals))
        Q = vals.mean(axis=0)
        se = vals.std(axis=0, ddof=1) / np.sqrt(n)
        ratios = np.abs(Q[1:]) / np.abs(Q[:-1])
        report.check(f"M={M} weak generator decreasing: {name}", np.max(ratios), 1.0, "<",
                     f"|Q| = {np.abs(Q).tolist()}")
        extrap = 2 * Q[-1] - Q[-2]
        report.check(f"M={M} weak generator extrapolates to 0: {name}", abs(extrap),
                     z * (2 * se[-1] + se[-2]))
        slopes[name] = _linear_fit(np.log(deltas), np.log(np.abs(Q) + 1e-300))[0]
    report.tables[f"M={M} weak generator log-log slopes"] = slopes


def _equilibrium_coupling(cfg: ExperimentConfig) -> CouplingConfig:
    coupling = cfg.coupling()
    if not coupling.is_equilibrium:
        raise ConfigError("physics.temperatures: the invariance experiment needs equal temperatures")
    return coupling


def run_weak_generator(cfg: ExperimentConfig, report: EnsembleReport | None = None) -> EnsembleReport:
    """Only the single-step generator checks of the invariance experiment."""
    coupling = _equilibrium_coupling(cfg)
    report = _new_report(cfg) if report is None else report
    for M in cfg.options["weak_cutoffs"] or cfg.physics["cutoffs"][:1]:
        _weak_generator(cfg, coupling, M, report)
    return report


def run_invariance_experiment(cfg: ExperimentConfig) -> EnsembleReport:
    coupling = _equilibrium_coupling(cfg)
    report = _new_report(cfg)
    for M in cfg.physics["cutoffs"]:
        _invariance_cutoff(cfg, coupling, M, report)
    if cfg.options["weak_generator"]:
        run_weak_generator(cfg, report)
    return report


# --------------------------------------------------------------------------
# Galerkin convergence
# --------------------------------------------------------------------------

def cutoff_discrepancies(cfg: ExperimentConfig, coupling: CouplingConfig, cutoffs, ref: int,
                         support: int | None = None, tag: int = 0) -> np.ndarray:
    """``sup_t ||u_M - u_ref||_{H^s}`` per trajectory, shape (n, len(cutoffs)).

    Each run lives on grid M with initial data ``P_M u(0)``; all runs of one
    trajectory share the initial draw and the noise innovations. With
    ``support`` the initial data are projected to ``|k| <= support``.
    """
    phys, samp, opts = cfg.physics, cfg.sampling, cfg.options
    K = coupling.n_reservoirs
    s, stride = opts["s"], opts["stride"]
    dt, t_final = phys["dt"], phys["t_final"]
    n_steps = int(round(t_final / dt))
    grids = list(cutoffs) + [ref]
    integs = [SplittingIntegrator(coupling, M, dt) for M in grids]
    R = max(i.noise_dim for i in integs)
    temps = coupling.temperatures
    T = float(np.mean(temps))
    w = sobolev_weight_vector(ref, K, s)
    seed = cfg.seed

    def task(idx):
        rngs = streams(seed, "init", idx, tag)
        u0 = np.stack([sample_nu0_vectors(T, ref, K, g, (), temps) for g in rngs])
        if support is not None:
            u0 = embed_vector(embed_vector(u0, ref, support, K), support, ref, K)
        xs = [embed_vector(u0, ref, M, K) for M in grids]
        noise = BlockNoise(streams(seed, "noise", idx, tag), (2, R), opts["noise_block"])

        def dist():
            xr = xs[-1]
            return np.stack([np.sqrt(np.sum(w * (embed_vector(x, M, ref, K) - xr) ** 2, axis=-1))
                             for x, M in zip(xs[:-1], grids[:-1])], axis=-1)

        sup = dist()
        for k in range(n_steps):
            xi = noise()
            xs = [integ.step(x, xi[..., : integ.noise_dim]) for integ, x in zip(integs, xs)]
            if (k + 1) % stride == 0 or k + 1 == n_steps:
                for integ, x in zip(integs, xs):
                    integ.check(x, (k + 1) * dt)
                sup = np.maximum(sup, dist())
        return sup

    return gather(ordered_map(task, samp["ensemble"], samp["chunk_size"], samp["workers"]))


def run_cutoff_convergence(cfg: ExperimentConfig) -> EnsembleReport:
    report = _new_report(cfg)
    coupling = cfg.coupling()
    cutoffs = sorted(cfg.physics["cutoffs"])
    ref = cfg.physics["reference_cutoff"]
    opts = cfg.options
    sup = cutoff_discrepancies(cfg, coupling, cutoffs, ref)
    med = np.median(sup, axis=0)
    for j, M in enumerate(cutoffs):
        report.observables.append(ObservableSummary.from_samples(
            f"sup H^{opts['s']} distance M={M} to M={ref}", [cfg.physics["t_final"]], sup[:, j]))
    report.tables["medians"] = {str(M): float(v) for M, v in zip(cutoffs, med)}
    if len(cutoffs) > 1:
        report.check("median discrepancy strictly decreasing in M",
                     float(np.max(med[1:] / med[:-1])), 1.0, "<", f"medians {med.tolist()}")
    if opts["control"]:
        q = opts["control_support"]
        alphas = project_low(coupling.alphas, q) if coupling.alphas.shape[-1] > 2 * q + 1 else coupling.alphas
        ctrl = CouplingConfig(alphas, coupling.temperatures, 0.0)
        kept = [M for M in cutoffs if M >= q]
        sup0 = cutoff_discrepancies(cfg, ctrl, kept, ref, support=q, tag=1)
        report.tables["control max discrepancy"] = {str(M): float(v) for M, v in zip(kept, sup0.max(axis=0))}
        report.check(f"linear control supported in |k|<={q} is exact",
                     float(sup0.max(initial=0.0)), 1e-10)
    report.tolerances = {"control": 1e-10, "monotone": "strict"}
    return report


# --------------------------------------------------------------------------
# Tail bounds
# --------------------------------------------------------------------------

def discrete_semigroup_constant(integ: SplittingIntegrator, n_steps: int, s: float) -> float:
    """``max_n ||A^n||`` in the H^s metric over the simulation times (A the linear step)."""
    A = integ.half_prop.mean_map @ integ.half_prop.mean_map
    w = np.sqrt(sobolev_weight_vector(integ.m, integ.K, s))
    P = np.eye(A.shape[0])
    best = 1.0
    for _ in range(n_steps):
        P = A @ P
        best = max(best, float(np.linalg.norm(w[:, None] * P / w[None, :], 2)))
    return best


def run_tail_bound(cfg: ExperimentConfig) -> EnsembleReport:
    report = _new_report(cfg)
    phys, samp, opts = cfg.physics, cfg.sampling, cfg.options
    coupling = cfg.coupling()
    m, K, mu = phys["m_grid"], coupling.n_reservoirs, coupling.mu
    s, beta = opts["s"], opts["beta"]
    dt, t_final = phys["dt"], phys["t_final"]
    n_steps = int(round(t_final / dt))
    seed, n = cfg.seed, samp["ensemble"]

    g = stream(seed, "tail_init", 0)
    u0 = sample_nu0_vectors(1.0, m, K, g)
    u0 *= beta / vector_sobolev_norm(u0, m, K, s)

    lin = SplittingIntegrator(coupling.with_mu(0.0), m, dt)
    c_hat = discrete_semigroup_constant(lin, n_steps, s)
    report.tables["semigroup_constant"] = c_hat
    level0 = c_hat * beta

    x = u0.copy()
    sup_det = beta
    for _ in range(n_steps):
        x = lin.step(x, None)
        sup_det = max(sup_det, float(vector_sobolev_norm(x, m, K, s)))
    report.check("noise-free linear sup norm <= semigroup constant * beta", sup_det,
                 level0 * (1 + 1e-9))
    report.check("noise-free exceedance of twice the bound", float(sup_det > 2 * level0), 0.0)

    integ = SplittingIntegrator(coupling, m, dt)

    def task(idx):
        noise = BlockNoise(streams(seed, "noise", idx), (2, integ.noise_dim), opts["noise_block"])
        xb = np.repeat(u0[None], len(idx), axis=0)
        sup = vector_sobolev_norm(xb, m, K, s)
        for k in range(n_steps):
            xb = integ.step(xb, noise())
            sup = np.maximum(sup, vector_sobolev_norm(xb, m, K, s))
        integ.check(xb, t_final)
        return sup

    sup = gather(ordered_map(task, n, samp["chunk_size"], samp["workers"]))
    top = np.quantile(sup, 1 - opts["min_count"] / n)
    lo = level0 if mu == 0 else np.quantile(sup, 0.5)
    levels = np.linspace(lo, top, opts["n_levels"])
    exceed = np.array([np.mean(sup > lam) for lam in levels])
    keep = exceed > 0
    report.tables["exceedance"] = {"levels": levels, "frequency": exceed, "level0": level0}
    report.observables.append(ObservableSummary.from_samples(f"sup H^{s} norm", [t_final], sup))
    logp = np.log(exceed[keep])
    if mu == 0:
        slope, icpt, r2 = _linear_fit((levels[keep] - level0) ** 2, logp)
        report.tables["gaussian_fit"] = {"slope": slope, "intercept": icpt, "r2": r2}
        report.check("gaussian tail slope negative", slope, 0.0, "<")
        report.check("gaussian tail fit R^2", r2, opts["r2_min"], ">")
    else:
        p = exceed[keep]
        sig = np.sqrt((1 - p) / (n * p))
        d2 = logp[2:] - 2 * logp[1:-1] + logp[:-2]
        sd2 = np.sqrt(sig[2:] ** 2 + 4 * sig[1:-1] ** 2 + sig[:-2] ** 2)
        worst = float(np.max(d2 / sd2)) if d2.size else -np.inf
        report.tables["concavity"] = {"second_differences": d2, "standard_errors": sd2}
        report.check("log-exceedance concave (max second difference in se units)", worst, opts["z"])
    return report


# --------------------------------------------------------------------------
# Semigroup bound
# --------------------------------------------------------------------------

def random_coupling(rng: np.random.Generator, max_modes: int, K: int) -> CouplingConfig:
    """Coupling functions with random decaying Fourier coefficients on ``|k| <= max_modes``."""
    from .config import alpha_coefficients

    k = np.arange(1, max_modes + 1)
    specs = []
    for _ in range(K):
        specs.append({
            "const": float(rng.normal()),
            "cos": list(rng.normal(size=max_modes) / (1 + k**2)),
            "sin": list(rng.normal(size=max_modes) / (1 + k**2)),
        })
    alphas = np.stack([alpha_coefficients(sp, max_modes) for sp in specs])
    return CouplingConfig(alphas, np.ones(K), 0.0)


def run_semigroup_bound(cfg: ExperimentConfig) -> EnsembleReport:
    report = _new_report(cfg)
    opts = cfg.options
    m = cfg.physics["m_grid"]
    t_small, t_large = opts["t_max"]
    rows = []
    for c in range(opts["n_configs"]):
        g = stream(cfg.seed, "semigroup_config", c)
        K = int(g.integers(1, 3))
        coupling = random_coupling(g, opts["max_modes"], K)
        L = assemble_generator(coupling, m)
        for s in opts["s_values"]:
            b1 = check_semigroup_bound(L, s, t_small, K)
            b2 = check_semigroup_bound(L, s, t_large, K)
            change = abs(b2.sup_ratio - b1.sup_ratio) / b1.sup_ratio
            rows.append({"config": c, "K": K, "s": s, "sup_small": b1.sup_ratio,
                         "sup_large": b2.sup_ratio, "t_at_sup": b2.t_at_sup, "change": change})
            report.check(f"config {c} s={s:.4g}: relative change of sup ratio", change, opts["rel_tol"], "<")
    report.tables["semigroup"] = rows
    report.tolerances = {"rel_tol": opts["rel_tol"]}
    return report


# --------------------------------------------------------------------------
# Picard contraction
# --------------------------------------------------------------------------

def run_picard_contraction(cfg: ExperimentConfig) -> EnsembleReport:
    report = _new_report(cfg)
    opts, phys = cfg.options, cfg.physics
    coupling = cfg.coupling()
    m, K = phys["m_grid"], coupling.n_reservoirs
    s, beta, dt = opts["s"], opts["beta"], phys["dt"]
    g = stream(cfg.seed, "picard_init", 0)
    x0 = sample_nu0_vectors(1.0, m, K, g)
    x0 *= beta / vector_sobolev_norm(x0, m, K, s)
    initial = vector_to_state(x0, m, K)
    spans = [float(t) for t in opts["t_spans"]]
    integ = SplittingIntegrator(coupling, m, dt)
    n_max = int(round(max(spans) / dt))
    full = NoisePath.draw(stream(cfg.seed, "picard_noise", 0), n_max, dt, integ.noise_dim)
    w = sobolev_weight_vector(m, K, s)
    ratios = []
    for t_span in spans:
        n_steps = int(round(t_span / dt))
        path = NoisePath(dt, full.xi[:n_steps])
        res = picard_solve(initial, coupling, t_span, path, dt=dt, s=s, tol=opts["tol"])
        x = x0.copy()
        worst = 0.0
        for k in range(n_steps):
            x = integ.step(x, path.xi[k])
            worst = max(worst, float(np.sqrt(np.sum(w * (x - res.trajectory[k + 1]) ** 2))))
        ratios.append(res.contraction_ratio)
        report.tables[f"t_span={t_span:g}"] = {"iterations": res.iterations, "distances": res.distances,
                                               "contraction_ratio": res.contraction_ratio,
                                               "splitting_distance": worst}
        report.check(f"t_span={t_span:g}: contraction ratio", res.contraction_ratio, opts["ratio_max"], "<")
        report.check(f"t_span={t_span:g}: agreement with splitting in H^{s:g}", worst, opts["agreement_tol"])
    lo, hi = opts["doubling_range"]
    for a, b, ra, rb in zip(spans[:-1], spans[1:], ratios[:-1], ratios[1:]):
        if np.isclose(b, 2 * a):
            f = rb / ra
            report.check(f"ratio growth {a:g}->{b:g} at least {lo}", f, lo, ">=")
            report.check(f"ratio growth {a:g}->{b:g} at most {hi}", f, hi, "<=")
    report.tolerances = {k: opts[k] for k in ("ratio_max", "agreement_tol", "doubling_range")}
    return report


# --------------------------------------------------------------------------
# Splitting functional drift
# --------------------------------------------------------------------------

def pair_run(coupling: CouplingConfig, x0: np.ndarray, m: int, dt: float, n_steps: int, noise, N: int,
             track_drift: bool = False):
    """Evolve the coupled pair, returning I_N at every step (and the drift formula if asked)."""
    from .dynamics import bourgain_drift

    K = coupling.n_reservoirs
    integ = SplittingIntegrator(coupling, m, dt)
    lin = SplittingIntegrator(coupling.with_mu(0.0), m, dt, half_prop=integ.half_prop)
    x, y = x0.copy(), x0.copy()
    I, F = [], []

    def measure(t):
        p = CoupledPair(vector_to_state(x, m, K, t), vector_to_state(y, m, K, t))
        I.append(bourgain_functional(p, N, coupling.mu))
        if track_drift:
            F.append(bourgain_drift(p, N, coupling))

    measure(0.0)
    for k in range(n_steps):
        xi = None if noise is None else noise()
        x = integ.step(x, xi)
        y = lin.step(y, xi)
        measure((k + 1) * dt)
    integ.check(x, n_steps * dt)
    return np.array(I), (np.array(F) if track_drift else None)


def run_bourgain_drift(cfg: ExperimentConfig) -> EnsembleReport:
    report = _new_report(cfg)
    opts, phys, samp = cfg.options, cfg.physics, cfg.sampling
    coupling = cfg.coupling()
    m, K, N = phys["m_grid"], coupling.n_reservoirs, opts["N"]
    t_final = phys["t_final"]
    dts = [float(d) for d in opts["dts"]]
    Tinit = opts["init_temperature"]
    seed = cfg.seed

    x0 = sample_nu0_vectors(Tinit, m, K, stream(seed, "drift_init", 0))
    cold = coupling.with_temperatures(np.zeros(K))
    resid = []
    for dt in dts:
        I, F = pair_run(cold, x0, m, dt, int(round(t_final / dt)), None, N, track_drift=True)
        fd = (I[2:] - I[:-2]) / (2 * dt)
        resid.append(float(np.max(np.abs(fd - F[1:-1]))))
    slope, _, r2 = _linear_fit(np.log(dts), np.log(resid))
    orders = [float(np.log(a / b) / np.log(da / db)) for a, b, da, db in zip(resid, resid[1:], dts, dts[1:])]
    report.tables["deterministic"] = {"dts": dts, "residuals": resid, "orders": orders,
                                      "fit_slope": slope, "fit_r2": r2}
    report.check("noise-free residual order (worst pair)", min(orders), opts["order_min"], ">=")
    report.check("noise-free residual fit R^2", r2, opts["r2_min"], ">")

    n = samp["ensemble"]
    qv = []
    for j, dt in enumerate(dts):
        n_steps = int(round(t_final / dt))

        def task(idx, dt=dt, n_steps=n_steps, j=j):
            xb = np.stack([sample_nu0_vectors(Tinit, m, K, g) for g in streams(seed, "qv_init", idx)])
            integ_dim = SplittingIntegrator(coupling, m, dt).noise_dim
            noise = BlockNoise(streams(seed, "qv_noise", idx, j), (2, integ_dim), 100)
            I, _ = pair_run(coupling, xb, m, dt, n_steps, noise, N)
            return np.sum(np.diff(I, axis=0) ** 2, axis=0)

        q = gather(ordered_map(task, n, samp["chunk_size"], samp["workers"]))
        qv.append(q)
        report.observables.append(ObservableSummary.from_samples(f"quadratic variation dt={dt:g}", [t_final], q))
    means = [float(q.mean()) for q in qv]
    qslope, _, qr2 = _linear_fit(np.log(dts), np.log(means))
    report.tables["stochastic"] = {"dts": dts, "quadratic_variation": means, "fit_slope": qslope, "fit_r2": qr2}
    report.check("quadratic variation log-log slope (drift only => ~1)", qslope, opts["qv_slope_min"], ">=")
    report.check("quadratic variation fit R^2", qr2, opts["r2_min"], ">")
    report.tolerances = {k: opts[k] for k in ("order_min", "qv_slope_min", "r2_min")}
    return report


# --------------------------------------------------------------------------
# Reservoir exchange (exploratory)
# --------------------------------------------------------------------------

def run_flux_exploratory(cfg: ExperimentConfig) -> EnsembleReport:
    """Time-averaged exchange ``j_k = r_k <alpha_k, pi>`` with each reservoir.

    ``j_k`` is the power the field delivers to reservoir variable k, so
    ``-j_k`` is the heat the field draws from reservoir k. The Ito identity
    ``d(r_k^2 / 2) = (-r_k^2 + j_k + T_k) dt + dM`` gives the steady-state
    consistency equation ``<r_k^2> = T_k + <j_k>``.
    """
    report = _new_report(cfg)
    report.metadata["label"] = "exploratory"
    phys, samp, opts = cfg.physics, cfg.sampling, cfg.options
    coupling = cfg.coupling()
    m, K = phys["m_grid"], coupling.n_reservoirs
    dt = phys["dt"]
    temps = coupling.temperatures
    n_burn = int(round(opts["t_burn"] / dt))
    n_avg = int(round(opts["t_average"] / dt))
    stride, nb = opts["stride"], opts["n_batches"]
    per_batch = n_avg // stride // nb
    if per_batch < 1:
        raise ConfigError("options.t_average: too short for the requested batches")
    integ = SplittingIntegrator(coupling, m, dt)
    from .linear_system import coupling_matrix

    A = coupling_matrix(coupling, m)
    n = 2 * m + 1
    seed = cfg.seed

    def task(idx):
        rngs = streams(seed, "init", idx)
        x = np.stack([sample_nu0_vectors(float(np.mean(temps)), m, K, g, (), temps) for g in rngs])
        noise = BlockNoise(streams(seed, "noise", idx), (2, integ.noise_dim), opts["noise_block"])
        x = _advance(integ, x, n_burn, noise)
        acc_j = np.zeros((len(idx), nb, K))
        acc_r = np.zeros((len(idx), nb, K))
        count = 0
        for k in range(per_batch * nb * stride):
            x = integ.step(x, noise())
            if (k + 1) % stride == 0:
                b = count // per_batch
                r = x[:, 2 * n:]
                acc_j[:, b] += r * (x[:, n: 2 * n] @ A)
                acc_r[:, b] += r**2
                count += 1
        integ.check(x, (n_burn + n_avg) * dt)
        return {"j": acc_j / per_batch, "r2": acc_r / per_batch}

    res = gather(ordered_map(task, samp["ensemble"], samp["chunk_size"], samp["workers"]))
    j = res["j"].mean(axis=1)
    r2 = res["r2"].mean(axis=1)
    z = opts["z"]
    N = j.shape[0]
    t_end = opts["t_burn"] + opts["t_average"]
    for k in range(K):
        report.observables.append(ObservableSummary.from_samples(f"j_{k + 1}", [t_end], j[:, k]))
        report.observables.append(ObservableSummary.from_samples(f"T_{k + 1} - <r_{k + 1}^2>", [t_end],
                                                                 temps[k] - r2[:, k]))
        resid = r2[:, k] - temps[k] - j[:, k]
        se = resid.std(ddof=1) / np.sqrt(N)
        report.check(f"reservoir {k + 1}: <r^2> = T + <j> (in se units)", abs(resid.mean()) / se, z)
    report.tables["batch_means_j"] = res["j"].mean(axis=0)
    report.tables["batch_means_r2"] = res["r2"].mean(axis=0)
    jm = j.mean(axis=0)
    jse = j.std(axis=0, ddof=1) / np.sqrt(N)
    if coupling.is_equilibrium:
        for k in range(K):
            report.check(f"equal temperatures: j_{k + 1} consistent with 0 (in se units)",
                         abs(jm[k]) / jse[k], z)
        if coupling.mu == 0:
            for k in range(K):
                se = r2[:, k].std(ddof=1) / np.sqrt(N)
                report.check(f"linear equilibrium: <r_{k + 1}^2> = T (in se units)",
                             abs(r2[:, k].mean() - temps[k]) / se, z)
    else:
        hot, cold = int(np.argmax(temps)), int(np.argmin(temps))
        report.check(f"hottest reservoir {hot + 1} heats the field: -j/se", -jm[hot] / jse[hot], z, ">=")
        report.check(f"coldest reservoir {cold + 1} is heated: j/se", jm[cold] / jse[cold], z, ">=")
    report.tolerances = {"z": z}
    return report


# --------------------------------------------------------------------------
# Measures
# --------------------------------------------------------------------------

def weighted_ecdf(values: np.ndarray, weights: np.ndarray):
    order = np.argsort(values)
    v = values[order]
    c = np.cumsum(weights[order])
    c /= c[-1]

    def cdf(x):
        i = np.searchsorted(v, x, side="right")
        return np.where(i > 0, c[np.maximum(i - 1, 0)], 0.0)

    return cdf


def run_measure_moments(cfg: ExperimentConfig) -> EnsembleReport:
    report = _new_report(cfg)
    opts, phys = cfg.options, cfg.physics
    seed = cfg.seed
    z = opts["z"]
    m = phys["m_grid"]
    mu = phys["mu"]
    T0 = float(phys["temperatures"][0])

    # free-measure moment identity
    n = opts["moment_samples"]
    rows = []
    for i, T in enumerate(opts["moment_temperatures"]):
        x = sample_nu0_vectors(T, m, 1, stream(seed, "moments", i), (n,))
        for s in opts["moment_s"]:
            v = vector_sobolev_norm(x[:, : 2 * (2 * m + 1)], m, 0, s) ** 2
            exact = expected_u_norm_sq(T, m, s)
            se = v.std(ddof=1) / np.sqrt(n)
            rows.append({"T": T, "s": s, "mean": v.mean(), "se": se, "exact": exact})
            report.check(f"free-measure E||u||^2_H^{s:.3g} at T={T:g} (in se units)",
                         abs(v.mean() - exact) / se, z)
    report.tables["moments"] = rows

    # Metropolis vs importance sampling
    mg = opts["gibbs_grid"]
    g0 = GibbsSampler(T0, 0.0, mg)
    acc0 = sample_gibbs(g0, 100, burn_in=10, rng=stream(seed, "gibbs_free", 0)).acceptance_rate
    report.check("acceptance rate at mu=0", acc0, 1.0, ">=")
    sampler = GibbsSampler(T0, mu, mg)
    out = sample_gibbs(sampler, opts["gibbs_samples"], burn_in=cfg.sampling["burn_in"],
                       rng=stream(seed, "gibbs", 0), n_chains=opts["gibbs_chains"])
    if mu > 0:
        phi4_mh = out.actions.reshape(-1) * (4 * T0 / mu)
        ess = out.ess()
        mh_mean, mh_se = phi4_mh.mean(), phi4_mh.std(ddof=1) / np.sqrt(ess)
        xi = sample_nu0_vectors(T0, mg, 1, stream(seed, "importance", 0), (opts["importance_samples"],))
        phi4 = quartic_integral(real_to_component(xi[:, : 2 * mg + 1]))
        la = -quartic_action_vector(xi, mg, mu, T0)
        is_mean, is_se = importance_estimate(phi4, la)
        free_mean, free_se = phi4.mean(), phi4.std(ddof=1) / np.sqrt(phi4.size)
        report.tables["gibbs"] = {"acceptance": out.acceptance_rate, "ess": ess, "split_rhat": out.split_rhat(),
                                  "metropolis": [mh_mean, mh_se], "importance": [is_mean, is_se],
                                  "free": [free_mean, free_se]}
        report.check("Metropolis vs importance E[phi^4] (joint se units)",
                     abs(mh_mean - is_mean) / np.hypot(mh_se, is_se), z)
        report.check("quartic reweighting lowers E[phi^4] (joint se units)",
                     (free_mean - mh_mean) / np.hypot(mh_se, free_se), z, ">")

        # two-mode Kolmogorov-Smirnov check
        toy = GibbsSampler(T0, mu, 1)
        ks = sample_gibbs(toy, opts["ks_samples"], burn_in=cfg.sampling["burn_in"],
                          rng=stream(seed, "ks_chain", 0), n_chains=20, thin=opts["ks_thin"])
        xs = ks.vectors.reshape(-1, ks.vectors.shape[-1])
        a1 = 0.5 * (xs[:, 1] ** 2 + xs[:, 2] ** 2)  # |phi_hat_1|^2
        xo = sample_nu0_vectors(T0, 1, 1, stream(seed, "ks_oracle", 0), (opts["ks_oracle_samples"],))
        w = np.exp(-quartic_action_vector(xo, 1, mu, T0))
        cdf = weighted_ecdf(0.5 * (xo[:, 1] ** 2 + xo[:, 2] ** 2), w)
        p = stats.kstest(a1, cdf).pvalue
        report.tables["ks"] = {"pvalue": p, "acceptance": ks.acceptance_rate}
        report.check("two-mode chain vs importance-sampled law: KS p-value", p, opts["ks_p_min"], ">")

    # partition functions
    cut = sorted(phys["cutoffs"])
    fam = estimate_Z_family(mu, T0, max(cut), cut, n=opts["z_samples"], rng=stream(seed, "z_family", 0))
    zrows = {str(M): list(fam[M]) for M in cut}
    for a, b in zip(cut, cut[1:]):
        d = fam["weights"][a] - fam["weights"][b]
        est, se = jackknife_mean(d)
        report.check(f"Z_{a} >= Z_{b} with common draws (se units, lower side)", -est / se if se > 0 else 0.0,
                     z, "<=")
    report.tables["Z"] = zrows

    # tightness
    s = opts["tightness_s"]
    scale = np.sqrt(expected_u_norm_sq(T0, max(cut), s))
    betas = [f * scale for f in opts["tightness_beta_factors"]]
    table = tightness_report(mu, T0, cut, s, betas, n=opts["tightness_samples"],
                             rng=stream(seed, "tightness", 0), n_sigma=z)
    report.tables["tightness"] = [vars(r) for r in table.rows]
    worst = max(r.tail_mass - r.bound - z * r.tail_se for r in table.rows)
    report.check("max over (M, beta) cells of tail mass - bound - z*se", worst, 0.0)
    for M in cut:
        ms = table.masses(M)
        report.check(f"M={M}: tail mass nonincreasing in beta", float(np.max(np.diff(ms), initial=0.0)), 0.0)
    big = [r.tail_mass for r in table.rows if np.isclose(r.beta, 10 * scale)]
    if big:
        report.check("tail mass at beta = 10 * free rms below 0.05", max(big), 0.05, "<")
    report.tolerances = {"z": z, "ks_p_min": opts["ks_p_min"]}
    return report


RUNNERS = {
    "invariance": run_invariance_experiment,
    "cutoff_convergence": run_cutoff_convergence,
    "tail_bound": run_tail_bound,
    "semigroup_bound": run_semigroup_bound,
    "picard_contraction": run_picard_contraction,
    "bourgain_drift": run_bourgain_drift,
    "flux_exploratory": run_flux_exploratory,
    "measure_moments": run_measure_moments,
}
assert set(RUNNERS) == set(EXPERIMENTS)


def run_experiment(cfg: ExperimentConfig) -> EnsembleReport:
    return RUNNERS[cfg.experiment](cfg)
