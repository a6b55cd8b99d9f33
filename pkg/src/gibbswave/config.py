"""
Experiment configuration: JSON schema, defaults, physics checks, hashing.

A configuration file looks like::

    {
      "experiment": "invariance",
      "physics": {
        "temperatures": [1.0],
        "alphas": [{"cos": [1.0]}],
        "mu": 1.0,
        "cutoffs": [8, 16],
        "dt": 0.001,
        "t_final": 1.0
      },
      "sampling": {"ensemble": 10000, "seed": 42},
      "output": {"directory": "out"}
    }

Each coupling function is given by real Fourier series coefficients,
``alpha(x) = const + sum_k cos[k-1] cos(kx) + sin[k-1] sin(kx)``.
"""

from __future__ import annotations

import copy
import hashlib
import json
from dataclasses import dataclass
from pathlib import Path

import jsonschema
import numpy as np

from .linear_system import CouplingConfig
from .spectral_field import SQRT2PI

EXPERIMENTS = (
    "invariance",
    "cutoff_convergence",
    "tail_bound",
    "semigroup_bound",
    "picard_contraction",
    "bourgain_drift",
    "flux_exploratory",
    "measure_moments",
)

_NUM = {"type": "number"}
_NUM_LIST = {"type": "array", "items": _NUM}

ALPHA_SCHEMA = {
    "type": "object",
    "additionalProperties": False,
    "properties": {
        "const": _NUM,
        "cos": _NUM_LIST,
        "sin": _NUM_LIST,
    },
}

SCHEMA = {
    "$schema": "https://json-schema.org/draft/2020-12/schema",
    "title": "gibbswave experiment configuration",
    "type": "object",
    "required": ["experiment", "physics"],
    "additionalProperties": False,
    "properties": {
        "experiment": {"enum": list(EXPERIMENTS)},
        "physics": {
            "type": "object",
            "required": ["temperatures", "alphas"],
            "additionalProperties": False,
            "properties": {
                "temperatures": {"type": "array", "minItems": 1, "items": {"type": "number", "minimum": 0}},
                "alphas": {"type": "array", "minItems": 1, "items": ALPHA_SCHEMA},
                "mu": {"type": "number", "minimum": 0},
                "m_grid": {"type": "integer", "minimum": 1},
                "cutoffs": {"type": "array", "minItems": 1, "items": {"type": "integer", "minimum": 0}},
                "reference_cutoff": {"type": "integer", "minimum": 1},
                "dt": {"type": "number", "exclusiveMinimum": 0},
                "t_final": {"type": "number", "minimum": 0},
                "s_values": {"type": "array", "items": _NUM},
            },
        },
        "sampling": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "ensemble": {"type": "integer", "minimum": 1},
                "burn_in": {"type": "integer", "minimum": 0},
                "seed": {"type": "integer", "minimum": 0},
                "chunk_size": {"type": "integer", "minimum": 1},
                "workers": {"type": "integer", "minimum": 1},
            },
        },
        "output": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "directory": {"type": "string"},
                "formats": {"type": "array", "items": {"enum": ["csv", "json"]}},
                "write_samples": {"type": "boolean"},
            },
        },
        "options": {"type": "object"},
    },
}

PHYSICS_DEFAULTS = {
    "mu": 1.0,
    "m_grid": 16,
    "cutoffs": [8, 16],
    "reference_cutoff": 64,
    "dt": 1e-3,
    "t_final": 1.0,
    "s_values": [1 / 3, 0.49],
}

SAMPLING_DEFAULTS = {"ensemble": 1000, "burn_in": 200, "seed": 0, "chunk_size": 500, "workers": 1}

OUTPUT_DEFAULTS = {"directory": "gibbswave_out", "formats": ["csv", "json"], "write_samples": False}

# Experiment-specific knobs. Unknown keys are configuration errors.
OPTION_DEFAULTS = {
    "invariance": {
        "z": 3.0,
        "bonferroni": False,
        "richardson": True,
        "weak_generator": True,
        "weak_cutoffs": None,
        "weak_deltas": [1e-2, 5e-3, 2.5e-3],
        "weak_ensemble": None,
        "weak_r_nodes": 6,
        "noise_block": 100,
    },
    "cutoff_convergence": {"s": 0.35, "stride": 10, "control": True, "control_support": 4,
                           "noise_block": 100},
    "tail_bound": {"s": 0.5, "beta": 1.0, "n_levels": 30, "min_count": 20, "r2_min": 0.9,
                   "noise_block": 100, "z": 3.0},
    "semigroup_bound": {"s_values": [1 / 3, 0.5, 1.0], "t_max": [50.0, 100.0], "n_configs": 3,
                        "max_modes": 4, "rel_tol": 0.01},
    "picard_contraction": {"beta": 0.1, "s": 0.5, "t_spans": [0.1, 0.2], "ratio_max": 0.5,
                           "agreement_tol": 1e-5, "doubling_range": [1.5, 2.5], "tol": 1e-12},
    "bourgain_drift": {"N": 4, "dts": [4e-3, 2e-3, 1e-3], "order_min": 1.8, "qv_slope_min": 0.8,
                       "r2_min": 0.95, "init_temperature": 1.0},
    "flux_exploratory": {"t_burn": 20.0, "t_average": 200.0, "stride": 10, "n_batches": 4,
                         "z": 3.0, "noise_block": 100},
    "measure_moments": {
        "z": 3.0,
        "moment_samples": 100_000,
        "moment_temperatures": [0.5, 1.0, 2.0],
        "moment_s": [0.0, 1 / 3, 0.49],
        "gibbs_grid": 16,
        "gibbs_samples": 10_000,
        "gibbs_chains": 20,
        "importance_samples": 100_000,
        "ks_samples": 4000,
        "ks_thin": 5,
        "ks_oracle_samples": 1_000_000,
        "ks_p_min": 0.01,
        "tightness_s": 0.45,
        "tightness_samples": 20_000,
        "tightness_beta_factors": [0.5, 1.0, 2.0, 4.0, 10.0],
        "z_samples": 10_000,
    },
}

# Keys that change neither results nor reports.
_UNHASHED = {("sampling", "workers"), ("output",)}


class ConfigError(ValueError):
    """Invalid configuration; ``messages`` holds one entry per problem."""

    def __init__(self, messages):
        self.messages = [messages] if isinstance(messages, str) else list(messages)
        super().__init__("; ".join(self.messages))


def _path(err) -> str:
    parts = [str(p) for p in err.absolute_path]
    return ".".join(parts) if parts else "<root>"


def schema_errors(raw: dict) -> list:
    validator = jsonschema.Draft202012Validator(SCHEMA)
    errs = sorted(validator.iter_errors(raw), key=lambda e: list(map(str, e.absolute_path)))
    return [f"{_path(e)}: {e.message}" for e in errs]


def alpha_coefficients(spec: dict, m_alpha: int | None = None) -> np.ndarray:
    """Hermitian coefficients of ``const + sum cos_k cos(kx) + sin_k sin(kx)``."""
    cos = list(spec.get("cos", []))
    sin = list(spec.get("sin", []))
    m = max(len(cos), len(sin), 1) if m_alpha is None else m_alpha
    c = np.zeros(2 * m + 1, dtype=complex)
    c[m] = spec.get("const", 0.0) * SQRT2PI
    for k, a in enumerate(cos, start=1):
        c[m + k] += a * SQRT2PI / 2
        c[m - k] += a * SQRT2PI / 2
    for k, b in enumerate(sin, start=1):
        c[m + k] += -1j * b * SQRT2PI / 2
        c[m - k] += 1j * b * SQRT2PI / 2
    return c


def alpha_support(spec: dict) -> int:
    """Largest wavenumber with a nonzero coefficient."""
    ks = [k for k, a in enumerate(spec.get("cos", []), 1) if a != 0]
    ks += [k for k, b in enumerate(spec.get("sin", []), 1) if b != 0]
    return max(ks, default=0)


def physics_errors(cfg: dict) -> list:
    exp = cfg["experiment"]
    phys = cfg["physics"]
    errs = []
    temps = phys["temperatures"]
    K = len(phys["alphas"])
    if len(temps) != K:
        errs.append(f"physics.temperatures: has {len(temps)} entries but physics.alphas has {K}")
    if exp == "invariance" and len(set(temps)) > 1:
        errs.append(
            "physics.temperatures: the invariance experiment needs equal temperatures "
            f"(got {temps}); the Gibbs measure is only an equilibrium state when every "
            "reservoir has the same temperature"
        )
    if exp in ("invariance", "measure_moments") and min(temps, default=1) <= 0:
        errs.append("physics.temperatures: sampling the Gibbs measure needs positive temperatures")
    if exp == "flux_exploratory" and K < 2:
        errs.append("physics.alphas: the flux experiment needs at least two reservoirs")
    if exp == "cutoff_convergence":
        ref = phys["reference_cutoff"]
        bad = [M for M in phys["cutoffs"] if M >= ref]
        if bad:
            errs.append(f"physics.cutoffs: {bad} must be below physics.reference_cutoff={ref}")
    if exp == "invariance" and min(phys["cutoffs"]) < 1:
        errs.append("physics.cutoffs: invariance runs need cutoffs >= 1")
    opts = cfg["options"]
    unknown = sorted(set(opts) - set(OPTION_DEFAULTS[exp]))
    if unknown:
        errs.append(f"options: unknown keys for {exp}: {unknown}")
    if exp == "measure_moments" and opts.get("tightness_s", 0.45) >= 0.5:
        errs.append("options.tightness_s: the tightness bound needs s < 1/2")
    return errs


def _merge(defaults: dict, given: dict | None) -> dict:
    out = copy.deepcopy(defaults)
    out.update(copy.deepcopy(given or {}))
    return out


@dataclass(frozen=True)
class ExperimentConfig:
    """A validated, fully resolved configuration."""

    experiment: str
    physics: dict
    sampling: dict
    output: dict
    options: dict

    @classmethod
    def from_dict(cls, raw: dict, overrides: dict | None = None) -> "ExperimentConfig":
        if not isinstance(raw, dict):
            raise ConfigError("<root>: configuration must be a JSON object")
        raw = copy.deepcopy(raw)
        for (section, key), value in (overrides or {}).items():
            if value is not None:
                raw.setdefault(section, {})[key] = value
        errs = schema_errors(raw)
        if errs:
            raise ConfigError(errs)
        exp = raw["experiment"]
        resolved = {
            "experiment": exp,
            "physics": _merge(PHYSICS_DEFAULTS, raw["physics"]),
            "sampling": _merge(SAMPLING_DEFAULTS, raw.get("sampling")),
            "output": _merge(OUTPUT_DEFAULTS, raw.get("output")),
            "options": raw.get("options", {}),
        }
        errs = physics_errors(resolved)
        if errs:
            raise ConfigError(errs)
        resolved["options"] = _merge(OPTION_DEFAULTS[exp], resolved["options"])
        return cls(**resolved)

    @classmethod
    def load(cls, path, overrides: dict | None = None) -> "ExperimentConfig":
        try:
            raw = json.loads(Path(path).read_text())
        except FileNotFoundError:
            raise ConfigError(f"config file not found: {path}") from None
        except json.JSONDecodeError as err:
            raise ConfigError(f"config is not valid JSON: {err}") from None
        return cls.from_dict(raw, overrides)

    def to_dict(self) -> dict:
        return {
            "experiment": self.experiment,
            "physics": copy.deepcopy(self.physics),
            "sampling": copy.deepcopy(self.sampling),
            "output": copy.deepcopy(self.output),
            "options": copy.deepcopy(self.options),
        }

    def hashed_dict(self) -> dict:
        """The part of the config that determines results."""
        d = self.to_dict()
        for path in _UNHASHED:
            if len(path) == 1:
                d.pop(path[0], None)
            else:
                d[path[0]].pop(path[1], None)
        return d

    def digest(self) -> str:
        blob = json.dumps(self.hashed_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()

    @property
    def seed(self) -> int:
        return int(self.sampling["seed"])

    def coupling(self, mu: float | None = None, temperatures=None) -> CouplingConfig:
        specs = self.physics["alphas"]
        m_alpha = max(max(len(s.get("cos", [])), len(s.get("sin", []))) for s in specs)
        m_alpha = max(m_alpha, 1)
        alphas = np.stack([alpha_coefficients(s, m_alpha) for s in specs])
        temps = self.physics["temperatures"] if temperatures is None else temperatures
        return CouplingConfig(alphas, temps, self.physics["mu"] if mu is None else mu)


def schema_json() -> str:
    return json.dumps(SCHEMA, indent=2, sort_keys=True)
