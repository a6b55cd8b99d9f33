"""
Ensemble reports: observable summaries, pass/fail assertions, metadata.

Reports are written as ``report.csv`` and ``report.json``. Both are pure
functions of the report contents (sorted keys, fixed float formatting, no
timestamps), so reruns with the same configuration produce identical bytes.
"""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy import stats

Z95 = float(stats.norm.ppf(0.975))


def z_threshold(n_tests: int, z: float = 3.0, bonferroni: bool = True) -> float:
    """Two-sided threshold keeping the family-wise error of ``n_tests`` at that of one ``z`` test."""
    if not bonferroni or n_tests <= 1:
        return float(z)
    alpha = 2 * stats.norm.sf(z)
    return float(stats.norm.isf(alpha / (2 * n_tests)))


def _clean(obj):
    """Make values JSON-safe: arrays to lists, non-finite floats to None."""
    if isinstance(obj, dict):
        return {str(k): _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _clean(obj.tolist())
    if isinstance(obj, (np.bool_, bool)):
        return bool(obj)
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        v = float(obj)
        return v if math.isfinite(v) else None
    return obj


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, (bool, np.bool_)):
        return "true" if v else "false"
    if isinstance(v, (float, np.floating)):
        return format(float(v), ".17g")
    return str(v)


@dataclass
class ObservableSummary:
    """Ensemble statistics of one observable on a time grid."""

    name: str
    times: list
    mean: list
    variance: list
    half_width: list
    n: int
    tolerance: float | None = None
    passed: bool | None = None

    @classmethod
    def from_samples(cls, name: str, times, samples, **kw) -> "ObservableSummary":
        """``samples`` has shape (n_trajectories, n_times)."""
        samples = np.asarray(samples, dtype=float)
        if samples.ndim == 1:
            samples = samples[:, None]
        n = samples.shape[0]
        var = samples.var(axis=0, ddof=1) if n > 1 else np.zeros(samples.shape[1])
        return cls(name, list(np.atleast_1d(times).astype(float)), list(samples.mean(axis=0)),
                   list(var), list(Z95 * np.sqrt(var / n)), n, **kw)


@dataclass
class Assertion:
    """One declared check: passes iff ``statistic`` satisfies ``relation threshold``."""

    name: str
    passed: bool
    statistic: float
    threshold: float
    relation: str = "<="
    detail: str = ""


@dataclass
class EnsembleReport:
    experiment: str
    observables: list = field(default_factory=list)
    assertions: list = field(default_factory=list)
    tolerances: dict = field(default_factory=dict)
    metadata: dict = field(default_factory=dict)
    tables: dict = field(default_factory=dict)

    @property
    def passed(self) -> bool:
        return all(a.passed for a in self.assertions) and all(
            o.passed is not False for o in self.observables
        )

    def check(self, name: str, statistic: float, threshold: float, relation: str = "<=",
              detail: str = "") -> Assertion:
        """Record an assertion and return it."""
        statistic, threshold = float(statistic), float(threshold)
        ok = {
            "<=": statistic <= threshold,
            "<": statistic < threshold,
            ">=": statistic >= threshold,
            ">": statistic > threshold,
        }[relation]
        a = Assertion(name, bool(ok), statistic, threshold, relation, detail)
        self.assertions.append(a)
        return a

    def assertion(self, name: str) -> Assertion:
        for a in self.assertions:
            if a.name == name:
                return a
        raise KeyError(name)

    def failures(self) -> list:
        out = [a.name for a in self.assertions if not a.passed]
        out += [o.name for o in self.observables if o.passed is False]
        return out

    def to_dict(self) -> dict:
        return _clean({
            "experiment": self.experiment,
            "passed": self.passed,
            "metadata": self.metadata,
            "tolerances": self.tolerances,
            "observables": [asdict(o) for o in self.observables],
            "assertions": [asdict(a) for a in self.assertions],
            "tables": self.tables,
        })

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["section", "name", "time", "value", "variance", "half_width_95",
                    "threshold", "relation", "passed"])
        for o in self.observables:
            for i, t in enumerate(o.times):
                w.writerow(["observable", o.name, _fmt(t), _fmt(o.mean[i]), _fmt(o.variance[i]),
                            _fmt(o.half_width[i]), _fmt(o.tolerance), "", _fmt(o.passed)])
        for a in self.assertions:
            w.writerow(["assertion", a.name, "", _fmt(a.statistic), "", "", _fmt(a.threshold),
                        a.relation, _fmt(a.passed)])
        return buf.getvalue()

    def write(self, directory, formats=("csv", "json")) -> list:
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        paths = []
        if "csv" in formats:
            p = directory / "report.csv"
            p.write_text(self.to_csv())
            paths.append(p)
        if "json" in formats:
            p = directory / "report.json"
            p.write_text(self.to_json())
            paths.append(p)
        return paths

    def summary(self) -> str:
        """One line per assertion plus a verdict."""
        lines = [f"experiment: {self.experiment}  config: {self.metadata.get('config_hash', '')[:12]}"]
        for a in self.assertions:
            flag = "PASS" if a.passed else "FAIL"
            lines.append(f"  [{flag}] {a.name}: {a.statistic:.6g} {a.relation} {a.threshold:.6g}")
        for o in self.observables:
            if o.passed is not None:
                flag = "PASS" if o.passed else "FAIL"
                lines.append(f"  [{flag}] {o.name}: |{o.mean[-1]:.4g}| within {o.tolerance:.4g}")
        lines.append("ALL PASS" if self.passed else f"FAILED: {', '.join(self.failures())}")
        return "\n".join(lines)
