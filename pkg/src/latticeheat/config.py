"""Run configurations: a JSON-serialisable dataclass with up-front validation."""
from __future__ import annotations

import copy
import hashlib
import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Any, Optional

KINDS = ("spectral", "control", "observability", "heatkernel", "carleman", "necessity")

SPECTRAL_MODES = ("certificates", "calculus", "operator_spectra", "projectors", "localization", "caccioppoli")
POTENTIAL_NAMES = ("zero", "constant", "sine", "power")
MASK_KINDS = ("full", "empty", "equidistributed")


class ConfigError(ValueError):
    """Invalid configuration; ``fields`` lists every offending dotted path."""

    def __init__(self, problems: dict):
        self.fields = sorted(problems)
        self.problems = problems
        msg = "; ".join(f"{k}: {v}" for k, v in sorted(problems.items()))
        super().__init__(f"invalid config ({msg})")


@dataclass
class RunConfig:
    kind: str
    name: str = "run"
    box: dict = field(default_factory=lambda: {"d": 1, "h": 0.1, "half_width": 8.0})
    potential: dict = field(default_factory=lambda: {"name": "zero"})
    mask: dict = field(default_factory=lambda: {"kind": "equidistributed", "L": 2.0, "gamma": 0.5})
    schedule: dict = field(default_factory=lambda: {"T": 2.0, "rho": 0.5, "eps0": 1.0})
    params: dict = field(default_factory=dict)
    sweep: dict = field(default_factory=dict)
    output_dir: Optional[str] = None
    seed: int = 0

    # -- serialisation ------------------------------------------------------
    def to_dict(self) -> dict:
        return copy.deepcopy(asdict(self))

    @classmethod
    def from_dict(cls, data: dict) -> "RunConfig":
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(data) - known)
        if unknown:
            raise ConfigError({k: "unknown field" for k in unknown})
        if "kind" not in data:
            raise ConfigError({"kind": "missing"})
        return cls(**copy.deepcopy(data))

    def to_json(self, path=None) -> str:
        text = json.dumps(self.to_dict(), indent=2, sort_keys=True)
        if path is not None:
            Path(path).write_text(text + "\n")
        return text

    @classmethod
    def from_json(cls, path_or_text) -> "RunConfig":
        p = Path(str(path_or_text))
        text = p.read_text() if not str(path_or_text).lstrip().startswith("{") and p.exists() else str(path_or_text)
        return cls.from_dict(json.loads(text))

    def config_hash(self) -> str:
        """sha256 of the canonical JSON, ignoring the output directory."""
        d = self.to_dict()
        d.pop("output_dir", None)
        blob = json.dumps(d, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()

    def with_overrides(self, overrides: dict) -> "RunConfig":
        """Copy with dotted-path overrides applied, e.g. ``{"box.h": 0.05}``."""
        d = self.to_dict()
        for key, value in overrides.items():
            parts = key.split(".")
            cur = d
            for p in parts[:-1]:
                if not isinstance(cur.get(p), dict):
                    cur[p] = {}
                cur = cur[p]
            cur[parts[-1]] = value
        return RunConfig.from_dict(d)

    # -- validation -----------------------------------------------------------
    def problems(self) -> dict:
        out: dict[str, str] = {}
        if self.kind not in KINDS:
            out["kind"] = f"must be one of {KINDS}"
        _check_box(self.box, out)
        _check_potential(self.potential, out)
        _check_mask(self.mask, out)
        _check_schedule(self.schedule, out)
        if not isinstance(self.seed, int) or isinstance(self.seed, bool):
            out["seed"] = "must be an integer"
        if not isinstance(self.sweep, dict):
            out["sweep"] = "must be a mapping"
        else:
            for axis, values in self.sweep.items():
                if not isinstance(values, list) or not values:
                    out[f"sweep.{axis}"] = "must be a nonempty list"
                elif axis in ("h", "T", "R") and not all(_positive_or_zero(v, axis == "R") for v in values):
                    out[f"sweep.{axis}"] = "values must be positive"
        if self.kind == "spectral":
            mode = self.params.get("mode", "certificates")
            if mode not in SPECTRAL_MODES:
                out["params.mode"] = f"must be one of {SPECTRAL_MODES}"
        return out

    def validate(self) -> "RunConfig":
        bad = self.problems()
        if bad:
            raise ConfigError(bad)
        return self


def _positive_or_zero(v: Any, allow_zero: bool) -> bool:
    if not isinstance(v, (int, float)) or isinstance(v, bool):
        return False
    return v >= 0 if allow_zero else v > 0


def _number(v) -> bool:
    return isinstance(v, (int, float)) and not isinstance(v, bool)


def _check_box(box: Any, out: dict) -> None:
    if not isinstance(box, dict):
        out["box"] = "must be a mapping"
        return
    d = box.get("d")
    if d not in (1, 2, 3):
        out["box.d"] = "must be 1, 2 or 3"
    h = box.get("h")
    if not _number(h) or h <= 0:
        out["box.h"] = "must be a positive number"
    hw = box.get("half_width")
    if not _number(hw) or hw <= 0:
        out["box.half_width"] = "must be a positive number"
    elif _number(h) and h > 0 and hw / h < 1:
        out["box.half_width"] = "must hold at least one node on each side"


def _check_potential(pot: Any, out: dict) -> None:
    if not isinstance(pot, dict):
        out["potential"] = "must be a mapping"
        return
    name = pot.get("name")
    if name not in POTENTIAL_NAMES:
        out["potential.name"] = f"must be one of {POTENTIAL_NAMES}"
    if name == "constant" and not _number(pot.get("c", 1.0)):
        out["potential.c"] = "must be a number"
    if name == "power":
        beta = pot.get("beta")
        if not _number(beta) or beta <= 0:
            out["potential.beta"] = "must be a positive number"


def _check_mask(mask: Any, out: dict) -> None:
    if not isinstance(mask, dict):
        out["mask"] = "must be a mapping"
        return
    kind = mask.get("kind", "equidistributed")
    if kind not in MASK_KINDS:
        out["mask.kind"] = f"must be one of {MASK_KINDS}"
    if kind == "equidistributed":
        L = mask.get("L")
        if not _number(L) or L <= 0:
            out["mask.L"] = "must be a positive number"
        g = mask.get("gamma")
        if not _number(g) or not 0 < g <= 1:
            out["mask.gamma"] = "must lie in (0, 1]"
    r = mask.get("puncture_radius")
    if r is not None and (not _number(r) or r < 0):
        out["mask.puncture_radius"] = "must be nonnegative"


def _check_schedule(sched: Any, out: dict) -> None:
    if not isinstance(sched, dict):
        out["schedule"] = "must be a mapping"
        return
    T = sched.get("T", 1.0)
    if not _number(T) or T <= 0:
        out["schedule.T"] = "must be positive"
    rho = sched.get("rho", 0.5)
    if not _number(rho) or not 0 < rho < 1:
        out["schedule.rho"] = "must lie in (0, 1)"
    e0 = sched.get("eps0", 1.0)
    if not _number(e0) or e0 <= 0:
        out["schedule.eps0"] = "must be positive"


def load_config(path) -> RunConfig:
    return RunConfig.from_json(path).validate()
