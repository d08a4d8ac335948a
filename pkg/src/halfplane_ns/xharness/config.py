"""Experiment configuration documents.

A document is INI-style: ``[section]`` headers and ``key = value`` lines,
``#`` comments.  Sections and keys are fixed (see ``SCHEMA``); anything else is
rejected with the offending line number.  Omitted keys take the documented
defaults of the named experiment (``DEFAULTS``), so a document holding only
``[experiment] name = mms_convergence`` is complete.

Example::

    [experiment]
    name = nu_sweep_limit
    nu_list = 50, 100, 200, 400

    [params]
    mu = 1
    lambda = 0
"""

from __future__ import annotations

import configparser
import hashlib
import math
import re
from dataclasses import dataclass, field
from typing import Any, Dict, Optional, Tuple

from ..core import FluidParams, Grid, ValidationError, make_grid, make_params
from .presets import IC_DEFAULTS, PRESETS

EXPERIMENTS = (
    "reflection_unit",
    "mms_convergence",
    "density_bound_sweep",
    "vacuum_decay",
    "nonvacuum_longtime",
    "nu_sweep_limit",
    "zlotnik_suite",
)


class ConfigError(ValidationError):
    def __init__(self, msg: str, line: Optional[int] = None):
        self.line = line
        super().__init__(f"line {line}: {msg}" if line is not None else msg)


# type tags: f float, i int, s str, b bool, F float list, I int list, S str list, P float pair
SCHEMA: Dict[str, Dict[str, str]] = {
    "experiment": {
        "name": "s", "t_end": "f", "sample_every": "f", "seed": "i", "out_dir": "s",
        "nu_list": "F", "fit_window": "P", "verdicts": "S",
        # experiment-specific knobs
        "n_fields": "i", "neumann_grids": "I", "mms_levels": "I", "dt_h2": "f",
        "n1_target": "f", "edge_mass_weighted": "b", "ball_radius": "f",
        "compare_times": "F", "zlotnik_cases": "i", "trace_x0": "P", "trace_tmin": "f",
        "trace_levels": "I",
    },
    "params": {"mu": "f", "lambda": "f", "gamma": "f", "A": "f", "rho_far": "f"},
    "grid": {"lx": "f", "ly": "f", "nx": "i", "ny": "i"},
    "ic": {"preset": "s", "amp": "f", "rho_amp": "f", "width": "f", "center_x1": "f",
           "center_x2": "f", "normalize_mass": "b"},
    "stepper": {"cfl": "f", "visc_tol": "f", "visc_maxit": "i", "dt_max": "f",
                "wall_budget": "f", "checkpoint_every": "f"},
}

_BASE: Dict[str, Dict[str, Any]] = {
    "experiment": {"t_end": 1.0, "sample_every": 0.1, "seed": 0, "out_dir": "runs",
                   "nu_list": None, "fit_window": (0.0, math.inf), "verdicts": None},
    "params": {"mu": 1.0, "lambda": 0.0, "gamma": 2.0, "A": 0.0, "rho_far": 0.0},
    "grid": {"lx": 2.0, "ly": 2.0, "nx": 64, "ny": 32},
    "ic": dict({"preset": "gauss_bump"}, **{k: v for k, v in IC_DEFAULTS.items()}),
    "stepper": {"cfl": 0.4, "visc_tol": 1e-10, "visc_maxit": 200, "dt_max": math.inf,
                "wall_budget": math.inf, "checkpoint_every": 0.0},
}
_BASE["ic"]["normalize_mass"] = False

# Per-experiment defaults; these are the configurations the acceptance suite runs.
DEFAULTS: Dict[str, Dict[str, Dict[str, Any]]] = {
    "reflection_unit": {
        "experiment": {"n_fields": 20, "neumann_grids": (64, 128, 256), "verdicts": ("C1", "C2"),
                       "t_end": 0.0, "sample_every": 0.0},
        "grid": {"lx": 1.0, "ly": 2.0, "nx": 32, "ny": 32},
    },
    "mms_convergence": {
        "experiment": {"t_end": 0.5, "sample_every": 0.0, "mms_levels": (1, 2, 4),
                       "dt_h2": 0.5, "verdicts": ("C3",)},
        "params": {"mu": 1.5, "lambda": 0.5, "rho_far": 1.0},
        "grid": {"lx": math.pi / 4, "ly": math.pi, "nx": 8, "ny": 16},
        "ic": {"preset": "perturbed_constant", "rho_amp": 0.0},
    },
    "density_bound_sweep": {
        "experiment": {"t_end": 2.0, "sample_every": 0.1, "nu_list": (50.0, 100.0, 200.0, 400.0),
                       "verdicts": ("C5",)},
        "params": {"A": 0.5, "rho_far": 1.0},
        "grid": {"lx": 2.0, "ly": 2.0, "nx": 128, "ny": 64},
        "ic": {"preset": "compressive", "amp": -1.0, "rho_amp": 0.5, "width": 0.5},
    },
    "vacuum_decay": {
        "experiment": {"t_end": 20.0, "sample_every": 0.25, "fit_window": (1.0, 20.0),
                       "n1_target": 0.25, "edge_mass_weighted": True,
                       "verdicts": ("C4", "C7", "C8")},
        "params": {"mu": 1.0},
        "grid": {"lx": 8.0, "ly": 8.0, "nx": 256, "ny": 128},
        "ic": {"preset": "gauss_bump", "width": 0.4, "normalize_mass": True},
    },
    "nonvacuum_longtime": {
        "experiment": {"t_end": 4.0, "sample_every": 0.25, "verdicts": ("C9",)},
        "params": {"A": 0.5, "rho_far": 1.0},
        "grid": {"lx": 4.0, "ly": 4.0, "nx": 128, "ny": 64},
        "ic": {"preset": "perturbed_constant", "rho_amp": 0.5, "width": 0.5},
    },
    "nu_sweep_limit": {
        "experiment": {"t_end": 1.0, "sample_every": 0.05, "fit_window": (0.2, 1.0),
                       "nu_list": (50.0, 100.0, 200.0, 400.0), "ball_radius": 1.0,
                       "compare_times": (1.0,), "verdicts": ("C6",)},
        "params": {"A": 0.5, "rho_far": 1.0},
        "grid": {"lx": 2.0, "ly": 2.0, "nx": 128, "ny": 64},
        "ic": {"preset": "shear_divfree", "amp": 1.0, "rho_amp": 0.5, "width": 0.5},
    },
    "zlotnik_suite": {
        "experiment": {"t_end": 0.6, "sample_every": 0.0, "zlotnik_cases": 200,
                       "trace_x0": (0.35, 0.35), "trace_tmin": 0.1, "trace_levels": (1, 2, 4),
                       "verdicts": ("C10",)},
        "grid": {"lx": 3.0, "ly": 3.0, "nx": 32, "ny": 16},
        "ic": {"preset": "gauss_bump", "amp": 0.3, "rho_amp": 0.5, "width": math.sqrt(0.5)},
        "stepper": {"cfl": 0.2},
    },
}

_SECTION_ORDER = ("experiment", "params", "grid", "ic", "stepper")


def defaults_for(name: str) -> Dict[str, Dict[str, Any]]:
    if name not in DEFAULTS:
        raise ConfigError(f"unknown experiment {name!r}; known: {', '.join(EXPERIMENTS)}")
    out = {s: dict(v) for s, v in _BASE.items()}
    for s, kv in DEFAULTS[name].items():
        out[s].update(kv)
    out["experiment"]["name"] = name
    return out


@dataclass(frozen=True)
class ExperimentConfig:
    name: str
    params: FluidParams
    grid: Grid
    ic_preset: str
    ic: Dict[str, float]
    t_end: float
    sample_every: float
    nu_list: Optional[Tuple[float, ...]]
    fit_window: Tuple[float, float]
    out_dir: str
    seed: int
    stepper: Dict[str, float]
    extra: Dict[str, Any] = field(default_factory=dict)
    verdicts: Tuple[str, ...] = ()

    def values(self) -> Dict[str, Dict[str, Any]]:
        """Nested section -> key -> value view (the inverse of parsing)."""
        p = self.params
        ex = {"name": self.name, "t_end": self.t_end, "sample_every": self.sample_every,
              "seed": self.seed, "out_dir": self.out_dir, "nu_list": self.nu_list,
              "fit_window": self.fit_window, "verdicts": self.verdicts}
        ex.update(self.extra)
        return {
            "experiment": ex,
            "params": {"mu": p.mu, "lambda": p.lam, "gamma": p.gamma, "A": p.capA,
                       "rho_far": p.rho_far},
            "grid": {"lx": self.grid.lx, "ly": self.grid.ly, "nx": self.grid.nx,
                     "ny": self.grid.ny},
            "ic": dict({"preset": self.ic_preset}, **self.ic),
            "stepper": dict(self.stepper),
        }

    def with_params(self, params: FluidParams) -> "ExperimentConfig":
        from dataclasses import replace
        return replace(self, params=params)


# --- value parsing --------------------------------------------------------------------

def _strip(v: str) -> str:
    v = v.strip()
    if len(v) >= 2 and v[0] == v[-1] and v[0] in "\"'":
        v = v[1:-1]
    return v


def _items(v: str):
    v = v.strip()
    if v.startswith("[") and v.endswith("]"):
        v = v[1:-1]
    parts = [p for p in (x.strip() for x in v.split(",")) if p]
    return [_strip(p) for p in parts]


def _convert(tag: str, raw: str):
    if tag == "s":
        return _strip(raw)
    if tag == "f":
        return float(_strip(raw))
    if tag == "i":
        x = float(_strip(raw))
        if x != int(x):
            raise ValueError(f"expected an integer, got {raw!r}")
        return int(x)
    if tag == "b":
        s = _strip(raw).lower()
        if s in ("1", "true", "yes", "on"):
            return True
        if s in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"expected a boolean, got {raw!r}")
    if tag == "F":
        s = _strip(raw).lower()
        if s in ("", "none"):
            return None
        return tuple(float(x) for x in _items(raw))
    if tag == "I":
        return tuple(_convert("i", x) for x in _items(raw))
    if tag == "S":
        if _strip(raw).lower() in ("", "none"):
            return ()
        return tuple(_items(raw))
    if tag == "P":
        vals = tuple(float(x) for x in _items(raw))
        if len(vals) != 2:
            raise ValueError(f"expected two numbers, got {len(vals)}")
        return vals
    raise AssertionError(tag)


def _format(tag: str, v) -> str:
    if v is None:
        return "none"
    if tag in ("f",):
        return repr(float(v))
    if tag == "i":
        return str(int(v))
    if tag == "b":
        return "true" if v else "false"
    if tag == "s":
        return str(v)
    if tag in ("F", "P"):
        return ", ".join(repr(float(x)) for x in v)
    if tag == "I":
        return ", ".join(str(int(x)) for x in v)
    if tag == "S":
        return ", ".join(str(x) for x in v)
    raise AssertionError(tag)


_KEY_RE = re.compile(r"^\s*([^=:\s#;\[][^=:]*?)\s*[=:]")
_SEC_RE = re.compile(r"^\s*\[([^\]]+)\]")


def _line_map(text: str):
    lines: Dict[Tuple[str, str], int] = {}
    sections: Dict[str, int] = {}
    cur = None
    for n, line in enumerate(text.splitlines(), start=1):
        if line.strip().startswith(("#", ";")) or not line.strip():
            continue
        m = _SEC_RE.match(line)
        if m:
            cur = m.group(1).strip()
            sections.setdefault(cur, n)
            continue
        m = _KEY_RE.match(line)
        if m and cur is not None:
            lines.setdefault((cur, m.group(1)), n)
    return lines, sections


def _blame(msg: str, section: str, present: Dict[str, int], sec_line: Optional[int]):
    """Line of the last key of ``section`` that ``msg`` mentions: for a joint
    constraint that is the entry completing the violation."""
    alias = {"capA": "A", "lambda": "lambda"}
    hits = []
    for key, line in present.items():
        names = {key} | {a for a, b in alias.items() if b == key}
        if any(re.search(rf"\b{re.escape(n)}\b", msg) for n in names):
            hits.append(line)
    if hits:
        return max(hits)
    return sec_line


def parse_config(text: str) -> ExperimentConfig:
    """Parse and validate a configuration document."""
    if isinstance(text, bytes):
        text = text.decode("utf-8")
    cp = configparser.ConfigParser(strict=True, interpolation=None, delimiters=("=", ":"),
                                   comment_prefixes=("#", ";"), inline_comment_prefixes=("#",),
                                   default_section="__never__")
    cp.optionxform = str
    try:
        cp.read_string(text)
    except configparser.DuplicateOptionError as exc:
        err = ConfigError(f"duplicate key at line {exc.lineno}: {exc.option!r} in [{exc.section}]")
        err.line = exc.lineno
        raise err from None
    except configparser.DuplicateSectionError as exc:
        raise ConfigError(f"duplicate section [{exc.section}] at line {exc.lineno}",
                          exc.lineno) from None
    except configparser.MissingSectionHeaderError as exc:
        raise ConfigError("key outside any [section]", exc.lineno) from None
    except configparser.ParsingError as exc:
        line = exc.errors[0][0] if exc.errors else None
        raise ConfigError("malformed line", line) from None

    lines, sec_lines = _line_map(text)
    raw: Dict[str, Dict[str, Any]] = {}
    for sec in cp.sections():
        if sec not in SCHEMA:
            raise ConfigError(f"unknown section [{sec}]", sec_lines.get(sec))
        raw[sec] = {}
        for key, val in cp.items(sec):
            line = lines.get((sec, key))
            if key not in SCHEMA[sec]:
                raise ConfigError(f"unknown key {key!r} in [{sec}]", line)
            try:
                raw[sec][key] = _convert(SCHEMA[sec][key], val)
            except ValueError as exc:
                raise ConfigError(f"bad value for {key}: {exc}", line) from None

    name = raw.get("experiment", {}).get("name")
    if name is None:
        raise ConfigError("missing [experiment] name", sec_lines.get("experiment"))
    if name not in EXPERIMENTS:
        raise ConfigError(f"unknown experiment {name!r}; known: {', '.join(EXPERIMENTS)}",
                          lines.get(("experiment", "name")))
    vals = defaults_for(name)
    for sec, kv in raw.items():
        vals[sec].update(kv)

    def where(sec):
        return {k: lines[(sec, k)] for k in raw.get(sec, {}) if (sec, k) in lines}

    return _build(vals, where, sec_lines)


def _build(vals, where=lambda sec: {}, sec_lines=None) -> ExperimentConfig:
    sec_lines = sec_lines or {}

    def fail(sec, msg):
        raise ConfigError(msg, _blame(msg, sec, where(sec), sec_lines.get(sec)))

    pv = vals["params"]
    try:
        params = make_params(pv["mu"], pv["lambda"], pv["gamma"], pv["A"], pv["rho_far"])
    except ValidationError as exc:
        fail("params", f"physical restriction: {exc}")
    gv = vals["grid"]
    try:
        grid = make_grid(gv["lx"], gv["ly"], gv["nx"], gv["ny"])
    except ValidationError as exc:
        fail("grid", f"grid: {exc} (lx={gv['lx']}, ly={gv['ly']}, nx={gv['nx']}, ny={gv['ny']})")

    ex = vals["experiment"]
    ic = vals["ic"]
    if ic["preset"] not in PRESETS:
        fail("ic", f"unknown preset {ic['preset']!r} (known: {', '.join(PRESETS)})")
    if not ic["width"] > 0.0:
        fail("ic", "width must be positive")
    if not (math.isfinite(ex["t_end"]) and ex["t_end"] >= 0.0):
        fail("experiment", f"t_end must be finite and >= 0, got {ex['t_end']}")
    if not ex["sample_every"] >= 0.0:
        fail("experiment", "sample_every must be >= 0")
    lo, hi = ex["fit_window"]
    if not lo < hi:
        fail("experiment", f"fit_window must satisfy lo < hi, got ({lo}, {hi})")
    nus = ex["nu_list"]
    if nus is not None:
        if len(nus) == 0:
            fail("experiment", "nu_list is empty")
        if any(b <= a for a, b in zip(nus, nus[1:])):
            fail("experiment", "nu_list must be strictly increasing")
        for nu in nus:
            try:
                sweep_params(params, nu)
            except ValidationError as exc:
                fail("experiment", f"nu_list entry {nu}: {exc}")
    st = dict(vals["stepper"])
    if not 0.0 < st["cfl"] <= 1.0:
        fail("stepper", f"cfl must lie in (0, 1], got {st['cfl']}")
    if not 0.0 < st["visc_tol"] <= 1e-8:
        fail("stepper", f"visc_tol must lie in (0, 1e-8], got {st['visc_tol']}")
    if st["visc_maxit"] < 1:
        fail("stepper", "visc_maxit must be >= 1")
    if not st["dt_max"] > 0.0 or not st["wall_budget"] > 0.0:
        fail("stepper", "dt_max and wall_budget must be positive")
    if not st["checkpoint_every"] >= 0.0:
        fail("stepper", "checkpoint_every must be >= 0")
    ce, se = st["checkpoint_every"], ex["sample_every"]
    if ce > 0.0 and se > 0.0 and abs(ce / se - round(ce / se)) > 1e-9:
        fail("stepper", "checkpoint_every must be a multiple of sample_every")

    base_keys = ("name", "t_end", "sample_every", "seed", "out_dir", "nu_list", "fit_window",
                 "verdicts")
    extra = {k: v for k, v in ex.items() if k not in base_keys}
    from .criteria import CRITERIA
    verdicts = tuple(ex["verdicts"] or ())
    for cid in verdicts:
        if cid not in CRITERIA:
            fail("experiment", f"unknown criterion id {cid!r} in verdicts")
    return ExperimentConfig(
        name=ex["name"], params=params, grid=grid, ic_preset=ic["preset"],
        ic={k: v for k, v in ic.items() if k != "preset"},
        t_end=float(ex["t_end"]), sample_every=float(ex["sample_every"]),
        nu_list=None if nus is None else tuple(float(x) for x in nus),
        fit_window=(float(lo), float(hi)), out_dir=str(ex["out_dir"]), seed=int(ex["seed"]),
        stepper=st, extra=extra, verdicts=verdicts)


def sweep_params(base: FluidParams, nu: float) -> FluidParams:
    """Parameters with bulk viscosity ``nu``: ``mu`` is kept and ``lambda = nu - 2 mu``."""
    return make_params(base.mu, nu - 2.0 * base.mu, base.gamma, base.capA, base.rho_far)


def config_text(cfg: ExperimentConfig, include_out_dir: bool = True) -> str:
    """Canonical document for ``cfg``; ``parse_config(config_text(cfg)) == cfg``."""
    vals = cfg.values()
    out = []
    for sec in _SECTION_ORDER:
        out.append(f"[{sec}]")
        for key, tag in SCHEMA[sec].items():
            if key not in vals[sec]:
                continue
            if key == "out_dir" and not include_out_dir:
                continue
            v = vals[sec][key]
            if key == "verdicts" and not v:
                v = None
            out.append(f"{key} = {_format(tag, v)}")
        out.append("")
    return "\n".join(out)


def run_id(cfg: ExperimentConfig) -> str:
    """Content hash of the resolved config (the output directory does not count)."""
    return hashlib.blake2b(config_text(cfg, include_out_dir=False).encode(), digest_size=6).hexdigest()


def with_overrides(cfg: ExperimentConfig, **sections) -> ExperimentConfig:
    """New config with ``section={key: value}`` overrides, validated like a parse."""
    vals = cfg.values()
    for sec, kv in sections.items():
        if sec not in SCHEMA:
            raise ConfigError(f"unknown section [{sec}]")
        for k in kv:
            if k not in SCHEMA[sec]:
                raise ConfigError(f"unknown key {k!r} in [{sec}]")
        vals[sec].update(kv)
    return _build(vals)


def default_config(name: str, **sections) -> ExperimentConfig:
    cfg = _build(defaults_for(name))
    return with_overrides(cfg, **sections) if sections else cfg
