"""Run configuration: one YAML file drives every subcommand.

Reference (defaults in brackets)::

    seed: 0                        # 64-bit master seed [0]
    group:                         # required; polygon or generators + orders
      polygon: [7, 3, 2]
      # generators: 3
      # orders: [[1, 2, 7], [1, 3, 0], [2, 3, 3]]   # 0 means infinity
    thickness:
      q: [2, 2, 2]                 # [2 for every generator]
    walk:                          # required
      nearest_neighbour: true      # uniform p_s, or give probs: [...]
      # steps: [{word: "12", prob: 0.5}, {word: "3", prob: 0.5}]
    simulate: {n_steps: 1000, n_paths: 10000, checkpoints: null, engine: auto, burn_in: half}
    exact: {n_max: 12, prune_epsilon: 0.0}
    entropy: {n_max: 16, window: [12, 16]}
    green: {radius: 12, tol: 1.0e-12, rho_n_max: 16, rate_step: 16, identity_radius: 5}
    analyze: {certify_radius: 10, sphere_n: 12, dot: false}
    coverings: {L1: auto, depth: 8, horizon: 5000, buffer: null, n_paths: 100}
    output: {formats: [json, csv]}

``simulate.seed`` is accepted as an alias of the top-level seed.
"""
from __future__ import annotations

import copy
import hashlib
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import yaml

from .coxeter import CoxeterError, CoxeterSystem, Element, build_coxeter_system
from .walk import BuildingParams, WalkError, WalkSpec, validate

__all__ = [
    "ConfigError",
    "ParseError",
    "UnknownKey",
    "ValidationError",
    "DEFAULTS",
    "RunConfig",
    "parse_config",
    "load_config",
]


class ConfigError(ValueError):
    """Base class; ``key`` names the offending config entry."""

    def __init__(self, message: str, key: str | None = None):
        super().__init__(f"{key}: {message}" if key else message)
        self.key = key


class ParseError(ConfigError):
    def __init__(self, message: str, line: int | None = None, column: int | None = None):
        where = f"line {line}" + (f", column {column}" if column is not None else "") if line else "input"
        ConfigError.__init__(self, f"{where}: {message}")
        self.line, self.column = line, column


class UnknownKey(ConfigError):
    pass


class ValidationError(ConfigError):
    pass


DEFAULTS: dict = {
    "seed": 0,
    "group": None,
    "thickness": {"q": None},
    "walk": None,
    "simulate": {"n_steps": 1000, "n_paths": 10_000, "checkpoints": None, "engine": "auto", "burn_in": "half",
                 "seed": None},
    "exact": {"n_max": 12, "prune_epsilon": 0.0},
    "entropy": {"n_max": 16, "window": [12, 16]},
    "green": {"radius": 12, "tol": 1e-12, "rho_n_max": 16, "rate_step": 16, "identity_radius": 5},
    "analyze": {"certify_radius": 10, "sphere_n": 12, "dot": False},
    "coverings": {"L1": "auto", "depth": 8, "horizon": 5000, "buffer": None, "n_paths": 100},
    "output": {"formats": ["json", "csv"]},
}

_GROUP_KEYS = {"polygon", "generators", "orders"}
_WALK_KEYS = {"nearest_neighbour", "probs", "steps"}
_STEP_KEYS = {"word", "prob"}


@dataclass
class RunConfig:
    """Validated configuration with all defaults filled in.

    ``data`` is the canonical nested dict; ``digest`` its SHA-256.
    """

    data: dict
    system: CoxeterSystem = field(repr=False)
    params: BuildingParams = field(repr=False)
    spec: WalkSpec = field(repr=False)

    @property
    def seed(self) -> int:
        return int(self.data["seed"])

    def __getitem__(self, section: str):
        return self.data[section]

    @property
    def digest(self) -> str:
        return hashlib.sha256(json.dumps(self.data, sort_keys=True).encode()).hexdigest()

    def override(self, **sections) -> "RunConfig":
        """Copy with ``section={key: value}`` updates (validated again)."""
        data = copy.deepcopy(self.data)
        for sec, upd in sections.items():
            if sec == "seed":
                data["seed"] = upd
                continue
            for k, v in upd.items():
                data[sec][k] = v
        return _validate(data)


def _line_of(exc) -> tuple[int | None, int | None]:
    mark = getattr(exc, "problem_mark", None)
    if mark is None:
        return None, None
    return mark.line + 1, mark.column + 1


def load_config(path) -> RunConfig:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file {path} does not exist", "--config")
    return parse_config(path.read_text())


def parse_config(text: str) -> RunConfig:
    """Parse YAML text into a :class:`RunConfig`.

    Raises
    ------
    ParseError
        Malformed YAML (with line and column) or a non-mapping document.
    UnknownKey
        Any key outside the reference.
    ValidationError
        Values rejected here or by the owning module (group, thickness, walk).
    """
    try:
        raw = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        line, col = _line_of(exc)
        raise ParseError(getattr(exc, "problem", None) or str(exc), line, col) from exc
    if raw is None:
        raw = {}
    if not isinstance(raw, dict):
        raise ParseError("top level must be a mapping")
    data = copy.deepcopy(DEFAULTS)
    for key, value in raw.items():
        if key not in DEFAULTS:
            raise UnknownKey("unknown section", str(key))
        if key == "seed":
            data["seed"] = value
        elif key in ("group", "walk"):
            data[key] = value
        else:
            if value is None:
                continue
            if not isinstance(value, dict):
                raise ValidationError("section must be a mapping", key)
            for k, v in value.items():
                if k not in DEFAULTS[key]:
                    raise UnknownKey("unknown key", f"{key}.{k}")
                data[key][k] = v
    return _validate(data)


def _int(data, sec, key, lo=None, allow_none=False):
    v = data[sec][key]
    if v is None and allow_none:
        return
    if isinstance(v, bool) or not isinstance(v, int):
        raise ValidationError(f"expected an integer, got {v!r}", f"{sec}.{key}")
    if lo is not None and v < lo:
        raise ValidationError(f"must be >= {lo}", f"{sec}.{key}")


def _float(data, sec, key, lo=None):
    v = data[sec][key]
    if isinstance(v, bool) or not isinstance(v, (int, float)) or not math.isfinite(v):
        raise ValidationError(f"expected a number, got {v!r}", f"{sec}.{key}")
    data[sec][key] = float(v)
    if lo is not None and v < lo:
        raise ValidationError(f"must be >= {lo}", f"{sec}.{key}")


def _build_group(g) -> CoxeterSystem:
    if not isinstance(g, dict):
        raise ValidationError("required mapping with polygon or generators/orders", "group")
    for k in g:
        if k not in _GROUP_KEYS:
            raise UnknownKey("unknown key", f"group.{k}")
    try:
        if "polygon" in g:
            return build_coxeter_system([int(x) for x in g["polygon"]])
        if "generators" in g and "orders" in g:
            return CoxeterSystem.from_dict({"generators": g["generators"], "orders": g["orders"]})
    except CoxeterError as exc:
        raise ValidationError(f"{type(exc).__name__}: {exc}", "group") from exc
    except (TypeError, ValueError) as exc:
        raise ValidationError(str(exc), "group") from exc
    raise ValidationError("need either polygon or generators and orders", "group")


def _build_walk(w, sys: CoxeterSystem) -> WalkSpec:
    if not isinstance(w, dict):
        raise ValidationError("required mapping with nearest_neighbour or steps", "walk")
    for k in w:
        if k not in _WALK_KEYS:
            raise UnknownKey("unknown key", f"walk.{k}")
    if "steps" in w:
        if w.get("nearest_neighbour") or "probs" in w:
            raise ValidationError("give either steps or nearest_neighbour/probs", "walk")
        pairs = []
        for i, st in enumerate(w["steps"] or []):
            if not isinstance(st, dict):
                raise ValidationError("each step is {word, prob}", f"walk.steps[{i}]")
            for k in st:
                if k not in _STEP_KEYS:
                    raise UnknownKey("unknown key", f"walk.steps[{i}].{k}")
            try:
                word = sys.element(str(st.get("word", "")))
            except (CoxeterError, ValueError) as exc:
                raise ValidationError(str(exc), f"walk.steps[{i}].word") from exc
            pairs.append((word.word, st.get("prob")))
        try:
            return WalkSpec.from_pairs(sys, pairs)
        except (WalkError, TypeError) as exc:
            raise ValidationError(str(exc), "walk.steps") from exc
    if w.get("nearest_neighbour") or "probs" in w:
        try:
            return WalkSpec.nearest_neighbour(sys, w.get("probs"))
        except (WalkError, TypeError, ValueError) as exc:
            raise ValidationError(str(exc), "walk.probs") from exc
    raise ValidationError("need steps or nearest_neighbour", "walk")


def _validate(data: dict) -> RunConfig:
    seed = data["seed"]
    if isinstance(seed, bool) or not isinstance(seed, int) or not 0 <= seed < 2 ** 64:
        raise ValidationError("seed must be an integer in [0, 2^64)", "seed")
    alias = data["simulate"].get("seed")
    if alias is not None:
        if alias != seed and seed != 0:
            raise ValidationError("conflicts with the top-level seed", "simulate.seed")
        data["seed"] = alias
        data["simulate"]["seed"] = None
        return _validate(data)
    sys = _build_group(data["group"])
    data["group"] = {k: data["group"][k] for k in sorted(data["group"])}
    q = data["thickness"]["q"]
    if q is None:
        q = [2] * sys.n
    if not isinstance(q, (list, tuple)) or any(isinstance(x, bool) or not isinstance(x, int) for x in q):
        raise ValidationError("q must be a list of integers", "thickness.q")
    data["thickness"]["q"] = list(q)
    spec = _build_walk(data["walk"], sys)
    try:
        params = BuildingParams(tuple(q))
        validate(params, spec, sys)
    except WalkError as exc:
        raise ValidationError(f"{type(exc).__name__}: {exc}", "thickness.q" if "q" in str(exc) else "walk") from exc

    s = data["simulate"]
    _int(data, "simulate", "n_steps", 1)
    _int(data, "simulate", "n_paths", 2)
    if s["engine"] not in ("auto", "ball", "word"):
        raise ValidationError("must be auto, ball or word", "simulate.engine")
    N = s["n_steps"]
    if s["burn_in"] not in ("half", None) and not (isinstance(s["burn_in"], int) and 0 <= s["burn_in"] < N):
        raise ValidationError("must be 'half', null or an integer below n_steps", "simulate.burn_in")
    if s["checkpoints"] is not None:
        ck = s["checkpoints"]
        if not isinstance(ck, list) or any(not isinstance(c, int) or not 0 <= c <= N for c in ck):
            raise ValidationError("must be a list of step indices in [0, n_steps]", "simulate.checkpoints")
    _int(data, "exact", "n_max", 1)
    _float(data, "exact", "prune_epsilon", 0.0)
    _int(data, "entropy", "n_max", 1)
    win = data["entropy"]["window"]
    if not (isinstance(win, list) and len(win) == 2 and all(isinstance(x, int) for x in win) and 1 <= win[0] <= win[1]):
        raise ValidationError("must be [lo, hi] with 1 <= lo <= hi", "entropy.window")
    if win[1] > data["entropy"]["n_max"]:
        raise ValidationError("upper end exceeds entropy.n_max", "entropy.window")
    for k in ("radius", "rho_n_max", "rate_step", "identity_radius"):
        _int(data, "green", k, 1)
    _float(data, "green", "tol", 0.0)
    if data["green"]["rho_n_max"] < 10 or data["green"]["rho_n_max"] % 2:
        raise ValidationError("must be even and >= 10", "green.rho_n_max")
    if data["green"]["radius"] < 2 * spec.L0:
        raise ValidationError("must be at least 2 L0", "green.radius")
    _int(data, "analyze", "certify_radius", 1)
    _int(data, "analyze", "sphere_n", 0)
    if not isinstance(data["analyze"]["dot"], bool):
        raise ValidationError("must be true or false", "analyze.dot")
    c = data["coverings"]
    if c["L1"] != "auto":
        _int(data, "coverings", "L1", 1)
    _int(data, "coverings", "depth", 1)
    _int(data, "coverings", "horizon", 2)
    _int(data, "coverings", "buffer", 0, allow_none=True)
    _int(data, "coverings", "n_paths", 1)
    if c["buffer"] is not None and c["buffer"] >= c["horizon"]:
        raise ValidationError("must be below coverings.horizon", "coverings.buffer")
    fm = data["output"]["formats"]
    if not isinstance(fm, list) or not set(fm) <= {"json", "csv"} or "json" not in fm:
        raise ValidationError("must list json and optionally csv", "output.formats")
    return RunConfig(data, sys, params, spec)
