"""Subcommand orchestration and deterministic reports.

Every stage writes ``<stage>.json`` (and CSV tables) into the output
directory.  Reports depend only on the configuration, the seed and the
package version; wall-clock times go to a separate ``timings.json``.
"""
from __future__ import annotations

import csv
import io
import json
import math
import platform
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from . import __version__
from .automata import build_acceptor, recurrent_subgraph, sphere_counts, to_csv, to_dot
from .config import RunConfig
from .coverings import (
    build_covering_spec,
    choose_L1,
    detect_last_entries,
    ergodic_averages,
    formula_crosscheck,
    verify_covering,
)
from .coxeter import classify
from .green import (
    EntropySequence,
    EstimatorReport,
    consistency_report,
    decay_fit,
    drift_estimator,
    entropy_sequence,
    estimate_spectral_radius,
    green_function,
    green_rate_estimator,
    hq_estimator,
    last_visit_table,
    splitting_check,
)
from .walk import acceptor_for, exact_distribution, lift_to_building, simulate

__all__ = ["SUBCOMMANDS", "MissingArtifacts", "RunReport", "REPORT_SCHEMA", "run", "emit", "canonical_json"]

SUBCOMMANDS = ("analyze", "simulate", "exact", "entropy", "green", "coverings", "report", "all")
COVERING_PATH_OFFSET = 1 << 32  # covering paths use streams disjoint from the main batch


class MissingArtifacts(FileNotFoundError):
    pass


REPORT_SCHEMA = {
    "type": "object",
    "required": ["subcommand", "config_digest", "versions", "flags", "passed"],
    "properties": {
        "subcommand": {"enum": list(SUBCOMMANDS)},
        "config_digest": {"type": "string", "pattern": "^[0-9a-f]{64}$"},
        "versions": {"type": "object", "additionalProperties": {"type": "string"}},
        "drift": {"$ref": "#/$defs/estimate"},
        "h_q": {"$ref": "#/$defs/estimate"},
        "green_rate": {"$ref": "#/$defs/estimate"},
        "h_w_sequence": {"type": "array", "items": {"type": "number"}},
        "h_delta_sequence": {"type": "array", "items": {"type": "number"}},
        "residuals": {"type": "object", "additionalProperties": {"type": "number"}},
        "flags": {"type": "object", "additionalProperties": {"type": "boolean"}},
        "passed": {"type": "boolean"},
        "sections": {"type": "object", "additionalProperties": {"type": "object", "minProperties": 1}},
    },
    "additionalProperties": False,
    "$defs": {
        "estimate": {
            "type": "object",
            "required": ["estimate", "stderr", "n_samples", "method"],
            "properties": {"estimate": {"type": "number"}, "stderr": {"type": "number", "minimum": 0}},
        }
    },
}


def _clean(obj):
    """JSON-ready copy: numpy scalars to Python, empty sections dropped."""
    if isinstance(obj, dict):
        out = {}
        for k, v in obj.items():
            v = _clean(v)
            if v is None or (isinstance(v, (dict, list)) and not v):
                continue
            out[str(k)] = v
        return out
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return [_clean(v) for v in obj.tolist()]
    if isinstance(obj, (np.bool_, bool)):
        return bool(obj)
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, (np.floating, float)):
        x = float(obj)
        if not math.isfinite(x):
            return repr(x)
        return x
    return obj


def canonical_json(obj) -> str:
    return json.dumps(_clean(obj), sort_keys=True, indent=2, allow_nan=False) + "\n"


@dataclass
class RunReport:
    """Outcome of one subcommand.

    ``sections`` holds per-stage results; ``tables`` the CSV payloads
    (name -> list of row dicts, or raw text); ``wall_times`` stays out of
    the JSON report.
    """

    subcommand: str
    config_digest: str
    sections: dict = field(default_factory=dict)
    summary: dict = field(default_factory=dict)
    residuals: dict = field(default_factory=dict)
    flags: dict = field(default_factory=dict)
    tables: dict = field(default_factory=dict, repr=False)
    wall_times: dict = field(default_factory=dict)

    @property
    def passed(self) -> bool:
        return all(self.flags.values())

    def to_dict(self) -> dict:
        out = {
            "subcommand": self.subcommand,
            "config_digest": self.config_digest,
            "versions": _versions(),
            "residuals": self.residuals,
            "flags": self.flags,
            "passed": self.passed,
            "sections": self.sections,
        }
        out.update(self.summary)
        return out


def _versions() -> dict:
    import scipy

    return {"artifact": __version__, "numpy": np.__version__, "scipy": scipy.__version__,
            "python": ".".join(platform.python_version_tuple()[:2])}


# ---------------------------------------------------------------------------
# stages


class _Context:
    def __init__(self, cfg: RunConfig, workers: int, out_dir: Path):
        self.cfg = cfg
        self.workers = workers
        self.out_dir = out_dir
        self.cache: dict = {}
        self.times: dict = {}

    def memo(self, key: str, fn: Callable):
        if key not in self.cache:
            t = time.perf_counter()
            self.cache[key] = fn()
            self.times[key] = round(time.perf_counter() - t, 3)
        return self.cache[key]


def _fmt(sys, w) -> str:
    s = sys.format(w)
    return s if s else "e"


def _checkpoints(cfg: RunConfig) -> list[int]:
    s = cfg["simulate"]
    N = s["n_steps"]
    ck = set(s["checkpoints"] or range(0, N + 1, max(1, N // 10)))
    ck |= {0, N, N // 2}
    if cfg["green"]["rate_step"] <= N:
        ck.add(cfg["green"]["rate_step"])
    return sorted(ck)


def _burn_in(cfg: RunConfig):
    b = cfg["simulate"]["burn_in"]
    return cfg["simulate"]["n_steps"] // 2 if b == "half" else b


def _trajectories(ctx: _Context):
    cfg = ctx.cfg
    s = cfg["simulate"]
    return ctx.memo("simulate", lambda: simulate(
        cfg.spec, cfg.params, s["n_steps"], s["n_paths"], cfg.seed, _checkpoints(cfg),
        engine=s["engine"], workers=ctx.workers, per_step=False))


def stage_analyze(ctx: _Context) -> dict:
    cfg = ctx.cfg
    sys = cfg.system
    a = cfg["analyze"]
    acc = ctx.memo("acceptor", lambda: build_acceptor(sys, certify_radius=a["certify_radius"]))
    rs = recurrent_subgraph(acc)
    res = {
        "group": {"class": classify(sys).name, "generators": sys.n, "orders": sys.to_dict()["orders"]},
        "n_states": acc.n_states,
        "certified_radius": acc.certified_radius,
        "n_recurrent": len(rs.recurrent_states),
        "n_transient": len(rs.transient_states),
        "strongly_connected": rs.strongly_connected,
        "K": rs.K,
        "finite_cone_types": sorted(_fmt(sys, acc.element_rep[t]) for t in rs.finite_cone_states),
        "transient_cone_types": list(rs.transient_cone_types),
        "sphere_counts": sphere_counts(acc, a["sphere_n"]),
    }
    tables = {"acceptor.csv": to_csv(acc)}
    if a["dot"]:
        tables["acceptor.dot"] = to_dot(acc)
    flags = {"analyze.strongly_connected": bool(rs.strongly_connected)}
    return {"result": res, "tables": tables, "flags": flags}


def stage_simulate(ctx: _Context) -> dict:
    cfg = ctx.cfg
    tr = _trajectories(ctx)
    sys = cfg.system
    acc = acceptor_for(sys)
    b = _burn_in(cfg)
    drift = drift_estimator(tr, burn_in=b)
    hq = hq_estimator(tr, burn_in=b)
    ctx.cache["drift"], ctx.cache["hq"] = drift, hq
    res = {
        "n_paths": len(tr),
        "n_steps": cfg["simulate"]["n_steps"],
        "engine": tr.engine,
        "checkpoints": list(tr.checkpoints),
        "mean_length": [float(x) for x in np.asarray(tr.ckpt_lengths, dtype=np.float64).mean(axis=0)],
        "drift": drift.to_dict(),
        "drift_plain": drift_estimator(tr).to_dict(),
        "h_q": hq.to_dict(),
    }
    rows = []
    for i in range(len(tr)):
        pid = int(tr.path_ids[i])
        for c, step in enumerate(tr.checkpoints):
            w = tr.position(i, c)
            rows.append({"path_id": pid, "step": step, "length": int(tr.ckpt_lengths[i, c]),
                         "logq": float(tr.ckpt_logq[i, c]), "state": acc.run(w.word)})
    return {"result": res, "tables": {"trajectories.csv": rows}, "flags": {"simulate.drift_positive": drift.estimate > 0}}


def stage_exact(ctx: _Context) -> dict:
    cfg = ctx.cfg
    e = cfg["exact"]
    dist = ctx.memo("exact", lambda: exact_distribution(cfg.spec, cfg.params, e["n_max"], e["prune_epsilon"]))
    lifted = lift_to_building(dist, cfg.params)
    elems, probs = dist.as_array()
    order = sorted(range(len(elems)), key=lambda i: elems[i])
    rows = [{"element": _fmt(cfg.system, elems[i]), "prob": float(probs[i])} for i in order]
    res = {"n": e["n_max"], "support": len(elems), "retained_mass": dist.retained_mass,
           "H_building": lifted.H_building, "H_retracted": lifted.H_retracted, "ElogQ": lifted.ElogQ,
           "lift_residual": abs(lifted.H_building - lifted.H_retracted - lifted.ElogQ)}
    return {"result": res, "tables": {"distribution.csv": rows},
            "flags": {"exact.lift_identity": res["lift_residual"] < 1e-10}}


def _entropy(ctx: _Context) -> EntropySequence:
    cfg = ctx.cfg
    return ctx.memo("entropy", lambda: entropy_sequence(cfg.spec, cfg.params, cfg["entropy"]["n_max"]))


def stage_entropy(ctx: _Context) -> dict:
    cfg = ctx.cfg
    ent = _entropy(ctx)
    lo, hi = cfg["entropy"]["window"]
    res = {"n": ent.n, "H_w": ent.H_w, "H_delta": ent.H_delta, "ElogQ": ent.ElogQ, "E_length": ent.E_length,
           "lift_residual": ent.lift_residual, "tail_average": ent.tail_average(lo, hi), "window": [lo, hi]}
    return {"result": res, "tables": {"entropy.csv": ent.rows()},
            "flags": {"entropy.lift_identity": ent.lift_residual < 1e-10}}


def _green(ctx: _Context):
    cfg = ctx.cfg
    g = cfg["green"]

    def build():
        rho = estimate_spectral_radius(cfg.spec, cfg.params, g["rho_n_max"])
        G = green_function(cfg.spec, cfg.params, g["radius"], g["tol"], rho_hat=rho)
        L = last_visit_table(cfg.spec, cfg.params, g["radius"], g["tol"], rho_hat=rho)
        return rho, G, L

    return ctx.memo("green", build)


def _green_rate(ctx: _Context) -> EstimatorReport | None:
    cfg = ctx.cfg
    if cfg["green"]["rate_step"] > cfg["simulate"]["n_steps"]:
        return None
    _, G, _ = _green(ctx)
    return ctx.memo("green_rate", lambda: green_rate_estimator(_trajectories(ctx), G, cfg["green"]["rate_step"]))


def stage_green(ctx: _Context) -> dict:
    cfg = ctx.cfg
    rho, G, L = _green(ctx)
    split = splitting_check(G, L, cfg["green"]["identity_radius"])
    fit = decay_fit(G)
    rate = _green_rate(ctx)
    res = {"rho_hat": rho, "ball_radius": G.ball_radius, "iterations": G.iterations, "G_ee": float(G.array[0]),
           "tail_bound": float(G.tail_bound[0]),
           "splitting": {"max_residual": split.max_residual, "max_bound": split.max_bound,
                         "n_elements": split.n_elements},
           "decay": {"r_envelope": fit.r_envelope, "r_mean": fit.r_mean, "r_elements": fit.r_elements,
                     "slope_envelope": fit.slope_envelope},
           "green_rate": None if rate is None else rate.to_dict()}
    b = G.ball
    with np.errstate(divide="ignore"):
        dist = -np.log(G.array / G.array[0])
    rows = [{"element": _fmt(cfg.system, b.word(u)), "length": int(b.length[u]), "G": float(G.array[u]),
             "G_upper": float(G.array[u] + G.tail_bound[u]), "L": float(L.array[u]),
             "green_distance": float(dist[u])} for u in range(b.size)]
    flags = {"green.rho_below_one": rho < 1, "green.splitting_identity": split.passed,
             "green.decay_correlation": fit.r_envelope < -0.9}
    return {"result": res, "tables": {"green.csv": rows}, "flags": flags}


def stage_coverings(ctx: _Context) -> dict:
    cfg = ctx.cfg
    c = cfg["coverings"]
    sys, spec, params = cfg.system, cfg.spec, cfg.params
    acc = acceptor_for(sys)
    auto = c["L1"] == "auto"
    L1 = choose_L1(sys, acc, spec.L0, None if auto else c["L1"])
    cov = ctx.memo("covering_spec", lambda: build_covering_spec(acc, L1, c["depth"]))
    reports = verify_covering(acc, cov, c["depth"])
    N = c["horizon"]
    B = max(50, N // 10) if c["buffer"] is None else c["buffer"]
    tr = ctx.memo("covering_paths", lambda: simulate(
        spec, params, N, c["n_paths"], cfg.seed, [0, N // 2, N], engine="word", workers=ctx.workers,
        per_step=False, keep_words=True, path_offset=COVERING_PATH_OFFSET))
    paths = [detect_last_entries(rec, cov, B) for rec in tr]
    avg = ergodic_averages(paths, params)
    drift = drift_estimator(tr, burn_in=N // 2)
    hq = hq_estimator(tr, burn_in=N // 2)
    hbar = _green_rate(ctx)
    cross = formula_crosscheck(avg, drift, hq, hbar)
    if hbar is not None:
        ctx.cache["hbar_coverings"] = EstimatorReport(cross.values["hbar_coverings"],
                                                      cross.values["hbar_coverings_stderr"], avg.n_increments,
                                                      "H(Y) v / E[d]")
    uncensored = [sum(not r.censored for r in p) for p in paths]
    rows = [{"path_id": int(tr.path_ids[i]) - COVERING_PATH_OFFSET, "k": r.k, "e_k": r.e_k,
             "root_element": _fmt(sys, r.R_k), "censored": r.censored}
            for i, p in enumerate(paths) for r in p]
    res = {
        "L1": L1,
        "L1_source": "auto (e(0) folded into delta_hat)" if auto else "override",
        "K": cov.K,
        "depth": c["depth"],
        "horizon": N,
        "buffer": B,
        "types": {_fmt(sys, acc.element_rep[r.type_id]): {
            "n_offsets": len(cov.per_type[r.type_id].offsets),
            "n_seeds": cov.per_type[r.type_id].n_seeds,
            "fill_start": cov.per_type[r.type_id].fill_start,
            "witnessed_L": r.details["5_witnessed_L"],
            "properties": r.passed} for r in reports},
        "averages": avg.to_dict(),
        "drift": drift.to_dict(),
        "h_q": hq.to_dict(),
        "crosscheck": cross.to_dict(),
        "fraction_paths_5_records": float(np.mean([u >= 5 for u in uncensored])),
    }
    flags = {"coverings.properties": all(r.ok for r in reports),
             "coverings.tail_loglinear": avg.tail_r2 > 0.8}
    flags.update({f"coverings.{k}": v for k, v in cross.flags.items()})
    return {"result": res, "tables": {"coverings_records.csv": rows}, "flags": flags}


def _consistency(cfg: RunConfig, ent: EntropySequence, drift, hq, green_rate, hbar_cov) -> dict:
    rep = consistency_report(ent, cfg.params, drift, hq, green_rate, hbar_cov, window=cfg["entropy"]["window"])
    summary = {"drift": drift.to_dict() if drift else None, "h_q": hq.to_dict() if hq else None,
               "green_rate": green_rate.to_dict() if green_rate else None,
               "h_w_sequence": [float(h / n) for n, h in zip(ent.n, ent.H_w) if n > 0],
               "h_delta_sequence": [float(h / n) for n, h in zip(ent.n, ent.H_delta) if n > 0]}
    return {"summary": summary, "residuals": rep.residuals, "flags": {f"consistency.{k}": v for k, v in rep.flags.items()},
            "estimates": rep.estimates}


_STAGES = {
    "analyze": stage_analyze,
    "simulate": stage_simulate,
    "exact": stage_exact,
    "entropy": stage_entropy,
    "green": stage_green,
    "coverings": stage_coverings,
}
_PLAN = {
    "analyze": ["analyze"],
    "simulate": ["simulate"],
    "exact": ["exact", "entropy"],
    "entropy": ["entropy"],
    "green": ["green"],
    "coverings": ["coverings"],
    "all": ["analyze", "simulate", "exact", "entropy", "green", "coverings"],
}


def _est(d: dict | None) -> EstimatorReport | None:
    if not d:
        return None
    return EstimatorReport(d["estimate"], d["stderr"], d["n_samples"], d["method"])


def _load_report_inputs(out_dir: Path):
    need = ["simulate.json", "entropy.json", "green.json"]
    missing = [n for n in need if not (out_dir / n).exists()]
    if missing:
        raise MissingArtifacts(f"report needs prior artifacts in {out_dir}: missing {', '.join(missing)}")
    load = lambda n: json.loads((out_dir / n).read_text())["result"]
    sim, ent, green = load("simulate.json"), load("entropy.json"), load("green.json")
    seq = EntropySequence(np.array(ent["n"]), np.array(ent["H_w"]), np.array(ent["H_delta"]),
                          np.array(ent["ElogQ"]), np.array(ent["E_length"]), ent["lift_residual"])
    cov = load("coverings.json") if (out_dir / "coverings.json").exists() else None
    hbar = None
    if cov and "hbar_coverings" in cov["crosscheck"]["values"]:
        v = cov["crosscheck"]["values"]
        hbar = EstimatorReport(v["hbar_coverings"], v["hbar_coverings_stderr"], cov["averages"]["n_increments"],
                               "H(Y) v / E[d]")
    return seq, _est(sim["drift"]), _est(sim["h_q"]), _est(green.get("green_rate")), hbar


def run(subcommand: str, cfg: RunConfig, out_dir, workers: int = 1, write: bool = True) -> RunReport:
    """Execute a subcommand and (optionally) write its artifacts.

    Raises
    ------
    MissingArtifacts
        ``report`` without the simulate, entropy and green artifacts.
    """
    if subcommand not in SUBCOMMANDS:
        raise ValueError(f"unknown subcommand {subcommand!r}; expected one of {', '.join(SUBCOMMANDS)}")
    out_dir = Path(out_dir)
    ctx = _Context(cfg, workers, out_dir)
    report = RunReport(subcommand, cfg.digest)
    if subcommand == "report":
        seq, drift, hq, rate, hbar = _load_report_inputs(out_dir)
        cons = _consistency(cfg, seq, drift, hq, rate, hbar)
        report.summary, report.residuals, report.flags = cons["summary"], cons["residuals"], cons["flags"]
        report.sections["consistency"] = {"estimates": cons["estimates"]}
        if write:
            emit(report, out_dir, cfg["output"]["formats"])
        return report
    for name in _PLAN[subcommand]:
        t = time.perf_counter()
        out = _STAGES[name](ctx)
        report.wall_times[name] = round(time.perf_counter() - t, 3)
        report.sections[name] = out["result"]
        report.flags.update(out["flags"])
        for k, v in out["tables"].items():
            report.tables[k] = v
        if write:
            _write(out_dir / f"{name}.json", canonical_json({"result": out["result"], "flags": out["flags"],
                                                              "config_digest": cfg.digest}))
    if subcommand == "all":
        cons = _consistency(cfg, _entropy(ctx), ctx.cache.get("drift"), ctx.cache.get("hq"), _green_rate(ctx),
                            ctx.cache.get("hbar_coverings"))
        report.summary = cons["summary"]
        report.residuals.update(cons["residuals"])
        report.flags.update(cons["flags"])
        report.sections["consistency"] = {"estimates": cons["estimates"]}
    if write:
        emit(report, out_dir, cfg["output"]["formats"])
    return report


def _write(path: Path, text: str):
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(text)
    except OSError as exc:
        raise OSError(f"cannot write {path}: {exc}") from exc


def _csv_text(rows) -> str:
    if isinstance(rows, str):
        return rows
    buf = io.StringIO()
    if rows:
        w = csv.DictWriter(buf, fieldnames=list(rows[0]), lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({k: repr(v) if isinstance(v, float) else v for k, v in r.items()})
    return buf.getvalue()


def emit(report: RunReport, out_dir, formats=("json", "csv")) -> list[Path]:
    """Write ``report.json`` (plus ``timings.json``) and, for ``csv``, every table."""
    out_dir = Path(out_dir)
    written = []
    for fmt in formats:
        if fmt == "json":
            p = out_dir / ("report.json" if report.subcommand in ("all", "report") else f"{report.subcommand}_report.json")
            _write(p, canonical_json(report.to_dict()))
            written.append(p)
            if report.wall_times:
                t = out_dir / "timings.json"
                _write(t, canonical_json(report.wall_times))
                written.append(t)
        elif fmt == "csv":
            for name, rows in sorted(report.tables.items()):
                p = out_dir / name
                _write(p, _csv_text(rows))
                written.append(p)
        else:
            raise ValueError(f"unknown format {fmt!r}")
    return written
