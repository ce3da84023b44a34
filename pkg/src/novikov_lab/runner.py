"""Configuration, staged orchestration, caching and reports.

Stages and their dependencies::

    zeros -> rho
    zeros -> complex ----------.
    zeros -> spectrum -> recover <-'

Every stage result is a JSON payload cached under a key that hashes the
stage name, the package version, the manifold and the stage's own
parameters together with the keys of its dependencies.  ``report.json``
holds only payloads, checks and statuses, so reruns of one config are
byte-identical; timings and cache hits go to ``run_meta.json``.
"""

from __future__ import annotations

import argparse
import copy
import hashlib
import json
import math
import sys
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import scipy

from .exceptions import ConfigError, NovikovLabError

__version__ = "0.1.0"

STAGES = ("zeros", "rho", "complex", "spectrum", "recover")
DEPENDS = {"zeros": (), "rho": ("zeros",), "complex": ("zeros",), "spectrum": ("zeros",), "recover": ("complex", "spectrum")}

EXIT_PASS, EXIT_ACCEPTANCE, EXIT_NUMERIC, EXIT_CONFIG = 0, 2, 3, 4

DEFAULTS = {
    "manifold": None,
    "stages": list(STAGES),
    "action_bound": None,
    "n_directions": 16,
    "rho": {"n_directions": 32, "a_grid": [0.0, 0.1, 0.2, 0.5, 1.0]},
    "s_values": [0.0, 2.0, 3.0, 4.0],
    "spectrum": {"t_grid": [8.0, 12.0, 16.0, 20.0], "N": None, "threshold": 1.0, "t_min": 12.0, "minimax": True},
    "bridge": {
        "chain_s": 2.0,
        "n_forms": 10,
        "form_N": 32,
        "t_grid": [12.0, 16.0],
        "N": 48,
        "chart_grid": 96,
        "chain_tolerance": 1e-3,
        "recovery_tolerance": 0.05,
    },
    "expect": {"counts": None, "betti": None},
    "seed": 0,
    "threads": 1,
}


# -- configuration -----------------------------------------------------------------


@dataclass
class RunConfig:
    data: dict

    @classmethod
    def from_dict(cls, raw: dict) -> "RunConfig":
        if not isinstance(raw, dict):
            raise ConfigError("config must be a JSON object")
        data = _merge(DEFAULTS, raw, "")
        _validate(data)
        return cls(data)

    @classmethod
    def load(cls, path: str | Path) -> "RunConfig":
        p = Path(path)
        if not p.is_file():
            raise ConfigError(f"config file {p} does not exist")
        try:
            raw = json.loads(p.read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config {p} is not valid JSON: {exc}") from exc
        return cls.from_dict(raw)

    def manifold(self):
        from .manifold import ModelManifold, cosine_model

        spec = self.data["manifold"]
        if "cosine" in spec:
            if set(spec) != {"cosine"}:
                raise ConfigError("a 'cosine' manifold takes no other keys")
            c = spec["cosine"]
            unknown = set(c) - {"kappa", "amplitude"}
            if unknown:
                raise ConfigError(f"unknown cosine keys: {sorted(unknown)}")
            try:
                return cosine_model(tuple(c["kappa"]), float(c.get("amplitude", 1.0)))
            except (KeyError, ValueError) as exc:
                raise ConfigError(f"bad cosine manifold: {exc}") from exc
        return ModelManifold.from_dict(spec)

    def action_bound(self, m) -> float:
        R = self.data["action_bound"]
        if R is not None:
            return float(R)
        k = np.abs(m.kappa)
        # three periods of the smallest nonzero period; the exact case needs only one level window
        return float(3 * 2 * math.pi * k[k > 0].min()) if np.any(k > 0) else 1.0

    def hash(self) -> str:
        return _digest(self.data)


def _merge(defaults, raw, where):
    out = copy.deepcopy(defaults)
    for key, value in raw.items():
        if key not in defaults:
            raise ConfigError(f"unknown config key '{where}{key}'")
        if isinstance(defaults[key], dict) and key != "manifold":
            if not isinstance(value, dict):
                raise ConfigError(f"'{where}{key}' must be an object")
            out[key] = _merge(defaults[key], value, f"{where}{key}.")
        else:
            out[key] = value
    return out


def _validate(d: dict) -> None:
    if not isinstance(d["manifold"], dict):
        raise ConfigError("config needs a 'manifold' object")
    bad = [s for s in d["stages"] if s not in STAGES]
    if bad:
        raise ConfigError(f"unknown stages {bad}")
    positive = {
        "n_directions": d["n_directions"],
        "rho.n_directions": d["rho"]["n_directions"],
        "spectrum.threshold": d["spectrum"]["threshold"],
        "bridge.n_forms": d["bridge"]["n_forms"],
        "bridge.form_N": d["bridge"]["form_N"],
        "bridge.N": d["bridge"]["N"],
        "bridge.chart_grid": d["bridge"]["chart_grid"],
        "bridge.chain_tolerance": d["bridge"]["chain_tolerance"],
        "bridge.recovery_tolerance": d["bridge"]["recovery_tolerance"],
        "threads": d["threads"],
    }
    if d["action_bound"] is not None:
        positive["action_bound"] = d["action_bound"]
    if d["spectrum"]["N"] is not None:
        positive["spectrum.N"] = d["spectrum"]["N"]
    for name, v in positive.items():
        if not isinstance(v, (int, float)) or isinstance(v, bool) or not v > 0:
            raise ConfigError(f"'{name}' must be a positive number, got {v!r}")
    for name, grid in (("spectrum.t_grid", d["spectrum"]["t_grid"]), ("bridge.t_grid", d["bridge"]["t_grid"]), ("rho.a_grid", d["rho"]["a_grid"])):
        if not isinstance(grid, list) or not grid or any(b <= a for a, b in zip(grid, grid[1:])):
            raise ConfigError(f"'{name}' must be a non-empty strictly increasing list")
    if len(d["spectrum"]["t_grid"]) < 4:
        raise ConfigError("'spectrum.t_grid' needs at least 4 points")
    seed = d["seed"]
    if not isinstance(seed, int) or isinstance(seed, bool) or not 0 <= seed < 2**64:
        raise ConfigError("'seed' must be an unsigned 64-bit integer")
    if not isinstance(d["threads"], int):
        raise ConfigError("'threads' must be an integer")


def _digest(obj) -> str:
    return hashlib.sha256(json.dumps(obj, sort_keys=True, default=str).encode()).hexdigest()


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, (np.floating, float)):
        v = float(obj)
        return v if math.isfinite(v) else repr(v)
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (np.bool_,)):
        return bool(obj)
    if isinstance(obj, complex):
        return [obj.real, obj.imag]
    if isinstance(obj, np.ndarray):
        return _jsonable(obj.tolist())
    return obj


# -- stages --------------------------------------------------------------------------


def _stage_params(cfg: RunConfig, stage: str) -> dict:
    d = cfg.data
    if stage == "zeros":
        return {"expect_counts": d["expect"]["counts"]}
    if stage == "rho":
        return d["rho"]
    if stage == "complex":
        return {"action_bound": d["action_bound"], "n_directions": d["n_directions"], "s_values": d["s_values"], "expect": d["expect"]}
    if stage == "spectrum":
        return d["spectrum"]
    return {"bridge": d["bridge"], "seed": d["seed"]}


def _run_zeros(m, cfg, deps):
    cps = m.critical_points()
    counts = [len(m.by_index(q)) for q in range(m.dim + 1)]
    payload = {
        "fingerprint": m.fingerprint(),
        "dim": m.dim,
        "critical_points": [
            {"id": c.id, "index": c.index, "position": c.position.tolist(), "eigenvalues": c.eigenvalues.tolist()} for c in cps
        ],
        "counts": counts,
    }
    checks = {}
    if cfg.data["expect"]["counts"] is not None:
        checks["counts_expected"] = counts == list(cfg.data["expect"]["counts"])
    return payload, checks


def _run_rho(m, cfg, deps):
    from .flow import estimate_rho_all

    p = cfg.data["rho"]
    if not m.critical_points():
        return {"rho_hat": 0.0, "estimates": []}, {}
    rho, ests = estimate_rho_all(m, n_directions=p["n_directions"], a_grid=tuple(p["a_grid"]))
    checks = {"rho_zero_in_dim_le_2": rho <= 0.1} if m.dim <= 2 else {}
    return {"rho_hat": rho, "estimates": [e.to_dict() for e in ests]}, checks


def _run_complex(m, cfg, deps):
    from .complex import assemble, homology_ranks, specialize, verify_d_squared
    from .flow import incidence_table

    R = cfg.action_bound(m)
    table = incidence_table(m, R, n_directions=cfg.data["n_directions"])
    c = assemble(table, m)
    rep = verify_d_squared(c)
    betti = {repr(float(s)): list(homology_ranks(specialize(c, s))) for s in cfg.data["s_values"]}
    payload = {
        "action_bound": R,
        "table": table.to_dict(),
        "complex": c.to_dict(),
        "d_squared": {"max_violation": rep.max_violation, "bound": rep.bound, "checked": rep.checked},
        "betti": betti,
    }
    checks = {"d_squared_zero": rep.passed}
    expected = cfg.data["expect"]["betti"]
    if expected:
        for s, b in expected.items():
            key = repr(float(s))
            checks[f"betti_s={key}"] = key in betti and betti[key] == list(b)
    return payload, checks


def _run_spectrum(m, cfg, deps):
    from .spectral import verify_gap

    p = cfg.data["spectrum"]
    rep = verify_gap(m, None, tuple(p["t_grid"]), p["N"], threshold=p["threshold"], minimax=p["minimax"], strict=False)
    checks = {"small_counts_match": rep.counts_match(t_min=p["t_min"])}
    for q, dec in rep.decay.items():
        if dec["status"] in ("decaying", "not-decaying"):
            checks[f"decay_q={q}"] = dec["status"] == "decaying"
        if rep.expected[q] and rep.growth.get(q):
            checks[f"growth_q={q}"] = rep.growth[q]["deviation"] <= 0.3
    for q, mm in rep.minimax.items():
        if mm:
            checks[f"minimax_q={q}"] = bool(mm["passed"])
    return rep.to_dict(), checks


def _run_recover(m, cfg, deps):
    from .bridge import build_charts, build_small_basis, fit_recovered_counts, recover_incidence, verify_chain_map
    from .complex import NovikovComplex
    from .flow import IncidenceTable
    if not m.critical_points():
        return {"status": "skipped-empty"}, {}
    p = cfg.data["bridge"]
    table = IncidenceTable.from_dict(deps["complex"]["table"])
    c = NovikovComplex.from_dict(deps["complex"]["complex"])
    charts = build_charts(m, grid_size=p["chart_grid"])
    rng = np.random.default_rng(cfg.data["seed"])
    forms = [_random_form(rng, m.dim, j % m.dim, p["form_N"]) for j in range(p["n_forms"])]
    chain = verify_chain_map(forms, p["chain_s"], m, c, charts, tol=p["chain_tolerance"], strict=False)
    recs, rows = [], []
    for t in p["t_grid"]:
        basis = build_small_basis(m, float(t), p["N"], charts=charts)
        rec = recover_incidence(m, basis, c)
        recs.append(rec)
        for q, mat in rec.matrices.items():
            for i, x in enumerate(basis.generators[q + 1]):
                for j, y in enumerate(basis.generators[q]):
                    oracle = float(np.real(rec.oracle[q][i, j])) if q in rec.oracle else None
                    rows.append([float(t), q, x, y, float(np.real(mat[i, j])), oracle, rec.relative_error.get((q, x, y))])
    rows.sort(key=lambda r: (r[1], r[0], r[2], r[3]))
    fits = fit_recovered_counts(recs, table, m)
    worst = max((r[6] for r in rows if r[6] is not None), default=0.0)
    payload = {
        "chain_map": {"s": p["chain_s"], "max_residual": chain.max_residual},
        "recovery": {"columns": ["t", "q", "x", "y", "spectral", "trajectory", "relative_error"], "rows": rows},
        "max_relative_error": worst,
        "integer_fits": [
            {"pair": list(f.pair), "exponents": list(f.exponents), "expected": list(f.expected), "fitted": list(f.fitted)} for f in fits
        ],
    }
    checks = {
        "chain_map": chain.max_residual < p["chain_tolerance"],
        "recovery_within_tolerance": worst < p["recovery_tolerance"],
        "integer_fits_exact": all(f.exact for f in fits),
    }
    return payload, checks


def _random_form(rng, n, q, N, K=4):
    from .spectral import FormField

    shape = (math.comb(n, q),) + (N,) * n
    hat = np.zeros(shape, dtype=complex)
    keep = np.r_[0 : K + 1, N - K : N]
    sel = np.ix_(range(shape[0]), *([keep] * n))
    hat[sel] = rng.standard_normal(hat[sel].shape) + 1j * rng.standard_normal(hat[sel].shape)
    return FormField(q, np.fft.ifftn(hat, axes=tuple(range(1, n + 1))).real)


RUNNERS = {"zeros": _run_zeros, "rho": _run_rho, "complex": _run_complex, "spectrum": _run_spectrum, "recover": _run_recover}


# -- orchestration -------------------------------------------------------------------


@dataclass
class RunReport:
    config_hash: str
    stages: dict = field(default_factory=dict)  # name -> {"status", "result", "checks", ...}
    timings: dict = field(default_factory=dict)
    cache_hits: dict = field(default_factory=dict)

    @property
    def acceptance(self) -> dict:
        return {f"{s}.{k}": v for s, sec in sorted(self.stages.items()) for k, v in sorted(sec.get("checks", {}).items())}

    @property
    def exit_code(self) -> int:
        if any(sec["status"] == "failed" for sec in self.stages.values()):
            return EXIT_NUMERIC
        if not all(self.acceptance.values()):
            return EXIT_ACCEPTANCE
        return EXIT_PASS

    def payload(self) -> dict:
        return _jsonable(
            {
                "config_hash": self.config_hash,
                "versions": {"novikov_lab": __version__, "numpy": np.__version__, "scipy": scipy.__version__},
                "stages": {k: self.stages[k] for k in sorted(self.stages)},
                "acceptance": self.acceptance,
                "exit_code": self.exit_code,
            }
        )

    def to_json(self) -> str:
        return json.dumps(self.payload(), sort_keys=True, indent=1)


def _closure(targets) -> list[str]:
    need = set()

    def visit(s):
        if s not in need:
            need.add(s)
            for d in DEPENDS[s]:
                visit(d)

    for t in targets:
        visit(t)
    return [s for s in STAGES if s in need]


def run(
    config: RunConfig,
    out_dir: str | Path | None = None,
    *,
    stage: str | None = None,
    use_cache: bool = True,
) -> RunReport:
    """Run the selected stages (plus dependencies) in dependency order.

    A failing stage records its reason code; stages depending on it are
    skipped while independent stages still run.
    """
    from .manifold import ModelManifold  # noqa: F401  (import errors surface as config errors below)

    if stage is not None and stage != "all" and stage not in STAGES:
        raise ConfigError(f"unknown stage '{stage}'")
    targets = list(config.data["stages"]) if stage in (None, "all") else [stage]
    order = _closure(targets)
    m = config.manifold()
    cache_dir = Path(out_dir) / "cache" if out_dir is not None else None
    report = RunReport(config.hash())
    keys: dict = {}
    payloads: dict = {}
    base = {"version": __version__, "manifold": m.to_dict()}
    for s in order:
        keys[s] = _digest({"stage": s, **base, "params": _stage_params(config, s), "deps": [keys[d] for d in DEPENDS[s]]})

    def execute(s):
        failed = [d for d in DEPENDS[s] if report.stages.get(d, {}).get("status") != "ok"]
        if failed:
            return s, {"status": "skipped", "reason": "dependency_failed", "dependencies": failed}, 0.0, False
        path = cache_dir / f"{s}-{keys[s][:24]}.json" if cache_dir is not None else None
        if use_cache and path is not None and path.is_file():
            cached = json.loads(path.read_text())
            if cached.get("key") == keys[s]:
                return s, cached["section"], 0.0, True
        t0 = time.perf_counter()
        try:
            result, checks = RUNNERS[s](m, config, {d: payloads[d] for d in DEPENDS[s]})
            section = {"status": "ok", "result": _jsonable(result), "checks": _jsonable(checks)}
        except ConfigError:
            raise
        except NovikovLabError as exc:
            section = {"status": "failed", "reason": exc.reason, "message": str(exc)}
        elapsed = time.perf_counter() - t0
        if path is not None and section["status"] == "ok":
            path.parent.mkdir(parents=True, exist_ok=True)
            path.write_text(json.dumps({"key": keys[s], "section": section}, sort_keys=True))
        return s, section, elapsed, False

    def record(res):
        s, section, elapsed, hit = res
        report.stages[s] = section
        if section["status"] == "ok":
            payloads[s] = section["result"]
        report.timings[s] = elapsed
        report.cache_hits[s] = hit

    threads = int(config.data["threads"])
    pending = list(order)
    while pending:
        ready = [s for s in pending if all(d in report.stages for d in DEPENDS[s])]
        if threads > 1 and len(ready) > 1:
            with ThreadPoolExecutor(max_workers=threads) as pool:
                for res in pool.map(execute, ready):  # map keeps submission order
                    record(res)
        else:
            for s in ready:
                record(execute(s))
        pending = [s for s in pending if s not in ready]
    if out_dir is not None:
        write_outputs(report, out_dir)
    return report


def emit_plots_data(report: RunReport) -> dict:
    """Flat comma-separated tables keyed by file name."""
    out = {}
    spec = report.stages.get("spectrum", {})
    if spec.get("status") == "ok":
        rows = sorted(spec["result"]["table"], key=lambda r: (r[1], r[0], r[2]))
        out["spectrum.csv"] = "t,q,idx,lambda\n" + "".join(f"{t!r},{q},{i},{lam:.12e}\n" for t, q, i, lam in rows)
    rec = report.stages.get("recover", {})
    if rec.get("status") == "ok" and "recovery" in rec["result"]:
        lines = ["t,q,x,y,spectral,trajectory,relative_error"]
        lines += [",".join(repr(v) if isinstance(v, float) else str(v) for v in r) for r in rec["result"]["recovery"]["rows"]]
        out["recovery.csv"] = "\n".join(lines) + "\n"
    rho = report.stages.get("rho", {})
    if rho.get("status") == "ok":
        lines = ["critical_point,a,radius,integral"]
        for e in rho["result"]["estimates"]:
            for a, vals in e["integrals"].items():
                lines += [f"{e['critical_point']},{a},{r!r},{v!r}" for r, v in zip(e["radii"], vals)]
        out["rho.csv"] = "\n".join(lines) + "\n"
    return out


def write_outputs(report: RunReport, out_dir: str | Path) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "report.json").write_text(report.to_json() + "\n")
    (out / "run_meta.json").write_text(
        json.dumps({"timings": report.timings, "cache_hits": report.cache_hits}, sort_keys=True, indent=1) + "\n"
    )
    plots = out / "plots"
    plots.mkdir(exist_ok=True)
    for name, text in emit_plots_data(report).items():
        (plots / name).write_text(text)


def summary(report: RunReport) -> str:
    lines = [f"config {report.config_hash[:12]}"]
    for s in STAGES:
        sec = report.stages.get(s)
        if sec is None:
            continue
        extra = f" ({sec.get('reason')}: {sec.get('message', '')})" if sec["status"] != "ok" else ""
        lines.append(f"{s:9s} {sec['status']}{extra}  [{report.timings.get(s, 0.0):.1f}s{' cached' if report.cache_hits.get(s) else ''}]")
        for k, v in sorted(sec.get("checks", {}).items()):
            lines.append(f"    {'PASS' if v else 'FAIL'}  {k}")
    lines.append(f"exit {report.exit_code}")
    return "\n".join(lines)


# -- command line ----------------------------------------------------------------------


def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="novikov-lab", description="Novikov complexes from trajectories and from Witten Laplacian spectra.")
    p.add_argument("command", nargs="?", default="all", choices=list(STAGES) + ["all"], help="stage to run (with its dependencies)")
    p.add_argument("--config", required=True, help="JSON run configuration")
    p.add_argument("--out", default="novikov-out", help="output directory (report, plots, cache)")
    p.add_argument("--stage", choices=list(STAGES) + ["all"], help="same as the positional command")
    p.add_argument("--seed", type=int, help="override the config seed (unsigned 64-bit)")
    p.add_argument("--threads", type=int, help="override the config worker count")
    p.add_argument("--no-cache", action="store_true", help="recompute every stage")
    return p


def main(argv=None) -> int:
    try:
        args = _parser().parse_args(argv)
    except SystemExit as exc:
        return EXIT_CONFIG if exc.code else EXIT_PASS
    try:
        if args.stage and args.command != "all" and args.stage != args.command:
            raise ConfigError(f"--stage {args.stage} conflicts with command {args.command}")
        stage = args.stage or args.command
        raw = json.loads(Path(args.config).read_text()) if Path(args.config).is_file() else None
        if raw is None:
            raise ConfigError(f"config file {args.config} does not exist")
        if args.seed is not None:
            raw["seed"] = args.seed
        if args.threads is not None:
            raw["threads"] = args.threads
        cfg = RunConfig.from_dict(raw)
        report = run(cfg, args.out, stage=stage, use_cache=not args.no_cache)
    except json.JSONDecodeError as exc:
        print(f"config error: invalid JSON: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    print(summary(report))
    return report.exit_code


if __name__ == "__main__":
    sys.exit(main())
