"""Command line front end: ``rbsdelab {simulate,solve,check,compare,report}``.

One JSON configuration drives every subcommand.  A run directory receives

* ``solution.csv``  one row per time index and chain state (schema below),
* ``verdicts.json`` the checker verdict blocks, sorted and canonically encoded,
* ``summary.txt``   a plain-text rendering of the verdicts,
* ``manifest.json`` config hash, versions, timings and file checksums.

``solution.csv`` columns: ``m, t, x, regime, layer, Y, Z, Kplus, Kminus,
contact_flag``; ``Kplus``/``Kminus`` are the reflection increments over
``[t_m, t_{m+1}]`` (zero on the last row).  Outputs other than the manifest
are byte-identical for identical ``(config, seed)``.

Exit codes: 0 when every verdict is PASS, NOT-APPLICABLE or INFORMATIONAL,
1 on any FAIL (or a checksum mismatch in ``report``), 2 on configuration
errors.
"""

from __future__ import annotations

import argparse
import copy
import hashlib
import json
import math
import os
import platform
import sys
import time
from importlib import resources
from pathlib import Path

import numpy as np
import scipy

from . import __version__
from .analysis import (apriori_report, comparison_check, linear_representation_check, norms, norms_monte_carlo,
                       random_linear_problem)
from .chain import build_chain
from .data import assemble, cost_from_config, tau_from_config
from .errors import ConfigurationError, DataError, InvariantViolation, ModelError, PreconditionError
from .model import model_from_config
from .pathsim import compensator_check, regime_transition_check, simulate_paths
from .solver import check_invariants, paste_tau, solve

REPORT_FORMAT = 1
CSV_SCHEMA = "m,t,x,regime,layer,Y,Z,Kplus,Kminus,contact_flag"
TOP_KEYS = {"description", "seed", "model", "chain", "problem", "checks", "output", "simulate", "compare"}
CHAIN_KEYS = {"steps", "bounds", "nodes", "span"}
PROBLEM_KEYS = {"kind", "driver", "terminal", "lower", "upper", "tau", "probes"}
OK_STATUSES = {"PASS", "NOT-APPLICABLE", "INFORMATIONAL"}


class ConfigError(Exception):
    """Configuration problem anchored to a line of the config file."""

    def __init__(self, message, anchor=()):
        super().__init__(message)
        self.anchor = tuple(anchor)


# ---------------------------------------------------------------------------
# configuration


def bundled_configs():
    """Names of the configurations shipped with the package."""
    root = resources.files("rbsdelab") / "configs"
    return sorted(p.name[:-5] for p in root.iterdir() if p.name.endswith(".json"))


def _resolve_config(path):
    p = Path(path)
    if p.exists():
        return p.read_text(), str(p)
    root = resources.files("rbsdelab") / "configs"
    cand = root / (p.name if p.name.endswith(".json") else p.name + ".json")
    if cand.is_file():
        return cand.read_text(), f"<bundled>/{cand.name}"
    raise ConfigError(f"cannot read config '{path}'")


def _line_of(text, anchor):
    """1-based line of the nested key path ``anchor`` (best effort, first match)."""
    pos = 0
    for key in anchor:
        hit = text.find(json.dumps(key), pos)
        if hit < 0:
            break
        pos = hit
    return text.count("\n", 0, pos) + 1


def load_config(path, seed=None):
    """Parse and validate a run configuration; returns ``(config, text, label)``."""
    text, label = _resolve_config(path)
    try:
        cfg = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{exc.msg} (column {exc.colno})", anchor=("__line__", exc.lineno)) from None
    if not isinstance(cfg, dict):
        raise ConfigError("top level must be an object")
    unknown = sorted(set(cfg) - TOP_KEYS)
    if unknown:
        raise ConfigError(f"unknown top-level keys {unknown}", anchor=(unknown[0],))
    if seed is not None:
        cfg["seed"] = int(seed)
    if "seed" not in cfg:
        raise ConfigError("'seed' is required (no implicit randomness)")
    if not isinstance(cfg["seed"], int) or not 0 <= cfg["seed"] < 2**64:
        raise ConfigError("'seed' must be an unsigned 64-bit integer", anchor=("seed",))
    for block, keys in (("chain", CHAIN_KEYS), ("problem", PROBLEM_KEYS)):
        extra = sorted(set(cfg.get(block, {})) - keys)
        if extra:
            raise ConfigError(f"unknown {block} keys {extra}", anchor=(block, extra[0]))
    for entry in cfg.get("checks", []):
        name = entry.get("name") if isinstance(entry, dict) else entry
        if name not in CHECKERS:
            raise ConfigError(f"unknown checker '{name}'; available: {sorted(CHECKERS)}", anchor=("checks", str(name)))
    return cfg, text, label


def _stage(anchor, fn, *args, **kwargs):
    try:
        return fn(*args, **kwargs)
    except DataError as exc:
        # ordering failures point at the obstacle declarations
        if anchor == ("problem",) and "<=" in str(exc):
            anchor = ("problem", "lower" if "ell <= h" in str(exc) else "terminal")
        raise ConfigError(str(exc), anchor=anchor) from None
    except (ConfigurationError, ModelError, PreconditionError) as exc:
        raise ConfigError(str(exc), anchor=anchor) from None
    except (KeyError, TypeError, ValueError) as exc:
        raise ConfigError(f"invalid {anchor[0]} block: {exc!r}", anchor=anchor) from None


def _shifted(problem, terminal=0.0, lower=0.0, upper=0.0, driver=0.0):
    out = copy.deepcopy(problem)
    if driver:
        drv = out.get("driver", {})
        if drv.get("type") != "affine":
            raise ConfigurationError("only affine drivers can be shifted")
        drv["const"] = float(drv.get("const", 0.0)) + float(driver)
    for key, shift in (("terminal", terminal), ("lower", lower), ("upper", upper)):
        if shift:
            spec = out.get(key)
            if spec is None:
                raise ConfigurationError(f"cannot shift the absent '{key}' obstacle")
            if spec.get("type") == "phi_floor":
                raise ConfigurationError("phi_floor obstacles cannot be shifted")
            spec["shift"] = float(spec.get("shift", 0.0)) + float(shift)
    return out


class Context:
    """Objects built from one configuration, created lazily and never mutated."""

    def __init__(self, cfg, threads=1):
        self.cfg = cfg
        self.seed = int(cfg["seed"])
        self.threads = max(1, int(threads))
        self.timings = {}
        self._cache = {}

    def _timed(self, name, fn):
        if name not in self._cache:
            t0 = time.perf_counter()
            self._cache[name] = fn()
            self.timings[name] = time.perf_counter() - t0
        return self._cache[name]

    @property
    def model(self):
        if "model" not in self.cfg:
            raise ConfigError("'model' block is required")
        return self._timed("model", lambda: _stage(("model",), model_from_config, self.cfg["model"]))

    @property
    def chain(self):
        c = self.cfg.get("chain")
        if c is None:
            raise ConfigError("'chain' block is required")

        def build():
            for key in ("steps", "bounds", "nodes"):
                if key not in c:
                    raise ConfigurationError(f"chain block is missing '{key}'")
            return build_chain(self.model, int(c["steps"]), tuple(c["bounds"]), int(c["nodes"]),
                               span=c.get("span", "adaptive"))

        return self._timed("chain", lambda: _stage(("chain",), build))

    def problem_data(self, problem=None, kind=None, tau=None, probes=None):
        base = self.cfg.get("problem")
        if base is None:
            raise ConfigError("'problem' block is required")
        problem = base if problem is None else problem
        kind = problem.get("kind", "R2BSDE") if kind is None else kind
        tau = problem.get("tau") if tau is None else tau
        n_probes = int(problem.get("probes", 10_000)) if probes is None else probes

        def build():
            cost = cost_from_config(problem, self.model)
            return assemble(kind, cost, self.model, tau_from_config(tau), chain=self.chain,
                            probe_seed=self.seed, n_probes=n_probes)

        return _stage(("problem",), build)

    @property
    def data(self):
        return self._timed("assemble", lambda: self.problem_data())

    @property
    def solution(self):
        return self._timed("solve", lambda: _stage(("problem",), solve, self.chain, self.data))


# ---------------------------------------------------------------------------
# checkers: each takes (context, params) and returns one verdict block


def check_invariants_verdict(ctx, params):
    try:
        diag = check_invariants(ctx.solution)
    except InvariantViolation as exc:
        return {"name": "invariants", "status": "FAIL", "reason": str(exc)}
    margin = 0.0 - max(diag["max_constraint_violation"], diag["max_mutual_singularity"], diag["minimality_residual"],
                  diag["backward_residual"])
    return {"name": "invariants", "status": "PASS", "worst_margin": margin, **diag}


def check_kplus(ctx, params):
    from .solver import kplus_density_check

    return kplus_density_check(ctx.solution, ctx.data)


def check_paste(ctx, params):
    data = ctx.data
    if data.kind != "R2BSDE":
        return {"name": "paste_tau", "status": "NOT-APPLICABLE", "reason": "needs kind R2BSDE"}
    taus = params.get("taus", [params.get("tau", {"time": ctx.model.T / 2})])
    cases = []
    for spec in taus:
        tau = _stage(("checks", "paste_tau"), tau_from_config, spec)
        pasted = _stage(("checks", "paste_tau"), paste_tau, ctx.chain, data, tau)
        direct_data = ctx.problem_data(kind="TAU-R2BSDE", tau=spec, probes=0)
        direct = solve(ctx.chain, direct_data)
        diff = float(np.max(np.abs(pasted.Y - direct.Y)))
        dk = float(max(np.max(np.abs(pasted.dKplus - direct.dKplus)), np.max(np.abs(pasted.dKminus - direct.dKminus))))
        cases.append({"tau": spec, "max_abs_diff_Y": diff, "max_abs_diff_K": dk})
    worst = max(max(c["max_abs_diff_Y"], c["max_abs_diff_K"]) for c in cases)
    tol = float(params.get("tol", 1e-12))
    return {"name": "paste_tau", "status": "PASS" if worst <= tol else "FAIL", "worst_margin": tol - worst,
            "cases": cases}


def check_comparison(ctx, params):
    prime = _stage(("checks", "comparison"), _shifted, ctx.cfg["problem"], params.get("terminal_shift", 0.1),
                   params.get("lower_shift", 0.0), params.get("upper_shift", 0.0))
    data_p = ctx.problem_data(problem=prime, probes=0)
    sol_p = solve(ctx.chain, data_p)
    return comparison_check(ctx.solution, sol_p, ctx.data, data_p, tol=float(params.get("tol", 1e-12)),
                            counterexample=bool(params.get("counterexample", False)))


def check_norms(ctx, params):
    rep = norms(ctx.solution, data=ctx.data).as_dict()
    finite = all(math.isfinite(v) for k, v in rep.items() if k != "s2_Y_bounds")
    out = {"name": "norms", "status": "PASS" if finite else "FAIL", "norms": rep}
    n_mc = int(params.get("monte_carlo_paths", 0))
    if n_mc:
        mc = norms_monte_carlo(ctx.solution, n_mc, seed=ctx.seed)
        out["monte_carlo"] = mc
        if mc["status"] != "PASS":
            out["status"] = "FAIL"
    return out


def check_apriori(ctx, params):
    ns = params.get("n", [1, 2, 4, 8, 16])
    scale = float(params.get("scale", 1.0))
    seq = []
    for n in ns:
        target = params.get("perturb", "terminal")
        if target not in ("terminal", "driver"):
            raise ConfigError("apriori.perturb must be 'terminal' or 'driver'", anchor=("checks", "apriori"))
        prob = _stage(("checks", "apriori"), _shifted, ctx.cfg["problem"], **{target: scale / n})
        data_n = ctx.problem_data(problem=prob, probes=0)
        seq.append((data_n, solve(ctx.chain, data_n)))
    rep = apriori_report(seq, reference=(ctx.data, ctx.solution))
    rep["n"] = list(ns)
    return rep


def check_compensator(ctx, params):
    n = int(params.get("n_paths", 100_000))
    steps = int(params.get("steps", 100))
    bundle = _stage(("checks", "compensator"), simulate_paths, ctx.model, steps, n, ctx.seed, threads=ctx.threads)
    return compensator_check(bundle, ctx.model)


def check_regime(ctx, params):
    model = ctx.model
    rates = np.asarray(model.config["regime_rates"])
    if model.k != 2 or rates[0, 1] != rates[1, 0]:
        return {"name": "regime_transition", "status": "NOT-APPLICABLE", "reason": "needs two symmetric regimes"}
    n = int(params.get("n_paths", 100_000))
    bundle = simulate_paths(model, int(params.get("steps", 100)), n, ctx.seed, threads=ctx.threads)
    return regime_transition_check(bundle, float(rates[0, 1]))


def check_adjoint(ctx, params):
    c = ctx.cfg["chain"]
    steps, nodes = int(params.get("steps", 50)), int(params.get("nodes", 50))
    small = _stage(("checks", "adjoint"), build_chain, ctx.model, steps, tuple(c["bounds"]), nodes,
                   span=c.get("span", "adaptive"))
    tau = _stage(("checks", "adjoint"), tau_from_config, params.get("tau"))
    worst, rows = 0.0, []
    for j in range(int(params.get("problems", 100))):
        prob = random_linear_problem(small, ctx.seed + j)
        res = linear_representation_check(small, tau=tau, **prob)
        worst = max(worst, res["residual"])
        rows.append(res["residual"])
    tol = float(params.get("tol", 1e-11))
    return {"name": "adjoint_identity", "status": "PASS" if worst <= tol else "FAIL", "worst_margin": tol - worst,
            "max_residual": worst, "problems": len(rows)}


CHECKERS = {
    "invariants": check_invariants_verdict,
    "kplus_density": check_kplus,
    "paste_tau": check_paste,
    "comparison": check_comparison,
    "norms": check_norms,
    "apriori": check_apriori,
    "compensator": check_compensator,
    "regime_transition": check_regime,
    "adjoint": check_adjoint,
}


# ---------------------------------------------------------------------------
# output


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, (np.bool_, bool)):
        return bool(obj)
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        v = float(obj)
        if math.isnan(v):
            return "nan"
        if math.isinf(v):
            return "inf" if v > 0 else "-inf"
        return v
    if isinstance(obj, np.ndarray):
        return _jsonable(obj.tolist())
    return obj


def canonical_json(obj):
    return json.dumps(_jsonable(obj), sort_keys=True, indent=2) + "\n"


def _sha256(path):
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()


def versions():
    return {"rbsdelab": __version__, "report_format": REPORT_FORMAT, "python": platform.python_version(),
            "numpy": np.__version__, "scipy": scipy.__version__}


def config_hash(text):
    return hashlib.sha256((text + "\0rbsdelab " + __version__).encode()).hexdigest()


def overall_status(verdicts):
    return "PASS" if all(v.get("status") in OK_STATUSES for v in verdicts) else "FAIL"


def render_summary(verdicts, header=None):
    """Plain-text table of verdicts with per-check details, in stable order."""
    lines = [] if header is None else list(header)
    lines.append(f"{'check':<20} {'status':<15} {'worst margin':>14}")
    lines.append("-" * 51)
    for v in verdicts:
        m = v.get("worst_margin", v.get("worst_abs_z"))
        ms = "" if m is None else (f"{m:>14.4g}" if isinstance(m, (int, float)) else f"{m!s:>14}")
        lines.append(f"{v['name']:<20} {v['status']:<15} {ms}")
        if v.get("witness"):
            w = v["witness"]
            lines.append(f"    witness m={w['m']} t={w['t']:.6g} x={w['x']:.6g} regime={w['regime']} layer={w['layer']}")
        if v.get("first_violated"):
            lines.append(f"    first violated hypothesis: {v['first_violated']}")
        if v.get("reason"):
            lines.append(f"    {v['reason']}")
    for v in verdicts:
        if v["name"] == "norms":
            lines.append("")
            lines.append("norms (squared)")
            for key in ("s2_Y", "h2_Z", "hmu2_V", "s2_Kplus", "s2_Kminus", "solution_size", "data_size"):
                lines.append(f"  {key:<14} {_num(v['norms'][key]):>16}")
        if v["name"] == "apriori":
            lines.append("")
            lines.append(f"{'n':>4} {'solution size':>16} {'data size':>16} {'diff to limit':>16}")
            for j, n in enumerate(v.get("n", range(1, len(v["per_n"]) + 1))):
                r = v["per_n"][j]
                d = v["trend_totals"][j] if j < len(v["trend_totals"]) else float("nan")
                lines.append(f"{n:>4} {_num(r['solution_size']):>16} {_num(r['data_size']):>16} {_num(d):>16}")
    lines.append("")
    lines.append(f"overall: {overall_status(verdicts)}")
    return "\n".join(lines) + "\n"


def _num(v):
    return f"{v:.6g}" if isinstance(v, (int, float)) else str(v)


def _write_run(out, ctx, command, label, text, verdicts, solution=True, extra_files=()):
    out.mkdir(parents=True, exist_ok=True)
    files = []
    if solution:
        t0 = time.perf_counter()
        ctx.solution.to_csv(out / "solution.csv")
        ctx.timings["write_csv"] = time.perf_counter() - t0
        files.append("solution.csv")
    files.extend(extra_files)
    payload = {"command": command, "seed": ctx.seed, "status": overall_status(verdicts), "verdicts": verdicts}
    if solution:
        payload["Y0"] = ctx.solution.Y0
        payload["chain"] = ctx.chain.summary()
    (out / "verdicts.json").write_text(canonical_json(payload))
    header = [f"rbsdelab {__version__}  command={command}  seed={ctx.seed}", ""]
    (out / "summary.txt").write_text(render_summary(_jsonable(verdicts), header))
    files += ["verdicts.json", "summary.txt"]
    manifest = {
        "format": REPORT_FORMAT, "command": command, "config": label, "config_sha256": config_hash(text),
        "seed": ctx.seed, "threads": ctx.threads, "versions": versions(),
        "timings_seconds": ctx.timings, "files": {f: _sha256(out / f) for f in sorted(files)},
    }
    (out / "manifest.json").write_text(canonical_json(manifest))


def _output_dir(cfg, out):
    target = out or cfg.get("output", {}).get("dir")
    if not target:
        raise ConfigError("no output directory: pass --out or set output.dir", anchor=("output",))
    path = Path(target)
    try:
        path.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise ConfigError(f"output directory not writable: {exc}", anchor=("output",)) from None
    if not os.access(path, os.W_OK):
        raise ConfigError(f"output directory not writable: {path}", anchor=("output",))
    return path


def _run_checks(ctx, entries):
    verdicts = []
    for entry in entries:
        name, params = (entry, {}) if isinstance(entry, str) else (entry["name"], entry)
        t0 = time.perf_counter()
        verdicts.append(CHECKERS[name](ctx, params))
        ctx.timings[f"check:{name}"] = time.perf_counter() - t0
    return verdicts


def _command(command, args):
    cfg, text, label = load_config(args.config, args.seed)
    out = _output_dir(cfg, args.out)
    ctx = Context(cfg, threads=args.threads)
    extra = []
    if command == "simulate":
        sim = cfg.get("simulate", {})
        bundle = _stage(("simulate",), simulate_paths, ctx.model, int(sim.get("steps", 100)),
                        int(sim.get("n_paths", 10_000)), ctx.seed, threads=ctx.threads,
                        jump_form=sim.get("jump_form", "compensated"))
        verdicts = [compensator_check(bundle, ctx.model)]
        if sim.get("dump_paths", False):
            out.mkdir(parents=True, exist_ok=True)
            bundle.to_csv(out / "paths.csv")
            extra.append("paths.csv")
        _write_run(out, ctx, command, label, text, verdicts, solution=False, extra_files=extra)
    else:
        ctx.solution  # noqa: B018  build and solve before any checker
        verdicts = [check_invariants_verdict(ctx, {})]
        if command == "check":
            entries = [e for e in cfg.get("checks", []) if (e if isinstance(e, str) else e["name"]) != "invariants"]
            verdicts += _run_checks(ctx, entries)
        elif command == "compare":
            verdicts.append(check_comparison(ctx, cfg.get("compare", {})))
        _write_run(out, ctx, command, label, text, verdicts)
    sys.stdout.write(render_summary(_jsonable(verdicts)))
    return 0 if overall_status(verdicts) == "PASS" else 1


def report(run_dir, stream=None):
    """Print the summary of a run directory; returns the exit code."""
    stream = sys.stdout if stream is None else stream
    run_dir = Path(run_dir)
    mpath = run_dir / "manifest.json"
    if not mpath.is_file():
        sys.stderr.write(f"{run_dir}: error: manifest.json missing\n")
        return 2
    manifest = json.loads(mpath.read_text())
    current = versions()
    recorded = manifest.get("versions", {})
    mixed = [k for k in ("rbsdelab", "report_format") if recorded.get(k) != current[k]]
    if mixed:
        sys.stderr.write(f"{run_dir}: error: written by a different version ({', '.join(f'{k}={recorded.get(k)}' for k in mixed)})\n")
        return 2
    problems = []
    for name, digest in sorted(manifest.get("files", {}).items()):
        f = run_dir / name
        if not f.is_file():
            problems.append(f"missing file: {name}")
        elif _sha256(f) != digest:
            problems.append(f"checksum mismatch: {name}")
    verdicts = []
    vpath = run_dir / "verdicts.json"
    if vpath.is_file() and "checksum mismatch: verdicts.json" not in problems:
        verdicts = json.loads(vpath.read_text())["verdicts"]
    header = [f"run {run_dir}  command={manifest.get('command')}  seed={manifest.get('seed')}",
              f"config {manifest.get('config')}  sha256 {manifest.get('config_sha256', '')[:16]}", ""]
    stream.write(render_summary(verdicts, header))
    for p in problems:
        stream.write(f"INTEGRITY: {p}\n")
    if problems:
        return 1
    return 0 if overall_status(verdicts) == "PASS" else 1


# ---------------------------------------------------------------------------
# entry points


def build_parser():
    parser = argparse.ArgumentParser(prog="rbsdelab", description="Reflected BSDE solvers and checkers on Markov chains.")
    parser.add_argument("--version", action="version", version=f"rbsdelab {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, text in (("simulate", "simulate factor paths and check the compensator"),
                       ("solve", "build, solve and write the solution"),
                       ("check", "solve and run every configured checker"),
                       ("compare", "solve the config and its perturbation and check ordering")):
        p = sub.add_parser(name, help=text)
        p.add_argument("--config", required=True, help="config file or bundled config name")
        p.add_argument("--out", help="run directory (overrides output.dir)")
        p.add_argument("--seed", type=int, help="seed (overrides the config)")
        p.add_argument("--threads", type=int, default=1, help="worker threads (speed only)")
    p = sub.add_parser("report", help="summarize a run directory")
    p.add_argument("run_dir")
    return parser


def _config_error(exc, args):
    label = getattr(args, "config", "<config>")
    anchor = exc.anchor
    line = 1
    if anchor and anchor[0] == "__line__":
        line = anchor[1]
    elif anchor:
        try:
            line = _line_of(_resolve_config(label)[0], anchor)
        except ConfigError:
            pass
    sys.stderr.write(f"{label}:{line}: error: {exc}\n")
    return 2


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return 2 if exc.code else 0
    if args.command == "report":
        return report(args.run_dir)
    try:
        return _command(args.command, args)
    except ConfigError as exc:
        return _config_error(exc, args)


def run(config_path, out=None, seed=None, threads=1):
    """Build, solve and run every configured check; returns the exit code."""
    argv = ["check", "--config", str(config_path), "--threads", str(threads)]
    if out is not None:
        argv += ["--out", str(out)]
    if seed is not None:
        argv += ["--seed", str(seed)]
    return main(argv)


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
