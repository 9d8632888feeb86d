"""Command-line front end.

Every subcommand loads a JSON config, applies ``--set key=value`` overrides,
runs one stage of the pipeline and writes ``<out>/<subcommand>.csv`` plus an
entry in ``<out>/meta.json``. CSV files start with ``#`` lines carrying the
config hash and seed; the body after them is reproducible byte for byte.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import math
import sys
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import __version__
from . import adjoint as adj
from . import config as cfg
from .errors import SchemaError, VarhorError
from .model import ControlPath, ProblemSpec, TimeGrid, builtin, load_problem
from .opt import (OptimizerOptions, feasible_direction, finite_difference, gradient, inner,
                  optimize)
from .pipeline import Pipeline, Settings
from .sim import mean_functional
from .smp import check_smp, gateaux_cost, rho_convergence
from .stopping import as_direction, tau_derivative

SUBCOMMANDS = ("simulate", "stopping", "cost", "adjoint", "check-smp", "grad-check",
               "rho-table", "optimize", "example-verify")


def fmt(x) -> str:
    if isinstance(x, (bool, np.bool_)):
        return "true" if x else "false"
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    if isinstance(x, (float, np.floating)):
        return format(float(x), ".17g")
    return str(x)


# ---------------------------------------------------------------------------
# run context
# ---------------------------------------------------------------------------

@dataclass
class Run:
    config: dict       # effective config, defaults filled in
    spec: ProblemSpec
    hash: str
    out: Path

    @property
    def seed(self) -> int:
        return int(self.config["mc"]["seed"])

    @property
    def settings(self) -> Settings:
        c = self.config
        return Settings(M=int(c["mc"]["paths"]), seed=self.seed, mode=c["bsde"]["mode"],
                        basis_degree=int(c["bsde"]["basis_degree"]),
                        band_cells=int(c["stopping"]["at_T_band_cells"]))

    def grid(self, steps: int | None = None) -> TimeGrid:
        return TimeGrid(int(steps or self.config["grid"]["steps"]), self.spec.T)

    def control(self, grid: TimeGrid | None = None) -> ControlPath:
        grid = grid or self.grid()
        init = self.config.get("control", {}).get("init")
        if init is None:
            init = self.spec.project(np.zeros(self.spec.k))
        value = np.atleast_1d(np.asarray(init, dtype=float))
        if value.size == 1 and self.spec.k > 1:
            value = np.full(self.spec.k, value[0])
        if value.size != self.spec.k:
            raise SchemaError("control.init", f"needs {self.spec.k} values")
        return ControlPath.constant(grid, value)

    def pipeline(self, grid: TimeGrid | None = None) -> Pipeline:
        return Pipeline(self.spec, self.control(grid), self.settings)

    def direction(self, control: ControlPath) -> np.ndarray:
        return as_direction(control, self.config["smp"]["direction"])

    def write_csv(self, name: str, header: Sequence[str], rows) -> Path:
        self.out.mkdir(parents=True, exist_ok=True)
        buf = io.StringIO()
        buf.write(f"# config_hash={self.hash}\n# seed={self.seed}\n")
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(header)
        for r in rows:
            w.writerow([fmt(x) for x in r])
        path = self.out / f"{name}.csv"
        path.write_text(buf.getvalue())
        return path

    def write_meta(self, subcommand: str, extra: dict) -> Path:
        self.out.mkdir(parents=True, exist_ok=True)
        path = self.out / "meta.json"
        runs = {}
        if path.exists():
            try:
                runs = json.loads(path.read_text()).get("runs", {})
            except (json.JSONDecodeError, AttributeError):
                runs = {}
        runs[subcommand] = {
            "config_hash": self.hash,
            "seed": self.seed,
            "version": __version__,
            "config": self.config,
            **{k: _jsonable(v) for k, v in extra.items()},
        }
        path.write_text(json.dumps({"runs": runs}, indent=2, sort_keys=True) + "\n")
        return path


def _jsonable(v):
    if isinstance(v, dict):
        return {str(k): _jsonable(x) for k, x in v.items()}
    if isinstance(v, (list, tuple, np.ndarray)):
        return [_jsonable(x) for x in v]
    if isinstance(v, (np.floating, float)):
        v = float(v)
        return v if math.isfinite(v) else str(v)
    if isinstance(v, np.integer):
        return int(v)
    return v


def load_config(path: str | None, overrides: Sequence[str], default_problem: str | None = None) -> dict:
    if path is None:
        # without a file the problem can still come from --set
        raw = {} if default_problem is None else {"problem": default_problem}
    else:
        try:
            raw = json.loads(Path(path).read_text())
        except FileNotFoundError:
            raise SchemaError("--config", f"no such file: {path}") from None
        except json.JSONDecodeError as exc:
            raise SchemaError("--config", f"invalid JSON: {exc}") from None
    if not isinstance(raw, dict):
        raise SchemaError("<root>", "config must be a JSON object")
    for item in overrides:
        raw = cfg.apply_override(raw, item)
    cfg.validate(raw)
    return cfg.with_defaults(raw)


def make_run(args) -> Run:
    default = "paper-example" if args.command == "example-verify" else None
    config = load_config(args.config, args.set or [], default)
    spec = load_problem(config)
    out = Path(args.out or config["output"])
    return Run(config, spec, cfg.config_hash(config), out)


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------

def cmd_simulate(run: Run) -> dict:
    state = run.pipeline()
    ens = state.ensemble
    m = mean_functional(ens, run.spec.Phi)
    xm = ens.X.mean(axis=0)
    n = run.spec.n
    header = ["t", "mean_Phi", "stderr_Phi"] + [f"x{i + 1}_mean" for i in range(n)]
    rows = ([t, m.values[i], m.stderr[i], *xm[i]] for i, t in enumerate(ens.grid.nodes))
    run.write_csv("simulate", header, rows)
    print(f"paths = {ens.M}, steps = {ens.grid.N}, final mean Phi = {fmt(m.values[-1])}")
    return {"paths": ens.M, "steps": ens.grid.N}


def cmd_stopping(run: Run) -> dict:
    state = run.pipeline()
    s = state.stop
    rows = ([t, s.m_curve.values[i], s.m_curve.stderr[i], s.h_curve.values[i]]
            for i, t in enumerate(state.ensemble.grid.nodes))
    run.write_csv("stopping", ["t", "m", "stderr", "h"], rows)
    run.write_csv("stopping_summary", ["tau_hat", "case", "cross_index", "h_tau", "alpha"],
                  [[s.tau_hat, s.case_tag, -1 if s.cross_index is None else s.cross_index,
                    s.h_tau, run.spec.alpha]])
    print(f"tau_hat = {fmt(s.tau_hat)} ({s.case_tag})")
    return {"tau_hat": s.tau_hat, "case": str(s.case_tag)}


def _mean_z_rows(Z: np.ndarray, nodes: int) -> np.ndarray:
    """Cell values of a ``(M, K, a, b)`` process as node rows; the last node repeats the last cell."""
    M, K = Z.shape[:2]
    flat = Z.mean(axis=0).reshape(K, int(np.prod(Z.shape[2:])))
    if K == 0:
        return np.zeros((nodes, flat.shape[1]))
    return np.concatenate([flat, flat[-1:]], axis=0)[:nodes]


def cmd_cost(run: Run) -> dict:
    spec = run.spec
    state = run.pipeline()
    J = state.J
    back = state.back
    y0 = back.y0
    Y = back.Y.mean(axis=0)
    Z = _mean_z_rows(back.Z, len(back.times))
    header = (["t"] + [f"Y{i + 1}" for i in range(spec.m)]
              + [f"Z{i + 1}_{j + 1}" for i in range(spec.m) for j in range(spec.d)])
    run.write_csv("cost", header, ([t, *Y[i], *Z[i]] for i, t in enumerate(back.times)))
    header = ["J", "tau_hat", "case", "mode"] + [f"Y{i + 1}_0" for i in range(spec.m)]
    run.write_csv("cost_summary", header, [[J, state.tau_hat, state.stop.case_tag, back.mode, *y0]])
    print(f"J = {fmt(J)}, tau_hat = {fmt(state.tau_hat)} ({state.stop.case_tag})")
    return {"J": J, "tau_hat": state.tau_hat}


def cmd_adjoint(run: Run) -> dict:
    spec = run.spec
    state = run.pipeline()
    ad = state.adjoint
    back = state.back
    p = ad.p.mean(axis=0)
    q = ad.q.mean(axis=0)
    k = _mean_z_rows(ad.k, len(back.times))
    header = (["t"] + [f"p{i + 1}" for i in range(spec.n)]
              + [f"k{i + 1}_{j + 1}" for i in range(spec.n) for j in range(spec.d)]
              + [f"q{i + 1}" for i in range(spec.m)])
    run.write_csv("adjoint", header, ([t, *p[i], *k[i], *q[i]] for i, t in enumerate(back.times)))
    terms = adj.terminal_terms(spec, back, ad.q) if state.stop.case_tag.value != "Never" else None
    L = terms.script_L if terms else None
    run.write_csv("adjoint_summary", ["tau_hat", "case", "script_L"],
                  [[state.tau_hat, state.stop.case_tag, "" if L is None else L]])
    print(f"tau_hat = {fmt(state.tau_hat)}, L = {'n/a' if L is None else fmt(L)}, "
          f"max|p| = {fmt(np.abs(ad.p).max())}, max|q| = {fmt(np.abs(ad.q).max())}")
    return {"script_L": L, "tau_hat": state.tau_hat}


def _probes(run: Run) -> list:
    return list(run.config["smp"]["u_probes"])


def cmd_check_smp(run: Run) -> dict:
    spec = run.spec
    state = run.pipeline()
    rep = check_smp(spec, state, _probes(run), int(run.config["smp"]["t_nodes"]))
    header = ["t"] + [f"u{a + 1}" for a in range(spec.k)] + ["margin", "branch"]
    run.write_csv("check-smp", header, ([t, *u, mg, b] for t, u, mg, b in rep.rows()))
    print(f"case = {rep.case_tag}, min margin = {fmt(rep.min_margin)}, argmin = {rep.argmin}")
    return {"case": str(rep.case_tag), "min_margin": rep.min_margin,
            "argmin": list(rep.argmin) if rep.argmin else None, "script_L": rep.script_L}


def cmd_grad_check(run: Run) -> dict:
    spec = run.spec
    state = run.pipeline()
    ctrl = state.control
    grid = ctrl.grid
    rng = np.random.default_rng(run.seed)
    dirs = [("config", run.direction(ctrl))]
    dirs += [(f"random{i + 1}", feasible_direction(spec, ctrl, rng)) for i in range(3)]
    g = gradient(spec, state)
    rows = []
    worst = 0.0
    for name, v in dirs:
        gat = gateaux_cost(spec, state, v).value
        fd = finite_difference(state, v)
        rel = abs(gat - fd) / max(abs(fd), 1e-12)
        worst = max(worst, rel)
        rows.append([name, gat, inner(g, v, grid.dt), fd, rel])
    run.write_csv("grad-check", ["direction", "gateaux", "gradient_inner", "finite_difference",
                                 "rel_gap"], rows)
    for r in rows:
        print(f"{r[0]:>8}: gateaux = {fmt(r[1])}, fd = {fmt(r[3])}, rel gap = {r[4]:.2e}")
    return {"worst_rel_gap": worst}


def cmd_rho_table(run: Run) -> dict:
    state = run.pipeline()
    rows = rho_convergence(run.spec, state, run.direction(state.control),
                           run.config["smp"]["rho_list"])
    run.write_csv("rho-table", ["rho", "d_tau", "err_eta", "err_Y", "err_p"],
                  ([r.rho, r.d_tau, r.err_eta, r.err_Y, r.err_p] for r in rows))
    mono = _monotone(rows)
    print(f"rows = {len(rows)}, non-increasing columns: {mono}")
    return {"monotone": mono}


def _monotone(rows) -> dict:
    out = {}
    for col in ("d_tau", "err_eta", "err_Y", "err_p"):
        vals = [getattr(r, col) for r in rows]
        out[col] = all(b <= a for a, b in zip(vals, vals[1:]))
    return out


def _optimizer_options(config: dict) -> OptimizerOptions:
    o = config["optimizer"]
    return OptimizerOptions(step0=float(o["step0"]), max_iters=int(o["max_iters"]),
                            armijo_c=float(o["armijo_c"]), shrink=float(o["shrink"]),
                            grad_tol=float(o["grad_tol"]))


def cmd_optimize(run: Run) -> dict:
    grid = run.grid(run.config["optimizer"]["steps"])
    res = optimize(run.spec, run.control(grid), _optimizer_options(run.config), run.settings)
    run.write_csv("optimize", ["iter", "J", "tau_hat", "step", "grad_norm"],
                  ([r.iter, r.J, r.tau_hat, r.step, r.grad_norm] for r in res.trace))
    u = res.control.values
    run.write_csv("optimize_control", ["t"] + [f"u{a + 1}" for a in range(run.spec.k)],
                  ([t, *u[i]] for i, t in enumerate(grid.nodes[:-1])))
    last = res.trace[-1]
    print(f"iterations = {last.iter}, J = {fmt(last.J)}, tau_hat = {fmt(last.tau_hat)}, "
          f"converged = {res.converged}")
    return {"iterations": last.iter, "J": last.J, "converged": res.converged}


# -- the worked example battery ---------------------------------------------

@dataclass(frozen=True)
class Check:
    name: str
    value: float
    reference: float
    tolerance: float
    passed: bool


def _abs_check(name, value, ref, tol) -> Check:
    return Check(name, value, ref, tol, bool(abs(value - ref) <= tol))


def _rel_check(name, value, ref, tol) -> Check:
    return Check(name, value, ref, tol, bool(abs(value - ref) <= tol * abs(ref)))


def example_checks(steps: int = 10000, opt_steps: int = 1000, rho_list=(0.1, 0.05, 0.025, 0.0125),
                   include_slow: bool = True) -> list[Check]:
    """Closed-form checks on the worked example with dynamics ``dX = (X + u) dt``."""
    ln2 = math.log(2.0)
    spec = builtin("paper-example")
    grid = TimeGrid(steps, spec.T)
    state = Pipeline(spec, ControlPath.constant(grid, 1.0))
    out = []
    tau = state.tau_hat
    out.append(_abs_check("tau_hat", tau, ln2, 1e-3))
    out.append(_abs_check("J", state.J, ln2, 1e-3))
    classical = Pipeline(builtin("classical-example"), ControlPath.constant(grid, 1.0))
    out.append(_abs_check("J_fixed_horizon", classical.J, 1.0, 1e-6))
    out.append(Check("J_improvement", classical.J - state.J, 1.0 - ln2, math.inf,
                     bool(state.J < classical.J)))
    back = state.back
    Y = back.Y[0, :, 0]
    t = back.times
    out.append(_abs_check("Y0", Y[0], -ln2, 1e-3))
    out.append(_abs_check("Y_path_max_error", float(np.max(np.abs(Y + np.exp(t) * (tau - t)))), 0.0, 1e-3))
    ad = state.adjoint
    zero = max(np.abs(ad.p).max(), np.abs(ad.k).max() if ad.k.size else 0.0, np.abs(ad.q).max())
    out.append(_abs_check("adjoints_max_abs", float(zero), 0.0, 1e-12))
    v = np.ones((grid.N, 1))
    td = tau_derivative(spec, state.ensemble, state.stop, v).value
    out.append(_rel_check("tau_derivative", td, 0.5, 0.02))
    fd_tau = (tau - state.shifted(v, 1e-3).tau_hat) / 1e-3
    out.append(_rel_check("tau_finite_difference", fd_tau, 0.5, 0.02))
    gat = gateaux_cost(spec, state, v).value
    out.append(_rel_check("gateaux", gat, ln2 - 0.5, 0.01))
    out.append(_rel_check("gateaux_vs_finite_difference", gat, finite_difference(state, v), 0.01))
    probes = [1.0, 1.25, 1.5, 1.75, 2.0]
    rep = check_smp(spec, state, probes, 50)
    out.append(Check("smp_min_margin_optimal", rep.min_margin, -1e-6, 0.0, bool(rep.min_margin >= -1e-6)))
    rep2 = check_smp(spec, Pipeline(spec, ControlPath.constant(grid, 2.0)), probes, 50)
    out.append(Check("smp_min_margin_u2", rep2.min_margin, -0.1, 0.0, bool(rep2.min_margin <= -0.1)))
    if include_slow:
        rows = rho_convergence(spec, state, v, list(rho_list))
        mono = _monotone(rows)
        out.append(Check("rho_table_monotone", float(sum(mono.values())), 4.0, 0.0, all(mono.values())))
        og = TimeGrid(opt_steps, spec.T)
        res = optimize(spec, ControlPath.constant(og, 2.0))
        K = res.state.back.horizon.K
        dev = float(np.max(np.abs(res.control.values[:K] - 1.0)))
        out.append(_abs_check("optimizer_max_deviation", dev, 0.0, 1e-2))
        out.append(_abs_check("optimizer_J", res.state.J, ln2, 5e-3))
    return out


def cmd_example_verify(run: Run) -> dict:
    c = run.config
    checks = example_checks(int(c["grid"]["steps"]), int(c["optimizer"]["steps"]),
                            c["smp"]["rho_list"])
    run.write_csv("example-verify", ["check", "value", "reference", "tolerance", "pass"],
                  ([k.name, k.value, k.reference, k.tolerance, k.passed] for k in checks))
    width = max(len(k.name) for k in checks)
    for k in checks:
        print(f"{'PASS' if k.passed else 'FAIL'}  {k.name:<{width}}  {k.value:.10g}"
              f"  (reference {k.reference:.10g})")
    ok = all(k.passed for k in checks)
    print("all checks passed" if ok else "some checks FAILED")
    return {"passed": ok, "exit": 0 if ok else 1}


COMMANDS: dict[str, Callable[[Run], dict]] = {
    "simulate": cmd_simulate,
    "stopping": cmd_stopping,
    "cost": cmd_cost,
    "adjoint": cmd_adjoint,
    "check-smp": cmd_check_smp,
    "grad-check": cmd_grad_check,
    "rho-table": cmd_rho_table,
    "optimize": cmd_optimize,
    "example-verify": cmd_example_verify,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="varhor", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True, metavar="SUBCOMMAND")
    for name in SUBCOMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", help="JSON run configuration")
        p.add_argument("--set", action="append", metavar="KEY=VALUE",
                       help="override a config entry, e.g. control.init=2 (repeatable)")
        p.add_argument("--out", help="output directory (default: config 'output')")
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        run = make_run(args)
        info = COMMANDS[args.command](run)
        run.write_meta(args.command, info)
    except VarhorError as exc:
        print(json.dumps({"error": exc.code, "message": str(exc)}), file=sys.stderr)
        return exc.exit_status
    return int(info.get("exit", 0))


if __name__ == "__main__":
    sys.exit(main())
