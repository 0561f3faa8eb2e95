"""Command-line front end and the end-to-end pipeline.

``run`` chains the whole construction: build the domain, verify the slope
condition, minimize across the smoothing schedule, integrate the stream
function, and emit the critical/residual/coupling diagnostics as a
machine-readable report.  Every subcommand also works standalone on field
files written by earlier stages.

Exit status: 0 clean, 1 invalid configuration or input, 2 hard-invariant
failure (null mean / defect sign / gradient bound), 3 numerical
non-convergence.
"""
from __future__ import annotations

import argparse
import json
import sys
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import critical as crit
from . import pde
from .grid import (
    BoundaryData,
    Grid2D,
    ScalarField,
    active_cells,
    boundary_data_from_function,
    cell_gradients,
    gradient,
    load_field,
    sample_field,
    save_field,
    verify_bsc,
)
from .lagrangian import (
    ApproxFamily,
    Lagrangian,
    alpha_of,
    approx_lagrangian,
    beta_limit,
    conjugate,
    make_case_study,
)
from .minimize import EnergySpec, NonConvergenceError, energy, minimize_smooth, weak_el_residual
from .reference import remark_solution
from .stream import coupling_functional, integrate_stream, one_form, period

__all__ = ["RunConfig", "RunReport", "ConfigError", "load_config", "validate", "run", "main"]

_SCHEMA = 1
_ALLOWED_KEYS = {
    "schema",
    "domain",
    "h",
    "family",
    "s",
    "schedule",
    "Q",
    "psi",
    "tol",
    "max_iter",
    "seed",
    "outdir",
}


class ConfigError(ValueError):
    """Structurally invalid configuration (unknown keys, bad types)."""


@dataclass(frozen=True)
class RunConfig:
    domain: dict
    h: float
    family: str
    schedule: tuple
    Q: float
    psi: dict
    s: float = 1.0
    tol: float = 1e-8
    max_iter: int = 100000
    seed: int = 0
    outdir: str = "out"

    def to_dict(self) -> dict:
        return {
            "schema": _SCHEMA,
            "domain": dict(self.domain),
            "h": self.h,
            "family": self.family,
            "s": self.s,
            "schedule": list(self.schedule),
            "Q": self.Q,
            "psi": dict(self.psi),
            "tol": self.tol,
            "max_iter": self.max_iter,
            "seed": self.seed,
            "outdir": self.outdir,
        }


@dataclass
class RunReport:
    config: dict
    bsc_ok: bool
    per_n: list = field(default_factory=list)
    final: dict = field(default_factory=dict)
    invariants: dict = field(default_factory=dict)

    def to_json(self) -> str:
        payload = {
            "schema": _SCHEMA,
            "config": self.config,
            "bsc_ok": self.bsc_ok,
            "per_n": self.per_n,
            "final": self.final,
            "invariants": self.invariants,
        }
        return json.dumps(payload, sort_keys=True, indent=2) + "\n"


def load_config(path_or_dict) -> RunConfig:
    """Parse a config, failing closed on unknown keys and bad structure."""
    if isinstance(path_or_dict, (str, Path)):
        with open(path_or_dict) as fh:
            raw = json.load(fh)
    else:
        raw = dict(path_or_dict)
    problems = []
    unknown = set(raw) - _ALLOWED_KEYS
    if unknown:
        problems.append(f"unknown keys: {sorted(unknown)}")
    if raw.get("schema") != _SCHEMA:
        problems.append(f"schema must be {_SCHEMA}")
    for key in ("domain", "h", "family", "schedule", "Q", "psi"):
        if key not in raw:
            problems.append(f"missing key: {key}")
    if problems:
        raise ConfigError("; ".join(problems))
    try:
        return RunConfig(
            domain=dict(raw["domain"]),
            h=float(raw["h"]),
            family=str(raw["family"]),
            schedule=tuple(int(n) for n in raw["schedule"]),
            Q=float(raw["Q"]),
            psi=dict(raw["psi"]),
            s=float(raw.get("s", 1.0)),
            tol=float(raw.get("tol", 1e-8)),
            max_iter=int(raw.get("max_iter", 100000)),
            seed=int(raw.get("seed", 0)),
            outdir=str(raw.get("outdir", "out")),
        )
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"malformed config value: {exc}") from exc


def validate(config: RunConfig) -> list[str]:
    """All invariant violations of a parsed config (empty means valid)."""
    v = []
    kind = config.domain.get("kind")
    if kind == "disk":
        R = config.domain.get("R", 0.0)
        if not (isinstance(R, (int, float)) and R > 0):
            v.append("disk domain needs positive R")
        elif config.h > 0 and config.h >= R / 4:
            v.append("h must be below R/4")
    elif kind == "rect":
        if config.domain.get("a", 0) <= 0 or config.domain.get("b", 0) <= 0:
            v.append("rect domain needs positive sides a, b")
    else:
        v.append("domain kind must be 'disk' or 'rect'")
    if config.h <= 0:
        v.append("h must be positive")
    if config.family not in ("a", "b"):
        v.append("family must be 'a' or 'b'")
    if config.family == "b" and config.s <= 0:
        v.append("family 'b' needs positive s")
    if not config.schedule:
        v.append("schedule must be nonempty")
    elif any(n <= 0 for n in config.schedule) or any(
        a >= b for a, b in zip(config.schedule, config.schedule[1:])
    ):
        v.append("schedule must be strictly increasing positive integers")
    if config.Q < 0:
        v.append("Q must be nonnegative")
    if config.tol <= 0:
        v.append("tol must be positive")
    if config.max_iter < 1:
        v.append("max_iter must be at least 1")
    pk = config.psi.get("kind")
    if pk == "affine":
        if not all(isinstance(config.psi.get(k, 0), (int, float)) for k in ("a", "b", "c")):
            v.append("affine psi needs numeric a, b, c")
    elif pk == "reference":
        if kind != "disk" or not (0 < config.domain.get("R", 1) < 1):
            v.append("reference psi needs a disk domain with R in (0,1)")
    elif pk == "random":
        if config.psi.get("amplitude", 0.3) <= 0:
            v.append("random psi needs positive amplitude")
    elif pk == "file":
        if not config.psi.get("path"):
            v.append("file psi needs a path")
    else:
        v.append("psi kind must be one of affine/reference/random/file")
    return v


def _build_grid(config: RunConfig) -> Grid2D:
    from .grid import build_disk, build_rect

    if config.domain["kind"] == "disk":
        return build_disk(float(config.domain["R"]), config.h)
    return build_rect(float(config.domain["a"]), float(config.domain["b"]), config.h)


def random_trace(seed: int, amplitude: float = 0.3):
    """Smooth random boundary function: a short cosine series with bounded
    slope, so disk traces satisfy the slope condition at moderate Q."""
    rng = np.random.default_rng(seed)
    ks = rng.uniform(0.5, 2.0, size=3)
    th = rng.uniform(0.0, 2.0 * np.pi, size=3)
    ph = rng.uniform(0.0, 2.0 * np.pi, size=3)
    amps = amplitude * rng.uniform(0.5, 1.0, size=3)

    def fn(x, y):
        out = np.zeros_like(np.asarray(x, dtype=float))
        for k, t, p, a in zip(ks, th, ph, amps):
            out = out + a * np.cos(k * (np.cos(t) * x + np.sin(t) * y) + p)
        return out

    return fn


def _build_bdata(config: RunConfig, grid: Grid2D) -> BoundaryData:
    pk = config.psi["kind"]
    if pk == "affine":
        a, b, c = (float(config.psi.get(k, 0.0)) for k in ("a", "b", "c"))
        fn = lambda x, y: a * x + b * y + c
    elif pk == "reference":
        fn = remark_solution(float(config.domain["R"])).eval
    elif pk == "random":
        fn = random_trace(int(config.psi.get("seed", config.seed)), float(config.psi.get("amplitude", 0.3)))
    else:
        f = load_field(config.psi["path"])
        values = np.where(grid.boundary, f.values, np.nan)
        return BoundaryData(grid=grid, values=values, Q=config.Q)
    return boundary_data_from_function(grid, fn, Q=config.Q)


def _component_windings(u: ScalarField, report) -> dict:
    """Winding indices around candidate components where a clean interior
    loop with nonvanishing gradient exists."""
    g = u.grid
    out = {}
    for ci, comp in enumerate(report.components):
        xs = [n[0] for n in comp]
        ys = [n[1] for n in comp]
        margin = 3
        lo = (min(xs) - margin, min(ys) - margin)
        hi = (max(xs) + margin, max(ys) + margin)
        if lo[0] < 0 or lo[1] < 0 or hi[0] >= g.nx or hi[1] >= g.ny:
            continue
        nodes = (
            [(hi[0], j) for j in range(lo[1], hi[1])]
            + [(i, hi[1]) for i in range(hi[0], lo[0], -1)]
            + [(lo[0], j) for j in range(hi[1], lo[1], -1)]
            + [(i, lo[1]) for i in range(lo[0], hi[0])]
        )
        if not all(g.interior[iy, ix] for ix, iy in nodes):
            continue
        loop = crit.LoopSpec(center=g.node_xy(*comp[0]), radius=margin * g.h, nodes=nodes)
        try:
            idx, raw = crit.winding_index(u, loop)
        except (crit.ZeroGradientOnLoopError, crit.LoopAliasingError):
            continue
        out[ci] = {"index": idx, "raw": raw}
    return out


def _random_loops(grid: Grid2D, seed: int, count: int = 5):
    """Random contractible rectangle loops through interior nodes."""
    rng = np.random.default_rng(seed)
    ii = np.argwhere(grid.interior)
    loops = []
    attempts = 0
    while len(loops) < count and attempts < 500:
        attempts += 1
        j0, i0 = ii[rng.integers(len(ii))]
        w = int(rng.integers(3, max(4, grid.nx // 4)))
        ht = int(rng.integers(3, max(4, grid.ny // 4)))
        i1, j1 = i0 + w, j0 + ht
        if i1 >= grid.nx or j1 >= grid.ny:
            continue
        box = grid.interior[j0 : j1 + 1, i0 : i1 + 1]
        if not np.all(box):
            continue
        nodes = (
            [(i, j0) for i in range(i0, i1)]
            + [(i1, j) for j in range(j0, j1)]
            + [(i, j1) for i in range(i1, i0, -1)]
            + [(i0, j) for j in range(j1, j0, -1)]
        )
        loops.append(nodes + [nodes[0]])
    return loops


def run(config: RunConfig, outdir: str | None = None) -> tuple[RunReport, dict]:
    """Execute the full pipeline; returns the report plus the in-memory
    artifacts (fields, profiles) for further inspection."""
    problems = validate(config)
    if problems:
        raise ConfigError("; ".join(problems))
    grid = _build_grid(config)
    bdata = _build_bdata(config, grid)
    bsc = verify_bsc(grid, bdata)
    base = make_case_study()
    report = RunReport(config=config.to_dict(), bsc_ok=bool(bsc.ok))

    members = [
        approx_lagrangian(
            ApproxFamily(config.family, n, base, s=config.s if config.family == "b" else None)
        )
        for n in config.schedule
    ]
    base_spec = EnergySpec(L=base, grid=grid, bdata=bdata)
    warm = None
    u = v = None
    L_last = conj_last = None
    for Ln, n in zip(members, config.schedule):
        spec = EnergySpec(L=Ln, grid=grid, bdata=bdata)
        rep = minimize_smooth(spec, tol=config.tol, max_iter=config.max_iter, x0=warm)
        warm = rep.u
        u = rep.u
        conj_n = conjugate(Ln, max(4.0 * float(base.fp(config.Q)), 4.0))
        w = one_form(Ln, u)
        v, misfit = integrate_stream(w, grid)
        f_value, defect = coupling_functional(Ln, conj_n, u, v)
        vx, vy = cell_gradients(grid, v.values)
        act = active_cells(grid)
        sup_grad_v = float(np.max(np.where(act, np.hypot(vx, vy), 0.0)))
        report.per_n.append(
            {
                "n": int(n),
                "energy": rep.energy,
                "base_energy": energy(base_spec, rep.u),
                "iterations": rep.iterations,
                "el_residual": rep.grad_norm,
                "sup_grad": rep.sup_grad,
                "stream_misfit": misfit,
                "F_value": f_value,
                "max_defect": float(np.nanmax(defect)),
                "min_defect": float(np.nanmin(defect)),
                "mean_v": float(np.mean(v.values[grid.interior])),
                "sup_grad_v": sup_grad_v,
            }
        )
        L_last, conj_last = Ln, conj_n

    eps = crit.default_eps(u)
    creport = crit.detect(u, eps)
    windings = _component_windings(u, creport)
    slack = crit.bernstein_check(base, u, eps)
    forms = {
        "NONDIV_U": pde.nondiv_u(base),
        "CASE_STUDY_U": pde.case_study_u(),
        "APPROX_U": pde.approx_u(L_last),
        "V_APPROX": pde.v_approx(L_last, conj_last),
    }
    residual_norms = {}
    vf = gradient(u)
    rho = np.hypot(vf.vx, vf.vy)
    for name, spec_eq in forms.items():
        fld = u if name in ("NONDIV_U", "CASE_STUDY_U", "APPROX_U") else v
        res = pde.residual(spec_eq, fld)
        m = np.isfinite(res) & grid.interior
        if name in ("NONDIV_U", "CASE_STUDY_U"):
            m &= rho > eps
        vals = np.abs(res[m])
        residual_norms[name] = {
            "max": float(np.max(vals)) if vals.size else 0.0,
            "median": float(np.median(vals)) if vals.size else 0.0,
        }
    rng_periods = [
        period(one_form(L_last, u), loop) for loop in _random_loops(grid, config.seed)
    ]
    gap = abs(
        float(beta_limit(base, config.s, base.fp0 * (1 - 1e-9)))
        - float(alpha_of(base, float(conjugate(base, 4.0).gp(base.fp0 * (1 + 1e-9)))))
    )
    per = report.per_n[-1]
    invariants = {
        "null_mean": bool(abs(per["mean_v"]) <= 1e-12),
        "defect_nonneg": bool(per["min_defect"] >= -1e-10),
        "gradient_bound": bool(per["sup_grad"] <= config.Q + 10.0 * config.h),
    }
    report.invariants = invariants
    report.final = {
        "eps": eps,
        "critical": {
            "n_candidates": len(creport.candidates),
            "components": [sorted(c) for c in creport.components],
            "isolated": creport.isolated,
            "component_windings": windings,
        },
        "residual_norms": residual_norms,
        "bernstein_min_slack": float(np.nanmin(slack)) if np.any(np.isfinite(slack)) else None,
        "beta_branch_gap": gap,
        "random_loop_periods": rng_periods,
    }
    artifacts = {"grid": grid, "bdata": bdata, "u": u, "v": v, "L_last": L_last,
                 "conj_last": conj_last, "base": base, "critical": creport}
    if outdir is not None:
        out = Path(outdir)
        out.mkdir(parents=True, exist_ok=True)
        save_field(out / "u.csv", u)
        save_field(out / "v.csv", v)
        (out / "report.json").write_text(report.to_json())
    return report, artifacts


def _family_member(args, base: Lagrangian) -> Lagrangian:
    if args.family == "base":
        return base
    s = args.s if args.family == "b" else None
    return approx_lagrangian(ApproxFamily(args.family, args.n, base, s=s))


def _cmd_lagrangian(args) -> int:
    base = make_case_study()
    L = _family_member(args, base)
    conj = conjugate(L, max(2.0 * args.rho_max, float(base.fp(args.rho_max)) * 2.0, 4.0))
    rows = np.arange(0.0, args.rho_max + 0.5 * args.step, args.step)
    print("rho,f,fp,fpp,alpha,g,gp,beta")
    for rho in rows:
        fpp = float(L.fpp(rho)) if rho > 0 else float("nan")
        vals = (
            rho,
            float(L.f(rho)),
            float(L.fp(rho)),
            fpp,
            float(alpha_of(L, rho)),
            float(conj.g(rho)),
            float(conj.gp(rho)),
            float(beta_limit(base, args.s, rho)),
        )
        print(",".join(f"{v:.17g}" for v in vals))
    return 0


def _cmd_solve(args) -> int:
    config = load_config(args.config)
    problems = validate(config)
    if problems:
        for p in problems:
            print(f"invalid config: {p}", file=sys.stderr)
        return 1
    outdir = args.out or config.outdir
    try:
        report, _ = run(config, outdir=outdir)
    except NonConvergenceError as exc:
        print(f"non-convergence: {exc}", file=sys.stderr)
        return 3
    print(report.to_json(), end="")
    return 0


def _cmd_run(args) -> int:
    config = load_config(args.config)
    problems = validate(config)
    if problems:
        for p in problems:
            print(f"invalid config: {p}", file=sys.stderr)
        return 1
    outdir = args.out or config.outdir
    try:
        report, _ = run(config, outdir=outdir)
    except NonConvergenceError as exc:
        print(f"non-convergence: {exc}", file=sys.stderr)
        return 3
    print(report.to_json(), end="")
    if not all(report.invariants.values()):
        return 2
    return 0


def _cmd_validate(args) -> int:
    try:
        config = load_config(args.config)
    except ConfigError as exc:
        print(f"invalid config: {exc}")
        return 1
    problems = validate(config)
    for p in problems:
        print(p)
    return 0 if not problems else 1


def _cmd_stream(args) -> int:
    u = load_field(args.u)
    base = make_case_study()
    L = _family_member(args, base)
    conj = conjugate(L, 4.0 + 4.0 * float(base.fp(10.0)))
    w = one_form(L, u)
    v, misfit = integrate_stream(w, u.grid)
    f_value, defect = coupling_functional(L, conj, u, v)
    vx, vy = cell_gradients(u.grid, v.values)
    act = active_cells(u.grid)
    save_field(args.out, v)
    payload = {
        "misfit": misfit,
        "F_value": f_value,
        "max_defect": float(np.nanmax(defect)),
        "min_defect": float(np.nanmin(defect)),
        "sup_grad_v": float(np.max(np.where(act, np.hypot(vx, vy), 0.0))),
        "mean_v": float(np.mean(v.values[u.grid.interior])),
    }
    Path(args.report).write_text(json.dumps(payload, sort_keys=True, indent=2) + "\n")
    return 0


def _cmd_critical(args) -> int:
    u = load_field(args.u)
    eps = args.eps if args.eps is not None else crit.default_eps(u)
    report = crit.detect(u, eps)
    base = make_case_study()
    slack = crit.bernstein_check(base, u, eps)
    windings = _component_windings(u, report)
    payload = {
        "eps": eps,
        "candidates": [[list(n), v] for n, v in report.candidates],
        "components": [[list(n) for n in comp] for comp in report.components],
        "isolated": [list(n) for n in report.isolated],
        "component_windings": windings,
        "bernstein_min_slack": float(np.nanmin(slack)) if np.any(np.isfinite(slack)) else None,
    }
    Path(args.report).write_text(json.dumps(payload, sort_keys=True, indent=2) + "\n")
    return 0


def _form_spec(args, base: Lagrangian):
    name = args.form.upper()
    if name == "NONDIV_U":
        return pde.nondiv_u(base)
    if name == "CASE_STUDY_U":
        return pde.case_study_u()
    if name == "APPROX_U":
        return pde.approx_u(_family_member(args, base))
    if name == "V_APPROX":
        Ln = _family_member(args, base)
        return pde.v_approx(Ln, conjugate(Ln, 4.0 + 4.0 * float(base.fp(10.0))))
    if name == "V_LIMIT_BETA":
        return pde.v_limit_beta(base, args.s)
    if name == "V_LIMIT_ALPHA":
        return pde.v_limit_alpha(base, conjugate(base, 4.0 + 4.0 * float(base.fp(10.0))))
    raise SystemExit(f"unknown form {args.form}")


def _cmd_residual(args) -> int:
    u = load_field(args.u)
    base = make_case_study()
    spec = _form_spec(args, base)
    res = pde.residual(spec, u)
    save_field(args.out, ScalarField(grid=u.grid, values=res))
    return 0


def _cmd_probe(args) -> int:
    u = load_field(args.u)
    base = make_case_study()
    spec = _form_spec(args, base)
    results = pde.probe_battery(
        u, spec, n_nodes=args.nodes, trials_per_side=args.trials,
        seed=args.seed, slack=10.0 * u.grid.h,
    )
    Path(args.report).write_text(json.dumps(results, sort_keys=True, indent=2) + "\n")
    return 0 if results["passed"] == results["trials"] else 2


def _cmd_reference(args) -> int:
    from .grid import build_disk

    ref = remark_solution(args.R)
    grid = build_disk(args.R, args.h)
    save_field(args.out, sample_field(grid, ref.eval))
    return 0


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(prog="varstream", description=__doc__)
    parser.add_argument("--threads", type=int, default=None, help="cap worker threads")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("lagrangian", help="tabulate profile quantities")
    psub = p.add_subparsers(dest="sub", required=True)
    pt = psub.add_parser("table")
    pt.add_argument("--family", choices=["base", "a", "b"], default="base")
    pt.add_argument("--n", type=int, default=4)
    pt.add_argument("--s", type=float, default=1.0)
    pt.add_argument("--rho-max", dest="rho_max", type=float, default=2.0)
    pt.add_argument("--step", type=float, default=0.1)
    pt.set_defaults(fn=_cmd_lagrangian)

    for name, fn in (("solve", _cmd_solve), ("run", _cmd_run)):
        p = sub.add_parser(name)
        p.add_argument("--config", required=True)
        p.add_argument("--out", default=None)
        p.set_defaults(fn=fn)

    p = sub.add_parser("validate")
    p.add_argument("--config", required=True)
    p.set_defaults(fn=_cmd_validate)

    p = sub.add_parser("stream")
    p.add_argument("--u", required=True)
    p.add_argument("--family", choices=["base", "a", "b"], default="a")
    p.add_argument("--n", type=int, default=32)
    p.add_argument("--s", type=float, default=1.0)
    p.add_argument("--out", required=True)
    p.add_argument("--report", required=True)
    p.set_defaults(fn=_cmd_stream)

    p = sub.add_parser("critical")
    p.add_argument("--u", required=True)
    p.add_argument("--eps", type=float, default=None)
    p.add_argument("--report", required=True)
    p.set_defaults(fn=_cmd_critical)

    p = sub.add_parser("residual")
    p.add_argument("--u", required=True)
    p.add_argument("--form", required=True)
    p.add_argument("--n", type=int, default=32)
    p.add_argument("--s", type=float, default=1.0)
    p.add_argument("--family", choices=["a", "b"], default="a")
    p.add_argument("--out", required=True)
    p.set_defaults(fn=_cmd_residual)

    p = sub.add_parser("probe")
    p.add_argument("--u", required=True)
    p.add_argument("--form", default="APPROX_U")
    p.add_argument("--n", type=int, default=32)
    p.add_argument("--s", type=float, default=1.0)
    p.add_argument("--family", choices=["a", "b"], default="a")
    p.add_argument("--trials", type=int, default=50)
    p.add_argument("--nodes", type=int, default=5)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--report", required=True)
    p.set_defaults(fn=_cmd_probe)

    p = sub.add_parser("reference")
    rsub = p.add_subparsers(dest="sub", required=True)
    rs = rsub.add_parser("sample")
    rs.add_argument("--R", type=float, default=0.9)
    rs.add_argument("--h", type=float, required=True)
    rs.add_argument("--out", required=True)
    rs.set_defaults(fn=_cmd_reference)

    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except ConfigError as exc:
        print(f"invalid config: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
