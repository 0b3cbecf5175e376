"""Command-line drivers.

Subcommands: ``solve``, ``homotopy``, ``needle-check``, ``cone-check`` and
``weak-strong``.  Settings come from built-in defaults, then an optional INI
file (``--config``), then command-line flags.

Exit codes::

    0  success
    1  configuration or input error
    2  the solver failed (NewtonStalled / SweepDiverged)
    3  the homotopy got stuck (partial path still written)
    4  a numerical check failed
"""

from __future__ import annotations

import argparse
import configparser
import json
import sys
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Optional

import numpy as np

from .homotopy import HomotopyPath, HomotopyPolicy, HomotopyStep, HomotopyStuck, continue_to, continuity_metrics
from .ocp_model import OcpProblem, build_counterexample, build_delayed_lq, regularized
from .pmp_core import Extremal
from .solver import (NewtonStalled, ShootingUnknowns, SolveConfig, SweepConfig, SweepDiverged,
                     check_configuration, solve)
from .time_mesh import DelayVector
from .variations import (NeedleSpec, cone_sample, lebesgue_times, multiplier_check, needle_endpoint_check,
                         omega_vectors)

__all__ = ["RunConfig", "ConfigError", "build_parser", "main"]

PROBLEMS = ("counterexample", "lq")
PATH_MODES = ("joint", "pure-state", "control-only")
DEFAULT_MESH = {"counterexample": 5e-3, "lq": 2e-3}


class ConfigError(ValueError):
    """Invalid or incomplete run configuration."""


@dataclass
class RunConfig:
    """Everything a subcommand needs; built by :meth:`from_sources`."""

    problem: str
    oscillation_K: float = 10.0
    free_time: bool = False
    delta: float = 1.0
    tau: tuple = (0.0, 0.0, 0.0)
    path_mode: str = "joint"
    mesh_h: Optional[float] = None
    tol: float = 1e-8
    max_iter: int = 30
    max_sweeps: int = 300
    damping: float = 0.5
    lattice_size: int = 21
    regularization: float = 0.0
    initial_step: float = 0.25
    min_step: float = 1.0 / 1024.0
    test_set_size: int = 8
    seed_guess: object = "builtin"
    out: Path = Path("out")
    extremal: Optional[Path] = None
    needle_times: tuple = ()
    eta_ladder: tuple = (1e-2, 3e-3, 1e-3, 3e-4, 1e-4)
    min_slope: float = 1.5
    cone_samples: int = 100
    cone_tol: float = 1e-6
    rng_seed: int = 0
    ladder: tuple = (0.1, 0.05, 0.025)

    def __post_init__(self) -> None:
        if self.problem not in PROBLEMS:
            raise ConfigError(f"unknown problem {self.problem!r}; choose from {', '.join(PROBLEMS)}")
        if self.path_mode not in PATH_MODES:
            raise ConfigError(f"unknown path mode {self.path_mode!r}")
        if len(self.tau) != 3:
            raise ConfigError("tau needs three values")
        positive = {"tol": self.tol, "damping": self.damping, "initial_step": self.initial_step,
                    "min_step": self.min_step, "cone_tol": self.cone_tol, "delta": self.delta}
        if self.mesh_h is not None:
            positive["mesh_h"] = self.mesh_h
        for k, v in positive.items():
            if not v > 0:
                raise ConfigError(f"{k} must be positive, got {v}")
        if self.regularization < 0:
            raise ConfigError("regularization must be nonnegative")
        if self.max_iter < 1 or self.max_sweeps < 1 or self.cone_samples < 1 or self.test_set_size < 1:
            raise ConfigError("iteration counts and sample sizes must be positive")
        if self.problem == "counterexample" and self.free_time is False:
            self.free_time = True   # minimum-time problem

    # ------------------------------------------------------------------
    @classmethod
    def from_sources(cls, args: argparse.Namespace) -> "RunConfig":
        """Defaults, then the INI file, then explicit flags."""
        values: dict = {}
        if getattr(args, "config", None):
            values.update(_read_ini(args.config))
        flags = {
            "problem": args.problem, "tau": args.tau, "free_time": True if args.free_time else None,
            "out": args.out, "mesh_h": args.mesh_h, "oscillation_K": args.oscillation_K,
            "path_mode": getattr(args, "path_mode", None), "regularization": args.regularization,
            "extremal": getattr(args, "extremal", None), "ladder": getattr(args, "ladder", None),
            "seed_guess": args.seed_guess, "initial_step": getattr(args, "initial_step", None),
        }
        values.update({k: v for k, v in flags.items() if v is not None})
        if "problem" not in values:
            raise ConfigError("missing key: problem.name (use --problem or a [problem] section)")
        for k in ("tau", "ladder", "needle_times", "eta_ladder"):
            if k in values:
                values[k] = tuple(float(v) for v in values[k])
        if isinstance(values.get("seed_guess"), (list, tuple)):
            values["seed_guess"] = tuple(float(v) for v in values["seed_guess"])
        for k in ("out", "extremal"):
            if values.get(k) is not None:
                values[k] = Path(values[k])
        return cls(**values)

    # ------------------------------------------------------------------
    @property
    def delays(self) -> DelayVector:
        try:
            return DelayVector(*self.tau, delta=self.delta)
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc

    @property
    def h(self) -> float:
        return self.mesh_h if self.mesh_h is not None else DEFAULT_MESH[self.problem]

    def build_problem(self) -> OcpProblem:
        if self.problem == "counterexample":
            return build_counterexample(self.tau[0], K=self.oscillation_K, delta=self.delta)
        prob = build_delayed_lq(delta=self.delta)
        if self.free_time:
            prob = prob.with_(final_time=None)
        return prob

    def solve_config(self) -> SolveConfig:
        sweep = SweepConfig(max_sweeps=self.max_sweeps, damping=self.damping, lattice_size=self.lattice_size)
        return SolveConfig(sweep=sweep, tol=self.tol, max_iter=self.max_iter).with_step(self.h)

    def initial_guess(self, prob: OcpProblem) -> ShootingUnknowns:
        n = prob.state_dim
        if self.seed_guess == "builtin":
            if self.problem == "counterexample":
                return ShootingUnknowns([0.8, 0.1], 0.9)
            return ShootingUnknowns(np.zeros(n), 1.0 if prob.free_time else None)
        z = np.asarray(self.seed_guess, dtype=float)
        want = n + (1 if prob.free_time else 0)
        if z.size != want:
            raise ConfigError(f"seed guess needs {want} values, got {z.size}")
        return ShootingUnknowns.from_vector(z, n, prob.free_time)

    def target(self) -> DelayVector:
        t0, t1, t2 = self.tau
        if self.path_mode == "pure-state":
            t0, t2 = 0.0, 0.0
        elif self.path_mode == "control-only":
            t0, t1 = 0.0, 0.0
        try:
            return DelayVector(t0, t1, t2, self.delta)
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc


_INI_KEYS = {
    ("problem", "name"): ("problem", str),
    ("problem", "oscillation_k"): ("oscillation_K", float),
    ("problem", "free_time"): ("free_time", "bool"),
    ("problem", "delta"): ("delta", float),
    ("delays", "tau"): ("tau", "floats"),
    ("delays", "path_mode"): ("path_mode", str),
    ("solver", "mesh_h"): ("mesh_h", float),
    ("solver", "tol"): ("tol", float),
    ("solver", "max_iter"): ("max_iter", int),
    ("solver", "max_sweeps"): ("max_sweeps", int),
    ("solver", "damping"): ("damping", float),
    ("solver", "lattice_size"): ("lattice_size", int),
    ("solver", "regularization"): ("regularization", float),
    ("homotopy", "initial_step"): ("initial_step", float),
    ("homotopy", "min_step"): ("min_step", float),
    ("homotopy", "test_set_size"): ("test_set_size", int),
    ("seed", "guess"): ("seed_guess", "guess"),
    ("output", "dir"): ("out", str),
    ("checks", "extremal"): ("extremal", str),
    ("checks", "needle_times"): ("needle_times", "floats"),
    ("checks", "eta_ladder"): ("eta_ladder", "floats"),
    ("checks", "min_slope"): ("min_slope", float),
    ("checks", "cone_samples"): ("cone_samples", int),
    ("checks", "cone_tol"): ("cone_tol", float),
    ("checks", "rng_seed"): ("rng_seed", int),
    ("weak_strong", "ladder"): ("ladder", "floats"),
}


def _read_ini(path) -> dict:
    parser = configparser.ConfigParser()
    try:
        with open(path) as fh:
            parser.read_file(fh)
    except (OSError, configparser.Error) as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    out = {}
    for section in parser.sections():
        for key, raw in parser.items(section):
            spec = _INI_KEYS.get((section, key))
            if spec is None:
                raise ConfigError(f"unknown config key {section}.{key}")
            name, kind = spec
            try:
                if kind == "bool":
                    val = parser.getboolean(section, key)
                elif kind == "floats":
                    val = tuple(float(v) for v in raw.replace(",", " ").split())
                elif kind == "guess":
                    val = raw.strip() if raw.strip() == "builtin" else \
                        tuple(float(v) for v in raw.replace(",", " ").split())
                else:
                    val = kind(raw)
            except ValueError as exc:
                raise ConfigError(f"bad value for {section}.{key}: {raw!r}") from exc
            out[name] = val
    return out


# ----------------------------------------------------------------------
# Helpers shared by the subcommands
# ----------------------------------------------------------------------
def _solve(cfg: RunConfig, prob: OcpProblem, tau: DelayVector,
           guess: ShootingUnknowns | None = None) -> tuple[OcpProblem, Extremal, object]:
    """Solve, through a short ladder when a regularization weight is set.

    Returns the problem actually solved together with the extremal and report.
    """
    scfg = cfg.solve_config()
    guess = guess or cfg.initial_guess(prob)
    eps = cfg.regularization
    if eps == 0:
        ext, rep = solve(prob, tau, guess, cfg=scfg)
        return prob, ext, rep
    scfg = replace(scfg, smoothing_mode="never")
    for e in [w for w in (0.5, 0.1) if w > eps] + [eps]:
        sub = regularized(prob, e)
        ext, rep = solve(sub, tau, guess, cfg=scfg)
        guess = ShootingUnknowns.from_vector(ext.info["unknowns"], prob.state_dim, prob.free_time)
    return sub, ext, rep


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def _load_or_solve(cfg: RunConfig) -> tuple[OcpProblem, DelayVector, Extremal]:
    prob = cfg.build_problem()
    tau = cfg.delays
    try:
        check_configuration(prob, tau)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    if cfg.extremal is not None:
        if cfg.regularization > 0:
            prob = regularized(prob, cfg.regularization)
        try:
            ext = Extremal.from_csv(cfg.extremal, prob, tau)
        except (OSError, ValueError, IndexError) as exc:
            raise ConfigError(f"cannot read extremal {cfg.extremal}: {exc}") from exc
        return prob, tau, ext
    prob, ext, _ = _solve(cfg, prob, tau)
    return prob, tau, ext


def _needle_values(prob: OcpProblem, tau: DelayVector, ext: Extremal, times, lattice_size: int) -> list:
    """Per time, the lattice point of U that moves ``f~`` the most."""
    lattice = prob.control_set.lattice(min(lattice_size, 9))
    out = []
    for t in times:
        size = [np.linalg.norm(np.concatenate(omega_vectors(prob, tau, ext, t, z))) for z in lattice]
        out.append(lattice[int(np.argmax(size))])
    return out


# ----------------------------------------------------------------------
# Subcommands
# ----------------------------------------------------------------------
def cmd_solve(cfg: RunConfig) -> int:
    prob = cfg.build_problem()
    tau = cfg.delays
    try:
        check_configuration(prob, tau)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    _, ext, rep = _solve(cfg, prob, tau)
    cfg.out.mkdir(parents=True, exist_ok=True)
    ext.to_csv(cfg.out / "extremal.csv")
    (cfg.out / "report.json").write_text(rep.to_json() + "\n")
    trace = [{"smoothing": tr["smoothing"], "residuals": [float(r) for r in tr["residuals"]]}
             for tr in ext.info["trace"]]
    _write_json(cfg.out / "trace.json", {"t_f": ext.t_f, "p0": ext.p0,
                                         "newton_iterations": ext.info["newton_iterations"],
                                         "unknowns": ext.info["unknowns"], "trace": trace})
    print(f"solved: t_f = {ext.t_f:.12g}, {rep}")
    return 0


def cmd_homotopy(cfg: RunConfig) -> int:
    prob = cfg.build_problem()
    target = cfg.target()
    try:
        check_configuration(prob, target)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    if cfg.initial_step > 1 or cfg.min_step > cfg.initial_step:
        raise ConfigError("need min_step <= initial_step <= 1")
    zero = target.scaled(0.0)
    sub, seed, _ = _solve(cfg, prob, zero)
    policy = HomotopyPolicy(initial_step=cfg.initial_step, min_step=cfg.min_step,
                            solve=cfg.solve_config())
    cfg.out.mkdir(parents=True, exist_ok=True)
    try:
        path = continue_to(lambda tau: sub, target, seed, policy)
    except HomotopyStuck as exc:
        exc.path.to_directory(cfg.out, cfg.test_set_size)
        print(f"homotopy stuck: {exc}", file=sys.stderr)
        return 3
    path.to_directory(cfg.out, cfg.test_set_size)
    print(f"homotopy reached {target.as_tuple()} in {len(path.accepted)} accepted steps")
    return 0


def cmd_needle_check(cfg: RunConfig) -> int:
    prob, tau, ext = _load_or_solve(cfg)
    times = cfg.needle_times or tuple(lebesgue_times(ext, tau, 3)[1:2])
    try:
        values = _needle_values(prob, tau, ext, times, cfg.lattice_size)
        spec = NeedleSpec(times, [1.0] * len(times), values)
        res = needle_endpoint_check(prob, tau, ext, spec, cfg.eta_ladder)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    cfg.out.mkdir(parents=True, exist_ok=True)
    summary = json.loads(res.to_json())
    summary.update({"times": list(spec.times), "values": [list(v) for v in spec.values],
                    "min_slope": cfg.min_slope, "passed": res.passed(cfg.min_slope)})
    _write_json(cfg.out / "needle.json", summary)
    res.to_csv(cfg.out / "needle.csv")
    print(f"needle remainder slope {res.slope:.4g}")
    return 0 if res.passed(cfg.min_slope) else 4


def cmd_cone_check(cfg: RunConfig) -> int:
    prob, tau, ext = _load_or_solve(cfg)
    rng = np.random.default_rng(cfg.rng_seed)
    try:
        times = lebesgue_times(ext, tau, cfg.cone_samples)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    Z = prob.control_set.sample(rng, times.size)
    cone = cone_sample(prob, tau, ext, list(zip(times, Z)), augmented=prob.free_time)
    pairing = multiplier_check(ext, cone)
    psi = np.append(ext.p.eval(ext.t_f, "left"), ext.p0)
    endpoint = None
    ok = pairing <= cfg.cone_tol
    if prob.free_time:
        endpoint = float(abs(cone.vectors[-2] @ psi))
        ok = ok and endpoint <= cfg.cone_tol
    cfg.out.mkdir(parents=True, exist_ok=True)
    (cfg.out / "cone.json").write_text(cone.to_json() + "\n")
    _write_json(cfg.out / "multiplier.json", {"max_pairing": pairing, "endpoint_pairing": endpoint,
                                              "samples": len(cone), "tol": cfg.cone_tol, "passed": ok})
    print(f"max cone pairing {pairing:.3e}")
    return 0 if ok else 4


def cmd_weak_strong(cfg: RunConfig) -> int:
    if cfg.problem != "counterexample":
        raise ConfigError("weak-strong runs on the counterexample only")
    if len(cfg.ladder) < 2:
        raise ConfigError("the tau ladder needs at least two values")
    base = cfg.build_problem()
    zero = DelayVector(0.0, 0.0, 0.0, cfg.delta)
    steps = []
    _, ext0, rep0 = _solve(cfg, base, zero)
    steps.append(HomotopyStep(0.0, zero, ext0, rep0, True))
    for t0 in cfg.ladder:
        try:
            tau = DelayVector(t0, 0.0, 0.0, cfg.delta)
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc
        _, ext, rep = _solve(cfg, base, tau)
        steps.append(HomotopyStep(t0, tau, ext, rep, True))
    rows = continuity_metrics(HomotopyPath(steps, steps[-1].tau), cfg.test_set_size).rows[1:]
    weak = [r["weak_u"] for r in rows]
    strong = [r["strong_u"] for r in rows]
    ok = all(b < a for a, b in zip(weak, weak[1:])) and all(s >= 0.5 * strong[0] for s in strong)
    cfg.out.mkdir(parents=True, exist_ok=True)
    with open(cfg.out / "weak_strong.csv", "w") as fh:
        fh.write("tau0,weak_u,strong_u,t_f\n")
        for st, r in zip(steps[1:], rows):
            fh.write(f"{st.tau.tau0!r},{r['weak_u']!r},{r['strong_u']!r},{st.extremal.t_f!r}\n")
    _write_json(cfg.out / "weak_strong.json", {"ladder": list(cfg.ladder), "weak_u": weak,
                                               "strong_u": strong, "K": cfg.oscillation_K, "passed": ok})
    print("weak/strong separation " + ("reproduced" if ok else "not reproduced"))
    return 0 if ok else 4


COMMANDS = {
    "solve": cmd_solve,
    "homotopy": cmd_homotopy,
    "needle-check": cmd_needle_check,
    "cone-check": cmd_cone_check,
    "weak-strong": cmd_weak_strong,
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--problem", help="counterexample or lq")
    common.add_argument("--tau", nargs=3, type=float, metavar=("TAU0", "TAU1", "TAU2"),
                        help="delays of the explicit time, the state and the control")
    common.add_argument("--free-time", action="store_true", help="free final time")
    common.add_argument("--config", help="INI file; flags override its keys")
    common.add_argument("--out", help="output directory")
    common.add_argument("--mesh-h", type=float, help="integration step")
    common.add_argument("--oscillation-K", type=float, dest="oscillation_K",
                        help="frequency of the counterexample oscillators")
    common.add_argument("--regularization", type=float, help="weight of an added eps|u|^2 cost")
    common.add_argument("--seed-guess", nargs="+", type=float,
                        help="initial adjoint p(0), then t_f for free final time")

    p = argparse.ArgumentParser(prog="delaypmp", description="Pontryagin extremals with delays.")
    sub = p.add_subparsers(dest="command", required=True)
    sub.add_parser("solve", parents=[common], help="solve at fixed delays")
    hp = sub.add_parser("homotopy", parents=[common], help="continue from tau = 0 to --tau")
    hp.add_argument("--path-mode", choices=PATH_MODES)
    hp.add_argument("--initial-step", type=float)
    for name in ("needle-check", "cone-check"):
        cp = sub.add_parser(name, parents=[common])
        cp.add_argument("--extremal", help="extremal CSV to check instead of solving")
    ws = sub.add_parser("weak-strong", parents=[common], help="weak and strong control distances")
    ws.add_argument("--ladder", nargs="+", type=float, help="tau0 values, in the order to compare")
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        cfg = RunConfig.from_sources(args)
        return COMMANDS[args.command](cfg)
    except ValueError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return 1
    except (NewtonStalled, SweepDiverged) as exc:
        print(f"solver failed: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
