"""Batch runner: read a config, build the cocycle, reduce it, write logs and reports.

Exit status is 0 when the target is reached, 1 for configuration or admissibility
errors and 2 when the run fails (rejected step, small divisor, budget exhausted).
"""

from __future__ import annotations

import argparse
import configparser
import itertools
import json
import math
import sys
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

import numpy as np

from . import __version__
from .diophantine import NAMED_FREQUENCIES, Frequency
from .fourier import SeriesDivergenceError, TorusSeries
from .homology import SmallDivisorError
from .kam import (MODES, ContractionError, PreconditionError, ScheduleParams, almost_reduce,
                  nearby_reducible, series_norm)
from .resonance import ResonanceRemovalError
from .spectral import LieGroupTag

FIXTURES = ("scalar_d1", "sl2_resonant", "u2_compact", "gl2C_generic", "gevrey_beta2")
NAMED_MATRICES = {
    "rotation_pi": np.array([[0.0, -math.pi], [math.pi, 0.0]]),
}
TASKS = ("almost_reduce", "nearby_reducible")
# schedule knobs a config may override in an optional [params] section
PARAM_KNOBS = {"N_max": float, "R_max": float, "modes_max": int, "inner_max": int,
               "search_cap": float, "prune_rel": float, "prune_out": float, "safety": float,
               "practical_eps0": float, "contraction_exponent": float, "check_grid": int}


class ConfigError(ValueError):
    """The configuration cannot be parsed or is inconsistent."""


@dataclass(frozen=True)
class ExperimentConfig:
    group: LieGroupTag
    d: int
    n: int
    freq: Frequency
    omega_spec: str
    A: np.ndarray
    A_spec: str
    perturbation: dict
    r: float
    r_prime: float
    beta: float | None
    mode: str
    target_eps: float
    step_budget: int
    task: str
    grid: int
    params: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "group": self.group.kind, "n": self.n, "d": self.d, "omega": self.omega_spec,
            "kappa": self.freq.kappa, "tau": self.freq.tau, "A": self.A_spec,
            "perturbation": dict(self.perturbation), "r": self.r, "r_prime": self.r_prime,
            "regularity": "analytic" if self.beta is None else f"gevrey:{self.beta:g}",
            "mode": self.mode, "target_eps": self.target_eps, "step_budget": self.step_budget,
            "task": self.task, "grid": self.grid, "params": dict(self.params),
        }


def fixture_path(name: str) -> Path:
    return Path(str(resources.files("kamcocycle") / "fixtures" / f"{name}.cfg"))


def _parse_matrix(text: str, n: int) -> np.ndarray:
    text = text.strip()
    if text in NAMED_MATRICES:
        M = NAMED_MATRICES[text].astype(complex)
    else:
        try:
            rows = [[complex(tok) for tok in row.split()] for row in text.split(";")]
            M = np.array(rows, dtype=complex)
        except ValueError as exc:
            raise ConfigError(f"cannot parse matrix {text!r}: {exc}") from None
    if M.shape != (n, n):
        raise ConfigError(f"matrix has shape {M.shape}, expected ({n}, {n})")
    return M


def _parse_omega(text: str, kappa: float, tau: float, d: int) -> Frequency:
    text = text.strip()
    try:
        if text in NAMED_FREQUENCIES:
            freq = Frequency.named(text, kappa, tau)
        else:
            freq = Frequency(tuple(float(x) for x in text.replace(",", " ").split()), kappa, tau)
    except ValueError as exc:
        raise ConfigError(f"bad frequency {text!r}: {exc}") from None
    if freq.d != d:
        raise ConfigError(f"frequency has {freq.d} components, expected d = {d}")
    return freq


def load_config(path, overrides: dict | None = None) -> ExperimentConfig:
    """Parse a ``key = value`` file with ``[cocycle]``, ``[perturbation]`` and ``[run]`` sections.

    An optional ``[params]`` section overrides schedule knobs such as ``N_max``.
    """
    path = Path(path)
    if not path.exists() and str(path) in FIXTURES:
        path = fixture_path(str(path))
    parser = configparser.ConfigParser(inline_comment_prefixes=("#",))
    try:
        with open(path) as fh:
            parser.read_file(fh)
    except (OSError, configparser.Error) as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    overrides = overrides or {}
    try:
        coc, pert, run = parser["cocycle"], parser["perturbation"], parser["run"]
        n, d = coc.getint("n"), coc.getint("d")
        group = LieGroupTag(coc.get("group"), n)
        kappa, tau = coc.getfloat("kappa"), coc.getfloat("tau")
        freq = _parse_omega(coc.get("omega"), kappa, tau, d)
        A_spec = coc.get("A")
        A = _parse_matrix(A_spec, n)
        kind = pert.get("kind", "random")
        perturbation = {"kind": kind}
        if kind == "random":
            perturbation.update(seed=int(overrides.get("seed", pert.getint("seed", 0))),
                                degree=pert.getint("degree", 2),
                                amplitude=pert.getfloat("amplitude"))
            if perturbation["amplitude"] < 0 or perturbation["degree"] < 1:
                raise ConfigError("amplitude must be nonnegative and degree positive")
        elif kind == "file":
            perturbation["file"] = str((path.parent / pert.get("file")).resolve())
        elif kind != "zero":
            raise ConfigError(f"unknown perturbation kind {kind!r}")
        regularity = run.get("regularity", "analytic").strip()
        if regularity == "analytic":
            beta = None
        elif regularity.startswith("gevrey:"):
            beta = float(regularity.split(":", 1)[1])
        else:
            raise ConfigError(f"unknown regularity {regularity!r}")
        mode = overrides.get("mode") or run.get("mode", "practical")
        task = run.get("task", "almost_reduce")
        step_budget = int(overrides.get("steps") or run.getint("step_budget", 6))
        grid = int(overrides.get("grid") or run.getint("grid", 64))
        knobs = {}
        if parser.has_section("params"):
            for key, value in parser["params"].items():
                # configparser lower-cases keys; match them case-insensitively
                name = next((k for k in PARAM_KNOBS if k.lower() == key), None)
                if name is None:
                    raise ConfigError(f"unknown parameter {key!r} in [params]")
                knobs[name] = PARAM_KNOBS[name](value)
        cfg = ExperimentConfig(group, d, n, freq, coc.get("omega").strip(), A, A_spec.strip(),
                               perturbation, run.getfloat("r"), run.getfloat("r_prime"), beta,
                               mode, run.getfloat("target_eps"), step_budget, task, grid, knobs)
    except KeyError as exc:
        raise ConfigError(f"missing section or key: {exc}") from None
    except ValueError as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError(str(exc)) from None
    if not 0 < cfg.r_prime < cfg.r <= 0.5:
        raise ConfigError("need 0 < r_prime < r <= 1/2")
    if cfg.mode not in MODES:
        raise ConfigError(f"mode must be one of {MODES}")
    if cfg.task not in TASKS:
        raise ConfigError(f"task must be one of {TASKS}")
    if not 0 < cfg.target_eps < 1 or cfg.step_budget < 1 or cfg.grid < 2:
        raise ConfigError("need 0 < target_eps < 1, step_budget >= 1 and grid >= 2")
    return cfg


def random_perturbation(group: LieGroupTag, d: int, degree: int, amplitude: float, seed: int,
                        r: float, beta: float | None = None) -> TorusSeries:
    """Trigonometric polynomial in the algebra with ``|m| <= degree``, scaled to ``amplitude``.

    Real groups get conjugate mirror coefficients so the series is real on the
    torus; unitary ones get ``F(-m) = -F(m)^*`` so the values are skew-hermitian.
    """
    n = group.n
    rng = np.random.default_rng(seed)
    modes = {}
    for m in itertools.product(range(-degree, degree + 1), repeat=d):
        size = sum(abs(x) for x in m)
        if size == 0 or size > degree:
            continue
        mirror = tuple(-x for x in m)
        if mirror in modes:
            continue
        raw = rng.standard_normal((n, n)) + 1j * rng.standard_normal((n, n))
        if group.kind == "U":
            # skew-hermitian values need F(-m) = -F(m)^*
            modes[m], modes[mirror] = raw, -raw.conj().T
        elif group.is_real:
            coef = group.project_algebra(raw.real).astype(complex)
            coef = coef + 1j * group.project_algebra(raw.imag)
            modes[m] = coef
            modes[mirror] = np.conj(coef)
        else:
            modes[m] = group.project_algebra(raw)
            other = rng.standard_normal((n, n)) + 1j * rng.standard_normal((n, n))
            modes[mirror] = group.project_algebra(other)
    F = TorusSeries.from_modes(modes, n=n, d=d, declared_r=r, beta=beta, real=group.is_real)
    norm = series_norm(F, r, beta)
    return F.scale(amplitude / norm) if amplitude > 0 else TorusSeries.zero(n, d, r, beta, True)


def build_perturbation(cfg: ExperimentConfig) -> TorusSeries:
    p = cfg.perturbation
    if p["kind"] == "zero" or (p["kind"] == "random" and p["amplitude"] == 0):
        return TorusSeries.zero(cfg.n, cfg.d, cfg.r, cfg.beta, True)
    if p["kind"] == "file":
        try:
            F = TorusSeries.from_text(Path(p["file"]).read_text())
        except (OSError, ValueError) as exc:
            raise ConfigError(f"cannot load perturbation: {exc}") from None
        if (F.n, F.d) != (cfg.n, cfg.d):
            raise ConfigError("perturbation file has the wrong size")
        return F
    return random_perturbation(cfg.group, cfg.d, p["degree"], p["amplitude"], p["seed"],
                               cfg.r, cfg.beta)


def run_experiment(cfg: ExperimentConfig, out: Path, verbose: bool = False) -> int:
    out.mkdir(parents=True, exist_ok=True)
    F = build_perturbation(cfg)
    try:
        params = ScheduleParams.derive(cfg.freq, cfg.n, mode=cfg.mode, beta=cfg.beta, **cfg.params)
    except ValueError as exc:
        raise ConfigError(f"bad parameter override: {exc}") from None

    def progress(state):
        if verbose:
            print(f"step {state.k}: eps={state.eps:.3e} residual={state.residual:.2e} "
                  f"resonance={state.resonance_flag}", file=sys.stderr)

    extra = {}
    if cfg.task == "nearby_reducible":
        res = nearby_reducible(cfg.A, F, cfg.group, cfg.r, cfg.r_prime, cfg.target_eps, params,
                               cfg.freq, cfg.mode, cfg.step_budget, cfg.grid)
        run = res.run
        extra = {"nearby_distance": res.distance, "nearby_residual": res.residual}
        (out / "H.txt").write_text(res.H.to_text())
        reached = res.distance <= cfg.target_eps
    else:
        run = almost_reduce(cfg.A, F, cfg.group, cfg.r, cfg.r_prime, cfg.target_eps, params,
                            cfg.freq, cfg.mode, cfg.step_budget, cfg.grid, progress=progress)
        reached = run.reached
    (out / "run.csv").write_text(run.to_csv())
    body = json.loads(run.to_json())
    report = {
        "config": cfg.to_dict(),
        "params": {k: v for k, v in params.to_dict().items()},
        "states": body["states"],
        "certificates": {**body["certificates"], **extra},
        "residuals": body["residuals"],
        "cauchy": body["cauchy"],
        "reached": reached,
        "version": __version__,
    }
    (out / "report.json").write_text(json.dumps(report, sort_keys=True, indent=1) + "\n")
    last = run.final
    (out / "Z.txt").write_text(run.Z.to_text())
    (out / "Abar.txt").write_text(last.Abar.to_text())
    (out / "Fbar.txt").write_text(last.Fbar.to_text())
    (out / "Psi.txt").write_text(last.Psi.to_text())
    (out / "A.txt").write_text(TorusSeries.constant(last.A, cfg.d).to_text())
    if verbose:
        print(f"final eps={last.eps:.3e} after {len(run.states) - 1} steps", file=sys.stderr)
    if not reached:
        print(f"target {cfg.target_eps:.3e} not reached within {cfg.step_budget} steps",
              file=sys.stderr)
        return 2
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="kamcocycle",
                                description="Almost reduce a quasi-periodic linear cocycle.")
    p.add_argument("--config", required=True,
                   help=f"config file, or a shipped fixture: {', '.join(FIXTURES)}")
    p.add_argument("--out", default="kam_out", help="output directory")
    p.add_argument("--mode", choices=MODES)
    p.add_argument("--steps", type=int, help="step budget")
    p.add_argument("--seed", type=int, help="seed of the random perturbation")
    p.add_argument("--grid", type=int, help="grid points per torus direction")
    p.add_argument("--verbose", action="store_true")
    p.add_argument("--version", action="version", version=__version__)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    if args.seed is not None and not 0 <= args.seed < 2 ** 64:
        print("error: seed must fit in an unsigned 64-bit integer", file=sys.stderr)
        return 1
    overrides = {"mode": args.mode, "steps": args.steps, "grid": args.grid}
    if args.seed is not None:
        overrides["seed"] = args.seed
    try:
        cfg = load_config(args.config, overrides)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 1
    try:
        return run_experiment(cfg, Path(args.out), args.verbose)
    except (ConfigError, PreconditionError) as exc:
        print(f"inadmissible input: {exc}", file=sys.stderr)
        return 1
    except ContractionError as exc:
        print(f"contraction failure: {exc}", file=sys.stderr)
        for key, value in sorted(exc.diagnostics.items()):
            print(f"  {key}: {value}", file=sys.stderr)
        return 2
    except (SmallDivisorError, ResonanceRemovalError, SeriesDivergenceError,
            np.linalg.LinAlgError) as exc:
        print(f"run failed: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
