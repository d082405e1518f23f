"""Command-line entry point: ``critrec <subcommand> --config run.yaml``.

Exit codes: 0 success, 2 configuration error, 3 model assumption failure,
4 runtime abort (state overflow, or too many cycles hitting the step cap).
"""
from __future__ import annotations

import argparse
import io
import logging
import math
import os
import sys
from dataclasses import dataclass

import numpy as np

from . import baseline, constants as C
from .config import AssumptionError, ConfigError, RunConfig, check, grid, load_config
from .ladder import ladder_estimate
from .measure import (EstimationError, LogHistogram, default_window, fit_plateau, moment_stabilization,
                      ratio_estimate, tail_profile)
from .model import ChainKind, ModelError, Regime, validate
from .rng import RandomStream

log = logging.getLogger("critrec")

EXIT_OK, EXIT_CONFIG, EXIT_ASSUMPTION, EXIT_ABORT = 0, 2, 3, 4
SUBCOMMANDS = ("validate", "simulate", "tail", "constants", "poisson-check", "kesten-baseline")

# Monte Carlo purposes, so each post-processing step has its own stream.
_MC_PSI, _MC_D1, _MC_POISSON = 11, 12, 13


class RunAbort(RuntimeError):
    pass


@dataclass
class Nu:
    """An estimate of nu plus what the reports need to know about how it was made."""

    hist: LogHistogram
    estimator: str
    info: dict
    ratio: object = None
    ladder: object = None


def _fmt(v) -> str:
    if isinstance(v, float):
        return repr(v)
    if isinstance(v, (tuple, list)):
        return "[" + ", ".join(_fmt(x) for x in v) + "]"
    return str(v)


class Artifacts:
    """Writes files into one run directory, each prefixed with provenance lines."""

    def __init__(self, cfg: RunConfig, command: str, force: bool):
        self.dir = cfg.output_dir()
        self.force = force
        self.header = (f"# critrec {command}\n# config_fingerprint: {cfg.fingerprint()}\n"
                       f"# model_fingerprint: {cfg.model.fingerprint()}\n# seed: {cfg.seed}\n")

    def claim(self, names):
        """Fail before any work if an artifact already exists and --force is absent."""
        if self.force:
            return
        clash = [n for n in names if os.path.exists(os.path.join(self.dir, n))]
        if clash:
            raise ConfigError(f"refusing to overwrite {', '.join(clash)} in {self.dir} (use --force)")

    def write(self, name: str, body: str):
        os.makedirs(self.dir, exist_ok=True)
        with open(os.path.join(self.dir, name), "w", encoding="utf-8", newline="\n") as fh:
            fh.write(self.header)
            fh.write(body)


def _geometry(cfg: RunConfig) -> LogHistogram:
    return LogHistogram.with_base(cfg.rho, cfg.k_min, cfg.k_max)


def _primary(cfg: RunConfig) -> str:
    if cfg.estimator != "both":
        return cfg.estimator
    return "ladder" if cfg.model.chain_kind == ChainKind.LETAC else "ratio"


def _estimate(cfg: RunConfig, functional: bool = False) -> dict:
    """Run the configured estimator(s); returns {name: Nu}."""
    model = cfg.model
    geo = _geometry(cfg)
    out = {}
    if model.regime == Regime.CONTRACTIVE:
        h = baseline.contractive_histogram(model, cfg.n_steps, cfg.seed, cfg.replicas, geo,
                                           x0=None if cfg.x0 == "embedded" else cfg.x0,
                                           representation=cfg.representation, workers=cfg.workers)
        out["ratio"] = Nu(h, "ratio", {"n_steps": int(h.total_steps), "normalization": h.normalization})
        return out
    names = ("ratio", "ladder") if cfg.estimator == "both" else (cfg.estimator,)
    for name in names:
        if name == "ratio":
            est = ratio_estimate(model, cfg.n_steps, cfg.seed, cfg.replicas, geometry=geo, functional=functional,
                                 x0=cfg.x0, representation=cfg.representation, burn_cycles=cfg.burn_cycles,
                                 workers=cfg.workers)
            if est.aborted:
                raise RunAbort("a replica left the representable range (representation: float)")
            info = {"n_steps": est.n_steps, "replicas": len(est.runs),
                    "ref_visits": float(sum(r.ref_count for r in est.runs))}
            out[name] = Nu(est.hist, name, info, ratio=est)
        else:
            try:
                res = ladder_estimate(model, cfg.n_cycles, cfg.seed, cfg.replicas, burn=cfg.burn_cycles,
                                      cap=cfg.cap, functional=functional, geometry=geo, workers=cfg.workers)
            except OverflowError as e:
                raise RunAbort(str(e)) from None
            info = {"n_cycles": res.n_cycles, "steps": res.steps, "aborted_cycles": res.aborted,
                    "excluded_fraction": res.excluded_fraction, "cap": cfg.cap}
            if res.excluded_fraction >= cfg.max_excluded:
                raise RunAbort(f"excluded cycle fraction {res.excluded_fraction:.3g} >= {cfg.max_excluded:g}; "
                               "raise run.cap")
            out[name] = Nu(res.normalized_hist, name, info, ladder=res)
    return out


def _info_lines(nu: Nu) -> str:
    return "".join(f"# {k}: {_fmt(v)}\n" for k, v in nu.info.items())


def _window(cfg: RunConfig, prof):
    return default_window(prof) if cfg.window == "auto" else cfg.window


# subcommands

def cmd_validate(cfg: RunConfig, art: Artifacts) -> int:
    art.claim(["validation.txt"])
    rep = validate(cfg.model)
    lines = [f"e_log_a: {rep.e_log_a!r}", f"sigma2: {rep.sigma2!r}", f"spread_out: {rep.spread_out}",
             f"degenerate_a: {rep.degenerate_a}", f"ok: {rep.ok}"]
    for k, v in rep.moment_flags.items():
        extra = f" value={_fmt(v['value'])}" if "value" in v else ""
        lines.append(f"flag {k}: {'ok' if v['holds'] else 'FAIL'} ({v['method']}){extra}")
    art.write("validation.txt", "\n".join(lines) + "\n")
    return EXIT_OK if rep.ok else EXIT_ASSUMPTION


def cmd_simulate(cfg: RunConfig, art: Artifacts) -> int:
    names = ["ratio"] if cfg.model.regime == Regime.CONTRACTIVE else (
        ["ratio", "ladder"] if cfg.estimator == "both" else [cfg.estimator])
    art.claim([f"histogram_{n}.csv" for n in names])
    for name, nu in _estimate(cfg).items():
        art.write(f"histogram_{name}.csv", f"# normalization: {nu.hist.normalization}\n" + _info_lines(nu)
                  + nu.hist.to_csv())
    return EXIT_OK


def _pair_tag(a, b) -> str:
    return f"{a:g}_{b:g}"


def cmd_tail(cfg: RunConfig, art: Artifacts) -> int:
    art.claim([f"tail_{_pair_tag(a, b)}.csv" for a, b in cfg.pairs] + ["plateau.txt"])
    nu = _estimate(cfg)[_primary(cfg)]
    x = grid(cfg.x_grid)
    lines = [f"estimator: {nu.estimator}", f"normalization: {nu.hist.normalization}"]
    for a, b in cfg.pairs:
        prof = tail_profile(nu.hist, a, b, x)
        art.write(f"tail_{_pair_tag(a, b)}.csv", _info_lines(nu) + prof.to_csv())
        try:
            fit = fit_plateau(prof, _window(cfg, prof))
        except EstimationError as e:
            lines.append(f"pair [{a!r}, {b!r}]: no fit ({e})")
            continue
        lines += [f"pair [{a!r}, {b!r}]:",
                  f"  window: {_fmt(fit.window)}",
                  f"  level: {fit.level!r} +- {fit.level_stderr!r}",
                  f"  slope: {fit.slope!r} +- {fit.slope_stderr!r}",
                  f"  level_over_log_ratio: {fit.c_plateau!r} +- {fit.c_plateau_stderr!r}",
                  f"  slope_compatible_with_zero: {fit.slope_compatible_with_zero}"]
    art.write("plateau.txt", _info_lines(nu) + "\n".join(lines) + "\n")
    return EXIT_OK


def _psi(cfg, nu):
    a, b = cfg.pair
    return C.psi_from_definition(cfg.model, nu.hist, a, b, grid(cfg.psi_grid), cfg.mc_draws,
                                 RandomStream(cfg.seed, 0, _MC_PSI))


def cmd_constants(cfg: RunConfig, art: Artifacts) -> int:
    art.claim(["constants.txt", "psi.csv"])
    model = cfg.model
    if model.regime != Regime.CRITICAL:
        raise ConfigError("model.regime: constants are defined for the critical regime")
    nu = _estimate(cfg, functional=True)[_primary(cfg)]
    a, b = cfg.pair
    sigma2 = validate(model).sigma2
    psi = _psi(cfg, nu)
    notes = [f"estimator: {nu.estimator}"] + [f"{k}: {_fmt(v)}" for k, v in nu.info.items()]
    mom = C.c1_c2_from_psi(psi)
    d1 = C.d1_plus(model, nu.hist, cfg.mc_draws, RandomStream(cfg.seed, 0, _MC_D1))
    prof = tail_profile(nu.hist, a, b, grid(cfg.x_grid))
    fit = fit_plateau(prof, _window(cfg, prof))
    c_minus = None
    if model.chain_kind == ChainKind.AFFINE:
        neg = tail_profile(nu.hist, a, b, grid(cfg.x_grid), side="neg")
        nf = fit_plateau(neg, fit.window)
        c_minus = (nf.c_plateau, nf.c_plateau_stderr)
    elif model.chain_kind == ChainKind.LETAC:
        c_minus = (0.0, 0.0)
        notes.append("c_minus_plateau: structural 0 (support in [delta, inf))")
    c_formula = c_sum = None
    if model.chain_kind == ChainKind.LETAC and nu.ladder is not None:
        est = C.c_plus_formula_letac(model, nu.ladder)
        c_formula = (est.value, est.stderr)
    if model.chain_kind == ChainKind.AFFINE and nu.ratio is not None:
        est = C.c_sum_affine(model, nu.ratio)
        c_sum = (est.value, est.stderr)
        notes.append(f"c_sum excluded visits fraction: {float(est.excluded_fraction)!r}")
    link = C.plateau_moment_link(fit, mom, sigma2)
    notes.append(f"plateau link ({link.branch}): observed {link.plateau!r} predicted {link.predicted!r} "
                 f"z {link.z!r}")
    if d1.structural:
        notes.append("d1_plus: structural 0")
    rep = C.ConstantsReport(sigma2, (mom.c1, mom.c1_stderr), (mom.c2, mom.c2_stderr), (d1.d1_plus, d1.stderr),
                            (fit.c_plateau, fit.c_plateau_stderr), c_minus, c_formula, c_sum,
                            nu.hist.normalization, model.fingerprint(), a, b, notes)
    art.write("psi.csv", psi.to_csv())
    art.write("constants.txt", rep.to_text())
    return EXIT_OK


def cmd_poisson(cfg: RunConfig, art: Artifacts) -> int:
    art.claim(["poisson_residual.csv", "poisson_summary.txt"])
    if cfg.model.regime != Regime.CRITICAL:
        raise ConfigError("model.regime: the Poisson check is defined for the critical regime")
    nu = _estimate(cfg)[_primary(cfg)]
    a, b = cfg.pair
    prof = tail_profile(nu.hist, a, b, grid(cfg.psi_grid))
    psi = _psi(cfg, nu)
    win = None if cfg.window == "auto" else cfg.window
    res = C.poisson_residual(prof, psi, cfg.model, cfg.mc_draws, RandomStream(cfg.seed, 0, _MC_POISSON),
                             window=win)
    buf = io.StringIO()
    buf.write("x,residual,stderr\n")
    for x, r, s in zip(res.x, res.residual, res.stderr):
        buf.write(f"{float(x)!r},{float(r)!r},{float(s)!r}\n")
    art.write("poisson_residual.csv", buf.getvalue())
    z = np.abs(res.residual) / np.where(res.stderr > 0, res.stderr, np.inf)
    art.write("poisson_summary.txt", _info_lines(nu) + f"sup_residual: {res.sup_residual!r}\n"
              f"max_abs_z: {float(z.max()) if z.size else math.nan!r}\nn_points: {res.x.size}\n")
    return EXIT_OK


def cmd_kesten(cfg: RunConfig, art: Artifacts) -> int:
    art.claim(["kesten_baseline.txt"])
    if cfg.model.regime != Regime.CONTRACTIVE:
        raise ConfigError("model.regime: kesten-baseline needs a contractive model")
    try:
        rep = baseline.kesten_baseline(cfg.model, cfg.n_steps, cfg.seed, cfg.replicas, cfg.baseline_window,
                                       _geometry(cfg), workers=cfg.workers)
    except OverflowError as e:
        raise RunAbort(str(e)) from None
    art.write("kesten_baseline.txt", rep.to_text())
    return EXIT_OK


COMMANDS = {"validate": cmd_validate, "simulate": cmd_simulate, "tail": cmd_tail, "constants": cmd_constants,
            "poisson-check": cmd_poisson, "kesten-baseline": cmd_kesten}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="critrec", description="Invariant measures of critical random recursions.")
    p.add_argument("subcommand", choices=SUBCOMMANDS)
    p.add_argument("--config", required=True, help="YAML run configuration")
    p.add_argument("--seed", type=int, help="override run.seed")
    p.add_argument("--replicas", type=int, help="override run.replicas")
    p.add_argument("--out", help="run directory (default: $CRITREC_OUT/<config fingerprint>)")
    p.add_argument("--force", action="store_true", help="overwrite existing artifacts")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def run(subcommand: str, cfg: RunConfig, force: bool = False) -> int:
    """Execute one subcommand; returns the exit status."""
    art = Artifacts(cfg, subcommand, force)
    if subcommand != "validate":
        rep = validate(cfg.model)
        if not rep.ok:
            log.error("model assumptions fail: %s", ", ".join(rep.failures()))
            return EXIT_ASSUMPTION
    try:
        return COMMANDS[subcommand](cfg, art)
    except (RunAbort, EstimationError) as e:
        art.write("abort.txt", f"status: aborted\nreason: {e}\n")
        log.error("run aborted: %s", e)
        return EXIT_ABORT


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return EXIT_CONFIG if e.code else EXIT_OK
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        cfg = load_config(args.config)
        if args.seed is not None:
            cfg.seed = args.seed
        if args.replicas is not None:
            cfg.replicas = args.replicas
        if args.out is not None:
            cfg.out_dir = args.out
        check(cfg)
        return run(args.subcommand, cfg, args.force)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except (AssumptionError, ModelError) as e:
        print(f"assumption failure: {e}", file=sys.stderr)
        return EXIT_ASSUMPTION
    except EstimationError as e:
        print(f"estimation failed: {e}", file=sys.stderr)
        return EXIT_ABORT


if __name__ == "__main__":
    sys.exit(main())
