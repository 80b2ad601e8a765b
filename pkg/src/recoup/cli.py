"""Command-line experiment runner.

    recoup {invariant,tails,distances,verify,clt} [--config FILE] [--seed N] [--<field> VALUE]

Exit codes: 0 pass, 1 invariant failure, 2 configuration error.
"""
from __future__ import annotations

import argparse
import json
import math
import os
import sys
import traceback
from dataclasses import fields

import numpy as np

from . import coupling, stats
from .config import _SECTIONS, OUTPUT_ENV, ConfigError, RunConfig, parse_value
from .density import TruncationError, invariant_density
from .dynamics import DOUBLING, MapSpec
from .measures import (DeficitError, TowerQuadrature, check_regularity, spec_acip,
                       spec_lebesgue, spec_mu, tau_bar)
from .regen import (ConstantsError, RegenConstants, RegularityError, build_engine,
                    bound_curve, theoretical_tail_bound, word_sample_columns, write_csv)

EXIT_OK, EXIT_INVARIANT, EXIT_CONFIG = 0, 1, 2
# doubling branches beyond this carry less than 2^-64 of the mass
DOUBLING_INDEX_CAP = 64
VERIFY_SAMPLES = 2000


class InvariantFailure(AssertionError):
    pass


# ----------------------------------------------------------------------------
# output

def _plain(o):
    if isinstance(o, (np.floating,)):
        return float(o)
    if isinstance(o, (np.integer,)):
        return int(o)
    if isinstance(o, (np.bool_,)):
        return bool(o)
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, tuple):
        return list(o)
    raise TypeError(f"not serializable: {type(o)}")


def _clean(o):
    # json cannot hold inf/nan; write them as strings
    if isinstance(o, dict):
        return {str(k): _clean(v) for k, v in o.items()}
    if isinstance(o, (list, tuple)):
        return [_clean(v) for v in o]
    if isinstance(o, (float, np.floating)) and not math.isfinite(o):
        return str(float(o))
    return o


class Writer:
    def __init__(self, cfg: RunConfig):
        self.cfg = cfg
        self.dir = cfg.out_dir()
        os.makedirs(self.dir, exist_ok=True)
        self.written = []

    def json(self, name: str, obj: dict) -> str:
        path = os.path.join(self.dir, name)
        body = {"config_hash": self.cfg.hash, **obj}
        with open(path, "w") as fh:
            json.dump(_clean(json.loads(json.dumps(body, default=_plain))), fh,
                      indent=2, sort_keys=True)
            fh.write("\n")
        self.written.append(path)
        return path

    def csv(self, name: str, columns, rows) -> str:
        return self.table(name, dict(zip(columns, rows)))

    def table(self, name: str, cols: dict) -> str:
        path = write_csv(os.path.join(self.dir, name), cols,
                         f"# config_hash={self.cfg.hash} seed={self.cfg.seed}\n")
        self.written.append(path)
        return path


# ----------------------------------------------------------------------------
# shared setup

class Setup:
    """Invariant density, constants, engine and the requested specs."""

    def __init__(self, cfg: RunConfig):
        self.cfg = cfg
        self.map = cfg.map
        cap = DOUBLING_INDEX_CAP if self.map.family == DOUBLING else None
        self.r_max = min(cfg.r_max, cap) if cap else cfg.r_max
        self.tau_max = min(cfg.tau_max, cap) if cap else cfg.tau_max
        self.inv = invariant_density(self.map, n_grid=cfg.n_grid)
        self.engine = build_engine(self.map, self.inv, n_chain=cfg.n_chain,
                                   tau_max=max(cfg.tau_max, self.r_max, self.tau_max))
        if cfg.xi is not None:
            c = self.engine.c
            RegenConstants(c.lam, c.K, c.R_prime, c.R, cfg.xi)
        self._specs = {}
        self._quad = None

    @property
    def h(self):
        return self.inv.h

    def spec(self, name: str):
        if name not in self._specs:
            if name == "mu":
                s = spec_mu(self.map)
            elif name == "lebesgue":
                s = spec_lebesgue(self.map, self.r_max, self.engine)
            else:
                s = spec_acip(self.map, self.h, self.tau_max, self.engine)
            target = 1.0 / self.cfg.sample_count
            if s.deficit > target:
                raise DeficitError(f"{name} deficit {s.deficit:.3g} is coarser than the finest "
                                   f"tail quantile {target:.3g}; raise r_max/tau_max")
            self._specs[name] = s
        return self._specs[name]

    @property
    def quad(self):
        if self._quad is None:
            self._quad = TowerQuadrature.build(self.map, self.h)
        return self._quad

    def observable(self) -> stats.Observable:
        obs = self.cfg.observable
        if obs == "centered":
            return stats.Observable.centered_for(self.map, self.h, self.quad)
        if obs == "raw":
            return stats.Observable.centered(0.0)
        try:
            values = np.loadtxt(obs, delimiter=",", comments="#", ndmin=1)
        except OSError as e:
            raise ConfigError(f"cannot read observable grid {obs!r}") from e
        return stats.Observable.from_grid(values)

    def effective(self) -> dict:
        return {"r_max": self.r_max, "tau_max": self.tau_max}


def _sample(setup: Setup, horizon: int, checkpoints, observable, count=None):
    """Pairs when one side is mu, joint triples otherwise. Returns
    (batch, joint?)."""
    cfg = setup.cfg
    a, b = cfg.pair
    count = count or cfg.sample_count
    kw = dict(horizon=horizon, observable=observable, checkpoints=checkpoints,
              workers=cfg.workers, batch_size=cfg.batch_size)
    if "mu" in (a, b):
        other = b if a == "mu" else a
        return coupling.sample_pairs(setup.spec(other), setup.engine, count, cfg.seed, **kw), False
    return coupling.sample_joints(setup.spec(a), setup.spec(b), setup.engine, count, cfg.seed,
                                  **kw), True


# ----------------------------------------------------------------------------
# commands

def cmd_invariant(cfg: RunConfig, out: Writer) -> int:
    setup = Setup(cfg)
    inv, h = setup.inv, setup.h
    out.csv("density.csv", ["x", "h"], [h.x, h.values])
    out.json("constants.json", {
        "map": setup.map.label(),
        "n_grid": cfg.n_grid,
        "K_emp": inv.K_emp,
        "K_certified": setup.engine.c.K,
        "seminorm_log_h": inv.lip_log_h,
        "residual": inv.residual,
        "iterations": inv.iterations,
        "deficit": inv.deficit,
        "tau_bar": tau_bar(setup.map, h, setup.tau_max),
        "constants": setup.engine.c.as_dict(),
    })
    return EXIT_OK


def _tail_block(name, samples, cfg, bound_fn, out: Writer):
    rep = stats.tail_exponent(samples, cfg.k_frac, seed=cfg.seed)
    bound = bound_fn(rep.curve_x) if bound_fn else np.full(rep.curve_x.size, np.nan)
    out.csv(f"survival_{name}.csv", ["x", "survival", "bound"], [rep.curve_x, rep.curve_s, bound])
    d = rep.as_dict()
    if bound_fn:
        x, S = stats.survival(samples)
        d["below_bound"] = bool(np.all(S <= bound_fn(x)))
    return d


def cmd_tails(cfg: RunConfig, out: Writer) -> int:
    setup = Setup(cfg)
    v = setup.observable()
    batch, joint = _sample(setup, cfg.horizon, (), v)
    batch = batch.accepted()
    params = stats.bound_params(setup.map, setup.h, setup.engine.c)
    if joint:
        sides = [setup.spec(cfg.pair[0]).jump_tail, setup.spec(cfg.pair[1]).jump_tail]
        t = batch.ts[:, 0]
        z, z2 = batch.z_xy, None
    else:
        other = cfg.pair[1] if cfg.pair[0] == "mu" else cfg.pair[0]
        sides = [setup.spec(other).jump_tail]
        t = batch.t
        z, z2 = batch.z, batch.z2
    s_bound = batch.s_bound
    z_bound = 2 * v.v_inf * s_bound
    shift_bound = lambda x: np.minimum(stats.shift_tail_bound(params, sides, x), 1e300)
    p = {k: val for k, val in params.items() if k != "kind"}
    reports = {
        "t": _tail_block("t", t, cfg,
                         lambda x: theoretical_tail_bound(params["kind"], p, np.maximum(x, 1.0)), out),
        "s_bound": _tail_block("s_bound", s_bound, cfg, shift_bound, out),
        "Z_bound": _tail_block("Z_bound", z_bound, cfg,
                               lambda x: shift_bound(x / (2 * v.v_inf)), out),
    }
    exp_r2 = stats.loglinear_r2(s_bound)
    viol = batch.diagnostics.total_violations
    z_ok = bool(np.all(z <= z_bound + 1e-9))
    body = {
        "pair": list(cfg.pair), "map": setup.map.label(), "count": int(s_bound.size),
        "effective": setup.effective(),
        "deficits": {n: setup.spec(n).deficit for n in cfg.pair},
        "observable": {"kind": v.kind, "center": v.center, "v_inf": v.v_inf},
        "bound_params": params, "reports": reports,
        "loglinear_r2": exp_r2[0], "loglinear_slope": exp_r2[1],
        "z_trunc_within_bound": z_ok, "chain_violations": viol,
    }
    if z2 is not None and cfg.horizon > 0:
        body["z_stabilized"] = stats.z_stabilized(z, z2)
    out.table("joints.csv" if joint else "pairs.csv", batch.columns())
    ells = batch.ells[:, 0] if joint else batch.word_length
    out.table("words.csv", word_sample_columns(ells, t))
    out.table("bound_t.csv", bound_curve(params["kind"], p, t))
    out.json("tails.json", body)
    return EXIT_OK if viol == 0 and z_ok else EXIT_INVARIANT


def _checkpoints(cfg, limit=None):
    cps = sorted(c for c in cfg.checkpoints if limit is None or c <= limit)
    if not cps:
        raise ConfigError("no checkpoints in range")
    return cps


def cmd_distances(cfg: RunConfig, out: Writer) -> int:
    setup = Setup(cfg)
    v = setup.observable()
    cps = _checkpoints(cfg)
    a, b = cfg.pair
    J = coupling.sample_joints(setup.spec(a), setup.spec(b), setup.engine, cfg.sample_count,
                               cfg.seed, horizon=(max(cps) + 1) // 2, observable=v,
                               checkpoints=cps, workers=cfg.workers,
                               batch_size=cfg.batch_size).accepted()
    col = {c: i for i, c in enumerate(J.checkpoints)}
    W1, LP, ok = [], [], []
    for n in cps:
        lp, w1, holds = stats.lp_within_sqrt_w1(J.bx[:, col[n]], J.by[:, col[n]])
        W1.append(w1)
        LP.append(lp)
        ok.append(holds)

    def w1_rows(rows):
        return [stats.wasserstein_p(J.bx[rows, col[n]], J.by[rows, col[n]]) for n in cps]

    slope, ci, _ = stats.trend_vs_log(cps, w1_rows, J.bx.shape[0], seed=cfg.seed)
    out.csv("distances.csv", ["n", "w1", "lp", "sqrt_w1", "lp_le_sqrt_w1"],
            [np.array(cps), np.array(W1), np.array(LP), np.sqrt(W1), np.array(ok, int)])
    out.json("distances.json", {
        "pair": list(cfg.pair), "map": setup.map.label(), "count": int(J.bx.shape[0]),
        "n": cps, "w1": W1, "lp": LP, "lp_le_sqrt_w1": ok,
        "slope_vs_log_n": slope, "slope_ci": ci, "trend_nonpositive": bool(ci[0] <= 0),
        "chain_violations": J.diagnostics.total_violations,
    })
    return EXIT_OK if all(ok) and J.diagnostics.total_violations == 0 else EXIT_INVARIANT


def cmd_clt(cfg: RunConfig, out: Writer) -> int:
    setup = Setup(cfg)
    v = setup.observable()
    a, b = cfg.pair
    cps = _checkpoints(cfg, cfg.clt_n)
    single = stats.clt_check(setup.spec(a), v, cfg.clt_n, cfg.sample_count, cfg.seed,
                             setup.engine)
    both = stats.clt_check(setup.spec(a), v, cfg.clt_n, cfg.sample_count, cfg.seed,
                           setup.engine, compare=setup.spec(b), ns=cps, workers=cfg.workers)
    w = [both.w1_by_n[n] for n in sorted(both.w1_by_n)]
    out.json("clt.json", {
        "pair": list(cfg.pair), "map": setup.map.label(), "n": cfg.clt_n,
        "observable": {"kind": v.kind, "center": v.center},
        "direct": single.as_dict(), "coupled": both.as_dict(),
        "w1_decreasing": bool(all(x >= y for x, y in zip(w, w[1:]))),
    })
    return EXIT_OK


def _verify_checks(cfg: RunConfig):
    """(name, callable -> detail) list; a check fails by raising."""
    state = {}

    def setup():
        state["s"] = Setup(cfg)
        c = state["s"].engine.c
        return c.as_dict()

    def density():
        inv = state["s"].inv
        if not inv.residual <= 1e-10:
            raise InvariantFailure(f"residual {inv.residual:.3g}")
        if not np.all(inv.h.values > 0):
            raise InvariantFailure("density not positive")
        return {"residual": inv.residual, "K_emp": inv.K_emp}

    def deficit():
        s = state["s"]
        return {n: s.spec(n).deficit for n in ("lebesgue", "acip")}

    def regularity():
        s = state["s"]
        return {n: check_regularity(s.spec(n), s.engine) for n in ("lebesgue", "acip")}

    def chain():
        s = state["s"]
        ells, _, status, _, diag = s.engine.words(VERIFY_SAMPLES, cfg.seed)
        if diag.total_violations:
            raise InvariantFailure(f"chain violations {diag.violations}")
        xi = s.engine.c.xi
        return {"violations": 0, "mean_length": float(ells.mean()),
                "expected_length": (1 - xi) / xi}

    def pairs():
        s = state["s"]
        v = s.observable()
        n = min(cfg.sample_count, VERIFY_SAMPLES)
        detail = {}
        for name in ("lebesgue", "acip"):
            B = coupling.sample_pairs(s.spec(name), s.engine, n, cfg.seed, horizon=100,
                                      observable=v, workers=cfg.workers).accepted()
            if B.diagnostics.total_violations:
                raise InvariantFailure(f"{name}: chain violations")
            if not np.all(B.z <= 2 * v.v_inf * B.shift + 1e-9):
                raise InvariantFailure(f"{name}: Z_trunc above 2|v| s")
            detail[name] = {"count": int(B.x.size), "median_shift": float(np.median(B.shift))}
        rng = np.random.default_rng(cfg.seed)
        worst = 0.0
        for _ in range(20):
            p = coupling.sample_pair(s.spec("lebesgue"), s.engine, rng)
            worst = max(worst, coupling.orbit_consistency(s.map, p.orbit))
            if not p.s() <= p.shift:
                raise InvariantFailure("meeting time exceeds shift")
        if worst > 1e-8:
            raise InvariantFailure(f"orbit one-step error {worst:.3g}")
        detail["orbit_error"] = worst
        return detail

    def birkhoff():
        val = stats.birkhoff(stats.Observable.centered(0.5), 0.3, 3, MapSpec.doubling())[-1]
        if abs(val + 0.4) > 1e-12:
            raise InvariantFailure(f"doubling v_3 = {val}")
        return {"v_3": val}

    return [("constants", setup), ("invariant_density", density), ("deficit_budget", deficit),
            ("regularity", regularity), ("chain", chain), ("coupled_pairs", pairs),
            ("birkhoff", birkhoff)]


def cmd_verify(cfg: RunConfig, out: Writer) -> int:
    results = {}
    failed = False
    for name, fn in _verify_checks(cfg):
        if failed and name != "birkhoff":
            results[name] = {"passed": False, "detail": "skipped after earlier failure"}
            continue
        try:
            results[name] = {"passed": True, "detail": fn()}
        except (AssertionError, ConstantsError, RegularityError, DeficitError,
                TruncationError, InvariantFailure, coupling.MergeError) as e:
            results[name] = {"passed": False, "detail": f"{type(e).__name__}: {e}"}
            failed = True
    out.json("verify.json", {"checks": results, "passed": not failed})
    for name, r in results.items():
        print(f"{'PASS' if r['passed'] else 'FAIL'} {name}")
    return EXIT_INVARIANT if failed else EXIT_OK


COMMANDS = {"invariant": cmd_invariant, "tails": cmd_tails, "distances": cmd_distances,
            "verify": cmd_verify, "clt": cmd_clt}


# ----------------------------------------------------------------------------
# entry point

def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="recoup", description=__doc__.splitlines()[0])
    ap.add_argument("command", choices=sorted(COMMANDS))
    ap.add_argument("--config", help="key=value config file with sections")
    for f in fields(RunConfig):
        ap.add_argument("--" + f.name.replace("_", "-"), dest=f.name, default=None,
                        help=f"[{_SECTIONS[f.name]}] {f.name}")
    return ap


def load_config(ns) -> RunConfig:
    over = {k: parse_value(k, getattr(ns, k)) for k in _SECTIONS if getattr(ns, k) is not None}
    if ns.config:
        try:
            base = RunConfig.load(ns.config)
        except OSError as e:
            raise ConfigError(f"cannot read config {ns.config!r}: {e}") from e
        return base.with_overrides(**over)
    if "seed" not in over:
        raise ConfigError("seed is mandatory (--seed or a config file)")
    return RunConfig(**over)


def _error(kind: str, exc: Exception, out_dir: str | None):
    body = {"error": kind, "type": type(exc).__name__, "message": str(exc)}
    text = json.dumps(body, sort_keys=True)
    print(text, file=sys.stderr)
    if out_dir:
        try:
            os.makedirs(out_dir, exist_ok=True)
            with open(os.path.join(out_dir, "error.json"), "w") as fh:
                fh.write(text + "\n")
        except OSError:
            pass


def main(argv=None) -> int:
    ns = build_parser().parse_args(argv)
    # until the config loads, errors go where the flags point
    out_dir = ns.output_dir or os.environ.get(OUTPUT_ENV)
    try:
        cfg = load_config(ns)
        out_dir = cfg.out_dir()
        out = Writer(cfg)
        with open(os.path.join(out.dir, "run.cfg"), "w") as fh:
            fh.write(cfg.to_text(include_output=False))
        code = COMMANDS[ns.command](cfg, out)
    except (ConfigError, DeficitError, TruncationError, ValueError) as e:
        if isinstance(e, (ConstantsError,)):
            _error("invariant", e, out_dir)
            return EXIT_INVARIANT
        _error("config", e, out_dir)
        return EXIT_CONFIG
    except (AssertionError, ConstantsError, RegularityError, coupling.MergeError) as e:
        _error("invariant", e, out_dir)
        return EXIT_INVARIANT
    except Exception as e:  # pragma: no cover - unexpected
        _error("internal", e, out_dir)
        traceback.print_exc()
        return EXIT_INVARIANT
    return code


if __name__ == "__main__":
    sys.exit(main())
