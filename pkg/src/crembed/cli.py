"""
Batch driver for the crembed experiments.

Every subcommand reads an optional YAML config, runs one experiment and
writes its tables (CSV) and summary (JSON) to ``--out``.  Run metadata,
including timestamps, goes to a separate ``meta.json`` so that results are
byte-identical across reruns with the same config and seed.

Exit codes: 0 pass, 1 numerical-acceptance failure, 2 usage or config error.
"""

import argparse
import csv
import io
import json
import os
import platform
import sys
import time
from pathlib import Path

EXIT_PASS, EXIT_FAIL, EXIT_USAGE = 0, 1, 2


class ConfigError(ValueError):
    pass


DEFAULTS = {
    "levi-analyze": {"model": "quadric22", "q": 2, "samples": 64, "radius": 0.05, "angle_tol_deg": 10.0},
    "barrier-check": {"model": "quadric11", "q": 1, "pairs": 10000, "radius": 0.1, "spread": 0.05,
                      "pair_radius": 0.2, "C_min": 1e-3},
    "kernel-test": {"model": "quadric33", "q": 3, "pairs": 100, "radius": 0.1, "spread": 0.15, "tol": 1e-10},
    "homotopy-verify": {"sphere": 8, "radius": 1.0, "tol": 0.01,
                        "t_ladder": [0.1, 0.05, 0.025, 0.0125, 0.00625, 0.003125], "r2_min": 0.95},
    "cech-mock": {"trials": 100, "coboundaries": 50, "tol": 1e-10},
    "deform-step": {"model": "quadric11", "points": 20, "half": 0.3, "sizes": [0.1, 0.05, 0.025, 0.0125],
                    "slope_tol": 0.3},
    "iterate": {"delta0": 1e-3, "t0": 2.0, "C": 1.0, "k": 17, "s": 13, "N": 64, "scale": 16.0,
                "max_iter": 20, "target": 1e-8},
    "ledger-sim": {"C": 1.0, "P_deg": 1.0, "k": 17, "s": 13, "t0s": [2.0, 4.0, 8.0], "horizon": 200,
                   "closure": "printed"},
}


# ----------------------------------------------------------------------------
# config and output plumbing

def load_config(command, path):
    cfg = dict(DEFAULTS[command])
    if path is None:
        return cfg
    import yaml

    p = Path(path)
    if not p.exists():
        raise FileNotFoundError(str(p))
    try:
        data = yaml.safe_load(p.read_text()) or {}
    except yaml.YAMLError as exc:
        raise ConfigError(f"cannot parse {p}: {exc}") from exc
    if not isinstance(data, dict):
        raise ConfigError(f"{p}: top level must be a mapping")
    # a config may hold one section per command or flat keys
    section = data.get(command, data)
    unknown = set(section) - set(cfg) - set(DEFAULTS)
    if unknown:
        raise ConfigError(f"unknown keys for {command}: {sorted(unknown)}")
    cfg.update({k: v for k, v in section.items() if k in cfg})
    return cfg


def resolve_model(name, base=None):
    from .geometry import builtin_models, load_model

    models = builtin_models()
    if name in models:
        return models[name]()
    path = Path(name)
    if not path.is_absolute() and base is not None and not path.exists():
        path = Path(base) / path
    return load_model(path)


class Output:
    def __init__(self, out_dir):
        self.dir = Path(out_dir)
        self.dir.mkdir(parents=True, exist_ok=True)

    def csv(self, name, header, rows):
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([_fmt(v) for v in row])
        (self.dir / name).write_text(buf.getvalue())

    def json(self, name, obj):
        (self.dir / name).write_text(json.dumps(_plain(obj), indent=2, sort_keys=True) + "\n")


def _fmt(v):
    if isinstance(v, float):
        return repr(float(v))
    return v


def _plain(obj):
    import numpy as np

    if isinstance(obj, dict):
        return {str(k): _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _plain(obj.tolist())
    if isinstance(obj, (np.bool_,)):
        return bool(obj)
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, (np.floating, float)):
        f = float(obj)
        return f if np.isfinite(f) else str(f)
    if isinstance(obj, complex):
        return [obj.real, obj.imag]
    return obj


# ----------------------------------------------------------------------------
# subcommands; each returns (passed, summary) after writing its tables

def run_levi_analyze(cfg, seed, out, base):
    import numpy as np

    from .geometry import certify_regular_q_pseudoconcave, levi_form

    M = resolve_model(cfg["model"], base)
    rng = np.random.default_rng(seed)
    zs = M.point(rng.uniform(-cfg["radius"], cfg["radius"], size=(cfg["samples"], M.dim)))
    thetas = rng.normal(size=(8, M.m))
    thetas /= np.linalg.norm(thetas, axis=1, keepdims=True)
    rows = []
    for ti, th in enumerate(thetas):
        for zi, z in enumerate(zs):
            d = levi_form(M, z, th)
            rows.append([ti, zi, d.negative_count, float(d.eigenvalues.min()), float(d.eigenvalues.max())])
    out.csv("levi.csv", ["theta_index", "z_index", "negative_count", "min_eigenvalue", "max_eigenvalue"], rows)
    cert = certify_regular_q_pseudoconcave(M, cfg["q"], thetas, zs, angle_tol_deg=cfg["angle_tol_deg"])
    summary = {k: v for k, v in cert.items() if k != "frames"}
    summary["min_negative_count"] = min(r[2] for r in rows)
    return bool(cert["passed"]), summary


def run_barrier_check(cfg, seed, out, base):
    import numpy as np

    from .barrier import build_barrier, check_strong_barrier, find_adjusted_pair, sobol

    M = resolve_model(cfg["model"], base)
    b = build_barrier(M, cfg["q"])
    k = int(cfg["pairs"])
    u = (sobol(k, M.dim, seed=seed) * 2 - 1) * cfg["radius"]
    zs = M.point(u)
    v = (sobol(k, 2 * M.n, seed=seed + 1) * 2 - 1) * cfg["spread"]
    zetas = zs + v[:, :M.n] + 1j * v[:, M.n:]
    rep = check_strong_barrier(b, zetas, zs, C_min=cfg["C_min"])
    R = cfg["pair_radius"]
    ap = find_adjusted_pair(b, np.zeros(M.n), R, seed=seed)
    rho = np.linalg.norm(M.rho_values(zetas), axis=-1)
    ratio = np.abs(b.Phi(zetas, zs)) / (rho + np.linalg.norm(zetas - zs, axis=-1) ** 2)
    out.csv("barrier_ratio.csv", ["pair", "ratio"], [[i, float(r)] for i, r in enumerate(ratio)])
    summary = dict(rep, pair={"R": R, "r": ap.r, "c": ap.c, "samples": ap.samples})
    return bool(rep["passed"] and ap.r >= R / 16 and ap.c > 0), summary


def run_kernel_test(cfg, seed, out, base):
    import numpy as np

    from .barrier import build_barrier
    from .forms import bochner_martinelli, cf_identity_residual, omega_prime_r_batch

    M = resolve_model(cfg["model"], base)
    q = int(cfg["q"])
    eta = build_barrier(M, q).kernel()
    rng = np.random.default_rng(seed)
    k = int(cfg["pairs"])
    zs = M.point(rng.uniform(-cfg["radius"], cfg["radius"], size=(k, M.dim)))
    zetas = zs + cfg["spread"] * (rng.normal(size=(k, M.n)) + 1j * rng.normal(size=(k, M.n)))
    cols = []
    for r in range(q + 1):
        _, coeffs = omega_prime_r_batch(eta, r, zetas, zs)
        cols.append(np.abs(coeffs).reshape(k, -1).max(axis=1))
    below = np.max(np.stack(cols[:q]), axis=0) if q else np.zeros(k)
    header = ["pair"] + [f"max_abs_r{r}" for r in range(q + 1)] + ["max_abs_below_q"]
    out.csv("kernel_vanishing.csv", header, [[i] + [float(c[i]) for c in cols] + [float(below[i])] for i in range(k)])
    # algebraic identity on the Bochner-Martinelli kernel: residual ratios under step halving
    point = (np.array([0.7 + 0.2j, -0.3 + 0.4j]), np.array([0.1 - 0.1j, 0.05 + 0.2j]))
    res = [cf_identity_residual(bochner_martinelli(2), 1, point, h) for h in (0.04, 0.02, 0.01, 0.005)]
    slope = float(np.polyfit(np.log([0.04, 0.02, 0.01, 0.005]), np.log(res), 1)[0])
    summary = {"pairs": k, "q": q, "max_below_q": float(below.max()), "max_at_q": float(cols[q].max()),
               "cf_identity_residuals": res, "cf_identity_slope": slope}
    return bool(below.max() <= cfg["tol"] and 1.7 <= slope <= 2.3), summary


def run_homotopy_verify(cfg, seed, out, base):
    import numpy as np

    from .geometry import GraphManifold
    from .kernels import BallDomain, CFConfig, TubeDomain, TubeOperators, bm_reproduce
    from .polynomial import Poly

    c = np.array([0.1 + 0.05j, -0.2j])
    ball = BallDomain(c, cfg["radius"], CFConfig(sphere=cfg["sphere"], seed=seed))
    funcs = {
        "one": lambda w: 1 + 0 * w[..., 0],
        "z1^2 z2 + 1": lambda w: w[..., 0] ** 2 * w[..., 1] + 1,
        "exp(z1 - z2)": lambda w: np.exp(w[..., 0] - w[..., 1]),
        "(1 + z2)^3": lambda w: (1 + w[..., 1]) ** 3,
        "z1^4 - 2i z2 + 1/2": lambda w: w[..., 0] ** 4 - 2j * w[..., 1] + 0.5,
    }
    R = cfg["radius"]
    zs = [c, c + R * np.array([0.3, 0.2j]), c + R * np.array([-0.5 + 0.1j, 0.3]), c + R * np.array([0.1j, -0.6]),
          c + R * np.array([0.4, 0.4])]
    rows, worst = [], 0.0
    for name, g in funcs.items():
        for i, z in enumerate(zs):
            v = bm_reproduce(ball, g, z)
            err = abs(v - g(z)) / abs(g(z))
            worst = max(worst, err)
            rows.append([name, i, v.real, v.imag, float(err)])
    out.csv("reproduce.csv", ["function", "point", "value_re", "value_im", "rel_error"], rows)
    # T-part decay on a tube around x_1 = |z_1|^2 / 2 in C^2
    n = 2
    M = GraphManifold(n, 1, [Poly.z(1, n) * Poly.zbar(1, n) * 0.5], allow_low_rank=True)
    ops = TubeOperators(TubeDomain(M, np.zeros(2, complex), 0.5, None, CFConfig(sphere=cfg["sphere"], seed=seed)))
    dg = lambda w: {(1,): np.conj(w[..., 1]) + 1, (2,): w[..., 0] + 0.5}
    z = M.point(np.array([0.05, 0.1, -0.07]))
    eps = np.array(cfg["t_ladder"], float)
    vals = np.array([abs(ops.T(dg, 1, z, e).get((), 0)) for e in eps])
    X = eps * np.abs(np.log(eps))
    K = float(X @ vals / (X @ X))
    r2 = float(1 - np.sum((vals - K * X) ** 2) / np.sum((vals - vals.mean()) ** 2))
    out.csv("t_decay.csv", ["eps", "abs_T"], [[float(e), float(v)] for e, v in zip(eps, vals)])
    summary = {"worst_rel_error": worst, "t_fit_K": K, "t_fit_r2": r2}
    return bool(worst <= cfg["tol"] and r2 >= cfg["r2_min"]), summary


def run_cech_mock(cfg, seed, out, base):
    import numpy as np

    from .cech import Cochain, MockSections, chi, homotopy, overlaps, q2, rho

    space = MockSections()
    rng = np.random.default_rng(seed)
    checks = {}
    for j in (0, 1, 2):
        vals = {I: np.where(space.mask(I, 1, 1), rng.integers(-9, 10, space.dim(1)).astype(float), 0.0)
                for I in overlaps(space, j, 1)}
        checks[f"rho_squared_j{j}"] = rho(rho(Cochain(j, 1, 1, vals), space), space).max_abs()
    worst_chi = 0.0
    for j in (1, 2):
        prev = {I: rng.normal(size=space.dim(0)) * space.mask(I, 1, 0) for I in overlaps(space, j - 1, 1)}
        a = rho(Cochain(j - 1, 0, 1, prev), space)
        worst_chi = max(worst_chi, rho(chi(a, space), space).combine(a, 1.0, -1.0).max_abs())
    checks["rho_chi_identity"] = worst_chi
    worst_q2 = 0.0
    for _ in range(int(cfg["coboundaries"])):
        beta = Cochain(1, 0, 1, {I: rng.normal() * space.mask(I, 1, 0).astype(float) for I in overlaps(space, 1, 1)})
        alpha = rho(beta, space)
        o = q2(alpha, space)
        worst_q2 = max(worst_q2, rho(o, space).combine(alpha.restrict(space, o.level), 1.0, -1.0).max_abs())
    checks["q2_contract"] = worst_q2
    rows = []
    for i in range(int(cfg["trials"])):
        h = rng.normal(size=space.dim(1))
        P, Q = homotopy(h, space)
        rows.append([i, float(np.max(np.abs(h - space.dbar(P, 0) - Q)))])
    out.csv("homotopy.csv", ["trial", "max_abs_residual"], rows)
    checks["homotopy_identity"] = max(r[1] for r in rows)
    passed = checks["rho_squared_j0"] == checks["rho_squared_j1"] == checks["rho_squared_j2"] == 0.0
    passed = passed and all(v <= cfg["tol"] for v in checks.values())
    return bool(passed), {"checks": checks, "betti": space.betti()}


def run_deform_step(cfg, seed, out, base):
    import numpy as np

    from .deformation import DeformationForm, pushforward_mu

    M = resolve_model(cfg["model"], base)
    u = np.random.default_rng(seed).uniform(-cfg["half"], cfg["half"], size=(cfg["points"], M.dim))

    def f0(z):
        zz = [z[..., j % M.n] for j in range(3)]
        return np.stack([zz[1] * np.conj(zz[2]) + np.abs(zz[1]) ** 2,
                         np.conj(zz[0]) * zz[1] + np.conj(zz[2]) ** 2,
                         np.sin(zz[1].real) * np.conj(zz[1])][:M.n], -1)

    rows = []
    for lam in cfg["sizes"]:
        f = lambda z, lam=lam: lam * f0(z)
        mu = DeformationForm.dbar_of(M, f)
        res = pushforward_mu(M, mu, lambda z: z + f(z), u)
        rows.append([float(lam), float(np.max(np.abs(mu(u)))), float(np.max(np.abs(res.mu_star))),
                     float(res.tangency)])
    out.csv("pushforward.csv", ["size", "max_abs_mu", "max_abs_mu_star", "tangency"], rows)
    sizes = np.array([r[0] for r in rows])
    slope = float(np.polyfit(np.log(sizes), np.log([r[2] for r in rows]), 1)[0])
    return bool(abs(slope - 2) <= cfg["slope_tol"]), {"slope": slope}


def run_iterate(cfg, seed, out, base):
    from .nash_moser import LedgerConfig, LedgerViolation, PeriodicGrid, ToyBackend, default_initial_data, iterate

    grid = PeriodicGrid(int(cfg["N"]), float(cfg["scale"]))
    lc = LedgerConfig(k=int(cfg["k"]), s=int(cfg["s"]), C=float(cfg["C"]), t0=float(cfg["t0"]),
                      max_iter=int(cfg["max_iter"]), target=float(cfg["target"]))
    mu, rho = default_initial_data(grid, float(cfg["delta0"]), lc.k)
    try:
        res = iterate(mu, rho, lc, ToyBackend(grid))
    except LedgerViolation as exc:
        return False, {"error": str(exc), "report": exc.report}
    (out.dir / "trace.csv").write_text(res.to_csv())
    summary = res.summary()
    passed = res.converged and all(s.green for s in res.trace)
    return bool(passed), summary


def run_ledger_sim(cfg, seed, out, base):
    from .nash_moser import feasibility_scan

    scan = feasibility_scan(C=float(cfg["C"]), P_deg=float(cfg["P_deg"]), k=int(cfg["k"]), s=int(cfg["s"]),
                            t0s=tuple(float(t) for t in cfg["t0s"]), horizon=int(cfg["horizon"]),
                            closure=cfg["closure"])
    rows = []
    for t0, v in scan.items():
        fv = v["first_violation"] or {"delta0": "", "index": "", "flags": []}
        rows.append([t0, v["eps"], v["max_feasible_delta0"], fv["delta0"], fv["index"], ";".join(fv["flags"] or [])])
    out.csv("feasibility.csv", ["t0", "eps", "max_feasible_delta0", "violation_delta0", "violation_index",
                                "violation_flags"], rows)
    feasible_t0 = [t0 for t0, v in scan.items() if v["max_feasible_delta0"] > 0]
    first = feasible_t0[0] if feasible_t0 else None
    summary = {"feasible": bool(feasible_t0), "t0": int(first) if first is not None and first == int(first) else first}
    out.json("ledger.json", summary)
    summary["scan"] = {str(k): v for k, v in scan.items()}
    return bool(feasible_t0), summary


COMMANDS = {
    "levi-analyze": run_levi_analyze,
    "barrier-check": run_barrier_check,
    "kernel-test": run_kernel_test,
    "homotopy-verify": run_homotopy_verify,
    "cech-mock": run_cech_mock,
    "deform-step": run_deform_step,
    "iterate": run_iterate,
    "ledger-sim": run_ledger_sim,
}


# ----------------------------------------------------------------------------

def build_parser():
    p = argparse.ArgumentParser(prog="crembed", description=__doc__.strip().splitlines()[0])
    p.add_argument("command", choices=sorted(COMMANDS))
    p.add_argument("--config", help="YAML config (flat keys or one section per command)")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", default="results", help="output directory")
    p.add_argument("--threads", type=int, default=None, help="BLAS thread count")
    return p


def _error(out_dir, kind, message, **extra):
    rec = {"error": kind, "message": message, **extra}
    print(json.dumps(rec), file=sys.stderr)
    try:
        Path(out_dir).mkdir(parents=True, exist_ok=True)
        (Path(out_dir) / "error.json").write_text(json.dumps(rec, indent=2, sort_keys=True) + "\n")
    except OSError:
        pass
    return rec


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_USAGE if exc.code else EXIT_PASS
    if args.threads is not None:
        if args.threads < 1:
            _error(args.out, "usage", "--threads must be positive")
            return EXIT_USAGE
        # only effective before numpy is first imported in this process
        for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
            os.environ[var] = str(args.threads)
    base = Path(args.config).parent if args.config else None
    try:
        cfg = load_config(args.command, args.config)
    except FileNotFoundError as exc:
        _error(args.out, "missing_file", f"file not found: {exc}", path=str(exc))
        return EXIT_USAGE
    except ConfigError as exc:
        _error(args.out, "config", str(exc))
        return EXIT_USAGE
    out = Output(args.out)
    start = time.time()
    from .barrier import BarrierError
    from .cech import CechError
    from .deformation import DeformationError
    from .geometry import ModelError
    from .kernels import QuadratureError

    try:
        passed, summary = COMMANDS[args.command](cfg, args.seed, out, base)
    except FileNotFoundError as exc:
        _error(args.out, "missing_file", f"file not found: {exc}", path=str(exc))
        return EXIT_USAGE
    except (ModelError, ConfigError) as exc:
        _error(args.out, "config", f"{type(exc).__name__}: {exc}")
        return EXIT_USAGE
    except (BarrierError, CechError, DeformationError, QuadratureError, ValueError) as exc:
        _error(args.out, "numerical", f"{type(exc).__name__}: {exc}")
        return EXIT_FAIL
    except Exception as exc:  # noqa: BLE001 - any other module error still gets a record
        _error(args.out, "internal", f"{type(exc).__name__}: {exc}")
        return EXIT_FAIL
    summary = dict(summary, command=args.command, passed=passed, seed=args.seed)
    out.json("summary.json", summary)
    out.json("meta.json", {"command": args.command, "config": cfg, "seed": args.seed,
                           "started": time.strftime("%Y-%m-%dT%H:%M:%S", time.localtime(start)),
                           "elapsed_s": round(time.time() - start, 3), "python": platform.python_version(),
                           "threads": args.threads})
    print(f"{args.command}: {'PASS' if passed else 'FAIL'}")
    return EXIT_PASS if passed else EXIT_FAIL


if __name__ == "__main__":
    sys.exit(main())
