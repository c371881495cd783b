"""Batch front end.

    metricbv fields | modulus | hausdorff | certify | reproduce | generate

Inputs come either from files in the standard JSON formats (--space,
--mapping, --kappa, --a, --family, --set) or from a named scenario
(--scenario).  A JSON config file (--config) supplies defaults that flags
override.  Outputs are written only after the computation succeeded.

Exit codes: 0 success/PASS, 1 verdict FAIL, 2 input error, 3 parameter
error, 4 solver budget exhausted.
"""
from __future__ import annotations

import argparse
import json
import os
import sys
import tempfile

import numpy as np

EXIT_OK, EXIT_FAIL, EXIT_INPUT, EXIT_PARAM, EXIT_BUDGET = 0, 1, 2, 3, 4


class InputError(Exception):
    pass


class ParamError(Exception):
    pass


def _fmt(x):
    return format(float(x), ".17g")


def _atomic_write(path, text):
    d = os.path.dirname(os.path.abspath(path))
    os.makedirs(d, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=d, prefix=".tmp-")
    with os.fdopen(fd, "w", newline="") as fh:
        fh.write(text)
    os.replace(tmp, path)


def _floats(s):
    if s is None or isinstance(s, (list, tuple)):
        return s
    return [float(v) for v in str(s).split(",") if v.strip()]


def _ints(s):
    if s is None or isinstance(s, (list, tuple)):
        return None if s is None else [int(v) for v in s]
    return [int(v) for v in str(s).split(",") if v.strip()]


# ---------------------------------------------------------------- inputs

def _load(fn, *args):
    try:
        return fn(*args)
    except FileNotFoundError as e:
        raise InputError(f"missing file: {e.filename}") from e
    except (json.JSONDecodeError, KeyError, TypeError, IndexError) as e:
        raise InputError(f"malformed input {args[0]}: {e}") from e
    except ValueError as e:
        raise InputError(f"malformed input {args[0]}: {e}") from e


def _inputs(cfg):
    """(space, mapping, weights dict, scenario or None)."""
    from .numbers import load_mapping, load_weight
    from .scenarios import generate
    from .space import load_space
    if cfg.get("scenario"):
        try:
            sc = generate(cfg["scenario"], cfg.get("resolution"), cfg.get("scenario_params") or {})
        except ValueError as e:
            raise ParamError(str(e)) from e
        return sc.space, sc.mapping, dict(sc.weights), sc
    if not cfg.get("space"):
        raise InputError("either --scenario or --space is required")
    space = _load(load_space, cfg["space"])
    mapping = None
    if cfg.get("mapping"):
        target = _load(load_space, cfg["target"]) if cfg.get("target") else None
        mapping = _load(load_mapping, cfg["mapping"], space, target)
        if cfg.get("injective"):
            mapping.injective = True
    weights = {}
    if cfg.get("kappa"):
        weights["kappa"] = _load(load_weight, cfg["kappa"], space)
    if cfg.get("a"):
        w = _load(load_weight, cfg["a"], space)
        weights["a"] = np.ones(space.n) if w.density is None else w.density
    return space, mapping, weights, None


def _check_params(cfg):
    M, Q, p, eps = (cfg.get(k) for k in ("M", "Q", "p", "eps"))
    if M is not None and not M >= 1:
        raise ParamError("M must be >= 1")
    if Q is not None and not Q > 1:
        raise ParamError("Q must exceed 1")
    if p is not None and not p >= 1:
        raise ParamError("p must be >= 1")
    if p is not None and Q is not None and cfg.get("command") == "certify" and not p <= Q:
        raise ParamError("need 1 <= p <= Q")
    if eps is not None and not 0 < eps <= 1:
        raise ParamError("eps must lie in (0, 1]")
    for k in ("resolution", "beta", "R", "tol"):
        v = cfg.get(k)
        if v is not None and not v > 0:
            raise ParamError(f"{k} must be positive")
    r = cfg.get("radii")
    if r is not None and (len(r) < 1 or min(r) <= 0):
        raise ParamError("radii must be positive")


# ---------------------------------------------------------------- commands

def cmd_fields(cfg):
    from .numbers import KINDS, RadiusSchedule, RadonWeight, asymptotic_field, fields_to_csv
    space, mapping, weights, sc = _inputs(cfg)
    if mapping is None:
        raise InputError("fields needs a mapping")
    names = cfg.get("fields") or ["Lip", "H"]
    if isinstance(names, str):
        names = [s.strip() for s in names.split(",") if s.strip()]
    bad = [k for k in names if k not in KINDS]
    if bad:
        raise ParamError(f"unknown fields {bad}; choose from {list(KINDS)}")
    if cfg.get("radii"):
        try:
            sched = RadiusSchedule(np.array(sorted(cfg["radii"], reverse=True)), int(cfg.get("tail_length") or 3))
            sched.check(space)
        except ValueError as e:
            raise ParamError(str(e)) from e
    elif sc is not None:
        sched = sc.schedule
    else:
        from .scenarios import field_schedule
        sched = field_schedule(space)
    M, Q = float(cfg.get("M") or 1.0), float(cfg.get("Q") or 2.0)
    kappa = weights.get("kappa")
    if "a" in weights and kappa is None:
        kappa = RadonWeight(space, density=weights["a"])
    out = {}
    try:
        for k in names:
            kw = {}
            if k.endswith("generalized"):
                kw = {"weight": kappa, "M": M, "Q": Q}
            out[k] = asymptotic_field(mapping, k, sched, **kw)
    except ValueError as e:
        raise ParamError(str(e)) from e
    path = cfg.get("out") or "fields.csv"
    tmp = path + ".part"
    fields_to_csv(space, out, tmp)
    os.replace(tmp, path)
    for k, f in out.items():
        v = f.on()
        lo, hi = (float(v.min()), float(v.max())) if len(v) else (float("nan"),) * 2
        print(f"{k}: {len(v)} points, min {_fmt(lo)}, max {_fmt(hi)}, diverging {int(f.diverging.sum())}")
    print(f"wrote {path}")
    return EXIT_OK


def cmd_modulus(cfg):
    from .modulus import (CurveFamily, horizontal_family, load_family, modulus_report_csv,
                          p_modulus)
    space, _, _, _ = _inputs(cfg)
    if cfg.get("family"):
        fam = _load(load_family, space, cfg["family"])
    elif cfg.get("horizontal"):
        try:
            fam = horizontal_family(space)
        except ValueError as e:
            raise InputError(str(e)) from e
    else:
        fam = CurveFamily([], "empty")
    p = float(cfg.get("p") or 2.0)
    tol = float(cfg.get("tol") or 1e-7)
    budget = int(cfg.get("max_iter") or 20000)
    if not len(fam):
        print("warning: empty family, modulus 0", file=sys.stderr)
    try:
        res = p_modulus(space, fam, p, tol=tol, max_iter=budget)
    except ValueError as e:
        raise ParamError(str(e)) from e
    out_dir = cfg.get("out_dir") or "."
    os.makedirs(out_dir, exist_ok=True)
    rep = os.path.join(out_dir, "modulus.csv")
    dens = os.path.join(out_dir, "density.csv")
    modulus_report_csv(res, p, rep + ".part")
    lines = ["".join(f"x{i}," for i in range(space.dim)) + "rho"]
    for c, r in zip(space.coords, res.feasible_density):
        lines.append(",".join(_fmt(v) for v in c) + "," + _fmt(r))
    _atomic_write(dens, "\n".join(lines) + "\n")
    os.replace(rep + ".part", rep)
    print(f"value {_fmt(res.value)}  lower {_fmt(res.lower_bound)}  residual {_fmt(res.residual)}")
    print(f"density {dens}")
    if not res.converged:
        print(f"solver budget exhausted after {res.iterations} iterations; best feasible value reported",
              file=sys.stderr)
        return EXIT_BUDGET
    return EXIT_OK


def cmd_hausdorff(cfg):
    from .hausdorff import codim_content, dim_content, lemma37_pipeline
    space, _, _, _ = _inputs(cfg)
    if not cfg.get("set"):
        raise InputError("hausdorff needs --set (JSON list of point indices)")
    idx = _load(lambda pth: np.asarray(json.load(open(pth)), dtype=int), cfg["set"])
    if len(idx) and (idx.min() < 0 or idx.max() >= space.n):
        raise InputError("set index out of range")
    p = float(cfg.get("p") or 1.0)
    R = float(cfg.get("R") or 0.1)
    effort = int(cfg.get("effort") or 2)
    out = cfg.get("out") or "cover.json"
    try:
        if cfg.get("eps") is not None and cfg.get("pipeline"):
            res = lemma37_pipeline(space, idx, p, float(cfg["eps"]), effort=effort)
            d = {"energy": res.energy, "floor": res.floor,
                 "levels": [{"j": j, "cover": c.to_dict()} for j, c in res.levels],
                 "rho": res.rho.tolist()}
            print(f"density energy {_fmt(res.energy)}  curve floor {_fmt(res.floor)}")
        else:
            fn = dim_content if cfg.get("dimension") else codim_content
            res = fn(space, idx, p, R, effort)
            d = {"estimate": res.estimate, "cover": res.cover.to_dict()}
            print(f"content estimate {_fmt(res.estimate)} with {len(res.cover.centers)} balls")
    except ValueError as e:
        raise ParamError(str(e)) from e
    _atomic_write(out, json.dumps(d) + "\n")
    print(f"wrote {out}")
    return EXIT_OK


def cmd_certify(cfg):
    from .certify import certify
    space, mapping, weights, sc = _inputs(cfg)
    if mapping is None:
        raise InputError("certify needs a mapping")
    th = cfg.get("theorem") or "T4.1-BV"
    kw = {k: float(cfg[k]) for k in ("M", "Q", "p", "eps", "beta") if cfg.get(k) is not None}
    if cfg.get("levels"):
        kw["levels"] = cfg["levels"]
    if sc is not None and cfg.get("M") is None and sc.name in ("dirac-5.2", "separable-5.4"):
        kw["M"] = 2.0
    if sc is not None and sc.name == "strips-3.1" and not cfg.get("levels"):
        kw["levels"] = (8, 16, 32)
    weight = weights.get("kappa") if th == "T4.1-BV" else None
    a = weights.get("a") if th != "T4.1-BV" else None
    try:
        cert = certify(mapping, th, weight=weight, a=a, **kw)
    except ValueError as e:
        raise ParamError(str(e)) from e
    out = cfg.get("out") or "certificate.json"
    _atomic_write(out, cert.to_json() + "\n")
    print(cert.summary_text())
    print(f"wrote {out}")
    return EXIT_OK if cert.verdict == "PASS" else EXIT_FAIL


def cmd_reproduce(cfg):
    from .scenarios import reproduce
    try:
        res = reproduce(cfg["name"], cfg.get("resolution"), cfg.get("scenario_params") or {})
    except ValueError as e:
        raise ParamError(str(e)) from e
    print(res.summary())
    return EXIT_OK if res.passed else EXIT_FAIL


def cmd_generate(cfg):
    from .scenarios import generate, load_params, save_scenario
    name, res, params = cfg.get("name"), cfg.get("resolution"), cfg.get("scenario_params") or {}
    if cfg.get("params_file"):
        fname, fres, fparams = _load(load_params, cfg["params_file"])
        name = name or fname
        res = res if res is not None else fres
        params = {**fparams, **params}
    if not name:
        raise InputError("generate needs a scenario name or --params-file")
    try:
        sc = generate(name, res, params)
    except ValueError as e:
        raise ParamError(str(e)) from e
    paths = save_scenario(sc, cfg.get("out_dir") or sc.name)
    for k, v in paths.items():
        print(f"{k}: {v}")
    return EXIT_OK


COMMANDS = {"fields": cmd_fields, "modulus": cmd_modulus, "hausdorff": cmd_hausdorff,
            "certify": cmd_certify, "reproduce": cmd_reproduce, "generate": cmd_generate}


def _parser():
    ap = argparse.ArgumentParser(prog="metricbv", description="Sampled BV / Sobolev analysis of mappings")
    sub = ap.add_subparsers(dest="command", required=True)

    def common(s, mapping=True):
        s.add_argument("--config", help="JSON file with defaults; flags override it")
        s.add_argument("--scenario", help="use a generated scenario instead of input files")
        s.add_argument("--resolution", type=float)
        s.add_argument("--space")
        if mapping:
            s.add_argument("--mapping")
            s.add_argument("--target", help="sampled target space for the mapping")
            s.add_argument("--injective", action="store_true", default=None)
            s.add_argument("--kappa", help="Radon weight file")
            s.add_argument("--a", help="density file for a")
        s.add_argument("--seed", type=int)

    s = sub.add_parser("fields", help="pointwise Lipschitz and distortion numbers as CSV")
    common(s)
    s.add_argument("--fields", help="comma list of Lip,lip,H,h,Lip_generalized,H_generalized")
    s.add_argument("--radii", type=_floats, help="comma list of schedule radii")
    s.add_argument("--tail-length", dest="tail_length", type=int)
    s.add_argument("--M", type=float)
    s.add_argument("--Q", type=float)
    s.add_argument("--out")

    s = sub.add_parser("modulus", help="discrete p-modulus of a curve family")
    common(s, mapping=False)
    s.add_argument("--family")
    s.add_argument("--horizontal", action="store_true", default=None)
    s.add_argument("--p", type=float)
    s.add_argument("--tol", type=float)
    s.add_argument("--max-iter", dest="max_iter", type=int)
    s.add_argument("--out-dir", dest="out_dir")

    s = sub.add_parser("hausdorff", help="codimension-p content and null-set densities")
    common(s, mapping=False)
    s.add_argument("--set", help="JSON list of point indices")
    s.add_argument("--p", type=float)
    s.add_argument("--R", type=float)
    s.add_argument("--effort", type=int)
    s.add_argument("--dimension", action="store_true", default=None,
                   help="s-dimensional content (p is then the dimension s)")
    s.add_argument("--pipeline", action="store_true", default=None,
                   help="multi-level covers and admissible density with budget --eps")
    s.add_argument("--eps", type=float)
    s.add_argument("--out")

    s = sub.add_parser("certify", help="run a theorem's construction and write a certificate")
    common(s)
    s.add_argument("--theorem", choices=["T4.1-BV", "T4.2-Sobolev-Lip", "T4.3-Sobolev-H", "T4.3-p=Q"])
    for k in ("M", "Q", "p", "eps", "beta"):
        s.add_argument(f"--{k}", type=float)
    s.add_argument("--levels", type=_ints)
    s.add_argument("--out")

    s = sub.add_parser("reproduce", help="generate a worked example and compare its expectations")
    s.add_argument("name")
    s.add_argument("--resolution", type=float)
    s.add_argument("--config")

    s = sub.add_parser("generate", help="write a scenario's space, mapping and measures")
    s.add_argument("name", nargs="?")
    s.add_argument("--resolution", type=float)
    s.add_argument("--params-file", dest="params_file")
    s.add_argument("--out-dir", dest="out_dir")
    s.add_argument("--config")
    return ap


def _config(args):
    cfg = {}
    if getattr(args, "config", None):
        try:
            with open(args.config) as fh:
                cfg = json.load(fh)
        except FileNotFoundError as e:
            raise InputError(f"missing file: {args.config}") from e
        except json.JSONDecodeError as e:
            raise InputError(f"malformed config {args.config}: {e}") from e
        if not isinstance(cfg, dict):
            raise InputError("config must be a JSON object")
        cfg = {k.replace("-", "_"): v for k, v in cfg.items()}
        if "radii" in cfg:
            cfg["radii"] = _floats(cfg["radii"])
        if "levels" in cfg:
            cfg["levels"] = _ints(cfg["levels"])
    for k, v in vars(args).items():
        if v is not None:
            cfg[k] = v
    return cfg


def main(argv=None):
    args = _parser().parse_args(argv)
    try:
        cfg = _config(args)
        _check_params(cfg)
        if cfg.get("seed") is not None:
            np.random.seed(int(cfg["seed"]))
        return COMMANDS[args.command](cfg)
    except InputError as e:
        print(f"input error: {e}", file=sys.stderr)
        return EXIT_INPUT
    except ParamError as e:
        print(f"parameter error: {e}", file=sys.stderr)
        return EXIT_PARAM


if __name__ == "__main__":
    sys.exit(main())
