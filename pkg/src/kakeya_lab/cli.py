"""Command line interface: gen, eval, decompose, verify, sweep.

Options may also come from a flat key=value config file (--config); flags
given on the command line override it.  Exit status is 0 iff every
requested check passes.
"""

import argparse
import math
import os
import sys

import numpy as np

from . import family_gen as fg
from . import multiscale as ms
from . import verify as vf
from .functional import DEFAULT_BUDGET, integrate, restricted_tube_count
from .geometry import cube

CHECKS = ("lw", "cord", "gtem", "induction", "remark")
KINDS = ("uniform", "dense", "hotspot", "structured", "lw")


class UsageError(Exception):
    pass


# --- argument parsing -------------------------------------------------------------

def int_range(text):
    """'3' -> [3]; '1..5' -> [1, 2, 3, 4, 5]; '0,2' -> [0, 2]."""
    out = []
    for part in str(text).split(","):
        if ".." in part:
            a, b = part.split("..", 1)
            a, b = int(a), int(b)
            if b < a:
                raise argparse.ArgumentTypeError(f"empty range {part!r}")
            out.extend(range(a, b + 1))
        else:
            out.append(int(part))
    return out


def int_triple(text):
    vals = [int(x) for x in str(text).split(",")]
    if len(vals) != 3:
        raise argparse.ArgumentTypeError("expected three comma-separated integers")
    return tuple(vals)


def _shared(p):
    p.add_argument("--config", help="flat key=value config file")
    p.add_argument("--seed", type=int)
    p.add_argument("--grid-h", type=float)
    p.add_argument("--voxel-budget", type=int)
    p.add_argument("--out")
    p.add_argument("--format", choices=("csv", "text"))


def build_parser():
    ap = argparse.ArgumentParser(prog="kakeya-lab", description=__doc__.splitlines()[0])
    sub = ap.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen", help="generate an arrangement file")
    _shared(g)
    g.add_argument("--kind", choices=KINDS)
    g.add_argument("--r", type=int)
    g.add_argument("--j", type=int)
    g.add_argument("--t", type=int)
    g.add_argument("--epsilon", type=float)
    g.add_argument("--counts", type=int_triple)
    g.add_argument("--R", type=float)
    g.add_argument("--hotspots", type=int)
    g.add_argument("--N", type=int, help="LW pack side")
    g.add_argument("--theta", type=float, help="LW pack wedge (shears the third family)")

    for name, hlp in (("eval", "evaluate the trilinear integral over Q_R"),
                      ("decompose", "density profile and B-set dump"),
                      ("verify", "run inequality checks")):
        p = sub.add_parser(name, help=hlp)
        _shared(p)
        p.add_argument("arrangement")
        p.add_argument("--R", type=float)
        p.add_argument("--epsilon", type=float)
        if name in ("decompose", "verify"):
            p.add_argument("--s0", type=int)
        if name == "verify":
            p.add_argument("--check", help="comma-separated subset of " + ",".join(CHECKS))
            p.add_argument("--C", type=float)
            p.add_argument("--ceiling", type=float)
            p.add_argument("--lambda", dest="lam", type=int)

    s = sub.add_parser("sweep", help="theta-scaling sweep")
    _shared(s)
    s.add_argument("--j", type=int_range)
    s.add_argument("--r", type=int_range)
    s.add_argument("--t", type=int_range)
    s.add_argument("--trials", type=int)
    return ap


DEFAULTS = {
    "seed": 0, "grid_h": 0.25, "voxel_budget": DEFAULT_BUDGET, "out": None, "format": "text",
    "kind": "uniform", "r": None, "j": None, "t": None, "epsilon": 0.5, "counts": (40, 40, 40),
    "R": None, "hotspots": 8, "N": 8, "theta": None, "s0": 1, "check": "lw",
    "C": 4.0, "ceiling": None, "lam": 1, "trials": 3,
}
_CONVERT = {"seed": int, "grid_h": float, "voxel_budget": int, "epsilon": float,
            "counts": int_triple, "R": float, "hotspots": int, "N": int, "theta": float,
            "s0": int, "C": float, "ceiling": float, "lam": int, "trials": int}


def read_config(path, allowed):
    """Flat key=value file; '#' starts a comment; unknown keys rejected."""
    out = {}
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise UsageError(f"{path}:{lineno}: expected key=value")
            k, v = (x.strip() for x in line.split("=", 1))
            key = {"lambda": "lam"}.get(k.replace("-", "_"), k.replace("-", "_"))
            if key not in allowed:
                raise UsageError(f"{path}:{lineno}: unknown key {k!r}")
            out[key] = v
    return out


def resolve(args):
    """Merge defaults < config file < command line flags, validating ranges."""
    given = {k: v for k, v in vars(args).items() if k not in ("command", "config")}
    allowed = set(given) - {"arrangement"}
    cfg = read_config(args.config, allowed) if args.config else {}
    conf = {}
    for k in given:
        if given[k] is not None:
            conf[k] = given[k]
        elif k in cfg:
            raw = cfg[k]
            try:
                if k in ("j", "r", "t") and args.command == "sweep":
                    conf[k] = int_range(raw)
                elif k in ("j", "r", "t"):
                    conf[k] = int(raw)
                else:
                    conf[k] = _CONVERT.get(k, str)(raw)
            except (ValueError, argparse.ArgumentTypeError) as e:
                raise UsageError(f"config key {k}: {e}") from None
        else:
            conf[k] = DEFAULTS.get(k)
    if conf.get("grid_h") is not None and not conf["grid_h"] > 0:
        raise UsageError("--grid-h must be positive")
    if conf.get("voxel_budget") is not None and conf["voxel_budget"] < 1:
        raise UsageError("--voxel-budget must be positive")
    if conf.get("R") is not None and not conf["R"] > 0:
        raise UsageError("--R must be positive")
    if conf.get("trials") is not None and conf["trials"] < 1:
        raise UsageError("--trials must be at least 1")
    if conf.get("counts") is not None and min(conf["counts"]) < 0:
        raise UsageError("--counts must be non-negative")
    if conf.get("format") not in (None, "csv", "text"):
        raise UsageError("--format must be csv or text")
    return conf


def threads():
    raw = os.environ.get("KAKEYA_LAB_THREADS", "1")
    try:
        n = int(raw)
    except ValueError:
        raise UsageError(f"KAKEYA_LAB_THREADS must be an integer, got {raw!r}") from None
    if n < 1:
        raise UsageError("KAKEYA_LAB_THREADS must be at least 1")
    return n


# --- helpers ------------------------------------------------------------------------

def _emit(text, out):
    if out:
        with open(out, "w", newline="\n") as fh:
            fh.write(text)
    else:
        sys.stdout.write(text)


def _csv_table(header, rows):
    def cell(v):
        return f"{v:.10g}" if isinstance(v, float) else str(v)
    return "\n".join([",".join(header)] + [",".join(cell(v) for v in row) for row in rows]) + "\n"


def _params(conf):
    for k in ("r", "j", "t"):
        if conf[k] is None:
            raise UsageError(f"--{k} is required")
    return fg.TypeParams(conf["r"], conf["j"], conf["t"], epsilon=conf["epsilon"])


def _load(conf):
    f = fg.read_arrangement(conf["arrangement"])
    R = conf["R"] if conf["R"] is not None else f.meta.get("R")
    if R is None:
        raise UsageError("arrangement has no R; pass --R")
    return f, float(R)


# --- commands -----------------------------------------------------------------------

def cmd_gen(conf):
    kind, seed = conf["kind"], conf["seed"]
    if kind == "lw":
        if conf["theta"] is None or conf["theta"] == 1:
            f, _ = vf.lw_pack(conf["N"])
        else:
            f, _ = vf.sheared_pack(conf["N"], conf["theta"])
        f.meta["seed"] = seed
        cert_text = "certificate: not applicable (fixed-direction pack)"
    else:
        params = _params(conf)
        R = conf["R"] if conf["R"] is not None else 2.0 ** (params.j + params.t + 1)
        if kind == "uniform":
            f = fg.sample_family(params, conf["counts"], R, seed)
        elif kind == "dense":
            f = vf.dense_family(params, conf["counts"], R, seed)
        elif kind == "hotspot":
            f = vf.hotspot_family(params, conf["hotspots"], R, seed)
        else:
            f, _, _ = vf.structured_pack(params, seed)
            f.meta["R"] = R
        c = fg.certify(f, seed=seed)
        cert_text = (f"certificate: {'PASS' if c.passed else 'FAIL'} theta={c.theta:.6g} "
                     f"min_wedge={c.min_wedge:.6g} max_wedge={c.max_wedge:.6g} "
                     f"triples={c.sampled_triples}")
    if not conf["out"]:
        raise UsageError("gen needs --out")
    fg.write_arrangement(f, conf["out"])
    print(f"wrote {sum(f.sizes)} tubes {f.sizes} to {conf['out']}")
    print(cert_text)
    return 0


def cmd_eval(conf):
    f, R = _load(conf)
    box = cube(R)
    sizes = restricted_tube_count(f, box)
    res = integrate(f, box, h=conf["grid_h"], budget=conf["voxel_budget"])
    norm = math.prod(sizes) ** 0.5
    ratio = res.value / norm if norm > 0 else 0.0
    theta = f.theta if f.theta is not None else float("nan")
    rows = [("lhs", res.value), ("normalizer", norm), ("ratio", ratio),
            ("ratio_theta_half", ratio * theta ** 0.5), ("theta", theta), ("R", R),
            ("grid_h", conf["grid_h"]), ("tubes", ";".join(map(str, sizes)))]
    if conf["format"] == "csv":
        text = _csv_table([k for k, _ in rows], [[v for _, v in rows]])
    else:
        text = "".join(f"{k}: {v:.10g}\n" if isinstance(v, float) else f"{k}: {v}\n" for k, v in rows)
    _emit(text, conf["out"])
    return 0


def _decompose(f, R, conf):
    if f.params is None:
        raise UsageError("decompose needs an arrangement with type parameters")
    sch = ms.build_schedule(f.params, R, conf["epsilon"])
    bs, prof = ms.build_Bsets(f, sch, s0=1)
    return sch, bs, prof


def cmd_decompose(conf):
    f, R = _load(conf)
    sch, bs, prof = _decompose(f, R, conf)
    text = ms.profile_csv(prof) if conf["format"] == "csv" else ms.profile_text(prof)
    if prof.truncated:
        sys.stderr.write(f"warning: truncated schedule ({prof.truncated})\n")
        if conf["format"] == "csv":
            text += f"# warning,truncated,{prof.truncated}\n"
    s0 = conf["s0"]
    if not 1 <= s0 <= sch.S:
        raise UsageError(f"--s0 must lie in [1, {sch.S}]")
    if conf["out"]:
        _emit(text, conf["out"])
        dump = conf["out"] + ".bsets.csv"
        rows = []
        if bs is not None:
            B = bs.region(s0)
            keys = ms.unpack(B.packed)
            cen = bs.lattice.centers(B.exps, keys)
            rows = [(int(k[0]), int(k[1]), int(k[2]), *map(float, c)) for k, c in zip(keys, cen)]
            exps = B.exps
        else:
            exps = (0, 0, 0)
        hdr = f"# s0={s0} exponents={','.join(map(str, exps))}\n"
        _emit(hdr + _csv_table(("k1", "k2", "k3", "x", "y", "z"), rows), dump)
        print(f"wrote profile to {conf['out']} and B-set cells to {dump}")
    else:
        _emit(text, None)
    return 0


def cmd_verify(conf):
    f, R = _load(conf)
    checks = [c.strip() for c in conf["check"].split(",") if c.strip()]
    bad = [c for c in checks if c not in CHECKS]
    if bad:
        raise UsageError(f"unknown check(s): {', '.join(bad)}")
    h, budget = conf["grid_h"], conf["voxel_budget"]
    reports = []
    need_ms = any(c in ("cord", "gtem", "remark") for c in checks)
    if need_ms:
        sch, bs, prof = _decompose(f, R, conf)
    for c in checks:
        if c == "lw":
            ceil = conf["ceiling"] or vf.LEMMA_CEILING
            reports.append(vf.check_loomis_whitney(f, cube(R), h=h, ceiling=ceil, budget=budget))
        elif c == "cord":
            if bs is None:
                rep = vf.CheckReport("cord", 0.0, 0.0, 0.0, True, notes=[f"vacuous: {prof.truncated}"])
                reports.append(rep)
                continue
            for s in range(1, sch.S):
                reports.append(vf.check_cord(prof, s, f, bs, h=max(h, 0.5),
                                             ceiling=conf["ceiling"] or vf.LEMMA_CEILING))
                reports[-1].name = f"cord[s={s}]"
        elif c == "gtem":
            reports.append(vf.check_gtem(f, sch, C=conf["C"], h=h, ceiling=conf["ceiling"] or 1.0,
                                         budget=budget, bsets=bs, profile=prof))
        elif c == "remark":
            if bs is None:
                reports.append(vf.CheckReport("remark", 0.0, 0.0, 0.0, True,
                                              notes=[f"vacuous: {prof.truncated}"]))
                continue
            lhs, rhs = vf.remark_product(prof)
            rep = vf._report("remark", lhs, rhs, 1.0, details={"cap_violations": len(prof.cap_violations())})
            rep.passed &= not prof.cap_violations()
            reports.append(rep)
        elif c == "induction":
            for s in (0, 1, 2):
                rep = vf.check_induction_step(f, s, conf["lam"], h=max(h, 0.5), R=R,
                                              ceiling=conf["ceiling"] or 4.0, budget=budget)
                rep.name = f"induction[s={s}]"
                reports.append(rep)
    for rep in reports:
        rep.seed = f.meta.get("seed")
    if conf["format"] == "csv":
        rows = [(r.name, r.lhs, r.rhs, r.implied_constant, r.ceiling, int(r.passed)) for r in reports]
        text = _csv_table(("check", "lhs", "rhs", "implied_constant", "ceiling", "pass"), rows)
    else:
        text = "\n".join(r.text() for r in reports) + "\n"
    _emit(text, conf["out"])
    return 0 if all(r.passed for r in reports) else 1


def cmd_sweep(conf):
    for k, lo, hi in (("j", 0, 20), ("r", 0, 20), ("t", 0, 20)):
        if conf[k] is None:
            raise UsageError(f"--{k} is required")
        if min(conf[k]) < lo or max(conf[k]) > hi:
            raise UsageError(f"--{k} values must lie in [{lo}, {hi}]")
    res = vf.sweep_theta(conf["j"], conf["r"], conf["t"], conf["trials"], conf["seed"],
                         h=conf["grid_h"], budget=conf["voxel_budget"], workers=threads())
    if conf["format"] == "csv":
        text = res.csv() + res.fit_line() + "\n"
    else:
        lines = [f"r={r['r']} j={r['j']} t={r['t']} theta={r['theta']:.6g} ratio={r['ratio']:.6g} "
                 f"ratio*theta^1/2={r['ratio'] * r['theta'] ** 0.5:.6g}" for r in res.rows]
        text = "\n".join(lines + [res.fit_line()]) + "\n"
    for gap in res.gaps:
        sys.stderr.write(f"gap: r={gap['r']} j={gap['j']} t={gap['t']} trial={gap['trial']}: {gap['reason']}\n")
    _emit(text, conf["out"])
    return 0


COMMANDS = {"gen": cmd_gen, "eval": cmd_eval, "decompose": cmd_decompose,
            "verify": cmd_verify, "sweep": cmd_sweep}


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        conf = resolve(args)
        threads()
        return COMMANDS[args.command](conf)
    except (UsageError, ValueError, MemoryError, OSError) as e:
        sys.stderr.write(f"error: {e}\n")
        return 2


if __name__ == "__main__":
    sys.exit(main())
