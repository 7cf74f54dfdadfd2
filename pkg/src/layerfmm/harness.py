"""Command-line experiment harness.

Configuration is a flat text file of ``dotted.key = value`` lines (``#`` starts a
comment).  Recognised keys::

    stack.interfaces = 0.0, -1.5        # d_0 > d_1 > ...
    stack.eps        = 1.2, 0.8, 1.3
    stack.mu         = 1.0, 1.0, 1.0
    stack.omega      = 2.0
    particles.n      = 1000             # per layer
    particles.box0.center = 0.5, 0.5, 0.75
    particles.box0.side   = 1.0         # one box per layer, box<ℓ>
    run.mode         = convergence      # freespace|reaction|full|oracle|convergence|scaling
    run.p            = 4, 6, 8
    run.seed         = 0
    run.tolerance    = 1e-12            # quadrature relTol
    run.leafCapacity = 100
    run.oracleTargets = 30              # targets per layer checked against the oracle
    run.scalingN     = 1000, 10000
    run.out          = results.csv

``--config preset:NAME`` loads one of the built-in configurations in
``PRESETS`` instead of a file.

Particles are drawn with numpy's PCG64 generator seeded by ``run.seed``: for
each layer in order, N points uniform in its box followed by N complex
charges with independent standard normal real and imaginary parts.
"""
from __future__ import annotations

import argparse
import configparser
import csv
import logging
import math
import sys
import time
from dataclasses import dataclass, field, asdict
from typing import Optional

import numpy as np

from . import fmm_core as fc
from . import layered_fmm as lf
from . import layerstack as ls
from . import oracle as orc
from . import sommerfeld as sf

log = logging.getLogger("layerfmm")

MODES = ("freespace", "reaction", "full", "oracle", "convergence", "scaling")
EXIT_OK, EXIT_CONFIG, EXIT_QUADRATURE = 0, 2, 3


class ConfigError(ValueError):
    pass


PRESETS = {
    "two_layer": """
stack.interfaces = 0.0
stack.eps = 1.2, 0.8
stack.mu = 1.0, 1.0
stack.omega = 2.0
particles.n = 1000
particles.box0.center = 0.5, 0.5, 0.75
particles.box0.side = 1.0
particles.box1.center = 0.5, 0.5, -0.75
particles.box1.side = 1.0
run.mode = convergence
run.p = 4, 6, 8, 10, 12
""",
    "three_layer": """
stack.interfaces = 0.0, -1.5
stack.eps = 1.2, 0.8, 1.3
stack.mu = 1.0, 1.0, 1.0
stack.omega = 2.0
particles.n = 1000
particles.box0.center = 0.5, 0.5, 0.75
particles.box0.side = 1.0
particles.box1.center = 0.5, 0.5, -0.75
particles.box1.side = 1.0
particles.box2.center = 0.5, 0.5, -2.25
particles.box2.side = 1.0
run.mode = convergence
run.p = 4, 6, 8, 10, 12
""",
    "homogeneous": """
stack.interfaces = 0.0
stack.eps = 1.2, 1.2
stack.mu = 1.0, 1.0
stack.omega = 2.0
particles.n = 1000
particles.box0.center = 0.5, 0.5, 0.75
particles.box0.side = 1.0
particles.box1.center = 0.5, 0.5, -0.75
particles.box1.side = 1.0
run.mode = full
run.p = 8
""",
}


@dataclass
class ExperimentConfig:
    interfaces: tuple
    eps: tuple
    mu: tuple
    omega: float
    boxes: list                  # per layer (center (3,), side)
    n: int = 1000
    p: tuple = (4, 8, 12)
    seed: int = 0
    mode: str = "convergence"
    tolerance: float = 1e-12
    leafCapacity: int = 100
    oracleTargets: int = 30
    scalingN: tuple = (1000, 10000)
    out: str = "results.csv"

    def stack(self) -> ls.LayerStack:
        return ls.LayerStack(self.interfaces, self.eps, self.mu, self.omega)

    def spec(self) -> sf.QuadratureSpec:
        return sf.QuadratureSpec(relTol=self.tolerance)

    def validate(self):
        if self.mode not in MODES:
            raise ConfigError(f"run.mode: unknown mode {self.mode!r}; expected one of {', '.join(MODES)}")
        try:
            st = self.stack()
        except ValueError as exc:
            raise ConfigError(f"stack: {exc}") from exc
        if self.omega <= 0:
            raise ConfigError("stack.omega: must be positive")
        if len(self.boxes) != st.nlayers:
            raise ConfigError(f"particles: need box0..box{st.nlayers - 1}, got {len(self.boxes)} boxes")
        for l, (c, side) in enumerate(self.boxes):
            if side <= 0:
                raise ConfigError(f"particles.box{l}.side: must be positive")
            lo, hi = c[2] - side / 2, c[2] + side / 2
            top = st.d[l - 1] if l >= 1 else math.inf
            bot = st.d[l] if l < st.L else -math.inf
            if not (bot < lo and hi < top):
                raise ConfigError(f"particles.box{l}: z-range [{lo:g}, {hi:g}] not strictly inside layer {l}")
        if self.n < 1 or any(n < 1 for n in self.scalingN):
            raise ConfigError("particles.n / run.scalingN: must be positive")
        if any(p < 0 for p in self.p):
            raise ConfigError("run.p: truncation degrees must be non-negative")
        if not 0 < self.tolerance <= 1e-6:
            raise ConfigError("run.tolerance: must lie in (0, 1e-6]")
        if self.leafCapacity < 1 or self.oracleTargets < 1:
            raise ConfigError("run.leafCapacity / run.oracleTargets: must be positive")


def _floats(text, name):
    try:
        return tuple(float(x) for x in text.replace(";", ",").split(",") if x.strip())
    except ValueError as exc:
        raise ConfigError(f"{name}: expected numbers, got {text!r}") from exc


def _ints(text, name):
    vals = _floats(text, name)
    if any(v != int(v) for v in vals):
        raise ConfigError(f"{name}: expected integers, got {text!r}")
    return tuple(int(v) for v in vals)


def parse_config(text: str) -> ExperimentConfig:
    cp = configparser.ConfigParser(inline_comment_prefixes=("#",), interpolation=None)
    cp.optionxform = str
    try:
        cp.read_string("[root]\n" + text)
    except configparser.Error as exc:
        raise ConfigError(f"config syntax: {exc}") from exc
    kv = {k.lower(): v.strip() for k, v in cp["root"].items()}
    lines = {}
    for no, line in enumerate(text.splitlines(), 1):
        key = line.split("#", 1)[0].split("=", 1)[0].strip().lower()
        if key:
            lines.setdefault(key, no)

    def where(k):
        return f"line {lines[k]}: {k}" if k in lines else k

    known = {"stack.interfaces", "stack.eps", "stack.mu", "stack.omega", "particles.n", "run.mode", "run.p",
             "run.seed", "run.tolerance", "run.leafcapacity", "run.oracletargets", "run.scalingn", "run.out"}
    for k in kv:
        if k not in known and not (k.startswith("particles.box") and k.rsplit(".", 1)[-1] in ("center", "side")):
            raise ConfigError(f"{where(k)}: unknown key")
    for req in ("stack.interfaces", "stack.eps", "stack.mu", "stack.omega"):
        if req not in kv:
            raise ConfigError(f"{req}: missing")
    interfaces = _floats(kv["stack.interfaces"], where("stack.interfaces"))
    boxes = []
    l = 0
    while f"particles.box{l}.center" in kv:
        c = _floats(kv[f"particles.box{l}.center"], where(f"particles.box{l}.center"))
        if len(c) != 3:
            raise ConfigError(f"{where(f'particles.box{l}.center')}: need three coordinates")
        side = _floats(kv.get(f"particles.box{l}.side", "1.0"), where(f"particles.box{l}.side"))
        if len(side) != 1:
            raise ConfigError(f"particles.box{l}.side: need one number")
        boxes.append((np.array(c), side[0]))
        l += 1
    omega = _floats(kv["stack.omega"], where("stack.omega"))
    if len(omega) != 1:
        raise ConfigError("stack.omega: need one number")
    cfg = ExperimentConfig(
        interfaces=interfaces,
        eps=_floats(kv["stack.eps"], where("stack.eps")),
        mu=_floats(kv["stack.mu"], where("stack.mu")),
        omega=omega[0],
        boxes=boxes,
    )
    if "particles.n" in kv:
        cfg.n = _ints(kv["particles.n"], where("particles.n"))[0]
    if "run.p" in kv:
        cfg.p = _ints(kv["run.p"], where("run.p"))
    if "run.seed" in kv:
        cfg.seed = _ints(kv["run.seed"], where("run.seed"))[0]
    if "run.mode" in kv:
        cfg.mode = kv["run.mode"]
    if "run.tolerance" in kv:
        cfg.tolerance = _floats(kv["run.tolerance"], where("run.tolerance"))[0]
    if "run.leafcapacity" in kv:
        cfg.leafCapacity = _ints(kv["run.leafcapacity"], where("run.leafcapacity"))[0]
    if "run.oracletargets" in kv:
        cfg.oracleTargets = _ints(kv["run.oracletargets"], where("run.oracletargets"))[0]
    if "run.scalingn" in kv:
        cfg.scalingN = _ints(kv["run.scalingn"], where("run.scalingn"))
    if "run.out" in kv:
        cfg.out = kv["run.out"]
    return cfg


def load_config(path) -> ExperimentConfig:
    path = str(path)
    if path.startswith("preset:"):
        name = path[len("preset:"):]
        if name not in PRESETS:
            raise ConfigError(f"unknown preset {name!r}; available: {', '.join(PRESETS)}")
        return parse_config(PRESETS[name])
    try:
        with open(path, encoding="utf-8") as fh:
            return parse_config(fh.read())
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc


def generate_particles(cfg: ExperimentConfig, n: Optional[int] = None, seed: Optional[int] = None):
    rng = np.random.Generator(np.random.PCG64(cfg.seed if seed is None else seed))
    n = cfg.n if n is None else n
    pts, qs = [], []
    for c, side in cfg.boxes:
        pts.append(c + (rng.random((n, 3)) - 0.5) * side)
        qs.append(rng.standard_normal((n, 3)) + 1j * rng.standard_normal((n, 3)))
    return pts, qs


@dataclass
class MetricsRow:
    layer: int
    component: str
    p: Optional[int]
    N: int
    Err2: Optional[float]
    ErrMax: Optional[float]
    wallTime: float


CSV_FIELDS = [f for f in MetricsRow.__dataclass_fields__]


def errors(approx: np.ndarray, exact: np.ndarray) -> tuple[float, float]:
    num = np.linalg.norm(approx - exact, axis=1)
    den = np.linalg.norm(exact, axis=1)
    err2 = float(np.sqrt(np.sum(num**2) / np.sum(den**2))) if np.any(den) else float(np.linalg.norm(num))
    with np.errstate(divide="ignore", invalid="ignore"):
        rel = np.where(den > 0, num / np.where(den > 0, den, 1.0), num)
    return err2, float(rel.max())


def _timed(fn, *a, **kw):
    t0 = time.perf_counter()
    val = fn(*a, **kw)
    return val, time.perf_counter() - t0


def run(cfg: ExperimentConfig) -> list[MetricsRow]:
    cfg.validate()
    stack, spec = cfg.stack(), cfg.spec()
    rows: list[MetricsRow] = []
    if cfg.mode == "scaling":
        for n in cfg.scalingN:
            pts, qs = generate_particles(cfg, n)
            for p in cfg.p:
                res, wall = _timed(lf.evaluate_layered, stack, pts, qs, p, spec, cfg.leafCapacity)
                for l in range(stack.nlayers):
                    st = res.stats.get(f"free{l}")
                    rows.append(MetricsRow(l, "free", p, n, None, None, st.timings["total"] if st else 0.0))
                    rtime = 0.0
                    for key in ls.all_reaction_keys(stack):
                        if key.ell_s == l and key.label in res.stats:
                            t = res.stats[key.label].timings["total"]
                            rows.append(MetricsRow(l, key.label, p, n, None, None, t))
                            rtime += t
                    rows.append(MetricsRow(l, "reaction", p, n, None, None, rtime))
                rows.append(MetricsRow(-1, "total", p, n, None, None, wall))
                log.info("scaling N=%d p=%d done in %.1fs", n, p, wall)
        return rows

    pts, qs = generate_particles(cfg)
    sel_rng = np.random.Generator(np.random.PCG64(cfg.seed + 1))
    ids = [np.sort(sel_rng.choice(len(x), min(cfg.oracleTargets, len(x)), replace=False)) for x in pts]
    want_reaction = cfg.mode != "freespace"
    ref, t_ref = _timed(orc.direct_layered, stack, pts, qs, ids, spec, want_reaction)
    if cfg.mode == "oracle":
        for l, r in enumerate(ref):
            rows.append(MetricsRow(l, "oracle", None, cfg.n, None, None, t_ref))
        return rows
    components = {"freespace": "free", "reaction": "reaction"}.get(cfg.mode, "all")
    plist = cfg.p if cfg.mode == "convergence" else cfg.p[-1:]
    for p in plist:
        res, wall = _timed(lf.evaluate_layered, stack, pts, qs, p, spec, cfg.leafCapacity, components)
        for l in range(stack.nlayers):
            exact = ref[l].perComponent
            if components in ("all", "free"):
                e2, em = errors(res.free[l][ids[l]], exact["free"])
                rows.append(MetricsRow(l, "free", p, cfg.n, e2, em, res.stats[f"free{l}"].timings["total"]))
            if components in ("all", "reaction"):
                tot_a = np.zeros((len(ids[l]), 3), dtype=complex)
                tot_e = np.zeros_like(tot_a)
                rt = 0.0
                for lab, val in res.reaction.items():
                    if lab in exact:
                        e2, em = errors(val[ids[l]], exact[lab])
                        rows.append(MetricsRow(l, lab, p, cfg.n, e2, em, res.stats[lab].timings["total"]))
                        tot_a += val[ids[l]]
                        tot_e += exact[lab]
                        rt += res.stats[lab].timings["total"]
                if np.any(tot_e):
                    e2, em = errors(tot_a, tot_e)
                    rows.append(MetricsRow(l, "reaction", p, cfg.n, e2, em, rt))
            if components == "all":
                e2, em = errors(res.phi[l][ids[l]], ref[l].phi)
                rows.append(MetricsRow(l, "total", p, cfg.n, e2, em, wall))
        log.info("p=%d done in %.1fs", p, wall)
    return rows


def write_csv(rows: list[MetricsRow], path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.DictWriter(fh, fieldnames=CSV_FIELDS)
        w.writeheader()
        for r in rows:
            d = asdict(r)
            for k in ("Err2", "ErrMax"):
                d[k] = "" if d[k] is None else f"{d[k]:.6e}"
            d["p"] = "" if d["p"] is None else d["p"]
            d["wallTime"] = f"{d['wallTime']:.4f}"
            w.writerow(d)


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="layerfmm", description="Layered-media dyadic FMM experiments")
    ap.add_argument("--config", required=True, help="flat dotted-key config file")
    ap.add_argument("--mode", choices=MODES, help="override run.mode")
    ap.add_argument("--p", help="comma-separated truncation degrees (overrides run.p)")
    ap.add_argument("--n", type=int, help="particles per layer (overrides particles.n)")
    ap.add_argument("--seed", type=int, help="RNG seed (overrides run.seed)")
    ap.add_argument("--out", help="CSV output path (overrides run.out)")
    ap.add_argument("--tolerance", type=float, help="quadrature relTol (overrides run.tolerance)")
    ap.add_argument("--threads", type=int, default=1, help="BLAS thread cap")
    ap.add_argument("-v", "--verbose", action="store_true")
    return ap


def _limit_threads(n: int) -> None:
    try:
        from threadpoolctl import threadpool_limits
    except ImportError:
        log.debug("threadpoolctl unavailable; --threads ignored")
        return
    threadpool_limits(n)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    try:
        cfg = load_config(args.config)
        if args.mode:
            cfg.mode = args.mode
        if args.p:
            cfg.p = _ints(args.p, "--p")
        if args.n is not None:
            cfg.n = args.n
            cfg.scalingN = (args.n,)
        if args.seed is not None:
            cfg.seed = args.seed
        if args.out:
            cfg.out = args.out
        if args.tolerance is not None:
            cfg.tolerance = args.tolerance
        if args.threads < 1:
            raise ConfigError("--threads: must be positive")
        _limit_threads(args.threads)
        cfg.validate()
        rows = run(cfg)
        write_csv(rows, cfg.out)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except sf.NonConvergence as exc:
        print(f"quadrature error: {exc}", file=sys.stderr)
        return EXIT_QUADRATURE
    print(f"wrote {len(rows)} rows to {cfg.out}")
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
