"""Configuration, persistence, manifests and the command line front end."""
from __future__ import annotations

import argparse
import configparser
import csv
import dataclasses
import hashlib
import io
import json
import math
import os
import sys
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import __version__
from .errors import ConfigError, CorruptFileError, HmflowError, MeshMismatchError

_SECTIONS = {
    "mesh": ("mesh_level",),
    "flow": ("dt_safety", "tension_tol", "tension_rel", "t_max", "step_max", "scheme"),
    "decomposition": ("eps1", "eps2", "lambda0", "lambda_bar", "alpha", "annulus_margin", "delta_bar",
                      "scale_floor", "max_cut_osc", "cut_tolerance", "decomp_tension_rel", "decomp_t_max",
                      "decomp_step_max"),
    "sweep": ("k", "mu_list", "d_exp", "a_max", "fit_starts"),
    "thresholds": ("slope_min", "slope_max", "band_max", "loj_band_max"),
    "run": ("seed", "out"),
}


@dataclass
class RunConfig:
    mesh_level: int = 5
    # flow
    dt_safety: float = 0.2
    tension_tol: float | None = None
    tension_rel: float = 1e-6
    t_max: float = 50.0
    step_max: int = 200000
    scheme: str = "explicit"
    # decomposition
    eps1: float = 0.5
    eps2: float = 1.5
    lambda0: float = 128.0
    lambda_bar: float = 4.0
    alpha: float = 1.0
    annulus_margin: float = 0.25
    delta_bar: float = 0.25
    scale_floor: float = 0.5
    max_cut_osc: float = 1.4
    cut_tolerance: float = 0.5
    decomp_tension_rel: float = 1e-5
    decomp_t_max: float = 1e4
    decomp_step_max: int = 400
    # sweep
    k: int = 2
    mu_list: tuple = (64.0, 128.0, 256.0, 512.0)
    d_exp: float = 0.2
    a_max: float = 0.3
    fit_starts: int = 16
    # strict-mode thresholds
    slope_min: float = -2.3
    slope_max: float = -1.9
    band_max: float = 3.0
    loj_band_max: float = 10.0
    # run
    seed: int = 0
    out: str = "out"

    def __post_init__(self):
        self.validate()

    def validate(self):
        if not 0 < self.delta_bar < 0.5:
            raise ConfigError(f"delta_bar must lie in (0, 1/2), got {self.delta_bar}")
        for name in ("dt_safety", "tension_rel", "t_max", "step_max", "eps1", "eps2", "lambda0", "lambda_bar",
                     "alpha", "scale_floor", "max_cut_osc", "decomp_tension_rel", "decomp_t_max", "fit_starts"):
            if not getattr(self, name) > 0:
                raise ConfigError(f"{name} must be positive")
        if self.tension_tol is not None and not self.tension_tol > 0:
            raise ConfigError("tension_tol must be positive")
        if not 0 < self.annulus_margin < 1:
            raise ConfigError("annulus_margin must lie in (0, 1)")
        if not 0 < self.scale_floor < 1:
            raise ConfigError("scale_floor must lie in (0, 1)")
        if self.lambda0 < 1:
            raise ConfigError("lambda0 must be >= 1")
        if self.scheme not in ("explicit", "semi-implicit"):
            raise ConfigError(f"unknown scheme {self.scheme}")
        if not 1 <= int(self.mesh_level) <= 8:
            raise ConfigError("mesh_level must lie in 1..8")
        self.mu_list = tuple(float(m) for m in self.mu_list)

    def replace(self, **kw):
        return dataclasses.replace(self, **kw)

    def as_dict(self):
        return dataclasses.asdict(self)


_FIELDS = {f.name: f for f in dataclasses.fields(RunConfig)}


def _parse_value(name, text, lineno):
    default = _FIELDS[name].default
    text = text.strip()
    try:
        if name == "tension_tol":
            return None if text.lower() in ("", "none") else float(text)
        if name == "mu_list":
            return tuple(float(t) for t in text.replace(",", " ").split())
        if isinstance(default, bool):
            return text.lower() in ("1", "true", "yes")
        if isinstance(default, int):
            return int(text)
        if isinstance(default, float):
            return float(text)
        return text
    except ValueError as exc:
        raise ConfigError(f"line {lineno}: bad value for {name}: {text!r}") from exc


def parse_config(text: str) -> RunConfig:
    """Parse 'key = value' text with optional [section] headers."""
    cp = configparser.ConfigParser(interpolation=None, delimiters=("=",), comment_prefixes=("#", ";"))
    cp.optionxform = str
    try:
        cp.read_string("[__top__]\n" + text)
    except configparser.Error as exc:
        line = getattr(exc, "lineno", None)
        where = f"line {line - 1}: " if line else ""
        raise ConfigError(f"{where}parse error: {exc.message if hasattr(exc, 'message') else exc}") from exc
    lines = text.splitlines()
    kw = {}
    for sec in cp.sections():
        if sec != "__top__" and sec not in _SECTIONS:
            raise ConfigError(f"unknown section [{sec}]")
        for key, val in cp.items(sec):
            if key not in _FIELDS:
                lineno = next((i + 1 for i, s in enumerate(lines) if s.split("=")[0].strip() == key), 0)
                raise ConfigError(f"line {lineno}: unknown key {key!r}")
            lineno = next((i + 1 for i, s in enumerate(lines) if s.split("=")[0].strip() == key), 0)
            kw[key] = _parse_value(key, val, lineno)
    return RunConfig(**kw)


def load_config(path) -> RunConfig:
    p = Path(path)
    if not p.exists():
        raise ConfigError(f"config file {p} does not exist")
    return parse_config(p.read_text())


def format_config(cfg: RunConfig) -> str:
    out = []
    d = cfg.as_dict()
    for sec, keys in _SECTIONS.items():
        out.append(f"[{sec}]")
        for k in keys:
            v = d[k]
            if v is None:
                s = "none"
            elif isinstance(v, tuple):
                s = ", ".join(repr(float(t)) for t in v)
            elif isinstance(v, float):
                s = repr(v)
            else:
                s = str(v)
            out.append(f"{k} = {s}")
        out.append("")
    return "\n".join(out)


def save_config(cfg: RunConfig, path):
    Path(path).write_text(format_config(cfg))


# ---------------------------------------------------------------- maps

def save_map(path, u):
    vals = np.asarray(u.values if hasattr(u, "values") else u)
    buf = io.StringIO()
    buf.write(f"hmflow-map v1 {len(vals)}\n")
    np.savetxt(buf, vals, fmt="%.17g")
    Path(path).write_text(buf.getvalue())


def load_map(path, mesh):
    from .map_calculus import DiscreteMap
    lines = Path(path).read_text().splitlines()
    if not lines:
        raise CorruptFileError(f"{path}: empty file")
    head = lines[0].split()
    if len(head) != 3 or head[0] != "hmflow-map" or head[1] != "v1":
        raise CorruptFileError(f"{path}: bad header {lines[0]!r}")
    n = int(head[2])
    if n != mesh.n_vertices:
        raise MeshMismatchError(f"{path}: {n} vertices, mesh has {mesh.n_vertices}")
    body = [s for s in lines[1:] if s.strip()]
    if len(body) != n:
        raise CorruptFileError(f"{path}: expected {n} rows, found {len(body)}")
    try:
        vals = np.array([[float(t) for t in s.split()] for s in body])
    except ValueError as exc:
        raise CorruptFileError(f"{path}: {exc}") from exc
    if vals.shape != (n, 3):
        raise CorruptFileError(f"{path}: rows must have 3 numbers")
    if np.max(np.abs(np.linalg.norm(vals, axis=1) - 1)) > 1e-8:
        raise CorruptFileError(f"{path}: values are not unit vectors")
    return DiscreteMap(vals, mesh)


def file_digest(path):
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def write_csv(path, header, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for r in rows:
            w.writerow([f"{float(r[h]):.17g}" for h in header])


@dataclass
class RunManifest:
    config: dict
    version: str = __version__
    mesh_hash: str | None = None
    timings: dict = field(default_factory=dict)
    files: dict = field(default_factory=dict)
    status: str = "ok"

    def add(self, path):
        self.files[str(Path(path).name)] = file_digest(path)

    def save(self, path):
        Path(path).write_text(json.dumps(dataclasses.asdict(self), indent=2, sort_keys=True, default=str) + "\n")


# ---------------------------------------------------------------- experiments

class _Stage:
    def __init__(self, manifest, name):
        self.manifest, self.name = manifest, name

    def __enter__(self):
        self.t0 = time.perf_counter()
        return self

    def __exit__(self, et, ev, tb):
        self.manifest.timings[self.name] = time.perf_counter() - self.t0
        if ev is not None and isinstance(ev, HmflowError) and not getattr(ev, "stage", None):
            ev.stage = self.name
        return False


def _parse_weights(text):
    from .sphere_geometry import MobiusDilation, normalize
    out = []
    if not text:
        return out
    for part in text.split(";"):
        nums = [float(t) for t in part.replace(",", " ").split()]
        if len(nums) != 4:
            raise ConfigError(f"weight entry {part!r} needs 'x,y,z,r'")
        out.append(MobiusDilation(normalize(np.array(nums[:3])), nums[3]))
    return out


def perturbed_identity(mesh, eps):
    """pi(z) plus eps times the lowest non-conformal mode, sup-normalized."""
    from .map_calculus import DiscreteMap
    from .sphere_geometry import normalize
    x = mesh.vertices
    w = np.column_stack([x[:, 1] + x[:, 2], x[:, 0] + x[:, 2], x[:, 0] + x[:, 1]])
    w -= np.einsum("ij,ij->i", w, x)[:, None] * x
    w /= np.max(np.linalg.norm(w, axis=1))
    return DiscreteMap(normalize(x + eps * w), mesh)


def _init_map(spec, mesh):
    from .map_calculus import DiscreteMap, RationalMap, sample_rational
    if spec.startswith("builtin:"):
        name, _, arg = spec[8:].partition(":")
        if name == "identity":
            return DiscreteMap.identity(mesh)
        if name == "perturbed":
            return perturbed_identity(mesh, float(arg or 0.05))
        if name == "power":
            return sample_rational(RationalMap.power(int(arg or 2)), mesh)
        raise ConfigError(f"unknown builtin map {name!r}")
    return load_map(spec, mesh)


def _mesh_for(args, cfg):
    from .sphere_geometry import build_icosphere, load_mesh
    if getattr(args, "mesh", None):
        return load_mesh(args.mesh)
    return build_icosphere(cfg.mesh_level)


def _band(vals):
    vals = np.asarray([v for v in vals if np.isfinite(v) and v > 0])
    return float(vals.max() / vals.min()) if len(vals) else float("inf")


def loj_table(res, metric_radii, delta_max=0.1, floor_factor=100.0):
    """Ratio rows (t, delta, tension^2, ratio) along a flow history.

    delta is measured from the energy where the tension is smallest (the
    discrete critical point the flow approaches).  Samples whose tension is
    within floor_factor of that minimum are dropped: there the residual is
    set by the mesh (slow Mobius drift of the discrete energy), not by the
    distance to the critical point.
    """
    E = np.asarray(res.history["E"])
    tau2 = np.asarray(res.history["tau2"])
    t = np.asarray(res.history["t"])
    i = int(np.argmin(tau2))
    e_ref, floor = E[i], tau2[i]
    lg = 1 + max(abs(math.log(r)) for r in metric_radii)
    rows = []
    for ti, Ei, si in zip(t[:i], E[:i], tau2[:i]):
        d = Ei - e_ref
        if 0 < d < delta_max and si >= floor_factor * floor:
            rows.append({"t": ti, "defect": d, "tension2": si, "ratio": d / (lg * si)})
    return rows


def run_experiment(name, cfg: RunConfig, args=None, strict=False) -> int:
    """Dispatch one verb; 0 ok, 1 module error, 2 threshold breach under strict."""
    args = args or argparse.Namespace()
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    man = RunManifest(cfg.as_dict())
    status = 0
    try:
        breach = _VERBS[name](cfg, args, out, man)
    except HmflowError as exc:
        stage = getattr(exc, "stage", name)
        print(f"error [{stage}] {type(exc).__name__}: {exc}", file=sys.stderr)
        man.status = f"error: {type(exc).__name__}"
        man.save(out / "manifest.json")
        return 1
    if breach:
        man.status = "threshold-breach: " + "; ".join(breach)
        print("threshold breach: " + "; ".join(breach), file=sys.stderr)
        if strict:
            status = 2
    man.save(out / "manifest.json")
    return status


def _verb_flow(cfg, args, out, man):
    from .sphere_geometry import save_mesh, weighted_metric
    from .weighted_flow import StopCriteria, run_flow, write_snapshots
    with _Stage(man, "mesh"):
        mesh = _mesh_for(args, cfg)
        man.mesh_hash = mesh.digest
    with _Stage(man, "init"):
        u0 = _init_map(getattr(args, "init", None) or "builtin:perturbed:0.05", mesh)
    dil = _parse_weights(getattr(args, "weights", None))
    metric = weighted_metric(dil)
    stop = StopCriteria(cfg.tension_tol, cfg.tension_rel, cfg.t_max, cfg.step_max, cfg.dt_safety)
    every = getattr(args, "snapshot_every", None)
    snap = out / "snapshots.ndjson"
    with _Stage(man, "flow"):
        if every:
            obs = write_snapshots(snap)
            try:
                res = run_flow(u0, metric, stop, cfg.scheme, snapshot_every=every, observer=obs)
            finally:
                obs.close()
        else:
            res = run_flow(u0, metric, stop, cfg.scheme)
    save_map(out / "map.txt", res.u)
    save_mesh(out / "mesh.txt", mesh)
    (out / "summary.json").write_text(json.dumps(res.summary(), indent=2, sort_keys=True) + "\n")
    for p in ("map.txt", "mesh.txt", "summary.json") + (("snapshots.ndjson",) if every else ()):
        man.add(out / p)
    print(f"flow: {res.reason} after {res.steps} steps, t={res.t:.6g}, E={res.defect_final:.6g} above 4pi|k|, "
          f"travel={res.travel:.6g}")
    return [] if res.converged else ["flow did not converge"]


def _verb_glue(cfg, args, out, man):
    from .sharp_family import GlueSpec, glue, glue_defect, glue_mesh
    from .sphere_geometry import save_mesh
    k = int(getattr(args, "k", None) or cfg.k)
    mu = float(getattr(args, "mu", None) or cfg.mu_list[0])
    a = float(getattr(args, "a", None) or 1.0 / mu)
    with _Stage(man, "glue"):
        spec = GlueSpec(k, mu, a, cfg.d_exp, cfg.a_max)
        mesh = glue_mesh(cfg.mesh_level, mu, k)
        man.mesh_hash = mesh.digest
        v = glue(spec, mesh)
        delta = glue_defect(spec, mesh, v)
    save_map(out / "map.txt", v)
    save_mesh(out / "mesh.txt", mesh)
    info = {"k": k, "mu": mu, "a": a, "defect": delta, "mesh_level": cfg.mesh_level}
    (out / "summary.json").write_text(json.dumps(info, indent=2, sort_keys=True) + "\n")
    for p in ("map.txt", "mesh.txt", "summary.json"):
        man.add(out / p)
    print(f"glue: k={k} mu={mu:g} a={a:.6g} defect={delta:.6e}")
    return []


def _verb_decompose(cfg, args, out, man):
    from .decomposition import bubble_decompose, verify_key_properties
    from .map_calculus import degree, dirichlet_energy
    inp = getattr(args, "input", None)
    if not inp:
        raise ConfigError("decompose needs --input MAP")
    mesh_path = getattr(args, "mesh", None) or (Path(inp).parent / "mesh.txt")
    from .sphere_geometry import build_icosphere, load_mesh
    with _Stage(man, "load"):
        mesh = load_mesh(mesh_path) if Path(mesh_path).exists() else build_icosphere(cfg.mesh_level)
        man.mesh_hash = mesh.digest
        v = load_map(inp, mesh)
    defect = getattr(args, "defect", None)
    summ = Path(inp).parent / "summary.json"
    if defect is None and summ.exists():
        defect = json.loads(summ.read_text()).get("defect")
    if defect is None:
        defect = max(dirichlet_energy(v) - 4 * math.pi * degree(v), 0.0)
    rng = np.random.default_rng(cfg.seed)
    with _Stage(man, "decompose"):
        dec = bubble_decompose(v, cfg, defect=defect, rng=rng)
    with _Stage(man, "verify"):
        rep = verify_key_properties(dec, v)
    (out / "decomposition.json").write_text(json.dumps(dec.to_dict(), indent=2, sort_keys=True) + "\n")
    (out / "report.json").write_text(json.dumps(_clean(rep), indent=2, sort_keys=True) + "\n")
    man.add(out / "decomposition.json")
    man.add(out / "report.json")
    print(f"decompose: {len(dec.components)} components, degrees {[c.degree for c in dec.components]}")
    breach = []
    if not (rep["disjoint"] and rep["covering"] and rep["degree_sum_ok"]):
        breach.append("partition or degree check failed")
    if not rep["bridge_ok"]:
        breach.append("bridge inequality failed")
    return breach


def _clean(o):
    if isinstance(o, dict):
        return {k: _clean(v) for k, v in o.items()}
    if isinstance(o, (list, tuple)):
        return [_clean(v) for v in o]
    if isinstance(o, (np.floating, np.integer, np.bool_)):
        return o.item()
    return o


def _workers(n):
    try:
        cap = int(os.environ.get("HMFLOW_THREADS", "1"))
    except ValueError:
        cap = 1
    return max(1, min(cap, n))


def sweep_fit(rows):
    """Slope of log delta vs log mu and the band of delta mu^2 log mu."""
    mu = np.array([r["mu"] for r in rows])
    d = np.array([r["defect"] for r in rows])
    slope = float(np.polyfit(np.log(mu), np.log(d), 1)[0]) if len(rows) > 1 else float("nan")
    return slope, _band(d * mu ** 2 * np.log(mu))


def _verb_sweep(cfg, args, out, man):
    from .sharp_family import sharpness_sweep, sweep_header
    k = int(getattr(args, "k", None) or cfg.k)
    mus = getattr(args, "mu", None)
    mus = [float(t) for t in mus.split(",")] if mus else list(cfg.mu_list)
    decompose = not getattr(args, "no_decompose", False)
    with _Stage(man, "sweep"):
        rows = sharpness_sweep(mus, k, cfg.mesh_level, cfg, _workers(len(mus)), decompose)
    path = out / "report.csv"
    write_csv(path, sweep_header(k), rows)
    man.add(path)
    slope, band = sweep_fit(rows)
    print(f"sweep: {len(rows)} points, slope {slope:.4f}, band {band:.3f}")
    breach = []
    if not cfg.slope_min <= slope <= cfg.slope_max:
        breach.append(f"slope {slope:.4f} outside [{cfg.slope_min}, {cfg.slope_max}]")
    if band > cfg.band_max:
        breach.append(f"defect band {band:.3f} above {cfg.band_max}")
    return breach


def _verb_loj(cfg, args, out, man):
    from .sphere_geometry import weighted_metric
    from .weighted_flow import StopCriteria, lojasiewicz_ratio, run_flow
    with _Stage(man, "mesh"):
        mesh = _mesh_for(args, cfg)
        man.mesh_hash = mesh.digest
    u0 = _init_map(getattr(args, "init", None) or "builtin:perturbed:0.05", mesh)
    dil = _parse_weights(getattr(args, "weights", None))
    metric = weighted_metric(dil)
    radii = [d.radius for d in dil] or [math.pi / 2]
    probe = lojasiewicz_ratio(u0, metric, radii)
    stop = StopCriteria(cfg.tension_tol, cfg.tension_rel, cfg.t_max, cfg.step_max, cfg.dt_safety)
    scheme = "semi-implicit" if dil else cfg.scheme
    with _Stage(man, "flow"):
        res = run_flow(u0, metric, stop, scheme)
    rows = loj_table(res, radii)
    path = out / "loj.csv"
    write_csv(path, ["t", "defect", "tension2", "ratio"], rows)
    man.add(path)
    flags = {"defect_positive": bool(probe.defect > 0), "smallness": bool(probe.admissible)}
    (out / "hypotheses.json").write_text(json.dumps(flags, indent=2, sort_keys=True) + "\n")
    man.add(out / "hypotheses.json")
    band = _band([r["ratio"] for r in rows])
    print(f"verify-loj: {len(rows)} rows, ratio band {band:.3f}, hypotheses {flags}")
    breach = []
    if band > cfg.loj_band_max:
        breach.append(f"ratio band {band:.3f} above {cfg.loj_band_max}")
    if not all(flags.values()):
        breach.append("hypothesis flag false")
    return breach


_VERBS = {"flow": _verb_flow, "glue": _verb_glue, "decompose": _verb_decompose, "sweep": _verb_sweep,
          "verify-loj": _verb_loj}


def build_parser():
    p = argparse.ArgumentParser(prog="hmflow", description="Weighted harmonic map flow and bubble decomposition")
    p.add_argument("--config", help="key = value config file")
    p.add_argument("--seed", type=int)
    p.add_argument("--strict", action="store_true", help="exit 2 when an acceptance threshold is breached")
    p.add_argument("--out", help="output directory")
    sub = p.add_subparsers(dest="verb", required=True)
    f = sub.add_parser("flow")
    f.add_argument("--mesh-level", type=int)
    f.add_argument("--mesh")
    f.add_argument("--init", default="builtin:perturbed:0.05")
    f.add_argument("--weights", help="x,y,z,r;... dilation weights")
    f.add_argument("--dt-safety", type=float)
    f.add_argument("--tension-tol", type=float)
    f.add_argument("--t-max", type=float)
    f.add_argument("--scheme", choices=["explicit", "semi-implicit"])
    f.add_argument("--snapshot-every", type=int)
    g = sub.add_parser("glue")
    g.add_argument("--k", type=int)
    g.add_argument("--mu", type=float)
    g.add_argument("--a", type=float)
    g.add_argument("--mesh-level", type=int)
    d = sub.add_parser("decompose")
    d.add_argument("--input", required=True)
    d.add_argument("--mesh")
    d.add_argument("--defect", type=float)
    for name in ("eps1", "eps2", "lambda0", "alpha"):
        d.add_argument(f"--{name}", type=float)
    s = sub.add_parser("sweep")
    s.add_argument("--k", type=int)
    s.add_argument("--mu", help="comma separated list")
    s.add_argument("--mesh-level", type=int)
    s.add_argument("--no-decompose", action="store_true")
    lo = sub.add_parser("verify-loj")
    lo.add_argument("--mesh-level", type=int)
    lo.add_argument("--mesh")
    lo.add_argument("--init", default="builtin:perturbed:0.05")
    lo.add_argument("--weights")
    lo.add_argument("--t-max", type=float)
    return p


_OVERRIDES = {"mesh_level": "mesh_level", "dt_safety": "dt_safety", "tension_tol": "tension_tol",
              "t_max": "t_max", "scheme": "scheme", "eps1": "eps1", "eps2": "eps2", "lambda0": "lambda0",
              "alpha": "alpha", "seed": "seed", "out": "out", "k": "k"}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = load_config(args.config) if args.config else RunConfig()
        kw = {f: getattr(args, a) for a, f in _OVERRIDES.items() if getattr(args, a, None) is not None}
        if args.verb == "sweep" and args.out and args.out.endswith(".csv"):
            kw["out"] = str(Path(args.out).parent)
        cfg = cfg.replace(**kw)
    except HmflowError as exc:
        print(f"error [config] {exc}", file=sys.stderr)
        return 1
    return run_experiment(args.verb, cfg, args, args.strict)


if __name__ == "__main__":
    sys.exit(main())
