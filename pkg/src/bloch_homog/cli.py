"""Command-line job runner.

A job file uses the same ``key = value`` grammar as a medium file.  It names
the job kind and either points at a medium file (``medium = path``) or
carries the medium keys inline::

    job = effective
    medium = chessboard.cfg
    apex = [0, 0]
    branch = 1
    direction = [1, 0]
    eps = {min=1e-3, max=1e-1, count=10}
    compare = 1

Every job writes its tables as CSV, a JSON document, an SVG plot and a
``manifest.json`` listing each file with its SHA-256.  Floats are written
with 17 significant digits and nothing time-dependent is recorded, so
re-running a job reproduces the files byte for byte.
"""
from __future__ import annotations

import argparse
import hashlib
import json
import math
import sys
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import bloch, effective, greens
from .cell_problems import SolvabilityError
from .medium import (MEDIUM_KEYS, ChainSpec, ConfigError, GeometryError, medium_from_pairs,
                     parse_config)

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC = 0, 2, 3

JOB_KINDS = ("bands", "effective", "degenerate", "cluster", "greens", "dirac-scan")
JOB_KEYS = {"job", "medium", "path", "samples", "bands", "apex", "branch", "direction",
            "directions", "eps", "order", "compare", "anchor", "kappa", "omega", "source",
            "line", "cutoff", "tol", "cluster_window", "margin"}

NUMERIC_ERRORS = (SolvabilityError, greens.GapError, greens.QuadratureError,
                  greens.AnisotropyError, effective.DegenerateEigenvalueError,
                  effective.UnsupportedRankError, effective.ResonanceError,
                  effective.EmptyClusterError, bloch.GaugeError, bloch.ConditioningError,
                  np.linalg.LinAlgError, FloatingPointError)


@dataclass
class JobSpec:
    kind: str
    medium: object
    params: dict
    cutoff: int = 16
    tol: float = 1e-8
    cluster_window: float = 10.0
    out: Path = Path("out")


@dataclass
class Manifest:
    out: Path
    files: dict = field(default_factory=dict)

    def add(self, name: str, data: bytes):
        (self.out / name).write_bytes(data)
        self.files[name] = hashlib.sha256(data).hexdigest()

    def write(self, job: JobSpec):
        doc = {"job": job.kind, "files": [{"name": k, "sha256": v}
                                          for k, v in sorted(self.files.items())]}
        (self.out / "manifest.json").write_bytes(dumps(doc))


# ---------------------------------------------------------------- formatting


def fmt(x) -> str:
    """17-significant-digit text for a real number (``nan`` for missing)."""
    x = float(x)
    if math.isnan(x):
        return "nan"
    if math.isinf(x):
        return "inf" if x > 0 else "-inf"
    return f"{x:.17g}"


def _json(obj, indent=0) -> str:
    pad = "  " * (indent + 1)
    end = "  " * indent
    if isinstance(obj, dict):
        if not obj:
            return "{}"
        items = [f"{pad}{json.dumps(str(k))}: {_json(v, indent + 1)}" for k, v in sorted(obj.items())]
        return "{\n" + ",\n".join(items) + "\n" + end + "}"
    if isinstance(obj, (list, tuple)):
        if not obj:
            return "[]"
        if all(not isinstance(v, (dict, list, tuple)) for v in obj):
            return "[" + ", ".join(_json(v) for v in obj) + "]"
        return "[\n" + ",\n".join(pad + _json(v, indent + 1) for v in obj) + "\n" + end + "]"
    if isinstance(obj, np.ndarray):
        return _json(obj.tolist(), indent)
    if isinstance(obj, (bool, np.bool_)):
        return "true" if obj else "false"
    if obj is None:
        return "null"
    if isinstance(obj, (int, np.integer)):
        return str(int(obj))
    if isinstance(obj, (float, np.floating)):
        v = float(obj)
        return fmt(v) if math.isfinite(v) else json.dumps(fmt(v))
    if isinstance(obj, complex):
        return _json({"re": obj.real, "im": obj.imag}, indent)
    return json.dumps(str(obj))


def dumps(obj) -> bytes:
    """Deterministic JSON: sorted keys, 17-digit floats, trailing newline."""
    return (_json(obj) + "\n").encode()


def csv_bytes(header, rows) -> bytes:
    lines = [",".join(header)]
    for row in rows:
        lines.append(",".join(v if isinstance(v, str) else fmt(v) for v in row))
    return ("\n".join(lines) + "\n").encode()


def _real(a):
    a = np.asarray(a)
    if np.iscomplexobj(a):
        return {"re": np.real(a).tolist(), "im": np.imag(a).tolist()}
    return a.tolist()


# ---------------------------------------------------------------- SVG


def svg_lines(series, xlabel="", ylabel="", title="", width=640, height=420) -> bytes:
    """Static line chart.  `series` is a list of ``(label, x, y, style)``; style
    ``"line"`` draws a polyline, ``"o"`` or ``"x"`` draws markers."""
    xs = np.concatenate([np.asarray(s[1], float) for s in series])
    ys = np.concatenate([np.asarray(s[2], float) for s in series])
    ok = np.isfinite(xs) & np.isfinite(ys)
    x0, x1 = (xs[ok].min(), xs[ok].max()) if ok.any() else (0.0, 1.0)
    y0, y1 = (ys[ok].min(), ys[ok].max()) if ok.any() else (0.0, 1.0)
    if x1 == x0:
        x1 = x0 + 1.0
    if y1 == y0:
        y1 = y0 + 1.0
    ml, mr, mt, mb = 70, 20, 30, 50
    pw, ph = width - ml - mr, height - mt - mb

    def px(x):
        return ml + (x - x0) / (x1 - x0) * pw

    def py(y):
        return mt + (1 - (y - y0) / (y1 - y0)) * ph

    colors = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b", "#17becf"]
    out = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
           f'font-family="sans-serif" font-size="12">',
           f'<rect x="{ml}" y="{mt}" width="{pw}" height="{ph}" fill="none" stroke="black"/>',
           f'<text x="{ml + pw / 2:.1f}" y="{height - 12}" text-anchor="middle">{xlabel}</text>',
           f'<text x="16" y="{mt + ph / 2:.1f}" transform="rotate(-90 16 {mt + ph / 2:.1f})" '
           f'text-anchor="middle">{ylabel}</text>',
           f'<text x="{ml + pw / 2:.1f}" y="18" text-anchor="middle">{title}</text>']
    for t in np.linspace(0, 1, 5):
        xv, yv = x0 + t * (x1 - x0), y0 + t * (y1 - y0)
        out.append(f'<text x="{px(xv):.1f}" y="{mt + ph + 16}" text-anchor="middle">{xv:.4g}</text>')
        out.append(f'<text x="{ml - 6}" y="{py(yv) + 4:.1f}" text-anchor="end">{yv:.4g}</text>')
    for i, (label, x, y, style) in enumerate(series):
        c = colors[i % len(colors)]
        pts = [(px(a), py(b)) for a, b in zip(np.asarray(x, float), np.asarray(y, float))
               if np.isfinite(a) and np.isfinite(b)]
        if style == "line":
            if len(pts) > 1:
                d = " ".join(f"{a:.2f},{b:.2f}" for a, b in pts)
                out.append(f'<polyline points="{d}" fill="none" stroke="{c}" stroke-width="1.5"/>')
        elif style == "o":
            out += [f'<circle cx="{a:.2f}" cy="{b:.2f}" r="3" fill="none" stroke="{c}"/>' for a, b in pts]
        else:
            out += [f'<path d="M{a - 3:.2f},{b - 3:.2f}L{a + 3:.2f},{b + 3:.2f}M{a - 3:.2f},{b + 3:.2f}'
                    f'L{a + 3:.2f},{b - 3:.2f}" stroke="{c}"/>' for a, b in pts]
        out.append(f'<text x="{ml + pw - 4}" y="{mt + 14 + 14 * i}" text-anchor="end" fill="{c}">{label}</text>')
    out.append("</svg>")
    return ("\n".join(out) + "\n").encode()


# ---------------------------------------------------------------- parsing


def _grid(v, name):
    """An ε grid: explicit list or ``{min, max, count}`` (log-spaced)."""
    if isinstance(v, dict):
        try:
            lo, hi, n = float(v["min"]), float(v["max"]), int(v["count"])
        except KeyError as exc:
            raise ConfigError(f"{name} needs min, max and count (missing {exc})") from None
        if not (0 < lo < hi) or n < 2:
            raise ConfigError(f"{name} must have 0 < min < max and count >= 2")
        return np.geomspace(lo, hi, n)
    arr = np.atleast_1d(np.asarray(v, float))
    if np.any(arr <= 0):
        raise ConfigError(f"{name} values must be positive")
    return arr


def _vector(v, d, name):
    arr = np.atleast_1d(np.asarray(v, float))
    if arr.shape != (d,):
        raise ConfigError(f"{name} must have {d} components")
    return arr


def load_job(path, overrides=None) -> JobSpec:
    """Parse a job file (and its referenced medium file)."""
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read job file: {exc}") from None
    pairs = parse_config(text)
    job, med = {}, []
    for k, v in pairs:
        if k in MEDIUM_KEYS:
            med.append((k, v))
        elif k in JOB_KEYS:
            if k in job:
                raise ConfigError(f"duplicate key {k!r}")
            job[k] = v
        else:
            raise ConfigError(f"unknown key {k!r}")
    kind = job.pop("job", None)
    if kind not in JOB_KINDS:
        raise ConfigError(f"job must be one of {', '.join(JOB_KINDS)}; got {kind!r}")
    if "medium" in job:
        if med:
            raise ConfigError("give either 'medium = file' or inline medium keys, not both")
        mpath = path.parent / str(job.pop("medium"))
        try:
            med = parse_config(mpath.read_text())
        except OSError as exc:
            raise ConfigError(f"cannot read medium file: {exc}") from None
    if not med:
        raise ConfigError("job has no medium")
    medium = medium_from_pairs(med)
    spec = JobSpec(kind, medium, job)
    for key, cast in (("cutoff", int), ("tol", float), ("cluster_window", float)):
        if key in job:
            setattr(spec, key, cast(job.pop(key)))
    for key, val in (overrides or {}).items():
        if val is not None:
            setattr(spec, key, val)
    if spec.cutoff < 1:
        raise ConfigError("cutoff must be positive")
    _validate(spec)
    return spec


def _dimension(medium):
    return medium.dimension


def _validate(job: JobSpec):
    p, d = job.params, _dimension(job.medium)
    if job.kind == "bands":
        verts = np.asarray(p.get("path", [[0.0] * d, [1.0] * d]), float)
        if verts.ndim != 2 or verts.shape[1] != d or len(verts) < 2:
            raise ConfigError(f"path must be a list of at least two {d}-component vertices")
        if np.any(np.abs(verts) > 1 + 1e-12):
            raise ConfigError("path vertices must lie in the closed zone (|k_j| <= pi/l_j)")
        if int(p.get("samples", 21)) < 2:
            raise ConfigError("samples must be at least 2")
    if "apex" in p:
        a = np.atleast_1d(p["apex"])
        if a.shape != (d,) or not set(int(x) for x in a) <= {0, 1}:
            raise ConfigError(f"apex must be {d} entries of 0 or 1")
    for key in ("branch", "anchor"):
        if key in p and int(p[key]) < 1:
            raise ConfigError(f"{key} must be >= 1")
    if job.kind == "greens" and "omega" not in p:
        raise ConfigError("greens job needs omega")


# ---------------------------------------------------------------- jobs


def _apex(job, d):
    return tuple(int(x) for x in np.atleast_1d(job.params.get("apex", [0] * d)))


def _direction(job, d):
    v = _vector(job.params.get("direction", [1.0] + [0.0] * (d - 1)), d, "direction")
    return v / np.linalg.norm(v)


def run_bands(job: JobSpec, man: Manifest) -> dict:
    spec, p = job.medium, job.params
    d = _dimension(spec)
    ell = np.asarray(spec.cell_lengths, float)
    verts = np.asarray(p.get("path", [[0.0] * d, [1.0] * d]), float) * np.pi / ell
    m = int(p.get("samples", 21))
    nb = int(p.get("bands", spec.n_masses if isinstance(spec, ChainSpec) else 6))
    ks, arc = [], []
    s0 = 0.0
    for i in range(len(verts) - 1):
        seg = np.linspace(0, 1, m)[(1 if i else 0):]
        for t in seg:
            ks.append(verts[i] + t * (verts[i + 1] - verts[i]))
            arc.append(s0 + t * np.linalg.norm(verts[i + 1] - verts[i]))
        s0 += np.linalg.norm(verts[i + 1] - verts[i])
    lams = np.array([bloch.band_eigenvalues(spec, k, nb, job.cutoff) for k in ks])
    omega = np.sqrt(np.maximum(lams, 0.0))
    header = ["arclength"] + [f"k{j + 1}" for j in range(d)] + [f"omega{n + 1}" for n in range(nb)]
    rows = [[s, *k, *w] for s, k, w in zip(arc, ks, omega)]
    man.add("bands.csv", csv_bytes(header, rows))
    series = [(f"n={n + 1}", arc, omega[:, n], "line") for n in range(nb)]
    man.add("bands.svg", svg_lines(series, "contour arclength", "omega", "band diagram"))
    return {"bands": nb, "points": len(ks)}


def _model_doc(model: effective.EffectiveModel) -> dict:
    doc = {"apex": list(model.apex), "branch": model.branch, "lambda": model.lam,
           "rho0": model.rho0, "mu0": _real(model.mu0), "rho1": _real(model.rho1),
           "mu1": _real(model.mu1),
           "certificates": model.certificates}
    if model.rho2 is not None:
        doc["rho2"] = _real(model.rho2)
        doc["mu2"] = _real(model.mu2)
    if model.source is not None:
        doc["source"] = {"mean": model.source.mean, "dipole": _real(model.source.dipole),
                         "rho_eta": model.source.rho_eta, "quad": _real(model.source.quad)}
    return doc


def exact_offsets(system, eigen, khat, eps) -> np.ndarray:
    """Exact ``omega^2 - lam`` of one simple branch along ``eps * khat``."""
    return np.array([bloch.branch_offset(system, eigen.coeffs, eigen.eigenvalue, e * khat)
                     for e in eps])


def compare_asymptotics(eps, exact_offset, model_offsets: dict) -> dict:
    """Error table of scaled offsets ``(omega^2 - lam) / eps^2`` with log-log slopes.

    Parameters
    ----------
    eps : array
    exact_offset : array
        Exact ``omega^2 - lam`` on `eps`.
    model_offsets : dict
        Name -> predicted offsets on the same grid.
    """
    eps = np.asarray(eps, float)
    exact = np.asarray(exact_offset, float)
    table = {"eps": eps, "exact": exact / eps ** 2, "models": {}}
    for name, off in model_offsets.items():
        off = np.asarray(off, float)
        if off.shape != eps.shape:
            raise ValueError(f"model {name!r} is sampled on a different grid")
        err = np.abs(exact - off) / eps ** 2
        rel = err / np.maximum(np.abs(exact / eps ** 2), 1e-300)
        good = err > 0
        slope = float(np.polyfit(np.log(eps[good]), np.log(err[good]), 1)[0]) if good.sum() >= 2 else math.inf
        table["models"][name] = {"abs": err, "rel": rel, "slope": slope}
    return table


def run_effective(job: JobSpec, man: Manifest) -> dict:
    spec, p = job.medium, job.params
    d = _dimension(spec)
    a = _apex(job, d)
    branch = int(p.get("branch", 1))
    order = int(p.get("order", 2))
    khat = _direction(job, d)
    eps = _grid(p.get("eps", {"min": 1e-3, "max": 1e-1, "count": 10}), "eps")
    model, system, eig = effective.effective_model(spec, a, branch, job.cutoff, order)
    man.add("model.json", dumps(_model_doc(model)))
    off_lo = np.array([model.offset(e * khat, 0) for e in eps])
    off_so = np.array([model.offset(e * khat, 2) for e in eps]) if order >= 2 else off_lo
    exact = exact_offsets(system, eig, khat, eps)
    table = compare_asymptotics(eps, exact, {"leading": off_lo, "second": off_so})
    rows = [[e, x, table["models"]["leading"]["abs"][i], table["models"]["second"]["abs"][i]]
            for i, (e, x) in enumerate(zip(eps, table["exact"]))]
    man.add("dispersion.csv", csv_bytes(
        ["eps", "omega_hat2_exact", "error_leading", "error_second"], rows))
    w = lambda off: np.sqrt(np.maximum(model.lam + off, 0.0))
    series = [("exact", eps, w(exact), "line"), ("leading", eps, w(off_lo), "o"),
              ("second", eps, w(off_so), "x")]
    man.add("dispersion.svg", svg_lines(series, "eps", "omega", f"apex {a} branch {branch}"))
    summary = {"lambda": model.lam,
               "slopes": {k: v["slope"] for k, v in table["models"].items()}}
    if int(p.get("compare", 0)):
        man.add("errors.svg", svg_lines(
            [(k, np.log10(eps), np.log10(v["abs"]), "o" if k == "leading" else "x")
             for k, v in table["models"].items()], "log10 eps", "log10 error", "asymptotic error"))
    return summary


def _directions(job, d):
    if "directions" in job.params and not np.isscalar(job.params["directions"]):
        dirs = np.atleast_2d(np.asarray(job.params["directions"], float))
        if dirs.shape[1] != d:
            raise ConfigError(f"directions must have {d} components")
        return dirs / np.linalg.norm(dirs, axis=1, keepdims=True)
    if "direction" in job.params:
        return _direction(job, d)[None, :]
    n = int(job.params.get("directions", 8))
    if d == 1:
        return np.array([[1.0], [-1.0]])
    t = np.pi * np.arange(n) / n
    return np.stack([np.cos(t), np.sin(t)], axis=1)


def _repeated(system, branch, nb):
    eig = bloch.solve_apex(system, nb)
    sel = [e for e in eig if e.branch == branch]
    if not sel:
        raise ConfigError(f"branch {branch} not computed")
    group = sel[0].group or (branch,)
    return [e for e in eig if e.branch in group], eig


def run_degenerate(job: JobSpec, man: Manifest) -> dict:
    spec, p = job.medium, job.params
    d = _dimension(spec)
    a = _apex(job, d)
    branch = int(p.get("branch", 1))
    system = bloch.apex_system(spec, a, job.cutoff)
    members, _ = _repeated(system, branch, branch + 4)
    if len(members) < 2:
        raise effective.UnsupportedRankError(f"branch {branch} is simple at apex {a}")
    model = effective.assemble_degenerate(system, members, tol=job.tol)
    rows, doc_dirs = [], []
    for k in _directions(job, d):
        reg = effective.classify_regime(model, k, job.tol)
        br = effective.solve_degenerate_branches(model, k, reg)
        doc_dirs.append({"direction": k, "regime": reg.value, "values": br.values,
                         "orders": [int(o) for o in br.orders]})
        rows += [[*k, reg.value, float(v), int(o)] for v, o in zip(br.values, br.orders)]
    header = [f"khat{j + 1}" for j in range(d)] + ["regime", "coefficient", "power"]
    man.add("branches.csv", csv_bytes(header, rows))
    man.add("model.json", dumps({
        "apex": list(a), "branches": list(model.branches), "lambda": model.lam,
        "rho": model.rho, "theta": model.theta, "directions": doc_dirs,
        "certificates": model.certificates}))
    kap = np.linspace(0, float(p.get("kappa", 0.1)), 41)
    k0 = _directions(job, d)[0]
    br = effective.solve_degenerate_branches(model, k0)
    exact = np.array([bloch.apex_bands(system, t * k0, max(model.branches))[
        min(model.branches) - 1:max(model.branches)] for t in kap]) - model.lam
    series = [(f"exact {b}", kap, exact[:, i], "line") for i, b in enumerate(model.branches)]
    model_off = np.array([br.offsets(t) for t in kap])
    series += [(f"model {i + 1}", kap, model_off[:, i], "o") for i in range(model.Q)]
    man.add("branches.svg", svg_lines(series, "|kappa|", "omega^2 - lambda", f"apex {a}"))
    return {"regimes": sorted({r["regime"] for r in doc_dirs})}


def run_cluster(job: JobSpec, man: Manifest) -> dict:
    spec, p = job.medium, job.params
    d = _dimension(spec)
    a = _apex(job, d)
    anchor = int(p.get("anchor", p.get("branch", 1)))
    eps = float(p.get("eps", 0.1))
    system = bloch.apex_system(spec, a, job.cutoff)
    nb = anchor + 6
    eig = bloch.solve_apex(system, nb)
    lam = [e.eigenvalue for e in sorted(eig, key=lambda e: e.branch)]
    info = effective.detect_cluster(lam, anchor, eps, job.cluster_window)
    model = effective.cluster_model(system, eig, info)
    khat = _direction(job, d)
    reg = effective.classify_regime(model, khat, job.tol)
    br = effective.solve_degenerate_branches(model, khat, reg)
    kap = np.linspace(0, float(p.get("kappa", 3 * eps)), 41)
    offs = np.array([br.offsets(t) for t in kap])
    lo, hi = min(info.branches), max(info.branches)
    exact = np.array([bloch.apex_bands(system, t * khat, hi)[lo - 1:hi] for t in kap]) - model.lam
    header = ["kappa"] + [f"model{i + 1}" for i in range(offs.shape[1])] + \
             [f"exact{b}" for b in range(lo, hi + 1)]
    man.add("cluster.csv", csv_bytes(header, [[t, *m, *x] for t, m, x in zip(kap, offs, exact)]))
    man.add("model.json", dumps({
        "apex": list(a), "branches": list(info.branches), "shifts": info.shifts,
        "n_repeated": info.n_repeated, "lambda": model.lam, "regime": reg.value,
        "rho": model.rho, "theta": model.theta,
        "certificates": model.certificates}))
    series = [(f"exact {b}", kap, exact[:, i], "line") for i, b in enumerate(range(lo, hi + 1))]
    series += [(f"model {i + 1}", kap, offs[:, i], "o") for i in range(offs.shape[1])]
    man.add("cluster.svg", svg_lines(series, "|kappa|", "omega^2 - lambda", f"cluster at apex {a}"))
    return {"branches": list(info.branches), "regime": reg.value}


def run_dirac(job: JobSpec, man: Manifest) -> dict:
    spec, p = job.medium, job.params
    d = _dimension(spec)
    a = _apex(job, d)
    system = bloch.apex_system(spec, a, job.cutoff)
    members, _ = _repeated(system, int(p.get("branch", 1)), int(p.get("branch", 1)) + 4)
    if len(members) < 2:
        raise effective.UnsupportedRankError("dirac scan needs a repeated eigenvalue")
    model = effective.assemble_degenerate(system, members, tol=job.tol)
    n = int(p.get("directions", 90)) if np.isscalar(p.get("directions", 90)) else 90
    v = effective.dirac_scan(model, n, job.tol)
    doc = {"apex": list(a), "branches": list(model.branches), "lambda": model.lam,
           "verdict": v.verdict, "worst_direction": v.worst_direction,
           "worst_ratio": v.worst_ratio, "exponent": v.exponent}
    man.add("dirac.json", dumps(doc))
    return {"verdict": v.verdict}


def run_greens(job: JobSpec, man: Manifest) -> dict:
    spec, p = job.medium, job.params
    d = _dimension(spec)
    if d != 2:
        raise ConfigError("greens jobs need a two-dimensional medium")
    omega = float(p["omega"])
    src = _vector(p.get("source", [0.0, 0.0]), 2, "source")
    ctx = greens.locate_band_edge(spec, omega, int(p.get("bands", 4)), job.cutoff,
                                  margin=float(p.get("margin", 0.0)), source_point=src)
    line = p.get("line", {})
    if not isinstance(line, dict):
        raise ConfigError("line must be a {axis=, offset=, min=, max=, count=} record")
    axis = int(line.get("axis", 1))
    if axis not in (1, 2):
        raise ConfigError("line axis must be 1 or 2")
    t = np.linspace(float(line.get("min", -40)), float(line.get("max", 40)), int(line.get("count", 161)))
    y = np.tile(src, (len(t), 1))
    y[:, axis - 1] += t
    y[:, 2 - axis] += float(line.get("offset", 0.0))
    try:
        U = greens.envelope_bessel(ctx, y)
        method = "bessel"
    except greens.AnisotropyError:
        U = greens.envelope_quadrature(ctx, y)
        method = "quadrature"
    gf = greens.reconstruct_greens(ctx, U, y)
    rows = [[a, b, u, 0.0, f, 0.0, e] for (a, b), u, f, e in zip(y, U, gf.field, gf.upper)]
    man.add("greens.csv", csv_bytes(
        ["y1", "y2", "U_real", "U_imag", "field_real", "field_imag", "envelope"], rows))
    man.add("edge.json", dumps({
        "apex": list(ctx.apex), "branch": ctx.branch, "lambda": ctx.lam, "omega": omega,
        "eps2": ctx.eps2, "alpha": ctx.alpha, "rho0": ctx.rho0, "mu0": ctx.mu0,
        "source": src, "varphi_source": ctx.varphi_source, "chi1_source": ctx.chi1_source,
        "method": method}))
    series = [("field", t, gf.field, "line"), ("+envelope", t, gf.upper, "line"),
              ("-envelope", t, gf.lower, "line")]
    man.add("greens.svg", svg_lines(series, f"y{axis} - y{axis}'", "u", "gap-edge response"))
    return {"apex": list(ctx.apex), "branch": ctx.branch, "eps2": ctx.eps2, "alpha": ctx.alpha}


RUNNERS = {"bands": run_bands, "effective": run_effective, "degenerate": run_degenerate,
           "cluster": run_cluster, "greens": run_greens, "dirac-scan": run_dirac}


def run_job(job: JobSpec) -> Manifest:
    """Run one job and write its files plus the manifest into ``job.out``."""
    out = Path(job.out)
    out.mkdir(parents=True, exist_ok=True)
    man = Manifest(out)
    summary = RUNNERS[job.kind](job, man)
    man.add("summary.json", dumps({"job": job.kind, "cutoff": job.cutoff, **summary}))
    man.write(job)
    return man


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(prog="bloch-homog", description=__doc__.split("\n")[0])
    ap.add_argument("job_file")
    ap.add_argument("--cutoff", type=int)
    ap.add_argument("--tol", type=float)
    ap.add_argument("--cluster-window", type=float, dest="cluster_window")
    ap.add_argument("--out", type=Path)
    args = ap.parse_args(argv)
    overrides = {"cutoff": args.cutoff, "tol": args.tol, "cluster_window": args.cluster_window,
                 "out": args.out}
    try:
        job = load_job(args.job_file, overrides)
        man = run_job(job)
    except (ConfigError, GeometryError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except NUMERIC_ERRORS as exc:
        print(f"numeric failure in {Path(args.job_file).name}: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    for name in sorted(man.files):
        print(man.out / name)
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
