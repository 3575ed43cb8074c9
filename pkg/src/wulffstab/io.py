"""File formats: lattice field dumps, surface tables, and JSON reports.

Field dump (".wsf"): an ASCII header line ``WSF1 d h nx ny [nz]`` followed by
the little-endian float64 node values in row-major order, NaN at nodes
outside the body.  Surface dump: CSV with coordinates, normal, weight,
F(normal), principal curvatures, their sum, and the traceless shape norm.
Reports: JSON with schema tag ``wsr-1``.
"""

from __future__ import annotations

import csv
import json

import numpy as np


class FormatError(RuntimeError):
    pass


def write_field(field, path):
    dom = field.domain
    header = f"WSF1 {dom.dim} {dom.h!r} " + " ".join(str(s) for s in dom.shape)
    data = np.ascontiguousarray(field.values, dtype="<f8")
    with open(path, "wb") as fh:
        fh.write((header + "\n").encode("ascii"))
        fh.write(data.tobytes(order="C"))


def read_field(path):
    """Returns (dim, h, shape, values); the lattice origin is not stored."""
    with open(path, "rb") as fh:
        header = fh.readline().decode("ascii").split()
        if not header or header[0] != "WSF1":
            raise FormatError(f"{path}: not a WSF1 field dump")
        dim = int(header[1])
        h = float(header[2])
        shape = tuple(int(s) for s in header[3:3 + dim])
        count = int(np.prod(shape))
        data = np.frombuffer(fh.read(8 * count), dtype="<f8", count=count)
    return dim, h, shape, data.reshape(shape)


def write_surface_csv(M, path):
    d = M.dim
    n = d - 1
    cols = ([f"x{i}" for i in range(d)] + [f"n{i}" for i in range(d)]
            + ["w", "F_n"] + [f"kappa{i + 1}" for i in range(n)]
            + ["H", "S_ring"])
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(cols)
        have_curv = M.kappas is not None
        ring = (np.sqrt(np.maximum(M.traceless_sq, 0.0))
                if have_curv else np.full(M.n_samples, np.nan))
        for k in range(M.n_samples):
            row = list(M.points[k]) + list(M.euclid_normal[k]) + [M.weight[k]]
            row.append(M.F_n[k] if have_curv else np.nan)
            row += list(M.kappas[k]) if have_curv else [np.nan] * n
            row.append(M.H[k] if have_curv else np.nan)
            row.append(ring[k])
            wr.writerow([repr(float(v)) for v in row])


def read_surface_csv(path):
    with open(path, newline="") as fh:
        rd = csv.reader(fh)
        cols = next(rd)
        rows = np.array([[float(v) for v in row] for row in rd])
    d = sum(1 for c in cols if c.startswith("x"))
    from .surface import SampledHypersurface
    M = SampledHypersurface(points=rows[:, :d],
                            euclid_normal=rows[:, d:2 * d],
                            weight=rows[:, 2 * d], dim=d)
    M.F_n = rows[:, 2 * d + 1]
    n = d - 1
    M.kappas = rows[:, 2 * d + 2: 2 * d + 2 + n]
    M.H = rows[:, 2 * d + 2 + n]
    M.traceless_sq = rows[:, 2 * d + 3 + n] ** 2
    return M


def write_boundary_csv(trace, path):
    d = trace["points"].shape[1]
    cols = ([f"x{i}" for i in range(d)] + [f"n{i}" for i in range(d)]
            + ["grad_norm", "F_of_grad"])
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(cols)
        for k in range(len(trace["points"])):
            row = (list(trace["points"][k]) + list(trace["normals"][k])
                   + [trace["grad_norm"][k], trace["F_of_grad"][k]])
            wr.writerow([repr(float(v)) for v in row])


def _jsonable(obj):
    if isinstance(obj, dict):
        return {k: _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _jsonable(obj.tolist())
    if isinstance(obj, (np.bool_, bool)):
        return bool(obj)
    if isinstance(obj, (np.integer, int)):
        return int(obj)
    if isinstance(obj, (np.floating, float)):
        v = float(obj)
        return v if np.isfinite(v) else None
    return obj


def write_report(payload, path):
    body = {"schema": "wsr-1"}
    body.update(_jsonable(payload))
    with open(path, "w") as fh:
        json.dump(body, fh, indent=1, sort_keys=True)
        fh.write("\n")


def write_table_csv(rows, path):
    """One CSV row per case; rows are dicts sharing the same keys."""
    if not rows:
        raise FormatError("no rows to write")
    cols = list(rows[0].keys())
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(cols)
        for row in rows:
            out = []
            for c in cols:
                v = row.get(c)
                if isinstance(v, float):
                    out.append(repr(v))
                else:
                    out.append(v)
            wr.writerow(out)
