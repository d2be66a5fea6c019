"""File formats: grids and Gaussians as JSON, particle clouds as CSV.

Floats are written with 17 significant digits in CSV files and with
Python's round-trip repr in JSON, so a write/read cycle is lossless.
"""

from __future__ import annotations

import csv
import json
from pathlib import Path

import numpy as np

from .errors import InvalidInput
from .gaussian_ot import AffineMap
from .measures import GaussianDensity, GridDensity, ParticleEnsemble

FLOAT_FMT = "%.17g"


def fmt(x: float) -> str:
    return FLOAT_FMT % float(x)


def _read_json(path):
    try:
        with open(path) as fh:
            return json.load(fh)
    except json.JSONDecodeError as exc:
        raise InvalidInput(f"{path}: not valid JSON ({exc})") from None


def write_json(path, doc) -> None:
    with open(path, "w") as fh:
        json.dump(doc, fh, indent=1)
        fh.write("\n")


def grid_to_dict(g: GridDensity) -> dict:
    return {
        "dim": g.dim,
        "lo": g.lo.tolist(),
        "hi": g.hi.tolist(),
        "shape": list(g.shape),
        "data": g.values.ravel().tolist(),
    }


def grid_from_dict(doc: dict) -> GridDensity:
    try:
        shape = tuple(int(n) for n in doc["shape"])
        data = np.asarray(doc["data"], dtype=float)
        lo, hi = doc["lo"], doc["hi"]
    except (KeyError, TypeError) as exc:
        raise InvalidInput(f"grid document is missing a field: {exc}") from None
    if "dim" in doc and int(doc["dim"]) != len(shape):
        raise InvalidInput("grid 'dim' disagrees with 'shape'")
    if data.size != int(np.prod(shape)):
        raise InvalidInput(f"grid has {data.size} values for shape {shape}")
    return GridDensity(lo, hi, data.reshape(shape))


def read_grid(path) -> GridDensity:
    return grid_from_dict(_read_json(path))


def write_grid(path, g: GridDensity) -> None:
    write_json(path, grid_to_dict(g))


def gaussian_to_dict(g: GaussianDensity) -> dict:
    return {"mean": g.mean.tolist(), "cov": g.cov.tolist()}


def gaussian_from_dict(doc: dict) -> GaussianDensity:
    try:
        return GaussianDensity(doc["mean"], doc["cov"])
    except (KeyError, TypeError) as exc:
        raise InvalidInput(f"Gaussian document needs 'mean' and 'cov': {exc}") from None


def read_gaussian(path) -> GaussianDensity:
    return gaussian_from_dict(_read_json(path))


def write_gaussian(path, g: GaussianDensity) -> None:
    write_json(path, gaussian_to_dict(g))


def affine_to_dict(m: AffineMap) -> dict:
    return {"Gamma": m.gamma_mat.tolist(), "gamma": m.gamma_vec.tolist()}


def read_particles(path) -> ParticleEnsemble:
    """CSV with header ``x1,...,xd,weight[,density]``."""
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise InvalidInput(f"{path}: empty particle file")
    header = [h.strip() for h in rows[0]]
    try:
        body = np.array([[float(v) for v in r] for r in rows[1:] if r], dtype=float)
    except ValueError as exc:
        raise InvalidInput(f"{path}: non-numeric entry ({exc})") from None
    if "weight" not in header:
        raise InvalidInput(f"{path}: header needs a 'weight' column")
    coords = [i for i, h in enumerate(header) if h.startswith("x")]
    if not coords or body.ndim != 2 or body.shape[1] != len(header):
        raise InvalidInput(f"{path}: malformed particle table")
    dens = body[:, header.index("density")] if "density" in header else None
    return ParticleEnsemble(body[:, coords], body[:, header.index("weight")], dens)


def write_particles(path, p: ParticleEnsemble) -> None:
    header = [f"x{k + 1}" for k in range(p.dim)] + ["weight"]
    if p.density_values is not None:
        header.append("density")
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for i in range(p.size):
            row = list(p.points[i]) + [p.weights[i]]
            if p.density_values is not None:
                row.append(p.density_values[i])
            w.writerow([fmt(v) for v in row])


def write_table(path, header, rows) -> None:
    """CSV with a header row; floats at 17 significant digits."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for r in rows:
            w.writerow([fmt(v) if isinstance(v, (float, np.floating)) else v for v in r])


def ensure_dir(path) -> Path:
    p = Path(path)
    p.mkdir(parents=True, exist_ok=True)
    return p
