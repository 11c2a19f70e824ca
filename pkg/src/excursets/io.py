"""File formats: Matrix Market matrices, CSV vectors, JSON configuration sets."""

from __future__ import annotations

import csv
import hashlib
import json
import os

import numpy as np
import scipy.io
import scipy.sparse as sp

from . import gmrf
from .posterior_methods import ParamConfig, ParamConfigSet


class InputError(ValueError):
    """Unreadable or inconsistent input file."""


def sha256_file(path):
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()


def _require(path):
    if not os.path.isfile(path):
        raise InputError(f"file not found: {path}")


def read_matrix(path):
    """Matrix Market file as CSC (sparse) or ndarray (dense ``array`` format)."""
    _require(path)
    try:
        M = scipy.io.mmread(path)
    except Exception as err:  # malformed files raise a variety of types
        raise InputError(f"cannot read matrix {path}: {err}") from err
    return M.tocsc() if sp.issparse(M) else np.asarray(M, dtype=np.float64)


def write_matrix(path, M):
    scipy.io.mmwrite(path, sp.csc_matrix(M) if sp.issparse(M) else np.asarray(M))


def read_table(path):
    """Numeric CSV with an optional header row; returns (header, array)."""
    _require(path)
    with open(path, newline="") as fh:
        rows = [r for r in csv.reader(fh) if r and any(c.strip() for c in r)]
    if not rows:
        raise InputError(f"empty file: {path}")
    header = None
    try:
        float(rows[0][0])
    except ValueError:
        header, rows = [c.strip() for c in rows[0]], rows[1:]
    try:
        data = np.array([[float(c) for c in r] for r in rows], dtype=np.float64)
    except ValueError as err:
        raise InputError(f"non-numeric entry in {path}: {err}") from err
    if data.ndim != 2 or (rows and len({len(r) for r in rows}) != 1):
        raise InputError(f"ragged table in {path}")
    return header, data


def read_vector(path):
    """Single-column CSV (an optional header is skipped)."""
    header, data = read_table(path)
    if data.shape[1] != 1:
        if header and "mean" in header:
            return data[:, header.index("mean")]
        raise InputError(f"expected one column in {path}, found {data.shape[1]}")
    return data[:, 0]


def write_vector(path, values, name="mean"):
    with open(path, "w", newline="") as fh:
        fh.write(name + "\n")
        for v in np.asarray(values, dtype=np.float64):
            fh.write(repr(float(v)) + "\n")


def read_posterior(mean_path, precision_path=None, covariance_path=None):
    if (precision_path is None) == (covariance_path is None):
        raise InputError("give exactly one of a precision or a covariance matrix")
    mean = read_vector(mean_path)
    if precision_path is not None:
        M = read_matrix(precision_path)
        kw = {"precision": M}
    else:
        M = read_matrix(covariance_path)
        kw = {"covariance": M.toarray() if sp.issparse(M) else M}
    if M.shape != (mean.size, mean.size):
        raise InputError(f"matrix is {M.shape[0]}x{M.shape[1]} but the mean has {mean.size} entries")
    try:
        return gmrf.GaussianPosterior(mean, **kw)
    except ValueError as err:
        raise InputError(str(err)) from err


def read_config_set(path):
    """Configuration set from JSON.

    Format::

        {"configs": [{"theta": {...}, "weight": 0.7,
                      "mean": "mean0.csv", "precision": "Q0.mtx"}, ...]}

    ``covariance`` may replace ``precision``; relative paths are resolved
    against the JSON file's directory. Returns the set and the list of
    files it references.
    """
    _require(path)
    try:
        with open(path) as fh:
            doc = json.load(fh)
    except json.JSONDecodeError as err:
        raise InputError(f"invalid JSON in {path}: {err}") from err
    base = os.path.dirname(os.path.abspath(path))
    entries = doc.get("configs") if isinstance(doc, dict) else None
    if not entries:
        raise InputError(f"{path} has no 'configs' list")
    configs, files = [], []
    for i, e in enumerate(entries):
        if "mean" not in e or ("precision" in e) == ("covariance" in e):
            raise InputError(f"config {i} needs 'mean' and one of 'precision'/'covariance'")
        resolve = lambda p: p if os.path.isabs(p) else os.path.join(base, p)  # noqa: E731
        mean = resolve(e["mean"])
        mat_key = "precision" if "precision" in e else "covariance"
        mat = resolve(e[mat_key])
        post = read_posterior(mean, **{f"{mat_key}_path": mat})
        files += [mean, mat]
        configs.append(ParamConfig(dict(e.get("theta", {})), float(e.get("weight", 1.0)), post))
    try:
        return ParamConfigSet(tuple(configs)), files
    except ValueError as err:
        raise InputError(str(err)) from err


def write_rows(path, fieldnames, rows):
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=fieldnames, lineterminator="\n")
        w.writeheader()
        w.writerows(rows)


def write_json(path, obj):
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True)
        fh.write("\n")
