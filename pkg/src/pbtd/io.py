"""Tensor files, run manifests and result tables.

Tensor files start with one ASCII header line::

    PBTD-TNS v1 <N> <I_1> ... <I_N> [binary]

followed by the ``I_1 * ... * I_N`` values in column-major order (mode 0
fastest), either as whitespace-separated decimals or, when the header ends in
``binary``, as raw little-endian float64.
"""

import csv
import hashlib
import json
import math

import numpy as np

from . import __version__
from .model import BtdConfig, fit
from .stiefel import vmf_mode
from .synth import SweepResult, SweepRow

MAGIC = "PBTD-TNS v1"


class TensorFormatError(ValueError):
    pass


def write_tensor(path, x, binary=False):
    x = np.asarray(x, dtype=np.float64)
    header = f"{MAGIC} {x.ndim} " + " ".join(str(d) for d in x.shape)
    values = x.ravel(order="F")
    with open(path, "wb") as fh:
        if binary:
            fh.write((header + " binary\n").encode("ascii"))
            fh.write(values.astype("<f8").tobytes())
        else:
            fh.write((header + "\n").encode("ascii"))
            fh.write("\n".join(repr(float(v)) for v in values).encode("ascii"))
            fh.write(b"\n")


def read_tensor(path):
    with open(path, "rb") as fh:
        raw = fh.read()
    end = raw.find(b"\n")
    if end < 0:
        raise TensorFormatError(f"{path}: missing header line")
    try:
        tokens = raw[:end].decode("ascii").split()
    except UnicodeDecodeError:
        raise TensorFormatError(f"{path}: header is not ASCII") from None
    if " ".join(tokens[:2]) != MAGIC:
        raise TensorFormatError(f"{path}: not a {MAGIC} file")
    binary = tokens[-1] == "binary"
    if binary:
        tokens = tokens[:-1]
    try:
        order = int(tokens[2])
        dims = tuple(int(t) for t in tokens[3:])
    except (IndexError, ValueError):
        raise TensorFormatError(f"{path}: malformed header") from None
    if order < 1 or len(dims) != order or any(d < 1 for d in dims):
        raise TensorFormatError(f"{path}: header declares order {order} with dims {dims}")
    count = math.prod(dims)
    body = raw[end + 1:]
    if binary:
        if len(body) != 8 * count:
            raise TensorFormatError(f"{path}: expected {8 * count} bytes of data, found {len(body)}")
        values = np.frombuffer(body, dtype="<f8").astype(np.float64)
    else:
        try:
            values = np.array([float(v) for v in body.split()], dtype=np.float64)
        except ValueError:
            raise TensorFormatError(f"{path}: non-numeric value in data") from None
        if values.size != count:
            raise TensorFormatError(f"{path}: expected {count} values, found {values.size}")
    return values.reshape(dims, order="F")


def file_digest(path):
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()


def _listify(a):
    return np.asarray(a, dtype=np.float64).tolist()


def posterior_summary(state):
    blocks = []
    for t in range(state.num_blocks):
        blocks.append({
            "factor_modes": [_listify(vmf_mode(f)) for f in state.concentrations[t]],
            "core_mean": _listify(state.cores[t].mean),
            "core_variance": _listify(state.cores[t].variance),
            "precision_means": [_listify(g.mean) for g in state.precisions[t]],
        })
    return {"noise_precision_mean": float(state.noise.mean), "blocks": blocks}


def build_manifest(best, outcomes, input_path=None, input_digest=None):
    """JSON-ready record of the best restart of a fit.

    Wall-clock times live under the top-level ``"timing"`` key only, so two
    runs can be compared after dropping that key.
    """
    report = best.report
    return {
        "tool": "pbtd",
        "version": __version__,
        "input": {"path": input_path, "sha256": input_digest},
        "config": best.state.config.to_dict(),
        "seed": best.seed,
        "restarts": [
            {
                "seed": o.seed,
                "status": "ok" if o.ok else f"failed: {o.error}",
                "final_elbo": o.report.final_elbo if o.ok else None,
                "iterations": o.report.iterations if o.ok else None,
            }
            for o in outcomes
        ],
        "report": {
            "final_elbo": report.final_elbo,
            "iterations": report.iterations,
            "converged": report.converged,
            "noise_precision_mean": report.noise_precision_mean,
            "pruned_core_fraction": report.pruned_core_fraction,
        },
        "elbo_trace": list(best.state.elbo_trace),
        "posterior": posterior_summary(best.state),
        "timing": {
            "wall_time_seconds": report.wall_time_seconds,
            "restart_wall_time_seconds": [o.report.wall_time_seconds if o.ok else None for o in outcomes],
        },
    }


def dumps_manifest(manifest):
    return json.dumps(manifest, indent=1, sort_keys=True) + "\n"


def write_manifest(path, manifest):
    with open(path, "w") as fh:
        fh.write(dumps_manifest(manifest))


def read_manifest(path):
    with open(path) as fh:
        return json.load(fh)


def without_timing(manifest):
    return {k: v for k, v in manifest.items() if k != "timing"}


def replay(manifest, x):
    """Refit ``x`` with the manifest's config and seed.

    Returns ``(recorded_elbo, replayed_elbo)``.
    """
    cfg = BtdConfig.from_dict(manifest["config"])
    _, report = fit(x, cfg)
    return manifest["report"]["final_elbo"], report.final_elbo


def write_sweep_csv(path, result):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(SweepRow.FIELDS)
        for row in result.rows:
            writer.writerow([_csv_cell(getattr(row, f)) for f in SweepRow.FIELDS])


def _csv_cell(v):
    if isinstance(v, bool):
        return int(v)
    if isinstance(v, float):
        return repr(v)
    return v


def read_sweep_csv(path):
    kinds = {
        "snr_db": float, "replicate": int, "restart": int, "seed": int, "relative_error": float,
        "elbo": float, "iterations": int, "wall_time": float, "noise_precision": float,
        "best": lambda s: bool(int(s)),
    }
    rows = []
    with open(path, newline="") as fh:
        for rec in csv.DictReader(fh):
            rows.append(SweepRow(**{k: kinds.get(k, str)(v) for k, v in rec.items()}))
    return SweepResult(rows=rows)


def write_matrix_csv(path, labels, matrix):
    """Square table with truth rows and fit columns, four decimals."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["truth\\fit", *labels])
        for label, row in zip(labels, matrix):
            writer.writerow([label, *(f"{v:.4f}" for v in row)])

