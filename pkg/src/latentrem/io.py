"""Event ingestion, panel files and fit serialization.

Every output directory carries a ``manifest.json`` with a ``schema_version``
field.  Floats are written with ``repr`` so re-reading is exact.
"""

from __future__ import annotations

import csv
import datetime as _dt
import hashlib
import json
import math
import os
import platform
from dataclasses import dataclass
from importlib import metadata
from pathlib import Path

import numpy as np
import scipy

from .em import FitResult, SurrogateTrace, TraceRecord
from .errors import IngestError
from .evaluate import residuals as compute_residuals
from .model import DyadIndex, LatentTrajectory, ModelConfig, NetworkPanel, Parameters

SCHEMA_VERSION = 1

TRAJECTORY_HEADER = ("k", "node", "dim", "mean", "var")
TRACE_HEADER = ("iteration", "q_poisson", "q_gaussian", "sigma_spherical")
RESIDUAL_HEADER = ("k", "sender", "receiver", "y", "mu", "residual", "distance", "flagged")
PANEL_HEADER = ("k", "sender", "receiver", "count")
EXPOSURE_HEADER = ("k", "node", "exposure")


# ----------------------------------------------------------------------------
# ingestion
# ----------------------------------------------------------------------------


@dataclass(frozen=True)
class IntervalSpec:
    """Equal-width binning; ``start`` defaults to the earliest timestamp.

    Events in ``[start + (k-1) width, start + k width)`` fall in interval
    ``k``.  Without ``end`` the number of intervals is
    ``floor((t_max - start) / width) + 1``.
    """

    width: float = 1.0
    start: float | None = None
    end: float | None = None

    def __post_init__(self):
        if not self.width > 0:
            raise IngestError(f"interval width must be positive, got {self.width}")

    @classmethod
    def parse(cls, text: str) -> "IntervalSpec":
        """``width[:start[:end]]``, e.g. ``1`` or ``1:1967:2007``."""
        parts = [p.strip() for p in str(text).split(":")]
        if not 1 <= len(parts) <= 3 or not parts[0]:
            raise IngestError(f"bad interval spec {text!r}; expected width[:start[:end]]")
        vals = [parse_time(p) if p else None for p in parts]
        return cls(*vals)


def parse_time(text: str) -> float:
    """Numeric timestamp, or an ISO date converted to decimal years."""
    text = text.strip()
    try:
        return float(text)
    except ValueError:
        pass
    try:
        t = _dt.datetime.fromisoformat(text)
    except ValueError:
        raise IngestError(f"unparseable timestamp {text!r}") from None
    if t.tzinfo is not None:
        t = t.astimezone(_dt.timezone.utc).replace(tzinfo=None)
    year_start = _dt.datetime(t.year, 1, 1)
    year_len = (_dt.datetime(t.year + 1, 1, 1) - year_start).total_seconds()
    return t.year + (t - year_start).total_seconds() / year_len


def _read_rows(path):
    try:
        with open(path, newline="") as fh:
            rows = list(csv.reader(fh))
    except UnicodeDecodeError as exc:
        raise IngestError(f"{path}: not a text file ({exc})") from None
    return rows


def ingest_events(path, intervals: IntervalSpec | None = None, directed: bool = True, exposure_path=None,
                  outside: str = "error") -> NetworkPanel:
    """Bin a ``sender,receiver,timestamp[,count]`` CSV into a panel.

    Node labels are sorted, so the panel does not depend on row order.
    Undirected ingestion stores each pair once with ``i < j`` and sums both
    directions.  ``outside`` is ``"error"`` or ``"drop"`` for events outside
    ``[start, end)``.  An exposure table ``node,k,exposure`` fills
    ``C_i(k)``; missing entries default to 1.
    """
    intervals = intervals or IntervalSpec()
    if outside not in ("error", "drop"):
        raise IngestError("outside must be 'error' or 'drop'")
    rows = _read_rows(path)
    if not rows:
        raise IngestError(f"{path}: no events")
    header = [h.strip().lower() for h in rows[0]]
    for col in ("sender", "receiver", "timestamp"):
        if col not in header:
            raise IngestError(f"{path}: missing column {col!r} in header {rows[0]}")
    si, ri, ti = header.index("sender"), header.index("receiver"), header.index("timestamp")
    ci = header.index("count") if "count" in header else None
    events, loops = [], []
    for lineno, row in enumerate(rows[1:], start=2):
        if not row or all(not c.strip() for c in row):
            continue
        if len(row) < len(header):
            raise IngestError(f"{path}:{lineno}: expected {len(header)} fields, got {len(row)}", [lineno])
        s, r = row[si].strip(), row[ri].strip()
        if s == r:
            loops.append(lineno)
            continue
        try:
            count = 1 if ci is None else int(row[ci])
        except ValueError:
            raise IngestError(f"{path}:{lineno}: count must be an integer", [lineno]) from None
        if count < 0:
            raise IngestError(f"{path}:{lineno}: negative count", [lineno])
        try:
            t = parse_time(row[ti])
        except IngestError as exc:
            raise IngestError(f"{path}:{lineno}: {exc}", [lineno]) from None
        events.append((lineno, s, r, t, count))
    if loops:
        raise IngestError(f"{path}: self-loops on lines {loops}", loops)
    if not events:
        raise IngestError(f"{path}: no events")

    times = np.array([e[3] for e in events])
    start = float(times.min()) if intervals.start is None else float(intervals.start)
    if intervals.end is None:
        n = int(math.floor((times.max() - start) / intervals.width)) + 1
    else:
        n = int(math.ceil((intervals.end - start) / intervals.width))
    end = start + n * intervals.width
    if n < 1:
        raise IngestError("interval spec yields no intervals")
    labels = sorted({e[1] for e in events} | {e[2] for e in events})
    if exposure_path is not None:
        exposure_labels = _exposure_nodes(exposure_path)
        labels = sorted(set(labels) | exposure_labels)
    index = {lab: i for i, lab in enumerate(labels)}
    p = len(labels)
    if p < 2:
        raise IngestError(f"{path}: need at least two distinct nodes")
    dy = DyadIndex.build(p, directed)
    counts = np.zeros((n, len(dy)), dtype=np.int64)
    bad = []
    for lineno, s, r, t, c in events:
        if not start <= t < end:
            bad.append(lineno)
            continue
        k = min(int(math.floor((t - start) / intervals.width)), n - 1)
        counts[k, dy.row(index[s], index[r])] += c
    if bad and outside == "error":
        raise IngestError(f"{path}: events outside [{start}, {end}) on lines {bad}", bad)
    exposure = np.ones((n, p))
    if exposure_path is not None:
        exposure = read_exposure_table(exposure_path, index, n)
    try:
        return NetworkPanel(counts, exposure, directed, tuple(labels))
    except ValueError as exc:
        raise IngestError(str(exc)) from None


def _exposure_nodes(path) -> set:
    rows = _read_rows(path)
    if not rows:
        raise IngestError(f"{path}: empty exposure table")
    header = [h.strip().lower() for h in rows[0]]
    if "node" not in header:
        raise IngestError(f"{path}: exposure table needs columns node,k,exposure")
    ni = header.index("node")
    return {row[ni].strip() for row in rows[1:] if row}


def read_exposure_table(path, index: dict, n: int) -> np.ndarray:
    """``node,k,exposure`` rows into an ``(n, p)`` array; ``k`` is 1-based."""
    rows = _read_rows(path)
    header = [h.strip().lower() for h in rows[0]] if rows else []
    if not {"node", "k", "exposure"} <= set(header):
        raise IngestError(f"{path}: exposure table needs columns node,k,exposure")
    ni, ki, ei = header.index("node"), header.index("k"), header.index("exposure")
    out = np.ones((n, len(index)))
    for lineno, row in enumerate(rows[1:], start=2):
        if not row:
            continue
        node = row[ni].strip()
        if node not in index:
            raise IngestError(f"{path}:{lineno}: unknown node {node!r}", [lineno])
        try:
            k = int(row[ki])
            val = float(row[ei])
        except ValueError:
            raise IngestError(f"{path}:{lineno}: bad k or exposure value", [lineno]) from None
        if not 1 <= k <= n:
            raise IngestError(f"{path}:{lineno}: interval {k} outside 1..{n}", [lineno])
        out[k - 1, index[node]] = val
    return out


# ----------------------------------------------------------------------------
# generic helpers
# ----------------------------------------------------------------------------


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, (bool, np.bool_)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return str(v)


def write_csv(path, header, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([_fmt(v) for v in row])


def read_csv(path):
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    return rows[0], rows[1:]


def _json_default(obj):
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, (np.floating, np.integer)):
        return obj.item()
    if isinstance(obj, tuple):
        return list(obj)
    raise TypeError(f"not JSON serialisable: {type(obj)}")


def write_json(path, data):
    with open(path, "w") as fh:
        json.dump(data, fh, indent=2, sort_keys=True, default=_json_default)
        fh.write("\n")


def read_json(path):
    with open(path) as fh:
        return json.load(fh)


def config_hash(config: dict) -> str:
    blob = json.dumps(config, sort_keys=True, default=_json_default).encode()
    return hashlib.sha256(blob).hexdigest()


def versions() -> dict:
    try:
        pkg = metadata.version("artifact")
    except metadata.PackageNotFoundError:
        pkg = "unknown"
    return {"package": pkg, "numpy": np.__version__, "scipy": scipy.__version__,
            "python": platform.python_version()}


def write_manifest(out, kind: str, config: dict, seed, files, extra=None):
    data = {
        "schema_version": SCHEMA_VERSION,
        "kind": kind,
        "config": config,
        "config_hash": config_hash(config),
        "seed": seed,
        "versions": versions(),
        "files": sorted(files),
    }
    data.update(extra or {})
    write_json(Path(out) / "manifest.json", data)
    return data


def read_manifest(out) -> dict:
    data = read_json(Path(out) / "manifest.json")
    if data.get("schema_version") != SCHEMA_VERSION:
        raise IngestError(f"unsupported schema version {data.get('schema_version')!r}")
    return data


# ----------------------------------------------------------------------------
# panels
# ----------------------------------------------------------------------------


def write_panel(panel: NetworkPanel, out, seed=None, extra=None) -> None:
    """``panel.csv`` (every dyad and interval), ``exposure.csv`` and a manifest."""
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    dy = panel.dyads
    labels = panel.node_labels or tuple(str(i) for i in range(panel.p))
    write_csv(out / "panel.csv", PANEL_HEADER,
              ((k + 1, labels[dy.senders[r]], labels[dy.receivers[r]], int(panel.counts[k, r]))
               for k in range(panel.n) for r in range(panel.p_y)))
    write_csv(out / "exposure.csv", EXPOSURE_HEADER,
              ((k + 1, labels[i], float(panel.exposure[k, i])) for k in range(panel.n) for i in range(panel.p)))
    meta = {"n": panel.n, "p": panel.p, "directed": panel.directed, "node_labels": list(labels)}
    write_manifest(out, "panel", meta, seed, ["panel.csv", "exposure.csv"], extra)


def read_panel(path) -> NetworkPanel:
    path = Path(path)
    meta = read_manifest(path)["config"]
    labels = meta["node_labels"]
    index = {lab: i for i, lab in enumerate(labels)}
    dy = DyadIndex.build(meta["p"], meta["directed"])
    counts = np.zeros((meta["n"], len(dy)), dtype=np.int64)
    _, rows = read_csv(path / "panel.csv")
    for k, s, r, c in rows:
        counts[int(k) - 1, dy.row(index[s], index[r])] = int(c)
    exposure = np.ones((meta["n"], meta["p"]))
    _, rows = read_csv(path / "exposure.csv")
    for k, node, e in rows:
        exposure[int(k) - 1, index[node]] = float(e)
    return NetworkPanel(counts, exposure, meta["directed"], tuple(labels))


def load_panel(path, intervals: IntervalSpec | None = None, directed: bool = True, exposure_path=None):
    """A panel directory written by :func:`write_panel`, or an events CSV."""
    path = Path(path)
    if path.is_dir():
        return read_panel(path)
    if not path.exists():
        raise FileNotFoundError(f"no such panel: {path}")
    return ingest_events(path, intervals, directed, exposure_path)


# ----------------------------------------------------------------------------
# trajectories and fits
# ----------------------------------------------------------------------------


def trajectory_rows(traj: LatentTrajectory):
    var = traj.variances().reshape(traj.n + 1, -1)
    d = traj.d
    for k in range(traj.n + 1):
        for i in range(traj.p):
            for m in range(d):
                yield (k, i, m, float(traj.means[k, i * d + m]), float(var[k, i * d + m]))


def read_trajectory_csv(path, d: int | None = None):
    """Means and variances as ``(n+1, p*d)`` arrays from ``trajectories.csv``."""
    header, rows = read_csv(path)
    if tuple(header) != TRAJECTORY_HEADER:
        raise IngestError(f"{path}: unexpected header {header}")
    arr = np.array([[float(v) for v in r] for r in rows])
    K = int(arr[:, 0].max()) + 1
    p = int(arr[:, 1].max()) + 1
    d = int(arr[:, 2].max()) + 1 if d is None else d
    means = np.zeros((K, p * d))
    var = np.zeros((K, p * d))
    idx = arr[:, 0].astype(int), (arr[:, 1] * d + arr[:, 2]).astype(int)
    means[idx] = arr[:, 3]
    var[idx] = arr[:, 4]
    return means, var


def _trace_to_dict(trace: SurrogateTrace):
    return [
        {**{k: getattr(r, k) for k in r.__dataclass_fields__}, "re_variances": list(r.re_variances)}
        for r in trace.records
    ]


def serialize_fit(fit: FitResult, out, panel: NetworkPanel | None = None) -> list[str]:
    """Write a fit directory; returns the file names written."""
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    files = ["trajectories.csv", "params.json", "trace.csv", "covariances.npz", "fit.json"]
    write_csv(out / "trajectories.csv", TRAJECTORY_HEADER, trajectory_rows(fit.smoothed))
    write_json(out / "params.json", fit.params.to_dict())
    write_csv(out / "trace.csv", TRACE_HEADER,
              ((r.iteration, r.q_poisson, r.q_gaussian, r.sigma_summary) for r in fit.trace.records))
    arrays = {
        "smoothed_means": fit.smoothed.means,
        "smoothed_covariances": fit.smoothed.covariances,
        "filtered_means": fit.filtered.means,
        "filtered_covariances": fit.filtered.covariances,
    }
    if fit.smoothed.backward_gains is not None:
        arrays["backward_gains"] = fit.smoothed.backward_gains
    np.savez(out / "covariances.npz", **arrays)
    write_json(out / "fit.json", {
        "iterations": fit.iterations,
        "converged": fit.converged,
        "diverged": fit.diverged,
        "divergence_reason": fit.divergence_reason,
        "divergence_iteration": fit.divergence_iteration,
        "regression_df": fit.regression_df,
        "latent_df": fit.latent_df,
        "n_fixed": fit.n_fixed,
        "flags": fit.flags,
        "trace": _trace_to_dict(fit.trace),
    })
    if panel is not None:
        res = compute_residuals(fit, panel)
        write_csv(out / "residuals.csv", RESIDUAL_HEADER,
                  zip(res.k, res.sender, res.receiver, res.y, res.mu, res.residual, res.distance, res.flagged))
        files.append("residuals.csv")
    write_manifest(out, "fit", fit.config.to_dict(), fit.seed, files + ["manifest.json"])
    return files


def read_fit(out) -> FitResult:
    """Inverse of :func:`serialize_fit`."""
    out = Path(out)
    manifest = read_manifest(out)
    config = ModelConfig.from_dict(manifest["config"])
    params = Parameters.from_dict(read_json(out / "params.json"))
    with np.load(out / "covariances.npz") as z:
        arrays = {k: z[k] for k in z.files}
    smoothed = LatentTrajectory(config.d, arrays["smoothed_means"], arrays["smoothed_covariances"], "smoothed",
                                arrays.get("backward_gains"))
    filtered = LatentTrajectory(config.d, arrays["filtered_means"], arrays["filtered_covariances"], "filtered")
    meta = read_json(out / "fit.json")
    trace = SurrogateTrace()
    for rec in meta.pop("trace"):
        rec["re_variances"] = tuple(rec["re_variances"])
        trace.append(TraceRecord(**rec))
    return FitResult(config=config, params=params, smoothed=smoothed, filtered=filtered, trace=trace,
                     seed=manifest["seed"], **meta)


def write_truth(truth: LatentTrajectory, params: Parameters, out):
    out = Path(out)
    write_csv(out / "truth_trajectories.csv", TRAJECTORY_HEADER, trajectory_rows(truth))
    write_json(out / "truth_params.json", params.to_dict())


def read_truth(out):
    out = Path(out)
    params = Parameters.from_dict(read_json(out / "truth_params.json"))
    means, _ = read_trajectory_csv(out / "truth_trajectories.csv")
    _, rows = read_csv(out / "truth_trajectories.csv")
    d = max(int(r[2]) for r in rows) + 1
    return LatentTrajectory.from_locations(means.reshape(means.shape[0], -1, d)), params


def ensure_writable(out):
    out = Path(out)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise PermissionError(f"cannot create output directory {out}: {exc}") from None
    if not os.access(out, os.W_OK):
        raise PermissionError(f"output directory {out} is not writable")
    return out
