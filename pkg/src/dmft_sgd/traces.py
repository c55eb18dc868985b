"""Observable traces on the time grid and their CSV serialization."""

import csv
import io
from dataclasses import dataclass, field

import numpy as np

from .errors import StructuralError

CSV_HEADER = ["time", "observable_name", "component_row", "component_col",
              "mean", "stderr", "n_trials"]


def _fmt(v):
    """Round-trippable cell formatting; numpy scalars print as plain numbers."""
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    if isinstance(v, (int, np.integer)):
        return int(v)
    return v


@dataclass
class ObservableTrace:
    """Trial-aggregated observables of one engine run.

    overlap is d^{-1} theta^T theta_star per time, self_overlap is
    d^{-1} theta^T theta, train_loss the averaged empirical loss, and xi_cdf
    the empirical CDF of ||x_i^T theta|| at the configured thresholds.
    """

    times: np.ndarray
    overlap: np.ndarray  # (P, k, k_star)
    self_overlap: np.ndarray  # (P, k, k)
    train_loss: np.ndarray  # (P,)
    xi_cdf: np.ndarray  # (P, n_thresholds)
    overlap_stderr: np.ndarray
    self_overlap_stderr: np.ndarray
    train_loss_stderr: np.ndarray
    xi_cdf_stderr: np.ndarray
    thresholds: tuple
    n_trials: int
    meta: dict = field(default_factory=dict)
    per_trial: dict = field(default_factory=dict)  # in-memory only, not serialized

    def observable(self, name):
        return {
            "overlap": (self.overlap, self.overlap_stderr),
            "self_overlap": (self.self_overlap, self.self_overlap_stderr),
            "train_loss": (self.train_loss, self.train_loss_stderr),
            "xi_cdf": (self.xi_cdf, self.xi_cdf_stderr),
        }[name]


def from_trials(times, per_trial: dict, thresholds, meta=None) -> ObservableTrace:
    """Aggregate stacked per-trial observable arrays into mean/stderr."""

    def agg(key):
        arr = np.asarray(per_trial[key])
        mean = arr.mean(axis=0)
        n = arr.shape[0]
        stderr = arr.std(axis=0, ddof=1) / np.sqrt(n) if n > 1 else np.zeros_like(mean)
        return mean, stderr

    overlap, overlap_se = agg("overlap")
    self_o, self_se = agg("self_overlap")
    loss, loss_se = agg("train_loss")
    cdf, cdf_se = agg("xi_cdf")
    return ObservableTrace(
        times=np.asarray(times),
        overlap=overlap, overlap_stderr=overlap_se,
        self_overlap=self_o, self_overlap_stderr=self_se,
        train_loss=loss, train_loss_stderr=loss_se,
        xi_cdf=cdf, xi_cdf_stderr=cdf_se,
        thresholds=tuple(thresholds),
        n_trials=np.asarray(per_trial["overlap"]).shape[0],
        meta=dict(meta or {}),
        per_trial={k: np.asarray(v) for k, v in per_trial.items()},
    )


def _rows_of(trace: ObservableTrace):
    p = trace.times.shape[0]
    for name in ("overlap", "self_overlap", "train_loss", "xi_cdf"):
        mean, stderr = trace.observable(name)
        # canonical (P, rows, cols): scalars become 1x1, CDF thresholds are rows
        mean3 = mean.reshape(p, -1, mean.shape[2] if mean.ndim == 3 else 1)
        se3 = stderr.reshape(mean3.shape)
        for ti in range(p):
            for row in range(mean3.shape[1]):
                for col in range(mean3.shape[2]):
                    yield (trace.times[ti], name, row, col, mean3[ti, row, col],
                           se3[ti, row, col], trace.n_trials)


def write_trace_csv(path, trace: ObservableTrace):
    """Write a trace; provenance (seed etc.) goes into # header lines."""
    with open(path, "w", newline="") as fh:
        for key in sorted(trace.meta):
            fh.write(f"# {key}={trace.meta[key]}\n")
        fh.write(f"# thresholds={','.join(repr(t) for t in trace.thresholds)}\n")
        writer = csv.writer(fh)
        writer.writerow(CSV_HEADER)
        for row in _rows_of(trace):
            writer.writerow([_fmt(v) for v in row])


def read_trace_csv(path) -> ObservableTrace:
    meta = {}
    thresholds = (1.0,)
    with open(path) as fh:
        lines = fh.readlines()
    body = []
    for line in lines:
        if line.startswith("# "):
            key, _, val = line[2:].strip().partition("=")
            if key == "thresholds":
                thresholds = tuple(float(x) for x in val.split(",") if x)
            else:
                meta[key] = val
        else:
            body.append(line)
    reader = csv.reader(io.StringIO("".join(body)))
    header = next(reader)
    if header != CSV_HEADER:
        raise StructuralError(f"unexpected CSV header {header}")
    cells = {}
    n_trials = 1
    for rec in reader:
        t, name, row, col = float(rec[0]), rec[1], int(rec[2]), int(rec[3])
        cells.setdefault(name, {})[(t, row, col)] = (float(rec[4]), float(rec[5]))
        n_trials = int(rec[6])
    times = np.array(sorted({key[0] for d in cells.values() for key in d}))
    t_index = {t: i for i, t in enumerate(times)}
    p = len(times)

    def unpack(name, shape):
        mean = np.zeros((p,) + shape)
        stderr = np.zeros((p,) + shape)
        for (t, row, col), (m, se) in cells.get(name, {}).items():
            idx = (t_index[t], row, col)[: 1 + len(shape)]
            mean[idx] = m
            stderr[idx] = se
        return mean, stderr

    k = 1 + max((key[1] for key in cells.get("overlap", {})), default=0)
    k_star = 1 + max((key[2] for key in cells.get("overlap", {})), default=0)
    overlap, overlap_se = unpack("overlap", (k, k_star))
    self_o, self_se = unpack("self_overlap", (k, k))
    loss, loss_se = unpack("train_loss", ())
    cdf, cdf_se = unpack("xi_cdf", (len(thresholds),))
    return ObservableTrace(
        times=times, overlap=overlap, overlap_stderr=overlap_se,
        self_overlap=self_o, self_overlap_stderr=self_se,
        train_loss=loss, train_loss_stderr=loss_se,
        xi_cdf=cdf, xi_cdf_stderr=cdf_se,
        thresholds=thresholds, n_trials=n_trials, meta=meta,
    )


def compare_traces(base: ObservableTrace, others: list, names=None):
    """Per-time differences and stderr-normalized z-scores against a baseline.

    Traces on a different grid are resampled to the baseline grid by nearest
    grid point; a warning row records that this happened.  Returns (rows,
    summary) where summary holds per-(pair, observable) max |z|.
    """
    names = names or [f"trace{i+1}" for i in range(len(others))]
    rows = []
    summary = {}
    for pair_name, other in zip(names, others):
        resampled = not (len(other.times) == len(base.times)
                         and np.allclose(other.times, base.times))
        if resampled:
            idx = np.abs(other.times[None, :] - base.times[:, None]).argmin(axis=1)
            rows.append((pair_name, "warning_resampled", -1, -1, 0.0, 0.0, 0.0, 0.0))
        else:
            idx = np.arange(len(base.times))
        for name in ("overlap", "self_overlap", "train_loss", "xi_cdf"):
            a_mean, a_se = base.observable(name)
            b_mean, b_se = other.observable(name)
            p = len(base.times)
            a_mean = a_mean.reshape(p, -1)
            a_se = a_se.reshape(p, -1)
            b_mean = b_mean.reshape(len(other.times), -1)[idx]
            b_se = b_se.reshape(len(other.times), -1)[idx]
            if a_mean.shape != b_mean.shape:
                raise StructuralError(f"observable {name} has mismatched components")
            diff = b_mean - a_mean
            se = np.sqrt(a_se**2 + b_se**2)
            with np.errstate(divide="ignore", invalid="ignore"):
                z = np.where(se > 0, diff / se, np.where(diff == 0, 0.0, np.inf))
            for ti in range(p):
                for c in range(a_mean.shape[1]):
                    rows.append((pair_name, name, ti, c, base.times[ti],
                                 a_mean[ti, c], b_mean[ti, c], z[ti, c]))
            summary[(pair_name, name)] = float(np.abs(z).max())
    return rows, summary


def write_compare_csv(path, rows, summary):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["pair", "observable_name", "time_index", "component",
                         "time", "base_mean", "other_mean", "z"])
        for row in rows:
            writer.writerow([_fmt(v) for v in row])
        for (pair, name), maxz in sorted(summary.items()):
            writer.writerow([pair, name, "max_abs_z", "", "", "", "", _fmt(maxz)])
