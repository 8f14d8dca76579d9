"""Spike-count data: loading, binning, trial splits and the generative simulator."""

import csv
import math
from dataclasses import dataclass, field
from functools import cached_property

import numpy as np

from ccgpfa.container import ContainerError, read_container, write_container
from ccgpfa.gp import KernelSpec, cholesky, kernel_matrix

FORMATS = ("event_csv", "dense_csv", "binary")
EVENT_HEADER = ["trial_id", "neuron_id", "spike_time_ms"]
DENSE_HEADER = ["trial", "neuron", "bin", "count"]
_MAX_COUNT = 2 ** 31 - 1


class DataFormatError(ValueError):
    """Malformed input file; message carries the offending line number."""


class DataValidationError(ValueError):
    """Counts that are negative, non-finite or too large."""


@dataclass(frozen=True, eq=False)
class SpikeData:
    """Binned spike counts of shape ``(trials, neurons, bins)``."""

    counts: np.ndarray
    bin_width_ms: float = 15.0
    neuron_ids: tuple = None
    trial_ids: tuple = None

    def __post_init__(self):
        counts = np.asarray(self.counts)
        if counts.ndim == 2:
            counts = counts[None]
        if counts.ndim != 3:
            raise DataValidationError("counts must have shape (trials, neurons, bins)")
        if counts.dtype.kind == "f":
            if not np.all(np.isfinite(counts)):
                raise DataValidationError("counts contain NaN or infinite values")
            if np.any(counts != np.round(counts)):
                raise DataValidationError("counts must be integers")
        elif counts.dtype.kind not in "iub":
            raise DataValidationError(f"unsupported count dtype {counts.dtype}")
        if counts.size and counts.min() < 0:
            raise DataValidationError("counts must be non-negative")
        if counts.size and counts.max() > _MAX_COUNT:
            raise DataValidationError("counts overflow the supported range")
        counts = counts.astype(np.int64)
        counts.setflags(write=False)
        if not self.bin_width_ms > 0:
            raise DataValidationError("bin_width_ms must be positive")
        object.__setattr__(self, "counts", counts)
        n_trials, n_neurons, _ = counts.shape
        neuron_ids = tuple(range(n_neurons)) if self.neuron_ids is None else tuple(self.neuron_ids)
        trial_ids = tuple(range(n_trials)) if self.trial_ids is None else tuple(self.trial_ids)
        if len(neuron_ids) != n_neurons or len(trial_ids) != n_trials:
            raise DataValidationError("id labels do not match the count tensor shape")
        object.__setattr__(self, "neuron_ids", neuron_ids)
        object.__setattr__(self, "trial_ids", trial_ids)

    @property
    def n_trials(self):
        return self.counts.shape[0]

    @property
    def n_neurons(self):
        return self.counts.shape[1]

    @property
    def n_bins(self):
        return self.counts.shape[2]

    @cached_property
    def summed(self):
        """Counts summed over trials, shape ``(neurons, bins)``."""
        out = self.counts.sum(axis=0).astype(float)
        out.setflags(write=False)
        return out

    def subset_trials(self, index):
        index = np.asarray(index, dtype=int)
        return SpikeData(self.counts[index], self.bin_width_ms, self.neuron_ids,
                         tuple(self.trial_ids[i] for i in index))


@dataclass
class GenerativeTruth:
    weights: np.ndarray
    latents: np.ndarray
    bias: np.ndarray
    lengthscales: np.ndarray
    observation: str
    dispersion: np.ndarray = None
    total_count: np.ndarray = None
    f: np.ndarray = field(default=None, repr=False)

    def __post_init__(self):
        if self.f is None:
            self.f = self.weights @ self.latents + self.bias[:, None]


def _label(text):
    text = text.strip()
    try:
        return int(text)
    except ValueError:
        return text


def _parse_int(text, line, what):
    try:
        value = float(text)
    except ValueError as exc:
        raise DataFormatError(f"line {line}: {what} {text!r} is not a number") from exc
    if not math.isfinite(value) or value != int(value):
        raise DataFormatError(f"line {line}: {what} {text!r} is not an integer")
    return int(value)


def _read_rows(path, header):
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        first = next(reader, None)
        if first is None:
            return []
        if [h.strip() for h in first] != header:
            raise DataFormatError(f"line 1: expected header {','.join(header)}")
        rows = []
        for line, row in enumerate(reader, start=2):
            if not row or all(not cell.strip() for cell in row):
                continue
            if len(row) != len(header):
                raise DataFormatError(f"line {line}: expected {len(header)} fields, got {len(row)}")
            rows.append((line, row))
        return rows


def _index_map(labels, declared, given, what):
    if given is not None:
        ids = tuple(given)
    elif declared is not None:
        ids = tuple(range(declared))
    else:
        ids = tuple(sorted(set(labels), key=lambda v: (isinstance(v, str), v)))
    return ids, {label: i for i, label in enumerate(ids)}


def load_spikes(path, format="event_csv", bin_width_ms=15.0, n_neurons=None, n_bins=None,
                n_trials=None, neuron_ids=None, trial_ids=None):
    """Load spike counts from ``event_csv``, ``dense_csv`` or ``binary``.

    Event rows ``trial_id,neuron_id,spike_time_ms`` are binned into
    ``bin_width_ms`` bins starting at 0 ms; events outside
    ``[0, n_bins * bin_width_ms)`` are dropped. With ``n_bins`` unset the
    window ends at the bin holding the latest event.
    """
    if format not in FORMATS:
        raise ValueError(f"unknown format {format!r}; expected one of {FORMATS}")
    if format == "binary":
        try:
            arrays, meta = read_container(path, kind="spikes")
        except ContainerError as exc:
            raise DataFormatError(str(exc)) from exc
        return SpikeData(arrays["counts"], meta["bin_width_ms"],
                         tuple(meta["neuron_ids"]), tuple(meta["trial_ids"]))

    if format == "event_csv":
        rows = _read_rows(path, EVENT_HEADER)
        events = []
        for line, (trial, neuron, t_ms) in rows:
            try:
                t = float(t_ms)
            except ValueError as exc:
                raise DataFormatError(f"line {line}: spike time {t_ms!r} is not a number") from exc
            if not math.isfinite(t):
                raise DataFormatError(f"line {line}: spike time is not finite")
            events.append((line, _label(trial), _label(neuron), t))
        t_ids, t_map = _index_map([e[1] for e in events], n_trials, trial_ids, "trial")
        n_ids, n_map = _index_map([e[2] for e in events], n_neurons, neuron_ids, "neuron")
        if n_bins is None:
            latest = max((e[3] for e in events), default=-1.0)
            n_bins = int(latest // bin_width_ms) + 1 if latest >= 0 else 0
        counts = np.zeros((len(t_ids), len(n_ids), n_bins), dtype=np.int64)
        for line, trial, neuron, t in events:
            if trial not in t_map or neuron not in n_map:
                raise DataFormatError(f"line {line}: unknown trial or neuron id")
            b = int(math.floor(t / bin_width_ms))
            if 0 <= b < n_bins:
                counts[t_map[trial], n_map[neuron], b] += 1
        return SpikeData(counts, bin_width_ms, n_ids, t_ids)

    rows = _read_rows(path, DENSE_HEADER)
    parsed = []
    for line, row in rows:
        trial, neuron, b, count = (_parse_int(v, line, name) for v, name in zip(row, DENSE_HEADER))
        if count < 0:
            raise DataValidationError(f"line {line}: negative count {count}")
        if count > _MAX_COUNT:
            raise DataValidationError(f"line {line}: count {count} overflows")
        if min(trial, neuron, b) < 0:
            raise DataFormatError(f"line {line}: negative index")
        parsed.append((line, trial, neuron, b, count))
    shape = [n_trials, n_neurons, n_bins]
    for axis in range(3):
        if shape[axis] is None:
            shape[axis] = max((p[axis + 1] for p in parsed), default=-1) + 1
    counts = np.zeros(shape, dtype=np.int64)
    for line, trial, neuron, b, count in parsed:
        if trial >= shape[0] or neuron >= shape[1] or b >= shape[2]:
            raise DataFormatError(f"line {line}: index outside the declared shape")
        counts[trial, neuron, b] = count
    return SpikeData(counts, bin_width_ms, neuron_ids, trial_ids)


def save_spikes(data, path, format="binary"):
    if format == "binary":
        write_container(path, {"counts": data.counts},
                        {"bin_width_ms": data.bin_width_ms, "neuron_ids": list(data.neuron_ids),
                         "trial_ids": list(data.trial_ids)}, kind="spikes")
    elif format == "dense_csv":
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(DENSE_HEADER)
            m, n, t = np.indices(data.counts.shape)
            for row in zip(m.ravel(), n.ravel(), t.ravel(), data.counts.ravel()):
                writer.writerow(row)
    else:
        raise ValueError(f"cannot save to format {format!r}")


def split_trials(data, holdout_fraction, seed=None):
    """Shuffle trials and split into ``(train, test)``."""
    if not 0.0 < holdout_fraction < 1.0:
        raise ValueError("holdout_fraction must lie in (0, 1)")
    if data.n_trials < 2:
        raise ValueError("need at least two trials to split")
    n_test = int(round(holdout_fraction * data.n_trials))
    n_test = min(max(n_test, 1), data.n_trials - 1)
    order = np.random.default_rng(seed).permutation(data.n_trials)
    return data.subset_trials(np.sort(order[n_test:])), data.subset_trials(np.sort(order[:n_test]))


def simulate(n_neurons, n_bins, n_latents, n_trials, lengthscales, observation="negbin", seed=None,
             weight_scale=1.0, bias_mean=0.0, bias_var=0.25, dispersion_range=(1.0, 10.0),
             total_count_range=(2, 20), bin_width_ms=15.0, weights=None, bias=None):
    """Draw spike counts from the GPFA generative model.

    Latents ``X_d ~ N(0, K_d)`` on the grid ``1..T`` are shared by all
    trials. ``W`` rows are ``N(0, weight_scale^2 I)``, biases
    ``N(bias_mean, bias_var)``, dispersions log-uniform on
    ``dispersion_range`` (negbin) and total counts uniform on
    ``total_count_range`` (binomial).
    """
    if min(n_neurons, n_bins, n_latents, n_trials) < 1:
        raise ValueError("all dimensions must be positive")
    lengthscales = np.broadcast_to(np.asarray(lengthscales, dtype=float), (n_latents,)).copy()
    rng = np.random.default_rng(seed)
    grid = np.arange(1, n_bins + 1, dtype=float)
    X = np.empty((n_latents, n_bins))
    for d in range(n_latents):
        L = cholesky(kernel_matrix(KernelSpec(lengthscales[d]), grid))
        X[d] = L @ rng.standard_normal(n_bins)
    W = weight_scale * rng.standard_normal((n_neurons, n_latents)) if weights is None else np.asarray(weights, float)
    beta = bias_mean + math.sqrt(bias_var) * rng.standard_normal(n_neurons) if bias is None else np.asarray(bias, float)
    f = W @ X + beta[:, None]
    p_success = 1.0 / (1.0 + np.exp(-f))
    if observation == "negbin":
        lo, hi = dispersion_range
        r = np.exp(rng.uniform(math.log(lo), math.log(hi), n_neurons))
        # numpy counts failures before r successes with success probability 1 - p.
        counts = rng.negative_binomial(np.broadcast_to(r[:, None], f.shape), 1.0 - p_success,
                                       size=(n_trials,) + f.shape)
        truth = GenerativeTruth(W, X, beta, lengthscales, observation, dispersion=r, f=f)
    elif observation == "binomial":
        lo, hi = total_count_range
        k = rng.integers(lo, hi + 1, n_neurons)
        counts = rng.binomial(np.broadcast_to(k[:, None], f.shape), p_success,
                              size=(n_trials,) + f.shape)
        truth = GenerativeTruth(W, X, beta, lengthscales, observation, total_count=k, f=f)
    else:
        raise ValueError(f"unknown observation model {observation!r}")
    return SpikeData(counts, bin_width_ms), truth
