"""Training epochs, label assignment, evaluation, ensembles and weight diagnostics."""

from __future__ import annotations

import csv
import io
import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Callable, Sequence

import numpy as np

from .network import (
    NetworkConfig,
    NetworkState,
    NoResponseAfterMaxRetries,
    encode_checkpoint,
    present_pattern,
)
from .plasticity import (
    PlasticityMode,
    PlasticityParams,
    PsthStdp,
    calibrate_psth_stdp,
    reference_mean_abs_dw,
)
from .preprocess import Pattern, compute_psth

log = logging.getLogger(__name__)

N_CLASSES = 10
UNASSIGNED = -1


@dataclass
class TrainLog:
    winners: list[int] = field(default_factory=list)
    first_spike_ms: list[float] = field(default_factory=list)
    retries: list[int] = field(default_factory=list)


@dataclass
class Model:
    cfg: NetworkConfig
    weights: np.ndarray
    theta: np.ndarray
    gain: float
    labels: np.ndarray = None  # type: ignore[assignment]
    log: TrainLog = field(default_factory=TrainLog, repr=False)

    def __post_init__(self):
        if self.labels is None:
            self.labels = np.full(self.cfg.n_exc, UNASSIGNED, dtype=np.int64)

    def state(self) -> NetworkState:
        return NetworkState(self.cfg, self.weights.copy(), self.theta.copy(), self.gain)

    def checkpoint_bytes(self) -> bytes:
        return encode_checkpoint(self.weights, self.theta, self.labels)


def train(
    cfg: NetworkConfig,
    mode: PlasticityMode,
    patterns: Sequence[Pattern],
    epochs: int = 1,
    seed: int = 0,
    shuffle_seed: int | None = None,
    on_epoch: Callable[[int, Model], None] | None = None,
    on_pattern: Callable[[int, Model], None] | None = None,
) -> Model:
    """Unsupervised training; labels are never read here.

    Patterns are presented in the given order every epoch unless
    ``shuffle_seed`` is set. ``on_epoch(epoch, model)`` receives a snapshot
    after every completed epoch (1-based).
    """
    if not len(patterns):
        raise ValueError("no training patterns")
    state = NetworkState.initial(cfg, seed)
    learner = mode.learner(cfg.n_input, cfg.dt)
    tlog = TrainLog()
    rng = np.random.default_rng(shuffle_seed) if shuffle_seed is not None else None
    for epoch in range(1, epochs + 1):
        order = rng.permutation(len(patterns)) if rng is not None else range(len(patterns))
        for i in order:
            try:
                res = present_pattern(state, patterns[i], learner)
            except NoResponseAfterMaxRetries as exc:
                exc.pattern_index = int(i)
                raise
            tlog.winners.append(res.winner)
            tlog.first_spike_ms.append(res.first_spike_time)
            tlog.retries.append(res.retries)
            if on_pattern is not None:
                on_pattern(int(i), _snapshot(state, tlog))
        log.info("epoch %d done: gain %.3f, mean theta %.4f mV", epoch, state.gain, state.theta.mean())
        if on_epoch is not None:
            on_epoch(epoch, _snapshot(state, tlog))
    return _snapshot(state, tlog)


def _snapshot(state: NetworkState, tlog: TrainLog) -> Model:
    return Model(state.cfg, state.weights.copy(), state.theta.copy(), state.gain, log=tlog)


def psth_mode(
    train_patterns: Sequence[Pattern],
    cfg: NetworkConfig,
    params: PlasticityParams,
    seed: int = 0,
    n_calib: int = 100,
    rho: float = 0.1,
):
    """Derive the PSTH rule from the training set; returns ``(mode, calibration)``.

    The reference update size is the trace rule with the post spike at the
    end of each of the first ``n_calib`` patterns, evaluated at the mean
    initial weight of every input.
    """
    H = compute_psth(train_patterns)
    w = NetworkState.initial(cfg, seed).weights.mean(axis=0)
    calib_set = list(train_patterns[:n_calib])
    reference = reference_mean_abs_dw(calib_set, w, params)
    cal = calibrate_psth_stdp(H, calib_set, reference, w, params, rho)
    return PsthStdp(cal.h, cal.a, cal.b, params), cal


# --- responses with plasticity off ------------------------------------------------

_worker_model: Model | None = None


def _respond_one(model: Model, state: NetworkState, pattern: Pattern):
    state.gain = model.gain
    try:
        res = present_pattern(state, pattern, None, adapt=False)
    except NoResponseAfterMaxRetries:
        return np.zeros(model.cfg.n_exc, dtype=np.int64), False
    return res.spike_counts, True


def _init_worker(model: Model) -> None:
    global _worker_model
    _worker_model = model


def _respond_chunk(patterns: list[Pattern]):
    model = _worker_model
    state = model.state()
    return [_respond_one(model, state, p) for p in patterns]


def responses(model: Model, patterns: Sequence[Pattern], workers: int = 1):
    """Spike counts ``(n_patterns, n_exc)`` and a responsive mask, with learning frozen.

    Every pattern starts from the trained input gain, so results do not
    depend on pattern order or on the number of workers.
    """
    n = len(patterns)
    counts = np.zeros((n, model.cfg.n_exc), dtype=np.int64)
    responsive = np.zeros(n, dtype=bool)
    if workers <= 1 or n < 2 * workers:
        state = model.state()
        out = [_respond_one(model, state, p) for p in patterns]
    else:
        size = math.ceil(n / workers)
        chunks = [list(patterns[i:i + size]) for i in range(0, n, size)]
        with ProcessPoolExecutor(workers, initializer=_init_worker, initargs=(model,)) as pool:
            out = [r for part in pool.map(_respond_chunk, chunks) for r in part]
    for i, (c, ok) in enumerate(out):
        counts[i] = c
        responsive[i] = ok
    return counts, responsive


def labels_from_counts(counts: np.ndarray, labels: Sequence[int]) -> np.ndarray:
    """Per-neuron class with the highest total spike count; ties go to the lower class."""
    labels = np.asarray(labels, dtype=np.int64)
    per_class = np.zeros((N_CLASSES, counts.shape[1]), dtype=np.int64)
    np.add.at(per_class, labels, counts)
    out = np.argmax(per_class, axis=0).astype(np.int64)
    out[per_class.sum(axis=0) == 0] = UNASSIGNED
    return out


def assign_labels(model: Model, patterns: Sequence[Pattern], workers: int = 1) -> Model:
    if any(p.label is None for p in patterns):
        raise ValueError("label assignment needs labelled patterns")
    counts, _ = responses(model, patterns, workers)
    return replace(model, labels=labels_from_counts(counts, [p.label for p in patterns]))


@dataclass
class EvalReport:
    """Classification results.

    ``confusion`` is ``(10, 11)``: rows are true classes, columns 0-9 the
    predicted class and column 10 patterns with no prediction.
    """

    accuracy: float
    confusion: np.ndarray
    truth: np.ndarray
    predictions: np.ndarray  # -1 = no prediction
    responsive: np.ndarray
    unresponsive: int

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["pattern_id", "true", "pred", "responsive"])
        for i, (t, p, r) in enumerate(zip(self.truth, self.predictions, self.responsive)):
            writer.writerow([i, int(t), int(p), int(bool(r))])
        return buf.getvalue()

    def summary(self) -> str:
        return (f"accuracy={self.accuracy:.4f} n={len(self.truth)} "
                f"correct={int(np.trace(self.confusion))} unresponsive={self.unresponsive}")


def predict_from_counts(counts: np.ndarray, labels: np.ndarray) -> np.ndarray:
    """Class with the largest summed count over its assigned neurons, -1 if none spiked."""
    scores = np.zeros((counts.shape[0], N_CLASSES), dtype=np.int64)
    for c in range(N_CLASSES):
        members = labels == c
        if members.any():
            scores[:, c] = counts[:, members].sum(axis=1)
    pred = np.argmax(scores, axis=1).astype(np.int64)
    pred[scores.max(axis=1) == 0] = -1
    return pred


def evaluate(model: Model, patterns: Sequence[Pattern], workers: int = 1) -> EvalReport:
    counts, responsive = responses(model, patterns, workers)
    return report_from_counts(counts, responsive, model.labels, [p.label for p in patterns])


def report_from_counts(counts, responsive, labels, truth) -> EvalReport:
    truth = np.asarray(truth, dtype=np.int64)
    pred = predict_from_counts(counts, np.asarray(labels))
    no_pred = pred < 0
    confusion = np.zeros((N_CLASSES, N_CLASSES + 1), dtype=np.int64)
    np.add.at(confusion, (truth, np.where(no_pred, N_CLASSES, pred)), 1)
    n = len(truth)
    accuracy = float(np.trace(confusion)) / n if n else 0.0
    return EvalReport(accuracy, confusion, truth, pred, responsive & ~no_pred, int(no_pred.sum()))


def ensemble_predict(predictions: Sequence[int]) -> int:
    """Majority vote; a tie goes to the class of the earliest network among the tied classes.

    Networks that made no prediction (-1) do not vote.
    """
    votes: dict[int, int] = {}
    for p in predictions:
        if p >= 0:
            votes[p] = votes.get(p, 0) + 1
    if not votes:
        return -1
    top = max(votes.values())
    for p in predictions:
        if votes.get(p) == top:
            return int(p)
    raise AssertionError("unreachable")


def ensemble_evaluate(reports: Sequence[EvalReport]) -> EvalReport:
    """Combine per-network reports over the same test set by majority vote."""
    truth = reports[0].truth
    for r in reports[1:]:
        if not np.array_equal(r.truth, truth):
            raise ValueError("reports cover different test sets")
    stacked = np.stack([r.predictions for r in reports], axis=1)
    pred = np.array([ensemble_predict(row) for row in stacked], dtype=np.int64)
    no_pred = pred < 0
    confusion = np.zeros((N_CLASSES, N_CLASSES + 1), dtype=np.int64)
    np.add.at(confusion, (truth, np.where(no_pred, N_CLASSES, pred)), 1)
    accuracy = float(np.trace(confusion)) / len(truth) if len(truth) else 0.0
    return EvalReport(accuracy, confusion, truth, pred, ~no_pred, int(no_pred.sum()))


# --- weight diagnostics -----------------------------------------------------------


def weight_histogram(weights: np.ndarray, bins: int = 20, w_max: float = 1.0):
    """Normalised histogram over ``[0, w_max]`` and the mass in the outer deciles."""
    w = np.asarray(weights, dtype=np.float64).ravel()
    hist, edges = np.histogram(w, bins=bins, range=(0.0, w_max))
    hist = hist / max(w.size, 1)
    score = float(np.count_nonzero((w < 0.1 * w_max) | (w > 0.9 * w_max))) / max(w.size, 1)
    return hist, edges, score


def histogram_csv(hist: np.ndarray, edges: np.ndarray, score: float) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["bin_lo", "bin_hi", "fraction"])
    for lo, hi, f in zip(edges[:-1], edges[1:], hist):
        writer.writerow([repr(float(lo)), repr(float(hi)), repr(float(f))])
    buf.write(f"# bimodality={score!r}\n")
    return buf.getvalue()


def weight_mosaic(weights: np.ndarray, w_max: float = 1.0, side: int = 34) -> np.ndarray:
    """Tile every neuron's receptive field into a square grid of ``side x side`` tiles."""
    weights = np.asarray(weights, dtype=np.float64)
    n = weights.shape[0]
    tiles = math.isqrt(n)
    if tiles * tiles < n:
        tiles += 1
    img = np.zeros((tiles * side, tiles * side), dtype=np.uint8)
    scaled = np.floor(np.clip(weights / w_max, 0.0, 1.0) * 255.0 + 0.5).astype(np.uint8)
    for j in range(n):
        r, c = divmod(j, tiles)
        img[r * side:(r + 1) * side, c * side:(c + 1) * side] = scaled[j].reshape(side, side)
    return img


def export_weight_grid(model: Model) -> bytes:
    img = weight_mosaic(model.weights, model.cfg.w_max)
    h, w = img.shape
    return f"P5\n{w} {h}\n255\n".encode("ascii") + img.tobytes()
