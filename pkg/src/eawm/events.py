"""Automated event generation for visual, ordinal and nominal observations.

Visual frames go through a per-pixel adaptive Gaussian mixture: a pixel
fires when no component explains the new value (surprise) or when the
component that does is rarely seen (uncertainty). Ordinal and nominal
vectors use direct thresholded differences and category changes.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Iterable, Sequence

import numpy as np

from .errors import ContractViolation

VISUAL, ORDINAL, NOMINAL = "visual", "ordinal", "nominal"
KINDS = (VISUAL, ORDINAL, NOMINAL)

# Offset applied before taking log-brightness so black pixels stay finite.
LOG_OFFSET = 1e-3


@dataclass(frozen=True)
class EventRecord:
    modality_id: int
    index: int
    time: int
    polarity: int

    def __post_init__(self):
        if self.time < 0:
            raise ContractViolation("event time must be non-negative")
        if self.polarity not in (-1, 0, 1):
            raise ContractViolation(f"invalid polarity {self.polarity}")

    def to_line(self):
        return f"{self.time} {self.modality_id} {self.index} {self.polarity}"

    @classmethod
    def from_line(cls, line):
        t, m, i, p = line.split()
        return cls(modality_id=int(m), index=int(i), time=int(t), polarity=int(p))


@dataclass(frozen=True)
class ModalityConfig:
    """Per-modality event and loss settings.

    ``event_threshold`` is the Mahalanobis threshold for visual data and the
    normalised-change threshold for ordinal data; nominal data ignores it.
    """

    modality_id: int
    kind: str
    size: int
    event_threshold: float = 16.0
    ges_threshold: float = 0.5
    event_loss_weight: float = 1.0
    value_range: tuple | None = None
    value_low: tuple | None = None
    num_classes: int = 0
    name: str = ""

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ContractViolation(f"unknown modality kind {self.kind!r}")
        if self.size <= 0:
            raise ContractViolation("modality size must be positive")
        if self.kind != NOMINAL and not self.event_threshold > 0:
            raise ContractViolation("event threshold must be positive")
        if not 0 < self.ges_threshold <= 1:
            raise ContractViolation("GES threshold must lie in (0, 1]")
        if self.event_loss_weight < 0:
            raise ContractViolation("event loss weight must be non-negative")
        if self.kind == ORDINAL:
            if self.value_range is None or len(self.value_range) != self.size:
                raise ContractViolation("ordinal modality needs one range per coordinate")
            if any(not r > 0 for r in self.value_range):
                raise ContractViolation("ordinal value ranges must be positive")
        if self.kind == NOMINAL and self.num_classes < 2:
            raise ContractViolation("nominal modality needs num_classes >= 2")

    @property
    def label(self):
        return self.name or self.kind


def default_visual_config(size, modality_id=0):
    return ModalityConfig(modality_id, VISUAL, size, event_threshold=16.0,
                          ges_threshold=0.5, event_loss_weight=1.0, name="visual")


def default_ordinal_config(value_range, modality_id=0, value_low=None, threshold=0.1):
    return ModalityConfig(modality_id, ORDINAL, len(value_range), event_threshold=threshold,
                          ges_threshold=1.0, event_loss_weight=0.1,
                          value_range=tuple(float(r) for r in value_range),
                          value_low=None if value_low is None else tuple(value_low),
                          name="ordinal")


def default_nominal_config(size, num_classes, modality_id=0):
    return ModalityConfig(modality_id, NOMINAL, size, event_threshold=1.0,
                          ges_threshold=0.5, event_loss_weight=0.1,
                          num_classes=num_classes, name="nominal")


def records_from_polarity(polarity, time, modality_id):
    """Turn a dense polarity vector into EventRecords (zeros are skipped)."""
    idx = np.flatnonzero(polarity)
    return [EventRecord(modality_id, int(i), int(time), int(polarity[i])) for i in idx]


def polarity_from_records(records, size):
    out = np.zeros(size, dtype=np.int8)
    for r in records:
        out[r.index] = r.polarity
    return out


# --- visual -------------------------------------------------------------------


def primitive_visual_polarity(prev_frame, next_frame, contrast):
    prev_frame = np.asarray(prev_frame, dtype=np.float64)
    next_frame = np.asarray(next_frame, dtype=np.float64)
    if prev_frame.shape != next_frame.shape:
        raise ContractViolation(f"frame shapes differ: {prev_frame.shape} vs {next_frame.shape}")
    dl = np.log(next_frame.ravel() + LOG_OFFSET) - np.log(prev_frame.ravel() + LOG_OFFSET)
    pol = np.zeros(dl.shape, dtype=np.int8)
    pol[dl > contrast] = 1
    pol[dl < -contrast] = -1
    return pol


def primitive_visual_events(prev_frame, next_frame, contrast, time=1, modality_id=0):
    """Log-brightness change events between two frames in [0, 1]."""
    pol = primitive_visual_polarity(prev_frame, next_frame, contrast)
    return records_from_polarity(pol, time, modality_id)


@dataclass
class PixelMixtureState:
    """Per-pixel mixture parameters, shape ``(n_pixels, K)``.

    Unused component slots carry zero weight and ``active == False``.
    """

    weights: np.ndarray
    means: np.ndarray
    variances: np.ndarray
    active: np.ndarray
    shape: tuple
    learning_rate: float
    initial_variance: float
    weight_floor: float
    variance_floor: float
    variance_ceiling: float = np.inf
    time: int = 0

    @property
    def n_components(self):
        return self.weights.shape[1]

    def copy(self):
        return replace(self, weights=self.weights.copy(), means=self.means.copy(),
                       variances=self.variances.copy(), active=self.active.copy())


AGMM_DEFAULTS = dict(K=3, learning_rate=0.05, initial_variance=(15 / 255) ** 2,
                     weight_floor=0.05, variance_floor=(4 / 255) ** 2)


def initialize_agmm(first_frame, K=3, learning_rate=0.05, initial_variance=(15 / 255) ** 2,
                    weight_floor=0.05, variance_floor=None, variance_ceiling=None):
    """One component per pixel centred on the first frame, weight 1.

    Variances adapt within ``[variance_floor, variance_ceiling]``; the
    ceiling defaults to ``initial_variance`` so noise cannot inflate a
    component until real changes stop registering.
    """
    if K < 1:
        raise ContractViolation("K must be at least 1")
    if not 0 < learning_rate < 1:
        raise ContractViolation("learning rate must lie in (0, 1)")
    if not initial_variance > 0:
        raise ContractViolation("initial variance must be positive")
    if variance_floor is None:
        variance_floor = min(AGMM_DEFAULTS["variance_floor"], initial_variance)
    if variance_ceiling is None:
        variance_ceiling = initial_variance
    if variance_ceiling < variance_floor:
        raise ContractViolation("variance ceiling is below the variance floor")
    frame = np.asarray(first_frame, dtype=np.float64)
    x = frame.ravel()
    n = x.size
    weights = np.zeros((n, K))
    weights[:, 0] = 1.0
    means = np.zeros((n, K))
    means[:, 0] = x
    variances = np.full((n, K), float(initial_variance))
    active = np.zeros((n, K), dtype=bool)
    active[:, 0] = True
    return PixelMixtureState(weights, means, variances, active, frame.shape,
                             float(learning_rate), float(initial_variance),
                             float(weight_floor), float(variance_floor), float(variance_ceiling))


def agmm_polarity(state, frame, threshold):
    """Update ``state`` in place with one frame; return the polarity vector."""
    if state is None or not isinstance(state, PixelMixtureState):
        raise ContractViolation("AGMM state is not initialised")
    if not threshold > 0:
        raise ContractViolation("threshold must be positive")
    x = np.asarray(frame, dtype=np.float64).ravel()
    if x.size != state.weights.shape[0]:
        raise ContractViolation("frame size does not match the mixture state")
    w, mu, var, act = state.weights, state.means, state.variances, state.active
    rho = state.learning_rate
    n, K = w.shape
    rows = np.arange(n)

    resid = x[:, None] - mu
    dist = np.where(act, resid * resid / var, np.inf)
    fits = dist <= threshold
    # heaviest component among those within the threshold
    matched = np.argmax(np.where(fits, w, -1.0), axis=1)
    has_match = fits[rows, matched]
    nearest = np.argmin(dist, axis=1)

    ref = np.where(has_match, matched, nearest)
    sign = np.where(x - mu[rows, ref] >= 0, 1, -1).astype(np.int8)
    low_weight = has_match & (w[rows, matched] < state.weight_floor)
    fire = ~has_match | low_weight

    w *= 1.0 - rho
    # matched pixels: reinforce and adapt the matched component
    m = rows[has_match]
    k = matched[has_match]
    w[m, k] += rho
    r = resid[m, k]
    mu[m, k] += rho * r
    var[m, k] = np.clip(var[m, k] + rho * (r * r - var[m, k]), state.variance_floor,
                        state.variance_ceiling)

    # unmatched pixels: spawn a component in a free slot or replace the lightest
    u = rows[~has_match]
    if u.size:
        slot_score = np.where(act[u], w[u], -1.0)
        slot = np.argmin(slot_score, axis=1)
        w[u, slot] = rho
        mu[u, slot] = x[u]
        var[u, slot] = state.initial_variance
        act[u, slot] = True

    w /= w.sum(axis=1, keepdims=True)
    state.time += 1
    return np.where(fire, sign, 0).astype(np.int8)


def agmm_step(state, frame, threshold=16.0, modality_id=0):
    """Feed one frame; returns ``(state, events)`` with the state updated in place."""
    pol = agmm_polarity(state, frame, threshold)
    return state, records_from_polarity(pol, state.time, modality_id)


# --- ordinal / nominal --------------------------------------------------------


def ordinal_polarity(prev, nxt, cfg):
    prev = np.asarray(prev, dtype=np.float64)
    nxt = np.asarray(nxt, dtype=np.float64)
    if cfg.kind != ORDINAL:
        raise ContractViolation("ordinal_events needs an ordinal modality config")
    if prev.shape != (cfg.size,) or nxt.shape != (cfg.size,):
        raise ContractViolation(f"expected vectors of length {cfg.size}")
    change = (nxt - prev) / np.asarray(cfg.value_range)
    pol = np.zeros(cfg.size, dtype=np.int8)
    pol[change > cfg.event_threshold] = 1
    pol[change < -cfg.event_threshold] = -1
    return pol


def ordinal_events(prev, nxt, cfg, time=1):
    return records_from_polarity(ordinal_polarity(prev, nxt, cfg), time, cfg.modality_id)


def nominal_polarity(prev, nxt):
    prev = np.asarray(prev)
    nxt = np.asarray(nxt)
    if prev.shape != nxt.shape:
        raise ContractViolation(f"category vectors differ in length: {prev.shape} vs {nxt.shape}")
    return (prev.ravel() != nxt.ravel()).astype(np.int8)


def nominal_events(prev, nxt, time=1, modality_id=0):
    return records_from_polarity(nominal_polarity(prev, nxt), time, modality_id)


def event_density(events, cfg):
    """Fraction of the modality's coordinates carrying a non-zero event."""
    if isinstance(events, np.ndarray):
        return float(np.count_nonzero(events)) / cfg.size
    hit = {e.index for e in events if e.polarity != 0 and e.modality_id == cfg.modality_id}
    if any(e.modality_id != cfg.modality_id for e in events):
        raise ContractViolation("events from another modality")
    return len(hit) / cfg.size


# --- stateful generator used by collectors ------------------------------------


@dataclass
class EventGenerator:
    """Streams events for a set of modalities, one observation at a time.

    Call :meth:`reset` with the first observation of an episode, then
    :meth:`generate` with every following one. Returns dense polarity
    arrays keyed by modality id.
    """

    configs: Sequence[ModalityConfig]
    agmm_params: dict = field(default_factory=dict)
    visual_mode: str = "agmm"

    def __post_init__(self):
        self._prev = {}
        self._agmm = {}

    def reset(self, observation):
        self._prev = {}
        self._agmm = {}
        for cfg in self.configs:
            o = np.asarray(observation[cfg.modality_id])
            self._prev[cfg.modality_id] = o.copy()
            if cfg.kind == VISUAL and self.visual_mode == "agmm":
                self._agmm[cfg.modality_id] = initialize_agmm(o, **self.agmm_params)
        return {cfg.modality_id: np.zeros(cfg.size, dtype=np.int8) for cfg in self.configs}

    def generate(self, observation):
        out = {}
        for cfg in self.configs:
            o = np.asarray(observation[cfg.modality_id])
            prev = self._prev[cfg.modality_id]
            if cfg.kind == VISUAL:
                if self.visual_mode == "agmm":
                    out[cfg.modality_id] = agmm_polarity(self._agmm[cfg.modality_id], o,
                                                         cfg.event_threshold)
                else:
                    out[cfg.modality_id] = primitive_visual_polarity(prev, o, cfg.event_threshold)
            elif cfg.kind == ORDINAL:
                out[cfg.modality_id] = ordinal_polarity(prev, o, cfg)
            else:
                out[cfg.modality_id] = nominal_polarity(prev, o)
            self._prev[cfg.modality_id] = o.copy()
        return out


# --- export -------------------------------------------------------------------


def write_event_stream(path, records: Iterable[EventRecord]):
    with open(path, "w", encoding="ascii") as fh:
        for r in records:
            fh.write(r.to_line() + "\n")


def read_event_stream(path):
    with open(path, encoding="ascii") as fh:
        return [EventRecord.from_line(line) for line in fh if line.strip()]
