"""Univariate Hawkes process with an exponential kernel.

Intensity ``mu + sum_k alpha * exp(-decay * (t - t_k))``.  The compensator
is closed form, which makes this module the exact reference model for the
synthetic corpora and for testing the neural model.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, asdict
from pathlib import Path

import numpy as np

from .seqdata import EventSequence, Descriptor, Record, write_corpus


@dataclass(frozen=True)
class HawkesParams:
    mu: float
    alpha: float
    decay: float

    def __post_init__(self):
        if not self.mu > 0:
            raise ValueError("mu must be positive")
        if not self.alpha >= 0:
            raise ValueError("alpha must be non-negative")
        if not self.decay > 0:
            raise ValueError("decay must be positive")
        if not self.branching_ratio < 1:
            raise ValueError(f"branching ratio {self.branching_ratio:.3f} >= 1 (non-stationary)")

    @property
    def branching_ratio(self) -> float:
        return self.alpha / self.decay

    @property
    def stationary_rate(self) -> float:
        return self.mu / (1.0 - self.branching_ratio)

    def rescaled(self, scale: float) -> "HawkesParams":
        """Parameters of the same process observed in time units ``t / scale``."""
        return HawkesParams(self.mu * scale, self.alpha * scale, self.decay * scale)


def _check_history(history, t=None):
    history = np.asarray(history, dtype=float)
    if history.size and np.any(np.diff(history) <= 0):
        raise ValueError("history must be strictly increasing")
    if t is not None and history.size and history[-1] >= t:
        raise ValueError("history must precede t")
    return history


def intensity(params: HawkesParams, history, t: float) -> float:
    history = _check_history(history, t)
    return params.mu + params.alpha * float(np.sum(np.exp(-params.decay * (t - history))))


def compensator(params: HawkesParams, history, start: float, end: float) -> float:
    """Integral of the intensity over ``[start, end]`` given events before ``start``."""
    history = np.asarray(history, dtype=float)
    history = history[history <= start]
    a, b = params.alpha, params.decay
    excite = np.exp(-b * (start - history)) - np.exp(-b * (end - history))
    return params.mu * (end - start) + a / b * float(np.sum(excite))


def event_pdf(params: HawkesParams, history, t: float, start: float | None = None) -> float:
    """Density of the next event at ``t`` after the last history event.

    ``start`` defaults to the last history event (or 0 for an empty history).
    """
    history = _check_history(history, t)
    if start is None:
        start = float(history[-1]) if history.size else 0.0
    if t <= start:
        raise ValueError("t must follow the start of the interval")
    return intensity(params, history, t) * np.exp(-compensator(params, history, start, t))


def loglik_exact(params: HawkesParams, seq, window_end: float) -> float:
    """Log-likelihood ``sum_j log lambda(t_j) - int_0^T lambda`` (O(n) recursion)."""
    seq = np.asarray(seq, dtype=float)
    if seq.size and (np.any(np.diff(seq) <= 0) or seq[0] < 0 or seq[-1] > window_end):
        raise ValueError("events must be strictly increasing inside [0, window_end]")
    mu, a, b = params.mu, params.alpha, params.decay
    log_terms = 0.0
    # excite = sum_{k<j} exp(-b (t_j - t_k)), updated recursively
    excite = 0.0
    prev = None
    for t in seq:
        if prev is not None:
            excite = (excite + 1.0) * np.exp(-b * (t - prev))
        log_terms += np.log(mu + a * excite)
        prev = t
    comp = mu * window_end + a / b * float(np.sum(1.0 - np.exp(-b * (window_end - seq))))
    return float(log_terms - comp)


def simulate(params: HawkesParams, window_end: float, seed=None) -> np.ndarray:
    """Ogata thinning on ``[0, window_end]``.

    Between events the intensity only decays, so its value just after the
    most recent accepted event (or current candidate) bounds it from above.
    """
    if not window_end > 0:
        raise ValueError("window_end must be positive")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    mu, a, b = params.mu, params.alpha, params.decay
    events = []
    t = 0.0
    excite = 0.0  # sum of kernel terms at time t, without the alpha factor
    while True:
        bound = mu + a * excite
        w = rng.exponential(1.0 / bound)
        t_new = t + w
        if t_new > window_end:
            break
        excite *= np.exp(-b * w)
        t = t_new
        if rng.uniform() * bound <= mu + a * excite:
            events.append(t)
            excite += 1.0
    return np.asarray(events)


@dataclass
class DescriptorLink:
    """Log-linear map from a descriptor to ``(log mu, log alpha, log decay)``.

    ``weight_matrix`` has shape ``(3, D)`` and ``intercept`` shape ``(3,)``.
    """

    weight_matrix: np.ndarray
    intercept: np.ndarray
    noise_scale: float = 0.0

    def __post_init__(self):
        self.weight_matrix = np.asarray(self.weight_matrix, dtype=float)
        self.intercept = np.asarray(self.intercept, dtype=float)
        if self.weight_matrix.ndim != 2 or self.weight_matrix.shape[0] != 3:
            raise ValueError("weight_matrix must have shape (3, D)")
        if self.noise_scale < 0:
            raise ValueError("noise_scale must be non-negative")

    @property
    def descriptor_dim(self) -> int:
        return self.weight_matrix.shape[1]

    @classmethod
    def random(
        cls,
        descriptor_dim: int,
        seed=None,
        log_mu: float = np.log(0.6),
        log_alpha: float = np.log(0.6),
        log_decay: float = np.log(1.5),
        spread: tuple[float, float, float] = (0.7, 0.25, 0.5),
        noise_scale: float = 0.0,
    ) -> "DescriptorLink":
        """Random link whose rows have norms ``spread`` (log-scale heterogeneity)."""
        rng = np.random.default_rng(seed)
        W = rng.standard_normal((3, descriptor_dim))
        W *= np.asarray(spread)[:, None] / np.linalg.norm(W, axis=1, keepdims=True)
        return cls(W, np.array([log_mu, log_alpha, log_decay]), noise_scale)

    def log_params(self, descriptor, rng=None) -> np.ndarray:
        z = self.intercept + self.weight_matrix @ np.asarray(descriptor, dtype=float)
        if self.noise_scale > 0:
            if rng is None:
                raise ValueError("a random stream is needed when noise_scale > 0")
            z = z + self.noise_scale * rng.standard_normal(3)
        return z

    def params(self, descriptor, rng=None) -> HawkesParams:
        mu, alpha, decay = np.exp(self.log_params(descriptor, rng))
        return HawkesParams(float(mu), float(alpha), float(decay))

    def is_admissible(self, descriptor) -> bool:
        z = self.intercept + self.weight_matrix @ np.asarray(descriptor, dtype=float)
        return bool(z[1] < z[2])


def generate_corpus(
    link: DescriptorLink,
    n_sequences: int,
    descriptor_dim: int,
    window_end: float,
    seed,
    max_tries: int = 1000,
    min_events: int = 2,
    descriptors=None,
    prefix: str = "seq",
) -> tuple[list[Record], dict[str, HawkesParams]]:
    """Draw descriptors, map them to Hawkes parameters and simulate.

    Draws that violate stationarity or give fewer than ``min_events`` events
    are redrawn; more than ``max_tries`` redraws for one sequence is an error.
    ``descriptors`` optionally fixes the descriptor of every sequence (then
    only the event times are redrawn).

    Returns the records and a map from sequence id to generating parameters.
    """
    if n_sequences < 1:
        raise ValueError("n_sequences must be at least 1")
    if descriptor_dim != link.descriptor_dim:
        raise ValueError("descriptor_dim does not match the link")
    rng = np.random.default_rng(seed)
    width = max(3, len(str(n_sequences - 1)))
    records: list[Record] = []
    truth: dict[str, HawkesParams] = {}
    for i in range(n_sequences):
        sid = f"{prefix}-{i:0{width}d}"
        for _ in range(max_tries):
            if descriptors is None:
                d = rng.standard_normal(descriptor_dim)
            else:
                d = np.asarray(descriptors[i], dtype=float)
            try:
                params = link.params(d, rng)
            except ValueError:
                continue
            events = simulate(params, window_end, rng)
            if events.shape[0] >= min_events and np.all(np.diff(events) > 0):
                break
        else:
            raise RuntimeError(f"sequence {i}: rejection loop exceeded {max_tries} draws")
        seq = EventSequence(sid, events / window_end, sid, (0.0, float(window_end)))
        records.append((seq, Descriptor(sid, d)))
        truth[sid] = params
    return records, truth


def drifting_descriptors(link: DescriptorLink, n: int, seed, span=(0.95, 0.35), pool: int = 64) -> np.ndarray:
    """``n`` admissible descriptors whose log base rate falls in even steps.

    Used for continual-learning streams: each new sequence is slower than
    the ones before it by the same factor. The steps run from the ``span[0]``
    to the ``span[1]`` quantile of log mu over a pool of ``pool * n``
    admissible draws, and each step takes the nearest unused draw.
    """
    rng = np.random.default_rng(seed)
    cands = []
    while len(cands) < pool * n:
        d = rng.standard_normal(link.descriptor_dim)
        if link.is_admissible(d):
            cands.append(d)
    cands = np.array(cands)
    rate = cands @ link.weight_matrix[0]
    targets = np.linspace(np.quantile(rate, span[0]), np.quantile(rate, span[1]), n)
    free = np.ones(len(cands), dtype=bool)
    out = []
    for t in targets:
        k = int(np.argmin(np.where(free, np.abs(rate - t), np.inf)))
        free[k] = False
        out.append(cands[k])
    return np.array(out)


SYNTHETIC_SPREAD = (1.5, 0.2, 0.2)


def synthetic_corpus(
    n_sequences: int,
    descriptor_dim: int = 3,
    window_end: float = 10.0,
    seed: int = 0,
    spread=SYNTHETIC_SPREAD,
    drift: bool = False,
):
    """The seeded synthetic corpus used by the command line and the acceptance runs.

    Returns ``(records, truth, link)``.
    """
    link = DescriptorLink.random(descriptor_dim, seed=[seed, 1], spread=tuple(spread), log_mu=0.0)
    descriptors = drifting_descriptors(link, n_sequences, [seed, 2]) if drift else None
    records, truth = generate_corpus(link, n_sequences, descriptor_dim, window_end, [seed, 3], descriptors=descriptors)
    return records, truth, link


def write_params_sidecar(path, truth: dict[str, HawkesParams]) -> None:
    data = {sid: asdict(p) for sid, p in truth.items()}
    Path(path).write_text(json.dumps(data, indent=1, sort_keys=True) + "\n", encoding="utf-8")


def read_params_sidecar(path) -> dict[str, HawkesParams]:
    data = json.loads(Path(path).read_text(encoding="utf-8"))
    return {sid: HawkesParams(**p) for sid, p in data.items()}


def write_synthetic(out_path, records, truth) -> Path:
    """Write a corpus file plus its ``.params.json`` sidecar; returns the sidecar path."""
    out_path = Path(out_path)
    write_corpus(out_path, records)
    sidecar = out_path.with_name(out_path.name + ".params.json")
    write_params_sidecar(sidecar, truth)
    return sidecar


def sequence_loglik(params: HawkesParams, seq: EventSequence, start_index: int = 1) -> np.ndarray:
    """Per-event conditional log-density of ``seq`` in normalized time.

    Entry ``k`` is ``log p(t_k | t_0..t_{k-1})`` for ``k >= start_index``;
    ``params`` are in raw time units and are rescaled to the normalized axis.
    """
    span = seq.raw_span[1] - seq.raw_span[0]
    p = params.rescaled(span)
    ts = seq.timestamps
    out = np.zeros(len(ts))
    mu, a, b = p.mu, p.alpha, p.decay
    excite = 0.0  # sum_{i<=k-1} exp(-b (t_{k-1} - t_i))
    for k in range(len(ts)):
        if k >= 1:
            gap = ts[k] - ts[k - 1]
            lam = mu + a * excite * np.exp(-b * gap)
            comp = mu * gap + a / b * excite * (1.0 - np.exp(-b * gap))
            out[k] = np.log(lam) - comp
            excite = excite * np.exp(-b * gap) + 1.0
        else:
            excite = 1.0
        # events before t_0 are unobserved
    return out[start_index:]


def predict_median(params: HawkesParams, seq: EventSequence, k: int, tol: float = 1e-10) -> float:
    """Median of the next-event time after event ``k`` under the true model (normalized time)."""
    span = seq.raw_span[1] - seq.raw_span[0]
    p = params.rescaled(span)
    hist = seq.timestamps[: k + 1]
    excite = float(np.sum(np.exp(-p.decay * (hist[-1] - hist))))

    def comp(tau):
        return p.mu * tau + p.alpha / p.decay * excite * (1.0 - np.exp(-p.decay * tau))

    lo, hi = 0.0, 1.0 / p.mu
    while comp(hi) < np.log(2.0):
        hi *= 2.0
    while hi - lo > tol * max(1.0, hi):
        mid = 0.5 * (lo + hi)
        if comp(mid) < np.log(2.0):
            lo = mid
        else:
            hi = mid
    return float(hist[-1] + 0.5 * (lo + hi))
