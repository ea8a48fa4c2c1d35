"""Adam, maximum-likelihood training and continual learning with a snapshot regularizer."""
from __future__ import annotations

import csv
import dataclasses
import io
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .model import HawkesModel, parse_kind
from .seqdata import TRAIN, VAL, TEST, Descriptor, EventSequence, chronological_roles

log = logging.getLogger(__name__)


class DivergenceError(FloatingPointError):
    pass


class ConfigError(ValueError):
    pass


@dataclass
class TrainConfig:
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.99
    epsilon: float = 1e-8
    epochs: int = 300
    cl_epochs: int = 150
    patience: int = 30
    batch_events: int = 256
    chunk_events: int = 16
    M: int = 20
    variant: str = "hyper-fnn"
    beta: float = 0.5
    seed: int = 0
    hidden: int = 16
    activation: str = "tanh"
    hyper_out_scale: float = 0.05
    clip: float = 0.0
    tol: float = 1e-8
    descriptor_decay: float = 0.01
    rnn_descriptor_decay: float = 1.0

    def __post_init__(self):
        self.variant = parse_kind(self.variant)
        if not self.lr > 0:
            raise ConfigError("lr must be positive")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ConfigError("beta1 and beta2 must lie in [0, 1)")
        if self.epochs < 1 or self.cl_epochs < 1 or self.batch_events < 1 or self.M < 1:
            raise ConfigError("epochs, batch_events and M must be positive")
        if self.beta < 0:
            raise ConfigError("beta must be non-negative")
        if self.descriptor_decay < 0 or self.rnn_descriptor_decay < 0:
            raise ConfigError("descriptor decay must be non-negative")

    def replace(self, **changes) -> "TrainConfig":
        return dataclasses.replace(self, **changes)

    def to_text(self) -> str:
        return "".join(f"{f.name}={getattr(self, f.name)}\n" for f in dataclasses.fields(self))

    @classmethod
    def from_text(cls, text: str) -> "TrainConfig":
        """Parse flat ``key=value`` lines; ``#`` starts a comment."""
        types = {f.name: f.type for f in dataclasses.fields(cls)}
        values = {}
        for lineno, line in enumerate(text.splitlines(), 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"config line {lineno}: expected key=value")
            key, value = (s.strip() for s in line.split("=", 1))
            if key not in types:
                raise ConfigError(f"config line {lineno}: unknown key {key!r}")
            kind = types[key]
            try:
                if kind in ("float", float):
                    values[key] = float(value)
                elif kind in ("int", int):
                    values[key] = int(value)
                else:
                    values[key] = value
            except ValueError:
                raise ConfigError(f"config line {lineno}: bad value {value!r} for {key}") from None
        try:
            return cls(**values)
        except ConfigError:
            raise
        except ValueError as exc:
            raise ConfigError(str(exc)) from None

    @classmethod
    def load(cls, path) -> "TrainConfig":
        return cls.from_text(Path(path).read_text(encoding="utf-8"))


# ----------------------------------------------------------------------
# Adam
# ----------------------------------------------------------------------


@dataclass
class AdamState:
    first_moment: np.ndarray
    second_moment: np.ndarray
    step: int = 0
    skipped: int = 0

    @classmethod
    def zeros(cls, n: int) -> "AdamState":
        return cls(np.zeros(n), np.zeros(n))


def adam_step(params, grads, state: AdamState, cfg: TrainConfig):
    """One bias-corrected Adam update; returns ``(params, state)``.

    A non-finite gradient leaves everything unchanged except ``skipped``.
    """
    params = np.asarray(params, dtype=float)
    grads = np.asarray(grads, dtype=float)
    if params.shape != grads.shape or state.first_moment.shape != params.shape:
        raise ValueError("parameter, gradient and moment shapes differ")
    if not np.all(np.isfinite(grads)):
        log.warning("non-finite gradient at step %d; update skipped", state.step + 1)
        return params, dataclasses.replace(state, skipped=state.skipped + 1)
    if cfg.clip > 0:
        norm = np.linalg.norm(grads)
        if norm > cfg.clip:
            grads = grads * (cfg.clip / norm)
    t = state.step + 1
    m = cfg.beta1 * state.first_moment + (1.0 - cfg.beta1) * grads
    v = cfg.beta2 * state.second_moment + (1.0 - cfg.beta2) * grads * grads
    m_hat = m / (1.0 - cfg.beta1**t)
    v_hat = v / (1.0 - cfg.beta2**t)
    new = params - cfg.lr * m_hat / (np.sqrt(v_hat) + cfg.epsilon)
    return new, AdamState(m, v, t, state.skipped)


# ----------------------------------------------------------------------
# training data
# ----------------------------------------------------------------------


@dataclass
class EventSet:
    """Scorable events (index >= 1) of several sequences, by role."""

    seqs: list[EventSequence]
    descriptors: np.ndarray
    events: list[np.ndarray]

    @classmethod
    def from_roles(cls, records, roles: list[np.ndarray] | None, role: int) -> "EventSet":
        seqs, descs, events = [], [], []
        for i, (seq, desc) in enumerate(records):
            r = np.full(len(seq), role, dtype=np.int8) if roles is None else roles[i]
            ev = np.flatnonzero(r == role)
            ev = ev[ev >= 1]
            seqs.append(seq)
            descs.append(desc.values)
            events.append(ev)
        D = descs[0].shape[0] if descs else 0
        return cls(seqs, np.asarray(descs, dtype=float).reshape(len(descs), D), events)

    @property
    def n_events(self) -> int:
        return int(sum(e.size for e in self.events))

    def batch(self, model: HawkesModel):
        return model.batch(self.seqs, self.events, self.descriptors if model.uses_descriptor else None)

    def chunks(self, size: int) -> list[tuple[int, np.ndarray]]:
        """Runs of ``size`` consecutive scorable events, tagged with their sequence."""
        out = []
        for i, ev in enumerate(self.events):
            for start in range(0, ev.size, size):
                out.append((i, ev[start : start + size]))
        return out


def mean_nll(model: HawkesModel, events: EventSet) -> float:
    if events.n_events == 0:
        return float("nan")
    batch = events.batch(model)
    return -float(np.mean(model.loglik(batch, events.descriptors)))


# ----------------------------------------------------------------------
# losses
# ----------------------------------------------------------------------


def zsl_loss(records, model: HawkesModel, cfg: TrainConfig | None = None, events=None):
    """Mean negative log-likelihood over a batch of sequences and its gradient.

    ``events[i]`` selects the scored events of ``records[i]`` (default: all
    events after the first).  Returns ``(loss, flat gradient)``.
    """
    if len(records) == 0:
        raise ValueError("empty batch")
    seqs = [seq for seq, _ in records]
    if events is None:
        events = [np.arange(1, len(seq)) for seq in seqs]
    desc = np.asarray([d.values for _, d in records], dtype=float) if model.uses_descriptor else None
    batch = model.batch(seqs, events, desc)
    n = len(batch)
    loss, _, grad = model.nll_grad(batch, desc, np.full(n, 1.0 / n))
    if not np.isfinite(loss):
        raise DivergenceError("non-finite loss")
    return loss, grad


@dataclass
class CLState:
    """What continual learning keeps about the past: a parameter snapshot and descriptors."""

    theta_snapshot: dict[str, np.ndarray] | None
    seen_descriptors: list[np.ndarray]
    beta: float
    sequence_index: int = 1

    def __post_init__(self):
        if len(self.seen_descriptors) != self.sequence_index - 1:
            raise ValueError("seen_descriptors must hold one descriptor per past sequence")
        if self.beta < 0:
            raise ValueError("beta must be non-negative")

    def retained_bytes(self) -> int:
        snap = sum(v.nbytes for v in (self.theta_snapshot or {}).values())
        return snap + sum(np.asarray(d).nbytes for d in self.seen_descriptors)


def _snapshot_targets(model: HawkesModel, cl: CLState):
    frozen = model.copy()
    frozen.params = {k: v.copy() for k, v in cl.theta_snapshot.items()}
    d = np.asarray(cl.seen_descriptors, dtype=float)
    rnn_bar, haz_bar, _, _ = frozen.generated_outputs(d)
    return d, rnn_bar, haz_bar


def regularizer(model: HawkesModel, cl: CLState, targets=None):
    """``beta/(s-1) * sum_c |f(d_c; theta) - f(d_c; theta_bar)|^2`` and its gradient."""
    s = cl.sequence_index
    n = model.n_params
    if s <= 1 or cl.beta == 0.0:
        return 0.0, np.zeros(n)
    if not cl.seen_descriptors:
        raise ValueError("sequence index > 1 but no past descriptors stored")
    if not model.is_hyper:
        raise ValueError(f"{model.kind} has no hypernetwork to regularize")
    d, rnn_bar, haz_bar = targets if targets is not None else _snapshot_targets(model, cl)
    rnn, haz_eff, haz_deriv, cache = model.generated_outputs(d)
    scale = cl.beta / (s - 1)
    diff_t = haz_eff - haz_bar
    value = float(np.sum(diff_t * diff_t))
    g_haz = 2.0 * scale * diff_t * haz_deriv
    g_rnn = None
    if rnn is not None:
        diff_r = rnn - rnn_bar
        value += float(np.sum(diff_r * diff_r))
        g_rnn = 2.0 * scale * diff_r
    if g_rnn is None:
        g_rnn = np.zeros((1, model.topology.rnn_size))
    grads = model.generate_backward(cache, g_rnn, g_haz)
    # the shared RNN of the FNN-only variant is not part of the penalty
    grads.pop("rnn", None)
    return scale * value, model.vector_from(grads)


def cl_loss(seq: EventSequence, d: Descriptor, model: HawkesModel, cl: CLState, cfg=None, events=None, targets=None):
    """Mean NLL of ``seq`` plus the snapshot regularizer; returns ``(loss, gradient)``."""
    nll, g = zsl_loss([(seq, d)], model, cfg, None if events is None else [events])
    reg, g_reg = regularizer(model, cl, targets)
    return nll + reg, g + g_reg


# ----------------------------------------------------------------------
# training loops
# ----------------------------------------------------------------------


@dataclass
class TrainLog:
    rows: list[tuple[int, int, str, float]] = field(default_factory=list)

    def add(self, stage, epoch, split, mnll):
        self.rows.append((int(stage), int(epoch), split, float(mnll)))

    def series(self, split, stage=None) -> list[float]:
        return [r[3] for r in self.rows if r[2] == split and (stage is None or r[0] == stage)]

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["stage", "epoch", "split", "mnll"])
        for stage, epoch, split, mnll in self.rows:
            w.writerow([stage, epoch, split, repr(mnll)])
        return buf.getvalue()

    def save(self, path) -> None:
        Path(path).write_text(self.to_csv(), encoding="utf-8")


def time_scale_for(train: EventSet) -> float:
    """Inverse mean inter-arrival of the training events (fixed input scaling)."""
    gaps = [np.diff(s.timestamps)[e - 1] for s, e in zip(train.seqs, train.events) if e.size]
    if not gaps:
        return 1.0
    return float(1.0 / np.mean(np.concatenate(gaps)))


def new_model(cfg: TrainConfig, descriptor_dim: int, tau_scale: float = 1.0) -> HawkesModel:
    return HawkesModel.init(
        cfg.variant, descriptor_dim, seed=cfg.seed, M=cfg.M, hidden=cfg.hidden,
        activation=cfg.activation, hyper_out_scale=cfg.hyper_out_scale, tau_scale=tau_scale,
    )


def descriptor_decay(model: HawkesModel, cfg: TrainConfig) -> np.ndarray | None:
    """Per-parameter L2 coefficients on the descriptor pathways (None when all are zero)."""
    code = model.descriptor_pathways()
    decay = np.select([code == 1, code == 2], [cfg.rnn_descriptor_decay, cfg.descriptor_decay], 0.0)
    return decay if np.any(decay > 0) else None


def fit(
    model: HawkesModel,
    train: EventSet,
    val: EventSet | None,
    cfg: TrainConfig,
    epochs: int,
    log_: TrainLog,
    stage: int = 0,
    cl: CLState | None = None,
):
    """Mini-batch Adam on the mean NLL (plus the CL penalty when ``cl`` is set).

    Keeps the parameters with the lowest validation MNLL (or the last ones
    without validation events) and stops after ``cfg.patience`` epochs
    without improvement.
    """
    rng = np.random.default_rng([cfg.seed, 1])
    full = train.batch(model)
    desc = train.descriptors if model.uses_descriptor else None
    # rows of the full batch for each chunk
    offsets = np.cumsum([0] + [e.size for e in train.events])
    chunks = []
    for i, ev in enumerate(train.events):
        for start in range(0, ev.size, cfg.chunk_events):
            chunks.append(np.arange(offsets[i] + start, offsets[i] + min(start + cfg.chunk_events, ev.size)))
    if not chunks:
        raise ValueError("no training events")
    targets = _snapshot_targets(model, cl) if cl is not None and cl.sequence_index > 1 and cl.beta > 0 else None
    val_batch = val.batch(model) if val is not None and val.n_events else None

    vec = model.get_vector()
    decay = descriptor_decay(model, cfg)
    state = AdamState.zeros(vec.size)
    best_val, best_vec, best_epoch = np.inf, vec.copy(), 0
    for epoch in range(1, epochs + 1):
        order = rng.permutation(len(chunks))
        losses, counts = [], []
        batch_rows: list[np.ndarray] = []
        n_rows = 0
        groups = []
        for ci in order:
            batch_rows.append(chunks[ci])
            n_rows += chunks[ci].size
            if n_rows >= cfg.batch_events:
                groups.append(np.concatenate(batch_rows))
                batch_rows, n_rows = [], 0
        if batch_rows:
            groups.append(np.concatenate(batch_rows))
        for rows in groups:
            b = full.take(rows)
            n = len(b)
            loss, _, grad = model.nll_grad(b, desc, np.full(n, 1.0 / n))
            if cl is not None:
                reg, g_reg = regularizer(model, cl, targets)
                loss, grad = loss + reg, grad + g_reg
            if decay is not None:
                loss, grad = loss + 0.5 * float(np.sum(decay * vec * vec)), grad + decay * vec
            if np.isfinite(loss):
                losses.append(loss)
                counts.append(n)
            vec, state = adam_step(vec, grad, state, cfg)
            model.set_vector(vec)
        if not losses:
            raise DivergenceError(f"loss non-finite for all of epoch {epoch}")
        train_mnll = float(np.dot(losses, counts) / np.sum(counts))
        log_.add(stage, epoch, "train", train_mnll)
        if val_batch is not None:
            v = -float(np.mean(model.loglik(val_batch, val.descriptors)))
            log_.add(stage, epoch, "val", v)
        else:
            v = train_mnll
        if np.isfinite(v) and v < best_val:
            best_val, best_vec, best_epoch = v, vec.copy(), epoch
        elif epoch - best_epoch >= cfg.patience:
            break
    model.set_vector(best_vec)
    model.meta.update(best_epoch=best_epoch, best_val=best_val)
    return model


def train_zsl(seen, cfg: TrainConfig, val=None, roles=None, val_roles=None, log_: TrainLog | None = None):
    """Fit a model of kind ``cfg.variant`` on seen sequences.

    ``roles`` (per record) restricts training to events with the TRAIN role;
    ``val`` records (with ``val_roles``, default all events) drive model
    selection.  Returns ``(model, log)``.
    """
    if not seen:
        raise ValueError("no seen sequences")
    log_ = log_ if log_ is not None else TrainLog()
    train_set = EventSet.from_roles(seen, roles, TRAIN)
    val_set = EventSet.from_roles(val, val_roles, VAL) if val else None
    model = new_model(cfg, train_set.descriptors.shape[1], time_scale_for(train_set))
    fit(model, train_set, val_set, cfg, cfg.epochs, log_, stage=0)
    return model, log_


def cl_roles(seq: EventSequence) -> np.ndarray:
    return chronological_roles(len(seq), test_block=True)


@dataclass
class ContinualResult:
    model: HawkesModel
    checkpoints: list[HawkesModel]
    log: TrainLog
    states: list[CLState]


def train_continual(stream, cfg: TrainConfig, beta: float, epochs: int | None = None, log_: TrainLog | None = None):
    """Learn the sequences of ``stream`` one after another.

    Stage ``s`` sees only the training portion of sequence ``s``; the past
    enters only through the parameter snapshot and the stored descriptors.
    """
    if not stream:
        raise ValueError("empty stream")
    epochs = epochs if epochs is not None else cfg.cl_epochs
    log_ = log_ if log_ is not None else TrainLog()
    model = None
    cl = CLState(None, [], beta, 1)
    checkpoints, states = [], []
    prev_desc = None
    for s, (seq, desc) in enumerate(stream, start=1):
        roles = cl_roles(seq)
        train_set = EventSet.from_roles([(seq, desc)], [roles], TRAIN)
        val_set = EventSet.from_roles([(seq, desc)], [roles], VAL)
        if model is None:
            model = new_model(cfg, desc.dim, time_scale_for(train_set))
        else:
            cl = CLState(
                {k: v.copy() for k, v in model.params.items()},
                cl.seen_descriptors + [prev_desc.values.copy()],
                beta,
                s,
            )
        if train_set.n_events:
            fit(model, train_set, val_set, cfg, epochs, log_, stage=s, cl=cl if model.is_hyper else None)
        else:
            log.warning("stage %d: sequence %s has no training events; parameters unchanged", s, seq.id)
        checkpoints.append(model.copy())
        states.append(cl)
        prev_desc = desc
    return ContinualResult(model, checkpoints, log_, states)
