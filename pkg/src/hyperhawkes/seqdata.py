"""Event sequences, corpus files and train/validation/test splits.

A corpus file holds one JSON object per line::

    {"id": "seq-000", "timestamps": [...], "descriptor": [...]}

Optional keys ``window`` (a ``[start, end]`` pair) fix the observation window;
without it the window is ``[0, last timestamp]``.  Timestamps are mapped
affinely onto ``[0, 1]`` per sequence and the original window is kept in
``raw_span`` so predictions can be mapped back.
"""
from __future__ import annotations

import enum
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

PAD_VALUE = 0.0

TRAIN, VAL, TEST = 0, 1, 2
ROLE_NAMES = {TRAIN: "train", VAL: "val", TEST: "test"}


class CorpusError(ValueError):
    """Raised for malformed corpus records; carries the offending record index."""

    def __init__(self, message: str, index: int | None = None):
        self.index = index
        if index is not None:
            message = f"record {index}: {message}"
        super().__init__(message)


class Setup(str, enum.Enum):
    ZERO_SHOT = "ZeroShot"
    GENERALIZED_ZERO_SHOT = "GeneralizedZeroShot"
    STANDARD = "StandardEventModeling"
    CONTINUAL = "Continual"

    @classmethod
    def parse(cls, value: "str | Setup") -> "Setup":
        if isinstance(value, cls):
            return value
        aliases = {
            "zero-shot": cls.ZERO_SHOT,
            "zsl": cls.ZERO_SHOT,
            "generalized-zero-shot": cls.GENERALIZED_ZERO_SHOT,
            "gzsl": cls.GENERALIZED_ZERO_SHOT,
            "standard": cls.STANDARD,
            "standard-event-modeling": cls.STANDARD,
            "continual": cls.CONTINUAL,
            "cl": cls.CONTINUAL,
        }
        key = str(value)
        for member in cls:
            if key == member.value:
                return member
        try:
            return aliases[key.lower()]
        except KeyError:
            raise ValueError(f"unknown setup {value!r}") from None


@dataclass(frozen=True)
class Descriptor:
    id: str
    values: np.ndarray

    def __post_init__(self):
        values = np.asarray(self.values, dtype=float)
        if values.ndim != 1:
            raise ValueError("descriptor must be a vector")
        if not np.all(np.isfinite(values)):
            raise ValueError("descriptor contains non-finite entries")
        values.setflags(write=False)
        object.__setattr__(self, "values", values)

    @property
    def dim(self) -> int:
        return self.values.shape[0]


@dataclass(frozen=True)
class EventSequence:
    """Normalized event times of one entity.

    ``timestamps`` lie in ``[0, 1]`` and are strictly increasing;
    ``raw_span`` is the original ``(start, end)`` observation window.
    """

    id: str
    timestamps: np.ndarray
    descriptor_id: str
    raw_span: tuple[float, float] = (0.0, 1.0)

    def __post_init__(self):
        ts = np.asarray(self.timestamps, dtype=float)
        if ts.ndim != 1 or ts.shape[0] < 2:
            raise ValueError("a sequence needs at least 2 events")
        if not np.all(np.isfinite(ts)):
            raise ValueError("non-finite timestamps")
        if np.any(np.diff(ts) <= 0):
            raise ValueError("unsorted timestamps")
        ts.setflags(write=False)
        object.__setattr__(self, "timestamps", ts)
        object.__setattr__(self, "raw_span", (float(self.raw_span[0]), float(self.raw_span[1])))

    def __len__(self) -> int:
        return self.timestamps.shape[0]

    @property
    def intervals(self) -> np.ndarray:
        """Inter-event gaps ``t_k - t_{k-1}`` for ``k = 1 .. n-1``."""
        return np.diff(self.timestamps)

    def denormalize(self, t) -> np.ndarray:
        start, end = self.raw_span
        return start + np.asarray(t, dtype=float) * (end - start)

    def with_timestamps(self, timestamps) -> "EventSequence":
        return EventSequence(self.id, timestamps, self.descriptor_id, self.raw_span)


Record = tuple[EventSequence, Descriptor]


def normalize(timestamps, window: tuple[float, float]) -> np.ndarray:
    start, end = window
    if not end > start:
        raise ValueError("observation window must have positive length")
    return (np.asarray(timestamps, dtype=float) - start) / (end - start)


def make_record(seq_id: str, timestamps, descriptor, window=None) -> Record:
    """Validate one raw record and return the normalized pair."""
    ts = np.asarray(timestamps, dtype=float)
    if ts.ndim != 1 or ts.shape[0] < 2:
        raise ValueError("a sequence needs at least 2 events")
    if not np.all(np.isfinite(ts)):
        raise ValueError("non-finite timestamps")
    if np.any(np.diff(ts) <= 0):
        raise ValueError("unsorted timestamps")
    if window is None:
        window = (0.0, float(ts[-1]))
    window = (float(window[0]), float(window[1]))
    if ts[0] < window[0] or ts[-1] > window[1]:
        raise ValueError("timestamps outside the observation window")
    desc = Descriptor(seq_id, np.asarray(descriptor, dtype=float))
    seq = EventSequence(seq_id, normalize(ts, window), seq_id, window)
    return seq, desc


def parse_records(lines: Iterable[str]) -> list[Record]:
    records: list[Record] = []
    dim = None
    index = -1
    for line in lines:
        if not line.strip():
            continue
        index += 1
        try:
            obj = json.loads(line)
        except json.JSONDecodeError as exc:
            raise CorpusError(f"malformed record ({exc.msg})", index) from None
        if not isinstance(obj, dict):
            raise CorpusError("malformed record (not an object)", index)
        missing = [k for k in ("id", "timestamps", "descriptor") if k not in obj]
        if missing:
            raise CorpusError(f"malformed record (missing {', '.join(missing)})", index)
        descriptor = obj["descriptor"]
        if not isinstance(descriptor, list):
            raise CorpusError("malformed record (descriptor is not a list)", index)
        if dim is None:
            if len(descriptor) == 0:
                raise CorpusError("descriptor dimension mismatch (empty descriptor)", index)
            dim = len(descriptor)
        elif len(descriptor) != dim:
            raise CorpusError(
                f"descriptor dimension mismatch (expected {dim}, got {len(descriptor)})", index
            )
        try:
            records.append(make_record(str(obj["id"]), obj["timestamps"], descriptor, obj.get("window")))
        except (TypeError, ValueError) as exc:
            raise CorpusError(str(exc), index) from None
    ids = [seq.id for seq, _ in records]
    if len(set(ids)) != len(ids):
        raise CorpusError("duplicate sequence ids")
    return records


def load_corpus(path) -> list[Record]:
    """Read and validate a corpus file (one JSON record per line)."""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"corpus file not found: {path}")
    with path.open(encoding="utf-8") as fh:
        return parse_records(fh)


def dump_records(records: Sequence[Record]) -> str:
    out = []
    for seq, desc in records:
        obj = {
            "id": seq.id,
            "timestamps": [float(t) for t in seq.denormalize(seq.timestamps)],
            "descriptor": [float(v) for v in desc.values],
            "window": list(seq.raw_span),
        }
        out.append(json.dumps(obj))
    return "\n".join(out) + "\n"


def write_corpus(path, records: Sequence[Record]) -> None:
    Path(path).write_text(dump_records(records), encoding="utf-8")


def interarrival_window(seq: EventSequence, j: int, M: int, pad: float = PAD_VALUE):
    """The ``M`` inter-event gaps ending at event ``j``, left padded.

    Returns ``(window, mask)``; ``mask`` is False at pad positions.
    """
    n = len(seq)
    if not 1 <= j < n:
        raise IndexError(f"event index {j} out of range for a {n}-event sequence")
    if M < 1:
        raise ValueError("M must be positive")
    gaps = np.diff(seq.timestamps[max(0, j - M) : j + 1])
    window = np.full(M, pad, dtype=float)
    mask = np.zeros(M, dtype=bool)
    window[M - gaps.shape[0] :] = gaps
    mask[M - gaps.shape[0] :] = True
    return window, mask


def history_windows(seq: EventSequence, M: int, pad: float = PAD_VALUE):
    """History windows for every event of ``seq`` at once.

    Row ``k`` holds the gaps observed up to and including event ``k``, so it
    conditions the prediction of event ``k + 1``.  Row 0 is all padding.
    """
    gaps = np.concatenate([np.full(M, pad), seq.intervals])
    valid = np.concatenate([np.zeros(M, dtype=bool), np.ones(len(seq) - 1, dtype=bool)])
    idx = np.arange(len(seq))[:, None] + np.arange(M)[None, :]
    return gaps[idx], valid[idx]


@dataclass
class CorpusSplit:
    seen: list[str]
    unseen_val: list[str]
    unseen_test: list[str]
    setup: Setup
    seed: int = 0
    # per-sequence event roles (TRAIN/VAL/TEST) for event-level setups
    roles: dict[str, np.ndarray] = field(default_factory=dict, repr=False)

    @property
    def unseen(self) -> list[str]:
        return self.unseen_val + self.unseen_test

    def all_ids(self) -> list[str]:
        return self.seen + self.unseen_val + self.unseen_test

    def event_roles(self, seq: EventSequence) -> np.ndarray:
        """Role of every event of ``seq`` under this split's rule."""
        if seq.id in self.roles:
            return self.roles[seq.id]
        n = len(seq)
        if self.setup in (Setup.STANDARD, Setup.CONTINUAL):
            return chronological_roles(n, test_block=self.setup is Setup.CONTINUAL or seq.id in self.unseen)
        if seq.id in self.seen:
            return np.full(n, TRAIN, dtype=np.int8)
        if seq.id in self.unseen_val:
            return np.full(n, VAL, dtype=np.int8)
        if seq.id in self.unseen_test:
            return np.full(n, TEST, dtype=np.int8)
        raise KeyError(f"sequence {seq.id!r} is not part of the split")

    def to_text(self) -> str:
        lines = [
            f"setup={self.setup.value}",
            f"seed={self.seed}",
            "seen=" + ",".join(self.seen),
            "unseen_val=" + ",".join(self.unseen_val),
            "unseen_test=" + ",".join(self.unseen_test),
        ]
        for sid in sorted(self.roles):
            lines.append(f"roles.{sid}=" + "".join(str(int(r)) for r in self.roles[sid]))
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "CorpusSplit":
        fields: dict[str, str] = {}
        roles = {}
        for lineno, line in enumerate(text.splitlines(), 1):
            if not line.strip():
                continue
            if "=" not in line:
                raise ValueError(f"split manifest line {lineno}: expected key=value")
            key, value = line.split("=", 1)
            if key.startswith("roles."):
                roles[key[6:]] = np.array([int(c) for c in value], dtype=np.int8)
            else:
                fields[key] = value

        def ids(key):
            value = fields.get(key, "")
            return value.split(",") if value else []

        return cls(
            seen=ids("seen"),
            unseen_val=ids("unseen_val"),
            unseen_test=ids("unseen_test"),
            setup=Setup.parse(fields["setup"]),
            seed=int(fields.get("seed", 0)),
            roles=roles,
        )

    def save(self, path) -> None:
        Path(path).write_text(self.to_text(), encoding="utf-8")

    @classmethod
    def load(cls, path) -> "CorpusSplit":
        return cls.from_text(Path(path).read_text(encoding="utf-8"))


def chronological_roles(n: int, test_block: bool = True, train_frac: float = 0.7, test_frac: float = 0.2):
    """First 70% train, last 20% test and the middle block validation.

    With ``test_block=False`` everything after the training prefix is
    validation.
    """
    n_train = int(round(train_frac * n))
    n_test = int(round(test_frac * n)) if test_block else 0
    n_train = min(n_train, n - n_test)
    roles = np.full(n, VAL, dtype=np.int8)
    roles[:n_train] = TRAIN
    if n_test:
        roles[n - n_test :] = TEST
    return roles


def _partition_counts(n: int) -> tuple[int, int, int]:
    n_val = int(round(0.2 * n))
    n_test = int(round(0.2 * n))
    return n - n_val - n_test, n_val, n_test


def make_split(
    corpus: Sequence[str] | Sequence[Record],
    setup: "Setup | str",
    seed: int,
    lengths: dict[str, int] | None = None,
    sample_frac: float = 0.2,
) -> CorpusSplit:
    """Partition a corpus for one of the experimental setups.

    ``corpus`` is a list of ids or of ``(EventSequence, Descriptor)`` pairs.
    The generalized zero-shot setup samples events, so it needs sequence
    lengths; they are taken from the records or from ``lengths``.
    """
    setup = Setup.parse(setup)
    if len(corpus) == 0:
        raise ValueError("empty corpus")
    if isinstance(corpus[0], tuple):
        ids = [seq.id for seq, _ in corpus]
        lengths = {seq.id: len(seq) for seq, _ in corpus}
    else:
        ids = list(corpus)
    if len(set(ids)) != len(ids):
        raise ValueError("duplicate sequence ids")

    rng = np.random.default_rng(seed)
    if setup is Setup.CONTINUAL:
        # stream order is the corpus order
        return CorpusSplit(seen=list(ids), unseen_val=[], unseen_test=[], setup=setup, seed=seed)

    if len(ids) < 5:
        raise ValueError(f"{setup.value} needs at least 5 sequences, got {len(ids)}")
    order = [ids[i] for i in rng.permutation(len(ids))]
    n_seen, n_val, _ = _partition_counts(len(ids))
    split = CorpusSplit(
        seen=order[:n_seen],
        unseen_val=order[n_seen : n_seen + n_val],
        unseen_test=order[n_seen + n_val :],
        setup=setup,
        seed=seed,
    )
    if setup is Setup.GENERALIZED_ZERO_SHOT:
        if lengths is None:
            raise ValueError("generalized zero-shot split needs sequence lengths")
        for sid in split.all_ids():
            n = lengths[sid]
            if sid in split.seen:
                roles = np.full(n, TRAIN, dtype=np.int8)
            else:
                roles = np.full(n, VAL, dtype=np.int8)
            if sid not in split.unseen_val:
                # event 0 only conditions later events and is never scored
                k = int(round(sample_frac * (n - 1)))
                picked = 1 + rng.choice(n - 1, size=k, replace=False)
                roles[picked] = TEST
            split.roles[sid] = roles
    return split
