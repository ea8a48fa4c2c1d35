"""Fully neural Hawkes process: RNN history encoder and monotone hazard network.

A feed-forward network ``F(tau | h)`` with positive weights and increasing
activations is increasing in the elapsed time ``tau``.  The cumulative
hazard is its increment ``Phi(tau | h) = F(tau | h) - F(0 | h)``, so
``Phi(0) = 0`` and ``exp(-Phi)`` is a proper survival function.  The
hazard ``dPhi/dtau`` is computed alongside by propagating the tangent of
``tau`` through the layers, and gradients of
``log(dPhi/dtau) - Phi`` are taken by a hand-written reverse pass through
both the primal and the tangent computation.

All batched routines take *stacked* flat parameter arrays of shape
``(S, P)`` plus a per-event row index, which lets one call evaluate events
of many sequences that each carry their own generated weights.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .diffgraph import Graph
from .seqdata import EventSequence, history_windows

LN2 = float(np.log(2.0))


def softplus(x):
    return np.logaddexp(0.0, x)


def sigmoid(x):
    return np.exp(-np.logaddexp(0.0, -x))


def inverse_softplus(y):
    y = np.asarray(y, dtype=float)
    return y + np.log(-np.expm1(-y))


def _activation(name):
    """Return ``(f, f', f'')`` evaluated from the pre-activation."""
    if name == "softplus":

        def fn(z):
            s = sigmoid(z)
            return softplus(z), s, s * (1.0 - s)

    elif name == "tanh":

        def fn(z):
            t = np.tanh(z)
            # 1 - t^2 rounds to 0 for |z| > 19; this form stays positive
            e = np.exp(-2.0 * np.abs(z))
            d = 4.0 * e / (1.0 + e) ** 2
            return t, d, -2.0 * t * d

    else:
        raise ValueError(f"unsupported activation {name!r}")
    return fn


@dataclass(frozen=True)
class Topology:
    """Layer sizes of the RNN encoder and the cumulative-hazard network.

    ``rnn_in`` is 1 for the plain model (the inter-arrival time only) and
    ``extra`` is the number of side inputs appended to the hazard network's
    input after ``[h, tau]``.
    """

    hidden: int = 16
    layers: tuple[int, ...] = (16, 16)
    rnn_in: int = 1
    extra: int = 0
    activation: str = "softplus"

    def __post_init__(self):
        object.__setattr__(self, "layers", tuple(int(n) for n in self.layers))
        _activation(self.activation)

    @property
    def hazard_in(self) -> int:
        return self.hidden + 1 + self.extra

    @property
    def tau_column(self) -> int:
        return self.hidden

    def rnn_shapes(self):
        H = self.hidden
        return [("V", (self.rnn_in, H)), ("U", (H, H)), ("b", (H,))]

    def hazard_shapes(self):
        shapes = []
        sizes = (self.hazard_in, *self.layers, 1)
        for i in range(len(sizes) - 1):
            shapes.append((f"W{i + 1}", (sizes[i], sizes[i + 1])))
            shapes.append((f"b{i + 1}", (sizes[i + 1],)))
        return shapes

    @property
    def rnn_size(self) -> int:
        return sum(int(np.prod(s)) for _, s in self.rnn_shapes())

    @property
    def hazard_size(self) -> int:
        return sum(int(np.prod(s)) for _, s in self.hazard_shapes())

    def hazard_positive_mask(self) -> np.ndarray:
        """True where a flat hazard parameter is a weight passed through softplus.

        Rows of the first layer fed by side inputs stay unconstrained; they
        do not lie on the ``tau`` path.
        """
        parts = []
        for name, shape in self.hazard_shapes():
            m = np.zeros(shape, dtype=bool)
            if name.startswith("W"):
                m[...] = True
                if name == "W1" and self.extra:
                    m[self.hidden + 1 :, :] = False
            parts.append(m.ravel())
        return np.concatenate(parts)

    def to_dict(self) -> dict:
        return {
            "hidden": self.hidden,
            "layers": list(self.layers),
            "rnn_in": self.rnn_in,
            "extra": self.extra,
            "activation": self.activation,
        }

    @classmethod
    def from_dict(cls, d) -> "Topology":
        return cls(d["hidden"], tuple(d["layers"]), d["rnn_in"], d["extra"], d["activation"])


def _split(flat, shapes):
    """Views of a stacked ``(S, P)`` array as ``(S, *shape)`` blocks."""
    out = {}
    pos = 0
    for name, shape in shapes:
        n = int(np.prod(shape))
        out[name] = flat[:, pos : pos + n].reshape((flat.shape[0],) + shape)
        pos += n
    return out


def _join(blocks, shapes, S):
    return np.concatenate([blocks[name].reshape(S, -1) for name, _ in shapes], axis=1)


@dataclass
class RnnWeights:
    """Input weights ``V`` (rnn_in x H), recurrent ``U`` (H x H), bias ``b``.

    ``tau_scale`` multiplies the inter-arrival input before it enters the
    cell; with the default 1.0 the update is exactly
    ``tanh(tau V + h U + b)``.
    """

    V: np.ndarray
    U: np.ndarray
    b: np.ndarray
    tau_scale: float = 1.0

    def __post_init__(self):
        self.V = np.atleast_2d(np.asarray(self.V, dtype=float))
        self.U = np.asarray(self.U, dtype=float)
        self.b = np.asarray(self.b, dtype=float)
        H = self.b.shape[0]
        if self.U.shape != (H, H) or self.V.shape[1] != H:
            raise ValueError("inconsistent RNN weight shapes")
        for a in (self.V, self.U, self.b):
            if not np.all(np.isfinite(a)):
                raise ValueError("non-finite RNN weights")

    @property
    def hidden(self) -> int:
        return self.b.shape[0]

    def flat(self) -> np.ndarray:
        return np.concatenate([self.V.ravel(), self.U.ravel(), self.b])

    @classmethod
    def from_flat(cls, topo: Topology, flat, tau_scale: float = 1.0) -> "RnnWeights":
        flat = np.asarray(flat, dtype=float)
        if flat.shape != (topo.rnn_size,):
            raise ValueError(f"expected {topo.rnn_size} RNN parameters, got {flat.shape}")
        b = _split(flat[None], topo.rnn_shapes())
        return cls(b["V"][0].copy(), b["U"][0].copy(), b["b"][0].copy(), tau_scale)


@dataclass
class HazardNetWeights:
    """Raw parameters of the cumulative-hazard network.

    ``raw`` is the flat parameter vector in :meth:`Topology.hazard_shapes`
    order; weights enter the network as ``softplus(raw)``.
    """

    topology: Topology
    raw: np.ndarray
    tau_scale: float = 1.0

    def __post_init__(self):
        self.raw = np.asarray(self.raw, dtype=float)
        if self.raw.shape != (self.topology.hazard_size,):
            raise ValueError(
                f"expected {self.topology.hazard_size} hazard parameters, got {self.raw.shape}"
            )
        if not np.all(np.isfinite(self.raw)):
            raise ValueError("non-finite hazard weights")

    def effective(self) -> np.ndarray:
        mask = self.topology.hazard_positive_mask()
        return np.where(mask, softplus(self.raw), self.raw)

    @property
    def layers(self) -> list[tuple[np.ndarray, np.ndarray]]:
        """``(raw weight, bias)`` per layer."""
        blocks = _split(self.raw[None], self.topology.hazard_shapes())
        n = len(self.topology.layers) + 1
        return [(blocks[f"W{i}"][0], blocks[f"b{i}"][0]) for i in range(1, n + 1)]

    def flat(self) -> np.ndarray:
        return self.raw.copy()


def constant_hazard_weights(topo: Topology, c: float, tau_scale: float = 1.0, level: float = 50.0) -> HazardNetWeights:
    """Hazard-network weights whose hazard is ``c`` for every ``tau`` and ``h``.

    One unit per layer carries ``level + c tau``; at that level softplus is
    the identity and its slope is 1 in double precision, so
    ``Phi(tau) = c tau`` up to rounding.  Every other weight is
    ``softplus(-1000) = 0``.  Needs softplus hidden layers.
    """
    if topo.activation != "softplus":
        raise ValueError("a constant hazard needs softplus hidden layers")
    if not c > 0:
        raise ValueError("c must be positive")
    blocks = {}
    for name, shape in topo.hazard_shapes():
        blocks[name] = np.full(shape, -1000.0) if name.startswith("W") else np.zeros(shape)
    if topo.extra:
        blocks["W1"][topo.hidden + 1 :] = 0.0
    blocks["W1"][topo.tau_column, 0] = inverse_softplus(c / tau_scale)
    blocks["b1"][0] = level
    for i in range(2, len(topo.layers) + 2):
        blocks[f"W{i}"][0, 0] = inverse_softplus(1.0)
    raw = np.concatenate([blocks[name].ravel() for name, _ in topo.hazard_shapes()])
    return HazardNetWeights(topo, raw, tau_scale)


# ----------------------------------------------------------------------
# hazard network: forward with tau tangent, and reverse pass
# ----------------------------------------------------------------------


def _gather(block, index):
    """Per-event view of a stacked block, or the shared block when S == 1."""
    if block.shape[0] == 1:
        return block[0]
    return block[index]


def _rowmat(x, W):
    """Row-vector times matrix; ``W`` is shared ``(i, o)`` or per-row ``(N, i, o)``."""
    if W.ndim == 2:
        return x @ W
    return np.matmul(x[:, None, :], W)[:, 0, :]


def _rowmat_T(g, W):
    if W.ndim == 2:
        return g @ W.T
    return np.matmul(W, g[:, :, None])[:, :, 0]


def _group_outer(x, g, index, S):
    """Sum of outer products ``x_n g_n^T`` grouped by ``index`` into ``(S, i, o)``.

    ``x`` and ``g`` may carry an extra step axis ``(N, K, .)`` that is summed.
    """
    if x.ndim == 2:
        x = x[:, None, :]
        g = g[:, None, :]
    if S == 1:
        return np.einsum("nki,nko->io", x, g)[None]
    per = np.matmul(np.swapaxes(x, 1, 2), g)  # (N, i, o)
    out = np.zeros((S,) + per.shape[1:])
    np.add.at(out, index, per)
    return out


def _group_sum(g, index, S):
    if S == 1:
        return g.sum(axis=0)[None]
    out = np.zeros((S,) + g.shape[1:])
    np.add.at(out, index, g)
    return out


def hazard_forward(topo: Topology, haz_flat, index, h, tau, extra=None, tau_scale=1.0, keep=False):
    """Evaluate ``Phi`` and ``dPhi/dtau`` for a batch of events.

    ``haz_flat`` is ``(S, P)`` raw parameters; ``index`` (N,) selects the row
    per event; ``h`` is (N, H) and ``tau`` (N,).
    """
    act = _activation(topo.activation)
    mask = topo.hazard_positive_mask()
    eff_flat = np.where(mask, softplus(haz_flat), haz_flat)
    blocks = _split(eff_flat, topo.hazard_shapes())
    n_layers = len(topo.layers) + 1
    parts = [h, (tau_scale * tau)[:, None]]
    if topo.extra:
        parts.append(extra)
    x = np.concatenate(parts, axis=1)
    W1 = _gather(blocks["W1"], index)
    z = _rowmat(x, W1) + _gather(blocks["b1"], index)
    dz = tau_scale * (W1[:, topo.tau_column, :] if W1.ndim == 3 else W1[topo.tau_column][None, :])
    cache = {"x": x, "W": [W1], "z": [], "dz": [], "a": [x], "da": [None]}
    for i in range(2, n_layers + 1):
        a, d1, _ = act(z)
        da = d1 * dz
        if keep:
            cache["z"].append(z)
            cache["dz"].append(dz)
            cache["a"].append(a)
            cache["da"].append(da)
        W = _gather(blocks[f"W{i}"], index)
        cache["W"].append(W)
        z = _rowmat(a, W) + _gather(blocks[f"b{i}"], index)
        dz = _rowmat(da, W)
    z, dz = z[:, 0], dz[:, 0]
    phi = softplus(z)
    lam = sigmoid(z) * dz
    if keep:
        cache["z"].append(z)
        cache["dz"].append(dz)
        cache.update(eff_flat=eff_flat, tau_scale=tau_scale, index=index)
        return phi, lam, cache
    return phi, lam


def hazard_backward(topo: Topology, haz_flat, cache, g_phi, g_lam):
    """Reverse pass of :func:`hazard_forward`.

    Returns gradients with respect to the raw stacked parameters ``(S, P)``
    and with respect to the hidden-state input ``h`` (N, H).
    """
    act = _activation(topo.activation)
    S = haz_flat.shape[0]
    index = cache["index"]
    n_layers = len(topo.layers) + 1
    shapes = topo.hazard_shapes()
    grads = {}

    z, dz = cache["z"][-1], cache["dz"][-1]
    s = sigmoid(z)
    # phi = softplus(z), lam = sigmoid(z) dz
    g_z = g_phi * s + g_lam * s * (1.0 - s) * dz
    g_dz = g_lam * s
    g_z, g_dz = g_z[:, None], g_dz[:, None]
    for i in range(n_layers, 1, -1):
        a, da = cache["a"][i - 1], cache["da"][i - 1]
        W = cache["W"][i - 1]
        grads[f"W{i}"] = _group_outer(a, g_z, index, S) + _group_outer(da, g_dz, index, S)
        grads[f"b{i}"] = _group_sum(g_z, index, S)
        g_a = _rowmat_T(g_z, W)
        g_da = _rowmat_T(g_dz, W)
        zp, dzp = cache["z"][i - 2], cache["dz"][i - 2]
        _, d1, d2 = act(zp)
        g_z = g_a * d1 + g_da * d2 * dzp
        g_dz = g_da * d1
    x = cache["x"]
    W1 = cache["W"][0]
    gW1 = _group_outer(x, g_z, index, S)
    # dz1 = tau_scale * W1[tau_column]
    gW1[:, topo.tau_column, :] += cache["tau_scale"] * _group_sum(g_dz, index, S)
    grads["W1"] = gW1
    grads["b1"] = _group_sum(g_z, index, S)
    g_x = _rowmat_T(g_z, W1)
    g_eff = _join(grads, shapes, S)
    mask = topo.hazard_positive_mask()
    g_raw = np.where(mask, g_eff * sigmoid(haz_flat), g_eff)
    return g_raw, g_x[:, : topo.hidden]


def anchored_forward(topo: Topology, haz_flat, index, h, tau, extra=None, tau_scale=1.0, keep=False):
    """``Phi(tau) = F(tau) - F(0)`` and the hazard, in one stacked network pass."""
    n = tau.shape[0]
    out = hazard_forward(
        topo, haz_flat, np.concatenate([index, index]), np.concatenate([h, h]),
        np.concatenate([tau, np.zeros(n)]), None if extra is None else np.concatenate([extra, extra]),
        tau_scale, keep,
    )
    phi = out[0][:n] - out[0][n:]
    lam = out[1][:n]
    if keep:
        return phi, lam, out[2]
    return phi, lam


def anchored_backward(topo: Topology, haz_flat, cache, g_phi, g_lam):
    """Reverse pass of :func:`anchored_forward`."""
    g_raw, g_h = hazard_backward(
        topo, haz_flat, cache, np.concatenate([g_phi, -g_phi]), np.concatenate([g_lam, np.zeros_like(g_lam)])
    )
    n = g_phi.shape[0]
    return g_raw, g_h[:n] + g_h[n:]


# ----------------------------------------------------------------------
# RNN encoder over history windows
# ----------------------------------------------------------------------


def rnn_forward(topo: Topology, rnn_flat, index, inputs, mask, tau_scale=1.0, keep=False):
    """Fold the RNN over ``inputs`` (N, M, rnn_in) from the zero state.

    Column 0 of ``inputs`` is the inter-arrival time (scaled by
    ``tau_scale``); masked steps leave the state unchanged.
    """
    blocks = _split(rnn_flat, topo.rnn_shapes())
    V = _gather(blocks["V"], index)
    U = _gather(blocks["U"], index)
    b = _gather(blocks["b"], index)
    N, M, _ = inputs.shape
    u = inputs.copy()
    u[:, :, 0] *= tau_scale
    h = np.zeros((N, topo.hidden))
    hs_prev = np.zeros((N, M, topo.hidden)) if keep else None
    hs_new = np.zeros((N, M, topo.hidden)) if keep else None
    for k in range(M):
        m = mask[:, k]
        if not m.any():
            continue
        hn = np.tanh(_rowmat(u[:, k, :], V) + _rowmat(h, U) + b)
        if keep:
            hs_prev[:, k] = h
            hs_new[:, k] = hn
        h = np.where(m[:, None], hn, h)
    if keep:
        return h, {"u": u, "mask": mask, "h_prev": hs_prev, "h_new": hs_new, "V": V, "U": U, "index": index}
    return h


def rnn_backward(topo: Topology, rnn_flat, cache, g_h):
    S = rnn_flat.shape[0]
    index = cache["index"]
    u, mask = cache["u"], cache["mask"]
    U = cache["U"]
    N, M, _ = u.shape
    g_pre = np.zeros((N, M, topo.hidden))
    g = g_h
    for k in range(M - 1, -1, -1):
        m = mask[:, k]
        if not m.any():
            continue
        hn = cache["h_new"][:, k]
        gp = np.where(m[:, None], g * (1.0 - hn * hn), 0.0)
        g_pre[:, k] = gp
        g = np.where(m[:, None], _rowmat_T(gp, U), g)
    grads = {
        "V": _group_outer(u, g_pre, index, S),
        "U": _group_outer(cache["h_prev"], g_pre, index, S),
        "b": _group_sum(g_pre.sum(axis=1), index, S),
    }
    return _join(grads, topo.rnn_shapes(), S)


# ----------------------------------------------------------------------
# event batches and the log-likelihood
# ----------------------------------------------------------------------


@dataclass
class EventBatch:
    """Scored events with their history windows.

    Event ``n`` is the ``k``-th event of its sequence; ``tau`` is the gap
    ``t_k - t_{k-1}`` and the window holds the gaps up to event ``k - 1``.
    ``group`` indexes the per-sequence parameter rows.
    """

    inputs: np.ndarray
    mask: np.ndarray
    tau: np.ndarray
    extra: np.ndarray | None
    group: np.ndarray
    seq_pos: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=int))
    event_idx: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=int))
    last_time: np.ndarray = field(default_factory=lambda: np.zeros(0))

    def __len__(self):
        return self.tau.shape[0]

    def take(self, rows) -> "EventBatch":
        rows = np.asarray(rows)
        return EventBatch(
            self.inputs[rows],
            self.mask[rows],
            self.tau[rows],
            None if self.extra is None else self.extra[rows],
            self.group[rows],
            self.seq_pos[rows],
            self.event_idx[rows],
            self.last_time[rows],
        )


def make_batch(
    seqs,
    events,
    M: int,
    topo: Topology,
    descriptors=None,
    groups=None,
) -> EventBatch:
    """Build a batch scoring ``events[i]`` (indices >= 1) of ``seqs[i]``.

    ``descriptors[i]`` is appended to the RNN and hazard inputs when the
    topology asks for side inputs.  ``groups[i]`` is the parameter row of
    sequence ``i`` (default ``i``).
    """
    inputs, masks, taus, extras, group, pos, idx, last = [], [], [], [], [], [], [], []
    D = topo.extra
    for i, (seq, ev) in enumerate(zip(seqs, events)):
        ev = np.asarray(ev, dtype=int)
        if ev.size == 0:
            continue
        if ev.min() < 1 or ev.max() >= len(seq):
            raise IndexError(f"event indices out of range for sequence {seq.id!r}")
        win, m = history_windows(seq, M)
        w = win[ev - 1]
        if topo.rnn_in > 1:
            d = np.broadcast_to(np.asarray(descriptors[i], dtype=float), (ev.size, M, topo.rnn_in - 1))
            w = np.concatenate([w[:, :, None], d], axis=2)
        else:
            w = w[:, :, None]
        inputs.append(w)
        masks.append(m[ev - 1])
        ts = seq.timestamps
        taus.append(ts[ev] - ts[ev - 1])
        last.append(ts[ev - 1])
        if D:
            extras.append(np.broadcast_to(np.asarray(descriptors[i], dtype=float), (ev.size, D)))
        group.append(np.full(ev.size, i if groups is None else groups[i], dtype=int))
        pos.append(np.full(ev.size, i, dtype=int))
        idx.append(ev)
    if not inputs:
        z = np.zeros(0)
        return EventBatch(
            np.zeros((0, M, topo.rnn_in)), np.zeros((0, M), dtype=bool), z,
            np.zeros((0, D)) if D else None, np.zeros(0, dtype=int),
            np.zeros(0, dtype=int), np.zeros(0, dtype=int), z,
        )
    return EventBatch(
        np.concatenate(inputs),
        np.concatenate(masks),
        np.concatenate(taus),
        np.concatenate(extras) if D else None,
        np.concatenate(group),
        np.concatenate(pos),
        np.concatenate(idx),
        np.concatenate(last),
    )


def _index_for(flat, batch):
    return batch.group if flat.shape[0] > 1 else np.zeros(len(batch), dtype=int)


def batch_loglik(topo, rnn_flat, haz_flat, batch: EventBatch, tau_scale=1.0):
    """Per-event ``log(dPhi/dtau) - Phi`` for a batch."""
    h = rnn_forward(topo, rnn_flat, _index_for(rnn_flat, batch), batch.inputs, batch.mask, tau_scale)
    phi, lam = anchored_forward(topo, haz_flat, _index_for(haz_flat, batch), h, batch.tau, batch.extra, tau_scale)
    with np.errstate(divide="ignore", invalid="ignore"):
        return np.log(lam) - phi


def batch_nll_grad(topo, rnn_flat, haz_flat, batch: EventBatch, tau_scale=1.0, weights=None):
    """Weighted negative log-likelihood and its gradients.

    Returns ``(loss, per_event_loglik, g_rnn, g_haz)`` where
    ``loss = -sum_n weights_n * loglik_n``.
    """
    if weights is None:
        weights = np.ones(len(batch))
    h, rcache = rnn_forward(
        topo, rnn_flat, _index_for(rnn_flat, batch), batch.inputs, batch.mask, tau_scale, keep=True
    )
    phi, lam, hcache = anchored_forward(
        topo, haz_flat, _index_for(haz_flat, batch), h, batch.tau, batch.extra, tau_scale, keep=True
    )
    with np.errstate(divide="ignore", invalid="ignore"):
        ll = np.log(lam) - phi
    loss = -float(np.dot(weights, ll))
    with np.errstate(divide="ignore", invalid="ignore"):
        g_haz, g_h = anchored_backward(topo, haz_flat, hcache, weights, -weights / lam)
    g_rnn = rnn_backward(topo, rnn_flat, rcache, g_h)
    return loss, ll, g_rnn, g_haz


# ----------------------------------------------------------------------
# single-sequence API
# ----------------------------------------------------------------------


def rnn_step(tau: float, h_prev, w: RnnWeights, side=None) -> np.ndarray:
    """One cell update ``tanh(tau V + h_prev U + b)``."""
    h_prev = np.asarray(h_prev, dtype=float)
    if tau < 0:
        raise ValueError("tau must be non-negative")
    u = np.concatenate([[w.tau_scale * float(tau)], np.asarray(side if side is not None else [], dtype=float)])
    if not (np.all(np.isfinite(u)) and np.all(np.isfinite(h_prev))):
        raise ValueError("non-finite input")
    return np.tanh(u @ w.V + h_prev @ w.U + w.b)


def encode_history(seq: EventSequence, j: int, w: RnnWeights, M: int, side=None) -> np.ndarray:
    """Hidden state after observing events ``0..j`` (last ``M`` gaps).

    ``j = 0`` has no observed gap and gives the zero state.
    """
    if not 0 <= j < len(seq):
        raise IndexError(f"event index {j} out of range")
    h = np.zeros(w.hidden)
    if j == 0:
        return h
    gaps = np.diff(seq.timestamps[max(0, j - M) : j + 1])
    for tau in gaps:
        h = rnn_step(tau, h, w, side)
    return h


def _single_hazard(tau, h, w: HazardNetWeights, side=None, anchored=True):
    tau = np.atleast_1d(np.asarray(tau, dtype=float))
    if np.any(tau < 0):
        raise ValueError("tau must be non-negative")
    if not (np.all(np.isfinite(tau)) and np.all(np.isfinite(h))):
        raise ValueError("non-finite input")
    topo = w.topology
    H = np.broadcast_to(np.asarray(h, dtype=float), (tau.shape[0], topo.hidden))
    extra = None
    if topo.extra:
        extra = np.broadcast_to(np.asarray(side, dtype=float), (tau.shape[0], topo.extra))
    fn = anchored_forward if anchored else hazard_forward
    return fn(topo, w.raw[None], np.zeros(tau.shape[0], dtype=int), H, tau, extra, w.tau_scale)


def network_output(tau, h, w: HazardNetWeights, side=None):
    """The raw network value ``F(tau | h)``, positive and increasing in ``tau``."""
    out, _ = _single_hazard(tau, h, w, side, anchored=False)
    return float(out[0]) if np.ndim(tau) == 0 else out


def cumulative_hazard(tau, h, w: HazardNetWeights, side=None):
    """``Phi(tau | h) = F(tau | h) - F(0 | h)``; arrays vectorize over ``tau``."""
    phi, _ = _single_hazard(tau, h, w, side)
    return float(phi[0]) if np.ndim(tau) == 0 else phi


def hazard(tau, h, w: HazardNetWeights, side=None):
    """``dPhi/dtau`` at ``tau``."""
    _, lam = _single_hazard(tau, h, w, side)
    return float(lam[0]) if np.ndim(tau) == 0 else lam


def event_loglik_terms(seq: EventSequence, w_r: RnnWeights, w_t: HazardNetWeights, M: int, side=None):
    """Per-event terms ``log lambda(tau_k | h_{k-1}) - Phi(tau_k | h_{k-1})`` for k = 1..n-1."""
    topo = w_t.topology
    if w_r.V.shape[0] != topo.rnn_in or w_r.hidden != topo.hidden:
        raise ValueError("RNN weights do not match the hazard network topology")
    if w_r.tau_scale != w_t.tau_scale:
        raise ValueError("RNN and hazard network use different tau scales")
    batch = make_batch([seq], [np.arange(1, len(seq))], M, topo, [side])
    ll = batch_loglik(topo, w_r.flat()[None], w_t.raw[None], batch, w_t.tau_scale)
    bad = np.flatnonzero(~np.isfinite(ll))
    if bad.size:
        raise FloatingPointError(f"non-finite log-likelihood term at event {int(bad[0]) + 1}")
    return ll


def event_loglik(seq: EventSequence, w_r: RnnWeights, w_t: HazardNetWeights, M: int, side=None) -> float:
    """Log-likelihood of events 1..n-1, each conditioned on the ones before it."""
    total = 0.0
    for term in event_loglik_terms(seq, w_r, w_t, M, side):
        total += term
    return float(total)


def hazard_graph(w: HazardNetWeights, h, tau: float, side=None):
    """The network ``F`` as a scalar :mod:`diffgraph` expression.

    Every raw parameter is a graph input named ``W1[i,j]``, ``b1[j]``, ...,
    as are ``tau`` and the hidden state ``h[i]``.  Returns
    ``(graph, tau_node, phi_node)``; ``diffgraph.build_tau_derivative``
    turns ``phi_node`` into the hazard.
    """
    topo = w.topology
    g = Graph()
    tau_n = g.input("tau", float(tau))
    x = [g.input(f"h[{i}]", float(v)) for i, v in enumerate(np.asarray(h, dtype=float))]
    x.append(g.mul(g.constant(w.tau_scale), tau_n))
    if topo.extra:
        x += [g.constant(float(v)) for v in np.asarray(side, dtype=float)]
    n_layers = len(topo.layers) + 1
    for li, (W, b) in enumerate(w.layers, start=1):
        out = []
        for j in range(W.shape[1]):
            terms = [g.input(f"b{li}[{j}]", float(b[j]))]
            for i in range(W.shape[0]):
                raw = g.input(f"W{li}[{i},{j}]", float(W[i, j]))
                side_row = li == 1 and i > topo.hidden
                weight = raw if side_row else g.softplus(raw)
                terms.append(g.mul(weight, x[i]))
            z = g.sum(terms)
            if li < n_layers:
                out.append(g.tanh(z) if topo.activation == "tanh" else g.softplus(z))
            else:
                out.append(g.softplus(z))
        x = out
    return g, tau_n, x[0]


# ----------------------------------------------------------------------
# prediction
# ----------------------------------------------------------------------


class PredictionError(ArithmeticError):
    pass


def bisect_median(phi_fn, n: int, tol: float = 1e-8, max_doublings: int = 60, max_iter: int = 400, tau0=None):
    """Solve ``phi_fn(tau) = ln 2`` for ``n`` independent monotone functions.

    ``phi_fn(tau, rows)`` evaluates the rows selected by ``rows``.  The
    bracket ``[0, hi]`` is doubled until ``Phi(hi) >= ln 2``; bisection stops
    once the bracket is narrower than ``tol`` and ``|Phi - ln 2| <= tol``.
    Returns ``(tau, ok)``; rows whose bracket never closes, or that cannot
    reach ``|Phi - ln 2| <= tol`` at float resolution, are marked failed.
    """
    all_rows = np.arange(n)
    hi = np.ones(n) if tau0 is None else np.asarray(tau0, dtype=float).copy()
    lo = np.zeros(n)
    ok = np.ones(n, dtype=bool)
    phi0 = phi_fn(np.zeros(n), all_rows)
    at_zero = np.abs(phi0 - LN2) <= tol
    ok &= phi0 <= LN2 + tol
    open_ = ok & ~at_zero
    for _ in range(max_doublings):
        rows = np.flatnonzero(open_)
        if rows.size == 0:
            break
        below = phi_fn(hi[rows], rows) < LN2
        lo[rows[below]] = hi[rows[below]]
        hi[rows[below]] *= 2.0
        open_[rows[~below]] = False
    ok &= ~open_
    tau = np.where(at_zero, 0.0, 0.5 * (lo + hi))
    active = ok & ~at_zero
    for _ in range(max_iter):
        rows = np.flatnonzero(active)
        if rows.size == 0:
            break
        mid = 0.5 * (lo[rows] + hi[rows])
        val = phi_fn(mid, rows)
        tau[rows] = mid
        close = np.abs(val - LN2) <= tol
        done = close & (hi[rows] - lo[rows] <= 2.0 * tol)
        below = val < LN2
        lo[rows[below]] = mid[below]
        hi[rows[~below]] = mid[~below]
        # bracket at float resolution: Phi jumps past ln 2 within one ulp
        exhausted = (hi[rows] - lo[rows]) <= np.spacing(mid)
        ok[rows[exhausted & ~close]] = False
        active[rows[done | exhausted]] = False
    ok &= ~active
    return tau, ok


def predict_batch(topo, rnn_flat, haz_flat, batch: EventBatch, tau_scale=1.0, tol=1e-8, max_doublings=60):
    """Median next-event time for every event of the batch.

    Returns ``(t_pred, tau_pred, ok)``; ``t_pred = last_time + tau_pred``.
    """
    h = rnn_forward(topo, rnn_flat, _index_for(rnn_flat, batch), batch.inputs, batch.mask, tau_scale)
    hidx = _index_for(haz_flat, batch)
    extra = batch.extra

    def phi_fn(tau, rows):
        phi, _ = anchored_forward(
            topo, haz_flat, hidx[rows], h[rows], tau, None if extra is None else extra[rows], tau_scale
        )
        return phi

    tau0 = np.full(len(batch), 1.0 / tau_scale)
    tau, ok = bisect_median(phi_fn, len(batch), tol, max_doublings, tau0=tau0)
    return batch.last_time + tau, tau, ok


def predict_next(
    seq: EventSequence, j: int, w_r: RnnWeights, w_t: HazardNetWeights, M: int, tol: float = 1e-8,
    side=None, max_doublings: int = 60,
) -> float:
    """Median of the next event time after event ``j`` (single-step lookahead)."""
    if tol <= 0:
        raise ValueError("tol must be positive")
    h = encode_history(seq, j, w_r, M, side)

    def phi_fn(tau, rows):
        return np.atleast_1d(cumulative_hazard(tau, h, w_t, side))

    tau, ok = bisect_median(phi_fn, 1, tol, max_doublings, tau0=np.array([1.0 / w_t.tau_scale]))
    if not ok[0]:
        raise PredictionError(f"no median found after event {j} of {seq.id!r}")
    return float(seq.timestamps[j] + tau[0])


# ----------------------------------------------------------------------
# checkpoints
# ----------------------------------------------------------------------


def save_checkpoint(path, header: dict, arrays: dict[str, np.ndarray]) -> None:
    """Write a text checkpoint: a JSON header line, then one ``key`` JSON line per array.

    Floats are written with ``repr`` precision, so loading is bit exact.
    """
    lines = [json.dumps({"header": header, "keys": list(arrays)}, sort_keys=True)]
    for key, arr in arrays.items():
        arr = np.asarray(arr, dtype=float)
        lines.append(json.dumps({"key": key, "shape": list(arr.shape), "values": [float(v) for v in arr.ravel()]}))
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def load_checkpoint(path) -> tuple[dict, dict[str, np.ndarray]]:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    lines = path.read_text(encoding="utf-8").splitlines()
    head = json.loads(lines[0])
    arrays = {}
    for line in lines[1:]:
        if not line.strip():
            continue
        obj = json.loads(line)
        arrays[obj["key"]] = np.asarray(obj["values"], dtype=float).reshape(obj["shape"])
    missing = set(head["keys"]) - set(arrays)
    if missing:
        raise ValueError(f"checkpoint is missing arrays: {sorted(missing)}")
    return head["header"], arrays
