"""The four model kinds behind one flat-parameter interface.

==================  ===========================================  ==================
kind                per-sequence weights                         trainable blocks
==================  ===========================================  ==================
fnhp                none (one shared RNN and hazard network)     rnn, haz
fnhp-descriptor     none; descriptor appended to both inputs     rnn, haz
hyper-fnn           hazard network generated by ``f_t``          rnn, ft.*
hyper-fnn-rnn       RNN by ``f_r`` and hazard network by ``f_t``  fr.*, ft.*
==================  ===========================================  ==================
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import nhp
from .hypernet import HyperNetParams, HyperNetwork, Variant, effective_outputs
from .nhp import EventBatch, HazardNetWeights, RnnWeights, Topology

KINDS = ("fnhp", "fnhp-descriptor", "hyper-fnn", "hyper-fnn-rnn")
REPORT_NAMES = {
    "fnhp": "FNHP",
    "fnhp-descriptor": "FNHP-Descriptor",
    "hyper-fnn": "HyperHawkes-FNN",
    "hyper-fnn-rnn": "HyperHawkes-FNN-RNN",
}


def parse_kind(kind: str) -> str:
    key = str(kind).strip()
    for k, name in REPORT_NAMES.items():
        if key in (k, name):
            return k
    raise ValueError(f"unknown model kind {kind!r}; expected one of {', '.join(KINDS)}")


def init_target(topo: Topology, rng) -> tuple[np.ndarray, np.ndarray]:
    """Initial flat RNN weights and raw hazard weights.

    Hazard biases are set so that pre-activations are centred at zero
    history and zero elapsed time, with network output ``F(0) = 0.1``.
    """
    H = topo.hidden
    rnn = {
        "V": rng.standard_normal((topo.rnn_in, H)),
        "U": rng.standard_normal((H, H)) * 0.5 / np.sqrt(H),
        "b": np.zeros(H),
    }
    if topo.rnn_in > 1:
        rnn["V"][1:] /= np.sqrt(topo.rnn_in - 1)
    rnn_flat = np.concatenate([rnn[k].ravel() for k, _ in topo.rnn_shapes()])

    mask = topo.hazard_positive_mask()
    shapes = topo.hazard_shapes()
    blocks = {}
    for name, shape in shapes:
        if name.startswith("W"):
            fan_in = shape[0]
            blocks[name] = rng.uniform(0.5, 1.5, shape) / np.sqrt(fan_in)
        else:
            blocks[name] = np.zeros(shape)
    if topo.extra:
        blocks["W1"][H + 1 :] = rng.standard_normal((topo.extra, topo.layers[0])) / np.sqrt(topo.hazard_in)
    # centre each layer at h = 0, tau = 0, side inputs = 0
    act = nhp._activation(topo.activation)
    a = np.zeros(topo.hazard_in)
    n_layers = len(topo.layers) + 1
    for i in range(1, n_layers + 1):
        z = a @ blocks[f"W{i}"]
        if i < n_layers:
            blocks[f"b{i}"] = -z
            a = act(np.zeros_like(z))[0]
        else:
            blocks[f"b{i}"] = -z + nhp.inverse_softplus(0.1)
    eff = np.concatenate([blocks[k].ravel() for k, _ in shapes])
    haz_raw = np.where(mask, nhp.inverse_softplus(np.where(mask, eff, 1.0)), eff)
    return rnn_flat, haz_raw


@dataclass
class GenerationCache:
    descriptors: np.ndarray | None = None
    fr_hidden: np.ndarray | None = None
    ft_hidden: np.ndarray | None = None


@dataclass
class HawkesModel:
    kind: str
    topology: Topology
    params: dict[str, np.ndarray]
    M: int = 20
    tau_scale: float = 1.0
    descriptor_dim: int = 0
    meta: dict = field(default_factory=dict)

    # -- construction -------------------------------------------------

    @classmethod
    def init(
        cls,
        kind: str,
        descriptor_dim: int,
        seed: int = 0,
        M: int = 20,
        hidden: int = 16,
        layers=(16, 16),
        activation: str = "tanh",
        hyper_hidden: int = 32,
        hyper_out_scale: float = 0.05,
        tau_scale: float = 1.0,
    ) -> "HawkesModel":
        kind = parse_kind(kind)
        rng = np.random.default_rng(seed)
        if kind == "fnhp-descriptor":
            topo = Topology(hidden, layers, rnn_in=1 + descriptor_dim, extra=descriptor_dim, activation=activation)
        else:
            topo = Topology(hidden, layers, activation=activation)
        rnn0, haz0 = init_target(topo, rng)
        params: dict[str, np.ndarray] = {}
        if kind in ("fnhp", "fnhp-descriptor", "hyper-fnn"):
            params["rnn"] = rnn0
        if kind in ("fnhp", "fnhp-descriptor"):
            params["haz"] = haz0
        if kind == "hyper-fnn-rnn":
            params.update(HyperNetwork.init(descriptor_dim, rnn0, rng, hyper_hidden, hyper_out_scale).arrays("fr"))
        if kind in ("hyper-fnn", "hyper-fnn-rnn"):
            params.update(HyperNetwork.init(descriptor_dim, haz0, rng, hyper_hidden, hyper_out_scale).arrays("ft"))
        return cls(kind, topo, params, M, tau_scale, descriptor_dim)

    # -- flat parameter vector -----------------------------------------

    @property
    def keys(self) -> list[str]:
        return list(self.params)

    @property
    def n_params(self) -> int:
        return sum(v.size for v in self.params.values())

    def get_vector(self) -> np.ndarray:
        return np.concatenate([self.params[k].ravel() for k in self.keys])

    def set_vector(self, vec) -> None:
        vec = np.asarray(vec, dtype=float)
        if vec.shape != (self.n_params,):
            raise ValueError(f"expected {self.n_params} parameters, got {vec.shape}")
        pos = 0
        for k in self.keys:
            n = self.params[k].size
            self.params[k] = vec[pos : pos + n].reshape(self.params[k].shape).copy()
            pos += n

    def vector_from(self, grads: dict[str, np.ndarray]) -> np.ndarray:
        return np.concatenate([np.asarray(grads.get(k, np.zeros_like(self.params[k]))).ravel() for k in self.keys])

    def descriptor_pathways(self) -> np.ndarray:
        """Flat code per parameter: 1 where the descriptor acts on the RNN, 2 on the hazard net, else 0.

        These are the hypernetwork weight matrices, or the descriptor
        columns of the RNN and hazard inputs for ``fnhp-descriptor``.
        """
        parts = []
        H = self.topology.hidden
        for k in self.keys:
            code = np.zeros(self.params[k].shape, dtype=np.int8)
            if k in ("fr.W_in", "fr.W_out"):
                code[...] = 1
            elif k in ("ft.W_in", "ft.W_out"):
                code[...] = 2
            elif self.kind == "fnhp-descriptor" and k == "rnn":
                V = np.zeros((self.topology.rnn_in, H), dtype=np.int8)
                V[1:] = 1
                code[: V.size] = V.ravel()
            elif self.kind == "fnhp-descriptor" and k == "haz":
                W1 = np.zeros((self.topology.hazard_in, self.topology.layers[0]), dtype=np.int8)
                W1[H + 1 :] = 2
                code[: W1.size] = W1.ravel()
            parts.append(code.ravel())
        return np.concatenate(parts)

    def copy(self) -> "HawkesModel":
        return HawkesModel(
            self.kind, self.topology, {k: v.copy() for k, v in self.params.items()},
            self.M, self.tau_scale, self.descriptor_dim, dict(self.meta),
        )

    # -- hypernetworks ------------------------------------------------

    @property
    def is_hyper(self) -> bool:
        return self.kind in ("hyper-fnn", "hyper-fnn-rnn")

    @property
    def uses_descriptor(self) -> bool:
        return self.kind != "fnhp"

    @property
    def variant(self) -> Variant | None:
        return Variant(self.kind) if self.is_hyper else None

    def hypernet(self) -> HyperNetParams:
        if not self.is_hyper:
            raise ValueError(f"{self.kind} has no hypernetwork")
        fr = HyperNetwork.from_arrays(self.params, "fr") if self.kind == "hyper-fnn-rnn" else None
        return HyperNetParams(HyperNetwork.from_arrays(self.params, "ft"), fr)

    def generate(self, descriptors):
        """Stacked target parameters for the given descriptors (S, D).

        Shared blocks come back with a single row.
        """
        cache = GenerationCache()
        if self.kind == "hyper-fnn-rnn":
            d = np.atleast_2d(np.asarray(descriptors, dtype=float))
            rnn, cache.fr_hidden = HyperNetwork.from_arrays(self.params, "fr").forward(d)
            cache.descriptors = d
        else:
            rnn = self.params["rnn"][None]
        if self.is_hyper:
            d = np.atleast_2d(np.asarray(descriptors, dtype=float))
            haz, cache.ft_hidden = HyperNetwork.from_arrays(self.params, "ft").forward(d)
            cache.descriptors = d
        else:
            haz = self.params["haz"][None]
        return rnn, haz, cache

    def generate_backward(self, cache: GenerationCache, g_rnn, g_haz) -> dict[str, np.ndarray]:
        grads = {}
        if self.kind == "hyper-fnn-rnn":
            net = HyperNetwork.from_arrays(self.params, "fr")
            for k, v in net.backward(cache.descriptors, cache.fr_hidden, g_rnn).items():
                grads[f"fr.{k}"] = v
        else:
            grads["rnn"] = g_rnn[0]
        if self.is_hyper:
            net = HyperNetwork.from_arrays(self.params, "ft")
            for k, v in net.backward(cache.descriptors, cache.ft_hidden, g_haz).items():
                grads[f"ft.{k}"] = v
        else:
            grads["haz"] = g_haz[0]
        return grads

    def weights_for(self, descriptor=None) -> tuple[RnnWeights, HazardNetWeights]:
        """Target-network weights for one sequence."""
        d = None if descriptor is None else np.asarray(descriptor, dtype=float)[None]
        if self.is_hyper and d is None:
            raise ValueError(f"{self.kind} needs a descriptor")
        rnn, haz, _ = self.generate(d if d is not None else np.zeros((1, max(self.descriptor_dim, 1))))
        return (
            RnnWeights.from_flat(self.topology, rnn[0], self.tau_scale),
            HazardNetWeights(self.topology, haz[0], self.tau_scale),
        )

    def hazard_mask(self) -> np.ndarray:
        return self.topology.hazard_positive_mask()

    def generated_outputs(self, descriptors):
        """Generated weights (after the positive map) for the regularizer.

        Returns ``(rnn_out or None, haz_eff, haz_deriv, cache)``.
        """
        rnn, haz, cache = self.generate(descriptors)
        eff, deriv = effective_outputs(haz, self.hazard_mask())
        return (rnn if self.kind == "hyper-fnn-rnn" else None), eff, deriv, cache

    # -- likelihood and prediction ------------------------------------

    def batch(self, seqs, events, descriptors=None) -> EventBatch:
        """Batch over sequences; ``descriptors`` is (S, D) aligned with ``seqs``."""
        desc = None if descriptors is None else np.asarray(descriptors, dtype=float)
        if self.uses_descriptor and desc is None:
            raise ValueError(f"{self.kind} needs descriptors")
        return nhp.make_batch(seqs, events, self.M, self.topology, desc)

    def loglik(self, batch: EventBatch, descriptors=None) -> np.ndarray:
        rnn, haz, _ = self.generate(self._desc(descriptors, batch))
        return nhp.batch_loglik(self.topology, rnn, haz, batch, self.tau_scale)

    def nll_grad(self, batch: EventBatch, descriptors=None, weights=None):
        """``(loss, per-event loglik, flat gradient)`` of the weighted NLL."""
        rnn, haz, cache = self.generate(self._desc(descriptors, batch))
        loss, ll, g_rnn, g_haz = nhp.batch_nll_grad(self.topology, rnn, haz, batch, self.tau_scale, weights)
        grads = self.generate_backward(cache, g_rnn, g_haz)
        return loss, ll, self.vector_from(grads)

    def predict(self, batch: EventBatch, descriptors=None, tol=1e-8):
        rnn, haz, _ = self.generate(self._desc(descriptors, batch))
        return nhp.predict_batch(self.topology, rnn, haz, batch, self.tau_scale, tol)

    def phi(self, batch: EventBatch, tau, descriptors=None) -> np.ndarray:
        """``Phi(tau_n | h_n)`` at arbitrary elapsed times for the events of a batch."""
        rnn, haz, _ = self.generate(self._desc(descriptors, batch))
        idx_r = batch.group if rnn.shape[0] > 1 else np.zeros(len(batch), dtype=int)
        idx_t = batch.group if haz.shape[0] > 1 else np.zeros(len(batch), dtype=int)
        h = nhp.rnn_forward(self.topology, rnn, idx_r, batch.inputs, batch.mask, self.tau_scale)
        phi, _ = nhp.anchored_forward(self.topology, haz, idx_t, h, np.asarray(tau, float), batch.extra, self.tau_scale)
        return phi

    def _desc(self, descriptors, batch):
        if not self.is_hyper:
            return None
        if descriptors is None:
            raise ValueError(f"{self.kind} needs descriptors")
        d = np.atleast_2d(np.asarray(descriptors, dtype=float))
        if len(batch) and batch.group.max() >= d.shape[0]:
            raise ValueError("batch refers to more sequences than descriptors given")
        return d

    # -- checkpoints --------------------------------------------------

    def header(self) -> dict:
        return {
            "kind": self.kind,
            "topology": self.topology.to_dict(),
            "M": self.M,
            "tau_scale": self.tau_scale,
            "descriptor_dim": self.descriptor_dim,
            "rnn_size": self.topology.rnn_size,
            "hazard_size": self.topology.hazard_size,
            "n_params": self.n_params,
            "meta": self.meta,
        }

    def save(self, path) -> None:
        nhp.save_checkpoint(path, self.header(), self.params)

    @classmethod
    def load(cls, path) -> "HawkesModel":
        header, arrays = nhp.load_checkpoint(path)
        model = cls(
            parse_kind(header["kind"]),
            Topology.from_dict(header["topology"]),
            arrays,
            int(header["M"]),
            float(header["tau_scale"]),
            int(header["descriptor_dim"]),
            dict(header.get("meta", {})),
        )
        if model.n_params != header["n_params"]:
            raise ValueError("checkpoint parameter count does not match its header")
        if model.is_hyper:
            model.hypernet().check_topology(model.topology)
        return model
