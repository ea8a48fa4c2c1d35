"""Descriptor-conditioned hypernetworks that emit neural Hawkes process weights.

``f_r`` maps a descriptor to the flat RNN weights and ``f_t`` to the raw
hazard-network weights.  Both are one-hidden-layer networks with a tanh
hidden layer and a linear output; the positivity of the generated hazard
weights comes from passing their raw outputs through softplus.
"""
from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np

from .nhp import HazardNetWeights, RnnWeights, Topology, sigmoid, softplus

HIDDEN_UNITS = 32


class Variant(str, enum.Enum):
    FNN_ONLY = "hyper-fnn"
    FNN_RNN = "hyper-fnn-rnn"


@dataclass
class HyperNetwork:
    """One weight generator ``d -> tanh(d W_in + b_in) W_out + b_out``."""

    W_in: np.ndarray
    b_in: np.ndarray
    W_out: np.ndarray
    b_out: np.ndarray

    def __post_init__(self):
        if self.W_in.shape[1] != self.b_in.shape[0] or self.W_out.shape[0] != self.b_in.shape[0]:
            raise ValueError("inconsistent hypernetwork shapes")
        if self.W_out.shape[1] != self.b_out.shape[0]:
            raise ValueError("inconsistent hypernetwork output shapes")

    @property
    def descriptor_dim(self) -> int:
        return self.W_in.shape[0]

    @property
    def output_size(self) -> int:
        return self.b_out.shape[0]

    @classmethod
    def init(cls, descriptor_dim, output_bias, rng, hidden=HIDDEN_UNITS, out_scale=0.05) -> "HyperNetwork":
        """Random hidden layer; output weights small and output bias at ``output_bias``.

        With ``out_scale = 0`` every descriptor starts from the same target weights.
        """
        output_bias = np.asarray(output_bias, dtype=float)
        W_in = rng.standard_normal((descriptor_dim, hidden)) / np.sqrt(descriptor_dim)
        W_out = rng.standard_normal((hidden, output_bias.shape[0])) * out_scale / np.sqrt(hidden)
        return cls(W_in, np.zeros(hidden), W_out, output_bias.copy())

    def arrays(self, prefix: str) -> dict[str, np.ndarray]:
        return {
            f"{prefix}.W_in": self.W_in,
            f"{prefix}.b_in": self.b_in,
            f"{prefix}.W_out": self.W_out,
            f"{prefix}.b_out": self.b_out,
        }

    @classmethod
    def from_arrays(cls, arrays, prefix) -> "HyperNetwork":
        return cls(*(np.asarray(arrays[f"{prefix}.{k}"], dtype=float) for k in ("W_in", "b_in", "W_out", "b_out")))

    def forward(self, d):
        """Outputs for descriptors ``d`` (S, D); returns ``(out, hidden activations)``."""
        d = np.atleast_2d(np.asarray(d, dtype=float))
        if d.shape[1] != self.descriptor_dim:
            raise ValueError(f"descriptor dimension {d.shape[1]} != {self.descriptor_dim}")
        a = np.tanh(d @ self.W_in + self.b_in)
        return a @ self.W_out + self.b_out, a

    def backward(self, d, a, g_out) -> dict[str, np.ndarray]:
        d = np.atleast_2d(np.asarray(d, dtype=float))
        g_a = g_out @ self.W_out.T
        g_z = g_a * (1.0 - a * a)
        return {
            "W_in": d.T @ g_z,
            "b_in": g_z.sum(axis=0),
            "W_out": a.T @ g_out,
            "b_out": g_out.sum(axis=0),
        }


@dataclass
class HyperNetParams:
    """Shared parameters of ``f_r`` (absent in the FNN-only variant) and ``f_t``."""

    theta_ft: HyperNetwork
    theta_fr: HyperNetwork | None = None

    @property
    def variant(self) -> Variant:
        return Variant.FNN_ONLY if self.theta_fr is None else Variant.FNN_RNN

    def check_topology(self, topo: Topology) -> None:
        if self.theta_ft.output_size != topo.hazard_size:
            raise ValueError(
                f"f_t emits {self.theta_ft.output_size} values, the hazard network has {topo.hazard_size}"
            )
        if self.theta_fr is not None and self.theta_fr.output_size != topo.rnn_size:
            raise ValueError(f"f_r emits {self.theta_fr.output_size} values, the RNN has {topo.rnn_size}")


def generate_rnn_weights(d, theta: HyperNetParams, topo: Topology, tau_scale: float = 1.0) -> RnnWeights:
    if theta.theta_fr is None:
        raise ValueError("the FNN-only variant does not generate RNN weights")
    theta.check_topology(topo)
    out, _ = theta.theta_fr.forward(np.asarray(d, dtype=float)[None])
    return RnnWeights.from_flat(topo, out[0], tau_scale)


def generate_hazard_weights(d, theta: HyperNetParams, topo: Topology, tau_scale: float = 1.0) -> HazardNetWeights:
    theta.check_topology(topo)
    out, _ = theta.theta_ft.forward(np.asarray(d, dtype=float)[None])
    return HazardNetWeights(topo, out[0], tau_scale)


def effective_outputs(raw, mask):
    """Generated weights as the target network uses them, with their derivative."""
    eff = np.where(mask, softplus(raw), raw)
    deriv = np.where(mask, sigmoid(raw), 1.0)
    return eff, deriv
