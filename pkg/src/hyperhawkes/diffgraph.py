"""A small reverse-mode differentiation engine over scalar graphs.

Nodes are appended to a :class:`Graph` in creation order, which is always a
topological order.  :func:`build_tau_derivative` adds the nodes of the
forward-mode tangent of an expression with respect to one input, so a hazard
``dPhi/dtau`` becomes an ordinary node that ``backward`` can differentiate
again.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

OPS = ("constant", "input", "add", "mul", "tanh", "softplus", "exp", "log", "neg", "reciprocal")


class DomainError(ArithmeticError):
    pass


class UnsupportedOp(ValueError):
    pass


def softplus(x: float) -> float:
    return max(x, 0.0) + math.log1p(math.exp(-abs(x)))


def sigmoid(x: float) -> float:
    if x >= 0:
        return 1.0 / (1.0 + math.exp(-x))
    e = math.exp(x)
    return e / (1.0 + e)


def inverse_softplus(y: float) -> float:
    if not y > 0:
        raise DomainError("inverse softplus needs a positive value")
    return y + math.log(-math.expm1(-y))


class Node:
    __slots__ = ("graph", "index", "op", "parents", "value", "adjoint", "name")

    def __init__(self, graph, index, op, parents, value=0.0, name=None):
        self.graph = graph
        self.index = index
        self.op = op
        self.parents = parents
        self.value = value
        self.adjoint = 0.0
        self.name = name

    def __repr__(self):
        label = f" {self.name!r}" if self.name else ""
        return f"Node({self.op}{label} #{self.index} value={self.value:.6g})"

    def _lift(self, other):
        return other if isinstance(other, Node) else self.graph.constant(float(other))

    def __add__(self, other):
        return self.graph.add(self, self._lift(other))

    __radd__ = __add__

    def __mul__(self, other):
        return self.graph.mul(self, self._lift(other))

    __rmul__ = __mul__

    def __neg__(self):
        return self.graph.neg(self)

    def __sub__(self, other):
        return self.graph.add(self, self.graph.neg(self._lift(other)))

    def __rsub__(self, other):
        return self.graph.add(self._lift(other), self.graph.neg(self))

    def __truediv__(self, other):
        return self.graph.mul(self, self.graph.reciprocal(self._lift(other)))


class Graph:
    """Append-only scalar computation graph."""

    def __init__(self):
        self.nodes: list[Node] = []
        self.inputs: dict[str, Node] = {}
        self._evaluated = False

    def __len__(self):
        return len(self.nodes)

    def _new(self, op, parents=(), value=0.0, name=None):
        node = Node(self, len(self.nodes), op, tuple(parents), value, name)
        self.nodes.append(node)
        self._evaluated = False
        if op not in ("constant", "input"):
            try:
                node.value = _evaluate(node)
            except DomainError:
                node.value = math.nan
        return node

    def constant(self, value: float, name=None) -> Node:
        return self._new("constant", (), float(value), name)

    def input(self, name: str, value: float = 0.0) -> Node:
        if name in self.inputs:
            raise ValueError(f"duplicate input {name!r}")
        node = self._new("input", (), float(value), name)
        self.inputs[name] = node
        return node

    def add(self, a, b):
        return self._new("add", (a, b))

    def mul(self, a, b):
        return self._new("mul", (a, b))

    def tanh(self, a):
        return self._new("tanh", (a,))

    def softplus(self, a):
        return self._new("softplus", (a,))

    def exp(self, a):
        return self._new("exp", (a,))

    def log(self, a):
        return self._new("log", (a,))

    def neg(self, a):
        return self._new("neg", (a,))

    def reciprocal(self, a):
        return self._new("reciprocal", (a,))

    # composite helpers built from the primitive set

    def sigmoid(self, a):
        # sigmoid(x) = exp(-softplus(-x))
        return self.exp(self.neg(self.softplus(self.neg(a))))

    def sum(self, terms):
        terms = list(terms)
        if not terms:
            return self.constant(0.0)
        total = terms[0]
        for t in terms[1:]:
            total = self.add(total, t)
        return total

    def dot(self, xs, ys):
        return self.sum(self.mul(x, y) for x, y in zip(xs, ys))


def _evaluate(node: Node) -> float:
    op = node.op
    p = node.parents
    if op == "add":
        return p[0].value + p[1].value
    if op == "mul":
        return p[0].value * p[1].value
    if op == "tanh":
        return math.tanh(p[0].value)
    if op == "softplus":
        return softplus(p[0].value)
    if op == "exp":
        return math.exp(p[0].value)
    if op == "log":
        x = p[0].value
        if not x > 0:
            raise DomainError(f"log of non-positive value {x!r} at node #{node.index}")
        return math.log(x)
    if op == "neg":
        return -p[0].value
    if op == "reciprocal":
        x = p[0].value
        if not x > 0:
            raise DomainError(f"reciprocal of non-positive value {x!r} at node #{node.index}")
        return 1.0 / x
    raise UnsupportedOp(op)


def forward(graph: Graph, inputs: dict[str, float] | None = None, output: Node | None = None) -> float:
    """Re-evaluate every node; returns the value of ``output`` (default: last node)."""
    inputs = inputs or {}
    unknown = set(inputs) - set(graph.inputs)
    if unknown:
        raise KeyError(f"unknown inputs: {sorted(unknown)}")
    for name, value in inputs.items():
        graph.inputs[name].value = float(value)
    for node in graph.nodes:
        if node.op not in ("constant", "input"):
            node.value = _evaluate(node)
    graph._evaluated = True
    out = output if output is not None else graph.nodes[-1]
    return out.value


def backward(graph: Graph, output: Node | None = None) -> dict[str, float]:
    """Populate adjoints of ``d output / d node``; returns them for the inputs."""
    if not graph._evaluated:
        raise RuntimeError("backward called before forward")
    out = output if output is not None else graph.nodes[-1]
    for node in graph.nodes:
        node.adjoint = 0.0
    out.adjoint = 1.0
    for node in reversed(graph.nodes[: out.index + 1]):
        g = node.adjoint
        if g == 0.0:
            continue
        op = node.op
        p = node.parents
        if op == "add":
            p[0].adjoint += g
            p[1].adjoint += g
        elif op == "mul":
            p[0].adjoint += g * p[1].value
            p[1].adjoint += g * p[0].value
        elif op == "tanh":
            p[0].adjoint += g * (1.0 - node.value * node.value)
        elif op == "softplus":
            p[0].adjoint += g * sigmoid(p[0].value)
        elif op == "exp":
            p[0].adjoint += g * node.value
        elif op == "log":
            p[0].adjoint += g / p[0].value
        elif op == "neg":
            p[0].adjoint -= g
        elif op == "reciprocal":
            p[0].adjoint -= g * node.value * node.value
    return {name: node.adjoint for name, node in graph.inputs.items()}


def build_tau_derivative(phi_graph: Graph, tau_input: Node, output: Node | None = None) -> Node:
    """Append nodes computing ``d output / d tau_input`` by the chain rule.

    Tangents are propagated forward through the affine/activation structure
    of ``output``; nodes that do not depend on ``tau_input`` get no tangent.
    Only the operations of a positive-weight network (affine maps with
    ``tanh`` or ``softplus`` activations) are accepted.
    """
    g = phi_graph
    out = output if output is not None else g.nodes[-1]
    if tau_input.graph is not g:
        raise ValueError("tau_input belongs to another graph")
    stop = out.index
    tangent: dict[int, Node] = {tau_input.index: g.constant(1.0, name="dtau")}
    for node in g.nodes[: stop + 1]:
        op = node.op
        if op in ("constant", "input"):
            continue
        dp = [tangent.get(q.index) for q in node.parents]
        if all(d is None for d in dp):
            continue
        if op == "add":
            a, b = dp
            t = a if b is None else b if a is None else g.add(a, b)
        elif op == "mul":
            x, y = node.parents
            terms = []
            if dp[0] is not None:
                terms.append(g.mul(dp[0], y))
            if dp[1] is not None:
                terms.append(g.mul(x, dp[1]))
            t = g.sum(terms)
        elif op == "neg":
            t = g.neg(dp[0])
        elif op == "tanh":
            # d tanh = (1 - tanh^2) dx
            t = g.mul(g.add(g.constant(1.0), g.neg(g.mul(node, node))), dp[0])
        elif op == "softplus":
            t = g.mul(g.sigmoid(node.parents[0]), dp[0])
        else:
            raise UnsupportedOp(f"op {op!r} on the tau path of node #{node.index}")
        tangent[node.index] = t
    if out.index not in tangent:
        return g.constant(0.0)
    return tangent[out.index]


@dataclass(frozen=True)
class PositiveReparam:
    """Unconstrained ``raw`` value with positive ``effective = softplus(raw)``."""

    raw: float

    @property
    def effective(self) -> float:
        return softplus(self.raw)

    @classmethod
    def from_effective(cls, value: float) -> "PositiveReparam":
        return cls(inverse_softplus(value))


def positive(graph: Graph, raw: Node) -> Node:
    return graph.softplus(raw)
