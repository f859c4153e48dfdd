"""
The `autodiff_service` module is a small reverse-mode differentiation
engine. A `Tape` is a Wengert list: nodes are appended in topological order,
leaves are named placeholders filled in before each `forward` pass, and
`backward` walks the list in reverse accumulating vector-Jacobian products.

Values are float64 numpy arrays and may carry leading batch axes; parameter
leaves without batch axes receive gradients summed over the batch.

Every primitive registers its local derivative, and the derivatives of the
activations are themselves primitives (`tanh_prime`, `sigmoid`). This lets
`derivative_subgraph` append the backward recursion of a layered network as
ordinary nodes, so a later reverse pass differentiates through it (double
backpropagation).
"""

from dataclasses import dataclass, field
from typing import Callable, Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np
from loguru import logger
from scipy.special import expit

from src.utils.config import EXP_CLAMP
from src.utils.errors import ConstructionError, ContractError, NonFiniteError


def _softplus(x):
    return np.log1p(np.exp(-np.abs(x))) + np.maximum(x, 0.0)


def _tanh_prime(x):
    # sech^2 written through exp(-2|x|); 1 - tanh^2 rounds to 0 once |x| > 19
    e = np.exp(-2.0 * np.abs(x))
    return 4.0 * e / ((1.0 + e) * (1.0 + e))


def _exprel(x):
    x = np.asarray(x, dtype=float)
    if np.any(x > EXP_CLAMP):
        logger.warning(f"Clamping {int(np.sum(x > EXP_CLAMP))} exponent(s) above {EXP_CLAMP}")
        x = np.minimum(x, EXP_CLAMP)
    small = np.abs(x) < 1e-8
    safe = np.where(small, 1.0, x)
    return np.where(small, 1.0 + x / 2.0 + x * x / 6.0, np.expm1(safe) / safe)


def _exprel_prime(x):
    x = np.minimum(np.asarray(x, dtype=float), EXP_CLAMP)
    small = np.abs(x) < 1e-4
    safe = np.where(small, 1.0, x)
    exact = (safe * np.exp(safe) - np.expm1(safe)) / (safe * safe)
    return np.where(small, 0.5 + x / 3.0 + x * x / 8.0, exact)


@dataclass(frozen=True)
class Primitive:
    """
    One operation kind

    `forward(*parents, **attrs)` computes the node value and
    `vjps[i](g, out, *parents, **attrs)` the contribution of the upstream
    adjoint `g` to parent `i`. Elementwise unary primitives also expose
    `local(x)`, their scalar derivative.
    """
    name: str
    forward: Callable
    vjps: Tuple[Callable, ...]
    local: Optional[Callable] = None


def _unary(name, fn, local, out_based=None):
    if out_based is not None:
        vjp = lambda g, out, x: g * out_based(out)
    else:
        vjp = lambda g, out, x: g * local(x)
    return Primitive(name, fn, (vjp,), local)


def _matvec_forward(w, x, transpose=False):
    return x @ w if transpose else x @ w.T


def _matvec_vjp_w(g, out, w, x, transpose=False):
    g2 = g.reshape(-1, g.shape[-1])
    x2 = x.reshape(-1, x.shape[-1])
    return x2.T @ g2 if transpose else g2.T @ x2


def _matvec_vjp_x(g, out, w, x, transpose=False):
    return g @ w.T if transpose else g @ w


def _sum_forward(a, axis=None, keepdims=False):
    return np.sum(a, axis=axis, keepdims=keepdims)


def _sum_vjp(g, out, a, axis=None, keepdims=False):
    if axis is not None and not keepdims:
        g = np.expand_dims(g, axis)
    return np.broadcast_to(g, a.shape)


PRIMITIVES: Dict[str, Primitive] = {
    "matvec": Primitive("matvec", _matvec_forward, (_matvec_vjp_w, _matvec_vjp_x)),
    "add": Primitive("add", lambda a, b: a + b, (lambda g, out, a, b: g, lambda g, out, a, b: g)),
    "mul": Primitive("mul", lambda a, b: a * b, (lambda g, out, a, b: g * b, lambda g, out, a, b: g * a)),
    "scale": Primitive("scale", lambda a, c=1.0: c * a, (lambda g, out, a, c=1.0: c * g,)),
    "negate": _unary("negate", lambda x: -x, lambda x: -np.ones_like(x)),
    "tanh": _unary("tanh", np.tanh, _tanh_prime),
    "tanh_prime": _unary("tanh_prime", _tanh_prime, lambda x: -2.0 * np.tanh(x) * _tanh_prime(x)),
    "softplus": _unary("softplus", _softplus, expit),
    "sigmoid": _unary("sigmoid", expit, lambda x: expit(x) * expit(-x)),
    "log": _unary("log", np.log, lambda x: 1.0 / x),
    "exp": _unary("exp", np.exp, np.exp, out_based=lambda out: out),
    "exprel": _unary("exprel", _exprel, _exprel_prime),
    "sum": Primitive("sum", _sum_forward, (_sum_vjp,)),
}

# activation -> primitive computing its derivative
DERIVATIVES: Dict[str, str] = {
    "tanh": "tanh_prime",
    "softplus": "sigmoid",
    "exp": "exp",
}


def unbroadcast(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    """Sum `grad` down to `shape`, undoing numpy broadcasting"""
    grad = np.asarray(grad)
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, dim in enumerate(shape):
        if dim == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad.reshape(shape)


@dataclass
class Node:
    index: int
    op: str
    parents: Tuple[int, ...] = ()
    attrs: Dict = field(default_factory=dict)
    name: Optional[str] = None
    value: Optional[np.ndarray] = None


class Tape:
    def __init__(self):
        self.nodes: List[Node] = []
        self.leaves: Dict[str, int] = {}

    def __len__(self):
        return len(self.nodes)

    # construction

    def leaf(self, name: str, value=None) -> int:
        if name in self.leaves:
            raise ConstructionError(f"Leaf {name!r} already exists")
        node = Node(len(self.nodes), "leaf", name=name)
        if value is not None:
            node.value = np.asarray(value, dtype=float)
        self.nodes.append(node)
        self.leaves[name] = node.index
        return node.index

    def constant(self, value) -> int:
        node = Node(len(self.nodes), "constant", value=np.asarray(value, dtype=float))
        self.nodes.append(node)
        return node.index

    def apply(self, op: str, *parents: int, **attrs) -> int:
        if op not in PRIMITIVES:
            raise ConstructionError(f"Unknown primitive {op!r}")
        if any(p < 0 or p >= len(self.nodes) for p in parents):
            raise ConstructionError(f"Primitive {op!r} references a node outside the tape")
        node = Node(len(self.nodes), op, tuple(parents), attrs)
        self.nodes.append(node)
        return node.index

    def matvec(self, w: int, x: int, transpose: bool = False) -> int:
        return self.apply("matvec", w, x, transpose=transpose)

    def add(self, a: int, b: int) -> int:
        return self.apply("add", a, b)

    def sub(self, a: int, b: int) -> int:
        return self.apply("add", a, self.apply("negate", b))

    def mul(self, a: int, b: int) -> int:
        return self.apply("mul", a, b)

    def scale(self, a: int, c: float) -> int:
        return self.apply("scale", a, c=float(c))

    def sum(self, a: int, axis: Optional[int] = None, keepdims: bool = False) -> int:
        return self.apply("sum", a, axis=axis, keepdims=keepdims)

    def dot(self, a: int, b: int, keepdims: bool = False) -> int:
        return self.sum(self.mul(a, b), axis=-1, keepdims=keepdims)

    def negate(self, x: int) -> int:
        return self.apply("negate", x)

    def tanh(self, x: int) -> int:
        return self.apply("tanh", x)

    def softplus(self, x: int) -> int:
        return self.apply("softplus", x)

    def log(self, x: int) -> int:
        return self.apply("log", x)

    def exp(self, x: int) -> int:
        return self.apply("exp", x)

    def exprel(self, x: int) -> int:
        return self.apply("exprel", x)

    # evaluation

    def assign(self, values: Mapping[str, np.ndarray]):
        for name, value in values.items():
            if name not in self.leaves:
                raise ContractError(f"Tape has no leaf named {name!r}")
            self.nodes[self.leaves[name]].value = np.asarray(value, dtype=float)

    def value(self, index: int) -> np.ndarray:
        value = self.nodes[index].value
        if value is None:
            raise ContractError(f"Node {index} has not been evaluated")
        return value

    def forward(self, upto: Optional[int] = None) -> List[np.ndarray]:
        """Evaluate every node (or nodes up to `upto`) in tape order"""
        last = len(self.nodes) if upto is None else upto + 1
        for node in self.nodes[:last]:
            if node.op == "leaf":
                if node.value is None:
                    raise ContractError(f"Leaf {node.name!r} (node {node.index}) has no value")
                continue
            if node.op == "constant":
                continue
            args = [self.nodes[p].value for p in node.parents]
            with np.errstate(all="ignore"):
                node.value = np.asarray(PRIMITIVES[node.op].forward(*args, **node.attrs), dtype=float)
            if not np.all(np.isfinite(node.value)):
                raise NonFiniteError(f"Non-finite value at node {node.index} ({node.op})", node.index)
        return [node.value for node in self.nodes[:last]]

    def backward(self, output: int) -> Dict[str, np.ndarray]:
        """Gradient of the scalar node `output` w.r.t. every named leaf"""
        out_value = self.value(output)
        if out_value.size != 1:
            raise ContractError(f"backward needs a scalar output, node {output} has shape {out_value.shape}")

        adjoints: List[Optional[np.ndarray]] = [None] * (output + 1)
        adjoints[output] = np.ones_like(out_value)
        for node in reversed(self.nodes[:output + 1]):
            g = adjoints[node.index]
            if g is None or not node.parents:
                continue
            primitive = PRIMITIVES[node.op]
            args = [self.nodes[p].value for p in node.parents]
            for position, parent in enumerate(node.parents):
                contribution = primitive.vjps[position](g, node.value, *args, **node.attrs)
                contribution = unbroadcast(contribution, args[position].shape)
                if adjoints[parent] is None:
                    adjoints[parent] = np.array(contribution, dtype=float)
                else:
                    adjoints[parent] = adjoints[parent] + contribution

        grads = {}
        for name, index in self.leaves.items():
            value = self.nodes[index].value
            if index <= output and adjoints[index] is not None:
                grads[name] = adjoints[index]
            else:
                grads[name] = np.zeros_like(value) if value is not None else None
        return grads


def forward(tape: Tape) -> List[np.ndarray]:
    return tape.forward()


def backward(tape: Tape, output: int) -> Dict[str, np.ndarray]:
    return tape.backward(output)


@dataclass
class Block:
    """One weighted input of a layer; `scalar` inputs are (..., 1) and weighted by a vector"""
    weight: int
    input: int
    scalar: bool = False


@dataclass
class Layer:
    blocks: Sequence[Block]
    bias: int
    activation: str
    preactivation: int = -1
    output: int = -1


@dataclass
class LayeredNetwork:
    layers: List[Layer]

    @property
    def output(self) -> int:
        return self.layers[-1].output


def build_layered(tape: Tape, layers: Sequence[Layer]) -> LayeredNetwork:
    """Append the feedforward pass Y(j) = f(W(j) Y(j-1) + b(j)) for every layer"""
    for layer in layers:
        if layer.activation not in PRIMITIVES:
            raise ConstructionError(f"Unknown activation {layer.activation!r}")
        terms = [
            tape.mul(block.weight, block.input) if block.scalar else tape.matvec(block.weight, block.input)
            for block in layer.blocks
        ]
        pre = terms[0]
        for term in terms[1:]:
            pre = tape.add(pre, term)
        layer.preactivation = tape.add(pre, layer.bias)
        layer.output = tape.apply(layer.activation, layer.preactivation)
    return LayeredNetwork(list(layers))


def derivative_subgraph(tape: Tape, net: LayeredNetwork, input_index: int) -> int:
    """
    Append nodes computing d(output)/d(input) for the first-layer block `input_index`

    Runs the backward recursion y(L) = 1,
    y(j-1) = W(j)^T (f'(a(j)) * y(j)) as forward nodes and returns the node
    holding the block's component of y(0). The output layer must have a
    single unit.
    """
    if not net.layers:
        raise ConstructionError("Network has no layers")
    if not 0 <= input_index < len(net.layers[0].blocks):
        raise ConstructionError(f"Input index {input_index} outside the first layer's blocks")

    y = None
    for j in range(len(net.layers) - 1, -1, -1):
        layer = net.layers[j]
        derivative = DERIVATIVES.get(layer.activation)
        if derivative is None:
            raise ConstructionError(f"Activation {layer.activation!r} has no registered derivative primitive")
        slope = tape.apply(derivative, layer.preactivation)
        delta = slope if y is None else tape.mul(slope, y)
        if j > 0:
            if len(layer.blocks) != 1 or layer.blocks[0].scalar:
                raise ConstructionError(f"Layer {j + 1} must take a single matrix-weighted input")
            y = tape.matvec(layer.blocks[0].weight, delta, transpose=True)
        else:
            block = layer.blocks[input_index]
            if block.scalar:
                return tape.dot(block.weight, delta, keepdims=True)
            return tape.matvec(block.weight, delta, transpose=True)
