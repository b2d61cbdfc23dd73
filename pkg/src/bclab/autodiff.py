"""Minimal reverse-mode differentiation kernel.

Everything runs in float64 on numpy arrays. Operations executed while a
Tape is active are appended to that tape in execution order, which is by
construction a topological order of the graph; backward() replays the
records once, in reverse. Tensors that do not require gradients (channel
noise, message embeddings) participate in the forward pass as constants.

A tape and the tensors recorded on it are a single-threaded unit of work.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Iterator

import numpy as np

LOG_CLAMP = 1e-12


class AutodiffError(Exception):
    pass


class DimensionError(AutodiffError):
    pass


class GraphError(AutodiffError):
    pass


class Tensor:
    """A float64 array plus a gradient slot."""

    __slots__ = ("data", "grad", "requires_grad")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self) -> None:
        self.grad = np.zeros_like(self.data)

    def add_grad(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    def __repr__(self) -> str:
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"


def constant(data) -> Tensor:
    return Tensor(data, requires_grad=False)


def zeros(shape) -> Tensor:
    return Tensor(np.zeros(shape), requires_grad=False)


class _Node:
    __slots__ = ("name", "inputs", "out", "bwd")

    def __init__(self, name, inputs, out, bwd):
        self.name = name
        self.inputs = inputs
        self.out = out
        self.bwd = bwd


_TAPES: list["Tape"] = []


class Tape:
    """Ordered record of executed operations."""

    __slots__ = ("records",)

    def __init__(self):
        self.records: list[_Node] = []

    def __enter__(self) -> "Tape":
        _TAPES.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _TAPES.pop()

    def first_nonfinite_node(self) -> str | None:
        """Name of the earliest recorded node with a non-finite output, if any."""
        for rec in self.records:
            if not np.all(np.isfinite(rec.out.data)):
                return rec.name
        return None


def _emit(name: str, inputs: tuple[Tensor, ...], out_data: np.ndarray,
          bwd: Callable[[np.ndarray], tuple]) -> Tensor:
    rg = any(t.requires_grad for t in inputs)
    out = Tensor(out_data, requires_grad=rg)
    if rg and _TAPES:
        _TAPES[-1].records.append(_Node(name, inputs, out, bwd))
    return out


def backward(tape: Tape, loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into each reachable leaf's .grad.

    Gradients add across uses within the graph and across repeated
    backward() calls; callers reset with zero_grad() between batches.
    """
    if loss.data.size != 1:
        raise GraphError(f"backward seed must be scalar, got shape {loss.data.shape}")
    adjoint: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    leaves: dict[int, Tensor] = {id(loss): loss}
    produced = {id(rec.out) for rec in tape.records}
    for rec in reversed(tape.records):
        g = adjoint.pop(id(rec.out), None)
        if g is None:
            continue
        leaves.pop(id(rec.out), None)
        for t, gt in zip(rec.inputs, rec.bwd(g)):
            if gt is None or not t.requires_grad:
                continue
            key = id(t)
            if key in adjoint:
                adjoint[key] = adjoint[key] + gt
            else:
                adjoint[key] = gt
                leaves[key] = t
    for key, t in leaves.items():
        if key not in produced and t.requires_grad:
            t.add_grad(adjoint[key])


# ---------------------------------------------------------------------------
# primitive operations
# ---------------------------------------------------------------------------

def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def add(a: Tensor, b: Tensor) -> Tensor:
    def bwd(g):
        return _unbroadcast(g, a.data.shape), _unbroadcast(g, b.data.shape)
    return _emit("add", (a, b), a.data + b.data, bwd)


def sub(a: Tensor, b: Tensor) -> Tensor:
    def bwd(g):
        return _unbroadcast(g, a.data.shape), _unbroadcast(-g, b.data.shape)
    return _emit("sub", (a, b), a.data - b.data, bwd)


def mul(a: Tensor, b: Tensor) -> Tensor:
    ad, bd = a.data, b.data

    def bwd(g):
        return _unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)
    return _emit("mul", (a, b), ad * bd, bwd)


def scale(x: Tensor, c: float) -> Tensor:
    def bwd(g):
        return (g * c,)
    return _emit("scale", (x,), x.data * c, bwd)


def shift(x: Tensor, c: float) -> Tensor:
    def bwd(g):
        return (g,)
    return _emit("shift", (x,), x.data + c, bwd)


def one_minus(x: Tensor) -> Tensor:
    def bwd(g):
        return (-g,)
    return _emit("one_minus", (x,), 1.0 - x.data, bwd)


def concat(parts: list[Tensor]) -> Tensor:
    """Concatenate along the last axis."""
    sizes = [p.data.shape[-1] for p in parts]
    offsets = np.cumsum([0] + sizes)

    def bwd(g):
        return tuple(g[..., offsets[i]:offsets[i + 1]] for i in range(len(parts)))
    return _emit("concat", tuple(parts), np.concatenate([p.data for p in parts], axis=-1), bwd)


def reshape(x: Tensor, shape) -> Tensor:
    old = x.data.shape

    def bwd(g):
        return (g.reshape(old),)
    return _emit("reshape", (x,), x.data.reshape(shape), bwd)


def pick(x: Tensor, i: int) -> Tensor:
    """Scalar element of a 1-D tensor; gradient scatters back to slot i."""
    if x.data.ndim != 1:
        raise DimensionError(f"pick expects a 1-D tensor, got shape {x.data.shape}")

    def bwd(g):
        gx = np.zeros_like(x.data)
        gx[i] = g
        return (gx,)
    return _emit("pick", (x,), x.data[i], bwd)


def sum_op(x: Tensor) -> Tensor:
    shp = x.data.shape

    def bwd(g):
        return (np.full(shp, float(g)),)
    return _emit("sum", (x,), x.data.sum(), bwd)


def mean_op(x: Tensor) -> Tensor:
    shp = x.data.shape
    n = x.data.size

    def bwd(g):
        return (np.full(shp, float(g) / n),)
    return _emit("mean", (x,), x.data.mean(), bwd)


def affine(x: Tensor, W: Tensor, b: Tensor) -> Tensor:
    """W @ x + b, applied row-wise for batched x of shape [batch, in]."""
    if W.data.ndim != 2:
        raise DimensionError(f"affine weight must be 2-D, got shape {W.data.shape}")
    if W.data.shape[1] != x.data.shape[-1]:
        raise DimensionError(
            f"affine shape mismatch: weight {W.data.shape} vs input {x.data.shape}")
    if b.data.shape != (W.data.shape[0],):
        raise DimensionError(
            f"affine shape mismatch: weight {W.data.shape} vs bias {b.data.shape}")
    xd, Wd = x.data, W.data
    out = xd @ Wd.T + b.data

    def bwd(g):
        if xd.ndim == 1:
            return g @ Wd, np.outer(g, xd), g
        return g @ Wd, g.T @ xd, g.sum(axis=0)
    return _emit("affine", (x, W, b), out, bwd)


def linear(x: Tensor, W: Tensor) -> Tensor:
    """W @ x without bias (recurrent weight application)."""
    if W.data.shape[1] != x.data.shape[-1]:
        raise DimensionError(
            f"linear shape mismatch: weight {W.data.shape} vs input {x.data.shape}")
    xd, Wd = x.data, W.data

    def bwd(g):
        if xd.ndim == 1:
            return g @ Wd, np.outer(g, xd)
        return g @ Wd, g.T @ xd
    return _emit("linear", (x, W), xd @ Wd.T, bwd)


def tanh_op(x: Tensor) -> Tensor:
    out = np.tanh(x.data)

    def bwd(g):
        return (g * (1.0 - out * out),)
    return _emit("tanh", (x,), out, bwd)


def sigmoid_op(x: Tensor) -> Tensor:
    out = 1.0 / (1.0 + np.exp(-x.data))

    def bwd(g):
        return (g * out * (1.0 - out),)
    return _emit("sigmoid", (x,), out, bwd)


def relu_op(x: Tensor) -> Tensor:
    mask = x.data > 0

    def bwd(g):
        return (g * mask,)
    return _emit("relu", (x,), np.where(mask, x.data, 0.0), bwd)


def softmax_op(logits: Tensor) -> Tensor:
    """Row-wise softmax over the last axis, computed with max subtraction."""
    z = logits.data - logits.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=-1, keepdims=True)

    def bwd(g):
        dot = (g * out).sum(axis=-1, keepdims=True)
        return (out * (g - dot),)
    return _emit("softmax", (logits,), out, bwd)


def cross_entropy_op(p: Tensor, targets) -> Tensor:
    """-log p[target] per sample, with p clamped at LOG_CLAMP.

    `p` is [batch, classes] (or a single 1-D distribution) and `targets`
    an integer index per sample. Entries below the clamp contribute a
    flat loss with zero gradient, which keeps the graph finite when
    upstream noise pushes probabilities out of the simplex.
    """
    pd = p.data
    idx = np.asarray(targets, dtype=np.int64)
    classes = pd.shape[-1]
    if np.any(idx < 0) or np.any(idx >= classes):
        raise IndexError(f"target out of range for {classes} classes")
    if pd.ndim == 1:
        sel = pd[idx]
    else:
        rows = np.arange(pd.shape[0])
        sel = pd[rows, idx]
    clamped = np.maximum(sel, LOG_CLAMP)
    live = sel >= LOG_CLAMP

    def bwd(g):
        gp = np.zeros_like(pd)
        gsel = np.where(live, -np.asarray(g) / clamped, 0.0)
        if pd.ndim == 1:
            gp[idx] = gsel
        else:
            gp[rows, idx] = gsel
        return (gp,)
    return _emit("cross_entropy", (p,), -np.log(clamped), bwd)


def normalize_op(x: Tensor, eps: float = 1e-8) -> Tensor:
    """Standardize a 1-D batch by its own mean and population variance.

    Differentiable through the statistics: with xhat the output and
    istd = 1/sqrt(var + eps),
        dx = istd * (g - mean(g) - xhat * mean(g * xhat)).
    """
    if x.data.ndim != 1:
        raise DimensionError(f"normalize_op expects a 1-D batch, got shape {x.data.shape}")
    mu = x.data.mean()
    var = x.data.var()
    istd = 1.0 / np.sqrt(var + eps)
    out = (x.data - mu) * istd

    def bwd(g):
        return (istd * (g - g.mean() - out * (g * out).mean()),)
    return _emit("normalize", (x,), out, bwd)


def power_weights(v: Tensor, n: int) -> Tensor:
    """w = sqrt(n) * v / ||v||, so sum(w^2) == n identically."""
    norm = np.linalg.norm(v.data)
    if norm == 0.0:
        raise GraphError("power weight vector must be nonzero")
    root_n = np.sqrt(float(n))
    out = root_n * v.data / norm

    def bwd(g):
        vd = v.data
        return ((root_n / norm) * (g - vd * (vd @ g) / (norm * norm)),)
    return _emit("power_weights", (v,), out, bwd)


@dataclass
class GruParams:
    """One gated recurrent cell: update gate z, reset gate r, candidate h."""

    Wz: Tensor
    Uz: Tensor
    bz: Tensor
    Wr: Tensor
    Ur: Tensor
    br: Tensor
    Wh: Tensor
    Uh: Tensor
    bh: Tensor


def gru_cell(u: Tensor, h: Tensor, p: GruParams) -> Tensor:
    """h' = (1-z)*h + z*htilde with standard update/reset gating."""
    z = sigmoid_op(add(affine(u, p.Wz, p.bz), linear(h, p.Uz)))
    r = sigmoid_op(add(affine(u, p.Wr, p.br), linear(h, p.Ur)))
    htilde = tanh_op(add(affine(u, p.Wh, p.bh), linear(mul(r, h), p.Uh)))
    return add(mul(one_minus(z), h), mul(z, htilde))


# ---------------------------------------------------------------------------
# parameters
# ---------------------------------------------------------------------------

class ParameterStore:
    """Named trainable tensors with matching gradient slots."""

    def __init__(self):
        self._params: dict[str, Tensor] = {}

    def add(self, name: str, data) -> Tensor:
        if name in self._params:
            raise ValueError(f"duplicate parameter name: {name}")
        t = Tensor(data, requires_grad=True)
        if not np.all(np.isfinite(t.data)):
            raise ValueError(f"parameter {name} contains non-finite values")
        t.zero_grad()
        self._params[name] = t
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __len__(self) -> int:
        return len(self._params)

    def names(self) -> list[str]:
        return list(self._params)

    def items(self) -> Iterator[tuple[str, Tensor]]:
        return iter(self._params.items())

    def zero_grad(self) -> None:
        for t in self._params.values():
            t.zero_grad()

    def grad_norm(self) -> float:
        total = 0.0
        for t in self._params.values():
            if t.grad is not None:
                total += float(np.sum(t.grad * t.grad))
        return float(np.sqrt(total))

    def n_values(self) -> int:
        return sum(t.data.size for t in self._params.values())

    def value_dict(self) -> dict[str, np.ndarray]:
        return {k: t.data.copy() for k, t in self._params.items()}

    def load_values(self, values: dict[str, np.ndarray]) -> None:
        for name, t in self._params.items():
            if name not in values:
                raise KeyError(f"missing parameter: {name}")
            arr = np.asarray(values[name], dtype=np.float64)
            if arr.shape != t.data.shape:
                raise ValueError(
                    f"shape mismatch for {name}: expected {t.data.shape}, got {arr.shape}")
            t.data = arr.copy()


def uniform_init(rng: np.random.Generator, shape: tuple[int, ...], fan_in: int) -> np.ndarray:
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


def make_gru_params(store: ParameterStore, prefix: str, in_dim: int, hidden: int,
                    rng: np.random.Generator) -> GruParams:
    def w(tag, fan_in, shape):
        return store.add(f"{prefix}.{tag}", uniform_init(rng, shape, fan_in))

    def b(tag):
        return store.add(f"{prefix}.{tag}", np.zeros(hidden))

    return GruParams(
        Wz=w("Wz", in_dim, (hidden, in_dim)), Uz=w("Uz", hidden, (hidden, hidden)), bz=b("bz"),
        Wr=w("Wr", in_dim, (hidden, in_dim)), Ur=w("Ur", hidden, (hidden, hidden)), br=b("br"),
        Wh=w("Wh", in_dim, (hidden, in_dim)), Uh=w("Uh", hidden, (hidden, hidden)), bh=b("bh"),
    )


# ---------------------------------------------------------------------------
# finite-difference oracle
# ---------------------------------------------------------------------------

def finite_diff_check(f: Callable[[ParameterStore], Tensor], store: ParameterStore,
                      h: float = 1e-5) -> float:
    """Max relative error of backward() against central differences.

    `f` must rebuild its graph from the store on every call and return a
    scalar Tensor. The relative error per coordinate is
    |fd - grad| / max(1, |fd|, |grad|).
    """
    if h <= 0:
        raise ValueError("h must be positive")
    store.zero_grad()
    with Tape() as tape:
        loss = f(store)
    backward(tape, loss)
    worst = 0.0
    for _, t in store.items():
        flat = t.data.reshape(-1)
        gflat = t.grad.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            fp = float(f(store).data)
            flat[i] = orig - h
            fm = float(f(store).data)
            flat[i] = orig
            fd = (fp - fm) / (2.0 * h)
            err = abs(fd - gflat[i]) / max(1.0, abs(fd), abs(gflat[i]))
            if err > worst:
                worst = err
    return worst
