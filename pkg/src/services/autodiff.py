"""
Reverse-mode automatic differentiation over the operator model's op set.

A ``Tape`` records every operation applied to ``Var`` handles in execution
order, so the node list is already topologically sorted. ``backward`` walks
it in reverse and returns the gradient of a scalar loss for every parameter
registered with ``Tape.param``.

Only the operations the Fourier-DeepONet needs are supported: channel
lifting (``linear``), dense layers, GELU, truncated spectral convolution,
addition, the branch/trunk merge, padding, cropping, reshapes and the
reduction losses.

Complex parameters (the spectral weights) receive a complex gradient ``G``
in the convention ``dL = Re(sum(conj(G) * dR))``, i.e. ``G.real`` and
``G.imag`` are the partial derivatives w.r.t. the real and imaginary parts.

Example:
    ```python
    tape = Tape()
    x = tape.constant(x_array)
    W = tape.param("W", w_array)
    b = tape.param("b", b_array)
    loss = squared_norm(linear(x, W, b))
    grads = backward(tape, loss)
    ```
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from enum import Enum
from typing import Callable, Optional, Protocol

import numpy as np
from scipy.special import erf

from src.errors import ContractError, ShapeError
from src.services.tensor_core import fft3, ifft3, pad3, crop3

logger = logging.getLogger(__name__)

_SQRT_2 = np.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / np.sqrt(2.0 * np.pi)
LOSS_GUARD = 1e-12


class Op(str, Enum):
    """Operations a tape node can record."""

    PARAM = "param"
    CONST = "const"
    LINEAR = "linear"
    DENSE = "dense"
    GELU = "gelu"
    SPECTRAL_CONV = "spectral_conv"
    ADD = "add"
    MERGE = "merge"
    PAD = "pad"
    CROP = "crop"
    SQUEEZE = "squeeze"
    SUM = "sum"
    SQUARED_NORM = "squared_norm"
    L2_RELATIVE = "l2_relative"


@dataclass
class Node:
    """One recorded value with the information its backward rule needs."""

    value: np.ndarray
    op: Op
    parents: tuple[int, ...] = ()
    ctx: dict = field(default_factory=dict)
    name: Optional[str] = None


class Var:
    """Handle to a value, optionally bound to a node on a recording tape."""

    __slots__ = ("value", "tape", "index")

    def __init__(self, value: np.ndarray, tape: "Tape", index: int):
        self.value = value
        self.tape = tape
        self.index = index

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape


class Tape:
    """
    Append-only record of a forward computation.

    Args:
        record: When False, operations compute values only and nothing is
            kept; use for inference where no gradient is needed.

    Attributes:
        nodes: Recorded nodes in execution order.
        parameters: Parameter name to node index.
        peak_elements: Largest number of activation elements held by the
            tape at any time (parameters excluded; complex counts twice).
    """

    def __init__(self, record: bool = True):
        self.record = record
        self.nodes: list[Node] = []
        self.parameters: dict[str, int] = {}
        self.live_elements = 0
        self.peak_elements = 0

    def _push(self, node: Node) -> Var:
        if not self.record:
            return Var(node.value, self, -1)
        self.nodes.append(node)
        if node.op is not Op.PARAM:
            self.live_elements += _element_count(node.value)
            for cached in node.ctx.values():
                if isinstance(cached, np.ndarray):
                    self.live_elements += _element_count(cached)
            self.peak_elements = max(self.peak_elements, self.live_elements)
        return Var(node.value, self, len(self.nodes) - 1)

    def param(self, name: str, value: np.ndarray) -> Var:
        """Register a trainable leaf."""
        var = self._push(Node(value=value, op=Op.PARAM, name=name))
        if self.record:
            self.parameters[name] = var.index
        return var

    def constant(self, value: np.ndarray) -> Var:
        """Register a non-trainable leaf (inputs, targets)."""
        return self._push(Node(value=np.asarray(value), op=Op.CONST))

    def apply(self, value: np.ndarray, op: Op, parents: tuple[Var, ...], **ctx) -> Var:
        for p in parents:
            if p.tape is not self:
                raise ContractError(f"{op.value}: operand recorded on a different tape")
        return self._push(Node(value=value, op=op, parents=tuple(p.index for p in parents), ctx=ctx))


def _element_count(a: np.ndarray) -> int:
    return int(a.size) * (2 if np.iscomplexobj(a) else 1)


class _HasLayerVars(Protocol):
    R: Var
    W: Var
    b: Var


# ---------------------------------------------------------------------------
# forward operations
# ---------------------------------------------------------------------------


def _channel_first(a: np.ndarray) -> np.ndarray:
    """Flatten ``(..., C, x, y, z)`` into ``(C, rest)``."""
    return np.moveaxis(a, -4, 0).reshape(a.shape[-4], -1)


def linear(x: Var, W: Var, b: Optional[Var] = None) -> Var:
    """
    Pointwise channel map over ``(..., C_in, x, y, z)``.

    ``out[..., o, s] = sum_c x[..., c, s] * W[c, o] + b[o]`` at every spatial
    site ``s``; ``W`` is oriented ``(C_in, C_out)``.

    Raises:
        ShapeError: If the channel extent of ``x`` differs from ``W.shape[0]``.
    """
    xv, wv = x.value, W.value
    if xv.ndim < 4 or wv.ndim != 2 or xv.shape[-4] != wv.shape[0]:
        raise ShapeError(f"linear: cannot map channels of {xv.shape} with weights {wv.shape}")
    out = np.moveaxis(np.tensordot(xv, wv, axes=([-4], [0])), -1, -4)
    parents: tuple[Var, ...] = (x, W)
    if b is not None:
        if b.value.shape != (wv.shape[1],):
            raise ShapeError(f"linear: bias shape {b.value.shape} != ({wv.shape[1]},)")
        out = out + b.value[:, None, None, None]
        parents = (x, W, b)
    return x.tape.apply(np.ascontiguousarray(out), Op.LINEAR, parents)


def lift_channels(x: Var, W: Var, b: Var) -> Var:
    """Channel-lifting affine map (the branch net's ``Linear``)."""
    return linear(x, W, b)


def dense(x: Var, W: Var, b: Var) -> Var:
    """Affine map on the last axis: ``x @ W + b``."""
    if x.value.shape[-1] != W.value.shape[0]:
        raise ShapeError(f"dense: input width {x.value.shape[-1]} != weight rows {W.value.shape[0]}")
    out = x.value @ W.value + b.value
    return x.tape.apply(out, Op.DENSE, (x, W, b))


def gelu(x: Var) -> Var:
    """Exact GELU, ``x * Phi(x)`` with the erf form of the normal CDF."""
    out = 0.5 * x.value * (1.0 + erf(x.value / _SQRT_2))
    return x.tape.apply(out, Op.GELU, (x,))


def spectral_conv(z: Var, R: Var, modes: tuple[int, int, int]) -> Var:
    """
    Truncated spectral convolution ``F^-1(R . F(z))``.

    The retained block is the first ``modes`` bins of every spatial axis
    (non-negative frequencies). ``R[k, c, o]`` mixes channels per retained
    bin; all other bins are zeroed. Taking the real part of the inverse
    transform applies ``conj(R)`` to the conjugate partner bins, so the
    output is exactly real.

    Raises:
        ShapeError: If a mode count exceeds its spatial extent or ``R`` does
            not have shape ``(m1, m2, m3, C, C_out)``.
    """
    zv, rv = z.value, R.value
    m1, m2, m3 = modes
    if zv.ndim < 4:
        raise ShapeError(f"spectral_conv: expected (..., C, x, y, z), got {zv.shape}")
    if any(m < 1 or m > n for m, n in zip(modes, zv.shape[-3:])):
        raise ShapeError(f"spectral_conv: modes {modes} do not fit grid {zv.shape[-3:]}")
    if rv.shape[:4] != (m1, m2, m3, zv.shape[-4]) or rv.ndim != 5:
        raise ShapeError(f"spectral_conv: weights {rv.shape} do not match modes {modes} and width {zv.shape[-4]}")
    zk = fft3(zv)[..., :m1, :m2, :m3]
    yk = np.einsum("...cxyz,xyzco->...oxyz", zk, rv)
    spectrum = np.zeros(zv.shape[:-4] + (rv.shape[4],) + zv.shape[-3:], dtype=np.complex128)
    spectrum[..., :m1, :m2, :m3] = yk
    out = ifft3(spectrum)
    return z.tape.apply(out, Op.SPECTRAL_CONV, (z, R), zk=zk, modes=modes)


def add(a: Var, b: Var) -> Var:
    if a.value.shape != b.value.shape:
        raise ShapeError(f"add: shapes {a.value.shape} and {b.value.shape} differ")
    return a.tape.apply(a.value + b.value, Op.ADD, (a, b))


def merge(b: Var, c: Var) -> Var:
    """
    Branch/trunk merge ``z0[t, ch, s] = b[ch, s] * c[t, ch]``.

    ``b`` may also be time-resolved, ``(T, width, x, y, z)``, in which case
    ``z0[t, ch, s] = b[t, ch, s] * c[t, ch]``.
    """
    bv, cv = b.value, c.value
    if cv.ndim != 2 or bv.shape[-4] != cv.shape[1]:
        raise ShapeError(f"merge: branch {bv.shape} and trunk {cv.shape} widths differ")
    if bv.ndim == 5 and bv.shape[0] != cv.shape[0]:
        raise ShapeError(f"merge: time-resolved branch has {bv.shape[0]} times, trunk {cv.shape[0]}")
    out = bv * cv[:, :, None, None, None]
    return b.tape.apply(out, Op.MERGE, (b, c))


def pad(x: Var, p: int) -> Var:
    return x.tape.apply(pad3(x.value, p), Op.PAD, (x,), p=p)


def crop(x: Var, p: int) -> Var:
    return x.tape.apply(crop3(x.value, p), Op.CROP, (x,), p=p)


def squeeze_channel(x: Var) -> Var:
    """``(..., 1, x, y, z) -> (..., x, y, z)``."""
    if x.value.shape[-4] != 1:
        raise ShapeError(f"squeeze_channel: channel extent is {x.value.shape[-4]}, not 1")
    return x.tape.apply(x.value.reshape(x.value.shape[:-4] + x.value.shape[-3:]), Op.SQUEEZE, (x,))


def total(x: Var) -> Var:
    return x.tape.apply(np.asarray(x.value.sum()), Op.SUM, (x,))


def squared_norm(x: Var) -> Var:
    return x.tape.apply(np.asarray(np.sum(x.value * x.value)), Op.SQUARED_NORM, (x,))


def l2_relative(pred: Var, truth: np.ndarray) -> Var:
    """``||pred - truth|| / (||truth|| + 1e-12)`` as a scalar node."""
    if pred.value.shape != truth.shape:
        raise ShapeError(f"l2_relative: prediction {pred.value.shape} vs truth {truth.shape}")
    residual = pred.value - truth
    num = float(np.sqrt(np.sum(residual * residual)))
    den = float(np.sqrt(np.sum(truth * truth))) + LOSS_GUARD
    return pred.tape.apply(np.asarray(num / den), Op.L2_RELATIVE, (pred,), residual=residual, num=num, den=den)


def fourier_layer(z: Var, params: _HasLayerVars) -> Var:
    """
    One Fourier layer: ``gelu(spectral_conv(z, R) + W z + b)``.

    ``params`` carries ``R`` (complex, ``(m1, m2, m3, width, width)``), the
    pointwise residual weights ``W`` (``(width, width)``) and the bias ``b``.
    """
    width = z.value.shape[-4]
    if params.W.value.shape != (width, width):
        raise ShapeError(f"fourier_layer: residual weights {params.W.value.shape} for width {width}")
    modes = tuple(params.R.value.shape[:3])
    return gelu(add(spectral_conv(z, params.R, modes), linear(z, params.W, params.b)))


# ---------------------------------------------------------------------------
# backward rules: (node, parent values, upstream gradient) -> parent gradients
# ---------------------------------------------------------------------------


def _bw_linear(node: Node, parents: list[np.ndarray], g: np.ndarray) -> list[np.ndarray]:
    xv, wv = parents[0], parents[1]
    gx = np.moveaxis(np.tensordot(g, wv, axes=([-4], [1])), -1, -4)
    gflat = _channel_first(g)
    grads = [gx, _channel_first(xv) @ gflat.T]
    if len(parents) == 3:
        grads.append(gflat.sum(axis=1))
    return grads


def _bw_dense(node: Node, parents: list[np.ndarray], g: np.ndarray) -> list[np.ndarray]:
    xv, wv, _ = parents
    g2 = g.reshape(-1, g.shape[-1])
    return [g @ wv.T, xv.reshape(-1, xv.shape[-1]).T @ g2, g2.sum(axis=0)]


def _bw_gelu(node: Node, parents: list[np.ndarray], g: np.ndarray) -> list[np.ndarray]:
    x = parents[0]
    cdf = 0.5 * (1.0 + erf(x / _SQRT_2))
    pdf = _INV_SQRT_2PI * np.exp(-0.5 * x * x)
    return [g * (cdf + x * pdf)]


def _bw_spectral_conv(node: Node, parents: list[np.ndarray], g: np.ndarray) -> list[np.ndarray]:
    zv, rv = parents
    zk = node.ctx["zk"]
    m1, m2, m3 = node.ctx["modes"]
    n = int(np.prod(g.shape[-3:]))
    # adjoint of Re(ifft3): G_Y = fft3(g) / N
    gyk = fft3(g)[..., :m1, :m2, :m3] / n
    gzk = np.einsum("...oxyz,xyzco->...cxyz", gyk, np.conj(rv))
    # batch axes are summed
    zk_b = zk.reshape((-1,) + zk.shape[-4:])
    gyk_b = gyk.reshape((-1,) + gyk.shape[-4:])
    gr = np.einsum("bcxyz,boxyz->xyzco", np.conj(zk_b), gyk_b)
    gspec = np.zeros(zv.shape, dtype=np.complex128)
    gspec[..., :m1, :m2, :m3] = gzk
    # adjoint of fft3 restricted to real input: Re(N * ifft3(G))
    gz = n * ifft3(gspec)
    return [gz, gr]


def _bw_add(node: Node, parents: list[np.ndarray], g: np.ndarray) -> list[np.ndarray]:
    return [g, g]


def _bw_merge(node: Node, parents: list[np.ndarray], g: np.ndarray) -> list[np.ndarray]:
    bv, cv = parents
    gb = g * cv[:, :, None, None, None]
    if bv.ndim == 4:
        gb = gb.sum(axis=0)
        gc = np.einsum("tcxyz,cxyz->tc", g, bv)
    else:
        gc = np.einsum("tcxyz,tcxyz->tc", g, bv)
    return [gb, gc]


def _bw_pad(node: Node, parents: list[np.ndarray], g: np.ndarray) -> list[np.ndarray]:
    return [crop3(g, node.ctx["p"])]


def _bw_crop(node: Node, parents: list[np.ndarray], g: np.ndarray) -> list[np.ndarray]:
    return [pad3(g, node.ctx["p"])]


def _bw_squeeze(node: Node, parents: list[np.ndarray], g: np.ndarray) -> list[np.ndarray]:
    return [g.reshape(parents[0].shape)]


def _bw_sum(node: Node, parents: list[np.ndarray], g: np.ndarray) -> list[np.ndarray]:
    return [np.full(parents[0].shape, float(g))]


def _bw_squared_norm(node: Node, parents: list[np.ndarray], g: np.ndarray) -> list[np.ndarray]:
    return [2.0 * float(g) * parents[0]]


def _bw_l2_relative(node: Node, parents: list[np.ndarray], g: np.ndarray) -> list[np.ndarray]:
    num, den = node.ctx["num"], node.ctx["den"]
    if num == 0.0:
        return [np.zeros(parents[0].shape)]
    return [float(g) * node.ctx["residual"] / (num * den)]


_BACKWARD: dict[Op, Callable[[Node, list[np.ndarray], np.ndarray], list[np.ndarray]]] = {
    Op.LINEAR: _bw_linear,
    Op.DENSE: _bw_dense,
    Op.GELU: _bw_gelu,
    Op.SPECTRAL_CONV: _bw_spectral_conv,
    Op.ADD: _bw_add,
    Op.MERGE: _bw_merge,
    Op.PAD: _bw_pad,
    Op.CROP: _bw_crop,
    Op.SQUEEZE: _bw_squeeze,
    Op.SUM: _bw_sum,
    Op.SQUARED_NORM: _bw_squared_norm,
    Op.L2_RELATIVE: _bw_l2_relative,
}


def backward(tape: Tape, loss: Var) -> dict[str, np.ndarray]:
    """
    Reverse sweep from a scalar loss.

    Args:
        tape: The recording tape the loss was computed on.
        loss: Scalar node.

    Returns:
        Gradient for every registered parameter, same shape and dtype as the
        parameter (zeros for parameters the loss does not depend on).

    Raises:
        ContractError: If the tape is not recording, the loss belongs to a
            different tape, or the loss is not a scalar.
    """
    if not tape.record or loss.tape is not tape or loss.index < 0:
        raise ContractError("backward needs a loss recorded on this tape")
    if loss.value.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.value.shape}")

    grads: list[Optional[np.ndarray]] = [None] * len(tape.nodes)
    grads[loss.index] = np.ones_like(loss.value, dtype=np.float64)
    for i in range(loss.index, -1, -1):
        node = tape.nodes[i]
        g = grads[i]
        if g is None or node.op in (Op.PARAM, Op.CONST):
            continue
        parent_values = [tape.nodes[p].value for p in node.parents]
        for p, gp in zip(node.parents, _BACKWARD[node.op](node, parent_values, g)):
            grads[p] = gp if grads[p] is None else grads[p] + gp
        if i != loss.index:
            grads[i] = None

    result = {}
    for name, idx in tape.parameters.items():
        value = tape.nodes[idx].value
        g = grads[idx]
        result[name] = np.zeros_like(value) if g is None else g.astype(value.dtype, copy=False)
    return result
