"""
Fourier-DeepONet operator model.

The branch net lifts the padded input fields to ``width`` channels, the trunk
net maps each (normalized) time to a ``width`` vector, and the two are merged
by pointwise multiplication. Four Fourier layers follow, the padding is
removed, and a two-layer pointwise projection produces one value per cell
and time.

Shapes through ``forward`` for branch input ``(C_in, nx, ny, nz)`` and ``T``
times (``p`` is the padding, ``w`` the width)::

    pad      (C_in, nx+2p, ny+2p, nz+2p)
    lift     (w, nx+2p, ny+2p, nz+2p)
    trunk    (T, w)
    merge    (T, w, nx+2p, ny+2p, nz+2p)
    layers   (T, w, nx+2p, ny+2p, nz+2p)
    crop     (T, w, nx, ny, nz)
    project  (T, nx, ny, nz)

Levels fed with a previous-level field that varies over time pass a
time-resolved branch input ``(T, C_in, nx, ny, nz)``; the lift is then
applied per time.

Example:
    ```python
    from src.models import ArchSpec
    from src.services.operator_model import build, forward

    model = build(ArchSpec.toy(), seed=7)
    out = forward(model, branch_in, times)   # (T, 8, 8, 5)
    ```
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Iterator, Optional, Union

import numpy as np
from pydantic import ValidationError

from src.errors import ConfigurationError, ContractError, ShapeError
from src.models import ArchSpec
from src.services import autodiff as ad
from src.services.autodiff import Tape, Var
from src.services.tensor_core import ensure_finite, pad3

logger = logging.getLogger(__name__)


@dataclass
class FourierLayerParams:
    """Spectral weights ``R``, pointwise residual ``W`` and bias ``b`` of one layer."""

    R: np.ndarray
    W: np.ndarray
    b: np.ndarray


@dataclass
class _LayerVars:
    R: Var
    W: Var
    b: Var


@dataclass
class FourierDeepONet:
    """
    Parameters of one level's operator network.

    Attributes:
        arch: Architecture the parameters were built for.
        lift_W, lift_b: Branch channel lift ``(C_in, width)``, ``(width,)``.
        trunk_W, trunk_b: Trunk affine map ``(trunk_in, width)``, ``(width,)``.
        layers: One ``FourierLayerParams`` per Fourier layer.
        proj_W1, proj_b1: Projection ``width -> hidden``.
        proj_W2, proj_b2: Projection ``hidden -> 1``.
    """

    arch: ArchSpec
    lift_W: np.ndarray
    lift_b: np.ndarray
    trunk_W: np.ndarray
    trunk_b: np.ndarray
    layers: list[FourierLayerParams] = field(default_factory=list)
    proj_W1: np.ndarray = None  # type: ignore[assignment]
    proj_b1: np.ndarray = None  # type: ignore[assignment]
    proj_W2: np.ndarray = None  # type: ignore[assignment]
    proj_b2: np.ndarray = None  # type: ignore[assignment]

    def named_parameters(self) -> Iterator[tuple[str, np.ndarray]]:
        """Parameters in declaration order (the checkpoint order)."""
        yield "lift.W", self.lift_W
        yield "lift.b", self.lift_b
        yield "trunk.W", self.trunk_W
        yield "trunk.b", self.trunk_b
        for i, layer in enumerate(self.layers):
            yield f"layers.{i}.R", layer.R
            yield f"layers.{i}.W", layer.W
            yield f"layers.{i}.b", layer.b
        yield "proj.W1", self.proj_W1
        yield "proj.b1", self.proj_b1
        yield "proj.W2", self.proj_W2
        yield "proj.b2", self.proj_b2

    def parameter_names(self) -> list[str]:
        return [name for name, _ in self.named_parameters()]

    def get_parameter(self, name: str) -> np.ndarray:
        for n, value in self.named_parameters():
            if n == name:
                return value
        raise ContractError(f"unknown parameter '{name}'")

    def set_parameter(self, name: str, value: np.ndarray) -> None:
        """Replace one parameter tensor; shape and dtype must not change."""
        current = self.get_parameter(name)
        if value.shape != current.shape or value.dtype != current.dtype:
            raise ShapeError(
                f"parameter '{name}': expected {current.shape}/{current.dtype}, got {value.shape}/{value.dtype}"
            )
        if name.startswith("layers."):
            _, idx, attr = name.split(".")
            setattr(self.layers[int(idx)], attr, value)
        else:
            attr = {"lift.W": "lift_W", "lift.b": "lift_b", "trunk.W": "trunk_W", "trunk.b": "trunk_b",
                    "proj.W1": "proj_W1", "proj.b1": "proj_b1", "proj.W2": "proj_W2", "proj.b2": "proj_b2"}[name]
            setattr(self, attr, value)

    def copy(self) -> "FourierDeepONet":
        clone = build_empty(self.arch)
        for name, value in self.named_parameters():
            clone.set_parameter(name, value.copy())
        return clone

    def predict(self, branch_in: np.ndarray, times: np.ndarray) -> np.ndarray:
        return forward(self, branch_in, times)


def _glorot(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=(fan_in, fan_out))


def _complex_gaussian(rng: np.random.Generator, shape: tuple[int, ...], std: float) -> np.ndarray:
    # total variance std**2 split evenly between real and imaginary parts
    scale = std / np.sqrt(2.0)
    return rng.normal(0.0, scale, size=shape) + 1j * rng.normal(0.0, scale, size=shape)


def _validate_arch(arch: Union[ArchSpec, dict]) -> ArchSpec:
    if isinstance(arch, ArchSpec):
        return arch
    try:
        return ArchSpec.model_validate(arch)
    except ValidationError as e:
        raise ConfigurationError(f"invalid architecture: {e}") from e


def build_empty(arch: ArchSpec) -> FourierDeepONet:
    """Zero-initialized model with the shapes of ``arch``."""
    arch = _validate_arch(arch)
    w, h = arch.width, arch.projection_hidden
    return FourierDeepONet(
        arch=arch,
        lift_W=np.zeros((arch.in_channels, w)),
        lift_b=np.zeros(w),
        trunk_W=np.zeros((arch.trunk_in, w)),
        trunk_b=np.zeros(w),
        layers=[
            FourierLayerParams(
                R=np.zeros(tuple(arch.modes) + (w, w), dtype=np.complex128),
                W=np.zeros((w, w)),
                b=np.zeros(w),
            )
            for _ in range(arch.n_fourier_layers)
        ],
        proj_W1=np.zeros((w, h)),
        proj_b1=np.zeros(h),
        proj_W2=np.zeros((h, 1)),
        proj_b2=np.zeros(1),
    )


def build(arch: Union[ArchSpec, dict], seed: int) -> FourierDeepONet:
    """
    Build and initialize a model.

    Dense weights are Glorot-uniform, biases zero, spectral weights complex
    Gaussian with standard deviation ``1 / width**2``. All draws come from
    one ``numpy`` generator seeded with ``seed`` in declaration order, so the
    same seed yields bitwise-identical parameters.

    Raises:
        ConfigurationError: If ``arch`` does not validate.
    """
    arch = _validate_arch(arch)
    rng = np.random.default_rng(seed)
    model = build_empty(arch)
    w = arch.width
    model.lift_W = _glorot(rng, arch.in_channels, w)
    model.trunk_W = _glorot(rng, arch.trunk_in, w)
    for layer in model.layers:
        layer.R = _complex_gaussian(rng, tuple(arch.modes) + (w, w), 1.0 / w**2)
        layer.W = _glorot(rng, w, w)
    model.proj_W1 = _glorot(rng, w, arch.projection_hidden)
    model.proj_W2 = _glorot(rng, arch.projection_hidden, 1)
    logger.debug(f"Built operator model grid={arch.grid} width={w} params={count_params(model)}")
    return model


def count_params(model: FourierDeepONet) -> int:
    """Scalar parameter count; complex entries count twice."""
    return sum(v.size * (2 if np.iscomplexobj(v) else 1) for _, v in model.named_parameters())


def merge(b: np.ndarray, c: np.ndarray) -> np.ndarray:
    """
    Pointwise branch/trunk merge ``z0[t, ch, s] = b[ch, s] * c[t, ch]``.

    Raises:
        ShapeError: If the channel widths differ.
    """
    tape = Tape(record=False)
    return ad.merge(tape.constant(b), tape.constant(c)).value


def _check_inputs(model: FourierDeepONet, branch_in: np.ndarray, times: np.ndarray) -> None:
    arch = model.arch
    if branch_in.ndim not in (4, 5) or tuple(branch_in.shape[-3:]) != tuple(arch.grid) \
            or branch_in.shape[-4] != arch.in_channels:
        raise ShapeError(
            f"branch input {branch_in.shape} does not match (C_in={arch.in_channels}, grid={arch.grid})"
        )
    if times.ndim != 1 or times.size == 0:
        raise ShapeError(f"times must be a nonempty vector, got shape {times.shape}")
    if branch_in.ndim == 5 and branch_in.shape[0] != times.size:
        raise ShapeError(f"time-resolved branch has {branch_in.shape[0]} times, got {times.size} times")
    ensure_finite(branch_in, "branch input")
    ensure_finite(times, "times")
    if np.any(times < 0.0) or np.any(times > 1.0):
        raise ContractError("normalized times must lie in [0, 1]")


def register_parameters(model: FourierDeepONet, tape: Tape) -> dict[str, Var]:
    return {name: tape.param(name, value) for name, value in model.named_parameters()}


def forward_on_tape(model: FourierDeepONet, tape: Tape, branch_in: np.ndarray, times: np.ndarray,
                    params: Optional[dict[str, Var]] = None) -> Var:
    """
    Record one forward pass on ``tape``.

    Args:
        model: The network.
        tape: Recording (training) or non-recording (inference) tape.
        branch_in: ``(C_in, nx, ny, nz)`` or time-resolved ``(T, C_in, nx, ny, nz)``.
        times: Normalized times ``(T,)`` in ``[0, 1]``.
        params: Parameter handles already registered on ``tape``.

    Returns:
        Output node of shape ``(T, nx, ny, nz)``.
    """
    branch_in = np.asarray(branch_in, dtype=np.float64)
    times = np.asarray(times, dtype=np.float64)
    _check_inputs(model, branch_in, times)
    p = params if params is not None else register_parameters(model, tape)
    arch = model.arch

    x = tape.constant(pad3(branch_in, arch.padding))
    b = ad.linear(x, p["lift.W"], p["lift.b"])
    c = ad.dense(tape.constant(times[:, None]), p["trunk.W"], p["trunk.b"])
    z = ad.merge(b, c)
    for i in range(arch.n_fourier_layers):
        z = ad.fourier_layer(z, _LayerVars(R=p[f"layers.{i}.R"], W=p[f"layers.{i}.W"], b=p[f"layers.{i}.b"]))
    z = ad.crop(z, arch.padding)
    h = ad.gelu(ad.linear(z, p["proj.W1"], p["proj.b1"]))
    return ad.squeeze_channel(ad.linear(h, p["proj.W2"], p["proj.b2"]))


def forward(model: FourierDeepONet, branch_in: np.ndarray, times: np.ndarray,
            time_batch: Optional[int] = None) -> np.ndarray:
    """
    Inference forward pass, optionally in time batches.

    Each time is processed independently of the others, so splitting
    ``times`` into batches gives the same output as one pass.

    Raises:
        ShapeError: If the input extents do not match ``model.arch``.
        ContractError: If the input holds non-finite values or times fall
            outside ``[0, 1]``.
    """
    times = np.asarray(times, dtype=np.float64)
    branch_in = np.asarray(branch_in, dtype=np.float64)
    if time_batch is None or time_batch >= times.size:
        out = forward_on_tape(model, Tape(record=False), branch_in, times).value
    else:
        chunks = []
        for start in range(0, times.size, time_batch):
            sl = slice(start, start + time_batch)
            chunk_in = branch_in[sl] if branch_in.ndim == 5 else branch_in
            chunks.append(forward_on_tape(model, Tape(record=False), chunk_in, times[sl]).value)
        out = np.concatenate(chunks, axis=0)
    ensure_finite(out, "model output")
    return out


def describe_shapes(arch: ArchSpec, n_times: int, batch: int = 1) -> list[tuple[str, tuple[int, ...]]]:
    """
    Output shape of every stage in architecture-table layout.

    Spatial tensors are reported channel-last with the batch ``C`` (and the
    time axis ``C x T`` after the merge) in front, e.g. the global branch
    output ``(C, 116, 116, 21, 32)``.
    """
    padded = tuple(arch.padded_grid)
    grid = tuple(arch.grid)
    w, h, ct = arch.width, arch.projection_hidden, batch * n_times
    rows: list[tuple[str, tuple[int, ...]]] = [
        ("input", (batch,) + grid + (arch.in_channels,)),
        ("padding", (batch,) + padded + (arch.in_channels,)),
        ("branch", (batch,) + padded + (w,)),
        ("trunk", (n_times, w)),
        ("merge", (ct,) + padded + (w,)),
    ]
    rows += [(f"fourier_layer_{i + 1}", (ct,) + padded + (w,)) for i in range(arch.n_fourier_layers)]
    rows += [
        ("crop", (ct,) + grid + (w,)),
        ("projection_hidden", (ct,) + grid + (h,)),
        ("projection", (ct,) + grid + (1,)),
        ("reshape", (batch, n_times) + grid),
    ]
    return rows
