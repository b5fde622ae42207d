"""Stacked cell layers with an affine output head, BPTT, counting, and I/O.

A network is ``depth`` identical-size layers followed by one affine map to
``n_out`` logits (softmax lives in the loss, not here).  Layer 1 consumes
the feature frame; every deeper layer consumes the full n_y-wide output of
the layer below.  All layers share one CellDims; only the derived input
size differs per layer.
"""

import os
import struct
import tempfile
from dataclasses import dataclass, fields

import numpy as np

from .cells import (
    CellDims,
    CellState,
    GateStyle,
    LayerParams,
    ResidualVariant,
    StepTrace,
    cell_step,
    cell_step_backward,
    layer_param_shapes,
    zero_state,
)
from .errors import (
    ContractError,
    DimensionError,
    FormatError,
    NumericError,
    VersionError,
)

__all__ = [
    "NetworkConfig",
    "NetworkParams",
    "ForwardTrace",
    "init_params",
    "zero_params",
    "map_params",
    "param_arrays",
    "params_to_vector",
    "vector_to_params",
    "forward",
    "backward",
    "count_params",
    "save_model",
    "load_model",
]

_LAYER_FIELDS = [f.name for f in fields(LayerParams)]

_STYLE_CODES = {GateStyle.STANDARD: 0, GateStyle.FAST: 1}
_VARIANT_CODES = {
    ResidualVariant.NONE: 0,
    ResidualVariant.RES1: 1,
    ResidualVariant.RES2: 2,
    ResidualVariant.RES3: 3,
}
_MODEL_MAGIC = b"RLM1"
_MODEL_VERSION = 1


@dataclass(frozen=True)
class NetworkConfig:
    """Everything that determines the parameter shapes of a network."""

    depth: int
    dims: CellDims
    style: GateStyle
    variant: ResidualVariant
    n_out: int

    def __post_init__(self):
        if self.depth < 1:
            raise DimensionError(f"depth must be >= 1, got {self.depth}")
        if self.n_out < 2:
            raise DimensionError(f"n_out must be >= 2, got {self.n_out}")

    def layer_dims(self, layer: int) -> CellDims:
        """CellDims of one layer; deeper layers read the n_y-wide output below."""
        if layer == 0:
            return self.dims
        return self.dims.with_input(self.dims.n_y)


@dataclass
class NetworkParams:
    layers: list[LayerParams]
    w_out: np.ndarray
    b_out: np.ndarray


@dataclass
class ForwardTrace:
    """Per-step, per-layer traces plus the logits of one forward pass."""

    steps: list[list[StepTrace]]  # indexed [t][layer]
    logits: np.ndarray  # T x n_out


def param_arrays(params: NetworkParams) -> list[np.ndarray]:
    """All parameter arrays in declaration order (layers, then the head)."""
    out = []
    for lp in params.layers:
        for name in _LAYER_FIELDS:
            arr = getattr(lp, name)
            if arr is not None:
                out.append(arr)
    out.append(params.w_out)
    out.append(params.b_out)
    return out


def _build_params(config: NetworkConfig, make) -> NetworkParams:
    """Construct a NetworkParams by calling make(shape, fan_in) per array."""
    layers = []
    for layer in range(config.depth):
        shapes = layer_param_shapes(config.layer_dims(layer), config.style, config.variant)
        layers.append(
            LayerParams(
                **{
                    name: (None if shape is None else make(shape))
                    for name, shape in shapes.items()
                }
            )
        )
    n_y = config.dims.n_y
    return NetworkParams(
        layers=layers,
        w_out=make((config.n_out, n_y)),
        b_out=make((config.n_out,)),
    )


def zero_params(config: NetworkConfig) -> NetworkParams:
    return _build_params(config, np.zeros)


def map_params(fn, first: NetworkParams, *rest: NetworkParams) -> NetworkParams:
    """Apply fn elementwise across aligned parameter containers."""
    layers = []
    for idx, lp in enumerate(first.layers):
        kwargs = {}
        for name in _LAYER_FIELDS:
            arr = getattr(lp, name)
            if arr is None:
                kwargs[name] = None
            else:
                kwargs[name] = fn(arr, *(getattr(r.layers[idx], name) for r in rest))
        layers.append(LayerParams(**kwargs))
    return NetworkParams(
        layers=layers,
        w_out=fn(first.w_out, *(r.w_out for r in rest)),
        b_out=fn(first.b_out, *(r.b_out for r in rest)),
    )


def params_to_vector(params: NetworkParams) -> np.ndarray:
    return np.concatenate([a.ravel() for a in param_arrays(params)])


def vector_to_params(vec: np.ndarray, config: NetworkConfig) -> NetworkParams:
    pos = 0

    def take(shape):
        nonlocal pos
        n = int(np.prod(shape))
        out = vec[pos : pos + n].reshape(shape).copy()
        pos += n
        return out

    built = _build_params(config, take)
    if pos != vec.shape[0]:
        raise DimensionError(
            f"vector has {vec.shape[0]} elements, config needs {pos}"
        )
    return built


def init_params(config: NetworkConfig, seed: int) -> NetworkParams:
    """Seeded initialization: matrices i.i.d. uniform on [-s, s] with
    s = 1/sqrt(fan_in); biases and peepholes start at zero."""
    rng = np.random.default_rng(seed)

    def make(shape):
        if len(shape) == 1:
            return np.zeros(shape)
        s = 1.0 / np.sqrt(shape[1])
        return rng.uniform(-s, s, size=shape)

    return _build_params(config, make)


def count_params(config: NetworkConfig) -> int:
    """Closed-form trainable-parameter count; matches the allocated arrays."""
    d = config.dims
    n_c, n_r, n_y = d.n_c, d.n_r, d.n_y
    total = 0
    for layer in range(config.depth):
        x_in = d.n_x if layer == 0 else n_y
        total += 4 * n_c * (x_in + n_r) + 4 * n_c
        if config.style is GateStyle.STANDARD:
            total += 3 * n_c
        if config.variant is ResidualVariant.NONE:
            total += n_y * n_c
        elif config.variant is ResidualVariant.RES1:
            total += n_y * n_c + n_c * (n_c + x_in)
        elif config.variant is ResidualVariant.RES2:
            total += n_y * (n_c + x_in)
        else:
            total += n_y * n_c + n_y * (n_y + x_in)
    total += config.n_out * n_y + config.n_out
    return total


def forward(
    params: NetworkParams,
    config: NetworkConfig,
    frames: np.ndarray,
    cell_clip: float | None = None,
) -> tuple[np.ndarray, ForwardTrace]:
    """Unroll the stack over a T x n_x frame matrix from zero initial state.

    Returns T x n_out logits and the full trace needed by backward().
    """
    frames = np.atleast_2d(np.asarray(frames, dtype=np.float64))
    T = frames.shape[0]
    if frames.shape[1] != config.dims.n_x:
        raise DimensionError(
            f"frames have dim {frames.shape[1]}, network expects {config.dims.n_x}"
        )
    if len(params.layers) != config.depth:
        raise DimensionError(
            f"params have {len(params.layers)} layers, config says {config.depth}"
        )

    states = [zero_state(config.layer_dims(l)) for l in range(config.depth)]
    steps: list[list[StepTrace]] = []
    logits = np.empty((T, config.n_out))
    for t in range(T):
        x = frames[t]
        row = []
        for l in range(config.depth):
            try:
                x, states[l], tr = cell_step(
                    config.layer_dims(l),
                    config.style,
                    config.variant,
                    params.layers[l],
                    x,
                    states[l],
                    cell_clip=cell_clip,
                )
            except NumericError as e:
                raise NumericError(f"time step {t}, layer {l}: {e}") from e
            row.append(tr)
        steps.append(row)
        logits[t] = params.w_out @ x + params.b_out
    return logits, ForwardTrace(steps=steps, logits=logits)


def _prev_recurrence(trace_row: StepTrace, variant: ResidualVariant, n_r: int):
    if variant is ResidualVariant.RES3:
        return trace_row.z[:n_r]
    return trace_row.y[:n_r]


def backward(
    params: NetworkParams,
    config: NetworkConfig,
    trace: ForwardTrace,
    d_logits: np.ndarray,
) -> NetworkParams:
    """Exact reverse accumulation through the head and the unrolled stack.

    d_logits is the T x n_out cotangent on the logits.  The gradient of the
    shared all-zero initial state is discarded.  Returns gradients shaped
    like the parameters.
    """
    T = len(trace.steps)
    d_logits = np.asarray(d_logits, dtype=np.float64)
    if d_logits.shape != (T, config.n_out):
        raise ContractError(
            f"d_logits has shape {d_logits.shape}, trace implies ({T}, {config.n_out})"
        )
    if any(len(row) != config.depth for row in trace.steps):
        raise ContractError("trace layer count does not match config depth")

    grads = zero_params(config)

    # output head, and the cotangent each top-layer output receives from it
    d_y_upper = np.empty((T, config.dims.n_y))
    for t in range(T):
        y_top = trace.steps[t][-1].y
        grads.w_out += np.outer(d_logits[t], y_top)
        grads.b_out += d_logits[t]
        d_y_upper[t] = params.w_out.T @ d_logits[t]

    # layers top to bottom; each layer's d_x sequence feeds the layer below
    for l in range(config.depth - 1, -1, -1):
        dims = config.layer_dims(l)
        d_x_seq = np.empty((T, dims.n_x))
        d_c_next = np.zeros(dims.n_c)
        d_r_next = np.zeros(dims.n_r)
        for t in range(T - 1, -1, -1):
            if t > 0:
                prev = trace.steps[t - 1][l]
                c_prev = prev.c
                r_prev = _prev_recurrence(prev, config.variant, dims.n_r)
            else:
                c_prev = np.zeros(dims.n_c)
                r_prev = np.zeros(dims.n_r)
            d_x, d_c_next, d_r_next, g = cell_step_backward(
                dims,
                config.style,
                config.variant,
                params.layers[l],
                trace.steps[t][l],
                c_prev,
                r_prev,
                d_y_upper[t],
                d_c_next,
                d_r_next,
            )
            d_x_seq[t] = d_x
            acc = grads.layers[l]
            for name in _LAYER_FIELDS:
                arr = getattr(g, name)
                if arr is not None:
                    dst = getattr(acc, name)
                    dst += arr
        d_y_upper = d_x_seq
    return grads


def _write_array(f, arr: np.ndarray) -> None:
    a = np.atleast_2d(np.asarray(arr, dtype="<f8"))
    f.write(struct.pack("<II", a.shape[0], a.shape[1]))
    f.write(a.tobytes(order="C"))


def save_model(params: NetworkParams, config: NetworkConfig, path) -> None:
    """Write the model file: magic, version, config words, then every
    parameter array (vectors as one-row matrices) as dims + f64 data,
    all little-endian.  Writes to a temp file and renames on success."""
    path = os.fspath(path)
    d = config.dims
    tmp = tempfile.NamedTemporaryFile(
        mode="wb", dir=os.path.dirname(path) or ".", delete=False
    )
    try:
        with tmp as f:
            f.write(_MODEL_MAGIC)
            f.write(struct.pack("<I", _MODEL_VERSION))
            f.write(
                struct.pack(
                    "<7I",
                    config.depth,
                    d.n_x,
                    d.n_c,
                    d.n_r,
                    d.n_nr,
                    _STYLE_CODES[config.style],
                    _VARIANT_CODES[config.variant],
                )
            )
            f.write(struct.pack("<I", config.n_out))
            for arr in param_arrays(params):
                _write_array(f, arr)
        os.replace(tmp.name, path)
    except BaseException:
        os.unlink(tmp.name)
        raise


class _Reader:
    """Byte-counting reader so format errors can name an offset."""

    def __init__(self, f):
        self.f = f
        self.offset = 0

    def read(self, n: int, what: str) -> bytes:
        data = self.f.read(n)
        if len(data) != n:
            raise FormatError(
                f"truncated model file while reading {what}", self.offset + len(data)
            )
        self.offset += n
        return data

    def u32(self, what: str) -> int:
        return struct.unpack("<I", self.read(4, what))[0]


def load_model(path) -> tuple[NetworkParams, NetworkConfig]:
    """Read a model file written by save_model; bit-exact round trip."""
    with open(path, "rb") as f:
        r = _Reader(f)
        magic = r.read(4, "magic")
        if magic != _MODEL_MAGIC:
            raise FormatError(f"bad magic {magic!r}, expected {_MODEL_MAGIC!r}", 0)
        version = r.u32("version")
        if version != _MODEL_VERSION:
            raise VersionError(
                f"unsupported model version {version}; supported versions: "
                f"{_MODEL_VERSION}",
                4,
            )
        depth = r.u32("depth")
        n_x = r.u32("n_x")
        n_c = r.u32("n_c")
        n_r = r.u32("n_r")
        n_nr = r.u32("n_nr")
        style_code = r.u32("style code")
        variant_code = r.u32("variant code")
        n_out = r.u32("n_out")
        styles = {v: k for k, v in _STYLE_CODES.items()}
        variants = {v: k for k, v in _VARIANT_CODES.items()}
        if style_code not in styles:
            raise FormatError(f"unknown gate-style code {style_code}", r.offset - 8)
        if variant_code not in variants:
            raise FormatError(f"unknown variant code {variant_code}", r.offset - 4)
        try:
            config = NetworkConfig(
                depth=depth,
                dims=CellDims(n_x=n_x, n_c=n_c, n_r=n_r, n_nr=n_nr),
                style=styles[style_code],
                variant=variants[variant_code],
                n_out=n_out,
            )
        except DimensionError as e:
            raise FormatError(f"inconsistent config in header: {e}", 8) from e

        def read_array(shape, what):
            at = r.offset
            rows = r.u32(f"{what} rows")
            cols = r.u32(f"{what} cols")
            expect = (1, shape[0]) if len(shape) == 1 else shape
            if (rows, cols) != expect:
                raise FormatError(
                    f"{what} has stored shape {(rows, cols)}, expected {expect}", at
                )
            data = r.read(8 * rows * cols, f"{what} data")
            arr = np.frombuffer(data, dtype="<f8").astype(np.float64)
            return arr.reshape(shape)

        layers = []
        for layer in range(depth):
            shapes = layer_param_shapes(
                config.layer_dims(layer), config.style, config.variant
            )
            layers.append(
                LayerParams(
                    **{
                        name: (
                            None
                            if shape is None
                            else read_array(shape, f"layer {layer} {name}")
                        )
                        for name, shape in shapes.items()
                    }
                )
            )
        w_out = read_array((n_out, config.dims.n_y), "w_out")
        b_out = read_array((n_out,), "b_out")
        if f.read(1):
            raise FormatError("trailing bytes after model data", r.offset)
    return NetworkParams(layers=layers, w_out=w_out, b_out=b_out), config
