"""One-time-step forward and backward computation for the LSTM cell family.

The baseline cell is a projected LSTM: the cell output m_t is mapped through
a projection matrix to a smaller output y_t, and the recurrent feedback r_t
is the first n_r elements of y_t.  Two gate styles are supported:

* ``STANDARD`` gates read the cell activation through diagonal peephole
  weights (the output gate reads the freshly updated activation).
* ``FAST`` gates omit peepholes, so all four preactivations share one
  structure and can be fused into a single large matrix product.

Three residual variants splice the layer input x_t into an interior point
of the cell and project the spliced vector back to the original width:

* ``RES1`` splices x_t onto tanh(c_t) before the output-gate product.
* ``RES2`` splices x_t onto m_t and replaces the output projection.
* ``RES3`` projects first, then splices x_t onto the projected vector z_t;
  the recurrence is taken from z_t, not from the final output.

All functions are pure given immutable parameters and may be called
concurrently from multiple threads.
"""

from dataclasses import dataclass, field, replace
from enum import Enum

import numpy as np

from .errors import ContractError, DimensionError, NumericError

__all__ = [
    "CellDims",
    "GateStyle",
    "ResidualVariant",
    "LayerParams",
    "CellState",
    "StepTrace",
    "layer_param_shapes",
    "validate_layer_params",
    "zero_state",
    "gate_preactivations",
    "pack_gate_params",
    "fused_gate_preactivations",
    "cell_step",
    "cell_step_backward",
]


class GateStyle(Enum):
    STANDARD = "standard"
    FAST = "fast"


class ResidualVariant(Enum):
    NONE = "none"
    RES1 = "res1"
    RES2 = "res2"
    RES3 = "res3"


@dataclass(frozen=True)
class CellDims:
    """Sizes governing every matrix shape of one layer.

    n_x is the layer's own input size (for stacked layers this is the
    output size of the layer below, not the network input size), n_c the
    cell size, n_r the recurrent-projection size and n_nr the
    non-recurrent-projection size.  The output size is n_y = n_r + n_nr.
    """

    n_x: int
    n_c: int
    n_r: int
    n_nr: int = 0

    def __post_init__(self):
        if self.n_x < 1 or self.n_c < 1 or self.n_r < 1 or self.n_nr < 0:
            raise DimensionError(
                f"invalid CellDims: n_x={self.n_x} n_c={self.n_c} "
                f"n_r={self.n_r} n_nr={self.n_nr}"
            )

    @property
    def n_y(self) -> int:
        return self.n_r + self.n_nr

    def with_input(self, n_x: int) -> "CellDims":
        return replace(self, n_x=n_x)


@dataclass
class LayerParams:
    """All trainable parameters of one layer.

    Gate matrices come in input/recurrent pairs; peepholes are diagonal
    and stored as vectors (absent for FAST gates); w_rp is the output
    projection (absent for RES2, which replaces it); w_res is the residual
    projection (absent when no residual variant is active).
    """

    w_ix: np.ndarray
    w_ir: np.ndarray
    w_fx: np.ndarray
    w_fr: np.ndarray
    w_ox: np.ndarray
    w_or: np.ndarray
    w_gx: np.ndarray
    w_gr: np.ndarray
    w_ic: np.ndarray | None
    w_fc: np.ndarray | None
    w_oc: np.ndarray | None
    b_i: np.ndarray
    b_f: np.ndarray
    b_o: np.ndarray
    b_g: np.ndarray
    w_rp: np.ndarray | None = None
    w_res: np.ndarray | None = None


@dataclass
class CellState:
    """The pair carried across time steps: cell activation and recurrence."""

    c: np.ndarray
    r: np.ndarray


@dataclass
class StepTrace:
    """Every intermediate vector of one time step, kept for the backward pass."""

    i: np.ndarray
    f: np.ndarray
    o: np.ndarray
    g: np.ndarray
    c: np.ndarray
    m: np.ndarray
    y: np.ndarray
    x_in: np.ndarray
    h: np.ndarray | None = None
    z: np.ndarray | None = None
    # where the optional cell clip saturated, 1.0 elsewhere; None if unclipped
    clip_mask: np.ndarray | None = field(default=None, repr=False)


def layer_param_shapes(
    dims: CellDims, style: GateStyle, variant: ResidualVariant
) -> dict[str, tuple[int, ...] | None]:
    """Expected shape of every LayerParams field, in declaration order.

    Fields that are absent for the given style/variant map to None.
    """
    n_x, n_c, n_r, n_y = dims.n_x, dims.n_c, dims.n_r, dims.n_y
    peep = (n_c,) if style is GateStyle.STANDARD else None
    if variant is ResidualVariant.NONE:
        res = None
    elif variant is ResidualVariant.RES1:
        res = (n_c, n_c + n_x)
    elif variant is ResidualVariant.RES2:
        res = (n_y, n_c + n_x)
    else:
        res = (n_y, n_y + n_x)
    rp = None if variant is ResidualVariant.RES2 else (n_y, n_c)
    return {
        "w_ix": (n_c, n_x),
        "w_ir": (n_c, n_r),
        "w_fx": (n_c, n_x),
        "w_fr": (n_c, n_r),
        "w_ox": (n_c, n_x),
        "w_or": (n_c, n_r),
        "w_gx": (n_c, n_x),
        "w_gr": (n_c, n_r),
        "w_ic": peep,
        "w_fc": peep,
        "w_oc": peep,
        "b_i": (n_c,),
        "b_f": (n_c,),
        "b_o": (n_c,),
        "b_g": (n_c,),
        "w_rp": rp,
        "w_res": res,
    }


def validate_layer_params(
    dims: CellDims, style: GateStyle, variant: ResidualVariant, params: LayerParams
) -> None:
    """Raise DimensionError if any field is missing, extra or mis-shaped."""
    for name, shape in layer_param_shapes(dims, style, variant).items():
        arr = getattr(params, name)
        if shape is None:
            if arr is not None:
                raise DimensionError(
                    f"{name} must be absent for style={style.value} "
                    f"variant={variant.value}"
                )
        elif arr is None:
            raise DimensionError(f"{name} is required but missing")
        elif arr.shape != shape:
            raise DimensionError(
                f"{name} has shape {arr.shape}, expected {shape}"
            )


def zero_state(dims: CellDims) -> CellState:
    return CellState(c=np.zeros(dims.n_c), r=np.zeros(dims.n_r))


def _sigmoid(v: np.ndarray) -> np.ndarray:
    out = np.empty_like(v)
    pos = v >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-v[pos]))
    ev = np.exp(v[~pos])
    out[~pos] = ev / (1.0 + ev)
    return out


def gate_preactivations(
    params: LayerParams,
    style: GateStyle,
    x: np.ndarray,
    r_prev: np.ndarray,
    c_prev: np.ndarray,
) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """Affine gate inputs (a_i, a_f, a_o, a_g) before the nonlinearities.

    For STANDARD gates the input and forget preactivations include the
    diagonal peephole read of c_prev.  The output-gate peephole reads the
    *updated* cell activation, which is unknown here, so a_o never includes
    it; cell_step adds that term once c_t exists.
    """
    if x.shape[0] != params.w_ix.shape[1]:
        raise DimensionError(
            f"gate input x has len {x.shape[0]}, w_ix expects "
            f"{params.w_ix.shape[1]}"
        )
    if r_prev.shape[0] != params.w_ir.shape[1]:
        raise DimensionError(
            f"recurrent input r_prev has len {r_prev.shape[0]}, w_ir expects "
            f"{params.w_ir.shape[1]}"
        )
    a_i = params.w_ix @ x + params.w_ir @ r_prev + params.b_i
    a_f = params.w_fx @ x + params.w_fr @ r_prev + params.b_f
    a_o = params.w_ox @ x + params.w_or @ r_prev + params.b_o
    a_g = params.w_gx @ x + params.w_gr @ r_prev + params.b_g
    if style is GateStyle.STANDARD:
        a_i = a_i + params.w_ic * c_prev
        a_f = a_f + params.w_fc * c_prev
    return a_i, a_f, a_o, a_g


def pack_gate_params(params: LayerParams) -> tuple[np.ndarray, np.ndarray]:
    """Stack the four FAST gate affines into one large (W, b) pair.

    Row blocks are ordered [i; f; o; g]; columns are the layer input
    followed by the recurrent input.
    """
    if params.w_ic is not None:
        raise ContractError("fused gate computation requires FAST-style params")
    w_all = np.vstack(
        [
            np.hstack([params.w_ix, params.w_ir]),
            np.hstack([params.w_fx, params.w_fr]),
            np.hstack([params.w_ox, params.w_or]),
            np.hstack([params.w_gx, params.w_gr]),
        ]
    )
    b_all = np.concatenate([params.b_i, params.b_f, params.b_o, params.b_g])
    return np.ascontiguousarray(w_all), b_all


def fused_gate_preactivations(
    w_all: np.ndarray,
    b_all: np.ndarray,
    x: np.ndarray,
    r_prev: np.ndarray,
) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """One large matrix product whose output splits into (a_i, a_f, a_o, a_g).

    Row blocks of w_all must be ordered [i; f; o; g] over columns
    [x; r_prev], as produced by pack_gate_params.
    """
    rows = w_all.shape[0]
    if rows % 4 != 0:
        raise DimensionError(
            f"fused gate matrix has {rows} rows, not divisible by 4"
        )
    n_in = x.shape[0] + r_prev.shape[0]
    if w_all.shape[1] != n_in:
        raise DimensionError(
            f"fused gate matrix has {w_all.shape[1]} cols, inputs "
            f"concatenate to {n_in}"
        )
    if b_all.shape[0] != rows:
        raise DimensionError(
            f"fused bias has len {b_all.shape[0]}, expected {rows}"
        )
    a_all = w_all @ np.concatenate([x, r_prev]) + b_all
    n_c = rows // 4
    return a_all[:n_c], a_all[n_c : 2 * n_c], a_all[2 * n_c : 3 * n_c], a_all[3 * n_c :]


def cell_step(
    dims: CellDims,
    style: GateStyle,
    variant: ResidualVariant,
    params: LayerParams,
    x: np.ndarray,
    state_prev: CellState,
    cell_clip: float | None = None,
) -> tuple[np.ndarray, CellState, StepTrace]:
    """Advance one layer by one time step.

    Returns the layer output y (length n_y), the next CellState and a
    StepTrace of every intermediate for the backward pass.  cell_clip, if
    given, clamps the cell activation to [-cell_clip, +cell_clip] (a
    training-stability option, off by default).
    """
    validate_layer_params(dims, style, variant, params)
    if x.shape[0] != dims.n_x:
        raise DimensionError(f"x has len {x.shape[0]}, dims expect {dims.n_x}")
    if state_prev.c.shape[0] != dims.n_c or state_prev.r.shape[0] != dims.n_r:
        raise DimensionError(
            f"state has shapes c={state_prev.c.shape} r={state_prev.r.shape}, "
            f"dims expect ({dims.n_c},) and ({dims.n_r},)"
        )

    c_prev, r_prev = state_prev.c, state_prev.r
    a_i, a_f, a_o, a_g = gate_preactivations(params, style, x, r_prev, c_prev)
    i = _sigmoid(a_i)
    f = _sigmoid(a_f)
    g = np.tanh(a_g)
    c = i * g + f * c_prev

    clip_mask = None
    if cell_clip is not None:
        clip_mask = (np.abs(c) < cell_clip).astype(np.float64)
        c = np.clip(c, -cell_clip, cell_clip)

    if style is GateStyle.STANDARD:
        a_o = a_o + params.w_oc * c
    o = _sigmoid(a_o)

    h = None
    z = None
    if variant is ResidualVariant.NONE:
        m = o * np.tanh(c)
        y = params.w_rp @ m
        r_next = y[: dims.n_r].copy()
    elif variant is ResidualVariant.RES1:
        h = np.concatenate([np.tanh(c), x])
        m = o * (params.w_res @ h)
        y = params.w_rp @ m
        r_next = y[: dims.n_r].copy()
    elif variant is ResidualVariant.RES2:
        m = o * np.tanh(c)
        h = np.concatenate([m, x])
        y = params.w_res @ h
        r_next = y[: dims.n_r].copy()
    else:  # RES3: project, take the recurrence, then splice and re-project
        m = o * np.tanh(c)
        z = params.w_rp @ m
        r_next = z[: dims.n_r].copy()
        h = np.concatenate([z, x])
        y = params.w_res @ h

    if not np.isfinite(c).all():
        raise NumericError("cell activation became non-finite")
    if not np.isfinite(y).all():
        raise NumericError("cell output became non-finite")

    trace = StepTrace(
        i=i, f=f, o=o, g=g, c=c, m=m, y=y, x_in=x, h=h, z=z, clip_mask=clip_mask
    )
    return y, CellState(c=c, r=r_next), trace


def _zero_grads(
    dims: CellDims, style: GateStyle, variant: ResidualVariant
) -> LayerParams:
    shapes = layer_param_shapes(dims, style, variant)
    return LayerParams(
        **{k: (np.zeros(s) if s is not None else None) for k, s in shapes.items()}
    )


def cell_step_backward(
    dims: CellDims,
    style: GateStyle,
    variant: ResidualVariant,
    params: LayerParams,
    trace: StepTrace,
    c_prev: np.ndarray,
    r_prev: np.ndarray,
    d_y: np.ndarray,
    d_c_next: np.ndarray,
    d_r_next: np.ndarray,
) -> tuple[np.ndarray, np.ndarray, np.ndarray, LayerParams]:
    """Exact reverse-mode derivatives of one cell_step.

    d_y is the cotangent on the step output, d_c_next the cotangent flowing
    back into this step's cell activation from the following step, and
    d_r_next the cotangent on the recurrence vector (which enters y for
    NONE/RES1/RES2 and the intermediate z for RES3).  Returns gradients for
    the step input, the previous state, and every parameter.
    """
    if (variant is ResidualVariant.NONE) != (trace.h is None):
        raise ContractError(
            f"trace does not match variant {variant.value}: "
            f"h {'missing' if trace.h is None else 'present'}"
        )
    if (variant is ResidualVariant.RES3) != (trace.z is not None):
        raise ContractError(
            f"trace does not match variant {variant.value}: "
            f"z {'present' if trace.z is not None else 'missing'}"
        )
    if d_y.shape[0] != dims.n_y or d_c_next.shape[0] != dims.n_c or (
        d_r_next.shape[0] != dims.n_r
    ):
        raise DimensionError(
            f"cotangent shapes d_y={d_y.shape} d_c_next={d_c_next.shape} "
            f"d_r_next={d_r_next.shape} do not match dims"
        )

    i, f, o, g, c, m, x = trace.i, trace.f, trace.o, trace.g, trace.c, trace.m, trace.x_in
    grads = _zero_grads(dims, style, variant)
    d_x = np.zeros(dims.n_x)
    d_c = np.zeros(dims.n_c)
    tc = np.tanh(c)

    if variant is ResidualVariant.NONE:
        dy_tot = d_y.copy()
        dy_tot[: dims.n_r] += d_r_next
        grads.w_rp += np.outer(dy_tot, m)
        d_m = params.w_rp.T @ dy_tot
        d_o = d_m * tc
        d_c += d_m * o * (1.0 - tc * tc)
    elif variant is ResidualVariant.RES1:
        dy_tot = d_y.copy()
        dy_tot[: dims.n_r] += d_r_next
        grads.w_rp += np.outer(dy_tot, m)
        d_m = params.w_rp.T @ dy_tot
        u = params.w_res @ trace.h  # pre-gate residual projection
        d_o = d_m * u
        d_u = d_m * o
        grads.w_res += np.outer(d_u, trace.h)
        d_h = params.w_res.T @ d_u
        d_c += d_h[: dims.n_c] * (1.0 - tc * tc)
        d_x += d_h[dims.n_c :]
    elif variant is ResidualVariant.RES2:
        dy_tot = d_y.copy()
        dy_tot[: dims.n_r] += d_r_next
        grads.w_res += np.outer(dy_tot, trace.h)
        d_h = params.w_res.T @ dy_tot
        d_m = d_h[: dims.n_c]
        d_x += d_h[dims.n_c :]
        d_o = d_m * tc
        d_c += d_m * o * (1.0 - tc * tc)
    else:  # RES3: d_r_next enters z, not y
        grads.w_res += np.outer(d_y, trace.h)
        d_h = params.w_res.T @ d_y
        d_z = d_h[: dims.n_y].copy()
        d_x += d_h[dims.n_y :]
        d_z[: dims.n_r] += d_r_next
        grads.w_rp += np.outer(d_z, m)
        d_m = params.w_rp.T @ d_z
        d_o = d_m * tc
        d_c += d_m * o * (1.0 - tc * tc)

    # output gate; its STANDARD peephole reads the updated cell activation
    d_a_o = d_o * o * (1.0 - o)
    if style is GateStyle.STANDARD:
        grads.w_oc += d_a_o * c
        d_c += d_a_o * params.w_oc
    grads.w_ox += np.outer(d_a_o, x)
    grads.w_or += np.outer(d_a_o, r_prev)
    grads.b_o += d_a_o
    d_x += params.w_ox.T @ d_a_o
    d_r_prev = params.w_or.T @ d_a_o

    # cell update; the optional clip zeroes the gradient where it saturated
    d_c_tot = d_c + d_c_next
    if trace.clip_mask is not None:
        d_c_tot = d_c_tot * trace.clip_mask
    d_i = d_c_tot * g
    d_g = d_c_tot * i
    d_f = d_c_tot * c_prev
    d_c_prev = d_c_tot * f

    d_a_i = d_i * i * (1.0 - i)
    d_a_f = d_f * f * (1.0 - f)
    d_a_g = d_g * (1.0 - g * g)
    if style is GateStyle.STANDARD:
        grads.w_ic += d_a_i * c_prev
        grads.w_fc += d_a_f * c_prev
        d_c_prev = d_c_prev + d_a_i * params.w_ic + d_a_f * params.w_fc

    grads.w_ix += np.outer(d_a_i, x)
    grads.w_ir += np.outer(d_a_i, r_prev)
    grads.b_i += d_a_i
    grads.w_fx += np.outer(d_a_f, x)
    grads.w_fr += np.outer(d_a_f, r_prev)
    grads.b_f += d_a_f
    grads.w_gx += np.outer(d_a_g, x)
    grads.w_gr += np.outer(d_a_g, r_prev)
    grads.b_g += d_a_g
    d_x += params.w_ix.T @ d_a_i + params.w_fx.T @ d_a_f + params.w_gx.T @ d_a_g
    d_r_prev = (
        d_r_prev
        + params.w_ir.T @ d_a_i
        + params.w_fr.T @ d_a_f
        + params.w_gr.T @ d_a_g
    )

    return d_x, d_c_prev, d_r_prev, grads
