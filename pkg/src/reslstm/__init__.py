"""Projected LSTM acoustic-model cells with spliced-input residual variants.

A small numpy library with hand-written forward/backward passes for a
family of recurrent cells (projected LSTM with or without peepholes, plus
three residual variants that splice the layer input into interior points
of the cell), frame-level cross-entropy training, exact parameter
counting, binary model/feature formats, and verification tooling
(finite-difference gradient checks, algebraic-reduction oracles).
"""

from .cells import (
    CellDims,
    CellState,
    GateStyle,
    LayerParams,
    ResidualVariant,
    StepTrace,
    cell_step,
    cell_step_backward,
    fused_gate_preactivations,
    gate_preactivations,
    pack_gate_params,
)
from .data import (
    Sample,
    SpliceConfig,
    SyntheticCorpus,
    Utterance,
    append_speaker,
    gen_synthetic,
    load_corpus,
    prepare_dataset,
    prepare_input,
    read_feat,
    read_labels,
    save_corpus,
    splice,
    write_feat,
    write_labels,
)
from .errors import (
    ContractError,
    DimensionError,
    FormatError,
    NumericError,
    VersionError,
)
from .network import (
    ForwardTrace,
    NetworkConfig,
    NetworkParams,
    backward,
    count_params,
    forward,
    init_params,
    load_model,
    save_model,
)
from .training import (
    Hyperparams,
    TrainReport,
    evaluate,
    grad_check,
    sgd_step,
    softmax_ce,
    train,
    train_epoch,
)

__version__ = "0.1.0"
