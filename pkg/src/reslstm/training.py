"""Frame-level cross-entropy training and gradient verification.

The optimizer is plain SGD with momentum and global-norm gradient clipping,
applied once per utterance in a seeded shuffle order, so a whole training
run is bit-reproducible from its seeds.
"""

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .errors import ContractError, DimensionError, NumericError
from .network import (
    NetworkConfig,
    NetworkParams,
    backward,
    forward,
    init_params,
    map_params,
    param_arrays,
    params_to_vector,
    vector_to_params,
    zero_params,
)

__all__ = [
    "Hyperparams",
    "TrainReport",
    "softmax_ce",
    "sequence_loss",
    "sgd_step",
    "train_epoch",
    "train",
    "evaluate",
    "grad_check",
]


@dataclass(frozen=True)
class Hyperparams:
    learning_rate: float
    momentum: float = 0.0
    grad_clip: float | None = 5.0
    epochs: int = 1
    shuffle_seed: int = 0

    def __post_init__(self):
        if self.learning_rate < 0:
            raise ContractError(f"learning_rate must be >= 0, got {self.learning_rate}")
        if not 0.0 <= self.momentum < 1.0:
            raise ContractError(f"momentum must be in [0,1), got {self.momentum}")
        if self.grad_clip is not None and self.grad_clip <= 0:
            raise ContractError(f"grad_clip must be positive or None")
        if self.epochs < 1:
            raise ContractError(f"epochs must be >= 1, got {self.epochs}")
        if self.shuffle_seed < 0:
            raise ContractError(f"shuffle_seed must be >= 0, got {self.shuffle_seed}")


@dataclass
class TrainReport:
    """Per-epoch frame-averaged loss and held-out frame error rate."""

    losses: list[float] = field(default_factory=list)
    fers: list[float] = field(default_factory=list)

    def lines(self):
        for k, (loss, fer) in enumerate(zip(self.losses, self.fers), start=1):
            yield f"epoch={k} loss={loss:.6f} fer={fer:.6f}"


def softmax_ce(logits: np.ndarray, label: int) -> tuple[float, np.ndarray]:
    """Cross-entropy of one frame and its logit gradient.

    loss = logsumexp(logits) - logits[label] with max subtraction, so huge
    logits cannot overflow; d_logits = softmax(logits) - onehot(label).
    """
    n = logits.shape[0]
    if not 0 <= label < n:
        raise ContractError(f"label {label} out of range for {n} classes")
    m = np.max(logits)
    ez = np.exp(logits - m)
    s = np.sum(ez)
    loss = float(m + np.log(s) - logits[label])
    d = ez / s
    d[label] -= 1.0
    return loss, d


def sequence_loss(logits: np.ndarray, labels: np.ndarray) -> tuple[float, np.ndarray]:
    """Summed per-frame CE over a sequence, with the stacked logit gradient."""
    T = logits.shape[0]
    if labels.shape[0] != T:
        raise DimensionError(f"{labels.shape[0]} labels for {T} logit rows")
    d_logits = np.empty_like(logits)
    total = 0.0
    for t in range(T):
        loss_t, d_logits[t] = softmax_ce(logits[t], int(labels[t]))
        total += loss_t
    return total, d_logits


def _global_norm(grads: NetworkParams) -> float:
    return math.sqrt(sum(float(np.sum(a * a)) for a in param_arrays(grads)))


def sgd_step(
    params: NetworkParams,
    grads: NetworkParams,
    velocity: NetworkParams | None,
    hyper: Hyperparams,
) -> tuple[NetworkParams, NetworkParams]:
    """One momentum-SGD update; returns the new parameters and velocity.

    If grad_clip is set the whole gradient is rescaled so its global L2
    norm is at most grad_clip.  A non-finite gradient aborts the update
    (NumericError) without touching the parameters.
    """
    norm = _global_norm(grads)
    if not math.isfinite(norm):
        raise NumericError("gradient is non-finite; update aborted")
    scale = 1.0
    if hyper.grad_clip is not None and norm > hyper.grad_clip:
        scale = hyper.grad_clip / norm
    step = hyper.learning_rate * scale
    if velocity is None:
        vel = map_params(lambda g: -step * g, grads)
    else:
        vel = map_params(lambda v, g: hyper.momentum * v - step * g, velocity, grads)
    new_params = map_params(lambda p, v: p + v, params, vel)
    return new_params, vel


def train_epoch(
    params: NetworkParams,
    config: NetworkConfig,
    dataset,
    hyper: Hyperparams,
    epoch_index: int,
    velocity: NetworkParams | None = None,
    cell_clip: float | None = None,
    jobs: int = 1,
) -> tuple[NetworkParams, float]:
    """One pass over the dataset with one update per utterance.

    The visit order is a permutation seeded by (shuffle_seed, epoch_index).
    ``velocity``, when given, carries momentum in from the caller and is
    updated in place so it persists across epochs.  ``jobs`` > 1 computes
    gradients for the next ``jobs`` utterances concurrently against a
    parameter snapshot; updates are still applied in permutation order, so
    the result is deterministic for a fixed jobs value.

    Returns the updated parameters and the frame-averaged loss.
    """
    if len(dataset) == 0:
        raise ContractError("dataset is empty")
    order = np.random.default_rng([hyper.shuffle_seed, epoch_index]).permutation(
        len(dataset)
    )
    cur = params
    vel = velocity
    total_loss = 0.0
    total_frames = 0

    def grad_one(p, sample):
        try:
            logits, trace = forward(p, config, sample.frames, cell_clip=cell_clip)
            loss, d_logits = sequence_loss(logits, sample.labels)
            return loss, backward(p, config, trace, d_logits)
        except (DimensionError, NumericError, ContractError) as e:
            raise type(e)(f"utterance {sample.id}: {e}") from e

    if jobs <= 1:
        for idx in order:
            sample = dataset[int(idx)]
            loss, grads = grad_one(cur, sample)
            total_loss += loss
            total_frames += sample.labels.shape[0]
            cur, vel = sgd_step(cur, grads, vel, hyper)
    else:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            for lo in range(0, len(order), jobs):
                chunk = [dataset[int(i)] for i in order[lo : lo + jobs]]
                snapshot = cur
                results = list(pool.map(lambda s: grad_one(snapshot, s), chunk))
                for sample, (loss, grads) in zip(chunk, results):
                    total_loss += loss
                    total_frames += sample.labels.shape[0]
                    cur, vel = sgd_step(cur, grads, vel, hyper)

    if velocity is not None and vel is not velocity:
        for dst, src in zip(param_arrays(velocity), param_arrays(vel)):
            dst[...] = src
    return cur, total_loss / total_frames


def evaluate(params: NetworkParams, config: NetworkConfig, dataset) -> float:
    """Frame error rate: fraction of frames whose argmax logit is wrong.

    Ties break toward the lowest class index.
    """
    errors = 0
    frames = 0
    for sample in dataset:
        logits, _ = forward(params, config, sample.frames)
        pred = np.argmax(logits, axis=1)
        errors += int(np.sum(pred != sample.labels))
        frames += sample.labels.shape[0]
    return errors / frames


def train(
    params: NetworkParams,
    config: NetworkConfig,
    train_set,
    hyper: Hyperparams,
    heldout=None,
    cell_clip: float | None = None,
    jobs: int = 1,
    log=None,
) -> tuple[NetworkParams, TrainReport]:
    """Run the epoch loop; momentum carries across epochs.

    The per-epoch error rate is measured on ``heldout`` when given,
    otherwise on the training set.  ``log``, if given, receives one
    formatted report line per epoch.
    """
    report = TrainReport()
    velocity = zero_params(config)
    for epoch in range(hyper.epochs):
        params, avg_loss = train_epoch(
            params,
            config,
            train_set,
            hyper,
            epoch,
            velocity=velocity,
            cell_clip=cell_clip,
            jobs=jobs,
        )
        fer = evaluate(params, config, heldout if heldout is not None else train_set)
        report.losses.append(avg_loss)
        report.fers.append(fer)
        if log is not None:
            log(f"epoch={epoch + 1} loss={avg_loss:.6f} fer={fer:.6f}")
    return params, report


def grad_check(
    config: NetworkConfig, seed: int, T: int, eps: float
) -> float:
    """Compare analytic BPTT gradients against central finite differences.

    Builds a seeded network and a random frame/label sequence, differences
    every parameter of the summed CE loss, and returns the maximum relative
    error max(|a - n| / max(|a|, |n|, 1e-8)).

    The seeded parameters are perturbed with small noise so the evaluation
    point is generic: biases and peepholes start at zero, where several
    derivative paths vanish identically and a sign error there would go
    unnoticed.
    """
    rng = np.random.default_rng([seed, 1])
    frames = rng.standard_normal((T, config.dims.n_x))
    labels = rng.integers(0, config.n_out, size=T)
    base = params_to_vector(init_params(config, seed))
    params = vector_to_params(
        base + 0.3 * rng.standard_normal(base.shape), config
    )

    logits, trace = forward(params, config, frames)
    _, d_logits = sequence_loss(logits, labels)
    analytic = params_to_vector(backward(params, config, trace, d_logits))

    theta = params_to_vector(params)

    def loss_at(vec):
        p = vector_to_params(vec, config)
        lg, _ = forward(p, config, frames)
        loss, _ = sequence_loss(lg, labels)
        return loss

    numeric = np.empty_like(theta)
    for k in range(theta.shape[0]):
        saved = theta[k]
        theta[k] = saved + eps
        up = loss_at(theta)
        theta[k] = saved - eps
        down = loss_at(theta)
        theta[k] = saved
        numeric[k] = (up - down) / (2.0 * eps)

    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-8)
    return float(np.max(np.abs(analytic - numeric) / denom))
