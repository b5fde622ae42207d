"""Feature/label I/O, the input pipeline, and a synthetic teacher corpus.

The input pipeline mirrors a spliced-feature acoustic front end: each raw
frame is concatenated with its +-k temporal neighbours (edges replicated),
then a fixed per-speaker vector is appended.  With 40-dim raw features,
k=2 and a 100-dim speaker vector this yields the classic 300-dim input;
the synthetic corpus reproduces the same geometry at desk scale.

Labels for the synthetic corpus come from a frozen, seeded, depth-1
fast-gate teacher network run over the fully processed input, so frame
labels are a learnable function of the inputs with temporal dependence,
and the teacher itself scores a frame error rate of exactly zero.

Binary formats (all little-endian):

* feature file:  magic ``RLF1``, u32 n_frames, u32 dim, f32 row-major data
* label file:    magic ``RLL1``, u32 n_frames, u32 labels
* speaker file:  a feature file with n_frames = 1
* manifest:      one utterance per line,
  ``id<TAB>feat_path<TAB>label_path<TAB>speaker_path`` with ``-`` for an
  absent speaker path; paths are relative to the manifest's directory.

Features are stored as f32 (they are generated f32-exact) and widened to
f64 on load, so write/read round trips are bit-exact.
"""

import os
import struct
import tempfile
from dataclasses import dataclass

import numpy as np

from .cells import CellDims, GateStyle, ResidualVariant
from .errors import ContractError, DimensionError, FormatError
from .network import NetworkConfig, NetworkParams, forward, init_params, map_params

__all__ = [
    "Utterance",
    "SpliceConfig",
    "Sample",
    "SyntheticCorpus",
    "splice",
    "append_speaker",
    "prepare_input",
    "prepare_dataset",
    "gen_synthetic",
    "write_feat",
    "read_feat",
    "write_labels",
    "read_labels",
    "save_corpus",
    "load_corpus",
]

_FEAT_MAGIC = b"RLF1"
_LABEL_MAGIC = b"RLL1"


@dataclass
class Utterance:
    id: str
    frames: np.ndarray  # T x d raw features
    labels: np.ndarray  # T class indices
    speaker_vec: np.ndarray | None = None


@dataclass(frozen=True)
class SpliceConfig:
    """Temporal context k (frames each side) and appended speaker-vector dim."""

    context: int = 2
    speaker_dim: int = 0

    def __post_init__(self):
        if self.context < 0 or self.speaker_dim < 0:
            raise DimensionError(
                f"invalid SpliceConfig: context={self.context} "
                f"speaker_dim={self.speaker_dim}"
            )

    def output_dim(self, raw_dim: int) -> int:
        return (2 * self.context + 1) * raw_dim + self.speaker_dim


@dataclass
class Sample:
    """A network-ready utterance: spliced frames plus labels."""

    id: str
    frames: np.ndarray  # T x n_x
    labels: np.ndarray  # T


@dataclass
class SyntheticCorpus:
    utterances: list[Utterance]
    teacher_params: NetworkParams
    teacher_config: NetworkConfig
    splice: SpliceConfig


def splice(frames: np.ndarray, k: int) -> np.ndarray:
    """Concatenate each row with its +-k neighbours, replicating the edges.

    A T x d input becomes T x (2k+1)d; row t is the concatenation of rows
    t-k .. t+k with out-of-range indices clamped to the nearest valid row.
    """
    frames = np.atleast_2d(np.asarray(frames, dtype=np.float64))
    T = frames.shape[0]
    idx = np.clip(
        np.arange(T)[:, None] + np.arange(-k, k + 1)[None, :], 0, T - 1
    )
    return frames[idx].reshape(T, -1)


def append_speaker(frames: np.ndarray, svec: np.ndarray) -> np.ndarray:
    """Append a fixed vector to every row."""
    frames = np.atleast_2d(frames)
    return np.hstack([frames, np.broadcast_to(svec, (frames.shape[0], svec.shape[0]))])


def prepare_input(
    frames: np.ndarray, speaker_vec: np.ndarray | None, cfg: SpliceConfig
) -> np.ndarray:
    """Run the splice + speaker-append pipeline for one utterance."""
    out = splice(frames, cfg.context)
    if cfg.speaker_dim:
        if speaker_vec is None:
            raise DimensionError(
                f"splice config expects a {cfg.speaker_dim}-dim speaker vector, "
                f"utterance has none"
            )
        if speaker_vec.shape[0] != cfg.speaker_dim:
            raise DimensionError(
                f"speaker vector has dim {speaker_vec.shape[0]}, config says "
                f"{cfg.speaker_dim}"
            )
        out = append_speaker(out, speaker_vec)
    return out


def prepare_dataset(utterances, cfg: SpliceConfig) -> list[Sample]:
    return [
        Sample(
            id=u.id,
            frames=prepare_input(u.frames, u.speaker_vec, cfg),
            labels=np.asarray(u.labels),
        )
        for u in utterances
    ]


def _f32_exact(arr: np.ndarray) -> np.ndarray:
    """Round to f32 and widen back, so file round trips are bit-exact."""
    return arr.astype(np.float32).astype(np.float64)


def gen_synthetic(
    seed: int,
    n_utts: int,
    t_range: tuple[int, int] = (20, 50),
    d_raw: int = 8,
    n_speakers: int = 10,
    speaker_dim: int = 4,
    n_out: int = 8,
    context: int = 2,
    teacher_cell: int = 16,
    teacher_rec: int = 8,
    teacher_gain: float = 2.5,
    max_attempts: int = 50,
) -> SyntheticCorpus:
    """Generate a deterministic teacher-labelled corpus.

    Raw frames are i.i.d. standard normal (f32-exact) and each utterance
    gets one of n_speakers fixed random speaker vectors.  Labels are the
    argmax logits of a frozen depth-1 fast-gate teacher over the processed
    input; the teacher's output bias is recentred on the corpus-mean logits
    so no class dominates.  Corpora whose label histogram leaves any class
    below 2% or above 98% mass are rejected and regenerated from a derived
    seed, so the result is still a pure function of ``seed``.
    """
    if n_out < 2:
        raise ContractError(f"n_out must be >= 2, got {n_out}")
    if n_utts < 1:
        raise ContractError(f"n_utts must be >= 1, got {n_utts}")
    t_min, t_max = t_range
    if not 1 <= t_min <= t_max:
        raise ContractError(f"bad t_range {t_range}")

    cfg = SpliceConfig(context=context, speaker_dim=speaker_dim)
    n_x = cfg.output_dim(d_raw)
    teacher_config = NetworkConfig(
        depth=1,
        dims=CellDims(n_x=n_x, n_c=teacher_cell, n_r=teacher_rec, n_nr=0),
        style=GateStyle.FAST,
        variant=ResidualVariant.NONE,
        n_out=n_out,
    )

    for attempt in range(max_attempts):
        rng = np.random.default_rng([seed, attempt])
        teacher = init_params(teacher_config, int(rng.integers(2**31)))
        teacher = map_params(lambda a: teacher_gain * a, teacher)

        speakers = [
            _f32_exact(rng.standard_normal(speaker_dim)) for _ in range(n_speakers)
        ]
        raw = []
        processed = []
        for u in range(n_utts):
            T = int(rng.integers(t_min, t_max + 1))
            frames = _f32_exact(rng.standard_normal((T, d_raw)))
            svec = speakers[u % n_speakers] if speaker_dim else None
            raw.append((frames, svec))
            processed.append(prepare_input(frames, svec, cfg))

        all_logits = [forward(teacher, teacher_config, p)[0] for p in processed]
        mean = np.mean(np.vstack(all_logits), axis=0)
        teacher.b_out = teacher.b_out - mean

        utts = []
        counts = np.zeros(n_out, dtype=np.int64)
        for u, ((frames, svec), logits) in enumerate(zip(raw, all_logits)):
            labels = np.argmax(logits - mean, axis=1)
            counts += np.bincount(labels, minlength=n_out)
            utts.append(
                Utterance(
                    id=f"utt{u:05d}", frames=frames, labels=labels, speaker_vec=svec
                )
            )
        freq = counts / counts.sum()
        if freq.min() >= 0.02 and freq.max() <= 0.98:
            return SyntheticCorpus(
                utterances=utts,
                teacher_params=teacher,
                teacher_config=teacher_config,
                splice=cfg,
            )
    raise ContractError(
        f"could not generate a non-degenerate corpus in {max_attempts} attempts"
    )


def _atomic_write(path, payload: bytes) -> None:
    path = os.fspath(path)
    tmp = tempfile.NamedTemporaryFile(
        mode="wb", dir=os.path.dirname(path) or ".", delete=False
    )
    try:
        with tmp as f:
            f.write(payload)
        os.replace(tmp.name, path)
    except BaseException:
        os.unlink(tmp.name)
        raise


class _Reader:
    def __init__(self, f):
        self.f = f
        self.offset = 0

    def read(self, n: int, what: str) -> bytes:
        data = self.f.read(n)
        if len(data) != n:
            raise FormatError(f"truncated file while reading {what}", self.offset + len(data))
        self.offset += n
        return data

    def u32(self, what: str) -> int:
        return struct.unpack("<I", self.read(4, what))[0]

    def expect_eof(self) -> None:
        if self.f.read(1):
            raise FormatError("trailing bytes after payload", self.offset)


def write_feat(path, matrix: np.ndarray) -> None:
    m = np.atleast_2d(np.asarray(matrix))
    payload = _FEAT_MAGIC + struct.pack("<II", m.shape[0], m.shape[1])
    payload += m.astype("<f4").tobytes(order="C")
    _atomic_write(path, payload)


def read_feat(path) -> np.ndarray:
    with open(path, "rb") as f:
        r = _Reader(f)
        magic = r.read(4, "magic")
        if magic != _FEAT_MAGIC:
            raise FormatError(f"bad magic {magic!r}, expected {_FEAT_MAGIC!r}", 0)
        n_frames = r.u32("frame count")
        dim = r.u32("dim")
        data = r.read(4 * n_frames * dim, "feature data")
        r.expect_eof()
    return (
        np.frombuffer(data, dtype="<f4").astype(np.float64).reshape(n_frames, dim)
    )


def write_labels(path, labels) -> None:
    lab = np.asarray(labels, dtype=np.uint32)
    payload = _LABEL_MAGIC + struct.pack("<I", lab.shape[0])
    payload += lab.astype("<u4").tobytes()
    _atomic_write(path, payload)


def read_labels(path) -> np.ndarray:
    with open(path, "rb") as f:
        r = _Reader(f)
        magic = r.read(4, "magic")
        if magic != _LABEL_MAGIC:
            raise FormatError(f"bad magic {magic!r}, expected {_LABEL_MAGIC!r}", 0)
        n = r.u32("label count")
        data = r.read(4 * n, "label data")
        r.expect_eof()
    return np.frombuffer(data, dtype="<u4").astype(np.int64)


def save_corpus(utterances, out_dir, manifest_name: str = "manifest.tsv") -> str:
    """Write every utterance plus a manifest; returns the manifest path.

    Speaker vectors are deduplicated by content into shared spk files.
    The manifest is written last, so its presence implies a complete
    corpus.
    """
    out_dir = os.fspath(out_dir)
    os.makedirs(out_dir, exist_ok=True)
    speaker_files: dict[bytes, str] = {}
    lines = []
    for u in utterances:
        feat = f"{u.id}.feat"
        labs = f"{u.id}.labs"
        write_feat(os.path.join(out_dir, feat), u.frames)
        write_labels(os.path.join(out_dir, labs), u.labels)
        if u.speaker_vec is None:
            spk = "-"
        else:
            key = np.asarray(u.speaker_vec, dtype="<f4").tobytes()
            if key not in speaker_files:
                spk = f"spk{len(speaker_files):04d}.feat"
                write_feat(os.path.join(out_dir, spk), u.speaker_vec.reshape(1, -1))
                speaker_files[key] = spk
            spk = speaker_files[key]
        lines.append(f"{u.id}\t{feat}\t{labs}\t{spk}\n")
    manifest = os.path.join(out_dir, manifest_name)
    _atomic_write(manifest, "".join(lines).encode())
    return manifest


def load_corpus(manifest_path) -> list[Utterance]:
    """Read a manifest and every file it references (paths are relative
    to the manifest's directory)."""
    manifest_path = os.fspath(manifest_path)
    base = os.path.dirname(manifest_path)
    utts = []
    spk_cache: dict[str, np.ndarray] = {}
    with open(manifest_path, "r", encoding="utf-8") as f:
        for lineno, line in enumerate(f, start=1):
            line = line.rstrip("\n")
            if not line:
                continue
            parts = line.split("\t")
            if len(parts) != 4:
                raise FormatError(
                    f"manifest line {lineno} has {len(parts)} fields, expected 4"
                )
            uid, feat, labs, spk = parts
            frames = read_feat(os.path.join(base, feat))
            labels = read_labels(os.path.join(base, labs))
            if labels.shape[0] != frames.shape[0]:
                raise FormatError(
                    f"utterance {uid}: {frames.shape[0]} frames but "
                    f"{labels.shape[0]} labels"
                )
            svec = None
            if spk != "-":
                if spk not in spk_cache:
                    mat = read_feat(os.path.join(base, spk))
                    if mat.shape[0] != 1:
                        raise FormatError(
                            f"speaker file {spk} has {mat.shape[0]} rows, expected 1"
                        )
                    spk_cache[spk] = mat[0]
                svec = spk_cache[spk]
            utts.append(Utterance(id=uid, frames=frames, labels=labels, speaker_vec=svec))
    if not utts:
        raise FormatError("manifest lists no utterances")
    return utts
