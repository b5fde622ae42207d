"""Command-line interface.

Subcommands: gen-data, train, eval, grad-check, count-params.  Every
subcommand is deterministic given its flags and input files.  Exit codes:
0 success, 2 bad flags or config, 3 I/O failure, 4 numeric failure,
5 gradient check above tolerance.

Flags may also come from a plain ``key=value`` config file via --config;
explicit flags override file values.  RESLSTM_SEED provides the default
seed.
"""

import argparse
import os
import sys

import numpy as np

from .cells import CellDims, GateStyle, ResidualVariant
from .data import (
    SpliceConfig,
    gen_synthetic,
    load_corpus,
    prepare_dataset,
    save_corpus,
)
from .errors import ContractError, DimensionError, FormatError, NumericError
from .network import NetworkConfig, count_params, init_params, load_model, save_model
from .training import Hyperparams, evaluate, grad_check, train

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_IO = 3
EXIT_NUMERIC = 4
EXIT_TOLERANCE = 5

_STYLES = {"standard": GateStyle.STANDARD, "fast": GateStyle.FAST}
_VARIANTS = {
    "none": ResidualVariant.NONE,
    "res1": ResidualVariant.RES1,
    "res2": ResidualVariant.RES2,
    "res3": ResidualVariant.RES3,
}

# reported sizes of the reference residual architecture rows in the
# standard comparison table; that architecture is not implemented here
_REFERENCE_ROW_SIZES = {2: "9.8M", 3: "14.6M", 4: "19.3M"}


class _UsageError(Exception):
    pass


def _default_seed(fallback: int = 0) -> int:
    return int(os.environ.get("RESLSTM_SEED", str(fallback)))


def _round_m(n: int) -> str:
    return f"{(n // 100_000 + (1 if n % 100_000 >= 50_000 else 0)) / 10:.1f}M"


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="reslstm",
        description="Projected-LSTM acoustic-model cells with spliced-input "
        "residual variants: corpus generation, training, evaluation, "
        "parameter counting and gradient checking.",
        allow_abbrev=False,
    )
    p.add_argument("--config", metavar="FILE", help="key=value defaults file; explicit flags win")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="generate a synthetic teacher-labelled corpus")
    g.add_argument("--out", required=True, help="output directory")
    g.add_argument("--seed", type=int, default=None, help="corpus seed (default $RESLSTM_SEED)")
    g.add_argument("--utts", type=int, default=50, help="number of utterances")
    g.add_argument("--tmin", type=int, default=20, help="shortest utterance (frames)")
    g.add_argument("--tmax", type=int, default=50, help="longest utterance (frames)")
    g.add_argument("--draw", type=int, default=8, help="raw feature dim per frame")
    g.add_argument("--speakers", type=int, default=10, help="number of speakers")
    g.add_argument("--speaker-dim", type=int, default=4, help="speaker-vector dim (0 disables)")
    g.add_argument("--nout", type=int, default=8, help="number of label classes")
    g.add_argument("--context", type=int, default=2, help="splice context k")
    g.add_argument("--teacher-gain", type=float, default=2.5, help="teacher weight scale")
    g.add_argument("--emit-teacher", action="store_true", help="also write teacher.rlm")

    t = sub.add_parser("train", help="train a network on a corpus manifest")
    t.add_argument("--manifest", required=True)
    t.add_argument("--model-out", required=True, help="where to write the trained model")
    t.add_argument("--depth", type=int, default=2)
    t.add_argument("--nc", type=int, default=32, help="cell size")
    t.add_argument("--nr", type=int, default=16, help="recurrent projection size")
    t.add_argument("--nnr", type=int, default=0, help="non-recurrent projection size")
    t.add_argument("--style", choices=sorted(_STYLES), default="fast")
    t.add_argument("--variant", choices=sorted(_VARIANTS), default="res1")
    t.add_argument("--nout", type=int, default=None, help="classes (default: max label + 1)")
    t.add_argument("--context", type=int, default=2, help="splice context k")
    t.add_argument("--lr", type=float, default=0.04)
    t.add_argument("--momentum", type=float, default=0.9)
    t.add_argument("--clip", type=float, default=5.0, help="global grad-norm clip (<=0 disables)")
    t.add_argument("--epochs", type=int, default=15)
    t.add_argument("--seed", type=int, default=None, help="init/shuffle seed (default $RESLSTM_SEED)")
    t.add_argument("--heldout", default=None, help="manifest of a held-out set")
    t.add_argument("--heldout-frac", type=float, default=0.0,
                   help="fraction of the corpus reserved for evaluation instead")
    t.add_argument("--cell-clip", type=float, default=0.0,
                   help="clamp cell activations to +-VALUE during training (<=0 off)")
    t.add_argument("--jobs", type=int, default=1, help="concurrent gradient workers")
    t.add_argument("--log", default=None, help="append per-epoch report lines to this file")

    e = sub.add_parser("eval", help="frame error rate of a model on a corpus")
    e.add_argument("--manifest", required=True)
    e.add_argument("--model", required=True)
    e.add_argument("--context", type=int, default=2, help="splice context k")

    c = sub.add_parser("grad-check", help="finite-difference check of the BPTT gradients")
    c.add_argument("--style", choices=sorted(_STYLES), default=None, help="default: all")
    c.add_argument("--variant", choices=sorted(_VARIANTS), default=None, help="default: all")
    c.add_argument("--depth", type=int, default=2)
    c.add_argument("--nx", type=int, default=7)
    c.add_argument("--nc", type=int, default=6)
    c.add_argument("--nr", type=int, default=3)
    c.add_argument("--nnr", type=int, default=2)
    c.add_argument("--nout", type=int, default=4)
    c.add_argument("--frames", type=int, default=5, help="sequence length")
    c.add_argument("--eps", type=float, default=1e-5)
    c.add_argument("--tol", type=float, default=1e-4)
    c.add_argument("--seed", type=int, default=None, help="default $RESLSTM_SEED")

    n = sub.add_parser("count-params", help="closed-form parameter count")
    n.add_argument("--depth", type=int, default=2)
    n.add_argument("--style", choices=sorted(_STYLES), default="standard")
    n.add_argument("--variant", choices=sorted(_VARIANTS), default="none")
    n.add_argument("--nx", type=int, default=300)
    n.add_argument("--nc", type=int, default=1024)
    n.add_argument("--nr", type=int, default=512)
    n.add_argument("--nnr", type=int, default=0)
    n.add_argument("--nout", type=int, default=1936)
    n.add_argument("--table1", action="store_true",
                   help="print the full comparison table (all styles, variants, depths 2-4)")
    return p


def _apply_config_file(parser, ns, argv) -> None:
    if not getattr(ns, "config", None):
        return
    try:
        with open(ns.config, "r", encoding="utf-8") as f:
            entries = {}
            for lineno, line in enumerate(f, start=1):
                line = line.strip()
                if not line or line.startswith("#"):
                    continue
                if "=" not in line:
                    raise _UsageError(
                        f"{ns.config}:{lineno}: expected key=value, got {line!r}"
                    )
                key, val = line.split("=", 1)
                entries[key.strip().replace("_", "-")] = val.strip()
    except OSError as e:
        raise _UsageError(f"cannot read config file: {e}")

    searchable = list(parser._actions)
    for a in parser._actions:
        if isinstance(a, argparse._SubParsersAction):
            searchable.extend(a.choices[ns.command]._actions)
    actions = {
        opt.lstrip("-").replace("_", "-"): a
        for a in searchable
        for opt in a.option_strings
    }
    for key, raw in entries.items():
        a = actions.get(key)
        if a is None:
            raise _UsageError(f"config file sets unknown option {key!r}")
        explicit = any(
            arg == s or arg.startswith(s + "=") for s in a.option_strings for arg in argv
        )
        if explicit:
            continue
        if isinstance(a, argparse._StoreTrueAction):
            setattr(ns, a.dest, raw.lower() in ("1", "true", "yes", "on"))
        else:
            conv = a.type or str
            try:
                setattr(ns, a.dest, conv(raw))
            except ValueError as e:
                raise _UsageError(f"config value {key}={raw!r}: {e}")


def _network_config(ns, n_x: int, n_out: int) -> NetworkConfig:
    return NetworkConfig(
        depth=ns.depth,
        dims=CellDims(n_x=n_x, n_c=ns.nc, n_r=ns.nr, n_nr=ns.nnr),
        style=_STYLES[ns.style],
        variant=_VARIANTS[ns.variant],
        n_out=n_out,
    )


def cmd_gen_data(ns) -> int:
    if ns.utts < 1:
        raise _UsageError(f"--utts must be >= 1, got {ns.utts}")
    if ns.nout < 2:
        raise _UsageError(f"--nout must be >= 2, got {ns.nout}")
    if not 1 <= ns.tmin <= ns.tmax:
        raise _UsageError(f"need 1 <= --tmin <= --tmax, got {ns.tmin}..{ns.tmax}")
    if ns.draw < 1:
        raise _UsageError(f"--draw must be >= 1, got {ns.draw}")
    seed = ns.seed if ns.seed is not None else _default_seed()
    corpus = gen_synthetic(
        seed=seed,
        n_utts=ns.utts,
        t_range=(ns.tmin, ns.tmax),
        d_raw=ns.draw,
        n_speakers=ns.speakers,
        speaker_dim=ns.speaker_dim,
        n_out=ns.nout,
        context=ns.context,
        teacher_gain=ns.teacher_gain,
    )
    save_corpus(corpus.utterances, ns.out)
    if ns.emit_teacher:
        save_model(
            corpus.teacher_params,
            corpus.teacher_config,
            os.path.join(ns.out, "teacher.rlm"),
        )
    n_frames = sum(u.frames.shape[0] for u in corpus.utterances)
    classes = len(set(int(l) for u in corpus.utterances for l in u.labels))
    print(f"utterances={len(corpus.utterances)} frames={n_frames} classes={classes}")
    return EXIT_OK


def _load_dataset(manifest, context):
    utts = load_corpus(manifest)
    sdims = {0 if u.speaker_vec is None else u.speaker_vec.shape[0] for u in utts}
    if len(sdims) != 1:
        raise FormatError(f"mixed speaker-vector dims in corpus: {sorted(sdims)}")
    cfg = SpliceConfig(context=context, speaker_dim=sdims.pop())
    return prepare_dataset(utts, cfg), utts


def cmd_train(ns) -> int:
    seed = ns.seed if ns.seed is not None else _default_seed()
    dataset, utts = _load_dataset(ns.manifest, ns.context)
    if ns.heldout is not None:
        heldout, _ = _load_dataset(ns.heldout, ns.context)
    elif ns.heldout_frac > 0:
        n_held = max(1, int(round(ns.heldout_frac * len(dataset))))
        if n_held >= len(dataset):
            raise _UsageError(
                f"--heldout-frac {ns.heldout_frac} leaves no training data"
            )
        heldout, dataset = dataset[-n_held:], dataset[:-n_held]
    else:
        heldout = None
    n_out = ns.nout
    if n_out is None:
        n_out = int(max(u.labels.max() for u in utts)) + 1
    config = _network_config(ns, n_x=dataset[0].frames.shape[1], n_out=n_out)
    hyper = Hyperparams(
        learning_rate=ns.lr,
        momentum=ns.momentum,
        grad_clip=ns.clip if ns.clip > 0 else None,
        epochs=ns.epochs,
        shuffle_seed=seed,
    )
    params = init_params(config, seed)

    log_file = open(ns.log, "a", encoding="utf-8") if ns.log else None
    try:
        def emit(line):
            print(line)
            if log_file:
                log_file.write(line + "\n")

        params, _ = train(
            params,
            config,
            dataset,
            hyper,
            heldout=heldout,
            cell_clip=ns.cell_clip if ns.cell_clip > 0 else None,
            jobs=ns.jobs,
            log=emit,
        )
    finally:
        if log_file:
            log_file.close()
    save_model(params, config, ns.model_out)
    return EXIT_OK


def cmd_eval(ns) -> int:
    params, config = load_model(ns.model)
    dataset, _ = _load_dataset(ns.manifest, ns.context)
    if dataset[0].frames.shape[1] != config.dims.n_x:
        raise _UsageError(
            f"prepared frames have dim {dataset[0].frames.shape[1]} but the "
            f"model expects {config.dims.n_x}; check --context"
        )
    fer = evaluate(params, config, dataset)
    print(f"fer={fer:.6f}")
    return EXIT_OK


def cmd_grad_check(ns) -> int:
    # default seed chosen so no true gradient component is so close to zero
    # that finite-difference roundoff dominates its relative error
    seed = ns.seed if ns.seed is not None else _default_seed(fallback=15)
    styles = [_STYLES[ns.style]] if ns.style else list(_STYLES.values())
    variants = [_VARIANTS[ns.variant]] if ns.variant else list(_VARIANTS.values())
    worst = 0.0
    for style in styles:
        for variant in variants:
            config = NetworkConfig(
                depth=ns.depth,
                dims=CellDims(n_x=ns.nx, n_c=ns.nc, n_r=ns.nr, n_nr=ns.nnr),
                style=style,
                variant=variant,
                n_out=ns.nout,
            )
            err = grad_check(config, seed, ns.frames, ns.eps)
            worst = max(worst, err)
            if len(styles) * len(variants) > 1:
                print(f"style={style.value} variant={variant.value} max_rel_err={err:.3e}")
    print(f"max_rel_err={worst:.3e}")
    return EXIT_OK if worst < ns.tol else EXIT_TOLERANCE


def cmd_count_params(ns) -> int:
    if not ns.table1:
        config = _network_config(ns, n_x=ns.nx, n_out=ns.nout)
        n = count_params(config)
        print(f"{n} ({_round_m(n)})")
        return EXIT_OK

    dims = CellDims(n_x=ns.nx, n_c=ns.nc, n_r=ns.nr, n_nr=ns.nnr)
    print(f"# dims: n_x={ns.nx} n_c={ns.nc} n_r={ns.nr} n_nr={ns.nnr} n_out={ns.nout}")
    print(f"{'model':<18}{'depth':>6}{'params':>12}{'rounded':>9}")
    for label, style, variant in [
        ("lstm", GateStyle.STANDARD, ResidualVariant.NONE),
        ("residual-lstm", None, None),
        ("lstm-res1", GateStyle.STANDARD, ResidualVariant.RES1),
        ("lstm-res2", GateStyle.STANDARD, ResidualVariant.RES2),
        ("lstm-res3", GateStyle.STANDARD, ResidualVariant.RES3),
        ("fast-lstm", GateStyle.FAST, ResidualVariant.NONE),
        ("fast-lstm-res1", GateStyle.FAST, ResidualVariant.RES1),
        ("fast-lstm-res2", GateStyle.FAST, ResidualVariant.RES2),
        ("fast-lstm-res3", GateStyle.FAST, ResidualVariant.RES3),
    ]:
        for depth in (2, 3, 4):
            if style is None:
                # reference shortcut architecture from the literature; not
                # implemented here, reported size quoted for completeness
                print(
                    f"{label:<18}{depth:>6}{'-':>12}"
                    f"{_REFERENCE_ROW_SIZES[depth]:>9}  (reference, not computed)"
                )
                continue
            config = NetworkConfig(
                depth=depth, dims=dims, style=style, variant=variant, n_out=ns.nout
            )
            n = count_params(config)
            print(f"{label:<18}{depth:>6}{n:>12}{_round_m(n):>9}")
    return EXIT_OK


_COMMANDS = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "eval": cmd_eval,
    "grad-check": cmd_grad_check,
    "count-params": cmd_count_params,
}


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        ns = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    try:
        _apply_config_file(parser, ns, argv)
        return _COMMANDS[ns.command](ns)
    except _UsageError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except (DimensionError, ContractError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except FormatError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_IO
    except OSError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_IO
    except NumericError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_NUMERIC


def entry() -> None:
    sys.exit(main())


if __name__ == "__main__":
    entry()
