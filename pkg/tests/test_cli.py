import hashlib
import os

import numpy as np
import pytest

from reslstm.cells import CellDims, GateStyle, ResidualVariant
from reslstm.cli import main
from reslstm.network import NetworkConfig, init_params, load_model, save_model


def run(capsys, *argv):
    code = main(list(argv))
    out = capsys.readouterr()
    return code, out.out, out.err


def tree_digest(root):
    h = hashlib.sha256()
    for dirpath, _, files in sorted(os.walk(root)):
        for name in sorted(files):
            with open(os.path.join(dirpath, name), "rb") as f:
                h.update(name.encode())
                h.update(f.read())
    return h.hexdigest()


class TestHelp:
    @pytest.mark.parametrize(
        "cmd", ["gen-data", "train", "eval", "grad-check", "count-params"]
    )
    def test_help_exits_zero_and_lists_flags(self, capsys, cmd):
        code, out, _ = run(capsys, cmd, "--help")
        assert code == 0
        assert "--" in out and "usage" in out.lower()

    def test_unknown_flag_exits_2(self, capsys):
        code, _, _ = run(capsys, "count-params", "--bogus")
        assert code == 2


class TestCountParams:
    def test_res1_depth2_reference_line(self, capsys):
        code, out, _ = run(
            capsys, "count-params", "--depth", "2", "--style", "standard",
            "--variant", "res1", "--nx", "300", "--nc", "1024", "--nr", "512",
            "--nnr", "0", "--nout", "1936",
        )
        assert code == 0
        assert out.strip() == "12504976 (12.5M)"

    def test_tiny_hand_count(self, capsys):
        code, out, _ = run(
            capsys, "count-params", "--depth", "1", "--style", "fast",
            "--variant", "none", "--nx", "2", "--nc", "3", "--nr", "1",
            "--nnr", "1", "--nout", "2",
        )
        assert code == 0
        assert out.split()[0] == "60"

    def test_table_reproduces_reference_sizes(self, capsys):
        code, out, _ = run(capsys, "count-params", "--table1")
        assert code == 0
        lines = [l for l in out.splitlines() if l and not l.startswith("#")]
        rows = [l.split() for l in lines[1:]]  # skip the column header
        assert len(rows) == 27
        got = {(r[0], int(r[1])): r[3] if r[2] == "-" else r[3] for r in rows}
        expect = {
            ("lstm", 2): "9.6M", ("lstm", 3): "14.3M", ("lstm", 4): "19.0M",
            ("residual-lstm", 2): "9.8M", ("residual-lstm", 3): "14.6M",
            ("residual-lstm", 4): "19.3M",
            ("lstm-res1", 2): "12.5M", ("lstm-res1", 3): "18.8M",
            ("lstm-res1", 4): "25.1M",
            ("lstm-res2", 2): "10.0M", ("lstm-res2", 3): "15.0M",
            ("lstm-res2", 4): "20.0M",
            ("lstm-res3", 2): "10.5M", ("lstm-res3", 3): "15.8M",
            ("lstm-res3", 4): "21.0M",
            ("fast-lstm", 2): "9.6M", ("fast-lstm", 3): "14.3M",
            ("fast-lstm", 4): "19.0M",
            ("fast-lstm-res1", 2): "12.5M", ("fast-lstm-res1", 3): "18.8M",
            ("fast-lstm-res1", 4): "25.1M",
            ("fast-lstm-res2", 2): "10.0M", ("fast-lstm-res2", 3): "15.0M",
            ("fast-lstm-res2", 4): "20.0M",
            ("fast-lstm-res3", 2): "10.5M", ("fast-lstm-res3", 3): "15.8M",
            ("fast-lstm-res3", 4): "21.0M",
        }
        assert got == expect

    def test_rejects_bad_dims(self, capsys):
        code, _, err = run(capsys, "count-params", "--nc", "0")
        assert code == 2


class TestGenData:
    def test_deterministic_byte_identical(self, capsys, tmp_path):
        for d in ("a", "b"):
            code, _, _ = run(
                capsys, "gen-data", "--seed", "7", "--utts", "12",
                "--out", str(tmp_path / d),
            )
            assert code == 0
        assert tree_digest(tmp_path / "a") == tree_digest(tmp_path / "b")

    def test_zero_utts_exits_2(self, capsys, tmp_path):
        code, _, err = run(capsys, "gen-data", "--utts", "0",
                           "--out", str(tmp_path / "x"))
        assert code == 2
        assert "--utts" in err

    def test_manifest_has_utts_lines_and_summary(self, capsys, tmp_path):
        code, out, _ = run(
            capsys, "gen-data", "--seed", "1", "--utts", "9",
            "--out", str(tmp_path / "c"),
        )
        assert code == 0
        assert "utterances=9" in out
        lines = open(tmp_path / "c" / "manifest.tsv").read().splitlines()
        assert len(lines) == 9

    def test_env_seed_default(self, capsys, tmp_path, monkeypatch):
        monkeypatch.setenv("RESLSTM_SEED", "7")
        run(capsys, "gen-data", "--utts", "6", "--out", str(tmp_path / "env"))
        monkeypatch.delenv("RESLSTM_SEED")
        run(capsys, "gen-data", "--seed", "7", "--utts", "6",
            "--out", str(tmp_path / "flag"))
        assert tree_digest(tmp_path / "env") == tree_digest(tmp_path / "flag")


class TestTrainEval:
    @pytest.fixture()
    def corpus_dir(self, capsys, tmp_path):
        code, _, _ = run(
            capsys, "gen-data", "--seed", "3", "--utts", "10", "--tmin", "8",
            "--tmax", "12", "--emit-teacher", "--out", str(tmp_path / "corpus"),
        )
        assert code == 0
        return tmp_path / "corpus"

    def test_lr_zero_model_equals_init(self, capsys, corpus_dir, tmp_path):
        model = tmp_path / "m.rlm"
        code, out, _ = run(
            capsys, "train", "--manifest", str(corpus_dir / "manifest.tsv"),
            "--model-out", str(model), "--lr", "0", "--epochs", "1",
            "--seed", "5", "--nc", "8", "--nr", "4",
        )
        assert code == 0
        assert "epoch=1" in out
        params, config = load_model(model)
        ref = tmp_path / "ref.rlm"
        save_model(init_params(config, 5), config, ref)
        assert model.read_bytes() == ref.read_bytes()

    def test_eval_teacher_is_perfect(self, capsys, corpus_dir):
        code, out, _ = run(
            capsys, "eval", "--manifest", str(corpus_dir / "manifest.tsv"),
            "--model", str(corpus_dir / "teacher.rlm"),
        )
        assert code == 0
        assert out.strip() == "fer=0.000000"

    def test_train_writes_log_and_learns(self, capsys, corpus_dir, tmp_path):
        model = tmp_path / "m.rlm"
        log = tmp_path / "train.log"
        code, out, _ = run(
            capsys, "train", "--manifest", str(corpus_dir / "manifest.tsv"),
            "--model-out", str(model), "--lr", "0.05", "--epochs", "2",
            "--seed", "5", "--nc", "8", "--nr", "4", "--heldout-frac", "0.2",
            "--log", str(log),
        )
        assert code == 0
        logged = log.read_text().splitlines()
        assert len(logged) == 2
        assert all(l.startswith("epoch=") for l in logged)

    def test_eval_missing_model_exits_3(self, capsys, corpus_dir):
        code, _, err = run(
            capsys, "eval", "--manifest", str(corpus_dir / "manifest.tsv"),
            "--model", str(corpus_dir / "nope.rlm"),
        )
        assert code == 3

    def test_config_file_defaults_with_flag_override(self, capsys, corpus_dir,
                                                     tmp_path):
        cfg = tmp_path / "run.conf"
        cfg.write_text("lr=0.0\nepochs=1\nnc=8\nnr=4\nseed=5\n")
        m1 = tmp_path / "one.rlm"
        code, _, _ = run(
            capsys, "--config", str(cfg), "train",
            "--manifest", str(corpus_dir / "manifest.tsv"),
            "--model-out", str(m1),
        )
        assert code == 0
        params, config = load_model(m1)
        assert config.dims.n_c == 8  # from the config file
        ref = tmp_path / "ref.rlm"
        save_model(init_params(config, 5), config, ref)
        assert m1.read_bytes() == ref.read_bytes()  # lr=0 from file was used

        m2 = tmp_path / "two.rlm"
        code, _, _ = run(
            capsys, "--config", str(cfg), "train",
            "--manifest", str(corpus_dir / "manifest.tsv"),
            "--model-out", str(m2), "--lr", "0.05",
        )
        assert code == 0
        assert m2.read_bytes() != ref.read_bytes()  # flag overrode the file


class TestGradCheckCommand:
    def test_single_combo_passes(self, capsys):
        code, out, _ = run(
            capsys, "grad-check", "--style", "fast", "--variant", "res2",
        )
        assert code == 0
        assert out.startswith("max_rel_err=")

    def test_all_combos_print_and_pass(self, capsys):
        code, out, _ = run(capsys, "grad-check")
        assert code == 0
        lines = out.strip().splitlines()
        assert len(lines) == 9  # 8 combo lines + the overall maximum
        assert lines[-1].startswith("max_rel_err=")

    def test_tolerance_exceeded_exits_5(self, capsys):
        code, out, _ = run(
            capsys, "grad-check", "--style", "fast", "--variant", "none",
            "--tol", "1e-12",
        )
        assert code == 5
