"""Checkpoint container, experiment commands and CLI exit codes.

Everything here runs on deliberately tiny configs (16x16 images, toy
networks, 1-2 epochs) so the whole module stays fast.
"""

import json

import numpy as np
import pytest

from quest import checkpoint as ckpt
from quest import harness
from quest.cli import main
from quest.config import load_config
from quest.errors import ConfigurationError, FormatError
from quest.models import ArchSpec, build_model

BASE = """
[dataset]
source = synth
seed = 1
num_classes = 4
n_train = 160
n_test = 64
image_size = 16

[teacher]
stages = 8x1,16x1

[student]
stages = 6x1,12x1

[train]
epochs = 2
batch_size = 32
lr = 0.02
lr_drops =
momentum = 0.5
weight_decay = 0.0001
model_seed = 3
train_seed = 4
"""


def _write(dirpath, text, name="exp.ini"):
    p = dirpath / name
    p.write_text(text)
    return p


@pytest.fixture(scope="module")
def ws(tmp_path_factory):
    """Shared workspace: one tiny teacher + vocabulary for every test."""
    root = tmp_path_factory.mktemp("harness_ws")
    cfg = load_config(_write(root, BASE))
    harness.cmd_train_teacher(cfg, root / "teacher")

    vocab_ini = BASE + f"""
[vocab]
k = 8
max_vectors = 2000
seed = 2
taps = last_conv
teacher_checkpoint = {root}/teacher/teacher.ckpt
"""
    vcfg = load_config(_write(root, vocab_ini, "vocab.ini"))
    harness.cmd_build_vocab(vcfg, root / "vocab")
    return root


class TestTensorContainer:
    def test_round_trip_bit_exact(self, tmp_path):
        rng = np.random.default_rng(0)
        tensors = {
            "a.weight": rng.normal(size=(3, 4)).astype(np.float32),
            "b.bias": rng.normal(size=(7,)).astype(np.float64),
            "scalar": np.asarray(2.5, dtype=np.float32),
        }
        p1, p2 = tmp_path / "a.ckpt", tmp_path / "b.ckpt"
        ckpt.save_tensors(p1, tensors)
        back = ckpt.load_tensors(p1)
        assert set(back) == set(tensors)
        for k in tensors:
            assert np.array_equal(back[k], tensors[k])
            assert back[k].dtype == tensors[k].dtype
        ckpt.save_tensors(p2, back)
        assert p1.read_bytes() == p2.read_bytes()

    def test_rejects_bad_tag(self, tmp_path):
        p = tmp_path / "bad.ckpt"
        import struct
        header = b"NOTATAG 9\n"
        p.write_bytes(struct.pack("<I", len(header)) + header)
        with pytest.raises(FormatError):
            ckpt.load_tensors(p)

    def test_rejects_truncation(self, tmp_path):
        p = tmp_path / "t.ckpt"
        ckpt.save_tensors(p, {"x": np.ones((4, 4), dtype=np.float32)})
        blob = p.read_bytes()
        p.write_bytes(blob[:-10])
        with pytest.raises(FormatError):
            ckpt.load_tensors(p)

    def test_rejects_header_past_eof(self, tmp_path):
        import struct
        p = tmp_path / "h.ckpt"
        p.write_bytes(struct.pack("<I", 10_000) + b"QTNSR 1\n")
        with pytest.raises(FormatError):
            ckpt.load_tensors(p)

    def test_rejects_unsupported_dtype(self, tmp_path):
        with pytest.raises(FormatError):
            ckpt.save_tensors(tmp_path / "i.ckpt",
                              {"x": np.ones(3, dtype=np.int32)})

    def test_rejects_whitespace_names(self, tmp_path):
        with pytest.raises(FormatError):
            ckpt.save_tensors(tmp_path / "w.ckpt",
                              {"bad name": np.ones(3, dtype=np.float32)})

    def test_empty_file(self, tmp_path):
        p = tmp_path / "e.ckpt"
        p.write_bytes(b"")
        with pytest.raises(FormatError):
            ckpt.load_tensors(p)


class TestModelCheckpoint:
    def test_round_trip(self, tmp_path):
        spec = ArchSpec(stages=((4, 1), (6, 1)), num_classes=3)
        model = build_model(spec, seed=5)
        p = tmp_path / "m.ckpt"
        harness.save_model_checkpoint(p, model)
        back, raw = harness.load_model_checkpoint(p)
        assert back.spec == spec
        for name in model.params:
            assert np.array_equal(back.params[name], model.params[name])
        assert not back.frozen

    def test_expected_spec_mismatch(self, tmp_path):
        spec = ArchSpec(stages=((4, 1),), num_classes=3)
        p = tmp_path / "m.ckpt"
        harness.save_model_checkpoint(p, build_model(spec, seed=0))
        other = ArchSpec(stages=((4, 2),), num_classes=3)
        with pytest.raises(ConfigurationError):
            harness.load_model_checkpoint(p, expected_spec=other)

    def test_missing_parameter(self, tmp_path):
        spec = ArchSpec(stages=((4, 1),), num_classes=3)
        model = build_model(spec, seed=0)
        tensors = {"meta.arch": harness._arch_meta(spec)}
        for name in model.param_names():
            if name != "fc.bias":
                tensors[f"model.{name}"] = model.params[name]
        p = tmp_path / "m.ckpt"
        ckpt.save_tensors(p, tensors)
        with pytest.raises(ConfigurationError):
            harness.load_model_checkpoint(p)

    def test_not_a_model(self, tmp_path):
        p = tmp_path / "x.ckpt"
        ckpt.save_tensors(p, {"stuff": np.ones(3, dtype=np.float32)})
        with pytest.raises(ConfigurationError):
            harness.load_model_checkpoint(p)

    def test_heads_stored(self, tmp_path):
        from quest.distill import init_predictor
        spec = ArchSpec(stages=((4, 1),), num_classes=3)
        model = build_model(spec, seed=0)
        pred = init_predictor(4, 6, seed=1)
        p = tmp_path / "m.ckpt"
        harness.save_model_checkpoint(p, model, predictors=[pred])
        _, raw = harness.load_model_checkpoint(p)
        assert np.array_equal(raw["predictor0.weight"], pred.weight)
        assert float(raw["predictor0.gamma"]) == 10.0


class TestTrainTeacherCommand:
    def test_artifacts(self, ws):
        out = ws / "teacher"
        assert (out / "teacher.ckpt").exists()
        assert (out / "run_info.json").exists()
        lines = (out / "teacher_metrics.jsonl").read_text().strip().split("\n")
        assert len(lines) == 2
        rec = json.loads(lines[-1])
        assert set(rec) == {"epoch", "lr", "loss_total", "loss_cls",
                            "loss_distill", "train_acc", "test_acc",
                            "avg_max_teacher_prob"}
        assert "wall_time" not in rec
        timing = (out / "teacher_timing.jsonl").read_text()
        assert "wall_time" in timing

    def test_metrics_deterministic(self, ws, tmp_path):
        cfg = load_config(_write(tmp_path, BASE))
        harness.cmd_train_teacher(cfg, tmp_path / "rerun")
        a = (ws / "teacher" / "teacher_metrics.jsonl").read_bytes()
        b = (tmp_path / "rerun" / "teacher_metrics.jsonl").read_bytes()
        assert a == b
        assert (ws / "teacher" / "teacher.ckpt").read_bytes() == \
            (tmp_path / "rerun" / "teacher.ckpt").read_bytes()


class TestBuildVocabCommand:
    def test_artifacts(self, ws):
        path = ws / "vocab" / "vocab_last_conv.qvwv"
        assert path.exists()
        from quest.vocab import load_vocabulary
        vb = load_vocabulary(path)
        assert vb.k == 8
        assert vb.dim == 16
        assert vb.tap == "last_conv"

    def test_requires_teacher(self, ws, tmp_path):
        cfg = load_config(_write(tmp_path, BASE + "\n[vocab]\nk = 4\n"))
        with pytest.raises(ConfigurationError):
            harness.cmd_build_vocab(cfg, tmp_path / "v")


def _distill_ini(ws, mode, extra=""):
    text = BASE + f"""
[distill]
mode = {mode}
alpha = 1.0
beta = 1.0
teacher_checkpoint = {ws}/teacher/teacher.ckpt
{extra}
"""
    return text


class TestDistillCommand:
    def test_mode_none(self, ws, tmp_path):
        cfg = load_config(_write(tmp_path, BASE))
        res = harness.cmd_distill(cfg, tmp_path / "none")
        assert (tmp_path / "none" / "student.ckpt").exists()
        assert 0.0 <= res["final_test_acc"] <= 1.0
        assert res["final_distill_loss"] == 0.0

    def test_mode_quest(self, ws, tmp_path):
        extra = f"tau = 0.2\nlevels = last_conv:last_conv:{ws}/vocab/vocab_last_conv.qvwv"
        cfg = load_config(_write(tmp_path, _distill_ini(ws, "quest", extra)))
        res = harness.cmd_distill(cfg, tmp_path / "quest")
        assert res["final_distill_loss"] > 0
        rec = json.loads((tmp_path / "quest" / "student_metrics.jsonl")
                         .read_text().strip().split("\n")[-1])
        assert rec["avg_max_teacher_prob"] is not None
        # predictor head rides along in the checkpoint
        _, raw = harness.load_model_checkpoint(tmp_path / "quest" / "student.ckpt")
        assert "predictor0.weight" in raw

    def test_mode_kd(self, ws, tmp_path):
        cfg = load_config(_write(tmp_path, _distill_ini(ws, "kd", "rho = 2.0")))
        res = harness.cmd_distill(cfg, tmp_path / "kd")
        assert res["final_distill_loss"] > 0

    def test_mode_feature_regression(self, ws, tmp_path):
        cfg = load_config(_write(
            tmp_path, _distill_ini(ws, "feature_regression",
                                   "levels = last_conv:last_conv")))
        res = harness.cmd_distill(cfg, tmp_path / "fr")
        assert res["final_distill_loss"] > 0
        _, raw = harness.load_model_checkpoint(tmp_path / "fr" / "student.ckpt")
        assert "regressor0.weight" in raw  # 16 vs 12 channels needs an adapter

    def test_quest_needs_vocab_path(self, ws, tmp_path):
        extra = "levels = last_conv:last_conv"
        cfg = load_config(_write(tmp_path, _distill_ini(ws, "quest", extra)))
        with pytest.raises(ConfigurationError):
            harness.cmd_distill(cfg, tmp_path / "q")

    def test_vocab_tap_provenance_checked(self, ws, tmp_path):
        from quest.vocab import Vocabulary, save_vocabulary
        wrong = tmp_path / "wrong.qvwv"
        save_vocabulary(wrong, Vocabulary(
            centroids=np.zeros((4, 16), dtype=np.float32), tap="stage1",
            kmeans_objective=0.0))
        extra = f"levels = last_conv:last_conv:{wrong}"
        cfg = load_config(_write(tmp_path, _distill_ini(ws, "quest", extra)))
        with pytest.raises(ConfigurationError):
            harness.cmd_distill(cfg, tmp_path / "q2")

    def test_missing_teacher_checkpoint(self, ws, tmp_path):
        text = BASE + "\n[distill]\nmode = kd\n"
        cfg = load_config(_write(tmp_path, text))
        with pytest.raises(ConfigurationError):
            harness.cmd_distill(cfg, tmp_path / "x")

    def test_rerun_byte_identical(self, ws, tmp_path):
        extra = f"tau = 0.2\nlevels = last_conv:last_conv:{ws}/vocab/vocab_last_conv.qvwv"
        text = _distill_ini(ws, "quest", extra)
        cfg1 = load_config(_write(tmp_path, text, "a.ini"))
        cfg2 = load_config(_write(tmp_path, text, "b.ini"))
        harness.cmd_distill(cfg1, tmp_path / "r1")
        harness.cmd_distill(cfg2, tmp_path / "r2")
        for fname in ("student_metrics.jsonl", "student.ckpt", "run_info.json"):
            assert (tmp_path / "r1" / fname).read_bytes() == \
                (tmp_path / "r2" / fname).read_bytes(), fname


class TestEvalCommand:
    def test_eval_teacher(self, ws, tmp_path, capsys):
        text = BASE + f"""
[eval]
checkpoint = {ws}/teacher/teacher.ckpt
arch = teacher
split = test
"""
        cfg = load_config(_write(tmp_path, text))
        res = harness.cmd_eval(cfg, tmp_path / "eval")
        assert res["n"] == 64
        assert 0.0 <= res["accuracy"] <= 1.0
        out = capsys.readouterr().out
        assert out.startswith("split,n,accuracy")
        saved = json.loads((tmp_path / "eval" / "eval.json").read_text())
        assert saved["accuracy"] == res["accuracy"]

    def test_missing_checkpoint(self, ws, tmp_path):
        text = BASE + "\n[eval]\ncheckpoint = /nope.ckpt\narch = teacher\n"
        cfg = load_config(_write(tmp_path, text))
        with pytest.raises(ConfigurationError):
            harness.cmd_eval(cfg, tmp_path / "e")


class TestRetrieveCommand:
    def test_retrieval_outputs(self, ws, tmp_path):
        text = BASE + f"""
[retrieve]
teacher_checkpoint = {ws}/teacher/teacher.ckpt
vocab = {ws}/vocab/vocab_last_conv.qvwv
num_queries = 20
seed = 0
split = test
tau = 0.2
"""
        cfg = load_config(_write(tmp_path, text))
        res = harness.cmd_retrieve(cfg, tmp_path / "ret")
        assert res["n_queries"] == 20
        assert 0.0 <= res["rank1_frac"] <= 1.0
        lines = (tmp_path / "ret" / "retrieval.csv").read_text().strip().split("\n")
        assert lines[0] == "query_index,self_rank,nearest_other,nearest_same_class"
        assert len(lines) == 21
        summary = json.loads(
            (tmp_path / "ret" / "retrieval_summary.json").read_text())
        assert summary["rank1_frac"] == res["rank1_frac"]


class TestAblateCommand:
    def test_tau_sweep(self, ws, tmp_path):
        text = BASE.replace("epochs = 2", "epochs = 1") + f"""
[distill]
mode = quest
teacher_checkpoint = {ws}/teacher/teacher.ckpt

[vocab]
k = 8
max_vectors = 2000
seed = 2

[ablate]
sweep = tau
values = 0.1,0.5
"""
        cfg = load_config(_write(tmp_path, text))
        res = harness.cmd_ablate(cfg, tmp_path / "ab")
        lines = (tmp_path / "ab" / "ablation.csv").read_text().strip().split("\n")
        assert lines[0] == "setting,final_test_acc,final_distill_loss"
        assert len(lines) == 3
        assert lines[1].startswith("tau=0.1,")
        assert lines[2].startswith("tau=0.5,")

    def test_requires_quest_mode(self, ws, tmp_path):
        text = BASE + "\n[ablate]\nsweep = tau\nvalues = 0.1\n"
        cfg = load_config(_write(tmp_path, text))
        with pytest.raises(ConfigurationError):
            harness.cmd_ablate(cfg, tmp_path / "ab")


class TestCli:
    def test_missing_config_file(self, tmp_path):
        assert main(["eval", "--config", str(tmp_path / "nope.ini")]) == 1

    def test_unknown_command(self):
        assert main(["explode"]) == 1

    def test_missing_required_argument(self):
        assert main(["distill"]) == 1

    def test_bad_config_value(self, tmp_path):
        p = _write(tmp_path, "[train]\nlr = -3\n")
        assert main(["distill", "--config", str(p)]) == 1

    def test_eval_roundtrip_exit_zero(self, ws, tmp_path, capsys):
        text = BASE + f"""
[eval]
checkpoint = {ws}/teacher/teacher.ckpt
arch = teacher
"""
        p = _write(tmp_path, text)
        code = main(["eval", "--config", str(p), "--out",
                     str(tmp_path / "out"), "--quiet"])
        assert code == 0
        assert (tmp_path / "out" / "eval.json").exists()

    def test_nan_checkpoint_exits_two(self, ws, tmp_path, capsys):
        spec = ArchSpec(stages=((8, 1), (16, 1)), num_classes=4)
        model = build_model(spec, seed=0)
        model.params["stage1.conv1.weight"][0, 0, 0, 0] = np.nan
        bad = tmp_path / "nan.ckpt"
        harness.save_model_checkpoint(bad, model)
        text = BASE + f"\n[eval]\ncheckpoint = {bad}\narch = teacher\n"
        p = _write(tmp_path, text)
        assert main(["eval", "--config", str(p), "--out",
                     str(tmp_path / "out")]) == 2

    def test_seed_override_changes_model(self, ws, tmp_path, capsys):
        p = _write(tmp_path, BASE)
        assert main(["distill", "--config", str(p), "--quiet",
                     "--out", str(tmp_path / "s5"), "--seed", "5"]) == 0
        assert main(["distill", "--config", str(p), "--quiet",
                     "--out", str(tmp_path / "s6"), "--seed", "6"]) == 0
        assert main(["distill", "--config", str(p), "--quiet",
                     "--out", str(tmp_path / "s5b"), "--seed", "5"]) == 0
        a = (tmp_path / "s5" / "student.ckpt").read_bytes()
        b = (tmp_path / "s6" / "student.ckpt").read_bytes()
        c = (tmp_path / "s5b" / "student.ckpt").read_bytes()
        assert a != b
        assert a == c

    def test_gradcheck_exit_zero(self, tmp_path, capsys):
        assert main(["gradcheck", "--out", str(tmp_path / "gc")]) == 0
        out = capsys.readouterr().out
        assert out.startswith("check,max_rel_err,tol,status")
        assert "FAIL" not in out
        assert (tmp_path / "gc" / "gradcheck.csv").exists()
