"""Experiment commands: teacher training, vocabulary building, distillation,
evaluation, retrieval, ablation sweeps and gradient verification.

Every command takes a parsed ExperimentConfig plus an output directory and
writes its artifacts there: QTNSR checkpoints, QVWV vocabularies, JSON-lines
metrics and CSV tables. Metric and table files contain no timestamps, so a
rerun with the same config produces byte-identical files; wall-clock times
go to a separate timing sidecar that is documented as non-deterministic.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from . import checkpoint as ckpt
from . import data, gradcheck, models, train, vocab
from .config import ExperimentConfig
from .distill import DistillConfig
from .errors import ConfigurationError, QuestError


# ---------------------------------------------------------------------------
# datasets and checkpoints

def make_datasets(cfg: ExperimentConfig):
    d = cfg.dataset
    if d.source == "synth":
        return data.synth_generate(d.seed, num_classes=d.num_classes,
                                   n_train=d.n_train, n_test=d.n_test,
                                   size=d.image_size)
    train_ds = data.load_cifar_binary(d.train_path, split="train",
                                      normalize=d.normalize)
    test_ds = data.load_cifar_binary(d.test_path, split="test",
                                     normalize=d.normalize)
    return train_ds, test_ds


def _arch_meta(spec: models.ArchSpec) -> np.ndarray:
    flat = [spec.num_classes, spec.in_channels]
    for ch, blocks in spec.stages:
        flat += [ch, blocks]
    return np.asarray(flat, dtype=np.float64)


def _spec_from_meta(meta: np.ndarray) -> models.ArchSpec:
    vals = [int(v) for v in meta]
    stages = tuple((vals[i], vals[i + 1]) for i in range(2, len(vals), 2))
    return models.ArchSpec(stages=stages, num_classes=vals[0],
                           in_channels=vals[1])


def save_model_checkpoint(path, model: models.Model, predictors=None,
                          regressors=None) -> None:
    tensors = {"meta.arch": _arch_meta(model.spec)}
    for name in model.param_names():
        tensors[f"model.{name}"] = model.params[name]
    for i, pred in enumerate(predictors or []):
        tensors[f"predictor{i}.weight"] = pred.weight
        tensors[f"predictor{i}.gamma"] = np.asarray(pred.gamma)
    for i, reg in enumerate(regressors or []):
        if reg is None:
            continue
        tensors[f"regressor{i}.weight"] = reg.weight
        tensors[f"regressor{i}.bias"] = reg.bias
    ckpt.save_tensors(path, tensors)


def load_model_checkpoint(path, expected_spec: models.ArchSpec | None = None):
    """Returns (model, raw_tensors); raw keeps any attached head tensors."""
    tensors = ckpt.load_tensors(path)
    if "meta.arch" not in tensors:
        raise ConfigurationError(f"{path}: not a model checkpoint")
    spec = _spec_from_meta(tensors["meta.arch"])
    if expected_spec is not None and spec != expected_spec:
        raise ConfigurationError(
            f"{path}: checkpoint architecture {spec.stages} x "
            f"{spec.num_classes} classes does not match configured "
            f"{expected_spec.stages} x {expected_spec.num_classes}")
    params = {}
    for name, want_shape in models._param_shapes(spec).items():
        key = f"model.{name}"
        if key not in tensors:
            raise ConfigurationError(f"{path}: missing parameter {name}")
        if tensors[key].shape != want_shape:
            raise ConfigurationError(
                f"{path}: parameter {name} has shape {tensors[key].shape}, "
                f"expected {want_shape}")
        params[name] = tensors[key].copy()
    return models.Model(spec=spec, params=params), tensors


def _load_teacher(path, expected_spec) -> models.Model:
    if not path:
        raise ConfigurationError("a teacher_checkpoint path is required")
    if not Path(path).exists():
        raise ConfigurationError(f"teacher checkpoint not found: {path}")
    teacher, _ = load_model_checkpoint(path, expected_spec)
    return teacher.freeze()


# ---------------------------------------------------------------------------
# metric files

def write_metrics(path, metrics) -> None:
    """JSON-lines, sorted keys, no wall-clock fields: byte-stable."""
    lines = [json.dumps(m.to_record(), sort_keys=True) for m in metrics]
    Path(path).write_text("\n".join(lines) + "\n")


def write_timing(path, metrics) -> None:
    lines = [json.dumps(m.to_record(include_wall=True), sort_keys=True)
             for m in metrics]
    Path(path).write_text("\n".join(lines) + "\n")


def write_run_info(out_dir: Path, command: str, cfg: ExperimentConfig,
                   extra: dict | None = None) -> None:
    info = {
        "command": command,
        "seeds": {"data": cfg.dataset.seed, "model": cfg.train.model_seed,
                  "train": cfg.train.train_seed, "vocab": cfg.vocab.seed},
        "dataset": {"source": cfg.dataset.source,
                    "num_classes": cfg.dataset.num_classes,
                    "n_train": cfg.dataset.n_train,
                    "n_test": cfg.dataset.n_test},
        "teacher_stages": list(cfg.teacher_stages),
        "student_stages": list(cfg.student_stages),
        "distill_mode": cfg.distill.mode,
    }
    if extra:
        info.update(extra)
    (out_dir / "run_info.json").write_text(
        json.dumps(info, sort_keys=True, indent=2) + "\n")


def _progress(tag: str, verbose: bool):
    def hook(rec: train.EpochMetrics):
        if verbose:
            extra = ""
            if rec.avg_max_teacher_prob is not None:
                extra = f" maxp={rec.avg_max_teacher_prob:.4f}"
            print(f"[{tag}] epoch={rec.epoch} lr={rec.lr:.4g} "
                  f"loss={rec.loss_total:.4f} cls={rec.loss_cls:.4f} "
                  f"distill={rec.loss_distill:.4f} "
                  f"train_acc={rec.train_acc:.4f} "
                  f"test_acc={rec.test_acc:.4f}{extra}", flush=True)
    return hook


# ---------------------------------------------------------------------------
# commands

def cmd_train_teacher(cfg: ExperimentConfig, out_dir, verbose: bool = False):
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    train_ds, test_ds = make_datasets(cfg)
    model, metrics = train.train_teacher(cfg.teacher_spec(), train_ds,
                                         test_ds, cfg.train,
                                         progress=_progress("teacher", verbose))
    path = out_dir / "teacher.ckpt"
    save_model_checkpoint(path, model)
    write_metrics(out_dir / "teacher_metrics.jsonl", metrics)
    write_timing(out_dir / "teacher_timing.jsonl", metrics)
    write_run_info(out_dir, "train-teacher", cfg)
    final = metrics[-1]
    if verbose:
        print(f"teacher done: test_acc={final.test_acc:.4f} -> {path}")
    return {"checkpoint": str(path), "final_test_acc": final.test_acc,
            "final_train_acc": final.train_acc, "metrics": metrics}


def cmd_build_vocab(cfg: ExperimentConfig, out_dir, verbose: bool = False):
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    teacher = _load_teacher(cfg.vocab.teacher_checkpoint, cfg.teacher_spec())
    train_ds, _ = make_datasets(cfg)
    result = {"vocabs": {}, "objectives": {}}
    for tap in cfg.vocab.taps:
        feats = vocab.collect_features(teacher, train_ds, tap,
                                       cfg.vocab.max_vectors,
                                       cfg.vocab.seed, k=cfg.vocab.k)
        vb = vocab.kmeans_fit(feats, cfg.vocab.k, seed=cfg.vocab.seed, tap=tap)
        path = out_dir / f"vocab_{tap}.qvwv"
        vocab.save_vocabulary(path, vb)
        result["vocabs"][tap] = str(path)
        result["objectives"][tap] = vb.kmeans_objective
        if verbose:
            print(f"[vocab] tap={tap} k={vb.k} dim={vb.dim} "
                  f"objective={vb.kmeans_objective:.4f} -> {path}", flush=True)
    write_run_info(out_dir, "build-vocab", cfg,
                   extra={"vocab_k": cfg.vocab.k,
                          "vocab_taps": list(cfg.vocab.taps)})
    return result


def _load_level_vocabs(cfg: ExperimentConfig, teacher):
    vocabs = []
    for lv in cfg.distill.levels:
        if not lv.vocab_path:
            raise ConfigurationError(
                f"level {lv.teacher_tap}:{lv.student_tap} needs a vocabulary path")
        if not Path(lv.vocab_path).exists():
            raise ConfigurationError(f"vocabulary not found: {lv.vocab_path}")
        vb = vocab.load_vocabulary(lv.vocab_path)
        if vb.tap and vb.tap != lv.teacher_tap:
            raise ConfigurationError(
                f"{lv.vocab_path} was built from tap '{vb.tap}', "
                f"level expects '{lv.teacher_tap}'")
        want = teacher.spec.tap_channels(lv.teacher_tap)
        if vb.dim != want:
            raise ConfigurationError(
                f"{lv.vocab_path}: dim {vb.dim} vs teacher tap "
                f"{lv.teacher_tap} ({want} channels)")
        vocabs.append(vb)
    return vocabs


def cmd_distill(cfg: ExperimentConfig, out_dir, verbose: bool = False):
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    train_ds, test_ds = make_datasets(cfg)

    teacher = None
    vocabs = None
    checksum_before = None
    if cfg.distill.mode != "none":
        teacher = _load_teacher(cfg.teacher_checkpoint, cfg.teacher_spec())
        checksum_before = teacher.checksum()
        if cfg.distill.mode == "quest":
            vocabs = _load_level_vocabs(cfg, teacher)

    tag = cfg.distill.mode if cfg.distill.mode != "none" else "student"
    student, predictors, regressors, metrics = train.run_training(
        cfg.student_spec(), train_ds, test_ds, cfg.train, dcfg=cfg.distill,
        teacher=teacher, vocabularies=vocabs,
        progress=_progress(tag, verbose))

    if teacher is not None and teacher.checksum() != checksum_before:
        raise QuestError("teacher parameters changed during distillation")

    path = out_dir / "student.ckpt"
    save_model_checkpoint(path, student, predictors=predictors,
                          regressors=regressors)
    write_metrics(out_dir / "student_metrics.jsonl", metrics)
    write_timing(out_dir / "student_timing.jsonl", metrics)
    write_run_info(out_dir, "distill", cfg)
    final = metrics[-1]
    if verbose:
        print(f"student done: mode={cfg.distill.mode} "
              f"test_acc={final.test_acc:.4f} -> {path}")
    return {"checkpoint": str(path), "final_test_acc": final.test_acc,
            "final_distill_loss": final.loss_distill, "metrics": metrics}


def cmd_eval(cfg: ExperimentConfig, out_dir, verbose: bool = False):
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    if not cfg.eval.checkpoint:
        raise ConfigurationError("[eval] checkpoint is required")
    if not Path(cfg.eval.checkpoint).exists():
        raise ConfigurationError(f"checkpoint not found: {cfg.eval.checkpoint}")
    expected = cfg.teacher_spec() if cfg.eval.arch == "teacher" \
        else cfg.student_spec()
    model, _ = load_model_checkpoint(cfg.eval.checkpoint, expected)
    train_ds, test_ds = make_datasets(cfg)
    ds = train_ds if cfg.eval.split == "train" else test_ds
    if len(ds) == 0:
        raise ConfigurationError("eval: empty dataset")
    acc = train.evaluate(model, ds)
    result = {"split": cfg.eval.split, "n": len(ds), "accuracy": acc}
    (out_dir / "eval.json").write_text(
        json.dumps(result, sort_keys=True) + "\n")
    print(f"split,n,accuracy\n{cfg.eval.split},{len(ds)},{acc:.6f}")
    return result


def _signatures(teacher, images, vb, tap, tau, batch_size=256) -> np.ndarray:
    """Flattened assignment maps (N, K*h*w), the retrieval signature."""
    parts = []
    for s in range(0, images.shape[0], batch_size):
        _, feats, _ = models.forward(teacher, images[s:s + batch_size],
                                     taps=(tap,))
        amap = vocab.quantize_feature_map(feats[tap], vb, tau)
        parts.append(amap.probs.reshape(amap.probs.shape[0], -1))
    return np.concatenate(parts, axis=0)


def cmd_retrieve(cfg: ExperimentConfig, out_dir, verbose: bool = False):
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    r = cfg.retrieve
    teacher = _load_teacher(r.teacher_checkpoint, cfg.teacher_spec())
    if not r.vocab:
        raise ConfigurationError("[retrieve] vocab is required")
    if not Path(r.vocab).exists():
        raise ConfigurationError(f"vocabulary not found: {r.vocab}")
    vb = vocab.load_vocabulary(r.vocab)
    tap = vb.tap or "last_conv"

    train_ds, test_ds = make_datasets(cfg)
    ds = train_ds if r.split == "train" else test_ds
    n = len(ds)
    num_q = min(r.num_queries, n)
    rng = np.random.default_rng(np.random.SeedSequence([r.seed, 0x726574]))
    queries = np.sort(rng.choice(n, size=num_q, replace=False))

    sigs = _signatures(teacher, ds.images, vb, tap, r.tau)
    sims = sigs[queries] @ sigs.T  # (Q, N)
    self_sim = sims[np.arange(num_q), queries]
    ranks = 1 + (sims > self_sim[:, None]).sum(axis=1)

    masked = sims.copy()
    masked[np.arange(num_q), queries] = -np.inf
    nearest = masked.argmax(axis=1)
    same_class = ds.labels[nearest] == ds.labels[queries]

    lines = ["query_index,self_rank,nearest_other,nearest_same_class"]
    for i in range(num_q):
        lines.append(f"{queries[i]},{ranks[i]},{nearest[i]},"
                     f"{int(same_class[i])}")
    (out_dir / "retrieval.csv").write_text("\n".join(lines) + "\n")

    rank1_frac = float((ranks == 1).mean())
    result = {"n_queries": num_q, "rank1_frac": rank1_frac,
              "nearest_same_class_frac": float(same_class.mean())}
    (out_dir / "retrieval_summary.json").write_text(
        json.dumps(result, sort_keys=True) + "\n")
    print(f"queries,rank1_frac,nearest_same_class_frac\n"
          f"{num_q},{rank1_frac:.4f},{float(same_class.mean()):.4f}")
    return result


def _parse_sweep_values(sweep: str, values):
    try:
        if sweep == "tau":
            return [float(v) for v in values]
        if sweep == "k":
            return [int(v) for v in values]
    except ValueError:
        raise ConfigurationError(f"bad {sweep} sweep value in {values}")
    return list(values)


def cmd_ablate(cfg: ExperimentConfig, out_dir, verbose: bool = False):
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    if cfg.distill.mode != "quest":
        raise ConfigurationError("ablate sweeps require distill mode quest")
    teacher = _load_teacher(cfg.teacher_checkpoint, cfg.teacher_spec())
    train_ds, test_ds = make_datasets(cfg)
    sweep = cfg.ablate.sweep
    values = _parse_sweep_values(sweep, cfg.ablate.values)
    base_levels = cfg.distill.levels

    feature_cache: dict[str, np.ndarray] = {}

    def features_for(tap: str) -> np.ndarray:
        if tap not in feature_cache:
            feature_cache[tap] = vocab.collect_features(
                teacher, train_ds, tap, cfg.vocab.max_vectors,
                cfg.vocab.seed, k=cfg.vocab.k)
        return feature_cache[tap]

    def vocab_for(tap: str, k: int) -> vocab.Vocabulary:
        feats = features_for(tap)
        if feats.shape[0] < k:
            raise ConfigurationError(
                f"only {feats.shape[0]} vectors collected, need k={k}")
        return vocab.kmeans_fit(feats, k, seed=cfg.vocab.seed, tap=tap)

    rows = []
    for value in values:
        if sweep == "tau":
            levels = tuple(lv.__class__(lv.teacher_tap, lv.student_tap,
                                        tau=float(value))
                           for lv in base_levels)
            vocabs = [vocab_for(lv.teacher_tap, cfg.vocab.k) for lv in levels]
            setting = f"tau={value:g}"
        elif sweep == "k":
            levels = base_levels
            vocabs = [vocab_for(lv.teacher_tap, int(value)) for lv in levels]
            setting = f"k={value}"
        else:
            tap = str(value)
            teacher.spec.resolve_tap(tap)
            cfg.student_spec().resolve_tap(tap)
            levels = (base_levels[0].__class__(tap, tap,
                                               tau=base_levels[0].tau),)
            vocabs = [vocab_for(tap, cfg.vocab.k)]
            setting = f"tap={tap}"

        dcfg = DistillConfig(mode="quest", alpha=cfg.distill.alpha,
                             beta=cfg.distill.beta, rho=cfg.distill.rho,
                             levels=levels)
        _, _, _, metrics = train.run_training(
            cfg.student_spec(), train_ds, test_ds, cfg.train, dcfg=dcfg,
            teacher=teacher, vocabularies=vocabs,
            progress=_progress(setting, verbose))
        rows.append((setting, metrics[-1].test_acc, metrics[-1].loss_distill))

    lines = ["setting,final_test_acc,final_distill_loss"]
    for setting, acc, dl in rows:
        lines.append(f"{setting},{acc:.6f},{dl:.6f}")
    csv_text = "\n".join(lines) + "\n"
    (out_dir / "ablation.csv").write_text(csv_text)
    print(csv_text, end="")
    return {"rows": rows, "csv": str(out_dir / "ablation.csv")}


def cmd_gradcheck(out_dir=None, verbose: bool = False, seed: int = 0):
    results = gradcheck.run_suite(seed=seed)
    lines = ["check,max_rel_err,tol,status"]
    for r in results:
        lines.append(f"{r.name},{r.max_rel_err:.3e},{r.tol:.0e},"
                     f"{'pass' if r.passed else 'FAIL'}")
    text = "\n".join(lines) + "\n"
    print(text, end="")
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        (out_dir / "gradcheck.csv").write_text(text)
    return {"passed": all(r.passed for r in results), "results": results}
