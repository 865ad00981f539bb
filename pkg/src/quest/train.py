"""SGD training loop shared by supervised teacher runs and distillation runs.

One loop drives every mode: plain cross entropy (mode none), word
prediction (quest), logit matching (kd) and feature regression. Per-epoch
metrics capture both loss components, train/test accuracy and, for quest,
the average teacher assignment confidence. All randomness flows from the
named seeds in the config, so reruns are bit-identical on one thread.
"""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from . import data, models
from . import tensor as T
from .config import TrainSection
from .distill import (DistillConfig, init_predictor, init_regressor,
                      compute_losses, spatial_match)
from .errors import ConfigurationError
from .vocab import quantize_feature_map


@dataclass
class EpochMetrics:
    epoch: int
    lr: float
    loss_total: float
    loss_cls: float
    loss_distill: float
    train_acc: float
    test_acc: float
    avg_max_teacher_prob: float | None
    wall_time: float

    def to_record(self, include_wall: bool = False) -> dict:
        rec = {
            "epoch": self.epoch,
            "lr": self.lr,
            "loss_total": self.loss_total,
            "loss_cls": self.loss_cls,
            "loss_distill": self.loss_distill,
            "train_acc": self.train_acc,
            "test_acc": self.test_acc,
            "avg_max_teacher_prob": self.avg_max_teacher_prob,
        }
        if include_wall:
            rec["wall_time"] = self.wall_time
        return rec


def evaluate(model: models.Model, dataset: data.Dataset,
             batch_size: int = 256) -> float:
    """Top-1 accuracy over the whole dataset."""
    if len(dataset) == 0:
        raise ConfigurationError("evaluate: empty dataset")
    correct = 0
    for start in range(0, len(dataset), batch_size):
        images = dataset.images[start:start + batch_size]
        labels = dataset.labels[start:start + batch_size]
        logits, _, _ = models.forward(model, images)
        correct += int((logits.argmax(axis=1) == labels).sum())
    return correct / len(dataset)


def _sgd_on_params(holder, grads: dict, lr: float, momentum: float,
                   weight_decay: float) -> None:
    """SGD over a PredictorParams / RegressorParams container.

    Weight decay applies to weights only, never to gamma or biases.
    """
    for name, arr in holder.param_items():
        if name not in holder.velocity:
            holder.velocity[name] = np.zeros_like(arr)
        wd = weight_decay if name == "weight" else 0.0
        T.sgd_step(arr, grads[name], holder.velocity[name], lr,
                   momentum=momentum, weight_decay=wd)


def _precompute_teacher_outputs(teacher, dcfg: DistillConfig, vocabularies,
                                dataset: data.Dataset, student_spec,
                                batch_size: int = 256):
    """Teacher targets for every training sample, spatially matched.

    Valid only when the teacher sees the raw images (no augmentation):
    the teacher is frozen, so its outputs per sample never change across
    epochs and each target equals what a per-batch forward would produce.
    """
    images = dataset.images
    n = images.shape[0]
    if dcfg.mode == "kd":
        chunks = [models.forward(teacher, images[s:s + batch_size])[0]
                  for s in range(0, n, batch_size)]
        return {"logits": np.concatenate(chunks, axis=0)}

    in_h, in_w = images.shape[2], images.shape[3]
    out: dict = {"pt": [], "ft": []}
    for i, lv in enumerate(dcfg.levels):
        s_hw = student_spec.tap_hw(lv.student_tap, in_h, in_w)
        parts = []
        for s in range(0, n, batch_size):
            _, feats, _ = models.forward(teacher, images[s:s + batch_size],
                                         taps=(lv.teacher_tap,))
            ft = feats[lv.teacher_tap]
            # reuse the matching rule; the student side is a dummy map
            probe = np.empty((1, 1) + s_hw, dtype=ft.dtype)
            ft2, _, _ = spatial_match(ft, probe)
            if dcfg.mode == "quest":
                parts.append(quantize_feature_map(
                    ft2, vocabularies[i], lv.tau).probs)
            else:
                parts.append(ft2)
        key = "pt" if dcfg.mode == "quest" else "ft"
        out[key].append(np.concatenate(parts, axis=0))
    return out


def _slice_outputs(pre: dict, idx: np.ndarray) -> dict:
    out = {}
    if "logits" in pre:
        out["logits"] = pre["logits"][idx]
    for key in ("pt", "ft"):
        if pre.get(key):
            out[key] = [arr[idx] for arr in pre[key]]
    return out


def run_training(student_spec, train_ds: data.Dataset, test_ds: data.Dataset,
                 tcfg: TrainSection, dcfg: DistillConfig | None = None,
                 teacher: models.Model | None = None, vocabularies=None,
                 progress=None):
    """Train a model from scratch; returns (model, predictors, regressors,
    metrics list).

    dcfg None or mode 'none' trains with plain cross entropy. For quest the
    vocabularies sequence must parallel dcfg.levels. The teacher, when
    given, must be frozen; its parameters are never touched.
    """
    dcfg = dcfg or DistillConfig()
    if dcfg.mode != "none":
        if teacher is None:
            raise ConfigurationError(f"mode '{dcfg.mode}' requires a teacher")
        if not teacher.frozen:
            raise ConfigurationError("teacher must be frozen during distillation")
    if dcfg.mode == "quest":
        if vocabularies is None or len(vocabularies) != len(dcfg.levels):
            raise ConfigurationError("quest needs one vocabulary per level")
        for lv, vb in zip(dcfg.levels, vocabularies):
            want = teacher.spec.tap_channels(lv.teacher_tap)
            if vb.dim != want:
                raise ConfigurationError(
                    f"vocabulary dim {vb.dim} does not match teacher tap "
                    f"{lv.teacher_tap} ({want} channels)")

    student = models.build_model(student_spec, tcfg.model_seed)

    predictors = None
    regressors = None
    if dcfg.mode == "quest":
        predictors = [
            init_predictor(student_spec.tap_channels(lv.student_tap),
                           vocabularies[i].k, tcfg.model_seed + 7919 * (i + 1))
            for i, lv in enumerate(dcfg.levels)]
    elif dcfg.mode == "feature_regression":
        regressors = []
        for i, lv in enumerate(dcfg.levels):
            c_s = student_spec.tap_channels(lv.student_tap)
            c_t = teacher.spec.tap_channels(lv.teacher_tap)
            if c_s == c_t:
                regressors.append(None)
            else:
                regressors.append(init_regressor(
                    c_s, c_t, tcfg.model_seed + 104729 * (i + 1)))

    # frozen teacher + unaugmented inputs: targets are per-sample constants
    pre = None
    if dcfg.mode != "none" and dcfg.beta > 0 and tcfg.augment == "none":
        pre = _precompute_teacher_outputs(teacher, dcfg, vocabularies,
                                          train_ds, student_spec)

    metrics: list[EpochMetrics] = []
    for epoch in range(tcfg.epochs):
        lr = tcfg.lr_at(epoch)
        t0 = time.perf_counter()
        sums = np.zeros(3, dtype=np.float64)  # total, cls, distill
        maxp_sum, maxp_n = 0.0, 0
        correct, seen = 0, 0
        for idx, images, labels in data.batch_iter(train_ds, tcfg.batch_size,
                                                   tcfg.train_seed,
                                                   augment=tcfg.augment,
                                                   epoch=epoch,
                                                   with_indices=True):
            total, bd, grads, pgrads, rgrads = compute_losses(
                images, labels, teacher, student, dcfg,
                vocabularies=vocabularies, predictors=predictors,
                regressors=regressors, want_grads=True,
                teacher_outputs=_slice_outputs(pre, idx) if pre else None)
            b = images.shape[0]
            sums += (total * b, bd["cls"] * b, bd["distill"] * b)
            if bd["avg_max_teacher_prob"] is not None:
                maxp_sum += bd["avg_max_teacher_prob"] * b
                maxp_n += b
            correct += int((bd["logits"].argmax(axis=1) == labels).sum())
            seen += b

            models.apply_sgd(student, grads, lr, momentum=tcfg.momentum,
                             weight_decay=tcfg.weight_decay)
            if predictors is not None:
                for pred, pg in zip(predictors, pgrads):
                    _sgd_on_params(pred, pg, lr, tcfg.momentum,
                                   tcfg.weight_decay)
            if regressors is not None:
                for reg, rg in zip(regressors, rgrads):
                    if reg is not None:
                        _sgd_on_params(reg, rg, lr, tcfg.momentum,
                                       tcfg.weight_decay)

        rec = EpochMetrics(
            epoch=epoch,
            lr=lr,
            loss_total=float(sums[0] / seen),
            loss_cls=float(sums[1] / seen),
            loss_distill=float(sums[2] / seen),
            train_acc=correct / seen,
            test_acc=evaluate(student, test_ds),
            avg_max_teacher_prob=(maxp_sum / maxp_n) if maxp_n else None,
            wall_time=time.perf_counter() - t0,
        )
        metrics.append(rec)
        if progress is not None:
            progress(rec)
    return student, predictors, regressors, metrics


def train_teacher(spec, train_ds, test_ds, tcfg: TrainSection, progress=None):
    """Supervised cross-entropy training; thin wrapper over run_training."""
    model, _, _, metrics = run_training(spec, train_ds, test_ds, tcfg,
                                        dcfg=None, progress=progress)
    return model, metrics
