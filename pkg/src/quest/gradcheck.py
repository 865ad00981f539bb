"""Finite-difference verification of every analytic gradient.

Each check builds a small float64 instance, computes the analytic gradient,
then compares against central finite differences (h = 1e-5). Composed
checks run whole pipelines (forward -> loss) and differentiate with respect
to every parameter. A fault-injection hook scales one op's analytic
backward so tests can confirm the suite actually catches wrong gradients.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import models
from . import tensor as T
from .distill import (DistillConfig, DistillLevel, init_predictor,
                      init_regressor, compute_losses, kd_loss,
                      predictor_forward, predictor_backward, kl_distill_loss)
from .vocab import Vocabulary

FD_H = 1e-5
DEFAULT_TOL = 1e-4


@dataclass
class CheckResult:
    name: str
    max_rel_err: float
    tol: float

    @property
    def passed(self) -> bool:
        return self.max_rel_err <= self.tol


class _Corruptor:
    """Scales selected analytic gradients to simulate a broken backward."""

    def __init__(self, target: str | None, scale: float):
        self.target = target
        self.scale = scale

    def apply(self, check_name: str, *grads):
        if self.target is not None and self.target == check_name:
            grads = tuple(g * self.scale if isinstance(g, np.ndarray) else g
                          for g in grads)
        return grads if len(grads) > 1 else grads[0]


def _err(analytic: np.ndarray, fn, x: np.ndarray) -> float:
    fd = T.finite_difference_gradient(fn, x, h=FD_H)
    return T.relative_error(analytic, fd)


def _param_err(loss_fn, params: dict, analytic: dict) -> float:
    """FD over every entry of every parameter array, worst relative error."""
    worst = 0.0
    for name, arr in params.items():
        flat = arr.reshape(-1)
        fd = np.zeros_like(flat)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + FD_H
            fp = loss_fn()
            flat[i] = orig - FD_H
            fm = loss_fn()
            flat[i] = orig
            fd[i] = (fp - fm) / (2 * FD_H)
        worst = max(worst, T.relative_error(
            analytic[name].reshape(-1), fd))
    return worst


# ---------------------------------------------------------------------------
# individual op checks

def _check_conv2d(rng, cor):
    worst = 0.0
    for stride, padding, shp in ((1, 1, (2, 3, 6, 6)), (2, 0, (2, 2, 7, 7))):
        x = rng.standard_normal(shp)
        w = rng.standard_normal((4, shp[1], 3, 3))
        r = rng.standard_normal(T.conv2d(x, w, stride, padding).shape)
        dx, dw = T.conv2d_backward(x, w, r, stride, padding)
        dx, dw = cor.apply("conv2d", dx, dw)
        worst = max(worst,
                    _err(dx, lambda v: (r * T.conv2d(v, w, stride, padding)).sum(), x),
                    _err(dw, lambda v: (r * T.conv2d(x, v, stride, padding)).sum(), w))
    return worst


def _check_bias_add(rng, cor):
    x = rng.standard_normal((2, 4, 5, 5))
    b = rng.standard_normal(4)
    r = rng.standard_normal(x.shape)
    db = cor.apply("bias_add", T.bias_add_backward(4, r))
    return _err(db, lambda v: (r * T.bias_add(x, v)).sum(), b)


def _check_avg_pool(rng, cor):
    x = rng.standard_normal((2, 3, 6, 6))
    r = rng.standard_normal((2, 3, 3, 3))
    dx = cor.apply("avg_pool", T.avg_pool_backward(r, 2))
    return _err(dx, lambda v: (r * T.avg_pool(v, 2)).sum(), x)


def _check_adaptive_avg_pool(rng, cor):
    x = rng.standard_normal((2, 3, 6, 6))
    r = rng.standard_normal((2, 3, 3, 2))
    dx = cor.apply("adaptive_avg_pool", T.adaptive_avg_pool_backward(r, 6, 6))
    return _err(dx, lambda v: (r * T.adaptive_avg_pool(v, 3, 2)).sum(), x)


def _check_global_avg_pool(rng, cor):
    x = rng.standard_normal((2, 5, 4, 4))
    r = rng.standard_normal((2, 5))
    dx = cor.apply("global_avg_pool", T.global_avg_pool_backward(r, 4, 4))
    return _err(dx, lambda v: (r * T.global_avg_pool(v)).sum(), x)


def _check_relu(rng, cor):
    x = rng.standard_normal((3, 4, 5, 5))
    x = np.where(np.abs(x) < 0.1, x + 0.2 * np.sign(x) + 0.01, x)
    r = rng.standard_normal(x.shape)
    dx = cor.apply("relu", T.relu_backward(x, r))
    return _err(dx, lambda v: (r * T.relu(v)).sum(), x)


def _check_linear(rng, cor):
    x = rng.standard_normal((4, 6))
    w = rng.standard_normal((3, 6))
    b = rng.standard_normal(3)
    r = rng.standard_normal((4, 3))
    dx, dw, db = cor.apply("linear", *T.linear_backward(x, w, r))
    return max(_err(dx, lambda v: (r * T.linear(v, w, b)).sum(), x),
               _err(dw, lambda v: (r * T.linear(x, v, b)).sum(), w),
               _err(db, lambda v: (r * T.linear(x, w, v)).sum(), b))


def _check_softmax(rng, cor):
    z = rng.standard_normal((4, 7)) * 3
    r = rng.standard_normal(z.shape)
    p = T.softmax(z, axis=1)
    dz = cor.apply("softmax", T.softmax_backward(p, r, axis=1))
    return _err(dz, lambda v: (r * T.softmax(v, axis=1)).sum(), z)


def _check_log_softmax(rng, cor):
    z = rng.standard_normal((4, 7)) * 3
    r = rng.standard_normal(z.shape)
    logp = T.log_softmax(z, axis=1)
    dz = cor.apply("log_softmax", T.log_softmax_backward(logp, r, axis=1))
    return _err(dz, lambda v: (r * T.log_softmax(v, axis=1)).sum(), z)


def _check_cross_entropy(rng, cor):
    pred = rng.uniform(0.1, 1.0, size=(4, 5))
    pred /= pred.sum(axis=1, keepdims=True)
    t = rng.uniform(0.1, 1.0, size=(4, 5))
    t /= t.sum(axis=1, keepdims=True)
    dp = cor.apply("cross_entropy", T.cross_entropy_backward(pred, t))
    return _err(dp, lambda v: T.cross_entropy(v, t), pred)


def _check_cross_entropy_logits(rng, cor):
    z = rng.standard_normal((4, 5)) * 2
    t = rng.uniform(0.1, 1.0, size=(4, 5))
    t /= t.sum(axis=1, keepdims=True)
    dz = cor.apply("cross_entropy_logits",
                   T.cross_entropy_backward(z, t, from_logits=True))
    return _err(dz, lambda v: T.cross_entropy(v, t, from_logits=True), z)


def _check_kd_loss(rng, cor):
    zt = rng.standard_normal((4, 6)) * 2
    zs = rng.standard_normal((4, 6)) * 2
    _, dz = kd_loss(zt, zs, rho=3.0)
    dz = cor.apply("kd_loss", dz)
    return _err(dz, lambda v: kd_loss(zt, v, rho=3.0)[0], zs)


def _check_predictor(rng, cor):
    f = rng.standard_normal((2, 5, 3, 3))
    pred = init_predictor(5, 7, seed=3, dtype=np.float64)
    r = rng.standard_normal((2, 7, 3, 3))

    def loss_f(v):
        return (r * predictor_forward(v, pred)[0]).sum()

    _, cache = predictor_forward(f, pred)
    df, dw, dg = cor.apply("predictor", *predictor_backward(cache, r))
    worst = _err(df, loss_f, f)

    def loss_w(v):
        saved = pred.weight.copy()
        pred.weight[...] = v
        out = (r * predictor_forward(f, pred)[0]).sum()
        pred.weight[...] = saved
        return out

    worst = max(worst, _err(dw, loss_w, pred.weight.copy()))

    def loss_g(v):
        saved = pred.gamma.copy()
        pred.gamma[...] = v
        out = (r * predictor_forward(f, pred)[0]).sum()
        pred.gamma[...] = saved
        return out

    worst = max(worst, _err(np.asarray(dg).reshape(()),
                            loss_g, pred.gamma.copy()))
    return worst


def _check_predictor_kl(rng, cor):
    f = rng.standard_normal((2, 4, 3, 3))
    pred = init_predictor(4, 6, seed=5, dtype=np.float64)
    pt = rng.uniform(0.05, 1.0, size=(2, 6, 3, 3))
    pt /= pt.sum(axis=1, keepdims=True)

    def loss(v):
        ps, _ = predictor_forward(v, pred)
        return kl_distill_loss(pt, ps)[0]

    ps, cache = predictor_forward(f, pred)
    _, dps = kl_distill_loss(pt, ps)
    df, _, _ = predictor_backward(cache, dps)
    df = cor.apply("predictor_kl", df)
    return _err(df, loss, f)


# ---------------------------------------------------------------------------
# composed model pipelines

def _tiny_models():
    t_spec = models.ArchSpec(stages=((4, 1), (6, 1)), num_classes=3)
    s_spec = models.ArchSpec(stages=((3, 1), (5, 1)), num_classes=3)
    teacher = models.build_model(t_spec, seed=11, dtype=np.float64)
    teacher.freeze()
    student = models.build_model(s_spec, seed=12, dtype=np.float64)
    return teacher, student


def _model_loss_check(rng, cor, name, dcfg, vocabularies=None):
    teacher, student = _tiny_models()
    batch = rng.uniform(0.0, 1.0, size=(2, 3, 8, 8))
    labels = np.array([0, 2])

    predictors = None
    regressors = None
    if dcfg.mode == "quest":
        predictors = [init_predictor(
            student.spec.tap_channels(lv.student_tap), vocabularies[i].k,
            seed=21 + i, dtype=np.float64) for i, lv in enumerate(dcfg.levels)]
    elif dcfg.mode == "feature_regression":
        regressors = []
        for lv in dcfg.levels:
            c_s = student.spec.tap_channels(lv.student_tap)
            c_t = teacher.spec.tap_channels(lv.teacher_tap)
            regressors.append(None if c_s == c_t else init_regressor(
                c_s, c_t, seed=31, dtype=np.float64))

    def loss_fn():
        return compute_losses(batch, labels, teacher, student, dcfg,
                              vocabularies=vocabularies,
                              predictors=predictors,
                              regressors=regressors)[0]

    _, _, grads, pgrads, rgrads = compute_losses(
        batch, labels, teacher, student, dcfg, vocabularies=vocabularies,
        predictors=predictors, regressors=regressors, want_grads=True)

    params = {f"s.{n}": student.params[n] for n in student.param_names()}
    analytic = {f"s.{n}": grads[n] for n in student.param_names()}
    if predictors is not None:
        for i, pred in enumerate(predictors):
            params[f"p{i}.weight"] = pred.weight
            params[f"p{i}.gamma"] = pred.gamma
            analytic[f"p{i}.weight"] = pgrads[i]["weight"]
            analytic[f"p{i}.gamma"] = np.asarray(pgrads[i]["gamma"])
    if regressors is not None:
        for i, reg in enumerate(regressors):
            if reg is None:
                continue
            params[f"r{i}.weight"] = reg.weight
            params[f"r{i}.bias"] = reg.bias
            analytic[f"r{i}.weight"] = rgrads[i]["weight"]
            analytic[f"r{i}.bias"] = rgrads[i]["bias"]

    analytic = {k: cor.apply(name, v) for k, v in analytic.items()}
    return _param_err(loss_fn, params, analytic)


def _check_model_ce(rng, cor):
    return _model_loss_check(rng, cor, "model_ce", DistillConfig(mode="none"))


def _check_model_kd(rng, cor):
    return _model_loss_check(rng, cor, "model_kd",
                             DistillConfig(mode="kd", rho=2.5))


def _check_model_fr(rng, cor):
    dcfg = DistillConfig(mode="feature_regression",
                         levels=(DistillLevel("stage2", "stage2"),))
    return _model_loss_check(rng, cor, "model_feature_regression", dcfg)


def _check_model_quest(rng, cor):
    # two levels: one same-size, one where the student map must be pooled
    dcfg = DistillConfig(mode="quest", levels=(
        DistillLevel("stage2", "stage2", tau=0.3),
        DistillLevel("stage2", "stage1", tau=0.5),
    ))
    vocabs = [
        Vocabulary(centroids=rng.standard_normal((5, 6)).astype(np.float64),
                   tap="stage2", kmeans_objective=0.0),
        Vocabulary(centroids=rng.standard_normal((4, 6)).astype(np.float64),
                   tap="stage2", kmeans_objective=0.0),
    ]
    return _model_loss_check(rng, cor, "model_quest", dcfg, vocabularies=vocabs)


_CHECKS = (
    ("conv2d", _check_conv2d),
    ("bias_add", _check_bias_add),
    ("avg_pool", _check_avg_pool),
    ("adaptive_avg_pool", _check_adaptive_avg_pool),
    ("global_avg_pool", _check_global_avg_pool),
    ("relu", _check_relu),
    ("linear", _check_linear),
    ("softmax", _check_softmax),
    ("log_softmax", _check_log_softmax),
    ("cross_entropy", _check_cross_entropy),
    ("cross_entropy_logits", _check_cross_entropy_logits),
    ("kd_loss", _check_kd_loss),
    ("predictor", _check_predictor),
    ("predictor_kl", _check_predictor_kl),
    ("model_ce", _check_model_ce),
    ("model_kd", _check_model_kd),
    ("model_feature_regression", _check_model_fr),
    ("model_quest", _check_model_quest),
)


def check_names() -> tuple[str, ...]:
    return tuple(name for name, _ in _CHECKS)


def run_suite(seed: int = 0, tol: float = DEFAULT_TOL,
              corrupt: str | None = None,
              corrupt_scale: float = 1.01) -> list[CheckResult]:
    """Run every gradient check; corrupt names one check whose analytic
    gradients get scaled, which must make exactly that check fail."""
    if corrupt is not None and corrupt not in check_names():
        raise ValueError(f"unknown check '{corrupt}'")
    cor = _Corruptor(corrupt, corrupt_scale)
    results = []
    for idx, (name, fn) in enumerate(_CHECKS):
        rng = np.random.default_rng(np.random.SeedSequence([seed, idx]))
        results.append(CheckResult(name=name, max_rel_err=float(fn(rng, cor)),
                                   tol=tol))
    return results
