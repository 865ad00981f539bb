"""Distillation losses and the student-side word predictor.

The student never regresses teacher features directly in the main method.
Instead, at each matched tap the teacher feature map is quantized into
per-location word distributions (see vocab) and the student learns to
predict those distributions through a small cosine-similarity head:
1x1 convolution against L2-normalized prototype vectors, scaled by a
learnable factor gamma, followed by a softmax over words. The loss is the
KL divergence from teacher to student distributions, summed over spatial
locations and averaged over the batch.

Two baselines live here as well: logit distillation at temperature rho and
plain feature regression (MSE, with a 1x1 adapter only when channel counts
differ). Gradients never flow into the teacher or the vocabulary.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import models
from . import tensor as T
from .errors import ConfigurationError, DimensionError
from .vocab import AssignmentMap, Vocabulary, quantize_feature_map

NORM_EPS = 1e-8  # clamp for L2 norms in the cosine head
GAMMA_INIT = 10.0


# ---------------------------------------------------------------------------
# configuration

@dataclass(frozen=True)
class DistillLevel:
    """One matched tap pair; tau is the teacher quantization temperature."""

    teacher_tap: str
    student_tap: str
    tau: float = 0.2
    vocab_path: str | None = None


@dataclass(frozen=True)
class DistillConfig:
    mode: str = "none"  # none | quest | kd | feature_regression
    alpha: float = 1.0
    beta: float = 1.0
    rho: float = 4.0
    levels: tuple[DistillLevel, ...] = ()

    def __post_init__(self):
        if self.mode not in ("none", "quest", "kd", "feature_regression"):
            raise ConfigurationError(f"unknown distill mode '{self.mode}'")
        if self.alpha < 0 or self.beta < 0:
            raise ConfigurationError("alpha and beta must be >= 0")
        if self.mode == "kd" and self.rho <= 0:
            raise ConfigurationError("kd temperature rho must be > 0")
        if self.mode in ("quest", "feature_regression") and not self.levels:
            raise ConfigurationError(f"mode '{self.mode}' needs at least one level")
        for lv in self.levels:
            if lv.tau < 0:
                raise ConfigurationError("level tau must be >= 0")


# ---------------------------------------------------------------------------
# word predictor (student head)

@dataclass
class PredictorParams:
    """Cosine-similarity word predictor: prototypes W (C_S, K), scale gamma."""

    weight: np.ndarray
    gamma: np.ndarray  # 0-d array so SGD can update it in place
    velocity: dict = field(default_factory=dict, repr=False)

    def param_items(self):
        return [("weight", self.weight), ("gamma", self.gamma)]


def init_predictor(c_s: int, k: int, seed: int, dtype=np.float32) -> PredictorParams:
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0x707264]))
    bound = np.sqrt(6.0 / c_s)
    w = rng.uniform(-bound, bound, size=(c_s, k)).astype(dtype)
    return PredictorParams(weight=w, gamma=np.asarray(GAMMA_INIT, dtype=dtype))


def predictor_forward(f_s: np.ndarray, pred: PredictorParams):
    """Per-location word distributions from student features.

    f_s (N, C_S, H, W) -> probs (N, K, H, W). Cosine similarity between each
    location's feature and each prototype column, scaled by gamma, softmaxed
    over words. Invariant to positive rescaling of the features.
    """
    if f_s.ndim != 4:
        raise DimensionError(f"predictor_forward: expected 4-d map, got {f_s.shape}")
    n, c, h, w = f_s.shape
    if c != pred.weight.shape[0]:
        raise DimensionError(
            f"predictor_forward: {c} channels vs predictor dim {pred.weight.shape[0]}")
    k = pred.weight.shape[1]

    x = f_s.transpose(0, 2, 3, 1).reshape(-1, c)
    xn = np.sqrt((x * x).sum(axis=1))
    xm = np.maximum(xn, NORM_EPS)
    xu = x / xm[:, None]

    wn = np.sqrt((pred.weight * pred.weight).sum(axis=0))
    wm = np.maximum(wn, NORM_EPS)
    wu = pred.weight / wm[None, :]

    cos = xu @ wu
    gamma = pred.gamma.item() if hasattr(pred.gamma, "item") else float(pred.gamma)
    p = T.softmax(gamma * cos, axis=1)
    probs = np.ascontiguousarray(p.reshape(n, h, w, k).transpose(0, 3, 1, 2))
    cache = (x, xn, xm, xu, wn, wm, wu, cos, p, gamma, (n, c, h, w))
    return probs, cache


def predictor_backward(cache, dprobs: np.ndarray):
    """Gradients of the predictor w.r.t. features, prototypes and gamma."""
    x, xn, xm, xu, wn, wm, wu, cos, p, gamma, (n, c, h, w) = cache
    k = wu.shape[1]
    dp = dprobs.transpose(0, 2, 3, 1).reshape(-1, k)
    dlogits = T.softmax_backward(p, dp, axis=1)

    dgamma = (dlogits * cos).sum()
    dcos = gamma * dlogits

    dxu = dcos @ wu.T
    dwu = xu.T @ dcos

    # unit-vector backward through the clamped norm: below the clamp the
    # divisor is a constant, so the projection term drops out
    xdot = (dxu * xu).sum(axis=1, keepdims=True)
    dx = (dxu - np.where((xn > NORM_EPS)[:, None], xu * xdot, 0.0)) / xm[:, None]
    wdot = (dwu * wu).sum(axis=0, keepdims=True)
    dw = (dwu - np.where((wn > NORM_EPS)[None, :], wu * wdot, 0.0)) / wm[None, :]

    df_s = np.ascontiguousarray(dx.reshape(n, h, w, c).transpose(0, 3, 1, 2))
    return df_s, dw, np.asarray(dgamma, dtype=p.dtype)


# ---------------------------------------------------------------------------
# losses

def _probs_array(p) -> np.ndarray:
    return p.probs if isinstance(p, AssignmentMap) else np.asarray(p)


def kl_distill_loss(p_teacher, p_student):
    """KL(teacher || student) summed over words and locations, batch mean.

    Returns (value, d_value/d_p_student). The teacher side is a constant:
    no gradient is produced for it. Student probabilities are clamped at
    1e-12 inside the log; in the clamped region the gradient is zero, so
    value and gradient stay consistent.
    """
    pt = _probs_array(p_teacher)
    ps = _probs_array(p_student)
    if pt.shape != ps.shape:
        raise DimensionError(f"kl_distill_loss: shapes {pt.shape} vs {ps.shape}")
    if pt.ndim != 4:
        raise DimensionError(f"kl_distill_loss: expected 4-d maps, got {pt.shape}")
    n = pt.shape[0]
    eps = T.LOG_EPS
    ps_safe = np.maximum(ps, eps)
    # entropy term: contributes to the value, never to the gradient
    ent = np.where(pt > 0, pt * np.log(np.maximum(pt, eps)), 0.0)
    cross = pt * np.log(ps_safe)
    value = float((ent - cross).sum() / n)
    dps = np.where(ps >= eps, -pt / ps_safe, 0.0) / n
    T.ensure_finite(dps, "kl_distill_loss gradient")
    return value, dps.astype(ps.dtype)


def kd_loss(z_teacher: np.ndarray, z_student: np.ndarray, rho: float):
    """Logit distillation: rho^2 * CE(softmax(z_T/rho), softmax(z_S/rho)).

    Batch-mean cross entropy. Returns (value, d_value/d_z_student); the
    teacher logits receive no gradient.
    """
    if rho <= 0:
        raise ConfigurationError("kd_loss: rho must be > 0")
    if z_teacher.shape != z_student.shape:
        raise DimensionError(f"kd_loss: shapes {z_teacher.shape} vs {z_student.shape}")
    n = z_teacher.shape[0]
    pt = T.softmax(z_teacher / rho, axis=1)
    logq = T.log_softmax(z_student / rho, axis=1)
    value = float(rho * rho * (-(pt * logq).sum() / n))
    q = np.exp(logq)
    dz = (rho * (q - pt) / n).astype(z_student.dtype)
    return value, dz


@dataclass
class RegressorParams:
    """1x1 channel adapter for feature regression when C_S != C_T."""

    weight: np.ndarray  # (C_T, C_S, 1, 1)
    bias: np.ndarray  # (C_T,)
    velocity: dict = field(default_factory=dict, repr=False)

    def param_items(self):
        return [("weight", self.weight), ("bias", self.bias)]


def init_regressor(c_s: int, c_t: int, seed: int, dtype=np.float32) -> RegressorParams:
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0x726567]))
    std = np.sqrt(2.0 / c_s)
    w = (rng.standard_normal((c_t, c_s, 1, 1)) * std).astype(dtype)
    return RegressorParams(weight=w, bias=np.zeros(c_t, dtype=dtype))


def feature_regression_loss(f_s: np.ndarray, f_t: np.ndarray,
                            regressor: RegressorParams | None = None):
    """MSE between (adapted) student features and teacher features.

    The 1x1 adapter must be present exactly when channel counts differ.
    Returns (value, df_s, (dweight, dbias) or None). Mean over all elements;
    the teacher map receives no gradient.
    """
    if f_s.ndim != 4 or f_t.ndim != 4:
        raise DimensionError("feature_regression_loss: expected 4-d maps")
    if f_s.shape[0] != f_t.shape[0] or f_s.shape[2:] != f_t.shape[2:]:
        raise DimensionError(
            f"feature_regression_loss: shapes {f_s.shape} vs {f_t.shape}")
    need_adapter = f_s.shape[1] != f_t.shape[1]
    if need_adapter and regressor is None:
        raise ConfigurationError(
            "feature_regression_loss: channel counts differ, adapter required")
    if not need_adapter and regressor is not None:
        raise ConfigurationError(
            "feature_regression_loss: channels match, adapter must be absent")

    if regressor is not None:
        g = T.conv2d(f_s, regressor.weight)
        g = T.bias_add(g, regressor.bias)
    else:
        g = f_s
    diff = g - f_t
    value = float((diff.astype(np.float64) ** 2).mean())
    dg = (2.0 * diff / diff.size).astype(f_s.dtype)
    if regressor is not None:
        db = T.bias_add_backward(4, dg)
        df_s, dw = T.conv2d_backward(f_s, regressor.weight, dg)
        return value, df_s, (dw, db)
    return value, dg, None


def spatial_match(f_a: np.ndarray, f_b: np.ndarray):
    """Average-pool the spatially larger map down to the smaller one.

    Returns (f_a', f_b', pooled) where pooled is 'a', 'b' or None. Extents
    must be integer multiples; mixed relations (one axis larger, the other
    smaller) are a configuration error.
    """
    ha, wa = f_a.shape[2:]
    hb, wb = f_b.shape[2:]
    if (ha, wa) == (hb, wb):
        return f_a, f_b, None
    if ha >= hb and wa >= wb:
        return T.adaptive_avg_pool(f_a, hb, wb), f_b, "a"
    if hb >= ha and wb >= wa:
        return f_a, T.adaptive_avg_pool(f_b, ha, wa), "b"
    raise ConfigurationError(
        f"spatial_match: incompatible extents {(ha, wa)} vs {(hb, wb)}")


# ---------------------------------------------------------------------------
# combined objective

def _one_hot(labels: np.ndarray, num_classes: int, dtype) -> np.ndarray:
    out = np.zeros((labels.shape[0], num_classes), dtype=dtype)
    out[np.arange(labels.shape[0]), labels] = 1.0
    return out


def _pool_student(f_s: np.ndarray, target_hw: tuple[int, int]):
    """Match a student map to an already-matched teacher target size."""
    if f_s.shape[2:] == tuple(target_hw):
        return f_s, None
    h, w = f_s.shape[2:]
    if h >= target_hw[0] and w >= target_hw[1]:
        return T.adaptive_avg_pool(f_s, target_hw[0], target_hw[1]), "b"
    raise ConfigurationError(
        f"student map {(h, w)} smaller than teacher target {tuple(target_hw)}")


def compute_losses(batch: np.ndarray, labels: np.ndarray, teacher, student,
                   config: DistillConfig, vocabularies=None, predictors=None,
                   regressors=None, want_grads: bool = False,
                   teacher_outputs=None):
    """Evaluate the full objective alpha*CE + beta*sum(distill terms).

    vocabularies / predictors / regressors are sequences parallel to
    config.levels. When want_grads is set, also returns the gradient dict
    for the student parameters plus per-level predictor and regressor
    gradients; the teacher and vocabularies are never differentiated.

    teacher_outputs optionally carries precomputed, spatially matched
    targets for this batch ('logits' for kd; 'pt' per level for quest;
    'ft' per level for feature regression). The teacher is frozen, so these
    are identical to what a fresh forward pass would produce.

    Returns (total, breakdown) or (total, breakdown, grads, pred_grads,
    reg_grads).
    """
    distilling = config.mode != "none" and config.beta > 0
    taps = tuple(dict.fromkeys(lv.student_tap for lv in config.levels)) \
        if distilling and config.mode != "kd" else ()
    z_s, feats_s, cache = models.forward(student, batch, taps=taps,
                                         want_cache=want_grads)

    onehot = _one_hot(labels, student.spec.num_classes, z_s.dtype)
    cls_val = T.cross_entropy(z_s, onehot, from_logits=True)
    dlogits = None
    if want_grads:
        dlogits = config.alpha * T.cross_entropy_backward(z_s, onehot,
                                                          from_logits=True)

    breakdown = {"cls": float(cls_val), "distill": 0.0, "distill_terms": [],
                 "avg_max_teacher_prob": None}
    tap_grads: dict[str, np.ndarray] = {}
    pred_grads = [None] * len(config.levels)
    reg_grads = [None] * len(config.levels)

    if distilling:
        pre = teacher_outputs
        if teacher is None and pre is None:
            raise ConfigurationError(f"mode '{config.mode}' requires a teacher")
        if config.mode == "kd":
            z_t = pre["logits"] if pre is not None \
                else models.forward(teacher, batch)[0]
            val, dz = kd_loss(z_t, z_s, config.rho)
            breakdown["distill_terms"].append(val)
            if want_grads:
                dlogits += config.beta * dz
        else:
            feats_t = None
            if pre is None:
                t_taps = tuple(dict.fromkeys(lv.teacher_tap
                                             for lv in config.levels))
                _, feats_t, _ = models.forward(teacher, batch, taps=t_taps)
            maxp_sum, maxp_cnt = 0.0, 0
            for i, lv in enumerate(config.levels):
                fs = feats_s[lv.student_tap]
                pt = ft2 = None
                if pre is not None:
                    if config.mode == "quest":
                        pt = pre["pt"][i]
                        fs2, pooled = _pool_student(fs, pt.shape[2:])
                    else:
                        ft2 = pre["ft"][i]
                        fs2, pooled = _pool_student(fs, ft2.shape[2:])
                else:
                    ft = feats_t[lv.teacher_tap]
                    ft2, fs2, pooled = spatial_match(ft, fs)
                if config.mode == "quest":
                    if pt is None:
                        vocab: Vocabulary = vocabularies[i]
                        pt = quantize_feature_map(ft2, vocab, lv.tau).probs
                    pt = pt.astype(fs2.dtype, copy=False)
                    ps, pcache = predictor_forward(fs2, predictors[i])
                    val, dps = kl_distill_loss(pt, ps)
                    maxp_sum += float(pt.max(axis=1).sum())
                    maxp_cnt += pt.shape[0] * pt.shape[2] * pt.shape[3]
                    if want_grads:
                        dfs2, dw, dgamma = predictor_backward(
                            pcache, config.beta * dps)
                        pred_grads[i] = {"weight": dw, "gamma": dgamma}
                else:
                    reg = regressors[i] if regressors else None
                    val, dfs2_raw, rgrad = feature_regression_loss(fs2, ft2, reg)
                    if want_grads:
                        dfs2 = config.beta * dfs2_raw
                        if rgrad is not None:
                            reg_grads[i] = {"weight": config.beta * rgrad[0],
                                            "bias": config.beta * rgrad[1]}
                breakdown["distill_terms"].append(val)
                if want_grads:
                    if pooled == "b":
                        dfs = T.adaptive_avg_pool_backward(dfs2, fs.shape[2],
                                                           fs.shape[3])
                    else:
                        dfs = dfs2
                    if lv.student_tap in tap_grads:
                        tap_grads[lv.student_tap] = tap_grads[lv.student_tap] + dfs
                    else:
                        tap_grads[lv.student_tap] = dfs
            if config.mode == "quest" and maxp_cnt:
                breakdown["avg_max_teacher_prob"] = maxp_sum / maxp_cnt

    breakdown["distill"] = float(sum(breakdown["distill_terms"]))
    total = float(config.alpha * cls_val + config.beta * breakdown["distill"])
    breakdown["total"] = total
    breakdown["logits"] = z_s

    if not want_grads:
        return total, breakdown
    grads = models.backward(student, cache, dlogits, tap_grads=tap_grads or None)
    return total, breakdown, grads, pred_grads, reg_grads


def total_loss(batch, labels, teacher, student, config: DistillConfig,
               vocabularies=None, predictors=None, regressors=None):
    """Loss evaluation without gradients; see compute_losses."""
    total, breakdown = compute_losses(batch, labels, teacher, student, config,
                                      vocabularies, predictors, regressors,
                                      want_grads=False)
    return total, breakdown
