"""Small configurable CNN classifiers with named feature taps.

A model is a sequence of stages of 3x3 conv+ReLU blocks, 2x average-pool
down-sampling between stages, and a global-avg-pool + linear classifier.
There are no normalization layers, so every forward pass is a pure function
of (params, input). Feature taps are post-ReLU, taken at the end of each
stage before the down-sampling pool.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .errors import ConfigurationError, UsageError

LAST_TAP_ALIAS = "last_conv"


@dataclass(frozen=True)
class ArchSpec:
    """Architecture description: stages of (channels, blocks)."""

    stages: tuple[tuple[int, int], ...]
    num_classes: int
    in_channels: int = 3

    def __post_init__(self):
        if len(self.stages) == 0:
            raise ConfigurationError("ArchSpec: at least one stage required")
        for ch, blocks in self.stages:
            if ch <= 0 or blocks <= 0:
                raise ConfigurationError(f"ArchSpec: bad stage ({ch}, {blocks})")
        if self.num_classes < 2:
            raise ConfigurationError("ArchSpec: need at least 2 classes")
        if self.in_channels < 1:
            raise ConfigurationError("ArchSpec: in_channels must be >= 1")

    def tap_names(self) -> tuple[str, ...]:
        return tuple(f"stage{i + 1}" for i in range(len(self.stages))) + (LAST_TAP_ALIAS,)

    def resolve_tap(self, name: str) -> int:
        """Tap name -> 0-based stage index; 'last_conv' aliases the final stage."""
        if name == LAST_TAP_ALIAS:
            return len(self.stages) - 1
        for i in range(len(self.stages)):
            if name == f"stage{i + 1}":
                return i
        raise ConfigurationError(
            f"unknown tap {name!r}; available: {', '.join(self.tap_names())}")

    def tap_channels(self, name: str) -> int:
        return self.stages[self.resolve_tap(name)][0]

    def tap_hw(self, name: str, in_h: int, in_w: int) -> tuple[int, int]:
        """Spatial extent of a tap for a given input size (stages halve)."""
        shrink = 2 ** self.resolve_tap(name)
        return in_h // shrink, in_w // shrink


@dataclass
class Model:
    spec: ArchSpec
    params: dict[str, np.ndarray]
    frozen: bool = False
    velocity: dict[str, np.ndarray] = field(default_factory=dict, repr=False)

    def param_names(self) -> list[str]:
        return sorted(self.params)

    def checksum(self) -> str:
        h = hashlib.sha256()
        for name in self.param_names():
            h.update(name.encode())
            h.update(self.params[name].tobytes())
        return h.hexdigest()

    def freeze(self) -> "Model":
        self.frozen = True
        return self


def _param_shapes(spec: ArchSpec):
    shapes = {}
    c_in = spec.in_channels
    for si, (ch, blocks) in enumerate(spec.stages):
        for bi in range(blocks):
            shapes[f"stage{si + 1}.conv{bi + 1}.weight"] = (ch, c_in, 3, 3)
            shapes[f"stage{si + 1}.conv{bi + 1}.bias"] = (ch,)
            c_in = ch
    shapes["fc.weight"] = (spec.num_classes, c_in)
    shapes["fc.bias"] = (spec.num_classes,)
    return shapes


def build_model(spec: ArchSpec, seed: int, dtype=np.float32) -> Model:
    """He-initialized weights, zero biases; deterministic given seed."""
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0x6d6f64]))
    params = {}
    for name, shape in _param_shapes(spec).items():
        if name.endswith(".bias"):
            params[name] = np.zeros(shape, dtype=dtype)
        else:
            fan_in = int(np.prod(shape[1:]))
            std = np.sqrt(2.0 / fan_in)
            params[name] = rng.normal(0.0, std, size=shape).astype(dtype)
    return Model(spec=spec, params=params)


def forward(model: Model, batch: np.ndarray, taps: tuple[str, ...] = (),
            want_cache: bool = False):
    """Run the network; returns (logits, features-by-tap-name, cache-or-None).

    Requested tap features are returned post-ReLU, before the stage's
    down-sampling pool. The cache holds everything `backward` needs.
    """
    spec = model.spec
    if batch.ndim != 4 or batch.shape[1] != spec.in_channels:
        raise ConfigurationError(
            f"forward: batch shape {batch.shape} incompatible with "
            f"{spec.in_channels} input channels")
    tap_stage = {name: spec.resolve_tap(name) for name in taps}

    h = batch
    feats: dict[str, np.ndarray] = {}
    stage_caches = [] if want_cache else None
    n_stages = len(spec.stages)
    for si, (_, blocks) in enumerate(spec.stages):
        block_caches = [] if want_cache else None
        for bi in range(blocks):
            w = model.params[f"stage{si + 1}.conv{bi + 1}.weight"]
            b = model.params[f"stage{si + 1}.conv{bi + 1}.bias"]
            cols = T.im2col(h, 3, 1, 1) if want_cache else None
            pre = T.bias_add(T.conv2d(h, w, stride=1, padding=1, cols=cols), b)
            if want_cache:
                block_caches.append((h, cols, pre))
            h = T.relu(pre)
        for name, stage in tap_stage.items():
            if stage == si:
                feats[name] = h
        if want_cache:
            stage_caches.append(block_caches)
        if si < n_stages - 1:
            h = T.avg_pool(h, 2)

    pooled = T.global_avg_pool(h)
    logits = T.linear(pooled, model.params["fc.weight"], model.params["fc.bias"])
    cache = None
    if want_cache:
        cache = {"stages": stage_caches, "final_map": h, "pooled": pooled}
    return logits, feats, cache


def backward(model: Model, cache: dict, dlogits: np.ndarray,
             tap_grads: dict[str, np.ndarray] | None = None) -> dict[str, np.ndarray]:
    """Backprop through the cached forward; returns grads keyed like params.

    tap_grads are extra gradients injected at the named tap points (the
    distillation branches); they are added to the gradient flowing down
    from the classifier head.
    """
    spec = model.spec
    grads: dict[str, np.ndarray] = {}
    stage_grad: dict[int, np.ndarray] = {}
    for name, g in (tap_grads or {}).items():
        si = spec.resolve_tap(name)
        stage_grad[si] = stage_grad.get(si, 0) + g

    dpooled, dfc_w, dfc_b = T.linear_backward(
        cache["pooled"], model.params["fc.weight"], dlogits)
    grads["fc.weight"] = dfc_w
    grads["fc.bias"] = dfc_b
    fm = cache["final_map"]
    dh = T.global_avg_pool_backward(dpooled, fm.shape[2], fm.shape[3])

    n_stages = len(spec.stages)
    for si in range(n_stages - 1, -1, -1):
        if si < n_stages - 1:
            dh = T.avg_pool_backward(dh, 2)
        if si in stage_grad:
            dh = dh + stage_grad[si]
        block_caches = cache["stages"][si]
        for bi in range(len(block_caches) - 1, -1, -1):
            x_in, cols, pre = block_caches[bi]
            dpre = T.relu_backward(pre, dh)
            grads[f"stage{si + 1}.conv{bi + 1}.bias"] = T.bias_add_backward(4, dpre)
            w = model.params[f"stage{si + 1}.conv{bi + 1}.weight"]
            dh, dw = T.conv2d_backward(x_in, w, dpre, stride=1, padding=1, cols=cols)
            grads[f"stage{si + 1}.conv{bi + 1}.weight"] = dw
    return grads


def apply_sgd(model: Model, grads: dict[str, np.ndarray], lr: float,
              momentum: float = 0.0, weight_decay: float = 0.0) -> None:
    """SGD-with-momentum update on the model's own parameters.

    Weight decay applies to weights only, never biases. Raises on a frozen
    model: teachers never receive gradients.
    """
    if model.frozen:
        raise UsageError("apply_sgd: model is frozen")
    for name in model.param_names():
        if name not in grads:
            continue
        if name not in model.velocity:
            model.velocity[name] = np.zeros_like(model.params[name])
        wd = weight_decay if name.endswith(".weight") else 0.0
        T.sgd_step(model.params[name], grads[name], model.velocity[name],
                   lr, momentum, wd)
