"""INI experiment configuration with strict validation.

Unknown sections or keys are rejected outright so typos fail fast instead
of silently falling back to defaults. Values are parsed into typed section
objects; semantic checks (positive sizes, known modes, tap existence) run
at parse time where possible and at command start otherwise.
"""

from __future__ import annotations

import configparser
from dataclasses import dataclass, field

from .distill import DistillConfig, DistillLevel
from .errors import ConfigurationError
from .models import ArchSpec

_DEFAULT_TEACHER = "32x2,64x2,128x2"
_DEFAULT_STUDENT = "16x1,32x1,64x1"

_SCHEMA = {
    "dataset": {"source", "seed", "num_classes", "n_train", "n_test",
                "image_size", "train_path", "test_path", "normalize"},
    "teacher": {"stages"},
    "student": {"stages"},
    "train": {"epochs", "batch_size", "lr", "lr_drops", "lr_factor",
              "momentum", "weight_decay", "model_seed", "train_seed",
              "augment"},
    "distill": {"mode", "alpha", "beta", "tau", "rho", "levels",
                "teacher_checkpoint"},
    "vocab": {"k", "max_vectors", "seed", "taps", "teacher_checkpoint"},
    "eval": {"checkpoint", "arch", "split"},
    "retrieve": {"teacher_checkpoint", "vocab", "num_queries", "seed",
                 "split", "tau"},
    "ablate": {"sweep", "values"},
    "output": {"dir"},
}


def _parse_stages(text: str) -> tuple[tuple[int, int], ...]:
    """'32x2,64x2,128x2' -> ((32, 2), (64, 2), (128, 2))."""
    stages = []
    for part in text.split(","):
        part = part.strip()
        try:
            ch, blocks = part.split("x")
            stages.append((int(ch), int(blocks)))
        except ValueError:
            raise ConfigurationError(f"bad stage spec '{part}' (want CHxBLOCKS)")
    return tuple(stages)


def _parse_levels(text: str, tau: float) -> tuple[DistillLevel, ...]:
    """'stage3:stage3[:vocab.qvwv]' comma-separated."""
    levels = []
    for part in text.split(","):
        bits = [b.strip() for b in part.strip().split(":")]
        if len(bits) == 2:
            levels.append(DistillLevel(bits[0], bits[1], tau=tau))
        elif len(bits) == 3:
            levels.append(DistillLevel(bits[0], bits[1], tau=tau,
                                       vocab_path=bits[2]))
        else:
            raise ConfigurationError(
                f"bad level '{part}' (want teacher_tap:student_tap[:vocab])")
    return tuple(levels)


def _get(section, key, cast, default):
    if key not in section:
        return default
    raw = section[key]
    try:
        if cast is bool:
            low = raw.strip().lower()
            if low in ("true", "yes", "1", "on"):
                return True
            if low in ("false", "no", "0", "off"):
                return False
            raise ValueError(raw)
        return cast(raw)
    except ValueError:
        raise ConfigurationError(f"bad value for '{key}': '{raw}'")


@dataclass
class DatasetConfig:
    source: str = "synth"
    seed: int = 0
    num_classes: int = 8
    n_train: int = 8000
    n_test: int = 2000
    image_size: int = 32
    train_path: str | None = None
    test_path: str | None = None
    normalize: bool = True


@dataclass
class TrainSection:
    epochs: int = 60
    batch_size: int = 64
    lr: float = 0.05
    lr_drops: tuple[int, ...] = (40, 50)  # epochs where lr is scaled
    lr_factor: float = 0.1
    momentum: float = 0.9
    weight_decay: float = 5e-4
    model_seed: int = 0
    train_seed: int = 0
    augment: str = "none"

    def lr_at(self, epoch: int) -> float:
        lr = self.lr
        for e in self.lr_drops:
            if epoch >= e:
                lr *= self.lr_factor
        return lr


@dataclass
class VocabSection:
    k: int = 64
    max_vectors: int = 200000
    seed: int = 0
    taps: tuple[str, ...] = ("last_conv",)
    teacher_checkpoint: str | None = None


@dataclass
class EvalSection:
    checkpoint: str | None = None
    arch: str = "student"
    split: str = "test"


@dataclass
class RetrieveSection:
    teacher_checkpoint: str | None = None
    vocab: str | None = None
    num_queries: int = 100
    seed: int = 0
    split: str = "test"
    tau: float = 0.2


@dataclass
class AblateSection:
    sweep: str = "tau"
    values: tuple[str, ...] = ()


@dataclass
class ExperimentConfig:
    dataset: DatasetConfig = field(default_factory=DatasetConfig)
    teacher_stages: tuple = _parse_stages(_DEFAULT_TEACHER)
    student_stages: tuple = _parse_stages(_DEFAULT_STUDENT)
    train: TrainSection = field(default_factory=TrainSection)
    distill: DistillConfig = field(default_factory=DistillConfig)
    teacher_checkpoint: str | None = None
    vocab: VocabSection = field(default_factory=VocabSection)
    eval: EvalSection = field(default_factory=EvalSection)
    retrieve: RetrieveSection = field(default_factory=RetrieveSection)
    ablate: AblateSection = field(default_factory=AblateSection)
    out_dir: str = "runs/out"

    def teacher_spec(self) -> ArchSpec:
        return ArchSpec(stages=self.teacher_stages,
                        num_classes=self.dataset.num_classes)

    def student_spec(self) -> ArchSpec:
        return ArchSpec(stages=self.student_stages,
                        num_classes=self.dataset.num_classes)


def load_config(path) -> ExperimentConfig:
    parser = configparser.ConfigParser(interpolation=None)
    parser.optionxform = str
    read = parser.read(path)
    if not read:
        raise ConfigurationError(f"config file not found: {path}")

    for name in parser.sections():
        if name not in _SCHEMA:
            raise ConfigurationError(f"unknown config section [{name}]")
        for key in parser[name]:
            if key not in _SCHEMA[name]:
                raise ConfigurationError(
                    f"unknown key '{key}' in section [{name}]")

    cfg = ExperimentConfig()

    if "dataset" in parser:
        s = parser["dataset"]
        cfg.dataset = DatasetConfig(
            source=_get(s, "source", str, "synth"),
            seed=_get(s, "seed", int, 0),
            num_classes=_get(s, "num_classes", int, 8),
            n_train=_get(s, "n_train", int, 8000),
            n_test=_get(s, "n_test", int, 2000),
            image_size=_get(s, "image_size", int, 32),
            train_path=_get(s, "train_path", str, None),
            test_path=_get(s, "test_path", str, None),
            normalize=_get(s, "normalize", bool, True),
        )
        if cfg.dataset.source not in ("synth", "cifar"):
            raise ConfigurationError(
                f"dataset source must be synth or cifar, got '{cfg.dataset.source}'")
        if cfg.dataset.source == "cifar":
            if not cfg.dataset.train_path or not cfg.dataset.test_path:
                raise ConfigurationError("cifar source needs train_path and test_path")
            cfg.dataset.num_classes = 10

    if "teacher" in parser:
        cfg.teacher_stages = _parse_stages(
            _get(parser["teacher"], "stages", str, _DEFAULT_TEACHER))
    if "student" in parser:
        cfg.student_stages = _parse_stages(
            _get(parser["student"], "stages", str, _DEFAULT_STUDENT))

    if "train" in parser:
        s = parser["train"]
        drops = _get(s, "lr_drops", str, "40,50")
        cfg.train = TrainSection(
            epochs=_get(s, "epochs", int, 60),
            batch_size=_get(s, "batch_size", int, 64),
            lr=_get(s, "lr", float, 0.05),
            lr_drops=tuple(int(x) for x in drops.split(",") if x.strip()),
            lr_factor=_get(s, "lr_factor", float, 0.1),
            momentum=_get(s, "momentum", float, 0.9),
            weight_decay=_get(s, "weight_decay", float, 5e-4),
            model_seed=_get(s, "model_seed", int, 0),
            train_seed=_get(s, "train_seed", int, 0),
            augment=_get(s, "augment", str, "none"),
        )
        if cfg.train.epochs < 1 or cfg.train.batch_size < 1:
            raise ConfigurationError("epochs and batch_size must be >= 1")
        if cfg.train.lr <= 0:
            raise ConfigurationError("lr must be > 0")
        if cfg.train.augment not in ("none", "flip"):
            raise ConfigurationError(f"unknown augment '{cfg.train.augment}'")

    if "distill" in parser:
        s = parser["distill"]
        mode = _get(s, "mode", str, "none")
        tau = _get(s, "tau", float, 0.2)
        levels_text = _get(s, "levels", str, None)
        if levels_text:
            levels = _parse_levels(levels_text, tau)
        elif mode in ("quest", "feature_regression"):
            levels = (DistillLevel("last_conv", "last_conv", tau=tau),)
        else:
            levels = ()
        cfg.distill = DistillConfig(
            mode=mode,
            alpha=_get(s, "alpha", float, 1.0),
            beta=_get(s, "beta", float, 1.0),
            rho=_get(s, "rho", float, 4.0),
            levels=levels,
        )
        cfg.teacher_checkpoint = _get(s, "teacher_checkpoint", str, None)

    if "vocab" in parser:
        s = parser["vocab"]
        taps = _get(s, "taps", str, "last_conv")
        cfg.vocab = VocabSection(
            k=_get(s, "k", int, 64),
            max_vectors=_get(s, "max_vectors", int, 200000),
            seed=_get(s, "seed", int, 0),
            taps=tuple(t.strip() for t in taps.split(",") if t.strip()),
            teacher_checkpoint=_get(s, "teacher_checkpoint", str, None),
        )
        if cfg.vocab.k < 1:
            raise ConfigurationError("vocab k must be >= 1")

    if "eval" in parser:
        s = parser["eval"]
        cfg.eval = EvalSection(
            checkpoint=_get(s, "checkpoint", str, None),
            arch=_get(s, "arch", str, "student"),
            split=_get(s, "split", str, "test"),
        )
        if cfg.eval.arch not in ("teacher", "student"):
            raise ConfigurationError("eval arch must be teacher or student")
        if cfg.eval.split not in ("train", "test"):
            raise ConfigurationError("eval split must be train or test")

    if "retrieve" in parser:
        s = parser["retrieve"]
        cfg.retrieve = RetrieveSection(
            teacher_checkpoint=_get(s, "teacher_checkpoint", str, None),
            vocab=_get(s, "vocab", str, None),
            num_queries=_get(s, "num_queries", int, 100),
            seed=_get(s, "seed", int, 0),
            split=_get(s, "split", str, "test"),
            tau=_get(s, "tau", float, 0.2),
        )
        if cfg.retrieve.num_queries < 1:
            raise ConfigurationError("num_queries must be >= 1")
        if cfg.retrieve.tau < 0:
            raise ConfigurationError("retrieve tau must be >= 0")

    if "ablate" in parser:
        s = parser["ablate"]
        values = _get(s, "values", str, "")
        cfg.ablate = AblateSection(
            sweep=_get(s, "sweep", str, "tau"),
            values=tuple(v.strip() for v in values.split(",") if v.strip()),
        )
        if cfg.ablate.sweep not in ("tau", "k", "tap"):
            raise ConfigurationError(
                f"ablate sweep must be tau, k or tap, got '{cfg.ablate.sweep}'")
        if not cfg.ablate.values:
            raise ConfigurationError("ablate values must not be empty")

    if "output" in parser:
        cfg.out_dir = _get(parser["output"], "dir", str, "runs/out")

    return cfg
