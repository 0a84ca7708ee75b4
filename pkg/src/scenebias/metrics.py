"""Linear probes, the scene representation bias, transfer evaluation and the bias sweep."""

from __future__ import annotations

import csv
import enum
import io
import math
import warnings
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from scenebias.data import ActionFamily, DatasetSpec, DatasetSplit, Role, as_batch, generate_dataset
from scenebias.errors import ConfigError, DimensionError
from scenebias.model import DebiasModel, accuracy, extract_features
from scenebias.rng import derive_seed, labeled_rng
from scenebias.teacher import TeacherModel, train_teacher
from scenebias.training import TrainConfig, finetune, init_params, model_config_for, pretrain

PROBE_LR = 0.1
PROBE_ITERS = 500
PROBE_HOLDOUT = 0.2


class DegenerateLabelError(ValueError):
    """A probe was asked to separate fewer than two classes."""


class UndefinedCorrelationError(ValueError):
    """Pearson correlation of a constant series."""


class Target(str, enum.Enum):
    ACTION = "action"
    SCENE = "scene"


class TransferMode(str, enum.Enum):
    FINETUNE = "finetune"
    FROZEN_PROBE = "frozen_probe"


@dataclass(frozen=True)
class ProbeResult:
    accuracy: float
    chance: float
    target: Target = Target.ACTION
    feature_source: str = ""


def probe_split(n: int, seed: int) -> tuple[np.ndarray, np.ndarray]:
    """Seeded shuffle, then the first 80% train and the rest is held out."""
    order = labeled_rng(seed, "probe-split").permutation(n)
    n_test = max(1, int(round(PROBE_HOLDOUT * n)))
    return order[n_test:], order[:n_test]


def linear_probe(features, labels, classes: int, seed: int = 0, target: Target = Target.ACTION,
                 feature_source: str = "") -> ProbeResult:
    """Multinomial logistic regression on frozen features, full-batch gradient descent.

    Features are z-scored with the training-portion statistics. Accuracy is
    measured on the held-out 20%.
    """
    x = np.asarray(features, dtype=np.float64)
    y = np.asarray(labels, dtype=np.int64)
    if x.ndim != 2 or x.shape[0] == 0:
        raise DimensionError(f"features must be a non-empty [n x F] array, got shape {list(x.shape)}")
    if y.shape != (x.shape[0],):
        raise DimensionError(f"{x.shape[0]} feature rows but {y.shape} labels")
    if np.unique(y).size < 2:
        raise DegenerateLabelError("linear probe needs at least two distinct labels")
    if y.min() < 0 or y.max() >= classes:
        raise DimensionError(f"labels outside [0, {classes})")
    train, test = probe_split(len(y), seed)
    mu = x[train].mean(axis=0)
    sd = x[train].std(axis=0)
    z = (x - mu) / np.where(sd > 1e-12, sd, 1.0)
    xt, yt = z[train], y[train]
    onehot = np.eye(classes)[yt]
    w = np.zeros((x.shape[1], classes))
    b = np.zeros(classes)
    for _ in range(PROBE_ITERS):
        logits = xt @ w + b
        logits -= logits.max(axis=1, keepdims=True)
        p = np.exp(logits)
        p /= p.sum(axis=1, keepdims=True)
        g = (p - onehot) / len(yt)
        w -= PROBE_LR * (xt.T @ g)
        b -= PROBE_LR * g.sum(axis=0)
    pred = (z[test] @ w + b).argmax(axis=1)
    return ProbeResult(float(np.mean(pred == y[test])), 1.0 / classes, Target(target), feature_source)


def bias_from_accuracy(acc: float, chance: float) -> float:
    """``ln(acc / chance)`` with the accuracy floored at chance."""
    return math.log(max(acc, chance) / chance)


def scene_bias(dataset: DatasetSplit, scene_rep: TeacherModel, seed: int = 0) -> float:
    """How well scene-only features predict the action, as a log ratio over chance."""
    n = dataset.spec.num_actions
    result = linear_probe(scene_rep.features(dataset), dataset.batch.actions, n, seed, Target.ACTION, "teacher")
    return bias_from_accuracy(result.accuracy, result.chance)


def probe_model(model: DebiasModel, data, target: Target, seed: int = 0, source: str = "") -> ProbeResult:
    """Linear probe on the frozen extractor output."""
    batch = as_batch(data)
    target = Target(target)
    if target == Target.SCENE:
        labels, classes = batch.scenes, model.config.num_scenes
    else:
        labels, classes = batch.actions, model.config.num_actions
    if isinstance(data, DatasetSplit):
        classes = data.spec.num_scenes if target == Target.SCENE else data.spec.num_actions
    return linear_probe(extract_features(model, batch), labels, classes, seed, target, source)


# ---------------------------------------------------------------------------
# transfer


def target_splits(target_spec: DatasetSpec) -> tuple[DatasetSplit, DatasetSplit, DatasetSplit]:
    """Train split of ``count`` clips plus val/test splits of a quarter of that size."""
    small = replace(target_spec, count=max(1, target_spec.count // 4))
    return (generate_dataset(target_spec, Role.TRAIN), generate_dataset(small, Role.VAL),
            generate_dataset(small, Role.TEST))


def transfer_eval(checkpoint: dict, target_spec: DatasetSpec, mode: TransferMode, config: TrainConfig,
                  source_family: ActionFamily = ActionFamily.CARDINAL, splits=None) -> float:
    """Accuracy on novel target classes after finetuning or under a frozen linear probe."""
    mode = TransferMode(mode)
    if target_spec.action_family == source_family:
        warnings.warn(f"target uses the source action family {source_family.name}; classes are not novel", stacklevel=2)
    train, val, test = splits if splits is not None else target_splits(target_spec)
    if mode == TransferMode.FROZEN_PROBE:
        model = DebiasModel.from_state(checkpoint)
        return probe_model(model, train, Target.ACTION, config.seed, "checkpoint").accuracy
    state, _ = finetune(checkpoint, train, val, config)
    return accuracy(DebiasModel.from_state(state), test)


def pearson(x: Sequence[float], y: Sequence[float]) -> tuple[float, float]:
    """Sample correlation and its t statistic ``rho * sqrt((n-2) / (1-rho^2))``."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape or x.ndim != 1:
        raise DimensionError(f"pearson needs two equal-length series, got {x.shape} and {y.shape}")
    if x.size < 3:
        raise DimensionError(f"pearson needs at least 3 points, got {x.size}")
    dx, dy = x - x.mean(), y - y.mean()
    sxx, syy = float(dx @ dx), float(dy @ dy)
    if sxx == 0 or syy == 0:
        raise UndefinedCorrelationError("correlation is undefined for a constant series")
    rho = float(dx @ dy) / math.sqrt(sxx * syy)
    rho = max(-1.0, min(1.0, rho))
    n = x.size
    t = math.copysign(math.inf, rho) if abs(rho) == 1.0 else rho * math.sqrt((n - 2) / (1 - rho * rho))
    return rho, t


# ---------------------------------------------------------------------------
# bias sweep


@dataclass
class BiasRow:
    dataset: str
    beta: float
    b_scene: float
    acc_baseline: float
    acc_debiased: float
    rel_improvement: float


@dataclass
class BiasReport:
    rows: list[BiasRow]
    rho: float
    t_statistic: float
    n: int
    warnings: list[str] = field(default_factory=list)

    COLUMNS = ("dataset", "beta", "b_scene", "acc_baseline", "acc_debiased", "rel_improvement")

    @classmethod
    def from_rows(cls, rows: list[BiasRow], notes: Sequence[str] = ()) -> "BiasReport":
        notes = list(notes)
        try:
            rho, t = pearson([r.b_scene for r in rows], [r.rel_improvement for r in rows])
        except UndefinedCorrelationError as exc:
            rho = t = math.nan
            notes.append(str(exc))
        return cls(rows, rho, t, len(rows), notes)

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(self.COLUMNS)
        for r in self.rows:
            writer.writerow([r.dataset, repr(r.beta), repr(r.b_scene), repr(r.acc_baseline),
                             repr(r.acc_debiased), repr(r.rel_improvement)])
        buf.write(f"# rho={self.rho!r} t={self.t_statistic!r} n={self.n}\n")
        return buf.getvalue()

    def to_gnuplot(self) -> str:
        lines = ["# b_scene rel_improvement"]
        lines += [f"{r.b_scene!r} {r.rel_improvement!r}" for r in self.rows]
        return "\n".join(lines) + "\n"

    def write(self, csv_path, gnuplot_path=None) -> None:
        Path(csv_path).write_text(self.to_csv())
        if gnuplot_path is not None:
            Path(gnuplot_path).write_text(self.to_gnuplot())

    @classmethod
    def read_csv(cls, path) -> "BiasReport":
        text = Path(path).read_text()
        body = [line for line in text.splitlines() if not line.startswith("#")]
        rows = []
        for rec in csv.DictReader(body):
            rows.append(BiasRow(rec["dataset"], float(rec["beta"]), float(rec["b_scene"]), float(rec["acc_baseline"]),
                                float(rec["acc_debiased"]), float(rec["rel_improvement"])))
        footer = [line for line in text.splitlines() if line.startswith("# rho=")]
        if footer:
            fields = dict(item.split("=") for item in footer[0][2:].split())
            return cls(rows, float(fields["rho"]), float(fields["t"]), int(fields["n"]))
        return cls.from_rows(rows)


def relative_improvement(baseline: float, debiased: float) -> float:
    return (debiased - baseline) / baseline if baseline > 0 else math.nan


def aggregate_reports(reports: Sequence[BiasReport]) -> BiasReport:
    """Per-cell median across seeds; the correlation is recomputed on the medians."""
    if not reports:
        raise ConfigError("nothing to aggregate")
    rows = []
    for cells in zip(*(r.rows for r in reports)):
        med = {col: float(np.median([getattr(c, col) for c in cells])) for col in BiasReport.COLUMNS[1:]}
        rows.append(BiasRow(cells[0].dataset, **med))
    return BiasReport.from_rows(rows)


@dataclass(frozen=True)
class SweepConfig:
    train: TrainConfig = TrainConfig()
    mode: TransferMode = TransferMode.FROZEN_PROBE
    target_count: int = 2000
    teacher_epochs: int = 10
    teacher_lr: float = 0.05
    seed: int = 0


@dataclass
class PretrainedPair:
    baseline: dict
    debiased: dict
    teacher: TeacherModel


def pretrain_pair(source_spec: DatasetSpec, config: SweepConfig) -> PretrainedPair:
    """One plain and one debiased model on the same source data and initialisation."""
    seed = config.seed
    spec = replace(source_spec, seed=derive_seed(seed, "source-data"))
    train = generate_dataset(spec, Role.TRAIN)
    val = generate_dataset(replace(spec, count=max(1, spec.count // 4)), Role.VAL)
    teacher = train_teacher(train, config.teacher_epochs, config.teacher_lr, derive_seed(seed, "source-teacher"))
    mcfg = model_config_for(spec)
    tcfg = replace(config.train, seed=derive_seed(seed, "pretrain"))
    baseline, _ = pretrain(init_params(mcfg, derive_seed(seed, "init")), train, val, None, tcfg.plain())
    debiased, _ = pretrain(init_params(mcfg, derive_seed(seed, "init")), train, val, teacher,
                           replace(tcfg, use_adv=True, use_ent=True))
    return PretrainedPair(baseline, debiased, teacher)


def bias_sweep(source_spec: DatasetSpec, target_betas: Sequence[float], config: SweepConfig = SweepConfig(),
               pair: PretrainedPair | None = None) -> BiasReport:
    """Relative transfer gain of debiasing against the target datasets' scene bias."""
    if len(target_betas) < 3:
        raise ConfigError(f"a correlation needs at least 3 target betas, got {len(target_betas)}")
    pair = pair if pair is not None else pretrain_pair(source_spec, config)
    seed = config.seed
    ft_config = replace(config.train, seed=derive_seed(seed, "finetune"))
    rows = []
    notes = []
    for i, beta in enumerate(target_betas):
        target = replace(source_spec, beta=float(beta), count=config.target_count,
                         action_family=ActionFamily.DIAGONAL, seed=derive_seed(seed, "target", i))
        splits = target_splits(target)
        teacher = train_teacher(splits[0], config.teacher_epochs, config.teacher_lr, derive_seed(seed, "target-teacher", i))
        b_scene = scene_bias(splits[0], teacher, derive_seed(seed, "bias-probe", i))
        with warnings.catch_warnings(record=True) as caught:
            warnings.simplefilter("always")
            acc_b = transfer_eval(pair.baseline, target, config.mode, ft_config, source_spec.action_family, splits)
            acc_d = transfer_eval(pair.debiased, target, config.mode, ft_config, source_spec.action_family, splits)
        notes += [str(w.message) for w in caught]
        rows.append(BiasRow(f"target-{i}", float(beta), b_scene, acc_b, acc_d, relative_improvement(acc_b, acc_d)))
    return BiasReport.from_rows(rows, notes)
