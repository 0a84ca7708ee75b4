"""Alternating debiased pretraining, transfer finetuning and initialisation."""

from __future__ import annotations

import csv
import enum
import io
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from scenebias import autodiff as ad
from scenebias.data import DatasetSplit
from scenebias.errors import ConfigError, DimensionError, NumericError
from scenebias.model import DebiasModel, ModelConfig, action_head, entropy_of_logits, loss_adv, loss_ce, loss_ent, mean_ce, predict
from scenebias.rng import labeled_rng
from scenebias.teacher import PseudoMode, TeacherModel, pseudo_label


class Pairing(str, enum.Enum):
    PAIRED = "paired"
    INDEPENDENT = "independent"


@dataclass(frozen=True)
class TrainConfig:
    lr0: float = 0.05
    momentum: float = 0.9
    weight_decay: float = 1e-5
    lam: float = 0.5
    epochs: int = 30
    batch_size: int = 32
    plateau_patience: int = 3
    plateau_threshold: float = 1e-4
    lr_divisor: float = 10.0
    max_decays: int = 3
    use_adv: bool = True
    use_ent: bool = True
    pseudo_mode: PseudoMode = PseudoMode.SOFT
    masked_pairing: Pairing = Pairing.PAIRED
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "pseudo_mode", PseudoMode(self.pseudo_mode))
        object.__setattr__(self, "masked_pairing", Pairing(self.masked_pairing))
        if not self.lr0 > 0:
            raise ConfigError(f"lr0 must be positive, got {self.lr0}")
        if not 0 <= self.momentum < 1:
            raise ConfigError(f"momentum must lie in [0, 1), got {self.momentum}")
        if not self.lam >= 0:
            raise ConfigError(f"lambda must be >= 0, got {self.lam}")
        if self.plateau_patience < 1:
            raise ConfigError(f"plateau_patience must be >= 1, got {self.plateau_patience}")
        if self.weight_decay < 0:
            raise ConfigError(f"weight_decay must be >= 0, got {self.weight_decay}")
        if self.epochs < 0 or self.batch_size < 1:
            raise ConfigError("epochs must be >= 0 and batch_size >= 1")
        if not self.lr_divisor > 1:
            raise ConfigError(f"lr_divisor must exceed 1, got {self.lr_divisor}")

    def plain(self) -> "TrainConfig":
        """The same schedule with both debiasing losses switched off."""
        return TrainConfig(**{**asdict(self), "use_adv": False, "use_ent": False})


@dataclass
class EpochRecord:
    epoch: int
    l_ce: float
    l_adv: float | None
    l_ent: float | None
    val_ce: float
    lr: float
    seconds: float


@dataclass
class TrainLog:
    records: list[EpochRecord] = field(default_factory=list)
    plateau_threshold: float = 1e-4
    plateau_patience: int = 3
    best_epoch: int | None = None

    def to_csv(self, wall_time: bool = True) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["epoch", "l_ce", "l_adv", "l_ent", "val_ce", "lr", "seconds"])
        for r in self.records:
            writer.writerow([
                r.epoch, _fmt(r.l_ce), _fmt(r.l_adv), _fmt(r.l_ent), _fmt(r.val_ce), _fmt(r.lr),
                _fmt(r.seconds) if wall_time else "",
            ])
        return buf.getvalue()


def _fmt(x) -> str:
    return "" if x is None else repr(float(x))


def init_params(model_config: ModelConfig, seed: int) -> DebiasModel:
    """Glorot-uniform weights, zero biases."""
    return DebiasModel.initialize(model_config, seed)


def model_config_for(spec, **overrides) -> ModelConfig:
    return ModelConfig(frames=spec.frames, num_actions=spec.num_actions, num_scenes=spec.num_scenes, **overrides)


def _check_finite(value: float, what: str, epoch: int) -> float:
    if not np.isfinite(value):
        raise NumericError(f"{what} became {value} in epoch {epoch}")
    return value


def _fit(model: DebiasModel, train: DatasetSplit, val: DatasetSplit, config: TrainConfig,
         pseudo: np.ndarray | None, label: str, on_iteration=None) -> tuple[dict, TrainLog]:
    batch = train.batch
    masked = train.masked_batch if config.use_ent else None
    n = len(batch)
    lr = config.lr0
    decays = 0
    stale = 0
    plateau_best = np.inf
    best_val = np.inf
    best_state = model.state_dict()
    log = TrainLog(plateau_threshold=config.plateau_threshold, plateau_patience=config.plateau_patience)
    phase_a_params = model.theta_f + model.theta_a + (model.theta_s if config.use_adv else [])
    phase_b_params = model.theta_f + model.theta_a

    for epoch in range(config.epochs):
        start = time.perf_counter()
        perm = labeled_rng(config.seed, label, "epoch", epoch).permutation(n)
        perm_masked = perm
        if config.use_ent and config.masked_pairing == Pairing.INDEPENDENT:
            perm_masked = labeled_rng(config.seed, label, "masked-epoch", epoch).permutation(n)
        sums = {"ce": 0.0, "adv": 0.0, "ent": 0.0}
        steps = 0
        for i in range(0, n, config.batch_size):
            idx = perm[i:i + config.batch_size]
            b = batch.take(idx)
            with ad.Tape() as tape:
                feats = model.features(b.pixels)
                l_ce = loss_ce(model, b, feats)
                total = l_ce
                if config.use_adv:
                    l_adv = loss_adv(model, b, pseudo[idx], config.lam, feats)
                    total = ad.add(l_ce, l_adv)
            sums["ce"] += _check_finite(l_ce.item(), "l_ce", epoch)
            if config.use_adv:
                sums["adv"] += _check_finite(l_adv.item(), "l_adv", epoch)
            ad.backward(total, tape)
            if on_iteration is not None:
                on_iteration("A", model)
            ad.sgd_step(phase_a_params, lr, config.momentum, config.weight_decay)

            if config.use_ent:
                mb = masked.take(perm_masked[i:i + config.batch_size])
                with ad.Tape() as tape:
                    l_ent = loss_ent(model, mb)
                    objective = ad.neg(l_ent)
                sums["ent"] += _check_finite(l_ent.item(), "l_ent", epoch)
                ad.backward(objective, tape)
                if on_iteration is not None:
                    on_iteration("B", model)
                ad.sgd_step(phase_b_params, lr, config.momentum, config.weight_decay)
            steps += 1

        val_ce = _check_finite(mean_ce(model, val), "validation l_ce", epoch)
        log.records.append(EpochRecord(
            epoch=epoch,
            l_ce=sums["ce"] / steps,
            l_adv=sums["adv"] / steps if config.use_adv else None,
            l_ent=sums["ent"] / steps if config.use_ent else None,
            val_ce=val_ce,
            lr=lr,
            seconds=time.perf_counter() - start,
        ))
        if val_ce < best_val:
            best_val = val_ce
            best_state = model.state_dict()
            log.best_epoch = epoch
        if val_ce < plateau_best - config.plateau_threshold:
            plateau_best = val_ce
            stale = 0
        else:
            stale += 1
            if stale >= config.plateau_patience and decays < config.max_decays:
                decays += 1
                lr = config.lr0 / config.lr_divisor ** decays
                stale = 0
    model.load_state(best_state)
    return best_state, log


def pretrain(model: DebiasModel, train: DatasetSplit, val: DatasetSplit, teacher: TeacherModel | None,
             config: TrainConfig, on_iteration=None) -> tuple[dict, TrainLog]:
    """Alternating pretraining.

    Each iteration first descends ``L_CE + L_Adv`` on an original batch, where
    the scene head reads the features through a gradient reversal layer of
    strength ``lam`` (so the head minimises the scene loss while the extractor
    maximises it), then, if enabled, ascends the action entropy on masked clips
    with only the extractor and action head stepping. Returns the state with
    the lowest validation cross-entropy; ``model`` is left holding it too.
    """
    if config.use_adv and teacher is None:
        raise ConfigError("the scene adversarial loss needs a teacher for pseudo scene labels")
    if train.spec.num_actions != model.config.num_actions:
        raise DimensionError(f"model has {model.config.num_actions} actions, data has {train.spec.num_actions}")
    pseudo = None
    if config.use_adv:
        pseudo = pseudo_label(teacher, train.batch, config.pseudo_mode, num_scenes=model.config.num_scenes)
    return _fit(model, train, val, config, pseudo, "pretrain", on_iteration)


def finetune(checkpoint: dict, target_train: DatasetSplit, target_val: DatasetSplit,
             config: TrainConfig) -> tuple[dict, TrainLog]:
    """Transfer: keep the extractor, drop both heads, train a fresh action head with plain CE."""
    source = DebiasModel.from_state(checkpoint)
    spec = target_train.spec
    if source.config.frames != spec.frames:
        raise DimensionError(f"checkpoint extractor expects {source.config.frames} frames, target clips have {spec.frames}")
    model = fresh_head_model(source, spec.num_actions, config.seed)
    state, log = _fit(model, target_train, target_val, config.plain(), None, "finetune")
    return state, log


def fresh_head_model(source: DebiasModel, num_actions: int, seed: int) -> DebiasModel:
    cfg = ModelConfig(**{**asdict(source.config), "num_actions": num_actions, "scene_layers": 0})
    head = action_head(cfg.feature_dim, num_actions, labeled_rng(seed, "finetune-head"))
    theta_f = [ad.Parameter(p.data.copy(), p.name) for p in source.theta_f]
    return DebiasModel(cfg, theta_f, head, [])


def masked_entropy(model: DebiasModel, split: DatasetSplit) -> float:
    """Mean action entropy (nats) on the human-masked copies of ``split``."""
    return float(np.mean(entropy_of_logits(predict(model, split.masked_batch))))
