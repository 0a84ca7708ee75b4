"""Scene teacher: a one-conv scene classifier that produces pseudo scene labels."""

from __future__ import annotations

import enum
import numpy as np

from scenebias import autodiff as ad
from scenebias import checkpoint
from scenebias.autodiff import Parameter, Tensor
from scenebias.data import DatasetSplit, as_batch
from scenebias.errors import DimensionError, FormatError, NumericError
from scenebias.model import KERNEL, glorot
from scenebias.rng import labeled_rng


class PseudoMode(str, enum.Enum):
    SOFT = "soft"
    HARD = "hard"


def standardize_frames(pixels: np.ndarray) -> np.ndarray:
    """Zero-mean, unit-variance frames; constant frames just get centred."""
    mu = pixels.mean(axis=(-2, -1), keepdims=True)
    sd = pixels.std(axis=(-2, -1), keepdims=True)
    return (pixels - mu) / np.where(sd > 0, sd, 1.0)


class TeacherModel:
    """conv(1 -> C, 3x3) per frame, relu, spatial mean pool, frame average, linear to M logits."""

    def __init__(self, conv_w: Parameter, conv_b: Parameter, head_w: Parameter, head_b: Parameter, digest: dict | None = None):
        self.conv_w, self.conv_b, self.head_w, self.head_b = conv_w, conv_b, head_w, head_b
        self.digest = dict(digest or {})

    @classmethod
    def initialize(cls, num_scenes: int, seed: int, channels: int = 8) -> "TeacherModel":
        rng = labeled_rng(seed, "teacher-init")
        k = KERNEL * KERNEL
        return cls(
            Parameter(glorot(rng, (channels, 1, KERNEL, KERNEL), k, channels * k), "teacher.conv.weight"),
            Parameter(np.zeros(channels), "teacher.conv.bias"),
            Parameter(glorot(rng, (channels, num_scenes), channels, num_scenes), "teacher.head.weight"),
            Parameter(np.zeros(num_scenes), "teacher.head.bias"),
        )

    @property
    def num_scenes(self) -> int:
        return self.head_w.shape[1]

    @property
    def parameters(self) -> list[Parameter]:
        return [self.conv_w, self.conv_b, self.head_w, self.head_b]

    def pooled(self, pixels: np.ndarray) -> Tensor:
        """Scene representation: per-channel activation averaged over space and time."""
        pixels = np.asarray(pixels, dtype=np.float64)
        b, t, h, w = pixels.shape
        maps = ad.relu(ad.conv2d(Tensor(standardize_frames(pixels).reshape(b * t, 1, h, w)), self.conv_w, self.conv_b))
        c = self.conv_w.shape[0]
        return ad.mean(ad.reshape(maps, (b, t, c, (h - KERNEL + 1) * (w - KERNEL + 1))), axis=(1, 3))

    def logits(self, pixels: np.ndarray) -> Tensor:
        return ad.matmul(self.pooled(pixels), self.head_w) + self.head_b

    def features(self, data, chunk: int = 256) -> np.ndarray:
        batch = as_batch(data)
        with ad.no_grad():
            return np.concatenate([self.pooled(batch.pixels[i:i + chunk]).data for i in range(0, len(batch), chunk)])

    def predict_logits(self, data, chunk: int = 256) -> np.ndarray:
        batch = as_batch(data)
        with ad.no_grad():
            return np.concatenate([self.logits(batch.pixels[i:i + chunk]).data for i in range(0, len(batch), chunk)])

    def accuracy(self, data) -> float:
        batch = as_batch(data)
        return float(np.mean(self.predict_logits(batch).argmax(axis=1) == batch.scenes))

    def state_dict(self) -> dict[str, np.ndarray]:
        state = {p.name: p.data.copy() for p in self.parameters}
        for key, value in sorted(self.digest.items()):
            state[f"digest.{key}"] = np.array([float(value)])
        return state

    @classmethod
    def from_state(cls, state: dict[str, np.ndarray]) -> "TeacherModel":
        try:
            params = [Parameter(state[name].copy(), name) for name in
                      ("teacher.conv.weight", "teacher.conv.bias", "teacher.head.weight", "teacher.head.bias")]
        except KeyError as exc:
            raise DimensionError(f"not a teacher checkpoint: missing {exc}") from exc
        digest = {k[len("digest."):]: float(v.reshape(-1)[0]) for k, v in state.items() if k.startswith("digest.")}
        return cls(*params, digest=digest)

    def save(self, path) -> None:
        checkpoint.save(path, self.state_dict())

    @classmethod
    def load(cls, path) -> "TeacherModel":
        state = checkpoint.load(path)
        try:
            return cls.from_state(state)
        except DimensionError as exc:
            raise FormatError(path, 0, str(exc)) from exc


def train_teacher(data: DatasetSplit, epochs: int = 10, lr: float = 0.05, seed: int = 0,
                  val: DatasetSplit | None = None, batch_size: int = 32, channels: int = 8) -> TeacherModel:
    """Fit a teacher on scene labels only.

    Without ``val`` a seeded 20% of ``data`` is held out; the held-out scene
    accuracy lands in ``teacher.digest['val_accuracy']``.
    """
    batch = as_batch(data)
    if val is None:
        order = labeled_rng(seed, "teacher-split").permutation(len(batch))
        cut = max(1, len(batch) // 5)
        held, batch = batch.take(order[:cut]), batch.take(order[cut:])
    else:
        held = as_batch(val)
    teacher = TeacherModel.initialize(data.spec.num_scenes, seed, channels)
    for epoch in range(epochs):
        perm = labeled_rng(seed, "teacher-epoch", epoch).permutation(len(batch))
        for i in range(0, len(batch), batch_size):
            b = batch.take(perm[i:i + batch_size])
            with ad.Tape() as tape:
                logp = ad.log_softmax(teacher.logits(b.pixels))
                loss = ad.neg(ad.mean(ad.take(logp, b.scenes)))
            if not np.isfinite(loss.item()):
                raise NumericError(f"teacher loss became {loss.item()} in epoch {epoch}")
            ad.backward(loss, tape)
            ad.sgd_step(teacher.parameters, lr, 0.9, 0.0)
    teacher.digest = {"val_accuracy": teacher.accuracy(held), "epochs": epochs, "lr": lr}
    return teacher


def pseudo_label(teacher: TeacherModel, clip, mode: PseudoMode = PseudoMode.SOFT, num_scenes: int | None = None) -> np.ndarray:
    """Pseudo scene distribution(s) for a clip or a batch of clips."""
    if num_scenes is not None and num_scenes != teacher.num_scenes:
        raise DimensionError(f"teacher predicts {teacher.num_scenes} scenes, data has {num_scenes}")
    single = hasattr(clip, "actor_mask") and np.ndim(clip.pixels) == 3
    logits = teacher.predict_logits(clip)
    mode = PseudoMode(mode)
    if mode == PseudoMode.HARD:
        out = np.zeros_like(logits)
        out[np.arange(len(logits)), logits.argmax(axis=1)] = 1.0
    else:
        with ad.no_grad():
            out = np.exp(ad.log_softmax(Tensor(logits)).data)
    return out[0] if single else out
