"""Feature extractor, action head, adversarial scene head and their losses.

The extractor sees each consecutive frame pair as a two-channel image
``[frame_t, frame_t - frame_{t-1}]``. The difference channel is what carries
motion; the appearance channel is what lets a model latch on to the
background. Per-pair conv maps are rectified, mean pooled, stacked over time
and projected to ``feature_dim``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from scenebias import autodiff as ad
from scenebias.autodiff import Parameter, Tensor
from scenebias.data import as_batch
from scenebias.errors import ContractError, DimensionError
from scenebias.rng import labeled_rng

KERNEL = 3


@dataclass(frozen=True)
class ModelConfig:
    frames: int = 8
    num_actions: int = 8
    num_scenes: int = 4
    conv_channels: int = 8
    feature_dim: int = 32
    scene_hidden: int = 64
    scene_layers: int = 4
    motion_gain: float = 8.0

    @property
    def pooled_dim(self) -> int:
        return (self.frames - 1) * self.conv_channels


def glorot(rng: np.random.Generator, shape, fan_in: int, fan_out: int) -> np.ndarray:
    a = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-a, a, size=shape)


def linear_params(rng, prefix: str, n_in: int, n_out: int) -> list[Parameter]:
    return [
        Parameter(glorot(rng, (n_in, n_out), n_in, n_out), f"{prefix}.weight"),
        Parameter(np.zeros(n_out), f"{prefix}.bias"),
    ]


class DebiasModel:
    """Parameter groups ``theta_f`` (extractor), ``theta_a`` (action) and ``theta_s`` (scene)."""

    def __init__(self, config: ModelConfig, theta_f, theta_a, theta_s):
        self.config = config
        self.theta_f: list[Parameter] = list(theta_f)
        self.theta_a: list[Parameter] = list(theta_a)
        self.theta_s: list[Parameter] = list(theta_s)

    @classmethod
    def initialize(cls, config: ModelConfig, seed: int) -> "DebiasModel":
        if config.frames < 2:
            raise DimensionError("the extractor needs at least two frames")
        rng = labeled_rng(seed, "init")
        c = config.conv_channels
        conv_fan_in, conv_fan_out = 2 * KERNEL * KERNEL, c * KERNEL * KERNEL
        theta_f = [
            Parameter(glorot(rng, (c, 2, KERNEL, KERNEL), conv_fan_in, conv_fan_out), "f.conv.weight"),
            Parameter(np.zeros(c), "f.conv.bias"),
            *linear_params(rng, "f.fc", config.pooled_dim, config.feature_dim),
        ]
        theta_a = action_head(config.feature_dim, config.num_actions, rng)
        widths = [config.feature_dim] + [config.scene_hidden] * (config.scene_layers - 1) + [config.num_scenes]
        theta_s = []
        for i in range(config.scene_layers):
            theta_s += linear_params(rng, f"s.{i}", widths[i], widths[i + 1])
        return cls(config, theta_f, theta_a, theta_s)

    @property
    def parameters(self) -> list[Parameter]:
        return self.theta_f + self.theta_a + self.theta_s

    def state_dict(self) -> dict[str, np.ndarray]:
        state = {p.name: p.data.copy() for p in self.parameters}
        state["config.motion_gain"] = np.array([self.config.motion_gain])
        return state

    @classmethod
    def from_state(cls, state: dict[str, np.ndarray]) -> "DebiasModel":
        try:
            conv = state["f.conv.weight"]
            fc = state["f.fc.weight"]
            act = state["a.weight"]
        except KeyError as exc:
            raise DimensionError(f"checkpoint lacks parameter {exc}") from exc
        layers = sorted({int(k.split(".")[1]) for k in state if k.startswith("s.")})
        c = conv.shape[0]
        if fc.shape[0] % c:
            raise DimensionError(f"fc input {fc.shape[0]} not a multiple of {c} conv channels")
        config = ModelConfig(
            frames=fc.shape[0] // c + 1,
            num_actions=act.shape[1],
            num_scenes=state[f"s.{layers[-1]}.weight"].shape[1] if layers else 1,
            conv_channels=c,
            feature_dim=fc.shape[1],
            scene_hidden=state["s.0.weight"].shape[1] if len(layers) > 1 else 0,
            scene_layers=len(layers),
            motion_gain=float(state["config.motion_gain"][0]) if "config.motion_gain" in state else ModelConfig.motion_gain,
        )

        def group(prefix):
            return [Parameter(v.copy(), k) for k, v in state.items() if k.startswith(prefix)]

        return cls(config, group("f."), group("a."), group("s."))

    def load_state(self, state: dict[str, np.ndarray]) -> None:
        for p in self.parameters:
            p.data = state[p.name].copy()

    def _param(self, name: str) -> Parameter:
        for p in self.parameters:
            if p.name == name:
                return p
        raise KeyError(name)

    # -- forward pieces -------------------------------------------------------

    def conv_maps(self, pixels: np.ndarray) -> Tensor:
        """Rectified pre-pool maps, ``[B, T-1, C, H-2, W-2]``."""
        pixels = np.asarray(pixels, dtype=np.float64)
        if pixels.ndim == 3:
            pixels = pixels[None]
        b, t, h, w = pixels.shape
        if t != self.config.frames:
            raise DimensionError(f"model expects {self.config.frames} frames, clip has {t}")
        pairs = np.stack([pixels[:, 1:], self.config.motion_gain * (pixels[:, 1:] - pixels[:, :-1])], axis=2)
        x = Tensor(pairs.reshape(b * (t - 1), 2, h, w))
        maps = ad.relu(ad.conv2d(x, self.theta_f[0], self.theta_f[1]))
        c = self.config.conv_channels
        return ad.reshape(maps, (b, t - 1, c, h - KERNEL + 1, w - KERNEL + 1))

    def features(self, pixels: np.ndarray) -> Tensor:
        maps = self.conv_maps(pixels)
        b = maps.shape[0]
        pooled = ad.reshape(ad.mean(maps, axis=(3, 4)), (b, self.config.pooled_dim))
        return ad.relu(ad.matmul(pooled, self.theta_f[2]) + self.theta_f[3])

    def action_logits(self, feats: Tensor) -> Tensor:
        return ad.matmul(feats, self.theta_a[0]) + self.theta_a[1]

    def scene_logits(self, feats: Tensor) -> Tensor:
        h = feats
        n = len(self.theta_s) // 2
        for i in range(n):
            h = ad.matmul(h, self.theta_s[2 * i]) + self.theta_s[2 * i + 1]
            if i < n - 1:
                h = ad.relu(h)
        return h


def action_head(feature_dim: int, num_actions: int, rng: np.random.Generator) -> list[Parameter]:
    return linear_params(rng, "a", feature_dim, num_actions)


def forward_features(model: DebiasModel, clip) -> np.ndarray:
    """Feature vector(s) of a clip or batch, without recording gradients."""
    pixels = clip.pixels if hasattr(clip, "pixels") else clip
    single = np.ndim(pixels) == 3
    with ad.no_grad():
        out = model.features(pixels).data
    return out[0] if single else out


# ---------------------------------------------------------------------------
# losses


def loss_ce(model: DebiasModel, batch, feats: Tensor | None = None) -> Tensor:
    """Mean negative log-likelihood of the true action."""
    batch = as_batch(batch)
    feats = model.features(batch.pixels) if feats is None else feats
    logp = ad.log_softmax(model.action_logits(feats))
    return ad.neg(ad.mean(ad.take(logp, batch.actions)))


def loss_adv(model: DebiasModel, batch, pseudo: np.ndarray, lam: float, feats: Tensor | None = None) -> Tensor:
    """Soft cross-entropy of the scene head against pseudo labels, behind gradient reversal."""
    batch = as_batch(batch)
    pseudo = np.asarray(pseudo, dtype=np.float64)
    m = model.config.num_scenes
    if pseudo.shape != (len(batch), m):
        raise DimensionError(f"pseudo labels must be [{len(batch)} x {m}], got {list(pseudo.shape)}")
    feats = model.features(batch.pixels) if feats is None else feats
    logp = ad.log_softmax(model.scene_logits(ad.grad_reverse(feats, lam)))
    return ad.neg(ad.mean(ad.sum(ad.mul(logp, pseudo), axis=1)))


def loss_ent(model: DebiasModel, masked_batch) -> Tensor:
    """Mean entropy of the action distribution on human-masked clips, in nats."""
    batch = as_batch(masked_batch)
    logp = ad.log_softmax(model.action_logits(model.features(batch.pixels)))
    # log-probabilities are finite, so q*log q -> 0 where q underflows
    return ad.neg(ad.mean(ad.sum(ad.mul(ad.exp(logp), logp), axis=1)))


def entropy_of_logits(logits: np.ndarray) -> np.ndarray:
    with ad.no_grad():
        logp = ad.log_softmax(Tensor(logits)).data
    return -(np.exp(logp) * logp).sum(axis=-1)


def predict(model: DebiasModel, batch, chunk: int = 256) -> np.ndarray:
    """Action logits for every clip, evaluated in chunks without a tape."""
    batch = as_batch(batch)
    out = []
    with ad.no_grad():
        for i in range(0, len(batch), chunk):
            out.append(model.action_logits(model.features(batch.pixels[i:i + chunk])).data)
    return np.concatenate(out)


def extract_features(model: DebiasModel, batch, chunk: int = 256) -> np.ndarray:
    batch = as_batch(batch)
    with ad.no_grad():
        return np.concatenate([model.features(batch.pixels[i:i + chunk]).data for i in range(0, len(batch), chunk)])


def accuracy(model: DebiasModel, batch) -> float:
    batch = as_batch(batch)
    return float(np.mean(predict(model, batch).argmax(axis=1) == batch.actions))


def mean_ce(model: DebiasModel, batch, chunk: int = 256) -> float:
    batch = as_batch(batch)
    logits = predict(model, batch, chunk)
    with ad.no_grad():
        logp = ad.log_softmax(Tensor(logits)).data
    return float(-np.mean(logp[np.arange(len(batch)), batch.actions]))


# ---------------------------------------------------------------------------
# class activation maps


def cam(model: DebiasModel, clip, class_index: int) -> np.ndarray:
    """Class activation map of ``class_index`` over the ``(H-2) x (W-2)`` conv grid.

    Each pre-pool map is weighted by the effective linear weight of its
    (time step, channel) slot, i.e. the product of the feature projection and
    the action head's column for the class. The result is min-max scaled to
    [0, 1]; a constant map becomes all zeros.
    """
    n = model.config.num_actions
    if not 0 <= class_index < n:
        raise ContractError(f"class index {class_index} outside [0, {n})")
    pixels = clip.pixels if hasattr(clip, "pixels") else np.asarray(clip)
    with ad.no_grad():
        maps = model.conv_maps(pixels).data[0]  # [T-1, C, h, w]
    fc = model._param("f.fc.weight").data
    head = model._param("a.weight").data
    weights = (fc @ head[:, class_index]).reshape(maps.shape[0], maps.shape[1])
    heat = np.tensordot(weights, maps, axes=([0, 1], [0, 1])) / maps.shape[0]
    return normalize_map(heat)


def normalize_map(heat: np.ndarray) -> np.ndarray:
    lo, hi = heat.min(), heat.max()
    if not hi > lo:
        return np.zeros_like(heat)
    return (heat - lo) / (hi - lo)


def cam_actor_contrast(model: DebiasModel, clip, class_index: int) -> float:
    """Mean CAM value on cells the actor visits minus the mean elsewhere."""
    heat = cam(model, clip, class_index)
    inner = clip.actor_mask[1:, 1:-1, 1:-1].any(axis=0)
    if inner.all() or not inner.any():
        return 0.0
    return float(heat[inner].mean() - heat[~inner].mean())
