"""Universal immunization: cross-attention losses, UAP trainers and test-time immunization.

A universal perturbation ``delta`` is trained once against a frozen toy
diffusion bundle and then added to any image. The trainers follow the
per-sample sign-gradient loop: for each training image the loss gradient is
accumulated over a fixed set of diffusion timesteps, then ``delta`` takes one
step of size ``step_size`` against the sign of that gradient and is clipped
back into the L-infinity ball of radius ``epsilon``.
"""

from __future__ import annotations

import enum
import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from . import tensor as T
from .data import GaussianPrior, JigsawConfig, JigsawPrior, class_prompt, render_shape
from .diffusion import CrossAttnTrace, ToyLdmBundle
from .tensor import GradientTape, Tensor
from .uit1 import load_tensor, save_tensor
from .validation import check_images

logger = logging.getLogger(__name__)


class LossKind(str, enum.Enum):
    INJ = "inj"
    SUP = "sup"
    INJ_SUP = "inj+sup"
    MAP_INJ = "map-inj"
    MAP_SUP = "map-sup"
    MAP_INJ_SUP = "map-inj+sup"
    ENCODER = "encoder"
    EMBEDDING = "embedding"

    @property
    def uses_target(self) -> bool:
        return self in (LossKind.INJ, LossKind.INJ_SUP, LossKind.MAP_INJ, LossKind.MAP_INJ_SUP)

    @property
    def uses_source(self) -> bool:
        return self in (LossKind.SUP, LossKind.INJ_SUP, LossKind.MAP_SUP, LossKind.MAP_INJ_SUP, LossKind.EMBEDDING)

    @property
    def on_maps(self) -> bool:
        return self.value.startswith("map")


def budget_bound(epsilon: float, dtype=np.float32) -> np.floating:
    """Largest value of ``dtype`` not exceeding ``epsilon``."""
    e = np.dtype(dtype).type(epsilon)
    while float(e) > epsilon:
        e = np.nextafter(e, dtype(0))
    return e


@dataclass
class Uap:
    """A universal perturbation in pixel units plus its training metadata."""

    delta: np.ndarray
    epsilon: float
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        self.delta = np.asarray(self.delta, dtype=np.float32)
        if self.delta.ndim != 3 or self.delta.shape[0] != 3:
            raise ValueError(f"delta must have shape (3, H, W), got {self.delta.shape}")
        if not 0.0 <= self.epsilon <= 1.0:
            raise ValueError(f"epsilon must lie in [0, 1], got {self.epsilon}")
        if self.linf > self.epsilon:
            raise ValueError(f"delta has L-inf norm {self.linf} > epsilon {self.epsilon}")

    @property
    def linf(self) -> float:
        return float(np.abs(self.delta).max()) if self.delta.size else 0.0

    @classmethod
    def zeros(cls, shape=(3, 32, 32), epsilon: float = 10 / 255) -> "Uap":
        return cls(np.zeros(shape, dtype=np.float32), epsilon, {"loss_kind": "zero"})

    def save(self, path) -> Path:
        """Write ``path`` (UIT1 tensor) and a sidecar ``<path>.json`` manifest."""
        path = Path(path)
        save_tensor(path, self.delta)
        meta = dict(self.metadata, epsilon=self.epsilon, shape=list(self.delta.shape))
        sidecar = path.with_name(path.name + ".json")
        sidecar.write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n", encoding="utf-8")
        return sidecar

    @classmethod
    def load(cls, path) -> "Uap":
        path = Path(path)
        delta = load_tensor(path)
        sidecar = path.with_name(path.name + ".json")
        meta = json.loads(sidecar.read_text(encoding="utf-8")) if sidecar.exists() else {}
        eps = float(meta.pop("epsilon", np.abs(delta).max()))
        meta.pop("shape", None)
        return cls(delta, eps, meta)


@dataclass
class UapTrainConfig:
    epsilon: float = 10 / 255
    step_size: float = 1 / 255
    timesteps: tuple[int, ...] = (5, 10, 15, 20, 25)
    epochs: int = 20
    loss_kind: LossKind = LossKind.INJ_SUP
    sup_weight: float = 1.0
    noise_space: str = "latent"
    batch_size: int = 1
    n_prior_samples: int = 50
    seed: int = 0
    check_budget: bool = False

    def __post_init__(self):
        self.loss_kind = LossKind(self.loss_kind)
        self.timesteps = tuple(int(k) for k in self.timesteps)

    def validate(self, k_max: int | None = None) -> None:
        if not 0.0 < self.epsilon <= 1.0:
            raise ValueError(f"epsilon must lie in (0, 1], got {self.epsilon}")
        if not 0.0 < self.step_size <= self.epsilon:
            raise ValueError(f"step size must satisfy 0 < s <= epsilon, got {self.step_size}")
        if not self.timesteps:
            raise ValueError("timestep set must be nonempty")
        if min(self.timesteps) < 1 or (k_max is not None and max(self.timesteps) > k_max):
            raise ValueError(f"timesteps {self.timesteps} outside [1, {k_max}]")
        if self.epochs < 0:
            raise ValueError(f"epochs must be >= 0, got {self.epochs}")
        if self.noise_space not in ("latent", "pixel"):
            raise ValueError(f"noise_space must be 'latent' or 'pixel', got {self.noise_space!r}")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")

    def as_dict(self) -> dict:
        d = asdict(self)
        d["loss_kind"] = self.loss_kind.value
        d["timesteps"] = list(self.timesteps)
        return d


DEFAULT_TARGET = ("black", "triangle", "white")


def default_target(size: int = 32) -> tuple[np.ndarray, str]:
    """Built-in target: a black triangle on a white background and its prompt."""
    color, shape, background = DEFAULT_TARGET
    image = render_shape(color, shape, background, size, np.random.default_rng(5))
    return image, class_prompt(color, shape)


# ---------------------------------------------------------------- losses


def _dist(a: Tensor, b: Tensor) -> Tensor:
    # per-item mean squared difference, summed over the batch axis
    return T.scale(T.mse(a, b), a.shape[0])


def _check_layers(tr_a: CrossAttnTrace, tr_b: CrossAttnTrace) -> None:
    if len(tr_a) != len(tr_b):
        raise ValueError(f"trace layer counts differ: {len(tr_a)} vs {len(tr_b)}")
    if len(tr_a) == 0:
        raise ValueError("empty trace")


def _layer_sum(tr_a: CrossAttnTrace, tr_b: CrossAttnTrace, field_name: str) -> Tensor:
    _check_layers(tr_a, tr_b)
    terms = [_dist(getattr(la, field_name), getattr(lb, field_name)) for la, lb in zip(tr_a.layers, tr_b.layers)]
    total = terms[0]
    for t in terms[1:]:
        total = T.add(total, t)
    return total


def loss_inj(trace_adv: CrossAttnTrace, trace_tar: CrossAttnTrace) -> Tensor:
    """Sum over layers of the mean squared cross-attention output difference."""
    return _layer_sum(trace_adv, trace_tar, "ca")


def loss_sup(trace_adv: CrossAttnTrace, trace_clean: CrossAttnTrace) -> Tensor:
    """Negated cross-attention output distance to the clean image (never positive)."""
    return T.scale(_layer_sum(trace_adv, trace_clean, "ca"), -1.0)


def loss_map_inj(trace_adv: CrossAttnTrace, trace_tar: CrossAttnTrace) -> Tensor:
    return _layer_sum(trace_adv, trace_tar, "attn")


def loss_map_sup(trace_adv: CrossAttnTrace, trace_clean: CrossAttnTrace) -> Tensor:
    return T.scale(_layer_sum(trace_adv, trace_clean, "attn"), -1.0)


def loss_embedding_baseline(trace_adv: CrossAttnTrace, trace_clean: CrossAttnTrace) -> Tensor:
    """Negated distance of query projections and self-path activations."""
    q = _layer_sum(trace_adv, trace_clean, "query")
    g = _layer_sum(trace_adv, trace_clean, "self_path")
    return T.scale(T.add(q, g), -1.0)


def loss_encoder_baseline(x_adv, bundle: ToyLdmBundle, black_latent: np.ndarray | None = None) -> Tensor:
    """Distance between the latents of ``x_adv`` and of an all-black image."""
    x_adv = x_adv if isinstance(x_adv, Tensor) else Tensor(np.asarray(x_adv), dtype=bundle.dtype)
    if x_adv.ndim == 3:
        x_adv = T.reshape(x_adv, (1,) + x_adv.shape)
    if black_latent is None:
        black_latent = bundle.encode(np.zeros((1,) + x_adv.shape[1:], dtype=bundle.dtype)).data
    z = bundle.encode(x_adv)
    ref = np.broadcast_to(black_latent, z.shape)
    return _dist(z, Tensor(ref, dtype=z.dtype))


# ---------------------------------------------------------------- training


class _LossContext:
    """Precomputed quantities shared by every training step."""

    def __init__(self, bundle: ToyLdmBundle, x_tar, t_tar: str, config: UapTrainConfig):
        self.bundle = bundle
        self.config = config
        self.kind = config.loss_kind
        self.ks = np.asarray(config.timesteps, dtype=np.int64)
        self.n_layers = bundle.denoiser.n_blocks
        self.tar_emb = bundle.embed(t_tar)
        if self.kind.uses_target:
            x_tar = check_images(x_tar, allow_single=True)
            if len(x_tar) != 1:
                raise ValueError("exactly one target image is required")
            self.x_tar = x_tar.astype(bundle.dtype)
            self.z_tar = bundle.encode(self.x_tar).data
        if self.kind is LossKind.ENCODER:
            shape = (1, 3, bundle.config.image_size, bundle.config.image_size)
            self.black_latent = bundle.encode(np.zeros(shape, dtype=bundle.dtype)).data

    def _noised_latents(self, x_adv: Tensor, x: np.ndarray | None, rng: np.random.Generator):
        """Latents of adversarial, clean and target inputs at every timestep."""
        b = self.bundle
        sched = b.schedule
        nb = x_adv.shape[0]
        ks = np.tile(self.ks, nb)
        nk = len(ks)
        if self.config.noise_space == "latent":
            eps = rng.standard_normal((nk,) + b.latent_shape).astype(b.dtype)
            z_adv = sched.add_noise(T.repeat_batch(b.encode(x_adv), len(self.ks)), ks, eps)
            z_clean = z_tar = None
            if x is not None and self.kind.uses_source:
                z_clean = sched.add_noise(np.repeat(b.encode(x).data, len(self.ks), axis=0), ks, eps)
            if self.kind.uses_target:
                z_tar = sched.add_noise(np.repeat(self.z_tar, nk, axis=0), ks, eps)
        else:
            eps = rng.standard_normal((nk,) + x_adv.shape[1:]).astype(b.dtype)
            z_adv = b.encode(sched.add_noise(T.repeat_batch(x_adv, len(self.ks)), ks, eps))
            z_clean = z_tar = None
            if x is not None and self.kind.uses_source:
                z_clean = b.encode(sched.add_noise(np.repeat(x, len(self.ks), axis=0), ks, eps)).data
            if self.kind.uses_target:
                z_tar = b.encode(sched.add_noise(np.repeat(self.x_tar, nk, axis=0), ks, eps)).data
        return ks, z_adv, z_clean, z_tar

    def loss(self, delta: Tensor, x: np.ndarray, src_emb: np.ndarray | None, rng: np.random.Generator) -> Tensor:
        """Loss for a batch ``x`` of clean images (``src_emb`` per image, or None)."""
        b = self.bundle
        nb = x.shape[0]
        d4 = T.repeat_batch(T.reshape(delta, (1,) + delta.shape), nb)
        x_adv = T.clamp(T.add(Tensor(x, dtype=delta.dtype), d4), 0.0, 1.0)
        if self.kind is LossKind.ENCODER:
            return loss_encoder_baseline(x_adv, b, self.black_latent)
        ks, z_adv, z_clean, z_tar = self._noised_latents(x_adv, x, rng)
        total = None
        if self.kind.uses_target:
            _, tr_adv = b.forward_with_trace(z_adv, ks, self.tar_emb, n_layers=self.n_layers)
            _, tr_tar = b.forward_with_trace(z_tar, ks, self.tar_emb, n_layers=self.n_layers)
            total = loss_map_inj(tr_adv, tr_tar) if self.kind.on_maps else loss_inj(tr_adv, tr_tar)
        if self.kind.uses_source:
            y = np.repeat(src_emb, len(self.ks), axis=0)
            _, tr_adv_s = b.forward_with_trace(z_adv, ks, y, n_layers=self.n_layers)
            _, tr_clean = b.forward_with_trace(z_clean, ks, y, n_layers=self.n_layers)
            if self.kind is LossKind.EMBEDDING:
                term = loss_embedding_baseline(tr_adv_s, tr_clean)
            elif self.kind.on_maps:
                term = loss_map_sup(tr_adv_s, tr_clean)
            else:
                term = loss_sup(tr_adv_s, tr_clean)
            if self.config.sup_weight != 1.0:
                term = T.scale(term, self.config.sup_weight)
            total = term if total is None else T.add(total, term)
        return total


def _init_delta(shape, config: UapTrainConfig) -> np.ndarray:
    rng = np.random.default_rng([config.seed, 0x5EED])
    bound = budget_bound(config.epsilon)
    return np.clip(rng.uniform(-config.epsilon, config.epsilon, shape), -bound, bound).astype(np.float32)


def _sign_step(delta: np.ndarray, grad: np.ndarray, config: UapTrainConfig) -> np.ndarray:
    bound = budget_bound(config.epsilon)
    out = delta - np.float32(config.step_size) * np.sign(grad).astype(np.float32)
    return np.clip(out, -bound, bound).astype(np.float32)


def _run_loop(ctx: _LossContext, delta: np.ndarray, batches, config: UapTrainConfig, callback):
    """Shared sign-gradient loop. ``batches(epoch)`` yields ``(x, src_emb)``."""
    losses = []
    bound = budget_bound(config.epsilon)
    for epoch in range(config.epochs):
        epoch_losses = []
        for i, (x, src_emb) in enumerate(batches(epoch)):
            rng = np.random.default_rng([config.seed, epoch, i])
            d = Tensor(delta, requires_grad=True, dtype=np.dtype(ctx.bundle.dtype))
            with GradientTape() as tape:
                loss = ctx.loss(d, x, src_emb, rng)
            val = loss.item()
            (grad,) = tape.gradient(loss, [d])
            if not (math.isfinite(val) and np.all(np.isfinite(grad))):
                raise FloatingPointError(f"non-finite loss or gradient at epoch {epoch}, sample {i}: loss={val}")
            delta = _sign_step(delta, grad, config)
            if config.check_budget and np.abs(delta).max() > bound:
                raise AssertionError(f"budget violated at epoch {epoch}, sample {i}")
            if callback is not None:
                callback(epoch, i, delta)
            epoch_losses.append(val)
        losses.append(float(np.mean(epoch_losses)) if epoch_losses else float("nan"))
        logger.info("epoch %d/%d mean loss %.6f", epoch + 1, config.epochs, losses[-1])
    return delta, losses


def train_uap(
    bundle: ToyLdmBundle,
    images,
    prompts: Sequence[str],
    x_tar,
    t_tar: str,
    config: UapTrainConfig | None = None,
    callback: Callable[[int, int, np.ndarray], None] | None = None,
) -> Uap:
    """Train a universal perturbation on image/prompt pairs.

    The bundle is never modified. The per-epoch mean losses are returned in
    ``uap.metadata["loss_log"]``.
    """
    config = config or UapTrainConfig()
    config.validate(bundle.schedule.k_max)
    images = check_images(images).astype(bundle.dtype)
    if len(images) == 0:
        raise ValueError("training set is empty")
    if len(prompts) != len(images):
        raise ValueError(f"{len(images)} images but {len(prompts)} prompts")
    size = bundle.config.image_size
    if images.shape[-2:] != (size, size):
        raise ValueError(f"dataset resolution {images.shape[-2:]} does not match bundle resolution {size}")
    ctx = _LossContext(bundle, x_tar, t_tar, config)
    src = bundle.embed(list(prompts))
    bs = config.batch_size

    def batches(epoch):
        for start in range(0, len(images), bs):
            yield images[start : start + bs], src[start : start + bs]

    delta = _init_delta(images.shape[1:], config)
    delta, losses = _run_loop(ctx, delta, batches, config, callback)
    meta = _metadata(bundle, config, t_tar, losses, data_free=False, n_samples=len(images))
    return Uap(delta, config.epsilon, meta)


def train_uap_datafree(
    bundle: ToyLdmBundle,
    prior,
    x_tar,
    t_tar: str,
    config: UapTrainConfig | None = None,
    callback: Callable[[int, int, np.ndarray], None] | None = None,
) -> Uap:
    """Train a universal perturbation on synthetic prior samples only.

    Only injection losses apply: there is no source prompt. ``prior`` is a
    :class:`JigsawPrior`, :class:`GaussianPrior`, or one of the strings
    ``"jigsaw"``/``"gaussian"``. The curriculum index advances linearly with
    the epoch.
    """
    config = config or UapTrainConfig(loss_kind=LossKind.INJ)
    if config.loss_kind not in (LossKind.INJ, LossKind.MAP_INJ):
        raise ValueError(f"data-free training supports only injection losses, got {config.loss_kind.value!r}")
    config.validate(bundle.schedule.k_max)
    size = bundle.config.image_size
    if prior == "jigsaw":
        prior = JigsawPrior(JigsawConfig(size=size, curriculum_length=max(config.epochs, 1), seed=config.seed))
    elif prior == "gaussian":
        prior = GaussianPrior(size, config.seed)
    ctx = _LossContext(bundle, x_tar, t_tar, config)
    length = prior.curriculum_length

    def curriculum_index(epoch: int) -> int:
        if length == 1 or config.epochs <= 1:
            return 0
        return int(round(epoch * (length - 1) / (config.epochs - 1)))

    def batches(epoch):
        ci = curriculum_index(epoch)
        for start in range(0, config.n_prior_samples, config.batch_size):
            idx = range(start, min(start + config.batch_size, config.n_prior_samples))
            x = np.stack([prior.sample(ci, epoch * config.n_prior_samples + j) for j in idx]).astype(bundle.dtype)
            if x.shape[-2:] != (size, size):
                raise ValueError(f"prior resolution {x.shape[-2:]} does not match bundle resolution {size}")
            yield x, None

    delta = _init_delta((3, size, size), config)
    delta, losses = _run_loop(ctx, delta, batches, config, callback)
    meta = _metadata(bundle, config, t_tar, losses, data_free=True, n_samples=config.n_prior_samples)
    meta["prior"] = getattr(prior, "kind", type(prior).__name__)
    return Uap(delta, config.epsilon, meta)


def _metadata(bundle, config: UapTrainConfig, t_tar: str, losses, data_free: bool, n_samples: int) -> dict:
    return {
        "target_prompt": t_tar,
        "loss_kind": config.loss_kind.value,
        "step_size": config.step_size,
        "timesteps": list(config.timesteps),
        "epochs": config.epochs,
        "seed": config.seed,
        "noise_space": config.noise_space,
        "sup_weight": config.sup_weight,
        "batch_size": config.batch_size,
        "data_free": data_free,
        "n_samples": n_samples,
        "bundle_hash": bundle.weights_hash(),
        "loss_log": losses,
    }


# ---------------------------------------------------------------- test time


def _resize_nearest(delta: np.ndarray, h: int, w: int) -> np.ndarray:
    rows = (np.arange(h) * delta.shape[1] // h).astype(int)
    cols = (np.arange(w) * delta.shape[2] // w).astype(int)
    return delta[:, rows][:, :, cols]


def immunize(x, uap: Uap | np.ndarray) -> np.ndarray:
    """``clip(x + delta, 0, 1)`` for one image or a batch; no model involved.

    A perturbation of a different resolution is resized by nearest neighbour.
    """
    delta = uap.delta if isinstance(uap, Uap) else np.asarray(uap, dtype=np.float32)
    x = np.asarray(x)
    h, w = x.shape[-2:]
    if delta.shape[-2:] != (h, w):
        delta = _resize_nearest(delta, h, w)
    x = x if x.dtype.kind == "f" else x.astype(np.float32)
    out = np.clip(x + delta.astype(x.dtype), 0.0, 1.0)
    # rounding of x + delta can land one ulp past the budget; step those back toward x
    limit = float(np.abs(delta).max()) if delta.size else 0.0
    over = np.abs(out.astype(np.float64) - x.astype(np.float64)) > limit
    if over.any():
        out[over] = np.nextafter(out[over], x[over])
    return out


def mean_ca_distance(bundle: ToyLdmBundle, images, prompts, delta, timesteps=(5, 10, 15, 20, 25), seed: int = 0) -> float:
    """Average cross-attention output distance between immunized and clean images under their own prompts."""
    images = check_images(images).astype(bundle.dtype)
    x_adv = immunize(images, delta).astype(bundle.dtype)
    ks = np.asarray(timesteps)
    rng = np.random.default_rng(seed)
    vals = []
    for i in range(len(images)):
        eps = rng.standard_normal((len(ks),) + bundle.latent_shape).astype(bundle.dtype)
        za = bundle.schedule.add_noise(np.repeat(bundle.encode(x_adv[i : i + 1]).data, len(ks), axis=0), ks, eps)
        zc = bundle.schedule.add_noise(np.repeat(bundle.encode(images[i : i + 1]).data, len(ks), axis=0), ks, eps)
        y = bundle.embed(prompts[i])
        _, ta = bundle.forward_with_trace(za, ks, y, n_layers=bundle.denoiser.n_blocks)
        _, tc = bundle.forward_with_trace(zc, ks, y, n_layers=bundle.denoiser.n_blocks)
        vals.append(loss_inj(ta, tc).item() / len(ks))
    return float(np.mean(vals))


class UniversalImmunizer(TransformerMixin, BaseEstimator):
    """Learn one perturbation with ``fit`` and apply it with ``transform``.

    ``fit(X, y)`` takes clean images ``X`` and their prompts ``y``. With
    ``data_free=True``, ``X`` and ``y`` are ignored and training draws from
    ``prior`` instead.
    """

    def __init__(
        self,
        bundle=None,
        target_image=None,
        target_prompt="",
        loss="inj+sup",
        epsilon=10 / 255,
        step_size=1 / 255,
        timesteps=(5, 10, 15, 20, 25),
        epochs=20,
        sup_weight=1.0,
        noise_space="latent",
        batch_size=1,
        data_free=False,
        prior="jigsaw",
        n_prior_samples=50,
        seed=None,
    ):
        self.bundle = bundle
        self.target_image = target_image
        self.target_prompt = target_prompt
        self.loss = loss
        self.epsilon = epsilon
        self.step_size = step_size
        self.timesteps = timesteps
        self.epochs = epochs
        self.sup_weight = sup_weight
        self.noise_space = noise_space
        self.batch_size = batch_size
        self.data_free = data_free
        self.prior = prior
        self.n_prior_samples = n_prior_samples
        self.seed = seed

    def _config(self) -> UapTrainConfig:
        if self.seed is None:
            raise ValueError("seed must be given explicitly")
        return UapTrainConfig(
            epsilon=self.epsilon,
            step_size=self.step_size,
            timesteps=tuple(self.timesteps),
            epochs=self.epochs,
            loss_kind=LossKind(self.loss),
            sup_weight=self.sup_weight,
            noise_space=self.noise_space,
            batch_size=self.batch_size,
            n_prior_samples=self.n_prior_samples,
            seed=self.seed,
        )

    def fit(self, X=None, y=None):
        if self.bundle is None:
            raise ValueError("a pretrained bundle is required")
        config = self._config()
        x_tar, t_tar = self.target_image, self.target_prompt
        if x_tar is None:
            x_tar, default_prompt = default_target(self.bundle.config.image_size)
            t_tar = t_tar or default_prompt
        if self.data_free:
            self.uap_ = train_uap_datafree(self.bundle, self.prior, x_tar, t_tar, config)
        else:
            if X is None or y is None:
                raise ValueError("fit needs images X and prompts y unless data_free=True")
            self.uap_ = train_uap(self.bundle, X, list(y), x_tar, t_tar, config)
        self.delta_ = self.uap_.delta
        self.loss_curve_ = list(self.uap_.metadata["loss_log"])
        return self

    def transform(self, X):
        check_is_fitted(self, "uap_")
        out = immunize(check_images(X, allow_single=True), self.uap_)
        return out[0] if np.ndim(X) == 3 else out
