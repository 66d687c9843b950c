"""A miniature text-conditioned latent diffusion model.

The bundle consists of a linear-beta noise schedule, a frozen random text
embedder, a small convolutional autoencoder and a residual denoiser whose
blocks each carry one single-head cross-attention layer. Every denoiser
forward pass can return a per-layer trace of attention maps and
cross-attention outputs.
"""

from __future__ import annotations

import hashlib
import logging
import math
import re
from dataclasses import asdict, dataclass, field

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin

from . import tensor as T
from .tensor import GradientTape, Tensor
from .uit1 import load_checkpoint, save_checkpoint
from .validation import check_images

logger = logging.getLogger(__name__)

VOCAB = (
    "a", "an", "photo", "of", "on", "the", "background", "image", "picture",
    "red", "green", "blue", "yellow", "purple", "orange", "black", "white", "gray",
    "circle", "square", "triangle", "ring", "star", "cross",
)  # fmt: skip


# ---------------------------------------------------------------- schedule


class NoiseSchedule:
    """Linear beta schedule over ``k_max`` steps with ``alpha_bars[0] == 1``."""

    def __init__(self, k_max: int = 50, beta_start: float = 1e-4, beta_end: float = 2e-2):
        if k_max < 1:
            raise ValueError(f"k_max must be >= 1, got {k_max}")
        self.k_max = k_max
        self.beta_start = beta_start
        self.beta_end = beta_end
        self.betas = np.linspace(beta_start, beta_end, k_max, dtype=np.float64)
        self.alpha_bars = np.concatenate([[1.0], np.cumprod(1.0 - self.betas)])

    def _check(self, k) -> np.ndarray:
        ks = np.atleast_1d(np.asarray(k))
        if ks.dtype.kind not in "iu" or ks.min() < 0 or ks.max() > self.k_max:
            raise ValueError(f"timestep {k} outside [0, {self.k_max}]")
        return ks

    def coefficients(self, k) -> tuple[np.ndarray, np.ndarray]:
        ks = self._check(k)
        ab = self.alpha_bars[ks]
        return np.sqrt(ab), np.sqrt(1.0 - ab)

    def add_noise(self, x0, k, eps):
        """``sqrt(ab_k) * x0 + sqrt(1 - ab_k) * eps``.

        ``k`` may be an int or one timestep per batch element. ``x0`` may be
        a numpy array or a :class:`Tensor` (then the result is differentiable
        in ``x0``); a batch-1 input is tiled to ``len(k)``.
        """
        ks = self._check(k)
        a, b = self.coefficients(ks)
        if isinstance(x0, Tensor):
            eps_d = eps.data if isinstance(eps, Tensor) else np.asarray(eps)
            if eps_d.shape != (x0.shape if np.ndim(k) == 0 else (len(ks),) + x0.shape[1:]):
                raise T.DimensionError(f"add_noise: eps {eps_d.shape} does not match x0 {x0.shape}")
            if np.ndim(k) == 0:
                if ks[0] == 0:
                    return x0
                return T.add(T.scale(x0, a[0]), Tensor(b[0] * eps_d, dtype=x0.dtype))
            if x0.shape[0] == 1 and len(ks) > 1:
                x0 = T.repeat_batch(x0, len(ks))
            bshape = (-1,) + (1,) * (x0.ndim - 1)
            coef = np.broadcast_to(a.reshape(bshape), x0.shape)
            return T.add(T.mul(x0, Tensor(coef, dtype=x0.dtype)), Tensor(b.reshape(bshape) * eps_d, dtype=x0.dtype))
        x0 = np.asarray(x0)
        eps = np.asarray(eps)
        if np.ndim(k) != 0 and x0.shape[0] == 1 and len(ks) > 1:
            x0 = np.repeat(x0, len(ks), axis=0)
        if eps.shape != x0.shape:
            raise T.DimensionError(f"add_noise: eps {eps.shape} does not match x0 {x0.shape}")
        if np.ndim(k) == 0:
            if ks[0] == 0:
                return x0.copy()
            return (a[0] * x0 + b[0] * eps).astype(x0.dtype)
        bshape = (-1,) + (1,) * (x0.ndim - 1)
        return (a.reshape(bshape) * x0 + b.reshape(bshape) * eps).astype(x0.dtype)


# ---------------------------------------------------------------- text


class TextEmbedder:
    """Frozen random embedding table over a fixed word list."""

    def __init__(self, dim: int = 32, max_tokens: int = 8, seed: int = 0, vocab=VOCAB):
        self.dim = dim
        self.max_tokens = max_tokens
        self.seed = seed
        self.vocab = tuple(vocab)
        self._index = {w: i for i, w in enumerate(self.vocab)}
        rng = np.random.default_rng(seed)
        self.table = rng.standard_normal((len(self.vocab), dim)).astype(np.float32)
        self.oov = rng.standard_normal(dim).astype(np.float32)
        self.pad = (0.25 * rng.standard_normal(dim)).astype(np.float32)

    @staticmethod
    def tokenize(prompt: str) -> list[str]:
        return re.findall(r"[a-z]+", prompt.lower())

    def embed(self, prompt: str) -> np.ndarray:
        """Return the ``(max_tokens, dim)`` embedding of ``prompt``."""
        toks = self.tokenize(prompt)[: self.max_tokens]
        rows = [self.table[self._index[t]] if t in self._index else self.oov for t in toks]
        rows += [self.pad] * (self.max_tokens - len(rows))
        return np.stack(rows)

    def embed_batch(self, prompts) -> np.ndarray:
        return np.stack([self.embed(p) for p in prompts])


# ---------------------------------------------------------------- parameters


def _conv_init(rng, o, c, k, gain=1.0):
    return (rng.standard_normal((o, c, k, k)) * gain * math.sqrt(2.0 / (c * k * k))).astype(np.float32)


def _lin_init(rng, i, o, gain=1.0):
    return (rng.standard_normal((i, o)) * gain / math.sqrt(i)).astype(np.float32)


class _Module:
    params: dict[str, Tensor]

    def p(self, name: str) -> Tensor:
        return self.params[name]

    def parameters(self) -> list[Tensor]:
        return list(self.params.values())

    def requires_grad_(self, flag: bool) -> None:
        for t in self.params.values():
            t.requires_grad = flag


class VaeLite(_Module):
    """Deterministic conv autoencoder: ``3 x H x W`` <-> ``c_z x H/4 x W/4``."""

    def __init__(self, latent_channels: int = 4, width: int = 32, seed: int = 0):
        rng = np.random.default_rng(seed)
        c1, c2, cz = width // 2, width, latent_channels
        raw = {
            "enc1.w": _conv_init(rng, c1, 3, 3), "enc1.b": np.zeros(c1),
            "enc2.w": _conv_init(rng, c2, c1, 3), "enc2.b": np.zeros(c2),
            "enc3.w": _conv_init(rng, cz, c2, 3, 0.5), "enc3.b": np.zeros(cz),
            "dec1.w": _conv_init(rng, c2, cz, 3), "dec1.b": np.zeros(c2),
            "dec2.w": _conv_init(rng, c1, c2, 3), "dec2.b": np.zeros(c1),
            "dec3.w": _conv_init(rng, c1, c1, 3), "dec3.b": np.zeros(c1),
            "dec4.w": _conv_init(rng, 3, c1, 3, 0.5), "dec4.b": np.zeros(3),
        }  # fmt: skip
        self.params = {k: Tensor(v) for k, v in raw.items()}
        self.latent_channels = latent_channels

    def encode(self, x: Tensor) -> Tensor:
        p = self.p
        h = T.silu(T.conv2d(x, p("enc1.w"), p("enc1.b"), stride=2, pad=1))
        h = T.silu(T.conv2d(h, p("enc2.w"), p("enc2.b"), stride=2, pad=1))
        return T.conv2d(h, p("enc3.w"), p("enc3.b"), pad=1)

    def decode(self, z: Tensor) -> Tensor:
        p = self.p
        h = T.silu(T.conv2d(z, p("dec1.w"), p("dec1.b"), pad=1))
        h = T.upsample_nearest(h, 2)
        h = T.silu(T.conv2d(h, p("dec2.w"), p("dec2.b"), pad=1))
        h = T.upsample_nearest(h, 2)
        h = T.silu(T.conv2d(h, p("dec3.w"), p("dec3.b"), pad=1))
        return T.sigmoid(T.conv2d(h, p("dec4.w"), p("dec4.b"), pad=1))


@dataclass
class LayerTrace:
    """Intermediate values of one denoiser block."""

    query_input: Tensor  # normalized block input, (N, HW, C)
    query: Tensor  # query projection, (N, HW, C)
    attn: Tensor  # attention map, (N, HW, M)
    ca: Tensor  # cross-attention output before W^CA, (N, HW, C)
    self_path: Tensor  # non-cross-attention branch G_l, (N, C, H, W)


@dataclass
class CrossAttnTrace:
    layers: list[LayerTrace] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.layers)

    def __getitem__(self, i) -> LayerTrace:
        return self.layers[i]

    @property
    def attention_maps(self) -> list[np.ndarray]:
        return [lt.attn.data for lt in self.layers]

    @property
    def ca_outputs(self) -> list[np.ndarray]:
        return [lt.ca.data for lt in self.layers]


def timestep_embedding(ks: np.ndarray, dim: int) -> np.ndarray:
    half = dim // 2
    freqs = np.exp(-math.log(1000.0) * np.arange(half) / half)
    ang = np.asarray(ks, dtype=np.float64)[:, None] * freqs[None]
    return np.concatenate([np.sin(ang), np.cos(ang)], axis=1)


class DenoiserUNet(_Module):
    """Residual epsilon-predictor with one cross-attention layer per block.

    Block ``l`` updates ``h <- h + G_l(h, k) + CA_l W_l^CA`` where
    ``CA_l = softmax(Q K^T / sqrt(C)) V`` with queries from the normalized
    block input and keys/values from the prompt embedding.
    """

    def __init__(self, latent_channels=4, width=32, n_blocks=4, text_dim=32, groups=8, temb_dim=32, seed=0):
        rng = np.random.default_rng(seed + 1)
        C = width
        self.width, self.n_blocks, self.groups, self.temb_dim = C, n_blocks, groups, temb_dim
        raw = {
            "in.w": _conv_init(rng, C, latent_channels, 3), "in.b": np.zeros(C),
            "temb1.w": _lin_init(rng, temb_dim, 2 * temb_dim), "temb1.b": np.zeros(2 * temb_dim),
            "temb2.w": _lin_init(rng, 2 * temb_dim, 2 * temb_dim), "temb2.b": np.zeros(2 * temb_dim),
            "out_gn.g": np.ones(C), "out_gn.b": np.zeros(C),
            "out.w": _conv_init(rng, latent_channels, C, 3, 0.1), "out.b": np.zeros(latent_channels),
        }  # fmt: skip
        for l in range(n_blocks):
            raw.update(
                {
                    f"b{l}.gn1.g": np.ones(C), f"b{l}.gn1.b": np.zeros(C),
                    f"b{l}.conv1.w": _conv_init(rng, C, C, 3), f"b{l}.conv1.b": np.zeros(C),
                    f"b{l}.temb.w": _lin_init(rng, 2 * temb_dim, C), f"b{l}.temb.b": np.zeros(C),
                    f"b{l}.gn2.g": np.ones(C), f"b{l}.gn2.b": np.zeros(C),
                    f"b{l}.conv2.w": _conv_init(rng, C, C, 3, 0.3), f"b{l}.conv2.b": np.zeros(C),
                    f"b{l}.gnq.g": np.ones(C), f"b{l}.gnq.b": np.zeros(C),
                    f"b{l}.wq": _lin_init(rng, C, C), f"b{l}.wk": _lin_init(rng, text_dim, C),
                    f"b{l}.wv": _lin_init(rng, text_dim, C), f"b{l}.wca": _lin_init(rng, C, C, 0.5),
                }
            )  # fmt: skip
        self.params = {k: Tensor(v) for k, v in raw.items()}

    def cross_attention(self, l: int, query_input: Tensor, prompt_emb: Tensor, w_v: Tensor | None = None):
        """Return ``(Q, A, CA)`` of block ``l`` for a given query input."""
        p = self.p
        q = T.matmul(query_input, p(f"b{l}.wq"))
        k = T.matmul(prompt_emb, p(f"b{l}.wk"))
        v = T.matmul(prompt_emb, w_v if w_v is not None else p(f"b{l}.wv"))
        kt = T.transpose(k, (1, 0) if k.ndim == 2 else (0, 2, 1))
        logits = T.scale(T.matmul(q, kt), 1.0 / math.sqrt(self.width))
        attn = T.softmax_rows(logits)
        return q, attn, T.matmul(attn, v)

    def forward(self, z, k, prompt_emb, trace: bool = True, n_layers: int | None = None):
        """Predict the noise in ``z`` at timestep(s) ``k``.

        ``prompt_emb`` is ``(M, d_t)`` shared by the batch or ``(N, M, d_t)``.
        With ``n_layers`` set, stop after that many blocks and return
        ``(None, trace)``.
        """
        p = self.p
        z = z if isinstance(z, Tensor) else Tensor(z, dtype=p("in.w").dtype)
        y = prompt_emb if isinstance(prompt_emb, Tensor) else Tensor(prompt_emb, dtype=z.dtype)
        if y.ndim not in (2, 3) or y.shape[-2] == 0:
            raise ValueError(f"prompt embedding must have at least one token, got shape {y.shape}")
        n = z.shape[0]
        ks = np.broadcast_to(np.asarray(k), (n,))
        temb = Tensor(timestep_embedding(ks, self.temb_dim), dtype=z.dtype)
        temb = T.silu(T.bias_add(T.matmul(temb, p("temb1.w")), p("temb1.b")))
        temb = T.silu(T.bias_add(T.matmul(temb, p("temb2.w")), p("temb2.b")))
        h = T.conv2d(z, p("in.w"), p("in.b"), pad=1)
        C, H, W = h.shape[1:]
        tr = CrossAttnTrace()
        stop = self.n_blocks if n_layers is None else n_layers
        for l in range(stop):
            g = T.conv2d(T.silu(T.group_norm(h, self.groups, p(f"b{l}.gn1.g"), p(f"b{l}.gn1.b"))), p(f"b{l}.conv1.w"), p(f"b{l}.conv1.b"), pad=1)
            tb = T.bias_add(T.matmul(temb, p(f"b{l}.temb.w")), p(f"b{l}.temb.b"))
            g = T.channel_bias(g, tb)
            g = T.conv2d(T.silu(T.group_norm(g, self.groups, p(f"b{l}.gn2.g"), p(f"b{l}.gn2.b"))), p(f"b{l}.conv2.w"), p(f"b{l}.conv2.b"), pad=1)
            hn = T.group_norm(h, self.groups, p(f"b{l}.gnq.g"), p(f"b{l}.gnq.b"))
            q_in = T.transpose(T.reshape(hn, (n, C, H * W)), (0, 2, 1))
            q, attn, ca = self.cross_attention(l, q_in, y)
            inj = T.reshape(T.transpose(T.matmul(ca, p(f"b{l}.wca")), (0, 2, 1)), (n, C, H, W))
            if trace:
                tr.layers.append(LayerTrace(q_in, q, attn, ca, g))
            h = T.add(T.add(h, g), inj)
        if n_layers is not None:
            return None, tr
        out = T.conv2d(T.silu(T.group_norm(h, self.groups, p("out_gn.g"), p("out_gn.b"))), p("out.w"), p("out.b"), pad=1)
        return out, tr


# ---------------------------------------------------------------- bundle


@dataclass
class BundleConfig:
    image_size: int = 32
    latent_channels: int = 4
    vae_width: int = 32
    width: int = 32
    n_blocks: int = 4
    text_dim: int = 32
    max_tokens: int = 8
    groups: int = 8
    k_max: int = 50
    beta_start: float = 1e-4
    beta_end: float = 2e-2
    seed: int = 0


class ToyLdmBundle:
    """Schedule, text embedder, autoencoder and denoiser travelling together."""

    def __init__(self, config: BundleConfig | None = None):
        cfg = config or BundleConfig()
        self.config = cfg
        self.schedule = NoiseSchedule(cfg.k_max, cfg.beta_start, cfg.beta_end)
        self.embedder = TextEmbedder(cfg.text_dim, cfg.max_tokens, cfg.seed)
        self.vae = VaeLite(cfg.latent_channels, cfg.vae_width, cfg.seed)
        self.denoiser = DenoiserUNet(cfg.latent_channels, cfg.width, cfg.n_blocks, cfg.text_dim, cfg.groups, seed=cfg.seed)
        self.latent_scale = 1.0
        self.train_log: dict[str, list[float]] = {}

    @property
    def dtype(self) -> np.dtype:
        return self.denoiser.p("in.w").dtype

    @property
    def latent_shape(self) -> tuple[int, int, int]:
        s = self.config.image_size // 4
        return (self.config.latent_channels, s, s)

    def named_parameters(self) -> dict[str, Tensor]:
        out = {f"vae.{k}": v for k, v in self.vae.params.items()}
        out.update({f"unet.{k}": v for k, v in self.denoiser.params.items()})
        return out

    def weights_hash(self) -> str:
        h = hashlib.sha256()
        for name, t in sorted(self.named_parameters().items()):
            h.update(name.encode())
            h.update(np.ascontiguousarray(t.data).tobytes())
        h.update(repr(float(self.latent_scale)).encode())
        return h.hexdigest()

    def astype(self, dtype) -> "ToyLdmBundle":
        """Copy of this bundle with every weight cast to ``dtype``."""
        other = ToyLdmBundle(self.config)
        for name, t in self.named_parameters().items():
            tgt = other.named_parameters()[name]
            tgt.data = t.data.astype(dtype)
        other.latent_scale = self.latent_scale
        other.train_log = dict(self.train_log)
        return other

    def freeze(self) -> None:
        self.vae.requires_grad_(False)
        self.denoiser.requires_grad_(False)

    def _as_tensor(self, x) -> Tensor:
        return x if isinstance(x, Tensor) else Tensor(np.asarray(x), dtype=self.dtype)

    def encode(self, x) -> Tensor:
        """Scaled latents of images ``(N, 3, H, W)`` (or a single ``(3, H, W)``)."""
        x = self._as_tensor(x)
        single = x.ndim == 3
        if single:
            x = T.reshape(x, (1,) + x.shape)
        z = T.scale(self.vae.encode(x), self.latent_scale)
        return T.reshape(z, z.shape[1:]) if single else z

    def decode(self, z) -> Tensor:
        z = self._as_tensor(z)
        return self.vae.decode(T.scale(z, 1.0 / self.latent_scale))

    def embed(self, prompts) -> np.ndarray:
        if isinstance(prompts, str):
            return self.embedder.embed(prompts).astype(self.dtype)
        return self.embedder.embed_batch(prompts).astype(self.dtype)

    def forward_with_trace(self, z_k, k, prompt_emb, n_layers: int | None = None):
        """``(eps_hat, trace)`` for latents ``z_k`` at timestep ``k``."""
        z_k = self._as_tensor(z_k)
        if tuple(z_k.shape[1:]) != self.latent_shape:
            raise T.DimensionError(f"latent shape {z_k.shape[1:]} does not match bundle latent {self.latent_shape}")
        return self.denoiser.forward(z_k, k, prompt_emb, trace=True, n_layers=n_layers)

    def predict_eps(self, z_k, k, prompt_emb) -> np.ndarray:
        out, _ = self.denoiser.forward(self._as_tensor(z_k), k, prompt_emb, trace=False)
        return out.data

    def retrace(self, trace: CrossAttnTrace, prompt_emb, w_v: dict[int, np.ndarray] | None = None) -> CrossAttnTrace:
        """Recompute each layer's attention from its recorded query input.

        ``w_v`` optionally overrides the value projection of chosen layers.
        """
        y = self._as_tensor(prompt_emb)
        out = CrossAttnTrace()
        for l, lt in enumerate(trace.layers):
            wv = None if not w_v or l not in w_v else self._as_tensor(w_v[l])
            q, attn, ca = self.denoiser.cross_attention(l, lt.query_input, y, wv)
            out.layers.append(LayerTrace(lt.query_input, q, attn, ca, lt.self_path))
        return out

    # -------------------------------------------------------- persistence

    def save(self, path) -> None:
        tensors = {k: v.data for k, v in self.named_parameters().items()}
        meta = {
            "format": "immunolab-bundle/1",
            "config": asdict(self.config),
            "latent_scale": float(self.latent_scale),
            "schedule": {"k_max": self.schedule.k_max, "beta_start": self.schedule.beta_start, "beta_end": self.schedule.beta_end},
            "seed": self.config.seed,
            "train_log": self.train_log,
        }
        save_checkpoint(path, tensors, meta)

    @classmethod
    def load(cls, path) -> "ToyLdmBundle":
        tensors, meta = load_checkpoint(path)
        bundle = cls(BundleConfig(**meta["config"]))
        params = bundle.named_parameters()
        missing = set(params) - set(tensors)
        if missing:
            raise ValueError(f"{path}: checkpoint lacks tensors {sorted(missing)}")
        for name, t in params.items():
            if t.shape != tensors[name].shape:
                raise ValueError(f"{path}: tensor {name} has shape {tensors[name].shape}, expected {t.shape}")
            t.data = tensors[name]
        bundle.latent_scale = meta["latent_scale"]
        bundle.train_log = meta.get("train_log", {})
        bundle.freeze()
        return bundle


# ---------------------------------------------------------------- pretraining


class Adam:
    def __init__(self, params, lr=1e-3, betas=(0.9, 0.999), eps=1e-8):
        self.params = list(params)
        self.lr, self.b1, self.b2, self.eps = lr, betas[0], betas[1], eps
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]
        self.t = 0

    def step(self) -> None:
        self.t += 1
        c1 = 1 - self.b1**self.t
        c2 = 1 - self.b2**self.t
        for i, p in enumerate(self.params):
            if p.grad is None:
                continue
            g = p.grad
            self.m[i] = self.b1 * self.m[i] + (1 - self.b1) * g
            self.v[i] = self.b2 * self.v[i] + (1 - self.b2) * g * g
            upd = self.lr * (self.m[i] / c1) / (np.sqrt(self.v[i] / c2) + self.eps)
            p.data = (p.data - upd).astype(p.data.dtype)

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None


def pretrain_toy(
    images,
    prompts,
    steps: int = 2000,
    lr: float = 1e-3,
    seed: int = 0,
    vae_steps: int = 1000,
    vae_lr: float = 2e-3,
    batch_size: int = 32,
    vae_batch_size: int = 16,
    prompt_dropout: float = 0.1,
    config: BundleConfig | None = None,
) -> ToyLdmBundle:
    """Train the autoencoder by reconstruction, then the denoiser by noise regression.

    Loss curves are stored in ``bundle.train_log``; ``heldout_loss`` records
    the denoiser loss on a fixed batch before and after training.
    """
    images = check_images(images)
    if len(images) == 0 or len(prompts) == 0:
        raise ValueError("pretraining needs a nonempty dataset")
    if len(images) != len(prompts):
        raise ValueError(f"{len(images)} images but {len(prompts)} prompts")
    cfg = config or BundleConfig(image_size=images.shape[-1], seed=seed)
    if images.shape[-1] != cfg.image_size or images.shape[-2] != cfg.image_size:
        raise ValueError(f"images are {images.shape[-2:]}, bundle expects {cfg.image_size}")
    bundle = ToyLdmBundle(cfg)
    rng = np.random.default_rng(seed)
    n = len(images)
    bs = min(batch_size, n)

    bundle.vae.requires_grad_(True)
    opt = Adam(bundle.vae.parameters(), lr=vae_lr)
    vae_curve = []
    for step in range(vae_steps):
        idx = rng.choice(n, min(vae_batch_size, n), replace=False)
        x = Tensor(images[idx])
        with GradientTape() as tape:
            loss = T.mse(bundle.vae.decode(bundle.vae.encode(x)), x)
        opt.zero_grad()
        tape.backward(loss)
        opt.step()
        vae_curve.append(loss.item())
        if step % 250 == 0:
            logger.info("vae step %d loss %.5f", step, loss.item())
    bundle.vae.requires_grad_(False)

    latents = np.concatenate([bundle.vae.encode(Tensor(images[i : i + 64])).data for i in range(0, n, 64)])
    bundle.latent_scale = float(1.0 / max(latents.std(), 1e-6))
    latents = (latents * bundle.latent_scale).astype(np.float32)
    embs = bundle.embed(list(prompts))
    uncond = bundle.embed("")

    hold = np.random.default_rng(seed + 7919)
    h_idx = hold.choice(n, bs, replace=False)
    h_k = hold.integers(1, cfg.k_max + 1, bs)
    h_eps = hold.standard_normal((bs,) + bundle.latent_shape).astype(np.float32)
    h_z = bundle.schedule.add_noise(latents[h_idx], h_k, h_eps)

    def heldout():
        return float(np.mean((bundle.predict_eps(h_z, h_k, embs[h_idx]) - h_eps) ** 2))

    held = [heldout()]
    bundle.denoiser.requires_grad_(True)
    opt = Adam(bundle.denoiser.parameters(), lr=lr)
    curve = []
    for step in range(steps):
        idx = rng.choice(n, bs, replace=False)
        ks = rng.integers(1, cfg.k_max + 1, bs)
        eps = rng.standard_normal((bs,) + bundle.latent_shape).astype(np.float32)
        zk = bundle.schedule.add_noise(latents[idx], ks, eps)
        y = embs[idx].copy()
        y[rng.random(bs) < prompt_dropout] = uncond
        with GradientTape() as tape:
            pred, _ = bundle.denoiser.forward(Tensor(zk), ks, Tensor(y), trace=False)
            loss = T.mse(pred, Tensor(eps))
        opt.zero_grad()
        tape.backward(loss)
        opt.step()
        curve.append(loss.item())
        if step % 250 == 0:
            logger.info("denoiser step %d loss %.5f", step, loss.item())
    bundle.freeze()
    held.append(heldout())
    bundle.train_log = {"vae_loss": vae_curve, "denoiser_loss": curve, "heldout_loss": held}
    return bundle


# ---------------------------------------------------------------- editing


def _timestep_sequence(k_max: int, steps: int, k_start: int) -> list[int]:
    full = np.unique(np.round(np.linspace(1, k_max, steps)).astype(int))[::-1]
    return [int(k) for k in full if k <= k_start]


def sample_from(bundle: ToyLdmBundle, z0: np.ndarray, k_start: int, prompt_emb, guidance_scale, steps: int, seed: int):
    """Noise latents to ``k_start`` and run deterministic DDIM back to 0.

    ``guidance_scale=None`` uses the conditional branch alone; otherwise
    classifier-free guidance against the empty prompt.
    """
    sched = bundle.schedule
    seq = _timestep_sequence(sched.k_max, steps, k_start)
    if k_start == 0 or not seq:
        return z0
    rng = np.random.default_rng(seed)
    noise = rng.standard_normal(z0.shape).astype(z0.dtype)
    z = sched.add_noise(z0, seq[0], noise)
    n = z0.shape[0]
    cond = np.broadcast_to(prompt_emb, (n,) + prompt_emb.shape[-2:]) if prompt_emb.ndim == 2 else prompt_emb
    uncond = np.broadcast_to(bundle.embed(""), cond.shape)
    for i, k in enumerate(seq):
        if guidance_scale is None:
            eps = bundle.predict_eps(z, k, cond)
        else:
            both = bundle.predict_eps(np.concatenate([z, z]), k, np.concatenate([uncond, cond]))
            eu, ec = both[:n], both[n:]
            eps = eu + z.dtype.type(guidance_scale) * (ec - eu)
        a, b = sched.coefficients(k)
        x0 = (z - b[0] * eps) / a[0]
        k_next = seq[i + 1] if i + 1 < len(seq) else 0
        a2, b2 = sched.coefficients(k_next)
        z = (a2[0] * x0 + b2[0] * eps).astype(z0.dtype)
    return z


def edit_img2img(bundle: ToyLdmBundle, x, prompt, strength: float = 0.8, guidance_scale: float = 7.5, steps: int = 50, seed: int = 0):
    """Image-to-image edit of a single image or a batch toward ``prompt``.

    ``prompt`` is one string for the whole batch or one per image.
    """
    if not 0.0 < strength <= 1.0:
        raise ValueError(f"strength must lie in (0, 1], got {strength}")
    if steps < 1:
        raise ValueError(f"steps must be >= 1, got {steps}")
    x = np.asarray(x)
    single = x.ndim == 3
    xb = check_images(x[None] if single else x)
    z0 = bundle.encode(xb.astype(bundle.dtype)).data
    emb = bundle.embed(prompt)
    k_start = int(math.ceil(strength * bundle.schedule.k_max - 1e-9))
    z = sample_from(bundle, z0, k_start, emb, guidance_scale, steps, seed)
    out = bundle.decode(z).data
    return out[0] if single else out


class Img2ImgEditor(TransformerMixin, BaseEstimator):
    """Editing pipeline as a stateless transformer (``transform`` edits)."""

    def __init__(self, bundle=None, prompt="", strength=0.8, guidance_scale=7.5, steps=50, seed=0):
        self.bundle = bundle
        self.prompt = prompt
        self.strength = strength
        self.guidance_scale = guidance_scale
        self.steps = steps
        self.seed = seed

    def fit(self, X=None, y=None):
        return self

    def transform(self, X, prompts=None):
        if self.bundle is None:
            raise ValueError("Img2ImgEditor needs a bundle")
        return edit_img2img(
            self.bundle, X, self.prompt if prompts is None else list(prompts), self.strength, self.guidance_scale, self.steps, self.seed
        )
