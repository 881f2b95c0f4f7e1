"""Encoder-decoder sequence model over image patches and detection tokens."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np
import torch
import torch.nn as nn


class TrainingError(RuntimeError):
    pass


@dataclass
class ModelConfig:
    image_size: int = 64
    patch_size: int = 8
    d_model: int = 256
    n_heads: int = 8
    d_ffn: int = 1024
    n_encoder_layers: int = 6
    n_decoder_layers: int = 6
    vocab_size: int = 2083
    max_target_len: int = 500
    dropout_rate: float = 0.1
    stochastic_depth_rate: float = 0.0
    encoder_type: str = "patch"
    init_gain: float = 1.0
    # starting values of the (learned) positional tables: "sincos" or "uniform"
    pos_init: str = "sincos"

    def __post_init__(self):
        if self.d_model % self.n_heads:
            raise ValueError(f"d_model={self.d_model} not divisible by n_heads={self.n_heads}")
        if self.image_size % self.patch_size:
            raise ValueError(
                f"image_size={self.image_size} not divisible by patch_size={self.patch_size}"
            )
        if self.encoder_type not in ENCODERS:
            raise ValueError(f"unknown encoder_type {self.encoder_type!r}")
        if self.pos_init not in ("sincos", "uniform"):
            raise ValueError(f"unknown pos_init {self.pos_init!r}")

    @property
    def grid_size(self) -> int:
        return self.image_size // self.patch_size

    @property
    def n_patches(self) -> int:
        return self.grid_size**2


@dataclass
class TrainConfig:
    learning_rate: float = 0.003
    weight_decay: float = 0.05
    warmup_epochs: float = 10
    epochs: int = 300
    batch_size: int = 128
    two_views_per_image: bool = True
    seed: int = 0
    # "mean" divides the weighted sum by the total weight, "sum" keeps it raw
    loss_normalization: str = "mean"
    token_type_weights: dict[str, float] = field(
        default_factory=lambda: {"coord": 1.0, "class": 1.0, "noise": 1.0, "eos": 1.0}
    )
    grad_clip: float = 0.0
    checkpoint_every: int = 0
    eval_every: int = 0

    def __post_init__(self):
        if self.learning_rate < 0 or self.weight_decay < 0:
            raise ValueError("learning_rate and weight_decay must be non-negative")
        if self.epochs <= 0 or self.batch_size <= 0:
            raise ValueError("epochs and batch_size must be positive")
        if self.loss_normalization not in ("mean", "sum"):
            raise ValueError(f"unknown loss_normalization {self.loss_normalization!r}")


def images_to_tensor(images, dtype=torch.float32) -> torch.Tensor:
    """uint8 (..., H, W, 3) array(s) to a (B, 3, H, W) tensor in [-1, 1]."""
    x = torch.as_tensor(np.asarray(images))
    if x.dim() == 3:
        x = x.unsqueeze(0)
    x = x.permute(0, 3, 1, 2).to(dtype)
    return x / 127.5 - 1.0


class DropPath(nn.Module):
    def __init__(self, rate: float):
        super().__init__()
        self.rate = rate

    def forward(self, x):
        if not self.training or self.rate == 0.0:
            return x
        keep = 1.0 - self.rate
        mask = torch.empty(x.shape[0], *([1] * (x.dim() - 1)), dtype=x.dtype).bernoulli_(keep)
        return x * mask / keep


class Attention(nn.Module):
    def __init__(self, d_model: int, n_heads: int, dropout: float):
        super().__init__()
        self.n_heads = n_heads
        self.head_dim = d_model // n_heads
        self.q = nn.Linear(d_model, d_model)
        self.k = nn.Linear(d_model, d_model)
        self.v = nn.Linear(d_model, d_model)
        self.o = nn.Linear(d_model, d_model)
        self.dropout = nn.Dropout(dropout)

    def _heads(self, x):
        b, n, _ = x.shape
        return x.view(b, n, self.n_heads, self.head_dim).transpose(1, 2)

    def project_kv(self, memory):
        return self._heads(self.k(memory)), self._heads(self.v(memory))

    def attend(self, x, k, v, mask=None):
        """Returns output (B, Lq, D) and weights (B, H, Lq, Lk)."""
        b, n, d = x.shape
        q = self._heads(self.q(x))
        scores = q @ k.transpose(-2, -1) / math.sqrt(self.head_dim)
        if mask is not None:
            scores = scores.masked_fill(~mask, float("-inf"))
        weights = torch.softmax(scores, dim=-1)
        out = self.dropout(weights) @ v
        out = out.transpose(1, 2).reshape(b, n, d)
        return self.o(out), weights

    def forward(self, x, memory, mask=None):
        k, v = self.project_kv(memory)
        return self.attend(x, k, v, mask)


class FeedForward(nn.Sequential):
    def __init__(self, d_model: int, d_ffn: int, dropout: float):
        super().__init__(
            nn.Linear(d_model, d_ffn), nn.GELU(), nn.Dropout(dropout), nn.Linear(d_ffn, d_model)
        )


class EncoderLayer(nn.Module):
    def __init__(self, cfg: ModelConfig, drop_path: float):
        super().__init__()
        self.ln1 = nn.LayerNorm(cfg.d_model)
        self.attn = Attention(cfg.d_model, cfg.n_heads, cfg.dropout_rate)
        self.ln2 = nn.LayerNorm(cfg.d_model)
        self.ffn = FeedForward(cfg.d_model, cfg.d_ffn, cfg.dropout_rate)
        self.drop = nn.Dropout(cfg.dropout_rate)
        self.drop_path = DropPath(drop_path)

    def forward(self, x):
        h = self.ln1(x)
        x = x + self.drop_path(self.drop(self.attn(h, h)[0]))
        return x + self.drop_path(self.drop(self.ffn(self.ln2(x))))


class DecoderLayer(nn.Module):
    def __init__(self, cfg: ModelConfig, drop_path: float):
        super().__init__()
        self.ln1 = nn.LayerNorm(cfg.d_model)
        self.self_attn = Attention(cfg.d_model, cfg.n_heads, cfg.dropout_rate)
        self.ln2 = nn.LayerNorm(cfg.d_model)
        self.cross_attn = Attention(cfg.d_model, cfg.n_heads, cfg.dropout_rate)
        self.ln3 = nn.LayerNorm(cfg.d_model)
        self.ffn = FeedForward(cfg.d_model, cfg.d_ffn, cfg.dropout_rate)
        self.drop = nn.Dropout(cfg.dropout_rate)
        self.drop_path = DropPath(drop_path)

    def forward(self, x, self_kv, cross_kv, mask=None):
        """``self_kv`` covers the keys visible to ``x`` (itself during training,
        the cache during incremental decoding)."""
        a, _ = self.self_attn.attend(self.ln1(x), *self_kv, mask=mask)
        x = x + self.drop_path(self.drop(a))
        c, cross_w = self.cross_attn.attend(self.ln2(x), *cross_kv)
        x = x + self.drop_path(self.drop(c))
        x = x + self.drop_path(self.drop(self.ffn(self.ln3(x))))
        return x, cross_w


def sincos_table(positions: torch.Tensor, dim: int) -> torch.Tensor:
    """(len(positions), dim) sine/cosine features at geometric frequencies."""
    freqs = 1.0 / 10000 ** (torch.arange(dim // 2, dtype=torch.float64) / max(1, dim // 2))
    angles = positions.double()[:, None] * freqs[None]
    return torch.cat([angles.sin(), angles.cos()], dim=1)


def sincos_grid(grid: int, dim: int) -> torch.Tensor:
    """(grid*grid, dim) table; the first half encodes rows, the second columns."""
    ys, xs = torch.meshgrid(torch.arange(grid), torch.arange(grid), indexing="ij")
    half = dim // 2
    return torch.cat([sincos_table(ys.reshape(-1), half), sincos_table(xs.reshape(-1), dim - half)], dim=1)


class PatchStem(nn.Module):
    """Non-overlapping patches flattened and projected to d_model."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.patch_size = cfg.patch_size
        self.proj = nn.Linear(3 * cfg.patch_size**2, cfg.d_model)

    def forward(self, x):
        p = self.patch_size
        b, c, h, w = x.shape
        x = x.reshape(b, c, h // p, p, w // p, p).permute(0, 2, 4, 3, 5, 1)
        return self.proj(x.reshape(b, (h // p) * (w // p), p * p * c))


class ConvStem(nn.Module):
    """Strided 3x3 convolutions down to the patch grid."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        n_down = int(math.log2(cfg.patch_size))
        if 2**n_down != cfg.patch_size:
            raise ValueError("conv encoder needs a power-of-two patch_size")
        chans = [3] + [min(cfg.d_model, 32 * 2**i) for i in range(n_down)]
        layers: list[nn.Module] = []
        for cin, cout in zip(chans[:-1], chans[1:]):
            layers += [nn.Conv2d(cin, cout, 3, stride=2, padding=1), nn.GELU()]
        self.body = nn.Sequential(*layers)
        self.proj = nn.Linear(chans[-1], cfg.d_model)

    def forward(self, x):
        x = self.body(x)
        return self.proj(x.flatten(2).transpose(1, 2))


ENCODERS = {"patch": PatchStem, "conv": ConvStem}


class DecodeState(NamedTuple):
    cross_kv: list
    self_kv: list
    position: int


class Seq2SeqDetector(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        d = cfg.d_model
        n_layers = cfg.n_encoder_layers + cfg.n_decoder_layers
        rates = [cfg.stochastic_depth_rate * i / max(1, n_layers - 1) for i in range(n_layers)]

        self.stem = ENCODERS[cfg.encoder_type](cfg)
        self.enc_pos = nn.Parameter(torch.empty(cfg.n_patches, d))
        self.encoder = nn.ModuleList(
            EncoderLayer(cfg, rates[i]) for i in range(cfg.n_encoder_layers)
        )
        self.enc_ln = nn.LayerNorm(d)

        self.token_emb = nn.Embedding(cfg.vocab_size, d)
        self.start = nn.Parameter(torch.empty(d))
        self.dec_pos = nn.Parameter(torch.empty(cfg.max_target_len, d))
        self.decoder = nn.ModuleList(
            DecoderLayer(cfg, rates[cfg.n_encoder_layers + i]) for i in range(cfg.n_decoder_layers)
        )
        self.dec_ln = nn.LayerNorm(d)
        self.head = nn.Linear(d, cfg.vocab_size)
        self.reset_parameters()

    def reset_parameters(self):
        """Xavier-uniform matrices scaled by ``init_gain``; zero biases; embeddings
        uniform in +-0.02*sqrt(3) (std 0.02). With ``pos_init="sincos"`` the
        positional tables start from sine/cosine features instead."""
        gain = self.cfg.init_gain
        bound = 0.02 * math.sqrt(3.0)
        for name, p in self.named_parameters():
            if name in ("enc_pos", "dec_pos", "start", "token_emb.weight"):
                nn.init.uniform_(p, -bound, bound)
            elif p.dim() >= 2:
                nn.init.xavier_uniform_(p, gain=gain)
            elif name.endswith("bias"):
                nn.init.zeros_(p)
        for m in self.modules():
            if isinstance(m, nn.LayerNorm):
                nn.init.ones_(m.weight)
                nn.init.zeros_(m.bias)
        if self.cfg.pos_init == "sincos":
            d = self.cfg.d_model
            with torch.no_grad():
                self.enc_pos.copy_(sincos_grid(self.cfg.grid_size, d))
                self.dec_pos.copy_(sincos_table(torch.arange(self.cfg.max_target_len), d))

    # encoder

    def embed_patches(self, images: torch.Tensor) -> torch.Tensor:
        size = self.cfg.image_size
        if images.dim() != 4 or images.shape[1:] != (3, size, size):
            raise ValueError(f"expected images of shape (B, 3, {size}, {size}), got {tuple(images.shape)}")
        return self.stem(images) + self.enc_pos

    def encode(self, images: torch.Tensor) -> torch.Tensor:
        x = self.embed_patches(images)
        for layer in self.encoder:
            x = layer(x)
        return self.enc_ln(x)

    # decoder

    def _check_tokens(self, tokens: torch.Tensor, check_length: bool = True):
        if check_length and tokens.shape[-1] > self.cfg.max_target_len:
            raise ValueError(f"sequence length {tokens.shape[-1]} > max_target_len")
        if tokens.numel() and (int(tokens.min()) < 0 or int(tokens.max()) >= self.cfg.vocab_size):
            raise ValueError(f"token ids must lie in [0, {self.cfg.vocab_size - 1}]")

    def _shifted_embeddings(self, tokens: torch.Tensor) -> torch.Tensor:
        b, n = tokens.shape
        start = self.start.expand(b, 1, -1)
        x = torch.cat([start, self.token_emb(tokens[:, : n - 1])], dim=1)
        return x + self.dec_pos[:n]

    def decode(self, features: torch.Tensor, tokens: torch.Tensor, return_attention: bool = False):
        """Logits (B, L, V): row j scores the token at slot j given tokens[:, :j].

        The decoder reads a learned start vector followed by tokens[:, :-1], so
        row j never depends on tokens at slots >= j.
        """
        self._check_tokens(tokens)
        n = tokens.shape[1]
        x = self._shifted_embeddings(tokens)
        mask = torch.ones(n, n, dtype=torch.bool).tril()
        attn = []
        for layer in self.decoder:
            h = layer.ln1(x)
            x, w = layer(x, layer.self_attn.project_kv(h), layer.cross_attn.project_kv(features), mask)
            attn.append(w)
        logits = self.head(self.dec_ln(x))
        if return_attention:
            return logits, attn
        return logits

    def forward(self, images, tokens):
        return self.decode(self.encode(images), tokens)

    def begin_decode(self, features: torch.Tensor) -> DecodeState:
        cross = [layer.cross_attn.project_kv(features) for layer in self.decoder]
        return DecodeState(cross, [None] * len(self.decoder), 0)

    def decode_step(self, state: DecodeState, prev_tokens: torch.Tensor | None):
        """Advance one slot. ``prev_tokens`` (B,) is the token emitted at the
        previous slot, or None at slot 0. Returns (logits (B, V), cross
        attention per layer (B, H, n_patches), new state)."""
        t = state.position
        if t >= self.cfg.max_target_len:
            raise ValueError("decode past max_target_len")
        b = state.cross_kv[0][0].shape[0] if state.cross_kv else (1 if prev_tokens is None else len(prev_tokens))
        if prev_tokens is None:
            x = self.start.expand(b, 1, -1)
        else:
            self._check_tokens(prev_tokens, check_length=False)
            x = self.token_emb(prev_tokens).unsqueeze(1)
        x = x + self.dec_pos[t]
        new_self, attn = [], []
        for layer, cache, cross in zip(self.decoder, state.self_kv, state.cross_kv):
            k, v = layer.self_attn.project_kv(layer.ln1(x))
            if cache is not None:
                k = torch.cat([cache[0], k], dim=2)
                v = torch.cat([cache[1], v], dim=2)
            x, w = layer(x, (k, v), cross)
            new_self.append((k, v))
            attn.append(w[:, :, 0])
        logits = self.head(self.dec_ln(x))[:, 0]
        return logits, attn, DecodeState(state.cross_kv, new_self, t + 1)


def encode_image(model: Seq2SeqDetector, image) -> torch.Tensor:
    """One uint8 (H, W, 3) image to its (n_patches, d_model) encoding."""
    dtype = next(model.parameters()).dtype
    return model.encode(images_to_tensor(image, dtype))[0]


def decode_logits(model: Seq2SeqDetector, features: torch.Tensor, input_tokens) -> torch.Tensor:
    """(L, V) logits for one token list; ``features`` is (n_patches, d) or (1, n_patches, d)."""
    if features.dim() == 2:
        features = features.unsqueeze(0)
    tokens = torch.as_tensor(list(input_tokens), dtype=torch.long).unsqueeze(0)
    return model.decode(features, tokens)[0]


def sequence_loss(logits, target, weights, normalization: str = "mean") -> torch.Tensor:
    """Weighted token negative log-likelihood.

    Positions with zero weight are excluded before the softmax, so they add
    exactly nothing to the value or the gradient.
    """
    logits = torch.as_tensor(logits)
    target = torch.as_tensor(target, dtype=torch.long).reshape(-1)
    weights = torch.as_tensor(weights, dtype=logits.dtype).reshape(-1)
    flat = logits.reshape(-1, logits.shape[-1])
    if not (flat.shape[0] == target.shape[0] == weights.shape[0]):
        raise ValueError("logits, target and weights are not aligned")
    keep = torch.nonzero(weights != 0).squeeze(1)
    w = weights[keep]
    nll = -torch.log_softmax(flat[keep], dim=-1).gather(1, target[keep].unsqueeze(1)).squeeze(1)
    total = (w * nll).sum()
    if normalization == "sum":
        return total
    return total / torch.clamp(w.sum(), min=1.0)


class Batch(NamedTuple):
    images: torch.Tensor  # (B, 3, H, W)
    inputs: torch.Tensor  # (B, L) long
    targets: torch.Tensor  # (B, L) long
    weights: torch.Tensor  # (B, L)


def lr_at_step(step: int, peak: float, warmup_steps: int, total_steps: int) -> float:
    """Linear warmup to ``peak`` over ``warmup_steps`` then linear decay to 0."""
    if warmup_steps > 0 and step < warmup_steps:
        return peak * (step + 1) / warmup_steps
    remaining = total_steps - warmup_steps
    if remaining <= 0:
        return peak
    return peak * max(0.0, (total_steps - step) / remaining)


def make_optimizer(model: nn.Module, cfg: TrainConfig) -> torch.optim.AdamW:
    decay, no_decay = [], []
    for name, p in model.named_parameters():
        (decay if p.dim() >= 2 and "pos" not in name and "emb" not in name else no_decay).append(p)
    groups = [
        {"params": decay, "weight_decay": cfg.weight_decay},
        {"params": no_decay, "weight_decay": 0.0},
    ]
    return torch.optim.AdamW(groups, lr=cfg.learning_rate, betas=(0.9, 0.999), eps=1e-8)


def train_step(
    model: Seq2SeqDetector,
    optimizer: torch.optim.Optimizer,
    batch: Batch,
    cfg: TrainConfig,
    lr: float,
) -> float:
    """One AdamW update at learning rate ``lr``; returns the pre-update loss."""
    if batch.images.shape[0] == 0:
        raise ValueError("empty batch")
    model.train()
    for group in optimizer.param_groups:
        group["lr"] = lr
    logits = model(batch.images, batch.inputs)
    loss = sequence_loss(logits, batch.targets, batch.weights, cfg.loss_normalization)
    value = float(loss.detach())
    if not math.isfinite(value):
        raise TrainingError(
            f"non-finite loss {value} (lr={lr:g}, batch of {batch.images.shape[0]}, "
            f"max |logit|={float(logits.detach().abs().max()):g})"
        )
    optimizer.zero_grad(set_to_none=True)
    loss.backward()
    if cfg.grad_clip > 0:
        nn.utils.clip_grad_norm_(model.parameters(), cfg.grad_clip)
    optimizer.step()
    return value


def tiny_config(**overrides) -> ModelConfig:
    """A model small enough for finite-difference checks (a few thousand weights)."""
    base = dict(
        image_size=8, patch_size=4, d_model=8, n_heads=2, d_ffn=16,
        n_encoder_layers=1, n_decoder_layers=1, vocab_size=13, max_target_len=12,
        dropout_rate=0.0,
    )
    base.update(overrides)
    return ModelConfig(**base)


def gradient_check(
    cfg: ModelConfig | None = None,
    n_samples: int = 200,
    seq_len: int = 10,
    batch_size: int = 2,
    eps: float = 1e-5,
    seed: int = 0,
    zero_weight_fraction: float = 0.3,
) -> float:
    """Worst relative error between autograd and central differences.

    Runs in float64 over ``n_samples`` randomly chosen scalar weights. The
    relative error is |a - n| / max(|a|, |n|); entries where both sides are
    below the finite-difference resolution 10 * |loss| * eps_machine / eps
    count as agreeing.
    """
    cfg = cfg or tiny_config()
    torch.manual_seed(seed)
    rng = np.random.default_rng(seed)
    model = Seq2SeqDetector(cfg).double().eval()
    # random init everywhere so layer-norm gains/biases get non-trivial gradients
    with torch.no_grad():
        for p in model.parameters():
            p.add_(torch.from_numpy(rng.normal(0.0, 0.1, p.shape)))

    images = torch.from_numpy(rng.uniform(-1, 1, (batch_size, 3, cfg.image_size, cfg.image_size)))
    tokens = torch.from_numpy(rng.integers(0, cfg.vocab_size, (batch_size, seq_len)))
    weights = torch.from_numpy((rng.random((batch_size, seq_len)) >= zero_weight_fraction).astype(np.float64))

    def loss_fn():
        return sequence_loss(model(images, tokens), tokens, weights)

    model.zero_grad()
    loss_fn().backward()
    params = list(model.parameters())
    sizes = np.array([p.numel() for p in params])
    flat_ids = rng.choice(sizes.sum(), size=min(n_samples, int(sizes.sum())), replace=False)
    offsets = np.concatenate([[0], np.cumsum(sizes)])

    worst = 0.0
    with torch.no_grad():
        for fid in flat_ids:
            pi = int(np.searchsorted(offsets, fid, side="right") - 1)
            p = params[pi].view(-1)
            j = int(fid - offsets[pi])
            grad = params[pi].grad
            analytic = 0.0 if grad is None else float(grad.view(-1)[j])
            orig = float(p[j])
            p[j] = orig + eps
            up = float(loss_fn())
            p[j] = orig - eps
            down = float(loss_fn())
            p[j] = orig
            numeric = (up - down) / (2 * eps)
            # below this the difference quotient is rounding noise (a gradient
            # that is exactly zero, e.g. attention key biases, lands here)
            resolution = 10 * max(abs(up), abs(down)) * np.finfo(np.float64).eps / eps
            scale = max(abs(analytic), abs(numeric))
            rel = 0.0 if scale <= resolution else abs(analytic - numeric) / scale
            worst = max(worst, rel)
    return worst
