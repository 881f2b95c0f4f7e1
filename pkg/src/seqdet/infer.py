"""Autoregressive decoding and detection extraction."""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple, Sequence

import numpy as np
import torch

from .codec import BBox, Vocabulary, parse_sequence
from .model import Seq2SeqDetector, images_to_tensor


@dataclass
class DecodeConfig:
    mode: str = "nucleus"  # "argmax" or "nucleus"
    p: float = 0.4
    # added to the EOS logit before the softmax; -inf disables EOS
    eos_offset: float = 0.0
    max_objects: int = 100
    # decode exactly 5 * max_objects tokens with EOS masked out
    fixed_length: bool = True
    seed: int = 0

    def __post_init__(self):
        if self.mode not in ("argmax", "nucleus"):
            raise ValueError(f"unknown decode mode {self.mode!r}")
        if not 0.0 <= self.p <= 1.0:
            raise ValueError(f"p={self.p} outside [0, 1]")
        if self.max_objects < 1:
            raise ValueError("max_objects must be positive")


@dataclass(frozen=True)
class Detection:
    box: BBox
    class_id: int
    score: float


def _nucleus_size(probs: np.ndarray, order: np.ndarray, p: float) -> int:
    csum = np.cumsum(probs[order])
    k = int(np.searchsorted(csum, p, side="left")) + 1
    return min(max(k, 1), len(probs))


def top_p_filter(probs, p: float) -> np.ndarray:
    """Keep the smallest highest-probability prefix with mass >= p, renormalized.

    Ties in probability are ranked by ascending token id; p=0 keeps only the
    argmax.
    """
    probs = np.asarray(probs, dtype=np.float64)
    order = np.argsort(-probs, kind="stable")
    k = _nucleus_size(probs, order, p)
    out = np.zeros_like(probs)
    keep = order[:k]
    out[keep] = probs[keep] / probs[keep].sum()
    return out


def nucleus_set(probs, p: float) -> set[int]:
    probs = np.asarray(probs, dtype=np.float64)
    order = np.argsort(-probs, kind="stable")
    return set(order[: _nucleus_size(probs, order, p)].tolist())


def sample_token(probs, mode: str, rng: np.random.Generator | None = None, p: float = 0.4) -> int:
    probs = np.asarray(probs, dtype=np.float64)
    if mode == "argmax":
        return int(np.argmax(probs))
    if mode != "nucleus":
        raise ValueError(f"unknown decode mode {mode!r}")
    filtered = top_p_filter(probs, p)
    csum = np.cumsum(filtered)
    idx = int(np.searchsorted(csum, rng.random(), side="right"))
    # float round-off can leave csum[-1] slightly below the draw
    return min(idx, int(np.flatnonzero(filtered)[-1]))


class Generation(NamedTuple):
    tokens: list[int]
    class_probs: list[np.ndarray]  # softmax at each class slot (every 5th token)
    attention: list[np.ndarray] | None = None  # (n_patches,) per generated token


def _decode_distribution(logits: torch.Tensor, cfg: DecodeConfig, vocab: Vocabulary) -> np.ndarray:
    logits = logits.double()
    if cfg.fixed_length or cfg.eos_offset == float("-inf"):
        logits[:, vocab.eos] = float("-inf")
    elif cfg.eos_offset != 0.0:
        logits[:, vocab.eos] += cfg.eos_offset
    return torch.softmax(logits, dim=-1).numpy()


@torch.no_grad()
def generate_batch(
    model: Seq2SeqDetector,
    images,
    vocab: Vocabulary,
    cfg: DecodeConfig,
    rngs: Sequence[np.random.Generator] | None = None,
    prefix: Sequence[int] = (),
    record_attention: bool = False,
) -> list[Generation]:
    """Decode a batch of uint8 images.

    ``prefix`` tokens are forced at the start of every sequence (not counted
    in the returned tokens). Each image samples from its own rng so results do
    not depend on batch composition.
    """
    model.eval()
    dtype = next(model.parameters()).dtype
    x = images_to_tensor(images, dtype)
    b = x.shape[0]
    if rngs is None:
        rngs = [np.random.default_rng([cfg.seed, i]) for i in range(b)]
    max_len = 5 * cfg.max_objects
    state = model.begin_decode(model.encode(x))

    prev = None
    for tok in prefix:
        _, _, state = model.decode_step(state, prev)
        prev = torch.full((b,), int(tok), dtype=torch.long)

    tokens = [[] for _ in range(b)]
    class_probs = [[] for _ in range(b)]
    attention = [[] for _ in range(b)]
    done = np.zeros(b, dtype=bool)
    for t in range(max_len):
        logits, attn, state = model.decode_step(state, prev)
        probs = _decode_distribution(logits, cfg, vocab)
        if record_attention:
            mean_attn = torch.stack(attn).mean(dim=(0, 2)).double().numpy() if attn else None
        nxt = np.zeros(b, dtype=np.int64)
        for i in range(b):
            if done[i]:
                continue
            tok = sample_token(probs[i], cfg.mode, rngs[i], cfg.p)
            nxt[i] = tok
            tokens[i].append(tok)
            if record_attention and mean_attn is not None:
                attention[i].append(mean_attn[i])
            if (len(prefix) + t) % 5 == 4:
                class_probs[i].append(probs[i].copy())
            if tok == vocab.eos and not cfg.fixed_length:
                done[i] = True
        if done.all():
            break
        prev = torch.from_numpy(nxt)
    return [
        Generation(tokens[i], class_probs[i], attention[i] if record_attention else None)
        for i in range(b)
    ]


def generate(model, image, vocab: Vocabulary, cfg: DecodeConfig, rng=None, **kw) -> Generation:
    rngs = None if rng is None else [rng]
    return generate_batch(model, np.asarray(image)[None], vocab, cfg, rngs, **kw)[0]


def extract_detections(tokens, class_probs, vocab: Vocabulary) -> list[Detection]:
    """Parse generated tokens into scored detections.

    A NOISE class emission is replaced by the most likely real class in that
    slot's distribution; the score is the slot probability of the chosen class.
    """
    lo, hi = vocab.class_offset, vocab.noise
    dets = []
    for obj in parse_sequence(tokens, vocab):
        if obj.slot >= len(class_probs):
            continue
        dist = np.asarray(class_probs[obj.slot])
        if vocab.is_noise(obj.class_token):
            token = lo + int(np.argmax(dist[lo:hi]))
        else:
            token = obj.class_token
        dets.append(Detection(obj.box, token - lo, float(dist[token])))
    dets.sort(key=lambda d: -d.score)
    return dets


def detect(model, images, vocab: Vocabulary, cfg: DecodeConfig, image_ids=None, batch_size: int = 64):
    """Detections for many images, keyed by image id."""
    images = np.asarray(images)
    ids = list(range(len(images))) if image_ids is None else list(image_ids)
    out = {}
    for s in range(0, len(images), batch_size):
        chunk = ids[s : s + batch_size]
        rngs = [np.random.default_rng([cfg.seed, int(i)]) for i in chunk]
        gens = generate_batch(model, images[s : s + batch_size], vocab, cfg, rngs)
        for iid, g in zip(chunk, gens):
            out[iid] = extract_detections(g.tokens, g.class_probs, vocab)
    return out


def format_detections(dets_by_image: dict) -> str:
    lines = []
    for iid in sorted(dets_by_image):
        for d in dets_by_image[iid]:
            b = d.box
            lines.append(
                f"{iid} {d.class_id} {d.score:.6f} {b.y_min:.6f} {b.x_min:.6f} {b.y_max:.6f} {b.x_max:.6f}"
            )
    return "\n".join(lines) + ("\n" if lines else "")


def parse_detections(text: str) -> dict[int, list[Detection]]:
    out: dict[int, list[Detection]] = {}
    for n, line in enumerate(text.splitlines(), 1):
        if not line.strip():
            continue
        parts = line.split()
        if len(parts) != 7:
            raise ValueError(f"line {n}: expected 7 fields, got {len(parts)}")
        iid, cls = int(parts[0]), int(parts[1])
        score, *coords = (float(v) for v in parts[2:])
        out.setdefault(iid, []).append(Detection(BBox(*coords), cls, score))
    return out
