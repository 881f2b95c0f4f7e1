"""Image and sequence augmentation for training."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Literal, NamedTuple, Sequence

import numpy as np
from PIL import Image

from .codec import (
    AnnotatedObject,
    BBox,
    OrderingStrategy,
    TokenSequence,
    Vocabulary,
    construct_sequence,
    encode_object,
    order_objects,
)


@dataclass
class AugmentConfig:
    total_objects: int = 100
    jitter_fraction: float = 0.5
    jitter_magnitude: float = 0.2
    class_dropout_p: float = 0.5
    scale_range: tuple[float, float] = (0.3, 2.0)
    crop_size: int = 64
    # False trains on EOS-terminated sequences without noise objects
    seq_aug: bool = True
    # hook for colour distortion; not implemented for synthetic data
    color_distortion: float = 0.0

    def __post_init__(self):
        self.scale_range = tuple(float(s) for s in self.scale_range)
        if self.total_objects < 1:
            raise ValueError("total_objects must be positive")
        if not (0 <= self.jitter_fraction <= 1 and 0 <= self.class_dropout_p <= 1):
            raise ValueError("fractions must lie in [0, 1]")
        lo, hi = self.scale_range
        if not 0 < lo <= hi:
            raise ValueError(f"bad scale_range {self.scale_range}")
        if self.color_distortion:
            raise NotImplementedError("colour distortion is not supported")


class NoiseObject(NamedTuple):
    box: BBox
    origin: Literal["jittered", "random"]
    class_id: int


def apply_scale_crop(
    image: np.ndarray,
    objects: Sequence[AnnotatedObject],
    scale: float,
    offset: tuple[int, int],
    crop_size: int,
) -> tuple[np.ndarray, list[AnnotatedObject]]:
    """Resize by ``scale``, then take the crop_size window at ``offset`` (y, x)
    of the resized image, zero-padding where the window runs past it."""
    h, w = image.shape[:2]
    nh, nw = max(1, round(h * scale)), max(1, round(w * scale))
    if (nh, nw) != (h, w):
        resized = np.asarray(Image.fromarray(image).resize((nw, nh), Image.BILINEAR))
    else:
        resized = image
    oy, ox = offset
    out = np.zeros((crop_size, crop_size, image.shape[2]), dtype=image.dtype)
    window = resized[oy : oy + crop_size, ox : ox + crop_size]
    out[: window.shape[0], : window.shape[1]] = window

    kept = []
    for obj in objects:
        b = obj.box
        y0 = min(max(b.y_min * nh - oy, 0.0), window.shape[0])
        y1 = min(max(b.y_max * nh - oy, 0.0), window.shape[0])
        x0 = min(max(b.x_min * nw - ox, 0.0), window.shape[1])
        x1 = min(max(b.x_max * nw - ox, 0.0), window.shape[1])
        if y1 - y0 <= 0 or x1 - x0 <= 0:
            continue
        box = BBox.clipped(y0 / crop_size, x0 / crop_size, y1 / crop_size, x1 / crop_size)
        kept.append(AnnotatedObject(box, obj.class_id))
    return out, kept


def scale_jitter_crop(image, objects, cfg: AugmentConfig, rng: np.random.Generator):
    """Random scale from ``cfg.scale_range`` followed by a random square crop."""
    if image.size == 0:
        raise ValueError("empty image")
    scale = float(rng.uniform(*cfg.scale_range))
    h, w = image.shape[:2]
    nh, nw = max(1, round(h * scale)), max(1, round(w * scale))
    oy = int(rng.integers(0, max(0, nh - cfg.crop_size) + 1))
    ox = int(rng.integers(0, max(0, nw - cfg.crop_size) + 1))
    return apply_scale_crop(image, objects, scale, (oy, ox), cfg.crop_size)


def synthesize_noise_objects(
    gt: Sequence[AnnotatedObject],
    count: int,
    cfg: AugmentConfig,
    rng: np.random.Generator,
    n_classes: int,
) -> list[NoiseObject]:
    """``floor(jitter_fraction * count)`` jittered ground-truth copies plus
    uniformly random boxes, shuffled together.

    A jittered copy shifts the box by up to +-jitter_magnitude of its size
    per axis and grows or shrinks each side length by the same relative
    amount; it keeps the source label. Random boxes get a random label.
    """
    if count < 0:
        raise ValueError("count must be non-negative")
    n_jitter = int(np.floor(cfg.jitter_fraction * count)) if gt else 0
    m = cfg.jitter_magnitude
    noise = []
    for _ in range(n_jitter):
        src = gt[int(rng.integers(0, len(gt)))]
        b = src.box
        h, w = b.height, b.width
        dy, dx, dh, dw = rng.uniform(-m, m, size=4) * np.array([h, w, h, w])
        box = BBox.clipped(b.y_min + dy - dh / 2, b.x_min + dx - dw / 2, b.y_max + dy + dh / 2, b.x_max + dx + dw / 2)
        noise.append(NoiseObject(box, "jittered", src.class_id))
    for _ in range(count - n_jitter):
        ys = np.sort(rng.uniform(0, 1, size=2))
        xs = np.sort(rng.uniform(0, 1, size=2))
        box = BBox(float(ys[0]), float(xs[0]), float(ys[1]), float(xs[1]))
        noise.append(NoiseObject(box, "random", int(rng.integers(0, n_classes))))
    return [noise[i] for i in rng.permutation(len(noise))]


def augment_sequence(
    real: Sequence[AnnotatedObject],
    noise: Sequence[NoiseObject],
    vocab: Vocabulary,
    cfg: AugmentConfig,
    rng: np.random.Generator,
    strategy: OrderingStrategy | str = OrderingStrategy.RANDOM,
) -> TokenSequence:
    """Real objects (in ``strategy`` order) followed by noise objects.

    Targets: real tokens unchanged; for noise, NA (weight 0) in the four
    coordinate slots and NOISE (weight 1) in the class slot. Input class
    tokens of real objects are replaced by NA with probability
    ``cfg.class_dropout_p``. No EOS is appended.
    """
    if len(real) + len(noise) != cfg.total_objects:
        raise ValueError(
            f"{len(real)} real + {len(noise)} noise objects != total_objects={cfg.total_objects}"
        )
    inputs: list[int] = []
    targets: list[int] = []
    weights: list[float] = []
    for obj in order_objects(real, strategy, rng):
        tokens = encode_object(obj, vocab)
        inp = list(tokens)
        if rng.random() < cfg.class_dropout_p:
            inp[4] = vocab.na
        inputs += inp
        targets += tokens
        weights += [1.0] * 5
    for obj in noise:
        inputs += encode_object(AnnotatedObject(obj.box, obj.class_id), vocab)
        targets += [vocab.na] * 4 + [vocab.noise]
        weights += [0.0] * 4 + [1.0]
    return TokenSequence(inputs, targets, weights)


def build_training_sequence(
    objects: Sequence[AnnotatedObject],
    vocab: Vocabulary,
    cfg: AugmentConfig,
    rng: np.random.Generator,
    strategy: OrderingStrategy | str = OrderingStrategy.RANDOM,
) -> TokenSequence:
    """Full sequence pipeline for one augmented view.

    With ``cfg.seq_aug`` the sequence is padded with noise objects up to
    ``total_objects``; otherwise it is the plain EOS-terminated sequence with
    class-token dropout applied to the input only.
    """
    if len(objects) > cfg.total_objects:
        raise ValueError(f"{len(objects)} objects exceed total_objects={cfg.total_objects}")
    if cfg.seq_aug:
        noise = synthesize_noise_objects(objects, cfg.total_objects - len(objects), cfg, rng, vocab.n_classes)
        return augment_sequence(objects, noise, vocab, cfg, rng, strategy)
    seq = construct_sequence(objects, vocab, strategy, rng)
    inputs = list(seq.input)
    for j in range(4, len(inputs) - 1, 5):
        if rng.random() < cfg.class_dropout_p:
            inputs[j] = vocab.na
    return TokenSequence(inputs, seq.target, seq.weights)
