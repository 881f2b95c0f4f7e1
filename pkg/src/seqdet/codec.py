"""Conversion between object sets and discrete token sequences.

Token layout for a vocabulary with ``n_bins`` coordinate bins and ``n_classes``
classes::

    0                              EOS
    1 .. n_bins                    coordinate bins 0 .. n_bins-1 (token = bin + 1)
    n_bins+1 .. n_bins+n_classes   class tokens
    n_bins+n_classes+1             NOISE class
    n_bins+n_classes+2             NA (loss weight always zero)
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, NamedTuple, Sequence

import numpy as np


@dataclass(frozen=True, slots=True)
class BBox:
    """Box in normalized corner coordinates (y by image height, x by width)."""

    y_min: float
    x_min: float
    y_max: float
    x_max: float

    def __post_init__(self):
        if not (0.0 <= self.y_min <= self.y_max <= 1.0 and 0.0 <= self.x_min <= self.x_max <= 1.0):
            raise ValueError(f"invalid box {self.as_tuple()}")

    def as_tuple(self) -> tuple[float, float, float, float]:
        return (self.y_min, self.x_min, self.y_max, self.x_max)

    @property
    def height(self) -> float:
        return self.y_max - self.y_min

    @property
    def width(self) -> float:
        return self.x_max - self.x_min

    @property
    def area(self) -> float:
        return self.height * self.width

    @classmethod
    def clipped(cls, y_min: float, x_min: float, y_max: float, x_max: float) -> "BBox":
        """Clip to the unit square and order each coordinate pair."""
        ys = sorted(min(max(float(v), 0.0), 1.0) for v in (y_min, y_max))
        xs = sorted(min(max(float(v), 0.0), 1.0) for v in (x_min, x_max))
        return cls(ys[0], xs[0], ys[1], xs[1])


@dataclass(frozen=True, slots=True)
class AnnotatedObject:
    box: BBox
    class_id: int

    def __post_init__(self):
        if self.class_id < 0:
            raise ValueError(f"negative class id {self.class_id}")


@dataclass(frozen=True)
class Vocabulary:
    n_bins: int
    n_classes: int

    eos = 0

    def __post_init__(self):
        if self.n_bins < 2:
            raise ValueError("n_bins must be >= 2")
        if self.n_classes < 1:
            raise ValueError("n_classes must be >= 1")

    @property
    def class_offset(self) -> int:
        return 1 + self.n_bins

    @property
    def noise(self) -> int:
        return 1 + self.n_bins + self.n_classes

    @property
    def na(self) -> int:
        return 2 + self.n_bins + self.n_classes

    @property
    def size(self) -> int:
        return self.n_bins + self.n_classes + 3

    def __len__(self) -> int:
        return self.size

    def coord_token(self, bin_index: int) -> int:
        if not 0 <= bin_index < self.n_bins:
            raise ValueError(f"bin {bin_index} outside [0, {self.n_bins - 1}]")
        return int(bin_index) + 1

    def class_token(self, class_id: int) -> int:
        if not 0 <= class_id < self.n_classes:
            raise ValueError(f"class {class_id} outside [0, {self.n_classes - 1}]")
        return self.class_offset + int(class_id)

    def token_class(self, token: int) -> int:
        if not self.is_class(token):
            raise ValueError(f"token {token} is not a class token")
        return token - self.class_offset

    def is_eos(self, token: int) -> bool:
        return token == 0

    def is_coord(self, token: int) -> bool:
        return 1 <= token <= self.n_bins

    def is_class(self, token: int) -> bool:
        return self.class_offset <= token < self.noise

    def is_noise(self, token: int) -> bool:
        return token == self.noise

    def is_na(self, token: int) -> bool:
        return token == self.na

    def kind(self, token: int) -> str:
        if self.is_eos(token):
            return "eos"
        if self.is_coord(token):
            return "coord"
        if self.is_class(token):
            return "class"
        if self.is_noise(token):
            return "noise"
        if self.is_na(token):
            return "na"
        raise ValueError(f"token {token} outside vocabulary of size {self.size}")


@dataclass
class TokenSequence:
    """Aligned decoder input, prediction target and per-token loss weight."""

    input: list[int]
    target: list[int]
    weights: list[float]

    def __post_init__(self):
        if not (len(self.input) == len(self.target) == len(self.weights)):
            raise ValueError(
                f"length mismatch: input {len(self.input)}, target {len(self.target)}, "
                f"weights {len(self.weights)}"
            )

    def __len__(self) -> int:
        return len(self.target)


class OrderingStrategy(str, enum.Enum):
    RANDOM = "random"
    AREA = "area"
    DIST2ORI = "dist2ori"
    CLASS = "class"
    CLASS_AREA = "class_area"
    CLASS_DIST2ORI = "class_dist2ori"


def _check_bins(n_bins) -> None:
    if np.any(np.asarray(n_bins) < 2):
        raise ValueError("n_bins must be >= 2")


def quantize_coord(x, n_bins):
    """Map a coordinate in [0, 1] to a bin index in [0, n_bins - 1].

    Works elementwise on arrays; scalars come back as ``int``.
    """
    _check_bins(n_bins)
    xa = np.asarray(x, dtype=np.float64)
    if np.any(~((xa >= 0.0) & (xa <= 1.0))):
        raise ValueError("coordinate outside [0, 1]")
    bins = np.floor(xa * (np.asarray(n_bins) - 1)).astype(np.int64)
    if bins.ndim == 0:
        return int(bins)
    return bins


def dequantize_coord(k, n_bins):
    """Inverse of :func:`quantize_coord`: bin index to the bin's lower edge."""
    _check_bins(n_bins)
    ka = np.asarray(k)
    nb = np.asarray(n_bins)
    if np.any((ka < 0) | (ka > nb - 1)):
        raise ValueError("bin index out of range")
    x = ka.astype(np.float64) / (nb - 1)
    if x.ndim == 0:
        return float(x)
    return x


def encode_object(obj: AnnotatedObject, vocab: Vocabulary) -> list[int]:
    coords = [quantize_coord(v, vocab.n_bins) + 1 for v in obj.box.as_tuple()]
    return coords + [vocab.class_token(obj.class_id)]


def _area_key(obj: AnnotatedObject) -> float:
    return -obj.box.area


def _dist_key(obj: AnnotatedObject) -> float:
    return math.hypot(obj.box.y_min, obj.box.x_min)


def order_objects(
    objects: Sequence[AnnotatedObject],
    strategy: OrderingStrategy | str,
    rng: np.random.Generator,
    class_names: Sequence[str] | None = None,
) -> list[AnnotatedObject]:
    """Permute objects for serialization.

    Deterministic strategies use a stable sort so ties keep input order. When
    ``class_names`` is given the class key is the name instead of the id.
    """
    strategy = OrderingStrategy(strategy)
    objects = list(objects)
    if strategy is OrderingStrategy.RANDOM:
        return [objects[i] for i in rng.permutation(len(objects))]

    if class_names is not None:
        def class_key(o):
            return class_names[o.class_id]
    else:
        def class_key(o):
            return o.class_id

    keys = {
        OrderingStrategy.AREA: lambda o: _area_key(o),
        OrderingStrategy.DIST2ORI: lambda o: _dist_key(o),
        OrderingStrategy.CLASS: lambda o: class_key(o),
        OrderingStrategy.CLASS_AREA: lambda o: (class_key(o), _area_key(o)),
        OrderingStrategy.CLASS_DIST2ORI: lambda o: (class_key(o), _dist_key(o)),
    }
    return sorted(objects, key=keys[strategy])


def construct_sequence(
    objects: Sequence[AnnotatedObject],
    vocab: Vocabulary,
    strategy: OrderingStrategy | str,
    rng: np.random.Generator,
) -> TokenSequence:
    tokens: list[int] = []
    for obj in order_objects(objects, strategy, rng):
        tokens.extend(encode_object(obj, vocab))
    tokens.append(vocab.eos)
    return TokenSequence(list(tokens), list(tokens), [1.0] * len(tokens))


class ParsedObject(NamedTuple):
    box: BBox
    class_token: int
    slot: int  # index of the 5-token group in the raw sequence


def parse_sequence(tokens: Iterable[int], vocab: Vocabulary) -> list[ParsedObject]:
    """Recover (box, class token) groups from a generated sequence.

    Reading stops at the first EOS. Groups with a non-coordinate token in a
    coordinate slot, or neither a class nor the NOISE token in the last slot,
    are dropped. Inverted coordinate pairs are swapped.
    """
    body: list[int] = []
    for t in tokens:
        t = int(t)
        if t == vocab.eos:
            break
        body.append(t)

    out: list[ParsedObject] = []
    for slot in range(len(body) // 5):
        group = body[5 * slot : 5 * slot + 5]
        if not all(vocab.is_coord(t) for t in group[:4]):
            continue
        cls = group[4]
        if not (vocab.is_class(cls) or vocab.is_noise(cls)):
            continue
        y0, x0, y1, x1 = (dequantize_coord(t - 1, vocab.n_bins) for t in group[:4])
        if y0 > y1:
            y0, y1 = y1, y0
        if x0 > x1:
            x0, x1 = x1, x0
        out.append(ParsedObject(BBox(y0, x0, y1, x1), cls, slot))
    return out


def format_tokens(tokens: Iterable[int]) -> str:
    return " ".join(str(int(t)) for t in tokens)


def parse_token_line(line: str) -> list[int]:
    return [int(t) for t in line.split()]


def write_token_file(path: str | Path, sequences: Iterable[Iterable[int]]) -> None:
    with open(path, "w") as f:
        for seq in sequences:
            f.write(format_tokens(seq) + "\n")


def read_token_file(path: str | Path) -> list[list[int]]:
    with open(path) as f:
        return [parse_token_line(line) for line in f if line.strip()]
