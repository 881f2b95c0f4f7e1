"""Analysis artefacts: quantization error figures, cross-attention dumps and
coordinate-token embedding similarity."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402
import torch  # noqa: E402
from PIL import Image, ImageDraw  # noqa: E402

from .codec import AnnotatedObject, BBox, Vocabulary, dequantize_coord, quantize_coord  # noqa: E402
from .infer import DecodeConfig, generate  # noqa: E402
from .model import Seq2SeqDetector, images_to_tensor  # noqa: E402


# quantization


def quantized_box(box: BBox, n_bins: int) -> BBox:
    q = dequantize_coord(quantize_coord(np.array(box.as_tuple()), n_bins), n_bins)
    return BBox(*(float(v) for v in q))


def corner_displacement(objects: Sequence[AnnotatedObject], width: int, height: int, n_bins: int) -> np.ndarray:
    """Per-object maximum pixel shift of any box coordinate after the
    quantize/dequantize round trip."""
    if not objects:
        return np.zeros(0)
    raw = np.array([o.box.as_tuple() for o in objects])
    back = dequantize_coord(quantize_coord(raw, n_bins), n_bins)
    scale = np.array([height, width, height, width], dtype=np.float64)
    return (np.abs(back - raw) * scale).max(axis=1)


def _draw_boxes(image: np.ndarray, boxes: Sequence[BBox], color, scale: int) -> Image.Image:
    h, w = image.shape[:2]
    canvas = Image.fromarray(image).resize((w * scale, h * scale), Image.NEAREST)
    draw = ImageDraw.Draw(canvas)
    for b in boxes:
        x0, y0 = b.x_min * w * scale, b.y_min * h * scale
        # coarse bins can collapse a box to a line; draw it as one
        x1, y1 = max(x0, b.x_max * w * scale - 1), max(y0, b.y_max * h * scale - 1)
        draw.rectangle([x0, y0, x1, y1], outline=color)
    return canvas


def quantization_figure(
    image: np.ndarray,
    objects: Sequence[AnnotatedObject],
    bins: Sequence[int],
    out_dir: str | Path,
    scale: int = 4,
) -> list[Path]:
    """One PNG per bin count with round-tripped boxes drawn over the image,
    plus ``quantization.txt`` listing the pixel displacement per bin count."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    h, w = image.shape[:2]
    paths = []
    lines = ["n_bins max_px mean_px"]
    for n in bins:
        boxes = [quantized_box(o.box, n) for o in objects]
        path = out / f"quantization_bins{n}.png"
        _draw_boxes(image, boxes, (255, 0, 0), scale).save(path)
        paths.append(path)
        d = corner_displacement(objects, w, h, n)
        lines.append(f"{n} {d.max() if d.size else 0.0:.6f} {d.mean() if d.size else 0.0:.6f}")
    (out / "quantization.txt").write_text("\n".join(lines) + "\n")
    return paths


# cross attention


@dataclass
class AttentionDump:
    grids: np.ndarray  # (n_tokens, grid, grid), each grid sums to 1
    tokens: list[int]
    labels: list[str]


def shuffle_pixels(image: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    h, w = image.shape[:2]
    flat = image.reshape(h * w, -1)
    return flat[rng.permutation(h * w)].reshape(image.shape)


def decode_attention(model: Seq2SeqDetector, image: np.ndarray, vocab: Vocabulary, cfg: DecodeConfig) -> AttentionDump:
    """Cross attention (mean over layers and heads) for every generated token."""
    g = model.cfg.grid_size
    gen = generate(model, image, vocab, cfg, rng=np.random.default_rng(cfg.seed), record_attention=True)
    grids = np.stack(gen.attention).reshape(-1, g, g) if gen.attention else np.zeros((0, g, g))
    return AttentionDump(grids, gen.tokens, [f"t{i}:{tok}" for i, tok in enumerate(gen.tokens)])


def region_boxes(n: int) -> list[BBox]:
    return [BBox(i / n, j / n, (i + 1) / n, (j + 1) / n) for i in range(n) for j in range(n)]


@torch.no_grad()
def region_attention(model: Seq2SeqDetector, image: np.ndarray, vocab: Vocabulary, n: int) -> AttentionDump:
    """Force each cell of an n x n grid as a coordinate prefix and record the
    cross attention at the step that reads the fourth coordinate."""
    model.eval()
    g = model.cfg.grid_size
    regions = region_boxes(n)
    images = np.repeat(np.asarray(image)[None], len(regions), axis=0)
    dtype = next(model.parameters()).dtype
    state = model.begin_decode(model.encode(images_to_tensor(images, dtype)))
    prefix = np.array(
        [[vocab.coord_token(int(quantize_coord(c, vocab.n_bins))) for c in b.as_tuple()] for b in regions]
    )
    prev = None
    for j in range(4):
        _, _, state = model.decode_step(state, prev)
        prev = torch.from_numpy(prefix[:, j])
    _, attn, _ = model.decode_step(state, prev)
    grids = torch.stack(attn).mean(dim=(0, 2)).double().numpy().reshape(-1, g, g)
    labels = [f"region {i // n},{i % n}" for i in range(len(regions))]
    return AttentionDump(grids, prefix.reshape(-1).tolist(), labels)


def clip_for_display(grid: np.ndarray, top_fraction: float = 0.02) -> np.ndarray:
    """Cap the largest ``top_fraction`` of values so a few spikes do not wash
    out the colour scale. Only used for rendering."""
    cap = np.quantile(grid, 1.0 - top_fraction)
    return np.minimum(grid, cap)


def write_attention(dump: AttentionDump, image: np.ndarray, out_dir: str | Path, scale: int = 4) -> list[Path]:
    """Raw grids as text plus one overlay PNG per grid."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "attention.txt", "w") as f:
        for label, grid in zip(dump.labels, dump.grids):
            f.write(f"# {label}\n")
            np.savetxt(f, grid, fmt="%.8f")
    h, w = image.shape[:2]
    base = np.asarray(Image.fromarray(image).resize((w * scale, h * scale), Image.NEAREST), dtype=np.float64)
    paths = []
    for i, grid in enumerate(dump.grids):
        shown = clip_for_display(grid)
        shown = shown / shown.max() if shown.max() > 0 else shown
        heat = np.asarray(
            Image.fromarray((shown * 255).astype(np.uint8)).resize((w * scale, h * scale), Image.BILINEAR),
            dtype=np.float64,
        )[..., None] / 255.0
        overlay = 0.4 * base + 0.6 * heat * np.array([255.0, 64.0, 0.0])
        path = out / f"attention_{i:03d}.png"
        Image.fromarray(np.clip(overlay, 0, 255).astype(np.uint8)).save(path)
        paths.append(path)
    return paths


# embedding similarity


def coordinate_similarity(model: Seq2SeqDetector, vocab: Vocabulary) -> np.ndarray:
    """Cosine similarity between output-layer rows of the coordinate tokens."""
    w = model.head.weight.detach().double().numpy()[vocab.coord_token(0) : vocab.coord_token(vocab.n_bins - 1) + 1]
    w = w / np.maximum(np.linalg.norm(w, axis=1, keepdims=True), 1e-12)
    sim = w @ w.T
    sim = (sim + sim.T) / 2
    np.fill_diagonal(sim, 1.0)
    return sim


def near_far_similarity(sim: np.ndarray, near: int | None = None, far: int | None = None) -> tuple[float, float]:
    """Mean similarity of bin pairs with |i-j| <= near versus |i-j| >= far.

    Defaults scale with the bin count: near = max(1, n // 200), far = n // 4.
    """
    n = sim.shape[0]
    near = max(1, n // 200) if near is None else near
    far = max(near + 1, n // 4) if far is None else far
    i, j = np.indices(sim.shape)
    gap = np.abs(i - j)
    close = (gap <= near) & (gap > 0)
    return float(sim[close].mean()), float(sim[gap >= far].mean())


def write_similarity(sim: np.ndarray, out_dir: str | Path) -> tuple[Path, Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    txt = out / "embed_similarity.txt"
    np.savetxt(txt, sim, fmt="%.6f")
    png = out / "embed_similarity.png"
    fig, ax = plt.subplots(figsize=(5, 4))
    im = ax.imshow(sim, cmap="viridis", vmin=-1, vmax=1)
    ax.set_xlabel("coordinate bin")
    ax.set_ylabel("coordinate bin")
    fig.colorbar(im, ax=ax)
    fig.tight_layout()
    fig.savefig(png, dpi=100)
    plt.close(fig)
    return txt, png
