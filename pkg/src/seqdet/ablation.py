"""Ablation harnesses: object ordering strategies and sequence augmentation
with an EOS-offset sweep."""

from __future__ import annotations

import csv
import dataclasses
import hashlib
import io
import json
import math
import time
from pathlib import Path
from typing import Callable, Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .codec import OrderingStrategy  # noqa: E402
from .config import RunConfig  # noqa: E402
from .data import train_val_split  # noqa: E402
from .evaluation import EvalResult  # noqa: E402
from .train import evaluate, fit, load_run  # noqa: E402

Log = Callable[[str], None] | None


def source_digest() -> str:
    """Hash of the package sources, so cached runs are tied to the code that made them."""
    h = hashlib.sha256()
    for path in sorted(Path(__file__).parent.glob("*.py")):
        h.update(path.name.encode())
        h.update(path.read_bytes())
    return h.hexdigest()[:16]


def run_key(cfg: RunConfig, tag: str = "") -> str:
    """``tag`` separates otherwise identical runs, e.g. replicas."""
    blob = json.dumps(cfg.to_dict(), sort_keys=True).encode() + source_digest().encode() + tag.encode()
    return hashlib.sha256(blob).hexdigest()[:16]


def train_or_load(cfg: RunConfig, cache_dir: str | Path, on_log: Log = None, tag: str = ""):
    """Train ``cfg`` into ``cache_dir/<key>`` unless a finished run for the
    same config and source digest is already there.

    Returns (model, run_dir). A fresh run also records its wall and CPU
    seconds in ``timing.json``.
    """
    run_dir = Path(cache_dir) / run_key(cfg, tag)
    final = run_dir / "final.ckpt"
    if final.exists():
        return load_run(final).model, run_dir
    if run_dir.exists():
        # an interrupted run: start over so the result is not a resumed hybrid
        for f in run_dir.iterdir():
            f.unlink()
    cpu0 = time.process_time()
    result = fit(cfg, run_dir, evaluate_at_end=False, on_log=on_log)
    timing = {"wall_seconds": result.seconds, "cpu_seconds": time.process_time() - cpu0, "steps": result.step}
    (run_dir / "timing.json").write_text(json.dumps(timing, indent=1) + "\n")
    (run_dir / "config.yaml").write_text(cfg.to_yaml())
    return result.model, run_dir


def evaluate_cached(model, cfg: RunConfig, val, run_dir: str | Path, decode=None) -> EvalResult:
    """``evaluate`` with the metrics text stored next to the run, keyed by the
    decode settings and the validation ids."""
    decode = decode or cfg.decode
    blob = json.dumps({"decode": dataclasses.asdict(decode), "val": [s.image_id for s in val]}, sort_keys=True)
    path = Path(run_dir) / f"eval_{hashlib.sha256(blob.encode()).hexdigest()[:16]}.txt"
    if path.exists():
        return EvalResult.from_text(path.read_text())
    metrics, _ = evaluate(model, cfg, val, decode)
    path.write_text(metrics.to_text())
    return metrics


def _metric_row(prefix: dict, m: EvalResult) -> dict:
    row = dict(prefix)
    for k in EvalResult.field_names():
        v = getattr(m, k)
        row[k] = "absent" if v is None else f"{v:.6f}"
    return row


def write_table(rows: Sequence[dict], path: str | Path) -> str:
    """CSV with key columns first, then one column per EvalResult field."""
    buf = io.StringIO()
    if rows:
        writer = csv.DictWriter(buf, fieldnames=list(rows[0]), lineterminator="\n")
        writer.writeheader()
        writer.writerows(rows)
    text = buf.getvalue()
    Path(path).write_text(text)
    return text


def _val(v) -> float:
    return math.nan if v in (None, "absent") else float(v)


def run_ablation_ordering(
    cfg: RunConfig,
    strategies: Sequence[str],
    seeds: Sequence[int],
    out_dir: str | Path,
    cache_dir: str | Path | None = None,
    on_log: Log = None,
) -> list[dict]:
    """Train and evaluate one model per (strategy, seed); writes
    ``ordering.csv`` and ``ordering.png``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    cache = Path(cache_dir) if cache_dir is not None else out / "runs"
    rows = []
    val = None
    for strategy in strategies:
        OrderingStrategy(strategy)
        for seed in seeds:
            run_cfg = cfg.with_overrides({"data.ordering": strategy, "training.seed": seed})
            if val is None:
                val = train_val_split(run_cfg.data)[1]
            model, run_dir = train_or_load(run_cfg, cache, on_log)
            metrics = evaluate_cached(model, run_cfg, val, run_dir)
            rows.append(_metric_row({"strategy": strategy, "seed": seed}, metrics))
            if on_log:
                on_log(f"ordering {strategy} seed={seed} AP={metrics.AP} AR_at_100={metrics.AR_at_100}")
    write_table(rows, out / "ordering.csv")
    _plot_ordering(rows, out / "ordering.png")
    return rows


def ordering_medians(rows: Sequence[dict], field: str = "AP") -> dict[str, float]:
    by: dict[str, list[float]] = {}
    for r in rows:
        by.setdefault(r["strategy"], []).append(_val(r[field]))
    return {k: float(np.median(v)) for k, v in by.items()}


def _plot_ordering(rows, path):
    ap, ar = ordering_medians(rows, "AP"), ordering_medians(rows, "AR_at_100")
    names = list(ap)
    x = np.arange(len(names))
    fig, axes = plt.subplots(1, 2, figsize=(9, 3.5))
    for ax, vals, title in ((axes[0], ap, "AP"), (axes[1], ar, "AR@100")):
        ax.bar(x, [vals[n] for n in names], color="tab:blue")
        ax.set_xticks(x, names, rotation=30, ha="right")
        ax.set_title(f"{title} (median over seeds)")
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)


def run_ablation_seqaug(
    cfg: RunConfig,
    eos_offsets: Sequence[float],
    seeds: Sequence[int],
    out_dir: str | Path,
    cache_dir: str | Path | None = None,
    on_log: Log = None,
) -> list[dict]:
    """Train with and without sequence augmentation and evaluate both over
    the same EOS-offset grid; writes ``seqaug.csv`` and ``seqaug.png``.

    The augmented model decodes at fixed length with EOS masked, so its
    result does not depend on the offset; it is evaluated once per seed and
    reported at every grid point. The plain model decodes until EOS with the
    offset added to the EOS logit.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    cache = Path(cache_dir) if cache_dir is not None else out / "runs"
    rows = []
    val = None
    for seed in seeds:
        aug_cfg = cfg.with_overrides(
            {"augmentation.seq_aug": True, "training.seed": seed, "decode.fixed_length": True}
        )
        plain_cfg = cfg.with_overrides(
            {"augmentation.seq_aug": False, "training.seed": seed, "decode.fixed_length": False}
        )
        if val is None:
            val = train_val_split(aug_cfg.data)[1]
        aug_model, aug_dir = train_or_load(aug_cfg, cache, on_log)
        aug_metrics = evaluate_cached(aug_model, aug_cfg, val, aug_dir)
        plain_model, plain_dir = train_or_load(plain_cfg, cache, on_log)
        for off in eos_offsets:
            plain_metrics = evaluate_cached(
                plain_model, plain_cfg, val, plain_dir, dataclasses.replace(plain_cfg.decode, eos_offset=float(off))
            )
            rows.append(_metric_row({"model": "seq_aug", "seed": seed, "eos_offset": off}, aug_metrics))
            rows.append(_metric_row({"model": "no_seq_aug", "seed": seed, "eos_offset": off}, plain_metrics))
            if on_log:
                on_log(f"seqaug seed={seed} offset={off} plain AP={plain_metrics.AP} AR={plain_metrics.AR_at_100}")
    write_table(rows, out / "seqaug.csv")
    _plot_seqaug(rows, out / "seqaug.png")
    return rows


def matched_ap_gaps(rows: Sequence[dict], min_recall: float = 0.8) -> dict[int, float]:
    """Per seed: seq-aug AP minus the plain model's best AP among offsets
    reaching AR@100 >= min_recall. When no offset reaches it, the plain
    model's highest-recall point is used. The gap is -inf when the seq-aug
    model itself stays below min_recall."""
    gaps = {}
    for seed in sorted({r["seed"] for r in rows}):
        aug = [r for r in rows if r["seed"] == seed and r["model"] == "seq_aug"]
        plain = [r for r in rows if r["seed"] == seed and r["model"] == "no_seq_aug"]
        aug_ap, aug_ar = _val(aug[0]["AP"]), _val(aug[0]["AR_at_100"])
        if not aug_ar >= min_recall:
            gaps[seed] = -math.inf
            continue
        reached = [r for r in plain if _val(r["AR_at_100"]) >= min_recall]
        if reached:
            base = max(_val(r["AP"]) for r in reached)
        else:
            base = _val(max(plain, key=lambda r: _val(r["AR_at_100"]))["AP"])
        gaps[seed] = aug_ap - base
    return gaps


def _plot_seqaug(rows, path):
    fig, ax = plt.subplots(figsize=(5, 4))
    for model, style in (("no_seq_aug", "o-"), ("seq_aug", "s--")):
        for seed in sorted({r["seed"] for r in rows}):
            pts = [r for r in rows if r["model"] == model and r["seed"] == seed]
            ax.plot([_val(r["AR_at_100"]) for r in pts], [_val(r["AP"]) for r in pts], style,
                    label=f"{model} seed {seed}", alpha=0.8)
    ax.set_xlabel("AR@100")
    ax.set_ylabel("AP")
    ax.legend(fontsize=7)
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)
