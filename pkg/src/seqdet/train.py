"""Training loop, checkpoint plumbing and validation for a run configuration."""

from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch

from . import checkpoint
from .augment import build_training_sequence, scale_jitter_crop
from .codec import TokenSequence, Vocabulary
from .config import RunConfig
from .data import SHAPE_NAMES, Sample, train_val_split
from .evaluation import EvalResult, GroundTruth, average_precision
from .infer import DecodeConfig, detect
from .model import Batch, Seq2SeqDetector, images_to_tensor, lr_at_step, make_optimizer, train_step

log = logging.getLogger(__name__)


def set_deterministic(threads: int = 1) -> None:
    torch.set_num_threads(threads)
    torch.use_deterministic_algorithms(True)


def model_arrays(model: torch.nn.Module) -> dict[str, np.ndarray]:
    return {k: v.detach().cpu().numpy().astype(np.float32) for k, v in model.state_dict().items()}


def optimizer_arrays(model: torch.nn.Module, optimizer: torch.optim.Optimizer) -> dict[str, np.ndarray]:
    names = {id(p): n for n, p in model.named_parameters()}
    out = {}
    for group in optimizer.param_groups:
        for p in group["params"]:
            for key, value in optimizer.state.get(p, {}).items():
                out[f"optimizer/{names[id(p)]}/{key}"] = (
                    torch.as_tensor(value).detach().cpu().numpy().astype(np.float32)
                )
    return out


def restore_optimizer(model, optimizer, arrays: dict[str, np.ndarray]) -> None:
    params = dict(model.named_parameters())
    for key, arr in arrays.items():
        if not key.startswith("optimizer/"):
            continue
        name, field = key[len("optimizer/") :].rsplit("/", 1)
        optimizer.state[params[name]][field] = torch.from_numpy(arr.copy())


def save_run(path, model, optimizer, cfg: RunConfig, step: int, class_names: Sequence[str]) -> None:
    arrays = model_arrays(model)
    if optimizer is not None:
        arrays.update(optimizer_arrays(model, optimizer))
    metadata = {
        "config": cfg.to_dict(),
        "seed": cfg.training.seed,
        "step": step,
        "class_names": list(class_names),
    }
    checkpoint.save_checkpoint(path, arrays, metadata)


@dataclass
class LoadedRun:
    model: Seq2SeqDetector
    config: RunConfig
    step: int
    metadata: dict
    arrays: dict[str, np.ndarray]


def load_run(path) -> LoadedRun:
    arrays, metadata = checkpoint.load_checkpoint(path)
    cfg = RunConfig.from_dict(metadata["config"])
    model = Seq2SeqDetector(cfg.model)
    state = {k: torch.from_numpy(v.copy()) for k, v in arrays.items() if not k.startswith("optimizer/")}
    model.load_state_dict(state)
    model.eval()
    return LoadedRun(model, cfg, int(metadata["step"]), metadata, arrays)


def collate(images: Sequence[np.ndarray], seqs: Sequence[TokenSequence], vocab: Vocabulary, type_weights=None) -> Batch:
    """Stack views; shorter sequences are padded with NA targets of weight 0."""
    n = max(len(s) for s in seqs)
    inputs = np.full((len(seqs), n), vocab.na, dtype=np.int64)
    targets = np.full((len(seqs), n), vocab.na, dtype=np.int64)
    weights = np.zeros((len(seqs), n), dtype=np.float32)
    for i, s in enumerate(seqs):
        inputs[i, : len(s)] = s.input
        targets[i, : len(s)] = s.target
        w = np.asarray(s.weights, dtype=np.float32)
        if type_weights:
            w = w * np.array([type_weights.get(vocab.kind(t), 1.0) for t in s.target], dtype=np.float32)
        weights[i, : len(s)] = w
    return Batch(
        images_to_tensor(np.stack(images)),
        torch.from_numpy(inputs),
        torch.from_numpy(targets),
        torch.from_numpy(weights),
    )


def make_views(samples: Sequence[Sample], cfg: RunConfig, epoch: int, n_views: int) -> tuple[list, list]:
    """Augmented (image, sequence) pairs; view v of sample i draws from its own
    rng stream seeded by (seed, epoch, image_id, v)."""
    vocab = cfg.vocab
    images, seqs = [], []
    for s in samples:
        for v in range(n_views):
            rng = np.random.default_rng([cfg.training.seed, epoch, s.image_id, v])
            img, objs = scale_jitter_crop(s.image, s.objects, cfg.augmentation, rng)
            images.append(img)
            seqs.append(build_training_sequence(objs, vocab, cfg.augmentation, rng, cfg.data.ordering))
    return images, seqs


def ground_truth(samples: Sequence[Sample]) -> dict[int, GroundTruth]:
    return {s.image_id: GroundTruth(list(s.objects), s.width, s.height) for s in samples}


def evaluate(model, cfg: RunConfig, samples: Sequence[Sample], decode: DecodeConfig | None = None):
    """Detect on ``samples`` and score against their annotations."""
    decode = decode or cfg.decode
    dets = detect(model, np.stack([s.image for s in samples]), cfg.vocab, decode, [s.image_id for s in samples])
    return average_precision(dets, ground_truth(samples)), dets


@dataclass
class TrainResult:
    model: Seq2SeqDetector
    step: int
    losses: list[float]
    metrics: EvalResult | None
    seconds: float


def fit(
    cfg: RunConfig,
    out_dir: str | Path | None = None,
    resume: str | Path | None = None,
    max_steps: int | None = None,
    evaluate_at_end: bool = True,
    data: tuple[list[Sample], list[Sample]] | None = None,
    on_log: Callable[[str], None] | None = None,
) -> TrainResult:
    """Train per ``cfg.training`` and optionally write checkpoints and a log.

    The log (``train.log``) has one line per optimizer step plus an ``eval``
    line whenever validation runs. A final checkpoint ``final.ckpt`` is always
    written when ``out_dir`` is given.
    """
    t0 = time.perf_counter()
    tc = cfg.training
    vocab = cfg.vocab
    train, val = data if data is not None else train_val_split(cfg.data)
    class_names = SHAPE_NAMES[: vocab.n_classes]

    torch.manual_seed(tc.seed)
    model = Seq2SeqDetector(cfg.model)
    optimizer = make_optimizer(model, tc)
    step = 0
    if resume is not None:
        run = load_run(resume)
        model.load_state_dict(run.model.state_dict())
        # materialize state entries so restore can fill them
        restore_optimizer(model, optimizer, run.arrays)
        step = run.step

    steps_per_epoch = math.ceil(len(train) / tc.batch_size)
    total_steps = tc.epochs * steps_per_epoch
    warmup = int(round(tc.warmup_epochs * steps_per_epoch))
    n_views = 2 if tc.two_views_per_image else 1
    last = total_steps if max_steps is None else min(total_steps, max_steps)

    out = Path(out_dir) if out_dir is not None else None
    logf = None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        logf = open(out / "train.log", "a" if resume else "w")

    def emit(line: str):
        if logf:
            logf.write(line + "\n")
            logf.flush()
        if on_log:
            on_log(line)

    losses = []
    metrics = None
    try:
        while step < last:
            epoch, b = divmod(step, steps_per_epoch)
            order = np.random.default_rng([tc.seed, epoch]).permutation(len(train))
            idx = order[b * tc.batch_size : (b + 1) * tc.batch_size]
            images, seqs = make_views([train[i] for i in idx], cfg, epoch, n_views)
            batch = collate(images, seqs, vocab, tc.token_type_weights)
            lr = lr_at_step(step, tc.learning_rate, warmup, total_steps)
            loss = train_step(model, optimizer, batch, tc, lr)
            losses.append(loss)
            step += 1
            emit(
                f"step={step} epoch={epoch} lr={lr:.6e} loss={loss:.6f} "
                f"images={len(idx)} effective_batch={len(seqs)}"
            )
            epoch_done = step % steps_per_epoch == 0
            if out is not None and tc.checkpoint_every and step % tc.checkpoint_every == 0:
                save_run(out / f"step{step:07d}.ckpt", model, optimizer, cfg, step, class_names)
            if tc.eval_every and epoch_done and (step // steps_per_epoch) % tc.eval_every == 0 and step < last:
                m, _ = evaluate(model, cfg, val)
                emit(f"eval step={step} " + " ".join(f"{k}={_fmt(v)}" for k, v in vars(m).items()))
        if evaluate_at_end and val:
            metrics, _ = evaluate(model, cfg, val)
            emit(f"eval step={step} " + " ".join(f"{k}={_fmt(v)}" for k, v in vars(metrics).items()))
        if out is not None:
            save_run(out / "final.ckpt", model, optimizer, cfg, step, class_names)
    finally:
        if logf:
            logf.close()
    return TrainResult(model, step, losses, metrics, time.perf_counter() - t0)


def _fmt(v) -> str:
    return "absent" if v is None else f"{v:.6f}"
