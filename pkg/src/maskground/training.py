"""Optimization loop: equal-probability dataset mixing, the combined
grounding + segmentation objective, cosine learning-rate schedule, NDJSON
logging, bit-exact checkpoint/resume, and teacher-based pseudo-labeling.

Randomness is counter-based: the batch composition and word dropping at step
t derive from (seed, stream, t), so resuming from a checkpoint replays the
exact uninterrupted trajectory.
"""

from __future__ import annotations

import json
import math
import warnings
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
import torch

from . import checkpoint as ckpt
from .data import LabeledMaskSet, ManifestDataset, DatasetWriter, Sample
from .losses import GroundingBatch, LossWeights, grounding_loss, segmentation_loss, total_loss
from .metrics import recall_from_best_ious, best_iou_per_gt
from .model import ModelConfig, VisionModel, build_vision_model, stack_images
from .text import (DEFAULT_LEXICON, EmbeddingProvider, collect_caption_vocabulary,
                   drop_words, extract_words)

#: Stream tags for counter-based RNG derivation.
_BATCH_STREAM = 101
_WORDS_STREAM = 202

# The trainer guards cosine norms instead of erroring on dead rows.
TRAIN_NORM_EPS = 1e-8

# The learnable temperature gets clamped to this range after every step.
# Early in training the contrastive signal is weak and the optimizer can
# push the temperature high enough to flatten all softmaxes, which kills the
# gradient permanently; the clamp keeps the loss responsive.
TAU_RANGE = (0.005, 0.5)


class TrainingDiverged(RuntimeError):
    """Loss went non-finite; carries a diagnostic dump."""

    def __init__(self, step: int, tau: float, grad_norms: dict[str, float]):
        self.step = step
        self.tau = tau
        self.grad_norms = grad_norms
        top = sorted(grad_norms.items(), key=lambda kv: -kv[1])[:5]
        super().__init__(
            f"non-finite loss at step {step} (tau={tau:.6g}); "
            f"largest gradient norms: {top}")


@dataclass(frozen=True)
class TrainConfig:
    """Everything the trainer needs; loadable from a JSON/YAML file."""

    steps: int = 3000
    batch_size: int = 32
    partition_size: int = 32
    learning_rate: float = 0.01
    warmup_steps: int = 200
    grad_clip: float = 1.0     # global norm; 0 disables clipping
    momentum: float = 0.9
    weight_decay: float = 1e-5
    alpha: float = 1.0
    kp: float = 0.5
    word_filter_mode: str = "noun_adj"
    grounding: bool = True     # False: teacher regime, segmentation loss only
    seed: int = 0
    num_proposals: int = 16
    embed_dim: int = 64
    num_blocks: int = 3
    fused_dim: int = 64
    base_mask_hw: tuple[int, int] = (16, 16)
    log_every: int = 50
    val_every: int = 500
    checkpoint_every: int = 1000

    def __post_init__(self):
        if self.steps < 0 or self.batch_size < 1:
            raise ValueError("steps must be >= 0 and batch_size >= 1")
        if self.partition_size < 1 or self.batch_size % self.partition_size:
            raise ValueError(
                f"partition_size {self.partition_size} must divide "
                f"batch_size {self.batch_size}")
        if self.alpha < 0:
            raise ValueError("alpha must be non-negative")
        if not 0.0 <= self.kp <= 1.0:
            raise ValueError("kp must lie in [0, 1]")
        if self.word_filter_mode not in ("all", "noun_adj_verb", "noun_adj"):
            raise ValueError(f"unknown word_filter_mode {self.word_filter_mode!r}")

    def model_config(self) -> ModelConfig:
        return ModelConfig(num_proposals=self.num_proposals,
                           embed_dim=self.embed_dim,
                           num_blocks=self.num_blocks,
                           fused_dim=self.fused_dim,
                           base_mask_hw=tuple(self.base_mask_hw))

    @classmethod
    def from_file(cls, path: str | Path) -> "TrainConfig":
        path = Path(path)
        text = path.read_text(encoding="utf-8")
        if path.suffix.lower() in (".yaml", ".yml"):
            import yaml
            obj = yaml.safe_load(text) or {}
        else:
            obj = json.loads(text)
        if "base_mask_hw" in obj:
            obj["base_mask_hw"] = tuple(obj["base_mask_hw"])
        return cls(**obj)


def cosine_lr(base_lr: float, step: int, total_steps: int,
              warmup_steps: int = 0) -> float:
    """Cosine decay from base_lr to 0 over the run, with an optional linear
    warmup from 0 at the front."""
    if total_steps <= 0:
        return base_lr
    t = min(max(step, 0), total_steps)
    if warmup_steps > 0 and t < warmup_steps:
        return base_lr * (t + 1) / warmup_steps
    return 0.5 * base_lr * (1.0 + math.cos(math.pi * t / total_steps))


def sample_mixed(datasets: Sequence[Sequence[Sample]], rng: np.random.Generator,
                 batch_size: int) -> list[Sample]:
    """Draw each batch element by picking a dataset uniformly, then an
    example uniformly within it."""
    if not datasets:
        raise ValueError("need at least one dataset")
    for i, ds in enumerate(datasets):
        if len(ds) == 0:
            raise ValueError(f"dataset {i} is empty")
    batch = []
    for _ in range(batch_size):
        ds = datasets[int(rng.integers(len(datasets)))]
        batch.append(ds[int(rng.integers(len(ds)))])
    return batch


class Trainer:
    """Owns the model, embedder, and optimizer for one training run."""

    def __init__(self, config: TrainConfig, vocab: Sequence[str], *,
                 lexicon=DEFAULT_LEXICON):
        self.config = config
        self.lexicon = lexicon
        self.model = build_vision_model(config.model_config(), config.seed)
        self.embedder = EmbeddingProvider(vocab, config.embed_dim,
                                          oov_policy="unk")
        self.step = 0
        decay, no_decay = [], []
        self.named_params: list[tuple[str, torch.nn.Parameter]] = []
        for name, p in self.model.named_parameters():
            self.named_params.append((f"vision.{name}", p))
            (no_decay if name == "log_tau" else decay).append(p)
        for name, p in self.embedder.named_parameters():
            self.named_params.append((f"text.{name}", p))
            decay.append(p)
        self.optimizer = torch.optim.SGD(
            [{"params": decay, "weight_decay": config.weight_decay},
             {"params": no_decay, "weight_decay": 0.0}],
            lr=config.learning_rate, momentum=config.momentum)

    # -- loss assembly -------------------------------------------------

    def _caption_words(self, batch: Sequence[Sample],
                       rng_words: np.random.Generator | None) -> list[list[str] | None]:
        """Filtered (and, when rng is given, randomly thinned) caption words."""
        out: list[list[str] | None] = []
        for sample in batch:
            if sample.caption is None:
                out.append(None)
                continue
            words = extract_words(sample.caption, self.config.word_filter_mode,
                                  self.lexicon)
            if not words:
                out.append(None)
                continue
            if rng_words is not None and self.config.kp < 1.0:
                words = drop_words(words, self.config.kp, rng_words)
            out.append(words)
        return out

    def compute_losses(self, batch: Sequence[Sample],
                       rng_words: np.random.Generator | None
                       ) -> tuple[torch.Tensor, torch.Tensor | None, torch.Tensor | None]:
        """(objective, grounding loss or None, segmentation loss or None).

        The grounding loss is averaged over contiguous caption partitions of
        config.partition_size (a short trailing partition is allowed); the
        segmentation loss is averaged over mask-bearing samples.
        """
        cfg = self.config
        result = self.model(stack_images(batch))
        if not (torch.isfinite(result.masks).all()
                and torch.isfinite(result.features).all()):
            raise TrainingDiverged(self.step, float(self.model.tau.detach()),
                                   self._grad_norms())
        word_lists = self._caption_words(batch, rng_words)

        l_g: torch.Tensor | None = None
        if cfg.grounding:
            zs, ws = [], []
            for i, words in enumerate(word_lists):
                if words is None:
                    continue
                zs.append(result.features[i])
                ws.append(self.embedder(words))
            if zs:
                chunk_losses = []
                for start in range(0, len(zs), cfg.partition_size):
                    sub = GroundingBatch(zs[start:start + cfg.partition_size],
                                         ws[start:start + cfg.partition_size],
                                         self.model.tau)
                    chunk_losses.append(grounding_loss(sub, TRAIN_NORM_EPS))
                l_g = torch.stack(chunk_losses).mean()

        mask_indices = [i for i, s in enumerate(batch) if s.labeled_masks is not None]
        l_s: torch.Tensor | None = None
        if mask_indices:
            need_grad = (((not cfg.grounding) or cfg.alpha > 0)
                         and torch.is_grad_enabled())
            with torch.set_grad_enabled(need_grad):
                per_sample = []
                for i in mask_indices:
                    labels = torch.from_numpy(
                        np.array(batch[i].labeled_masks.masks)).float()
                    per_sample.append(segmentation_loss(result.masks[i], labels))
                l_s = torch.stack(per_sample).mean()

        if l_g is None and l_s is None:
            raise ValueError("batch has neither usable captions nor masks")
        if not cfg.grounding:
            objective = l_s
            if objective is None:
                raise ValueError("teacher regime needs mask-bearing samples")
        elif l_g is None:
            objective = total_loss(torch.zeros((), dtype=result.masks.dtype),
                                   l_s, LossWeights(cfg.alpha))
        elif l_s is None or cfg.alpha == 0:
            objective = l_g
        else:
            objective = total_loss(l_g, l_s, LossWeights(cfg.alpha))
        return objective, l_g, l_s

    def train_step(self, batch: Sequence[Sample]) -> dict:
        """One optimizer update on one batch; returns the scalar losses."""
        cfg = self.config
        lr = cosine_lr(cfg.learning_rate, self.step, cfg.steps, cfg.warmup_steps)
        for group in self.optimizer.param_groups:
            group["lr"] = lr
        rng_words = np.random.default_rng((cfg.seed, _WORDS_STREAM, self.step))
        objective, l_g, l_s = self.compute_losses(batch, rng_words)
        if not torch.isfinite(objective):
            raise TrainingDiverged(self.step, float(self.model.tau.detach()), self._grad_norms())
        self.optimizer.zero_grad()
        objective.backward()
        if cfg.grad_clip > 0:
            torch.nn.utils.clip_grad_norm_(
                [p for _, p in self.named_params], cfg.grad_clip)
        self.optimizer.step()
        with torch.no_grad():
            self.model.log_tau.clamp_(math.log(TAU_RANGE[0]),
                                      math.log(TAU_RANGE[1]))
        # structural via the log parameterization, but cheap to assert
        assert float(self.model.tau.detach()) > 0.0
        self.step += 1
        return {
            "step": self.step - 1,
            "l_g": None if l_g is None else float(l_g.detach()),
            "l_s": None if l_s is None else float(l_s.detach()),
            "lr": lr,
            "tau": float(self.model.tau.detach()),
        }

    def _grad_norms(self) -> dict[str, float]:
        return {name: (0.0 if p.grad is None else float(p.grad.norm()))
                for name, p in self.named_params}

    # -- checkpointing --------------------------------------------------

    def save(self, path: str | Path, extra_meta: dict | None = None) -> Path:
        extra: dict[str, np.ndarray] = {}
        for name, p in self.named_params:
            state = self.optimizer.state.get(p, {})
            buf = state.get("momentum_buffer")
            if buf is not None:
                extra[f"opt.{name}.momentum"] = buf.detach().cpu().numpy()
        meta = {"step": self.step, "train_config": asdict(self.config)}
        if extra_meta:
            meta.update(extra_meta)
        return ckpt.save_model(path, self.model, self.embedder, meta=meta,
                               extra_tensors=extra)

    @classmethod
    def resume(cls, path: str | Path, config: TrainConfig | None = None) -> "Trainer":
        header, tensors = ckpt.load_checkpoint(path)
        meta = header.get("meta", {})
        if config is None:
            cfg_dict = dict(meta["train_config"])
            cfg_dict["base_mask_hw"] = tuple(cfg_dict["base_mask_hw"])
            config = TrainConfig(**cfg_dict)
        vocab = [w for w in header["vocab"] if w != EmbeddingProvider.UNK]
        trainer = cls(config, vocab)
        ckpt.arrays_to_state(trainer.model, tensors, "vision.")
        ckpt.arrays_to_state(trainer.embedder, tensors, "text.")
        trainer.step = int(meta.get("step", 0))
        for name, p in trainer.named_params:
            key = f"opt.{name}.momentum"
            if key in tensors:
                trainer.optimizer.state[p] = {
                    "momentum_buffer": torch.from_numpy(tensors[key].copy())}
        trainer.model.train()
        return trainer


def _as_samples(dataset) -> list[Sample]:
    """Materialize a dataset into RAM once so sampling is cheap."""
    return [dataset[i] for i in range(len(dataset))]


def train(config: TrainConfig, datasets: Sequence[Sequence[Sample] | ManifestDataset],
          out_dir: str | Path, *, val_dataset=None,
          resume_from: str | Path | None = None) -> Path:
    """Run the full loop; returns the path of the final checkpoint.

    Writes ``train_log.ndjson`` plus periodic and final checkpoints under
    ``out_dir``. ``resume_from`` continues a run bit-exactly (parameters,
    momentum, and step counter all restore from the checkpoint).
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    loaded = [_as_samples(ds) for ds in datasets]
    if resume_from is not None:
        trainer = Trainer.resume(resume_from, config)
    else:
        captions = (s.caption for ds in loaded for s in ds if s.caption)
        trainer = Trainer(config, collect_caption_vocabulary(captions))
    val_probe = None
    if val_dataset is not None:
        val_probe = [val_dataset[i]
                     for i in range(min(len(val_dataset), config.batch_size))]

    log_path = out_dir / "train_log.ndjson"
    mode = "a" if resume_from is not None else "w"
    with open(log_path, mode, encoding="utf-8") as log:
        def emit(record: dict) -> None:
            log.write(json.dumps(record, sort_keys=True) + "\n")
            log.flush()

        while trainer.step < config.steps:
            step = trainer.step
            rng_batch = np.random.default_rng((config.seed, _BATCH_STREAM, step))
            batch = sample_mixed(loaded, rng_batch, config.batch_size)
            record = trainer.train_step(batch)
            if step % config.log_every == 0 or step == config.steps - 1:
                emit(record)
            if val_probe and (step % config.val_every == 0 or step == config.steps - 1):
                with torch.no_grad():
                    _, v_g, v_s = trainer.compute_losses(val_probe, rng_words=None)
                emit({"step": step,
                      "val_l_g": None if v_g is None else float(v_g),
                      "val_l_s": None if v_s is None else float(v_s)})
            done = trainer.step
            if config.checkpoint_every and done % config.checkpoint_every == 0 \
                    and done < config.steps:
                trainer.save(out_dir / f"checkpoint-{done:06d}.ckpt")
    final = trainer.save(out_dir / "checkpoint-final.ckpt")
    return final


def pseudo_label(teacher_path: str | Path, dataset, out_dir: str | Path, *,
                 threshold: float = 0.5, dedup_iou: float = 0.9,
                 batch_size: int = 32) -> dict:
    """Annotate a caption dataset with the teacher's binarized proposals.

    Proposals below the threshold everywhere are dropped; near-duplicates
    (pairwise IoU > dedup_iou) keep only the first. Samples left without any
    mask are written caption-only and counted as warnings.
    """
    model, _, _, _ = ckpt.load_model(teacher_path)
    out_dir = Path(out_dir)
    writer = DatasetWriter(root=out_dir)
    stats = {"written": 0, "caption_only": 0, "masks_total": 0}
    samples = _as_samples(dataset)
    with torch.no_grad():
        for start in range(0, len(samples), batch_size):
            chunk = samples[start:start + batch_size]
            result = model(stack_images(chunk))
            binary = (result.masks.numpy() >= threshold).astype(np.uint8)
            for i, sample in enumerate(chunk):
                kept: list[np.ndarray] = []
                for mask in binary[i]:
                    if mask.sum() == 0:
                        continue
                    if any(_iou(mask, other) > dedup_iou for other in kept):
                        continue
                    kept.append(mask)
                labeled = LabeledMaskSet(np.stack(kept)) if kept else None
                if labeled is None:
                    stats["caption_only"] += 1
                    if sample.caption is None:
                        warnings.warn(f"sample {sample.id} has no caption and no "
                                      "pseudo masks; skipping")
                        continue
                stats["written"] += 1
                stats["masks_total"] += 0 if labeled is None else labeled.count
                writer.add(Sample(id=sample.id, image=sample.image,
                                  labeled_masks=labeled, caption=sample.caption))
    writer.finish()
    return stats


def _iou(a: np.ndarray, b: np.ndarray) -> float:
    union = np.logical_or(a, b).sum()
    return float(np.logical_and(a, b).sum() / union) if union else 1.0


def teacher_self_recall(teacher_path: str | Path, dataset, *,
                        threshold: float = 0.5) -> dict[float, float]:
    """Recall of the teacher's binarized proposals against the labeled masks
    of its own training data (sanity gate for pseudo-labeling)."""
    model, _, _, _ = ckpt.load_model(teacher_path)
    best: list[np.ndarray] = []
    samples = [s for s in _as_samples(dataset) if s.labeled_masks is not None]
    with torch.no_grad():
        for start in range(0, len(samples), 32):
            chunk = samples[start:start + 32]
            result = model(stack_images(chunk))
            binary = (result.masks.numpy() >= threshold).astype(np.uint8)
            for i, sample in enumerate(chunk):
                best.append(best_iou_per_gt(binary[i], sample.labeled_masks.masks))
    return recall_from_best_ious(np.concatenate(best))
