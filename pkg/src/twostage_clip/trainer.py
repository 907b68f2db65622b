"""Two-stage contrastive pretraining.

Stage one locks the image tower (parameters and batch-norm statistics) and
trains everything else; stage two unfreezes all parameters at a lower peak
learning rate. Both stages use AdamW with decoupled weight decay and a
linear-warmup cosine schedule.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from . import encoders as E
from .checkpoint import Bundle, load_bundle, save_bundle
from .contrastive import BatchEmbeddings, clamp_temperature, contrastive_loss, gather_global_batch
from .data import ImageTextRecord, augment_image, fit_to_resolution, tokenize_batch
from .tensor import ContractViolation, backward

ADAM_PROFILES = {"vit": (0.98, 1e-6), "resnet": (0.999, 1e-8)}


class NonFiniteGradient(FloatingPointError):
    pass


class TrainingAborted(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainingSchedule:
    stage: int
    total_steps: int
    peak_lr: float | None = None
    warmup_steps: int = 5000
    batch_size: int = 32
    weight_decay: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.98
    eps: float = 1e-6
    frozen_groups: frozenset = None

    def __post_init__(self):
        if self.stage not in (1, 2):
            raise ContractViolation(f"stage must be 1 or 2, got {self.stage}")
        if self.peak_lr is None:
            object.__setattr__(self, "peak_lr", 1e-4 if self.stage == 1 else 2e-5)
        if self.frozen_groups is None:
            object.__setattr__(self, "frozen_groups",
                               frozenset({"image_tower"}) if self.stage == 1 else frozenset())
        object.__setattr__(self, "frozen_groups", frozenset(self.frozen_groups))
        if not 0 <= self.warmup_steps <= self.total_steps:
            raise ContractViolation("need 0 <= warmup_steps <= total_steps")
        if self.stage == 1 and "image_tower" not in self.frozen_groups:
            raise ContractViolation("stage one must freeze the image tower")
        if self.stage == 2 and self.frozen_groups:
            raise ContractViolation("stage two trains every parameter")
        if self.batch_size < 2:
            raise ContractViolation("batch_size must be at least 2")

    def with_adam_profile(self, profile: str) -> "TrainingSchedule":
        beta2, eps = ADAM_PROFILES[profile]
        return replace(self, beta2=beta2, eps=eps)


def lr_at_step(step: int, schedule: TrainingSchedule) -> float:
    """Linear warmup to the peak, then half-cosine decay to zero."""
    total, warmup, peak = schedule.total_steps, schedule.warmup_steps, schedule.peak_lr
    if not 0 <= step <= total:
        raise ContractViolation(f"step {step} outside [0, {total}]")
    if step < warmup:
        return peak * step / warmup
    if total == warmup:
        return peak
    progress = (step - warmup) / (total - warmup)
    return peak * 0.5 * (1.0 + math.cos(math.pi * progress))


@dataclass
class OptimizerState:
    """Adam moments and per-parameter step counts (for bias correction).

    `step` counts optimizer steps in the current stage and drives the
    learning-rate schedule.
    """

    first: dict[str, np.ndarray] = field(default_factory=dict)
    second: dict[str, np.ndarray] = field(default_factory=dict)
    counts: dict[str, int] = field(default_factory=dict)
    step: int = 0

    def ensure(self, params: dict) -> None:
        for name, p in params.items():
            if name not in self.first:
                self.first[name] = np.zeros(p.shape)
                self.second[name] = np.zeros(p.shape)
                self.counts[name] = 0

    def as_moments(self) -> dict[str, tuple[np.ndarray, np.ndarray, int]]:
        return {n: (self.first[n], self.second[n], self.counts[n]) for n in self.first}

    @classmethod
    def from_moments(cls, moments) -> "OptimizerState":
        state = cls()
        for n, (m, v, c) in moments.items():
            state.first[n] = m.copy()
            state.second[n] = v.copy()
            state.counts[n] = c
        return state


def decays(name: str, shape) -> bool:
    """Weight decay applies to matrices only: not gains, biases or the temperature."""
    return len(shape) >= 2


def adamw_step(params: dict, grads: dict, state: OptimizerState, lr: float,
               schedule: TrainingSchedule) -> None:
    """One in-place AdamW update of every non-frozen parameter.

    Trainable parameters missing from `grads` are treated as having zero
    gradient. Gradients are checked for finiteness before anything moves.
    """
    trainable = {n: p for n, p in params.items() if E.param_group(n) not in schedule.frozen_groups}
    for name in grads:
        if name not in trainable:
            raise ContractViolation(f"gradient supplied for frozen parameter {name!r}")
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NonFiniteGradient(f"non-finite gradient in {name!r}")
    state.ensure(trainable)
    b1, b2, eps, wd = schedule.beta1, schedule.beta2, schedule.eps, schedule.weight_decay
    for name, p in trainable.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros(p.shape)
        t = state.counts[name] + 1
        m = b1 * state.first[name] + (1.0 - b1) * g
        v = b2 * state.second[name] + (1.0 - b2) * (g * g)
        update = (m / (1.0 - b1 ** t)) / (np.sqrt(v / (1.0 - b2 ** t)) + eps)
        if decays(name, p.shape):
            p.data = p.data * (1.0 - lr * wd) - lr * update
        else:
            p.data = p.data - lr * update
        state.first[name], state.second[name], state.counts[name] = m, v, t
    state.step += 1
    if "logit_scale" in params:
        clamp_temperature(params["logit_scale"])


@dataclass
class StageResult:
    checkpoint: Path
    metrics_log: Path
    losses: list[float]
    lrs: list[float]
    temperatures: list[float]
    epochs: int


class _BatchStream:
    """Endless shuffled index stream; a new permutation starts each epoch."""

    def __init__(self, n: int, batch_size: int, rng: np.random.Generator):
        self.n, self.batch_size, self.rng = n, batch_size, rng
        self.order = np.empty(0, dtype=np.int64)
        self.pos = 0
        self.epochs = 0

    def next(self) -> np.ndarray:
        out = []
        need = self.batch_size
        while need:
            if self.pos == len(self.order):
                self.order = self.rng.permutation(self.n)
                self.pos = 0
                self.epochs += 1
            take = self.order[self.pos:self.pos + need]
            self.pos += len(take)
            need -= len(take)
            out.append(take)
        return np.concatenate(out)


class Trainer:
    """Owns a model, its optimizer state and the schedule of one stage."""

    def __init__(self, model: E.TwoTowerModel, schedule: TrainingSchedule,
                 optimizer: OptimizerState | None = None):
        self.model = model
        self.schedule = schedule
        self.optimizer = optimizer or OptimizerState()
        self._apply_freeze()

    def _apply_freeze(self):
        frozen = self.schedule.frozen_groups
        self.model.set_trainable(frozen)
        lock_stats = "image_tower" in frozen
        for state in self.model.bn_states.values():
            state.update_stats = not lock_stats
        trainable = {n: p for n, p in self.model.params.items() if p.requires_grad}
        self.optimizer.ensure(trainable)

    def loss_on(self, pixels: np.ndarray, ids: np.ndarray, masks: np.ndarray, workers: int = 1):
        """Per-worker forward passes gathered into one global-batch loss."""
        shards = []
        for part in np.array_split(np.arange(len(ids)), workers):
            img = E.encode_images(self.model, pixels[part], training=True)
            txt = E.encode_texts(self.model, ids[part], masks[part])
            shards.append(BatchEmbeddings(img, txt))
        return contrastive_loss(gather_global_batch(shards), self.model.params["logit_scale"])

    def step(self, pixels, ids, masks, workers: int = 1) -> tuple[float, float]:
        """One gather -> loss -> backward -> AdamW -> clamp step; returns (loss, lr)."""
        if self.optimizer.step >= self.schedule.total_steps:
            raise ContractViolation("schedule exhausted")
        lr = lr_at_step(self.optimizer.step + 1, self.schedule)
        loss = self.loss_on(pixels, ids, masks, workers)
        value = loss.item()
        if not math.isfinite(value):
            raise TrainingAborted(f"non-finite loss {value} at step {self.optimizer.step + 1}")
        trainable = {n: p for n, p in self.model.params.items() if p.requires_grad}
        for p in trainable.values():
            p.grad = None
        grad_map = backward(loss, leaves=trainable.values())
        grads = {n: grad_map[p.node_id].data for n, p in trainable.items()}
        adamw_step(self.model.params, grads, self.optimizer, lr, self.schedule)
        return value, lr

    def save(self, path, meta=None) -> Path:
        info = {"stage": str(self.schedule.stage), "step": str(self.optimizer.step)}
        info.update(meta or {})
        return save_bundle(path, self.model, self.optimizer.as_moments(), info)

    def run(self, records: Sequence[ImageTextRecord], seed: int, out_dir, workers: int = 1,
            checkpoint_interval: int = 0, augment: bool = True) -> StageResult:
        """Train for the remaining steps of the schedule over `records`.

        Batches wrap around the data (a new epoch reshuffles). Writes the
        metrics log and a final bundle under `out_dir`; interval bundles go
        to ``checkpoint-<step>``. A non-finite loss aborts the run, leaving
        the last interval bundle in place.
        """
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        if len(records) < 1:
            raise ContractViolation("no training records")
        cfg = self.model.image_config
        text_len = self.model.text_config.max_text_length
        rng = np.random.default_rng(seed)
        ids_all, masks_all = tokenize_batch([r.caption for r in records], max_length=text_len)
        sources = [r.pixels() for r in records]
        stream = _BatchStream(len(records), self.schedule.batch_size, rng)
        losses, lrs, temps = [], [], []
        log_path = out / "metrics.tsv"
        with open(log_path, "w", encoding="utf-8") as log:
            while self.optimizer.step < self.schedule.total_steps:
                idx = stream.next()
                pixels = np.stack([
                    augment_image(sources[i], rng, cfg.resolution) if augment
                    else fit_to_resolution(sources[i], cfg.resolution) for i in idx
                ])
                loss, lr = self.step(pixels, ids_all[idx], masks_all[idx], workers)
                temp = self.model.temperature
                losses.append(loss)
                lrs.append(lr)
                temps.append(temp)
                log.write(f"{self.optimizer.step}\t{lr!r}\t{loss!r}\t{temp!r}\n")
                log.flush()
                if checkpoint_interval and self.optimizer.step % checkpoint_interval == 0 \
                        and self.optimizer.step < self.schedule.total_steps:
                    self.save(out / f"checkpoint-{self.optimizer.step}",
                              {"epochs": str(stream.epochs), "seed": str(seed)})
        bundle = self.save(out / "checkpoint", {"epochs": str(stream.epochs), "seed": str(seed)})
        return StageResult(bundle, log_path, losses, lrs, temps, stream.epochs)


def run_stage(model: E.TwoTowerModel, records, schedule: TrainingSchedule, seed: int, out_dir,
              optimizer: OptimizerState | None = None, **options) -> StageResult:
    return Trainer(model, schedule, optimizer).run(records, seed, out_dir, **options)


def switch_stage(stage_one_checkpoint, stage_two_schedule: TrainingSchedule) -> Trainer:
    """Resume a stage-one bundle under a stage-two schedule.

    Moments of parameters trained in stage one are carried over; the newly
    unfrozen ones start from zero. The schedule's step counter restarts.
    """
    if stage_two_schedule.stage != 2:
        raise ContractViolation("switch_stage needs a stage-two schedule")
    bundle = stage_one_checkpoint
    if not isinstance(bundle, Bundle):
        bundle = load_bundle(stage_one_checkpoint)
    model = bundle.to_model()
    for name in bundle.moments:
        if name not in model.params or bundle.moments[name][0].shape != model.params[name].shape:
            raise E.IncompatibleCheckpoint(f"optimizer moment {name!r} does not match the model")
    optimizer = OptimizerState.from_moments(bundle.moments)
    return Trainer(model, stage_two_schedule, optimizer)


# ---------------------------------------------------------------------------
# config files: key=value lines


SCHEDULE_KEYS = ("peak_lr", "warmup_steps", "total_steps", "batch_size", "weight_decay",
                 "beta1", "beta2", "eps")
ENCODER_KEYS = ("kind", "layers", "width", "heads", "patch_size", "resolution", "vocab_size",
                "max_text_length", "embed_dim")


@dataclass
class RunConfig:
    image: E.EncoderConfig
    text: E.EncoderConfig
    stages: dict[int, TrainingSchedule]
    options: dict[str, str]


def parse_config(text: str) -> RunConfig:
    """Parse a run config.

    ``image.<field>`` / ``text.<field>`` set encoder fields (``embed_dim``
    sets both); schedule keys apply to both stages unless overridden by
    ``stage1.<key>`` / ``stage2.<key>``; ``frozen_groups`` is a comma list;
    ``adam_profile`` is ``vit`` or ``resnet``; unrecognized keys are kept as
    run options (``data``, ``workers``, ``checkpoint_interval``, ...).
    """
    items = {}
    for n, line in enumerate(text.splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise ContractViolation(f"config line {n}: expected key=value, got {line!r}")
        items[key.strip()] = value.strip()

    def encoder(prefix, base):
        over = {k[len(prefix):]: v for k, v in items.items() if k.startswith(prefix)}
        bad = set(over) - set(ENCODER_KEYS)
        if bad:
            raise ContractViolation(f"unknown {prefix[:-1]} fields {sorted(bad)}")
        if "embed_dim" in items:
            over.setdefault("embed_dim", items["embed_dim"])
        merged = {**base.to_items(), **over}
        if merged["kind"] == "conv_net" and base.kind != "conv_net":
            merged = {**E.default_conv_config().to_items(), **over}
        return E.EncoderConfig.from_items(merged)

    image = encoder("image.", E.default_image_config())
    text_cfg = encoder("text.", E.default_text_config())

    profile = items.get("adam_profile", "vit")
    if profile not in ADAM_PROFILES:
        raise ContractViolation(f"unknown adam_profile {profile!r}")
    stages = {}
    for stage in (1, 2):
        kw = {}
        for key in SCHEDULE_KEYS:
            value = items.get(f"stage{stage}.{key}", items.get(key))
            if value is None:
                continue
            kw[key] = int(value) if key in ("warmup_steps", "total_steps", "batch_size") else float(value)
        if "beta2" not in kw:
            kw["beta2"] = ADAM_PROFILES[profile][0]
        if "eps" not in kw:
            kw["eps"] = ADAM_PROFILES[profile][1]
        frozen = items.get(f"stage{stage}.frozen_groups")
        if frozen is not None:
            kw["frozen_groups"] = frozenset(g for g in frozen.split(",") if g)
        kw.setdefault("total_steps", 100)
        kw.setdefault("warmup_steps", min(5000, kw["total_steps"] // 10))
        stages[stage] = TrainingSchedule(stage=stage, **kw)

    known = {"embed_dim", "adam_profile", *SCHEDULE_KEYS}
    options = {k: v for k, v in items.items()
               if k not in known and not k.startswith(("image.", "text.", "stage1.", "stage2."))}
    return RunConfig(image, text_cfg, stages, options)


def read_config(path) -> RunConfig:
    return parse_config(Path(path).read_text(encoding="utf-8"))
