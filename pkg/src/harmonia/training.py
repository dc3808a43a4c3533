"""Alternating VAE / discriminator / encoder-adversarial training.

One outer cycle runs ``i`` VAE steps, then ``j`` blocks of ``k`` discriminator
steps followed by ``l`` encoder steps.  Each phase has its own Adam state.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import logging
import math
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Iterator

import numpy as np
import torch

from . import encodings as enc
from .corpus import CorpusFile, Sample
from .encodings import CorruptionMethod, CorruptionSpec
from .model import (ContractError, HarmonyModel, ModelConfig, build_model,
                    reparameterize, save_checkpoint)
from .objectives import LossReport, confusion_loss, disc_loss, vae_loss

logger = logging.getLogger(__name__)


class ScheduleError(ValueError):
    pass


class TrainingDiverged(RuntimeError):
    pass


class Variant(str, Enum):
    DAT = "dat"
    NON_DAT = "non-dat"
    MASK_CR = "mask-cr"
    NON_CR = "non-cr"

    @property
    def disc_kind(self) -> str:
        return {"dat": "transformer", "non-dat": "none",
                "mask-cr": "transformer", "non-cr": "gru"}[self.value]

    def corruption(self, mask_rate: float = 0.15, seed: int = 0) -> CorruptionSpec:
        if self is Variant.MASK_CR:
            return CorruptionSpec(CorruptionMethod.MASK, mask_rate, seed)
        if self is Variant.DAT:
            return CorruptionSpec(CorruptionMethod.TRANSPOSE, None, seed)
        return CorruptionSpec(CorruptionMethod.NONE, None, seed)


@dataclass(frozen=True)
class TrainSchedule:
    i: int = 10
    j: int = 1
    k: int = 5
    l: int = 5
    batch_size: int = 256
    epochs: int = 20
    lr_start: float = 1e-3
    lr_end: float = 1e-5
    tf_start: float = 0.8
    tf_end: float = 0.0
    seed: int = 0
    grad_clip: float = 5.0
    # "augmented": an epoch covers the x12 training set; "raw": the unaugmented count
    epoch_basis: str = "augmented"
    cycles_per_epoch: int | None = None
    reuse_batches: bool = False
    confusion_mode: str = "complement"
    verify_every: int = 0
    # stop after this many epochs; lr/tf still follow the full ``epochs`` schedule
    max_epochs: int | None = None

    def __post_init__(self) -> None:
        if min(self.i, self.j, self.k, self.l) < 0:
            raise ScheduleError("loop counts must be non-negative")
        if self.batch_size < 1:
            raise ScheduleError("batch_size must be >= 1")
        if self.lr_end > self.lr_start:
            raise ScheduleError("lr_end must not exceed lr_start")
        if self.tf_end > self.tf_start:
            raise ScheduleError("tf_end must not exceed tf_start")
        if self.max_epochs is not None and self.max_epochs < 1:
            raise ScheduleError("max_epochs must be >= 1")
        if self.confusion_mode not in ("complement", "uniform"):
            raise ScheduleError(f"unknown confusion_mode {self.confusion_mode!r}")
        if self.epoch_basis not in ("augmented", "raw"):
            raise ScheduleError(f"unknown epoch_basis {self.epoch_basis!r}")

    def replace(self, **changes) -> "TrainSchedule":
        return dataclasses.replace(self, **changes)


def _check_epoch(epoch: int, sched: TrainSchedule) -> None:
    if sched.epochs < 2:
        raise ScheduleError("exponential schedules need at least 2 epochs")
    if not 0 <= epoch < sched.epochs:
        raise ScheduleError(f"epoch {epoch} outside 0..{sched.epochs - 1}")


def lr_at(epoch: int, sched: TrainSchedule) -> float:
    _check_epoch(epoch, sched)
    if epoch == sched.epochs - 1:
        return sched.lr_end
    ratio = (sched.lr_end / sched.lr_start) ** (1.0 / (sched.epochs - 1))
    return sched.lr_start * ratio ** epoch


def tf_at(epoch: int, sched: TrainSchedule) -> float:
    """Exponential decay reaching <= 0.01 at the last epoch, then clamped to ``tf_end``."""
    _check_epoch(epoch, sched)
    if epoch == sched.epochs - 1 or sched.tf_start == 0.0:
        return sched.tf_end
    target = min(0.01, sched.tf_start)
    ratio = (target / sched.tf_start) ** (1.0 / (sched.epochs - 1))
    return max(sched.tf_start * ratio ** epoch, sched.tf_end)


# ---------------------------------------------------------------------------
# batches

@dataclass
class Batch:
    chord: torch.Tensor
    melody: torch.Tensor

    def __len__(self) -> int:
        return self.chord.shape[0]


def stack_samples(samples: list[Sample]) -> Batch:
    chord = torch.from_numpy(np.stack([s.chord for s in samples]).astype(np.int64))
    melody = torch.from_numpy(np.stack([s.melody for s in samples]).astype(np.int64))
    return Batch(chord, melody)


class BatchStream:
    """Endless shuffled mini-batches; reshuffles after each full pass."""

    def __init__(self, data: Batch, batch_size: int, rng: np.random.Generator):
        self.data = data
        self.batch_size = min(batch_size, len(data))
        self.rng = rng
        self._order = np.empty(0, dtype=np.int64)
        self._pos = 0

    def __iter__(self) -> Iterator[Batch]:
        return self

    def __next__(self) -> Batch:
        if self._pos + self.batch_size > len(self._order):
            self._order = self.rng.permutation(len(self.data))
            self._pos = 0
        idx = torch.from_numpy(self._order[self._pos:self._pos + self.batch_size])
        self._pos += self.batch_size
        return Batch(self.data.chord[idx], self.data.melody[idx])


# ---------------------------------------------------------------------------
# parameter-group hashing

def group_hashes(model: HarmonyModel) -> dict[str, str]:
    out = {}
    for group, params in model.param_groups().items():
        h = hashlib.sha1()
        for name in sorted(params):
            h.update(name.encode())
            h.update(params[name].detach().cpu().numpy().tobytes())
        out[group] = h.hexdigest()
    return out


# which groups each phase may modify
PHASE_WRITES = {"vae": {"enc", "dec"}, "disc": {"dis"}, "enc_adv": {"enc"}}


# ---------------------------------------------------------------------------
# the trainer

class Trainer:
    """Holds the model, the three optimizers and every RNG used during training."""

    def __init__(self, model: HarmonyModel, sched: TrainSchedule,
                 corruption: CorruptionSpec | None = None):
        self.model = model
        self.sched = sched
        self.corruption = corruption or CorruptionSpec(CorruptionMethod.NONE)
        groups = model.param_groups()
        vae_params = list(groups["enc"].values()) + list(groups["dec"].values())
        self.opt_vae = torch.optim.Adam(vae_params, lr=sched.lr_start)
        self.opt_enc = torch.optim.Adam(list(groups["enc"].values()), lr=sched.lr_start)
        self.opt_dis = (torch.optim.Adam(list(groups["dis"].values()), lr=sched.lr_start)
                        if groups["dis"] else None)
        self.torch_gen = torch.Generator().manual_seed(sched.seed)
        self.corrupt_rng = np.random.default_rng([sched.seed, self.corruption.rng_seed, 1])
        self.tf_rate = sched.tf_start
        self.step = 0

    @property
    def has_discriminator(self) -> bool:
        return self.model.discriminator is not None

    def set_lr(self, lr: float) -> None:
        for opt in (self.opt_vae, self.opt_enc, self.opt_dis):
            if opt is not None:
                for g in opt.param_groups:
                    g["lr"] = lr

    def _apply(self, opt: torch.optim.Optimizer, report: LossReport, phase: str) -> None:
        if not torch.isfinite(report.total):
            raise TrainingDiverged(f"non-finite {phase} loss at step {self.step}: "
                                   f"{report.components}")
        opt.zero_grad(set_to_none=True)
        report.total.backward()
        params = [p for g in opt.param_groups for p in g["params"]]
        if self.sched.grad_clip:
            torch.nn.utils.clip_grad_norm_(params, self.sched.grad_clip)
        opt.step()
        # the other groups may have accumulated grads through the shared graph
        self.model.zero_grad(set_to_none=True)
        self.step += 1

    def _corrupt(self, melody: torch.Tensor) -> torch.Tensor:
        out, _ = enc.corrupt_batch(melody.numpy(), self.corruption, self.corrupt_rng)
        return torch.from_numpy(out)

    def vae_forward(self, batch: Batch) -> LossReport:
        post = self.model.encode(batch.chord, batch.melody)
        z = reparameterize(post, self.torch_gen)
        logits = self.model.decode(z, batch.melody, teacher=batch.chord,
                                   tf_rate=self.tf_rate, generator=self.torch_gen)
        return vae_loss(logits, batch.chord, post, self.model.cfg.alpha)

    def train_step_vae(self, batch: Batch) -> LossReport:
        self.model.train()
        report = self.vae_forward(batch)
        self._apply(self.opt_vae, report, "vae")
        return report

    def _require_disc(self) -> None:
        if not self.has_discriminator or self.opt_dis is None:
            raise ContractError("this run has no discriminator (Non-DAT variant)")

    def train_step_disc(self, batch: Batch) -> LossReport:
        self._require_disc()
        self.model.train()
        with torch.no_grad():
            post = self.model.encode(batch.chord, batch.melody)
            z = reparameterize(post, self.torch_gen)
        logits = self.model.discriminate(z, self._corrupt(batch.melody))
        report = disc_loss(logits, batch.melody)
        self._apply(self.opt_dis, report, "disc")
        return report

    def train_step_enc_adv(self, batch: Batch) -> LossReport:
        self._require_disc()
        self.model.train()
        frozen = [p for p in self.model.discriminator.parameters()]
        for p in frozen:
            p.requires_grad_(False)
        try:
            post = self.model.encode(batch.chord, batch.melody)
            z = reparameterize(post, self.torch_gen)
            logits = self.model.discriminate(z, self._corrupt(batch.melody))
            report = confusion_loss(logits, batch.melody, post, self.model.cfg.alpha,
                                    self.sched.confusion_mode)
            self._apply(self.opt_enc, report, "enc_adv")
        finally:
            for p in frozen:
                p.requires_grad_(True)
        return report


@dataclass
class TrainResult:
    checkpoints: list[Path]
    metrics: list[dict]
    routing_violations: list[dict] = field(default_factory=list)
    routing_checks: int = 0
    model: HarmonyModel | None = None

    @property
    def final_checkpoint(self) -> Path:
        return self.checkpoints[-1]


def cycle_phases(sched: TrainSchedule, adversarial: bool) -> list[str]:
    phases = ["vae"] * sched.i
    if adversarial:
        phases += (["disc"] * sched.k + ["enc_adv"] * sched.l) * sched.j
    return phases


def steps_per_epoch(corpus: CorpusFile, sched: TrainSchedule) -> int:
    n = len(corpus.train)
    if sched.epoch_basis == "raw":
        n = sum(1 for s in corpus.train if s.transposition_tag == 0)
    return max(1, math.ceil(n / sched.batch_size))


@torch.no_grad()
def validate(trainer: Trainer, data: Batch, epoch: int) -> dict:
    """Free-running reconstruction, KL and discriminator loss on the validation split."""
    model = trainer.model
    model.eval()
    gen = torch.Generator().manual_seed(trainer.sched.seed * 1000 + epoch)
    rng = np.random.default_rng([trainer.sched.seed, epoch, 7])
    bs = trainer.sched.batch_size
    totals = {"recon_chord": 0.0, "kl": 0.0, "recon_melody": 0.0}
    n = len(data)
    for lo in range(0, n, bs):
        chord, melody = data.chord[lo:lo + bs], data.melody[lo:lo + bs]
        post = model.encode(chord, melody)
        logits = model.decode(post.mean, melody)
        rep = vae_loss(logits, chord, post, model.cfg.alpha)
        w = len(chord) / n
        totals["recon_chord"] += rep.components["recon_chord"] * w
        totals["kl"] += rep.components["kl"] * w
        if model.discriminator is not None:
            z = reparameterize(post, gen)
            corrupted, _ = enc.corrupt_batch(melody.numpy(), trainer.corruption, rng)
            d = disc_loss(model.discriminate(z, torch.from_numpy(corrupted)), melody)
            totals["recon_melody"] += d.components["recon_melody"] * w
    if model.discriminator is None:
        del totals["recon_melody"]
    return totals


def train(corpus: CorpusFile, config: ModelConfig, sched: TrainSchedule,
          variant: Variant | str = Variant.DAT, out_dir: str | Path | None = None,
          mask_rate: float = 0.15, model: HarmonyModel | None = None,
          dtype: torch.dtype = torch.float32) -> TrainResult:
    """Run the full alternating loop; writes ``metrics.jsonl`` and one checkpoint per epoch."""
    variant = Variant(variant)
    if not corpus.train or not corpus.val:
        raise ValueError("corpus needs both a train and a val split")
    config = config.replace(disc_kind=variant.disc_kind)
    _check_epoch(0, sched)
    if model is None:
        model = build_model(config, seed=sched.seed)
    model.to(dtype)
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    log_file = open(out / "metrics.jsonl", "w") if out is not None else None

    trainer = Trainer(model, sched, variant.corruption(mask_rate))
    adversarial = variant is not Variant.NON_DAT
    phases = cycle_phases(sched, adversarial)
    if not phases:
        raise ScheduleError("the training cycle is empty")
    cycles = sched.cycles_per_epoch or max(1, math.ceil(steps_per_epoch(corpus, sched)
                                                          / max(1, sched.i)))
    batch_rng = np.random.default_rng([sched.seed, 2])
    stream = BatchStream(stack_samples(corpus.train), sched.batch_size, batch_rng)
    val = stack_samples(corpus.val)

    result = TrainResult([], [])

    def emit(record: dict) -> None:
        result.metrics.append(record)
        if log_file is not None:
            log_file.write(json.dumps(record) + "\n")
            log_file.flush()

    step_fns = {"vae": trainer.train_step_vae, "disc": trainer.train_step_disc,
                "enc_adv": trainer.train_step_enc_adv}
    try:
        for epoch in range(min(sched.epochs, sched.max_epochs or sched.epochs)):
            lr = lr_at(epoch, sched)
            trainer.set_lr(lr)
            trainer.tf_rate = tf_at(epoch, sched)
            for _ in range(cycles):
                batch = None
                for phase in phases:
                    if batch is None or not (sched.reuse_batches and phase != "vae"):
                        batch = next(stream)
                    check = sched.verify_every and trainer.step % sched.verify_every == 0
                    before = group_hashes(model) if check else None
                    report = step_fns[phase](batch)
                    if check:
                        _check_routing(model, before, phase, trainer.step - 1, result)
                    emit({"step": trainer.step - 1, "epoch": epoch, "phase": phase,
                          "lr": lr, "tf": trainer.tf_rate, "loss": report.as_dict()})
            emit({"epoch": epoch, "phase": "val", **validate(trainer, val, epoch)})
            if out is not None:
                path = out / f"epoch_{epoch:03d}.ckpt"
                save_checkpoint(model, path, trainer.step,
                                {"variant": variant.value, "epoch": epoch})
                result.checkpoints.append(path)
    except TrainingDiverged as err:
        if out is not None:
            (out / "divergence.json").write_text(json.dumps(
                {"error": str(err), "step": trainer.step, "last": result.metrics[-5:]}, indent=1))
        raise
    finally:
        if log_file is not None:
            log_file.close()
    result.model = model
    return result


def _check_routing(model: HarmonyModel, before: dict, phase: str, step: int,
                   result: TrainResult) -> None:
    after = group_hashes(model)
    result.routing_checks += 1
    for group in ("enc", "dec", "dis"):
        if group not in PHASE_WRITES[phase] and before[group] != after[group]:
            result.routing_violations.append({"step": step, "phase": phase, "group": group})
