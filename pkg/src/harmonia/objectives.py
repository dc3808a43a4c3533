"""Training losses: VAE reconstruction + KL, discriminator denoising, encoder confusion.

All cross-entropies are means over positions (and batch); the KL term is summed
over latent dimensions and averaged over the batch.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import torch
import torch.nn.functional as F

from . import encodings as enc
from .model import LOGVAR_FLOOR, Posterior


class LossShapeError(ValueError):
    pass


@dataclass
class LossReport:
    """A differentiable ``total`` plus float components for logging."""

    total: torch.Tensor
    components: dict[str, float] = field(default_factory=dict)
    counts: dict[str, int] = field(default_factory=dict)

    def as_dict(self) -> dict:
        return {"total": self.total.item(), **self.components}


def kl_std_normal(post: Posterior) -> torch.Tensor:
    """KL(N(mean, var) || N(0, I)) summed over dims, averaged over any batch dims."""
    mean, logvar = post.mean, post.log_variance
    if not (torch.isfinite(mean).all() and torch.isfinite(logvar).all()):
        raise ValueError("posterior has non-finite entries")
    logvar = logvar.clamp_min(LOGVAR_FLOOR)
    kl = 0.5 * (mean.pow(2) + logvar.exp() - 1.0 - logvar).sum(-1)
    return kl.mean() if kl.dim() else kl


def vae_loss(chord_logits: torch.Tensor, target: torch.Tensor, post: Posterior,
             alpha: float) -> LossReport:
    if chord_logits.shape[:-1] != target.shape or chord_logits.shape[-1] != enc.CHORD_VOCAB:
        raise LossShapeError(f"chord logits {tuple(chord_logits.shape)} vs target "
                             f"{tuple(target.shape)}")
    recon = F.cross_entropy(chord_logits.reshape(-1, enc.CHORD_VOCAB), target.reshape(-1))
    kl = kl_std_normal(post)
    total = recon + alpha * kl
    return LossReport(total, {"recon_chord": recon.item(), "kl": kl.item()},
                      {"chord_slots": target.numel()})


def _check_melody(logits: torch.Tensor, target: torch.Tensor) -> None:
    if logits.shape[:-1] != target.shape or logits.shape[-1] != enc.MELODY_TARGET_VOCAB:
        raise LossShapeError(f"melody logits {tuple(logits.shape)} vs target "
                             f"{tuple(target.shape)}")
    if (target >= enc.MELODY_TARGET_VOCAB).any() or (target < 0).any():
        raise LossShapeError("melody targets must be clean tokens (no MASK)")


def disc_loss(melody_logits: torch.Tensor, target: torch.Tensor) -> LossReport:
    """Cross-entropy of the clean melody at every step."""
    _check_melody(melody_logits, target)
    ce = F.cross_entropy(melody_logits.reshape(-1, enc.MELODY_TARGET_VOCAB), target.reshape(-1))
    return LossReport(ce, {"recon_melody": ce.item()}, {"melody_steps": target.numel()})


def complement_cross_entropy(melody_logits: torch.Tensor, target: torch.Tensor,
                             mode: str = "complement") -> torch.Tensor:
    """Cross-entropy against ``(1 - onehot(target)) / (K - 1)``.

    With ``mode="uniform"`` the target is uniform over all K tokens instead
    (a plain maximum-entropy objective).
    """
    logp = F.log_softmax(melody_logits, dim=-1)
    k = melody_logits.shape[-1]
    if mode == "uniform":
        return -logp.mean(-1).mean()
    if mode != "complement":
        raise ValueError(f"unknown confusion mode {mode!r}")
    # mask rather than subtract the true token so a very negative true logit cannot cancel
    is_true = F.one_hot(target, k).bool()
    return (-logp.masked_fill(is_true, 0.0).sum(-1) / (k - 1)).mean()


def confusion_loss(melody_logits: torch.Tensor, target: torch.Tensor, post: Posterior,
                   alpha: float, mode: str = "complement") -> LossReport:
    _check_melody(melody_logits, target)
    conf = complement_cross_entropy(melody_logits, target, mode)
    kl = kl_std_normal(post)
    return LossReport(conf + alpha * kl, {"confusion": conf.item(), "kl": kl.item()},
                      {"melody_steps": target.numel()})


UNIFORM_CHORD_CE = math.log(enc.CHORD_VOCAB)
UNIFORM_MELODY_CE = math.log(enc.MELODY_TARGET_VOCAB)
MIN_COMPLEMENT_CE = math.log(enc.MELODY_TARGET_VOCAB - 1)
