"""Conditional chord VAE with a melody-denoising discriminator.

The encoder reads a chord grid hierarchically (a bidirectional GRU across the
four slots of each beat, then a bidirectional GRU across the 32 beats with the
beat-pooled melody attached) and outputs a diagonal Gaussian posterior.  The
decoder mirrors it with unidirectional GRUs and emits slot logits lowest voice
first.  The discriminator reads ``z`` as a prefix token in front of a corrupted
melody and predicts the clean melody with relative-position self-attention.
"""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass
from pathlib import Path

import torch
import torch.nn.functional as F
from torch import nn

from . import encodings as enc

CHECKPOINT_VERSION = 1
LOGVAR_FLOOR = -20.0


class ContractError(ValueError):
    """An input does not match the model configuration."""


@dataclass(frozen=True)
class ModelConfig:
    d_emb: int = 128
    d_z: int = 128
    d_p_enc: int = 256
    d_t_enc: int = 512
    d_t_dec: int = 1024
    d_p_dec: int = 512
    disc_layers: int = 4
    disc_heads: int = 4
    d_model: int = 256
    d_ff: int = 1024
    dropout: float = 0.10
    alpha: float = 0.1
    chord_vocab: int = enc.CHORD_VOCAB
    melody_vocab: int = enc.MELODY_VOCAB
    rel_clip: int = 32
    disc_kind: str = "transformer"  # or "gru" (Non-CR baseline) or "none"
    gru_disc_hidden: int = 512
    gru_disc_layers: int = 2

    def __post_init__(self) -> None:
        dims = [f.name for f in dataclasses.fields(self)
                if f.type in ("int", int) and f.name not in ("chord_vocab", "melody_vocab")]
        for name in dims:
            if getattr(self, name) <= 0:
                raise ContractError(f"{name} must be positive")
        if not 0.0 <= self.dropout < 1.0:
            raise ContractError("dropout must lie in [0, 1)")
        if self.alpha <= 0:
            raise ContractError("alpha must be positive")
        if self.d_model % self.disc_heads:
            raise ContractError("d_model must be divisible by disc_heads")
        if self.disc_kind not in ("transformer", "gru", "none"):
            raise ContractError(f"unknown disc_kind {self.disc_kind!r}")
        if self.chord_vocab != enc.CHORD_VOCAB or self.melody_vocab != enc.MELODY_VOCAB:
            raise ContractError("vocabulary sizes are fixed by the grid encodings")

    def replace(self, **changes) -> "ModelConfig":
        return dataclasses.replace(self, **changes)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


@dataclass
class Posterior:
    mean: torch.Tensor
    log_variance: torch.Tensor

    @property
    def variance(self) -> torch.Tensor:
        return self.log_variance.clamp_min(LOGVAR_FLOOR).exp()


def reparameterize(post: Posterior, generator: torch.Generator | None = None,
                   zero_noise: bool = False) -> torch.Tensor:
    if zero_noise:
        return post.mean
    std = torch.exp(0.5 * post.log_variance.clamp_min(LOGVAR_FLOOR))
    eps = torch.randn(post.mean.shape, generator=generator,
                      dtype=post.mean.dtype, device=post.mean.device)
    return post.mean + std * eps


def _melody_index_tables() -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
    tokens = torch.arange(enc.MELODY_VOCAB)
    onset = tokens < enc.HOLD
    pitch = torch.where(onset, tokens % 12, torch.full_like(tokens, enc.PAD))
    octave = torch.where(onset, tokens // 12, torch.full_like(tokens, enc.N_OCTAVES))
    # state: 0 onset, 1 hold, 2 rest, 3 mask
    state = torch.where(onset, torch.zeros_like(tokens), tokens - enc.HOLD + 1)
    return pitch, octave, state


class MelodyEmbedding(nn.Module):
    """Melody token embedding sharing the chord pitch-class table.

    An onset embeds as pitch(pc) + octave(oct) + state(onset); hold, rest and
    mask embed as their state vector alone.
    """

    def __init__(self, pitch_embedding: nn.Embedding, d_emb: int):
        super().__init__()
        self.pitch = pitch_embedding
        self.octave = nn.Embedding(enc.N_OCTAVES + 1, d_emb, padding_idx=enc.N_OCTAVES)
        self.state = nn.Embedding(4, d_emb)
        pitch, octave, state = _melody_index_tables()
        self.register_buffer("pitch_idx", pitch, persistent=False)
        self.register_buffer("octave_idx", octave, persistent=False)
        self.register_buffer("state_idx", state, persistent=False)

    def forward(self, tokens: torch.Tensor) -> torch.Tensor:
        onset = (tokens < enc.HOLD).unsqueeze(-1).to(self.state.weight.dtype)
        return (self.pitch(self.pitch_idx[tokens]) * onset
                + self.octave(self.octave_idx[tokens])
                + self.state(self.state_idx[tokens]))

    def pooled(self, melody: torch.Tensor) -> torch.Tensor:
        return enc.beat_pool_condition(melody, self)


class ChordEncoder(nn.Module):
    def __init__(self, cfg: ModelConfig, pitch_embedding: nn.Embedding,
                 melody_embedding: MelodyEmbedding):
        super().__init__()
        self.cfg = cfg
        self.pitch_embedding = pitch_embedding
        self.melody_embedding = melody_embedding
        self.pitch_gru = nn.GRU(cfg.d_emb, cfg.d_p_enc, batch_first=True, bidirectional=True)
        self.time_gru = nn.GRU(2 * cfg.d_p_enc + cfg.d_emb, cfg.d_t_enc,
                               batch_first=True, bidirectional=True)
        self.to_mean = nn.Linear(2 * cfg.d_t_enc, cfg.d_z)
        self.to_logvar = nn.Linear(2 * cfg.d_t_enc, cfg.d_z)

    def forward(self, chord: torch.Tensor, melody: torch.Tensor) -> Posterior:
        batch = chord.shape[0]
        notes = self.pitch_embedding(chord).reshape(batch * enc.N_BEATS, enc.N_SLOTS, -1)
        _, h = self.pitch_gru(notes)
        chord_vecs = h.transpose(0, 1).reshape(batch, enc.N_BEATS, -1)
        cond = self.melody_embedding.pooled(melody)
        _, h = self.time_gru(torch.cat([chord_vecs, cond], dim=-1))
        summary = h.transpose(0, 1).reshape(batch, -1)
        return Posterior(self.to_mean(summary), self.to_logvar(summary))


class ChordDecoder(nn.Module):
    """Beat-level GRU driven by [z ; melody beat ; previous chord], slot-level GRU per beat.

    Teacher forcing is decided once per beat: a forced beat reads the true
    tokens for its slots and hands the true chord to the next beat, otherwise
    the argmax predictions are fed back.
    """

    def __init__(self, cfg: ModelConfig, pitch_embedding: nn.Embedding,
                 melody_embedding: MelodyEmbedding):
        super().__init__()
        self.cfg = cfg
        self.pitch_embedding = pitch_embedding
        self.melody_embedding = melody_embedding
        self.z_to_time = nn.Linear(cfg.d_z, cfg.d_t_dec)
        self.time_cell = nn.GRUCell(cfg.d_z + cfg.d_emb + enc.N_SLOTS * cfg.d_emb, cfg.d_t_dec)
        self.time_to_pitch = nn.Linear(cfg.d_t_dec, cfg.d_p_dec)
        self.pitch_gru = nn.GRU(cfg.d_emb + cfg.d_t_dec, cfg.d_p_dec, batch_first=True)
        self.slot_start = nn.Parameter(torch.zeros(cfg.d_emb))
        self.beat_start = nn.Parameter(torch.zeros(enc.N_SLOTS * cfg.d_emb))
        self.out = nn.Linear(cfg.d_p_dec, cfg.chord_vocab)

    def forward(self, z: torch.Tensor, melody: torch.Tensor,
                teacher: torch.Tensor | None = None, tf_rate: float = 0.0,
                generator: torch.Generator | None = None,
                trace: list | None = None) -> torch.Tensor:
        batch = z.shape[0]
        cond = self.melody_embedding.pooled(melody)
        h_time = torch.tanh(self.z_to_time(z))
        prev_chord = self.beat_start.expand(batch, -1)
        start = self.slot_start.expand(batch, 1, -1)
        logits = []
        for t in range(enc.N_BEATS):
            h_time = self.time_cell(torch.cat([z, cond[:, t], prev_chord], dim=-1), h_time)
            h_pitch = torch.tanh(self.time_to_pitch(h_time)).unsqueeze(0)
            ctx = h_time.unsqueeze(1)
            if teacher is not None and _coin(tf_rate, generator):
                tokens = teacher[:, t]
                notes = torch.cat([start, self.pitch_embedding(tokens[:, :-1])], dim=1)
                inputs = torch.cat([notes, ctx.expand(-1, enc.N_SLOTS, -1)], dim=-1)
                out, _ = self.pitch_gru(inputs, h_pitch)
                beat_logits = self.out(out)
                if trace is not None:
                    trace.append((t, True, tokens[:, :-1]))
            else:
                note = start
                steps, fed = [], []
                for p in range(enc.N_SLOTS):
                    out, h_pitch = self.pitch_gru(torch.cat([note, ctx], dim=-1), h_pitch)
                    steps.append(self.out(out))
                    token = steps[-1].argmax(-1)
                    fed.append(token)
                    note = self.pitch_embedding(token)
                beat_logits = torch.cat(steps, dim=1)
                tokens = torch.cat(fed, dim=1)
                if trace is not None:
                    trace.append((t, False, tokens[:, :-1]))
            logits.append(beat_logits)
            prev_chord = self.pitch_embedding(tokens).reshape(batch, -1)
        return torch.stack(logits, dim=1)


def _coin(rate: float, generator: torch.Generator | None) -> bool:
    if rate >= 1.0:
        return True
    if rate <= 0.0:
        return False
    return bool(torch.rand((), generator=generator) < rate)


class RelativeSelfAttention(nn.Module):
    """Multi-head self-attention with clipped relative-position key embeddings."""

    def __init__(self, d_model: int, heads: int, clip: int, dropout: float):
        super().__init__()
        self.heads = heads
        self.d_head = d_model // heads
        self.clip = clip
        self.qkv = nn.Linear(d_model, 3 * d_model)
        self.proj = nn.Linear(d_model, d_model)
        self.rel = nn.Embedding(2 * clip + 1, self.d_head)
        self.dropout = dropout

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        b, n, d = x.shape
        q, k, v = self.qkv(x).view(b, n, 3, self.heads, self.d_head).permute(2, 0, 3, 1, 4)
        pos = torch.arange(n, device=x.device)
        rel = (pos[None, :] - pos[:, None]).clamp(-self.clip, self.clip) + self.clip
        # score against every clipped distance once, then pick the (i, j) entries
        by_distance = q @ self.rel.weight.t()  # (b, h, n, 2 * clip + 1)
        rel_scores = by_distance.gather(-1, rel.expand(b, self.heads, n, n))
        out = F.scaled_dot_product_attention(
            q, k, v, attn_mask=rel_scores / math.sqrt(self.d_head),
            dropout_p=self.dropout if self.training else 0.0)
        out = out.transpose(1, 2).reshape(b, n, d)
        return self.proj(out)


class EncoderLayer(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.attn = RelativeSelfAttention(cfg.d_model, cfg.disc_heads, cfg.rel_clip, cfg.dropout)
        self.norm1 = nn.LayerNorm(cfg.d_model)
        self.ff = nn.Sequential(nn.Linear(cfg.d_model, cfg.d_ff), nn.GELU(),
                                nn.Dropout(cfg.dropout), nn.Linear(cfg.d_ff, cfg.d_model))
        self.norm2 = nn.LayerNorm(cfg.d_model)
        self.drop = nn.Dropout(cfg.dropout)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        x = self.norm1(x + self.drop(self.attn(x)))
        return self.norm2(x + self.drop(self.ff(x)))


class MelodyDenoiser(nn.Module):
    """Transformer discriminator: ``z`` prefix + corrupted melody -> clean melody logits."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        self.z_proj = nn.Linear(cfg.d_z, cfg.d_model)
        self.tokens = nn.Embedding(cfg.melody_vocab, cfg.d_model)
        self.drop = nn.Dropout(cfg.dropout)
        self.layers = nn.ModuleList(EncoderLayer(cfg) for _ in range(cfg.disc_layers))
        self.head = nn.Linear(cfg.d_model, enc.MELODY_TARGET_VOCAB)

    def forward(self, z: torch.Tensor, corrupted: torch.Tensor) -> torch.Tensor:
        if corrupted.shape[-1] != enc.N_STEPS:
            raise ContractError(f"melody length must be {enc.N_STEPS}")
        x = torch.cat([self.z_proj(z).unsqueeze(1), self.tokens(corrupted)], dim=1)
        x = self.drop(x)
        for layer in self.layers:
            x = layer(x)
        return self.head(x[:, 1:])


class MelodyPredictor(nn.Module):
    """GRU discriminator without corruption: predicts the melody from ``z`` alone."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        self.z_to_hidden = nn.Linear(cfg.d_z, cfg.gru_disc_layers * cfg.gru_disc_hidden)
        self.starts = nn.Parameter(torch.randn(enc.N_STEPS, cfg.d_model) * 0.02)
        self.gru = nn.GRU(cfg.d_model, cfg.gru_disc_hidden, num_layers=cfg.gru_disc_layers,
                          batch_first=True, dropout=cfg.dropout if cfg.gru_disc_layers > 1 else 0.0)
        self.head = nn.Linear(cfg.gru_disc_hidden, enc.MELODY_TARGET_VOCAB)

    def forward(self, z: torch.Tensor, corrupted: torch.Tensor | None = None) -> torch.Tensor:
        if corrupted is not None and corrupted.shape[-1] != enc.N_STEPS:
            raise ContractError(f"melody length must be {enc.N_STEPS}")
        batch = z.shape[0]
        h0 = torch.tanh(self.z_to_hidden(z)).view(batch, self.cfg.gru_disc_layers, -1)
        out, _ = self.gru(self.starts.expand(batch, -1, -1), h0.transpose(0, 1).contiguous())
        return self.head(out)


class HarmonyModel(nn.Module):
    """Encoder, decoder and (optional) discriminator with disjoint parameter groups.

    The pitch-class embedding is shared by encoder and decoder inputs and is
    owned by the encoder group.
    """

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        self.pitch_embedding = nn.Embedding(cfg.chord_vocab, cfg.d_emb)
        self.melody_embedding = MelodyEmbedding(self.pitch_embedding, cfg.d_emb)
        self.encoder = ChordEncoder(cfg, self.pitch_embedding, self.melody_embedding)
        self.decoder = ChordDecoder(cfg, self.pitch_embedding, self.melody_embedding)
        if cfg.disc_kind == "transformer":
            self.discriminator: nn.Module | None = MelodyDenoiser(cfg)
        elif cfg.disc_kind == "gru":
            self.discriminator = MelodyPredictor(cfg)
        else:
            self.discriminator = None

    # parameter groups ------------------------------------------------------

    def param_groups(self) -> dict[str, dict[str, nn.Parameter]]:
        """Return ``{"enc": ..., "dec": ..., "dis": ...}`` name -> parameter maps."""
        groups: dict[str, dict[str, nn.Parameter]] = {"enc": {}, "dec": {}, "dis": {}}
        for name, param in self.named_parameters():
            if name.startswith("decoder."):
                groups["dec"][name] = param
            elif name.startswith("discriminator."):
                groups["dis"][name] = param
            else:
                groups["enc"][name] = param
        return groups

    # forwards --------------------------------------------------------------

    def encode(self, chord: torch.Tensor, melody: torch.Tensor) -> Posterior:
        _check_batch(chord, melody)
        return self.encoder(chord, melody)

    def decode(self, z: torch.Tensor, melody: torch.Tensor | None,
               teacher: torch.Tensor | None = None, tf_rate: float = 0.0,
               generator: torch.Generator | None = None, trace: list | None = None) -> torch.Tensor:
        if melody is None:
            raise ContractError("the decoder is conditional: a melody is required")
        if z.shape[-1] != self.cfg.d_z:
            raise ContractError(f"z has width {z.shape[-1]}, config says {self.cfg.d_z}")
        if melody.shape[-1] != enc.N_STEPS:
            raise ContractError(f"melody length must be {enc.N_STEPS}")
        return self.decoder(z, melody, teacher, tf_rate, generator, trace)

    def discriminate(self, z: torch.Tensor, corrupted: torch.Tensor) -> torch.Tensor:
        if self.discriminator is None:
            raise ContractError("this model variant has no discriminator")
        return self.discriminator(z, corrupted)

    @torch.no_grad()
    def harmonize(self, z: torch.Tensor, melody: torch.Tensor) -> torch.Tensor:
        """Greedy decode followed by PAD-suffix normalization."""
        tokens = self.decode(z, melody).argmax(-1)
        pad_seen = torch.cumsum((tokens == enc.PAD).long(), dim=-1) > 0
        return tokens.masked_fill(pad_seen, enc.PAD)


def _check_batch(chord: torch.Tensor, melody: torch.Tensor) -> None:
    if tuple(chord.shape[-2:]) != (enc.N_BEATS, enc.N_SLOTS):
        raise ContractError(f"chord grid must be {enc.N_BEATS}x{enc.N_SLOTS}")
    if melody.shape[-1] != enc.N_STEPS:
        raise ContractError(f"melody length must be {enc.N_STEPS}")


def build_model(cfg: ModelConfig, seed: int = 0) -> HarmonyModel:
    torch.manual_seed(seed)
    return HarmonyModel(cfg)


def param_count(model: HarmonyModel) -> tuple[int, int]:
    """Trainable scalars in (encoder + decoder, discriminator); shared tables counted once."""
    groups = model.param_groups()
    n_vae = sum(p.numel() for g in ("enc", "dec") for p in groups[g].values() if p.requires_grad)
    n_dis = sum(p.numel() for p in groups["dis"].values() if p.requires_grad)
    return n_vae, n_dis


# ---------------------------------------------------------------------------
# checkpoints

def save_checkpoint(model: HarmonyModel, path: str | Path, step: int = 0,
                    extra: dict | None = None) -> None:
    payload = {
        "format_version": CHECKPOINT_VERSION,
        "config": model.cfg.to_dict(),
        "step": step,
        "extra": extra or {},
        "tensors": {k: v.detach().clone() for k, v in model.state_dict().items()},
    }
    torch.save(payload, Path(path))


def load_checkpoint(path: str | Path, expect: ModelConfig | None = None,
                    ) -> tuple[HarmonyModel, dict]:
    payload = torch.load(Path(path), map_location="cpu", weights_only=True)
    if payload.get("format_version") != CHECKPOINT_VERSION:
        raise ContractError(f"{path}: unsupported checkpoint version")
    cfg = ModelConfig(**payload["config"])
    if expect is not None and expect != cfg:
        raise ContractError(f"{path}: checkpoint config does not match the requested config")
    model = HarmonyModel(cfg)
    tensors = payload["tensors"]
    model.to(next(iter(tensors.values())).dtype)
    model.load_state_dict(tensors)
    model.eval()
    return model, {"step": payload["step"], **payload["extra"]}
