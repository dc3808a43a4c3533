import json
import math

import numpy as np
import pytest
import torch

from harmonia import encodings as enc
from harmonia.corpus import CorpusFile
from harmonia.model import ContractError, build_model, load_checkpoint
from harmonia.objectives import UNIFORM_MELODY_CE, confusion_loss
from harmonia.training import (BatchStream, ScheduleError, Trainer, TrainSchedule, Variant,
                               cycle_phases, group_hashes, lr_at, stack_samples,
                               steps_per_epoch, tf_at, train)

from conftest import random_samples, tiny_config


# -- schedules ----------------------------------------------------------------------

def test_lr_schedule_values():
    s = TrainSchedule()
    assert lr_at(0, s) == pytest.approx(1e-3, rel=1e-12)
    assert lr_at(19, s) == pytest.approx(1e-5, rel=1e-12)
    assert lr_at(9, s) == pytest.approx(1e-3 * (1e-2) ** (9 / 19), rel=1e-12)
    assert lr_at(9, s) == pytest.approx(1.128e-4, rel=1e-3)
    values = [lr_at(e, s) for e in range(20)]
    assert all(b < a for a, b in zip(values, values[1:]))
    ratios = np.array(values[1:-1]) / np.array(values[:-2])
    assert np.allclose(ratios, ratios[0])


def test_tf_schedule_values():
    s = TrainSchedule()
    assert tf_at(0, s) == 0.8
    assert tf_at(19, s) == 0.0
    assert tf_at(18, s) <= 0.8 * (0.01 / 0.8) ** (18 / 19) + 1e-12
    values = [tf_at(e, s) for e in range(20)]
    assert all(b < a for a, b in zip(values, values[1:]))


def test_schedule_errors():
    with pytest.raises(ScheduleError):
        lr_at(0, TrainSchedule(epochs=1))
    with pytest.raises(ScheduleError):
        tf_at(20, TrainSchedule())
    with pytest.raises(ScheduleError):
        TrainSchedule(i=-1)
    with pytest.raises(ScheduleError):
        TrainSchedule(lr_start=1e-5, lr_end=1e-3)
    with pytest.raises(ScheduleError):
        TrainSchedule(batch_size=0)


def test_published_cycle_phase_sequence():
    phases = cycle_phases(TrainSchedule(), adversarial=True)
    assert phases == ["vae"] * 10 + ["disc"] * 5 + ["enc_adv"] * 5
    assert cycle_phases(TrainSchedule(), adversarial=False) == ["vae"] * 10
    assert cycle_phases(TrainSchedule(j=2, k=1, l=2), True) == ["vae"] * 10 + ["disc", "enc_adv",
                                                                              "enc_adv"] * 2


# -- single steps -------------------------------------------------------------------

@pytest.fixture
def batch():
    return stack_samples(random_samples(6, seed=3))


def _trainer(variant=Variant.DAT, **sched):
    model = build_model(tiny_config(disc_kind=variant.disc_kind), seed=0)
    return Trainer(model, TrainSchedule(seed=0, **sched), variant.corruption())


def _changed(before, after):
    return {g for g in before if before[g] != after[g]}


def test_vae_step_touches_only_encoder_and_decoder(batch):
    tr = _trainer()
    before = group_hashes(tr.model)
    tr.train_step_vae(batch)
    assert _changed(before, group_hashes(tr.model)) == {"enc", "dec"}


def test_disc_step_touches_only_discriminator(batch):
    tr = _trainer()
    before = group_hashes(tr.model)
    tr.train_step_disc(batch)
    assert _changed(before, group_hashes(tr.model)) == {"dis"}


def test_enc_adv_step_touches_only_encoder(batch):
    tr = _trainer()
    before = group_hashes(tr.model)
    report = tr.train_step_enc_adv(batch)
    assert _changed(before, group_hashes(tr.model)) == {"enc"}
    assert "kl" in report.components and "confusion" in report.components
    assert all(p.requires_grad for p in tr.model.discriminator.parameters())


def test_confusion_gradient_absent_on_discriminator(batch):
    tr = _trainer()
    for p in tr.model.discriminator.parameters():
        p.requires_grad_(False)
    post = tr.model.encode(batch.chord, batch.melody)
    logits = tr.model.discriminate(post.mean, batch.melody)
    confusion_loss(logits, batch.melody, post, 0.1).total.backward()
    assert all(p.grad is None for p in tr.model.discriminator.parameters())
    assert any(p.grad is not None for p in tr.model.encoder.parameters())


def test_zero_learning_rate_is_a_pure_forward(batch):
    tr = _trainer(lr_start=0.0, lr_end=0.0)
    tr.set_lr(0.0)
    before = group_hashes(tr.model)
    tr.torch_gen = torch.Generator().manual_seed(5)
    report = tr.train_step_vae(batch)
    assert group_hashes(tr.model) == before
    tr.torch_gen = torch.Generator().manual_seed(5)
    tr.model.train()
    with torch.no_grad():
        again = tr.vae_forward(batch)
    assert again.total.item() == report.total.item()


def test_overfit_one_batch_decreases_reconstruction(batch):
    tr = _trainer(lr_start=3e-3)
    tr.tf_rate = 1.0
    losses = [tr.train_step_vae(batch).components["recon_chord"] for _ in range(50)]
    assert losses[-1] < losses[0] - 0.5
    smoothed = np.convolve(losses, np.ones(5) / 5, "valid")
    assert smoothed[-1] < smoothed[0]


def test_discriminator_beats_uniform_with_frozen_encoder():
    samples = random_samples(32, seed=4)
    tr = _trainer(lr_start=3e-3)
    stream = BatchStream(stack_samples(samples), 16, np.random.default_rng(0))
    enc_before = group_hashes(tr.model)["enc"]
    losses = [tr.train_step_disc(next(stream)).total.item() for _ in range(200)]
    assert group_hashes(tr.model)["enc"] == enc_before
    assert np.mean(losses[-20:]) < UNIFORM_MELODY_CE


def test_transpose_corruption_resampled_every_step(batch):
    tr = _trainer()
    a = tr._corrupt(batch.melody)
    b = tr._corrupt(batch.melody)
    assert not torch.equal(a, b)


def test_non_dat_has_no_adversarial_steps(batch):
    tr = _trainer(Variant.NON_DAT)
    with pytest.raises(ContractError):
        tr.train_step_disc(batch)
    with pytest.raises(ContractError):
        tr.train_step_enc_adv(batch)


def test_variant_corruptions():
    assert Variant.DAT.corruption().method is enc.CorruptionMethod.TRANSPOSE
    assert Variant.MASK_CR.corruption(0.15).method is enc.CorruptionMethod.MASK
    assert Variant.NON_CR.corruption().method is enc.CorruptionMethod.NONE
    assert Variant.NON_CR.disc_kind == "gru" and Variant.NON_DAT.disc_kind == "none"


@pytest.mark.parametrize("variant", list(Variant))
def test_every_variant_steps(variant, batch):
    tr = _trainer(variant)
    tr.train_step_vae(batch)
    if variant is not Variant.NON_DAT:
        tr.train_step_disc(batch)
        tr.train_step_enc_adv(batch)


# -- full runs ----------------------------------------------------------------------

RUN_SCHED = dict(i=2, j=1, k=1, l=1, batch_size=8, epochs=2, cycles_per_epoch=2, seed=3)


def test_train_writes_log_and_checkpoints(small_corpus, tmp_path):
    sched = TrainSchedule(**RUN_SCHED, verify_every=1)
    result = train(small_corpus, tiny_config(), sched, "dat", tmp_path)
    assert [p.name for p in result.checkpoints] == ["epoch_000.ckpt", "epoch_001.ckpt"]
    records = [json.loads(line) for line in (tmp_path / "metrics.jsonl").read_text().splitlines()]
    steps = [r for r in records if r["phase"] != "val"]
    assert [r["step"] for r in steps] == list(range(len(steps)))
    assert [r["phase"] for r in steps[:4]] == ["vae", "vae", "disc", "enc_adv"]
    assert len(steps) == 2 * 2 * 4
    assert [r["epoch"] for r in records if r["phase"] == "val"] == [0, 1]
    assert steps[-1]["tf"] == 0.0 and steps[-1]["lr"] == pytest.approx(1e-5)
    assert result.routing_checks == len(steps) and result.routing_violations == []
    model, meta = load_checkpoint(result.final_checkpoint)
    assert meta["epoch"] == 1 and meta["variant"] == "dat"


def test_non_dat_log_has_no_adversarial_phases(small_corpus):
    result = train(small_corpus, tiny_config(), TrainSchedule(**RUN_SCHED), "non-dat")
    assert {r["phase"] for r in result.metrics} == {"vae", "val"}
    assert result.model.discriminator is None


def test_max_epochs_stops_early_on_full_schedule(small_corpus):
    sched = TrainSchedule(**{**RUN_SCHED, "epochs": 5}, max_epochs=1)
    result = train(small_corpus, tiny_config(), sched, "non-dat")
    steps = [r for r in result.metrics if r["phase"] != "val"]
    assert {r["epoch"] for r in steps} == {0}
    assert steps[0]["lr"] == 1e-3


def test_runs_are_deterministic(small_corpus):
    sched = TrainSchedule(**RUN_SCHED)
    a = train(small_corpus, tiny_config(dropout=0.1), sched, "mask-cr").metrics
    b = train(small_corpus, tiny_config(dropout=0.1), sched, "mask-cr").metrics
    assert a == b


def test_train_requires_both_splits(small_corpus):
    with pytest.raises(ValueError):
        train(CorpusFile(small_corpus.train, []), tiny_config(), TrainSchedule(**RUN_SCHED))


def test_epoch_length_follows_basis(small_corpus):
    aug = steps_per_epoch(small_corpus, TrainSchedule(batch_size=8))
    raw = steps_per_epoch(small_corpus, TrainSchedule(batch_size=8, epoch_basis="raw"))
    assert aug == math.ceil(len(small_corpus.train) / 8)
    assert raw == math.ceil(len(small_corpus.train) / 12 / 8)
