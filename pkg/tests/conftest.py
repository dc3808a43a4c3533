import numpy as np
import pytest
import torch

from harmonia import corpus as C
from harmonia.model import ModelConfig, build_model

torch.set_num_threads(1)


def tiny_config(**changes) -> ModelConfig:
    cfg = ModelConfig(d_emb=16, d_z=16, d_p_enc=16, d_t_enc=32, d_t_dec=32, d_p_dec=16,
                      disc_layers=1, disc_heads=2, d_model=32, d_ff=64, gru_disc_hidden=32,
                      dropout=0.0)
    return cfg.replace(**changes)


@pytest.fixture
def tiny_cfg() -> ModelConfig:
    return tiny_config()


@pytest.fixture
def tiny_model(tiny_cfg):
    return build_model(tiny_cfg, seed=0).eval()


@pytest.fixture(scope="session")
def small_corpus() -> C.CorpusFile:
    return C.build_corpus(C.synth_corpus(12, 12, seed=3), 0.25, seed=3)


def random_samples(n: int, seed: int = 0) -> list[C.Sample]:
    """Valid samples cut from the synthetic generator."""
    sheets = C.synth_corpus(max(1, n // 5 + 1), 16, seed)
    samples = [s for sheet in sheets for s in C.slice_snippets(sheet)]
    return samples[:n]


def batch_of(samples) -> tuple[torch.Tensor, torch.Tensor]:
    chord = torch.from_numpy(np.stack([s.chord for s in samples]).astype(np.int64))
    melody = torch.from_numpy(np.stack([s.melody for s in samples]).astype(np.int64))
    return chord, melody


# -- acceptance reporting ---------------------------------------------------------------
# tests marked ``criterion(n, "title")`` are summarized as one PASS/FAIL line per criterion

_CRITERIA: dict[int, dict] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n, title): acceptance criterion n")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None:
        return
    n, title = marker.args
    entry = _CRITERIA.setdefault(n, {"title": title, "passed": True, "ran": False, "notes": []})
    if report.when == "call" or report.failed:
        entry["ran"] = True
        if report.failed:
            entry["passed"] = False
            entry["notes"].append(f"{item.name} failed")
    for key, value in item.user_properties:
        if key == "detail" and report.when == "call":
            entry["notes"].append(value)


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_CRITERIA):
        entry = _CRITERIA[n]
        status = "PASS" if entry["passed"] and entry["ran"] else "FAIL"
        detail = "; ".join(entry["notes"])
        terminalreporter.write_line(f"criterion {n:2d} [{status}] {entry['title']}"
                                    + (f" -- {detail}" if detail else ""))
