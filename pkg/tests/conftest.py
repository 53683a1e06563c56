import pytest
import torch

from streamdiff import numeric
from streamdiff.model import ConditionSet, ModelConfig, VideoTransformer

torch.set_num_threads(1)


def small_config(pattern="hybrid", **kw):
    base = dict(n_layers=4, model_dim=16, n_heads=2, frame_grid=(2, 3), latent_channels=3, cond_dim=5)
    base.update(kw)
    return ModelConfig(**base).with_pattern(pattern)


def make_model(pattern="hybrid", seed=0, **kw):
    return VideoTransformer(small_config(pattern, **kw), seed=seed)


def make_cond(config, frames, seed=0, batch=1, text=False):
    g = numeric.generator(seed, 99)
    audio = numeric.randn((batch, frames, config.cond_dim), g)
    ref = numeric.randn((batch, *config.frame_grid, config.latent_channels), g)
    txt = numeric.randn((batch, config.cond_dim), g) if text else None
    return ConditionSet(audio, reference=ref, text=txt)


def make_latents(config, frames, seed=0, batch=1):
    g = numeric.generator(seed, 98)
    return numeric.randn((batch, frames, *config.frame_grid, config.latent_channels), g)


@pytest.fixture
def model():
    return make_model()


# ---------------------------------------------------------------- acceptance reporting

_CRITERIA: dict[int, list[tuple[str, str]]] = {}


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None:
        return
    if report.when == "call" or (report.when == "setup" and report.outcome != "passed"):
        _CRITERIA.setdefault(marker.args[0], []).append((item.name, report.outcome))


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_CRITERIA):
        runs = _CRITERIA[n]
        ok = all(o == "passed" for _, o in runs)
        bad = [name for name, o in runs if o != "passed"]
        detail = f"{len(runs)} checks" if ok else "failed: " + ", ".join(bad)
        terminalreporter.write_line(f"criterion {n}: {'PASS' if ok else 'FAIL'} ({detail})")
