import numpy as np
import pytest

from almt.data import SynthConfig, generate_synthetic
from almt.model import ModelConfig

TINY_DIMS = {"language": 6, "visual": 4, "audio": 3}
TINY_LENS = {"language": 5, "visual": 5, "audio": 5}

_criteria: dict[str, list[str]] = {}
_details: dict[str, list[str]] = {}


def tiny_config(**kw) -> ModelConfig:
    base = dict(token_len=3, model_dim=8, heads=2, d_k=4, embed_depth=1, ahl_depth=3, fusion_depth=1,
                input_dims=TINY_DIMS, input_lens=TINY_LENS)
    base.update(kw)
    return ModelConfig(**base)


def random_inputs(rng, batch=2, dims=TINY_DIMS, lens=TINY_LENS):
    return {m: rng.normal(size=(batch, lens[m], dims[m])) for m in dims}


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def tiny_dataset():
    return generate_synthetic(SynthConfig(n_samples=12, lengths=TINY_LENS, dims=TINY_DIMS, seed=7))


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(label): acceptance criterion reported in the summary")


def pytest_runtest_logreport(report):
    label = report.user_properties and dict(report.user_properties).get("criterion")
    if not label:
        return
    if report.when == "call" or report.outcome != "passed":
        _criteria.setdefault(label, []).append(report.outcome)
    detail = dict(report.user_properties).get("detail")
    if report.when == "call" and detail:
        _details.setdefault(label, []).append(detail)


@pytest.hookimpl(tryfirst=True)
def pytest_runtest_setup(item):
    marker = item.get_closest_marker("criterion")
    if marker:
        item.user_properties.append(("criterion", marker.args[0]))


def pytest_terminal_summary(terminalreporter):
    if not _criteria:
        return
    terminalreporter.section("acceptance criteria")
    for label in sorted(_criteria, key=lambda s: int(s.split()[0][2:])):
        ok = all(o == "passed" for o in _criteria[label])
        extra = "; ".join(_details.get(label, []))
        terminalreporter.write_line(f"{'PASS' if ok else 'FAIL'}  {label}" + (f"  [{extra}]" if extra else ""))
