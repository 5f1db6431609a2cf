import os

# Single-threaded BLAS keeps float64 reductions reproducible run to run.
for _var in ("OPENBLAS_NUM_THREADS", "OMP_NUM_THREADS", "MKL_NUM_THREADS"):
    os.environ.setdefault(_var, "1")

import numpy as np  # noqa: E402
import pytest  # noqa: E402

from proad.decoder import DecoderLayerParams  # noqa: E402

_CRITERIA: dict[int, tuple[str, str, str]] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): acceptance criterion covered by the test")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is None or rep.when not in ("setup", "call"):
        return
    number, title = mark.args
    detail = dict(item.user_properties).get("detail", "")
    if rep.failed:
        _CRITERIA[number] = (title, "FAIL", detail)
    elif rep.when == "call" and rep.passed:
        _CRITERIA[number] = (title, "PASS", detail)


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_CRITERIA):
        title, status, detail = _CRITERIA[number]
        line = f"[{status}] {number:>2}. {title}"
        terminalreporter.write_line(f"{line}  ({detail})" if detail else line)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def layer_weights(layer: DecoderLayerParams) -> dict[str, np.ndarray]:
    """Plain-array view of a decoder layer for the reference transcription."""
    a, f = layer.attn, layer.ffn
    return {
        "ln1_g": layer.ln_attn.gamma.data, "ln1_b": layer.ln_attn.beta.data,
        "ln2_g": layer.ln_ffn.gamma.data, "ln2_b": layer.ln_ffn.beta.data,
        "Wq": a.q.weight.data, "bq": a.q.bias.data, "Wk": a.k.weight.data, "bk": a.k.bias.data,
        "Wv": a.v.weight.data, "bv": a.v.bias.data, "Wo": a.o.weight.data, "bo": a.o.bias.data,
        "W1": f.fc1.weight.data, "b1": f.fc1.bias.data, "W2": f.fc2.weight.data, "b2": f.fc2.bias.data,
    }


def randomize(layer: DecoderLayerParams, rng: np.random.Generator) -> DecoderLayerParams:
    """Perturb biases and norm parameters away from their trivial init."""
    for _, t in layer.named_parameters("x"):
        if t.ndim == 1:
            t.data = t.data + 0.1 * rng.standard_normal(t.shape)
    return layer
