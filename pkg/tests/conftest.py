import numpy as np
import pytest

from knlab.model import ModelConfig, TransformerLM, init_weights


def small_config(mode="bidirectional", **kw) -> ModelConfig:
    base = dict(num_layers=2, d_model=16, d_mlp=32, n_heads=2, vocab_size=20, max_seq_len=10, mode=mode)
    base.update(kw)
    return ModelConfig(**base)


def random_model(seed=0, mode="bidirectional", std=0.3, **kw) -> TransformerLM:
    """Weights large enough that outputs and gradients are far from uniform."""
    cfg = small_config(mode, **kw)
    weights = init_weights(cfg, np.random.default_rng(seed), std)
    rng = np.random.default_rng(seed + 1000)
    for name, w in weights.items():
        if name.endswith((".g", ".b", "b1", "b2", "bq", "bk", "bv", "bo")):
            weights[name] = w + rng.normal(0.0, 0.1, w.shape)
    return TransformerLM(cfg, weights)


def random_prompt(rng, cfg: ModelConfig, length=None):
    T = int(length or rng.integers(3, cfg.max_seq_len + 1))
    ids = rng.integers(2, cfg.vocab_size, size=T)
    if cfg.mode == "bidirectional":
        pos = int(rng.integers(T))
        ids[pos] = cfg.mask_token_id
    else:
        pos = T - 1
    return [int(i) for i in ids], pos


@pytest.fixture
def model():
    return random_model(0)


@pytest.fixture
def causal_model():
    return random_model(1, mode="causal")


# -- acceptance summary: one line per criterion, printed after the run

_CRITERIA: dict[int, dict] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): an acceptance criterion")


def pytest_runtest_logreport(report):
    marker = dict(report.user_properties).get("criterion")
    if marker is None or (report.when != "call" and report.passed):
        return
    entry = _CRITERIA.setdefault(marker[0], {"title": marker[1], "passed": True, "detail": ""})
    entry["passed"] = entry["passed"] and report.passed
    entry["detail"] = dict(report.user_properties).get("detail", entry["detail"])


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_CRITERIA):
        e = _CRITERIA[number]
        status = "PASS" if e["passed"] else "FAIL"
        line = f"criterion {number} [{status}] {e['title']}"
        terminalreporter.write_line(line + (f": {e['detail']}" if e["detail"] else ""))
