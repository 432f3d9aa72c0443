import pytest

from qrqa.neural import TransformerConfig, set_threads
from qrqa.text import SPECIAL_TOKENS, Vocabulary

set_threads(1)


def toy_vocab(n_words: int = 30) -> Vocabulary:
    return Vocabulary(list(SPECIAL_TOKENS) + [f"w{i}" for i in range(n_words)])


def tiny_config(causal: bool = True, d: int = 16, layers: int = 2, heads: int = 2, n: int = 32) -> TransformerConfig:
    return TransformerConfig(num_layers=layers, num_heads=heads, model_dim=d, max_seq_len=n, ff_dim=2 * d,
                             causal=causal)


@pytest.fixture
def vocab():
    return toy_vocab()


# --- acceptance reporting: one PASS/FAIL line per criterion at the end of the run ---

_CRITERIA: dict[int, tuple[str, bool]] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n, title): acceptance criterion n")


def pytest_runtest_makereport(item, call):
    mark = item.get_closest_marker("criterion")
    if mark is None or call.when == "teardown" or (call.when == "setup" and call.excinfo is None):
        return
    n, title = mark.args
    _CRITERIA[n] = (title, call.excinfo is None)


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_CRITERIA):
        title, ok = _CRITERIA[n]
        terminalreporter.write_line(f"criterion {n}: {'PASS' if ok else 'FAIL'}  {title}")
