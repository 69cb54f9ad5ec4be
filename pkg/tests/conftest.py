import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

from corematch.model import TOY_CONFIG, ModelConfig, init_synthetic  # noqa: E402

# Wider FFN than the toy config: correlation validators need more neurons per
# token for the co-activation statistics to settle.
ANALYSIS_CONFIG = ModelConfig(n_layers=4, d_model=64, d_ffn=512, n_heads=4, vocab_size=256)


@pytest.fixture(scope="session")
def toy_weights():
    return init_synthetic(TOY_CONFIG, seed=7)


@pytest.fixture(scope="session")
def analysis_weights():
    return init_synthetic(ANALYSIS_CONFIG, seed=0)


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    results = getattr(mod, "RESULTS", None)
    if results:
        terminalreporter.section("acceptance criteria")
        for n in sorted(results):
            terminalreporter.write_line(results[n])
