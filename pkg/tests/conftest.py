import numpy as np
import pytest
from hypothesis import strategies as st

from mhn.builders import BackboneSpec


@st.composite
def backbones(draw, max_split=7):
    """Valid random BackboneSpecs: non-decreasing widths, last three equal."""
    split = draw(st.integers(3, max_split))
    extra = draw(st.integers(0, 1))
    convs = draw(st.lists(st.integers(1, 3), min_size=split + extra, max_size=split + extra))
    widths = sorted(draw(st.lists(st.integers(1, 16), min_size=split - 2, max_size=split - 2)))
    widths += [widths[-1]] * 2 + [widths[-1] + draw(st.integers(0, 4))] * extra
    k = draw(st.sampled_from([(3, 3), (1, 1), (5, 5), (3, 1)]))
    return BackboneSpec(tuple(zip(convs, widths)), split, kernel=k)


def random_backbone(rng, max_split=7):
    split = int(rng.integers(3, max_split + 1))
    n_blocks = split + int(rng.integers(0, 2))
    convs = rng.integers(1, 4, size=n_blocks)
    widths = sorted(int(w) for w in rng.integers(1, 65, size=split - 2))
    widths += [widths[-1]] * (n_blocks - split + 2)
    k = [(3, 3), (1, 1), (5, 5), (3, 1)][int(rng.integers(0, 4))]
    return BackboneSpec(tuple((int(c), w) for c, w in zip(convs, widths)), split, kernel=k)


def pytest_terminal_summary(terminalreporter):
    import sys

    mod = sys.modules.get("test_acceptance")
    if mod is not None and mod.RESULTS:
        terminalreporter.section("acceptance criteria")
        for line in mod.RESULTS:
            terminalreporter.write_line(line)


@pytest.fixture
def rng():
    return np.random.default_rng(20240517)
