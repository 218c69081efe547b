import warnings

import numpy as np
import pytest

from fewshot_textseg.backend import make_toy_backend
from fewshot_textseg.data import SupportSample, make_toy_suite

SMALL = 96  # canvas for fast tests; a multiple of the 16 px patch


@pytest.fixture(scope="session", params=[0, 7], ids=["toy-seed0", "toy-seed7"])
def backend(request):
    return make_toy_backend(seed=request.param, dim=32, image_size=SMALL)


@pytest.fixture(scope="session")
def toy():
    return make_toy_backend(seed=0, dim=32, image_size=SMALL)


@pytest.fixture(scope="session")
def small_suite():
    return make_toy_suite(seed=3, n_support=4, n_query=3, canvas=SMALL, glyph_size=(24, 40), glyph_count=(1, 3))


@pytest.fixture(scope="session")
def small_supports(small_suite):
    out = []
    for sid in small_suite.support.ids:
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            out.append(small_suite.support.load(sid, SMALL))
    return out


def random_support(rng, size=SMALL, sid="r0", fg_fraction=0.3) -> SupportSample:
    img = rng.normal(size=(size, size, 3))
    mask = (rng.random((size, size)) < fg_fraction).astype(np.uint8)
    return SupportSample(sid, img, mask)


# a run configuration small enough for second-scale CLI and experiment tests
SMALL_RUN = {
    "backend": "toy:seed=0,dim=32,image_size=96",
    "image_size": 96,
    "train": {"epochs": 2},
    "prompts": {"fg_n_total": 4, "bg_n_total": 4},
    "suite": {"seed": 3, "n_support": 3, "n_query": 3, "canvas": 96},
}


@pytest.fixture
def small_config_file(tmp_path):
    import json

    path = tmp_path / "small.json"
    path.write_text(json.dumps(SMALL_RUN))
    return path


# (criterion, passed, detail) lines collected by the acceptance suite
ACCEPTANCE_LOG: list[tuple[str, bool, str]] = []


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_LOG:
        return
    terminalreporter.section("acceptance criteria")
    for name, ok, detail in ACCEPTANCE_LOG:
        terminalreporter.write_line(f"{'PASS' if ok else 'FAIL'}  {name}: {detail}")
