import struct

import numpy as np
import pytest

from fad.backbone import BackboneConfig, init_backbone
from fad.episodes import SamplerConfig, default_source_spec, default_target_spec, make_shift_pair, sample_episode

SMALL = BackboneConfig(2, (4, 6), (1, 16, 16))


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(scope="session")
def small_pool():
    _, pool = make_shift_pair(default_source_spec(size=16), default_target_spec(size=16), 0, 4, 4, 6, 12)
    return pool


@pytest.fixture(scope="session")
def small_backbone():
    return init_backbone(SMALL, 0).freeze()


@pytest.fixture
def small_episode(small_pool):
    return sample_episode(small_pool, SamplerConfig(way_min=3, way_max=4, query_per_class=3, seed=0), 0)


def idx_bytes(magic, dims, payload=b""):
    return struct.pack(f">I{len(dims)}I", magic, *dims) + payload


@pytest.fixture
def idx_pair(tmp_path):
    """Two 2x2 images: all zeros and all 255; labels 3 and 7."""
    img = tmp_path / "img-idx3-ubyte"
    lab = tmp_path / "lab-idx1-ubyte"
    img.write_bytes(idx_bytes(0x803, (2, 2, 2), bytes([0] * 4 + [255] * 4)))
    lab.write_bytes(idx_bytes(0x801, (2,), bytes([3, 7])))
    return img, lab


# acceptance tests append (criterion, passed, detail); printed once at the end of the run
ACCEPTANCE: list = []


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for crit, ok, detail in sorted(ACCEPTANCE, key=lambda r: r[0]):
        terminalreporter.write_line(f"{'PASS' if ok else 'FAIL'} criterion {crit:>2}: {detail}")
