import random

import pytest

from ringsim.dram import DramGeometry, DramModel
from ringsim.oram import SCHEME_FEATURES, OramConfig, OramController

TOY_GEOMETRY = DramGeometry(channels=2, dimms_per_channel=1, ranks_per_dimm=2,
                            banks=2, rows=4, columns=2)  # 64 blocks


def make_controller(scheme="rimr", levels=10, cached=3, seed=7, **cfg_kw) -> OramController:
    cfg = OramConfig(tree_levels=levels, cached_levels=cached,
                     stash_capacity=cfg_kw.pop("stash_capacity", 2000), **cfg_kw)
    return OramController(cfg, SCHEME_FEATURES[scheme], seed=seed)


def run_mixed(ctrl: OramController, n: int, footprint: int, seed: int,
              shadow: dict | None = None) -> dict:
    """Random read/write workload checked against a flat shadow memory."""
    rng = random.Random(seed)
    shadow = shadow if shadow is not None else {}
    for i in range(n):
        addr = rng.randrange(footprint)
        if rng.random() < 0.5:
            data = rng.randbytes(64)
            prev = ctrl.access(addr, "write", data)
            assert prev == shadow.get(addr, bytes(64))
            shadow[addr] = data
        else:
            assert ctrl.access(addr, "read") == shadow.get(addr, bytes(64))
    return shadow


@pytest.fixture
def toy_dram():
    return DramModel(TOY_GEOMETRY, seed=1)
