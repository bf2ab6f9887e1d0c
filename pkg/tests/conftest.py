import numpy as np
import pytest
import torch

from htcl.dataset import GenConfig, generate
from htcl.model import Dims, HTCLNet, collate

SMALL_DIMS = Dims(d_pos=4, d_word=6, d_f=8, d_e=8, d_r=8, d_model=8, d_ff=12, heads=2, d_proj=6)


def small_net(seed=0, C=5, N_obj=4, d_v=6, layers=2, dtype=torch.float64):
    net = HTCLNet(C, N_obj, d_v, SMALL_DIMS, tpfe_layers=layers, seed=seed)
    rng = np.random.default_rng(seed)
    net.head.set_gate(rng.integers(1, 50, size=C))
    net.centers.set_head(range(min(3, C)))
    return net.to(dtype)


def toy_scenes(n_images=2, seed=0, C=5, N_obj=4, d_v=6, min_objects=2, max_objects=4):
    cfg = GenConfig(num_images=n_images, num_test_images=0, N_obj=N_obj, C=C, d_v=d_v,
                    seed=seed, min_objects=min_objects, max_objects=max_objects,
                    max_relations=4, zipf_exponent=0.5, num_parents=2)
    return generate(cfg)["train"]


@pytest.fixture
def toy_batch():
    scenes = toy_scenes(3, seed=1)
    return scenes, collate(scenes, torch.float64)


@pytest.fixture(scope="session")
def tiny_data():
    cfg = GenConfig(num_images=60, num_test_images=30, C=6, N_obj=5, d_v=8, seed=3,
                    zipf_exponent=1.0, num_parents=3, max_objects=4)
    return cfg, generate(cfg)


# -- acceptance summary lines --------------------------------------------------------------------

CRITERIA_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if CRITERIA_LINES:
        terminalreporter.section("acceptance criteria")
        for line in CRITERIA_LINES:
            terminalreporter.write_line(line)
