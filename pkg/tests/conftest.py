import sys
from pathlib import Path

import pytest
import torch

sys.path.insert(0, str(Path(__file__).parent))

torch.set_num_threads(1)


@pytest.fixture
def f64():
    previous = torch.get_default_dtype()
    torch.set_default_dtype(torch.float64)
    yield
    torch.set_default_dtype(previous)


def tiny_spec(timestamps=2, kind="rotation"):
    from canonflow import scenesynth as ss
    builder = {"rotation": ss.rotation_scene, "static": ss.static_scene, "translation": ss.translation_scene}[kind]
    spec = builder(timestamps)
    spec.rig = ss.RigSpec(count=4, heldout=1, width=16, height=16, focal=22.75)
    spec.render_samples = 32
    spec.gt_resolution = 8
    spec.markers = 4
    return spec


def tiny_config(**overrides):
    from canonflow import config
    grid = {"levels": 2, "features_per_level": 2, "base_resolution": 8, "per_level_scale": 2.0, "table_size": 2**12}
    base = {
        "model": {"canonical_grid": grid, "deformation_grid": grid, "hidden": 16},
        "render": {"samples": 16},
        "optim": {"warmup_iters": 2},
        "train": {"rays": 64, "canonical_iters": 6, "coarse_iters": 4, "fine_iters": 4, "carve_resolution": 16,
                  "log_every": 2},
        "eval": {"inversion_resolution": 8},
    }
    cfg = config.merge(config.desk_config(), base)
    return config.merge(cfg, overrides) if overrides else cfg


@pytest.fixture(scope="session")
def tiny_scene(tmp_path_factory):
    from canonflow import scenesynth
    return scenesynth.generate(tiny_spec(3), tmp_path_factory.mktemp("tiny") / "scene", seed=0)


@pytest.fixture(scope="session")
def static_tiny_scene(tmp_path_factory):
    from canonflow import scenesynth
    return scenesynth.generate(tiny_spec(2, "static"), tmp_path_factory.mktemp("static") / "scene", seed=0)
