"""Session fixtures: one rendered scene and one trained cascade, shared by all tests.

The scene holds ten vehicles on two lanes; spawns start at frame 60 so the
background model has settled before the first vehicle enters. Training uses a
reduced budget (it early-stops once negatives are exhausted), which keeps the
fixture cheap while still producing a cascade that counts the scene cleanly.
"""

import pytest

from roadcount import cli, synthgen


@pytest.fixture(scope="session")
def ten_vehicle_scenario() -> synthgen.ScenarioConfig:
    return synthgen.ScenarioConfig(
        width=240,
        height=135,
        frames=260,
        markers=synthgen.default_markers(240, 135),
        spawns=synthgen.spawn_schedule(10, 15, 2, 4.0, 30, 30, start=60),
        seed=11,
        background_seed=4,
        noise_sigma=0.0,
    )


@pytest.fixture(scope="session")
def ten_vehicle_scene(tmp_path_factory, ten_vehicle_scenario) -> str:
    scene_dir = tmp_path_factory.mktemp("scene") / "ten"
    synthgen.save_scene(str(scene_dir), ten_vehicle_scenario)
    return str(scene_dir)


@pytest.fixture(scope="session")
def small_cascade(tmp_path_factory, ten_vehicle_scene) -> str:
    model_path = tmp_path_factory.mktemp("model") / "cascade.txt"
    config = cli.PipelineConfig(
        scene=ten_vehicle_scene,
        model=str(model_path),
        stages=3,
        train_pos=400,
        train_neg=1500,
        train_hard=2000,
    )
    cli.train(config)
    return str(model_path)
