import numpy as np
import pytest

from vehids.ingest import SynthConfig, generate_synthetic_can
from vehids.pipeline import build_image_set, images_to_arrays
from vehids.transform import CAN_CHUNK

BALANCED_MIX = {
    "Normal": 0.5, "DoS": 0.125, "Fuzzy": 0.125, "Gear": 0.125, "RPM": 0.125,
}


def pytest_addoption(parser):
    parser.addoption(
        "--with-real-data",
        action="store_true",
        default=False,
        help="run the real-dataset acceptance checks (needs VEHIDS_CAR_HACKING_DIR "
             "and/or VEHIDS_CICIDS2017_DIR)",
    )


@pytest.fixture(scope="session")
def synth_records_small():
    config = SynthConfig(n_records=6_000, attack_mix=BALANCED_MIX, rng_seed=11)
    return generate_synthetic_can(config)


@pytest.fixture(scope="session")
def small_image_set(synth_records_small):
    _, images = build_image_set([synth_records_small], CAN_CHUNK, fit_source="test")
    return images_to_arrays(images)


@pytest.fixture(scope="session")
def toy_black_white():
    """Linearly separable two-class image set: black vs white."""
    rng = np.random.default_rng(4)
    black = rng.integers(0, 30, size=(60, 9, 9, 3)).astype(np.uint8)
    white = rng.integers(225, 256, size=(60, 9, 9, 3)).astype(np.uint8)
    x = np.concatenate([black, white])
    y = np.asarray([0] * 60 + [1] * 60, dtype=np.int64)
    return x, y
