from __future__ import annotations

import numpy as np
import pytest

from fedspars.energy import ChannelParams, EnergyModel, GpuParams


def random_energy_model(rng: np.random.Generator, M: int, H_set=(1, 2, 4, 8, 16), d: int | None = None) -> EnergyModel:
    """Random desk-scale population with positive constants."""
    d = int(rng.integers(1000, 20001)) if d is None else d
    channels = [
        ChannelParams(tx_power=float(rng.uniform(0.1, 1.0)), fading="fixed_rate", rate=float(10 ** rng.uniform(5, 7)))
        for _ in range(M)
    ]
    gpus = [GpuParams().with_energy(float(10 ** rng.uniform(-3, -1))) for _ in range(M)]
    return EnergyModel(
        d=d,
        channels=channels,
        gpus=gpus,
        c_alpha=float(10 ** rng.uniform(-4, -2)),
        c_beta=float(10 ** rng.uniform(0, 3)),
        H_set=tuple(H_set),
    )


@pytest.fixture
def rng() -> np.random.Generator:
    return np.random.default_rng(12345)
