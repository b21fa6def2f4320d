import sys
from pathlib import Path

import pytest

from offload_planner.config import (
    AcceptanceCurve,
    DraftModelSpec,
    HardwareSpec,
    ModelSpec,
    WorkloadSpec,
    load_config,
)

ROOT = Path(__file__).resolve().parents[1]
DATA = ROOT / "src" / "offload_planner" / "data"
sys.path.insert(0, str(ROOT / "scripts"))

GIB = 1024 ** 3


@pytest.fixture(scope="session")
def data_dir() -> Path:
    return DATA


@pytest.fixture(scope="session")
def a30_apps():
    return load_config(DATA / "a30_mixtral_apps.json")


@pytest.fixture(scope="session")
def d4090_apps():
    return load_config(DATA / "4090d_mixtral_apps.json")


@pytest.fixture(scope="session")
def a30(a30_apps) -> HardwareSpec:
    return a30_apps[0]


@pytest.fixture(scope="session")
def mixtral(a30_apps) -> ModelSpec:
    return a30_apps[1]


@pytest.fixture(scope="session")
def apps(a30_apps) -> WorkloadSpec:
    return a30_apps[2]


def tiny_model(**kw) -> ModelSpec:
    base = dict(
        h=64, h_i=128, n_expert=8, n_activate=2, n_layers=2, g=4,
        draft=DraftModelSpec(n_layers=1, param_bytes=1e6, kv_bytes_per_token=256, ffn_ops_per_token=1e5),
        weight_bytes=1e9, bytes_per_elem=2,
    )
    base.update(kw)
    return ModelSpec(**base)


def tiny_hardware(**kw) -> HardwareSpec:
    base = dict(p_gpu=1e14, b_gpu=1e12, p_cpu=1e12, b_cpu=2e11, b_h2d=2.5e10,
                gpu_mem=8e9, cpu_mem=20e9)
    base.update(kw)
    return HardwareSpec(**base)


def tiny_workload(p=0.8, k_max=6, **kw) -> WorkloadSpec:
    base = dict(mean_input_len=200, std_input_len=50, output_len=100,
                acceptance=AcceptanceCurve.geometric(p, k_max))
    base.update(kw)
    return WorkloadSpec(**base)
