"""Write the shipped reference profile and its simulate config.

The profile is synthetic: per-kind proportional latency lines are calibrated
so one iteration at the reference operating point (A30 micro-benchmark, k=5,
m=2) reproduces a measured component breakdown, then sampled with 5% noise.
"""

from __future__ import annotations

import json
import sys
from pathlib import Path

from offload_planner.config import Hyperparameters, load_config, to_jsonable
from offload_planner.memory import plan_memory
from offload_planner.optimizer import (
    calibrate_latency_model,
    predecide,
    save_profile_csv,
    synthetic_profile,
)
from offload_planner.pipeline import EventKind, drivers, iteration_context

DATA = Path(__file__).resolve().parents[1] / "src" / "offload_planner" / "data"
CONFIG = DATA / "a30_mixtral_microbench.json"

# Measured busy seconds per kind for one iteration at the reference point.
MEASURED_BUSY = {
    EventKind.CPU_ATTN: 4.29,
    EventKind.GPU_MOE: 3.53,
    EventKind.H2D_EXPERTS: 3.70,
    EventKind.DRAFT_GPU_STEP: 0.42,
    EventKind.DRAFT_CPU_ATTN: 0.52,
    EventKind.DRAFT_GPU_FFN: 0.02,
    EventKind.OVERHEAD: 0.097,
    EventKind.GPU_OTHER1: 0.02,
    EventKind.GPU_OTHER2: 0.02,
}
# Measured totals the calibrated simulation is compared against.
MEASURED_ROWS = {
    "Target model": 4.39, "CPU Attention": 4.29, "GPU MoE": 3.53, "HtoD Transfer": 3.70,
    "Draft model": 0.56, "GPU Part": 0.42, "CPU Part": 0.54, "Others": 0.097, "Iteration": 5.05,
}
REF_K, REF_M = 5, 2


def reference_point():
    hw, model, workload, _ = load_config(CONFIG)
    b, policy, strategy = predecide(hw, model, workload)
    hyper = Hyperparameters(b, REF_M, REF_K, 0.2, policy, strategy)
    mem = plan_memory(hw, model, workload, hyper.b, policy)
    ctx = iteration_context(model, workload, hyper, mem)
    return hw, model, workload, hyper, ctx


def ground_truth():
    hw, model, workload, hyper, ctx = reference_point()
    return calibrate_latency_model(model, ctx, MEASURED_BUSY), (hw, model, workload, hyper, ctx)


def reference_samples(noise: float = 0.05, seed: int = 0):
    truth, (_, model, _, _, ctx) = ground_truth()
    return synthetic_profile(truth, drivers(model, ctx), noise=noise, seed=seed)


def main() -> int:
    _, (_, _, _, hyper, _) = ground_truth()
    save_profile_csv(DATA / "a30_microbench_profile.csv", reference_samples())
    cfg = {
        "hardware": "a30.json",
        "model": "mixtral8x7b.json",
        "workload": "workload_microbench.json",
        "hyperparameters": to_jsonable(hyper),
    }
    (DATA / "a30_mixtral_microbench_k5.json").write_text(json.dumps(cfg, indent=2) + "\n")
    return 0


if __name__ == "__main__":
    sys.exit(main())
