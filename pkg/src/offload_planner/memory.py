"""Memory footprints and capacity-driven decisions.

Target KV always lives in DRAM.  HBM is filled in a fixed order: draft
parameters, target activations, the expert cache, and only then draft KV.
Draft KV that does not fit spills to DRAM, split along the batch dimension.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

from .config import HardwareSpec, MemoryPolicy, ModelSpec, WorkloadSpec


class CapacityError(ValueError):
    pass


@dataclass(frozen=True)
class MemoryPlan:
    b_max: int
    target_kv_cpu_bytes: float
    draft_kv_total_bytes: float
    draft_kv_gpu_bytes: float
    draft_kv_cpu_bytes: float
    expert_cache_bytes: float
    draft_param_bytes: float
    activation_bytes: float
    gpu_split_requests: int
    # Inputs kept so the split can be recomputed between iterations.
    draft_kv_gpu_budget: float = 0.0
    b: int = 0

    @property
    def cpu_split_requests(self) -> int:
        return self.b - self.gpu_split_requests

    def gpu_used(self) -> float:
        return self.expert_cache_bytes + self.draft_param_bytes + self.activation_bytes + self.draft_kv_gpu_bytes


def kv_bytes_per_request(model: ModelSpec, total_len: float) -> float:
    """Target-model K and V bytes for one request of ``total_len`` tokens."""
    if total_len < 1:
        raise ValueError(f"total_len must be >= 1, got {total_len}")
    return 2 * model.n_layers * total_len * (model.h / model.g) * model.bytes_per_elem


def reserved_bytes(hw: HardwareSpec) -> float:
    return hw.cpu_mem * hw.cpu_reserved_fraction


def max_global_batch(hw: HardwareSpec, model: ModelSpec, workload: WorkloadSpec) -> int:
    """Largest batch whose end-of-generation KV cache fits in DRAM."""
    free = hw.cpu_mem - model.weight_bytes - reserved_bytes(hw)
    if free <= 0:
        raise CapacityError(
            f"DRAM ({hw.cpu_mem / 1e9:.1f} GB) minus reservation cannot hold the "
            f"target weights ({model.weight_bytes / 1e9:.1f} GB)"
        )
    per_request = kv_bytes_per_request(model, workload.total_len)
    b = math.floor(free / per_request)
    if b < 1:
        raise CapacityError(
            f"no room for a single request: {free / 1e9:.2f} GB free, "
            f"{per_request / 1e9:.3f} GB KV per request"
        )
    return b


def draft_kv_gpu_budget(hw: HardwareSpec, model: ModelSpec, policy: MemoryPolicy) -> float:
    """HBM left for draft KV after the fixed residents."""
    fixed = model.draft.param_bytes + policy.activation_bytes + policy.expert_cache_bytes
    if fixed > hw.gpu_mem:
        raise CapacityError(
            f"fixed HBM residents ({fixed / 1e9:.2f} GB) exceed gpu_mem ({hw.gpu_mem / 1e9:.2f} GB)"
        )
    return hw.gpu_mem - fixed if policy.draft_kv_gpu_priority else 0.0


def split_requests(budget: float, per_request: float, active_requests: int) -> int:
    """Requests whose whole draft KV fits in ``budget``."""
    if per_request <= 0:
        return active_requests
    return min(active_requests, math.floor(budget / per_request))


def plan_memory(hw: HardwareSpec, model: ModelSpec, workload: WorkloadSpec, b: int,
                policy: MemoryPolicy = MemoryPolicy()) -> MemoryPlan:
    b_max = max_global_batch(hw, model, workload)
    if not 1 <= b <= b_max:
        raise CapacityError(f"batch {b} outside [1, b_max={b_max}]")
    budget = draft_kv_gpu_budget(hw, model, policy)

    per_req_draft = model.draft.kv_bytes_per_token * workload.total_len
    gpu_reqs = split_requests(budget, per_req_draft, b)
    draft_total = b * per_req_draft
    draft_gpu = gpu_reqs * per_req_draft
    draft_cpu = draft_total - draft_gpu
    target_kv = b * kv_bytes_per_request(model, workload.total_len)

    cpu_used = model.weight_bytes + target_kv + draft_cpu
    if cpu_used > hw.cpu_mem:
        raise CapacityError(
            f"DRAM overflow at b={b}: weights + target KV + spilled draft KV = "
            f"{cpu_used / 1e9:.2f} GB > {hw.cpu_mem / 1e9:.2f} GB"
        )
    return MemoryPlan(
        b_max=b_max,
        target_kv_cpu_bytes=target_kv,
        draft_kv_total_bytes=draft_total,
        draft_kv_gpu_bytes=draft_gpu,
        draft_kv_cpu_bytes=draft_cpu,
        expert_cache_bytes=policy.expert_cache_bytes,
        draft_param_bytes=model.draft.param_bytes,
        activation_bytes=policy.activation_bytes,
        gpu_split_requests=gpu_reqs,
        draft_kv_gpu_budget=budget,
        b=b,
    )


def dynamic_split_ratio(plan: MemoryPlan, model: ModelSpec, current_len: float,
                        active_requests: int) -> int:
    """Re-split the batch for the draft KV size at ``current_len`` tokens.

    Longer prefixes push requests to the CPU part; finished requests free HBM
    so that waiting ones can move back.
    """
    per_request = model.draft.kv_bytes_per_token * current_len
    return split_requests(plan.draft_kv_gpu_budget, per_request, active_requests)
