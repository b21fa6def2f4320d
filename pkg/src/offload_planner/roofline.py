"""Per-layer operator costs, bottleneck classification and roofline export.

Costs are per model layer per decode iteration.  Operation counts are FLOPs
(two per multiply-accumulate); ``CostVector.macs()`` gives the MAC view that
matches the usual cost-table notation.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass
from enum import Enum
from fractions import Fraction
from pathlib import Path
from typing import IO, Iterable, Optional, Sequence, Union

from .config import HardwareSpec, ModelSpec

FLOPS_PER_MAC = 2


class Resource(str, Enum):
    # Declaration order is the tie-break order used by classify().
    GPU_COMPUTE = "GPU_COMPUTE"
    GPU_MEM = "GPU_MEM"
    H2D = "H2D"
    CPU_COMPUTE = "CPU_COMPUTE"
    CPU_MEM = "CPU_MEM"


RESOURCE_ORDER = tuple(Resource)


@dataclass(frozen=True)
class CostVector:
    gpu_ops: float = 0.0
    gpu_mem_bytes: float = 0.0
    h2d_bytes: float = 0.0
    cpu_ops: float = 0.0
    cpu_mem_bytes: float = 0.0

    def __post_init__(self):
        for name in ("gpu_ops", "gpu_mem_bytes", "h2d_bytes", "cpu_ops", "cpu_mem_bytes"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be nonnegative")

    def demand(self, resource: Resource) -> float:
        return {
            Resource.GPU_COMPUTE: self.gpu_ops,
            Resource.GPU_MEM: self.gpu_mem_bytes,
            Resource.H2D: self.h2d_bytes,
            Resource.CPU_COMPUTE: self.cpu_ops,
            Resource.CPU_MEM: self.cpu_mem_bytes,
        }[resource]

    def macs(self) -> "CostVector":
        """Same cost with operation counts in multiply-accumulates."""
        return CostVector(
            self.gpu_ops / FLOPS_PER_MAC, self.gpu_mem_bytes, self.h2d_bytes,
            self.cpu_ops / FLOPS_PER_MAC, self.cpu_mem_bytes,
        )

    def scaled(self, factor: float) -> "CostVector":
        return CostVector(
            self.gpu_ops * factor, self.gpu_mem_bytes * factor, self.h2d_bytes * factor,
            self.cpu_ops * factor, self.cpu_mem_bytes * factor,
        )


def rate(hw: HardwareSpec, resource: Resource) -> float:
    return {
        Resource.GPU_COMPUTE: hw.p_gpu,
        Resource.GPU_MEM: hw.b_gpu,
        Resource.H2D: hw.b_h2d,
        Resource.CPU_COMPUTE: hw.p_cpu,
        Resource.CPU_MEM: hw.b_cpu,
    }[resource]


def resource_times(cost: CostVector, hw: HardwareSpec) -> dict[Resource, float]:
    return {r: cost.demand(r) / rate(hw, r) for r in RESOURCE_ORDER}


def binding_time(cost: CostVector, hw: HardwareSpec) -> float:
    """Roofline execution time: the slowest of the five resources."""
    return max(resource_times(cost, hw).values())


# --- operator costs ---------------------------------------------------------

def moe_cost_large_batch(model: ModelSpec, b: float) -> CostVector:
    """MoE layer when the batch is big enough that every expert is touched."""
    if b < 1:
        raise ValueError(f"batch size must be >= 1, got {b}")
    weights = 3 * model.n_expert * model.e * model.bytes_per_elem
    return CostVector(
        gpu_ops=FLOPS_PER_MAC * 3 * model.e * model.n_activate * b,
        gpu_mem_bytes=weights,
        h2d_bytes=weights,
    )


def moe_cost_batch1(model: ModelSpec, r_miss: float) -> CostVector:
    """MoE layer for a single token; only missed activated experts cross the link."""
    if not 0.0 < r_miss <= 1.0:
        raise ValueError(f"r_miss must lie in (0, 1], got {r_miss}")
    weights = 3 * model.n_activate * model.e * model.bytes_per_elem
    return CostVector(
        gpu_ops=FLOPS_PER_MAC * 3 * model.e * model.n_activate,
        gpu_mem_bytes=weights,
        h2d_bytes=weights * r_miss,
    )


def attention_cost_cpu(model: ModelSpec, b: float, s: float, k: int = 1) -> CostVector:
    """Chunked attention on the CPU for ``k`` query tokens per request.

    Keys span the ``s`` prefix tokens plus the ``k`` new ones.  The KV cache is
    streamed once per call no matter how many queries share it.
    """
    if s < 1 or k < 1:
        raise ValueError("attention needs s >= 1 and k >= 1")
    keys = s + k
    return CostVector(
        cpu_ops=FLOPS_PER_MAC * 2 * b * keys * model.h * k,
        cpu_mem_bytes=2 * b * keys * (model.h / model.g) * model.bytes_per_elem,
    )


def attention_cost_gpu_transfer(model: ModelSpec, b: float, s: float) -> CostVector:
    """Decode attention on the GPU after shipping the KV cache over the link."""
    if s < 1:
        raise ValueError("attention needs s >= 1")
    kv = 2 * b * s * (model.h / model.g) * model.bytes_per_elem
    return CostVector(gpu_ops=FLOPS_PER_MAC * 2 * b * s * model.h, gpu_mem_bytes=kv, h2d_bytes=kv)


# --- classification ---------------------------------------------------------

@dataclass(frozen=True)
class RooflinePoint:
    label: str
    intensity: float
    achieved: float
    bound: Resource
    utilization: float


_MEMORY = (Resource.GPU_MEM, Resource.H2D, Resource.CPU_MEM)


def classify(cost: CostVector, hw: HardwareSpec, label: str = "") -> RooflinePoint:
    times = resource_times(cost, hw)
    if all(t == 0 for t in times.values()):
        raise ValueError("cannot classify an all-zero cost")
    # max() keeps the first maximal element, which enforces the fixed tie order.
    bound = max(RESOURCE_ORDER, key=lambda r: times[r])
    t = times[bound]

    if cost.gpu_ops > 0 or (cost.cpu_ops == 0 and bound in (Resource.GPU_MEM, Resource.H2D)):
        ops, peak = cost.gpu_ops, hw.p_gpu
    else:
        ops, peak = cost.cpu_ops, hw.p_cpu
    achieved = ops / t

    mem = bound if bound in _MEMORY else max(_MEMORY, key=lambda r: times[r])
    nbytes = cost.demand(mem)
    intensity = ops / nbytes if nbytes > 0 else math.inf
    return RooflinePoint(label, intensity, achieved, bound, achieved / peak)


def crossover_batch(model: ModelSpec, r_miss: float) -> int:
    """Smallest batch at which large-batch MoE moves no more bytes per token."""
    if not 0.0 < r_miss <= 1.0:
        raise ValueError(f"r_miss must lie in (0, 1], got {r_miss}")
    # Exact rational arithmetic so e.g. 8 / (2 * 0.2) is 20, not 21.
    r = Fraction(r_miss).limit_denominator(10**9)
    return math.ceil(Fraction(model.n_expert) / (model.n_activate * r))


def prefer_large_batch(model: ModelSpec, b: int, r_miss: float) -> bool:
    return b >= crossover_batch(model, r_miss)


def prefer_cpu_attention(hw: HardwareSpec) -> bool:
    """Streaming KV from DRAM beats shipping it when DRAM is the faster path."""
    return hw.b_cpu > hw.b_h2d


# --- export -----------------------------------------------------------------

CSV_COLUMNS = ("label", "intensity_flops_per_byte", "achieved_flops", "bound", "utilization")


def roof_rows(hw: HardwareSpec) -> list[dict]:
    """One row per roof.

    Bandwidth roofs report the ridge point where they meet the compute roof of
    the device doing the work (GPU for HBM and the link, CPU for DRAM); compute
    roofs report the ridge against their own memory.
    """
    pairs = [
        (Resource.GPU_COMPUTE, hw.p_gpu, hw.p_gpu / hw.b_gpu),
        (Resource.GPU_MEM, hw.p_gpu, hw.p_gpu / hw.b_gpu),
        (Resource.H2D, hw.p_gpu, hw.p_gpu / hw.b_h2d),
        (Resource.CPU_COMPUTE, hw.p_cpu, hw.p_cpu / hw.b_cpu),
        (Resource.CPU_MEM, hw.p_cpu, hw.p_cpu / hw.b_cpu),
    ]
    return [
        {
            "label": f"roof:{res.value}",
            "intensity_flops_per_byte": ridge,
            "achieved_flops": peak,
            "bound": res.value,
            "utilization": 1.0,
        }
        for res, peak, ridge in pairs
    ]


def point_row(p: RooflinePoint) -> dict:
    return {
        "label": p.label,
        "intensity_flops_per_byte": p.intensity,
        "achieved_flops": p.achieved,
        "bound": p.bound.value,
        "utilization": p.utilization,
    }


def emit_roofline(points: Sequence[RooflinePoint], hw: Optional[HardwareSpec],
                  out: Union[str, Path, IO[str], None] = None) -> str:
    """Write the roofline CSV and return its text.

    With no points only the header is written; roof rows are included when
    ``hw`` is given.
    """
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=CSV_COLUMNS, lineterminator="\n")
    writer.writeheader()
    if points:
        for p in points:
            writer.writerow(point_row(p))
        if hw is not None:
            writer.writerows(roof_rows(hw))
    text = buf.getvalue()
    if isinstance(out, (str, Path)):
        Path(out).write_text(text)
    elif out is not None:
        out.write(text)
    return text


def operator_points(hw: HardwareSpec, model: ModelSpec, b: int, s: float,
                    r_miss: float, k: int = 1) -> list[RooflinePoint]:
    """Classify the four operator implementations at one operating point."""
    rows: Iterable[tuple[str, CostVector]] = (
        ("MoE(large batch)", moe_cost_large_batch(model, b)),
        ("MoE(batch=1)", moe_cost_batch1(model, r_miss)),
        ("attention(in CPU)", attention_cost_cpu(model, b, s, k)),
        ("attention(to GPU)", attention_cost_gpu_transfer(model, b, s)),
    )
    return [classify(cost, hw, label) for label, cost in rows]
