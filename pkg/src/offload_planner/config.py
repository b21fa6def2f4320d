"""Domain types shared by every module, plus JSON config loading and validation.

All quantities are SI: capacities in bytes, bandwidths in bytes/s, compute in
FLOP/s (a fused multiply-add counts as two FLOPs).
"""

from __future__ import annotations

import json
import math
from dataclasses import MISSING, dataclass, field, fields
from enum import Enum
from pathlib import Path
from typing import Any, Optional, Sequence, Union


class ConfigError(ValueError):
    """Raised when a config file cannot be parsed or violates an invariant."""

    def __init__(self, message: str, violations: Sequence[str] = ()):
        super().__init__(message)
        self.violations = list(violations)


class AttentionPlacement(str, Enum):
    CPU = "CPU"
    GPU_TRANSFER = "GPU_TRANSFER"


class MoeBatching(str, Enum):
    LARGE_BATCH = "LARGE_BATCH"
    BATCH_ONE = "BATCH_ONE"


@dataclass(frozen=True)
class HardwareSpec:
    p_gpu: float
    b_gpu: float
    p_cpu: float
    b_cpu: float
    b_h2d: float
    gpu_mem: float
    cpu_mem: float
    # DRAM held back for OS/runtime when sizing the global batch.
    cpu_reserved_fraction: float = 0.02
    name: str = ""


@dataclass(frozen=True)
class DraftModelSpec:
    n_layers: int
    param_bytes: float
    kv_bytes_per_token: float
    ffn_ops_per_token: float


@dataclass(frozen=True)
class ModelSpec:
    h: int
    h_i: int
    n_expert: int
    n_activate: int
    n_layers: int
    g: int
    draft: DraftModelSpec
    # Total target-model weight footprint held in DRAM.
    weight_bytes: float
    bytes_per_elem: int = 2
    name: str = ""
    source: str = ""

    @property
    def e(self) -> int:
        """Parameters in one expert weight matrix (h * h_i)."""
        return self.h * self.h_i

    @property
    def expert_layer_bytes(self) -> float:
        """Bytes of all experts of a single MoE layer (three matrices each)."""
        return 3 * self.n_expert * self.e * self.bytes_per_elem


@dataclass(frozen=True)
class AcceptanceCurve:
    """Expected committed tokens per iteration, indexed by draft length k.

    ``expected_tokens[k]`` counts accepted drafts plus the bonus token from the
    target model, so entry 0 is always 1.
    """

    expected_tokens: tuple[float, ...]
    encoding: str = "expected_tokens"

    @property
    def k_max(self) -> int:
        return len(self.expected_tokens) - 1

    @classmethod
    def geometric(cls, p: float, k_max: int) -> "AcceptanceCurve":
        if not 0.0 <= p <= 1.0:
            raise ValueError(f"acceptance probability must lie in [0, 1], got {p}")
        if p == 1.0:
            values = tuple(float(k + 1) for k in range(k_max + 1))
        else:
            values = tuple((1.0 - p ** (k + 1)) / (1.0 - p) for k in range(k_max + 1))
        return cls(values, encoding=f"geometric:{p!r}")

    @classmethod
    def from_per_position(cls, probs: Sequence[float]) -> "AcceptanceCurve":
        """Build the curve from per-position conditional acceptance probabilities.

        Draft i is accepted only if drafts 1..i-1 were, so alpha(k) is one plus the
        sum of running products of the first k probabilities.
        """
        values = [1.0]
        run = 1.0
        for q in probs:
            if not 0.0 <= q <= 1.0:
                raise ValueError(f"per-position probability out of [0, 1]: {q}")
            run *= q
            values.append(values[-1] + run)
        return cls(tuple(values))

    def to_dict(self) -> dict:
        if self.encoding.startswith("geometric:"):
            return {
                "kind": "geometric",
                "p": float(self.encoding.split(":", 1)[1]),
                "k_max": self.k_max,
            }
        return {"kind": "table", "encoding": "expected_tokens", "values": list(self.expected_tokens)}


@dataclass(frozen=True)
class WorkloadSpec:
    mean_input_len: float
    std_input_len: float
    output_len: int
    acceptance: AcceptanceCurve
    name: str = ""

    @property
    def total_len(self) -> float:
        return self.mean_input_len + self.output_len

    @property
    def mean_prefix_len(self) -> float:
        """Prefix length averaged over the decode phase of one request."""
        return self.mean_input_len + self.output_len / 2


@dataclass(frozen=True)
class MemoryPolicy:
    draft_kv_gpu_priority: bool = True
    expert_cache_bytes: float = 5.25 * 2**30
    # Target-model activations resident in HBM.
    activation_bytes: float = 1.0 * 2**30


@dataclass(frozen=True)
class ExecStrategy:
    attention_placement: AttentionPlacement = AttentionPlacement.CPU
    moe_batching: MoeBatching = MoeBatching.LARGE_BATCH


@dataclass(frozen=True)
class Hyperparameters:
    b: int
    m: int = 1
    k: int = 0
    expert_cache_miss_rate: float = 0.2
    mem_policy: MemoryPolicy = field(default_factory=MemoryPolicy)
    exec_strategy: ExecStrategy = field(default_factory=ExecStrategy)

    def __post_init__(self):
        # m must divide b; round b down rather than reject.
        if self.m >= 1 and self.b >= self.m and self.b % self.m:
            object.__setattr__(self, "b", self.b - self.b % self.m)

    @property
    def micro_batch(self) -> int:
        return self.b // self.m



def validate(*specs: Any) -> list[str]:
    """Return the list of violated invariants; empty means everything holds."""
    out: list[str] = []
    for spec in specs:
        if spec is None:
            continue
        if isinstance(spec, (list, tuple)):
            out.extend(validate(*spec))
        elif isinstance(spec, HardwareSpec):
            out.extend(_validate_hardware(spec))
        elif isinstance(spec, ModelSpec):
            out.extend(_validate_model(spec))
        elif isinstance(spec, DraftModelSpec):
            out.extend(_validate_draft(spec))
        elif isinstance(spec, WorkloadSpec):
            out.extend(_validate_workload(spec))
        elif isinstance(spec, AcceptanceCurve):
            out.extend(_validate_curve(spec))
        elif isinstance(spec, Hyperparameters):
            out.extend(_validate_hyper(spec))
        else:
            raise TypeError(f"cannot validate {type(spec).__name__}")
    hw = next((s for s in specs if isinstance(s, HardwareSpec)), None)
    hp = next((s for s in specs if isinstance(s, Hyperparameters)), None)
    if hw is not None and hp is not None and hp.mem_policy.expert_cache_bytes > hw.gpu_mem:
        out.append("expert_cache_bytes ≤ gpu_mem")
    return out


def _positive(obj: Any, names: Sequence[str]) -> list[str]:
    bad = []
    for name in names:
        value = getattr(obj, name)
        if not (isinstance(value, (int, float)) and math.isfinite(value) and value > 0):
            bad.append(f"{name} > 0")
    return bad


def _validate_hardware(hw: HardwareSpec) -> list[str]:
    out = _positive(hw, ("p_gpu", "b_gpu", "p_cpu", "b_cpu", "b_h2d", "gpu_mem", "cpu_mem"))
    if not out and hw.b_h2d > hw.b_gpu:
        out.append("b_h2d ≤ b_gpu")
    if not 0.0 <= hw.cpu_reserved_fraction < 1.0:
        out.append("0 ≤ cpu_reserved_fraction < 1")
    return out


def _validate_draft(d: DraftModelSpec) -> list[str]:
    return _positive(d, ("n_layers", "param_bytes", "kv_bytes_per_token", "ffn_ops_per_token"))


def _validate_model(m: ModelSpec) -> list[str]:
    out = _positive(m, ("h", "h_i", "n_expert", "n_activate", "n_layers", "g", "bytes_per_elem", "weight_bytes"))
    if m.n_activate > m.n_expert:
        out.append("n_activate ≤ n_expert")
    if m.g >= 1 and m.h % m.g:
        out.append("h divisible by g")
    out.extend(_validate_draft(m.draft))
    return out


def _validate_curve(c: AcceptanceCurve) -> list[str]:
    out = []
    vals = c.expected_tokens
    if not vals or abs(vals[0] - 1.0) > 1e-12:
        out.append("α(0) = 1")
    if any(b < a - 1e-12 for a, b in zip(vals, vals[1:])):
        out.append("α nondecreasing in k")
    if any(v > k + 1 + 1e-12 for k, v in enumerate(vals)):
        out.append("α(k) ≤ k + 1")
    return out


def _validate_workload(w: WorkloadSpec) -> list[str]:
    out = []
    if not w.mean_input_len > 0:
        out.append("mean_input_len > 0")
    if w.output_len < 1:
        out.append("output_len ≥ 1")
    if w.std_input_len < 0:
        out.append("std_input_len ≥ 0")
    out.extend(_validate_curve(w.acceptance))
    return out


def _validate_hyper(p: Hyperparameters) -> list[str]:
    out = []
    if p.m < 1:
        out.append("m ≥ 1")
    if p.b < 1:
        out.append("b ≥ 1")
    if p.m >= 1 and p.b % p.m:
        out.append("m divides b")
    if p.k < 0:
        out.append("k ≥ 0")
    if not 0.0 < p.expert_cache_miss_rate <= 1.0:
        out.append("0 < r_miss ≤ 1")
    if p.mem_policy.expert_cache_bytes < 0:
        out.append("expert_cache_bytes ≥ 0")
    return out


# --- JSON (de)serialization -------------------------------------------------

def _build(cls, data: Any, section: str):
    if not isinstance(data, dict):
        raise ConfigError(f"{section}: expected an object, got {type(data).__name__}")
    known = {f.name for f in fields(cls)}
    unknown = sorted(set(data) - known)
    if unknown:
        raise ConfigError(f"{section}: unknown field(s) {', '.join(unknown)}")
    required = {
        f.name for f in fields(cls)
        if f.default is MISSING and f.default_factory is MISSING
    }
    missing = sorted(required - set(data))
    if missing:
        raise ConfigError(f"{section}: missing field(s) {', '.join(missing)}")
    return data


def curve_from_dict(data: Any) -> AcceptanceCurve:
    """Parse an acceptance-curve block.

    The block must declare its encoding: ``{"kind": "geometric", "p", "k_max"}``,
    ``{"kind": "table", "encoding": "expected_tokens", "values": [...]}`` or
    ``{"kind": "table", "encoding": "per_position", "values": [...]}``.
    """
    if not isinstance(data, dict) or "kind" not in data:
        raise ConfigError("workload.acceptance: expected an object with a 'kind'")
    kind = data["kind"]
    try:
        if kind == "geometric":
            _check_keys(data, {"kind", "p", "k_max"}, "workload.acceptance")
            return AcceptanceCurve.geometric(float(data["p"]), int(data["k_max"]))
        if kind == "table":
            _check_keys(data, {"kind", "encoding", "values"}, "workload.acceptance")
            values = [float(v) for v in data["values"]]
            if data["encoding"] == "expected_tokens":
                return AcceptanceCurve(tuple(values))
            if data["encoding"] == "per_position":
                return AcceptanceCurve.from_per_position(values)
            raise ConfigError(f"workload.acceptance: unknown encoding {data['encoding']!r}")
    except (TypeError, ValueError) as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError(f"workload.acceptance: {exc}") from exc
    raise ConfigError(f"workload.acceptance: unknown kind {kind!r}")


def _check_keys(data: dict, allowed: set, section: str) -> None:
    unknown = sorted(set(data) - allowed)
    if unknown:
        raise ConfigError(f"{section}: unknown field(s) {', '.join(unknown)}")
    missing = sorted(allowed - set(data))
    if missing:
        raise ConfigError(f"{section}: missing field(s) {', '.join(missing)}")


def hardware_from_dict(data: Any) -> HardwareSpec:
    return HardwareSpec(**_build(HardwareSpec, data, "hardware"))


def model_from_dict(data: Any) -> ModelSpec:
    d = dict(_build(ModelSpec, data, "model"))
    d["draft"] = DraftModelSpec(**_build(DraftModelSpec, d["draft"], "model.draft"))
    return ModelSpec(**d)


def workload_from_dict(data: Any) -> WorkloadSpec:
    d = dict(_build(WorkloadSpec, data, "workload"))
    d["acceptance"] = curve_from_dict(d["acceptance"])
    return WorkloadSpec(**d)


def hyper_from_dict(data: Any) -> Hyperparameters:
    d = dict(_build(Hyperparameters, data, "hyperparameters"))
    if "mem_policy" in d:
        d["mem_policy"] = MemoryPolicy(**_build(MemoryPolicy, d["mem_policy"], "hyperparameters.mem_policy"))
    if "exec_strategy" in d:
        es = dict(_build(ExecStrategy, d["exec_strategy"], "hyperparameters.exec_strategy"))
        try:
            if "attention_placement" in es:
                es["attention_placement"] = AttentionPlacement(es["attention_placement"])
            if "moe_batching" in es:
                es["moe_batching"] = MoeBatching(es["moe_batching"])
        except ValueError as exc:
            raise ConfigError(f"hyperparameters.exec_strategy: {exc}") from exc
        d["exec_strategy"] = ExecStrategy(**es)
    return Hyperparameters(**d)


def to_jsonable(obj: Any) -> Any:
    """Convert specs (and nested dataclasses/enums) into plain JSON values."""
    if isinstance(obj, AcceptanceCurve):
        return obj.to_dict()
    if isinstance(obj, Enum):
        return obj.value
    if hasattr(obj, "__dataclass_fields__"):
        return {f.name: to_jsonable(getattr(obj, f.name)) for f in fields(obj)}
    if isinstance(obj, dict):
        return {str(k): to_jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [to_jsonable(v) for v in obj]
    return obj


_SECTIONS = ("hardware", "model", "workload", "hyperparameters")
_PathLike = Union[str, Path]


def _resolve_section(value: Any, base: Path, section: str) -> Any:
    # A section may be inlined or given as a path to a JSON file holding it.
    if isinstance(value, str):
        path = (base / value) if not Path(value).is_absolute() else Path(value)
        try:
            return json.loads(path.read_text())
        except OSError as exc:
            raise ConfigError(f"{section}: cannot read {path}: {exc}") from exc
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{section}: malformed JSON in {path}: {exc}") from exc
    return value


def load_config(path: _PathLike):
    """Load ``(HardwareSpec, ModelSpec, WorkloadSpec, Hyperparameters | None)``.

    Raises ConfigError on malformed JSON, unknown/missing fields, or any
    violated invariant (the message names each one).
    """
    path = Path(path)
    try:
        raw = json.loads(path.read_text())
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"malformed config {path}: {exc}") from exc
    return config_from_dict(raw, base=path.parent)


def config_from_dict(raw: Any, base: Optional[Path] = None):
    if not isinstance(raw, dict):
        raise ConfigError("config root must be an object")
    unknown = sorted(set(raw) - set(_SECTIONS))
    if unknown:
        raise ConfigError(f"unknown section(s) {', '.join(unknown)}")
    for section in _SECTIONS[:3]:
        if section not in raw:
            raise ConfigError(f"missing section {section!r}")
    base = base or Path(".")
    try:
        hw = hardware_from_dict(_resolve_section(raw["hardware"], base, "hardware"))
        model = model_from_dict(_resolve_section(raw["model"], base, "model"))
        workload = workload_from_dict(_resolve_section(raw["workload"], base, "workload"))
        hyper = None
        if raw.get("hyperparameters") is not None:
            hyper = hyper_from_dict(_resolve_section(raw["hyperparameters"], base, "hyperparameters"))
    except TypeError as exc:
        raise ConfigError(str(exc)) from exc
    violations = validate(hw, model, workload, hyper)
    if violations:
        raise ConfigError("invalid config: " + "; ".join(violations), violations)
    return hw, model, workload, hyper


def config_to_dict(hw: HardwareSpec, model: ModelSpec, workload: WorkloadSpec,
                   hyper: Optional[Hyperparameters] = None) -> dict:
    out = {
        "hardware": to_jsonable(hw),
        "model": to_jsonable(model),
        "workload": to_jsonable(workload),
    }
    if hyper is not None:
        out["hyperparameters"] = to_jsonable(hyper)
    return out


def save_config(path: _PathLike, hw, model, workload, hyper=None) -> None:
    Path(path).write_text(json.dumps(config_to_dict(hw, model, workload, hyper), indent=2) + "\n")


__all__ = [
    "AcceptanceCurve", "AttentionPlacement", "ConfigError", "DraftModelSpec", "ExecStrategy",
    "HardwareSpec", "Hyperparameters", "MemoryPolicy", "ModelSpec", "MoeBatching", "WorkloadSpec",
    "config_from_dict", "config_to_dict", "curve_from_dict", "load_config", "save_config",
    "to_jsonable", "validate",
]
