# memory_plan.py
"""
Static memory allocation of an IRFunction into one arena.

Arena layout: constant weights first, then mutable weights, then the
activation region. Activations whose lifetimes do not overlap may share
bytes; every buffer starts on an ALIGNMENT boundary.
"""

from dataclasses import dataclass, field
from typing import Dict, List, Sequence, Tuple

from logger_config import setup_logger
from .low_ir import IRFunction, Mutability, live_intervals

logger = setup_logger().getChild("memory_plan")

ALIGNMENT = 64


def align_up(n: int, alignment: int = ALIGNMENT) -> int:
    return (n + alignment - 1) // alignment * alignment


@dataclass(frozen=True)
class BufferInterval:
    name: str
    size: int
    start: int
    end: int

    def overlaps(self, other: "BufferInterval") -> bool:
        return self.start <= other.end and other.start <= self.end


@dataclass
class MemoryPlan:
    arena_size: int
    offsets: Dict[str, int]
    sizes: Dict[str, int]
    constant_region: Tuple[int, int]
    mutable_region: Tuple[int, int]
    activation_region: Tuple[int, int]
    strategy: str = "linear-scan"
    intervals: Dict[str, Tuple[int, int]] = field(default_factory=dict)

    @property
    def activation_size(self) -> int:
        return self.activation_region[1] - self.activation_region[0]

    def activation_offset(self, name: str) -> int:
        return self.offsets[name] - self.activation_region[0]

    def to_dict(self) -> dict:
        return {
            "arena_size": self.arena_size,
            "offsets": dict(sorted(self.offsets.items())),
            "sizes": dict(sorted(self.sizes.items())),
            "constant_region": list(self.constant_region),
            "mutable_region": list(self.mutable_region),
            "activation_region": list(self.activation_region),
            "strategy": self.strategy,
            "intervals": {k: list(v) for k, v in sorted(self.intervals.items())},
        }

    @classmethod
    def from_dict(cls, data: dict) -> "MemoryPlan":
        return cls(
            arena_size=int(data["arena_size"]),
            offsets={k: int(v) for k, v in data["offsets"].items()},
            sizes={k: int(v) for k, v in data["sizes"].items()},
            constant_region=tuple(data["constant_region"]),
            mutable_region=tuple(data["mutable_region"]),
            activation_region=tuple(data["activation_region"]),
            strategy=data.get("strategy", "linear-scan"),
            intervals={k: tuple(v) for k, v in data.get("intervals", {}).items()},
        )


def _first_fit(buffer: BufferInterval, placed: List[Tuple[BufferInterval, int]]) -> int:
    """Lowest aligned offset not colliding with a time-overlapping placed buffer."""
    busy = sorted((off, off + align_up(b.size)) for b, off in placed if b.overlaps(buffer))
    offset = 0
    need = align_up(buffer.size)
    for lo, hi in busy:
        if offset + need <= lo:
            break
        offset = max(offset, hi)
    return offset


def _place(buffers: Sequence[BufferInterval]) -> Tuple[Dict[str, int], int]:
    placed: List[Tuple[BufferInterval, int]] = []
    offsets: Dict[str, int] = {}
    size = 0
    for b in buffers:
        off = _first_fit(b, placed)
        placed.append((b, off))
        offsets[b.name] = off
        size = max(size, off + align_up(b.size))
    return offsets, size


def plan_buffers(buffers: Sequence[BufferInterval]) -> Tuple[Dict[str, int], int, str]:
    """
    Offsets relative to the region start, the region size and the strategy
    that won. Linear scan visits buffers by start time; the second pass visits
    them largest first. Both are deterministic and the smaller region wins,
    linear scan on ties.
    """
    by_start = sorted(buffers, key=lambda b: (b.start, -b.size, b.name))
    by_size = sorted(buffers, key=lambda b: (-align_up(b.size), b.start, b.name))
    scan_offsets, scan_size = _place(by_start)
    size_offsets, size_size = _place(by_size)
    if size_size < scan_size:
        return size_offsets, size_size, "size-ordered"
    return scan_offsets, scan_size, "linear-scan"


def check_plan(buffers: Sequence[BufferInterval], offsets: Dict[str, int]) -> List[str]:
    """Pairs of buffers that are alive together and share bytes."""
    problems = []
    items = list(buffers)
    for i, a in enumerate(items):
        for b in items[i + 1:]:
            if not a.overlaps(b):
                continue
            a0, b0 = offsets[a.name], offsets[b.name]
            if a0 < b0 + b.size and b0 < a0 + a.size:
                problems.append(f"'{a.name}' and '{b.name}' are live together at overlapping offsets")
    return problems


def allocate(ir: IRFunction) -> MemoryPlan:
    offsets: Dict[str, int] = {}
    sizes: Dict[str, int] = {}
    cursor = 0
    for mutability in (Mutability.CONSTANT, Mutability.MUTABLE):
        start = cursor
        for w in ir.weights.values():
            if w.mutability is mutability:
                offsets[w.name] = cursor
                sizes[w.name] = w.ty.size_in_bytes
                cursor += align_up(w.ty.size_in_bytes)
        if mutability is Mutability.CONSTANT:
            constant_region = (start, cursor)
        else:
            mutable_region = (start, cursor)

    intervals = live_intervals(ir)
    buffers = [BufferInterval(name, ir.activations[name].ty.size_in_bytes, s, e)
               for name, (s, e) in intervals.items()]
    rel, region, strategy = plan_buffers(buffers)
    base = cursor
    for b in buffers:
        offsets[b.name] = base + rel[b.name]
        sizes[b.name] = b.size
    plan = MemoryPlan(
        arena_size=base + region,
        offsets=offsets,
        sizes=sizes,
        constant_region=constant_region,
        mutable_region=mutable_region,
        activation_region=(base, base + region),
        strategy=strategy,
        intervals=dict(intervals),
    )
    naive = sum(align_up(b.size) for b in buffers)
    logger.info(f"Allocated '{ir.name}': arena {plan.arena_size} bytes, activations {region} bytes "
                f"({strategy}; {naive} without sharing)")
    return plan
