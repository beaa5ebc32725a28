"""Multiply-accumulate instrumentation for the sparse-vs-dense benchmark.

Counting convention: one output site costs kernel_area * (Cin/groups) * Cout
MACs regardless of how many neighbors were actually present, so a sparse
layer's count is exactly (active sites / total sites) times the dense count.
"""

from __future__ import annotations

from dataclasses import dataclass, field


@dataclass
class MacRecord:
    label: str
    op: str
    macs: int
    out_sites: int = 0


@dataclass
class MacCounter:
    records: list[MacRecord] = field(default_factory=list)
    _label: str = ""

    @property
    def total(self) -> int:
        return sum(r.macs for r in self.records)

    def set_label(self, label: str) -> None:
        self._label = label

    def by_label(self) -> dict[str, int]:
        out: dict[str, int] = {}
        for r in self.records:
            out[r.label] = out.get(r.label, 0) + r.macs
        return out


_active: MacCounter | None = None


class count_macs:
    """Context manager activating a MacCounter; yields it."""

    def __enter__(self) -> MacCounter:
        global _active
        self.counter = MacCounter()
        _active = self.counter
        return self.counter

    def __exit__(self, *exc):
        global _active
        _active = None
        return False


def record(op: str, macs: int, out_sites: int = 0, spec=None) -> None:
    if _active is not None:
        _active.records.append(MacRecord(_active._label, op, int(macs), int(out_sites)))


def set_label(label: str) -> None:
    if _active is not None:
        _active.set_label(label)
