"""Agreed reference schedules and the fixed-value provider."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping

from ..grid import Network


class ScheduleError(ValueError):
    pass


@dataclass(frozen=True)
class ReferenceSchedule:
    """Agreed net active power per prosumer (MW, generation positive)."""

    p_mw: Mapping
    q_mvar: Mapping = field(default_factory=dict)
    valid_from: int = 0

    def __getitem__(self, i) -> float:
        try:
            return self.p_mw[i]
        except KeyError:
            raise ScheduleError(f"schedule has no reference for prosumer {i}") from None

    def __contains__(self, i) -> bool:
        return i in self.p_mw

    @property
    def ids(self) -> list:
        return sorted(self.p_mw)

    def total(self) -> float:
        return sum(self.p_mw[i] for i in self.ids)

    def merged(self, values: Mapping, valid_from: int | None = None) -> "ReferenceSchedule":
        """Copy with ``values`` overriding existing entries."""
        p = dict(self.p_mw)
        p.update({i: float(v) for i, v in values.items()})
        return ReferenceSchedule(p, dict(self.q_mvar), self.valid_from if valid_from is None else valid_from)


def fixed_reference(values: Mapping, net: Network | None = None, valid_from: int = 0) -> ReferenceSchedule:
    """Schedule holding exactly ``values``; every prosumer of ``net`` must be covered."""
    if net is not None:
        missing = [i for i in net.ids if i not in values]
        if missing:
            raise ScheduleError(f"fixed reference missing prosumers {missing}")
    return ReferenceSchedule({i: float(v) for i, v in values.items()}, {}, valid_from)
