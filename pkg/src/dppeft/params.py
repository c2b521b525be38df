"""Named parameter storage with a per-parameter trainable mask."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Any, Iterator

import numpy as np

KINDS = ("weight", "bias", "norm_scale", "norm_bias", "peft")


@dataclass
class Param:
    value: np.ndarray
    kind: str
    trainable: bool = True

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown parameter kind {self.kind!r}")


class ParamStore:
    """Ordered map ``name -> Param`` plus the model and PEFT configs it belongs to.

    Stores are treated as values: updates go through :meth:`with_values` or
    :meth:`with_mask`, which return new stores sharing untouched arrays.
    """

    def __init__(self, config: Any, entries: dict[str, Param] | None = None, peft: Any = None):
        self.config = config
        self.peft = peft
        self._entries: dict[str, Param] = {}
        for name, p in (entries or {}).items():
            self.add(name, p)

    def add(self, name: str, param: Param) -> None:
        if name in self._entries:
            raise KeyError(f"duplicate parameter name {name!r}")
        self._entries[name] = param

    def __getitem__(self, name: str) -> Param:
        return self._entries[name]

    def __contains__(self, name: str) -> bool:
        return name in self._entries

    def __iter__(self) -> Iterator[str]:
        return iter(self._entries)

    def __len__(self) -> int:
        return len(self._entries)

    def items(self):
        return self._entries.items()

    def names(self) -> list[str]:
        return list(self._entries)

    def value(self, name: str) -> np.ndarray:
        return self._entries[name].value

    def trainable_names(self) -> list[str]:
        return [n for n, p in self._entries.items() if p.trainable]

    def copy(self) -> ParamStore:
        entries = {n: Param(p.value.copy(), p.kind, p.trainable) for n, p in self._entries.items()}
        return ParamStore(self.config, entries, self.peft)

    def with_values(self, updates: dict[str, np.ndarray]) -> ParamStore:
        entries = {}
        for n, p in self._entries.items():
            entries[n] = Param(updates[n], p.kind, p.trainable) if n in updates else p
        return ParamStore(self.config, entries, self.peft)

    def with_mask(self, trainable: set[str], peft: Any = None) -> ParamStore:
        unknown = trainable - set(self._entries)
        if unknown:
            raise KeyError(f"unknown parameters in mask: {sorted(unknown)}")
        entries = {n: Param(p.value, p.kind, n in trainable) for n, p in self._entries.items()}
        return ParamStore(self.config, entries, self.peft if peft is None else peft)

    def equals(self, other: ParamStore) -> bool:
        """Bit-exact equality of names, kinds, masks and values."""
        if self.names() != other.names():
            return False
        for n, p in self._entries.items():
            q = other[n]
            if p.kind != q.kind or p.trainable != q.trainable:
                return False
            if p.value.dtype != q.value.dtype or not np.array_equal(p.value, q.value):
                return False
        return True
