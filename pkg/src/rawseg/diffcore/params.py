"""Named parameter storage with group tags and freeze flags."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Iterator

import torch

GROUPS = ("optics", "sensor", "network")


@dataclass
class Param:
    value: torch.Tensor
    group: str
    trainable: bool = True
    frozen: bool = False

    @property
    def updatable(self) -> bool:
        return self.trainable and not self.frozen


class ParamSet:
    """Ordered mapping of parameter name -> :class:`Param`.

    Insertion order is preserved and is the order used for checkpoints.
    """

    def __init__(self) -> None:
        self._params: dict[str, Param] = {}

    def add(self, name: str, value: torch.Tensor, group: str, trainable: bool = True) -> None:
        if name in self._params:
            raise KeyError(f"duplicate parameter name {name!r}")
        if group not in GROUPS:
            raise ValueError(f"unknown group tag {group!r} for {name!r}")
        self._params[name] = Param(value.detach().clone(), group, trainable)

    def __getitem__(self, name: str) -> Param:
        return self._params[name]

    def __contains__(self, name: object) -> bool:
        return name in self._params

    def __iter__(self) -> Iterator[str]:
        return iter(self._params)

    def __len__(self) -> int:
        return len(self._params)

    def items(self):
        return self._params.items()

    def values(self) -> dict[str, torch.Tensor]:
        """Plain name -> tensor view, as consumed by stage forwards."""
        return {k: p.value for k, p in self._params.items()}

    def names(self, group: str | None = None) -> list[str]:
        return [k for k, p in self._params.items() if group is None or p.group == group]

    def set_frozen(self, group: str, frozen: bool) -> None:
        for p in self._params.values():
            if p.group == group:
                p.frozen = frozen

    def set_trainable(self, group: str, trainable: bool) -> None:
        for p in self._params.values():
            if p.group == group:
                p.trainable = trainable

    def num_elements(self, group: str | None = None) -> int:
        return sum(p.value.numel() for p in self._params.values() if group is None or p.group == group)

    def to(self, dtype: torch.dtype) -> "ParamSet":
        out = ParamSet()
        for k, p in self._params.items():
            out._params[k] = Param(p.value.to(dtype), p.group, p.trainable, p.frozen)
        return out

    def clone(self) -> "ParamSet":
        out = ParamSet()
        for k, p in self._params.items():
            out._params[k] = Param(p.value.clone(), p.group, p.trainable, p.frozen)
        return out

    def subset(self, names: Iterable[str]) -> dict[str, torch.Tensor]:
        return {k: self._params[k].value for k in names}
