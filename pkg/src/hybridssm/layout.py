"""Layer layouts: which depth positions keep attention (T) and which run an SSM (M)."""
from __future__ import annotations

from dataclasses import dataclass
from enum import Enum


class LayerKind(str, Enum):
    T = "T"
    M = "M"


STRATEGIES = ("blockbeg", "blockend", "front", "middle", "back", "sandwich", "importance")
BLOCK_STRATEGIES = ("blockbeg", "blockend")


@dataclass(frozen=True)
class LayerLayout:
    kinds: tuple[LayerKind, ...]

    @classmethod
    def parse(cls, text: str) -> "LayerLayout":
        text = text.strip().upper()
        if not text or set(text) - {"T", "M"}:
            raise ValueError(f"layout must be a non-empty string over T/M, got {text!r}")
        return cls(tuple(LayerKind(c) for c in text))

    @classmethod
    def all_t(cls, depth: int) -> "LayerLayout":
        return cls((LayerKind.T,) * depth)

    def __str__(self) -> str:
        return "".join(k.value for k in self.kinds)

    def __len__(self) -> int:
        return len(self.kinds)

    def __iter__(self):
        return iter(self.kinds)

    def __getitem__(self, i: int) -> LayerKind:
        return self.kinds[i]

    @property
    def n_T(self) -> int:
        return sum(k is LayerKind.T for k in self.kinds)

    @property
    def n_M(self) -> int:
        return len(self.kinds) - self.n_T

    def m_indices(self) -> list[int]:
        return [i for i, k in enumerate(self.kinds) if k is LayerKind.M]


def parse_ratio(text: str) -> tuple[int, int]:
    """``"1:3"`` -> (1, 3)."""
    try:
        t, m = (int(p) for p in text.split(":"))
    except ValueError:
        raise ValueError(f"ratio must look like 'T:M', got {text!r}") from None
    if t < 0 or m < 0 or t + m == 0:
        raise ValueError(f"invalid ratio {text!r}")
    return t, m


def m_count(depth: int, ratio_t: int, ratio_m: int) -> int:
    total = ratio_t + ratio_m
    if (depth * ratio_m) % total:
        raise ValueError(f"depth {depth} cannot hold ratio {ratio_t}:{ratio_m} exactly")
    return depth * ratio_m // total


def _from_m_positions(depth: int, m_positions) -> LayerLayout:
    ms = set(m_positions)
    return LayerLayout(tuple(LayerKind.M if i in ms else LayerKind.T for i in range(depth)))


def build_layout(strategy: str, depth: int, ratio_t: int, ratio_m: int) -> LayerLayout:
    """Layout for one of the fixed placement strategies.

    ``ratio_t:ratio_m`` fixes the M count as ``depth * ratio_m / (ratio_t + ratio_m)``.
    Interleaved strategies tile a block of ``ratio_t`` T and ``ratio_m`` M layers and
    need ``depth`` divisible by the block size. Middle centres the M run (ties go
    left); Sandwich splits it between both ends (odd remainder goes to the front).
    """
    strategy = strategy.lower()
    if strategy == "importance":
        raise ValueError("importance layouts need a ranking; use build_layout_importance")
    if strategy not in STRATEGIES:
        raise ValueError(f"unknown strategy {strategy!r}")
    if ratio_t < 1 and strategy in BLOCK_STRATEGIES:
        raise ValueError("interleaved strategies need at least one T per block")
    if depth < 1:
        raise ValueError("depth must be positive")
    block = ratio_t + ratio_m
    if strategy in BLOCK_STRATEGIES:
        if depth % block:
            raise ValueError(f"depth {depth} not divisible by block size {block}")
        unit = "T" * ratio_t + "M" * ratio_m if strategy == "blockbeg" else "M" * ratio_m + "T" * ratio_t
        return LayerLayout.parse(unit * (depth // block))
    n_m = m_count(depth, ratio_t, ratio_m)
    if n_m > depth:
        raise ValueError("more M layers than depth")
    if strategy == "front":
        return _from_m_positions(depth, range(n_m))
    if strategy == "back":
        return _from_m_positions(depth, range(depth - n_m, depth))
    if strategy == "middle":
        start = (depth - n_m) // 2
        return _from_m_positions(depth, range(start, start + n_m))
    front = (n_m + 1) // 2
    back = n_m - front
    return _from_m_positions(depth, list(range(front)) + list(range(depth - back, depth)))
