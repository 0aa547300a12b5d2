"""Analytic FLOP and cache-memory accounting for arbitrary T/M layouts.

Counting convention (one multiply-accumulate = 2 FLOPs):

* every dense projection ``x @ W`` with ``W`` of shape (m, n) costs ``2mn`` per token;
* a T layer attending over ``L`` cached positions adds ``2·h·d_k·L`` for scores and
  ``2·h·d_v·L`` for the weighted sum, plus ``SOFTMAX·h·L`` for the softmax;
* an M layer's recurrence (discretise, state update, read-out) costs ``6·h·d_v·N``;
* the MLP costs ``4·d·d_ff`` (``6·d·d_ff`` when gated);
* the output head costs ``2·d·vocab`` for each position whose logits are wanted;
* with ``elementwise`` on, norms cost ``NORM·d``, residual adds ``d`` and every
  activation element ``ACT``.

Prefill runs the whole context through the stack at once with a dense causal
score matrix (``L²`` entries per head, as the batched forward computes them) and
applies the head to the last position only.
"""
from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field, replace

from .layout import LayerKind, LayerLayout, build_layout

NORM = 3
ACT = 1
SOFTMAX = 3

CSV_HEADER = (
    "arch_name",
    "L",
    "decode_flops",
    "prefill_flops",
    "kv_bytes",
    "ssm_bytes",
    "total_cache_bytes",
    "cache_reduction_pct",
    "flops_reduction_pct",
)


@dataclass(frozen=True)
class ArchSpec:
    d: int
    depth: int
    layout: LayerLayout
    h: int
    h_kv: int
    d_k: int
    d_v: int
    N: int
    d_ff: int
    vocab: int
    bytes_per_elem: int = 2
    gated_mlp: bool = False
    mamba_gate: bool = False
    conv_kernel: int = 0
    elementwise: bool = True

    def __post_init__(self) -> None:
        if isinstance(self.layout, str):
            object.__setattr__(self, "layout", LayerLayout.parse(self.layout))
        if len(self.layout) != self.depth:
            raise ValueError(f"layout length {len(self.layout)} != depth {self.depth}")
        for name in ("d", "depth", "h", "h_kv", "d_k", "d_v", "N", "d_ff", "vocab", "bytes_per_elem"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if self.h % self.h_kv:
            raise ValueError("h must be a multiple of h_kv")
        if self.conv_kernel < 0:
            raise ValueError("conv_kernel must be non-negative")

    @property
    def d_inner(self) -> int:
        """Width of the SSM state rows (one per head channel)."""
        return self.h * self.d_v

    def with_layout(self, layout: LayerLayout | str) -> "ArchSpec":
        return replace(self, layout=LayerLayout.parse(str(layout)), depth=len(str(layout)))

    @classmethod
    def from_model(cls, model, bytes_per_elem: int = 4) -> "ArchSpec":
        c = model.config
        return cls(
            d=c.d, depth=c.depth, layout=model.layout, h=c.h, h_kv=c.h_kv, d_k=c.d_k, d_v=c.d_v,
            N=c.d_k, d_ff=c.d_ff, vocab=c.vocab, bytes_per_elem=bytes_per_elem,
            mamba_gate=c.mamba_gate, conv_kernel=c.mamba_conv,
        )


def qwen05b_like(layout: LayerLayout | str | None = None, bytes_per_elem: int = 2) -> ArchSpec:
    """Dimensions of a 0.5B-parameter GQA decoder (24 layers, width 896, gated MLP)."""
    layout = LayerLayout.all_t(24) if layout is None else LayerLayout.parse(str(layout))
    return ArchSpec(
        d=896, depth=24, layout=layout, h=14, h_kv=2, d_k=64, d_v=64, N=64,
        d_ff=4864, vocab=151936, bytes_per_elem=bytes_per_elem, gated_mlp=True,
    )


# -- per-layer pieces ---------------------------------------------------------


def _mlp(a: ArchSpec) -> int:
    mats = 3 if a.gated_mlp else 2
    f = 2 * mats * a.d * a.d_ff
    if a.elementwise:
        f += ACT * a.d_ff * (2 if a.gated_mlp else 1)
    return f


def _block_common(a: ArchSpec) -> int:
    """Norms, residual adds and MLP of one block, per token."""
    f = _mlp(a)
    if a.elementwise:
        f += 2 * NORM * a.d + 2 * a.d
    return f


def _t_projections(a: ArchSpec) -> int:
    return 2 * a.d * (a.h * a.d_k + a.h_kv * a.d_k + a.h_kv * a.d_v) + 2 * a.h * a.d_v * a.d


def _t_context_coeff(a: ArchSpec) -> int:
    """Per-token FLOPs per attended position."""
    f = 2 * a.h * a.d_k + 2 * a.h * a.d_v
    if a.elementwise:
        f += SOFTMAX * a.h
    return f


def _m_layer(a: ArchSpec) -> int:
    hv = a.h * a.d_v
    f = 2 * a.d * (a.h_kv * a.d_v + a.h_kv * a.N + a.h * a.N + a.h) + 2 * hv * a.d
    f += 6 * hv * a.N
    if a.mamba_gate:
        f += 2 * a.d * hv
    if a.conv_kernel:
        f += 2 * a.conv_kernel * a.h_kv * a.d_v
    if a.elementwise:
        f += ACT * a.h + (ACT * hv if a.mamba_gate else 0)
    return f


def _head(a: ArchSpec) -> int:
    return 2 * a.d * a.vocab + (NORM * a.d if a.elementwise else 0)


# -- public accounting ---------------------------------------------------------


def flops_decode(arch: ArchSpec, L: int) -> int:
    """FLOPs to produce one token's logits with ``L`` positions in context (itself included)."""
    if L < 1:
        raise ValueError("L must be at least 1")
    total = _head(arch)
    for kind in arch.layout:
        total += _block_common(arch)
        if kind is LayerKind.T:
            total += _t_projections(arch) + _t_context_coeff(arch) * L
        else:
            total += _m_layer(arch)
    return total


def flops_prefill(arch: ArchSpec, L: int, head: str = "last") -> int:
    """FLOPs of one forward pass over ``L`` tokens.

    ``head="last"`` applies the output head once (the next-token logits);
    ``head="all"`` applies it at every position, as a training forward does.
    """
    if L < 1:
        raise ValueError("L must be at least 1")
    if head not in ("last", "all"):
        raise ValueError("head must be 'last' or 'all'")
    total = _head(arch) * (L if head == "all" else 1)
    for kind in arch.layout:
        total += _block_common(arch) * L
        if kind is LayerKind.T:
            total += _t_projections(arch) * L + _t_context_coeff(arch) * L * L
        else:
            total += _m_layer(arch) * L
    return total


def cache_bytes(arch: ArchSpec, L: int) -> tuple[int, int, int]:
    """(kv_bytes, ssm_bytes, total) held while decoding with ``L`` cached positions."""
    if L < 0:
        raise ValueError("L must be non-negative")
    b = arch.bytes_per_elem
    kv = arch.layout.n_T * L * arch.h_kv * (arch.d_k + arch.d_v) * b
    per_m = arch.h * arch.d_v * arch.N
    if arch.conv_kernel > 1:
        per_m += arch.h_kv * arch.d_v * (arch.conv_kernel - 1)
    ssm = arch.layout.n_M * per_m * b
    return kv, ssm, kv + ssm


# -- reports ---------------------------------------------------------------------


@dataclass
class ProfileRow:
    arch_name: str
    L: int
    decode_flops: int
    prefill_flops: int
    kv_bytes: int
    ssm_bytes: int
    total_cache_bytes: int
    cache_reduction_pct: float
    flops_reduction_pct: float


@dataclass
class ProfileReport:
    rows: list[ProfileRow] = field(default_factory=list)
    baseline: str = ""

    def for_arch(self, name: str) -> list[ProfileRow]:
        return [r for r in self.rows if r.arch_name == name]

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(CSV_HEADER)
        for r in self.rows:
            w.writerow([
                r.arch_name, r.L, r.decode_flops, r.prefill_flops, r.kv_bytes, r.ssm_bytes,
                r.total_cache_bytes, repr(r.cache_reduction_pct), repr(r.flops_reduction_pct),
            ])
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text: str) -> "ProfileReport":
        reader = csv.reader(io.StringIO(text))
        header = next(reader, None)
        if header is None or tuple(header) != CSV_HEADER:
            raise ValueError("unexpected profile CSV header")
        rows = []
        for rec in reader:
            if not rec:
                continue
            name, *nums = rec
            ints = [int(x) for x in nums[:6]]
            rows.append(ProfileRow(name, *ints, float(nums[6]), float(nums[7])))
        return cls(rows)


def _pct(value: float, base: float) -> float:
    return 0.0 if base == 0 else 100.0 * (1.0 - value / base)


def sweep(archs: dict[str, ArchSpec], L_grid, baseline: str) -> ProfileReport:
    """One row per (arch, L); reductions are relative to ``archs[baseline]`` at the same L.

    ``flops_reduction_pct`` compares prefill FLOPs. Rows are sorted by arch name, then L.
    """
    if not archs or not list(L_grid):
        raise ValueError("need at least one architecture and one context length")
    if baseline not in archs:
        raise ValueError(f"unknown baseline {baseline!r}; have {sorted(archs)}")
    grid = sorted(set(int(x) for x in L_grid))
    if grid[0] < 1:
        raise ValueError("context lengths must be at least 1")
    base = archs[baseline]
    rows = []
    for name in sorted(archs):
        a = archs[name]
        for L in grid:
            kv, ssm, tot = cache_bytes(a, L)
            pre = flops_prefill(a, L)
            rows.append(ProfileRow(
                name, L, flops_decode(a, L), pre, kv, ssm, tot,
                _pct(tot, cache_bytes(base, L)[2]), _pct(pre, flops_prefill(base, L)),
            ))
    return ProfileReport(rows, baseline)


def ratio_archs(template: ArchSpec, ratios, strategy: str = "blockbeg") -> dict[str, ArchSpec]:
    """``{"1:k": spec}`` for each ``(t, m)`` ratio; ``m == 0`` gives the all-T spec."""
    out = {}
    for t, m in ratios:
        layout = LayerLayout.all_t(template.depth) if m == 0 else build_layout(strategy, template.depth, t, m)
        out[f"{t}:{m}"] = replace(template, layout=layout)
    return out


def parse_arch(text: str) -> ArchSpec:
    """Arch file: ``key = value`` lines naming :class:`ArchSpec` fields; ``#`` starts a comment.

    ``preset = qwen05b`` starts from the 0.5B-like dimensions.
    """
    values: dict[str, str] = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"line {lineno}: expected 'key = value'")
        k, v = (p.strip() for p in line.split("=", 1))
        values[k] = v
    base = {}
    preset = values.pop("preset", None)
    if preset is not None:
        if preset != "qwen05b":
            raise ValueError(f"unknown preset {preset!r}")
        p = qwen05b_like()
        base = {f: getattr(p, f) for f in p.__dataclass_fields__}
        base["layout"] = str(p.layout)
    known = set(ArchSpec.__dataclass_fields__)
    for k, v in values.items():
        if k not in known:
            raise ValueError(f"unknown arch key {k!r}")
        if k == "layout":
            base[k] = v
        elif k in ("gated_mlp", "mamba_gate", "elementwise"):
            base[k] = v.lower() in ("1", "true", "yes", "on")
        else:
            base[k] = int(v)
    if "layout" not in base and "depth" in base:
        base["layout"] = "T" * base["depth"]
    if "layout" in base and "depth" not in base:
        base["depth"] = len(base["layout"])
    try:
        return ArchSpec(**base)
    except TypeError as e:
        raise ValueError(f"incomplete arch spec: {e}") from None
