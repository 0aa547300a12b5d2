"""Pre-norm decoder stack whose token mixers are attention (T) or selective SSM (M) layers.

Every block is ``x + mixer(norm1(x))`` followed by ``x + mlp(norm2(x))``; the MLP
is kept in both kinds of block. Positions are learned absolute embeddings added
at the input, so the mixers themselves are position-free.
"""
from __future__ import annotations

import copy
import math
from dataclasses import asdict, dataclass, field
from typing import Union

import numpy as np

from .attention import AttentionLayerWeights, KVCache, attention_forward, attention_step, init_attention, linear_attention_direct
from .layout import LayerKind, LayerLayout
from .mamba import MambaLayerWeights, SSMState, init_mamba, mamba_forward_emulation, mamba_step, ssm_scan_recurrent
from .numerics import tensor as T
from .numerics.tensor import Tensor

Mixer = Union[AttentionLayerWeights, MambaLayerWeights]
MODES = ("normal", "linear")


@dataclass
class ModelConfig:
    vocab: int
    d: int = 64
    depth: int = 6
    h: int = 4
    h_kv: int = 2
    d_k: int = 16
    d_v: int = 16
    d_ff: int = 256
    max_len: int = 64
    mamba_gate: bool = False
    mamba_conv: int = 0
    delta_init: float = 0.05
    norm_eps: float = 1e-5

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class Block:
    kind: LayerKind
    mixer: Mixer
    norm1: Tensor
    norm2: Tensor
    W_up: Tensor
    W_down: Tensor

    def params(self) -> dict[str, Tensor]:
        prefix = "attn" if self.kind is LayerKind.T else "mamba"
        out = {"norm1": self.norm1}
        out.update({f"{prefix}.{k}": v for k, v in self.mixer.params().items()})
        out.update({"norm2": self.norm2, "mlp.W_up": self.W_up, "mlp.W_down": self.W_down})
        return out


@dataclass
class ForwardResult:
    logits: Tensor  # B, L, V
    hidden: Tensor  # B, L, d  (after the final norm)
    layer_io: list[tuple[np.ndarray, np.ndarray]] = field(default_factory=list)


def _normal(rng, rows, cols, std):
    return Tensor(rng.normal(0.0, std, (rows, cols)), requires_grad=True)


def _init_std(scheme: str, rows: int, cols: int) -> float:
    if scheme == "kaiming":
        return math.sqrt(2.0 / rows)
    if scheme == "xavier":
        return math.sqrt(2.0 / (rows + cols))
    raise ValueError(f"unknown init scheme {scheme!r}")


class HybridModel:
    def __init__(self, config: ModelConfig, tok_emb: Tensor, pos_emb: Tensor, blocks: list[Block], norm_f: Tensor, head: Tensor):
        self.config = config
        self.tok_emb = tok_emb
        self.pos_emb = pos_emb
        self.blocks = blocks
        self.norm_f = norm_f
        self.head = head
        if len(blocks) != config.depth:
            raise ValueError("block count does not match config.depth")

    # -- construction -----------------------------------------------------

    @classmethod
    def init(cls, config: ModelConfig, layout: LayerLayout | str | None = None, seed: int = 0, scheme: str = "xavier") -> "HybridModel":
        """Random initialisation. ``scheme`` is ``xavier`` or ``kaiming``."""
        c = config
        layout = LayerLayout.all_t(c.depth) if layout is None else LayerLayout.parse(str(layout))
        if len(layout) != c.depth:
            raise ValueError("layout length must equal depth")
        rng = np.random.default_rng(seed)
        out_scale = 1.0 / math.sqrt(2 * c.depth)
        blocks = []
        for kind in layout:
            if kind is LayerKind.T:
                mixer = init_attention(rng, c.d, c.h, c.h_kv, c.d_k, c.d_v, out_std_scale=out_scale)
                if scheme == "kaiming":
                    for t in mixer.params().values():
                        t.data *= np.float32(math.sqrt(2.0))
            else:
                mixer = init_mamba(rng, c.d, c.h, c.h_kv, c.d_v, c.d_k, scheme=scheme, delta_init=c.delta_init,
                                   gate=c.mamba_gate, conv_kernel=c.mamba_conv, out_std_scale=out_scale)
            blocks.append(Block(
                kind=kind,
                mixer=mixer,
                norm1=Tensor(np.ones(c.d), requires_grad=True),
                norm2=Tensor(np.ones(c.d), requires_grad=True),
                W_up=_normal(rng, c.d, c.d_ff, _init_std(scheme, c.d, c.d_ff)),
                W_down=_normal(rng, c.d_ff, c.d, _init_std(scheme, c.d_ff, c.d) * out_scale),
            ))
        return cls(
            c,
            tok_emb=_normal(rng, c.vocab, c.d, 0.5),
            pos_emb=_normal(rng, c.max_len, c.d, 0.1),
            blocks=blocks,
            norm_f=Tensor(np.ones(c.d), requires_grad=True),
            head=_normal(rng, c.d, c.vocab, _init_std(scheme, c.d, c.vocab)),
        )

    def clone(self) -> "HybridModel":
        return copy.deepcopy(self)

    @property
    def layout(self) -> LayerLayout:
        return LayerLayout(tuple(b.kind for b in self.blocks))

    def named_params(self) -> dict[str, Tensor]:
        out = {"tok_emb": self.tok_emb, "pos_emb": self.pos_emb}
        for i, b in enumerate(self.blocks):
            out.update({f"layers.{i}.{k}": v for k, v in b.params().items()})
        out.update({"norm_f": self.norm_f, "head": self.head})
        return out

    def parameters(self) -> list[Tensor]:
        return list(self.named_params().values())

    def num_params(self) -> int:
        return sum(p.data.size for p in self.parameters())

    # -- evaluation -------------------------------------------------------

    def _mix(self, block: Block, a: Tensor, mode: str) -> Tensor:
        if block.kind is LayerKind.T:
            fn = attention_forward if mode == "normal" else linear_attention_direct
        else:
            fn = ssm_scan_recurrent if mode == "normal" else mamba_forward_emulation
        return fn(block.mixer, a)

    def _mlp(self, block: Block, x: Tensor) -> Tensor:
        b = T.rmsnorm(x, block.norm2, self.config.norm_eps)
        return T.matmul(T.gelu(T.matmul(b, block.W_up)), block.W_down)

    def embed(self, ids: np.ndarray, start: int = 0) -> Tensor:
        ids = np.atleast_2d(np.asarray(ids))
        length = ids.shape[1]
        if start + length > self.config.max_len:
            raise ValueError(f"sequence of {start + length} exceeds max_len {self.config.max_len}")
        pos = T.index(self.pos_emb, slice(start, start + length))
        return T.add(T.embed(self.tok_emb, ids), pos)

    def forward(self, ids, mode: str = "normal", capture: bool = False) -> ForwardResult:
        """Logits for every position of ``ids`` (B, L).

        ``mode="linear"`` swaps every mixer for its softmax-free form: linear
        attention for T layers and discretisation-free emulation for M layers.
        ``capture`` records each block's (input, output) activations.
        """
        if mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}")
        x = self.embed(ids)
        io = []
        for block in self.blocks:
            x_in = x
            x = T.add(x, self._mix(block, T.rmsnorm(x, block.norm1, self.config.norm_eps), mode))
            x = T.add(x, self._mlp(block, x))
            if capture:
                io.append((x_in.data, x.data))
        hidden = T.rmsnorm(x, self.norm_f, self.config.norm_eps)
        return ForwardResult(T.matmul(hidden, self.head), hidden, io)

    # -- incremental decoding ----------------------------------------------

    def init_states(self, batch: int = 1) -> list[KVCache | SSMState]:
        return [
            KVCache.empty(b.mixer, batch) if b.kind is LayerKind.T else SSMState.zeros(b.mixer, batch)
            for b in self.blocks
        ]

    def step(self, tokens, states: list, pos: int) -> Tensor:
        """Feed one token per sequence at position ``pos``; returns (B, V) logits."""
        tokens = np.atleast_1d(np.asarray(tokens))
        x = T.reshape(self.embed(tokens[:, None], start=pos), (len(tokens), self.config.d))
        for block, state in zip(self.blocks, states):
            a = T.rmsnorm(x, block.norm1, self.config.norm_eps)
            if block.kind is LayerKind.T:
                y, _ = attention_step(block.mixer, state, a)
            else:
                y, _ = mamba_step(block.mixer, state, a)
            x = T.add(x, y)
            x = T.add(x, self._mlp(block, x))
        return T.matmul(T.rmsnorm(x, self.norm_f, self.config.norm_eps), self.head)

    def state_bytes(self, states: list) -> tuple[int, int]:
        """(kv cache bytes, ssm state bytes) currently held by ``states``."""
        kv = sum(s.nbytes for s in states if isinstance(s, KVCache))
        ssm = sum(s.nbytes for s in states if isinstance(s, SSMState))
        return kv, ssm

    def generate(self, prompts: np.ndarray, max_new: int, stop: int | None = None,
                 top_k: int = 0, rng: np.random.Generator | None = None) -> np.ndarray:
        """Decode from equal-length prompts (B, P); greedy unless ``top_k`` > 0.

        Returns (B, max_new) tokens; positions after ``stop`` are left as ``stop``.
        """
        prompts = np.atleast_2d(np.asarray(prompts))
        b, plen = prompts.shape
        max_new = min(max_new, self.config.max_len - plen + 1)
        states = self.init_states(b)
        logits = None
        for p in range(plen):
            logits = self.step(prompts[:, p], states, p)
        out = np.full((b, max(max_new, 0)), 0 if stop is None else stop, dtype=np.int64)
        done = np.zeros(b, dtype=bool)
        for i in range(max_new):
            lg = logits.data.astype(np.float64)
            if top_k > 0:
                rng = rng or np.random.default_rng(0)
                k = min(top_k, lg.shape[-1])
                top = np.argsort(-lg, axis=-1)[:, :k]
                z = np.take_along_axis(lg, top, -1)
                pr = np.exp(z - z.max(-1, keepdims=True))
                pr /= pr.sum(-1, keepdims=True)
                nxt = np.array([top[r, rng.choice(k, p=pr[r])] for r in range(b)])
            else:
                nxt = lg.argmax(axis=-1)
            if stop is not None:
                nxt = np.where(done, stop, nxt)
                done |= nxt == stop
            out[:, i] = nxt
            if (stop is not None and done.all()) or i == max_new - 1:
                break
            logits = self.step(nxt, states, plen + i)
        return out
