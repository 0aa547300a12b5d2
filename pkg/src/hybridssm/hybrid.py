"""Attention-to-SSM weight transfer, hybrid assembly and layer-importance scoring."""
from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .attention import AttentionLayerWeights
from .evaluation import evaluate
from .layout import LayerKind, LayerLayout
from .mamba import MambaLayerWeights, add_block_extras, delta_bias_for, s4d_real_A
from .model import HybridModel
from .numerics.tensor import Tensor
from .tasks import Dataset, Tokenizer


def transfer_attention_to_mamba(
    src: AttentionLayerWeights,
    delta_init: float = 0.05,
    gate: bool = False,
    conv_kernel: int = 0,
) -> MambaLayerWeights:
    """Initialise an SSM layer from a donor attention layer.

    Query, key and value projections become the C, B and x projections
    verbatim; the output projection is reused and the state size equals the
    donor head size. The ``1/sqrt(d_k)`` attention scale becomes the output
    scale. Decay, step size and skip get fresh values: ``A`` per channel from
    ``-1, -2, ...``, a zero-weight step projection whose bias gives
    ``softplus = delta_init``, and ``D = 0``.
    """

    def cp(t: Tensor) -> Tensor:
        return Tensor(t.data.copy(), requires_grad=True)

    d = src.d
    w = MambaLayerWeights(
        W_x=cp(src.W_V),
        W_B=cp(src.W_K),
        W_C=cp(src.W_Q),
        W_delta=Tensor(np.zeros((d, src.h)), requires_grad=True),
        b_delta=Tensor(np.full(src.h, delta_bias_for(delta_init)), requires_grad=True),
        A_log=Tensor(np.log(-s4d_real_A(src.h, src.d_v, src.d_k)), requires_grad=True),
        D=Tensor(np.zeros(src.h * src.d_v), requires_grad=True),
        W_O=cp(src.W_O),
        h=src.h,
        h_kv=src.h_kv,
        d_v=src.d_v,
        N=src.d_k,
        out_scale=1.0 / math.sqrt(src.d_k),
    )
    add_block_extras(w, gate=gate, conv_kernel=conv_kernel)
    return w


def assemble_hybrid(teacher: HybridModel, layout: LayerLayout | str, delta_init: float | None = None) -> HybridModel:
    """Copy ``teacher`` and convert the layers marked M in ``layout``.

    Embeddings, norms, MLPs and retained attention layers are copied verbatim.
    """
    layout = LayerLayout.parse(str(layout))
    if len(layout) != teacher.config.depth:
        raise ValueError(f"layout length {len(layout)} != teacher depth {teacher.config.depth}")
    if any(b.kind is not LayerKind.T for b in teacher.blocks):
        raise ValueError("teacher must be attention-only")
    cfg = teacher.config
    student = teacher.clone()
    for block, kind in zip(student.blocks, layout):
        if kind is LayerKind.M:
            block.mixer = transfer_attention_to_mamba(
                block.mixer,
                delta_init=cfg.delta_init if delta_init is None else delta_init,
                gate=cfg.mamba_gate,
                conv_kernel=cfg.mamba_conv,
            )
            block.kind = LayerKind.M
    return student


def reinit_mixers(model: HybridModel, seed: int, scheme: str = "kaiming") -> HybridModel:
    """Copy of ``model`` whose M-layer mixers are replaced by random ones."""
    fresh = HybridModel.init(model.config, model.layout, seed=seed, scheme=scheme)
    out = model.clone()
    for dst, src in zip(out.blocks, fresh.blocks):
        if dst.kind is LayerKind.M:
            dst.mixer = src.mixer
    return out


# ---------------------------------------------------------------------------
# importance


@dataclass
class ImportanceReport:
    scores: list[float]
    criterion: str  # "cosine" | "error"
    ranking: list[int]  # most replaceable first

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["layer", "score", "rank"])
        rank_of = {layer: r for r, layer in enumerate(self.ranking)}
        for i, s in enumerate(self.scores):
            w.writerow([i, repr(float(s)), rank_of[i]])
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text: str, criterion: str = "unknown") -> "ImportanceReport":
        rows = list(csv.DictReader(io.StringIO(text)))
        if not rows or set(rows[0]) != {"layer", "score", "rank"}:
            raise ValueError("importance CSV needs columns layer,score,rank")
        rows.sort(key=lambda r: int(r["layer"]))
        if [int(r["layer"]) for r in rows] != list(range(len(rows))):
            raise ValueError("importance CSV must list layers 0..n-1")
        scores = [float(r["score"]) for r in rows]
        ranking = [int(r["layer"]) for r in sorted(rows, key=lambda r: int(r["rank"]))]
        if sorted(int(r["rank"]) for r in rows) != list(range(len(rows))):
            raise ValueError("ranks must be a permutation of 0..n-1")
        return cls(scores, criterion, ranking)

    @classmethod
    def load(cls, path: str | Path) -> "ImportanceReport":
        return cls.from_csv(Path(path).read_text())


def _rank(keys: list[float]) -> list[int]:
    return sorted(range(len(keys)), key=lambda i: (keys[i], i))


def cosine_scores(layer_io: list[tuple[np.ndarray, np.ndarray]], valid: np.ndarray | None = None) -> list[float]:
    """Mean over positions of cos(layer input, layer output), in 64-bit."""
    scores = []
    for x_in, x_out in layer_io:
        a = np.asarray(x_in, np.float64)
        b = np.asarray(x_out, np.float64)
        cos = (a * b).sum(-1) / np.maximum(np.linalg.norm(a, axis=-1) * np.linalg.norm(b, axis=-1), 1e-30)
        w = np.ones(cos.shape) if valid is None else np.asarray(valid, np.float64)
        scores.append(float((cos * w).sum() / w.sum()))
    return scores


def importance_from_cosine(scores: list[float]) -> ImportanceReport:
    """Highest similarity (least change) is the most replaceable."""
    return ImportanceReport(list(scores), "cosine", _rank([1.0 - s for s in scores]))


def score_layers_cosine(teacher: HybridModel, probe_ids: np.ndarray, valid: np.ndarray | None = None) -> ImportanceReport:
    probe_ids = np.atleast_2d(np.asarray(probe_ids))
    if probe_ids.size == 0:
        raise ValueError("probe set is empty")
    io_pairs = teacher.forward(probe_ids, capture=True).layer_io
    return importance_from_cosine(cosine_scores(io_pairs, valid))


def score_layers_error(teacher: HybridModel, eval_samples: Dataset, tok: Tokenizer) -> ImportanceReport:
    """Error-rate increase when only layer ``i`` is converted (no training)."""
    if not eval_samples:
        raise ValueError("evaluation set is empty")
    base = evaluate(teacher, eval_samples, tok).token_error_rate
    depth = teacher.config.depth
    scores = []
    for i in range(depth):
        layout = "".join("M" if j == i else "T" for j in range(depth))
        ter = evaluate(assemble_hybrid(teacher, layout), eval_samples, tok).token_error_rate
        scores.append(ter - base)
    return ImportanceReport(scores, "error", _rank(scores))


def build_layout_importance(report: ImportanceReport, n_M: int) -> LayerLayout:
    """Convert the ``n_M`` most replaceable layers."""
    depth = len(report.ranking)
    if not 0 <= n_M <= depth:
        raise ValueError(f"n_M={n_M} outside 0..{depth}")
    ms = set(report.ranking[:n_M])
    return LayerLayout(tuple(LayerKind.M if i in ms else LayerKind.T for i in range(depth)))
