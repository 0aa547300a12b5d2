"""Held-out metrics: teacher-forced CE/accuracy and greedy-decode token error rate."""
from __future__ import annotations

from collections import defaultdict
from dataclasses import dataclass, field

import numpy as np

from .model import HybridModel
from .numerics import cross_entropy
from .tasks import Dataset, Tokenizer, edit_distance, make_batch


@dataclass
class EvalResult:
    ce: float
    accuracy: float
    token_error_rate: float
    per_length: dict[int, float] = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "ce": self.ce,
            "accuracy": self.accuracy,
            "token_error_rate": self.token_error_rate,
            "per_length": {str(k): v for k, v in sorted(self.per_length.items())},
        }


def teacher_forced(model: HybridModel, samples: Dataset, tok: Tokenizer, batch_size: int = 128) -> tuple[float, float]:
    """Mean target-span cross-entropy and argmax accuracy."""
    ce_sum = acc_sum = n = 0.0
    for i in range(0, len(samples), batch_size):
        batch = make_batch(samples[i : i + batch_size], tok.PAD)
        logits = model.forward(batch.inputs).logits
        count = batch.loss_mask.sum()
        ce_sum += float(cross_entropy(logits, batch.labels, batch.loss_mask).data) * count
        pred = logits.data.argmax(-1)
        acc_sum += float(((pred == batch.labels) * batch.loss_mask).sum())
        n += count
    return ce_sum / n, acc_sum / n


def greedy_outputs(model: HybridModel, samples: Dataset, tok: Tokenizer, extra: int = 2) -> list[list[int]]:
    """Greedy continuation of each prompt up to EOS (exclusive).

    Prompts of equal length are decoded together through the incremental path.
    """
    groups: dict[int, list[int]] = defaultdict(list)
    for i, s in enumerate(samples):
        groups[len(s.prompt)].append(i)
    out: list[list[int]] = [[] for _ in samples]
    for plen, idx in sorted(groups.items()):
        prompts = np.stack([samples[i].prompt for i in idx])
        max_new = max(len(samples[i].target) for i in idx) + extra
        gen = model.generate(prompts, max_new, stop=tok.EOS)
        for row, i in zip(gen, idx):
            seq = []
            for t in row:
                if t == tok.EOS:
                    break
                seq.append(int(t))
            out[i] = seq
    return out


def evaluate(model: HybridModel, samples: Dataset, tok: Tokenizer, decode: bool = True) -> EvalResult:
    """CE, accuracy and token error rate, with the error rate bucketed by answer length.

    Answers are compared without their EOS. Without ``decode`` (or for text
    windows, which have no EOS) the error rate uses teacher-forced argmax tokens.
    """
    ce, acc = teacher_forced(model, samples, tok)
    has_eos = all(len(s.target) and s.target[-1] == tok.EOS for s in samples)
    edits: dict[int, int] = defaultdict(int)
    refs: dict[int, int] = defaultdict(int)
    if decode and has_eos:
        hyps = greedy_outputs(model, samples, tok)
        for s, hyp in zip(samples, hyps):
            ref = list(s.target[:-1])
            edits[len(ref)] += edit_distance(hyp, ref)
            refs[len(ref)] += len(ref)
    else:
        for i in range(0, len(samples), 128):
            chunk = samples[i : i + 128]
            batch = make_batch(chunk, tok.PAD)
            pred = model.forward(batch.inputs).logits.data.argmax(-1)
            for row, s in enumerate(chunk):
                sel = batch.loss_mask[row] > 0
                ref = batch.labels[row][sel]
                hyp = pred[row][sel]
                if has_eos:
                    ref, hyp = ref[:-1], hyp[:-1]
                edits[len(ref)] += edit_distance(hyp, ref)
                refs[len(ref)] += len(ref)
    total_ref = sum(refs.values())
    ter = sum(edits.values()) / total_ref if total_ref else 0.0
    per_length = {k: edits[k] / refs[k] for k in refs if refs[k]}
    return EvalResult(ce, acc, ter, per_length)
