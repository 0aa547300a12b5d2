"""Desk-scale experiment protocols shared by the acceptance suite and ad-hoc runs.

Each protocol takes an already trained teacher so one teacher can serve
several comparisons.
"""
from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .distill import DistillConfig, LossReport, distill, train_teacher
from .evaluation import EvalResult, evaluate
from .hybrid import assemble_hybrid, reinit_mixers
from .layout import LayerLayout
from .model import HybridModel, ModelConfig
from .tasks import Dataset, TaskSpec, Tokenizer, generate


@dataclass
class Setup:
    """A task with its train/held-out split and the toy model dimensions."""

    spec: TaskSpec
    train: Dataset
    held_out: Dataset
    tok: Tokenizer
    model: ModelConfig


def make_setup(spec: TaskSpec, held_out: int = 512, **model_kw) -> Setup:
    tok = spec.tokenizer()
    held = generate(replace(spec, n_samples=held_out, seed=spec.seed + 7919))
    dims = dict(d=64, depth=6, h=4, h_kv=2, d_k=16, d_v=16, d_ff=256, max_len=32)
    dims.update(model_kw)
    return Setup(spec, generate(spec), held, tok, ModelConfig(vocab=tok.vocab_size, **dims))


def copy_setup(**model_kw) -> Setup:
    return make_setup(TaskSpec(kind="copy", n_samples=20000, seed=1, n_symbols=16, min_len=4, max_len=10), **model_kw)


def kv_recall_setup(**model_kw) -> Setup:
    spec = TaskSpec(kind="kv_recall", n_samples=20000, seed=1, n_pairs=8, n_keys=8, n_values=8)
    return make_setup(spec, **model_kw)


def teacher_for(setup: Setup, cfg: DistillConfig) -> tuple[HybridModel, LossReport]:
    return train_teacher(setup.model, cfg, setup.train, setup.held_out, setup.tok)


def windowed_loss(report: LossReport, step: int, window: int = 50) -> float:
    """Mean logged total loss over the ``window`` steps before ``step`` (needs ``log_every=1``)."""
    vals = [r["total"] for r in report.rows if step - window <= r["step"] < step]
    if len(vals) < window:
        raise ValueError(f"only {len(vals)} logged steps before step {step}")
    return float(np.mean(vals))


def distill_student(teacher: HybridModel, student: HybridModel, setup: Setup,
                    cfg: DistillConfig) -> tuple[HybridModel, LossReport, EvalResult]:
    trained, report = distill(teacher, student, cfg, setup.train, setup.held_out, setup.tok)
    return trained, report, evaluate(trained, setup.held_out, setup.tok)


def init_comparison(teacher: HybridModel, layout: LayerLayout | str, setup: Setup, cfg: DistillConfig,
                    seed: int, checkpoints=(500, 1000, 2000), window: int = 50,
                    baseline: str = "model") -> dict[str, list[float]]:
    """Windowed training loss at each checkpoint for a transferred vs a Kaiming-initialised student.

    ``baseline="model"`` initialises the whole random student from scratch;
    ``"mixers"`` only redraws its M-layer mixers and keeps every other weight
    from the teacher. Both students share the seed (data order) and schedule.
    """
    cfg = replace(cfg, seed=seed, steps=max(checkpoints), log_every=1, eval_every=0, eval_samples=0)
    transferred = assemble_hybrid(teacher, layout)
    if baseline == "model":
        random = HybridModel.init(teacher.config, transferred.layout, seed=seed, scheme="kaiming")
    elif baseline == "mixers":
        random = reinit_mixers(transferred, seed=seed)
    else:
        raise ValueError("baseline must be 'model' or 'mixers'")
    out = {}
    for name, student in (("transferred", transferred), ("random", random)):
        _, report = distill(teacher, student, cfg, setup.train, setup.held_out, setup.tok)
        out[name] = [windowed_loss(report, c, window) for c in checkpoints]
    return out


def recall_comparison(teacher: HybridModel, setup: Setup, cfg: DistillConfig, seed: int,
                      layouts: dict[str, str]) -> dict[str, EvalResult]:
    """Distil one transferred student per layout from the same teacher under identical settings."""
    cfg = replace(cfg, seed=seed)
    return {name: distill_student(teacher, assemble_hybrid(teacher, lay), setup, cfg)[2]
            for name, lay in layouts.items()}
