"""Teacher training and multi-level distillation (CE + skew KL on logits + hidden-state MSE)."""
from __future__ import annotations

import csv
import io
import logging
from dataclasses import dataclass, field, replace

import numpy as np

from .evaluation import evaluate
from .hybrid import assemble_hybrid
from .layout import LayerKind, LayerLayout
from .model import ForwardResult, HybridModel, ModelConfig
from .numerics import AdamState, NonFiniteError, Tape, adam_step, clip_global_norm, cross_entropy, mse, skew_kl_logits
from .numerics import tensor as T
from .tasks import Batch, Dataset, Tokenizer, make_batch

log = logging.getLogger(__name__)

CSV_COLUMNS = ("step", "total", "ce", "logits", "emb", "eval_ce", "eval_ter")


@dataclass
class DistillConfig:
    lr: float = 1e-3
    steps: int = 2000
    batch_tokens: int = 768
    alpha_skew: float = 0.1
    lambda_ce: float = 1.0
    lambda_logits: float = 1.0
    lambda_emb: float = 1.0
    seed: int = 0
    log_every: int = 50
    eval_every: int = 0  # 0 = only at the end
    eval_samples: int = 256
    clip_norm: float = 1.0
    warmup: int = 100
    freeze_attention: bool = False
    compute_dtype: str = "float32"

    def __post_init__(self) -> None:
        if self.lr <= 0:
            raise ValueError("lr must be positive")
        if min(self.lambda_ce, self.lambda_logits, self.lambda_emb) < 0:
            raise ValueError("loss weights must be non-negative")
        if max(self.lambda_ce, self.lambda_logits, self.lambda_emb) <= 0:
            raise ValueError("at least one loss weight must be positive")
        if not 0.0 <= self.alpha_skew <= 1.0:
            raise ValueError("alpha_skew must lie in [0, 1]")


@dataclass
class LossReport:
    rows: list[dict] = field(default_factory=list)

    def log(self, **row) -> None:
        self.rows.append({k: row.get(k, float("nan")) for k in CSV_COLUMNS})

    def column(self, name: str) -> list[float]:
        return [r[name] for r in self.rows]

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(CSV_COLUMNS)
        for r in self.rows:
            w.writerow([int(r["step"])] + [repr(float(r[k])) for k in CSV_COLUMNS[1:]])
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text: str) -> "LossReport":
        rep = cls()
        for r in csv.DictReader(io.StringIO(text)):
            rep.rows.append({k: int(r[k]) if k == "step" else float(r[k]) for k in CSV_COLUMNS})
        return rep


class BatchSampler:
    """Deterministic epoch-shuffled batches sized by a token budget."""

    def __init__(self, samples: Dataset, batch_tokens: int, pad: int, seed: int):
        if not samples:
            raise ValueError("training set is empty")
        self.samples = samples
        self.pad = pad
        longest = max(len(s.prompt) + len(s.target) - 1 for s in samples)
        self.batch_size = max(1, min(len(samples), batch_tokens // longest))
        self.rng = np.random.default_rng(seed)
        self.order = self.rng.permutation(len(samples))
        self.pos = 0

    def next(self) -> Batch:
        if self.pos + self.batch_size > len(self.order):
            self.order = self.rng.permutation(len(self.samples))
            self.pos = 0
        idx = self.order[self.pos : self.pos + self.batch_size]
        self.pos += self.batch_size
        return make_batch([self.samples[i] for i in idx], self.pad)


def _lr_at(cfg: DistillConfig, step: int) -> float:
    if cfg.warmup and step < cfg.warmup:
        return cfg.lr * (step + 1) / cfg.warmup
    return cfg.lr


def _check(value: float, step: int, what: str) -> None:
    if not np.isfinite(value):
        raise NonFiniteError(f"{what} became non-finite at step {step}")


def train_teacher(
    model_config: ModelConfig,
    cfg: DistillConfig,
    train: Dataset,
    held_out: Dataset,
    tok: Tokenizer,
    init_seed: int | None = None,
) -> tuple[HybridModel, LossReport]:
    """Next-token CE training of an attention-only model on the target spans."""
    model = HybridModel.init(model_config, seed=cfg.seed if init_seed is None else init_seed)
    ce_only = replace(cfg, lambda_ce=1.0, lambda_logits=0.0, lambda_emb=0.0)
    return _optimise(model, None, ce_only, train, held_out, tok)


def distill_loss(
    teacher_out: ForwardResult | None,
    student_out: ForwardResult,
    batch: Batch,
    cfg: DistillConfig,
) -> tuple[T.Tensor, dict[str, float]]:
    """Weighted sum of CE on targets, skew KL to the teacher, and hidden-state MSE.

    All three are averaged over the scored (target) positions; the MSE is first
    averaged within each sequence.
    """
    if teacher_out is not None and teacher_out.logits.shape != student_out.logits.shape:
        raise ValueError("teacher and student logits differ in shape")
    mask = batch.loss_mask
    terms = []
    comps = {"ce": float("nan"), "logits": float("nan"), "emb": float("nan")}
    ce = cross_entropy(student_out.logits, batch.labels, mask)
    comps["ce"] = float(ce.data)
    if cfg.lambda_ce:
        terms.append(T.scale(ce, cfg.lambda_ce))
    if teacher_out is not None:
        z = teacher_out.logits.data.astype(T.compute_dtype())
        z = np.exp(z - z.max(-1, keepdims=True))
        p = z / z.sum(-1, keepdims=True)
        kl = skew_kl_logits(p, student_out.logits, cfg.alpha_skew, mask)
        emb = mse(student_out.hidden, teacher_out.hidden.data, mask)
        comps["logits"] = float(kl.data)
        comps["emb"] = float(emb.data)
        if cfg.lambda_logits:
            terms.append(T.scale(kl, cfg.lambda_logits))
        if cfg.lambda_emb:
            terms.append(T.scale(emb, cfg.lambda_emb))
    total = terms[0]
    for t in terms[1:]:
        total = T.add(total, t)
    comps["total"] = float(total.data)
    return total, comps


def distill(
    teacher: HybridModel,
    student: HybridModel,
    cfg: DistillConfig,
    train: Dataset,
    held_out: Dataset,
    tok: Tokenizer,
) -> tuple[HybridModel, LossReport]:
    """Optimise every student parameter (teacher frozen) on :func:`distill_loss`."""
    tc, sc = teacher.config, student.config
    if (tc.vocab, tc.d, tc.depth) != (sc.vocab, sc.d, sc.depth):
        raise ValueError("teacher and student must share vocab, width and depth")
    return _optimise(student.clone(), teacher, cfg, train, held_out, tok)


def _trainable(model: HybridModel, cfg: DistillConfig) -> list[T.Tensor]:
    if not cfg.freeze_attention:
        return model.parameters()
    frozen = {id(p) for b in model.blocks if b.kind is LayerKind.T for p in b.mixer.params().values()}
    return [p for p in model.parameters() if id(p) not in frozen]


def _optimise(model, teacher, cfg, train, held_out, tok):
    with T.compute_precision(np.dtype(cfg.compute_dtype)):
        return _optimise_loop(model, teacher, cfg, train, held_out, tok)


def _optimise_loop(model, teacher, cfg, train, held_out, tok):
    report = LossReport()
    params = _trainable(model, cfg)
    sampler = BatchSampler(train, cfg.batch_tokens, tok.PAD, cfg.seed)
    state = AdamState()
    eval_set = held_out[: cfg.eval_samples]
    for step in range(cfg.steps):
        batch = sampler.next()
        t_out = teacher.forward(batch.inputs) if teacher is not None else None
        with Tape() as tape:
            s_out = model.forward(batch.inputs)
            total, comps = distill_loss(t_out, s_out, batch, cfg)
        _check(comps["total"], step, "loss")
        grads = tape.gradient(total, params)
        clip_global_norm(grads, cfg.clip_norm)
        adam_step(params, grads, state, _lr_at(cfg, step))
        last = step == cfg.steps - 1
        do_eval = last or (cfg.eval_every and (step + 1) % cfg.eval_every == 0)
        if do_eval or (cfg.log_every and step % cfg.log_every == 0):
            row = dict(step=step, **comps)
            if do_eval and eval_set:
                res = evaluate(model, eval_set, tok)
                row.update(eval_ce=res.ce, eval_ter=res.token_error_rate)
                log.info("step %d total %.4f eval_ce %.4f eval_ter %.4f", step, comps["total"], res.ce, res.token_error_rate)
            report.log(**row)
    return model, report


def ablate_losses(
    teacher: HybridModel,
    layout: LayerLayout | str,
    cfg: DistillConfig,
    train: Dataset,
    held_out: Dataset,
    tok: Tokenizer,
) -> dict[str, dict[str, float]]:
    """Full objective plus one run per dropped component; only the weights differ."""
    variants = {
        "full": {},
        "no_ce": {"lambda_ce": 0.0},
        "no_logits": {"lambda_logits": 0.0},
        "no_emb": {"lambda_emb": 0.0},
    }
    out = {}
    for name, change in variants.items():
        student = assemble_hybrid(teacher, layout)
        trained, _ = distill(teacher, student, replace(cfg, **change), train, held_out, tok)
        res = evaluate(trained, held_out, tok)
        out[name] = {"ce": res.ce, "token_error_rate": res.token_error_rate, "accuracy": res.accuracy}
    return out
