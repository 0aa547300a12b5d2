"""Plain-text run configuration: ``section.key = value`` lines with ``#`` comments."""
from __future__ import annotations

from dataclasses import dataclass, field, fields
from pathlib import Path

from .distill import DistillConfig
from .model import ModelConfig
from .tasks import TaskSpec


@dataclass
class ModelSection:
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


@dataclass
class HybridSection:
    strategy: str = "blockbeg"
    ratio: str = "1:1"
    importance_report: str = ""


@dataclass
class TaskSection:
    kind: str = "copy"
    n_samples: int = 20000
    held_out: int = 512
    seed: int = 1
    n_symbols: int = 16
    min_len: int = 4
    max_len: int = 10
    n_pairs: int = 4
    n_keys: int = 8
    n_values: int = 8
    path: str = ""
    context_len: int = 32


@dataclass
class DistillSection:
    lr: float = 1e-3
    steps: int = 2000
    batch_tokens: int = 768
    alpha: float = 0.1
    lambda_ce: float = 1.0
    lambda_logits: float = 1.0
    lambda_emb: float = 1.0
    log_every: int = 50
    eval_every: int = 0
    eval_samples: int = 256
    clip_norm: float = 1.0
    warmup: int = 100


SECTIONS = {"model": ModelSection, "hybrid": HybridSection, "task": TaskSection, "distill": DistillSection}


def _coerce(raw: str, kind, key: str):
    raw = raw.strip()
    try:
        if kind in (bool, "bool"):
            low = raw.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError
        if kind in (int, "int"):
            return int(raw)
        if kind in (float, "float"):
            return float(raw)
    except ValueError:
        raise ValueError(f"bad value {raw!r} for key {key!r}") from None
    return raw


@dataclass
class RunConfig:
    seed: int = 0
    model: ModelSection = field(default_factory=ModelSection)
    hybrid: HybridSection = field(default_factory=HybridSection)
    task: TaskSection = field(default_factory=TaskSection)
    distill: DistillSection = field(default_factory=DistillSection)

    @staticmethod
    def keys() -> list[str]:
        out = ["seed"]
        for name, cls in SECTIONS.items():
            out += [f"{name}.{f.name}" for f in fields(cls)]
        return out

    def set(self, key: str, value: str) -> None:
        """Assign ``value`` (text) to dotted ``key``; unknown keys raise ``KeyError``."""
        if key == "seed":
            self.seed = _coerce(value, int, key)
            return
        section, _, name = key.partition(".")
        if section not in SECTIONS:
            raise KeyError(f"unknown config key {key!r}")
        target = getattr(self, section)
        types = {f.name: f.type for f in fields(target)}
        if name not in types:
            raise KeyError(f"unknown config key {key!r}")
        setattr(target, name, _coerce(value, types[name], key))

    def get(self, key: str):
        if key == "seed":
            return self.seed
        section, _, name = key.partition(".")
        return getattr(getattr(self, section), name)

    @classmethod
    def parse(cls, text: str) -> "RunConfig":
        cfg = cls()
        for lineno, line in enumerate(text.splitlines(), 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ValueError(f"line {lineno}: expected 'key = value'")
            key, value = (p.strip() for p in line.split("=", 1))
            cfg.set(key, value)
        return cfg

    @classmethod
    def load(cls, path: str | Path) -> "RunConfig":
        return cls.parse(Path(path).read_text())

    def dump(self) -> str:
        lines = []
        for key in self.keys():
            v = self.get(key)
            lines.append(f"{key} = {str(v).lower() if isinstance(v, bool) else v}")
        return "\n".join(lines) + "\n"

    # -- views consumed by the library ---------------------------------------

    def model_config(self, vocab: int) -> ModelConfig:
        m = self.model
        return ModelConfig(
            vocab=vocab, d=m.d, depth=m.depth, h=m.h, h_kv=m.h_kv, d_k=m.d_k, d_v=m.d_v, d_ff=m.d_ff,
            max_len=m.max_len, mamba_gate=m.mamba_gate, mamba_conv=m.mamba_conv, delta_init=m.delta_init,
        )

    def task_spec(self, held_out: bool = False) -> TaskSpec:
        t = self.task
        return TaskSpec(
            kind=t.kind, n_samples=t.held_out if held_out else t.n_samples,
            seed=t.seed + 7919 if held_out else t.seed, n_symbols=t.n_symbols, min_len=t.min_len,
            max_len=t.max_len, n_pairs=t.n_pairs, n_keys=t.n_keys, n_values=t.n_values, path=t.path,
            context_len=t.context_len,
        )

    def distill_config(self) -> DistillConfig:
        s = self.distill
        return DistillConfig(
            lr=s.lr, steps=s.steps, batch_tokens=s.batch_tokens, alpha_skew=s.alpha, lambda_ce=s.lambda_ce,
            lambda_logits=s.lambda_logits, lambda_emb=s.lambda_emb, seed=self.seed, log_every=s.log_every,
            eval_every=s.eval_every, eval_samples=s.eval_samples, clip_norm=s.clip_norm, warmup=s.warmup,
        )
