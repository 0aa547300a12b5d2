"""Acceptance criteria, each at its stated tolerance and runtime budget.

Every test records a PASS/FAIL line that is repeated in the terminal summary.
Criteria 8-11 train models and are marked ``slow``.
"""
import time
from dataclasses import replace

import numpy as np
import pytest

from hybridssm import checkpoint as ckio
from hybridssm.attention import init_attention, linear_attention_direct, linear_attention_recurrent
from hybridssm.cli import main
from hybridssm.distill import DistillConfig, ablate_losses, distill_loss
from hybridssm.evaluation import evaluate
from hybridssm.experiments import (
    copy_setup,
    distill_student,
    init_comparison,
    kv_recall_setup,
    recall_comparison,
    teacher_for,
)
from hybridssm.hybrid import assemble_hybrid, transfer_attention_to_mamba
from hybridssm.layout import build_layout, m_count
from hybridssm.hybrid import ImportanceReport, build_layout_importance
from hybridssm.mamba import SSMState, init_mamba, mamba_forward_emulation, mamba_step, ssm_scan_parallel, ssm_scan_recurrent
from hybridssm.model import HybridModel, ModelConfig
from hybridssm.numerics import count_flops, grad_check, rel_err
from hybridssm.profiler import ArchSpec, cache_bytes, flops_decode, flops_prefill, qwen05b_like, ratio_archs
from hybridssm.tasks import TaskSpec, generate, make_batch

# -- property criteria ----------------------------------------------------------------------------------


def test_c1_linearisation_equivalence(verdict):
    start = time.perf_counter()
    worst = 0.0
    for seed in range(100):
        rng = np.random.default_rng(seed)
        h_kv = int(rng.choice([1, 2]))
        h = h_kv * int(rng.integers(1, 3))
        d = int(rng.integers(4, 33))
        w = init_attention(rng, d, h, h_kv, int(rng.integers(2, 9)), int(rng.integers(2, 9)))
        x = rng.standard_normal((int(rng.integers(1, 257)), d))
        worst = max(worst, rel_err(linear_attention_recurrent(w, x).data, linear_attention_direct(w, x).data))
    elapsed = time.perf_counter() - start
    ok = worst < 1e-5 and elapsed < 60
    assert verdict(1, ok, f"100 seeds, max rel err {worst:.2e} (< 1e-5), {elapsed:.1f}s (< 60s)")


def test_c2_transfer_fidelity(verdict):
    start = time.perf_counter()
    worst = 0.0
    for seed in range(100):
        rng = np.random.default_rng(1000 + seed)
        h_kv = int(rng.choice([1, 2]))
        h = h_kv * int(rng.integers(1, 3))
        d = int(rng.integers(4, 33))
        donor = init_attention(rng, d, h, h_kv, int(rng.integers(2, 9)), int(rng.integers(2, 9)))
        x = rng.standard_normal((int(rng.integers(1, 65)), d))
        got = mamba_forward_emulation(transfer_attention_to_mamba(donor), x).data
        worst = max(worst, rel_err(got, linear_attention_direct(donor, x).data))
    elapsed = time.perf_counter() - start
    ok = worst < 1e-5 and elapsed < 60
    assert verdict(2, ok, f"100 donors, max rel err {worst:.2e} (< 1e-5), {elapsed:.1f}s (< 60s)")


def test_c3_scan_equivalence(verdict):
    start = time.perf_counter()
    worst_scan = worst_step = 0.0
    for seed in range(100):
        rng = np.random.default_rng(2000 + seed)
        w = init_mamba(rng, 8, 2, 1, 4, 4, delta_init=float(rng.uniform(0.01, 1.0)))
        x = rng.standard_normal((int(rng.integers(1, 513)), 8))
        worst_scan = max(worst_scan, rel_err(ssm_scan_parallel(w, x).data, ssm_scan_recurrent(w, x).data))
    for seed in range(10):
        rng = np.random.default_rng(3000 + seed)
        w = init_mamba(rng, 8, 4, 2, 4, 4, delta_init=0.2, gate=bool(seed % 2), conv_kernel=3 * (seed % 2))
        x = rng.standard_normal((64, 8))
        state = SSMState.zeros(w)
        ys = [mamba_step(w, state, x[t])[0].data for t in range(64)]
        worst_step = max(worst_step, rel_err(np.stack(ys), ssm_scan_recurrent(w, x).data))
    elapsed = time.perf_counter() - start
    ok = worst_scan < 1e-5 and worst_step < 1e-5 and elapsed < 120
    assert verdict(3, ok, f"parallel vs recurrent {worst_scan:.2e}, step vs scan {worst_step:.2e} (< 1e-5), "
                          f"{elapsed:.1f}s (< 120s)")


def test_c4_gradient_correctness(verdict):
    start = time.perf_counter()
    spec = TaskSpec(kind="copy", n_samples=2, seed=4, n_symbols=8, min_len=2, max_len=4)
    tok = spec.tokenizer()
    cfg = ModelConfig(vocab=tok.vocab_size, d=8, depth=2, h=2, h_kv=1, d_k=4, d_v=4, d_ff=16, max_len=16)
    teacher = HybridModel.init(cfg, seed=4)
    student = assemble_hybrid(teacher, "TM")
    rng = np.random.default_rng(4)
    for p in student.parameters():
        p.data = p.data + (0.05 * rng.standard_normal(p.shape)).astype(p.data.dtype)
    batch = make_batch(generate(spec), tok.PAD)
    t_out = teacher.forward(batch.inputs)
    dcfg = DistillConfig()
    err = grad_check(lambda: distill_loss(t_out, student.forward(batch.inputs), batch, dcfg)[0],
                     student.parameters(), samples=16)
    elapsed = time.perf_counter() - start
    ok = err < 1e-3 and elapsed < 60
    assert verdict(4, ok, f"full objective on d=8 depth=2 hybrid, max rel err {err:.2e} (< 1e-3), {elapsed:.1f}s")


PLACEMENTS = {
    "blockbeg": ((1, 2), "TMMTMM"),
    "blockend": ((1, 2), "MMTMMT"),
    "front": ((1, 1), "MMMTTT"),
    "middle": ((2, 1), "TTMMTT"),
    "back": ((1, 1), "TTTMMM"),
    "sandwich": ((1, 2), "MMTTMM"),
}


def test_c5_layout_correctness(verdict):
    start = time.perf_counter()
    got = {k: str(build_layout(k, 6, *r)) for k, (r, _) in PLACEMENTS.items()}
    report = ImportanceReport([0.0] * 6, "cosine", [1, 4, 0, 2, 3, 5])
    got["importance"] = str(build_layout_importance(report, 2))
    want = {k: v for k, (_, v) in PLACEMENTS.items()}
    want["importance"] = "TMTTMT"
    counts = {k: build_layout("blockbeg", 24, 1, k).n_M for k in (1, 3, 5, 11)}
    ok_counts = counts == {1: 12, 3: 18, 5: 20, 11: 22} and all(m_count(24, 1, k) == counts[k] for k in counts)
    elapsed = time.perf_counter() - start
    ok = got == want and ok_counts and elapsed < 1
    assert verdict(5, ok, f"7 placement patterns {'match' if got == want else got}; depth-24 M counts {counts}")


def test_c6_cache_scaling(verdict):
    start = time.perf_counter()
    full = qwen05b_like()
    archs = ratio_archs(full, [(1, 0), (1, 1), (1, 3), (1, 5), (1, 11)])
    grid = list(range(0, 4097, 128))
    ok = True
    slope_full = cache_bytes(full, 1)[0] - cache_bytes(full, 0)[0]
    for a in list(archs.values()) + [full.with_layout("M" * 24)]:
        kv = [cache_bytes(a, L)[0] for L in grid]
        ssm = {cache_bytes(a, L)[1] for L in grid}
        ok &= len(ssm) == 1
        ok &= all(kv[i + 2] - 2 * kv[i + 1] + kv[i] == 0 for i in range(len(kv) - 2))
        slope = cache_bytes(a, 11)[2] - cache_bytes(a, 10)[2]
        ok &= slope * a.depth == a.layout.n_T * slope_full
    half = archs["1:1"]
    ratio_kv = cache_bytes(half, 10**6)[0] / cache_bytes(full, 10**6)[0]
    big = 10**12
    asym = 1 - cache_bytes(half, big)[2] / cache_bytes(full, big)[2]
    ok &= ratio_kv == 0.5 and abs(asym - 0.5) < 1e-6
    elapsed = time.perf_counter() - start
    ok &= elapsed < 1
    assert verdict(6, ok, f"ssm constant, kv linear, slope identity exact; 1:1 kv ratio {ratio_kv}, "
                          f"asymptotic reduction {100 * asym:.4f}%")


def test_c7_flops_cross_check(verdict):
    start = time.perf_counter()
    archs = ratio_archs(qwen05b_like(), [(1, 0), (1, 1), (1, 3), (1, 5), (1, 11)])
    pre = {k: flops_prefill(a, 2048) for k, a in archs.items()}
    order = [pre[k] for k in ("1:0", "1:1", "1:3", "1:5", "1:11")]
    within = abs(pre["1:0"] / 1.78e12 - 1) < 0.30
    saving = pre["1:0"] - pre["1:1"]
    monotone = all(a > b for a, b in zip(order, order[1:]))
    analytic_elapsed = time.perf_counter() - start
    # instrumented counter on the toy model
    cfg = ModelConfig(vocab=20, d=64, depth=6, h=4, h_kv=2, d_k=16, d_v=16, d_ff=256, max_len=64)
    worst = 0.0
    for layout in ("TTTTTT", "TMTMTM", "MMMMMM"):
        model = assemble_hybrid(HybridModel.init(cfg, seed=0), layout)
        arch = ArchSpec.from_model(model)
        states = model.init_states(1)
        for L in range(1, 33):
            with count_flops() as c:
                model.step([L % 20], states, L - 1)
            worst = max(worst, abs(c.total / flops_decode(arch, L) - 1))
    ok = within and saving >= 1e11 and monotone and worst < 0.02 and analytic_elapsed < 1
    assert verdict(7, ok, f"all-T prefill {pre['1:0']:.4e} ({100 * (pre['1:0'] / 1.78e12 - 1):+.1f}% vs 1.78e12), "
                          f"1:1 saving {saving:.3e} (>= 1e11), ordering monotone {monotone}, "
                          f"op counter within {100 * worst:.2f}% (< 2%)")


# -- training criteria ---------------------------------------------------------------------------------

TEACHER_CFG = DistillConfig(lr=3e-3, steps=2000, eval_samples=0, log_every=0)
STUDENT_CFG = DistillConfig(lr=1e-3, steps=1000, eval_samples=0, log_every=0)


@pytest.fixture(scope="session")
def copy_teacher():
    setup = copy_setup()
    start = time.perf_counter()
    teacher, _ = teacher_for(setup, TEACHER_CFG)
    return setup, teacher, time.perf_counter() - start


@pytest.mark.slow
def test_c8_recovery_via_distillation(copy_teacher, verdict):
    setup, teacher, t_teacher = copy_teacher
    start = time.perf_counter()
    t_res = evaluate(teacher, setup.held_out, setup.tok)
    student = assemble_hybrid(teacher, build_layout("blockbeg", 6, 1, 1))
    _, _, s_res = distill_student(teacher, student, setup, STUDENT_CFG)
    elapsed = t_teacher + time.perf_counter() - start
    ce_ok = s_res.ce <= 1.1 * t_res.ce
    ter_ok = s_res.token_error_rate <= t_res.token_error_rate + 0.02
    ok = t_res.accuracy > 0.95 and ce_ok and ter_ok and elapsed < 1800
    assert verdict(8, ok, f"teacher acc {t_res.accuracy:.4f} (> 0.95), CE {t_res.ce:.4f}, TER {t_res.token_error_rate:.4f}; "
                          f"1:1 student CE {s_res.ce:.4f} (<= {1.1 * t_res.ce:.4f}), "
                          f"TER {s_res.token_error_rate:.4f} (<= {t_res.token_error_rate + 0.02:.4f}); {elapsed:.0f}s")


@pytest.mark.slow
def test_c9_initialisation_speedup(copy_teacher, verdict):
    setup, teacher, t_teacher = copy_teacher
    start = time.perf_counter()
    cfg = replace(STUDENT_CFG, batch_tokens=384)
    wins, lines = 0, []
    for seed in range(5):
        r = init_comparison(teacher, "TMTMTM", setup, cfg, seed, checkpoints=(500, 1000, 2000))
        won = all(a < b for a, b in zip(r["transferred"], r["random"]))
        wins += won
        lines.append(f"seed {seed} " + "/".join(f"{a:.3f}<{b:.3f}" for a, b in zip(r["transferred"], r["random"])))
    elapsed = t_teacher + time.perf_counter() - start
    ok = wins >= 4 and elapsed < 45 * 60
    assert verdict(9, ok, f"transferred below random at 500/1000/2000 in {wins}/5 seeds (>= 4); "
                          + "; ".join(lines) + f"; {elapsed:.0f}s")


ABLATION_STEPS = 300
TIE_TER = 0.001  # about 4 of the 4133 held-out target tokens


@pytest.mark.slow
def test_c10_loss_ablation_direction(copy_teacher, verdict):
    setup, teacher, _ = copy_teacher
    start = time.perf_counter()
    votes, lines = 0, []
    for seed in range(3):
        cfg = replace(STUDENT_CFG, steps=ABLATION_STEPS, seed=seed)
        tab = ablate_losses(teacher, "TMTMTM", cfg, setup.train, setup.held_out, setup.tok)
        ter = {k: v["token_error_rate"] for k, v in tab.items()}
        others = [v for k, v in ter.items() if k != "no_ce"]
        worst_no_ce = ter["no_ce"] > max(others)
        full_best = ter["full"] <= min(ter.values()) + TIE_TER
        votes += worst_no_ce and full_best
        lines.append(f"seed {seed} " + " ".join(f"{k}={v:.4f}" for k, v in ter.items()))
    elapsed = time.perf_counter() - start
    ok = votes >= 2 and elapsed < 90 * 60
    assert verdict(10, ok, f"-CE worst and full best (tie {TIE_TER}) in {votes}/3 seeds; "
                           + "; ".join(lines) + f"; {elapsed:.0f}s")


KV_TEACHER_STEPS = 2500
KV_STUDENT_STEPS = 500


@pytest.mark.slow
def test_c11_hybrid_beats_pure_mamba_on_recall(verdict):
    setup = kv_recall_setup()
    start = time.perf_counter()
    teacher, _ = teacher_for(setup, replace(TEACHER_CFG, steps=KV_TEACHER_STEPS))
    layouts = {"hybrid": "TMTMTM", "mamba": "MMMMMM"}
    params = {k: assemble_hybrid(teacher, v).num_params() for k, v in layouts.items()}
    votes, lines = 0, []
    for seed in range(3):
        res = recall_comparison(teacher, setup, replace(STUDENT_CFG, steps=KV_STUDENT_STEPS), seed, layouts)
        votes += res["hybrid"].accuracy > res["mamba"].accuracy
        lines.append(f"seed {seed} hybrid {res['hybrid'].accuracy:.4f} mamba {res['mamba'].accuracy:.4f}")
    elapsed = time.perf_counter() - start
    ok = votes >= 2 and elapsed < 60 * 60
    assert verdict(11, ok, f"hybrid accuracy above all-M in {votes}/3 seeds; " + "; ".join(lines)
                           + f"; params hybrid {params['hybrid']} mamba {params['mamba']}; {elapsed:.0f}s")


PIPELINE_CFG = """\
seed = 11
model.d = 16
model.depth = 4
model.h = 2
model.h_kv = 1
model.d_k = 4
model.d_v = 4
model.d_ff = 32
model.max_len = 16
task.n_samples = 200
task.held_out = 16
task.n_symbols = 8
task.min_len = 2
task.max_len = 4
distill.steps = 10
distill.log_every = 2
distill.eval_samples = 8
"""


def _pipeline(d):
    cfg = d / "run.cfg"
    cfg.write_text(PIPELINE_CFG)
    calls = [
        ["teacher-train", "--config", str(cfg), "--out", str(d / "t.ckpt"), "--loss-csv", str(d / "t.csv")],
        ["convert", "--teacher", str(d / "t.ckpt"), "--strategy", "blockbeg", "--ratio", "1:1",
         "--out", str(d / "s.ckpt")],
        ["distill", "--config", str(cfg), "--teacher", str(d / "t.ckpt"), "--student", str(d / "s.ckpt"),
         "--out", str(d / "d.ckpt"), "--loss-csv", str(d / "d.csv")],
        ["profile", "--ckpt", str(d / "d.ckpt"), "--context-grid", "1,64,4096", "--out", str(d / "p.csv")],
    ]
    assert all(main(c) == 0 for c in calls)
    return {n: (d / n).read_bytes() for n in ("t.ckpt", "t.csv", "s.ckpt", "d.ckpt", "d.csv", "p.csv")}


def test_c12_determinism_and_persistence(tmp_path, verdict):
    runs = []
    for i in range(2):
        (tmp_path / str(i)).mkdir()
        runs.append(_pipeline(tmp_path / str(i)))
    same = [n for n in runs[0] if runs[0][n] == runs[1][n]]
    exact = True
    for name in ("t.ckpt", "d.ckpt"):
        raw = runs[0][name]
        back = ckio.from_bytes(raw)
        exact &= ckio.to_bytes(back) == raw
        orig = ckio.load(tmp_path / "0" / name)
        exact &= all(a.data.tobytes() == b.data.tobytes()
                     for a, b in zip(orig.model.parameters(), back.model.parameters()))
    ok = len(same) == len(runs[0]) and exact
    assert verdict(12, ok, f"byte-identical across reruns: {len(same)}/{len(runs[0])} files; "
                           f"checkpoint round trip bit-exact {exact}")
