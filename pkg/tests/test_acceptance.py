"""Acceptance criteria, one test per criterion.

Each test records a PASS/FAIL line; the lines are printed in the pytest
terminal summary, or directly when this file is run as a script.
"""

import itertools
import math
import time
from fractions import Fraction

import numpy as np
import pytest

from msbt.autodiff import Tensor
from msbt.cli import main as cli_main
from msbt.config import ModelConfig, TrainConfig
from msbt.data import SynthConfig, VideoSample, generate_synthetic, read_feature_file, write_feature_file
from msbt.errors import ConfigurationError
from msbt.evaluation import average_precision, evaluate
from msbt.fusion import token_schedule
from msbt.gradcheck import run_model_gradcheck, run_primitive_gradchecks
from msbt.losses import mil_topk_loss, tcc_loss
from msbt.model import bottleneck_schedule, forward_video, init_model, predict
from msbt.params import named_parameters
from msbt.trainer import load_checkpoint, save_checkpoint, train
from msbt.weighting import compute_weights

RESULTS: list[str] = []


def record(num: int, name: str, passed: bool, detail: str) -> None:
    line = f"[{'PASS' if passed else 'FAIL'}] criterion {num:2d} {name}: {detail}"
    RESULTS.append(line)
    print(line, flush=True)
    assert passed, line


# --------------------------------------------------------------- 1

def test_c01_gradient_integrity():
    start = time.perf_counter()
    prims = list(run_primitive_gradchecks(seed=0, tol=1e-4))
    worst_name, worst = max(((n, r.max_rel_err) for n, r in prims), key=lambda x: x[1])
    model = run_model_gradcheck("toy", seed=0, tol=1e-3)
    elapsed = time.perf_counter() - start
    ok = all(r.passed for _, r in prims) and model.passed and elapsed < 120
    record(1, "gradient integrity", ok,
           f"{len(prims)} primitives max rel err {worst:.2e} ({worst_name}), "
           f"toy model max rel err {model.max_rel_err:.2e}, {elapsed:.0f}s")


# --------------------------------------------------------------- 2

def test_c02_schedule():
    sched = bottleneck_schedule(ModelConfig())
    try:
        token_schedule(2, 3)
        rejected = False
    except ConfigurationError:
        rejected = True
    record(2, "bottleneck schedule", sched == [16, 8, 4, 2, 1] and rejected,
           f"defaults -> {sched}; n1=2, L_M=3 rejected: {rejected}")


# --------------------------------------------------------------- 3

def _shapes(modalities, t=32):
    dims = {"R": 12, "F": 10, "A": 6}
    cfg = ModelConfig(modalities=modalities, input_dims=dims, layers_global=1)
    rng = np.random.default_rng(0)
    out = forward_video({m: rng.normal(size=(t, dims[m])) for m in modalities}, init_model(cfg, 0), cfg)
    fused = out.fused.fused
    return len(fused), {tuple(f.shape) for f in fused.values()}, out.zhat.shape, out.scores.shape


def test_c03_shape_contract():
    n3, s3, z3, sc3 = _shapes(("R", "F", "A"))
    n2, s2, z2, sc2 = _shapes(("R", "A"))
    ok = (n3, s3, z3, sc3) == (6, {(32, 128)}, (32, 768), (32,)) and (n2, s2, z2) == (2, {(32, 128)}, (32, 256))
    record(3, "shape contract", ok, f"3 modalities: {n3} x {sorted(s3)}, zhat {z3}; "
                                    f"2 modalities: {n2} x {sorted(s2)}, zhat {z2}")


# --------------------------------------------------------------- 4

def _tiny_data():
    return generate_synthetic(SynthConfig(num_videos=6, t_min=6, t_max=8, event_len_min=2, event_len_max=3,
                                          dims={"R": 4, "A": 3}, seed=11))


def test_c04_loss_identities():
    rng = np.random.default_rng(4)
    tcc_t1 = tcc_loss(Tensor(rng.normal(size=(6, 1, 8)))).item()
    tcc_min = min(tcc_loss(Tensor(rng.normal(size=(p, t, 5)) * rng.uniform(0.1, 10))).item()
                  for p, t in [(2, 3), (6, 7), (2, 12)] for _ in range(30))
    v = rng.normal(size=8)
    tcc_same = tcc_loss(Tensor(np.broadcast_to(v, (2, 4, 8)).copy())).item()
    mil_err = 0.0
    for _ in range(200):
        t = int(rng.integers(1, 20))
        s, y = rng.uniform(0.01, 0.99, size=t), int(rng.integers(0, 2))
        bce = -(y * math.log(s.mean()) + (1 - y) * math.log(1 - s.mean()))
        mil_err = max(mil_err, abs(mil_topk_loss(Tensor(s), y, t).item() - bce))

    # lambda = 0 versus an explicitly MIL-only run of the same trainer
    data = _tiny_data()
    base = dict(modalities=("R", "A"), input_dims={"R": 4, "A": 3}, d_model=8, layers_msbt=2,
                bottleneck_n1=2, layers_global=1)
    tc = TrainConfig(epochs=3, batch_size=4, lr=0.02, seed=5)
    lam0 = train(data, ModelConfig(lam=0.0, **base), tc)
    mil_only = _mil_only_trace(data, ModelConfig(lam=0.0, **base), tc)
    trace_ok = [e.total for e in lam0.history] == mil_only == [e.mil for e in lam0.history]

    ok = (tcc_t1 == 0.0 and tcc_min >= 0 and abs(tcc_same - math.log(4)) < 1e-9 and mil_err < 1e-12
          and trace_ok)
    record(4, "loss identities", ok,
           f"TCC(T=1)={tcc_t1}, min TCC={tcc_min:.3g}, |TCC_same-log4|={abs(tcc_same - math.log(4)):.1e}, "
           f"max |MIL(K=T)-BCE|={mil_err:.1e}, lambda=0 trace bit-identical: {trace_ok}")


def _mil_only_trace(data, cfg, tc):
    from msbt.autodiff import backward
    from msbt.params import zero_grad

    params = init_model(cfg, tc.seed)
    tensors = [t for _, t in named_parameters(params)]
    rng = np.random.default_rng(tc.seed + 1)
    trace = []
    for _ in range(tc.epochs):
        order = rng.permutation(len(data))
        total = 0.0
        for start in range(0, len(order), tc.batch_size):
            batch = [data[i] for i in order[start:start + tc.batch_size]]
            zero_grad(params)
            sub = 0.0
            for s in batch:
                mil = mil_topk_loss(forward_video(s, params, cfg).scores, s.video_label, cfg.topk)
                sub += mil.item()
                backward(mil * (1.0 / len(batch)))
            total += sub
            for t in tensors:
                t.data -= tc.lr * t.grad
        trace.append(total / len(data))
    return trace


# --------------------------------------------------------------- 5

def test_c05_permutation():
    cfg = ModelConfig(input_dims={"R": 6, "F": 5, "A": 4}, d_model=16, layers_msbt=3, bottleneck_n1=4,
                      layers_global=2)
    params = init_model(cfg, 2)
    rng = np.random.default_rng(5)
    score_err = mil_err = w_err = 0.0
    for trial in range(5):
        t = int(rng.integers(8, 20))
        s = VideoSample(f"v{trial}", {m: rng.normal(size=(t, d)) for m, d in cfg.input_dims.items()}, 1)
        perm = rng.permutation(t)
        a, b = forward_video(s, params, cfg), forward_video(s.permuted(perm), params, cfg)
        score_err = max(score_err, float(np.abs(a.scores.data[perm] - b.scores.data).max()))
        la = mil_topk_loss(a.scores, 1, cfg.topk).item()
        lb = mil_topk_loss(b.scores, 1, cfg.topk).item()
        mil_err = max(mil_err, abs(la - lb))
        wa = compute_weights(a.fused, params.weight_head).data
        wb = compute_weights(b.fused, params.weight_head).data
        w_err = max(w_err, float(np.abs(wa - wb).max()))
    ok = score_err < 1e-12 and mil_err < 1e-9 and w_err < 1e-12
    record(5, "permutation properties", ok,
           f"max score diff {score_err:.1e}, MIL diff {mil_err:.1e}, weight diff {w_err:.1e}")


# --------------------------------------------------------------- 6

def test_c06_overfit_smoke():
    kw = dict(t_min=16, t_max=16, event_len_min=9, event_len_max=12, signal=2.5)
    data = (generate_synthetic(SynthConfig(num_videos=4, anomaly_rate=1.0, seed=60, id_prefix="pos", **kw))
            + generate_synthetic(SynthConfig(num_videos=4, anomaly_rate=0.0, seed=61, id_prefix="neg", **kw)))
    cfg = ModelConfig.reduced()
    assert (cfg.d_model, cfg.layers_msbt, cfg.bottleneck_n1, cfg.layers_global) == (16, 3, 4, 2)
    start = time.perf_counter()
    ck = train(data, cfg, TrainConfig(epochs=200, batch_size=2, lr=0.01, seed=0))
    elapsed = time.perf_counter() - start
    mil = [e.mil for e in ck.history]
    first = next((i + 1 for i, v in enumerate(mil) if v < 0.05), None)
    ok = first is not None and elapsed < 300
    record(6, "overfit smoke test", ok,
           f"{sum(s.video_label for s in data)}/8 anomalous, MIL {mil[0]:.3f} -> {mil[-1]:.4f}, "
           f"first < 0.05 at epoch {first}, {elapsed:.0f}s")


# --------------------------------------------------------------- 7

def _synthetic_run(offset: int, lam: float) -> float:
    kw = dict(t_min=20, t_max=28, event_len_min=9, event_len_max=12, signal=2.5,
              async_min=offset, async_max=offset)
    train_set = generate_synthetic(SynthConfig(num_videos=200, seed=1, **kw))
    test_set = generate_synthetic(SynthConfig(num_videos=50, seed=2, id_prefix="test", **kw))
    cfg = ModelConfig.reduced(lam=lam)
    ck = train(train_set, cfg, TrainConfig(epochs=100, batch_size=4, lr=0.03, seed=0))
    return evaluate(ck.params, cfg, test_set).frame_ap


@pytest.mark.slow
def test_c07_synthetic_detection():
    start = time.perf_counter()
    ap_sync = _synthetic_run(0, 0.1)
    ap_tcc = _synthetic_run(2, 0.1)
    ap_mil = _synthetic_run(2, 0.0)
    elapsed = time.perf_counter() - start
    ok = ap_sync >= 0.90 and ap_tcc >= ap_mil - 0.02 and elapsed < 1200
    record(7, "synthetic detection", ok,
           f"AP {ap_sync:.4f} (synchronous, lambda=0.1); offset 2: AP {ap_tcc:.4f} (lambda=0.1) "
           f"vs {ap_mil:.4f} (lambda=0); {elapsed:.0f}s")


# --------------------------------------------------------------- 8

def _layer_count(d, f):
    return 4 * d * d + 2 * d * f + 6 * d + f


def _mlp_count(w):
    h1, h2 = w // 2, w // 4
    return w * h1 + h1 + h1 * h2 + h2 + h2 + 1


def expected_parameter_count(cfg: ModelConfig) -> int:
    d, p = cfg.d_model, cfg.n_pairs
    sched = bottleneck_schedule(cfg)
    n = sum((cfg.input_dims[m] + 1) * d for m in cfg.modalities)
    n += cfg.layers_unimodal * _layer_count(d, cfg.d_ff)
    per_pair = 2 * cfg.layers_msbt * _layer_count(d, cfg.d_ff) + sum(sched) * d
    if cfg.cross_transformer:
        per_pair += (cfg.layers_msbt - 1) * _layer_count(d, cfg.d_ff)
    n += p * per_pair
    if cfg.weighting:
        n += cfg.layers_weight * _layer_count(d, cfg.d_ff) + _mlp_count(d)
    w = p * d
    n += cfg.layers_global * _layer_count(w, cfg.ffn_mult * w) + _mlp_count(w)
    return n


def test_c08_ablation_plumbing(tmp_path):
    data_dir = tmp_path / "data"
    assert cli_main(["synth", "--out", str(data_dir), "--num-videos", "6", "--t-min", "10", "--t-max", "12",
                     "--event-len-min", "3", "--event-len-max", "4", "--seed", "8"]) == 0
    variants = {
        "full": [],
        "no-cross-transformer": ["--no-cross-transformer"],
        "no-weighting": ["--no-weighting"],
        "plain bottleneck": ["--no-cross-transformer", "--no-weighting"],
        "fixed tokens 4": ["--fixed-tokens", "4"],
    }
    counts, audits, runs = {}, [], []
    for name, flags in variants.items():
        out = tmp_path / name.replace(" ", "_")
        rc = cli_main(["train", "--manifest", str(data_dir / "manifest.tsv"), "--out", str(out), "--preset",
                       "reduced", "--epochs", "1", "--batch-size", "3", *flags])
        runs.append(rc == 0)
        ck = load_checkpoint(out / "model.ckpt")
        counts[name] = ck.params.num_parameters()
        audits.append(counts[name] == expected_parameter_count(ck.model_cfg))
        ms = ck.params.msbt
        if "--no-cross-transformer" in flags:
            audits.append(not ms.uses_cross_transformer)
        if "--no-weighting" in flags:
            audits.append(ck.params.weight_head is None)
        if "--fixed-tokens" in flags:
            audits.append(ms.schedule == [4, 4, 4])
    ok = all(runs) and all(audits) and len(set(counts.values())) == len(counts)
    record(8, "ablation plumbing", ok, ", ".join(f"{k}={v}" for k, v in counts.items()))


# --------------------------------------------------------------- 9

def _sweep_ap(scores, labels):
    n_pos = sum(labels)
    ap, prev = Fraction(0), Fraction(0)
    for thr in sorted(set(scores), reverse=True):
        sel = [y for s, y in zip(scores, labels) if s >= thr]
        rec = Fraction(sum(sel), n_pos)
        ap += Fraction(sum(sel), len(sel)) * (rec - prev)
        prev = rec
    return ap


def test_c09_ap_oracle():
    rng = np.random.default_rng(9)
    worst, cases = 0.0, 0
    for n in range(1, 13):
        for labels in itertools.product((0, 1), repeat=n):
            if not any(labels):
                continue
            score_sets = [list(range(n, 0, -1)), [1] * n]
            if n <= 8:
                score_sets += [list(rng.permutation(n)), list(rng.integers(0, 3, size=n))]
            else:
                score_sets.append(list(rng.integers(0, n // 2, size=n)))
            for scores in score_sets:
                scores = [float(s) for s in scores]
                worst = max(worst, abs(average_precision(scores, labels) - float(_sweep_ap(scores, labels))))
                cases += 1
    hand = average_precision([0.9, 0.8, 0.7, 0.6], [1, 0, 1, 0])
    ok = worst < 1e-12 and abs(hand - 5 / 6) < 1e-15
    record(9, "AP oracle", ok, f"{cases} exhaustive cases (n <= 12), max |AP - exact| = {worst:.1e}; "
                               f"hand case = {hand!r}")


# --------------------------------------------------------------- 10

def test_c10_determinism_and_roundtrips(tmp_path):
    data = _tiny_data()
    cfg = ModelConfig(modalities=("R", "A"), input_dims={"R": 4, "A": 3}, d_model=8, layers_msbt=2,
                      bottleneck_n1=2, layers_global=1)
    tc = TrainConfig(epochs=4, batch_size=3, lr=0.02, seed=7)
    a, b = train(data, cfg, tc), train(data, cfg, tc)
    logs_equal = [(e.mil, e.tcc, e.total) for e in a.history] == [(e.mil, e.tcc, e.total) for e in b.history]

    save_checkpoint(tmp_path / "m.ckpt", a)
    back = load_checkpoint(tmp_path / "m.ckpt")
    orig = dict(named_parameters(a.params))
    params_equal = all(t.data.tobytes() == orig[k].data.tobytes() for k, t in named_parameters(back.params))
    fwd_equal = all(predict(s, back.params, cfg).tobytes() == predict(s, a.params, cfg).tobytes() for s in data)

    arr = np.random.default_rng(10).normal(size=(7, 5)).astype(np.float32)
    write_feature_file(tmp_path / "f.msbf", arr)
    feat_equal = read_feature_file(tmp_path / "f.msbf").astype(np.float32).tobytes() == arr.tobytes()
    ok = logs_equal and params_equal and fwd_equal and back.model_cfg == cfg and feat_equal
    record(10, "determinism and round-trips", ok,
           f"loss logs identical: {logs_equal}; checkpoint params/forward bit-exact: {params_equal}/{fwd_equal}; "
           f"feature file bit-exact: {feat_equal}")


if __name__ == "__main__":
    import sys
    import tempfile
    from pathlib import Path

    failed = 0
    for name, fn in sorted((n, f) for n, f in globals().items() if n.startswith("test_c")):
        try:
            if "tmp_path" in fn.__code__.co_varnames[:fn.__code__.co_argcount]:
                with tempfile.TemporaryDirectory() as d:
                    fn(Path(d))
            else:
                fn()
        except AssertionError:
            failed += 1
    print("\n".join(RESULTS))
    sys.exit(1 if failed else 0)
