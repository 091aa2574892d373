"""Acceptance criteria AC1 to AC10; the terminal summary prints one PASS/FAIL line each."""

import math
import time

import numpy as np
import pytest

from almt import tensor as T
from almt.analysis import peak_frame_probe
from almt.checkpoint import Checkpoint
from almt.data import SynthConfig, generate_synthetic, mmf_bytes, parse_mmf
from almt.metrics import (
    MOSI_BUCKETS,
    SIMS_BUCKETS,
    acc2_dual,
    bucket_counts,
    compute_report,
    f1_scores,
    pearson_corr,
)
from almt.model import (
    AblationFlags,
    AHLLayer,
    ALMTModel,
    ModelConfig,
    apply_ablation,
    compute_loss,
    count_parameters,
    zero_value_projections,
)
from almt.tensor import Tensor
from almt.train import ScheduleConfig, TrainConfig, evaluate, loss_sequence, lr_at, train
from oracles import bucket_counts_brute, lr_closed_form, pearson_exact, weighted_f1_brute

criterion = pytest.mark.criterion

# --------------------------------------------------------------------------- AC1

GRAD_DIMS = {"language": 6, "visual": 4, "audio": 3}
GRAD_LENS = {"language": 5, "visual": 5, "audio": 5}


def grad_config():
    # wider init than the training default so attention scores are not
    # vanishingly small and every block contributes first-order gradients
    return ModelConfig(token_len=2, model_dim=8, heads=2, d_k=4, embed_depth=1, ahl_depth=1, fusion_depth=1,
                       input_dims=GRAD_DIMS, input_lens=GRAD_LENS, init_std=0.3)


def grad_problem(dtype):
    with T.default_dtype(dtype):
        model = ALMTModel(grad_config(), seed=0)
    rng = np.random.default_rng(11)
    raw = {m: rng.normal(size=(2, GRAD_LENS[m], d)) for m, d in GRAD_DIMS.items()}
    labels = np.array([0.7, -1.3])

    def loss(_params):
        inputs = {m: v.astype(T.get_default_dtype()) for m, v in raw.items()}
        y, _ = model.forward(inputs)
        return compute_loss(y, labels)

    return model, loss


@criterion("AC1 gradient correctness (f32)")
def test_ac1_gradients_float32(record_property):
    model, loss = grad_problem(np.float32)
    start = time.perf_counter()
    # float32 backward against float64 central differences on the same parameters
    errors = T.gradient_errors(loss, model.parameters(), h=1e-4, numeric_dtype=np.float64)
    elapsed = time.perf_counter() - start
    record_property("detail", f"max rel err {max(errors):.2e} over {count_parameters(model)} params, {elapsed:.0f}s")
    assert max(errors) <= 1e-3
    assert elapsed < 60


@criterion("AC1 gradient correctness (f64)")
def test_ac1_gradients_float64(record_property):
    model, loss = grad_problem(np.float64)
    start = time.perf_counter()
    with T.default_dtype(np.float64):
        errors = T.gradient_errors(loss, model.parameters(), h=1e-4)
    elapsed = time.perf_counter() - start
    record_property("detail", f"max rel err {max(errors):.2e}, {elapsed:.0f}s")
    assert max(errors) <= 1e-6
    assert elapsed < 60


# --------------------------------------------------------------------------- AC2


@criterion("AC2 attention rows are distributions")
def test_ac2_attention_invariants(record_property):
    rng = np.random.default_rng(2)
    variants = [AblationFlags(), AblationFlags(qkv_swap=True), AblationFlags(guidance_scales=(1, 3)),
                AblationFlags(drop_audio=True)]
    models = [ALMTModel(apply_ablation(grad_config(), f), seed=i) for i, f in enumerate(variants)]
    violations, rows = 0, 0
    for k in range(1000):
        model = models[k % len(models)]
        scale = 10.0 ** rng.uniform(-2, 1.5)
        inputs = {m: (scale * rng.normal(size=(2, GRAD_LENS[m], d))).astype(np.float32)
                  for m, d in GRAD_DIMS.items()}
        with T.no_grad():
            _, trace = model.forward(inputs)
        for w in trace.all_head_maps() + trace.alpha + trace.beta:
            sums = w.sum(axis=-1)
            rows += sums.size
            violations += int(np.sum(np.abs(sums - 1.0) > 1e-5)) + int(np.sum(w < 0))
    record_property("detail", f"{violations} violations in {rows} rows")
    assert violations == 0


# --------------------------------------------------------------------------- AC3


@criterion("AC3 residual identities")
def test_ac3_ahl_identity():
    rng = np.random.default_rng(3)
    cfg = grad_config()
    layer = AHLLayer(cfg, rng)
    zero_value_projections(layer)
    h_prev, lang, a, v = (Tensor(rng.normal(size=(2, 2, 8))) for _ in range(4))
    out, alpha, beta = layer(h_prev, lang, a, v)
    np.testing.assert_array_equal(out.data, h_prev.data)


@criterion("AC3 residual identities")
def test_ac3_encoder_identities():
    rng = np.random.default_rng(4)
    model = ALMTModel(grad_config())
    for layer in model.language_scales + model.fusion_layers + model.embed["audio"].layers:
        layer.zero_output_projections()
        x = Tensor(rng.normal(size=(3, 2, 8)).astype(np.float32))
        np.testing.assert_array_equal(layer(x).data, x.data)
    h1 = model.embed_modality("language", rng.normal(size=(1, 5, 6)).astype(np.float32))
    h2, h3 = model.build_language_scales(h1)
    np.testing.assert_array_equal(h3.data, h1.data)
    # the embedding stage reduces to projected tokens plus positions
    emb = model.embed["audio"]
    u = rng.normal(size=(1, 5, 3)).astype(np.float32)
    out = model.embed_modality("audio", u).data
    expected = emb.token.data @ emb.proj.weight.data + emb.proj.bias.data + emb.pos.data[:2]
    np.testing.assert_allclose(out[0], expected, rtol=1e-6, atol=1e-7)


# --------------------------------------------------------------------------- AC4


@criterion("AC4 parameter count")
def test_ac4_parameter_count(record_property):
    n = count_parameters(ALMTModel(ModelConfig()))
    record_property("detail", f"{n:,} parameters")
    assert 1_750_000 <= n <= 3_250_000
    deeper = count_parameters(ALMTModel(ModelConfig(fusion_depth=4)))
    one_layer = sum(p.size for p in ALMTModel(ModelConfig()).fusion_layers[0].parameters())
    assert deeper - n == 2 * one_layer


# --------------------------------------------------------------------------- AC5

OVERFIT_DIMS = {"language": 32, "visual": 8, "audio": 4}
OVERFIT_LENS = {"language": 10, "visual": 10, "audio": 10}


@criterion("AC5 overfit oracle")
def test_ac5_overfit(record_property):
    ds = generate_synthetic(SynthConfig(n_samples=16, lengths=OVERFIT_LENS, dims=OVERFIT_DIMS,
                                        relevance=0.8, noise_sigma=1.0, seed=1))
    cfg = ModelConfig(token_len=4, model_dim=32, heads=4, d_k=8, fusion_depth=2,
                      input_dims=OVERFIT_DIMS, input_lens=OVERFIT_LENS)
    start = time.perf_counter()
    # at 1e-3 Adam overshoots after warmup and the window invariant breaks
    res = train(TrainConfig(cfg, ds, epochs=2000, batch_size=16, base_lr=3e-4, weight_decay=0.0, seed=0))
    elapsed = time.perf_counter() - start
    final = evaluate(res.model, ds).loss
    losses = np.array([e["train_loss"] for e in res.log])
    warm = int(0.05 * len(losses))
    windows = [losses[i + 50] <= losses[i] for i in range(warm, len(losses) - 50)]
    violations = 1 - float(np.mean(windows))
    record_property("detail", f"train MSE {final:.2e} after 2000 steps, {elapsed:.0f}s, "
                              f"{100 * violations:.1f}% non-decreasing 50-step windows")
    assert final <= 0.01
    assert elapsed < 300
    assert violations <= 0.05


# --------------------------------------------------------------------------- AC6

GOLDEN = [
    ([0.0, 0.0, 0.0], [0.0, 1.0, -1.0]),
    ([0.5, -0.5, 1.5, -1.5, 2.5, -2.5], [1.0, -1.0, 2.0, -2.0, 3.0, -3.0]),
    ([3.7, -4.2, 2.49, -2.51], [3.0, -3.0, 2.0, -3.0]),
    ([0.49, -0.49, 0.51, -0.51], [0.0, 0.0, 1.0, -1.0]),
    ([1.0, 2.0, 3.0], [1.0, 2.0, 4.0]),
    ([-0.5, 0.1, 1.0], [-1.0, 0.0, 2.0]),
    ([0.1, -0.1, 0.7, -0.7, 0.05], [0.1, -0.1, 0.7, -0.7, 0.0]),
    ([0.3, 0.3, 0.3, 0.3], [-1.0, 1.0, -2.0, 2.0]),
    ([1.2, -0.3, 2.2, -1.8, 0.0, 0.6], [1.4, -0.2, 1.8, -2.6, 0.2, -0.4]),
    ([-3.0, -2.0, -1.0, 0.0, 1.0, 2.0, 3.0], [3.0, 2.0, 1.0, 0.0, -1.0, -2.0, -3.0]),
    ([0.999, -0.999, 0.101, -0.101, 0.699], [1.0, -1.0, 0.1, -0.1, 0.7]),
    ([2.5, 1.5, 0.5, -0.5, -1.5, -2.5, 0.0, 0.0], [2.4, 1.6, 0.4, -0.6, -1.4, -2.6, 0.0, 0.0]),
]


@criterion("AC6 metrics golden suite")
@pytest.mark.parametrize("case", range(len(GOLDEN)))
def test_ac6_golden(case):
    p, y = GOLDEN[case]
    for profile in (MOSI_BUCKETS, SIMS_BUCKETS):
        for spec in profile.values():
            brute = bucket_counts_brute(p, y, spec.n_buckets, lo=spec.lo, hi=spec.hi, cuts=spec.cuts, tie=spec.tie)
            assert bucket_counts(p, y, spec) == brute
    assert abs(pearson_corr(p, y) - pearson_exact(p, y)) <= 1e-9
    nonneg = weighted_f1_brute([v >= 0 for v in p], [v >= 0 for v in y])
    kept = [(a, b) for a, b in zip(p, y) if b != 0]
    f_a, f_b = f1_scores(p, y)
    assert f_a == pytest.approx(nonneg, abs=1e-15)
    if kept:
        assert f_b == pytest.approx(weighted_f1_brute([a >= 0 for a, _ in kept], [b > 0 for _, b in kept]), abs=1e-15)
        acc_a, acc_b = acc2_dual(p, y)
        assert acc_b == sum((a >= 0) == (b > 0) for a, b in kept) / len(kept)
    assert compute_report(p, y).n == len(p)


@criterion("AC6 metrics golden suite")
def test_ac6_acc2_example():
    assert acc2_dual([-0.5, 0.1, 1.0], [-1.0, 0.0, 2.0]) == (1.0, 1.0)
    assert pearson_corr([1, 2, 3], [1, 2, 4]) == pytest.approx(0.98198, abs=1e-5)


# --------------------------------------------------------------------------- AC7


@criterion("AC7 schedule closed form")
@pytest.mark.parametrize("base,warmup,total,floor", [(1e-4, 100, 2000, 0.0), (3e-3, 8, 40, 1e-5), (1.0, 2, 6, 0.25)])
def test_ac7_schedule(base, warmup, total, floor):
    sched = ScheduleConfig(base, warmup, total, floor)
    for step in (0, warmup // 2, warmup, warmup + (total - warmup) // 2, total):
        want = lr_closed_form(step, base, warmup, total, floor)
        assert abs(lr_at(sched, step) - want) <= 1e-12 * abs(want) + (1e-300 if want == 0 else 0)
    assert lr_at(sched, warmup) == base
    if floor == 0 and (total - warmup) % 2 == 0:
        assert lr_at(sched, warmup + (total - warmup) // 2) == pytest.approx(base / 2, rel=1e-12)
    assert abs(lr_at(sched, total) - floor) <= 1e-12 * max(base, 1.0)


# --------------------------------------------------------------------------- AC8 and AC9 shared setup

TOY_DIMS = {"language": 32, "visual": 8, "audio": 4}
TOY_LENS = {"language": 10, "visual": 10, "audio": 10}


def toy_data(seed, relevance, noise_sigma):
    full = generate_synthetic(SynthConfig(n_samples=160, lengths=TOY_LENS, dims=TOY_DIMS, relevance=relevance,
                                          noise_sigma=noise_sigma, seed=seed))
    return full.subset(range(128), "train"), full.subset(range(128, 160), "valid")


def toy_config(**kw):
    return ModelConfig(token_len=8, model_dim=32, heads=4, d_k=8, fusion_depth=1,
                       input_dims=TOY_DIMS, input_lens=TOY_LENS, **kw)


def toy_train(cfg, train_set, valid_set, seed):
    return train(TrainConfig(cfg, train_set, valid_set, epochs=60, batch_size=32, base_lr=1e-3, seed=seed))


@criterion("AC8 noise suppression direction")
def test_ac8_noise_suppression(record_property):
    outcomes = []
    for seed in range(10):
        tr, va = toy_data(seed, relevance=0.8, noise_sigma=1.0)
        model = toy_train(toy_config(), tr, va, seed).model
        probe = peak_frame_probe(model, va[0], "visual", amplitude=5.0, seed=seed)
        outcomes.append(probe.suppressed)
    wins = sum(outcomes)
    record_property("detail", f"peak-column beta mass fell in {wins}/10 seeds")
    assert wins >= 7


@criterion("AC9 AHL ablation direction")
def test_ac9_ahl_beats_concatenation(record_property):
    start = time.perf_counter()
    pairs = []
    for seed in range(5):
        tr, va = toy_data(seed, relevance=0.3, noise_sigma=1.0)
        losses = []
        for flags in (AblationFlags(), AblationFlags(disable_ahl=True)):
            res = toy_train(apply_ablation(toy_config(), flags), tr, va, seed)
            losses.append(res.log[res.best_epoch]["valid_loss"])
        pairs.append(losses)
    wins = sum(full <= concat for full, concat in pairs)
    record_property("detail", f"full <= w/o AHL in {wins}/5 seeds, "
                              + ", ".join(f"{a:.3f} vs {b:.3f}" for a, b in pairs)
                              + f"; {time.perf_counter() - start:.0f}s")
    assert wins >= 4


# --------------------------------------------------------------------------- AC10


@criterion("AC10 determinism and persistence")
def test_ac10_determinism_and_round_trips(tmp_path):
    ds = generate_synthetic(SynthConfig(n_samples=40, lengths=GRAD_LENS, dims=GRAD_DIMS, seed=5))
    tr, va, te = ds.subset(range(24), "train"), ds.subset(range(24, 32), "valid"), ds.subset(range(32, 40), "test")
    cfg = ModelConfig(token_len=2, model_dim=8, heads=2, d_k=4, fusion_depth=1, input_dims=GRAD_DIMS,
                      input_lens=GRAD_LENS)
    runs = [train(TrainConfig(cfg, tr, va, te, epochs=4, batch_size=8, base_lr=1e-3, seed=3,
                              checkpoint_path=tmp_path / f"{i}.almt")) for i in range(2)]
    assert loss_sequence(runs[0].log) == loss_sequence(runs[1].log)
    assert (tmp_path / "0.almt").read_bytes() == (tmp_path / "1.almt").read_bytes()

    raw = (tmp_path / "0.almt").read_bytes()
    assert Checkpoint.from_bytes(raw).to_bytes() == raw
    mmf = mmf_bytes(te)
    assert mmf_bytes(parse_mmf(mmf)) == mmf

    reloaded = Checkpoint.from_bytes(raw).build_model()
    again = evaluate(reloaded, parse_mmf(mmf))
    assert again.report.to_json() == runs[0].test.report.to_json()
    valid_loss = runs[0].log[runs[0].best_epoch]["valid_loss"]
    assert evaluate(reloaded, va).loss == valid_loss
