"""Acceptance criteria, each run at its stated tolerance.

Every test records one PASS/FAIL line through the ``report`` fixture; the
lines are repeated in the terminal summary. The desk-scale runs train three
16^3 models for 40 epochs, so this module takes tens of minutes.
"""

import csv
import time

import numpy as np
import pytest
from scipy import stats

from wxvae import tensor as T
from wxvae.cli import run
from wxvae.data import (
    CubeDataset,
    MonsoonGenConfig,
    extract_windows,
    gen_synthetic_monsoon,
    normalize,
    plan_windows,
    split_indices,
)
from wxvae.gradcheck import TOY_CONFIG, gradcheck_model
from wxvae.model import LatentStats, ModelConfig, kl_normal
from wxvae.qq import ExtremeRefSpec, prob_at_value, qq_curve, qq_divergence, quantiles, reference_extremes
from wxvae.sampler import SIGMA_GRID, SamplerConfig, synthesize
from wxvae.train import Checkpoint, TrainConfig, train

pytestmark = pytest.mark.slow

DESK_SEEDS = (0, 1, 2)
N_SYNTH = 512


# ---------------------------------------------------------------------------
# shared desk-scale fixtures

@pytest.fixture(scope="module")
def desk_split():
    """1,875 cubes of 16 days x 16 x 16 from ten synthetic monsoon seasons, split 1,500 / 375."""
    series = gen_synthetic_monsoon(MonsoonGenConfig(days=3650, seed=100))
    plan = plan_windows(series, 16, n_boxes=16, box_extent=(20, 20), n_samples=1875, seed=101)
    train_idx, test_idx = split_indices(len(plan), 0.2, 102)
    train_set = CubeDataset(extract_windows(series, plan.subset(train_idx), (16, 16)), None, "train")
    test_set = CubeDataset(extract_windows(series, plan.subset(test_idx), (16, 16)), None, "test")
    return normalize(train_set), test_set


_trained: dict[int, tuple] = {}


def desk_model(split, seed):
    """Train (once per seed) the 16^3, k=8 desk model for 40 epochs."""
    if seed not in _trained:
        train_set, _ = split
        cfg = TrainConfig(epochs=40, seed=seed)
        start = time.perf_counter()
        params, history = train(train_set, ModelConfig.desk(), cfg)
        elapsed = time.perf_counter() - start
        _trained[seed] = (Checkpoint(params, ModelConfig.desk(), cfg, train_set.norm), history, elapsed)
    return _trained[seed]


def sigma_sweep(ckpt):
    return {s: synthesize(ckpt, SamplerConfig(sigma=s, n=N_SYNTH, seed=7)).fields for s in SIGMA_GRID}


# ---------------------------------------------------------------------------
# 1-3: numerics

def test_c1_gradcheck_toy(report):
    assert (TOY_CONFIG.input_extent, TOY_CONFIG.latent_dim, TOY_CONFIG.conv_channels) == ((8, 8, 8), 4, 8)
    start = time.perf_counter()
    rep = gradcheck_model(TOY_CONFIG, step=1e-4, tolerance=1e-3)
    elapsed = time.perf_counter() - start
    ok = rep.passed and elapsed < 120
    detail = f"max rel err {rep.max_rel_error:.2e} (tol 1e-3), {elapsed:.1f}s (limit 120s)"
    assert report("C1 gradcheck toy config", ok, detail), "\n".join(rep.lines())


def kl_monte_carlo(mu, log_var, draws, rng):
    """log q(z) - log p(z) averaged over z ~ q."""
    s = np.exp(0.5 * log_var)
    z = rng.normal(mu, s, draws)
    return float(np.mean(stats.norm.logpdf(z, mu, s) - stats.norm.logpdf(z)))


def test_c2_kl_vs_monte_carlo(report):
    rng = np.random.default_rng(2024)
    pairs = rng.uniform(-1.5, 1.5, (50, 2))
    worst = 0.0
    for mu, lv in pairs:
        oracle = kl_monte_carlo(mu, lv, 1_000_000, rng)
        value = kl_normal(LatentStats(T.Tensor(np.array([[mu]])), T.Tensor(np.array([[lv]])))).item()
        worst = max(worst, abs(value - oracle))
    zero = kl_normal(LatentStats(T.Tensor(np.zeros((4, 8))), T.Tensor(np.zeros((4, 8))))).item()
    ok = worst <= 1e-2 and zero == 0.0
    assert report("C2 KL vs 1e6-draw Monte Carlo", ok, f"worst |diff| {worst:.2e} over 50 pairs, KL at prior {zero!r}")


def test_c3_adjoint_identity(report):
    rng = np.random.default_rng(3)
    worst = 0.0
    for _ in range(100):
        cin, cout, k, stride = rng.integers(1, 5), rng.integers(1, 5), rng.integers(1, 4), rng.integers(1, 3)
        # extent > k: with a 1-wide axis a stride-2 window can see only padding and both sides are 0
        size = tuple(int(v) for v in rng.integers(k + 1, 10, 3))
        x = rng.normal(size=(int(rng.integers(1, 3)), cin, *size))
        w = rng.normal(size=(cout, cin, k, k, k))
        fwd = T.conv3(T.Tensor(x), T.Tensor(w), T.Tensor(np.zeros(cout)), int(stride), 1).data
        y = rng.normal(size=fwd.shape)
        back = T._conv3t_raw(y, w, int(stride), 1, size)
        lhs, rhs = np.vdot(fwd, y), np.vdot(x, back)
        assert lhs != 0.0
        worst = max(worst, abs(lhs - rhs) / abs(lhs))
    assert report("C3 conv adjoint identity", worst <= 1e-6, f"worst relative gap {worst:.2e} over 100 shapes")


# ---------------------------------------------------------------------------
# 4-8: desk-scale training and sampling

def test_c4_warmup_schedule(desk_split, report):
    ckpt, history, _ = desk_model(desk_split, 0)
    target = TrainConfig().resolved_beta(ModelConfig.desk())
    betas = history.column("beta")
    ok = len(betas) > 10 and all(b == 0.0 for b in betas[:10]) and all(b == target for b in betas[10:])
    assert report("C4 beta warm-up", ok, f"betas epochs 0-10 {betas[:11]}, target {target:g}, {len(betas)} epochs")


def test_c5_desk_training(desk_split, report):
    ckpt, history, elapsed = desk_model(desk_split, 0)
    rec = history.column("train_rec")
    assert len(desk_split[0]) == 1500
    ok = elapsed < 15 * 60 and rec[-1] < 0.5 * rec[1]
    detail = f"{elapsed:.0f}s (limit 900s), train_rec epoch 1 {rec[1]:.5f} -> final {rec[-1]:.5f} (ratio {rec[-1] / rec[1]:.3f})"
    assert report("C5 desk training 1,500 cubes 40 epochs", ok, detail)


@pytest.mark.parametrize("seed", DESK_SEEDS)
def test_c6_sigma_monotone(desk_split, report, seed):
    ckpt, _, _ = desk_model(desk_split, seed)
    fields = sigma_sweep(ckpt)
    means = [float(fields[s].mean(dtype=np.float64)) for s in SIGMA_GRID]
    rho = stats.spearmanr(SIGMA_GRID, means)[0]
    ok = all(a < b for a, b in zip(means, means[1:])) and rho == 1.0
    detail = f"means {np.round(means, 3).tolist()} Spearman {rho:.3f}"
    assert report(f"C6 sigma-monotone batch means (seed {seed})", ok, detail)


def test_c7_extreme_divergence(desk_split, report):
    ckpt, _, _ = desk_model(desk_split, 0)
    _, test_set = desk_split
    fields = sigma_sweep(ckpt)
    top = reference_extremes(test_set, ExtremeRefSpec(0.1, "top")).values
    bottom = reference_extremes(test_set, ExtremeRefSpec(0.1, "bottom")).values
    verdicts, parts = [], []
    for sigma, near, far, label in ((1.3, top, bottom, "top"), (0.3, bottom, top, "bottom")):
        d_near = qq_divergence(qq_curve(fields[sigma], near))
        d_far = qq_divergence(qq_curve(fields[sigma], far))
        margin = d_far - d_near
        verdicts.append(d_near < d_far and margin >= 0.1 * max(d_near, d_far))
        parts.append(f"sigma {sigma}: to {label} {d_near:.2f} vs other {d_far:.2f}")
    assert report("C7 extreme-regime divergence", all(verdicts), "; ".join(parts))


def test_c8_bulk_divergence(desk_split, report):
    ckpt, _, _ = desk_model(desk_split, 0)
    _, test_set = desk_split
    unit = synthesize(ckpt, SamplerConfig(sigma=1.0, n=N_SYNTH, seed=7)).fields
    p90 = float(quantiles(test_set.values, [0.9])[0])
    cut = prob_at_value(test_set.values, p90)
    div = qq_divergence(qq_curve(test_set.values, unit), cut)
    ok = div <= 0.15 * p90
    assert report("C8 bulk divergence at sigma 1", ok, f"{div:.3f} mm/day vs limit {0.15 * p90:.3f} (p90 {p90:.2f}, probs <= {cut:.4f})")


def test_sampler_example_unit_mean(desk_split, report):
    ckpt, _, _ = desk_model(desk_split, 0)
    train_set, _ = desk_split
    fields = sigma_sweep(ckpt)
    train_mean = float(np.expm1(train_set.values.astype(np.float64) * train_set.norm.scale).mean())
    unit = float(fields[1.0].mean(dtype=np.float64))
    ok = abs(unit - train_mean) <= 0.25 * train_mean and fields[0.3].mean() < fields[1.3].mean()
    detail = f"sigma 1 mean {unit:.3f} vs train {train_mean:.3f} (+-25%), sigma 0.3 {fields[0.3].mean():.3f} < 1.3 {fields[1.3].mean():.3f}"
    assert report("Sampler example: sigma 1 near training mean", ok, detail)


# ---------------------------------------------------------------------------
# 9-10: reproducibility and data plumbing

def pipeline_bytes(root):
    """gen-data -> prepare -> train -> synth -> eval qq, returning every output's bytes."""
    root.mkdir()
    steps = [
        ["gen-data", "--out", str(root / "g.wxgrid"), "--seed", "5", "--days", "730"],
        ["prepare", "--grid", str(root / "g.wxgrid"), "--out-train", str(root / "train.wxcube"),
         "--out-test", str(root / "test.wxcube"), "--window", "8", "--resize", "8", "8", "--samples", "120"],
        ["train", "--data", str(root / "train.wxcube"), "--out", str(root / "m.wxvae"), "--history", str(root / "h.csv"),
         "--epochs", "3", "--warmup", "1", "--latent", "4", "--conv-channels", "4", "--bottleneck", "16",
         "--decoder-channels", "8"],
        ["synth", "--checkpoint", str(root / "m.wxvae"), "--out", str(root / "s.wxcube"), "--sigma", "1.3", "--n", "32"],
        ["eval", "qq", "--a", str(root / "test.wxcube"), "--b", str(root / "s.wxcube"), "--out", str(root / "q.csv")],
    ]
    for argv in steps:
        assert run(argv) == 0, argv
    return {name: (root / name).read_bytes() for name in ("h.csv", "m.wxvae", "s.wxcube", "q.csv")}


def test_c9_bitwise_reproducible(tmp_path, report):
    first = pipeline_bytes(tmp_path / "a")
    second = pipeline_bytes(tmp_path / "b")
    same = {name: first[name] == second[name] for name in first}
    rows = list(csv.DictReader((tmp_path / "a" / "h.csv").open()))
    ok = all(same.values()) and len(rows) == 3
    assert report("C9 bitwise reproducibility", ok, ", ".join(f"{k} {'identical' if v else 'DIFFERS'}" for k, v in same.items()))


def test_c10_default_split(report):
    series = gen_synthetic_monsoon(MonsoonGenConfig(days=3650, height=32, width=32, seed=1))
    plan = plan_windows(series)
    train_idx, test_idx = split_indices(len(plan), 0.2, 1)
    union = np.union1d(train_idx, test_idx)
    disjoint = np.intersect1d(train_idx, test_idx).size == 0
    exhaustive = union.size == len(plan) and (union == np.arange(len(plan))).all()
    # extract one chunk per side to confirm the cube extent without holding 18,000 cubes
    shapes = {extract_windows(series, plan.subset(idx[:64]), (32, 32)).shape[1:] for idx in (train_idx, test_idx)}
    ok = (len(plan), train_idx.size, test_idx.size) == (18_000, 14_400, 3_600) and disjoint and exhaustive
    ok = ok and shapes == {(32, 32, 32)}
    detail = f"{len(plan)} cubes -> {train_idx.size}/{test_idx.size}, disjoint {disjoint}, exhaustive {exhaustive}, extent {shapes}"
    assert report("C10 default cube split", ok, detail)
