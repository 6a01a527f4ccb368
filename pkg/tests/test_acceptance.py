"""Acceptance criteria, one test each; every test prints a PASS/FAIL line with its measurement.

Run with ``pytest tests/test_acceptance.py -v -s`` (the lines are also shown
without ``-s``, since printing bypasses output capture).
"""

import csv
import time

import numpy as np
import pytest
from scipy import stats

from conftest import ec_oracle, grad_and_fd, random_moe_instance, rel_err, train_gaussian_transport
from ecroute import tensor as T
from ecroute.cli import main
from ecroute.dit import PRESETS, ModelConfig, TextContext, activated_param_increment, total_param_delta
from ecroute.dit.model import block_params, dit_block, init_params
from ecroute.flow import TimestepLaw, euler_sampler, sample_t_logit_normal
from ecroute.harness import TrainConfig
from ecroute.harness.compare import run_compare
from ecroute.router import RouterConfig, capacity_of, ec_moe_layer, expert_choice_select, load_stats
from ecroute.tensor import Tensor


@pytest.fixture
def report(capsys):
    def emit(number, name, ok, detail):
        with capsys.disabled():
            print(f"\nACCEPTANCE {number:>2} [{'PASS' if ok else 'FAIL'}] {name}: {detail}")
        return ok

    return emit


# 1 -------------------------------------------------------------------------

def test_c01_routing_oracle_equivalence(report):
    rng = np.random.default_rng(2024)
    start = time.perf_counter()
    worst = 0.0
    for _ in range(200):
        s, e, d = int(rng.integers(1, 17)), int(rng.integers(1, 5)), int(rng.integers(1, 9))
        fc = float(min(rng.choice([1.0, 2.0]), e))  # C <= S requires f_c <= E
        if s * fc / e < 1:
            s = e  # keep C >= 1 without relying on the clamp
        x, p = random_moe_instance(rng, s, e, d)
        cfg = RouterConfig(e, fc, p.w1.shape[2])
        out, _ = ec_moe_layer(Tensor(x), p, cfg)
        want, _, _ = ec_oracle(x, p.w_r.data, p.w1.data, p.w2.data, capacity_of(s, fc, e))
        worst = max(worst, float(np.max(np.abs(out.data - want))))
    elapsed = time.perf_counter() - start
    ok = worst <= 1e-9 and elapsed < 10
    report(1, "routing oracle equivalence", ok, f"max |diff| {worst:.2e} (tol 1e-9), {elapsed:.2f}s (limit 10s)")
    assert ok


# 2 -------------------------------------------------------------------------

def test_c02_perfect_load_balance(report):
    rng = np.random.default_rng(7)
    start = time.perf_counter()
    bad = 0
    worst_imb = 0.0
    for _ in range(1000):
        s, e = int(rng.integers(1, 65)), int(rng.integers(1, 9))
        fc = float(rng.choice([0.5, 1.0, 2.0, 4.0]))
        c = min(capacity_of(s, fc, e), s)
        a = T.softmax(Tensor(rng.normal(size=(s, e)) * rng.uniform(0.1, 10))).data
        st = load_stats(expert_choice_select(a, c))
        bad += int(not np.all(st.expert_counts == c))
        worst_imb = max(worst_imb, st.imbalance)
    elapsed = time.perf_counter() - start
    ok = bad == 0 and worst_imb == 0.0 and elapsed < 5
    report(2, "perfect load balance", ok,
           f"{bad}/1000 decisions off-capacity, max imbalance {worst_imb} (must be exactly 0), "
           f"{elapsed:.2f}s (limit 5s)")
    assert ok


# 3 -------------------------------------------------------------------------

def _min_gap(a):
    return min(float(np.min(np.diff(np.sort(col)))) for col in a.T) if a.shape[0] > 1 else np.inf


def test_c03_sparse_block_gradients(report):
    cfg = ModelConfig(num_layers=2, hidden_dim=8, num_heads=2, num_kv_heads=1, image_size=4, channels=1,
                      num_experts=2, ffn_factor=2.0, freq_dim=8)
    names = [k for k in init_params(cfg, np.random.default_rng(0)) if k.startswith("blocks.2.")]
    rng = np.random.default_rng(11)
    start = time.perf_counter()
    worst, points, tries = 0.0, 0, 0
    while points < 20:
        tries += 1
        base = init_params(cfg, rng)
        arrays = [rng.normal(0, 0.5, base[k].shape) for k in names]
        x = rng.normal(size=(1, cfg.seq_len, cfg.hidden_dim))
        ctx = TextContext(rng.normal(size=(3, cfg.text_dim)))
        t_emb = Tensor(rng.normal(size=(1, cfg.hidden_dim)))
        weights = Tensor(rng.normal(size=x.shape))

        def f(xt, *ps):
            params = dict(zip(names, ps))
            out = dit_block(xt, ctx, t_emb, block_params(params, 2), cfg).output
            return (out * weights).sum()

        # affinity gap filter: recompute the router input at this point
        probe = {}

        def grab(xt, *ps):
            res = dit_block(xt, ctx, t_emb, block_params(dict(zip(names, ps)), 2), cfg)
            probe["a"] = res.decisions[0].affinity
            return res.output

        grab(Tensor(x), *[Tensor(a) for a in arrays])
        if _min_gap(probe["a"]) <= 1e-3:
            continue
        for ad, fd in grad_and_fd(f, [x, *arrays], max_coords=64, rng=rng):
            if np.max(np.abs(fd)) > 0:
                worst = max(worst, rel_err(ad, fd))
            else:
                worst = max(worst, float(np.max(np.abs(ad))))
        points += 1
    elapsed = time.perf_counter() - start
    ok = worst < 1e-3 and elapsed < 60
    report(3, "sparse DiT block gradients", ok,
           f"max relative error {worst:.2e} over 20 points, up to 64 coords per input ({tries - 20} rejected for gaps <= 1e-3), "
           f"tol 1e-3, {elapsed:.1f}s (limit 60s)")
    assert ok


# 4 -------------------------------------------------------------------------

def test_c04_table_arithmetic(report):
    start = time.perf_counter()
    lines, ok = [], True
    for name in ("XL", "XXL", "3XL"):
        pre = PRESETS[name]
        for e in (8, 16, 32):
            ref = pre.totals[e] - pre.dense_total
            dev = total_param_delta(pre.arch, e) / ref - 1
            ok &= abs(dev) < 0.01
            lines.append(f"{name}-{e}E total {dev:+.2%}")
    for name in ("XL", "XXL"):
        pre = PRESETS[name]
        dev = activated_param_increment(pre.arch, 8) / (pre.activated - pre.dense_total) - 1
        ok &= abs(dev) < 0.01
        lines.append(f"{name} activated {dev:+.2%}")
    pre = PRESETS["3XL"]
    act = pre.dense_total + activated_param_increment(pre.arch, 8)
    elapsed = time.perf_counter() - start
    ok &= elapsed < 1
    report(4, "parameter-table arithmetic", ok,
           "; ".join(lines) + f" (tol 1%); 3XL activated reported {act / 1e9:.3f}B vs table 5.18B "
           f"({act / 5.18e9 - 1:+.1%}, not matched); {elapsed * 1e3:.1f}ms (limit 1s)")
    assert ok


# 5 -------------------------------------------------------------------------

def test_c05_sampler_oracles(report):
    start = time.perf_counter()
    rng = np.random.default_rng(5)
    point_err = 0.0
    for steps in (1, 2, 3, 10, 50, 100, 1000):
        c = rng.normal(size=(4, 6))
        x1 = rng.normal(size=(4, 6))
        point_err = max(point_err, float(np.max(np.abs(euler_sampler(lambda x, t: x1 - c, steps, x1=x1) - c))))
    m = np.array([1.5, -0.75])
    v = train_gaussian_transport(m, seed=0)
    samples = euler_sampler(v, 50, (1024, 2), np.random.default_rng(99))
    mean_err = float(np.max(np.abs(samples.mean(axis=0) - m)))
    elapsed = time.perf_counter() - start
    ok = point_err <= 1e-12 and mean_err <= 0.05 and elapsed < 120
    report(5, "rectified-flow sampler", ok,
           f"point-mass max error {point_err:.1e} (tol 1e-12); Gaussian transport mean error {mean_err:.4f} "
           f"over 1024 samples (tol 0.05); {elapsed:.1f}s (limit 120s)")
    assert ok


# 6 -------------------------------------------------------------------------

def test_c06_logit_normal_ks(report):
    start = time.perf_counter()
    rng = np.random.default_rng(6)
    ks = {}
    for mu, sigma in ((0.0, 1.0), (0.5, 0.8)):
        t = sample_t_logit_normal(TimestepLaw(mu, sigma), rng, 100_000)
        ks[(mu, sigma)] = stats.kstest(np.log(t) - np.log1p(-t), "norm", args=(mu, sigma)).statistic
    elapsed = time.perf_counter() - start
    ok = all(v < 0.02 for v in ks.values()) and elapsed < 5
    detail = ", ".join(f"KS(mu={k[0]}, sigma={k[1]}) = {v:.4f}" for k, v in ks.items())
    report(6, "logit-normal timesteps", ok, f"{detail} (tol 0.02), {elapsed:.2f}s (limit 5s)")
    assert ok


# 7 and 8 share one comparison run -------------------------------------------

@pytest.fixture(scope="module")
def comparison(tmp_path_factory):
    out = tmp_path_factory.mktemp("compare")
    model, train = ModelConfig(), TrainConfig()
    start = time.perf_counter()
    summaries = run_compare(model, train, ["dense", "ec", "tc", "tc-noaux"], [0, 1, 2], out)
    total = time.perf_counter() - start
    rows = list(csv.DictReader(open(out / "compare.csv")))
    return {"out": out, "summaries": summaries, "rows": rows, "total_s": total, "steps": train.total_steps}


def test_c07_toy_convergence(comparison, report):
    s = comparison["summaries"]
    ratios = {m: float(np.mean([r.ratio for r in s if r.mode == m])) for m in ("dense", "ec", "tc")}
    runtime = sum(r.ms_per_step * comparison["steps"] / 1e3 for r in s if r.mode in ratios)
    ok = all(v < 0.5 for v in ratios.values()) and runtime < 15 * 60
    detail = ", ".join(f"{m} {v:.3f}" for m, v in ratios.items())
    report(7, "toy training convergence", ok,
           f"final/initial smoothed loss, 3-seed mean: {detail} (tol < 0.5); training time for the 9 runs "
           f"{runtime / 60:.1f} min (limit 15 min)")
    assert ok


def test_c08_comparison_artifact(comparison, report):
    rows = comparison["rows"]
    steps = comparison["steps"]
    keys = {(r["mode"], r["seed"], r["step"]) for r in rows}
    aligned = len(keys) == len(rows) == 4 * 3 * steps
    ec_zero = all(float(r["imbalance"]) == 0.0 for r in rows if r["mode"] == "ec")

    def tail_imbalance(mode):
        return float(np.mean([float(r["imbalance"]) for r in rows
                              if r["mode"] == mode and int(r["step"]) >= steps - 500]))

    noaux, aux = tail_imbalance("tc-noaux"), tail_imbalance("tc")
    noaux_all = float(np.mean([float(r["imbalance"]) for r in rows if r["mode"] == "tc-noaux"]))
    runtime = comparison["total_s"]
    ok = aligned and ec_zero and noaux_all > 0 and aux < noaux and runtime < 3 * 15 * 60
    report(8, "comparison artifact", ok,
           f"aligned rows {aligned}; EC imbalance identically 0: {ec_zero}; TC without aux mean imbalance "
           f"{noaux_all:.4f} (> 0); last-500 TC imbalance with aux {aux:.4f} vs without {noaux:.4f} "
           f"(must decrease); total compare runtime {runtime / 60:.1f} min (limit 45 min)")
    assert ok


# 9 -------------------------------------------------------------------------

def test_c09_heatmap_conservation(comparison, report, tmp_path):
    ckpt = comparison["out"] / "ec" / "seed0" / "checkpoints" / f"step_{comparison['steps']:06d}.ckpt"
    start = time.perf_counter()
    code = main(["heatmap", "--checkpoint", str(ckpt), "--steps", "50", "--timesteps", "40",
                 "--out", str(tmp_path), "--log-level", "WARNING"])
    elapsed = time.perf_counter() - start
    model = ModelConfig()
    cap = capacity_of(model.seq_len, model.capacity_factor, model.num_experts)
    maps = {}
    for r in csv.DictReader(open(tmp_path / "allocation.csv")):
        maps.setdefault((r["layer"], r["step"]), []).append(int(r["count"]))
    sums_ok = all(sum(c) == model.num_experts * cap for c in maps.values())
    mean_err = max(abs(np.mean(c) - model.capacity_factor) for c in maps.values())
    bound_ok = all(0 <= min(c) and max(c) <= model.num_experts for c in maps.values())
    ok = code == 0 and sums_ok and mean_err <= 1e-9 and bound_ok and elapsed < 60
    report(9, "heatmap conservation", ok,
           f"{len(maps)} maps, all sum to E*C = {model.num_experts * cap}: {sums_ok}; max |mean - f_c| "
           f"{mean_err:.1e} (tol 1e-9); counts within [0, E]: {bound_ok}; {elapsed:.1f}s (limit 60s)")
    assert ok


# 10 ------------------------------------------------------------------------

def test_c10_train_determinism(report, tmp_path):
    start = time.perf_counter()
    for d in ("a", "b"):
        assert main(["train", "--steps", "100", "--seed", "3", "--out", str(tmp_path / d), "--log-level",
                     "WARNING"]) == 0
    elapsed = time.perf_counter() - start
    same_loss = (tmp_path / "a" / "loss.csv").read_bytes() == (tmp_path / "b" / "loss.csv").read_bytes()
    ckpts = sorted(p.relative_to(tmp_path / "a") for p in (tmp_path / "a" / "checkpoints").iterdir())
    same_ckpt = bool(ckpts) and all((tmp_path / "a" / p).read_bytes() == (tmp_path / "b" / p).read_bytes()
                                    for p in ckpts)
    ok = same_loss and same_ckpt
    report(10, "training determinism", ok,
           f"loss CSVs bitwise equal: {same_loss}; {len(ckpts)} checkpoint files bitwise equal: {same_ckpt}; "
           f"two 100-step runs took {elapsed:.1f}s")
    assert ok
