"""End-to-end acceptance checks, one test per criterion.

Each test appends a PASS/FAIL line to the session report printed in the
terminal summary, then asserts. The transfer experiments share one set of
trained models (cached under tests/.cache) and one comparison run.
"""

import time
from itertools import permutations

import numpy as np
import pytest

from conftest import ACCEPTANCE_LINES
from saat import cli, harness
from saat import statalign as sa
from saat.attack import AttackConfig
from saat.models import accuracy
from saat.tensor import grad_check

pytestmark = pytest.mark.slow

BENCHES = []


def report(n, name, ok, detail):
    line = f"[{n}] {'PASS' if ok else 'FAIL'}  {name}: {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line, flush=True)
    return ok


# 1 -------------------------------------------------------------------------------------------------

def test_1_gradient_suite():
    t0 = time.perf_counter()
    rng = np.random.default_rng(101)
    worst = {}
    for _ in range(12):
        S, T = rng.normal(size=(4, 6)), rng.normal(size=(4, 6))
        sigma2 = float(sa.paa_bandwidth(S, T)[0])
        fns = {
            "paa_linear": lambda t: sa.paa_loss(t, T, sa.KernelSpec("linear")),
            "paa_poly": lambda t: sa.paa_loss(t, T, sa.KernelSpec("polynomial", c=0.0, d=2)),
            "paa_gauss": lambda t: sa.paa_loss(t, T, sa.KernelSpec("gaussian", sigma2=sigma2)),
            "gaa": lambda t: sa.gaa_loss(t, T),
            "euclid": lambda t: sa.euclid_loss(t, T),
        }
        for name, f in fns.items():
            worst[name] = max(worst.get(name, 0.0), grad_check(f, S))
    elapsed = time.perf_counter() - t0
    err = max(worst.values())
    ok = err <= 1e-4 and elapsed < 30
    detail = ", ".join(f"{k}={v:.1e}" for k, v in worst.items())
    report(1, "gradient suite", ok, f"max rel err {err:.2e} on 12 maps ({detail}); {elapsed:.1f}s")
    assert ok


# 2 -------------------------------------------------------------------------------------------------

def test_2_permutation_invariance():
    rng = np.random.default_rng(202)
    kernels = [sa.KernelSpec("linear"), sa.KernelSpec("polynomial", c=0.0, d=2), sa.KernelSpec("gaussian")]
    worst, euclid_best = 0.0, 0.0
    for _ in range(20):
        S, T = rng.normal(size=(8, 16)), rng.normal(size=(8, 16))
        ps, pt = rng.permutation(16), rng.permutation(16)
        for k in kernels:
            worst = max(worst, abs(sa.paa_loss(S[:, ps], T[:, pt], k).item() - sa.paa_loss(S, T, k).item()))
        worst = max(worst, abs(sa.gaa_loss(S[:, ps], T[:, pt]).item() - sa.gaa_loss(S, T).item()))
        if not np.array_equal(ps, np.arange(16)):
            euclid_best = max(euclid_best, sa.euclid_loss(S, S[:, ps]).item())
    ok = worst <= 1e-9 and euclid_best > 1e-3
    report(2, "permutation invariance", ok, f"max PAA/GAA change {worst:.1e}; euclid vs permuted copy {euclid_best:.3g}")
    assert ok


# 3 -------------------------------------------------------------------------------------------------

def test_3_linear_closed_form():
    rng = np.random.default_rng(303)
    lin = sa.KernelSpec("linear")
    worst, minimum, equal_zero = 0.0, np.inf, True
    for _ in range(100):
        m, n, d = rng.integers(1, 12), rng.integers(1, 12), rng.integers(1, 6)
        S, T = rng.normal(size=(m, d)), rng.normal(size=(n, d))
        closed = np.sum((S.mean(0) - T.mean(0)) ** 2)
        for method in ("auto", "pairs"):
            val = sa.mmd2_biased(S, T, lin, method=method).item()
            worst = max(worst, abs(val - closed))
            minimum = min(minimum, val)
        equal_zero &= sa.mmd2_biased(S, S.copy(), lin).item() == 0.0
    ok = worst <= 1e-9 and equal_zero and minimum >= -1e-12
    report(3, "linear closed form", ok, f"max |mmd2 - |mean diff|^2| {worst:.1e}; S==T exact zero: {equal_zero}; min {minimum:.2e}")
    assert ok


# 4 -------------------------------------------------------------------------------------------------

def u_statistic_variance(delta, cov_p, cov_q, m, n):
    """Variance of the unbiased two-sample MMD^2 U-statistic with a linear kernel."""
    return (4 * delta @ (cov_p / m + cov_q / n) @ delta
            + 2 * np.trace(cov_p @ cov_p) / (m * (m - 1)) + 2 * np.trace(cov_q @ cov_q) / (n * (n - 1))
            + 4 * np.trace(cov_p @ cov_q) / (m * n))


def test_4_linear_time_estimator():
    t0 = time.perf_counter()
    draw = np.random.default_rng(404)
    mu_p, mu_q = np.array([0.0, 0.0]), np.array([1.0, 0.5])
    cov_p, cov_q = np.eye(2), np.array([[1.0, 0.3], [0.3, 0.5]])
    S = draw.multivariate_normal(mu_p, cov_p, size=200)
    T = draw.multivariate_normal(mu_q, cov_q, size=200)
    shuffle = np.random.default_rng(405)
    lin = sa.KernelSpec("linear")
    vals = np.array([sa.mmd2_linear_time(S, T, lin, shuffle).item() for _ in range(1000)])
    elapsed = time.perf_counter() - t0
    analytic = float(np.sum((mu_p - mu_q) ** 2))
    mc_se = vals.std(ddof=1) / np.sqrt(len(vals))
    total_se = np.sqrt(mc_se ** 2 + u_statistic_variance(mu_p - mu_q, cov_p, cov_q, 200, 200))
    # exact reshuffle expectation for these draws: the unbiased U-statistic
    gs, gt = S @ S.T, T @ T.T
    u_exact = ((gs.sum() - np.trace(gs)) / (200 * 199) + (gt.sum() - np.trace(gt)) / (200 * 199)
               - 2 * S.mean(0) @ T.mean(0))
    mean = vals.mean()
    ok = abs(mean - analytic) <= 3 * total_se and abs(mean - u_exact) <= 3 * mc_se and elapsed < 60
    report(4, "linear-time estimator", ok,
           f"mean {mean:.4f} vs analytic {analytic:.4f} (3 SE = {3 * total_se:.4f}); "
           f"vs exact reshuffle expectation {u_exact:.4f} (3 MC SE = {3 * mc_se:.4f}); {elapsed:.1f}s")
    assert ok


# 6, 7, 8 share one experiment ---------------------------------------------------------------------------

EPS, ITERS, N_IMAGES, N_SELECT, SEEDS = 0.07, 20, 300, 100, (0, 1, 2)


@pytest.fixture(scope="module")
def experiment(full_world):
    w = full_world
    ok_idx = harness.correct_by_all(w.models.values(), w.test.images, w.test.labels)
    assert len(ok_idx) >= N_IMAGES + N_SELECT
    pool = harness.GalleryPool(w.train.images, w.train.labels, k=20)
    ev, sel = ok_idx[:N_IMAGES], ok_idx[N_IMAGES:N_IMAGES + N_SELECT]
    bench = harness.Bench(w.models, w.test.images[ev], w.test.labels[ev], pool, ev)
    selection = harness.Bench(w.models, w.test.images[sel], w.test.labels[sel], pool, sel)
    BENCHES.extend([bench, selection])
    cfg = AttackConfig(epsilon=EPS, iters=ITERS, label_mode="random")
    t0 = time.perf_counter()
    cmp = harness.compare_methods(bench, selection, ["paa_p", "gaa", "euclid"], cfg, seeds=SEEDS)
    return {"world": w, "bench": bench, "cmp": cmp, "cfg": cfg, "seconds": time.perf_counter() - t0}


def test_6_trend_replication(experiment):
    w, cmp = experiment["world"], experiment["cmp"]
    train_acc = {n: accuracy(m, w.train.images, w.train.labels) for n, m in w.models.items()}
    pairs = list(permutations(w.models, 2))
    wins, lines = 0, []
    for white, black in pairs:
        p, g, e = (cmp.mean_tsuc(white, black, l) for l in ("paa_p", "gaa", "euclid"))
        win = p > e and g > e
        wins += win
        lines.append(f"{white}->{black} paa_p {p:.1f} gaa {g:.1f} euclid {e:.1f}{' *' if win else ''}")
    for line in lines:
        print("   ", line)
    print("    best taps:", cmp.best_taps)
    acc_ok = all(a >= 0.95 for a in train_acc.values())
    ok = acc_ok and wins >= 4 and experiment["seconds"] < 1800
    report(6, "trend replication", ok,
           f"PAA_p and GAA beat Euclid on {wins}/6 ordered pairs (need 4); train acc "
           + ", ".join(f"{k}={v:.3f}" for k, v in train_acc.items()) + f"; {experiment['seconds']:.0f}s")
    assert ok


def test_7_rank_trend(experiment):
    bench, cmp, cfg = experiment["bench"], experiment["cmp"], experiment["cfg"]
    ranks = [2, 4, 6, 8, 10]
    per_rank = {r: [] for r in ranks}
    for white in bench.models:
        tap = cmp.best_taps[white]["paa_p"]
        res = harness.rank_sweep(bench, white, cfg.with_(loss="paa_p", tap=tap), ranks, SEEDS)
        for black in bench.blacks(white):
            for r in ranks:
                per_rank[r].append(res.mean(black, r))
    means = [float(np.mean(per_rank[r])) for r in ranks]
    rises = [b - a for a, b in zip(means, means[1:]) if b > a]
    ok = len(rises) == 0 or (len(rises) == 1 and rises[0] <= 1.0)
    report(7, "rank trend", ok, "mean black-box tSuc by rank " +
           ", ".join(f"{r}:{m:.2f}" for r, m in zip(ranks, means)) + f"; inversions {[round(x, 2) for x in rises]}")
    assert ok


def test_8_own_loss_reduction(experiment):
    red = experiment["bench"].reductions
    frac = {l: red[l][0] / red[l][1] for l in ("paa_p", "gaa")}
    ok = all(f >= 0.9 for f in frac.values())
    report(8, "own-loss reduction", ok, ", ".join(f"{l} {f:.1%} of {red[l][1]} attacked images" for l, f in frac.items()))
    assert ok


# 5 (collected over every attack above) ---------------------------------------------------------------------

def test_5_constraint_compliance(experiment):
    attacked = sum(b.attacks_run for b in BENCHES)
    violations = sum(b.violations for b in BENCHES)
    ok = attacked > 0 and violations == 0
    report(5, "constraint compliance", ok, f"{violations} violations over {attacked} adversarial images")
    assert ok


# 9 ------------------------------------------------------------------------------------------------------------

def test_9_determinism(full_world, tmp_path):
    imgs, lbls = full_world.paths("test")
    gimgs, glbls = full_world.paths("train")
    base = ["attack", "--dataset-images", imgs, "--dataset-labels", lbls, "--gallery-images", gimgs,
            "--gallery-labels", glbls, "--checkpoint-dir", str(full_world.ckpt_dir), "--n-images", "40",
            "--n-seeds", "2", "--loss", "gaa", "--tap", "2"]
    assert cli.main(base + ["--out", str(tmp_path / "a")]) == 0
    assert cli.main(base + ["--out", str(tmp_path / "b")]) == 0
    assert cli.main(["attack", "--config", str(tmp_path / "a" / "config.txt"), "--out", str(tmp_path / "c")]) == 0
    a, b, c = ((tmp_path / d / "results.csv").read_bytes() for d in "abc")
    ok = a == b == c and len(a.splitlines()) == 1 + 2 * 3 * 3
    report(9, "determinism", ok, f"two identical runs and a rerun from the saved config give byte-identical CSV ({len(a)} bytes)")
    assert ok
