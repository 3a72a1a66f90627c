"""End-to-end acceptance checks.

Each test records one ``criterion N: PASS|FAIL ...`` line; the lines are
echoed at the end of the pytest run (see conftest.py) and printed directly
when this file is run as a script.
"""

import math
import time

import numpy as np
import pytest
from scipy import stats

from lestab import influence as I
from lestab import models as M
from lestab import report as R
from lestab import sgdprobe as P
from lestab import stability as S
from lestab.data import Dataset, gen_blobs, gen_linear_gaussian, gen_two_cluster

RESULTS: dict[int, str] = {}


def record(n, ok, detail):
    line = f"criterion {n}: {'PASS' if ok else 'FAIL'}  {detail}"
    RESULTS[n] = line
    print(line)
    return ok


# ------------------------------------------------------------------- 1

def test_c1_influence_vs_exact_loo():
    t0 = time.perf_counter()
    train = gen_linear_gaussian(5, 200, 0)
    test = gen_linear_gaussian(5, 200, 1000, w_seed=0)
    s = I.validate_if_vs_loo(train, test, 1e-2, 100, seed=0)
    dt = time.perf_counter() - t0
    ok = s["median_rel_err"] <= 0.05 and s["max_rel_err"] <= 0.25 and dt < 10
    assert record(1, ok, f"median={s['median_rel_err']:.4f} (<=0.05) "
                         f"max={s['max_rel_err']:.4f} (<=0.25) pairs={s['pairs']} "
                         f"time={dt:.2f}s (<10s)")


# ------------------------------------------------------------------- 2

def test_c2_kernel_dominance():
    lam, kern, spec = 0.05, M.bilinear(), M.squared_loss()
    total = held = 0
    worst = 0.0
    for fx in range(4):
        rng = np.random.default_rng(fx)
        ds = Dataset(rng.uniform(-1, 1, size=(50, 3)), rng.uniform(-1, 1, size=50))
        zs = Dataset(rng.uniform(-1, 1, size=(50, 3)), rng.uniform(-1, 1, size=50))
        k_tr, k_te = kern.kappa(ds.X), kern.kappa(zs.X)
        B = max(ds.label_bound, zs.label_bound)
        # lam ||f||_K^2 <= objective at f = 0 <= B^2 bounds every |f(x)| by kappa(x) B / sqrt(lam)
        F = max(k_tr.max(), k_te.max()) * B / math.sqrt(lam)
        sigma = M.squared_loss_sigma(F, B)
        tr = M.kernel_ridge_trainer(kern, lam)
        full = tr(ds)
        for _ in range(50):
            i, j = int(rng.integers(50)), int(rng.integers(50))
            exact = I.exact_loo_delta(ds, i, (zs.X[j], zs.y[j]), tr, spec, full_model=full)
            bound = S.kernel_beta(sigma, k_tr[i], k_te[j], lam, ds.m)
            total += 1
            held += exact <= bound + 1e-9
            worst = max(worst, exact / bound if bound > 0 else 0.0)
    assert record(2, held == total, f"{held}/{total} pairs below the kernel bound "
                                    f"(max exact/bound={worst:.3g})")


# ------------------------------------------------------------------- 3

def test_c3_bound_formulas_hand_values():
    e = math.e
    cases = {
        "locally_elastic": (S.bound_locally_elastic(1, 1, 100, 2 / e ** 2, eta=1), 1.62),
        "uniform": (S.bound_uniform(1, 1, 2, 1 / e), 3.5),
        "hypothesis": (S.bound_hypothesis(0, 1, 1, 0.5), 1.0),
        "kernel_beta": (S.kernel_beta(1, 2, 3, 0.5, 12), 0.5),
        "B1": (S.svm_bounds(2.0, 0.5, 0.25, 0.3, 64, 0.1)[0],
               4 / 16 + 32.3 * math.sqrt(math.log(10) / 128)),
        "B2": (S.svm_bounds(2.0, 0.5, 0.25, 0.3, 64, 0.1)[1],
               1 / 16 + 12.6 * math.sqrt(2 * math.log(20) / 64)),
        "B3": (S.rls_bounds(1, 1, 1, 1, 100, 1 / e)[0], 0.04 + 9 * math.sqrt(1 / 200)),
        "B4": (S.rls_bounds(1, 1, 1, 1, 100, 1 / e)[1],
               0.04 + 14 * math.sqrt(2 * math.log(2 * e) / 100)),
        "sgd_convex": (S.sgd_beta_convex(1, 1, 1, 2, 4), 1.0),
        "sgd_strongly_convex": (S.sgd_beta_strongly_convex(1, 1, 1, 0.5, 4), 1.0),
        "sgd_nonconvex": (S.sgd_beta_nonconvex(1, 1, 1, 1, 1, 8, 5), 2.0),
    }
    bad = [k for k, (got, want) in cases.items() if not math.isclose(got, want, rel_tol=1e-12)]
    assert record(3, not bad, f"{len(cases) - len(bad)}/{len(cases)} formulas at 1e-12 relative"
                              + (f" (off: {', '.join(bad)})" if bad else ""))


# ------------------------------------------------------------------- 4

def _radial_sample(Bp, k, n, d, seed):
    rng = np.random.default_rng(seed)
    u = rng.normal(size=(n, d))
    u /= np.linalg.norm(u, axis=1, keepdims=True)
    return u * (Bp * rng.uniform(size=n) ** k)[:, None]


def test_c4_kernel_example_dominance():
    Bp, lam, B, m, delta = 1.0, 0.01, 0.05, 1000, 0.1
    # ||x|| = B' U^k: kappa = B', E kappa = B'/(k+1), P(||x|| <= r) = (r/B')^(1/k)
    k44, k45 = 50, 10
    conc44 = (1 / 6) ** (1 / k44)
    conc45 = (1 / 4) ** (1 / k45)
    pre = (conc44 >= 23 / 24 and Bp ** 2 >= 8 * math.sqrt(2) * B * lam
           and conc45 >= 3 / 4 and Bp ** 4 >= lam and Bp ** 2 >= 100 * B * lam)
    b1, b2 = S.svm_bounds(Bp, Bp / (k44 + 1), lam, B, m, delta)
    b3, b4 = S.rls_bounds(Bp, Bp / (k45 + 1), lam, B, m, delta)
    X44 = _radial_sample(Bp, k44, 20000, 5, 0)
    X45 = _radial_sample(Bp, k45, 20000, 5, 1)
    s1, s2 = S.svm_bounds(*S.kernel_constants(X44), lam, B, m, delta)
    s3, s4 = S.rls_bounds(*S.kernel_constants(X45), lam, B, m, delta)
    p1, p2 = S.svm_bounds(*S.kernel_constants(X44, "squared"), lam, B, m, delta)
    p3, p4 = S.rls_bounds(*S.kernel_constants(X45, "squared"), lam, B, m, delta)
    ok = pre and b2 < b1 and b4 < b3 and b2 / b1 < 0.5 and s2 < s1 and s4 < s3
    assert record(4, ok, f"B2/B1={b2 / b1:.3f} (<0.5) B4/B3={b4 / b3:.3f} (<1); "
                         f"sampled: {s2 / s1:.3f}, {s4 / s3:.3f}; "
                         f"squared-norm kappa: {p2 / p1:.3f}, {p4 / p3:.3f}")


# ------------------------------------------------------------------- 5

def test_c5_nonconvex_sgd_b5_b6():
    E = R.toy_E_L_pow(1 / 3)
    Lp = M.TOY_LIPSCHITZ ** (1 / 3)
    ineq = E < 0.99 * Lp
    # eta_t = 0.2 / t satisfies the eta_t <= 1/t choice; c = 1 needs a concentrated z (below)
    r = R.toy_b5_b6(10 ** 4, 1000, 0.1, k=1, c=0.2)
    uni_c1 = R.toy_b5_b6(10 ** 4, 1000, 0.1, k=1, c=1.0)
    conc_c1 = R.toy_b5_b6(10 ** 4, 1000, 0.1, k=4, c=1.0)
    ok = ineq and r["B6"] < 0.99 * r["B5"]
    assert record(5, ok, f"E[L(z)^(1/3)]={E:.4f} < L^(1/3)={Lp:.4f}; uniform z, c=0.2, "
                         f"T=1e4, m=1000: B6/B5={r['B6'] / r['B5']:.3f} (<0.99); "
                         f"info c=1: uniform {uni_c1['B6'] / uni_c1['B5']:.3f}, "
                         f"z=U^4 {conc_c1['B6'] / conc_c1['B5']:.3f}")


# ------------------------------------------------------------------- 6

def test_c6_coupled_sampler():
    m, i, n = 10, 3, 10 ** 6
    a, b = P.coupled_indices(m, i, np.random.default_rng(0), n)
    ca, cb = np.bincount(a, minlength=m), np.bincount(b, minlength=m)
    za = np.abs(ca / n - 1 / m) / math.sqrt((1 / m) * (1 - 1 / m) / n)
    pb = 1 / (m - 1)
    zb = np.abs(np.delete(cb, i) / n - pb) / math.sqrt(pb * (1 - pb) / n)
    pa_chi = stats.chisquare(ca).pvalue
    pb_chi = stats.chisquare(np.delete(cb, i)).pvalue
    coincide = bool(np.all(a[a != i] == b[a != i]))
    ok = za.max() <= 4 and zb.max() <= 4 and cb[i] == 0 and min(pa_chi, pb_chi) > 1e-3 and coincide
    assert record(6, ok, f"max z: S {za.max():.2f}, S\\i {zb.max():.2f} (<=4); "
                         f"chi2 p: {pa_chi:.3f}, {pb_chi:.3f} (>0.001)")


# ------------------------------------------------------------------- 7

def test_c7_sgd_envelopes():
    ds = gen_two_cluster(5, 50, 0)
    mu = 0.5
    t0 = time.perf_counter()
    sc_cfg = P.SGDConfig(T=200, eta=1 / P.linear_smoothness(ds, mu), l2=mu, projection_radius=2.0)
    sc = P.strongly_convex_envelope(ds, 3, sc_cfg, 500)
    t_sc = time.perf_counter() - t0
    t0 = time.perf_counter()
    cv_cfg = P.SGDConfig(T=200, eta=0.5 / P.linear_smoothness(ds))
    cv = P.convex_envelope(ds, 3, cv_cfg, 500, probe=(np.full(5, 0.3), 1.0))
    t_cv = time.perf_counter() - t0
    ok = sc["holds"] and cv["holds"] and t_sc < 120 and t_cv < 120
    assert record(7, ok, f"strongly convex: mean delta_T={sc['mean_delta_T']:.4g} <= "
                         f"{sc['bound']:.4g} + 3*{sc['stderr']:.2g} ({t_sc:.1f}s); "
                         f"convex: mean gap={cv['mean_gap']:.4g} <= {cv['bound']:.4g} "
                         f"+ 3*{cv['stderr']:.2g} ({t_cv:.1f}s)")


# ------------------------------------------------------------------- 8

@pytest.mark.slow
def test_c8_two_layer_ratio():
    t0 = time.perf_counter()
    train = gen_two_cluster(10, 2000, 0)
    test = gen_two_cluster(10, 100, 1000)
    model = M.train_two_layer(train, 50, 1e-6, epochs=50, lr=1.0, batch=100, seed=0)
    spec = M.squared_loss()
    ctx = I.build_hessian(model, spec, train, solver="dense")
    sub = train.subset(np.arange(100))
    recs = I.records_from_values(I.pairwise_values(model, spec, ctx, sub, test), sub, test)
    s = R.stability_summary(recs, train.m)
    dt = time.perf_counter() - t0
    ok = s.ratio >= 10 and dt < 300
    assert record(8, ok, f"M_beta={s.M_beta_hat:.4g} sup_E_beta={s.sup_E_beta_hat:.4g} "
                         f"ratio={s.ratio:.2f} (>=10) damping={ctx.damping:g} time={dt:.1f}s")


# ------------------------------------------------------------------- 9

def test_c9_diagonal_structure():
    train = gen_blobs(10, 10, 20, 0.5, 0)
    test = gen_blobs(10, 10, 10, 0.5, 1000)
    model = M.train_softmax_head(train, 64, 1e-3, seed=0)
    spec = M.softmax_xent_loss()
    ctx = I.build_hessian(model, spec, train)
    cm = R.class_matrix(I.pairwise_matrix(model, spec, ctx, train, test))
    d, o = cm.diagonal_mean(), cm.off_diagonal_mean()
    assert record(9, d > 2 * o, f"diagonal mean={d:.4g} off-diagonal mean={o:.4g} "
                                f"ratio={d / o:.2f} (>2)")


# ------------------------------------------------------------------ 10

def test_c10_theorem_soundness():
    parts, ok = [], True
    for m in (1000, 4000):
        trials = [R.ridge_soundness_trial(m, 5, 1e-2, 0.05, seed) for seed in range(200)]
        frac = np.mean([t["holds"] for t in trials])
        ok &= frac >= 0.99
        parts.append(f"m={m}: {frac:.1%} (max defect/bound="
                     f"{max(t['defect'] / t['bound'] for t in trials):.3g})")
    assert record(10, ok, "; ".join(parts) + " (>=99%)")


if __name__ == "__main__":
    tests = [(k, f) for k, f in globals().items() if k.startswith("test_c") and callable(f)]
    for name, fn in sorted(tests, key=lambda kv: int(kv[0].split("_")[1][1:])):
        try:
            fn()
        except AssertionError:
            pass
