"""Aggregation of pairwise sensitivities and end-to-end pipelines.

Pipelines take a validated config (see :mod:`lestab.config`) and write
their artifacts into an output directory.  Randomized artifacts carry the
seed in their filename; every pipeline also writes a manifest JSON with the
seed, solver settings and tolerances that produced the run.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
from scipy import integrate

from . import influence as I
from . import models as M
from . import sgdprobe as P
from . import stability as St
from .data import Dataset, emit_csv, gen_blobs, gen_linear_gaussian, gen_two_cluster, load_csv
from .errors import InvalidArgument, UnsupportedOperation

TEST_SEED_OFFSET = 1000
FRESH_SEED_OFFSET = 2000


# ------------------------------------------------------- class-level matrix

@dataclass
class ClassSensitivityMatrix:
    C: np.ndarray
    classes: list
    counts: np.ndarray
    method: str

    def __post_init__(self):
        if np.any(self.C < 0):
            raise InvalidArgument("class sensitivities must be >= 0")

    @property
    def K(self) -> int:
        return len(self.classes)

    def diagonal_mean(self) -> float:
        return float(np.mean(np.diag(self.C)))

    def off_diagonal_mean(self) -> float:
        if self.K < 2:
            raise InvalidArgument("need at least two classes")
        return float(self.C[~np.eye(self.K, dtype=bool)].mean())

    def write_csv(self, path) -> Path:
        """Rows are training classes, columns test classes."""
        path = Path(path)
        with path.open("w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["train_class"] + [str(c) for c in self.classes])
            for a, c in enumerate(self.classes):
                w.writerow([str(c)] + [repr(float(v)) for v in self.C[a]])
        return path


def class_matrix(records, classes=None) -> ClassSensitivityMatrix:
    """Mean beta_hat per (train class, test class) cell."""
    records = list(records)
    if not records:
        raise InvalidArgument("no records")
    for r in records:
        if r.train_class is None or r.test_class is None:
            raise InvalidArgument(f"record ({r.train_index}, {r.test_id}) lacks a class tag")
    if classes is None:
        classes = sorted({r.train_class for r in records} | {r.test_class for r in records})
    pos = {c: k for k, c in enumerate(classes)}
    K = len(classes)
    S = np.zeros((K, K))
    N = np.zeros((K, K), dtype=np.int64)
    for r in records:
        if r.train_class not in pos or r.test_class not in pos:
            raise InvalidArgument(f"class {r.train_class}/{r.test_class} not in {classes}")
        a, b = pos[r.train_class], pos[r.test_class]
        S[a, b] += r.beta_hat
        N[a, b] += 1
    with np.errstate(invalid="ignore", divide="ignore"):
        C = np.where(N > 0, S / np.maximum(N, 1), 0.0)
    methods = {r.method for r in records}
    return ClassSensitivityMatrix(C, list(classes), N, methods.pop() if len(methods) == 1 else "mixed")


# --------------------------------------------------------- stability summary

@dataclass
class StabilitySummary:
    """Max, sup-of-mean and mean of beta over a pairwise sweep.

    With ``scaled`` the values are m * beta_m (the m-free beta).
    ``sup_E_beta_fresh`` uses held-out points z' in place of training points.
    """

    M_beta_hat: float
    sup_E_beta_hat: float
    mean_beta: float
    ratio: float
    m: int
    scaled: bool
    n_train: int
    n_test: int
    sup_E_beta_fresh: float | None = None
    M_beta_fresh: float | None = None

    def to_dict(self) -> dict:
        return asdict(self)


def _per_train_means(records):
    sums: dict[int, float] = {}
    counts: dict[int, int] = {}
    tests = set()
    for r in records:
        sums[r.train_index] = sums.get(r.train_index, 0.0) + r.beta_hat
        counts[r.train_index] = counts.get(r.train_index, 0) + 1
        tests.add(r.test_id)
    return {k: sums[k] / counts[k] for k in sums}, len(tests)


def stability_summary(records, m: int, scale: bool = True, fresh_records=None) -> StabilitySummary:
    """Table-style constants from pairwise records of beta_m estimates."""
    records = list(records)
    if not records:
        raise InvalidArgument("no records")
    f = float(m) if scale else 1.0
    means, n_test = _per_train_means(records)
    Mb = f * max(r.beta_hat for r in records)
    s = f * max(means.values())
    mean = f * float(np.mean([r.beta_hat for r in records]))
    ratio = Mb / s if s > 0 else (1.0 if Mb == 0 else math.inf)
    sf = Mf = None
    if fresh_records:
        fresh_records = list(fresh_records)
        fm, _ = _per_train_means(fresh_records)
        sf = f * max(fm.values())
        Mf = f * max(r.beta_hat for r in fresh_records)
    return StabilitySummary(Mb, s, mean, ratio, m, scale, len(means), n_test, sf, Mf)


# ------------------------------------------------------------- construction

def build_datasets(cfg: dict) -> tuple[Dataset, Dataset]:
    dc, seed = cfg["dataset"], cfg["seed"]
    g = dc["generator"]
    ts = seed + TEST_SEED_OFFSET
    if g == "two_cluster":
        return gen_two_cluster(dc["d"], dc["m"], seed), gen_two_cluster(dc["d"], dc["test_m"], ts)
    if g == "blobs":
        return (gen_blobs(dc["d"], dc["K"], dc["per_class"], dc["spread"], seed),
                gen_blobs(dc["d"], dc["K"], dc["test_per_class"], dc["spread"], ts))
    if g == "linear_gaussian":
        return (gen_linear_gaussian(dc["d"], dc["m"], seed, dc["noise"]),
                gen_linear_gaussian(dc["d"], dc["test_m"], ts, dc["noise"], w_seed=seed))
    if "path" not in dc:
        raise InvalidArgument("csv dataset needs 'path'")
    train = load_csv(dc["path"])
    test = load_csv(dc["test_path"]) if "test_path" in dc else train
    return train, test


def fresh_points(cfg: dict, n: int) -> Dataset | None:
    """Held-out draws standing in for z' outside the training set."""
    dc, seed = cfg["dataset"], cfg["seed"] + FRESH_SEED_OFFSET
    g = dc["generator"]
    if g == "two_cluster":
        return gen_two_cluster(dc["d"], n + n % 2, seed)
    if g == "blobs":
        return gen_blobs(dc["d"], dc["K"], max(1, n // dc["K"]), dc["spread"], seed)
    if g == "linear_gaussian":
        return gen_linear_gaussian(dc["d"], n, seed, dc["noise"], w_seed=cfg["seed"])
    return None


def loss_for(family: str) -> M.LossSpec:
    return M.softmax_xent_loss() if family == "softmax_head" else M.squared_loss()


def trainer_for(cfg: dict):
    """Deterministic ``fit(ds, exclude=None)`` for the configured family."""
    mc, seed = cfg["model"], cfg["seed"]
    fam, lam = mc["family"], mc["lam"]
    kern = M.bilinear() if mc["kernel"] == "bilinear" else M.rbf(mc["gamma"])
    if fam == "linear_ridge":
        return M.ridge_trainer(lam)
    if fam == "kernel_ridge":
        return M.kernel_ridge_trainer(kern, lam)
    if fam == "softmax_head":
        return M.softmax_trainer(mc["p"], lam, seed=seed)
    if fam == "two_layer":
        def fit(ds, exclude=None):
            return M.train_two_layer(ds, mc["k"], lam, epochs=mc["epochs"], lr=mc["lr"],
                                     batch=mc["batch"], seed=seed, exclude=exclude)
        return fit
    if fam == "svm_reg":
        def fit(ds, exclude=None):
            return M.train_svm_regression(ds, kern, lam, mc["tau"], iters=mc["iters"],
                                          seed=seed, exclude=exclude)
        return fit
    raise InvalidArgument(f"unknown family {fam!r}")


def _loss_for_model(cfg):
    mc = cfg["model"]
    if mc["family"] == "svm_reg":
        return M.eps_insensitive_loss(mc["tau"])
    return loss_for(mc["family"])


def _pick(rng, n, k):
    return np.sort(rng.choice(n, size=min(k, n), replace=False))


# ---------------------------------------------------------------- pipelines

def _dump(path: Path, obj) -> Path:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True, default=_jsonable) + "\n")
    return path


def _jsonable(v):
    if isinstance(v, (np.integer,)):
        return int(v)
    if isinstance(v, (np.floating,)):
        return float(v)
    if isinstance(v, np.ndarray):
        return v.tolist()
    raise TypeError(f"not serializable: {type(v)}")


def _manifest(out: Path, name: str, cfg: dict, extra: dict) -> Path:
    man = {"pipeline": name, "seed": cfg["seed"], "config": cfg, **extra}
    return _dump(out / f"manifest_{name}_seed{cfg['seed']}.json", man)


def _outdir(cfg, out=None) -> Path:
    p = Path(out if out is not None else cfg["out"])
    p.mkdir(parents=True, exist_ok=True)
    return p


def pipeline_gen(cfg: dict, out=None) -> dict:
    out = _outdir(cfg, out)
    train, test = build_datasets(cfg)
    s = cfg["seed"]
    files = {"train": str(emit_csv(train, out / f"train_seed{s}.csv")),
             "test": str(emit_csv(test, out / f"test_seed{s}.csv"))}
    _manifest(out, "gen", cfg, {"files": files})
    return files


def pipeline_train(cfg: dict, out=None) -> dict:
    out = _outdir(cfg, out)
    train, _ = build_datasets(cfg)
    model = trainer_for(cfg)(train)
    s = cfg["seed"]
    path = out / f"model_seed{s}.json"
    model.save(path)
    spec = _loss_for_model(cfg)
    obj = float(M.objective(model, spec, train)) if spec.family != "eps_insensitive" else None
    res = {"model": str(path), "objective": obj, "n_params": model.n_params}
    _manifest(out, "train", cfg, res)
    return res


def sensitivity_values(cfg: dict, model, spec, train: Dataset, tr_sub: Dataset, te_sub: Dataset,
                       tr_idx):
    sc, ic = cfg["sensitivity"], cfg["influence"]
    method = sc["method"]
    settings = {"method": method}
    if method == "influence":
        ctx = I.build_hessian(model, spec, train, damping=ic["damping"], cg_tol=ic["cg_tol"],
                              solver=ic["solver"], hessian_method=ic["hessian_method"])
        settings.update(ctx.settings())
        settings["hessian_method"] = ic["hessian_method"]
        return ctx, I.pairwise_values(model, spec, ctx, tr_sub, te_sub), settings
    if method == "stepwise":
        settings["eta_probe"] = sc["eta_probe"]
        return None, P.stepwise_values(model, spec, tr_sub, te_sub, sc["eta_probe"]), settings
    fit = trainer_for(cfg)
    base = np.asarray(M.loss(model, spec, te_sub.X, te_sub.y))
    V = np.empty((len(tr_idx), te_sub.m))
    for a, i in enumerate(tr_idx):
        loo = fit(train, exclude=int(i))
        V[a] = np.abs(np.asarray(M.loss(loo, spec, te_sub.X, te_sub.y)) - base)
    return None, V, settings


def pipeline_sensitivity(cfg: dict, out=None) -> dict:
    """Pairwise sweep, class matrix (when tagged) and stability summary."""
    out = _outdir(cfg, out)
    s = cfg["seed"]
    sc = cfg["sensitivity"]
    train, test = build_datasets(cfg)
    model = trainer_for(cfg)(train)
    spec = _loss_for_model(cfg)
    rng = np.random.default_rng(s)
    tr_idx = _pick(rng, train.m, sc["n_train"])
    te_idx = _pick(rng, test.m, sc["n_test"])
    tr_sub, te_sub = train.subset(tr_idx), test.subset(te_idx)
    ctx, V, settings = sensitivity_values(cfg, model, spec, train, tr_sub, te_sub, tr_idx)
    records = I.records_from_values(V, tr_sub, te_sub, method=sc["method"], train_ids=tr_idx,
                                    test_ids=te_idx)
    files = {"records": str(I.write_records(records, out / f"sensitivity_seed{s}.csv"))}

    fresh_records = None
    if sc["fresh"] and ctx is not None:
        fr = fresh_points(cfg, len(tr_idx))
        if fr is not None:
            Vf = I.pairwise_values(model, spec, ctx, fr, te_sub)
            fresh_records = I.records_from_values(Vf, fr, te_sub, test_ids=te_idx)
    summary = stability_summary(records, train.m, fresh_records=fresh_records)
    files["summary"] = str(_dump(out / f"summary_seed{s}.json", summary.to_dict()))
    if train.class_tag is not None and test.class_tag is not None:
        cm = class_matrix(records, classes=sorted(set(train.classes) | set(test.classes)))
        files["class_matrix"] = str(cm.write_csv(out / f"class_matrix_seed{s}.csv"))
    _manifest(out, "sensitivity", cfg, {"files": files, "settings": settings})
    return {"files": files, "summary": summary, "settings": settings}


def pipeline_validate(cfg: dict, out=None) -> dict:
    out = _outdir(cfg, out)
    if cfg["model"]["family"] != "linear_ridge":
        raise UnsupportedOperation("validate compares against closed-form ridge retraining")
    train, test = build_datasets(cfg)
    vc = cfg["validate"]
    res = I.validate_if_vs_loo(train, test, cfg["model"]["lam"], vc["sample"], seed=cfg["seed"],
                               min_delta=vc["min_delta"])
    details = res.pop("details")
    s = cfg["seed"]
    path = _dump(out / f"validate_seed{s}.json", res)
    with (out / f"validate_pairs_seed{s}.csv").open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["train_index", "test_id", "influence", "exact_loo"])
        for i, j, est, ex in details:
            w.writerow([i, j, repr(float(est)), repr(float(ex))])
    _manifest(out, "validate", cfg, {"summary": str(path), "cg_tol": cfg["influence"]["cg_tol"]})
    return res


def pipeline_bounds(cfg: dict, out=None) -> St.BoundReport:
    if "bounds" not in cfg:
        raise InvalidArgument("config has no 'bounds' section")
    out = _outdir(cfg, out)
    rep = St.evaluate_bounds(St.BoundInputs.from_dict(cfg["bounds"]))
    rep.write_json(out / "bounds.json")
    rep.write_csv(out / "bounds.csv")
    _manifest(out, "bounds", cfg, {"files": ["bounds.json", "bounds.csv"]})
    return rep


def sgd_config(cfg: dict) -> P.SGDConfig:
    g = cfg["sgd"]
    kw = {"T": g["T"], "batch": g["batch"], "seed": cfg["seed"],
          "projection_radius": g.get("projection_radius"), "l2": g["l2"]}
    if g["schedule"] == "inverse":
        return P.inverse_schedule(c=g["c"], alpha=g.get("alpha"), **kw)
    return P.SGDConfig(schedule="constant", eta=g["eta"], **kw)


def _sgd_data(cfg):
    train, _ = build_datasets(cfg)
    g = cfg["sgd"]
    if not 0 <= g["removed_index"] < train.m:
        raise InvalidArgument("removed_index out of range")
    j = g.get("probe_index")
    probe = None if j is None else (train.X[j], train.y[j])
    return train, probe


def pipeline_couple(cfg: dict, out=None) -> P.CouplingTrace:
    out = _outdir(cfg, out)
    train, probe = _sgd_data(cfg)
    sc = sgd_config(cfg)
    tr = P.coupled_run(train, cfg["sgd"]["removed_index"], cfg["sgd"]["family"], sc, probe=probe)
    s = cfg["seed"]
    tr.write_csv(out / f"trace_seed{s}.csv")
    _manifest(out, "couple", cfg, {"L": tr.L, "L_i": tr.L_i, "L_z": tr.L_z,
                                   "clamped": sc.clamped(), "delta_T": float(tr.delta[-1])})
    return tr


def pipeline_sgd(cfg: dict, out=None) -> dict:
    """Monte Carlo stability estimate, optionally checked against an SGD envelope."""
    out = _outdir(cfg, out)
    train, probe = _sgd_data(cfg)
    g = cfg["sgd"]
    sc = sgd_config(cfg)
    i = g["removed_index"]
    if g["envelope"] == "strongly_convex":
        res = P.strongly_convex_envelope(train, i, sc, g["trials"])
    elif g["envelope"] == "convex":
        res = P.convex_envelope(train, i, sc, g["trials"], probe=probe)
    else:
        z = probe if probe is not None else (train.X[i], train.y[i])
        res = P.empirical_le_stability(train, i, z, g["family"], sc, g["trials"])
    res = {**res, "clamped": sc.clamped(), "sum_eta": float(sc.step_sizes().sum())}
    _dump(out / f"sgd_seed{cfg['seed']}.json", res)
    _manifest(out, "sgd", cfg, {"result": f"sgd_seed{cfg['seed']}.json"})
    return res


# ----------------------------------------------- generalization experiments

def two_cluster_moments(d: int) -> tuple[np.ndarray, np.ndarray]:
    """E[x x^T] and E[x y] for :func:`gen_two_cluster` data (class means +-0.25, var 0.1875)."""
    Exx = 0.1875 * np.eye(d) + 0.0625 * np.ones((d, d))
    Exy = 0.25 * np.ones(d)
    return Exx, Exy


def ridge_population_risk(w, d: int) -> float:
    """Exact E (w^T x - y)^2 under the two-cluster distribution (y^2 = 1)."""
    Exx, Exy = two_cluster_moments(d)
    return float(w @ Exx @ w - 2 * w @ Exy + 1.0)


def ridge_soundness_trial(m: int, d: int, lam: float, delta: float, seed: int,
                          n_test: int = 500) -> dict:
    """One Monte Carlo dataset: defect of ridge vs the locally elastic bound.

    sup_E_beta is measured by influence estimates over all training points
    and ``n_test`` fresh test points (m-free convention); eta = sup_E_beta.
    M_l = (||w||_1 + 1)^2 bounds the loss on the cube [-1, 1]^d with |y| = 1.
    """
    train = gen_two_cluster(d, m, seed)
    test = gen_two_cluster(d, n_test, seed + TEST_SEED_OFFSET)
    model = M.train_ridge_closed_form(train, lam)
    spec = M.squared_loss()
    ctx = I.build_hessian(model, spec, train)
    V = I.pairwise_values(model, spec, ctx, train, test) * m
    s = float(V.mean(axis=1).max())
    w = model.theta
    M_l = (float(np.abs(w).sum()) + 1.0) ** 2
    emp = float(np.mean(M.loss(model, spec, train.X, train.y)))
    defect = ridge_population_risk(w, d) - emp
    bound = St.bound_locally_elastic(s, M_l, m, delta, eta=s)
    return {"defect": defect, "bound": bound, "sup_E_beta": s, "M_l": M_l,
            "holds": defect <= bound, "seed": seed}


# ------------------------------------------------------------ toy SGD model

def toy_E_L_pow(power: float, k: float = 1.0) -> float:
    """E[L(z)^power] for z = U^k, U uniform on [0, 1], by quadrature."""
    Lc = M.TOY_LIPSCHITZ
    val, _ = integrate.quad(lambda u: (Lc * u ** (2 * k)) ** power, 0.0, 1.0,
                            epsabs=1e-14, epsrel=1e-12)
    return float(val)


def toy_b5_b6(T: int, m: int, delta: float, k: float = 1.0, c: float = 1.0,
              z_max: float = 1.0) -> dict:
    """B5 and B6 for SGD on z^2 exp(-theta^2) with z = z_max * U^k."""
    alpha = M.toy_smoothness(z_max)
    L = M.TOY_LIPSCHITZ * z_max ** 2
    p = 1.0 / (alpha * c + 1.0)
    ELp = toy_E_L_pow(p, k) * z_max ** (2 * p)
    s = St.sup_E_beta_nonconvex(L, L, ELp, alpha, c, T, m)
    b5, b6 = St.sgd_bounds_b5_b6(L, s, alpha, c, T, m, delta)
    return {"B5": b5, "B6": b6, "sup_E_beta": s, "L": L, "alpha": alpha, "E_L_pow": ELp,
            "L_pow": L ** p, "T": T, "m": m, "k": k}
