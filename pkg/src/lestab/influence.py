"""Influence-function estimates of leave-one-out sensitivity.

The estimate of ``|l(theta_hat, z) - l(theta_hat_without_i, z)|`` is

    (1/m) |grad l(theta_hat, z)^T  H^{-1}  grad l(theta_hat, z_i)|

with ``H`` the Hessian of the full training objective (data term averaged
with 1/m plus regularizer) at ``theta_hat``.  :func:`exact_loo_delta`
computes the same quantity by retraining, for deterministic trainers.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Callable

import numpy as np
import scipy.linalg

from .data import Dataset
from .errors import InvalidArgument, NumericError, ParseError, UnsupportedOperation
from . import models as M

DEFAULT_DAMPING = 1e-6
DEFAULT_CG_TOL = 1e-10
NONCONVEX_FAMILIES = ("two_layer",)
METHODS = ("influence", "exact_loo", "stepwise")

Trainer = Callable[..., M.TrainedModel]


@dataclass(frozen=True)
class SensitivityRecord:
    train_index: int
    test_id: int
    beta_hat: float
    method: str = "influence"
    train_class: int | None = None
    test_class: int | None = None

    def __post_init__(self):
        if not self.beta_hat >= 0:
            raise InvalidArgument(f"beta_hat must be >= 0, got {self.beta_hat}")
        if self.method not in METHODS:
            raise InvalidArgument(f"unknown method {self.method!r}")


@dataclass(frozen=True, eq=False)
class HessianContext:
    """Damped objective Hessian plus solver settings.

    ``H`` already includes ``damping * I``.  ``solver`` is ``"cg"`` or
    ``"dense"`` (Cholesky; used for large ill-conditioned sweeps).
    """

    H: np.ndarray
    model: M.TrainedModel
    spec: M.LossSpec
    m: int
    damping: float = 0.0
    cg_tol: float = DEFAULT_CG_TOL
    cg_max_iter: int | None = None
    solver: str = "cg"

    @property
    def n_params(self) -> int:
        return self.H.shape[0]

    @property
    def max_iter(self) -> int:
        return self.cg_max_iter if self.cg_max_iter is not None else 10 * self.n_params

    def solve(self, g) -> np.ndarray:
        if self.solver == "dense":
            return dense_solve(self, g)
        return cg_solve(self, g)

    def settings(self) -> dict:
        return {"damping": self.damping, "cg_tol": self.cg_tol, "cg_max_iter": self.max_iter,
                "solver": self.solver, "n_params": self.n_params, "m": self.m}


def _influence_view(model: M.TrainedModel) -> M.TrainedModel:
    if model.family == "kernel_ridge":
        return M.primal_view(model)
    if model.family == "svm_reg":
        raise UnsupportedOperation("influence estimates need a twice-differentiable loss")
    return model


def fd_objective_hessian(model, spec, ds: Dataset, eps: float = 1e-5) -> np.ndarray:
    """Central finite differences of the full objective gradient."""
    th = model.theta
    n = th.size
    H = np.empty((n, n))
    for k in range(n):
        e = np.zeros(n)
        e[k] = eps
        H[:, k] = (M.objective_grad(model, spec, ds, th + e)
                   - M.objective_grad(model, spec, ds, th - e)) / (2 * eps)
    return H


def auto_damping(H, floor: float = DEFAULT_DAMPING) -> float:
    """Smallest power of ten >= max(floor, 2 |lambda_min(H)|)."""
    lmin = float(np.linalg.eigvalsh(0.5 * (H + H.T))[0])
    need = max(floor, -2.0 * lmin)
    return float(10.0 ** math.ceil(math.log10(need)))


def build_hessian(model: M.TrainedModel, spec: M.LossSpec, ds: Dataset,
                  damping: float | str | None = None, cg_tol: float = DEFAULT_CG_TOL,
                  cg_max_iter: int | None = None, solver: str = "cg",
                  hessian_method: str = "analytic", fd_eps: float = 1e-5) -> HessianContext:
    """Hessian of (1/m) sum_j l(theta, z_j) + penalty at the trained parameters.

    Convex families use closed forms.  ``two_layer`` is nonconvex and must
    be damped; its Hessian is the exact a.e. form or, with
    ``hessian_method="fd"``, central differences of the objective gradient.
    ``damping=None`` means 0 for convex families and ``"auto"``
    (:func:`auto_damping`) for nonconvex ones.
    """
    if spec.family == "eps_insensitive":
        raise UnsupportedOperation("the tau-insensitive loss has no Hessian")
    if hessian_method not in ("analytic", "fd"):
        raise InvalidArgument(f"unknown hessian_method {hessian_method!r}")
    view = _influence_view(model)
    nonconvex = view.family in NONCONVEX_FAMILIES
    if damping is None:
        damping = "auto" if nonconvex else 0.0
    if nonconvex:
        if damping == 0:
            raise UnsupportedOperation(f"{view.family} is nonconvex; pass damping > 0")
        if hessian_method == "fd":
            H = fd_objective_hessian(view, spec, ds, eps=fd_eps)
        else:
            H = M.two_layer_mean_hessian(view, ds.X, ds.y) + M.penalty_hessian(view)
    else:
        H = M.mean_hessian(view, spec, ds.X, ds.y) + M.penalty_hessian(view)
    H = 0.5 * (H + H.T)
    if damping == "auto":
        damping = auto_damping(H)
    elif isinstance(damping, str) or damping < 0:
        raise InvalidArgument("damping must be >= 0 or 'auto'")
    H = H + damping * np.eye(H.shape[0])
    if solver not in ("cg", "dense"):
        raise InvalidArgument(f"unknown solver {solver!r}")
    return HessianContext(H, view, spec, ds.m, float(damping), cg_tol, cg_max_iter, solver)


def cg_solve(ctx: HessianContext, g) -> np.ndarray:
    """Solve H v = g by conjugate gradients; ``g`` may be (n,) or (n, k).

    Columns are iterated independently but share matrix products.  The
    true residual is re-checked at the end and CG restarted from the
    current iterate (a few times) if round-off left it above tolerance.
    """
    H = ctx.H
    G = np.asarray(g, dtype=float)
    vec = G.ndim == 1
    G = G.reshape(H.shape[0], -1)
    X = np.zeros_like(G)
    gnorm = np.linalg.norm(G, axis=0)
    target = ctx.cg_tol * gnorm
    budget = ctx.max_iter
    R = G.copy()
    for _restart in range(4):
        P = R.copy()
        rs = np.sum(R * R, axis=0)
        active = np.sqrt(rs) > target
        while budget > 0 and active.any():
            budget -= 1
            Pa = P[:, active]
            AP = H @ Pa
            pAp = np.sum(Pa * AP, axis=0)
            if np.any(pAp <= 0):
                raise NumericError("Hessian is not positive definite (non-positive curvature)")
            alpha = rs[active] / pAp
            X[:, active] += alpha * Pa
            R[:, active] -= alpha * AP
            rs_new = np.sum(R[:, active] ** 2, axis=0)
            P[:, active] = R[:, active] + (rs_new / rs[active]) * Pa
            rs[active] = rs_new
            active = np.sqrt(rs) > target
        R = G - H @ X
        true = np.linalg.norm(R, axis=0)
        if np.all(true <= target):
            break
        if budget <= 0:
            break
    worst = np.max(np.where(gnorm > 0, true / np.where(gnorm > 0, gnorm, 1), 0.0))
    if not np.all(true <= target):
        raise NumericError("CG did not converge", residual=float(worst))
    return X[:, 0] if vec else X


def dense_solve(ctx: HessianContext, g) -> np.ndarray:
    try:
        c = scipy.linalg.cho_factor(ctx.H)
    except (np.linalg.LinAlgError, scipy.linalg.LinAlgError):
        raise NumericError("Hessian is not positive definite (Cholesky failed)") from None
    return scipy.linalg.cho_solve(c, np.asarray(g, dtype=float))


def if_sensitivity(model, spec, ctx: HessianContext, z_i, z) -> float:
    """Influence estimate of the loss change at ``z`` when ``z_i`` is removed.

    ``z_i`` and ``z`` are ``(x, y)`` pairs or :class:`~lestab.data.Example`.
    """
    view = ctx.model
    g_i = M.grad(view, spec, z_i[0], z_i[1])
    g = M.grad(view, spec, z[0], z[1])
    if not np.any(g_i) or not np.any(g):
        return 0.0
    return abs(float(g @ ctx.solve(g_i))) / ctx.m


def pairwise_values(model, spec, ctx: HessianContext, train_ds: Dataset,
                    test_ds: Dataset) -> np.ndarray:
    """Matrix of influence estimates, rows = training points, cols = test points."""
    view = ctx.model
    Gtr = np.atleast_2d(M.grad(view, spec, train_ds.X, train_ds.y))
    Gte = np.atleast_2d(M.grad(view, spec, test_ds.X, test_ds.y))
    V = ctx.solve(Gtr.T)
    return np.abs(V.reshape(view.n_params, -1).T @ Gte.T) / ctx.m


def records_from_values(values, train_ds: Dataset | None = None, test_ds: Dataset | None = None,
                        method: str = "influence", train_ids=None, test_ids=None):
    values = np.asarray(values)
    n_tr, n_te = values.shape
    train_ids = np.arange(n_tr) if train_ids is None else np.asarray(train_ids)
    test_ids = np.arange(n_te) if test_ids is None else np.asarray(test_ids)
    tr_tags = None if train_ds is None or train_ds.class_tag is None else train_ds.class_tag
    te_tags = None if test_ds is None or test_ds.class_tag is None else test_ds.class_tag
    out = []
    for a in range(n_tr):
        ca = None if tr_tags is None else int(tr_tags[a])
        for b in range(n_te):
            out.append(SensitivityRecord(int(train_ids[a]), int(test_ids[b]), float(values[a, b]),
                                         method, ca, None if te_tags is None else int(te_tags[b])))
    return out


def pairwise_matrix(model, spec, ctx: HessianContext, train_ds: Dataset, test_ds: Dataset):
    """All |train| x |test| influence records in train-major order."""
    vals = pairwise_values(model, spec, ctx, train_ds, test_ds)
    return records_from_values(vals, train_ds, test_ds)


def exact_loo_delta(ds: Dataset, i: int, z, trainer: Trainer, spec: M.LossSpec,
                    full_model: M.TrainedModel | None = None) -> float:
    """|l(A_S, z) - l(A_{S minus i}, z)| by retraining.

    ``trainer(ds, exclude=None | i)`` must be deterministic and keep the
    1/m normalization when excluding.
    """
    if not 0 <= i < ds.m:
        raise InvalidArgument(f"index {i} out of range for m={ds.m}")
    full = trainer(ds) if full_model is None else full_model
    loo = trainer(ds, exclude=i)
    return abs(M.loss(full, spec, z[0], z[1]) - M.loss(loo, spec, z[0], z[1]))


def validate_if_vs_loo(ds: Dataset, test_ds: Dataset, lam: float, sample: int,
                       seed: int = 0, min_delta: float = 1e-12) -> dict:
    """Relative error of the influence estimate against exact ridge retraining.

    Pairs (i, z) are drawn uniformly; pairs whose exact change is below
    ``min_delta`` are skipped and redrawn.
    """
    if sample < 1:
        raise InvalidArgument("sample must be >= 1")
    spec = M.squared_loss()
    trainer = M.ridge_trainer(lam)
    full = trainer(ds)
    ctx = build_hessian(full, spec, ds)
    rng = np.random.default_rng(seed)
    rel, pairs = [], []
    skipped = 0
    attempts = 0
    while len(rel) < sample and attempts < 20 * sample:
        attempts += 1
        i = int(rng.integers(ds.m))
        j = int(rng.integers(test_ds.m))
        z = (test_ds.X[j], test_ds.y[j])
        exact = exact_loo_delta(ds, i, z, trainer, spec, full_model=full)
        if exact <= min_delta:
            skipped += 1
            continue
        est = if_sensitivity(full, spec, ctx, (ds.X[i], ds.y[i]), z)
        rel.append(abs(est - exact) / exact)
        pairs.append((i, j, est, exact))
    if not rel:
        raise InvalidArgument("no eligible (i, z) pairs with non-negligible exact change")
    rel = np.array(rel)
    return {"median_rel_err": float(np.median(rel)), "max_rel_err": float(np.max(rel)),
            "mean_rel_err": float(np.mean(rel)), "pairs": len(rel), "skipped": skipped,
            "lambda": lam, "m": ds.m, "d": ds.d, "seed": seed, "details": pairs}


# --------------------------------------------------------------------- CSV IO

RECORD_FIELDS = ["train_index", "test_id", "train_class", "test_class", "beta_hat", "method"]


def write_records(records, path) -> Path:
    path = Path(path)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(RECORD_FIELDS)
        for r in records:
            w.writerow([r.train_index, r.test_id,
                        "" if r.train_class is None else r.train_class,
                        "" if r.test_class is None else r.test_class,
                        repr(float(r.beta_hat)), r.method])
    return path


def read_records(path):
    path = Path(path)
    out = []
    with path.open(newline="") as fh:
        rows = csv.reader(fh)
        header = next(rows, None)
        if header != RECORD_FIELDS:
            raise ParseError(f"expected header {','.join(RECORD_FIELDS)}", line=1)
        for lineno, row in enumerate(rows, start=2):
            if not row:
                continue
            if len(row) != len(RECORD_FIELDS):
                raise ParseError(f"expected {len(RECORD_FIELDS)} fields", line=lineno)
            try:
                out.append(SensitivityRecord(
                    int(row[0]), int(row[1]), float(row[4]), row[5],
                    int(row[2]) if row[2] != "" else None,
                    int(row[3]) if row[3] != "" else None))
            except (ValueError, InvalidArgument) as exc:
                raise ParseError(str(exc), line=lineno) from None
    return out
