"""Empirical probes of SGD stability.

Two SGD runs, one on S and one on S with example ``i`` removed, share a
single stream of random indices through a two-phase coupling: both draw the
same index unless that index is ``i``, in which case the run on the reduced
set redraws uniformly from the remaining m-1 examples.  Each marginal is
then the correct uniform law while the runs differ on only ~1/m of steps.

Supported families: ``linear`` (squared loss on w^T x, optional l2 term and
projection) and ``toy_exp`` (scalar theta, loss z^2 exp(-theta^2) with
z = x[0]).  Runs are vectorized over independent trials.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import models as M
from .data import Dataset
from .errors import InvalidArgument

FAMILIES = ("linear", "toy_exp")
TOY_THETA0 = 0.5
DEFAULT_RADIUS = 10.0


@dataclass(frozen=True)
class SGDConfig:
    """Step schedule and sampling for one SGD run.

    ``constant``: eta_t = eta.  ``inverse``: eta_t = min(c / t, cap) for
    t = 1..T.  ``batch >= m`` means deterministic full-batch gradient
    descent.  ``l2`` adds (l2 / 2) ||theta||^2 to every per-example
    training loss; evaluation losses stay unregularized.
    """

    T: int
    schedule: str = "constant"
    eta: float = 0.01
    c: float = 1.0
    cap: float = math.inf
    batch: int = 1
    seed: int = 0
    projection_radius: float | None = None
    l2: float = 0.0

    def __post_init__(self):
        if self.T < 0:
            raise InvalidArgument("T must be >= 0")
        if self.schedule not in ("constant", "inverse"):
            raise InvalidArgument(f"unknown schedule {self.schedule!r}")
        if self.schedule == "constant" and not self.eta > 0:
            raise InvalidArgument("eta must be > 0")
        if self.schedule == "inverse" and not (self.c > 0 and self.cap > 0):
            raise InvalidArgument("c and cap must be > 0")
        if self.batch < 1:
            raise InvalidArgument("batch must be >= 1")
        if self.projection_radius is not None and not self.projection_radius > 0:
            raise InvalidArgument("projection_radius must be > 0")
        if self.l2 < 0:
            raise InvalidArgument("l2 must be >= 0")

    def step_sizes(self) -> np.ndarray:
        t = np.arange(1, self.T + 1, dtype=float)
        if self.schedule == "constant":
            return np.full(self.T, self.eta)
        return np.minimum(self.c / t, self.cap)

    def clamped(self) -> bool:
        """Whether the cap binds anywhere on the inverse schedule."""
        return self.schedule == "inverse" and self.T >= 1 and self.c > self.cap

    def with_seed(self, seed: int) -> "SGDConfig":
        return SGDConfig(**{**self.__dict__, "seed": seed})


def inverse_schedule(T: int, c: float, alpha: float | None = None, **kw) -> SGDConfig:
    """Inverse schedule with the cap eta_t <= 2/alpha when ``alpha`` is given."""
    cap = math.inf if alpha is None else 2.0 / alpha
    return SGDConfig(T=T, schedule="inverse", c=c, cap=cap, **kw)


# ---------------------------------------------------------------- sampling

def coupled_indices(m: int, i: int, rng: np.random.Generator, size) -> tuple[np.ndarray, np.ndarray]:
    """Vectorized coupled draws; returns (idx_S, idx_S_minus_i) with indices into S."""
    if m < 2:
        raise InvalidArgument("coupling needs m >= 2")
    if not 0 <= i < m:
        raise InvalidArgument(f"removed index {i} out of range")
    a = rng.integers(0, m, size=size)
    alt = rng.integers(0, m - 1, size=size)
    alt = alt + (alt >= i)
    return a, np.where(a == i, alt, a)


def coupled_index_sampler(m: int, i: int, seed: int):
    """Infinite stream of coupled pairs (idx_S, idx_S_minus_i)."""
    if m < 2:
        raise InvalidArgument("coupling needs m >= 2")
    if not 0 <= i < m:
        raise InvalidArgument(f"removed index {i} out of range")
    rng = np.random.default_rng(seed)
    while True:
        a, b = coupled_indices(m, i, rng, 1)
        yield int(a[0]), int(b[0])


# ------------------------------------------------------------ loss kernels

def _check_family(family):
    if family not in FAMILIES:
        raise InvalidArgument(f"SGD probe supports {FAMILIES}, got {family!r}")


def _data_loss(family, theta, X, y):
    """theta (K, p), X (K, b, d) or (b, d) -> (K, b)."""
    if family == "linear":
        r = np.einsum("k...d,kd->k...", X, theta) if X.ndim == 3 else theta @ X.T
        return (r - y) ** 2
    z = X[..., 0]
    return z * z * np.exp(-theta[:, :1] ** 2)


def _data_grad(family, theta, X, y):
    """Per-example gradients of the data loss, shape (K, b, p)."""
    if family == "linear":
        if X.ndim == 3:
            r = np.einsum("kbd,kd->kb", X, theta) - y
            return 2.0 * r[..., None] * X
        r = theta @ X.T - y
        return 2.0 * r[..., None] * X[None]
    z = X[..., 0]
    th = theta[:, :1]
    return (-2.0 * z * z * th * np.exp(-th ** 2))[..., None]


def _train_grad(family, theta, X, y, l2):
    g = _data_grad(family, theta, X, y)
    if l2:
        g = g + l2 * theta[:, None, :]
    return g


def _project(theta, R):
    if R is None:
        return theta
    n = np.linalg.norm(theta, axis=1, keepdims=True)
    return theta * np.minimum(1.0, R / np.maximum(n, 1e-300))


def _theta0(family, d, theta0):
    if theta0 is not None:
        return np.asarray(theta0, dtype=float).reshape(-1)
    return np.array([TOY_THETA0]) if family == "toy_exp" else np.zeros(d)


# ----------------------------------------------------------------- traces

@dataclass
class CouplingTrace:
    delta: np.ndarray
    removed_index: int
    family: str
    step_sizes: np.ndarray
    differ: np.ndarray
    step_bound: np.ndarray
    theta_S: np.ndarray
    theta_S_minus_i: np.ndarray
    loss_S: np.ndarray
    loss_S_minus_i: np.ndarray
    probe: tuple
    L: float
    L_i: float
    L_z: float
    seed: int
    meta: dict = field(default_factory=dict)

    def loss_gap_at(self, z) -> float:
        x, y = z
        X = np.atleast_2d(np.asarray(x, dtype=float))
        th = np.vstack([self.theta_S, self.theta_S_minus_i])
        v = _data_loss(self.family, th, X, np.atleast_1d(float(y)))
        return float(abs(v[0, 0] - v[1, 0]))

    @property
    def T(self) -> int:
        return len(self.step_sizes)

    def write_csv(self, path) -> Path:
        path = Path(path)
        with path.open("w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["t", "delta_t", "loss_S", "loss_S_minus_i"])
            for t in range(len(self.delta)):
                w.writerow([t, repr(float(self.delta[t])), repr(float(self.loss_S[t])),
                            repr(float(self.loss_S_minus_i[t]))])
        return path


def run_coupled_batch(ds: Dataset, i: int, family: str, cfg: SGDConfig, seeds,
                      probe=None, theta0=None) -> dict:
    """Simulate ``len(seeds)`` independent coupled pairs of runs at once.

    ``probe`` is the evaluation point (x, y); it defaults to the removed
    example.  Lipschitz constants are empirical maxima along the visited
    trajectories: ``L`` over all training examples (training loss incl.
    l2), ``L_i`` at the removed example and ``L_z`` of the data loss at the
    probe point.
    """
    _check_family(family)
    m = ds.m
    if m < 2:
        raise InvalidArgument("coupling needs m >= 2")
    if not 0 <= i < m:
        raise InvalidArgument(f"removed index {i} out of range")
    seeds = [int(s) for s in seeds]
    K = len(seeds)
    X, y = np.asarray(ds.X), np.asarray(ds.y)
    if probe is None:
        px, py = np.asarray(ds.X[i]), float(ds.y[i])
    else:
        px, py = np.asarray(probe[0], dtype=float).reshape(-1), float(probe[1])
    PX, PY = px[None, :], np.atleast_1d(py)

    T, b = cfg.T, cfg.batch
    full = b >= m
    etas = cfg.step_sizes()
    th0 = _theta0(family, ds.d, theta0)
    A = np.tile(th0, (K, 1))
    B = A.copy()
    keep = np.delete(np.arange(m), i)

    if not full and T:
        idxS = np.empty((K, T, b), dtype=np.int64)
        idxR = np.empty_like(idxS)
        for k, s in enumerate(seeds):
            idxS[k], idxR[k] = coupled_indices(m, i, np.random.default_rng(s), (T, b))

    delta = np.zeros((K, T + 1))
    bound = np.zeros((K, T))
    differ = np.zeros((K, T), dtype=bool)
    lossA = np.zeros((K, T + 1))
    lossB = np.zeros((K, T + 1))
    Lmax = np.zeros(K)
    Limax = np.zeros(K)
    Lzmax = np.zeros(K)

    def track(A, B, t):
        lossA[:, t] = _data_loss(family, A, PX, PY)[:, 0]
        lossB[:, t] = _data_loss(family, B, PX, PY)[:, 0]
        for th in (A, B):
            gn = np.linalg.norm(_train_grad(family, th, X, y, cfg.l2), axis=2)
            Lmax[:] = np.maximum(Lmax, gn.max(axis=1))
            Limax[:] = np.maximum(Limax, gn[:, i])
            gz = np.linalg.norm(_data_grad(family, th, PX, PY), axis=2)[:, 0]
            Lzmax[:] = np.maximum(Lzmax, gz)

    track(A, B, 0)
    for t in range(T):
        eta = etas[t]
        if full:
            gA = _train_grad(family, A, X, y, cfg.l2).mean(axis=1)
            gB = _train_grad(family, B, X[keep], y[keep], cfg.l2).mean(axis=1)
            bound[:, t] = eta * (np.linalg.norm(gA - gB, axis=1))
            differ[:, t] = True
        else:
            iA, iB = idxS[:, t], idxR[:, t]
            GA = _train_grad(family, A, X[iA], y[iA], cfg.l2)
            GB = _train_grad(family, B, X[iB], y[iB], cfg.l2)
            gA, gB = GA.mean(axis=1), GB.mean(axis=1)
            dmask = iA != iB
            differ[:, t] = dmask.any(axis=1)
            pair = np.linalg.norm(GA, axis=2) + np.linalg.norm(GB, axis=2)
            bound[:, t] = eta * (pair * dmask).sum(axis=1) / b
        A = _project(A - eta * gA, cfg.projection_radius)
        B = _project(B - eta * gB, cfg.projection_radius)
        delta[:, t + 1] = np.linalg.norm(A - B, axis=1)
        track(A, B, t + 1)

    return {"delta": delta, "step_bound": bound, "differ": differ, "theta_S": A,
            "theta_S_minus_i": B, "loss_S": lossA, "loss_S_minus_i": lossB, "L": Lmax,
            "L_i": Limax, "L_z": Lzmax, "step_sizes": etas, "probe": (px, py),
            "seeds": seeds, "full_batch": full}


def _trace(res, k, i, family, cfg) -> CouplingTrace:
    return CouplingTrace(
        delta=res["delta"][k], removed_index=i, family=family, step_sizes=res["step_sizes"],
        differ=res["differ"][k], step_bound=res["step_bound"][k], theta_S=res["theta_S"][k],
        theta_S_minus_i=res["theta_S_minus_i"][k], loss_S=res["loss_S"][k],
        loss_S_minus_i=res["loss_S_minus_i"][k], probe=res["probe"], L=float(res["L"][k]),
        L_i=float(res["L_i"][k]), L_z=float(res["L_z"][k]), seed=res["seeds"][k],
        meta={"schedule": cfg.schedule, "clamped": cfg.clamped(), "batch": cfg.batch,
              "full_batch": res["full_batch"], "l2": cfg.l2,
              "projection_radius": cfg.projection_radius})


def coupled_run(ds: Dataset, i: int, family: str, cfg: SGDConfig, probe=None,
                theta0=None) -> CouplingTrace:
    """One coupled pair of runs on S and S minus i, seeded by ``cfg.seed``."""
    res = run_coupled_batch(ds, i, family, cfg, [cfg.seed], probe=probe, theta0=theta0)
    return _trace(res, 0, i, family, cfg)


def coupled_runs(ds: Dataset, i: int, family: str, cfg: SGDConfig, trials: int, probe=None,
                 theta0=None) -> list[CouplingTrace]:
    """``trials`` traces with seeds cfg.seed + k."""
    seeds = [cfg.seed + k for k in range(trials)]
    res = run_coupled_batch(ds, i, family, cfg, seeds, probe=probe, theta0=theta0)
    return [_trace(res, k, i, family, cfg) for k in range(trials)]


def empirical_le_stability(ds: Dataset, i: int, z, family: str, cfg: SGDConfig,
                           trials: int, theta0=None) -> dict:
    """Monte Carlo estimate of |E l(A_S, z) - E l(A_{S minus i}, z)| over algorithm randomness."""
    if trials < 2:
        raise InvalidArgument("trials must be >= 2")
    seeds = [cfg.seed + k for k in range(trials)]
    res = run_coupled_batch(ds, i, family, cfg, seeds, probe=z, theta0=theta0)
    diff = res["loss_S"][:, -1] - res["loss_S_minus_i"][:, -1]
    se = float(np.std(diff, ddof=1) / math.sqrt(trials))
    return {"mean_gap": float(abs(diff.mean())), "stderr": se, "trials": trials,
            "mean_abs_gap": float(np.abs(diff).mean())}


# ------------------------------------------------------------- envelopes

def _mean_se(v):
    v = np.asarray(v, dtype=float)
    return float(v.mean()), float(v.std(ddof=1) / math.sqrt(len(v)))


def strongly_convex_envelope(ds: Dataset, i: int, cfg: SGDConfig, trials: int, mu=None) -> dict:
    """Mean delta_T over coupled projected runs vs (L_i + L) / (m mu).

    Without a configured radius the runs project onto the ball of radius
    ``DEFAULT_RADIUS``.
    """
    mu = cfg.l2 if mu is None else mu
    if not mu > 0:
        raise InvalidArgument("strong convexity needs l2 > 0")
    if cfg.projection_radius is None:
        cfg = SGDConfig(**{**cfg.__dict__, "projection_radius": DEFAULT_RADIUS})
    seeds = [cfg.seed + k for k in range(trials)]
    res = run_coupled_batch(ds, i, "linear", cfg, seeds)
    mean, se = _mean_se(res["delta"][:, -1])
    L, Li = float(res["L"].max()), float(res["L_i"].max())
    bound = (Li + L) / (ds.m * mu)
    return {"mean_delta_T": mean, "stderr": se, "bound": bound, "L": L, "L_i": Li, "mu": mu,
            "holds": mean <= bound + 3 * se, "trials": trials}


def convex_envelope(ds: Dataset, i: int, cfg: SGDConfig, trials: int, probe=None) -> dict:
    """Mean loss gap at ``probe`` vs the convex-SGD value (L + L_i) L_z sum(eta) / m."""
    from .stability import sgd_beta_convex
    seeds = [cfg.seed + k for k in range(trials)]
    res = run_coupled_batch(ds, i, "linear", cfg, seeds, probe=probe)
    gaps = np.abs(res["loss_S"][:, -1] - res["loss_S_minus_i"][:, -1])
    mean, se = _mean_se(gaps)
    L, Li, Lz = float(res["L"].max()), float(res["L_i"].max()), float(res["L_z"].max())
    bound = sgd_beta_convex(L, Li, Lz, float(res["step_sizes"].sum()), ds.m)
    return {"mean_gap": mean, "stderr": se, "bound": bound, "L": L, "L_i": Li, "L_z": Lz,
            "sum_eta": float(res["step_sizes"].sum()), "holds": mean <= bound + 3 * se,
            "trials": trials}


def linear_smoothness(ds: Dataset, l2: float = 0.0) -> float:
    """Largest per-example smoothness 2 ||x||^2 + l2 of the (regularized) squared loss."""
    return float(2.0 * np.max(np.sum(np.asarray(ds.X) ** 2, axis=1)) + l2)


# ------------------------------------------------------------ step probe

def stepwise_sensitivity(model: M.TrainedModel, spec: M.LossSpec, z_i, z,
                         eta_probe: float = 1e-6) -> float:
    """|l(theta - eta grad l(theta, z_i), z) - l(theta, z)| for one probing step."""
    if not eta_probe > 0:
        raise InvalidArgument("eta_probe must be > 0")
    g = np.asarray(M.grad(model, spec, z_i[0], z_i[1]), dtype=float)
    th = model.theta - eta_probe * g.reshape(model.theta.shape)
    return float(abs(M.loss(model, spec, z[0], z[1], theta=th) - M.loss(model, spec, z[0], z[1])))


def stepwise_values(model: M.TrainedModel, spec: M.LossSpec, train_ds: Dataset,
                    test_ds: Dataset, eta_probe: float = 1e-6) -> np.ndarray:
    """Train x test matrix of stepwise sensitivities."""
    G = np.asarray(M.grad(model, spec, train_ds.X, train_ds.y)).reshape(train_ds.m, -1)
    base = np.asarray(M.loss(model, spec, test_ds.X, test_ds.y))
    out = np.empty((train_ds.m, test_ds.m))
    for a in range(train_ds.m):
        th = model.theta - eta_probe * G[a].reshape(model.theta.shape)
        out[a] = np.abs(np.asarray(M.loss(model, spec, test_ds.X, test_ds.y, theta=th)) - base)
    return out
