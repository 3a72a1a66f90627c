"""Closed-form stability parameters and generalization bounds.

Conventions: ``m * beta_m(z', z) = beta(z', z)``.  ``sup_E_beta`` and
``M_beta`` refer to the m-free ``beta``; the SGD stability functions return
the m-dependent ``beta_m`` exactly as the corresponding propositions state
them.  All logarithms are natural.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from .errors import InvalidArgument


def _check_common(m, delta):
    if not 0 < delta < 1:
        raise InvalidArgument(f"delta must lie in (0, 1), got {delta}")
    if m <= 0:
        raise InvalidArgument(f"m must be positive, got {m}")


def _nonneg(**kw):
    for k, v in kw.items():
        if v is None or not v >= 0:
            raise InvalidArgument(f"{k} must be >= 0, got {v}")


# ------------------------------------------------------------ generic bounds

def bound_locally_elastic(sup_E_beta: float, M_l: float, m: int, delta: float,
                          eta: float | None = None) -> float:
    """2s/m + 2(2s + eta + M_l) sqrt(2 log(2/delta) / m), s = sup_{z'} E_z beta(z', z).

    ``eta`` defaults to ``sup_E_beta``.
    """
    _check_common(m, delta)
    eta = sup_E_beta if eta is None else eta
    _nonneg(sup_E_beta=sup_E_beta, M_l=M_l, eta=eta)
    s = sup_E_beta
    return 2 * s / m + 2 * (2 * s + eta + M_l) * math.sqrt(2 * math.log(2 / delta) / m)


def bound_uniform(M_beta: float, M_l: float, m: int, delta: float) -> float:
    """2 b + (4 m b + M_l) sqrt(log(1/delta) / (2m)) with b = M_beta / m."""
    _check_common(m, delta)
    _nonneg(M_beta=M_beta, M_l=M_l)
    b = M_beta / m
    return 2 * b + (4 * m * b + M_l) * math.sqrt(math.log(1 / delta) / (2 * m))


def bound_hypothesis(beta_H: float, M_l: float, m: int, delta: float) -> float:
    """Polynomial-tail bound sqrt((M_l^2 + 12 M_l m beta_H) / (2 m delta))."""
    _check_common(m, delta)
    _nonneg(beta_H=beta_H, M_l=M_l)
    return math.sqrt((M_l ** 2 + 12 * M_l * m * beta_H) / (2 * m * delta))


def large_m_diagnostic(M_beta: float, eta: float, m: int) -> bool:
    """The explicit sample-size requirement m > 2 M_beta / eta."""
    if eta <= 0:
        return False
    return m > 2 * M_beta / eta


# ------------------------------------------------------------ kernel methods

def kernel_beta(sigma: float, kappa_i: float, kappa_x: float, lam: float, m: int) -> float:
    """sigma^2 kappa(x_i) kappa(x) / (2 lam m)."""
    _nonneg(sigma=sigma, kappa_i=kappa_i, kappa_x=kappa_x)
    if not lam > 0:
        raise InvalidArgument("lambda must be > 0")
    return sigma ** 2 * kappa_i * kappa_x / (2 * lam * m)


def kernel_beta_uniform(sigma: float, kappa: float, lam: float, m: int) -> float:
    return kernel_beta(sigma, kappa, kappa, lam, m)


def _kernel_args(kappa, E_kappa, lam, B, m, delta):
    _check_common(m, delta)
    _nonneg(kappa=kappa, E_kappa=E_kappa, B=B)
    if not lam > 0:
        raise InvalidArgument("lambda must be > 0")


def svm_bounds(kappa: float, E_kappa: float, lam: float, B: float, m: int,
               delta: float) -> tuple[float, float]:
    """Uniform (B1) and locally elastic (B2) bounds for bounded SVM regression.

    B2 uses the slack eta = kappa E kappa / lam.
    """
    _kernel_args(kappa, E_kappa, lam, B, m, delta)
    kk = kappa * kappa
    ke = kappa * E_kappa
    b1 = kk / (lam * m) + (2 * kk / lam + B) * math.sqrt(math.log(1 / delta) / (2 * m))
    b2 = ke / (lam * m) + (3 * ke / lam + 2 * B) * math.sqrt(2 * math.log(2 / delta) / m)
    return b1, b2


def condition_eq3(kappa: float, E_kappa: float, lam: float, B: float) -> bool:
    """Sufficient condition (2k^2/lam + B) >= 2 sqrt(2) (3 k Ek / lam + 2B) for B2 <= B1."""
    lhs = 2 * kappa * kappa / lam + B
    rhs = 2 * math.sqrt(2) * (3 * kappa * E_kappa / lam + 2 * B)
    return lhs >= rhs


def rls_bounds(kappa: float, E_kappa: float, lam: float, B: float, m: int,
               delta: float) -> tuple[float, float]:
    """Uniform (B3) and locally elastic (B4) bounds for regularized least squares."""
    _kernel_args(kappa, E_kappa, lam, B, m, delta)
    kk = kappa * kappa * B * B
    ke = kappa * E_kappa * B * B
    b3 = 4 * kk / (lam * m) + (8 * kk / lam + B * B) * math.sqrt(math.log(1 / delta) / (2 * m))
    b4 = 4 * ke / (lam * m) + (12 * ke / lam + 2 * B * B) * math.sqrt(2 * math.log(2 / delta) / m)
    return b3, b4


def kernel_constants(X, mode: str = "definition") -> tuple[float, float]:
    """(kappa, E kappa) for the bilinear kernel on a sample of inputs.

    ``definition``: kappa(x) = ||x||, so kappa = max ||x|| and E kappa = mean ||x||.
    ``squared``: kappa = B'^2 and E kappa = mean ||x||^2, the variant
    printed alongside the bilinear-kernel examples.
    """
    norms = np.linalg.norm(np.atleast_2d(X), axis=1)
    if mode == "definition":
        return float(norms.max()), float(norms.mean())
    if mode == "squared":
        return float(norms.max() ** 2), float(np.mean(norms ** 2))
    raise InvalidArgument(f"unknown kappa mode {mode!r}")


# ------------------------------------------------------------------- SGD

def sgd_beta_convex(L: float, L_i: float, L_z: float, sum_eta: float, m: int) -> float:
    """(L + L(z_i)) L(z) sum_t eta_t / m."""
    _nonneg(L=L, L_i=L_i, L_z=L_z, sum_eta=sum_eta)
    return (L + L_i) * L_z * sum_eta / m


def sgd_beta_strongly_convex(L: float, L_i: float, L_z: float, mu: float, m: int) -> float:
    """(L(z_i) + L) L(z) / (m mu) for projected SGD on a mu-strongly convex objective."""
    _nonneg(L=L, L_i=L_i, L_z=L_z)
    if not mu > 0:
        raise InvalidArgument("mu must be > 0")
    return (L_i + L) * L_z / (m * mu)


def sgd_beta_nonconvex(L: float, L_i: float, L_z: float, alpha: float, c: float, T: int,
                       m: int) -> float:
    """gamma_m (c (L(z_i) + L) L(z) T^{alpha c})^{1/(alpha c + 1)},
    gamma_m = (1 + 1/(alpha c)) / (m - 1)."""
    _nonneg(L=L, L_i=L_i, L_z=L_z)
    if not (alpha > 0 and c > 0):
        raise InvalidArgument("alpha and c must be > 0")
    if m < 2 or T < 1:
        raise InvalidArgument("need m >= 2 and T >= 1")
    ac = alpha * c
    gamma = (1 + 1 / ac) / (m - 1)
    # T^{ac/(ac+1)} factored out to stay finite for large T
    return gamma * (c * (L_i + L) * L_z) ** (1 / (ac + 1)) * float(T) ** (ac / (ac + 1))


def sup_E_beta_nonconvex(L: float, L_sup_prime: float, E_Lz_pow: float, alpha: float,
                         c: float, T: int, m: int) -> float:
    """m * sup_{z'} E_z beta_m(z', z) for the nonconvex SGD sensitivity.

    ``E_Lz_pow`` is E_z[L(z)^{1/(alpha c + 1)}] and ``L_sup_prime`` the
    largest L(z') over the domain.
    """
    ac = alpha * c
    p = 1 / (ac + 1)
    gamma = (1 + 1 / ac) / (m - 1)
    return m * gamma * (c * (L_sup_prime + L)) ** p * float(T) ** (ac * p) * E_Lz_pow


def sgd_bounds_b5_b6(L: float, sup_E_beta: float, alpha: float, c: float, T: int, m: int,
                     delta: float, M_l: float = 1.0, eta: float = 0.0) -> tuple[float, float]:
    """B5 (uniform stability of nonconvex SGD) and B6 (locally elastic).

    B5 plugs beta^U_m = sgd_beta_nonconvex(L, L, L, ...) into the uniform
    bound; B6 is the locally elastic bound with ``sup_E_beta`` (m-free, see
    :func:`sup_E_beta_nonconvex`).  The displayed B6 has no slack term,
    hence ``eta=0`` by default.
    """
    beta_U = sgd_beta_nonconvex(L, L, L, alpha, c, T, m)
    b5 = bound_uniform(m * beta_U, M_l, m, delta)
    b6 = bound_locally_elastic(sup_E_beta, M_l, m, delta, eta=eta)
    return b5, b6


# --------------------------------------------------------- error stability

def error_stability_param(source, train_points=None, test_points=None) -> float:
    """sup over z' of the mean over z of beta.

    ``source`` is either a sequence of records (with ``train_index`` and
    ``beta_hat``) or a callable ``beta(z_prime, z)`` evaluated on the
    supplied point grids.
    """
    if callable(source):
        if train_points is None or test_points is None:
            raise InvalidArgument("a beta function needs train_points and test_points grids")
        f: Callable = source
        return max(float(np.mean([f(zp, z) for z in test_points])) for zp in train_points)
    sums: dict[int, float] = {}
    counts: dict[int, int] = {}
    for r in source:
        sums[r.train_index] = sums.get(r.train_index, 0.0) + r.beta_hat
        counts[r.train_index] = counts.get(r.train_index, 0) + 1
    if not sums:
        raise InvalidArgument("no records")
    return max(sums[k] / counts[k] for k in sums)


# ------------------------------------------------------------ report types

@dataclass(frozen=True)
class KernelConstants:
    sigma: float | None = None
    kappa: float | None = None
    E_kappa: float | None = None
    lam: float | None = None
    B: float | None = None


@dataclass(frozen=True)
class SGDConstants:
    L: float | None = None
    L_i: float | None = None
    L_z: float | None = None
    alpha: float | None = None
    c: float | None = None
    T: int | None = None
    mu: float | None = None
    eta_schedule_sum: float | None = None


@dataclass(frozen=True)
class BoundInputs:
    m: int
    delta: float
    M_l: float = 1.0
    sup_E_beta: float = 0.0
    M_beta: float = 0.0
    eta_slack: float | None = None
    beta_H: float | None = None
    kernel: KernelConstants | None = None
    sgd: SGDConstants | None = None

    def __post_init__(self):
        if self.m < 2:
            raise InvalidArgument("m must be >= 2")
        _check_common(self.m, self.delta)
        _nonneg(M_l=self.M_l, sup_E_beta=self.sup_E_beta, M_beta=self.M_beta)
        for grp in (self.kernel, self.sgd):
            if grp is not None:
                for k, v in asdict(grp).items():
                    if v is not None and v < 0:
                        raise InvalidArgument(f"{k} must be >= 0")

    @property
    def eta(self) -> float:
        return self.sup_E_beta if self.eta_slack is None else self.eta_slack

    @classmethod
    def from_dict(cls, obj: dict) -> "BoundInputs":
        obj = dict(obj)
        if obj.get("kernel") is not None:
            obj["kernel"] = KernelConstants(**obj["kernel"])
        if obj.get("sgd") is not None:
            obj["sgd"] = SGDConstants(**obj["sgd"])
        return cls(**obj)


@dataclass
class BoundReport:
    values: dict[str, float]
    inputs: BoundInputs
    checks: dict[str, bool] = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {"values": self.values, "checks": self.checks, "inputs": asdict(self.inputs)}

    def write_json(self, path) -> Path:
        path = Path(path)
        path.write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")
        return path

    def write_csv(self, path) -> Path:
        path = Path(path)
        with path.open("w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["bound_name", "value"])
            for k, v in self.values.items():
                w.writerow([k, repr(float(v))])
        return path


def evaluate_bounds(inp: BoundInputs) -> BoundReport:
    """Every bound computable from the supplied constants."""
    vals: dict[str, float] = {}
    checks: dict[str, bool] = {}
    vals["locally_elastic"] = bound_locally_elastic(inp.sup_E_beta, inp.M_l, inp.m, inp.delta,
                                                    eta=inp.eta)
    vals["uniform"] = bound_uniform(inp.M_beta, inp.M_l, inp.m, inp.delta)
    checks["large_m"] = large_m_diagnostic(inp.M_beta, inp.eta, inp.m)
    if inp.beta_H is not None:
        vals["hypothesis"] = bound_hypothesis(inp.beta_H, inp.M_l, inp.m, inp.delta)
    k = inp.kernel
    if k is not None and None not in (k.kappa, k.E_kappa, k.lam, k.B):
        vals["B1"], vals["B2"] = svm_bounds(k.kappa, k.E_kappa, k.lam, k.B, inp.m, inp.delta)
        vals["B3"], vals["B4"] = rls_bounds(k.kappa, k.E_kappa, k.lam, k.B, inp.m, inp.delta)
        checks["condition_eq3"] = condition_eq3(k.kappa, k.E_kappa, k.lam, k.B)
        if k.sigma is not None:
            vals["kernel_beta_uniform"] = kernel_beta_uniform(k.sigma, k.kappa, k.lam, inp.m)
    s = inp.sgd
    if s is not None and None not in (s.L, s.L_i, s.L_z):
        if s.eta_schedule_sum is not None:
            vals["sgd_beta_convex"] = sgd_beta_convex(s.L, s.L_i, s.L_z, s.eta_schedule_sum, inp.m)
        if s.mu:
            vals["sgd_beta_strongly_convex"] = sgd_beta_strongly_convex(s.L, s.L_i, s.L_z, s.mu,
                                                                        inp.m)
        if None not in (s.alpha, s.c, s.T):
            vals["sgd_beta_nonconvex"] = sgd_beta_nonconvex(s.L, s.L_i, s.L_z, s.alpha, s.c,
                                                            s.T, inp.m)
            vals["B5"], vals["B6"] = sgd_bounds_b5_b6(s.L, inp.sup_E_beta, s.alpha, s.c, s.T,
                                                      inp.m, inp.delta, M_l=inp.M_l,
                                                      eta=inp.eta_slack or 0.0)
    return BoundReport(vals, inp, checks)
