"""Model families, losses, and their closed-form derivatives.

Every family is parameterized by a flat vector ``theta``:

``linear_ridge``   f(x) = theta . x
``kernel_ridge``   f(x) = sum_j theta_j K(x_j, x)      (dual coefficients)
``svm_reg``        same representation as kernel_ridge
``softmax_head``   logits = Theta phi(x), Theta = theta.reshape(K, p)
``two_layer``      f(x) = (1/k) sum_r a_r relu(W_r . x), theta = [W.ravel(), a]
``scalar``         a bare scalar parameter, used with the ``toy_exp`` loss

Gradients and Hessians are taken with respect to ``theta`` of the *data*
loss only; the regularizer lives in :func:`penalty` and friends so that
influence computations can separate the two.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
import scipy.linalg
import scipy.optimize
from scipy.special import logsumexp, softmax

from .data import Dataset
from .errors import InvalidArgument, NumericError, UnsupportedOperation

FAMILIES = ("linear_ridge", "kernel_ridge", "svm_reg", "softmax_head", "two_layer", "scalar")
LOSSES = ("squared", "eps_insensitive", "softmax_xent", "toy_exp")

TOY_LIPSCHITZ = math.sqrt(2.0) * math.exp(-0.5)


# --------------------------------------------------------------------- specs

@dataclass(frozen=True)
class LossSpec:
    family: str
    tau: float = 0.0
    M_l: float = math.inf
    sigma_admissible: float | None = None
    alpha_smooth: float | None = None

    def __post_init__(self):
        if self.family not in LOSSES:
            raise InvalidArgument(f"unknown loss family {self.family!r}")
        if self.tau < 0:
            raise InvalidArgument("tau must be >= 0")
        if not self.M_l > 0:
            raise InvalidArgument("M_l must be > 0")
        if self.sigma_admissible is not None and not self.sigma_admissible > 0:
            raise InvalidArgument("sigma_admissible must be > 0")


def squared_loss(M_l=math.inf, sigma=None) -> LossSpec:
    return LossSpec("squared", M_l=M_l, sigma_admissible=sigma)


def eps_insensitive_loss(tau: float, B: float | None = None) -> LossSpec:
    # |f-y|_tau is 1-admissible; bounded by B when f and y both lie in [0, B]
    return LossSpec("eps_insensitive", tau=tau, M_l=B if B else math.inf, sigma_admissible=1.0)


def softmax_xent_loss() -> LossSpec:
    return LossSpec("softmax_xent")


def toy_exp_loss() -> LossSpec:
    # z in [0, 1] keeps the loss in [0, 1]
    return LossSpec("toy_exp", M_l=1.0, alpha_smooth=2.0)


@dataclass(frozen=True)
class KernelSpec:
    kind: str = "bilinear"
    gamma: float = 1.0
    kappa_bound: float | None = None

    def __post_init__(self):
        if self.kind not in ("bilinear", "rbf"):
            raise InvalidArgument(f"unknown kernel {self.kind!r}")
        if self.kind == "rbf" and not self.gamma > 0:
            raise InvalidArgument("rbf gamma must be > 0")

    def __call__(self, A, B):
        A = np.atleast_2d(A)
        B = np.atleast_2d(B)
        if self.kind == "bilinear":
            return A @ B.T
        sq = (np.sum(A * A, 1)[:, None] + np.sum(B * B, 1)[None, :] - 2 * A @ B.T)
        return np.exp(-self.gamma * np.maximum(sq, 0.0))

    def kappa(self, X) -> np.ndarray:
        """kappa(x) = sqrt(K(x, x)) for each row of X."""
        X = np.atleast_2d(X)
        if self.kind == "bilinear":
            return np.linalg.norm(X, axis=1)
        return np.ones(X.shape[0])

    def with_bound(self, X) -> "KernelSpec":
        return replace(self, kappa_bound=float(np.max(self.kappa(X))))


def bilinear() -> KernelSpec:
    return KernelSpec("bilinear")


def rbf(gamma: float) -> KernelSpec:
    return KernelSpec("rbf", gamma=gamma)


@dataclass(frozen=True)
class FeatureMap:
    """Frozen random ReLU features phi(x) = sqrt(2/p) relu(W x + b)."""

    d: int
    p: int
    seed: int

    @property
    def weights(self):
        rng = np.random.default_rng(self.seed)
        W = rng.normal(0.0, 1.0 / math.sqrt(self.d), size=(self.p, self.d))
        b = rng.uniform(-0.5, 0.5, size=self.p)
        return W, b

    def __call__(self, X):
        W, b = self.weights
        return math.sqrt(2.0 / self.p) * np.maximum(np.atleast_2d(X) @ W.T + b, 0.0)


# --------------------------------------------------------------------- model

@dataclass
class TrainedModel:
    family: str
    theta: np.ndarray
    lam: float
    train_m: int
    kernel: KernelSpec | None = None
    support: np.ndarray | None = None
    feature_map: FeatureMap | None = None
    n_classes: int | None = None
    hidden: int | None = None
    tau: float | None = None
    seed: int | None = None
    info: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise InvalidArgument(f"unknown model family {self.family!r}")
        self.theta = np.asarray(self.theta, dtype=float).reshape(-1)
        if self.family != "scalar" and not self.lam > 0:
            raise InvalidArgument("lambda must be > 0")
        n = self.theta.size
        if self.family in ("kernel_ridge", "svm_reg"):
            if self.kernel is None or self.support is None or self.support.shape[0] != n:
                raise InvalidArgument("kernel models need a kernel and one support row per coefficient")
        elif self.family == "softmax_head":
            if self.feature_map is None or self.n_classes is None \
                    or n != self.n_classes * self.feature_map.p:
                raise InvalidArgument("softmax_head theta must have K*p entries")
        elif self.family == "two_layer":
            if self.hidden is None or n % (self.hidden) or n // self.hidden < 2:
                raise InvalidArgument("two_layer theta must have k*d + k entries")
        elif self.family == "scalar" and n != 1:
            raise InvalidArgument("scalar model has exactly one parameter")

    @property
    def n_params(self) -> int:
        return self.theta.size

    def with_theta(self, theta) -> "TrainedModel":
        return replace(self, theta=np.array(theta, dtype=float))

    def predict(self, X, theta=None):
        return predict(self, X, theta)

    # serialization -----------------------------------------------------------
    def to_dict(self) -> dict:
        out = {"family": self.family, "lambda": self.lam, "train_m": self.train_m,
               "theta": self.theta.tolist(), "seed": self.seed}
        if self.kernel is not None:
            out["kernel"] = {"kind": self.kernel.kind, "gamma": self.kernel.gamma}
            out["support"] = self.support.tolist()
        if self.feature_map is not None:
            fm = self.feature_map
            out["feature_map"] = {"d": fm.d, "p": fm.p, "seed": fm.seed}
            out["n_classes"] = self.n_classes
        if self.hidden is not None:
            out["hidden"] = self.hidden
        if self.tau is not None:
            out["tau"] = self.tau
        return out

    @classmethod
    def from_dict(cls, obj: dict) -> "TrainedModel":
        kernel = support = fm = None
        if "kernel" in obj:
            kernel = KernelSpec(obj["kernel"]["kind"], gamma=obj["kernel"].get("gamma", 1.0))
            support = np.asarray(obj["support"], dtype=float)
        if "feature_map" in obj:
            fm = FeatureMap(**obj["feature_map"])
        return cls(obj["family"], np.asarray(obj["theta"], dtype=float), obj["lambda"],
                   obj["train_m"], kernel=kernel, support=support, feature_map=fm,
                   n_classes=obj.get("n_classes"), hidden=obj.get("hidden"),
                   tau=obj.get("tau"), seed=obj.get("seed"))

    def save(self, path):
        Path(path).write_text(json.dumps(self.to_dict(), indent=1) + "\n")

    @classmethod
    def load(cls, path) -> "TrainedModel":
        return cls.from_dict(json.loads(Path(path).read_text()))


def scalar_model(theta: float) -> TrainedModel:
    return TrainedModel("scalar", np.array([theta]), 0.0, 0)


def primal_view(model: TrainedModel) -> TrainedModel:
    """Express a bilinear-kernel ridge model as the equivalent linear model."""
    if model.family == "linear_ridge":
        return model
    if model.family == "kernel_ridge" and model.kernel.kind == "bilinear":
        w = model.support.T @ model.theta
        return TrainedModel("linear_ridge", w, model.lam, model.train_m, seed=model.seed)
    raise UnsupportedOperation(f"no finite primal feature space for {model.family} "
                               f"with {getattr(model.kernel, 'kind', None)} kernel")


def _two_layer_parts(model, theta):
    k = model.hidden
    d = theta.size // k - 1
    return theta[: k * d].reshape(k, d), theta[k * d:]


def predict(model: TrainedModel, X, theta=None):
    """Scalar predictions, or (n, K) logits for ``softmax_head``."""
    th = model.theta if theta is None else np.asarray(theta, dtype=float)
    X = np.atleast_2d(np.asarray(X, dtype=float))
    fam = model.family
    if fam == "linear_ridge":
        return X @ th
    if fam in ("kernel_ridge", "svm_reg"):
        return model.kernel(X, model.support) @ th
    if fam == "softmax_head":
        return model.feature_map(X) @ th.reshape(model.n_classes, -1).T
    if fam == "two_layer":
        W, a = _two_layer_parts(model, th)
        return np.maximum(X @ W.T, 0.0) @ a / model.hidden
    if fam == "scalar":
        return np.full(X.shape[0], th[0])
    raise UnsupportedOperation(fam)


def _pred_jacobian(model, X, th):
    """d f(x_n) / d theta, shape (n, p), for scalar-output families."""
    fam = model.family
    if fam == "linear_ridge":
        return X
    if fam in ("kernel_ridge", "svm_reg"):
        return model.kernel(X, model.support)
    if fam == "two_layer":
        W, a = _two_layer_parts(model, th)
        k = model.hidden
        z = X @ W.T
        act = (z > 0).astype(float)
        dW = (a * act / k)[:, :, None] * X[:, None, :]
        da = np.maximum(z, 0.0) / k
        return np.concatenate([dW.reshape(X.shape[0], -1), da], axis=1)
    raise UnsupportedOperation(f"no scalar prediction jacobian for {fam}")


def _batched(x, y):
    x = np.asarray(x, dtype=float)
    single = x.ndim <= 1
    X = np.atleast_2d(x) if x.ndim else x.reshape(1, 1)
    Y = np.atleast_1d(np.asarray(y, dtype=float))
    return X, Y, single


def _check_pair(model, spec):
    fam, loss_ = model.family, spec.family
    ok = {
        "squared": ("linear_ridge", "kernel_ridge", "svm_reg", "two_layer"),
        "eps_insensitive": ("linear_ridge", "kernel_ridge", "svm_reg"),
        "softmax_xent": ("softmax_head",),
        "toy_exp": ("scalar",),
    }[loss_]
    if fam not in ok:
        raise UnsupportedOperation(f"loss {loss_} is not defined for model family {fam}")


def loss(model: TrainedModel, spec: LossSpec, x, y, theta=None):
    """Per-example data loss; scalar for a single example, else a vector."""
    _check_pair(model, spec)
    th = model.theta if theta is None else np.asarray(theta, dtype=float)
    X, Y, single = _batched(x, y)
    if spec.family == "toy_exp":
        z = X[:, 0]
        out = z * z * np.exp(-th[0] ** 2)
    elif spec.family == "softmax_xent":
        logits = predict(model, X, th)
        lab = Y.astype(int)
        out = logsumexp(logits, axis=1) - logits[np.arange(len(lab)), lab]
    else:
        r = predict(model, X, th) - Y
        if spec.family == "squared":
            out = r * r
        else:
            out = np.maximum(np.abs(r) - spec.tau, 0.0)
    return float(out[0]) if single else out


def grad(model: TrainedModel, spec: LossSpec, x, y, theta=None):
    """Per-example gradient of the data loss w.r.t. theta, shape (p,) or (n, p).

    For ``eps_insensitive`` this is the subgradient with value 0 on the
    flat region and at the kinks.
    """
    _check_pair(model, spec)
    th = model.theta if theta is None else np.asarray(theta, dtype=float)
    X, Y, single = _batched(x, y)
    if spec.family == "toy_exp":
        z = X[:, 0]
        out = (-2.0 * z * z * th[0] * np.exp(-th[0] ** 2))[:, None]
    elif spec.family == "softmax_xent":
        phi = model.feature_map(X)
        P = softmax(phi @ th.reshape(model.n_classes, -1).T, axis=1)
        P[np.arange(len(Y)), Y.astype(int)] -= 1.0
        out = (P[:, :, None] * phi[:, None, :]).reshape(len(Y), -1)
    else:
        r = predict(model, X, th) - Y
        J = _pred_jacobian(model, X, th)
        if spec.family == "squared":
            coef = 2.0 * r
        else:
            coef = np.where(np.abs(r) > spec.tau, np.sign(r), 0.0)
        out = coef[:, None] * J
    return out[0] if single else out


def hessian(model: TrainedModel, spec: LossSpec, x, y, theta=None) -> np.ndarray:
    """Hessian of the data loss at one example.

    ``kernel_ridge`` with the bilinear kernel is handled in its primal
    (linear) coordinates; see :func:`primal_view`.
    """
    if model.family == "two_layer" or spec.family == "eps_insensitive":
        raise UnsupportedOperation(
            f"hessian is not available for {model.family}/{spec.family}")
    if model.family in ("kernel_ridge", "svm_reg"):
        if model.family == "svm_reg":
            raise UnsupportedOperation("svm_reg uses a non-smooth loss")
        model = primal_view(model)
        theta = None
    _check_pair(model, spec)
    th = model.theta if theta is None else np.asarray(theta, dtype=float)
    x = np.asarray(x, dtype=float).reshape(-1)
    if spec.family == "toy_exp":
        z = x[0]
        t = th[0]
        return np.array([[z * z * np.exp(-t * t) * (4 * t * t - 2)]])
    if spec.family == "softmax_xent":
        phi = model.feature_map(x)[0]
        p = softmax(phi @ th.reshape(model.n_classes, -1).T)
        return np.kron(np.diag(p) - np.outer(p, p), np.outer(phi, phi))
    # squared loss on a linear model
    return 2.0 * np.outer(x, x)


def mean_hessian(model: TrainedModel, spec: LossSpec, X, Y) -> np.ndarray:
    """(1/n) sum of per-example data-loss Hessians, vectorized where possible."""
    X = np.atleast_2d(np.asarray(X, dtype=float))
    if model.family == "kernel_ridge":
        model = primal_view(model)
    if model.family == "linear_ridge" and spec.family == "squared":
        return 2.0 * X.T @ X / X.shape[0]
    if model.family == "softmax_head" and spec.family == "softmax_xent":
        phi = model.feature_map(X)
        P = softmax(phi @ model.theta.reshape(model.n_classes, -1).T, axis=1)
        K, p = model.n_classes, phi.shape[1]
        H = np.zeros((K * p, K * p))
        for a in range(K):
            for b in range(a, K):
                w = (P[:, a] * ((a == b) - P[:, b]))
                blk = (phi * w[:, None]).T @ phi / X.shape[0]
                H[a * p:(a + 1) * p, b * p:(b + 1) * p] = blk
                if b != a:
                    H[b * p:(b + 1) * p, a * p:(a + 1) * p] = blk.T
        return H
    return sum(hessian(model, spec, X[j], Y[j]) for j in range(X.shape[0])) / X.shape[0]


def two_layer_mean_hessian(model: TrainedModel, X, Y) -> np.ndarray:
    """Mean squared-loss Hessian of the two-layer net, exact off the ReLU kinks.

    2 J^T J / n plus the residual term 2 r d^2 f, whose only nonzero blocks
    (a.e.) couple a_r with W_r.  Finite differences of the gradient are
    biased here: a step that crosses a kink contributes O(1/eps).
    """
    if model.family != "two_layer":
        raise InvalidArgument("two_layer_mean_hessian needs a two_layer model")
    X = np.atleast_2d(np.asarray(X, dtype=float))
    Y = np.asarray(Y, dtype=float).reshape(-1)
    th = model.theta
    k = model.hidden
    n, d = X.shape
    W, _ = _two_layer_parts(model, th)
    J = _pred_jacobian(model, X, th)
    r = predict(model, X, th) - Y
    H = 2.0 / n * J.T @ J
    act = (X @ W.T > 0).astype(float)
    C = 2.0 / (n * k) * (r[:, None] * act).T @ X
    rows = np.arange(k * d)
    cols = k * d + np.repeat(np.arange(k), d)
    H[rows, cols] += C.ravel()
    H[cols, rows] += C.ravel()
    return H


# ------------------------------------------------------------------ penalties

def penalty(model: TrainedModel, theta=None) -> float:
    """Regularizer value: lambda ||w||^2 (ridge), lambda ||h||_K^2 (kernels),
    (lambda/2) ||theta||^2 (softmax_head, two_layer)."""
    th = model.theta if theta is None else np.asarray(theta, dtype=float)
    fam = model.family
    if fam == "linear_ridge":
        return model.lam * float(th @ th)
    if fam in ("kernel_ridge", "svm_reg"):
        return model.lam * float(th @ model.kernel(model.support, model.support) @ th)
    if fam in ("softmax_head", "two_layer"):
        return 0.5 * model.lam * float(th @ th)
    return 0.0


def penalty_grad(model: TrainedModel, theta=None) -> np.ndarray:
    th = model.theta if theta is None else np.asarray(theta, dtype=float)
    fam = model.family
    if fam == "linear_ridge":
        return 2.0 * model.lam * th
    if fam in ("kernel_ridge", "svm_reg"):
        return 2.0 * model.lam * model.kernel(model.support, model.support) @ th
    if fam in ("softmax_head", "two_layer"):
        return model.lam * th
    return np.zeros_like(th)


def penalty_hessian(model: TrainedModel) -> np.ndarray:
    n = model.n_params
    fam = model.family
    if fam == "linear_ridge":
        return 2.0 * model.lam * np.eye(n)
    if fam in ("kernel_ridge", "svm_reg"):
        return 2.0 * model.lam * model.kernel(model.support, model.support)
    if fam in ("softmax_head", "two_layer"):
        return model.lam * np.eye(n)
    return np.zeros((n, n))


def objective(model, spec, ds: Dataset, theta=None, weights=None) -> float:
    """(1/m) sum_j w_j l(theta, z_j) + penalty, with m = len(ds) regardless of weights."""
    w = np.ones(ds.m) if weights is None else np.asarray(weights, dtype=float)
    return float(w @ loss(model, spec, ds.X, ds.y, theta) / ds.m) + penalty(model, theta)


def objective_grad(model, spec, ds: Dataset, theta=None, weights=None) -> np.ndarray:
    w = np.ones(ds.m) if weights is None else np.asarray(weights, dtype=float)
    return w @ grad(model, spec, ds.X, ds.y, theta) / ds.m + penalty_grad(model, theta)


# ------------------------------------------------------------------ trainers

def _loo_weights(m, exclude):
    w = np.ones(m)
    if exclude is not None:
        if not 0 <= exclude < m:
            raise InvalidArgument(f"index {exclude} out of range for m={m}")
        w[exclude] = 0.0
    return w


def train_ridge_closed_form(ds: Dataset, lam: float, exclude: int | None = None) -> TrainedModel:
    """argmin_w (1/m) sum_j (w.x_j - y_j)^2 + lam ||w||^2.

    With ``exclude=i`` the i-th term is dropped but the 1/m normalization is
    kept, which is the leave-one-out objective the influence estimate targets.
    """
    if not lam > 0:
        raise InvalidArgument("lambda must be > 0")
    w = _loo_weights(ds.m, exclude)
    Xw = ds.X * w[:, None]
    A = Xw.T @ ds.X / ds.m + lam * np.eye(ds.d)
    b = Xw.T @ ds.y / ds.m
    theta = scipy.linalg.solve(A, b, assume_a="pos")
    return TrainedModel("linear_ridge", theta, lam, ds.m,
                        info={"excluded": exclude} if exclude is not None else {})


def train_ridge_loo(ds: Dataset, i: int, lam: float) -> TrainedModel:
    if not 0 <= i < ds.m:
        raise InvalidArgument(f"index {i} out of range for m={ds.m}")
    return train_ridge_closed_form(ds, lam, exclude=i)


def train_kernel_ridge(ds: Dataset, kernel: KernelSpec, lam: float,
                       exclude: int | None = None) -> TrainedModel:
    """Dual solution (G + m lam I) a = y of kernel ridge regression.

    The leave-one-out variant drops row/column ``exclude`` but keeps the
    full-sample ``m`` in the ridge term.
    """
    if not lam > 0:
        raise InvalidArgument("lambda must be > 0")
    keep = np.flatnonzero(_loo_weights(ds.m, exclude))
    Xs, ys = ds.X[keep], ds.y[keep]
    G = kernel(Xs, Xs)
    try:
        c = scipy.linalg.cho_factor(G + ds.m * lam * np.eye(len(keep)))
        a = scipy.linalg.cho_solve(c, ys)
    except (np.linalg.LinAlgError, scipy.linalg.LinAlgError) as exc:
        raise NumericError(f"Gram solve failed: {exc}") from None
    if not np.all(np.isfinite(a)):
        raise NumericError("Gram solve produced non-finite coefficients")
    return TrainedModel("kernel_ridge", a, lam, ds.m, kernel=kernel.with_bound(ds.X),
                        support=Xs.copy())


def train_svm_regression(ds: Dataset, kernel: KernelSpec, lam: float, tau: float,
                         iters: int = 2000, seed: int = 0, batch: int | None = None,
                         exclude: int | None = None) -> TrainedModel:
    """Kernel SVM regression with the tau-insensitive loss.

    Projected subgradient descent in the RKHS (step 1/(2 lam t), projection
    onto ||h||_K <= sqrt(J(0)/lam)); returns the best iterate seen.
    ``batch`` < m switches to stochastic subgradients drawn with ``seed``.
    """
    if tau < 0:
        raise InvalidArgument("tau must be >= 0")
    if not lam > 0:
        raise InvalidArgument("lambda must be > 0")
    m = ds.m
    w = _loo_weights(m, exclude)
    G = kernel(ds.X, ds.X)
    rng = np.random.default_rng(seed)

    def J(a):
        r = G @ a - ds.y
        return float(w @ np.maximum(np.abs(r) - tau, 0.0) / m + lam * a @ G @ a)

    a = np.zeros(m)
    radius = math.sqrt(J(a) / lam)
    best_a, best = a.copy(), J(a)
    history = [best]
    for t in range(1, iters + 1):
        if batch is None or batch >= m:
            r = G @ a - ds.y
            s = np.where(np.abs(r) > tau, np.sign(r), 0.0) * w / m
        else:
            idx = rng.integers(0, m, size=batch)
            r = G[idx] @ a - ds.y[idx]
            s = np.zeros(m)
            np.add.at(s, idx, np.where(np.abs(r) > tau, np.sign(r), 0.0) * w[idx] / batch)
        g = s + 2.0 * lam * a
        a = a - g / (2.0 * lam * t)
        norm = math.sqrt(max(float(a @ G @ a), 0.0))
        if norm > radius:
            a *= radius / norm
        val = J(a)
        if val < best:
            best, best_a = val, a.copy()
        history.append(best)
    keep = w > 0
    return TrainedModel("svm_reg", best_a[keep], lam, m, kernel=kernel.with_bound(ds.X),
                        support=ds.X[keep].copy(), tau=tau, seed=seed,
                        info={"objective": best, "best_history": history})


def _class_labels(ds: Dataset) -> np.ndarray:
    labels = ds.class_tag if ds.class_tag is not None else ds.y
    lab = np.asarray(labels)
    if np.any(lab != np.round(lab)) or np.any(lab < 0):
        raise InvalidArgument("softmax_head needs non-negative integer class labels")
    return lab.astype(int)


def train_softmax_head(ds: Dataset, p: int, lam: float, epochs: int = 200, lr: float = 0.5,
                       seed: int = 0, exclude: int | None = None,
                       polish: bool = True) -> TrainedModel:
    """Multinomial logistic head on frozen random ReLU features.

    Minimizes (1/m) sum cross-entropy + (lam/2)||theta||^2 by full-batch
    gradient descent followed (``polish``) by L-BFGS to a tight gradient
    tolerance, so the result is a usable stationary point for influence
    estimates.  The descent step is capped at the inverse smoothness bound
    1 / (max ||phi||^2 / 2 + lam).
    """
    labels = _class_labels(ds)
    K = int(labels.max()) + 1
    if np.unique(labels).size < 2:
        raise InvalidArgument("softmax_head needs at least two classes present")
    if not lam > 0:
        raise InvalidArgument("lambda must be > 0")
    fm = FeatureMap(ds.d, p, seed)
    model = TrainedModel("softmax_head", np.zeros(K * p), lam, ds.m, feature_map=fm,
                         n_classes=K, seed=seed)
    lds = Dataset(ds.X, labels.astype(float), ds.class_tag)
    spec = softmax_xent_loss()
    w = _loo_weights(ds.m, exclude)
    phi = fm(ds.X)
    Y1 = np.eye(K)[labels]

    def f_and_g(th):
        logits = phi @ th.reshape(K, p).T
        lse = logsumexp(logits, axis=1)
        val = float(w @ (lse - logits[np.arange(ds.m), labels]) / ds.m + 0.5 * lam * th @ th)
        P = np.exp(logits - lse[:, None]) - Y1
        g = ((P * w[:, None]).T @ phi).ravel() / ds.m + lam * th
        return val, g

    th = model.theta.copy()
    start = f_and_g(th)[0]
    step = min(lr, 1.0 / (0.5 * float(np.max(np.sum(phi * phi, axis=1))) + lam))
    for _ in range(epochs):
        th -= step * f_and_g(th)[1]
    if polish:
        res = scipy.optimize.minimize(f_and_g, th, jac=True, method="L-BFGS-B",
                                      options={"gtol": 1e-12, "ftol": 1e-15, "maxiter": 5000})
        th = res.x
    model.theta = th
    model.info = {"objective_start": start, "objective": f_and_g(th)[0],
                  "grad_norm": float(np.linalg.norm(objective_grad(model, spec, lds, weights=w)))}
    return model


def train_two_layer(ds: Dataset, k: int, lam: float, epochs: int = 50, lr: float = 1.0,
                    batch: int = 100, seed: int = 0, freeze_a: bool = False,
                    exclude: int | None = None, theta0=None) -> TrainedModel:
    """Minibatch SGD on (f(W,a,x) - y)^2 + (lam/2)(||W||^2 + ||a||^2).

    W and a start uniform on [-1, 1] unless ``theta0`` is given; each epoch
    visits a fresh permutation.
    """
    if k < 1:
        raise InvalidArgument("k must be >= 1")
    rng = np.random.default_rng(seed)
    W0 = rng.uniform(-1.0, 1.0, size=(k, ds.d))
    a0 = rng.uniform(-1.0, 1.0, size=k)
    init = np.concatenate([W0.ravel(), a0]) if theta0 is None else np.asarray(theta0, float)
    model = TrainedModel("two_layer", init.copy(), lam, ds.m, hidden=k, seed=seed)
    spec = squared_loss()
    keep = np.flatnonzero(_loo_weights(ds.m, exclude))
    th = model.theta.copy()
    n_a = k
    start = objective(model, spec, ds, th)
    for _ in range(epochs):
        order = rng.permutation(keep)
        for s in range(0, len(order), batch):
            idx = order[s:s + batch]
            g = grad(model, spec, ds.X[idx], ds.y[idx], th).mean(axis=0) + lam * th
            if freeze_a:
                g[-n_a:] = 0.0
            th = th - lr * g
    model.theta = th
    model.info = {"objective_start": start, "objective": objective(model, spec, ds, th)}
    return model


# ----------------------------------------------------------------- constants

@dataclass(frozen=True)
class BoundedDomain:
    """Declared ranges for Lipschitz constants of the squared loss."""

    pred_bound: float
    label_bound: float


def lipschitz_of(spec: LossSpec, z, domain: BoundedDomain | None = None) -> float:
    """Per-example Lipschitz constant L(z) of theta -> l(theta, z).

    ``toy_exp``: sqrt(2) e^{-1/2} z^2.  ``squared`` on a linear model:
    2 (sup|f| + B) ||x||, which needs a bounded ``domain``.
    """
    if spec.family == "toy_exp":
        zv = float(np.asarray(z, dtype=float).reshape(-1)[0])
        return TOY_LIPSCHITZ * zv * zv
    if spec.family == "squared":
        if domain is None or not (math.isfinite(domain.pred_bound)
                                  and math.isfinite(domain.label_bound)):
            raise InvalidArgument("squared loss is Lipschitz only on a bounded domain")
        x = np.asarray(z, dtype=float).reshape(-1)
        return 2.0 * (domain.pred_bound + domain.label_bound) * float(np.linalg.norm(x))
    raise InvalidArgument(f"no Lipschitz formula for {spec.family}")


def toy_smoothness(z_max: float = 1.0, grid=None) -> float:
    """Numerical sup over theta of |d^2/dtheta^2 z^2 e^{-theta^2}| at z = z_max."""
    t = np.linspace(-10, 10, 200001) if grid is None else np.asarray(grid)
    return float(np.max(np.abs(z_max ** 2 * np.exp(-t * t) * (4 * t * t - 2))))


def squared_loss_sigma(pred_bound: float, label_bound: float) -> float:
    """sigma-admissibility constant of (f - y)^2 for |f| <= F, |y| <= B."""
    return 2.0 * (pred_bound + label_bound)


# ------------------------------------------------------------ trainer objects

def ridge_trainer(lam: float):
    """Callable ``(ds, exclude=None) -> TrainedModel`` for closed-form ridge."""
    def fit(ds, exclude=None):
        return train_ridge_closed_form(ds, lam, exclude=exclude)
    return fit


def kernel_ridge_trainer(kernel: KernelSpec, lam: float):
    def fit(ds, exclude=None):
        return train_kernel_ridge(ds, kernel, lam, exclude=exclude)
    return fit


def softmax_trainer(p: int, lam: float, epochs: int = 200, lr: float = 0.5, seed: int = 0):
    def fit(ds, exclude=None):
        return train_softmax_head(ds, p, lam, epochs=epochs, lr=lr, seed=seed, exclude=exclude)
    return fit
