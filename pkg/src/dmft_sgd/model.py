"""Multi-index learning problem: loss, activation, teacher, regularizer.

The gradient of the empirical risk separates into a data term built from
``f(xi, w_star, eps) = L'(sigma(xi), y) * grad sigma(xi)`` with label
``y = sigma_star(w_star, eps)``, and a regularizer term ``g(theta)``.
All evaluators here are vectorized over a leading batch axis.
"""

from dataclasses import dataclass, field
from typing import Callable, Optional, Union

import numpy as np

from .errors import InvalidInputError, StructuralError

FD_STEP = 1e-5


# ---------------------------------------------------------------------------
# losses: functions of the residual r = y_hat - y

class SquaredLoss:
    name = "squared"

    def value(self, y_hat, y):
        return 0.5 * (y_hat - y) ** 2

    def d1(self, y_hat, y):
        """Derivative in the first argument."""
        return y_hat - y

    def d11(self, y_hat, y):
        return np.ones_like(np.asarray(y_hat, dtype=float))


class HuberLoss:
    """Huber loss with threshold c; second derivative 0 at the kink |r| = c."""

    name = "huber"

    def __init__(self, threshold: float = 1.0):
        if threshold <= 0:
            raise InvalidInputError("Huber threshold must be positive")
        self.threshold = float(threshold)

    def value(self, y_hat, y):
        r = y_hat - y
        c = self.threshold
        return np.where(np.abs(r) < c, 0.5 * r**2, c * (np.abs(r) - 0.5 * c))

    def d1(self, y_hat, y):
        r = y_hat - y
        c = self.threshold
        return np.clip(r, -c, c)

    def d11(self, y_hat, y):
        r = y_hat - y
        return (np.abs(r) < self.threshold).astype(float)


# ---------------------------------------------------------------------------
# activations sigma: R^k -> R, separable sums so k = 1 reduces to the scalar map

class _SeparableActivation:
    """sigma(xi) = sum_i s(xi_i); grad and Hessian follow coordinatewise."""

    def value(self, xi):
        return self._s(xi).sum(axis=-1)

    def grad(self, xi):
        return self._ds(xi)

    def hess_diag(self, xi):
        return self._d2s(xi)


class LinearActivation(_SeparableActivation):
    name = "linear"

    def _s(self, x):
        return x

    def _ds(self, x):
        return np.ones_like(x)

    def _d2s(self, x):
        return np.zeros_like(x)


class TanhActivation(_SeparableActivation):
    name = "tanh"

    def _s(self, x):
        return np.tanh(x)

    def _ds(self, x):
        return 1.0 - np.tanh(x) ** 2

    def _d2s(self, x):
        t = np.tanh(x)
        return -2.0 * t * (1.0 - t**2)


class SinActivation(_SeparableActivation):
    name = "sin"

    def _s(self, x):
        return np.sin(x)

    def _ds(self, x):
        return np.cos(x)

    def _d2s(self, x):
        return -np.sin(x)


# ---------------------------------------------------------------------------
# teachers sigma_star: R^{k*} x R -> R

class Teacher:
    """Label map. ``value`` takes (..., k_star) and (...,) arrays.

    ``dwstar`` returns the (..., k_star) gradient in w_star.  ``affine_stats``
    returns (a, noise_second_moment) when sigma_star = a * sum(w_star) + h(eps)
    with E[h] = 0, else None; the linear-model analytic map requires it.
    """

    def value(self, w_star, eps):
        raise NotImplementedError

    def dwstar(self, w_star, eps):
        raise NotImplementedError

    def affine_stats(self, noise_law):
        return None


class IdentityTeacher(Teacher):
    """y = sum(w_star); noiseless linear labels."""

    name = "identity"

    def value(self, w_star, eps):
        return np.asarray(w_star).sum(axis=-1)

    def dwstar(self, w_star, eps):
        return np.ones_like(w_star)

    def affine_stats(self, noise_law):
        return 1.0, 0.0


class NoisyLinearTeacher(Teacher):
    """y = sum(w_star) + eps; plain noisy linear regression."""

    name = "linear_noisy"

    def value(self, w_star, eps):
        return np.asarray(w_star).sum(axis=-1) + eps

    def dwstar(self, w_star, eps):
        return np.ones_like(w_star)

    def affine_stats(self, noise_law):
        return 1.0, noise_law.variance


class TanhTeacher(Teacher):
    """y = tanh(sum(w_star) + eps)."""

    name = "tanh_noisy"

    def value(self, w_star, eps):
        return np.tanh(np.asarray(w_star).sum(axis=-1) + eps)

    def dwstar(self, w_star, eps):
        d = 1.0 - np.tanh(np.asarray(w_star).sum(axis=-1) + eps) ** 2
        return d[..., None] * np.ones_like(w_star)


class SinTeacher(Teacher):
    """y = sin(sum(w_star)) + eps."""

    name = "sin_noisy"

    def value(self, w_star, eps):
        return np.sin(np.asarray(w_star).sum(axis=-1)) + eps

    def dwstar(self, w_star, eps):
        d = np.cos(np.asarray(w_star).sum(axis=-1))
        return d[..., None] * np.ones_like(w_star)


class CustomTeacher(Teacher):
    """Caller-supplied label map; derivative falls back to central differences."""

    name = "custom"

    def __init__(self, fn: Callable, dwstar_fn: Optional[Callable] = None):
        self.fn = fn
        self.dwstar_fn = dwstar_fn

    def value(self, w_star, eps):
        return self.fn(w_star, eps)

    def dwstar(self, w_star, eps):
        if self.dwstar_fn is not None:
            return self.dwstar_fn(w_star, eps)
        w = np.asarray(w_star, dtype=float)
        out = np.empty_like(w)
        for j in range(w.shape[-1]):
            h = np.zeros_like(w)
            h[..., j] = FD_STEP
            out[..., j] = (self.fn(w + h, eps) - self.fn(w - h, eps)) / (2 * FD_STEP)
        return out


# ---------------------------------------------------------------------------
# regularizer, noise law, initialization law

@dataclass(frozen=True)
class Ridge:
    lam: float = 0.0

    def __post_init__(self):
        if self.lam < 0:
            raise InvalidInputError("ridge penalty must be nonnegative")

    def g(self, theta):
        return self.lam * np.asarray(theta, dtype=float)

    def dg(self, k: int):
        return self.lam * np.eye(k)


@dataclass(frozen=True)
class NoiseLaw:
    """Law of the label noise eps: centered Gaussian or a point mass at 0."""

    variance: float = 0.0

    def sample(self, rng, size):
        if self.variance == 0.0:
            return np.zeros(() if size is None else size)
        return rng.normal(0.0, np.sqrt(self.variance), size)


@dataclass(frozen=True)
class InitLaw:
    """Mean-zero Gaussian joint law of (theta0, theta_star) rows."""

    cov: np.ndarray
    k: int
    k_star: int

    @classmethod
    def from_blocks(cls, self_block, cross_block, star_block):
        s = np.atleast_2d(np.asarray(self_block, dtype=float))
        c = np.atleast_2d(np.asarray(cross_block, dtype=float))
        t = np.atleast_2d(np.asarray(star_block, dtype=float))
        k, k_star = s.shape[0], t.shape[0]
        if c.shape != (k, k_star):
            raise StructuralError("cross block must be k x k_star")
        cov = np.block([[s, c], [c.T, t]])
        return cls(cov=cov, k=k, k_star=k_star)

    def __post_init__(self):
        cov = np.asarray(self.cov, dtype=float)
        if cov.shape != (self.k + self.k_star,) * 2:
            raise StructuralError("init covariance has the wrong shape")
        if not np.allclose(cov, cov.T):
            raise StructuralError("init covariance must be symmetric")
        if np.linalg.eigvalsh(cov).min() < -1e-10:
            raise StructuralError("init covariance must be PSD")
        object.__setattr__(self, "cov", cov)

    @property
    def self_block(self):
        return self.cov[: self.k, : self.k]

    @property
    def cross_block(self):
        return self.cov[: self.k, self.k :]

    @property
    def star_block(self):
        return self.cov[self.k :, self.k :]

    def factor(self):
        """Square root of the covariance via eigendecomposition (PSD-safe)."""
        w, v = np.linalg.eigh(self.cov)
        return v * np.sqrt(np.clip(w, 0.0, None))

    def sample(self, rng, size=None):
        dim = self.k + self.k_star
        shape = (dim,) if size is None else (size, dim)
        z = np.einsum("ij,...j->...i", self.factor(), rng.standard_normal(shape))
        return z[..., : self.k], z[..., self.k :]


_LOSSES = {"squared": SquaredLoss, "huber": HuberLoss}
_ACTIVATIONS = {"linear": LinearActivation, "tanh": TanhActivation, "sin": SinActivation}
_TEACHERS = {
    "identity": IdentityTeacher,
    "linear_noisy": NoisyLinearTeacher,
    "tanh_noisy": TanhTeacher,
    "sin_noisy": SinTeacher,
}


@dataclass
class ModelSpec:
    """Problem instance: dimensions, rates, and the (L, sigma, sigma_star, G) maps."""

    k: int = 1
    k_star: int = 1
    gamma: float = 1.0
    kappa_bar: float = 1.0
    eta_schedule: Union[float, Callable[[float], float]] = 1.0
    driver: str = "poisson"
    loss: object = field(default_factory=SquaredLoss)
    activation: object = field(default_factory=LinearActivation)
    teacher: Teacher = field(default_factory=IdentityTeacher)
    regularizer: Ridge = field(default_factory=Ridge)
    init_law: Optional[InitLaw] = None
    noise_law: NoiseLaw = field(default_factory=NoiseLaw)

    def __post_init__(self):
        if self.k < 1 or self.k_star < 1:
            raise InvalidInputError("k and k_star must be >= 1")
        if self.gamma <= 0 or self.kappa_bar <= 0:
            raise InvalidInputError("gamma and kappa_bar must be positive")
        if self.driver not in ("poisson", "gaussian"):
            raise InvalidInputError(f"unknown driver {self.driver!r}")
        if isinstance(self.loss, str):
            self.loss = _LOSSES[self.loss]()
        if isinstance(self.activation, str):
            self.activation = _ACTIVATIONS[self.activation]()
        if isinstance(self.teacher, str):
            self.teacher = _TEACHERS[self.teacher]()
        if self.init_law is None:
            self.init_law = InitLaw.from_blocks(
                np.eye(self.k), np.zeros((self.k, self.k_star)), np.eye(self.k_star)
            )

    def eta(self, t):
        """Learning-rate schedule eta_bar evaluated at (epoch) time t."""
        if callable(self.eta_schedule):
            t = np.asarray(t, dtype=float)
            if t.ndim == 0:
                return float(self.eta_schedule(float(t)))
            return np.array([float(self.eta_schedule(ti)) for ti in t])
        return float(self.eta_schedule) * np.ones_like(np.asarray(t, dtype=float))

    def eta_on_grid(self, grid):
        vals = np.asarray(self.eta(grid.times), dtype=float)
        if vals.shape != grid.times.shape or np.any(vals < 0) or not np.all(np.isfinite(vals)):
            raise InvalidInputError("eta schedule must be finite and nonnegative on the grid")
        return vals


# ---------------------------------------------------------------------------
# batched evaluators of f, its Jacobians, and g

def _check_finite(*arrays):
    for a in arrays:
        if not np.all(np.isfinite(a)):
            raise InvalidInputError("non-finite input")


def labels(spec, w_star, eps):
    return spec.teacher.value(np.asarray(w_star, dtype=float), np.asarray(eps, dtype=float))


def f_batch(spec, xi, w_star, eps):
    """f = L'(sigma(xi), y) grad sigma(xi) on a leading batch axis."""
    xi = np.asarray(xi, dtype=float)
    y = labels(spec, w_star, eps)
    lp = spec.loss.d1(spec.activation.value(xi), y)
    return lp[..., None] * spec.activation.grad(xi)


def dxi_f_batch(spec, xi, w_star, eps):
    """Jacobian of f in xi, shape (..., k, k)."""
    xi = np.asarray(xi, dtype=float)
    y = labels(spec, w_star, eps)
    s = spec.activation.value(xi)
    gs = spec.activation.grad(xi)
    lp = spec.loss.d1(s, y)
    lpp = spec.loss.d11(s, y)
    out = lpp[..., None, None] * gs[..., :, None] * gs[..., None, :]
    hd = spec.activation.hess_diag(xi)
    idx = np.arange(xi.shape[-1])
    out[..., idx, idx] += lp[..., None] * hd
    return out


def dwstar_f_batch(spec, xi, w_star, eps):
    """Jacobian of f in w_star, shape (..., k, k_star).

    For losses of the residual y_hat - y, dL'/dy = -L'', so only the label
    derivative of the teacher enters.
    """
    xi = np.asarray(xi, dtype=float)
    w_star = np.asarray(w_star, dtype=float)
    y = labels(spec, w_star, eps)
    lpp = spec.loss.d11(spec.activation.value(xi), y)
    gs = spec.activation.grad(xi)
    dy = spec.teacher.dwstar(w_star, np.asarray(eps, dtype=float))
    return -lpp[..., None, None] * gs[..., :, None] * dy[..., None, :]


def eval_f(xi, w_star, eps, spec):
    """Gradient-component f(xi, w_star, eps) as a k-vector."""
    xi = np.atleast_1d(np.asarray(xi, dtype=float))
    w_star = np.atleast_1d(np.asarray(w_star, dtype=float))
    _check_finite(xi, w_star, eps)
    return f_batch(spec, xi, w_star, np.asarray(eps, dtype=float))


def eval_f_jacobians(xi, w_star, eps, spec):
    """Analytic Jacobians (D_xi f, D_wstar f) of eval_f."""
    xi = np.atleast_1d(np.asarray(xi, dtype=float))
    w_star = np.atleast_1d(np.asarray(w_star, dtype=float))
    _check_finite(xi, w_star, eps)
    eps = np.asarray(eps, dtype=float)
    return dxi_f_batch(spec, xi, w_star, eps), dwstar_f_batch(spec, xi, w_star, eps)


def eval_g(theta, spec):
    """Regularizer gradient g(theta) = lambda * theta."""
    return spec.regularizer.g(theta)


def eval_Dg(theta, spec):
    """Regularizer Jacobian, lambda * Id_k for ridge."""
    return spec.regularizer.dg(spec.k)


def fd_jacobian(fn, x, step=FD_STEP):
    """Central finite-difference Jacobian of fn at x (1d input)."""
    x = np.asarray(x, dtype=float)
    f0 = np.asarray(fn(x), dtype=float)
    jac = np.empty(f0.shape + x.shape)
    for j in range(x.size):
        h = np.zeros_like(x)
        h[j] = step
        jac[..., j] = (np.asarray(fn(x + h)) - np.asarray(fn(x - h))) / (2 * step)
    return jac
