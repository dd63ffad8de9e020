"""Rectified-flow schedule, Euler sampler and a toy velocity model.

Path: z_t = (1 - t) x0 + t eps, velocity target eps - x0, sampled from t = 1
down to t = 0.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import ShapeError, Tape, Tensor


@dataclass(frozen=True)
class FlowState:
    z: np.ndarray
    t: float

    def __post_init__(self):
        if not 0.0 <= self.t <= 1.0:
            raise ValueError(f"flow time must lie in [0, 1], got {self.t}")


def _check_pair(x0, eps):
    if np.shape(x0.value if isinstance(x0, Tensor) else x0) != np.shape(
            eps.value if isinstance(eps, Tensor) else eps):
        raise ShapeError(f"shape mismatch {np.shape(x0)} vs {np.shape(eps)}")


def rf_interpolate(x0, eps, t: float):
    """(1 - t) x0 + t eps; works on arrays or tape tensors."""
    if not 0.0 <= t <= 1.0:
        raise ValueError(f"t must lie in [0, 1], got {t}")
    if isinstance(x0, Tensor):
        if x0.shape != eps.shape:
            raise ShapeError(f"shape mismatch {x0.shape} vs {eps.shape}")
        return ad.add(ad.mul_scalar(x0, 1.0 - t), ad.mul_scalar(eps, t))
    x0 = np.asarray(x0, dtype=np.float64)
    eps = np.asarray(eps, dtype=np.float64)
    _check_pair(x0, eps)
    return (1.0 - t) * x0 + t * eps


def rf_velocity_target(x0, eps):
    if isinstance(x0, Tensor):
        return ad.sub(eps, x0)
    x0 = np.asarray(x0, dtype=np.float64)
    eps = np.asarray(eps, dtype=np.float64)
    _check_pair(x0, eps)
    return eps - x0


def euler_sample(velocity_fn, z1, n_steps: int) -> np.ndarray:
    """Uniform Euler steps from t = 1 to t = 0: z <- z - h * v(z, t)."""
    if n_steps < 1:
        raise ValueError("n_steps must be >= 1")
    z = np.array(z1, dtype=np.float64)
    for k in range(n_steps, 0, -1):
        t = k / n_steps
        h = t - (k - 1) / n_steps
        z = z - h * np.asarray(velocity_fn(z, t), dtype=np.float64)
    return z


# ------------------------------------------------------------- toy model

def hat_basis(t, n_knots: int) -> np.ndarray:
    """(N, K) piecewise-linear partition of unity over uniform knots on [0, 1]."""
    t = np.asarray(t, dtype=np.float64).reshape(-1)
    knots = np.linspace(0.0, 1.0, n_knots)
    gap = knots[1] - knots[0]
    return np.clip(1.0 - np.abs(t[:, None] - knots[None, :]) / gap, 0.0, 1.0)


class HatFlowModel:
    """Per-token x0 predictor, linear in its parameters, turned into a velocity.

    x_hat(z, t, c) = sum_k b_k(t) (z W_k + c U_k + beta_k) with hat functions
    b_k, and v = (z - x_hat) / t, which is the exact rectified-flow velocity
    whenever x_hat is the true x0. All parameters live in one matrix
    ``theta`` of shape (K (D + Dc + 1), D).
    """

    def __init__(self, dim: int, cond_dim: int = 0, n_knots: int = 9,
                 params: dict | None = None):
        if n_knots < 2:
            raise ValueError("need at least two knots")
        self.dim = dim
        self.cond_dim = cond_dim
        self.n_knots = n_knots
        if params is None:
            params = {"theta": np.zeros((n_knots * (dim + cond_dim + 1), dim))}
        self.params = params

    def features(self, z: np.ndarray, t: np.ndarray, cond: np.ndarray | None) -> np.ndarray:
        z = np.asarray(z, dtype=np.float64).reshape(-1, self.dim)
        n = len(z)
        b = hat_basis(np.broadcast_to(t, (n,)), self.n_knots)
        parts = [z]
        if self.cond_dim:
            if cond is None:
                raise ShapeError(f"model expects {self.cond_dim} conditioning channels")
            parts.append(np.asarray(cond, dtype=np.float64).reshape(n, self.cond_dim))
        parts.append(np.ones((n, 1)))
        base = np.concatenate(parts, axis=1)
        return (b[:, :, None] * base[:, None, :]).reshape(n, -1)

    def velocity_t(self, theta: Tensor, z: np.ndarray, t: np.ndarray, cond) -> Tensor:
        tape = theta.tape
        z = np.asarray(z, dtype=np.float64).reshape(-1, self.dim)
        t = np.broadcast_to(np.asarray(t, dtype=np.float64).reshape(-1, 1), z.shape)
        x_hat = ad.matmul(tape.constant(self.features(z, t[:, 0], cond)), theta)
        return ad.mul(tape.constant(1.0 / t), ad.sub(tape.constant(z), x_hat))

    def jacobian_rows(self, z: np.ndarray, t: np.ndarray, cond) -> np.ndarray:
        """d v_d / d theta[:, d], identical for every output column d."""
        t = np.asarray(t, dtype=np.float64).reshape(-1)
        return -self.features(z, t, cond) / t[:, None]

    def velocity(self, z, t, cond=None) -> np.ndarray:
        shape = np.shape(z)
        tape = Tape(record=False)
        v = self.velocity_t(tape.constant(self.params["theta"]), z, t, cond)
        return v.value.reshape(shape)


def logit_normal(rng: np.random.Generator, n: int) -> np.ndarray:
    return 1.0 / (1.0 + np.exp(-rng.normal(size=n)))


def train_toy_flow(x0: np.ndarray, model: HatFlowModel, steps: int, lr: float = 0.5,
                   batch: int = 256, seed: int = 0, cond: np.ndarray | None = None,
                   betas=(0.9, 0.999), cosine: bool = True,
                   optimizer: str = "newton") -> tuple[HatFlowModel, list[float]]:
    """Minimize the velocity MSE over sampled (x0, eps, t).

    Returns a new model and the per-step loss curve. ``optimizer="newton"``
    preconditions the tape gradient with a running average of the batch
    Jacobian Gram matrix, which is the loss Hessian because the loss is
    quadratic in ``theta``. It converges fast when every feature is active in
    most batches; for sparse conditioning features ``"adam"`` is the safer
    choice because its steps stay bounded. With ``cosine`` the
    step size decays from ``lr`` to 0 over ``steps``.
    """
    if optimizer not in ("newton", "adam"):
        raise ValueError(f"unknown optimizer {optimizer!r}")
    x0 = np.asarray(x0, dtype=np.float64).reshape(-1, model.dim)
    if len(x0) == 0:
        raise ValueError("dataset is empty")
    if cond is not None:
        cond = np.asarray(cond, dtype=np.float64).reshape(len(x0), model.cond_dim)
    rng = np.random.default_rng(seed)
    theta = model.params["theta"].copy()
    m = np.zeros_like(theta)
    s = np.zeros_like(theta)
    b1, b2 = betas
    hess = None
    losses = []
    for step in range(1, steps + 1):
        pick = rng.integers(0, len(x0), size=batch)
        xb = x0[pick]
        eps = rng.normal(size=xb.shape)
        t = logit_normal(rng, batch)
        zt = (1.0 - t[:, None]) * xb + t[:, None] * eps
        tape = Tape()
        th = tape.leaf(theta)
        v = model.velocity_t(th, zt, t, None if cond is None else cond[pick])
        r = ad.sub(v, tape.constant(eps - xb))
        loss = ad.mean_all(ad.mul(r, r))
        g = ad.backward(tape, loss)[th]
        losses.append(float(loss.value))
        rate = lr * 0.5 * (1.0 + np.cos(np.pi * (step - 1) / steps)) if cosine else lr
        if optimizer == "newton":
            a = model.jacobian_rows(zt, t, None if cond is None else cond[pick])
            gram = (2.0 / (batch * model.dim)) * (a.T @ a)
            hess = gram if hess is None else b1 * hess + (1 - b1) * gram
            damp = 1e-9 * np.trace(hess) / len(hess) + 1e-300
            theta = theta - rate * np.linalg.solve(hess + damp * np.eye(len(hess)), g)
        else:
            m = b1 * m + (1 - b1) * g
            s = b2 * s + (1 - b2) * g * g
            theta = theta - rate * (m / (1 - b1 ** step)) / (np.sqrt(s / (1 - b2 ** step)) + 1e-12)
    return HatFlowModel(model.dim, model.cond_dim, model.n_knots, {"theta": theta}), losses


def sample_flow(model: HatFlowModel, n: int, n_steps: int, seed: int = 0,
                cond: np.ndarray | None = None) -> np.ndarray:
    """Draw ``n`` tokens from N(0, I) at t = 1 and integrate the model velocity to t = 0."""
    rng = np.random.default_rng(seed)
    z1 = rng.normal(size=(n, model.dim))
    return euler_sample(lambda z, t: model.velocity(z, t, cond), z1, n_steps)
