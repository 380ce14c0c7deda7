"""Neural parametrization of the initial density and momentum fields.

A small feed-forward network (tanh hidden layers; softplus output for the
raw density so it is strictly positive, tanh scaled by a data-derived
bound for the momentum) is fitted to the t = 0 observation by minimizing
the squared Hellinger distance of the normalized density plus the
integrated squared momentum mismatch.  Gradients are reverse-mode by
hand, and training uses ADAM with a learning rate scheduled inversely in
the iteration number.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from flockident.observation import GridSpec, hellinger_sq

__all__ = [
    "NetWeights",
    "init_weights",
    "net_forward",
    "normalized_density",
    "momentum_field",
    "initial_fields",
    "fit_loss",
    "fit_loss_and_grad",
    "adam_minimize",
    "adam_train",
]


@dataclass
class NetWeights:
    """Flat weight vector plus the architecture it parameterizes."""

    hidden_widths: tuple[int, ...]
    momentum_scale: float
    input_scale: float
    values: np.ndarray

    def __post_init__(self):
        self.hidden_widths = tuple(int(h) for h in self.hidden_widths)
        self.values = np.asarray(self.values, dtype=float).ravel()
        if len(self.values) != weight_count(self.hidden_widths):
            raise ValueError(
                f"weight vector has {len(self.values)} entries, architecture "
                f"{self.hidden_widths} needs {weight_count(self.hidden_widths)}"
            )
        if not np.all(np.isfinite(self.values)):
            raise ValueError("weights must be finite")

    def layers(self):
        """Unpack into [(W, b), ...] views of the flat vector."""
        dims = (3,) + self.hidden_widths + (4,)
        out = []
        pos = 0
        for d_in, d_out in zip(dims[:-1], dims[1:]):
            W = self.values[pos : pos + d_in * d_out].reshape(d_out, d_in)
            pos += d_in * d_out
            b = self.values[pos : pos + d_out]
            pos += d_out
            out.append((W, b))
        return out

    def replace_values(self, values: np.ndarray) -> "NetWeights":
        return NetWeights(self.hidden_widths, self.momentum_scale, self.input_scale, values)


def weight_count(hidden_widths) -> int:
    dims = (3,) + tuple(hidden_widths) + (4,)
    return sum(i * o + o for i, o in zip(dims[:-1], dims[1:]))


def init_weights(hidden_widths=(50, 50), seed: int = 0, momentum_scale: float = 1.0,
                 input_scale: float = 1.0) -> NetWeights:
    """He-style Gaussian initialization, deterministic per seed."""
    rng = np.random.default_rng(seed)
    dims = (3,) + tuple(hidden_widths) + (4,)
    chunks = []
    for d_in, d_out in zip(dims[:-1], dims[1:]):
        chunks.append(rng.normal(0.0, 1.0 / np.sqrt(d_in), size=d_in * d_out))
        chunks.append(np.zeros(d_out))
    return NetWeights(tuple(hidden_widths), momentum_scale, input_scale,
                      np.concatenate(chunks))


def _softplus(z):
    return np.logaddexp(0.0, z)


def _sigmoid(z):
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def _forward(wts: NetWeights, points: np.ndarray):
    """Batch forward pass; returns outputs plus the cache for backprop."""
    a = np.atleast_2d(points) * wts.input_scale
    layers = wts.layers()
    acts = [a]
    for W, b in layers[:-1]:
        a = np.tanh(a @ W.T + b)
        acts.append(a)
    W_out, b_out = layers[-1]
    z_out = a @ W_out.T + b_out
    rho_raw = _softplus(z_out[:, 0])
    mom = wts.momentum_scale * np.tanh(z_out[:, 1:4])
    return rho_raw, mom, (acts, z_out)


def _backward(wts: NetWeights, cache, d_rho_raw: np.ndarray, d_mom: np.ndarray) -> np.ndarray:
    """Accumulate the flat-weight gradient given output sensitivities."""
    acts, z_out = cache
    layers = wts.layers()
    d_z = np.empty_like(z_out)
    d_z[:, 0] = d_rho_raw * _sigmoid(z_out[:, 0])
    th = np.tanh(z_out[:, 1:4])
    d_z[:, 1:4] = d_mom * wts.momentum_scale * (1.0 - th * th)

    grads = [None] * len(layers)
    for li in range(len(layers) - 1, -1, -1):
        W, _ = layers[li]
        a_in = acts[li]
        gW = d_z.T @ a_in
        gb = d_z.sum(axis=0)
        grads[li] = (gW, gb)
        if li > 0:
            d_a = d_z @ W
            d_z = d_a * (1.0 - acts[li] * acts[li])

    flat = np.concatenate([np.concatenate([gW.ravel(), gb]) for gW, gb in grads])
    return flat


def net_forward(wts: NetWeights, x):
    """Raw density (strictly positive) and momentum at one or many points."""
    x = np.asarray(x, dtype=float)
    single = x.ndim == 1
    rho_raw, mom, _ = _forward(wts, x)
    if single:
        return float(rho_raw[0]), mom[0]
    return rho_raw, mom


def normalized_density(wts: NetWeights, spec: GridSpec, mask: np.ndarray) -> np.ndarray:
    """Network density on fluid cell centers, zero elsewhere, scaled so
    the Riemann mass over the grid is exactly one."""
    fluid = mask == 0
    if not np.any(fluid):
        raise ValueError("grid has no fluid cells")
    pts = spec.center_points()[fluid]
    rho_raw, _, _ = _forward(wts, pts)
    n = spec.cells_per_axis
    rho = np.zeros((n, n, n))
    rho[fluid] = rho_raw / (rho_raw.sum() * spec.cell_volume)
    return rho


def momentum_field(wts: NetWeights, spec: GridSpec, mask: np.ndarray) -> np.ndarray:
    """Network momentum on fluid cell centers, zero elsewhere."""
    fluid = mask == 0
    pts = spec.center_points()[fluid]
    _, mom, _ = _forward(wts, pts)
    n = spec.cells_per_axis
    j = np.zeros((3, n, n, n))
    j[:, fluid] = mom.T
    return j


def initial_fields(wts: NetWeights, spec: GridSpec, mask: np.ndarray):
    return normalized_density(wts, spec, mask), momentum_field(wts, spec, mask)


def fit_loss(wts: NetWeights, q0: np.ndarray, j0_hat: np.ndarray,
             spec: GridSpec, mask: np.ndarray) -> float:
    """Hellinger misfit of the normalized density against q0 plus the
    integrated squared momentum mismatch over fluid cells."""
    loss, _ = fit_loss_and_grad(wts, q0, j0_hat, spec, mask, need_grad=False)
    return loss


def fit_loss_and_grad(wts: NetWeights, q0: np.ndarray, j0_hat: np.ndarray,
                      spec: GridSpec, mask: np.ndarray, need_grad: bool = True):
    fluid = mask == 0
    pts = spec.center_points()[fluid]
    vol = spec.cell_volume
    q_fluid = np.asarray(q0)[fluid]
    j_target = np.asarray(j0_hat)[:, fluid].T  # (n_fluid, 3)

    rho_raw, mom, cache = _forward(wts, pts)
    total = rho_raw.sum() * vol
    rho = rho_raw / total

    sq_rho = np.sqrt(rho)
    sq_q = np.sqrt(q_fluid)
    hell = 0.5 * np.sum((sq_rho - sq_q) ** 2) * vol
    # Cells outside the fluid region carry model density zero.
    hell += 0.5 * float(np.asarray(q0)[~fluid].sum()) * vol

    dm = mom - j_target
    mom_term = np.sum(dm * dm) * vol
    loss = float(hell + mom_term)
    if not need_grad:
        return loss, None

    # d hell / d rho_c, with a zero subgradient where both densities vanish.
    with np.errstate(divide="ignore", invalid="ignore"):
        ratio = np.where(sq_rho > 0, sq_q / np.maximum(sq_rho, 1e-300), 0.0)
    g_rho = 0.5 * vol * (1.0 - ratio)
    g_rho[(rho == 0) & (q_fluid == 0)] = 0.0
    # Through the normalization rho = raw / (sum(raw) * vol).
    g_raw = (g_rho - vol * np.dot(g_rho, rho)) / total
    g_mom = 2.0 * vol * dm

    grad = _backward(wts, cache, g_raw, g_mom)
    return loss, grad


def adam_minimize(fun_grad, x0: np.ndarray, steps: int, base_rate: float,
                  beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
    """ADAM with the learning rate scheduled as base_rate / (1 + t).

    `fun_grad(x) -> (loss, grad)`.  Returns (best iterate seen, loss trace).
    Aborts on a non-finite loss.
    """
    if steps < 1:
        raise ValueError("need at least one step")
    x = np.asarray(x0, dtype=float).copy()
    m = np.zeros_like(x)
    v = np.zeros_like(x)
    trace = np.empty(steps)
    best_loss = np.inf
    best_x = x.copy()
    for t in range(steps):
        loss, grad = fun_grad(x)
        if not np.isfinite(loss):
            raise RuntimeError(f"non-finite loss {loss} at ADAM iteration {t}")
        trace[t] = loss
        if loss < best_loss:
            best_loss = loss
            best_x = x.copy()
        m = beta1 * m + (1.0 - beta1) * grad
        v = beta2 * v + (1.0 - beta2) * grad * grad
        m_hat = m / (1.0 - beta1 ** (t + 1))
        v_hat = v / (1.0 - beta2 ** (t + 1))
        lr = base_rate / (1.0 + t)
        x = x - lr * m_hat / (np.sqrt(v_hat) + eps)
    return best_x, trace


def adam_train(q0: np.ndarray, j0_hat: np.ndarray, spec: GridSpec, mask: np.ndarray,
               hidden_widths=(50, 50), steps: int = 5000, base_rate: float = 1e-2,
               seed: int = 0):
    """Fit the network to the t = 0 observation.

    The momentum output bound is set to the largest momentum component in
    the data; inputs are scaled by the arena half-width so the first tanh
    layer is not saturated.  Returns (best weights, loss trace).
    """
    scale = float(np.max(np.abs(j0_hat))) if np.any(j0_hat) else 1.0
    wts0 = init_weights(hidden_widths, seed=seed, momentum_scale=scale,
                        input_scale=1.0 / spec.spatial_half_width)

    def fun_grad(values):
        return fit_loss_and_grad(wts0.replace_values(values), q0, j0_hat, spec, mask)

    best, trace = adam_minimize(fun_grad, wts0.values, steps, base_rate)
    return wts0.replace_values(best), trace
