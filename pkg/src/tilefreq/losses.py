"""Multi-label and metric-learning losses with analytic gradients.

Every classification loss takes logits and binary targets of the same shape
(a class vector or a batch x class matrix) and returns ``(loss, grad)`` where
``loss`` is the mean over all elements (sigmoidF1 excepted) and ``grad`` is
the derivative of that loss with respect to the logits. All losses are
minimized; term signs are chosen so the gradient pushes each probability
toward its target.
"""

from dataclasses import dataclass

import numpy as np


class LossDomainError(ValueError):
    pass


def _softplus(z):
    return np.logaddexp(0.0, z)


def _sigmoid(z):
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def _check(logits, targets):
    z = np.asarray(logits, dtype=np.float64)
    y = np.asarray(targets, dtype=np.float64)
    if z.shape != y.shape:
        raise LossDomainError(f"logits {z.shape} and targets {y.shape} differ in shape")
    if z.size == 0:
        raise LossDomainError("empty input")
    if not np.all((y == 0) | (y == 1)):
        raise LossDomainError("targets must be binary")
    return z, y


def class_weights(targets):
    """Inverse label frequency per class, scaled to mean one; unseen classes count once."""
    y = np.atleast_2d(np.asarray(targets, dtype=np.float64))
    freq = np.maximum(y.sum(axis=0), 1.0) / len(y)
    w = 1.0 / freq
    return w / w.mean()


def bce_with_logits(logits, targets, weights=None):
    """Binary cross-entropy on logits; ``weights`` scale the positive term per class."""
    z, y = _check(logits, targets)
    w = 1.0 if weights is None else np.asarray(weights, dtype=np.float64)
    p = _sigmoid(z)
    elem = w * y * _softplus(-z) + (1.0 - y) * _softplus(z)
    if weights is None:
        grad = p - y
    else:
        grad = -w * y * (1.0 - p) + (1.0 - y) * p
    return float(elem.mean()), grad / z.size


def _focal_positive(z_pos, gamma):
    """Loss ``-(1-q)^gamma log q`` with ``q = sigmoid(z_pos)`` and its logit derivative."""
    q = _sigmoid(z_pos)
    one_minus = _sigmoid(-z_pos)
    log_q = -_softplus(-z_pos)
    loss = -(one_minus**gamma) * log_q
    grad = gamma * q * one_minus**gamma * log_q - one_minus ** (gamma + 1.0)
    return loss, grad


def asl(logits, targets, gamma_pos=1.0, gamma_neg=4.0, margin=0.05):
    """Asymmetric loss with probability margin ``p_m = max(p - margin, 0)`` on negatives."""
    if gamma_pos < 0 or gamma_neg < 0:
        raise LossDomainError("focusing exponents must be non-negative")
    if not 0.0 <= margin < 1.0:
        raise LossDomainError("margin must lie in [0, 1)")
    z, y = _check(logits, targets)
    pos_loss, pos_grad = _focal_positive(z, gamma_pos)

    p = _sigmoid(z)
    q = _sigmoid(-z)
    pm = np.maximum(p - margin, 0.0)
    active = pm > 0
    if margin == 0.0:
        log_1m = -_softplus(z)
        one_m = q
    else:
        one_m = q + margin
        log_1m = np.where(active, np.log(one_m), 0.0)
    pm_g = np.where(active, pm, 1.0) ** gamma_neg
    neg_loss = np.where(active, -pm_g * log_1m, 0.0)
    # d/dp_m of -p_m^g log(1 - p_m), times dp_m/dz = p (1 - p)
    dpm = pm_g / one_m
    if gamma_neg != 0:
        dpm = dpm - gamma_neg * np.where(active, pm, 1.0) ** (gamma_neg - 1.0) * log_1m
    neg_grad = np.where(active, p * q * dpm, 0.0)

    elem = y * pos_loss + (1.0 - y) * neg_loss
    grad = y * pos_grad + (1.0 - y) * neg_grad
    return float(elem.mean()), grad / z.size


def hill(logits, targets, lam=1.5, gamma=2.0, margin=1.0):
    """Hill loss: focal positive term on ``sigmoid(z - margin)``, ``(lam - p) p^2`` on negatives."""
    if not lam > 1.0:
        raise LossDomainError("lambda must exceed 1")
    z, y = _check(logits, targets)
    pos_loss, pos_grad = _focal_positive(z - margin, gamma)
    p = _sigmoid(z)
    neg_loss = (lam - p) * p**2
    neg_grad = (2.0 * lam * p - 3.0 * p**2) * p * _sigmoid(-z)
    elem = y * pos_loss + (1.0 - y) * neg_loss
    grad = y * pos_grad + (1.0 - y) * neg_grad
    return float(elem.mean()), grad / z.size


def sigmoid_f1(logits, targets, S=-1.0, E=0.0):
    """``1 - soft F1`` with counts pooled over the whole batch.

    ``S`` and ``E`` are the sweep parameters (``beta = -S``, ``eta = E``) of
    ``sigmoid(beta * (u + eta))``. With no positive targets and all soft
    predictions zero the loss is 1 and the gradient zero.
    """
    z, y = _check(logits, targets)
    beta, eta = -S, E
    s = _sigmoid(beta * (z + eta))
    tp = float(np.sum(s * y))
    denom = float(np.sum(y) + np.sum(s))  # 2tp + fp + fn
    if denom == 0.0:
        return 1.0, np.zeros_like(z)
    loss = 1.0 - 2.0 * tp / denom
    ds = -2.0 * (y * denom - tp) / denom**2
    grad = ds * beta * s * _sigmoid(-beta * (z + eta))
    return loss, grad


def triplet(za, zn, zd, margin=0.1, eps=1e-12):
    """Hinge ``max(0, |za - zn| - |za - zd| + margin)``, averaged over rows.

    Returns ``(loss, (grad_a, grad_n, grad_d))``. Gradients are zero where
    the hinge is inactive or exactly at it; the norm derivative uses
    ``max(norm, eps)`` so coincident points get a zero direction.
    """
    za, zn, zd = (np.asarray(v, dtype=np.float64) for v in (za, zn, zd))
    if not za.shape == zn.shape == zd.shape:
        raise LossDomainError("embeddings must share a shape")
    if za.size == 0 or za.shape[-1] == 0:
        raise LossDomainError("embeddings must be non-empty")
    single = za.ndim == 1
    za, zn, zd = np.atleast_2d(za), np.atleast_2d(zn), np.atleast_2d(zd)
    dan, dad = za - zn, za - zd
    nan_ = np.linalg.norm(dan, axis=1)
    nad = np.linalg.norm(dad, axis=1)
    value = nan_ - nad + margin
    active = (value > 0)[:, None]
    batch = len(za)
    loss = float(np.maximum(value, 0.0).sum() / batch)
    u_an = dan / np.maximum(nan_, eps)[:, None]
    u_ad = dad / np.maximum(nad, eps)[:, None]
    ga = np.where(active, u_an - u_ad, 0.0) / batch
    gn = np.where(active, -u_an, 0.0) / batch
    gd = np.where(active, u_ad, 0.0) / batch
    if single:
        ga, gn, gd = ga[0], gn[0], gd[0]
    return loss, (ga, gn, gd)


@dataclass(frozen=True)
class LossHyper:
    """Loss choice plus its hyperparameters; irrelevant fields are ignored."""

    name: str = "asl"
    gamma_pos: float = 1.0
    gamma_neg: float = 4.0
    margin: float = 0.05
    lam: float = 1.5
    gamma: float = 2.0
    hill_margin: float = 1.0
    S: float = -1.0
    E: float = 0.0
    use_class_weights: bool = False

    def __post_init__(self):
        if self.name not in LOSSES:
            raise ValueError(f"unknown loss {self.name!r}; expected one of {sorted(LOSSES)}")

    def fn(self, weights=None):
        """``(logits, targets) -> (loss, grad)`` closure for this configuration."""
        if self.name == "bce":
            return lambda z, y: bce_with_logits(z, y, weights if self.use_class_weights else None)
        if self.name == "asl":
            return lambda z, y: asl(z, y, self.gamma_pos, self.gamma_neg, self.margin)
        if self.name == "hill":
            return lambda z, y: hill(z, y, self.lam, self.gamma, self.hill_margin)
        return lambda z, y: sigmoid_f1(z, y, self.S, self.E)


LOSSES = ("bce", "asl", "hill", "sigmoidf1")


def finite_diff_check(loss_fn, x, grad=None, h=1e-6, atol=1e-4):
    """Largest per-coordinate relative error between ``grad`` and central differences.

    ``loss_fn(x)`` returns a scalar or ``(scalar, grad)``; when ``grad`` is not
    given it is taken from the second element. The error for coordinate ``i`` is
    ``|g_i - n_i| / max(|g_i|, |n_i|, atol)``; the floor keeps central-difference
    roundoff (about ``1e-16 |f| / h``) on near-zero coordinates from dominating.
    """
    x = np.array(x, dtype=np.float64)

    def value(v):
        out = loss_fn(v)
        return out[0] if isinstance(out, tuple) else out

    if grad is None:
        grad = loss_fn(x)[1]
    grad = np.asarray(grad, dtype=np.float64)
    numeric = np.zeros_like(x)
    flat = x.reshape(-1)
    num_flat = numeric.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        up = value(x)
        flat[i] = orig - h
        down = value(x)
        flat[i] = orig
        num_flat[i] = (up - down) / (2.0 * h)
    denom = np.maximum(np.maximum(np.abs(grad), np.abs(numeric)), atol)
    return float(np.max(np.abs(grad - numeric) / denom))
