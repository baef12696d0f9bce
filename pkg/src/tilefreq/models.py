"""Linear, MLP and DCT-coefficient CNN classifiers with hand-written backprop.

Geolocation models take standardized ``(easting, northing)`` rows of shape
``(B, 2)``. The tile CNN takes coefficient blocks of shape ``(B, C, k, k)``::

    conv3x3 (pad 1) -> ReLU -> conv1x1 -> ReLU -> flatten
        -> linear(latent) -> ReLU -> linear(classes)

A tile CNN with ``num_classes == 0`` is the headless tile2vec encoder whose
output is the latent pre-activation.
"""

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

ARCHITECTURES = ("linear", "mlp256", "tileCnn")
CHECKPOINT_MAGIC = b"TFM1"


class ModelDomainError(ValueError):
    pass


@dataclass
class ModelParams:
    arch: str
    layers: list
    dims: dict = field(default_factory=dict)

    @property
    def num_classes(self):
        return self.dims.get("num_classes", 0)

    @property
    def latent_dim(self):
        return self.dims.get("latent", 0)

    def copy(self):
        return ModelParams(self.arch, [(w.copy(), b.copy()) for w, b in self.layers], dict(self.dims))

    def flat(self):
        return np.concatenate([np.concatenate([w.ravel(), b.ravel()]) for w, b in self.layers])

    def __eq__(self, other):
        if not isinstance(other, ModelParams):
            return NotImplemented
        return (
            self.arch == other.arch
            and self.dims == other.dims
            and len(self.layers) == len(other.layers)
            and all(
                np.array_equal(w1, w2) and np.array_equal(b1, b2)
                for (w1, b1), (w2, b2) in zip(self.layers, other.layers)
            )
        )


def _glorot(rng, shape, fan_in, fan_out):
    a = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-a, a, shape)


def init_params(arch, dims, seed=0):
    """Glorot-uniform weights, zero biases.

    ``dims`` keys: ``in_features`` and ``num_classes`` for geolocation models;
    ``in_channels``, ``size`` (k), ``conv_channels`` (pair), ``latent`` and
    ``num_classes`` (0 for an encoder) for ``tileCnn``.
    """
    if arch not in ARCHITECTURES:
        raise ModelDomainError(f"unknown architecture {arch!r}")
    rng = np.random.default_rng(seed)
    dims = dict(dims)
    if arch in ("linear", "mlp256"):
        d_in, c = dims.get("in_features", 2), dims.get("num_classes", 0)
        if d_in < 1 or c < 1:
            raise ModelDomainError("in_features and num_classes must be positive")
        dims.update(in_features=d_in, num_classes=c)
        if arch == "linear":
            sizes = [d_in, c]
        else:
            hidden = dims.setdefault("latent", 256)
            if hidden < 1:
                raise ModelDomainError("latent must be positive")
            sizes = [d_in, hidden, c]
        layers = [
            (_glorot(rng, (a, b), a, b), np.zeros(b)) for a, b in zip(sizes[:-1], sizes[1:])
        ]
        return ModelParams(arch, layers, dims)

    c_in = dims.get("in_channels", 0)
    k = dims.setdefault("size", 8)
    f1, f2 = dims.setdefault("conv_channels", (16, 16))
    latent = dims.setdefault("latent", 256)
    classes = dims.setdefault("num_classes", 0)
    if min(c_in, k, f1, f2, latent) < 1 or classes < 0:
        raise ModelDomainError(f"invalid tileCnn dims {dims}")
    dims["in_channels"] = c_in
    dims["conv_channels"] = (f1, f2)
    layers = [
        (_glorot(rng, (f1, c_in, 3, 3), c_in * 9, f1 * 9), np.zeros(f1)),
        (_glorot(rng, (f2, f1, 1, 1), f1, f2), np.zeros(f2)),
        (_glorot(rng, (f2 * k * k, latent), f2 * k * k, latent), np.zeros(latent)),
    ]
    if classes:
        layers.append((_glorot(rng, (latent, classes), latent, classes), np.zeros(classes)))
    return ModelParams(arch, layers, dims)


def _conv3x3_cols(x):
    """im2col for a 3x3 stride-1 zero-padded convolution: (B*H*W, C*9)."""
    b, c, h, w = x.shape
    padded = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
    win = sliding_window_view(padded, (3, 3), axis=(2, 3))  # B, C, H, W, 3, 3
    return win.transpose(0, 2, 3, 1, 4, 5).reshape(b * h * w, c * 9)


def _col2im3x3(dcols, shape):
    b, c, h, w = shape
    d = dcols.reshape(b, h, w, c, 3, 3)
    padded = np.zeros((b, c, h + 2, w + 2))
    for i in range(3):
        for j in range(3):
            padded[:, :, i : i + h, j : j + w] += d[..., i, j].transpose(0, 3, 1, 2)
    return padded[:, :, 1:-1, 1:-1]


def _check_features(params, x):
    x = np.asarray(x, dtype=np.float64)
    if params.arch == "tileCnn":
        k = params.dims["size"]
        expected = (params.dims["in_channels"], k, k)
        if x.ndim == 3:
            x = x[None]
        if x.ndim != 4 or x.shape[1:] != expected:
            raise ModelDomainError(f"expected features (B, {expected}), got {x.shape}")
    else:
        if x.ndim == 1:
            x = x[None]
        if x.ndim != 2 or x.shape[1] != params.dims["in_features"]:
            raise ModelDomainError(
                f"expected features (B, {params.dims['in_features']}), got {x.shape}"
            )
    return x


def _forward(params, x):
    x = _check_features(params, x)
    cache = {"x": x}
    if params.arch == "linear":
        (w, b), = params.layers
        return x @ w + b, cache
    if params.arch == "mlp256":
        (w1, b1), (w2, b2) = params.layers
        pre = x @ w1 + b1
        hidden = np.maximum(pre, 0.0)
        cache.update(pre=pre, hidden=hidden)
        return hidden @ w2 + b2, cache

    bsz, _, k, _ = x.shape
    (k1, c1), (k2, c2), (w3, b3) = params.layers[:3]
    f1, f2 = k1.shape[0], k2.shape[0]
    cols = _conv3x3_cols(x)
    a1 = cols @ k1.reshape(f1, -1).T + c1  # B*k*k, f1
    h1 = np.maximum(a1, 0.0)
    a2 = h1 @ k2.reshape(f2, f1).T + c2
    h2 = np.maximum(a2, 0.0)
    flat = h2.reshape(bsz, k, k, f2).transpose(0, 3, 1, 2).reshape(bsz, -1)
    latent = flat @ w3 + b3
    cache.update(cols=cols, a1=a1, h1=h1, a2=a2, h2=h2, flat=flat, latent=latent)
    if len(params.layers) == 3:
        return latent, cache
    w4, b4 = params.layers[3]
    hidden = np.maximum(latent, 0.0)
    cache["hidden"] = hidden
    return hidden @ w4 + b4, cache


def forward(params, features):
    """Logits (or encoder embeddings) for a batch of features."""
    return _forward(params, features)[0]


def backward(params, features, d_out, return_input_grad=False):
    """Gradients of a scalar loss w.r.t. every ``(weight, bias)`` pair, in layer order."""
    out, cache = _forward(params, features)
    d_out = np.asarray(d_out, dtype=np.float64).reshape(out.shape)
    x = cache["x"]
    if params.arch == "linear":
        grads = [(x.T @ d_out, d_out.sum(axis=0))]
        dx = d_out @ params.layers[0][0].T
    elif params.arch == "mlp256":
        (w1, _), (w2, _) = params.layers
        dh = d_out @ w2.T
        dpre = dh * (cache["pre"] > 0)
        grads = [(x.T @ dpre, dpre.sum(axis=0)), (cache["hidden"].T @ d_out, d_out.sum(axis=0))]
        dx = dpre @ w1.T
    else:
        grads = []
        d_latent = d_out
        if len(params.layers) == 4:
            w4, _ = params.layers[3]
            grads.append((cache["hidden"].T @ d_out, d_out.sum(axis=0)))
            d_latent = (d_out @ w4.T) * (cache["latent"] > 0)
        (k1, _), (k2, _), (w3, _) = params.layers[:3]
        bsz, c_in, k, _ = x.shape
        f1, f2 = k1.shape[0], k2.shape[0]
        g3 = (cache["flat"].T @ d_latent, d_latent.sum(axis=0))
        dflat = d_latent @ w3.T
        dh2 = dflat.reshape(bsz, f2, k, k).transpose(0, 2, 3, 1).reshape(-1, f2)
        da2 = dh2 * (cache["a2"] > 0)
        g2 = ((da2.T @ cache["h1"]).reshape(k2.shape), da2.sum(axis=0))
        dh1 = da2 @ k2.reshape(f2, f1)
        da1 = dh1 * (cache["a1"] > 0)
        g1 = ((da1.T @ cache["cols"]).reshape(k1.shape), da1.sum(axis=0))
        dcols = da1 @ k1.reshape(f1, -1)
        dx = _col2im3x3(dcols, x.shape)
        grads = [g1, g2, g3] + grads
    if return_input_grad:
        return grads, dx
    return grads


def sgd_step(params, grads, lr):
    for (w, b), (gw, gb) in zip(params.layers, grads):
        w -= lr * gw
        b -= lr * gb


def geo_noise(coords, mean_meters, seed=0):
    """Isotropic Gaussian jitter whose expected displacement length is ``mean_meters``."""
    if mean_meters < 0:
        raise ValueError("mean_meters must be non-negative")
    coords = np.asarray(coords, dtype=np.float64)
    if mean_meters == 0:
        return coords.copy()
    sigma = mean_meters / np.sqrt(np.pi / 2.0)
    rng = np.random.default_rng(seed)
    return coords + rng.normal(0.0, sigma, coords.shape)


# ---------------------------------------------------------------- checkpoints


def save_checkpoint(params, path):
    """TFM1: magic, tag, dims, then float64 parameters in layer order (little-endian)."""
    tag = params.arch.encode()
    with Path(path).open("wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", len(tag)) + tag)
        fh.write(struct.pack("<I", len(params.layers)))
        for w, b in params.layers:
            fh.write(struct.pack("<I", w.ndim) + struct.pack(f"<{w.ndim}I", *w.shape))
            fh.write(struct.pack("<I", b.size))
        for w, b in params.layers:
            fh.write(np.ascontiguousarray(w, dtype="<f8").tobytes())
            fh.write(np.ascontiguousarray(b, dtype="<f8").tobytes())


def load_checkpoint(path):
    data = Path(path).read_bytes()
    if data[:4] != CHECKPOINT_MAGIC:
        raise ValueError(f"{path}: bad magic {data[:4]!r}")
    off = 4
    (n,) = struct.unpack_from("<I", data, off)
    arch = data[off + 4 : off + 4 + n].decode()
    off += 4 + n
    (count,) = struct.unpack_from("<I", data, off)
    off += 4
    shapes = []
    for _ in range(count):
        (nd,) = struct.unpack_from("<I", data, off)
        wshape = struct.unpack_from(f"<{nd}I", data, off + 4)
        off += 4 + 4 * nd
        (bsize,) = struct.unpack_from("<I", data, off)
        off += 4
        shapes.append((wshape, bsize))
    layers = []
    for wshape, bsize in shapes:
        wn = int(np.prod(wshape))
        w = np.frombuffer(data, "<f8", wn, off).reshape(wshape).astype(np.float64)
        off += 8 * wn
        b = np.frombuffer(data, "<f8", bsize, off).astype(np.float64)
        off += 8 * bsize
        layers.append((w, b))
    return ModelParams(arch, layers, _infer_dims(arch, layers))


def _infer_dims(arch, layers):
    if arch == "linear":
        return {"in_features": layers[0][0].shape[0], "num_classes": layers[0][0].shape[1]}
    if arch == "mlp256":
        return {
            "in_features": layers[0][0].shape[0],
            "latent": layers[0][0].shape[1],
            "num_classes": layers[1][0].shape[1],
        }
    k1, k2, w3 = layers[0][0], layers[1][0], layers[2][0]
    size = int(round(np.sqrt(w3.shape[0] / k2.shape[0])))
    return {
        "in_channels": k1.shape[1],
        "size": size,
        "conv_channels": (k1.shape[0], k2.shape[0]),
        "latent": w3.shape[1],
        "num_classes": layers[3][0].shape[1] if len(layers) == 4 else 0,
    }
