"""A small numpy CNN with hand-written backward passes.

Architecture (``"cnn2"``)::

    conv3x3(3->16) relu maxpool2  conv3x3(16->32) relu maxpool2
    flatten  dense(->64) relu  dense(64->C)

Activations are NHWC, convolution weights HWIO, "same" padding. The 64-wide
post-ReLU activation is the feature vector used by the contrastive loss.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

log = logging.getLogger(__name__)

ARCH = "cnn2"
FEATURES = 64
PARAM_ORDER = ("conv1.w", "conv1.b", "conv2.w", "conv2.b", "fc1.w", "fc1.b", "fc2.w", "fc2.b")
WEIGHT_NAMES = ("conv1.w", "conv2.w", "fc1.w", "fc2.w")
LAST_LAYER = ("fc2.w", "fc2.b")


class NonFiniteGradient(FloatingPointError):
    pass


def param_shapes(num_classes: int, side: int = 32, channels: int = 3) -> dict[str, tuple]:
    if side % 4:
        raise ValueError("input side must be divisible by 4 (two 2x2 pools)")
    flat = (side // 4) ** 2 * 32
    return {
        "conv1.w": (3, 3, channels, 16), "conv1.b": (16,),
        "conv2.w": (3, 3, 16, 32), "conv2.b": (32,),
        "fc1.w": (flat, FEATURES), "fc1.b": (FEATURES,),
        "fc2.w": (FEATURES, num_classes), "fc2.b": (num_classes,),
    }


def init_params(num_classes: int, rng: np.random.Generator, side: int = 32,
                dtype=np.float32) -> dict[str, np.ndarray]:
    """He-uniform (fan-in) weights, zero biases."""
    params = {}
    for name, shape in param_shapes(num_classes, side).items():
        if name.endswith(".b"):
            params[name] = np.zeros(shape, dtype=dtype)
        else:
            fan_in = int(np.prod(shape[:-1]))
            bound = np.sqrt(6.0 / fan_in)
            params[name] = rng.uniform(-bound, bound, size=shape).astype(dtype)
    return params


def to_input(images: np.ndarray, dtype=np.float32) -> np.ndarray:
    """uint8 pixels -> floats in [0, 1]."""
    return np.asarray(images, dtype=dtype) / dtype(255.0)


# ---------------------------------------------------------------------------
# layers


def _im2col(x: np.ndarray) -> np.ndarray:
    """(N, H, W, C) -> (N, H, W, 9*C) with zero padding, tap-major."""
    n, h, w, c = x.shape
    xp = np.pad(x, ((0, 0), (1, 1), (1, 1), (0, 0)))
    cols = np.empty((n, h, w, 9, c), dtype=x.dtype)
    for a in range(3):
        for b in range(3):
            cols[:, :, :, a * 3 + b, :] = xp[:, a:a + h, b:b + w, :]
    return cols.reshape(n, h, w, 9 * c)


def _col2im(dcols: np.ndarray, c: int) -> np.ndarray:
    n, h, w, _ = dcols.shape
    dcols = dcols.reshape(n, h, w, 9, c)
    dxp = np.zeros((n, h + 2, w + 2, c), dtype=dcols.dtype)
    for a in range(3):
        for b in range(3):
            dxp[:, a:a + h, b:b + w, :] += dcols[:, :, :, a * 3 + b, :]
    return dxp[:, 1:-1, 1:-1, :]


def conv_forward(x, w, b):
    cols = _im2col(x)
    out = cols @ w.reshape(-1, w.shape[-1]) + b
    return out, cols


def conv_backward(dout, cols, w):
    cout = w.shape[-1]
    d2 = dout.reshape(-1, cout)
    dw = (cols.reshape(-1, cols.shape[-1]).T @ d2).reshape(w.shape)
    db = d2.sum(axis=0)
    dx = _col2im(dout @ w.reshape(-1, cout).T, w.shape[2])
    return dx, dw, db


def pool_forward(x):
    n, h, w, c = x.shape
    r = x.reshape(n, h // 2, 2, w // 2, 2, c)
    out = r.max(axis=(2, 4))
    return out


def pool_backward(dout, x):
    """Route each gradient to the first maximal element of its 2x2 window."""
    n, h, w, c = x.shape
    r = x.reshape(n, h // 2, 2, w // 2, 2, c).transpose(0, 1, 3, 5, 2, 4).reshape(n, h // 2, w // 2, c, 4)
    first = r.argmax(axis=-1)
    mask = np.zeros_like(r)
    np.put_along_axis(mask, first[..., None], 1.0, axis=-1)
    dx = mask * dout[..., None]
    return dx.reshape(n, h // 2, w // 2, c, 2, 2).transpose(0, 1, 4, 2, 5, 3).reshape(n, h, w, c)


# ---------------------------------------------------------------------------
# network


@dataclass
class Cache:
    x: np.ndarray
    cols1: np.ndarray
    a1: np.ndarray
    cols2: np.ndarray
    a2: np.ndarray
    flat: np.ndarray
    h3: np.ndarray
    features: np.ndarray
    extra: dict = field(default_factory=dict)


def forward(params: dict, x: np.ndarray, keep_cache: bool = False):
    """Return ``(logits, features)`` (plus a backward cache when asked).

    ``x`` is a float batch ``(N, H, W, 3)`` already scaled to [0, 1].
    """
    shapes_ok = x.ndim == 4 and x.shape[-1] == params["conv1.w"].shape[2]
    flat_len = (x.shape[1] // 4) * (x.shape[2] // 4) * 32 if x.ndim == 4 else -1
    if not shapes_ok or flat_len != params["fc1.w"].shape[0]:
        raise ValueError(f"input batch shape {x.shape} does not fit the network")
    z1, cols1 = conv_forward(x, params["conv1.w"], params["conv1.b"])
    a1 = np.maximum(z1, 0)
    p1 = pool_forward(a1)
    z2, cols2 = conv_forward(p1, params["conv2.w"], params["conv2.b"])
    a2 = np.maximum(z2, 0)
    p2 = pool_forward(a2)
    flat = p2.reshape(len(x), -1)
    h3 = flat @ params["fc1.w"] + params["fc1.b"]
    features = np.maximum(h3, 0)
    logits = features @ params["fc2.w"] + params["fc2.b"]
    if keep_cache:
        return logits, features, Cache(x, cols1, a1, cols2, a2, flat, h3, features)
    return logits, features


def backward(params: dict, cache: Cache, dlogits: np.ndarray,
             dfeatures: np.ndarray | None = None) -> dict[str, np.ndarray]:
    """Gradients of a scalar loss given its gradients w.r.t. logits and features."""
    g = {}
    g["fc2.w"] = cache.features.T @ dlogits
    g["fc2.b"] = dlogits.sum(axis=0)
    df = dlogits @ params["fc2.w"].T
    if dfeatures is not None:
        df = df + dfeatures
    dh3 = df * (cache.h3 > 0)
    g["fc1.w"] = cache.flat.T @ dh3
    g["fc1.b"] = dh3.sum(axis=0)
    dflat = dh3 @ params["fc1.w"].T
    n, h2, w2, c2 = cache.a2.shape
    dp2 = dflat.reshape(n, h2 // 2, w2 // 2, c2)
    dz2 = pool_backward(dp2, cache.a2) * (cache.a2 > 0)
    dp1, g["conv2.w"], g["conv2.b"] = conv_backward(dz2, cache.cols2, params["conv2.w"])
    dz1 = pool_backward(dp1, cache.a1) * (cache.a1 > 0)
    _, g["conv1.w"], g["conv1.b"] = conv_backward(dz1, cache.cols1, params["conv1.w"])
    return {k: g[k].astype(params[k].dtype, copy=False) for k in PARAM_ORDER}


def predict_logits(params: dict, images: np.ndarray, batch_size: int = 256) -> np.ndarray:
    """Logits for uint8 images, evaluated in batches."""
    dtype = params["fc2.w"].dtype.type
    out = []
    for start in range(0, len(images), batch_size):
        logits, _ = forward(params, to_input(images[start:start + batch_size], dtype))
        out.append(logits)
    if not out:
        return np.zeros((0, params["fc2.b"].shape[0]), dtype=dtype)
    return np.concatenate(out)


def predict_features(params: dict, images: np.ndarray, batch_size: int = 256) -> np.ndarray:
    dtype = params["fc2.w"].dtype.type
    out = [forward(params, to_input(images[s:s + batch_size], dtype))[1]
           for s in range(0, len(images), batch_size)]
    return np.concatenate(out) if out else np.zeros((0, FEATURES), dtype=dtype)


# ---------------------------------------------------------------------------
# losses


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def log_softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=1, keepdims=True))


def cross_entropy(logits: np.ndarray, labels: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean negative log-likelihood and its gradient w.r.t. the logits."""
    labels = np.asarray(labels)
    n, c = logits.shape
    if n == 0:
        return 0.0, np.zeros_like(logits)
    if labels.min() < 0 or labels.max() >= c:
        raise ValueError("label outside the logit range")
    logp = log_softmax(logits.astype(np.float64))
    loss = -logp[np.arange(n), labels].mean()
    grad = np.exp(logp)
    grad[np.arange(n), labels] -= 1.0
    return float(loss), (grad / n).astype(logits.dtype)


def soft_cross_entropy(logits: np.ndarray, target_probs: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean KL(target || softmax(logits)); gradient is (softmax - target) / N."""
    n = len(logits)
    logp = log_softmax(logits.astype(np.float64))
    t = np.asarray(target_probs, dtype=np.float64)
    with np.errstate(divide="ignore", invalid="ignore"):
        ent = np.where(t > 0, t * np.log(t), 0.0).sum()
    loss = (ent - (t * logp).sum()) / n
    grad = (np.exp(logp) - t) / n
    return float(loss), grad.astype(logits.dtype)


def random_pairs(n: int, rng: np.random.Generator) -> np.ndarray:
    """A random perfect matching on ``n`` items: ``floor(n/2)`` index pairs."""
    perm = rng.permutation(n)
    return perm[: 2 * (n // 2)].reshape(-1, 2)


def contrastive_loss(features: np.ndarray, labels: np.ndarray, margin: float = 1.0,
                     pairs: np.ndarray | None = None) -> tuple[float, np.ndarray]:
    """Pairwise contrastive loss over ``pairs`` (default: consecutive rows).

    ``1/(2N) * sum(y d^2 + (1-y) max(margin - d, 0)^2)`` with ``d`` the
    Euclidean distance of a pair, ``y`` = 1 for matching labels and ``N``
    the number of pairs. Returns the loss and its gradient w.r.t. features.
    """
    if margin <= 0:
        raise ValueError("margin must be positive")
    n = len(features)
    if n < 2:
        log.warning("contrastive loss on a batch of %d sample(s): no pairs, loss 0", n)
    if pairs is None:
        pairs = np.arange(2 * (n // 2)).reshape(-1, 2)
    pairs = np.asarray(pairs, dtype=np.int64).reshape(-1, 2)
    grad = np.zeros_like(features)
    if len(pairs) == 0:
        return 0.0, grad
    f = features.astype(np.float64)
    i, j = pairs[:, 0], pairs[:, 1]
    diff = f[i] - f[j]
    d = np.sqrt((diff ** 2).sum(axis=1))
    same = labels[i] == labels[j]
    hinge = np.maximum(margin - d, 0.0)
    per_pair = np.where(same, d ** 2, hinge ** 2)
    scale = 1.0 / (2 * len(pairs))
    loss = scale * per_pair.sum()
    # d/d(diff) of d^2 is 2 diff; of hinge^2 is -2 hinge diff / d
    with np.errstate(divide="ignore", invalid="ignore"):
        coef = np.where(same, 2.0, np.where(d > 0, -2.0 * hinge / d, 0.0))
    gdiff = scale * coef[:, None] * diff
    g = np.zeros_like(f)
    np.add.at(g, i, gdiff)
    np.add.at(g, j, -gdiff)
    return float(loss), g.astype(features.dtype)


@dataclass(frozen=True)
class LossWeights:
    alpha: float = 1.0
    beta: float = 1.0
    gamma: float = 0.1
    margin: float = 1.0

    def __post_init__(self):
        if min(self.alpha, self.beta, self.gamma) < 0:
            raise ValueError("loss weights must be non-negative")
        if self.margin <= 0:
            raise ValueError("margin must be positive")


def total_loss(params: dict, primary, watermark=None, attacked=None,
               weights: LossWeights = LossWeights(), pairs: np.ndarray | None = None,
               sim_scope: str = "all"):
    """Weighted four-term objective on one step's batches.

    Each batch is ``(x, y)`` with ``x`` scaled floats. The three
    classification terms are per-batch means; the similarity term acts on
    the features of the concatenated batch (``sim_scope="all"``) or only on
    watermark rows plus target-label rows (``"watermark"``). Returns
    ``(loss, terms, grads)``.
    """
    groups = [("pri", primary, 1.0), ("wm", watermark, weights.alpha), ("attk", attacked, weights.beta)]
    groups = [(name, b, w) for name, b, w in groups if b is not None and len(b[1])]
    if not groups or groups[0][0] != "pri":
        raise ValueError("the primary batch must be non-empty")
    x = np.concatenate([b[0] for _, b, _ in groups])
    y = np.concatenate([np.asarray(b[1]) for _, b, _ in groups])
    logits, features, cache = forward(params, x, keep_cache=True)

    terms = {"pri": 0.0, "wm": 0.0, "attk": 0.0, "sim": 0.0}
    dlogits = np.zeros_like(logits)
    start = 0
    for name, (_, yb), w in groups:
        stop = start + len(yb)
        terms[name], g = cross_entropy(logits[start:stop], yb)
        dlogits[start:stop] = w * g
        start = stop

    if pairs is None:
        pairs = np.arange(2 * (len(y) // 2)).reshape(-1, 2)
    if sim_scope == "watermark":
        # keep pairs whose both ends are watermark rows or carry the watermark label
        eligible = np.zeros(len(y), dtype=bool)
        if len(groups) > 1 and groups[1][0] == "wm":
            n_pri = len(groups[0][1][1])
            eligible[n_pri:n_pri + len(groups[1][1][1])] = True
            eligible |= y == groups[1][1][1][0]
        pairs = pairs[eligible[pairs].all(axis=1)]
    elif sim_scope != "all":
        raise ValueError(f"unknown sim_scope {sim_scope!r}")
    terms["sim"], gf = contrastive_loss(features, y, weights.margin, pairs)
    dfeatures = weights.gamma * gf if weights.gamma > 0 else None

    total = terms["pri"] + weights.alpha * terms["wm"] + weights.beta * terms["attk"] \
        + weights.gamma * terms["sim"]
    grads = backward(params, cache, dlogits, dfeatures)
    return float(total), terms, grads


# ---------------------------------------------------------------------------
# Adam


@dataclass
class AdamState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    t: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def zeros_like(cls, params: dict) -> "AdamState":
        return cls({k: np.zeros_like(p) for k, p in params.items()},
                   {k: np.zeros_like(p) for k, p in params.items()})


def step_lr(base_lr: float, epoch: int, period: int, factor: float = 0.1) -> float:
    """Step decay: ``base_lr * factor ** (epoch // period)``."""
    return base_lr * factor ** (epoch // period) if period > 0 else base_lr


def adam_step(params: dict, grads: dict, state: AdamState, lr: float,
              trainable: tuple[str, ...] | None = None) -> tuple[dict, AdamState]:
    """One bias-corrected Adam update; returns new params and state.

    Names outside ``trainable`` (default: all) are left untouched, moments
    included.
    """
    names = tuple(params) if trainable is None else trainable
    for k in names:
        if not np.all(np.isfinite(grads[k])):
            raise NonFiniteGradient(f"non-finite gradient in {k}")
    t = state.t + 1
    b1, b2 = state.beta1, state.beta2
    new_p, new_m, new_v = dict(params), dict(state.m), dict(state.v)
    for k in names:
        g = grads[k]
        m = b1 * state.m[k] + (1 - b1) * g
        v = b2 * state.v[k] + (1 - b2) * g * g
        mhat = m / (1 - b1 ** t)
        vhat = v / (1 - b2 ** t)
        new_p[k] = (params[k] - lr * mhat / (np.sqrt(vhat) + state.eps)).astype(params[k].dtype)
        new_m[k], new_v[k] = m.astype(params[k].dtype), v.astype(params[k].dtype)
    return new_p, AdamState(new_m, new_v, t, b1, b2, state.eps)
