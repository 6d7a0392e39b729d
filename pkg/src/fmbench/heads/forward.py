"""Forward and backward passes for every head kind.

Heads are tiny, so parameters live in one flat float64 vector and all passes
are explicit numpy.  Features are frozen: no gradient flows into tokens.

Parameter layouts (flat order):

* linear kinds:   W (k, D), b (k)
* attention kinds: q (D), K (D, D), V (D, D), W_o (k, D), b_o (k)
* mlp_regression: W1 (H, D), b1 (H), W2 (H, H), b2 (H), W3 (k, H), b3 (k)
"""

from __future__ import annotations

import numpy as np

from ..encoders.base import FeatureMap
from ..errors import EmptyRegionError, ShapeError
from ..rng import derive_key, uniform_stream
from .config import ATTENTION_KINDS, MASK_KINDS, HeadConfig

_BN_EPS = 1e-5


# -- pooling -------------------------------------------------------------------

def pool_tokens(fmap: FeatureMap, mode: str, region=None) -> np.ndarray:
    """Pool patch tokens over ``region`` (patch indices, row-major; None = all)."""
    tokens = fmap.tokens_flat
    if region is not None:
        idx = sorted(int(i) for i in region)
        if not idx:
            raise EmptyRegionError("cannot pool over an empty region")
        tokens = tokens[idx]
    return _pool_array(tokens, mode)


def _pool_array(tokens: np.ndarray, mode: str) -> np.ndarray:
    if tokens.shape[0] == 0:
        raise EmptyRegionError("cannot pool over an empty region")
    if mode == "mean":
        return tokens.mean(axis=0, dtype=np.float64)
    if mode == "max":
        return tokens.max(axis=0).astype(np.float64)
    raise ShapeError(f"unknown pooling mode {mode!r}")


# -- parameter packing -----------------------------------------------------------

def _shapes(config: HeadConfig, input_dim: int) -> list[tuple[str, tuple, int]]:
    """(name, shape, fan_in) triples in flat order."""
    k, d = config.n_outputs, input_dim
    if config.kind in ATTENTION_KINDS:
        return [("q", (d,), d), ("K", (d, d), d), ("V", (d, d), d),
                ("W_o", (k, d), d), ("b_o", (k,), 0)]
    if config.kind == "mlp_regression":
        h = config.hidden_dim
        return [("W1", (h, d), d), ("b1", (h,), 0), ("W2", (h, h), h),
                ("b2", (h,), 0), ("W3", (k, h), h), ("b3", (k,), 0)]
    return [("W", (k, d), d), ("b", (k,), 0)]


def n_params(config: HeadConfig, input_dim: int) -> int:
    return sum(int(np.prod(shape)) for _, shape, _ in _shapes(config, input_dim))


def unpack(config: HeadConfig, input_dim: int, flat: np.ndarray) -> dict[str, np.ndarray]:
    flat = np.asarray(flat, dtype=np.float64).reshape(-1)
    expected = n_params(config, input_dim)
    if flat.size != expected:
        raise ShapeError(f"weights length {flat.size} != expected {expected} "
                         f"for {config.kind} with D={input_dim}")
    out, off = {}, 0
    for name, shape, _ in _shapes(config, input_dim):
        size = int(np.prod(shape))
        out[name] = flat[off:off + size].reshape(shape)
        off += size
    return out


def init_params(config: HeadConfig, input_dim: int, seed: int) -> np.ndarray:
    """Seeded uniform in +-1/sqrt(fan_in) for weights, zeros for biases."""
    parts = []
    for name, shape, fan_in in _shapes(config, input_dim):
        size = int(np.prod(shape))
        if fan_in == 0:
            parts.append(np.zeros(size))
        else:
            lim = 1.0 / np.sqrt(fan_in)
            parts.append(uniform_stream(derive_key(seed, "init", name), size) * lim)
    return np.concatenate(parts)


# -- linear -------------------------------------------------------------------

def _linear_forward(p, X):
    return X @ p["W"].T + p["b"], None


def _linear_backward(p, X, _cache, gout):
    return {"W": gout.T @ X, "b": gout.sum(axis=0)}


# -- single-query cross attention ------------------------------------------------

def _attention_forward_one(p, tokens):
    d = tokens.shape[1]
    keys = tokens @ p["K"].T
    logits_att = keys @ p["q"] / np.sqrt(d)
    logits_att = logits_att - logits_att.max()
    ex = np.exp(logits_att)
    attn = ex / ex.sum()
    values = tokens @ p["V"].T
    pooled = attn @ values
    out = p["W_o"] @ pooled + p["b_o"]
    return out, (tokens, keys, attn, values, pooled)


def _attention_backward_one(p, cache, gy):
    tokens, keys, attn, values, pooled = cache
    d = tokens.shape[1]
    g = {"W_o": np.outer(gy, pooled), "b_o": gy.copy()}
    dpooled = p["W_o"].T @ gy
    dattn = values @ dpooled
    dvalues = np.outer(attn, dpooled)
    g["V"] = dvalues.T @ tokens
    dlog = attn * (dattn - attn @ dattn)
    g["q"] = keys.T @ dlog / np.sqrt(d)
    dkeys = np.outer(dlog, p["q"]) / np.sqrt(d)
    g["K"] = dkeys.T @ tokens
    return g


def _attention_forward(p, token_sets):
    outs, caches = [], []
    for tokens in token_sets:
        out, cache = _attention_forward_one(p, tokens)
        outs.append(out)
        caches.append(cache)
    return np.stack(outs), caches


def _attention_backward(p, _token_sets, caches, gout):
    total = None
    for cache, gy in zip(caches, gout):
        g = _attention_backward_one(p, cache, gy)
        if total is None:
            total = g
        else:
            for name in total:
                total[name] += g[name]
    return total


def attention_pool_forward(fmap: FeatureMap, weights: np.ndarray, n_outputs: int):
    """(logits, attention grid) for one feature map under a single learned query."""
    config = HeadConfig(kind="attention_pool", n_outputs=n_outputs)
    d = fmap.descriptor.embed_dim
    p = unpack(config, d, weights)
    out, cache = _attention_forward_one(p, fmap.tokens_flat.astype(np.float64))
    attn = cache[2].reshape(fmap.descriptor.grid_h, fmap.descriptor.grid_w)
    return out, attn


# -- 3-layer MLP with per-batch feature standardization ---------------------------

def _standardize(z):
    mu = z.mean(axis=0)
    var = z.var(axis=0)
    inv = 1.0 / np.sqrt(var + _BN_EPS)
    s = (z - mu) * inv
    return s, inv


def _standardize_backward(s, inv, ds):
    n = s.shape[0]
    return inv / n * (n * ds - ds.sum(axis=0) - s * (ds * s).sum(axis=0))


def _mlp_forward(p, X):
    z1 = X @ p["W1"].T + p["b1"]
    s1, inv1 = _standardize(z1)
    a1 = np.maximum(s1, 0.0)
    z2 = a1 @ p["W2"].T + p["b2"]
    s2, inv2 = _standardize(z2)
    a2 = np.maximum(s2, 0.0)
    out = a2 @ p["W3"].T + p["b3"]
    return out, (X, s1, inv1, a1, s2, inv2, a2)


def _mlp_backward(p, X, cache, gout):
    X, s1, inv1, a1, s2, inv2, a2 = cache
    g = {"W3": gout.T @ a2, "b3": gout.sum(axis=0)}
    da2 = gout @ p["W3"]
    ds2 = da2 * (s2 > 0)
    dz2 = _standardize_backward(s2, inv2, ds2)
    g["W2"] = dz2.T @ a1
    g["b2"] = dz2.sum(axis=0)
    da1 = dz2 @ p["W2"]
    ds1 = da1 * (s1 > 0)
    dz1 = _standardize_backward(s1, inv1, ds1)
    g["W1"] = dz1.T @ X
    g["b1"] = dz1.sum(axis=0)
    return g


# -- dispatch -------------------------------------------------------------------

def forward_batch(config: HeadConfig, input_dim: int, flat: np.ndarray, inputs):
    """Outputs (n, n_outputs) plus a cache for the matching backward pass."""
    p = unpack(config, input_dim, flat)
    if config.kind in ATTENTION_KINDS:
        return _attention_forward(p, inputs)
    X = np.asarray(inputs, dtype=np.float64)
    if config.kind == "mlp_regression":
        return _mlp_forward(p, X)
    return _linear_forward(p, X)


def backward_batch(config: HeadConfig, input_dim: int, flat: np.ndarray,
                   inputs, cache, grad_out: np.ndarray) -> np.ndarray:
    """Flat parameter gradient for the batch."""
    p = unpack(config, input_dim, flat)
    if config.kind in ATTENTION_KINDS:
        grads = _attention_backward(p, inputs, cache, grad_out)
    elif config.kind == "mlp_regression":
        grads = _mlp_backward(p, np.asarray(inputs, dtype=np.float64), cache, grad_out)
    else:
        grads = _linear_backward(p, np.asarray(inputs, dtype=np.float64), cache, grad_out)
    return np.concatenate([grads[name].reshape(-1)
                           for name, _, _ in _shapes(config, input_dim)])


# -- representations and the public forward ---------------------------------------

def sample_representation(config: HeadConfig, features, mask=None):
    """Reduce one sample (a map or a volume's list of maps) to head input.

    Volumes forward every slice; tokens are pooled across all slices before
    the head.  ``mask`` holds patch-index sets (one per slice for volumes) and
    must be provided iff the kind is a mask variant.
    """
    maps = features if isinstance(features, (list, tuple)) else [features]
    if not maps:
        raise ShapeError("empty volume: no feature maps")
    is_mask_kind = config.kind in MASK_KINDS
    if is_mask_kind and mask is None:
        raise ShapeError(f"kind {config.kind} requires a mask")
    if not is_mask_kind and mask is not None:
        raise ShapeError(f"kind {config.kind} does not accept a mask")

    if config.kind in ("cls_linear", "mlp_regression"):
        cls = np.stack([m.class_token.astype(np.float64) for m in maps])
        return cls.mean(axis=0)

    masks = None
    if is_mask_kind:
        masks = mask if isinstance(mask, (list, tuple)) else [mask]
        if len(masks) != len(maps):
            raise ShapeError(f"{len(masks)} mask sets for {len(maps)} slices")

    token_blocks = []
    for i, m in enumerate(maps):
        tokens = m.tokens_flat.astype(np.float64)
        if masks is not None:
            idx = sorted(int(j) for j in masks[i])
            tokens = tokens[idx] if idx else tokens[:0]
        token_blocks.append(tokens)
    tokens = np.concatenate(token_blocks, axis=0)
    if tokens.shape[0] == 0:
        raise EmptyRegionError("mask selects no patches in any slice")

    if config.kind in ATTENTION_KINDS:
        return tokens
    return _pool_array(tokens, config.pooling)


def head_forward(features, config: HeadConfig, weights: np.ndarray, mask=None,
                 input_dim: int | None = None) -> np.ndarray:
    """Output vector for one sample (single feature map or volume list)."""
    rep = sample_representation(config, features, mask)
    if input_dim is None:
        maps = features if isinstance(features, (list, tuple)) else [features]
        input_dim = maps[0].descriptor.embed_dim
    batch = [rep] if config.kind in ATTENTION_KINDS else np.asarray([rep])
    out, _ = forward_batch(config, input_dim, weights, batch)
    return out[0]
