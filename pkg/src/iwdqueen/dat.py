"""DDM-aware transformer encoder producing a 64-d token per DDM.

Patch tokens come from 2x2 patches of the trimmed 16x10 map.  The CLS token
is blended with a projection of the central 3x5 block, and only the CLS
position queries the patch tokens (single-query attention), followed by a
pre-LN feed-forward residual.  All functions are batched over a leading axis.
"""

from __future__ import annotations

import math
from typing import Optional

import numpy as np

from . import numerics as nx
from .ddm_core import CENTRAL_COLS, CENTRAL_ROWS
from .errors import ShapeError
from .numerics import Tensor

WIDTH = 64
PATCH = 2
N_PATCHES = 40
SEQ_LEN = N_PATCHES + 1
FNN_HIDDEN = 128
CENTRAL_SIZE = 15

PARAM_SHAPES = {
    "patch_proj": (PATCH * PATCH, WIDTH),
    "cls_token": (WIDTH,),
    "pos_embed": (SEQ_LEN, WIDTH),
    "alpha_raw": (),
    "central_proj": (CENTRAL_SIZE, WIDTH),
    "central_bias": (WIDTH,),
    "wq": (WIDTH, WIDTH),
    "wk": (WIDTH, WIDTH),
    "wv": (WIDTH, WIDTH),
    "ln1_gamma": (WIDTH,),
    "ln1_beta": (WIDTH,),
    "ln2_gamma": (WIDTH,),
    "ln2_beta": (WIDTH,),
    "fnn_w1": (WIDTH, FNN_HIDDEN),
    "fnn_b1": (FNN_HIDDEN,),
    "fnn_w2": (FNN_HIDDEN, WIDTH),
    "fnn_b2": (WIDTH,),
}
_NORMAL_INIT = {"patch_proj", "central_proj", "wq", "wk", "wv", "fnn_w1", "fnn_w2"}


def init_params(rng: np.random.Generator) -> dict[str, Tensor]:
    """Projections ~ N(0, 1/sqrt(64)); CLS, positions, biases zero; LN scale one."""
    params = {}
    for name, shape in PARAM_SHAPES.items():
        if name in _NORMAL_INIT:
            data = rng.normal(0.0, 1.0 / math.sqrt(WIDTH), size=shape)
        elif name.endswith("gamma"):
            data = np.ones(shape)
        else:
            data = np.zeros(shape)
        params[name] = Tensor(data, requires_grad=True)
    return params


def patchify(ddm) -> np.ndarray:
    """``(..., 17, 11)`` maps -> ``(..., 40, 4)`` row-major 2x2 patches.

    The last delay row and Doppler column are dropped.
    """
    x = np.asarray(ddm, dtype=np.float64)
    lead = x.shape[:-2]
    x = x[..., :16, :10].reshape(lead + (8, PATCH, 5, PATCH))
    x = np.moveaxis(x, -3, -2)
    return x.reshape(lead + (N_PATCHES, PATCH * PATCH))


def central_vectors(ddm) -> np.ndarray:
    x = np.asarray(ddm, dtype=np.float64)
    return x[..., CENTRAL_ROWS, CENTRAL_COLS].reshape(x.shape[:-2] + (CENTRAL_SIZE,))


def embed_central(x_central, params) -> Tensor:
    return nx.gelu(nx.linear(x_central, params["central_proj"], params["central_bias"]))


def alpha(params) -> Tensor:
    return nx.sigmoid(params["alpha_raw"])


def ddm_aware_cls(c, d, a) -> Tensor:
    """Convex blend ``(1 - a) c + a d``."""
    return nx.add(nx.mul(nx.sub(1.0, a), c), nx.mul(a, d))


def build_sequence(patches, c_ddm, params) -> Tensor:
    """``(c_DDM || patches @ L) + E`` with shape ``(B, 41, 64)``."""
    patches = nx.as_tensor(patches)
    c_ddm = nx.as_tensor(c_ddm)
    if patches.shape[-2:] != (N_PATCHES, PATCH * PATCH):
        raise ShapeError("build_sequence", patches.shape, (N_PATCHES, PATCH * PATCH))
    tokens = nx.matmul(patches, params["patch_proj"])
    lead = tokens.shape[:-2]
    cls_row = nx.reshape(c_ddm, lead + (1, WIDTH))
    return nx.add(nx.concat([cls_row, tokens], axis=-2), params["pos_embed"])


def attention_weights(normed, params, n_heads: int = 1) -> Tensor:
    """Softmax of ``q K^T / sqrt(D)`` for the CLS query: ``(B, heads, 1, 40)``."""
    q, k, _ = _qkv(normed, params, n_heads)
    dh = WIDTH // n_heads
    return nx.softmax(nx.mul(nx.matmul(q, nx.transpose(k)), 1.0 / math.sqrt(dh)))


def _split_heads(x: Tensor, n_heads: int) -> Tensor:
    lead, n = x.shape[:-2], x.shape[-2]
    x = nx.reshape(x, lead + (n, n_heads, WIDTH // n_heads))
    axes = list(range(len(lead))) + [len(lead) + 1, len(lead), len(lead) + 2]
    return nx.transpose(x, axes)


def _qkv(normed, params, n_heads):
    cls = nx.index(normed, (Ellipsis, slice(0, 1), slice(None)))
    local = nx.index(normed, (Ellipsis, slice(1, None), slice(None)))
    q = nx.matmul(cls, params["wq"])
    k = nx.matmul(local, params["wk"])
    v = nx.matmul(local, params["wv"])
    return (_split_heads(q, n_heads), _split_heads(k, n_heads), _split_heads(v, n_heads))


def attend(seq, params, train: bool = False, rng: Optional[np.random.Generator] = None,
           dropout_rate: float = 0.1, n_heads: int = 1) -> Tensor:
    """Single-query attention plus FNN residual; returns the CLS row ``(B, 64)``.

    The FNN acts row-wise, so evaluating it on the CLS row alone gives the
    same output row as running it over all 41 tokens.
    """
    seq = nx.as_tensor(seq)
    if seq.shape[-2:] != (SEQ_LEN, WIDTH):
        raise ShapeError("attend", seq.shape, (SEQ_LEN, WIDTH))
    if WIDTH % n_heads:
        raise ValueError(f"n_heads must divide {WIDTH}")
    lead = seq.shape[:-2]
    normed = nx.layer_norm(seq, params["ln1_gamma"], params["ln1_beta"])
    q, k, v = _qkv(normed, params, n_heads)
    scores = nx.mul(nx.matmul(q, nx.transpose(k)), 1.0 / math.sqrt(WIDTH // n_heads))
    att = nx.matmul(nx.softmax(scores), v)                      # (B, h, 1, dh)
    att = nx.reshape(att, lead + (WIDTH,))
    cls = nx.reshape(nx.index(seq, (Ellipsis, 0, slice(None))), lead + (WIDTH,))
    row0 = nx.add(att, cls)
    h = nx.layer_norm(row0, params["ln2_gamma"], params["ln2_beta"])
    h = nx.gelu(nx.linear(h, params["fnn_w1"], params["fnn_b1"]))
    h = nx.dropout(h, dropout_rate, train, rng)
    h = nx.linear(h, params["fnn_w2"], params["fnn_b2"])
    h = nx.dropout(h, dropout_rate, train, rng)
    return nx.add(row0, h)


def dat_forward(ddm_batch, params, train: bool = False, rng: Optional[np.random.Generator] = None,
                dropout_rate: float = 0.1, n_heads: int = 1) -> Tensor:
    """Normalised DDMs ``(B, 17, 11)`` -> ``t_DDM`` of shape ``(B, 64)``."""
    x = np.asarray(ddm_batch, dtype=np.float64)
    d = embed_central(central_vectors(x), params)
    c_ddm = ddm_aware_cls(params["cls_token"], d, alpha(params))
    seq = build_sequence(patchify(x), c_ddm, params)
    return attend(seq, params, train, rng, dropout_rate, n_heads)
