"""Stacked distance-adaptive self-attention blocks over superpoint queries,
with mask / classification / alignment heads and top-K visual-token
selection.

Attention logits between queries i and j are Q_i K_j^T / sqrt(C) minus a
per-query non-negative penalty sigma_i * D_ij, D being the Euclidean
distance between superpoint centroids. Superpoint features act as queries,
keys, and values; there is no cross-attention.

Extra queries (visual prompts, segmentation queries) are appended behind an
isolation contract: they attend to every superpoint and to themselves, while
superpoints never attend to them. Rather than -inf masking a concatenated
batch, each extra runs as its own single-row stream against the superpoint
keys/values, which realizes the same math and keeps the superpoint rows of
the output bit-identical to an extras-free run by construction.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .autodiff import (
    Matrix,
    add,
    concat_rows,
    gather_rows,
    gelu,
    layer_norm,
    linear,
    matmul,
    mul,
    scale,
    sigmoid,
    softmax_rows,
    softplus,
    sub,
    transpose,
)
from .config import OstConfig
from .errors import ConfigError, ShapeError


@dataclass(frozen=True)
class ExtraQuery:
    """An appended query: feature row plus its distance-bias policy.

    policy "distance" computes the bias row from `centroid`; policy "zero"
    (queries with no geometry, e.g. segmentation queries) uses a zero row.
    """

    feature: Matrix  # 1 x C
    policy: str  # "distance" | "zero"
    centroid: np.ndarray | None = None

    def bias_row(self, centroids: np.ndarray) -> np.ndarray:
        if self.policy == "zero":
            return np.zeros((1, centroids.shape[0]))
        if self.policy == "distance":
            if self.centroid is None:
                raise ConfigError("distance-bias extra query needs a centroid")
            diff = centroids - np.asarray(self.centroid).reshape(1, 3)
            return np.sqrt(np.sum(diff * diff, axis=1)).reshape(1, -1)
        raise ConfigError(f"unknown extra-query policy {self.policy!r}")


@dataclass
class OstOutput:
    class_logits: Matrix  # M x (num_categories + 1), last column = no-object
    mask_kernels: Matrix  # M x C
    alignment: Matrix  # M x C_a


@dataclass
class ExtraOutput:
    final: Matrix  # 1 x C
    class_logits: Matrix
    mask_kernel: Matrix  # 1 x C
    alignment: Matrix  # 1 x C_a


@dataclass
class OstResult:
    output: OstOutput
    sp_final: Matrix
    extras: list
    sp_feats_in: Matrix
    centroids: np.ndarray
    block_ctx: list  # per block: (k_sp, v_sp) for appended-query reuse


def distance_adaptive_attention(q_feats: Matrix, kv_feats: Matrix, D, sigma, attn_mask=None) -> Matrix:
    """Softmax(q kv^T / sqrt(C) - sigma * D + mask) @ kv.

    The source features serve as both key and value. `sigma` is a per-query
    column (M x 1, >= 0) or None for zero; mask entries are 0 or -inf.
    """
    if q_feats.cols != kv_feats.cols:
        raise ShapeError("query/source width mismatch")
    D = np.asarray(D, dtype=np.float64)
    if D.shape != (q_feats.rows, kv_feats.rows):
        raise ShapeError(f"distance matrix shape {D.shape} mismatch")
    logits = scale(matmul(q_feats, transpose(kv_feats)), 1.0 / math.sqrt(q_feats.cols))
    if sigma is not None:
        if not isinstance(sigma, Matrix):
            sigma = Matrix(np.asarray(sigma, dtype=np.float64).reshape(q_feats.rows, 1))
        logits = sub(logits, mul(Matrix(D), sigma))
    if attn_mask is not None:
        logits = add(logits, Matrix(attn_mask))
    return matmul(softmax_rows(logits), kv_feats)


def init_ost_params(rng: np.random.Generator, cfg: OstConfig, channels: int, num_categories: int):
    params = {}
    c = channels
    hidden = cfg.ffn_mult * c

    def dense(name, c_in, c_out, std=None):
        std = std if std is not None else math.sqrt(1.0 / c_in)
        params[f"{name}.w"] = Matrix(rng.normal(0.0, std, size=(c_in, c_out)))
        params[f"{name}.b"] = Matrix(np.zeros((1, c_out)))

    for b in range(cfg.num_blocks):
        p = f"block{b}"
        params[f"{p}.ln1.g"] = Matrix(np.ones((1, c)))
        params[f"{p}.ln1.b"] = Matrix(np.zeros((1, c)))
        dense(f"{p}.wq", c, c)
        dense(f"{p}.wk", c, c)
        dense(f"{p}.wv", c, c)
        dense(f"{p}.wo", c, c)
        dense(f"{p}.sigma", c, 1, std=0.02)
        params[f"{p}.ln2.g"] = Matrix(np.ones((1, c)))
        params[f"{p}.ln2.b"] = Matrix(np.zeros((1, c)))
        dense(f"{p}.ffn1", c, hidden)
        dense(f"{p}.ffn2", hidden, c)
    dense("head.cls", c, num_categories + 1)
    dense("head.mask", c, c)
    dense("head.align", c, cfg.align_dim)
    return params


def _ln(params, name, x, eps):
    return add(mul(layer_norm(x, eps), params[f"{name}.g"]), params[f"{name}.b"])


def _sigma(params, prefix, q):
    return softplus(linear(q, params[f"{prefix}.sigma.w"], params[f"{prefix}.sigma.b"]))


def _ffn(params, prefix, x):
    h = gelu(linear(x, params[f"{prefix}.ffn1.w"], params[f"{prefix}.ffn1.b"]))
    return linear(h, params[f"{prefix}.ffn2.w"], params[f"{prefix}.ffn2.b"])


def _block_superpoints(params, cfg, b, x, D):
    """One block over the superpoint stream; returns (x, (k, v)) with the
    key/value matrices kept for appended-query streams."""
    p = f"block{b}"
    u = _ln(params, f"{p}.ln1", x, cfg.layer_norm_eps)
    q = matmul(u, params[f"{p}.wq.w"])
    k = matmul(u, params[f"{p}.wk.w"])
    v = matmul(u, params[f"{p}.wv.w"])
    q = add(q, params[f"{p}.wq.b"])
    k = add(k, params[f"{p}.wk.b"])
    v = add(v, params[f"{p}.wv.b"])
    sigma = _sigma(params, p, q)
    logits = scale(matmul(q, transpose(k)), 1.0 / math.sqrt(q.cols))
    logits = sub(logits, mul(Matrix(D), sigma))
    attn = matmul(softmax_rows(logits), v)
    x = add(x, linear(attn, params[f"{p}.wo.w"], params[f"{p}.wo.b"]))
    w = _ln(params, f"{p}.ln2", x, cfg.layer_norm_eps)
    x = add(x, _ffn(params, p, w))
    return x, (k, v)


def _block_extra(params, cfg, b, x_e, bias_row, ctx):
    """One block over a single appended query (1 x C). The query attends to
    the M superpoints (keys/values from `ctx`) plus itself; superpoints do
    not see it, matching a -inf mask exactly."""
    p = f"block{b}"
    k_sp, v_sp = ctx
    u = _ln(params, f"{p}.ln1", x_e, cfg.layer_norm_eps)
    q = add(matmul(u, params[f"{p}.wq.w"]), params[f"{p}.wq.b"])
    k_self = add(matmul(u, params[f"{p}.wk.w"]), params[f"{p}.wk.b"])
    v_self = add(matmul(u, params[f"{p}.wv.w"]), params[f"{p}.wv.b"])
    sigma = _sigma(params, p, q)
    keys = concat_rows([k_sp, k_self])
    vals = concat_rows([v_sp, v_self])
    d_row = np.concatenate([bias_row, np.zeros((1, 1))], axis=1)
    logits = scale(matmul(q, transpose(keys)), 1.0 / math.sqrt(q.cols))
    logits = sub(logits, mul(Matrix(d_row), sigma))
    attn = matmul(softmax_rows(logits), vals)
    x_e = add(x_e, linear(attn, params[f"{p}.wo.w"], params[f"{p}.wo.b"]))
    w = _ln(params, f"{p}.ln2", x_e, cfg.layer_norm_eps)
    x_e = add(x_e, _ffn(params, p, w))
    return x_e


def _heads(params, x):
    return (
        linear(x, params["head.cls.w"], params["head.cls.b"]),
        linear(x, params["head.mask.w"], params["head.mask.b"]),
        linear(x, params["head.align.w"], params["head.align.b"]),
    )


def ost_forward(params, cfg: OstConfig, sp_feats: Matrix, centroids: np.ndarray,
                extras=()) -> OstResult:
    """Run the block stack and heads over superpoint features, optionally
    carrying appended queries through their isolated streams."""
    centroids = np.asarray(centroids, dtype=np.float64)
    if centroids.shape != (sp_feats.rows, 3):
        raise ShapeError("centroids must be M x 3")
    diff = centroids[:, None, :] - centroids[None, :, :]
    D = np.sqrt(np.sum(diff * diff, axis=2))
    np.fill_diagonal(D, 0.0)

    x = sp_feats
    block_ctx = []
    for b in range(cfg.num_blocks):
        x, ctx = _block_superpoints(params, cfg, b, x, D)
        block_ctx.append(ctx)
    cls, kern, align = _heads(params, x)
    output = OstOutput(class_logits=cls, mask_kernels=kern, alignment=align)

    extra_outputs = []
    for eq in extras:
        if not isinstance(eq, ExtraQuery):
            raise ConfigError("extras must be ExtraQuery instances")
        extra_outputs.append(
            run_extra_query(params, cfg, block_ctx, eq, centroids)
        )
    return OstResult(
        output=output,
        sp_final=x,
        extras=extra_outputs,
        sp_feats_in=sp_feats,
        centroids=centroids,
        block_ctx=block_ctx,
    )


def run_extra_query(params, cfg: OstConfig, block_ctx, eq: ExtraQuery,
                    centroids: np.ndarray) -> ExtraOutput:
    """Carry one appended query through the frozen-or-live block context."""
    if eq.feature.rows != 1:
        raise ShapeError("extra query feature must be a single row")
    bias = eq.bias_row(centroids)
    x_e = eq.feature
    for b in range(cfg.num_blocks):
        x_e = _block_extra(params, cfg, b, x_e, bias, block_ctx[b])
    cls, kern, align = _heads(params, x_e)
    return ExtraOutput(final=x_e, class_logits=cls, mask_kernel=kern, alignment=align)


def apply_mask_head(kernels: Matrix, sp_feats_in: Matrix) -> Matrix:
    """mask_logits[q, s] = kernel_q . input_feature_s; binarize with
    sigmoid > 0.5 (boundary logits count as background)."""
    if kernels.cols != sp_feats_in.cols:
        raise ShapeError("kernel / feature width mismatch")
    return matmul(kernels, transpose(sp_feats_in))


def binarize_mask_logits(mask_logits: Matrix) -> np.ndarray:
    probs = sigmoid(mask_logits).data
    return probs > 0.5


def objectness_scores(class_logits: np.ndarray) -> np.ndarray:
    """Highest foreground softmax probability per query; the last column is
    the no-object class."""
    x = np.asarray(class_logits, dtype=np.float64)
    x = x - x.max(axis=1, keepdims=True)
    e = np.exp(x)
    probs = e / e.sum(axis=1, keepdims=True)
    return probs[:, :-1].max(axis=1)


def select_topk(output: OstOutput, k: int):
    """Indices of the K queries with the highest objectness (ties broken by
    lower query index) and their alignment rows. Returns all M when M < K."""
    if k < 1:
        raise ConfigError("top-k must be >= 1")
    scores = objectness_scores(output.class_logits.data)
    order = np.argsort(-scores, kind="stable")
    idx = order[: min(k, scores.shape[0])]
    return idx, gather_rows(output.alignment, idx)
