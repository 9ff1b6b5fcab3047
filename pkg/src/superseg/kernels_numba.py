"""Numba-jitted implementations of the hot kernels.

Importing this module requires numba. fastmath stays off and no parallel
loops are used so each kernel is deterministic run to run.
"""

import numpy as np
from numba import njit

_OPTS = dict(cache=True, fastmath=False)


@njit(**_OPTS)
def segment_sum(values, seg, num_segments):
    out = np.zeros((num_segments, values.shape[1]), dtype=np.float64)
    for v in range(values.shape[0]):
        s = seg[v]
        for c in range(values.shape[1]):
            out[s, c] += values[v, c]
    return out


@njit(**_OPTS)
def conv_forward(feats, weights, bias, pair_start, pair_out, pair_in):
    n = feats.shape[0]
    c_in = weights.shape[1]
    c_out = weights.shape[2]
    out = np.zeros((n, c_out), dtype=np.float64)
    for v in range(n):
        for j in range(c_out):
            out[v, j] = bias[j]
    for k in range(weights.shape[0]):
        for p in range(pair_start[k], pair_start[k + 1]):
            vo = pair_out[p]
            vi = pair_in[p]
            for i in range(c_in):
                f = feats[vi, i]
                if f != 0.0:
                    for j in range(c_out):
                        out[vo, j] += f * weights[k, i, j]
    return out


@njit(**_OPTS)
def conv_backward_feats(grad, weights, pair_start, pair_out, pair_in, n_voxels):
    c_in = weights.shape[1]
    c_out = weights.shape[2]
    d_feats = np.zeros((n_voxels, c_in), dtype=np.float64)
    for k in range(weights.shape[0]):
        for p in range(pair_start[k], pair_start[k + 1]):
            vo = pair_out[p]
            vi = pair_in[p]
            for i in range(c_in):
                acc = 0.0
                for j in range(c_out):
                    acc += grad[vo, j] * weights[k, i, j]
                d_feats[vi, i] += acc
    return d_feats


@njit(**_OPTS)
def conv_backward_weights(grad, feats, pair_start, pair_out, pair_in, n_taps):
    c_in = feats.shape[1]
    c_out = grad.shape[1]
    d_w = np.zeros((n_taps, c_in, c_out), dtype=np.float64)
    for k in range(n_taps):
        for p in range(pair_start[k], pair_start[k + 1]):
            vo = pair_out[p]
            vi = pair_in[p]
            for i in range(c_in):
                f = feats[vi, i]
                if f != 0.0:
                    for j in range(c_out):
                        d_w[k, i, j] += f * grad[vo, j]
    return d_w
