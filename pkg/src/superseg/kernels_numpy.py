"""Pure-numpy implementations of the hot kernels.

Selected at import time by `superseg.accel` when numba is unavailable or
disabled via SUPERSEG_NUMBA=0. Signatures and semantics match
`superseg.kernels_numba` (results agree to float64 rounding; the numba path
accumulates in loop order, this path uses vectorized per-tap matmuls).
"""

import numpy as np


def segment_sum(values, seg, num_segments):
    """Sum rows of `values` into `num_segments` buckets given by `seg`."""
    out = np.zeros((num_segments, values.shape[1]), dtype=np.float64)
    for c in range(values.shape[1]):
        out[:, c] = np.bincount(seg, weights=values[:, c], minlength=num_segments)
    return out


def conv_forward(feats, weights, bias, pair_start, pair_out, pair_in):
    """Sparse submanifold convolution over precomputed neighbor pairs.

    Pairs are grouped by kernel tap: tap k owns pairs
    [pair_start[k], pair_start[k+1]). Within one tap every output voxel
    appears at most once, so fancy-index accumulation is safe.
    """
    n = feats.shape[0]
    out = np.zeros((n, weights.shape[2]), dtype=np.float64)
    out += bias
    for k in range(weights.shape[0]):
        s, e = pair_start[k], pair_start[k + 1]
        if s == e:
            continue
        out[pair_out[s:e]] += feats[pair_in[s:e]] @ weights[k]
    return out


def conv_backward_feats(grad, weights, pair_start, pair_out, pair_in, n_voxels):
    d_feats = np.zeros((n_voxels, weights.shape[1]), dtype=np.float64)
    for k in range(weights.shape[0]):
        s, e = pair_start[k], pair_start[k + 1]
        if s == e:
            continue
        d_feats[pair_in[s:e]] += grad[pair_out[s:e]] @ weights[k].T
    return d_feats


def conv_backward_weights(grad, feats, pair_start, pair_out, pair_in, n_taps):
    d_w = np.zeros((n_taps, feats.shape[1], grad.shape[1]), dtype=np.float64)
    for k in range(n_taps):
        s, e = pair_start[k], pair_start[k + 1]
        if s == e:
            continue
        d_w[k] = feats[pair_in[s:e]].T @ grad[pair_out[s:e]]
    return d_w
