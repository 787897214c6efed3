"""Independent brute-force re-implementations used as test oracles.

Everything here is written as plain per-example loops against the set
definitions, with its own bin-membership logic; only the summation
primitive is shared with the library so that agreement can be asserted
bitwise.
"""

import numpy as np


def interval(reward, uncertainty, beta):
    return reward - beta * uncertainty, reward + beta * uncertainty


def classify_pair(est_chosen, est_rejected):
    """Return (true, confident) from the raw set definitions."""
    true = est_chosen.reward > est_rejected.reward
    lo = max(est_chosen.lower, est_rejected.lower)
    hi = min(est_chosen.upper, est_rejected.upper)
    overlap = lo <= hi
    return true, not overlap


def confusion_counts(estimate_pairs):
    ct = ut = cf = uf = 0
    for chosen, rejected in estimate_pairs:
        true, confident = classify_pair(chosen, rejected)
        if true and confident:
            ct += 1
        elif true:
            ut += 1
        elif confident:
            cf += 1
        else:
            uf += 1
    return ct, ut, cf, uf


def ranking_score(ct, ut, cf, uf, alpha):
    t = ct + ut
    f = cf + uf
    return ct / (t + alpha * f) - cf / (f + alpha * t)


def bin_of(value, m_bins):
    """Walk the equal-width edges; last bin is closed on the right."""
    for b in range(m_bins):
        left = b / m_bins
        right = (b + 1) / m_bins
        if b == m_bins - 1:
            if left <= value <= 1.0:
                return b
        elif left <= value < right:
            return b
    raise AssertionError(f"value {value} not in [0, 1]")


def binned_stats(key_values, columns, m_bins):
    """Per-bin counts and per-column means, accumulated in index order."""
    members = [[] for _ in range(m_bins)]
    for i, v in enumerate(key_values):
        members[bin_of(v, m_bins)].append(i)
    counts = [len(ms) for ms in members]
    means = []
    for column in columns:
        col_means = []
        for ms in members:
            if ms:
                col_means.append(np.sum(np.array([column[i] for i in ms])) / len(ms))
            else:
                col_means.append(None)
        means.append(col_means)
    return counts, means


def ece(p_hat, labels, m_bins):
    counts, (mean_pred, freq) = binned_stats(p_hat, [p_hat, labels], m_bins)
    total = float(np.sum(np.array(counts, dtype=np.float64)))
    value = 0.0
    for b in range(m_bins):
        if counts[b] > 0:
            value += counts[b] / total * abs(freq[b] - mean_pred[b])
    return value


def elce(p_lower, labels, m_bins):
    counts, (mean_lower, freq) = binned_stats(p_lower, [p_lower, labels], m_bins)
    total = float(np.sum(np.array(counts, dtype=np.float64)))
    value = 0.0
    for b in range(m_bins):
        if counts[b] > 0:
            value += counts[b] / total * max(mean_lower[b] - freq[b], 0.0)
    return value


def euce(p_upper, labels, m_bins):
    counts, (mean_upper, freq) = binned_stats(p_upper, [p_upper, labels], m_bins)
    total = float(np.sum(np.array(counts, dtype=np.float64)))
    value = 0.0
    for b in range(m_bins):
        if counts[b] > 0:
            value += counts[b] / total * max(freq[b] - mean_upper[b], 0.0)
    return value


def two_pass_mean_std(values):
    values = list(values)
    k = len(values)
    mean = np.sum(np.array(values)) / k
    sq = [(v - mean) ** 2 for v in values]
    return mean, np.sqrt(np.sum(np.array(sq)) / (k - 1))


def sherman_morrison_quad(hessian_inv, delta, z):
    """z' (H + d d')^-1 z from the rank-one update identity."""
    hz = hessian_inv @ z
    hd = hessian_inv @ delta
    return z @ hz - (z @ hd) ** 2 / (1.0 + delta @ hd)


def flatten_params(param_dicts):
    """Flatten a list of name->array dicts into one vector (sorted keys)."""
    chunks = []
    for params in param_dicts:
        for key in sorted(params):
            chunks.append(params[key].ravel().copy())
    return np.concatenate(chunks)


def set_params(param_dicts, vector):
    """Write a flat vector back into the dict structure, in place."""
    offset = 0
    for params in param_dicts:
        for key in sorted(params):
            size = params[key].size
            params[key][...] = vector[offset : offset + size].reshape(params[key].shape)
            offset += size
    assert offset == vector.size


def finite_difference_gradient(loss_fn, param_dicts, step=1e-5):
    """Central finite differences of a scalar loss over flattened params."""
    theta = flatten_params(param_dicts)
    grad = np.zeros_like(theta)
    for i in range(theta.size):
        bumped = theta.copy()
        bumped[i] = theta[i] + step
        set_params(param_dicts, bumped)
        up = loss_fn()
        bumped[i] = theta[i] - step
        set_params(param_dicts, bumped)
        down = loss_fn()
        grad[i] = (up - down) / (2.0 * step)
    set_params(param_dicts, theta)
    return grad


def relative_agreement(a, b, rtol, atol=1e-10):
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    return np.all(np.abs(a - b) <= rtol * np.maximum(np.abs(a), np.abs(b)) + atol)
