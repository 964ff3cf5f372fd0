"""Compiled inner loops.

These mirror the step functions in :mod:`tdlab.algos` operation for operation;
the test suite checks the two paths against each other. Randomness never
enters a kernel: callers pass pre-drawn uniforms and indices.
"""

import numpy as np
from numba import njit


@njit(cache=True, nogil=True)
def walk(cum, start, uniforms):
    """Inverse-CDF Markov walk; ``cum`` holds row-wise cumulative transition sums."""
    n = uniforms.shape[0]
    n_states = cum.shape[0]
    out = np.empty(n + 1, dtype=np.int64)
    out[0] = start
    s = start
    for k in range(n):
        u = uniforms[k]
        lo = 0
        hi = n_states - 1
        while lo < hi:
            mid = (lo + hi) // 2
            if cum[s, mid] <= u:
                lo = mid + 1
            else:
                hi = mid
        # rounding can leave cum[s, -1] a hair below 1; fall back to the last reachable state
        while lo > 0 and cum[s, lo] == cum[s, lo - 1]:
            lo -= 1
        s = lo
        out[k + 1] = s
    return out


@njit(cache=True, nogil=True)
def _increment(reward, phi, beta, s, s_next, theta, out):
    d = theta.shape[0]
    v = 0.0
    v_next = 0.0
    for j in range(d):
        v += phi[s, j] * theta[j]
        v_next += phi[s_next, j] * theta[j]
    delta = reward[s] + beta * v_next - v
    for j in range(d):
        out[j] = delta * phi[s, j]


@njit(cache=True, nogil=True)
def td_path(states, reward, phi, beta, theta0, gammas, checkpoints):
    """Run TD(0); return iterates and running averages at each checkpoint.

    ``checkpoints`` are iteration counts (number of updates applied), sorted.
    """
    n = gammas.shape[0]
    d = theta0.shape[0]
    theta = theta0.copy()
    avg = np.zeros(d)
    inc = np.empty(d)
    n_cp = checkpoints.shape[0]
    thetas = np.empty((n_cp, d))
    avgs = np.empty((n_cp, d))
    c = 0
    for k in range(n):
        _increment(reward, phi, beta, states[k], states[k + 1], theta, inc)
        g = gammas[k]
        for j in range(d):
            theta[j] += g * inc[j]
        w = 1.0 / (k + 1)
        for j in range(d):
            avg[j] += (theta[j] - avg[j]) * w
        while c < n_cp and checkpoints[c] == k + 1:
            thetas[c] = theta
            avgs[c] = avg
            c += 1
    return thetas, avgs


@njit(cache=True, nogil=True)
def ctd_path(states, reward, phi, beta, theta0, gamma, epoch_length, radius,
             picks, resample, draws, checkpoints):
    """Run CTD; return iterates at checkpoints and the anchor of every epoch.

    Epoch 0 is plain constant-step TD(0). At each epoch boundary the anchor is
    ``iterates[picks[m - 1]]`` of the finished epoch and the centering vector is
    the mean increment at the anchor over that epoch's samples. With
    ``resample`` the update sample is ``draws[k]``-th stored sample of the
    previous epoch instead of the fresh one.
    """
    n = states.shape[0] - 1
    d = theta0.shape[0]
    m_len = epoch_length
    theta = theta0.copy()
    anchor = theta0.copy()
    f_hat = np.zeros(d)
    buf = np.empty((m_len, d))
    prev_start = 0
    inc = np.empty(d)
    inc_anchor = np.empty(d)
    n_epochs = n // m_len + 1
    anchors = np.empty((n_epochs, d))
    anchors[0] = theta0
    n_cp = checkpoints.shape[0]
    thetas = np.empty((n_cp, d))
    c = 0
    epoch = 0
    for k in range(n):
        i = k - epoch * m_len
        if i == m_len:
            epoch += 1
            i = 0
            anchor = buf[picks[epoch - 1]].copy()
            prev_start = (epoch - 1) * m_len
            for j in range(d):
                f_hat[j] = 0.0
            for t in range(prev_start, prev_start + m_len):
                _increment(reward, phi, beta, states[t], states[t + 1], anchor, inc)
                for j in range(d):
                    f_hat[j] += inc[j]
            for j in range(d):
                f_hat[j] /= m_len
            theta = anchor.copy()
            anchors[epoch] = anchor
        buf[i] = theta
        if epoch > 0 and resample:
            t = prev_start + draws[k]
            s, s_next = states[t], states[t + 1]
        else:
            s, s_next = states[k], states[k + 1]
        _increment(reward, phi, beta, s, s_next, theta, inc)
        if epoch > 0:
            _increment(reward, phi, beta, s, s_next, anchor, inc_anchor)
            for j in range(d):
                theta[j] += gamma * (inc[j] - inc_anchor[j] + f_hat[j])
        else:
            for j in range(d):
                theta[j] += gamma * inc[j]
        norm = 0.0
        for j in range(d):
            norm += theta[j] * theta[j]
        norm = np.sqrt(norm)
        if norm > radius:
            for j in range(d):
                theta[j] *= radius / norm
        while c < n_cp and checkpoints[c] == k + 1:
            thetas[c] = theta
            c += 1
    return thetas, anchors[: epoch + 1]
