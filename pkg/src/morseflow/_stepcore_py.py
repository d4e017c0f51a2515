"""Pure-numpy stepping loops: the fallback twin of the compiled core.

All loops advance a timeline array X in place. Row p holds the solution at
time (p - n_pre) * h, so rows below n_pre are the spliced prehistory. Memory
integrals are window dot products with reversed weight vectors; the s = 0
quadrature node is omitted because eta vanishes there identically.

Each loop returns -1 on completion, or the row index at which the solution
left the finite bound (NaN counts as leaving).
"""

from __future__ import annotations

import numpy as np


def run_steps(X, n_pre, n_steps, h, eps, a, b, rw1, rwh, wsum1, wsumh, mtot, blow_bound):
    """RK4 loop for the diagonal quartic family with a scalar memory profile.

    Gradient components are a_j x_j - b_j x_j^3. rw1 holds the reversed
    trapezoid weights of M on full-step nodes, rwh the reversed midpoint
    weights on half-step nodes; their sums are wsum1 and wsumh. mtot is the
    quadrature value of the full integral of M.
    """
    nM = len(rw1)
    lin1 = eps * (mtot - wsum1)
    linh = eps * (mtot - wsumh)
    c1 = rw1 @ X[n_pre - nM:n_pre]
    for k in range(n_pre, n_pre + n_steps):
        blk = X[k + 1 - nM:k + 1]
        ch = rwh @ blk
        c4 = rw1 @ blk
        x = X[k]
        k1 = (a + lin1) * x - b * x**3 + eps * c1
        xs = x + 0.5 * h * k1
        k2 = (a + linh) * xs - b * xs**3 + eps * ch
        xs = x + 0.5 * h * k2
        k3 = (a + linh) * xs - b * xs**3 + eps * ch
        xs = x + h * k3
        k4 = (a + lin1) * xs - b * xs**3 + eps * c4
        xn = x + (h / 6.0) * (k1 + 2.0 * (k2 + k3) + k4)
        X[k + 1] = xn
        if not np.max(np.abs(xn)) <= blow_bound:
            return k + 1
        c1 = c4
    return -1


def run_steps_generic(X, n_pre, n_steps, h, eps, grad, mtot, RW1, RWH, W1, Wh, blow_bound):
    """RK4 loop for an arbitrary gradient field and matrix-valued memory.

    RW1 and RWH are (nM, d, d) stacks of reversed weighted kernel matrices;
    W1, Wh their sums; mtot the (d, d) integral of M.
    """
    nM = RW1.shape[0]
    L1 = eps * (mtot - W1)
    Lh = eps * (mtot - Wh)
    c1 = np.einsum("sij,sj->i", RW1, X[n_pre - nM:n_pre])
    for k in range(n_pre, n_pre + n_steps):
        blk = X[k + 1 - nM:k + 1]
        ch = np.einsum("sij,sj->i", RWH, blk)
        c4 = np.einsum("sij,sj->i", RW1, blk)
        x = X[k]
        k1 = grad(x) + L1 @ x + eps * c1
        xs = x + 0.5 * h * k1
        k2 = grad(xs) + Lh @ xs + eps * ch
        xs = x + 0.5 * h * k2
        k3 = grad(xs) + Lh @ xs + eps * ch
        xs = x + h * k3
        k4 = grad(xs) + L1 @ xs + eps * c4
        xn = x + (h / 6.0) * (k1 + 2.0 * (k2 + k3) + k4)
        X[k + 1] = xn
        if not np.max(np.abs(xn)) <= blow_bound:
            return k + 1
        c1 = c4
    return -1


def run_var_steps(W, n_pre, n_steps, h, eps, A_full, A_half, RW1, RWH, blow_bound):
    """RK4 loop for the tangent equation along a frozen base trajectory.

    A_full[k] is the combined linear operator at full node k (Jacobian of
    the drift plus the local memory compensation), A_half[k] the same at
    the half node between k and k+1; both already include eps.
    """
    nM = RW1.shape[0]
    c1 = np.einsum("sij,sj->i", RW1, W[n_pre - nM:n_pre])
    for k0 in range(n_steps):
        k = n_pre + k0
        blk = W[k + 1 - nM:k + 1]
        ch = np.einsum("sij,sj->i", RWH, blk)
        c4 = np.einsum("sij,sj->i", RW1, blk)
        w = W[k]
        k1 = A_full[k0] @ w + eps * c1
        ws = w + 0.5 * h * k1
        k2 = A_half[k0] @ ws + eps * ch
        ws = w + 0.5 * h * k2
        k3 = A_half[k0] @ ws + eps * ch
        ws = w + h * k3
        k4 = A_full[k0 + 1] @ ws + eps * c4
        wn = w + (h / 6.0) * (k1 + 2.0 * (k2 + k3) + k4)
        W[k + 1] = wn
        if not np.max(np.abs(wn)) <= blow_bound:
            return k + 1
        c1 = c4
    return -1
