"""Reference (NumPy) implementation of the latent RK4 kernels.

The processor is ``f(y, s) = tanh(y @ P1[:m] + s * P1[m] + p1) @ P2 + p2``
with ``s`` the normalized time. One RK4 step of size 1 maps step ``i`` to
``i + 1`` using stage times ``i, i + 1/2, i + 1/2, i + 1`` divided by
``horizon``.

``rk4_rollout`` returns the latent path and the per-stage inputs and hidden
activations needed by ``rk4_rollout_vjp``, which back-propagates a cotangent
on the whole path through the unrolled steps.
"""

from __future__ import annotations

import numpy as np

_STAGE_OFFSETS = (0.0, 0.5, 0.5, 1.0)


def rk4_rollout(h0, P1, p1, P2, p2, n_steps, horizon):
    m = h0.shape[0]
    q = p1.shape[0]
    Wy = P1[:m]
    ws = P1[m]
    H = np.empty((n_steps + 1, m))
    Y = np.empty((n_steps, 4, m))
    A = np.empty((n_steps, 4, q))
    H[0] = h0
    for i in range(n_steps):
        h = H[i]
        ks = []
        y = h
        for stage, off in enumerate(_STAGE_OFFSETS):
            if stage == 1 or stage == 2:
                y = h + 0.5 * ks[-1]
            elif stage == 3:
                y = h + ks[-1]
            s = (i + off) / horizon
            a = np.tanh(y @ Wy + s * ws + p1)
            Y[i, stage] = y
            A[i, stage] = a
            ks.append(a @ P2 + p2)
        H[i + 1] = h + (ks[0] + 2.0 * ks[1] + 2.0 * ks[2] + ks[3]) / 6.0
    return H, Y, A


def rk4_rollout_vjp(G, P1, p1, P2, p2, Y, A, horizon):
    """Cotangent ``G`` [n_steps + 1, m] on the path -> gradients.

    Returns ``(dh0, dP1, dp1, dP2, dp2)``.
    """
    n_steps = Y.shape[0]
    m = G.shape[1]
    Wy = P1[:m]
    dP1 = np.zeros_like(P1)
    dp1 = np.zeros_like(p1)
    dP2 = np.zeros_like(P2)
    dp2 = np.zeros_like(p2)
    g = G[n_steps].copy()
    for i in range(n_steps - 1, -1, -1):
        gk = [g / 6.0, g / 3.0, g / 3.0, g / 6.0]
        dh = g.copy()
        for stage in (3, 2, 1, 0):
            a = A[i, stage]
            gf = gk[stage]
            dP2 += np.outer(a, gf)
            dp2 += gf
            gz = (gf @ P2.T) * (1.0 - a * a)
            s = (i + _STAGE_OFFSETS[stage]) / horizon
            dP1[:m] += np.outer(Y[i, stage], gz)
            dP1[m] += s * gz
            dp1 += gz
            gy = gz @ Wy.T
            dh += gy
            if stage == 3:
                gk[2] = gk[2] + gy
            elif stage > 0:
                gk[stage - 1] = gk[stage - 1] + 0.5 * gy
        g = dh + G[i]
    return g, dP1, dp1, dP2, dp2
