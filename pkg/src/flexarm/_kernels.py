"""Compiled inner loops: modal equations of motion, RK4, and the 1 kHz control loop.

Model data travels as a scalar vector ``S`` plus per-mode arrays so the kernels
stay free of Python objects. Layout of ``S`` is fixed by the ``S_*`` indices.
"""

import math

import numpy as np
from numba import njit

S_IM, S_RHOA, S_EI, S_MTIP, S_MLINK, S_L, S_G = 0, 1, 2, 3, 4, 5, 6
S_IXX, S_IXN, S_INN, S_NL, S_CNN, S_FREEZE, S_N2_0 = 7, 8, 9, 10, 11, 12, 13
S_SIZE = 14

CTRL_NONE, CTRL_PID, CTRL_PDE = 0, 1, 2

# controller parameter vector layout
C_KP, C_KI, C_KD, C_ALPHA, C_EI, C_MLINK, C_L, C_MTIP, C_IM, C_G, C_FF, C_TAUMAX, C_IMAX = range(13)
C_SIZE = 13

STATUS_OK, STATUS_BLOWUP = 0, 1


@njit(cache=True)
def _cholesky_solve(A, b, n):
    # A is overwritten with its Cholesky factor; b with the solution. Returns False if not SPD.
    for j in range(n):
        d = A[j, j]
        for k in range(j):
            d -= A[j, k] * A[j, k]
        if not d > 0.0:
            return False
        d = math.sqrt(d)
        A[j, j] = d
        for i in range(j + 1, n):
            v = A[i, j]
            for k in range(j):
                v -= A[i, k] * A[j, k]
            A[i, j] = v / d
    for i in range(n):
        v = b[i]
        for k in range(i):
            v -= A[i, k] * b[k]
        b[i] = v / A[i, i]
    for i in range(n - 1, -1, -1):
        v = b[i]
        for k in range(i + 1, n):
            v -= A[k, i] * b[k]
        b[i] = v / A[i, i]
    return True


@njit(cache=True)
def mass_matrix(theta, S, PhiL, ix, inu, G, out):
    n = PhiL.shape[0]
    rhoA, Mt = S[S_RHOA], S[S_MTIP]
    sk = 0.0 if S[S_FREEZE] > 0.5 else math.sin(theta)
    aL = S[S_L] + sk * S[S_NL]
    out[0, 0] = S[S_IM] + rhoA * (S[S_IXX] + 2.0 * sk * S[S_IXN] + sk * sk * S[S_INN]) + Mt * aL * aL
    for i in range(n):
        v = rhoA * (ix[i] + sk * inu[i]) + Mt * aL * PhiL[i]
        out[0, i + 1] = v
        out[i + 1, 0] = v
        for j in range(i, n):
            v = rhoA * G[i, j] + Mt * PhiL[i] * PhiL[j]
            out[i + 1, j + 1] = v
            out[j + 1, i + 1] = v


@njit(cache=True)
def generalized_force(q, qd, tau, S, PhiL, ix, inu, bv, K, C, out):
    """Right-hand side ``h`` of ``M(q) qdd = h(q, qd, tau)``."""
    n = PhiL.shape[0]
    th, thd = q[0], qd[0]
    s, c = math.sin(th), math.cos(th)
    rhoA, EI, Mt, g, L = S[S_RHOA], S[S_EI], S[S_MTIP], S[S_G], S[S_L]
    nL = S[S_NL]
    frozen = S[S_FREEZE] > 0.5
    sk = 0.0 if frozen else s
    ck = 0.0 if frozen else c
    aL = L + sk * nL
    # v = (dM/dtheta) qd
    d00 = rhoA * (2.0 * ck * S[S_IXN] + 2.0 * sk * ck * S[S_INN]) + 2.0 * Mt * aL * ck * nL
    v0 = d00 * thd
    for i in range(n):
        d0i = rhoA * ck * inu[i] + Mt * ck * nL * PhiL[i]
        v0 += d0i * qd[i + 1]
        out[i + 1] = -thd * (d0i * thd)
    qv = thd * v0
    for i in range(n):
        qv += qd[i + 1] * (rhoA * ck * inu[i] + Mt * ck * nL * PhiL[i]) * thd
    out[0] = -thd * v0 + 0.5 * qv
    # potential gradient
    omegaL = -c * nL
    eb = 0.0
    for i in range(n):
        omegaL += PhiL[i] * q[i + 1]
        eb += bv[i] * q[i + 1]
    dU0 = (0.5 * S[S_MLINK] + Mt) * g * L * c - Mt * g * s * omegaL + Mt * g * c * s * nL
    dU0 += EI * (s * eb - s * c * S[S_CNN])
    out[0] += tau - dU0
    for i in range(n):
        ke = 0.0
        ce = 0.0
        for j in range(n):
            ke += K[i, j] * q[j + 1]
            ce += C[i, j] * qd[j + 1]
        out[i + 1] -= Mt * g * c * PhiL[i] + EI * (ke - c * bv[i]) + ce


@njit(cache=True)
def accelerations(q, qd, tau, S, PhiL, ix, inu, bv, G, K, C, Mwork, out):
    generalized_force(q, qd, tau, S, PhiL, ix, inu, bv, K, C, out)
    mass_matrix(q[0], S, PhiL, ix, inu, G, Mwork)
    return _cholesky_solve(Mwork, out, q.shape[0])


@njit(cache=True)
def rk4_step(q, qd, tau, dt, S, PhiL, ix, inu, bv, G, K, C, work):
    """In-place classical RK4 step of the first-order system (q, qd). Returns False on failure."""
    n = q.shape[0]
    Mw = np.empty((n, n))
    k1v = work[0]
    k2v = work[1]
    k3v = work[2]
    k4v = work[3]
    qt = work[4]
    qdt = work[5]
    ok = accelerations(q, qd, tau, S, PhiL, ix, inu, bv, G, K, C, Mw, k1v)
    for i in range(n):
        qt[i] = q[i] + 0.5 * dt * qd[i]
        qdt[i] = qd[i] + 0.5 * dt * k1v[i]
    ok &= accelerations(qt, qdt, tau, S, PhiL, ix, inu, bv, G, K, C, Mw, k2v)
    for i in range(n):
        qt[i] = q[i] + 0.5 * dt * (qd[i] + 0.5 * dt * k1v[i])
        qdt[i] = qd[i] + 0.5 * dt * k2v[i]
    ok &= accelerations(qt, qdt, tau, S, PhiL, ix, inu, bv, G, K, C, Mw, k3v)
    for i in range(n):
        qt[i] = q[i] + dt * (qd[i] + 0.5 * dt * k2v[i])
        qdt[i] = qd[i] + dt * k3v[i]
    ok &= accelerations(qt, qdt, tau, S, PhiL, ix, inu, bv, G, K, C, Mw, k4v)
    # velocities at the four stages are qd, qd+dt/2 k1, qd+dt/2 k2, qd+dt k3
    finite = True
    for i in range(n):
        q[i] += dt * (qd[i] + dt / 6.0 * (k1v[i] + k2v[i] + k3v[i]))
        qd[i] += dt / 6.0 * (k1v[i] + 2.0 * k2v[i] + 2.0 * k3v[i] + k4v[i])
        if not (math.isfinite(q[i]) and math.isfinite(qd[i])):
            finite = False
    return ok and finite


@njit(cache=True)
def energies(q, qd, S, PhiL, ix, inu, bv, G, K):
    n = q.shape[0]
    Mw = np.empty((n, n))
    mass_matrix(q[0], S, PhiL, ix, inu, G, Mw)
    T = 0.0
    for i in range(n):
        for j in range(n):
            T += 0.5 * qd[i] * Mw[i, j] * qd[j]
    th = q[0]
    s, c = math.sin(th), math.cos(th)
    m = n - 1
    omegaL = -c * S[S_NL]
    eb = 0.0
    eke = 0.0
    for i in range(m):
        omegaL += PhiL[i] * q[i + 1]
        eb += bv[i] * q[i + 1]
        for j in range(m):
            eke += q[i + 1] * K[i, j] * q[j + 1]
    U = (0.5 * S[S_MLINK] + S[S_MTIP]) * S[S_G] * S[S_L] * s + S[S_MTIP] * S[S_G] * c * omegaL
    U += 0.5 * S[S_EI] * (eke - 2.0 * c * eb + c * c * S[S_CNN])
    return T, U


@njit(cache=True)
def integrate_open_loop(q, qd, torques, dt, substeps, S, PhiL, ix, inu, bv, G, K, C, log_every, log):
    """Apply ``torques[k]`` for ``substeps`` RK4 steps each. Logs ``[t, q..., qd..., T, U]``."""
    n = q.shape[0]
    work = np.empty((6, n))
    row = 0
    t = 0.0
    for k in range(torques.shape[0]):
        for j in range(substeps):
            step_index = k * substeps + j
            if log_every > 0 and step_index % log_every == 0:
                T, U = energies(q, qd, S, PhiL, ix, inu, bv, G, K)
                log[row, 0] = t
                log[row, 1 : 1 + n] = q
                log[row, 1 + n : 1 + 2 * n] = qd
                log[row, 1 + 2 * n] = T
                log[row, 2 + 2 * n] = U
                row += 1
            if not rk4_step(q, qd, torques[k], dt, S, PhiL, ix, inu, bv, G, K, C, work):
                return STATUS_BLOWUP, t, row
            t += dt
    if log_every > 0:
        T, U = energies(q, qd, S, PhiL, ix, inu, bv, G, K)
        log[row, 0] = t
        log[row, 1 : 1 + n] = q
        log[row, 1 + n : 1 + 2 * n] = qd
        log[row, 1 + 2 * n] = T
        log[row, 2 + 2 * n] = U
        row += 1
    return STATUS_OK, t, row


@njit(cache=True)
def control_torque(kind, P, e, e_int, e_dot, theta, omegaL, curv0, thdd_d):
    if kind == CTRL_PID:
        return P[C_KP] * e + P[C_KI] * e_int + P[C_KD] * e_dot
    if kind == CTRL_PDE:
        H = (
            P[C_EI] * curv0
            - 0.5 * P[C_MLINK] * P[C_G] * P[C_L] * math.cos(theta)
            + P[C_MTIP] * P[C_G] * omegaL * math.sin(theta)
            - P[C_IM] * thdd_d * P[C_FF]
        )
        return P[C_KP] * e + P[C_KD] * e_dot - H
    return 0.0


@njit(cache=True)
def run_closed_loop(
    q, qd, ref, kind, P, e_int0, dt, substeps, S, PhiL, Phi2_0, ix, inu, bv, G, K, C, log
):
    """Run ``ref.shape[0]`` control ticks with zero-order-hold torque.

    ``ref[k] = (theta_d, theta_d_dot, theta_d_ddot)`` at tick ``k``. For every tick
    ``log[k]`` receives ``[theta, theta_dot, omega_L, omega_L_dot, tau, T, U, e, e_dot, e_int]``
    sampled at the tick instant (before the step). Returns
    ``(status, ticks_done, e_int, n_saturated)``.
    """
    n = q.shape[0]
    m = n - 1
    work = np.empty((6, n))
    e_int = e_int0
    n_sat = 0
    tau_max = P[C_TAUMAX]
    i_max = P[C_IMAX]
    dt_ctrl = dt * substeps
    for k in range(ref.shape[0]):
        th = q[0]
        s, c = math.sin(th), math.cos(th)
        omegaL = -c * S[S_NL]
        omegaLd = s * qd[0] * S[S_NL]
        curv0 = -c * S[S_N2_0]
        for i in range(m):
            omegaL += PhiL[i] * q[i + 1]
            omegaLd += PhiL[i] * qd[i + 1]
            curv0 += Phi2_0[i] * q[i + 1]
        e = ref[k, 0] - th
        e_dot = ref[k, 1] - qd[0]
        if kind == CTRL_PID:
            e_int += e * dt_ctrl
            if e_int > i_max:
                e_int = i_max
            elif e_int < -i_max:
                e_int = -i_max
        tau = control_torque(kind, P, e, e_int, e_dot, th, omegaL, curv0, ref[k, 2])
        if tau > tau_max:
            tau = tau_max
            n_sat += 1
        elif tau < -tau_max:
            tau = -tau_max
            n_sat += 1
        T, U = energies(q, qd, S, PhiL, ix, inu, bv, G, K)
        log[k, 0] = th
        log[k, 1] = qd[0]
        log[k, 2] = omegaL
        log[k, 3] = omegaLd
        log[k, 4] = tau
        log[k, 5] = T
        log[k, 6] = U
        log[k, 7] = e
        log[k, 8] = e_dot
        log[k, 9] = e_int
        for j in range(substeps):
            if not rk4_step(q, qd, tau, dt, S, PhiL, ix, inu, bv, G, K, C, work):
                return STATUS_BLOWUP, k, e_int, n_sat
    return STATUS_OK, ref.shape[0], e_int, n_sat
