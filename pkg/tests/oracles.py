"""Independent reference computations shared by the unit and acceptance tests.

These deliberately re-derive expected values by direct recursion/enumeration
rather than calling into the production constraint builders.
"""

import numpy as np


def clpu_recursion(u_seq, tau, dsat, gamma, ksteady, dt, ms,
                   u_ini, d_ini, dre_ini, k_ini, p_max):
    """Tightest-bound evaluation of the pickup-duration/decay recursion for a
    fixed on/off sequence, i.e. what a minimizing solver must return.

    All duration quantities in minutes; k values p.u. of the synchronized
    peak ``p_max`` (kW).  Returns dict of per-interval arrays.
    """
    T = len(u_seq)
    d = np.zeros(T)
    dpeak = np.zeros(T)
    dre = np.zeros(T)
    k = np.zeros(T)
    udecay = np.zeros(T)
    kclpu = np.zeros(T)
    pclpu = np.zeros(T)
    prev_d, prev_dre, prev_k, prev_u = d_ini, dre_ini, k_ini, u_ini
    prev_dpeak = min(d_ini, dsat[0])
    for t in range(T):
        u = int(u_seq[t])
        if u:
            d[t] = 0.0
            dpeak[t] = 0.0
            r = max(prev_dre + prev_dpeak - dt * prev_u, 0.0)
            # the decay-forcing constraint lifts any positive remainder to at
            # least the small constant
            dre[t] = 0.0 if r <= 0.0 else max(r, ms)
            udecay[t] = 1.0 if dre[t] == 0.0 else 0.0
            k[t] = max(ksteady[t], prev_k + (u - prev_u) - gamma[t] * udecay[t])
        else:
            d[t] = prev_d + tau[t] * dt
            dpeak[t] = min(d[t], dsat[t])
            dre[t] = 0.0
            udecay[t] = 0.0
            k[t] = 0.0
        kclpu[t] = k[t] - ksteady[t] * u
        pclpu[t] = kclpu[t] * p_max
        prev_d, prev_dre, prev_k, prev_u, prev_dpeak = \
            d[t], dre[t], k[t], u, dpeak[t]
    return {"d": d, "dpeak": dpeak, "dre": dre, "k": k,
            "udecay": udecay, "kclpu": kclpu, "pclpu": pclpu}


def unbalance_factor(pcc):
    """Eq.-style recomputation: max per-phase deviation over the average.
    ``pcc``: (3,) or (3, T). Zero where the average is ~zero."""
    pcc = np.asarray(pcc, dtype=float)
    single = pcc.ndim == 1
    if single:
        pcc = pcc[:, None]
    avg = pcc.mean(axis=0)
    dev = np.abs(pcc - avg[None, :]).max(axis=0)
    out = np.zeros_like(avg)
    nz = np.abs(avg) > 1e-9
    out[nz] = dev[nz] / avg[nz]
    return float(out[0]) if single else out
