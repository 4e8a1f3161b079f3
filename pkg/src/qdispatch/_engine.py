"""Jitted inner loops for the discrete-time simulators.

Everything random is pre-drawn outside and passed in as arrays indexed by
slot, so runs are deterministic for a fixed (seed, stream-id) assignment and
the coupled twin systems share coins by construction. The routing solve here
mirrors routing.optimal_routing; equivalence is enforced by tests.
"""
from __future__ import annotations

import numpy as np
from numba import njit

# policy codes for the coupled kernel
GENIE = 0
EPS_KLNT = 1
EPS_KT = 2
UCB = 3
TS = 4
UNIFORM = 5
FIXED = 6
PINNED = 7

# policy codes for the single-system kernel
STATIC = 0
JSQ = 1
JFSQ = 2

# observation codes
OBS_FULL = 0
OBS_OWN = 1
OBS_DELAYED = 2

RATE_LO = 1e-9
RATE_HI = 1.0 - 1e-9
ZERO_TOL = 1e-12

QUEUE_CAP = 1 << 13


@njit(cache=True)
def routing_into(lam, rates, order, p_out):
    """Closed-form routing for clamped rate vector; returns False when the
    rates cannot stabilize lam and the caller must fall back to uniform."""
    K = rates.shape[0]
    total = 0.0
    for i in range(K):
        total += rates[i]
    if total <= lam:
        return False
    for i in range(K):
        order[i] = i
    # stable insertion sort, decreasing rate, ties keep lower index first
    for i in range(1, K):
        j = i
        while j > 0 and rates[order[j - 1]] < rates[order[j]]:
            tmp = order[j - 1]
            order[j - 1] = order[j]
            order[j] = tmp
            j -= 1
    m = K
    while m > 0:
        mu_sum = 0.0
        s_sum = 0.0
        for k in range(m):
            mm = rates[order[k]]
            mu_sum += mm
            s_sum += np.sqrt(mm * (1.0 - mm))
        if mu_sum <= lam:
            m -= 1
            continue
        excess = mu_sum / lam - 1.0
        ok = True
        for k in range(m):
            i = order[k]
            mm = rates[i]
            pi = mm / lam - (np.sqrt(mm * (1.0 - mm)) / s_sum) * excess
            p_out[i] = pi
            if pi <= ZERO_TOL:
                ok = False
        for k in range(m, K):
            p_out[order[k]] = 0.0
        if ok:
            return True
        m -= 1
    return False


@njit(cache=True)
def _gamma_mt(a, normals, uniforms, cursor):
    """Marsaglia-Tsang gamma sampler for shape a >= 1 consuming pre-drawn
    (normal, uniform) pairs; returns (-1 value, -1 cursor) when exhausted."""
    d = a - 1.0 / 3.0
    c = 1.0 / np.sqrt(9.0 * d)
    n = normals.shape[0]
    cur = cursor
    while True:
        if cur >= n:
            return -1.0, -1
        x = normals[cur]
        u = uniforms[cur]
        cur += 1
        v = 1.0 + c * x
        if v <= 0.0:
            continue
        v = v * v * v
        if np.log(u) < 0.5 * x * x + d - d * v + d * np.log(v):
            return d * v, cur


@njit(cache=True)
def coupled_kernel(
    lam,
    mu,
    p_star,
    policy,
    explore_first,
    pinned_p,
    uniform_until_sampled,
    arr,        # (T,) uint8 shared arrival coins
    svc,        # (T, K) uint8 shared offered-service coins
    eps_u,      # (T,) exploration coins
    unif_u,     # (T,) learner uniform-destination draws
    cpl_u,      # (T, 2) coupling draws
    ts_normals,
    ts_uniforms,
    checkpoints,  # (C,) int64 sorted slots
    record_totals,
):
    T = arr.shape[0]
    K = mu.shape[0]
    C = checkpoints.shape[0]

    qL = np.zeros(K, dtype=np.int64)
    qG = np.zeros(K, dtype=np.int64)
    headL = np.full(K, -1, dtype=np.int64)
    busyL = np.zeros(K, dtype=np.int64)
    est_n = np.zeros(K, dtype=np.int64)
    est_tot = np.zeros(K, dtype=np.int64)

    p_hat = np.empty(K, dtype=np.float64)
    rates = np.empty(K, dtype=np.float64)
    order = np.empty(K, dtype=np.int64)
    for i in range(K):
        p_hat[i] = p_star[i]
    p_valid = policy == GENIE
    est_dirty = True
    ts_cursor = 0

    regret = 0
    regret_cp = np.zeros(C, dtype=np.int64)
    busy_cp = np.zeros((C, K), dtype=np.int64)
    mismatch = np.zeros(K, dtype=np.int64)
    exploit_h1 = np.zeros(K, dtype=np.int64)
    exploit_h2 = np.zeros(K, dtype=np.int64)
    explore_slots = 0
    exploit_slots = 0
    fallback = 0
    jobs = 0
    cum_arr_L = 0
    cum_dep_L = 0
    cum_dep_G = 0
    totals = np.zeros((T if record_totals else 0, 2), dtype=np.int64)
    overflow = 0
    half = T // 2
    cp_ptr = 0

    for t in range(1, T + 1):
        arrived = arr[t - 1] == 1
        destL = -1
        destG = -1
        if arrived:
            # exploit distribution for this slot
            if policy == GENIE:
                pass  # p_hat stays p_star
            elif policy == PINNED:
                for i in range(K):
                    p_hat[i] = pinned_p[i]
                p_valid = True
            elif policy == UNIFORM:
                for i in range(K):
                    p_hat[i] = 1.0 / K
                p_valid = True
            elif policy == TS:
                feas = True
                for i in range(K):
                    if est_n[i] == 0:
                        a = 1.0
                        b = 1.0
                    else:
                        mh = est_n[i] / est_tot[i]
                        a = mh * est_n[i] + 1.0
                        b = (1.0 - mh) * est_n[i] + 1.0
                    g1, ts_cursor = _gamma_mt(a, ts_normals, ts_uniforms, ts_cursor)
                    if ts_cursor < 0:
                        overflow = 1
                        break
                    g2, ts_cursor = _gamma_mt(b, ts_normals, ts_uniforms, ts_cursor)
                    if ts_cursor < 0:
                        overflow = 1
                        break
                    rr = g1 / (g1 + g2)
                    if rr < RATE_LO:
                        rr = RATE_LO
                    elif rr > RATE_HI:
                        rr = RATE_HI
                    rates[i] = rr
                if overflow == 1:
                    break
                p_valid = routing_into(lam, rates, order, p_hat)
                if not p_valid:
                    feas = False
                if not feas:
                    fallback += 1
                    for i in range(K):
                        p_hat[i] = 1.0 / K
                    p_valid = True
            else:
                # estimator-driven distributions change only on departures
                if est_dirty or not p_valid:
                    for i in range(K):
                        mh = est_n[i] / est_tot[i] if est_n[i] > 0 else 1.0
                        if policy == UCB:
                            nn = est_n[i] if est_n[i] > 0 else 1
                            mh = mh + 1.0 / np.sqrt(nn)
                        if mh < RATE_LO:
                            mh = RATE_LO
                        elif mh > RATE_HI:
                            mh = RATE_HI
                        rates[i] = mh
                    p_valid = routing_into(lam, rates, order, p_hat)
                    if not p_valid:
                        fallback += 1
                        for i in range(K):
                            p_hat[i] = 1.0 / K
                        p_valid = True
                    est_dirty = False

            # learner explore decision
            explore = False
            if uniform_until_sampled and policy != GENIE and policy != PINNED:
                for i in range(K):
                    if est_n[i] == 0:
                        explore = True
                        break
            if not explore:
                if policy == EPS_KLNT:
                    eps = 1.0 if t == 1 else min(1.0, K * np.log(t) / t)
                    explore = eps_u[t - 1] < eps
                elif policy == EPS_KT:
                    explore = eps_u[t - 1] < min(1.0, K / t)
                elif policy == FIXED:
                    explore = jobs < explore_first

            # maximal-coupling draw (sigma, sigma_star)
            m = 0.0
            for i in range(K):
                m += min(p_hat[i], p_star[i])
            u0 = cpl_u[t - 1, 0]
            if u0 < m or 1.0 - m < 1e-12:
                # common branch: index from the (unnormalized) min vector
                acc = 0.0
                sigma = K - 1
                for i in range(K):
                    acc += min(p_hat[i], p_star[i])
                    if u0 < acc:
                        sigma = i
                        break
                sigma_star = sigma
            else:
                target = u0 - m
                acc = 0.0
                sigma = K - 1
                for i in range(K):
                    acc += p_hat[i] - min(p_hat[i], p_star[i])
                    if target < acc:
                        sigma = i
                        break
                target2 = cpl_u[t - 1, 1] * (1.0 - m)
                acc = 0.0
                sigma_star = K - 1
                for i in range(K):
                    acc += p_star[i] - min(p_hat[i], p_star[i])
                    if target2 < acc:
                        sigma_star = i
                        break

            destG = sigma_star
            if explore:
                destL = int(unif_u[t - 1] * K)
                if destL >= K:
                    destL = K - 1
                explore_slots += 1
            else:
                destL = sigma
                exploit_slots += 1
                if t > half:
                    exploit_h2[destL] += 1
                else:
                    exploit_h1[destL] += 1
                if sigma_star != destL:
                    mismatch[destL] += 1
            jobs += 1
            cum_arr_L += 1

        # shared-coin queue step for both systems
        for i in range(K):
            s = svc[t - 1, i]
            backlog = qL[i] + (1 if destL == i else 0)
            if backlog > 0:
                if headL[i] < 0:
                    headL[i] = t
                if s == 1:
                    qL[i] = backlog - 1
                    est_n[i] += 1
                    est_tot[i] += t - headL[i] + 1
                    est_dirty = True
                    cum_dep_L += 1
                    headL[i] = t + 1 if qL[i] > 0 else -1
                else:
                    qL[i] = backlog
            backlog = qG[i] + (1 if destG == i else 0)
            if backlog > 0:
                if s == 1:
                    qG[i] = backlog - 1
                    cum_dep_G += 1
                else:
                    qG[i] = backlog
            if qL[i] == 0:
                busyL[i] = 0
            else:
                busyL[i] += 1

        sL = 0
        sG = 0
        for i in range(K):
            sL += qL[i]
            sG += qG[i]
        regret += sL - sG
        if record_totals:
            totals[t - 1, 0] = sL
            totals[t - 1, 1] = sG
        while cp_ptr < C and checkpoints[cp_ptr] == t:
            regret_cp[cp_ptr] = regret
            for i in range(K):
                busy_cp[cp_ptr, i] = busyL[i]
            cp_ptr += 1

    return (
        regret_cp,
        busy_cp,
        mismatch,
        exploit_h1,
        exploit_h2,
        explore_slots,
        exploit_slots,
        fallback,
        qL,
        qG,
        cum_arr_L,
        cum_dep_L,
        cum_dep_G,
        totals,
        overflow,
    )


@njit(cache=True)
def single_kernel(
    lam,
    mu,
    p_static,     # dispatch distribution for STATIC policies
    policy,
    obs,
    refresh_prob,
    arr,          # (T,) uint8 dispatcher arrival coins
    svc,          # (T, K) uint8 offered-service coins
    ext,          # (T, K) uint8 external arrival coins (may be all zero)
    unif_u,       # (T,) dispatch / tie-break draws
    refresh_u,    # (T,) delayed-observation refresh coins
):
    T = arr.shape[0]
    K = mu.shape[0]

    q = np.zeros(K, dtype=np.int64)
    own_count = np.zeros(K, dtype=np.int64)
    snapshot = np.zeros(K, dtype=np.int64)

    buf_arr = np.zeros((K, QUEUE_CAP), dtype=np.int64)
    buf_own = np.zeros((K, QUEUE_CAP), dtype=np.uint8)
    buf_head = np.zeros(K, dtype=np.int64)
    buf_size = np.zeros(K, dtype=np.int64)

    qtot_sum = 0
    busy_slots = np.zeros(K, dtype=np.int64)
    sojourn_sum = 0
    sojourn_n = 0
    dispatched = 0
    cum_arr = 0
    cum_dep = 0
    overflow = 0

    for t in range(1, T + 1):
        if obs == OBS_DELAYED and refresh_u[t - 1] < refresh_prob:
            for i in range(K):
                snapshot[i] = q[i]

        dest = -1
        if arr[t - 1] == 1:
            if policy == STATIC:
                u = unif_u[t - 1]
                acc = 0.0
                dest = K - 1
                for i in range(K):
                    acc += p_static[i]
                    if u < acc:
                        dest = i
                        break
            else:
                best = np.int64(1) << 60
                nmin = 0
                for i in range(K):
                    if obs == OBS_OWN:
                        qi = own_count[i]
                    elif obs == OBS_DELAYED:
                        qi = snapshot[i]
                    else:
                        qi = q[i]
                    if qi < best:
                        best = qi
                        nmin = 1
                    elif qi == best:
                        nmin += 1
                if nmin == 1 or policy == JFSQ:
                    dest = -1
                    best_mu = -1.0
                    for i in range(K):
                        if obs == OBS_OWN:
                            qi = own_count[i]
                        elif obs == OBS_DELAYED:
                            qi = snapshot[i]
                        else:
                            qi = q[i]
                        if qi == best and mu[i] > best_mu:
                            best_mu = mu[i]
                            dest = i
                else:
                    # JSQ random tie-break
                    pick = int(unif_u[t - 1] * nmin)
                    if pick >= nmin:
                        pick = nmin - 1
                    seen = 0
                    dest = K - 1
                    for i in range(K):
                        if obs == OBS_OWN:
                            qi = own_count[i]
                        elif obs == OBS_DELAYED:
                            qi = snapshot[i]
                        else:
                            qi = q[i]
                        if qi == best:
                            if seen == pick:
                                dest = i
                                break
                            seen += 1
            dispatched += 1
            own_count[dest] += 1

        # arrivals join queues: dispatcher job plus external traffic
        for i in range(K):
            n_arr = (1 if dest == i else 0) + (1 if ext[t - 1, i] == 1 else 0)
            for k in range(n_arr):
                if buf_size[i] >= QUEUE_CAP:
                    overflow = 1
                else:
                    pos = (buf_head[i] + buf_size[i]) % QUEUE_CAP
                    # dispatcher job is pushed first when both arrive
                    is_own = 1 if (dest == i and k == 0) else 0
                    buf_arr[i, pos] = t
                    buf_own[i, pos] = is_own
                    buf_size[i] += 1
            q[i] += n_arr
            cum_arr += n_arr
            if q[i] > 0:
                busy_slots[i] += 1
                if svc[t - 1, i] == 1:
                    pos = buf_head[i]
                    if buf_own[i, pos] == 1:
                        sojourn_sum += t - buf_arr[i, pos] + 1
                        sojourn_n += 1
                        own_count[i] -= 1
                    buf_head[i] = (pos + 1) % QUEUE_CAP
                    buf_size[i] -= 1
                    q[i] -= 1
                    cum_dep += 1
        if overflow == 1:
            break

        for i in range(K):
            qtot_sum += q[i]

    return (
        qtot_sum,
        busy_slots,
        sojourn_sum,
        sojourn_n,
        dispatched,
        q,
        cum_arr,
        cum_dep,
        overflow,
    )
