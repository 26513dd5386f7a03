"""Independent reference computations used by the unit and acceptance tests.

Everything here is written from the formulas directly, per datum and in
plain loops (mpmath where precision matters), without touching the library's
vectorized code paths.
"""

import math

import mpmath
import numpy as np

mpmath.mp.dps = 50


def brute_log_weights(family, dataset, beta, online=()):
    """log of prior * prod_t theta(s'|s,a) pi_beta(a|s; q_theta) * prod_online theta(s'|s,a)."""
    out = []
    for k, (mdp, plan) in enumerate(zip(family.members, family.plans)):
        w = mpmath.mpf(family.prior[k])
        for t in range(len(dataset.actions)):
            s, a, s2 = int(dataset.states[t]), int(dataset.actions[t]), int(dataset.states[t + 1])
            w *= mpmath.mpf(mdp.transitions[s, a, s2])
            num = mpmath.exp(mpmath.mpf(beta) * mpmath.mpf(plan.qvalues[s, a]))
            den = mpmath.fsum(mpmath.exp(mpmath.mpf(beta) * mpmath.mpf(x)) for x in plan.qvalues[s])
            w *= num / den
        for s, a, s2 in online:
            w *= mpmath.mpf(mdp.transitions[int(s), int(a), int(s2)])
        out.append(mpmath.log(w) if w > 0 else -mpmath.inf)
    return out


def bound_reference(eps, S, A, T, lengths_fn, vbar):
    """Regret bound recomputed in mpmath from its definition.

    ``K_T`` is the number of episodes whose start time ``t_k`` is below T.
    """
    t, k, starts = 0, 0, []
    while t < T:
        k += 1
        starts.append(k)
        t += lengths_fn(k)
    K = len(starts)
    max_len = max(lengths_fn(j) for j in starts)
    eps, S, A, T, vbar = (mpmath.mpf(x) for x in (eps, S, A, T, vbar))
    SA = S * A
    r1 = eps * K
    r2 = mpmath.sqrt(eps * S**2 * A * T * mpmath.log(2 * SA * K * T) * (1 + mpmath.log(T / SA + 1)))
    r3 = min(eps * T, SA * max_len * mpmath.log(T / SA + 1, 2))
    total = 3 * vbar + 2 * vbar * (r1 + r2 + r3)
    return K, max_len, r1, r2, r3, total


def map_loss(q, beta, data, num_offline, rtilde, sigma, lambda2, prior_precision):
    """MAP objective: quadratic TD loss with the true max, imitation NLL, ridge prior, lambda2 * beta."""
    value = 0.0
    for k, (s, a, s2, r) in enumerate(data):
        e = r + max(q[s2]) - q[s][a] - rtilde[k]
        value += e * e / (2 * sigma**2)
    for k in range(num_offline):
        s, a = data[k][0], data[k][1]
        logits = [beta * x for x in q[s]]
        m = max(logits)
        value -= logits[a] - (m + math.log(sum(math.exp(x - m) for x in logits)))
    S, A = len(q), len(q[0])
    for s in range(S):
        for a in range(A):
            value += 0.5 * prior_precision * q[s][a] ** 2
    return value + lambda2 * beta


def kl_imitation(q, beta, states, actions, num_states, num_actions):
    """sum_s Nbar(s) KL(pi_hat(s) || pi_beta(s; q)) over visited states."""
    counts = np.zeros((num_states, num_actions))
    for s, a in zip(states, actions):
        counts[s, a] += 1
    total = 0.0
    for s in range(num_states):
        n = counts[s].sum()
        if n == 0:
            continue
        logits = beta * np.asarray(q[s], dtype=float)
        log_pi = logits - (logits.max() + math.log(np.exp(logits - logits.max()).sum()))
        for a in range(num_actions):
            p_hat = counts[s, a] / n
            if p_hat > 0:
                total += n * p_hat * (math.log(p_hat) - log_pi[a])
    return total


def running_mean_rtilde(rewards):
    """r~_0 = r_0 and r~_{k+1} = mean(r_0..r_k)."""
    out = [rewards[0]]
    for k in range(len(rewards)):
        out.append(sum(rewards[: k + 1]) / (k + 1))
    return out
