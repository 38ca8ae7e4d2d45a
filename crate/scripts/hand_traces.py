"""Reference traces for the optimizer tests, computed at 50 significant digits.

Run: python3 scripts/hand_traces.py
The printed values are pasted into crates/core/tests/acceptance.rs.
"""

from mpmath import mp, mpf, sqrt

mp.dps = 50


def adam(grads, alpha, g1, g2, delta, l2=mpf(0), mu=mpf(0)):
    m = s = mpf(0)
    out = []
    for t, g in enumerate(grads, start=1):
        m = g1 * m + (1 - g1) * (g + l2 * mu)
        s = g2 * s + (1 - g2) * g * g
        mh = m / (1 - g1**t)
        sh = s / (1 - g2**t)
        mu = mu - alpha * mh / (sqrt(sh) + delta)
        out.append((mu, m, s))
    return out


def von_momentum(grads, h, s, mu, beta, gamma, lam_tilde):
    mu_prev = mu
    out = []
    for g in grads:
        s_new = (1 - beta) * s + beta * h
        denom = s_new + lam_tilde
        mu_new = mu - beta * (g + lam_tilde * mu) / denom + gamma * (s + lam_tilde) / denom * (mu - mu_prev)
        mu_prev, mu, s = mu, mu_new, s_new
        out.append((mu, s))
    return out


def show(name, rows):
    print(name)
    for row in rows:
        print("    [" + ", ".join(mp.nstr(v, 25) for v in row) + "],")


a = mpf("0.1")
show("adam g = 1, -1, 2", adam([mpf(1), mpf(-1), mpf(2)], a, mpf("0.9"), mpf("0.999"), mpf("1e-8")))

# Vadam with a gradient that does not depend on the sample: lambda = 1, N = 10.
lt = mpf(1) / 10
show("vadam g = 1", adam([mpf(1)] * 3, a, mpf("0.9"), mpf("0.999"), lt, l2=lt))

show(
    "von momentum",
    von_momentum([mpf("1.5"), mpf("-0.5")], mpf(2), mpf(1), mpf("0.3"), mpf("0.1"), mpf("0.9"), mpf("0.5")),
)
