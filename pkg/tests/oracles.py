"""Independent reference computations used by the tests.

Nothing here imports the package's enumeration or transfer-matrix code;
neighbours and energies are built from coordinates directly.
"""

import itertools
import math

import numpy as np


def torus_bonds(extents):
    """(x, x + e_mu) bonds on a torus; extent 2 gives a double bond, extent 1 none."""
    sites = list(itertools.product(*[range(n) for n in extents]))
    index = {c: i for i, c in enumerate(sites)}
    out = []
    for c in sites:
        for mu, n in enumerate(extents):
            if n == 1:
                continue
            d = list(c)
            d[mu] = (d[mu] + 1) % n
            out.append((index[c], index[tuple(d)]))
    return out, sites


def free_bonds(extents):
    sites = list(itertools.product(*[range(n) for n in extents]))
    index = {c: i for i, c in enumerate(sites)}
    out = []
    for c in sites:
        for mu, n in enumerate(extents):
            if c[mu] + 1 < n:
                d = list(c)
                d[mu] += 1
                out.append((index[c], index[tuple(d)]))
    return out, sites


def brute_force(beta, h, extents, bc="periodic"):
    """Moments by looping over every configuration.

    ``bc="plus"`` adds ``beta`` times the number of missing neighbours to the
    field of each boundary site.
    """
    if bc == "periodic":
        bnds, sites = torus_bonds(extents)
    else:
        bnds, sites = free_bonds(extents)
    n = len(sites)
    field = np.full(n, float(h))
    if bc == "plus":
        deg = np.zeros(n)
        for i, j in bnds:
            deg[i] += 1
            deg[j] += 1
        field += beta * (2 * len(extents) - deg)
    z = 0.0
    one = np.zeros(n)
    two = np.zeros((n, n))
    logs = []
    confs = []
    for s in itertools.product((1, -1), repeat=n):
        s = np.array(s, dtype=float)
        e = beta * sum(s[i] * s[j] for i, j in bnds) + field @ s
        logs.append(e)
        confs.append(s)
    logs = np.array(logs)
    top = logs.max()
    w = np.exp(logs - top)
    z = w.sum()
    confs = np.array(confs)
    p = w / z
    one = confs.T @ p
    two = (confs * p[:, None]).T @ confs
    return one, two, float(top + math.log(z))


def chain_partition(beta, h, n):
    """Periodic 1D chain: Z = l+^n + l-^n."""
    c, s = math.cosh(h), math.sinh(h)
    root = math.sqrt(math.exp(2 * beta) * s * s + math.exp(-2 * beta))
    lp = math.exp(beta) * c + root
    lm = math.exp(beta) * c - root
    return lp ** n + lm ** n


def chain_zero_field_corr(beta, n, r):
    """<s_0 s_r> on a periodic zero-field chain of n sites."""
    t = math.tanh(beta)
    return (t ** r + t ** (n - r)) / (1 + t ** n)
