"""Numba kernels for the single-chain Monte Carlo updates.

All kernels operate on a flat ``int8`` spin array, a neighbour table with
``-1`` for missing neighbours and a per-site field array (the lattice field
plus, under plus boundary conditions, ``beta`` times the number of clamped
outside neighbours).  Randomness comes from a ``numpy.random.Generator``
passed in by the caller, so a fixed seed gives bit-identical chains.
"""

import math

import numba
import numpy as np


@numba.njit(cache=True, nogil=True)
def metropolis_sweep(spins, nbr, beta, hsite, rng):
    n_acc = 0
    for x in range(spins.size):
        s = spins[x]
        acc = 0
        for k in range(nbr.shape[1]):
            y = nbr[x, k]
            if y >= 0:
                acc += spins[y]
        dE = 2.0 * s * (beta * acc + hsite[x])
        if dE <= 0.0 or rng.random() < math.exp(-dE):
            spins[x] = -s
            n_acc += 1
    return n_acc


@numba.njit(cache=True, nogil=True)
def heat_bath_sweep(spins, nbr, beta, hsite, rng):
    n_up = 0
    for x in range(spins.size):
        acc = 0
        for k in range(nbr.shape[1]):
            y = nbr[x, k]
            if y >= 0:
                acc += spins[y]
        p_up = 1.0 / (1.0 + math.exp(-2.0 * (beta * acc + hsite[x])))
        if rng.random() < p_up:
            spins[x] = 1
            n_up += 1
        else:
            spins[x] = -1
    return n_up


@numba.njit(cache=True, nogil=True)
def wolff_ghost_step(spins, nbr, p_add, hsite, rng, stack, members, mark):
    """Grow one cluster from a random seed and flip it unless it binds the ghost.

    Each cluster spin aligned with the (non-negative) field links to the
    ghost spin with probability ``1 - exp(-2 h_x)``.  The cluster is flipped
    iff no ghost link forms, i.e. with probability ``exp(-2 sum_C h_x)`` for
    a plus cluster and 1 for a minus cluster.  That event is drawn as one
    exponential variate compared with the accumulated ghost load, so growth
    can stop as soon as the ghost is reached.

    Returns the cluster size, negated when the cluster was not flipped.
    """
    n = spins.size
    seed = int(rng.random() * n)
    if seed >= n:
        seed = n - 1
    s = spins[seed]
    aligned = s > 0
    budget = -math.log(1.0 - rng.random()) if aligned else 0.0
    load = 0.0

    mark[seed] = True
    members[0] = seed
    size = 1
    stack[0] = seed
    top = 1
    bound = False
    if aligned:
        load += 2.0 * hsite[seed]
        bound = load > budget
    while top > 0 and not bound:
        top -= 1
        x = stack[top]
        for k in range(nbr.shape[1]):
            y = nbr[x, k]
            if y < 0 or mark[y] or spins[y] != s:
                continue
            if rng.random() < p_add:
                mark[y] = True
                members[size] = y
                size += 1
                stack[top] = y
                top += 1
                if aligned:
                    load += 2.0 * hsite[y]
                    if load > budget:
                        bound = True
                        break

    for i in range(size):
        y = members[i]
        mark[y] = False
        if not bound:
            spins[y] = -s
    return -size if bound else size


@numba.njit(cache=True, nogil=True)
def axis_correlator(spins2d, max_sep, out):
    """Accumulate sum_x s_x s_{x + r e_mu} for r <= max_sep, both axes, periodic."""
    n0, n1 = spins2d.shape
    for i in range(n0):
        for j in range(n1):
            s = spins2d[i, j]
            for r in range(max_sep + 1):
                out[0, r] += s * spins2d[(i + r) % n0, j]
                out[1, r] += s * spins2d[i, (j + r) % n1]
