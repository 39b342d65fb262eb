"""Brute-force reference implementations used only by the tests."""

from __future__ import annotations

import itertools
import math

import numpy as np


def cyclic_tuple_sum(u, weights):
    """sum over y_1..y_k of u(y1,y2)...u(yk,y1) prod w_j(y_j), term by term."""
    n, k = u.shape[0], len(weights)
    total = 0.0
    for ys in itertools.product(range(n), repeat=k):
        term = 1.0
        for j in range(k):
            term *= u[ys[j], ys[(j + 1) % k]] * weights[j][ys[j]]
        total += term
    return total


def bridge_tuple_sum(u, x, y, weights):
    """sum over cyclic shifts pi and tuples of u(x,y1)...u(yk,y) prod w_pi(j)(y_j)."""
    n, k = u.shape[0], len(weights)
    total = 0.0
    for i in range(k):
        order = [weights[(j + i) % k] for j in range(k)]
        for ys in itertools.product(range(n), repeat=k):
            path = (x,) + ys + (y,)
            term = 1.0
            for a, b in zip(path, path[1:]):
                term *= u[a, b]
            for j in range(k):
                term *= order[j][ys[j]]
            total += term
    return total


def full_permutation_phi(u, weights):
    """sum over all k! orderings divided by k (the size of each rotation class)."""
    k = len(weights)
    return sum(cyclic_tuple_sum(u, [weights[p] for p in perm]) for perm in itertools.permutations(range(k))) / k


def double_insertion_brute(u, weights, nu):
    """mu(L^2 M): insert nu twice in every slot pair, summing the cyclic products."""
    k = len(weights)
    total = 0.0
    for i in range(k):
        once = weights[: i + 1] + [nu] + weights[i + 1 :]
        for i2 in range(k + 1):
            twice = once[: i2 + 1] + [nu] + once[i2 + 1 :]
            total += cyclic_tuple_sum(u, twice)
    return total
