"""Shared fixtures: hand-built canonical problems used as independent oracles."""

import numpy as np
import pytest

from cando.canonical import QuadraticCanonicalProblem, QuadraticVStar


def snl_canonical_by_hand(truth, anchors, h_edges, e_edges, distances=None):
    """Build the canonical form of a sensor-localization instance from scratch.

    ``truth`` is (N, dim), ``anchors`` (Na, dim); edges are index pairs.
    Distances default to the exact ones implied by ``truth``.  Anchor-offset
    constants are folded into the conjugate offset q, so Xi equals the
    weighted sum of squared-distance residual terms exactly.

    Kept deliberately independent of cando.snl so it can serve as an oracle
    for the production assembly code.
    """
    truth = np.asarray(truth, dtype=float)
    anchors = np.asarray(anchors, dtype=float)
    n_sensors, dim = truth.shape
    n = n_sensors * dim
    m = len(h_edges) + len(e_edges)
    C = np.zeros((m, n, n))
    b = np.zeros((m, n))
    q = np.zeros(m)
    if distances is None:
        dh = [np.linalg.norm(truth[i] - truth[j]) for i, j in h_edges]
        de = [np.linalg.norm(truth[i] - anchors[k]) for i, k in e_edges]
    else:
        dh, de = distances
    for t, (i, j) in enumerate(h_edges):
        si, sj = slice(i * dim, (i + 1) * dim), slice(j * dim, (j + 1) * dim)
        C[t, si, si] += 2.0 * np.eye(dim)
        C[t, sj, sj] += 2.0 * np.eye(dim)
        C[t, si, sj] -= 2.0 * np.eye(dim)
        C[t, sj, si] -= 2.0 * np.eye(dim)
        q[t] = dh[t] ** 2
    for t, (i, k) in enumerate(e_edges):
        row = len(h_edges) + t
        si = slice(i * dim, (i + 1) * dim)
        C[row, si, si] += 2.0 * np.eye(dim)
        b[row, si] = 2.0 * anchors[k]
        q[row] = de[t] ** 2 - anchors[k] @ anchors[k]
    vstar = QuadraticVStar(q=q)
    return QuadraticCanonicalProblem(
        n=n, m=m, A=np.zeros((n, n)), c=np.zeros(n), C=C, b=b,
        vstar=vstar, v_of_xi=vstar.conjugate_value)


@pytest.fixture
def one_sensor_anchor_origin():
    """n=1, one anchor at 0, measured distance 0.5: Xi = s x^2 - s^2/2 - s/4."""
    return snl_canonical_by_hand([[0.3]], [[0.0]], [], [(0, 0)],
                                 distances=([], [0.5]))


@pytest.fixture
def two_anchor_line():
    """1D sensor at 0.3 between anchors 0 and 1 with exact distances."""
    return snl_canonical_by_hand([[0.3]], [[0.0], [1.0]], [], [(0, 0), (0, 1)])
