"""Sensor network localization: instances, generation, assemblies, I/O.

An instance holds sensor/anchor geometry and measured distances for the
non-convex least squares problem

    P(x) = 0.5 sum_h (||x_i - x_j||^2 - h_ij^2)^2
         + 0.5 sum_e (||x_i - a_k||^2 - e_ik^2)^2.

The dual vector sigma is indexed sensor-sensor edges first (lexicographic
(i, j)), then sensor-anchor edges (lexicographic (i, k)); every consumer of
instance data relies on that order.
"""

from __future__ import annotations

import csv
import itertools
import json
from dataclasses import dataclass, replace
from functools import cached_property
from pathlib import Path

import numpy as np
import scipy.sparse as sp
from scipy.spatial import cKDTree

from .canonical import FusedAssembly, QuadraticCanonicalProblem, QuadraticVStar
from .numerics import SparseMatrix

__all__ = [
    "FORMAT_VERSION",
    "GeneratorConfig",
    "SnlInstance",
    "SnlKernel",
    "generate_instance",
    "apply_noise",
    "snl_primal",
    "assemble_g",
    "assemble_f",
    "cross_hessian",
    "vstar_value_grad",
    "rmsd",
    "to_canonical",
    "to_canonical_fused",
    "save_instance",
    "load_instance",
    "export_positions_csv",
]

FORMAT_VERSION = "snl-1"

# to_canonical materializes m dense n-by-n matrices; refuse beyond this.
_DENSE_CANONICAL_LIMIT = 64


@dataclass(frozen=True)
class GeneratorConfig:
    """Random-instance recipe: uniform sensors in the unit box, corner anchors."""

    n_sensors: int
    dim: int = 2
    radio_range: float = 0.5
    seed: int = 0
    noise_factor: float = 0.0
    max_degree: int | None = None

    def __post_init__(self):
        if self.dim not in (2, 3):
            raise ValueError("generator dim must be 2 or 3")
        if self.n_sensors < 1:
            raise ValueError("need at least one sensor")
        if self.radio_range <= 0:
            raise ValueError("radio range must be positive")
        if self.noise_factor < 0:
            raise ValueError("noise factor must be nonnegative")
        if self.max_degree is not None and self.max_degree < 1:
            raise ValueError("max_degree must be positive when given")


@dataclass(frozen=True, eq=False)
class SnlInstance:
    """Immutable SNL problem data.

    ``h_pairs``/``h_dist`` are the sensor-sensor edges (i < j, lexicographic),
    ``e_pairs``/``e_dist`` the sensor-anchor edges ((i, k), lexicographic).
    ``truth`` is the (N, dim) array of real positions when known.
    """

    dim: int
    n_sensors: int
    anchors: np.ndarray
    h_pairs: np.ndarray
    h_dist: np.ndarray
    e_pairs: np.ndarray
    e_dist: np.ndarray
    truth: np.ndarray | None = None
    generator: GeneratorConfig | None = None

    def __post_init__(self):
        if self.dim not in (1, 2, 3):
            raise ValueError("dim must be 1, 2 or 3")
        if self.n_sensors < 1:
            raise ValueError("need at least one sensor")
        if self.anchors.ndim != 2 or self.anchors.shape[1] != self.dim:
            raise ValueError("anchors must be (num_anchors, dim)")
        for pairs, dist, name in ((self.h_pairs, self.h_dist, "h"),
                                  (self.e_pairs, self.e_dist, "e")):
            if pairs.shape != (dist.size, 2):
                raise ValueError(f"edges_{name}: pair/distance length mismatch")
            if dist.size and dist.min() <= 0:
                raise ValueError(f"edges_{name}: distances must be positive")
        if self.h_pairs.size:
            i, j = self.h_pairs[:, 0], self.h_pairs[:, 1]
            if (i < 0).any() or (j >= self.n_sensors).any() or (i >= j).any():
                raise ValueError("edges_h: need 0 <= i < j < N")
            keys = i * self.n_sensors + j
            if np.unique(keys).size != keys.size:
                raise ValueError("edges_h: duplicate edge")
        if self.e_pairs.size:
            i, k = self.e_pairs[:, 0], self.e_pairs[:, 1]
            if (i < 0).any() or (i >= self.n_sensors).any() or (k < 0).any() \
                    or (k >= len(self.anchors)).any():
                raise ValueError("edges_e: index out of range")
            keys = i * len(self.anchors) + k
            if np.unique(keys).size != keys.size:
                raise ValueError("edges_e: duplicate edge")
        if self.truth is not None and self.truth.shape != (self.n_sensors, self.dim):
            raise ValueError("truth must be (N, dim)")

    def __eq__(self, other):
        if not isinstance(other, SnlInstance):
            return NotImplemented
        same_truth = ((self.truth is None and other.truth is None)
                      or (self.truth is not None and other.truth is not None
                          and np.array_equal(self.truth, other.truth)))
        return (self.dim == other.dim and self.n_sensors == other.n_sensors
                and np.array_equal(self.anchors, other.anchors)
                and np.array_equal(self.h_pairs, other.h_pairs)
                and np.array_equal(self.h_dist, other.h_dist)
                and np.array_equal(self.e_pairs, other.e_pairs)
                and np.array_equal(self.e_dist, other.e_dist)
                and same_truth and self.generator == other.generator)

    @property
    def n(self) -> int:
        return self.n_sensors * self.dim

    @property
    def m(self) -> int:
        return self.h_dist.size + self.e_dist.size

    @property
    def edges_h(self):
        return [(int(i), int(j), float(d))
                for (i, j), d in zip(self.h_pairs, self.h_dist)]

    @property
    def edges_e(self):
        return [(int(i), int(k), float(d))
                for (i, k), d in zip(self.e_pairs, self.e_dist)]

    @cached_property
    def kernel(self) -> "SnlKernel":
        return SnlKernel(self)


class SnlKernel:
    """Precomputed index structure for the fused sparse assemblies.

    Everything the solvers evaluate repeatedly (residual gradients, G, the
    cross second-derivative block) is a gather/scatter over these arrays;
    no per-edge Python loops happen after construction.
    """

    def __init__(self, inst: SnlInstance):
        self.dim = inst.dim
        self.N = inst.n_sensors
        self.n = inst.n
        self.mh = inst.h_dist.size
        self.me = inst.e_dist.size
        self.m = self.mh + self.me
        self.hi = inst.h_pairs[:, 0].astype(np.int64) if self.mh else np.zeros(0, np.int64)
        self.hj = inst.h_pairs[:, 1].astype(np.int64) if self.mh else np.zeros(0, np.int64)
        self.ei = inst.e_pairs[:, 0].astype(np.int64) if self.me else np.zeros(0, np.int64)
        self.ek = inst.e_pairs[:, 1].astype(np.int64) if self.me else np.zeros(0, np.int64)
        self.anchors = np.asarray(inst.anchors, dtype=float)
        self.edge_anchor = self.anchors[self.ek] if self.me else np.zeros((0, self.dim))
        self.d2 = np.concatenate([inst.h_dist ** 2, inst.e_dist ** 2])
        # Conjugate offsets with anchor constants folded in, so the canonical
        # template value matches the plain sum of weighted residual terms.
        anchor_sq = np.einsum("ij,ij->i", self.edge_anchor, self.edge_anchor)
        self.q_folded = self.d2 - np.concatenate([np.zeros(self.mh), anchor_sq])
        self.lambda_shift = np.concatenate([np.zeros(self.mh), anchor_sq])

        dim = self.dim
        coords = np.arange(dim, dtype=np.int64)
        rows_i = (self.hi[:, None] * dim + coords).ravel()
        rows_j = (self.hj[:, None] * dim + coords).ravel()
        rows_e = (self.ei[:, None] * dim + coords).ravel()
        diag = np.arange(self.n, dtype=np.int64)
        self._g_rows = np.concatenate([diag, rows_i, rows_j])
        self._g_cols = np.concatenate([diag, rows_j, rows_i])
        h_cols = np.repeat(np.arange(self.mh, dtype=np.int64), dim)
        e_cols = np.repeat(self.mh + np.arange(self.me, dtype=np.int64), dim)
        self._b_rows = np.concatenate([rows_i, rows_j, rows_e])
        self._b_cols = np.concatenate([h_cols, h_cols, e_cols])

    def split(self, sigma: np.ndarray):
        return sigma[:self.mh], sigma[self.mh:]

    def positions(self, x: np.ndarray) -> np.ndarray:
        return np.asarray(x, dtype=float).reshape(self.N, self.dim)

    def _scatter(self, acc, idx, vals):
        for d in range(self.dim):
            acc[:, d] += np.bincount(idx, weights=vals[:, d], minlength=self.N)

    def lambda_of(self, x: np.ndarray) -> np.ndarray:
        """Squared edge lengths: ||x_i - x_j||^2 then ||x_i - a_k||^2."""
        pos = self.positions(x)
        dh = pos[self.hi] - pos[self.hj]
        de = pos[self.ei] - self.edge_anchor
        return np.concatenate([np.einsum("ij,ij->i", dh, dh),
                               np.einsum("ij,ij->i", de, de)])

    def grad_x_xi(self, x: np.ndarray, sigma: np.ndarray) -> np.ndarray:
        """G(sigma) x - F(sigma), assembled edge-wise without forming G."""
        sh, se = self.split(sigma)
        pos = self.positions(x)
        g = np.zeros((self.N, self.dim))
        if self.mh:
            th = 2.0 * sh[:, None] * (pos[self.hi] - pos[self.hj])
            self._scatter(g, self.hi, th)
            self._scatter(g, self.hj, -th)
        if self.me:
            te = 2.0 * se[:, None] * (pos[self.ei] - self.edge_anchor)
            self._scatter(g, self.ei, te)
        return g.ravel()

    def assemble_g_csr(self, sigma: np.ndarray) -> sp.csr_array:
        sh, se = self.split(sigma)
        deg = (np.bincount(self.hi, weights=sh, minlength=self.N)
               + np.bincount(self.hj, weights=sh, minlength=self.N)
               + np.bincount(self.ei, weights=se, minlength=self.N))
        off = np.repeat(-2.0 * sh, self.dim)
        data = np.concatenate([2.0 * np.repeat(deg, self.dim), off, off])
        return sp.coo_array((data, (self._g_rows, self._g_cols)),
                            shape=(self.n, self.n)).tocsr()

    def assemble_b_csr(self, x: np.ndarray) -> sp.csr_array:
        pos = self.positions(x)
        dh = 2.0 * (pos[self.hi] - pos[self.hj])
        de = 2.0 * (pos[self.ei] - self.edge_anchor)
        data = np.concatenate([dh.ravel(), -dh.ravel(), de.ravel()])
        return sp.coo_array((data, (self._b_rows, self._b_cols)),
                            shape=(self.n, self.m)).tocsr()

    def f_of(self, varsigma_e: np.ndarray) -> np.ndarray:
        f = np.zeros((self.N, self.dim))
        if self.me:
            self._scatter(f, self.ei, 2.0 * varsigma_e[:, None] * self.edge_anchor)
        return f.ravel()

    def vstar(self, sigma: np.ndarray):
        value = float(0.5 * sigma @ sigma + self.d2 @ sigma)
        return value, sigma + self.d2


def _check_sigma(inst: SnlInstance, sigma) -> np.ndarray:
    sigma = np.asarray(sigma, dtype=float)
    if sigma.shape != (inst.m,):
        raise ValueError(f"sigma must have length {inst.m}, got shape {sigma.shape}")
    return sigma


def _check_x(inst: SnlInstance, x) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    if x.shape != (inst.n,):
        raise ValueError(f"x must have length {inst.n}, got shape {x.shape}")
    return x


def generate_instance(cfg: GeneratorConfig) -> SnlInstance:
    """Sample a random instance: i.i.d. uniform sensors, anchors at the corners.

    Edges exist where the true distance is at most the radio range.  When
    ``max_degree`` is set, every sensor keeps at most that many uniformly
    sampled in-range neighbors and an edge survives if either endpoint kept
    it.  Same seed, same instance, bit for bit.
    """
    geom_ss, noise_ss = np.random.SeedSequence(cfg.seed).spawn(2)
    rng = np.random.default_rng(geom_ss)
    pts = rng.random((cfg.n_sensors, cfg.dim))
    anchors = np.array(list(itertools.product((0.0, 1.0), repeat=cfg.dim)))

    pairs = cKDTree(pts).query_pairs(r=cfg.radio_range, output_type="ndarray")
    pairs = np.sort(pairs, axis=1)
    pairs = pairs[np.lexsort((pairs[:, 1], pairs[:, 0]))]
    anchor_dist = np.linalg.norm(pts[:, None, :] - anchors[None, :, :], axis=2)
    e_i, e_k = np.nonzero(anchor_dist <= cfg.radio_range)  # already lexicographic

    if cfg.max_degree is not None:
        cap = cfg.max_degree
        nbrs: list[list[int]] = [[] for _ in range(cfg.n_sensors)]
        for i, j in pairs:
            nbrs[i].append(int(j))
            nbrs[j].append(int(i))
        kept: set[tuple[int, int]] = set()
        for i in range(cfg.n_sensors):
            ns = nbrs[i]
            if len(ns) > cap:
                ns = [ns[t] for t in rng.choice(len(ns), size=cap, replace=False)]
            for j in ns:
                kept.add((i, j) if i < j else (j, i))
        pairs = np.array(sorted(kept), dtype=np.int64).reshape(-1, 2)
        kept_e: list[tuple[int, int]] = []
        for i in range(cfg.n_sensors):
            ks = [int(k) for k in e_k[e_i == i]]
            if len(ks) > cap:
                ks = sorted(ks[t] for t in rng.choice(len(ks), size=cap, replace=False))
            kept_e.extend((i, k) for k in ks)
        e_pairs = np.array(kept_e, dtype=np.int64).reshape(-1, 2)
    else:
        e_pairs = np.column_stack([e_i, e_k]).astype(np.int64)

    h_dist = (np.linalg.norm(pts[pairs[:, 0]] - pts[pairs[:, 1]], axis=1)
              if pairs.size else np.zeros(0))
    e_dist = (np.linalg.norm(pts[e_pairs[:, 0]] - anchors[e_pairs[:, 1]], axis=1)
              if e_pairs.size else np.zeros(0))

    inst = SnlInstance(dim=cfg.dim, n_sensors=cfg.n_sensors, anchors=anchors,
                       h_pairs=pairs.astype(np.int64), h_dist=h_dist,
                       e_pairs=e_pairs, e_dist=e_dist, truth=pts, generator=cfg)
    if cfg.noise_factor > 0:
        inst = apply_noise(inst, cfg.noise_factor, noise_ss)
    return inst


def apply_noise(inst: SnlInstance, alpha: float, seed) -> SnlInstance:
    """Multiply every measured distance by max(1 + alpha*nu, 0.1), nu ~ N(0,1).

    One fresh draw per edge, sensor-sensor edges first.  Defined only for
    instances that still carry their ground truth (whose exact distances the
    measurements perturb).  ``alpha = 0`` returns the instance unchanged.
    """
    if inst.truth is None:
        raise ValueError("noise model needs the ground-truth positions")
    if alpha == 0:
        return inst
    rng = seed if hasattr(seed, "standard_normal") else np.random.default_rng(seed)
    nu = rng.standard_normal(inst.m)
    factors = np.maximum(1.0 + alpha * nu, 0.1)
    gen = replace(inst.generator, noise_factor=alpha) if inst.generator else None
    return replace(inst,
                   h_dist=inst.h_dist * factors[:inst.h_dist.size],
                   e_dist=inst.e_dist * factors[inst.h_dist.size:],
                   generator=gen)


def snl_primal(inst: SnlInstance, x) -> float:
    """The least squares objective P(x)."""
    x = _check_x(inst, x)
    r = inst.kernel.lambda_of(x) - inst.kernel.d2
    return float(0.5 * r @ r)


def assemble_g(inst: SnlInstance, sigma) -> SparseMatrix:
    """Sparse G(sigma): 0.5 x^T G x equals the sigma-weighted quadratic part of Xi."""
    sigma = _check_sigma(inst, sigma)
    return SparseMatrix(inst.kernel.assemble_g_csr(sigma), symmetric=True)


def assemble_f(inst: SnlInstance, varsigma_e) -> np.ndarray:
    """F from the anchor-edge duals: block i gets sum_k 2 a_k varsigma_ik."""
    varsigma_e = np.asarray(varsigma_e, dtype=float)
    if varsigma_e.shape != (inst.e_dist.size,):
        raise ValueError("varsigma_e must match the number of anchor edges")
    return inst.kernel.f_of(varsigma_e)


def cross_hessian(inst: SnlInstance, x) -> SparseMatrix:
    """The n-by-m second-derivative block of Xi in (x, sigma).

    Column for edge (i, j) carries 2(x_i - x_j) in block i and the negation
    in block j; anchor-edge columns carry 2(x_i - a_k).
    """
    x = _check_x(inst, x)
    return SparseMatrix(inst.kernel.assemble_b_csr(x))


def vstar_value_grad(inst: SnlInstance, sigma):
    """Conjugate value and gradient: sum of sigma^2/2 + d^2 sigma per edge."""
    sigma = _check_sigma(inst, sigma)
    return inst.kernel.vstar(sigma)


def rmsd(x, truth) -> float:
    """Root mean squared sensor-position error (mean inside the root).

    Index-aligned: no registration is performed, anchors fix the frame.
    """
    if truth is None:
        raise ValueError("instance has no ground truth; rmsd undefined")
    truth = np.asarray(truth, dtype=float)
    diff = np.asarray(x, dtype=float).reshape(truth.shape) - truth
    return float(np.sqrt((diff ** 2).sum() / truth.shape[0]))


def to_canonical(inst: SnlInstance, max_n: int = _DENSE_CANONICAL_LIMIT) -> QuadraticCanonicalProblem:
    """Materialize the canonical form with dense stacked C_k (small instances).

    Anchor offset constants are folded into the conjugate offsets so the
    template Xi equals the SNL Xi exactly for every (x, sigma).
    """
    if inst.n > max_n:
        raise ValueError(
            f"dense canonical form materializes m={inst.m} matrices of order "
            f"{inst.n}; refusing beyond n={max_n} (use to_canonical_fused)")
    k = inst.kernel
    n, m, dim = inst.n, inst.m, inst.dim
    C = np.zeros((m, n, n))
    b = np.zeros((m, n))
    eye = np.eye(dim)
    for t in range(k.mh):
        si = slice(k.hi[t] * dim, (k.hi[t] + 1) * dim)
        sj = slice(k.hj[t] * dim, (k.hj[t] + 1) * dim)
        C[t, si, si] += 2.0 * eye
        C[t, sj, sj] += 2.0 * eye
        C[t, si, sj] -= 2.0 * eye
        C[t, sj, si] -= 2.0 * eye
    for t in range(k.me):
        row = k.mh + t
        si = slice(k.ei[t] * dim, (k.ei[t] + 1) * dim)
        C[row, si, si] += 2.0 * eye
        b[row, si] = 2.0 * k.edge_anchor[t]
    vstar = QuadraticVStar(q=k.q_folded.copy())
    return QuadraticCanonicalProblem(n=n, m=m, A=np.zeros((n, n)), c=np.zeros(n),
                                     C=C, b=b, vstar=vstar,
                                     v_of_xi=vstar.conjugate_value)


def to_canonical_fused(inst: SnlInstance) -> QuadraticCanonicalProblem:
    """Canonical form backed by the sparse kernel; works at any size."""
    k = inst.kernel
    vstar = QuadraticVStar(q=k.q_folded.copy())
    fused = FusedAssembly(
        g_of=lambda s: SparseMatrix(k.assemble_g_csr(s), symmetric=True),
        f_of=lambda s: k.f_of(s[k.mh:]),
        lam=lambda x: k.lambda_of(x) - k.lambda_shift,
        cross=lambda x: SparseMatrix(k.assemble_b_csr(x)),
        grad_x=k.grad_x_xi)
    return QuadraticCanonicalProblem(n=inst.n, m=inst.m, A=np.zeros((inst.n, inst.n)),
                                     c=np.zeros(inst.n), C=None, b=None,
                                     vstar=vstar, v_of_xi=vstar.conjugate_value,
                                     fused=fused)


# ---------------------------------------------------------------------------
# File formats
# ---------------------------------------------------------------------------

def _instance_doc(inst: SnlInstance) -> dict:
    doc = {
        "version": FORMAT_VERSION,
        "dim": inst.dim,
        "N": inst.n_sensors,
        "anchors": inst.anchors.tolist(),
        "edges_h": [[i, j, d] for i, j, d in inst.edges_h],
        "edges_e": [[i, k, d] for i, k, d in inst.edges_e],
    }
    if inst.truth is not None:
        doc["truth"] = inst.truth.tolist()
    if inst.generator is not None:
        g = inst.generator
        doc["generator"] = {"seed": g.seed, "rho": g.radio_range,
                            "alpha": g.noise_factor, "max_degree": g.max_degree}
    return doc


def save_instance(inst: SnlInstance, path) -> None:
    """Write the instance as a self-describing JSON document."""
    Path(path).write_text(json.dumps(_instance_doc(inst)) + "\n")


def load_instance(path) -> SnlInstance:
    """Read an instance file; validates edges, indices and the format version."""
    try:
        doc = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ValueError(f"malformed instance file {path}: {exc}") from exc
    if not isinstance(doc, dict) or doc.get("version") != FORMAT_VERSION:
        raise ValueError(f"unsupported instance format version "
                         f"{doc.get('version') if isinstance(doc, dict) else doc!r}")
    try:
        dim = int(doc["dim"])
        n_sensors = int(doc["N"])
        anchors = np.asarray(doc["anchors"], dtype=float).reshape(-1, dim)
        eh = doc["edges_h"]
        ee = doc["edges_e"]
    except (KeyError, TypeError) as exc:
        raise ValueError(f"malformed instance file {path}: {exc}") from exc
    h_pairs = np.array([[int(i), int(j)] for i, j, _ in eh], dtype=np.int64).reshape(-1, 2)
    h_dist = np.array([float(d) for _, _, d in eh])
    e_pairs = np.array([[int(i), int(k)] for i, k, _ in ee], dtype=np.int64).reshape(-1, 2)
    e_dist = np.array([float(d) for _, _, d in ee])
    truth = None
    if "truth" in doc:
        truth = np.asarray(doc["truth"], dtype=float).reshape(n_sensors, dim)
    gen = None
    if "generator" in doc:
        g = doc["generator"]
        gen = GeneratorConfig(n_sensors=n_sensors, dim=dim,
                              radio_range=float(g["rho"]), seed=int(g["seed"]),
                              noise_factor=float(g["alpha"]),
                              max_degree=None if g["max_degree"] is None
                              else int(g["max_degree"]))
    return SnlInstance(dim=dim, n_sensors=n_sensors, anchors=anchors,
                       h_pairs=h_pairs, h_dist=h_dist, e_pairs=e_pairs,
                       e_dist=e_dist, truth=truth, generator=gen)


def export_positions_csv(path, positions: np.ndarray) -> None:
    """One row per sensor: index, x, y[, z]."""
    positions = np.asarray(positions, dtype=float)
    header = ["index", "x", "y", "z"][:1 + positions.shape[1]]
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for idx, row in enumerate(positions):
            writer.writerow([idx, *[repr(float(v)) for v in row]])
