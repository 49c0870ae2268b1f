"""K-means compression of CCS plane sets.

Each support is embedded as ``[gradient ; offset ; anchor]`` with
``offset = value - gradient . anchor``. The anchor is part of the descriptor
because a centroid has to re-materialise both the f-plane and the quadratic
plane, and the quadratic plane is fixed by the anchor alone. Convex and
concave planes are rebuilt from the same centroid, so they stay
complementary.

k-means only sees distances, so the centred descriptors are first rotated
into an orthonormal basis of their span. Gradients of a network with a
narrow first layer and images with constant border pixels leave much of the
descriptor space empty, which roughly halves the work for MNIST models.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field, replace

import numpy as np
from scipy import sparse

from ccsnet.ccs import CCSModel, OutputPlanes, ccs_accuracy


@dataclass(frozen=True)
class ClusterConfig:
    k: int
    restarts: int = 10
    max_iters: int = 300
    seed: int = 0
    tolerance: float = 1e-6
    normalize: bool = False

    def __post_init__(self):
        if self.k < 1 or self.restarts < 1 or self.max_iters < 1:
            raise ValueError("k, restarts and max_iters must all be >= 1")


@dataclass
class KMeansResult:
    centroids: np.ndarray
    assignments: np.ndarray
    inertia: float
    history: list = field(default_factory=list)  # inertia after each assignment step
    restart_inertias: list = field(default_factory=list)


def _sq_dists(points, sq_points, centroids):
    d = sq_points[:, None] - 2.0 * points @ centroids.T + np.einsum("kd,kd->k", centroids, centroids)
    return np.maximum(d, 0.0)


def _inertia(points, centroids, assignments):
    diff = points - centroids[assignments]
    return float(np.einsum("nd,nd->", diff, diff))


def kmeans_plus_plus(points, k, rng, sq_points=None):
    """D^2-weighted seeding. Returns the chosen rows of ``points``."""
    n = points.shape[0]
    if sq_points is None:
        sq_points = np.einsum("nd,nd->n", points, points)
    # for many seeds one Gram matrix beats k matrix-vector passes
    gram = points @ points.T if k > 64 and n <= 20_000 else None

    def dists_to(i):
        dots = gram[i] if gram is not None else points @ points[i]
        return np.maximum(sq_points - 2.0 * dots + sq_points[i], 0.0)

    chosen = [int(rng.integers(n))]
    closest = dists_to(chosen[0])
    closest[chosen[0]] = 0.0
    for _ in range(1, k):
        total = closest.sum()
        if total > 0:
            pick = int(np.searchsorted(np.cumsum(closest), rng.random() * total, side="right"))
            pick = min(pick, n - 1)
        else:
            # every point coincides with a chosen centre; take an unused index
            unused = np.setdiff1d(np.arange(n), chosen)
            pick = int(unused[rng.integers(unused.size)])
        chosen.append(pick)
        closest = np.minimum(closest, dists_to(pick))
        closest[pick] = 0.0
    return points[chosen].copy()


def _cluster_sums(points, assignments, k):
    n = points.shape[0]
    onehot = sparse.csr_matrix((np.ones(n), (assignments, np.arange(n))), shape=(k, n))
    return np.asarray(onehot @ points)


def _lloyd(points, sq_points, centroids, max_iters, tol):
    """Lloyd iterations. ``history`` holds the inertia after every assignment
    step (from the expanded distances); the returned inertia is recomputed
    from explicit differences.
    """
    history = []
    k = centroids.shape[0]
    rows = np.arange(points.shape[0])
    prev = np.inf
    for _ in range(max_iters):
        dist = _sq_dists(points, sq_points, centroids)
        assignments = np.argmin(dist, axis=1)
        inertia = float(dist[rows, assignments].sum())
        history.append(inertia)
        if inertia == 0.0 or (np.isfinite(prev) and prev - inertia <= tol * prev):
            break
        prev = inertia
        counts = np.bincount(assignments, minlength=k)
        sums = _cluster_sums(points, assignments, k)
        new = centroids.copy()
        filled = counts > 0
        new[filled] = sums[filled] / counts[filled, None]
        if not filled.all():
            # reseed empty clusters at the points farthest from their centroid
            diff = points - new[assignments]
            far = np.einsum("nd,nd->n", diff, diff)
            for e, idx in zip(np.flatnonzero(~filled), np.argsort(-far, kind="stable")):
                new[e] = points[idx]
        centroids = new
    return centroids, assignments, _inertia(points, centroids, assignments), history


def kmeans(points, cfg: ClusterConfig) -> KMeansResult:
    """Lloyd iterations from k-means++ seeds; best of ``cfg.restarts`` by inertia."""
    points = np.asarray(points, dtype=np.float64)
    n = points.shape[0]
    if cfg.k > n:
        raise ValueError(f"k={cfg.k} exceeds the number of points ({n})")
    sq_points = np.einsum("nd,nd->n", points, points)
    seeds = np.random.SeedSequence(cfg.seed).spawn(cfg.restarts)
    best = None
    inertias = []
    for ss in seeds:
        rng = np.random.default_rng(ss)
        start = kmeans_plus_plus(points, cfg.k, rng, sq_points)
        centroids, assignments, inertia, history = _lloyd(
            points, sq_points, start, cfg.max_iters, cfg.tolerance
        )
        inertias.append(inertia)
        if best is None or inertia < best.inertia:
            best = KMeansResult(centroids, assignments, inertia, history)
    best.restart_inertias = inertias
    return best


def plane_descriptors(planes: OutputPlanes) -> np.ndarray:
    offsets = planes.values - np.einsum("nd,nd->n", planes.gradients, planes.anchors)
    return np.hstack([planes.gradients, offsets[:, None], planes.anchors])


@dataclass
class DescriptorSpace:
    """One output's plane descriptors in an orthonormal basis of their span.

    Directions whose variance is below ``rtol`` times the largest are
    dropped; distances between descriptors are otherwise unchanged.
    """

    mean: np.ndarray  # (D,)
    basis: np.ndarray  # (D, r), orthonormal columns
    coords: np.ndarray  # (n, r)
    scale: np.ndarray | None = None

    @classmethod
    def from_planes(cls, planes: OutputPlanes, normalize=False, rtol=1e-12):
        desc = plane_descriptors(planes)
        scale = None
        if normalize:
            scale = desc.std(axis=0)
            scale[scale == 0] = 1.0
            desc = desc / scale
        mean = desc.mean(axis=0)
        centred = desc - mean
        n, dim = centred.shape
        if n >= dim:
            w, v = np.linalg.eigh(centred.T @ centred)
            keep = w > rtol * max(w[-1], 0.0)
            basis = v[:, keep]
        else:
            # span of the rows via the smaller n x n Gram matrix
            w, u = np.linalg.eigh(centred @ centred.T)
            keep = w > rtol * max(w[-1], 0.0)
            basis, _ = np.linalg.qr(centred.T @ u[:, keep])
        basis = np.ascontiguousarray(basis)
        return cls(mean, basis, centred @ basis, scale)

    def lift(self, coords):
        desc = self.mean + coords @ self.basis.T
        return desc if self.scale is None else desc * self.scale


@dataclass
class OutputReduction:
    gradients: np.ndarray  # (K, d) centroid gradient part
    offsets: np.ndarray  # (K,)
    anchors: np.ndarray  # (K, d)
    assignments: np.ndarray  # original support -> reduced plane index
    inertia: float


@dataclass
class ClusterReduction:
    outputs: list
    model: CCSModel
    accuracy_mean: float | None = None
    accuracy_std: float | None = None

    @property
    def inertia(self):
        return float(sum(o.inertia for o in self.outputs))


def reduce_output(planes: OutputPlanes, cfg: ClusterConfig, space: DescriptorSpace | None = None):
    """Cluster one output's supports; returns (OutputReduction, OutputPlanes).

    Reduced planes are ordered by the smallest original index among their
    members, and a singleton cluster reuses its member's support verbatim,
    so ``k == len(planes)`` reproduces the input exactly. ``space`` may be
    passed to reuse a projection across calls.
    """
    if space is None:
        space = DescriptorSpace.from_planes(planes, cfg.normalize)
    res = kmeans(space.coords, cfg)
    cent = space.lift(res.centroids)
    d = planes.anchors.shape[1]
    k = cent.shape[0]

    first = np.full(k, planes.values.size, dtype=np.int64)
    np.minimum.at(first, res.assignments, np.arange(planes.values.size))
    order = np.argsort(first, kind="stable")
    rank = np.empty(k, dtype=np.int64)
    rank[order] = np.arange(k)
    cent = cent[order]
    assignments = rank[res.assignments]

    grads = cent[:, :d].copy()
    offsets = cent[:, d].copy()
    anchors = cent[:, d + 1 :].copy()
    values = offsets + np.einsum("kd,kd->k", grads, anchors)

    counts = np.bincount(assignments, minlength=k)
    for c in np.flatnonzero(counts == 1):
        m = int(np.flatnonzero(assignments == c)[0])
        grads[c] = planes.gradients[m]
        anchors[c] = planes.anchors[m]
        values[c] = planes.values[m]
        offsets[c] = values[c] - grads[c] @ anchors[c]
    red = OutputReduction(grads, offsets, anchors, assignments, res.inertia)
    return red, OutputPlanes(anchors, values, grads)


def descriptor_spaces(model: CCSModel, normalize=False):
    return [DescriptorSpace.from_planes(p, normalize) for p in model.planes]


def reduce_ccs(model: CCSModel, cfg: ClusterConfig, spaces=None) -> ClusterReduction:
    """Cluster each output's supports into ``cfg.k`` planes."""
    if cfg.k > min(model.support_counts):
        raise ValueError(f"k={cfg.k} exceeds the support count {min(model.support_counts)}")
    if spaces is None:
        spaces = [None] * model.output_dim
    outputs, planes = [], []
    seeds = np.random.SeedSequence(cfg.seed).generate_state(model.output_dim)
    for k_out, (p, space) in enumerate(zip(model.planes, spaces)):
        red, reduced = reduce_output(p, replace(cfg, seed=int(seeds[k_out])), space)
        outputs.append(red)
        planes.append(reduced)
    return ClusterReduction(outputs, CCSModel(model.c.copy(), planes))


@dataclass
class SweepRow:
    k: int
    restart: int
    accuracy: float
    inertia: float


def sweep_k(model: CCSModel, data, ks, cfg: ClusterConfig, on_row=None):
    """Accuracy of reduced models for each ``k`` over ``cfg.restarts`` runs.

    Each run is a single k-means start with its own derived seed. Returns the
    per-run rows, the aggregate ``(k, mean, std)`` rows and, per ``k``, the
    lowest-inertia reduction.
    """
    if not ks:
        raise ValueError("ks must be non-empty")
    rows, summary, best = [], [], {}
    spaces = descriptor_spaces(model, cfg.normalize)
    for k in ks:
        seeds = np.random.SeedSequence([cfg.seed, int(k)]).generate_state(cfg.restarts)
        accs = []
        for r, s in enumerate(seeds):
            run = replace(cfg, k=int(k), restarts=1, seed=int(s))
            red = reduce_ccs(model, run, spaces)
            acc = ccs_accuracy(red.model, data)
            row = SweepRow(int(k), r, acc, red.inertia)
            rows.append(row)
            accs.append(acc)
            if on_row is not None:
                on_row(row)
            if k not in best or red.inertia < best[k].inertia:
                best[k] = red
        mean, std = float(np.mean(accs)), float(np.std(accs))
        best[k].accuracy_mean, best[k].accuracy_std = mean, std
        summary.append((int(k), mean, std))
    return rows, summary, best


def write_sweep_csv(rows, summary, runs_path, agg_path, provenance=None):
    with open(runs_path, "w", newline="") as fh:
        if provenance:
            fh.write(f"# {provenance}\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["k", "restart", "accuracy", "inertia"])
        for r in rows:
            w.writerow([r.k, r.restart, repr(r.accuracy), repr(r.inertia)])
    with open(agg_path, "w", newline="") as fh:
        if provenance:
            fh.write(f"# {provenance}\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["k", "mean_acc", "std_acc"])
        for k, mean, std in summary:
            w.writerow([k, repr(mean), repr(std)])
