"""Convex-concave spline (CCS) models built from sampled tangent planes.

For each output ``f_k`` and curvature constant ``c = c[k]`` the function is
split as ``f = 0.5 * ((f + c|x|^2) + (f - c|x|^2))``. With ``c`` large enough
the first part is convex and the second concave. The convex part is the
maximum of its tangent planes at the anchors, the concave part the minimum
of its own. Plane ``i`` at query ``x`` is::

    f-part:  value_i + gradient_i . (x - anchor_i)
    q-part:  c * (2 anchor_i . x - anchor_i . anchor_i)
    convex_i = f-part + q-part,  concave_i = f-part - q-part

The two parts are kept apart until the winning planes are known, so the
average of the winning convex and concave planes is formed as
``0.5 * (f_i + f_j) + 0.5 * (q_i - q_j)``; at an anchor both winners are the
anchor's own plane and the quadratic terms cancel exactly.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from ccsnet.errors import FormatError, LengthError, ShapeError
from ccsnet.nn import HessianOperator, Network, value_and_gradients
from ccsnet.spectral import batched_lanczos_extremes

C_MARGIN = 1e-3
CCS_MAGIC = b"CCS1"
CCS_VERSION = 1
_SHARED_ANCHORS = 1


@dataclass(frozen=True)
class SampledSupport:
    anchor: np.ndarray
    value: float
    gradient: np.ndarray

    @property
    def offset(self) -> float:
        """Intercept of the f-part plane: ``value - gradient . anchor``."""
        return float(self.value - self.gradient @ self.anchor)


@dataclass
class OutputPlanes:
    """All supports for one output, stored as arrays."""

    anchors: np.ndarray  # (n, d)
    values: np.ndarray  # (n,)
    gradients: np.ndarray  # (n, d)

    def __post_init__(self):
        n, d = self.anchors.shape
        if self.values.shape != (n,) or self.gradients.shape != (n, d):
            raise ShapeError("anchors, values and gradients disagree in shape")
        if n == 0:
            raise ValueError("an output needs at least one support")

    def __len__(self):
        return self.values.shape[0]

    def support(self, i) -> SampledSupport:
        return SampledSupport(self.anchors[i], float(self.values[i]), self.gradients[i])

    def take(self, idx) -> "OutputPlanes":
        return OutputPlanes(self.anchors[idx], self.values[idx], self.gradients[idx])


@dataclass
class CCSModel:
    c: np.ndarray
    planes: list  # one OutputPlanes per output
    input_dim: int = field(init=False)
    output_dim: int = field(init=False)

    def __post_init__(self):
        self.c = np.asarray(self.c, dtype=np.float64)
        if self.c.shape != (len(self.planes),):
            raise ShapeError(f"{self.c.shape} c values for {len(self.planes)} outputs")
        if np.any(self.c < 0) or not np.all(np.isfinite(self.c)):
            raise ValueError("curvature constants must be finite and non-negative")
        dims = {p.anchors.shape[1] for p in self.planes}
        if len(dims) != 1:
            raise ShapeError(f"outputs disagree on input dimension: {sorted(dims)}")
        self.input_dim = dims.pop()
        self.output_dim = len(self.planes)
        self._cache = {}

    @property
    def support_counts(self):
        return [len(p) for p in self.planes]

    def supports(self, k):
        p = self.planes[k]
        return [p.support(i) for i in range(len(p))]

    @property
    def shared_anchors(self) -> bool:
        first = self.planes[0].anchors
        return all(p.anchors is first for p in self.planes[1:])

    def _prepared(self, k):
        if k not in self._cache:
            p = self.planes[k]
            offsets = p.values - np.einsum("nd,nd->n", p.gradients, p.anchors)
            sq = np.einsum("nd,nd->n", p.anchors, p.anchors)
            self._cache[k] = (offsets, sq)
        return self._cache[k]


def sample_planes(net: Network, anchors, c, batch=1000) -> CCSModel:
    """One support per anchor and output: value and input gradient at the anchor."""
    anchors = np.ascontiguousarray(anchors, dtype=np.float64)
    if anchors.ndim != 2 or anchors.shape[1] != net.input_dim:
        raise ShapeError(f"anchors must have shape (n, {net.input_dim}), got {anchors.shape}")
    c = np.broadcast_to(np.asarray(c, dtype=np.float64), (net.output_dim,)).copy()
    n = anchors.shape[0]
    values = np.empty((net.output_dim, n))
    grads = np.empty((net.output_dim, n, net.input_dim))
    for s in range(0, n, batch):
        out, g = value_and_gradients(net, anchors[s : s + batch])
        values[:, s : s + batch] = out.T
        grads[:, s : s + batch] = g
    planes = [OutputPlanes(anchors, values[k], grads[k]) for k in range(net.output_dim)]
    return CCSModel(c, planes)


def _chunk_rows(n_planes, budget=2_000_000):
    return max(1, budget // max(n_planes, 1))


def _winners(model: CCSModel, k, x, xa=None):
    """f-part and q-part of the winning convex / concave planes for output k."""
    p = model.planes[k]
    offsets, sq = model._prepared(k)
    fpart = x @ p.gradients.T + offsets
    if xa is None:
        xa = x @ p.anchors.T
    qpart = model.c[k] * (2.0 * xa - sq)
    rows = np.arange(x.shape[0])
    i = np.argmax(fpart + qpart, axis=1)
    j = np.argmin(fpart - qpart, axis=1)
    return fpart[rows, i], qpart[rows, i], fpart[rows, j], qpart[rows, j], i, j


def eval_ccs(model: CCSModel, x, return_planes=False):
    """CCS outputs for one input (d,) or a batch (B, d).

    With ``return_planes`` also returns the indices (B, K) of the winning
    convex and concave planes (lowest index on ties).
    """
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    xb = x[None, :] if single else x
    if xb.ndim != 2 or xb.shape[1] != model.input_dim:
        raise ShapeError(f"expected inputs of length {model.input_dim}, got shape {x.shape}")
    out = np.empty((xb.shape[0], model.output_dim))
    arg_max = np.empty(out.shape, dtype=np.int64)
    arg_min = np.empty(out.shape, dtype=np.int64)
    shared = model.shared_anchors
    step = _chunk_rows(max(model.support_counts))
    for s in range(0, xb.shape[0], step):
        chunk = xb[s : s + step]
        xa = chunk @ model.planes[0].anchors.T if shared else None
        for k in range(model.output_dim):
            fi, qi, fj, qj, i, j = _winners(model, k, chunk, xa)
            out[s : s + step, k] = 0.5 * (fi + fj) + 0.5 * (qi - qj)
            arg_max[s : s + step, k] = i
            arg_min[s : s + step, k] = j
    if single:
        out, arg_max, arg_min = out[0], arg_max[0], arg_min[0]
    return (out, arg_max, arg_min) if return_planes else out


def eval_parts(model: CCSModel, x, k):
    """Max-affine (convex) and min-affine (concave) envelopes of output k."""
    xb = np.atleast_2d(np.asarray(x, dtype=np.float64))
    fi, qi, fj, qj, _, _ = _winners(model, k, xb)
    return fi + qi, fj - qj


def ccs_accuracy(model: CCSModel, data) -> float:
    if len(data) == 0:
        return 0.0
    return float(np.mean(eval_ccs(model, data.inputs).argmax(axis=1) == data.labels))


# ------------------------------------------------------------ curvature constants


def hessian_extremes(net: Network, anchors, k, tol=1e-6, max_iter=1000, batch=128, seed=0):
    """Per-anchor (lambda_min, lambda_max) of the Hessian of logit k."""
    anchors = np.asarray(anchors, dtype=np.float64)
    if anchors.ndim != 2 or anchors.shape[0] == 0:
        raise ValueError("need a non-empty (n, d) array of anchors")
    lo = np.empty(anchors.shape[0])
    hi = np.empty(anchors.shape[0])
    for s in range(0, anchors.shape[0], batch):
        op = HessianOperator(net, anchors[s : s + batch], k)
        lo[s : s + batch], hi[s : s + batch] = batched_lanczos_extremes(
            op, op.shape[0], net.input_dim, tol=tol, max_iter=max_iter, seed=seed + s
        )
    return lo, hi


def c_from_extremes(lo, hi, margin=C_MARGIN) -> float:
    return (1.0 + margin) * max(abs(float(np.min(lo))), abs(float(np.max(hi))))


def estimate_c(net: Network, anchors, k, margin=C_MARGIN, **kw) -> float:
    """``(1 + margin) * max(|min lambda_min|, |max lambda_max|)`` over the anchors."""
    lo, hi = hessian_extremes(net, anchors, k, **kw)
    return c_from_extremes(lo, hi, margin)


@dataclass
class CurvatureReport:
    c: np.ndarray
    lambda_min: np.ndarray  # per output, minimum over anchors
    lambda_max: np.ndarray
    n_anchors: int

    @property
    def valid(self):
        return bool(np.all(self.lambda_min >= -self.c))


def estimate_all_c(net: Network, anchors, margin=C_MARGIN, **kw) -> CurvatureReport:
    lows, highs = [], []
    for k in range(net.output_dim):
        lo, hi = hessian_extremes(net, anchors, k, **kw)
        lows.append(lo.min())
        highs.append(hi.max())
    lows, highs = np.array(lows), np.array(highs)
    c = (1.0 + margin) * np.maximum(np.abs(lows), np.abs(highs))
    return CurvatureReport(c, lows, highs, len(anchors))


# ------------------------------------------------------------------- audits


def hull_violation(model: CCSModel, k, pairs) -> float:
    """Largest amount by which a convex plane rises above ``f + c|x|^2`` at
    another anchor, or a concave plane dips below ``f - c|x|^2``, over the
    given (plane, anchor) index pairs. Non-positive means no violation.
    """
    p = model.planes[k]
    c = model.c[k]
    pairs = np.asarray(pairs, dtype=np.int64)
    i, j = pairs[:, 0], pairs[:, 1]
    xi, xj = p.anchors[i], p.anchors[j]
    f_part = p.values[i] + np.einsum("nd,nd->n", p.gradients[i], xj - xi)
    q_part = c * (2.0 * np.einsum("nd,nd->n", xi, xj) - np.einsum("nd,nd->n", xi, xi))
    q_true = c * np.einsum("nd,nd->n", xj, xj)
    above = (f_part + q_part) - (p.values[j] + q_true)
    below = (p.values[j] - q_true) - (f_part - q_part)
    return float(max(above.max(), below.max()))


# ------------------------------------------------------------ serialization
#
# CCS1 layout (little-endian):
#   b"CCS1", u32 version, u32 input_dim, u32 output_dim, u32 flags
#   output_dim x u64 support counts
#   output_dim x f64 c
#   flags bit 0 (shared anchors): one (n, d) f64 anchor block, then per output
#     n f64 values and (n, d) f64 gradients
#   otherwise, per output: (n_k, d) anchors, n_k values, (n_k, d) gradients


def save_ccs(model: CCSModel, path) -> None:
    shared = model.shared_anchors
    parts = [
        CCS_MAGIC,
        struct.pack("<IIII", CCS_VERSION, model.input_dim, model.output_dim, _SHARED_ANCHORS if shared else 0),
        struct.pack(f"<{model.output_dim}Q", *model.support_counts),
        model.c.astype("<f8").tobytes(),
    ]
    if shared:
        parts.append(np.ascontiguousarray(model.planes[0].anchors, dtype="<f8").tobytes())
    for p in model.planes:
        if not shared:
            parts.append(np.ascontiguousarray(p.anchors, dtype="<f8").tobytes())
        parts.append(np.ascontiguousarray(p.values, dtype="<f8").tobytes())
        parts.append(np.ascontiguousarray(p.gradients, dtype="<f8").tobytes())
    with open(path, "wb") as fh:
        for part in parts:
            fh.write(part)


def load_ccs(path) -> CCSModel:
    raw = Path(path).read_bytes()
    if raw[:4] != CCS_MAGIC:
        raise FormatError(f"{path}: expected magic {CCS_MAGIC!r}, got {raw[:4]!r}")
    pos = 4

    def take(fmt):
        nonlocal pos
        size = struct.calcsize(fmt)
        if pos + size > len(raw):
            raise LengthError(f"{path}: truncated at byte {pos}")
        vals = struct.unpack_from(fmt, raw, pos)
        pos += size
        return vals

    def floats(*shape):
        nonlocal pos
        count = int(np.prod(shape))
        if pos + 8 * count > len(raw):
            raise LengthError(f"{path}: truncated float payload at byte {pos}")
        arr = np.frombuffer(raw, dtype="<f8", count=count, offset=pos).reshape(shape)
        pos += 8 * count
        return arr.astype(np.float64)

    version, d, k_out, flags = take("<IIII")
    if version != CCS_VERSION:
        raise FormatError(f"{path}: unsupported CCS version {version}")
    counts = take(f"<{k_out}Q")
    c = floats(k_out)
    shared = bool(flags & _SHARED_ANCHORS)
    if shared and len(set(counts)) > 1:
        raise FormatError(f"{path}: shared anchors but unequal support counts")
    anchors = floats(counts[0], d) if shared else None
    planes = []
    for n in counts:
        a = anchors if shared else floats(n, d)
        planes.append(OutputPlanes(a, floats(n), floats(n, d)))
    if pos != len(raw):
        raise FormatError(f"{path}: {len(raw) - pos} trailing bytes")
    return CCSModel(c, planes)


def model_card(model: CCSModel, report: CurvatureReport | None = None, audit: str | None = None) -> str:
    lines = [
        f"input_dim: {model.input_dim}",
        f"output_dim: {model.output_dim}",
        f"planes_per_output: {','.join(str(n) for n in model.support_counts)}",
        "c: " + ",".join(f"{v:.9g}" for v in model.c),
    ]
    if report is not None:
        lines.append("lambda_min: " + ",".join(f"{v:.9g}" for v in report.lambda_min))
        lines.append("lambda_max: " + ",".join(f"{v:.9g}" for v in report.lambda_max))
        lines.append(f"c_anchors: {report.n_anchors}")
    if audit is not None:
        lines.append(f"validity_audit: {audit}")
    return "\n".join(lines) + "\n"
