"""One-dimensional CCS construction and the demo functions used with it."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ccsnet.ccs import C_MARGIN
from ccsnet.errors import NumericError


def sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * np.asarray(x, dtype=np.float64)))


def sigmoid_d1(x):
    s = sigmoid(x)
    return s * (1.0 - s)


def sigmoid_d2(x):
    s = sigmoid(x)
    return s * (1.0 - s) * (1.0 - 2.0 * s)


def gaussian(x):
    return np.exp(-0.5 * np.asarray(x, dtype=np.float64) ** 2)


def gaussian_d1(x):
    x = np.asarray(x, dtype=np.float64)
    return -x * np.exp(-0.5 * x**2)


def gaussian_d2(x):
    x = np.asarray(x, dtype=np.float64)
    return (x**2 - 1.0) * np.exp(-0.5 * x**2)


def c_from_second_derivative_1d(f_second, domain, grid_points=100_000, margin=C_MARGIN) -> float:
    """``(1 + margin) * max |f''|`` over a uniform grid on ``domain``."""
    if grid_points < 2:
        raise ValueError("grid_points must be at least 2")
    lo, hi = domain
    values = np.asarray(f_second(np.linspace(lo, hi, grid_points)), dtype=np.float64)
    if not np.all(np.isfinite(values)):
        raise NumericError("second derivative is not finite on the grid")
    return (1.0 + margin) * max(abs(values.max()), abs(values.min()))


@dataclass(frozen=True)
class Ccs1D:
    c: float
    anchors: np.ndarray
    values: np.ndarray
    slopes: np.ndarray
    domain: tuple

    def __post_init__(self):
        if not self.domain[0] < self.domain[1]:
            raise ValueError("domain must satisfy lo < hi")
        if np.any(np.diff(self.anchors) < 0):
            raise ValueError("anchors must be sorted")

    @property
    def n_planes(self):
        return self.anchors.size

    def _parts(self, x):
        x = np.asarray(x, dtype=np.float64)[..., None]
        f_part = self.values + self.slopes * (x - self.anchors)
        q_part = self.c * (2.0 * self.anchors * x - self.anchors**2)
        return f_part, q_part

    def convex(self, x):
        """Max-affine approximation of ``f + c x^2``."""
        f_part, q_part = self._parts(x)
        return (f_part + q_part).max(axis=-1)

    def concave(self, x):
        """Min-affine approximation of ``f - c x^2``."""
        f_part, q_part = self._parts(x)
        return (f_part - q_part).min(axis=-1)

    def __call__(self, x):
        f_part, q_part = self._parts(x)
        i = np.argmax(f_part + q_part, axis=-1)[..., None]
        j = np.argmin(f_part - q_part, axis=-1)[..., None]
        fi, qi = np.take_along_axis(f_part, i, -1), np.take_along_axis(q_part, i, -1)
        fj, qj = np.take_along_axis(f_part, j, -1), np.take_along_axis(q_part, j, -1)
        return (0.5 * (fi + fj) + 0.5 * (qi - qj))[..., 0]


def build_ccs_1d(f, f_second=None, domain=(-1.0, 1.0), n_planes=300, c=None, f_prime=None, grid_points=100_000):
    """Tangent planes of ``f +/- c x^2`` at ``n_planes`` uniform anchors.

    ``c`` defaults to the second-derivative rule applied to ``f_second``.
    Slopes come from ``f_prime`` when given, otherwise from a central
    difference with step ``(hi - lo) * 1e-7``.
    """
    lo, hi = float(domain[0]), float(domain[1])
    if not lo < hi:
        raise ValueError(f"empty domain [{lo}, {hi}]")
    if n_planes < 1:
        raise ValueError("need at least one plane")
    if c is None:
        if f_second is None:
            raise ValueError("supply either c or f_second")
        c = c_from_second_derivative_1d(f_second, (lo, hi), grid_points)
    if c < 0:
        raise ValueError("c must be non-negative")
    xs = np.linspace(lo, hi, n_planes) if n_planes > 1 else np.array([0.5 * (lo + hi)])
    if f_prime is not None:
        slopes = np.asarray(f_prime(xs), dtype=np.float64)
    else:
        h = (hi - lo) * 1e-7
        slopes = (np.asarray(f(xs + h)) - np.asarray(f(xs - h))) / (2.0 * h)
    return Ccs1D(float(c), xs, np.asarray(f(xs), dtype=np.float64), slopes, (lo, hi))


@dataclass(frozen=True)
class GaussianMixture:
    """``f(x) = sum_i w_i exp(-(x - mu_i)^2 / (2 sigma_i^2))``.

    Iterating yields ``(value, second_derivative)`` so the mixture unpacks
    like a function pair.
    """

    means: np.ndarray
    sigmas: np.ndarray
    weights: np.ndarray

    def _terms(self, x):
        x = np.asarray(x, dtype=np.float64)[..., None]
        u = (x - self.means) / self.sigmas
        return u, self.weights * np.exp(-0.5 * u**2)

    def _chunked(self, x, term):
        # keeps the (points, components) temporaries cache-sized on long grids
        x = np.asarray(x, dtype=np.float64)
        flat = x.reshape(-1)
        out = np.empty(flat.shape)
        for s in range(0, flat.size, 2048):
            u, e = self._terms(flat[s : s + 2048])
            out[s : s + 2048] = term(u, e).sum(axis=-1)
        return out.reshape(x.shape)

    def value(self, x):
        return self._chunked(x, lambda u, e: e)

    def derivative(self, x):
        return self._chunked(x, lambda u, e: -u / self.sigmas * e)

    def second_derivative(self, x):
        return self._chunked(x, lambda u, e: (u**2 - 1.0) / self.sigmas**2 * e)

    def __iter__(self):
        return iter((self.value, self.second_derivative))

    @property
    def n_parameters(self):
        return 3 * self.means.size


def gaussian_mixture_1d(
    n_components=400, seed=0, mean_range=(-3.0, 3.0), sigma_range=(0.0, 0.2), weight_range=(-1.0, 1.0), min_sigma=1e-3
) -> GaussianMixture:
    """Random mixture with means, widths and weights drawn uniformly.

    Widths below ``min_sigma`` are redrawn.
    """
    if n_components < 1:
        raise ValueError("need at least one component")
    rng = np.random.default_rng(seed)
    means = rng.uniform(*mean_range, size=n_components)
    sigmas = rng.uniform(*sigma_range, size=n_components)
    weights = rng.uniform(*weight_range, size=n_components)
    small = sigmas < min_sigma
    while small.any():
        sigmas[small] = rng.uniform(*sigma_range, size=small.sum())
        small = sigmas < min_sigma
    return GaussianMixture(means, sigmas, weights)


DEMOS = {
    "gaussian": (gaussian, gaussian_d1, gaussian_d2, (-3.0, 3.0)),
    "sigmoid": (sigmoid, sigmoid_d1, sigmoid_d2, (-6.0, 6.0)),
}


@dataclass
class DemoResult:
    x: np.ndarray
    f: np.ndarray
    convex: np.ndarray
    concave: np.ndarray
    ccs: np.ndarray
    model: Ccs1D

    @property
    def error(self):
        return np.abs(self.ccs - self.f)

    @property
    def max_error(self) -> float:
        return float(self.error.max())

    @property
    def max_error_at(self) -> float:
        return float(self.x[np.argmax(self.error)])


def run_demo(name, n_planes=300, n_components=400, seed=0, grid=10_000) -> DemoResult:
    """Build and evaluate one of the ``gaussian``, ``sigmoid`` or ``mixture`` demos.

    The convex and concave columns are the envelopes of ``f + c x^2`` and
    ``f - c x^2``; their average is the ``ccs`` column.
    """
    if name == "mixture":
        mix = gaussian_mixture_1d(n_components, seed)
        f, d1, d2, domain = mix.value, mix.derivative, mix.second_derivative, (-3.0, 3.0)
    elif name in DEMOS:
        f, d1, d2, domain = DEMOS[name]
    else:
        raise ValueError(f"unknown demo {name!r}")
    model = build_ccs_1d(f, d2, domain, n_planes, f_prime=d1)
    x = np.linspace(*domain, grid)
    return DemoResult(x, f(x), model.convex(x), model.concave(x), model(x), model)
