"""Synthetic training-data distributions for poses and focal lengths.

Parametric: a Bingham distribution on unit quaternions plus two 2D normals,
one for (x, y) and one for (log z, log f). Also: Haar-uniform sampling on
SO(3), a nonparametric perturb-the-dataset sampler, and the refiner
input-noise model.

All samplers take an integer seed (or a numpy Generator) and are
deterministic; worker streams are derived as ``seed + worker_index``.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from functools import lru_cache
from pathlib import Path

import numpy as np
from scipy.optimize import brentq, least_squares

from .errors import DegenerateFitError, DomainError
from .geometry import BBox, ModelPoints, ParamState, Rotation, geodesic_distance

Z_CLAMP = -900.0  # concentration floor; keeps the normalization constant finite
_MAX_RETRIES = 100


def _as_rng(seed) -> np.random.Generator:
    if isinstance(seed, np.random.Generator):
        return seed
    return np.random.default_rng(seed)


def spawn_rng(seed: int, worker: int) -> np.random.Generator:
    """Per-worker stream: documented splitting rule seed + worker index."""
    return np.random.default_rng(seed + worker)


# ---------------------------------------------------------------------------
# Bingham distribution on S^3
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class BinghamParams:
    """Orthogonal frame ``m`` (columns) and concentrations diag(z1, z2, z3, 0).

    z is ascending and non-positive; the last column of ``m`` is the mode
    direction and carries concentration 0.
    """

    m: np.ndarray
    z: np.ndarray

    def __post_init__(self):
        m = np.asarray(self.m, dtype=float)
        z = np.asarray(self.z, dtype=float)
        if m.shape != (4, 4) or np.abs(m.T @ m - np.eye(4)).max() > 1e-9:
            raise DomainError("m must be a 4x4 orthogonal matrix")
        if z.shape != (4,) or z[3] != 0.0 or np.any(np.diff(z) < 0) or np.any(z > 0):
            raise DomainError("z must be ascending, non-positive, with z[3] == 0")
        object.__setattr__(self, "m", m)
        object.__setattr__(self, "z", z)

    def log_density_unnormalized(self, q: np.ndarray) -> np.ndarray:
        """log of exp(q^T M Z M^T q) for quaternions q (4,) or (N, 4)."""
        q = np.atleast_2d(np.asarray(q, dtype=float))
        proj = q @ self.m
        out = (proj * proj) @ self.z
        return out if out.size > 1 else float(out[0])

    def to_dict(self) -> dict:
        return {"m": self.m.tolist(), "z": self.z.tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> "BinghamParams":
        return cls(np.asarray(d["m"], dtype=float), np.asarray(d["z"], dtype=float))


def _saddle_point_log_c(z: np.ndarray) -> float:
    """Saddle-point approximation of the Bingham normalization constant.

    Computes log of the integral of exp(sum z_i u_i^2) over S^3, using the
    saddle-point density approximation (with second-order correction) of the
    norm of a scaled Gaussian vector.
    """
    a = 1.0 - np.asarray(z, dtype=float)  # all >= 1
    a_min = a.min()

    def kp(t):
        return 0.5 * np.sum(1.0 / (a - t)) - 1.0

    hi = a_min - 1e-10
    lo = a_min - 2.0 * len(a)
    while kp(lo) > 0:
        lo = a_min - 2.0 * (a_min - lo)
    t_hat = brentq(kp, lo, hi, xtol=1e-14)

    k0 = -0.5 * np.sum(np.log1p(-t_hat / a))
    k2 = 0.5 * np.sum((a - t_hat) ** -2)
    k3 = np.sum((a - t_hat) ** -3)
    k4 = 3.0 * np.sum((a - t_hat) ** -4)
    rho3 = k3 / k2 ** 1.5
    rho4 = k4 / k2 ** 2
    correction = 1.0 + rho4 / 8.0 - 5.0 * rho3 ** 2 / 24.0
    log_f = k0 - t_hat - 0.5 * np.log(2.0 * np.pi * k2) + np.log(correction)
    return float(1.0 + np.log(2.0) + log_f + 0.5 * np.sum(np.log(np.pi / a)))


@lru_cache(maxsize=4)
def _sphere_grid(nodes: int):
    """Gauss-Legendre tensor grid on S^3 in angular coordinates."""
    x, w = np.polynomial.legendre.leggauss(nodes)
    th = 0.5 * np.pi * (x + 1.0)
    wth = 0.5 * np.pi * w
    ph = np.pi * (x + 1.0)
    wph = np.pi * w
    t1, t2, p = np.meshgrid(th, th, ph, indexing="ij")
    weight = (wth[:, None, None] * wth[None, :, None] * wph[None, None, :]
              * np.sin(t1) ** 2 * np.sin(t2))
    u = np.stack([np.cos(t1),
                  np.sin(t1) * np.cos(t2),
                  np.sin(t1) * np.sin(t2) * np.cos(p),
                  np.sin(t1) * np.sin(t2) * np.sin(p)])
    return u.reshape(4, -1), weight.ravel()


def _bingham_moments_spa(z: np.ndarray) -> np.ndarray:
    """E[u_i^2] as the gradient of the saddle-point log C."""
    h = 1e-5
    out = np.empty(4)
    for i in range(4):
        zp, zm = z.copy(), z.copy()
        zp[i] += h
        zm[i] -= h
        out[i] = (_saddle_point_log_c(zp) - _saddle_point_log_c(zm)) / (2 * h)
    return out


def _bingham_moments(z: np.ndarray, with_jac: bool = False):
    """E[u_i^2] along the frame axes, and optionally d E[u_i^2] / d z_j.

    Moderate concentrations use exact quadrature; beyond -400 the integrand
    is too sharp for the fixed grid and the saddle-point gradient is used.
    """
    if z.min() < -400.0:
        moments = _bingham_moments_spa(z)
        if not with_jac:
            return moments
        jac = np.empty((4, 4))
        h = 1e-4
        for j in range(4):
            zp, zm = z.copy(), z.copy()
            zp[j] += h
            zm[j] -= h
            jac[:, j] = (_bingham_moments_spa(zp) - _bingham_moments_spa(zm)) / (2 * h)
        return moments, jac
    u, w = _sphere_grid(96 if z.min() < -100.0 else 64)
    u2 = u * u
    dens = np.exp(z @ u2) * w
    c = dens.sum()
    moments = u2 @ dens / c
    if not with_jac:
        return moments
    second = (u2 * dens) @ u2.T / c
    return moments, second - np.outer(moments, moments)


def fit_bingham(quaternions) -> BinghamParams:
    """Maximum-likelihood Bingham fit to unit quaternions.

    ``quaternions`` is an (N, 4) array or a list of :class:`Rotation`. The
    frame is the eigenbasis of the antipodally symmetric scatter matrix; the
    concentrations are solved by matching the scatter eigenvalues, clamped
    to [-900, 0].
    """
    if len(quaternions) and isinstance(quaternions[0], Rotation):
        q = np.stack([r.quat for r in quaternions])
    else:
        q = np.asarray(quaternions, dtype=float)
    if q.ndim != 2 or q.shape[1] != 4 or q.shape[0] < 5:
        raise DegenerateFitError("need at least 5 quaternions of shape (N, 4)")
    q = q / np.linalg.norm(q, axis=1, keepdims=True)

    scatter = q.T @ q / q.shape[0]
    evals, evecs = np.linalg.eigh(scatter)  # ascending
    if evals[3] < 1e-12:
        raise DegenerateFitError("rank-deficient quaternion scatter")

    lam = np.clip(evals, 1e-12, None)
    lam = lam / lam.sum()

    def residual(z3):
        z = np.append(z3, 0.0)
        return _bingham_moments(z)[:3] - lam[:3]

    def jacobian(z3):
        z = np.append(z3, 0.0)
        _, jac = _bingham_moments(z, with_jac=True)
        return jac[:3, :3]

    x0 = np.clip(0.5 / lam[3] - 0.5 / lam[:3], Z_CLAMP + 1.0, -1e-3)
    sol = least_squares(residual, x0, jac=jacobian, bounds=(Z_CLAMP, 0.0),
                        xtol=1e-12, ftol=1e-12)
    z = np.append(np.sort(sol.x), 0.0)
    z = np.minimum(z, 0.0)
    m = evecs.copy()
    if np.linalg.det(m) < 0:
        m[:, 0] = -m[:, 0]
    return BinghamParams(m, z)


def sample_bingham(params: BinghamParams, n: int, seed) -> np.ndarray:
    """Exact Bingham sampling by rejection from an angular central Gaussian.

    Returns (n, 4) unit quaternions; deterministic for a fixed seed.
    """
    rng = _as_rng(seed)
    if n == 0:
        return np.zeros((0, 4))
    d = 4
    # B = -M Z M^T is PSD with smallest eigenvalue 0.
    beta = -params.z[::-1]  # descending z -> ascending beta, beta[0] = 0

    def envelope_eq(b):
        return np.sum(1.0 / (b + 2.0 * beta)) - 1.0

    b = brentq(envelope_eq, 1e-12, float(d), xtol=1e-13)
    omega_diag = 1.0 + 2.0 * beta / b  # in the M-frame (reversed column order)
    log_m_star = -(d - b) / 2.0 + (d / 2.0) * np.log(d / b)

    frame = params.m[:, ::-1]  # columns ordered by ascending beta
    out = np.empty((0, 4))
    while out.shape[0] < n:
        chunk = max(2 * (n - out.shape[0]), 256)
        g = rng.standard_normal((chunk, 4))
        u = rng.random(chunk)
        y = g / np.sqrt(omega_diag)
        x = y / np.linalg.norm(y, axis=1, keepdims=True)
        quad_b = (x * x) @ beta
        quad_omega = (x * x) @ omega_diag
        log_accept = -quad_b + (d / 2.0) * np.log(quad_omega) - log_m_star
        accepted = x[np.log(u) < log_accept]
        out = np.vstack([out, accepted @ frame.T])
    return out[:n]


# ---------------------------------------------------------------------------
# Gaussians for translation and focal length
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Gaussian2DParams:
    mean: np.ndarray
    cov: np.ndarray

    def __post_init__(self):
        mean = np.asarray(self.mean, dtype=float)
        cov = np.asarray(self.cov, dtype=float)
        if mean.shape != (2,) or cov.shape != (2, 2):
            raise DomainError("mean must be (2,) and cov (2, 2)")
        try:
            np.linalg.cholesky(cov)
        except np.linalg.LinAlgError:
            raise DomainError("covariance is not positive definite") from None
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "cov", cov)

    def sample(self, n: int, rng: np.random.Generator) -> np.ndarray:
        chol = np.linalg.cholesky(self.cov)
        return self.mean + rng.standard_normal((n, 2)) @ chol.T

    def to_dict(self) -> dict:
        return {"mean": self.mean.tolist(), "cov": self.cov.tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> "Gaussian2DParams":
        return cls(np.asarray(d["mean"], dtype=float), np.asarray(d["cov"], dtype=float))


@dataclass(frozen=True)
class AnnotationRecord:
    """One real-dataset annotation: pose, focal length, image size and bbox."""

    rotation: Rotation
    translation: np.ndarray
    focal: float
    img_wh: tuple[float, float]
    bbox: BBox

    def to_dict(self) -> dict:
        return {
            "quat_wxyz": self.rotation.quat.tolist(),
            "t_m": np.asarray(self.translation, dtype=float).tolist(),
            "f_px": float(self.focal),
            "img_wh": list(self.img_wh),
            "bbox": self.bbox.as_list(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "AnnotationRecord":
        return cls(
            rotation=Rotation(np.asarray(d["quat_wxyz"], dtype=float)),
            translation=np.asarray(d["t_m"], dtype=float),
            focal=float(d["f_px"]),
            img_wh=(float(d["img_wh"][0]), float(d["img_wh"][1])),
            bbox=BBox(*[float(v) for v in d["bbox"]]),
        )


def load_annotations(path: str | Path) -> list[AnnotationRecord]:
    """Read a JSON-lines annotation file; errors carry the line number."""
    records = []
    with open(path) as fh:
        for i, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                records.append(AnnotationRecord.from_dict(json.loads(line)))
            except (json.JSONDecodeError, KeyError, TypeError, DomainError) as exc:
                raise DomainError(f"malformed annotation at line {i}: {exc}") from exc
    return records


def fit_translation_focal(records) -> tuple[Gaussian2DParams, Gaussian2DParams]:
    """Fit the (x, y) and (log z, log f) normals with unbiased covariance."""
    if len(records) < 3:
        raise DegenerateFitError("need at least 3 records")
    t = np.stack([np.asarray(r.translation, dtype=float) for r in records])
    f = np.array([r.focal for r in records])
    if np.any(t[:, 2] <= 0) or np.any(f <= 0):
        raise DegenerateFitError("all depths and focal lengths must be positive")
    xy = t[:, :2]
    zf = np.column_stack([np.log(t[:, 2]), np.log(f)])

    def fit_one(data):
        mean = data.mean(axis=0)
        cov = np.cov(data, rowvar=False, ddof=1)
        try:
            return Gaussian2DParams(mean, cov)
        except DomainError:
            raise DegenerateFitError("singular sample covariance") from None

    return fit_one(xy), fit_one(zf)


def sample_pose_parametric(bingham: BinghamParams, xy: Gaussian2DParams,
                           zf: Gaussian2DParams, n: int, seed) -> list[ParamState]:
    """Draw (rotation, translation, focal) triples from the fitted distributions."""
    rng = _as_rng(seed)
    quats = sample_bingham(bingham, n, rng)
    xy_s = xy.sample(n, rng)
    zf_s = np.exp(zf.sample(n, rng))
    return [ParamState(Rotation(quats[i]),
                       np.array([xy_s[i, 0], xy_s[i, 1], zf_s[i, 0]]),
                       float(zf_s[i, 1]))
            for i in range(n)]


# ---------------------------------------------------------------------------
# Uniform distribution
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class UniformRanges:
    """Ranges for uniform pose/focal sampling; defaults match the car datasets,
    use z_range=(0.8, 2.4) for Pix3D."""

    z_range: tuple[float, float] = (0.8, 3.0)
    f_range: tuple[float, float] = (200.0, 1000.0)
    xy_box: float = 0.15  # side length of the x-y sampling box, meters

    def __post_init__(self):
        if self.z_range[0] <= 0 or self.z_range[0] >= self.z_range[1]:
            raise DomainError("invalid depth range")
        if self.f_range[0] <= 0 or self.f_range[0] >= self.f_range[1]:
            raise DomainError("invalid focal range")


def sample_rotation_uniform(n: int, rng: np.random.Generator) -> np.ndarray:
    """Haar-uniform unit quaternions via the subgroup algorithm (Shoemake)."""
    u1 = rng.random(n)
    u2 = rng.random(n)
    u3 = rng.random(n)
    a, b = np.sqrt(1.0 - u1), np.sqrt(u1)
    return np.column_stack([
        a * np.sin(2 * np.pi * u2),
        a * np.cos(2 * np.pi * u2),
        b * np.sin(2 * np.pi * u3),
        b * np.cos(2 * np.pi * u3),
    ])


def sample_pose_uniform(ranges: UniformRanges, n: int, seed) -> list[ParamState]:
    rng = _as_rng(seed)
    quats = sample_rotation_uniform(n, rng)
    half = ranges.xy_box / 2.0
    xy = rng.uniform(-half, half, size=(n, 2))
    z = rng.uniform(*ranges.z_range, size=n)
    f = rng.uniform(*ranges.f_range, size=n)
    return [ParamState(Rotation(quats[i]), np.array([xy[i, 0], xy[i, 1], z[i]]),
                       float(f[i])) for i in range(n)]


# ---------------------------------------------------------------------------
# Nonparametric distribution
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class NonparamDeltas:
    """Perturbation radii: rotation angle, x-y ellipse, (z, f) ellipse."""

    delta_r: float
    delta_x: float
    delta_y: float
    delta_z: float
    delta_f: float

    def __post_init__(self):
        for name in ("delta_r", "delta_x", "delta_y", "delta_z", "delta_f"):
            if getattr(self, name) < 0:
                raise DomainError(f"{name} must be non-negative")

    def to_dict(self) -> dict:
        return {"delta_r_rad": self.delta_r, "delta_x_m": self.delta_x,
                "delta_y_m": self.delta_y, "delta_z_m": self.delta_z,
                "delta_f_px": self.delta_f}

    @classmethod
    def from_dict(cls, d: dict) -> "NonparamDeltas":
        return cls(float(d["delta_r_rad"]), float(d["delta_x_m"]),
                   float(d["delta_y_m"]), float(d["delta_z_m"]), float(d["delta_f_px"]))


def _nn_percentile(points: np.ndarray, pct: float = 95.0) -> float:
    """Percentile of nearest-neighbor distances, brute force."""
    diff = points[:, None, :] - points[None, :, :]
    dist = np.linalg.norm(diff, axis=-1)
    np.fill_diagonal(dist, np.inf)
    return float(np.percentile(dist.min(axis=1), pct))


def select_deltas_95pct(records) -> NonparamDeltas:
    """95th percentile of nearest-neighbor distances, per coordinate pair.

    The (x, y) and (z, f) planes each yield one Euclidean radius, shared by
    the pair's two axes; rotation uses the geodesic angle.
    """
    if len(records) < 2:
        raise DegenerateFitError("need at least 2 records")
    t = np.stack([np.asarray(r.translation, dtype=float) for r in records])
    f = np.array([r.focal for r in records])
    d_xy = _nn_percentile(t[:, :2])
    d_zf = _nn_percentile(np.column_stack([t[:, 2], f]))

    n = len(records)
    ang = np.zeros((n, n))
    for i in range(n):
        for j in range(i + 1, n):
            ang[i, j] = ang[j, i] = geodesic_distance(records[i].rotation,
                                                      records[j].rotation)
    np.fill_diagonal(ang, np.inf)
    d_r = float(np.percentile(ang.min(axis=1), 95.0))
    return NonparamDeltas(d_r, d_xy, d_xy, d_zf, d_zf)


def _sample_in_ellipse(rng: np.random.Generator, ax: float, ay: float) -> np.ndarray:
    """Uniform point in an axis-aligned ellipse, by rejection from its box."""
    if ax == 0 and ay == 0:
        return np.zeros(2)
    for _ in range(_MAX_RETRIES):
        p = rng.uniform(-1.0, 1.0, size=2)
        if p @ p <= 1.0:
            return p * np.array([ax, ay])
    raise DomainError("ellipse sampling failed to accept a point")


def sample_pose_nonparametric(records, deltas: NonparamDeltas, n: int,
                              seed) -> list[ParamState]:
    """Bootstrap a record and perturb rotation, (x, y), and (z, f)."""
    if not records:
        raise DomainError("no records to sample from")
    rng = _as_rng(seed)
    out = []
    for _ in range(n):
        for _ in range(_MAX_RETRIES):
            rec = records[rng.integers(len(records))]
            axis = rng.standard_normal(3)
            while np.linalg.norm(axis) < 1e-12:
                axis = rng.standard_normal(3)
            angle = rng.uniform(0.0, deltas.delta_r)
            rot = Rotation.from_axis_angle(axis, angle) @ rec.rotation
            dxy = _sample_in_ellipse(rng, deltas.delta_x, deltas.delta_y)
            dzf = _sample_in_ellipse(rng, deltas.delta_z, deltas.delta_f)
            t = np.asarray(rec.translation, dtype=float) + np.array([dxy[0], dxy[1], dzf[0]])
            f = rec.focal + dzf[1]
            if t[2] > 0 and f > 0:
                out.append(ParamState(rot, t, float(f)))
                break
        else:
            raise DomainError("perturbation retries exhausted; deltas too large "
                              "for the dataset")
    return out


# ---------------------------------------------------------------------------
# Refiner input-noise model
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class RefinerNoise:
    """Noise scales applied to a ground-truth state to simulate refiner input.

    ``as_std=True`` reads the focal and Euler figures as standard deviations
    (the default); ``False`` reads them as variances.
    """

    sigma_xy: float = 0.01
    sigma_z: float = 0.05
    focal_scale: float = 0.15
    euler_deg: float = 15.0
    as_std: bool = True

    def focal_sigma(self, focal: float) -> float:
        s = self.focal_scale * focal
        return s if self.as_std else np.sqrt(s)

    def euler_sigma_rad(self) -> float:
        s = self.euler_deg if self.as_std else np.sqrt(self.euler_deg)
        return np.deg2rad(s)


def _euler_xyz(rx: float, ry: float, rz: float) -> Rotation:
    return (Rotation.from_axis_angle([0, 0, 1], rz)
            @ Rotation.from_axis_angle([0, 1, 0], ry)
            @ Rotation.from_axis_angle([1, 0, 0], rx))


def sample_refiner_noise(gt: ParamState, seed,
                         noise: RefinerNoise = RefinerNoise()) -> ParamState:
    """Perturbed copy of a ground-truth state; resamples if f or z go non-positive."""
    rng = _as_rng(seed)
    if noise.sigma_xy == 0 and noise.sigma_z == 0 and noise.focal_scale == 0 \
            and noise.euler_deg == 0:
        return gt
    se = noise.euler_sigma_rad()
    for _ in range(_MAX_RETRIES):
        f = rng.normal(gt.focal, noise.focal_sigma(gt.focal))
        t = gt.translation + np.array([rng.normal(0, noise.sigma_xy),
                                       rng.normal(0, noise.sigma_xy),
                                       rng.normal(0, noise.sigma_z)])
        rot = _euler_xyz(*rng.normal(0.0, se, size=3)) @ gt.rotation
        if f > 0 and t[2] > 0:
            return ParamState(rot, t, float(f))
    raise DomainError("refiner-noise resampling retries exhausted")


# ---------------------------------------------------------------------------
# Fitted-distribution serialization
# ---------------------------------------------------------------------------

def distributions_to_dict(kind: str, *, bingham: BinghamParams | None = None,
                          xy: Gaussian2DParams | None = None,
                          zf: Gaussian2DParams | None = None,
                          deltas: NonparamDeltas | None = None,
                          records=None) -> dict:
    """Single JSON document holding a fitted distribution set."""
    if kind == "parametric":
        return {"kind": kind, "bingham": bingham.to_dict(), "xy": xy.to_dict(),
                "zf": zf.to_dict()}
    if kind == "nonparametric":
        return {"kind": kind, "deltas": deltas.to_dict(),
                "records": [r.to_dict() for r in records]}
    raise DomainError(f"unknown distribution kind {kind!r}")
