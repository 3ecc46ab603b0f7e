"""Closed-loop refinement with pluggable predictors in place of the network.

A predictor is any callable (state, target, iteration, rng) -> DeltaTheta.
The oracle predictor inverts the update rule exactly; noisy and clamped
variants emulate an imperfect network so the exact and legacy translation
rules can be compared under identical randomness.
"""

from __future__ import annotations

from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import DomainError
from .geometry import (BBox, CameraIntrinsics, ModelPoints, ParamState,
                       Rotation, project_points, rotation_from_6d)
from .metrics import EvalPair, MetricRecord, aggregate, evaluate_pair, lower_median
from .update_rules import DeltaTheta, apply_update, init_state, oracle_delta

VZ_FLOOR = 1e-6  # depth-ratio clamp guarding against depth collapse


@dataclass(frozen=True)
class NoiseScales:
    """Per-component Gaussian noise added to the oracle prediction.

    Defaults mirror the refiner's training input-error scales: 1 cm in x-y
    at 1 m depth and 600 px focal is 6 px, 5 cm depth is 0.05 in log depth,
    15 degrees of rotation, and 0.15 in log focal.
    """

    sigma_x_px: float = 6.0
    sigma_y_px: float = 6.0
    sigma_z_log: float = 0.05
    sigma_rot_deg: float = 15.0
    sigma_f_log: float = 0.15

    def __post_init__(self):
        if min(self.sigma_x_px, self.sigma_y_px, self.sigma_z_log,
               self.sigma_rot_deg, self.sigma_f_log) < 0:
            raise DomainError("noise scales must be non-negative")


@dataclass(frozen=True)
class ClampBounds:
    """Per-step caps, applied in each component's natural space."""

    max_px: float = 20.0
    max_log_depth: float = 0.1
    max_angle_deg: float = 5.0
    max_log_focal: float = 0.05

    def __post_init__(self):
        if min(self.max_px, self.max_log_depth, self.max_angle_deg,
               self.max_log_focal) <= 0:
            raise DomainError("clamp bounds must be positive")


def _rotation_axis_angle(rot: Rotation) -> tuple[np.ndarray, float]:
    w, x, y, z = rot.quat
    vec = np.array([x, y, z])
    norm = np.linalg.norm(vec)
    angle = 2.0 * np.arctan2(norm, abs(w))
    if norm < 1e-15:
        return np.array([1.0, 0.0, 0.0]), 0.0
    return (vec / norm) * np.sign(w if w != 0 else 1.0), angle


@dataclass(frozen=True)
class OraclePredictor:
    """Oracle update, optionally noised and/or clamped.

    With noise, the same number of random draws is consumed per call no
    matter the state, so paired trials with a shared seed see identical
    noise streams.
    """

    noise: NoiseScales | None = None
    clamp: ClampBounds | None = None

    def __call__(self, state: ParamState, target: ParamState, iteration: int,
                 rng: np.random.Generator) -> DeltaTheta:
        delta = oracle_delta(state, target)
        if self.noise is not None:
            delta = self._add_noise(delta, rng)
        if self.clamp is not None:
            delta = self._apply_clamp(delta)
        return delta

    def _add_noise(self, delta: DeltaTheta, rng: np.random.Generator) -> DeltaTheta:
        ns = self.noise
        axis = rng.standard_normal(3)
        axis /= max(np.linalg.norm(axis), 1e-15)
        angle = rng.normal(0.0, np.deg2rad(ns.sigma_rot_deg))
        r_u = Rotation.from_axis_angle(axis, angle) \
            @ rotation_from_6d(delta.v_r1, delta.v_r2)
        mat = r_u.as_matrix()
        return DeltaTheta(
            vx=delta.vx + rng.normal(0.0, ns.sigma_x_px),
            vy=delta.vy + rng.normal(0.0, ns.sigma_y_px),
            vz=delta.vz * float(np.exp(rng.normal(0.0, ns.sigma_z_log))),
            v_r1=mat[:, 0].copy(),
            v_r2=mat[:, 1].copy(),
            vf=delta.vf + rng.normal(0.0, ns.sigma_f_log),
        )

    def _apply_clamp(self, delta: DeltaTheta) -> DeltaTheta:
        cl = self.clamp
        r_u = rotation_from_6d(delta.v_r1, delta.v_r2)
        axis, angle = _rotation_axis_angle(r_u)
        max_angle = np.deg2rad(cl.max_angle_deg)
        if angle > max_angle:
            r_u = Rotation.from_axis_angle(axis, max_angle)
        mat = r_u.as_matrix()
        return DeltaTheta(
            vx=float(np.clip(delta.vx, -cl.max_px, cl.max_px)),
            vy=float(np.clip(delta.vy, -cl.max_px, cl.max_px)),
            vz=float(np.exp(np.clip(np.log(delta.vz),
                                    -cl.max_log_depth, cl.max_log_depth))),
            v_r1=mat[:, 0].copy(),
            v_r2=mat[:, 1].copy(),
            vf=float(np.clip(delta.vf, -cl.max_log_focal, cl.max_log_focal)),
        )


def make_oracle() -> OraclePredictor:
    return OraclePredictor()


def make_noisy_oracle(noise: NoiseScales = NoiseScales()) -> OraclePredictor:
    return OraclePredictor(noise=noise)


def make_clamped_oracle(clamp: ClampBounds = ClampBounds(),
                        noise: NoiseScales | None = None) -> OraclePredictor:
    return OraclePredictor(noise=noise, clamp=clamp)


@dataclass(frozen=True)
class Tolerances:
    e_rot: float = 1e-6
    e_trans: float = 1e-6
    e_focal: float = 1e-6


@dataclass(frozen=True)
class TrialConfig:
    iterations: int = 15
    update_rule: str = "exact"
    predictor: OraclePredictor = field(default_factory=make_oracle)
    seed: int = 0
    tolerances: Tolerances = field(default_factory=Tolerances)

    def __post_init__(self):
        if self.iterations < 1:
            raise DomainError("iteration count must be at least 1")
        if self.update_rule not in ("exact", "legacy"):
            raise DomainError(f"unknown update rule {self.update_rule!r}")


@dataclass(frozen=True)
class TrialResult:
    trajectory: list[MetricRecord]  # length iterations + 1, initial state included
    final_state: ParamState
    converged: bool


def projected_bbox(state: ParamState, points: ModelPoints,
                   intrinsics: CameraIntrinsics) -> BBox:
    """Axis-aligned box around the projected model points."""
    uv = project_points(intrinsics, state.rotation, state.translation, points.points)
    x1, y1 = uv.min(axis=0)
    x2, y2 = uv.max(axis=0)
    if x2 - x1 < 1e-9:
        x2 = x1 + 1e-9
    if y2 - y1 < 1e-9:
        y2 = y1 + 1e-9
    return BBox(x1, y1, x2, y2)


def _measure(state: ParamState, target: ParamState, points: ModelPoints,
             bbox_gt: BBox, img_diag: float,
             intrinsics: CameraIntrinsics) -> MetricRecord:
    try:
        bbox_pred = projected_bbox(state, points, intrinsics)
    except DomainError:
        bbox_pred = None
    return evaluate_pair(EvalPair(pred=state, gt=target, points=points,
                                  bbox_gt=bbox_gt, img_diag=img_diag,
                                  bbox_pred=bbox_pred))


def run_refinement(config: TrialConfig, target: ParamState, bbox: BBox,
                   points: ModelPoints, intrinsics: CameraIntrinsics,
                   img_diag: float) -> TrialResult:
    """Run the refinement loop from the standard initialization.

    The predictor's depth ratio is floored at 1e-6 to prevent depth collapse
    from adversarial predictors. An invalid prediction aborts the trial with
    the iteration index.
    """
    rng = np.random.default_rng(config.seed)
    state = init_state(bbox, intrinsics)
    trajectory = [_measure(state, target, points, bbox, img_diag, intrinsics)]
    legacy = config.update_rule == "legacy"
    for k in range(1, config.iterations + 1):
        try:
            delta = config.predictor(state, target, k, rng)
            if delta.vz < VZ_FLOOR:
                delta = replace(delta, vz=VZ_FLOOR)
            state = apply_update(state, delta, legacy=legacy)
        except DomainError as exc:
            raise DomainError(f"trial aborted at iteration {k}: {exc}") from exc
        trajectory.append(_measure(state, target, points, bbox, img_diag, intrinsics))
    last = trajectory[-1]
    tol = config.tolerances
    converged = (last.e_rot <= tol.e_rot and last.e_trans <= tol.e_trans
                 and last.e_focal <= tol.e_focal)
    return TrialResult(trajectory=trajectory, final_state=state, converged=converged)


def _run_single(args) -> dict:
    """One trial across all update-rule variants with a shared noise stream."""
    (trial_index, target, base_config, variants, points, intrinsics,
     img_diag, seed) = args
    bbox = projected_bbox(target, points, intrinsics)
    out = {}
    for rule in variants:
        config = replace(base_config, update_rule=rule, seed=seed + trial_index)
        out[rule] = run_refinement(config, target, bbox, points, intrinsics, img_diag)
    return out


def run_experiment(targets, base_config: TrialConfig, points: ModelPoints,
                   intrinsics: CameraIntrinsics, img_diag: float,
                   variants=("exact", "legacy"), seed: int = 0,
                   workers: int = 1, keep_trajectories: bool = False) -> dict:
    """Paired campaign over sampled targets.

    Each trial runs every update-rule variant with common random numbers
    (per-trial seed = campaign seed + trial index), so the only difference
    between the arms is the translation rule.
    """
    if not targets:
        raise DomainError("campaign needs at least one target")
    args = [(i, target, base_config, tuple(variants), points, intrinsics,
             img_diag, seed) for i, target in enumerate(targets)]
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_run_single, args, chunksize=8))
    else:
        results = [_run_single(a) for a in args]

    report = {"n_trials": len(targets), "iterations": base_config.iterations,
              "seed": seed, "variants": {}}
    for rule in variants:
        trials = [r[rule] for r in results]
        finals = [t.trajectory[-1] for t in trials]
        per_iter = []
        for k in range(base_config.iterations + 1):
            recs = [t.trajectory[k] for t in trials]
            per_iter.append({
                "iteration": k,
                "median_e_rot": lower_median(r.e_rot for r in recs),
                "median_e_trans": lower_median(r.e_trans for r in recs),
                "median_e_pose": lower_median(r.e_pose for r in recs),
                "median_e_focal": lower_median(r.e_focal for r in recs),
                "median_e_proj": lower_median(r.e_proj for r in recs),
            })
        entry = {
            "summary": aggregate(finals),
            "per_iteration_medians": per_iter,
            "converged_fraction": sum(t.converged for t in trials) / len(trials),
        }
        if keep_trajectories:
            entry["trajectories"] = [
                [rec.to_dict() for rec in t.trajectory] for t in trials
            ]
        report["variants"][rule] = entry
    return report
