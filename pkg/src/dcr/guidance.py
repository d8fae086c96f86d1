"""Three-branch guidance math: CFG update, attractor probe, counterfactual
drift, polynomial activation schedule, and projection-based repulsion.

All operations are pure functions over immutable inputs and work on the
fully flattened latent vector in float64. The per-step pipeline is

    delta_ref = w * (eps_text - eps_uncond)
    eps_probe = eps_uncond + w_attr * (eps_attr - eps_uncond)
    drift     = eps_probe - eps_target        (== the expanded two-branch form)
    s = <drift, delta_ref>,  n = ||drift||^2 + eps_stab
    lambda = alpha * eta * max(s, 0) / n
    delta_star = delta_ref - lambda * drift
    eps_star = eps_uncond + delta_star

Only positive alignment is penalized; with lambda == 0 the corrected update
is bit-identical to the plain CFG update.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ShapeMismatchError, ValidationError


def _as_flat64(values) -> np.ndarray:
    arr = np.asarray(values, dtype=np.float64).reshape(-1)
    if not np.all(np.isfinite(arr)):
        raise ValidationError("latent values must be finite (no NaN/Inf)")
    return arr


@dataclass(frozen=True)
class NoisePrediction:
    """One denoiser branch output: a flattened latent-shaped noise vector."""

    values: np.ndarray
    shape: tuple[int, ...]

    def __post_init__(self):
        object.__setattr__(self, "values", _as_flat64(self.values))
        shape = tuple(int(d) for d in self.shape)
        if any(d <= 0 for d in shape):
            raise ValidationError(f"shape dimensions must be positive: {shape}")
        if int(np.prod(shape)) != self.values.size:
            raise ShapeMismatchError(
                f"shape {shape} does not match {self.values.size} values")
        object.__setattr__(self, "shape", shape)

    @classmethod
    def from_array(cls, arr) -> "NoisePrediction":
        a = np.asarray(arr, dtype=np.float64)
        return cls(values=a.reshape(-1), shape=a.shape)

    def reshape(self) -> np.ndarray:
        return self.values.reshape(self.shape)


@dataclass(frozen=True)
class GuidanceUpdate:
    """A guidance correction vector with the same shape contract as the
    predictions it was built from."""

    values: np.ndarray
    shape: tuple[int, ...]

    def __post_init__(self):
        object.__setattr__(self, "values", _as_flat64(self.values))
        shape = tuple(int(d) for d in self.shape)
        if int(np.prod(shape)) != self.values.size:
            raise ShapeMismatchError(
                f"shape {shape} does not match {self.values.size} values")
        object.__setattr__(self, "shape", shape)


@dataclass(frozen=True)
class GuidanceConfig:
    """All guidance scalars.

    ``w`` has no default on purpose: it is backend-specific and must be set
    by the caller or the scenario preset. The remaining defaults are the
    reference configuration (w_attr=3.0, eta=1.0, gamma=2.0, interval
    [0.2, 0.8], stabilizer 1e-8); analytic-backend presets override them.
    """

    w: float
    w_attr: float = 3.0
    eta: float = 1.0
    gamma: float = 2.0
    r_s: float = 0.2
    r_e: float = 0.8
    eps_stab: float = 1e-8

    def __post_init__(self):
        if not (self.w > 0):
            raise ValidationError(f"w must be positive, got {self.w}")
        if not (0.0 <= self.w_attr < self.w):
            raise ValidationError(
                f"w_attr must satisfy 0 <= w_attr < w, got w_attr={self.w_attr} w={self.w}")
        if self.eta < 0:
            raise ValidationError(f"eta must be non-negative, got {self.eta}")
        if not (self.gamma > 0):
            raise ValidationError(f"gamma must be positive, got {self.gamma}")
        if not (0.0 <= self.r_s <= 1.0 and 0.0 <= self.r_e <= 1.0):
            raise ValidationError(f"r_s, r_e must lie in [0,1], got {self.r_s}, {self.r_e}")
        if not (self.r_s < self.r_e):
            raise ValidationError(f"r_s must be < r_e, got {self.r_s} >= {self.r_e}")
        if not (self.eps_stab > 0):
            raise ValidationError(f"eps_stab must be positive, got {self.eps_stab}")


@dataclass(frozen=True)
class StepPosition:
    """Denoising progress: step index i in [0, total-1], counted from the
    noisiest step."""

    index: int
    total: int

    def __post_init__(self):
        if self.total < 2:
            raise ValidationError(f"total steps must be >= 2, got {self.total}")
        if not (0 <= self.index <= self.total - 1):
            raise ValidationError(
                f"step index must lie in [0, {self.total - 1}], got {self.index}")

    @property
    def progress(self) -> float:
        return self.index / (self.total - 1)


@dataclass(frozen=True)
class RepulsionDiagnostics:
    """Per-step repulsion diagnostics, always computed even when lambda_t=0 so
    ablation and sweep tooling can see the counterfactual alignment signal."""

    s_t: float
    n_t: float
    alpha_t: float
    lambda_t: float
    collinearity_residual: float

    def __post_init__(self):
        if not (self.n_t > 0):
            raise ValidationError(f"n_t must be positive, got {self.n_t}")
        if not (0.0 <= self.alpha_t <= 1.0):
            raise ValidationError(f"alpha_t must lie in [0,1], got {self.alpha_t}")
        if self.lambda_t < 0:
            raise ValidationError(f"lambda_t must be non-negative, got {self.lambda_t}")
        if (self.s_t <= 0 or self.alpha_t == 0.0) and self.lambda_t != 0.0:
            raise ValidationError("lambda_t must be 0 whenever s_t <= 0 or alpha_t == 0")
        if not (0.0 <= self.collinearity_residual <= 1.0):
            raise ValidationError(
                f"collinearity_residual must lie in [0,1], got {self.collinearity_residual}")


def _require_same_shape(*objs) -> tuple[int, ...]:
    shape = objs[0].shape
    for o in objs[1:]:
        if o.shape != shape:
            raise ShapeMismatchError(f"shape mismatch: {o.shape} vs {shape}")
    return shape


def cfg_update(eps_uncond: NoisePrediction, eps_text: NoisePrediction,
               w: float) -> GuidanceUpdate:
    """Classifier-free guidance update w * (eps_text - eps_uncond)."""
    shape = _require_same_shape(eps_uncond, eps_text)
    if not (w > 0):
        raise ValidationError(f"w must be positive, got {w}")
    return GuidanceUpdate(values=w * (eps_text.values - eps_uncond.values), shape=shape)


def target_prediction(eps_uncond: NoisePrediction,
                      delta: GuidanceUpdate) -> NoisePrediction:
    """Guided prediction eps_uncond + delta."""
    shape = _require_same_shape(eps_uncond, delta)
    return NoisePrediction(values=eps_uncond.values + delta.values, shape=shape)


def probe_prediction(eps_uncond: NoisePrediction, eps_attr: NoisePrediction,
                     w_attr: float) -> NoisePrediction:
    """Attractor probe at reduced scale: eps_uncond + w_attr*(eps_attr - eps_uncond)."""
    shape = _require_same_shape(eps_uncond, eps_attr)
    if w_attr < 0:
        raise ValidationError(f"w_attr must be non-negative, got {w_attr}")
    return NoisePrediction(
        values=eps_uncond.values + w_attr * (eps_attr.values - eps_uncond.values),
        shape=shape)


def attractor_drift(eps_probe: NoisePrediction,
                    eps_target: NoisePrediction) -> GuidanceUpdate:
    """Counterfactual drift eps_probe - eps_target (the direction of the pull
    toward the frequent completion)."""
    shape = _require_same_shape(eps_probe, eps_target)
    return GuidanceUpdate(values=eps_probe.values - eps_target.values, shape=shape)


def attractor_drift_expanded(eps_uncond: NoisePrediction, eps_text: NoisePrediction,
                             eps_attr: NoisePrediction, w: float,
                             w_attr: float) -> GuidanceUpdate:
    """Algebraically identical two-branch form of the drift,
    w_attr*(eps_attr - eps_uncond) - w*(eps_text - eps_uncond).

    Numerically preferable inside the full pipeline: the probe-minus-target
    subtraction cancels the shared unconditional term and loses all precision
    once the branch differences shrink below the uncond values' ulp.
    """
    shape = _require_same_shape(eps_uncond, eps_text, eps_attr)
    u = eps_uncond.values
    return GuidanceUpdate(
        values=w_attr * (eps_attr.values - u) - w * (eps_text.values - u),
        shape=shape)


def schedule_alpha(pos: StepPosition, cfg: GuidanceConfig) -> float:
    """Polynomial activation ramp, inclusive on both interval ends.

    pi = i/(T-1); returns 0 outside [r_s, r_e], else
    clip((pi - r_s)/(r_e - r_s), 0, 1) ** gamma.
    """
    pi = pos.progress
    if pi < cfg.r_s or pi > cfg.r_e:
        return 0.0
    pit = (pi - cfg.r_s) / (cfg.r_e - cfg.r_s)
    pit = min(max(pit, 0.0), 1.0)
    return pit ** cfg.gamma


def collinearity_residual(drift: GuidanceUpdate, delta_ref: GuidanceUpdate) -> float:
    """Norm of the drift after removing its projection onto delta_ref, divided
    by the drift norm; 0 when the drift vanishes, 1 when delta_ref vanishes
    while the drift does not."""
    _require_same_shape(drift, delta_ref)
    a = drift.values
    d = delta_ref.values
    na2 = float(a @ a)
    if na2 == 0.0:
        return 0.0
    nd2 = float(d @ d)
    if nd2 == 0.0:
        return 1.0
    coef = float(a @ d) / nd2
    orth = a - coef * d
    res = float(np.sqrt(orth @ orth)) / float(np.sqrt(na2))
    return min(res, 1.0)


def repulsion_coefficient(drift: GuidanceUpdate, delta_ref: GuidanceUpdate,
                          alpha_t: float, cfg: GuidanceConfig) -> RepulsionDiagnostics:
    """Half-rectified projection coefficient and full diagnostics.

    s = <drift, delta_ref>; n = ||drift||^2 + eps_stab;
    lambda = alpha * eta * max(s, 0) / n.
    """
    _require_same_shape(drift, delta_ref)
    if not (0.0 <= alpha_t <= 1.0):
        raise ValidationError(f"alpha_t must lie in [0,1], got {alpha_t}")
    a = drift.values
    d = delta_ref.values
    s_t = float(a @ d)
    n_t = float(a @ a) + cfg.eps_stab
    lambda_t = alpha_t * cfg.eta * max(s_t, 0.0) / n_t
    return RepulsionDiagnostics(
        s_t=s_t,
        n_t=n_t,
        alpha_t=alpha_t,
        lambda_t=lambda_t,
        collinearity_residual=collinearity_residual(drift, delta_ref),
    )


def corrected_update(delta_ref: GuidanceUpdate, lambda_t: float,
                     drift: GuidanceUpdate) -> GuidanceUpdate:
    """delta_ref - lambda * drift; bit-identical passthrough when lambda == 0."""
    shape = _require_same_shape(delta_ref, drift)
    if lambda_t < 0:
        raise ValidationError(f"lambda_t must be non-negative, got {lambda_t}")
    if lambda_t == 0.0:
        return GuidanceUpdate(values=delta_ref.values.copy(), shape=shape)
    return GuidanceUpdate(values=delta_ref.values - lambda_t * drift.values, shape=shape)


def dcr_guided_prediction(eps_uncond: NoisePrediction, eps_text: NoisePrediction,
                          eps_attr: NoisePrediction, pos: StepPosition,
                          cfg: GuidanceConfig
                          ) -> tuple[NoisePrediction, RepulsionDiagnostics]:
    """Full per-step pipeline; returns the corrected prediction and diagnostics.

    The drift is evaluated in the expanded two-branch form (identical to
    probe-minus-target up to rounding) so the diagnostics stay meaningful
    when the conditional branches nearly coincide.
    """
    shape = _require_same_shape(eps_uncond, eps_text, eps_attr)
    delta_ref = cfg_update(eps_uncond, eps_text, cfg.w)
    drift = attractor_drift_expanded(eps_uncond, eps_text, eps_attr, cfg.w, cfg.w_attr)
    alpha_t = schedule_alpha(pos, cfg)
    diag = repulsion_coefficient(drift, delta_ref, alpha_t, cfg)
    delta_star = corrected_update(delta_ref, diag.lambda_t, drift)
    eps_star = NoisePrediction(values=eps_uncond.values + delta_star.values, shape=shape)
    return eps_star, diag
