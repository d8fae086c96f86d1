"""Closed-form conditional Gaussian-mixture denoiser.

Each prompt channel is a reweighting of a shared isotropic mixture, so the
optimal noise prediction is available in closed form and collapse toward the
dominant mode is an exactly measurable quantity. The mixture posterior under
the variance-preserving forward process x_t = sqrt(ab)*x0 + sqrt(1-ab)*z is

    x_t | k ~ N(sqrt(ab)*m_k, v_t I),   v_t = ab*sigma0^2 + (1 - ab)
    E[x0 | x_t, k] = m_k + (sqrt(ab)*sigma0^2 / v_t) * (x_t - sqrt(ab)*m_k)

with responsibilities computed in log space (mandatory: marginal variances
shrink near the clean end).
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ValidationError
from .guidance import GuidanceConfig, NoisePrediction

UNCOND = "uncond"
TARGET = "target"
ATTRACTOR = "attractor"

_LOG_TINY = -1e30  # stands in for log(0) in channel weights


@dataclass(frozen=True)
class MixtureSpec:
    """Isotropic Gaussian mixture: component means (K, d), weights (K,),
    shared standard deviation sigma0."""

    means: np.ndarray
    weights: np.ndarray
    sigma0: float

    def __post_init__(self):
        means = np.asarray(self.means, dtype=np.float64)
        weights = np.asarray(self.weights, dtype=np.float64)
        if means.ndim != 2 or means.shape[0] < 2:
            raise ValidationError("mixture needs at least 2 components with vector means")
        if not np.all(np.isfinite(means)):
            raise ValidationError("component means must be finite")
        if weights.shape != (means.shape[0],):
            raise ValidationError("weights must match the component count")
        if np.any(weights <= 0) or np.any(weights > 1):
            raise ValidationError("base weights must lie in (0, 1]")
        if abs(float(weights.sum()) - 1.0) > 1e-12:
            raise ValidationError(f"weights must sum to 1, got {weights.sum()!r}")
        if not (self.sigma0 > 0):
            raise ValidationError(f"sigma0 must be positive, got {self.sigma0}")
        object.__setattr__(self, "means", means)
        object.__setattr__(self, "weights", weights)

    @property
    def n_components(self) -> int:
        return self.means.shape[0]

    @property
    def dim(self) -> int:
        return self.means.shape[1]


@dataclass(frozen=True)
class PromptChannel:
    """A conditioning channel: a label plus optional component reweighting.
    Override weights may be zero on some components (a prompt that excludes
    them); without an override the base mixture weights apply."""

    label: str
    weights_override: np.ndarray | None = None

    def __post_init__(self):
        if not self.label:
            raise ValidationError("channel label must be nonempty")
        if self.weights_override is not None:
            w = np.asarray(self.weights_override, dtype=np.float64)
            if np.any(w < 0):
                raise ValidationError("override weights must be non-negative")
            if abs(float(w.sum()) - 1.0) > 1e-12:
                raise ValidationError("override weights must sum to 1")
            object.__setattr__(self, "weights_override", w)

    def weights_for(self, base: MixtureSpec) -> np.ndarray:
        if self.weights_override is None:
            return base.weights
        if self.weights_override.shape != (base.n_components,):
            raise ValidationError("override weights must match the component count")
        return self.weights_override


@dataclass(frozen=True)
class NoiseScheduleSpec:
    """Strictly decreasing alpha-bar sequence in (0, 1], length T."""

    T: int
    alpha_bar: np.ndarray

    def __post_init__(self):
        ab = np.asarray(self.alpha_bar, dtype=np.float64)
        if self.T < 2:
            raise ValidationError(f"T must be >= 2, got {self.T}")
        if ab.shape != (self.T,):
            raise ValidationError("alpha_bar length must equal T")
        if np.any(ab <= 0) or np.any(ab > 1):
            raise ValidationError("alpha_bar values must lie in (0, 1]")
        if np.any(np.diff(ab) >= 0):
            raise ValidationError("alpha_bar must be strictly decreasing")
        object.__setattr__(self, "alpha_bar", ab)


def cosine_schedule(T: int, s: float = 0.008) -> NoiseScheduleSpec:
    """Cosine-like alpha-bar evaluated at interval midpoints so that
    alpha_bar[0] < 1 and alpha_bar[T-1] > 0 strictly."""
    if T < 2:
        raise ValidationError(f"T must be >= 2, got {T}")
    u = (np.arange(T, dtype=np.float64) + 0.5) / T
    f = np.cos((u + s) / (1.0 + s) * np.pi / 2.0) ** 2
    f0 = np.cos((s / (1.0 + s)) * np.pi / 2.0) ** 2
    return NoiseScheduleSpec(T=T, alpha_bar=f / f0)


@dataclass(frozen=True)
class BiasScenario:
    """A mixture with a dominant mode, a rare mode the Target channel prefers,
    and the leakage that models default completion bias.

    The Target channel puts 1-leakage_beta on the rare mode and leakage_beta
    on the dominant one; the Attractor channel puts at least pi_major on the
    dominant mode; the unconditional weight of the dominant mode is pi_major.
    """

    base: MixtureSpec
    dominant_index: int
    rare_index: int
    pi_major: float
    leakage_beta: float
    channels: dict[str, PromptChannel]
    guidance: GuidanceConfig | None = None
    steps: int = 100

    def __post_init__(self):
        k = self.base.n_components
        if not (0 <= self.dominant_index < k and 0 <= self.rare_index < k):
            raise ValidationError("dominant/rare indices out of range")
        if self.dominant_index == self.rare_index:
            raise ValidationError("dominant and rare indices must differ")
        if not (0.5 < self.pi_major < 1.0):
            raise ValidationError(f"pi_major must lie in (0.5, 1), got {self.pi_major}")
        if not (0.0 <= self.leakage_beta < 1.0):
            raise ValidationError(f"leakage_beta must lie in [0, 1), got {self.leakage_beta}")
        if abs(self.base.weights[self.dominant_index] - self.pi_major) > 1e-12:
            raise ValidationError("base weight of the dominant mode must equal pi_major")
        for label in (UNCOND, TARGET, ATTRACTOR):
            if label not in self.channels:
                raise ValidationError(f"scenario must define the '{label}' channel")
        tw = self.channels[TARGET].weights_for(self.base)
        if abs(tw[self.rare_index] - (1.0 - self.leakage_beta)) > 1e-12 or \
                abs(tw[self.dominant_index] - self.leakage_beta) > 1e-12:
            raise ValidationError(
                "Target channel must place 1-leakage_beta on the rare mode and "
                "leakage_beta on the dominant mode")
        aw = self.channels[ATTRACTOR].weights_for(self.base)
        if aw[self.dominant_index] < self.pi_major - 1e-12:
            raise ValidationError(
                "Attractor channel must place at least pi_major on the dominant mode")
        if self.steps < 2:
            raise ValidationError("steps must be >= 2")

    @property
    def dim(self) -> int:
        return self.base.dim

    def channel(self, label: str) -> PromptChannel:
        try:
            return self.channels[label]
        except KeyError:
            raise ValidationError(f"unknown channel label '{label}'") from None


def default_scenario() -> BiasScenario:
    """The shipped desk-scale scenario.

    Three well-separated modes in 2-D: a dominant completion east of the
    noise cloud, the rare target west-north, and a context mode on the path
    toward the dominant one, which is what gives the attractor drift genuine
    (non-collinear) geometry. The guidance preset is calibrated for this
    backend: w=1.5 keeps plain-CFG collapse measurable and the repulsion
    strength/interval compensate for the weak drift-to-update alignment of a
    low-dimensional analytic denoiser.
    """
    base = MixtureSpec(
        means=np.array([[3.8, 0.0], [-2.0, 1.5], [1.5, 0.0]]),
        weights=np.array([0.9, 0.02, 0.08]),
        sigma0=0.33,
    )
    channels = {
        UNCOND: PromptChannel(UNCOND),
        TARGET: PromptChannel(TARGET, np.array([0.35, 0.65, 0.0])),
        ATTRACTOR: PromptChannel(ATTRACTOR, np.array([1.0, 0.0, 0.0])),
    }
    guidance = GuidanceConfig(w=1.5, w_attr=1.45, eta=64.0, gamma=2.0,
                              r_s=0.1, r_e=0.7, eps_stab=1e-8)
    return BiasScenario(base=base, dominant_index=0, rare_index=1,
                        pi_major=0.9, leakage_beta=0.35, channels=channels,
                        guidance=guidance, steps=100)


def _log_weights(weights: np.ndarray) -> np.ndarray:
    out = np.full(weights.shape, _LOG_TINY)
    pos = weights > 0
    out[pos] = np.log(weights[pos])
    return out


def responsibilities(x_t: np.ndarray, t: int, channel: PromptChannel,
                     scenario: BiasScenario, sched: NoiseScheduleSpec) -> np.ndarray:
    """Posterior component responsibilities r_k(x_t), shape (..., K).
    Computed in log space; sums to 1 along the last axis."""
    x = np.asarray(x_t, dtype=np.float64)
    if x.shape[-1] != scenario.dim:
        raise ValidationError(f"x_t last dimension must be {scenario.dim}")
    if not (0 <= t < sched.T):
        raise ValidationError(f"t must lie in [0, {sched.T - 1}], got {t}")
    ab = sched.alpha_bar[t]
    v = ab * scenario.base.sigma0 ** 2 + (1.0 - ab)
    w = channel.weights_for(scenario.base)
    diff = x[..., None, :] - np.sqrt(ab) * scenario.base.means  # (..., K, d)
    logr = _log_weights(w) - np.sum(diff * diff, axis=-1) / (2.0 * v)
    logr = logr - logr.max(axis=-1, keepdims=True)
    r = np.exp(logr)
    return r / r.sum(axis=-1, keepdims=True)


def posterior_mean(x_t: np.ndarray, t: int, channel: PromptChannel,
                   scenario: BiasScenario, sched: NoiseScheduleSpec) -> np.ndarray:
    """Exact E[x0 | x_t] for the channel's mixture; shape matches x_t."""
    x = np.asarray(x_t, dtype=np.float64)
    r = responsibilities(x, t, channel, scenario, sched)
    ab = sched.alpha_bar[t]
    v = ab * scenario.base.sigma0 ** 2 + (1.0 - ab)
    shrink = np.sqrt(ab) * scenario.base.sigma0 ** 2 / v
    diff = x[..., None, :] - np.sqrt(ab) * scenario.base.means
    mhat = scenario.base.means + shrink * diff                  # (..., K, d)
    return np.sum(r[..., None] * mhat, axis=-2)


def epsilon_prediction(x_t: np.ndarray, t: int, channel: PromptChannel,
                       scenario: BiasScenario, sched: NoiseScheduleSpec
                       ) -> NoisePrediction:
    """Exact optimal noise prediction (x_t - sqrt(ab)*E[x0|x_t]) / sqrt(1-ab)."""
    ab = sched.alpha_bar[t]
    if ab >= 1.0:
        raise ValidationError("alpha_bar[t] == 1 leaves no noise to predict")
    x = np.asarray(x_t, dtype=np.float64)
    pm = posterior_mean(x, t, channel, scenario, sched)
    eps = (x - np.sqrt(ab) * pm) / np.sqrt(1.0 - ab)
    return NoisePrediction.from_array(eps)


def forward_noising(x0: np.ndarray, t: int, sched: NoiseScheduleSpec,
                    rng: np.random.Generator) -> np.ndarray:
    """Draw x_t = sqrt(ab)*x0 + sqrt(1-ab)*z with z standard normal."""
    if not (0 <= t < sched.T):
        raise ValidationError(f"t must lie in [0, {sched.T - 1}], got {t}")
    x0 = np.asarray(x0, dtype=np.float64)
    ab = sched.alpha_bar[t]
    return np.sqrt(ab) * x0 + np.sqrt(1.0 - ab) * rng.standard_normal(x0.shape)


def sample_channel(scenario: BiasScenario, label: str, n: int,
                   rng: np.random.Generator) -> np.ndarray:
    """Draw n exact samples from a channel's mixture (test/oracle helper)."""
    w = scenario.channel(label).weights_for(scenario.base)
    ks = rng.choice(scenario.base.n_components, size=n, p=w)
    return scenario.base.means[ks] + scenario.base.sigma0 * rng.standard_normal(
        (n, scenario.dim))


def mode_assignment(x0: np.ndarray, scenario: BiasScenario) -> np.ndarray | int:
    """Index of the nearest component mean; ties break toward the lower index.
    Accepts a single point (returns int) or a batch (..., d)."""
    x = np.asarray(x0, dtype=np.float64)
    if not np.all(np.isfinite(x)):
        raise ValidationError("x0 must be finite")
    single = x.ndim == 1
    d2 = np.sum((x[..., None, :] - scenario.base.means) ** 2, axis=-1)
    idx = np.argmin(d2, axis=-1)
    return int(idx) if single else idx


def save_scenario(scenario: BiasScenario, path) -> None:
    doc = {
        "sigma0": scenario.base.sigma0,
        "means": scenario.base.means.tolist(),
        "weights": scenario.base.weights.tolist(),
        "dominant_index": scenario.dominant_index,
        "rare_index": scenario.rare_index,
        "pi_major": scenario.pi_major,
        "leakage_beta": scenario.leakage_beta,
        "channels": {
            label: (None if ch.weights_override is None else ch.weights_override.tolist())
            for label, ch in scenario.channels.items()
        },
        "steps": scenario.steps,
    }
    if scenario.guidance is not None:
        g = scenario.guidance
        doc["guidance"] = {"w": g.w, "w_attr": g.w_attr, "eta": g.eta,
                           "gamma": g.gamma, "r_s": g.r_s, "r_e": g.r_e,
                           "eps_stab": g.eps_stab}
    Path(path).write_text(json.dumps(doc, indent=2) + "\n", encoding="utf-8")


def load_scenario(path) -> BiasScenario:
    doc = json.loads(Path(path).read_text(encoding="utf-8"))
    base = MixtureSpec(means=np.array(doc["means"], dtype=np.float64),
                       weights=np.array(doc["weights"], dtype=np.float64),
                       sigma0=float(doc["sigma0"]))
    channels = {
        label: PromptChannel(label, None if ov is None else np.array(ov, dtype=np.float64))
        for label, ov in doc["channels"].items()
    }
    guidance = None
    if "guidance" in doc:
        guidance = GuidanceConfig(**doc["guidance"])
    return BiasScenario(base=base,
                        dominant_index=int(doc["dominant_index"]),
                        rare_index=int(doc["rare_index"]),
                        pi_major=float(doc["pi_major"]),
                        leakage_beta=float(doc["leakage_beta"]),
                        channels=channels,
                        guidance=guidance,
                        steps=int(doc.get("steps", 100)))


class ToyDenoiser:
    """Denoiser backend over a BiasScenario: exact, stateless, and safe to
    call from concurrently running trajectories."""

    concurrent_safe = True

    def __init__(self, scenario: BiasScenario, sched: NoiseScheduleSpec | None = None):
        self.scenario = scenario
        self.schedule = sched if sched is not None else cosine_schedule(scenario.steps)
        self.latent_shape = (scenario.dim,)

    def epsilon(self, x_t: np.ndarray, t: int, channel_label: str) -> NoisePrediction:
        channel = self.scenario.channel(channel_label)
        return epsilon_prediction(x_t, t, channel, self.scenario, self.schedule)
