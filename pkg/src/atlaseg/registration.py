"""Per-pair registration: first-order descent on the composite loss.

One atlas-target pair is aligned by optimizing a dense displacement field
directly with Adam, coarse to fine over a bilinear image pyramid. The
field starts at zero on the coarsest level and is upsampled (values
scaled by 2) between levels. Within a level the best-seen field by total
loss is kept, and the returned field is guaranteed not to be worse than
the zero field on the full-resolution problem.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field as dc_field

import numpy as np

from .errors import DimensionMismatch, InvalidParams, NonFiniteLoss
from .grid import DisplacementField, Image2D, LabelMap2D, _resize_array, resize, resize_label
from .losses import LossBreakdown, LossWeights, _total_loss_and_gradient

CONVERGENCE_WINDOW = 10
MIN_LEVEL_SIZE = 8


@dataclass(frozen=True)
class RegistrationConfig:
    weights: LossWeights = dc_field(default_factory=LossWeights)
    learning_rate: float = 0.05
    max_iters: int = 300
    pyramid_levels: int = 3
    convergence_tol: float = 1e-5
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    seed: int = 0

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise InvalidParams("learning_rate must be positive")
        if self.max_iters < 1:
            raise InvalidParams("max_iters must be at least 1")
        if self.pyramid_levels < 1:
            raise InvalidParams("pyramid_levels must be at least 1")
        if self.convergence_tol <= 0:
            raise InvalidParams("convergence_tol must be positive")
        if not (0 <= self.adam_beta1 < 1 and 0 <= self.adam_beta2 < 1):
            raise InvalidParams("adam betas must lie in [0, 1)")
        if self.adam_eps <= 0:
            raise InvalidParams("adam_eps must be positive")

    def to_json_dict(self) -> dict:
        return {
            "weights": {
                "alpha": self.weights.alpha,
                "beta": self.weights.beta,
                "gamma": self.weights.gamma,
            },
            "learning_rate": self.learning_rate,
            "max_iters": self.max_iters,
            "pyramid_levels": self.pyramid_levels,
            "convergence_tol": self.convergence_tol,
            "adam_beta1": self.adam_beta1,
            "adam_beta2": self.adam_beta2,
            "adam_eps": self.adam_eps,
            "seed": self.seed,
        }

    @classmethod
    def from_json_dict(cls, doc: dict) -> "RegistrationConfig":
        doc = dict(doc)
        weights = doc.pop("weights", None)
        kwargs = {}
        if weights is not None:
            kwargs["weights"] = LossWeights(**weights)
        known = {
            "learning_rate", "max_iters", "pyramid_levels", "convergence_tol",
            "adam_beta1", "adam_beta2", "adam_eps", "seed",
        }
        unknown = set(doc) - known
        if unknown:
            raise InvalidParams(f"unknown registration config keys: {sorted(unknown)}")
        kwargs.update(doc)
        return cls(**kwargs)


@dataclass(frozen=True)
class RegistrationResult:
    field: DisplacementField
    loss_trace: tuple
    converged: bool
    level_starts: tuple = ()

    def __post_init__(self):
        if len(self.loss_trace) == 0:
            raise InvalidParams("loss trace must not be empty")


def _pyramid_dims(w: int, h: int, levels: int):
    """Coarse-to-fine (w, h) per level; factor 2 between levels."""
    dims = []
    for lvl in range(levels):
        scale = 2 ** (levels - 1 - lvl)
        dims.append((max(2, -(-w // scale)), max(2, -(-h // scale))))
    return dims


def _upsample_field(dx, dy, w, h):
    return _resize_array(dx, w, h) * 2.0, _resize_array(dy, w, h) * 2.0


class _Adam:
    def __init__(self, shape, cfg: RegistrationConfig, lr: float):
        self.m = [np.zeros(shape), np.zeros(shape)]
        self.v = [np.zeros(shape), np.zeros(shape)]
        self.t = 0
        self.lr = lr
        self.b1 = cfg.adam_beta1
        self.b2 = cfg.adam_beta2
        self.eps = cfg.adam_eps

    def step(self, params, grads):
        self.t += 1
        out = []
        for i, (p, g) in enumerate(zip(params, grads)):
            self.m[i] = self.b1 * self.m[i] + (1.0 - self.b1) * g
            self.v[i] = self.b2 * self.v[i] + (1.0 - self.b2) * (g * g)
            m_hat = self.m[i] / (1.0 - self.b1**self.t)
            v_hat = self.v[i] / (1.0 - self.b2**self.t)
            out.append(p - self.lr * m_hat / (np.sqrt(v_hat) + self.eps))
        return out


def _optimize_level(inputs, dx, dy, cfg: RegistrationConfig, lr: float, trace: list):
    """Adam descent at one pyramid level.

    Returns (best_dx, best_dy, early_stopped). Raises _LevelDiverged when
    the total goes non-finite so the caller can retry at a lower rate.
    """
    atlas_img, atlas_lbl, tgt_img, tgt_lbl = inputs
    adam = _Adam(dx.shape, cfg, lr)
    best = (np.inf, dx, dy)
    totals = []
    early = False
    for _ in range(cfg.max_iters):
        # divergence shows up as overflow before the non-finite guard fires
        with np.errstate(over="ignore", invalid="ignore"):
            breakdown, gdx, gdy = _total_loss_and_gradient(
                atlas_img, atlas_lbl, tgt_img, tgt_lbl,
                DisplacementField(dx, dy), cfg.weights,
            )
        if not np.isfinite(breakdown.total):
            raise _LevelDiverged(trace)
        trace.append(breakdown)
        totals.append(breakdown.total)
        if breakdown.total < best[0]:
            best = (breakdown.total, dx, dy)
        if len(totals) > CONVERGENCE_WINDOW:
            prev = totals[-1 - CONVERGENCE_WINDOW]
            if prev - totals[-1] < cfg.convergence_tol * abs(prev):
                early = True
                break
        dx, dy = adam.step((dx, dy), (gdx, gdy))
    return best[1], best[2], early


class _LevelDiverged(Exception):
    def __init__(self, trace):
        self.trace = trace


def register_pair(
    atlas_img: Image2D,
    atlas_lbl: LabelMap2D | None,
    tgt_img: Image2D,
    tgt_lbl: LabelMap2D | None,
    cfg: RegistrationConfig,
) -> RegistrationResult:
    """Minimize the composite loss over the field for one pair.

    Label constrained when both labels are given; with either label absent
    the dice term is dropped (test-time registration).
    """
    for other in (atlas_lbl, tgt_img, tgt_lbl):
        if other is not None and other.shape != atlas_img.shape:
            raise DimensionMismatch(
                f"input dims differ: {other.shape} vs {atlas_img.shape}"
            )
    h, w = atlas_img.shape
    dims = _pyramid_dims(w, h, cfg.pyramid_levels)
    cw, ch = dims[0]
    if cw < MIN_LEVEL_SIZE or ch < MIN_LEVEL_SIZE:
        raise InvalidParams(
            f"coarsest pyramid level {cw}x{ch} is below "
            f"{MIN_LEVEL_SIZE}x{MIN_LEVEL_SIZE}; reduce pyramid_levels"
        )
    use_labels = atlas_lbl is not None and tgt_lbl is not None

    zero = DisplacementField.zero(w, h)
    baseline, _, _ = _total_loss_and_gradient(
        atlas_img, atlas_lbl if use_labels else None,
        tgt_img, tgt_lbl if use_labels else None, zero, cfg.weights,
    )
    trace: list[LossBreakdown] = [baseline]
    level_starts = []

    dx = dy = None
    finest_early = False
    for lw, lh in dims:
        if (lw, lh) == (w, h):
            level_inputs = (
                atlas_img, atlas_lbl if use_labels else None,
                tgt_img, tgt_lbl if use_labels else None,
            )
        else:
            level_inputs = (
                resize(atlas_img, lw, lh),
                resize_label(atlas_lbl, lw, lh) if use_labels else None,
                resize(tgt_img, lw, lh),
                resize_label(tgt_lbl, lw, lh) if use_labels else None,
            )
        if dx is None:
            dx = np.zeros((lh, lw))
            dy = np.zeros((lh, lw))
        else:
            dx, dy = _upsample_field(dx, dy, lw, lh)
        start = len(trace)
        level_starts.append(start)
        lr = cfg.learning_rate
        for attempt in range(2):
            try:
                # On _LevelDiverged dx/dy keep this level's initial field,
                # so the retry restarts the level at the halved rate.
                dx, dy, early = _optimize_level(level_inputs, dx, dy, cfg, lr, trace)
                break
            except _LevelDiverged:
                if attempt == 1:
                    raise NonFiniteLoss(
                        "registration diverged twice at one level", trace=trace
                    )
                lr *= 0.5
                del trace[start:]
        finest_early = early

    final_field = DisplacementField(dx, dy)
    final, _, _ = _total_loss_and_gradient(
        atlas_img, atlas_lbl if use_labels else None,
        tgt_img, tgt_lbl if use_labels else None, final_field, cfg.weights,
    )
    if final.total > baseline.total:
        final_field = zero
        final = baseline
    trace.append(final)
    return RegistrationResult(
        field=final_field,
        loss_trace=tuple(trace),
        converged=finest_early,
        level_starts=tuple(level_starts),
    )


def register_to_test(
    atlas_img: Image2D, tgt_img: Image2D, cfg: RegistrationConfig
) -> RegistrationResult:
    """Test-time registration: the target label is unknown, dice dropped."""
    return register_pair(atlas_img, None, tgt_img, None, cfg)


def load_config(path) -> RegistrationConfig:
    with open(path) as f:
        return RegistrationConfig.from_json_dict(json.load(f))
