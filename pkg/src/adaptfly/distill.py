"""Cross-format knowledge consolidation: sparse prompt to token prompt.

A sparse visual prompt optimized on one agent's frames is converted into a
token prompt by minimizing the squared discrepancy between encoder
features of the prompt-prefixed token sequence (student) and features of
the pixel-corrected image (teacher), averaged over a handful of frames
from the same domain window.

On the affine toy encoder the objective is an exact least-squares problem:
a closed-form minimizer computed from the normal equations serves as the
verification oracle for the iterative minimizer. Opaque oracles fall back
to central finite differences.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, DistillError
from .prompts import SparseVisualPrompt, TokenPrompt, apply_svp, compose_tokens

__all__ = [
    "DistillConfig",
    "teacher_features",
    "distill_objective",
    "distill_iterative",
    "distill_closed_form",
    "closed_form_solution",
    "entry_size_bytes",
    "prompt_data_bytes",
    "METADATA_OVERHEAD_BYTES",
]

TIKHONOV_DAMPING = 1e-8
FD_STEP = 1e-4

# Fixed serialized-entry overhead besides the raw prompt matrix: entry id,
# timestamp and last-retrieved step (8 bytes each), rows, dim, dtype code
# and flags (4 bytes each).
METADATA_OVERHEAD_BYTES = 40

_BYTES_PER_VALUE = {"f32": 4, "f16": 2}


@dataclass(frozen=True)
class DistillConfig:
    """Distillation knobs.

    ``step_size`` of None selects an exact line search on the analytic
    path (the objective there is quadratic) and a backtracking search with
    initial step 1e-4 on the finite-difference path. ``frames`` caps how
    many frames of the domain window contribute to the averaged objective.
    """

    rows: int = 8
    steps: int = 8
    step_size: float | None = None
    frames: int = 5
    precision: str = "f16"

    def __post_init__(self):
        if self.rows < 1:
            raise ConfigError("token prompt needs at least one row")
        if self.steps < 1:
            raise ConfigError("distillation needs at least one step")
        if self.frames < 1:
            raise ConfigError("distillation needs at least one frame")
        if self.precision not in _BYTES_PER_VALUE:
            raise ConfigError(f"precision must be one of {sorted(_BYTES_PER_VALUE)}")
        if self.step_size is not None and self.step_size <= 0:
            raise ConfigError("step size must be positive")


def teacher_features(oracle, x: np.ndarray, svp: SparseVisualPrompt) -> np.ndarray:
    """Encoder features of the pixel-corrected frame. Pure and stateless."""
    return oracle.encode_image(apply_svp(x, svp))


def _student_features(oracle, x: np.ndarray, values: np.ndarray) -> np.ndarray:
    return oracle.encode_tokens(compose_tokens(TokenPrompt(values), oracle.tokenize(x)))


def distill_objective(
    oracle, frames: list[np.ndarray], svp: SparseVisualPrompt, values: np.ndarray
) -> float:
    """Mean squared feature discrepancy of a candidate prompt over frames."""
    total = 0.0
    for x in frames:
        diff = _student_features(oracle, x, values) - teacher_features(oracle, x, svp)
        total += float(np.sum(diff**2))
    value = total / len(frames)
    if not math.isfinite(value):
        raise DistillError("distillation objective is non-finite")
    return value


def _affine_maps(oracle, rows: int):
    """(mix, projection) when the oracle exposes its affine prompt path."""
    if hasattr(oracle, "prompt_mix") and hasattr(oracle, "feature_projection"):
        return oracle.prompt_mix(rows), np.asarray(oracle.feature_projection)
    return None


def _mean_gap(oracle, frames, svp, projection) -> np.ndarray:
    """Mean of (teacher - unprompted student) feature gaps across frames."""
    gaps = [
        teacher_features(oracle, x, svp) - oracle.tokenize(x) @ projection
        for x in frames
    ]
    return np.mean(gaps, axis=0)


def distill_iterative(
    oracle, frames: list[np.ndarray], svp: SparseVisualPrompt, config: DistillConfig
) -> TokenPrompt:
    """Gradient-descent distillation starting from the all-zero prompt.

    Runs ``config.steps`` descent iterations on the frame-averaged
    objective. The gradient is analytic when the oracle exposes its affine
    prompt maps and central finite differences otherwise; in both cases
    the objective is non-increasing per step. Returns the prompt in the
    configured storage precision.
    """
    frames = list(frames)[: config.frames]
    if not frames:
        raise ConfigError("distillation needs at least one frame")
    dim = oracle.tokenize(frames[0]).shape[1]
    values = np.zeros((config.rows, dim))

    maps = _affine_maps(oracle, config.rows)
    if maps is not None:
        mix, projection = maps
        gap = _mean_gap(oracle, frames, svp, projection)
        for _ in range(config.steps):
            residual = mix @ values @ projection - gap
            grad = 2.0 * mix.T @ residual @ projection.T
            curv = 2.0 * float(np.sum((mix @ grad @ projection) ** 2))
            if curv <= 0.0:
                break
            if config.step_size is None:
                step = float(np.sum(grad**2)) / curv
            else:
                step = config.step_size
            values = values - step * grad
        distill_objective(oracle, frames, svp, values)  # finiteness check
        return TokenPrompt(values, dtype=config.precision)

    # Opaque path: numerical gradient, backtracking keeps descent monotone.
    current = distill_objective(oracle, frames, svp, values)
    step0 = config.step_size if config.step_size is not None else FD_STEP
    for _ in range(config.steps):
        grad = np.zeros_like(values)
        for idx in np.ndindex(values.shape):
            probe = values.copy()
            probe[idx] += FD_STEP
            hi = distill_objective(oracle, frames, svp, probe)
            probe[idx] -= 2 * FD_STEP
            lo = distill_objective(oracle, frames, svp, probe)
            grad[idx] = (hi - lo) / (2 * FD_STEP)
        step = step0
        for _ in range(30):
            trial = values - step * grad
            candidate = distill_objective(oracle, frames, svp, trial)
            if candidate <= current:
                values, current = trial, candidate
                break
            step /= 2.0
        else:
            break
    return TokenPrompt(values, dtype=config.precision)


def closed_form_solution(
    oracle, frames: list[np.ndarray], svp: SparseVisualPrompt, rows: int
) -> np.ndarray:
    """Exact damped least-squares minimizer of the distillation objective.

    Solves the normal equations of the affine objective with Tikhonov
    damping, so rank deficiency never fails. Full float64 precision.
    """
    frames = list(frames)
    maps = _affine_maps(oracle, rows)
    if maps is None:
        raise ConfigError("closed-form distillation needs an affine oracle")
    mix, projection = maps
    gap = _mean_gap(oracle, frames, svp, projection)
    lhs_rows = mix.T @ mix + TIKHONOV_DAMPING * np.eye(rows)
    lhs_cols = projection @ projection.T + TIKHONOV_DAMPING * np.eye(projection.shape[0])
    rhs = mix.T @ gap @ projection.T
    return np.linalg.solve(lhs_rows, np.linalg.solve(lhs_cols.T, rhs.T).T)


def distill_closed_form(
    oracle,
    frames: list[np.ndarray],
    svp: SparseVisualPrompt,
    rows: int,
    precision: str = "f32",
) -> TokenPrompt:
    """Closed-form counterpart of distill_iterative (verification oracle)."""
    return TokenPrompt(closed_form_solution(oracle, frames, svp, rows), dtype=precision)


def prompt_data_bytes(prompt: TokenPrompt, precision: str | None = None) -> int:
    """Raw matrix payload size at the given (or stored) precision."""
    precision = precision or prompt.dtype
    if precision not in _BYTES_PER_VALUE:
        raise ConfigError(f"precision must be one of {sorted(_BYTES_PER_VALUE)}")
    return prompt.rows * prompt.dim * _BYTES_PER_VALUE[precision]


def entry_size_bytes(prompt: TokenPrompt, precision: str | None = None) -> int:
    """Serialized pool-entry size: matrix payload plus fixed metadata."""
    return prompt_data_bytes(prompt, precision) + METADATA_OVERHEAD_BYTES
