"""Parameter-regularization methods for continual learning.

Two methods behind one combined-loss contract:

* EWC: quadratic penalty anchoring parameters to the previous task's
  solution, weighted by an estimated Fisher-information diagonal. The
  anchor and importance are replaced wholesale at every task boundary.
* SI: per-parameter importance accumulated online from each step's
  contribution to task-loss reduction, consolidated with displacement
  normalization and damping at task boundaries. Importance accumulates
  across all completed tasks.

The combined loss is always ``task_loss + penalty_weight * sum(importance
* (theta - anchor)^2)`` with the per-method weight convention captured in
RegularizedLoss.penalty_weight. Strength zero short-circuits to the plain
task loss bit-for-bit.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .errors import ConfigurationError, NumericalError, ShapeError
from .mlp import (
    FrameBatch,
    Network,
    ParamVector,
    _affine_layers,
    _forward_pass,
    _log_softmax,
    loss_and_grad,
    pack_segments,
)

FISHER_MODES = ("unweighted", "model_weighted")
METHODS = ("none", "ewc", "si")

_FISHER_CHUNK = 256  # samples per block when expanding per-class gradients


@dataclass(frozen=True)
class FisherConfig:
    """How to estimate the Fisher diagonal: class weighting, sample count, seed.

    ``unweighted`` sums squared log-probability gradients over every class;
    ``model_weighted`` weights each class by its predicted probability (the
    true Fisher diagonal under the model distribution).
    """

    mode: str = "unweighted"
    n_samples: int = 2000
    seed: int = 0

    def __post_init__(self) -> None:
        if self.mode not in FISHER_MODES:
            raise ConfigurationError(
                f"fisher mode must be one of {FISHER_MODES}, got {self.mode!r}"
            )
        if int(self.n_samples) < 1:
            raise ConfigurationError(
                f"fisher n_samples must be positive, got {self.n_samples}"
            )
        if not 0 <= int(self.seed) < 2**64:
            raise ConfigurationError(f"seed must fit in unsigned 64 bits, got {self.seed}")


@dataclass(frozen=True)
class EwcState:
    """Anchor parameters, Fisher-diagonal importance, and strength for EWC."""

    anchor_params: ParamVector
    importance: ParamVector
    strength: float

    def __post_init__(self) -> None:
        if not self.anchor_params.same_layout(self.importance):
            raise ShapeError("EWC anchor and importance layouts differ")
        if (self.importance.values < 0).any():
            raise NumericalError("EWC importance entries must be non-negative")
        if self.strength < 0:
            raise ConfigurationError(f"strength must be non-negative, got {self.strength}")


@dataclass(frozen=True)
class SiState:
    """Running path contributions plus consolidated importance for SI.

    path_contrib accumulates each parameter's share of task-loss reduction
    during the current task; importance holds the damped, displacement-
    normalized sum over all completed tasks (entries may be negative and
    are clamped to zero only inside the penalty).
    """

    path_contrib: ParamVector
    importance: ParamVector
    anchor_params: ParamVector
    task_start_params: ParamVector
    strength: float
    damping: float = 1e-3

    def __post_init__(self) -> None:
        for name, vec in (
            ("importance", self.importance),
            ("anchor_params", self.anchor_params),
            ("task_start_params", self.task_start_params),
        ):
            if not self.path_contrib.same_layout(vec):
                raise ShapeError(f"SI path_contrib and {name} layouts differ")
        if self.strength < 0:
            raise ConfigurationError(f"strength must be non-negative, got {self.strength}")
        if not self.damping > 0:
            raise ConfigurationError(f"damping must be positive, got {self.damping}")


@dataclass(frozen=True)
class RegularizedLoss:
    """Combined loss breakdown: total = task_loss + penalty."""

    total: float
    task_loss: float
    penalty: float
    penalty_weight: float


def si_init(params: ParamVector, strength: float, damping: float = 1e-3) -> SiState:
    """Fresh SI state anchored at the given parameters with zero importance."""
    zeros = params.zeros_like()
    return SiState(
        path_contrib=zeros,
        importance=zeros,
        anchor_params=params,
        task_start_params=params,
        strength=strength,
        damping=damping,
    )


def estimate_fisher_diag(net: Network, data: FrameBatch, cfg: FisherConfig) -> ParamVector:
    """Per-parameter Fisher diagonal estimated over sampled frames.

    Per sample i and class k the squared gradient of log p_k with respect
    to an affine layer is rank-1 (outer product of layer input and logit
    delta), so summed squares reduce to (H*H)^T (D*D) without ever
    materializing per-parameter per-sample gradients.
    """

    if cfg.n_samples > data.n_frames:
        raise ConfigurationError(
            f"fisher n_samples {cfg.n_samples} exceeds available frames {data.n_frames}"
        )
    rng = np.random.default_rng(cfg.seed)
    if cfg.n_samples < data.n_frames:
        idx = rng.choice(data.n_frames, size=cfg.n_samples, replace=False)
        features = data.features[np.sort(idx)]
    else:
        features = data.features

    layers = _affine_layers(net)
    act = net.config.activation
    n_classes = net.config.n_classes
    sq_w = [np.zeros_like(w) for w, _ in layers]
    sq_b = [np.zeros_like(b) for _, b in layers]
    eye = np.eye(n_classes)

    for start in range(0, features.shape[0], _FISHER_CHUNK):
        chunk = features[start : start + _FISHER_CHUNK]
        hidden, logits = _forward_pass(net, chunk)
        probs = np.exp(_log_softmax(logits))
        n = chunk.shape[0]
        # rows enumerate (sample, class): d log p_k / d logits = e_k - p
        delta = np.tile(eye, (n, 1)) - np.repeat(probs, n_classes, axis=0)
        if cfg.mode == "model_weighted":
            delta = delta * np.sqrt(probs.reshape(-1))[:, None]
        if not np.isfinite(delta).all():
            raise NumericalError("non-finite log-probability gradients in fisher estimate")
        for idx_l in range(len(layers) - 1, -1, -1):
            w, _ = layers[idx_l]
            h_rep = np.repeat(hidden[idx_l], n_classes, axis=0)
            d2 = delta * delta
            sq_w[idx_l] += (h_rep * h_rep).T @ d2
            sq_b[idx_l] += d2.sum(axis=0)
            if idx_l > 0:
                dh = delta @ w.T
                if act == "tanh":
                    delta = dh * (1.0 - h_rep * h_rep)
                else:
                    delta = dh * (h_rep > 0.0)

    n_samples = features.shape[0]
    arrays = {}
    for i in range(len(layers)):
        arrays[f"w{i + 1}"] = sq_w[i] / n_samples
        arrays[f"b{i + 1}"] = sq_b[i] / n_samples
    return pack_segments(arrays, net.params.layout)


def ewc_refresh(
    net: Network, data: FrameBatch, cfg: FisherConfig, strength: float
) -> EwcState:
    """New EWC state anchored at the current parameters: single-anchor semantics."""
    importance = estimate_fisher_diag(net, data, cfg)
    return EwcState(anchor_params=net.params, importance=importance, strength=strength)


def ewc_penalty(theta: ParamVector, state: EwcState) -> tuple[float, ParamVector]:
    """Penalty (strength/2) * sum(importance * (theta - anchor)^2) and its gradient."""
    if not theta.same_layout(state.anchor_params):
        raise ShapeError("theta layout does not match EWC state")
    diff = theta.values - state.anchor_params.values
    imp = state.importance.values
    penalty = 0.5 * state.strength * float(imp @ (diff * diff))
    grad = state.strength * imp * diff
    return penalty, theta.with_values(grad)


def si_begin_task(state: SiState, theta: ParamVector) -> SiState:
    """Start a new task segment: zero the running contributions, mark the start point."""
    if not theta.same_layout(state.path_contrib):
        raise ShapeError("theta layout does not match SI state")
    return replace(state, path_contrib=theta.zeros_like(), task_start_params=theta)


def si_accumulate(
    state: SiState, grad_before_step: ParamVector, delta: ParamVector
) -> SiState:
    """Credit each parameter with -grad * delta, its share of task-loss reduction.

    grad_before_step must be the task-loss gradient (penalty excluded)
    evaluated at the pre-step parameters; delta is the applied change.
    """
    if not grad_before_step.same_layout(state.path_contrib) or not delta.same_layout(
        state.path_contrib
    ):
        raise ShapeError("gradient/delta layout does not match SI state")
    updated = state.path_contrib.values - grad_before_step.values * delta.values
    return replace(state, path_contrib=state.path_contrib.with_values(updated))


def si_consolidate(state: SiState, theta_end: ParamVector) -> SiState:
    """Fold the task's contributions into importance, normalized by displacement.

    importance += path_contrib / ((theta_end - task_start)^2 + damping);
    the anchor moves to theta_end and the running contributions reset.
    """
    if not theta_end.same_layout(state.path_contrib):
        raise ShapeError("theta layout does not match SI state")
    disp = theta_end.values - state.task_start_params.values
    increment = state.path_contrib.values / (disp * disp + state.damping)
    new_importance = state.importance.values + increment
    return replace(
        state,
        importance=state.importance.with_values(new_importance),
        anchor_params=theta_end,
        path_contrib=theta_end.zeros_like(),
    )


def si_penalty(theta: ParamVector, state: SiState) -> tuple[float, ParamVector]:
    """Penalty strength * sum(importance_+ * (theta - anchor)^2) and its gradient.

    Negative importance entries are clamped to zero here (and only here) so
    the penalty stays a positive-semidefinite quadratic.
    """
    if not theta.same_layout(state.anchor_params):
        raise ShapeError("theta layout does not match SI state")
    imp = np.maximum(state.importance.values, 0.0)
    diff = theta.values - state.anchor_params.values
    penalty = state.strength * float(imp @ (diff * diff))
    grad = 2.0 * state.strength * imp * diff
    return penalty, theta.with_values(grad)


def regularized_loss_and_grad(
    net: Network,
    batch: FrameBatch,
    method: str,
    state: EwcState | SiState | None = None,
) -> tuple[RegularizedLoss, ParamVector]:
    """Task loss plus the active method's penalty, with the summed gradient.

    Method "none", or an active method with strength exactly zero, returns
    results bit-identical to the plain task loss and gradient.
    """
    if method not in METHODS:
        raise ConfigurationError(f"method must be one of {METHODS}, got {method!r}")
    if method == "none":
        if state is not None:
            raise ConfigurationError("method 'none' takes no regularizer state")
        task_loss, grad = loss_and_grad(net, batch)
        return RegularizedLoss(task_loss, task_loss, 0.0, 0.0), grad

    if method == "ewc":
        if not isinstance(state, EwcState):
            raise ConfigurationError("method 'ewc' requires an EwcState")
        penalty_weight = 0.5 * state.strength
    else:
        if not isinstance(state, SiState):
            raise ConfigurationError("method 'si' requires an SiState")
        penalty_weight = state.strength

    task_loss, task_grad = loss_and_grad(net, batch)
    if state.strength == 0.0:
        return RegularizedLoss(task_loss, task_loss, 0.0, 0.0), task_grad

    if method == "ewc":
        penalty, pgrad = ewc_penalty(net.params, state)
    else:
        penalty, pgrad = si_penalty(net.params, state)
    total = task_loss + penalty
    grad = task_grad.with_values(task_grad.values + pgrad.values)
    return RegularizedLoss(total, task_loss, penalty, penalty_weight), grad
