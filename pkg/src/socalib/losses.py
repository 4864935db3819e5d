"""Training losses for classifiers with an explicit unknown option.

The centerpiece is the Socrates loss, a focal-style objective over c real
classes plus one reserved "I don't know" (idk) class at the last index.
Per sample with ground-truth probability p_gt, idk probability p_idk,
adaptive target t and unknown-penalty weight beta:

    L = -(1 - p_gt)^gamma * [ t * ln p_gt + beta * (1 - t) * ln p_idk ]

averaged over the batch. Natural logarithms throughout. beta and t are
treated as constants by the gradient (beta optionally not, see
``SocratesConfig.beta_backprop``); the gradient flows through the focal
factor and both log terms via the softmax Jacobian.

The module also provides the plain baselines (cross-entropy, focal, FLSD,
Brier), a no-focal adaptive-target loss (``sat_loss_grad``), and the named
ablation family that switches individual ingredients off. Several ablations
collapse onto the simpler losses exactly; the arithmetic here is arranged so
those reductions hold bit for bit, not merely to rounding. Keep the
operation order in the shared assembly expressions in sync across
``socrates_loss_grad``, ``sat_loss_grad`` and the baselines when editing.

Probabilities are clamped to [PROB_EPS, 1] before any logarithm, so every
loss value is finite for any finite logits.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field

import numpy as np

PROB_EPS = 1e-12

BETA_VARIANTS = ("exclude_gt", "exclude_gt_idk", "fixed", "disabled")

BASELINE_LOSSES = ("ce", "focal", "flsd", "brier")


class NonFiniteLogitError(ValueError):
    """A logit was NaN or infinite."""


class EmptyBatchError(ValueError):
    """A loss was asked to reduce over zero samples."""


class GroundTruthIsUnknownClassError(ValueError):
    """A ground-truth label pointed at the reserved unknown class."""


class UnknownSampleIdError(KeyError):
    """A sample id fell outside the adaptive-target store."""


class UnknownVariantError(ValueError):
    """An unrecognized beta variant or ablation id."""


def softmax_stable(logits: np.ndarray) -> np.ndarray:
    """Softmax over the last axis, shifted by the row max for stability.

    Raises NonFiniteLogitError if any input is NaN or infinite. Output rows
    are nonnegative and sum to 1 within 1e-12.
    """
    logits = np.asarray(logits, dtype=np.float64)
    if not np.all(np.isfinite(logits)):
        raise NonFiniteLogitError("logits contain NaN or inf")
    shifted = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def _as_batch(probs: np.ndarray, labels) -> tuple[np.ndarray, np.ndarray]:
    p = np.asarray(probs, dtype=np.float64)
    squeeze = p.ndim == 1
    if squeeze:
        p = p[None, :]
    y = np.atleast_1d(np.asarray(labels, dtype=np.int64))
    if p.shape[0] == 0:
        raise EmptyBatchError("empty batch")
    if y.shape[0] != p.shape[0]:
        raise ValueError("labels do not match batch size")
    if np.any(y < 0) or np.any(y >= p.shape[1]):
        raise ValueError("label index out of range")
    return p, y


def dynamic_uncertainty_penalty(
    probs: np.ndarray,
    labels,
    variant: str = "exclude_gt",
    fixed_value: float = 0.25,
) -> np.ndarray:
    """Per-sample weight beta on the idk log-term, clamped to [0, 1].

    Variants:
      exclude_gt      beta = max over non-gt classes (idk included) - p_idk.
                      Zero whenever idk already is the runner-up or better.
      exclude_gt_idk  the max also excludes idk (needs >= 2 real classes).
      fixed           beta = fixed_value when p_gt <= max over real non-gt
                      classes (a miss is brewing), else 0.
      disabled        beta = 1 for every sample.

    The unknown class is the last index; ground-truth labels must point at a
    real class.
    """
    p, y = _as_batch(probs, labels)
    n, k = p.shape
    idk = k - 1
    if np.any(y == idk):
        raise GroundTruthIsUnknownClassError("gt label is the unknown class")
    if variant not in BETA_VARIANTS:
        raise UnknownVariantError(f"unknown beta variant: {variant!r}")
    if variant == "disabled":
        return np.ones(n)
    p_idk = p[:, idk]
    rows = np.arange(n)
    masked = p.copy()
    masked[rows, y] = -np.inf
    if variant == "exclude_gt":
        top = masked.max(axis=1)
        return np.clip(top - p_idk, 0.0, 1.0)
    # both remaining variants rank only the real competitor classes
    if k < 3:
        raise UnknownVariantError(
            f"beta variant {variant!r} needs at least two real classes"
        )
    masked[:, idk] = -np.inf
    top = masked.max(axis=1)
    if variant == "exclude_gt_idk":
        return np.clip(top - p_idk, 0.0, 1.0)
    if not 0.0 <= fixed_value <= 1.0:
        raise ValueError("fixed beta value must lie in [0, 1]")
    return np.where(p[rows, y] <= top, fixed_value, 0.0)


@dataclass(frozen=True)
class SocratesConfig:
    """Hyperparameters and ablation switches for the Socrates loss.

    gamma           focal exponent, >= 0.
    alpha           EMA factor for the adaptive target, in (0, 1]. At 1 the
                    target stays frozen at the one-hot value.
    start_epoch     first epoch at which targets adapt; before it t = 1.
    beta_variant    one of BETA_VARIANTS.
    beta_fixed_value  the constant used by the "fixed" variant.
    drop_focal_gt   remove the focal factor from the ground-truth term.
    drop_focal_idk  remove the focal factor from the idk term.
    drop_adaptive_target  freeze t = 1 and skip store updates.
    beta_backprop   let the gradient flow through beta (off by default:
                    beta is treated as a per-sample constant).
    """

    gamma: float = 2.0
    alpha: float = 0.99
    start_epoch: int = 0
    beta_variant: str = "exclude_gt"
    beta_fixed_value: float = 0.25
    drop_focal_gt: bool = False
    drop_focal_idk: bool = False
    drop_adaptive_target: bool = False
    beta_backprop: bool = False

    def __post_init__(self):
        if self.gamma < 0:
            raise ValueError("gamma must be >= 0")
        if not 0.0 < self.alpha <= 1.0:
            raise ValueError("alpha must lie in (0, 1]")
        if self.start_epoch < 0:
            raise ValueError("start_epoch must be >= 0")
        if self.beta_variant not in BETA_VARIANTS:
            raise UnknownVariantError(
                f"unknown beta variant: {self.beta_variant!r}"
            )
        if not 0.0 <= self.beta_fixed_value <= 1.0:
            raise ValueError("beta_fixed_value must lie in [0, 1]")


# Ablation family: which switches each named variant flips on top of a base
# config. Several entries reduce exactly to simpler losses: soc_no_ft_beta
# is the no-focal adaptive-target loss, soc_no_ta is focal over c+1 classes,
# soc_no_ta_ft is cross-entropy over c+1 classes.
ABLATION_OVERRIDES: dict[str, dict] = {
    "soc": {},
    "soc_no_beta": {"beta_variant": "disabled"},
    "soc_no_ft": {"drop_focal_gt": True, "drop_focal_idk": True},
    "soc_no_ft_idk": {"drop_focal_idk": True},
    "soc_no_ft_gt": {"drop_focal_gt": True},
    "soc_no_ft_beta": {
        "drop_focal_gt": True,
        "drop_focal_idk": True,
        "beta_variant": "disabled",
    },
    "soc_no_ft_idk_beta": {"drop_focal_idk": True, "beta_variant": "disabled"},
    "soc_no_ft_gt_beta": {"drop_focal_gt": True, "beta_variant": "disabled"},
    "soc_no_ta": {"drop_adaptive_target": True},
    "soc_no_ta_ft": {
        "drop_adaptive_target": True,
        "drop_focal_gt": True,
        "drop_focal_idk": True,
    },
}


def ablation_config(variant: str, base: SocratesConfig | None = None) -> SocratesConfig:
    """Resolve a named ablation variant against a base config."""
    if variant not in ABLATION_OVERRIDES:
        raise UnknownVariantError(f"unknown ablation variant: {variant!r}")
    base = base if base is not None else SocratesConfig()
    return dataclasses.replace(base, **ABLATION_OVERRIDES[variant])


class AdaptiveTargetStore:
    """Per-training-sample adaptive targets t, initialized at 1.

    t tracks an EMA of the model's own ground-truth probability:
    t_new = alpha * t_old + (1 - alpha) * p_gt, applied once per epoch when
    the sample's batch is processed (from ``start_epoch`` on). Values stay
    in [0, 1]. ``last_update_epoch`` is -1 until a sample first adapts.
    """

    def __init__(self, n_samples: int):
        if n_samples <= 0:
            raise ValueError("store needs at least one sample")
        self.n_samples = int(n_samples)
        self.targets = np.ones(self.n_samples, dtype=np.float64)
        self.last_update_epoch = np.full(self.n_samples, -1, dtype=np.int64)

    def _check_ids(self, sample_ids: np.ndarray) -> np.ndarray:
        ids = np.atleast_1d(np.asarray(sample_ids, dtype=np.int64))
        if ids.size and (ids.min() < 0 or ids.max() >= self.n_samples):
            raise UnknownSampleIdError(
                f"sample id outside [0, {self.n_samples})"
            )
        return ids

    def get(self, sample_ids) -> np.ndarray:
        return self.targets[self._check_ids(sample_ids)].copy()

    def update_batch(
        self,
        sample_ids,
        p_gt: np.ndarray,
        epoch: int,
        cfg: SocratesConfig,
    ) -> np.ndarray:
        """Advance targets for one batch and return the values to train with.

        Before ``cfg.start_epoch`` (and always when the adaptive target is
        ablated away) this returns all-ones and leaves the store untouched.
        """
        ids = self._check_ids(sample_ids)
        if cfg.drop_adaptive_target or epoch < cfg.start_epoch:
            return np.ones(ids.shape[0], dtype=np.float64)
        t_new = cfg.alpha * self.targets[ids] + (1.0 - cfg.alpha) * np.asarray(
            p_gt, dtype=np.float64
        )
        self.targets[ids] = t_new
        self.last_update_epoch[ids] = epoch
        return t_new


def update_adaptive_target(
    store: AdaptiveTargetStore,
    sample_id: int,
    p_gt: float,
    epoch: int,
    cfg: SocratesConfig,
) -> float:
    """Single-sample form of ``AdaptiveTargetStore.update_batch``."""
    return float(
        store.update_batch(
            np.asarray([sample_id]), np.asarray([p_gt]), epoch, cfg
        )[0]
    )


@dataclass
class LossBatchResult:
    """One batch worth of loss evaluation: scalar loss, gradient wrt the
    logits, and the per-sample beta and target actually used."""

    loss: float
    grad_logits: np.ndarray
    per_sample_beta: np.ndarray
    per_sample_target: np.ndarray


def _clamped_probs(logits: np.ndarray) -> np.ndarray:
    return np.clip(softmax_stable(logits), PROB_EPS, 1.0)


def socrates_loss_forward(
    probs: np.ndarray,
    labels,
    targets,
    betas,
    gamma: float,
    drop_focal_gt: bool = False,
    drop_focal_idk: bool = False,
) -> float:
    """Socrates loss value from probabilities and fixed per-sample t, beta.

    This is the pure formula with everything that the gradient treats as
    constant passed in explicitly; ``socrates_loss_grad`` is the stateful
    entry point that derives t and beta itself.
    """
    p, y = _as_batch(probs, labels)
    n, k = p.shape
    if np.any(y == k - 1):
        raise GroundTruthIsUnknownClassError("gt label is the unknown class")
    p = np.clip(p, PROB_EPS, 1.0)
    t = np.broadcast_to(np.asarray(targets, dtype=np.float64), (n,))
    beta = np.broadcast_to(np.asarray(betas, dtype=np.float64), (n,))
    rows = np.arange(n)
    pg = p[rows, y]
    pu = p[:, k - 1]
    lg = np.log(pg)
    lu = np.log(pu)
    focal = np.power(1.0 - pg, gamma)
    focal_gt = np.ones(n) if drop_focal_gt else focal
    focal_idk = np.ones(n) if drop_focal_idk else focal
    contrib = focal_gt * (t * lg) + focal_idk * (beta * ((1.0 - t) * lu))
    return float(-np.mean(contrib))


def socrates_loss_grad(
    logits: np.ndarray,
    labels,
    sample_ids,
    store: AdaptiveTargetStore | None,
    epoch: int,
    cfg: SocratesConfig,
) -> LossBatchResult:
    """Socrates loss and analytic gradient wrt the logits for one batch.

    Follows the training-step order: softmax, beta from the current
    predictions, adaptive-target update, then loss. t and beta enter the
    gradient as constants unless ``cfg.beta_backprop`` is set, in which case
    the max-minus-idk beta variants also push gradient through beta
    (clamped samples contribute none).

    ``store`` may be None only when the adaptive target is ablated away.
    """
    logits = np.asarray(logits, dtype=np.float64)
    if logits.ndim != 2:
        raise ValueError("logits must be (batch, classes)")
    p = _clamped_probs(logits)
    n, k = p.shape
    _, y = _as_batch(p, labels)
    idk = k - 1
    if np.any(y == idk):
        raise GroundTruthIsUnknownClassError("gt label is the unknown class")

    beta = dynamic_uncertainty_penalty(
        p, y, cfg.beta_variant, cfg.beta_fixed_value
    )
    rows = np.arange(n)
    pg = p[rows, y]
    if cfg.drop_adaptive_target:
        t = np.ones(n, dtype=np.float64)
    else:
        if store is None:
            raise ValueError("adaptive target needs a store")
        t = store.update_batch(sample_ids, pg, epoch, cfg)

    pu = p[:, idk]
    lg = np.log(pg)
    lu = np.log(pu)
    one_m_pg = 1.0 - pg
    focal = np.power(one_m_pg, cfg.gamma)
    ones = np.ones(n, dtype=np.float64)
    focal_gt = ones if cfg.drop_focal_gt else focal
    focal_idk = ones if cfg.drop_focal_idk else focal

    contrib = focal_gt * (t * lg) + focal_idk * (beta * ((1.0 - t) * lu))
    loss = float(-np.mean(contrib))

    # d(1-p)^gamma/dp folded with p and ln p; zero when the factor is
    # dropped or gamma = 0 (avoids 0 * inf at saturated probabilities).
    if cfg.gamma == 0.0 or cfg.drop_focal_gt:
        dfocal_gt = np.zeros(n, dtype=np.float64)
    else:
        dfocal_gt = (
            cfg.gamma
            * np.power(np.maximum(one_m_pg, PROB_EPS), cfg.gamma - 1.0)
            * pg
            * lg
        )
    if cfg.gamma == 0.0 or cfg.drop_focal_idk:
        dfocal_idk = np.zeros(n, dtype=np.float64)
    else:
        dfocal_idk = (
            cfg.gamma
            * np.power(np.maximum(one_m_pg, PROB_EPS), cfg.gamma - 1.0)
            * pg
            * lu
        )

    # grad wrt logits assembles as sum_c coeff_c * (onehot_c - p); the
    # coefficients fold p_c * dL/dp_c symbolically so saturated softmax rows
    # stay finite. The idk term's focal factor depends on p_gt too, hence
    # the second summand of coeff_gt.
    coeff_gt = -(t * (focal_gt - dfocal_gt)) + (beta * (1.0 - t)) * dfocal_idk
    coeff_idk = -(beta * (1.0 - t)) * focal_idk

    delta_gt = np.zeros((n, k), dtype=np.float64)
    delta_gt[rows, y] = 1.0
    delta_idk = np.zeros((n, k), dtype=np.float64)
    delta_idk[:, idk] = 1.0
    grad = (
        coeff_gt[:, None] * (delta_gt - p) + coeff_idk[:, None] * (delta_idk - p)
    ) / n

    if cfg.beta_backprop and cfg.beta_variant in ("exclude_gt", "exclude_gt_idk"):
        grad += _beta_flow_grad(p, y, t, lu, focal_idk, beta, cfg) / n

    return LossBatchResult(
        loss=loss,
        grad_logits=grad,
        per_sample_beta=beta,
        per_sample_target=t,
    )


def _beta_flow_grad(p, y, t, lu, focal_idk, beta, cfg) -> np.ndarray:
    """Extra gradient term when beta = p_top - p_idk is not detached.

    dL/dbeta = -focal_idk * (1-t) * ln p_idk per sample; beta depends on the
    logits through the top competitor probability and p_idk. Samples where
    the clamp to [0, 1] is active get no flow.
    """
    n, k = p.shape
    idk = k - 1
    rows = np.arange(n)
    masked = p.copy()
    masked[rows, y] = -np.inf
    if cfg.beta_variant == "exclude_gt_idk":
        masked[:, idk] = -np.inf
    top_idx = masked.argmax(axis=1)
    raw = masked[rows, top_idx] - p[:, idk]
    active = (raw > 0.0) & (raw < 1.0)

    dl_dbeta = -(focal_idk * ((1.0 - t) * lu))
    grad = np.zeros_like(p)
    # d(p_m - p_u)/dz = p_m (onehot_m - p) - p_u (onehot_u - p)
    for i in np.nonzero(active)[0]:
        m = top_idx[i]
        d = -(p[i, m] + (-p[i, idk])) * p[i]
        d[m] += p[i, m]
        d[idk] -= p[i, idk]
        grad[i] = dl_dbeta[i] * d
    return grad


def sat_loss_grad(
    logits: np.ndarray,
    labels,
    sample_ids,
    store: AdaptiveTargetStore,
    epoch: int,
    cfg: SocratesConfig,
) -> LossBatchResult:
    """Adaptive-target loss without focal factors or beta weighting:

        L = -mean( t * ln p_gt + (1 - t) * ln p_idk )

    over c+1 classes, targets adapting exactly as in the Socrates loss.
    ``socrates_loss_grad`` with both focal factors dropped and beta disabled
    reduces to this bit for bit; this standalone form exists so that
    reduction can be checked against independent code.
    """
    logits = np.asarray(logits, dtype=np.float64)
    if logits.ndim != 2:
        raise ValueError("logits must be (batch, classes)")
    p = _clamped_probs(logits)
    n, k = p.shape
    _, y = _as_batch(p, labels)
    idk = k - 1
    if np.any(y == idk):
        raise GroundTruthIsUnknownClassError("gt label is the unknown class")
    rows = np.arange(n)
    pg = p[rows, y]
    t = store.update_batch(sample_ids, pg, epoch, cfg)
    lg = np.log(pg)
    lu = np.log(p[:, idk])
    contrib = (t * lg) + ((1.0 - t) * lu)
    loss = float(-np.mean(contrib))

    coeff_gt = -t
    coeff_idk = -(1.0 - t)
    delta_gt = np.zeros((n, k), dtype=np.float64)
    delta_gt[rows, y] = 1.0
    delta_idk = np.zeros((n, k), dtype=np.float64)
    delta_idk[:, idk] = 1.0
    grad = (
        coeff_gt[:, None] * (delta_gt - p) + coeff_idk[:, None] * (delta_idk - p)
    ) / n
    return LossBatchResult(
        loss=loss,
        grad_logits=grad,
        per_sample_beta=np.ones(n, dtype=np.float64),
        per_sample_target=t,
    )


def cross_entropy_loss(logits: np.ndarray, labels) -> tuple[float, np.ndarray]:
    """Mean negative log-likelihood; gradient is (softmax - onehot)/n."""
    logits = np.asarray(logits, dtype=np.float64)
    p = _clamped_probs(logits)
    p, y = _as_batch(p, labels)
    n, k = p.shape
    rows = np.arange(n)
    lg = np.log(p[rows, y])
    loss = float(-np.mean(lg))
    delta = np.zeros((n, k), dtype=np.float64)
    delta[rows, y] = 1.0
    grad = (p - delta) / n
    return loss, grad


def focal_loss(
    logits: np.ndarray, labels, gamma: float = 2.0
) -> tuple[float, np.ndarray]:
    """Focal loss -(1-p_gt)^gamma ln p_gt, batch mean."""
    if gamma < 0:
        raise ValueError("gamma must be >= 0")
    logits = np.asarray(logits, dtype=np.float64)
    p = _clamped_probs(logits)
    p, y = _as_batch(p, labels)
    n, k = p.shape
    rows = np.arange(n)
    pg = p[rows, y]
    lg = np.log(pg)
    one_m_pg = 1.0 - pg
    focal = np.power(one_m_pg, gamma)
    contrib = focal * (lg)
    loss = float(-np.mean(contrib))
    if gamma == 0.0:
        dfocal = np.zeros(n, dtype=np.float64)
    else:
        dfocal = (
            gamma
            * np.power(np.maximum(one_m_pg, PROB_EPS), gamma - 1.0)
            * pg
            * lg
        )
    coeff = -(focal - dfocal)
    delta = np.zeros((n, k), dtype=np.float64)
    delta[rows, y] = 1.0
    grad = (coeff[:, None] * (delta - p)) / n
    return loss, grad


def flsd_loss(logits: np.ndarray, labels) -> tuple[float, np.ndarray]:
    """Focal loss with the sample-dependent 5/3 schedule: gamma = 5 while
    p_gt < 0.2, else 3. The schedule itself is not differentiated."""
    logits = np.asarray(logits, dtype=np.float64)
    p = _clamped_probs(logits)
    p, y = _as_batch(p, labels)
    n, k = p.shape
    rows = np.arange(n)
    pg = p[rows, y]
    gamma = np.where(pg < 0.2, 5.0, 3.0)
    lg = np.log(pg)
    one_m_pg = 1.0 - pg
    focal = np.power(one_m_pg, gamma)
    loss = float(-np.mean(focal * lg))
    dfocal = gamma * np.power(np.maximum(one_m_pg, PROB_EPS), gamma - 1.0) * pg * lg
    coeff = -(focal - dfocal)
    delta = np.zeros((n, k), dtype=np.float64)
    delta[rows, y] = 1.0
    grad = (coeff[:, None] * (delta - p)) / n
    return loss, grad


def brier_loss(logits: np.ndarray, labels) -> tuple[float, np.ndarray]:
    """Squared error between the probability vector and the one-hot label,
    summed over classes and averaged over the batch."""
    logits = np.asarray(logits, dtype=np.float64)
    p = softmax_stable(logits)
    p, y = _as_batch(p, labels)
    n, k = p.shape
    rows = np.arange(n)
    delta = np.zeros((n, k), dtype=np.float64)
    delta[rows, y] = 1.0
    r = p - delta
    loss = float(np.mean(np.sum(r * r, axis=1)))
    inner = np.sum(p * r, axis=1)
    grad = (2.0 * p * (r - inner[:, None])) / n
    return loss, grad


def baseline_loss(
    kind: str, logits: np.ndarray, labels, gamma: float = 2.0
) -> tuple[float, np.ndarray]:
    """Dispatch to one of the baseline losses by name."""
    if kind == "ce":
        return cross_entropy_loss(logits, labels)
    if kind == "focal":
        return focal_loss(logits, labels, gamma)
    if kind == "flsd":
        return flsd_loss(logits, labels)
    if kind == "brier":
        return brier_loss(logits, labels)
    raise UnknownVariantError(f"unknown baseline loss: {kind!r}")


def gradient_attenuation(p, gamma: float):
    """Ratio of the focal-style gradient wrt p_gt to the cross-entropy one
    for a one-hot target:

        g(p, gamma) = (1-p)^gamma - gamma * p * (1-p)^(gamma-1) * ln p

    |g| <= 1 on p in [0.5, 1) for gamma >= 1, which is what makes the loss
    tread more lightly than cross-entropy once a sample is already won.
    """
    p = np.asarray(p, dtype=np.float64)
    return np.power(1.0 - p, gamma) - gamma * p * np.power(
        np.maximum(1.0 - p, 0.0), gamma - 1.0
    ) * np.log(p)
