"""Training objectives.

All distances are cosine distances ``1 - cos``. Per-pair losses accept single
vectors or row batches and average over rows; the batch metric losses take a
full video-by-music similarity matrix.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from .errors import ConfigurationError, DataError, NumericError
from .numgrad import (
    Tensor,
    as_tensor,
    cosine_matrix,
    log_softmax,
    mean,
    mul,
    note_kink_distance,
    relu,
    row_cosine,
    square,
    total,
)

METRIC_VARIANTS = ("contrastive", "batch_metric", "ppml")
PPML_SITES = ("content", "fused")

NEGATIVE, NEUTRAL, POSITIVE = 0, 1, 2


@dataclass(frozen=True)
class LossConfig:
    margin: float = 0.5
    lambda1: float = 0.8
    lambda2: float = 1.0
    mu1: float = 0.8
    mu2: float = 1.0
    k1: float = 0.5
    k2: float = 0.5
    k3: float = 1.0
    metric_variant: str = "contrastive"
    fusion_mode: str = "interactive"
    ppml_site: str = "content"

    def __post_init__(self):
        if not 0 < self.margin <= 2:
            raise ConfigurationError(f"margin must lie in (0, 2], got {self.margin}")
        for name in ("lambda1", "lambda2", "mu1", "mu2", "k1", "k2", "k3"):
            value = getattr(self, name)
            if not np.isfinite(value) or value < 0:
                raise ConfigurationError(f"{name} must be a finite non-negative weight, got {value}")
        if self.metric_variant not in METRIC_VARIANTS:
            raise ConfigurationError(f"metric_variant must be one of {METRIC_VARIANTS}, got {self.metric_variant!r}")
        if self.fusion_mode not in ("splicing", "interactive"):
            raise ConfigurationError(f"fusion_mode must be splicing or interactive, got {self.fusion_mode!r}")
        if self.ppml_site not in PPML_SITES:
            raise ConfigurationError(f"ppml_site must be one of {PPML_SITES}, got {self.ppml_site!r}")

    def to_dict(self) -> dict:
        return asdict(self)


def _as_rows(x) -> Tensor:
    t = as_tensor(x)
    if t.value.ndim == 1:
        if t.requires_grad:
            raise ConfigurationError("graph tensors must already be row batches")
        t = Tensor(t.value.reshape(1, -1))
    return t


def _cos_dist_rows(a, b) -> Tensor:
    a, b = _as_rows(a), _as_rows(b)
    return 1.0 - row_cosine(a, b)


def reconstruction_loss(v, recon_v, m, recon_m) -> Tensor:
    """cos_dist(v, recon_v) + cos_dist(m, recon_m), averaged over rows."""
    return mean(_cos_dist_rows(v, recon_v)) + mean(_cos_dist_rows(m, recon_m))


def contrastive_metric_loss(code_v, code_m, y, margin: float) -> Tensor:
    """Hadsell-style contrastive loss on cosine distance, averaged over rows.

    ``y`` is 0 for a matched pair and 1 for a mismatched one.
    """
    if margin <= 0:
        raise ConfigurationError("margin must be positive")
    d = _cos_dist_rows(code_v, code_m)
    y = np.broadcast_to(np.asarray(y, dtype=d.dtype), d.shape)
    if not np.all((y == 0) | (y == 1)):
        raise DataError("pair labels must be 0 or 1")
    per_row = 0.5 * mul(square(d), 1.0 - y) + 0.5 * mul(square(relu(margin - d)), y)
    return mean(per_row)


def in_batch_contrastive_loss(code_v, code_m, margin: float) -> Tensor:
    """Contrastive loss over every (video k, music i) combination of a batch.

    The diagonal holds the matched pairs (y=0); the n(n-1) off-diagonal
    combinations are negatives (y=1). Summed over combinations, divided by n.
    """
    code_v, code_m = _as_rows(code_v), _as_rows(code_m)
    n = code_v.shape[0]
    if n < 2:
        raise ConfigurationError("in-batch contrastive loss needs at least 2 pairs")
    d = 1.0 - cosine_matrix(code_v, code_m)
    eye = np.eye(n, dtype=d.dtype)
    per_pair = 0.5 * mul(square(d), eye) + 0.5 * mul(square(relu(margin - d)), 1.0 - eye)
    return total(per_pair) / n


def discrimination_loss(logits_v, logits_m, class_v, class_m) -> Tensor:
    """Softmax cross-entropy of both modalities' logits, averaged over rows."""
    return _cross_entropy(logits_v, class_v) + _cross_entropy(logits_m, class_m)


def _cross_entropy(logits, labels) -> Tensor:
    logits = _as_rows(logits)
    n, c = logits.shape
    labels = np.atleast_1d(np.asarray(labels))
    if labels.shape != (n,):
        raise DataError(f"expected {n} class labels, got shape {labels.shape}")
    if not np.issubdtype(labels.dtype, np.integer) or labels.min() < 0 or labels.max() >= c:
        raise DataError(f"class labels must be integers in [0, {c}), got {labels.tolist()}")
    onehot = np.zeros((n, c), dtype=logits.dtype)
    onehot[np.arange(n), labels] = 1
    return -total(mul(log_softmax(logits), onehot)) / n


def intermodal_loss(emotion_code_v, emotion_code_m) -> Tensor:
    """Negative cosine distance between the two modalities' emotion codes."""
    return -mean(_cos_dist_rows(emotion_code_v, emotion_code_m))


def fusion_loss(fused_v, fused_m) -> Tensor:
    """Cosine distance between matched fused embeddings."""
    return mean(_cos_dist_rows(fused_v, fused_m))


def composite_losses(components: dict, cfg: LossConfig):
    """Weighted content, emotion and total objectives.

    ``components`` maps ``L_R``, ``L_Mcontent``, ``L_D``, ``L_Minter`` and
    ``L_Fusion`` to floats or scalar tensors.
    """
    for name, value in components.items():
        if not np.all(np.isfinite(np.asarray(getattr(value, "value", value), dtype=float))):
            raise NumericError(f"component {name} is not finite")
    content = cfg.lambda1 * components["L_R"] + cfg.lambda2 * components["L_Mcontent"]
    emotion = cfg.mu1 * components["L_D"] + cfg.mu2 * components["L_Minter"]
    total_loss = cfg.k1 * content + cfg.k2 * emotion + cfg.k3 * components["L_Fusion"]
    return content, emotion, total_loss


def similarity_matrix(video_emb, music_emb) -> Tensor:
    """phi[k, i] = cos(video k, music i)."""
    return cosine_matrix(_as_rows(video_emb), _as_rows(music_emb))


def _square_sim(sim) -> Tensor:
    sim = as_tensor(sim)
    if sim.value.ndim != 2 or sim.shape[0] != sim.shape[1]:
        raise ConfigurationError(f"similarity matrix must be square, got {sim.shape}")
    if sim.shape[0] < 2:
        raise ConfigurationError("batch metric losses need at least 2 pairs")
    return sim


def batch_metric_loss(sim) -> Tensor:
    """sum_k sum_{i != k} (phi[k, i] - phi[k, k])."""
    sim = _square_sim(sim)
    n = sim.shape[0]
    weights = (1.0 - np.eye(n)) - (n - 1) * np.eye(n)
    return total(mul(sim, weights.astype(sim.dtype)))


def ppml_gate(phi: np.ndarray) -> np.ndarray:
    """rho[k, i] = 0 where phi[k, i] < phi[k, k], else 1."""
    phi = np.asarray(phi)
    return (phi >= np.diag(phi)[:, None]).astype(phi.dtype)


def polarity_penalty(polarity) -> np.ndarray:
    """P[k, i] = |label_k - label_i|."""
    p = np.asarray(polarity)
    if p.ndim != 1 or not np.all(np.isin(p, (NEGATIVE, NEUTRAL, POSITIVE))):
        raise DataError(f"polarity labels must be in {{0, 1, 2}}, got {p.tolist()}")
    return np.abs(p[:, None] - p[None, :]).astype(np.float64)


def ppml(sim, polarity) -> Tensor:
    """Polarity penalty metric loss.

    sum_k sum_{i != k} (P[k, i] * rho[k, i] * phi[k, i] - phi[k, k]); the gate
    rho is a constant with respect to differentiation.
    """
    sim = _square_sim(sim)
    n = sim.shape[0]
    polarity = np.asarray(polarity)
    if polarity.shape != (n,):
        raise DataError(f"need {n} polarity labels, got {polarity.shape}")
    phi = sim.value
    off = 1.0 - np.eye(n)
    note_kink_distance((phi - np.diag(phi)[:, None])[off.astype(bool)])
    weights = polarity_penalty(polarity) * ppml_gate(phi) * off - (n - 1) * np.eye(n)
    return total(mul(sim, weights.astype(sim.dtype)))


def content_metric_term(code_v, code_m, polarity, cfg: LossConfig) -> Tensor:
    """The batch metric term (the content-metric slot) per the configured variant.

    With ``ppml_site="fused"`` the fusion ablations pass fused embeddings here
    instead of content codes. The summed batch forms are divided by the batch size so that every variant
    is expressed per anchor video.
    """
    if cfg.metric_variant == "contrastive":
        return in_batch_contrastive_loss(code_v, code_m, cfg.margin)
    n = _as_rows(code_v).shape[0]
    sim = similarity_matrix(code_v, code_m)
    if cfg.metric_variant == "batch_metric":
        return batch_metric_loss(sim) / n
    return ppml(sim, polarity) / n
