"""Finite-difference checks of every loss composed through the full model."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import losses as L
from .data import Batch
from .errors import DegenerateInputError
from .model import ModelDims, ModelParams, content_forward, emotion_forward, fuse, init_model
from .numgrad import Tensor, check_gradients, track_kinks
from .training import TrainConfig, batch_objective

SMALL_DIMS = ModelDims(
    video_content_dim=7,
    music_content_dim=6,
    video_emotion_dim=5,
    music_emotion_dim=4,
    content_code_dim=4,
    emotion_code_dim=3,
    fused_dim=5,
    num_emotion_classes=3,
    content_hidden_dim=6,
    emotion_hidden_dim=5,
)
TOLERANCE = 1e-4
EPS = 1e-5
# inputs closer than this to a relu / hinge / gate boundary are resampled
KINK_CLEARANCE = 1e-4
# cosine inputs with a smaller row norm are resampled; the difference quotient
# error grows like (EPS / norm) ** 2 near the origin
NORM_CLEARANCE = 1e-2
# wide enough that the hinge is active for typical random codes
CHECK_MARGIN = 1.5

CONTENT = ("video_content_proj", "music_content_proj", "shared_encoder", "shared_decoder",
           "video_decoder_out", "music_decoder_out")
ENCODER = ("video_content_proj", "music_content_proj", "shared_encoder")
EMOTION = ("emotion_proj_v", "emotion_proj_m", "shared_emotion_mlp")


def random_batch(rng: np.random.Generator, dims: ModelDims = SMALL_DIMS, n: int = 4) -> Batch:
    return Batch(
        video_ids=[f"v{i}" for i in range(n)],
        music_ids=[f"m{i}" for i in range(n)],
        video_content=rng.standard_normal((n, dims.video_content_dim)),
        music_content=rng.standard_normal((n, dims.music_content_dim)),
        video_emotion=rng.standard_normal((n, dims.video_emotion_dim)),
        music_emotion=rng.standard_normal((n, dims.music_emotion_dim)),
        video_class=rng.integers(dims.num_emotion_classes, size=n),
        music_class=rng.integers(dims.num_emotion_classes, size=n),
        polarity=rng.integers(3, size=n),
    )


def _codes(p, b):
    return content_forward(p, b.video_content, b.music_content)


def _fused(p, b, mode):
    cv, cm, _, _ = _codes(p, b)
    ev, _ = emotion_forward(p, b.video_emotion, "video")
    em, _ = emotion_forward(p, b.music_emotion, "music")
    return fuse(p, cv, ev, mode), fuse(p, cm, em, mode)


def _total(metric: str) -> Callable:
    cfg = TrainConfig(dims=SMALL_DIMS, loss=L.LossConfig(margin=CHECK_MARGIN, metric_variant=metric))
    return lambda p, b: batch_objective(p, b, cfg)[0]


@dataclass(frozen=True)
class RegisteredLoss:
    fn: Callable[[ModelParams, Batch], Tensor]
    prefixes: tuple[str, ...]
    # coordinates probed per parameter tensor; None probes all of them
    max_coords: int | None = None


def _reconstruction(p, b):
    _, _, rv, rm = _codes(p, b)
    return L.reconstruction_loss(b.video_content, rv, b.music_content, rm)


REGISTRY: dict[str, RegisteredLoss] = {
    "reconstruction": RegisteredLoss(_reconstruction, CONTENT),
    "contrastive": RegisteredLoss(
        lambda p, b: L.in_batch_contrastive_loss(*_codes(p, b)[:2], CHECK_MARGIN), ENCODER,
    ),
    "discrimination": RegisteredLoss(
        lambda p, b: L.discrimination_loss(
            emotion_forward(p, b.video_emotion, "video")[1],
            emotion_forward(p, b.music_emotion, "music")[1],
            b.video_class, b.music_class,
        ),
        EMOTION + ("emotion_classifier",),
    ),
    "intermodal": RegisteredLoss(
        lambda p, b: L.intermodal_loss(
            emotion_forward(p, b.video_emotion, "video")[0],
            emotion_forward(p, b.music_emotion, "music")[0],
        ),
        EMOTION,
    ),
    "fusion": RegisteredLoss(lambda p, b: L.fusion_loss(*_fused(p, b, "interactive")), ENCODER + EMOTION + ("fusion_fc",)),
    "fusion_splicing": RegisteredLoss(lambda p, b: L.fusion_loss(*_fused(p, b, "splicing")), ENCODER + EMOTION),
    "batch_metric": RegisteredLoss(
        lambda p, b: L.batch_metric_loss(L.similarity_matrix(*_codes(p, b)[:2])), ENCODER,
    ),
    "ppml": RegisteredLoss(
        lambda p, b: L.ppml(L.similarity_matrix(*_codes(p, b)[:2]), b.polarity), ENCODER,
    ),
    "total_contrastive": RegisteredLoss(_total("contrastive"), ("",), max_coords=8),
    "total_ppml": RegisteredLoss(_total("ppml"), ("",), max_coords=8),
}


def check_loss(name: str, seed: int, max_attempts: int = 200) -> tuple[float, int]:
    """Max relative error for one registered loss at one seed; also returns resample count."""
    entry = REGISTRY[name]
    ss = np.random.SeedSequence([seed, sum(map(ord, name))])
    for attempt in range(max_attempts):
        rng = np.random.default_rng(ss.spawn(1)[0])
        params = init_model(SMALL_DIMS, int(rng.integers(2**31)), dtype=np.float64)
        batch = random_batch(rng)
        try:
            with track_kinks() as kink:
                entry.fn(params, batch)
        except DegenerateInputError:
            # every relu of a row dead at these tiny widths: zero vector, no cosine
            continue
        if kink[0] < KINK_CLEARANCE or kink[1] < NORM_CLEARANCE:
            continue
        plist = params.group(entry.prefixes)
        result = check_gradients(lambda: entry.fn(params, batch), plist, eps=EPS, seed=seed,
                                 max_coords=entry.max_coords)
        return result.max_relative_error, attempt
    raise RuntimeError(f"could not draw inputs clear of kinks for {name} after {max_attempts} attempts")


def run_suite(seed: int = 0, trials: int = 20, names=None) -> dict[str, float]:
    """Worst relative error per registered loss over ``trials`` seeds."""
    out = {}
    for name in names or REGISTRY:
        out[name] = max(check_loss(name, seed * 1000 + t)[0] for t in range(trials))
    return out
