"""Feature tables, dataset splitting, batching and a synthetic generator.

On-disk layout of a dataset directory::

    manifest.csv   #dims header, then item_id,modality,pair_group,emotion_class,polarity,feature_file
    pairs.csv      video_id,music_id per line
    key.csv        video_id,music_id,latent_seed (synthetic data only)
    features/      one raw little-endian float32 file per item (content then emotion)
"""

from __future__ import annotations

import math
import os
import shutil
import tempfile
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterator

import numpy as np

from .errors import ConfigurationError, DataError

MANIFEST_NAME = "manifest.csv"
PAIRS_NAME = "pairs.csv"
KEY_NAME = "key.csv"
HEADER_KEYS = ("video_content", "music_content", "video_emotion", "music_emotion", "classes")


@dataclass(frozen=True)
class ItemRecord:
    item_id: str
    modality: str
    pair_group: str
    content_feature: np.ndarray
    emotion_feature: np.ndarray
    emotion_class: int
    polarity: int

    def same_as(self, other: "ItemRecord") -> bool:
        return (
            self.item_id == other.item_id
            and self.modality == other.modality
            and self.pair_group == other.pair_group
            and self.emotion_class == other.emotion_class
            and self.polarity == other.polarity
            and np.array_equal(self.content_feature, other.content_feature)
            and np.array_equal(self.emotion_feature, other.emotion_feature)
        )


@dataclass(frozen=True)
class FeatureDims:
    video_content: int
    music_content: int
    video_emotion: int
    music_emotion: int
    classes: int

    def header(self) -> str:
        return "#dims " + " ".join(f"{k}={getattr(self, k)}" for k in HEADER_KEYS)

    def lengths(self, modality: str) -> tuple[int, int]:
        return getattr(self, f"{modality}_content"), getattr(self, f"{modality}_emotion")


@dataclass
class PairSet:
    dims: FeatureDims
    videos: dict[str, ItemRecord]
    musics: dict[str, ItemRecord]
    pairs: list[tuple[str, str]]

    def __post_init__(self):
        for vid, mid in self.pairs:
            if vid not in self.videos:
                raise DataError(f"pair references unknown video {vid!r}")
            if mid not in self.musics:
                raise DataError(f"pair references unknown music {mid!r}")

    @property
    def groups(self) -> list[str]:
        return sorted({r.pair_group for r in self.videos.values()} | {r.pair_group for r in self.musics.values()})

    def subset(self, groups) -> "PairSet":
        keep = set(groups)
        videos = {k: r for k, r in self.videos.items() if r.pair_group in keep}
        musics = {k: r for k, r in self.musics.items() if r.pair_group in keep}
        pairs = [(v, m) for v, m in self.pairs if v in videos and m in musics]
        return PairSet(self.dims, videos, musics, pairs)

    def training_pairs(self, all_pairs: bool = False) -> list[tuple[str, str]]:
        """One positive per video (its first listed pair) unless ``all_pairs``."""
        if all_pairs:
            return list(self.pairs)
        seen, out = set(), []
        for v, m in self.pairs:
            if v not in seen:
                seen.add(v)
                out.append((v, m))
        return out

    def ground_truth(self) -> dict[str, set[str]]:
        """Relevant musics per video: every music sharing its pair group."""
        by_group: dict[str, set[str]] = {}
        for mid, rec in self.musics.items():
            by_group.setdefault(rec.pair_group, set()).add(mid)
        return {vid: by_group.get(rec.pair_group, set()) for vid, rec in self.videos.items()}


# --- reading / writing -----------------------------------------------------

def _parse_header(line: str, path: Path) -> FeatureDims:
    if not line.startswith("#dims"):
        raise DataError(f"{path}:1: missing '#dims' header")
    values = {}
    for token in line.split()[1:]:
        key, sep, raw = token.partition("=")
        if not sep or key not in HEADER_KEYS:
            raise DataError(f"{path}:1: bad header field {token!r}")
        try:
            values[key] = int(raw)
        except ValueError:
            raise DataError(f"{path}:1: header field {key} is not an integer: {raw!r}") from None
        if values[key] < 1:
            raise DataError(f"{path}:1: header field {key} must be positive")
    missing = [k for k in HEADER_KEYS if k not in values]
    if missing:
        raise DataError(f"{path}:1: header is missing {', '.join(missing)}")
    return FeatureDims(**values)


def _resolve(manifest_path) -> Path:
    p = Path(manifest_path)
    return p / MANIFEST_NAME if p.is_dir() else p


def load_feature_table(manifest_path) -> PairSet:
    """Load and validate a manifest, its feature files and the pairs file."""
    path = _resolve(manifest_path)
    if not path.exists():
        raise DataError(f"{path}: manifest not found")
    root = path.parent
    lines = path.read_text(encoding="utf-8").splitlines()
    if not lines:
        raise DataError(f"{path}: empty manifest")
    dims = _parse_header(lines[0], path)
    videos: dict[str, ItemRecord] = {}
    musics: dict[str, ItemRecord] = {}
    for lineno, line in enumerate(lines[1:], start=2):
        if not line.strip() or line.startswith("#"):
            continue
        parts = line.split(",")
        if len(parts) != 6:
            raise DataError(f"{path}:{lineno}: expected 6 fields, got {len(parts)}")
        item_id, modality, group, cls, pol, feat_file = (s.strip() for s in parts)
        where = f"{path}:{lineno}"
        if modality not in ("video", "music"):
            raise DataError(f"{where}: field modality must be video or music, got {modality!r}")
        if item_id in videos or item_id in musics:
            raise DataError(f"{where}: field item_id duplicates {item_id!r}")
        try:
            cls_i = int(cls)
        except ValueError:
            raise DataError(f"{where}: field emotion_class is not an integer: {cls!r}") from None
        if not 0 <= cls_i < dims.classes:
            raise DataError(f"{where}: field emotion_class {cls_i} outside [0, {dims.classes})")
        try:
            pol_i = int(pol)
        except ValueError:
            raise DataError(f"{where}: field polarity is not an integer: {pol!r}") from None
        if pol_i not in (0, 1, 2):
            raise DataError(f"{where}: field polarity must be 0, 1 or 2, got {pol_i}")
        fpath = root / feat_file
        if not fpath.exists():
            raise DataError(f"{where}: field feature_file {feat_file!r} not found")
        raw = np.fromfile(fpath, dtype="<f4")
        n_content, n_emotion = dims.lengths(modality)
        if raw.size != n_content + n_emotion:
            raise DataError(
                f"{where}: field feature_file has {raw.size} floats, header requires "
                f"{n_content}+{n_emotion}={n_content + n_emotion}"
            )
        rec = ItemRecord(
            item_id, modality, group,
            raw[:n_content].astype(np.float32), raw[n_content:].astype(np.float32),
            cls_i, pol_i,
        )
        (videos if modality == "video" else musics)[item_id] = rec
    pairs = _load_pairs(root / PAIRS_NAME, videos, musics)
    return PairSet(dims, videos, musics, pairs)


def _load_pairs(path: Path, videos, musics) -> list[tuple[str, str]]:
    if not path.exists():
        raise DataError(f"{path}: pairs file not found")
    pairs = []
    for lineno, line in enumerate(path.read_text(encoding="utf-8").splitlines(), start=1):
        if not line.strip() or line.startswith("#"):
            continue
        parts = [s.strip() for s in line.split(",")]
        if len(parts) != 2:
            raise DataError(f"{path}:{lineno}: expected video_id,music_id")
        vid, mid = parts
        if vid not in videos:
            raise DataError(f"{path}:{lineno}: field video_id references unknown video {vid!r}")
        if mid not in musics:
            raise DataError(f"{path}:{lineno}: field music_id references unknown music {mid!r}")
        pairs.append((vid, mid))
    return pairs


def write_feature_table(pairs: PairSet, out_dir, key_rows=None, extra_files=None) -> Path:
    """Write a dataset directory atomically (staged in a temp dir, then renamed).

    An existing ``out_dir`` is replaced only if it is empty or holds a dataset.
    ``extra_files`` maps file names to text written alongside the manifest.
    """
    out = Path(out_dir)
    if out.exists() and (not out.is_dir() or (any(out.iterdir()) and not (out / MANIFEST_NAME).exists())):
        raise ConfigurationError(f"{out} exists and is not a dataset directory; refusing to overwrite")
    out.parent.mkdir(parents=True, exist_ok=True)
    stage = Path(tempfile.mkdtemp(prefix=".stage-", dir=out.parent))
    try:
        (stage / "features").mkdir()
        lines = [pairs.dims.header()]
        for rec in list(pairs.videos.values()) + list(pairs.musics.values()):
            rel = f"features/{rec.item_id}.f32"
            blob = np.concatenate([rec.content_feature, rec.emotion_feature]).astype("<f4")
            blob.tofile(stage / rel)
            lines.append(f"{rec.item_id},{rec.modality},{rec.pair_group},{rec.emotion_class},{rec.polarity},{rel}")
        (stage / MANIFEST_NAME).write_text("\n".join(lines) + "\n", encoding="utf-8")
        (stage / PAIRS_NAME).write_text("".join(f"{v},{m}\n" for v, m in pairs.pairs), encoding="utf-8")
        if key_rows is not None:
            (stage / KEY_NAME).write_text("".join(f"{v},{m},{s}\n" for v, m, s in key_rows), encoding="utf-8")
        for name, text in (extra_files or {}).items():
            (stage / name).write_text(text, encoding="utf-8")
        if out.exists():
            shutil.rmtree(out)
        os.replace(stage, out)
    except BaseException:
        shutil.rmtree(stage, ignore_errors=True)
        raise
    return out


# --- splitting and batching ------------------------------------------------

def split_dataset(pairs: PairSet, seed: int, train_fraction: float = 0.7):
    """Shuffle pair groups and split them; no group straddles the split."""
    groups = pairs.groups
    if len(groups) < 10:
        raise ConfigurationError(f"need at least 10 pair groups to split, got {len(groups)}")
    if not 0 < train_fraction < 1:
        raise ConfigurationError("train_fraction must lie in (0, 1)")
    order = np.random.default_rng(seed).permutation(len(groups))
    n_train = math.floor(train_fraction * len(groups) + 1e-9)
    train = [groups[i] for i in order[:n_train]]
    test = [groups[i] for i in order[n_train:]]
    return pairs.subset(train), pairs.subset(test)


@dataclass
class Batch:
    """n matched pairs; all off-diagonal (video k, music i) combinations are negatives."""

    video_ids: list[str]
    music_ids: list[str]
    video_content: np.ndarray
    music_content: np.ndarray
    video_emotion: np.ndarray
    music_emotion: np.ndarray
    video_class: np.ndarray
    music_class: np.ndarray
    polarity: np.ndarray

    @property
    def n(self) -> int:
        return len(self.video_ids)

    @property
    def pair_labels(self) -> np.ndarray:
        """Y[k, i]: 0 on the diagonal (matched), 1 elsewhere."""
        return 1 - np.eye(self.n, dtype=np.int64)

    @property
    def num_negatives(self) -> int:
        return self.n * (self.n - 1)


def build_batch(data: PairSet, pairs: list[tuple[str, str]]) -> Batch:
    vids = [data.videos[v] for v, _ in pairs]
    mus = [data.musics[m] for _, m in pairs]
    return Batch(
        video_ids=[r.item_id for r in vids],
        music_ids=[r.item_id for r in mus],
        video_content=np.stack([r.content_feature for r in vids]),
        music_content=np.stack([r.content_feature for r in mus]),
        video_emotion=np.stack([r.emotion_feature for r in vids]),
        music_emotion=np.stack([r.emotion_feature for r in mus]),
        video_class=np.array([r.emotion_class for r in vids], dtype=np.int64),
        music_class=np.array([r.emotion_class for r in mus], dtype=np.int64),
        polarity=np.array([r.polarity for r in vids], dtype=np.int64),
    )


def make_batches(train: PairSet, batch_size: int, seed, all_pairs: bool = False) -> list[Batch]:
    """One epoch of batches; every training pair appears exactly once.

    ``seed`` may be an int or a numpy Generator (consumed for the permutation).
    """
    if batch_size < 2:
        raise ConfigurationError(
            f"batch_size must be >= 2: the metric losses need in-batch negatives (got {batch_size})"
        )
    pairs = train.training_pairs(all_pairs)
    if len(pairs) < 2:
        raise DataError(f"need at least 2 training pairs to form in-batch negatives, got {len(pairs)}")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    order = rng.permutation(len(pairs))
    batches = []
    for start in range(0, len(order), batch_size):
        chunk = [pairs[i] for i in order[start:start + batch_size]]
        if len(chunk) < 2:
            # a single leftover pair has no negatives; fold it into the previous batch
            prev = batches.pop()
            batches.append(build_batch(train, list(zip(prev.video_ids, prev.music_ids)) + chunk))
            continue
        batches.append(build_batch(train, chunk))
    return batches


# --- synthetic data --------------------------------------------------------

# emotion class -> polarity, for the default four classes (sad, happy, scared, surprised)
DEFAULT_CLASS_POLARITY = (0, 2, 0, 1)


@dataclass(frozen=True)
class SyntheticSpec:
    num_pairs: int = 100
    musics_per_video: int = 1
    latent_content_dim: int = 16
    latent_emotion_dim: int = 8
    video_content_dim: int = 256
    music_content_dim: int = 256
    video_emotion_dim: int = 64
    music_emotion_dim: int = 64
    num_classes: int = 4
    noise_sigma: float = 0.1
    class_separation: float = 1.5
    emotion_in_content: float = 0.25
    related_music_spread: float = 0.3
    seed: int = 0

    def __post_init__(self):
        for name in (
            "num_pairs", "musics_per_video", "latent_content_dim", "latent_emotion_dim",
            "video_content_dim", "music_content_dim", "video_emotion_dim", "music_emotion_dim",
        ):
            if getattr(self, name) < 1:
                raise ConfigurationError(f"{name} must be >= 1")
        if self.num_classes < 2:
            raise ConfigurationError("num_classes must be >= 2")
        for name in ("noise_sigma", "class_separation", "emotion_in_content", "related_music_spread"):
            if getattr(self, name) < 0:
                raise ConfigurationError(f"{name} must be >= 0")

    def to_dict(self) -> dict:
        return asdict(self)


def class_polarity(num_classes: int) -> list[int]:
    if num_classes == len(DEFAULT_CLASS_POLARITY):
        return list(DEFAULT_CLASS_POLARITY)
    return [c % 3 for c in range(num_classes)]


def _linear_maps(spec: SyntheticSpec, rng: np.random.Generator, modality: str):
    """Content features see the content latent plus a scaled emotion latent; emotion features see only the emotion latent."""
    dc, de = spec.latent_content_dim, spec.latent_emotion_dim
    n_content = getattr(spec, f"{modality}_content_dim")
    n_emotion = getattr(spec, f"{modality}_emotion_dim")
    a_content = rng.standard_normal((n_content, dc + de)) / np.sqrt(dc + de)
    a_content[:, dc:] *= spec.emotion_in_content
    a_emotion = np.zeros((n_emotion, dc + de))
    a_emotion[:, dc:] = rng.standard_normal((n_emotion, de)) / np.sqrt(de)
    return a_content, a_emotion


def synthesize(spec: SyntheticSpec):
    """Generate an in-memory PairSet and its ground-truth key rows."""
    root = np.random.SeedSequence(spec.seed)
    map_seq, class_seq, group_seq = root.spawn(3)
    map_rng = np.random.default_rng(map_seq)
    maps = {m: _linear_maps(spec, map_rng, m) for m in ("video", "music")}
    class_means = spec.class_separation * np.random.default_rng(class_seq).standard_normal(
        (spec.num_classes, spec.latent_emotion_dim)
    )
    polarity_of = class_polarity(spec.num_classes)
    dims = FeatureDims(
        spec.video_content_dim, spec.music_content_dim,
        spec.video_emotion_dim, spec.music_emotion_dim, spec.num_classes,
    )
    width = len(str(spec.num_pairs - 1))
    mwidth = len(str(spec.musics_per_video - 1))
    videos, musics, pairs, key = {}, {}, [], []
    group_seeds = group_seq.generate_state(spec.num_pairs)
    for g in range(spec.num_pairs):
        latent_seed = int(group_seeds[g])
        rng = np.random.default_rng(latent_seed)
        cls = int(rng.integers(spec.num_classes))
        z_c = rng.standard_normal(spec.latent_content_dim)
        z_e = class_means[cls] + rng.standard_normal(spec.latent_emotion_dim)
        group = f"g{g:0{width}d}"

        def record(item_id, modality, z_content):
            a_content, a_emotion = maps[modality]
            z = np.concatenate([z_content, z_e])
            content = a_content @ z + spec.noise_sigma * rng.standard_normal(a_content.shape[0])
            emotion = a_emotion @ z + spec.noise_sigma * rng.standard_normal(a_emotion.shape[0])
            return ItemRecord(
                item_id, modality, group,
                content.astype(np.float32), emotion.astype(np.float32),
                cls, polarity_of[cls],
            )

        vid = f"v{g:0{width}d}"
        videos[vid] = record(vid, "video", z_c)
        for j in range(spec.musics_per_video):
            mid = f"m{g:0{width}d}_{j:0{mwidth}d}"
            z_m = z_c if j == 0 else z_c + spec.related_music_spread * rng.standard_normal(z_c.shape)
            musics[mid] = record(mid, "music", z_m)
            pairs.append((vid, mid))
            key.append((vid, mid, latent_seed))
    return PairSet(dims, videos, musics, pairs), key


def generate_synthetic(spec: SyntheticSpec, out_dir, extra_files=None) -> Path:
    """Write a synthetic dataset directory (manifest, pairs, key, features)."""
    data, key = synthesize(spec)
    try:
        return write_feature_table(data, out_dir, key_rows=key, extra_files=extra_files)
    except OSError as exc:
        raise OSError(f"cannot write synthetic data to {out_dir}: {exc}") from exc


def iter_records(data: PairSet, modality: str) -> Iterator[ItemRecord]:
    items = data.videos if modality == "video" else data.musics
    for key in sorted(items):
        yield items[key]
