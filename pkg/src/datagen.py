"""
Synthetic multimodal bags, the MVD1 feature-file format, manifests and batching
"""

import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from sklearn.model_selection import train_test_split

from src.autodiff import get_default_dtype
from src.config import GenConfig
from src.errors import ConfigError, FeatureFileError, ManifestError

logger = logging.getLogger(__name__)

MODALITIES = ("rgb", "audio", "flow")

MAGIC = b"MVD1"
_HEADER = struct.Struct("<4sII")
_MAX_DIM = 2 ** 32 - 1
_MAX_ELEMENTS = 2 ** 31 - 1

MANIFEST_NAME = "manifest.jsonl"
FEATURE_DIR = "features"


@dataclass
class FeatureSequence:
    """One modality's per-timestep features, shape (T, D)"""
    modality: str
    values: np.ndarray

    def __post_init__(self):
        if self.modality not in MODALITIES:
            raise ValueError(f"unknown modality '{self.modality}'")
        self.values = np.asarray(self.values, dtype=np.float32)
        if self.values.ndim != 2:
            raise ValueError(f"{self.modality} features must be 2-D, got shape {self.values.shape}")

    @property
    def T(self) -> int:
        return self.values.shape[0]

    @property
    def D(self) -> int:
        return self.values.shape[1]


@dataclass
class Bag:
    """A video sample: three synchronised sequences and a video-level label"""
    id: str
    rgb: FeatureSequence
    audio: FeatureSequence
    flow: FeatureSequence
    label: int
    frame_labels: Optional[np.ndarray] = None
    # generator internals, never persisted
    planted: Dict[str, np.ndarray] = field(default_factory=dict, repr=False, compare=False)
    lags: Dict[str, int] = field(default_factory=dict, repr=False, compare=False)

    def __post_init__(self):
        lengths = {self.rgb.T, self.audio.T, self.flow.T}
        if len(lengths) != 1:
            raise ValueError(f"bag {self.id}: modalities disagree on T ({sorted(lengths)})")
        if self.label not in (0, 1):
            raise ValueError(f"bag {self.id}: label must be 0 or 1")
        if self.frame_labels is not None:
            self.frame_labels = np.asarray(self.frame_labels, dtype=np.int64).reshape(-1)
            if self.frame_labels.shape[0] != self.T:
                raise ValueError(f"bag {self.id}: frame labels do not cover T={self.T}")
            if int(self.frame_labels.max(initial=0) > 0) != self.label:
                raise ValueError(f"bag {self.id}: video label disagrees with frame labels")

    @property
    def T(self) -> int:
        return self.rgb.T

    def sequence(self, modality: str) -> FeatureSequence:
        return getattr(self, modality)


# ---------------------------------------------------------------------------
# generator
# ---------------------------------------------------------------------------

@dataclass
class SignalLayout:
    """Dataset-wide generator structure shared by every bag"""
    prototype: np.ndarray
    distractor_direction: np.ndarray
    rgb_mixing: np.ndarray
    audio_mixing: np.ndarray
    signal_dims: Dict[str, np.ndarray]
    flow_source: np.ndarray


def signal_layout(cfg: GenConfig) -> SignalLayout:
    """Rebuild the seeded layout (event prototype, mixing, signal dims) for a config"""
    rng = np.random.default_rng(np.random.SeedSequence(cfg.seed).spawn(1)[0])
    prototype = rng.standard_normal(cfg.latent_dim)
    prototype /= np.linalg.norm(prototype)
    other = rng.standard_normal(cfg.latent_dim)
    other -= other.dot(prototype) * prototype
    other /= np.linalg.norm(other)
    sim = cfg.distractor_similarity
    distractor = sim * prototype + np.sqrt(max(0.0, 1.0 - sim ** 2)) * other
    return SignalLayout(
        prototype=prototype,
        distractor_direction=distractor,
        rgb_mixing=rng.standard_normal((cfg.latent_dim, cfg.rgb_signal_dims)),
        audio_mixing=rng.standard_normal((cfg.latent_dim, cfg.audio_signal_dims)),
        signal_dims={
            "rgb": np.sort(rng.choice(cfg.rgb_dim, cfg.rgb_signal_dims, replace=False)),
            "audio": np.sort(rng.choice(cfg.audio_dim, cfg.audio_signal_dims, replace=False)),
            "flow": np.sort(rng.choice(cfg.flow_dim, cfg.flow_signal_dims, replace=False)),
        },
        # flow copies a subset of the RGB signal components
        flow_source=np.sort(rng.choice(cfg.rgb_signal_dims, cfg.flow_signal_dims, replace=False)),
    )


def _shift(trace: np.ndarray, lag: int) -> np.ndarray:
    out = np.zeros_like(trace)
    if lag >= 0:
        out[lag:] = trace[:len(trace) - lag]
    else:
        out[:lag] = trace[-lag:]
    return out


def _place_segments(rng: np.random.Generator, cfg: GenConfig, T: int) -> List[Tuple[int, int]]:
    count = int(rng.integers(1, cfg.max_segments + 1))
    segments = []
    for _ in range(count):
        length = int(rng.integers(cfg.segment_min, cfg.segment_max + 1))
        start = int(rng.integers(0, T - length + 1))
        segments.append((start, start + length))
    return segments


def _modality_codes(layout: SignalLayout, direction: np.ndarray) -> Dict[str, np.ndarray]:
    rgb_code = direction @ layout.rgb_mixing
    return {
        "rgb": rgb_code,
        "audio": direction @ layout.audio_mixing,
        "flow": rgb_code[layout.flow_source],
    }


def _generate_bag(index: int, label: int, cfg: GenConfig, layout: SignalLayout,
                  seed: np.random.SeedSequence) -> Bag:
    rng = np.random.default_rng(seed)
    T = int(rng.integers(cfg.t_min, cfg.t_max + 1))
    dims = {"rgb": cfg.rgb_dim, "audio": cfg.audio_dim, "flow": cfg.flow_dim}
    amplitude = {"rgb": cfg.rgb_amplitude, "audio": cfg.audio_amplitude, "flow": cfg.flow_amplitude}
    values = {m: cfg.noise * rng.standard_normal((T, dims[m])) for m in MODALITIES}

    frame_labels = np.zeros(T, dtype=np.int64)
    envelopes = {m: np.zeros(T) for m in MODALITIES}
    lags = {}
    if label:
        jitter = cfg.event_jitter * rng.standard_normal(cfg.latent_dim)
        event = layout.prototype + jitter
        event /= np.linalg.norm(event)
        codes = _modality_codes(layout, event)
        lags["audio"] = int(rng.integers(cfg.audio_lag[0], cfg.audio_lag[1] + 1))
        lags["flow"] = int(rng.integers(cfg.flow_lag[0], cfg.flow_lag[1] + 1))
        bursts = np.zeros(T)
        for start, end in _place_segments(rng, cfg, T):
            frame_labels[start:end] = 1
            burst = (rng.random(end - start) < cfg.audio_transient_prob).astype(float)
            # onset and offset always sound
            burst[0] = burst[-1] = 1.0
            bursts[start:end] = np.maximum(bursts[start:end], burst)
        envelopes["rgb"] = frame_labels.astype(float)
        envelopes["audio"] = _shift(bursts, lags["audio"])
        envelopes["flow"] = _shift(frame_labels.astype(float), lags["flow"])
        for m in MODALITIES:
            values[m][:, layout.signal_dims[m]] += amplitude[m] * np.outer(envelopes[m], codes[m])

    if rng.random() < cfg.distractor_prob:
        # benign look-alike in a single modality, present in both classes
        modality = MODALITIES[int(rng.integers(len(MODALITIES)))]
        length = int(rng.integers(cfg.segment_min, cfg.segment_max + 1))
        start = int(rng.integers(0, T - length + 1))
        code = _modality_codes(layout, layout.distractor_direction)[modality]
        trace = np.zeros(T)
        trace[start:start + length] = 1.0
        values[modality][:, layout.signal_dims[modality]] += amplitude[modality] * np.outer(trace, code)

    sequences = {m: FeatureSequence(m, values[m]) for m in MODALITIES}
    return Bag(id=f"bag_{index:04d}", label=label, frame_labels=frame_labels,
               planted=envelopes, lags=lags, **sequences)


def generate_dataset(cfg: GenConfig) -> List[Bag]:
    """
    Generate synthetic bags for weakly supervised training.

    Anomalous bags carry one or more planted event segments. The event shows up
    densely in RGB, as short bursts in audio (shifted by a per-bag audio lag) and
    in flow as a copy of part of the RGB signal (shifted by a flow lag). Both
    classes may contain a single-modality distractor that resembles the event.

    Args:
        cfg: Generator settings

    Returns:
        List of bags; exactly round(n_bags * anomaly_fraction) are anomalous
    """
    cfg.validate()
    if cfg.segment_max > cfg.t_min:
        raise ConfigError("gen.segment_max", f"segment length {cfg.segment_max} exceeds shortest bag T={cfg.t_min}")
    layout = signal_layout(cfg)
    streams = np.random.SeedSequence(cfg.seed).spawn(cfg.n_bags + 2)
    n_anomalous = int(round(cfg.n_bags * cfg.anomaly_fraction))
    labels = np.zeros(cfg.n_bags, dtype=np.int64)
    labels[:n_anomalous] = 1
    np.random.default_rng(streams[1]).shuffle(labels)

    bags = [_generate_bag(i, int(labels[i]), cfg, layout, streams[i + 2]) for i in range(cfg.n_bags)]
    logger.info("Generated %d bags (%d anomalous, %d normal)", len(bags), n_anomalous, len(bags) - n_anomalous)
    return bags


# ---------------------------------------------------------------------------
# MVD1 feature files
# ---------------------------------------------------------------------------

def write_feature_file(path, seq: FeatureSequence) -> Path:
    """Write `MVD1`, u32 T, u32 D and the T*D float32 payload, all little-endian"""
    path = Path(path)
    T, D = seq.values.shape
    if T > _MAX_DIM or D > _MAX_DIM or T * D > _MAX_ELEMENTS:
        raise FeatureFileError(path, "size overflow")
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("wb") as handle:
        handle.write(_HEADER.pack(MAGIC, T, D))
        handle.write(np.ascontiguousarray(seq.values, dtype="<f4").tobytes())
    return path


def read_feature_file(path, modality: str = "rgb") -> FeatureSequence:
    path = Path(path)
    raw = path.read_bytes()
    if len(raw) < _HEADER.size or raw[:4] != MAGIC:
        raise FeatureFileError(path, "bad magic")
    _, T, D = _HEADER.unpack_from(raw)
    count = T * D
    if count > _MAX_ELEMENTS:
        raise FeatureFileError(path, "size overflow")
    payload = len(raw) - _HEADER.size
    if payload < count * 4:
        raise FeatureFileError(path, "truncated payload")
    if payload > count * 4:
        raise FeatureFileError(path, "trailing bytes after payload")
    values = np.frombuffer(raw, dtype="<f4", count=count, offset=_HEADER.size).reshape(T, D)
    return FeatureSequence(modality, values.astype(np.float32))


# ---------------------------------------------------------------------------
# manifests
# ---------------------------------------------------------------------------

def write_manifest(path, bags: Sequence[Bag]) -> pd.DataFrame:
    """
    Write every bag's feature files next to the manifest and the manifest itself.

    Args:
        path: Manifest path; feature files go to `<parent>/features/`
        bags: Dataset to persist

    Returns:
        The manifest as a DataFrame (one row per bag)
    """
    path = Path(path)
    root = path.parent
    records = []
    for bag in bags:
        record = {"id": bag.id, "label": int(bag.label), "T": int(bag.T)}
        for modality in MODALITIES:
            rel = Path(FEATURE_DIR) / f"{bag.id}_{modality}.mvd"
            write_feature_file(root / rel, bag.sequence(modality))
            record[f"{modality}_path"] = rel.as_posix()
            record[f"{modality}_dim"] = int(bag.sequence(modality).D)
        record["frame_labels_path"] = None
        if bag.frame_labels is not None:
            rel = Path(FEATURE_DIR) / f"{bag.id}_labels.mvd"
            write_feature_file(root / rel, FeatureSequence("rgb", bag.frame_labels.reshape(-1, 1)))
            record["frame_labels_path"] = rel.as_posix()
        records.append(record)
    frame = pd.DataFrame.from_records(records)
    frame.to_json(path, orient="records", lines=True)
    logger.info("Wrote manifest with %d bags to %s", len(frame), path)
    return frame


def read_manifest(path) -> List[Bag]:
    """Load and validate every bag a manifest references"""
    path = Path(path)
    if not path.exists():
        raise ManifestError("manifest not found", [str(path)])
    root = path.parent
    frame = pd.read_json(path, orient="records", lines=True, dtype=False)
    if frame.empty:
        raise ManifestError("manifest lists no bags", [str(path)])
    required = {"id", "label"} | {f"{m}_path" for m in MODALITIES} | {f"{m}_dim" for m in MODALITIES}
    missing_columns = sorted(required - set(frame.columns))
    if missing_columns:
        raise ManifestError("manifest is missing columns", missing_columns)

    missing = []
    for _, row in frame.iterrows():
        for column in [f"{m}_path" for m in MODALITIES] + ["frame_labels_path"]:
            rel = row.get(column)
            if rel is not None and not pd.isna(rel) and not (root / rel).exists():
                missing.append(str(root / rel))
    if missing:
        raise ManifestError("manifest references missing files", missing)

    mismatched = [f"{m}_dim" for m in MODALITIES if frame[f"{m}_dim"].nunique() != 1]
    if mismatched:
        raise ManifestError("declared dims differ across bags", mismatched)
    declared = {m: int(frame[f"{m}_dim"].iloc[0]) for m in MODALITIES}

    bags, offenders = [], []
    for _, row in frame.iterrows():
        sequences = {m: read_feature_file(root / row[f"{m}_path"], m) for m in MODALITIES}
        for m, seq in sequences.items():
            if seq.D != declared[m]:
                offenders.append(f"{row['id']}:{m} D={seq.D} (declared {declared[m]})")
        frame_labels = None
        rel = row.get("frame_labels_path")
        if rel is not None and not pd.isna(rel):
            frame_labels = read_feature_file(root / rel).values[:, 0].astype(np.int64)
        if offenders:
            continue
        bags.append(Bag(id=str(row["id"]), label=int(row["label"]), frame_labels=frame_labels, **sequences))
    if offenders:
        raise ManifestError("feature dims do not match the manifest", offenders)
    logger.info("Loaded %d bags from %s", len(bags), path)
    return bags


# ---------------------------------------------------------------------------
# batching and splits
# ---------------------------------------------------------------------------

@dataclass
class Batch:
    """Cropped / padded arrays for b bags; `valid` marks real (unpadded) timesteps"""
    rgb: np.ndarray
    audio: np.ndarray
    flow: np.ndarray
    labels: np.ndarray
    valid: np.ndarray
    lengths: np.ndarray
    frame_labels: np.ndarray
    ids: List[str]
    starts: np.ndarray

    @property
    def size(self) -> int:
        return len(self.ids)

    def features(self, modality: str) -> np.ndarray:
        return getattr(self, modality)


def _stratified_pick(rng: np.random.Generator, labels: np.ndarray, batch_size: int) -> np.ndarray:
    pool = np.arange(len(labels))
    replace = batch_size > len(pool)
    chosen: List[int] = []
    if batch_size >= 2 and 0 < labels.sum() < len(labels):
        chosen = [int(rng.choice(pool[labels == 0])), int(rng.choice(pool[labels == 1]))]
    rest = pool if replace else np.setdiff1d(pool, chosen)
    extra = rng.choice(rest, size=batch_size - len(chosen), replace=replace)
    picked = np.concatenate([np.asarray(chosen, dtype=np.int64), extra.astype(np.int64)])
    rng.shuffle(picked)
    return picked


def make_batch(bags: Sequence[Bag], T_train: int, seed, batch_size: Optional[int] = None,
               frame_drop: float = 0.0) -> Batch:
    """
    Crop or pad bags to a common length.

    Args:
        bags: Pool to draw from
        T_train: Output length; longer bags are cropped at a uniform random start,
            shorter bags are zero-padded at the end
        seed: Seed or Generator for crops, sampling and frame drop
        batch_size: Draw this many bags (stratified: both classes when the pool
            has both); None uses every bag in order
        frame_drop: Probability of zeroing a real timestep, independently per modality

    Returns:
        Batch of shape (b, T_train, D) per modality
    """
    if not bags:
        raise ValueError("make_batch needs at least one bag")
    if T_train < 16:
        raise ValueError(f"T_train must be >= 16, got {T_train}")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    labels = np.array([b.label for b in bags], dtype=np.int64)
    order = np.arange(len(bags)) if batch_size is None else _stratified_pick(rng, labels, batch_size)

    dtype = get_default_dtype()
    b = len(order)
    arrays = {m: np.zeros((b, T_train, bags[0].sequence(m).D), dtype=dtype) for m in MODALITIES}
    valid = np.zeros((b, T_train), dtype=bool)
    frame_labels = np.zeros((b, T_train), dtype=np.int64)
    lengths = np.zeros(b, dtype=np.int64)
    starts = np.zeros(b, dtype=np.int64)
    for row, idx in enumerate(order):
        bag = bags[idx]
        start = int(rng.integers(0, bag.T - T_train + 1)) if bag.T > T_train else 0
        length = min(bag.T, T_train)
        for m in MODALITIES:
            arrays[m][row, :length] = bag.sequence(m).values[start:start + length]
        valid[row, :length] = True
        if bag.frame_labels is not None:
            frame_labels[row, :length] = bag.frame_labels[start:start + length]
        lengths[row], starts[row] = length, start

    if frame_drop > 0:
        for m in MODALITIES:
            dropped = (rng.random((b, T_train)) < frame_drop) & valid
            arrays[m][dropped] = 0.0

    return Batch(labels=labels[order], valid=valid, lengths=lengths, frame_labels=frame_labels,
                 ids=[bags[i].id for i in order], starts=starts, **arrays)


def _stratify(labels: np.ndarray) -> Optional[np.ndarray]:
    counts = np.bincount(labels, minlength=2)
    return labels if counts.min() >= 2 else None


def split_dataset(bags: Sequence[Bag], holdout: float = 0.2, seed: int = 0,
                  train_fraction: float = 1.0) -> Tuple[List[Bag], List[Bag]]:
    """
    Stratified held-out split, optionally keeping only part of the training side

    Returns:
        (train_bags, test_bags) in dataset order
    """
    if len(bags) < 2:
        raise ValueError("need at least two bags to split")
    labels = np.array([b.label for b in bags], dtype=np.int64)
    index = np.arange(len(bags))
    train_idx, test_idx = train_test_split(index, test_size=holdout, random_state=seed,
                                           stratify=_stratify(labels))
    if train_fraction < 1.0:
        train_idx, _ = train_test_split(train_idx, train_size=train_fraction, random_state=seed,
                                        stratify=_stratify(labels[train_idx]))
    return [bags[i] for i in sorted(train_idx)], [bags[i] for i in sorted(test_idx)]


def split_test_subsets(bags: Sequence[Bag], seed: int = 0) -> Tuple[List[Bag], List[Bag]]:
    """Halve a test set into two stratified subsets (A, B)"""
    labels = np.array([b.label for b in bags], dtype=np.int64)
    a_idx, b_idx = train_test_split(np.arange(len(bags)), test_size=0.5, random_state=seed,
                                    stratify=_stratify(labels))
    return [bags[i] for i in sorted(a_idx)], [bags[i] for i in sorted(b_idx)]
