"""
Training engine: the full detector, total loss composition, joint Adam training,
run-directory persistence and the ablation / sweep drivers
"""

import contextlib
import copy
import json
import logging
import math
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from tqdm.auto import tqdm

from src import autodiff as ad
from src.alignment import (ConvergenceWindow, MfmsAssignment, Projection, aux_mil, alignment_loss,
                           search_mfms, sparsify, write_convergence_trace, write_selection_frequency)
from src.autodiff import AdamState, Graph, Tensor, adam_step
from src.config import ABLATION_TERMS, EncoderConfig, ExperimentConfig, FusionConfig, TrainConfig
from src.datagen import MAGIC as FEATURE_MAGIC, MODALITIES, Bag, Batch, make_batch, split_dataset
from src.encoders import ModalityEncoder, Regressor, mil_objective, regress_scores
from src.errors import FeatureFileError, NonFiniteLossError, RunLockedError, ShapeError
from src.evaluation import evaluate
from src.fusion import FusionEncoder, fuse, triplet_loss
from src.nn import Module

logger = logging.getLogger(__name__)

# Run directory layout
CONFIG_NAME = "config.yaml"
CHECKPOINT_NAME = "checkpoint.mvdp"
SIDECAR_NAME = "checkpoint.f64.npz"
RUNLOG_NAME = "runlog.jsonl"
CONVERGENCE_NAME = "convergence.jsonl"
FREQUENCY_NAME = "mfms_frequency.csv"
SPLIT_NAME = "split.json"
LOCK_NAME = ".lock"

CHECKPOINT_MAGIC = b"MVDP"

# Loss-ablation rows: row index -> terms removed from the total loss
ABLATION_ROWS: Dict[int, Tuple[str, ...]] = {
    1: ("umil",),
    2: ("ma",),
    3: ("mmil",),
    4: ("triplet",),
    5: ("umil", "ma"),
    6: (),
}

# (lambda_ma, lambda_mmil, lambda_triplet) combinations for the weight study
LAMBDA_GRID: List[Tuple[float, float, float]] = [
    (l1, l2, l3) for l1 in (1.0, 10.0) for l2 in (1.0, 5.0, 10.0) for l3 in (0.001, 0.01)
]


class ViolenceDetector(Module):
    """
    Every trainable component of the three-stage detector.

    Stage one encodes and scores each modality; stage two projects audio and
    flow; stage three fuses [audio, RGB, flow] and scores the fused sequence.
    """

    def __init__(self, raw_dims: Dict[str, int], encoder_cfg: EncoderConfig,
                 fusion_cfg: FusionConfig, seed: int = 0):
        rng = np.random.default_rng(seed)
        dims = encoder_cfg.dims()
        self.raw_dims = dict(raw_dims)
        self.dims = dims
        self.fusion_margin = fusion_cfg.margin
        self.rgb_encoder = ModalityEncoder("rgb", raw_dims["rgb"], dims["rgb"], encoder_cfg, rng)
        self.audio_encoder = ModalityEncoder("audio", raw_dims["audio"], dims["audio"], encoder_cfg, rng)
        self.flow_encoder = ModalityEncoder("flow", raw_dims["flow"], dims["flow"], encoder_cfg, rng)
        self.rgb_regressor = Regressor(dims["rgb"], rng)
        self.audio_regressor = Regressor(dims["audio"], rng)
        self.flow_regressor = Regressor(dims["flow"], rng)
        self.audio_projection = Projection(dims["audio"], rng)
        self.flow_projection = Projection(dims["flow"], rng)
        self.fusion_encoder = FusionEncoder(dims["audio"] + dims["rgb"] + dims["flow"], fusion_cfg, rng)
        self.fusion_regressor = Regressor(fusion_cfg.out_dim, rng)

    def encoder(self, modality: str) -> ModalityEncoder:
        return getattr(self, f"{modality}_encoder")

    def regressor(self, modality: str) -> Regressor:
        return getattr(self, f"{modality}_regressor")

    def projection(self, modality: str) -> Projection:
        return getattr(self, f"{modality}_projection")

    @property
    def dtype(self):
        """Floating-point type of the parameters (every parameter shares it)"""
        return next(iter(self.named_parameters().values())).data.dtype.type

    def parameter_groups(self) -> List[str]:
        return sorted({name.split(".")[0] for name in self.named_parameters()})

    def encode(self, features: Dict[str, Tensor], valid: Optional[np.ndarray] = None) -> Dict[str, Tensor]:
        for m in MODALITIES:
            if features[m].shape[-1] != self.raw_dims[m]:
                raise ShapeError("encode", [features[m].shape, (self.raw_dims[m],)],
                                 f"{m} features have {features[m].shape[-1]} dims, model expects {self.raw_dims[m]}")
        return {m: self.encoder(m)(features[m], valid) for m in MODALITIES}

    def detect(self, z_r: Tensor, zh_a: Tensor, zh_f: Tensor,
               valid: Optional[np.ndarray] = None) -> Tuple[Tensor, Tensor]:
        """Fuse, encode and score; returns (fused features, fused scores)"""
        h = self.fusion_encoder(fuse(zh_a, z_r, zh_f), valid)
        return h, self.fusion_regressor(h)

    def score(self, features: Dict[str, Tensor], valid: Optional[np.ndarray] = None) -> Dict[str, Tensor]:
        """Inference path: encode, score, project, fuse and score. No subspace search."""
        z = self.encode(features, valid)
        scores = {m: regress_scores(z[m], self.regressor(m)) for m in MODALITIES}
        zh_a = self.audio_projection(z["audio"])
        zh_f = self.flow_projection(z["flow"])
        _, scores["fused"] = self.detect(z["rgb"], zh_a, zh_f, valid)
        return scores

    def state_dict(self) -> Dict[str, np.ndarray]:
        return {name: p.data.copy() for name, p in self.named_parameters().items()}

    def load_state_dict(self, state: Dict[str, np.ndarray]) -> None:
        params = self.named_parameters()
        missing = sorted(set(params) - set(state))
        unexpected = sorted(set(state) - set(params))
        if missing or unexpected:
            raise ShapeError("load_state_dict", [], f"checkpoint names differ: missing {missing[:5]}, "
                                                    f"unexpected {unexpected[:5]}")
        for name, param in params.items():
            value = np.asarray(state[name])
            if value.shape != param.shape:
                raise ShapeError("load_state_dict", [param.shape, value.shape],
                                 f"checkpoint entry {name} has shape {value.shape}, model expects {param.shape}")
            param.data = value.astype(param.data.dtype)


@dataclass
class LossBreakdown:
    """Total loss, its weighted terms and the per-step side products"""
    total: Tensor
    terms: Dict[str, Tensor]
    parts: Dict[str, Tensor]
    assignments: Dict[str, MfmsAssignment]
    scores: Dict[str, Tensor]

    def values(self) -> Dict[str, float]:
        out = {term: (self.terms[term].item() if term in self.terms else 0.0) for term in ABLATION_TERMS}
        out["total"] = self.total.item()
        return out


def loss_weights(cfg: TrainConfig) -> Dict[str, float]:
    return {"umil": 1.0, "ma": cfg.lambda_ma, "mmil": cfg.lambda_mmil, "triplet": cfg.lambda_triplet}


def total_loss(detector: ViolenceDetector, batch: Batch, cfg: TrainConfig,
               features: Optional[Dict[str, Tensor]] = None) -> LossBreakdown:
    """
    Full training forward pass.

    L = L_umil + lambda_ma * L_ma + lambda_mmil * L_mmil + lambda_triplet * L_triplet.
    Ablated terms are not evaluated and contribute nothing to value or gradient.
    Both MFMS searches run every step so the convergence windows keep moving.
    """
    if features is None:
        features = {m: Tensor(batch.features(m)) for m in MODALITIES}
    valid, labels = batch.valid, batch.labels
    z = detector.encode(features, valid)
    scores = {m: regress_scores(z[m], detector.regressor(m)) for m in MODALITIES}
    zh = {m: detector.projection(m)(z[m]) for m in ("audio", "flow")}
    assignments = {m: search_mfms(zh[m], z["rgb"], cfg.k_search, valid) for m in ("audio", "flow")}

    terms: Dict[str, Tensor] = {}
    parts: Dict[str, Tensor] = {}
    if cfg.enabled("umil"):
        per_modality = [mil_objective(scores[m], labels, valid, cfg.eps) for m in MODALITIES]
        terms["umil"] = per_modality[0] + per_modality[1] + per_modality[2]
    if cfg.enabled("ma"):
        if cfg.align_to_encoder:
            zh_ma = zh
        else:
            zh_ma = {m: detector.projection(m)(ad.stop_gradient(z[m])) for m in ("audio", "flow")}
        sparse = {m: sparsify(zh_ma[m], assignments[m], cfg.sparsify_mode) for m in ("audio", "flow")}
        aux = {m: aux_mil(zh_ma[m], detector.regressor(m), labels, valid, cfg.eps) for m in ("audio", "flow")}
        for m in ("audio", "flow"):
            scores[f"{m}_projected"] = aux[m][1]
        terms["ma"], parts = alignment_loss(
            z["rgb"], sparse["audio"], sparse["flow"], scores["rgb"],
            aux["audio"][1], aux["flow"][1], aux["audio"][0], aux["flow"][0],
            lam=cfg.lambda_aux, eps=cfg.eps, valid=valid)
    if cfg.enabled("mmil") or cfg.enabled("triplet"):
        h, scores["fused"] = detector.detect(z["rgb"], zh["audio"], zh["flow"], valid)
        if cfg.enabled("mmil"):
            terms["mmil"] = mil_objective(scores["fused"], labels, valid, cfg.eps)
        if cfg.enabled("triplet"):
            terms["triplet"] = triplet_loss(h, scores["fused"], labels, valid, margin=detector.fusion_margin)

    weights = loss_weights(cfg)
    total = Tensor(0.0)
    for term in ABLATION_TERMS:
        if term in terms:
            total = total + terms[term] * weights[term]
    return LossBreakdown(total=total, terms=terms, parts=parts, assignments=assignments, scores=scores)


def loss_graph(detector: ViolenceDetector, batch: Batch, cfg: TrainConfig) -> Graph:
    """A re-runnable graph over the batch features with outputs `loss` plus each active term"""

    def build(inputs: Dict[str, Tensor]) -> Dict[str, Tensor]:
        breakdown = total_loss(detector, batch, cfg, features=inputs)
        graph.breakdown = breakdown
        return {"loss": breakdown.total, **breakdown.terms}

    graph = Graph(build, params=detector.named_parameters(),
                  input_shapes={m: (None, batch.valid.shape[1], detector.raw_dims[m]) for m in MODALITIES})
    return graph


def batch_inputs(batch: Batch) -> Dict[str, np.ndarray]:
    return {m: batch.features(m) for m in MODALITIES}


class RunLog:
    """Per-iteration training records, persisted as line-delimited JSON"""
    COLUMNS = ["iteration", "umil", "ma", "mmil", "triplet", "total", "m_ra", "m_rf", "eval_ap"]

    def __init__(self, records: Optional[Iterable[Dict]] = None):
        self.records: List[Dict] = list(records or [])

    def __len__(self):
        return len(self.records)

    def __iter__(self):
        return iter(self.records)

    def append(self, record: Dict) -> None:
        if self.records and record["iteration"] <= self.records[-1]["iteration"]:
            raise ValueError("run log iterations must increase")
        self.records.append(record)

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame.from_records(self.records, columns=self.COLUMNS)

    def trailing_mean(self, column: str, end: int, window: int = 50) -> float:
        frame = self.to_frame()
        values = frame[column].iloc[max(0, end - window):end]
        return float(values.mean())

    def save(self, path) -> Path:
        path = Path(path)
        self.to_frame().to_json(path, orient="records", lines=True)
        return path

    @classmethod
    def load(cls, path) -> "RunLog":
        path = Path(path)
        if path.stat().st_size == 0:
            return cls()
        frame = pd.read_json(path, orient="records", lines=True)
        return cls(frame.to_dict(orient="records"))


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

def write_checkpoint(path, state: Dict[str, np.ndarray]) -> Path:
    """
    Write parameters in the MVDP container.

    Layout: b"MVDP", u32 entry count, then per entry: u16 name length, UTF-8
    name, u8 ndim, ndim x u32 dims, and an MVD1 block holding the values as a
    (rows, last_dim) float32 matrix. A float64 `.npz` sidecar keeps exact values.
    """
    path = Path(path)
    with path.open("wb") as handle:
        handle.write(CHECKPOINT_MAGIC)
        handle.write(struct.pack("<I", len(state)))
        for name, value in state.items():
            encoded = name.encode("utf-8")
            value = np.asarray(value)
            matrix = value.reshape(-1, value.shape[-1]) if value.ndim else value.reshape(1, 1)
            handle.write(struct.pack("<H", len(encoded)))
            handle.write(encoded)
            handle.write(struct.pack("<B", value.ndim))
            handle.write(struct.pack(f"<{value.ndim}I", *value.shape))
            handle.write(struct.pack("<4sII", FEATURE_MAGIC, *matrix.shape))
            handle.write(np.ascontiguousarray(matrix, dtype="<f4").tobytes())
    np.savez(path.with_name(SIDECAR_NAME), **state)
    return path


def read_checkpoint(path) -> Dict[str, np.ndarray]:
    """Read an MVDP checkpoint; exact float64 values come from the sidecar when present"""
    path = Path(path)
    if not path.exists():
        raise FeatureFileError(path, "checkpoint not found")
    raw = path.read_bytes()
    if raw[:4] != CHECKPOINT_MAGIC:
        raise FeatureFileError(path, "bad magic")
    state: Dict[str, np.ndarray] = {}
    try:
        (count,) = struct.unpack_from("<I", raw, 4)
        offset = 8
        for _ in range(count):
            (name_len,) = struct.unpack_from("<H", raw, offset)
            offset += 2
            name = raw[offset:offset + name_len].decode("utf-8")
            offset += name_len
            (ndim,) = struct.unpack_from("<B", raw, offset)
            offset += 1
            shape = struct.unpack_from(f"<{ndim}I", raw, offset)
            offset += 4 * ndim
            magic, rows, cols = struct.unpack_from("<4sII", raw, offset)
            offset += 12
            if magic != FEATURE_MAGIC:
                raise FeatureFileError(path, f"bad block magic for {name}")
            nbytes = rows * cols * 4
            if offset + nbytes > len(raw):
                raise FeatureFileError(path, "truncated payload")
            values = np.frombuffer(raw, dtype="<f4", count=rows * cols, offset=offset)
            offset += nbytes
            state[name] = values.astype(np.float64).reshape(shape)
    except struct.error:
        raise FeatureFileError(path, "truncated payload") from None

    sidecar = path.with_name(SIDECAR_NAME)
    if sidecar.exists():
        with np.load(sidecar) as exact:
            if set(exact.files) == set(state):
                state = {name: exact[name] for name in state}
            else:
                logger.warning("Ignoring %s: parameter names differ from the checkpoint", sidecar)
    return state


@contextlib.contextmanager
def run_lock(run_dir):
    """Own a run directory for the duration of a command"""
    lock = Path(run_dir) / LOCK_NAME
    lock.parent.mkdir(parents=True, exist_ok=True)
    try:
        fd = os.open(lock, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
    except FileExistsError:
        raise RunLockedError(f"{run_dir} is locked by another command ({lock})") from None
    try:
        os.write(fd, str(os.getpid()).encode())
        os.close(fd)
        yield lock
    finally:
        lock.unlink(missing_ok=True)


# ---------------------------------------------------------------------------
# trainer
# ---------------------------------------------------------------------------

class Trainer:
    """
    Joint optimiser for the whole detector
    """

    def __init__(self, config: ExperimentConfig, raw_dims: Dict[str, int]):
        """
        Initialize the detector, optimiser state and convergence windows

        Args:
            config: Resolved experiment configuration
            raw_dims: Input feature dims per modality
        """
        self.config = config
        tc = config.train
        self.dtype = tc.dtype
        with ad.default_dtype(self.dtype):
            self.detector = ViolenceDetector(raw_dims, config.encoder, config.fusion, seed=tc.seed)
        self.adam = AdamState(lr=tc.lr, beta1=tc.beta1, beta2=tc.beta2,
                              weight_decay=tc.weight_decay, eps_adam=tc.adam_eps)
        dims = config.encoder.dims()
        self.window_ra = ConvergenceWindow(dims["audio"], dims["rgb"], tc.window)
        self.window_rf = ConvergenceWindow(dims["flow"], dims["rgb"], tc.window)
        self.rng = np.random.default_rng(np.random.SeedSequence(tc.seed).spawn(2)[1])
        self.runlog = RunLog()
        self.convergence: List[Dict] = []
        self.iteration = 0

    def _check_finite(self, breakdown: LossBreakdown) -> None:
        # forward order: umil, the alignment parts, mmil, triplet
        for term in ABLATION_TERMS:
            if term == "ma":
                for name, part in breakdown.parts.items():
                    if not np.isfinite(part.data).all():
                        raise NonFiniteLossError(f"ma.{name}", self.iteration)
            if term in breakdown.terms and not np.isfinite(breakdown.terms[term].data).all():
                raise NonFiniteLossError(term, self.iteration)
        if not np.isfinite(breakdown.total.data).all():
            raise NonFiniteLossError("total", self.iteration)

    def train_step(self, batch: Batch) -> Dict:
        """
        One forward / backward / Adam update on a batch

        Returns:
            The RunLog record of this iteration
        """
        with ad.default_dtype(self.dtype):
            return self._step(batch)

    def _step(self, batch: Batch) -> Dict:
        graph = loss_graph(self.detector, batch, self.config.train)
        ad.forward(graph, batch_inputs(batch))
        breakdown = graph.breakdown
        self._check_finite(breakdown)
        grads = graph.backward("loss")
        for name, grad in grads.items():
            if not np.isfinite(grad).all():
                raise NonFiniteLossError(f"gradient of {name}", self.iteration)
        adam_step(self.adam, self.detector.named_parameters(), grads)

        m_ra = self.window_ra.update(breakdown.assignments["audio"])
        m_rf = self.window_rf.update(breakdown.assignments["flow"])
        record = {"iteration": self.iteration, **breakdown.values(), "m_ra": m_ra, "m_rf": m_rf,
                  "eval_ap": math.nan}
        self.runlog.append(record)
        self.convergence.append({
            "iteration": self.iteration, "m_ra": m_ra, "m_rf": m_rf,
            "theta_ra": breakdown.assignments["audio"].theta.tolist(),
            "theta_rf": breakdown.assignments["flow"].theta.tolist(),
        })
        logger.debug("iter %d %s", self.iteration, {k: round(v, 6) for k, v in record.items()
                                                    if isinstance(v, float)})
        self.iteration += 1
        return record

    def train_run(self, train_bags: Sequence[Bag], eval_bags: Optional[Sequence[Bag]] = None,
                  iterations: Optional[int] = None, progress: bool = False) -> RunLog:
        """
        Train for a number of iterations with periodic held-out evaluation

        Args:
            train_bags: Pool that batches are drawn from
            eval_bags: Optional held-out bags for periodic fused AP
            iterations: Defaults to the configured count
            progress: Show a progress bar

        Returns:
            The accumulated RunLog
        """
        tc = self.config.train
        iterations = tc.iterations if iterations is None else iterations
        with ad.default_dtype(self.dtype):
            self._run(train_bags, eval_bags, iterations, progress)
        return self.runlog

    def _run(self, train_bags, eval_bags, iterations: int, progress: bool) -> None:
        tc = self.config.train
        for _ in tqdm(range(iterations), desc="train", disable=not progress):
            batch = make_batch(train_bags, tc.t_train, self.rng, batch_size=tc.batch_size,
                               frame_drop=tc.frame_drop)
            record = self.train_step(batch)
            if eval_bags and tc.eval_every and self.iteration % tc.eval_every == 0:
                record["eval_ap"] = evaluate(self.detector, eval_bags).ap_fused
            if tc.log_every and (self.iteration % tc.log_every == 0 or self.iteration == iterations):
                logger.info("iter %d total=%.4f umil=%.4f ma=%.4f mmil=%.4f triplet=%.4f m_ra=%.3f m_rf=%.3f",
                            record["iteration"], record["total"], record["umil"], record["ma"],
                            record["mmil"], record["triplet"], record["m_ra"], record["m_rf"])

    def save(self, run_dir) -> Path:
        """Persist the checkpoint, logs, convergence trace and MFMS frequencies"""
        run_dir = Path(run_dir)
        run_dir.mkdir(parents=True, exist_ok=True)
        self.config.save(run_dir / CONFIG_NAME)
        write_checkpoint(run_dir / CHECKPOINT_NAME, self.detector.state_dict())
        self.runlog.save(run_dir / RUNLOG_NAME)
        write_convergence_trace(self.convergence, run_dir / CONVERGENCE_NAME)
        write_selection_frequency(self.window_ra, self.window_rf, run_dir / FREQUENCY_NAME)
        logger.info("Saved run to %s", run_dir)
        return run_dir

    @classmethod
    def load(cls, run_dir) -> "Trainer":
        """Rebuild a trainer from a run directory's config and checkpoint"""
        run_dir = Path(run_dir)
        checkpoint = run_dir / CHECKPOINT_NAME
        if not checkpoint.exists():
            raise FeatureFileError(checkpoint, "checkpoint not found")
        config = ExperimentConfig.from_yaml(run_dir / CONFIG_NAME).validate()
        state = read_checkpoint(checkpoint)
        raw_dims = {m: int(state[f"{m}_encoder.conv.weight"].shape[1]) for m in MODALITIES}
        trainer = cls(config, raw_dims)
        trainer.detector.load_state_dict(state)
        if (run_dir / RUNLOG_NAME).exists():
            trainer.runlog = RunLog.load(run_dir / RUNLOG_NAME)
            trainer.iteration = len(trainer.runlog)
        return trainer


@dataclass
class TrainResult:
    trainer: Trainer
    runlog: RunLog
    train_bags: List[Bag] = field(repr=False)
    test_bags: List[Bag] = field(repr=False)

    @property
    def params(self) -> Dict[str, np.ndarray]:
        return self.trainer.detector.state_dict()


def write_split(path, train_bags: Sequence[Bag], test_bags: Sequence[Bag], config: ExperimentConfig) -> Path:
    path = Path(path)
    payload = {
        "seed": config.train.seed,
        "holdout": config.train.holdout,
        "train_fraction": config.train.train_fraction,
        "train": [b.id for b in train_bags],
        "test": [b.id for b in test_bags],
    }
    path.write_text(json.dumps(payload, indent=2), encoding="utf-8")
    return path


def read_split(path) -> Dict:
    return json.loads(Path(path).read_text(encoding="utf-8"))


def train_run(config: ExperimentConfig, bags: Sequence[Bag], run_dir=None, progress: bool = False) -> TrainResult:
    """
    Split, train and (optionally) persist a full run

    Args:
        config: Validated experiment configuration
        bags: Full dataset; a stratified held-out part is kept for evaluation
        run_dir: Where to write config, checkpoint and logs (skipped when None)
        progress: Show a progress bar

    Returns:
        TrainResult with the trainer, its RunLog and both splits
    """
    tc = config.train
    train_bags, test_bags = split_dataset(bags, tc.holdout, tc.seed, tc.train_fraction)
    raw_dims = {m: bags[0].sequence(m).D for m in MODALITIES}
    trainer = Trainer(config, raw_dims)
    logger.info("Training on %d bags (%d held out), %d parameters, ablate=%s",
                len(train_bags), len(test_bags), trainer.detector.parameter_count(), tc.ablate or "none")
    runlog = trainer.train_run(train_bags, test_bags, progress=progress)
    if run_dir is not None:
        trainer.save(run_dir)
        write_split(Path(run_dir) / SPLIT_NAME, train_bags, test_bags, config)
    return TrainResult(trainer=trainer, runlog=runlog, train_bags=train_bags, test_bags=test_bags)


def train_step(trainer: Trainer, batch: Batch) -> Dict:
    return trainer.train_step(batch)


# ---------------------------------------------------------------------------
# experiment drivers
# ---------------------------------------------------------------------------

def _evaluate_variant(config: ExperimentConfig, bags: Sequence[Bag], **labels) -> Dict:
    result = train_run(config, bags)
    report = evaluate(result.trainer.detector, result.test_bags)
    return {**labels, "ap_fused": report.ap_fused, "ap_rgb": report.ap_rgb,
            "ap_audio": report.ap_audio, "ap_flow": report.ap_flow}


def run_ablation_grid(config: ExperimentConfig, bags: Sequence[Bag],
                      rows: Optional[Dict[int, Sequence[str]]] = None,
                      seeds: Sequence[int] = (0, 1, 2, 3, 4)) -> pd.DataFrame:
    """Train every loss-ablation row for every seed; one record per (row, seed)"""
    rows = ABLATION_ROWS if rows is None else rows
    records = []
    for row, ablate in rows.items():
        for seed in seeds:
            variant = copy.deepcopy(config)
            variant.train.ablate = list(ablate)
            variant.train.seed = int(seed)
            variant.validate()
            logger.info("Ablation row %s seed %s (ablate=%s)", row, seed, list(ablate) or "none")
            records.append(_evaluate_variant(variant, bags, row=row, ablate="+".join(ablate) or "none",
                                             seed=int(seed)))
    return pd.DataFrame.from_records(records)


def ablation_summary(frame: pd.DataFrame) -> pd.DataFrame:
    """Median APs per ablation row"""
    return frame.groupby(["row", "ablate"], as_index=False)[["ap_fused", "ap_rgb", "ap_audio", "ap_flow"]].median()


def run_dimension_sweep(config: ExperimentConfig, bags: Sequence[Bag],
                        audio_dims: Sequence[int] = (16, 32, 48, 64, 80, 96),
                        flow_dims: Sequence[int] = (16, 32, 48, 64, 80, 96),
                        seed: Optional[int] = None) -> pd.DataFrame:
    """Fused AP over (D_A, D_F) pairs that keep D_R > D_F > D_A"""
    records = []
    for d_audio in audio_dims:
        for d_flow in flow_dims:
            variant = copy.deepcopy(config)
            variant.encoder.d_audio = int(d_audio)
            variant.encoder.d_flow = int(d_flow)
            if seed is not None:
                variant.train.seed = int(seed)
            try:
                variant.validate()
            except ValueError as exc:
                logger.info("Skipping D_A=%s D_F=%s: %s", d_audio, d_flow, exc)
                continue
            records.append(_evaluate_variant(variant, bags, d_audio=int(d_audio), d_flow=int(d_flow),
                                             seed=variant.train.seed))
    return pd.DataFrame.from_records(records)


def run_lambda_grid(config: ExperimentConfig, bags: Sequence[Bag],
                    grid: Sequence[Tuple[float, float, float]] = tuple(LAMBDA_GRID),
                    seed: Optional[int] = None) -> pd.DataFrame:
    """Fused AP for each (lambda_ma, lambda_mmil, lambda_triplet) combination"""
    records = []
    for index, (l1, l2, l3) in enumerate(grid, start=1):
        variant = copy.deepcopy(config)
        variant.train.lambda_ma, variant.train.lambda_mmil, variant.train.lambda_triplet = l1, l2, l3
        if seed is not None:
            variant.train.seed = int(seed)
        variant.validate()
        records.append(_evaluate_variant(variant, bags, index=index, lambda_ma=l1, lambda_mmil=l2,
                                         lambda_triplet=l3, seed=variant.train.seed))
    return pd.DataFrame.from_records(records)
