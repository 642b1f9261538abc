"""
Modality alignment: projection of secondary features, MFMS search and
sparsification, pairwise alignment losses and the MFMS convergence indicator.

RGB is the primary modality. Audio and flow are secondary: their projected
features are matched dimension by dimension against RGB features, scattered
into the RGB feature space, and pulled towards the (fixed) RGB representation.
"""

import logging
from collections import deque
from dataclasses import dataclass
from pathlib import Path
from typing import Deque, Dict, Iterable, List, Optional, Tuple

import numpy as np
import pandas as pd

from src import autodiff as ad
from src.autodiff import Tensor
from src.config import SPARSIFY_MODES
from src.encoders import Regressor, mil_objective, regress_scores
from src.errors import ShapeError
from src.nn import Linear, Module

logger = logging.getLogger(__name__)

# number of MFMS searches performed by this process
SEARCH_CALLS = 0


class Projection(Module):
    """Residual three-layer MLP, D -> D -> D -> D: z_hat = z + MLP(z)"""

    def __init__(self, d: int, rng: np.random.Generator, identity: bool = True):
        self.fc1 = Linear(d, d, rng)
        self.fc2 = Linear(d, d, rng)
        self.fc3 = Linear(d, d, rng)
        if identity:
            self.identity_init()

    def identity_init(self) -> "Projection":
        self.fc3.zero_()
        return self

    def forward(self, z: Tensor) -> Tensor:
        return z + self.fc3(ad.gelu(self.fc2(ad.gelu(self.fc1(z)))))


def project_secondary(z: Tensor, projection: Projection, modality: str) -> Tensor:
    if modality not in ("audio", "flow"):
        raise ValueError(f"only secondary modalities are projected, got '{modality}'")
    return projection(z)


@dataclass
class MfmsAssignment:
    """theta[i] is the primary dim matched to secondary dim i; theta_hat holds the rest"""
    theta: np.ndarray
    theta_hat: np.ndarray
    d_p: int

    def __post_init__(self):
        self.theta = np.asarray(self.theta, dtype=np.int64)
        self.theta_hat = np.asarray(self.theta_hat, dtype=np.int64)
        if len(np.unique(self.theta)) != len(self.theta):
            raise ValueError("MFMS assignment is not injective")
        if sorted(self.theta_pad.tolist()) != list(range(self.d_p)):
            raise ValueError("theta and theta_hat do not partition the primary dims")

    @property
    def d_s(self) -> int:
        return len(self.theta)

    @property
    def theta_pad(self) -> np.ndarray:
        return np.concatenate([self.theta, self.theta_hat])

    def selected(self) -> frozenset:
        return frozenset(self.theta.tolist())


def similarity_matrix(z_s: np.ndarray, z_p: np.ndarray, valid: Optional[np.ndarray] = None) -> np.ndarray:
    """
    Column cosine similarities between flattened secondary and primary features.

    Both inputs are (b, t, d); rows flagged invalid are dropped before the
    columns are L2-normalised. Zero columns give similarity 0.
    """
    xs = np.asarray(z_s, dtype=np.float64)
    xp = np.asarray(z_p, dtype=np.float64)
    if xs.shape[:-1] != xp.shape[:-1]:
        raise ShapeError("search_mfms", [xs.shape, xp.shape])
    xs = xs.reshape(-1, xs.shape[-1])
    xp = xp.reshape(-1, xp.shape[-1])
    if valid is not None:
        keep = np.asarray(valid, dtype=bool).reshape(-1)
        xs, xp = xs[keep], xp[keep]

    def normalise(x):
        n = np.linalg.norm(x, axis=0, keepdims=True)
        return np.divide(x, n, out=np.zeros_like(x), where=n > 0)

    return normalise(xs).T @ normalise(xp)


def assign_greedy(similarity: np.ndarray, k: Optional[int] = None) -> MfmsAssignment:
    """
    Greedy injective assignment of secondary dims (rows) to primary dims (columns).

    Rows are processed in order. Each row looks at its k most similar columns
    (descending, lower index first on ties) and takes the first one not yet used.
    """
    d_s, d_p = similarity.shape
    if d_s >= d_p:
        raise ValueError(f"MFMS search needs d_s < d_p, got {d_s} and {d_p}")
    k = d_p if k is None else int(k)
    if not d_s <= k <= d_p:
        raise ValueError(f"k={k} violates d_s <= k <= d_p ({d_s}, {d_p})")
    used = np.zeros(d_p, dtype=bool)
    theta = np.empty(d_s, dtype=np.int64)
    for i in range(d_s):
        candidates = np.argsort(-similarity[i], kind="stable")[:k]
        # at most i < k candidates are taken, so a free one always exists
        choice = candidates[~used[candidates]][0]
        theta[i] = choice
        used[choice] = True
    return MfmsAssignment(theta=theta, theta_hat=np.flatnonzero(~used), d_p=d_p)


def search_mfms(z_s, z_p, k: Optional[int] = None, valid: Optional[np.ndarray] = None) -> MfmsAssignment:
    """
    Find the modality-wise feature matching subspace of a secondary modality.

    Runs outside the differentiation graph; tensors are read by value.

    Args:
        z_s: Secondary features (b, t, d_s)
        z_p: Primary features (b, t, d_p)
        k: Candidate list length per secondary dim, d_s <= k <= d_p (default d_p)
        valid: Optional (b, t) mask of real timesteps

    Returns:
        The assignment theta with its complement
    """
    global SEARCH_CALLS
    SEARCH_CALLS += 1
    z_s = z_s.data if isinstance(z_s, Tensor) else z_s
    z_p = z_p.data if isinstance(z_p, Tensor) else z_p
    assignment = assign_greedy(similarity_matrix(z_s, z_p, valid), k)
    theta, theta_hat = ad.constant((assignment.theta, assignment.theta_hat))
    return MfmsAssignment(theta=theta, theta_hat=theta_hat, d_p=assignment.d_p)


def sparsify(z_s: Tensor, assignment: MfmsAssignment, mode: str = "scatter") -> Tensor:
    """
    Lift secondary features into the primary space.

    "scatter" places column i at primary dim theta[i]. "gather" follows the
    literal index expression z_pad[..., theta_pad] for comparison.
    """
    if mode not in SPARSIFY_MODES:
        raise ValueError(f"unknown sparsify mode '{mode}'")
    if z_s.shape[-1] != assignment.d_s:
        raise ShapeError("sparsify", [z_s.shape, (assignment.d_s,)])
    if mode == "scatter":
        return ad.scatter(z_s, assignment.theta, assignment.d_p)
    zeros = Tensor(np.zeros(z_s.shape[:-1] + (assignment.d_p - assignment.d_s,)))
    return ad.take(ad.concat([z_s, zeros], axis=-1), assignment.theta_pad, axis=-1)


def _valid_mean(values: Tensor, valid: Optional[np.ndarray]) -> Tensor:
    if valid is None:
        return ad.mean(values)
    mask = np.asarray(valid, dtype=values.data.dtype)
    return ad.tsum(values * mask) / max(float(mask.sum()), 1.0)


def cosine_align_loss(x: Tensor, y: Tensor, valid: Optional[np.ndarray] = None) -> Tensor:
    """1 - mean per-timestep cosine similarity; zero-norm rows count as cosine 0"""
    if x.shape != y.shape:
        raise ShapeError("cosine_align_loss", [x.shape, y.shape])
    return 1.0 - _valid_mean(ad.cosine_similarity(x, y), valid)


def score_cross_entropy(p: Tensor, q: Tensor, eps: float = 1e-6, valid: Optional[np.ndarray] = None) -> Tensor:
    """Cross-entropy of score sequence q against target sequence p, both clamped to [eps, 1 - eps]"""
    if p.shape != q.shape:
        raise ShapeError("score_cross_entropy", [p.shape, q.shape])
    if not 0.0 < eps < 0.5:
        raise ValueError(f"eps must lie in (0, 0.5), got {eps}")
    cp = ad.clamp(p, eps, 1.0 - eps)
    cq = ad.clamp(q, eps, 1.0 - eps)
    terms = cp * ad.log(cq) + (1.0 - cp) * ad.log(1.0 - cq)
    return -_valid_mean(terms, valid)


def aux_mil(z_hat: Tensor, regressor: Regressor, labels, valid: Optional[np.ndarray] = None,
            eps: float = 1e-6) -> Tuple[Tensor, Tensor]:
    """Score projected features with the modality's own regressor; returns (loss, scores)"""
    scores = regress_scores(z_hat, regressor)
    return mil_objective(scores, labels, valid, eps), scores


ALIGNMENT_TERMS = ("cos_ra", "sce_ra", "cos_rf", "sce_rf", "cos_af", "sce_af", "aux_a", "aux_f")


def alignment_loss(z_r: Tensor, zt_a: Tensor, zt_f: Tensor, s_r: Tensor, sh_a: Tensor, sh_f: Tensor,
                   aux_a: Tensor, aux_f: Tensor, lam: float = 0.01, eps: float = 1e-6,
                   valid: Optional[np.ndarray] = None) -> Tuple[Tensor, Dict[str, Tensor]]:
    """
    Compose the modality alignment loss.

    RGB features and RGB scores enter as constants. Returns the total and each
    of the six pairwise terms plus the two auxiliary MIL terms.
    """
    z_r = ad.stop_gradient(z_r)
    s_r = ad.stop_gradient(s_r)
    parts = {
        "cos_ra": cosine_align_loss(z_r, zt_a, valid),
        "sce_ra": score_cross_entropy(s_r, sh_a, eps, valid),
        "cos_rf": cosine_align_loss(z_r, zt_f, valid),
        "sce_rf": score_cross_entropy(s_r, sh_f, eps, valid),
        "cos_af": cosine_align_loss(zt_a, zt_f, valid),
        "sce_af": score_cross_entropy(sh_a, sh_f, eps, valid),
        "aux_a": aux_a,
        "aux_f": aux_f,
    }
    total = (parts["cos_ra"] + parts["sce_ra"]) + (parts["cos_rf"] + parts["sce_rf"]) \
        + (parts["cos_af"] + parts["sce_af"] + (parts["aux_a"] + parts["aux_f"]) * lam)
    return total, parts


class ConvergenceWindow:
    """
    Sliding window over the last `w` MFMS assignments.

    For the buffered sets M_j, f^k counts how often primary dim k was selected;
    m = w' * d_s / (f_max * n) where n is the number of dims reaching f_max and
    w' the current buffer length. m is 1 exactly when every buffered set is the same.
    """

    def __init__(self, d_s: int, d_p: int, w: int = 50):
        if w < 1:
            raise ValueError("window length must be positive")
        self.d_s = d_s
        self.d_p = d_p
        self.w = w
        self.buffer: Deque[MfmsAssignment] = deque(maxlen=w)

    def __len__(self):
        return len(self.buffer)

    def selection_frequency(self) -> np.ndarray:
        counts = np.zeros(self.d_p, dtype=np.int64)
        for assignment in self.buffer:
            counts[assignment.theta] += 1
        return counts

    def indicator(self) -> float:
        if not self.buffer:
            raise ValueError("convergence indicator of an empty window")
        counts = self.selection_frequency()
        f_max = counts.max()
        n = int(np.count_nonzero(counts == f_max))
        return len(self.buffer) * self.d_s / (f_max * n)

    def update(self, assignment: MfmsAssignment) -> float:
        if assignment.d_s != self.d_s or assignment.d_p != self.d_p:
            raise ShapeError("convergence_update", [(self.d_s, self.d_p), (assignment.d_s, assignment.d_p)])
        self.buffer.append(assignment)
        return self.indicator()


def convergence_update(window: ConvergenceWindow, assignment: MfmsAssignment) -> float:
    return window.update(assignment)


def write_convergence_trace(records: Iterable[Dict], path) -> Path:
    """One JSON line per iteration: iteration, m_ra, m_rf, theta_ra, theta_rf"""
    path = Path(path)
    columns = ["iteration", "m_ra", "m_rf", "theta_ra", "theta_rf"]
    frame = pd.DataFrame.from_records(list(records), columns=columns)
    frame.to_json(path, orient="records", lines=True)
    return path


def write_selection_frequency(window_ra: ConvergenceWindow, window_rf: ConvergenceWindow, path) -> Path:
    """Per-RGB-dimension selection counts over each window, as CSV"""
    path = Path(path)
    frame = pd.DataFrame({
        "rgb_dim": np.arange(window_ra.d_p),
        "audio_count": window_ra.selection_frequency(),
        "flow_count": window_rf.selection_frequency(),
    })
    frame.to_csv(path, index=False)
    return path
