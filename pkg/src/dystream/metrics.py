"""Evaluation metrics computed against the synthetic world's oracle.

Channel naming: the "exp" group maps to the world's mouth channels and the
"pose" group to the remaining channels. The sync proxy replaces a learned
audiovisual sync network: the oracle's deterministic mouth signal serves as
the ground-truth audio embedding, and sync confidence is the maximum Pearson
correlation against the generated mouth channels over temporal shifts. This
substitution is the central measurement decision of the repo.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tensor import RngState

COV_REGULARIZATION = 1e-6
SID_WINDOW = 8
SID_K_EXP = 8
SID_K_POSE = 4
KMEANS_ITERS = 50
DRIFT_TAIL_FRACTION = 0.2


@dataclass
class MetricsReport:
    sync_proxy: float
    sync_offset_frames: int
    fd_exp: float
    fd_pose: float
    mse: float
    var_exp: float
    var_pose: float
    sid_exp: float
    sid_pose: float
    drift: float

    CSV_HEADER = (
        "episode,sync,offset,fd_exp,fd_pose,mse,var_exp,var_pose,sid_exp,sid_pose,drift"
    )

    def csv_row(self, episode: int) -> str:
        return (
            f"{episode},{self.sync_proxy:.6g},{self.sync_offset_frames},"
            f"{self.fd_exp:.6g},{self.fd_pose:.6g},{self.mse:.6g},"
            f"{self.var_exp:.6g},{self.var_pose:.6g},"
            f"{self.sid_exp:.6g},{self.sid_pose:.6g},{self.drift:.6g}"
        )

    def summary_lines(self) -> list[str]:
        return [
            f"sync_proxy={self.sync_proxy:.6g}",
            f"sync_offset_frames={self.sync_offset_frames}",
            f"fd_exp={self.fd_exp:.6g}",
            f"fd_pose={self.fd_pose:.6g}",
            f"mse={self.mse:.6g}",
            f"var_exp={self.var_exp:.6g}",
            f"var_pose={self.var_pose:.6g}",
            f"sid_exp={self.sid_exp:.6g}",
            f"sid_pose={self.sid_pose:.6g}",
            f"drift={self.drift:.6g}",
        ]


def sync_proxy(
    generated_mouth: np.ndarray, oracle_mouth: np.ndarray, max_offset: int = 5
) -> tuple[float, int]:
    """Max Pearson correlation over integer shifts tau in [-max_offset, max_offset].

    Shift convention: at offset tau the generated signal at frame i is
    compared with the oracle at frame i + tau, so a generator that lags the
    oracle by two frames peaks at tau = -2. Channels are flattened into the
    correlation. Raises on constant (zero-variance) signals.
    """
    if generated_mouth.shape != oracle_mouth.shape:
        raise ValueError("generated/oracle mouth signals must share shape")
    frames = generated_mouth.shape[0]
    if frames <= max_offset + 1:
        raise ValueError("sequence too short for the requested offset range")
    best = -np.inf
    best_tau = 0
    for tau in range(-max_offset, max_offset + 1):
        if tau >= 0:
            a = generated_mouth[: frames - tau]
            b = oracle_mouth[tau:]
        else:
            a = generated_mouth[-tau:]
            b = oracle_mouth[: frames + tau]
        x = a.ravel()
        y = b.ravel()
        sx = x.std()
        sy = y.std()
        if sx == 0.0 or sy == 0.0:
            raise ValueError("sync_proxy is undefined for constant signals")
        r = float(((x - x.mean()) * (y - y.mean())).mean() / (sx * sy))
        if r > best:
            best = r
            best_tau = tau
    return best, best_tau


def _sym_sqrtm(mat: np.ndarray) -> np.ndarray:
    vals, vecs = np.linalg.eigh(mat)
    vals = np.clip(vals, 0.0, None)
    return (vecs * np.sqrt(vals)) @ vecs.T


def frechet_distance(a: np.ndarray, b: np.ndarray) -> float:
    """Gaussian-moment distance between two sample sets of equal dimension.

    Returns ||mu_a - mu_b||^2 + tr(C_a + C_b - 2 (C_a C_b)^{1/2}) with
    population covariances regularized by 1e-6 I; the matrix square root is
    taken through an eigendecomposition of the symmetrized product.
    """
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[1]:
        raise ValueError("frechet_distance needs [n, d] sample sets of equal d")
    d = a.shape[1]
    mu_a, mu_b = a.mean(axis=0), b.mean(axis=0)
    ca = np.cov(a, rowvar=False, ddof=0).reshape(d, d) + COV_REGULARIZATION * np.eye(d)
    cb = np.cov(b, rowvar=False, ddof=0).reshape(d, d) + COV_REGULARIZATION * np.eye(d)
    sa = _sym_sqrtm(ca)
    cross = _sym_sqrtm(sa @ cb @ sa)
    mean_term = float(((mu_a - mu_b) ** 2).sum())
    trace_term = float(np.trace(ca) + np.trace(cb) - 2.0 * np.trace(cross))
    return mean_term + trace_term


def variance_metric(motion: np.ndarray, channels: np.ndarray | None = None) -> float:
    """Sum over channels of the per-channel temporal (population) variance."""
    if motion.shape[0] < 2:
        raise ValueError("variance needs at least two frames")
    sel = motion if channels is None else motion[:, channels]
    return float(sel.var(axis=0, ddof=0).sum())


def mse_metric(generated: np.ndarray, ground_truth: np.ndarray) -> float:
    if generated.shape != ground_truth.shape:
        raise ValueError("mse_metric needs equal shapes")
    return float(((generated - ground_truth) ** 2).mean())


def drift_metric(motion: np.ndarray, anchor: np.ndarray, pose_channels: np.ndarray) -> float:
    """Mean distance of the pose channels from the anchor pose over the last
    20% of frames."""
    if motion.shape[0] < 1:
        raise ValueError("drift needs at least one frame")
    start = int(np.floor((1.0 - DRIFT_TAIL_FRACTION) * motion.shape[0]))
    start = min(start, motion.shape[0] - 1)
    tail = motion[start:, pose_channels]
    ref = anchor[pose_channels]
    return float(np.sqrt(((tail - ref) ** 2).sum(axis=1)).mean())


# ---------------------------------------------------------------------------
# cluster-entropy diversity
# ---------------------------------------------------------------------------


class ClusterModel:
    """k-means centroids fitted on ground-truth motion windows."""

    def __init__(self, centroids: np.ndarray):
        self.centroids = centroids

    @property
    def k(self) -> int:
        return self.centroids.shape[0]

    def assign(self, points: np.ndarray) -> np.ndarray:
        d2 = ((points[:, None, :] - self.centroids[None, :, :]) ** 2).sum(axis=2)
        return d2.argmin(axis=1)


def pool_windows(motion: np.ndarray, channels: np.ndarray, window: int = SID_WINDOW) -> np.ndarray:
    """Mean-pool non-overlapping windows of the selected channels."""
    sel = motion[:, channels]
    n = sel.shape[0] // window
    if n == 0:
        raise ValueError(f"need at least {window} frames for one window")
    return sel[: n * window].reshape(n, window, -1).mean(axis=1)


def fit_clusters(points: np.ndarray, k: int, seed: int = 0, iters: int = KMEANS_ITERS) -> ClusterModel:
    """Plain k-means with k-means++ style seeding from a fixed seed."""
    if k < 2:
        raise ValueError("k must be >= 2")
    if points.shape[0] < k:
        raise ValueError("fewer points than clusters")
    rng = RngState(seed)
    n = points.shape[0]
    centroids = np.empty((k, points.shape[1]))
    first = int(rng.integers(0, n))
    centroids[0] = points[first]
    d2 = ((points - centroids[0]) ** 2).sum(axis=1)
    for j in range(1, k):
        total = d2.sum()
        if total <= 0:
            centroids[j] = points[int(rng.integers(0, n))]
        else:
            target = rng.uniform() * total
            idx = int(np.searchsorted(np.cumsum(d2), target))
            idx = min(idx, n - 1)
            centroids[j] = points[idx]
        d2 = np.minimum(d2, ((points - centroids[j]) ** 2).sum(axis=1))
    model = ClusterModel(centroids)
    for _ in range(iters):
        labels = model.assign(points)
        for j in range(k):
            members = points[labels == j]
            if len(members):
                centroids[j] = members.mean(axis=0)
    return model


def sid_metric(sequences: list[np.ndarray], model: ClusterModel) -> float:
    """Mean per-sequence Shannon entropy (natural log) of cluster-ID histograms.

    Inputs are pooled motion windows per sequence; the value is invariant to
    any permutation of cluster labels and bounded by ln k.
    """
    if not sequences:
        raise ValueError("sid_metric needs at least one sequence")
    entropies = []
    for windows in sequences:
        labels = model.assign(windows)
        counts = np.bincount(labels, minlength=model.k).astype(np.float64)
        p = counts / counts.sum()
        nz = p[p > 0]
        entropies.append(float(-(nz * np.log(nz)).sum()))
    return float(np.mean(entropies))


# ---------------------------------------------------------------------------
# full-report driver
# ---------------------------------------------------------------------------


def evaluate_episode(
    generated: np.ndarray,
    episode,
    world_cfg,
    cluster_exp: ClusterModel | None = None,
    cluster_pose: ClusterModel | None = None,
    max_offset: int = 5,
) -> MetricsReport:
    mouth = world_cfg.mouth_channels
    pose = world_cfg.pose_channels
    sync, offset = sync_proxy(
        generated[:, mouth], episode.deterministic_mouth_signal, max_offset
    )
    fd_exp = frechet_distance(generated[:, mouth], episode.motion[:, mouth])
    fd_pose = frechet_distance(generated[:, pose], episode.motion[:, pose])
    sid_exp = sid_pose = 0.0
    if cluster_exp is not None:
        sid_exp = sid_metric([pool_windows(generated, mouth)], cluster_exp)
    if cluster_pose is not None:
        sid_pose = sid_metric([pool_windows(generated, pose)], cluster_pose)
    return MetricsReport(
        sync_proxy=sync,
        sync_offset_frames=offset,
        fd_exp=fd_exp,
        fd_pose=fd_pose,
        mse=mse_metric(generated, episode.motion),
        var_exp=variance_metric(generated, mouth),
        var_pose=variance_metric(generated, pose),
        sid_exp=sid_exp,
        sid_pose=sid_pose,
        drift=drift_metric(generated, episode.motion[0], pose),
    )


def fit_oracle_clusters(
    episodes: list, world_cfg, k_exp: int = SID_K_EXP, k_pose: int = SID_K_POSE, seed: int = 0
) -> tuple[ClusterModel, ClusterModel]:
    """Fit the exp/pose cluster models on ground-truth motion windows.

    k is clamped to the number of available windows so short datasets stay
    usable; the desk-scale defaults apply whenever there is enough data.
    """
    exp_windows = np.concatenate(
        [pool_windows(ep.motion, world_cfg.mouth_channels) for ep in episodes]
    )
    pose_windows = np.concatenate(
        [pool_windows(ep.motion, world_cfg.pose_channels) for ep in episodes]
    )
    k_exp = min(k_exp, exp_windows.shape[0])
    k_pose = min(k_pose, pose_windows.shape[0])
    return (
        fit_clusters(exp_windows, k_exp, seed=seed),
        fit_clusters(pose_windows, k_pose, seed=seed + 1),
    )
