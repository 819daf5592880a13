"""Disentanglement measurement.

Mutual information between each latent dimension and each ground-truth
factor is estimated with a plug-in joint histogram: the latent (we use
posterior means, which are deterministic and lower-variance than samples)
is discretized into equal-width bins over its observed range, factors are
already categorical.  The headline score is the mutual information gap:
per factor, the difference between the largest and second-largest MI over
latent dimensions, normalized by the factor's entropy, averaged over
factors.

A known failure mode on easy data is every factor concentrating on one
latent dimension, which inflates the gap without any real disentanglement;
reports carry a ``concentration_flag`` so harnesses can rerun such cases
instead of silently keeping them.
"""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass

import numpy as np

from .datasets import TrajectoryDataset
from .model import LadderModel

DEFAULT_BINS = 20
TRAVERSAL_RANGE = 3.0
TRAVERSAL_POINTS = 8


def discretize(values: np.ndarray, bins: int) -> np.ndarray:
    """Equal-width binning over the observed range; constant input -> bin 0."""
    values = np.asarray(values, dtype=np.float64)
    lo, hi = values.min(), values.max()
    if hi <= lo:
        return np.zeros(values.shape, dtype=np.int64)
    edges = np.linspace(lo, hi, bins + 1)[1:-1]
    return np.digitize(values, edges)


def discrete_entropy(labels: np.ndarray) -> float:
    """Empirical entropy in nats."""
    _, counts = np.unique(labels, return_counts=True)
    p = counts / counts.sum()
    return float(-(p * np.log(p)).sum())


def mutual_info(z_values: np.ndarray, v_levels: np.ndarray, bins: int = DEFAULT_BINS) -> float:
    """Plug-in mutual information (nats) between a latent and a factor.

    ``z_values`` is discretized into ``bins`` equal-width bins; a constant
    latent carries no information and returns 0.
    """
    z_values = np.asarray(z_values)
    v_levels = np.asarray(v_levels)
    if z_values.ndim != 1 or z_values.shape != v_levels.shape:
        raise ValueError("z_values and v_levels must be equal-length vectors")
    if z_values.size < 2:
        raise ValueError("need at least 2 samples")
    if bins < 2:
        raise ValueError("need at least 2 bins")
    zb = discretize(z_values, bins)
    joint = np.zeros((zb.max() + 1, v_levels.max() + 1))
    np.add.at(joint, (zb, v_levels), 1.0)
    joint /= joint.sum()
    pz = joint.sum(axis=1, keepdims=True)
    pv = joint.sum(axis=0, keepdims=True)
    mask = joint > 0
    return float((joint[mask] * np.log(joint[mask] / (pz @ pv)[mask])).sum())


@dataclass
class LatentFactorTable:
    """Per-sample posterior means paired with ground-truth factor levels."""

    latents: np.ndarray          # [N, D] posterior means
    ladder_index: np.ndarray     # [D] ladder of origin per latent dimension
    factor_levels: np.ndarray    # [N, K]
    factor_names: tuple[str, ...]
    n_bins: int = DEFAULT_BINS

    def __post_init__(self):
        if self.latents.ndim != 2 or self.factor_levels.ndim != 2:
            raise ValueError("latents and factor_levels must be 2-D")
        if self.latents.shape[0] != self.factor_levels.shape[0]:
            raise ValueError("row count mismatch between latents and factors")
        if self.ladder_index.shape != (self.latents.shape[1],):
            raise ValueError("every latent dimension needs exactly one ladder tag")
        if not np.all(np.isfinite(self.latents)):
            raise ValueError("latent table contains non-finite entries")

    @property
    def n_latents(self) -> int:
        return self.latents.shape[1]

    @property
    def n_factors(self) -> int:
        return self.factor_levels.shape[1]


def adaptive_bins(n_samples: int, cap: int = DEFAULT_BINS) -> int:
    """Bin count that keeps the plug-in estimator sane at small N."""
    return max(2, min(cap, int(np.ceil(np.sqrt(n_samples)))))


def build_latent_table(model: LadderModel, dataset: TrajectoryDataset,
                       bins: int | None = None) -> LatentFactorTable:
    """Encode a dataset (eval mode) into the table MIG consumes.

    ``bins=None`` picks ceil(sqrt(N)) capped at 20, which reproduces 20 bins
    at N=400 and keeps small datasets from landing one sample per bin.
    """
    sequences = dataset.sequences()
    mu, _ = model.posterior_params(sequences)
    return LatentFactorTable(
        latents=np.asarray(mu, dtype=np.float64),
        ladder_index=model.ladder_of_dim(),
        factor_levels=dataset.factor_levels(),
        factor_names=dataset.factor_names,
        n_bins=bins if bins is not None else adaptive_bins(len(dataset)),
    )


@dataclass
class MigReport:
    mig: float
    per_factor_gap: list[float]          # normalized, NaN for excluded factors
    mi_matrix: list[list[float]]         # [D, K] raw MI in nats
    normalized_mi: list[list[float]]     # [D, K] MI / H(v_k)
    factor_entropy: list[float]
    argmax_dim: list[int]
    concentration_flag: bool
    n_bins: int
    factor_names: list[str]

    def to_json(self) -> str:
        payload = {
            "mig": self.mig,
            "per_factor_gap": self.per_factor_gap,
            "mi_matrix": self.mi_matrix,
            "normalized_mi": self.normalized_mi,
            "factor_entropy": self.factor_entropy,
            "argmax_dim": self.argmax_dim,
            "concentration_flag": self.concentration_flag,
            "n_bins": self.n_bins,
            "factor_names": self.factor_names,
        }
        return json.dumps(payload, sort_keys=True, indent=2)

    @classmethod
    def from_json(cls, text: str) -> "MigReport":
        return cls(**json.loads(text))


def mig(table: LatentFactorTable) -> MigReport:
    """Mutual information gap over a latent/factor table.

    Per factor: find the argmax-MI latent (ties -> lowest index), subtract
    the runner-up MI, normalize by the factor's entropy.  Factors with a
    single observed level have zero entropy and are excluded with a warning.
    The concentration flag trips when every factor's argmax lands on the
    same latent dimension.
    """
    if table.n_latents < 2:
        raise ValueError("MIG needs at least 2 latent dimensions")
    n_d, n_k = table.n_latents, table.n_factors
    mi = np.zeros((n_d, n_k))
    for j in range(n_d):
        for k in range(n_k):
            mi[j, k] = mutual_info(table.latents[:, j], table.factor_levels[:, k],
                                   table.n_bins)
    entropies = np.array([discrete_entropy(table.factor_levels[:, k])
                          for k in range(n_k)])
    gaps = np.full(n_k, np.nan)
    argmax = np.zeros(n_k, dtype=int)
    for k in range(n_k):
        order = np.argsort(-mi[:, k], kind="stable")  # stable => lowest index wins ties
        argmax[k] = order[0]
        if entropies[k] <= 0.0:
            warnings.warn(f"factor {table.factor_names[k]!r} has a single level; "
                          "excluded from MIG", RuntimeWarning, stacklevel=2)
            continue
        gaps[k] = (mi[order[0], k] - mi[order[1], k]) / entropies[k]
    valid = ~np.isnan(gaps)
    if not valid.any():
        raise ValueError("no factor with positive entropy; MIG undefined")
    with np.errstate(divide="ignore", invalid="ignore"):
        normalized = np.where(entropies[None, :] > 0, mi / entropies[None, :], 0.0)
    return MigReport(
        mig=float(gaps[valid].mean()),
        per_factor_gap=[float(g) for g in gaps],
        mi_matrix=[[float(v) for v in row] for row in mi],
        normalized_mi=[[float(v) for v in row] for row in normalized],
        factor_entropy=[float(h) for h in entropies],
        argmax_dim=[int(a) for a in argmax],
        concentration_flag=bool(len(set(argmax.tolist())) == 1),
        n_bins=table.n_bins,
        factor_names=list(table.factor_names),
    )


def ladder_attribution(ladder_index: np.ndarray, reports: list[MigReport]) -> np.ndarray:
    """Count, per factor and per ladder, how often the argmax-MI latent of
    repeated runs falls in that ladder.  Rows sum to len(reports)."""
    ladder_index = np.asarray(ladder_index)
    n_ladders = int(ladder_index.max()) + 1
    n_factors = len(reports[0].argmax_dim)
    counts = np.zeros((n_factors, n_ladders), dtype=int)
    for rep in reports:
        if len(rep.argmax_dim) != n_factors:
            raise ValueError("reports disagree on factor count")
        for k, j in enumerate(rep.argmax_dim):
            counts[k, ladder_index[j]] += 1
    return counts


# ---------------------------------------------------------------------------
# latent traversal
# ---------------------------------------------------------------------------

def median_path_reference(dataset: TrajectoryDataset) -> int:
    """Index of the trajectory with median total path length (ties: lowest)."""
    lengths = np.array([
        np.linalg.norm(np.diff(tr.points.astype(np.float64), axis=0), axis=1).sum()
        for tr in dataset.trajectories
    ])
    order = np.argsort(lengths, kind="stable")
    return int(order[len(order) // 2])


def default_traversal_values() -> np.ndarray:
    return np.linspace(-TRAVERSAL_RANGE, TRAVERSAL_RANGE, TRAVERSAL_POINTS)


def latent_traversal(model: LadderModel, reference: np.ndarray, ladder: int,
                     dim: int, values: np.ndarray | None = None) -> list[np.ndarray]:
    """Decode the reference's posterior means with z[ladder][dim] swept.

    ``reference`` is one sequence [C, T]; returns one decoded [C, T] mean per
    traversal value.  All other coordinates stay at their posterior means.
    """
    cfg = model.config
    if not 0 <= ladder < cfg.n_ladders:
        raise ValueError(f"ladder {ladder} out of range")
    if not 0 <= dim < cfg.latent_dims[ladder]:
        raise ValueError(f"dim {dim} out of range for ladder {ladder}")
    if values is None:
        values = default_traversal_values()
    means = model.posterior_means_per_ladder(np.asarray(reference)[None])
    out = []
    for v in values:
        zs = [m.copy() for m in means]
        zs[ladder][0, dim] = v
        out.append(model.decode_arrays(zs)[0])
    return out


def export_traversal_csv(trajectories: list[np.ndarray], values: np.ndarray,
                         path) -> None:
    """Same row layout as the dataset CSV, with the traversed value carried
    per trajectory."""
    with open(path, "w", newline="") as fh:
        fh.write("traj_id,t,x,y,z_value\n")
        for tid, (traj, value) in enumerate(zip(trajectories, values)):
            for step in range(traj.shape[1]):
                fh.write(f"{tid},{step},{float(traj[0, step])!r},"
                         f"{float(traj[1, step])!r},{float(value)!r}\n")


def export_traversal_svg(trajectories: list[np.ndarray], values: np.ndarray,
                         path, size: int = 480) -> None:
    """Standalone SVG: one polyline per traversal value, blue-to-red ramp."""
    pts = np.concatenate([t.T for t in trajectories])
    lo = pts.min(axis=0)
    hi = pts.max(axis=0)
    span = np.maximum(hi - lo, 1e-9)
    margin = 0.08 * size

    def to_px(xy):
        unit = (xy - lo) / span
        x = margin + unit[:, 0] * (size - 2 * margin)
        y = size - (margin + unit[:, 1] * (size - 2 * margin))
        return x, y

    vmin, vmax = float(np.min(values)), float(np.max(values))
    vspan = max(vmax - vmin, 1e-9)
    lines = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{size}" '
             f'height="{size}" viewBox="0 0 {size} {size}">',
             f'<rect width="{size}" height="{size}" fill="white"/>']
    for traj, value in zip(trajectories, values):
        frac = (float(value) - vmin) / vspan
        red = int(round(255 * frac))
        blue = 255 - red
        x, y = to_px(traj.T)
        coords = " ".join(f"{px:.2f},{py:.2f}" for px, py in zip(x, y))
        lines.append(f'<polyline fill="none" stroke="rgb({red},40,{blue})" '
                     f'stroke-width="1.5" points="{coords}"/>')
    lines.append("</svg>")
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")
