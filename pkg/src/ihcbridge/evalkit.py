"""Downstream evaluation with a monoplex-trained nucleus posterior model.

For every translation method the surrogate segmenter is applied to the
method's output on the paired evaluation split. Nucleus posteriors are
collected on annotated nucleus pixels and background posteriors
(``1 - p``) on annotated background pixels. Separability is summarized
as ``1 - AUC`` per panel and their harmonic mean (lower is better).
The area above each cumulative posterior curve, i.e. the mean
posterior, is reported alongside (higher is better).
"""
from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Dict, Mapping, Optional, Sequence, Tuple

import numpy as np
import torch
import torch.nn as nn
from scipy.stats import rankdata

from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .data_io import EvalItem
from .networks import to_tensor

logger = logging.getLogger(__name__)

Method = Optional[Callable[[np.ndarray], np.ndarray]]


@dataclass(frozen=True)
class SurrogateConfig:
    width: int = 16
    steps: int = 400
    batch_size: int = 8
    lr: float = 1e-3
    seed: int = 0


class PosteriorModel(nn.Module):
    """Small fully convolutional pixel classifier returning nucleus logits."""

    def __init__(self, width: int = 16):
        super().__init__()
        self.width = width
        self.net = nn.Sequential(
            nn.Conv2d(3, width, 3, padding=1, padding_mode="replicate"),
            nn.ReLU(inplace=True),
            nn.Conv2d(width, width, 3, padding=1, padding_mode="replicate"),
            nn.ReLU(inplace=True),
            nn.Conv2d(width, width, 3, padding=1, padding_mode="replicate"),
            nn.ReLU(inplace=True),
            nn.Conv2d(width, 1, 1),
        )

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.net(x)


def train_surrogate_sb(images: np.ndarray, masks: np.ndarray, config: SurrogateConfig = SurrogateConfig()) -> PosteriorModel:
    """Fit the posterior model on monoplex patches (N x H x W x 3 in [0, 1]) and nucleus masks."""
    images = np.asarray(images, dtype=np.float32)
    masks = np.asarray(masks, dtype=bool)
    if len(images) == 0:
        raise ValueError("surrogate training set is empty")
    if images.shape[:3] != masks.shape:
        raise ValueError(f"images {images.shape} and masks {masks.shape} do not align")
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(config.seed)
        model = PosteriorModel(config.width)
    rng = np.random.default_rng(config.seed)
    opt = torch.optim.Adam(model.parameters(), lr=config.lr)
    loss_fn = nn.BCEWithLogitsLoss()
    model.train()
    for _ in range(config.steps):
        idx = rng.integers(0, len(images), size=config.batch_size)
        x = to_tensor(images[idx])
        y = torch.from_numpy(masks[idx].astype(np.float32))[:, None]
        loss = loss_fn(model(x), y)
        opt.zero_grad()
        loss.backward()
        opt.step()
    model.eval()
    return model


@torch.no_grad()
def predict_posterior(sb, patches: np.ndarray, batch_size: int = 32) -> np.ndarray:
    """Nucleus posterior maps (N x H x W, float64 in [0, 1]).

    ``sb`` is a ``PosteriorModel`` or any callable mapping patches to maps.
    """
    patches = np.asarray(patches, dtype=np.float32)
    if not isinstance(sb, nn.Module):
        out = np.asarray(sb(patches), dtype=np.float64)
    else:
        chunks = [
            torch.sigmoid(sb(to_tensor(patches[i : i + batch_size])))[:, 0].double().numpy()
            for i in range(0, len(patches), batch_size)
        ]
        out = np.concatenate(chunks)
    if out.shape != patches.shape[:3]:
        raise ValueError(f"posterior shape {out.shape} does not match patches {patches.shape}")
    return np.clip(out, 0.0, 1.0)


def pixel_accuracy(sb, images: np.ndarray, masks: np.ndarray) -> float:
    return float(((predict_posterior(sb, images) > 0.5) == masks).mean())


def save_surrogate(model: PosteriorModel, path, config: SurrogateConfig) -> Path:
    return save_checkpoint(
        {
            "kind": "surrogate",
            "step": config.steps,
            "networks": {"sb": {"type": "posterior", "spec": {"width": model.width}, "state": model.state_dict()}},
            "optimizers": {},
            "config": asdict(config),
            "rng": {},
            "extra": {},
        },
        path,
    )


def load_surrogate(path) -> PosteriorModel:
    ckpt = load_checkpoint(path)
    if ckpt.get("kind") != "surrogate":
        raise CheckpointError(f"{path} is not a surrogate checkpoint")
    entry = ckpt["networks"]["sb"]
    model = PosteriorModel(**entry["spec"])
    model.load_state_dict(entry["state"])
    model.eval()
    return model


def auc_from_scores(pos_scores: Sequence[float], neg_scores: Sequence[float]) -> float:
    """Exact ROC AUC via the Mann-Whitney rank sum, ties credited one half."""
    pos = np.asarray(pos_scores, dtype=np.float64).ravel()
    neg = np.asarray(neg_scores, dtype=np.float64).ravel()
    if pos.size == 0 or neg.size == 0:
        raise ValueError("both score lists must be non-empty")
    ranks = rankdata(np.concatenate([pos, neg]))  # average ranks on ties
    u = ranks[: pos.size].sum() - pos.size * (pos.size + 1) / 2.0
    return float(u / (pos.size * neg.size))


def cumulative_histogram(scores: Sequence[float], n_bins: int) -> Tuple[np.ndarray, np.ndarray]:
    """Fraction of scores at or below each upper bin edge ``k / n_bins``, k = 1..n_bins."""
    if n_bins < 2:
        raise ValueError("n_bins must be >= 2")
    s = np.sort(np.asarray(scores, dtype=np.float64).ravel())
    if s.size == 0:
        raise ValueError("scores are empty")
    if s[0] < 0.0 or s[-1] > 1.0:
        raise ValueError("scores must lie in [0, 1]")
    edges = np.arange(1, n_bins + 1) / n_bins
    counts = np.searchsorted(s, edges, side="right")
    return edges, counts / s.size


def harmonic_mean(a: float, b: float) -> float:
    if not (a > 0 and b > 0):
        raise ValueError(f"harmonic mean needs positive inputs, got {a}, {b}")
    return 2.0 * a * b / (a + b)


@dataclass
class MethodMetrics:
    nucleus_inv_auc: float
    background_inv_auc: float
    harmonic_mean: float
    nucleus_curve: Tuple[list, list]
    background_curve: Tuple[list, list]
    oracle: bool = False
    n_nucleus_pixels: int = 0
    n_background_pixels: int = 0
    # Area above each cumulative curve (the mean posterior); higher is better.
    nucleus_curve_score: float = 0.0
    background_curve_score: float = 0.0
    curve_harmonic_mean: float = 0.0


@dataclass
class MetricsReport:
    methods: Dict[str, MethodMetrics] = field(default_factory=dict)
    n_bins: int = 50

    def to_dict(self) -> dict:
        return {"n_bins": self.n_bins, "methods": {k: asdict(v) for k, v in self.methods.items()}}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    def save(self, path) -> Path:
        path = Path(path)
        path.write_text(self.to_json() + "\n")
        return path

    @classmethod
    def load(cls, path) -> "MetricsReport":
        d = json.loads(Path(path).read_text())
        methods = {}
        for name, m in d["methods"].items():
            m["nucleus_curve"] = tuple(m["nucleus_curve"])
            m["background_curve"] = tuple(m["background_curve"])
            methods[name] = MethodMetrics(**m)
        return cls(methods, d["n_bins"])


def _combined(a: float, b: float) -> float:
    # A perfect panel (1 - AUC = 0) drives the harmonic mean to its limit 0.
    if a == 0.0 or b == 0.0:
        return 0.0
    return harmonic_mean(a, b)


def score_posteriors(posteriors: np.ndarray, nucleus: np.ndarray, background: np.ndarray, n_bins: int = 50,
                     oracle: bool = False) -> MethodMetrics:
    nuc = posteriors[nucleus]
    bg = posteriors[background]
    if nuc.size == 0 or bg.size == 0:
        raise ValueError("evaluation needs both nucleus and background pixels")
    # Panel 1: nucleus posterior on nucleus pixels against background pixels.
    nucleus_inv = 1.0 - auc_from_scores(nuc, bg)
    # Panel 2: background posterior (1 - p) on background pixels against nucleus pixels.
    background_inv = 1.0 - auc_from_scores(1.0 - bg, 1.0 - nuc)
    ne, nc = cumulative_histogram(nuc, n_bins)
    be, bc = cumulative_histogram(1.0 - bg, n_bins)
    return MethodMetrics(
        nucleus_inv_auc=nucleus_inv,
        background_inv_auc=background_inv,
        harmonic_mean=_combined(nucleus_inv, background_inv),
        nucleus_curve=(ne.tolist(), nc.tolist()),
        background_curve=(be.tolist(), bc.tolist()),
        oracle=oracle,
        n_nucleus_pixels=int(nuc.size),
        n_background_pixels=int(bg.size),
        nucleus_curve_score=float(nuc.mean()),
        background_curve_score=float((1.0 - bg).mean()),
        curve_harmonic_mean=_combined(float(nuc.mean()), float((1.0 - bg).mean())),
    )


def evaluate_methods(items: Sequence[EvalItem], methods: Mapping[str, Method], sb, n_bins: int = 50) -> MetricsReport:
    """Score each duplex -> monoplex method with the surrogate segmenter.

    ``methods`` maps a name to a callable on ``N x H x W x 3`` duplex
    patches; ``None`` marks the oracle, which uses the ground-truth monoplex
    renderings instead.
    """
    if not items:
        raise ValueError("evaluation split is empty")
    for it in items:
        if not (it.duplex.shape[:2] == it.nucleus_mask.shape == it.background_mask.shape == it.monoplex.shape[:2]):
            raise ValueError(f"eval item {it.name} has misaligned masks")
    duplex = np.stack([it.duplex for it in items])
    gt = np.stack([it.monoplex for it in items])
    nucleus = np.stack([it.nucleus_mask for it in items])
    background = np.stack([it.background_mask for it in items])
    report = MetricsReport(n_bins=n_bins)
    for name, fn in methods.items():
        translated = gt if fn is None else np.asarray(fn(duplex), dtype=np.float32)
        if translated.shape != duplex.shape:
            raise ValueError(f"method {name!r} returned shape {translated.shape}")
        post = predict_posterior(sb, translated)
        report.methods[name] = score_posteriors(post, nucleus, background, n_bins, oracle=fn is None)
        logger.info("%s: 1-AUC nucleus %.4f background %.4f hm %.4f", name,
                    report.methods[name].nucleus_inv_auc, report.methods[name].background_inv_auc,
                    report.methods[name].harmonic_mean)
    return report


def plot_report(report: MetricsReport, out_path) -> Path:
    """Two-panel cumulative-histogram figure with 1-AUC in the legends."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, axes = plt.subplots(1, 2, figsize=(9, 3.6))
    panels = (("nucleus", "nucleus_curve", "nucleus_inv_auc"), ("background", "background_curve", "background_inv_auc"))
    for ax, (label, curve_key, auc_key) in zip(axes, panels):
        for name, m in report.methods.items():
            edges, cum = getattr(m, curve_key)
            style = "--" if m.oracle else "-"
            ax.step([0.0] + list(edges), [0.0] + list(cum), style, where="post",
                    label=f"{name} (1-AUC {getattr(m, auc_key):.3f}, hm {m.harmonic_mean:.3f})")
        ax.set_xlabel(f"{label} posterior")
        ax.set_ylabel("cumulative fraction")
        ax.set_title(f"{label} pixels")
        ax.set_xlim(0, 1)
        ax.set_ylim(0, 1.02)
        ax.legend(fontsize=7, loc="upper left")
    fig.tight_layout()
    out_path = Path(out_path)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(out_path, dpi=120)
    plt.close(fig)
    return out_path
