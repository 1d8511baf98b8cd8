"""
Image-level evaluation: accuracy / false-positive / false-negative reports,
a closed-form least-squares fit (accuracy-vs-score trends), and cross-model
ordering consistency over externally scored images.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, asdict
from itertools import combinations
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from .dataset import ManifestEntry, load_entry_image
from .maps import classify_image, image_probability
from .tiling import TileSpec
from .training import TrainedModel


@dataclass(frozen=True)
class ImageScore:
    id: str
    true_class: str
    overall_prob: float
    predicted: str
    degraded: bool = False


@dataclass
class EvaluationReport:
    scores: List[ImageScore]
    accuracy: float
    false_positives: int
    false_negatives: int
    skipped: List[Dict[str, str]] = field(default_factory=list)

    def to_json(self) -> str:
        return json.dumps({
            "scores": [asdict(s) for s in self.scores],
            "accuracy": self.accuracy,
            "false_positives": self.false_positives,
            "false_negatives": self.false_negatives,
            "skipped": self.skipped,
        }, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "EvaluationReport":
        d = json.loads(text)
        return cls(scores=[ImageScore(**s) for s in d["scores"]],
                   accuracy=d["accuracy"],
                   false_positives=d["false_positives"],
                   false_negatives=d["false_negatives"],
                   skipped=d["skipped"])


@dataclass(frozen=True)
class RegressionResult:
    slope: float
    intercept: float
    r_squared: float
    n_points: int

    def __post_init__(self):
        if not (0.0 <= self.r_squared <= 1.0):
            raise ValueError("r_squared must lie in [0, 1]")
        if self.n_points < 2:
            raise ValueError("n_points must be >= 2")


def score_entries(model: TrainedModel, entries: Sequence[ManifestEntry],
                  tile_spec: TileSpec, density: Optional[float] = None,
                  manifest_dir: Union[str, Path] = ".") -> Tuple[List[ImageScore], List[Dict[str, str]]]:
    """Per-image overall probabilities; unreadable images are reported and
    excluded, never silently dropped."""
    if density is None:
        density = model.provenance.get("density")
    if density is None:
        raise ValueError("analysis density must come from the model provenance "
                         "or be passed explicitly")
    net = model.network()
    scores: List[ImageScore] = []
    skipped: List[Dict[str, str]] = []
    for entry in entries:
        try:
            img = load_entry_image(entry, density, manifest_dir)
            prob = image_probability(net, img, tile_spec)
        except (OSError, ValueError) as e:
            skipped.append({"id": entry.id, "reason": str(e)})
            continue
        scores.append(ImageScore(
            id=entry.id, true_class=entry.klass, overall_prob=prob,
            predicted=classify_image(prob),
            degraded=entry.quality_flag == "degraded"))
    return scores, skipped


def evaluate(model: TrainedModel, test_entries: Sequence[ManifestEntry],
             tile_spec: TileSpec, density: Optional[float] = None,
             manifest_dir: Union[str, Path] = ".") -> EvaluationReport:
    """Image-level accuracy, false positives, and false negatives."""
    entries = list(test_entries)
    if not entries:
        raise ValueError("empty test set")
    scores, skipped = score_entries(model, entries, tile_spec, density, manifest_dir)
    if not scores:
        raise ValueError("no test image could be scored; "
                         f"skipped: {[s['id'] for s in skipped]}")
    fp = sum(1 for s in scores
             if s.true_class == "comparative" and s.predicted == "positive")
    fn = sum(1 for s in scores
             if s.true_class == "positive" and s.predicted == "comparative")
    correct = sum(1 for s in scores if s.predicted == s.true_class)
    return EvaluationReport(scores=scores, accuracy=correct / len(scores),
                            false_positives=fp, false_negatives=fn,
                            skipped=skipped)


def linear_fit(points: Sequence[Tuple[float, float]]) -> RegressionResult:
    """Ordinary least squares in closed form; R^2 from the correlation form
    Sxy^2 / (Sxx * Syy), defined as 0 when y is constant."""
    if len(points) < 2:
        raise ValueError("need at least 2 points")
    x = np.asarray([p[0] for p in points], dtype=np.float64)
    y = np.asarray([p[1] for p in points], dtype=np.float64)
    sxx = float(((x - x.mean()) ** 2).sum())
    syy = float(((y - y.mean()) ** 2).sum())
    sxy = float(((x - x.mean()) * (y - y.mean())).sum())
    if sxx == 0.0:
        raise ValueError("degenerate fit: all x values are equal")
    slope = sxy / sxx
    intercept = float(y.mean()) - slope * float(x.mean())
    r2 = 0.0 if syy == 0.0 else min(1.0, sxy * sxy / (sxx * syy))
    return RegressionResult(slope=slope, intercept=intercept, r_squared=r2,
                            n_points=len(points))


@dataclass
class CorroborationReport:
    """Kendall-style co-movement of image scores across models.

    For every image pair (a, b) and every model pair (m, n), the pair is
    concordant when a and b move in the same direction from m to n,
    discordant when they move oppositely, and a tie when either is unchanged.
    """

    probabilities: Dict[str, Dict[str, float]]  # model id -> image id -> prob
    concordant: int
    discordant: int
    ties: int
    violations: List[dict] = field(default_factory=list)
    degraded_ids: List[str] = field(default_factory=list)


def corroborate(models: Sequence[TrainedModel],
                external_entries: Sequence[ManifestEntry],
                tile_spec: TileSpec, density: Optional[float] = None,
                manifest_dir: Union[str, Path] = ".") -> CorroborationReport:
    if len(models) < 2:
        raise ValueError("need at least 2 models to corroborate")
    entries = list(external_entries)
    if len(entries) < 2:
        raise ValueError("need at least 2 external images")
    probs: Dict[str, Dict[str, float]] = {}
    for i, model in enumerate(models):
        scores, skipped = score_entries(model, entries, tile_spec, density,
                                        manifest_dir)
        if skipped:
            raise ValueError(f"external image(s) unreadable: {skipped}")
        probs[f"model_{i}_seed_{model.seed}"] = {
            s.id: s.overall_prob for s in scores}
    return corroborate_probabilities(
        probs, degraded_ids=[e.id for e in entries
                             if e.quality_flag == "degraded"])


def corroborate_probabilities(probs: Dict[str, Dict[str, float]],
                              degraded_ids: Optional[List[str]] = None) -> CorroborationReport:
    """Pairwise concordance counts over an explicit model -> image -> prob table."""
    model_ids = sorted(probs)
    image_ids = sorted(next(iter(probs.values())))
    concordant = discordant = ties = 0
    violations = []
    for a, b in combinations(image_ids, 2):
        for m, n in combinations(model_ids, 2):
            da = probs[n][a] - probs[m][a]
            db = probs[n][b] - probs[m][b]
            s = da * db
            if s > 0:
                concordant += 1
            elif s < 0:
                discordant += 1
                violations.append({"images": (a, b), "models": (m, n),
                                   "deltas": (da, db)})
            else:
                ties += 1
    return CorroborationReport(probabilities=probs, concordant=concordant,
                               discordant=discordant, ties=ties,
                               violations=violations,
                               degraded_ids=degraded_ids or [])
