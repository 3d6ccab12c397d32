"""Exact histogram matching baseline and evaluation metrics."""
from __future__ import annotations

import os
import shutil
import subprocess
from collections.abc import Sequence
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage

from . import styleloss
from .errors import MammostyleError, ScorerError
from .features import ExtractorSpec, build_extractor
from .tiler import resize_bilinear
from .util import sha256_file


class MetricError(MammostyleError):
    pass


def ehm(source: np.ndarray, reference: np.ndarray) -> np.ndarray:
    """Exact histogram matching on a quantized intensity domain.

    Source pixels are put in a strict total order: stored value, then the 3x3
    and 5x5 neighborhood means as tie-breakers, then the flat index. The
    sorted reference multiset is assigned along that order, so the output
    histogram equals the reference histogram with exact integer counts.
    """
    source = np.asarray(source)
    reference = np.asarray(reference)
    if source.dtype not in (np.uint8, np.uint16) or reference.dtype != source.dtype:
        raise MetricError("ehm expects matching uint8 or uint16 arrays")
    if reference.shape != source.shape:
        limit = np.iinfo(source.dtype).max
        resized = resize_bilinear(reference.astype(np.float64), *source.shape)
        reference = np.clip(np.round(resized), 0, limit).astype(source.dtype)

    values = source.astype(np.float64)
    mean3 = ndimage.uniform_filter(values, size=3, mode="nearest")
    mean5 = ndimage.uniform_filter(values, size=5, mode="nearest")
    idx = np.arange(source.size)
    # lexsort keys: last is primary.
    order = np.lexsort((idx, mean5.ravel(), mean3.ravel(), values.ravel()))

    out = np.empty(source.size, dtype=source.dtype)
    out[order] = np.sort(reference.ravel())
    return out.reshape(source.shape)


def gram_distance(
    image: np.ndarray, references: Sequence[np.ndarray], spec: ExtractorSpec
) -> float:
    """Mean per-reference sum over layers of squared gram distance / (4 N^2)."""
    if len(references) == 0:
        raise MetricError("empty reference set")
    extractor = build_extractor(spec)
    weights = {layer: 1.0 for layer in spec.style_layers}

    def grams(arr: np.ndarray) -> styleloss.GramSet:
        arr = np.asarray(arr, dtype=np.float64)
        if spec.input_size is not None and arr.shape != (spec.input_size, spec.input_size):
            arr = resize_bilinear(arr, spec.input_size, spec.input_size)
        stack = extractor.extract(arr, layers=spec.style_layers)
        return styleloss.gram_set(stack)

    g_a = grams(image)
    dists = [float(styleloss.style_loss_single(g_a, grams(b), weights)) for b in references]
    return float(np.mean(dists))


@dataclass(frozen=True)
class QualityScorer:
    """External-process image quality scorer (NIMA-style adapter).

    The command is invoked with the image path appended and must print a
    single decimal number. Executable existence is checked at construction so
    misconfiguration surfaces before any image is processed.
    """

    command: tuple[str, ...]
    timeout_s: float = 60.0
    digest: str = field(default="", compare=False)

    def __post_init__(self):
        if not self.command:
            raise ScorerError("empty scorer command")
        exe = self.command[0]
        resolved = shutil.which(exe) or (exe if os.path.isfile(exe) else None)
        if resolved is None:
            raise ScorerError(f"scorer executable not found: {exe}")
        object.__setattr__(self, "digest", sha256_file(resolved))


def score_quality(image_path: str | Path, scorer: QualityScorer) -> float:
    """Run the external scorer on one image file and parse its score."""
    image_path = Path(image_path)
    if not image_path.is_file():
        raise ScorerError(f"no such image: {image_path}")
    try:
        proc = subprocess.run(
            [*scorer.command, str(image_path)],
            capture_output=True,
            text=True,
            timeout=scorer.timeout_s,
        )
    except subprocess.TimeoutExpired as exc:
        raise ScorerError(f"scorer timed out after {scorer.timeout_s}s") from exc
    if proc.returncode != 0:
        raise ScorerError(f"scorer exited {proc.returncode}: {proc.stderr.strip()[:200]}")
    try:
        score = float(proc.stdout.strip())
    except ValueError as exc:
        raise ScorerError(f"scorer printed non-numeric output: {proc.stdout[:80]!r}") from exc
    if not np.isfinite(score):
        raise ScorerError("scorer returned a non-finite score")
    return score
