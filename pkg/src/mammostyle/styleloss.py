"""Gram statistics and loss terms for single- and multi-reference transfer.

All loss functions accept either numpy arrays or torch tensors (the engine
differentiates through the torch path; tests drive the numpy path against
brute-force oracles). Fusion and histogram specification operate on fixed
target statistics and are numpy-only.
"""
from __future__ import annotations

from collections.abc import Mapping, Sequence
from dataclasses import dataclass

import numpy as np
import torch

from .errors import MammostyleError

PROVENANCES = ("single_image", "fused", "specified")


class LossError(MammostyleError):
    pass


def _all_finite(x) -> bool:
    if isinstance(x, torch.Tensor):
        return bool(torch.isfinite(x).all())
    return bool(np.isfinite(x).all())


@dataclass(frozen=True)
class GramSet:
    """Per-layer N_l x N_l gram matrices with their provenance.

    single_image grams are validated positive semi-definite; fused and
    specified grams are only guaranteed symmetric.
    """

    mats: dict[str, np.ndarray]
    provenance: str = "single_image"

    def __post_init__(self):
        if self.provenance not in PROVENANCES:
            raise LossError(f"unknown provenance {self.provenance!r}")
        validated = {}
        for layer, g in self.mats.items():
            g = np.asarray(g, dtype=np.float64)
            if g.ndim != 2 or g.shape[0] != g.shape[1]:
                raise LossError(f"gram for {layer} is not square: {g.shape}")
            if not np.isfinite(g).all():
                raise LossError(f"non-finite gram entries in {layer}")
            scale = max(np.abs(g).max(), 1e-30)
            if np.abs(g - g.T).max() > 1e-6 * scale:
                raise LossError(f"gram for {layer} is not symmetric")
            if self.provenance == "single_image":
                eigmin = float(np.linalg.eigvalsh(g).min())
                if eigmin < -1e-6 * max(np.trace(g), 1e-30):
                    raise LossError(f"single_image gram for {layer} is not PSD")
            validated[layer] = g
        object.__setattr__(self, "mats", validated)

    @property
    def layers(self) -> tuple[str, ...]:
        return tuple(self.mats)

    def __getitem__(self, layer: str) -> np.ndarray:
        return self.mats[layer]


@dataclass(frozen=True)
class DensityHistogram:
    """Equal-width probability-mass histogram over gram entries."""

    bin_edges: np.ndarray
    densities: np.ndarray
    degenerate: bool = False
    degenerate_value: float | None = None

    def __post_init__(self):
        edges = np.asarray(self.bin_edges, dtype=np.float64)
        dens = np.asarray(self.densities, dtype=np.float64)
        if edges.ndim != 1 or dens.ndim != 1 or len(edges) != len(dens) + 1:
            raise LossError("need B+1 edges for B densities")
        if not (np.diff(edges) > 0).all():
            raise LossError("bin edges must be strictly increasing")
        if (dens < 0).any() or abs(dens.sum() - 1.0) > 1e-9:
            raise LossError("densities must be non-negative and sum to 1")
        object.__setattr__(self, "bin_edges", edges)
        object.__setattr__(self, "densities", dens)

    @property
    def bins(self) -> int:
        return len(self.densities)


def _mats(g) -> Mapping:
    return g.mats if isinstance(g, GramSet) else g


def gram(feature_maps):
    """Feature co-variance matrix G = F F^T / M for maps shaped (N, H, W)."""
    if not _all_finite(feature_maps):
        raise LossError("non-finite feature values")
    n = feature_maps.shape[0]
    fm = feature_maps.reshape(n, -1)
    m = fm.shape[1]
    return (fm @ fm.T) / m


def gram_set(stack, layers: Sequence[str] | None = None) -> GramSet:
    """Build a single_image GramSet from a FeatureStack-like object."""
    maps = stack.maps if hasattr(stack, "maps") else stack
    layers = tuple(layers) if layers is not None else tuple(maps)
    return GramSet({l: np.asarray(gram(np.asarray(maps[l], dtype=np.float64))) for l in layers})


def content_loss(f_hat, f_content):
    """Mean squared feature distance at the content layer."""
    if f_hat.shape != f_content.shape:
        raise LossError(f"shape mismatch {f_hat.shape} vs {f_content.shape}")
    diff = f_hat - f_content
    n = f_hat.shape[0]
    m = int(np.prod(f_hat.shape[1:])) if f_hat.ndim > 1 else 1
    return (diff * diff).sum() / (n * m)


def _check_layers(g_hat: Mapping, g_ref: Mapping, weights: Mapping[str, float]) -> None:
    if set(g_hat) != set(g_ref):
        raise LossError(f"layer mismatch: {sorted(g_hat)} vs {sorted(g_ref)}")
    for layer, w in weights.items():
        if layer not in g_hat:
            raise LossError(f"weight given for unknown layer {layer!r}")
        if w < 0:
            raise LossError("layer weights must be non-negative")


def style_loss_single(g_hat, g_style, weights: Mapping[str, float]):
    """Weighted sum over layers of squared gram distance / (4 N_l^2)."""
    g_hat, g_style = _mats(g_hat), _mats(g_style)
    _check_layers(g_hat, g_style, weights)
    total = None
    for layer, w in weights.items():
        a, b = g_hat[layer], g_style[layer]
        if a.shape != b.shape:
            raise LossError(f"gram shape mismatch on {layer}")
        n = a.shape[0]
        d = a - b
        term = w * (d * d).sum() / (4.0 * n * n)
        total = term if total is None else total + term
    if total is None:
        raise LossError("no layers weighted")
    return total


def multi_ref_style_loss(g_hat, g_target, weights: Mapping[str, float]):
    """Style term against a fused-and-specified multi-reference target."""
    return style_loss_single(g_hat, g_target, weights)


def total_loss(content_term, style_term):
    """Plain sum; any content/style balance lives in the layer weights."""
    if not (_all_finite(content_term) and _all_finite(style_term)):
        raise LossError("non-finite loss term")
    return content_term + style_term


def fuse_grams(gram_sets: Sequence[GramSet]) -> GramSet:
    """Element-wise max across references, per layer."""
    if len(gram_sets) == 0:
        raise LossError("need at least one reference gram set")
    layers = gram_sets[0].layers
    for gs in gram_sets[1:]:
        if gs.layers != layers:
            raise LossError("reference gram sets disagree on layers")
    fused = {}
    for layer in layers:
        stack = [gs[layer] for gs in gram_sets]
        shapes = {g.shape for g in stack}
        if len(shapes) != 1:
            raise LossError(f"gram shape mismatch on {layer}")
        fused[layer] = np.maximum.reduce(stack)
    return GramSet(fused, provenance="fused")


def reference_histogram(gram_sets: Sequence[GramSet], layer: str, bins: int) -> DensityHistogram:
    """Equal-width histogram over all entries of the stacked per-reference grams."""
    if len(gram_sets) == 0:
        raise LossError("need at least one reference gram set")
    if bins < 2:
        raise LossError("need at least 2 bins")
    entries = np.concatenate([np.asarray(gs[layer], dtype=np.float64).ravel() for gs in gram_sets])
    lo, hi = float(entries.min()), float(entries.max())
    if lo == hi:
        # Zero-width range: keep a nominal support around the single value.
        half = max(abs(lo) * 1e-6, 1e-9)
        counts, edges = np.histogram(entries, bins=bins, range=(lo - half, lo + half))
        return DensityHistogram(
            bin_edges=edges,
            densities=counts / counts.sum(),
            degenerate=True,
            degenerate_value=lo,
        )
    counts, edges = np.histogram(entries, bins=bins, range=(lo, hi))
    return DensityHistogram(bin_edges=edges, densities=counts / counts.sum())


def _quantile(hist: DensityHistogram, p: np.ndarray) -> np.ndarray:
    """Quantile function of the histogram, linear within bins."""
    dens = hist.densities
    edges = hist.bin_edges
    cums = np.cumsum(dens)
    cums[-1] = 1.0
    k = np.searchsorted(cums, p, side="left")
    k = np.clip(k, 0, len(dens) - 1)
    cprev = np.where(k > 0, cums[np.maximum(k - 1, 0)], 0.0)
    mass = dens[k]
    with np.errstate(invalid="ignore", divide="ignore"):
        frac = np.where(mass > 0, (p - cprev) / np.where(mass > 0, mass, 1.0), 1.0)
    frac = np.clip(frac, 0.0, 1.0)
    return edges[k] + frac * (edges[k + 1] - edges[k])


def hist_specify(g_fused: GramSet, hists: Mapping[str, DensityHistogram]) -> GramSet:
    """Monotone CDF-matching remap of each layer's entries onto its histogram.

    Each entry maps via v -> Q(C(v)) where C is the mid-rank empirical CDF of
    the layer's own entries and Q the histogram quantile function. Equal
    inputs map to equal outputs, so symmetry survives exactly.
    """
    specified = {}
    for layer in g_fused.layers:
        if layer not in hists:
            raise LossError(f"no reference histogram for layer {layer!r}")
        hist = hists[layer]
        g = g_fused[layer]
        if hist.degenerate:
            specified[layer] = np.full_like(g, hist.degenerate_value)
            continue
        v = g.ravel()
        sorted_v = np.sort(v)
        n = v.size
        lo = np.searchsorted(sorted_v, v, side="left")
        hi = np.searchsorted(sorted_v, v, side="right")
        p = (lo + hi) / (2.0 * n)
        specified[layer] = _quantile(hist, p).reshape(g.shape)
    return GramSet(specified, provenance="specified")
