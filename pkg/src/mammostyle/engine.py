"""Per-tile transfer optimization and full multi-scale pipeline orchestration."""
from __future__ import annotations

import csv
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from . import styleloss, tiler
from .errors import DivergenceError, MammostyleError
from .features import ExtractorSpec, build_extractor
from .imaging import Mammogram, save_array
from .refbank import ReferenceBank, select_entries
from .styleloss import GramSet
from .util import atomic_write_json, canonical_json, sha256_array, sha256_bytes, sha256_file

TraceRow = tuple[int, float, float, float]  # (step, content, style, total)


class EngineError(MammostyleError):
    pass


@dataclass(frozen=True)
class OptimizerSettings:
    """First-order optimizer knobs (Adam-class)."""

    kind: str = "adam"
    learning_rate: float = 0.02
    betas: tuple[float, float] = (0.9, 0.999)

    def __post_init__(self):
        if self.kind != "adam":
            raise EngineError(f"unsupported optimizer kind {self.kind!r}")


@dataclass(frozen=True)
class TransferConfig:
    """All hyperparameters of one transfer run."""

    extractor: ExtractorSpec
    steps: int = 400
    optimizer: OptimizerSettings = field(default_factory=OptimizerSettings)
    n_refs: int = 5
    overlap: int = 0
    scales: tuple[str, ...] = tiler.SCALES
    layer_weights: tuple[float, ...] | None = None  # aligned with style_layers
    hist_bins: int = 256
    seed: int = 0
    work_size: int = tiler.DEFAULT_WORK_SIZE

    def __post_init__(self):
        if self.steps < 0:
            raise EngineError("steps must be >= 0")
        if self.n_refs < 1:
            raise EngineError("n_refs must be >= 1")
        if not self.scales:
            raise EngineError("at least one scale must be enabled")
        for s in self.scales:
            if s not in tiler.SCALES:
                raise EngineError(f"unknown scale {s!r}")
        if self.layer_weights is not None and len(self.layer_weights) != len(
            self.extractor.style_layers
        ):
            raise EngineError("layer_weights must align with the style layers")

    def resolved_layer_weights(self) -> dict[str, float]:
        layers = self.extractor.style_layers
        if self.layer_weights is None:
            return {l: 1.0 / len(layers) for l in layers}
        return dict(zip(layers, self.layer_weights))

    def to_dict(self) -> dict:
        return {
            "backbone": self.extractor.backbone,
            "style_layers": list(self.extractor.style_layers),
            "content_layer": self.extractor.content_layer,
            "weights_checksum": self.extractor.weights_checksum,
            "input_size": self.extractor.input_size,
            "toy_seed": self.extractor.toy_seed,
            "weights_path": self.extractor.weights_path,
            "steps": self.steps,
            "optimizer": {
                "kind": self.optimizer.kind,
                "learning_rate": self.optimizer.learning_rate,
                "betas": list(self.optimizer.betas),
            },
            "n_refs": self.n_refs,
            "overlap": self.overlap,
            "scales": list(self.scales),
            "layer_weights": None if self.layer_weights is None else list(self.layer_weights),
            "hist_bins": self.hist_bins,
            "seed": self.seed,
            "work_size": self.work_size,
        }

    def digest(self) -> str:
        return sha256_bytes(canonical_json(self.to_dict()).encode())


@dataclass
class TileResult:
    """One optimized tile with its loss trace.

    ``final_total`` is the loss of the returned (best) iterate, which the
    best-iterate fallback keeps at or below ``initial_total``.
    """

    tile: np.ndarray
    trace: list[TraceRow]
    initial_total: float
    final_total: float


@dataclass
class ScaleOutputs:
    """Per-scale full-resolution outputs and their per-tile loss traces."""

    images: dict[str, np.ndarray] = field(default_factory=dict)
    traces: dict[str, list[list[TraceRow]]] = field(default_factory=dict)


@dataclass
class PipelineResult:
    final: np.ndarray
    scale_outputs: ScaleOutputs
    reference_paths: list[str]
    manifest: dict


def build_target_grams(
    ref_images: list[np.ndarray],
    scale: str,
    config: TransferConfig,
    extractor=None,
) -> GramSet:
    """Fused and histogram-specified target grams for one scale.

    Each reference is tiled at the same scale, its per-tile grams are averaged
    into one gram set per reference, the sets are fused entry-wise by max, and
    the fused grams are remapped onto the stacked reference histogram.
    """
    if len(ref_images) == 0:
        raise EngineError("need at least one reference image")
    extractor = extractor or build_extractor(config.extractor)
    layers = config.extractor.style_layers
    per_ref: list[GramSet] = []
    for ref in ref_images:
        ref = np.asarray(ref, dtype=np.float64)
        grid = tiler.plan_grid(ref.shape, scale, config.overlap, config.work_size)
        sums = {l: None for l in layers}
        tiles = tiler.decompose(ref, grid)
        for tile in tiles:
            stack = extractor.extract(tile, layers=layers)
            for l in layers:
                g = np.asarray(styleloss.gram(np.asarray(stack.maps[l], dtype=np.float64)))
                sums[l] = g if sums[l] is None else sums[l] + g
        per_ref.append(GramSet({l: sums[l] / len(tiles) for l in layers}))
    fused = styleloss.fuse_grams(per_ref)
    hists = {l: styleloss.reference_histogram(per_ref, l, config.hist_bins) for l in layers}
    return styleloss.hist_specify(fused, hists)


def transfer_tile(
    content_tile: np.ndarray,
    target: GramSet,
    config: TransferConfig,
    extractor=None,
) -> TileResult:
    """Optimize one tile against the content tile and the target grams.

    The iterate starts at the content tile, takes ``steps`` Adam updates on
    content + multi-reference style loss, and returns the best iterate seen
    (so the final loss never exceeds the initial one), clamped to [0, 1].
    """
    content_tile = np.asarray(content_tile, dtype=np.float64)
    if content_tile.min() < 0.0 or content_tile.max() > 1.0:
        raise EngineError("content tile must lie in [0, 1]")
    if config.steps == 0:
        return TileResult(content_tile.copy(), [], 0.0, 0.0)

    extractor = extractor or build_extractor(config.extractor)
    weights = config.resolved_layer_weights()
    lc = config.extractor.content_layer
    style_layers = config.extractor.style_layers

    x0 = torch.from_numpy(content_tile)
    with torch.no_grad():
        ref_maps = extractor.features_torch(x0)
    f_content = ref_maps[lc].detach()
    dtype = f_content.dtype
    targets = {l: torch.as_tensor(target[l], dtype=dtype) for l in style_layers}

    x = x0.clone().to(dtype).requires_grad_(True)
    opt = torch.optim.Adam(
        [x], lr=config.optimizer.learning_rate, betas=config.optimizer.betas
    )

    trace: list[TraceRow] = []
    best_total = float("inf")
    best_x = x.detach().clone()

    def evaluate(record_step: int, with_grad: bool):
        nonlocal best_total, best_x
        maps = extractor.features_torch(x)
        c = styleloss.content_loss(maps[lc], f_content)
        g_hat = {l: styleloss.gram(maps[l]) for l in style_layers}
        s = styleloss.multi_ref_style_loss(g_hat, targets, weights)
        try:
            t = styleloss.total_loss(c, s)
        except styleloss.LossError as exc:
            trace.append((record_step, float(c.detach()), float(s.detach()), float("nan")))
            raise DivergenceError(f"non-finite loss at step {record_step}", trace) from exc
        tv = float(t.detach())
        trace.append((record_step, float(c.detach()), float(s.detach()), tv))
        if not np.isfinite(tv):
            raise DivergenceError(f"non-finite loss at step {record_step}", trace)
        if tv < best_total:
            best_total = tv
            best_x = x.detach().clone()
        return t if with_grad else None

    for step in range(config.steps):
        t = evaluate(step, with_grad=True)
        opt.zero_grad()
        t.backward()
        opt.step()
    with torch.no_grad():
        evaluate(config.steps, with_grad=False)

    out = best_x.to(torch.float64).clamp_(0.0, 1.0).numpy()
    return TileResult(out, trace, initial_total=trace[0][3], final_total=best_total)


def transfer_scale(
    source_pixels: np.ndarray,
    ref_images: list[np.ndarray],
    scale: str,
    config: TransferConfig,
    extractor=None,
    workers: int = 1,
) -> tuple[np.ndarray, list[list[TraceRow]]]:
    """Decompose, transfer every tile against the scale target, reconstruct."""
    # Pin single-threaded tensor ops so serial and parallel runs are
    # bit-identical; tile-level workers provide the parallelism.
    torch.set_num_threads(1)
    source_pixels = np.asarray(source_pixels, dtype=np.float64)
    extractor = extractor or build_extractor(config.extractor)
    grid = tiler.plan_grid(source_pixels.shape, scale, config.overlap, config.work_size)
    tiles = tiler.decompose(source_pixels, grid)
    target = build_target_grams(ref_images, scale, config, extractor)

    def job(tile):
        return transfer_tile(tile, target, config, extractor)

    if workers <= 1:
        results = [job(t) for t in tiles]
    else:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(job, tiles))

    out_tiles = [r.tile for r in results]
    traces = [r.trace for r in results]
    return tiler.reconstruct(out_tiles, grid), traces


def _anchored_mean(images: list[np.ndarray]) -> np.ndarray:
    """Equal-weight mean that returns the first input exactly when all agree."""
    base = images[0].copy()
    if len(images) == 1:
        return base
    w = 1.0 / len(images)
    for img in images[1:]:
        base += w * (img - images[0])
    return base


def run_pipeline(
    source: Mammogram,
    bank: ReferenceBank,
    config: TransferConfig,
    refiner_model=None,
    workers: int = 1,
    out_dir: str | Path | None = None,
    save_scales: bool = False,
    source_path: str | None = None,
) -> PipelineResult:
    """Select references, transfer every enabled scale, fuse, and persist.

    Without a trained refiner the scale outputs are averaged with equal
    weights over the enabled scales. Partial outputs and the manifest are
    persisted even when a scale fails, to support debugging.
    """
    torch.set_num_threads(1)
    torch.manual_seed(config.seed)
    ref_entries = select_entries(source, bank, config.n_refs)
    extractor = build_extractor(config.extractor)

    from . import __version__

    manifest: dict = {
        "tool": "mammostyle",
        "version": __version__,
        "command": "transfer",
        "seed": config.seed,
        "config": config.to_dict(),
        "config_digest": config.digest(),
        "source": {
            "path": source_path,
            "digest": sha256_array(source.pixels),
            "view": source.view,
            "vendor": source.vendor,
        },
        "references": [
            {"path": e.path, "digest": e.digest, "area": e.breast_area}
            for e in ref_entries
        ],
        "workers": workers,
        "timings_s": {},
        "outputs": {},
    }

    outputs = ScaleOutputs()
    ref_pixels = [e.image.pixels for e in ref_entries]
    t_start = time.perf_counter()
    try:
        for scale in config.scales:
            t0 = time.perf_counter()
            image, traces = transfer_scale(
                source.pixels, ref_pixels, scale, config, extractor, workers
            )
            outputs.images[scale] = image
            outputs.traces[scale] = traces
            manifest["timings_s"][scale] = round(time.perf_counter() - t0, 3)

        enabled = [outputs.images[s] for s in config.scales]
        if refiner_model is not None:
            if set(config.scales) != set(tiler.SCALES):
                raise EngineError("a trained refiner needs all three scales enabled")
            from .refiner import fuse_and_refine

            final = fuse_and_refine(
                outputs.images["scale0"],
                outputs.images["scale1"],
                outputs.images["scale2"],
                refiner_model,
            )
        else:
            final = _anchored_mean(enabled)
        final = np.clip(final, 0.0, 1.0)
    except Exception as exc:
        manifest["error"] = f"{type(exc).__name__}: {exc}"
        if out_dir is not None:
            _persist(outputs, None, manifest, Path(out_dir), save_scales, config)
        raise

    manifest["timings_s"]["total"] = round(time.perf_counter() - t_start, 3)
    if out_dir is not None:
        _persist(outputs, final, manifest, Path(out_dir), save_scales, config)
    return PipelineResult(
        final=final,
        scale_outputs=outputs,
        reference_paths=[e.path for e in ref_entries],
        manifest=manifest,
    )


def _persist(
    outputs: ScaleOutputs,
    final: np.ndarray | None,
    manifest: dict,
    out_dir: Path,
    save_scales: bool,
    config: TransferConfig,
) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    if final is not None:
        path = out_dir / "final.png"
        save_array(final, path, bit_depth=16)
        manifest["outputs"]["final.png"] = sha256_file(path)
    for scale in config.scales:
        if scale in outputs.traces:
            trace_name = f"{scale}_trace.csv"
            _write_trace_csv(out_dir / trace_name, outputs.traces[scale])
            manifest["outputs"][trace_name] = sha256_file(out_dir / trace_name)
        if save_scales and scale in outputs.images:
            name = f"{scale}.png"
            save_array(outputs.images[scale], out_dir / name, bit_depth=16)
            manifest["outputs"][name] = sha256_file(out_dir / name)
    atomic_write_json(out_dir / "manifest.json", manifest)


def _write_trace_csv(path: Path, traces: list[list[TraceRow]]) -> None:
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["tile", "step", "content", "style", "total"])
        for tile_idx, rows in enumerate(traces):
            for step, c, s, t in rows:
                writer.writerow([tile_idx, step, repr(c), repr(s), repr(t)])
