"""Flat key=value run configuration with a closed, documented key set.

Unknown keys are hard errors and the seed is mandatory: silent config drift
and wall-clock seeding are the two main reproducibility hazards.
"""
from __future__ import annotations

from pathlib import Path

from .engine import OptimizerSettings, TransferConfig
from .errors import ConfigError
from .features import (
    TOY_CONTENT_LAYER,
    TOY_STYLE_LAYERS,
    VGG_CONTENT_LAYER,
    VGG_INPUT_SIZE,
    VGG_STYLE_LAYERS,
    toy_spec,
    vgg19_spec,
)
from .refiner import RefinerTrainConfig

TRANSFER_KEYS = {
    "seed": "int, mandatory, pins all pseudo-randomness",
    "steps": "int, optimizer updates per tile (default 400)",
    "learning_rate": "float, Adam step size (default 0.02)",
    "beta1": "float, Adam first-moment coefficient (default 0.9)",
    "beta2": "float, Adam second-moment coefficient (default 0.999)",
    "n_refs": "int, reference images per transfer (default 5)",
    "overlap": "int, tile overlap in pixels (default 0)",
    "scales": "comma list from scale0,scale1,scale2 (default all)",
    "work_size": "int, square working resolution per tile (default 512)",
    "hist_bins": "int, histogram-specification bins (default 256)",
    "backbone": "toy | pretrained_vgg19 (default toy)",
    "toy_seed": "int, toy backbone weight seed (default 0)",
    "style_layers": "comma list of layer ids (default per backbone)",
    "content_layer": "layer id (default per backbone)",
    "layer_weights": "'uniform' or comma floats aligned with style_layers",
    "weights_path": "path to serialized VGG19 weights (vgg only)",
    "weights_sha256": "pinned digest of the weights file (vgg only)",
    "input_size": "int, extractor input side (default 512 for vgg)",
}

REFINER_KEYS = {
    "seed": "int, mandatory",
    "steps": "int, total training steps, mandatory",
    "batch_size": "int (default 4)",
    "crop_size": "int, square crop fed to the discriminator (default 256)",
    "lr_refiner": "float (default 1e-4)",
    "lr_disc": "float (default 1e-4)",
    "disc": "tiny | resnet18_class (default tiny)",
    "log_every": "int, curve logging stride (default 1)",
}


def parse_kv_file(path: str | Path) -> dict[str, str]:
    """Parse ``key = value`` lines; '#' starts a comment."""
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"no such config file: {path}")
    out: dict[str, str] = {}
    for lineno, raw in enumerate(path.read_text().splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{lineno}: expected 'key = value', got {raw!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        if key in out:
            raise ConfigError(f"{path}:{lineno}: duplicate key {key!r}")
        out[key] = value
    return out


def _check_keys(kv: dict[str, str], allowed: dict[str, str], path) -> None:
    unknown = sorted(set(kv) - set(allowed))
    if unknown:
        raise ConfigError(
            f"{path}: unknown config keys {unknown}; known keys: {sorted(allowed)}"
        )
    if "seed" not in kv:
        raise ConfigError(f"{path}: 'seed' is mandatory (no wall-clock defaults)")


def _as_int(kv, key, default=None):
    if key not in kv:
        return default
    try:
        return int(kv[key])
    except ValueError as exc:
        raise ConfigError(f"key {key!r}: expected integer, got {kv[key]!r}") from exc


def _as_float(kv, key, default=None):
    if key not in kv:
        return default
    try:
        return float(kv[key])
    except ValueError as exc:
        raise ConfigError(f"key {key!r}: expected number, got {kv[key]!r}") from exc


def _as_list(value: str) -> list[str]:
    return [item.strip() for item in value.split(",") if item.strip()]


def load_transfer_config(path: str | Path) -> TransferConfig:
    kv = parse_kv_file(path)
    _check_keys(kv, TRANSFER_KEYS, path)

    backbone = kv.get("backbone", "toy")
    if backbone == "toy":
        default_styles, default_content = TOY_STYLE_LAYERS, TOY_CONTENT_LAYER
    elif backbone == "pretrained_vgg19":
        default_styles, default_content = VGG_STYLE_LAYERS, VGG_CONTENT_LAYER
    else:
        raise ConfigError(f"backbone must be 'toy' or 'pretrained_vgg19', got {backbone!r}")

    style_layers = tuple(_as_list(kv["style_layers"])) if "style_layers" in kv else default_styles
    content_layer = kv.get("content_layer", default_content)

    if backbone == "toy":
        spec = toy_spec(
            seed=_as_int(kv, "toy_seed", 0),
            style_layers=style_layers,
            content_layer=content_layer,
            input_size=_as_int(kv, "input_size", None),
        )
    else:
        if "weights_path" not in kv or "weights_sha256" not in kv:
            raise ConfigError("pretrained_vgg19 requires weights_path and weights_sha256")
        spec = vgg19_spec(
            weights_path=kv["weights_path"],
            weights_checksum=kv["weights_sha256"],
            style_layers=style_layers,
            content_layer=content_layer,
            input_size=_as_int(kv, "input_size", VGG_INPUT_SIZE),
        )

    layer_weights = None
    if "layer_weights" in kv and kv["layer_weights"] != "uniform":
        parts = _as_list(kv["layer_weights"])
        try:
            layer_weights = tuple(float(p) for p in parts)
        except ValueError as exc:
            raise ConfigError(f"layer_weights: expected numbers, got {kv['layer_weights']!r}") from exc
        if len(layer_weights) != len(style_layers):
            raise ConfigError(
                f"layer_weights has {len(layer_weights)} entries for {len(style_layers)} style layers"
            )

    scales = tuple(_as_list(kv["scales"])) if "scales" in kv else ("scale0", "scale1", "scale2")

    return TransferConfig(
        extractor=spec,
        steps=_as_int(kv, "steps", 400),
        optimizer=OptimizerSettings(
            learning_rate=_as_float(kv, "learning_rate", 0.02),
            betas=(_as_float(kv, "beta1", 0.9), _as_float(kv, "beta2", 0.999)),
        ),
        n_refs=_as_int(kv, "n_refs", 5),
        overlap=_as_int(kv, "overlap", 0),
        scales=scales,
        layer_weights=layer_weights,
        hist_bins=_as_int(kv, "hist_bins", 256),
        seed=_as_int(kv, "seed"),
        work_size=_as_int(kv, "work_size", 512),
    )


def load_refiner_train_config(path: str | Path) -> RefinerTrainConfig:
    kv = parse_kv_file(path)
    _check_keys(kv, REFINER_KEYS, path)
    if "steps" not in kv:
        raise ConfigError(f"{path}: 'steps' is mandatory for refiner training")
    return RefinerTrainConfig(
        steps=_as_int(kv, "steps"),
        seed=_as_int(kv, "seed"),
        batch_size=_as_int(kv, "batch_size", 4),
        crop_size=_as_int(kv, "crop_size", 256),
        lr_refiner=_as_float(kv, "lr_refiner", 1e-4),
        lr_disc=_as_float(kv, "lr_disc", 1e-4),
        disc_kind=kv.get("disc", "tiny"),
        log_every=_as_int(kv, "log_every", 1),
    )
