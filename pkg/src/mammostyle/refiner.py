"""Learnable fusion of scale outputs and its adversarial training loop.

The refiner is a weighted sum of the three scale outputs followed by three
1x1 convolutions. Everything runs in float64: the nets are tiny and this
keeps the identity-initialization contract exact on [0,1] images.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import hashlib

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .errors import DivergenceError, MammostyleError

DISCRIMINATORS = ("tiny", "resnet18_class")


class RefinerError(MammostyleError):
    pass


class RefinerModel(nn.Module):
    """Weighted scale fusion followed by a 1->16->16->1 stack of 1x1 convs.

    Identity initialization: channel 0 of every stage is an exact passthrough
    and the last conv reads only channel 0, so r(x) == x for x >= 0 while the
    seeded off-path weights keep gradients alive for training.
    """

    def __init__(self, seed: int = 0, hidden: int = 16):
        super().__init__()
        self.fusion_weights = nn.Parameter(torch.full((3,), 1.0 / 3.0, dtype=torch.float64))
        self.conv1 = nn.Conv2d(1, hidden, 1).double()
        self.conv2 = nn.Conv2d(hidden, hidden, 1).double()
        self.conv3 = nn.Conv2d(hidden, 1, 1).double()
        gen = torch.Generator().manual_seed(int(seed))
        with torch.no_grad():
            for conv in (self.conv1, self.conv2, self.conv3):
                conv.weight.normal_(0.0, 0.1, generator=gen)
                conv.bias.zero_()
            self.conv1.weight[0].zero_()
            self.conv1.weight[0, 0, 0, 0] = 1.0
            self.conv2.weight[0].zero_()
            self.conv2.weight[0, 0, 0, 0] = 1.0
            self.conv3.weight.zero_()
            self.conv3.weight[0, 0, 0, 0] = 1.0

    def normalized_weights(self) -> torch.Tensor:
        total = self.fusion_weights.sum()
        if float(total.detach().abs()) < 1e-6:
            raise DivergenceError("fusion weights collapsed to zero sum")
        return self.fusion_weights / total

    def fuse(self, scales: torch.Tensor) -> torch.Tensor:
        """Convex combination of (..., 3, H, W) along the scale axis.

        Anchored on the first scale so identical inputs pass through exactly
        regardless of floating-point weight values.
        """
        w = self.normalized_weights()
        s0, s1, s2 = scales.unbind(dim=-3)
        return s0 + w[1] * (s1 - s0) + w[2] * (s2 - s0)

    def forward(self, scales: torch.Tensor) -> torch.Tensor:
        single = scales.dim() == 3
        if single:
            scales = scales.unsqueeze(0)
        x = self.fuse(scales).unsqueeze(1)
        x = F.relu(self.conv1(x))
        x = F.relu(self.conv2(x))
        x = self.conv3(x).squeeze(1)
        return x.squeeze(0) if single else x

    def digest(self) -> str:
        h = hashlib.sha256()
        for name, p in sorted(self.state_dict().items()):
            h.update(name.encode())
            h.update(p.detach().cpu().to(torch.float64).numpy().tobytes())
        return h.hexdigest()


class TinyDiscriminator(nn.Module):
    """Four strided conv stages and a linear head; for desk-scale training."""

    kind = "tiny"

    def __init__(self, seed: int = 0):
        super().__init__()
        torch.manual_seed(int(seed))
        chans = (8, 16, 32, 64)
        layers = []
        in_ch = 1
        for out_ch in chans:
            layers += [nn.Conv2d(in_ch, out_ch, 3, stride=2, padding=1), nn.LeakyReLU(0.2)]
            in_ch = out_ch
        self.body = nn.Sequential(*layers).double()
        self.head = nn.Linear(in_ch, 1).double()

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        feats = self.body(x).mean(dim=(2, 3))
        return self.head(feats).squeeze(-1)


class Resnet18Discriminator(nn.Module):
    """ResNet18-class backbone adapted to single-channel input."""

    kind = "resnet18_class"

    def __init__(self, seed: int = 0):
        super().__init__()
        import torchvision

        torch.manual_seed(int(seed))
        net = torchvision.models.resnet18(weights=None)
        net.conv1 = nn.Conv2d(1, 64, kernel_size=7, stride=2, padding=3, bias=False)
        net.fc = nn.Linear(net.fc.in_features, 1)
        self.net = net.double()

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.net(x).squeeze(-1)


def build_discriminator(kind: str, seed: int = 0) -> nn.Module:
    if kind == "tiny":
        return TinyDiscriminator(seed)
    if kind == "resnet18_class":
        return Resnet18Discriminator(seed)
    raise RefinerError(f"unknown discriminator kind {kind!r}")


def discriminator_prob(disc: nn.Module, x: torch.Tensor) -> torch.Tensor:
    """Probability the input is a genuine target-domain image, kept in (0,1)."""
    return torch.sigmoid(disc(x)).clamp(1e-7, 1.0 - 1e-7)


def fuse_and_refine(
    s0: np.ndarray, s1: np.ndarray, s2: np.ndarray, model: RefinerModel
) -> np.ndarray:
    """Apply the (trained or identity) refiner to three scale outputs."""
    arrs = [np.asarray(a, dtype=np.float64) for a in (s0, s1, s2)]
    if not (arrs[0].shape == arrs[1].shape == arrs[2].shape):
        raise RefinerError("scale outputs must share one shape")
    stack = torch.from_numpy(np.stack(arrs, axis=0))
    with torch.no_grad():
        out = model(stack)
    return out.numpy()


@dataclass(frozen=True)
class RefinerTrainConfig:
    steps: int
    seed: int
    batch_size: int = 4
    crop_size: int = 256
    lr_refiner: float = 1e-4
    lr_disc: float = 1e-4
    disc_kind: str = "tiny"
    log_every: int = 1

    def __post_init__(self):
        if self.steps < 0 or self.batch_size < 1 or self.crop_size < 8:
            raise RefinerError("invalid training config")
        if self.disc_kind not in DISCRIMINATORS:
            raise RefinerError(f"unknown discriminator kind {self.disc_kind!r}")

    def to_dict(self) -> dict:
        return {
            "steps": self.steps,
            "seed": self.seed,
            "batch_size": self.batch_size,
            "crop_size": self.crop_size,
            "lr_refiner": self.lr_refiner,
            "lr_disc": self.lr_disc,
            "disc_kind": self.disc_kind,
            "log_every": self.log_every,
        }


@dataclass
class TrainResult:
    model: RefinerModel
    disc: nn.Module
    curves: list[tuple[int, float, float]]  # (step, disc loss, generator term)
    state: dict = field(repr=False, default_factory=dict)


def _random_crop_indices(gen, count: int, shape: tuple[int, int], crop: int):
    rows = torch.randint(0, shape[0] - crop + 1, (count,), generator=gen)
    cols = torch.randint(0, shape[1] - crop + 1, (count,), generator=gen)
    return rows.tolist(), cols.tolist()


def train_refiner(
    model: RefinerModel,
    disc: nn.Module,
    real_targets: list[np.ndarray],
    scale_triples: list[tuple[np.ndarray, np.ndarray, np.ndarray]],
    cfg: RefinerTrainConfig,
    resume_state: dict | None = None,
) -> TrainResult:
    """Alternating GAN training of the refiner against a style discriminator.

    The discriminator ascends log D(style) + log(1 - D(R(triple))); the
    refiner ascends log D(R(triple)) (non-saturating) while the recorded
    generator term stays the minimax form log(1 - D(R(triple))). Training is
    deterministic given the seed and resumable from a returned state.
    """
    if not real_targets or not scale_triples:
        raise RefinerError("need non-empty real targets and scale triples")
    torch.set_num_threads(1)
    reals = [torch.from_numpy(np.asarray(r, dtype=np.float64)) for r in real_targets]
    triples = [
        torch.from_numpy(np.stack([np.asarray(a, dtype=np.float64) for a in t]))
        for t in scale_triples
    ]
    crop = cfg.crop_size
    for t in reals + triples:
        if t.shape[-2] < crop or t.shape[-1] < crop:
            raise RefinerError(f"crop_size {crop} exceeds an image of shape {tuple(t.shape[-2:])}")

    opt_g = torch.optim.Adam(model.parameters(), lr=cfg.lr_refiner, betas=(0.5, 0.999))
    opt_d = torch.optim.Adam(disc.parameters(), lr=cfg.lr_disc, betas=(0.5, 0.999))
    gen = torch.Generator().manual_seed(int(cfg.seed))
    start_step = 0
    curves: list[tuple[int, float, float]] = []

    if resume_state:
        model.load_state_dict(resume_state["model"])
        disc.load_state_dict(resume_state["disc"])
        opt_g.load_state_dict(resume_state["opt_g"])
        opt_d.load_state_dict(resume_state["opt_d"])
        gen.set_state(resume_state["rng"])
        start_step = resume_state["step"]
        curves = [tuple(row) for row in resume_state["curves"]]

    def sample_real() -> torch.Tensor:
        picks = torch.randint(0, len(reals), (cfg.batch_size,), generator=gen).tolist()
        crops = []
        for i in picks:
            (r,), (c,) = _random_crop_indices(gen, 1, reals[i].shape, crop)
            crops.append(reals[i][r : r + crop, c : c + crop])
        return torch.stack(crops).unsqueeze(1)

    def sample_triples() -> torch.Tensor:
        picks = torch.randint(0, len(triples), (cfg.batch_size,), generator=gen).tolist()
        crops = []
        for i in picks:
            (r,), (c,) = _random_crop_indices(gen, 1, triples[i].shape[-2:], crop)
            crops.append(triples[i][:, r : r + crop, c : c + crop])
        return torch.stack(crops)

    for step in range(start_step, cfg.steps):
        real = sample_real()
        triple = sample_triples()

        # Discriminator: minimize -[log D(real) + log(1 - D(fake))].
        with torch.no_grad():
            fake = model(triple).unsqueeze(1)
        d_loss = (
            F.softplus(-disc(real)).mean() + F.softplus(disc(fake)).mean()
        )
        opt_d.zero_grad()
        d_loss.backward()
        opt_d.step()

        # Refiner: non-saturating, minimize -log D(R(triple)).
        fake = model(triple).unsqueeze(1)
        fake_logits = disc(fake)
        g_loss = F.softplus(-fake_logits).mean()
        opt_g.zero_grad()
        g_loss.backward()
        opt_g.step()
        with torch.no_grad():
            total = model.fusion_weights.sum()
            if float(total.abs()) < 1e-6:
                raise DivergenceError("fusion weights collapsed during training", curves)
            model.fusion_weights.div_(total)

        # Reported generator term is the minimax form log(1 - D(R(.))).
        g_term = float((-F.softplus(fake_logits.detach())).mean())
        d_val = float(d_loss.detach())
        if not (np.isfinite(d_val) and np.isfinite(g_term)):
            raise DivergenceError(f"non-finite GAN loss at step {step}", curves)
        if (step + 1) % cfg.log_every == 0 or step + 1 == cfg.steps:
            curves.append((step, d_val, g_term))

    state = {
        "model": model.state_dict(),
        "disc": disc.state_dict(),
        "opt_g": opt_g.state_dict(),
        "opt_d": opt_d.state_dict(),
        "rng": gen.get_state(),
        "step": cfg.steps,
        "curves": [list(row) for row in curves],
        "disc_kind": getattr(disc, "kind", "tiny"),
        "config": cfg.to_dict(),
    }
    return TrainResult(model=model, disc=disc, curves=curves, state=state)


def save_checkpoint(path: str | Path, result: TrainResult) -> None:
    torch.save(result.state, path)


def load_checkpoint(path: str | Path) -> tuple[RefinerModel, nn.Module, dict]:
    """Rebuild model and discriminator from a training checkpoint."""
    state = torch.load(path, map_location="cpu", weights_only=False)
    model = RefinerModel()
    model.load_state_dict(state["model"])
    disc = build_discriminator(state.get("disc_kind", "tiny"))
    disc.load_state_dict(state["disc"])
    return model, disc, state


def write_curves_csv(path: str | Path, curves: list[tuple[int, float, float]]) -> None:
    import csv

    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["step", "disc_loss", "generator_term"])
        for step, d, g in curves:
            writer.writerow([step, repr(d), repr(g)])
