"""Reference-image bank: construction, persistence, and nearest-area selection."""
from __future__ import annotations

import json
import re
from dataclasses import dataclass
from pathlib import Path

from .errors import DegenerateImageError, MammostyleError
from .imaging import Mammogram, load_image
from .util import atomic_write_json, sha256_file


class BankError(MammostyleError):
    pass


@dataclass(frozen=True)
class BankEntry:
    image: Mammogram
    breast_area: int
    path: str
    digest: str


@dataclass(frozen=True)
class ReferenceBank:
    """Immutable bank of same-vendor reference images with precomputed areas."""

    entries: tuple[BankEntry, ...]
    target_vendor: str


def infer_view_from_name(path: str | Path) -> str | None:
    """Read CC/MLO from delimited filename tokens, e.g. ``case12_MLO.png``."""
    tokens = re.split(r"[^A-Za-z0-9]+", Path(path).stem.upper())
    if "CC" in tokens:
        return "CC"
    if "MLO" in tokens:
        return "MLO"
    return None


def build_bank(
    paths: list[str | Path],
    vendor: str,
    views: list[str | None] | None = None,
) -> ReferenceBank:
    """Load reference images, compute breast areas, and assemble the bank.

    Views come from the explicit list when given, else from DICOM metadata or
    filename tokens. Images whose vendor metadata contradicts ``vendor`` and
    images with an empty breast mask are rejected.
    """
    if not paths:
        raise BankError("empty reference list")
    if views is not None and len(views) != len(paths):
        raise BankError("views list must align with paths")
    entries = []
    for i, path in enumerate(paths):
        view = views[i] if views is not None else None
        if view is None:
            view = infer_view_from_name(path)
        m = load_image(path, view=view, vendor=None if _maybe_dicom(path) else vendor)
        if m.vendor != vendor:
            raise BankError(f"mixed vendors: {path} is {m.vendor!r}, bank is {vendor!r}")
        area = m.breast_area
        if area == 0:
            raise DegenerateImageError(f"no breast found in {path}")
        entries.append(BankEntry(image=m, breast_area=area, path=str(path), digest=sha256_file(path)))
    return ReferenceBank(entries=tuple(entries), target_vendor=vendor)


def _maybe_dicom(path: str | Path) -> bool:
    try:
        with open(path, "rb") as f:
            head = f.read(132)
    except OSError:
        return False  # let load_image report the unreadable file
    return len(head) >= 132 and head[128:132] == b"DICM"


def save_manifest(bank: ReferenceBank, path: str | Path) -> None:
    manifest = {
        "vendor": bank.target_vendor,
        "entries": [
            {
                "path": e.path,
                "view": e.image.view,
                "area": e.breast_area,
                "digest": e.digest,
            }
            for e in bank.entries
        ],
    }
    atomic_write_json(path, manifest)


def load_bank(manifest_path: str | Path) -> ReferenceBank:
    """Rebuild a bank from its manifest, verifying content digests."""
    manifest_path = Path(manifest_path)
    if not manifest_path.is_file():
        raise BankError(f"no such bank manifest: {manifest_path}")
    manifest = json.loads(manifest_path.read_text())
    vendor = manifest["vendor"]
    entries = []
    for rec in manifest["entries"]:
        digest = sha256_file(rec["path"])
        if digest != rec["digest"]:
            raise BankError(f"digest mismatch for {rec['path']} (bank is stale)")
        m = load_image(rec["path"], view=rec["view"], vendor=vendor)
        if m.breast_area != rec["area"]:
            raise BankError(f"area mismatch for {rec['path']} (bank is stale)")
        entries.append(
            BankEntry(image=m, breast_area=rec["area"], path=rec["path"], digest=digest)
        )
    if not entries:
        raise BankError("bank manifest has no entries")
    return ReferenceBank(entries=tuple(entries), target_vendor=vendor)


def select_entries(source: Mammogram, bank: ReferenceBank, n: int) -> list[BankEntry]:
    """The n same-view bank entries closest in breast area to the source.

    Ranking is by absolute area difference; ties keep bank insertion order, so
    selection is deterministic and n -> n+1 selections are nested.
    """
    if n < 1:
        raise BankError("n must be >= 1")
    same_view = [e for e in bank.entries if e.image.view == source.view]
    if len(same_view) < n:
        raise BankError(
            f"bank has only {len(same_view)} {source.view} entries, need {n}"
        )
    src_area = source.breast_area
    ranked = sorted(same_view, key=lambda e: abs(e.breast_area - src_area))
    return ranked[:n]


def select_refs(source: Mammogram, bank: ReferenceBank, n: int) -> list[Mammogram]:
    """Images of the n same-view entries nearest in breast area."""
    return [e.image for e in select_entries(source, bank, n)]
