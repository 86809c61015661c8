"""Dataset manifests and audited access to private images."""

from __future__ import annotations

import contextlib
import hashlib
import json
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .errors import DataError
from .imageio import atomic_write_bytes, encode_pnm, read_image


class AccessAudit:
    """Counts private-data reads per pipeline stage."""

    def __init__(self):
        self.counts: Counter = Counter()
        self.current = "unstaged"

    @contextlib.contextmanager
    def stage(self, name: str):
        prev, self.current = self.current, name
        try:
            yield self
        finally:
            self.current = prev

    def record(self, what: str = "") -> None:
        self.counts[self.current] += 1

    def opener(self):
        def _open(path, mode="rb"):
            self.record(str(path))
            return open(path, mode)

        return _open


@dataclass
class DatasetManifest:
    split: str
    items: List[Tuple[str, int]]  # (relative image path, condition id)
    content_hash: str
    generator: Optional[dict] = None
    item_hashes: List[str] = field(default_factory=list)

    def to_json(self) -> str:
        return json.dumps(
            {
                "split": self.split,
                "items": [{"path": p, "cond": c} for p, c in self.items],
                "content_hash": self.content_hash,
                "item_hashes": self.item_hashes,
                "generator": self.generator,
            },
            indent=2,
            sort_keys=True,
        )

    @classmethod
    def from_json(cls, text: str) -> "DatasetManifest":
        d = json.loads(text)
        return cls(
            d["split"],
            [(it["path"], int(it["cond"])) for it in d["items"]],
            d["content_hash"],
            d.get("generator"),
            list(d.get("item_hashes", [])),
        )


def hash_images(blobs: Sequence[bytes]) -> Tuple[str, List[str]]:
    total = hashlib.sha256()
    items = []
    for b in blobs:
        h = hashlib.sha256(b).hexdigest()
        items.append(h)
        total.update(h.encode())
    return total.hexdigest(), items


def write_dataset(out_dir, split: str, images, conds, generator: Optional[dict] = None) -> DatasetManifest:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    blobs, items = [], []
    for i, (img, c) in enumerate(zip(images, conds)):
        ext = "pgm" if np.asarray(img).shape[-1] == 1 else "ppm"
        rel = f"{split}_{i:05d}_c{c}.{ext}"
        blob = encode_pnm(img)
        atomic_write_bytes(out / rel, blob)
        blobs.append(blob)
        items.append((rel, int(c)))
    total, per_item = hash_images(blobs)
    manifest = DatasetManifest(split, items, total, generator, per_item)
    atomic_write_bytes(out / "manifest.json", manifest.to_json().encode())
    return manifest


def read_manifest(path) -> Tuple[DatasetManifest, Path]:
    p = Path(path)
    if p.is_dir():
        p = p / "manifest.json"
    if not p.is_file():
        raise DataError(f"manifest not found: {p}")
    try:
        return DatasetManifest.from_json(p.read_text()), p.parent
    except (KeyError, ValueError) as exc:
        raise DataError(f"malformed manifest {p}: {exc}") from None


def load_public(path, cond_vocab: Optional[int] = None):
    manifest, root = read_manifest(path)
    images, conds, blobs = [], [], []
    for rel, c in manifest.items:
        fp = root / rel
        if not fp.is_file():
            raise DataError(f"missing image {fp}")
        blobs.append(fp.read_bytes())
        images.append(read_image(fp))
        conds.append(c)
    check_manifest(manifest, blobs, cond_vocab)
    return images, conds, manifest


def check_manifest(manifest: DatasetManifest, blobs: Sequence[bytes], cond_vocab: Optional[int]) -> None:
    total, _ = hash_images(blobs)
    if total != manifest.content_hash:
        raise DataError(f"content hash mismatch for split {manifest.split!r}")
    if cond_vocab is not None:
        bad = [c for _, c in manifest.items if not 0 <= c < cond_vocab]
        if bad:
            raise DataError(f"condition id {bad[0]} outside vocabulary of {cond_vocab}")


class PrivateDataset:
    """Lazy handle on private images; every read goes through an :class:`AccessAudit`.

    The size and condition ids are available without reading any image.
    """

    def __init__(self, conds: Sequence[int], loader, audit: Optional[AccessAudit] = None, item_hashes=(), content_hash=""):
        self.conds = list(conds)
        self._loader = loader
        self.audit = audit or AccessAudit()
        self.item_hashes = list(item_hashes)
        self.content_hash = content_hash

    def __len__(self) -> int:
        return len(self.conds)

    def load(self) -> List[np.ndarray]:
        return [self._loader(i) for i in range(len(self))]

    @classmethod
    def from_arrays(cls, images, conds, audit: Optional[AccessAudit] = None) -> "PrivateDataset":
        images = [np.asarray(im, dtype=np.float64) for im in images]
        audit = audit or AccessAudit()
        blobs = [encode_pnm(im) for im in images]
        total, per_item = hash_images(blobs)

        def loader(i):
            audit.record(f"array:{i}")
            return images[i]

        return cls(conds, loader, audit, per_item, total)

    @classmethod
    def from_manifest(cls, path, audit: Optional[AccessAudit] = None) -> "PrivateDataset":
        manifest, root = read_manifest(path)
        audit = audit or AccessAudit()
        opener = audit.opener()

        def loader(i):
            fp = root / manifest.items[i][0]
            if not fp.is_file():
                raise DataError(f"missing image {fp}")
            return read_image(fp, opener=opener)

        return cls([c for _, c in manifest.items], loader, audit, manifest.item_hashes, manifest.content_hash)
