"""Per-subband vector quantization of wavelet pyramids.

Each plane of a pyramid is cut into non-overlapping patches (raster order)
and every patch is replaced by the id of its nearest centroid in that
plane's codebook. Codebooks own disjoint, contiguous id ranges, so a single
vocabulary covers every band.
"""

from __future__ import annotations

import struct
import warnings
from dataclasses import dataclass, field
from typing import Dict, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np

from .errors import CodebookError, CorruptSequenceError, DimensionError
from .wavelet import BANDS, SubbandPyramid

KMEANS_ITERS = 50


def band_keys(depth: int) -> List[str]:
    """Band keys in layout order: ``LL`` then ``LH0, HL0, HH0, LH1, ...``."""
    return ["LL"] + [f"{b}{j}" for j in range(depth) for b in BANDS]


def _scale_of(key: str) -> Optional[int]:
    return None if key == "LL" else int(key[2:])


def extract_patches(plane: np.ndarray, ph: int, pw: int) -> np.ndarray:
    """Split a ``(C, h, w)`` plane into raster-ordered ``(n, ph*pw*C)`` vectors."""
    c, h, w = plane.shape
    if h % ph or w % pw:
        raise DimensionError(f"plane {h}x{w} not divisible by patch {ph}x{pw}")
    blocks = plane.reshape(c, h // ph, ph, w // pw, pw)
    # -> (rows, cols, ph, pw, C)
    blocks = blocks.transpose(1, 3, 2, 4, 0)
    return blocks.reshape(-1, ph * pw * c)


def assemble_patches(vectors: np.ndarray, c: int, h: int, w: int, ph: int, pw: int) -> np.ndarray:
    blocks = vectors.reshape(h // ph, w // pw, ph, pw, c)
    return blocks.transpose(4, 0, 2, 1, 3).reshape(c, h, w)


def _sqdist(x: np.ndarray, centroids: np.ndarray) -> np.ndarray:
    diff = x[:, None, :] - centroids[None, :, :]
    return np.einsum("nkd,nkd->nk", diff, diff)


def nearest(x: np.ndarray, centroids: np.ndarray) -> np.ndarray:
    """Index of the nearest centroid per row; ties go to the lowest index."""
    return np.argmin(_sqdist(x, centroids), axis=1)


def kmeans(x: np.ndarray, k: int, rng: np.random.Generator, iters: int = KMEANS_ITERS) -> np.ndarray:
    """Lloyd's algorithm with k-means++ seeding and a fixed iteration count.

    Empty clusters are re-seeded with the point farthest from its assigned
    centroid.
    """
    n = x.shape[0]
    centroids = np.empty((k, x.shape[1]))
    centroids[0] = x[rng.integers(n)]
    closest = np.sum((x - centroids[0]) ** 2, axis=1)
    for i in range(1, k):
        total = closest.sum()
        if total > 0:
            idx = int(np.searchsorted(np.cumsum(closest), rng.random() * total, side="right"))
            idx = min(idx, n - 1)
        else:
            idx = int(rng.integers(n))
        centroids[i] = x[idx]
        closest = np.minimum(closest, np.sum((x - centroids[i]) ** 2, axis=1))

    for _ in range(iters):
        d2 = _sqdist(x, centroids)
        assign = np.argmin(d2, axis=1)
        counts = np.bincount(assign, minlength=k)
        sums = np.zeros_like(centroids)
        np.add.at(sums, assign, x)
        point_d = d2[np.arange(n), assign]
        for j in np.flatnonzero(counts == 0):
            far = int(np.argmax(point_d))
            centroids[j] = x[far]
            point_d[far] = -1.0
        nonempty = counts > 0
        centroids[nonempty] = sums[nonempty] / counts[nonempty, None]
    return centroids


@dataclass(frozen=True)
class Slot:
    position: int
    band: str
    scale: Optional[int]
    patch: int


@dataclass(frozen=True)
class SequenceLayout:
    """Coarse-first slot ordering shared by every sequence of one tokenizer."""

    plane_shapes: Tuple[Tuple[str, Tuple[int, int, int]], ...]
    patch_sizes: Tuple[Tuple[str, Tuple[int, int]], ...]
    vocab_offsets: Tuple[Tuple[str, int, int], ...]  # (band, offset, size)

    def __post_init__(self):
        slots = []
        for (band, (c, h, w)), (_, (ph, pw)) in zip(self.plane_shapes, self.patch_sizes):
            for p in range((h // ph) * (w // pw)):
                slots.append(Slot(len(slots), band, _scale_of(band), p))
        object.__setattr__(self, "_slots", tuple(slots))
        lo = np.empty(len(slots), dtype=np.int64)
        hi = np.empty(len(slots), dtype=np.int64)
        ranges = {b: (o, o + s) for b, o, s in self.vocab_offsets}
        for s in slots:
            lo[s.position], hi[s.position] = ranges[s.band]
        object.__setattr__(self, "_lo", lo)
        object.__setattr__(self, "_hi", hi)

    @property
    def slots(self) -> Tuple[Slot, ...]:
        return self._slots

    def __len__(self) -> int:
        return len(self._slots)

    @property
    def coarse_length(self) -> int:
        return sum(1 for s in self._slots if s.band == "LL")

    def band_counts(self) -> Dict[str, int]:
        out: Dict[str, int] = {}
        for s in self._slots:
            out[s.band] = out.get(s.band, 0) + 1
        return out

    def slot_range(self, position: int) -> Tuple[int, int]:
        """Half-open token-id range valid at body ``position``."""
        return int(self._lo[position]), int(self._hi[position])

    @property
    def range_bounds(self) -> Tuple[np.ndarray, np.ndarray]:
        return self._lo, self._hi

    @property
    def vocab_size(self) -> int:
        return max(o + s for _, o, s in self.vocab_offsets)


@dataclass(frozen=True)
class TokenSequence:
    """Condition prefix plus scale-ordered image tokens."""

    cond: Tuple[int, ...]
    body: Tuple[int, ...]
    layout: SequenceLayout = field(repr=False, compare=False)

    def __post_init__(self):
        object.__setattr__(self, "cond", tuple(int(t) for t in self.cond))
        object.__setattr__(self, "body", tuple(int(t) for t in self.body))

    def to_bytes(self) -> bytes:
        """``[cond_len, cond..., body_len, body...]`` as little-endian int32."""
        vals = [len(self.cond), *self.cond, len(self.body), *self.body]
        return struct.pack(f"<{len(vals)}i", *vals)

    @classmethod
    def from_bytes(cls, data: bytes, layout: SequenceLayout) -> "TokenSequence":
        if len(data) % 4:
            raise CorruptSequenceError("byte length is not a multiple of 4")
        vals = struct.unpack(f"<{len(data) // 4}i", data)
        if not vals:
            raise CorruptSequenceError("empty buffer")
        nc = vals[0]
        if nc < 0 or len(vals) < nc + 2:
            raise CorruptSequenceError(f"condition length {nc} exceeds buffer")
        nb = vals[nc + 1]
        if nb < 0 or len(vals) != nc + 2 + nb:
            raise CorruptSequenceError(f"body length {nb} does not match buffer")
        return cls(vals[1 : nc + 1], vals[nc + 2 :], layout)


def coarse_slice(tokens: TokenSequence) -> TokenSequence:
    n = tokens.layout.coarse_length
    return TokenSequence(tokens.cond, tokens.body[:n], tokens.layout)


@dataclass
class CodebookSet:
    """Frozen per-band codebooks and the sequence layout they induce."""

    centroids: Dict[str, np.ndarray]
    patch_sizes: Dict[str, Tuple[int, int]]
    plane_shapes: Dict[str, Tuple[int, int, int]]
    seed: int

    def __post_init__(self):
        offsets = []
        off = 0
        for band in self.bands:
            k = self.centroids[band].shape[0]
            offsets.append((band, off, k))
            off += k
        self.layout = SequenceLayout(
            tuple((b, tuple(self.plane_shapes[b])) for b in self.bands),
            tuple((b, tuple(self.patch_sizes[b])) for b in self.bands),
            tuple(offsets),
        )
        self._offset = {b: o for b, o, _ in offsets}

    @property
    def bands(self) -> List[str]:
        depth = (len(self.plane_shapes) - 1) // 3
        return band_keys(depth)

    @property
    def depth(self) -> int:
        return (len(self.plane_shapes) - 1) // 3

    @property
    def vocab_size(self) -> int:
        return self.layout.vocab_size

    @property
    def coarse_vocab(self) -> Tuple[int, int]:
        return (0, self.centroids["LL"].shape[0])

    def offset(self, band: str) -> int:
        return self._offset[band]

    def encode(self, pyramid: SubbandPyramid, cond: Sequence[int] = ()) -> TokenSequence:
        return encode(pyramid, self, cond)

    def decode(self, tokens: TokenSequence) -> SubbandPyramid:
        return decode(tokens, self)

    def to_arrays(self) -> Dict[str, np.ndarray]:
        return {band: np.ascontiguousarray(c) for band, c in self.centroids.items()}

    def meta(self) -> dict:
        return {
            "seed": int(self.seed),
            "bands": self.bands,
            "patch_sizes": {b: list(self.patch_sizes[b]) for b in self.bands},
            "plane_shapes": {b: list(self.plane_shapes[b]) for b in self.bands},
        }

    @classmethod
    def from_arrays(cls, meta: dict, arrays: Mapping[str, np.ndarray]) -> "CodebookSet":
        bands = meta["bands"]
        return cls(
            centroids={b: np.asarray(arrays[b], dtype=np.float64) for b in bands},
            patch_sizes={b: tuple(meta["patch_sizes"][b]) for b in bands},
            plane_shapes={b: tuple(meta["plane_shapes"][b]) for b in bands},
            seed=int(meta["seed"]),
        )


PatchSpec = Union[Tuple[int, int], Mapping[str, Tuple[int, int]]]
SizeSpec = Union[int, Mapping[str, int]]


def _per_band(spec, band: str, what: str):
    if isinstance(spec, Mapping):
        if band in spec:
            return spec[band]
        kind = "approx" if band == "LL" else "detail"
        if kind in spec:
            return spec[kind]
        raise CodebookError(f"no {what} given for band {band}")
    return spec


def fit_codebooks(
    pyramids: Sequence[SubbandPyramid],
    K: SizeSpec = None,
    patch: PatchSpec = None,
    seed: int = 0,
) -> CodebookSet:
    """Fit one k-means codebook per band on (public) pyramids.

    ``K`` and ``patch`` are either scalars or mappings keyed by band key or
    by ``"approx"`` / ``"detail"``. Defaults: ``K={"approx": 64, "detail": 32}``,
    ``patch={"approx": (2, 2), "detail": (4, 4)}``.
    """
    if not pyramids:
        raise CodebookError("no pyramids to fit codebooks on")
    K = {"approx": 64, "detail": 32} if K is None else K
    patch = {"approx": (2, 2), "detail": (4, 4)} if patch is None else patch
    ref = pyramids[0]
    ref_planes = ref.planes()
    for p in pyramids[1:]:
        if {k: v.shape for k, v in p.planes().items()} != {k: v.shape for k, v in ref_planes.items()}:
            raise DimensionError("pyramids do not share depth and shape")

    keys = band_keys(ref.depth)
    centroids, patch_sizes, shapes = {}, {}, {}
    for i, band in enumerate(keys):
        ph, pw = _per_band(patch, band, "patch size")
        k = int(_per_band(K, band, "codebook size"))
        if k < 2:
            raise CodebookError(f"codebook size for {band} must be >= 2, got {k}")
        x = np.concatenate([extract_patches(p.planes()[band], ph, pw) for p in pyramids])
        if x.shape[0] < k:
            raise CodebookError(
                f"band {band} has only {x.shape[0]} patches for K={k}; use a smaller K"
            )
        distinct = np.unique(x, axis=0).shape[0]
        if distinct < k:
            warnings.warn(
                f"band {band} has {distinct} distinct patches for K={k}; "
                "some centroids will coincide",
                stacklevel=2,
            )
        rng = np.random.default_rng(np.random.SeedSequence([seed, i]))
        centroids[band] = kmeans(x, k, rng)
        patch_sizes[band] = (int(ph), int(pw))
        shapes[band] = tuple(int(s) for s in ref_planes[band].shape)
    return CodebookSet(centroids, patch_sizes, shapes, seed)


def _check_compatible(pyramid: SubbandPyramid, cb: CodebookSet) -> None:
    planes = pyramid.planes()
    if list(planes) != cb.bands:
        raise DimensionError(
            f"pyramid depth {pyramid.depth} does not match codebook depth {cb.depth}"
        )
    for band in cb.bands:
        if tuple(planes[band].shape) != tuple(cb.plane_shapes[band]):
            raise DimensionError(
                f"{band} plane has shape {planes[band].shape}, codebook expects {cb.plane_shapes[band]}"
            )


def encode(pyramid: SubbandPyramid, cb: CodebookSet, cond: Sequence[int] = ()) -> TokenSequence:
    """Map every patch to its nearest centroid id, in layout order."""
    _check_compatible(pyramid, cb)
    planes = pyramid.planes()
    body = []
    for band in cb.bands:
        ph, pw = cb.patch_sizes[band]
        ids = nearest(extract_patches(planes[band], ph, pw), cb.centroids[band])
        body.extend((ids + cb.offset(band)).tolist())
    return TokenSequence(tuple(cond), tuple(body), cb.layout)


def decode(tokens: TokenSequence, cb: CodebookSet) -> SubbandPyramid:
    """Write each slot's centroid into its patch; missing slots stay zero."""
    layout = cb.layout
    body = np.asarray(tokens.body, dtype=np.int64)
    if body.size > len(layout):
        raise CorruptSequenceError(
            f"body has {body.size} tokens but layout holds {len(layout)} slots"
        )
    lo, hi = layout.range_bounds
    bad = np.flatnonzero((body < lo[: body.size]) | (body >= hi[: body.size]))
    if bad.size:
        p = int(bad[0])
        raise CorruptSequenceError(
            f"token {int(body[p])} at slot {p} outside range [{lo[p]}, {hi[p]}) of band {layout.slots[p].band}"
        )
    planes = {}
    start = 0
    for band in cb.bands:
        c, h, w = cb.plane_shapes[band]
        ph, pw = cb.patch_sizes[band]
        n = (h // ph) * (w // pw)
        ids = body[start : start + n]
        vec = np.zeros((n, ph * pw * c))
        if ids.size:
            vec[: ids.size] = cb.centroids[band][ids - cb.offset(band)]
        planes[band] = assemble_patches(vec, c, h, w, ph, pw)
        start += n
    depth = cb.depth
    details = tuple(tuple(planes[f"{b}{j}"] for b in BANDS) for j in range(depth))
    return SubbandPyramid(planes["LL"], details)


def quantize(pyramid: SubbandPyramid, cb: CodebookSet) -> SubbandPyramid:
    return decode(encode(pyramid, cb), cb)
