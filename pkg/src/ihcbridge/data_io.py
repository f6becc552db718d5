"""Loading patch corpora and drawing unpaired batches.

Images are held in memory as uint8 and converted on demand, so a loaded
pixel is always exactly ``file value / 255``.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Optional, Tuple

import numpy as np
from PIL import Image

from .phantom import MANIFEST_NAME, read_manifest

DOMAINS = ("A", "B", "C")
MASK_SUFFIXES = ("_me", "_md")


class DatasetError(RuntimeError):
    pass


@dataclass(frozen=True)
class PatchRecord:
    image: Path
    domain: str
    mask_e: Optional[Path] = None
    mask_d: Optional[Path] = None

    @property
    def labeled(self) -> bool:
        return self.mask_e is not None or self.mask_d is not None


def read_png(path) -> np.ndarray:
    with Image.open(path) as im:
        return np.asarray(im)


def read_rgb(path) -> np.ndarray:
    arr = read_png(path)
    if arr.ndim != 3 or arr.shape[-1] != 3:
        raise DatasetError(f"{path} is not an RGB image")
    return arr


def read_mask(path) -> np.ndarray:
    arr = read_png(path)
    if arr.ndim == 3:
        arr = arr[..., 0]
    return arr > 127


@dataclass
class PatchDataset:
    root: Path
    domain: str
    records: List[PatchRecord]
    images: np.ndarray = field(repr=False)  # N x H x W x 3 uint8
    masks_e: np.ndarray = field(repr=False)  # N x H x W bool, zeros when unlabeled
    masks_d: np.ndarray = field(repr=False)

    def __len__(self) -> int:
        return len(self.records)

    @property
    def patch_shape(self) -> Tuple[int, int]:
        return self.images.shape[1:3]

    @property
    def labeled_indices(self) -> np.ndarray:
        return np.array([i for i, r in enumerate(self.records) if r.labeled], dtype=np.int64)

    def patches(self, indices=None) -> np.ndarray:
        """Float32 patches in [0, 1]."""
        imgs = self.images if indices is None else self.images[indices]
        return imgs.astype(np.float32) / np.float32(255.0)


def _records_from_manifest(manifest: Path, domain: str) -> List[PatchRecord]:
    root = manifest.parent
    rows = [r for r in read_manifest(manifest) if r.domain == domain and r.split == "train"]
    images = {r.path: r for r in rows if r.kind == "image"}
    masks = {(r.path.rsplit("_", 1)[0], r.kind): r.path for r in rows if r.kind in ("mask_e", "mask_d")}
    out = []
    for rel in images:
        stem = rel[: -len(".png")]
        me, md = masks.get((stem, "mask_e")), masks.get((stem, "mask_d"))
        out.append(PatchRecord(root / rel, domain, root / me if me else None, root / md if md else None))
    return out


def _records_from_dir(directory: Path, domain: str) -> List[PatchRecord]:
    out = []
    for p in directory.glob("*.png"):
        if p.stem.endswith(MASK_SUFFIXES):
            continue
        me = p.with_name(p.stem + "_me.png")
        md = p.with_name(p.stem + "_md.png")
        out.append(PatchRecord(p, domain, me if me.exists() else None, md if md.exists() else None))
    return out


def load_dataset(manifest_or_dir, domain: str) -> PatchDataset:
    """Load every training patch of ``domain`` (A, B or C).

    ``manifest_or_dir`` is a phantom ``manifest.csv``, a corpus root
    containing one, or a plain directory of PNGs with optional
    ``<name>_me.png`` / ``<name>_md.png`` mask sidecars.
    """
    if domain not in DOMAINS:
        raise DatasetError(f"domain must be one of {DOMAINS}, got {domain!r}")
    path = Path(manifest_or_dir)
    if not path.exists():
        raise DatasetError(f"{path} does not exist")
    if path.is_dir() and (path / MANIFEST_NAME).exists():
        path = path / MANIFEST_NAME
    records = _records_from_manifest(path, domain) if path.is_file() else _records_from_dir(path, domain)
    if not records:
        raise DatasetError(f"no {domain} patches found under {path}")
    records.sort(key=lambda r: str(r.image))
    root = path.parent if path.is_file() else path

    for r in records:
        for p in (r.image, r.mask_e, r.mask_d):
            if p is not None and not p.exists():
                raise DatasetError(f"missing file {p}")
    arrays = [read_rgb(r.image) for r in records]
    shapes = sorted({a.shape for a in arrays})
    if len(shapes) > 1:
        raise DatasetError(f"patch sizes differ under {root}: {shapes}")
    images = np.stack(arrays)
    h, w = images.shape[1:3]
    masks_e = np.zeros((len(records), h, w), dtype=bool)
    masks_d = np.zeros_like(masks_e)
    for i, r in enumerate(records):
        for target, p in ((masks_e, r.mask_e), (masks_d, r.mask_d)):
            if p is None:
                continue
            m = read_mask(p)
            if m.shape != (h, w):
                raise DatasetError(f"mask {p} has shape {m.shape}, expected {(h, w)}")
            target[i] = m
    return PatchDataset(root, domain, records, images, masks_e, masks_d)


@dataclass
class UnpairedBatch:
    x_A: np.ndarray
    x_B: np.ndarray
    x_C: np.ndarray
    mask_e: np.ndarray  # per-A masks, zeros for unlabeled items
    mask_d: np.ndarray
    labeled: np.ndarray  # per-A flag
    indices: Tuple[np.ndarray, np.ndarray, np.ndarray]


def _draw_a(ds: PatchDataset, n: int, rng: np.random.Generator, labeled_fraction: float) -> np.ndarray:
    lab = ds.labeled_indices
    if labeled_fraction <= 0 or len(lab) == 0:
        return rng.integers(0, len(ds), size=n)
    unl = np.setdiff1d(np.arange(len(ds)), lab)
    use_lab = rng.random(n) < labeled_fraction
    if len(unl) == 0:
        use_lab[:] = True
    from_lab = lab[rng.integers(0, len(lab), size=n)]
    from_unl = unl[rng.integers(0, len(unl), size=n)] if len(unl) else from_lab
    return np.where(use_lab, from_lab, from_unl)


def _flip(x: np.ndarray, fh: np.ndarray, fv: np.ndarray) -> np.ndarray:
    x = x.copy()
    x[fh] = x[fh][:, :, ::-1]
    x[fv] = x[fv][:, ::-1]
    return x


def sample_batch(
    datasets: Tuple[Optional[PatchDataset], Optional[PatchDataset], Optional[PatchDataset]],
    batch_size: int,
    rng: np.random.Generator,
    labeled_fraction: float = 0.0,
    flips: bool = False,
) -> UnpairedBatch:
    """Draw independently, with replacement, from each domain.

    ``rng`` is advanced in place. A domain given as ``None`` yields an
    empty array. With ``labeled_fraction > 0`` each A slot comes from the
    labelled subset with that probability and from the unlabelled rest
    otherwise.
    """
    if batch_size < 1:
        raise ValueError(f"batch_size must be >= 1, got {batch_size}")
    ds_a, ds_b, ds_c = datasets
    for ds in datasets:
        if ds is not None and len(ds) == 0:
            raise DatasetError(f"dataset {ds.domain} is empty")
    idx_a = _draw_a(ds_a, batch_size, rng, labeled_fraction) if ds_a is not None else np.zeros(0, np.int64)
    idx_b = rng.integers(0, len(ds_b), size=batch_size) if ds_b is not None else np.zeros(0, np.int64)
    idx_c = rng.integers(0, len(ds_c), size=batch_size) if ds_c is not None else np.zeros(0, np.int64)

    def take(ds, idx):
        if ds is None:
            return np.zeros((0, 0, 0, 3), np.float32)
        return ds.patches(idx)

    x_a, x_b, x_c = take(ds_a, idx_a), take(ds_b, idx_b), take(ds_c, idx_c)
    if ds_a is not None:
        me, md = ds_a.masks_e[idx_a], ds_a.masks_d[idx_a]
        labeled = np.array([ds_a.records[i].labeled for i in idx_a], dtype=bool)
    else:
        me = md = np.zeros((0, 0, 0), bool)
        labeled = np.zeros(0, bool)
    if flips:
        fh, fv = rng.random(batch_size) < 0.5, rng.random(batch_size) < 0.5
        if ds_a is not None:
            x_a, me, md = _flip(x_a, fh, fv), _flip(me, fh, fv), _flip(md, fh, fv)
        if ds_b is not None:
            x_b = _flip(x_b, fh, fv)
        if ds_c is not None:
            x_c = _flip(x_c, fh, fv)
    return UnpairedBatch(x_a, x_b, x_c, me, md, labeled, (idx_a, idx_b, idx_c))


@dataclass
class EvalItem:
    name: str
    duplex: np.ndarray  # H x W x 3 float32
    monoplex: np.ndarray
    nucleus_mask: np.ndarray
    background_mask: np.ndarray


def load_eval_split(corpus) -> List[EvalItem]:
    """Paired evaluation items of a phantom corpus, ordered by path."""
    manifest = Path(corpus)
    if manifest.is_dir():
        manifest = manifest / MANIFEST_NAME
    if not manifest.exists():
        raise DatasetError(f"no manifest at {manifest}")
    root = manifest.parent
    by_index = {}
    for r in read_manifest(manifest):
        if r.split == "eval":
            by_index.setdefault(r.scene_index, {})[r.kind] = root / r.path
    needed = ("image", "ground_truth", "nucleus_mask", "background_mask")
    items = []
    for idx in sorted(by_index):
        files = by_index[idx]
        absent = [k for k in needed if k not in files]
        if absent:
            raise DatasetError(f"eval item {idx} lacks {absent}")
        dup = read_rgb(files["image"]).astype(np.float32) / np.float32(255.0)
        mono = read_rgb(files["ground_truth"]).astype(np.float32) / np.float32(255.0)
        nuc, bg = read_mask(files["nucleus_mask"]), read_mask(files["background_mask"])
        if not (dup.shape == mono.shape and dup.shape[:2] == nuc.shape == bg.shape):
            raise DatasetError(f"eval item {idx} has misaligned files")
        items.append(EvalItem(files["image"].name.rsplit("_", 1)[0], dup, mono, nuc, bg))
    items.sort(key=lambda it: it.name)
    return items


def load_segmentation_split(corpus) -> Tuple[np.ndarray, np.ndarray]:
    """Monoplex patches (float32) and nucleus masks reserved for the surrogate segmenter."""
    manifest = Path(corpus)
    if manifest.is_dir():
        manifest = manifest / MANIFEST_NAME
    root = manifest.parent
    by_index = {}
    for r in read_manifest(manifest):
        if r.split == "sb":
            by_index.setdefault(r.scene_index, {})[r.kind] = root / r.path
    if not by_index:
        raise DatasetError(f"no segmentation split in {manifest}")
    keys = sorted(by_index)
    images = np.stack([read_rgb(by_index[k]["image"]) for k in keys]).astype(np.float32) / np.float32(255.0)
    masks = np.stack([read_mask(by_index[k]["nucleus_mask"]) for k in keys])
    return images, masks
