"""Synthetic duplex / monoplex / IF patch corpora built from one scene model.

Every scene is a set of non-overlapping elliptical nuclei, some of which are
marker positive, and optional DAB membrane rings. The same scene can be
rendered in any of the three domains, which gives held-back ground-truth
pairings for evaluation while the training corpora stay unpaired.
"""
from __future__ import annotations

import csv
import io
import logging
from dataclasses import asdict, dataclass, replace
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from PIL import Image

from .stain_space import DEFAULT_STAIN_MATRIX, D, E, H, validate_stain, validate_stain_matrix

logger = logging.getLogger(__name__)

DOMAIN_STYLES = ("duplex", "monoplex", "if")
MANIFEST_NAME = "manifest.csv"
MANIFEST_FIELDS = ("path", "domain", "split", "scene_index", "kind")

# Seed-sequence spawn keys keep each purpose on an independent stream.
_SCENE_KEY = 0
_NOISE_KEY = 1


class PackingError(RuntimeError):
    """Raised when the requested nuclei cannot be placed on the canvas."""


@dataclass(frozen=True)
class Nucleus:
    center: Tuple[float, float]  # (row, col) px
    axes: Tuple[float, float]  # semi-axes (a, b) px
    rotation: float
    marker_positive: bool
    intensity: float
    cytoplasm: float = 0.0  # faint H of the surrounding cell body


@dataclass(frozen=True)
class Membrane:
    center: Tuple[float, float]
    axes: Tuple[float, float]
    rotation: float
    intensity: float


@dataclass(frozen=True)
class Decoy:
    """Nucleus-sized DAB deposit without a nucleus (e.g. a cell profile cut above its nucleus)."""

    center: Tuple[float, float]
    axes: Tuple[float, float]
    rotation: float
    intensity: float


@dataclass(frozen=True)
class Erythrocyte:
    """Red blood cell: unstained but pigmented, so it absorbs light in every brightfield assay."""

    center: Tuple[float, float]
    axes: Tuple[float, float]
    rotation: float
    intensity: float


@dataclass(frozen=True)
class Scene:
    nuclei: Tuple[Nucleus, ...]
    membranes: Tuple[Membrane, ...]
    height: int
    width: int
    background: float
    decoys: Tuple[Decoy, ...] = ()
    erythrocytes: Tuple[Erythrocyte, ...] = ()


@dataclass
class PhantomConfig:
    patch_size: int = 64
    nuclei_range: Tuple[int, int] = (4, 9)
    marker_positive_fraction: float = 0.5
    membrane_fraction: float = 0.5
    noise: float = 0.01
    seed: int = 0
    axis_range: Tuple[float, float] = (3.0, 6.0)
    intensity_range: Tuple[float, float] = (0.5, 1.0)
    membrane_intensity_range: Tuple[float, float] = (0.4, 0.8)
    decoy_range: Tuple[int, int] = (1, 3)
    cytoplasm_intensity_range: Tuple[float, float] = (0.1, 0.25)
    cytoplasm_scale: float = 1.6
    # Erythrocytes are off in the translation and eval corpora; the segmenter's
    # monoplex split sees them as pigmented background debris.
    rbc_range: Tuple[int, int] = (0, 0)
    sb_rbc_range: Tuple[int, int] = (3, 6)
    rbc_axis_range: Tuple[float, float] = (3.0, 5.0)
    rbc_intensity_range: Tuple[float, float] = (0.3, 0.7)
    # OD colour of hemoglobin pigment (R, G, B); normalized on use.
    rbc_od: Tuple[float, float, float] = (0.07, 0.99, 0.11)
    decoy_intensity_range: Tuple[float, float] = (0.3, 0.9)
    membrane_scale: float = 1.6
    membrane_width: float = 1.5
    background: float = 0.02
    # H content of a positive nucleus relative to its chromogen load.
    positive_hex_fraction: float = 0.15
    # Chromogen-to-hematoxylin carry-over that turns a duplex positive
    # nucleus into its monoplex appearance.
    monoplex_eosin_to_hex: float = 0.5
    fluorescence_gain: float = 1.0
    saturation_fraction: float = 0.8
    n_labeled: int = 200
    stain_matrix: Optional[List[List[float]]] = None

    def __post_init__(self) -> None:
        self.nuclei_range = tuple(int(v) for v in self.nuclei_range)
        self.axis_range = tuple(float(v) for v in self.axis_range)
        self.intensity_range = tuple(float(v) for v in self.intensity_range)
        self.membrane_intensity_range = tuple(float(v) for v in self.membrane_intensity_range)
        self.decoy_range = tuple(int(v) for v in self.decoy_range)
        self.decoy_intensity_range = tuple(float(v) for v in self.decoy_intensity_range)
        self.cytoplasm_intensity_range = tuple(float(v) for v in self.cytoplasm_intensity_range)
        self.rbc_range = tuple(int(v) for v in self.rbc_range)
        self.sb_rbc_range = tuple(int(v) for v in self.sb_rbc_range)
        self.rbc_axis_range = tuple(float(v) for v in self.rbc_axis_range)
        self.rbc_intensity_range = tuple(float(v) for v in self.rbc_intensity_range)
        self.rbc_od = tuple(float(v) for v in self.rbc_od)
        self.validate()

    def validate(self) -> None:
        if not 32 <= self.patch_size <= 256:
            raise ValueError(f"patch_size must be in [32, 256], got {self.patch_size}")
        lo, hi = self.nuclei_range
        if lo < 0 or hi < lo:
            raise ValueError(f"bad nuclei_range {self.nuclei_range}")
        for name in ("decoy_range", "rbc_range", "sb_rbc_range"):
            a, b = getattr(self, name)
            if a < 0 or b < a:
                raise ValueError(f"bad {name} {(a, b)}")
        if self.rbc_axis_range[0] < 2.0 or self.rbc_axis_range[1] < self.rbc_axis_range[0]:
            raise ValueError(f"rbc axes must be >= 2 px, got {self.rbc_axis_range}")
        for name in ("marker_positive_fraction", "membrane_fraction", "saturation_fraction",
                     "positive_hex_fraction"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name} must be in [0, 1], got {v}")
        if self.axis_range[0] < 2.0 or self.axis_range[1] < self.axis_range[0]:
            raise ValueError(f"axes must be >= 2 px, got {self.axis_range}")
        for name in ("intensity_range", "membrane_intensity_range", "decoy_intensity_range",
                     "cytoplasm_intensity_range", "rbc_intensity_range"):
            a, b = getattr(self, name)
            if not 0.0 < a <= b <= 1.5:
                raise ValueError(f"{name} must lie in (0, 1.5], got {(a, b)}")
        if self.noise < 0:
            raise ValueError("noise must be >= 0")
        if self.n_labeled < 0:
            raise ValueError("n_labeled must be >= 0")

    @property
    def matrix(self) -> np.ndarray:
        if self.stain_matrix is None:
            return np.array(DEFAULT_STAIN_MATRIX)
        return validate_stain_matrix(self.stain_matrix)

    @classmethod
    def from_dict(cls, values: dict) -> "PhantomConfig":
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(values) - known
        if unknown:
            raise ValueError(f"unknown phantom config keys: {sorted(unknown)}")
        return cls(**values)


def _rng(seed: int, index: int, purpose: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed, index, purpose]))


def generate_scene(config: PhantomConfig, index: int) -> Scene:
    """Draw the scene for ``index``; deterministic in ``(config.seed, index)``."""
    rng = _rng(config.seed, index, _SCENE_KEY)
    size = config.patch_size
    count = int(rng.integers(config.nuclei_range[0], config.nuclei_range[1] + 1))
    n_decoys = int(rng.integers(config.decoy_range[0], config.decoy_range[1] + 1))
    n_rbc = int(rng.integers(config.rbc_range[0], config.rbc_range[1] + 1))
    axis_ranges = [config.axis_range] * (count + n_decoys) + [config.rbc_axis_range] * n_rbc

    # Cheap necessary condition before trying to pack.
    area = sum(np.pi * np.mean(r) ** 2 for r in axis_ranges)
    if area > 0.5 * size * size:
        raise PackingError(f"{len(axis_ranges)} objects of total area {area:.0f} do not fit a {size}px canvas")

    for _restart in range(20):
        shapes = _pack_ellipses(rng, size, axis_ranges)
        if shapes is not None:
            break
    else:
        raise PackingError(f"could not pack {count} nuclei and {len(axis_ranges) - count} other objects "
                           f"on a {size}px canvas")

    nuclei = tuple(
        Nucleus(
            center=center,
            axes=axes,
            rotation=rot,
            marker_positive=bool(rng.random() < config.marker_positive_fraction),
            intensity=float(rng.uniform(*config.intensity_range)),
            cytoplasm=float(rng.uniform(*config.cytoplasm_intensity_range)),
        )
        for center, axes, rot in shapes[:count]
    )
    decoys = tuple(
        Decoy(center, axes, rot, float(rng.uniform(*config.decoy_intensity_range)))
        for center, axes, rot in shapes[count : count + n_decoys]
    )
    rbcs = tuple(
        Erythrocyte(center, axes, rot, float(rng.uniform(*config.rbc_intensity_range)))
        for center, axes, rot in shapes[count + n_decoys :]
    )
    membranes = []
    for n in nuclei:
        if rng.random() < config.membrane_fraction:
            membranes.append(
                Membrane(
                    center=n.center,
                    axes=(n.axes[0] * config.membrane_scale, n.axes[1] * config.membrane_scale),
                    rotation=n.rotation,
                    intensity=float(rng.uniform(*config.membrane_intensity_range)),
                )
            )
    return Scene(nuclei, tuple(membranes), size, size, config.background, decoys, rbcs)


def _pack_ellipses(rng: np.random.Generator, size: int, axis_ranges):
    """Random sequential placement; ``None`` when an object finds no free spot."""
    margin = 1.0
    placed = []
    for lo, hi in axis_ranges:
        for _attempt in range(200):
            a = float(rng.uniform(lo, hi))
            b = float(rng.uniform(lo, a))
            lim = a + margin
            if size - 2 * lim <= 0:
                raise PackingError(f"ellipse of semi-axis {a:.1f} does not fit a {size}px canvas")
            center = (float(rng.uniform(lim, size - lim)), float(rng.uniform(lim, size - lim)))
            # Bounding circles kept apart so soft edges never touch.
            if all(np.hypot(center[0] - c[0], center[1] - c[1]) >= a + ax[0] + 2 * margin for c, ax, _ in placed):
                break
        else:
            return None
        placed.append((center, (a, b), float(rng.uniform(0.0, np.pi))))
    return placed


def radial_distance(shape: Tuple[int, int], center, axes, rotation) -> np.ndarray:
    """Signed distance (px) from each pixel centre to the ellipse boundary, along the ray from the centre."""
    rows, cols = np.mgrid[0 : shape[0], 0 : shape[1]].astype(np.float64)
    dy = rows + 0.5 - center[0]
    dx = cols + 0.5 - center[1]
    c, s = np.cos(rotation), np.sin(rotation)
    u = c * dx + s * dy
    v = -s * dx + c * dy
    r = np.sqrt((u / axes[0]) ** 2 + (v / axes[1]) ** 2)
    rho = np.hypot(dx, dy)
    with np.errstate(divide="ignore", invalid="ignore"):
        d = np.where(r > 0, rho * (1.0 - 1.0 / r), -min(axes))
    return d


def _cosine_edge(d: np.ndarray) -> np.ndarray:
    """1 for d <= -0.5, 0 for d >= 0.5, raised-cosine in between."""
    t = np.clip(d, -0.5, 0.5) + 0.5
    return 0.5 * (1.0 + np.cos(np.pi * t))


def soft_footprint(shape, center, axes, rotation) -> np.ndarray:
    """Ellipse coverage with a 1 px cosine edge: 1 inside, 0 beyond +0.5 px."""
    return _cosine_edge(radial_distance(shape, center, axes, rotation))


def ring_footprint(shape, center, axes, rotation, width: float) -> np.ndarray:
    d = np.abs(radial_distance(shape, center, axes, rotation))
    return _cosine_edge(d - width / 2.0)


def nucleus_footprints(scene: Scene) -> List[np.ndarray]:
    shape = (scene.height, scene.width)
    return [soft_footprint(shape, n.center, n.axes, n.rotation) for n in scene.nuclei]


def render_stains(scene: Scene, domain_style: str, config: Optional[PhantomConfig] = None) -> np.ndarray:
    """Concentration map (H, E, D) of ``scene`` as seen by one assay.

    Every cell body carries a faint H counterstain in all domains.
    duplex: all nuclei carry H, positive nuclei carry mostly the eosin-like
    chromogen, membranes and decoys carry DAB. monoplex: same geometry, the chromogen
    is replaced by its hematoxylin carry-over so E is identically zero.
    if: the duplex concentrations on a dark background.
    """
    if domain_style not in DOMAIN_STYLES:
        raise ValueError(f"domain_style must be one of {DOMAIN_STYLES}, got {domain_style!r}")
    config = config or PhantomConfig()
    shape = (scene.height, scene.width)
    stain = np.zeros(shape + (3,))
    if domain_style != "if":
        stain[..., H] = scene.background
    footprints = nucleus_footprints(scene)
    for n, fp in zip(scene.nuclei, footprints):
        cell = soft_footprint(shape, n.center, (n.axes[0] * config.cytoplasm_scale, n.axes[1] * config.cytoplasm_scale),
                              n.rotation)
        stain[..., H] += cell * (1.0 - fp) * n.cytoplasm
    for n, fp in zip(scene.nuclei, footprints):
        if n.marker_positive:
            h = config.positive_hex_fraction * n.intensity
            e = n.intensity
        else:
            h, e = n.intensity, 0.0
        if domain_style == "monoplex":
            h, e = h + config.monoplex_eosin_to_hex * e, 0.0
        stain[..., H] += fp * h
        if e:
            stain[..., E] += fp * e
    for m in scene.membranes:
        stain[..., D] += ring_footprint(shape, m.center, m.axes, m.rotation, config.membrane_width) * m.intensity
    for dcy in scene.decoys:
        stain[..., D] += soft_footprint(shape, dcy.center, dcy.axes, dcy.rotation) * dcy.intensity
    return stain


def render_pigment(scene: Scene, config: Optional[PhantomConfig] = None) -> np.ndarray:
    """Optical density (H x W x 3) of non-stain pigment, identical in every brightfield assay."""
    config = config or PhantomConfig()
    shape = (scene.height, scene.width)
    od = np.zeros(shape + (3,))
    if not scene.erythrocytes:
        return od
    color = np.asarray(config.rbc_od) / np.linalg.norm(config.rbc_od)
    cover = np.zeros(shape)
    for r in scene.erythrocytes:
        cover += soft_footprint(shape, r.center, r.axes, r.rotation) * r.intensity
    return cover[..., None] * color


def render_rgb(
    stain: np.ndarray,
    m: np.ndarray = DEFAULT_STAIN_MATRIX,
    style: str = "brightfield",
    noise: float = 0.0,
    rng: Optional[np.random.Generator] = None,
    fluorescence_gain: float = 1.0,
    pigment_od: Optional[np.ndarray] = None,
) -> np.ndarray:
    """Forward imaging model to an RGB patch in [0, 1].

    brightfield: transmitted light ``10 ** -(c @ m)``. fluorescence: each
    stain channel is its own emission channel, scaled by ``fluorescence_gain``.
    ``pigment_od`` adds unstained absorbers (brightfield only). Gaussian
    noise of std ``noise`` is added before clipping.
    """
    stain = validate_stain(stain)
    if noise < 0:
        raise ValueError("noise must be >= 0")
    if style == "brightfield":
        m = validate_stain_matrix(m)
        od = stain @ m
        if pigment_od is not None:
            od = od + pigment_od
        rgb = np.power(10.0, -od)
    elif style == "fluorescence":
        rgb = stain * fluorescence_gain
    else:
        raise ValueError(f"unknown style {style!r}")
    if noise > 0:
        rng = rng if rng is not None else np.random.default_rng()
        rgb = rgb + rng.normal(0.0, noise, size=rgb.shape)
    return np.clip(rgb, 0.0, 1.0)


def render_patch(scene: Scene, domain_style: str, config: PhantomConfig, index: int,
                 noise: Optional[float] = None) -> np.ndarray:
    """Stains plus imaging for one domain, with per-(seed, index, domain) noise."""
    stain = render_stains(scene, domain_style, config)
    style = "fluorescence" if domain_style == "if" else "brightfield"
    noise = config.noise if noise is None else noise
    rng = _rng(config.seed, index, _NOISE_KEY * 10 + DOMAIN_STYLES.index(domain_style))
    pigment = render_pigment(scene, config) if style == "brightfield" else None
    return render_rgb(stain, config.matrix, style, noise, rng, config.fluorescence_gain, pigment)


def saturation_masks(stain: np.ndarray, fraction: float) -> Tuple[np.ndarray, np.ndarray]:
    """Pixels whose E (resp. D) concentration exceeds ``fraction`` of that channel's patch maximum."""
    masks = []
    for ch in (E, D):
        peak = stain[..., ch].max()
        masks.append((stain[..., ch] > fraction * peak) if peak > 0 else np.zeros(stain.shape[:2], bool))
    return masks[0], masks[1]


def nucleus_and_background_masks(scene: Scene) -> Tuple[np.ndarray, np.ndarray]:
    """Annotated nucleus pixels (coverage > 0.5) and background pixels (no nuclear coverage)."""
    cover = np.zeros((scene.height, scene.width))
    for fp in nucleus_footprints(scene):
        cover = np.maximum(cover, fp)
    return cover > 0.5, cover == 0.0


def to_uint8(image: np.ndarray) -> np.ndarray:
    return np.round(np.clip(image, 0.0, 1.0) * 255.0).astype(np.uint8)


def _png_bytes(array: np.ndarray) -> bytes:
    buf = io.BytesIO()
    Image.fromarray(array).save(buf, format="PNG")
    return buf.getvalue()


def write_png(path: Path, array: np.ndarray) -> None:
    """Write uint8 (H, W) or (H, W, 3) array; bool masks become 0/255."""
    if array.dtype == bool:
        array = array.astype(np.uint8) * 255
    elif array.dtype != np.uint8:
        array = to_uint8(array)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(_png_bytes(array))


@dataclass
class CorpusCounts:
    A: int = 0
    B: int = 0
    C: int = 0
    eval: int = 0
    sb: int = 0

    def total(self) -> int:
        return self.A + self.B + self.C + self.eval + self.sb


SPLITS = ("A", "B", "C", "eval", "sb")


def allocate_index_ranges(counts: CorpusCounts) -> Dict[str, range]:
    ranges, start = {}, 0
    for name in SPLITS:
        n = getattr(counts, name)
        ranges[name] = range(start, start + n)
        start += n
    return ranges


def check_disjoint(ranges: Dict[str, range]) -> None:
    items = sorted((r.start, r.stop, k) for k, r in ranges.items() if len(r))
    for (s0, e0, k0), (s1, e1, k1) in zip(items, items[1:]):
        if s1 < e0:
            raise ValueError(f"scene index ranges of {k0!r} and {k1!r} overlap")


@dataclass
class ManifestRecord:
    path: str
    domain: str
    split: str
    scene_index: int
    kind: str


def export_corpus(
    config: PhantomConfig,
    out_dir,
    counts: CorpusCounts,
    index_ranges: Optional[Dict[str, range]] = None,
) -> List[ManifestRecord]:
    """Render and write a full corpus plus ``manifest.csv``.

    Layout under ``out_dir`` (paths in the manifest are relative to it)::

        A/train/a_<idx>.png [+ _me.png, _md.png on the first n_labeled]
        B/train/b_<idx>.png
        C/train/c_<idx>.png
        eval/e_<idx>_duplex.png, _monoplex.png, _nuc.png, _bg.png
        sb/s_<idx>.png, s_<idx>_nuc.png      (monoplex with erythrocytes, for the segmenter)
    """
    out = Path(out_dir)
    ranges = index_ranges if index_ranges is not None else allocate_index_ranges(counts)
    check_disjoint(ranges)
    for name in SPLITS:
        if len(ranges.get(name, range(0))) != getattr(counts, name):
            raise ValueError(f"index range for {name!r} does not match its count")
    out.mkdir(parents=True, exist_ok=True)
    records: List[ManifestRecord] = []

    def emit(rel: str, array: np.ndarray, domain: str, split: str, idx: int, kind: str) -> None:
        write_png(out / rel, array)
        records.append(ManifestRecord(rel, domain, split, idx, kind))

    prefixes = {"A": ("a", "duplex"), "B": ("b", "monoplex"), "C": ("c", "if")}
    for domain, (prefix, style) in prefixes.items():
        for k, idx in enumerate(ranges[domain]):
            scene = generate_scene(config, idx)
            stem = f"{domain}/train/{prefix}_{idx:06d}"
            emit(f"{stem}.png", render_patch(scene, style, config, idx), domain, "train", idx, "image")
            if domain == "A" and k < config.n_labeled:
                me, md = saturation_masks(render_stains(scene, "duplex", config), config.saturation_fraction)
                emit(f"{stem}_me.png", me, domain, "train", idx, "mask_e")
                emit(f"{stem}_md.png", md, domain, "train", idx, "mask_d")
    for idx in ranges["eval"]:
        scene = generate_scene(config, idx)
        stem = f"eval/e_{idx:06d}"
        nuc, bg = nucleus_and_background_masks(scene)
        emit(f"{stem}_duplex.png", render_patch(scene, "duplex", config, idx), "A", "eval", idx, "image")
        emit(f"{stem}_monoplex.png", render_patch(scene, "monoplex", config, idx), "B", "eval", idx, "ground_truth")
        emit(f"{stem}_nuc.png", nuc, "A", "eval", idx, "nucleus_mask")
        emit(f"{stem}_bg.png", bg, "A", "eval", idx, "background_mask")
    sb_config = replace(config, rbc_range=config.sb_rbc_range)
    for idx in ranges["sb"]:
        scene = generate_scene(sb_config, idx)
        stem = f"sb/s_{idx:06d}"
        nuc, _ = nucleus_and_background_masks(scene)
        emit(f"{stem}.png", render_patch(scene, "monoplex", sb_config, idx), "B", "sb", idx, "image")
        emit(f"{stem}_nuc.png", nuc, "B", "sb", idx, "nucleus_mask")

    write_manifest(out / MANIFEST_NAME, records)
    logger.info("exported %d files to %s", len(records), out)
    return records


def write_manifest(path: Path, records: Sequence[ManifestRecord]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=MANIFEST_FIELDS, lineterminator="\n")
        writer.writeheader()
        for r in records:
            writer.writerow(asdict(r))


def read_manifest(path) -> List[ManifestRecord]:
    with open(path, newline="") as fh:
        return [
            ManifestRecord(row["path"], row["domain"], row["split"], int(row["scene_index"]), row["kind"])
            for row in csv.DictReader(fh)
        ]
