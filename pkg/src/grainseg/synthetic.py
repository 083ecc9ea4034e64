"""Seeded synthetic scenes with known object masks and part hierarchies.

Scenes are desk-scale stand-ins for real segmentation data: one object
per canvas, composed of 2-5 disjoint single-component parts whose union
is the object. Parts carry distinct albedo and shading so that part
boundaries are visually learnable by a small model. Every scene is a
pure function of its seed.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image as PILImage
from scipy import ndimage

from .core import CROSS, BinaryMask, Image, MaskRole, save_mask

KINDS = ("two_part_barbell", "body_with_limbs", "concentric_shapes")


@dataclass(frozen=True)
class ScenePart:
    mask: BinaryMask
    nominal_granularity: float  # part area / object area


@dataclass(frozen=True)
class Scene:
    image: Image
    object_mask: BinaryMask
    parts: tuple[ScenePart, ...]
    kind: str
    seed: int


def _disk(canvas: int, cr: float, cc: float, radius: float) -> np.ndarray:
    rows = np.arange(canvas)[:, None]
    cols = np.arange(canvas)[None, :]
    return (rows - cr) ** 2 + (cols - cc) ** 2 <= radius**2


def _ellipse(canvas: int, cr: float, cc: float, ra: float, rb: float) -> np.ndarray:
    rows = np.arange(canvas)[:, None]
    cols = np.arange(canvas)[None, :]
    return ((rows - cr) / ra) ** 2 + ((cols - cc) / rb) ** 2 <= 1.0


def _bar(canvas: int, p0: tuple[float, float], p1: tuple[float, float], half_width: float) -> np.ndarray:
    """Pixels within half_width of the segment p0-p1."""
    rows = np.arange(canvas)[:, None].astype(float)
    cols = np.arange(canvas)[None, :].astype(float)
    v = np.array([p1[0] - p0[0], p1[1] - p0[1]])
    length2 = max(float(v @ v), 1e-9)
    t = ((rows - p0[0]) * v[0] + (cols - p0[1]) * v[1]) / length2
    t = np.clip(t, 0.0, 1.0)
    proj_r = p0[0] + t * v[0]
    proj_c = p0[1] + t * v[1]
    return (rows - proj_r) ** 2 + (cols - proj_c) ** 2 <= half_width**2


def _single_component(mask: np.ndarray) -> bool:
    if not mask.any():
        return False
    _, count = ndimage.label(mask, structure=CROSS)
    return count == 1


def _barbell_parts(canvas: int, rng: np.random.Generator) -> list[np.ndarray] | None:
    s = canvas / 128.0  # geometry specified at the 128-px reference scale
    r1 = rng.uniform(13, 18) * s
    r2 = rng.uniform(13, 18) * s
    angle = rng.uniform(0, np.pi)
    sep = rng.uniform(52, 68) * s
    margin = 24 * s
    mid_r = rng.uniform(margin + sep / 2, canvas - margin - sep / 2)
    mid_c = rng.uniform(margin + sep / 2, canvas - margin - sep / 2)
    dr, dc = np.sin(angle) * sep / 2, np.cos(angle) * sep / 2
    c1 = (mid_r - dr, mid_c - dc)
    c2 = (mid_r + dr, mid_c + dc)
    d1 = _disk(canvas, *c1, r1)
    d2 = _disk(canvas, *c2, r2)
    bar = _bar(canvas, c1, c2, rng.uniform(3.5, 5.5) * s) & ~d1 & ~d2
    if d1.any() and d2.any() and bar.any() and not (d1 & d2).any():
        return [d1, d2, bar]
    return None


def _body_with_limbs_parts(canvas: int, rng: np.random.Generator) -> list[np.ndarray] | None:
    s = canvas / 128.0
    center = (rng.uniform(52 * s, canvas - 52 * s), rng.uniform(52 * s, canvas - 52 * s))
    ra = rng.uniform(15, 20) * s
    rb = rng.uniform(15, 20) * s
    body = _ellipse(canvas, center[0], center[1], ra, rb)
    n_limbs = int(rng.integers(2, 5))
    slots = rng.permutation(8)[:n_limbs]
    limbs: list[np.ndarray] = []
    occupied = body.copy()
    for slot in slots:
        ang = slot * np.pi / 4 + rng.uniform(-0.15, 0.15)
        length = rng.uniform(20, 30) * s
        tip = (center[0] + np.sin(ang) * (max(ra, rb) + length),
               center[1] + np.cos(ang) * (max(ra, rb) + length))
        if not (4 <= tip[0] < canvas - 4 and 4 <= tip[1] < canvas - 4):
            return None
        limb = _bar(canvas, center, tip, rng.uniform(4.0, 6.0) * s) & ~occupied
        if not _single_component(limb):
            return None
        limbs.append(limb)
        occupied |= limb
    return [body] + limbs


def _concentric_parts(canvas: int, rng: np.random.Generator) -> list[np.ndarray] | None:
    s = canvas / 128.0
    center = (rng.uniform(46 * s, canvas - 46 * s), rng.uniform(46 * s, canvas - 46 * s))
    n_rings = int(rng.integers(2, 4))
    radii = np.sort(rng.uniform(8, 38, size=n_rings)) * s
    if np.min(np.diff(radii, prepend=0.0)) < 5 * s:
        return None
    parts = [_disk(canvas, *center, radii[0])]
    for inner, outer in zip(radii[:-1], radii[1:]):
        ring = _disk(canvas, *center, outer) & ~_disk(canvas, *center, inner)
        parts.append(ring)
    return parts


_BUILDERS = {
    "two_part_barbell": _barbell_parts,
    "body_with_limbs": _body_with_limbs_parts,
    "concentric_shapes": _concentric_parts,
}


def _background(canvas: int, rng: np.random.Generator) -> np.ndarray:
    """Dark textured backdrop: low-frequency blobs plus fine noise."""
    coarse = rng.uniform(0.08, 0.42, size=(8, 8, 3))
    img = ndimage.zoom(coarse, (canvas / 8, canvas / 8, 1), order=1)
    img = img[:canvas, :canvas, :]
    img += rng.normal(0.0, 0.02, size=img.shape)
    return img


def _part_colors(n: int, rng: np.random.Generator) -> np.ndarray:
    """Bright, well-separated albedos so parts are distinguishable."""
    hues = (rng.uniform(0, 1) + np.arange(n) / n) % 1.0
    colors = np.empty((n, 3))
    for i, h in enumerate(hues):
        # crude hue-to-rgb; saturation/value chosen to stay clear of the backdrop
        k = h * 6.0
        r = np.clip(abs(k - 3) - 1, 0, 1)
        g = np.clip(2 - abs(k - 2), 0, 1)
        b = np.clip(2 - abs(k - 4), 0, 1)
        base = np.array([r, g, b])
        colors[i] = 0.55 + 0.4 * base
    return colors


def generate_scene(seed: int, kind: str, canvas: int = 128) -> Scene:
    """Deterministic scene for a seed; retries sub-seeds until geometry is valid."""
    if kind not in _BUILDERS:
        raise ValueError(f"unknown scene kind {kind!r}; expected one of {KINDS}")
    for attempt in range(64):
        rng = np.random.default_rng((seed, attempt))
        part_masks = _BUILDERS[kind](canvas, rng)
        if part_masks is None:
            continue
        if not all(_single_component(m) for m in part_masks):
            continue
        obj = np.zeros((canvas, canvas), dtype=bool)
        disjoint = True
        for m in part_masks:
            if (obj & m).any():
                disjoint = False
                break
            obj |= m
        if not disjoint:
            continue

        img = _background(canvas, rng)
        colors = _part_colors(len(part_masks), rng)
        shade_dir = rng.uniform(-1, 1, size=2)
        rows = np.arange(canvas)[:, None]
        cols = np.arange(canvas)[None, :]
        shade = (rows * shade_dir[0] + cols * shade_dir[1]) / canvas * 0.08
        for m, color in zip(part_masks, colors):
            img[m] = color[None, :] + shade[m, None]
        img += rng.normal(0.0, 0.015, size=img.shape)
        img = np.clip(img, 0.0, 1.0)

        area_obj = obj.sum()
        parts = tuple(
            ScenePart(
                mask=BinaryMask(m, role=MaskRole.PROPOSAL),
                nominal_granularity=float(m.sum() / area_obj),
            )
            for m in part_masks
        )
        return Scene(
            image=Image(img, id=f"scene-{seed:06d}"),
            object_mask=BinaryMask(obj, role=MaskRole.GROUND_TRUTH),
            parts=parts,
            kind=kind,
            seed=seed,
        )
    raise RuntimeError(f"no valid {kind} geometry found for seed {seed}")


def generate(spec_seed: int, count: int, canvas: int = 128, kinds: tuple[str, ...] = KINDS) -> list[Scene]:
    """Deterministic list of scenes, cycling kinds for balanced coverage."""
    if count < 1:
        raise ValueError("count must be >= 1")
    return [
        generate_scene(spec_seed * 100_003 + i, kinds[i % len(kinds)], canvas)
        for i in range(count)
    ]


@dataclass(frozen=True)
class CompositeScene:
    """A training canvas holding several disjoint objects.

    Click-driven training needs scenes where prompts carry information:
    with a single object per image the model can ignore clicks entirely,
    so composites place several smaller objects on one canvas and yield
    one (image, target) pair per object. Objects sit close together so
    early mispredictions bleed onto neighbors and corrective negative
    clicks teach the model to carve color-coherent regions out.
    """

    image: Image
    object_masks: tuple[BinaryMask, ...]


def _primitive_parts(canvas: int, rng: np.random.Generator) -> list[np.ndarray] | None:
    """A lone disk, bar, or ellipse; part-shaped objects at small scales."""
    kind = rng.integers(0, 3)
    cr = rng.uniform(0.3, 0.7) * canvas
    cc = rng.uniform(0.3, 0.7) * canvas
    if kind == 0:
        shape = _disk(canvas, cr, cc, rng.uniform(0.14, 0.28) * canvas)
    elif kind == 1:
        ang = rng.uniform(0, np.pi)
        length = rng.uniform(0.3, 0.55) * canvas
        dr, dc = np.sin(ang) * length / 2, np.cos(ang) * length / 2
        shape = _bar(canvas, (cr - dr, cc - dc), (cr + dr, cc + dc),
                     rng.uniform(0.06, 0.12) * canvas)
    else:
        shape = _ellipse(canvas, cr, cc, rng.uniform(0.12, 0.24) * canvas,
                         rng.uniform(0.12, 0.24) * canvas)
    if shape.any() and _single_component(shape):
        return [shape]
    return None


def _paste_object(
    img: np.ndarray,
    occupancy: np.ndarray,
    sub_img: np.ndarray,
    sub_mask: np.ndarray,
    rng: np.random.Generator,
    gap: int = 2,
    attempts: int = 40,
) -> np.ndarray | None:
    """Place a tile's object at a random offset keeping a small gap to others."""
    canvas = img.shape[0]
    tile = sub_mask.shape[0]
    grown = ndimage.binary_dilation(sub_mask, structure=CROSS, iterations=gap)
    for _ in range(attempts):
        r0 = int(rng.integers(0, canvas - tile + 1))
        c0 = int(rng.integers(0, canvas - tile + 1))
        if (occupancy[r0 : r0 + tile, c0 : c0 + tile] & grown).any():
            continue
        full = np.zeros((canvas, canvas), dtype=bool)
        full[r0 : r0 + tile, c0 : c0 + tile] = sub_mask
        region = img[r0 : r0 + tile, c0 : c0 + tile]
        region[sub_mask] = sub_img[sub_mask]
        occupancy[r0 : r0 + tile, c0 : c0 + tile] |= grown
        return full
    return None


def compose_training_scenes(
    spec_seed: int, count: int, canvas: int = 128, kinds: tuple[str, ...] = KINDS
) -> list[CompositeScene]:
    """Deterministic packed multi-object canvases for object-level pretraining.

    Each canvas holds 3-5 objects at 0.3-0.55x scale - the spec kinds
    plus lone primitives - placed with small gaps so that clicks are the
    only way to tell targets apart.
    """
    if count < 1:
        raise ValueError("count must be >= 1")
    builders = [_BUILDERS[k] for k in kinds] + [_primitive_parts, _primitive_parts]
    composites: list[CompositeScene] = []
    for i in range(count):
        rng = np.random.default_rng((spec_seed, i, 0xC0))
        n_objects = int(rng.integers(3, 6))
        img = np.clip(_background(canvas, rng), 0.0, 1.0)
        occupancy = np.zeros((canvas, canvas), dtype=bool)
        masks: list[BinaryMask] = []
        for j in range(n_objects):
            tile = int(rng.integers(int(0.3 * canvas), int(0.55 * canvas) + 1))
            builder = builders[int(rng.integers(len(builders)))]
            part_masks = None
            for attempt in range(32):
                sub_rng = np.random.default_rng((spec_seed, i, j, attempt))
                part_masks = builder(tile, sub_rng)
                if part_masks is not None and all(_single_component(m) for m in part_masks):
                    break
                part_masks = None
            if part_masks is None:
                continue
            sub_mask = np.zeros((tile, tile), dtype=bool)
            for m in part_masks:
                sub_mask |= m
            sub_img = np.zeros((tile, tile, 3))
            colors = _part_colors(len(part_masks), sub_rng)
            for m, color in zip(part_masks, colors):
                sub_img[m] = color[None, :]
            sub_img += sub_rng.normal(0.0, 0.015, size=sub_img.shape)
            sub_img = np.clip(sub_img, 0.0, 1.0)
            placed = _paste_object(img, occupancy, sub_img, sub_mask, rng)
            if placed is not None:
                masks.append(BinaryMask(placed, role=MaskRole.GROUND_TRUTH))
        if not masks:
            continue
        composites.append(
            CompositeScene(
                image=Image(np.clip(img, 0.0, 1.0), id=f"composite-{spec_seed:04d}-{i:04d}"),
                object_masks=tuple(masks),
            )
        )
    return composites


def training_pairs(composites: list[CompositeScene]) -> list[tuple[Image, BinaryMask]]:
    """Flatten composites into per-object (image, target) training pairs."""
    return [(c.image, mask) for c in composites for mask in c.object_masks]


def export_scenes(scenes: list[Scene], root: Path | str) -> None:
    """Write scenes in the folder layout the evaluation loader reads.

    Layout: images/<id>.png, objects/<id>.png, parts/<id>__<k>.png.
    """
    root = Path(root)
    (root / "images").mkdir(parents=True, exist_ok=True)
    (root / "objects").mkdir(parents=True, exist_ok=True)
    (root / "parts").mkdir(parents=True, exist_ok=True)
    for scene in scenes:
        arr = (scene.image.pixels * 255).round().astype(np.uint8)
        PILImage.fromarray(arr, mode="RGB").save(root / "images" / f"{scene.image.id}.png")
        save_mask(scene.object_mask, root / "objects" / f"{scene.image.id}.png")
        for k, part in enumerate(scene.parts):
            save_mask(part.mask, root / "parts" / f"{scene.image.id}__{k}.png")


def export_composites(composites: list[CompositeScene], root: Path | str) -> None:
    """Write composites for the folder loader: objects/<id>__<k>.png per target."""
    root = Path(root)
    (root / "images").mkdir(parents=True, exist_ok=True)
    (root / "objects").mkdir(parents=True, exist_ok=True)
    for comp in composites:
        arr = (comp.image.pixels * 255).round().astype(np.uint8)
        PILImage.fromarray(arr, mode="RGB").save(root / "images" / f"{comp.image.id}.png")
        for k, mask in enumerate(comp.object_masks):
            save_mask(mask, root / "objects" / f"{comp.image.id}__{k}.png")
