"""
Panoptic data for promptpan.
Synthetic shape scenes, the incremental task protocol, COCO-panoptic
interchange and the native dataset cache.
"""

import os
import json
import colorsys
import logging
from dataclasses import dataclass, field, replace
from typing import Dict, Iterable, List, Optional, Sequence, Set, Tuple

import numpy as np
from PIL import Image, ImageDraw

from errors import ConfigError, FormatError, InputError, ProtocolError
from utils import read_json, write_json

logger = logging.getLogger(__name__)

VOID = 0
OVERLAP = 'overlap'
DISJOINT = 'disjoint'
MODES = (OVERLAP, DISJOINT)

THING_SHAPES = ('ellipse', 'triangle', 'rectangle')
STUFF_PATTERNS = ('flat', 'hstripe', 'vstripe', 'checker')
MAX_SEGMENT_ID = 256 ** 3 - 1


# ─── Types ────────────────────────────────────────────────────────────────────

@dataclass(frozen=True)
class Segment:
    segment_id: int
    class_id: int
    is_thing: bool


@dataclass(eq=False)
class PanopticSample:
    """
    One annotated image.

    image is H×W×3 float32 in [0, 1]; segment_map is H×W int32 with 0 = void.
    ignore_mask, when set, marks pixels that were unlabeled at the source
    (before any step relabeling); mask losses skip them.
    """
    image: np.ndarray
    segment_map: np.ndarray
    segments: List[Segment]
    image_id: str = ''
    ignore_mask: Optional[np.ndarray] = None

    @property
    def size(self) -> Tuple[int, int]:
        return tuple(self.segment_map.shape)

    @property
    def class_ids(self) -> Set[int]:
        return {s.class_id for s in self.segments}

    def segment(self, segment_id: int) -> Segment:
        for s in self.segments:
            if s.segment_id == segment_id:
                return s
        raise KeyError(segment_id)

    def validate(self):
        ids = [s.segment_id for s in self.segments]
        if len(ids) != len(set(ids)):
            raise InputError(f"sample {self.image_id}: duplicate segment ids")
        if any(i <= 0 for i in ids):
            raise InputError(f"sample {self.image_id}: segment ids must be positive")
        present = set(np.unique(self.segment_map).tolist()) - {VOID}
        if present != set(ids):
            raise InputError(
                f"sample {self.image_id}: segment map ids {sorted(present)} "
                f"do not match segment records {sorted(ids)}"
            )
        stuff = [s.class_id for s in self.segments if not s.is_thing]
        if len(stuff) != len(set(stuff)):
            raise InputError(f"sample {self.image_id}: more than one segment for a stuff class")
        if self.image.shape != self.segment_map.shape + (3,):
            raise InputError(f"sample {self.image_id}: image and segment map sizes differ")

    def __eq__(self, other) -> bool:
        if not isinstance(other, PanopticSample):
            return NotImplemented
        return (
            self.image_id == other.image_id
            and np.array_equal(self.image, other.image)
            and np.array_equal(self.segment_map, other.segment_map)
            and sorted(self.segments, key=lambda s: s.segment_id)
            == sorted(other.segments, key=lambda s: s.segment_id)
        )


@dataclass(frozen=True)
class ClassInfo:
    class_id: int
    name: str
    is_thing: bool
    source_id: Optional[int] = None


@dataclass(frozen=True)
class ClassCatalog:
    classes: Tuple[ClassInfo, ...]

    def __post_init__(self):
        ids = [c.class_id for c in self.classes]
        if sorted(ids) != list(range(1, len(ids) + 1)):
            raise ConfigError(f"class ids must be unique and dense in [1, {len(ids)}], got {ids}")

    def __len__(self) -> int:
        return len(self.classes)

    @property
    def ids(self) -> List[int]:
        return [c.class_id for c in self.classes]

    def info(self, class_id: int) -> ClassInfo:
        return self.classes[class_id - 1]

    def is_thing(self, class_id: int) -> bool:
        return self.info(class_id).is_thing

    def things(self) -> Set[int]:
        return {c.class_id for c in self.classes if c.is_thing}

    def stuff(self) -> Set[int]:
        return {c.class_id for c in self.classes if not c.is_thing}

    def to_list(self) -> list:
        return [
            {'id': c.class_id, 'name': c.name, 'isthing': int(c.is_thing),
             'source_id': c.source_id if c.source_id is not None else c.class_id}
            for c in self.classes
        ]

    @classmethod
    def from_list(cls, items: list) -> 'ClassCatalog':
        return cls(tuple(
            ClassInfo(int(d['id']), d['name'], bool(d['isthing']), d.get('source_id'))
            for d in items
        ))


@dataclass(frozen=True)
class TaskProtocol:
    ordering: Tuple[int, ...]
    base_count: int
    increment: int
    mode: str
    steps: Tuple[Tuple[int, ...], ...]

    @property
    def num_steps(self) -> int:
        return len(self.steps)

    def check_step(self, t: int):
        if not 1 <= t <= self.num_steps:
            raise ProtocolError(f"step {t} out of range 1..{self.num_steps}")

    def classes(self, t: int) -> Tuple[int, ...]:
        self.check_step(t)
        return self.steps[t - 1]

    def classes_upto(self, t: int) -> Set[int]:
        self.check_step(t)
        return {c for step in self.steps[:t] for c in step}

    def step_of(self, class_id: int) -> int:
        for t, step in enumerate(self.steps, 1):
            if class_id in step:
                return t
        raise ProtocolError(f"class {class_id} is not part of the protocol")

    def base_classes(self) -> Set[int]:
        return set(self.steps[0])

    def new_classes(self) -> Set[int]:
        return {c for step in self.steps[1:] for c in step}

    def to_dict(self) -> dict:
        return {
            'ordering': list(self.ordering), 'base_count': self.base_count,
            'increment': self.increment, 'mode': self.mode,
            'steps': [list(s) for s in self.steps],
        }

    @classmethod
    def from_dict(cls, d: dict) -> 'TaskProtocol':
        return cls(
            ordering=tuple(d['ordering']), base_count=d['base_count'],
            increment=d['increment'], mode=d['mode'],
            steps=tuple(tuple(s) for s in d['steps']),
        )


@dataclass(frozen=True)
class SceneGenConfig:
    image_size: Tuple[int, int] = (64, 64)
    num_thing_classes: int = 18
    num_stuff_classes: int = 6
    max_instances_per_image: int = 4
    seed: int = 0

    def validate(self):
        h, w = self.image_size
        if h < 32 or w < 32:
            raise ConfigError(f"image_size must be at least 32x32, got {self.image_size}")
        if self.num_thing_classes < 1 or self.num_stuff_classes < 1:
            raise ConfigError("scene generator needs at least one thing and one stuff class")
        if self.max_instances_per_image < 1:
            raise ConfigError("max_instances_per_image must be >= 1")
        if self.seed < 0:
            raise ConfigError("seed must be unsigned")


# ─── Synthetic scenes ─────────────────────────────────────────────────────────

def _hsv(index: int, saturation: float, value: float) -> Tuple[float, float, float]:
    return colorsys.hsv_to_rgb((index * 0.618033988749895) % 1.0, saturation, value)


def _thing_style(k: int) -> Tuple[str, Tuple[float, float, float]]:
    # classes 3g, 3g+1, 3g+2 share a color and differ only by shape
    return THING_SHAPES[k % len(THING_SHAPES)], _hsv(k // len(THING_SHAPES), 0.85, 0.95)


def _stuff_style(j: int) -> Tuple[str, Tuple[float, float, float]]:
    return STUFF_PATTERNS[j % len(STUFF_PATTERNS)], _hsv(j + 7, 0.35, 0.55)


def make_catalog(cfg: SceneGenConfig) -> ClassCatalog:
    """Things get ids 1..num_thing_classes, stuff follows."""
    classes = []
    for k in range(cfg.num_thing_classes):
        shape, _ = _thing_style(k)
        classes.append(ClassInfo(k + 1, f"{shape}-{k // len(THING_SHAPES)}", True, k + 1))
    for j in range(cfg.num_stuff_classes):
        pattern, _ = _stuff_style(j)
        cid = cfg.num_thing_classes + j + 1
        classes.append(ClassInfo(cid, f"{pattern}-{j // len(STUFF_PATTERNS)}", False, cid))
    return ClassCatalog(tuple(classes))


def _shape_mask(shape: str, size: Tuple[int, int], rng: np.random.Generator) -> np.ndarray:
    h, w = size
    short = min(h, w)
    radius_y = int(rng.integers(short // 10 + 2, short // 4 + 3))
    radius_x = int(rng.integers(short // 10 + 2, short // 4 + 3))
    cy = int(rng.integers(0, h))
    cx = int(rng.integers(0, w))

    canvas = Image.new('L', (w, h), 0)
    draw = ImageDraw.Draw(canvas)
    box = [cx - radius_x, cy - radius_y, cx + radius_x, cy + radius_y]
    if shape == 'ellipse':
        draw.ellipse(box, fill=1)
    elif shape == 'rectangle':
        draw.rectangle(box, fill=1)
    else:
        angle = float(rng.uniform(0, 2 * np.pi))
        points = [
            (cx + radius_x * np.cos(angle + a), cy + radius_y * np.sin(angle + a))
            for a in (0.0, 2 * np.pi / 3, 4 * np.pi / 3)
        ]
        draw.polygon(points, fill=1)
    mask = np.asarray(canvas, dtype=bool)
    if not mask.any():
        mask = np.zeros((h, w), dtype=bool)
        mask[min(max(cy, 0), h - 1), min(max(cx, 0), w - 1)] = True
    return mask


def _pattern(pattern: str, size: Tuple[int, int]) -> np.ndarray:
    h, w = size
    yy, xx = np.mgrid[0:h, 0:w]
    if pattern == 'hstripe':
        return np.where((yy // 4) % 2 == 0, 1.0, 0.7)
    if pattern == 'vstripe':
        return np.where((xx // 4) % 2 == 0, 1.0, 0.7)
    if pattern == 'checker':
        return np.where(((yy // 4) + (xx // 4)) % 2 == 0, 1.0, 0.7)
    return np.ones((h, w))


def to_float_image(image_u8: np.ndarray) -> np.ndarray:
    return image_u8.astype(np.float32) / np.float32(255.0)


def to_uint8_image(image: np.ndarray) -> np.ndarray:
    return np.clip(np.rint(image * 255.0), 0, 255).astype(np.uint8)


def generate_sample(cfg: SceneGenConfig, index: int) -> PanopticSample:
    """
    Render scene number ``index``; a pure function of (cfg.seed, index).

    A stuff canvas (plus an optional stuff band) is covered by thing shapes
    painted in draw order, so later shapes occlude earlier ones. The last
    thing drawn cycles through the thing classes, the canvas through the
    stuff classes, so every class shows up once index covers the catalog.
    """
    rng = np.random.default_rng([cfg.seed, index])
    h, w = cfg.image_size
    n_things, n_stuff = cfg.num_thing_classes, cfg.num_stuff_classes

    segment_map = np.zeros((h, w), dtype=np.int32)
    image = np.zeros((h, w, 3), dtype=np.float64)
    classes: Dict[int, Tuple[int, bool]] = {}
    next_id = 1

    def paint(mask: np.ndarray, class_id: int, is_thing: bool, rgb, shade: np.ndarray):
        nonlocal next_id
        segment_map[mask] = next_id
        image[mask] = np.asarray(rgb)[None, :] * shade[mask][:, None]
        classes[next_id] = (class_id, is_thing)
        next_id += 1

    canvas_j = index % n_stuff
    pattern, rgb = _stuff_style(canvas_j)
    paint(np.ones((h, w), dtype=bool), n_things + canvas_j + 1, False, rgb, _pattern(pattern, (h, w)))

    if n_stuff > 1 and rng.random() < 0.5:
        band_j = (canvas_j + int(rng.integers(1, n_stuff))) % n_stuff
        top = int(rng.integers(h // 2, h - h // 4))
        band = np.zeros((h, w), dtype=bool)
        band[top:, :] = True
        pattern, rgb = _stuff_style(band_j)
        paint(band, n_things + band_j + 1, False, rgb, _pattern(pattern, (h, w)))

    n_inst = int(rng.integers(1, cfg.max_instances_per_image + 1))
    kinds = [int(rng.integers(0, n_things)) for _ in range(n_inst - 1)] + [index % n_things]
    for k in kinds:
        shape, rgb = _thing_style(k)
        mask = _shape_mask(shape, (h, w), rng)
        paint(mask, k + 1, True, rgb, np.ones((h, w)))

    image += rng.normal(0.0, 0.03, size=image.shape)
    image = to_float_image(to_uint8_image(image))

    segments = [
        Segment(int(sid), classes[int(sid)][0], classes[int(sid)][1])
        for sid in np.unique(segment_map) if sid != VOID
    ]
    sample = PanopticSample(image, segment_map, segments, image_id=f"{index:06d}")
    sample.validate()
    return sample


def generate_dataset(cfg: SceneGenConfig, n: int) -> List[PanopticSample]:
    cfg.validate()
    if n < 1:
        raise ConfigError(f"dataset size must be >= 1, got {n}")
    samples = [generate_sample(cfg, i) for i in range(n)]
    logger.info(f"Generated {n} synthetic scenes (seed={cfg.seed}, size={cfg.image_size})")
    return samples


def class_histogram(samples: Iterable[PanopticSample]) -> Dict[int, int]:
    """Segment count per class over a dataset."""
    counts: Dict[int, int] = {}
    for sample in samples:
        for s in sample.segments:
            counts[s.class_id] = counts.get(s.class_id, 0) + 1
    return dict(sorted(counts.items()))


def hflip(sample: PanopticSample) -> PanopticSample:
    return replace(
        sample,
        image=np.ascontiguousarray(sample.image[:, ::-1]),
        segment_map=np.ascontiguousarray(sample.segment_map[:, ::-1]),
        ignore_mask=None if sample.ignore_mask is None else np.ascontiguousarray(sample.ignore_mask[:, ::-1]),
    )


# ─── Incremental protocol ─────────────────────────────────────────────────────

def build_protocol(catalog: ClassCatalog, base: int, inc: int, mode: str = OVERLAP,
                   ordering_seed: Optional[int] = None) -> TaskProtocol:
    """
    Split the (optionally shuffled) class order into a base step and equal increments.

    With ordering_seed the order is ``np.random.default_rng(seed).permutation``
    of the catalog ids; otherwise it is the catalog order.
    """
    n = len(catalog)
    if mode not in MODES:
        raise ProtocolError(f"mode must be one of {MODES}, got {mode!r}")
    if not 1 <= base <= n:
        raise ProtocolError(f"base={base} does not fit a catalog of {n} classes")
    rest = n - base
    if rest and (inc < 1 or rest % inc):
        raise ProtocolError(f"{n} classes cannot be tiled as {base} + k x {inc}")

    ids = np.asarray(catalog.ids)
    if ordering_seed is not None:
        ids = np.random.default_rng(ordering_seed).permutation(ids)
    ordering = tuple(int(c) for c in ids)

    steps = [ordering[:base]]
    for k in range(rest // inc if rest else 0):
        steps.append(ordering[base + k * inc: base + (k + 1) * inc])

    protocol = TaskProtocol(ordering, base, inc, mode, tuple(steps))
    logger.info(f"Protocol {base}-{inc} ({mode}): {protocol.num_steps} steps")
    return protocol


def step_view(dataset: Sequence[PanopticSample], protocol: TaskProtocol, t: int) -> List[PanopticSample]:
    """
    Training data of step t: only C^t classes stay labeled.

    Overlap keeps every image holding a C^t segment; disjoint additionally
    drops images holding any class outside C^{1:t}.
    """
    current = set(protocol.classes(t))
    seen = protocol.classes_upto(t)

    view = []
    for sample in dataset:
        present = sample.class_ids
        if not present & current:
            continue
        if protocol.mode == DISJOINT and present - seen:
            continue
        keep = [s for s in sample.segments if s.class_id in current]
        keep_ids = np.array([s.segment_id for s in keep], dtype=sample.segment_map.dtype)
        segment_map = np.where(np.isin(sample.segment_map, keep_ids), sample.segment_map, VOID)
        source_void = sample.segment_map == VOID
        if sample.ignore_mask is not None:
            source_void = source_void | sample.ignore_mask
        view.append(replace(sample, segment_map=segment_map.astype(sample.segment_map.dtype),
                            segments=keep, ignore_mask=source_void))
    return view


# ─── COCO panoptic interchange ────────────────────────────────────────────────

def rgb2id(color: np.ndarray) -> np.ndarray:
    """Segment id = R + 256·G + 256²·B."""
    color = np.asarray(color, dtype=np.uint32)
    return (color[..., 0] + 256 * color[..., 1] + 256 * 256 * color[..., 2]).astype(np.int64)


def id2rgb(id_map: np.ndarray) -> np.ndarray:
    id_map = np.asarray(id_map, dtype=np.int64)
    if id_map.size and (id_map.min() < 0 or id_map.max() > MAX_SEGMENT_ID):
        raise FormatError(f"segment ids must lie in [0, {MAX_SEGMENT_ID}]")
    rgb = np.zeros(id_map.shape + (3,), dtype=np.uint8)
    rest = id_map.copy()
    for channel in range(3):
        rgb[..., channel] = rest % 256
        rest //= 256
    return rgb


def _segment_dir(annotation_file: str, segment_dir: Optional[str]) -> str:
    return segment_dir or os.path.splitext(annotation_file)[0]


def _bbox(mask: np.ndarray) -> List[int]:
    ys, xs = np.nonzero(mask)
    if len(ys) == 0:
        return [0, 0, 0, 0]
    return [int(xs.min()), int(ys.min()), int(xs.max() - xs.min() + 1), int(ys.max() - ys.min() + 1)]


def write_coco_panoptic(catalog: ClassCatalog, samples: Sequence[PanopticSample], annotation_file: str,
                        image_dir: str, segment_dir: Optional[str] = None,
                        scores: Optional[Sequence[Dict[int, float]]] = None) -> str:
    """
    Write images (PNG), segment PNGs and the panoptic JSON.

    scores optionally attaches a per-segment ``score`` field (prediction dumps).
    Returns the annotation file path.
    """
    seg_dir = _segment_dir(annotation_file, segment_dir)
    os.makedirs(image_dir, exist_ok=True)
    os.makedirs(seg_dir, exist_ok=True)

    images, annotations = [], []
    for index, sample in enumerate(samples):
        stem = sample.image_id or f"{index:06d}"
        h, w = sample.size
        file_name = f"{stem}.png"
        Image.fromarray(to_uint8_image(sample.image)).save(os.path.join(image_dir, file_name))
        Image.fromarray(id2rgb(sample.segment_map)).save(os.path.join(seg_dir, file_name))

        info = []
        for s in sample.segments:
            mask = sample.segment_map == s.segment_id
            entry = {
                'id': int(s.segment_id),
                'category_id': int(catalog.info(s.class_id).source_id or s.class_id),
                'iscrowd': 0,
                'isthing': int(s.is_thing),
                'area': int(mask.sum()),
                'bbox': _bbox(mask),
            }
            if scores is not None:
                entry['score'] = float(scores[index].get(s.segment_id, 1.0))
            info.append(entry)
        images.append({'id': index, 'file_name': file_name, 'height': h, 'width': w})
        annotations.append({'image_id': index, 'file_name': file_name, 'segments_info': info})

    categories = [
        {'id': int(c.source_id or c.class_id), 'name': c.name, 'isthing': int(c.is_thing)}
        for c in catalog.classes
    ]
    os.makedirs(os.path.dirname(os.path.abspath(annotation_file)), exist_ok=True)
    with open(annotation_file, 'w') as f:
        json.dump({'images': images, 'annotations': annotations, 'categories': categories}, f, indent=2)
    logger.info(f"Wrote {len(samples)} panoptic annotations to {annotation_file}")
    return annotation_file


def read_coco_panoptic(annotation_file: str, image_dir: str,
                       segment_dir: Optional[str] = None) -> Tuple[ClassCatalog, List[PanopticSample]]:
    """
    Load a COCO-panoptic dataset; category ids are remapped to a dense 1..K
    index in ascending source-id order (the source id is kept on ClassInfo).
    """
    seg_dir = _segment_dir(annotation_file, segment_dir)
    try:
        payload = read_json(annotation_file)
    except (OSError, ValueError) as e:
        raise FormatError(f"{annotation_file}: cannot read annotation file ({e})")

    try:
        categories = sorted(payload.get('categories', []), key=lambda c: c['id'])
        catalog = ClassCatalog(tuple(
            ClassInfo(k, c.get('name', str(c['id'])), bool(c.get('isthing', 1)), int(c['id']))
            for k, c in enumerate(categories, 1)
        ))
        dense = {int(c['id']): k for k, c in enumerate(categories, 1)}
        image_files = {img['id']: img['file_name'] for img in payload.get('images', [])}
    except (KeyError, TypeError) as e:
        raise FormatError(f"{annotation_file}: malformed categories or images ({e})")

    samples = []
    for ann in payload.get('annotations', []):
        try:
            file_name = ann['file_name']
            infos = [(int(info['id']), int(info['category_id'])) for info in ann.get('segments_info', [])]
        except (KeyError, TypeError, ValueError) as e:
            raise FormatError(f"{annotation_file}: malformed annotation {ann.get('image_id')} ({e})")
        seg_file = os.path.join(seg_dir, file_name)
        img_name = image_files.get(ann.get('image_id'), file_name)
        img_file = os.path.join(image_dir, img_name)
        for path in (img_file, seg_file):
            if not os.path.exists(path):
                raise FormatError(f"{annotation_file}: missing file {path}")

        with Image.open(seg_file) as im:
            id_map = rgb2id(np.asarray(im.convert('RGB')))
        with Image.open(img_file) as im:
            image = to_float_image(np.asarray(im.convert('RGB'), dtype=np.uint8))

        segments, seen = [], set()
        for sid, cat in infos:
            if sid in seen or sid == VOID:
                raise FormatError(f"{seg_file}: segment id {sid} repeated or void")
            seen.add(sid)
            if cat not in dense:
                raise FormatError(f"{seg_file}: segment {sid} has unknown category {cat}")
            class_id = dense[cat]
            segments.append(Segment(sid, class_id, catalog.is_thing(class_id)))

        present = set(np.unique(id_map).tolist()) - {VOID}
        if present != seen:
            raise FormatError(
                f"{seg_file}: segment ids not bijective with segments_info "
                f"(png only: {sorted(present - seen)}, json only: {sorted(seen - present)})"
            )

        sample = PanopticSample(image, id_map.astype(np.int32), segments,
                                image_id=os.path.splitext(file_name)[0])
        try:
            sample.validate()
        except InputError as e:
            raise FormatError(f"{seg_file}: {e}")
        samples.append(sample)

    logger.info(f"Read {len(samples)} panoptic samples ({len(catalog)} classes) from {annotation_file}")
    return catalog, samples


# ─── Native cache ─────────────────────────────────────────────────────────────

def save_dataset_cache(cache_dir: str, catalog: ClassCatalog, samples: Sequence[PanopticSample],
                       seed: int, config_hash: str) -> str:
    """Per-sample .npz blobs plus manifest.json (catalog, seed, config hash)."""
    os.makedirs(cache_dir, exist_ok=True)
    files = []
    for index, sample in enumerate(samples):
        name = f"{index:06d}.npz"
        table = np.array([[s.segment_id, s.class_id, int(s.is_thing)] for s in sample.segments],
                         dtype=np.int64).reshape(-1, 3)
        np.savez_compressed(os.path.join(cache_dir, name), image=to_uint8_image(sample.image),
                            segment_map=sample.segment_map, segments=table,
                            image_id=np.array(sample.image_id))
        files.append(name)
    write_json(os.path.join(cache_dir, 'manifest.json'), {
        'catalog': catalog.to_list(), 'seed': seed, 'config_hash': config_hash,
        'count': len(files), 'files': files,
    })
    logger.info(f"Cached {len(files)} samples in {cache_dir}")
    return cache_dir


def load_dataset_cache(cache_dir: str, config_hash: Optional[str] = None
                       ) -> Tuple[ClassCatalog, List[PanopticSample]]:
    manifest_path = os.path.join(cache_dir, 'manifest.json')
    if not os.path.exists(manifest_path):
        raise FormatError(f"{cache_dir}: no manifest.json")
    manifest = read_json(manifest_path)
    if config_hash is not None and manifest.get('config_hash') != config_hash:
        raise FormatError(f"{cache_dir}: cache built for config {manifest.get('config_hash')}, "
                          f"expected {config_hash}")
    catalog = ClassCatalog.from_list(manifest['catalog'])
    samples = []
    for name in manifest['files']:
        path = os.path.join(cache_dir, name)
        if not os.path.exists(path):
            raise FormatError(f"{cache_dir}: missing blob {name}")
        with np.load(path) as blob:
            segments = [Segment(int(a), int(b), bool(c)) for a, b, c in blob['segments']]
            samples.append(PanopticSample(to_float_image(blob['image']), blob['segment_map'].astype(np.int32),
                                          segments, image_id=str(blob['image_id'])))
    return catalog, samples
