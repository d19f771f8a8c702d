"""
Synthetic confusion-mode scenes.

Each scene has two large primary objects, each filling most of one image
quadrant, and two small secondary objects, each inside a single patch of
the remaining quadrants. Confusion questions ask for the colour of a small
object by shape and patch cell; easy questions ask about a big object;
caption samples describe the big objects.
"""

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Sequence, Tuple, Union

import numpy as np

from ..errors import ConfigError, FormatError
from ..training.harness import TrainingSample

logger = logging.getLogger(__name__)

PALETTE: Dict[str, Tuple[int, int, int]] = {
    'red': (255, 0, 0),
    'green': (0, 200, 0),
    'blue': (0, 0, 255),
    'yellow': (255, 255, 0),
    'cyan': (0, 255, 255),
    'magenta': (255, 0, 255),
    'white': (255, 255, 255),
    'orange': (255, 128, 0),
}
COLORS = tuple(PALETTE)
SHAPES = ('square', 'circle', 'cross')
CAPTION_PROMPT = 'describe'
DATASET_HEADER = '# pipmm-dataset v1'


@dataclass(frozen=True)
class DataConfig:
    image_size: int = 32
    patch: int = 8
    channels: int = 3

    @property
    def grid(self) -> int:
        return self.image_size // self.patch

    def validate(self) -> 'DataConfig':
        if self.channels != 3:
            raise ConfigError("scenes are rendered in RGB", key='data.channels')
        if self.image_size % self.patch:
            raise ConfigError(f"image size {self.image_size} is not divisible by patch "
                              f"{self.patch}", key='data.image_size')
        if self.grid < 4 or self.grid % 2:
            raise ConfigError(f"a {self.grid}x{self.grid} patch grid is too small for two "
                              f"primary and two secondary objects", key='data.image_size')
        if self.patch < 4:
            raise ConfigError("patch must be >= 4 pixels for secondary objects",
                              key='data.patch')
        return self


@dataclass(frozen=True)
class SceneObject:
    shape: str
    color: str
    salience: str
    top: int
    left: int
    size: int


@dataclass(frozen=True)
class SceneSpec:
    config: DataConfig
    objects: Tuple[SceneObject, ...]
    seed: int

    @property
    def primaries(self) -> Tuple[SceneObject, ...]:
        return tuple(o for o in self.objects if o.salience == 'primary')

    @property
    def secondaries(self) -> Tuple[SceneObject, ...]:
        return tuple(o for o in self.objects if o.salience == 'secondary')

    def render(self) -> np.ndarray:
        """uint8 H x W x 3 image; later objects paint over earlier ones."""
        size = self.config.image_size
        image = np.zeros((size, size, 3), dtype=np.uint8)
        for obj in self.objects:
            mask = render_object_mask(obj, size)
            image[mask] = PALETTE[obj.color]
        return image


@dataclass
class ConfusionSample(TrainingSample):
    target_patch_ids: Tuple[int, ...] = ()

    @property
    def raw_image(self) -> np.ndarray:
        return np.rint(self.image * 255).astype(np.uint8)


@dataclass
class SyntheticCorpus:
    captions: List[ConfusionSample] = field(default_factory=list)
    easy: List[ConfusionSample] = field(default_factory=list)
    confusion: List[ConfusionSample] = field(default_factory=list)

    def splits(self) -> Dict[str, List[ConfusionSample]]:
        return {'captions': self.captions, 'easy': self.easy, 'confusion': self.confusion}


def shape_mask(shape: str, size: int) -> np.ndarray:
    if shape == 'square':
        return np.ones((size, size), dtype=bool)
    yy, xx = np.mgrid[0:size, 0:size]
    centre = (size - 1) / 2.0
    if shape == 'circle':
        return (yy - centre) ** 2 + (xx - centre) ** 2 <= (size / 2.0) ** 2
    if shape == 'cross':
        band = max(1, size // 3)
        lo = (size - band) // 2
        return ((yy >= lo) & (yy < lo + band)) | ((xx >= lo) & (xx < lo + band))
    raise ConfigError(f"unknown shape {shape!r}")


def render_object_mask(obj: SceneObject, image_size: int) -> np.ndarray:
    """Boolean image-sized mask of the pixels covered by ``obj``."""
    mask = np.zeros((image_size, image_size), dtype=bool)
    mask[obj.top:obj.top + obj.size, obj.left:obj.left + obj.size] = shape_mask(obj.shape,
                                                                               obj.size)
    return mask


def patch_ids_of(obj: SceneObject, config: DataConfig) -> Tuple[int, ...]:
    """Patches overlapped by the object's bounding box; every shape reaches all four box edges."""
    p, grid = config.patch, config.grid
    rows = range(obj.top // p, (obj.top + obj.size - 1) // p + 1)
    cols = range(obj.left // p, (obj.left + obj.size - 1) // p + 1)
    return tuple(r * grid + c for r in rows for c in cols)


def cell_name(patch_id: int, grid: int) -> str:
    return f"r{patch_id // grid}c{patch_id % grid}"


def confusion_prompt(shape: str, patch_id: int, grid: int) -> str:
    return f"what color is the small {shape} at {cell_name(patch_id, grid)}?"


def easy_prompt(shape: str) -> str:
    return f"what color is the big {shape}?"


def _quadrant_patches(quadrant: int, grid: int) -> List[int]:
    half = grid // 2
    r0, c0 = (quadrant // 2) * half, (quadrant % 2) * half
    return [(r0 + r) * grid + c0 + c for r in range(half) for c in range(half)]


def build_scene(config: DataConfig, index: int, rng: np.random.Generator,
                seed: int) -> Tuple[SceneSpec, SceneObject]:
    """
    Scene ``index`` of a dataset; colour, shape and target cell of the
    queried object cycle with the index so the splits stay balanced.
    """
    grid, p = config.grid, config.patch
    quadrant_px = config.image_size // 2
    target_color = COLORS[index % len(COLORS)]
    target_shape = SHAPES[index % len(SHAPES)]

    primary_quadrants = [int(q) for q in rng.choice(4, size=2, replace=False)]
    free = [q for q in range(4) if q not in primary_quadrants]
    free_patches = sorted(_quadrant_patches(free[0], grid) + _quadrant_patches(free[1], grid))
    target_patch = free_patches[(index // len(COLORS)) % len(free_patches)]
    others = [pid for pid in free_patches if pid != target_patch]
    distractor_patch = others[int(rng.integers(len(others)))]

    primary_shapes = rng.choice(len(SHAPES), size=2, replace=False)
    objects = []
    for quadrant, shape_idx in zip(sorted(primary_quadrants), primary_shapes):
        top = (quadrant // 2) * quadrant_px + 1
        left = (quadrant % 2) * quadrant_px + 1
        objects.append(SceneObject(SHAPES[int(shape_idx)], COLORS[int(rng.integers(len(COLORS)))],
                                   'primary', top, left, quadrant_px - 2))

    def small(shape, color, patch_id):
        return SceneObject(shape, color, 'secondary', (patch_id // grid) * p + 1,
                           (patch_id % grid) * p + 1, p - 2)

    target = small(target_shape, target_color, target_patch)
    distractor_shape = SHAPES[int(rng.integers(len(SHAPES)))]
    distractor_color = COLORS[(COLORS.index(target_color) + 1 + int(rng.integers(
        len(COLORS) - 1))) % len(COLORS)]
    objects.append(target)
    objects.append(small(distractor_shape, distractor_color, distractor_patch))
    return SceneSpec(config, tuple(objects), seed), target


def gen_dataset(config: DataConfig, seed: int, n: int) -> SyntheticCorpus:
    """
    Generate ``n`` scenes and their caption, easy and confusion samples.

    Same (config, seed, n) gives a bit-identical corpus.
    """
    config.validate()
    if n < 1:
        raise ConfigError(f"dataset size must be >= 1, got {n}", key='data.n')
    rng = np.random.default_rng(seed)
    corpus = SyntheticCorpus()
    for index in range(n):
        scene, target = build_scene(config, index, rng, seed)
        image = scene.render().astype(np.float64) / 255.0
        big = scene.primaries
        caption = ' '.join(f"{o.color} {o.shape}" for o in big)
        corpus.captions.append(ConfusionSample(image, CAPTION_PROMPT, caption, 'caption'))
        queried = big[index % len(big)]
        corpus.easy.append(ConfusionSample(image, easy_prompt(queried.shape), queried.color,
                                           'easy', patch_ids_of(queried, config)))
        target_id = patch_ids_of(target, config)[0]
        corpus.confusion.append(ConfusionSample(
            image, confusion_prompt(target.shape, target_id, config.grid), target.color,
            'confusion', patch_ids_of(target, config)))
    logger.debug("generated %d scenes with seed %d", n, seed)
    return corpus


def save_dataset(samples: Sequence[ConfusionSample], path: Union[str, Path]) -> None:
    """One tab-separated record per line: hex image, prompt, answer, kind, target ids."""
    if not samples:
        raise ConfigError("cannot save an empty dataset")
    h, w, c = samples[0].image.shape
    lines = [f"{DATASET_HEADER} {h}x{w}x{c}"]
    for s in samples:
        ids = ','.join(str(i) for i in s.target_patch_ids)
        lines.append('\t'.join([s.raw_image.tobytes().hex(), s.prompt, s.answer, s.kind, ids]))
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text('\n'.join(lines) + '\n', encoding='utf-8')


def load_dataset(path: Union[str, Path]) -> List[ConfusionSample]:
    text = Path(path).read_text(encoding='utf-8')
    lines = text.split('\n')
    header = lines[0].split(' ')
    if ' '.join(header[:-1]) != DATASET_HEADER:
        raise FormatError(f"{path} is not a pipmm dataset", offset=0)
    try:
        h, w, c = (int(x) for x in header[-1].split('x'))
    except ValueError:
        raise FormatError(f"bad image shape {header[-1]!r} in {path}", offset=0) from None

    samples = []
    offset = len(lines[0]) + 1
    for line in lines[1:]:
        if not line:
            offset += 1
            continue
        fields = line.split('\t')
        if len(fields) != 5:
            raise FormatError(f"expected 5 fields, got {len(fields)}", offset=offset)
        payload, prompt, answer, kind, ids = fields
        try:
            raw = np.frombuffer(bytes.fromhex(payload), dtype=np.uint8)
            image = raw.reshape(h, w, c).astype(np.float64) / 255.0
            target = tuple(int(i) for i in ids.split(',')) if ids else ()
        except ValueError as e:
            raise FormatError(f"malformed record: {e}", offset=offset) from None
        samples.append(ConfusionSample(image, prompt, answer, kind, target))
        offset += len(line) + 1
    return samples
