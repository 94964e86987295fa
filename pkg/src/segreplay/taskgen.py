"""Procedural generation of desk-scale segmentation tasks.

Each task renders a family of geometric structures (concentric rings, nested
ellipses, or a lone blob) on a textured background. Appearance knobs
(base intensity, texture frequency, pixel noise) separate tasks in input
distribution; the geometry family and class count separate them in label
space. All generation is a pure function of the task spec and its seed.
"""

import json
from contextlib import contextmanager
from contextvars import ContextVar
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .errors import AccessGuardError, ConfigurationError
from .rng import derive_seed

GEOMETRIES = ("ringed_disc", "nested_ellipse", "blob")

# Fixed rendering constants. Foreground offsets exceed twice the texture
# amplitude so a noiseless image separates foreground from background by
# value alone, and |base| + amplitude + max offset stays below 1 (no clamping
# in the noiseless case).
TEXTURE_AMPLITUDE = 0.1
CLASS_OFFSETS = (0.34, -0.26, 0.22)

MIN_IMAGE_SIZE = 16


@dataclass(frozen=True)
class AppearanceParams:
    base_intensity: float
    texture_frequency: float
    noise_level: float

    def validate(self) -> None:
        if not -1.0 <= self.base_intensity <= 1.0:
            raise ConfigurationError(f"base_intensity {self.base_intensity} outside [-1, 1]")
        if self.texture_frequency <= 0:
            raise ConfigurationError(f"texture_frequency {self.texture_frequency} must be > 0")
        if self.noise_level < 0:
            raise ConfigurationError(f"noise_level {self.noise_level} must be >= 0")


@dataclass(frozen=True)
class TaskSpec:
    """Identity, label space, appearance, and prompt fields of one task."""

    task_id: int
    name: str
    code: str  # single letter used in order strings, e.g. "C"
    modality: str
    region: str
    objective: str
    num_classes: int
    appearance: AppearanceParams
    geometry: str
    image_size: int
    seed: int

    def prompt_fields(self) -> tuple[str, str, str]:
        return (self.modality, self.region, self.objective)


@dataclass
class LabeledImage:
    image: np.ndarray  # (H, W) float32 in [-1, 1]
    mask: np.ndarray  # (H, W) int16 in {0..num_classes}
    task_id: int


_ACTIVE_TASK: ContextVar["int | None"] = ContextVar("segreplay_active_task", default=None)


@contextmanager
def exclusive_task_access(task_id: int):
    """Within this context, train/val splits of other tasks raise on access."""
    token = _ACTIVE_TASK.set(task_id)
    try:
        yield
    finally:
        _ACTIVE_TASK.reset(token)


class TaskDataset:
    """Split pools of one task, guarded against cross-task train/val reads."""

    def __init__(self, spec: TaskSpec, train, val, test):
        self.spec = spec
        self._train = list(train)
        self._val = list(val)
        self._test = list(test)

    def _check_guard(self) -> None:
        active = _ACTIVE_TASK.get()
        if active is not None and active != self.spec.task_id:
            raise AccessGuardError(
                f"train/val of task {self.spec.task_id} accessed during round for task {active}"
            )

    @property
    def train(self) -> list:
        self._check_guard()
        return self._train

    @property
    def val(self) -> list:
        self._check_guard()
        return self._val

    @property
    def test(self) -> list:
        return self._test

    @property
    def task_id(self) -> int:
        return self.spec.task_id


@dataclass
class SuiteConfig:
    """Suite-level generation settings; `tasks` entries are TaskSpec field dicts."""

    image_size: int = 32
    samples_per_task: int = 160
    fractions: tuple = (0.6, 0.15, 0.25)
    base_seed: int = 0
    channel_budget: int = 4  # mask channels incl. background (C_max)
    tasks: "list[dict] | None" = None


DEFAULT_TASKS = [
    dict(
        name="rings",
        code="C",
        modality="low-field scan",
        region="concentric rings",
        objective="ring structure segmentation",
        num_classes=3,
        geometry="ringed_disc",
        base_intensity=-0.55,
        texture_frequency=2.5,
        noise_level=0.05,
    ),
    dict(
        name="lenses",
        code="F",
        modality="bright-field photo",
        region="nested lenses",
        objective="lens boundary segmentation",
        num_classes=2,
        geometry="nested_ellipse",
        base_intensity=0.0,
        texture_frequency=5.0,
        noise_level=0.05,
    ),
    dict(
        name="blob",
        code="P",
        modality="high-field scan",
        region="solitary blob",
        objective="blob segmentation",
        num_classes=1,
        geometry="blob",
        base_intensity=0.55,
        texture_frequency=8.0,
        noise_level=0.05,
    ),
]

_GEOMETRY_CLASSES = {"ringed_disc": 3, "nested_ellipse": 2, "blob": 1}


def make_task_suite(config: SuiteConfig) -> list[TaskSpec]:
    """Build the task specs for a suite, validating discriminability."""
    entries = config.tasks if config.tasks is not None else DEFAULT_TASKS
    if len(entries) < 1:
        raise ConfigurationError("suite must name at least one task")
    if config.image_size < MIN_IMAGE_SIZE:
        raise ConfigurationError(f"image_size {config.image_size} below minimum {MIN_IMAGE_SIZE}")

    specs = []
    for idx, entry in enumerate(entries, start=1):
        entry = dict(entry)
        geometry = entry.get("geometry")
        if geometry not in GEOMETRIES:
            raise ConfigurationError(f"unknown geometry {geometry!r} for task {idx}")
        num_classes = int(entry.get("num_classes", _GEOMETRY_CLASSES[geometry]))
        if num_classes != _GEOMETRY_CLASSES[geometry]:
            raise ConfigurationError(
                f"geometry {geometry} renders {_GEOMETRY_CLASSES[geometry]} classes, "
                f"config asks for {num_classes}"
            )
        if num_classes + 1 > config.channel_budget:
            raise ConfigurationError(
                f"task {idx}: {num_classes} classes + background exceed channel budget "
                f"{config.channel_budget}"
            )
        appearance = AppearanceParams(
            base_intensity=float(entry["base_intensity"]),
            texture_frequency=float(entry["texture_frequency"]),
            noise_level=float(entry.get("noise_level", 0.05)),
        )
        appearance.validate()
        for slot in ("modality", "region", "objective"):
            if not str(entry.get(slot, "")).strip():
                raise ConfigurationError(f"task {idx}: empty prompt slot {slot!r}")
        specs.append(
            TaskSpec(
                task_id=idx,
                name=str(entry["name"]),
                code=str(entry.get("code", entry["name"][0].upper())),
                modality=str(entry["modality"]),
                region=str(entry["region"]),
                objective=str(entry["objective"]),
                num_classes=num_classes,
                appearance=appearance,
                geometry=geometry,
                image_size=config.image_size,
                seed=derive_seed(config.base_seed, "task", idx),
            )
        )

    _validate_suite(specs)
    return specs


def _validate_suite(specs: list[TaskSpec]) -> None:
    for i, a in enumerate(specs):
        for b in specs[i + 1 :]:
            if a.prompt_fields() == b.prompt_fields():
                raise ConfigurationError(f"tasks {a.task_id} and {b.task_id} share prompt fields")
            if a.code == b.code:
                raise ConfigurationError(f"tasks {a.task_id} and {b.task_id} share code {a.code!r}")
            if a.appearance.base_intensity == b.appearance.base_intensity:
                raise ConfigurationError(
                    f"tasks {a.task_id} and {b.task_id} share base_intensity; "
                    "appearance shift requires distinct values"
                )
            if a.appearance.texture_frequency == b.appearance.texture_frequency:
                raise ConfigurationError(
                    f"tasks {a.task_id} and {b.task_id} share texture_frequency"
                )


def _pixel_grid(size: int):
    coords = np.arange(size, dtype=np.float64) + 0.5
    return np.meshgrid(coords, coords, indexing="ij")  # (yy, xx)


def _render_ringed_disc(size: int, rng: np.random.Generator) -> np.ndarray:
    s = float(size)
    cy = s * (0.5 + rng.uniform(-0.06, 0.06))
    cx = s * (0.5 + rng.uniform(-0.06, 0.06))
    r1 = s * rng.uniform(0.30, 0.40)
    r2 = r1 * rng.uniform(0.60, 0.70)
    r3 = r1 * rng.uniform(0.30, 0.40)
    yy, xx = _pixel_grid(size)
    dist = np.hypot(yy - cy, xx - cx)
    mask = np.zeros((size, size), dtype=np.int16)
    mask[dist <= r1] = 1
    mask[dist <= r2] = 2
    mask[dist <= r3] = 3
    return mask


def _render_nested_ellipse(size: int, rng: np.random.Generator) -> np.ndarray:
    s = float(size)
    cy = s * (0.5 + rng.uniform(-0.08, 0.08))
    cx = s * (0.5 + rng.uniform(-0.08, 0.08))
    a = s * rng.uniform(0.26, 0.36)
    b = a * rng.uniform(0.70, 0.95)
    theta = rng.uniform(0.0, np.pi)
    inner = rng.uniform(0.50, 0.62)
    yy, xx = _pixel_grid(size)
    dy, dx = yy - cy, xx - cx
    u = dx * np.cos(theta) + dy * np.sin(theta)
    v = -dx * np.sin(theta) + dy * np.cos(theta)
    q = (u / a) ** 2 + (v / b) ** 2
    mask = np.zeros((size, size), dtype=np.int16)
    mask[q <= 1.0] = 1
    mask[q <= inner**2] = 2
    return mask


def _render_blob(size: int, rng: np.random.Generator) -> np.ndarray:
    s = float(size)
    cy = s * (0.5 + rng.uniform(-0.06, 0.06))
    cx = s * (0.5 + rng.uniform(-0.06, 0.06))
    r0 = s * rng.uniform(0.20, 0.32)
    amps = rng.uniform(0.0, 0.12, size=3)
    phases = rng.uniform(0.0, 2 * np.pi, size=3)
    yy, xx = _pixel_grid(size)
    dy, dx = yy - cy, xx - cx
    phi = np.arctan2(dy, dx)
    radius = r0 * (
        1.0
        + amps[0] * np.cos(2 * phi + phases[0])
        + amps[1] * np.cos(3 * phi + phases[1])
        + amps[2] * np.cos(4 * phi + phases[2])
    )
    mask = np.zeros((size, size), dtype=np.int16)
    mask[np.hypot(dy, dx) <= radius] = 1
    return mask


_RENDERERS = {
    "ringed_disc": _render_ringed_disc,
    "nested_ellipse": _render_nested_ellipse,
    "blob": _render_blob,
}


def texture_field(spec: TaskSpec, phase_u: float, phase_v: float) -> np.ndarray:
    """Background texture: a separable sinusoid at the task's frequency."""
    size = spec.image_size
    yy, xx = _pixel_grid(size)
    f = spec.appearance.texture_frequency
    return TEXTURE_AMPLITUDE * np.sin(2 * np.pi * f * xx / size + phase_u) * np.cos(
        2 * np.pi * f * yy / size + phase_v
    )


def sample_pair(spec: TaskSpec, rng: np.random.Generator) -> LabeledImage:
    """Render one image-mask pair from the task's generative model."""
    mask = _RENDERERS[spec.geometry](spec.image_size, rng)
    present = set(np.unique(mask))
    for c in range(1, spec.num_classes + 1):
        if c not in present:
            raise RuntimeError(f"degenerate render: class {c} empty for task {spec.task_id}")

    phase_u, phase_v = rng.uniform(0.0, 2 * np.pi, size=2)
    image = spec.appearance.base_intensity + texture_field(spec, phase_u, phase_v)
    offsets = np.array((0.0,) + CLASS_OFFSETS[: spec.num_classes])
    image = image + offsets[mask]
    if spec.appearance.noise_level > 0:
        image = image + rng.normal(0.0, spec.appearance.noise_level, size=image.shape)
    image = np.clip(image, -1.0, 1.0)
    return LabeledImage(image=image.astype(np.float32), mask=mask, task_id=spec.task_id)


def build_dataset(spec: TaskSpec, n: int, fractions=(0.6, 0.15, 0.25)) -> TaskDataset:
    """Generate n pairs from spec.seed and split them train/val/test."""
    if n < 4:
        raise ValueError(f"dataset needs n >= 4, got {n}")
    if abs(sum(fractions) - 1.0) > 1e-9:
        raise ConfigurationError(f"split fractions {fractions} do not sum to 1")
    rng = np.random.default_rng(spec.seed)
    pairs = [sample_pair(spec, rng) for _ in range(n)]
    n_train = round(n * fractions[0])
    n_val = round(n * fractions[1])
    return TaskDataset(
        spec,
        train=pairs[:n_train],
        val=pairs[n_train : n_train + n_val],
        test=pairs[n_train + n_val :],
    )


def build_suite_datasets(specs: list[TaskSpec], n: int, fractions=(0.6, 0.15, 0.25)):
    return {spec.task_id: build_dataset(spec, n, fractions) for spec in specs}


def spec_to_dict(spec: TaskSpec) -> dict:
    return asdict(spec)


def spec_from_dict(data: dict) -> TaskSpec:
    data = dict(data)
    data["appearance"] = AppearanceParams(**data["appearance"])
    return TaskSpec(**data)


def save_dataset(dataset: TaskDataset, directory) -> None:
    """Persist one task's splits as an array file plus a manifest."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    splits = {"train": dataset._train, "val": dataset._val, "test": dataset._test}
    arrays = {}
    manifest = {"spec": spec_to_dict(dataset.spec), "splits": {}}
    offset = 0
    all_pairs = []
    for name, pairs in splits.items():
        manifest["splits"][name] = {"start": offset, "count": len(pairs)}
        offset += len(pairs)
        all_pairs.extend(pairs)
    arrays["images"] = np.stack([p.image for p in all_pairs]) if all_pairs else np.zeros((0,))
    arrays["masks"] = np.stack([p.mask for p in all_pairs]) if all_pairs else np.zeros((0,))
    np.savez(directory / "data.npz", **arrays)
    (directory / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))


def load_dataset(directory) -> TaskDataset:
    directory = Path(directory)
    manifest = json.loads((directory / "manifest.json").read_text())
    spec = spec_from_dict(manifest["spec"])
    data = np.load(directory / "data.npz")
    images, masks = data["images"], data["masks"]
    splits = {}
    for name, info in manifest["splits"].items():
        lo, hi = info["start"], info["start"] + info["count"]
        splits[name] = [
            LabeledImage(image=images[i], mask=masks[i].astype(np.int16), task_id=spec.task_id)
            for i in range(lo, hi)
        ]
    return TaskDataset(spec, splits["train"], splits["val"], splits["test"])
