"""
Synthetic multimodal tasks.

Every example carries planted signals: a P x P motif pasted onto one patch of
each image (an image code) and a motif token dropped into the text (a text
code). In cross-modal mode the label is the sum of all codes modulo the label
count, so neither modality alone determines it. Otherwise every code equals
the label.

Manifests are YAML::

    defaults:            # optional, applied to every task
      n_train: 2000
    tasks:
      - task_id: 1
        n_labels: 2
        seed: 11
      - task_id: 2
        n_labels: 3
        dual_image: true

Dataset cache files use the byte layout documented in :func:`write_dataset`.
"""

from __future__ import annotations

import struct
from dataclasses import asdict, dataclass, fields, replace
from pathlib import Path
from typing import Union

import numpy as np
import yaml

from tamcl.errors import ConfigError, ValidationError


@dataclass(frozen=True)
class TaskSpec:
    task_id: int
    n_labels: int = 2
    n_train: int = 2000
    n_test: int = 500
    image_size: tuple[int, int] = (16, 16)
    channels: int = 1
    patch: int = 4
    text_len: int = 8
    vocab_size: int = 32
    dual_image: bool = False
    cross_modal: bool = True
    seed: int = 0
    margin: float = 0.8
    noise: float = 0.1
    name: str = ""

    def __post_init__(self):
        object.__setattr__(self, "image_size", tuple(int(x) for x in self.image_size))

    @property
    def n_images(self) -> int:
        return 2 if self.dual_image else 1

    @property
    def label(self) -> str:
        return self.name or f"task{self.task_id}"

    def validate(self) -> "TaskSpec":
        h, w = self.image_size
        if self.task_id < 1:
            raise ConfigError(f"task_id must be a positive integer, got {self.task_id}")
        if self.n_train < 1 or self.n_test < 1:
            raise ConfigError(f"task {self.task_id}: n_train and n_test must be positive")
        if self.n_labels < 2:
            raise ConfigError(f"task {self.task_id}: n_labels must be >= 2, got {self.n_labels}")
        if self.margin <= 0:
            raise ConfigError(f"task {self.task_id}: margin must be > 0, got {self.margin}")
        if self.noise < 0:
            raise ConfigError(f"task {self.task_id}: noise must be >= 0, got {self.noise}")
        if self.patch < 1 or h % self.patch or w % self.patch:
            raise ConfigError(f"task {self.task_id}: image {h}x{w} not divisible by patch {self.patch}")
        if self.text_len < 1:
            raise ConfigError(f"task {self.task_id}: text_len must be >= 1")
        if self.vocab_size < self.n_labels + 2:
            raise ConfigError(f"task {self.task_id}: vocab_size {self.vocab_size} leaves no "
                              f"background tokens for {self.n_labels} motif tokens")
        return self

    def to_dict(self) -> dict:
        d = asdict(self)
        d["image_size"] = list(self.image_size)
        return d


@dataclass
class TaskData:
    task_id: int
    images: np.ndarray  # [N, n_images, H, W, C] float64 in [0, 1]
    tokens: np.ndarray  # [N, L] int64, right-padded with 0
    labels: np.ndarray  # [N] int64, task-local class index
    codes: np.ndarray  # [N, n_images + 1] planted image codes, then the text code

    def __len__(self) -> int:
        return len(self.labels)

    def subset(self, index) -> "TaskData":
        index = np.asarray(index)
        return TaskData(self.task_id, self.images[index], self.tokens[index],
                        self.labels[index], self.codes[index])

    def batches(self, batch_size: int, order=None):
        order = np.arange(len(self)) if order is None else np.asarray(order)
        for start in range(0, len(order), batch_size):
            yield self.subset(order[start:start + batch_size])


@dataclass
class Templates:
    image: np.ndarray  # [n_labels, P, P, C] with entries in {-1, +1}
    motif_tokens: np.ndarray  # [n_labels] token ids
    background_tokens: np.ndarray


def task_templates(spec: TaskSpec) -> Templates:
    """Planted patterns for a task; depends only on ``spec.seed`` and the shapes."""
    rng = np.random.default_rng([spec.seed, 0])
    shape = (spec.patch, spec.patch, spec.channels)
    pats: list[np.ndarray] = []
    while len(pats) < spec.n_labels:
        cand = rng.choice([-1.0, 1.0], size=shape)
        # keep patterns well apart so a noisy patch is attributable to one code
        if all(np.mean(cand != p) >= 0.25 for p in pats):
            pats.append(cand)
    ids = rng.permutation(np.arange(1, spec.vocab_size))
    return Templates(np.stack(pats), np.sort(ids[:spec.n_labels]), np.sort(ids[spec.n_labels:]))


def _balanced_labels(rng: np.random.Generator, n: int, k: int) -> np.ndarray:
    return rng.permutation(np.arange(n) % k)


def _draw(spec: TaskSpec, tpl: Templates, rng: np.random.Generator, n: int) -> TaskData:
    k, n_img = spec.n_labels, spec.n_images
    h, w = spec.image_size
    p, c, length = spec.patch, spec.channels, spec.text_len
    labels = _balanced_labels(rng, n, k)
    codes = np.empty((n, n_img + 1), dtype=np.int64)
    if spec.cross_modal:
        codes[:, :n_img] = rng.integers(0, k, size=(n, n_img))
        free = codes[:, 1:n_img].sum(axis=1) if n_img > 1 else 0
        codes[:, n_img] = rng.integers(0, k, size=n)
        codes[:, 0] = (labels - free - codes[:, n_img]) % k
    else:
        codes[:] = labels[:, None]

    images = 0.5 + spec.noise * rng.standard_normal((n, n_img, h, w, c))
    gh, gw = h // p, w // p
    cells = rng.integers(0, gh * gw, size=(n, n_img))
    for i in range(n):
        for j in range(n_img):
            r, q = divmod(int(cells[i, j]), gw)
            motif = 0.5 + 0.5 * spec.margin * tpl.image[codes[i, j]]
            images[i, j, r * p:(r + 1) * p, q * p:(q + 1) * p, :] = (
                motif + spec.noise * rng.standard_normal((p, p, c)))
    np.clip(images, 0.0, 1.0, out=images)

    tokens = np.zeros((n, length), dtype=np.int64)
    lo = max(1, length // 2)
    lengths = rng.integers(lo, length + 1, size=n)
    for i in range(n):
        m = int(lengths[i])
        tokens[i, :m] = rng.choice(tpl.background_tokens, size=m)
        tokens[i, rng.integers(0, m)] = tpl.motif_tokens[codes[i, n_img]]
    return TaskData(spec.task_id, images, tokens, labels.astype(np.int64), codes)


def generate_task(spec: TaskSpec) -> tuple[TaskData, TaskData]:
    """Deterministic (train, test) pair for ``spec``."""
    spec.validate()
    tpl = task_templates(spec)
    rng = np.random.default_rng([spec.seed, 1])
    return _draw(spec, tpl, rng, spec.n_train), _draw(spec, tpl, rng, spec.n_test)


def decode_planted(spec: TaskSpec, data: TaskData) -> np.ndarray:
    """Recover planted codes from raw inputs by template matching: ``[N, n_images + 1]``."""
    from tamcl.embedding import patchify

    tpl = task_templates(spec)
    flat_tpl = tpl.image.reshape(spec.n_labels, -1)
    patches = patchify(data.images, spec.patch) - 0.5  # [N, n_img, n_patch, P*P*C]
    scores = patches @ flat_tpl.T  # [N, n_img, n_patch, k]
    img_codes = scores.max(axis=2).argmax(axis=-1)
    lookup = {int(t): i for i, t in enumerate(tpl.motif_tokens)}
    txt = np.array([next(lookup[int(t)] for t in row if int(t) in lookup) for row in data.tokens])
    return np.concatenate([img_codes, txt[:, None]], axis=1)


def default_sequence(n_tasks: int = 3, base_seed: int = 0, **overrides) -> list[TaskSpec]:
    """The default synthetic sequence: alternating 2/3/4-label cross-modal tasks."""
    labels = [2, 3, 4, 2, 3, 4, 2, 3]
    return [TaskSpec(task_id=i + 1, n_labels=labels[i % len(labels)], seed=base_seed + 101 * (i + 1),
                     **overrides).validate()
            for i in range(n_tasks)]


# ---------------------------------------------------------------------------
# manifest files
# ---------------------------------------------------------------------------

_FIELDS = {f.name for f in fields(TaskSpec)}


def _coerce(spec_kwargs: dict) -> dict:
    out = dict(spec_kwargs)
    if "image_size" in out and isinstance(out["image_size"], int):
        out["image_size"] = (out["image_size"], out["image_size"])
    return out


def load_manifest(path: Union[str, Path]) -> list[TaskSpec]:
    """Task sequence from a YAML manifest, in file order."""
    path = Path(path)
    text = path.read_text()
    try:
        root = yaml.compose(text)
    except yaml.YAMLError as exc:
        raise ValidationError(f"{path}: malformed YAML: {exc}") from None
    if root is None:
        raise ValidationError(f"{path}: no tasks")
    data = yaml.safe_load(text)
    if not isinstance(data, dict):
        raise ValidationError(f"{path}:{root.start_mark.line + 1}: top level must be a mapping")
    nodes = {k.value: v for k, v in root.value}
    defaults = data.get("defaults") or {}
    bad = set(defaults) - _FIELDS
    if bad:
        line = nodes["defaults"].start_mark.line + 1
        raise ValidationError(f"{path}:{line}: unknown default field(s) {sorted(bad)}")
    tasks = data.get("tasks") or []
    if not tasks:
        raise ValidationError(f"{path}: no tasks")
    task_nodes = nodes["tasks"].value
    specs, seen = [], {}
    for entry, node in zip(tasks, task_nodes):
        line = node.start_mark.line + 1
        if not isinstance(entry, dict):
            raise ValidationError(f"{path}:{line}: task entry must be a mapping")
        bad = set(entry) - _FIELDS
        if bad:
            raise ValidationError(f"{path}:{line}: unknown field(s) {sorted(bad)}")
        if "task_id" not in entry:
            raise ValidationError(f"{path}:{line}: task_id is required")
        try:
            spec = TaskSpec(**_coerce({**defaults, **entry})).validate()
        except (ConfigError, TypeError, ValueError) as exc:
            raise ValidationError(f"{path}:{line}: {exc}") from None
        if spec.task_id in seen:
            raise ValidationError(f"{path}:{line}: duplicate task_id {spec.task_id} "
                                  f"(first defined on line {seen[spec.task_id]})")
        seen[spec.task_id] = line
        specs.append(spec)
    return specs


def dump_manifest(specs: list[TaskSpec]) -> str:
    return yaml.safe_dump({"tasks": [s.to_dict() for s in specs]}, sort_keys=False)


def save_manifest(specs: list[TaskSpec], path: Union[str, Path]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(dump_manifest(specs))
    return path


def with_overrides(specs: list[TaskSpec], **kw) -> list[TaskSpec]:
    return [replace(s, **kw) for s in specs]


# ---------------------------------------------------------------------------
# dataset cache files
# ---------------------------------------------------------------------------

DATASET_MAGIC = b"TAMCLDS\x00"
DATASET_VERSION = 1
_HEADER = struct.Struct("<8sIiIIIIIII")


def write_dataset(data: TaskData, path: Union[str, Path]) -> Path:
    """Write a flat little-endian binary file.

    Header (44 bytes)::

        magic        8s   b"TAMCLDS\\0"
        version      u32  1
        task_id      i32
        n_examples   u32
        n_images     u32
        height       u32
        width        u32
        channels     u32
        text_len     u32
        n_codes      u32

    Body, in order: labels int32[n]; codes int32[n, n_codes];
    tokens int32[n, text_len]; images float64[n, n_images, height, width, channels].
    """
    n, n_img, h, w, c = data.images.shape
    header = _HEADER.pack(DATASET_MAGIC, DATASET_VERSION, data.task_id, n, n_img, h, w, c,
                          data.tokens.shape[1], data.codes.shape[1])
    body = b"".join([
        np.ascontiguousarray(data.labels, dtype="<i4").tobytes(),
        np.ascontiguousarray(data.codes, dtype="<i4").tobytes(),
        np.ascontiguousarray(data.tokens, dtype="<i4").tobytes(),
        np.ascontiguousarray(data.images, dtype="<f8").tobytes(),
    ])
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(header + body)
    return path


def read_dataset(path: Union[str, Path]) -> TaskData:
    blob = Path(path).read_bytes()
    if len(blob) < _HEADER.size:
        raise ValidationError(f"{path}: truncated dataset header")
    magic, version, task_id, n, n_img, h, w, c, length, n_codes = _HEADER.unpack_from(blob)
    if magic != DATASET_MAGIC:
        raise ValidationError(f"{path}: not a tamcl dataset file")
    if version != DATASET_VERSION:
        raise ValidationError(f"{path}: unsupported dataset version {version}")
    off = _HEADER.size

    def take(dtype, count, shape):
        nonlocal off
        if off + np.dtype(dtype).itemsize * count > len(blob):
            raise ValidationError(f"{path}: truncated dataset payload")
        arr = np.frombuffer(blob, dtype=dtype, count=count, offset=off)
        off += arr.nbytes
        return arr.reshape(shape)

    labels = take("<i4", n, (n,)).astype(np.int64)
    codes = take("<i4", n * n_codes, (n, n_codes)).astype(np.int64)
    tokens = take("<i4", n * length, (n, length)).astype(np.int64)
    images = take("<f8", n * n_img * h * w * c, (n, n_img, h, w, c)).astype(np.float64)
    if off != len(blob):
        raise ValidationError(f"{path}: {len(blob) - off} trailing bytes")
    return TaskData(task_id, images, tokens, labels, codes)
