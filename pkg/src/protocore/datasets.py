"""Deterministic class-incremental task streams over synthetic data.

Two generators: well-separated Gaussian blobs (class centers on the
corners of a seeded hypercube) and concentric 2-D rings as a
non-linearly-separable stress case. Sequences are immutable after
generation and carry their true class centers so oracle checks stay
reproducible.
"""

import json
from dataclasses import dataclass, field

import numpy as np

from .seeding import child_rng

SEQUENCE_FORMAT = "task-sequence"
SEQUENCE_VERSION = 1
TRAIN_FRACTION = 0.8


@dataclass(frozen=True)
class Task:
    """One stage of the stream: disjoint classes with train/test splits."""

    task_id: int  # 1-based position in the sequence
    classes: tuple
    train_x: np.ndarray
    train_y: np.ndarray
    test_x: np.ndarray
    test_y: np.ndarray

    def __post_init__(self):
        labels = set(np.unique(self.train_y)) | set(np.unique(self.test_y))
        if not labels <= set(self.classes):
            raise ValueError(f"task {self.task_id}: labels {labels} outside {self.classes}")

    @property
    def n_train(self) -> int:
        return len(self.train_y)


@dataclass(frozen=True)
class TaskSequence:
    """Ordered tasks plus the generation metadata needed to reproduce them."""

    tasks: tuple
    n_classes: int
    n_tasks: int
    input_dim: int
    seed: int
    generator: str
    params: dict = field(default_factory=dict)
    centers: np.ndarray | None = None  # true class centers, one row per class

    def __post_init__(self):
        seen = set()
        for task in self.tasks:
            overlap = seen & set(task.classes)
            if overlap:
                raise ValueError(f"classes {overlap} appear in more than one task")
            seen |= set(task.classes)
        if seen != set(range(self.n_classes)):
            raise ValueError("task class sets do not cover {0..C-1}")

    def all_train(self):
        xs = np.concatenate([t.train_x for t in self.tasks])
        ys = np.concatenate([t.train_y for t in self.tasks])
        return xs, ys


@dataclass(frozen=True)
class StreamMode:
    """offline(E) replays the task E shuffled epochs; online is one pass."""

    kind: str
    epochs: int = 1

    def __post_init__(self):
        if self.kind not in ("offline", "online"):
            raise ValueError(f"unknown stream mode {self.kind!r}")
        if self.kind == "offline" and self.epochs < 1:
            raise ValueError("offline mode needs at least one epoch")


def _split_class(points: np.ndarray, label: int):
    n_train = int(round(TRAIN_FRACTION * len(points)))
    train = points[:n_train]
    test = points[n_train:]
    return (train, np.full(len(train), label, dtype=np.int64),
            test, np.full(len(test), label, dtype=np.int64))


def _build_tasks(per_class_points, n_classes, n_tasks):
    per_task = n_classes // n_tasks
    tasks = []
    for t in range(n_tasks):
        classes = tuple(range(t * per_task, (t + 1) * per_task))
        tr_x, tr_y, te_x, te_y = [], [], [], []
        for c in classes:
            a, b, cc, d = _split_class(per_class_points[c], c)
            tr_x.append(a)
            tr_y.append(b)
            te_x.append(cc)
            te_y.append(d)
        tasks.append(Task(
            task_id=t + 1,
            classes=classes,
            train_x=np.concatenate(tr_x),
            train_y=np.concatenate(tr_y),
            test_x=np.concatenate(te_x),
            test_y=np.concatenate(te_y),
        ))
    return tuple(tasks)


def make_split_gaussians(n_classes: int, n_tasks: int, input_dim: int,
                         n_per_class: int, separation: float, noise_sd: float,
                         seed: int) -> TaskSequence:
    """Gaussian blobs centered on distinct seeded hypercube corners.

    Each class center is a corner of the cube with side ``separation``,
    so any two centers are at least ``separation`` apart; isotropic
    noise with sd ``noise_sd`` is added around each center.
    """
    if n_classes % n_tasks != 0:
        raise ValueError(f"{n_classes} classes not divisible into {n_tasks} tasks")
    if separation <= 0:
        raise ValueError("separation must be positive")
    if n_per_class < 4:
        raise ValueError("need at least 4 samples per class for the 80/20 split")
    if n_classes > 2 ** input_dim:
        raise ValueError(f"{n_classes} classes exceed the {2 ** input_dim} "
                         f"distinct corners of a {input_dim}-cube")

    rng = child_rng(seed, "centers")
    corners = set()
    centers = []
    while len(centers) < n_classes:
        corner = tuple(rng.integers(0, 2, size=input_dim))
        if corner not in corners:
            corners.add(corner)
            centers.append(np.array(corner, dtype=np.float64) * 2.0 - 1.0)
    centers = np.stack(centers) * (separation / 2.0)

    noise_rng = child_rng(seed, "noise")
    per_class = [centers[c] + noise_sd * noise_rng.standard_normal((n_per_class, input_dim))
                 for c in range(n_classes)]
    return TaskSequence(
        tasks=_build_tasks(per_class, n_classes, n_tasks),
        n_classes=n_classes,
        n_tasks=n_tasks,
        input_dim=input_dim,
        seed=seed,
        generator="split_gaussians",
        params={"n_per_class": n_per_class, "separation": separation,
                "noise_sd": noise_sd},
        centers=centers,
    )


RING_SPACING = 1.0
RING_WIDTH_SD = 0.08


def make_split_rings(n_classes: int, n_tasks: int, n_per_class: int,
                     seed: int) -> TaskSequence:
    """Concentric 2-D annuli, one radius per class, strictly increasing."""
    if n_classes % n_tasks != 0:
        raise ValueError(f"{n_classes} classes not divisible into {n_tasks} tasks")
    if n_per_class < 4:
        raise ValueError("need at least 4 samples per class for the 80/20 split")
    rng = child_rng(seed, "rings")
    per_class = []
    radii = []
    for c in range(n_classes):
        base = RING_SPACING * (c + 1)
        radii.append(base)
        angles = rng.uniform(0.0, 2.0 * np.pi, size=n_per_class)
        r = base + RING_WIDTH_SD * rng.standard_normal(n_per_class)
        per_class.append(np.stack([r * np.cos(angles), r * np.sin(angles)], axis=1))
    return TaskSequence(
        tasks=_build_tasks(per_class, n_classes, n_tasks),
        n_classes=n_classes,
        n_tasks=n_tasks,
        input_dim=2,
        seed=seed,
        generator="split_rings",
        params={"n_per_class": n_per_class, "ring_spacing": RING_SPACING,
                "ring_width_sd": RING_WIDTH_SD},
        centers=None,
    )


def ring_radii(seq: TaskSequence) -> np.ndarray:
    if seq.generator != "split_rings":
        raise ValueError("ring_radii only applies to split_rings sequences")
    return np.array([seq.params["ring_spacing"] * (c + 1)
                     for c in range(seq.n_classes)])


def iterate(task: Task, mode: StreamMode, batch_size: int, seed: int):
    """Yield (x, y) batches; one fixed-order pass online, E shuffles offline."""
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    n = task.n_train
    if n == 0:
        raise ValueError(f"task {task.task_id} has no training samples")
    epochs = 1 if mode.kind == "online" else mode.epochs
    rng = child_rng(seed, "iterate", task.task_id)
    for _ in range(epochs):
        order = rng.permutation(n)
        for start in range(0, n, batch_size):
            idx = order[start:start + batch_size]
            yield task.train_x[idx], task.train_y[idx]


def nearest_centroid_accuracy(seq: TaskSequence) -> float:
    """Test accuracy of classifying by nearest true class center."""
    if seq.centers is None:
        raise ValueError("sequence carries no class centers")
    correct = 0
    total = 0
    for task in seq.tasks:
        d = np.linalg.norm(task.test_x[:, None, :] - seq.centers[None, :, :], axis=2)
        correct += int(np.sum(np.argmin(d, axis=1) == task.test_y))
        total += len(task.test_y)
    return correct / total


def nearest_ring_accuracy(seq: TaskSequence) -> float:
    """Test accuracy of classifying by nearest class radius."""
    radii = ring_radii(seq)
    correct = 0
    total = 0
    for task in seq.tasks:
        r = np.linalg.norm(task.test_x, axis=1)
        pred = np.argmin(np.abs(r[:, None] - radii[None, :]), axis=1)
        correct += int(np.sum(pred == task.test_y))
        total += len(task.test_y)
    return correct / total


# ---------------------------------------------------------------------------
# JSON export / import


def sequence_to_json(seq: TaskSequence) -> dict:
    return {
        "format": SEQUENCE_FORMAT,
        "version": SEQUENCE_VERSION,
        "n_classes": seq.n_classes,
        "n_tasks": seq.n_tasks,
        "input_dim": seq.input_dim,
        "seed": seq.seed,
        "generator": seq.generator,
        "params": seq.params,
        "centers": None if seq.centers is None else seq.centers.tolist(),
        "tasks": [{
            "task_id": t.task_id,
            "classes": list(t.classes),
            "train_x": t.train_x.tolist(),
            "train_y": t.train_y.tolist(),
            "test_x": t.test_x.tolist(),
            "test_y": t.test_y.tolist(),
        } for t in seq.tasks],
    }


def sequence_from_json(payload: dict) -> TaskSequence:
    if payload.get("format") != SEQUENCE_FORMAT:
        raise ValueError(f"not a task sequence: {payload.get('format')!r}")
    tasks = tuple(Task(
        task_id=t["task_id"],
        classes=tuple(t["classes"]),
        train_x=np.asarray(t["train_x"], dtype=np.float64),
        train_y=np.asarray(t["train_y"], dtype=np.int64),
        test_x=np.asarray(t["test_x"], dtype=np.float64),
        test_y=np.asarray(t["test_y"], dtype=np.int64),
    ) for t in payload["tasks"])
    centers = payload.get("centers")
    return TaskSequence(
        tasks=tasks,
        n_classes=payload["n_classes"],
        n_tasks=payload["n_tasks"],
        input_dim=payload["input_dim"],
        seed=payload["seed"],
        generator=payload["generator"],
        params=payload["params"],
        centers=None if centers is None else np.asarray(centers, dtype=np.float64),
    )


def save_sequence(path, seq: TaskSequence):
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(sequence_to_json(seq), fh, sort_keys=True, separators=(",", ":"))


def load_sequence(path) -> TaskSequence:
    with open(path, "r", encoding="utf-8") as fh:
        return sequence_from_json(json.load(fh))


def make_sequence(generator: str, **kwargs) -> TaskSequence:
    """Dispatch on generator name; used by the CLI config loader."""
    if generator == "split_gaussians":
        return make_split_gaussians(**kwargs)
    if generator == "split_rings":
        return make_split_rings(**kwargs)
    raise ValueError(f"unknown dataset generator {generator!r}")
