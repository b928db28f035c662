"""CIFAR datasets, named class subsets and label remapping.

Datasets are read from the standard "python version" pickle distributions
(``cifar-10-batches-py/`` and ``cifar-100-python/``) under a root directory
given explicitly, via ``data.root`` in the run config, or via the
``DDC_DATA_ROOT`` environment variable.
"""
from __future__ import annotations

import os
import pickle
import tarfile
import urllib.request
from dataclasses import dataclass
from functools import lru_cache
from pathlib import Path
from typing import Sequence

import numpy as np
import torch

CIFAR10_CLASSES = (
    "airplane", "automobile", "bird", "cat", "deer",
    "dog", "frog", "horse", "ship", "truck",
)

CIFAR100_SUPERCLASSES = {
    "aquatic_mammals": ("beaver", "dolphin", "otter", "seal", "whale"),
    "fish": ("aquarium_fish", "flatfish", "ray", "shark", "trout"),
    "flowers": ("orchid", "poppy", "rose", "sunflower", "tulip"),
    "food_containers": ("bottle", "bowl", "can", "cup", "plate"),
    "fruit_and_vegetables": ("apple", "mushroom", "orange", "pear", "sweet_pepper"),
    "household_electrical_devices": ("clock", "keyboard", "lamp", "telephone", "television"),
    "household_furniture": ("bed", "chair", "couch", "table", "wardrobe"),
    "insects": ("bee", "beetle", "butterfly", "caterpillar", "cockroach"),
    "large_carnivores": ("bear", "leopard", "lion", "tiger", "wolf"),
    "large_man-made_outdoor_things": ("bridge", "castle", "house", "road", "skyscraper"),
    "large_natural_outdoor_scenes": ("cloud", "forest", "mountain", "plain", "sea"),
    "large_omnivores_and_herbivores": ("camel", "cattle", "chimpanzee", "elephant", "kangaroo"),
    "medium_mammals": ("fox", "porcupine", "possum", "raccoon", "skunk"),
    "non-insect_invertebrates": ("crab", "lobster", "snail", "spider", "worm"),
    "people": ("baby", "boy", "girl", "man", "woman"),
    "reptiles": ("crocodile", "dinosaur", "lizard", "snake", "turtle"),
    "small_mammals": ("hamster", "mouse", "rabbit", "shrew", "squirrel"),
    "trees": ("maple_tree", "oak_tree", "palm_tree", "pine_tree", "willow_tree"),
    "vehicles_1": ("bicycle", "bus", "motorcycle", "pickup_truck", "train"),
    "vehicles_2": ("lawn_mower", "rocket", "streetcar", "tank", "tractor"),
}

# fine labels are numbered in alphabetical order in the official release
CIFAR100_CLASSES = tuple(sorted(c for group in CIFAR100_SUPERCLASSES.values() for c in group))

BASE_CLASSES = {"cifar10": CIFAR10_CLASSES, "cifar100": CIFAR100_CLASSES}

_DIRS = {"cifar10": "cifar-10-batches-py", "cifar100": "cifar-100-python"}
_URLS = {
    "cifar10": "https://www.cs.toronto.edu/~kriz/cifar-10-python.tar.gz",
    "cifar100": "https://www.cs.toronto.edu/~kriz/cifar-100-python.tar.gz",
}


class DatasetNotFoundError(FileNotFoundError):
    pass


@dataclass(frozen=True)
class SubsetSpec:
    base_dataset: str
    name: str
    classes: tuple[str, ...]

    def __post_init__(self):
        object.__setattr__(self, "classes", tuple(self.classes))
        if self.base_dataset not in BASE_CLASSES:
            raise ValueError(f"unknown base dataset {self.base_dataset!r}")
        if not self.classes:
            raise ValueError("a subset needs at least one class")
        if len(set(self.classes)) != len(self.classes):
            raise ValueError(f"duplicate classes in subset {self.name!r}")
        unknown = [c for c in self.classes if c not in BASE_CLASSES[self.base_dataset]]
        if unknown:
            raise ValueError(f"classes {unknown} are not part of {self.base_dataset}")

    @property
    def num_classes(self) -> int:
        return len(self.classes)

    @property
    def class_ids(self) -> tuple[int, ...]:
        """Original label ids, in remapped order."""
        names = BASE_CLASSES[self.base_dataset]
        return tuple(names.index(c) for c in self.classes)


def full_subset(base_dataset: str) -> SubsetSpec:
    return SubsetSpec(base_dataset, f"{base_dataset}_full", BASE_CLASSES[base_dataset])


def builtin_subsets() -> dict[str, SubsetSpec]:
    subsets = [
        SubsetSpec("cifar10", "animals", ("bird", "cat", "deer", "dog", "frog", "horse")),
        SubsetSpec("cifar10", "vehicles10", ("airplane", "automobile", "ship", "truck")),
    ]
    # "fruits" has no exact superclass; fruit_and_vegetables is the closest
    for name, superclass in [
        ("insects", "insects"), ("fruits", "fruit_and_vegetables"), ("trees", "trees"),
        ("vehicles1", "vehicles_1"), ("vehicles2", "vehicles_2"), ("people", "people"),
        ("reptiles", "reptiles"),
    ]:
        subsets.append(SubsetSpec("cifar100", name, CIFAR100_SUPERCLASSES[superclass]))
    subsets += [full_subset("cifar10"), full_subset("cifar100")]
    return {s.name: s for s in subsets}


def resolve_subset(name: str | None, base_dataset: str = "cifar10",
                   classes: Sequence[str] | None = None) -> SubsetSpec:
    """Look up a builtin subset, or build one from an explicit class list."""
    if classes:
        return SubsetSpec(base_dataset, name or "custom", tuple(classes))
    if not name or name in ("full", f"{base_dataset}_full"):
        return full_subset(base_dataset)
    try:
        return builtin_subsets()[name]
    except KeyError:
        raise KeyError(f"unknown subset {name!r}; choose from {sorted(builtin_subsets())}") from None


# ---------------------------------------------------------------------------
# loading


@dataclass
class Split:
    """Images (N, 3, H, W) normalized float32 and remapped int64 labels."""

    images: torch.Tensor
    labels: torch.Tensor
    subset: SubsetSpec
    split: str

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def num_classes(self) -> int:
        return self.subset.num_classes

    @property
    def input_shape(self) -> tuple[int, int, int]:
        return tuple(self.images.shape[1:])

    def take(self, n: int) -> "Split":
        return Split(self.images[:n], self.labels[:n], self.subset, self.split)


def data_root(root: str | Path | None = None) -> Path:
    if root is None:
        root = os.environ.get("DDC_DATA_ROOT")
    if root is None:
        raise DatasetNotFoundError("no dataset root given; pass root, set data.root or DDC_DATA_ROOT")
    return Path(root)


def _unpickle(path: Path) -> dict:
    with open(path, "rb") as fh:
        return pickle.load(fh, encoding="bytes")


@lru_cache(maxsize=8)
def _read_raw(root: str, base: str, split: str) -> tuple[np.ndarray, np.ndarray]:
    folder = Path(root) / _DIRS[base]
    if base == "cifar10":
        files = [f"data_batch_{i}" for i in range(1, 6)] if split == "train" else ["test_batch"]
        key = b"labels"
    else:
        files = [split]
        key = b"fine_labels"
    missing = [f for f in files if not (folder / f).exists()]
    if missing:
        raise DatasetNotFoundError(
            f"{base} files {missing} not found under {folder}. Download {_URLS[base]} and "
            f"extract it into {root} (or call ddc.data.fetch_cifar({root!r}, {base!r}))."
        )
    data, labels = [], []
    for f in files:
        batch = _unpickle(folder / f)
        data.append(np.asarray(batch[b"data"], dtype=np.uint8))
        labels.append(np.asarray(batch[key], dtype=np.int64))
    return np.concatenate(data), np.concatenate(labels)


@lru_cache(maxsize=4)
def channel_stats(root: str, base: str) -> tuple[np.ndarray, np.ndarray]:
    """Per-channel mean/std of the full training split, in [0, 1] pixel units."""
    data, _ = _read_raw(root, base, "train")
    # exact moments from per-channel pixel histograms, without a float copy of the data
    levels = np.arange(256, dtype=np.float64) / 255.0
    channels = data.reshape(len(data), 3, -1).transpose(1, 0, 2)
    hist = np.stack([np.bincount(c.ravel(), minlength=256) for c in channels])
    total = hist.sum(1)
    mean = hist @ levels / total
    var = hist @ levels**2 / total - mean**2
    return mean, np.sqrt(np.maximum(var, 0.0))


def load_split(spec: SubsetSpec, split: str, root: str | Path | None = None,
               shuffle_seed: int | None = None) -> Split:
    if split not in ("train", "test"):
        raise ValueError(f"split must be 'train' or 'test', got {split!r}")
    root = str(data_root(root))
    data, labels = _read_raw(root, spec.base_dataset, split)
    ids = np.asarray(spec.class_ids)
    mask = np.isin(labels, ids)
    data, labels = data[mask], labels[mask]
    remap = np.full(len(BASE_CLASSES[spec.base_dataset]), -1, dtype=np.int64)
    remap[ids] = np.arange(len(ids))
    labels = remap[labels]
    if shuffle_seed is not None:
        order = np.random.default_rng(shuffle_seed).permutation(len(labels))
        data, labels = data[order], labels[order]
    side = int(round((data.shape[1] // 3) ** 0.5))
    mean, std = channel_stats(root, spec.base_dataset)
    std = np.where(std > 0, std, 1.0)
    x = data.reshape(-1, 3, side, side).astype(np.float32) / 255.0
    x = (x - mean.reshape(1, 3, 1, 1).astype(np.float32)) / std.reshape(1, 3, 1, 1).astype(np.float32)
    return Split(torch.from_numpy(np.ascontiguousarray(x)), torch.from_numpy(labels), spec, split)


def restrict_teacher_logits(logits: torch.Tensor, spec: SubsetSpec,
                            teacher_classes: Sequence[str] | None = None) -> torch.Tensor:
    """Select the teacher's logit columns for ``spec.classes`` in remapped order.

    By default the teacher is assumed to emit one logit per class of the full
    base dataset; pass ``teacher_classes`` when it was trained on a subset.
    """
    teacher_classes = tuple(teacher_classes or BASE_CLASSES[spec.base_dataset])
    if logits.shape[-1] != len(teacher_classes):
        raise ValueError(f"teacher emits {logits.shape[-1]} logits but {len(teacher_classes)} classes were declared")
    try:
        cols = [teacher_classes.index(c) for c in spec.classes]
    except ValueError:
        raise ValueError(f"subset {spec.name!r} has classes the teacher was not trained on") from None
    if cols == list(range(logits.shape[-1])):
        return logits
    return logits[..., cols]


# ---------------------------------------------------------------------------
# acquisition


def fetch_cifar(root: str | Path, base: str = "cifar10") -> Path:
    """Download and extract the official archive into ``root``."""
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    archive = root / Path(_URLS[base]).name
    if not archive.exists():
        urllib.request.urlretrieve(_URLS[base], archive)
    with tarfile.open(archive) as tar:
        tar.extractall(root)
    return root / _DIRS[base]


def _class_templates(rng: np.random.Generator, num_classes: int, size: int, separation: float) -> np.ndarray:
    shared = rng.normal(size=(1, 3, 8, 8))
    coarse = shared + separation * rng.normal(size=(num_classes, 3, 8, 8))
    reps = size // 8
    return np.kron(coarse, np.ones((1, 1, reps, reps)))


def write_synthetic_cifar(root: str | Path, base: str = "cifar10", train_per_class: int = 500,
                          test_per_class: int = 100, seed: int = 0, noise: float = 60.0,
                          contrast: float = 22.0, separation: float = 0.6, blank: bool = False) -> Path:
    """Write a CIFAR-format stand-in with learnable class structure.

    Each class gets a smooth colour template; images are shifted copies of the
    template plus Gaussian pixel noise. ``blank=True`` writes all-zero pixels,
    which is enough for tests that only count examples.
    """
    rng = np.random.default_rng(seed)
    names = BASE_CLASSES[base]
    k = len(names)
    templates = _class_templates(rng, k, 32, separation)

    def make(per_class: int) -> tuple[np.ndarray, list[int]]:
        labels = np.repeat(np.arange(k), per_class)
        rng.shuffle(labels)
        if blank:
            return np.zeros((len(labels), 3072), dtype=np.uint8), labels.tolist()
        shifts = rng.integers(-4, 5, size=(len(labels), 2))
        imgs = np.empty((len(labels), 3, 32, 32))
        for i, (lab, (dy, dx)) in enumerate(zip(labels, shifts)):
            imgs[i] = np.roll(templates[lab], (dy, dx), axis=(1, 2))
        imgs = 128 + contrast * imgs + rng.normal(scale=noise, size=imgs.shape)
        return np.clip(imgs, 0, 255).astype(np.uint8).reshape(len(labels), -1), labels.tolist()

    folder = Path(root) / _DIRS[base]
    folder.mkdir(parents=True, exist_ok=True)
    train, train_labels = make(train_per_class)
    test, test_labels = make(test_per_class)

    def dump(name: str, payload: dict) -> None:
        with open(folder / name, "wb") as fh:
            pickle.dump(payload, fh, protocol=pickle.HIGHEST_PROTOCOL)

    if base == "cifar10":
        for i, chunk in enumerate(np.array_split(np.arange(len(train_labels)), 5), start=1):
            dump(f"data_batch_{i}", {b"data": train[chunk], b"labels": [train_labels[j] for j in chunk]})
        dump("test_batch", {b"data": test, b"labels": test_labels})
        dump("batches.meta", {b"label_names": [n.encode() for n in names]})
    else:
        coarse_of = {c: i for i, group in enumerate(CIFAR100_SUPERCLASSES.values()) for c in group}
        for name, x, y in [("train", train, train_labels), ("test", test, test_labels)]:
            dump(name, {b"data": x, b"fine_labels": y,
                        b"coarse_labels": [coarse_of[names[v]] for v in y]})
        dump("meta", {b"fine_label_names": [n.encode() for n in names],
                      b"coarse_label_names": [n.encode() for n in CIFAR100_SUPERCLASSES]})
    _read_raw.cache_clear()
    channel_stats.cache_clear()
    return folder
