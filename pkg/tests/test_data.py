from __future__ import annotations

import numpy as np
import pytest
import torch

from ddc.data import (
    CIFAR10_CLASSES, CIFAR100_CLASSES, DatasetNotFoundError, SubsetSpec, builtin_subsets, full_subset,
    load_split, resolve_subset, restrict_teacher_logits, write_synthetic_cifar,
)


def test_builtin_subset_sizes():
    subsets = builtin_subsets()
    assert subsets["animals"].num_classes == 6
    assert subsets["vehicles10"].num_classes == 4
    for s in subsets.values():
        if s.base_dataset == "cifar100" and not s.name.endswith("_full"):
            assert s.num_classes == 5


def test_cifar100_fine_label_order():
    # indices from the official meta file
    assert len(CIFAR100_CLASSES) == 100
    assert CIFAR100_CLASSES[0] == "apple" and CIFAR100_CLASSES[99] == "worm"
    assert builtin_subsets()["trees"].class_ids == (47, 52, 56, 59, 96)


def test_animals_columns():
    spec = builtin_subsets()["animals"]
    assert spec.class_ids == (2, 3, 4, 5, 6, 7)
    row = torch.arange(10.0).unsqueeze(0)
    np.testing.assert_array_equal(restrict_teacher_logits(row, spec).numpy(), [[2, 3, 4, 5, 6, 7]])


def test_identity_restriction_and_errors():
    logits = torch.randn(3, 10)
    assert restrict_teacher_logits(logits, full_subset("cifar10")) is logits
    with pytest.raises(ValueError):
        restrict_teacher_logits(torch.randn(3, 9), full_subset("cifar10"))
    pair = SubsetSpec("cifar10", "pair", ("cat", "dog"))
    with pytest.raises(ValueError):
        restrict_teacher_logits(torch.randn(2, 2), pair, ("cat", "bird"))
    np.testing.assert_array_equal(
        restrict_teacher_logits(torch.tensor([[0.0, 1.0, 2.0]]), pair, ("dog", "bird", "cat")).numpy(), [[2.0, 0.0]])


def test_subset_validation():
    with pytest.raises(ValueError):
        SubsetSpec("cifar10", "bad", ("cat", "unicorn"))
    with pytest.raises(ValueError):
        SubsetSpec("cifar10", "dup", ("cat", "cat"))
    with pytest.raises(KeyError):
        resolve_subset("nonexistent")
    assert resolve_subset(None).num_classes == 10
    assert resolve_subset("x", classes=["ship", "cat"]).class_ids == (8, 3)


def test_missing_files_explain_how_to_fetch(tmp_path):
    with pytest.raises(DatasetNotFoundError, match="cifar-10-python.tar.gz"):
        load_split(full_subset("cifar10"), "train", tmp_path)


@pytest.fixture(scope="module")
def blank_root(tmp_path_factory):
    root = tmp_path_factory.mktemp("blank")
    write_synthetic_cifar(root, "cifar10", train_per_class=5000, test_per_class=1000, blank=True)
    return root


def test_full_counts(blank_root):
    train = load_split(full_subset("cifar10"), "train", blank_root)
    assert len(train) == 50_000
    assert train.input_shape == (3, 32, 32)
    assert torch.isfinite(train.images).all()
    del train
    assert len(load_split(builtin_subsets()["animals"], "test", blank_root)) == 6_000


def test_remapped_labels_and_shuffle(synthetic_root):
    spec = SubsetSpec("cifar10", "pair", ("truck", "airplane"))
    a = load_split(spec, "test", synthetic_root, shuffle_seed=1)
    b = load_split(spec, "test", synthetic_root, shuffle_seed=1)
    assert torch.equal(a.labels, b.labels)
    assert sorted(set(a.labels.tolist())) == [0, 1]
    assert (a.labels == 0).sum() == 100 and a.num_classes == 2
    with pytest.raises(ValueError):
        load_split(spec, "val", synthetic_root)


def test_synthetic_cifar100(tmp_path):
    write_synthetic_cifar(tmp_path, "cifar100", train_per_class=2, test_per_class=1, seed=0)
    split = load_split(builtin_subsets()["insects"], "train", tmp_path)
    assert len(split) == 10
    assert split.images.dtype == torch.float32


def test_normalization_uses_training_statistics(synthetic_root):
    train = load_split(full_subset("cifar10"), "train", synthetic_root)
    means = train.images.mean(dim=(0, 2, 3)).numpy()
    stds = train.images.std(dim=(0, 2, 3)).numpy()
    np.testing.assert_allclose(means, 0.0, atol=1e-3)
    np.testing.assert_allclose(stds, 1.0, atol=1e-2)
    assert len(CIFAR10_CLASSES) == 10
