from __future__ import annotations

import json

import numpy as np
import pytest
import torch

from ddc.arch import assemble, conv, count_parameters, desk_residual, desk_sequential, flatten, maxpool
from ddc.data import SubsetSpec, load_split
from ddc.distill import DistillConfig, evaluate_accuracy, train_student
from ddc.model import build_model, parameter_count
from ddc.prune import (
    FilterRank, prunable_filter_count, prune_baseline, prune_filters, rank_filters, unprunable_layers,
)


def toy_arch():
    return assemble([conv(16), maxpool(4), conv(16), maxpool(8), flatten()], 2)


@pytest.fixture(scope="module")
def pair(synthetic_root):
    spec = SubsetSpec("cifar10", "pair", ("airplane", "automobile"))
    return load_split(spec, "train", synthetic_root, shuffle_seed=0), load_split(spec, "test", synthetic_root)


def test_pinned_layers_of_residual_teacher():
    arch = desk_residual()
    pinned = unprunable_layers(arch)
    # identity block 1-2 pins its producer 0 and its end 2; the projection block pins only its end
    assert sorted(pinned) == [0, 2, 5]
    assert unprunable_layers(desk_sequential()) == {}
    assert prunable_filter_count(arch) == 15 + 31


def test_dead_filter_scores_zero_and_ranks_first(pair):
    train, _ = pair
    model = build_model(toy_arch(), seed=0)
    with torch.no_grad():
        model.layers[2].weight[:, 5].zero_()
    ranks = rank_filters(model, train, max_examples=64)
    assert ranks[0] == FilterRank(0, 5, 0.0)
    assert all(r.score > 0 for r in ranks[1:])


def test_duplicate_filters_tie_and_break_by_index(pair):
    train, _ = pair
    model = build_model(toy_arch(), seed=1)
    with torch.no_grad():
        conv0, conv1 = model.layers[0], model.layers[2]
        conv0.weight[9] = conv0.weight[3]
        conv0.bias[9] = conv0.bias[3]
        conv1.weight[:, 9] = conv1.weight[:, 3]
    ranks = rank_filters(model, train, max_examples=64)
    pos = {(r.layer_index, r.filter_index): k for k, r in enumerate(ranks)}
    a, b = ranks[pos[(0, 3)]], ranks[pos[(0, 9)]]
    assert a.score == pytest.approx(b.score, rel=1e-9)
    assert pos[(0, 3)] < pos[(0, 9)]


def test_ranking_deterministic(pair):
    train, _ = pair
    model = build_model(toy_arch(), seed=2)
    assert rank_filters(model, train, max_examples=100) == rank_filters(model, train, max_examples=100)


def test_scores_normalized_per_layer(pair):
    train, _ = pair
    ranks = rank_filters(build_model(toy_arch(), seed=3), train, max_examples=50)
    for layer in (0, 2):
        s = np.array([r.score for r in ranks if r.layer_index == layer])
        assert np.linalg.norm(s) == pytest.approx(1.0)


def test_count_zero_is_noop(pair):
    model = build_model(toy_arch(), seed=0)
    new, arch, report = prune_filters(model, [], 0)
    assert new is model and arch == model.arch and report.removed == []


def test_single_filter_parameter_delta():
    model = build_model(toy_arch(), seed=0)
    k, c_in, n_down = 3, 3, 16
    new, arch, report = prune_filters(model, [FilterRank(0, 7, 0.0)], 1)
    assert arch.layers[0].out_channels == 15
    assert report.parameters_before - report.parameters_after == k * k * c_in + 1 + k * k * n_down
    assert count_parameters(arch) == parameter_count(new) == report.parameters_after


def test_removing_dead_filter_keeps_outputs(pair):
    train, _ = pair
    model = build_model(desk_sequential(), seed=0)
    with torch.no_grad():
        model.layers[1].weight[:, 4].zero_()
    new, _, _ = prune_filters(model, [FilterRank(0, 4, 0.0)], 1)
    x = train.images[:16]
    torch.testing.assert_close(new(x), model(x), rtol=0, atol=1e-6)


def test_last_filter_and_pinned_layers_are_skipped():
    arch = assemble([conv(2), conv(4), maxpool(32), flatten()], 2)
    model = build_model(arch, seed=0)
    ranks = [FilterRank(0, 0, 0.0), FilterRank(0, 1, 0.1), FilterRank(1, 2, 0.2), FilterRank(1, 0, 0.3)]
    _, new_arch, report = prune_filters(model, ranks, 2)
    assert report.removed == [(0, 0), (1, 2)]
    assert report.skipped == [(0, 1, "last filter of its layer")]
    assert [new_arch.layers[i].out_channels for i in (0, 1)] == [1, 3]
    with pytest.raises(ValueError):
        prune_filters(model, ranks, prunable_filter_count(arch) + 1)

    res = build_model(desk_residual(), seed=0)
    ranks = [FilterRank(2, 0, 0.0), FilterRank(4, 0, 0.1)]
    _, _, report = prune_filters(res, ranks, 1)
    assert report.skipped[0][:2] == (2, 0) and report.removed == [(4, 0)]
    with pytest.raises(ValueError):
        prune_filters(res, [FilterRank(3, 0, 0.0)], 1)


def test_residual_pruning_stays_consistent(pair):
    train, _ = pair
    model = build_model(desk_residual(), seed=0)
    ranks = rank_filters(model, train, max_examples=64)
    new, arch, report = prune_filters(model, ranks, 20)
    assert len(report.removed) == 20
    assert count_parameters(arch) == parameter_count(new)
    assert new(train.images[:4]).shape == (4, 2)


def test_bottom_ranked_filters_matter_less(pair):
    train, test = pair
    cfg = DistillConfig(epochs=4, learning_rate=0.01, batch_size=32, mode="hard_only")
    gaps = []
    for seed in range(3):
        model, _ = train_student(toy_arch(), None, train, cfg, seed=seed)
        ranks = rank_filters(model, train, max_examples=256)
        count = len(ranks) // 10
        low, _, _ = prune_filters(model, ranks, count)
        high, _, _ = prune_filters(model, list(reversed(ranks)), count)
        gaps.append(evaluate_accuracy(low, test) - evaluate_accuracy(high, test))
    assert np.mean(gaps) > 0


def test_zero_rounds_records_teacher_only(pair, tmp_path):
    train, test = pair
    model = build_model(toy_arch(), seed=0)
    records, out = prune_baseline(model, train, test, 0, latency=dict(warmup=1, samples=5), out_dir=tmp_path)
    assert len(records) == 1 and out is model
    lines = (tmp_path / "prune" / "rounds.jsonl").read_text().splitlines()
    assert [json.loads(l)["round"] for l in lines] == [0]
