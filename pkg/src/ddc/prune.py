"""First-order Taylor filter pruning.

Used both as the standalone pruning baseline (rank, prune, fine-tune, repeat)
and as an optional second stage that thins the filters of the best student
found by the layer-removal search.
"""
from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field, replace
from pathlib import Path

import torch
import torch.nn.functional as F

from .arch import ArchitectureSpec, LayerKind, count_parameters, trace_shapes
from .data import Split
from .distill import DistillConfig, evaluate_accuracy, measure_latency, train_student
from .model import ArchNet, build_model
from .reinforce import EvaluationRecord, make_record
from .reward import TeacherReference, Thresholds

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class FilterRank:
    layer_index: int
    filter_index: int
    score: float


@dataclass
class PruneReport:
    removed: list[tuple[int, int]] = field(default_factory=list)
    # (layer, filter, reason) for candidates passed over
    skipped: list[tuple[int, int, str]] = field(default_factory=list)
    parameters_before: int = 0
    parameters_after: int = 0


def unprunable_layers(arch: ArchitectureSpec) -> dict[int, str]:
    """Convolutions whose output width is pinned by a residual addition.

    The last convolution of a block is added to its shortcut, and the
    convolution feeding an identity block is added to that block's output,
    so both must keep their channel count.
    """
    tr = trace_shapes(arch)
    pinned = {}
    convs = arch.conv_positions
    for block in tr.blocks:
        pinned[block.end] = "ends a residual block"
        if block.identity:
            producers = [c for c in convs if c < block.start]
            if producers:
                pinned.setdefault(producers[-1], "feeds an identity shortcut")
    return pinned


def rank_filters(model: ArchNet, split: Split, batch_size: int = 128,
                 max_examples: int | None = None) -> list[FilterRank]:
    """Every convolution filter ordered by ascending Taylor importance.

    For each example the score of a filter is ``|mean over positions of
    activation * dLoss/dactivation|``; scores are averaged over examples and
    L2-normalized within each layer. Ties break on ``(layer, filter)``.
    """
    convs = model.conv_modules()
    if not convs:
        raise ValueError("model has no convolution layers to rank")
    n = len(split) if max_examples is None else min(len(split), max_examples)
    if n == 0:
        raise ValueError("ranking split is empty")
    outputs: dict[int, torch.Tensor] = {}

    def hook(idx):
        def fn(_module, _inp, out):
            out.retain_grad()
            outputs[idx] = out
        return fn

    handles = [m.register_forward_hook(hook(i)) for i, m in convs.items()]
    totals = {i: torch.zeros(m.out_channels, dtype=torch.float64) for i, m in convs.items()}
    was_training = model.training
    model.eval()
    try:
        for start in range(0, n, batch_size):
            x = split.images[start:min(n, start + batch_size)]
            y = split.labels[start:min(n, start + batch_size)]
            model.zero_grad()
            # summed loss keeps each example's gradient its own
            F.cross_entropy(model(x), y, reduction="sum").backward()
            for i, out in outputs.items():
                per_example = (out.detach() * out.grad).mean(dim=(2, 3)).abs()
                totals[i] += per_example.double().sum(0)
    finally:
        for h in handles:
            h.remove()
        model.zero_grad()
        model.train(was_training)
    ranks = []
    for i, total in totals.items():
        score = total / n
        norm = torch.linalg.vector_norm(score)
        if norm > 0:
            score = score / norm
        ranks.extend(FilterRank(i, f, float(s)) for f, s in enumerate(score))
    ranks.sort(key=lambda r: (r.score, r.layer_index, r.filter_index))
    return ranks


def _consumers(arch: ArchitectureSpec, position: int) -> tuple[int | None, list[int]]:
    """Next weighted layer reading ``position``'s output and any blocks whose
    shortcut also reads it."""
    nxt = None
    for j in range(position + 1, len(arch.layers)):
        if arch.layers[j].kind in (LayerKind.CONVOLUTION, LayerKind.LINEAR):
            nxt = j
            break
    tr = trace_shapes(arch)
    shortcut_blocks = [b.end for b in tr.blocks if not b.identity and position < b.start
                       and (nxt is None or b.start <= nxt)]
    return nxt, shortcut_blocks


def prune_filters(model: ArchNet, ranks: list[FilterRank], count: int) -> tuple[ArchNet, ArchitectureSpec, PruneReport]:
    """Remove the ``count`` lowest-ranked prunable filters.

    Every layer keeps at least one filter; a candidate that would empty its
    layer, or that sits in a layer pinned by a residual addition, is skipped
    and the next-ranked filter is taken instead. Downstream convolutions,
    projection shortcuts and the classifier lose the matching input channels.
    Returns the pruned model, its spec and a report.
    """
    arch = model.arch
    before = count_parameters(arch)
    report = PruneReport(parameters_before=before, parameters_after=before)
    if count < 0:
        raise ValueError("count must be >= 0")
    if count == 0:
        return model, arch, report
    pinned = unprunable_layers(arch)
    prunable = sum(arch.layers[i].out_channels - 1 for i in arch.conv_positions if i not in pinned)
    if count > prunable:
        raise ValueError(f"cannot remove {count} filters; only {prunable} are prunable")
    remaining = {i: arch.layers[i].out_channels for i in arch.conv_positions}
    drop: dict[int, set[int]] = {i: set() for i in arch.conv_positions}
    for r in ranks:
        if len(report.removed) == count:
            break
        if r.layer_index not in remaining or not 0 <= r.filter_index < arch.layers[r.layer_index].out_channels:
            raise ValueError(f"rank ({r.layer_index}, {r.filter_index}) is not a filter of this model")
        if r.layer_index in pinned:
            report.skipped.append((r.layer_index, r.filter_index, pinned[r.layer_index]))
            continue
        if remaining[r.layer_index] <= 1:
            report.skipped.append((r.layer_index, r.filter_index, "last filter of its layer"))
            continue
        drop[r.layer_index].add(r.filter_index)
        remaining[r.layer_index] -= 1
        report.removed.append((r.layer_index, r.filter_index))
    if len(report.removed) < count:
        raise ValueError(f"ranking covered only {len(report.removed)} prunable filters, {count} requested")

    layers = list(arch.layers)
    for i, n in remaining.items():
        layers[i] = replace(layers[i], out_channels=n)
    new_arch = replace(arch, layers=tuple(layers))
    new_model = build_model(new_arch)
    _transfer_weights(model, new_model, drop)
    report.parameters_after = count_parameters(new_arch)
    return new_model, new_arch, report


@torch.no_grad()
def _transfer_weights(old: ArchNet, new: ArchNet, drop: dict[int, set[int]]) -> None:
    arch = old.arch
    tr = trace_shapes(arch)
    keep_out = {i: [f for f in range(arch.layers[i].out_channels) if f not in drop[i]] for i in drop}
    # input-channel selection for every weighted layer, default all
    keep_in: dict[int, list[int] | None] = {}
    keep_sc: dict[str, list[int]] = {}
    for i in arch.conv_positions:
        if not drop[i]:
            continue
        nxt, blocks = _consumers(arch, i)
        if nxt is not None:
            if arch.layers[nxt].kind is LayerKind.CONVOLUTION:
                keep_in[nxt] = keep_out[i]
            else:
                h, w = tr.out_hw[nxt - 1]
                keep_in[nxt] = [c * h * w + k for c in keep_out[i] for k in range(h * w)]
        for end in blocks:
            keep_sc[str(end)] = keep_out[i]
    for i, (o, n) in enumerate(zip(old.layers, new.layers)):
        if not hasattr(o, "weight"):
            continue
        w, b = o.weight, o.bias
        if i in keep_out:
            w, b = w[keep_out[i]], b[keep_out[i]]
        if keep_in.get(i) is not None:
            w = w[:, keep_in[i]]
        n.weight.copy_(w)
        n.bias.copy_(b)
    for key, o in old.shortcuts.items():
        w = o.weight
        if key in keep_sc:
            w = w[:, keep_sc[key]]
        new.shortcuts[key].weight.copy_(w)
        new.shortcuts[key].bias.copy_(o.bias)


def prunable_filter_count(arch: ArchitectureSpec) -> int:
    pinned = unprunable_layers(arch)
    return sum(arch.layers[i].out_channels - 1 for i in arch.conv_positions if i not in pinned)


def _evaluate(model: ArchNet, test: Split, ref: TeacherReference, th: Thresholds, epochs: int,
              latency: dict, losses: list[float]) -> EvaluationRecord:
    acc = evaluate_accuracy(model, test)
    m = measure_latency(model, model.arch.input_shape, **latency)
    return make_record(None, acc, m.median_seconds, count_parameters(model.arch), ref, th, epochs,
                       loss_curve=losses, latency_detail={"median_seconds": m.median_seconds,
                                                          "samples": m.samples, "device": m.device_label})


def prune_baseline(teacher: ArchNet, train: Split, test: Split, iterations: int,
                   filters_per_iteration: int = 512, finetune_epochs: int = 10,
                   finetune: DistillConfig = DistillConfig(mode="hard_only"),
                   reference: TeacherReference | None = None, thresholds: Thresholds = Thresholds(),
                   ranking_examples: int | None = 1024, latency: dict | None = None, seed: int = 0,
                   out_dir: str | Path | None = None) -> tuple[list[EvaluationRecord], ArchNet]:
    """Repeated rank, prune, fine-tune rounds starting from the trained teacher.

    Record 0 scores the unpruned teacher; record ``k`` scores the model after
    round ``k``. When a round asks for more filters than remain prunable it
    removes all that can go. With ``out_dir`` the records are appended to
    ``out_dir/prune/rounds.jsonl``.
    """
    latency = dict(warmup=10, samples=50) if latency is None else dict(latency)
    latency.pop("device_label", None)
    cfg = replace(finetune, epochs=finetune_epochs, mode="hard_only")
    path = None
    if out_dir is not None:
        path = Path(out_dir) / "prune" / "rounds.jsonl"
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text("", encoding="utf-8")

    def emit(rec: EvaluationRecord, k: int):
        log.info("prune round %d: accuracy %.4f parameters %d", k, rec.accuracy, rec.parameters)
        if path is not None:
            with path.open("a", encoding="utf-8") as fh:
                fh.write(json.dumps({"round": k, **rec.to_dict()}) + "\n")

    model = teacher
    first = _evaluate(model, test, reference or TeacherReference(1.0, 1.0, 1), thresholds, 0, latency, [])
    if reference is None:
        reference = TeacherReference(max(first.accuracy, 1e-6), first.latency, first.parameters)
        first = make_record(None, first.accuracy, first.latency, first.parameters, reference, thresholds, 0,
                            latency_detail=first.latency_detail)
    records = [first]
    emit(first, 0)
    for k in range(1, iterations + 1):
        budget = min(filters_per_iteration, prunable_filter_count(model.arch))
        if budget < 1:
            log.warning("nothing left to prune after round %d", k - 1)
            break
        ranks = rank_filters(model, train, max_examples=ranking_examples)
        model, _, report = prune_filters(model, ranks, budget)
        model, losses = train_student(model.arch, None, train, cfg, seed=seed + k, model=model)
        rec = _evaluate(model, test, reference, thresholds, finetune_epochs, latency, losses)
        records.append(rec)
        emit(rec, k)
    return records, model

