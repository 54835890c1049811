"""Pretraining, frozen-encoder linear evaluation, transfer, and embedding.

Pretraining loop, per batch: augment every view independently, encode all
views in one batched forward, project pooled features globally, split the
encoded graph into subgraphs and project each pooled subgraph locally, take
the configured contrastive losses, combine them (learned uncertainty
weights or fixed linear weights), and apply one Nesterov-SGD step to every
parameter including the loss weights.

All randomness is derived from (seed, epoch, step, slot) tags, so a resumed
run replays the exact trajectory of an uninterrupted one; the rolling
checkpoint needs only parameters, optimizer buffers, and the epoch index.
"""

from __future__ import annotations

import hashlib
import json
import warnings
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np

from .augment import AugmentationConfig, SkeletonSequence, apply_augmentation
from .autodiff import (Tape, Tensor, concatenate, index_select, matmul,
                       reshape, take_flat, transpose)
from .dataio import DatasetManifest, SequenceStore, Split, resample_to_length
from .errors import ContractViolation, NumericError
from .graph import spatial_groups, temporal_blocks
from .losses import (GlobalBatch, LocalBatch, LossReport,
                     combine_uncertainty_terms, global_loss, local_loss)
from .model import (EncoderConfig, EncoderState, checkpoint_read,
                    checkpoint_write, encode_batch, encoder_entries,
                    encoder_from_entries, init_encoder_state, pool_batch,
                    project)
from .optim import LrSchedule, OptimizerState, lr_at_epoch, sgd_nesterov_step
from .rng import SplitMix64

LOSS_TERMS = ("global", "temporal", "spatial")

METRICS_HEADER = "epoch,lr,global_loss,local_loss,combined_loss,weight_global,weight_local"


@dataclass(frozen=True)
class PretrainConfig:
    epochs: int = 40
    batch_size: int = 16
    lr_schedule: LrSchedule = LrSchedule(0.1, (20, 30, 35), 10.0)
    momentum: float = 0.9
    tau: float = 0.07
    num_subgraphs: int = 5
    num_views: int = 2
    mode: str = "multi_view"
    loss_terms: tuple[str, ...] = ("global", "temporal")
    local_mode: str = "literal"
    combine: str = "uncertainty"
    augmentation: AugmentationConfig = field(default_factory=AugmentationConfig)
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    proj_hidden: int = 256
    proj_dim: int = 512
    alpha: float = 0.001
    seed: int = 0

    def __post_init__(self):
        if self.mode not in ("multi_view", "single_view"):
            raise ContractViolation(f"unknown mode {self.mode!r}")
        if self.mode == "multi_view" and self.num_views != 2:
            raise ContractViolation("multi_view pretraining pairs exactly 2 views")
        if self.batch_size < 2:
            raise ContractViolation("contrastive batches need at least 2 samples")
        if not self.loss_terms:
            raise ContractViolation("at least one loss term required")
        for term in self.loss_terms:
            if term not in LOSS_TERMS:
                raise ContractViolation(f"unknown loss term {term!r}")
        if self.combine not in ("uncertainty", "linear"):
            raise ContractViolation(f"unknown combine mode {self.combine!r}")
        if self.tau <= 0:
            raise ContractViolation("temperature must be positive")


@dataclass(frozen=True)
class LinearEvalConfig:
    epochs: int = 45
    batch_size: int = 16
    lr_schedule: LrSchedule = LrSchedule(0.1, (25, 35, 40), 10.0)
    momentum: float = 0.9
    seed: int = 0


@dataclass
class EvalResult:
    top1: float
    per_class: dict[str, float]
    num_test: int
    test_untouched_during_training: bool = True
    classifier_w: np.ndarray | None = None
    classifier_b: np.ndarray | None = None


@dataclass
class TrainingSet:
    """The sequences pretraining may see: sample ids and usable views."""

    manifest: DatasetManifest
    store: SequenceStore
    sample_ids: list[str]
    views_per_sample: dict[str, list[int]]

    @classmethod
    def from_split(cls, manifest: DatasetManifest, store: SequenceStore,
                   split: Split) -> "TrainingSet":
        ids = sorted(split.train_views_per_sample)
        return cls(manifest=manifest, store=store, sample_ids=ids,
                   views_per_sample={k: list(v)
                                     for k, v in split.train_views_per_sample.items()})

    @classmethod
    def whole_dataset(cls, manifest: DatasetManifest, store: SequenceStore) -> "TrainingSet":
        ids = [rec.sample_id for rec in manifest.samples]
        views = {sid: list(range(manifest.num_views)) for sid in ids}
        return cls(manifest=manifest, store=store, sample_ids=ids,
                   views_per_sample=views)


def config_digest(config) -> str:
    """Stable hex digest of a dataclass config (canonical JSON)."""
    doc = json.dumps(asdict(config), sort_keys=True, default=str)
    return hashlib.sha256(doc.encode("utf-8")).hexdigest()


# ---------------------------------------------------------------------------
# pretraining
# ---------------------------------------------------------------------------

def _build_instances(dataset: TrainingSet, config: PretrainConfig):
    """MV: one instance per sample (2 physical views).
    SV: one instance per (sample, view); the 2 logical views are 2 augmentations."""
    if config.mode == "multi_view":
        for sid in dataset.sample_ids:
            if len(dataset.views_per_sample[sid]) < config.num_views:
                raise ContractViolation(
                    f"multi_view pretraining needs {config.num_views} views per sample; "
                    f"sample {sid!r} has {len(dataset.views_per_sample[sid])}")
        return [(sid, None) for sid in dataset.sample_ids]
    return [(sid, v) for sid in dataset.sample_ids
            for v in dataset.views_per_sample[sid]]


def _fetch_views(dataset: TrainingSet, instance, config: PretrainConfig,
                 rng: SplitMix64):
    """Physical sequences for one instance's logical views."""
    sid, fixed_view = instance
    if config.mode == "multi_view":
        avail = dataset.views_per_sample[sid]
        if len(avail) == config.num_views:
            chosen = list(avail)
        else:
            picks = rng.choice_without_replacement(len(avail), config.num_views)
            chosen = [avail[p] for p in picks]
        return [dataset.store.get(sid, v) for v in chosen]
    seq = dataset.store.get(sid, fixed_view)
    return [seq, seq]


def _logical_views(config: PretrainConfig) -> int:
    return config.num_views if config.mode == "multi_view" else 2


def _local_representations(h: Tensor, state: EncoderState, axis: str,
                           num_subgraphs: int, n: int, v: int) -> Tensor:
    """Pool + project each subgraph; returns (N, S, V, D) in canonical order."""
    if axis == "temporal":
        blocks = temporal_blocks(h.shape[1], num_subgraphs)
        pooled = [h[:, a:b].mean(axis=(1, 2)) for a, b in blocks]
    else:
        groups = spatial_groups(state.topology, num_subgraphs)
        pooled = [index_select(h, 2, grp).mean(axis=(1, 2)) for grp in groups]
    stacked = concatenate(pooled, axis=0)              # (S*B, C), s-major
    rows = project(state.head_local, stacked)          # (S*B, D)
    s = len(pooled)
    d = rows.shape[1]
    cube = reshape(rows, (s, n, v, d))
    return transpose(cube, (1, 0, 2, 3))               # (N, S, V, D)


def _batch_forward(state: EncoderState, config: PretrainConfig, x: Tensor,
                   n: int, v: int):
    """One batched forward; returns (loss tensor, per-term floats, weights)."""
    h = encode_batch(x, state)
    values: dict[str, Tensor] = {}
    if "global" in config.loss_terms:
        pooled = pool_batch(h)
        g_rows = project(state.head_global, pooled)
        g = reshape(g_rows, (n, v, g_rows.shape[1]))
        values["global"] = global_loss(GlobalBatch(g, tau=config.tau))
    if "temporal" in config.loss_terms:
        l = _local_representations(h, state, "temporal", config.num_subgraphs, n, v)
        values["temporal"] = local_loss(LocalBatch(l, tau=config.tau),
                                        mode=config.local_mode)
    if "spatial" in config.loss_terms:
        s_count = len(state.topology.body_part_groups) or config.num_subgraphs
        l = _local_representations(h, state, "spatial", s_count, n, v)
        values["spatial"] = local_loss(LocalBatch(l, tau=config.tau),
                                       mode=config.local_mode)

    if config.combine == "uncertainty":
        combined = combine_uncertainty_terms(values, state.log_sigma_sq)
        weights = {t: float(np.exp(-state.log_sigma_sq[t].item()))
                   for t in values}
    else:
        combined = None
        for t in values:
            combined = values[t] if combined is None else combined + values[t]
        weights = {t: 1.0 for t in values}
    return combined, values, weights


def _make_report(values: dict[str, Tensor], combined: Tensor,
                 weights: dict[str, float]) -> LossReport:
    local_total = sum(values[t].item() for t in ("temporal", "spatial") if t in values)
    local_weight = weights.get("temporal", weights.get("spatial", 0.0))
    return LossReport(
        global_loss=values["global"].item() if "global" in values else 0.0,
        local_loss=local_total,
        combined_loss=combined.item(),
        weight_global=weights.get("global", 0.0),
        weight_local=local_weight,
    )


def _loss_term_names(config: PretrainConfig) -> tuple[str, ...]:
    return tuple(t for t in LOSS_TERMS if t in config.loss_terms)


def _train_checkpoint_entries(state: EncoderState, opt: OptimizerState,
                              epoch_done: int, digest: str) -> dict[str, np.ndarray]:
    entries = encoder_entries(state)
    names = list(state.named_parameters())
    for name, buf in zip(names, opt.buffers):
        entries[f"opt/{name}"] = buf
    entries["meta/epoch_completed"] = np.array(float(epoch_done))
    entries["meta/config_digest"] = np.frombuffer(
        bytes.fromhex(digest), dtype=np.uint8).astype(np.float64)
    return entries


def metrics_line(epoch: int, lr: float, report: LossReport) -> str:
    vals = [report.global_loss, report.local_loss, report.combined_loss,
            report.weight_global, report.weight_local]
    return ",".join([str(epoch), repr(float(lr))] + [repr(float(v)) for v in vals])


def pretrain(dataset: TrainingSet, config: PretrainConfig,
             out_dir=None, resume: bool = False,
             on_epoch=None) -> tuple[EncoderState, list[LossReport]]:
    """Contrastive pretraining; returns the encoder with heads discarded."""
    master = SplitMix64(config.seed)
    digest = config_digest(config)
    manifest = dataset.manifest
    target_len = config.augmentation.target_len

    state = init_encoder_state(
        config.encoder, manifest.topology, master.derive("init"),
        alpha=config.alpha, proj_hidden=config.proj_hidden,
        proj_out=config.proj_dim, loss_terms=_loss_term_names(config))
    params = state.named_parameters()
    param_list = list(params.values())
    opt = OptimizerState.for_params(param_list, momentum=config.momentum)
    start_epoch = 0

    out_path = Path(out_dir) if out_dir is not None else None
    metrics_path = out_path / "metrics.csv" if out_path else None
    if out_path:
        out_path.mkdir(parents=True, exist_ok=True)

    if resume:
        last = out_path / "last.stgc" if out_path else None
        if last is None or not last.exists():
            raise ContractViolation("resume requested but no rolling checkpoint found")
        entries = checkpoint_read(last)
        stored = bytes(entries["meta/config_digest"].astype(np.uint8)).hex()
        if stored != digest:
            raise ContractViolation("rolling checkpoint was produced by a different config")
        state = encoder_from_entries(entries)
        params = state.named_parameters()
        param_list = list(params.values())
        opt = OptimizerState.for_params(param_list, momentum=config.momentum)
        for i, name in enumerate(params):
            opt.buffers[i][...] = entries[f"opt/{name}"]
        start_epoch = int(entries["meta/epoch_completed"]) + 1
    elif metrics_path and metrics_path.exists():
        metrics_path.unlink()

    instances = _build_instances(dataset, config)
    v_logical = _logical_views(config)
    n = config.batch_size
    steps = len(instances) // n
    if steps == 0:
        raise ContractViolation(
            f"dataset provides {len(instances)} instances; batch size {n} "
            "never fills a single batch")

    reports: list[LossReport] = []
    for epoch in range(start_epoch, config.epochs):
        lr = lr_at_epoch(config.lr_schedule, epoch)
        order = master.derive("shuffle", epoch).permutation(len(instances))
        epoch_reports: list[LossReport] = []
        for step in range(steps):
            batch = [instances[order[step * n + slot]] for slot in range(n)]
            rows = []
            for slot, instance in enumerate(batch):
                pick_rng = master.derive("viewpick", epoch, step, slot)
                seqs = _fetch_views(dataset, instance, config, pick_rng)
                for view_slot, coords in enumerate(seqs):
                    coords = resample_to_length(coords, target_len)
                    seq = SkeletonSequence(coords=Tensor(coords),
                                           topology=manifest.topology)
                    arng = master.derive("aug", epoch, step, slot, view_slot)
                    seq = apply_augmentation(seq, config.augmentation, arng)
                    rows.append(seq.coords.data)
            x = Tensor(np.stack(rows))
            with Tape() as tape:
                combined, values, weights = _batch_forward(state, config, x,
                                                           n, v_logical)
                if not np.isfinite(combined.item()):
                    raise NumericError("pretrain", f"loss diverged at epoch {epoch}")
                grads = tape.backward(combined)
            grad_list = [grads[p].data if p in grads else np.zeros(p.shape)
                         for p in param_list]
            sgd_nesterov_step(param_list, grad_list, opt, lr)
            epoch_reports.append(_make_report(values, combined, weights))

        mean_report = LossReport(
            global_loss=float(np.mean([r.global_loss for r in epoch_reports])),
            local_loss=float(np.mean([r.local_loss for r in epoch_reports])),
            combined_loss=float(np.mean([r.combined_loss for r in epoch_reports])),
            weight_global=epoch_reports[-1].weight_global,
            weight_local=epoch_reports[-1].weight_local,
        )
        reports.append(mean_report)
        if metrics_path:
            new_file = not metrics_path.exists()
            with open(metrics_path, "a", encoding="utf-8") as fh:
                if new_file:
                    fh.write(METRICS_HEADER + "\n")
                fh.write(metrics_line(epoch, lr, mean_report) + "\n")
        if out_path:
            checkpoint_write(out_path / "last.stgc",
                             _train_checkpoint_entries(state, opt, epoch, digest))
        if on_epoch:
            on_epoch(epoch, lr, mean_report)

    return state.without_heads(), reports


# ---------------------------------------------------------------------------
# embedding and linear evaluation
# ---------------------------------------------------------------------------

def embed_arrays(encoder: EncoderState, arrays: list[np.ndarray],
                 chunk: int = 32) -> np.ndarray:
    """Representation rows (one per input sequence); deterministic, no augmentation."""
    outputs = []
    for start in range(0, len(arrays), chunk):
        block = np.stack(arrays[start:start + chunk])
        h = encode_batch(Tensor(block), encoder)
        outputs.append(pool_batch(h).data)
    if not outputs:
        return np.zeros((0, encoder.config.output_dim))
    return np.concatenate(outputs, axis=0)


def embed(encoder: EncoderState, sequences) -> np.ndarray:
    """Embed SkeletonSequences (or raw (T, M, 3) arrays), preserving order."""
    arrays = [s.coords.data if isinstance(s, SkeletonSequence) else np.asarray(s)
              for s in sequences]
    return embed_arrays(encoder, arrays)


def embed_pairs(encoder: EncoderState, manifest: DatasetManifest,
                store: SequenceStore, pairs, target_len: int = 100) -> np.ndarray:
    arrays = [resample_to_length(store.get(sid, view), target_len)
              for sid, view in pairs]
    return embed_arrays(encoder, arrays)


def _softmax_logits(h: np.ndarray, w: Tensor, b: Tensor) -> Tensor:
    return matmul(Tensor(h), w) + b


def _cross_entropy(logits: Tensor, labels: np.ndarray) -> Tensor:
    rows, classes = logits.shape
    shift = logits.data.max(axis=1, keepdims=True)
    lse = (logits - Tensor(shift)).exp().sum(axis=1).log() + Tensor(shift[:, 0])
    flat_idx = np.arange(rows) * classes + labels
    true_logit = take_flat(reshape(logits, (rows * classes,)), flat_idx)
    return (lse - true_logit).mean()


def train_linear_classifier(features: np.ndarray, labels: np.ndarray,
                            num_classes: int, config: LinearEvalConfig
                            ) -> tuple[np.ndarray, np.ndarray]:
    """Softmax regression trained with the evaluation schedule."""
    dim = features.shape[1]
    w = Tensor(np.zeros((dim, num_classes)), requires_grad=True)
    b = Tensor(np.zeros(num_classes), requires_grad=True)
    opt = OptimizerState.for_params([w, b], momentum=config.momentum)
    rng = SplitMix64(config.seed)
    n = len(labels)
    for epoch in range(config.epochs):
        lr = lr_at_epoch(config.lr_schedule, epoch)
        order = rng.derive("shuffle", epoch).permutation(n)
        for start in range(0, n, config.batch_size):
            idx = order[start:start + config.batch_size]
            with Tape() as tape:
                loss = _cross_entropy(_softmax_logits(features[idx], w, b),
                                      labels[idx])
                grads = tape.backward(loss)
            grad_list = [grads[p].data if p in grads else np.zeros(p.shape)
                         for p in (w, b)]
            sgd_nesterov_step([w, b], grad_list, opt, lr)
    return w.data, b.data


def linear_eval(encoder: EncoderState, manifest: DatasetManifest,
                store: SequenceStore, split: Split,
                config: LinearEvalConfig, target_len: int = 100) -> EvalResult:
    """Train a linear probe on frozen-encoder features; report test Top-1."""
    param_snapshot = [p.data.copy() for p in encoder.named_parameters().values()]

    labels_by_id = {rec.sample_id: rec.label for rec in manifest.samples}
    train_pairs = list(split.train_pairs)
    test_pairs = list(split.test_pairs)
    y_train = np.array([labels_by_id[sid] for sid, _ in train_pairs])
    y_test = np.array([labels_by_id[sid] for sid, _ in test_pairs])

    missing = set(range(len(manifest.class_names))) - set(y_train.tolist())
    if missing:
        names = [manifest.class_names[c] for c in sorted(missing)]
        warnings.warn(f"classes absent from the training split: {names}")

    h_train = embed_pairs(encoder, manifest, store, train_pairs, target_len)
    test_counts_before = {pair: store.access_counts.get(pair, 0)
                          for pair in test_pairs}
    w, b = train_linear_classifier(h_train, y_train, len(manifest.class_names),
                                   config)
    untouched = all(store.access_counts.get(pair, 0) == count
                    for pair, count in test_counts_before.items())

    h_test = embed_pairs(encoder, manifest, store, test_pairs, target_len)
    logits = h_test @ w + b
    predictions = logits.argmax(axis=1)
    correct = predictions == y_test
    top1 = float(correct.mean()) if len(correct) else 0.0

    per_class = {}
    for c, name in enumerate(manifest.class_names):
        mask = y_test == c
        if mask.any():
            per_class[name] = float(correct[mask].mean())

    for before, p in zip(param_snapshot, encoder.named_parameters().values()):
        if before.tobytes() != p.data.tobytes():
            raise ContractViolation("linear evaluation mutated encoder parameters")

    return EvalResult(top1=top1, per_class=per_class, num_test=len(test_pairs),
                      test_untouched_during_training=untouched,
                      classifier_w=w, classifier_b=b)


def random_encoder(manifest: DatasetManifest, config: PretrainConfig) -> EncoderState:
    """Freshly initialized encoder, never trained (baseline arm)."""
    master = SplitMix64(config.seed)
    state = init_encoder_state(config.encoder, manifest.topology,
                               master.derive("init"), alpha=config.alpha,
                               proj_hidden=config.proj_hidden,
                               proj_out=config.proj_dim,
                               loss_terms=_loss_term_names(config))
    return state.without_heads()


def transfer_eval(source: tuple[DatasetManifest, SequenceStore],
                  target: tuple[DatasetManifest, SequenceStore],
                  pretrain_config: PretrainConfig, eval_config: LinearEvalConfig,
                  source_split: Split, target_split: Split,
                  out_dir=None) -> EvalResult:
    """Pretrain on the source dataset, linearly evaluate on the target."""
    src_manifest, src_store = source
    tgt_manifest, tgt_store = target
    if src_manifest.num_joints != tgt_manifest.num_joints:
        raise ContractViolation(
            f"joint count mismatch: source {src_manifest.num_joints}, "
            f"target {tgt_manifest.num_joints}")
    train_set = TrainingSet.from_split(src_manifest, src_store, source_split)
    encoder, _ = pretrain(train_set, pretrain_config, out_dir=out_dir)
    return linear_eval(encoder, tgt_manifest, tgt_store, target_split, eval_config)
