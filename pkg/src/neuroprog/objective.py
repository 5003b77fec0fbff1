"""Composite adversarial objective and training loops.

The total objective for the predictor parameters (a, f, g) is

    l_endpoint - mu * l_bias + lam * h_entropy

while the domain head h simultaneously minimizes l_bias.  A single
backward pass implements this min-max: the cross-entropy branch reaches h
through a gradient-reversal node, so h descends l_bias while f receives
the sign-flipped, mu-scaled gradient.  The entropy regularizer is computed
on a second, non-reversed pass through h so that both f and h are pushed
toward uniform domain predictions.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from . import nn
from . import tensor as T
from .errors import ContractError, DataError
from .nn import NetworkConfig
from .optim import SAM
from .tensor import Tensor, backward, custom_op


@dataclass
class TrainConfig:
    network: NetworkConfig = field(default_factory=NetworkConfig)
    lr: float = 3e-3
    optimizer: str = "adam"
    momentum: float = 0.9
    weight_decay: float = 0.0
    sam_rho: float = 0.0
    mu: float = 0.1
    lam: float = 8.0
    batch_size: int = 8
    epochs: int = 30
    seed: int = 0
    entropy_to_f: bool = True
    # learning-rate multiplier for the domain head h. The min-max gradient
    # only drives f toward domain-invariant features while h stays close
    # to the optimal discriminator; with a shared rate, f outruns h and
    # "wins" by flipping the features instead of scrubbing them, so h
    # needs a faster clock.
    domain_lr_scale: float = 10.0
    # per-epoch multiplicative decay for the adversarial (fast) group only;
    # without annealing the game hovers at the fast step-size noise floor
    # instead of converging.
    adv_lr_decay: float = 0.93
    # linear ramp of mu and lambda over the first epochs: let the endpoint
    # features form before the adversary starts dismantling the bias, so
    # unlearning subtracts the offset direction instead of churning
    # features that are still moving.
    adv_warmup_epochs: int = 5


@dataclass
class BatchLabels:
    """Targets for one mini-batch: endpoint changes, their observation
    mask, and integer domain labels."""

    y_endpoint: np.ndarray
    mask: np.ndarray
    y_bias: np.ndarray

    def __post_init__(self):
        self.y_endpoint = np.asarray(self.y_endpoint, dtype=np.float64)
        self.mask = np.asarray(self.mask, dtype=bool)
        self.y_bias = np.asarray(self.y_bias, dtype=np.int64)
        if self.y_endpoint.shape != self.mask.shape:
            raise ContractError(
                f"target shape {self.y_endpoint.shape} != mask shape "
                f"{self.mask.shape}")
        if self.y_bias.shape != (self.y_endpoint.shape[0],):
            raise ContractError(
                f"domain labels shape {self.y_bias.shape} != "
                f"({self.y_endpoint.shape[0]},)")


@dataclass
class LossBreakdown:
    l_endpoint: float
    l_bias: float
    h_entropy: float
    total: float
    per_task: tuple
    all_masked: bool = False


@dataclass
class Batch:
    mri: np.ndarray | None
    clin: np.ndarray | None
    labels: BatchLabels
    batch_id: int = 0


@dataclass
class TrainData:
    """Flat sample-level arrays ready for batching."""

    mri: np.ndarray | None
    clin: np.ndarray | None
    y_endpoint: np.ndarray
    mask: np.ndarray
    y_bias: np.ndarray
    ids: np.ndarray | None = None

    def __len__(self):
        return self.y_endpoint.shape[0]

    def batch(self, idx, batch_id=0):
        labels = BatchLabels(self.y_endpoint[idx], self.mask[idx],
                             self.y_bias[idx])
        return Batch(None if self.mri is None else self.mri[idx],
                     None if self.clin is None else self.clin[idx],
                     labels, batch_id)


def endpoint_loss_masked(pred, labels):
    """MSE over unmasked entries, averaged per task then across the tasks
    that have at least one observation. All-masked batches give a constant
    zero (zero gradient everywhere)."""
    mask = labels.mask
    if pred.shape != mask.shape:
        raise ContractError(
            f"prediction shape {pred.shape} != mask shape {mask.shape}")
    counts = mask.sum(axis=0)
    present = counts > 0
    if not present.any():
        return Tensor(0.0)
    # Weight matrix folds the per-task mean and the across-task mean into
    # one weighted sum; masked cells get exactly zero weight.
    weights = np.zeros(mask.shape, dtype=np.float64)
    for j in np.flatnonzero(present):
        weights[mask[:, j], j] = 1.0 / (counts[j] * present.sum())
    target = np.where(mask, labels.y_endpoint, 0.0)
    diff = T.mul(T.add(pred, Tensor(-target)),
                 Tensor(mask.astype(np.float64)))
    return T.tsum(T.mul(T.mul(diff, diff), Tensor(weights)))


def per_task_losses(pred_data, labels):
    """Per-task masked MSE as plain floats (NaN where a task is unobserved)."""
    out = []
    for j in range(labels.mask.shape[1]):
        m = labels.mask[:, j]
        if not m.any():
            out.append(float("nan"))
            continue
        d = pred_data[m, j] - labels.y_endpoint[m, j]
        out.append(float(np.mean(d * d)))
    return tuple(out)


def bias_loss(logits, y_bias):
    """Mean cross-entropy of softmax(logits) against domain labels."""
    y = np.asarray(y_bias, dtype=np.int64)
    b, k = logits.shape
    if y.min() < 0 or y.max() >= k:
        raise DataError(
            f"domain labels must lie in [0, {k}), got range "
            f"[{y.min()}, {y.max()}]")
    onehot = np.zeros((b, k), dtype=np.float64)
    onehot[np.arange(b), y] = 1.0
    logp = T.log(T.softmax(logits))
    return T.mul(Tensor(-1.0 / b), T.tsum(T.mul(logp, Tensor(onehot))))


def _plogp(p):
    data = p.data
    out = np.where(data > 0.0, data * np.log(np.where(data > 0.0, data, 1.0)),
                   0.0)
    def bwd(go):
        return (go * np.where(data > 0.0,
                              np.log(np.where(data > 0.0, data, 1.0)) + 1.0,
                              0.0),)
    return custom_op("plogp", (p,), out, bwd)


def entropy_regularizer(probs):
    """Mean over the batch of sum_k p_k log p_k (the paper's sign: minimum
    -log K at uniform, maximum 0 at one-hot), with 0*log 0 := 0."""
    sums = probs.data.sum(axis=1)
    if np.abs(sums - 1.0).max() > 1e-6:
        raise ContractError("entropy_regularizer rows must sum to 1")
    b = probs.shape[0]
    return T.mul(Tensor(1.0 / b), T.tsum(_plogp(probs)))


class _FrozenPartition:
    """Read-only view of ModelParams with one partition's weights detached,
    so a forward pass through it contributes no gradient to those weights."""

    def __init__(self, params, frozen):
        self._params = params
        self._frozen = frozen

    def get(self, partition, name):
        t = self._params.get(partition, name)
        return t.detach() if partition == self._frozen else t

    def buf(self, partition, name):
        return self._params.buf(partition, name)


def composite_forward(batch, params, config, mode="train"):
    """Run the full model on one batch and assemble the training loss.

    Returns (LossBreakdown, root) where `root` is the scalar Tensor whose
    backward pass realizes the min-max update for every partition.
    """
    cfg = config.network
    labels = batch.labels

    feats = emb = None
    if cfg.use_imaging:
        feats = nn.feature_extractor_forward(
            Tensor(batch.mri), params, cfg, mode)
    if cfg.use_clinical:
        emb = nn.clinical_encoder_forward(Tensor(batch.clin), params, cfg)
    if feats is not None and emb is not None:
        fused = nn.fuse(feats, emb, cfg.fusion)
    elif feats is not None:
        fused = feats
    elif emb is not None:
        b, c = emb.shape
        fused = T.reshape(emb, (b, c, 1, 1, 1))
    else:
        raise ContractError("at least one modality must be enabled")

    pred = nn.endpoint_head_forward(fused, params, cfg, mode)
    l_end = endpoint_loss_masked(pred, labels)
    all_masked = not labels.mask.any()
    root = l_end

    # mu == 0 disables the whole adversarial branch so the model is a
    # plain multi-task regressor with h untouched.
    l_bias_val = entropy_val = 0.0
    if cfg.use_domain_head and feats is not None and config.mu > 0:
        reversed_feats = nn.gradient_reversal(feats, config.mu)
        ce = bias_loss(
            nn.domain_head_forward(reversed_feats, params, cfg, mode),
            labels.y_bias)
        root = T.add(root, ce)
        l_bias_val = ce.item()
        if config.lam != 0.0:
            # Second h pass outside the reversal so the entropy gradient
            # reaches f un-flipped. h's own weights are frozen here: if the
            # confusion bonus also updated h, the head could satisfy it by
            # collapsing to a uniform output, losing the discriminative
            # pressure that forces f to scrub the bias. Batchnorm running
            # buffers in h still update twice per step.
            ent_in = feats if config.entropy_to_f else feats.detach()
            probs = T.softmax(
                nn.domain_head_forward(ent_in, _FrozenPartition(params, "h"),
                                       cfg, mode))
            ent = entropy_regularizer(probs)
            root = T.add(root, T.mul(Tensor(config.lam), ent))
            entropy_val = ent.item()

    breakdown = LossBreakdown(
        l_endpoint=l_end.item(),
        l_bias=l_bias_val,
        h_entropy=entropy_val,
        total=l_end.item() - config.mu * l_bias_val
        + config.lam * entropy_val,
        per_task=per_task_losses(pred.data, labels),
        all_masked=all_masked)
    return breakdown, root


def _param_norm(params):
    return float(np.sqrt(sum(float((t.data ** 2).sum())
                             for t in params.tensors())))


def _check_finite(breakdown, batch_id, params):
    vals = (breakdown.l_endpoint, breakdown.l_bias, breakdown.h_entropy)
    if not all(np.isfinite(v) for v in vals):
        raise DataError(
            f"non-finite loss at batch {batch_id}: l_endpoint="
            f"{breakdown.l_endpoint}, l_bias={breakdown.l_bias}, "
            f"h_entropy={breakdown.h_entropy}, "
            f"param_norm={_param_norm(params)}")


def _batches(n, batch_size, rng):
    order = rng.permutation(n) if rng is not None else np.arange(n)
    chunks = [order[i:i + batch_size] for i in range(0, n, batch_size)]
    # a trailing singleton cannot be batch-normalized in train mode
    if len(chunks) > 1 and len(chunks[-1]) == 1:
        chunks = chunks[:-1]
    return chunks


def _epoch_stats(records):
    return {
        "steps": len(records),
        "l_endpoint": float(np.mean([r.l_endpoint for r in records])),
        "l_bias": float(np.mean([r.l_bias for r in records])),
        "h_entropy": float(np.mean([r.h_entropy for r in records])),
        "total": float(np.mean([r.total for r in records])),
        "breakdowns": records,
    }


def train_epoch(dataset, params, optimizer, config, rng=None, epoch=None):
    """One pass over shuffled mini-batches; returns mean loss stats.

    `epoch` (0-based) enables the adversarial warm-up ramp; callers that
    do not pass it train at full mu/lambda from the start.
    """
    if len(dataset) == 0:
        raise DataError("training split is empty")
    if rng is None:
        rng = np.random.default_rng(config.seed)
    if (epoch is not None and config.adv_warmup_epochs > 0
            and config.mu > 0):
        ramp = min(1.0, (epoch + 1) / config.adv_warmup_epochs)
        if ramp < 1.0:
            # keep mu infinitesimally positive so h itself still trains
            # (mu == 0 switches the whole adversarial branch off)
            config = replace(config, mu=max(config.mu * ramp, 1e-9),
                             lam=config.lam * ramp)
    records = []
    for step, idx in enumerate(_batches(len(dataset), config.batch_size,
                                        rng)):
        batch = dataset.batch(idx, batch_id=step)
        if isinstance(optimizer, SAM):
            holder = {}

            def loss_fn():
                holder["bd"], root = composite_forward(batch, params, config)
                return root

            optimizer.step(loss_fn)
            bd = holder["bd"]
        else:
            params.zero_grad()
            bd, root = composite_forward(batch, params, config)
            backward(root)
            optimizer.step()
        _check_finite(bd, step, params)
        records.append(bd)
    if hasattr(optimizer, "end_epoch"):
        optimizer.end_epoch()
    return _epoch_stats(records)


def pretrain_epoch(all_visits, params, optimizer, config, rng=None):
    """Visit-level pretraining of f plus the temporary regression head on
    current cognitive scores."""
    if len(all_visits) == 0:
        raise DataError("pretraining split is empty")
    if rng is None:
        rng = np.random.default_rng(config.seed)
    cfg = config.network
    records = []
    for step, idx in enumerate(_batches(len(all_visits), config.batch_size,
                                        rng)):
        batch = all_visits.batch(idx, batch_id=step)

        def forward():
            feats = nn.feature_extractor_forward(
                Tensor(batch.mri), params, cfg, "train")
            pred = nn.pretrain_head_forward(feats, params)
            return pred, endpoint_loss_masked(pred, batch.labels)

        if isinstance(optimizer, SAM):
            holder = {}

            def loss_fn():
                pred, loss = forward()
                holder["bd"] = (pred.data, loss.item())
                return loss

            optimizer.step(loss_fn)
            pred_data, loss_val = holder["bd"]
        else:
            params.zero_grad()
            pred, loss = forward()
            backward(loss)
            optimizer.step()
            pred_data, loss_val = pred.data, loss.item()
        bd = LossBreakdown(
            l_endpoint=loss_val, l_bias=0.0, h_entropy=0.0, total=loss_val,
            per_task=per_task_losses(pred_data, batch.labels),
            all_masked=not batch.labels.mask.any())
        _check_finite(bd, step, params)
        records.append(bd)
    return _epoch_stats(records)


def export_partition(params, partition):
    """Copy one partition's arrays out (e.g. the pretrained f weights)."""
    return {name: t.data.copy()
            for name, t in params.partitions[partition].items()}


def load_partition(params, partition, state):
    """Load exported arrays back into a model; shapes must match exactly."""
    part = params.partitions[partition]
    missing = sorted(set(part) ^ set(state))
    if missing:
        raise ContractError(
            f"partition {partition!r} key mismatch: {missing}")
    for name, t in part.items():
        if t.data.shape != state[name].shape:
            raise ContractError(
                f"shape mismatch for {partition}.{name}: "
                f"{t.data.shape} vs {state[name].shape}")
        t.data = np.array(state[name], dtype=np.float64)
