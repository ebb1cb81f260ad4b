"""Losses, class weighting, optimizers and the two-stage training loops.

Stage one fits the per-frame network on shuffled labeled frames. Stage two
freezes it, precomputes its per-frame low-resolution and skip logits once,
and fits only the recurrent head (plus its final 1x1 conv) with truncated
backpropagation through time over block-sampled frames in temporal order.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from . import fcn as fcn_mod
from . import ops
from .errors import CompatibilityError, ConfigurationError, ContractViolation, DataError
from .recurrent import RecurrentHead, bptt_step
from .tensor import check_tensor4

IGNORE_LABEL = 255


@dataclass
class TrainPlan:
    stage: str = "fcn"                      # "fcn" | "rnn"
    epochs: tuple = (6, 3, 1)               # per learning-rate phase
    learning_rates: tuple = (1e-4, 1e-5, 1e-6)
    batch_size: int = 4                     # fcn stage; the rnn stage updates per window
    weight_decay: float = 1e-4
    optimizer: str = "adam"
    betas: tuple = (0.9, 0.999)
    adam_eps: float = 1e-8
    seed: int = 0
    augment: bool = True                    # fcn stage: horizontal flip + brightness jitter
    block_size: int = 1000                  # rnn stage frame sampling
    resample_per_epoch: bool = True
    dtype: str = "float32"

    def __post_init__(self):
        self.epochs = tuple(int(e) for e in self.epochs)
        self.learning_rates = tuple(float(v) for v in self.learning_rates)
        self.betas = tuple(self.betas)
        if self.stage not in ("fcn", "rnn"):
            raise ConfigurationError(f"stage must be 'fcn' or 'rnn', got {self.stage!r}")
        if len(self.epochs) != len(self.learning_rates):
            raise ConfigurationError("epochs and learning_rates must have equal length")
        if any(lr < 0 for lr in self.learning_rates):
            raise ConfigurationError("learning rates must be >= 0")
        if self.weight_decay < 0:
            raise ConfigurationError("weight decay must be >= 0")
        if self.optimizer not in ("adam", "sgd"):
            raise ConfigurationError(f"optimizer must be 'adam' or 'sgd', got {self.optimizer!r}")
        if self.batch_size < 1:
            raise ConfigurationError("batch_size must be >= 1")
        if self.dtype not in ("float32", "float64"):
            raise ConfigurationError("dtype must be 'float32' or 'float64'")

    def phase_schedule(self):
        """Yield (epoch_index, lr) over the whole schedule."""
        e = 0
        for n, lr in zip(self.epochs, self.learning_rates):
            for _ in range(n):
                yield e, lr
                e += 1


# ---------------------------------------------------------------------------
# class weighting and loss
# ---------------------------------------------------------------------------

def median_frequency_weights(counts):
    """w_c = median(f) / f_c over nonzero-frequency classes; absent classes
    get weight 0 and are excluded from the loss."""
    counts = np.asarray(counts, dtype=np.float64)
    total = counts.sum()
    if total <= 0:
        raise DataError("label histogram is all zero")
    freq = counts / total
    nz = freq > 0
    med = np.median(freq[nz])
    weights = np.zeros_like(freq)
    weights[nz] = med / freq[nz]
    return weights


def weighted_cross_entropy(logits, labels, weights, ignore=IGNORE_LABEL):
    """Mean class-weighted cross entropy over scored pixels.

    Returns (loss, dlogits); pixels labeled `ignore` contribute nothing to
    either. Labels outside [0, num_classes) raise.
    """
    logits = check_tensor4(logits, name="logits")
    labels = np.asarray(labels)
    n, k, h, w = logits.shape
    if labels.shape != (n, h, w):
        raise ContractViolation(f"labels shape {labels.shape} != {(n, h, w)}")
    valid = labels != ignore
    lab = np.where(valid, labels, 0).astype(np.intp)
    if lab.max(initial=0) >= k or labels[valid].min(initial=0) < 0:
        raise DataError(f"label id outside [0, {k})")
    n_valid = int(valid.sum())
    if n_valid == 0:
        raise DataError("no scored pixels (all ignore)")

    z = logits - logits.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1, keepdims=True))
    logp = z - lse                                     # (n, k, h, w)
    w_pix = np.asarray(weights, dtype=logits.dtype)[lab] * valid   # (n, h, w)
    picked = np.take_along_axis(logp, lab[:, None], axis=1)[:, 0]
    loss = -(w_pix * picked).sum() / n_valid

    soft = np.exp(logp)
    onehot = np.zeros_like(soft)
    np.put_along_axis(onehot, lab[:, None], 1.0, axis=1)
    dlogits = (soft - onehot) * w_pix[:, None] / n_valid
    return float(loss), dlogits


# ---------------------------------------------------------------------------
# optimizers
# ---------------------------------------------------------------------------

class AdamState:
    """Per-tensor first and second moment accumulators plus step counter."""

    def __init__(self):
        self.m = {}
        self.v = {}
        self.t = 0


def adam_update(params, grads, state: AdamState, lr, weight_decay=0.0,
                betas=(0.9, 0.999), eps=1e-8):
    """One Adam step with bias correction, in place on the param arrays.

    Weight decay enters as an additive lam*theta term in the gradient
    (coupled form)."""
    b1, b2 = betas
    state.t += 1
    t = state.t
    c1 = 1.0 - b1 ** t
    c2 = 1.0 - b2 ** t
    for name, theta in params.items():
        g = grads[name]
        if weight_decay:
            g = g + weight_decay * theta
        if name not in state.m:
            state.m[name] = np.zeros_like(theta)
            state.v[name] = np.zeros_like(theta)
        m, v = state.m[name], state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        theta -= lr * (m / c1) / (np.sqrt(v / c2) + eps)


def sgd_update(params, grads, lr, weight_decay=0.0):
    for name, theta in params.items():
        g = grads[name]
        if weight_decay:
            g = g + weight_decay * theta
        theta -= lr * g


def clip_global_norm(grads, max_norm):
    """Scale all gradients down so their joint L2 norm is <= max_norm."""
    total = np.sqrt(sum(float((g * g).sum()) for g in grads.values()))
    if total > max_norm and total > 0:
        scale = max_norm / total
        for g in grads.values():
            g *= scale
    return total


# ---------------------------------------------------------------------------
# frame sampling
# ---------------------------------------------------------------------------

def block_sample_frames(n_frames, block_size=1000, rng=None, seed=None):
    """Per block of consecutive frames, draw block-size indices uniformly with
    replacement and keep the ones that appeared; output stays in temporal
    order (sorted, duplicate-free)."""
    if n_frames < 1:
        raise ContractViolation("need at least one frame")
    if rng is None:
        rng = np.random.default_rng(seed)
    kept = []
    for start in range(0, n_frames, block_size):
        m = min(block_size, n_frames - start)
        draws = rng.integers(0, m, size=m)
        kept.append(start + np.unique(draws))
    return np.concatenate(kept)


# ---------------------------------------------------------------------------
# dataset views
# ---------------------------------------------------------------------------

def class_histogram(sequences, num_classes):
    counts = np.zeros(num_classes, dtype=np.int64)
    for seq in sequences:
        lab = seq.labels
        valid = lab != IGNORE_LABEL
        counts += np.bincount(lab[valid].reshape(-1), minlength=num_classes)[:num_classes]
    return counts


def _flatten(sequences):
    frames = np.concatenate([s.frames for s in sequences], axis=0)
    labels = np.concatenate([s.labels for s in sequences], axis=0)
    return frames, labels


# ---------------------------------------------------------------------------
# stage one: the per-frame network
# ---------------------------------------------------------------------------

def train_fcn(model, sequences, plan: TrainPlan):
    """Fit the per-frame network; returns (trained model, loss log).

    The loss log has one (epoch, lr, mean_loss, wall_seconds) row per epoch.
    """
    if plan.stage != "fcn":
        raise ConfigurationError("plan.stage must be 'fcn'")
    dtype = np.dtype(plan.dtype)
    work = model.astype(dtype)
    cfg = work.config
    frames, labels = _flatten(sequences)
    if frames.shape[2:] != cfg.input_hw:
        raise CompatibilityError("dataset resolution does not match model config")
    frames = frames.astype(dtype)
    weights = median_frequency_weights(class_histogram(sequences, cfg.num_classes)).astype(dtype)

    rng = np.random.default_rng(np.random.SeedSequence(plan.seed))
    params = fcn_mod.trainable_dict(work)
    state = AdamState()
    n = frames.shape[0]
    log = []
    for epoch, lr in plan.phase_schedule():
        t0 = time.perf_counter()
        order = rng.permutation(n)
        losses = []
        for i in range(0, n, plan.batch_size):
            idx = order[i:i + plan.batch_size]
            batch = frames[idx]
            lab = labels[idx]
            if plan.augment:
                batch, lab = _augment(batch, lab, rng, dtype)
            bundle = work.forward(batch, "train", keep_cache=True)
            loss, d_full = weighted_cross_entropy(bundle.logits_full, lab, weights)
            work.backward(bundle, d_full)
            grads = fcn_mod.grads_dict(work)
            if plan.optimizer == "adam":
                adam_update(params, grads, state, lr, plan.weight_decay,
                            plan.betas, plan.adam_eps)
            else:
                sgd_update(params, grads, lr, plan.weight_decay)
            losses.append(loss)
        log.append((epoch, lr, float(np.mean(losses)), time.perf_counter() - t0))
    return work, log


def _augment(batch, labels, rng, dtype):
    batch = batch.copy()
    labels = labels.copy()
    flips = rng.random(batch.shape[0]) < 0.5
    scales = rng.uniform(0.9, 1.1, size=batch.shape[0]).astype(dtype)
    batch[flips] = batch[flips, :, :, ::-1]
    labels[flips] = labels[flips, :, ::-1]
    batch *= scales[:, None, None, None]
    return batch, labels


# ---------------------------------------------------------------------------
# stage two: the recurrent head on a frozen base network
# ---------------------------------------------------------------------------

def precompute_logits(model, sequences, dtype=np.float64):
    """Run the frozen network once per frame (infer phase) and keep each
    frame's low-resolution and skip logits for the head stage."""
    out = []
    for seq in sequences:
        lows, skips = [], []
        for t in range(seq.frames.shape[0]):
            bundle = model.forward(seq.frames[t:t + 1].astype(dtype), "infer")
            lows.append(bundle.logits_low)
            skips.append(bundle.skip_logits)
        out.append({
            "low": lows,
            "skips": skips,
            "tap_downsamples": bundle.tap_downsamples,
            "low_downsample": bundle.low_downsample,
        })
    return out


def _sequence_windows(seq_lengths, retained):
    """Group globally indexed retained frames by sequence, preserving order.

    Returns a list of (sequence index, [frame indices within sequence])."""
    bounds = np.cumsum([0] + list(seq_lengths))
    out = []
    for si in range(len(seq_lengths)):
        inside = retained[(retained >= bounds[si]) & (retained < bounds[si + 1])]
        if inside.size:
            out.append((si, (inside - bounds[si]).tolist()))
    return out


def train_rnn(fcn_model, head: RecurrentHead, sequences, plan: TrainPlan,
              precomputed=None):
    """Fit the recurrent head against a frozen base network.

    Base-network logits are precomputed once per frame; every parameter of
    the base stays bitwise untouched. Frames are block-sampled per epoch and
    consumed in temporal order through truncation windows of the configured
    unroll length, with the state carried (detached) across windows inside a
    sequence and reset at each sequence start.
    """
    if plan.stage != "rnn":
        raise ConfigurationError("plan.stage must be 'rnn'")
    dtype = np.dtype(plan.dtype)
    cfg = fcn_model.config
    if head.config.in_channels != cfg.num_classes:
        raise CompatibilityError("head channel count != model class count")
    weights = median_frequency_weights(class_histogram(sequences, cfg.num_classes)).astype(dtype)
    if precomputed is None:
        precomputed = precompute_logits(fcn_model, sequences, dtype)

    rng = np.random.default_rng(np.random.SeedSequence(plan.seed))
    params = dict(head.named_tensors())
    state_opt = AdamState()
    seq_lengths = [s.frames.shape[0] for s in sequences]
    total = int(sum(seq_lengths))
    unroll = head.config.unroll
    retained = None
    log = []
    for epoch, lr in plan.phase_schedule():
        t0 = time.perf_counter()
        if retained is None or plan.resample_per_epoch:
            retained = block_sample_frames(total, plan.block_size, rng=rng)
        losses = []
        n_frames = 0
        for si, frame_ids in _sequence_windows(seq_lengths, retained):
            pre = precomputed[si]
            seq = sequences[si]
            hw = pre["low"][0].shape[2:]
            carried = head.init_state(hw, dtype=dtype)
            for w0 in range(0, len(frame_ids), unroll):
                ids = frame_ids[w0:w0 + unroll]
                window = [pre["low"][t].astype(dtype, copy=False) for t in ids]

                def loss_fn(j, new_low):
                    t = ids[j]
                    full = fcn_mod.merge_logits(new_low, pre["skips"][t],
                                                pre["tap_downsamples"], pre["low_downsample"])
                    loss, d_full = weighted_cross_entropy(
                        full, seq.labels[t:t + 1], weights)
                    d_low, _ = fcn_mod.merge_logits_backward(
                        d_full, new_low.shape[2:], [s.shape[2:] for s in pre["skips"][t]],
                        pre["tap_downsamples"], pre["low_downsample"])
                    return loss, d_low

                loss_sum, carried, _ = bptt_step(head, window, carried, loss_fn)
                grads = dict(head.named_grads())
                if head.config.cell_kind == "simple":
                    clip_global_norm(grads, head.config.clip_norm)
                if plan.optimizer == "adam":
                    adam_update(params, grads, state_opt, lr, plan.weight_decay,
                                plan.betas, plan.adam_eps)
                else:
                    sgd_update(params, grads, lr, plan.weight_decay)
                losses.append(loss_sum)
                n_frames += len(ids)
        log.append((epoch, lr, float(np.sum(losses) / max(n_frames, 1)),
                    time.perf_counter() - t0))
    return head, log


def train_stage(plan: TrainPlan, sequences, fcn_model, head=None, precomputed=None):
    """Dispatch to the stage named by the plan; see train_fcn / train_rnn."""
    if plan.stage == "fcn":
        return train_fcn(fcn_model, sequences, plan)
    if head is None:
        raise ConfigurationError("rnn stage requires a head")
    return train_rnn(fcn_model, head, sequences, plan, precomputed)


def write_loss_log(path, log):
    with open(path, "w") as fh:
        fh.write("epoch,phase_lr,mean_loss,wall_seconds\n")
        for epoch, lr, loss, secs in log:
            fh.write(f"{epoch},{lr:.6g},{loss:.12g},{secs:.3f}\n")


def read_loss_log(path):
    rows = []
    with open(path) as fh:
        header = fh.readline()
        for line in fh:
            e, lr, loss, secs = line.strip().split(",")
            rows.append((int(e), float(lr), float(loss), float(secs)))
    return rows
