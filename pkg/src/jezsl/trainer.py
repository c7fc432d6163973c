"""Minibatch training loop for the two embedding heads.

SGD with momentum, seeded shuffling, and deterministic results given the
same inputs and seed. Both heads are updated in one step per batch from a
single combined loss evaluation.

The shuffle order of epoch e depends only on (seed, e), and the optimizer
velocities are serializable, so training resumed from a saved state is
bit-identical to an uninterrupted run.
"""

from __future__ import annotations

import logging
import os
import struct
import time
from dataclasses import dataclass, field

import numpy as np


from .alignment import LossConfig, MiniBatch, loss_backward, loss_terms, mine_triplets
from .errors import DataError, NumericalError
from .heads import EmbeddingHead, backward, forward, save_head
from .linalg import as_matrix, make_rng

log = logging.getLogger("jezsl.trainer")


@dataclass
class TrainConfig:
    epochs: int = 50
    batch_size: int = 32
    learning_rate: float = 0.01
    momentum: float = 0.9
    seed: int = 0
    shuffle: bool = True
    balanced_batches: bool = False
    checkpoint_every: int = 0

    def validate(self) -> None:
        if self.batch_size < 2:
            raise ValueError("batch_size must be >= 2 (batch statistics need variance)")
        # learning_rate 0 is allowed: it exercises the no-op update path.
        if self.learning_rate < 0:
            raise ValueError("learning_rate must be >= 0")
        if not 0.0 <= self.momentum < 1.0:
            raise ValueError("momentum must be in [0, 1)")
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")


@dataclass
class TrainLog:
    epoch_loss: list[float] = field(default_factory=list)
    epoch_seconds: list[float] = field(default_factory=list)
    active_fraction: list[float] = field(default_factory=list)

    def lines(self):
        for e, (loss, frac) in enumerate(zip(self.epoch_loss, self.active_fraction), 1):
            yield f"{e}\t{loss:.17g}\t{frac:.17g}"


def sgd_step(
    params: dict[str, np.ndarray],
    grads: dict[str, np.ndarray],
    velocity: dict[str, np.ndarray],
    learning_rate: float,
    momentum: float,
) -> tuple[dict[str, np.ndarray], dict[str, np.ndarray]]:
    """In-place momentum update: v <- mu*v - lr*g; p <- p + v."""
    for name, p in params.items():
        g = grads[name]
        if g.shape != p.shape:
            raise ValueError(f"sgd_step: gradient shape mismatch for {name}")
        v = velocity[name]
        v *= momentum
        v -= learning_rate * g
        p += v
    return params, velocity


def _batch_indices(order: np.ndarray, groups: np.ndarray, cfg: TrainConfig):
    """Split a permutation into batches, dropping a trailing batch of < 2.

    With balanced_batches, single-group batches get one sample swapped with a
    later batch so that mining always has at least one negative available.
    """
    batches = [
        order[start : start + cfg.batch_size]
        for start in range(0, len(order), cfg.batch_size)
    ]
    if batches and len(batches[-1]) < 2:
        batches.pop()
    if cfg.balanced_batches:
        for bi, idx in enumerate(batches):
            if len(np.unique(groups[idx])) >= 2:
                continue
            g = groups[idx[0]]
            for bj, other in enumerate(batches):
                if bj == bi:
                    continue
                cand = np.nonzero(groups[other] != g)[0]
                if len(cand):
                    idx[-1], other[cand[0]] = other[cand[0]], idx[-1]
                    break
    return batches


PARAM_ORDER = ("w1", "b1", "w2", "b2", "bn_gamma", "bn_beta")
STATE_MAGIC = b"JET1"


@dataclass
class TrainState:
    """Optimizer velocities plus the index of the next epoch to run."""

    velocity_v: dict[str, np.ndarray]
    velocity_s: dict[str, np.ndarray]
    next_epoch: int = 0

    @classmethod
    def fresh(cls, head_v: EmbeddingHead, head_s: EmbeddingHead) -> "TrainState":
        return cls(
            velocity_v={k: np.zeros_like(v) for k, v in head_v.learnable().items()},
            velocity_s={k: np.zeros_like(v) for k, v in head_s.learnable().items()},
            next_epoch=0,
        )


def save_train_state(state: TrainState, path: str) -> None:
    parts = [STATE_MAGIC, struct.pack("<BI", 1, state.next_epoch)]
    for vel in (state.velocity_v, state.velocity_s):
        for name in PARAM_ORDER:
            arr = np.ascontiguousarray(vel[name], dtype="<f8")
            parts.append(struct.pack("<I", arr.ndim))
            parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
            parts.append(arr.tobytes())
    with open(path, "wb") as fh:
        fh.write(b"".join(parts))


def load_train_state(path: str) -> TrainState:
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:4] != STATE_MAGIC:
        raise DataError(f"{path}: bad magic {blob[:4]!r}, expected {STATE_MAGIC!r}")
    version, next_epoch = struct.unpack_from("<BI", blob, 4)
    if version != 1:
        raise DataError(f"{path}: unsupported trainer state version {version}")
    offset = 9
    vels = []
    for _ in range(2):
        vel = {}
        for name in PARAM_ORDER:
            (ndim,) = struct.unpack_from("<I", blob, offset)
            offset += 4
            shape = struct.unpack_from(f"<{ndim}I", blob, offset)
            offset += 4 * ndim
            n = int(np.prod(shape))
            if offset + n * 8 > len(blob):
                raise DataError(f"{path}: truncated trainer state")
            vel[name] = (
                np.frombuffer(blob, dtype="<f8", count=n, offset=offset)
                .reshape(shape)
                .astype(np.float64)
            )
            offset += n * 8
        vels.append(vel)
    return TrainState(velocity_v=vels[0], velocity_s=vels[1], next_epoch=next_epoch)


def epoch_order(seed: int, epoch: int, n: int, shuffle: bool) -> np.ndarray:
    """Sample order for one epoch; a pure function of (seed, epoch)."""
    if not shuffle:
        return np.arange(n)
    return make_rng([seed, epoch]).permutation(n)


def train_joint(
    visual: np.ndarray,
    sentences: np.ndarray,
    groups: np.ndarray,
    head_v: EmbeddingHead,
    head_s: EmbeddingHead,
    loss_cfg: LossConfig,
    train_cfg: TrainConfig,
    state: TrainState | None = None,
    checkpoint_dir: str | None = None,
) -> tuple[EmbeddingHead, EmbeddingHead, TrainLog]:
    """Train both heads in place on paired features; returns them with a log.

    Passing a TrainState loaded from disk resumes at state.next_epoch and is
    bit-identical to having trained straight through. With checkpoint_every
    set, heads and trainer state are written to checkpoint_dir periodically.
    """
    visual = as_matrix(visual, "visual features")
    sentences = as_matrix(sentences, "sentence features")
    groups = np.asarray(groups)
    if not (len(visual) == len(sentences) == len(groups)):
        raise ValueError(
            f"row counts disagree: {len(visual)} visual, {len(sentences)} sentence, "
            f"{len(groups)} groups"
        )
    if visual.shape[1] != head_v.d_in:
        raise ValueError("visual feature width does not match visual head input")
    if sentences.shape[1] != head_s.d_in:
        raise ValueError("sentence feature width does not match sentence head input")
    if head_v.d_out != head_s.d_out:
        raise ValueError("heads must share output dimensionality")
    train_cfg.validate()
    loss_cfg.validate()

    if state is None:
        state = TrainState.fresh(head_v, head_s)
    vel_v = state.velocity_v
    vel_s = state.velocity_s
    train_log = TrainLog()

    for epoch in range(state.next_epoch, train_cfg.epochs):
        start = time.perf_counter()
        order = epoch_order(train_cfg.seed, epoch, len(visual), train_cfg.shuffle)
        losses = []
        active_total = 0
        triple_total = 0

        for bi, idx in enumerate(_batch_indices(order, groups, train_cfg)):
            emb_v, trace_v = forward(head_v, visual[idx], train=True)
            emb_s, trace_s = forward(head_s, sentences[idx], train=True)
            batch = MiniBatch(emb_v, emb_s, groups[idx])
            triplets = mine_triplets(batch)
            sums, active, total = loss_terms(batch, triplets, loss_cfg)
            loss = float(
                sums[0]
                + loss_cfg.lambda1 * sums[1]
                + loss_cfg.lambda2 * sums[2]
                + loss_cfg.lambda3 * sums[3]
            )
            if not np.isfinite(loss):
                raise NumericalError(f"non-finite loss at epoch {epoch + 1}, batch {bi + 1}")
            losses.append(loss)
            active_total += active
            triple_total += total

            if total == 0 or active == 0:
                continue
            d_v, d_s = loss_backward(batch, triplets, loss_cfg)
            grads_v, _ = backward(head_v, trace_v, d_v)
            grads_s, _ = backward(head_s, trace_s, d_s)
            for label, grads in (("visual", grads_v), ("sentence", grads_s)):
                for name, g in grads.as_dict().items():
                    if not np.all(np.isfinite(g)):
                        raise NumericalError(
                            f"non-finite gradient in {label} head parameter {name} "
                            f"at epoch {epoch + 1}, batch {bi + 1}"
                        )
            sgd_step(head_v.learnable(), grads_v.as_dict(), vel_v,
                     train_cfg.learning_rate, train_cfg.momentum)
            sgd_step(head_s.learnable(), grads_s.as_dict(), vel_s,
                     train_cfg.learning_rate, train_cfg.momentum)

        mean_loss = float(np.mean(losses)) if losses else 0.0
        frac = active_total / triple_total if triple_total else 0.0
        train_log.epoch_loss.append(mean_loss)
        train_log.active_fraction.append(frac)
        train_log.epoch_seconds.append(time.perf_counter() - start)
        log.info("epoch %d mean_loss %.6g active_fraction %.3f", epoch + 1, mean_loss, frac)

        state.next_epoch = epoch + 1
        if (
            checkpoint_dir is not None
            and train_cfg.checkpoint_every > 0
            and (epoch + 1) % train_cfg.checkpoint_every == 0
        ):
            save_head(head_v, os.path.join(checkpoint_dir, "head_v.jeh"))
            save_head(head_s, os.path.join(checkpoint_dir, "head_s.jeh"))
            save_train_state(state, os.path.join(checkpoint_dir, "trainer_state.jet"))

    return head_v, head_s, train_log
