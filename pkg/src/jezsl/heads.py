"""Per-stream embedding heads: FC -> ReLU -> FC -> BatchNorm -> L2 norm.

The forward pass produces unit-norm embedding rows; the backward pass is an
exact analytic differentiation of the whole pipeline, including the batch
statistics of the BatchNorm layer and the Jacobian of the row-wise L2
normalization. Gradients are validated against central finite differences
in the test suite and by the `gradcheck` CLI command.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import DataError, NumericalError
from .linalg import EPS_NORM, as_matrix

CHECKPOINT_MAGIC = b"JEH1"
CHECKPOINT_VERSION = 1


@dataclass
class EmbeddingHead:
    """Learnable parameters and BatchNorm state of one stream."""

    w1: np.ndarray  # (d_hidden, d_in)
    b1: np.ndarray  # (d_hidden,)
    w2: np.ndarray  # (d_out, d_hidden)
    b2: np.ndarray  # (d_out,)
    bn_gamma: np.ndarray  # (d_out,)
    bn_beta: np.ndarray  # (d_out,)
    bn_running_mean: np.ndarray  # (d_out,)
    bn_running_var: np.ndarray  # (d_out,)
    bn_momentum: float = 0.1
    bn_epsilon: float = 1e-5

    @property
    def d_in(self) -> int:
        return self.w1.shape[1]

    @property
    def d_hidden(self) -> int:
        return self.w1.shape[0]

    @property
    def d_out(self) -> int:
        return self.w2.shape[0]

    def learnable(self) -> dict[str, np.ndarray]:
        """Parameters updated by the optimizer (BN running stats excluded)."""
        return {
            "w1": self.w1,
            "b1": self.b1,
            "w2": self.w2,
            "b2": self.b2,
            "bn_gamma": self.bn_gamma,
            "bn_beta": self.bn_beta,
        }

    def copy(self) -> "EmbeddingHead":
        return EmbeddingHead(
            w1=self.w1.copy(),
            b1=self.b1.copy(),
            w2=self.w2.copy(),
            b2=self.b2.copy(),
            bn_gamma=self.bn_gamma.copy(),
            bn_beta=self.bn_beta.copy(),
            bn_running_mean=self.bn_running_mean.copy(),
            bn_running_var=self.bn_running_var.copy(),
            bn_momentum=self.bn_momentum,
            bn_epsilon=self.bn_epsilon,
        )


@dataclass
class HeadGradients:
    w1: np.ndarray
    b1: np.ndarray
    w2: np.ndarray
    b2: np.ndarray
    bn_gamma: np.ndarray
    bn_beta: np.ndarray

    def as_dict(self) -> dict[str, np.ndarray]:
        return {
            "w1": self.w1,
            "b1": self.b1,
            "w2": self.w2,
            "b2": self.b2,
            "bn_gamma": self.bn_gamma,
            "bn_beta": self.bn_beta,
        }


@dataclass
class ForwardTrace:
    """Cached activations of one train-mode forward, consumed by backward."""

    inputs: np.ndarray  # (b, d_in)
    pre_relu: np.ndarray  # (b, d_hidden)
    post_relu: np.ndarray  # (b, d_hidden)
    pre_bn: np.ndarray  # (b, d_out)
    batch_mean: np.ndarray  # (d_out,)
    batch_var: np.ndarray  # biased, (d_out,)
    inv_std: np.ndarray  # 1/sqrt(var + eps), (d_out,)
    normalized: np.ndarray  # BN-whitened activations, (b, d_out)
    pre_l2: np.ndarray  # after BN affine, before row normalization
    row_norms: np.ndarray  # (b,)
    train_mode: bool = True


def init_head(
    d_in: int,
    d_hidden: int,
    d_out: int,
    rng: np.random.Generator,
    bn_momentum: float = 0.1,
    bn_epsilon: float = 1e-5,
) -> EmbeddingHead:
    """Glorot-uniform weights, gamma=1, beta=0, unit running variance.

    b1 starts at 0.01 rather than 0 so an all-zero hidden layer (which would
    make the final L2 normalization degenerate) is measure-zero.
    """

    def glorot(fan_out, fan_in):
        bound = np.sqrt(6.0 / (fan_in + fan_out))
        return rng.uniform(-bound, bound, size=(fan_out, fan_in))

    return EmbeddingHead(
        w1=glorot(d_hidden, d_in),
        b1=np.full(d_hidden, 0.01),
        w2=glorot(d_out, d_hidden),
        b2=np.zeros(d_out),
        bn_gamma=np.ones(d_out),
        bn_beta=np.zeros(d_out),
        bn_running_mean=np.zeros(d_out),
        bn_running_var=np.ones(d_out),
        bn_momentum=bn_momentum,
        bn_epsilon=bn_epsilon,
    )


def forward(
    head: EmbeddingHead,
    batch: np.ndarray,
    train: bool,
    update_running_stats: bool = True,
) -> tuple[np.ndarray, ForwardTrace]:
    """Run the head on a batch of rows; returns unit-norm embeddings.

    Train mode normalizes with batch statistics (biased variance) and, unless
    `update_running_stats` is disabled, folds them into the running averages.
    Eval mode uses the stored running statistics and mutates nothing.
    """
    batch = as_matrix(batch, "forward input")
    if batch.shape[1] != head.d_in:
        raise ValueError(
            f"forward: input has {batch.shape[1]} columns, head expects {head.d_in}"
        )
    b = batch.shape[0]
    if train and b < 2:
        raise ValueError("forward: train mode needs batch size >= 2 for batch statistics")

    pre_relu = batch @ head.w1.T + head.b1
    post_relu = np.maximum(pre_relu, 0.0)
    pre_bn = post_relu @ head.w2.T + head.b2

    if train:
        batch_mean = pre_bn.mean(axis=0)
        batch_var = pre_bn.var(axis=0)  # biased; bn_epsilon guards zero variance
        inv_std = 1.0 / np.sqrt(batch_var + head.bn_epsilon)
        normalized = (pre_bn - batch_mean) * inv_std
        if update_running_stats:
            mom = head.bn_momentum
            unbiased = batch_var * b / (b - 1)
            head.bn_running_mean[:] = (1.0 - mom) * head.bn_running_mean + mom * batch_mean
            head.bn_running_var[:] = (1.0 - mom) * head.bn_running_var + mom * unbiased
    else:
        batch_mean = head.bn_running_mean.copy()
        batch_var = head.bn_running_var.copy()
        inv_std = 1.0 / np.sqrt(batch_var + head.bn_epsilon)
        normalized = (pre_bn - batch_mean) * inv_std

    pre_l2 = head.bn_gamma * normalized + head.bn_beta
    row_norms = np.sqrt(np.sum(pre_l2 * pre_l2, axis=1))
    if np.any(row_norms < EPS_NORM):
        bad = int(np.argmin(row_norms))
        raise NumericalError(
            f"forward: embedding row {bad} has norm {row_norms[bad]:g} below {EPS_NORM:g}"
        )
    embeddings = pre_l2 / row_norms[:, None]

    trace = ForwardTrace(
        inputs=batch,
        pre_relu=pre_relu,
        post_relu=post_relu,
        pre_bn=pre_bn,
        batch_mean=batch_mean,
        batch_var=batch_var,
        inv_std=inv_std,
        normalized=normalized,
        pre_l2=pre_l2,
        row_norms=row_norms,
        train_mode=train,
    )
    return embeddings, trace


def backward(
    head: EmbeddingHead, trace: ForwardTrace, d_embeddings: np.ndarray
) -> tuple[HeadGradients, np.ndarray]:
    """Exact gradients of a scalar loss through the head.

    `d_embeddings` is the upstream gradient w.r.t. the unit-norm output rows.
    Returns parameter gradients and the gradient w.r.t. the input batch.
    """
    if not trace.train_mode:
        raise ValueError("backward: trace must come from a train-mode forward")
    d_embeddings = as_matrix(d_embeddings, "d_embeddings")
    b, d_out = trace.pre_l2.shape
    if d_embeddings.shape != (b, d_out):
        raise ValueError(
            f"backward: d_embeddings shape {d_embeddings.shape} != {(b, d_out)}"
        )

    # Row-wise L2 normalization: o = u/|u|, d_u = (g - o(o.g)) / |u|
    out = trace.pre_l2 / trace.row_norms[:, None]
    dot = np.sum(out * d_embeddings, axis=1, keepdims=True)
    d_pre_l2 = (d_embeddings - out * dot) / trace.row_norms[:, None]

    # BN affine
    d_gamma = np.sum(d_pre_l2 * trace.normalized, axis=0)
    d_beta = np.sum(d_pre_l2, axis=0)
    d_norm = d_pre_l2 * head.bn_gamma

    # BN whitening with batch statistics (biased variance)
    mean_dnorm = d_norm.mean(axis=0)
    mean_dnorm_xhat = (d_norm * trace.normalized).mean(axis=0)
    d_pre_bn = trace.inv_std * (d_norm - mean_dnorm - trace.normalized * mean_dnorm_xhat)

    # Second FC
    d_w2 = d_pre_bn.T @ trace.post_relu
    d_b2 = np.sum(d_pre_bn, axis=0)
    d_post_relu = d_pre_bn @ head.w2

    # ReLU and first FC
    d_pre_relu = d_post_relu * (trace.pre_relu > 0.0)
    d_w1 = d_pre_relu.T @ trace.inputs
    d_b1 = np.sum(d_pre_relu, axis=0)
    d_input = d_pre_relu @ head.w1

    grads = HeadGradients(
        w1=d_w1, b1=d_b1, w2=d_w2, b2=d_b2, bn_gamma=d_gamma, bn_beta=d_beta
    )
    return grads, d_input


# --- checkpoint serialization ------------------------------------------------
# Layout: magic "JEH1", version byte, three uint32 LE dims, then the float64
# LE arrays w1, b1, w2, b2, gamma, beta, running_mean, running_var, followed
# by bn_momentum and bn_epsilon as float64 LE.


def save_head(head: EmbeddingHead, path: str) -> None:
    parts = [
        CHECKPOINT_MAGIC,
        struct.pack("<B", CHECKPOINT_VERSION),
        struct.pack("<III", head.d_in, head.d_hidden, head.d_out),
    ]
    for arr in (
        head.w1,
        head.b1,
        head.w2,
        head.b2,
        head.bn_gamma,
        head.bn_beta,
        head.bn_running_mean,
        head.bn_running_var,
    ):
        parts.append(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    parts.append(struct.pack("<dd", head.bn_momentum, head.bn_epsilon))
    with open(path, "wb") as fh:
        fh.write(b"".join(parts))


def load_head(path: str) -> EmbeddingHead:
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:4] != CHECKPOINT_MAGIC:
        raise DataError(f"{path}: bad magic {blob[:4]!r}, expected {CHECKPOINT_MAGIC!r}")
    if blob[4] != CHECKPOINT_VERSION:
        raise DataError(f"{path}: unsupported checkpoint version {blob[4]}")
    d_in, d_hidden, d_out = struct.unpack_from("<III", blob, 5)
    offset = 5 + 12
    shapes = [
        (d_hidden, d_in),
        (d_hidden,),
        (d_out, d_hidden),
        (d_out,),
        (d_out,),
        (d_out,),
        (d_out,),
        (d_out,),
    ]
    expected = offset + sum(int(np.prod(s)) for s in shapes) * 8 + 16
    if len(blob) != expected:
        raise DataError(
            f"{path}: truncated checkpoint, expected {expected} bytes, got {len(blob)}"
        )
    arrays = []
    for shape in shapes:
        n = int(np.prod(shape))
        arrays.append(
            np.frombuffer(blob, dtype="<f8", count=n, offset=offset)
            .reshape(shape)
            .astype(np.float64)
        )
        offset += n * 8
    bn_momentum, bn_epsilon = struct.unpack_from("<dd", blob, offset)
    return EmbeddingHead(
        w1=arrays[0],
        b1=arrays[1],
        w2=arrays[2],
        b2=arrays[3],
        bn_gamma=arrays[4],
        bn_beta=arrays[5],
        bn_running_mean=arrays[6],
        bn_running_var=arrays[7],
        bn_momentum=bn_momentum,
        bn_epsilon=bn_epsilon,
    )
