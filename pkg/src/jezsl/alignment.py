"""Structure-preserving alignment loss with in-minibatch triplet mining.

Four hinge-loss families over Euclidean distances between unit-norm
embedding rows:

  term1: image anchor, positive sentence vs negative sentence (weight 1)
  term2: sentence anchor, positive image vs negative image (weight lambda1)
  term3: image anchor, within-modal neighborhood (weight lambda2)
  term4: sentence anchor, within-modal neighborhood (weight lambda3)

Rows sharing a group id are mutual positives. Triplets never cross minibatch
boundaries. The vectorized loss and its exact (sub)gradient are checked
against brute-force loop oracles and finite differences in the tests.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import NumericalError
from .linalg import as_matrix

# Hinge terms exactly at the boundary (m + d_pos - d_neg == 0) are treated
# as inactive, matching the right-limit of max(0, .) from below.


@dataclass
class LossConfig:
    margin: float = 0.1
    lambda1: float = 2.0
    lambda2: float = 0.1
    lambda3: float = 0.2

    def validate(self) -> None:
        if self.margin <= 0:
            raise ValueError(f"margin must be > 0, got {self.margin}")
        for name in ("lambda1", "lambda2", "lambda3"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0, got {getattr(self, name)}")


@dataclass
class TripletSet:
    """Index triples (anchor, positive, negative) for the four loss terms."""

    term1: np.ndarray  # cross-modal, image anchors, shape (n, 3)
    term2: np.ndarray  # cross-modal, sentence anchors
    term3: np.ndarray  # within visual modality
    term4: np.ndarray  # within sentence modality

    def total(self) -> int:
        return len(self.term1) + len(self.term2) + len(self.term3) + len(self.term4)


@dataclass
class MiniBatch:
    visual: np.ndarray  # (b, d_out), unit-norm rows
    sentence: np.ndarray  # (b, d_out), unit-norm rows
    group_ids: np.ndarray  # (b,)

    def __post_init__(self):
        self.visual = as_matrix(self.visual, "visual embeddings")
        self.sentence = as_matrix(self.sentence, "sentence embeddings")
        self.group_ids = np.asarray(self.group_ids)
        if not (len(self.visual) == len(self.sentence) == len(self.group_ids)):
            raise ValueError(
                "minibatch row counts disagree: "
                f"{len(self.visual)} visual, {len(self.sentence)} sentence, "
                f"{len(self.group_ids)} group ids"
            )
        if self.visual.shape[1] != self.sentence.shape[1]:
            raise ValueError("visual and sentence embeddings must share width")


def _empty_triples() -> np.ndarray:
    return np.zeros((0, 3), dtype=np.int64)


def mine_triplets(batch: MiniBatch) -> TripletSet:
    """Enumerate every valid triple, lexicographically in (i, j, k).

    Cross-modal terms allow j == i (a row is paired with its own counterpart
    in the other stream); within-modal terms require j != i. May return empty
    term lists when fewer than two groups are present.
    """
    groups = batch.group_ids
    b = len(groups)
    same = groups[:, None] == groups[None, :]

    cross = []
    within = []
    for i in range(b):
        pos = np.nonzero(same[i])[0]
        neg = np.nonzero(~same[i])[0]
        if len(neg) == 0:
            continue
        for j in pos:
            for k in neg:
                cross.append((i, j, k))
                if j != i:
                    within.append((i, j, k))
    cross_arr = np.asarray(cross, dtype=np.int64) if cross else _empty_triples()
    within_arr = np.asarray(within, dtype=np.int64) if within else _empty_triples()
    # Terms 2 and 4 enumerate the same index structure with stream roles
    # exchanged, so the index lists coincide.
    return TripletSet(
        term1=cross_arr,
        term2=cross_arr.copy(),
        term3=within_arr,
        term4=within_arr.copy(),
    )


def _pairwise_distances(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    diff = a[:, None, :] - b[None, :, :]
    return np.sqrt(np.sum(diff * diff, axis=2))


def _term_hinges(dist_pos, dist_neg, triples, margin):
    """Hinge values m + d(anchor, pos) - d(anchor, neg) for one term."""
    if len(triples) == 0:
        return np.zeros(0)
    i, j, k = triples[:, 0], triples[:, 1], triples[:, 2]
    return margin + dist_pos[i, j] - dist_neg[i, k]


def loss_terms(
    batch: MiniBatch, triplets: TripletSet, cfg: LossConfig
) -> tuple[np.ndarray, int, int]:
    """Unweighted per-term hinge sums, active triple count, total count."""
    cfg.validate()
    b = len(batch.group_ids)
    for name, term in (
        ("term1", triplets.term1),
        ("term2", triplets.term2),
        ("term3", triplets.term3),
        ("term4", triplets.term4),
    ):
        if len(term) and (term.min() < 0 or term.max() >= b):
            raise ValueError(f"{name}: triplet index out of range for batch size {b}")

    dxy = _pairwise_distances(batch.visual, batch.sentence)
    dxx = _pairwise_distances(batch.visual, batch.visual)
    dyy = _pairwise_distances(batch.sentence, batch.sentence)

    # term2 anchors are sentences: d(x_j, y_i) indexes dxy transposed.
    hinges = [
        _term_hinges(dxy, dxy, triplets.term1, cfg.margin),
        _term_hinges(dxy.T, dxy.T, triplets.term2, cfg.margin),
        _term_hinges(dxx, dxx, triplets.term3, cfg.margin),
        _term_hinges(dyy, dyy, triplets.term4, cfg.margin),
    ]
    sums = np.array([float(np.sum(np.maximum(h, 0.0))) for h in hinges])
    active = int(sum(int(np.count_nonzero(h > 0.0)) for h in hinges))
    return sums, active, triplets.total()


def loss_forward(batch: MiniBatch, triplets: TripletSet, cfg: LossConfig) -> float:
    sums, _, _ = loss_terms(batch, triplets, cfg)
    return float(sums[0] + cfg.lambda1 * sums[1] + cfg.lambda2 * sums[2] + cfg.lambda3 * sums[3])


def loss_backward(
    batch: MiniBatch, triplets: TripletSet, cfg: LossConfig
) -> tuple[np.ndarray, np.ndarray]:
    """Exact subgradient of the loss w.r.t. both embedding matrices.

    Active hinge terms contribute through the derivative of the Euclidean
    distance d(u, v): grad_u = (u - v)/d. A distance of exactly zero inside
    an active term has a singular gradient and is reported as an error.
    """
    cfg.validate()
    x = batch.visual
    y = batch.sentence
    dx = np.zeros_like(x)
    dy = np.zeros_like(y)

    def accumulate(anchors, others, d_anchors, d_others, triples, weight, label):
        """One term family: anchor rows vs other-role rows (may alias)."""
        if len(triples) == 0 or weight == 0.0:
            return
        i, j, k = triples[:, 0], triples[:, 1], triples[:, 2]
        diff_pos = anchors[i] - others[j]
        diff_neg = anchors[i] - others[k]
        dist_pos = np.sqrt(np.sum(diff_pos * diff_pos, axis=1))
        dist_neg = np.sqrt(np.sum(diff_neg * diff_neg, axis=1))
        active = cfg.margin + dist_pos - dist_neg > 0.0
        if not np.any(active):
            return
        if np.any(dist_pos[active] == 0.0) or np.any(dist_neg[active] == 0.0):
            raise NumericalError(
                f"{label}: zero distance inside an active hinge term (singular gradient)"
            )
        i, j, k = i[active], j[active], k[active]
        gp = weight * diff_pos[active] / dist_pos[active][:, None]
        gn = weight * diff_neg[active] / dist_neg[active][:, None]
        np.add.at(d_anchors, i, gp - gn)
        np.add.at(d_others, j, -gp)
        np.add.at(d_others, k, gn)

    accumulate(x, y, dx, dy, triplets.term1, 1.0, "term1")
    accumulate(y, x, dy, dx, triplets.term2, cfg.lambda1, "term2")
    accumulate(x, x, dx, dx, triplets.term3, cfg.lambda2, "term3")
    accumulate(y, y, dy, dy, triplets.term4, cfg.lambda3, "term4")
    return dx, dy
