"""File formats and the seeded synthetic multimodal dataset generator.

Feature files are binary: magic "JEF1", version byte, uint32 LE rows/cols,
then the row-major float64 LE payload. A CSV encoding (header `dim=<cols>`,
17 significant digits) is accepted on read as a fallback. Labels and group
ids live in companion text files, one integer per line.

The generator produces class-clustered visual features, caption features
carrying a class-unique semantic direction, and per-class attributes that
can be forced identical across "collision" groups of classes, making those
classes unresolvable from attributes alone while captions stay informative.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from .compat import AttributeTable
from .errors import DataError, NumericalError
from .linalg import as_matrix, make_rng

FEATURE_MAGIC = b"JEF1"
FEATURE_VERSION = 1

ASSIGNMENTS = ("train", "test_seen", "test_unseen")


# --- feature matrices --------------------------------------------------------


def write_features(m: np.ndarray, path: str) -> None:
    m = as_matrix(m, "feature matrix")
    rows, cols = m.shape
    if rows >= 2**32 or cols >= 2**32:
        raise DataError(f"matrix {rows}x{cols} exceeds uint32 dimensions")
    with open(path, "wb") as fh:
        fh.write(FEATURE_MAGIC)
        fh.write(struct.pack("<B", FEATURE_VERSION))
        fh.write(struct.pack("<II", rows, cols))
        fh.write(np.ascontiguousarray(m, dtype="<f8").tobytes())


def write_features_csv(m: np.ndarray, path: str) -> None:
    m = as_matrix(m, "feature matrix")
    with open(path, "w") as fh:
        fh.write(f"dim={m.shape[1]}\n")
        for row in m:
            fh.write(",".join(f"{v:.17g}" for v in row) + "\n")


def read_features(path: str) -> np.ndarray:
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:4] == FEATURE_MAGIC:
        return _parse_binary_features(blob, path)
    return _parse_csv_features(blob, path)


def _parse_binary_features(blob: bytes, path: str) -> np.ndarray:
    if len(blob) < 13:
        raise DataError(f"{path}: header truncated at {len(blob)} bytes (need 13)")
    if blob[4] != FEATURE_VERSION:
        raise DataError(f"{path}: unsupported feature-file version {blob[4]}")
    rows, cols = struct.unpack_from("<II", blob, 5)
    expected = 13 + rows * cols * 8
    if len(blob) != expected:
        raise DataError(
            f"{path}: payload size mismatch, expected {expected} bytes "
            f"({rows}x{cols} float64 at offset 13), got {len(blob)}"
        )
    m = (
        np.frombuffer(blob, dtype="<f8", count=rows * cols, offset=13)
        .reshape(rows, cols)
        .astype(np.float64)
    )
    if not np.all(np.isfinite(m)):
        raise DataError(f"{path}: payload contains non-finite values")
    return m


def _parse_csv_features(blob: bytes, path: str) -> np.ndarray:
    try:
        text = blob.decode("utf-8")
    except UnicodeDecodeError as exc:
        raise DataError(f"{path}: bad magic {blob[:4]!r} and not valid CSV") from exc
    lines = [ln for ln in text.splitlines() if ln.strip()]
    if not lines or not lines[0].startswith("dim="):
        raise DataError(f"{path}: bad magic and missing CSV 'dim=' header")
    try:
        cols = int(lines[0][4:])
    except ValueError as exc:
        raise DataError(f"{path}: malformed CSV header {lines[0]!r}") from exc
    rows = []
    for n, ln in enumerate(lines[1:], 2):
        values = ln.split(",")
        if len(values) != cols:
            raise DataError(f"{path}:{n}: expected {cols} values, got {len(values)}")
        try:
            rows.append([float(v) for v in values])
        except ValueError as exc:
            raise DataError(f"{path}:{n}: non-numeric value") from exc
    m = np.asarray(rows, dtype=np.float64).reshape(len(rows), cols)
    if not np.all(np.isfinite(m)):
        raise DataError(f"{path}: contains non-finite values")
    return m


# --- labels, groups, splits --------------------------------------------------


def write_ids(ids, path: str) -> None:
    with open(path, "w") as fh:
        for v in ids:
            fh.write(f"{int(v)}\n")


def read_ids(path: str) -> np.ndarray:
    with open(path) as fh:
        lines = [ln.strip() for ln in fh if ln.strip()]
    try:
        return np.asarray([int(ln) for ln in lines], dtype=np.int64)
    except ValueError as exc:
        raise DataError(f"{path}: non-integer id line") from exc


def write_split(path: str, seen_ids, unseen_ids) -> None:
    with open(path, "w") as fh:
        fh.write("seen: " + " ".join(str(int(c)) for c in sorted(seen_ids)) + "\n")
        fh.write("unseen: " + " ".join(str(int(c)) for c in sorted(unseen_ids)) + "\n")


def read_split(path: str) -> tuple[set[int], set[int]]:
    seen: set[int] | None = None
    unseen: set[int] | None = None
    with open(path) as fh:
        for ln in fh:
            ln = ln.strip()
            if not ln:
                continue
            key, _, rest = ln.partition(":")
            ids = {int(v) for v in rest.split()}
            if key.strip() == "seen":
                seen = ids
            elif key.strip() == "unseen":
                unseen = ids
            else:
                raise DataError(f"{path}: unknown split line {ln!r}")
    if seen is None or unseen is None:
        raise DataError(f"{path}: missing 'seen:' or 'unseen:' line")
    if seen & unseen:
        raise DataError(f"{path}: seen/unseen classes overlap: {sorted(seen & unseen)}")
    return seen, unseen


def write_assignments(assignments, path: str) -> None:
    with open(path, "w") as fh:
        for a in assignments:
            if a not in ASSIGNMENTS:
                raise DataError(f"unknown assignment {a!r}")
            fh.write(a + "\n")


def read_assignments(path: str) -> list[str]:
    with open(path) as fh:
        out = [ln.strip() for ln in fh if ln.strip()]
    for n, a in enumerate(out, 1):
        if a not in ASSIGNMENTS:
            raise DataError(f"{path}:{n}: unknown assignment {a!r}")
    return out


def validate_split(
    labels: np.ndarray,
    seen: set[int],
    unseen: set[int],
    assignments: list[str],
) -> None:
    """Load-time split discipline; violations are errors, never warnings."""
    if len(labels) != len(assignments):
        raise DataError(f"{len(labels)} labels vs {len(assignments)} assignments")
    if seen & unseen:
        raise DataError(f"seen/unseen classes overlap: {sorted(seen & unseen)}")
    for i, (label, assignment) in enumerate(zip(labels, assignments)):
        label = int(label)
        if assignment == "test_unseen":
            if label not in unseen:
                raise DataError(
                    f"sample {i}: test_unseen sample has seen-class label {label}"
                )
        elif label not in seen:
            raise DataError(
                f"sample {i}: {assignment} sample has unseen-class label {label}"
            )


# --- synthetic generator -----------------------------------------------------


@dataclass
class SynthConfig:
    n_classes: int = 10
    n_seen: int = 7
    samples_per_class: int = 50
    d_visual: int = 16
    d_sentence: int = 16
    d_attr: int = 16
    cluster_spread: float = 0.3
    caption_signal: float = 0.8
    captions_per_image: int = 1
    attribute_collision_groups: list[list[int]] = field(default_factory=list)
    train_fraction: float = 0.8
    seed: int = 0

    def validate(self) -> None:
        if not 0 < self.n_seen < self.n_classes:
            raise ValueError(
                f"need 0 < n_seen < n_classes, got {self.n_seen}/{self.n_classes}"
            )
        for name in ("d_visual", "d_sentence", "d_attr"):
            if getattr(self, name) < 2:
                raise ValueError(f"{name} must be >= 2")
        if self.cluster_spread <= 0:
            raise ValueError("cluster_spread must be > 0")
        if not 0.0 <= self.caption_signal <= 1.0:
            raise ValueError("caption_signal must be in [0, 1]")
        if self.samples_per_class < 2:
            raise ValueError("samples_per_class must be >= 2")
        if self.captions_per_image < 1:
            raise ValueError("captions_per_image must be >= 1")
        if not 0.0 < self.train_fraction < 1.0:
            raise ValueError("train_fraction must be in (0, 1)")
        for group in self.attribute_collision_groups:
            for cid in group:
                if not 0 <= cid < self.n_classes:
                    raise ValueError(f"collision class {cid} outside [0, {self.n_classes})")


@dataclass
class SynthData:
    visual: np.ndarray
    sentences: np.ndarray
    labels: np.ndarray  # class id per row
    groups: np.ndarray  # positive-pair group id per row
    attributes: AttributeTable
    assignments: list[str]
    prototypes: np.ndarray  # (n_classes, d_visual) visual cluster centers


def _unit_rows(rng: np.random.Generator, n: int, d: int) -> np.ndarray:
    m = rng.standard_normal((n, d))
    return m / np.sqrt(np.sum(m * m, axis=1))[:, None]


def generate(cfg: SynthConfig) -> SynthData:
    """Deterministic synthetic dataset; a pure function of the config.

    Per class: a random unit visual prototype, a unit semantic direction that
    doubles as the attribute row, and captions mixing that direction with a
    direction shared across all classes. Collision groups overwrite their
    attribute rows with the first member's row, bit-identically.
    """
    cfg.validate()
    rng = make_rng(cfg.seed)
    C, k = cfg.n_classes, cfg.captions_per_image

    semantic = _unit_rows(rng, C, cfg.d_attr)
    prototypes = _unit_rows(rng, C, cfg.d_visual)
    shared = _unit_rows(rng, 1, cfg.d_sentence)[0]
    if cfg.d_sentence == cfg.d_attr:
        caption_dirs = semantic
    else:
        lift = rng.standard_normal((cfg.d_attr, cfg.d_sentence)) / np.sqrt(cfg.d_attr)
        caption_dirs = semantic @ lift
        caption_dirs = caption_dirs / np.sqrt(np.sum(caption_dirs**2, axis=1))[:, None]

    attributes = semantic.copy()
    for group in cfg.attribute_collision_groups:
        for cid in group[1:]:
            attributes[cid] = attributes[group[0]]

    visual_rows, sentence_rows, labels, groups, assignments = [], [], [], [], []
    n_train = max(1, int(round(cfg.train_fraction * cfg.samples_per_class)))
    if n_train >= cfg.samples_per_class:
        n_train = cfg.samples_per_class - 1
    image_id = 0
    for c in range(C):
        seen = c < cfg.n_seen
        for s in range(cfg.samples_per_class):
            vis = prototypes[c] + cfg.cluster_spread * rng.standard_normal(cfg.d_visual)
            base = cfg.caption_signal * caption_dirs[c] + (1.0 - cfg.caption_signal) * shared
            caps = base + cfg.cluster_spread * rng.standard_normal((k, cfg.d_sentence))
            if seen:
                assignment = "train" if s < n_train else "test_seen"
            else:
                assignment = "test_unseen"
            for cap in caps:
                visual_rows.append(vis)
                sentence_rows.append(cap)
                labels.append(c)
                groups.append(c)
                assignments.append(assignment)
            image_id += 1

    table = AttributeTable(
        class_ids=list(range(C)),
        attributes=attributes,
        seen_ids=set(range(cfg.n_seen)),
        unseen_ids=set(range(cfg.n_seen, C)),
    )
    return SynthData(
        visual=np.asarray(visual_rows),
        sentences=np.asarray(sentence_rows),
        labels=np.asarray(labels, dtype=np.int64),
        groups=np.asarray(groups, dtype=np.int64),
        attributes=table,
        assignments=assignments,
        prototypes=prototypes,
    )


# --- dataset directory convention -------------------------------------------

FILES = {
    "visual": "visual.jef",
    "sentences": "sentences.jef",
    "labels": "labels.txt",
    "groups": "groups.txt",
    "attributes": "attributes.jef",
    "attribute_classes": "attribute_classes.txt",
    "splits": "splits.txt",
    "assignments": "assignments.txt",
}


def save_dataset(data: SynthData, out_dir: str) -> None:
    import os

    os.makedirs(out_dir, exist_ok=True)
    join = lambda key: os.path.join(out_dir, FILES[key])
    write_features(data.visual, join("visual"))
    write_features(data.sentences, join("sentences"))
    write_ids(data.labels, join("labels"))
    write_ids(data.groups, join("groups"))
    write_features(data.attributes.attributes, join("attributes"))
    write_ids(data.attributes.class_ids, join("attribute_classes"))
    write_split(join("splits"), data.attributes.seen_ids, data.attributes.unseen_ids)
    write_assignments(data.assignments, join("assignments"))


@dataclass
class Dataset:
    visual: np.ndarray
    sentences: np.ndarray
    labels: np.ndarray
    groups: np.ndarray
    attributes: AttributeTable
    assignments: list[str]

    def rows(self, assignment: str) -> np.ndarray:
        mask = np.asarray([a == assignment for a in self.assignments])
        return np.nonzero(mask)[0]


def load_dataset(data_dir: str) -> Dataset:
    import os

    join = lambda key: os.path.join(data_dir, FILES[key])
    visual = read_features(join("visual"))
    sentences = read_features(join("sentences"))
    labels = read_ids(join("labels"))
    groups = read_ids(join("groups"))
    attrs = read_features(join("attributes"))
    attr_classes = read_ids(join("attribute_classes"))
    seen, unseen = read_split(join("splits"))
    assignments = read_assignments(join("assignments"))
    if not (len(visual) == len(sentences) == len(labels) == len(groups)):
        raise DataError(
            f"{data_dir}: row counts disagree across visual/sentences/labels/groups"
        )
    validate_split(labels, seen, unseen, assignments)
    table = AttributeTable(
        class_ids=[int(c) for c in attr_classes],
        attributes=attrs,
        seen_ids=seen,
        unseen_ids=unseen,
    )
    return Dataset(
        visual=visual,
        sentences=sentences,
        labels=labels,
        groups=groups,
        attributes=table,
        assignments=assignments,
    )
