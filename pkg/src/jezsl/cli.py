"""Command-line entry point.

Subcommands: gen-synth, train-embed, embed, train-zsl, eval, gradcheck.

Every option can also come from a plain-text key=value config file
(`--config FILE`); explicit flags win on conflict. Each command writes a
manifest of its fully resolved configuration next to its outputs; feeding
that manifest back through --config reproduces the run bit-exactly.

Exit codes: 0 success, 1 usage error, 2 data/format error, 3 numerical
failure. Logging verbosity comes from JEZSL_LOG=debug|info|quiet.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys

import numpy as np

from . import __version__
from .alignment import LossConfig
from .compat import LabeledEmbeddings, load_model, save_model, train_compatibility
from .data import (
    Dataset,
    SynthConfig,
    generate,
    load_dataset,
    read_features,
    save_dataset,
    write_features,
)
from .errors import DataError, NumericalError
from .gradcheck import TOLERANCE, run_all
from .heads import forward, init_head, load_head, save_head
from .linalg import make_rng
from .metrics import evaluate, format_kv, format_report
from .trainer import (
    TrainConfig,
    TrainState,
    load_train_state,
    save_train_state,
    train_joint,
)

log = logging.getLogger("jezsl")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # exit 1 on usage errors, not argparse's 2
        raise UsageError(message)


def _parse_bool(s: str) -> bool:
    v = s.strip().lower()
    if v in ("true", "1", "yes"):
        return True
    if v in ("false", "0", "no"):
        return False
    raise ValueError(f"not a boolean: {s!r}")


class Opt:
    def __init__(self, name, typ, default, help="", flag=False):
        self.name = name  # dest / manifest key, underscores
        self.typ = typ
        self.default = default
        self.help = help
        self.flag = flag  # boolean store_true option

    @property
    def cli(self) -> str:
        return "--" + self.name.replace("_", "-")


COMMON = [Opt("seed", int, 0, "master seed for all randomness"),
          Opt("config", str, None, "key=value config file; flags win on conflict")]


COMMANDS: dict[str, list[Opt]] = {
    "gen-synth": COMMON + [
        Opt("classes", int, 10, "total number of classes"),
        Opt("seen", int, 7, "number of seen classes (ids 0..seen-1)"),
        Opt("per_class", int, 50, "samples per class"),
        Opt("d_visual", int, 16, "visual feature dimensionality"),
        Opt("d_sentence", int, 16, "sentence feature dimensionality"),
        Opt("d_attr", int, 16, "attribute dimensionality"),
        Opt("spread", float, 0.3, "cluster noise scale"),
        Opt("caption_signal", float, 0.8, "class-unique share of caption direction"),
        Opt("captions_per_image", int, 1, "caption variants per image"),
        Opt("collide", str, "", "attribute collision groups, e.g. '3,4' or '3,4;5,6'"),
        Opt("out", str, None, "output dataset directory"),
    ],
    "train-embed": COMMON + [
        Opt("data", str, None, "dataset directory from gen-synth"),
        Opt("out", str, None, "output directory for checkpoints and log"),
        Opt("dim", int, 16, "joint embedding dimensionality"),
        Opt("hidden", int, 0, "hidden width (0: same as --dim)"),
        Opt("margin", float, 0.1, "hinge margin"),
        Opt("lambda1", float, 2.0, "weight of the sentence-anchored ranking term"),
        Opt("lambda2", float, 0.1, "weight of the visual neighborhood term"),
        Opt("lambda3", float, 0.2, "weight of the sentence neighborhood term"),
        Opt("epochs", int, 50, "training epochs"),
        Opt("batch_size", int, 32, "minibatch size (>= 2)"),
        Opt("lr", float, 0.01, "learning rate"),
        Opt("momentum", float, 0.9, "SGD momentum"),
        Opt("balanced_batches", bool, False, "force >= 2 groups per batch", flag=True),
        Opt("rows", str, "all", "which rows to train on: all|train"),
        Opt("checkpoint_every", int, 0, "save state every N epochs (0: only at end)"),
        Opt("resume", bool, False, "resume from trainer state in --out", flag=True),
    ],
    "embed": COMMON + [
        Opt("checkpoint", str, None, "head checkpoint (.jeh)"),
        Opt("features", str, None, "input feature file"),
        Opt("out", str, None, "output feature file"),
        Opt("raw_passthrough", bool, False, "copy features unembedded (baseline arm)", flag=True),
    ],
    "train-zsl": COMMON + [
        Opt("data", str, None, "dataset directory (attributes, splits, labels)"),
        Opt("features", str, None, "embedding file aligned with the dataset rows"),
        Opt("out", str, None, "output directory for the model"),
        Opt("margin", float, 0.1, "ranking margin"),
        Opt("lr", float, 0.01, "learning rate"),
        Opt("epochs", int, 100, "training epochs"),
    ],
    "eval": COMMON + [
        Opt("data", str, None, "dataset directory"),
        Opt("features", str, None, "embedding file aligned with the dataset rows"),
        Opt("model", str, None, "compatibility model file (.jec)"),
        Opt("out", str, None, "output directory for reports"),
    ],
    "gradcheck": COMMON + [
        Opt("trials", int, 20, "random configurations per component"),
        Opt("corrupt_gradient", bool, False,
            "deliberately corrupt gradients (negative-control test hook)", flag=True),
    ],
}

REQUIRED = {
    "gen-synth": ["out"],
    "train-embed": ["data", "out"],
    "embed": ["checkpoint", "features", "out"],
    "train-zsl": ["data", "features", "out"],
    "eval": ["data", "features", "model", "out"],
    "gradcheck": [],
}


def _read_config(path: str) -> dict[str, str]:
    values = {}
    try:
        with open(path) as fh:
            for n, ln in enumerate(fh, 1):
                ln = ln.strip()
                if not ln or ln.startswith("#"):
                    continue
                if "=" not in ln:
                    raise DataError(f"{path}:{n}: expected key=value, got {ln!r}")
                key, _, val = ln.partition("=")
                values[key.strip()] = val.strip()
    except OSError as exc:
        raise DataError(f"cannot read config {path}: {exc}") from exc
    return values


def _resolve(command: str, args: argparse.Namespace) -> dict:
    """defaults < config file < explicit flags."""
    opts = {o.name: o for o in COMMANDS[command]}
    resolved = {name: o.default for name, o in opts.items()}
    if args.config is not None:
        for key, raw in _read_config(args.config).items():
            if key in ("command", "version") or key not in opts:
                continue  # manifests carry extra bookkeeping keys
            o = opts[key]
            conv = _parse_bool if o.typ is bool else o.typ
            try:
                resolved[key] = conv(raw)
            except ValueError as exc:
                raise UsageError(f"config key {key}: {exc}") from exc
        resolved["config"] = args.config
    for name in opts:
        val = getattr(args, name, None)
        if val is not None and not (opts[name].flag and val is False):
            resolved[name] = val
    missing = [n for n in REQUIRED[command] if resolved.get(n) is None]
    if missing:
        raise UsageError(f"{command}: missing required option(s): "
                         + ", ".join(opts[n].cli for n in missing))
    return resolved


def _write_manifest(command: str, cfg: dict, out_dir: str, name: str = "manifest.txt"):
    os.makedirs(out_dir, exist_ok=True)
    path = os.path.join(out_dir, name)
    lines = [f"command={command}", f"version={__version__}"]
    for key in sorted(cfg):
        if key == "config":
            continue
        val = cfg[key]
        if isinstance(val, bool):
            val = "true" if val else "false"
        lines.append(f"{key}={val}")
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")


def _parse_collide(text: str) -> list[list[int]]:
    groups = []
    for part in text.replace(";", " ").split():
        ids = [int(v) for v in part.split(",") if v != ""]
        if len(ids) >= 2:
            groups.append(ids)
        elif ids:
            raise UsageError(f"--collide group needs >= 2 classes, got {part!r}")
    return groups


# --- command implementations -------------------------------------------------


def cmd_gen_synth(cfg: dict) -> int:
    try:
        synth_cfg = SynthConfig(
            n_classes=cfg["classes"],
            n_seen=cfg["seen"],
            samples_per_class=cfg["per_class"],
            d_visual=cfg["d_visual"],
            d_sentence=cfg["d_sentence"],
            d_attr=cfg["d_attr"],
            cluster_spread=cfg["spread"],
            caption_signal=cfg["caption_signal"],
            captions_per_image=cfg["captions_per_image"],
            attribute_collision_groups=_parse_collide(cfg["collide"]),
            seed=cfg["seed"],
        )
        synth_cfg.validate()
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    data = generate(synth_cfg)
    save_dataset(data, cfg["out"])
    _write_manifest("gen-synth", cfg, cfg["out"])
    log.info("wrote %d samples, %d classes to %s", len(data.labels),
             synth_cfg.n_classes, cfg["out"])
    return 0


def _training_rows(ds: Dataset, rows: str) -> np.ndarray:
    if rows == "all":
        return np.arange(len(ds.labels))
    if rows == "train":
        return ds.rows("train")
    raise UsageError(f"--rows must be all|train, got {rows!r}")


def cmd_train_embed(cfg: dict) -> int:
    ds = load_dataset(cfg["data"])
    idx = _training_rows(ds, cfg["rows"])
    if len(idx) == 0:
        raise DataError("no training rows selected")
    d_out = cfg["dim"]
    d_hidden = cfg["hidden"] or d_out

    out = cfg["out"]
    os.makedirs(out, exist_ok=True)
    state = None
    path_v = os.path.join(out, "head_v.jeh")
    path_s = os.path.join(out, "head_s.jeh")
    path_state = os.path.join(out, "trainer_state.jet")
    if cfg["resume"] and os.path.exists(path_state):
        head_v = load_head(path_v)
        head_s = load_head(path_s)
        state = load_train_state(path_state)
        log.info("resuming at epoch %d", state.next_epoch + 1)
    else:
        # Sub-seeds keep the two heads' initializations independent of each
        # other and of the shuffling stream.
        head_v = init_head(ds.visual.shape[1], d_hidden, d_out, make_rng(cfg["seed"] + 1))
        head_s = init_head(ds.sentences.shape[1], d_hidden, d_out, make_rng(cfg["seed"] + 2))

    loss_cfg = LossConfig(margin=cfg["margin"], lambda1=cfg["lambda1"],
                          lambda2=cfg["lambda2"], lambda3=cfg["lambda3"])
    train_cfg = TrainConfig(
        epochs=cfg["epochs"],
        batch_size=cfg["batch_size"],
        learning_rate=cfg["lr"],
        momentum=cfg["momentum"],
        seed=cfg["seed"],
        balanced_batches=cfg["balanced_batches"],
        checkpoint_every=cfg["checkpoint_every"],
    )
    try:
        train_cfg.validate()
        loss_cfg.validate()
    except ValueError as exc:
        raise UsageError(str(exc)) from exc

    if state is None:
        state = TrainState.fresh(head_v, head_s)
    head_v, head_s, tlog = train_joint(
        ds.visual[idx], ds.sentences[idx], ds.groups[idx],
        head_v, head_s, loss_cfg, train_cfg,
        state=state, checkpoint_dir=out,
    )
    save_head(head_v, path_v)
    save_head(head_s, path_s)
    save_train_state(state, path_state)

    log_lines = list(tlog.lines())
    with open(os.path.join(out, "train_log.txt"), "w") as fh:
        fh.write("\n".join(log_lines) + ("\n" if log_lines else ""))
    for ln in log_lines:
        print(ln)
    _write_manifest("train-embed", cfg, out)
    return 0


def cmd_embed(cfg: dict) -> int:
    features = read_features(cfg["features"])
    if cfg["raw_passthrough"]:
        write_features(features, cfg["out"])
    else:
        head = load_head(cfg["checkpoint"])
        if features.shape[1] != head.d_in:
            raise DataError(
                f"{cfg['features']}: {features.shape[1]} columns but checkpoint "
                f"{cfg['checkpoint']} expects {head.d_in}"
            )
        embeddings, _ = forward(head, features, train=False)
        write_features(embeddings, cfg["out"])
    out_dir = os.path.dirname(os.path.abspath(cfg["out"])) or "."
    _write_manifest("embed", cfg, out_dir,
                    name=os.path.basename(cfg["out"]) + ".manifest.txt")
    return 0


def cmd_train_zsl(cfg: dict) -> int:
    ds = load_dataset(cfg["data"])
    embeddings = read_features(cfg["features"])
    if len(embeddings) != len(ds.labels):
        raise DataError(
            f"{cfg['features']}: {len(embeddings)} rows but dataset has {len(ds.labels)}"
        )
    idx = ds.rows("train")
    if len(idx) == 0:
        raise DataError("dataset has no train rows")
    data = LabeledEmbeddings(embeddings[idx], ds.labels[idx])
    model = train_compatibility(
        data, ds.attributes,
        margin=cfg["margin"], learning_rate=cfg["lr"],
        epochs=cfg["epochs"], seed=cfg["seed"],
    )
    out = cfg["out"]
    os.makedirs(out, exist_ok=True)
    save_model(model, os.path.join(out, "model.jec"))
    _write_manifest("train-zsl", cfg, out)
    return 0


def cmd_eval(cfg: dict) -> int:
    ds = load_dataset(cfg["data"])
    embeddings = read_features(cfg["features"])
    if len(embeddings) != len(ds.labels):
        raise DataError(
            f"{cfg['features']}: {len(embeddings)} rows but dataset has {len(ds.labels)}"
        )
    model = load_model(cfg["model"])
    seen_idx = ds.rows("test_seen")
    unseen_idx = ds.rows("test_unseen")
    report = evaluate(
        model,
        LabeledEmbeddings(embeddings[seen_idx], ds.labels[seen_idx]),
        LabeledEmbeddings(embeddings[unseen_idx], ds.labels[unseen_idx]),
        ds.attributes,
    )
    out = cfg["out"]
    os.makedirs(out, exist_ok=True)
    text = format_report(report)
    with open(os.path.join(out, "report.txt"), "w") as fh:
        fh.write(text)
    with open(os.path.join(out, "report.kv"), "w") as fh:
        fh.write(format_kv(report))
    print(text, end="")
    _write_manifest("eval", cfg, out)
    return 0


def cmd_gradcheck(cfg: dict) -> int:
    results = run_all(trials=cfg["trials"], seed=cfg["seed"],
                      corrupt=cfg["corrupt_gradient"])
    failed = False
    for r in results:
        status = "PASS" if r.passed else "FAIL"
        print(f"{r.name}: worst relative error {r.worst_rel_err:.3e} "
              f"over {r.trials} configurations [{status}]")
        failed = failed or not r.passed
    if failed:
        print(f"gradcheck FAILED (tolerance {TOLERANCE:g})")
        return 3
    print(f"gradcheck passed (tolerance {TOLERANCE:g})")
    return 0


HANDLERS = {
    "gen-synth": cmd_gen_synth,
    "train-embed": cmd_train_embed,
    "embed": cmd_embed,
    "train-zsl": cmd_train_zsl,
    "eval": cmd_eval,
    "gradcheck": cmd_gradcheck,
}


def build_parser() -> _Parser:
    parser = _Parser(prog="jezsl", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", metavar="COMMAND")
    for command, opts in COMMANDS.items():
        p = sub.add_parser(command, help=None)
        for o in opts:
            if o.flag:
                p.add_argument(o.cli, dest=o.name, action="store_true", default=False,
                               help=o.help)
            else:
                p.add_argument(o.cli, dest=o.name, type=o.typ, default=None,
                               help=o.help + (f" (default {o.default})"
                                              if o.default is not None else ""))
    return parser


def _setup_logging():
    level = os.environ.get("JEZSL_LOG", "info").lower()
    levels = {"debug": logging.DEBUG, "info": logging.INFO, "quiet": logging.ERROR}
    logging.basicConfig(level=levels.get(level, logging.INFO),
                        format="%(levelname)s %(name)s: %(message)s")


def main(argv: list[str] | None = None) -> int:
    _setup_logging()
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            parser.print_help()
            return 1
        cfg = _resolve(args.command, args)
        return HANDLERS[args.command](cfg)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 2
    except (OSError, ValueError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 2
    except NumericalError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
