"""``agestyle`` command line: toygen, train, translate, augment, audit-diversity, eval-age.

Exit codes: 0 success, 1 user error (bad flags, paths or inputs), 2 internal error.
Every subcommand writes only below ``--out``. Option values resolve as
built-in defaults < ``--config FILE`` (YAML or JSON mapping of option names) <
command-line flags.
"""

from __future__ import annotations

import argparse
import json
import logging
import secrets
import sys
import traceback
from pathlib import Path

import yaml

from . import __version__

logger = logging.getLogger("agestyle")

EXIT_OK, EXIT_USER, EXIT_INTERNAL = 0, 1, 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _kebab(name: str) -> str:
    return "--" + name.replace("_", "-")


def _common(p: argparse.ArgumentParser, seed: bool = True):
    p.add_argument("--out", help="output directory (all writes go here)")
    p.add_argument("--config", dest="config_file", help="YAML/JSON file of option values")
    p.add_argument("--jobs", type=int, help="worker cap for threads and I/O")
    if seed:
        p.add_argument("--seed", type=int, help="root seed; generated and printed when absent")
    p.add_argument("-v", "--verbose", action="count")


def _train_options(p: argparse.ArgumentParser):
    from .trainer import TrainConfig

    for key, default in TrainConfig.flat_keys().items():
        if key == "seed":
            continue
        # both --learning-rate and --learning_rate are accepted
        names = list(dict.fromkeys([_kebab(key), "--" + key]))
        if isinstance(default, bool):
            p.add_argument(*names, dest=key, action=argparse.BooleanOptionalAction)
        else:
            p.add_argument(*names, dest=key, type=type(default), help=f"default {default}")


# built-in defaults of each subcommand's options, after argparse.SUPPRESS
DEFAULTS = {
    "toygen": {"image_size": 64, "samples_per_group": 200, "noise_level": 0.05, "test_fraction": None},
    "train": {"resume": None},
    "translate": {},
    "augment": {"train_manifest": None, "picker": "uniform", "estimator": "toy", "estimator_cmd": None},
    "audit-diversity": {},
    "eval-age": {"targets": None, "estimator": "toy", "estimator_cmd": None, "gt_means": None,
                 "gt_preset": None},
}
REQUIRED = {
    "toygen": ("out",),
    "train": ("out", "manifest"),
    "translate": ("out", "checkpoint", "input", "target"),
    "augment": ("out", "checkpoint", "manifest"),
    "audit-diversity": ("out", "manifest"),
    "eval-age": ("out", "checkpoint", "manifest"),
}


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="agestyle", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)
    kw = {"argument_default": argparse.SUPPRESS}

    p = sub.add_parser("toygen", help="generate the synthetic ring corpus", **kw)
    _common(p)
    p.add_argument("--image-size", type=int)
    p.add_argument("--samples-per-group", type=int)
    p.add_argument("--noise-level", type=float)
    p.add_argument("--test-fraction", type=float, help="also write stratified train.csv/test.csv")

    p = sub.add_parser("train", help="train generator and discriminator", **kw)
    _common(p)
    p.add_argument("--manifest", help="training manifest CSV")
    p.add_argument("--resume", help="checkpoint to continue from")
    _train_options(p)

    p = sub.add_parser("translate", help="translate one image into a target's age style", **kw)
    _common(p, seed=False)
    p.add_argument("--checkpoint")
    p.add_argument("--input")
    p.add_argument("--target")

    p = sub.add_parser("augment", help="translate a test set to all other age groups", **kw)
    _common(p)
    p.add_argument("--checkpoint")
    p.add_argument("--manifest", help="test manifest to augment")
    p.add_argument("--train-manifest", help="fallback targets for groups missing from the test set")
    p.add_argument("--picker", choices=("uniform", "oldest"))
    p.add_argument("--estimator", help="registered estimator for --picker oldest")
    p.add_argument("--estimator-cmd", help="external estimator command for --picker oldest")

    p = sub.add_parser("audit-diversity", help="Shannon/Simpson indices of a manifest", **kw)
    _common(p, seed=False)
    p.add_argument("--manifest")

    p = sub.add_parser("eval-age", help="aging accuracy of youngest-group translations", **kw)
    _common(p)
    p.add_argument("--checkpoint")
    p.add_argument("--manifest", help="source manifest; only the youngest group is used")
    p.add_argument("--targets", help="target manifest (default: --manifest)")
    p.add_argument("--estimator", help="registered estimator name (default toy)")
    p.add_argument("--estimator-cmd", help="external command printing one decimal age")
    p.add_argument("--gt-means", help="comma-separated reference means for groups 1..3")
    p.add_argument("--gt-preset", choices=("morph", "cacd", "toy"))
    return parser


def _load_config(path: str) -> dict:
    try:
        with open(path, encoding="utf-8") as fh:
            data = yaml.safe_load(fh) or {}
    except FileNotFoundError:
        raise UsageError(f"config file not found: {path}") from None
    except yaml.YAMLError as exc:
        raise UsageError(f"cannot parse config file {path}: {exc}") from None
    if not isinstance(data, dict):
        raise UsageError(f"config file {path} must hold a mapping")
    return {str(k).replace("-", "_"): v for k, v in data.items()}


def resolve_options(parser: argparse.ArgumentParser, argv) -> dict:
    ns = parser.parse_args(argv)
    given = vars(ns)
    command = given.pop("command", None)
    if command is None:
        raise UsageError("a subcommand is required: " + ", ".join(DEFAULTS))
    subparser = parser._subparsers._group_actions[0].choices[command]
    allowed = {a.dest for a in subparser._actions if a.dest not in ("help", "config_file")}

    opts = {"jobs": 1, "verbose": 0, "seed": None, **DEFAULTS[command]}
    config_file = given.pop("config_file", None)
    if config_file:
        from_file = _load_config(config_file)
        unknown = set(from_file) - allowed
        if unknown:
            raise UsageError(f"unknown keys in {config_file}: {', '.join(sorted(unknown))}")
        opts.update(from_file)
    opts.update(given)
    missing = [k for k in REQUIRED[command] if opts.get(k) is None]
    if missing:
        raise UsageError(f"{command}: missing required option(s): {', '.join(_kebab(m) for m in missing)}")
    if opts["jobs"] < 1:
        raise UsageError("--jobs must be >= 1")
    opts["command"] = command
    return opts


def _ensure_seed(opts: dict) -> int:
    if opts.get("seed") is None:
        opts["seed"] = secrets.randbelow(2**31)
        print(f"seed: {opts['seed']}")
        logger.info("generated seed %d", opts["seed"])
    return opts["seed"]


def _write_json(data, path: Path) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(data, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return path


def _estimator(opts):
    from .augment_eval import SubprocessEstimator, get_estimator

    if opts.get("estimator_cmd"):
        return SubprocessEstimator(opts["estimator_cmd"])
    try:
        return get_estimator(opts.get("estimator") or "toy")
    except KeyError as exc:
        raise UsageError(str(exc.args[0])) from None


# -- subcommands ---------------------------------------------------------------


def cmd_toygen(opts: dict, out: Path) -> int:
    from .dataset import ToySpec, generate_toy, split, write_manifest

    spec = ToySpec(image_size=opts["image_size"], samples_per_group=opts["samples_per_group"],
                   noise_level=opts["noise_level"], seed=opts["seed"])
    manifest = generate_toy(spec, out)
    if opts["test_fraction"] is not None:
        train, test = split(manifest, opts["test_fraction"], opts["seed"])
        write_manifest(train, out / "train.csv")
        write_manifest(test, out / "test.csv")
    print(f"wrote {len(manifest)} images to {out}")
    return EXIT_OK


def cmd_train(opts: dict, out: Path) -> int:
    from .dataset import load_manifest
    from .plotting import plot_loss_curves
    from .trainer import TrainConfig, load_checkpoint, read_loss_log, train

    keys = TrainConfig.flat_keys()
    values = {k: opts[k] for k in keys if opts.get(k) is not None}
    resume = None
    if opts["resume"]:
        resume = load_checkpoint(opts["resume"])
        # checkpoint config is the base; flags may only extend the step budget
        values = {**resume.config.to_flat(), **{k: v for k, v in values.items() if k != "seed"}}
        if opts.get("seed") is not None and opts["seed"] != resume.config.seed:
            raise UsageError("--seed differs from the checkpoint's seed")
    else:
        values["seed"] = opts["seed"]
    config = TrainConfig.from_flat(values)
    _write_json(config.to_flat(), out / "config.json")

    manifest = load_manifest(opts["manifest"])
    state = train(config, manifest, out_dir=out, resume=resume, jobs=opts["jobs"])
    rows = read_loss_log(out / "losses.csv")
    if rows:
        plot_loss_curves(rows, out / "losses.png")
    print(f"trained to step {state.step}; checkpoint {out / 'checkpoint_final.pt'}")
    return EXIT_OK


def cmd_translate(opts: dict, out: Path) -> int:
    from .dataset import load_image, save_image
    from .plotting import plot_translation_grid
    from .trainer import Translator, load_checkpoint

    translator = Translator(load_checkpoint(opts["checkpoint"]).model)
    x = load_image(opts["input"], translator.image_size)
    target = load_image(opts["target"], translator.image_size)
    y = translator(x, target)
    save_image(y, out / "translated.png")
    plot_translation_grid([[x, target, y]], out / "translation.png", titles=["input", "target", "output"])
    print(f"wrote {out / 'translated.png'}")
    return EXIT_OK


def cmd_augment(opts: dict, out: Path) -> int:
    from .augment_eval import OldestTargetPicker, augment, diversity_report, format_diversity_table
    from .dataset import class_distribution, load_manifest
    from .plotting import plot_class_distributions
    from .trainer import Translator, load_checkpoint

    test_set = load_manifest(opts["manifest"])
    train_set = load_manifest(opts["train_manifest"]) if opts["train_manifest"] else None
    translator = Translator(load_checkpoint(opts["checkpoint"]).model)
    picker = None
    if opts["picker"] == "oldest":
        picker = OldestTargetPicker(_estimator(opts), image_size=translator.image_size)
    augmented = augment(translator, test_set, out, target_picker=picker, train_set=train_set,
                        seed=opts["seed"], jobs=opts["jobs"])
    before, after = diversity_report(test_set), diversity_report(augmented)
    _write_json({"before": before.to_dict(), "after": after.to_dict(),
                 "n_before": len(test_set), "n_after": len(augmented)}, out / "diversity.json")
    plot_class_distributions({"original": class_distribution(test_set),
                              "augmented": class_distribution(augmented)}, out / "diversity.png")
    print(format_diversity_table({"original": before, "augmented": after}))
    print(f"wrote {len(augmented)} records to {out / 'manifest.csv'}")
    return EXIT_OK


def cmd_audit(opts: dict, out: Path) -> int:
    from .augment_eval import diversity_report, format_diversity_table
    from .dataset import load_manifest
    from .plotting import plot_class_distributions

    manifest = load_manifest(opts["manifest"])
    report = diversity_report(manifest)
    _write_json(report.to_dict(), out / "diversity.json")
    plot_class_distributions({manifest.source_name: report.distribution}, out / "distribution.png")
    print(format_diversity_table({manifest.source_name or "manifest": report}))
    return EXIT_OK


def cmd_eval_age(opts: dict, out: Path) -> int:
    from .augment_eval import GT_PRESETS, aging_accuracy
    from .dataset import load_manifest
    from .plotting import plot_age_accuracy
    from .trainer import Translator, load_checkpoint

    source = load_manifest(opts["manifest"])
    targets = load_manifest(opts["targets"]) if opts["targets"] else source
    gt = None
    if opts["gt_means"]:
        try:
            vals = [float(v) for v in str(opts["gt_means"]).split(",")]
        except ValueError:
            raise UsageError("--gt-means must be three comma-separated numbers") from None
        if len(vals) != 3:
            raise UsageError("--gt-means must be three comma-separated numbers")
        gt = dict(zip((1, 2, 3), vals))
    elif opts["gt_preset"]:
        gt = GT_PRESETS[opts["gt_preset"]]
    translator = Translator(load_checkpoint(opts["checkpoint"]).model)
    report = aging_accuracy(translator, source, targets, _estimator(opts), gt_means=gt, seed=opts["seed"])
    _write_json(report.to_dict(), out / "age_accuracy.json")
    if report.per_target_group:
        plot_age_accuracy(report, out / "age_accuracy.png")
    print(report.table())
    return EXIT_OK


COMMANDS = {
    "toygen": cmd_toygen,
    "train": cmd_train,
    "translate": cmd_translate,
    "augment": cmd_augment,
    "audit-diversity": cmd_audit,
    "eval-age": cmd_eval_age,
}
SEEDED = {"toygen", "train", "augment", "eval-age"}


def run(argv=None) -> int:
    from .dataset import ManifestError
    from .trainer import CheckpointError, EmptyGroupError

    try:
        opts = resolve_options(build_parser(), argv)
        logging.basicConfig(level=logging.DEBUG if opts["verbose"] > 1 else
                            logging.INFO if opts["verbose"] else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s")
        import torch

        torch.set_num_threads(opts["jobs"])
        out = Path(opts["out"])
        out.mkdir(parents=True, exist_ok=True)
        # a resumed run keeps the checkpoint's seed
        if opts["command"] in SEEDED and not opts.get("resume"):
            _ensure_seed(opts)
        _write_json({k: v for k, v in opts.items() if k not in ("verbose", "out")}, out / "run.json")
        return COMMANDS[opts["command"]](opts, out)
    except SystemExit as exc:  # --help / --version
        return exc.code if isinstance(exc.code, int) else EXIT_OK
    except (UsageError, FileNotFoundError, ManifestError, CheckpointError, EmptyGroupError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USER
    except Exception:
        print("internal error:", file=sys.stderr)
        traceback.print_exc()
        return EXIT_INTERNAL


def main():
    sys.exit(run())
