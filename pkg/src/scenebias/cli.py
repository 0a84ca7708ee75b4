"""Command-line front end: ``scenebias <command> [flags]``.

Every option has a default. A JSON file given with ``--config`` overrides the
defaults and explicit flags override the file. The fully resolved options are
written out as ``config.resolved`` before any work starts; feeding that file
back through ``--config`` replays the run.

Exit codes: 0 success, 1 I/O failure, 2 usage or validation error, 3 malformed
input file, 4 numeric failure (NaN or inf during training).
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import math
import sys
import warnings
from dataclasses import replace
from pathlib import Path

import numpy as np

from scenebias import checkpoint
from scenebias.data import ActionFamily, DatasetSpec, Role, generate_dataset, read_dataset, scene_agreement, write_dataset
from scenebias.errors import ConfigError, DimensionError, FormatError, NumericError
from scenebias.metrics import (
    SweepConfig, Target, TransferMode, aggregate_reports, bias_from_accuracy, bias_sweep, linear_probe, probe_model,
    target_splits, transfer_eval,
)
from scenebias.model import DebiasModel, cam, cam_actor_contrast
from scenebias.teacher import TeacherModel, train_teacher
from scenebias.training import Pairing, TrainConfig, init_params, model_config_for, pretrain

EXIT_OK, EXIT_IO, EXIT_USAGE, EXIT_FORMAT, EXIT_NUMERIC = 0, 1, 2, 3, 4
RESOLVED = "config.resolved"


class UsageError(Exception):
    """Bad or missing option detected after the config has been merged."""


# ---------------------------------------------------------------------------
# option registry


class _Command:
    def __init__(self, sub, name: str, help: str, out_default: str, out_is_dir: bool = True):
        self.parser = sub.add_parser(name, help=help, argument_default=argparse.SUPPRESS)
        self.name = name
        self.out_is_dir = out_is_dir
        self.defaults: dict = {}
        self.opt("--seed", 0, type=int, help="root seed for every random draw of this command")
        self.opt("--config", None, help="JSON file of option values; flags take precedence")
        self.opt("--out", out_default, help="output directory" if out_is_dir else "output file")

    def opt(self, flag: str, default, **kwargs):
        action = self.parser.add_argument(flag, **kwargs)
        self.defaults[action.dest] = default
        return self

    def flag(self, name: str, default: bool, help: str):
        return self.opt(f"--{name}", default, action=argparse.BooleanOptionalAction, help=help)


def _dataset_options(cmd: _Command):
    cmd.opt("--n", 8, type=int, help="number of action classes")
    cmd.opt("--m", 4, type=int, help="number of scene classes")
    cmd.opt("--frames", 8, type=int)
    cmd.opt("--height", 16, type=int)
    cmd.opt("--width", 16, type=int)
    cmd.opt("--beta", 0.9, type=float, help="probability that the scene is the action's preferred scene")
    cmd.opt("--count", 2000, type=int, help="number of clips")
    cmd.opt("--family", "cardinal", choices=["cardinal", "diagonal"], help="action-to-velocity assignment")


def _train_options(cmd: _Command):
    d = TrainConfig()
    cmd.opt("--lr0", d.lr0, type=float, help="initial learning rate")
    cmd.opt("--momentum", d.momentum, type=float)
    cmd.opt("--weight-decay", d.weight_decay, type=float)
    cmd.opt("--lam", d.lam, type=float, help="gradient reversal strength")
    cmd.opt("--epochs", d.epochs, type=int)
    cmd.opt("--batch-size", d.batch_size, type=int)
    cmd.opt("--plateau-patience", d.plateau_patience, type=int)
    cmd.opt("--plateau-threshold", d.plateau_threshold, type=float)
    cmd.opt("--lr-divisor", d.lr_divisor, type=float)
    cmd.opt("--max-decays", d.max_decays, type=int)
    cmd.flag("adv", d.use_adv, "scene adversarial loss through gradient reversal")
    cmd.flag("ent", d.use_ent, "entropy maximisation on actor-masked clips")
    cmd.opt("--pseudo", d.pseudo_mode.value, choices=["soft", "hard"], help="pseudo scene label type")
    cmd.opt("--masked-pairing", d.masked_pairing.value, choices=["paired", "independent"])
    cmd.opt("--motion-gain", 8.0, type=float, help="scale of the frame-difference input channel")


def build_parser() -> tuple[argparse.ArgumentParser, dict[str, _Command]]:
    parser = argparse.ArgumentParser(prog="scenebias", description="Scene-debiased action representation experiments.")
    sub = parser.add_subparsers(dest="command", required=True)
    cmds: dict[str, _Command] = {}

    c = cmds["gen"] = _Command(sub, "gen", "generate a synthetic dataset file", "data.sbd", out_is_dir=False)
    _dataset_options(c)
    c.opt("--role", "train", choices=["train", "val", "test"], help="split whose clip stream is drawn")

    c = cmds["teach"] = _Command(sub, "teach", "train the scene teacher", "teacher.ckpt", out_is_dir=False)
    c.opt("--data", None, help="training dataset file")
    c.opt("--val", None, help="held-out dataset file (default: a seeded 20%% of --data)")
    c.opt("--epochs", 10, type=int)
    c.opt("--lr", 0.05, type=float)

    c = cmds["pretrain"] = _Command(sub, "pretrain", "pretrain the feature extractor", "run")
    c.opt("--data", None, help="training dataset file")
    c.opt("--val", None, help="validation dataset file")
    c.opt("--teacher", None, help="teacher checkpoint (needed with --adv)")
    _train_options(c)
    c.flag("record-time", False, "fill the seconds column of train.csv (makes the log non-reproducible)")

    c = cmds["probe"] = _Command(sub, "probe", "linear probe on frozen features", "probe")
    c.opt("--ckpt", None, help="model checkpoint")
    c.opt("--data", None, help="dataset file")
    c.opt("--target", "scene", choices=["action", "scene"])

    c = cmds["bias"] = _Command(sub, "bias", "scene representation bias of a dataset", "bias")
    c.opt("--data", None, help="dataset file")
    c.opt("--teacher", None, help="teacher checkpoint supplying scene-only features")

    c = cmds["transfer"] = _Command(sub, "transfer", "transfer a checkpoint to novel actions", "transfer")
    c.opt("--ckpt", None, help="model checkpoint")
    c.opt("--mode", "frozen_probe", choices=["frozen_probe", "finetune"])
    c.opt("--data", None, help="target training file (default: generate the target splits)")
    c.opt("--val", None, help="target validation file")
    c.opt("--test", None, help="target test file")
    c.opt("--target-beta", 0.5, type=float)
    c.opt("--target-count", 2000, type=int)
    c.opt("--target-family", "diagonal", choices=["cardinal", "diagonal"])
    c.opt("--source-family", "cardinal", choices=["cardinal", "diagonal"])
    _train_options(c)

    c = cmds["sweep"] = _Command(sub, "sweep", "transfer gain against target scene bias", "sweep")
    c.opt("--source-beta", 0.9, type=float)
    c.opt("--source-count", 2000, type=int)
    c.opt("--target-betas", "0,0.25,0.5,0.75,0.95", help="comma-separated target betas (at least 3)")
    c.opt("--target-count", 2000, type=int)
    c.opt("--seeds", 3, type=int, help="number of seeds; seed i runs with --seed + i")
    c.opt("--mode", "frozen_probe", choices=["frozen_probe", "finetune"])
    c.opt("--teacher-epochs", 10, type=int)
    c.opt("--teacher-lr", 0.05, type=float)
    _train_options(c)

    c = cmds["cam"] = _Command(sub, "cam", "class activation map of one clip as a P2 graymap", "cam")
    c.opt("--ckpt", None, help="model checkpoint")
    c.opt("--data", None, help="dataset file")
    c.opt("--index", 0, type=int, help="clip index")
    c.opt("--class", 0, type=int, dest="class_index", help="action class to explain")
    return parser, cmds


# ---------------------------------------------------------------------------
# config resolution


def resolve(cmd: _Command, ns: argparse.Namespace) -> dict:
    flags = {k: v for k, v in vars(ns).items() if k not in ("command", "config")}
    from_file = {}
    config_path = getattr(ns, "config", None)
    if config_path is not None:
        try:
            from_file = json.loads(Path(config_path).read_text())
        except FileNotFoundError:
            raise UsageError(f"config file {config_path} does not exist") from None
        except json.JSONDecodeError as exc:
            raise FormatError(config_path, exc.pos, f"invalid JSON: {exc.msg}") from None
        if not isinstance(from_file, dict):
            raise UsageError(f"config file {config_path} must hold a JSON object")
        if from_file.pop("command", cmd.name) != cmd.name:
            raise UsageError(f"config file {config_path} was resolved for a different command")
        unknown = sorted(set(from_file) - set(cmd.defaults) - {"config"})
        if unknown:
            raise UsageError(f"unknown option(s) in {config_path}: {', '.join(unknown)}")
        from_file.pop("config", None)
    resolved = {k: v for k, v in cmd.defaults.items() if k != "config"}
    resolved.update(from_file)
    resolved.update(flags)
    resolved["command"] = cmd.name
    return resolved


def echo_config(cmd: _Command, cfg: dict) -> Path:
    out = Path(cfg["out"])
    if cmd.out_is_dir:
        out.mkdir(parents=True, exist_ok=True)
        path = out / RESOLVED
    else:
        if out.parent != Path(""):
            out.parent.mkdir(parents=True, exist_ok=True)
        path = out.with_name(out.name + "." + RESOLVED)
    path.write_text(json.dumps(cfg, indent=2, sort_keys=True) + "\n")
    return path


def _need(cfg: dict, key: str, hint: str = "") -> str:
    if cfg.get(key) is None:
        flag = "--" + key.replace("_", "-")
        raise UsageError(f"{cfg['command']}: {flag} is required" + (f"; {hint}" if hint else ""))
    path = Path(cfg[key])
    if not path.is_file():
        raise UsageError(f"{cfg['command']}: {path} does not exist")
    return cfg[key]


def _family(name) -> ActionFamily:
    try:
        return ActionFamily[str(name).upper()]
    except KeyError:
        raise UsageError(f"unknown action family {name!r}; use cardinal or diagonal") from None


def dataset_spec(cfg: dict) -> DatasetSpec:
    return DatasetSpec(
        num_actions=cfg["n"], num_scenes=cfg["m"], frames=cfg["frames"], height=cfg["height"], width=cfg["width"],
        beta=cfg["beta"], count=cfg["count"], seed=cfg["seed"], action_family=_family(cfg["family"]),
    )


def train_config(cfg: dict) -> TrainConfig:
    return TrainConfig(
        lr0=cfg["lr0"], momentum=cfg["momentum"], weight_decay=cfg["weight_decay"], lam=cfg["lam"],
        epochs=cfg["epochs"], batch_size=cfg["batch_size"], plateau_patience=cfg["plateau_patience"],
        plateau_threshold=cfg["plateau_threshold"], lr_divisor=cfg["lr_divisor"], max_decays=cfg["max_decays"],
        use_adv=cfg["adv"], use_ent=cfg["ent"], pseudo_mode=cfg["pseudo"], masked_pairing=Pairing(cfg["masked_pairing"]),
        seed=cfg["seed"],
    )


def _csv(header, rows) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(header)
    writer.writerows(rows)
    return buf.getvalue()


# ---------------------------------------------------------------------------
# commands


def cmd_gen(cmd, cfg) -> int:
    spec = dataset_spec(cfg)
    echo_config(cmd, cfg)
    split = generate_dataset(spec, Role[cfg["role"].upper()])
    write_dataset(cfg["out"], split)
    print(f"wrote {cfg['out']}: {len(split)} clips, P(scene = action mod M) = {scene_agreement(split)!r}")
    return EXIT_OK


def cmd_teach(cmd, cfg) -> int:
    data_path = _need(cfg, "data")
    val_path = _need(cfg, "val") if cfg.get("val") is not None else None
    if cfg["epochs"] < 0 or not cfg["lr"] > 0:
        raise ConfigError("teacher epochs must be >= 0 and lr positive")
    echo_config(cmd, cfg)
    data = read_dataset(data_path)
    val = read_dataset(val_path) if val_path else None
    teacher = train_teacher(data, cfg["epochs"], cfg["lr"], cfg["seed"], val=val)
    teacher.save(cfg["out"])
    print(f"wrote {cfg['out']}: held-out scene accuracy {teacher.digest['val_accuracy']!r}")
    return EXIT_OK


def cmd_pretrain(cmd, cfg) -> int:
    data_path, val_path = _need(cfg, "data"), _need(cfg, "val")
    if cfg["adv"] and cfg.get("teacher") is None:
        raise UsageError("pretrain: --adv needs --teacher <ckpt>; train one with `scenebias teach --data ...` "
                         "or disable the scene adversarial loss with --no-adv")
    teacher_path = _need(cfg, "teacher") if cfg["adv"] else None
    tcfg = train_config(cfg)
    echo_config(cmd, cfg)
    train, val = read_dataset(data_path), read_dataset(val_path)
    teacher = TeacherModel.load(teacher_path) if teacher_path else None
    model = init_params(model_config_for(train.spec, motion_gain=cfg["motion_gain"]), cfg["seed"])
    state, log = pretrain(model, train, val, teacher, tcfg)
    out = Path(cfg["out"])
    checkpoint.save(out / "model.ckpt", state)
    (out / "train.csv").write_text(log.to_csv(wall_time=cfg["record_time"]))
    best = log.records[log.best_epoch] if log.best_epoch is not None else None
    print(f"wrote {out / 'model.ckpt'}: best epoch {log.best_epoch}, val_ce {best.val_ce if best else math.nan!r}")
    return EXIT_OK


def _load_model(path, state=None) -> DebiasModel:
    try:
        return DebiasModel.from_state(checkpoint.load(path) if state is None else state)
    except DimensionError as exc:
        raise FormatError(path, 0, str(exc)) from exc


def cmd_probe(cmd, cfg) -> int:
    ckpt, data_path = _need(cfg, "ckpt"), _need(cfg, "data")
    target = Target(cfg["target"])
    echo_config(cmd, cfg)
    model, data = _load_model(ckpt), read_dataset(data_path)
    result = probe_model(model, data, target, cfg["seed"], str(ckpt))
    Path(cfg["out"], "probe.csv").write_text(_csv(
        ["target", "accuracy", "chance", "clips"], [[target.value, repr(result.accuracy), repr(result.chance), len(data)]]))
    print(f"{target.value} probe accuracy {result.accuracy!r} (chance {result.chance!r})")
    return EXIT_OK


def cmd_bias(cmd, cfg) -> int:
    data_path, teacher_path = _need(cfg, "data"), _need(cfg, "teacher")
    echo_config(cmd, cfg)
    data, teacher = read_dataset(data_path), TeacherModel.load(teacher_path)
    n = data.spec.num_actions
    result = linear_probe(teacher.features(data), data.batch.actions, n, cfg["seed"], Target.ACTION, "teacher")
    b = bias_from_accuracy(result.accuracy, result.chance)
    Path(cfg["out"], "bias.csv").write_text(_csv(
        ["b_scene", "accuracy", "chance"], [[repr(b), repr(result.accuracy), repr(result.chance)]]))
    print(repr(b))
    return EXIT_OK


def cmd_transfer(cmd, cfg) -> int:
    ckpt = _need(cfg, "ckpt")
    mode = TransferMode(cfg["mode"])
    tcfg = train_config(cfg)
    files = [cfg.get(k) for k in ("data", "val", "test")]
    if any(f is not None for f in files):
        files = [_need(cfg, k) for k in ("data", "val", "test")]
    target = DatasetSpec(beta=cfg["target_beta"], count=cfg["target_count"], seed=cfg["seed"],
                         action_family=_family(cfg["target_family"]))
    echo_config(cmd, cfg)
    state = checkpoint.load(ckpt)
    source = _load_model(ckpt, state)
    if files[0] is not None:
        splits = tuple(read_dataset(f) for f in files)
        target = splits[0].spec
    else:
        target = replace(target, num_actions=source.config.num_actions, frames=source.config.frames)
        splits = target_splits(target)
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        acc = transfer_eval(state, target, mode, tcfg, _family(cfg["source_family"]), splits)
    for w in caught:
        print(f"warning: {w.message}", file=sys.stderr)
    Path(cfg["out"], "transfer.csv").write_text(_csv(["mode", "accuracy", "chance"],
                                                     [[mode.value, repr(acc), repr(1.0 / target.num_actions)]]))
    print(f"{mode.value} target accuracy {acc!r}")
    return EXIT_OK


def _parse_betas(text) -> list[float]:
    if isinstance(text, (list, tuple)):
        return [float(b) for b in text]
    try:
        return [float(b) for b in str(text).split(",") if b.strip()]
    except ValueError:
        raise UsageError(f"--target-betas must be comma-separated numbers, got {text!r}") from None


def cmd_sweep(cmd, cfg) -> int:
    betas = _parse_betas(cfg["target_betas"])
    if len(betas) < 3:
        raise UsageError(f"sweep: a correlation needs at least 3 target betas, got {len(betas)}")
    if cfg["seeds"] < 1:
        raise UsageError("sweep: --seeds must be at least 1")
    source = DatasetSpec(beta=cfg["source_beta"], count=cfg["source_count"])
    for b in betas:
        replace(source, beta=b)  # range check before anything is written
    tcfg = train_config(cfg)
    echo_config(cmd, cfg)
    out = Path(cfg["out"])
    reports, rhos = [], []
    for i in range(cfg["seeds"]):
        seed = cfg["seed"] + i
        sweep_cfg = SweepConfig(train=replace(tcfg, seed=seed), mode=TransferMode(cfg["mode"]),
                                target_count=cfg["target_count"], teacher_epochs=cfg["teacher_epochs"],
                                teacher_lr=cfg["teacher_lr"], seed=seed)
        report = bias_sweep(source, betas, sweep_cfg)
        report.write(out / f"seed_{seed}.csv")
        reports.append(report)
        rhos.append(report.rho)
        print(f"seed {seed}: rho={report.rho!r} t={report.t_statistic!r}")
        for note in report.warnings:
            print(f"warning: {note}", file=sys.stderr)
    agg = aggregate_reports(reports)
    agg.write(out / "aggregate.csv", out / "aggregate.dat")
    (out / "aggregate.gp").write_text(
        "set xlabel 'B_scene'\nset ylabel 'relative improvement'\n"
        "plot 'aggregate.dat' using 1:2 with points title 'median over seeds'\n")
    print(f"median rho over seeds: {float(np.median(rhos))!r}")
    print(f"aggregate rho={agg.rho!r} t={agg.t_statistic!r} n={agg.n}")
    return EXIT_OK


def graymap(heat: np.ndarray, maxval: int = 255) -> str:
    """Plain (P2) portable graymap of a map scaled to [0, 1]."""
    levels = np.rint(np.clip(heat, 0.0, 1.0) * maxval).astype(int)
    rows = [" ".join(str(v) for v in row) for row in levels]
    return f"P2\n{levels.shape[1]} {levels.shape[0]}\n{maxval}\n" + "\n".join(rows) + "\n"


def cmd_cam(cmd, cfg) -> int:
    ckpt, data_path = _need(cfg, "ckpt"), _need(cfg, "data")
    echo_config(cmd, cfg)
    model, data = _load_model(ckpt), read_dataset(data_path)
    if not 0 <= cfg["index"] < len(data):
        raise UsageError(f"cam: --index {cfg['index']} outside [0, {len(data)})")
    if not 0 <= cfg["class_index"] < model.config.num_actions:
        raise UsageError(f"cam: --class {cfg['class_index']} outside [0, {model.config.num_actions})")
    clip = data.clips[cfg["index"]]
    heat = cam(model, clip, cfg["class_index"])
    path = Path(cfg["out"], f"cam_{cfg['index']}_{cfg['class_index']}.pgm")
    path.write_text(graymap(heat))
    print(f"wrote {path}: actor contrast {cam_actor_contrast(model, clip, cfg['class_index'])!r}")
    return EXIT_OK


COMMANDS = {
    "gen": cmd_gen, "teach": cmd_teach, "pretrain": cmd_pretrain, "probe": cmd_probe, "bias": cmd_bias,
    "transfer": cmd_transfer, "sweep": cmd_sweep, "cam": cmd_cam,
}


def main(argv=None) -> int:
    parser, cmds = build_parser()
    try:
        ns = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    cmd = cmds[ns.command]
    try:
        cfg = resolve(cmd, ns)
        with np.errstate(over="ignore", invalid="ignore"):
            return COMMANDS[ns.command](cmd, cfg)
    except FormatError as exc:
        print(f"scenebias {ns.command}: format error: {exc}", file=sys.stderr)
        return EXIT_FORMAT
    except (UsageError, ValueError) as exc:
        print(f"scenebias {ns.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except NumericError as exc:
        print(f"scenebias {ns.command}: numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except OSError as exc:
        print(f"scenebias {ns.command}: I/O error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
