"""Command-line front door: ``rocl <command> [--config PATH] [--set k=v ...] [--seed N] [--out DIR]``.

Commands: train, attack, eval, ablate-xy, ablate-lambda, ablate-batch, report.
Exit status 0 on success, 2 for configuration errors, 1 for runtime failures
(the message names the failing stage).
"""

from __future__ import annotations

import argparse
import contextlib
import csv
import io
import logging
import sys
from dataclasses import replace
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

from . import __version__, attacks, config as cfgmod
from . import evaluation as ev
from . import tensor_core as tc
from . import train as tr
from .data import Dataset, generate_toy_dataset, load_cifar10_binary, load_dataset, train_test_split
from .model import ModelConfig, ModelParams, load_checkpoint, save_checkpoint

log = logging.getLogger("rocl")

NORM_ORDER = {"linf": 0, "l2": 1, "l1": 2, "cw": 3}


class StageError(RuntimeError):
    def __init__(self, stage: str, exc: BaseException):
        self.stage = stage
        super().__init__(f"stage {stage!r} failed: {type(exc).__name__}: {exc}")


@contextlib.contextmanager
def stage(name: str):
    log.info("stage %s", name)
    try:
        yield
    except (StageError, cfgmod.ConfigError):
        raise
    except Exception as exc:  # noqa: BLE001 - re-raised with the stage attached
        raise StageError(name, exc) from exc


# ---------------------------------------------------------------------------
# tables
# ---------------------------------------------------------------------------


def column_key(row: ev.AttackRow) -> Tuple[int, float, int]:
    return NORM_ORDER.get(row.attack, len(NORM_ORDER)), row.epsilon, row.steps


def column_name(row: ev.AttackRow) -> str:
    return f"{row.attack}@{row.epsilon:.6g}/{row.steps}"


def _parse_column(name: str) -> Tuple[str, float, int]:
    attack, rest = name.split("@", 1)
    eps, steps = rest.split("/", 1)
    return attack, float(eps), int(steps)


def emit_table(reports: Sequence[ev.RobustnessReport], path_stem, extras: Optional[Sequence[Dict[str, str]]] = None):
    """Write ``<stem>.csv`` and an aligned ``<stem>.txt``.

    Columns: model, any ``extras`` keys, A_nat, then attack columns ordered
    linf, l2, l1, cw and by epsilon within a norm, whatever order the rows
    were inserted in.
    """
    extras = list(extras) if extras is not None else [{} for _ in reports]
    if len(extras) != len(reports):
        raise ValueError("one extras mapping per report")
    extra_cols: List[str] = []
    for e in extras:
        extra_cols += [k for k in e if k not in extra_cols]
    cols: Dict[str, Tuple] = {}
    for rep in reports:
        for row in rep.rows:
            cols.setdefault(column_name(row), column_key(row))
    attack_cols = sorted(cols, key=lambda c: cols[c])
    header = ["model"] + extra_cols + ["A_nat"] + attack_cols
    body = []
    for rep, e in zip(reports, extras):
        cells = {column_name(r): f"{r.accuracy:.2f}" for r in rep.rows}
        body.append([rep.model] + [str(e.get(k, "")) for k in extra_cols] + [f"{rep.clean_accuracy:.2f}"]
                    + [cells.get(c, "") for c in attack_cols])
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(body)
    stem = Path(path_stem)
    stem.parent.mkdir(parents=True, exist_ok=True)
    stem.with_suffix(".csv").write_text(buf.getvalue())
    widths = [max(len(r[i]) for r in [header] + body) for i in range(len(header))]
    lines = ["  ".join(c.rjust(wd) for c, wd in zip(r, widths)).rstrip() for r in [header] + body]
    stem.with_suffix(".txt").write_text("\n".join(lines) + "\n")
    return header, body


def parse_table(text: str) -> List[Tuple[Dict[str, str], ev.RobustnessReport]]:
    """Inverse of the CSV written by :func:`emit_table`."""
    rows = list(csv.reader(io.StringIO(text)))
    if not rows:
        return []
    header = rows[0]
    i_nat = header.index("A_nat")
    out = []
    for r in rows[1:]:
        extras = dict(zip(header[1:i_nat], r[1:i_nat]))
        rep = ev.RobustnessReport(float(r[i_nat]), model=r[0])
        for name, cell in zip(header[i_nat + 1:], r[i_nat + 1:]):
            if cell:
                attack, eps, steps = _parse_column(name)
                rep.rows.append(ev.AttackRow(attack, eps, steps, float(cell)))
        out.append((extras, rep))
    return out


# ---------------------------------------------------------------------------
# plumbing
# ---------------------------------------------------------------------------


def load_data(cfg: cfgmod.ExperimentConfig) -> Tuple[Dataset, Dataset]:
    d = cfg.as_dict()
    src = d["data.source"]
    if src == "toy":
        n_test = d["data.toy.test_size"]
        full = generate_toy_dataset(d["data.toy.classes"], d["data.toy.samples_per_class"], d["data.toy.image_size"],
                                    d["data.toy.seed"])
        if not 0 < n_test < len(full):
            raise cfgmod.ConfigError(["data.toy.test_size: must lie strictly between 0 and the dataset size"])
        return train_test_split(full, n_test)
    if src == "cifar10":
        def read(p, split):
            p = Path(p)
            files = sorted(p.glob("*.bin")) if p.is_dir() else [p]
            return load_cifar10_binary(files, split=split)
        return read(d["data.train"], "train"), read(d["data.test"], "test")
    return load_dataset(d["data.train"]), load_dataset(d["data.test"])


def model_config_for(cfg: cfgmod.ExperimentConfig, data: Dataset) -> ModelConfig:
    return cfg.model_config(data.image_dims, data.num_classes)


def suite_for(cfg: cfgmod.ExperimentConfig, input_dims) -> List[attacks.AttackConfig]:
    steps = cfg["eval.steps"]
    kind = cfg["eval.suite"]
    if kind == "published":
        return ev.published_suite(steps)
    if kind == "scaled":
        return ev.scaled_suite(input_dims, steps)
    return seen_suite(steps)


def seen_suite(steps: int) -> List[attacks.AttackConfig]:
    """The linf 8/255 and 16/255 columns reported by the ablation tables."""
    return [attacks.AttackConfig(norm="linf", epsilon=e, step_size=attacks.default_step_size(e, steps), steps=steps,
                                 random_start=True) for e in (8 / 255, 16 / 255)]


def write_manifest(out: Path, cfg: cfgmod.ExperimentConfig, extra: Optional[Dict[str, str]] = None) -> None:
    out.mkdir(parents=True, exist_ok=True)
    (out / f"config-{cfg['command']}.txt").write_text(cfg.dump())
    items = {"command": cfg["command"], "config_hash": cfg.hash(), "seed": str(cfg["seed"]),
             "precision": cfg["precision"], "version": __version__, **(extra or {})}
    (out / f"manifest-{cfg['command']}.txt").write_text("".join(f"{k} = {v}\n" for k, v in items.items()))


def train_model(cfg: cfgmod.ExperimentConfig, train_set: Dataset, mc: ModelConfig, method: str,
                pretrained: Optional[ModelParams] = None) -> Tuple[ModelParams, tr.TrainReport]:
    tcfg = cfg.train_config()
    if method == "rocl":
        return tr.train_rocl(train_set.unlabeled(), mc, tcfg)
    if method == "simclr":
        return tr.train_rocl(train_set.unlabeled(), mc, replace(tcfg, lam=0.0, attack=tcfg.attack.with_(steps=0)))
    sup = replace(tcfg, attack=tcfg.attack.with_(loss_kind="cross_entropy"))
    if method == "at":
        return tr.train_at(train_set, mc, sup)
    if method == "trades":
        return tr.train_trades(train_set, mc, sup)
    if pretrained is None:
        raise ValueError("finetune needs a pretrained checkpoint (set checkpoint = PATH)")
    return tr.finetune_rocl_at_ss(pretrained, train_set, mc, sup)


SELF_SUPERVISED = ("rocl", "simclr")


def probe(cfg, params, mc, train_set, test_set, method: str) -> ModelParams:
    """Head for evaluation: linear (or robust-linear) probe for self-supervised encoders."""
    if method not in SELF_SUPERVISED:
        return params
    if cfg["linear.robust"]:
        return ev.robust_linear_eval(params, mc, train_set, cfg.linear_config(robust=True))[0]
    return ev.linear_eval(params, mc, train_set, cfg.linear_config())[0]


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------


def cmd_train(cfg, out: Path) -> None:
    with stage("data"):
        train_set, _ = load_data(cfg)
        mc = model_config_for(cfg, train_set)
    pretrained = None
    if cfg["checkpoint"]:
        with stage("load checkpoint"):
            pretrained = load_checkpoint(cfg["checkpoint"])[0]
    method = cfg["method"]
    with stage(f"train {method}"):
        params, report = train_model(cfg, train_set, mc, method, pretrained)
    with stage("write"):
        save_checkpoint(params, mc, {"method": method, "seed": cfg["seed"], "config_hash": cfg.hash()},
                        out / f"{method}.ckpt")
        report.to_csv(out / f"train_{method}.csv")


def _checkpoint(cfg, key="checkpoint"):
    if not cfg[key]:
        raise cfgmod.ConfigError([f"{key}: required for command {cfg['command']}"])
    return load_checkpoint(cfg[key])


def cmd_attack(cfg, out: Path) -> None:
    with stage("data"):
        _, test_set = load_data(cfg)
    with stage("load checkpoint"):
        params, mc, meta = _checkpoint(cfg)
    with stage("attack"):
        rep = ev.evaluate_robustness(params, mc, test_set, suite_for(cfg, mc.input_dims), cfg["seed"],
                                     meta.get("method", "model"), cfg["workers"])
    with stage("write"):
        rep.write_csv(out / "attack.csv")
        emit_table([rep], out / "attack_table")


def cmd_eval(cfg, out: Path) -> None:
    with stage("data"):
        train_set, test_set = load_data(cfg)
    with stage("load checkpoint"):
        params, mc, meta = _checkpoint(cfg)
        mc = replace(mc, num_classes=train_set.num_classes or mc.num_classes)
    method = meta.get("method", "model")
    with stage("linear evaluation"):
        head = probe(cfg, params, mc, train_set, test_set, method)
    with stage("robustness"):
        name = method + ("+rLE" if cfg["linear.robust"] and method in SELF_SUPERVISED else "")
        rep = ev.evaluate_robustness(head, mc, test_set, suite_for(cfg, mc.input_dims), cfg["seed"], name,
                                     cfg["workers"])
    with stage("write"):
        rep.write_csv(out / "eval.csv")
        emit_table([rep], out / "eval_table")
        save_checkpoint(head, mc, {**meta, "head": "linear_robust" if cfg["linear.robust"] else "linear"},
                        out / "eval.ckpt")
    if cfg["source_checkpoint"]:
        with stage("black-box"):
            src, src_mc, _ = load_checkpoint(cfg["source_checkpoint"])
            seen = seen_suite(cfg["eval.steps"])[0]
            adv = ev.blackbox_examples(src, src_mc, test_set, seen, cfg["eval.blackbox_source"], cfg["seed"])
            plain = ev.accuracy(head, mc, adv, test_set.labels)
            rows = ev.smoothing_curve(head, mc, test_set, cfg["smoothing.n_values"], adv, cfg.smoothing_config(),
                                      cfg["seed"])
        with stage("write"):
            lines = ["n,clean_accuracy,blackbox_accuracy", f"plain,{ev.accuracy(head, mc, test_set.images, test_set.labels):.2f},{plain:.2f}"]
            lines += [f"{r.n},{r.clean_accuracy:.2f},{r.robust_accuracy:.2f}" for r in rows]
            (out / "smoothing.csv").write_text("\n".join(lines) + "\n")


def _ablate(cfg, out: Path, name: str, grid: List[Tuple[Dict[str, str], Dict[str, object]]]) -> None:
    with stage("data"):
        train_set, test_set = load_data(cfg)
        mc = model_config_for(cfg, train_set)
    reports, extras = [], []
    for labels, overrides in grid:
        tag = ",".join(f"{k}={v}" for k, v in labels.items())
        run_cfg = cfgmod.build({**cfg.as_dict(), **overrides})
        with stage(f"{name} train [{tag}]"):
            params, _ = train_model(run_cfg, train_set, mc, "rocl")
        with stage(f"{name} evaluate [{tag}]"):
            head = probe(run_cfg, params, mc, train_set, test_set, "rocl")
            reports.append(ev.evaluate_robustness(head, mc, test_set, seen_suite(cfg["eval.steps"]), cfg["seed"],
                                                  "rocl", cfg["workers"]))
            extras.append(labels)
    with stage("write"):
        emit_table(reports, out / name, extras)


def cmd_ablate_xy(cfg, out: Path) -> None:
    grid = [({"X": x, "Y": y}, {"train.attack_target": x, "train.regularizer_target": y})
            for x in ("t", "t_prime") for y in ("t", "t_prime")]
    _ablate(cfg, out, "ablate_xy", grid)


def _fraction_label(v: float) -> str:
    inv = 1 / v if v else 0
    return f"1/{round(inv)}" if v and abs(inv - round(inv)) < 1e-9 else f"{v:g}"


def cmd_ablate_lambda(cfg, out: Path) -> None:
    grid = [({"lambda": _fraction_label(lam)}, {"train.lam": lam}) for lam in cfg["ablate.lambdas"]]
    _ablate(cfg, out, "ablate_lambda", grid)


def cmd_ablate_batch(cfg, out: Path) -> None:
    grid = [({"B": str(b), "lambda": _fraction_label(cfg["train.lam"])}, {"train.batch_size": b})
            for b in cfg["ablate.batch_sizes"]]
    _ablate(cfg, out, "ablate_batch", grid)


def cmd_report(cfg, out: Path) -> None:
    with stage("collect"):
        reports = []
        for p in sorted(out.glob("*.csv")):
            text = p.read_text()
            if text.startswith(",".join(ev.RobustnessReport.HEADER)):
                reports += ev.RobustnessReport.from_csv(text)
    with stage("write"):
        emit_table(reports, out / "report")


COMMANDS = {"train": cmd_train, "attack": cmd_attack, "eval": cmd_eval, "ablate-xy": cmd_ablate_xy,
            "ablate-lambda": cmd_ablate_lambda, "ablate-batch": cmd_ablate_batch, "report": cmd_report}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="rocl", description="Robust contrastive learning experiments")
    p.add_argument("command", choices=sorted(COMMANDS))
    p.add_argument("--config", help="key = value config file")
    p.add_argument("--preset", choices=sorted(cfgmod.PRESETS), default=None)
    p.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE")
    p.add_argument("--seed", type=int)
    p.add_argument("--out", help="output directory")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def run(argv: Optional[Sequence[str]] = None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except SystemExit as exc:  # argparse reports usage errors with status 2
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    overrides = list(args.overrides) + [f"command={args.command}"]
    if args.seed is not None:
        overrides.append(f"seed={args.seed}")
    if args.out is not None:
        overrides.append(f"out={args.out}")
    try:
        cfg = cfgmod.load(args.config, args.preset, overrides)
    except cfgmod.ConfigError as exc:
        for problem in exc.problems:
            print(f"config error: {problem}", file=sys.stderr)
        return 2
    out = Path(cfg["out"])
    try:
        with tc.precision(cfg["precision"]):
            write_manifest(out, cfg)
            COMMANDS[cfg["command"]](cfg, out)
    except cfgmod.ConfigError as exc:
        for problem in exc.problems:
            print(f"config error: {problem}", file=sys.stderr)
        return 2
    except StageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    return 0


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
