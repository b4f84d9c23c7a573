"""Command-line entry points.

Structured results go to stdout as one JSON object per line; progress and
summaries go to stderr.  Every training key can be set in a ``key = value``
config file (``--config``) and overridden by a flag of the same name.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
import time
from pathlib import Path
from typing import Sequence

import numpy as np

from ..decoder import dice_score
from ..fewshot import Case, adapt, segment_volume, train
from ..fewshot.config import TrainConfig
from ..volume import LabelVolume, OrganRange, Volume
from .config import ConfigError, build_train_config, load_config
from .diagnostics import PIPELINE_EPS, pipeline_gradcheck
from .evaluate import evaluate
from .io import FormatError, load_checkpoint, read_volume, save_checkpoint, write_volume
from .phantoms import FAMILIES, PhantomSpec, generate_phantoms

log = logging.getLogger("bigru_fss")
MANIFEST = "manifest.json"


def emit(record: dict) -> None:
    sys.stdout.write(json.dumps(record, sort_keys=True) + "\n")
    sys.stdout.flush()


def say(msg: str) -> None:
    print(msg, file=sys.stderr)


# -- dataset directories ------------------------------------------------------------

def save_dataset(cases: Sequence[Case], out: Path, families: dict[str, str] | None = None) -> None:
    out.mkdir(parents=True, exist_ok=True)
    entries = []
    for case in cases:
        write_volume(out / f"{case.case_id}.img.fsvl", case.volume.voxels)
        write_volume(out / f"{case.case_id}.lbl.fsvl", case.labels.labels.astype(np.uint8))
        entries.append({"case_id": case.case_id, "organ_id": case.labels.organ_id,
                        "family": (families or {}).get(case.case_id, "")})
    (out / MANIFEST).write_text(json.dumps({"cases": entries}, indent=1, sort_keys=True) + "\n")


def load_dataset(root) -> list[Case]:
    root = Path(root)
    manifest = json.loads((root / MANIFEST).read_text())
    cases = []
    for entry in manifest["cases"]:
        cid = entry["case_id"]
        vox = read_volume(root / f"{cid}.img.fsvl")
        lbl = read_volume(root / f"{cid}.lbl.fsvl")
        cases.append(Case(cid, Volume(vox), LabelVolume(lbl, int(entry["organ_id"]))))
    return cases


def _pick(cases: Sequence[Case], ids: Sequence[str]) -> list[Case]:
    by_id = {c.case_id: c for c in cases}
    missing = [i for i in ids if i not in by_id]
    if missing:
        raise KeyError(f"unknown case ids: {missing}")
    return [by_id[i] for i in ids]


# -- argument parsing ---------------------------------------------------------------

def _add_config_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="key = value config file")
    for f in dataclasses.fields(TrainConfig):
        p.add_argument(f"--{f.name}", default=None, metavar=f.name.upper(),
                       help=f"override config key {f.name}")


def _train_config(args, base: TrainConfig | None = None) -> TrainConfig:
    file_values = load_config(args.config) if args.config else {}
    overrides = {f.name: getattr(args, f.name) for f in dataclasses.fields(TrainConfig)}
    if base is not None:
        file_values = {**{k: (",".join(map(str, v)) if isinstance(v, list) else str(v))
                          for k, v in base.to_dict().items()}, **file_values}
    return build_train_config(file_values, overrides)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="bigru-fss", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen", help="generate synthetic phantom cases")
    p.add_argument("--out", required=True)
    p.add_argument("--families", default=",".join(FAMILIES))
    p.add_argument("--count", type=int, default=8)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--noise_std", type=float, default=0.3)
    p.add_argument("--dims", type=int, nargs=3, default=(24, 64, 64), metavar=("T", "H", "W"))
    p.add_argument("--radius_range", type=float, nargs=2, default=(6.0, 14.0))
    p.add_argument("--contrast_range", type=float, nargs=2, default=(0.5, 1.0))

    p = sub.add_parser("train", help="episodic meta-training")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--resume")
    _add_config_flags(p)

    p = sub.add_parser("adapt", help="fine-tune a checkpoint on its support cases")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--supports", required=True, help="comma-separated case ids")
    p.add_argument("--organ", type=int)
    p.add_argument("--out", required=True)
    p.add_argument("--adapt_seed", type=int, default=0)
    _add_config_flags(p)

    p = sub.add_parser("segment", help="segment one query volume")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--supports", required=True, help="comma-separated case ids")
    p.add_argument("--query", required=True, help="case id in --data, or an FSVL image path")
    p.add_argument("--range", help="organ slice range start:end (inclusive)")
    p.add_argument("--organ", type=int)
    p.add_argument("--out", required=True)

    p = sub.add_parser("eval", help="multi-trial evaluation on a target organ")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--target_organ", type=int, required=True)
    p.add_argument("--K", type=int, required=True)
    p.add_argument("--trials", type=int, default=5)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--support_data", help="separate directory to draw supports from")
    p.add_argument("--adapt", action="store_true", help="adapt to each support set first")

    p = sub.add_parser("gradcheck", help="finite-difference check of the full pipeline")
    p.add_argument("--size", type=int, default=16)
    p.add_argument("--precision", type=int, default=64, choices=(64,))
    p.add_argument("--n_a", type=int, default=1)
    p.add_argument("--K", type=int, default=1)
    p.add_argument("--widths", default="4,8")
    p.add_argument("--eps", type=float, default=PIPELINE_EPS)
    p.add_argument("--tolerance", type=float, default=1e-4)
    p.add_argument("--max_entries", type=int, default=None)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--ablation", action="store_true")
    return parser


# -- commands -----------------------------------------------------------------------

def cmd_gen(args) -> int:
    families = [f.strip() for f in args.families.split(",") if f.strip()]
    cases, fam = [], {}
    for family in families:
        spec = PhantomSpec(family=family, count=args.count, seed=args.seed, noise_std=args.noise_std,
                           dims=tuple(args.dims), radius_range=tuple(args.radius_range),
                           contrast_range=tuple(args.contrast_range))
        for case in generate_phantoms(spec):
            cases.append(case)
            fam[case.case_id] = family
    save_dataset(cases, Path(args.out), fam)
    emit({"event": "gen", "cases": len(cases), "families": families, "out": str(args.out)})
    say(f"wrote {len(cases)} cases to {args.out}")
    return 0


def cmd_train(args) -> int:
    config = _train_config(args)
    cases = load_dataset(args.data)
    start = load_checkpoint(args.resume) if args.resume else None

    def on_step(it: int, loss: float) -> None:
        if config.log_every and (it + 1) % config.log_every == 0:
            emit({"event": "train_step", "iteration": it + 1, "loss": loss})

    tick = time.perf_counter()
    ckpt = train(config, cases, on_step=on_step, start=start)
    save_checkpoint(ckpt, args.out)
    final = ckpt.history[-1] if ckpt.history else None
    emit({"event": "train_done", "iterations": ckpt.iteration, "final_loss": final,
          "checkpoint": str(args.out)})
    say(f"trained {config.iterations} iterations in {time.perf_counter() - tick:.1f}s -> {args.out}")
    return 0


def cmd_adapt(args) -> int:
    ckpt = load_checkpoint(args.checkpoint)
    config = _train_config(args, base=ckpt.config)
    supports = _pick(load_dataset(args.data), args.supports.split(","))
    organ = args.organ or supports[0].labels.organ_id
    out = adapt(ckpt, supports, config, organ, seed=args.adapt_seed)
    save_checkpoint(out, args.out)
    emit({"event": "adapt", "steps": out.meta.get("adapt_steps", 0),
          "split_loss_before": out.meta.get("adapt_split_loss_before"),
          "split_loss_after": out.meta.get("adapt_split_loss_after"), "checkpoint": str(args.out)})
    say(f"adapted on {len(supports)} supports -> {args.out}")
    return 0


def cmd_segment(args) -> int:
    ckpt = load_checkpoint(args.checkpoint)
    cases = load_dataset(args.data)
    supports = _pick(cases, args.supports.split(","))
    organ = args.organ or supports[0].labels.organ_id
    by_id = {c.case_id: c for c in cases}
    query = by_id.get(args.query)
    volume = query.volume if query else Volume(read_volume(args.query))
    if args.range:
        lo, _, hi = args.range.partition(":")
        rng = OrganRange(int(lo), int(hi))
    elif query is not None:
        rng = query.organ_range(organ)
    else:
        raise ValueError("--range is required when the query has no label volume")
    pred = segment_volume(ckpt, supports, volume, rng, organ)
    write_volume(args.out, pred.labels.astype(np.uint8))
    record = {"event": "segment", "dims": list(pred.dims), "range": [rng.start_slice, rng.end_slice],
              "foreground_voxels": int((pred.labels > 0).sum()), "out": str(args.out)}
    if query is not None:
        record["dice"] = dice_score(pred.labels == organ, query.labels.labels == organ)
    emit(record)
    say(f"segmented {args.query}: {record['foreground_voxels']} foreground voxels")
    return 0


def cmd_eval(args) -> int:
    ckpt = load_checkpoint(args.checkpoint)
    cases = load_dataset(args.data)
    pool = load_dataset(args.support_data) if args.support_data else None
    report = evaluate(ckpt, cases, args.target_organ, args.K, args.trials, args.seed, pool,
                      ckpt.config if args.adapt else None)
    emit(report.to_record())
    say(f"K={report.K} trials={report.trials}: dice {report.mean:.3f} +/- {report.std:.3f} "
        f"over {len(report.per_query)} queries")
    return 0


def cmd_gradcheck(args) -> int:
    widths = tuple(int(w) for w in args.widths.split(","))
    check = pipeline_gradcheck(size=args.size, n_a=args.n_a, K=args.K, widths=widths, seed=args.seed,
                               eps=args.eps, tolerance=args.tolerance, max_entries=args.max_entries,
                               ablation=args.ablation)
    for p in check.report.params:
        emit({"event": "gradcheck_param", "name": p.name, "checked": p.checked,
              "max_rel_error": p.max_rel_error, "reduced_steps": p.reduced_steps,
              "passed": p.max_rel_error < args.tolerance})
    failures = [p.name for p in check.report.violations]
    emit({"event": "gradcheck", "passed": check.passed, "groups": check.group_errors(),
          "failures": failures, "tolerance": args.tolerance})
    if failures:
        say("gradient check FAILED for: " + ", ".join(failures))
        return 1
    say(f"gradient check passed (max rel error {check.report.max_rel_error:.2e})")
    return 0


COMMANDS = {"gen": cmd_gen, "train": cmd_train, "adapt": cmd_adapt, "segment": cmd_segment,
            "eval": cmd_eval, "gradcheck": cmd_gradcheck}


def run_cli(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, stream=sys.stderr,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except (ConfigError, FormatError, KeyError, ValueError, FileNotFoundError) as exc:
        say(f"error: {exc}")
        return 2


def main() -> None:
    sys.exit(run_cli())


if __name__ == "__main__":
    main()
