"""Command-line entry point: ``qavsd synth | train | infer | score | sweep``.

Every command takes ``--config FILE`` and any number of ``--set key=value``
overrides, and writes the resolved configuration next to its outputs. A run
directory has a fixed layout::

    RUN/config.resolved
    RUN/checkpoints/{stage1,stage2,final}.ckpt
    RUN/rttm/<split>/<uri>.rttm
    RUN/reports/{train_log.csv, score_<split>.csv, sweep_<axis>.csv, threshold.csv}

A corpus directory holds ``scenes/<split>/<uri>/``, reference RTTMs under
``reference/<split>/`` and ``manifest.tsv``.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import os
import sys

from . import synthcorpus as sc
from .config import RunConfig, load_config
from .encoders import FUSION_STRATEGIES
from .errors import ConfigError, RTTMParseError
from .exchange import AVSDModel
from .pipeline import degraded, diarize
from .scoring import DERReport, der, score_directories, tune_threshold
from .segments import save_rttm
from .training import Trainer

SWEEP_AXES = ("miss_rate", "resolution", "fusion_strategy", "xs_layers")
DEFAULT_SWEEPS = {
    "miss_rate": "0.12,0.3,0.5,0.7,0.9",
    "resolution": "1,2,4,8",
    "fusion_strategy": ",".join(FUSION_STRATEGIES),
    "xs_layers": "0,2,4",
}
STAGE_CKPT = {1: "stage1.ckpt", 2: "stage2.ckpt", 3: "final.ckpt"}


# ---------------------------------------------------------------------------
# corpus on disk


def write_corpus(cfg: RunConfig, out_dir) -> int:
    os.makedirs(out_dir, exist_ok=True)
    rows = []
    for split in sc.SPLITS:
        ref_dir = os.path.join(out_dir, "reference", split)
        os.makedirs(ref_dir, exist_ok=True)
        for scene in sc.generate_split(cfg.corpus, split, cfg.seed):
            sc.save_scene(scene, os.path.join(out_dir, "scenes", split, scene.uri))
            save_rttm(scene.reference(), os.path.join(ref_dir, f"{scene.uri}.rttm"))
            rows.append((split, scene.uri, scene.n_speakers, f"{scene.num_frames * 0.01:.2f}",
                         f"{scene.overlap_ratio():.6f}"))
    with open(os.path.join(out_dir, "manifest.tsv"), "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, delimiter="\t", lineterminator="\n")
        w.writerow(["split", "uri", "n_speakers", "duration_s", "overlap_ratio"])
        w.writerows(rows)
    cfg.save(os.path.join(out_dir, "config.resolved"))
    return len(rows)


def load_split(corpus_dir, split: str) -> list[sc.Scene]:
    root = os.path.join(corpus_dir, "scenes", split)
    if not os.path.isdir(root):
        raise FileNotFoundError(f"no {split} split under {corpus_dir} (expected {root})")
    return [sc.load_scene(os.path.join(root, d)) for d in sorted(os.listdir(root))]


def _run_dirs(run_dir) -> dict[str, str]:
    dirs = {k: os.path.join(run_dir, k) for k in ("checkpoints", "rttm", "reports")}
    for d in dirs.values():
        os.makedirs(d, exist_ok=True)
    return dirs


def _load_model(path) -> AVSDModel:
    if not os.path.isfile(path):
        raise FileNotFoundError(f"checkpoint not found: {path}")
    return AVSDModel.load(path)


# ---------------------------------------------------------------------------
# commands


def cmd_synth(cfg: RunConfig, out_dir) -> int:
    n = write_corpus(cfg, out_dir)
    print(f"wrote {n} scenes to {out_dir}")
    return 0


def cmd_train(cfg: RunConfig, corpus_dir, run_dir, stages=(1, 2, 3), verbose=False) -> int:
    train, dev = load_split(corpus_dir, "train"), load_split(corpus_dir, "dev")
    dirs = _run_dirs(run_dir)
    cfg.save(os.path.join(run_dir, "config.resolved"))
    stages = sorted(set(stages))
    # resume from the checkpoint of the stage just before the first one requested
    prev = STAGE_CKPT.get(stages[0] - 1) if stages else None
    prev_path = os.path.join(dirs["checkpoints"], prev) if prev else None
    if prev_path and os.path.isfile(prev_path):
        model = AVSDModel.load(prev_path)
    else:
        model = AVSDModel(cfg.model, seed=cfg.seed)
    trainer = Trainer(model, train, dev, dataclasses.replace(cfg.train, seed=cfg.seed), dirs["checkpoints"],
                      os.path.join(dirs["reports"], "train_log.csv"), verbose)
    trainer.run(stages)
    print(f"trained stages {stages}; checkpoints in {dirs['checkpoints']}")
    return 0


def cmd_infer(cfg: RunConfig, corpus_dir, run_dir, split="eval", checkpoint=None, tune_grid=None) -> int:
    dirs = _run_dirs(run_dir)
    model = _load_model(checkpoint or os.path.join(dirs["checkpoints"], "final.ckpt"))
    pcfg = cfg.pipeline
    if tune_grid:
        theta, scores = tune_threshold(load_split(corpus_dir, "dev"), model, tune_grid, pcfg)
        with open(os.path.join(dirs["reports"], "threshold.csv"), "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["threshold", "dev_der"])
            w.writerows([[repr(t), f"{d:.6f}"] for t, d in scores.items()])
        pcfg = dataclasses.replace(pcfg, threshold=theta)
        cfg = dataclasses.replace(cfg, pipeline=pcfg)
        print(f"tuned threshold {theta}")
    cfg.save(os.path.join(run_dir, "config.resolved"))
    out = os.path.join(dirs["rttm"], split)
    os.makedirs(out, exist_ok=True)
    scenes = degraded(load_split(corpus_dir, split), cfg.degrade, cfg.seed)
    for scene in scenes:
        save_rttm(diarize(scene, model, pcfg), os.path.join(out, f"{scene.uri}.rttm"))
    print(f"wrote {len(scenes)} RTTM files to {out}")
    return 0


def cmd_score(ref_dir, hyp_dir, collar=0.0, csv_path=None) -> int:
    agg, _ = score_directories(ref_dir, hyp_dir, collar, csv_path)
    print(agg.summary())
    return 0


def _sweep_values(axis: str, raw: str) -> list:
    items = [x.strip() for x in raw.split(",") if x.strip()]
    if axis == "miss_rate":
        return [float(x) for x in items]
    if axis in ("resolution", "xs_layers"):
        return [int(x) for x in items]
    for x in items:
        if x not in FUSION_STRATEGIES:
            raise ConfigError(f"unknown fusion strategy {x!r}")
    return items


def _parse_models(specs) -> dict[str, str]:
    out = {}
    for spec in specs or ():
        label, sep, path = spec.partition("=")
        if not sep:
            raise ConfigError(f"--model expects LABEL=CHECKPOINT, got {spec!r}")
        out[label.strip()] = path.strip()
    return out


def sweep_rows(cfg: RunConfig, scenes, models: dict[str, AVSDModel], axis: str, values) -> list[list]:
    """One row per (value, model) for degradation axes, one per value otherwise."""
    if axis not in SWEEP_AXES:
        raise ConfigError(f"axis must be one of {SWEEP_AXES}")
    rows = []
    for value in values:
        if axis in ("miss_rate", "resolution"):
            field = "miss_rate" if axis == "miss_rate" else "resolution_factor"
            spec = dataclasses.replace(cfg.degrade, **{field: value})
            pairs = list(models.items())
        else:
            spec = cfg.degrade
            label = str(value)
            if label not in models:
                raise ConfigError(f"no trained model for {axis}={label}")
            pairs = [(label, models[label])]
        batch = degraded(scenes, spec, cfg.seed)
        for label, model in pairs:
            total = DERReport()
            for scene in batch:
                total = total + der(scene.reference(), diarize(scene, model, cfg.pipeline))
            rows.append([value, model.cfg.fusion, label, f"{total.fa_s:.3f}", f"{total.miss_s:.3f}",
                         f"{total.spkerr_s:.3f}", f"{total.der:.6f}"])
    return rows


def cmd_sweep(cfg: RunConfig, corpus_dir, run_dir, axis: str, values=None, model_specs=(), split="eval") -> int:
    if axis not in SWEEP_AXES:
        raise ConfigError(f"axis must be one of {SWEEP_AXES}")
    values = _sweep_values(axis, values or DEFAULT_SWEEPS[axis])
    paths = _parse_models(model_specs)
    if axis in ("miss_rate", "resolution"):
        missing = [s for s in FUSION_STRATEGIES if s not in paths]
        if missing:
            raise ConfigError(f"untrained strategies for a degradation sweep: {missing}")
    models = {k: _load_model(p) for k, p in paths.items()}
    dirs = _run_dirs(run_dir)
    cfg.save(os.path.join(run_dir, "config.resolved"))
    rows = sweep_rows(cfg, load_split(corpus_dir, split), models, axis, values)
    path = os.path.join(dirs["reports"], f"sweep_{axis}.csv")
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow([axis, "strategy", "model", "fa_s", "miss_s", "spkerr_s", "der"])
        w.writerows(rows)
    print(f"wrote {len(rows)} rows to {path}")
    return 0


# ---------------------------------------------------------------------------
# argument parsing


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="qavsd", description="Audio-visual speaker diarization toolkit")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--config", help="key = value config file")
        sp.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override a config key")

    sp = sub.add_parser("synth", help="generate the synthetic corpus")
    common(sp)
    sp.add_argument("--out", required=True)

    sp = sub.add_parser("train", help="run the three-stage training schedule")
    common(sp)
    sp.add_argument("--corpus", required=True)
    sp.add_argument("--run", required=True)
    sp.add_argument("--stages", default="1,2,3", help="comma-separated stages to run")
    sp.add_argument("--verbose", action="store_true")

    sp = sub.add_parser("infer", help="diarize a split and write RTTM files")
    common(sp)
    sp.add_argument("--corpus", required=True)
    sp.add_argument("--run", required=True)
    sp.add_argument("--split", default="eval", choices=sc.SPLITS)
    sp.add_argument("--checkpoint")
    sp.add_argument("--tune", metavar="GRID", help="comma-separated thresholds to tune on the dev split")

    sp = sub.add_parser("score", help="DER between two directories of RTTM files")
    sp.add_argument("--ref", required=True)
    sp.add_argument("--hyp", required=True)
    sp.add_argument("--collar", type=float, default=0.0)
    sp.add_argument("--csv")

    sp = sub.add_parser("sweep", help="evaluate models under a degradation or architecture sweep")
    common(sp)
    sp.add_argument("--corpus", required=True)
    sp.add_argument("--run", required=True)
    sp.add_argument("--axis", required=True, choices=SWEEP_AXES)
    sp.add_argument("--values")
    sp.add_argument("--model", action="append", default=[], metavar="LABEL=CHECKPOINT")
    sp.add_argument("--split", default="eval", choices=sc.SPLITS)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.command == "score":
            return cmd_score(args.ref, args.hyp, args.collar, args.csv)
        cfg = load_config(args.config, args.set)
        if args.command == "synth":
            return cmd_synth(cfg, args.out)
        if args.command == "train":
            stages = [int(s) for s in args.stages.split(",") if s.strip()]
            if any(s not in STAGE_CKPT for s in stages):
                raise ConfigError(f"stages must be drawn from 1,2,3, got {args.stages}")
            return cmd_train(cfg, args.corpus, args.run, stages, args.verbose)
        if args.command == "infer":
            grid = [float(x) for x in args.tune.split(",")] if args.tune else None
            return cmd_infer(cfg, args.corpus, args.run, args.split, args.checkpoint, grid)
        return cmd_sweep(cfg, args.corpus, args.run, args.axis, args.values, args.model, args.split)
    except (ConfigError, RTTMParseError, FileNotFoundError, ValueError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
