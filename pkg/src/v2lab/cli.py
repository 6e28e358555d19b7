"""Command-line entry point: gen-data, train, infer, select, eval.

Exit codes: 0 success, 1 runtime failure, 2 usage or configuration error.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import io
import json
import logging
import sys
from dataclasses import asdict, fields, replace
from pathlib import Path

import numpy as np

from .anchor import AnchorConfig, EmptyForegroundError, generate_anchor_prompt
from .core import Mask, MetricReport, compute_iou, image_to_uint8, load_mask, localization_error, save_mask, write_ppm
from .pccs import SelectionContext, cycle_mask_select, pccs_anchor_config, select_expert
from .synth_data import SceneConfig, generate_dataset, load_pair, read_key_values, save_pair, scene_config_to_dict
from .training import (
    DESK_TRAIN, EXPERT_KINDS, Expert, FeatureBackend, TrainConfig, build_point_dataset, configure_threads,
    load_checkpoint, predict_masks, prepare_pairs, pretrain_point_decoder, save_checkpoint, train_expert, write_log,
)

log = logging.getLogger("v2lab")

SCENE_KEYS = {f.name for f in fields(SceneConfig)}
TRAIN_KEYS = {f.name for f in fields(TrainConfig)}


class UsageError(Exception):
    pass


# --- config and manifest ----------------------------------------------------------------


def _typed(cls, values: dict):
    types = {f.name: f.type for f in fields(cls)}
    return {k: int(v) if types[k] in ("int", int) else float(v) for k, v in values.items()}


def load_configs(path, seed=None) -> tuple[SceneConfig, TrainConfig]:
    """One key=value file feeds both the scene and the training config; ``seed`` applies to both."""
    values = read_key_values(path) if path else {}
    for k in values:
        if k not in SCENE_KEYS and k not in TRAIN_KEYS:
            raise UsageError(f"unknown config key: {k}")
    if seed is not None:
        values["seed"] = str(seed)
    try:
        scene = replace(SceneConfig(), **_typed(SceneConfig, {k: v for k, v in values.items() if k in SCENE_KEYS}))
        train = replace(DESK_TRAIN, **_typed(TrainConfig, {k: v for k, v in values.items() if k in TRAIN_KEYS}))
    except ValueError as e:
        raise UsageError(f"bad config value: {e}") from None
    return scene, train


def _hash_inputs(paths) -> str:
    h = hashlib.sha256()
    for p in paths:
        p = Path(p)
        files = sorted(x for x in p.rglob("*") if x.is_file()) if p.is_dir() else [p]
        for f in files:
            h.update(str(f.relative_to(p) if p.is_dir() else f.name).encode())
            h.update(f.read_bytes())
    return h.hexdigest()


class RunManifest:
    """Record of one command; written before any output and rewritten as artifacts appear."""

    def __init__(self, args, inputs):
        self.out = Path(args.out)
        self.out.mkdir(parents=True, exist_ok=True)
        self.path = self.out / "run_manifest.json"
        self.data = {
            "command": args.command,
            "argv": sys.argv[1:],
            "config": str(args.config) if getattr(args, "config", None) else None,
            "seed": getattr(args, "seed", None),
            "input_hash": _hash_inputs([p for p in inputs if p]),
            "out": str(self.out),
            "artifacts": [],
        }
        self.flush()

    def add(self, path) -> Path:
        self.data["artifacts"].append(str(Path(path).relative_to(self.out)))
        return Path(path)

    def flush(self):
        self.path.write_text(json.dumps(self.data, indent=2) + "\n")


# --- dataset helpers -------------------------------------------------------------------------


def pair_dirs(data_dir) -> list[Path]:
    d = Path(data_dir)
    if (d / "meta.txt").exists():
        return [d]
    dirs = sorted(p for p in d.iterdir() if (p / "meta.txt").exists())
    if not dirs:
        raise UsageError(f"no pair directories under {d}")
    return dirs


def _overlay(img: np.ndarray, m: np.ndarray, color=(255, 0, 0)) -> np.ndarray:
    out = image_to_uint8(img).astype(np.float64)
    out[m] = 0.5 * out[m] + 0.5 * np.array(color)
    return out.astype(np.uint8)


# --- commands ----------------------------------------------------------------------------


def cmd_gen_data(args) -> int:
    scene, _ = load_configs(args.config, args.seed)
    man = RunManifest(args, [args.config])
    for split, n in (("train", args.n_train), ("test", args.n_test)):
        for i, pair in enumerate(generate_dataset(scene, n, split)):
            d = Path(args.out) / split / f"pair_{i:05d}"
            save_pair(pair, d, {"split": split, "index": i})
            man.add(d)
    cfg_path = man.add(Path(args.out) / "scene_config.txt")
    cfg_path.write_text("".join(f"{k}={v}\n" for k, v in scene_config_to_dict(scene).items()))
    man.flush()
    return 0


def _pairs_from(dirs):
    return [load_pair(d) for d in dirs]


def cmd_train(args) -> int:
    if args.expert == "anchor":
        raise UsageError("the anchor expert is training-free")
    scene, tcfg = load_configs(args.config, args.seed)
    if args.steps:
        tcfg = replace(tcfg, max_steps=args.steps)
    man = RunManifest(args, [args.config, args.data, args.checkpoint])
    configure_threads()
    backend = FeatureBackend()
    data = prepare_pairs(_pairs_from(pair_dirs(args.data)), backend, AnchorConfig(n_points=tcfg.n_anchor_points))
    config = {"scene": scene_config_to_dict(scene), "train": asdict(tcfg)}
    out = Path(args.out)

    experts = {}
    if args.checkpoint:
        loaded, _ = load_checkpoint(args.checkpoint, expected_config=config)
        experts = {e.kind: e for e in loaded}
        if "anchor" not in experts:
            raise UsageError(f"{args.checkpoint} has no pretrained point decoder")
    else:
        points = build_point_dataset(scene, tcfg.pretrain_scenes, backend)
        decoder, rows = pretrain_point_decoder(points, tcfg)
        write_log(rows, man.add(out / "log_pretrain.csv"))
        experts["anchor"] = Expert("anchor", decoder)

    kinds = ["visual", "fusion"] if args.expert == "all" else [args.expert]
    for kind in kinds:
        prev = experts.get(kind)
        expert, rows = train_expert(kind, data, tcfg, point_decoder=experts["anchor"].decoder, init=prev)
        experts[kind] = expert
        log_path = out / f"log_{kind}.csv"
        write_log(rows, log_path, append=prev is not None)
        man.add(log_path)
        man.flush()

    ordered = [experts[k] for k in EXPERT_KINDS if k in experts]
    save_checkpoint(ordered, man.add(out / "model.v2ck"), config)
    man.flush()
    return 0


def _select_experts(which: str, available: dict) -> list[str]:
    kinds = list(EXPERT_KINDS) if which == "all" else [which]
    missing = [k for k in kinds if k not in available]
    if missing:
        raise UsageError(f"checkpoint has no {', '.join(missing)} expert")
    return kinds


def _run_experts(args):
    """Shared body of infer/select: per-pair predictions, selections and scores."""
    dirs = pair_dirs(args.data)
    pairs = _pairs_from(dirs)
    loaded, manifest = load_checkpoint(args.checkpoint)
    experts = {e.kind: e for e in loaded}
    kinds = _select_experts(args.expert, experts)
    backend = FeatureBackend(seed=manifest["backend_seed"])
    data = prepare_pairs(pairs, backend, AnchorConfig(n_points=args.n_anchor_points))
    preds = {k: predict_masks(experts[k], data) for k in kinds}
    results = []
    for i, d in enumerate(dirs):
        cands = [(EXPERT_KINDS.index(k), Mask(preds[k][i])) for k in kinds]
        selection = None
        if len(kinds) > 1 and args.select != "none":
            ctx = SelectionContext(
                data.anchor_q[i], data.anchor_t[i], pairs[i].query_mask,
                pccs_anchor_config(), seed=i, decoder=experts["anchor"].decoder,
            )
            selection = (select_expert if args.select == "pccs" else cycle_mask_select)(cands, ctx)
        chosen = EXPERT_KINDS[selection.expert_id] if selection else kinds[0]
        results.append((d, pairs[i], {k: preds[k][i] for k in kinds}, chosen, selection))
    return results


def _anchor_only(args, man) -> int:
    backend = FeatureBackend()
    cfg = AnchorConfig(n_points=args.n_anchor_points)
    for d in pair_dirs(args.data):
        pair = load_pair(d)
        try:
            prompt = generate_anchor_prompt(
                backend.encode_anchor(pair.query_image), backend.encode_anchor(pair.target_image), pair.query_mask, cfg
            )
        except EmptyForegroundError as e:
            log.warning("%s: %s", d.name, e)
            continue
        path = man.add(Path(args.out) / d.name / "anchor_points.csv")
        path.parent.mkdir(parents=True, exist_ok=True)
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["x", "y", "label"])
        for (x, y), lab in zip(prompt.points.xy, prompt.labels):
            w.writerow([f"{x:.4f}", f"{y:.4f}", int(lab)])
        path.write_text(buf.getvalue())
    man.flush()
    return 0


def cmd_infer(args) -> int:
    man = RunManifest(args, [args.data, args.checkpoint])
    if args.anchor_only:
        return _anchor_only(args, man)
    if not args.checkpoint:
        raise UsageError("--checkpoint is required")
    configure_threads()
    out = Path(args.out)
    for d, pair, preds, chosen, _ in _run_experts(args):
        pdir = out / d.name
        pdir.mkdir(parents=True, exist_ok=True)
        save_mask(man.add(pdir / "pred.pgm"), Mask(preds[chosen]))
        if args.dump_all:
            for k, m in preds.items():
                save_mask(man.add(pdir / f"pred_{k}.pgm"), Mask(m))
        if args.overlay:
            side = np.concatenate(
                [_overlay(pair.query_image, pair.query_mask.data), _overlay(pair.target_image, preds[chosen], (0, 255, 0))], axis=1
            )
            write_ppm(man.add(pdir / "overlay.ppm"), side)
        (pdir / "expert.txt").write_text(chosen + "\n")
        man.add(pdir / "expert.txt")
    man.flush()
    return 0


def cmd_select(args) -> int:
    if not args.checkpoint:
        raise UsageError("--checkpoint is required")
    man = RunManifest(args, [args.data, args.checkpoint])
    configure_threads()
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["pair_id", "expert", "score", "selected"])
    for d, _, preds, chosen, sel in _run_experts(args):
        scores = {EXPERT_KINDS[s.expert_id]: s.mean_dist for s in sel.scores} if sel else {}
        for k in preds:
            w.writerow([d.name, k, f"{scores.get(k, float('nan')):.6g}", int(k == chosen)])
    path = man.add(Path(args.out) / "selections.csv")
    path.write_text(buf.getvalue())
    man.flush()
    sys.stdout.write(buf.getvalue())
    return 0


def cmd_eval(args) -> int:
    man = RunManifest(args, [args.data, args.pred])
    name = "pred.pgm" if args.expert in (None, "all") else f"pred_{args.expert}.pgm"
    rows = []
    for d in pair_dirs(args.data):
        gt = load_mask(d / "target_mask.pgm")
        pred_path = Path(args.pred) / d.name / name
        if not pred_path.exists():
            raise UsageError(f"missing prediction {pred_path}")
        pred = load_mask(pred_path)
        rows.append((d.name, compute_iou(pred, gt), localization_error(pred, gt)))
    report = MetricReport.from_instances(rows)
    path = man.add(Path(args.out) / "metrics.csv")
    path.write_text(report.to_csv())
    man.flush()
    print(f"IoU {report.iou:.4f}  Loc.E {report.loc_e:.4f}  ({len(rows)} pairs)")
    return 0


# --- argument parsing ------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="v2lab", description="Cross-view object correspondence on synthetic two-view data.")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    def common(p, config=True):
        if config:
            p.add_argument("--config", type=Path, help="key=value file with scene and training settings")
            p.add_argument("--seed", type=int)
        p.add_argument("--out", type=Path, required=True)

    p = sub.add_parser("gen-data", help="write a synthetic train/test benchmark")
    common(p)
    p.add_argument("--n-train", type=int, default=512)
    p.add_argument("--n-test", type=int, default=128)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="pretrain the point decoder and train Visual/Fusion experts")
    common(p)
    p.add_argument("--data", type=Path, required=True, help="directory of training pairs")
    p.add_argument("--expert", choices=EXPERT_KINDS + ("all",), default="all")
    p.add_argument("--checkpoint", type=Path, help="resume from / extend this checkpoint")
    p.add_argument("--steps", type=int, help="override max_steps")
    p.set_defaults(func=cmd_train)

    for name, func, hlp in (("infer", cmd_infer, "predict target masks"), ("select", cmd_select, "score and select experts")):
        p = sub.add_parser(name, help=hlp)
        common(p, config=False)
        p.add_argument("--data", type=Path, required=True)
        p.add_argument("--checkpoint", type=Path)
        p.add_argument("--expert", choices=EXPERT_KINDS + ("all",), default="all")
        p.add_argument("--select", choices=("pccs", "cyclemask", "none"), default="pccs")
        p.add_argument("--n-anchor-points", type=int, default=1)
        if name == "infer":
            p.add_argument("--dump-all", action="store_true", help="also write every expert's mask")
            p.add_argument("--overlay", action="store_true", help="write side-by-side overlay PPMs")
            p.add_argument("--anchor-only", action="store_true", help="only emit anchor points as CSV")
        p.set_defaults(func=func)

    p = sub.add_parser("eval", help="score predicted masks against ground truth")
    common(p, config=False)
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--pred", type=Path, required=True)
    p.add_argument("--expert", choices=EXPERT_KINDS + ("all",))
    p.set_defaults(func=cmd_eval)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    if getattr(args, "n_anchor_points", 1) < 1:
        print("error: --n-anchor-points must be >= 1", file=sys.stderr)
        return 2
    try:
        return args.func(args)
    except UsageError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except Exception as e:  # noqa: BLE001 - any runtime failure maps to exit 1
        log.debug("failure", exc_info=True)
        print(f"error: {type(e).__name__}: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
