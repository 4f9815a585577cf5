"""Command-line entry points: train, sweep, eval, decode, codec check, gradcheck.

Outputs are JSON (single objects or JSON lines) or CSV; the run directory root
comes from --out or the PATCHPOINT_RUN_DIR environment variable.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import sys
import time
from pathlib import Path

import numpy as np

from . import decoder, harness, metrics, text_baseline
from .backbone import SyntheticImage, ToyPointModel
from .geometry import PixelPoint, build_grid, max_roundtrip_error
from .targets import PointAnnotation


def _parse_value(raw: str):
    raw = raw.strip()
    if raw.lower() in ("true", "false"):
        return raw.lower() == "true"
    for cast in (int, float):
        try:
            return cast(raw)
        except ValueError:
            pass
    return raw


def load_config_file(path) -> dict:
    """Plain-text ``key = value`` configuration, # comments allowed."""
    out = {}
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"{path}:{lineno}: expected 'key = value'")
        key, raw = line.split("=", 1)
        out[key.strip()] = _parse_value(raw)
    return out


def build_configs(file_cfg: dict, overrides: dict):
    task_fields = {f.name for f in dataclasses.fields(harness.TaskConfig)}
    train_fields = {f.name for f in dataclasses.fields(harness.TrainConfig)}
    task_kwargs, train_kwargs = {}, {}
    merged = dict(file_cfg)
    merged.update({k: v for k, v in overrides.items() if v is not None})
    for key, value in merged.items():
        if key in task_fields:
            task_kwargs[key] = value
        elif key in train_fields:
            train_kwargs[key] = value
        elif key == "sweep_sizes" and isinstance(value, str):
            task_kwargs[key] = tuple(int(s) for s in value.split(","))
        else:
            raise ValueError(f"unknown config key {key!r}")
    if "sweep_sizes" in task_kwargs and isinstance(task_kwargs["sweep_sizes"], str):
        task_kwargs["sweep_sizes"] = tuple(
            int(s) for s in task_kwargs["sweep_sizes"].split(",")
        )
    return harness.TaskConfig(**task_kwargs), harness.TrainConfig(**train_kwargs)


def _point_to_json(p: PixelPoint) -> dict:
    return {"x": p.x, "y": p.y, "frame": p.frame, "id": p.object_id}


def _point_from_json(d: dict) -> PixelPoint:
    return PixelPoint(float(d["x"]), float(d["y"]), int(d.get("frame", 0)), d.get("id"))


def read_annotations(path):
    """JSON lines: {"image": ..., "query": ..., "points": [...]} per example."""
    rows = []
    for line in Path(path).read_text().splitlines():
        if not line.strip():
            continue
        d = json.loads(line)
        image = SyntheticImage.from_json(d["image"]) if "image" in d else None
        points = [_point_from_json(p) for p in d.get("points", [])]
        rows.append({"image": image, "query": d.get("query", ""), "points": points})
    return rows


def write_annotations(path, rows) -> None:
    with open(path, "w") as f:
        for r in rows:
            rec = {"query": r["query"], "points": [_point_to_json(p) for p in r["points"]]}
            if r.get("image") is not None:
                rec["image"] = r["image"].to_json()
            f.write(json.dumps(rec) + "\n")


def cmd_codec_check(args) -> int:
    grid = build_grid(args.width, args.height, args.frames)
    start = time.perf_counter()
    err = max_roundtrip_error(grid)
    elapsed = time.perf_counter() - start
    bound = grid.vit_patch_px / 3.0 * np.sqrt(2.0) / 2.0
    print(json.dumps({
        "width": args.width, "height": args.height, "frames": args.frames,
        "pixels": args.width * args.height * args.frames,
        "max_error_px": err, "bound_px": float(bound),
        "ok": bool(err <= bound + 1e-9), "seconds": elapsed,
    }))
    return 0 if err <= bound + 1e-9 else 1


def cmd_decode(args) -> int:
    model = ToyPointModel.load(args.checkpoint)
    example = json.loads(Path(args.input).read_text())
    image = SyntheticImage.from_json(example["image"])
    query = example["query"]
    if model.head == "text":
        result = text_baseline.decode_text(model, image, query)
        points, n_tokens = result.points, result.n_coord_tokens
    else:
        import torch

        with torch.no_grad():
            res = decoder.decode(model, image, query,
                                 decoder.DecodeConfig(max_points=args.max_points))
        points, n_tokens = res.points, res.n_grounding_tokens
    out = {"points": [_point_to_json(p) for p in points], "n_grounding_tokens": n_tokens}
    Path(args.out).write_text(json.dumps(out, indent=2))
    print(json.dumps({"n_points": len(points), "out": str(args.out)}))
    return 0


def cmd_eval(args) -> int:
    gts = read_annotations(args.gt)
    preds = read_annotations(args.pred)
    if len(gts) != len(preds):
        raise SystemExit(f"pred/gt length mismatch: {len(preds)} vs {len(gts)}")
    if args.radius is not None:
        cfg = metrics.MatchConfig(args.radius)
    else:
        first = next((g["image"] for g in gts if g["image"] is not None), None)
        if first is None:
            raise SystemExit("no --radius given and gt file carries no image spec")
        cfg = metrics.MatchConfig.for_grid(first.grid)
    pairs = [(p["points"], g["points"]) for p, g in zip(preds, gts)]
    report = metrics.aggregate_reports(pairs, cfg)
    if args.render:
        render_dir = Path(args.render)
        render_dir.mkdir(parents=True, exist_ok=True)
        for i, (p, g) in enumerate(zip(preds, gts)):
            metrics.render_overlay(
                g["image"], p["points"], g["points"], render_dir / f"example{i:04d}.ppm"
            )
    print(json.dumps(report.as_dict()))
    return 0


def cmd_train(args) -> int:
    file_cfg = load_config_file(args.config) if args.config else {}
    overrides = {"head": args.head, "steps": args.steps, "seed": args.seed}
    task, cfg = build_configs(file_cfg, overrides)
    result = harness.train(task, cfg, args.out)
    print(json.dumps({
        "best_f1": result.best_f1,
        "best_step": result.best_step,
        "final": result.final_report.as_dict(),
        "checkpoint": str(result.checkpoint_path),
        "log": str(result.log_path),
    }))
    return 0


def cmd_sweep(args) -> int:
    file_cfg = load_config_file(args.config) if args.config else {}
    task, cfg = build_configs(file_cfg, {"seed": args.seed})
    out_dir = harness.resolve_run_dir(args.out)
    csv_path = out_dir / "sweep.csv"
    rows = harness.sweep(
        task, cfg, seeds=range(args.seeds), epochs=args.epochs,
        run_dir=out_dir, csv_path=csv_path,
    )
    print(json.dumps({"rows": rows, "csv": str(csv_path)}))
    return 0


def cmd_gradcheck(args) -> int:
    worst = 0.0
    reports = []
    for seed in range(args.instances):
        rep = harness.finite_difference_gradcheck(seed=args.seed + seed)
        reports.append(rep["max"])
        worst = max(worst, rep["max"])
    print(json.dumps({
        "instances": args.instances,
        "per_instance_max": reports,
        "max_relative_error": worst,
        "ok": worst < 1e-4,
    }))
    return 0 if worst < 1e-4 else 1


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(prog="patchpoint")
    sub = parser.add_subparsers(dest="command", required=True)

    codec = sub.add_parser("codec", help="coordinate codec utilities")
    codec_sub = codec.add_subparsers(dest="codec_command", required=True)
    check = codec_sub.add_parser("check", help="brute-force round-trip oracle")
    check.add_argument("--width", type=int, required=True)
    check.add_argument("--height", type=int, required=True)
    check.add_argument("--frames", type=int, default=1)
    check.set_defaults(func=cmd_codec_check)

    dec = sub.add_parser("decode", help="constrained decode of one example")
    dec.add_argument("--checkpoint", required=True)
    dec.add_argument("--input", required=True)
    dec.add_argument("--out", required=True)
    dec.add_argument("--max-points", type=int, default=64)
    dec.set_defaults(func=cmd_decode)

    ev = sub.add_parser("eval", help="score predictions against ground truth")
    ev.add_argument("--pred", required=True)
    ev.add_argument("--gt", required=True)
    ev.add_argument("--radius", type=float, default=None)
    ev.add_argument("--render", default=None)
    ev.set_defaults(func=cmd_eval)

    tr = sub.add_parser("train", help="train on the synthetic pointing task")
    tr.add_argument("--config", default=None)
    tr.add_argument("--head", choices=["grounding", "text"], default=None)
    tr.add_argument("--steps", type=int, default=None)
    tr.add_argument("--seed", type=int, default=None)
    tr.add_argument("--out", default=None)
    tr.set_defaults(func=cmd_train)

    sw = sub.add_parser("sweep", help="sample-efficiency sweep over dataset sizes")
    sw.add_argument("--config", default=None)
    sw.add_argument("--seeds", type=int, default=3)
    sw.add_argument("--epochs", type=int, default=6)
    sw.add_argument("--seed", type=int, default=None)
    sw.add_argument("--out", default=None)
    sw.set_defaults(func=cmd_sweep)

    gc = sub.add_parser("gradcheck", help="finite-difference gradient check")
    gc.add_argument("--instances", type=int, default=5)
    gc.add_argument("--seed", type=int, default=0)
    gc.set_defaults(func=cmd_gradcheck)

    args = parser.parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
