"""Command-line entry points: dataset generation, training, pseudo-labeling,
evaluation, single-image segmentation (local or against a running service),
gradient verification, and the HTTP service itself.
"""

from __future__ import annotations

import argparse
import base64
import json
import os
import sys
import urllib.request
from pathlib import Path

import numpy as np
from PIL import Image

from .data import DatasetError, RleMask, decode_rle, load_dataset
from .gradcheck import TOLERANCE, run_gradient_suite
from .synthgen import ConceptSplit, SceneConfig, SceneGenerationError, \
    generate_dataset, split_zero_shot
from .training import TrainConfig, TrainingDiverged, pseudo_label, train

DEFAULT_PORT_ENV = "MASKGROUND_PORT"


def _parse_holdout(text: str) -> ConceptSplit:
    pairs = []
    for chunk in text.split(","):
        color, _, shape = chunk.strip().partition(":")
        if not color or not shape:
            raise ValueError(f"holdout pairs look like 'color:shape', got {chunk!r}")
        pairs.append((color, shape))
    return ConceptSplit(tuple(pairs))


def cmd_gen_data(args: argparse.Namespace) -> int:
    config = SceneConfig.from_file(args.config) if args.config else SceneConfig()
    if args.seed is not None:
        from dataclasses import replace
        config = replace(config, seed=args.seed)
    if args.holdout:
        split = _parse_holdout(args.holdout)
        train_dir, test_dir = split_zero_shot(
            config, split, args.n_train, args.n_test, args.out)
        print(f"wrote train dataset: {train_dir}")
        print(f"wrote test dataset: {test_dir}")
    else:
        manifest = generate_dataset(config, args.n, args.out)
        print(f"wrote dataset manifest: {manifest}")
    return 0


def cmd_train(args: argparse.Namespace) -> int:
    config = TrainConfig.from_file(args.config) if args.config else TrainConfig()
    datasets = [load_dataset(d) for d in args.data]
    val = load_dataset(args.val_data) if args.val_data else None
    final = train(config, datasets, args.out, val_dataset=val,
                  resume_from=args.resume)
    print(f"final checkpoint: {final}")
    print(f"training log: {Path(args.out) / 'train_log.ndjson'}")
    return 0


def cmd_pseudo_label(args: argparse.Namespace) -> int:
    stats = pseudo_label(args.teacher, load_dataset(args.data), args.out)
    print(f"wrote pseudo-labeled dataset: {args.out}")
    print(json.dumps(stats, sort_keys=True))
    if stats["caption_only"]:
        print(f"warning: {stats['caption_only']} samples got no pseudo masks")
    return 0


def cmd_eval(args: argparse.Namespace) -> int:
    from .checkpoint import load_model
    from .evaluation import (SegmentationEngine, evaluate_grounding_miou,
                             evaluate_miou, evaluate_recall)
    from .metrics import build_report

    samples = [s for s in load_dataset(args.data)]
    engine = None
    if args.checkpoint:
        model, embedder, _, _ = load_model(args.checkpoint)
        engine = SegmentationEngine(model, embedder, phrase_mode=args.phrase_mode)
    report_kwargs: dict = {}
    extra: dict = {}
    if args.metric in ("miou", "all"):
        acc, cats = evaluate_miou(engine, samples, per_pixel=args.per_pixel)
        report_kwargs.update(confusion=acc, categories=cats)
    if args.metric in ("grounding-miou", "all"):
        acc_g, _ = evaluate_grounding_miou(engine, samples)
        report_kwargs.update(grounding=acc_g.miou())
    if args.metric in ("recall", "all"):
        recall = evaluate_recall(engine, samples,
                                 proposals_from=args.proposals_from)
        report_kwargs.update(recall=recall)
    report = build_report(**report_kwargs, extra=extra)
    out = Path(args.report)
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(json.dumps(report, indent=2, sort_keys=True) + "\n",
                   encoding="utf-8")
    print(f"wrote report: {out}")
    for key in ("miou", "grounding_miou", "proposal_recall"):
        if key in report:
            print(f"{key}: {report[key]}")
    return 0


def _label_map_from_response(payload: dict) -> np.ndarray:
    h, w = payload["mask_size"]
    label_map = np.zeros((h, w), dtype=np.int64)
    for k, entry in enumerate(payload["label_map"]):
        rle = RleMask.from_json(entry["mask"])
        label_map[decode_rle(rle).astype(bool)] = k
    return label_map


def cmd_segment(args: argparse.Namespace) -> int:
    from .service import QuerySpec, SegmentOptions, SegmentRequest

    names = [q.strip() for q in args.queries.split(",") if q.strip()]
    if not names:
        print("error: --queries needs at least one category", file=sys.stderr)
        return 1
    image_b64 = base64.b64encode(Path(args.image).read_bytes()).decode("ascii")
    request = SegmentRequest(
        image=image_b64,
        queries=[QuerySpec(category=n) for n in names],
        options=SegmentOptions(phrase_mode=args.phrase_mode))
    if args.server:
        body = json.dumps(request.model_dump()).encode("utf-8")
        req = urllib.request.Request(
            args.server.rstrip("/") + "/v1/segment", data=body,
            headers={"Content-Type": "application/json"})
        with urllib.request.urlopen(req) as resp:
            payload = json.loads(resp.read().decode("utf-8"))
    else:
        if not args.checkpoint:
            print("error: need --checkpoint or --server", file=sys.stderr)
            return 1
        from .checkpoint import checkpoint_model_id, load_model
        from .service import run_segment_request
        model, embedder, _, _ = load_model(args.checkpoint)
        response = run_segment_request(
            model, embedder, checkpoint_model_id(args.checkpoint), request)
        payload = response.model_dump()

    out_prefix = Path(args.out_prefix)
    out_prefix.parent.mkdir(parents=True, exist_ok=True)
    json_path = out_prefix.with_suffix(".json")
    json_path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n",
                         encoding="utf-8")

    from .palette import overlay_label_map
    with Image.open(args.image) as img:
        rgb = np.asarray(img.convert("RGB"), dtype=np.float32) / 255.0
    pad_h, pad_w = payload["padding"]
    if pad_h or pad_w:
        mode = "reflect" if pad_h < rgb.shape[0] and pad_w < rgb.shape[1] else "edge"
        rgb = np.pad(rgb, ((0, pad_h), (0, pad_w), (0, 0)), mode=mode)
    label_map = _label_map_from_response(payload)
    overlay = overlay_label_map(rgb, label_map)
    png_path = out_prefix.with_suffix(".png")
    Image.fromarray(overlay, mode="RGB").save(png_path)
    print(f"wrote segmentation json: {json_path}")
    print(f"wrote overlay png: {png_path}")
    return 0


def cmd_gradcheck(args: argparse.Namespace) -> int:
    results = run_gradient_suite(trials=args.trials, seed=args.seed)
    failed = False
    for name, err in results.items():
        status = "ok" if err < TOLERANCE else "FAIL"
        print(f"{name}: max relative error {err:.3e} [{status}]")
        failed = failed or err >= TOLERANCE
    return 1 if failed else 0


def cmd_serve(args: argparse.Namespace) -> int:
    import uvicorn
    from .service import create_app

    app = create_app(args.checkpoint, max_pixels=args.max_pixels,
                     strict_size=args.strict_size, static_dir=args.static_dir)
    uvicorn.run(app, host=args.host, port=args.port, log_level="warning")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="maskground",
        description="Open-vocabulary segmentation from masks and captions.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate a synthetic shapes dataset")
    p.add_argument("--config", help="scene config file (json/yaml)")
    p.add_argument("--out", required=True)
    p.add_argument("--n", type=int, default=100)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--holdout", help="zero-shot holdout pairs, e.g. 'red:triangle'")
    p.add_argument("--n-train", type=int, default=1000)
    p.add_argument("--n-test", type=int, default=200)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="train a model")
    p.add_argument("--config", help="train config file (json/yaml)")
    p.add_argument("--data", action="append", required=True,
                   help="dataset directory (repeatable; mixed with equal probability)")
    p.add_argument("--val-data")
    p.add_argument("--out", required=True)
    p.add_argument("--resume", help="checkpoint to continue from")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("pseudo-label",
                       help="annotate a caption dataset with teacher masks")
    p.add_argument("--teacher", required=True)
    p.add_argument("--data", "--dataset", dest="data", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_pseudo_label)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a dataset")
    p.add_argument("--checkpoint")
    p.add_argument("--data", "--dataset", dest="data", required=True)
    p.add_argument("--metric", choices=("miou", "grounding-miou", "recall", "all"),
                   default="all")
    p.add_argument("--report", default="eval_report.json")
    p.add_argument("--phrase-mode", choices=("word", "mean"), default="word")
    p.add_argument("--proposals-from", choices=("checkpoint", "gt"),
                   default="checkpoint")
    p.add_argument("--per-pixel", action="store_true",
                   help="score the no-proposal per-pixel baseline instead")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("segment", help="segment one image with text queries")
    p.add_argument("--image", required=True)
    p.add_argument("--queries", required=True,
                   help="comma-separated category names")
    p.add_argument("--checkpoint")
    p.add_argument("--server", help="base URL of a running service")
    p.add_argument("--phrase-mode", choices=("word", "mean"), default="word")
    p.add_argument("--out-prefix", default="segment_out")
    p.set_defaults(func=cmd_segment)

    p = sub.add_parser("gradcheck", help="finite-difference gradient suite")
    p.add_argument("--trials", type=int, default=20)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("serve", help="run the HTTP inference service")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--port", type=int,
                   default=int(os.environ.get(DEFAULT_PORT_ENV, "8000")))
    p.add_argument("--max-pixels", type=int, default=4 * 1024 * 1024)
    p.add_argument("--strict-size", action="store_true",
                   help="reject images not divisible by 32 instead of padding")
    p.add_argument("--static-dir", help="directory of built UI assets to serve")
    p.set_defaults(func=cmd_serve)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (DatasetError, SceneGenerationError, TrainingDiverged, ValueError,
            FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
