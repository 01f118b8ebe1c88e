"""Command-line interface.

Subcommands: gen-data, train, eval, infer, ablate, gradcheck, serve. All
diagnostics go to stderr; exit code 0 on success.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import numcheck, screens, training
from .data import load_split, parse_elements, read_image, write_mask
from .metrics import evaluate
from .model import (ModelConfig, SegmentationModel, load_checkpoint,
                    predict_mask, save_checkpoint)
from .training import TrainConfig


def _load_json(path):
    with open(path) as f:
        return json.load(f)


def _cmd_gen_data(args) -> int:
    spec = screens.GeneratorSpec.from_dict(_load_json(args.spec)) if args.spec \
        else screens.GeneratorSpec()
    counts = screens.generate_dataset(spec, args.count, args.out)
    print(json.dumps({"out": str(args.out), "pairs": counts}, sort_keys=True))
    return 0


def _cmd_train(args) -> int:
    model_config = ModelConfig.from_dict(_load_json(args.model_config)) \
        if args.model_config else ModelConfig()
    train_config = TrainConfig.from_dict(_load_json(args.train_config)) \
        if args.train_config else TrainConfig()
    data_dir = Path(args.data)
    train_samples = load_split(data_dir / "train.jsonl")
    val_samples = load_split(data_dir / "val.jsonl")

    def progress(step, loss, report):
        print(f"step {step}: train loss {loss:.4f}, val miou {report.miou:.4f}, "
              f"val accuracy {report.accuracy:.4f}", file=sys.stderr)

    result = training.train(model_config, train_config, train_samples, val_samples,
                            progress=progress if args.verbose else None)
    model = SegmentationModel(model_config)
    model.set_params(result.params)
    save_checkpoint(model, args.out)
    training.write_log(f"{args.out}.log.csv", result.log_rows)
    if result.diverged:
        print("training diverged (non-finite loss); best finite checkpoint kept",
              file=sys.stderr)
    print(json.dumps({
        "checkpoint": str(args.out),
        "best_step": result.best_step,
        "steps_run": result.steps_run,
        "val_accuracy": result.best_accuracy,
        "val_miou": result.best_miou,
        "diverged": result.diverged,
    }, sort_keys=True))
    return 0


def _cmd_eval(args) -> int:
    model = load_checkpoint(args.ckpt)
    samples = load_split(Path(args.data) / f"{args.split}.jsonl")
    report = evaluate(model, samples, split=args.split)
    print(report.to_json())
    return 0


def _cmd_infer(args) -> int:
    model = load_checkpoint(args.ckpt)
    image = read_image(args.image).astype(np.float32) / 255.0
    elements = parse_elements(_load_json(args.elements)) if args.elements else []
    output = model.infer(image, elements, args.expr)
    heat = np.round(output.probabilities[..., 1] * 255).astype(np.uint8)
    from PIL import Image
    Image.fromarray(heat, mode="L").save(args.out)
    mask_path = Path(args.out).with_suffix(".mask.png")
    write_mask(mask_path, predict_mask(output, args.threshold))
    print(json.dumps({"heatmap": str(args.out), "mask": str(mask_path)}, sort_keys=True))
    return 0


def _cmd_ablate(args) -> int:
    model_config = ModelConfig.from_dict(_load_json(args.model_config)) \
        if args.model_config else ModelConfig()
    train_config = TrainConfig.from_dict(_load_json(args.train_config)) \
        if args.train_config else TrainConfig()
    cells = training.run_ablation_grid(args.data, model_config, train_config,
                                       jobs=args.jobs)
    training.write_grid_csv(args.out, cells)
    for c in cells:
        acc = "failed" if c.accuracy is None else f"{c.accuracy:.4f}"
        miou = "" if c.miou is None else f"{c.miou:.4f}"
        print(f"img={c.use_image} el={c.use_elements} proj={c.use_projection} "
              f"{c.description}: accuracy {acc} miou {miou}")
    return 0 if all(c.status == "ok" for c in cells) else 1


def _cmd_gradcheck(args) -> int:
    results = numcheck.run_op_checks(seeds=args.seeds)
    results.append(numcheck.run_model_check(size=args.size))
    worst_by_name: dict[str, float] = {}
    for r in results:
        worst_by_name[r.name] = max(worst_by_name.get(r.name, 0.0), r.error)
    failed = [r for r in results if not r.ok]
    for name, err in worst_by_name.items():
        status = "ok" if err <= numcheck.TOLERANCE else "FAIL"
        print(f"{name}: max rel error {err:.3e} [{status}]")
    if failed:
        for r in failed:
            print(f"violation: {r.name} seed {r.seed} error {r.error:.3e}", file=sys.stderr)
        return 1
    return 0


def _cmd_serve(args) -> int:
    import uvicorn

    from .service import create_app
    uvicorn.run(create_app(args.ckpt), host=args.host, port=args.port)
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="elemseg")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate a synthetic screen dataset")
    p.add_argument("--spec", help="generator spec JSON (defaults when omitted)")
    p.add_argument("--out", required=True, help="output dataset directory")
    p.add_argument("--count", type=int, required=True, help="number of screens")
    p.set_defaults(fn=_cmd_gen_data)

    p = sub.add_parser("train", help="train a model on a dataset directory")
    p.add_argument("--data", required=True)
    p.add_argument("--model-config", help="model config JSON")
    p.add_argument("--train-config", help="train config JSON")
    p.add_argument("--out", required=True, help="checkpoint output path")
    p.add_argument("--verbose", action="store_true")
    p.set_defaults(fn=_cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a split")
    p.add_argument("--data", required=True)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--split", default="test", choices=("train", "val", "test"))
    p.set_defaults(fn=_cmd_eval)

    p = sub.add_parser("infer", help="run one inference and write heatmap + mask PNGs")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--image", required=True, help="input PNG")
    p.add_argument("--elements", help="JSON array of {text, bbox}")
    p.add_argument("--expr", required=True, help="referring expression")
    p.add_argument("--out", required=True, help="heatmap PNG path; mask lands beside it")
    p.add_argument("--threshold", type=float, default=0.5)
    p.set_defaults(fn=_cmd_infer)

    p = sub.add_parser("ablate", help="train and evaluate the ablation grid")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True, help="output CSV path")
    p.add_argument("--model-config")
    p.add_argument("--train-config")
    p.add_argument("--jobs", type=int, default=1)
    p.set_defaults(fn=_cmd_ablate)

    p = sub.add_parser("gradcheck", help="finite-difference gradient checks")
    p.add_argument("--size", type=int, default=16, help="image extent for the model check")
    p.add_argument("--seeds", type=int, default=numcheck.DEFAULT_SEEDS)
    p.set_defaults(fn=_cmd_gradcheck)

    p = sub.add_parser("serve", help="run the segmentation HTTP service")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--port", type=int, default=8000)
    p.set_defaults(fn=_cmd_serve)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except BrokenPipeError:
        return 1
    except Exception as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
