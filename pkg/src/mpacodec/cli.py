"""``mpacodec`` command line: train, encode, decode, eval, toydata."""

from __future__ import annotations

import argparse
import csv
import logging
import sys
from pathlib import Path

import numpy as np

from .codec import TASKS, Codec, pad_image
from .data import SEG_CLASSES, list_images, read_labels, synthetic_textures, write_dataset
from .engine import CheckpointError, EvaluationError, no_grad, read_checkpoint
from .entropy import FormatError
from .mpa import ConfigurationError, DomainError
from .pipeline import decode_image, encode_image, psnr
from .pnm import read_ppm, write_pgm, write_ppm
from .training import mean_iou, parse_config, perceptual_proxy, run_from_config, task_model_from_state

EXIT_OK, EXIT_USAGE, EXIT_FORMAT, EXIT_NUMERIC = 0, 2, 3, 4
EVAL_COLUMNS = ("image", "q", "alpha", "task", "bpp_est", "bpp_act", "psnr", "proxy_perc", "task_metric")
DEFAULT_Q_GRID = "1,2,3,4,5,6,7,8"
DEFAULT_ALPHA_GRID = ",".join(f"{i}/7" for i in range(8))


def _grid(text):
    out = []
    for tok in text.split(","):
        tok = tok.strip()
        if "/" in tok:
            a, b = tok.split("/")
            out.append(float(a) / float(b))
        else:
            out.append(float(tok))
    return out


def _model(path):
    state = read_checkpoint(path)
    return Codec.from_state(state), state


def cmd_train(args):
    run = parse_config(Path(args.config).read_text())

    def progress(step, row):
        print(",".join(str(v) for v in row), flush=True)

    result = run_from_config(run, progress=progress)
    if run.stage == 2:
        print(f"trainable decoder parameters: {result.trainable} / {result.decoder_total} "
              f"({100 * result.fraction:.2f}%)")
    return EXIT_OK


def cmd_encode(args):
    model, _ = _model(args.model)
    img = read_ppm(args.input)
    enc = encode_image(model, img, args.q)
    Path(args.output).write_bytes(enc.data)
    print(f"bpp_actual={enc.bpp_act:.6f} bpp_estimated={enc.bpp_est:.6f}")
    return EXIT_OK


def cmd_decode(args):
    model, _ = _model(args.model)
    data = Path(args.input).read_bytes()
    img, trace = decode_image(model, data, alpha=args.alpha, task=args.task)
    write_ppm(args.output, img)
    if args.dump_masks:
        d = Path(args.dump_masks)
        d.mkdir(parents=True, exist_ok=True)
        for k, mask in sorted(trace.masks.items()):
            write_pgm(d / f"mask_stage{k}.pgm", np.asarray(mask)[0])
    return EXIT_OK


def _task_metric(task, task_model, recon, original, label):
    if task == "mse":
        return psnr(original, recon)
    x = pad_image(recon, 4)[None]
    if task == "cls":
        return float(task_model.predict(x)[0] == label[0])
    h, w = recon.shape[:2]
    return mean_iou(task_model.predict(x)[0, :h, :w], label[1], SEG_CLASSES)


def cmd_eval(args):
    task = args.task
    files = list_images(args.dataset)
    labels = read_labels(args.dataset) if task != "mse" else {}
    model, state = _model(args.model)
    task_model = None
    if task != "mse":
        if not any(n.startswith(f"taskmodel.{task}.") for n in state):
            raise ConfigurationError(f"checkpoint {args.model} has no frozen {task} task model")
        task_model = task_model_from_state(task, state)
    if task not in model.tasks:
        raise DomainError(f"task {task!r} is not registered in {args.model} (have {model.tasks})")
    qs, alphas = _grid(args.q_grid), _grid(args.alpha_grid)
    with open(args.out, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(EVAL_COLUMNS)
        for path in files:
            img = read_ppm(path)
            if task != "mse" and path.name not in labels:
                raise ConfigurationError(f"no label for {path.name} in labels.csv")
            for q in qs:
                enc = encode_image(model, img, q)
                for a in alphas:
                    recon, _ = decode_image(model, enc.data, alpha=a, task=task)
                    p = psnr(img, recon)
                    if not np.isfinite(enc.bpp_est) or np.isnan(p):
                        raise FloatingPointError(f"non-finite metric for {path.name} at q={q}, alpha={a}")
                    with no_grad():
                        perc = perceptual_proxy(img[None], recon[None]).item()
                    metric = _task_metric(task, task_model, recon, img, labels.get(path.name))
                    w.writerow([path.name, f"{q:g}", f"{a:.6g}", task, f"{enc.bpp_est:.6f}",
                                f"{enc.bpp_act:.6f}", f"{p:.4f}", f"{perc:.6g}", f"{metric:.6g}"])
    return EXIT_OK


def cmd_toydata(args):
    write_dataset(args.out, synthetic_textures(args.n, args.size, args.seed))
    return EXIT_OK


def build_parser():
    p = argparse.ArgumentParser(prog="mpacodec", description="Multi-path aggregation image codec.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="run stage 1 or stage 2 from a key=value config")
    t.add_argument("--config", required=True)
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("encode", help="compress a PPM image")
    e.add_argument("--input", required=True)
    e.add_argument("--model", required=True)
    e.add_argument("--q", type=float, required=True)
    e.add_argument("--output", required=True)
    e.set_defaults(func=cmd_encode)

    d = sub.add_parser("decode", help="reconstruct a PPM from an .mpa stream")
    d.add_argument("--input", required=True)
    d.add_argument("--model", required=True)
    d.add_argument("--alpha", type=float, default=0.0)
    d.add_argument("--task", choices=TASKS, default=None)
    d.add_argument("--output", required=True)
    d.add_argument("--dump-masks", default=None, metavar="DIR")
    d.set_defaults(func=cmd_decode)

    v = sub.add_parser("eval", help="rate/quality sweep over a dataset directory")
    v.add_argument("--dataset", required=True)
    v.add_argument("--model", required=True)
    v.add_argument("--q-grid", default=DEFAULT_Q_GRID)
    v.add_argument("--alpha-grid", default=DEFAULT_ALPHA_GRID)
    v.add_argument("--task", choices=TASKS, default="mse")
    v.add_argument("--out", required=True)
    v.set_defaults(func=cmd_eval)

    g = sub.add_parser("toydata", help="write a seeded synthetic texture dataset")
    g.add_argument("--out", required=True)
    g.add_argument("--n", type=int, default=64)
    g.add_argument("--size", type=int, default=32)
    g.add_argument("--seed", type=int, default=0)
    g.set_defaults(func=cmd_toydata)
    return p


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except (ConfigurationError, DomainError) as exc:
        print(f"mpacodec: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (FormatError, CheckpointError) as exc:
        print(f"mpacodec: format error: {exc}", file=sys.stderr)
        return EXIT_FORMAT
    except (FloatingPointError, EvaluationError, OverflowError) as exc:
        print(f"mpacodec: numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except OSError as exc:
        print(f"mpacodec: error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
