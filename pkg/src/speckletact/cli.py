"""speckletact command line.

Every subcommand writes ``invocation.json`` (argv, resolved options,
start time) next to its output. Exit codes: 0 success, 2 usage error,
3 data error, 4 numeric failure. Failures print one line to stderr::

    speckletact: error[<code>]: <message>
"""
from __future__ import annotations

import argparse
import datetime
import json
import os
import sys
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from . import __version__, kernels
from .dataset import (TaskSpec, gen_dataset, load_dataset, load_frame,
                      manifest_hash, read_manifest, render_contact)
from .errors import FormatError, InvalidArgument, SpeckletactError
from .formats import write_pgm, write_spkl
from .mechanics import TEXTURE_CLASSES, ContactStimulus, texture_mask_procedural
from .model import load_checkpoint, save_checkpoint
from .optics import CROP_REGIONS, OpticsParams, crop_region, zncc
from .scene import PRESETS, default_scene, load_scene
from .training import (Hyperparams, ablation_crop_regions, ablation_train_size, bench_inference,
                       default_hyperparams, evaluate, format_regression_lines, model_for, train, write_csv,
                       write_eval_outputs, write_json)

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4


class UsageError(InvalidArgument):
    pass


# --- argument helpers --------------------------------------------------------

def _pair(text):
    try:
        x, y = (float(v) for v in text.split(","))
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"expected X,Y in mm, got {text!r}") from exc
    return x, y


def _force_range(text):
    """start:stop:step inclusive of stop, e.g. 0:1:0.1 -> 11 values."""
    try:
        start, stop, step = (float(v) for v in text.split(":"))
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"expected start:stop:step, got {text!r}") from exc
    if step <= 0 or stop < start:
        raise argparse.ArgumentTypeError("need step > 0 and stop >= start")
    n = int(round((stop - start) / step)) + 1
    return [round(start + i * step, 10) for i in range(n)]


def _int_list(text):
    try:
        return [int(v) for v in text.split(",")]
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from exc


def _resolve_scene(spec, default_preset="flat"):
    spec = spec or default_preset
    if spec in PRESETS:
        return default_scene(spec)
    if not Path(spec).exists():
        raise UsageError(f"--scene {spec!r} is neither a preset ({', '.join(PRESETS)}) nor a file")
    return load_scene(spec)


def _load_config(path):
    if path is None:
        return {}
    try:
        doc = json.loads(Path(path).read_text())
    except FileNotFoundError as exc:
        raise UsageError(f"config file {path} not found") from exc
    except ValueError as exc:
        raise UsageError(f"config file {path} is not valid JSON") from exc
    if not isinstance(doc, dict):
        raise UsageError("config file must hold a JSON object")
    return doc


def _apply_config(args, parser, config):
    """Config keys fill options the user did not give on the command line; flags win."""
    dests = {a.dest for a in parser._actions} - {"help", "config", "command", "func"}
    unknown = sorted(k for k in config if k.replace("-", "_") not in dests and k != "task_spec")
    if unknown:
        raise UsageError(f"unknown config key: {unknown[0]}")
    for key, value in config.items():
        dest = key.replace("-", "_")
        if dest in dests and getattr(args, dest) == parser.get_default(dest):
            setattr(args, dest, value)


def _write_invocation(target_dir, args, argv):
    target = Path(target_dir)
    target.mkdir(parents=True, exist_ok=True)
    resolved = {k: v for k, v in vars(args).items() if k != "func"}
    doc = {"argv": list(argv), "resolved": resolved, "version": __version__,
           "kernel_backend": kernels.BACKEND,
           "started": datetime.datetime.now(datetime.timezone.utc).isoformat()}
    (target / "invocation.json").write_text(json.dumps(doc, sort_keys=True, indent=1, default=str) + "\n")


def _out_dir_of(path):
    p = Path(path)
    return p if p.suffix == "" else p.parent


# --- subcommands -------------------------------------------------------------

def cmd_simulate(args):
    scene = _resolve_scene(args.scene)
    texture = texture_mask_procedural(args.texture) if args.texture else None
    x, y = args.pos if args.pos else (scene.geometry.width_mm / 2, scene.geometry.depth_mm / 2)
    stim = None
    if args.force > 0:
        stim = ContactStimulus((x, y), args.force, args.sigma, texture)
    optics = OpticsParams.for_scene(scene, noise_frac=0.0 if args.no_noise else scene.camera.read_noise_frac)
    frame = render_contact(scene, stim, optics, args.seed, args.stiffness)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    write_pgm(out, frame.pixels)
    crop = crop_region(frame, "A")
    stem = out.with_suffix("")
    write_pgm(f"{stem}.cropA.pgm", crop.pixels)
    write_spkl(f"{stem}.spkl", crop.pixels)
    write_spkl(f"{stem}.raw.spkl", frame.pixels)
    print(f"wrote {out} ({frame.shape[0]}x{frame.shape[1]}), {stem}.cropA.pgm, {stem}.spkl")


def decorrelation_curve(scene, forces, xy, sigma=1.5, stiffness=5000.0, texture=None):
    """ZNCC of each force's noise-free render against the unloaded render."""
    optics = OpticsParams.for_scene(scene, noise_frac=0.0, normalization="raw")
    ref = render_contact(scene, None, optics, 0, stiffness)
    curve = []
    for f in forces:
        stim = ContactStimulus(xy, f, sigma, texture) if f > 0 else None
        curve.append((f, zncc(ref, render_contact(scene, stim, optics, 0, stiffness))))
    return curve


def cmd_sweep(args):
    scene = _resolve_scene(args.scene)
    xy = args.pos if args.pos else (scene.geometry.width_mm / 2, scene.geometry.depth_mm / 2)
    curve = decorrelation_curve(scene, args.forces, xy, args.sigma, args.stiffness)
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    write_csv(args.out, ["force_N", "zncc"], [[f, f"{c:.6f}"] for f, c in curve])
    print(f"wrote {len(curve)} rows to {args.out}")


def cmd_gen_dataset(args):
    overrides = dict(args.task_spec or {})
    if args.train_per_class is not None:
        overrides["train_per_class"] = args.train_per_class
    if args.test_per_class is not None:
        overrides["test_per_class"] = args.test_per_class
    unknown = sorted(set(overrides) - set(TaskSpec.__dataclass_fields__) - {"kind"})
    if unknown:
        raise UsageError(f"unknown task key: {unknown[0]}")
    task = TaskSpec.default(args.task, **overrides)
    scene = _resolve_scene(args.scene, "gripper" if args.task == "texture9" else "flat")
    threads = 1 if args.deterministic else args.threads
    last = [0]

    def progress(done, total):
        if done * 10 // total != last[0]:
            last[0] = done * 10 // total
            print(f"rendered {done}/{total}", file=sys.stderr)

    manifest = gen_dataset(task, scene, args.out, args.seed, keep_raw=args.keep_raw, threads=threads,
                           progress=progress)
    print(f"wrote {len(manifest['samples'])} samples to {args.out}; manifest sha256 {manifest_hash(manifest)}")


def _hyperparams(args, task):
    """--hp file, else the task's default recipe; --epochs overrides either."""
    hp = Hyperparams.from_file(args.hp) if args.hp else default_hyperparams(task)
    if args.epochs is not None:
        hp = Hyperparams.from_dict({**hp.to_dict(), "epochs": args.epochs})
    return hp


def _eval_metrics(model, root):
    try:
        test = load_dataset(root, "test")
    except SpeckletactError:
        return None
    return evaluate(model, test)


def cmd_train(args):
    ds = load_dataset(args.dataset, "train")
    hp = _hyperparams(args, ds.task)
    if args.task != "auto" and args.task != ds.task:
        raise UsageError(f"--task {args.task} does not match the dataset's task {ds.task}")
    model = model_for(ds, hp.init_seed)
    report = train(model, ds, hp, deterministic=args.deterministic,
                   log=lambda line: print(line, file=sys.stderr))
    report["dataset_manifest_sha256"] = manifest_hash(ds.manifest)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    extra = {"task": ds.task, "label_names": ds.label_names}
    save_checkpoint(model, out / "model.ckpt", epoch=hp.epochs, extra=extra)
    write_json(out / "report.json", report)
    metrics = _eval_metrics(model, args.dataset)
    if metrics is not None:
        write_eval_outputs(out, metrics)
        _print_metrics(metrics)
    print(f"checkpoint written to {out / 'model.ckpt'}")


def _print_metrics(metrics):
    if metrics["kind"] == "classification":
        print(f"accuracy {metrics['accuracy']:.4f}")
    else:
        r2 = "undefined" if metrics["r2"] is None else f"{metrics['r2']:.4f}"
        print(f"MAE {metrics['mae']:.4f} N, RMSE {metrics['rmse']:.4f} N, R^2 {r2}")
        for line in format_regression_lines(metrics):
            print(line)


def cmd_eval(args):
    model = load_checkpoint(args.checkpoint)
    ds = load_dataset(args.dataset, "test")
    if (model.task == "regress") != ds.is_regression:
        raise UsageError(f"checkpoint head ({model.task}) does not match the {ds.task} dataset")
    metrics = evaluate(model, ds)
    write_eval_outputs(args.out, metrics)
    _print_metrics(metrics)


def cmd_ablate(args):
    hp = _hyperparams(args, read_manifest(args.dataset)["task"]["kind"])
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    log = lambda line: print(line, file=sys.stderr)  # noqa: E731
    if args.mode == "crops":
        rows = ablation_crop_regions(args.dataset, hp, args.regions.split(","), deterministic=True, log=log)
        write_csv(out / "crop_regions.csv", ["region", "accuracy"], [[r["region"], r["accuracy"]] for r in rows])
        accs = [r["accuracy"] for r in rows]
        print(f"crop regions: spread {100 * (max(accs) - min(accs)):.2f} points")
    else:
        rows = ablation_train_size(args.dataset, hp, args.sizes, deterministic=True, log=log)
        write_csv(out / "train_size.csv", ["train_per_class", "accuracy"],
                  [[r["train_per_class"], r["accuracy"]] for r in rows])
    for r in rows:
        print(",".join(str(v) for v in r.values()))


def cmd_bench(args):
    model = load_checkpoint(args.checkpoint)
    stats = bench_inference(model, args.trials, args.warmup)
    stats["kernel_backend"] = kernels.BACKEND
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    write_json(args.out, stats)
    print(f"mean {stats['mean_ms']:.2f} ms, p50 {stats['p50_ms']:.2f} ms, p95 {stats['p95_ms']:.2f} ms")


def cmd_infer(args):
    model = load_checkpoint(args.checkpoint)
    x = load_frame(args.image)
    if x.shape[2:] != (model.input_size, model.input_size):
        raise FormatError(f"{args.image}: frame is {x.shape[2]}x{x.shape[3]}, "
                          f"model expects {model.input_size}x{model.input_size}")
    out = model.predict(x)
    if model.task == "regress":
        print(f"force {float(out[0, 0]):.4f} N")
        return
    logits = out[0].astype(np.float64)
    p = np.exp(logits - logits.max())
    p /= p.sum()
    k = int(np.argmax(p))
    names = getattr(model, "extra", {}).get("label_names") or [str(i) for i in range(model.num_classes)]
    print(f"class {names[k]} confidence {p[k]:.4f}")


# --- parser ------------------------------------------------------------------

def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--threads", type=int, default=os.cpu_count() or 1,
                        help="worker count for generation and evaluation (default: all cores)")
    common.add_argument("--deterministic", action="store_true",
                        help="single-threaded, bit-reproducible execution")
    common.add_argument("--config", help="JSON object of option values; command-line flags win")

    parser = argparse.ArgumentParser(prog="speckletact",
                                     description="Speckle tactile sensor simulator and CNN decoder.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")

    def add(name, func, help_):
        p = sub.add_parser(name, parents=[common], help=help_, description=help_)
        p.set_defaults(func=func)
        return p

    scene_help = f"preset ({', '.join(PRESETS)}) or scene JSON file"
    p = add("simulate", cmd_simulate, "render one frame (raw PGM, region-A crop PGM and SPKL)")
    p.add_argument("--scene", default="flat", help=scene_help)
    p.add_argument("--force", type=float, default=0.0, help="normal force in N")
    p.add_argument("--pos", type=_pair, help="contact point X,Y in mm (default: face centre)")
    p.add_argument("--texture", choices=TEXTURE_CLASSES, help="texture class pressed into the pad")
    p.add_argument("--sigma", type=float, default=1.5, help="indentation kernel width in mm")
    p.add_argument("--stiffness", type=float, default=5000.0, help="effective stiffness in N/mm")
    p.add_argument("--seed", type=int, default=0, help="camera noise seed")
    p.add_argument("--no-noise", action="store_true", help="disable read noise")
    p.add_argument("--out", required=True, help="output PGM path")

    p = add("sweep", cmd_sweep, "ZNCC decorrelation curve over a force sweep")
    p.add_argument("--scene", default="flat", help=scene_help)
    p.add_argument("--forces", type=_force_range, default=_force_range("0:1:0.1"), help="start:stop:step in N")
    p.add_argument("--pos", type=_pair, help="contact point X,Y in mm (default: face centre)")
    p.add_argument("--sigma", type=float, default=1.5, help="indentation kernel width in mm")
    p.add_argument("--stiffness", type=float, default=5000.0, help="effective stiffness in N/mm")
    p.add_argument("--out", required=True, help="output CSV path")

    p = add("gen-dataset", cmd_gen_dataset, "render a labeled dataset")
    p.add_argument("--task", required=True, choices=("position4", "force", "texture9"))
    p.add_argument("--scene", help=f"{scene_help} (default: flat; gripper for texture9)")
    p.add_argument("--seed", type=int, default=0, help="master seed")
    p.add_argument("--out", required=True, help="dataset directory")
    p.add_argument("--keep-raw", action="store_true", help="also store full raw frames (needed for crop ablation)")
    p.add_argument("--train-per-class", type=int, help="override training samples per class")
    p.add_argument("--test-per-class", type=int, help="override test samples per class")
    p.set_defaults(task_spec=None)

    p = add("train", cmd_train, "train a decoder; writes model.ckpt, report.json and test metrics")
    p.add_argument("--dataset", required=True, help="dataset directory")
    p.add_argument("--task", default="auto", choices=("auto", "position4", "force", "texture9"))
    p.add_argument("--hp", help="hyperparameter JSON file (default: the task's recipe)")
    p.add_argument("--epochs", type=int, help="override the epoch count")
    p.add_argument("--out", required=True, help="output directory")

    p = add("eval", cmd_eval, "evaluate a checkpoint on the dataset's test split")
    p.add_argument("--dataset", required=True, help="dataset directory")
    p.add_argument("--checkpoint", required=True, help="checkpoint file")
    p.add_argument("--out", required=True, help="report directory")

    p = add("ablate", cmd_ablate, "crop-region or training-size ablation")
    p.add_argument("--mode", required=True, choices=("crops", "train-size"))
    p.add_argument("--dataset", required=True, help="dataset directory (crops needs --keep-raw)")
    p.add_argument("--hp", help="hyperparameter JSON file (default: the task's recipe)")
    p.add_argument("--epochs", type=int, help="override the epoch count")
    p.add_argument("--regions", default=",".join(CROP_REGIONS), help="comma-separated crop regions")
    p.add_argument("--sizes", type=_int_list, default=[50, 100, 150, 200], help="comma-separated per-class sizes")
    p.add_argument("--out", required=True, help="output directory for CSV tables")

    p = add("bench", cmd_bench, "single-thread inference latency")
    p.add_argument("--checkpoint", required=True, help="checkpoint file")
    p.add_argument("--trials", type=int, default=100, help="timed trials (>= 30)")
    p.add_argument("--warmup", type=int, default=5, help="untimed warmup runs")
    p.add_argument("--out", required=True, help="output JSON path")

    p = add("infer", cmd_infer, "classify one SPKL frame or estimate its force")
    p.add_argument("--checkpoint", required=True, help="checkpoint file")
    p.add_argument("--image", required=True, help="128x128 SPKL frame")
    return parser


def _invocation_dir(args):
    if args.command == "infer":
        return Path(args.image).parent
    if args.command in ("simulate", "sweep", "bench"):
        return _out_dir_of(args.out)
    return Path(args.out)


def main(argv=None):
    argv = sys.argv[1:] if argv is None else list(argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return exc.code if isinstance(exc.code, int) else EXIT_USAGE
    try:
        sub = parser._subparsers._group_actions[0].choices[args.command]
        _apply_config(args, sub, _load_config(args.config))
        if args.threads < 1:
            raise UsageError("--threads must be >= 1")
        if args.deterministic:
            args.threads = 1
        _write_invocation(_invocation_dir(args), args, argv)
        with threadpool_limits(limits=args.threads):
            args.func(args)
    except SpeckletactError as exc:
        print(f"speckletact: error[{exc.code}]: {exc}", file=sys.stderr)
        return exc.exit_code
    except FileNotFoundError as exc:
        print(f"speckletact: error[missing-file]: {exc}", file=sys.stderr)
        return EXIT_DATA
    except OSError as exc:
        print(f"speckletact: error[io-error]: {exc}", file=sys.stderr)
        return EXIT_DATA
    except FloatingPointError as exc:
        print(f"speckletact: error[numeric-failure]: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
