"""Command-line entry points.

Subcommands: ``train``, ``ablate``, ``infer``, ``gradcheck``,
``export-attention``, ``bench``.  Every subcommand shares the same
run-level flags (``--config``, ``--out``, ``--seed``, repeatable
``--set section.key=value`` overrides, ``--force``) collected into a
:class:`RunSpec`.

Exit codes: 0 success, 1 configuration/usage error, 2 I/O or file-format
error, 3 numerical failure (non-finite loss, gradient check over
tolerance).  Every failure prints a single ``error: ...`` diagnostic line
to stderr.

Determinism contract: with a fixed ``--seed``, every file artifact a
subcommand writes is byte-identical across runs on one platform.
Wall-clock readings appear only on stdout (and in the benchmark timing
columns, which are explicitly informational).
"""

import argparse
import dataclasses
import os
import sys
import time
from dataclasses import dataclass, field

import numpy as np

from . import kernels
from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .config import (ConfigError, config_to_text, resolve_config)
from .data import (ClipFormatError, load_clip, load_frames_dir,
                   load_manifest_clips, make_dataset, save_gray_pgm,
                   save_heatmap_ppm)
from .flops import count_flops
from .model import (AttentionSink, ModelConfig, build_model,
                    export_attention_maps)
from .tensor import ShapeError, no_grad
from .train import (NumericalError, clips_to_batch, evaluate,
                    grad_check_model, train_loop)

EXIT_OK = 0
EXIT_CONFIG = 1
EXIT_IO = 2
EXIT_NUMERIC = 3

# Seed streams: one master seed fans out to independent generators so
# that, e.g., drawing more training clips never shifts the test set.
_TRAIN_DATA_STREAM = 11
_TEST_DATA_STREAM = 12

# Default model for `gradcheck`: small enough that the finite-difference
# sweep over every parameter group finishes in seconds, yet it still
# exercises both stem blocks, patching, position embedding, attention,
# and the head.  Geometry for the random probe batch is fixed to match.
GRADCHECK_MODEL = ModelConfig(stem_channels=(16, 128), cnn_blocks=2,
                              patch=(1, 2, 2), embed_dim=16, depth=1,
                              heads=2)
GRADCHECK_GEOMETRY = (2, 3, 2, 16, 16)  # batch, channels, T, H, W

TIMINGS_CSV_HEADER = "kernel,backend,milliseconds"
ABLATION_CSV_HEADER = "variant,cnn_blocks,params,macs,test_accuracy"


@dataclass(frozen=True)
class RunSpec:
    """Everything a subcommand run needs, parsed from the command line."""
    command: str
    config_path: str = ""
    out_dir: str = ""
    seed: int = -1          # -1: fall back to the config's train.seed
    overrides: tuple = ()
    force: bool = False
    options: dict = field(default_factory=dict)


class _Parser(argparse.ArgumentParser):
    """argparse that reports usage problems through ConfigError so they
    exit with the documented config-error code."""

    def error(self, message):
        raise ConfigError(message)


def build_parser():
    parser = _Parser(prog="cvvt",
                     description="video classifier: train, evaluate, and "
                                 "inspect")
    common = _Parser(add_help=False)
    common.add_argument("--config", default="", metavar="PATH",
                        help="flat key=value config file")
    common.add_argument("--out", default="", metavar="DIR",
                        help="output directory for artifacts")
    common.add_argument("--seed", type=int, default=-1, metavar="N",
                        help="master seed (default: config train.seed)")
    common.add_argument("--set", action="append", default=[],
                        metavar="KEY=VALUE", dest="overrides",
                        help="override one config entry (repeatable)")
    common.add_argument("--force", action="store_true",
                        help="allow writing into a non-empty directory")
    sub = parser.add_subparsers(dest="command", required=True)

    sub.add_parser("train", parents=[common],
                   help="train a model and write checkpoint + metrics")
    sub.add_parser("ablate", parents=[common],
                   help="run the 2x2 variant/depth ablation grid")

    p = sub.add_parser("infer", parents=[common],
                       help="classify clips with a saved checkpoint")
    p.add_argument("--checkpoint", required=True, metavar="PATH")
    p.add_argument("clips", nargs="+", metavar="CLIP",
                   help="clip files or frame directories")

    p = sub.add_parser("gradcheck", parents=[common],
                       help="finite-difference gradient check")
    p.add_argument("--eps", type=float, default=1e-3)
    p.add_argument("--tol", type=float, default=1e-2)

    p = sub.add_parser("export-attention", parents=[common],
                       help="write attention heatmaps and stem features")
    p.add_argument("--checkpoint", required=True, metavar="PATH")
    p.add_argument("--clip", required=True, metavar="PATH")
    p.add_argument("--layer", type=int, default=0)
    p.add_argument("--head", type=int, default=0)

    sub.add_parser("bench", parents=[common],
                   help="analytic compute report and kernel timings")
    return parser


def _runspec(args):
    extras = {k: v for k, v in vars(args).items()
              if k not in ("command", "config", "out", "seed", "overrides",
                           "force", "handler")}
    return RunSpec(command=args.command, config_path=args.config,
                   out_dir=args.out, seed=args.seed,
                   overrides=tuple(args.overrides), force=args.force,
                   options=extras)


def _resolve(spec, model_defaults=None):
    """Config file + overrides -> RunConfig, with --seed folded into
    train.seed so the echoed config names the effective seed."""
    text = None
    if spec.config_path:
        with open(spec.config_path, "r", encoding="utf-8") as f:
            text = f.read()
    run = resolve_config(file_text=text, overrides=spec.overrides,
                         model_defaults=model_defaults)
    if spec.seed >= 0:
        run = dataclasses.replace(
            run, train=dataclasses.replace(run.train, seed=spec.seed))
    return run


def _prepare_out(spec):
    if not spec.out_dir:
        raise ConfigError(f"--out is required for '{spec.command}'")
    path = os.path.abspath(spec.out_dir)
    os.makedirs(path, exist_ok=True)
    if os.listdir(path) and not spec.force:
        raise OSError(f"output directory {path} is not empty "
                      f"(pass --force to write anyway)")
    return path


def _derive_seed(master, stream):
    return int(np.random.SeedSequence(
        [int(master), int(stream)]).generate_state(1)[0])


def _format_metric(value):
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _metric_line(record):
    return " ".join(f"{k}={_format_metric(v)}" for k, v in record.items())


def _load_split(data_config, manifest, count, master, stream):
    if manifest:
        return load_manifest_clips(manifest)
    if count == 0:
        return []
    return make_dataset(data_config.task_spec(), count,
                        _derive_seed(master, stream))


def _count_params(net):
    return int(sum(p.data.size for p in net.parameters()))


def _write_text(path, text):
    with open(path, "w", encoding="utf-8") as f:
        f.write(text)


def _eval_report_text(result):
    lines = [f"final_accuracy={result.accuracy!r}",
             f"clips={result.count}"]
    for i, row in enumerate(result.confusion):
        lines.append(f"confusion_row_{i}=" + ",".join(
            str(int(v)) for v in row))
    return "\n".join(lines) + "\n"


def _train_one(run, master, out_dir, log_name="metrics.log"):
    """Shared train-and-evaluate core for `train` and each ablation cell.

    Writes metrics.log (deterministic), eval.txt, and model.cvvtw into
    ``out_dir``; returns (net, final EvalResult).
    """
    train_clips = _load_split(run.data, run.data.train_manifest,
                              run.data.train_clips, master,
                              _TRAIN_DATA_STREAM)
    test_clips = _load_split(run.data, run.data.test_manifest,
                             run.data.test_clips, master,
                             _TEST_DATA_STREAM)
    net = build_model(run.model, seed=master)
    started = time.perf_counter()
    log_path = os.path.join(out_dir, log_name)
    with open(log_path, "w", encoding="utf-8") as log:
        def emit(record):
            line = _metric_line(record)
            log.write(line + "\n")
            log.flush()
            elapsed = time.perf_counter() - started
            print(f"{line} elapsed_s={elapsed:.1f}")

        train_config = dataclasses.replace(run.train, seed=master)
        train_loop(net, train_clips, test_clips, train_config, emit=emit)
    result = evaluate(net, test_clips if test_clips else train_clips)
    _write_text(os.path.join(out_dir, "eval.txt"),
                _eval_report_text(result))
    save_checkpoint(os.path.join(out_dir, "model.cvvtw"), net)
    return net, result


def cmd_train(spec):
    run = _resolve(spec)
    master = run.train.seed
    out_dir = _prepare_out(spec)
    _write_text(os.path.join(out_dir, "config.txt"), config_to_text(run))
    _, result = _train_one(run, master, out_dir)
    print(f"final_accuracy={result.accuracy!r}")
    return EXIT_OK


_ABLATION_CELLS = (("factorized_self", 2), ("factorized_self", 1),
                   ("factorized_dot_product", 2),
                   ("factorized_dot_product", 1))


def _ablation_table(rows):
    header = f"{'variant':<24} {'blocks':>6} {'params':>10} " \
             f"{'macs':>14} {'test_accuracy':>13}"
    lines = [header]
    for r in rows:
        acc = "failed" if r["accuracy"] is None else f"{r['accuracy']:.4f}"
        lines.append(f"{r['variant']:<24} {r['blocks']:>6} "
                     f"{r['params']:>10} {r['macs']:>14} {acc:>13}")
    scored = [r for r in rows if r["accuracy"] is not None]
    if scored:
        best = max(scored, key=lambda r: r["accuracy"])
        lines.append("")
        lines.append(f"winner: {best['variant']} blocks={best['blocks']}")
        if not (best["variant"] == "factorized_self"
                and best["blocks"] == 2):
            lines.append("warning: expected the 2-block factorized_self "
                         "cell to rank first, but it did not")
    if len(scored) < len(rows):
        lines.append(f"warning: {len(rows) - len(scored)} of {len(rows)} "
                     f"cells failed; table is partial")
    return "\n".join(lines) + "\n"


def _ablation_csv(rows):
    lines = [ABLATION_CSV_HEADER]
    for r in rows:
        acc = "" if r["accuracy"] is None else repr(r["accuracy"])
        lines.append(f"{r['variant']},{r['blocks']},{r['params']},"
                     f"{r['macs']},{acc}")
    return "\n".join(lines) + "\n"


def cmd_ablate(spec):
    run = _resolve(spec)
    master = run.train.seed
    out_dir = _prepare_out(spec)
    _write_text(os.path.join(out_dir, "config.txt"), config_to_text(run))
    rows = []
    worst = EXIT_OK
    for variant, blocks in _ABLATION_CELLS:
        cell_model = dataclasses.replace(run.model, variant=variant,
                                         cnn_blocks=blocks)
        cell_run = dataclasses.replace(run, model=cell_model)
        cell_dir = os.path.join(out_dir, f"{variant}_{blocks}block")
        os.makedirs(cell_dir, exist_ok=True)
        report = count_flops(cell_model, run.data.frames, run.data.height,
                             run.data.width)
        row = {"variant": variant, "blocks": blocks, "macs":
               report.factorized_total, "params": None, "accuracy": None}
        rows.append(row)
        print(f"--- cell {variant} blocks={blocks}")
        try:
            net, result = _train_one(cell_run, master, cell_dir)
            row["params"] = _count_params(net)
            row["accuracy"] = float(result.accuracy)
        except NumericalError as exc:
            row["params"] = _count_params(build_model(cell_model,
                                                      seed=master))
            print(f"error: cell {variant} blocks={blocks} failed: {exc}",
                  file=sys.stderr)
            worst = max(worst, EXIT_NUMERIC)
        # partial results stay on disk; the summary below flags the gap
        _write_text(os.path.join(out_dir, "ablation.csv"),
                    _ablation_csv(rows))
        _write_text(os.path.join(out_dir, "ablation.txt"),
                    _ablation_table(rows))
    print(_ablation_table(rows), end="")
    return worst


def _load_clip_any(path):
    if os.path.isdir(path):
        return load_frames_dir(path)
    return load_clip(path)


def _softmax_probs(logits_row):
    z = logits_row.astype(np.float64)
    z = z - z.max()
    e = np.exp(z)
    return e / e.sum()


def cmd_infer(spec):
    net = load_checkpoint(spec.options["checkpoint"])
    net.eval()
    lines = []
    for path in spec.options["clips"]:
        clip = _load_clip_any(path)
        x, _ = clips_to_batch([clip])
        with no_grad():
            logits = net(x).data[0]
        probs = _softmax_probs(logits)
        predicted = int(np.argmax(probs))
        text = f"{path} predicted={predicted} probs=" + ",".join(
            f"{p:.6f}" for p in probs)
        if clip.label >= 0:
            text += f" label={clip.label}"
        print(text)
        lines.append(text)
    if spec.out_dir:
        out_dir = _prepare_out(spec)
        _write_text(os.path.join(out_dir, "predictions.txt"),
                    "\n".join(lines) + "\n")
    return EXIT_OK


def cmd_gradcheck(spec):
    run = _resolve(spec, model_defaults=GRADCHECK_MODEL)
    master = run.train.seed
    eps = spec.options["eps"]
    tol = spec.options["tol"]
    rng = np.random.default_rng(np.random.SeedSequence([master, 5]))
    x = rng.standard_normal(GRADCHECK_GEOMETRY).astype(np.float32)
    labels = rng.integers(0, run.model.num_classes,
                          size=GRADCHECK_GEOMETRY[0])
    texts = []
    all_ok = True
    for variant in ("factorized_self", "factorized_dot_product"):
        config = dataclasses.replace(run.model, variant=variant)
        net = build_model(config, seed=master)
        report = grad_check_model(net, x, labels, eps=eps, tol=tol,
                                  seed=master)
        text = f"variant={variant}\n{report.to_text()}"
        print(text)
        texts.append(text)
        all_ok = all_ok and report.ok
    if spec.out_dir:
        out_dir = _prepare_out(spec)
        _write_text(os.path.join(out_dir, "gradcheck.txt"),
                    "\n\n".join(texts) + "\n")
    if not all_ok:
        raise NumericalError("gradient check exceeded tolerance "
                             f"{tol!r}; see report above")
    return EXIT_OK


def _upsample_nearest(values, out_h, out_w):
    h, w = values.shape
    if out_h % h or out_w % w:
        raise ShapeError(f"cannot upsample {values.shape} to "
                         f"({out_h}, {out_w}) by integer replication")
    return np.repeat(np.repeat(values, out_h // h, axis=0),
                     out_w // w, axis=1)


def _normalized_gray(plane):
    lo, hi = float(plane.min()), float(plane.max())
    if hi - lo <= 1e-12:
        return np.zeros_like(plane, dtype=np.float64)
    return (plane.astype(np.float64) - lo) / (hi - lo)


def cmd_export_attention(spec):
    out_dir = _prepare_out(spec)
    net = load_checkpoint(spec.options["checkpoint"])
    net.eval()
    clip = _load_clip_any(spec.options["clip"])
    x, _ = clips_to_batch([clip])
    _, _, t_in, h_in, w_in = x.shape
    t_tokens, h_tokens, w_tokens = net.config.token_extents(
        t_in, h_in, w_in)
    sink = AttentionSink()
    with no_grad():
        net(x, sink=sink)
    maps = export_attention_maps(sink, h_tokens, w_tokens,
                                 layer=spec.options["layer"],
                                 head=spec.options["head"])
    for m in maps:
        values = _upsample_nearest(m.values, h_in, w_in)
        save_heatmap_ppm(values, os.path.join(
            out_dir, f"attention_frame_{m.frame:03d}.ppm"))
    # stem features: channel-mean of each block's output, one PGM per
    # frame per block at the block's native resolution
    with no_grad():
        volume = x
        for i, block in enumerate(net.stem.blocks, start=1):
            volume = block(volume)
            feat = volume.data[0].mean(axis=0)  # (T, H', W')
            for f in range(feat.shape[0]):
                save_gray_pgm(_normalized_gray(feat[f]), os.path.join(
                    out_dir, f"stem_block{i}_frame_{f:03d}.pgm"))
    print(f"wrote {len(maps)} attention heatmaps and "
          f"{len(net.stem.blocks) * t_in} stem feature maps to {out_dir}")
    return EXIT_OK


def _bench_conv_cases(run):
    """Representative convolution shapes drawn from the configured model."""
    model, data = run.model, run.data
    t, h, w = data.frames, data.height, data.width
    cases = []
    plan = (model.in_channels,) + model.stem_channels[:model.cnn_blocks]
    for i in range(model.cnn_blocks):
        c_in, c_out = plan[i], plan[i + 1]
        mid = c_out // 4
        cases.append((f"block{i + 1}_depthwise3",
                      (1, c_in, t, h, w), (c_in, 1, 3, 3, 3),
                      (1, 1, 1), (1, 1, 1), c_in))
        cases.append((f"block{i + 1}_conv5_stride2",
                      (1, mid, t, h, w), (mid, mid, 5, 5, 5),
                      (1, 2, 2), (2, 2, 2), 1))
        h, w = h // 2, w // 2
    pt, ph, pw = model.patch
    cases.append(("patch_embed",
                  (1, plan[-1], t, h, w),
                  (model.embed_dim, plan[-1], pt, ph, pw),
                  (pt, ph, pw), (0, 0, 0), 1))
    return cases


def _time_forward(x, w, stride, padding, groups, repeats=3):
    kernels.conv3d_forward(x, w, stride, padding, groups)  # warm-up
    best = float("inf")
    for _ in range(repeats):
        t0 = time.perf_counter()
        kernels.conv3d_forward(x, w, stride, padding, groups)
        best = min(best, time.perf_counter() - t0)
    return best * 1e3


def cmd_bench(spec):
    run = _resolve(spec)
    out_dir = _prepare_out(spec)
    _write_text(os.path.join(out_dir, "config.txt"), config_to_text(run))
    report = count_flops(run.model, run.data.frames, run.data.height,
                         run.data.width)
    _write_text(os.path.join(out_dir, "flops.csv"), report.to_csv())
    _write_text(os.path.join(out_dir, "flops.txt"), report.to_text())
    print(report.to_text())

    rng = np.random.default_rng(np.random.SeedSequence([run.train.seed, 7]))
    rows = [TIMINGS_CSV_HEADER]
    previous = kernels.active_backend()
    try:
        for name, x_shape, w_shape, stride, padding, groups \
                in _bench_conv_cases(run):
            x = rng.standard_normal(x_shape).astype(np.float32)
            w = rng.standard_normal(w_shape).astype(np.float32)
            for backend in kernels.available_backends():
                kernels.set_backend(backend)
                ms = _time_forward(x, w, stride, padding, groups)
                rows.append(f"{name},{backend},{ms:.3f}")
                print(rows[-1])
    finally:
        kernels.set_backend(previous)
    _write_text(os.path.join(out_dir, "kernel_timings.csv"),
                "\n".join(rows) + "\n")
    print(f"wrote flops.csv, flops.txt, kernel_timings.csv to {out_dir}")
    return EXIT_OK


_HANDLERS = {"train": cmd_train, "ablate": cmd_ablate, "infer": cmd_infer,
             "gradcheck": cmd_gradcheck,
             "export-attention": cmd_export_attention, "bench": cmd_bench}


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        spec = _runspec(args)
        return _HANDLERS[spec.command](spec)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except NumericalError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (CheckpointError, ClipFormatError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (ShapeError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
