"""Command line: describe and profile models, train and evaluate on
datasets, benchmark kernels, and emit heatmap analyses as PGM/CSV files.

Exit codes: 0 success, 2 usage or configuration error, 3 data or file
format error, 4 numeric divergence.

Only the standard library is imported at module level; numpy (via the
package modules) loads after ``--threads`` or LSNET_DETERMINISTIC=1 has
been translated into BLAS environment variables.
"""

from __future__ import annotations

import argparse
import os
import shlex
import sys

_THREAD_VARS = (
    "OPENBLAS_NUM_THREADS",
    "OMP_NUM_THREADS",
    "MKL_NUM_THREADS",
    "NUMEXPR_NUM_THREADS",
    "VECLIB_MAXIMUM_THREADS",
)


def _configure_threads(argv) -> None:
    """Pin BLAS pools before numpy import; must run before any lsnet module."""
    threads = None
    if os.environ.get("LSNET_DETERMINISTIC") == "1":
        threads = 1
    for i, arg in enumerate(argv):
        if arg == "--threads" and i + 1 < len(argv):
            threads = argv[i + 1]
        elif arg.startswith("--threads="):
            threads = arg.split("=", 1)[1]
    if threads is not None:
        for var in _THREAD_VARS:
            os.environ[var] = str(threads)


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="lsnet",
        description="LS convolution networks: build, profile, train, analyze.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def model_flags(p):
        p.add_argument("--variant", "--spec", dest="variant", default="micro",
                       help="t, s, b, micro, gradcheck-tiny, or a model text file")
        p.add_argument("--kl", type=int, default=None, help="large kernel size")
        p.add_argument("--ks", type=int, default=None, help="small kernel size")
        p.add_argument("--group-width", type=int, default=None,
                       help="channels per aggregation group")
        p.add_argument("--no-dw", action="store_true", help="ablate block depthwise convs")
        p.add_argument("--no-se", action="store_true", help="ablate squeeze-excitation gates")
        p.add_argument("--no-lkp-dw", action="store_true",
                       help="ablate the large depthwise conv inside weight generation")

    def common_flags(p):
        p.add_argument("--seed", type=int, default=0)
        p.add_argument("--threads", type=int, default=None,
                       help="BLAS thread count (set before numpy loads)")
        p.add_argument("--dtype", choices=("f32", "f64"), default="f32")
        p.add_argument("--out-dir", default=None)

    p = sub.add_parser("describe", help="print spec, parameters, and the MAC table")
    model_flags(p)
    common_flags(p)
    p.add_argument("--res", type=int, default=224, help="input extent for MAC counting")
    p.set_defaults(func=cmd_describe)

    p = sub.add_parser("train", help="train a model and write metrics + weights")
    model_flags(p)
    common_flags(p)
    p.add_argument("--data", default="blobs10")
    p.add_argument("--epochs", type=int, default=20)
    p.add_argument("--warmup-epochs", type=int, default=5)
    p.add_argument("--batch-size", type=int, default=64)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--weight-decay", type=float, default=0.025)
    p.add_argument("--optimizer", choices=("adamw", "sgd"), default="adamw")
    p.add_argument("--bn-mode", choices=("train", "frozen"), default="train")
    p.add_argument("--hflip", action="store_true", help="random horizontal flips")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a weight file on a dataset")
    common_flags(p)
    p.add_argument("--weights", required=True)
    p.add_argument("--data", default="blobs10-test")
    p.add_argument("--batch-size", type=int, default=256)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("bench", help="time kernels or whole-model inference")
    model_flags(p)
    common_flags(p)
    p.add_argument("--op", choices=("ska",), default=None,
                   help="benchmark one kernel instead of a model")
    p.add_argument("--size", default="1,64,64,64", help="N,C,H,W for --op runs")
    p.add_argument("--groups", type=int, default=8, help="aggregation groups for --op ska")
    p.add_argument("--res", type=int, default=32)
    p.add_argument("--batch", type=int, default=8)
    p.add_argument("--repeats", type=int, default=9)
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("dump-agg-weights",
                       help="heatmap of accumulated |aggregation weights| per token")
    model_flags(p)
    common_flags(p)
    p.add_argument("--weights", default=None, help="weight file (default: fresh init)")
    p.add_argument("--data", default="blobs10-test")
    p.add_argument("--index", type=int, default=0, help="image index within the dataset")
    p.add_argument("--stage", type=int, default=3)
    p.add_argument("--layer", type=int, default=0)
    p.set_defaults(func=cmd_dump_agg_weights)

    p = sub.add_parser("erf-map", help="effective receptive field of one activation")
    model_flags(p)
    common_flags(p)
    p.add_argument("--weights", default=None, help="weight file (default: fresh init)")
    p.add_argument("--data", default="blobs10-test")
    p.add_argument("--index", type=int, default=0)
    p.add_argument("--res", type=int, default=None,
                   help="nearest-upsample the image to this extent first")
    p.add_argument("--stage", type=int, default=None, help="probe after this stage (1-4)")
    p.add_argument("--position", default=None, help="y,x inside the feature map")
    p.set_defaults(func=cmd_erf_map)

    return parser


def _resolve_spec(args):
    import dataclasses

    from .model import ModelSpec, variant

    name = args.variant
    if os.path.exists(name):
        with open(name) as fh:
            spec = ModelSpec.from_text(fh.read())
    else:
        spec = variant(name)
    changes = {}
    if args.kl is not None:
        changes["k_large"] = args.kl
    if args.ks is not None:
        changes["k_small"] = args.ks
    if args.group_width is not None:
        changes["group_width"] = args.group_width
    if args.no_dw:
        changes["disable_dw"] = True
    if args.no_se:
        changes["disable_se"] = True
    if args.no_lkp_dw:
        changes["disable_lkp_dw"] = True
    return dataclasses.replace(spec, **changes) if changes else spec


def _resolve_data(arg: str, seed: int):
    """Map a --data value to (train, test) datasets."""
    from .data import make_blobs10, resolve_dataset

    if arg in ("blobs10", "blobs10-train", "blobs10-test"):
        train, test = make_blobs10(seed=seed)
        if arg == "blobs10-train":
            return train, train
        if arg == "blobs10-test":
            return test, test
        return train, test
    return resolve_dataset(arg, seed=seed)


def _headers(spec, seed, argv):
    cmd = "lsnet " + " ".join(shlex.quote(a) for a in argv)
    return [f"model {spec.name} digest {spec.digest()}", f"seed {seed}", f"command {cmd}"]


def _load_store(args):
    from .model import build_model, load_weights

    spec = _resolve_spec(args)
    if getattr(args, "weights", None):
        return load_weights(args.weights)
    return build_model(spec, seed=args.seed, dtype=args.dtype)


def cmd_describe(args, argv) -> int:
    from .model import BUDGETS, build_model, count_macs, count_params

    spec = _resolve_spec(args)
    store = build_model(spec, seed=args.seed, dtype=args.dtype)
    params = count_params(store)
    rep = count_macs(spec, args.res, args.res)
    print(spec.to_text(), end="")
    print(f"digest {spec.digest()}")
    print(f"parameters {params:,d}")
    print(rep.table())
    macs = rep.total_macs
    print(f"totals at {args.res}x{args.res}: MACs {macs:,d}  FLOPs(2xMAC) {2 * macs:,d}")
    if spec.name in BUDGETS:
        tp, tm = BUDGETS[spec.name]
        dp = (params - tp) / tp * 100.0
        dm = (macs - tm) / tm * 100.0
        dm2 = (2 * macs - tm) / tm * 100.0
        print(f"target params {tp:,d}: {dp:+.1f}% -> {'PASS' if abs(dp) <= 10 else 'FAIL'}")
        best = dm if abs(dm) <= abs(dm2) else dm2
        conv = "MAC" if abs(dm) <= abs(dm2) else "2xMAC"
        print(f"target FLOPs {tm:,d} ({conv} convention): {best:+.1f}% -> "
              f"{'PASS' if abs(best) <= 10 else 'FAIL'}")
    return 0


def cmd_train(args, argv) -> int:
    from .model import build_model, count_params, save_weights
    from .train import TrainConfig, fit

    spec = _resolve_spec(args)
    store = build_model(spec, seed=args.seed, dtype=args.dtype)
    train_ds, test_ds = _resolve_data(args.data, args.seed)
    cfg = TrainConfig(
        epochs=args.epochs,
        warmup_epochs=min(args.warmup_epochs, args.epochs),
        batch_size=args.batch_size,
        lr=args.lr,
        weight_decay=args.weight_decay,
        optimizer=args.optimizer,
        hflip=args.hflip,
        bn_mode=args.bn_mode,
        seed=args.seed,
    )
    out_dir = args.out_dir or f"runs/{spec.name}-seed{args.seed}"
    print(f"model {spec.name}  parameters {count_params(store):,d}  out {out_dir}")
    summary = fit(store, train_ds, test_ds, cfg, out_dir=out_dir,
                  header_lines=_headers(spec, args.seed, argv), log=print)
    weights_path = os.path.join(out_dir, "weights.lsw")
    save_weights(store, weights_path)
    print(f"final test top1 {summary['final_test_acc']:.4f}  "
          f"wall {summary['wall_seconds']:.1f}s  weights {weights_path}")
    return 0


def cmd_eval(args, argv) -> int:
    from .model import load_weights
    from .train import evaluate

    store = load_weights(args.weights)
    _, test_ds = _resolve_data(args.data, args.seed)
    loss, acc = evaluate(store, test_ds, batch_size=args.batch_size)
    print(f"model {store.spec.name}  n {len(test_ds)}  top1 {acc:.4f}  loss {loss:.4f}")
    return 0


def _median_time(fn, repeats: int, warmup: int = 3) -> float:
    import time

    for _ in range(warmup):
        fn()
    times = []
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    times.sort()
    return times[len(times) // 2]


def cmd_bench(args, argv) -> int:
    import numpy as np

    spec = _resolve_spec(args)
    lines = []
    header = "name,config,repeats,median_s,macs,macs_per_s,imgs_per_s"
    if args.op == "ska":
        from .lsconv import LsConvConfig, ska_forward, ska_forward_naive
        from .tensor import Tensor

        n, c, h, w = (int(v) for v in args.size.split(","))
        cfg = LsConvConfig(channels=c, k_small=args.ks or 3, groups=args.groups)
        rng = np.random.default_rng(args.seed)
        x = Tensor(rng.normal(size=(n, c, h, w)).astype(np.float32))
        wmap = Tensor(rng.normal(size=(n, cfg.weight_width, h, w)).astype(np.float32))
        macs = n * h * w * c * cfg.k_small**2
        t_opt = _median_time(lambda: ska_forward(x, wmap, cfg), args.repeats)
        t_naive = _median_time(lambda: ska_forward_naive(x.data, wmap.data, cfg),
                               args.repeats, warmup=1)
        config = f"{args.size} ks={cfg.k_small} g={cfg.groups}"
        lines.append(f"ska-opt,{config},{args.repeats},{t_opt:.6g},{macs},{macs / t_opt:.6g},")
        lines.append(f"ska-naive,{config},{args.repeats},{t_naive:.6g},{macs},{macs / t_naive:.6g},")
        comment = f"# speedup {t_naive / t_opt:.2f}x"
    else:
        from .model import build_model, count_macs, forward_classify

        store = build_model(spec, seed=args.seed, dtype=args.dtype)
        rng = np.random.default_rng(args.seed)
        x = rng.normal(size=(args.batch, spec.in_channels, args.res, args.res))
        x = x.astype(store.dtype)
        macs = count_macs(spec, args.res, args.res).total_macs * args.batch
        t = _median_time(lambda: forward_classify(store, x), args.repeats)
        config = f"{spec.name} res={args.res} batch={args.batch}"
        lines.append(f"model-infer,{config},{args.repeats},{t:.6g},{macs},"
                     f"{macs / t:.6g},{args.batch / t:.6g}")
        comment = f"# {args.batch / t:.1f} images/s"
    print(header)
    for line in lines:
        print(line)
    print(comment)
    if args.out_dir:
        os.makedirs(args.out_dir, exist_ok=True)
        path = os.path.join(args.out_dir, "bench.csv")
        with open(path, "w") as fh:
            for hline in _headers(spec, args.seed, argv):
                fh.write(f"# {hline}\n")
            fh.write(header + "\n")
            fh.write("\n".join(lines) + "\n")
            fh.write(comment + "\n")
    return 0


def _fetch_image(args, store):
    from .data import normalize_images

    _, ds = _resolve_data(args.data, args.seed)
    if not 0 <= args.index < len(ds):
        from .errors import ConfigurationError

        raise ConfigurationError(f"--index {args.index} outside dataset of {len(ds)}")
    img = ds.images[args.index : args.index + 1]
    return img, normalize_images(img, ds.mean, ds.std, dtype=store.dtype)


def cmd_dump_agg_weights(args, argv) -> int:
    from .analyze import agg_participation, fit_to_extent, write_csv_plane, write_pgm
    from .errors import ConfigurationError
    from .model import forward_features

    store = _load_store(args)
    spec = store.spec
    if not 1 <= args.stage <= 4 or spec.mixers[args.stage - 1] != "ls":
        raise ConfigurationError(f"stage {args.stage} has no LS mixer")
    if not 0 <= args.layer < spec.blocks[args.stage - 1]:
        raise ConfigurationError(
            f"layer {args.layer} out of range for stage {args.stage} "
            f"({spec.blocks[args.stage - 1]} blocks)"
        )
    raw, x = _fetch_image(args, store)
    probe: dict = {}
    forward_features(store, x, mode="infer", upto_stage=args.stage, probe=probe)
    wmap = probe[f"s{args.stage}.b{args.layer}.agg_weights"]
    plane = agg_participation(wmap, spec.ls_config(args.stage - 1))[0]
    full = fit_to_extent(plane, x.shape[2], x.shape[3])
    out_dir = args.out_dir or "."
    os.makedirs(out_dir, exist_ok=True)
    heads = _headers(spec, args.seed, argv) + [
        f"agg-weights stage {args.stage} layer {args.layer} "
        f"feature-map {plane.shape[0]}x{plane.shape[1]}"
    ]
    base = os.path.join(out_dir, f"agg-s{args.stage}b{args.layer}")
    write_pgm(base + ".pgm", full, heads)
    write_csv_plane(base + ".csv", full, heads)
    print(f"wrote {base}.pgm and {base}.csv  ({full.shape[0]}x{full.shape[1]})")
    return 0


def cmd_erf_map(args, argv) -> int:
    from .analyze import model_erf, nearest_upsample, support_count, write_csv_plane, write_pgm
    from .data import normalize_images
    from .errors import ConfigurationError

    store = _load_store(args)
    spec = store.spec
    raw, _ = _fetch_image(args, store)
    if args.res is not None:
        side = raw.shape[2]
        if args.res % side:
            raise ConfigurationError(f"--res {args.res} must be a multiple of image side {side}")
        raw = nearest_upsample(raw, args.res // side)
    _, ds = _resolve_data(args.data, args.seed)
    x = normalize_images(raw, ds.mean, ds.std, dtype=store.dtype)
    position = None
    if args.position is not None:
        try:
            position = tuple(int(v) for v in args.position.split(","))
            assert len(position) == 2
        except (ValueError, AssertionError):
            raise ConfigurationError(f"--position wants y,x, got {args.position!r}") from None
    plane = model_erf(store, x, stage=args.stage, position=position)
    out_dir = args.out_dir or "."
    os.makedirs(out_dir, exist_ok=True)
    stage_tag = args.stage if args.stage is not None else 4
    heads = _headers(spec, args.seed, argv) + [
        f"erf stage {stage_tag} input {x.shape[2]}x{x.shape[3]} "
        f"support {support_count(plane)} pixels above 1% of max"
    ]
    base = os.path.join(out_dir, f"erf-s{stage_tag}")
    write_pgm(base + ".pgm", plane, heads)
    write_csv_plane(base + ".csv", plane, heads)
    print(f"wrote {base}.pgm and {base}.csv  support {support_count(plane)}")
    return 0


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    _configure_threads(argv)
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code) if exc.code else 0
    from .errors import ConfigurationError, DataError, FormatError, NumericError

    try:
        return args.func(args, argv)
    except ConfigurationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (FormatError, DataError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3
    except NumericError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 4


if __name__ == "__main__":
    sys.exit(main())
