"""Command-line surface: compile, infer, stats, verify, bench, init-random.

Exit codes: 0 success, 1 usage error, 2 input error, 3 verification
failure.  Everything is deterministic given flags and inputs except bench
timings.
"""

from __future__ import annotations

import argparse
import json
import sys
import time
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from .compiler import (
    compile_checkpoint,
    gen_random_checkpoint,
    load,
    load_manifest,
    save_manifest,
    serialize,
)
from .errors import ErnError, FormatError, VerificationError
from .graph import arch_config, execute, model_stats
from .oracle import cross_check, oracle_from_manifest
from .ppm import read_ppm

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_INPUT = 2
EXIT_VERIFY = 3


class _UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    # argparse exits with 2 on bad flags; usage errors are 1 here
    def error(self, message):
        self.print_usage(sys.stderr)
        raise _UsageError(message)


def _softmax(logits: np.ndarray) -> np.ndarray:
    e = np.exp(logits - np.max(logits))
    return e / e.sum()


def _load_model(path: str):
    return load(Path(path).read_bytes())


def _read_image(args) -> np.ndarray:
    if args.raw:
        try:
            c, h, w = (int(v) for v in args.raw.split(","))
        except ValueError:
            raise _UsageError(f"--raw expects C,H,W integers, got '{args.raw}'") from None
        data = np.fromfile(args.image, dtype=np.uint8)
        if data.size != c * h * w:
            raise FormatError(
                f"raw file holds {data.size} bytes, --raw {args.raw} needs {c * h * w}"
            )
        return data.reshape(c, h, w)
    return read_ppm(args.image)


def _ten_crops(img: np.ndarray, size: int) -> list[np.ndarray]:
    _, h, w = img.shape
    if size > h or size > w:
        raise _UsageError(f"--crop-size {size} exceeds image {h}x{w}")
    tops = [0, 0, h - size, h - size, (h - size) // 2]
    lefts = [0, w - size, 0, w - size, (w - size) // 2]
    crops = [img[:, t : t + size, l : l + size] for t, l in zip(tops, lefts)]
    return crops + [c[:, :, ::-1] for c in crops]


def cmd_compile(args) -> int:
    manifest = load_manifest(args.manifest)
    model = compile_checkpoint(manifest, shared_const=args.shared_const)
    data = serialize(model)
    Path(args.out).write_bytes(data)
    print(f"{args.out}: {model.arch} k={model.k} c={model.shared_const} ({len(data)} bytes)")
    return EXIT_OK


def cmd_infer(args) -> int:
    model = _load_model(args.model)
    img = _read_image(args)
    if args.ten_crop:
        if args.crop_size is None:
            raise _UsageError("--ten-crop requires --crop-size")
        crops = _ten_crops(img, args.crop_size)
        logits = np.mean([execute(model, c, kernel=args.kernel).logits for c in crops], axis=0)
    else:
        logits = execute(model, img, kernel=args.kernel).logits
    probs = _softmax(logits)
    order = np.argsort(probs)[::-1][: args.top]
    for idx in order:
        print(f"{int(idx)}\t{probs[idx]:.6f}")
    return EXIT_OK


def cmd_stats(args) -> int:
    cfg = arch_config(args.arch)
    stats = model_stats(cfg, args.resolution)
    if args.json:
        doc = {"arch": args.arch, "resolution": args.resolution, **stats.as_dict()}
        print(json.dumps(doc, indent=2))
    else:
        print(f"{args.arch} @ {args.resolution}x{args.resolution}")
        print(f"  parameters:         {stats.param_count:,}")
        print(f"  weights-only bytes: {stats.binary_weight_bytes:,}")
        print(f"  padded bytes:       {stats.padded_weight_bytes:,}")
        print(f"  MACs:               {stats.macs:,}")
        print(f"  activations:        {stats.activations:,}")
    return EXIT_OK


def cmd_verify(args) -> int:
    model = _load_model(args.model)
    manifest = load_manifest(args.manifest)
    om = oracle_from_manifest(manifest, shared_const=model.shared_const)
    rng = np.random.default_rng(args.seed)
    r = args.resolution
    images = [rng.integers(0, 256, size=(3, r, r), dtype=np.uint8) for _ in range(args.images)]
    report = cross_check(model, om, images, kernel=args.kernel)
    print(report.to_json() if args.json else report.summary())
    return EXIT_OK if report.ok else EXIT_VERIFY


def cmd_bench(args) -> int:
    model = _load_model(args.model)
    rng = np.random.default_rng(args.seed)
    r = args.resolution
    img = rng.integers(0, 256, size=(3, r, r), dtype=np.uint8)
    kernels = [args.kernel] if args.kernel else ["popcount", "naive"]
    logits_by_kernel = {}
    for kern in kernels:
        times = []
        for _ in range(args.iters):
            if args.threads > 1:
                t0 = time.perf_counter()
                with ThreadPoolExecutor(max_workers=args.threads) as pool:
                    outs = list(
                        pool.map(lambda _: execute(model, img, kernel=kern).logits,
                                 range(args.threads))
                    )
                times.append((time.perf_counter() - t0) / args.threads)
                logits_by_kernel[kern] = outs[0]
            else:
                t0 = time.perf_counter()
                out = execute(model, img, kernel=kern).logits
                times.append(time.perf_counter() - t0)
                logits_by_kernel[kern] = out
        print(
            f"{kern:9s} mean {np.mean(times) * 1e3:9.2f} ms   min {np.min(times) * 1e3:9.2f} ms"
            f"   ({args.iters} iters, {args.threads} thread(s), {r}x{r})"
        )
    if len(logits_by_kernel) == 2:
        a, b = logits_by_kernel["popcount"], logits_by_kernel["naive"]
        if not np.array_equal(a, b):
            raise VerificationError("popcount and naive kernels disagree on logits")
        print("kernel paths agree: identical logits")
    return EXIT_OK


def cmd_init_random(args) -> int:
    manifest = gen_random_checkpoint(
        args.arch, args.seed, k=args.k, shared_const=args.shared_const
    )
    save_manifest(manifest, args.out)
    n = len(manifest.convs) + len(manifest.bnacts)
    print(f"{args.out}: {args.arch} seed={args.seed} ({n} layers)")
    return EXIT_OK


def _build_parser() -> _Parser:
    p = _Parser(prog="ern", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    c = sub.add_parser("compile", help="fold a float checkpoint into an .ern model")
    c.add_argument("--manifest", required=True)
    c.add_argument("--out", required=True)
    c.add_argument("--shared-const", type=float, default=None,
                   help="residual-branch constant c (default: manifest value, else 1.0)")
    c.set_defaults(fn=cmd_compile)

    i = sub.add_parser("infer", help="classify one image")
    i.add_argument("--model", required=True)
    i.add_argument("--image", required=True)
    i.add_argument("--top", type=int, default=5)
    i.add_argument("--ten-crop", action="store_true")
    i.add_argument("--crop-size", type=int, default=None)
    i.add_argument("--raw", default=None, metavar="C,H,W",
                   help="treat --image as raw uint8 tensor bytes of this shape")
    i.add_argument("--kernel", choices=["popcount", "naive"], default="popcount")
    i.set_defaults(fn=cmd_infer)

    s = sub.add_parser("stats", help="parameter/MAC/size arithmetic for an architecture")
    s.add_argument("--arch", required=True)
    s.add_argument("--resolution", type=int, default=256)
    s.add_argument("--json", action="store_true")
    s.set_defaults(fn=cmd_stats)

    v = sub.add_parser("verify", help="cross-check a model against its float oracle")
    v.add_argument("--model", required=True)
    v.add_argument("--manifest", required=True)
    v.add_argument("--images", type=int, default=10)
    v.add_argument("--seed", type=int, default=0)
    v.add_argument("--resolution", type=int, default=64)
    v.add_argument("--kernel", choices=["popcount", "naive"], default="popcount")
    v.add_argument("--json", action="store_true")
    v.set_defaults(fn=cmd_verify)

    b = sub.add_parser("bench", help="time the kernel paths")
    b.add_argument("--model", required=True)
    b.add_argument("--iters", type=int, default=3)
    b.add_argument("--threads", type=int, default=1)
    b.add_argument("--kernel", choices=["popcount", "naive"], default=None)
    b.add_argument("--resolution", type=int, default=256)
    b.add_argument("--seed", type=int, default=0)
    b.set_defaults(fn=cmd_bench)

    r = sub.add_parser("init-random", help="write a seeded random checkpoint manifest")
    r.add_argument("--arch", required=True)
    r.add_argument("--seed", type=int, required=True)
    r.add_argument("--out", required=True)
    r.add_argument("--k", type=int, default=10)
    r.add_argument("--shared-const", type=float, default=1.0)
    r.set_defaults(fn=cmd_init_random)
    return p


def main(argv=None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
        return args.fn(args)
    except _UsageError as e:
        print(f"ern: error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except VerificationError as e:
        print(f"ern: verification failed: {e}", file=sys.stderr)
        return EXIT_VERIFY
    except ErnError as e:
        print(f"ern: {e}", file=sys.stderr)
        return EXIT_INPUT
    except OSError as e:
        print(f"ern: {e}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
