"""Command-line entry point: ``cloaknet {gen,convert,infer,verify,bench,attack-sim}``.

Exit codes: 0 ok, 1 verification failure, 2 usage or I/O error.
"""

from __future__ import annotations

import argparse
import json
import re
import sys
import time
from pathlib import Path

import numpy as np

from . import models, snm
from .convert import canonicalize, convert
from .errors import CloakError
from .graph import ModelGraph, run_graph
from .rng import Stream
from .runtime import DEFAULT_BUDGET, infer, round_begin, session_init
from .security import FeasiblePreimage, audit_view, count_equivalent_params, sample_preimages, verify_preimage
from .tensor import ConvFilter
from .transform import ObfuscationParams, expanded_count, gen_conv_secret, transform_conv
from .verify import random_input, sabotage, verify_model

_UNITS = {"": 1, "b": 1, "k": 2**10, "kb": 2**10, "kib": 2**10, "m": 2**20, "mb": 2**20, "mib": 2**20, "g": 2**30, "gb": 2**30, "gib": 2**30}
INJECTIONS = ("stale-unmask", "zero-mask", "lambda", "perm")


class UsageError(Exception):
    pass


def parse_size(text: str) -> int:
    """``"64MiB"`` -> 67108864.  Binary units; a bare number is bytes."""
    m = re.fullmatch(r"\s*(\d+(?:\.\d+)?)\s*([a-zA-Z]*)\s*", text)
    if not m or m.group(2).lower() not in _UNITS:
        raise argparse.ArgumentTypeError(f"bad size {text!r}; use e.g. 65536, 512KiB, 64MiB")
    return int(float(m.group(1)) * _UNITS[m.group(2).lower()])


def parse_injection(text: str) -> tuple:
    kind, sep, layer = text.partition("=")
    if not sep or kind not in INJECTIONS or not layer:
        raise argparse.ArgumentTypeError(f"bad --inject {text!r}; use KIND=LAYER with KIND in {', '.join(INJECTIONS)}")
    return kind, layer


def _params(args, debug: bool = False) -> ObfuscationParams:
    return ObfuscationParams(ratio=args.ratio, seed=args.seed, dyadic=debug)


def _load_graph(path, expect="graph") -> ModelGraph:
    return snm.load(path, expect=expect)


def _input_tensor(args, shape, dtype) -> np.ndarray:
    if args.input is not None:
        x = snm.load(args.input, expect="tensor")
        if tuple(x.shape) != tuple(shape):
            raise UsageError(f"input tensor has shape {tuple(x.shape)}, model expects {tuple(shape)}")
        return x.astype(dtype, copy=False)
    return random_input(shape, args.random_input, 0, dtype)


def cmd_gen(args) -> int:
    if args.name == "random":
        g = models.random_model(args.seed)
    else:
        g = models.named_model(args.name, args.seed)
    snm.save(args.output, g, "graph")
    print(f"wrote {args.output}: {args.name} ({len(g.nodes)} layers, input {g.input_shape})")
    return 0


def cmd_convert(args) -> int:
    g = _load_graph(args.model)
    part_a, part_b, _ = convert(g, _params(args, args.debug))
    snm.save(args.part_a, part_a, "part_a")
    snm.save(args.part_b, part_b)
    print(f"wrote {args.part_a} ({len(part_a.nodes)} nodes) and {args.part_b} ({len(part_b.regions)} secure regions)")
    return 0


def cmd_infer(args) -> int:
    part_a = _load_graph(args.part_a, "part_a")
    blob = Path(args.part_b).read_bytes()
    part_b = snm.loads(blob, expect="part_b")
    dtype = np.dtype(part_b.meta.get("dtype", "float32"))
    x = _input_tensor(args, part_a.input_shape, dtype)
    session = session_init(part_a, blob, args.budget, seed=args.mask_seed, mask_scale=0.0 if args.debug else 1.0)
    try:
        round_begin(session)
        y, view = infer(session, x)
    finally:
        session.close()
    if args.output:
        snm.save(args.output, y)
    if args.dump_view:
        view.dump_jsonl(args.dump_view)
    fp = session.footprint
    print(f"secure footprint: {fp['total']} of {fp['budget']} bytes (activations 2 x {fp['max_activation_bytes']})")
    flat = y.ravel()
    print(f"output shape {tuple(y.shape)}; argmax {int(np.argmax(flat))}; first values {np.array2string(flat[:5], precision=6)}")
    return 0


def cmd_verify(args) -> int:
    g = _load_graph(args.model)
    if (args.part_a is None) != (args.part_b is None):
        raise UsageError("--part-a and --part-b must be given together")
    if args.part_a:
        part_a = _load_graph(args.part_a, "part_a")
        part_b = snm.load(args.part_b, expect="part_b")
    else:
        part_a, part_b, _ = convert(g, _params(args, args.debug))
    faults = {}
    for kind, layer in args.inject:
        if kind in ("lambda", "perm"):
            part_b = sabotage(part_b, layer, kind)
        else:
            faults[kind.replace("-", "_")] = layer
    report = verify_model(
        g,
        part_a,
        part_b,
        trials=args.trials,
        tolerance=args.tolerance,
        seed=args.seed,
        budget=args.budget,
        mask_scale=0.0 if args.debug else 1.0,
        faults=faults,
    )
    print(report.to_text())
    return 0 if report.passed else 1


def cmd_bench(args) -> int:
    g = canonicalize(_load_graph(args.model))
    part_a, part_b, _ = convert(g, _params(args))
    session = session_init(part_a, part_b, args.budget, seed=args.seed)
    xs = [random_input(g.input_shape, args.seed, t) for t in range(args.reps)]
    t0 = time.perf_counter()
    for x in xs:
        run_graph(g, x)
    t_orig = time.perf_counter() - t0
    t0 = time.perf_counter()
    for x in xs:
        round_begin(session)
        infer(session, x)
    t_conv = time.perf_counter() - t0
    session.close()
    print(f"original : {t_orig / args.reps * 1e3:9.3f} ms/inference")
    print(f"converted: {t_conv / args.reps * 1e3:9.3f} ms/inference (x{t_conv / max(t_orig, 1e-12):.2f}, simulated worlds, same process)")
    return 0


def _dyadic_filter(kern: np.ndarray) -> np.ndarray:
    """Round onto the 1/256 grid used by dyadic mode, so transform arithmetic is exact."""
    return (np.round(kern.astype(np.float64) * 256) / 256).astype(kern.dtype)


def cmd_attack_sim(args) -> int:
    g = canonicalize(_load_graph(args.model))
    victim, adversary = count_equivalent_params(g, args.ratio)
    print(f"equivalent-CNN parameters at r={args.ratio:g}: victim {victim}, adversary {adversary} (published conv weights frozen, not counted)")
    print(f"{'layer':<12}{'n':>6}{'m':>6}{'pre-images':>12}  status")
    ok = True
    params = ObfuscationParams(ratio=args.ratio, seed=args.seed, dyadic=True)
    stream = Stream(args.seed, ("attack-sim",))
    for node in g.nodes:
        if node.kind not in ("Conv", "PWConv"):
            continue
        kern = _dyadic_filter(node.weights["kernel"])
        n = kern.shape[3]
        secret = gen_conv_secret(n, kern.shape[:3], params, stream.child(node.name), kern.dtype, 1.0)
        what = transform_conv(ConvFilter(kern), secret)
        if secret.m == n:
            print(f"{node.name:<12}{n:>6}{secret.m:>6}{'-':>12}  skipped (m == n: scale+permute only)")
            continue
        found = sample_preimages(what, n, args.k, stream.child(node.name, "pre"), params)
        good = sum(verify_preimage(p, what) for p in found)
        truth = verify_preimage(FeasiblePreimage(kern, secret), what)
        ok &= good == len(found) and truth
        print(f"{node.name:<12}{n:>6}{expanded_count(n, args.ratio):>6}{good:>6}/{len(found):<5}  {'verified' if good == len(found) and truth else 'FAILED'}")

    part_a, part_b, secrets = convert(g, _params(args))
    session = session_init(part_a, part_b, args.budget, seed=args.seed)
    round_begin(session)
    _, view = infer(session, random_input(g.input_shape, args.seed))
    session.close()
    report = audit_view(view, g, secrets)
    print(report.to_text())
    if args.audit_log:
        with open(args.audit_log, "w", encoding="utf-8") as fh:
            for rec in report.checks:
                fh.write(json.dumps(rec, sort_keys=True) + "\n")
    return 0 if ok and report.passed else 1


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="cloaknet", description="Convert, run and check obfuscated CNN models.", epilog="exit codes: 0 ok, 1 verification failure, 2 usage or I/O error")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, seed_required=False, ratio=True):
        if ratio:
            sp.add_argument("--ratio", type=float, default=1.2, help="obfuscation ratio r >= 1 (default 1.2)")
        sp.add_argument("--seed", type=int, required=seed_required, default=None if seed_required else 0)
        sp.add_argument("--budget", type=parse_size, default=DEFAULT_BUDGET, help="secure memory budget (default 64MiB)")

    sp = sub.add_parser("gen", help="write a named or random toy model")
    sp.add_argument("name", choices=sorted(models.NAMED) + ["random"])
    sp.add_argument("-o", "--output", required=True)
    sp.add_argument("--seed", type=int, default=0)
    sp.set_defaults(func=cmd_gen)

    sp = sub.add_parser("convert", help="split a model into Part A and Part B")
    sp.add_argument("model")
    common(sp, seed_required=True)
    sp.add_argument("--part-a", required=True)
    sp.add_argument("--part-b", required=True)
    sp.add_argument("--debug", action="store_true", help="dyadic secrets (bitwise reference mode)")
    sp.set_defaults(func=cmd_convert)

    sp = sub.add_parser("infer", help="run one inference through both worlds")
    sp.add_argument("--part-a", required=True)
    sp.add_argument("--part-b", required=True)
    src = sp.add_mutually_exclusive_group(required=True)
    src.add_argument("--input", help=".snm tensor file")
    src.add_argument("--random-input", type=int, metavar="SEED")
    sp.add_argument("-o", "--output", help="write the output tensor (.snm)")
    sp.add_argument("--budget", type=parse_size, default=DEFAULT_BUDGET)
    sp.add_argument("--mask-seed", type=int, default=0)
    sp.add_argument("--dump-view", metavar="PATH", help="write the normal-world view as JSON lines")
    sp.add_argument("--debug", action="store_true", help="zero masks")
    sp.set_defaults(func=cmd_infer)

    sp = sub.add_parser("verify", help="compare converted vs original on random inputs")
    sp.add_argument("model")
    common(sp)
    sp.add_argument("--trials", type=int, default=100)
    sp.add_argument("--tolerance", type=float, default=1e-4)
    sp.add_argument("--part-a")
    sp.add_argument("--part-b")
    sp.add_argument("--debug", action="store_true", help="zero masks and dyadic secrets")
    sp.add_argument("--inject", type=parse_injection, action="append", default=[], metavar="KIND=LAYER",
                    help=f"negative test: {', '.join(INJECTIONS)}")
    sp.set_defaults(func=cmd_verify)

    sp = sub.add_parser("bench", help="informational wall-clock timings")
    sp.add_argument("model")
    common(sp)
    sp.add_argument("--reps", type=int, default=20)
    sp.set_defaults(func=cmd_bench)

    sp = sub.add_parser("attack-sim", help="parameter counts, feasible pre-images and a view audit")
    sp.add_argument("model")
    common(sp)
    sp.add_argument("-k", type=int, default=5, help="pre-images per layer")
    sp.add_argument("--audit-log", metavar="PATH", help="write audit checks as JSON lines")
    sp.set_defaults(func=cmd_attack_sim)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (CloakError, OSError, UsageError) as exc:
        print(f"cloaknet {args.command}: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
