"""``netsketch`` command line: sketch, verify, bench, info, generate.

Exit codes: 0 success, 1 verification failure, 2 usage error, 3 IO or parse error.
"""
from __future__ import annotations

import argparse
import csv
import io
import json
import os
import sys
import time
from pathlib import Path

import numpy as np

from . import assoc, checks, model_io
from .model_io import FormatError, LayerSpec
from .sketch import direct_bound, layer_energy, sketch_layer, storage_and_flops
from .tensor import Shape, frobenius_norm_sq

DEFAULT_SEED = 1234
EXIT_OK, EXIT_FAIL, EXIT_USAGE, EXIT_IO = 0, 1, 2, 3

CONVENTIONS = {
    "direct_binary_convolution": "t FADDs per output",
    "associative_step": "(t - |r|)/2 + 1 FADDs, 1 doubling, t ternary selects",
    "tree_root": "one direct binary convolution (t FADDs)",
    "scaled_combination": "m FMULs and m - 1 FADDs per output value per filter",
    "storage_bits": "32 bits per full-precision weight or scale, 1 bit per binary entry",
}


class UsageError(Exception):
    pass


def _positive_int(text: str) -> int:
    try:
        v = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected an integer, got {text!r}") from None
    if v < 1:
        raise argparse.ArgumentTypeError(f"expected a positive integer, got {v}")
    return v


def _threads() -> int:
    raw = os.environ.get("NETSKETCH_THREADS", "1")
    try:
        return max(1, int(raw))
    except ValueError:
        raise UsageError(f"NETSKETCH_THREADS must be an integer, got {raw!r}") from None


def _fmt(values, digits=6) -> str:
    return "[" + ", ".join(f"{v:.{digits}f}" for v in values) + "]"


def _sketch_layers(layers, m, method):
    workers = _threads()
    return [(spec, sketch_layer(filters, m, method, workers)) for spec, filters in layers]


def cmd_sketch(args) -> int:
    layers = model_io.load_array_file(args.input)
    if args.spatial:
        layers = [(LayerSpec(s.name, s.n, s.shape, args.spatial), f) for s, f in layers]
    sketched = _sketch_layers(layers, args.bits, args.method)
    report = model_io.save_sketch(args.output, sketched)
    for (spec, filters), (_, sks), st in zip(layers, sketched, report.layers):
        energy = layer_energy(filters, sks)
        acct = storage_and_flops(spec.shape, spec.n, args.bits, spec.spatial_s)
        print(f"layer {spec.name}: t={spec.shape.t} n={spec.n} m={args.bits} method={args.method}")
        print(f"  energy {_fmt(energy)}")
        print(f"  compression {acct.compression_factor:.2f}x  fmul reduction {acct.fmul_factor:.2f}x"
              f"  pool {st.pool_size}/{st.terms} tensors")
    print(f"wrote {args.output} ({report.file_bits // 8} bytes)")
    return EXIT_OK


def _verify_weights(layers, m, seed) -> list[checks.CheckResult]:
    results = []
    for li, (spec, filters) in enumerate(layers):
        results.extend(checks.check_filters(spec.name, filters, m))
        sks = sketch_layer(filters, m, "refined", _threads())
        results.append(checks.check_associative(spec.name, sks, seed + li))
    return results


def _verify_sketch_file(path, seed) -> list[checks.CheckResult]:
    integrity = checks.CheckResult("file: checksum and structure")
    try:
        layers = model_io.load_sketch(path)
    except model_io.ChecksumError as exc:
        integrity.fail(f"checksum failure: {exc}")
        return [integrity]
    results = [integrity]
    for li, (spec, sks) in enumerate(layers):
        mono = checks.CheckResult(f"{spec.name}: monotone residual history")
        for i, s in enumerate(sks):
            if not checks.is_nonincreasing(s.residual_norms_sq):
                mono.fail(f"filter {i}")
        results.append(mono)
        results.append(checks.check_associative(spec.name, sks, seed + li))
    return results


def cmd_verify(args) -> int:
    path = Path(args.input)
    with open(path, "rb") as fp:
        head = fp.read(len(model_io.NSKT_MAGIC))
    if head == model_io.NSKT_MAGIC:
        results = _verify_sketch_file(path, args.seed)
    else:
        if args.bits is None:
            raise UsageError("--bits is required when verifying a weight file")
        results = _verify_weights(model_io.load_array_file(path), args.bits, args.seed)
    ok = True
    for r in results:
        print(f"{'PASS' if r.passed else 'FAIL'} {r.name}")
        for msg in r.failures:
            print(f"    {msg}")
        ok &= r.passed
    return EXIT_OK if ok else EXIT_FAIL


def _bench_layer(spec: LayerSpec, filters, sketches, modes, seed, map_size, stride):
    shape = spec.shape
    Wm = map_size[0] if map_size else shape.w + 2
    Hm = map_size[1] if map_size else shape.h + 2
    if Wm < shape.w or Hm < shape.h:
        raise UsageError(f"feature map {Wm}x{Hm} smaller than kernel {shape.w}x{shape.h}")
    rng = np.random.default_rng(seed)
    fm = assoc.FeatureMap(rng.standard_normal((shape.c, Wm, Hm)))
    tensors, _ = assoc.layer_tensors(sketches)
    m = max((s.m for s in sketches), default=0)
    total_sq = sum(frobenius_norm_sq(W) for W in filters)
    record = {
        "name": spec.name, "t": shape.t, "n": spec.n, "m": m,
        "energy": layer_energy(filters, sketches),
        "residual_norms_sq": [sum(s.residual_norms_sq[min(j, s.m)] for s in sketches) for j in range(m + 1)],
        "direct_bound": [direct_bound(total_sq, shape.t, j) for j in range(m + 1)],
    }
    if m:
        acct = storage_and_flops(shape, spec.n, m, spec.spatial_s)
        record["storage"] = {"full_bits": acct.full_bits, "sketched_bits": acct.sketched_bits,
                             "compression_factor": acct.compression_factor,
                             "fmul_factor": acct.fmul_factor}
    modes_out = {}
    baseline = None
    reference = None
    for mode in modes:
        binary, combine = assoc.OpCounter(), assoc.OpCounter()
        tree = assoc.build_tree(tensors, mode, seed) if tensors else None
        outs = assoc.sketch_layer_convolve(fm, sketches, mode, stride, binary, seed=seed,
                                           combine_counter=combine, tree=tree)
        stacked = np.stack([o.data for o in outs]) if outs else np.zeros(0)
        if reference is None:
            reference = stacked
        elif not np.allclose(stacked, reference, rtol=1e-9, atol=1e-9 * max(1.0, np.abs(reference).max())):
            raise RuntimeError(f"mode {mode} disagrees with {modes[0]} on layer {spec.name}")
        windows = outs[0].shape[1] * outs[0].shape[2] if outs else 0
        entry = {
            "windows": windows,
            "binary": binary.as_dict(),
            "combine": combine.as_dict(),
            "total_fadds": binary.fadds + combine.fadds,
            "total_fmuls": binary.fmuls + combine.fmuls,
        }
        if tree is not None:
            entry["tree_weight"] = tree.total_weight()
        if mode == "none":
            baseline = binary.fadds
        modes_out[mode] = entry
    for mode, entry in modes_out.items():
        if baseline:
            entry["binary_fadd_reduction"] = baseline / entry["binary"]["fadds"]
    record["modes"] = modes_out
    return record


def _csv_report(report) -> str:
    buf = io.StringIO()
    for k, v in report["conventions"].items():
        buf.write(f"# {k}: {v}\n")
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["layer", "mode", "t", "n", "m", "windows", "binary_fadds", "combine_fadds",
                     "total_fadds", "fmuls", "ternary_selects", "doublings", "binary_fadd_reduction",
                     "final_energy"])
    for layer in report["layers"]:
        for mode, e in layer["modes"].items():
            writer.writerow([layer["name"], mode, layer["t"], layer["n"], layer["m"], e["windows"],
                             e["binary"]["fadds"], e["combine"]["fadds"], e["total_fadds"],
                             e["total_fmuls"], e["binary"]["ternary_selects"], e["binary"]["doublings"],
                             repr(e.get("binary_fadd_reduction", "")), repr(layer["energy"][-1])])
    return buf.getvalue()


def cmd_bench(args) -> int:
    layers = model_io.load_array_file(args.input)
    # direct execution is always included as the reduction baseline
    modes = {"all": ["none", "random", "mst"], "none": ["none"]}.get(args.tree, ["none", args.tree])
    started = time.perf_counter()
    sketched = _sketch_layers(layers, args.bits, args.method)
    records = []
    for li, ((spec, filters), (_, sks)) in enumerate(zip(layers, sketched)):
        records.append(_bench_layer(spec, filters, sks, modes, args.seed + li, args.map_size, args.stride))
    report = {
        "tool": "netsketch bench",
        "conventions": CONVENTIONS,
        "config": {"bits": args.bits, "method": args.method, "tree": args.tree, "seed": args.seed,
                   "stride": args.stride, "map_size": args.map_size},
        "layers": records,
    }
    if args.timing:
        report["wall_time_s"] = time.perf_counter() - started
    text = json.dumps(report, indent=2) + "\n" if args.format == "json" else _csv_report(report)
    if args.report:
        Path(args.report).write_text(text)
        for r in records:
            summary = ", ".join(f"{k}={v['binary']['fadds']}" for k, v in r["modes"].items())
            print(f"layer {r['name']}: binary FADDs {summary}")
        print(f"wrote {args.report}")
    else:
        sys.stdout.write(text)
    return EXIT_OK


def cmd_info(args) -> int:
    layers, report = model_io.sketch_file_info(args.sketch)
    lines = [f"NSKT version {model_io.FORMAT_VERSION}, {len(layers)} layer(s), {report.file_bits // 8} bytes"]
    for (spec, sks), st in zip(layers, report.layers):
        method = sks[0].method if sks else "-"
        lines.append(f"layer {spec.name}: shape {spec.shape.c}x{spec.shape.w}x{spec.shape.h} (t={st.t}) "
                     f"n={st.n} m={st.m} method={method} spatial_s={spec.spatial_s}")
        lines.append(f"  pool {st.pool_size} unique of {st.terms} tensors (dedup ratio {st.dedup_ratio:.3f}), "
                     f"index width {st.index_width} bits")
        lines.append(f"  bits: pool {st.pool_bits}, indices {st.index_bits}, scales {st.scale_bits}, "
                     f"overhead {st.overhead_bits}, total {st.total_bits}")
        lines.append(f"  full precision {st.full_precision_bits} bits, ideal sketch {st.ideal_bits} bits, "
                     f"compression 32t/(32m+tm) = {st.compression_factor:.2f}x")
    print("\n".join(lines))
    return EXIT_OK


def cmd_generate(args) -> int:
    shape = Shape(*args.shape)
    filters = model_io.generate_synthetic(shape, args.filters, args.distribution, args.seed)
    spec = LayerSpec(args.name, args.filters, shape, args.spatial)
    model_io.save_weights(args.output, [(spec, filters)])
    print(f"wrote {args.output}: {args.filters} filters of shape {shape.dims}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="netsketch", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("sketch", help="sketch every layer of a weight file into an NSKT file")
    s.add_argument("input")
    s.add_argument("--bits", "-m", type=_positive_int, required=True)
    s.add_argument("--method", choices=["direct", "refined"], default="refined")
    s.add_argument("--output", "-o", required=True)
    s.add_argument("--spatial", type=_positive_int, help="override output positions per layer")
    s.set_defaults(func=cmd_sketch)

    v = sub.add_parser("verify", help="check the approximation and convolution invariants")
    v.add_argument("input", help="weight file (NSKW or .npy) or NSKT sketch file")
    v.add_argument("--bits", "-m", type=_positive_int)
    v.add_argument("--seed", type=int, default=DEFAULT_SEED)
    v.set_defaults(func=cmd_verify)

    b = sub.add_parser("bench", help="compare FADD counts of direct and associative execution")
    b.add_argument("input")
    b.add_argument("--bits", "-m", type=_positive_int, required=True)
    b.add_argument("--method", choices=["direct", "refined"], default="refined")
    b.add_argument("--tree", choices=["mst", "random", "none", "all"], default="all")
    b.add_argument("--seed", type=int, default=DEFAULT_SEED)
    b.add_argument("--map-size", type=_positive_int, nargs=2, metavar=("W", "H"))
    b.add_argument("--stride", type=_positive_int, default=1)
    b.add_argument("--report")
    b.add_argument("--format", choices=["json", "csv"], default="json")
    b.add_argument("--timing", action="store_true", help="include wall time (makes reports non-reproducible)")
    b.set_defaults(func=cmd_bench)

    i = sub.add_parser("info", help="describe an NSKT sketch file")
    i.add_argument("sketch")
    i.set_defaults(func=cmd_info)

    g = sub.add_parser("generate", help="write a synthetic NSKW weight file")
    g.add_argument("output")
    g.add_argument("--shape", type=_positive_int, nargs=3, metavar=("C", "W", "H"), required=True)
    g.add_argument("--filters", "-n", type=_positive_int, required=True)
    g.add_argument("--distribution", choices=["gaussian", "uniform"], default="gaussian")
    g.add_argument("--seed", type=int, default=DEFAULT_SEED)
    g.add_argument("--spatial", type=_positive_int, default=1)
    g.add_argument("--name", default="layer0")
    g.set_defaults(func=cmd_generate)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code) if exc.code is not None else EXIT_OK
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"netsketch: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (OSError, FormatError) as exc:
        print(f"netsketch: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
