"""Command-line entry point: reproducible experiment runs.

Subcommands: generate, train, analyze, export-filters, gradcheck.  Runs
are configured by a JSON document (--config FILE) with individual keys
overridable on the command line via repeated --set key=value (dotted keys
reach into nested sections; values parse as JSON, falling back to plain
strings).  Command line wins over the file.

Exit codes: 0 success, 2 configuration error (bad config/flags/dims),
3 data error (missing or corrupt artifacts), 4 numerical failure.

RELATE_THREADS caps numeric parallelism: it is applied to the BLAS/OpenMP
thread-count variables before any numeric module is imported, which is
why all heavy imports in this module are deferred into the command
functions.

Every command is a deterministic function of its config, seeds, and input
artifacts; timestamps appear only in JSON manifests, never in binary
outputs, traces, or images.
"""

import argparse
import json
import os
import sys

from .errors import ConfigError, DataError, NumericalError


def _apply_thread_cap():
    cap = os.environ.get("RELATE_THREADS")
    if not cap:
        return
    if not cap.isdigit() or int(cap) < 1:
        raise ConfigError(f"RELATE_THREADS must be a positive integer, "
                          f"got {cap!r}")
    for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS",
                "MKL_NUM_THREADS", "NUMEXPR_NUM_THREADS"):
        os.environ.setdefault(var, cap)


def _set_key(config, dotted, raw):
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    node = config
    keys = dotted.split(".")
    for key in keys[:-1]:
        node = node.setdefault(key, {})
        if not isinstance(node, dict):
            raise ConfigError(f"--set {dotted}: {key} is not a section")
    node[keys[-1]] = value


def _load_config(args):
    config = {}
    if getattr(args, "config", None):
        try:
            with open(args.config) as f:
                config = json.load(f)
        except json.JSONDecodeError as e:
            raise ConfigError(f"{args.config}: invalid JSON ({e})") from e
        if not isinstance(config, dict):
            raise ConfigError(f"{args.config}: top level must be an object")
    for item in getattr(args, "set", None) or []:
        if "=" not in item:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        key, raw = item.split("=", 1)
        _set_key(config, key, raw)
    return config


def _require(config, key):
    if key not in config:
        raise ConfigError(f"config is missing required key {key!r}")
    return config[key]


def _write_json(path, obj):
    with open(path, "w") as f:
        json.dump(obj, f, indent=2, sort_keys=True)
        f.write("\n")


GENERATORS = {
    "shifted_dots": "gen_shifted_dots",
    "splitscreen_dots": "gen_splitscreen_dots",
    "rotated_pairs": "gen_rotated_pairs",
    "dot_movies": "gen_dot_movies",
}


def cmd_generate(args):
    from . import datagen

    config = _load_config(args)
    if args.from_manifest:
        with open(args.from_manifest) as f:
            manifest = json.load(f)
        for key in ("generator", "params"):
            if key not in manifest:
                raise DataError(
                    f"{args.from_manifest}: manifest lacks {key!r}, cannot "
                    "regenerate"
                )
        config.setdefault("generator", manifest["generator"])
        config.setdefault("params", manifest["params"])
        config.setdefault("normalize", manifest.get("normalized", False))
    name = _require(config, "generator")
    if name not in GENERATORS:
        raise ConfigError(
            f"unknown generator {name!r}; choose from "
            f"{sorted(GENERATORS)}"
        )
    params = dict(config.get("params", {}))
    try:
        batch = getattr(datagen, GENERATORS[name])(**params)
    except TypeError as e:
        raise ConfigError(f"bad parameters for {name}: {e}") from e
    if config.get("normalize", False):
        batch = datagen.normalize(batch)
    out = args.out or config.get("out")
    if not out:
        raise ConfigError("no output path (--out or config 'out')")
    datagen.save_batch(out, batch, extra_manifest={
        "generator": name,
        "params": params,
        "normalized": bool(config.get("normalize", False)),
    })
    print(f"wrote {out} ({batch.num_pairs} pairs) and {out}.json")
    return 0


def _dataset_geometry(batch):
    if batch.height > 0 and batch.width > 0:
        return batch.height, batch.width, batch.num_frames
    return None


def _export_filter_grids(out_dir, wx, wy, geometry, tied):
    from . import viz

    written = []
    if geometry is None:
        return written
    h, w, frames = geometry
    grids = [("filters_x.png", wx)]
    if not tied and wy is not None:
        grids.append(("filters_y.png", wy))
    for name, mat in grids:
        if mat.shape[0] != h * w * frames:
            continue
        path = os.path.join(out_dir, name)
        viz.save_image(path, viz.filter_grid(mat, h, w, frames))
        written.append(path)
    return written


def cmd_train(args):
    from . import datagen, energy_isa, gae, grbm

    config = _load_config(args)
    kind = _require(config, "model")
    data_path = _require(config, "dataset")
    if not os.path.exists(data_path):
        raise DataError(f"dataset not found: {data_path}")
    batch = datagen.load_batch(data_path)
    train_cfg = gae.TrainConfig(**config.get("train", {}))
    out_dir = _require(config, "out_dir")
    os.makedirs(out_dir, exist_ok=True)
    num_factors = int(_require(config, "num_factors"))
    tied = bool(config.get("tied", False))
    init_seed = int(config.get("init_seed", 0))
    resuming = bool(args.resume)

    if kind == "gae":
        if resuming:
            model = gae.load_gae(args.resume)
        else:
            model = gae.init_gae(batch.input_dim, batch.output_dim,
                                 num_factors,
                                 int(_require(config, "num_maps")),
                                 tied, init_seed)
        model, trace = gae.train(model, batch, train_cfg)
        ckpt = os.path.join(out_dir, "checkpoint.relw")
        gae.save_gae(ckpt, model, extra_manifest={
            "dataset": data_path, "trace": "trace.jsonl"})
        wx, wy = model.params.wx, model.params.wy
    elif kind == "grbm":
        binary = (((batch.x == 0) | (batch.x == 1)).all()
                  and ((batch.y == 0) | (batch.y == 1)).all())
        if not binary:
            batch = grbm.binarize_batch(batch)
            print("binarized dataset at per-image medians")
        if resuming:
            model = grbm.load_gbm(args.resume)
        else:
            model = grbm.init_gbm(batch.input_dim, batch.output_dim,
                                  num_factors,
                                  int(_require(config, "num_maps")),
                                  init_seed)
        model, trace = grbm.train_cd1(model, batch, train_cfg)
        ckpt = os.path.join(out_dir, "checkpoint.relw")
        grbm.save_gbm(ckpt, model, extra_manifest={
            "dataset": data_path, "trace": "trace.jsonl"})
        wx, wy = model.params.wx, model.params.wy
    elif kind == "isa":
        if resuming:
            model = energy_isa.load_isa(args.resume)
        else:
            model = energy_isa.init_energy_model(
                batch.input_dim, batch.output_dim, num_factors,
                int(config.get("subspace_size", 2)), tied, init_seed)
        model, trace = energy_isa.train_isa(
            model, batch, train_cfg,
            learn_pooling=bool(config.get("learn_pooling", False)))
        ckpt = os.path.join(out_dir, "checkpoint.relw")
        energy_isa.save_isa(ckpt, model, extra_manifest={
            "dataset": data_path, "trace": "trace.jsonl"})
        wx, wy = model.wx, (None if model.tied else model.wy)
    else:
        raise ConfigError(f"unknown model kind {kind!r}")

    trace_path = os.path.join(out_dir, "trace.jsonl")
    mode = "a" if resuming and os.path.exists(trace_path) else "w"
    with open(trace_path, mode) as f:
        for record in trace:
            f.write(json.dumps(record, sort_keys=True) + "\n")
    written = _export_filter_grids(out_dir, wx, wy,
                                   _dataset_geometry(batch), tied)
    print(f"wrote {ckpt}, {trace_path}" +
          ("".join(", " + p for p in written)))
    if trace:
        print(f"first loss {trace[0]['loss']:.6g}, "
              f"last loss {trace[-1]['loss']:.6g}")
    return 0


def _build_warps(spec):
    from . import spectral
    import numpy as np
    import scipy.linalg

    kind = spec.get("kind")
    if kind == "identity":
        n = int(_require(spec, "n"))
        return [spectral.make_cyclic_shift(n, 0)]
    if kind == "cyclic":
        n = int(_require(spec, "n"))
        return [spectral.make_cyclic_shift(n, s) for s in range(n)]
    if kind == "cyclic2d":
        h = int(_require(spec, "height"))
        w = int(_require(spec, "width"))
        return [spectral.make_2d_shift(h, w, 1, 0),
                spectral.make_2d_shift(h, w, 0, 1)]
    if kind == "splitscreen":
        h = int(_require(spec, "height"))
        w = int(_require(spec, "width"))
        if h % 2:
            raise ConfigError("splitscreen warp needs even height")
        half = h // 2
        eye = np.eye(half * w)
        warps = []
        for sr, sc in ((1, 0), (0, 1)):
            t = spectral.make_2d_shift(half, w, sr, sc).L
            warps.append(spectral.WarpMatrix(
                scipy.linalg.block_diag(t, eye), "permutation"))
            warps.append(spectral.WarpMatrix(
                scipy.linalg.block_diag(eye, t), "permutation"))
        return warps
    raise ConfigError(f"unknown warp kind {spec.get('kind')!r}")


def cmd_analyze(args):
    import numpy as np

    from . import datagen, gae, infer_tools, spectral, tensor_core, viz

    out_dir = args.out_dir
    os.makedirs(out_dir, exist_ok=True)
    params, manifest = tensor_core.load_params(args.checkpoint)
    kind = manifest.get("kind", "gae")
    wrote = []

    if args.warp_spec:
        if args.warp_spec.strip().startswith("{"):
            spec = json.loads(args.warp_spec)
        else:
            with open(args.warp_spec) as f:
                spec = json.load(f)
        warps = _build_warps(spec)
        eigen = spectral.shared_eigenbasis(warps)
        report = {
            "warp_spec": spec,
            "eigenvalues": [[float(v.real), float(v.imag)]
                            for v in eigen.eigenvalues],
            "num_subspaces": len(eigen.pair_indices),
            "num_real_lines": len(eigen.real_indices),
        }
        if params.wx.shape[0] == eigen.dim:
            report["filters_x"] = spectral.filter_diagnostics(params.wx,
                                                              eigen)
        path = os.path.join(out_dir, "diagnostics.json")
        _write_json(path, report)
        wrote.append(path)

    if args.dataset:
        if kind != "gae":
            raise ConfigError(
                f"flow/analogy analysis needs a gae checkpoint, got {kind!r}"
            )
        batch = datagen.load_batch(args.dataset)
        model = gae.load_gae(args.checkpoint)
        geometry = _dataset_geometry(batch)
        if geometry is None:
            raise DataError("dataset manifest lacks image geometry")
        h, w, frames = geometry
        if frames != 1:
            raise ConfigError("flow analysis needs single-frame pairs")
        count = min(args.num_samples, batch.num_pairs)
        summary = []
        for i in range(count):
            flow = infer_tools.infer_flow(model, batch.x[i], batch.y[i],
                                          h, w)
            render = viz.flow_image(flow, background=batch.x[i])
            fpng = os.path.join(out_dir, f"flow_{i}.png")
            viz.save_image(fpng, render)
            fjson = os.path.join(out_dir, f"flow_{i}.json")
            with open(fjson, "w") as f:
                f.write(flow.to_json() + "\n")
            x_new = batch.x[(i + 1) % batch.num_pairs]
            y_pred = infer_tools.analogy(model, batch.x[i], batch.y[i],
                                         x_new)
            strip = viz.analogy_strip(
                [batch.x[i], batch.y[i], render, x_new, y_pred], h, w)
            apng = os.path.join(out_dir, f"analogy_{i}.png")
            viz.save_image(apng, strip)
            wrote += [fpng, fjson, apng]
            med = flow.median_displacement()
            record = {"sample": i, "median_dr": med[0], "median_dc": med[1]}
            if batch.labels is not None and batch.label_kind == "shift":
                record["label_sx"] = float(batch.labels[i, 0])
                record["label_sy"] = float(batch.labels[i, 1])
            summary.append(record)
        spath = os.path.join(out_dir, "flow_summary.json")
        _write_json(spath, summary)
        wrote.append(spath)

    if not wrote:
        raise ConfigError("nothing to analyze: pass --warp-spec and/or "
                          "--dataset")
    print("wrote " + ", ".join(wrote))
    return 0


def cmd_export_filters(args):
    from . import tensor_core, viz

    params, manifest = tensor_core.load_params(args.checkpoint)
    h, w, frames = args.height, args.width, args.frames
    if h is None or w is None:
        raise ConfigError("pass --height and --width for the filter shape")
    grids = [("x", params.wx)]
    if manifest.get("tied_xy") or manifest.get("tied"):
        pass
    else:
        grids.append(("y", params.wy))
    base, ext = os.path.splitext(args.out)
    wrote = []
    for tag, mat in grids:
        if mat.shape[0] != h * w * frames:
            raise ConfigError(
                f"filter rows {mat.shape[0]} != height*width*frames "
                f"{h * w * frames}"
            )
        path = args.out if len(grids) == 1 else f"{base}_{tag}{ext}"
        viz.save_image(path, viz.filter_grid(mat, h, w, frames))
        wrote.append(path)
    print("wrote " + ", ".join(wrote))
    return 0


def cmd_gradcheck(args):
    import numpy as np

    from . import datagen, gae

    rng = np.random.default_rng(args.seed)
    worst = 0.0
    for i in range(args.configs):
        tied = bool(i % 2)
        sym = i % 3 != 0
        lam = 0.0 if i % 4 < 2 else 0.01
        corrupt = 0.0 if i % 4 % 2 == 0 else 0.3
        n = 8
        model = gae.init_gae(n, n, 6, 4, tied, seed=int(rng.integers(1e6)))
        batch = datagen.PairBatch(rng.standard_normal((5, n)),
                                  rng.standard_normal((5, n)))
        config = gae.TrainConfig(sparsity_weight=lam,
                                 corruption_level=corrupt,
                                 symmetric=sym)
        inputs = None
        if corrupt:
            inputs = gae.corrupt_inputs(rng, batch.x, batch.y, corrupt)
        err = gae.finite_difference_check(model, batch, config,
                                          inputs=inputs)
        worst = max(worst, err)
        print(f"config {i:2d} tied={int(tied)} sym={int(sym)} "
              f"lambda={lam} corrupt={corrupt}: rel err {err:.3e}")
    print(f"max relative error {worst:.3e}")
    if worst >= 1e-5:
        raise NumericalError(
            f"gradient check failed: {worst:.3e} >= 1e-5"
        )
    return 0


def build_parser():
    parser = argparse.ArgumentParser(
        prog="relate",
        description="Train and analyze gated relational feature models.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate", help="write a synthetic pair dataset")
    p.add_argument("--config", help="JSON config file")
    p.add_argument("--set", action="append", metavar="KEY=VALUE",
                   help="override a config key (repeatable)")
    p.add_argument("--from-manifest",
                   help="regenerate from a dataset manifest")
    p.add_argument("--out", help="output dataset path")
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("train", help="train a model on a dataset")
    p.add_argument("--config", help="JSON config file")
    p.add_argument("--set", action="append", metavar="KEY=VALUE")
    p.add_argument("--resume", help="checkpoint to continue from")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("analyze",
                       help="diagnostics, flow fields, analogies")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--dataset", help="pair dataset for flow/analogy")
    p.add_argument("--warp-spec",
                   help="JSON warp family (file or inline) for spectral "
                        "diagnostics")
    p.add_argument("--out-dir", default="analysis")
    p.add_argument("--num-samples", type=int, default=5)
    p.set_defaults(func=cmd_analyze)

    p = sub.add_parser("export-filters",
                       help="render checkpoint filters as an image grid")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--height", type=int)
    p.add_argument("--width", type=int)
    p.add_argument("--frames", type=int, default=1)
    p.set_defaults(func=cmd_export_filters)

    p = sub.add_parser("gradcheck",
                       help="finite-difference check of the analytic "
                            "gradients")
    p.add_argument("--configs", type=int, default=20)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_gradcheck)

    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        _apply_thread_cap()
        return args.func(args) or 0
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return 2
    except (ValueError, KeyError, TypeError) as e:
        print(f"config error: {e}", file=sys.stderr)
        return 2
    except DataError as e:
        print(f"data error: {e}", file=sys.stderr)
        return 3
    except OSError as e:
        name = getattr(e, "filename", None)
        where = f" ({name})" if name else ""
        print(f"data error: {e}{where}", file=sys.stderr)
        return 3
    except (NumericalError, FloatingPointError) as e:
        print(f"numerical failure: {e}", file=sys.stderr)
        return 4


if __name__ == "__main__":
    sys.exit(main())
