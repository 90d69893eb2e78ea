"""``iadccn`` command line: synth, train, eval, infer, render, gradcheck, ablate.

Exit codes: 0 success, 2 usage/configuration error, 3 data error,
4 numeric or check failure.
"""

import argparse
import dataclasses
import hashlib
import json
import logging
import sys
import time
from contextlib import nullcontext
from pathlib import Path

import numpy as np

from . import __version__
from . import data as D
from . import evaluation as E
from . import gradcheck as G
from . import model as M
from . import training as TR
from .errors import ConfigurationError, DataError, IADCCNError, NumericError

logger = logging.getLogger("iadccn")

EXIT_USAGE = 2
EXIT_DATA = 3
EXIT_NUMERIC = 4


def git_blob_hash(path):
    """Content hash in the same form git uses for blobs."""
    blob = Path(path).read_bytes()
    return hashlib.sha1(b"blob %d\0" % len(blob) + blob).hexdigest()


class Manifest:
    """Collects produced files; written last so its presence marks a finished run."""

    def __init__(self, command, argv, out_dir):
        self.out_dir = Path(out_dir)
        self.record = {
            "command": command,
            "argv": list(argv),
            "version": __version__,
            "started": time.strftime("%Y-%m-%dT%H:%M:%S%z"),
            "artifacts": [],
        }

    def add(self, path):
        path = Path(path)
        self.record["artifacts"].append({"path": str(path), "sha1": git_blob_hash(path)})

    def write(self, **extra):
        self.record.update(extra)
        self.record["finished"] = time.strftime("%Y-%m-%dT%H:%M:%S%z")
        path = self.out_dir / "run_manifest.json"
        path.write_text(json.dumps(self.record, indent=2, sort_keys=True, default=str) + "\n")
        return path


def _load_configs(args):
    values = TR.parse_config_file(args.config) if getattr(args, "config", None) else {}
    for item in getattr(args, "set", None) or []:
        if "=" not in item:
            raise ConfigurationError(f"--set expects key=value, got {item!r}")
        k, v = item.split("=", 1)
        values[k.strip()] = v.strip()
    if getattr(args, "epochs", None) is not None:
        values["epochs"] = args.epochs
    if getattr(args, "seed", None) is not None:
        values["seed"] = args.seed
    return TR.build_configs(values)


def config_from_params(params, upsample_factor=4):
    """Recover the architecture from a weight inventory."""
    names = params.keys()
    channels, depths = [], []
    for b in range(1, 6):
        convs = sorted(n for n in names if n.startswith(f"backbone.block{b}.") and n.endswith(".weight"))
        if not convs:
            raise DataError(f"weight file has no backbone block {b}")
        depths.append(len(convs))
        channels.append(params[convs[0]].shape[0])
    hidden = M.IADCCNConfig.iab_hidden
    for head in ("iab", "seg_head"):
        if f"{head}.conv1.weight" in names:
            hidden = params[f"{head}.conv1.weight"].shape[0]
    cfg = M.IADCCNConfig(
        in_channels=params["backbone.block1.conv1.weight"].shape[1],
        block_channels=channels,
        block_depths=depths,
        dru_channels=params["dru.conv.weight"].shape[0],
        iab_enabled="iab.conv1.weight" in names,
        seg_head_enabled="seg_head.conv1.weight" in names,
        iab_hidden=hidden,
        upsample_factor=upsample_factor,
    )
    M.check_inventory(params, cfg)
    return cfg


def _load_model(weights):
    params = M.load_params(weights)
    return M.CrowdCounter(config_from_params(params), params)


# ---------------------------------------------------------------------------
# commands


def cmd_synth(args):
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    cfg = D.SynthConfig(
        height=args.hw[0],
        width=args.hw[1],
        count_range=tuple(args.count_range),
        clutter_level=args.clutter,
        channels=args.channels,
    )
    images = D.synth_dataset(args.n, args.seed, cfg)
    manifest = Manifest("synth", sys.argv, out)
    for path in D.save_dataset(images, out):
        manifest.add(path)
    manifest.write(seed=args.seed, config=dataclasses.asdict(cfg))
    print(f"wrote {len(images)} images to {out}")
    return 0


def cmd_train(args):
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    model_cfg, train_cfg = _load_configs(args)
    if args.ablation:
        model_cfg, train_cfg = E.ablation_configs(args.ablation, model_cfg, train_cfg)
    dataset = D.load_annotations(Path(args.data) / "annotations.json")
    if dataset and dataset[0].pixels.shape[2] != model_cfg.in_channels:
        model_cfg = dataclasses.replace(model_cfg, in_channels=dataset[0].pixels.shape[2])
    if args.resume:
        params = M.load_params(args.resume, model_cfg)
    else:
        params = M.init_params(model_cfg, train_cfg.seed)
    model = M.CrowdCounter(model_cfg, params)
    _, history = TR.train(model, dataset, train_cfg)

    manifest = Manifest("train", sys.argv, out)
    weights = out / "weights.iawt"
    M.save_params(params, weights)
    manifest.add(weights)
    metrics = out / "metrics.csv"
    TR.write_history_csv(history, metrics)
    manifest.add(metrics)
    manifest.write(seed=train_cfg.seed, config=TR.config_snapshot(model_cfg, train_cfg))
    last = history[-1] if history else {}
    print(f"trained {len(history)} epochs; final train MAE {last.get('train_mae', float('nan')):.4f}")
    return 0


def cmd_eval(args):
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    model = _load_model(args.weights)
    dataset = D.load_annotations(Path(args.data) / "annotations.json")
    report = E.evaluate(model, dataset)
    manifest = Manifest("eval", sys.argv, out)
    report.write_csv(out / "per_image.csv")
    manifest.add(out / "per_image.csv")
    report.write_json(out / "summary.json")
    manifest.add(out / "summary.json")
    manifest.write(weights_sha1=git_blob_hash(args.weights))
    print(f"MAE {report.mae:.4f}  MSE {report.mse:.4f}  n={report.n}  {report.ms_per_image:.1f} ms/image")
    return 0


def cmd_infer(args):
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    model = _load_model(args.weights)
    pixels = D.load_image(args.image)
    t0 = time.perf_counter()
    density = model.predict(pixels)
    ms = (time.perf_counter() - t0) * 1000.0
    stem = Path(args.image).stem
    dmap = D.DensityMap(density.astype(np.float32), scale=model.config.output_stride)
    manifest = Manifest("infer", sys.argv, out)
    D.save_density(dmap, out / f"{stem}.iadm")
    manifest.add(out / f"{stem}.iadm")
    D.render_heatmap(dmap, out / f"{stem}_density.pgm")
    manifest.add(out / f"{stem}_density.pgm")
    summary = {"image": str(args.image), "count": E.count_from_density(dmap), "shape": list(density.shape)}
    (out / f"{stem}_count.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    manifest.add(out / f"{stem}_count.json")
    # timing lives in the manifest so the artifacts stay byte-reproducible
    manifest.write(weights_sha1=git_blob_hash(args.weights), ms=ms)
    print(f"count {summary['count']:.3f}  density {density.shape[0]}x{density.shape[1]}  {ms:.1f} ms")
    return 0


def cmd_render(args):
    D.render_heatmap(D.load_density(args.density), args.out)
    print(f"wrote {args.out}")
    return 0


def cmd_gradcheck(args):
    results = G.run_op_checks(seed=args.seed)
    if args.level == "model":
        results.append(G.run_model_check(seed=args.seed))
    failed = 0
    for r in results:
        status = "PASS" if r.passed else "FAIL"
        failed += not r.passed
        print(f"{status}  {r.name:<28} max rel err {r.error:.3e}  (tol {r.tol:g}, {r.seconds:.2f} s)")
    if failed:
        print(f"{failed} check(s) failed")
        return EXIT_NUMERIC
    return 0


def cmd_ablate(args):
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    model_cfg, train_cfg = _load_configs(args)
    dataset = D.load_annotations(Path(args.data) / "annotations.json")
    if dataset:
        model_cfg = dataclasses.replace(model_cfg, in_channels=dataset[0].pixels.shape[2])
    rows = E.run_ablation(dataset, model_cfg, train_cfg, train_cfg.seed, args.test_fraction)
    manifest = Manifest("ablate", sys.argv, out)
    table = out / "ablation.csv"
    E.write_ablation_csv(rows, table)
    manifest.add(table)
    for r in rows:
        print(f"{r.config:<24} MAE {r.report.mae:8.4f}  MSE {r.report.mse:8.4f}")
    manifest.write(seed=train_cfg.seed, config=TR.config_snapshot(model_cfg, train_cfg))
    return 0


# ---------------------------------------------------------------------------


def build_parser():
    p = argparse.ArgumentParser(prog="iadccn", description=__doc__.splitlines()[0])
    p.add_argument(
        "--version",
        action="version",
        version=f"iadccn {__version__} (density format IADM v{D.DENSITY_VERSION}, weights IAWT v{M.WEIGHT_VERSION})",
    )
    p.add_argument("--threads", type=int, default=None, help="cap BLAS threads; 1 gives bitwise determinism")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", help="generate a synthetic annotated dataset")
    s.add_argument("--out", required=True)
    s.add_argument("--n", type=int, required=True)
    s.add_argument("--hw", type=int, nargs=2, default=[64, 64], metavar=("H", "W"))
    s.add_argument("--count-range", type=int, nargs=2, default=[5, 15], metavar=("A", "B"))
    s.add_argument("--clutter", type=float, default=0.5)
    s.add_argument("--channels", type=int, choices=(1, 3), default=3)
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(func=cmd_synth)

    def config_flags(sp):
        sp.add_argument("--config", help="key=value config file")
        sp.add_argument("--set", action="append", metavar="KEY=VALUE", help="override one config key")
        sp.add_argument("--seed", type=int)
        sp.add_argument("--epochs", type=int)

    t = sub.add_parser("train", help="train a model")
    t.add_argument("--data", required=True)
    t.add_argument("--out", required=True)
    t.add_argument("--ablation", choices=[a[1] for a in E.ABLATIONS])
    t.add_argument("--resume", metavar="WEIGHTS", help="start from an existing weight file")
    config_flags(t)
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="evaluate a weight file on a dataset")
    e.add_argument("--data", required=True)
    e.add_argument("--weights", required=True)
    e.add_argument("--out", required=True)
    e.set_defaults(func=cmd_eval)

    i = sub.add_parser("infer", help="density map and count for one image")
    i.add_argument("--image", required=True)
    i.add_argument("--weights", required=True)
    i.add_argument("--out", required=True)
    i.set_defaults(func=cmd_infer)

    r = sub.add_parser("render", help="density file -> 8-bit PGM heatmap")
    r.add_argument("--density", required=True)
    r.add_argument("--out", required=True)
    r.set_defaults(func=cmd_render)

    g = sub.add_parser("gradcheck", help="finite-difference gradient checks")
    g.add_argument("--level", choices=("ops", "model"), default="ops")
    g.add_argument("--seed", type=int, default=0)
    g.set_defaults(func=cmd_gradcheck)

    a = sub.add_parser("ablate", help="train and compare the four ablation configurations")
    a.add_argument("--data", required=True)
    a.add_argument("--out", required=True)
    a.add_argument("--test-fraction", type=float, default=0.2)
    config_flags(a)
    a.set_defaults(func=cmd_ablate)
    return p


def _thread_limit(n):
    if n is None:
        return nullcontext()
    if n < 1:
        raise ConfigurationError("--threads must be >= 1")
    from threadpoolctl import threadpool_limits

    return threadpool_limits(limits=n)


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        with _thread_limit(args.threads):
            return args.func(args)
    except ConfigurationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NumericError as exc:
        print(f"numeric error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (IADCCNError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
