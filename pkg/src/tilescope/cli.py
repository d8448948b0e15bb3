"""Command-line surface for the whole pipeline.

Every command is a thin wrapper over the library modules. All randomness
flows from --seed; --threads 1 (the default) caps the BLAS thread pools
before NumPy loads so repeated runs are byte-identical.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        # Single-line diagnostic, exit code 2.
        self.exit(2, f"{self.prog}: error: {message}\n")


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--seed", type=int, default=0, help="base seed for all randomness")
    p.add_argument("--threads", type=int, default=1, help="compute threads (1 = bit-reproducible)")
    p.add_argument("--out", required=True, help="output file or directory")


def _scales_arg(value: str) -> tuple:
    scales = tuple(s.strip() for s in value.split(",") if s.strip())
    for s in scales:
        if s not in ("25x", "100x", "400x"):
            raise argparse.ArgumentTypeError(f"unknown scale {s!r}")
    return scales


def build_parser() -> _Parser:
    parser = _Parser(prog="tilescope", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate", help="generate synthetic slide pyramids")
    _add_common(p)
    p.add_argument("--width", type=int, default=2304)
    p.add_argument("--height", type=int, default=1728)
    p.add_argument("--regions-per-class", type=int, default=2)
    p.add_argument("--cell", type=int, default=576)
    p.add_argument("--patients", type=int, default=1)
    p.add_argument("--slides-per-patient", type=int, default=1)
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("extract", help="extract co-centered tiles into an archive")
    _add_common(p)
    p.add_argument("--pyramid", required=True, help="pyramid directory (with regions.txt)")
    p.add_argument("--stride", type=int, default=128)
    p.add_argument("--scales", type=_scales_arg, default=("25x", "100x", "400x"))
    p.add_argument("--pad", type=int, default=255)
    p.set_defaults(func=cmd_extract)

    p = sub.add_parser("build-dataset", help="patient split + balancing -> manifest")
    _add_common(p)
    p.add_argument("--archives", required=True, help="comma-separated tile archives")
    p.add_argument("--test-patients", required=True, help="comma-separated patient ids")
    p.set_defaults(func=cmd_build_dataset)

    p = sub.add_parser("train", help="train one model configuration")
    _add_common(p)
    p.add_argument("--manifest", required=True)
    p.add_argument("--arch", required=True, choices=("MONO", "DI", "TRI"))
    p.add_argument("--fc", type=int, required=True)
    p.add_argument("--dropout", type=float, required=True)
    p.add_argument("--branch", default="small", choices=("vgg16_shape", "small"))
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--momentum", type=float, default=0.9)
    p.add_argument("--batch", type=int, default=32)
    p.add_argument("--patience", type=int, default=30)
    p.add_argument("--max-epochs", type=int, default=200)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("gridsearch", help="run the hyperparameter grid")
    _add_common(p)
    p.add_argument("--manifest", required=True)
    p.add_argument("--archs", default="MONO,DI,TRI")
    p.add_argument("--runs", type=int, default=3)
    p.add_argument("--branch", default="small", choices=("vgg16_shape", "small"))
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--batch", type=int, default=32)
    p.add_argument("--patience", type=int, default=30)
    p.add_argument("--max-epochs", type=int, default=200)
    p.set_defaults(func=cmd_gridsearch)

    p = sub.add_parser("evaluate", help="evaluate a trained model on the test split")
    _add_common(p)
    p.add_argument("--model", required=True, help="directory written by train")
    p.add_argument("--manifest", required=True)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("count-params", help="print trainable/total parameter counts")
    p.add_argument("--arch", required=True, choices=("MONO", "DI", "TRI"))
    p.add_argument("--fc", type=int, required=True)
    p.add_argument("--branch", default="vgg16_shape", choices=("vgg16_shape", "small"))
    p.set_defaults(func=cmd_count_params)

    p = sub.add_parser("classify-slide", help="write a slide-level ROI class map")
    _add_common(p)
    p.add_argument("--pyramid", required=True)
    p.add_argument("--model", required=True)
    p.add_argument("--stride", type=int, default=128)
    p.add_argument("--pad", type=int, default=255)
    p.add_argument("--cell-px", type=int, default=4, help="rendered pixels per map cell")
    p.set_defaults(func=cmd_classify_slide)

    return parser


def _check_grid_values(parser_args, fc=None, rate=None):
    from .model import DROPOUT_GRID, FC_GRID
    if fc is not None and fc not in FC_GRID:
        _fail_usage(f"invalid --fc {fc}: must be one of {', '.join(str(v) for v in FC_GRID)}")
    if rate is not None and rate not in DROPOUT_GRID:
        _fail_usage(f"invalid --dropout {rate}: must be one of 0, 0.3, 0.5")


def _fail_usage(message: str):
    sys.stderr.write(f"tilescope: error: {message}\n")
    raise SystemExit(2)


def cmd_generate(args) -> int:
    from .pyramid import SyntheticSpec, generate_synthetic, save_annotations, save_pyramid
    import numpy as np

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for p in range(args.patients):
        for s in range(args.slides_per_patient):
            ss = np.random.SeedSequence([args.seed, 0x571DE, p, s])
            spec = SyntheticSpec(
                seed=int(ss.generate_state(1, dtype=np.uint64)[0]),
                base_width=args.width,
                base_height=args.height,
                regions_per_class=args.regions_per_class,
                region_cell=args.cell,
                slide_id=f"S{p:02d}_{s}",
                patient_id=f"P{p:02d}",
            )
            pyramid, annotations = generate_synthetic(spec)
            slide_dir = out / pyramid.slide_id
            save_pyramid(pyramid, slide_dir)
            save_annotations(annotations, slide_dir / "regions.txt")
            print(f"wrote {slide_dir} ({len(annotations)} regions)")
    return 0


def cmd_extract(args) -> int:
    from .pyramid import load_annotations, load_pyramid
    from .tiling import ExtractionPlan, extract_triplet, plan_centers, save_archive

    pyramid = load_pyramid(args.pyramid)
    annotations = load_annotations(Path(args.pyramid) / "regions.txt", pyramid.slide_id)
    plan = ExtractionPlan(stride=args.stride, scales=args.scales, pad_value=args.pad)
    triplets = []
    for region in annotations:
        for center in plan_centers(region, plan):
            triplets.append(extract_triplet(pyramid, center, region.label, plan.scales, plan.pad_value))
    save_archive(triplets, args.out)
    print(f"wrote {args.out} ({len(triplets)} tiles)")
    return 0


def cmd_build_dataset(args) -> int:
    from .dataset import TileRef, build_dataset, save_manifest
    from .tiling import TileArchive

    refs = []
    for archive_path in args.archives.split(","):
        arc = TileArchive(archive_path)
        for i in range(len(arc)):
            refs.append(TileRef(archive=archive_path, index=i,
                                label=arc.label(i), patient_id=arc.patient_id(i)))
    test_patients = {p.strip() for p in args.test_patients.split(",") if p.strip()}
    split = build_dataset(refs, test_patients, seed=args.seed)
    save_manifest(split, args.out)
    counts = split.class_counts("train")
    print(f"wrote {args.out}: train={len(split.train)} val={len(split.val)} "
          f"test={len(split.test)} (train counts {dict(counts)})")
    return 0


def _load_train_data(manifest_path: str, scales: tuple):
    from .dataset import load_manifest
    from .pipeline import materialize_dataset

    split = load_manifest(manifest_path)
    return materialize_dataset(split, scales)


def cmd_train(args) -> int:
    from .evaluation import write_metrics_csv
    from .model import ARCH_SCALES, ModelConfig
    from .training import TrainHyper, train

    _check_grid_values(args, fc=args.fc, rate=args.dropout)
    config = ModelConfig(args.arch, args.fc, args.dropout, args.branch, args.seed)
    data = _load_train_data(args.manifest, ARCH_SCALES[args.arch])
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    hyper = TrainHyper(
        learning_rate=args.lr, momentum=args.momentum, batch_size=args.batch,
        patience=args.patience, max_epochs=args.max_epochs,
        log_path=str(out / "runlog.csv"),
    )
    record = train(config, data, hyper, run_seed=args.seed)
    _save_model_dir(out, config, record)
    if record.test_report is not None:
        write_metrics_csv(record.test_report, out / "metrics.csv")
    test_f1 = record.test_report.macro_f1_mean if record.test_report else float("nan")
    print(f"best epoch {record.best_epoch} val loss {record.best_val_loss:.6f} "
          f"test macro F1 {test_f1:.4f}")
    return 0


def _save_model_dir(out: Path, config, record) -> None:
    from .model import build_model
    from .nn import save_weights

    bundle = build_model(config)
    for name, arr in record.final_head.items():
        bundle.weights.arrays[name] = arr
    save_weights(bundle.weights, out / "weights.tswt")
    (out / "config.json").write_text(json.dumps({
        "arch": config.arch,
        "fc_neurons": config.fc_neurons,
        "dropout": config.dropout,
        "branch": config.branch,
        "seed": config.seed,
    }, indent=2) + "\n")


def _load_model_dir(model_dir: str):
    from .model import ModelConfig, build_model
    from .nn import load_weights

    cfg = json.loads((Path(model_dir) / "config.json").read_text())
    config = ModelConfig(cfg["arch"], cfg["fc_neurons"], cfg["dropout"], cfg["branch"], cfg["seed"])
    bundle = build_model(config)
    stored = load_weights(Path(model_dir) / "weights.tswt")
    for name in bundle.weights.names:
        bundle.weights.arrays[name] = stored.arrays[name]
    return bundle


def cmd_gridsearch(args) -> int:
    from .training import GridSpec, TrainHyper, run_grid

    archs = tuple(a.strip() for a in args.archs.split(",") if a.strip())
    for a in archs:
        if a not in ("MONO", "DI", "TRI"):
            _fail_usage(f"invalid --archs entry {a!r}")
    grid = GridSpec(architectures=archs, runs_per_config=args.runs,
                    base_seed=args.seed, branch=args.branch)
    scales = ("25x", "100x", "400x") if "TRI" in archs else (
        ("100x", "400x") if "DI" in archs else ("400x",))
    data = _load_train_data(args.manifest, scales)
    hyper = TrainHyper(learning_rate=args.lr, batch_size=args.batch,
                       patience=args.patience, max_epochs=args.max_epochs)
    result = run_grid(grid, data, hyper)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    lines = ["arch,fc,dropout,runs,val_macro_mean,val_macro_std,test_f1_mean,test_f1_std"]
    for s in result.summaries:
        lines.append(f"{s.config.arch},{s.config.fc_neurons},{s.config.dropout},{s.runs},"
                     f"{s.val_macro_mean:.6f},{s.val_macro_std:.6f},"
                     f"{s.test_f1_mean:.6f},{s.test_f1_std:.6f}")
    (out / "summary.csv").write_text("\n".join(lines) + "\n")
    best_lines = ["arch,fc,dropout,val_macro_mean"]
    for arch in sorted(result.best_per_arch):
        s = result.best_per_arch[arch]
        best_lines.append(f"{arch},{s.config.fc_neurons},{s.config.dropout},{s.val_macro_mean:.6f}")
    (out / "best.csv").write_text("\n".join(best_lines) + "\n")
    print(f"wrote {out / 'summary.csv'} ({len(result.records)} runs)")
    return 0


def cmd_evaluate(args) -> int:
    from .evaluation import confusion, report_from_confusion, write_metrics_csv
    from .training import split_features
    from .model import head_probs

    bundle = _load_model_dir(args.model)
    data = _load_train_data(args.manifest, bundle.config.scales)
    feats, labels = split_features(bundle, data.test)
    probs = head_probs(bundle, feats)
    report = report_from_confusion(confusion(labels, probs.argmax(axis=1)))
    write_metrics_csv(report, args.out)
    print(f"test macro F1 {report.macro_f1_mean:.4f} -> {args.out}")
    return 0


def cmd_count_params(args) -> int:
    from .model import ModelConfig, count_params, format_param_counts

    _check_grid_values(args, fc=args.fc)
    config = ModelConfig(args.arch, args.fc, 0.0, args.branch, 0)
    trainable, total = count_params(config)
    print(f"{trainable} trainable / {total} total ({format_param_counts(trainable, total)})")
    return 0


def cmd_classify_slide(args) -> int:
    from PIL import Image

    import numpy as np

    from .pipeline import class_map_text, classify_slide, render_class_map
    from .pyramid import load_pyramid

    bundle = _load_model_dir(args.model)
    pyramid = load_pyramid(args.pyramid)
    cmap = classify_slide(bundle, pyramid, stride=args.stride, pad_value=args.pad)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    Image.fromarray(render_class_map(cmap, cell_px=args.cell_px)).save(out / "map.png")
    (out / "labels.txt").write_text(class_map_text(cmap))
    np.save(out / "probs.npy", cmap.probs)
    print(f"wrote {out} (grid {cmap.labels.shape[1]}x{cmap.labels.shape[0]})")
    return 0


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    threads = getattr(args, "threads", 1)
    for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
        os.environ.setdefault(var, str(threads))
    from .errors import TileScopeError

    try:
        return args.func(args)
    except TileScopeError as exc:
        sys.stderr.write(f"tilescope: error: {exc}\n")
        return 1
    except FileNotFoundError as exc:
        sys.stderr.write(f"tilescope: error: missing file: {exc}\n")
        return 1


if __name__ == "__main__":
    sys.exit(main())
