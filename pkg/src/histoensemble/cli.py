"""Command-line entry point: scan, extract, run, report, predict.

Exit codes: 0 success, 2 config error, 3 data error, 4 model error,
5 internal error. ``HISTOENS_CACHE_DIR`` overrides the feature cache root.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

from .data import PRESET_LABEL_MAPS, LabelMap, PreprocessConfig, iter_samples, load_manifest, save_manifest, \
    scan_dataset, write_skip_report
from .errors import ConfigError, HistoEnsembleError
from .experiment import CACHE_ENV, load_config, load_result, predict_single, run_experiment
from .features import BACKBONE_IDS, BackboneSpec, cache_features, extract_features, extraction_hash

log = logging.getLogger("histoensemble")


def _label_map(value: str) -> LabelMap:
    if value in PRESET_LABEL_MAPS:
        return PRESET_LABEL_MAPS[value]
    names = [v.strip() for v in value.split(",") if v.strip()]
    if not names:
        raise ConfigError(f"cannot parse label map {value!r}")
    return LabelMap.from_names(names)


def cmd_scan(args) -> int:
    manifest = scan_dataset(args.root, _label_map(args.labels), verify=not args.no_verify)
    save_manifest(manifest, args.out)
    skip = args.skip_report or str(Path(args.out).with_suffix(".skipped.jsonl"))
    write_skip_report(manifest, skip)
    print(json.dumps({"manifest": str(args.out), "n": len(manifest), "class_counts": manifest.class_counts,
                      "dataset_id": manifest.dataset_id, "skipped": len(manifest.skipped)}))
    return 0


def cmd_extract(args) -> int:
    manifest = load_manifest(args.manifest, root=args.root)
    spec = BackboneSpec(args.backbone, args.model_path, normalize=args.normalize)
    pre = PreprocessConfig(channel_order=args.channel_order)
    fm = extract_features(spec, iter_samples(manifest, pre), args.batch_size,
                          dataset_id=manifest.dataset_id, preprocess_hash=extraction_hash(pre, spec, manifest.content_digest))
    cache_dir = os.environ.get(CACHE_ENV) or args.cache_dir
    key = cache_features(fm, cache_dir)
    print(json.dumps({"cache_dir": str(cache_dir), "key": list(key), "shape": list(fm.shape)}))
    return 0


def cmd_run(args) -> int:
    config = load_config(args.config)
    if args.output_dir:
        config.output_dir = args.output_dir
    result = run_experiment(config)
    if not args.no_report:
        from .report import emit_report

        # render from the persisted result so `histoens report` reproduces it byte for byte
        emit_report(load_result(config.output_dir), Path(config.output_dir) / "report")
    print(json.dumps({"output_dir": config.output_dir, "chosen_backbone": result.chosen_backbone,
                      "chosen_mode": result.chosen_mode, "selection": result.selection.selected,
                      "accuracy": result.final_metrics.accuracy}))
    return 0


def cmd_report(args) -> int:
    from .report import emit_report

    result = load_result(args.result_dir)
    out = args.out or str(Path(args.result_dir) / "report")
    files = emit_report(result, out)
    print(json.dumps({"report_dir": out, "files": files}))
    return 0


def cmd_predict(args) -> int:
    name, probs, elapsed = predict_single(args.bundle, args.image)
    from .experiment import load_bundle

    label_map = load_bundle(args.bundle)[2]
    print(json.dumps({"image": str(args.image), "class_name": name,
                      "probabilities": {n: float(p) for n, p in zip(label_map.names, probs)},
                      "elapsed_seconds": elapsed}))
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="histoens", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("scan", help="inventory a class-per-directory image tree")
    s.add_argument("root")
    s.add_argument("--labels", default="lung", help="preset (lung, colon, lung_colon) or comma-separated names")
    s.add_argument("--out", default="manifest.json")
    s.add_argument("--skip-report")
    s.add_argument("--no-verify", action="store_true", help="do not open files to check they decode")
    s.set_defaults(func=cmd_scan)

    e = sub.add_parser("extract", help="extract and cache deep features for a manifest")
    e.add_argument("--manifest", required=True)
    e.add_argument("--root", help="dataset root, if it moved since scanning")
    e.add_argument("--backbone", choices=BACKBONE_IDS, default="mock")
    e.add_argument("--model-path")
    e.add_argument("--normalize", action="store_true", help="apply the backbone's ImageNet normalization")
    e.add_argument("--channel-order", choices=("BGR", "RGB"), default="BGR")
    e.add_argument("--batch-size", type=int, default=32)
    e.add_argument("--cache-dir", default="cache")
    e.set_defaults(func=cmd_extract)

    r = sub.add_parser("run", help="run the full experiment from a YAML config")
    r.add_argument("config")
    r.add_argument("--output-dir")
    r.add_argument("--no-report", action="store_true")
    r.set_defaults(func=cmd_run)

    rep = sub.add_parser("report", help="render tables and plots from a result directory")
    rep.add_argument("result_dir")
    rep.add_argument("--out")
    rep.set_defaults(func=cmd_report)

    pr = sub.add_parser("predict", help="classify one image with a saved bundle")
    pr.add_argument("bundle")
    pr.add_argument("image")
    pr.set_defaults(func=cmd_predict)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        return args.func(args)
    except HistoEnsembleError as e:
        print(f"error: {e}", file=sys.stderr)
        return e.exit_code
    except Exception as e:  # noqa: BLE001
        log.exception("internal error")
        print(f"internal error: {type(e).__name__}: {e}", file=sys.stderr)
        return 5


if __name__ == "__main__":
    sys.exit(main())
