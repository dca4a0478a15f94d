"""Command-line entry points for the pipeline stages and the labelling
service. Flags override the config file, which overrides defaults."""

import argparse
import json
import logging
import os
import sys

from . import pipeline, service
from .config import PipelineConfig, apply_settings, load_config

log = logging.getLogger(__name__)


def _default_out():
    return os.environ.get("SAF_LAB_DATA", "./saflab_data")


def _add_common(p):
    p.add_argument("--out", "-o", default=_default_out(),
                   help="output directory (default $SAF_LAB_DATA or "
                        "./saflab_data)")
    p.add_argument("--config", help="key=value config file")
    p.add_argument("--seed", type=int)
    p.add_argument("--n-sequences", type=int)
    p.add_argument("--n-frames", type=int)
    p.add_argument("--n-classes", type=int)
    p.add_argument("--overlap-probability", type=float)
    p.add_argument("--absent-class-fraction", type=float)
    p.add_argument("--motion-px", type=float)
    p.add_argument("--grid", type=int, help="grid squares per side")
    p.add_argument("--eps-c", type=float)
    p.add_argument("--n-km", type=int)
    p.add_argument("--weak-mode", choices=["frame_wise", "sequence_wise"])
    p.add_argument("--label-mode", choices=["auto", "human"])
    p.add_argument("--sigma-px", type=float)
    p.add_argument("--boundary-iters", type=int)
    p.add_argument("--field-source", choices=["gt", "noisy_oracle",
                                              "external"])
    p.add_argument("--flow-source", choices=["gt", "block_match"])
    p.add_argument("--feat-epochs", type=int)
    p.add_argument("--cls-epochs", type=int)


def build_config(args):
    cfg = load_config(args.config) if args.config else PipelineConfig()
    top = {}
    sim = {}
    grid = {}
    feat = {}
    cls_ = {}
    for key, target, name in [
            ("seed", top, "seed"),
            ("n_sequences", top, "n_sequences"),
            ("weak_mode", top, "weak_mode"),
            ("label_mode", top, "label_mode"),
            ("sigma_px", top, "sigma_px"),
            ("boundary_iters", top, "boundary_iters"),
            ("field_source", top, "field_source"),
            ("flow_source", top, "flow_source"),
            ("n_km", top, "n_km"),
            ("n_frames", sim, "n_frames"),
            ("n_classes", sim, "n_classes"),
            ("overlap_probability", sim, "overlap_probability"),
            ("absent_class_fraction", sim, "absent_class_fraction"),
            ("motion_px", sim, "motion_px_per_frame"),
            ("grid", grid, "grid_squares_per_side"),
            ("eps_c", grid, "eps_c"),
            ("feat_epochs", feat, "epochs"),
            ("cls_epochs", cls_, "epochs"),
    ]:
        value = getattr(args, key, None)
        if value is not None:
            target[name] = value
    apply_settings(cfg, {"": top, "sim": sim, "grid": grid,
                         "feat": feat, "cls": cls_})
    cfg.validate()
    return cfg


_STAGE_VERBS = {
    "simulate": [pipeline.stage_simulate],
    "instantiate": [pipeline.stage_fields, pipeline.stage_instantiate],
    "track": [pipeline.stage_track],
    "features": [pipeline.stage_features],
    "prototypes": [pipeline.stage_prototypes],
    "teach": [pipeline.stage_teach],
    "match": [pipeline.stage_match],
    "student": [pipeline.stage_student],
    "eval": [pipeline.stage_eval],
}


def _parse_int_list(text):
    return [int(v) for v in text.split(",") if v.strip()]


def _parse_float_list(text):
    return [float(v) for v in text.split(",") if v.strip()]


def main(argv=None):
    logging.basicConfig(level=logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s")
    parser = argparse.ArgumentParser(
        prog="saflab",
        description="Synthetic bench for mask-to-instance segmentation with "
                    "weak-label classification.")
    sub = parser.add_subparsers(dest="verb", required=True)

    for verb in [*_STAGE_VERBS, "run"]:
        p = sub.add_parser(verb)
        _add_common(p)

    p = sub.add_parser("serve-labels",
                       help="serve the prototype labelling session over HTTP")
    _add_common(p)
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--port", type=int, default=8433)
    p.add_argument("--static-dir",
                   help="directory with the browser frontend bundle")
    p.add_argument("--keep-open", action="store_true",
                   help="stay up after the last prototype is labelled")

    p = sub.add_parser("sweep", help="grid x eps_c ablation table (AP@0.5)")
    _add_common(p)
    p.add_argument("--grids", default="8,16,32,64,128",
                   help="comma-separated grid resolutions")
    p.add_argument("--eps-list", default="1,3,5,7,10",
                   help="comma-separated eps_c thresholds")

    args = parser.parse_args(argv)

    try:
        cfg = build_config(args)
        if args.verb in _STAGE_VERBS:
            result = None
            for fn in _STAGE_VERBS[args.verb]:
                result = fn(cfg, args.out)
        elif args.verb == "run":
            result = pipeline.run_pipeline(cfg, args.out)
        elif args.verb == "serve-labels":
            result = service.serve_labelling(
                args.out, cfg.class_names, args.host, args.port,
                static_dir=args.static_dir,
                exit_when_done=not args.keep_open)
        elif args.verb == "sweep":
            result = pipeline.run_sweep(cfg, args.out,
                                        _parse_int_list(args.grids),
                                        _parse_float_list(args.eps_list))
        else:  # pragma: no cover - argparse enforces the verb set
            parser.error("unknown verb %r" % args.verb)
    except pipeline.StageError as exc:
        log.error("%s", exc)
        return 1
    except (ValueError, FileNotFoundError, RuntimeError) as exc:
        log.error("%s", exc)
        return 1

    json.dump(result, sys.stdout, sort_keys=True, indent=2, default=str)
    sys.stdout.write("\n")
    return 0


if __name__ == "__main__":
    sys.exit(main())
