"""Command line entry point.

Subcommands select the last pipeline stage to run (dependencies are pulled
in automatically); ``all`` runs everything or an explicit ``--stages`` list.
"""

from __future__ import annotations

import argparse
import dataclasses
import logging
import sys

from .config import ConfigError, RunConfig, parse_config
from .geometry import default_desk_config
from .pipeline import STAGE_ORDER, run_pipeline

log = logging.getLogger("mchom")


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="mchom",
        description="Two-continuum upscaling on shrinking perforated domains",
    )
    parser.add_argument("--config", help="TOML run configuration file")
    parser.add_argument("--out", help="output directory (overrides config)")
    parser.add_argument("--threads", type=int, default=1,
                        help="worker processes for the cell solves")
    parser.add_argument("--h", type=int, dest="fine_cells", metavar="N",
                        help="override fine cells per side (custom preset only)")
    parser.add_argument("--H", type=int, dest="coarse", metavar="NB",
                        help="override coarse blocks per side")
    parser.add_argument("--layers", type=int, help="override oversampling layers")
    parser.add_argument("--force", action="store_true",
                        help="ignore cached stages")
    parser.add_argument("--svg", action="store_true",
                        help="also write SVG heatmaps")
    parser.add_argument("--dump-coeffs", action="store_true",
                        help="write per-(block, level) coefficient CSV files")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in STAGE_ORDER:
        sub.add_parser(name, help=f"run pipeline through the {name} stage")
    allp = sub.add_parser("all", help="run the whole pipeline")
    allp.add_argument("--stages", help="comma-separated stage subset")
    return parser


def _apply_overrides(cfg: RunConfig, args) -> RunConfig:
    updates = {}
    if args.coarse is not None:
        updates["coarse"] = args.coarse
    if args.layers is not None:
        updates["layers"] = args.layers
    if args.out is not None:
        updates["output_dir"] = args.out
    if args.fine_cells is not None:
        if cfg.geometry_preset != "custom":
            raise ConfigError(
                "--h override needs an explicit [geometry] section "
                "(the desk preset fixes 240 cells)"
            )
        updates["geometry"] = dataclasses.replace(
            cfg.geometry, n_cells=args.fine_cells
        )
    return dataclasses.replace(cfg, **updates) if updates else cfg


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        if args.config:
            cfg = parse_config(args.config)
        else:
            cfg = RunConfig(geometry=default_desk_config())
        cfg = _apply_overrides(cfg, args)
        cfg.validate()
    except ConfigError as exc:
        log.error("%s", exc)
        return 2

    if args.command == "all":
        stages = None
        if getattr(args, "stages", None):
            stages = [s.strip() for s in args.stages.split(",") if s.strip()]
    else:
        stages = [args.command]

    result = run_pipeline(
        cfg,
        stages=stages,
        out_dir=args.out,
        threads=args.threads,
        force=args.force,
        emit_svg=args.svg,
        dump_coeffs_per_block=args.dump_coeffs,
    )
    if result.status == 0:
        log.info("done; artifacts in %s", result.out_dir)
    else:
        log.error("pipeline failed: %s", result.manifest.get("failure"))
    return result.status


if __name__ == "__main__":
    sys.exit(main())
