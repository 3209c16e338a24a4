"""scenekit command line: make-synthetic, fit, render, mesh, eval-depth, prep-dsm."""
import argparse
import json
import logging
import math
import os
import re
import sys
from dataclasses import replace
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np
from PIL import Image

import autodiff
import field as fld
import geodata
import meshing
import metrics
import renderer
import synth
from cameras import Orthographic, Perspective, camera_from_dict, pose_from_dict
from config import Config, load_config, save_config
from errors import ConfigError, GeoDataError, SceneKitError

logger = logging.getLogger("scenekit")

LOG_FORMAT = "%(asctime)s %(levelname)s %(name)s: %(message)s"
SURROUND_YAWS_DEG = (0.0, 90.0, 180.0, 270.0)
SURROUND_FOV_DEG = 120.0


def setup_logging(level: str) -> None:
    logging.basicConfig(level=getattr(logging, level.upper(), logging.INFO), format=LOG_FORMAT, force=True)


def _save_png(image: np.ndarray, path: Path) -> None:
    Image.fromarray(np.round(np.clip(image, 0.0, 1.0) * 255).astype(np.uint8)).save(path)


def _push_report(args, kind: str, name: str, cfg: Config, report: Dict) -> None:
    if not args.registry_table:
        return
    from utils_bq import RunRegistry

    registry = RunRegistry(table_id=args.registry_table, key_path=args.registry_key)
    run_id = registry.save_run(name, kind, cfg.to_dict(), report, args.user_email)
    logger.info("Registered %s run %s as %d", kind, name, run_id)


# ============= Commands =============
def cmd_make_synthetic(args, cfg: Config) -> int:
    spec = synth.load_scene_spec(args.spec) if args.spec else synth.city_block_spec()
    rig = synth.default_rig(spec, sat_size=args.sat_size, pano_size=tuple(args.pano_size))
    seed = cfg.fit.seed if args.seed is None else args.seed
    train, holdout = synth.generate_supervision(spec, rig, seed=seed, n_samples=args.n_samples, threads=args.threads)
    manifest = synth.save_view_set(train, holdout, args.out_dir, spec)
    synth.save_scene_spec(spec, Path(args.out_dir) / "scene.json")
    logger.info("Supervision set written to %s", manifest)
    return 0


def cmd_fit(args, cfg: Config) -> int:
    data_dir = args.data_dir or cfg.paths.data_dir
    if data_dir is None:
        raise ConfigError("fit needs --data-dir or paths.data_dir")
    train, holdout = synth.load_view_set(data_dir)
    if args.seed is not None:
        cfg = replace(cfg, fit=replace(cfg.fit, seed=args.seed))
    fit_cfg = cfg.fit
    out = Path(args.out or cfg.paths.checkpoint or Path(cfg.paths.out_dir) / "field.tpf")
    out.parent.mkdir(parents=True, exist_ok=True)
    log_path = args.log or cfg.paths.log or out.with_suffix(".log.jsonl")
    result = autodiff.fit_scene(train, fit_cfg, extent=cfg.extent, field_cfg=cfg.field, holdout=holdout,
                                log_path=log_path, checkpoint_dir=out.parent / "checkpoints")
    fld.save_checkpoint(result.field, out)
    save_config(cfg, out.with_suffix(".config.json"))
    report = {"iterations": fit_cfg.iterations, "final_total": result.log[-1]["total"]}
    if holdout:
        report["holdout_psnr"] = float(np.mean(autodiff.evaluate_views(result.field, holdout, cfg.march,
                                                                       threads=args.threads)))
    logger.info("Fit done: %s", report)
    _push_report(args, "fit", out.stem, cfg, report)
    return 0


def _load_trajectory(path: str) -> List[Dict]:
    data = json.loads(Path(path).read_text())
    poses = data["poses"] if isinstance(data, dict) else data
    if not poses:
        raise ConfigError(f"Trajectory {path} holds no poses")
    return poses


def _render_frames(field: fld.TriPlaneField, cameras: Sequence, w: np.ndarray, cfg: Config, out_dir: Path,
                   prefix: str, threads: Optional[int]) -> List[np.ndarray]:
    frames = []
    for i, camera in enumerate(cameras):
        out = renderer.render_view(field, field.sky, camera, w, cfg.march, threads=threads)
        _save_png(out.rgb, out_dir / f"{prefix}_{i:04d}.png")
        np.save(out_dir / f"{prefix}_{i:04d}.depth.npy", out.depth.astype(np.float32))
        frames.append(out.rgb)
    return frames


def cmd_render(args, cfg: Config) -> int:
    field = fld.load_checkpoint(args.checkpoint)
    if not 0 <= args.code_index < field.codes.shape[0]:
        raise ConfigError(f"code index {args.code_index} outside [0, {field.codes.shape[0]})")
    w = field.code(args.code_index)
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    if args.trajectory:
        size = tuple(args.size)
        frames = []
        for i, rec in enumerate(_load_trajectory(args.trajectory)):
            pose = pose_from_dict(rec)
            if args.surround:
                cams = [Perspective(replace(pose, yaw=pose.yaw + math.radians(y)), SURROUND_FOV_DEG, *size)
                        for y in SURROUND_YAWS_DEG]
                views = _render_frames(field, cams, w, cfg, out_dir, f"frame_{i:04d}_view", args.threads)
                frames.append(np.concatenate(views, axis=1))
            else:
                cam = Perspective(pose, float(rec.get("fov_deg", 90.0)), *size)
                frames.extend(_render_frames(field, [cam], w, cfg, out_dir, f"frame_{i:04d}", args.threads))
        if args.gif:
            images = [Image.fromarray(np.round(np.clip(f, 0, 1) * 255).astype(np.uint8)) for f in frames]
            images[0].save(out_dir / "trajectory.gif", save_all=True, append_images=images[1:],
                           duration=int(1000 / args.fps), loop=0)
        logger.info("Rendered %d trajectory frames into %s", len(frames), out_dir)
        return 0

    if not args.camera:
        raise ConfigError("render needs --camera or --trajectory")
    specs = json.loads(Path(args.camera).read_text())
    cameras = [camera_from_dict(c) for c in (specs if isinstance(specs, list) else [specs])]
    for i, camera in enumerate(cameras):
        if isinstance(camera, Orthographic):
            height = renderer.render_height(field, field.sky, camera, w, cfg.march, threads=args.threads)
            geodata.save_grid(height, out_dir / f"view_{i:02d}.height.tif")
        _render_frames(field, [camera], w, cfg, out_dir, f"view_{i:02d}", args.threads)
    return 0


_TILE_NAME = re.compile(r"tile_(\d+)_(\d+)\.tpf$")


def _load_tiles(tile_dir: Path) -> List[List[fld.TriPlaneField]]:
    found = {}
    for path in sorted(tile_dir.glob("tile_*_*.tpf")):
        m = _TILE_NAME.search(path.name)
        if m:
            found[(int(m.group(1)), int(m.group(2)))] = fld.load_checkpoint(path)
    if not found:
        raise ConfigError(f"No tile_<row>_<col>.tpf checkpoints in {tile_dir}")
    rows = max(r for r, _ in found) + 1
    cols = max(c for _, c in found) + 1
    try:
        return [[found[(r, c)] for c in range(cols)] for r in range(rows)]
    except KeyError as e:
        raise ConfigError(f"Tile lattice in {tile_dir} is missing tile {e.args[0]}") from e


def cmd_mesh(args, cfg: Config) -> int:
    mcfg = replace(cfg.mesh, **{k: v for k, v in (("tau", args.tau), ("res", args.res)) if v is not None})
    mcfg.validate()
    if args.tiles:
        tiles = _load_tiles(Path(args.tiles))
        grid = meshing.stitch_tiles(tiles, mcfg.res, code_index=args.code_index, overlap=mcfg.overlap,
                                    chunk_size=mcfg.chunk_size, progress=True)
    else:
        tiles = None
        if not args.checkpoint:
            raise ConfigError("mesh needs --checkpoint or --tiles")
        color_source = fld.load_checkpoint(args.checkpoint)
        grid = meshing.eval_density_grid(color_source, color_source.code(args.code_index), mcfg.res,
                                         chunk_size=mcfg.chunk_size, progress=True)
    if args.dump_grid:
        meshing.save_density_grid(grid, args.dump_grid)
    mesh = meshing.marching_cubes(grid, mcfg.tau)
    if tiles is not None:
        mesh = _colorize_tiles(mesh, tiles, args.code_index)
    else:
        mesh = meshing.colorize(mesh, color_source, color_source.code(args.code_index))
    meshing.export_mesh(mesh, args.out)
    logger.info("Mesh summary: %s", meshing.mesh_summary(mesh))
    return 0


def _colorize_tiles(mesh: meshing.Mesh, tiles, code_index: int) -> meshing.Mesh:
    """Color each vertex from the tile whose center is nearest."""
    if mesh.is_empty:
        return meshing.colorize(mesh, tiles[0][0], tiles[0][0].code(code_index))
    flat = [t for row in tiles for t in row]
    centers = np.array([t.extent.cube_center[:2] for t in flat])
    nearest = np.argmin(((mesh.vertices[:, None, :2] - centers[None]) ** 2).sum(-1), axis=1)
    colors = np.zeros((len(mesh.vertices), 3))
    for k, tile in enumerate(flat):
        sel = nearest == k
        if sel.any():
            colors[sel] = fld.color_at(tile, mesh.vertices[sel], tile.code(code_index))
    return meshing.Mesh(mesh.vertices, mesh.faces, colors)


def cmd_eval_depth(args, cfg: Config) -> int:
    pred = geodata.load_grid(args.pred)
    gt = geodata.load_grid(args.gt)
    result = metrics.depth_metrics(pred, gt, align=args.align)
    record = result.to_dict()
    print(json.dumps(record, sort_keys=True))
    if args.report:
        metrics.write_report(result, args.report)
    _push_report(args, "eval-depth", Path(args.pred).stem, cfg, record)
    return 0


def cmd_prep_dsm(args, cfg: Config) -> int:
    image_dir, tile_dir = Path(args.image_dir), Path(args.tile_dir)
    images = []
    for path in sorted(image_dir.glob("*.png")):
        with Image.open(path) as im:
            width, height = im.size
        try:
            images.append(geodata.parse_image_name(path, width, height))
        except GeoDataError as e:
            logger.warning("Skipping %s: %s", path.name, e)
    tiles = sorted(p for p in tile_dir.iterdir() if p.suffix.lower() in (".tif", ".tiff", ".asc"))
    out_dir = Path(args.out_dir or image_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    results = geodata.prepare_dsm(images, tiles, out_dir, threshold_pct=args.threshold, mosaic=args.mosaic,
                                  default_tile_crs=args.tile_crs, default_tile_units=args.tile_units,
                                  progress=True)
    geodata.write_manifest(results, out_dir / "dsm_manifest.csv")
    accepted = sum(r.status == "accepted" for r in results)
    logger.info("prep-dsm: %d of %d images accepted", accepted, len(results))
    return 0


# ============= Parser =============
def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="scenekit", description="Tri-plane scene fitting, rendering and DSM tooling")
    p.add_argument("--config", help="JSON config file")
    p.add_argument("--set", dest="overrides", action="append", default=[], metavar="SECTION.KEY=VALUE",
                   help="config override; flags win over the config file")
    p.add_argument("--seed", type=int, help="overrides fit.seed when given")
    p.add_argument("--threads", type=int, default=os.cpu_count())
    p.add_argument("--log-level", default="INFO")
    p.add_argument("--registry-table", help="BigQuery table receiving run reports")
    p.add_argument("--registry-key", help="service account key file for the registry")
    p.add_argument("--user-email", default="local@scenekit")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("make-synthetic", help="render a supervision set from an analytic scene")
    s.add_argument("--spec", help="scene spec JSON (default: built-in city block)")
    s.add_argument("--out-dir", required=True)
    s.add_argument("--sat-size", type=int, default=256)
    s.add_argument("--pano-size", type=int, nargs=2, default=(512, 128), metavar=("W", "H"))
    s.add_argument("--n-samples", type=int, default=512)
    s.set_defaults(func=cmd_make_synthetic)

    s = sub.add_parser("fit", help="fit a tri-plane field to a supervision set")
    s.add_argument("--data-dir")
    s.add_argument("--out", help="output checkpoint (.tpf)")
    s.add_argument("--log", help="training log (newline-delimited JSON)")
    s.set_defaults(func=cmd_fit)

    s = sub.add_parser("render", help="render views or a trajectory from a checkpoint")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--camera", help="camera JSON (object or list)")
    s.add_argument("--trajectory", help="JSON list of poses")
    s.add_argument("--size", type=int, nargs=2, default=(256, 256), metavar=("W", "H"))
    s.add_argument("--surround", action="store_true", help="four 120 degree views per pose")
    s.add_argument("--gif", action="store_true")
    s.add_argument("--fps", type=float, default=8.0)
    s.add_argument("--code-index", type=int, default=0, help="illumination code used for color")
    s.add_argument("--out-dir", required=True)
    s.set_defaults(func=cmd_render)

    s = sub.add_parser("mesh", help="extract a colored mesh")
    s.add_argument("--checkpoint")
    s.add_argument("--tiles", help="directory of tile_<row>_<col>.tpf checkpoints")
    s.add_argument("--tau", type=float)
    s.add_argument("--res", type=int)
    s.add_argument("--code-index", type=int, default=0)
    s.add_argument("--dump-grid", help="also write the density grid (.npy + .json)")
    s.add_argument("--out", required=True, help="output .obj or .ply")
    s.set_defaults(func=cmd_mesh)

    s = sub.add_parser("eval-depth", help="height-map accuracy against a DSM")
    s.add_argument("--pred", required=True)
    s.add_argument("--gt", required=True)
    s.add_argument("--align", choices=("none", "median"), default="none")
    s.add_argument("--report")
    s.set_defaults(func=cmd_eval_depth)

    s = sub.add_parser("prep-dsm", help="prepare aligned DSM ground truth per satellite image")
    s.add_argument("--image-dir", required=True)
    s.add_argument("--tile-dir", required=True)
    s.add_argument("--out-dir")
    s.add_argument("--threshold", type=float, default=5.0, help="max nodata percentage")
    s.add_argument("--mosaic", action="store_true", help="fill holes from other candidate tiles")
    s.add_argument("--tile-crs", help="CRS for tiles without one")
    s.add_argument("--tile-units", choices=("ft", "m"), default="ft")
    s.set_defaults(func=cmd_prep_dsm)
    return p


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    setup_logging(args.log_level)
    try:
        cfg = load_config(args.config, args.overrides)
        return args.func(args, cfg)
    except SceneKitError as e:
        print(f"error: {type(e).__name__}: {e}", file=sys.stderr)
        return 2
    except (OSError, KeyError, ValueError) as e:
        print(f"error: {type(e).__name__}: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
