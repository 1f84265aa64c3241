"""Command-line front end: ``viewmt <command> [--config FILE] [--a.b=value ...]``.

Commands: synth, fit, render, transform, mutate, test, analyze, bench.
Exit codes: 0 success, 1 usage, 2 data error, 3 SUT failure budget exceeded.
"""

from __future__ import annotations

import argparse
import copy
import csv
import io
import json
import logging
import os
import sys
import tempfile
import time
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import imqual, mt
from ._hash import derive_seed
from .field import (EmptyDataset, FieldError, RenderConfig, TrainConfig, default_field, fit, load_checkpoint,
                    render_image, save_checkpoint)
from .geometry import Box, CameraIntrinsics, GeometryError, PoseFile, PoseFrame, apply_transform
from .mutate import MutationSpec, PatchTooLarge, default_mutations, mutate
from .suts import ExternalSut, HarrisSut, HistSut, SutError, train_hist_classifier
from .synthscene import (IoFailure, SceneSpec, TrajectorySpec, default_object_scene, default_orbit,
                         default_wall_scene, default_wall_trajectory, generate_dataset, load_dataset, raytrace,
                         trajectory_poses)

logger = logging.getLogger("viewmt")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_SUT = 0, 1, 2, 3

DEFAULT_CONFIG = {
    "seed": 0,
    "scene": {"kind": "wall"},
    "trajectory": {},
    "intrinsics": {"width": 128, "height": 72, "hfov_deg": 60.0},
    "field": {"resolution": [64, 64, 64], "sigma": 0.1, "color": 0.5, "background": [0.5, 0.5, 0.5]},
    "train": {"steps": 2000, "rays_per_step": 4096, "learning_rate": 0.05},
    "render": {"samples_per_ray": 64, "jitter": True},
    "transforms": {},
    "mutations": None,
    "epsilons": [0.1, 0.2, 0.5],
    "suts": {"reference": ["harris", "histclass"], "external": []},
    "test": {"resolution": [480, 270], "max_frames": None, "failure_budget": 0.1},
    "bench": {"resolutions": [[480, 270], [960, 540], [1920, 1080]], "frames": 10, "samples_per_ray": 64},
}


class UsageError(Exception):
    pass


class DataError(Exception):
    pass


class BudgetExceeded(Exception):
    pass


# --------------------------------------------------------------------------
# configuration

def _merge(base, extra):
    out = copy.deepcopy(base)
    for k, v in extra.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


def parse_value(text):
    try:
        return json.loads(text)
    except ValueError:
        return text


def apply_override(cfg, key, value):
    parts = key.split(".")
    node = cfg
    for p in parts[:-1]:
        if not isinstance(node.get(p), dict):
            node[p] = {}
        node = node[p]
    node[parts[-1]] = value


def load_config(path=None, overrides=()):
    cfg = copy.deepcopy(DEFAULT_CONFIG)
    if path:
        try:
            cfg = _merge(cfg, json.loads(Path(path).read_text()))
        except (OSError, ValueError) as e:
            raise UsageError(f"cannot read config {path}: {e}") from e
    for item in overrides:
        if not item.startswith("--") or "=" not in item:
            raise UsageError(f"unrecognized argument {item!r} (overrides look like --key=value)")
        key, val = item[2:].split("=", 1)
        apply_override(cfg, key, parse_value(val))
    eps = cfg["epsilons"]
    if not eps or any(not 0 < e < 1 for e in eps) or any(b <= a for a, b in zip(eps, eps[1:])):
        raise UsageError("epsilons must lie in (0, 1) and be strictly increasing")
    return cfg


def scene_from(cfg):
    s = dict(cfg["scene"])
    base = default_wall_scene() if s.get("kind", "wall") == "wall" else default_object_scene()
    seed = derive_seed(cfg["seed"], "scene") & 0xFFFFFFFF
    return SceneSpec.from_dict({**base.to_dict(), "seed": seed, **s})


def trajectory_from(cfg, scene):
    base = default_wall_trajectory() if scene.kind == "wall" else default_orbit()
    return TrajectorySpec.from_dict({**base.to_dict(), **cfg["trajectory"]})


def intrinsics_from(cfg):
    i = cfg["intrinsics"]
    return CameraIntrinsics.from_fov(int(i["width"]), int(i["height"]), float(i["hfov_deg"]))


def render_cfg(cfg, stage="render"):
    r = cfg["render"]
    return RenderConfig(int(r["samples_per_ray"]), bool(r["jitter"]), derive_seed(cfg["seed"], stage))


def mutations_from(cfg):
    seed = derive_seed(cfg["seed"], "mutate")
    if cfg["mutations"] is None:
        return default_mutations(seed)
    return [MutationSpec(**{"seed": seed, **m}) for m in cfg["mutations"]]


def _atomic_write(path, data):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data.encode("utf-8") if isinstance(data, str) else data)
        os.replace(tmp, path)
    except BaseException:
        Path(tmp).unlink(missing_ok=True)
        raise


def _write_config(out, cfg):
    _atomic_write(Path(out) / "config.json", json.dumps(cfg, indent=1, sort_keys=True) + "\n")


def _load_dataset(path):
    try:
        return load_dataset(path)
    except IoFailure as e:
        raise DataError(str(e)) from e


def _load_field(path):
    try:
        return load_checkpoint(path)
    except (OSError, FieldError) as e:
        raise DataError(f"cannot load checkpoint {path}: {e}") from e


# --------------------------------------------------------------------------
# commands

def cmd_synth(cfg, out):
    scene = scene_from(cfg)
    traj = trajectory_from(cfg, scene)
    ds = generate_dataset(scene, traj, intrinsics_from(cfg), out)
    _write_config(out, cfg)
    s = ds.summary()
    print(f"{'#Total Images':>14} {'#Train Images':>14} {'#Eval Images':>13}")
    print(f"{s['total']:>14} {s['train']:>14} {s['eval']:>13}")
    return s


def _heldout(field, ds, rcfg, indices):
    ps, ss = [], []
    for k in indices:
        img = render_image(field, ds.intrinsics, ds.frames[k].pose, rcfg)
        ref = ds.image(k)
        ps.append(imqual.psnr(ref, img))
        ss.append(imqual.ssim(ref, img) if min(ref.width, ref.height) >= 11 else float("nan"))
    return float(np.mean(ps)), float(np.mean(ss))


def cmd_fit(cfg, dataset, out):
    ds = _load_dataset(dataset)
    if not ds.train_indices:
        raise EmptyDataset("dataset has no training frames")
    f = cfg["field"]
    box = ds.sidecar.get("box")
    if box is None:
        raise DataError("dataset sidecar lacks a scene box")
    init = default_field(Box(tuple(box["lo"]), tuple(box["hi"])), tuple(f["resolution"]), f["sigma"], f["color"],
                         tuple(f["background"]))
    t = cfg["train"]
    tcfg = TrainConfig(int(t["steps"]), int(t["rays_per_step"]), float(t["learning_rate"]),
                       derive_seed(cfg["seed"], "fit") & 0xFFFFFFFF)
    res = fit(init, ds.posed(ds.train_indices), tcfg, render_cfg(cfg, "fit"))
    eval_cfg = RenderConfig(int(cfg["render"]["samples_per_ray"]))
    p0, s0 = _heldout(init, ds, eval_cfg, ds.eval_indices)
    p1, s1 = _heldout(res.field, ds, eval_cfg, ds.eval_indices)
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    tmp = out / ".field.n2rf.tmp"
    save_checkpoint(res.field, tmp)
    os.replace(tmp, out / "field.n2rf")
    lines = io.StringIO()
    w = csv.writer(lines, lineterminator="\n")
    w.writerow(["step", "loss"])
    for i, v in enumerate(res.loss_history):
        w.writerow([i, repr(float(v))])
    _atomic_write(out / "loss.csv", lines.getvalue())
    metrics = {"heldout_psnr": p1, "heldout_ssim": s1, "init_psnr": p0, "init_ssim": s0,
               "eval_frames": len(ds.eval_indices), "train_frames": len(ds.train_indices),
               "steps": tcfg.steps, "wall_time_s": res.wall_time}
    _atomic_write(out / "metrics.json", json.dumps(metrics, indent=1, sort_keys=True) + "\n")
    _write_config(out, cfg)
    print(f"held-out PSNR {p1:.2f} dB (init {p0:.2f} dB), SSIM {s1:.4f}, fit {res.wall_time:.1f} s")
    return metrics


def _tau(cfg, ds, name):
    transforms = mt.build_suite(ds.sidecar, cfg["transforms"])
    by = {t.kind.value: t for t in transforms}
    if name not in by:
        raise UsageError(f"unknown transform {name!r}; choose from {sorted(by)}")
    return by[name]


def cmd_render(cfg, dataset, checkpoint, frame, out, tau="tau0"):
    ds = _load_dataset(dataset)
    field = _load_field(checkpoint)
    if not 0 <= frame < len(ds.frames):
        raise UsageError(f"frame {frame} out of range 0..{len(ds.frames) - 1}")
    intr = _test_intrinsics(cfg, ds)
    pose = apply_transform(ds.frames[frame].pose, _tau(cfg, ds, tau), ds.lookat)
    img = render_image(field, intr, pose, render_cfg(cfg))
    Path(out).parent.mkdir(parents=True, exist_ok=True)
    imqual.write_ppm(out, img)
    return img


def cmd_transform(cfg, dataset, out):
    """Write the transformed poses of every eval frame for each tau as pose files."""
    ds = _load_dataset(dataset)
    transforms = mt.build_suite(ds.sidecar, cfg["transforms"])
    out = Path(out)
    for t in transforms:
        frames = [PoseFrame(ds.frames[k].id, apply_transform(ds.frames[k].pose, t, ds.lookat), "")
                  for k in ds.eval_indices]
        _atomic_write(out / f"poses_{t.kind.value}.json",
                      json.dumps(PoseFile(ds.intrinsics, frames).to_dict(), indent=1, sort_keys=True))
    _write_config(out, cfg)
    return len(transforms)


def cmd_mutate(cfg, image, out):
    try:
        img = imqual.read_ppm(image)
    except (OSError, imqual.ImageError) as e:
        raise DataError(f"cannot read image {image}: {e}") from e
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    names = []
    for m in mutations_from(cfg):
        imqual.write_ppm(out / f"{m.name}.ppm", mutate(img, m))
        names.append(m.name)
    _write_config(out, cfg)
    return names


def _test_intrinsics(cfg, ds):
    w, h = cfg["test"]["resolution"]
    intr = ds.intrinsics
    return intr if (w, h) == (intr.width, intr.height) else intr.scaled(int(w), int(h))


def _roll(colors, r):
    c = np.roll(np.asarray(colors, dtype=np.float64), r, axis=-1)
    return tuple(map(tuple, c)) if c.ndim == 2 else tuple(c)


def color_cast_variants(scene):
    """The scene and its two cyclic channel rotations (object, ground and sky colors together)."""
    return [replace(scene, palette=_roll(scene.palette, r), ground_palette=_roll(scene.ground_palette, r),
                    background=_roll(scene.background, r)) for r in range(3)]


def reference_classifier(scene, intr, poses, max_views=8, width=96):
    """Histogram classifier over color casts of ``scene``; class 0 is the scene itself."""
    small = intr.scaled(width, max(11, round(width * intr.height / intr.width)))
    step = max(1, len(poses) // max_views)
    views = poses[::step][:max_views]
    return train_hist_classifier({f"class{c}": [raytrace(s, small, p) for p in views]
                                  for c, s in enumerate(color_cast_variants(scene))})


def build_suts(cfg, ds):
    reg = cfg["suts"]
    suts = []
    for name in reg.get("reference", []):
        if name == "harris":
            suts.append(HarrisSut())
        elif name == "histclass":
            scene = ds.scene
            if scene is None:
                raise DataError("histclass needs a synthetic scene in the dataset sidecar")
            poses = [ds.frames[k].pose for k in ds.train_indices]
            suts.append(HistSut(reference_classifier(scene, ds.intrinsics, poses)))
        else:
            raise UsageError(f"unknown reference SUT {name!r}")
    for e in reg.get("external", []):
        suts.append(ExternalSut(e["name"], e["command"], e["task"], int(e.get("max_points", 100)),
                                float(e.get("timeout", 30.0))))
    if not suts:
        raise UsageError("no SUTs configured")
    return suts


def cmd_test(cfg, dataset, checkpoint, out):
    ds = _load_dataset(dataset)
    field = _load_field(checkpoint)
    suts = build_suts(cfg, ds)
    try:
        transforms = mt.build_suite(ds.sidecar, cfg["transforms"])
        w, h = cfg["test"]["resolution"]
        ccfg = mt.CampaignConfig(render_cfg(cfg), tuple(cfg["epsilons"]), (int(w), int(h)),
                                 cfg["test"].get("max_frames"))
        report = mt.run_campaign(field, ds, suts, transforms, mutations_from(cfg), ccfg)
    finally:
        for s in suts:
            s.close()
    out = Path(out)
    _atomic_write(out / "report.json", report.dumps() + "\n")
    _atomic_write(out / "report.csv", report.to_csv())
    table = report.summary_table()
    _atomic_write(out / "summary.txt", table + "\n")
    _write_config(out, cfg)
    print(table)
    n, bad = len(report.records), len(report.failed_records)
    if n and bad / n > float(cfg["test"]["failure_budget"]):
        raise BudgetExceeded(f"{bad} of {n} comparisons failed (budget {cfg['test']['failure_budget']})")
    return report


def format_correlations(table):
    head = ["sut", "sut_metric", "image_metric", "rho", "p", "sig", "status"]
    rows = [head]
    for e in table:
        rows.append([e["sut"], e["sut_metric"], e["image_metric"],
                     "" if e["rho"] is None else f"{e['rho']:+.3f}", "" if e["p"] is None else f"{e['p']:.3g}",
                     "*" if e["significant"] else "", e["status"]])
    widths = [max(len(r[i]) for r in rows) for i in range(len(head))]
    return "\n".join("  ".join(v.ljust(widths[i]) for i, v in enumerate(r)) for r in rows)


def cmd_analyze(cfg, report_path, out=None):
    try:
        report = mt.CampaignReport.from_json(json.loads(Path(report_path).read_text()))
    except (OSError, ValueError, KeyError) as e:
        raise DataError(f"cannot read report {report_path}: {e}") from e
    try:
        table = mt.correlation_table(report)
    except mt.InsufficientData as e:
        raise DataError(str(e)) from e
    sig = sum(e["significant"] for e in table)
    tested = sum(e["status"] == "ok" for e in table)
    print(report.summary_table())
    print()
    print(format_correlations(table))
    print(f"\nsignificant at p <= {mt.SIGNIFICANCE}: {sig} of {tested} testable combinations")
    if out:
        _atomic_write(Path(out) / "correlations.json", json.dumps(mt._jsonable(table), indent=1, sort_keys=True))
    return table


def bench(field, intr, poses, resolutions, frames=10, samples=64):
    """Mean frames per second for each (width, height)."""
    rcfg = RenderConfig(samples)
    fps = {}
    for w, h in resolutions:
        ri = intr.scaled(int(w), int(h))
        render_image(field, ri, poses[0], rcfg)       # warm-up (JIT, caches)
        t0 = time.perf_counter()
        for k in range(frames):
            render_image(field, ri, poses[k % len(poses)], rcfg)
        fps[(int(w), int(h))] = frames / (time.perf_counter() - t0)
    return fps


def format_bench(fps):
    cols = [f"{w}x{h}" for w, h in fps]
    vals = [f"{v:.2f}" for v in fps.values()]
    widths = [max(len(c), len(v)) for c, v in zip(cols, vals)]
    return "\n".join(["Resolution  " + "  ".join(c.rjust(n) for c, n in zip(cols, widths)),
                      "FPS         " + "  ".join(v.rjust(n) for v, n in zip(vals, widths))])


def cmd_bench(cfg, checkpoint, dataset=None):
    field = _load_field(checkpoint)
    if dataset:
        ds = _load_dataset(dataset)
        intr, poses = ds.intrinsics, [f.pose for f in ds.frames]
    else:
        scene = scene_from(cfg)
        intr, poses = intrinsics_from(cfg), trajectory_poses(trajectory_from(cfg, scene))
    b = cfg["bench"]
    fps = bench(field, intr, poses, b["resolutions"], int(b["frames"]), int(b["samples_per_ray"]))
    print(format_bench(fps))
    return fps


# --------------------------------------------------------------------------
# entry point

def build_parser():
    ap = argparse.ArgumentParser(prog="viewmt", description=__doc__.splitlines()[0])
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    def add(name, help_):
        p = sub.add_parser(name, help=help_)
        p.add_argument("--config", help="JSON config file")
        return p

    p = add("synth", "raytrace a synthetic posed dataset")
    p.add_argument("--out", required=True)
    p = add("fit", "fit a radiance field to a dataset")
    p.add_argument("--dataset", required=True)
    p.add_argument("--out", required=True)
    p = add("render", "render one view, optionally transformed")
    p.add_argument("--dataset", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--frame", type=int, default=0)
    p.add_argument("--tau", default="tau0")
    p.add_argument("--out", required=True)
    p = add("transform", "write transformed eval poses for tau0..tau6")
    p.add_argument("--dataset", required=True)
    p.add_argument("--out", required=True)
    p = add("mutate", "apply the configured pixel mutations to an image")
    p.add_argument("--image", required=True)
    p.add_argument("--out", required=True)
    p = add("test", "run a metamorphic test campaign")
    p.add_argument("--dataset", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", required=True)
    p = add("analyze", "rank correlations of SUT and image metrics")
    p.add_argument("--report", required=True)
    p.add_argument("--out")
    p = add("bench", "rendering frame rate per resolution")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--dataset")
    return ap


def run(argv):
    ap = build_parser()
    args, rest = ap.parse_known_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    cfg = load_config(args.config, rest)
    c = args.command
    if c == "synth":
        return cmd_synth(cfg, args.out)
    if c == "fit":
        return cmd_fit(cfg, args.dataset, args.out)
    if c == "render":
        return cmd_render(cfg, args.dataset, args.checkpoint, args.frame, args.out, args.tau)
    if c == "transform":
        return cmd_transform(cfg, args.dataset, args.out)
    if c == "mutate":
        return cmd_mutate(cfg, args.image, args.out)
    if c == "test":
        return cmd_test(cfg, args.dataset, args.checkpoint, args.out)
    if c == "analyze":
        return cmd_analyze(cfg, args.report, args.out)
    return cmd_bench(cfg, args.checkpoint, args.dataset)


def main(argv=None):
    argv = sys.argv[1:] if argv is None else list(argv)
    try:
        run(argv)
    except SystemExit as e:
        return EXIT_USAGE if e.code not in (0, None) else EXIT_OK
    except (UsageError, mt.MtError, GeometryError, PatchTooLarge, TypeError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, IoFailure, FieldError, imqual.ImageError, ValueError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_DATA
    except BudgetExceeded as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_SUT
    except SutError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_SUT
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
