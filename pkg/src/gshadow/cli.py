"""Command-line entry point: ``gshadow <subcommand> ...``.

Exit codes: 0 success, 1 usage error, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import math
import re
import sys
from pathlib import Path


EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 1, 2


class CliUsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(EXIT_USAGE)


def _frames(arg: str, n: int) -> list[int]:
    if arg == "all":
        return list(range(n))
    try:
        f = int(arg)
    except ValueError:
        raise CliUsageError(f"--frame must be an integer or 'all', got {arg!r}") from None
    if not 0 <= f < n:
        raise CliUsageError(f"frame {f} out of range (scene has {n})")
    return [f]


def _camera(scene, index: int) -> int:
    if not 0 <= index < len(scene.cameras):
        raise CliUsageError(f"camera {index} out of range (scene has {len(scene.cameras)})")
    return index


def _out_path(out: str, frame: int, many: bool) -> Path:
    p = Path(out)
    if "{frame}" in out:
        return Path(out.format(frame=frame))
    if many:
        return p.with_name(f"{p.stem}_{frame:04d}{p.suffix}")
    return p


def _load(path):
    from .scene import load_scene

    return load_scene(path)


# ---------------------------------------------------------------------------
# subcommands


def cmd_render(args) -> int:
    from .imageio import write_image
    from .shading import MODES, render

    if args.mode not in MODES:
        raise CliUsageError(f"unknown mode {args.mode!r}; expected one of {', '.join(MODES)}")
    scene = _load(args.scene)
    cam = _camera(scene, args.camera)
    frames = _frames(args.frame, len(scene.poses))
    for f in frames:
        img = render(scene, f, args.mode, cam)
        path = _out_path(args.out, f, len(frames) > 1)
        path.parent.mkdir(parents=True, exist_ok=True)
        write_image(path, img)
        print(f"wrote {path}")
    return EXIT_OK


def cmd_relight(args) -> int:
    from .body import posed_set
    from .imageio import read_image, write_image
    from .shading import EnvironmentMap, frame_gbuffer, relight_hdri

    scene = _load(args.scene)
    if args.env:
        env = EnvironmentMap(read_image(args.env))
    elif scene.env_map is not None:
        env = scene.env_map
    else:
        raise CliUsageError("no environment map: pass --env or set env_map in the scene")
    if args.rays < 1:
        raise CliUsageError("--rays must be >= 1")
    cam = _camera(scene, args.camera)
    frames = _frames(args.frame, len(scene.poses))
    for f in frames:
        gb = frame_gbuffer(scene, f, cam)
        gset = posed_set(scene.body, scene.skeleton, scene.poses[f])
        img = relight_hdri(gb, scene.cameras[cam], gset, env, args.rays, args.seed, scene.shadow_bias)
        path = _out_path(args.out, f, len(frames) > 1)
        path.parent.mkdir(parents=True, exist_ok=True)
        write_image(path, img)
        print(f"wrote {path}")
    return EXIT_OK


def cmd_fit(args) -> int:
    from .body import init_body
    from .fit import FitConfig, VoxelField, fit
    from .scene import save_scene

    scene = _load(args.scene)
    if args.iters < 1:
        raise CliUsageError("--iters must be >= 1")
    frame = _frames(str(args.frame), len(scene.poses))[0]
    field = VoxelField.load(args.field)
    pose = scene.poses[frame]
    body0 = scene.body if args.from_scene else init_body(scene.skeleton, pose, scene.body.k)
    body0 = body0.__class__(body0.params, scene.body.colors)
    try:
        cfg = FitConfig(iterations=args.iters, step_size=args.step, seed=args.seed,
                        w_sigma=args.w_sigma, w_mean=args.w_mean)
    except ValueError as e:
        raise CliUsageError(str(e)) from None
    res = fit(body0, scene.skeleton, pose, field, cfg)
    scene.body = res.body
    save_scene(scene, args.out)
    print(f"initial loss {res.initial_loss:.6e}")
    print(f"final loss   {res.final_loss:.6e} (iteration {res.best_iteration})")
    print(f"wrote {args.out}")
    return EXIT_OK


_REF = re.compile(r"^ref_(\d+)(?:_(\d+))?\.(pfm|png)$")


def load_references(directory) -> list:
    """``ref_{frame}[_{camera}].pfm|png`` with optional ``mask_{frame}[_{camera}].pfm`` siblings."""
    from .imageio import read_image
    from .light import Reference

    d = Path(directory)
    if not d.is_dir():
        raise CliUsageError(f"--refs {d} is not a directory")
    refs = []
    for p in sorted(d.iterdir()):
        m = _REF.match(p.name)
        if not m:
            continue
        frame = int(m.group(1))
        cam = int(m.group(2) or 0)
        suffix = f"{frame}" if m.group(2) is None else f"{frame}_{cam}"
        mask_path = d / f"mask_{suffix}.pfm"
        mask = read_image(mask_path) if mask_path.exists() else None
        refs.append(Reference(read_image(p), mask, frame, cam))
    if not refs:
        raise CliUsageError(f"no ref_*.pfm or ref_*.png files in {d}")
    refs.sort(key=lambda r: (r.frame, r.camera))
    return refs


def _parse_init(text: str, scene):
    from .light import LightParams

    if text == "down":
        return LightParams(0.0, 1.45)
    if text == "antipodal":
        return LightParams.from_light(scene.light).antipodal()
    try:
        az, el = (float(v) for v in text.split(","))
        return LightParams(az, el)
    except ValueError:
        raise CliUsageError(f"--init must be 'down', 'antipodal' or 'AZ,EL', got {text!r}") from None


def cmd_solve_light(args) -> int:
    from .imageio import write_image
    from .light import LightParams, SolveConfig, angular_error_deg, solve
    from .shading import render

    scene = _load(args.scene)
    refs = load_references(args.refs)
    for r in refs:
        if not 0 <= r.frame < len(scene.poses):
            raise CliUsageError(f"reference frame {r.frame} out of range (scene has {len(scene.poses)})")
        _camera(scene, r.camera)
    iters = args.iters
    end = min(args.schedule_end, iters) if args.schedule_end else max(1, iters // 2)
    try:
        cfg = SolveConfig(iterations=iters, step_size=args.step, schedule_end=end, seed=args.seed,
                          batch_frames=args.batch)
    except ValueError as e:
        raise CliUsageError(str(e)) from None
    res = solve(scene, refs, cfg, init=_parse_init(args.init, scene))
    p = res.params
    print(f"azimuth   {p.azimuth:.6f}")
    print(f"elevation {p.elevation:.6f}")
    print(f"ambient   {p.ambient[0]:.6f} {p.ambient[1]:.6f} {p.ambient[2]:.6f}")
    print(f"loss      {res.trace[-1]:.6e}")
    truth = LightParams.from_light(scene.light)
    print(f"angular error vs scene light {angular_error_deg(p.direction, truth.direction):.4f} deg")
    if args.out:
        light = p.to_light(scene.light.color)
        r0 = refs[0]
        write_image(args.out, render(scene, r0.frame, "lit", r0.camera, light=light))
        print(f"wrote {args.out}")
    if args.trace:
        Path(args.trace).write_text("iteration,loss\n" + "".join(f"{i},{v:.9e}\n" for i, v in enumerate(res.trace)))
    return EXIT_OK


def _samples(text: str) -> list[int]:
    try:
        vals = [int(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise CliUsageError(f"--samples must be comma-separated integers, got {text!r}") from None
    if not vals or min(vals) < 1:
        raise CliUsageError("--samples needs positive integers")
    return vals


def cmd_bench(args) -> int:
    from .bench import bench_shadows
    from .body import posed_set
    from .kernels import BACKENDS

    scene = _load(args.scene)
    if args.rays < 1:
        raise CliUsageError("--rays must be >= 1")
    if args.backend and args.backend not in BACKENDS:
        raise CliUsageError(f"backend {args.backend!r} unavailable; have {', '.join(BACKENDS)}")
    frame = _frames(str(args.frame), len(scene.poses))[0]
    gset = posed_set(scene.body, scene.skeleton, scene.poses[frame])
    report = bench_shadows(gset, args.rays, _samples(args.samples), seed=args.seed, backend=args.backend)
    print(report.to_table())
    if args.csv:
        Path(args.csv).write_text(report.to_csv())
        print(f"wrote {args.csv}")
    return EXIT_OK


def cmd_psnr(args) -> int:
    from .imageio import read_image
    from .metrics import psnr

    a, b = read_image(args.a), read_image(args.b)
    mask = read_image(args.mask) if args.mask else None
    try:
        v = psnr(a, b, mask)
    except ValueError as e:
        raise CliUsageError(str(e)) from None
    print("inf" if math.isinf(v) else f"{v:.4f}")
    return EXIT_OK


def cmd_example_scene(args) -> int:
    from .imageio import write_pfm
    from .scene import load_scene, save_scene
    from .shading import frame_gbuffer, render

    scene = load_scene()
    save_scene(scene, args.out)
    print(f"wrote {args.out}")
    if args.refs:
        d = Path(args.refs)
        d.mkdir(parents=True, exist_ok=True)
        for f in range(len(scene.poses)):
            for c in range(len(scene.cameras)):
                gb = frame_gbuffer(scene, f, c)
                write_pfm(d / f"ref_{f}_{c}.pfm", render(scene, f, "lit", c, gbuffer=gb))
                write_pfm(d / f"mask_{f}_{c}.pfm", gb.mask)
        print(f"wrote references to {d}")
    return EXIT_OK


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="gshadow", description="Analytic Gaussian shadow casting tools.")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def scene_arg(sp):
        sp.add_argument("--scene", default=None, help="scene JSON (default: bundled stick figure)")

    r = sub.add_parser("render", help="render frames to PFM or PNG")
    scene_arg(r)
    r.add_argument("--frame", default="0", help="frame index or 'all'")
    r.add_argument("--mode", default="lit", help="lit, albedo, shadow, normal or depth")
    r.add_argument("--camera", type=int, default=0)
    r.add_argument("--seed", type=int, default=0)
    r.add_argument("--out", required=True, help="output path; '{frame}' is substituted")
    r.set_defaults(func=cmd_render)

    r = sub.add_parser("relight", help="relight frames under an environment map")
    scene_arg(r)
    r.add_argument("--env", help="equirectangular environment map (PFM or PNG)")
    r.add_argument("--frame", default="0")
    r.add_argument("--camera", type=int, default=0)
    r.add_argument("--rays", type=int, default=64)
    r.add_argument("--seed", type=int, default=0)
    r.add_argument("--out", required=True)
    r.set_defaults(func=cmd_relight)

    r = sub.add_parser("fit", help="fit the Gaussian body to a voxel density field")
    scene_arg(r)
    r.add_argument("--field", required=True, help="voxel grid file")
    r.add_argument("--frame", type=int, default=0, help="pose the field was captured in")
    r.add_argument("--iters", type=int, default=2000)
    r.add_argument("--seed", type=int, default=0)
    r.add_argument("--step", type=float, default=0.1)
    r.add_argument("--w-sigma", type=float, default=0.0)
    r.add_argument("--w-mean", type=float, default=0.0)
    r.add_argument("--from-scene", action="store_true", help="start from the scene's body instead of a fresh init")
    r.add_argument("--out", required=True, help="scene JSON with the fitted body")
    r.set_defaults(func=cmd_fit)

    r = sub.add_parser("solve-light", help="recover light direction and ambient from references")
    scene_arg(r)
    r.add_argument("--refs", required=True, help="directory of ref_{frame}_{camera}.pfm and mask_*.pfm")
    r.add_argument("--iters", type=int, default=300)
    r.add_argument("--seed", type=int, default=0)
    r.add_argument("--step", type=float, default=0.05)
    r.add_argument("--schedule-end", type=int, default=0, help="end of the grey-to-RGB ramp (default iters/2)")
    r.add_argument("--batch", type=int, default=4, help="references per iteration")
    r.add_argument("--init", default="down", help="'down', 'antipodal' or 'AZ,EL' in radians")
    r.add_argument("--out", help="write a lit render of the first reference under the solved light")
    r.add_argument("--trace", help="write the loss trace as CSV")
    r.set_defaults(func=cmd_solve_light)

    r = sub.add_parser("bench", help="time analytic vs sampled shadow rays")
    scene_arg(r)
    r.add_argument("--frame", type=int, default=0)
    r.add_argument("--rays", type=int, default=1_000_000)
    r.add_argument("--samples", default="16,64")
    r.add_argument("--seed", type=int, default=0)
    r.add_argument("--backend", default=None, help="cython or python (default: best available)")
    r.add_argument("--csv", help="write the report as CSV")
    r.set_defaults(func=cmd_bench)

    r = sub.add_parser("psnr", help="PSNR between two images")
    r.add_argument("a")
    r.add_argument("b")
    r.add_argument("--mask")
    r.set_defaults(func=cmd_psnr)

    r = sub.add_parser("example-scene", help="write the bundled scene, optionally with references")
    r.add_argument("--out", required=True)
    r.add_argument("--refs", help="directory for self-rendered lit references and masks")
    r.set_defaults(func=cmd_example_scene)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return EXIT_OK if e.code in (0, None) else EXIT_USAGE
    try:
        return args.func(args)
    except CliUsageError as e:
        print(f"gshadow {args.command}: error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except Exception as e:  # runtime failure
        from .scene import SceneError

        kind = "scene error" if isinstance(e, SceneError) else type(e).__name__
        print(f"gshadow {args.command}: {kind}: {e}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
