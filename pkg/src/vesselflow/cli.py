"""Command-line front end.

Subcommands: segment, smooth, wss, phantom, stats, compare, run.
Exit codes: 0 success, 1 usage error, 2 data error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

import numpy as np

from . import volio
from .bench import (
    CorruptionSpec,
    PhantomKind,
    PhantomSpec,
    corrupt,
    correlation_table,
    divergence_stats,
    divergence_table,
    field_correlation_partial,
    generate_phantom,
    plane_region,
)
from .dfs import smooth_field
from .errors import DataError, NumericalError, ParameterError
from .grid import ScalarField, VolumeGrid
from .operators import FieldLayout, assemble_divergence
from .pipeline import (
    PipelineConfig,
    apply_overrides,
    config_from_file,
    preset_config,
    run_pipeline,
)
from .segmentation import levelset_from_mask
from .wss import WssStatus, compute_wss_field


class _UsageExit(Exception):
    def __init__(self, message):
        super().__init__(message)


class _Parser(argparse.ArgumentParser):
    """argparse that reports usage problems with exit code 1."""

    def error(self, message):
        raise _UsageExit(message)


def _add_run(sub):
    p = sub.add_parser("run", help="execute the configured pipeline")
    p.add_argument("--config", help="key=value config file")
    p.add_argument("--preset", help="named preset, e.g. poiseuille-default")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                   help="override a config key (repeatable)")
    p.add_argument("--output-dir", help="output directory")


def _add_phantom(sub):
    p = sub.add_parser("phantom", help="generate an analytic phantom")
    p.add_argument("--kind", default="poiseuille-pipe",
                   choices=[k.value for k in PhantomKind])
    p.add_argument("--dims", type=int, default=48)
    p.add_argument("--extent", type=float, default=0.03, help="cube edge length [m]")
    p.add_argument("--radius", type=float, default=0.01)
    p.add_argument("--axis", type=int, default=2)
    p.add_argument("--umax", type=float, default=1.0)
    p.add_argument("--noise", type=float, default=0.0)
    p.add_argument("--outliers", type=float, default=0.0)
    p.add_argument("--missing", type=float, default=0.0)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out-truth", help="write the clean field here (.vesvol)")
    p.add_argument("--out-noisy", help="write the corrupted field here (.vesvol)")
    p.add_argument("--out-mask", help="write the vessel mask here (.vesvol)")
    p.add_argument("--out-phi", help="write the signed distance here (.vesvol)")


def _add_segment(sub):
    p = sub.add_parser("segment", help="binarize an image stack into a vessel mask")
    p.add_argument("--images", required=True, help="1-component raw volume")
    p.add_argument("--variance-window", type=int, default=3)
    p.add_argument("--sign-window", type=int, default=3)
    p.add_argument("--median-window", type=int, default=3)
    p.add_argument("--strategy", default="product", choices=("product", "min", "mean"))
    p.add_argument("--theta-min", type=float, default=0.05)
    p.add_argument("--out-mask", required=True)
    p.add_argument("--out-mesh", help="write the wall surface here (.vtk)")


def _add_smooth(sub):
    p = sub.add_parser("smooth", help="divergence-free smoothing of a velocity volume")
    p.add_argument("--velocity", required=True)
    p.add_argument("--mask", required=True)
    p.add_argument("--weights", help="optional 1-component weight volume")
    p.add_argument("--mode", default="improved", choices=("improved", "traditional"))
    p.add_argument("--s", default="gcv", help="smoothing strength, or 'gcv'")
    p.add_argument("--theta-min", type=float, default=0.05)
    p.add_argument("--no-outlier-prepass", action="store_true")
    p.add_argument("--out", required=True)
    p.add_argument("--export-vtk", help="also write a .vtk volume here")


def _add_wss(sub):
    p = sub.add_parser("wss", help="wall shear stress over the wall surface")
    p.add_argument("--velocity", required=True)
    p.add_argument("--mask", required=True)
    p.add_argument("--rho", type=float, default=1060.0)
    p.add_argument("--mu", type=float, default=0.0035)
    p.add_argument("--profile-points", type=int, default=5)
    p.add_argument("--profile-spacing", type=float, help="defaults to mean grid spacing")
    p.add_argument("--interpolation", default="trilinear", choices=("trilinear", "cubic"))
    p.add_argument("--theta-min", type=float, default=0.05)
    p.add_argument("--out-mesh", required=True, help="output .vtk polydata")
    p.add_argument("--out-csv")


def _add_stats(sub):
    p = sub.add_parser("stats", help="divergence statistics of velocity volumes")
    p.add_argument("--mask", required=True)
    p.add_argument("--csv", help="also write the table as CSV")
    p.add_argument("volumes", nargs="+", metavar="NAME=PATH",
                   help="labelled velocity volumes, e.g. original=in.vesvol")


def _add_compare(sub):
    p = sub.add_parser("compare", help="component-wise correlation of two volumes")
    p.add_argument("--a", required=True)
    p.add_argument("--b", required=True)
    p.add_argument("--mask", help="restrict to a vessel mask")
    p.add_argument("--plane", help="axis,index plane instead of the full region")


def build_parser() -> _Parser:
    parser = _Parser(prog="vesselflow", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)
    _add_run(sub)
    _add_phantom(sub)
    _add_segment(sub)
    _add_smooth(sub)
    _add_wss(sub)
    _add_stats(sub)
    _add_compare(sub)
    return parser


def _geometry_from_mask_file(path, theta_min):
    grid, mask = volio.read_mask_volume(path)
    return grid, mask, levelset_from_mask(mask, grid, theta_min=theta_min)


def _cmd_run(args) -> int:
    config = PipelineConfig()
    if args.preset:
        config = preset_config(args.preset, config)
    if args.config:
        config = config_from_file(args.config, config)
    overrides = {}
    for item in args.set:
        if "=" not in item:
            raise ParameterError(f"--set expects KEY=VALUE, got {item!r}")
        key, value = item.split("=", 1)
        overrides[key.strip()] = value.strip()
    if args.output_dir:
        overrides["output_dir"] = args.output_dir
    if overrides:
        config = apply_overrides(config, overrides)
    result = run_pipeline(config)
    sys.stdout.write(result.report)
    return 0


def _cmd_phantom(args) -> int:
    grid = VolumeGrid((args.dims,) * 3, (args.extent / args.dims,) * 3)
    spec = PhantomSpec(
        PhantomKind(args.kind), grid, radius=args.radius, axis=args.axis, u_max=args.umax
    )
    phantom = generate_phantom(spec)
    if args.out_truth:
        volio.write_velocity_volume(args.out_truth, phantom.truth)
    if args.out_noisy:
        noisy = corrupt(
            phantom.truth,
            CorruptionSpec(args.noise, args.outliers, args.missing, args.seed),
            reference_speed=args.umax,
        )
        volio.write_velocity_volume(args.out_noisy, noisy)
    if args.out_mask:
        volio.write_mask_volume(args.out_mask, grid, phantom.truth.vessel_mask)
    if args.out_phi:
        volio.write_scalar_volume(args.out_phi, ScalarField(grid, phantom.geometry.phi))
    print(
        "phantom %s: %d vessel voxels, analytic tau_w = %.6g Pa"
        % (args.kind, int(phantom.truth.vessel_mask.sum()), phantom.tau_wall)
    )
    return 0


def _cmd_segment(args) -> int:
    from .pipeline import _segment_stage
    import io as _io

    config = PipelineConfig(
        image_path=args.images,
        variance_window=args.variance_window,
        sign_window=args.sign_window,
        median_window=args.median_window,
        combine_strategy=args.strategy,
        theta_min=args.theta_min,
    )
    buf = _io.StringIO()
    grid, mask = _segment_stage(config, buf)
    volio.write_mask_volume(args.out_mask, grid, mask)
    sys.stdout.write(buf.getvalue())
    if args.out_mesh:
        geometry = levelset_from_mask(mask, grid, theta_min=args.theta_min)
        volio.write_vtk_mesh(args.out_mesh, geometry.surface)
    return 0


def _cmd_smooth(args) -> int:
    grid, mask, geometry = _geometry_from_mask_file(args.mask, args.theta_min)
    weight = None
    if args.weights:
        _, wdata = volio.read_volume(args.weights)
        weight = wdata[0].astype(float)
    velocity = volio.read_velocity_volume(args.velocity, mask=mask, weight=weight)
    config = PipelineConfig(mode=args.mode, theta_min=args.theta_min,
                            outlier_prepass=not args.no_outlier_prepass)
    config = apply_overrides(config, {"s": args.s})
    result = smooth_field(velocity, geometry, config.dfs_config(args.mode))
    volio.write_velocity_volume(args.out, result.field)
    label = "fixed" if result.s_fixed else "gcv-selected"
    print(
        "s: %s (%.6g)  iterations=%d  kkt_residual=%.3e  feasibility=%.3e"
        % (label, result.s_used, result.solution.iterations,
           result.solution.kkt_residual, result.solution.feasibility)
    )
    if args.export_vtk:
        volio.write_vtk_volume(
            args.export_vtk,
            velocity.grid,
            scalars={"speed": result.field.magnitude()},
            vectors={"velocity": np.stack(result.field.components())},
        )
    return 0


def _cmd_wss(args) -> int:
    from .wss import WssConfig

    grid, mask, geometry = _geometry_from_mask_file(args.mask, args.theta_min)
    velocity = volio.read_velocity_volume(args.velocity, mask=mask)
    wss = compute_wss_field(
        velocity, geometry, rho=args.rho, mu=args.mu,
        config=WssConfig(
            n_points=args.profile_points,
            spacing=args.profile_spacing,
            interpolation=args.interpolation,
        ),
    )
    volio.write_vtk_mesh(
        args.out_mesh,
        geometry.surface,
        point_scalars={"wss": wss.tau, "u_tau": wss.u_tau,
                       "status": wss.status.astype(float)},
        point_vectors={"wss_vector": wss.tau[:, None] * wss.direction},
    )
    if args.out_csv:
        verts = geometry.surface.vertices

        def emit(handle):
            handle.write(b"vertex,x,y,z,u_tau,tau,status\n")
            for i in range(wss.n_vertices):
                handle.write(("%d,%.9g,%.9g,%.9g,%.9g,%.9g,%d\n" % (
                    i, verts[i, 0], verts[i, 1], verts[i, 2],
                    wss.u_tau[i], wss.tau[i], wss.status[i])).encode())

        volio._atomic_write(args.out_csv, emit)
    ok = wss.status == int(WssStatus.OK)
    median = float(np.median(wss.tau[ok])) if ok.any() else 0.0
    print("wss: %d vertices, median tau = %.6g Pa" % (wss.n_vertices, median))
    return 0


def _cmd_stats(args) -> int:
    grid, mask, geometry = _geometry_from_mask_file(args.mask, 0.05)
    fields = {}
    for item in args.volumes:
        if "=" in item:
            name, path = item.split("=", 1)
        else:
            name, path = Path(item).stem, item
        fields[name] = volio.read_velocity_volume(path, mask=mask)
    layout = FieldLayout.from_field(next(iter(fields.values())))
    a_op = assemble_divergence(layout, geometry, "improved")
    stats = {name: divergence_stats(f, a_op, layout) for name, f in fields.items()}
    print(divergence_table(stats))
    if args.csv:
        def emit(handle):
            handle.write(b"field,mean_abs_div,max_abs_div,n_rows\n")
            for name, st in stats.items():
                handle.write(("%s,%.9g,%.9g,%d\n" % (
                    name, st.mean_abs, st.max_abs, st.n_rows)).encode())

        volio._atomic_write(args.csv, emit)
    return 0


def _cmd_compare(args) -> int:
    mask = None
    if args.mask:
        _, mask = volio.read_mask_volume(args.mask)
    a = volio.read_velocity_volume(args.a, mask=mask)
    b = volio.read_velocity_volume(args.b, mask=mask)
    region = None
    if args.plane:
        try:
            axis_text, index_text = args.plane.split(",")
            region = plane_region(a.grid, int(axis_text), int(index_text))
        except ValueError as exc:
            raise ParameterError(f"--plane expects AXIS,INDEX, got {args.plane!r}") from exc
        if mask is not None:
            region &= mask
    stats = field_correlation_partial(a, b, region)
    print(correlation_table(stats, label=args.plane or "region"))
    return 0


_COMMANDS = {
    "run": _cmd_run,
    "phantom": _cmd_phantom,
    "segment": _cmd_segment,
    "smooth": _cmd_smooth,
    "wss": _cmd_wss,
    "stats": _cmd_stats,
    "compare": _cmd_compare,
}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return _COMMANDS[args.command](args)
    except _UsageExit as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 1
    except ParameterError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 1
    except (DataError, OSError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 2
    except NumericalError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
