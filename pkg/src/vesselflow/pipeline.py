"""Pipeline configuration and orchestration: segment -> smooth -> wss.

Configuration lives in a flat key=value text file; command-line flags
override file values, and named presets fill in complete benchmark runs.
Every run is deterministic for a fixed seed and writes its outputs
atomically; the report carries no timestamps so identical configurations
produce byte-identical files.
"""

from __future__ import annotations

import dataclasses
import io
from dataclasses import dataclass, field
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
    noslip_pass_fraction,
)
from .dfs import DfsConfig, smooth_field
from .errors import DataError, ParameterError
from .grid import VelocityField, VolumeGrid
from .operators import FieldLayout, assemble_divergence
from .segmentation import (
    DEFAULT_THETA_MIN,
    ImageStack,
    combine_and_median,
    levelset_from_mask,
    neighborhood_sign,
    neighborhood_variance,
    otsu_binarize,
)
from .wss import WssConfig, WssStatus, compute_wss_field

_BOOL_TRUE = {"1", "true", "yes", "on"}
_BOOL_FALSE = {"0", "false", "no", "off"}


@dataclass
class PipelineConfig:
    """Everything one `run` needs; field names double as config-file keys."""

    # stages
    do_segment: bool = False
    do_smooth: bool = True
    do_wss: bool = True
    do_bench: bool = False  # generate a phantom instead of reading inputs
    do_compare: bool = True

    # inputs / outputs
    image_path: str = ""
    velocity_path: str = ""
    mask_path: str = ""
    weights_path: str = ""
    output_dir: str = "out"
    export_vtk: bool = True

    # phantom benchmark
    phantom_kind: str = "poiseuille-pipe"
    phantom_dims: int = 48
    phantom_extent: float = 0.03  # cube edge length [m]
    phantom_radius: float = 0.01
    phantom_axis: int = 2
    phantom_umax: float = 1.0
    noise_sigma: float = 0.0
    outlier_fraction: float = 0.0
    missing_fraction: float = 0.0
    seed: int = 0

    # segmentation
    variance_window: int = 3
    sign_window: int = 3
    median_window: int = 3
    combine_strategy: str = "product"
    theta_min: float = DEFAULT_THETA_MIN

    # smoothing
    mode: str = "both"  # improved | traditional | both
    s: float | None = None  # None -> GCV
    gcv_log10_min: float = -6.0
    gcv_log10_max: float = 6.0
    gcv_points: int = 13
    gcv_log_tol: float = 0.05
    spectrum_count: int = 200
    rtol: float = 1e-8
    tol_div: float = 1e-6
    outlier_prepass: bool = True
    outlier_threshold: float = 2.0
    outlier_eps: float = 0.1

    # wall shear stress
    rho: float = 1060.0
    mu: float = 0.0035
    profile_points: int = 5
    profile_spacing: float | None = None  # None -> mean grid spacing
    wss_interpolation: str = "trilinear"

    def dfs_config(self, mode: str) -> DfsConfig:
        return DfsConfig(
            mode=mode,
            s=self.s,
            gcv_log10_range=(self.gcv_log10_min, self.gcv_log10_max),
            gcv_coarse_points=self.gcv_points,
            gcv_log10_tol=self.gcv_log_tol,
            spectrum_count=self.spectrum_count,
            rtol=self.rtol,
            tol_div=self.tol_div,
            outlier_prepass=self.outlier_prepass,
            outlier_threshold=self.outlier_threshold,
            outlier_eps=self.outlier_eps,
        )

    def wss_config(self) -> WssConfig:
        return WssConfig(
            n_points=self.profile_points,
            spacing=self.profile_spacing,
            interpolation=self.wss_interpolation,
        )


PRESETS: dict[str, dict] = {
    # the standard benchmark: noisy Poiseuille pipe, both smoothing modes,
    # fixed smoothing strength, full report
    "poiseuille-default": dict(
        do_bench=True,
        do_smooth=True,
        do_wss=True,
        do_compare=True,
        phantom_kind="poiseuille-pipe",
        phantom_dims=48,
        phantom_extent=0.03,
        phantom_radius=0.01,
        phantom_umax=1.0,
        noise_sigma=0.10,
        outlier_fraction=0.01,
        missing_fraction=0.0,
        seed=1234,
        mode="both",
        s=0.5,
        profile_spacing=0.5 * 0.03 / 48,
    ),
}


def _parse_value(name: str, text: str, current):
    text = text.strip()
    if name in ("s", "profile_spacing"):
        return None if text.lower() in ("", "none", "gcv", "auto") else float(text)
    if isinstance(current, bool):
        low = text.lower()
        if low in _BOOL_TRUE:
            return True
        if low in _BOOL_FALSE:
            return False
        raise ParameterError(f"config key {name}: expected a boolean, got {text!r}")
    if isinstance(current, int):
        return int(text)
    if isinstance(current, float):
        return float(text)
    return text


def apply_overrides(config: PipelineConfig, overrides: dict) -> PipelineConfig:
    names = {f.name for f in dataclasses.fields(PipelineConfig)}
    values = dataclasses.asdict(config)
    for key, value in overrides.items():
        if key not in names:
            raise ParameterError(f"unknown config key {key!r}")
        if isinstance(value, str):
            value = _parse_value(key, value, values[key])
        values[key] = value
    return PipelineConfig(**values)


def config_from_file(path, base: PipelineConfig | None = None) -> PipelineConfig:
    """Parse a flat key=value config file ('#' starts a comment)."""
    base = base or PipelineConfig()
    overrides = {}
    try:
        text = Path(path).read_text()
    except FileNotFoundError as exc:
        raise DataError(f"{path}: no such config file") from exc
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ParameterError(f"{path}:{lineno}: expected key=value, got {raw!r}")
        key, value = line.split("=", 1)
        overrides[key.strip()] = value.strip()
    return apply_overrides(base, overrides)


def preset_config(name: str, base: PipelineConfig | None = None) -> PipelineConfig:
    if name not in PRESETS:
        raise ParameterError(f"unknown preset {name!r}; available: {sorted(PRESETS)}")
    return apply_overrides(base or PipelineConfig(), PRESETS[name])


@dataclass
class PipelineResult:
    report: str
    outputs: dict[str, Path] = field(default_factory=dict)
    stats: dict = field(default_factory=dict)


def _segment_stage(config: PipelineConfig, report: io.StringIO):
    header, data = volio.read_volume(config.image_path)
    if header.n_components != 1:
        raise DataError(f"{config.image_path}: image stack must have 1 component")
    stack = ImageStack.from_array(data[0].astype(float))
    var_map = neighborhood_variance(stack, config.variance_window)
    sign_map = neighborhood_sign(stack, config.sign_window)
    fused = combine_and_median(var_map, sign_map, config.median_window, config.combine_strategy)
    mask = otsu_binarize(fused)
    report.write(f"segment: mask voxels {int(mask.sum())} of {mask.size}\n")
    return header.grid(), mask


def _load_inputs(config: PipelineConfig, report: io.StringIO):
    """Produce (field, geometry, truth or None) from preset or files."""
    if config.do_bench:
        grid = VolumeGrid(
            (config.phantom_dims,) * 3, (config.phantom_extent / config.phantom_dims,) * 3
        )
        spec = PhantomSpec(
            PhantomKind(config.phantom_kind),
            grid,
            radius=config.phantom_radius,
            axis=config.phantom_axis,
            u_max=config.phantom_umax,
            rho=config.rho,
            mu=config.mu,
        )
        phantom = generate_phantom(spec, theta_min=config.theta_min)
        noisy = corrupt(
            phantom.truth,
            CorruptionSpec(
                gaussian_sigma=config.noise_sigma,
                outlier_fraction=config.outlier_fraction,
                missing_fraction=config.missing_fraction,
                seed=config.seed,
            ),
            reference_speed=config.phantom_umax,
        )
        report.write(
            "bench: %s dims=%d radius=%g noise=%g outliers=%g missing=%g seed=%d\n"
            % (
                config.phantom_kind,
                config.phantom_dims,
                config.phantom_radius,
                config.noise_sigma,
                config.outlier_fraction,
                config.missing_fraction,
                config.seed,
            )
        )
        return noisy, phantom.geometry, phantom

    if config.do_segment:
        grid, mask = _segment_stage(config, report)
    elif config.mask_path:
        grid, mask = volio.read_mask_volume(config.mask_path)
    else:
        raise DataError("no mask available: provide mask_path, image_path, or a phantom preset")
    geometry = levelset_from_mask(mask, grid, theta_min=config.theta_min)

    if not config.velocity_path:
        raise DataError("no velocity input: provide velocity_path or a phantom preset")
    weight = None
    if config.weights_path:
        _, wdata = volio.read_volume(config.weights_path)
        weight = wdata[0].astype(float)
    velocity = volio.read_velocity_volume(config.velocity_path, mask=mask, weight=weight)
    return velocity, geometry, None


def run_pipeline(config: PipelineConfig) -> PipelineResult:
    """Execute the enabled stages in order; returns the report and paths."""
    out_dir = Path(config.output_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    report = io.StringIO()
    outputs: dict[str, Path] = {}
    stats: dict = {}
    report.write("vesselflow pipeline report\n")
    for key, value in sorted(dataclasses.asdict(config).items()):
        report.write(f"  {key} = {value}\n")
    report.write("\n")

    velocity, geometry, phantom = _load_inputs(config, report)

    if config.do_bench:
        outputs["truth"] = out_dir / "truth.vesvol"
        volio.write_velocity_volume(outputs["truth"], phantom.truth)
        outputs["corrupted"] = out_dir / "corrupted.vesvol"
        volio.write_velocity_volume(outputs["corrupted"], velocity)

    layout = FieldLayout.from_field(velocity)
    a_improved = assemble_divergence(layout, geometry, "improved")
    fields = {"input": velocity}
    smoothed: dict[str, VelocityField] = {}

    if config.do_smooth:
        modes = ("improved",) if config.mode == "improved" else (
            ("traditional",) if config.mode == "traditional" else ("traditional", "improved")
        )
        for mode in modes:
            result = smooth_field(velocity, geometry, config.dfs_config(mode))
            smoothed[mode] = result.field
            fields[mode] = result.field
            label = "fixed" if result.s_fixed else "gcv-selected"
            report.write(
                "smooth[%s]: s: %s (%.6g)  iterations=%d  kkt_residual=%.3e  "
                "feasibility=%.3e  outliers_flagged=%d\n"
                % (
                    mode,
                    label,
                    result.s_used,
                    result.solution.iterations,
                    result.solution.kkt_residual,
                    result.solution.feasibility,
                    result.outlier_voxels,
                )
            )
            path = out_dir / f"smoothed_{mode}.vesvol"
            volio.write_velocity_volume(path, result.field)
            outputs[f"smoothed_{mode}"] = path
            if config.export_vtk:
                vtk_path = out_dir / f"smoothed_{mode}.vtk"
                volio.write_vtk_volume(
                    vtk_path,
                    velocity.grid,
                    scalars={"speed": result.field.magnitude()},
                    vectors={"velocity": np.stack(result.field.components())},
                )
                outputs[f"smoothed_{mode}_vtk"] = vtk_path

        div = {
            name: divergence_stats(fld, a_improved, layout) for name, fld in fields.items()
        }
        stats["divergence"] = div
        report.write("\ndivergence (grid units, wall-aware rows):\n")
        report.write(divergence_table(div) + "\n")
        if phantom is not None:
            u_ref = config.phantom_umax
        else:
            u_ref = float(np.percentile(velocity.magnitude()[velocity.vessel_mask], 99))
        if u_ref > 0:
            report.write("\nno-slip wall extrapolation (pass @ 5%% of %.3g m/s):\n" % u_ref)
            for name, fld in fields.items():
                frac = noslip_pass_fraction(fld, geometry, u_ref=u_ref, tol=0.05)
                stats[f"noslip_{name}"] = frac
                report.write("  %-12s %.4f\n" % (name, frac))
        report.write("\n")

    if config.do_wss:
        wss_input = smoothed.get("improved", velocity)
        wss = compute_wss_field(
            wss_input, geometry, rho=config.rho, mu=config.mu, config=config.wss_config()
        )
        ok = wss.status == int(WssStatus.OK)
        stats["wss_median"] = float(np.median(wss.tau[ok])) if ok.any() else 0.0
        report.write(
            "wss: vertices=%d ok=%d stagnant=%d thin=%d median_tau=%.6g Pa\n"
            % (
                wss.n_vertices,
                int(ok.sum()),
                int((wss.status == int(WssStatus.STAGNANT)).sum()),
                int((wss.status == int(WssStatus.THIN)).sum()),
                stats["wss_median"],
            )
        )
        if phantom is not None:
            err = abs(stats["wss_median"] - phantom.tau_wall) / phantom.tau_wall
            stats["wss_median_error"] = err
            report.write(
                "wss: analytic tau_w=%.6g Pa  median error=%.2f%%\n"
                % (phantom.tau_wall, 100 * err)
            )
        mesh_path = out_dir / "wss.vtk"
        volio.write_vtk_mesh(
            mesh_path,
            geometry.surface,
            point_scalars={"wss": wss.tau, "u_tau": wss.u_tau, "status": wss.status.astype(float)},
            point_vectors={"wss_vector": wss.tau[:, None] * wss.direction},
        )
        outputs["wss_mesh"] = mesh_path
        csv_path = out_dir / "wss.csv"

        def emit_csv(handle):
            handle.write(b"vertex,x,y,z,u_tau,tau,status\n")
            verts = geometry.surface.vertices
            for i in range(wss.n_vertices):
                handle.write(
                    (
                        "%d,%.9g,%.9g,%.9g,%.9g,%.9g,%d\n"
                        % (
                            i,
                            verts[i, 0],
                            verts[i, 1],
                            verts[i, 2],
                            wss.u_tau[i],
                            wss.tau[i],
                            wss.status[i],
                        )
                    ).encode("ascii")
                )

        volio._atomic_write(csv_path, emit_csv)
        outputs["wss_csv"] = csv_path
        report.write("\n")

    if config.do_compare and phantom is not None and smoothed:
        report.write("correlation to truth (in-vessel voxels):\n")
        for name, fld in smoothed.items():
            corr = field_correlation_partial(fld, phantom.truth)
            stats[f"correlation_{name}"] = corr
            report.write(correlation_table(corr, label=name) + "\n\n")

    if config.do_smooth and "divergence" in stats:
        csv_path = out_dir / "stats.csv"
        div = stats["divergence"]

        def emit_stats(handle):
            handle.write(b"field,mean_abs_div,max_abs_div,n_rows\n")
            for name, st in div.items():
                handle.write(
                    ("%s,%.9g,%.9g,%d\n" % (name, st.mean_abs, st.max_abs, st.n_rows)).encode()
                )

        volio._atomic_write(csv_path, emit_stats)
        outputs["stats_csv"] = csv_path

    text = report.getvalue()
    report_path = out_dir / "report.txt"
    volio._atomic_write(report_path, lambda handle: handle.write(text.encode("utf-8")))
    outputs["report"] = report_path
    return PipelineResult(text, outputs, stats)
