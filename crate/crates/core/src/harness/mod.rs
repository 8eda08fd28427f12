//! Scenario runner: wires the phantom, probe, trajectory, mosaic, servo and
//! ablation layers into named end-to-end experiments.
//!
//! [`run`] executes one [`ScenarioConfig`] against a freshly built
//! [`SimPlant`] and returns metrics plus every artifact of the run; the
//! companion [`write_artifacts`] stores them in the layout the CLI promises
//! (mosaic.pgm, runlog.csv, metrics.json, scene.pgm). Runs are deterministic:
//! the same config and seed produce byte-identical metrics JSON, so the
//! metrics deliberately contain only simulated quantities — wall-clock
//! numbers live in the separate registration benchmark report.

pub mod plant;
pub mod scenario;

pub use plant::{stream_rng, streams, SimPlant};
pub use scenario::{
    builtin_scenario, load_scenario, PhantomConfig, PhantomKind, PlanConfig, ScanPattern,
    ScenarioConfig, ServoSection, SCENARIO_SCHEMA_VERSION,
};

use std::fs;
use std::io::BufWriter;
use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ablation::{fire, measure_mark, target_centre, AblationError, MarkMeasurement};
use crate::endoscope::Probe;
use crate::kinematics::{
    tip_to_volts, volts_to_tip, MotorCommand, ScannerGeometry, TipPose, Workspace,
};
use crate::mosaic::{
    measure_grid, measure_mosaic_diameter_mm, GridMeasurement, MosaicParams, Mosaicker,
    OverflowPolicy,
};
use crate::phantom::{make_grid, make_texture, save_scene, PhantomError, Scene};
use crate::raster::{ImageBuf, RasterError};
use crate::servo::{
    servo_scan, Plant, RunRecord, ServoCalibration, ServoConfig, ServoError, ServoMode,
    ServoOutcome,
};
use crate::trajectory::{linear_scan, raster_scan, spiral_scan, ScanPlan, TrajectoryError};

/// Canvas pixels darker than this count as ablated when locating a mark.
const MARK_THRESHOLD: f64 = 0.02;

/// Border added around the plan's pixel extent when sizing a canvas
/// automatically: one pasted-disc radius, the registration search margin and
/// slack for disturbance drift.
const AUTO_CANVAS_MARGIN_PX: f64 = 256.0;

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("invalid scenario config:\n  {}", .0.join("\n  "))]
    InvalidConfig(Vec<String>),
    #[error("scenario not found: {0}")]
    UnknownScenario(String),
    #[error("scenario parse: {0}")]
    Parse(String),
    #[error(transparent)]
    Phantom(#[from] PhantomError),
    #[error(transparent)]
    Trajectory(#[from] TrajectoryError),
    #[error(transparent)]
    Servo(#[from] ServoError),
    #[error(transparent)]
    Ablation(#[from] AblationError),
    #[error(transparent)]
    Raster(#[from] RasterError),
    #[error("artifact io: {0}")]
    Io(#[from] std::io::Error),
}

/// Ablation-mark summary included in the metrics of ablation scenarios.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MarkMetrics {
    /// Mark centroid minus the rescan canvas centre, px.
    pub centroid_offset_px: (f64, f64),
    pub equivalent_diameter_um: f64,
}

/// The reported quantities of a run. Everything here is simulated and
/// deterministic; whole-pipeline wall-clock throughput is the registration
/// benchmark's business.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Metrics {
    pub scenario: String,
    pub seed: u64,
    /// Frames captured across all phases (scan, retarget, rescan).
    pub frames_processed: usize,
    /// Frames that fell back to dead reckoning.
    pub registration_failures: usize,
    /// RMS deviation between the mosaic-estimated and planned trajectory, µm.
    pub rms_tracking_error_um: f64,
    pub max_tracking_error_um: f64,
    pub mosaic_diameter_mm: Option<f64>,
    pub coverage_area_mm2: f64,
    pub grid_measurements_um: Option<GridMeasurement>,
    pub mark: Option<MarkMetrics>,
    pub simulated_duration_s: f64,
    /// Frames per simulated second.
    pub throughput_fps: f64,
}

/// Everything a scenario run produces.
pub struct RunArtifacts {
    pub config: ScenarioConfig,
    pub metrics: Metrics,
    /// The controlled scan phase.
    pub scan: ServoOutcome,
    /// The open-loop rescan after firing, for ablation scenarios.
    pub rescan: Option<ServoOutcome>,
    pub mark: Option<MarkMeasurement>,
    /// Final world state, including any burned marks.
    pub scene: Scene,
}

/// Builds the scene a scenario asks for. Texture synthesis draws from the
/// scene stream of the scenario seed.
fn build_scene(config: &ScenarioConfig) -> Result<Scene, HarnessError> {
    let ph = &config.phantom;
    let scene = match ph.kind {
        PhantomKind::Grid => make_grid(&ph.grid, ph.extent_mm, ph.resolution_um_per_px)?,
        PhantomKind::Texture => {
            let mut rng = stream_rng(config.seed, streams::SCENE);
            make_texture(
                &mut rng,
                ph.extent_mm,
                ph.texture_feature_um,
                ph.resolution_um_per_px,
            )?
        }
    };
    Ok(scene)
}

fn build_plan(plan: &PlanConfig, workspace: &Workspace) -> Result<ScanPlan, HarnessError> {
    let built = match plan.pattern {
        ScanPattern::Linear => linear_scan(&plan.params, workspace)?,
        ScanPattern::Raster => raster_scan(
            &plan.params,
            plan.raster_rows,
            plan.raster_row_spacing_mm,
            workspace,
        )?,
        ScanPattern::Spiral => spiral_scan(&plan.params, workspace)?,
    };
    Ok(built)
}

/// Canvas large enough for the plan with [`AUTO_CANVAS_MARGIN_PX`] of border,
/// symmetric about the scan start (where the mosaic anchors its first frame).
fn auto_canvas_px(plan: &ScanPlan, working_res_um_per_px: f64) -> (usize, usize) {
    let start = plan.start();
    let mut half_x = 0.0f64;
    let mut half_y = 0.0f64;
    for p in plan.points() {
        half_x = half_x.max((p.x_mm - start.x_mm).abs() * 1000.0 / working_res_um_per_px);
        half_y = half_y.max((p.y_mm - start.y_mm).abs() * 1000.0 / working_res_um_per_px);
    }
    let side = |half: f64| 2 * (half + AUTO_CANVAS_MARGIN_PX).ceil() as usize + 1;
    (side(half_x), side(half_y))
}

fn servo_config_for(config: &ScenarioConfig, plan: &ScanPlan) -> ServoConfig {
    let mosaic = MosaicParams {
        max_consecutive_degenerate: config.mosaic.max_consecutive_degenerate,
        overflow: OverflowPolicy::Grow,
        ..MosaicParams::default()
    };
    let working_res_um_per_px =
        config.probe.fov_diameter_um() / mosaic.registration.working_px as f64;
    // The instrument is taken as rotation-calibrated: the controller gets the
    // true bundle angle. `calibrate_phi` (CLI `calibrate`) demonstrates how
    // that angle is estimated from scratch.
    let calibration = ServoCalibration {
        phi_rad: config.rotation_deg.to_radians(),
        volts_per_px: working_res_um_per_px / config.geometry.tip_um_per_volt,
    };
    ServoConfig {
        calibration,
        gains: config.servo.gains,
        mode: config.servo.mode,
        latency_ticks: config.servo.latency_ticks,
        smoothing_alpha: config.servo.smoothing_alpha,
        mosaic,
        canvas_px: config
            .canvas_px
            .unwrap_or_else(|| auto_canvas_px(plan, working_res_um_per_px)),
        working_res_um_per_px,
    }
}

/// Executes one scenario end to end.
pub fn run(config: &ScenarioConfig) -> Result<RunArtifacts, HarnessError> {
    config.validate()?;
    let geometry = config.geometry.clone();
    let workspace = Workspace::default();
    let scene = build_scene(config)?;
    let plan = build_plan(&config.plan, &workspace)?;
    let servo_config = servo_config_for(config, &plan);
    let probe = Probe::new(config.probe.clone());
    let dt = probe.spec().frame_period_s();

    let mut plant = SimPlant::new(
        scene,
        probe,
        config.rotation_deg.to_radians(),
        config.disturbance.clone(),
        config.deformation.clone(),
        geometry.clone(),
        workspace.clone(),
        config.seed,
        plan.start().pose(),
    );

    let mut scan = servo_scan(&mut plant, &plan, &servo_config, &geometry, &workspace)?;

    let mut rescan = None;
    let mut mark = None;
    if let Some(ab) = &config.ablation {
        // Aim the fibre at the world point under the imaging axis at the
        // mosaic centre — the scan start, where the canvas is anchored.
        let aim = plan.start().pose();
        let retarget = target_centre(&aim, ab, &workspace)?;
        let retarget_v = tip_to_volts(&retarget, &geometry, &workspace).value;
        let settle = plant.step_and_capture(MotorCommand::new(retarget_v.v1, retarget_v.v2));
        fire(
            plant.scene_mut(),
            (aim.x_mm * 1000.0, aim.y_mm * 1000.0),
            ab,
            false,
        )?;
        // The fire event joins the log with the retarget pose and timestamp.
        scan.log.records.push(RunRecord {
            t_s: plan.duration_s() + dt,
            desired_v: (retarget_v.v1, retarget_v.v2),
            measured_v: (retarget_v.v1, retarget_v.v2),
            command_v: (retarget_v.v1, retarget_v.v2),
            dead_reckoned: false,
            saturated: false,
            out_of_field: settle.out_of_field,
            fired: true,
        });

        // Inspect the result open-loop: the crater has no image signal, so
        // closed-loop corrections over it would chase dead-reckoned guesses.
        let rescan_config = ServoConfig {
            mode: ServoMode::Open,
            ..servo_config.clone()
        };
        let out = servo_scan(&mut plant, &plan, &rescan_config, &geometry, &workspace)?;
        mark = Some(measure_mark(&out.canvas, MARK_THRESHOLD)?);
        rescan = Some(out);
    }

    let um_per_volt = geometry.tip_um_per_volt;
    let frames_processed = plant.frames();
    let registration_failures = scan.stats.dead_reckoned_frames
        + rescan
            .as_ref()
            .map(|r| r.stats.dead_reckoned_frames)
            .unwrap_or(0);
    let grid_measurements_um = match config.phantom.kind {
        PhantomKind::Grid => measure_grid(&scan.canvas, 0.3).ok(),
        PhantomKind::Texture => None,
    };
    let simulated_duration_s = frames_processed as f64 * dt;
    let metrics = Metrics {
        scenario: config.name.clone(),
        seed: config.seed,
        frames_processed,
        registration_failures,
        rms_tracking_error_um: scan.log.rms_tracking_error_um(um_per_volt),
        max_tracking_error_um: scan.log.max_tracking_error_um(um_per_volt),
        mosaic_diameter_mm: measure_mosaic_diameter_mm(&scan.canvas),
        coverage_area_mm2: scan.canvas.coverage_area_mm2(),
        grid_measurements_um,
        mark: mark.as_ref().zip(rescan.as_ref()).map(|(m, r)| MarkMetrics {
            centroid_offset_px: (
                m.centroid_px.0 - r.canvas_centre_px.0,
                m.centroid_px.1 - r.canvas_centre_px.1,
            ),
            equivalent_diameter_um: m.equivalent_diameter_um,
        }),
        simulated_duration_s,
        throughput_fps: frames_processed as f64 / simulated_duration_s,
    };

    Ok(RunArtifacts {
        config: config.clone(),
        metrics,
        scan,
        rescan,
        mark,
        scene: plant.into_scene(),
    })
}

/// Writes the artifact set for a finished run: `mosaic.pgm`, `runlog.csv`,
/// `metrics.json`, `scene.pgm` + `scene.json`, and `rescan.pgm` after an
/// ablation.
pub fn write_artifacts(artifacts: &RunArtifacts, dir: &Path) -> Result<(), HarnessError> {
    fs::create_dir_all(dir)?;
    let mut mosaic = BufWriter::new(fs::File::create(dir.join("mosaic.pgm"))?);
    artifacts.scan.canvas.image().write_pgm16(&mut mosaic)?;
    if let Some(rescan) = &artifacts.rescan {
        let mut f = BufWriter::new(fs::File::create(dir.join("rescan.pgm"))?);
        rescan.canvas.image().write_pgm16(&mut f)?;
    }
    let mut log = BufWriter::new(fs::File::create(dir.join("runlog.csv"))?);
    artifacts.scan.log.write_csv(&mut log)?;
    fs::write(
        dir.join("metrics.json"),
        metrics_json(&artifacts.metrics) + "\n",
    )?;
    let mut scene_pgm = BufWriter::new(fs::File::create(dir.join("scene.pgm"))?);
    let mut scene_header = BufWriter::new(fs::File::create(dir.join("scene.json"))?);
    save_scene(&artifacts.scene, &mut scene_pgm, &mut scene_header)?;
    Ok(())
}

/// Canonical metrics serialisation; the determinism contract is stated over
/// this exact string.
pub fn metrics_json(metrics: &Metrics) -> String {
    serde_json::to_string_pretty(metrics).expect("metrics are always serialisable")
}

/// Workspace-sweep configuration: a uniform grid of commanded positions with
/// a simple measured-response model (gain plus Gaussian actuation noise).
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SweepConfig {
    pub version: u32,
    pub grid_points_per_axis: usize,
    pub span_mm: f64,
    pub actuation_noise_sigma_um: f64,
    /// Multiplicative response gain of the simulated stage (1 = ideal).
    pub response_gain: f64,
    pub seed: u64,
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self {
            version: SCENARIO_SCHEMA_VERSION,
            grid_points_per_axis: 18,
            span_mm: 3.7,
            actuation_noise_sigma_um: 8.0,
            response_gain: 1.0,
            seed: 42,
        }
    }
}

/// Neighbour-distance statistics over the measured sweep grid.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SweepReport {
    pub commanded_spacing_um: f64,
    pub neighbour_mean_um: f64,
    pub neighbour_iqr_um: f64,
    pub neighbour_count: usize,
}

fn percentile(sorted: &[f64], p: f64) -> f64 {
    let idx = (sorted.len() - 1) as f64 * p;
    let lo = idx.floor() as usize;
    let hi = idx.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (idx - lo as f64)
}

/// Commands a uniform grid across the workspace through the actuation map,
/// perturbs the reached positions with the configured gain and noise, and
/// reports adjacent-neighbour distance statistics.
pub fn workspace_sweep(
    config: &SweepConfig,
    geometry: &ScannerGeometry,
    workspace: &Workspace,
) -> Result<SweepReport, HarnessError> {
    let mut problems = Vec::new();
    if config.version != SCENARIO_SCHEMA_VERSION {
        problems.push(format!(
            "version: expected {SCENARIO_SCHEMA_VERSION}, got {}",
            config.version
        ));
    }
    if config.grid_points_per_axis < 2 {
        problems.push("grid_points_per_axis: need at least 2".to_string());
    }
    if !(config.span_mm > 0.0) || config.span_mm > 2.0 * workspace.half_width_mm {
        problems.push(format!(
            "span_mm: {} outside (0, {}]",
            config.span_mm,
            2.0 * workspace.half_width_mm
        ));
    }
    if config.actuation_noise_sigma_um < 0.0 {
        problems.push("actuation_noise_sigma_um: negative".to_string());
    }
    if !(config.response_gain > 0.0) {
        problems.push("response_gain: must be positive".to_string());
    }
    if !problems.is_empty() {
        return Err(HarnessError::InvalidConfig(problems));
    }

    let n = config.grid_points_per_axis;
    let spacing_mm = config.span_mm / (n - 1) as f64;
    let mut rng = stream_rng(config.seed, streams::SWEEP);
    let mut gauss = move || {
        use rand::Rng;
        let u1: f64 = rng.gen_range(f64::EPSILON..1.0);
        let u2: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
        (-2.0 * u1.ln()).sqrt() * u2.cos()
    };

    let centre = workspace.centre;
    let mut measured = vec![(0.0f64, 0.0f64); n * n];
    for iy in 0..n {
        for ix in 0..n {
            let target = TipPose::new(
                centre.x_mm - config.span_mm / 2.0 + ix as f64 * spacing_mm,
                centre.y_mm - config.span_mm / 2.0 + iy as f64 * spacing_mm,
            );
            let v = tip_to_volts(&target, geometry, workspace).value;
            let reached = volts_to_tip(&v, geometry, workspace).value;
            let sigma_mm = config.actuation_noise_sigma_um / 1000.0;
            measured[iy * n + ix] = (
                centre.x_mm
                    + config.response_gain * (reached.x_mm - centre.x_mm)
                    + sigma_mm * gauss(),
                centre.y_mm
                    + config.response_gain * (reached.y_mm - centre.y_mm)
                    + sigma_mm * gauss(),
            );
        }
    }

    let mut distances_um = Vec::with_capacity(2 * n * (n - 1));
    for iy in 0..n {
        for ix in 0..n {
            let a = measured[iy * n + ix];
            if ix + 1 < n {
                let b = measured[iy * n + ix + 1];
                distances_um.push((b.0 - a.0).hypot(b.1 - a.1) * 1000.0);
            }
            if iy + 1 < n {
                let b = measured[(iy + 1) * n + ix];
                distances_um.push((b.0 - a.0).hypot(b.1 - a.1) * 1000.0);
            }
        }
    }
    distances_um.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let mean = distances_um.iter().sum::<f64>() / distances_um.len() as f64;
    let iqr = percentile(&distances_um, 0.75) - percentile(&distances_um, 0.25);
    Ok(SweepReport {
        commanded_spacing_um: spacing_mm * 1000.0,
        neighbour_mean_um: mean,
        neighbour_iqr_um: iqr,
        neighbour_count: distances_um.len(),
    })
}

/// Wall-clock registration benchmark report.
#[derive(Debug, Clone, Serialize)]
pub struct BenchReport {
    pub pairs: usize,
    pub mean_ms: f64,
    pub p99_ms: f64,
    pub fps: f64,
}

/// Times the full per-frame mosaicking step (working-scale resize, NCC
/// registration, integration, compositing) over `pairs` consecutive frame
/// pairs. `next_frame(k)` supplies frame `k`; generation is excluded from
/// the timings.
pub fn bench_registration<F>(pairs: usize, mut next_frame: F) -> BenchReport
where
    F: FnMut(usize) -> ImageBuf,
{
    assert!(pairs >= 1);
    let mut mosaicker = Mosaicker::new(
        MosaicParams {
            overflow: OverflowPolicy::Grow,
            ..MosaicParams::default()
        },
        1024,
        1024,
        1.2,
    );
    let mut times_ms = Vec::with_capacity(pairs);
    for k in 0..=pairs {
        let frame = next_frame(k);
        let t0 = Instant::now();
        mosaicker
            .add_frame(&frame, (0.0, 0.0))
            .expect("benchmark corpus must stay registrable");
        let elapsed = t0.elapsed().as_secs_f64() * 1000.0;
        if k > 0 {
            times_ms.push(elapsed);
        }
    }
    times_ms.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let mean_ms = times_ms.iter().sum::<f64>() / times_ms.len() as f64;
    let p99_idx = ((times_ms.len() as f64 * 0.99).ceil() as usize).max(1) - 1;
    BenchReport {
        pairs,
        mean_ms,
        p99_ms: times_ms[p99_idx],
        fps: 1000.0 / mean_ms,
    }
}

/// Seeded synthetic benchmark corpus: capture-resolution crops of one large
/// texture along a bounded random walk, standing in for live frames.
pub fn synthetic_bench_frames(seed: u64) -> impl FnMut(usize) -> ImageBuf {
    use rand::Rng;
    let mut scene_rng = stream_rng(seed, streams::SCENE);
    let texture = make_texture(&mut scene_rng, 1.5, 30.0, 0.9375)
        .expect("benchmark texture parameters are valid");
    let field = texture.field().clone();
    let mut walk_rng = stream_rng(seed, streams::SWEEP);
    let half = 450i64;
    let (mut x, mut y) = (0i64, 0i64);
    move |k| {
        if k > 0 {
            x = (x + walk_rng.gen_range(-30..=30)).clamp(-half, half);
            y = (y + walk_rng.gen_range(-30..=30)).clamp(-half, half);
        }
        let cx = field.width() as i64 / 2 + x - 128;
        let cy = field.height() as i64 / 2 + y - 128;
        let mut out = ImageBuf::zeros(256, 256);
        for iy in 0..256usize {
            for ix in 0..256usize {
                out.set(
                    ix,
                    iy,
                    field.get((cx + ix as i64) as usize, (cy + iy as i64) as usize),
                );
            }
        }
        out
    }
}
