//! Scenario configuration: the JSON schema that fully determines a run.
//!
//! A [`ScenarioConfig`] plus nothing else decides every byte of a run's
//! output: scene synthesis, plan generation, plant dynamics and controller
//! settings all read from it, and all randomness derives from its single
//! seed. The schema is versioned, rejects unknown keys, and embeds units in
//! key names. The named scenarios reproducing the reference experiments ship
//! embedded in the binary; [`load_scenario`] resolves a name or a file path.

use serde::{Deserialize, Serialize};

use crate::endoscope::ProbeSpec;
use crate::kinematics::{ScannerGeometry, Workspace};
use crate::phantom::{DeformationModel, DisturbanceModel, GridSpec};
use crate::servo::{ServoGains, ServoMode};
use crate::trajectory::ScanParams;
use crate::ablation::AblationConfig;

use super::HarnessError;

/// Only schema this build reads.
pub const SCENARIO_SCHEMA_VERSION: u32 = 1;

/// Scan pattern selector.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScanPattern {
    Linear,
    Raster,
    Spiral,
}

/// Plan section: pattern plus the shared trajectory parameters.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PlanConfig {
    pub pattern: ScanPattern,
    #[serde(default)]
    pub params: ScanParams,
    /// Raster row count; ignored by other patterns.
    #[serde(default = "default_raster_rows")]
    pub raster_rows: usize,
    /// Raster row spacing, mm; ignored by other patterns.
    #[serde(default = "default_row_spacing")]
    pub raster_row_spacing_mm: f64,
}

fn default_raster_rows() -> usize {
    4
}

fn default_row_spacing() -> f64 {
    0.18
}

/// Which synthetic scene to build.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PhantomKind {
    Grid,
    Texture,
}

/// Phantom section. Grid scenes use `grid`; texture scenes use
/// `texture_feature_um`. The scene is centred on the workspace centre.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PhantomConfig {
    pub kind: PhantomKind,
    pub extent_mm: f64,
    #[serde(default)]
    pub grid: GridSpec,
    #[serde(default = "default_feature_um")]
    pub texture_feature_um: f64,
    #[serde(default = "default_scene_res")]
    pub resolution_um_per_px: f64,
}

fn default_feature_um() -> f64 {
    30.0
}

fn default_scene_res() -> f64 {
    1.0
}

/// Controller section.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ServoSection {
    pub mode: ServoMode,
    pub gains: ServoGains,
    /// Whole frames between a measurement and the correction it feeds.
    pub latency_ticks: usize,
    /// One-pole smoothing of the PI output; `alpha * kp` must stay below 1.
    pub smoothing_alpha: f64,
}

impl Default for ServoSection {
    fn default() -> Self {
        Self {
            mode: ServoMode::Open,
            gains: ServoGains::default(),
            latency_ticks: 1,
            smoothing_alpha: 0.05,
        }
    }
}

/// Mosaicking knobs a scenario may override.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MosaicSection {
    /// Consecutive dead-reckoned frames tolerated before aborting. Scans over
    /// sparse structure (the coarse calibration grid, fresh ablation marks)
    /// legitimately dead-reckon for stretches and raise this.
    pub max_consecutive_degenerate: usize,
}

impl Default for MosaicSection {
    fn default() -> Self {
        Self {
            max_consecutive_degenerate: 10,
        }
    }
}

/// A complete, self-contained description of one simulation run.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConfig {
    /// Schema version; must equal [`SCENARIO_SCHEMA_VERSION`].
    pub version: u32,
    pub name: String,
    /// Root seed; every random stream in the run derives from it.
    pub seed: u64,
    #[serde(default)]
    pub geometry: ScannerGeometry,
    #[serde(default)]
    pub probe: ProbeSpec,
    pub plan: PlanConfig,
    pub phantom: PhantomConfig,
    /// Rigid-motion disturbance; zero speed disables it.
    #[serde(default = "no_disturbance")]
    pub disturbance: DisturbanceModel,
    /// Probe-drag tissue deformation; zero drag disables it.
    #[serde(default)]
    pub deformation: DeformationModel,
    /// Fibre-bundle rotation against the actuator axes, deg.
    #[serde(default)]
    pub rotation_deg: f64,
    #[serde(default)]
    pub servo: ServoSection,
    #[serde(default)]
    pub mosaic: MosaicSection,
    /// Fire an ablation pulse at the mosaic centre after the scan, then
    /// rescan open-loop.
    #[serde(default)]
    pub ablation: Option<AblationConfig>,
    /// Canvas size override, px at the working scale; sized from the plan
    /// extent when absent.
    #[serde(default)]
    pub canvas_px: Option<(usize, usize)>,
}

fn no_disturbance() -> DisturbanceModel {
    DisturbanceModel {
        amplitude_um: 0.0,
        speed_mm_per_s: 0.0,
    }
}

impl ScenarioConfig {
    /// Checks every field and reports all violations at once.
    pub fn validate(&self) -> Result<(), HarnessError> {
        let mut problems = Vec::new();
        let mut check = |ok: bool, msg: String| {
            if !ok {
                problems.push(msg);
            }
        };

        check(
            self.version == SCENARIO_SCHEMA_VERSION,
            format!(
                "version: expected {SCENARIO_SCHEMA_VERSION}, got {}",
                self.version
            ),
        );
        if let Err(e) = self.geometry.validate() {
            check(false, format!("geometry: {e}"));
        }

        let p = &self.probe;
        check(p.field_px >= 16, format!("probe.field_px: {} < 16", p.field_px));
        check(
            p.resolution_um_per_px > 0.0,
            format!("probe.resolution_um_per_px: {} not positive", p.resolution_um_per_px),
        );
        check(
            p.frame_rate_hz > 0.0,
            format!("probe.frame_rate_hz: {} not positive", p.frame_rate_hz),
        );
        check(
            p.core_spacing_um > 0.0,
            format!("probe.core_spacing_um: {} not positive", p.core_spacing_um),
        );
        check(
            p.noise_sigma >= 0.0,
            format!("probe.noise_sigma: {} negative", p.noise_sigma),
        );

        let s = &self.plan.params;
        check(
            s.point_frequency_hz > 0.0,
            format!("plan.params.point_frequency_hz: {} not positive", s.point_frequency_hz),
        );
        check(
            s.speed_mm_per_s > 0.0,
            format!("plan.params.speed_mm_per_s: {} not positive", s.speed_mm_per_s),
        );
        match self.plan.pattern {
            ScanPattern::Linear => check(
                s.length_mm > 0.0,
                format!("plan.params.length_mm: {} not positive", s.length_mm),
            ),
            ScanPattern::Raster => {
                check(
                    s.length_mm > 0.0,
                    format!("plan.params.length_mm: {} not positive", s.length_mm),
                );
                check(
                    self.plan.raster_rows >= 1,
                    "plan.raster_rows: must be at least 1".to_string(),
                );
                check(
                    self.plan.raster_row_spacing_mm > 0.0,
                    format!(
                        "plan.raster_row_spacing_mm: {} not positive",
                        self.plan.raster_row_spacing_mm
                    ),
                );
            }
            ScanPattern::Spiral => {
                check(
                    s.spiral_pitch_mm > 0.0,
                    format!("plan.params.spiral_pitch_mm: {} not positive", s.spiral_pitch_mm),
                );
                check(
                    s.max_radius_mm > 0.0,
                    format!("plan.params.max_radius_mm: {} not positive", s.max_radius_mm),
                );
            }
        }

        let ph = &self.phantom;
        check(
            ph.extent_mm > 0.0,
            format!("phantom.extent_mm: {} not positive", ph.extent_mm),
        );
        check(
            ph.resolution_um_per_px > 0.0,
            format!("phantom.resolution_um_per_px: {} not positive", ph.resolution_um_per_px),
        );
        match ph.kind {
            PhantomKind::Grid => {
                check(
                    ph.grid.line_thickness_um > 0.0 && ph.grid.square_width_um > 0.0,
                    format!(
                        "phantom.grid: line {} / square {} must be positive",
                        ph.grid.line_thickness_um, ph.grid.square_width_um
                    ),
                );
            }
            PhantomKind::Texture => check(
                ph.texture_feature_um > 0.0,
                format!("phantom.texture_feature_um: {} not positive", ph.texture_feature_um),
            ),
        }

        check(
            self.disturbance.amplitude_um >= 0.0 && self.disturbance.speed_mm_per_s >= 0.0,
            format!(
                "disturbance: amplitude {} µm / speed {} mm/s must be non-negative",
                self.disturbance.amplitude_um, self.disturbance.speed_mm_per_s
            ),
        );
        check(
            (0.0..1.0).contains(&self.deformation.drag_coefficient),
            format!(
                "deformation.drag_coefficient: {} outside [0, 1)",
                self.deformation.drag_coefficient
            ),
        );
        check(
            self.deformation.recovery_time_s > 0.0,
            format!("deformation.recovery_time_s: {} not positive", self.deformation.recovery_time_s),
        );

        let sv = &self.servo;
        check(
            sv.smoothing_alpha > 0.0 && sv.smoothing_alpha <= 1.0,
            format!("servo.smoothing_alpha: {} outside (0, 1]", sv.smoothing_alpha),
        );
        check(
            sv.gains.kp_per_min > 0.0,
            format!("servo.gains.kp_per_min: {} not positive", sv.gains.kp_per_min),
        );
        check(
            sv.gains.ki_per_min2 >= 0.0 && sv.gains.accumulator_limit_v_min >= 0.0,
            "servo.gains: integral gain and accumulator limit must be non-negative".to_string(),
        );
        // Stability of the one-pole-smoothed proportional loop: the
        // zero-latency pole is 1 - alpha(1 + kp), so alpha(1 + kp) < 2; with
        // a tick of latency the root product is alpha * kp, so alpha * kp < 1.
        if sv.latency_ticks == 0 {
            check(
                sv.smoothing_alpha * (1.0 + sv.gains.kp_per_min) < 2.0,
                format!(
                    "servo: smoothing_alpha * (1 + kp) = {} reaches 2; loop unstable",
                    sv.smoothing_alpha * (1.0 + sv.gains.kp_per_min)
                ),
            );
        } else {
            check(
                sv.smoothing_alpha * sv.gains.kp_per_min < 1.0,
                format!(
                    "servo: smoothing_alpha * kp = {} reaches 1; unstable with latency",
                    sv.smoothing_alpha * sv.gains.kp_per_min
                ),
            );
        }
        check(
            self.mosaic.max_consecutive_degenerate >= 1,
            "mosaic.max_consecutive_degenerate: must be at least 1".to_string(),
        );

        if let Some(ab) = &self.ablation {
            check(
                ab.mark_diameter_um > 0.0,
                format!("ablation.mark_diameter_um: {} not positive", ab.mark_diameter_um),
            );
            check(
                (0.0..=50.0).contains(&ab.thermal_spread_um),
                format!("ablation.thermal_spread_um: {} outside [0, 50]", ab.thermal_spread_um),
            );
            let ws = Workspace::default();
            let off = (ab.lateral_offset_um.0.hypot(ab.lateral_offset_um.1)) / 1000.0;
            check(
                off < ws.half_width_mm,
                format!("ablation.lateral_offset_um: |offset| {off} mm exceeds the workspace half-width"),
            );
        }

        if let Some((w, h)) = self.canvas_px {
            check(
                w >= 200 && h >= 200,
                format!("canvas_px: {w}x{h} smaller than one working frame"),
            );
        }

        if problems.is_empty() {
            Ok(())
        } else {
            Err(HarnessError::InvalidConfig(problems))
        }
    }
}

/// The named scenarios reproducing the reference experiments, embedded so a
/// bare binary can run them.
pub const BUILTIN_SCENARIOS: &[(&str, &str)] = &[
    ("s0", include_str!("../../scenarios/s0_clean_grid.json")),
    ("s1", include_str!("../../scenarios/s1_grid_closed.json")),
    ("s2", include_str!("../../scenarios/s2_grid_open.json")),
    ("s3", include_str!("../../scenarios/s3_deformation.json")),
    ("s4", include_str!("../../scenarios/s4_disturbance_1mms.json")),
    ("s5", include_str!("../../scenarios/s5_disturbance_1p25mms.json")),
    ("s6", include_str!("../../scenarios/s6_ablation.json")),
    ("s7", include_str!("../../scenarios/s7_coverage.json")),
    ("calibration", include_str!("../../scenarios/calibration.json")),
];

/// Returns the embedded scenario JSON for a short name ("s4") or full
/// scenario name ("s4_disturbance_1mms").
pub fn builtin_scenario(name: &str) -> Option<&'static str> {
    BUILTIN_SCENARIOS
        .iter()
        .find(|(short, text)| {
            *short == name
                || serde_json::from_str::<ScenarioConfig>(text)
                    .map(|c| c.name == name)
                    .unwrap_or(false)
        })
        .map(|(_, text)| *text)
}

/// Parses and validates a scenario from a built-in name or a JSON file path.
pub fn load_scenario(name_or_path: &str) -> Result<ScenarioConfig, HarnessError> {
    let text = match builtin_scenario(name_or_path) {
        Some(text) => text.to_string(),
        None => std::fs::read_to_string(name_or_path).map_err(|e| {
            HarnessError::UnknownScenario(format!(
                "{name_or_path} (not a built-in scenario, and reading it as a file failed: {e})"
            ))
        })?,
    };
    let config: ScenarioConfig =
        serde_json::from_str(&text).map_err(|e| HarnessError::Parse(e.to_string()))?;
    config.validate()?;
    Ok(config)
}
