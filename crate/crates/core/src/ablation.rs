//! Offset ablation fibre: retargeting, firing, and mark assessment.
//!
//! The ablation fibre sits a fixed lateral offset away from the imaging axis,
//! so hitting the point the operator sees at the mosaic centre means first
//! shifting the tip by the negated offset. Firing is interlocked against scan
//! execution (the instrument only ablates while the probe is stationary) and
//! burns an [`AblationMark`] into the tissue at the point currently under the
//! fibre. The pulse power and duration are recorded but do not size the mark:
//! the only calibration point available is a 104 µm crater from a 3 W, 40 ms
//! pulse, so the mark geometry comes straight from the config.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::kinematics::{TipPose, Workspace};
use crate::mosaic::MosaicCanvas;
use crate::phantom::{AblationMark, Scene};

/// Errors raised by targeting, firing, or mark assessment.
#[derive(Debug, Error)]
pub enum AblationError {
    #[error("retargeted tip ({x_mm:.4}, {y_mm:.4}) mm is outside the workspace")]
    OutsideWorkspace { x_mm: f64, y_mm: f64 },
    #[error("fire rejected: a scan plan is executing")]
    Interlocked,
    #[error("no ablated region darker than {threshold} found in the mosaic")]
    MarkNotFound { threshold: f64 },
}

/// Offset ablation fibre settings.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AblationConfig {
    /// Lateral offset from the imaging axis to the fibre axis, µm.
    pub lateral_offset_um: (f64, f64),
    pub power_w: f64,
    pub duration_ms: f64,
    /// Diameter of the fully ablated (zero-signal) crater, µm.
    pub mark_diameter_um: f64,
    /// Radial width of the partially damaged ring around the crater, µm.
    pub thermal_spread_um: f64,
}

impl Default for AblationConfig {
    fn default() -> Self {
        Self {
            lateral_offset_um: (500.0, 0.0),
            power_w: 3.0,
            duration_ms: 40.0,
            mark_diameter_um: 104.0,
            thermal_spread_um: 50.0,
        }
    }
}

/// Returns the tip pose that puts the ablation fibre over the world point
/// currently under the imaging axis: the pose shifted by the negated lateral
/// offset. Fails if the shifted pose leaves the workspace.
pub fn target_centre(
    tip: &TipPose,
    cfg: &AblationConfig,
    workspace: &Workspace,
) -> Result<TipPose, AblationError> {
    let shifted = TipPose::new(
        tip.x_mm - cfg.lateral_offset_um.0 / 1000.0,
        tip.y_mm - cfg.lateral_offset_um.1 / 1000.0,
    );
    if !workspace.contains(&shifted) {
        return Err(AblationError::OutsideWorkspace {
            x_mm: shifted.x_mm,
            y_mm: shifted.y_mm,
        });
    }
    Ok(shifted)
}

/// Fires the laser at a world point, burning a mark into the tissue material
/// under it. Rejected while a scan plan is executing (`scan_active`); returns
/// the applied mark for logging.
pub fn fire(
    scene: &mut Scene,
    fibre_world_um: (f64, f64),
    cfg: &AblationConfig,
    scan_active: bool,
) -> Result<AblationMark, AblationError> {
    if scan_active {
        return Err(AblationError::Interlocked);
    }
    // Marks live in material coordinates so they ride with the tissue; the
    // burn lands wherever the beam intersects the tissue right now.
    let (mx, my) = scene.world_to_material(fibre_world_um.0, fibre_world_um.1);
    let mark = AblationMark {
        centre_x_um: mx,
        centre_y_um: my,
        diameter_um: cfg.mark_diameter_um,
        thermal_spread_um: cfg.thermal_spread_um,
    };
    scene.apply_mark(mark);
    Ok(mark)
}

/// An ablation mark located in a rescanned mosaic.
#[derive(Debug, Clone, Copy)]
pub struct MarkMeasurement {
    /// Centroid of the dark component, canvas px.
    pub centroid_px: (f64, f64),
    /// Equivalent-area disc diameter, µm.
    pub equivalent_diameter_um: f64,
    pub area_px: usize,
}

/// Finds the ablated crater in a mosaic: the largest 4-connected component of
/// composited pixels darker than `threshold`. Healthy tissue stays well above
/// the threshold, the crater is near zero, and the thermal ring ramps through
/// it over a couple of pixels, so the component edge sits just outside the
/// true crater and the equivalent diameter lands within a few µm of it.
pub fn measure_mark(
    canvas: &MosaicCanvas,
    threshold: f64,
) -> Result<MarkMeasurement, AblationError> {
    let w = canvas.image().width();
    let h = canvas.image().height();
    let dark = |ix: usize, iy: usize| {
        canvas.is_filled(ix, iy) && (canvas.image().get(ix, iy) as f64) < threshold
    };

    let mut visited = vec![false; w * h];
    let mut best: Vec<(usize, usize)> = Vec::new();
    let mut component = Vec::new();
    let mut queue = std::collections::VecDeque::new();
    for sy in 0..h {
        for sx in 0..w {
            if visited[sy * w + sx] || !dark(sx, sy) {
                continue;
            }
            component.clear();
            visited[sy * w + sx] = true;
            queue.push_back((sx, sy));
            while let Some((ix, iy)) = queue.pop_front() {
                component.push((ix, iy));
                let mut try_push = |nx: usize, ny: usize| {
                    if !visited[ny * w + nx] && dark(nx, ny) {
                        visited[ny * w + nx] = true;
                        queue.push_back((nx, ny));
                    }
                };
                if ix > 0 {
                    try_push(ix - 1, iy);
                }
                if ix + 1 < w {
                    try_push(ix + 1, iy);
                }
                if iy > 0 {
                    try_push(ix, iy - 1);
                }
                if iy + 1 < h {
                    try_push(ix, iy + 1);
                }
            }
            if component.len() > best.len() {
                std::mem::swap(&mut best, &mut component);
            }
        }
    }
    if best.is_empty() {
        return Err(AblationError::MarkNotFound { threshold });
    }

    let n = best.len() as f64;
    let (sx, sy) = best
        .iter()
        .fold((0.0, 0.0), |(ax, ay), &(ix, iy)| (ax + ix as f64, ay + iy as f64));
    let diameter_px = 2.0 * (n / std::f64::consts::PI).sqrt();
    Ok(MarkMeasurement {
        centroid_px: (sx / n, sy / n),
        equivalent_diameter_um: diameter_px * canvas.resolution_um_per_px(),
        area_px: best.len(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::phantom::make_texture;
    use crate::raster::ImageBuf;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn target_centre_negates_the_lateral_offset() {
        let ws = Workspace::default();
        let cfg = AblationConfig::default();
        let shifted = target_centre(&TipPose::new(0.0, 0.0), &cfg, &ws).unwrap();
        assert_eq!((shifted.x_mm, shifted.y_mm), (-0.5, 0.0));

        let diag = AblationConfig {
            lateral_offset_um: (300.0, -450.0),
            ..AblationConfig::default()
        };
        let shifted = target_centre(&TipPose::new(0.25, 0.1), &diag, &ws).unwrap();
        assert!((shifted.x_mm - -0.05).abs() < 1e-12);
        assert!((shifted.y_mm - 0.55).abs() < 1e-12);

        let none = AblationConfig {
            lateral_offset_um: (0.0, 0.0),
            ..AblationConfig::default()
        };
        let unchanged = target_centre(&TipPose::new(0.7, -0.4), &none, &ws).unwrap();
        assert_eq!((unchanged.x_mm, unchanged.y_mm), (0.7, -0.4));
    }

    #[test]
    fn target_centre_rejects_poses_outside_the_workspace() {
        let ws = Workspace::default(); // ±1.85 mm
        let cfg = AblationConfig::default(); // offset (500, 0) µm
        let err = target_centre(&TipPose::new(-1.6, 0.0), &cfg, &ws).unwrap_err();
        match err {
            AblationError::OutsideWorkspace { x_mm, .. } => {
                assert!((x_mm - -2.1).abs() < 1e-12)
            }
            other => panic!("unexpected error {other:?}"),
        }
    }

    #[test]
    fn fire_is_interlocked_while_a_plan_is_active() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut scene = make_texture(&mut rng, 0.5, 30.0, 1.0).unwrap();
        let cfg = AblationConfig::default();
        let err = fire(&mut scene, (0.0, 0.0), &cfg, true).unwrap_err();
        assert!(matches!(err, AblationError::Interlocked));
        assert!(scene.marks().is_empty());

        fire(&mut scene, (0.0, 0.0), &cfg, false).unwrap();
        assert_eq!(scene.marks().len(), 1);
        assert_eq!(scene.sample(0.0, 0.0).value, 0.0);
    }

    #[test]
    fn fire_burns_the_material_point_under_the_beam() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mut scene = make_texture(&mut rng, 0.8, 30.0, 1.0).unwrap();
        // With the tissue displaced, the burn must land on the displaced
        // material, not on the nominal world point.
        scene.rigid_offset_um = (40.0, -15.0);
        let mark = fire(&mut scene, (100.0, 50.0), &AblationConfig::default(), false).unwrap();
        assert_eq!(mark.centre_x_um, 60.0);
        assert_eq!(mark.centre_y_um, 65.0);
        // Seen from the world while the offset holds, the crater sits at the
        // fired point.
        assert_eq!(scene.sample(100.0, 50.0).value, 0.0);
        // When the tissue returns, the crater moves with it.
        scene.rigid_offset_um = (0.0, 0.0);
        assert_eq!(scene.sample(60.0, 65.0).value, 0.0);
        assert!(scene.sample(100.0 + 60.0, 50.0 + 60.0).value > 0.0);
    }

    /// Paints a filled test canvas: uniform mid-grey, one dark crater disc,
    /// one small distractor blob.
    fn canvas_with_crater(crater_centre: (i64, i64), crater_radius_px: f64) -> MosaicCanvas {
        let mut canvas = MosaicCanvas::new(400, 400, 1.2);
        let mut bg = ImageBuf::zeros(399, 399);
        for v in bg.data_mut() {
            *v = 0.5;
        }
        canvas.paste_disc(&bg, 300.0, (0, 0));
        let dark = ImageBuf::zeros(121, 121);
        canvas.paste_disc(
            &dark,
            crater_radius_px,
            (crater_centre.0 - 60, crater_centre.1 - 60),
        );
        let speck = ImageBuf::zeros(5, 5);
        canvas.paste_disc(&speck, 2.0, (20, 350));
        canvas
    }

    #[test]
    fn measure_mark_recovers_centroid_and_diameter() {
        // 104 µm crater at 1.2 µm/px: radius 43.33 px.
        let canvas = canvas_with_crater((210, 175), 104.0 / 1.2 / 2.0);
        let m = measure_mark(&canvas, 0.02).unwrap();
        assert!(
            (m.centroid_px.0 - 210.0).abs() < 0.5 && (m.centroid_px.1 - 175.0).abs() < 0.5,
            "centroid {:?}",
            m.centroid_px
        );
        // Pixel-quantised disc area matches within a pixel of diameter.
        assert!(
            (m.equivalent_diameter_um - 104.0).abs() < 1.5,
            "diameter {}",
            m.equivalent_diameter_um
        );
        // The distractor blob is smaller and must not win.
        assert!(m.area_px > 5000);
    }

    #[test]
    fn measure_mark_fails_without_a_dark_region() {
        let mut canvas = MosaicCanvas::new(100, 100, 1.2);
        let mut bright = ImageBuf::zeros(99, 99);
        for v in bright.data_mut() {
            *v = 0.6;
        }
        canvas.paste_disc(&bright, 80.0, (0, 0));
        assert!(matches!(
            measure_mark(&canvas, 0.02),
            Err(AblationError::MarkNotFound { .. })
        ));
    }
}
