//! End-to-end acceptance suite: the eight headline behaviours, each checked
//! at its stated tolerance and wall-clock budget and reported as a single
//! pass/fail line (visible with `--nocapture`).

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use microscan_core::harness::{
    bench_registration, load_scenario, run, synthetic_bench_frames,
};
use microscan_core::kinematics::{
    cam_to_tip, second_moment_of_area, tip_to_volts, volts_to_tip, CamPoint, ScannerGeometry,
    TipPose, Workspace,
};
use microscan_core::mosaic::{NccBackend, RegistrationParams, Registrator};
use microscan_core::phantom::make_texture;
use microscan_core::raster::ImageBuf;
use microscan_core::servo::ServoMode;

/// Prints one pass/fail line for a criterion and then enforces it.
fn report(criterion: &str, pass: bool, detail: &str, started: Instant, budget_s: f64) {
    let elapsed = started.elapsed().as_secs_f64();
    let verdict = if pass { "PASS" } else { "FAIL" };
    println!("[{verdict}] {criterion}: {detail} ({elapsed:.1} s)");
    assert!(pass, "{criterion}: {detail}");
    assert!(
        elapsed < budget_s,
        "{criterion}: runtime {elapsed:.1} s exceeds the {budget_s} s budget"
    );
}

#[test]
fn criterion_1_kinematics_and_beam_theory() {
    let t0 = Instant::now();
    let geometry = ScannerGeometry::default();
    let workspace = Workspace::default();

    // Second moment of area against an independent formulation of the same
    // section property: I = pi/4 (R^4 - r^4) with radii instead of diameters.
    let i = second_moment_of_area(&geometry).unwrap();
    let (big_r, small_r) = (3.3 / 2.0f64, 2.7 / 2.0f64);
    let oracle = std::f64::consts::PI / 4.0 * (big_r.powi(4) - small_r.powi(4));
    let i_ok = (i - 3.2127).abs() < 1e-4 && (i - oracle).abs() < 1e-12;

    // Load -> deflection chain against the closed form delta = r_p (3 S_l - a)
    // / (2 a), evaluated here independently, over random cam displacements
    // and a few geometry variants.
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let variants = [
        geometry.clone(),
        ScannerGeometry {
            shaft_length_mm: 70.0,
            cam_position_mm: 20.0,
            ..geometry.clone()
        },
        ScannerGeometry {
            outer_diameter_mm: 4.0,
            inner_diameter_mm: 1.0,
            elastic_modulus_gpa: 70.0,
            ..geometry.clone()
        },
    ];
    let mut max_rel = 0.0f64;
    for k in 0..10_000 {
        let g = &variants[k % variants.len()];
        let cam = CamPoint {
            x_mm: rng.gen_range(-1.2..1.2),
            y_mm: rng.gen_range(-1.2..1.2),
        };
        let tip = cam_to_tip(&cam, g).unwrap();
        let delta = tip.x_mm.hypot(tip.y_mm);
        let r_p = cam.x_mm.hypot(cam.y_mm);
        let closed = r_p * (3.0 * g.shaft_length_mm - g.cam_position_mm)
            / (2.0 * g.cam_position_mm);
        if closed > 0.0 {
            max_rel = max_rel.max((delta - closed).abs() / closed);
        }
    }
    let chain_ok = max_rel < 1e-12;

    // Forward/inverse actuation roundtrip across the workspace.
    let mut max_roundtrip_mm = 0.0f64;
    for _ in 0..10_000 {
        let target = TipPose::new(rng.gen_range(-1.85..1.85), rng.gen_range(-1.85..1.85));
        let cmd = tip_to_volts(&target, &geometry, &workspace);
        let back = volts_to_tip(&cmd.value, &geometry, &workspace);
        max_roundtrip_mm = max_roundtrip_mm.max(back.value.distance_mm(&target));
    }
    let roundtrip_ok = max_roundtrip_mm < 1e-9;

    report(
        "criterion 1 (kinematics & beam theory)",
        i_ok && chain_ok && roundtrip_ok,
        &format!(
            "I = {i:.6} mm^4 (oracle diff {:.1e}), chain rel err {max_rel:.1e}, roundtrip max {max_roundtrip_mm:.1e} mm",
            (i - oracle).abs()
        ),
        t0,
        1.0,
    );
}

#[test]
fn criterion_2_registration_oracle() {
    let t0 = Instant::now();
    // One seeded texture at the working scale; frames are 200 px windows and
    // ground-truth shifts are the window displacements.
    let mut rng = ChaCha8Rng::seed_from_u64(22);
    let scene = make_texture(&mut rng, 1.8, 30.0, 1.2).unwrap();
    let field = scene.field();
    let registrator = Registrator::new(RegistrationParams::default(), NccBackend::Fft);

    let crop = |x0: usize, y0: usize| {
        let mut out = ImageBuf::zeros(200, 200);
        for iy in 0..200 {
            for ix in 0..200 {
                out.set(ix, iy, field.get(x0 + ix, y0 + iy));
            }
        }
        out
    };

    let span = field.width() - 200 - 80;
    let mut total = 0usize;
    let mut exact = 0usize;
    let mut within_one = 0usize;
    for _ in 0..50 {
        let x0 = 40 + rng.gen_range(0..span);
        let y0 = 40 + rng.gen_range(0..span);
        let prev = crop(x0, y0);
        // Cover the +-40 px box: every corner/edge extreme plus random fill.
        let mut shifts: Vec<(i64, i64)> = vec![
            (40, 40),
            (-40, 40),
            (40, -40),
            (-40, -40),
            (40, 0),
            (0, -40),
            (0, 0),
        ];
        for _ in 0..18 {
            shifts.push((rng.gen_range(-40..=40), rng.gen_range(-40..=40)));
        }
        for (dx, dy) in shifts {
            let next = crop(
                (x0 as i64 + dx) as usize,
                (y0 as i64 + dy) as usize,
            );
            let reg = registrator.register(&prev, &next).unwrap();
            total += 1;
            if reg.shift_px == (dx, dy) {
                exact += 1;
            }
            if (reg.shift_px.0 - dx).abs() <= 1 && (reg.shift_px.1 - dy).abs() <= 1 {
                within_one += 1;
            }
        }
    }
    let exact_rate = exact as f64 / total as f64;
    report(
        "criterion 2 (registration oracle)",
        within_one == total && exact_rate >= 0.99,
        &format!(
            "{total} registrations, {:.2}% exact, {} outside +-1 px",
            100.0 * exact_rate,
            total - within_one
        ),
        t0,
        30.0,
    );
}

#[test]
fn criterion_3_grid_phantom_reproduction() {
    let t0 = Instant::now();
    let config = load_scenario("s1").unwrap();
    let artifacts = run(&config).unwrap();
    let grid = artifacts
        .metrics
        .grid_measurements_um
        .expect("grid scenario must yield grid measurements");
    let line_ok = (grid.line_thickness_mean_um - 73.0).abs() <= 4.0;
    let square_ok = (grid.square_width_mean_um - 237.0).abs() <= 12.0;
    report(
        "criterion 3 (grid-phantom reproduction, S1)",
        line_ok && square_ok,
        &format!(
            "line {:.1} +- {:.1} um (want 73 +- 4), square {:.1} +- {:.1} um (want 237 +- 12)",
            grid.line_thickness_mean_um,
            grid.line_thickness_sd_um,
            grid.square_width_mean_um,
            grid.square_width_sd_um
        ),
        t0,
        60.0,
    );
}

#[test]
fn criterion_4_deformation_compensation() {
    let t0 = Instant::now();
    let closed_cfg = load_scenario("s3").unwrap();
    let mut open_cfg = closed_cfg.clone();
    open_cfg.servo.mode = ServoMode::Open;

    let closed = run(&closed_cfg).unwrap();
    let open = run(&open_cfg).unwrap();
    let d_closed = closed.metrics.mosaic_diameter_mm.expect("closed diameter");
    let d_open = open.metrics.mosaic_diameter_mm.expect("open diameter");
    let ratio = d_open / d_closed;
    let commanded = 2.0 * closed_cfg.plan.params.max_radius_mm
        + closed_cfg.plan.params.fov_reference_mm;

    let ratio_ok = (ratio - 0.855).abs() <= 0.03;
    let closed_ok = (d_closed - commanded).abs() <= 0.05 * commanded;
    report(
        "criterion 4 (deformation compensation, S3)",
        ratio_ok && closed_ok,
        &format!(
            "open {d_open:.3} mm / closed {d_closed:.3} mm = {ratio:.3} (want 0.855 +- 0.03); commanded {commanded:.2} mm"
        ),
        t0,
        60.0,
    );
}

#[test]
fn criterion_5_disturbance_rejection() {
    let t0 = Instant::now();
    let s4 = load_scenario("s4").unwrap();
    let s5 = load_scenario("s5").unwrap();
    let mut s4_open = s4.clone();
    s4_open.servo.mode = ServoMode::Open;

    let closed_1 = run(&s4).unwrap().metrics.rms_tracking_error_um;
    let closed_125 = run(&s5).unwrap().metrics.rms_tracking_error_um;
    let open_1 = run(&s4_open).unwrap().metrics.rms_tracking_error_um;

    let pass = closed_1 < 20.0 && closed_125 < 20.0 && open_1 > 100.0;
    report(
        "criterion 5 (disturbance rejection, S4/S5)",
        pass,
        &format!(
            "closed RMS {closed_1:.1} um @ 1.0 mm/s, {closed_125:.1} um @ 1.25 mm/s (want < 20); open {open_1:.1} um @ 1.0 mm/s (want > 100)"
        ),
        t0,
        180.0,
    );
}

#[test]
fn criterion_6_ablation_targeting() {
    let t0 = Instant::now();
    let config = load_scenario("s6").unwrap();
    let artifacts = run(&config).unwrap();
    let mark = artifacts.metrics.mark.expect("mark metrics");
    let offset_px = mark.centroid_offset_px.0.hypot(mark.centroid_offset_px.1);
    let centred = offset_px <= 1.0;
    let sized = (mark.equivalent_diameter_um - 104.0).abs() <= 10.0;
    report(
        "criterion 6 (ablation targeting, S6)",
        centred && sized,
        &format!(
            "mark centroid {offset_px:.2} px off centre (want <= 1), diameter {:.1} um (want 104 +- 10)",
            mark.equivalent_diameter_um
        ),
        t0,
        60.0,
    );
}

#[test]
fn criterion_7_registration_throughput() {
    let t0 = Instant::now();
    let bench = bench_registration(300, synthetic_bench_frames(9));
    let pass = bench.fps >= 120.0 && bench.p99_ms < 8.33;
    report(
        "criterion 7 (registration throughput)",
        pass,
        &format!(
            "{} pairs: mean {:.2} ms ({:.0} fps, want >= 120), p99 {:.2} ms (want < 8.33)",
            bench.pairs, bench.mean_ms, bench.fps, bench.p99_ms
        ),
        t0,
        120.0,
    );
}

#[test]
fn criterion_8_scale_and_coverage() {
    let t0 = Instant::now();
    let config = load_scenario("s7").unwrap();
    let artifacts = run(&config).unwrap();
    let m = &artifacts.metrics;

    // Worst-case consecutive-frame overlap of two 100 px-radius field discs
    // separated by the largest registered per-frame shift.
    let d = artifacts.scan.stats.max_abs_shift_px;
    let x = (d / 200.0).min(1.0);
    let min_overlap = (2.0 / std::f64::consts::PI) * (x.acos() - x * (1.0 - x * x).sqrt());

    let pass =
        m.coverage_area_mm2 >= 3.0 && m.simulated_duration_s <= 10.0 && min_overlap >= 0.5;
    report(
        "criterion 8 (scale & coverage, S7)",
        pass,
        &format!(
            "{:.2} mm^2 in {:.2} s simulated (want >= 3 mm^2 in <= 10 s); worst overlap {:.0}% at {d:.1} px/frame (want >= 50%)",
            m.coverage_area_mm2, m.simulated_duration_s, 100.0 * min_overlap
        ),
        t0,
        60.0,
    );
}
