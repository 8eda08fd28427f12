use microscan_core::harness::{load_scenario, metrics_json, run};
use microscan_core::servo::ServoMode;

fn main() {
    let mode = std::env::args().nth(1).unwrap_or_default();
    match mode.as_str() {
        "s3" => {
            for c in [0.13, 0.15, 0.17] {
                let mut cfg = load_scenario("s3").unwrap();
                cfg.deformation.drag_coefficient = c;
                let closed = run(&cfg).unwrap().metrics;
                let mut open_cfg = cfg.clone();
                open_cfg.servo.mode = ServoMode::Open;
                let open = run(&open_cfg).unwrap().metrics;
                let dc = closed.mosaic_diameter_mm.unwrap();
                let do_ = open.mosaic_diameter_mm.unwrap();
                println!(
                    "c={c}: closed {dc:.4} open {do_:.4} ratio {:.4} closed_rms {:.1} fails {}/{}",
                    do_ / dc,
                    closed.rms_tracking_error_um,
                    closed.registration_failures,
                    open.registration_failures
                );
            }
        }
        "s4" => {
            for seed in [104u64, 114, 124, 134, 144, 154, 164, 174, 184, 194] {
                let mut cfg = load_scenario("s4").unwrap();
                cfg.seed = seed;
                cfg.servo.mode = ServoMode::Open;
                let open = run(&cfg).unwrap().metrics;
                println!("seed {seed}: open rms {:.1}", open.rms_tracking_error_um);
            }
        }
        "s1" => {
            let cfg = load_scenario("s1").unwrap();
            let m = run(&cfg).unwrap().metrics;
            println!("{}", metrics_json(&m));
        }
        other => eprintln!("unknown mode {other}; expected s1, s3 or s4"),
    }
}
