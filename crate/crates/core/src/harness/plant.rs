//! The simulated instrument the servo drives: ideal actuation into a live
//! scene with disturbance, deformation and sensor noise.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::endoscope::Probe;
use crate::kinematics::{volts_to_tip, MotorCommand, ScannerGeometry, TipPose, Workspace};
use crate::phantom::{DeformationModel, DisturbanceModel, Scene};
use crate::servo::{Plant, PlantFrame};

/// Random-stream indices carved out of the scenario seed. Scene synthesis,
/// world motion, sensor noise and the workspace sweep draw from separate
/// ChaCha streams of the same seed, so enabling one consumer never perturbs
/// another.
pub mod streams {
    pub const SCENE: u64 = 0;
    pub const DISTURBANCE: u64 = 1;
    pub const SENSOR: u64 = 2;
    pub const SWEEP: u64 = 3;
}

/// Seeded RNG for one of the named streams.
pub fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Digital twin of the instrument: commands move the tip ideally (the
/// actuation map is exact), the world advances one frame period per step,
/// and the probe captures through the full imaging pipeline.
pub struct SimPlant {
    scene: Scene,
    probe: Probe,
    rho_rad: f64,
    disturbance: DisturbanceModel,
    deformation: DeformationModel,
    geometry: ScannerGeometry,
    workspace: Workspace,
    tip: TipPose,
    frames: usize,
    disturbance_rng: ChaCha8Rng,
    sensor_rng: ChaCha8Rng,
}

impl SimPlant {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        scene: Scene,
        probe: Probe,
        rho_rad: f64,
        disturbance: DisturbanceModel,
        deformation: DeformationModel,
        geometry: ScannerGeometry,
        workspace: Workspace,
        seed: u64,
        start: TipPose,
    ) -> SimPlant {
        SimPlant {
            scene,
            probe,
            rho_rad,
            disturbance,
            deformation,
            geometry,
            workspace,
            tip: start,
            frames: 0,
            disturbance_rng: stream_rng(seed, streams::DISTURBANCE),
            sensor_rng: stream_rng(seed, streams::SENSOR),
        }
    }

    pub fn scene(&self) -> &Scene {
        &self.scene
    }

    /// World-side access for the ablation layer.
    pub fn scene_mut(&mut self) -> &mut Scene {
        &mut self.scene
    }

    /// True tip pose; diagnostics only, the controller never sees it.
    pub fn tip(&self) -> TipPose {
        self.tip
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    /// Surrenders the final world state, marks included.
    pub fn into_scene(self) -> Scene {
        self.scene
    }
}

impl Plant for SimPlant {
    fn step_and_capture(&mut self, command: MotorCommand) -> PlantFrame {
        let dt = self.probe.spec().frame_period_s();
        let new_tip = volts_to_tip(&command, &self.geometry, &self.workspace).value;
        let step_um = (
            (new_tip.x_mm - self.tip.x_mm) * 1000.0,
            (new_tip.y_mm - self.tip.y_mm) * 1000.0,
        );
        self.scene
            .step_disturbance(&self.disturbance, dt, &mut self.disturbance_rng);
        self.scene.step_deformation(&self.deformation, step_um, dt);
        self.tip = new_tip;
        self.frames += 1;
        let t_s = self.probe.spec().frame_time_s(self.frames);
        let frame = self
            .probe
            .capture(&self.scene, &self.tip, self.rho_rad, t_s, &mut self.sensor_rng);
        let out_of_field = frame.out_of_field;
        let pixels = self.probe.preprocess(frame.pixels());
        PlantFrame {
            pixels,
            out_of_field,
        }
    }

    fn frame_period_s(&self) -> f64 {
        self.probe.spec().frame_period_s()
    }
}
