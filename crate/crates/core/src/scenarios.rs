//! Ready-made synthetic runs used by the sample configs and the test suite.

use nalgebra::Matrix3;

use crate::config::{
    ElevationSpec, MotionSpec, PoseSpec, PrimitiveSpec, ProjectionSpec, RunConfig, SensorSpec, ShapeSpec,
    ShutterConfig, WorldSpec,
};
use crate::geom::{RigidPose, UnitQuat, Vec3};

/// Camera orientation looking along world `+x` with image rows pointing down.
pub fn forward_camera_rotation() -> [f64; 4] {
    let m = Matrix3::new(0.0, 0.0, 1.0, -1.0, 0.0, 0.0, 0.0, -1.0, 0.0);
    let q = UnitQuat::from_matrix(&m);
    [q.w, q.i, q.j, q.k]
}

fn cuboid(center: [f64; 3], yaw: f64, half: [f64; 3], color: [f64; 3]) -> PrimitiveSpec {
    let q = UnitQuat::from_euler_angles(0.0, 0.0, yaw);
    PrimitiveSpec {
        shape: ShapeSpec::Box { half_extents: half },
        pose: PoseSpec::from_pose(&RigidPose::new(q, Vec3::from(center))),
        color,
        lidar_only: false,
    }
}

fn moving(position: [f64; 3], rotation: [f64; 4], velocity: [f64; 3]) -> MotionSpec {
    MotionSpec {
        pose: PoseSpec { position, rotation },
        linear_velocity: velocity,
        angular_velocity: [0.0; 3],
    }
}

fn camera(name: String, width: usize, height: usize, fx: f64, tau_v: f64, motion: MotionSpec) -> SensorSpec {
    SensorSpec {
        name,
        projection: ProjectionSpec::Perspective {
            width,
            height,
            fx,
            fy: fx * width as f64 / height as f64,
            cx: 0.5,
            cy: 0.5,
        },
        shutter: ShutterConfig {
            tau_u: None,
            tau_v,
            period: None,
        },
        motion,
        holdout: false,
    }
}

fn lidar(name: String, width: usize, rows: usize, half_fov_deg: f64, period: f64, motion: MotionSpec) -> SensorSpec {
    SensorSpec {
        name,
        projection: ProjectionSpec::Spherical {
            width,
            elevation: ElevationSpec::Linear {
                top_deg: half_fov_deg,
                bottom_deg: -half_fov_deg,
                rows,
            },
        },
        shutter: ShutterConfig {
            tau_u: None,
            tau_v: 0.0,
            period: Some(period),
        },
        motion,
        holdout: false,
    }
}

/// Two boxes beside a sensor rig driving along `+y` at 5 m/s. Six capture
/// times (camera and lidar each) train the fit, two interleaved ones are held
/// out.
pub fn two_box_log() -> RunConfig {
    let background = [0.5, 0.55, 0.6];
    let world = WorldSpec {
        background,
        primitives: vec![
            cuboid([6.0, 1.5, 0.0], 0.0, [1.0, 1.0, 1.0], [0.8, 0.25, 0.2]),
            cuboid([7.0, -2.0, 0.3], 0.5, [0.8, 1.2, 1.3], [0.2, 0.35, 0.8]),
        ],
    };
    let speed = 5.0;
    let rot = forward_camera_rotation();
    let mut sensors = Vec::new();
    // Training captures every 0.1 s, held-out ones halfway between.
    let times: Vec<(f64, bool)> = (0..6)
        .map(|k| (0.1 * k as f64 - 0.25, false))
        .chain([(-0.1, true), (0.1, true)])
        .collect();
    for (i, (t, holdout)) in times.into_iter().enumerate() {
        let p = [0.0, speed * t, 0.0];
        let v = [0.0, speed, 0.0];
        let mut c = camera(format!("cam{i}"), 160, 120, 0.8, 0.03, moving(p, rot, v));
        let mut l = lidar(format!("lidar{i}"), 512, 32, 20.0, 0.1, moving(p, [1.0, 0.0, 0.0, 0.0], v));
        c.holdout = holdout;
        l.holdout = holdout;
        sensors.push(c);
        sensors.push(l);
    }
    let mut cfg = RunConfig {
        world: Some(world),
        sensors,
        seed: Some(7),
        iterations: 4000,
        particles: 5000,
        background,
        ..RunConfig::default()
    };
    cfg.weights.w_opacity = 1e-3;
    cfg.weights.w_empty = 1.0;
    cfg
}

/// A box straddling the azimuth seam of a spinning lidar moving at 12 m/s
/// with a lateral component, so points cross the seam during each sweep.
pub fn seam_log() -> RunConfig {
    let world = WorldSpec {
        background: [0.0; 3],
        primitives: vec![cuboid([-8.0, 0.0, 0.0], 0.0, [1.0, 1.5, 1.0], [0.8; 3])],
    };
    let v = [7.2, -9.6, 0.0];
    let period = 0.1;
    let sensors = (0..3)
        .map(|k| {
            let t = period * (k as f64 - 1.0);
            let p = [v[0] * t, v[1] * t, 0.0];
            lidar(format!("lidar{k}"), 1024, 256, 20.0, period, moving(p, [1.0, 0.0, 0.0, 0.0], v))
        })
        .collect();
    RunConfig {
        world: Some(world),
        sensors,
        seed: Some(11),
        iterations: 300,
        particles: 3000,
        ..RunConfig::default()
    }
}

/// A pane that the lidar hits but the camera sees through, in front of a
/// coloured box.
pub fn glass_pane() -> RunConfig {
    let rot = forward_camera_rotation();
    // Plane normal along +z locally; turn it to face the sensors along -x.
    let pane_rot = UnitQuat::from_euler_angles(0.0, -std::f64::consts::FRAC_PI_2, 0.0);
    let background = [0.5, 0.55, 0.6];
    let world = WorldSpec {
        background,
        primitives: vec![
            PrimitiveSpec {
                shape: ShapeSpec::Plane {
                    half_width: 1.2,
                    half_height: 1.2,
                },
                pose: PoseSpec::from_pose(&RigidPose::new(pane_rot, Vec3::new(4.0, 0.0, 0.0))),
                color: [0.9; 3],
                lidar_only: true,
            },
            cuboid([7.0, 0.0, 0.0], 0.3, [1.0, 1.5, 1.0], [0.85, 0.6, 0.15]),
        ],
    };
    let mut sensors = Vec::new();
    for k in 0..4 {
        let p = [0.0, 0.3 * k as f64 - 0.45, 0.0];
        let still = [0.0; 3];
        sensors.push(camera(format!("cam{k}"), 96, 72, 0.7, 0.0, moving(p, rot, still)));
        sensors.push(lidar(format!("lidar{k}"), 512, 32, 20.0, 0.1, moving(p, [1.0, 0.0, 0.0, 0.0], still)));
    }
    let mut cfg = RunConfig {
        world: Some(world),
        sensors,
        seed: Some(5),
        iterations: 600,
        particles: 2000,
        background,
        ..RunConfig::default()
    };
    cfg.weights.w_opacity = 1e-4;
    cfg.weights.w_empty = 1.0;
    cfg
}

/// Two boxes passed by fast sensors with long readouts.
pub fn shutter_log() -> RunConfig {
    let mut cfg = two_box_log();
    let speed = 15.0;
    let rot = forward_camera_rotation();
    cfg.sensors.clear();
    for k in 0..4 {
        let t = 0.1 * k as f64 - 0.15;
        let p = [0.0, speed * t, 0.0];
        let v = [0.0, speed, 0.0];
        cfg.sensors.push(camera(format!("cam{k}"), 96, 72, 0.8, 0.05, moving(p, rot, v)));
        cfg.sensors.push(lidar(format!("lidar{k}"), 512, 32, 20.0, 0.1, moving(p, [1.0, 0.0, 0.0, 0.0], v)));
    }
    cfg.seed = Some(3);
    cfg.iterations = 600;
    cfg.particles = 2000;
    cfg
}
