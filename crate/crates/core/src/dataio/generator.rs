use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Poisson};
use serde::{Deserialize, Serialize};

use super::{Scan, Sequence, MAX_SCANS};
use crate::error::{Error, Result};
use crate::geometry::{normalize_yaw, ObjectClass, Pose, RotatedBox};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClassPrior {
    /// Inclusive range of objects per scene.
    pub count: [u32; 2],
    /// Nominal `l, w, h` in meters.
    pub size: [f64; 3],
    /// Speed range along the heading, m/s.
    pub speed: [f64; 2],
    pub intensity: f64,
}

/// Parameters of the synthetic driving scenes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SceneConfig {
    pub seed: u64,
    /// Scans per sequence, core frame included.
    pub n_scans: usize,
    pub scan_period: f64,
    pub ego_speed: [f64; 2],
    pub ego_yaw_rate: [f64; 2],
    pub vehicle: ClassPrior,
    pub cyclist: ClassPrior,
    pub pedestrian: ClassPrior,
    /// Relative uniform jitter applied to every nominal dimension.
    pub size_jitter: f64,
    pub clutter_count: [u32; 2],
    pub clutter_size_min: [f64; 3],
    pub clutter_size_max: [f64; 3],
    pub clutter_intensity: f64,
    /// Object centers are drawn in this core-frame window.
    pub spawn_x: [f64; 2],
    pub spawn_y: [f64; 2],
    /// Surface points per m² at `ref_range`; falls off with range squared.
    pub density_ref: f64,
    pub ref_range: f64,
    /// Objects beyond this range return no points.
    pub max_range: f64,
    /// Points guaranteed per object within range.
    pub min_points: u32,
    pub ground_points: u32,
    pub ground_range: f64,
    pub ground_z: f64,
    pub ground_intensity: f64,
    pub jitter_sigma: f64,
    pub intensity_sigma: f64,
    /// Probability an object is annotated as unclear.
    pub unclear_fraction: f64,
}

impl Default for SceneConfig {
    fn default() -> Self {
        SceneConfig {
            seed: 0,
            n_scans: 3,
            scan_period: 0.1,
            ego_speed: [0.0, 20.0],
            ego_yaw_rate: [-0.2, 0.2],
            vehicle: ClassPrior {
                count: [4, 10],
                size: [4.5, 1.9, 1.6],
                speed: [0.0, 15.0],
                intensity: 0.6,
            },
            cyclist: ClassPrior {
                count: [1, 4],
                size: [1.8, 0.7, 1.5],
                speed: [0.0, 6.0],
                intensity: 0.4,
            },
            pedestrian: ClassPrior {
                count: [1, 5],
                size: [0.6, 0.6, 1.7],
                speed: [0.0, 1.5],
                intensity: 0.3,
            },
            size_jitter: 0.2,
            clutter_count: [10, 20],
            clutter_size_min: [0.3, 0.3, 0.5],
            clutter_size_max: [3.0, 2.0, 2.5],
            clutter_intensity: 0.45,
            spawn_x: [2.0, 118.0],
            spawn_y: [-38.0, 38.0],
            density_ref: 5.0,
            ref_range: 10.0,
            max_range: 200.0,
            min_points: 1,
            ground_points: 1500,
            ground_range: 130.0,
            ground_z: -1.8,
            ground_intensity: 0.1,
            jitter_sigma: 0.03,
            intensity_sigma: 0.1,
            unclear_fraction: 0.05,
        }
    }
}

fn check_range(name: &str, r: [f64; 2]) -> Result<()> {
    if !(r[0].is_finite() && r[1].is_finite() && r[0] <= r[1]) {
        return Err(Error::Config(format!("{name}: bad range {r:?}")));
    }
    Ok(())
}

impl SceneConfig {
    pub fn validate(&self) -> Result<()> {
        if !(1..MAX_SCANS).contains(&self.n_scans) {
            return Err(Error::Config(format!(
                "n_scans must be in 1..=10, got {}",
                self.n_scans
            )));
        }
        if !(self.scan_period > 0.0) {
            return Err(Error::Config("scan_period must be positive".into()));
        }
        if !(self.density_ref > 0.0) || !(self.ref_range > 0.0) || !(self.max_range > 0.0) {
            return Err(Error::Config(
                "point density is zero everywhere (density_ref, ref_range and max_range must be positive)".into(),
            ));
        }
        if !(0.0..1.0).contains(&self.size_jitter) || !(0.0..=1.0).contains(&self.unclear_fraction)
        {
            return Err(Error::Config(
                "size_jitter must be in [0,1) and unclear_fraction in [0,1]".into(),
            ));
        }
        if self.jitter_sigma < 0.0 || self.intensity_sigma < 0.0 || self.ground_range <= 2.0 {
            return Err(Error::Config(
                "noise levels must be nonnegative and ground_range > 2".into(),
            ));
        }
        check_range("ego_speed", self.ego_speed)?;
        check_range("ego_yaw_rate", self.ego_yaw_rate)?;
        check_range("spawn_x", self.spawn_x)?;
        check_range("spawn_y", self.spawn_y)?;
        for (name, p) in [
            ("vehicle", &self.vehicle),
            ("cyclist", &self.cyclist),
            ("pedestrian", &self.pedestrian),
        ] {
            check_range(&format!("{name}.speed"), p.speed)?;
            if p.count[0] > p.count[1] || p.size.iter().any(|&s| !(s > 0.0)) {
                return Err(Error::Config(format!("{name}: bad count or size")));
            }
        }
        if self.clutter_count[0] > self.clutter_count[1]
            || (0..3).any(|k| {
                !(self.clutter_size_min[k] > 0.0
                    && self.clutter_size_min[k] <= self.clutter_size_max[k])
            })
        {
            return Err(Error::Config("bad clutter count or size range".into()));
        }
        Ok(())
    }

    fn prior(&self, class: ObjectClass) -> &ClassPrior {
        match class {
            ObjectClass::Vehicle => &self.vehicle,
            ObjectClass::Cyclist => &self.cyclist,
            _ => &self.pedestrian,
        }
    }
}

/// A scene object at core time, in core ego coordinates.
#[derive(Debug, Clone)]
struct Actor {
    bbox: RotatedBox,
    velocity: [f64; 2],
    intensity: f64,
    /// `None` for clutter, which is never annotated.
    label: Option<ObjectClass>,
}

fn uniform(rng: &mut ChaCha8Rng, r: [f64; 2]) -> f64 {
    if r[0] == r[1] {
        r[0]
    } else {
        rng.random_range(r[0]..r[1])
    }
}

/// Ego pose at time offset `tau` (≤ 0) relative to the core frame, for
/// constant speed and yaw rate.
fn ego_offset(speed: f64, yaw_rate: f64, tau: f64) -> Pose {
    let yaw = yaw_rate * tau;
    let (x, y) = if yaw_rate.abs() < 1e-9 {
        (speed * tau, 0.0)
    } else {
        (
            speed / yaw_rate * yaw.sin(),
            speed / yaw_rate * (1.0 - yaw.cos()),
        )
    };
    Pose::from_yaw(yaw, [x, y, 0.0])
}

fn footprint_radius(b: &RotatedBox) -> f64 {
    b.l.hypot(b.w) / 2.0
}

/// Expected number of surface returns for a box at `range`.
pub(crate) fn expected_points(cfg: &SceneConfig, b: &RotatedBox, range: f64) -> f64 {
    let area = b.l * b.w + 2.0 * (b.l * b.h + b.w * b.h);
    let r = range.max(1e-3);
    cfg.density_ref * area * (cfg.ref_range / r).powi(2)
}

/// Surface returns (top and four sides) of a box given in scan coordinates.
pub(crate) fn sample_box_points(
    cfg: &SceneConfig,
    b: &RotatedBox,
    intensity: f64,
    rng: &mut ChaCha8Rng,
    out: &mut Vec<[f32; 4]>,
) {
    let range = b.range();
    if range > cfg.max_range {
        return;
    }
    let lambda = expected_points(cfg, b, range);
    let drawn = if lambda > 0.0 {
        Poisson::new(lambda)
            .map(|p| p.sample(rng) as u64)
            .unwrap_or(0)
    } else {
        0
    };
    let n = drawn.max(cfg.min_points as u64);
    let jitter = Normal::new(0.0, cfg.jitter_sigma.max(1e-12)).unwrap();
    let inten = Normal::new(intensity, cfg.intensity_sigma.max(1e-12)).unwrap();
    let faces = [b.l * b.w, b.w * b.h, b.w * b.h, b.l * b.h, b.l * b.h];
    let total: f64 = faces.iter().sum();
    let (s, c) = b.yaw.sin_cos();
    for _ in 0..n {
        let mut pick = rng.random_range(0.0..total);
        let mut face = 0;
        while face < 4 && pick >= faces[face] {
            pick -= faces[face];
            face += 1;
        }
        let a: f64 = rng.random_range(-0.5..0.5);
        let bb: f64 = rng.random_range(-0.5..0.5);
        let (u, v, z) = match face {
            0 => (a * b.l, bb * b.w, 0.5 * b.h),
            1 => (0.5 * b.l, a * b.w, bb * b.h),
            2 => (-0.5 * b.l, a * b.w, bb * b.h),
            3 => (a * b.l, 0.5 * b.w, bb * b.h),
            _ => (a * b.l, -0.5 * b.w, bb * b.h),
        };
        let x = b.cx + c * u - s * v + jitter.sample(rng);
        let y = b.cy + s * u + c * v + jitter.sample(rng);
        let z = b.cz + z + jitter.sample(rng);
        let i = inten.sample(rng).clamp(0.0, 1.0);
        out.push([x as f32, y as f32, z as f32, i as f32]);
    }
}

fn place_actors(cfg: &SceneConfig, rng: &mut ChaCha8Rng) -> Vec<Actor> {
    let mut actors: Vec<Actor> = Vec::new();
    let fits = |b: &RotatedBox, actors: &[Actor]| {
        actors.iter().all(|a| {
            (a.bbox.cx - b.cx).hypot(a.bbox.cy - b.cy)
                >= footprint_radius(&a.bbox) + footprint_radius(b) + 0.5
        })
    };
    for class in ObjectClass::DETECTED {
        let p = cfg.prior(class).clone();
        let count = rng.random_range(p.count[0]..=p.count[1]);
        for _ in 0..count {
            let j = cfg.size_jitter;
            let dims: [f64; 3] =
                std::array::from_fn(|k| p.size[k] * uniform(rng, [1.0 - j, 1.0 + j]));
            for _attempt in 0..100 {
                let cx = uniform(rng, cfg.spawn_x);
                let cy = uniform(rng, cfg.spawn_y);
                let yaw = rng.random_range(-PI..PI);
                let b = RotatedBox::new(
                    cx,
                    cy,
                    cfg.ground_z + dims[2] / 2.0,
                    dims[0],
                    dims[1],
                    dims[2],
                    yaw,
                    class,
                );
                if fits(&b, &actors) {
                    let speed = uniform(rng, p.speed);
                    let label = if rng.random_bool(cfg.unclear_fraction) {
                        ObjectClass::Unclear
                    } else {
                        class
                    };
                    actors.push(Actor {
                        bbox: b,
                        velocity: [speed * yaw.cos(), speed * yaw.sin()],
                        intensity: p.intensity,
                        label: Some(label),
                    });
                    break;
                }
            }
        }
    }
    let clutter = rng.random_range(cfg.clutter_count[0]..=cfg.clutter_count[1]);
    for _ in 0..clutter {
        let dims: [f64; 3] = std::array::from_fn(|k| {
            uniform(rng, [cfg.clutter_size_min[k], cfg.clutter_size_max[k]])
        });
        for _attempt in 0..100 {
            let cx = uniform(rng, cfg.spawn_x);
            let cy = uniform(rng, cfg.spawn_y);
            let yaw = rng.random_range(-PI..PI);
            let b = RotatedBox::new(
                cx,
                cy,
                cfg.ground_z + dims[2] / 2.0,
                dims[0],
                dims[1],
                dims[2],
                yaw,
                ObjectClass::Unclear,
            );
            if fits(&b, &actors) {
                actors.push(Actor {
                    bbox: b,
                    velocity: [0.0, 0.0],
                    intensity: cfg.clutter_intensity,
                    label: None,
                });
                break;
            }
        }
    }
    actors
}

/// Generates one sequence; identical configs give identical sequences.
pub fn generate_scene(cfg: &SceneConfig) -> Result<Sequence> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let speed = uniform(&mut rng, cfg.ego_speed);
    let yaw_rate = uniform(&mut rng, cfg.ego_yaw_rate);
    let world_core = Pose::from_yaw(
        rng.random_range(-PI..PI),
        [
            rng.random_range(-1000.0..1000.0),
            rng.random_range(-1000.0..1000.0),
            0.0,
        ],
    );
    let actors = place_actors(cfg, &mut rng);

    let n = cfg.n_scans;
    let mut scans = Vec::with_capacity(n);
    let mut core_counts = vec![0usize; actors.len()];
    for i in 0..n {
        let tau = -((n - 1 - i) as f64) * cfg.scan_period;
        let offset = ego_offset(speed, yaw_rate, tau);
        let to_scan = offset.inverse()?;
        let ego_yaw = offset.yaw();
        let mut srng = ChaCha8Rng::seed_from_u64(cfg.seed);
        srng.set_stream(1 + i as u64);
        let mut points = Vec::new();
        for (k, a) in actors.iter().enumerate() {
            let c = [
                a.bbox.cx + a.velocity[0] * tau,
                a.bbox.cy + a.velocity[1] * tau,
                a.bbox.cz,
            ];
            let p = to_scan.apply(c);
            let b = RotatedBox {
                cx: p[0],
                cy: p[1],
                cz: p[2],
                yaw: normalize_yaw(a.bbox.yaw - ego_yaw),
                ..a.bbox
            };
            let before = points.len();
            sample_box_points(cfg, &b, a.intensity, &mut srng, &mut points);
            if i == n - 1 {
                core_counts[k] = points.len() - before;
            }
        }
        let gz = Normal::new(cfg.ground_z, cfg.jitter_sigma.max(1e-12)).unwrap();
        let gi = Normal::new(cfg.ground_intensity, cfg.intensity_sigma.max(1e-12)).unwrap();
        for _ in 0..cfg.ground_points {
            let r = srng.random_range(2.0..cfg.ground_range);
            let th = srng.random_range(-PI..PI);
            points.push([
                (r * th.cos()) as f32,
                (r * th.sin()) as f32,
                gz.sample(&mut srng) as f32,
                gi.sample(&mut srng).clamp(0.0, 1.0) as f32,
            ]);
        }
        scans.push(Scan {
            points,
            pose: world_core.compose(&offset),
            timestamp: i as f64 * cfg.scan_period,
        });
    }
    let annotations = actors
        .iter()
        .zip(&core_counts)
        .filter_map(|(a, &count)| {
            let label = a.label?;
            (count > 0).then_some(RotatedBox {
                class: label,
                ..a.bbox
            })
        })
        .collect();
    Sequence::new(scans, annotations)
}
