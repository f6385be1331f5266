//! Labeled synthetic event streams.
//!
//! A bright disk moves across the sensor. Pixels that the disk enters emit
//! positive events and pixels it leaves emit negative ones, so polarity
//! follows the direction of the moving edge. The trajectory family depends
//! on the class:
//!
//! | class | trajectory |
//! |-------|------------|
//! | 0 | left to right |
//! | 1 | top to bottom |
//! | 2 | clockwise arc (as seen on screen, y pointing down) |
//! | 3 | counter-clockwise arc |
//! | 4 | right to left |
//! | 5 | bottom to top |
//! | 6 | diagonal, top-left to bottom-right |
//! | 7 | diagonal, bottom-left to top-right |
//! | 8+ | straight line at an angle stepped by the golden angle |

use std::f64::consts::PI;
use std::fs;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::manifest::{DatasetManifest, SampleEntry};
use super::{write_events, Event, EventCloud, EventFormat, Polarity};
use crate::rng::{derive_seed, rng_for};
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub num_classes: usize,
    pub width: u16,
    pub height: u16,
    pub duration_us: u64,
    /// Number of simulated frames; each frame difference emits events.
    pub steps: usize,
    pub object_radius: f64,
    /// Motion scale. `0` keeps the pattern static.
    pub speed: f64,
    /// Events emitted per pixel crossing, mimicking several contrast
    /// threshold crossings per edge.
    pub events_per_change: usize,
    /// Background activity in events per pixel per second.
    pub noise_rate: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            num_classes: 4,
            width: 64,
            height: 64,
            duration_us: 100_000,
            steps: 64,
            object_radius: 7.0,
            speed: 1.0,
            events_per_change: 2,
            noise_rate: 1.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Trajectory {
    Line { angle: f64 },
    Arc { clockwise: bool },
}

impl Trajectory {
    pub fn for_class(class_id: usize) -> Self {
        match class_id {
            0 => Trajectory::Line { angle: 0.0 },
            1 => Trajectory::Line { angle: PI / 2.0 },
            2 => Trajectory::Arc { clockwise: true },
            3 => Trajectory::Arc { clockwise: false },
            4 => Trajectory::Line { angle: PI },
            5 => Trajectory::Line { angle: -PI / 2.0 },
            6 => Trajectory::Line { angle: PI / 4.0 },
            7 => Trajectory::Line { angle: -PI / 4.0 },
            c => {
                let golden = PI * (3.0 - 5f64.sqrt());
                Trajectory::Line {
                    angle: (c as f64 * golden).rem_euclid(2.0 * PI),
                }
            }
        }
    }
}

/// Per-sample randomness drawn once, so the whole trajectory is fixed before
/// any pixel is rasterized.
struct Motion {
    trajectory: Trajectory,
    center: (f64, f64),
    extent: f64,
    phase: f64,
    offset: f64,
    speed: f64,
}

impl Motion {
    /// Disk center at normalized time `s` in [0, 1].
    fn position(&self, s: f64) -> (f64, f64) {
        let (cx, cy) = self.center;
        match self.trajectory {
            Trajectory::Line { angle } => {
                let (dx, dy) = (angle.cos(), angle.sin());
                let along = (s - 0.5) * self.extent * self.speed;
                (
                    cx + along * dx - self.offset * dy,
                    cy + along * dy + self.offset * dx,
                )
            }
            Trajectory::Arc { clockwise } => {
                // y grows downwards, so increasing angle turns clockwise on screen
                let dir = if clockwise { 1.0 } else { -1.0 };
                let theta = self.phase + dir * s * 1.5 * PI * self.speed;
                (
                    cx + self.extent * theta.cos(),
                    cy + self.extent * theta.sin(),
                )
            }
        }
    }
}

/// Generates one labeled stream. Pure in `(class_id, config, seed)`.
pub fn generate_synthetic(class_id: usize, config: &SynthConfig, seed: u64) -> Result<EventCloud> {
    if class_id >= config.num_classes {
        return Err(Error::InvalidArgument(format!(
            "class {class_id} out of range for {} classes",
            config.num_classes
        )));
    }
    if config.width == 0 || config.height == 0 || config.steps == 0 {
        return Err(Error::InvalidArgument(
            "sensor size and step count must be positive".into(),
        ));
    }
    let mut rng = rng_for(seed, &[class_id as u64]);
    let (w, h) = (config.width as f64, config.height as f64);
    let span = w.min(h);
    let trajectory = Trajectory::for_class(class_id);
    let motion = Motion {
        trajectory,
        center: (
            w / 2.0 + rng.gen_range(-0.05..0.05) * span,
            h / 2.0 + rng.gen_range(-0.05..0.05) * span,
        ),
        extent: match trajectory {
            Trajectory::Line { .. } => 0.6 * span,
            Trajectory::Arc { .. } => 0.25 * span,
        },
        phase: PI + rng.gen_range(-0.3..0.3),
        offset: rng.gen_range(-0.1..0.1) * span,
        speed: config.speed * rng.gen_range(0.9..1.1),
    };
    let radius = config.object_radius * rng.gen_range(0.9..1.1);

    let (wi, hi) = (config.width as usize, config.height as usize);
    let inside = |pos: (f64, f64), x: usize, y: usize| {
        let dx = x as f64 + 0.5 - pos.0;
        let dy = y as f64 + 0.5 - pos.1;
        dx * dx + dy * dy <= radius * radius
    };

    let frame_us = config.duration_us as f64 / config.steps as f64;
    let mut events = Vec::new();
    let mut prev = motion.position(0.0);
    for k in 1..=config.steps {
        let cur = motion.position(k as f64 / config.steps as f64);
        let lo_x = (prev.0.min(cur.0) - radius - 1.0).floor().max(0.0) as usize;
        let hi_x = ((prev.0.max(cur.0) + radius + 1.0).ceil().max(0.0) as usize).min(wi);
        let lo_y = (prev.1.min(cur.1) - radius - 1.0).floor().max(0.0) as usize;
        let hi_y = ((prev.1.max(cur.1) + radius + 1.0).ceil().max(0.0) as usize).min(hi);
        for y in lo_y..hi_y {
            for x in lo_x..hi_x {
                let polarity = match (inside(prev, x, y), inside(cur, x, y)) {
                    (false, true) => Polarity::Positive,
                    (true, false) => Polarity::Negative,
                    _ => continue,
                };
                for _ in 0..config.events_per_change {
                    let t = ((k - 1) as f64 + rng.gen::<f64>()) * frame_us;
                    events.push(Event::new(x as u16, y as u16, t as u64, polarity));
                }
            }
        }
        prev = cur;
    }

    let noise = (config.noise_rate * w * h * config.duration_us as f64 * 1e-6).round() as usize;
    for _ in 0..noise {
        let p = if rng.gen_bool(0.5) {
            Polarity::Positive
        } else {
            Polarity::Negative
        };
        events.push(Event::new(
            rng.gen_range(0..config.width),
            rng.gen_range(0..config.height),
            rng.gen_range(0..config.duration_us.max(1)),
            p,
        ));
    }

    Ok(EventCloud::new(config.width, config.height, events)?.with_label(class_id))
}

/// Writes `samples_per_class` binary event files per class into `out_dir`
/// together with `manifest.json`. Each class is split 80/20 on its own, so
/// both splits stay balanced.
pub fn synth_dataset(
    out_dir: &Path,
    config: &SynthConfig,
    samples_per_class: usize,
    seed: u64,
) -> Result<DatasetManifest> {
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let mut samples = Vec::with_capacity(config.num_classes * samples_per_class);
    for class_id in 0..config.num_classes {
        let splits = DatasetManifest::stratified_assignment(
            samples_per_class,
            0.8,
            derive_seed(seed, &[class_id as u64, 0x5b17]),
        );
        for (k, split) in splits.into_iter().enumerate() {
            let sample_seed = derive_seed(seed, &[class_id as u64, k as u64]);
            let cloud = generate_synthetic(class_id, config, sample_seed)?;
            let name = format!("class{class_id:02}_{k:05}.evs");
            write_events(&cloud, out_dir.join(&name), EventFormat::Binary)?;
            samples.push(SampleEntry {
                path: name.into(),
                label: class_id,
                split,
            });
        }
    }
    let manifest = DatasetManifest {
        name: "synthetic".into(),
        num_classes: config.num_classes,
        seed,
        sensor_width: config.width,
        sensor_height: config.height,
        samples,
        root: out_dir.to_path_buf(),
    };
    manifest.validate()?;
    manifest.save(out_dir.join("manifest.json"))?;
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mean_angular_velocity(cloud: &EventCloud) -> f64 {
        let (cx, cy) = (cloud.width() as f64 / 2.0, cloud.height() as f64 / 2.0);
        let windows = 16;
        let t_end = cloud.events().last().unwrap().t + 1;
        let mut angles = Vec::new();
        for w in 0..windows {
            let (lo, hi) = (t_end * w / windows, t_end * (w + 1) / windows);
            let sel: Vec<_> = cloud
                .events()
                .iter()
                .filter(|e| e.t >= lo && e.t < hi)
                .collect();
            let n = sel.len() as f64;
            let mx = sel.iter().map(|e| e.x as f64 + 0.5).sum::<f64>() / n;
            let my = sel.iter().map(|e| e.y as f64 + 0.5).sum::<f64>() / n;
            angles.push((my - cy).atan2(mx - cx));
        }
        let mut total = 0.0;
        for pair in angles.windows(2) {
            let mut d = pair[1] - pair[0];
            while d > PI {
                d -= 2.0 * PI;
            }
            while d < -PI {
                d += 2.0 * PI;
            }
            total += d;
        }
        total / (windows - 1) as f64
    }

    #[test]
    fn static_pattern_without_noise_is_silent() {
        let cfg = SynthConfig {
            speed: 0.0,
            noise_rate: 0.0,
            ..SynthConfig::default()
        };
        for c in 0..4 {
            assert!(generate_synthetic(c, &cfg, 3).unwrap().is_empty());
        }
    }

    #[test]
    fn deterministic() {
        let cfg = SynthConfig::default();
        let a = generate_synthetic(1, &cfg, 11).unwrap();
        let b = generate_synthetic(1, &cfg, 11).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, generate_synthetic(1, &cfg, 12).unwrap());
    }

    #[test]
    fn arcs_rotate_in_opposite_directions() {
        let cfg = SynthConfig {
            noise_rate: 0.0,
            ..SynthConfig::default()
        };
        for seed in 0..5 {
            let cw = mean_angular_velocity(&generate_synthetic(2, &cfg, seed).unwrap());
            let ccw = mean_angular_velocity(&generate_synthetic(3, &cfg, seed).unwrap());
            assert!(cw > 0.1 && ccw < -0.1, "seed {seed}: {cw} vs {ccw}");
        }
    }

    #[test]
    fn event_counts_in_desk_range_and_valid() {
        let cfg = SynthConfig::default();
        for c in 0..8 {
            let cfg = SynthConfig {
                num_classes: 8,
                ..cfg.clone()
            };
            let cloud = generate_synthetic(c, &cfg, 5).unwrap();
            cloud.validate().unwrap();
            assert!(
                (2_000..=10_000).contains(&cloud.len()),
                "class {c}: {} events",
                cloud.len()
            );
            assert_eq!(cloud.label, Some(c));
        }
    }

    #[test]
    fn rejects_bad_class() {
        assert!(matches!(
            generate_synthetic(4, &SynthConfig::default(), 0),
            Err(Error::InvalidArgument(_))
        ));
    }
}
