//! Synthetic labelled shape clouds.

use std::f64::consts::PI;
use std::path::Path;

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};

use crate::error::{invalid, Result};
use crate::io::save_cloud;
use crate::pointops::PointCloud;
use crate::seed;

/// Shape classes, in label order.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Shape {
    Sphere,
    Cube,
    Cylinder,
    Cone,
}

impl Shape {
    pub const ALL: [Shape; 4] = [Shape::Sphere, Shape::Cube, Shape::Cylinder, Shape::Cone];

    pub fn label(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            Shape::Sphere => "sphere",
            Shape::Cube => "cube",
            Shape::Cylinder => "cylinder",
            Shape::Cone => "cone",
        }
    }

    /// A point drawn uniformly from the surface. Unit radius / half-extent,
    /// axis along z.
    pub fn sample_surface<R: Rng + ?Sized>(self, rng: &mut R) -> [f64; 3] {
        match self {
            Shape::Sphere => loop {
                let v: [f64; 3] = [
                    rng.sample(StandardNormal),
                    rng.sample(StandardNormal),
                    rng.sample(StandardNormal),
                ];
                let n = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
                if n > 1e-12 {
                    break [v[0] / n, v[1] / n, v[2] / n];
                }
            },
            Shape::Cube => {
                let face = rng.random_range(0..6);
                let (a, b) = (rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
                let sign = if face % 2 == 0 { 1.0 } else { -1.0 };
                match face / 2 {
                    0 => [sign, a, b],
                    1 => [a, sign, b],
                    _ => [a, b, sign],
                }
            }
            Shape::Cylinder => {
                // lateral 4π, caps π each
                let theta = rng.random_range(0.0..2.0 * PI);
                let u: f64 = rng.random_range(0.0..6.0);
                if u < 4.0 {
                    [theta.cos(), theta.sin(), rng.random_range(-1.0..1.0)]
                } else {
                    let r = rng.random_range(0.0f64..1.0).sqrt();
                    let z = if u < 5.0 { 1.0 } else { -1.0 };
                    [r * theta.cos(), r * theta.sin(), z]
                }
            }
            Shape::Cone => {
                // apex at z = 1, unit base at z = -1; lateral π√5, base π
                let theta = rng.random_range(0.0..2.0 * PI);
                let lateral = PI * 5f64.sqrt();
                let r = rng.random_range(0.0f64..1.0).sqrt();
                if rng.random_range(0.0..lateral + PI) < lateral {
                    [r * theta.cos(), r * theta.sin(), 1.0 - 2.0 * r]
                } else {
                    [r * theta.cos(), r * theta.sin(), -1.0]
                }
            }
        }
    }
}

/// Generation parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetSpec {
    pub n_train: usize,
    pub n_test: usize,
    pub points_per_cloud: usize,
    pub noise_sigma: f64,
    pub seed: u64,
    /// apply a uniformly random rotation to every cloud
    pub rotate: bool,
    /// per-axis scale factor drawn from [1 − j, 1 + j]
    pub scale_jitter: f64,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        Self {
            n_train: 200,
            n_test: 200,
            points_per_cloud: 256,
            noise_sigma: 0.02,
            seed: 0,
            rotate: false,
            scale_jitter: 0.3,
        }
    }
}

/// One labelled cloud plus the affine map that undoes its normalization.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub id: u64,
    pub label: usize,
    pub cloud: PointCloud,
    pub center: [f64; 3],
    pub scale: f64,
}

impl Sample {
    /// Positions in the frame the shape was generated in (after rotation and jitter).
    pub fn denormalized(&self) -> Array2<f64> {
        let mut p = self.cloud.positions() * self.scale;
        for mut row in p.rows_mut() {
            for c in 0..3 {
                row[c] += self.center[c];
            }
        }
        p
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub train: Vec<Sample>,
    pub test: Vec<Sample>,
    pub num_classes: usize,
}

fn random_rotation<R: Rng + ?Sized>(rng: &mut R) -> [[f64; 3]; 3] {
    let q: [f64; 4] = loop {
        let v: [f64; 4] = std::array::from_fn(|_| rng.sample(StandardNormal));
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 1e-12 {
            break v.map(|x| x / n);
        }
    };
    let [w, x, y, z] = q;
    [
        [1.0 - 2.0 * (y * y + z * z), 2.0 * (x * y - w * z), 2.0 * (x * z + w * y)],
        [2.0 * (x * y + w * z), 1.0 - 2.0 * (x * x + z * z), 2.0 * (y * z - w * x)],
        [2.0 * (x * z - w * y), 2.0 * (y * z + w * x), 1.0 - 2.0 * (x * x + y * y)],
    ]
}

/// One cloud of the given shape, normalized to the unit ball (hence [-1, 1]³).
pub fn make_sample(spec: &DatasetSpec, shape: Shape, id: u64, stream: u64) -> Result<Sample> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed::derive(&[spec.seed, stream, id]));
    let noise = Normal::new(0.0, spec.noise_sigma).map_err(|e| invalid(e.to_string()))?;
    let rot = spec.rotate.then(|| random_rotation(&mut rng));
    let j = spec.scale_jitter;
    let scale: [f64; 3] = if j > 0.0 {
        std::array::from_fn(|_| rng.random_range(1.0 - j..=1.0 + j))
    } else {
        [1.0; 3]
    };
    let n = spec.points_per_cloud;
    let mut pos = Array2::zeros((n, 3));
    for mut row in pos.rows_mut() {
        let p = shape.sample_surface(&mut rng);
        let p: [f64; 3] = std::array::from_fn(|c| p[c] * scale[c]);
        let p = match rot {
            Some(r) => std::array::from_fn(|a| (0..3).map(|b| r[a][b] * p[b]).sum()),
            None => p,
        };
        for c in 0..3 {
            row[c] = p[c]
                + if spec.noise_sigma > 0.0 {
                    noise.sample(&mut rng)
                } else {
                    0.0
                };
        }
    }
    let center: [f64; 3] = std::array::from_fn(|c| pos.column(c).mean().unwrap());
    for mut row in pos.rows_mut() {
        for c in 0..3 {
            row[c] -= center[c];
        }
    }
    let radius = pos
        .rows()
        .into_iter()
        .map(|r| r.dot(&r).sqrt())
        .fold(0.0, f64::max)
        .max(1e-12);
    pos /= radius;
    Ok(Sample {
        id,
        label: shape.label(),
        cloud: PointCloud::from_positions(pos)?,
        center,
        scale: radius,
    })
}

/// Balanced train and test splits; sample `i` of a split has class `i mod 4`.
pub fn gen_dataset(spec: &DatasetSpec) -> Result<Dataset> {
    if spec.points_per_cloud == 0 {
        return Err(invalid("points_per_cloud must be positive"));
    }
    if !(spec.noise_sigma >= 0.0) || !(0.0..1.0).contains(&spec.scale_jitter) {
        return Err(invalid("noise must be ≥ 0 and scale jitter in [0, 1)"));
    }
    let split = |n: usize, stream: u64, offset: u64| -> Result<Vec<Sample>> {
        (0..n)
            .map(|i| make_sample(spec, Shape::ALL[i % 4], offset + i as u64, stream))
            .collect()
    };
    Ok(Dataset {
        train: split(spec.n_train, 1, 0)?,
        test: split(spec.n_test, 2, 1 << 32)?,
        num_classes: Shape::ALL.len(),
    })
}

/// Write every cloud as PCLD plus a `labels.csv` index into `dir`.
pub fn write_dataset(dir: &Path, data: &Dataset) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let mut labels = csv::Writer::from_path(dir.join("labels.csv"))?;
    labels.write_record(["split", "file", "id", "label", "shape", "center_x", "center_y", "center_z", "scale"])?;
    for (split, samples) in [("train", &data.train), ("test", &data.test)] {
        for (i, s) in samples.iter().enumerate() {
            let file = format!("{split}_{i:05}.pcld");
            save_cloud(dir.join(&file), &s.cloud)?;
            labels.write_record([
                split.to_string(),
                file,
                s.id.to_string(),
                s.label.to_string(),
                Shape::ALL[s.label].name().to_string(),
                s.center[0].to_string(),
                s.center[1].to_string(),
                s.center[2].to_string(),
                s.scale.to_string(),
            ])?;
        }
    }
    labels.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sphere_radius_after_denormalization() {
        let spec = DatasetSpec {
            noise_sigma: 0.0,
            scale_jitter: 0.0,
            points_per_cloud: 300,
            ..Default::default()
        };
        let s = make_sample(&spec, Shape::Sphere, 3, 1).unwrap();
        for r in s.denormalized().rows() {
            assert!((r.dot(&r).sqrt() - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn normalized_into_unit_box() {
        let spec = DatasetSpec {
            n_train: 8,
            n_test: 4,
            ..Default::default()
        };
        let d = gen_dataset(&spec).unwrap();
        for s in d.train.iter().chain(&d.test) {
            assert!(s.cloud.positions().iter().all(|v| v.abs() <= 1.0 + 1e-12));
        }
    }

    #[test]
    fn balanced_and_deterministic() {
        let spec = DatasetSpec {
            n_train: 20,
            n_test: 8,
            points_per_cloud: 32,
            ..Default::default()
        };
        let a = gen_dataset(&spec).unwrap();
        let b = gen_dataset(&spec).unwrap();
        assert_eq!(a, b);
        for c in 0..4 {
            assert_eq!(a.train.iter().filter(|s| s.label == c).count(), 5);
        }
        let other = gen_dataset(&DatasetSpec { seed: 1, ..spec }).unwrap();
        assert_ne!(a.train[0].cloud, other.train[0].cloud);
    }

    #[test]
    fn surfaces_lie_on_their_shapes() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..200 {
            let [x, y, z] = Shape::Cube.sample_surface(&mut rng);
            assert!([x, y, z].iter().any(|v| v.abs() == 1.0));
            let [x, y, z] = Shape::Cylinder.sample_surface(&mut rng);
            let r = (x * x + y * y).sqrt();
            assert!((r - 1.0).abs() < 1e-12 || z.abs() == 1.0);
            let [x, y, z] = Shape::Cone.sample_surface(&mut rng);
            let r = (x * x + y * y).sqrt();
            assert!((r - (1.0 - z) / 2.0).abs() < 1e-12 || z == -1.0);
        }
    }
}
