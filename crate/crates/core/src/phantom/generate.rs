use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seed;
use crate::tensor::{Shape, Tensor};

/// Parameters of a synthetic vessel volume. Extents are (D, H, W).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PhantomSpec {
    pub extents: [usize; 3],
    pub vessels: usize,
    /// Inclusive radius range in voxels.
    pub radius: [f64; 2],
    /// Chance of a branch at each centerline step.
    pub bifurcation_probability: f64,
    /// Largest direction change per step, radians.
    pub max_bend: f64,
    pub background: f64,
    pub contrast: f64,
    pub noise_sigma: f64,
    pub blur_sigma: f64,
    pub seed: u64,
}

impl Default for PhantomSpec {
    fn default() -> Self {
        PhantomSpec {
            extents: [32, 32, 32],
            vessels: 1,
            radius: [2.0, 4.0],
            bifurcation_probability: 0.01,
            max_bend: 0.05,
            background: 0.0,
            contrast: 1.0,
            noise_sigma: 0.1,
            blur_sigma: 1.0,
            seed: 0,
        }
    }
}

impl PhantomSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidSpec(m));
        if self.extents.iter().any(|&e| e == 0 || e % 8 != 0) {
            return bad(format!("extents {:?} must be positive multiples of 8", self.extents));
        }
        let [r_min, r_max] = self.radius;
        if !(r_min >= 1.0 && r_min <= r_max) {
            return bad(format!("radius range {:?} must satisfy 1 <= r_min <= r_max", self.radius));
        }
        let min_extent = *self.extents.iter().min().unwrap() as f64;
        if r_max >= min_extent / 2.0 {
            return bad(format!(
                "a tube of radius {r_max} does not fit in extents {:?}",
                self.extents
            ));
        }
        if !(self.contrast > 0.0) {
            return bad(format!("contrast must be positive, got {}", self.contrast));
        }
        if !(0.0..=1.0).contains(&self.bifurcation_probability) {
            return bad("bifurcation_probability must lie in [0, 1]".into());
        }
        if !(self.max_bend >= 0.0 && self.noise_sigma >= 0.0 && self.blur_sigma >= 0.0) {
            return bad("max_bend, noise_sigma and blur_sigma must be non-negative".into());
        }
        if self.vessels == 0 {
            return bad("at least one vessel is required".into());
        }
        Ok(())
    }
}

/// Sampled centerline in (z, y, x) voxel coordinates with a radius per point.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Centerline {
    pub points: Vec<[f64; 3]>,
    pub radii: Vec<f64>,
}

impl Centerline {
    /// Straight line from `a` to `b` with constant radius, sampled every half voxel.
    pub fn straight(a: [f64; 3], b: [f64; 3], radius: f64) -> Self {
        let len = dist(a, b);
        let n = (len / 0.5).ceil().max(1.0) as usize;
        let points: Vec<_> = (0..=n)
            .map(|i| {
                let t = i as f64 / n as f64;
                [0, 1, 2].map(|k| a[k] + t * (b[k] - a[k]))
            })
            .collect();
        Centerline {
            radii: vec![radius; points.len()],
            points,
        }
    }

    /// Length of the polyline inside the box `[0, extent - 1]` per axis.
    pub fn length_inside(&self, extents: [usize; 3]) -> f64 {
        let inside = |p: &[f64; 3]| (0..3).all(|k| p[k] >= 0.0 && p[k] <= (extents[k] - 1) as f64);
        self.points
            .windows(2)
            .filter(|w| inside(&w[0]) && inside(&w[1]))
            .map(|w| dist(w[0], w[1]))
            .sum()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PhantomSample {
    pub volume: Tensor<f32>,
    pub wall_labels: Tensor<f32>,
    pub vessel_labels: Tensor<f32>,
    pub centerlines: Vec<Centerline>,
}

fn dist(a: [f64; 3], b: [f64; 3]) -> f64 {
    (0..3).map(|k| (a[k] - b[k]).powi(2)).sum::<f64>().sqrt()
}

fn normalize(v: [f64; 3]) -> [f64; 3] {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.map(|x| x / n)
}

/// Rotates unit `d` by `angle` towards a random perpendicular direction.
fn bend(d: [f64; 3], angle: f64, rng: &mut impl Rng) -> [f64; 3] {
    let u = loop {
        let r = [0; 3].map(|_| rng.random_range(-1.0..1.0f64));
        let dot: f64 = (0..3).map(|k| r[k] * d[k]).sum();
        let p = [0, 1, 2].map(|k| r[k] - dot * d[k]);
        if p.iter().map(|x| x * x).sum::<f64>() > 1e-6 {
            break normalize(p);
        }
    };
    normalize([0, 1, 2].map(|k| angle.cos() * d[k] + angle.sin() * u[k]))
}

const STEP: f64 = 0.5;

fn walk_vessel(spec: &PhantomSpec, rng: &mut impl Rng) -> Vec<Centerline> {
    let ext = spec.extents.map(|e| e as f64);
    let [r_min, r_max] = spec.radius;
    let r0 = rng.random_range(r_min..=r_max);

    // Enter through a random face, heading roughly inward.
    let axis = rng.random_range(0..3);
    let far = rng.random_bool(0.5);
    let mut start = [0.0; 3];
    for k in 0..3 {
        let lo = (r_max + 1.0).min(ext[k] / 2.0);
        let hi = (ext[k] - 2.0 - r_max).max(ext[k] / 2.0);
        start[k] = rng.random_range(lo..=hi);
    }
    start[axis] = if far { ext[axis] - 1.0 } else { 0.0 };
    let mut dir = [0.0; 3];
    dir[axis] = if far { -1.0 } else { 1.0 };
    let dir = bend(dir, rng.random_range(0.0..=0.4), rng);

    let outside = |p: [f64; 3], r: f64| (0..3).any(|k| p[k] < -r || p[k] > ext[k] - 1.0 + r);
    let max_steps = (8.0 * ext.iter().sum::<f64>() / STEP) as usize;
    let max_branches = 8;

    let mut pending = vec![(start, dir, r0)];
    let mut lines = Vec::new();
    while let Some((mut p, mut d, mut r)) = pending.pop() {
        let mut line = Centerline::default();
        for _ in 0..max_steps {
            line.points.push(p);
            line.radii.push(r);
            if rng.random_bool(spec.bifurcation_probability)
                && lines.len() + pending.len() + 1 < max_branches
            {
                let angle = rng.random_range(std::f64::consts::FRAC_PI_6..=std::f64::consts::FRAC_PI_3);
                r = (0.85 * r).max(r_min);
                pending.push((p, bend(d, angle, rng), r));
            }
            d = bend(d, rng.random_range(0.0..=spec.max_bend), rng);
            r = (r + rng.random_range(-0.02..=0.02)).clamp(r_min, r_max);
            p = [0, 1, 2].map(|k| p[k] + STEP * d[k]);
            if outside(p, r) {
                break;
            }
        }
        lines.push(line);
    }
    lines
}

/// Marks every voxel centre within the local radius of a centerline point.
pub fn rasterize_vessels(extents: [usize; 3], lines: &[Centerline]) -> Tensor<f32> {
    let [d, h, w] = extents;
    let mut out = Tensor::zeros(Shape::volume(d, h, w));
    let data = out.data_mut();
    for line in lines {
        for (p, &r) in line.points.iter().zip(&line.radii) {
            let range = |k: usize| {
                let lo = (p[k] - r).ceil().max(0.0) as usize;
                let hi = (p[k] + r).floor().min(extents[k] as f64 - 1.0);
                if hi < 0.0 {
                    lo..0
                } else {
                    lo..hi as usize + 1
                }
            };
            for z in range(0) {
                for y in range(1) {
                    for x in range(2) {
                        let q = [z as f64, y as f64, x as f64];
                        if dist(*p, q) <= r {
                            data[(z * h + y) * w + x] = 1.0;
                        }
                    }
                }
            }
        }
    }
    out
}

/// Vessel voxels with at least one in-bounds non-vessel 6-neighbour.
pub fn wall_labels(vessel: &Tensor<f32>) -> Tensor<f32> {
    let [_, _, d, h, w] = vessel.shape().0;
    let v = vessel.data();
    let at = |z: usize, y: usize, x: usize| v[(z * h + y) * w + x] != 0.0;
    Tensor::from_fn(vessel.shape(), |[_, _, z, y, x]| {
        if !at(z, y, x) {
            return 0.0;
        }
        let open = (z > 0 && !at(z - 1, y, x))
            || (z + 1 < d && !at(z + 1, y, x))
            || (y > 0 && !at(z, y - 1, x))
            || (y + 1 < h && !at(z, y + 1, x))
            || (x > 0 && !at(z, y, x - 1))
            || (x + 1 < w && !at(z, y, x + 1));
        if open {
            1.0
        } else {
            0.0
        }
    })
}

/// Separable Gaussian blur with clamped borders.
pub fn gaussian_blur(volume: &Tensor<f32>, sigma: f64) -> Tensor<f32> {
    if sigma == 0.0 {
        return volume.clone();
    }
    let radius = (3.0 * sigma).ceil() as isize;
    let kernel: Vec<f64> = (-radius..=radius)
        .map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let norm: f64 = kernel.iter().sum();
    let kernel: Vec<f64> = kernel.iter().map(|k| k / norm).collect();

    let [_, _, d, h, w] = volume.shape().0;
    let dims = [d, h, w];
    let strides = [h * w, w, 1];
    let mut cur: Vec<f64> = volume.data().iter().map(|&v| v as f64).collect();
    for axis in 0..3 {
        let n = dims[axis] as isize;
        let s = strides[axis];
        let mut next = vec![0.0; cur.len()];
        for (i, out) in next.iter_mut().enumerate() {
            let pos = ((i / s) % dims[axis]) as isize;
            let base = i - pos as usize * s;
            *out = kernel
                .iter()
                .enumerate()
                .map(|(j, k)| {
                    let q = (pos + j as isize - radius).clamp(0, n - 1) as usize;
                    k * cur[base + q * s]
                })
                .sum();
        }
        cur = next;
    }
    Tensor::new(volume.shape(), cur.into_iter().map(|v| v as f32).collect()).expect("same shape")
}

/// Renders labels and intensities for explicit centerlines.
pub fn render_phantom(spec: &PhantomSpec, centerlines: Vec<Centerline>) -> Result<PhantomSample> {
    spec.validate()?;
    let vessel_labels = rasterize_vessels(spec.extents, &centerlines);
    let wall = wall_labels(&vessel_labels);
    let smooth = gaussian_blur(&vessel_labels, spec.blur_sigma);
    let mut volume = smooth.map(|v| (spec.background + spec.contrast * v as f64) as f32);
    if spec.noise_sigma > 0.0 {
        let normal = Normal::new(0.0, spec.noise_sigma).expect("validated sigma");
        let mut rng = seed::rng(spec.seed, "phantom/noise", 0);
        for v in volume.data_mut() {
            *v = (*v as f64 + normal.sample(&mut rng)) as f32;
        }
    }
    Ok(PhantomSample {
        volume,
        wall_labels: wall,
        vessel_labels,
        centerlines,
    })
}

pub fn generate_phantom(spec: &PhantomSpec) -> Result<PhantomSample> {
    spec.validate()?;
    let mut lines = Vec::new();
    for v in 0..spec.vessels {
        let mut rng = seed::rng(spec.seed, "phantom/vessel", v as u64);
        lines.extend(walk_vessel(spec, &mut rng));
    }
    render_phantom(spec, lines)
}
