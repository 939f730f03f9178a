//! Procedural two-domain face generator.
//!
//! Each identity is a set of component geometry and texture parameters. A
//! sample renders that identity in the VIS or NIR domain under a random pose
//! shift, shear, expression change and (at the severe level) a half-plane
//! occlusion. Masks are produced by the same inside-tests that shade the
//! pixels, so they are exact component supports.

use std::f64::consts::TAU;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::backbone::{Part, NUM_PARTS};
use crate::dataset::{sample_id, write_manifest, write_sample, Dataset, Domain, FaceSample, ManifestRow};
use crate::error::{Error, Result};
use crate::eval;
use crate::mask::BinaryMask;
use crate::tensor::Tensor;

pub const CANVAS: usize = 144;
const CENTER: f64 = 72.0;

/// Minimum Euclidean distance (pixels) between two identities' geometry vectors.
pub const MIN_GEOMETRY_SEPARATION: f64 = 8.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Perturbation {
    None,
    Mild,
    Severe,
}

impl FromStr for Perturbation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(Perturbation::None),
            "mild" => Ok(Perturbation::Mild),
            "severe" => Ok(Perturbation::Severe),
            other => Err(Error::InvalidArgument(format!(
                "perturbation level `{other}` (expected none, mild or severe)"
            ))),
        }
    }
}

impl fmt::Display for Perturbation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Perturbation::None => "none",
            Perturbation::Mild => "mild",
            Perturbation::Severe => "severe",
        })
    }
}

/// Component layout relative to the face centre, in pixels.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Geometry {
    pub face_rx: f64,
    pub face_ry: f64,
    pub eye_y: f64,
    pub eye_sep: f64,
    pub eye_rx: f64,
    pub eye_ry: f64,
    pub nose_y: f64,
    pub nose_hw: f64,
    pub nose_hh: f64,
    pub mouth_y: f64,
    pub mouth_rx: f64,
    pub mouth_ry: f64,
}

const GEOMETRY_RANGES: [(f64, f64); 12] = [
    (44.0, 54.0),
    (54.0, 64.0),
    (-26.0, -14.0),
    (14.0, 22.0),
    (6.0, 10.0),
    (3.0, 6.0),
    (2.0, 8.0),
    (4.0, 8.0),
    (5.0, 10.0),
    (24.0, 32.0),
    (10.0, 18.0),
    (3.0, 7.0),
];

impl Geometry {
    pub fn to_array(&self) -> [f64; 12] {
        [
            self.face_rx,
            self.face_ry,
            self.eye_y,
            self.eye_sep,
            self.eye_rx,
            self.eye_ry,
            self.nose_y,
            self.nose_hw,
            self.nose_hh,
            self.mouth_y,
            self.mouth_rx,
            self.mouth_ry,
        ]
    }

    fn from_array(a: [f64; 12]) -> Self {
        Geometry {
            face_rx: a[0],
            face_ry: a[1],
            eye_y: a[2],
            eye_sep: a[3],
            eye_rx: a[4],
            eye_ry: a[5],
            nose_y: a[6],
            nose_hw: a[7],
            nose_hh: a[8],
            mouth_y: a[9],
            mouth_rx: a[10],
            mouth_ry: a[11],
        }
    }

    pub fn distance(&self, other: &Geometry) -> f64 {
        self.to_array()
            .iter()
            .zip(other.to_array())
            .map(|(a, b)| (a - b).powi(2))
            .sum::<f64>()
            .sqrt()
    }
}

/// Base intensities in the visible domain.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Texture {
    pub skin: f64,
    pub eye: f64,
    pub nose: f64,
    pub mouth: f64,
    /// Direction of the linear shading across the face.
    pub shade_angle: f64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct IdentitySpec {
    pub identity: usize,
    pub geometry: Geometry,
    pub texture: Texture,
}

/// Pixels with `(x − cx)·cos θ + (y − cy)·sin θ > offset` are blanked.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Occlusion {
    pub angle: f64,
    pub offset: f64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RenderSpec {
    pub identity: IdentitySpec,
    pub domain: Domain,
    /// `(dx, dy)` in pixels; positive dx moves the face right.
    pub pose_shift: (f64, f64),
    pub shear: f64,
    /// Positive widens the mouth and narrows the eyes.
    pub emotion: f64,
    pub occlusion: Option<Occlusion>,
    /// Amplitude of uniform pixel noise.
    pub noise: f64,
    pub noise_seed: u64,
}

impl RenderSpec {
    pub fn canonical(identity: IdentitySpec, domain: Domain) -> Self {
        RenderSpec {
            identity,
            domain,
            pose_shift: (0.0, 0.0),
            shear: 0.0,
            emotion: 0.0,
            occlusion: None,
            noise: 0.0,
            noise_seed: 0,
        }
    }
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

fn derive_seed(seed: u64, parts: &[u64]) -> u64 {
    parts.iter().fold(splitmix(seed), |acc, &p| splitmix(acc ^ p))
}

/// Draws `count` identities whose geometries are pairwise at least
/// [`MIN_GEOMETRY_SEPARATION`] apart.
pub fn sample_identities(count: usize, seed: u64) -> Result<Vec<IdentitySpec>> {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[0x1d]));
    let mut out: Vec<IdentitySpec> = Vec::with_capacity(count);
    let mut attempts = 0usize;
    while out.len() < count {
        attempts += 1;
        if attempts > 1000 * (count + 1) {
            return Err(Error::InvalidArgument(format!(
                "could not place {count} identities with separation {MIN_GEOMETRY_SEPARATION}"
            )));
        }
        let geometry =
            Geometry::from_array(GEOMETRY_RANGES.map(|(lo, hi)| rng.random_range(lo..hi)));
        let skin = rng.random_range(0.4..0.85);
        let texture = Texture {
            skin,
            eye: rng.random_range(0.02..0.35),
            nose: skin * rng.random_range(0.6..0.85),
            mouth: rng.random_range(0.1..0.5),
            shade_angle: rng.random_range(0.0..TAU),
        };
        if out
            .iter()
            .all(|o| o.geometry.distance(&geometry) >= MIN_GEOMETRY_SEPARATION)
        {
            out.push(IdentitySpec {
                identity: out.len(),
                geometry,
                texture,
            });
        }
    }
    Ok(out)
}

impl Perturbation {
    pub fn sample<R: Rng + ?Sized>(
        self,
        identity: IdentitySpec,
        domain: Domain,
        rng: &mut R,
    ) -> RenderSpec {
        let (shift, shear, emotion, occlusion_p) = match self {
            Perturbation::None => (0.0, 0.0, 0.0, 0.0),
            Perturbation::Mild => (2.0, 0.03, 0.1, 0.0),
            Perturbation::Severe => (2.0, 0.06, 0.4, 0.5),
        };
        let mut sym = |a: f64| if a > 0.0 { rng.random_range(-a..=a) } else { 0.0 };
        let pose_shift = (sym(shift), sym(shift));
        let shear = sym(shear);
        let emotion = sym(emotion);
        let occlusion = (occlusion_p > 0.0 && rng.random_bool(occlusion_p)).then(|| Occlusion {
            angle: rng.random_range(0.0..TAU),
            offset: rng.random_range(0.0..35.0),
        });
        let noise = if self == Perturbation::None { 0.0 } else { 0.03 };
        RenderSpec {
            identity,
            domain,
            pose_shift,
            shear,
            emotion,
            occlusion,
            noise,
            noise_seed: rng.random(),
        }
    }
}

fn ellipse(x: f64, y: f64, cx: f64, cy: f64, rx: f64, ry: f64) -> Option<f64> {
    let q = ((x - cx) / rx).powi(2) + ((y - cy) / ry).powi(2);
    (q <= 1.0).then_some(q)
}

/// Renders a 144×144 single-channel face and its five masks.
pub fn render(spec: &RenderSpec) -> (Tensor<f32>, Vec<BinaryMask>) {
    let g = &spec.identity.geometry;
    let t = &spec.identity.texture;
    let e = spec.emotion;
    let eye_ry = (g.eye_ry * (1.0 - 0.5 * e)).max(1.5);
    let mouth_rx = g.mouth_rx * (1.0 + 0.3 * e);
    let mouth_ry = (g.mouth_ry * (1.0 + e)).max(1.5);
    let (sc, ss) = (t.shade_angle.cos(), t.shade_angle.sin());
    let mut noise_rng = ChaCha8Rng::seed_from_u64(spec.noise_seed);

    let mut pixels = Vec::with_capacity(CANVAS * CANVAS);
    let mut masks = vec![BinaryMask::empty(CANVAS, CANVAS); NUM_PARTS];
    for r in 0..CANVAS {
        for c in 0..CANVAS {
            let y = r as f64 - CENTER - spec.pose_shift.1;
            let x = c as f64 - CENTER - spec.pose_shift.0 - spec.shear * y;
            let occluded = spec.occlusion.is_some_and(|o| {
                (c as f64 - CENTER) * o.angle.cos() + (r as f64 - CENTER) * o.angle.sin() > o.offset
            });

            let mut part = None;
            let mut v = 0.15 + 0.1 * r as f64 / CANVAS as f64;
            if let Some(rho) = ellipse(x, y, 0.0, 0.0, g.face_rx, g.face_ry) {
                v = t.skin * (1.0 - 0.25 * rho) + 0.08 * (x * sc + y * ss) / 60.0;
                part = Some(Part::Full);
                let eye = |cx: f64| ellipse(x, y, cx, g.eye_y, g.eye_rx, eye_ry);
                let nose_t = (y - (g.nose_y - g.nose_hh)) / (2.0 * g.nose_hh);
                if let Some(q) = eye(-g.eye_sep) {
                    v = t.eye * (0.6 + 0.4 * q);
                    part = Some(Part::LeftEye);
                } else if let Some(q) = eye(g.eye_sep) {
                    v = t.eye * (0.6 + 0.4 * q);
                    part = Some(Part::RightEye);
                } else if (0.0..=1.0).contains(&nose_t) && x.abs() <= g.nose_hw * (0.6 + 0.4 * nose_t) {
                    v = t.nose + 0.1 * nose_t;
                    part = Some(Part::Nose);
                } else if let Some(q) = ellipse(x, y, 0.0, g.mouth_y, mouth_rx, mouth_ry) {
                    v = t.mouth * (0.7 + 0.3 * q);
                    part = Some(Part::Mouth);
                }
            }
            if spec.domain == Domain::Nir {
                v = 0.92 - 0.75 * v.clamp(0.0, 1.0).powf(0.8)
                    + 0.1 * c as f64 / CANVAS as f64
                    + 0.05 * (std::f64::consts::PI * r as f64 / CANVAS as f64).cos();
            }
            if spec.noise > 0.0 {
                v += noise_rng.random_range(-spec.noise..=spec.noise);
            }
            if occluded {
                v = 0.0;
            } else if let Some(p) = part {
                masks[Part::Full.index()].set(r, c, true);
                if p != Part::Full {
                    masks[p.index()].set(r, c, true);
                }
            }
            pixels.push(v.clamp(0.0, 1.0) as f32);
        }
    }
    let image = Tensor::new(vec![1, CANVAS, CANVAS], pixels).expect("canvas shape");
    (image, masks)
}

#[derive(Clone, Debug, PartialEq)]
pub struct GenConfig {
    pub num_ids: usize,
    /// Additional identities rendered into the held-out `test` split.
    pub test_ids: usize,
    pub per_id: usize,
    pub seed: u64,
    pub level: Perturbation,
}

impl Default for GenConfig {
    fn default() -> Self {
        GenConfig {
            num_ids: 20,
            test_ids: 10,
            per_id: 4,
            seed: 7,
            level: Perturbation::Mild,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct GenSummary {
    pub train_ids: usize,
    pub train_samples: usize,
    pub test_ids: usize,
    pub test_samples: usize,
    /// Component masks (indices 1..4) that came out empty.
    pub empty_masks: usize,
}

pub const TRAIN_SPLIT: &str = "train";
pub const TEST_SPLIT: &str = "test";

/// Renders both splits in memory, in manifest order.
pub fn generate_samples(config: &GenConfig) -> Result<Vec<(ManifestRow, FaceSample)>> {
    if config.num_ids < 2 {
        return Err(Error::InvalidArgument(format!(
            "need at least 2 identities, got {}",
            config.num_ids
        )));
    }
    if config.per_id == 0 {
        return Err(Error::InvalidArgument("per_id must be positive".into()));
    }
    let ids = sample_identities(config.num_ids + config.test_ids, config.seed)?;
    let mut out = Vec::with_capacity(ids.len() * 2 * config.per_id);
    for spec in ids {
        let split = if spec.identity < config.num_ids {
            TRAIN_SPLIT
        } else {
            TEST_SPLIT
        };
        for domain in Domain::BOTH {
            for k in 0..config.per_id {
                let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(
                    config.seed,
                    &[spec.identity as u64, domain as u64, k as u64],
                ));
                let rs = config.level.sample(spec, domain, &mut rng);
                let (image, masks) = render(&rs);
                let row = ManifestRow::new(split, spec.identity, domain, k);
                let sample = FaceSample {
                    sample_id: sample_id(split, spec.identity, domain, k),
                    identity: spec.identity,
                    domain,
                    image,
                    masks,
                };
                out.push((row, sample));
            }
        }
    }
    Ok(out)
}

/// Writes the dataset layout and manifest under `root`.
pub fn generate_dataset(root: &Path, config: &GenConfig) -> Result<GenSummary> {
    let samples = generate_samples(config)?;
    std::fs::create_dir_all(root).map_err(|e| Error::io(root, e))?;
    let mut summary = GenSummary {
        train_ids: config.num_ids,
        test_ids: config.test_ids,
        ..Default::default()
    };
    for (row, sample) in &samples {
        write_sample(root, row, sample)?;
        if row.split == TRAIN_SPLIT {
            summary.train_samples += 1;
        } else {
            summary.test_samples += 1;
        }
        summary.empty_masks += sample.masks[1..].iter().filter(|m| m.is_empty()).count();
    }
    let rows: Vec<ManifestRow> = samples.into_iter().map(|(r, _)| r).collect();
    write_manifest(root, &rows)?;
    Ok(summary)
}

/// In-memory split of [`generate_samples`], for tests and benchmarks.
pub fn generate_split(config: &GenConfig, split: &str) -> Result<Dataset> {
    let samples = generate_samples(config)?
        .into_iter()
        .filter(|(r, _)| r.split == split)
        .map(|(_, s)| s)
        .collect();
    Dataset::new(samples)
}

/// Rank-1 identification using raw pixels (negative Euclidean distance).
/// The gallery is the first VIS sample of each identity; probes are the
/// remaining VIS samples (`cross_domain = false`) or all NIR samples.
pub fn raw_pixel_rank1(dataset: &Dataset, cross_domain: bool) -> Result<f64> {
    let index = dataset.index();
    let mut gallery = Vec::new();
    let mut gallery_ids = Vec::new();
    let mut probes = Vec::new();
    let mut probe_ids = Vec::new();
    for (&id, by_domain) in &index {
        let vis = &by_domain[Domain::Vis as usize];
        let Some((&first, rest)) = vis.split_first() else {
            continue;
        };
        gallery.push(first);
        gallery_ids.push(id);
        let probe_set: &[usize] = if cross_domain {
            &by_domain[Domain::Nir as usize]
        } else {
            rest
        };
        for &p in probe_set {
            probes.push(p);
            probe_ids.push(id);
        }
    }
    let scores: Vec<Vec<f64>> = probes
        .iter()
        .map(|&p| {
            let pv = dataset.get(p).image.data();
            gallery
                .iter()
                .map(|&g| {
                    let gv = dataset.get(g).image.data();
                    -pv.iter()
                        .zip(gv)
                        .map(|(a, b)| ((a - b) as f64).powi(2))
                        .sum::<f64>()
                        .sqrt()
                })
                .collect()
        })
        .collect();
    eval::rank1(&scores, &probe_ids, &gallery_ids)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mask::{bounding_box, iou};

    fn one_identity() -> IdentitySpec {
        sample_identities(1, 5).unwrap()[0]
    }

    #[test]
    fn identities_are_separated() {
        let ids = sample_identities(30, 1).unwrap();
        for (i, a) in ids.iter().enumerate() {
            for b in &ids[i + 1..] {
                assert!(a.geometry.distance(&b.geometry) >= MIN_GEOMETRY_SEPARATION);
            }
        }
        assert_eq!(ids, sample_identities(30, 1).unwrap());
    }

    #[test]
    fn canonical_render_has_all_components_inside_face() {
        let (img, masks) = render(&RenderSpec::canonical(one_identity(), Domain::Vis));
        assert_eq!(img.shape(), &[1, 144, 144]);
        for p in 1..NUM_PARTS {
            assert!(!masks[p].is_empty(), "part {p}");
            for (i, &b) in masks[p].bits().iter().enumerate() {
                assert!(!b || masks[0].bits()[i]);
            }
            for q in p + 1..NUM_PARTS {
                assert_eq!(iou(&masks[p], &masks[q]).unwrap(), 0.0);
            }
        }
    }

    #[test]
    fn integer_shift_translates_masks() {
        let id = one_identity();
        let (_, base) = render(&RenderSpec::canonical(id, Domain::Vis));
        let mut spec = RenderSpec::canonical(id, Domain::Vis);
        spec.pose_shift = (8.0, 0.0);
        let (_, moved) = render(&spec);
        for (a, b) in base.iter().zip(&moved) {
            for r in 0..144 {
                for c in 0..144 {
                    let expected = c >= 8 && a.get(r, c - 8);
                    assert_eq!(b.get(r, c), expected, "({r},{c})");
                }
            }
        }
    }

    #[test]
    fn occluding_the_mouth_empties_its_mask() {
        let id = one_identity();
        let (_, base) = render(&RenderSpec::canonical(id, Domain::Nir));
        let top = bounding_box(&base[Part::Mouth.index()]).unwrap().row_min;
        let mut spec = RenderSpec::canonical(id, Domain::Nir);
        // everything below the mouth's top row
        spec.occlusion = Some(Occlusion {
            angle: std::f64::consts::FRAC_PI_2,
            offset: top as f64 - CENTER - 0.5,
        });
        let (img, masks) = render(&spec);
        assert!(masks[Part::Mouth.index()].is_empty());
        assert!(!masks[Part::LeftEye.index()].is_empty());
        assert_eq!(img.data()[143 * 144], 0.0);
    }

    #[test]
    fn domains_share_geometry_without_perturbation() {
        let cfg = GenConfig {
            num_ids: 3,
            test_ids: 0,
            per_id: 2,
            seed: 11,
            level: Perturbation::None,
        };
        let ds = generate_split(&cfg, TRAIN_SPLIT).unwrap();
        for (_, [vis, nir]) in ds.index() {
            for (&a, &b) in vis.iter().zip(&nir) {
                for p in 0..NUM_PARTS {
                    assert_eq!(iou(&ds.get(a).masks[p], &ds.get(b).masks[p]).unwrap(), 1.0);
                }
                assert_ne!(ds.get(a).image, ds.get(b).image);
            }
        }
    }

    #[test]
    fn severe_level_produces_empty_component_masks() {
        let cfg = GenConfig {
            num_ids: 6,
            test_ids: 0,
            per_id: 4,
            seed: 7,
            level: Perturbation::Severe,
        };
        let ds = generate_split(&cfg, TRAIN_SPLIT).unwrap();
        let empty = ds
            .samples()
            .iter()
            .flat_map(|s| &s.masks[1..])
            .filter(|m| m.is_empty())
            .count();
        assert!(empty >= 1);
    }

    #[test]
    fn generation_is_deterministic() {
        let cfg = GenConfig {
            num_ids: 2,
            test_ids: 1,
            per_id: 1,
            seed: 3,
            level: Perturbation::Severe,
        };
        let a = generate_samples(&cfg).unwrap();
        let b = generate_samples(&cfg).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), 6);
        assert!(generate_samples(&GenConfig { num_ids: 1, ..cfg }).is_err());
    }
}
