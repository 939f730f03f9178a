//! Shared conv → MFM → pool trunk and the five independent part heads.

use rand::Rng;

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::mask::{crop_part, BinaryMask};
use crate::param::{ParamId, ParamStore};
use crate::tensor::{Scalar, Tensor};

pub const NUM_PARTS: usize = 5;

/// Canonical part order used by masks, heads and loss weights.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Part {
    Full = 0,
    LeftEye = 1,
    RightEye = 2,
    Nose = 3,
    Mouth = 4,
}

impl Part {
    pub const ALL: [Part; NUM_PARTS] = [
        Part::Full,
        Part::LeftEye,
        Part::RightEye,
        Part::Nose,
        Part::Mouth,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            Part::Full => "full",
            Part::LeftEye => "left_eye",
            Part::RightEye => "right_eye",
            Part::Nose => "nose",
            Part::Mouth => "mouth",
        }
    }
}

/// One conv → MFM → max-pool block. `out_channels` is the width before MFM
/// halves it; `pool` ≤ 1 disables pooling.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvStage {
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pool: usize,
}

impl ConvStage {
    pub fn padding(&self) -> usize {
        self.kernel / 2
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BackboneConfig {
    pub channels: usize,
    /// Full-face input size (after the training crop).
    pub face_size: (usize, usize),
    /// Size of the mask-centred part crops.
    pub part_size: (usize, usize),
    pub stages: Vec<ConvStage>,
    pub head_dim: usize,
    /// Trunk stages with index below this are frozen.
    pub freeze_below: usize,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        BackboneConfig {
            channels: 1,
            face_size: (128, 128),
            part_size: (64, 64),
            stages: vec![
                ConvStage { out_channels: 12, kernel: 5, stride: 2, pool: 2 },
                ConvStage { out_channels: 16, kernel: 3, stride: 1, pool: 2 },
                ConvStage { out_channels: 24, kernel: 3, stride: 1, pool: 2 },
                ConvStage { out_channels: 32, kernel: 3, stride: 1, pool: 2 },
            ],
            head_dim: 128,
            freeze_below: 0,
        }
    }
}

impl BackboneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.head_dim == 0 || self.head_dim % 2 != 0 {
            return Err(Error::Config(format!("head_dim {} must be positive and even", self.head_dim)));
        }
        if self.freeze_below > self.stages.len() {
            return Err(Error::Config(format!(
                "freeze_below {} exceeds {} trunk stages",
                self.freeze_below,
                self.stages.len()
            )));
        }
        if self.channels == 0 || self.stages.is_empty() {
            return Err(Error::Config("backbone needs channels and at least one stage".into()));
        }
        for (i, s) in self.stages.iter().enumerate() {
            if s.out_channels == 0 || s.out_channels % 2 != 0 || s.kernel == 0 || s.stride == 0 {
                return Err(Error::Config(format!(
                    "stage {i}: out_channels must be even and kernel/stride positive ({s:?})"
                )));
            }
        }
        self.trunk_dim(self.face_size)?;
        self.trunk_dim(self.part_size)?;
        Ok(())
    }

    /// Length of the flattened trunk feature for an input of `size`.
    pub fn trunk_dim(&self, size: (usize, usize)) -> Result<usize> {
        let (mut h, mut w) = size;
        let mut c = self.channels;
        for (i, s) in self.stages.iter().enumerate() {
            let p = s.padding();
            if s.kernel > h + 2 * p || s.kernel > w + 2 * p {
                return Err(Error::Config(format!("stage {i}: kernel {} exceeds {h}×{w}", s.kernel)));
            }
            h = (h + 2 * p - s.kernel) / s.stride + 1;
            w = (w + 2 * p - s.kernel) / s.stride + 1;
            c = s.out_channels / 2;
            if s.pool > 1 {
                if s.pool > h || s.pool > w {
                    return Err(Error::Config(format!("stage {i}: pool {} exceeds {h}×{w}", s.pool)));
                }
                h = (h - s.pool) / s.pool + 1;
                w = (w - s.pool) / s.pool + 1;
            }
        }
        Ok(c * h * w)
    }
}

#[derive(Clone, Copy, Debug)]
struct Layer {
    weight: ParamId,
    bias: ParamId,
}

/// Trunk plus five part heads. Parameters live in a [`ParamStore`] under
/// `trunk.{stage}.*` and `head.{part}.*`.
#[derive(Clone, Debug)]
pub struct Backbone {
    config: BackboneConfig,
    stages: Vec<Layer>,
    heads: Vec<Layer>,
}

pub(crate) fn uniform_init<T: Scalar, R: Rng + ?Sized>(
    rng: &mut R,
    shape: &[usize],
    bound: f64,
) -> Tensor<T> {
    Tensor::from_fn(shape, |_| T::from_f64_lossy(rng.random_range(-bound..bound)))
}

/// Initial bias value; nonzero so that all-zero part crops (occluded
/// components) still map to nonzero features.
pub(crate) const BIAS_INIT: f64 = 0.01;

/// Uniform bound giving weight variance `1/fan_in`; MFM keeps the second
/// moment of its input, so activations stay at unit scale through depth.
pub(crate) fn init_bound(fan_in: usize) -> f64 {
    (3.0 / fan_in as f64).sqrt()
}

impl Backbone {
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        config: BackboneConfig,
        store: &mut ParamStore<T>,
        rng: &mut R,
    ) -> Result<Self> {
        config.validate()?;
        let mut stages = Vec::with_capacity(config.stages.len());
        let mut in_c = config.channels;
        for (i, s) in config.stages.iter().enumerate() {
            let fan_in = in_c * s.kernel * s.kernel;
            let weight = store.add(
                format!("trunk.{i}.weight"),
                uniform_init(rng, &[s.out_channels, in_c, s.kernel, s.kernel], init_bound(fan_in)),
            )?;
            let bias = store.add(
                format!("trunk.{i}.bias"),
                Tensor::full(&[s.out_channels], T::from_f64_lossy(BIAS_INIT)),
            )?;
            if i < config.freeze_below {
                store.set_frozen(weight, true);
                store.set_frozen(bias, true);
            }
            stages.push(Layer { weight, bias });
            in_c = s.out_channels / 2;
        }
        let mut heads = Vec::with_capacity(NUM_PARTS);
        for part in Part::ALL {
            let size = if part == Part::Full {
                config.face_size
            } else {
                config.part_size
            };
            let d = config.trunk_dim(size)?;
            let weight = store.add(
                format!("head.{}.weight", part.index()),
                uniform_init(rng, &[d, 2 * config.head_dim], init_bound(d)),
            )?;
            let bias = store.add(
                format!("head.{}.bias", part.index()),
                Tensor::full(&[2 * config.head_dim], T::from_f64_lossy(BIAS_INIT)),
            )?;
            heads.push(Layer { weight, bias });
        }
        Ok(Backbone {
            config,
            stages,
            heads,
        })
    }

    pub fn config(&self) -> &BackboneConfig {
        &self.config
    }

    pub fn trunk_params(&self, stage: usize) -> (ParamId, ParamId) {
        let l = self.stages[stage];
        (l.weight, l.bias)
    }

    pub fn head_params(&self, part: usize) -> (ParamId, ParamId) {
        let l = self.heads[part];
        (l.weight, l.bias)
    }

    /// `[N, C, h, w]` images → `[N, D_trunk]` flattened features.
    pub fn forward_trunk<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        images: Var,
    ) -> Result<Var> {
        let s = g.shape(images);
        if s.len() != 4 || s[1] != self.config.channels {
            return Err(Error::shape(
                "forward_trunk",
                format!("expected [N, {}, h, w], got {s:?}", self.config.channels),
            ));
        }
        let mut x = images;
        for (layer, stage) in self.stages.iter().zip(&self.config.stages) {
            let w = g.param(store, layer.weight);
            let b = g.param(store, layer.bias);
            x = g.conv2d(x, w, Some(b), stage.stride, stage.padding())?;
            x = g.mfm(x)?;
            if stage.pool > 1 {
                x = g.max_pool2d(x, stage.pool, stage.pool)?;
            }
        }
        g.flatten(x)
    }

    /// Part-specific FC of width `2·head_dim` followed by MFM.
    pub fn part_head<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        trunk: Var,
        part: usize,
    ) -> Result<Var> {
        let layer = self.heads.get(part).ok_or_else(|| {
            Error::InvalidArgument(format!("part index {part} outside 0..{NUM_PARTS}"))
        })?;
        let w = g.param(store, layer.weight);
        let b = g.param(store, layer.bias);
        let pre = g.linear(trunk, w, Some(b))?;
        g.mfm(pre)
    }

    /// Runs the trunk on the full faces `[N, C, H, W]` and on the stacked part
    /// crops `[4·N, C, h, w]` (part-major blocks), then each head on its rows.
    pub fn part_features<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        faces: Var,
        parts: Var,
    ) -> Result<[Var; NUM_PARTS]> {
        let n = g.shape(faces)[0];
        if g.shape(parts)[0] != (NUM_PARTS - 1) * n {
            return Err(Error::shape(
                "part_features",
                format!("{} part crops for {n} faces", g.shape(parts)[0]),
            ));
        }
        let full_trunk = self.forward_trunk(g, store, faces)?;
        let part_trunk = self.forward_trunk(g, store, parts)?;
        let mut out = [full_trunk; NUM_PARTS];
        out[0] = self.part_head(g, store, full_trunk, 0)?;
        for p in 1..NUM_PARTS {
            let rows = g.slice_rows(part_trunk, (p - 1) * n, n)?;
            out[p] = self.part_head(g, store, rows, p)?;
        }
        Ok(out)
    }

    /// Mask-centred crops of the four components of one `[C, H, W]` face.
    pub fn crop_parts<T: Scalar>(
        &self,
        image: &Tensor<T>,
        masks: &[BinaryMask],
    ) -> Result<Vec<Tensor<T>>> {
        if masks.len() != NUM_PARTS {
            return Err(Error::shape(
                "crop_parts",
                format!("expected {NUM_PARTS} masks, got {}", masks.len()),
            ));
        }
        masks[1..]
            .iter()
            .map(|m| crop_part(image, m, self.config.part_size))
            .collect()
    }

    /// Part features of a single face with its five masks.
    pub fn extract_part_features<T: Scalar>(
        &self,
        store: &ParamStore<T>,
        image: &Tensor<T>,
        masks: &[BinaryMask],
    ) -> Result<PartFeatureSet<T>> {
        let crops = self.crop_parts(image, masks)?;
        let (c, h, w) = (self.config.channels, self.config.face_size.0, self.config.face_size.1);
        if image.shape() != [c, h, w] {
            return Err(Error::shape(
                "extract_part_features",
                format!("expected [{c}, {h}, {w}], got {:?}", image.shape()),
            ));
        }
        let (ph, pw) = self.config.part_size;
        let mut part_data = Vec::with_capacity(4 * c * ph * pw);
        for crop in &crops {
            part_data.extend_from_slice(crop.data());
        }
        let mut g = Graph::new();
        let faces = g.input(Tensor::new(vec![1, c, h, w], image.data().to_vec())?);
        let parts = g.input(Tensor::new(vec![4, c, ph, pw], part_data)?);
        let feats = self.part_features(&mut g, store, faces, parts)?;
        PartFeatureSet::new(feats.map(|v| g.value(v).data().to_vec()))
    }
}

/// Five part-representative vectors in canonical [`Part`] order.
#[derive(Clone, Debug, PartialEq)]
pub struct PartFeatureSet<T> {
    features: [Vec<T>; NUM_PARTS],
}

impl<T: Scalar> PartFeatureSet<T> {
    pub fn new(features: [Vec<T>; NUM_PARTS]) -> Result<Self> {
        let d = features[0].len();
        if d == 0 || features.iter().any(|f| f.len() != d) {
            return Err(Error::shape("part features", "five vectors of equal nonzero length required"));
        }
        if features.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::degenerate("part features", "non-finite entry"));
        }
        Ok(PartFeatureSet { features })
    }

    pub fn get(&self, part: Part) -> &[T] {
        &self.features[part.index()]
    }

    pub fn features(&self) -> &[Vec<T>; NUM_PARTS] {
        &self.features
    }

    pub fn dim(&self) -> usize {
        self.features[0].len()
    }
}
