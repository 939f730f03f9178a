//! Full network: backbone heads → relation attention → embedding, plus the
//! identity classifier used by the softmax term.

use rand::Rng;

use crate::backbone::{uniform_init, Backbone, BackboneConfig, NUM_PARTS};
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::mask::BinaryMask;
use crate::param::{ParamId, ParamStore};
use crate::pram::RelationAttention;
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub backbone: BackboneConfig,
    pub embed_dim: usize,
    /// Without relation attention the embedding is the mean part feature.
    pub pram_on: bool,
    pub num_classes: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            backbone: BackboneConfig::default(),
            embed_dim: 512,
            pram_on: true,
            num_classes: 2,
        }
    }
}

impl ModelConfig {
    /// Dimension of the vector compared at test time.
    pub fn embedding_dim(&self) -> usize {
        if self.pram_on {
            self.embed_dim
        } else {
            self.backbone.head_dim
        }
    }
}

/// Network inputs for `N` faces: the full crops and the stacked part crops
/// (`[4·N, C, h, w]`, one block of `N` rows per component).
#[derive(Clone, Debug)]
pub struct BatchInputs<T> {
    pub faces: Tensor<T>,
    pub parts: Tensor<T>,
}

impl<T> BatchInputs<T> {
    pub fn len(&self) -> usize
    where
        T: Scalar,
    {
        self.faces.shape()[0]
    }

    pub fn is_empty(&self) -> bool
    where
        T: Scalar,
    {
        self.len() == 0
    }
}

#[derive(Clone, Copy, Debug)]
pub struct ModelOutputs {
    /// `[N, head_dim]` per part.
    pub parts: [Var; NUM_PARTS],
    /// `[N, embedding_dim]`.
    pub embedding: Var,
}

#[derive(Clone, Debug)]
pub struct PramModel {
    config: ModelConfig,
    backbone: Backbone,
    relation: Option<RelationAttention>,
    classifier: ParamId,
}

impl PramModel {
    /// Registers all parameters in `store` in a fixed order.
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        config: ModelConfig,
        store: &mut ParamStore<T>,
        rng: &mut R,
    ) -> Result<Self> {
        if config.num_classes == 0 || config.embed_dim == 0 || config.embed_dim % 2 != 0 {
            return Err(Error::Config(format!(
                "need num_classes > 0 and an even embed_dim (got {}, {})",
                config.num_classes, config.embed_dim
            )));
        }
        let backbone = Backbone::new(config.backbone.clone(), store, rng)?;
        let relation = if config.pram_on {
            Some(RelationAttention::new(
                store,
                config.backbone.head_dim,
                config.embed_dim,
                rng,
            )?)
        } else {
            None
        };
        let e = config.embedding_dim();
        let k = config.num_classes;
        let classifier = store.add(
            "classifier.weight",
            uniform_init(rng, &[e, k], (6.0 / (e + k) as f64).sqrt()),
        )?;
        Ok(PramModel {
            config,
            backbone,
            relation,
            classifier,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn backbone(&self) -> &Backbone {
        &self.backbone
    }

    pub fn relation(&self) -> Option<&RelationAttention> {
        self.relation.as_ref()
    }

    pub fn classifier(&self) -> ParamId {
        self.classifier
    }

    pub fn forward<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        inputs: &BatchInputs<T>,
    ) -> Result<ModelOutputs> {
        let faces = g.input(inputs.faces.clone());
        let parts_in = g.input(inputs.parts.clone());
        let parts = self.backbone.part_features(g, store, faces, parts_in)?;
        let embedding = match &self.relation {
            Some(rel) => rel.forward(g, store, &parts)?,
            None => {
                let mut sum = parts[0];
                for &p in &parts[1..] {
                    sum = g.add(sum, p)?;
                }
                g.scale(sum, T::from_f64_lossy(1.0 / NUM_PARTS as f64))
            }
        };
        Ok(ModelOutputs { parts, embedding })
    }

    /// Embeddings `[N, embedding_dim]` without keeping the graph.
    pub fn embed<T: Scalar>(&self, store: &ParamStore<T>, inputs: &BatchInputs<T>) -> Result<Tensor<T>> {
        let mut g = Graph::new();
        let out = self.forward(&mut g, store, inputs)?;
        Ok(g.value(out.embedding).clone())
    }

    /// Builds network inputs from `[C, H, W]` face crops with intensities in
    /// `[0, 1]` and their five masks (in the same crop geometry). Intensities
    /// are mapped to `[-1, 1]` before part cropping, so an empty-mask part
    /// crop is mid-grey.
    pub fn prepare_inputs<T: Scalar>(
        &self,
        faces: &[(Tensor<T>, Vec<BinaryMask>)],
    ) -> Result<BatchInputs<T>> {
        let cfg = &self.config.backbone;
        let n = faces.len();
        if n == 0 {
            return Err(Error::InvalidArgument("empty batch".into()));
        }
        let (c, h, w) = (cfg.channels, cfg.face_size.0, cfg.face_size.1);
        let (ph, pw) = cfg.part_size;
        let mut face_data = Vec::with_capacity(n * c * h * w);
        let half = T::from_f64_lossy(0.5);
        let mut part_blocks: Vec<Vec<T>> = vec![Vec::with_capacity(n * c * ph * pw); NUM_PARTS - 1];
        for (img, masks) in faces {
            if img.shape() != [c, h, w] {
                return Err(Error::shape(
                    "prepare_inputs",
                    format!("face {:?} != [{c}, {h}, {w}]", img.shape()),
                ));
            }
            let centred = img.map(|v| (v - half) / half);
            face_data.extend_from_slice(centred.data());
            for (block, crop) in part_blocks.iter_mut().zip(self.backbone.crop_parts(&centred, masks)?) {
                block.extend_from_slice(crop.data());
            }
        }
        Ok(BatchInputs {
            faces: Tensor::new(vec![n, c, h, w], face_data)?,
            parts: Tensor::new(vec![4 * n, c, ph, pw], part_blocks.concat())?,
        })
    }
}
