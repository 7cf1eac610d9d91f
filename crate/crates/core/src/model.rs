//! The full network: feature extraction, multi-scale and spatial attention on the
//! class branch, and the comparison decoder.

use alloc::string::String;
use alloc::vec::Vec;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autograd::{Graph, Var};
use crate::backbone::{BackboneConfig, FeatureExtractor};
use crate::ccm::{predict_mask, Ccm, MaskLogits, PredictionMask};
use crate::error::Result;
use crate::mam::Mam;
use crate::ops::Upsample;
use crate::params::ParamStore;
use crate::sam::Sam;
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub backbone: BackboneConfig,
    pub mam_upsample: Upsample,
    /// Seed of the parameter initialization.
    pub init_seed: u64,
}

impl ModelConfig {
    pub fn tiny(c: usize) -> Self {
        ModelConfig { backbone: BackboneConfig::tiny(c), mam_upsample: Upsample::Bilinear, init_seed: 0 }
    }
}

/// Graph handles of one forward pass.
#[derive(Clone, Copy, Debug)]
pub struct Forward {
    pub f_query: Var,
    pub i_class: Var,
    pub o_m: Var,
    pub embedding: Var,
    pub logits: Var,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ManifestEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub trainable: bool,
}

#[derive(Clone, Debug)]
pub struct VceNet {
    pub config: ModelConfig,
    pub extractor: FeatureExtractor,
    pub mam: Mam,
    pub sam: Sam,
    pub ccm: Ccm,
}

impl VceNet {
    /// Builds the network and a freshly initialized parameter store.
    pub fn new<T: Scalar>(config: &ModelConfig) -> Result<(Self, ParamStore<T>)> {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(config.init_seed);
        let extractor = FeatureExtractor::new(&config.backbone, &mut store, &mut rng)?;
        let c = extractor.class_channels();
        let sam = Sam::new(&mut store, &mut rng, "sam", c)?;
        let ccm = Ccm::new(&mut store, &mut rng, "ccm", c);
        let net = VceNet { config: config.clone(), extractor, mam: Mam::new(config.mam_upsample), sam, ccm };
        Ok((net, store))
    }

    pub fn forward<'p, T: Scalar>(&self, g: &mut Graph<'p, T>, store: &'p ParamStore<T>, image: &Tensor<T>) -> Result<Forward> {
        let (f_query, i_class) = self.extractor.forward(g, store, image)?;
        let o_m = self.mam.forward(g, i_class)?;
        let embedding = self.sam.forward(g, store, o_m)?;
        let logits = self.ccm.forward(g, store, f_query, embedding)?;
        Ok(Forward { f_query, i_class, o_m, embedding, logits })
    }

    pub fn logits<T: Scalar>(&self, store: &ParamStore<T>, image: &Tensor<T>) -> Result<MaskLogits<T>> {
        let mut g = Graph::inference();
        let out = self.forward(&mut g, store, image)?;
        Ok(MaskLogits { logits: g.value(out.logits).clone() })
    }

    pub fn predict<T: Scalar>(&self, store: &ParamStore<T>, image: &Tensor<T>) -> Result<PredictionMask<T>> {
        let (_, h, w) = image.dims3()?;
        predict_mask(&self.logits(store, image)?, h, w)
    }

    pub fn manifest<T: Scalar>(store: &ParamStore<T>) -> Vec<ManifestEntry> {
        store
            .iter()
            .map(|(_, p)| ManifestEntry { name: p.name.clone(), shape: p.value.shape().to_vec(), trainable: p.trainable })
            .collect()
    }
}
