//! Frozen feature extractor producing the segmentation feature and the class-branch input.
//!
//! Both outputs are computed from the channel concatenation of the stage-2 and
//! stage-3 features: `f_query` through a trainable 3×3 convolution to 256
//! channels, `i_class` through a trainable 1×1 input adapter followed by the
//! frozen stage-4 block. Every parameter under the `backbone.` prefix is frozen.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use rand::Rng;

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::nn::{Conv2d, ConvOptions, FrozenBatchNorm};
use crate::ops::{ConvGeom, Upsample};
use crate::params::ParamStore;
use crate::tensor::{Scalar, Tensor};

/// Channel width of the segmentation feature; fixed by the decoder's `256 + C` reduction.
pub const QUERY_CHANNELS: usize = 256;

/// Name prefix of every frozen backbone parameter.
pub const BACKBONE_PREFIX: &str = "backbone.";

const IMAGENET_MEAN: [f64; 3] = [0.485, 0.456, 0.406];
const IMAGENET_STD: [f64; 3] = [0.229, 0.224, 0.225];

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BackboneVariant {
    PretrainedResnet50,
    TinyRandom,
}

impl BackboneVariant {
    pub fn as_str(self) -> &'static str {
        match self {
            BackboneVariant::PretrainedResnet50 => "pretrained_resnet50",
            BackboneVariant::TinyRandom => "tiny_random",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "pretrained_resnet50" => Some(Self::PretrainedResnet50),
            "tiny_random" => Some(Self::TinyRandom),
            _ => None,
        }
    }
}

/// How the stage-2 and stage-3 features are brought onto one grid.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GridAlign {
    /// Stage 3 runs at stride 1 with dilation, keeping stage 2's grid.
    Dilation,
    /// Stage-3 output is bilinearly upsampled onto stage 2's grid.
    UpsampleDeep,
    /// Stage-2 output is average-pooled onto stage 3's grid.
    PoolShallow,
}

impl GridAlign {
    pub fn as_str(self) -> &'static str {
        match self {
            GridAlign::Dilation => "dilation",
            GridAlign::UpsampleDeep => "upsample",
            GridAlign::PoolShallow => "pool",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "dilation" => Some(Self::Dilation),
            "upsample" => Some(Self::UpsampleDeep),
            "pool" => Some(Self::PoolShallow),
            _ => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BackboneConfig {
    pub variant: BackboneVariant,
    pub weights_path: Option<String>,
    /// Channel width `C` of the stage-4 output (`i_class`).
    pub block4_out_channels: usize,
    pub adapter_enabled: bool,
    /// `None` selects the variant default: pooling for the tiny network
    /// (stride 8), dilation for ResNet-50 (stride 8).
    pub align: Option<GridAlign>,
}

impl BackboneConfig {
    pub fn tiny(c: usize) -> Self {
        BackboneConfig {
            variant: BackboneVariant::TinyRandom,
            weights_path: None,
            block4_out_channels: c,
            adapter_enabled: true,
            align: None,
        }
    }

    pub fn resnet50(weights_path: Option<String>) -> Self {
        BackboneConfig {
            variant: BackboneVariant::PretrainedResnet50,
            weights_path,
            block4_out_channels: 2048,
            adapter_enabled: true,
            align: None,
        }
    }

    pub fn align(&self) -> GridAlign {
        self.align.unwrap_or(match self.variant {
            BackboneVariant::TinyRandom => GridAlign::PoolShallow,
            BackboneVariant::PretrainedResnet50 => GridAlign::Dilation,
        })
    }

    /// Checks the invariants that do not depend on weights being present.
    pub fn validate_shape(&self) -> Result<()> {
        let c = self.block4_out_channels;
        if c == 0 || c % 2 != 0 {
            return Err(Error::config(format!("block4_out_channels must be positive and even, got {c}")));
        }
        if self.variant == BackboneVariant::PretrainedResnet50 && c != 2048 {
            return Err(Error::config(format!("ResNet-50 stage 4 has 2048 channels, configured {c}")));
        }
        Ok(())
    }

    /// Full validation, including the weights requirement of the pretrained variant.
    pub fn validate(&self) -> Result<()> {
        self.validate_shape()?;
        if self.variant == BackboneVariant::PretrainedResnet50 && self.weights_path.is_none() {
            return Err(Error::config("pretrained_resnet50 requires a weights path"));
        }
        Ok(())
    }
}

/// Output of feature extraction for one image.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureBundle<T> {
    /// `256×H_f×W_f`.
    pub f_query: Tensor<T>,
    /// `C×H_f×W_f`.
    pub i_class: Tensor<T>,
    pub spatial_stride: usize,
}

#[derive(Clone, Debug)]
struct TinyNet {
    stages: Vec<[Conv2d; 2]>,
}

impl TinyNet {
    const WIDTHS: [usize; 3] = [16, 32, 64];

    fn new<T: Scalar, R: Rng + ?Sized>(store: &mut ParamStore<T>, rng: &mut R, c: usize, align: GridAlign) -> Self {
        let widths = [Self::WIDTHS[0], Self::WIDTHS[1], Self::WIDTHS[2], c];
        let mut stages = Vec::new();
        let mut in_ch = 3;
        for (i, &out) in widths.iter().enumerate() {
            let dilated = i == 2 && align == GridAlign::Dilation;
            let stride = if i < 3 && !dilated { 2 } else { 1 };
            let first = ConvGeom { kernel: 3, stride, padding: 1, dilation: 1 };
            let second = if dilated { ConvGeom::same3(2) } else { ConvGeom::same3(1) };
            let name = format!("{BACKBONE_PREFIX}stage{}", i + 1);
            stages.push([
                Conv2d::new(store, rng, &format!("{name}.conv1"), in_ch, out, ConvOptions::new(first).frozen()),
                Conv2d::new(store, rng, &format!("{name}.conv2"), out, out, ConvOptions::new(second).frozen()),
            ]);
            in_ch = out;
        }
        TinyNet { stages }
    }

    fn stage<'p, T: Scalar>(&self, i: usize, g: &mut Graph<'p, T>, store: &'p ParamStore<T>, x: Var) -> Result<Var> {
        let [a, b] = &self.stages[i];
        let h = a.forward(g, store, x)?;
        let h = g.relu(h);
        let h = b.forward(g, store, h)?;
        Ok(g.relu(h))
    }
}

#[derive(Clone, Debug)]
struct Bottleneck {
    conv1: Conv2d,
    bn1: FrozenBatchNorm,
    conv2: Conv2d,
    bn2: FrozenBatchNorm,
    conv3: Conv2d,
    bn3: FrozenBatchNorm,
    downsample: Option<(Conv2d, FrozenBatchNorm)>,
}

impl Bottleneck {
    #[allow(clippy::too_many_arguments)]
    fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        rng: &mut R,
        name: &str,
        in_ch: usize,
        planes: usize,
        stride: usize,
        dilation: usize,
    ) -> Self {
        let out = planes * 4;
        let frozen = |geom| ConvOptions::new(geom).frozen().no_bias();
        let conv1 = Conv2d::new(store, rng, &format!("{name}.conv1"), in_ch, planes, frozen(ConvGeom::POINTWISE));
        let bn1 = FrozenBatchNorm::new(store, &format!("{name}.bn1"), planes);
        let geom = ConvGeom { kernel: 3, stride, padding: dilation, dilation };
        let conv2 = Conv2d::new(store, rng, &format!("{name}.conv2"), planes, planes, frozen(geom));
        let bn2 = FrozenBatchNorm::new(store, &format!("{name}.bn2"), planes);
        let conv3 = Conv2d::new(store, rng, &format!("{name}.conv3"), planes, out, frozen(ConvGeom::POINTWISE));
        let bn3 = FrozenBatchNorm::new(store, &format!("{name}.bn3"), out);
        let downsample = (stride != 1 || in_ch != out).then(|| {
            let geom = ConvGeom { kernel: 1, stride, padding: 0, dilation: 1 };
            (
                Conv2d::new(store, rng, &format!("{name}.downsample.0"), in_ch, out, frozen(geom)),
                FrozenBatchNorm::new(store, &format!("{name}.downsample.1"), out),
            )
        });
        Bottleneck { conv1, bn1, conv2, bn2, conv3, bn3, downsample }
    }

    fn forward<'p, T: Scalar>(&self, g: &mut Graph<'p, T>, store: &'p ParamStore<T>, x: Var) -> Result<Var> {
        let h = self.conv1.forward(g, store, x)?;
        let h = self.bn1.forward(g, store, h)?;
        let h = g.relu(h);
        let h = self.conv2.forward(g, store, h)?;
        let h = self.bn2.forward(g, store, h)?;
        let h = g.relu(h);
        let h = self.conv3.forward(g, store, h)?;
        let h = self.bn3.forward(g, store, h)?;
        let skip = match &self.downsample {
            Some((conv, bn)) => {
                let s = conv.forward(g, store, x)?;
                bn.forward(g, store, s)?
            }
            None => x,
        };
        let y = g.add(h, skip)?;
        Ok(g.relu(y))
    }
}

#[derive(Clone, Debug)]
struct ResNet50 {
    conv1: Conv2d,
    bn1: FrozenBatchNorm,
    layers: Vec<Vec<Bottleneck>>,
}

impl ResNet50 {
    fn new<T: Scalar, R: Rng + ?Sized>(store: &mut ParamStore<T>, rng: &mut R, align: GridAlign) -> Self {
        let stem = ConvGeom { kernel: 7, stride: 2, padding: 3, dilation: 1 };
        let conv1 = Conv2d::new(store, rng, &format!("{BACKBONE_PREFIX}conv1"), 3, 64, ConvOptions::new(stem).frozen().no_bias());
        let bn1 = FrozenBatchNorm::new(store, &format!("{BACKBONE_PREFIX}bn1"), 64);
        // (blocks, planes, stride, dilation); stage 4 always keeps the stage-3 grid.
        let layer3 = if align == GridAlign::Dilation { (6, 256, 1, 2) } else { (6, 256, 2, 1) };
        let layer4_dilation = if align == GridAlign::Dilation { 4 } else { 2 };
        let spec = [(3, 64, 1, 1), (4, 128, 2, 1), layer3, (3, 512, 1, layer4_dilation)];
        let mut layers = Vec::new();
        let mut in_ch = 64;
        let mut prev_dilation = 1;
        for (li, &(blocks, planes, stride, dilation)) in spec.iter().enumerate() {
            let mut layer = Vec::new();
            for bi in 0..blocks {
                let name = format!("{BACKBONE_PREFIX}layer{}.{bi}", li + 1);
                let (s, d) = if bi == 0 { (stride, prev_dilation) } else { (1, dilation) };
                // stage 4 consumes the adapter output, which has stage 3's width
                let input = if li == 3 && bi == 0 { 1024 } else { in_ch };
                layer.push(Bottleneck::new(store, rng, &name, input, planes, s, d));
                in_ch = planes * 4;
            }
            prev_dilation = dilation;
            layers.push(layer);
        }
        ResNet50 { conv1, bn1, layers }
    }

    fn layer<'p, T: Scalar>(&self, i: usize, g: &mut Graph<'p, T>, store: &'p ParamStore<T>, mut x: Var) -> Result<Var> {
        for block in &self.layers[i] {
            x = block.forward(g, store, x)?;
        }
        Ok(x)
    }
}

#[derive(Clone, Debug)]
enum Net {
    Tiny(TinyNet),
    ResNet(ResNet50),
}

/// Frozen backbone plus the trainable adapter and query convolution.
#[derive(Clone, Debug)]
pub struct FeatureExtractor {
    config: BackboneConfig,
    net: Net,
    adapter: Option<Conv2d>,
    query_conv: Conv2d,
}

impl FeatureExtractor {
    pub fn new<T: Scalar, R: Rng + ?Sized>(config: &BackboneConfig, store: &mut ParamStore<T>, rng: &mut R) -> Result<Self> {
        config.validate_shape()?;
        let align = config.align();
        let (net, concat, block4_in) = match config.variant {
            BackboneVariant::TinyRandom => {
                let net = TinyNet::new(store, rng, config.block4_out_channels, align);
                (Net::Tiny(net), TinyNet::WIDTHS[1] + TinyNet::WIDTHS[2], TinyNet::WIDTHS[2])
            }
            BackboneVariant::PretrainedResnet50 => (Net::ResNet(ResNet50::new(store, rng, align)), 512 + 1024, 1024),
        };
        let adapter = if config.adapter_enabled {
            Some(Conv2d::new(store, rng, "adapter", concat, block4_in, ConvOptions::new(ConvGeom::POINTWISE)))
        } else if concat != block4_in {
            return Err(Error::config(format!(
                "adapter disabled but the stage-2/3 concatenation has {concat} channels and stage 4 expects {block4_in}"
            )));
        } else {
            None
        };
        let query_conv = Conv2d::new(store, rng, "query_conv", concat, QUERY_CHANNELS, ConvOptions::new(ConvGeom::same3(1)));
        Ok(FeatureExtractor { config: config.clone(), net, adapter, query_conv })
    }

    pub fn config(&self) -> &BackboneConfig {
        &self.config
    }

    pub fn class_channels(&self) -> usize {
        self.config.block4_out_channels
    }

    /// Ratio between input size and feature grid size.
    pub fn stride(&self) -> usize {
        match (&self.net, self.config.align()) {
            (Net::Tiny(_), GridAlign::PoolShallow) => 8,
            (Net::Tiny(_), _) => 4,
            (Net::ResNet(_), GridAlign::PoolShallow) => 16,
            (Net::ResNet(_), _) => 8,
        }
    }

    /// Smallest accepted input side: the downsampling product of the deepest stage used.
    pub fn min_input(&self) -> usize {
        match (&self.net, self.config.align()) {
            (Net::Tiny(_), GridAlign::Dilation) => 4,
            (Net::Tiny(_), _) => 8,
            (Net::ResNet(_), GridAlign::Dilation) => 8,
            (Net::ResNet(_), _) => 16,
        }
    }

    fn normalize<T: Scalar>(&self, image: &Tensor<T>) -> Tensor<T> {
        match self.net {
            Net::Tiny(_) => image.clone(),
            Net::ResNet(_) => {
                let (_, h, w) = image.dims3().expect("validated by caller");
                let mut out = image.clone();
                for (c, plane) in out.data_mut().chunks_mut(h * w).enumerate() {
                    let (m, s) = (T::lit(IMAGENET_MEAN[c]), T::lit(IMAGENET_STD[c]));
                    plane.iter_mut().for_each(|v| *v = (*v - m) / s);
                }
                out
            }
        }
    }

    /// Records the extraction on `g`; returns `(f_query, i_class)`.
    pub fn forward<'p, T: Scalar>(&self, g: &mut Graph<'p, T>, store: &'p ParamStore<T>, image: &Tensor<T>) -> Result<(Var, Var)> {
        let (c, h, w) = image.dims3()?;
        if c != 3 {
            return Err(Error::shape(format!("expected an RGB image, got {c} channels")));
        }
        let min = self.min_input();
        if h < min || w < min {
            return Err(Error::shape(format!("input {h}×{w} below the backbone minimum {min}×{min}")));
        }
        let x = g.input(self.normalize(image), false);
        let (f2, f3) = match &self.net {
            Net::Tiny(net) => {
                let f1 = net.stage(0, g, store, x)?;
                let f2 = net.stage(1, g, store, f1)?;
                let f3 = net.stage(2, g, store, f2)?;
                (f2, f3)
            }
            Net::ResNet(net) => {
                let s = net.conv1.forward(g, store, x)?;
                let s = net.bn1.forward(g, store, s)?;
                let s = g.relu(s);
                let s = g.max_pool(s, ConvGeom { kernel: 3, stride: 2, padding: 1, dilation: 1 })?;
                let f1 = net.layer(0, g, store, s)?;
                let f2 = net.layer(1, g, store, f1)?;
                let f3 = net.layer(2, g, store, f2)?;
                (f2, f3)
            }
        };
        let (f2, f3) = self.align_grids(g, f2, f3)?;
        let cat = g.concat(&[f2, f3])?;

        let q = self.query_conv.forward(g, store, cat)?;
        let f_query = g.relu(q);

        let adapted = match &self.adapter {
            Some(a) => {
                let h = a.forward(g, store, cat)?;
                g.relu(h)
            }
            None => cat,
        };
        let i_class = match &self.net {
            Net::Tiny(net) => net.stage(3, g, store, adapted)?,
            Net::ResNet(net) => net.layer(3, g, store, adapted)?,
        };
        Ok((f_query, i_class))
    }

    fn align_grids<T: Scalar>(&self, g: &mut Graph<'_, T>, f2: Var, f3: Var) -> Result<(Var, Var)> {
        let (_, h2, w2) = g.value(f2).dims3()?;
        let (_, h3, w3) = g.value(f3).dims3()?;
        if (h2, w2) == (h3, w3) {
            return Ok((f2, f3));
        }
        match self.config.align() {
            GridAlign::PoolShallow => Ok((g.adaptive_avg_pool(f2, h3, w3)?, f3)),
            GridAlign::UpsampleDeep | GridAlign::Dilation => Ok((f2, g.resize(f3, h2, w2, Upsample::Bilinear)?)),
        }
    }

    /// Gradient-free extraction.
    pub fn extract_features<T: Scalar>(&self, store: &ParamStore<T>, image: &Tensor<T>) -> Result<FeatureBundle<T>> {
        let mut g = Graph::inference();
        let (q, c) = self.forward(&mut g, store, image)?;
        let (_, h, _) = image.dims3()?;
        let (_, hf, _) = g.value(q).dims3()?;
        Ok(FeatureBundle {
            f_query: g.value(q).clone(),
            i_class: g.value(c).clone(),
            spatial_stride: h / hf.max(1),
        })
    }
}

/// True iff every backbone tensor in `after` is bitwise identical to `before`.
///
/// Both snapshots must name the same parameters (see [`ParamStore::snapshot`]).
pub fn assert_frozen<T: Scalar>(before: &BTreeMap<String, Tensor<T>>, after: &BTreeMap<String, Tensor<T>>) -> Result<bool> {
    if before.len() != after.len() || before.keys().zip(after.keys()).any(|(a, b)| a != b) {
        let missing: Vec<&String> = before.keys().filter(|k| !after.contains_key(*k)).collect();
        let extra: Vec<&String> = after.keys().filter(|k| !before.contains_key(*k)).collect();
        return Err(Error::Contract(format!(
            "parameter sets differ (missing after: {missing:?}, extra after: {extra:?})"
        )));
    }
    Ok(before.iter().all(|(k, v)| v.bit_identical(&after[k])))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tiny(c: usize) -> (FeatureExtractor, ParamStore<f32>) {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let fx = FeatureExtractor::new(&BackboneConfig::tiny(c), &mut store, &mut rng).unwrap();
        (fx, store)
    }

    #[test]
    fn tiny_shapes_at_stride_eight() {
        let (fx, store) = tiny(64);
        let img = Tensor::from_fn(&[3, 64, 64], |i| (i % 7) as f32 / 7.0);
        let fb = fx.extract_features(&store, &img).unwrap();
        assert_eq!(fb.f_query.shape(), &[256, 8, 8]);
        assert_eq!(fb.i_class.shape(), &[64, 8, 8]);
        assert_eq!(fb.spatial_stride, 8);
    }

    #[test]
    fn shape_law_for_divisible_inputs() {
        let (fx, store) = tiny(8);
        for (h, w) in [(48, 64), (64, 48), (96, 56)] {
            let img = Tensor::<f32>::zeros(&[3, h, w]);
            let fb = fx.extract_features(&store, &img).unwrap();
            assert_eq!(fb.f_query.shape(), &[256, h / 8, w / 8]);
            assert_eq!(fb.i_class.shape(), &[8, h / 8, w / 8]);
        }
    }

    #[test]
    fn other_alignments_keep_stage_two_grid() {
        for align in [GridAlign::Dilation, GridAlign::UpsampleDeep] {
            let mut store = ParamStore::<f32>::new();
            let mut rng = ChaCha8Rng::seed_from_u64(1);
            let cfg = BackboneConfig { align: Some(align), ..BackboneConfig::tiny(16) };
            let fx = FeatureExtractor::new(&cfg, &mut store, &mut rng).unwrap();
            let fb = fx.extract_features(&store, &Tensor::zeros(&[3, 32, 32])).unwrap();
            assert_eq!(fb.f_query.shape(), &[256, 8, 8], "{align:?}");
            assert_eq!(fb.i_class.shape(), &[16, 8, 8]);
            assert_eq!(fb.spatial_stride, 4);
        }
    }

    #[test]
    fn rejects_small_inputs_and_bad_configs() {
        let (fx, store) = tiny(8);
        let err = fx.extract_features(&store, &Tensor::<f32>::zeros(&[3, 4, 64])).unwrap_err();
        assert!(matches!(err, Error::Shape(_)));
        assert!(BackboneConfig::tiny(7).validate().is_err());
        assert!(BackboneConfig::tiny(0).validate().is_err());
        assert!(BackboneConfig::resnet50(None).validate().is_err());
        let no_adapter = BackboneConfig { adapter_enabled: false, ..BackboneConfig::tiny(8) };
        let mut store = ParamStore::<f32>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(matches!(FeatureExtractor::new(&no_adapter, &mut store, &mut rng), Err(Error::Config(_))));
    }

    #[test]
    fn extraction_is_deterministic_and_read_only() {
        let (fx, store) = tiny(8);
        let before = store.snapshot(BACKBONE_PREFIX);
        let zero = Tensor::<f32>::zeros(&[3, 32, 32]);
        let a = fx.extract_features(&store, &zero).unwrap();
        let b = fx.extract_features(&store, &zero).unwrap();
        assert_eq!(a, b);
        assert!(assert_frozen(&before, &store.snapshot(BACKBONE_PREFIX)).unwrap());
    }

    #[test]
    fn assert_frozen_is_exact() {
        let (_, store) = tiny(8);
        let snap = store.snapshot(BACKBONE_PREFIX);
        assert!(assert_frozen(&snap, &snap).unwrap());
        let mut perturbed = snap.clone();
        let first = perturbed.values_mut().next().unwrap();
        first.data_mut()[0] += 1e-7;
        assert!(!assert_frozen(&snap, &perturbed).unwrap());
        let mut fewer = snap.clone();
        let key = fewer.keys().next().unwrap().clone();
        fewer.remove(&key);
        assert!(matches!(assert_frozen(&snap, &fewer), Err(Error::Contract(_))));
    }

    #[test]
    fn only_backbone_parameters_are_frozen() {
        let (_, store) = tiny(8);
        for (_, p) in store.iter() {
            assert_eq!(p.trainable, !p.name.starts_with(BACKBONE_PREFIX), "{}", p.name);
        }
    }

    #[test]
    fn resnet50_feature_shapes() {
        let mut store = ParamStore::<f32>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let fx = FeatureExtractor::new(&BackboneConfig::resnet50(Some("unused".into())), &mut store, &mut rng).unwrap();
        assert!(store.id("backbone.layer4.2.conv3.weight").is_some());
        assert!(store.id("backbone.layer1.0.downsample.1.running_var").is_some());
        assert_eq!(store.value(store.id("backbone.layer4.0.conv1.weight").unwrap()).shape(), &[512, 1024, 1, 1]);
        let fb = fx.extract_features(&store, &Tensor::zeros(&[3, 65, 65])).unwrap();
        assert_eq!(fb.f_query.shape(), &[256, 9, 9]);
        assert_eq!(fb.i_class.shape(), &[2048, 9, 9]);
    }
}
