//! Class comparison decoder: pixel-wise concatenation of the query feature and
//! the class embedding, 1×1 reduction to 256 channels, three basic residual
//! blocks, ASPP and a two-channel logit head. Every convolution is followed by
//! ReLU; there is no normalization layer anywhere in the decoder.

use alloc::format;
use alloc::vec::Vec;

use rand::Rng;

use crate::autograd::{Graph, Var};
use crate::backbone::QUERY_CHANNELS;
use crate::error::{Error, Result};
use crate::nn::{Conv2d, ConvOptions};
use crate::ops::{self, ConvGeom, Upsample};
use crate::params::ParamStore;
use crate::sam::ClassEmbedding;
use crate::tensor::{Scalar, Tensor};

pub const ASPP_RATES: [usize; 3] = [6, 12, 18];
pub const RESIDUAL_BLOCKS: usize = 3;

/// Initialization gain of the last convolution in each residual branch and of
/// the logit head. Without normalization layers the activations would otherwise
/// grow with every residual block and start the head in saturation.
pub const INNER_GAIN: f64 = 0.1;

/// Per-pixel (background, foreground) scores on the feature grid.
#[derive(Clone, Debug, PartialEq)]
pub struct MaskLogits<T> {
    pub logits: Tensor<T>,
}

/// Binary mask and foreground probabilities at input resolution.
#[derive(Clone, Debug, PartialEq)]
pub struct PredictionMask<T> {
    pub height: usize,
    pub width: usize,
    /// 0 or 1 per pixel, row-major.
    pub mask: Vec<u8>,
    pub probs: Vec<T>,
}

#[derive(Clone, Debug)]
pub struct ResidualBlock {
    pub conv1: Conv2d,
    pub conv2: Conv2d,
}

impl ResidualBlock {
    pub fn forward<'p, T: Scalar>(&self, g: &mut Graph<'p, T>, store: &'p ParamStore<T>, x: Var) -> Result<Var> {
        let h = self.conv1.forward(g, store, x)?;
        let h = g.relu(h);
        let h = self.conv2.forward(g, store, h)?;
        let y = g.add(h, x)?;
        Ok(g.relu(y))
    }
}

#[derive(Clone, Debug)]
pub struct Aspp {
    pub pointwise: Conv2d,
    pub atrous: Vec<Conv2d>,
    pub image_pool: Conv2d,
    pub project: Conv2d,
}

impl Aspp {
    pub fn forward<'p, T: Scalar>(&self, g: &mut Graph<'p, T>, store: &'p ParamStore<T>, x: Var) -> Result<Var> {
        let (_, h, w) = g.value(x).dims3()?;
        let mut branches = Vec::with_capacity(2 + self.atrous.len());
        let b = self.pointwise.forward(g, store, x)?;
        branches.push(g.relu(b));
        for conv in &self.atrous {
            let b = conv.forward(g, store, x)?;
            branches.push(g.relu(b));
        }
        let pooled = g.adaptive_avg_pool(x, 1, 1)?;
        let b = self.image_pool.forward(g, store, pooled)?;
        let b = g.relu(b);
        branches.push(g.resize(b, h, w, Upsample::Bilinear)?);
        let cat = g.concat(&branches)?;
        let y = self.project.forward(g, store, cat)?;
        Ok(g.relu(y))
    }
}

#[derive(Clone, Debug)]
pub struct Ccm {
    /// Class-branch width `C`; the embedding carries `2C` channels.
    pub class_channels: usize,
    pub width: usize,
    pub embed_proj: Conv2d,
    pub reduce: Conv2d,
    pub blocks: Vec<ResidualBlock>,
    pub aspp: Aspp,
    pub head: Conv2d,
}

impl Ccm {
    pub fn new<T: Scalar, R: Rng + ?Sized>(store: &mut ParamStore<T>, rng: &mut R, name: &str, class_channels: usize) -> Self {
        let width = QUERY_CHANNELS;
        let c = class_channels;
        let pw = ConvOptions::new(ConvGeom::POINTWISE);
        let mut conv = |suffix: &str, i, o, opts| Conv2d::new(store, rng, &format!("{name}.{suffix}"), i, o, opts);
        let embed_proj = conv("embed_proj", 2 * c, c, pw);
        let reduce = conv("reduce", width + c, width, pw);
        let blocks = (0..RESIDUAL_BLOCKS)
            .map(|i| ResidualBlock {
                conv1: conv(&format!("res{i}.conv1"), width, width, ConvOptions::new(ConvGeom::same3(1))),
                conv2: conv(&format!("res{i}.conv2"), width, width, ConvOptions::new(ConvGeom::same3(1)).gain(INNER_GAIN)),
            })
            .collect();
        let pointwise = conv("aspp.b0", width, width, pw);
        let atrous = ASPP_RATES
            .iter()
            .enumerate()
            .map(|(i, &r)| conv(&format!("aspp.b{}", i + 1), width, width, ConvOptions::new(ConvGeom::same3(r))))
            .collect();
        let image_pool = conv("aspp.pool", width, width, pw);
        let project = conv("aspp.project", width * (2 + ASPP_RATES.len()), width, pw);
        let aspp = Aspp { pointwise, atrous, image_pool, project };
        let head = conv("head", width, 2, pw.gain(INNER_GAIN));
        Ccm { class_channels, width, embed_proj, reduce, blocks, aspp, head }
    }

    /// Returns the logits and the 256-channel output of the reduction layer.
    pub fn forward_with_reduced<'p, T: Scalar>(
        &self,
        g: &mut Graph<'p, T>,
        store: &'p ParamStore<T>,
        f_query: Var,
        embedding: Var,
    ) -> Result<(Var, Var)> {
        let (qc, qh, qw) = g.value(f_query).dims3()?;
        let (ec, eh, ew) = g.value(embedding).dims3()?;
        if qc != self.width || ec != 2 * self.class_channels {
            return Err(Error::shape(format!(
                "comparison expects {} query and {} embedding channels, got {qc} and {ec}",
                self.width,
                2 * self.class_channels
            )));
        }
        if (qh, qw) != (eh, ew) {
            return Err(Error::shape(format!("query grid {qh}×{qw} differs from embedding grid {eh}×{ew}")));
        }
        let e = self.embed_proj.forward(g, store, embedding)?;
        let cat = g.concat(&[f_query, e])?;
        let r = self.reduce.forward(g, store, cat)?;
        let reduced = g.relu(r);
        let mut h = reduced;
        for block in &self.blocks {
            h = block.forward(g, store, h)?;
        }
        let h = self.aspp.forward(g, store, h)?;
        Ok((self.head.forward(g, store, h)?, reduced))
    }

    pub fn forward<'p, T: Scalar>(&self, g: &mut Graph<'p, T>, store: &'p ParamStore<T>, f_query: Var, embedding: Var) -> Result<Var> {
        Ok(self.forward_with_reduced(g, store, f_query, embedding)?.0)
    }

    pub fn compare<T: Scalar>(&self, store: &ParamStore<T>, f_query: &Tensor<T>, embedding: &ClassEmbedding<T>) -> Result<MaskLogits<T>> {
        let mut g = Graph::inference();
        let q = g.input(f_query.clone(), false);
        let e = g.input(embedding.e_vce.clone(), false);
        let y = self.forward(&mut g, store, q, e)?;
        Ok(MaskLogits { logits: g.value(y).clone() })
    }
}

/// Per-pixel softmax to a foreground probability, bilinear upsampling to the
/// input size, then thresholding with `p ≥ 0.5` as foreground.
pub fn predict_mask<T: Scalar>(logits: &MaskLogits<T>, h_input: usize, w_input: usize) -> Result<PredictionMask<T>> {
    let (c, h, w) = logits.logits.dims3()?;
    if c != 2 {
        return Err(Error::shape(format!("mask logits need 2 channels, got {c}")));
    }
    if h_input < h || w_input < w {
        return Err(Error::shape(format!("output {h_input}×{w_input} smaller than logit grid {h}×{w}")));
    }
    let mut g = Graph::inference();
    let l = g.input(logits.logits.clone(), false);
    let p = g.foreground_prob(l)?;
    let up = g.resize(p, h_input, w_input, Upsample::Bilinear)?;
    let probs = g.value(up).data().to_vec();
    Ok(PredictionMask { height: h_input, width: w_input, mask: threshold(&probs), probs })
}

pub fn threshold<T: Scalar>(probs: &[T]) -> Vec<u8> {
    let half = T::lit(0.5);
    probs.iter().map(|&p| u8::from(p >= half)).collect()
}

/// Bilinear weights as a dense `(h_out·w_out) × (h_in·w_in)` matrix; exposes the
/// resampling used by [`predict_mask`] for inspection.
pub fn bilinear_matrix(h_in: usize, w_in: usize, h_out: usize, w_out: usize) -> Vec<Vec<f64>> {
    let ty = ops::resample_taps(h_in, h_out, Upsample::Bilinear);
    let tx = ops::resample_taps(w_in, w_out, Upsample::Bilinear);
    let mut rows = Vec::with_capacity(h_out * w_out);
    for &(y0, y1, wy0, wy1) in &ty {
        for &(x0, x1, wx0, wx1) in &tx {
            let mut row = alloc::vec![0.0; h_in * w_in];
            row[y0 * w_in + x0] += wy0 * wx0;
            row[y0 * w_in + x1] += wy0 * wx1;
            row[y1 * w_in + x0] += wy1 * wx0;
            row[y1 * w_in + x1] += wy1 * wx1;
            rows.push(row);
        }
    }
    rows
}
