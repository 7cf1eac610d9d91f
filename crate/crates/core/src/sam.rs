//! Spatial attention: compress the multi-scale feature `5C → C → C/2`, link every
//! position with a non-local block, recover `C/2 → C`, and concatenate with a
//! direct `5C → C` projection of the multi-scale feature into the `2C`-channel
//! class embedding.

use alloc::format;
use alloc::vec::Vec;

use rand::Rng;

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::nn::{Conv2d, ConvOptions};
use crate::ops::ConvGeom;
use crate::params::ParamStore;
use crate::tensor::{Scalar, Tensor};

/// Initial scale of the channel-recovery weights relative to He init.
pub const RECOVERY_GAIN: f64 = 0.01;

/// The `2C×H×W` class embedding.
#[derive(Clone, Debug, PartialEq)]
pub struct ClassEmbedding<T> {
    pub e_vce: Tensor<T>,
}

impl<T: Scalar> ClassEmbedding<T> {
    pub fn channels(&self) -> usize {
        self.e_vce.shape()[0]
    }
}

/// Flattened `C/2 × N` outputs of the three branch transforms.
#[derive(Clone, Debug, PartialEq)]
pub struct NonLocalBranches<T> {
    pub f_a: Tensor<T>,
    pub f_b: Tensor<T>,
    pub f_c: Tensor<T>,
}

/// Intermediate values of one non-local pass, for inspection and tests.
#[derive(Clone, Debug)]
pub struct NonLocalTrace<T> {
    pub branches: NonLocalBranches<T>,
    /// `N×N` row-stochastic attention.
    pub attention: Tensor<T>,
    pub output: Tensor<T>,
}

#[derive(Clone, Debug)]
pub struct Sam {
    pub channels: usize,
    pub compress1: Conv2d,
    pub compress2: Conv2d,
    pub query: Conv2d,
    pub key: Conv2d,
    pub value: Conv2d,
    pub recover: Conv2d,
    pub direct: Conv2d,
}

struct NonLocalVars {
    f_a: Var,
    f_b: Var,
    f_c: Var,
    attention: Var,
    out: Var,
}

impl Sam {
    /// Builds the module for class-branch width `c` (must be even).
    pub fn new<T: Scalar, R: Rng + ?Sized>(store: &mut ParamStore<T>, rng: &mut R, name: &str, c: usize) -> Result<Self> {
        if c == 0 || c % 2 != 0 {
            return Err(Error::config(format!("attention width must be positive and even, got {c}")));
        }
        let half = c / 2;
        let pw = ConvOptions::new(ConvGeom::POINTWISE);
        let mut conv = |suffix: &str, i, o, opts| Conv2d::new(store, rng, &format!("{name}.{suffix}"), i, o, opts);
        Ok(Sam {
            channels: c,
            compress1: conv("compress1", 5 * c, c, pw),
            compress2: conv("compress2", c, half, pw),
            query: conv("query", half, half, pw),
            key: conv("key", half, half, pw),
            value: conv("value", half, half, pw),
            recover: conv("recover", half, c, pw.gain(RECOVERY_GAIN)),
            direct: conv("direct", 5 * c, c, pw),
        })
    }

    pub fn compress<'p, T: Scalar>(&self, g: &mut Graph<'p, T>, store: &'p ParamStore<T>, o_m: Var) -> Result<Var> {
        let (ch, _, _) = g.value(o_m).dims3()?;
        if ch != 5 * self.channels {
            return Err(Error::shape(format!("expected {} channels, got {ch}", 5 * self.channels)));
        }
        let h = self.compress1.forward(g, store, o_m)?;
        self.compress2.forward(g, store, h)
    }

    fn non_local_vars<'p, T: Scalar>(&self, g: &mut Graph<'p, T>, store: &'p ParamStore<T>, x: Var) -> Result<NonLocalVars> {
        let (c, h, w) = g.value(x).dims3()?;
        let n = h * w;
        let a = self.query.forward(g, store, x)?;
        let b = self.key.forward(g, store, x)?;
        let v = self.value.forward(g, store, x)?;
        let f_a = g.reshape(a, &[c, n])?;
        let f_b = g.reshape(b, &[c, n])?;
        let f_c = g.reshape(v, &[c, n])?;
        // N×N affinity, contracted over channels
        let affinity = g.matmul(f_a, f_b, true, false)?;
        let attention = g.softmax_rows(affinity)?;
        let mixed = g.matmul(f_c, attention, false, true)?;
        let out = g.reshape(mixed, &[c, h, w])?;
        Ok(NonLocalVars { f_a, f_b, f_c, attention, out })
    }

    pub fn non_local<'p, T: Scalar>(&self, g: &mut Graph<'p, T>, store: &'p ParamStore<T>, x: Var) -> Result<Var> {
        Ok(self.non_local_vars(g, store, x)?.out)
    }

    /// Non-local output after channel recovery (`F_M`).
    pub fn attention_path<'p, T: Scalar>(&self, g: &mut Graph<'p, T>, store: &'p ParamStore<T>, o_m: Var) -> Result<Var> {
        let compressed = self.compress(g, store, o_m)?;
        let mixed = self.non_local(g, store, compressed)?;
        self.recover.forward(g, store, mixed)
    }

    pub fn forward<'p, T: Scalar>(&self, g: &mut Graph<'p, T>, store: &'p ParamStore<T>, o_m: Var) -> Result<Var> {
        let f_m = self.attention_path(g, store, o_m)?;
        let direct = self.direct.forward(g, store, o_m)?;
        g.concat(&[f_m, direct])
    }

    pub fn compress_tensor<T: Scalar>(&self, store: &ParamStore<T>, o_m: &Tensor<T>) -> Result<Tensor<T>> {
        let mut g = Graph::inference();
        let x = g.input(o_m.clone(), false);
        let y = self.compress(&mut g, store, x)?;
        Ok(g.value(y).clone())
    }

    /// Non-local block on a `C/2×H×W` tensor, returning every intermediate.
    pub fn non_local_tensor<T: Scalar>(&self, store: &ParamStore<T>, x: &Tensor<T>) -> Result<NonLocalTrace<T>> {
        let (c, _, _) = x.dims3()?;
        if c != self.channels / 2 {
            return Err(Error::shape(format!("non-local expects {} channels, got {c}", self.channels / 2)));
        }
        let mut g = Graph::inference();
        let xv = g.input(x.clone(), false);
        let vars = self.non_local_vars(&mut g, store, xv)?;
        Ok(NonLocalTrace {
            branches: NonLocalBranches {
                f_a: g.value(vars.f_a).clone(),
                f_b: g.value(vars.f_b).clone(),
                f_c: g.value(vars.f_c).clone(),
            },
            attention: g.value(vars.attention).clone(),
            output: g.value(vars.out).clone(),
        })
    }

    pub fn build_class_embedding<T: Scalar>(&self, store: &ParamStore<T>, o_m: &Tensor<T>) -> Result<ClassEmbedding<T>> {
        let mut g = Graph::inference();
        let x = g.input(o_m.clone(), false);
        let y = self.forward(&mut g, store, x)?;
        let e_vce = g.value(y).clone();
        if !e_vce.all_finite() {
            return Err(Error::Contract("class embedding contains non-finite values".into()));
        }
        Ok(ClassEmbedding { e_vce })
    }

    pub fn param_names<T: Scalar>(&self, store: &ParamStore<T>) -> Vec<alloc::string::String> {
        [&self.compress1, &self.compress2, &self.query, &self.key, &self.value, &self.recover, &self.direct]
            .iter()
            .flat_map(|c| core::iter::once(c.weight).chain(c.bias))
            .map(|id| store.get(id).name.clone())
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn sam(c: usize) -> (Sam, ParamStore<f64>) {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let s = Sam::new(&mut store, &mut rng, "sam", c).unwrap();
        (s, store)
    }

    #[test]
    fn compress_channel_schedule() {
        for c in [4, 64] {
            let (s, store) = sam(c);
            let y = s.compress_tensor(&store, &Tensor::zeros(&[5 * c, 8, 8])).unwrap();
            assert_eq!(y.shape(), &[c / 2, 8, 8]);
            assert!(y.data().iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn odd_width_is_a_configuration_error() {
        let mut store = ParamStore::<f32>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(matches!(Sam::new(&mut store, &mut rng, "sam", 5), Err(Error::Config(_))));
    }

    #[test]
    fn single_position_attends_to_itself() {
        let (s, store) = sam(4);
        let x = Tensor::from_vec(&[2, 1, 1], alloc::vec![0.3, -1.2]).unwrap();
        let t = s.non_local_tensor(&store, &x).unwrap();
        assert_eq!(t.attention.data(), &[1.0]);
        assert_eq!(t.output.data(), t.branches.f_c.data());
    }

    #[test]
    fn uniform_input_gives_uniform_attention() {
        let (s, store) = sam(4);
        let x = Tensor::from_fn(&[2, 3, 3], |i| if i < 9 { 0.7 } else { -0.4 });
        let t = s.non_local_tensor(&store, &x).unwrap();
        for &a in t.attention.data() {
            assert!((a - 1.0 / 9.0).abs() < 1e-12);
        }
        for ch in t.output.data().chunks(9) {
            assert!(ch.iter().all(|&v| (v - ch[0]).abs() < 1e-12));
        }
    }

    #[test]
    fn embedding_has_two_c_channels() {
        let (s, store) = sam(4);
        let o_m = Tensor::from_fn(&[20, 8, 8], |i| ((i * 13) % 17) as f64 / 17.0);
        let e = s.build_class_embedding(&store, &o_m).unwrap();
        assert_eq!(e.e_vce.shape(), &[8, 8, 8]);
        assert_eq!(e.channels(), 8);
    }

    #[test]
    fn recovery_bias_survives_zero_weights() {
        let (s, mut store) = sam(4);
        let ids: Vec<_> = store.iter().map(|(id, _)| id).collect();
        for id in ids {
            store.value_mut(id).data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
        let b = [0.5, -1.0, 2.0, 0.25];
        store.value_mut(s.recover.bias.unwrap()).data_mut().copy_from_slice(&b);
        let o_m = Tensor::from_fn(&[20, 4, 4], |i| (i as f64 * 0.1).sin());
        let e = s.build_class_embedding(&store, &o_m).unwrap();
        for (c, &bc) in b.iter().enumerate() {
            assert!(e.e_vce.channels(c, c + 1).unwrap().data().iter().all(|&v| v == bc));
        }
        assert!(e.e_vce.channels(4, 8).unwrap().data().iter().all(|&v| v == 0.0));
    }
}
