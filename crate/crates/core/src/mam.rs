//! Multi-scale attention: pyramid average pooling of the class-branch input at
//! ratios (1, 2, 3, 6), re-expansion onto the input grid, and concatenation
//! with the input into a `5C`-channel feature. The module has no parameters.

use alloc::format;
use alloc::vec::Vec;

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::ops::Upsample;
use crate::tensor::{Scalar, Tensor};

pub const POOL_RATIOS: [usize; 4] = [1, 2, 3, 6];

/// Pooled maps `C×1×1, C×2×2, C×3×3, C×6×6` in ratio order.
#[derive(Clone, Debug, PartialEq)]
pub struct PyramidPooled<T> {
    pub maps: Vec<Tensor<T>>,
}

impl<T: Scalar> PyramidPooled<T> {
    pub fn ratios(&self) -> [usize; 4] {
        POOL_RATIOS
    }

    /// Pooled cells per channel across all ratios (50).
    pub fn cells_per_channel(&self) -> usize {
        self.maps.iter().map(|m| m.shape()[1] * m.shape()[2]).sum()
    }
}

/// The `5C×H×W` output of the module.
#[derive(Clone, Debug, PartialEq)]
pub struct MultiScaleFeature<T> {
    pub o_m: Tensor<T>,
}

#[derive(Clone, Copy, Debug, Default)]
pub struct Mam {
    pub upsample: Upsample,
}

impl Mam {
    pub fn new(upsample: Upsample) -> Self {
        Mam { upsample }
    }

    pub fn pool<T: Scalar>(&self, g: &mut Graph<'_, T>, i_class: Var) -> Result<[Var; 4]> {
        let (_, h, w) = g.value(i_class).dims3()?;
        let largest = POOL_RATIOS[3];
        if h < largest || w < largest {
            return Err(Error::shape(format!("pyramid pooling needs at least {largest}×{largest}, got {h}×{w}")));
        }
        let mut out = [i_class; 4];
        for (slot, &r) in out.iter_mut().zip(&POOL_RATIOS) {
            *slot = g.adaptive_avg_pool(i_class, r, r)?;
        }
        Ok(out)
    }

    pub fn expand_and_concat<T: Scalar>(&self, g: &mut Graph<'_, T>, pooled: [Var; 4], i_class: Var) -> Result<Var> {
        let (c, h, w) = g.value(i_class).dims3()?;
        let mut parts = Vec::with_capacity(5);
        for p in pooled {
            let pc = g.value(p).dims3()?.0;
            if pc != c {
                return Err(Error::Contract(format!("pooled map has {pc} channels, input has {c}")));
            }
            parts.push(g.resize(p, h, w, self.upsample)?);
        }
        parts.push(i_class);
        g.concat(&parts)
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<'_, T>, i_class: Var) -> Result<Var> {
        let pooled = self.pool(g, i_class)?;
        self.expand_and_concat(g, pooled, i_class)
    }
}

/// Adaptive average pooling of `i_class` (`C×H×W`, `H, W ≥ 6`) at every ratio.
///
/// Cell `(i, j)` at ratio `r` is the mean over row band `i` and column band `j`,
/// where the bands split the axis into `r` contiguous runs of `floor` or `ceil`
/// of `H / r` pixels (see [`crate::ops::band`]).
pub fn pyramid_pool<T: Scalar>(i_class: &Tensor<T>) -> Result<PyramidPooled<T>> {
    let mut g = Graph::inference();
    let x = g.input(i_class.clone(), false);
    let vars = Mam::default().pool(&mut g, x)?;
    Ok(PyramidPooled { maps: vars.iter().map(|&v| g.value(v).clone()).collect() })
}

pub fn expand_and_concat<T: Scalar>(pooled: &PyramidPooled<T>, i_class: &Tensor<T>, upsample: Upsample) -> Result<MultiScaleFeature<T>> {
    if pooled.maps.len() != POOL_RATIOS.len() {
        return Err(Error::Contract(format!("expected 4 pooled maps, got {}", pooled.maps.len())));
    }
    let mut g = Graph::inference();
    let x = g.input(i_class.clone(), false);
    let mut vars = [x; 4];
    for (slot, m) in vars.iter_mut().zip(&pooled.maps) {
        *slot = g.input(m.clone(), false);
    }
    let out = Mam::new(upsample).expand_and_concat(&mut g, vars, x)?;
    Ok(MultiScaleFeature { o_m: g.value(out).clone() })
}
