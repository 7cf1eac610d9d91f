//! Binary cross-entropy on predicted foreground probabilities.

use alloc::vec::Vec;

use crate::autograd::{Graph, Var};
use crate::error::Result;
use crate::image::Mask;
use crate::tensor::Scalar;

/// Probability clamp inside the logarithms.
pub const PROB_EPS: f64 = 1e-7;
pub const WEIGHT_CLIP: (f64, f64) = (0.1, 10.0);

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum LossKind {
    #[default]
    BalancedBce,
    Bce,
}

impl LossKind {
    pub fn as_str(self) -> &'static str {
        match self {
            LossKind::BalancedBce => "balanced_bce",
            LossKind::Bce => "bce",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "balanced_bce" => Some(LossKind::BalancedBce),
            "bce" => Some(LossKind::Bce),
            _ => None,
        }
    }
}

/// `(w_fg, w_bg) = (0.5 / ρ, 0.5 / (1 - ρ))` clipped to `[0.1, 10]`, where `ρ` is
/// the foreground fraction. An empty class side gets the upper clip.
pub fn balance_weights(foreground_fraction: f64) -> (f64, f64) {
    let clip = |w: f64| w.clamp(WEIGHT_CLIP.0, WEIGHT_CLIP.1);
    let rho = foreground_fraction;
    let fg = if rho > 0.0 { clip(0.5 / rho) } else { WEIGHT_CLIP.1 };
    let bg = if rho < 1.0 { clip(0.5 / (1.0 - rho)) } else { WEIGHT_CLIP.1 };
    (fg, bg)
}

pub fn pixel_weights<T: Scalar>(kind: LossKind, gt: &Mask) -> Vec<T> {
    let (fg, bg) = match kind {
        LossKind::Bce => (1.0, 1.0),
        LossKind::BalancedBce => balance_weights(gt.count() as f64 / gt.data.len().max(1) as f64),
    };
    gt.data.iter().map(|&v| T::lit(if v != 0 { fg } else { bg })).collect()
}

/// Records the loss of foreground probabilities `probs` (`1×H×W`) against `gt`.
pub fn mask_loss<T: Scalar>(g: &mut Graph<'_, T>, probs: Var, gt: &Mask, kind: LossKind) -> Result<Var> {
    let target = gt.data.iter().map(|&v| if v != 0 { T::one() } else { T::zero() }).collect();
    g.weighted_bce(probs, target, pixel_weights(kind, gt), T::lit(PROB_EPS))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;
    use alloc::vec;

    fn loss_of(probs: Vec<f64>, gt: Vec<u8>, kind: LossKind) -> f64 {
        let n = gt.len();
        let mask = Mask { width: n, height: 1, data: gt };
        let mut g = Graph::new();
        let p = g.input(Tensor::from_vec(&[1, 1, n], probs).unwrap(), false);
        let l = mask_loss(&mut g, p, &mask, kind).unwrap();
        g.value(l).data()[0]
    }

    #[test]
    fn saturated_prediction_has_near_zero_loss() {
        let gt = vec![1, 0, 0, 1];
        let probs = gt.iter().map(|&v| v as f64).collect();
        assert!(loss_of(probs, gt, LossKind::BalancedBce) < 1e-3);
    }

    #[test]
    fn half_probability_costs_ln2() {
        let l = loss_of(vec![0.5; 6], vec![1, 0, 1, 0, 0, 0], LossKind::Bce);
        assert!((l - core::f64::consts::LN_2).abs() < 1e-12);
    }

    #[test]
    fn balanced_quarter_foreground() {
        // rho = 0.25: w_fg = 2, w_bg = 2/3; mean weight is 1, so the loss is ln 2
        let (fg, bg) = balance_weights(0.25);
        assert!((fg - 2.0).abs() < 1e-12 && (bg - 2.0 / 3.0).abs() < 1e-12);
        let hand = (4.0 * fg + 12.0 * bg) / 16.0 * core::f64::consts::LN_2;
        let mut gt = vec![0u8; 16];
        gt[..4].iter_mut().for_each(|v| *v = 1);
        let l = loss_of(vec![0.5; 16], gt, LossKind::BalancedBce);
        assert!((l - hand).abs() < 1e-12);
    }

    #[test]
    fn weights_are_clipped() {
        assert_eq!(balance_weights(0.001), (10.0, 0.5 / 0.999));
        assert_eq!(balance_weights(0.0).0, 10.0);
        assert_eq!(balance_weights(1.0), (0.5, 10.0));
    }
}
