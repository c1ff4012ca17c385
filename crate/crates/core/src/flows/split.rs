use crate::error::{Error, Result};
use crate::numerics::{Graph, Real, Tensor, Var};

/// Channel partition used by a coupling layer. `x_a` conditions the
/// transform of `x_b`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum SplitPattern {
    /// `x_a` = first half, `x_b` = second half.
    ContinuousAB,
    /// `x_a` = second half, `x_b` = first half.
    ContinuousBA,
    /// `x_a` = even channels, `x_b` = odd channels.
    AlternateAB,
    /// `x_a` = odd channels, `x_b` = even channels.
    AlternateBA,
}

impl SplitPattern {
    /// Order of the four couplings inside one flow step.
    pub const STEP_ORDER: [SplitPattern; 4] = [
        SplitPattern::ContinuousAB,
        SplitPattern::AlternateAB,
        SplitPattern::ContinuousBA,
        SplitPattern::AlternateBA,
    ];

    pub fn tag(self) -> &'static str {
        match self {
            SplitPattern::ContinuousAB => "cont_ab",
            SplitPattern::ContinuousBA => "cont_ba",
            SplitPattern::AlternateAB => "alt_ab",
            SplitPattern::AlternateBA => "alt_ba",
        }
    }

    /// Channel indices of `(x_a, x_b)` for `c` channels.
    pub fn channels(self, c: usize) -> Result<(Vec<usize>, Vec<usize>)> {
        if c == 0 || !c.is_multiple_of(2) {
            return Err(Error::shape(format!("split needs an even channel count, got {c}")));
        }
        let half = c / 2;
        let first: Vec<usize> = (0..half).collect();
        let second: Vec<usize> = (half..c).collect();
        let even: Vec<usize> = (0..c).step_by(2).collect();
        let odd: Vec<usize> = (1..c).step_by(2).collect();
        Ok(match self {
            SplitPattern::ContinuousAB => (first, second),
            SplitPattern::ContinuousBA => (second, first),
            SplitPattern::AlternateAB => (even, odd),
            SplitPattern::AlternateBA => (odd, even),
        })
    }

    /// For each original channel, its position in `concat(x_a, x_b)`.
    fn merge_order(self, c: usize) -> Result<Vec<usize>> {
        let (a, b) = self.channels(c)?;
        let mut order = vec![0; c];
        for (pos, &ch) in a.iter().chain(&b).enumerate() {
            order[ch] = pos;
        }
        Ok(order)
    }
}

pub fn split_channels<T: Real>(g: &mut Graph<'_, T>, x: Var, pattern: SplitPattern) -> Result<(Var, Var)> {
    let (a, b) = pattern.channels(g.value(x).last_dim())?;
    Ok((g.select_last(x, &a), g.select_last(x, &b)))
}

pub fn merge_channels<T: Real>(g: &mut Graph<'_, T>, pattern: SplitPattern, xa: Var, xb: Var) -> Result<Var> {
    let c = g.value(xa).last_dim() + g.value(xb).last_dim();
    let order = pattern.merge_order(c)?;
    let cat = g.concat_last(&[xa, xb]);
    Ok(g.select_last(cat, &order))
}

fn select<T: Real>(x: &Tensor<T>, channels: &[usize]) -> Tensor<T> {
    let c = x.last_dim();
    let mut shape = x.shape().to_vec();
    *shape.last_mut().unwrap() = channels.len();
    let data = x
        .data()
        .chunks(c)
        .flat_map(|px| channels.iter().map(move |&ch| px[ch]))
        .collect();
    Tensor::new(&shape, data).unwrap()
}

/// Tensor-level split along the last axis.
pub fn split_tensor<T: Real>(x: &Tensor<T>, pattern: SplitPattern) -> Result<(Tensor<T>, Tensor<T>)> {
    let (a, b) = pattern.channels(x.last_dim())?;
    Ok((select(x, &a), select(x, &b)))
}

/// Inverse of [`split_tensor`].
pub fn merge_tensor<T: Real>(pattern: SplitPattern, xa: &Tensor<T>, xb: &Tensor<T>) -> Result<Tensor<T>> {
    if xa.shape() != xb.shape() {
        return Err(Error::shape(format!(
            "merge halves differ: {:?} vs {:?}",
            xa.shape(),
            xb.shape()
        )));
    }
    let half = xa.last_dim();
    let order = pattern.merge_order(2 * half)?;
    let mut shape = xa.shape().to_vec();
    *shape.last_mut().unwrap() = 2 * half;
    let data = xa
        .data()
        .chunks(half)
        .zip(xb.data().chunks(half))
        .flat_map(|(pa, pb)| {
            order
                .iter()
                .map(move |&pos| if pos < half { pa[pos] } else { pb[pos - half] })
        })
        .collect();
    Tensor::new(&shape, data)
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;

    use super::*;

    fn channel_ids(c: usize) -> Tensor<f64> {
        Tensor::from_fn(&[1, 1, 1, c], |i| i as f64)
    }

    #[test]
    fn figure_layouts() {
        let x = channel_ids(4);
        let (a, b) = split_tensor(&x, SplitPattern::ContinuousAB).unwrap();
        assert_eq!(a.data(), &[0.0, 1.0]);
        assert_eq!(b.data(), &[2.0, 3.0]);
        let (a, b) = split_tensor(&x, SplitPattern::AlternateBA).unwrap();
        assert_eq!(a.data(), &[1.0, 3.0]);
        assert_eq!(b.data(), &[0.0, 2.0]);
        let (a, b) = split_tensor(&x, SplitPattern::ContinuousBA).unwrap();
        assert_eq!(a.data(), &[2.0, 3.0]);
        assert_eq!(b.data(), &[0.0, 1.0]);
        let (a, b) = split_tensor(&x, SplitPattern::AlternateAB).unwrap();
        assert_eq!(a.data(), &[0.0, 2.0]);
        assert_eq!(b.data(), &[1.0, 3.0]);
    }

    #[test]
    fn odd_channels_rejected() {
        assert!(split_tensor(&channel_ids(3), SplitPattern::ContinuousAB).is_err());
    }

    #[test]
    fn graph_and_tensor_paths_agree() {
        let store = crate::numerics::ParamStore::<f64>::new();
        let x = Tensor::from_fn(&[2, 3, 2, 6], |i| (i as f64).sin());
        for pattern in SplitPattern::STEP_ORDER {
            let mut g = Graph::new(&store);
            let xv = g.input(x.clone());
            let (a, b) = split_channels(&mut g, xv, pattern).unwrap();
            let (ta, tb) = split_tensor(&x, pattern).unwrap();
            assert_eq!(g.value(a), &ta);
            assert_eq!(g.value(b), &tb);
            let m = merge_channels(&mut g, pattern, a, b).unwrap();
            assert_eq!(g.value(m), &x);
        }
    }

    proptest! {
        #[test]
        fn merge_inverts_split(half in 1usize..6, rows in 1usize..5, p in 0usize..4) {
            let pattern = SplitPattern::STEP_ORDER[p];
            let x = Tensor::from_fn(&[rows, 2 * half], |i| i as f64 * 0.5 - 3.0);
            let (a, b) = split_tensor(&x, pattern).unwrap();
            prop_assert_eq!(merge_tensor(pattern, &a, &b).unwrap(), x);
        }
    }
}
