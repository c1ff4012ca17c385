//! Space-to-depth reshaping. Each 2x2 spatial block becomes one position
//! with `4c` channels, ordered `(dy, dx, c)`: for a single-channel block
//! `[[a, b], [c, d]]` the output channels are `[a, b, c, d]`.

use std::rc::Rc;

use crate::error::{Error, Result};
use crate::numerics::{Graph, Real, Tensor, Var};

/// For each output element of the squeeze of `[n, h, w, c]`, the input
/// element it reads.
fn squeeze_index(n: usize, h: usize, w: usize, c: usize) -> Vec<usize> {
    let (oh, ow, oc) = (h / 2, w / 2, 4 * c);
    let mut idx = Vec::with_capacity(n * h * w * c);
    for b in 0..n {
        for i in 0..oh {
            for j in 0..ow {
                for k in 0..oc {
                    let (block, ch) = (k / c, k % c);
                    let (dy, dx) = (block / 2, block % 2);
                    idx.push(((b * h + 2 * i + dy) * w + 2 * j + dx) * c + ch);
                }
            }
        }
    }
    idx
}

fn dims4(shape: &[usize]) -> Result<(usize, usize, usize, usize)> {
    match *shape {
        [n, h, w, c] => Ok((n, h, w, c)),
        _ => Err(Error::shape(format!("expected [n,h,w,c], got {shape:?}"))),
    }
}

fn squeeze_dims(shape: &[usize]) -> Result<(usize, usize, usize, usize)> {
    let (n, h, w, c) = dims4(shape)?;
    if h % 2 != 0 || w % 2 != 0 {
        return Err(Error::shape(format!("squeeze needs even spatial dims, got {h}x{w}")));
    }
    Ok((n, h, w, c))
}

fn unsqueeze_dims(shape: &[usize]) -> Result<(usize, usize, usize, usize)> {
    let (n, h, w, c) = dims4(shape)?;
    if c % 4 != 0 {
        return Err(Error::shape(format!(
            "unsqueeze needs channels divisible by 4, got {c}"
        )));
    }
    Ok((n, 2 * h, 2 * w, c / 4))
}

fn inverse(idx: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; idx.len()];
    for (o, &i) in idx.iter().enumerate() {
        inv[i] = o;
    }
    inv
}

pub fn squeeze<T: Real>(g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
    let (n, h, w, c) = squeeze_dims(g.shape(x))?;
    let idx: Rc<[usize]> = squeeze_index(n, h, w, c).into();
    Ok(g.gather(x, idx, &[n, h / 2, w / 2, 4 * c]))
}

pub fn unsqueeze<T: Real>(g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
    let (n, h, w, c) = unsqueeze_dims(g.shape(x))?;
    let idx: Rc<[usize]> = inverse(&squeeze_index(n, h, w, c)).into();
    Ok(g.gather(x, idx, &[n, h, w, c]))
}

pub fn squeeze_tensor<T: Real>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let (n, h, w, c) = squeeze_dims(x.shape())?;
    let data = squeeze_index(n, h, w, c).iter().map(|&i| x.data()[i]).collect();
    Tensor::new(&[n, h / 2, w / 2, 4 * c], data)
}

pub fn unsqueeze_tensor<T: Real>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let (n, h, w, c) = unsqueeze_dims(x.shape())?;
    let data = inverse(&squeeze_index(n, h, w, c))
        .iter()
        .map(|&i| x.data()[i])
        .collect();
    Tensor::new(&[n, h, w, c], data)
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;

    use super::*;

    #[test]
    fn two_by_two_block_order() {
        let x: Tensor<f64> = Tensor::from_f64(&[1, 2, 2, 1], &[1.0, 2.0, 3.0, 4.0]).unwrap();
        let y = squeeze_tensor(&x).unwrap();
        assert_eq!(y.shape(), &[1, 1, 1, 4]);
        assert_eq!(y.data(), &[1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn odd_dims_rejected() {
        let x = Tensor::<f64>::zeros(&[1, 3, 2, 1]);
        assert!(squeeze_tensor(&x).is_err());
    }

    proptest! {
        #[test]
        fn unsqueeze_inverts_and_preserves_values(n in 1usize..3, h in 1usize..4, w in 1usize..4, c in 1usize..4) {
            let x = Tensor::<f64>::from_fn(&[n, 2 * h, 2 * w, c], |i| (i as f64 * 1.37).sin());
            let y = squeeze_tensor(&x).unwrap();
            prop_assert_eq!(y.shape(), &[n, h, w, 4 * c]);
            let mut a = x.data().to_vec();
            let mut b = y.data().to_vec();
            a.sort_by(f64::total_cmp);
            b.sort_by(f64::total_cmp);
            prop_assert_eq!(a, b);
            prop_assert_eq!(unsqueeze_tensor(&y).unwrap(), x);
        }
    }
}
