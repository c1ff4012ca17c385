use rand::Rng;

use super::squeeze::{squeeze, unsqueeze};
use super::{CouplingSpec, Direction, FlowStep};
use crate::error::{Error, Result};
use crate::numerics::{Graph, ParamStore, Real, Var};

/// Sub-blocks per level.
pub const SUB_BLOCKS: usize = 4;

/// Channels kept in the flow after a factor-out from `c` channels: about
/// half, rounded so that the kept part stays even. Two channels or fewer
/// are never split further.
pub fn keep_after_factor_out(c: usize) -> usize {
    if c <= 2 {
        return c;
    }
    let h = c / 2;
    if h.is_multiple_of(2) {
        h
    } else {
        h + 1
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MultiScaleSpec {
    /// Input image `(h, w, c)`.
    pub image: (usize, usize, usize),
    pub levels: usize,
    /// Flow steps per sub-block.
    pub steps: usize,
    pub hidden: usize,
    pub alpha: f64,
    pub additive: bool,
    /// Length of the conditioning vector fed to every coupling.
    pub cond_dim: Option<usize>,
}

impl MultiScaleSpec {
    pub fn validate(&self) -> Result<()> {
        let (h, w, c) = self.image;
        if self.levels == 0 || self.steps == 0 || self.hidden == 0 || c == 0 {
            return Err(Error::config(
                "levels, steps, hidden width and channels must be positive",
            ));
        }
        let div = 1usize << self.levels;
        if h == 0 || w == 0 || h % div != 0 || w % div != 0 {
            return Err(Error::config(format!(
                "image {h}x{w} is not divisible by 2^{} = {div}",
                self.levels
            )));
        }
        if !(self.alpha > 0.0 && self.alpha <= 1.0) {
            return Err(Error::config(format!("alpha must lie in (0, 1], got {}", self.alpha)));
        }
        Ok(())
    }

    pub fn dim(&self) -> usize {
        let (h, w, c) = self.image;
        h * w * c
    }
}

/// Where one factored-out block of the flow output lives inside the flat
/// latent `[n, h*w*c]`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LatentPart {
    pub level: usize,
    /// Sub-block after which the part left the flow; `None` for the final
    /// remainder.
    pub sub_block: Option<usize>,
    /// Spatial shape `(h, w, c)` of the part.
    pub shape: (usize, usize, usize),
    pub offset: usize,
}

impl LatentPart {
    pub fn len(&self) -> usize {
        self.shape.0 * self.shape.1 * self.shape.2
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Clone, Debug)]
struct SubBlock {
    steps: Vec<FlowStep>,
    /// Channels entering the sub-block.
    channels: usize,
    /// Channels still flowing after the optional factor-out.
    keep: usize,
}

/// Conditional multi-scale flow `x -> upsilon`.
///
/// Each level squeezes, then runs four sub-blocks of flow steps. After each
/// of the first three sub-blocks the trailing channels are factored out
/// into the latent (see [`keep_after_factor_out`]). Whatever remains after
/// the last level is appended at the end.
#[derive(Clone, Debug)]
pub struct MultiScaleFlow {
    spec: MultiScaleSpec,
    levels: Vec<Vec<SubBlock>>,
    layout: Vec<LatentPart>,
}

impl MultiScaleFlow {
    pub fn new<T: Real, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        spec: MultiScaleSpec,
        rng: &mut R,
    ) -> Result<Self> {
        spec.validate()?;
        let (mut h, mut w, mut c) = spec.image;
        let mut levels = Vec::with_capacity(spec.levels);
        let mut layout = Vec::new();
        let mut offset = 0;
        for l in 0..spec.levels {
            h /= 2;
            w /= 2;
            c *= 4;
            let mut blocks = Vec::with_capacity(SUB_BLOCKS);
            for b in 0..SUB_BLOCKS {
                let coupling = CouplingSpec {
                    channels: c,
                    hidden: spec.hidden,
                    cond_dim: spec.cond_dim,
                    alpha: spec.alpha,
                    additive: spec.additive,
                };
                let steps = (0..spec.steps)
                    .map(|k| FlowStep::new(store, &format!("{name}.l{l}.b{b}.s{k}"), coupling, rng))
                    .collect::<Result<Vec<_>>>()?;
                let keep = if b + 1 < SUB_BLOCKS {
                    keep_after_factor_out(c)
                } else {
                    c
                };
                if keep < c {
                    let part = LatentPart {
                        level: l,
                        sub_block: Some(b),
                        shape: (h, w, c - keep),
                        offset,
                    };
                    offset += part.len();
                    layout.push(part);
                }
                blocks.push(SubBlock {
                    steps,
                    channels: c,
                    keep,
                });
                c = keep;
            }
            levels.push(blocks);
        }
        let rest = LatentPart {
            level: spec.levels - 1,
            sub_block: None,
            shape: (h, w, c),
            offset,
        };
        layout.push(rest);
        debug_assert_eq!(offset + rest.len(), spec.dim());
        Ok(MultiScaleFlow { spec, levels, layout })
    }

    pub fn spec(&self) -> &MultiScaleSpec {
        &self.spec
    }

    /// Latent blocks in the order they appear in `upsilon`.
    pub fn layout(&self) -> &[LatentPart] {
        &self.layout
    }

    pub fn steps(&self) -> impl Iterator<Item = &FlowStep> {
        self.levels.iter().flatten().flat_map(|b| b.steps.iter())
    }

    fn check_input<T: Real>(&self, g: &Graph<'_, T>, x: Var) -> Result<usize> {
        let (h, w, c) = self.spec.image;
        match *g.shape(x) {
            [n, xh, xw, xc] if (xh, xw, xc) == (h, w, c) => Ok(n),
            _ => Err(Error::shape(format!(
                "flow expects [n,{h},{w},{c}], got {:?}",
                g.shape(x)
            ))),
        }
    }

    /// `x [n,h,w,c] -> (upsilon [n, h*w*c], logdet [n])`.
    pub fn forward<T: Real>(&self, g: &mut Graph<'_, T>, x: Var, z: Option<Var>) -> Result<(Var, Var)> {
        let n = self.check_input(g, x)?;
        let mut cur = x;
        let mut logdet = g.input(crate::numerics::Tensor::zeros(&[n]));
        let mut parts = Vec::with_capacity(self.layout.len());
        for blocks in &self.levels {
            cur = squeeze(g, cur)?;
            for block in blocks {
                for step in &block.steps {
                    let (y, ld) = step.apply(g, cur, z, Direction::Forward)?;
                    cur = y;
                    logdet = g.add(logdet, ld);
                }
                if block.keep < block.channels {
                    let out = g.slice_last(cur, block.keep, block.channels);
                    let len = g.value(out).len() / n;
                    parts.push(g.reshape(out, &[n, len]));
                    cur = g.slice_last(cur, 0, block.keep);
                }
            }
        }
        let len = g.value(cur).len() / n;
        parts.push(g.reshape(cur, &[n, len]));
        Ok((g.concat_last(&parts), logdet))
    }

    /// `upsilon [n, h*w*c] -> (x [n,h,w,c], logdet [n])`, where `logdet` is
    /// that of the inverse map.
    pub fn inverse<T: Real>(&self, g: &mut Graph<'_, T>, upsilon: Var, z: Option<Var>) -> Result<(Var, Var)> {
        let dim = self.spec.dim();
        let n = match *g.shape(upsilon) {
            [n, d] if d == dim => n,
            _ => {
                return Err(Error::shape(format!(
                    "flow expects latent [n,{dim}], got {:?}",
                    g.shape(upsilon)
                )))
            }
        };
        let part = |g: &mut Graph<'_, T>, p: &LatentPart| {
            let flat = g.slice_last(upsilon, p.offset, p.offset + p.len());
            g.reshape(flat, &[n, p.shape.0, p.shape.1, p.shape.2])
        };
        let rest = self.layout.last().expect("layout always ends with the remainder");
        let mut cur = part(g, rest);
        let mut logdet = g.input(crate::numerics::Tensor::zeros(&[n]));
        let mut factored = self.layout[..self.layout.len() - 1].iter().rev();
        for blocks in self.levels.iter().rev() {
            for block in blocks.iter().rev() {
                if block.keep < block.channels {
                    let p = factored.next().expect("layout matches the block structure");
                    let out = part(g, p);
                    cur = g.concat_last(&[cur, out]);
                }
                for step in block.steps.iter().rev() {
                    let (y, ld) = step.apply(g, cur, z, Direction::Inverse)?;
                    cur = y;
                    logdet = g.add(logdet, ld);
                }
            }
            cur = unsqueeze(g, cur)?;
        }
        Ok((cur, logdet))
    }
}
