use rand::Rng;

use super::{ActNorm, Coupling, CouplingSpec, Direction, InvConv, SplitPattern};
use crate::error::Result;
use crate::numerics::{Graph, ParamStore, Real, Var};

/// actnorm -> invertible 1x1 conv -> four couplings, one per split pattern
/// in [`SplitPattern::STEP_ORDER`].
#[derive(Clone, Debug)]
pub struct FlowStep {
    pub actnorm: ActNorm,
    pub invconv: InvConv,
    pub couplings: Vec<Coupling>,
}

impl FlowStep {
    pub fn new<T: Real, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        spec: CouplingSpec,
        rng: &mut R,
    ) -> Result<Self> {
        let c = spec.channels;
        let actnorm = ActNorm::new(store, &format!("{name}.actnorm"), c);
        let invconv = InvConv::new_random(store, &format!("{name}.invconv"), c, rng);
        let couplings = SplitPattern::STEP_ORDER
            .iter()
            .map(|&p| Coupling::new(store, &format!("{name}.coupling_{}", p.tag()), spec, p, rng))
            .collect::<Result<Vec<_>>>()?;
        Ok(FlowStep {
            actnorm,
            invconv,
            couplings,
        })
    }

    pub fn apply<T: Real>(&self, g: &mut Graph<'_, T>, x: Var, z: Option<Var>, dir: Direction) -> Result<(Var, Var)> {
        match dir {
            Direction::Forward => {
                let (mut y, mut logdet) = self.actnorm.apply(g, x, dir)?;
                let (y2, ld) = self.invconv.apply(g, y, dir)?;
                y = y2;
                logdet = g.add(logdet, ld);
                for cp in &self.couplings {
                    let (y2, ld) = cp.apply(g, y, z, dir)?;
                    y = y2;
                    logdet = g.add(logdet, ld);
                }
                Ok((y, logdet))
            }
            Direction::Inverse => {
                let mut y = x;
                let mut logdet = None;
                for cp in self.couplings.iter().rev() {
                    let (y2, ld) = cp.apply(g, y, z, dir)?;
                    y = y2;
                    logdet = Some(match logdet {
                        None => ld,
                        Some(acc) => g.add(acc, ld),
                    });
                }
                let (y2, ld) = self.invconv.apply(g, y, dir)?;
                let mut acc = match logdet {
                    None => ld,
                    Some(acc) => g.add(acc, ld),
                };
                let (y3, ld) = self.actnorm.apply(g, y2, dir)?;
                acc = g.add(acc, ld);
                Ok((y3, acc))
            }
        }
    }
}
