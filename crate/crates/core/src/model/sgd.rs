//! Stochastic gradient descent with optional momentum.

use crate::error::Result;
use crate::model::ParameterSet;

/// Plain SGD. With `momentum == 0` the step is stateless, so a zero
/// gradient leaves a tensor bit-identical.
pub struct Sgd {
    pub learning_rate: f64,
    pub momentum: f64,
    velocity: Option<ParameterSet>,
}

impl Sgd {
    pub fn new(learning_rate: f64, momentum: f64) -> Self {
        Sgd {
            learning_rate,
            momentum,
            velocity: None,
        }
    }

    pub fn step(&mut self, params: &mut ParameterSet, grads: &ParameterSet) -> Result<()> {
        debug_assert!(params.same_structure(grads), "param/grad structure mismatch");
        if self.momentum == 0.0 {
            for ((_, p), (_, g)) in params.iter_mut().zip(grads.iter()) {
                for (pv, &gv) in p.data.iter_mut().zip(&g.data) {
                    if gv != 0.0 {
                        *pv -= self.learning_rate * gv;
                    }
                }
            }
            return Ok(());
        }
        if self.velocity.is_none() {
            self.velocity = Some(grads.zeros_like());
        }
        let vel = self.velocity.as_mut().unwrap();
        for (((_, p), (_, g)), (_, v)) in params
            .iter_mut()
            .zip(grads.iter())
            .zip(vel.iter_mut())
        {
            for ((pv, &gv), vv) in p.data.iter_mut().zip(&g.data).zip(v.data.iter_mut()) {
                *vv = self.momentum * *vv + gv;
                if *vv != 0.0 {
                    *pv -= self.learning_rate * *vv;
                }
            }
        }
        Ok(())
    }
}
