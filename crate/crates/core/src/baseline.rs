//! Attention-free baselines: two plain lattice layers whose second-layer
//! hidden vectors are pooled into a single global representation.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gca::{Dense, ModelDims};
use crate::numerics::{dropout_mask, softmax_flat, GradBuffer, InitScheme, ParamId, ParamStore, RngStream};
use crate::stlstm::{lattice_backward, lattice_forward, JointOrder, LatticeState, Schedule, StLstmParams};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Pooling {
    /// `tanh` of one affine map over all concatenated hidden vectors.
    Feedforward,
    /// Mean of all hidden vectors.
    Average,
}

#[derive(Debug, Clone)]
pub struct BaselineNetwork {
    pub dims: ModelDims,
    pub order: JointOrder,
    pub pooling: Pooling,
    pub first: StLstmParams,
    pub second: StLstmParams,
    pub pool: Option<Dense>,
    pub classifier: Dense,
}

#[derive(Debug, Clone)]
pub struct BaselineTrace {
    first: LatticeState,
    hidden_mask: Vec<f64>,
    hd: Vec<f64>,
    second: LatticeState,
    pooled: Vec<f64>,
    class_mask: Vec<f64>,
    pub posterior: Vec<f64>,
}

impl BaselineNetwork {
    pub fn new(
        store: &mut ParamStore,
        dims: ModelDims,
        order: JointOrder,
        pooling: Pooling,
        init: InitScheme,
        rng: &mut RngStream,
    ) -> Result<Self> {
        dims.validate()?;
        if order.len() != dims.joints {
            return Err(Error::shape(
                "BaselineNetwork",
                format!("joint order has {} joints, model has {}", order.len(), dims.joints),
            ));
        }
        let d = dims.hidden;
        let first = StLstmParams::new(store, "first", dims.input_dim, d, init, rng);
        let second = StLstmParams::new(store, "second", d, d, init, rng);
        let pool = match pooling {
            Pooling::Feedforward => Some(Dense::new(store, "pool", d, dims.joints * dims.frames * d, init, rng)),
            Pooling::Average => None,
        };
        let classifier = Dense::new(store, "classifier", dims.classes, d, init, rng);
        Ok(Self {
            dims,
            order,
            pooling,
            first,
            second,
            pool,
            classifier,
        })
    }

    pub fn params(&self) -> Vec<ParamId> {
        let mut v = vec![self.first.w, self.first.b, self.second.w, self.second.b];
        if let Some(p) = self.pool {
            v.extend([p.w, p.b]);
        }
        v.extend([self.classifier.w, self.classifier.b]);
        v
    }

    pub fn forward(
        &self,
        store: &ParamStore,
        inputs: &[f64],
        mut dropout: Option<(f64, &mut RngStream)>,
    ) -> Result<BaselineTrace> {
        let tn = self.dims.frames;
        let d = self.dims.hidden;
        let first = lattice_forward(store, &self.first, inputs, tn, &self.order, None, Schedule::RowMajor)?;
        let n = first.hidden_grid().len();
        let hidden_mask = match dropout.as_mut() {
            Some((p, rng)) => dropout_mask(n, *p, Some(&mut **rng))?,
            None => vec![1.0; n],
        };
        let hd: Vec<f64> = first.hidden_grid().iter().zip(&hidden_mask).map(|(h, m)| h * m).collect();
        let second = lattice_forward(store, &self.second, &hd, tn, &self.order, None, Schedule::RowMajor)?;
        let h2 = second.hidden_grid();
        let pooled = match self.pool {
            None => {
                let mut out = vec![0.0; d];
                for h in h2.chunks_exact(d) {
                    for (o, v) in out.iter_mut().zip(h) {
                        *o += v;
                    }
                }
                let inv = 1.0 / (h2.len() / d) as f64;
                out.iter_mut().for_each(|v| *v *= inv);
                out
            }
            Some(m) => {
                let mut out = vec![0.0; d];
                store.value(m.w).affine_into(store.value(m.b).as_slice(), h2, &mut out);
                out.iter_mut().for_each(|v| *v = v.tanh());
                out
            }
        };
        let class_mask = match dropout.as_mut() {
            Some((p, rng)) => dropout_mask(d, *p, Some(&mut **rng))?,
            None => vec![1.0; d],
        };
        let x: Vec<f64> = pooled.iter().zip(&class_mask).map(|(a, m)| a * m).collect();
        let mut logits = vec![0.0; self.dims.classes];
        store
            .value(self.classifier.w)
            .affine_into(store.value(self.classifier.b).as_slice(), &x, &mut logits);
        let posterior = softmax_flat(&logits)?;
        Ok(BaselineTrace {
            first,
            hidden_mask,
            hd,
            second,
            pooled,
            class_mask,
            posterior,
        })
    }

    pub fn backward(&self, store: &ParamStore, tr: &BaselineTrace, label: usize, grads: &mut GradBuffer) -> Result<f64> {
        let loss = crate::trainer::nll_loss(&tr.posterior, label)?;
        let d = self.dims.hidden;
        let dlogits: Vec<f64> = tr
            .posterior
            .iter()
            .enumerate()
            .map(|(k, p)| p - if k == label { 1.0 } else { 0.0 })
            .collect();
        let x: Vec<f64> = tr.pooled.iter().zip(&tr.class_mask).map(|(a, m)| a * m).collect();
        {
            let (gw, gb) = grads.pair_mut(self.classifier.w, self.classifier.b);
            gw.add_outer(&dlogits, &x);
            gb.add_assign(&dlogits);
        }
        let mut dpooled = vec![0.0; d];
        store.value(self.classifier.w).t_matvec_acc(&dlogits, &mut dpooled);
        for (g, m) in dpooled.iter_mut().zip(&tr.class_mask) {
            *g *= m;
        }
        let h2 = tr.second.hidden_grid();
        let mut dh2 = vec![0.0; h2.len()];
        match self.pool {
            None => {
                let inv = 1.0 / (h2.len() / d) as f64;
                for g in dh2.chunks_exact_mut(d) {
                    for (a, b) in g.iter_mut().zip(&dpooled) {
                        *a = b * inv;
                    }
                }
            }
            Some(m) => {
                let dpre: Vec<f64> = dpooled
                    .iter()
                    .zip(&tr.pooled)
                    .map(|(g, v)| g * (1.0 - v * v))
                    .collect();
                let (gw, gb) = grads.pair_mut(m.w, m.b);
                gw.add_outer(&dpre, h2);
                gb.add_assign(&dpre);
                store.value(m.w).t_matvec_acc(&dpre, &mut dh2);
            }
        }
        let g2 = lattice_backward(store, &self.second, &tr.second, &dh2, grads)?;
        let dh1: Vec<f64> = g2.inputs.iter().zip(&tr.hidden_mask).map(|(g, m)| g * m).collect();
        debug_assert_eq!(dh1.len(), tr.hd.len());
        lattice_backward(store, &self.first, &tr.first, &dh1, grads)?;
        Ok(loss)
    }
}

/// Posterior of the mean-pooled baseline in evaluation mode.
pub fn baseline_global_avg(store: &ParamStore, net: &BaselineNetwork, inputs: &[f64]) -> Result<Vec<f64>> {
    if net.pooling != Pooling::Average {
        return Err(Error::contract("baseline_global_avg needs a mean-pooled network"));
    }
    Ok(net.forward(store, inputs, None)?.posterior)
}
