//! Model variants behind one interface.

use serde::{Deserialize, Serialize};

use crate::baseline::{BaselineNetwork, BaselineTrace, Pooling};
use crate::data::SkeletonSequence;
use crate::error::{Error, Result};
use crate::gca::{AttentionConfig, AttentionMap, AttentionNetwork, Dropout, ModelDims, NetworkTrace, Units};
use crate::numerics::{
    finite_diff_check, GradBuffer, GradCheckOptions, GradCheckReport, InitScheme, ParamId, ParamStore, RngStream,
};
use crate::stlstm::JointOrder;
use crate::twostream::BodyPartition;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    /// One joint-level attention stream.
    Gca,
    /// Joint-level and part-level streams over a shared first layer.
    TwoStream,
    /// Baseline pooling second-layer states with a feedforward map.
    BaselineGlobal1,
    /// Baseline averaging second-layer states.
    BaselineGlobal2,
}

impl std::str::FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "gca" => Ok(Variant::Gca),
            "two_stream" => Ok(Variant::TwoStream),
            "baseline_global_1" => Ok(Variant::BaselineGlobal1),
            "baseline_global_2" => Ok(Variant::BaselineGlobal2),
            _ => Err(Error::contract(format!("unknown model variant `{s}`"))),
        }
    }
}

/// Which streams of a two-stream model contribute to its prediction.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StreamSelection {
    #[default]
    Both,
    Fine,
    Coarse,
}

impl std::str::FromStr for StreamSelection {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "both" => Ok(StreamSelection::Both),
            "fine" => Ok(StreamSelection::Fine),
            "coarse" => Ok(StreamSelection::Coarse),
            _ => Err(Error::contract(format!("unknown stream selection `{s}`"))),
        }
    }
}

/// Everything needed to rebuild a model's structure.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub variant: Variant,
    pub dims: ModelDims,
    pub attention: AttentionConfig,
    #[serde(default)]
    pub streams: StreamSelection,
    /// Body parts for the coarse stream; unused by other variants.
    #[serde(default)]
    pub partition: Vec<Vec<usize>>,
    /// Joint chain order; empty means `0..joints`.
    #[serde(default)]
    pub joint_order: Vec<usize>,
    #[serde(default)]
    pub init: InitScheme,
    #[serde(default)]
    pub seed: u64,
}

#[derive(Debug, Clone)]
enum Net {
    Attention(AttentionNetwork),
    Baseline(BaselineNetwork),
}

#[derive(Debug, Clone)]
pub struct Model {
    pub spec: ModelSpec,
    pub store: ParamStore,
    net: Net,
}

/// Forward intermediates of a [`Model`].
#[derive(Debug, Clone)]
pub enum Trace {
    Attention(NetworkTrace),
    Baseline(BaselineTrace),
}

impl Trace {
    pub fn posterior(&self) -> &[f64] {
        match self {
            Trace::Attention(t) => &t.posterior,
            Trace::Baseline(t) => &t.posterior,
        }
    }

    /// Attention maps of every iteration, per stream.
    pub fn attention_maps(&self) -> Vec<&[AttentionMap]> {
        match self {
            Trace::Attention(t) => t.streams.iter().map(|s| s.maps.as_slice()).collect(),
            Trace::Baseline(_) => Vec::new(),
        }
    }

    pub fn network(&self) -> Option<&NetworkTrace> {
        match self {
            Trace::Attention(t) => Some(t),
            Trace::Baseline(_) => None,
        }
    }
}

impl Model {
    pub fn new(spec: ModelSpec) -> Result<Self> {
        let mut store = ParamStore::new();
        let mut rng = RngStream::new(spec.seed);
        let order = if spec.joint_order.is_empty() {
            JointOrder::identity(spec.dims.joints)
        } else {
            JointOrder::new(spec.joint_order.clone())?
        };
        let net = match spec.variant {
            Variant::Gca | Variant::TwoStream => {
                let mut streams = Vec::new();
                let fine = spec.variant == Variant::Gca || spec.streams != StreamSelection::Coarse;
                let coarse = spec.variant == Variant::TwoStream && spec.streams != StreamSelection::Fine;
                if fine {
                    streams.push(("joint", Units::Joints));
                }
                if coarse {
                    let p = BodyPartition::new(spec.dims.joints, spec.partition.clone())?;
                    streams.push(("part", Units::Parts(p)));
                }
                Net::Attention(AttentionNetwork::new(
                    &mut store,
                    spec.dims,
                    spec.attention.clone(),
                    order,
                    streams,
                    spec.init,
                    &mut rng,
                )?)
            }
            Variant::BaselineGlobal1 | Variant::BaselineGlobal2 => {
                let pooling = if spec.variant == Variant::BaselineGlobal1 {
                    Pooling::Feedforward
                } else {
                    Pooling::Average
                };
                Net::Baseline(BaselineNetwork::new(&mut store, spec.dims, order, pooling, spec.init, &mut rng)?)
            }
        };
        Ok(Self { spec, store, net })
    }

    /// Number of attention iterations (zero for baselines).
    pub fn max_depth(&self) -> usize {
        match &self.net {
            Net::Attention(n) => n.max_depth(),
            Net::Baseline(_) => 0,
        }
    }

    pub fn attention_network(&self) -> Option<&AttentionNetwork> {
        match &self.net {
            Net::Attention(n) => Some(n),
            Net::Baseline(_) => None,
        }
    }

    fn check_input(&self, seq: &SkeletonSequence) -> Result<()> {
        let d = &self.spec.dims;
        if seq.joints != d.joints || seq.frames != d.frames || d.input_dim != 3 {
            return Err(Error::shape(
                "Model::forward",
                format!(
                    "sequence `{}` is {}x{}, model expects {}x{}",
                    seq.id, seq.joints, seq.frames, d.joints, d.frames
                ),
            ));
        }
        Ok(())
    }

    /// Forward pass through `depth` attention iterations. Passing a dropout
    /// rate and generator selects training mode.
    pub fn forward(
        &self,
        seq: &SkeletonSequence,
        depth: usize,
        dropout: Option<(f64, &mut RngStream)>,
    ) -> Result<Trace> {
        self.check_input(seq)?;
        match &self.net {
            Net::Attention(n) => {
                let dr = dropout.map(|(p, rng)| Dropout { p, rng });
                Ok(Trace::Attention(n.forward(&self.store, &seq.coords, depth, dr)?))
            }
            Net::Baseline(n) => Ok(Trace::Baseline(n.forward(&self.store, &seq.coords, dropout)?)),
        }
    }

    /// Loss of `label` for a trace, accumulating gradients into `grads`.
    pub fn backward(&self, trace: &Trace, label: usize, grads: &mut GradBuffer) -> Result<f64> {
        match (&self.net, trace) {
            (Net::Attention(n), Trace::Attention(t)) => n.backward(&self.store, t, label, grads),
            (Net::Baseline(n), Trace::Baseline(t)) => n.backward(&self.store, t, label, grads),
            _ => Err(Error::contract("trace does not belong to this model")),
        }
    }

    /// Posterior at full depth in evaluation mode.
    pub fn predict(&self, seq: &SkeletonSequence) -> Result<Vec<f64>> {
        Ok(self.forward(seq, self.max_depth(), None)?.posterior().to_vec())
    }

    /// First training step in which each parameter takes part.
    pub fn param_steps(&self) -> Vec<(ParamId, usize)> {
        match &self.net {
            Net::Attention(n) => n.tags.clone(),
            Net::Baseline(n) => n.params().into_iter().map(|p| (p, 0)).collect(),
        }
    }

    /// Freezes every parameter not used by attention iterations `0..=step`.
    pub fn set_trainable_for_step(&mut self, step: usize) {
        self.store.set_all_trainable(false);
        for (id, s) in self.param_steps() {
            if s <= step {
                self.store.get_mut(id).trainable = true;
            }
        }
    }

    /// Summed full-depth evaluation loss over `seqs`.
    pub fn eval_loss(&self, store: &ParamStore, seqs: &[SkeletonSequence]) -> Result<f64> {
        let mut total = 0.0;
        for s in seqs {
            let tr = self.forward_with(store, s)?;
            total += crate::trainer::nll_loss(tr.posterior(), s.label)?;
        }
        Ok(total)
    }

    fn forward_with(&self, store: &ParamStore, seq: &SkeletonSequence) -> Result<Trace> {
        self.check_input(seq)?;
        let depth = self.max_depth();
        match &self.net {
            Net::Attention(n) => Ok(Trace::Attention(n.forward(store, &seq.coords, depth, None)?)),
            Net::Baseline(n) => Ok(Trace::Baseline(n.forward(store, &seq.coords, None)?)),
        }
    }

    /// Writes the gradient of the summed full-depth loss into the stored
    /// gradients and returns the loss.
    pub fn compute_grads(&mut self, seqs: &[SkeletonSequence]) -> Result<f64> {
        let mut grads = GradBuffer::for_store(&self.store);
        let mut total = 0.0;
        for s in seqs {
            let tr = self.forward(s, self.max_depth(), None)?;
            total += self.backward(&tr, s.label, &mut grads)?;
        }
        self.store.zero_grads();
        self.store.accumulate_grads(&grads, 1.0);
        Ok(total)
    }
}

/// Compares analytic and central-difference gradients of the summed loss
/// over `seqs`. `inject_bug` corrupts the analytic gradient of the first
/// layer's weights so the check can be seen to fail.
pub fn gradcheck_model(
    model: &mut Model,
    seqs: &[SkeletonSequence],
    opts: &GradCheckOptions,
    inject_bug: bool,
) -> Result<GradCheckReport> {
    model.store.set_all_trainable(true);
    model.compute_grads(seqs)?;
    if inject_bug {
        let id = model
            .store
            .find("first.w")
            .ok_or_else(|| Error::contract("model has no first-layer weights"))?;
        for g in model.store.get_mut(id).grad.as_mut_slice() {
            *g *= 1.1;
        }
    }
    let shape = model.clone();
    let mut store = std::mem::take(&mut model.store);
    let report = finite_diff_check(
        |s| shape.eval_loss(s, seqs).unwrap_or(f64::NAN),
        &mut store,
        opts,
    );
    model.store = store;
    report
}

/// Replaces every parameter value with a draw from `N(0, std^2)`.
pub fn jitter_params(store: &mut ParamStore, std: f64, rng: &mut RngStream) {
    for t in store.iter_mut() {
        for v in t.value.as_mut_slice() {
            *v = rng.normal(0.0, std);
        }
    }
}
