//! Attention driven by a global context vector that is refined over iterations.
//!
//! A stream owns a global context memory `IF`, initialized from the first
//! lattice layer and refined over `N` attention iterations. In iteration `n`
//! every attention unit (a joint, or a body part for the coarse stream) at
//! every frame receives an informativeness score
//!
//! ```text
//! e = W_e1 tanh(W_e2 [rep; IF^(n-1)] + b_e2) + b_e1,   r = softmax over all units and frames
//! ```
//!
//! which gates a second lattice layer (or weights a soft-attention sum). The
//! resulting attention representation `F^(n)` refines the context:
//! `IF^(n) = relu(W_F^(n) [F^(n); IF^(n-1)] + b_F^(n))`. The final context is
//! classified with a softmax layer.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{
    dropout_mask, softmax_backward, softmax_flat, softmax_into, GradBuffer, InitScheme, ParamId, ParamStore,
    RngStream,
};
use crate::stlstm::{lattice_backward, lattice_forward, JointOrder, LatticeState, Schedule, StLstmParams};
use crate::twostream::BodyPartition;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttentionMode {
    /// Scores gate the cell update of a second lattice layer.
    Gate,
    /// Scores weight a sum of first-layer hidden vectors.
    Soft,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitMode {
    /// Mean of all first-layer hidden vectors.
    Average,
    /// `tanh` of one affine map over the concatenated hidden vectors.
    Feedforward,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AttentionConfig {
    pub n_iterations: usize,
    /// One score map for all steps of an iteration (otherwise one per step).
    pub share_within_iteration: bool,
    /// One score map for all iterations.
    pub share_across_iterations: bool,
    pub attention_mode: AttentionMode,
    pub init_mode: InitMode,
    pub score_hidden_dim: usize,
}

impl Default for AttentionConfig {
    fn default() -> Self {
        Self {
            n_iterations: 2,
            share_within_iteration: true,
            share_across_iterations: false,
            attention_mode: AttentionMode::Gate,
            init_mode: InitMode::Feedforward,
            score_hidden_dim: 128,
        }
    }
}

impl AttentionConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_iterations == 0 {
            return Err(Error::contract("attention needs at least one iteration"));
        }
        if self.score_hidden_dim == 0 {
            return Err(Error::contract("score hidden dimension must be positive"));
        }
        Ok(())
    }
}

/// The global context memory `IF^(n)`.
#[derive(Debug, Clone, PartialEq)]
pub struct GlobalContext {
    pub values: Vec<f64>,
    pub iteration: usize,
}

/// Normalized informativeness scores of one iteration, unit-major
/// (`unit * frames + frame`). Units are joints or body parts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttentionMap {
    pub iteration: usize,
    pub units: usize,
    pub frames: usize,
    pub values: Vec<f64>,
}

impl AttentionMap {
    pub fn get(&self, unit: usize, frame: usize) -> f64 {
        self.values[unit * self.frames + frame]
    }

    pub fn total(&self) -> f64 {
        self.values.iter().sum()
    }

    /// A map that puts the same weight on every entry.
    pub fn uniform(units: usize, frames: usize) -> Self {
        Self {
            iteration: 0,
            units,
            frames,
            values: vec![1.0 / (units * frames) as f64; units * frames],
        }
    }
}

/// Weight and bias of one affine map.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Dense {
    pub w: ParamId,
    pub b: ParamId,
}

impl Dense {
    pub fn new(
        store: &mut ParamStore,
        prefix: &str,
        out_dim: usize,
        in_dim: usize,
        init: InitScheme,
        rng: &mut RngStream,
    ) -> Self {
        let w = store.add_weight(format!("{prefix}.w"), out_dim, in_dim, init, rng);
        let b = store.add_bias(format!("{prefix}.b"), out_dim);
        Self { w, b }
    }

    fn check(&self, store: &ParamStore, op: &'static str, in_dim: usize) -> Result<()> {
        let (w, b) = (store.value(self.w), store.value(self.b));
        if w.cols() != in_dim || b.shape() != (w.rows(), 1) {
            return Err(Error::shape(
                op,
                format!(
                    "map is {}x{} with bias {}x{}, input has length {in_dim}",
                    w.rows(),
                    w.cols(),
                    b.rows(),
                    b.cols()
                ),
            ));
        }
        Ok(())
    }

    fn out_dim(&self, store: &ParamStore) -> usize {
        store.value(self.w).rows()
    }

    #[inline]
    fn apply(&self, store: &ParamStore, x: &[f64], out: &mut [f64]) {
        store.value(self.w).affine_into(store.value(self.b).as_slice(), x, out);
    }

    /// Accumulates weight gradients for `dout` and adds `W^T dout` into `dx`.
    #[inline]
    fn backward(&self, store: &ParamStore, x: &[f64], dout: &[f64], dx: Option<&mut [f64]>, grads: &mut GradBuffer) {
        let (gw, gb) = grads.pair_mut(self.w, self.b);
        gw.add_outer(dout, x);
        gb.add_assign(dout);
        if let Some(dx) = dx {
            store.value(self.w).t_matvec_acc(dout, dx);
        }
    }
}

/// `e = W_e1 tanh(W_e2 x + b_e2) + b_e1` for one attention slot.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ScoreMap {
    pub outer: Dense,
    pub inner: Dense,
}

impl ScoreMap {
    pub fn new(
        store: &mut ParamStore,
        prefix: &str,
        hidden: usize,
        score_hidden: usize,
        init: InitScheme,
        rng: &mut RngStream,
    ) -> Self {
        let inner_w = store.add_weight(format!("{prefix}.w_e2"), score_hidden, 2 * hidden, init, rng);
        let inner_b = store.add_bias(format!("{prefix}.b_e2"), score_hidden);
        let outer_w = store.add_weight(format!("{prefix}.w_e1"), 1, score_hidden, init, rng);
        let outer_b = store.add_bias(format!("{prefix}.b_e1"), 1);
        Self {
            outer: Dense { w: outer_w, b: outer_b },
            inner: Dense { w: inner_w, b: inner_b },
        }
    }
}

/// What a stream attends over.
#[derive(Debug, Clone, PartialEq)]
pub enum Units {
    Joints,
    Parts(BodyPartition),
}

impl Units {
    pub fn count(&self, joints: usize) -> usize {
        match self {
            Units::Joints => joints,
            Units::Parts(p) => p.num_parts(),
        }
    }

    /// Unit representations per frame, unit-major.
    fn reps(&self, hd: &[f64], frames: usize, d: usize) -> Vec<f64> {
        match self {
            Units::Joints => hd.to_vec(),
            Units::Parts(p) => crate::twostream::part_means(hd, p, frames, d),
        }
    }

    /// Expands a unit map to per-step gates of a `joints x frames` lattice.
    fn step_gates(&self, r: &[f64], joints: usize, frames: usize) -> Vec<f64> {
        match self {
            Units::Joints => r.to_vec(),
            Units::Parts(p) => {
                let mut g = vec![0.0; joints * frames];
                for j in 0..joints {
                    let u = p.part_of(j);
                    g[j * frames..(j + 1) * frames].copy_from_slice(&r[u * frames..(u + 1) * frames]);
                }
                g
            }
        }
    }

    /// Adds the gradient of unit representations into `dhd`.
    fn reps_backward(&self, drep: &[f64], frames: usize, d: usize, dhd: &mut [f64]) {
        match self {
            Units::Joints => {
                for (a, b) in dhd.iter_mut().zip(drep) {
                    *a += b;
                }
            }
            Units::Parts(p) => {
                for (u, joints) in p.parts().iter().enumerate() {
                    let inv = 1.0 / joints.len() as f64;
                    for &j in joints {
                        for t in 0..frames {
                            let src = &drep[(u * frames + t) * d..(u * frames + t + 1) * d];
                            let dst = &mut dhd[(j * frames + t) * d..(j * frames + t + 1) * d];
                            for (a, b) in dst.iter_mut().zip(src) {
                                *a += b * inv;
                            }
                        }
                    }
                }
            }
        }
    }

    fn step_gate_backward(&self, dgate: &[f64], joints: usize, frames: usize) -> Vec<f64> {
        match self {
            Units::Joints => dgate.to_vec(),
            Units::Parts(p) => {
                let mut dr = vec![0.0; p.num_parts() * frames];
                for j in 0..joints {
                    let u = p.part_of(j);
                    for t in 0..frames {
                        dr[u * frames + t] += dgate[j * frames + t];
                    }
                }
                dr
            }
        }
    }
}

/// Parameters of one attention stream.
#[derive(Debug, Clone)]
pub struct StreamParams {
    pub name: String,
    pub units: Units,
    pub init: Option<Dense>,
    /// Gated second layer; absent in soft-attention mode.
    pub second: Option<StLstmParams>,
    /// `scores[n - 1][slot]`: one slot when shared within an iteration,
    /// otherwise one per (unit, frame).
    pub scores: Vec<Vec<ScoreMap>>,
    /// `refine[n - 1]` is `W_F^(n)`.
    pub refine: Vec<Dense>,
    pub classifier: Dense,
}

/// Sizes shared by all parts of a network.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelDims {
    pub joints: usize,
    pub frames: usize,
    pub input_dim: usize,
    pub hidden: usize,
    pub classes: usize,
}

impl ModelDims {
    pub fn validate(&self) -> Result<()> {
        if self.joints == 0 || self.frames == 0 || self.input_dim == 0 || self.hidden == 0 {
            return Err(Error::contract(format!("degenerate model dimensions {self:?}")));
        }
        if self.classes < 2 {
            return Err(Error::contract("a classifier needs at least two classes"));
        }
        Ok(())
    }

    fn steps(&self) -> usize {
        self.joints * self.frames
    }
}

impl StreamParams {
    /// Allocates a stream. `tags` receives `(param, first iteration using it)`.
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        units: Units,
        dims: &ModelDims,
        cfg: &AttentionConfig,
        init: InitScheme,
        rng: &mut RngStream,
        tags: &mut Vec<(ParamId, usize)>,
    ) -> Self {
        let d = dims.hidden;
        let tag = |tags: &mut Vec<(ParamId, usize)>, dense: Dense, n: usize| {
            tags.push((dense.w, n));
            tags.push((dense.b, n));
        };
        let init_map = match cfg.init_mode {
            InitMode::Feedforward => {
                let m = Dense::new(store, &format!("{name}.init"), d, dims.steps() * d, init, rng);
                tag(tags, m, 0);
                Some(m)
            }
            InitMode::Average => None,
        };
        let second = match cfg.attention_mode {
            AttentionMode::Gate => {
                let p = StLstmParams::new(store, &format!("{name}.second"), d, d, init, rng);
                tags.push((p.w, 1));
                tags.push((p.b, 1));
                Some(p)
            }
            AttentionMode::Soft => None,
        };
        let slots = if cfg.share_within_iteration {
            1
        } else {
            units.count(dims.joints) * dims.frames
        };
        let mut scores: Vec<Vec<ScoreMap>> = Vec::with_capacity(cfg.n_iterations);
        for n in 1..=cfg.n_iterations {
            if cfg.share_across_iterations && n > 1 {
                scores.push(scores[0].clone());
                continue;
            }
            let base = if cfg.share_across_iterations {
                format!("{name}.score")
            } else {
                format!("{name}.score{n}")
            };
            let maps: Vec<ScoreMap> = (0..slots)
                .map(|s| {
                    let prefix = if slots == 1 { base.clone() } else { format!("{base}.slot{s}") };
                    let m = ScoreMap::new(store, &prefix, d, cfg.score_hidden_dim, init, rng);
                    tag(tags, m.inner, n);
                    tag(tags, m.outer, n);
                    m
                })
                .collect();
            scores.push(maps);
        }
        let refine = (1..=cfg.n_iterations)
            .map(|n| {
                let m = Dense::new(store, &format!("{name}.refine{n}"), d, 2 * d, init, rng);
                tag(tags, m, n);
                m
            })
            .collect();
        let classifier = Dense::new(store, &format!("{name}.classifier"), dims.classes, d, init, rng);
        tag(tags, classifier, 0);
        Self {
            name: name.to_string(),
            units,
            init: init_map,
            second,
            scores,
            refine,
            classifier,
        }
    }

    fn n_iterations(&self) -> usize {
        self.refine.len()
    }

    fn slot(&self, n: usize, q: usize) -> &ScoreMap {
        let maps = &self.scores[n - 1];
        if maps.len() == 1 {
            &maps[0]
        } else {
            &maps[q]
        }
    }
}

/// Forward intermediates of one stream over one sequence.
#[derive(Debug, Clone)]
pub struct StreamTrace {
    /// `contexts[n]` is `IF^(n)`.
    pub contexts: Vec<Vec<f64>>,
    reps: Vec<f64>,
    /// `score_hidden[n - 1]`: tanh activations per (unit, frame).
    score_hidden: Vec<Vec<f64>>,
    pub maps: Vec<AttentionMap>,
    second: Vec<Option<LatticeState>>,
    /// `features[n - 1]` is `F^(n)`.
    pub features: Vec<Vec<f64>>,
    refine_pre: Vec<Vec<f64>>,
    class_mask: Vec<f64>,
    pub logits: Vec<f64>,
    pub posterior: Vec<f64>,
}

/// Counts of lattice evaluations made by one forward pass.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct ForwardStats {
    pub first_layer_passes: usize,
    pub second_layer_passes: usize,
}

/// Training-time randomness; `None` means evaluation.
pub struct Dropout<'a> {
    pub p: f64,
    pub rng: &'a mut RngStream,
}

fn mean_hidden(hd: &[f64], d: usize) -> Vec<f64> {
    let steps = hd.len() / d;
    let mut out = vec![0.0; d];
    for h in hd.chunks_exact(d) {
        for (o, v) in out.iter_mut().zip(h) {
            *o += v;
        }
    }
    let inv = 1.0 / steps as f64;
    out.iter_mut().for_each(|v| *v *= inv);
    out
}

impl StreamParams {
    /// Runs initialization, `depth` attention iterations and the classifier
    /// on the (dropout-masked) first-layer hidden grid `hd`.
    pub(crate) fn forward(
        &self,
        store: &ParamStore,
        dims: &ModelDims,
        order: &JointOrder,
        hd: &[f64],
        depth: usize,
        dropout: Option<&mut Dropout<'_>>,
        stats: &mut ForwardStats,
    ) -> Result<StreamTrace> {
        if depth > self.n_iterations() {
            return Err(Error::contract(format!(
                "requested {depth} attention iterations, stream has {}",
                self.n_iterations()
            )));
        }
        let d = dims.hidden;
        let (jn, tn) = (dims.joints, dims.frames);
        let ctx0 = match &self.init {
            None => mean_hidden(hd, d),
            Some(m) => {
                m.check(store, "init_global_context_ffn", hd.len())?;
                let mut out = vec![0.0; d];
                m.apply(store, hd, &mut out);
                out.iter_mut().for_each(|v| *v = v.tanh());
                out
            }
        };
        let reps = self.units.reps(hd, tn, d);
        let nq = reps.len() / d;
        let mut tr = StreamTrace {
            contexts: vec![ctx0],
            reps,
            score_hidden: Vec::with_capacity(depth),
            maps: Vec::with_capacity(depth),
            second: Vec::with_capacity(depth),
            features: Vec::with_capacity(depth),
            refine_pre: Vec::with_capacity(depth),
            class_mask: Vec::new(),
            logits: Vec::new(),
            posterior: Vec::new(),
        };
        let mut cat = vec![0.0; 2 * d];
        for n in 1..=depth {
            let ctx = tr.contexts[n - 1].clone();
            // informativeness scores
            let de = store.value(self.slot(n, 0).inner.w).rows();
            let mut hidden = vec![0.0; nq * de];
            let mut e = vec![0.0; nq];
            cat[d..].copy_from_slice(&ctx);
            for q in 0..nq {
                let map = self.slot(n, q);
                cat[..d].copy_from_slice(&tr.reps[q * d..(q + 1) * d]);
                let s = &mut hidden[q * de..(q + 1) * de];
                map.inner.apply(store, &cat, s);
                s.iter_mut().for_each(|v| *v = v.tanh());
                let mut out = [0.0];
                map.outer.apply(store, s, &mut out);
                e[q] = out[0];
            }
            let mut r = vec![0.0; nq];
            softmax_into(&e, &mut r);
            // attention representation
            let (feature, state) = match self.second {
                Some(second) => {
                    let gates = self.units.step_gates(&r, jn, tn);
                    let st = lattice_forward(store, &second, hd, tn, order, Some(&gates), Schedule::RowMajor)?;
                    stats.second_layer_passes += 1;
                    (st.final_hidden().to_vec(), Some(st))
                }
                None => {
                    let mut f = vec![0.0; d];
                    for q in 0..nq {
                        for (o, v) in f.iter_mut().zip(&tr.reps[q * d..(q + 1) * d]) {
                            *o += r[q] * v;
                        }
                    }
                    (f, None)
                }
            };
            // refinement
            cat[..d].copy_from_slice(&feature);
            let mut pre = vec![0.0; d];
            self.refine[n - 1].apply(store, &cat, &mut pre);
            tr.contexts.push(pre.iter().map(|v| v.max(0.0)).collect());
            tr.refine_pre.push(pre);
            tr.features.push(feature);
            tr.second.push(state);
            tr.score_hidden.push(hidden);
            tr.maps.push(AttentionMap {
                iteration: n,
                units: nq / tn,
                frames: tn,
                values: r,
            });
        }
        let last = &tr.contexts[depth];
        tr.class_mask = match dropout {
            Some(dr) => dropout_mask(d, dr.p, Some(&mut *dr.rng))?,
            None => vec![1.0; d],
        };
        let x: Vec<f64> = last.iter().zip(&tr.class_mask).map(|(a, m)| a * m).collect();
        self.classifier.check(store, "classify", d)?;
        let mut logits = vec![0.0; self.classifier.out_dim(store)];
        self.classifier.apply(store, &x, &mut logits);
        tr.posterior = softmax_flat(&logits)?;
        tr.logits = logits;
        Ok(tr)
    }

    /// Backpropagates `dlogits`, accumulating parameter gradients and adding
    /// the gradient w.r.t. the first-layer grid into `dhd`.
    pub(crate) fn backward(
        &self,
        store: &ParamStore,
        dims: &ModelDims,
        hd: &[f64],
        tr: &StreamTrace,
        dlogits: &[f64],
        grads: &mut GradBuffer,
        dhd: &mut [f64],
    ) -> Result<()> {
        let d = dims.hidden;
        let (jn, tn) = (dims.joints, dims.frames);
        let depth = tr.maps.len();
        let last = &tr.contexts[depth];
        let x: Vec<f64> = last.iter().zip(&tr.class_mask).map(|(a, m)| a * m).collect();
        let mut dctx = vec![0.0; d];
        self.classifier.backward(store, &x, dlogits, Some(&mut dctx), grads);
        for (g, m) in dctx.iter_mut().zip(&tr.class_mask) {
            *g *= m;
        }
        let mut drep = vec![0.0; tr.reps.len()];
        let mut cat = vec![0.0; 2 * d];
        for n in (1..=depth).rev() {
            let prev = &tr.contexts[n - 1];
            // refinement
            let dpre: Vec<f64> = dctx
                .iter()
                .zip(&tr.refine_pre[n - 1])
                .map(|(g, p)| if *p > 0.0 { *g } else { 0.0 })
                .collect();
            cat[..d].copy_from_slice(&tr.features[n - 1]);
            cat[d..].copy_from_slice(prev);
            let mut dcat = vec![0.0; 2 * d];
            self.refine[n - 1].backward(store, &cat, &dpre, Some(&mut dcat), grads);
            let dfeature = &dcat[..d];
            let mut dprev = dcat[d..].to_vec();
            // attention representation
            let map = &tr.maps[n - 1];
            let nq = map.values.len();
            let dr = match (&self.second, &tr.second[n - 1]) {
                (Some(second), Some(st)) => {
                    let mut gh = vec![0.0; jn * tn * d];
                    let s = st.index(st.order().last(), tn - 1) * d;
                    gh[s..s + d].copy_from_slice(dfeature);
                    let lg = lattice_backward(store, second, st, &gh, grads)?;
                    for (a, b) in dhd.iter_mut().zip(&lg.inputs) {
                        *a += b;
                    }
                    self.units
                        .step_gate_backward(lg.gate.as_ref().expect("gated layer"), jn, tn)
                }
                _ => {
                    let mut dr = vec![0.0; nq];
                    for q in 0..nq {
                        let rep = &tr.reps[q * d..(q + 1) * d];
                        dr[q] = rep.iter().zip(dfeature).map(|(a, b)| a * b).sum();
                        for (g, f) in drep[q * d..(q + 1) * d].iter_mut().zip(dfeature) {
                            *g += map.values[q] * f;
                        }
                    }
                    dr
                }
            };
            // scores
            let mut de = vec![0.0; nq];
            softmax_backward(&map.values, &dr, &mut de);
            let hidden = &tr.score_hidden[n - 1];
            let dim_e = hidden.len() / nq;
            let mut dcat_q = vec![0.0; 2 * d];
            cat[d..].copy_from_slice(prev);
            for q in 0..nq {
                if de[q] == 0.0 {
                    continue;
                }
                let sm = self.slot(n, q);
                let s = &hidden[q * dim_e..(q + 1) * dim_e];
                let mut ds = vec![0.0; dim_e];
                sm.outer.backward(store, s, &de[q..q + 1], Some(&mut ds), grads);
                for (g, v) in ds.iter_mut().zip(s) {
                    *g *= 1.0 - v * v;
                }
                cat[..d].copy_from_slice(&tr.reps[q * d..(q + 1) * d]);
                dcat_q.iter_mut().for_each(|v| *v = 0.0);
                sm.inner.backward(store, &cat, &ds, Some(&mut dcat_q), grads);
                for (a, b) in drep[q * d..(q + 1) * d].iter_mut().zip(&dcat_q[..d]) {
                    *a += b;
                }
                for (a, b) in dprev.iter_mut().zip(&dcat_q[d..]) {
                    *a += b;
                }
            }
            dctx = dprev;
        }
        self.units.reps_backward(&drep, tn, d, dhd);
        // initialization
        match &self.init {
            None => {
                let inv = 1.0 / (jn * tn) as f64;
                for h in dhd.chunks_exact_mut(d) {
                    for (a, g) in h.iter_mut().zip(&dctx) {
                        *a += g * inv;
                    }
                }
            }
            Some(m) => {
                let dpre: Vec<f64> = dctx
                    .iter()
                    .zip(&tr.contexts[0])
                    .map(|(g, v)| g * (1.0 - v * v))
                    .collect();
                m.backward(store, hd, &dpre, Some(dhd), grads);
            }
        }
        Ok(())
    }
}

/// First lattice layer plus one or more attention streams whose posteriors
/// are averaged.
#[derive(Debug, Clone)]
pub struct AttentionNetwork {
    pub dims: ModelDims,
    pub config: AttentionConfig,
    pub order: JointOrder,
    pub first: StLstmParams,
    pub streams: Vec<StreamParams>,
    /// `(param, first training step that uses it)`.
    pub tags: Vec<(ParamId, usize)>,
}

/// Forward intermediates of an [`AttentionNetwork`].
#[derive(Debug, Clone)]
pub struct NetworkTrace {
    pub first: LatticeState,
    hidden_mask: Vec<f64>,
    /// First-layer hidden grid after dropout.
    pub hd: Vec<f64>,
    pub streams: Vec<StreamTrace>,
    pub posterior: Vec<f64>,
    pub stats: ForwardStats,
}

impl AttentionNetwork {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        dims: ModelDims,
        config: AttentionConfig,
        order: JointOrder,
        stream_units: Vec<(&str, Units)>,
        init: InitScheme,
        rng: &mut RngStream,
    ) -> Result<Self> {
        dims.validate()?;
        config.validate()?;
        if order.len() != dims.joints {
            return Err(Error::shape(
                "AttentionNetwork",
                format!("joint order has {} joints, model has {}", order.len(), dims.joints),
            ));
        }
        if stream_units.is_empty() {
            return Err(Error::contract("an attention network needs at least one stream"));
        }
        let mut tags = Vec::new();
        let first = StLstmParams::new(store, "first", dims.input_dim, dims.hidden, init, rng);
        tags.push((first.w, 0));
        tags.push((first.b, 0));
        let streams = stream_units
            .into_iter()
            .map(|(name, units)| {
                if let Units::Parts(p) = &units {
                    if p.joints() != dims.joints {
                        return Err(Error::shape(
                            "AttentionNetwork",
                            format!("partition covers {} joints, model has {}", p.joints(), dims.joints),
                        ));
                    }
                }
                Ok(StreamParams::new(store, name, units, &dims, &config, init, rng, &mut tags))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            dims,
            config,
            order,
            first,
            streams,
            tags,
        })
    }

    pub fn forward(
        &self,
        store: &ParamStore,
        inputs: &[f64],
        depth: usize,
        mut dropout: Option<Dropout<'_>>,
    ) -> Result<NetworkTrace> {
        let mut stats = ForwardStats::default();
        let first = lattice_forward(store, &self.first, inputs, self.dims.frames, &self.order, None, Schedule::RowMajor)?;
        stats.first_layer_passes += 1;
        let hidden_mask = match dropout.as_mut() {
            Some(dr) => dropout_mask(first.hidden_grid().len(), dr.p, Some(&mut *dr.rng))?,
            None => vec![1.0; first.hidden_grid().len()],
        };
        let hd: Vec<f64> = first.hidden_grid().iter().zip(&hidden_mask).map(|(h, m)| h * m).collect();
        let streams = self
            .streams
            .iter()
            .map(|s| s.forward(store, &self.dims, &self.order, &hd, depth, dropout.as_mut(), &mut stats))
            .collect::<Result<Vec<_>>>()?;
        let posterior = if streams.len() == 1 {
            streams[0].posterior.clone()
        } else {
            let posts: Vec<&[f64]> = streams.iter().map(|s| s.posterior.as_slice()).collect();
            crate::twostream::fuse_many(&posts)?
        };
        Ok(NetworkTrace {
            first,
            hidden_mask,
            hd,
            streams,
            posterior,
            stats,
        })
    }

    /// Negative log-likelihood of `label` under the fused posterior, with
    /// gradients accumulated into `grads`.
    pub fn backward(
        &self,
        store: &ParamStore,
        trace: &NetworkTrace,
        label: usize,
        grads: &mut GradBuffer,
    ) -> Result<f64> {
        let loss = crate::trainer::nll_loss(&trace.posterior, label)?;
        let py = trace.posterior[label];
        let k = trace.streams.len() as f64;
        let d = self.dims.hidden;
        let mut dhd = vec![0.0; trace.hd.len()];
        for (sp, st) in self.streams.iter().zip(&trace.streams) {
            let mut dlogits = vec![0.0; st.posterior.len()];
            if trace.streams.len() == 1 {
                for (i, (g, p)) in dlogits.iter_mut().zip(&st.posterior).enumerate() {
                    *g = p - if i == label { 1.0 } else { 0.0 };
                }
            } else if py > crate::trainer::PROB_FLOOR {
                let mut dp = vec![0.0; st.posterior.len()];
                dp[label] = -1.0 / (k * py);
                softmax_backward(&st.posterior, &dp, &mut dlogits);
            }
            sp.backward(store, &self.dims, &trace.hd, st, &dlogits, grads, &mut dhd)?;
        }
        for (g, m) in dhd.iter_mut().zip(&trace.hidden_mask) {
            *g *= m;
        }
        debug_assert_eq!(dhd.len(), self.dims.joints * self.dims.frames * d);
        lattice_backward(store, &self.first, &trace.first, &dhd, grads)?;
        Ok(loss)
    }

    pub fn max_depth(&self) -> usize {
        self.config.n_iterations
    }
}

// ---------------------------------------------------------------------------
// Single-operation entry points over explicit lattice states.
// ---------------------------------------------------------------------------

/// `IF^(0)` as the mean of all first-layer hidden vectors.
pub fn init_global_context_avg(first_layer: &LatticeState) -> GlobalContext {
    GlobalContext {
        values: mean_hidden(first_layer.hidden_grid(), first_layer.hidden()),
        iteration: 0,
    }
}

/// `IF^(0) = tanh(W h_all + b)` over the joint-major concatenation of all
/// first-layer hidden vectors.
pub fn init_global_context_ffn(store: &ParamStore, map: &Dense, first_layer: &LatticeState) -> Result<GlobalContext> {
    let h = first_layer.hidden_grid();
    map.check(store, "init_global_context_ffn", h.len())?;
    let mut out = vec![0.0; map.out_dim(store)];
    map.apply(store, h, &mut out);
    Ok(GlobalContext {
        values: out.iter().map(|v| v.tanh()).collect(),
        iteration: 0,
    })
}

/// Scores one `units x frames` grid of representations against a context.
/// `maps` holds one slot (shared) or one per entry.
pub fn score_units(
    store: &ParamStore,
    maps: &[ScoreMap],
    reps: &[f64],
    hidden: usize,
    frames: usize,
    ctx: &GlobalContext,
) -> Result<AttentionMap> {
    let nq = reps.len() / hidden;
    if ctx.values.len() != hidden || reps.len() % hidden != 0 || nq % frames != 0 {
        return Err(Error::shape(
            "informativeness_scores",
            format!("{} representation values, context {}, hidden {hidden}", reps.len(), ctx.values.len()),
        ));
    }
    if maps.len() != 1 && maps.len() != nq {
        return Err(Error::shape(
            "informativeness_scores",
            format!("{} score maps for {nq} entries", maps.len()),
        ));
    }
    let mut cat = vec![0.0; 2 * hidden];
    cat[hidden..].copy_from_slice(&ctx.values);
    let mut e = vec![0.0; nq];
    for q in 0..nq {
        let m = if maps.len() == 1 { &maps[0] } else { &maps[q] };
        m.inner.check(store, "informativeness_scores", 2 * hidden)?;
        cat[..hidden].copy_from_slice(&reps[q * hidden..(q + 1) * hidden]);
        let mut s = vec![0.0; m.inner.out_dim(store)];
        m.inner.apply(store, &cat, &mut s);
        s.iter_mut().for_each(|v| *v = v.tanh());
        m.outer.check(store, "informativeness_scores", s.len())?;
        let mut out = [0.0];
        m.outer.apply(store, &s, &mut out);
        e[q] = out[0];
    }
    Ok(AttentionMap {
        iteration: ctx.iteration + 1,
        units: nq / frames,
        frames,
        values: softmax_flat(&e)?,
    })
}

/// Joint-level scores `r_{j,t}` for iteration `ctx.iteration + 1`.
pub fn informativeness_scores(
    store: &ParamStore,
    maps: &[ScoreMap],
    first_layer: &LatticeState,
    ctx: &GlobalContext,
) -> Result<AttentionMap> {
    score_units(
        store,
        maps,
        first_layer.hidden_grid(),
        first_layer.hidden(),
        first_layer.frames(),
        ctx,
    )
}

/// Second layer gated by a joint-level map; returns the layer and `F^(n)`,
/// its hidden vector at the final step.
pub fn attended_lattice_forward(
    store: &ParamStore,
    second: &StLstmParams,
    first_layer: &LatticeState,
    attn: &AttentionMap,
) -> Result<(LatticeState, Vec<f64>)> {
    if attn.units != first_layer.joints() || attn.frames != first_layer.frames() {
        return Err(Error::shape(
            "attended_lattice_forward",
            format!(
                "map is {}x{}, lattice is {}x{}",
                attn.units,
                attn.frames,
                first_layer.joints(),
                first_layer.frames()
            ),
        ));
    }
    let st = lattice_forward(
        store,
        second,
        first_layer.hidden_grid(),
        first_layer.frames(),
        first_layer.order(),
        Some(&attn.values),
        Schedule::RowMajor,
    )?;
    let f = st.final_hidden().to_vec();
    Ok((st, f))
}

/// `IF^(n) = relu(W_F^(n) [F^(n); IF^(n-1)] + b)` using the iteration's own map.
pub fn refine_global_context(
    store: &ParamStore,
    stream: &StreamParams,
    feature: &[f64],
    ctx: &GlobalContext,
) -> Result<GlobalContext> {
    let n = ctx.iteration + 1;
    if n > stream.refine.len() {
        return Err(Error::contract(format!(
            "refinement {n} exceeds the configured {} iterations",
            stream.refine.len()
        )));
    }
    let mut cat = feature.to_vec();
    cat.extend_from_slice(&ctx.values);
    let m = &stream.refine[n - 1];
    m.check(store, "refine_global_context", cat.len())?;
    let mut pre = vec![0.0; m.out_dim(store)];
    m.apply(store, &cat, &mut pre);
    Ok(GlobalContext {
        values: pre.iter().map(|v| v.max(0.0)).collect(),
        iteration: n,
    })
}

/// `softmax(W_c IF + b_c)`.
pub fn classify(store: &ParamStore, classifier: &Dense, ctx: &GlobalContext) -> Result<Vec<f64>> {
    classifier.check(store, "classify", ctx.values.len())?;
    let mut logits = vec![0.0; classifier.out_dim(store)];
    classifier.apply(store, &ctx.values, &mut logits);
    softmax_flat(&logits)
}

/// `sum_{j,t} r_{j,t} h_{j,t}` over the first layer.
pub fn soft_attention_representation(first_layer: &LatticeState, attn: &AttentionMap) -> Result<Vec<f64>> {
    if attn.units != first_layer.joints() || attn.frames != first_layer.frames() {
        return Err(Error::shape(
            "soft_attention_representation",
            format!(
                "map is {}x{}, lattice is {}x{}",
                attn.units,
                attn.frames,
                first_layer.joints(),
                first_layer.frames()
            ),
        ));
    }
    let d = first_layer.hidden();
    let mut out = vec![0.0; d];
    for (r, h) in attn.values.iter().zip(first_layer.hidden_grid().chunks_exact(d)) {
        for (o, v) in out.iter_mut().zip(h) {
            *o += r * v;
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Matrix;

    fn toy_dims() -> ModelDims {
        ModelDims {
            joints: 3,
            frames: 4,
            input_dim: 3,
            hidden: 5,
            classes: 3,
        }
    }

    fn toy_lattice(seed: u64, dims: &ModelDims) -> (ParamStore, StLstmParams, LatticeState) {
        let mut rng = RngStream::new(seed);
        let mut store = ParamStore::new();
        let p = StLstmParams::new(&mut store, "first", dims.input_dim, dims.hidden, InitScheme::Gaussian { std: 0.5 }, &mut rng);
        let x: Vec<f64> = (0..dims.joints * dims.frames * dims.input_dim).map(|_| rng.normal(0.0, 1.0)).collect();
        let st = lattice_forward(&store, &p, &x, dims.frames, &JointOrder::identity(dims.joints), None, Schedule::RowMajor).unwrap();
        (store, p, st)
    }

    #[test]
    fn average_init_cases() {
        let dims = toy_dims();
        let (_, _, st) = toy_lattice(1, &dims);
        let ctx = init_global_context_avg(&st);
        let d = dims.hidden;
        for m in 0..d {
            let mut naive = 0.0;
            for j in 0..dims.joints {
                for t in 0..dims.frames {
                    naive += st.h(j, t)[m];
                }
            }
            naive /= (dims.joints * dims.frames) as f64;
            assert!((ctx.values[m] - naive).abs() < 1e-15);
        }
        assert_eq!(mean_hidden(&[1.0, 2.0, 3.0, 4.0], 2), vec![2.0, 3.0]);
        assert_eq!(mean_hidden(&[0.25, -1.0, 0.25, -1.0, 0.25, -1.0], 2), vec![0.25, -1.0]);
    }

    #[test]
    fn feedforward_init_cases() {
        let dims = toy_dims();
        let (mut store, _, st) = toy_lattice(2, &dims);
        let mut rng = RngStream::new(3);
        let n_in = dims.joints * dims.frames * dims.hidden;
        let map = Dense::new(&mut store, "init", dims.hidden, n_in, InitScheme::Gaussian { std: 0.2 }, &mut rng);
        for v in store.get_mut(map.b).value.as_mut_slice() {
            *v = rng.normal(0.0, 1.0);
        }
        let got = init_global_context_ffn(&store, &map, &st).unwrap();
        let want: Vec<f64> = crate::numerics::affine(store.value(map.w), store.value(map.b), st.hidden_grid())
            .unwrap()
            .iter()
            .map(|v| v.tanh())
            .collect();
        for (g, w) in got.values.iter().zip(&want) {
            assert!((g - w).abs() < 1e-14);
        }
        store.get_mut(map.w).value.fill(0.0);
        let got = init_global_context_ffn(&store, &map, &st).unwrap();
        let tb: Vec<f64> = store.value(map.b).as_slice().iter().map(|v| v.tanh()).collect();
        assert_eq!(got.values, tb);

        // identity-like weights on a single-step lattice
        let one = ModelDims { joints: 1, frames: 1, ..dims };
        let (mut s1, _, st1) = toy_lattice(4, &one);
        let m1 = Dense::new(&mut s1, "init", one.hidden, one.hidden, InitScheme::UniformScaled, &mut rng);
        s1.get_mut(m1.w).value = Matrix::identity(one.hidden);
        let got = init_global_context_ffn(&s1, &m1, &st1).unwrap();
        let want: Vec<f64> = st1.h(0, 0).iter().map(|v| v.tanh()).collect();
        assert_eq!(got.values, want);

        // a lattice of the wrong size is rejected
        let (_, _, other) = toy_lattice(5, &ModelDims { frames: 5, ..dims });
        assert!(matches!(init_global_context_ffn(&store, &map, &other), Err(Error::Shape { .. })));
    }

    fn score_map(store: &mut ParamStore, d: usize, de: usize, seed: u64) -> ScoreMap {
        let mut rng = RngStream::new(seed);
        let m = ScoreMap::new(store, "score", d, de, InitScheme::Gaussian { std: 0.7 }, &mut rng);
        for id in [m.inner.b, m.outer.b] {
            for v in store.get_mut(id).value.as_mut_slice() {
                *v = rng.normal(0.0, 0.5);
            }
        }
        m
    }

    #[test]
    fn zero_outer_weights_give_uniform_scores() {
        let dims = toy_dims();
        let (mut store, _, st) = toy_lattice(6, &dims);
        let m = score_map(&mut store, dims.hidden, 4, 7);
        store.get_mut(m.outer.w).value.fill(0.0);
        let ctx = GlobalContext { values: vec![0.3; dims.hidden], iteration: 0 };
        let map = informativeness_scores(&store, &[m], &st, &ctx).unwrap();
        assert_eq!(map.iteration, 1);
        for v in &map.values {
            assert!((v - 1.0 / 12.0).abs() < 1e-15);
        }
        assert!((map.values[0] - 0.083_33).abs() < 1e-5);
    }

    #[test]
    fn scores_match_direct_composition() {
        let dims = toy_dims();
        let (mut store, _, st) = toy_lattice(8, &dims);
        let m = score_map(&mut store, dims.hidden, 4, 9);
        let ctx = GlobalContext { values: (0..dims.hidden).map(|i| 0.1 * i as f64 - 0.2).collect(), iteration: 0 };
        let map = informativeness_scores(&store, &[m], &st, &ctx).unwrap();
        let mut e = Vec::new();
        for j in 0..dims.joints {
            for t in 0..dims.frames {
                let mut x = st.h(j, t).to_vec();
                x.extend_from_slice(&ctx.values);
                let a = crate::numerics::affine(store.value(m.inner.w), store.value(m.inner.b), &x).unwrap();
                let s: Vec<f64> = a.iter().map(|v| v.tanh()).collect();
                e.push(crate::numerics::affine(store.value(m.outer.w), store.value(m.outer.b), &s).unwrap()[0]);
            }
        }
        let z: f64 = e.iter().map(|v| v.exp()).sum();
        for (r, ev) in map.values.iter().zip(&e) {
            assert!((r - ev.exp() / z).abs() < 1e-14);
        }
        // a constant shift of every score leaves the map unchanged
        store.get_mut(m.outer.b).value.as_mut_slice()[0] += 3.7;
        let shifted = informativeness_scores(&store, &[m], &st, &ctx).unwrap();
        for (a, b) in shifted.values.iter().zip(&map.values) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn soft_attention_cases() {
        let dims = toy_dims();
        let (_, _, st) = toy_lattice(10, &dims);
        let uni = AttentionMap::uniform(dims.joints, dims.frames);
        let soft = soft_attention_representation(&st, &uni).unwrap();
        let avg = init_global_context_avg(&st).values;
        for (a, b) in soft.iter().zip(&avg) {
            assert!((a - b).abs() < 1e-15);
        }
        let mut one_hot = AttentionMap::uniform(dims.joints, dims.frames);
        one_hot.values.iter_mut().for_each(|v| *v = 0.0);
        one_hot.values[st.index(2, 1)] = 1.0;
        assert_eq!(soft_attention_representation(&st, &one_hot).unwrap(), st.h(2, 1));
        let mut rng = RngStream::new(11);
        let raw: Vec<f64> = (0..12).map(|_| rng.normal(0.0, 1.0)).collect();
        let map = AttentionMap { iteration: 1, units: 3, frames: 4, values: softmax_flat(&raw).unwrap() };
        let got = soft_attention_representation(&st, &map).unwrap();
        for m in 0..dims.hidden {
            let mut naive = 0.0;
            for j in 0..3 {
                for t in 0..4 {
                    naive += map.get(j, t) * st.h(j, t)[m];
                }
            }
            assert!((got[m] - naive).abs() < 1e-15);
        }
        assert!(soft_attention_representation(&st, &AttentionMap::uniform(4, 4)).is_err());
    }

    fn toy_stream(gate: AttentionMode) -> (ParamStore, StreamParams, LatticeState, ModelDims) {
        let dims = toy_dims();
        let (mut store, _, st) = toy_lattice(12, &dims);
        let mut rng = RngStream::new(13);
        let cfg = AttentionConfig {
            score_hidden_dim: 4,
            attention_mode: gate,
            ..AttentionConfig::default()
        };
        let mut tags = Vec::new();
        let sp = StreamParams::new(&mut store, "fine", Units::Joints, &dims, &cfg, InitScheme::Gaussian { std: 0.5 }, &mut rng, &mut tags);
        (store, sp, st, dims)
    }

    #[test]
    fn gate_boundaries_and_half_gate() {
        let (store, sp, st, dims) = toy_stream(AttentionMode::Gate);
        let second = sp.second.unwrap();
        let (jn, tn, d) = (dims.joints, dims.frames, dims.hidden);
        // r = 1 and r = 0 at selected steps, 0.5 elsewhere
        let mut map = AttentionMap { iteration: 1, units: jn, frames: tn, values: vec![0.5; jn * tn] };
        map.values[st.index(1, 2)] = 1.0;
        map.values[st.index(2, 3)] = 0.0;
        let (out, _) = attended_lattice_forward(&store, &second, &st, &map).unwrap();
        let check = |j: usize, t: usize| {
            let g = out.gates_at(j, t).unwrap();
            let (i, fs, ft, u) = (&g[..d], &g[d..2 * d], &g[2 * d..3 * d], &g[4 * d..]);
            let zero = vec![0.0; d];
            let cl = if j > 0 { out.c(j - 1, t) } else { &zero[..] };
            let cp = if t > 0 { out.c(j, t - 1) } else { &zero[..] };
            (i.to_vec(), fs.to_vec(), ft.to_vec(), u.to_vec(), cl.to_vec(), cp.to_vec())
        };
        let (i, _, _, u, _, _) = check(1, 2);
        let iu: Vec<f64> = i.iter().zip(&u).map(|(a, b)| a * b).collect();
        assert_eq!(out.c(1, 2), &iu[..]);
        let (_, fs, ft, _, cl, cp) = check(2, 3);
        let hist: Vec<f64> = (0..d).map(|m| fs[m] * cl[m] + ft[m] * cp[m]).collect();
        assert_eq!(out.c(2, 3), &hist[..]);
        let (i, fs, ft, u, cl, cp) = check(0, 1);
        for m in 0..d {
            let want = 0.5 * i[m] * u[m] + 0.5 * fs[m] * cl[m] + 0.5 * ft[m] * cp[m];
            assert!((out.c(0, 1)[m] - want).abs() < 1e-15);
        }
    }

    #[test]
    fn refinement_cases() {
        let (mut store, sp, _, dims) = toy_stream(AttentionMode::Gate);
        let d = dims.hidden;
        let f: Vec<f64> = (0..d).map(|i| i as f64 - 2.0).collect();
        let ctx = GlobalContext { values: vec![0.7; d], iteration: 0 };
        let m = sp.refine[0];
        let mut rng = RngStream::new(1);
        for v in store.get_mut(m.b).value.as_mut_slice() {
            *v = rng.normal(0.0, 1.0);
        }
        let got = refine_global_context(&store, &sp, &f, &ctx).unwrap();
        let mut cat = f.clone();
        cat.extend_from_slice(&ctx.values);
        let want = crate::numerics::relu(&crate::numerics::affine(store.value(m.w), store.value(m.b), &cat).unwrap());
        assert_eq!(got.values, want);
        assert_eq!(got.iteration, 1);

        store.get_mut(m.b).value.fill(0.0);
        store.get_mut(m.w).value.fill(0.0);
        assert!(refine_global_context(&store, &sp, &f, &ctx).unwrap().values.iter().all(|&v| v == 0.0));
        let w = store.get_mut(m.w);
        for r in 0..d {
            w.value.set(r, r, 1.0);
        }
        assert_eq!(refine_global_context(&store, &sp, &f, &ctx).unwrap().values, crate::numerics::relu(&f));
        let late = GlobalContext { values: vec![0.0; d], iteration: 2 };
        assert!(matches!(refine_global_context(&store, &sp, &f, &late), Err(Error::Contract(_))));
    }

    #[test]
    fn classifier_cases() {
        let (mut store, sp, _, dims) = toy_stream(AttentionMode::Gate);
        let c = sp.classifier;
        let ctx = GlobalContext { values: vec![1.0; dims.hidden], iteration: 2 };
        let p = classify(&store, &c, &ctx).unwrap();
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        store.get_mut(c.w).value.fill(0.0);
        let p = classify(&store, &c, &ctx).unwrap();
        assert!(p.iter().all(|v| (v - 1.0 / 3.0).abs() < 1e-15));

        let mut s2 = ParamStore::new();
        let two = Dense::new(&mut s2, "c", 2, 1, InitScheme::UniformScaled, &mut RngStream::new(0));
        s2.get_mut(two.w).value = Matrix::column(&[3f64.ln(), 0.0]);
        let p = classify(&s2, &two, &GlobalContext { values: vec![1.0], iteration: 0 }).unwrap();
        assert!((p[0] - 0.75).abs() < 1e-15 && (p[1] - 0.25).abs() < 1e-15);
    }
}
