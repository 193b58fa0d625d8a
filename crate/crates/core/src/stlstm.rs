//! Spatio-temporal LSTM lattice.
//!
//! Every unit `(j, t)` sees the joint input `x_{j,t}`, the spatial
//! predecessor (previous joint in the chain, same frame) and the temporal
//! predecessor (same joint, previous frame). It has one input gate, two
//! forget gates (spatial and temporal), an output gate and a modulated
//! input:
//!
//! ```text
//! (i, fS, fT, o, u) = (sig, sig, sig, sig, tanh)(W [x; h_left; h_prev] + b)
//! c = i*u + fS*c_left + fT*c_prev
//! h = o * tanh(c)
//! ```
//!
//! An optional per-step informativeness gate `r` turns the cell update into
//! `c = r*(i*u) + (1-r)*(fS*c_left) + (1-r)*(fT*c_prev)`.
//!
//! All grids are indexed by joint id, joint-major: step `(j, t)` lives at
//! `j * frames + t`. The spatial chain is given by a [`JointOrder`].

use crate::error::{Error, Result};
use crate::numerics::{sigmoid_scalar, GradBuffer, InitScheme, Matrix, ParamId, ParamStore, RngStream};

/// Spatial chain: `order[k]` is the joint fed at chain position `k`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct JointOrder {
    order: Vec<usize>,
}

impl JointOrder {
    pub fn identity(joints: usize) -> Self {
        Self {
            order: (0..joints).collect(),
        }
    }

    pub fn new(order: Vec<usize>) -> Result<Self> {
        let mut seen = vec![false; order.len()];
        for &j in &order {
            if j >= order.len() || seen[j] {
                return Err(Error::contract(format!(
                    "joint order {order:?} is not a permutation of 0..{}",
                    order.len()
                )));
            }
            seen[j] = true;
        }
        Ok(Self { order })
    }

    pub fn len(&self) -> usize {
        self.order.len()
    }

    pub fn is_empty(&self) -> bool {
        self.order.is_empty()
    }

    pub fn as_slice(&self) -> &[usize] {
        &self.order
    }

    /// Last joint of the chain.
    pub fn last(&self) -> usize {
        *self.order.last().expect("non-empty joint order")
    }
}

/// Gate weights of one ST-LSTM layer. Output blocks are ordered
/// `(i, fS, fT, o, u)`, each of size `hidden`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StLstmParams {
    pub w: ParamId,
    pub b: ParamId,
    pub input_dim: usize,
    pub hidden: usize,
}

impl StLstmParams {
    pub fn new(
        store: &mut ParamStore,
        prefix: &str,
        input_dim: usize,
        hidden: usize,
        init: InitScheme,
        rng: &mut RngStream,
    ) -> Self {
        let w = store.add_weight(
            format!("{prefix}.w"),
            5 * hidden,
            input_dim + 2 * hidden,
            init,
            rng,
        );
        let b = store.add_bias(format!("{prefix}.b"), 5 * hidden);
        Self {
            w,
            b,
            input_dim,
            hidden,
        }
    }

    fn concat_len(&self) -> usize {
        self.input_dim + 2 * self.hidden
    }

    fn check(&self, store: &ParamStore) -> Result<()> {
        let w = store.value(self.w);
        let b = store.value(self.b);
        if w.shape() != (5 * self.hidden, self.concat_len()) || b.shape() != (5 * self.hidden, 1) {
            return Err(Error::shape(
                "stlstm",
                format!(
                    "expected W {}x{} and b {}x1, found W {}x{} and b {}x{}",
                    5 * self.hidden,
                    self.concat_len(),
                    5 * self.hidden,
                    w.rows(),
                    w.cols(),
                    b.rows(),
                    b.cols()
                ),
            ));
        }
        Ok(())
    }
}

/// Gate activations of one unit, kept for the backward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct CellCache {
    /// `[x; h_left; h_prev]`
    pub input: Vec<f64>,
    /// Activated `(i, fS, fT, o, u)`.
    pub gates: Vec<f64>,
    pub tanh_c: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CellOutput {
    pub c: Vec<f64>,
    pub h: Vec<f64>,
    pub cache: CellCache,
}

/// Evaluates a single unit. `gate = None` is the plain update.
#[allow(clippy::too_many_arguments)]
pub fn stlstm_cell_forward(
    store: &ParamStore,
    params: &StLstmParams,
    x: &[f64],
    h_left: &[f64],
    h_prev: &[f64],
    c_left: &[f64],
    c_prev: &[f64],
    gate: Option<f64>,
) -> Result<CellOutput> {
    params.check(store)?;
    let d = params.hidden;
    if x.len() != params.input_dim
        || [h_left, h_prev, c_left, c_prev].iter().any(|v| v.len() != d)
    {
        return Err(Error::shape(
            "stlstm_cell_forward",
            format!(
                "x {} (want {}), h_left {}, h_prev {}, c_left {}, c_prev {} (want {d})",
                x.len(),
                params.input_dim,
                h_left.len(),
                h_prev.len(),
                c_left.len(),
                c_prev.len()
            ),
        ));
    }
    let mut input = Vec::with_capacity(params.concat_len());
    input.extend_from_slice(x);
    input.extend_from_slice(h_left);
    input.extend_from_slice(h_prev);
    let mut pre = vec![0.0; 5 * d];
    let mut gates = vec![0.0; 5 * d];
    let mut c = vec![0.0; d];
    let mut tanh_c = vec![0.0; d];
    let mut h = vec![0.0; d];
    cell_step(
        store.value(params.w),
        store.value(params.b).as_slice(),
        &input,
        c_left,
        c_prev,
        gate,
        &mut pre,
        &mut gates,
        &mut c,
        &mut tanh_c,
        &mut h,
    );
    Ok(CellOutput {
        c,
        h,
        cache: CellCache {
            input,
            gates,
            tanh_c,
        },
    })
}

#[allow(clippy::too_many_arguments)]
#[inline]
fn cell_step(
    w: &Matrix,
    b: &[f64],
    input: &[f64],
    c_left: &[f64],
    c_prev: &[f64],
    gate: Option<f64>,
    pre: &mut [f64],
    gates: &mut [f64],
    c: &mut [f64],
    tanh_c: &mut [f64],
    h: &mut [f64],
) {
    let d = c.len();
    w.affine_into(b, input, pre);
    for (g, p) in gates[..4 * d].iter_mut().zip(&pre[..4 * d]) {
        *g = sigmoid_scalar(*p);
    }
    for (g, p) in gates[4 * d..].iter_mut().zip(&pre[4 * d..]) {
        *g = p.tanh();
    }
    let (i, rest) = gates.split_at(d);
    let (fs, rest) = rest.split_at(d);
    let (ft, rest) = rest.split_at(d);
    let (o, u) = rest.split_at(d);
    match gate {
        None => {
            for k in 0..d {
                c[k] = i[k] * u[k] + fs[k] * c_left[k] + ft[k] * c_prev[k];
            }
        }
        Some(r) => {
            let keep = 1.0 - r;
            for k in 0..d {
                c[k] = r * (i[k] * u[k]) + keep * (fs[k] * c_left[k]) + keep * (ft[k] * c_prev[k]);
            }
        }
    }
    for k in 0..d {
        tanh_c[k] = c[k].tanh();
        h[k] = o[k] * tanh_c[k];
    }
}

/// Evaluation order over the lattice. Both are topological orders of the
/// dependency DAG and give bit-identical results.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Schedule {
    /// Frame by frame, walking the joint chain within each frame.
    #[default]
    RowMajor,
    /// Anti-diagonals `k + t = const`.
    Wavefront,
}

/// Cell states, hidden representations and cached activations of one layer.
#[derive(Debug, Clone, PartialEq)]
pub struct LatticeState {
    joints: usize,
    frames: usize,
    input_dim: usize,
    hidden: usize,
    order: JointOrder,
    c: Vec<f64>,
    h: Vec<f64>,
    tanh_c: Vec<f64>,
    gate: Option<Vec<f64>>,
    /// `[x; h_left; h_prev]` per step; `None` once stripped.
    inputs: Option<Vec<f64>>,
    gates: Option<Vec<f64>>,
}

impl LatticeState {
    pub fn joints(&self) -> usize {
        self.joints
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn hidden(&self) -> usize {
        self.hidden
    }

    pub fn order(&self) -> &JointOrder {
        &self.order
    }

    #[inline]
    pub fn index(&self, joint: usize, frame: usize) -> usize {
        joint * self.frames + frame
    }

    pub fn h(&self, joint: usize, frame: usize) -> &[f64] {
        let s = self.index(joint, frame) * self.hidden;
        &self.h[s..s + self.hidden]
    }

    pub fn c(&self, joint: usize, frame: usize) -> &[f64] {
        let s = self.index(joint, frame) * self.hidden;
        &self.c[s..s + self.hidden]
    }

    /// All hidden vectors, joint-major.
    pub fn hidden_grid(&self) -> &[f64] {
        &self.h
    }

    pub fn cell_grid(&self) -> &[f64] {
        &self.c
    }

    /// Activated gates `(i, fS, fT, o, u)` of one step, if cached.
    pub fn gates_at(&self, joint: usize, frame: usize) -> Option<&[f64]> {
        let s = self.index(joint, frame) * 5 * self.hidden;
        self.gates.as_ref().map(|g| &g[s..s + 5 * self.hidden])
    }

    /// Hidden vector at the final step of the lattice (last chain joint,
    /// last frame).
    pub fn final_hidden(&self) -> &[f64] {
        self.h(self.order.last(), self.frames - 1)
    }

    /// Drops the backward caches.
    pub fn strip_cache(&mut self) {
        self.inputs = None;
        self.gates = None;
    }

    pub fn has_cache(&self) -> bool {
        self.inputs.is_some() && self.gates.is_some()
    }
}

/// Runs a layer over a `joints x frames` input grid (joint-major, `input_dim`
/// values per step), optionally gating each step's cell update.
pub fn lattice_forward(
    store: &ParamStore,
    params: &StLstmParams,
    inputs: &[f64],
    frames: usize,
    order: &JointOrder,
    gate: Option<&[f64]>,
    schedule: Schedule,
) -> Result<LatticeState> {
    params.check(store)?;
    let joints = order.len();
    if joints == 0 || frames == 0 {
        return Err(Error::contract("lattice needs at least one joint and one frame"));
    }
    let steps = joints * frames;
    if inputs.len() != steps * params.input_dim {
        return Err(Error::shape(
            "lattice_forward",
            format!(
                "{} input values for {joints}x{frames} steps of width {}",
                inputs.len(),
                params.input_dim
            ),
        ));
    }
    if let Some(g) = gate {
        if g.len() != steps {
            return Err(Error::shape(
                "lattice_forward",
                format!("gate grid has {} entries, lattice has {steps}", g.len()),
            ));
        }
    }
    let d = params.hidden;
    let din = params.input_dim;
    let width = params.concat_len();
    let mut st = LatticeState {
        joints,
        frames,
        input_dim: din,
        hidden: d,
        order: order.clone(),
        c: vec![0.0; steps * d],
        h: vec![0.0; steps * d],
        tanh_c: vec![0.0; steps * d],
        gate: gate.map(|g| g.to_vec()),
        inputs: Some(vec![0.0; steps * width]),
        gates: Some(vec![0.0; steps * 5 * d]),
    };
    let w = store.value(params.w);
    let b = store.value(params.b).as_slice();
    let zeros = vec![0.0; d];
    let mut pre = vec![0.0; 5 * d];
    let mut c_left = vec![0.0; d];
    let mut c_prev = vec![0.0; d];
    let mut c_out = vec![0.0; d];
    let mut tc_out = vec![0.0; d];
    let mut h_out = vec![0.0; d];
    let ord = order.as_slice();

    let mut visit = |k: usize, t: usize, st: &mut LatticeState| {
        let j = ord[k];
        let s = j * frames + t;
        {
            let inp = &mut st.inputs.as_mut().expect("fresh cache")[s * width..(s + 1) * width];
            inp[..din].copy_from_slice(&inputs[s * din..(s + 1) * din]);
            if k > 0 {
                let l = ord[k - 1] * frames + t;
                inp[din..din + d].copy_from_slice(&st.h[l * d..(l + 1) * d]);
                c_left.copy_from_slice(&st.c[l * d..(l + 1) * d]);
            } else {
                inp[din..din + d].copy_from_slice(&zeros);
                c_left.copy_from_slice(&zeros);
            }
            if t > 0 {
                let p = s - 1;
                inp[din + d..].copy_from_slice(&st.h[p * d..(p + 1) * d]);
                c_prev.copy_from_slice(&st.c[p * d..(p + 1) * d]);
            } else {
                inp[din + d..].copy_from_slice(&zeros);
                c_prev.copy_from_slice(&zeros);
            }
        }
        let inp = &st.inputs.as_ref().expect("fresh cache")[s * width..(s + 1) * width];
        let g = st.gates.as_mut().expect("fresh cache");
        cell_step(
            w,
            b,
            inp,
            &c_left,
            &c_prev,
            gate.map(|g| g[s]),
            &mut pre,
            &mut g[s * 5 * d..(s + 1) * 5 * d],
            &mut c_out,
            &mut tc_out,
            &mut h_out,
        );
        st.c[s * d..(s + 1) * d].copy_from_slice(&c_out);
        st.tanh_c[s * d..(s + 1) * d].copy_from_slice(&tc_out);
        st.h[s * d..(s + 1) * d].copy_from_slice(&h_out);
    };

    match schedule {
        Schedule::RowMajor => {
            for t in 0..frames {
                for k in 0..joints {
                    visit(k, t, &mut st);
                }
            }
        }
        Schedule::Wavefront => {
            for diag in 0..joints + frames - 1 {
                let k_lo = diag.saturating_sub(frames - 1);
                let k_hi = diag.min(joints - 1);
                for k in k_lo..=k_hi {
                    visit(k, diag - k, &mut st);
                }
            }
        }
    }
    Ok(st)
}

/// Gradients flowing out of a lattice besides its parameter gradients.
#[derive(Debug, Clone, PartialEq)]
pub struct LatticeGrads {
    /// d loss / d input, same layout as the forward inputs.
    pub inputs: Vec<f64>,
    /// d loss / d gate per step, when the layer was gated.
    pub gate: Option<Vec<f64>>,
}

/// Backpropagates `grad_h` (joint-major, `hidden` values per step) through
/// the lattice, accumulating weight gradients into `grads`.
pub fn lattice_backward(
    store: &ParamStore,
    params: &StLstmParams,
    state: &LatticeState,
    grad_h: &[f64],
    grads: &mut GradBuffer,
) -> Result<LatticeGrads> {
    let (Some(inputs), Some(gates)) = (state.inputs.as_ref(), state.gates.as_ref()) else {
        return Err(Error::contract("lattice_backward needs the forward cache"));
    };
    let d = state.hidden;
    let din = state.input_dim;
    if params.hidden != d || params.input_dim != din {
        return Err(Error::shape(
            "lattice_backward",
            "parameters do not match the forward state",
        ));
    }
    let (joints, frames) = (state.joints, state.frames);
    let steps = joints * frames;
    if grad_h.len() != steps * d {
        return Err(Error::shape(
            "lattice_backward",
            format!("grad_h has {} values, want {}", grad_h.len(), steps * d),
        ));
    }
    let width = din + 2 * d;
    let w = store.value(params.w);
    let (gw, gb) = grads.pair_mut(params.w, params.b);

    let mut acc_h = grad_h.to_vec();
    let mut acc_c = vec![0.0; steps * d];
    let mut dx = vec![0.0; steps * din];
    let mut dgate = state.gate.as_ref().map(|_| vec![0.0; steps]);
    let mut dpre = vec![0.0; 5 * d];
    let mut dinput = vec![0.0; width];
    let zeros = vec![0.0; d];
    let ord = state.order.as_slice();

    for t in (0..frames).rev() {
        for k in (0..joints).rev() {
            let j = ord[k];
            let s = j * frames + t;
            let left = (k > 0).then(|| ord[k - 1] * frames + t);
            let prev = (t > 0).then(|| s - 1);
            let c_left = left.map_or(&zeros[..], |l| &state.c[l * d..(l + 1) * d]);
            let c_prev = prev.map_or(&zeros[..], |p| &state.c[p * d..(p + 1) * d]);
            let g = &gates[s * 5 * d..(s + 1) * 5 * d];
            let (i, rest) = g.split_at(d);
            let (fs, rest) = rest.split_at(d);
            let (ft, rest) = rest.split_at(d);
            let (o, u) = rest.split_at(d);
            let tc = &state.tanh_c[s * d..(s + 1) * d];
            let r = state.gate.as_ref().map(|g| g[s]);
            let (in_coef, hist_coef) = match r {
                Some(r) => (r, 1.0 - r),
                None => (1.0, 1.0),
            };
            let mut dr = 0.0;
            for m in 0..d {
                let dh = acc_h[s * d + m];
                let dc = acc_c[s * d + m] + dh * o[m] * (1.0 - tc[m] * tc[m]);
                let d_o = dh * tc[m];
                let di = dc * in_coef * u[m];
                let du = dc * in_coef * i[m];
                let dfs = dc * hist_coef * c_left[m];
                let dft = dc * hist_coef * c_prev[m];
                if r.is_some() {
                    dr += dc * (i[m] * u[m] - fs[m] * c_left[m] - ft[m] * c_prev[m]);
                }
                if let Some(l) = left {
                    acc_c[l * d + m] += dc * hist_coef * fs[m];
                }
                if let Some(p) = prev {
                    acc_c[p * d + m] += dc * hist_coef * ft[m];
                }
                dpre[m] = di * i[m] * (1.0 - i[m]);
                dpre[d + m] = dfs * fs[m] * (1.0 - fs[m]);
                dpre[2 * d + m] = dft * ft[m] * (1.0 - ft[m]);
                dpre[3 * d + m] = d_o * o[m] * (1.0 - o[m]);
                dpre[4 * d + m] = du * (1.0 - u[m] * u[m]);
            }
            if let Some(dg) = dgate.as_mut() {
                dg[s] = dr;
            }
            let inp = &inputs[s * width..(s + 1) * width];
            gw.add_outer(&dpre, inp);
            gb.add_assign(&dpre);
            dinput.iter_mut().for_each(|v| *v = 0.0);
            w.t_matvec_acc(&dpre, &mut dinput);
            dx[s * din..(s + 1) * din].copy_from_slice(&dinput[..din]);
            if let Some(l) = left {
                for m in 0..d {
                    acc_h[l * d + m] += dinput[din + m];
                }
            }
            if let Some(p) = prev {
                for m in 0..d {
                    acc_h[p * d + m] += dinput[din + d + m];
                }
            }
        }
    }
    Ok(LatticeGrads {
        inputs: dx,
        gate: dgate,
    })
}
