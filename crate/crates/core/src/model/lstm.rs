//! Standard LSTM recurrences over patch-grid rows and columns, with exact
//! backpropagation through time.
//!
//! Gate layout inside the `4h` pre-activation vector is `[input, forget,
//! output, candidate]`. Initial hidden and cell states are zero.

use crate::error::{CpcError, Result};
use crate::numerics::{sigmoid, Matrix};

/// Weights of one directional LSTM.
#[derive(Debug, Clone, PartialEq)]
pub struct LstmParams {
    /// `input × 4h`
    pub wx: Matrix,
    /// `h × 4h`
    pub wh: Matrix,
    /// `1 × 4h`
    pub b: Matrix,
}

impl LstmParams {
    pub fn zeros(input: usize, hidden: usize) -> Self {
        Self {
            wx: Matrix::zeros(input, 4 * hidden),
            wh: Matrix::zeros(hidden, 4 * hidden),
            b: Matrix::zeros(1, 4 * hidden),
        }
    }

    pub fn hidden(&self) -> usize {
        self.wh.rows()
    }

    pub fn input(&self) -> usize {
        self.wx.rows()
    }

    pub fn tensors(&self) -> [&Matrix; 3] {
        [&self.wx, &self.wh, &self.b]
    }

    pub fn tensors_mut(&mut self) -> [&mut Matrix; 3] {
        [&mut self.wx, &mut self.wh, &mut self.b]
    }
}

#[derive(Debug, Clone)]
struct StepCache {
    input: usize,
    h_prev: Vec<f64>,
    c_prev: Vec<f64>,
    /// Post-activation gates `[i, f, o, g]`.
    gates: Vec<f64>,
    tanh_c: Vec<f64>,
}

/// Activations of one sequence, kept for the backward pass.
#[derive(Debug, Clone)]
pub struct SequenceCache {
    order: Vec<usize>,
    steps: Vec<StepCache>,
}

/// Run `params` over `order` (indices into the rows of `x`), writing hidden
/// states into columns `out_offset..out_offset+h` of `out`.
pub fn forward_sequence(
    params: &LstmParams,
    x: &Matrix,
    order: &[usize],
    out: &mut Matrix,
    out_offset: usize,
) -> SequenceCache {
    let h = params.hidden();
    let mut h_prev = vec![0.0; h];
    let mut c_prev = vec![0.0; h];
    let mut steps = Vec::with_capacity(order.len());
    let mut a = vec![0.0; 4 * h];
    for &row in order {
        a.copy_from_slice(params.b.row(0));
        for (k, &xv) in x.row(row).iter().enumerate() {
            if xv != 0.0 {
                for (aj, &w) in a.iter_mut().zip(params.wx.row(k)) {
                    *aj += xv * w;
                }
            }
        }
        for (k, &hv) in h_prev.iter().enumerate() {
            if hv != 0.0 {
                for (aj, &w) in a.iter_mut().zip(params.wh.row(k)) {
                    *aj += hv * w;
                }
            }
        }
        let mut gates = vec![0.0; 4 * h];
        for j in 0..3 * h {
            gates[j] = sigmoid(a[j]);
        }
        for j in 3 * h..4 * h {
            gates[j] = a[j].tanh();
        }
        let mut c = vec![0.0; h];
        let mut tanh_c = vec![0.0; h];
        let hidden_out = &mut out.row_mut(row)[out_offset..out_offset + h];
        for j in 0..h {
            let (i, f, o, g) = (gates[j], gates[h + j], gates[2 * h + j], gates[3 * h + j]);
            c[j] = f * c_prev[j] + i * g;
            tanh_c[j] = c[j].tanh();
            hidden_out[j] = o * tanh_c[j];
        }
        let h_new = hidden_out.to_vec();
        steps.push(StepCache {
            input: row,
            h_prev: std::mem::replace(&mut h_prev, h_new),
            c_prev: std::mem::replace(&mut c_prev, c),
            gates,
            tanh_c,
        });
    }
    SequenceCache {
        order: order.to_vec(),
        steps,
    }
}

/// Backpropagate through one sequence. `d_out` columns
/// `out_offset..out_offset+h` hold the loss gradient w.r.t. each hidden state;
/// input gradients accumulate into `d_x` and weight gradients into `grads`.
pub fn backward_sequence(
    params: &LstmParams,
    x: &Matrix,
    cache: &SequenceCache,
    d_out: &Matrix,
    out_offset: usize,
    d_x: &mut Matrix,
    grads: &mut LstmParams,
) {
    let h = params.hidden();
    let mut dh_next = vec![0.0; h];
    let mut dc_next = vec![0.0; h];
    let mut da = vec![0.0; 4 * h];
    for (step, &row) in cache.steps.iter().zip(&cache.order).rev() {
        debug_assert_eq!(step.input, row);
        let d_hidden = &d_out.row(row)[out_offset..out_offset + h];
        for j in 0..h {
            let (i, f, o, g) = (
                step.gates[j],
                step.gates[h + j],
                step.gates[2 * h + j],
                step.gates[3 * h + j],
            );
            let dh = d_hidden[j] + dh_next[j];
            let tc = step.tanh_c[j];
            let d_o = dh * tc;
            let dc = dc_next[j] + dh * o * (1.0 - tc * tc);
            let d_i = dc * g;
            let d_g = dc * i;
            let d_f = dc * step.c_prev[j];
            dc_next[j] = dc * f;
            da[j] = d_i * i * (1.0 - i);
            da[h + j] = d_f * f * (1.0 - f);
            da[2 * h + j] = d_o * o * (1.0 - o);
            da[3 * h + j] = d_g * (1.0 - g * g);
        }
        for (gb, &d) in grads.b.row_mut(0).iter_mut().zip(&da) {
            *gb += d;
        }
        let x_row = x.row(row);
        for (k, &xv) in x_row.iter().enumerate() {
            if xv != 0.0 {
                for (gw, &d) in grads.wx.row_mut(k).iter_mut().zip(&da) {
                    *gw += xv * d;
                }
            }
        }
        for (k, &hv) in step.h_prev.iter().enumerate() {
            if hv != 0.0 {
                for (gw, &d) in grads.wh.row_mut(k).iter_mut().zip(&da) {
                    *gw += hv * d;
                }
            }
        }
        let dx_row = d_x.row_mut(row);
        for (k, dx) in dx_row.iter_mut().enumerate() {
            *dx += crate::numerics::dot(params.wx.row(k), &da);
        }
        for (k, dh) in dh_next.iter_mut().enumerate() {
            *dh = crate::numerics::dot(params.wh.row(k), &da);
        }
    }
}

/// Four directional LSTMs over a square patch grid.
#[derive(Debug, Clone, PartialEq)]
pub struct HvBiLstm {
    pub left_right: LstmParams,
    pub right_left: LstmParams,
    pub top_bottom: LstmParams,
    pub bottom_top: LstmParams,
}

impl HvBiLstm {
    pub fn zeros(width: usize) -> Self {
        let h = width / 2;
        Self {
            left_right: LstmParams::zeros(width, h),
            right_left: LstmParams::zeros(width, h),
            top_bottom: LstmParams::zeros(width, h),
            bottom_top: LstmParams::zeros(width, h),
        }
    }

    /// Passes in storage order: left→right, right→left, top→bottom, bottom→top.
    pub fn passes(&self) -> [&LstmParams; 4] {
        [&self.left_right, &self.right_left, &self.top_bottom, &self.bottom_top]
    }

    pub fn passes_mut(&mut self) -> [&mut LstmParams; 4] {
        [
            &mut self.left_right,
            &mut self.right_left,
            &mut self.top_bottom,
            &mut self.bottom_top,
        ]
    }
}

#[derive(Debug, Clone)]
pub struct HvCache {
    side: usize,
    /// One entry per pass (storage order), each holding `side` sequences.
    sequences: [Vec<SequenceCache>; 4],
}

/// Patch orderings of every sequence for each pass.
fn pass_orders(side: usize) -> [Vec<Vec<usize>>; 4] {
    let rows: Vec<Vec<usize>> = (0..side)
        .map(|r| (0..side).map(|c| r * side + c).collect())
        .collect();
    let cols: Vec<Vec<usize>> = (0..side)
        .map(|c| (0..side).map(|r| r * side + c).collect())
        .collect();
    let rev = |v: &Vec<Vec<usize>>| -> Vec<Vec<usize>> {
        v.iter().map(|s| s.iter().rev().copied().collect()).collect()
    };
    [rows.clone(), rev(&rows), cols.clone(), rev(&cols)]
}

/// Refine `s × D` tokens on a `√s × √s` grid. Horizontal output is
/// `[left→right ∥ right→left]`, vertical is `[top→bottom ∥ bottom→top]`, and
/// the result is their elementwise mean.
pub fn hv_bilstm_forward(x: &Matrix, params: &HvBiLstm) -> Result<(Matrix, HvCache)> {
    let width = x.cols();
    if !width.is_multiple_of(2) {
        return Err(CpcError::Config(format!(
            "token width {width} must be even to split between directions"
        )));
    }
    let side = crate::numerics::exact_sqrt(x.rows())
        .ok_or_else(|| CpcError::Shape(format!("{} tokens do not form a square grid", x.rows())))?;
    let h = width / 2;
    for p in params.passes() {
        if p.input() != width || p.hidden() != h {
            return Err(CpcError::Shape(format!(
                "lstm expects input {} hidden {}, tokens have width {width}",
                p.input(),
                p.hidden()
            )));
        }
    }
    let orders = pass_orders(side);
    let mut horizontal = Matrix::zeros(x.rows(), width);
    let mut vertical = Matrix::zeros(x.rows(), width);
    let mut sequences: [Vec<SequenceCache>; 4] = Default::default();
    for (pass, (p, seqs)) in params.passes().into_iter().zip(orders.iter()).enumerate() {
        let (target, offset) = match pass {
            0 => (&mut horizontal, 0),
            1 => (&mut horizontal, h),
            2 => (&mut vertical, 0),
            _ => (&mut vertical, h),
        };
        sequences[pass] = seqs
            .iter()
            .map(|order| forward_sequence(p, x, order, target, offset))
            .collect();
    }
    let mut out = horizontal;
    for (o, v) in out.as_mut_slice().iter_mut().zip(vertical.as_slice()) {
        *o = 0.5 * (*o + v);
    }
    Ok((out, HvCache { side, sequences }))
}

/// Gradients of [`hv_bilstm_forward`] given `d_out = ∂L/∂F_out`. Returns
/// `∂L/∂F_in` and accumulates weight gradients into `grads`.
pub fn hv_bilstm_backward(
    x: &Matrix,
    params: &HvBiLstm,
    cache: &HvCache,
    d_out: &Matrix,
    grads: &mut HvBiLstm,
) -> Matrix {
    let width = x.cols();
    let h = width / 2;
    let mut half = d_out.clone();
    half.scale(0.5);
    let mut d_x = Matrix::zeros(x.rows(), width);
    debug_assert_eq!(cache.side * cache.side, x.rows());
    for (pass, (p, g)) in params
        .passes()
        .into_iter()
        .zip(grads.passes_mut())
        .enumerate()
    {
        let offset = if pass % 2 == 0 { 0 } else { h };
        for seq in &cache.sequences[pass] {
            backward_sequence(p, x, seq, &half, offset, &mut d_x, g);
        }
    }
    d_x
}
