//! LSTM cell with cached forward steps and exact backward pass.
//!
//! Gate layout inside the `4H` pre-activation vector is `[i; f; g; o]`:
//!
//! ```text
//! i = σ(·)  f = σ(·)  g = tanh(·)  o = σ(·)
//! c = f ⊙ c_prev + i ⊙ g
//! h = o ⊙ tanh(c)
//! ```

use crate::linalg::{sigmoid, Matrix};

#[derive(Debug, Clone, PartialEq)]
pub struct LstmCell {
    /// `4H × input`
    pub w_ih: Matrix,
    /// `4H × H`
    pub w_hh: Matrix,
    /// `1 × 4H`
    pub bias: Matrix,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LstmState {
    pub h: Vec<f64>,
    pub c: Vec<f64>,
}

impl LstmState {
    pub fn zeros(hidden: usize) -> Self {
        LstmState {
            h: vec![0.0; hidden],
            c: vec![0.0; hidden],
        }
    }
}

/// Everything the backward pass needs from one forward step.
#[derive(Debug, Clone)]
pub struct StepCache {
    x: Vec<f64>,
    h_prev: Vec<f64>,
    c_prev: Vec<f64>,
    /// post-activation gates `[i; f; g; o]`
    gates: Vec<f64>,
    tanh_c: Vec<f64>,
}

impl LstmCell {
    pub fn zeros(input: usize, hidden: usize) -> Self {
        LstmCell {
            w_ih: Matrix::zeros(4 * hidden, input),
            w_hh: Matrix::zeros(4 * hidden, hidden),
            bias: Matrix::zeros(1, 4 * hidden),
        }
    }

    pub fn hidden(&self) -> usize {
        self.w_hh.cols
    }

    pub fn input(&self) -> usize {
        self.w_ih.cols
    }

    fn gates(&self, x: &[f64], h_prev: &[f64], gates: &mut Vec<f64>) {
        let hd = self.hidden();
        gates.clear();
        gates.extend_from_slice(&self.bias.data);
        self.w_ih.gemv_acc(x, gates);
        self.w_hh.gemv_acc(h_prev, gates);
        for (k, z) in gates.iter_mut().enumerate() {
            *z = if k / hd == 2 { z.tanh() } else { sigmoid(*z) };
        }
    }

    /// In-place step without caching, for inference.
    pub fn step(&self, x: &[f64], state: &mut LstmState, scratch: &mut Vec<f64>) {
        let hd = self.hidden();
        self.gates(x, &state.h, scratch);
        let (i, rest) = scratch.split_at(hd);
        let (f, rest) = rest.split_at(hd);
        let (g, o) = rest.split_at(hd);
        for k in 0..hd {
            let c = f[k] * state.c[k] + i[k] * g[k];
            state.c[k] = c;
            state.h[k] = o[k] * c.tanh();
        }
    }

    pub fn forward(&self, x: &[f64], prev: &LstmState) -> (LstmState, StepCache) {
        let hd = self.hidden();
        let mut gates = Vec::with_capacity(4 * hd);
        self.gates(x, &prev.h, &mut gates);
        let mut c = vec![0.0; hd];
        let mut h = vec![0.0; hd];
        let mut tanh_c = vec![0.0; hd];
        for k in 0..hd {
            c[k] = gates[hd + k] * prev.c[k] + gates[k] * gates[2 * hd + k];
            tanh_c[k] = c[k].tanh();
            h[k] = gates[3 * hd + k] * tanh_c[k];
        }
        let cache = StepCache {
            x: x.to_vec(),
            h_prev: prev.h.clone(),
            c_prev: prev.c.clone(),
            gates,
            tanh_c,
        };
        (LstmState { h, c }, cache)
    }

    /// Backpropagates one step. `dh` and `dc` are the total gradients
    /// reaching `h_t` and `c_t`. Parameter gradients accumulate into `grad`,
    /// the input gradient accumulates into `dx`, and the gradients for the
    /// previous state overwrite `dh_prev` / `dc_prev`.
    #[allow(clippy::too_many_arguments)]
    pub fn backward(
        &self,
        cache: &StepCache,
        dh: &[f64],
        dc: &[f64],
        grad: &mut LstmCell,
        dx: &mut [f64],
        dh_prev: &mut [f64],
        dc_prev: &mut [f64],
    ) {
        let hd = self.hidden();
        let g = &cache.gates;
        let mut dz = vec![0.0; 4 * hd];
        for k in 0..hd {
            let (gi, gf, gg, go) = (g[k], g[hd + k], g[2 * hd + k], g[3 * hd + k]);
            let tc = cache.tanh_c[k];
            let dct = dc[k] + dh[k] * go * (1.0 - tc * tc);
            dz[k] = dct * gg * gi * (1.0 - gi);
            dz[hd + k] = dct * cache.c_prev[k] * gf * (1.0 - gf);
            dz[2 * hd + k] = dct * gi * (1.0 - gg * gg);
            dz[3 * hd + k] = dh[k] * tc * go * (1.0 - go);
            dc_prev[k] = dct * gf;
        }
        grad.w_ih.ger(&dz, &cache.x);
        grad.w_hh.ger(&dz, &cache.h_prev);
        for (b, d) in grad.bias.data.iter_mut().zip(&dz) {
            *b += d;
        }
        self.w_ih.gemv_t_acc(&dz, dx);
        dh_prev.fill(0.0);
        self.w_hh.gemv_t_acc(&dz, dh_prev);
    }
}
