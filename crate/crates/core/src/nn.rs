//! Fully connected network with SiLU hidden activations over a flat parameter slice.
//!
//! Every output row depends only on the matching input row, and the arithmetic for one row is the
//! same regardless of how many rows share the batch. Batched and single-row evaluation therefore
//! agree bit for bit, which the distillation oracles rely on.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MlpLayout {
    sizes: Vec<usize>,
}

/// Activations retained from a forward pass for the backward pass.
pub struct Trace {
    rows: usize,
    /// `inputs[l]` is the input to layer `l` (post-activation of the previous layer).
    inputs: Vec<Vec<f64>>,
    /// Pre-activations of the hidden layers.
    pre: Vec<Vec<f64>>,
    output: Vec<f64>,
}

impl Trace {
    pub fn output(&self) -> &[f64] {
        &self.output
    }

    pub fn rows(&self) -> usize {
        self.rows
    }
}

#[inline]
fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

#[inline]
fn silu(x: f64) -> f64 {
    x * sigmoid(x)
}

#[inline]
fn silu_grad(x: f64) -> f64 {
    let s = sigmoid(x);
    s + x * s * (1.0 - s)
}

/// `out[r] = b + x[r] · W` for `W` stored input-major (`n_in × n_out`).
fn affine(x: &[f64], rows: usize, w: &[f64], b: &[f64], n_in: usize, n_out: usize, out: &mut [f64]) {
    const BLOCK: usize = 4;
    let mut r0 = 0;
    while r0 < rows {
        let r1 = (r0 + BLOCK).min(rows);
        for r in r0..r1 {
            out[r * n_out..(r + 1) * n_out].copy_from_slice(b);
        }
        for k in 0..n_in {
            let wk = &w[k * n_out..(k + 1) * n_out];
            for r in r0..r1 {
                let xk = x[r * n_in + k];
                let o = &mut out[r * n_out..(r + 1) * n_out];
                for (oj, &wj) in o.iter_mut().zip(wk) {
                    *oj += xk * wj;
                }
            }
        }
        r0 = r1;
    }
}

impl MlpLayout {
    /// `sizes = [inputs, hidden..., outputs]`.
    pub fn new(sizes: Vec<usize>) -> Self {
        assert!(sizes.len() >= 2, "an MLP needs at least an input and an output size");
        assert!(sizes.iter().all(|&s| s > 0));
        Self { sizes }
    }

    pub fn sizes(&self) -> &[usize] {
        &self.sizes
    }

    pub fn input_dim(&self) -> usize {
        self.sizes[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.sizes.last().unwrap()
    }

    pub fn num_layers(&self) -> usize {
        self.sizes.len() - 1
    }

    pub fn num_params(&self) -> usize {
        self.sizes.windows(2).map(|w| w[0] * w[1] + w[1]).sum()
    }

    /// Offsets of `(weights, bias)` for layer `l`.
    fn layer_offsets(&self, l: usize) -> (usize, usize) {
        let start: usize = self.sizes[..=l]
            .windows(2)
            .map(|w| w[0] * w[1] + w[1])
            .sum();
        (start, start + self.sizes[l] * self.sizes[l + 1])
    }

    /// LeCun-normal weights and zero biases; the last layer is scaled by `output_scale`
    /// (0 gives an all-zero output layer).
    pub fn init<R: Rng + ?Sized>(&self, rng: &mut R, output_scale: f64) -> Vec<f64> {
        let mut params = vec![0.0; self.num_params()];
        for l in 0..self.num_layers() {
            let (n_in, n_out) = (self.sizes[l], self.sizes[l + 1]);
            let (w_off, _) = self.layer_offsets(l);
            let mut scale = (1.0 / n_in as f64).sqrt();
            if l + 1 == self.num_layers() {
                scale *= output_scale;
            }
            for w in &mut params[w_off..w_off + n_in * n_out] {
                let z: f64 = rng.sample(StandardNormal);
                *w = z * scale;
            }
        }
        params
    }

    pub fn forward(&self, params: &[f64], input: &[f64], rows: usize) -> Vec<f64> {
        debug_assert_eq!(params.len(), self.num_params());
        debug_assert_eq!(input.len(), rows * self.input_dim());
        let mut cur = input.to_vec();
        for l in 0..self.num_layers() {
            let (n_in, n_out) = (self.sizes[l], self.sizes[l + 1]);
            let (w_off, b_off) = self.layer_offsets(l);
            let mut next = vec![0.0; rows * n_out];
            affine(
                &cur,
                rows,
                &params[w_off..b_off],
                &params[b_off..b_off + n_out],
                n_in,
                n_out,
                &mut next,
            );
            if l + 1 < self.num_layers() {
                next.iter_mut().for_each(|v| *v = silu(*v));
            }
            cur = next;
        }
        cur
    }

    pub fn forward_traced(&self, params: &[f64], input: &[f64], rows: usize) -> Trace {
        debug_assert_eq!(input.len(), rows * self.input_dim());
        let mut inputs = Vec::with_capacity(self.num_layers());
        let mut pre = Vec::with_capacity(self.num_layers() - 1);
        let mut cur = input.to_vec();
        for l in 0..self.num_layers() {
            let (n_in, n_out) = (self.sizes[l], self.sizes[l + 1]);
            let (w_off, b_off) = self.layer_offsets(l);
            let mut next = vec![0.0; rows * n_out];
            affine(
                &cur,
                rows,
                &params[w_off..b_off],
                &params[b_off..b_off + n_out],
                n_in,
                n_out,
                &mut next,
            );
            inputs.push(cur);
            if l + 1 < self.num_layers() {
                let act = next.iter().map(|&v| silu(v)).collect();
                pre.push(next);
                cur = act;
            } else {
                cur = next;
            }
        }
        Trace {
            rows,
            inputs,
            pre,
            output: cur,
        }
    }

    /// Accumulates the parameter gradient into `grad_params` and returns the gradient with
    /// respect to the network input.
    pub fn backward(
        &self,
        params: &[f64],
        trace: &Trace,
        grad_output: &[f64],
        grad_params: &mut [f64],
    ) -> Vec<f64> {
        let rows = trace.rows;
        debug_assert_eq!(grad_output.len(), rows * self.output_dim());
        debug_assert_eq!(grad_params.len(), self.num_params());
        let mut g = grad_output.to_vec();
        for l in (0..self.num_layers()).rev() {
            let (n_in, n_out) = (self.sizes[l], self.sizes[l + 1]);
            let (w_off, b_off) = self.layer_offsets(l);
            let x = &trace.inputs[l];
            {
                let (gw, gb) = grad_params[w_off..b_off + n_out].split_at_mut(n_in * n_out);
                for r in 0..rows {
                    let gr = &g[r * n_out..(r + 1) * n_out];
                    for (b, &v) in gb.iter_mut().zip(gr) {
                        *b += v;
                    }
                    for k in 0..n_in {
                        let xk = x[r * n_in + k];
                        for (w, &v) in gw[k * n_out..(k + 1) * n_out].iter_mut().zip(gr) {
                            *w += xk * v;
                        }
                    }
                }
            }
            let w = &params[w_off..b_off];
            let mut gx = vec![0.0; rows * n_in];
            for r in 0..rows {
                let gr = &g[r * n_out..(r + 1) * n_out];
                for k in 0..n_in {
                    let wk = &w[k * n_out..(k + 1) * n_out];
                    gx[r * n_in + k] = wk.iter().zip(gr).map(|(a, b)| a * b).sum();
                }
            }
            if l > 0 {
                let z = &trace.pre[l - 1];
                for (v, &zv) in gx.iter_mut().zip(z) {
                    *v *= silu_grad(zv);
                }
            }
            g = gx;
        }
        g
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn setup() -> (MlpLayout, Vec<f64>, Vec<f64>) {
        let layout = MlpLayout::new(vec![3, 5, 4, 2]);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let params = layout.init(&mut rng, 1.0);
        let x: Vec<f64> = (0..9).map(|i| (i as f64 * 0.37).sin()).collect();
        (layout, params, x)
    }

    #[test]
    fn batch_rows_match_single_rows_bitwise() {
        let (layout, params, x) = setup();
        let batched = layout.forward(&params, &x, 3);
        for r in 0..3 {
            let single = layout.forward(&params, &x[r * 3..(r + 1) * 3], 1);
            assert_eq!(&batched[r * 2..(r + 1) * 2], single.as_slice());
        }
        let traced = layout.forward_traced(&params, &x, 3);
        assert_eq!(traced.output(), batched.as_slice());
    }

    #[test]
    fn zero_output_scale_gives_zero_output() {
        let layout = MlpLayout::new(vec![3, 5, 2]);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let params = layout.init(&mut rng, 0.0);
        assert!(layout.forward(&params, &[1.0, 2.0, 3.0], 1).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn backward_matches_finite_differences() {
        let (layout, params, x) = setup();
        // loss = sum(c ⊙ output)
        let c: Vec<f64> = (0..6).map(|i| 0.5 - i as f64 * 0.3).collect();
        let loss = |p: &[f64], xi: &[f64]| -> f64 {
            layout.forward(p, xi, 3).iter().zip(&c).map(|(a, b)| a * b).sum()
        };
        let trace = layout.forward_traced(&params, &x, 3);
        let mut gp = vec![0.0; params.len()];
        let gx = layout.backward(&params, &trace, &c, &mut gp);
        let h = 1e-5;
        for i in 0..params.len() {
            let mut p = params.clone();
            p[i] += h;
            let up = loss(&p, &x);
            p[i] -= 2.0 * h;
            let down = loss(&p, &x);
            let fd = (up - down) / (2.0 * h);
            assert!((fd - gp[i]).abs() <= 1e-7 + 1e-5 * fd.abs(), "param {i}: {fd} vs {}", gp[i]);
        }
        for i in 0..x.len() {
            let mut xi = x.clone();
            xi[i] += h;
            let up = loss(&params, &xi);
            xi[i] -= 2.0 * h;
            let down = loss(&params, &xi);
            let fd = (up - down) / (2.0 * h);
            assert!((fd - gx[i]).abs() <= 1e-7 + 1e-5 * fd.abs(), "input {i}");
        }
    }
}
