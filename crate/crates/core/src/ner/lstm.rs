//! LSTM and bidirectional LSTM with hand-written backpropagation through time.
//!
//! Gate blocks are stacked `[i, f, o, g]` in the `4h` rows of each weight.
//! Initial hidden and cell states are zero.

use serde::{Deserialize, Serialize};
use taxolink_numerics::params::{visit_nested, visit_nested_mut};
use taxolink_numerics::tensor::{gemv_acc, gemv_t_acc, outer_acc};
use taxolink_numerics::{sigmoid, Parameterized, Rng, Tensor};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LstmParams {
    /// `4h × d_in`.
    pub w_x: Tensor,
    /// `4h × h`.
    pub w_h: Tensor,
    /// `4h`.
    pub b: Tensor,
}

impl LstmParams {
    /// Every weight and bias uniform in `±1/√h`.
    pub fn new(d_in: usize, h: usize, rng: &mut Rng) -> Self {
        let bound = 1.0 / (h as f64).sqrt();
        let mut draw = |n: usize| (0..n).map(|_| rng.uniform_range(-bound, bound)).collect::<Vec<_>>();
        Self {
            w_x: Tensor::matrix(4 * h, d_in, draw(4 * h * d_in)).expect("sized"),
            w_h: Tensor::matrix(4 * h, h, draw(4 * h * h)).expect("sized"),
            b: Tensor::vector(draw(4 * h)),
        }
    }

    pub fn zeros(d_in: usize, h: usize) -> Self {
        Self {
            w_x: Tensor::zeros(&[4 * h, d_in]),
            w_h: Tensor::zeros(&[4 * h, h]),
            b: Tensor::zeros(&[4 * h]),
        }
    }

    pub fn hidden(&self) -> usize {
        self.w_h.cols()
    }

    pub fn input_dim(&self) -> usize {
        self.w_x.cols()
    }
}

impl Parameterized for LstmParams {
    fn visit(&self, f: &mut dyn FnMut(&str, &Tensor)) {
        f("w_x", &self.w_x);
        f("w_h", &self.w_h);
        f("b", &self.b);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor)) {
        f("w_x", &mut self.w_x);
        f("w_h", &mut self.w_h);
        f("b", &mut self.b);
    }
}

/// Per-step activations kept for the backward pass.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct LstmCache {
    inputs: Vec<Vec<f64>>,
    /// Activated gates `[i, f, o, g]` per step.
    gates: Vec<Vec<f64>>,
    cells: Vec<Vec<f64>>,
    hiddens: Vec<Vec<f64>>,
}

/// Runs the recurrence over `inputs` in order; returns one hidden row per step.
pub fn lstm_forward(p: &LstmParams, inputs: &[&[f64]]) -> (Tensor, LstmCache) {
    let h = p.hidden();
    let d = p.input_dim();
    let mut cache = LstmCache::default();
    let mut prev_h = vec![0.0; h];
    let mut prev_c = vec![0.0; h];
    let mut out = Tensor::zeros(&[inputs.len(), h]);
    for (t, x) in inputs.iter().enumerate() {
        let mut a = p.b.data().to_vec();
        gemv_acc(p.w_x.data(), 4 * h, d, x, &mut a);
        gemv_acc(p.w_h.data(), 4 * h, h, &prev_h, &mut a);
        for (k, v) in a.iter_mut().enumerate() {
            *v = if k < 3 * h { sigmoid(*v) } else { v.tanh() };
        }
        let mut c = vec![0.0; h];
        let mut hid = vec![0.0; h];
        for j in 0..h {
            c[j] = a[h + j] * prev_c[j] + a[j] * a[3 * h + j];
            hid[j] = a[2 * h + j] * c[j].tanh();
        }
        out.row_mut(t).copy_from_slice(&hid);
        cache.inputs.push(x.to_vec());
        cache.gates.push(a);
        cache.cells.push(c.clone());
        cache.hiddens.push(hid.clone());
        prev_h = hid;
        prev_c = c;
    }
    (out, cache)
}

/// Gradients given `∂loss/∂h_t` for every step; returns parameter gradients
/// and `∂loss/∂x_t` rows.
pub fn lstm_backward(p: &LstmParams, cache: &LstmCache, d_hidden: &Tensor) -> (LstmParams, Tensor) {
    let h = p.hidden();
    let d = p.input_dim();
    let steps = cache.inputs.len();
    let mut g = LstmParams::zeros(d, h);
    let mut dx = Tensor::zeros(&[steps, d]);
    let mut dh_next = vec![0.0; h];
    let mut dc_next = vec![0.0; h];
    let zeros = vec![0.0; h];
    let mut da = vec![0.0; 4 * h];
    for t in (0..steps).rev() {
        let gates = &cache.gates[t];
        let c = &cache.cells[t];
        let c_prev = if t > 0 { &cache.cells[t - 1] } else { &zeros };
        let h_prev = if t > 0 { &cache.hiddens[t - 1] } else { &zeros };
        for j in 0..h {
            let (i, f, o, gg) = (gates[j], gates[h + j], gates[2 * h + j], gates[3 * h + j]);
            let tc = c[j].tanh();
            let dh = d_hidden.get(t, j) + dh_next[j];
            let dc = dh * o * (1.0 - tc * tc) + dc_next[j];
            da[j] = dc * gg * i * (1.0 - i);
            da[h + j] = dc * c_prev[j] * f * (1.0 - f);
            da[2 * h + j] = dh * tc * o * (1.0 - o);
            da[3 * h + j] = dc * i * (1.0 - gg * gg);
            dc_next[j] = dc * f;
        }
        outer_acc(g.w_x.data_mut(), &da, &cache.inputs[t]);
        outer_acc(g.w_h.data_mut(), &da, h_prev);
        for (b, v) in g.b.data_mut().iter_mut().zip(&da) {
            *b += v;
        }
        gemv_t_acc(p.w_x.data(), 4 * h, d, &da, dx.row_mut(t));
        dh_next.iter_mut().for_each(|v| *v = 0.0);
        gemv_t_acc(p.w_h.data(), 4 * h, h, &da, &mut dh_next);
    }
    (g, dx)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BiLstmParams {
    pub forward: LstmParams,
    pub backward: LstmParams,
}

impl BiLstmParams {
    pub fn new(d_in: usize, h: usize, rng: &mut Rng) -> Self {
        Self {
            forward: LstmParams::new(d_in, h, rng),
            backward: LstmParams::new(d_in, h, rng),
        }
    }

    pub fn zeros(d_in: usize, h: usize) -> Self {
        Self {
            forward: LstmParams::zeros(d_in, h),
            backward: LstmParams::zeros(d_in, h),
        }
    }

    pub fn hidden(&self) -> usize {
        self.forward.hidden()
    }

    pub fn output_dim(&self) -> usize {
        2 * self.hidden()
    }

    pub fn input_dim(&self) -> usize {
        self.forward.input_dim()
    }
}

impl Parameterized for BiLstmParams {
    fn visit(&self, f: &mut dyn FnMut(&str, &Tensor)) {
        visit_nested("fwd", &self.forward, f);
        visit_nested("bwd", &self.backward, f);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor)) {
        visit_nested_mut("fwd", &mut self.forward, f);
        visit_nested_mut("bwd", &mut self.backward, f);
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct BiLstmCache {
    forward: LstmCache,
    /// Cache of the backward LSTM over the reversed sequence.
    backward: LstmCache,
}

/// Row `t` of the output is `[h_fwd(t) ; h_bwd(t)]`, where the backward
/// direction reads the sequence right to left.
pub fn bilstm_forward(p: &BiLstmParams, inputs: &Tensor) -> (Tensor, BiLstmCache) {
    let t = inputs.rows();
    let h = p.hidden();
    let rows: Vec<&[f64]> = (0..t).map(|i| inputs.row(i)).collect();
    let reversed: Vec<&[f64]> = rows.iter().rev().copied().collect();
    let (hf, cf) = lstm_forward(&p.forward, &rows);
    let (hb, cb) = lstm_forward(&p.backward, &reversed);
    let mut out = Tensor::zeros(&[t, 2 * h]);
    for i in 0..t {
        let row = out.row_mut(i);
        row[..h].copy_from_slice(hf.row(i));
        row[h..].copy_from_slice(hb.row(t - 1 - i));
    }
    (
        out,
        BiLstmCache {
            forward: cf,
            backward: cb,
        },
    )
}

pub fn bilstm_backward(p: &BiLstmParams, cache: &BiLstmCache, d_out: &Tensor) -> (BiLstmParams, Tensor) {
    let t = d_out.rows();
    let h = p.hidden();
    let mut df = Tensor::zeros(&[t, h]);
    let mut db = Tensor::zeros(&[t, h]);
    for i in 0..t {
        df.row_mut(i).copy_from_slice(&d_out.row(i)[..h]);
        db.row_mut(t - 1 - i).copy_from_slice(&d_out.row(i)[h..]);
    }
    let (gf, dxf) = lstm_backward(&p.forward, &cache.forward, &df);
    let (gb, dxb) = lstm_backward(&p.backward, &cache.backward, &db);
    let mut dx = dxf;
    for i in 0..t {
        for (a, b) in dx.row_mut(i).iter_mut().zip(dxb.row(t - 1 - i)) {
            *a += b;
        }
    }
    (
        BiLstmParams {
            forward: gf,
            backward: gb,
        },
        dx,
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use taxolink_numerics::{finite_difference_gradient, relative_error};

    fn random(rng: &mut Rng, r: usize, c: usize) -> Tensor {
        Tensor::matrix(r, c, (0..r * c).map(|_| rng.normal(0.0, 1.0)).collect()).unwrap()
    }

    fn weighted_sum(a: &Tensor, w: &Tensor) -> f64 {
        a.data().iter().zip(w.data()).map(|(x, y)| x * y).sum()
    }

    #[test]
    fn zero_weights_zero_output() {
        let p = BiLstmParams::zeros(3, 4);
        let x = Tensor::filled(&[5, 3], 2.0);
        let (out, _) = bilstm_forward(&p, &x);
        assert_eq!(out.shape(), &[5, 8]);
        assert!(out.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn single_step_both_directions_see_same_input() {
        let mut rng = Rng::seeded(1);
        let lstm = LstmParams::new(2, 3, &mut rng);
        let p = BiLstmParams { forward: lstm.clone(), backward: lstm };
        let (out, _) = bilstm_forward(&p, &Tensor::from_rows(&[[0.5, -1.0]]).unwrap());
        assert_eq!(&out.row(0)[..3], &out.row(0)[3..]);
    }

    #[test]
    fn reversal_swaps_halves_with_tied_weights() {
        let mut rng = Rng::seeded(2);
        let lstm = LstmParams::new(2, 3, &mut rng);
        let p = BiLstmParams { forward: lstm.clone(), backward: lstm };
        let x = random(&mut rng, 4, 2);
        let rev = Tensor::from_rows(&(0..4).rev().map(|i| x.row(i).to_vec()).collect::<Vec<_>>()).unwrap();
        let (a, _) = bilstm_forward(&p, &x);
        let (b, _) = bilstm_forward(&p, &rev);
        for i in 0..4 {
            assert_eq!(&a.row(i)[..3], &b.row(3 - i)[3..]);
            assert_eq!(&a.row(i)[3..], &b.row(3 - i)[..3]);
        }
    }

    #[test]
    fn gradients_match_finite_differences() {
        for seed in 0..10 {
            let mut rng = Rng::seeded(seed);
            let (t, d, h) = (1 + rng.below(5), 1 + rng.below(6), 1 + rng.below(5));
            let p = BiLstmParams::new(d, h, &mut rng);
            let x = random(&mut rng, t, d);
            let w = random(&mut rng, t, 2 * h);
            let (_, cache) = bilstm_forward(&p, &x);
            let (g, dx) = bilstm_backward(&p, &cache, &w);
            for name in p.param_names() {
                let theta = p.get_param(&name).unwrap();
                let numeric = finite_difference_gradient(
                    |v| {
                        let mut q = p.clone();
                        q.set_param(&name, v).unwrap();
                        weighted_sum(&bilstm_forward(&q, &x).0, &w)
                    },
                    &theta,
                    1e-6,
                )
                .unwrap();
                let err = relative_error(&g.get_param(&name).unwrap(), &numeric);
                assert!(err < 1e-4, "seed {seed} {name}: {err}");
            }
            let numeric = finite_difference_gradient(|v| weighted_sum(&bilstm_forward(&p, v).0, &w), &x, 1e-6).unwrap();
            assert!(relative_error(&dx, &numeric) < 1e-4, "seed {seed} inputs");
        }
    }
}
