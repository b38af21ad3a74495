//! Linear-chain CRF over `T` tags.
//!
//! The transition matrix is `(T+2) × (T+2)`, indexed `[from][to]`, with two
//! extra states: `START = T` and `STOP = T+1`. Only the `START` row and the
//! `STOP` column among the extra entries are ever read.

use serde::{Deserialize, Serialize};
use taxolink_numerics::{log_sum_exp, Parameterized, Tensor};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CrfParams {
    pub transitions: Tensor,
}

impl CrfParams {
    pub fn zeros(tags: usize) -> Self {
        Self {
            transitions: Tensor::zeros(&[tags + 2, tags + 2]),
        }
    }

    pub fn tags(&self) -> usize {
        self.transitions.rows() - 2
    }

    pub fn start(&self) -> usize {
        self.tags()
    }

    pub fn stop(&self) -> usize {
        self.tags() + 1
    }

    fn trans(&self, from: usize, to: usize) -> f64 {
        self.transitions.get(from, to)
    }
}

impl Parameterized for CrfParams {
    fn visit(&self, f: &mut dyn FnMut(&str, &Tensor)) {
        f("transitions", &self.transitions);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor)) {
        f("transitions", &mut self.transitions);
    }
}

fn check(emissions: &Tensor, crf: &CrfParams) -> Result<()> {
    if emissions.rank() != 2 || emissions.rows() == 0 || emissions.cols() != crf.tags() {
        return Err(Error::Config(format!(
            "emissions of shape {:?} do not fit a CRF over {} tags",
            emissions.shape(),
            crf.tags()
        )));
    }
    Ok(())
}

/// Unnormalized log score of one tag path.
pub fn path_score(emissions: &Tensor, tags: &[usize], crf: &CrfParams) -> f64 {
    let mut s = crf.trans(crf.start(), tags[0]);
    for (t, &y) in tags.iter().enumerate() {
        s += emissions.get(t, y);
        if t > 0 {
            s += crf.trans(tags[t - 1], y);
        }
    }
    s + crf.trans(tags[tags.len() - 1], crf.stop())
}

/// Forward log-messages `α[t][j]`.
fn forward(emissions: &Tensor, crf: &CrfParams) -> Vec<Vec<f64>> {
    let (n, k) = (emissions.rows(), crf.tags());
    let mut alpha = vec![vec![0.0; k]; n];
    for j in 0..k {
        alpha[0][j] = crf.trans(crf.start(), j) + emissions.get(0, j);
    }
    let mut buf = vec![0.0; k];
    for t in 1..n {
        for j in 0..k {
            for i in 0..k {
                buf[i] = alpha[t - 1][i] + crf.trans(i, j);
            }
            alpha[t][j] = log_sum_exp(&buf).expect("non-empty") + emissions.get(t, j);
        }
    }
    alpha
}

/// Backward log-messages `β[t][i]`, including the `STOP` transition.
fn backward(emissions: &Tensor, crf: &CrfParams) -> Vec<Vec<f64>> {
    let (n, k) = (emissions.rows(), crf.tags());
    let mut beta = vec![vec![0.0; k]; n];
    for i in 0..k {
        beta[n - 1][i] = crf.trans(i, crf.stop());
    }
    let mut buf = vec![0.0; k];
    for t in (0..n - 1).rev() {
        for i in 0..k {
            for j in 0..k {
                buf[j] = crf.trans(i, j) + emissions.get(t + 1, j) + beta[t + 1][j];
            }
            beta[t][i] = log_sum_exp(&buf).expect("non-empty");
        }
    }
    beta
}

fn log_partition_from(alpha: &[Vec<f64>], crf: &CrfParams) -> f64 {
    let last = &alpha[alpha.len() - 1];
    let v: Vec<f64> = (0..crf.tags()).map(|j| last[j] + crf.trans(j, crf.stop())).collect();
    log_sum_exp(&v).expect("non-empty")
}

/// `log Z` by the forward algorithm.
pub fn crf_log_partition(emissions: &Tensor, crf: &CrfParams) -> Result<f64> {
    check(emissions, crf)?;
    Ok(log_partition_from(&forward(emissions, crf), crf))
}

fn check_gold(emissions: &Tensor, gold: &[usize], crf: &CrfParams) -> Result<()> {
    check(emissions, crf)?;
    if gold.len() != emissions.rows() || gold.iter().any(|&y| y >= crf.tags()) {
        return Err(Error::Config(format!(
            "gold path of length {} does not fit {} emission rows",
            gold.len(),
            emissions.rows()
        )));
    }
    Ok(())
}

/// `score(gold) − log Z`.
pub fn crf_log_likelihood(emissions: &Tensor, gold: &[usize], crf: &CrfParams) -> Result<f64> {
    check_gold(emissions, gold, crf)?;
    Ok(path_score(emissions, gold, crf) - crf_log_partition(emissions, crf)?)
}

/// Negative log-likelihood with gradients for emissions and transitions,
/// from forward-backward marginals minus gold indicator counts.
pub fn crf_nll_grads(emissions: &Tensor, gold: &[usize], crf: &CrfParams) -> Result<(f64, Tensor, CrfParams)> {
    check_gold(emissions, gold, crf)?;
    let (n, k) = (emissions.rows(), crf.tags());
    let alpha = forward(emissions, crf);
    let beta = backward(emissions, crf);
    let log_z = log_partition_from(&alpha, crf);
    let nll = log_z - path_score(emissions, gold, crf);

    let mut d_em = Tensor::zeros(&[n, k]);
    let mut d_tr = CrfParams::zeros(k);
    let tr = &mut d_tr.transitions;
    for t in 0..n {
        for j in 0..k {
            let marginal = (alpha[t][j] + beta[t][j] - log_z).exp();
            d_em.set(t, j, marginal);
            if t == 0 {
                tr.set(crf.start(), j, tr.get(crf.start(), j) + marginal);
            }
            if t == n - 1 {
                tr.set(j, crf.stop(), tr.get(j, crf.stop()) + marginal);
            }
        }
        if t > 0 {
            for i in 0..k {
                for j in 0..k {
                    let pair = (alpha[t - 1][i] + crf.trans(i, j) + emissions.get(t, j) + beta[t][j] - log_z).exp();
                    tr.set(i, j, tr.get(i, j) + pair);
                }
            }
        }
    }
    for (t, &y) in gold.iter().enumerate() {
        d_em.set(t, y, d_em.get(t, y) - 1.0);
        if t > 0 {
            let p = gold[t - 1];
            tr.set(p, y, tr.get(p, y) - 1.0);
        }
    }
    tr.set(crf.start(), gold[0], tr.get(crf.start(), gold[0]) - 1.0);
    tr.set(gold[n - 1], crf.stop(), tr.get(gold[n - 1], crf.stop()) - 1.0);
    if !nll.is_finite() {
        return Err(Error::Divergence("CRF likelihood is not finite".into()));
    }
    Ok((nll, d_em, d_tr))
}

/// Highest-scoring tag path. Among equal scores the lower tag index wins,
/// both for back-pointers and for the final tag.
pub fn viterbi_decode(emissions: &Tensor, crf: &CrfParams) -> Result<Vec<usize>> {
    check(emissions, crf)?;
    let (n, k) = (emissions.rows(), crf.tags());
    let mut delta: Vec<f64> = (0..k).map(|j| crf.trans(crf.start(), j) + emissions.get(0, j)).collect();
    let mut back = vec![vec![0usize; k]; n];
    for t in 1..n {
        let mut next = vec![0.0; k];
        for j in 0..k {
            let (mut best, mut arg) = (f64::NEG_INFINITY, 0);
            for (i, d) in delta.iter().enumerate() {
                let s = d + crf.trans(i, j);
                if s > best {
                    best = s;
                    arg = i;
                }
            }
            next[j] = best + emissions.get(t, j);
            back[t][j] = arg;
        }
        delta = next;
    }
    let (mut best, mut last) = (f64::NEG_INFINITY, 0);
    for (j, d) in delta.iter().enumerate() {
        let s = d + crf.trans(j, crf.stop());
        if s > best {
            best = s;
            last = j;
        }
    }
    let mut path = vec![last; n];
    for t in (1..n).rev() {
        path[t - 1] = back[t][path[t]];
    }
    Ok(path)
}
