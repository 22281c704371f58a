//! Adaptive denoising scheduler: per-memorized-sample features (loss and
//! gradient cosine), sampling probabilities from an LSTM or MLP scorer (or a
//! parameter-free top-half ranking), differentiable Gumbel-softmax weights,
//! and the scheduler's own gradient update.

use rand::Rng;

use crate::error::{Error, Result};
use crate::metaweight::AssumedParams;
use crate::model::{self, sigmoid, ModelParams, SparseGrad, TrainSample};
use crate::rng;

/// Inputs the scheduler sees for one memorized sample.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SchedFeatures {
    /// Sample loss at the actual parameters.
    pub loss: f64,
    /// Cosine between the sample gradient at the lookahead and at the actual
    /// parameters, over the union of touched coordinates.
    pub grad_cos: f64,
}

/// Cosine similarity of two sparse gradients (0 when either is zero).
pub fn cosine(a: &SparseGrad, b: &SparseGrad) -> f64 {
    let (na, nb) = (a.norm(), b.norm());
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    (a.dot(b) / (na * nb)).clamp(-1.0, 1.0)
}

/// Loss and gradient-direction agreement for one memorized sample.
pub fn compute_features(
    m: &TrainSample,
    theta: &ModelParams,
    theta_hat: &AssumedParams<'_>,
) -> Result<SchedFeatures> {
    let loss = model::sample_loss(theta, m)?;
    let grad_actual = model::sample_grad(theta, m)?;
    let grad_hat = theta_hat.sample_grad(m)?;
    Ok(SchedFeatures { loss, grad_cos: cosine(&grad_hat, &grad_actual) })
}

/// Max-subtracted softmax.
pub fn softmax(o: &[f64]) -> Vec<f64> {
    let max = o.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = o.iter().map(|v| (v - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

/// Shannon entropy of a probability vector.
pub fn entropy(pi: &[f64]) -> f64 {
    -pi.iter().filter(|&&p| p > 0.0).map(|&p| p * p.ln()).sum::<f64>()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SchedulerVariant {
    Lstm,
    Mlp,
    TopF,
}

impl std::str::FromStr for SchedulerVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "lstm" => Ok(Self::Lstm),
            "mlp" => Ok(Self::Mlp),
            "topf" | "top-f" => Ok(Self::TopF),
            other => Err(Error::Config(format!("unknown scheduler variant {other:?}"))),
        }
    }
}

/// Differentiable sample weights drawn for one memorized mini-batch.
#[derive(Debug, Clone, PartialEq)]
pub struct GumbelDraw {
    pub y: Vec<f64>,
    pub tau: f64,
    /// The Gumbel noise used for the draw (kept so a draw can be replayed).
    pub noise: Vec<f64>,
}

/// `y = softmax((log pi + g) / tau)` with standard Gumbel noise
/// `g = -log(-log(u))`. Zero probabilities are clamped to 1e-12 before the
/// log. Deterministic for a fixed rng.
pub fn gumbel_weights<R: Rng>(pi: &[f64], tau: f64, rng: &mut R) -> Result<GumbelDraw> {
    if tau <= 0.0 {
        return Err(Error::Argument(format!("temperature must be positive, got {tau}")));
    }
    let noise: Vec<f64> = pi
        .iter()
        .map(|_| {
            let u: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
            -(-u.ln()).ln()
        })
        .collect();
    Ok(gumbel_weights_with_noise(pi, tau, noise))
}

/// The deterministic part of [`gumbel_weights`], reusable for replay.
pub fn gumbel_weights_with_noise(pi: &[f64], tau: f64, noise: Vec<f64>) -> GumbelDraw {
    let logits: Vec<f64> =
        pi.iter().zip(&noise).map(|(&p, &g)| (p.max(1e-12).ln() + g) / tau).collect();
    GumbelDraw { y: softmax(&logits), tau, noise }
}

/// Rank by the sum of the min-max-normalized factors and select the top half
/// (ceil) uniformly; ties break by sample position.
pub fn topf_select(feats: &[SchedFeatures]) -> Vec<f64> {
    let n = feats.len();
    if n == 0 {
        return Vec::new();
    }
    let normalize = |values: Vec<f64>| -> Vec<f64> {
        let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        if hi - lo < 1e-15 {
            return vec![0.0; values.len()];
        }
        values.into_iter().map(|v| (v - lo) / (hi - lo)).collect()
    };
    let losses = normalize(feats.iter().map(|f| f.loss).collect());
    let cosines = normalize(feats.iter().map(|f| f.grad_cos).collect());
    let mut ranked: Vec<(f64, usize)> =
        losses.iter().zip(&cosines).map(|(l, c)| l + c).zip(0..n).collect();
    ranked.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)));
    let take = n.div_ceil(2);
    let mut y = vec![0.0; n];
    for &(_, idx) in ranked.iter().take(take) {
        y[idx] = 1.0 / take as f64;
    }
    y
}

struct MlpScheduler {
    d: usize,
    w1: Vec<f64>, // d x 2
    b1: Vec<f64>,
    w2: Vec<f64>,
    b2: f64,
}

struct LstmScheduler {
    d: usize,
    /// input weights, gate-major: [i, f, g, o] x d x 2
    w: Vec<f64>,
    /// recurrent weights: [i, f, g, o] x d x d
    u: Vec<f64>,
    /// gate biases: [i, f, g, o] x d
    b: Vec<f64>,
    w_read: Vec<f64>,
    b_read: f64,
    /// hidden and cell state per memorized sample
    states: Vec<(Vec<f64>, Vec<f64>)>,
}

struct LstmStep {
    x: [f64; 2],
    h_prev: Vec<f64>,
    c_prev: Vec<f64>,
    gate_i: Vec<f64>,
    gate_f: Vec<f64>,
    gate_g: Vec<f64>,
    gate_o: Vec<f64>,
    tanh_c: Vec<f64>,
    h_new: Vec<f64>,
}

enum ForwardCache {
    Mlp { xs: Vec<[f64; 2]>, hidden: Vec<Vec<f64>> },
    Lstm { steps: Vec<LstmStep> },
}

/// Scheduler parameters plus (for the LSTM) per-memorized-sample recurrent
/// state carried across iterations.
pub struct SchedulerState {
    pub variant: SchedulerVariant,
    mlp: Option<MlpScheduler>,
    lstm: Option<LstmScheduler>,
    cache: Option<(ForwardCache, Vec<f64> /* pi */)>,
}

impl SchedulerState {
    /// `num_memorized` sizes the recurrent state (zeros at the memorization
    /// point); `hidden` is d_l.
    pub fn new(variant: SchedulerVariant, hidden: usize, num_memorized: usize, seed: u64) -> Self {
        let mut rng = rng::stream(seed, "phi-init", 0);
        let mut draw = |n: usize| (0..n).map(|_| rng.gen_range(-0.1..=0.1)).collect::<Vec<f64>>();
        let mlp = (variant == SchedulerVariant::Mlp).then(|| MlpScheduler {
            d: hidden,
            w1: draw(hidden * 2),
            b1: vec![0.0; hidden],
            w2: draw(hidden),
            b2: 0.0,
        });
        let lstm = (variant == SchedulerVariant::Lstm).then(|| LstmScheduler {
            d: hidden,
            w: draw(4 * hidden * 2),
            u: draw(4 * hidden * hidden),
            b: vec![0.0; 4 * hidden],
            w_read: draw(hidden),
            b_read: 0.0,
            states: vec![(vec![0.0; hidden], vec![0.0; hidden]); num_memorized],
        });
        Self { variant, mlp, lstm, cache: None }
    }

    /// Number of learnable parameters.
    pub fn param_count(&self) -> usize {
        match self.variant {
            SchedulerVariant::Mlp => {
                let m = self.mlp.as_ref().unwrap();
                m.w1.len() + m.b1.len() + m.w2.len() + 1
            }
            SchedulerVariant::Lstm => {
                let l = self.lstm.as_ref().unwrap();
                l.w.len() + l.u.len() + l.b.len() + l.w_read.len() + 1
            }
            SchedulerVariant::TopF => 0,
        }
    }

    /// Flat view of the parameters (LSTM: W, U, b, readout; MLP: w1, b1, w2, b2).
    pub fn params_flat(&self) -> Vec<f64> {
        match self.variant {
            SchedulerVariant::Mlp => {
                let m = self.mlp.as_ref().unwrap();
                let mut out = m.w1.clone();
                out.extend(&m.b1);
                out.extend(&m.w2);
                out.push(m.b2);
                out
            }
            SchedulerVariant::Lstm => {
                let l = self.lstm.as_ref().unwrap();
                let mut out = l.w.clone();
                out.extend(&l.u);
                out.extend(&l.b);
                out.extend(&l.w_read);
                out.push(l.b_read);
                out
            }
            SchedulerVariant::TopF => Vec::new(),
        }
    }

    pub fn set_params_flat(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.param_count() {
            return Err(Error::Argument(format!(
                "expected {} parameters, got {}",
                self.param_count(),
                flat.len()
            )));
        }
        match self.variant {
            SchedulerVariant::Mlp => {
                let m = self.mlp.as_mut().unwrap();
                let mut it = flat.iter().copied();
                for v in m.w1.iter_mut().chain(m.b1.iter_mut()).chain(m.w2.iter_mut()) {
                    *v = it.next().unwrap();
                }
                m.b2 = it.next().unwrap();
            }
            SchedulerVariant::Lstm => {
                let l = self.lstm.as_mut().unwrap();
                let mut it = flat.iter().copied();
                for v in l
                    .w
                    .iter_mut()
                    .chain(l.u.iter_mut())
                    .chain(l.b.iter_mut())
                    .chain(l.w_read.iter_mut())
                {
                    *v = it.next().unwrap();
                }
                l.b_read = it.next().unwrap();
            }
            SchedulerVariant::TopF => {}
        }
        Ok(())
    }

    /// Clone parameters and recurrent state (used by gradient checks).
    pub fn clone_state(&self) -> Self {
        let mlp = self.mlp.as_ref().map(|m| MlpScheduler {
            d: m.d,
            w1: m.w1.clone(),
            b1: m.b1.clone(),
            w2: m.w2.clone(),
            b2: m.b2,
        });
        let lstm = self.lstm.as_ref().map(|l| LstmScheduler {
            d: l.d,
            w: l.w.clone(),
            u: l.u.clone(),
            b: l.b.clone(),
            w_read: l.w_read.clone(),
            b_read: l.b_read,
            states: l.states.clone(),
        });
        Self { variant: self.variant, mlp, lstm, cache: None }
    }

    /// Score a memorized mini-batch: `ids` index into the memorized snapshot
    /// (the LSTM advances each sample's recurrent state exactly once).
    /// Returns the raw scores and their softmax probabilities.
    pub fn forward(&mut self, ids: &[usize], feats: &[SchedFeatures]) -> Result<(Vec<f64>, Vec<f64>)> {
        if feats.is_empty() || ids.len() != feats.len() {
            return Err(Error::Argument("forward needs matching, non-empty ids and features".into()));
        }
        let mut o = Vec::with_capacity(feats.len());
        let cache = match self.variant {
            SchedulerVariant::TopF => {
                return Err(Error::Unsupported("top-F variant has no scorer network".into()))
            }
            SchedulerVariant::Mlp => {
                let m = self.mlp.as_ref().unwrap();
                let mut xs = Vec::with_capacity(feats.len());
                let mut hidden = Vec::with_capacity(feats.len());
                for f in feats {
                    let x = [f.loss, f.grad_cos];
                    let mut r = vec![0.0; m.d];
                    let mut out = m.b2;
                    for j in 0..m.d {
                        let z = m.w1[j * 2] * x[0] + m.w1[j * 2 + 1] * x[1] + m.b1[j];
                        if z > 0.0 {
                            r[j] = z;
                            out += m.w2[j] * z;
                        }
                    }
                    xs.push(x);
                    hidden.push(r);
                    o.push(out);
                }
                ForwardCache::Mlp { xs, hidden }
            }
            SchedulerVariant::Lstm => {
                let l = self.lstm.as_mut().unwrap();
                let d = l.d;
                let mut steps = Vec::with_capacity(feats.len());
                for (&id, f) in ids.iter().zip(feats) {
                    if id >= l.states.len() {
                        return Err(Error::Argument(format!(
                            "memorized id {id} outside recurrent state table ({})",
                            l.states.len()
                        )));
                    }
                    let x = [f.loss, f.grad_cos];
                    let (h_prev, c_prev) = l.states[id].clone();
                    let mut gates = [vec![0.0; d], vec![0.0; d], vec![0.0; d], vec![0.0; d]];
                    for (g, gate) in gates.iter_mut().enumerate() {
                        for j in 0..d {
                            let row = g * d + j;
                            let z = l.b[row]
                                + l.w[row * 2] * x[0]
                                + l.w[row * 2 + 1] * x[1]
                                + model::dot4(&l.u[row * d..(row + 1) * d], &h_prev);
                            gate[j] = if g == 2 { z.tanh() } else { sigmoid(z) };
                        }
                    }
                    let [gate_i, gate_f, gate_g, gate_o] = gates;
                    let mut c_new = vec![0.0; d];
                    let mut tanh_c = vec![0.0; d];
                    let mut h_new = vec![0.0; d];
                    let mut out = l.b_read;
                    for j in 0..d {
                        c_new[j] = gate_f[j] * c_prev[j] + gate_i[j] * gate_g[j];
                        tanh_c[j] = c_new[j].tanh();
                        h_new[j] = gate_o[j] * tanh_c[j];
                        out += l.w_read[j] * h_new[j];
                    }
                    l.states[id] = (h_new.clone(), c_new);
                    steps.push(LstmStep {
                        x,
                        h_prev,
                        c_prev,
                        gate_i,
                        gate_f,
                        gate_g,
                        gate_o,
                        tanh_c,
                        h_new,
                    });
                    o.push(out);
                }
                ForwardCache::Lstm { steps }
            }
        };
        let pi = softmax(&o);
        self.cache = Some((cache, pi.clone()));
        Ok((o, pi))
    }

    /// Descend `phi` on the y-weighted memorized loss after the committed
    /// update, backpropagating through the Gumbel-softmax and the scorer.
    /// A no-op for the parameter-free top-F variant.
    pub fn update_phi(
        &mut self,
        feats: &[SchedFeatures],
        draw: &GumbelDraw,
        mem_losses_after: &[f64],
        eta2: f64,
    ) -> Result<()> {
        if self.variant == SchedulerVariant::TopF {
            return Ok(());
        }
        let (cache, pi) = self
            .cache
            .take()
            .ok_or_else(|| Error::Contract("update_phi without a cached forward pass".into()))?;
        let n = pi.len();
        if feats.len() != n || draw.y.len() != n || mem_losses_after.len() != n {
            return Err(Error::Argument("update_phi arguments disagree with the cached batch".into()));
        }
        if mem_losses_after.iter().any(|l| !l.is_finite()) {
            return Err(Error::Numeric("non-finite memorized loss".into()));
        }

        // J = sum_m y_m L_m; back through y = softmax((log pi + g)/tau)
        // and pi = softmax(o).
        let weighted_mean: f64 = draw.y.iter().zip(mem_losses_after).map(|(y, l)| y * l).sum();
        let d_a: Vec<f64> = draw
            .y
            .iter()
            .zip(mem_losses_after)
            .map(|(y, l)| y * (l - weighted_mean))
            .collect();
        let d_a_sum: f64 = d_a.iter().sum();
        let d_o: Vec<f64> =
            d_a.iter().zip(&pi).map(|(da, p)| (da - p * d_a_sum) / draw.tau).collect();

        match cache {
            ForwardCache::Mlp { xs, hidden } => {
                let m = self.mlp.as_mut().unwrap();
                let mut gw1 = vec![0.0; m.w1.len()];
                let mut gb1 = vec![0.0; m.b1.len()];
                let mut gw2 = vec![0.0; m.w2.len()];
                let mut gb2 = 0.0;
                for (idx, d_out) in d_o.iter().enumerate() {
                    let x = xs[idx];
                    let r = &hidden[idx];
                    gb2 += d_out;
                    for j in 0..m.d {
                        gw2[j] += d_out * r[j];
                        if r[j] > 0.0 {
                            let da = d_out * m.w2[j];
                            gw1[j * 2] += da * x[0];
                            gw1[j * 2 + 1] += da * x[1];
                            gb1[j] += da;
                        }
                    }
                }
                for (v, g) in m.w1.iter_mut().zip(&gw1) {
                    *v -= eta2 * g;
                }
                for (v, g) in m.b1.iter_mut().zip(&gb1) {
                    *v -= eta2 * g;
                }
                for (v, g) in m.w2.iter_mut().zip(&gw2) {
                    *v -= eta2 * g;
                }
                m.b2 -= eta2 * gb2;
            }
            ForwardCache::Lstm { steps } => {
                let l = self.lstm.as_mut().unwrap();
                let d = l.d;
                let mut gw = vec![0.0; l.w.len()];
                let mut gu = vec![0.0; l.u.len()];
                let mut gb = vec![0.0; l.b.len()];
                let mut gw_read = vec![0.0; l.w_read.len()];
                let mut gb_read = 0.0;
                for (step, d_out) in steps.iter().zip(&d_o) {
                    gb_read += d_out;
                    for j in 0..d {
                        gw_read[j] += d_out * step.h_new[j];
                    }
                    // one cell step; the incoming state is a constant input
                    for j in 0..d {
                        let dh = d_out * l.w_read[j];
                        let dgate_o = dh * step.tanh_c[j];
                        let dc = dh * step.gate_o[j] * (1.0 - step.tanh_c[j] * step.tanh_c[j]);
                        let di = dc * step.gate_g[j];
                        let dg = dc * step.gate_i[j];
                        let df = dc * step.c_prev[j];
                        let das = [
                            di * step.gate_i[j] * (1.0 - step.gate_i[j]),
                            df * step.gate_f[j] * (1.0 - step.gate_f[j]),
                            dg * (1.0 - step.gate_g[j] * step.gate_g[j]),
                            dgate_o * step.gate_o[j] * (1.0 - step.gate_o[j]),
                        ];
                        for (g, da) in das.iter().enumerate() {
                            let row = g * d + j;
                            gw[row * 2] += da * step.x[0];
                            gw[row * 2 + 1] += da * step.x[1];
                            gb[row] += da;
                            let gurow = &mut gu[row * d..(row + 1) * d];
                            for k in 0..d {
                                gurow[k] += da * step.h_prev[k];
                            }
                        }
                    }
                }
                for (v, g) in l.w.iter_mut().zip(&gw) {
                    *v -= eta2 * g;
                }
                for (v, g) in l.u.iter_mut().zip(&gu) {
                    *v -= eta2 * g;
                }
                for (v, g) in l.b.iter_mut().zip(&gb) {
                    *v -= eta2 * g;
                }
                for (v, g) in l.w_read.iter_mut().zip(&gw_read) {
                    *v -= eta2 * g;
                }
                l.b_read -= eta2 * gb_read;
            }
        }
        Ok(())
    }
}
