//! Self-guided weighting: a one-hidden-layer weighting network mapping a
//! sample loss to a weight in (0, 1), the assumed (lookahead) model update,
//! the explicit chain-rule meta-step that adjusts the weighting network from
//! memorized-sample gradients, and the committed model update.

use rand::Rng;

use crate::error::{Error, Result};
use crate::model::{
    self, bce_from_score, bpr_from_scores, pairwise_grad_entries, pointwise_grad_entries, sigmoid,
    Coord, ModelParams, ParamBlock, SampleKind, SparseGrad, TrainSample,
};
use crate::rng;

/// One-hidden-layer weighting function: `sigmoid(w_out . relu(w_in * L + b) + b_out)`.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightNet {
    pub w_in: Vec<f64>,
    pub b_hidden: Vec<f64>,
    pub w_out: Vec<f64>,
    pub b_out: f64,
}

/// Gradient of the emitted weight with respect to every network parameter.
#[derive(Debug, Clone)]
pub struct WeightNetGrad {
    pub w_in: Vec<f64>,
    pub b_hidden: Vec<f64>,
    pub w_out: Vec<f64>,
    pub b_out: f64,
}

impl WeightNet {
    /// Hidden units start as hinge features with kinks spread over the
    /// typical loss range (half opening upward, half downward), so the
    /// network can immediately express non-monotone weightings. Output
    /// weights are small and the output bias zero, keeping every initial
    /// weight near the neutral 0.5.
    pub fn init(hidden: usize, seed: u64) -> Self {
        let mut rng = rng::stream(seed, "psi-init", 0);
        let mut w_in = Vec::with_capacity(hidden);
        let mut b_hidden = Vec::with_capacity(hidden);
        for j in 0..hidden {
            let slope: f64 = rng.gen_range(0.5..=1.5);
            let slope = if j % 2 == 0 { slope } else { -slope };
            let kink: f64 = rng.gen_range(0.0..=2.0);
            w_in.push(slope);
            b_hidden.push(-slope * kink);
        }
        let w_out = (0..hidden).map(|_| rng.gen_range(-0.05..=0.05)).collect();
        Self { w_in, b_hidden, w_out, b_out: 0.0 }
    }

    pub fn hidden(&self) -> usize {
        self.w_in.len()
    }

    /// The weight assigned to a sample with the given loss.
    pub fn weight_of(&self, loss: f64) -> f64 {
        let mut out = self.b_out;
        for j in 0..self.hidden() {
            let z = self.w_in[j] * loss + self.b_hidden[j];
            if z > 0.0 {
                out += self.w_out[j] * z;
            }
        }
        sigmoid(out)
    }

    /// Weight plus its analytic parameter gradient at this input.
    pub fn weight_and_grad(&self, loss: f64) -> (f64, WeightNetGrad) {
        let h = self.hidden();
        let mut relu = vec![0.0; h];
        let mut active = vec![false; h];
        let mut out = self.b_out;
        for j in 0..h {
            let z = self.w_in[j] * loss + self.b_hidden[j];
            if z > 0.0 {
                relu[j] = z;
                active[j] = true;
                out += self.w_out[j] * z;
            }
        }
        let w = sigmoid(out);
        let s = w * (1.0 - w);
        let mut grad = WeightNetGrad {
            w_in: vec![0.0; h],
            b_hidden: vec![0.0; h],
            w_out: vec![0.0; h],
            b_out: s,
        };
        for j in 0..h {
            grad.w_out[j] = s * relu[j];
            if active[j] {
                grad.b_hidden[j] = s * self.w_out[j];
                grad.w_in[j] = s * self.w_out[j] * loss;
            }
        }
        (w, grad)
    }

    /// `psi += scale * grad`
    pub fn axpy(&mut self, scale: f64, grad: &WeightNetGrad) {
        for j in 0..self.hidden() {
            self.w_in[j] += scale * grad.w_in[j];
            self.b_hidden[j] += scale * grad.b_hidden[j];
            self.w_out[j] += scale * grad.w_out[j];
        }
        self.b_out += scale * grad.b_out;
    }

    pub fn fingerprint(&self) -> u64 {
        let mut h = fnv_init();
        for &v in self.w_in.iter().chain(&self.b_hidden).chain(&self.w_out).chain([&self.b_out]) {
            h = fnv_u64(h, v.to_bits());
        }
        h
    }
}

/// Weight of a sample loss under the current weighting parameters.
pub fn weight_of(psi: &WeightNet, loss: f64) -> f64 {
    psi.weight_of(loss)
}

fn fnv_init() -> u64 {
    0xcbf2_9ce4_8422_2325
}

// word-at-a-time mix; the fingerprint only needs run-to-run stability
fn fnv_u64(h: u64, v: u64) -> u64 {
    let mut z = (h ^ v).wrapping_mul(0x9e37_79b9_7f4a_7c15);
    z ^= z >> 29;
    z = z.wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z ^ (z >> 32)
}

/// The lookahead parameters: the base model plus a sparse delta on the
/// coordinates touched by one weighted batch step. The base is never
/// mutated.
#[derive(Debug)]
pub struct AssumedParams<'a> {
    base: &'a ModelParams,
    /// Sorted by coordinate.
    delta: Vec<(Coord, f64)>,
    fingerprint: u64,
}

fn step_fingerprint(batch: &[TrainSample], eta1: f64, psi: &WeightNet, delta: &[(Coord, f64)]) -> u64 {
    let mut h = fnv_init();
    h = fnv_u64(h, eta1.to_bits());
    h = fnv_u64(h, psi.fingerprint());
    for s in batch {
        h = fnv_u64(h, s.id as u64);
    }
    for (coord, v) in delta {
        h = fnv_u64(h, (coord.block as u64) << 40 | (coord.row as u64) << 8 | coord.col as u64);
        h = fnv_u64(h, v.to_bits());
    }
    h
}

fn delta_lookup(delta: &[(Coord, f64)], c: Coord) -> f64 {
    match delta.binary_search_by(|probe| probe.0.cmp(&c)) {
        Ok(idx) => delta[idx].1,
        Err(_) => 0.0,
    }
}

impl<'a> AssumedParams<'a> {
    pub fn get(&self, c: Coord) -> f64 {
        self.base.get(c) + delta_lookup(&self.delta, c)
    }

    /// The step's sparse coordinate deltas, sorted by coordinate.
    pub fn delta(&self) -> &[(Coord, f64)] {
        &self.delta
    }

    fn gather_row(&self, block: ParamBlock, row: u32) -> Vec<f64> {
        let base = match block {
            ParamBlock::UserEmb => self.base.user_row(row as usize),
            ParamBlock::ItemEmb => self.base.item_row(row as usize),
            _ => unreachable!("gather_row is for embedding blocks"),
        };
        let mut out = base.to_vec();
        let lo = Coord { block, row, col: 0 };
        let start = self.delta.partition_point(|probe| probe.0 < lo);
        for (coord, v) in &self.delta[start..] {
            if coord.block != block || coord.row != row {
                break;
            }
            out[coord.col as usize] += v;
        }
        out
    }

    pub fn score(&self, user: u32, item: u32) -> Result<f64> {
        if user as usize >= self.base.num_users() || item as usize >= self.base.num_items() {
            return Err(Error::Argument(format!("score index out of range: ({user}, {item})")));
        }
        let pu = self.gather_row(ParamBlock::UserEmb, user);
        let qi = self.gather_row(ParamBlock::ItemEmb, item);
        Ok(model::dot4(&pu, &qi)
            + self.get(Coord::user_bias(user))
            + self.get(Coord::item_bias(item))
            + self.get(Coord::global_bias()))
    }

    pub fn sample_loss(&self, s: &TrainSample) -> Result<f64> {
        match s.kind {
            SampleKind::Pointwise { user, item, label } => {
                Ok(bce_from_score(self.score(user, item)?, label))
            }
            SampleKind::Pairwise { user, pos_item, neg_item } => {
                if pos_item == neg_item {
                    return Err(Error::Argument(format!("sample {} has pos_item == neg_item", s.id)));
                }
                Ok(bpr_from_scores(self.score(user, pos_item)?, self.score(user, neg_item)?))
            }
        }
    }

    /// `grad_theta L(theta_hat)`: the sample gradient evaluated at the
    /// lookahead parameters.
    pub fn sample_grad(&self, s: &TrainSample) -> Result<SparseGrad> {
        let entries = match s.kind {
            SampleKind::Pointwise { user, item, label } => {
                let dl_ds = sigmoid(self.score(user, item)?) - f64::from(label);
                let pu = self.gather_row(ParamBlock::UserEmb, user);
                let qi = self.gather_row(ParamBlock::ItemEmb, item);
                pointwise_grad_entries(user, item, &pu, &qi, dl_ds)
            }
            SampleKind::Pairwise { user, pos_item, neg_item } => {
                if pos_item == neg_item {
                    return Err(Error::Argument(format!("sample {} has pos_item == neg_item", s.id)));
                }
                let g = sigmoid(self.score(user, neg_item)? - self.score(user, pos_item)?);
                let pu = self.gather_row(ParamBlock::UserEmb, user);
                let q_pos = self.gather_row(ParamBlock::ItemEmb, pos_item);
                let q_neg = self.gather_row(ParamBlock::ItemEmb, neg_item);
                pairwise_grad_entries(user, pos_item, neg_item, &pu, &q_pos, &q_neg, g)
            }
        };
        Ok(SparseGrad { entries })
    }
}

/// Eq.-7-style lookahead: `theta_hat = theta - eta1/|B| * sum_k g(L_k; psi) grad_k`,
/// materialized only on the batch's coordinates.
pub fn assumed_update<'a>(
    theta: &'a ModelParams,
    batch: &[TrainSample],
    psi: &WeightNet,
    eta1: f64,
) -> Result<AssumedParams<'a>> {
    if batch.is_empty() {
        return Err(Error::Argument("assumed update needs a non-empty batch".into()));
    }
    let mut weights = Vec::with_capacity(batch.len());
    for s in batch {
        let loss = model::sample_loss(theta, s)?;
        if !loss.is_finite() {
            return Err(Error::Numeric(format!("non-finite loss for sample {}", s.id)));
        }
        weights.push(psi.weight_of(loss));
    }
    let delta = model::weighted_delta(theta, batch, &weights, eta1)?;
    let fingerprint = step_fingerprint(batch, eta1, psi, &delta);
    Ok(AssumedParams { base: theta, delta, fingerprint })
}

/// Explicit meta-gradient step on the weighting parameters:
/// `psi += eta1*eta2/|B| * sum_k (sum_m y_m G_mk) * dg/dpsi(L_k(theta))`
/// with `G_mk = grad L_m(theta_hat) . grad L_k(theta)`.
///
/// Returns the norm of the objective gradient with respect to psi.
pub fn psi_meta_step(
    theta: &ModelParams,
    theta_hat: &AssumedParams<'_>,
    batch: &[TrainSample],
    mem_batch: &[(TrainSample, f64)],
    psi: &mut WeightNet,
    eta1: f64,
    eta2: f64,
) -> Result<f64> {
    if batch.is_empty() || mem_batch.is_empty() {
        return Err(Error::Argument("meta step needs non-empty batches".into()));
    }
    let y_sum: f64 = mem_batch.iter().map(|(_, y)| y).sum();
    if mem_batch.iter().any(|(_, y)| *y < 0.0) || (y_sum - 1.0).abs() > 1e-6 {
        return Err(Error::Argument(format!("mem weights must be normalized, sum {y_sum}")));
    }

    // recompute the batch at theta; the fingerprint ties theta_hat to it
    let mut losses = Vec::with_capacity(batch.len());
    let mut weights = Vec::with_capacity(batch.len());
    let mut wgrads = Vec::with_capacity(batch.len());
    let mut grads = Vec::with_capacity(batch.len());
    for s in batch {
        let loss = model::sample_loss(theta, s)?;
        let (w, wg) = psi.weight_and_grad(loss);
        losses.push(loss);
        weights.push(w);
        wgrads.push(wg);
        grads.push(model::sample_grad(theta, s)?);
    }
    let delta = model::weighted_delta(theta, batch, &weights, eta1)?;
    if step_fingerprint(batch, eta1, psi, &delta) != theta_hat.fingerprint {
        return Err(Error::Contract(
            "theta_hat was not produced from this (theta, batch, psi, eta1)".into(),
        ));
    }

    // sorted (coord, k, value) terms over the batch, merged against the
    // memorized gradients coordinate by coordinate
    let mut batch_terms: Vec<(Coord, u32, f64)> = Vec::with_capacity(grads.len() * 8);
    for (k, grad) in grads.iter().enumerate() {
        for &(coord, v) in &grad.entries {
            batch_terms.push((coord, k as u32, v));
        }
    }
    batch_terms.sort_unstable_by(|a, b| a.0.cmp(&b.0).then(a.1.cmp(&b.1)));

    // c_k = sum_m y_m * (grad L_m(theta_hat) . grad L_k(theta))
    let mut coeff = vec![0.0; batch.len()];
    for (m_sample, y) in mem_batch {
        if *y == 0.0 {
            continue;
        }
        let mem_grad = theta_hat.sample_grad(m_sample)?;
        if !mem_grad.is_finite() {
            return Err(Error::Numeric(format!("non-finite memorized gradient {}", m_sample.id)));
        }
        for &(coord, v) in &mem_grad.entries {
            let start = batch_terms.partition_point(|t| t.0 < coord);
            for t in &batch_terms[start..] {
                if t.0 != coord {
                    break;
                }
                coeff[t.1 as usize] += y * v * t.2;
            }
        }
    }

    let scale = eta1 * eta2 / batch.len() as f64;
    let hidden = psi.hidden();
    let mut objective_grad = WeightNetGrad {
        w_in: vec![0.0; hidden],
        b_hidden: vec![0.0; hidden],
        w_out: vec![0.0; hidden],
        b_out: 0.0,
    };
    for (k, wg) in wgrads.iter().enumerate() {
        if coeff[k] == 0.0 {
            continue;
        }
        psi.axpy(scale * coeff[k], wg);
        // dF/dpsi = -(eta1/|B|) sum_k c_k dg/dpsi
        let c = -eta1 / batch.len() as f64 * coeff[k];
        for j in 0..hidden {
            objective_grad.w_in[j] += c * wg.w_in[j];
            objective_grad.b_hidden[j] += c * wg.b_hidden[j];
            objective_grad.w_out[j] += c * wg.w_out[j];
        }
        objective_grad.b_out += c * wg.b_out;
    }
    let grad_norm_sq = objective_grad.b_out * objective_grad.b_out
        + objective_grad.w_in.iter().map(|v| v * v).sum::<f64>()
        + objective_grad.b_hidden.iter().map(|v| v * v).sum::<f64>()
        + objective_grad.w_out.iter().map(|v| v * v).sum::<f64>();
    Ok(grad_norm_sq.sqrt())
}

/// Committed update (Eq.-9-style): weights come from the updated psi, while
/// losses and gradients are evaluated at theta, not at the lookahead.
pub fn actual_update(
    theta: &mut ModelParams,
    batch: &[TrainSample],
    psi_new: &WeightNet,
    eta1: f64,
) -> Result<Vec<f64>> {
    let mut weights = Vec::with_capacity(batch.len());
    for s in batch {
        let loss = model::sample_loss(theta, s)?;
        if !loss.is_finite() {
            return Err(Error::Numeric(format!("non-finite loss for sample {}", s.id)));
        }
        weights.push(psi_new.weight_of(loss));
    }
    model::weighted_step(theta, batch, &weights, eta1)?;
    Ok(weights)
}

/// Per-iteration observability for the meta step.
#[derive(Debug, Clone, Copy)]
pub struct MetaStepReport {
    pub batch_loss_before: f64,
    pub batch_loss_after: f64,
    pub mean_weight: f64,
    pub mean_weight_clean: Option<f64>,
    pub mean_weight_noisy: Option<f64>,
    pub psi_grad_norm: f64,
}
