//! Memorization instrumentation: per-interaction hit-ratio bits over a
//! sliding window, the memorized set, GMM-based noise-rate estimation, the
//! phase-transition rule, and memorization precision/recall diagnostics.

use crate::dataset::InteractionTable;
use crate::error::{Error, Result};
use crate::model::{dot4, ModelParams};

const VAR_FLOOR: f64 = 1e-6;

/// Ring buffer of the most recent memorization bits for one train positive.
#[derive(Debug, Clone, Copy, Default)]
struct Slot {
    bits: u32,
    len: u8,
}

impl Slot {
    fn push(&mut self, bit: bool, h: usize) {
        self.bits = ((self.bits << 1) | u32::from(bit)) & mask(h);
        self.len = (self.len + 1).min(h as u8);
    }

    fn score(&self) -> f64 {
        if self.len == 0 {
            return 0.0;
        }
        f64::from((self.bits & mask(self.len as usize)).count_ones()) / f64::from(self.len)
    }
}

fn mask(bits: usize) -> u32 {
    if bits >= 32 {
        u32::MAX
    } else {
        (1u32 << bits) - 1
    }
}

/// Tracks memorization bits for every train positive across epochs.
#[derive(Debug, Clone)]
pub struct MemTracker {
    pub h: usize,
    pub epoch: usize,
    slots: Vec<Slot>,
    /// slot -> interaction index in the table
    slot_interaction: Vec<usize>,
    /// (user, [(slot, item)]) for every user with train positives
    user_slots: Vec<(u32, Vec<(usize, u32)>)>,
    memorized: Vec<bool>,
    mem_count: usize,
}

impl MemTracker {
    pub fn new(table: &InteractionTable, h: usize) -> Result<Self> {
        if h == 0 || h > 32 {
            return Err(Error::Argument(format!("window h must lie in 1..=32, got {h}")));
        }
        let positives = table.train_positives()?;
        let mut per_user: Vec<Vec<(usize, u32)>> = vec![Vec::new(); table.num_users];
        let mut slot_interaction = Vec::with_capacity(positives.len());
        for (slot, &idx) in positives.iter().enumerate() {
            let x = &table.interactions[idx];
            per_user[x.user as usize].push((slot, x.item));
            slot_interaction.push(idx);
        }
        let user_slots = per_user
            .into_iter()
            .enumerate()
            .filter(|(_, slots)| !slots.is_empty())
            .map(|(u, slots)| (u as u32, slots))
            .collect();
        Ok(Self {
            h,
            epoch: 0,
            slots: vec![Slot::default(); slot_interaction.len()],
            slot_interaction,
            user_slots,
            memorized: vec![false; positives.len()],
            mem_count: 0,
        })
    }

    pub fn num_slots(&self) -> usize {
        self.slots.len()
    }

    /// `|M_t|`
    pub fn mem_count(&self) -> usize {
        self.mem_count
    }

    /// Interaction indices of the current memorized set, ascending.
    pub fn memorized_interactions(&self) -> Vec<usize> {
        let mut ids: Vec<usize> = self
            .memorized
            .iter()
            .enumerate()
            .filter(|(_, &m)| m)
            .map(|(slot, _)| self.slot_interaction[slot])
            .collect();
        ids.sort_unstable();
        ids
    }
}

/// Window-mean memorization score of a bit history (partial windows use the
/// available bits). An empty history scores 0 and counts as not memorized.
pub fn mem_score(history: &[bool], h: usize) -> f64 {
    if history.is_empty() {
        return 0.0;
    }
    let window = &history[history.len().saturating_sub(h)..];
    window.iter().filter(|&&b| b).count() as f64 / window.len() as f64
}

/// Score every item for every user, mark each train positive as memorized
/// this epoch iff it ranks inside the user's top-`N_u` (ties broken by
/// ascending item index), push the bit, and refresh the memorized set.
/// The per-user ranking fans out over worker threads; the bits are exact,
/// so the merge is order-independent.
pub fn epoch_memorization_pass(params: &ModelParams, tracker: &mut MemTracker) -> Result<()> {
    let num_items = params.num_items();
    let chunk_size = tracker.user_slots.len().div_ceil(4).max(1);
    let hits: Vec<Result<Vec<(usize, bool)>>> = std::thread::scope(|scope| {
        let handles: Vec<_> = tracker
            .user_slots
            .chunks(chunk_size)
            .map(|chunk| {
                scope.spawn(move || {
                    let mut out = Vec::new();
                    let mut scored: Vec<(f64, u32)> = Vec::with_capacity(num_items);
                    for (user, slots) in chunk {
                        let n_u = slots.len().min(num_items);
                        scored.clear();
                        let pu = params.user_row(*user as usize);
                        let base = params.user_bias[*user as usize] + params.global_bias;
                        for item in 0..num_items {
                            let qi = params.item_row(item);
                            let s = base + params.item_bias[item] + dot4(pu, qi);
                            if !s.is_finite() {
                                return Err(Error::Numeric(format!(
                                    "non-finite score for user {user}"
                                )));
                            }
                            scored.push((s, item as u32));
                        }
                        scored.select_nth_unstable_by(n_u - 1, |a, b| {
                            b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1))
                        });
                        let mut top: Vec<u32> = scored[..n_u].iter().map(|&(_, i)| i).collect();
                        top.sort_unstable();
                        for &(slot, item) in slots {
                            out.push((slot, top.binary_search(&item).is_ok()));
                        }
                    }
                    Ok(out)
                })
            })
            .collect();
        handles.into_iter().map(|h| h.join().unwrap()).collect()
    });

    for chunk in hits {
        for (slot, hit) in chunk? {
            let was = tracker.memorized[slot];
            let state = &mut tracker.slots[slot];
            state.push(hit, tracker.h);
            let now = state.score() > 0.5;
            tracker.memorized[slot] = now;
            match (was, now) {
                (false, true) => tracker.mem_count += 1,
                (true, false) => tracker.mem_count -= 1,
                _ => {}
            }
        }
    }
    tracker.epoch += 1;
    Ok(())
}

/// One Gaussian of the two-component mixture.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GmmComponent {
    pub mean: f64,
    pub var: f64,
    pub weight: f64,
}

/// EM fit of a two-component 1-D Gaussian mixture.
#[derive(Debug, Clone, PartialEq)]
pub struct GmmFit {
    pub components: [GmmComponent; 2],
    /// Log-likelihood after each E step (non-decreasing).
    pub log_likelihood: Vec<f64>,
}

impl GmmFit {
    /// Index of the component with the larger mean.
    pub fn high_component(&self) -> usize {
        usize::from(self.components[1].mean > self.components[0].mean)
    }

    /// Posterior probability that `x` belongs to component `c`.
    pub fn posterior(&self, x: f64, c: usize) -> f64 {
        let l0 = self.components[0].weight.max(1e-300).ln() + log_normal_pdf(x, &self.components[0]);
        let l1 = self.components[1].weight.max(1e-300).ln() + log_normal_pdf(x, &self.components[1]);
        let m = l0.max(l1);
        let (e0, e1) = ((l0 - m).exp(), (l1 - m).exp());
        let total = e0 + e1;
        if c == 0 {
            e0 / total
        } else {
            e1 / total
        }
    }
}

fn log_normal_pdf(x: f64, c: &GmmComponent) -> f64 {
    let d = x - c.mean;
    -0.5 * (d * d / c.var + c.var.ln() + (2.0 * std::f64::consts::PI).ln())
}

fn quantile(sorted: &[f64], q: f64) -> f64 {
    let idx = ((sorted.len() - 1) as f64 * q).round() as usize;
    sorted[idx]
}

/// EM fit on losses already normalized to `[0, 1]` by the caller.
/// Means start at the 0.25/0.75 quantiles (falling back to min/max when
/// those coincide), variances at the sample variance, weights at 0.5.
pub fn fit_gmm(losses: &[f64], max_iters: usize, tol: f64) -> Result<GmmFit> {
    let n = losses.len();
    if n < 10 {
        return Err(Error::Argument(format!("need at least 10 samples for a mixture fit, got {n}")));
    }
    let mean: f64 = losses.iter().sum::<f64>() / n as f64;
    let var: f64 = losses.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n as f64;
    if var < 1e-12 {
        return Err(Error::DegenerateFit("all losses are (numerically) equal".into()));
    }

    let mut sorted = losses.to_vec();
    sorted.sort_unstable_by(|a, b| a.partial_cmp(b).unwrap());
    let mut m0 = quantile(&sorted, 0.25);
    let mut m1 = quantile(&sorted, 0.75);
    if (m1 - m0).abs() < 1e-9 {
        m0 = sorted[0];
        m1 = sorted[n - 1];
    }
    let mut comps = [
        GmmComponent { mean: m0, var: var.max(VAR_FLOOR), weight: 0.5 },
        GmmComponent { mean: m1, var: var.max(VAR_FLOOR), weight: 0.5 },
    ];

    let mut trace = Vec::new();
    let mut resp1 = vec![0.0; n];
    for _ in 0..max_iters {
        // E step
        let mut ll = 0.0;
        for (i, &x) in losses.iter().enumerate() {
            let l0 = comps[0].weight.max(1e-300).ln() + log_normal_pdf(x, &comps[0]);
            let l1 = comps[1].weight.max(1e-300).ln() + log_normal_pdf(x, &comps[1]);
            let m = l0.max(l1);
            let (e0, e1) = ((l0 - m).exp(), (l1 - m).exp());
            resp1[i] = e1 / (e0 + e1);
            ll += m + (e0 + e1).ln();
        }
        let improved = trace.last().map_or(true, |&prev| ll - prev >= tol);
        trace.push(ll);
        if !improved {
            break;
        }
        // M step
        let sum1: f64 = resp1.iter().sum();
        let sum0 = n as f64 - sum1;
        if sum0 < 1e-9 || sum1 < 1e-9 {
            break;
        }
        let mean0 = losses.iter().zip(&resp1).map(|(x, r)| x * (1.0 - r)).sum::<f64>() / sum0;
        let mean1 = losses.iter().zip(&resp1).map(|(x, r)| x * r).sum::<f64>() / sum1;
        let var0 = losses
            .iter()
            .zip(&resp1)
            .map(|(x, r)| (1.0 - r) * (x - mean0) * (x - mean0))
            .sum::<f64>()
            / sum0;
        let var1 =
            losses.iter().zip(&resp1).map(|(x, r)| r * (x - mean1) * (x - mean1)).sum::<f64>() / sum1;
        comps[0] = GmmComponent { mean: mean0, var: var0.max(VAR_FLOOR), weight: sum0 / n as f64 };
        comps[1] = GmmComponent { mean: mean1, var: var1.max(VAR_FLOOR), weight: sum1 / n as f64 };
    }
    Ok(GmmFit { components: comps, log_likelihood: trace })
}

/// Estimated noise rate: the mean posterior of the larger-mean mixture
/// component over min-max normalized losses. Degenerate inputs estimate 0.
pub fn estimate_noise_rate(losses: &[f64]) -> f64 {
    let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
    for &x in losses {
        lo = lo.min(x);
        hi = hi.max(x);
    }
    if losses.len() < 10 || !(hi - lo).is_finite() || hi - lo < 1e-12 {
        log::warn!("noise-rate estimate degenerate ({} losses, range {:e}); using 0", losses.len(), hi - lo);
        return 0.0;
    }
    let norm: Vec<f64> = losses.iter().map(|x| (x - lo) / (hi - lo)).collect();
    let fit = match fit_gmm(&norm, 100, 1e-6) {
        Ok(fit) => fit,
        Err(err) => {
            log::warn!("noise-rate estimate failed ({err}); using 0");
            return 0.0;
        }
    };
    let high = fit.high_component();
    norm.iter().map(|&x| fit.posterior(x, high)).sum::<f64>() / norm.len() as f64
}

/// Transition rule: enter self-guided learning once the memorized count
/// reaches the estimated clean share of the train positives.
pub fn should_transition(mem_count: usize, sigma_hat: f64, total: usize) -> bool {
    mem_count as f64 >= (1.0 - sigma_hat) * total as f64 - 1e-9
}

/// Memorization precision/recall against ground-truth flags.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MpMrReport {
    pub mp: f64,
    pub mr: f64,
    pub memorized: usize,
    pub memorized_clean: usize,
    pub clean_total: usize,
}

/// `MP = |R_t| / |M_t|`, `MR = |R_t| / |G|` where `R_t` is the clean part of
/// the memorized set and `G` the clean train positives.
pub fn mp_mr(memorized: &[usize], table: &InteractionTable) -> Result<MpMrReport> {
    if !table.has_noise_flags() {
        return Err(Error::Unsupported("MP/MR need ground-truth noise flags".into()));
    }
    let clean_total = table
        .train_positives()?
        .iter()
        .filter(|&&i| table.interactions[i].noise_flag == Some(false))
        .count();
    let memorized_clean =
        memorized.iter().filter(|&&i| table.interactions[i].noise_flag == Some(false)).count();
    let mp = if memorized.is_empty() { 0.0 } else { memorized_clean as f64 / memorized.len() as f64 };
    let mr = if clean_total == 0 { 0.0 } else { memorized_clean as f64 / clean_total as f64 };
    Ok(MpMrReport { mp, mr, memorized: memorized.len(), memorized_clean, clean_total })
}
