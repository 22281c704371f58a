//! Ranking evaluation (Recall@K / NDCG@K over the full catalogue), memory
//! rate diagnostics, and the learned-weight distribution export.

use std::collections::HashSet;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use crate::dataset::InteractionTable;
use crate::error::{Error, Result};
use crate::model::{dot4, ModelParams};

/// Which held-out split to rank against.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EvalSplit {
    Val,
    Test,
}

/// Top-K items for one user, ordered by descending score with ties broken by
/// ascending item index.
#[derive(Debug, Clone)]
pub struct RankedList {
    pub items: Vec<u32>,
    pub scores: Vec<f64>,
}

/// Rank all items not in `exclude` for the given user.
pub fn rank_top_k(params: &ModelParams, user: u32, exclude: &HashSet<u32>, k: usize) -> RankedList {
    let pu = params.user_row(user as usize);
    let base = params.user_bias[user as usize] + params.global_bias;
    let mut scored: Vec<(f64, u32)> = Vec::with_capacity(params.num_items());
    for item in 0..params.num_items() {
        if exclude.contains(&(item as u32)) {
            continue;
        }
        let qi = params.item_row(item);
        let s = base + params.item_bias[item] + dot4(pu, qi);
        scored.push((s, item as u32));
    }
    let k = k.min(scored.len());
    if k == 0 {
        return RankedList { items: vec![], scores: vec![] };
    }
    let by_rank = |a: &(f64, u32), b: &(f64, u32)| {
        b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1))
    };
    scored.select_nth_unstable_by(k - 1, by_rank);
    scored.truncate(k);
    scored.sort_by(by_rank);
    RankedList { items: scored.iter().map(|&(_, i)| i).collect(), scores: scored.iter().map(|&(s, _)| s).collect() }
}

/// `|topk[..k] ∩ relevant| / |relevant|`; `None` when there is nothing
/// relevant (the user is skipped in averaging).
pub fn recall_at_k(topk: &[u32], relevant: &HashSet<u32>, k: usize) -> Option<f64> {
    if relevant.is_empty() {
        return None;
    }
    let hits = topk.iter().take(k).filter(|i| relevant.contains(i)).count();
    Some(hits as f64 / relevant.len() as f64)
}

/// Binary-relevance NDCG with the `1/log2(rank+1)` discount.
pub fn ndcg_at_k(topk: &[u32], relevant: &HashSet<u32>, k: usize) -> Option<f64> {
    if relevant.is_empty() {
        return None;
    }
    let discount = |rank: usize| 1.0 / ((rank + 1) as f64).log2();
    let dcg: f64 = topk
        .iter()
        .take(k)
        .enumerate()
        .filter(|(_, i)| relevant.contains(i))
        .map(|(pos, _)| discount(pos + 1))
        .sum();
    let ideal: f64 = (1..=k.min(relevant.len())).map(discount).sum();
    Some(dcg / ideal)
}

/// Metrics averaged over users with a non-empty relevant set.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricReport {
    pub k_values: Vec<usize>,
    pub recall: Vec<f64>,
    pub ndcg: Vec<f64>,
    pub users_evaluated: usize,
    pub users_skipped: usize,
}

impl MetricReport {
    pub fn recall_at(&self, k: usize) -> Option<f64> {
        self.k_values.iter().position(|&v| v == k).map(|idx| self.recall[idx])
    }

    pub fn ndcg_at(&self, k: usize) -> Option<f64> {
        self.k_values.iter().position(|&v| v == k).map(|idx| self.ndcg[idx])
    }
}

/// Full-ranking evaluation: candidates are all items minus the user's train
/// positives (minus validation positives when scoring the test split).
pub fn evaluate_ranking(
    params: &ModelParams,
    table: &InteractionTable,
    ks: &[usize],
    split: EvalSplit,
) -> Result<MetricReport> {
    if ks.is_empty() {
        return Err(Error::Argument("need at least one cutoff K".into()));
    }
    let sets = table.splits()?;
    let max_k = *ks.iter().max().unwrap();

    let mut relevant: Vec<HashSet<u32>> = vec![HashSet::new(); table.num_users];
    let held_out = match split {
        EvalSplit::Val => &sets.val,
        EvalSplit::Test => &sets.test,
    };
    for &idx in held_out {
        let x = &table.interactions[idx];
        relevant[x.user as usize].insert(x.item);
    }

    let mut exclude: Vec<HashSet<u32>> = vec![HashSet::new(); table.num_users];
    for &idx in &sets.train {
        let x = &table.interactions[idx];
        exclude[x.user as usize].insert(x.item);
    }
    if split == EvalSplit::Test {
        for &idx in &sets.val {
            let x = &table.interactions[idx];
            exclude[x.user as usize].insert(x.item);
        }
    }

    let users: Vec<usize> =
        (0..table.num_users).filter(|&u| !relevant[u].is_empty()).collect();
    let skipped = table.num_users - users.len();
    let evaluated = users.len();

    // fixed chunking keeps the summation order machine-independent; the
    // chunks only buy wall-clock parallelism
    let chunk_size = users.len().div_ceil(4).max(1);
    let partials: Vec<(Vec<f64>, Vec<f64>)> = std::thread::scope(|scope| {
        let handles: Vec<_> = users
            .chunks(chunk_size)
            .map(|chunk| {
                let relevant = &relevant;
                let exclude = &exclude;
                scope.spawn(move || {
                    let mut recall_sums = vec![0.0; ks.len()];
                    let mut ndcg_sums = vec![0.0; ks.len()];
                    for &user in chunk {
                        let ranked = rank_top_k(params, user as u32, &exclude[user], max_k);
                        for (slot, &k) in ks.iter().enumerate() {
                            recall_sums[slot] +=
                                recall_at_k(&ranked.items, &relevant[user], k).unwrap();
                            ndcg_sums[slot] +=
                                ndcg_at_k(&ranked.items, &relevant[user], k).unwrap();
                        }
                    }
                    (recall_sums, ndcg_sums)
                })
            })
            .collect();
        handles.into_iter().map(|h| h.join().unwrap()).collect()
    });
    let mut recall_sums = vec![0.0; ks.len()];
    let mut ndcg_sums = vec![0.0; ks.len()];
    for (r, n) in partials {
        for (slot, v) in r.into_iter().enumerate() {
            recall_sums[slot] += v;
        }
        for (slot, v) in n.into_iter().enumerate() {
            ndcg_sums[slot] += v;
        }
    }
    let denom = evaluated.max(1) as f64;
    Ok(MetricReport {
        k_values: ks.to_vec(),
        recall: recall_sums.into_iter().map(|s| s / denom).collect(),
        ndcg: ndcg_sums.into_iter().map(|s| s / denom).collect(),
        users_evaluated: evaluated,
        users_skipped: skipped,
    })
}

/// Fractions of clean / noisy train positives currently memorized.
pub fn memory_rate(memorized: &[usize], table: &InteractionTable) -> Result<(f64, f64)> {
    if !table.has_noise_flags() {
        return Err(Error::Unsupported("memory rate needs ground-truth noise flags".into()));
    }
    let positives = table.train_positives()?;
    let clean_total =
        positives.iter().filter(|&&i| table.interactions[i].noise_flag == Some(false)).count();
    let noisy_total = positives.len() - clean_total;
    let clean_mem =
        memorized.iter().filter(|&&i| table.interactions[i].noise_flag == Some(false)).count();
    let noisy_mem = memorized.len() - clean_mem;
    let rate = |num: usize, den: usize| if den == 0 { 0.0 } else { num as f64 / den as f64 };
    Ok((rate(clean_mem, clean_total), rate(noisy_mem, noisy_total)))
}

/// Write the per-sample `(loss, weight, noise_flag)` rows for weight
/// distribution analysis.
pub fn export_weight_distribution(
    rows: &[(f64, f64, Option<bool>)],
    path: &Path,
) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    writeln!(w, "loss,weight,noise_flag")?;
    for (loss, weight, flag) in rows {
        let flag = match flag {
            Some(true) => "1",
            Some(false) => "0",
            None => "",
        };
        writeln!(w, "{loss:.9},{weight:.9},{flag}")?;
    }
    w.flush()?;
    Ok(())
}
