//! Interaction data: parsing, noise labeling, splitting, controlled noise
//! injection, and synthetic corpora with ground-truth flags.
//!
//! File format: one interaction per line, delimiter-separated fields
//! `user item rating [timestamp [noise_flag [split]]]`. The trailing two
//! fields are written by [`write_table`] so that an ingested dataset can be
//! reloaded byte-exactly, splits included.

use std::collections::HashSet;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;

use crate::error::{Error, Result};
use crate::rng;

/// One line of a ratings file, ids already re-indexed densely.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RawRating {
    pub user: u32,
    pub item: u32,
    pub rating: u8,
    pub timestamp: Option<i64>,
    /// Present only in canonical (exported) files.
    pub noise_flag: Option<bool>,
    /// Present only in canonical files that carry a split assignment.
    pub split: Option<Split>,
}

/// An observed implicit-feedback interaction.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Interaction {
    pub user: u32,
    pub item: u32,
    /// Observed training interactions carry label 1.
    pub label: u8,
    /// `Some(true)` iff the observed label disagrees with the true preference.
    pub noise_flag: Option<bool>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Val,
    Test,
}

/// Index sets partitioning the observed interactions.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct SplitSets {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

/// The feedback set with dense ids, adjacency, and optional splits.
#[derive(Debug, Clone, PartialEq)]
pub struct InteractionTable {
    pub interactions: Vec<Interaction>,
    pub num_users: usize,
    pub num_items: usize,
    /// All observed items per user, sorted ascending.
    pub adjacency: Vec<Vec<u32>>,
    pub splits: Option<SplitSets>,
}

impl InteractionTable {
    pub fn from_interactions(interactions: Vec<Interaction>) -> Self {
        let num_users = interactions.iter().map(|x| x.user as usize + 1).max().unwrap_or(0);
        let num_items = interactions.iter().map(|x| x.item as usize + 1).max().unwrap_or(0);
        let mut adjacency = vec![Vec::new(); num_users];
        for x in &interactions {
            adjacency[x.user as usize].push(x.item);
        }
        for items in &mut adjacency {
            items.sort_unstable();
        }
        Self { interactions, num_users, num_items, adjacency, splits: None }
    }

    /// True when ground-truth noise flags are available.
    pub fn has_noise_flags(&self) -> bool {
        !self.interactions.is_empty() && self.interactions.iter().all(|x| x.noise_flag.is_some())
    }

    pub fn splits(&self) -> Result<&SplitSets> {
        self.splits.as_ref().ok_or_else(|| Error::Argument("table has no splits".into()))
    }

    /// Train-positive interaction indices (label 1 in the train split).
    pub fn train_positives(&self) -> Result<Vec<usize>> {
        Ok(self.splits()?.train.iter().copied().filter(|&i| self.interactions[i].label == 1).collect())
    }

    /// Per-user sorted train-positive item lists, for negative sampling.
    pub fn train_adjacency(&self) -> Result<Vec<Vec<u32>>> {
        let mut adj = vec![Vec::new(); self.num_users];
        for &i in &self.splits()?.train {
            let x = &self.interactions[i];
            adj[x.user as usize].push(x.item);
        }
        for items in &mut adj {
            items.sort_unstable();
        }
        Ok(adj)
    }
}

fn reindex(ids: &[u64]) -> std::collections::HashMap<u64, u32> {
    let mut distinct: Vec<u64> = ids.to_vec();
    distinct.sort_unstable();
    distinct.dedup();
    distinct.into_iter().enumerate().map(|(dense, id)| (id, dense as u32)).collect()
}

/// Parse a ratings file. Ids are re-indexed densely (ascending original id)
/// in a second pass; blank lines are skipped.
pub fn parse_interactions(path: &Path, delim: &str) -> Result<Vec<RawRating>> {
    let file = File::open(path)?;
    let mut users = Vec::new();
    let mut items = Vec::new();
    let mut rows: Vec<(u64, u64, u8, Option<i64>, Option<bool>, Option<Split>)> = Vec::new();

    for (lineno, line) in BufReader::new(file).lines().enumerate() {
        let line = line?;
        let line = line.trim_end_matches(['\r', '\n']);
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(delim).collect();
        let err = |msg: String| Error::Parse { line: lineno + 1, msg };
        if fields.len() < 3 {
            return Err(err(format!("expected at least 3 fields, got {}", fields.len())));
        }
        let user: u64 = fields[0].trim().parse().map_err(|_| err(format!("bad user id {:?}", fields[0])))?;
        let item: u64 = fields[1].trim().parse().map_err(|_| err(format!("bad item id {:?}", fields[1])))?;
        let rating: u8 = fields[2].trim().parse().map_err(|_| err(format!("bad rating {:?}", fields[2])))?;
        if !(1..=5).contains(&rating) {
            return Err(err(format!("rating {rating} outside scale 1..5")));
        }
        let timestamp = match fields.get(3) {
            Some(f) if !f.trim().is_empty() => {
                Some(f.trim().parse::<i64>().map_err(|_| err(format!("bad timestamp {:?}", f)))?)
            }
            _ => None,
        };
        let noise_flag = match fields.get(4) {
            Some(f) if !f.trim().is_empty() => match f.trim() {
                "0" => Some(false),
                "1" => Some(true),
                other => return Err(err(format!("bad noise flag {other:?}"))),
            },
            _ => None,
        };
        let split = match fields.get(5) {
            Some(f) if !f.trim().is_empty() => match f.trim() {
                "train" => Some(Split::Train),
                "val" => Some(Split::Val),
                "test" => Some(Split::Test),
                other => return Err(err(format!("bad split {other:?}"))),
            },
            _ => None,
        };
        users.push(user);
        items.push(item);
        rows.push((user, item, rating, timestamp, noise_flag, split));
    }

    let user_map = reindex(&users);
    let item_map = reindex(&items);
    Ok(rows
        .into_iter()
        .map(|(u, i, rating, timestamp, noise_flag, split)| RawRating {
            user: user_map[&u],
            item: item_map[&i],
            rating,
            timestamp,
            noise_flag,
            split,
        })
        .collect())
}

/// Turn ratings into observed interactions; a rating strictly below
/// `threshold` marks the interaction as noisy.
pub fn label_noise_by_rating(ratings: &[RawRating], threshold: u8) -> Result<InteractionTable> {
    if !(1..=5).contains(&threshold) {
        return Err(Error::Argument(format!("threshold {threshold} outside rating scale")));
    }
    let interactions = ratings
        .iter()
        .map(|r| Interaction {
            user: r.user,
            item: r.item,
            label: 1,
            noise_flag: Some(r.rating < threshold),
        })
        .collect();
    Ok(InteractionTable::from_interactions(interactions))
}

/// Build a table from a canonical file's rows, honoring stored flags and
/// split assignments (all-or-none per file).
pub fn table_from_ratings(ratings: &[RawRating]) -> Result<InteractionTable> {
    let interactions: Vec<Interaction> = ratings
        .iter()
        .map(|r| Interaction { user: r.user, item: r.item, label: 1, noise_flag: r.noise_flag })
        .collect();
    let mut table = InteractionTable::from_interactions(interactions);
    let with_split = ratings.iter().filter(|r| r.split.is_some()).count();
    if with_split > 0 {
        if with_split != ratings.len() {
            return Err(Error::Argument("split column present on some lines but not all".into()));
        }
        let mut sets = SplitSets::default();
        for (idx, r) in ratings.iter().enumerate() {
            match r.split.unwrap() {
                Split::Train => sets.train.push(idx),
                Split::Val => sets.val.push(idx),
                Split::Test => sets.test.push(idx),
            }
        }
        table.splits = Some(sets);
    }
    Ok(table)
}

/// Per-user stratified split. Each user's interactions are shuffled and cut
/// by `ratios`; users with fewer than 3 interactions go entirely to train.
/// When noise flags exist, noisy draws assigned to test are moved back to
/// train so the test split stays clean.
pub fn split_dataset(table: &InteractionTable, ratios: (f64, f64, f64), seed: u64) -> Result<InteractionTable> {
    let (r_train, r_val, r_test) = ratios;
    if (r_train + r_val + r_test - 1.0).abs() > 1e-9 {
        return Err(Error::Argument(format!("split ratios must sum to 1, got {ratios:?}")));
    }
    if r_train <= 0.0 || r_val < 0.0 || r_test < 0.0 {
        return Err(Error::Argument("split ratios must be non-negative with positive train share".into()));
    }

    let mut rng = rng::stream(seed, "split", 0);
    let mut by_user: Vec<Vec<usize>> = vec![Vec::new(); table.num_users];
    for (idx, x) in table.interactions.iter().enumerate() {
        by_user[x.user as usize].push(idx);
    }

    let flags = table.has_noise_flags();
    let mut sets = SplitSets::default();
    for indices in by_user.iter_mut() {
        if indices.is_empty() {
            continue;
        }
        indices.shuffle(&mut rng);
        let n = indices.len();
        if n < 3 {
            sets.train.extend_from_slice(indices);
            continue;
        }
        let n_val = ((n as f64 * r_val).floor() as usize).max(usize::from(r_val > 0.0));
        let n_test = ((n as f64 * r_test).floor() as usize).max(usize::from(r_test > 0.0));
        let n_train = n - n_val - n_test;
        for (pos, &idx) in indices.iter().enumerate() {
            if pos < n_train {
                sets.train.push(idx);
            } else if pos < n_train + n_val {
                sets.val.push(idx);
            } else {
                let noisy = flags && table.interactions[idx].noise_flag == Some(true);
                if noisy {
                    sets.train.push(idx);
                } else {
                    sets.test.push(idx);
                }
            }
        }
    }
    sets.train.sort_unstable();
    sets.val.sort_unstable();
    sets.test.sort_unstable();
    if flags && sets.test.is_empty() && !table.interactions.is_empty() {
        log::warn!("clean-test filter left the test split empty");
    }

    let mut out = table.clone();
    out.splits = Some(sets);
    Ok(out)
}

/// Add `n = ceil(sigma * P / (1 - sigma))` uniformly sampled unobserved pairs
/// to the train split as noisy positives, so the noisy fraction of train
/// positives equals `sigma` within rounding.
pub fn inject_noise(clean: &InteractionTable, sigma: f64, seed: u64) -> Result<InteractionTable> {
    if !(0.0..1.0).contains(&sigma) {
        return Err(Error::Argument(format!("sigma must lie in [0, 1), got {sigma}")));
    }
    let splits = clean.splits()?;
    if clean.has_noise_flags()
        && splits.train.iter().any(|&i| clean.interactions[i].noise_flag == Some(true))
    {
        return Err(Error::Argument("train split already contains noisy interactions".into()));
    }
    let mut out = clean.clone();
    for x in &mut out.interactions {
        x.noise_flag = Some(x.noise_flag.unwrap_or(false));
    }
    if sigma == 0.0 {
        return Ok(out);
    }

    let train_positives = splits.train.len();
    let n = (sigma * train_positives as f64 / (1.0 - sigma)).ceil() as usize;
    let mut observed: HashSet<(u32, u32)> =
        clean.interactions.iter().map(|x| (x.user, x.item)).collect();
    let capacity = clean.num_users * clean.num_items;
    if capacity.saturating_sub(observed.len()) < n {
        return Err(Error::Argument(format!(
            "cannot inject {n} pairs: only {} unobserved pairs exist",
            capacity.saturating_sub(observed.len())
        )));
    }

    let mut rng = rng::stream(seed, "inject", 0);
    let sets = out.splits.as_mut().unwrap();
    let mut added = 0;
    while added < n {
        let user = rng.gen_range(0..clean.num_users as u32);
        let item = rng.gen_range(0..clean.num_items as u32);
        if !observed.insert((user, item)) {
            continue;
        }
        out.interactions.push(Interaction { user, item, label: 1, noise_flag: Some(true) });
        sets.train.push(out.interactions.len() - 1);
        out.adjacency[user as usize].push(item);
        added += 1;
    }
    for items in &mut out.adjacency {
        items.sort_unstable();
    }
    Ok(out)
}

/// Export a table in the canonical format. The rating column is synthesized
/// from the noise flag (5 clean / 1 noisy) so the file is also a valid input
/// for the default rating-threshold labeling rule.
pub fn write_table(table: &InteractionTable, path: &Path, delim: &str) -> Result<()> {
    let mut split_of: Vec<Option<Split>> = vec![None; table.interactions.len()];
    if let Some(sets) = &table.splits {
        for &i in &sets.train {
            split_of[i] = Some(Split::Train);
        }
        for &i in &sets.val {
            split_of[i] = Some(Split::Val);
        }
        for &i in &sets.test {
            split_of[i] = Some(Split::Test);
        }
    }
    let mut w = BufWriter::new(File::create(path)?);
    for (idx, x) in table.interactions.iter().enumerate() {
        let rating = match x.noise_flag {
            Some(true) => 1,
            _ => 5,
        };
        let flag = match x.noise_flag {
            Some(true) => "1",
            Some(false) => "0",
            None => "",
        };
        write!(w, "{}{delim}{}{delim}{rating}{delim}0{delim}{flag}", x.user, x.item)?;
        if table.splits.is_some() {
            let split = match split_of[idx] {
                Some(Split::Train) => "train",
                Some(Split::Val) => "val",
                Some(Split::Test) => "test",
                None => return Err(Error::Argument(format!("interaction {idx} missing from splits"))),
            };
            write!(w, "{delim}{split}")?;
        }
        writeln!(w)?;
    }
    w.flush()?;
    Ok(())
}

/// Read a canonical table (flags and splits restored when present).
pub fn read_table(path: &Path, delim: &str) -> Result<InteractionTable> {
    table_from_ratings(&parse_interactions(path, delim)?)
}

/// Configuration for the planted-preference synthetic generator.
#[derive(Debug, Clone)]
pub struct SyntheticConfig {
    pub num_users: usize,
    pub num_items: usize,
    /// Expected interactions per user (including the minimum).
    pub mean_per_user: usize,
    pub min_per_user: usize,
    pub latent_dim: usize,
    /// Sampling temperature: 0 plants each user's exact top items; larger
    /// values mix Gumbel noise into the selection, so interactions keep a
    /// learnable low-rank core plus per-user quirks that a model can only
    /// memorize.
    pub temperature: f64,
    /// Stochastic picks stay inside each user's top `pool_factor * n_u`
    /// items by true score, so clean quirks remain plausible preferences
    /// rather than unstructured tail draws.
    pub pool_factor: usize,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            num_users: 943,
            num_items: 1683,
            mean_per_user: 106,
            min_per_user: 20,
            latent_dim: 8,
            temperature: 0.5,
            pool_factor: 3,
            seed: 7,
        }
    }
}

/// Generate a clean table from planted low-rank preferences: each user's
/// positives are drawn from a hidden factor model (exact top items at
/// temperature 0, softmax sampling without replacement otherwise), so every
/// interaction reflects a true preference (noise_flag = false).
pub fn synthetic_clean(cfg: &SyntheticConfig) -> InteractionTable {
    let mut rng = rng::stream(cfg.seed, "synth", 0);
    let g = cfg.latent_dim;
    let scale = 1.0 / (g as f64).sqrt();
    let mut normal = BoxMuller::default();
    let user_f: Vec<f64> = (0..cfg.num_users * g).map(|_| normal.sample(&mut rng) * scale).collect();
    let item_f: Vec<f64> = (0..cfg.num_items * g).map(|_| normal.sample(&mut rng) * scale).collect();
    let item_bias: Vec<f64> = (0..cfg.num_items).map(|_| 0.8 * normal.sample(&mut rng)).collect();

    let cap = cfg.num_items / 3;
    let span = cfg.mean_per_user.saturating_sub(cfg.min_per_user) as f64;
    let by_score = |a: &(f64, u32), b: &(f64, u32)| {
        b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1))
    };
    let mut interactions = Vec::new();
    let mut scored: Vec<(f64, u32)> = Vec::with_capacity(cfg.num_items);
    for u in 0..cfg.num_users {
        let u_draw: f64 = rng.gen_range(0.0..1.0f64);
        let n_u = (cfg.min_per_user + (-(1.0 - u_draw).ln() * span) as usize).min(cap);
        scored.clear();
        for i in 0..cfg.num_items {
            let mut s = item_bias[i];
            for k in 0..g {
                s += user_f[u * g + k] * item_f[i * g + k];
            }
            scored.push((s, i as u32));
        }
        let pool = (n_u * cfg.pool_factor.max(1)).min(cfg.num_items);
        scored.select_nth_unstable_by(pool - 1, by_score);
        scored.truncate(pool);
        if cfg.temperature > 0.0 {
            // Gumbel-top-k inside the pool = sampling without replacement
            // from softmax(score / temperature)
            for entry in scored.iter_mut() {
                let u01: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
                entry.0 = entry.0 / cfg.temperature - (-u01.ln()).ln();
            }
        }
        scored.select_nth_unstable_by(n_u - 1, by_score);
        let mut top: Vec<u32> = scored[..n_u].iter().map(|&(_, i)| i).collect();
        top.sort_unstable();
        for item in top {
            interactions.push(Interaction { user: u as u32, item, label: 1, noise_flag: Some(false) });
        }
    }
    InteractionTable::from_interactions(interactions)
}

/// Box-Muller standard-normal sampler (keeps the spare draw).
#[derive(Default)]
struct BoxMuller {
    spare: Option<f64>,
}

impl BoxMuller {
    fn sample<R: Rng>(&mut self, rng: &mut R) -> f64 {
        if let Some(z) = self.spare.take() {
            return z;
        }
        let u1: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
        let u2: f64 = rng.gen_range(0.0..1.0);
        let r = (-2.0 * u1.ln()).sqrt();
        let (s, c) = (std::f64::consts::TAU * u2).sin_cos();
        self.spare = Some(r * s);
        r * c
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write as _;

    fn write_tmp(contents: &str) -> std::path::PathBuf {
        let path = std::env::temp_dir().join(format!(
            "sgdl-dataset-{}-{}.tsv",
            std::process::id(),
            rand::random::<u64>()
        ));
        let mut f = File::create(&path).unwrap();
        f.write_all(contents.as_bytes()).unwrap();
        path
    }

    #[test]
    fn parses_movielens_layout() {
        let path = write_tmp("196\t242\t3\t881250949\n186\t302\t3\n");
        let rows = parse_interactions(&path, "\t").unwrap();
        std::fs::remove_file(&path).unwrap();
        assert_eq!(rows.len(), 2);
        // dense reindex by ascending original id: 186 -> 0, 196 -> 1
        assert_eq!(rows[0], RawRating { user: 1, item: 0, rating: 3, timestamp: Some(881250949), noise_flag: None, split: None });
        assert_eq!(rows[1].user, 0);
        assert_eq!(rows[1].timestamp, None);
    }

    #[test]
    fn empty_file_parses_to_empty_list() {
        let path = write_tmp("");
        assert!(parse_interactions(&path, "\t").unwrap().is_empty());
        std::fs::remove_file(&path).unwrap();
    }

    #[test]
    fn malformed_line_reports_line_number() {
        let path = write_tmp("196\t242\t3\n196\tabc\t3\n");
        let err = parse_interactions(&path, "\t").unwrap_err();
        std::fs::remove_file(&path).unwrap();
        match err {
            Error::Parse { line, .. } => assert_eq!(line, 2),
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn double_colon_delimiter_supported() {
        let path = write_tmp("1::10::5::99\n");
        let rows = parse_interactions(&path, "::").unwrap();
        std::fs::remove_file(&path).unwrap();
        assert_eq!(rows[0].rating, 5);
    }

    fn rating(user: u32, item: u32, rating: u8) -> RawRating {
        RawRating { user, item, rating, timestamp: None, noise_flag: None, split: None }
    }

    #[test]
    fn rating_threshold_is_strictly_below() {
        let rows = vec![rating(0, 0, 2), rating(0, 1, 4), rating(0, 2, 3)];
        let table = label_noise_by_rating(&rows, 3).unwrap();
        assert_eq!(table.interactions[0].noise_flag, Some(true));
        assert_eq!(table.interactions[1].noise_flag, Some(false));
        assert_eq!(table.interactions[2].noise_flag, Some(false));
        assert!(table.interactions.iter().all(|x| x.label == 1));
    }

    fn dense_table(num_users: u32, per_user: u32) -> InteractionTable {
        let mut interactions = Vec::new();
        for u in 0..num_users {
            for i in 0..per_user {
                interactions.push(Interaction { user: u, item: i, label: 1, noise_flag: None });
            }
        }
        InteractionTable::from_interactions(interactions)
    }

    /// Exactly `per_user` distinct items per user from a catalogue 4x as
    /// large (stride-4 lattice), so unobserved pairs exist for injection.
    fn sparse_table(num_users: u32, per_user: u32) -> InteractionTable {
        let num_items = per_user * 4;
        let mut interactions = Vec::new();
        for u in 0..num_users {
            let mut chosen: Vec<u32> =
                (0..per_user).map(|j| (u * 13 + j * 4) % num_items).collect();
            chosen.sort_unstable();
            for i in chosen {
                interactions.push(Interaction { user: u, item: i, label: 1, noise_flag: None });
            }
        }
        InteractionTable::from_interactions(interactions)
    }

    #[test]
    fn split_is_deterministic_and_partitions() {
        let table = dense_table(25, 10);
        let a = split_dataset(&table, (0.8, 0.1, 0.1), 3).unwrap();
        let b = split_dataset(&table, (0.8, 0.1, 0.1), 3).unwrap();
        assert_eq!(a.splits, b.splits);
        let sets = a.splits.as_ref().unwrap();
        let mut all: Vec<usize> =
            sets.train.iter().chain(&sets.val).chain(&sets.test).copied().collect();
        all.sort_unstable();
        assert_eq!(all, (0..table.interactions.len()).collect::<Vec<_>>());
        // 10 per user with 8:1:1 -> exactly 8/1/1 per user
        assert_eq!(sets.train.len(), 200);
        assert_eq!(sets.val.len(), 25);
        assert_eq!(sets.test.len(), 25);
    }

    #[test]
    fn split_sizes_match_ratio_at_scale() {
        let table = dense_table(100, 100);
        let split = split_dataset(&table, (0.8, 0.1, 0.1), 1).unwrap();
        let sets = split.splits.unwrap();
        assert_eq!(sets.train.len(), 8000);
        assert_eq!(sets.val.len(), 1000);
        assert_eq!(sets.test.len(), 1000);
    }

    #[test]
    fn tiny_users_fall_back_to_train() {
        let table = dense_table(4, 2);
        let split = split_dataset(&table, (0.8, 0.1, 0.1), 0).unwrap();
        let sets = split.splits.unwrap();
        assert_eq!(sets.train.len(), 8);
        assert!(sets.val.is_empty() && sets.test.is_empty());
    }

    #[test]
    fn all_noisy_leaves_test_empty() {
        let interactions: Vec<Interaction> = (0..10)
            .map(|i| Interaction { user: 0, item: i, label: 1, noise_flag: Some(true) })
            .collect();
        let table = InteractionTable::from_interactions(interactions);
        let split = split_dataset(&table, (0.8, 0.1, 0.1), 0).unwrap();
        let sets = split.splits.unwrap();
        assert!(sets.test.is_empty());
        assert_eq!(sets.train.len() + sets.val.len(), 10);
    }

    #[test]
    fn test_split_is_clean_when_flags_exist() {
        let mut interactions = Vec::new();
        for u in 0..20u32 {
            for i in 0..10u32 {
                interactions.push(Interaction {
                    user: u,
                    item: i,
                    label: 1,
                    noise_flag: Some(i % 3 == 0),
                });
            }
        }
        let table = InteractionTable::from_interactions(interactions);
        let split = split_dataset(&table, (0.8, 0.1, 0.1), 11).unwrap();
        let sets = split.splits.unwrap();
        assert!(sets.test.iter().all(|&i| split.interactions[i].noise_flag == Some(false)));
    }

    #[test]
    fn inject_noise_identity_at_zero_sigma() {
        let table = split_dataset(&dense_table(10, 10), (0.8, 0.1, 0.1), 0).unwrap();
        let out = inject_noise(&table, 0.0, 5).unwrap();
        assert_eq!(out.interactions.len(), table.interactions.len());
        assert!(out.has_noise_flags());
        assert!(out.interactions.iter().all(|x| x.noise_flag == Some(false)));
    }

    #[test]
    fn inject_noise_hits_target_fraction() {
        // sigma = 0.2 with P = 1000 train positives -> 250 injected, 250/1250 = 0.2
        let table = split_dataset(&sparse_table(125, 10), (0.8, 0.1, 0.1), 0).unwrap();
        assert_eq!(table.splits.as_ref().unwrap().train.len(), 1000);
        let out = inject_noise(&table, 0.2, 5).unwrap();
        let sets = out.splits.as_ref().unwrap();
        assert_eq!(sets.train.len(), 1250);
        let noisy = sets.train.iter().filter(|&&i| out.interactions[i].noise_flag == Some(true)).count();
        assert_eq!(noisy, 250);
        // injected pairs were previously unobserved
        let observed: HashSet<(u32, u32)> =
            table.interactions.iter().map(|x| (x.user, x.item)).collect();
        for x in &out.interactions[table.interactions.len()..] {
            assert_eq!(x.noise_flag, Some(true));
            assert!(!observed.contains(&(x.user, x.item)));
        }
    }

    #[test]
    fn inject_noise_rejects_bad_sigma() {
        let table = split_dataset(&dense_table(10, 10), (0.8, 0.1, 0.1), 0).unwrap();
        assert!(inject_noise(&table, 1.0, 0).is_err());
        assert!(inject_noise(&table, -0.1, 0).is_err());
    }

    #[test]
    fn inject_noise_rejects_saturated_space() {
        // 2 users x 2 items, all observed: no room to inject
        let mut interactions = Vec::new();
        for u in 0..2u32 {
            for i in 0..2u32 {
                interactions.push(Interaction { user: u, item: i, label: 1, noise_flag: None });
            }
        }
        let mut table = InteractionTable::from_interactions(interactions);
        table.splits = Some(SplitSets { train: vec![0, 1, 2, 3], val: vec![], test: vec![] });
        assert!(inject_noise(&table, 0.5, 0).is_err());
    }

    #[test]
    fn canonical_round_trip_is_exact() {
        let table = split_dataset(&sparse_table(12, 8), (0.8, 0.1, 0.1), 9).unwrap();
        let table = inject_noise(&table, 0.25, 4).unwrap();
        let path = std::env::temp_dir().join(format!("sgdl-roundtrip-{}.tsv", std::process::id()));
        write_table(&table, &path, "\t").unwrap();
        let back = read_table(&path, "\t").unwrap();
        std::fs::remove_file(&path).unwrap();
        assert_eq!(back, table);
    }

    #[test]
    fn synthetic_clean_is_deterministic_and_clean() {
        let cfg = SyntheticConfig {
            num_users: 30,
            num_items: 60,
            mean_per_user: 10,
            min_per_user: 4,
            latent_dim: 4,
            temperature: 0.3,
            pool_factor: 3,
            seed: 3,
        };
        let a = synthetic_clean(&cfg);
        let b = synthetic_clean(&cfg);
        assert_eq!(a, b);
        assert!(a.has_noise_flags());
        assert!(a.interactions.iter().all(|x| x.noise_flag == Some(false)));
        assert!(a.interactions.len() >= 30 * 4);
        for items in &a.adjacency {
            for w in items.windows(2) {
                assert!(w[0] < w[1], "adjacency sorted and duplicate-free");
            }
        }
    }
}
