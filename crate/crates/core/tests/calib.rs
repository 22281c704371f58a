//! Scratch calibration runs (ignored by default). Run with
//! `cargo test -p sgdl-core --test calib -- --ignored --nocapture`.

use std::time::Instant;

use sgdl_core::dataset::{self, SyntheticConfig};
use sgdl_core::harness::{self, RunConfig, TrainMode};

fn ml_scale_table(sigma: f64, seed: u64) -> sgdl_core::InteractionTable {
    let clean = dataset::synthetic_clean(&SyntheticConfig {
        num_users: 943,
        num_items: 1683,
        mean_per_user: 106,
        min_per_user: 20,
        latent_dim: 8,
        temperature: 0.2,
        pool_factor: 2,
        seed,
    });
    let split = dataset::split_dataset(&clean, (0.8, 0.1, 0.1), seed).unwrap();
    dataset::inject_noise(&split, sigma, seed).unwrap()
}

fn outdir(tag: &str) -> std::path::PathBuf {
    let dir = std::env::temp_dir().join(format!("sgdl-calib-{tag}"));
    let _ = std::fs::remove_dir_all(&dir);
    dir
}

#[test]
#[ignore]
fn phase1_dynamics() {
    let table = ml_scale_table(0.2, 1);
    println!(
        "interactions {} train {} ",
        table.interactions.len(),
        table.splits.as_ref().unwrap().train.len()
    );
    for eta in [0.02, 0.05, 0.1] {
        let cfg = RunConfig {
            eta1: eta,
            eta2: eta,
            phase1_epochs: 60,
            outdir: outdir(&format!("p1-{eta}")),
            ..RunConfig::default()
        };
        let start = Instant::now();
        let p1 = harness::run_phase1(&cfg, &table).unwrap();
        println!(
            "eta={eta}: t_m={} |M|={} sigma_hat={:.3} forced={} elapsed={:.1?}",
            p1.t_m,
            p1.mem_snapshot.len(),
            p1.sigma_hat,
            p1.forced,
            start.elapsed()
        );
        for row in p1.history.iter().rev().take(3).rev() {
            println!(
                "  epoch {}: mem={} sigma={:.3} mp={:.3?} mr={:.3?} rate_clean={:.3?} rate_noisy={:.3?} R@20={:.4}",
                row.epoch,
                row.mem_count.unwrap_or(0),
                row.sigma_hat.unwrap_or(-1.0),
                row.mp,
                row.mr,
                row.mem_rate_clean,
                row.mem_rate_noisy,
                row.test.as_ref().and_then(|t| t.recall_at(20)).unwrap_or(f64::NAN)
            );
        }
    }
}

#[test]
#[ignore]
fn normal_vs_sgdl() {
    let table = ml_scale_table(0.2, 1);
    let eta: f64 = std::env::var("CALIB_ETA1").map(|v| v.parse().unwrap()).unwrap_or(2.0);
    println!("eta1={eta}");

    let start = Instant::now();
    let normal_cfg = RunConfig {
        mode: TrainMode::Normal,
        eta1: eta,
        eta2: eta,
        batch_size: 128,
        phase1_epochs: 50,
        phase2_epochs: 40,
        patience: 12,
        outdir: outdir("normal"),
        ..RunConfig::default()
    };
    let normal = harness::run_with_table(&normal_cfg, &table).unwrap();
    println!(
        "normal: best epoch {} R@20(best)={:.4} elapsed={:.1?}",
        normal.best_epoch,
        normal.test_at_best.recall_at(20).unwrap(),
        start.elapsed()
    );

    let eta_psi = std::env::var("CALIB_ETA_PSI").map(|v| v.parse().unwrap()).unwrap_or(50.0);
    let eta_sched = std::env::var("CALIB_ETA_SCHED").map(|v| v.parse().unwrap()).unwrap_or(0.05);
    let mode = match std::env::var("CALIB_MODE").as_deref() {
        Ok("no-ads") => TrainMode::WithoutAds,
        _ => TrainMode::Sgdl,
    };
    println!("sgdl config: eta_psi={eta_psi} eta_sched={eta_sched} mode={mode:?}");
    let start = Instant::now();
    let sgdl_cfg = RunConfig {
        mode,
        eta1: eta,
        eta2: eta_psi,
        eta_sched,
        batch_size: 128,
        phase1_epochs: 80,
        phase2_epochs: std::env::var("CALIB_P2").map(|v| v.parse().unwrap()).unwrap_or(40),
        patience: 12,
        eval_every: 2,
        outdir: outdir("sgdl"),
        ..RunConfig::default()
    };
    let sgdl = harness::run_with_table(&sgdl_cfg, &table).unwrap();
    println!(
        "sgdl: t_m={:?} best epoch {} R@20(best)={:.4} elapsed={:.1?}",
        sgdl.t_m,
        sgdl.best_epoch,
        sgdl.test_at_best.recall_at(20).unwrap(),
        start.elapsed()
    );
    for row in sgdl.history.iter().rev().take(5).rev() {
        println!(
            "  epoch {} ({}): R@20={:.4} rate_noisy={:.3?} ",
            row.epoch,
            row.phase,
            row.test.as_ref().and_then(|t| t.recall_at(20)).unwrap_or(f64::NAN),
            row.mem_rate_noisy
        );
    }
    // weight separation snapshot
    let (mut wc, mut nc, mut ws, mut ns) = (0.0, 0usize, 0.0, 0usize);
    for (_, w, flag) in &sgdl.weight_rows {
        match flag {
            Some(false) => {
                wc += w;
                nc += 1;
            }
            Some(true) => {
                ws += w;
                ns += 1;
            }
            None => {}
        }
    }
    println!("mean weight clean={:.4} noisy={:.4}", wc / nc as f64, ws / ns as f64);
}

#[test]
#[ignore]
fn sigma_trajectory() {
    let table = ml_scale_table(0.2, 1);
    for (eta, batch, loss) in [(0.5, 32, harness::LossKind::Bce), (1.0, 32, harness::LossKind::Bce)] {
        let cfg = RunConfig {
            eta1: eta,
            eta2: eta,
            batch_size: batch,
            loss,
            outdir: outdir(&format!("sig-{eta}")),
            ..RunConfig::default()
        };
        println!("--- eta={eta} batch={batch} loss={loss:?}");
        let rows = harness::inspect_memorization(&cfg, &table, 80).unwrap();
        for row in rows {
            println!(
                "epoch {:2}: mem={:6} sigma={:.3} would={} mp={:.3} mr={:.3} noisy_rate={:.3} R@20={:.4}",
                row.epoch,
                row.mem_count.unwrap_or(0),
                row.sigma_hat.unwrap_or(-1.0),
                u8::from(row.transition),
                row.mp.unwrap_or(-1.0),
                row.mr.unwrap_or(-1.0),
                row.mem_rate_noisy.unwrap_or(-1.0),
                row.test.as_ref().and_then(|t| t.recall_at(20)).unwrap_or(f64::NAN)
            );
        }
    }
}

// plain BPR loop via public APIs so we can probe the loss distribution shape
#[test]
#[ignore]
fn sigma_estimator_inputs() {
    use rand::seq::SliceRandom;
    use sgdl_core::model::{self, SampleKind, TrainSample};
    use sgdl_core::{memorization, rng};

    let table = ml_scale_table(0.2, 1);
    let positives = table.train_positives().unwrap();
    let adj = table.train_adjacency().unwrap();
    let mut theta =
        sgdl_core::ModelParams::init(table.num_users, table.num_items, 32, 42);
    let mut neg_rng = rng::stream(42, "negsample", 1);
    let mut shuffle_rng = rng::stream(42, "shuffle", 1);
    let eta = 0.05;

    for epoch in 1..=25 {
        let mut samples = Vec::with_capacity(positives.len());
        for &idx in &positives {
            let x = &table.interactions[idx];
            let neg = model::sample_negative(x.user, &adj, table.num_items, &mut neg_rng).unwrap();
            samples.push(TrainSample {
                id: samples.len(),
                kind: SampleKind::Pairwise { user: x.user, pos_item: x.item, neg_item: neg },
            });
        }
        samples.shuffle(&mut shuffle_rng);
        for chunk in samples.chunks(128) {
            model::weighted_step(&mut theta, chunk, &vec![1.0; chunk.len()], eta).unwrap();
        }

        if epoch % 5 == 0 {
            // pairwise canonical losses (1 fresh negative each)
            let mut pair_losses = Vec::new();
            let mut point_losses = Vec::new();
            let mut pair_by_flag = [(0.0, 0usize), (0.0, 0usize)];
            let mut point_by_flag = [(0.0, 0usize), (0.0, 0usize)];
            for &idx in &positives {
                let x = &table.interactions[idx];
                let neg = model::sample_negative(x.user, &adj, table.num_items, &mut neg_rng).unwrap();
                let lp = model::sample_loss(&theta, &TrainSample {
                    id: 0,
                    kind: SampleKind::Pairwise { user: x.user, pos_item: x.item, neg_item: neg },
                }).unwrap();
                let lq = model::sample_loss(&theta, &TrainSample {
                    id: 0,
                    kind: SampleKind::Pointwise { user: x.user, item: x.item, label: 1 },
                }).unwrap();
                pair_losses.push(lp);
                point_losses.push(lq);
                let f = usize::from(x.noise_flag == Some(true));
                pair_by_flag[f].0 += lp;
                pair_by_flag[f].1 += 1;
                point_by_flag[f].0 += lq;
                point_by_flag[f].1 += 1;
            }
            let sp = memorization::estimate_noise_rate(&pair_losses);
            let sq = memorization::estimate_noise_rate(&point_losses);
            println!(
                "epoch {epoch}: sigma_pair={sp:.3} sigma_point={sq:.3} | mean pair clean={:.3} noisy={:.3} | mean point clean={:.3} noisy={:.3}",
                pair_by_flag[0].0 / pair_by_flag[0].1 as f64,
                pair_by_flag[1].0 / pair_by_flag[1].1 as f64,
                point_by_flag[0].0 / point_by_flag[0].1 as f64,
                point_by_flag[1].0 / point_by_flag[1].1 as f64,
            );
        }
    }
}

#[test]
#[ignore]
fn sigma_on_learnable_data() {
    let clean = dataset::synthetic_clean(&SyntheticConfig {
        temperature: 0.0,
        ..SyntheticConfig::default()
    });
    let split = dataset::split_dataset(&clean, (0.8, 0.1, 0.1), 5).unwrap();
    let table = dataset::inject_noise(&split, 0.2, 5).unwrap();
    for eta in [1.0f64, 2.0] {
        let cfg = RunConfig {
            eta1: eta,
            eta2: eta,
            batch_size: 32,
            outdir: outdir(&format!("learn-e{eta}")),
            ..RunConfig::default()
        };
        println!("--- eta={eta}");
        let rows = harness::inspect_memorization(&cfg, &table, 60).unwrap();
        for row in rows.iter().filter(|r| r.epoch % 4 == 0) {
            println!(
                "epoch {:2}: mem={:6} sigma={:.3} mr={:.3} noisy_rate={:.3} R@20={:.4}",
                row.epoch,
                row.mem_count.unwrap_or(0),
                row.sigma_hat.unwrap_or(-1.0),
                row.mr.unwrap_or(-1.0),
                row.mem_rate_noisy.unwrap_or(-1.0),
                row.test.as_ref().and_then(|t| t.recall_at(20)).unwrap_or(f64::NAN)
            );
        }
    }
}

#[test]
#[ignore]
fn gmm_anatomy() {
    use sgdl_core::model::{self, SampleKind, TrainSample};
    use sgdl_core::{memorization, rng};
    use rand::seq::SliceRandom;

    let clean = dataset::synthetic_clean(&SyntheticConfig {
        temperature: 0.0,
        ..SyntheticConfig::default()
    });
    let split = dataset::split_dataset(&clean, (0.8, 0.1, 0.1), 5).unwrap();
    let table = dataset::inject_noise(&split, 0.2, 5).unwrap();
    let positives = table.train_positives().unwrap();
    let adj = table.train_adjacency().unwrap();
    let mut theta = sgdl_core::ModelParams::init(table.num_users, table.num_items, 32, 42);
    let mut neg_rng = rng::stream(42, "negsample", 1);
    let mut shuffle_rng = rng::stream(42, "shuffle", 1);

    for _epoch in 0..30 {
        let mut samples = Vec::with_capacity(2 * positives.len());
        for &idx in &positives {
            let x = &table.interactions[idx];
            samples.push(TrainSample {
                id: samples.len(),
                kind: SampleKind::Pointwise { user: x.user, item: x.item, label: 1 },
            });
            let neg = model::sample_negative(x.user, &adj, table.num_items, &mut neg_rng).unwrap();
            samples.push(TrainSample {
                id: samples.len(),
                kind: SampleKind::Pointwise { user: x.user, item: neg, label: 0 },
            });
        }
        samples.shuffle(&mut shuffle_rng);
        for chunk in samples.chunks(32) {
            model::weighted_step(&mut theta, chunk, &vec![1.0; chunk.len()], 0.5).unwrap();
        }
    }

    let mut losses = Vec::new();
    let mut flags = Vec::new();
    for &idx in &positives {
        let x = &table.interactions[idx];
        let s = TrainSample { id: 0, kind: SampleKind::Pointwise { user: x.user, item: x.item, label: 1 } };
        losses.push(model::sample_loss(&theta, &s).unwrap());
        flags.push(x.noise_flag == Some(true));
    }
    let (lo, hi) = losses.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &x| (a.min(x), b.max(x)));
    println!("loss range [{lo:.4}, {hi:.4}]");
    let mut by_flag: Vec<Vec<f64>> = vec![vec![], vec![]];
    for (&l, &f) in losses.iter().zip(&flags) {
        by_flag[usize::from(f)].push((l - lo) / (hi - lo));
    }
    for (name, vals) in [("clean", &mut by_flag[0].clone()), ("noisy", &mut by_flag[1].clone())] {
        vals.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let q = |p: f64| vals[((vals.len() - 1) as f64 * p) as usize];
        println!(
            "{name}: n={} q05={:.4} q25={:.4} q50={:.4} q75={:.4} q95={:.4}",
            vals.len(), q(0.05), q(0.25), q(0.5), q(0.75), q(0.95)
        );
    }
    let norm: Vec<f64> = losses.iter().map(|l| (l - lo) / (hi - lo)).collect();
    let fit = memorization::fit_gmm(&norm, 100, 1e-6).unwrap();
    for (i, c) in fit.components.iter().enumerate() {
        println!("comp {i}: mean={:.4} var={:.6} weight={:.4}", c.mean, c.var, c.weight);
    }
    println!("sigma_hat = {:.4}", memorization::estimate_noise_rate(&losses));
    // posterior mass by flag
    let high = fit.high_component();
    let (mut pc, mut pn) = (0.0, 0.0);
    for (&x, &f) in norm.iter().zip(&flags) {
        if f { pn += fit.posterior(x, high) } else { pc += fit.posterior(x, high) }
    }
    println!(
        "posterior(high) mass: clean {:.1} of {} | noisy {:.1} of {}",
        pc, by_flag[0].len(), pn, by_flag[1].len()
    );
}

#[test]
#[ignore]
fn sigma_small_planted() {
    for (users, items, mean, bias_tag) in [(300usize, 600usize, 40usize, "a"), (400, 800, 50, "b")] {
        let clean = dataset::synthetic_clean(&SyntheticConfig {
            num_users: users,
            num_items: items,
            mean_per_user: mean,
            min_per_user: mean / 3,
            latent_dim: 8,
            temperature: 0.0,
            pool_factor: 2,
            seed: 9,
        });
        let split = dataset::split_dataset(&clean, (0.8, 0.1, 0.1), 9).unwrap();
        let table = dataset::inject_noise(&split, 0.2, 9).unwrap();
        for loss in [harness::LossKind::Bpr, harness::LossKind::Bce] {
            let cfg = RunConfig {
                eta1: 0.5,
                eta2: 0.5,
                batch_size: 32,
                loss,
                outdir: outdir(&format!("sp-{bias_tag}-{loss:?}")),
                ..RunConfig::default()
            };
            let rows = harness::inspect_memorization(&cfg, &table, 60).unwrap();
            let best = rows.iter().map(|r| r.sigma_hat.unwrap()).fold(f64::INFINITY, f64::min);
            println!("--- {users}x{items} mean={mean} loss={loss:?}");
            for row in rows.iter().filter(|r| r.epoch % 10 == 0) {
                println!(
                    "  epoch {:3}: sigma={:.3} mr={:.3} noisy_rate={:.3}",
                    row.epoch,
                    row.sigma_hat.unwrap(),
                    row.mr.unwrap(),
                    row.mem_rate_noisy.unwrap()
                );
            }
            println!("  min sigma over 60 epochs: {best:.3}");
        }
    }
}

#[test]
#[ignore]
fn sigma_vs_em_iterations() {
    use sgdl_core::model::{self, SampleKind, TrainSample};
    use sgdl_core::{memorization, rng};
    use rand::seq::SliceRandom;

    let clean = dataset::synthetic_clean(&SyntheticConfig {
        temperature: 0.0,
        ..SyntheticConfig::default()
    });
    let split = dataset::split_dataset(&clean, (0.8, 0.1, 0.1), 5).unwrap();
    let table = dataset::inject_noise(&split, 0.2, 5).unwrap();
    let positives = table.train_positives().unwrap();
    let adj = table.train_adjacency().unwrap();
    let mut theta = sgdl_core::ModelParams::init(table.num_users, table.num_items, 32, 42);
    let mut neg_rng = rng::stream(42, "negsample", 1);
    let mut shuffle_rng = rng::stream(42, "shuffle", 1);
    for _ in 0..40 {
        let mut samples = Vec::with_capacity(positives.len());
        for &idx in &positives {
            let x = &table.interactions[idx];
            let neg = model::sample_negative(x.user, &adj, table.num_items, &mut neg_rng).unwrap();
            samples.push(TrainSample {
                id: samples.len(),
                kind: SampleKind::Pairwise { user: x.user, pos_item: x.item, neg_item: neg },
            });
        }
        samples.shuffle(&mut shuffle_rng);
        for chunk in samples.chunks(32) {
            model::weighted_step(&mut theta, chunk, &vec![1.0; chunk.len()], 0.5).unwrap();
        }
    }
    let mut losses = Vec::new();
    for &idx in &positives {
        let x = &table.interactions[idx];
        let s = TrainSample { id: 0, kind: SampleKind::Pointwise { user: x.user, item: x.item, label: 1 } };
        losses.push(model::sample_loss(&theta, &s).unwrap());
    }
    let (lo, hi) = losses.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &x| (a.min(x), b.max(x)));
    let norm: Vec<f64> = losses.iter().map(|l| (l - lo) / (hi - lo)).collect();
    for iters in [1, 2, 3, 5, 8, 12, 20, 40, 80, 150] {
        let fit = memorization::fit_gmm(&norm, iters, 0.0).unwrap();
        let high = fit.high_component();
        let sigma: f64 = norm.iter().map(|&x| fit.posterior(x, high)).sum::<f64>() / norm.len() as f64;
        let c = &fit.components;
        println!(
            "iters {iters:3}: sigma={sigma:.3} ll/n={:.4} m0={:.4} v0={:.2e} w0={:.3} m1={:.4} v1={:.2e}",
            fit.log_likelihood.last().unwrap() / norm.len() as f64,
            c[0].mean, c[0].var, c[0].weight, c[1].mean, c[1].var
        );
    }
}

#[test]
#[ignore]
fn sigma_with_weight_decay() {
    use sgdl_core::model::{self, Coord, SampleKind, TrainSample};
    use sgdl_core::{memorization, rng};
    use rand::seq::SliceRandom;

    let clean = dataset::synthetic_clean(&SyntheticConfig {
        temperature: 0.0,
        ..SyntheticConfig::default()
    });
    let split = dataset::split_dataset(&clean, (0.8, 0.1, 0.1), 5).unwrap();
    let table = dataset::inject_noise(&split, 0.2, 5).unwrap();
    let positives = table.train_positives().unwrap();
    let adj = table.train_adjacency().unwrap();
    let eta = 0.5;

    for lambda in [1e-3f64, 5e-3] {
        let mut theta = sgdl_core::ModelParams::init(table.num_users, table.num_items, 32, 42);
        let mut neg_rng = rng::stream(42, "negsample", 1);
        let mut shuffle_rng = rng::stream(42, "shuffle", 1);
        println!("--- lambda={lambda}");
        for epoch in 1..=40 {
            let mut samples = Vec::with_capacity(positives.len());
            for &idx in &positives {
                let x = &table.interactions[idx];
                let neg = model::sample_negative(x.user, &adj, table.num_items, &mut neg_rng).unwrap();
                samples.push(TrainSample {
                    id: samples.len(),
                    kind: SampleKind::Pairwise { user: x.user, pos_item: x.item, neg_item: neg },
                });
            }
            samples.shuffle(&mut shuffle_rng);
            let shrink = 1.0 - eta * lambda;
            for chunk in samples.chunks(32) {
                // decoupled decay on the touched rows, then the plain step
                for s in chunk {
                    if let SampleKind::Pairwise { user, pos_item, neg_item } = s.kind {
                        let d = theta.dim;
                        for k in 0..d {
                            theta.add_assign(Coord::user_emb(user, k as u32), 0.0);
                        }
                        let urow = user as usize * d;
                        for k in 0..d {
                            theta.user_emb[urow + k] *= shrink;
                        }
                        for item in [pos_item, neg_item] {
                            let irow = item as usize * d;
                            for k in 0..d {
                                theta.item_emb[irow + k] *= shrink;
                            }
                            theta.item_bias[item as usize] *= shrink;
                        }
                    }
                }
                model::weighted_step(&mut theta, chunk, &vec![1.0; chunk.len()], eta).unwrap();
            }
            if epoch % 5 == 0 {
                let mut losses = Vec::new();
                let mut flags = Vec::new();
                for &idx in &positives {
                    let x = &table.interactions[idx];
                    let s = TrainSample { id: 0, kind: SampleKind::Pointwise { user: x.user, item: x.item, label: 1 } };
                    losses.push(model::sample_loss(&theta, &s).unwrap());
                    flags.push(x.noise_flag == Some(true));
                }
                let sigma = memorization::estimate_noise_rate(&losses);
                let report = sgdl_core::eval::evaluate_ranking(&theta, &table, &[20], sgdl_core::EvalSplit::Test).unwrap();
                let mean = |f: bool| {
                    let v: Vec<f64> = losses.iter().zip(&flags).filter(|(_, &x)| x == f).map(|(l, _)| *l).collect();
                    v.iter().sum::<f64>() / v.len() as f64
                };
                println!(
                    "epoch {epoch:2}: sigma={sigma:.3} clean_mean={:.3} noisy_mean={:.3} R@20={:.4}",
                    mean(false), mean(true), report.recall[0]
                );
            }
        }
    }
}

#[test]
#[ignore]
fn ceilings() {
    // what's attainable: clean-data ceiling vs noisy normal vs mem-only
    let clean = dataset::synthetic_clean(&SyntheticConfig {
        temperature: 0.2,
        pool_factor: 2,
        ..SyntheticConfig::default()
    });
    let split = dataset::split_dataset(&clean, (0.8, 0.1, 0.1), 1).unwrap();
    let noisy = dataset::inject_noise(&split, 0.2, 1).unwrap();

    let base = RunConfig {
        mode: TrainMode::Normal,
        eta1: 2.0,
        eta2: 2.0,
        batch_size: 128,
        phase1_epochs: 60,
        phase2_epochs: 40,
        patience: 12,
        eval_every: 5,
        outdir: outdir("ceil-clean"),
        ..RunConfig::default()
    };
    let mut clean_table = split.clone();
    for x in &mut clean_table.interactions {
        x.noise_flag = Some(false);
    }
    let a = harness::run_with_table(&base, &clean_table).unwrap();
    println!(
        "clean ceiling: best epoch {} R@20={:.4}",
        a.best_epoch,
        a.test_at_best.recall_at(20).unwrap()
    );

    let mut cfg = base.clone();
    cfg.outdir = outdir("ceil-noisy");
    let b = harness::run_with_table(&cfg, &noisy).unwrap();
    println!(
        "noisy normal: best epoch {} R@20={:.4}",
        b.best_epoch,
        b.test_at_best.recall_at(20).unwrap()
    );

    let mut cfg = base.clone();
    cfg.mode = TrainMode::WithoutDls;
    cfg.phase1_epochs = 80;
    cfg.outdir = outdir("ceil-memonly");
    let c = harness::run_with_table(&cfg, &noisy).unwrap();
    println!(
        "mem-only (w/o DLS): t_m={:?} best epoch {} R@20={:.4}",
        c.t_m,
        c.best_epoch,
        c.test_at_best.recall_at(20).unwrap()
    );
}

#[test]
#[ignore]
fn phase2_cost_anatomy() {
    use sgdl_core::metaweight::{self, WeightNet};
    use sgdl_core::model::{self, SampleKind, TrainSample};
    use sgdl_core::scheduler::{self, SchedulerState, SchedulerVariant};
    use sgdl_core::rng;

    let table = ml_scale_table(0.2, 1);
    let positives = table.train_positives().unwrap();
    let adj = table.train_adjacency().unwrap();
    let theta = sgdl_core::ModelParams::init(table.num_users, table.num_items, 32, 42);
    let mut neg_rng = rng::stream(42, "negsample", 1);
    let mut psi = WeightNet::init(64, 42);
    let mut sched = SchedulerState::new(SchedulerVariant::Lstm, 64, positives.len(), 42);
    let mut gumbel_rng = rng::stream(42, "gumbel", 2);

    let make = |k: usize, idx: usize, neg_rng: &mut rand_chacha::ChaCha12Rng| {
        let x = &table.interactions[idx];
        let neg = model::sample_negative(x.user, &adj, table.num_items, neg_rng).unwrap();
        TrainSample { id: k, kind: SampleKind::Pairwise { user: x.user, pos_item: x.item, neg_item: neg } }
    };
    let batch: Vec<TrainSample> =
        (0..128).map(|k| make(k, positives[k * 300], &mut neg_rng)).collect();
    let iters = 200;

    let mut t_assumed = std::time::Duration::ZERO;
    let mut t_feats = std::time::Duration::ZERO;
    let mut t_fwd = std::time::Duration::ZERO;
    let mut t_psi = std::time::Duration::ZERO;
    let mut t_phi = std::time::Duration::ZERO;
    let mut theta_mut = theta.clone();
    for it in 0..iters {
        let mem_ids: Vec<usize> = (0..128).map(|j| (it * 131 + j * 977) % positives.len()).collect();
        let mem_samples: Vec<TrainSample> = mem_ids
            .iter()
            .enumerate()
            .map(|(k, &slot)| make(k, positives[slot], &mut neg_rng))
            .collect();

        let t0 = Instant::now();
        let hat = metaweight::assumed_update(&theta_mut, &batch, &psi, 4.0).unwrap();
        t_assumed += t0.elapsed();

        let t0 = Instant::now();
        let feats: Vec<_> = mem_samples
            .iter()
            .map(|m| scheduler::compute_features(m, &theta_mut, &hat).unwrap())
            .collect();
        t_feats += t0.elapsed();

        let t0 = Instant::now();
        let (_, pi) = sched.forward(&mem_ids, &feats).unwrap();
        let draw = scheduler::gumbel_weights(&pi, 0.05, &mut gumbel_rng).unwrap();
        t_fwd += t0.elapsed();

        let t0 = Instant::now();
        let mem_batch: Vec<(TrainSample, f64)> =
            mem_samples.iter().copied().zip(draw.y.iter().copied()).collect();
        metaweight::psi_meta_step(&theta_mut, &hat, &batch, &mem_batch, &mut psi, 4.0, 1.0).unwrap();
        drop(hat);
        metaweight::actual_update(&mut theta_mut, &batch, &psi, 4.0).unwrap();
        t_psi += t0.elapsed();

        let t0 = Instant::now();
        let losses: Vec<f64> = mem_samples
            .iter()
            .map(|m| model::sample_loss(&theta_mut, m).unwrap())
            .collect();
        sched.update_phi(&feats, &draw, &losses, 0.05).unwrap();
        t_phi += t0.elapsed();
    }
    let per = |d: std::time::Duration| d.as_secs_f64() * 1000.0 / iters as f64;
    println!(
        "per-iteration ms: assumed={:.2} feats={:.2} sched_fwd={:.2} psi+actual={:.2} phi_bwd={:.2}",
        per(t_assumed), per(t_feats), per(t_fwd), per(t_psi), per(t_phi)
    );
}

#[test]
#[ignore]
fn seed_sweep() {
    let psi_rates: Vec<f64> = std::env::var("SWEEP_PSI")
        .unwrap_or_else(|_| "30,100".into())
        .split(',')
        .map(|v| v.parse().unwrap())
        .collect();
    let seeds: Vec<u64> = std::env::var("SWEEP_SEEDS")
        .unwrap_or_else(|_| "1,2,3".into())
        .split(',')
        .map(|v| v.parse().unwrap())
        .collect();
    let sigma: f64 = std::env::var("SWEEP_SIGMA").map(|v| v.parse().unwrap()).unwrap_or(0.2);

    for &seed in &seeds {
        let table = ml_scale_table(sigma, seed);
        let eta1: f64 = std::env::var("SWEEP_ETA1").map(|v| v.parse().unwrap()).unwrap_or(4.0);
        let normal_cfg = RunConfig {
            mode: TrainMode::Normal,
            eta1,
            eta2: eta1,
            batch_size: 128,
            phase1_epochs: 50,
            phase2_epochs: 50,
            patience: 1_000_000,
            eval_every: 10,
            seed,
            outdir: outdir(&format!("sw-n-{seed}")),
            ..RunConfig::default()
        };
        let normal = harness::run_with_table(&normal_cfg, &table).unwrap();
        println!(
            "seed {seed} normal: best {} R@20 {:.4}",
            normal.best_epoch,
            normal.test_at_best.recall_at(20).unwrap()
        );
        for &psi_rate in &psi_rates {
            let cfg = RunConfig {
                mode: TrainMode::Sgdl,
                eta1,
                eta2: psi_rate,
                eta_sched: 0.05,
                batch_size: 128,
                phase1_epochs: 60,
                phase2_epochs: 50,
                patience: 1_000_000,
                eval_every: 10,
                seed,
                outdir: outdir(&format!("sw-s-{seed}-{psi_rate}")),
                ..RunConfig::default()
            };
            let run = harness::run_with_table(&cfg, &table).unwrap();
            let (mut wc, mut nc, mut ws, mut ns) = (0.0, 0usize, 0.0, 0usize);
            for (_, w, flag) in &run.weight_rows {
                match flag {
                    Some(false) => { wc += w; nc += 1; }
                    Some(true) => { ws += w; ns += 1; }
                    None => {}
                }
            }
            let t_m = run.t_m.unwrap();
            let at2tm = run.history.iter().find(|r| r.epoch == 2 * t_m);
            let n_at2tm = normal.history.iter().find(|r| r.epoch == 2 * t_m);
            println!(
                "seed {seed} sgdl(psi={psi_rate}): t_m={t_m} best {} R@20 {:.4} wsep {:.3} | rate2tm sgdl {:.3?} normal {:.3?}",
                run.best_epoch,
                run.test_at_best.recall_at(20).unwrap(),
                wc / nc.max(1) as f64 - ws / ns.max(1) as f64,
                at2tm.and_then(|r| r.mem_rate_noisy),
                n_at2tm.and_then(|r| r.mem_rate_noisy),
            );
        }
    }
}
