//! Acceptance suite. Runs every criterion, prints one PASS/FAIL line each and
//! exits non-zero if any fails. Pass criterion numbers as arguments to run a
//! subset, e.g. `cargo test --test acceptance -- 6 11`.

use std::collections::{BTreeMap, BTreeSet};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::Instant;

use embfuse::evalkit::{auc, bootstrap_compare, BootstrapConfig, Metric, Tier};
use embfuse::heads::{predict_bags, predict_rows, train_mil, train_mlp, GatedAttentionMil, MilArch, MlpArch, SlideMlp, TrainConfig};
use embfuse::lens::{compactness, dice, percentile_mask, region_coverage, silhouette, tsne, AttentionMap, Region, RegionMask, TsneConfig};
use embfuse::prune::{apply_signature, concat_encoders, correlation_prune, rank_features, sweep_thetas};
use embfuse::rng::{seeded, substream, Rng};
use embfuse::simgauge::{
    cka_prepared, knn_prepared, procrustes_prepared, score_pair, similarity_report, svcca_prepared, MetricConfig, PreparedSpace,
    SimilarityScores,
};
use embfuse::store::standardize;
use embfuse::synthgen::{generate, redundancy_ladder, GeneratorConfig, LadderConfig, Mixing};
use embfuse::{BagDataset, EmbeddingMatrix, SlideBag};
use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};

type Outcome = Result<String, String>;

const THETAS: [f64; 6] = [0.1, 0.2, 0.3, 0.4, 0.5, 0.7];

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn gaussian(rows: usize, cols: usize, r: &mut Rng) -> DMatrix<f64> {
    DMatrix::from_fn(rows, cols, |_, _| StandardNormal.sample(r))
}

fn matrix(id: &str, x: DMatrix<f64>) -> EmbeddingMatrix {
    EmbeddingMatrix::from_values(id, x).unwrap()
}

fn random_orthogonal(d: usize, r: &mut Rng) -> DMatrix<f64> {
    gaussian(d, d, r).qr().q()
}

fn pearson(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma) * (x - ma);
        sbb += (y - mb) * (y - mb);
    }
    sab / (saa * sbb).sqrt()
}

fn column(x: &DMatrix<f64>, j: usize) -> Vec<f64> {
    x.column(j).iter().copied().collect()
}

fn brute_auc(probs: &[f64], labels: &[u8]) -> Option<f64> {
    let (mut wins, mut pos, mut neg) = (0.0, 0usize, 0usize);
    for (i, &li) in labels.iter().enumerate() {
        if li == 1 {
            pos += 1;
        } else {
            neg += 1;
        }
        for (j, &lj) in labels.iter().enumerate() {
            if li == 1 && lj == 0 {
                if probs[i] > probs[j] {
                    wins += 1.0;
                } else if probs[i] == probs[j] {
                    wins += 0.5;
                }
            }
        }
    }
    (pos > 0 && neg > 0).then(|| wins / (pos * neg) as f64)
}

fn median(v: &[f64]) -> f64 {
    let mut s = v.to_vec();
    s.sort_by(f64::total_cmp);
    let n = s.len();
    if n % 2 == 1 {
        s[n / 2]
    } else {
        0.5 * (s[n / 2 - 1] + s[n / 2])
    }
}

fn c1_similarity_invariance() -> Outcome {
    let (n, d) = (2000, 256);
    let mut r = seeded(101);
    let spectrum = DMatrix::from_fn(d, d, |i, j| if i == j { 1.0 / (1.0 + i as f64).sqrt() } else { 0.0 });
    let x = gaussian(n, d, &mut r) * spectrum;
    let cfg = MetricConfig::default();
    let mut scoring = std::time::Duration::ZERO;
    let t0 = Instant::now();
    let px = PreparedSpace::new(&matrix("x", x.clone()));
    scoring += t0.elapsed();
    let mut worst = [0.0f64; 4];
    for _ in 0..20 {
        let xq = &x * random_orthogonal(d, &mut r);
        for c in [0.1, 1.0, 10.0] {
            let y = matrix("y", &xq * c);
            let t = Instant::now();
            let py = PreparedSpace::new(&y);
            let err = |e: embfuse::simgauge::SimilarityError| e.to_string();
            let cka = cka_prepared(&px, &py).map_err(err)?;
            let sv = svcca_prepared(&px, &py, &cfg).map_err(err)?;
            let knn = knn_prepared(&px, &py, &cfg).map_err(err)?;
            let opd = procrustes_prepared(&px, &py, &cfg).map_err(err)?;
            scoring += t.elapsed();
            worst[0] = worst[0].max((cka - 1.0).abs());
            worst[1] = worst[1].max((sv - 1.0).abs());
            worst[2] = worst[2].max((knn - 1.0).abs());
            worst[3] = worst[3].max(opd);
        }
    }
    let secs = scoring.as_secs_f64();
    let detail = format!(
        "60 transforms, max |1-cka| {:.1e}, |1-svcca| {:.1e}, |1-knn| {:.1e}, procrustes {:.1e}; scoring {secs:.1}s",
        worst[0], worst[1], worst[2], worst[3]
    );
    ensure(worst[..3].iter().all(|&w| w <= 1e-6) && worst[3] < 1e-6, || detail.clone())?;
    ensure(secs < 30.0, || detail.clone())?;
    Ok(detail)
}

fn score_vec(s: &SimilarityScores) -> [f64; 6] {
    [s.cka, s.svcca, s.procrustes, s.knn_jaccard, s.r2_x_to_y, s.r2_y_to_x]
}

fn c2_null_calibration() -> Outcome {
    const NAMES: [&str; 6] = ["cka", "svcca", "procrustes", "knn_jaccard", "r2_ab", "r2_ba"];
    let cfg = MetricConfig::default();
    let (n, d) = (300, 24);
    let mut max_z: f64 = 0.0;
    for seed in 0..10u64 {
        let mut r = seeded(200 + seed);
        let x = gaussian(n, d, &mut r);
        let y = gaussian(n, d, &mut r);
        let px = PreparedSpace::new(&matrix("x", x));
        let observed = score_vec(&score_pair(&px, &PreparedSpace::new(&matrix("y", y.clone())), &cfg).map_err(|e| e.to_string())?);
        let mut null = Vec::with_capacity(100);
        let mut perm: Vec<usize> = (0..n).collect();
        for _ in 0..100 {
            perm.shuffle(&mut r);
            let shuffled = y.select_rows(&perm);
            let s = score_pair(&px, &PreparedSpace::new(&matrix("y", shuffled)), &cfg).map_err(|e| e.to_string())?;
            null.push(score_vec(&s));
        }
        for k in 0..6 {
            let vals: Vec<f64> = null.iter().map(|v| v[k]).collect();
            let mu = vals.iter().sum::<f64>() / 100.0;
            let sd = (vals.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / 99.0).sqrt();
            let z = (observed[k] - mu).abs() / sd;
            max_z = max_z.max(z);
            ensure(z <= 3.0, || format!("seed {seed} {}: observed {} outside {mu}±3·{sd}", NAMES[k], observed[k]))?;
        }
    }
    Ok(format!("10 seeds × 6 scores inside 3σ bands, max |z| {max_z:.2}"))
}

/// Gradient magnitude below which central differences are dominated by
/// rounding; relative errors are taken against at least this scale.
const GRAD_FLOOR: f64 = 1e-6;

/// Largest `|g − fd| / max(|g|, |fd|, GRAD_FLOOR)` over `coords`, with the
/// analytic and numeric values at that coordinate.
fn fd_relative_error(
    params: &[f64],
    coords: &[usize],
    loss_grad: impl Fn(&[f64]) -> (f64, Vec<f64>),
) -> (f64, f64, f64) {
    let (_, grad) = loss_grad(params);
    let mut p = params.to_vec();
    let mut worst = (0.0, 0.0, 0.0);
    for &c in coords {
        let orig = p[c];
        p[c] = orig + 1e-5;
        let up = loss_grad(&p).0;
        p[c] = orig - 1e-5;
        let down = loss_grad(&p).0;
        p[c] = orig;
        let fd = (up - down) / 2e-5;
        let rel = (grad[c] - fd).abs() / grad[c].abs().max(fd.abs()).max(GRAD_FLOOR);
        if rel > worst.0 {
            worst = (rel, grad[c], fd);
        }
    }
    worst
}

fn block_coords(blocks: &[(usize, usize)], total: usize, r: &mut Rng) -> Vec<usize> {
    (0..total)
        .map(|i| {
            let (off, len) = blocks[i % blocks.len()];
            off + r.random_range(0..len)
        })
        .collect()
}

fn c3_gradient_fidelity() -> Outcome {
    let mut r = seeded(303);
    let mil = GatedAttentionMil::new(24, MilArch { dropout: 0.0, ..MilArch::default() }, 3).unwrap();
    let bag = gaussian(12, 24, &mut r);
    let blocks: Vec<(usize, usize)> = mil.parameter_blocks().iter().map(|b| (b.1, b.2)).collect();
    let coords = block_coords(&blocks, 100, &mut r);
    let mil_err = fd_relative_error(mil.params(), &coords, |p| {
        let mut m = mil.clone();
        m.params_mut().copy_from_slice(p);
        m.loss_and_grad(&bag, 1, 1e-5, None).unwrap()
    });

    let mlp = SlideMlp::new(24, MlpArch { dropout: 0.0, ..MlpArch::default() }, 3).unwrap();
    let x: Vec<f64> = (0..24).map(|_| StandardNormal.sample(&mut r)).collect();
    let blocks: Vec<(usize, usize)> = mlp.parameter_blocks().iter().map(|b| (b.1, b.2)).collect();
    let coords = block_coords(&blocks, 100, &mut r);
    let mlp_err = fd_relative_error(mlp.params(), &coords, |p| {
        let mut m = mlp.clone();
        m.params_mut().copy_from_slice(p);
        m.loss_and_grad(&x, 0, 1e-5, None).unwrap()
    });
    let detail = format!(
        "max relative error MIL {:.2e} (g {:.3e}, fd {:.3e}), MLP {:.2e} (g {:.3e}, fd {:.3e})",
        mil_err.0, mil_err.1, mil_err.2, mlp_err.0, mlp_err.1, mlp_err.2
    );
    ensure(mil_err.0 < 1e-4 && mlp_err.0 < 1e-4, || detail.clone())?;
    Ok(detail)
}

fn separable_bags(n: usize, tiles: usize, d: usize, seed: u64) -> BagDataset {
    let mut r = seeded(seed);
    let slides = (0..n)
        .map(|i| {
            let label = (i % 2) as u8;
            let mut m = gaussian(tiles, d, &mut r);
            if label == 1 {
                for row in 0..tiles.div_ceil(4) {
                    m[(row, 0)] += 4.0;
                }
            }
            let id = format!("s{i}");
            let ids = (0..tiles).map(|k| format!("{id}#{k}")).collect();
            let enc = BTreeMap::from([("enc".to_string(), EmbeddingMatrix::new("enc", ids, m).unwrap())]);
            SlideBag::new(id.clone(), id, label, enc, None).unwrap()
        })
        .collect();
    BagDataset::new(slides, ["low".into(), "high".into()]).unwrap()
}

fn c4_mil_correctness() -> Outcome {
    let mut r = seeded(404);
    let model = GatedAttentionMil::new(32, MilArch::default(), 2).unwrap();
    let bag = gaussian(30, 32, &mut r);
    let (base, _) = model.forward(&bag, None).unwrap();
    let mut perm: Vec<usize> = (0..30).collect();
    let mut worst_perm: f64 = 0.0;
    for _ in 0..20 {
        perm.shuffle(&mut r);
        let (l, _) = model.forward(&bag.select_rows(&perm), None).unwrap();
        worst_perm = worst_perm.max((l[0] - base[0]).abs()).max((l[1] - base[1]).abs());
    }
    ensure(worst_perm <= 1e-10, || format!("permuted logits moved by {worst_perm:e}"))?;

    let data = separable_bags(48, 8, 8, 11);
    let train: Vec<usize> = (0..32).collect();
    let val: Vec<usize> = (32..48).collect();
    let cfg = TrainConfig { seed: 11, max_epochs: 200, ..TrainConfig::default() };
    let out = train_mil(&data, "enc", &train, &val, MilArch::default(), &cfg).map_err(|e| e.to_string())?;
    let preds = predict_bags(&out.model, &data, "enc", &(0..48).collect::<Vec<_>>()).map_err(|e| e.to_string())?;
    let mut worst_sum: f64 = 0.0;
    for p in &preds {
        let a = p.attention.as_ref().ok_or("missing attention")?;
        ensure(a.iter().all(|&v| v >= 0.0), || "negative attention weight".into())?;
        worst_sum = worst_sum.max((a.iter().sum::<f64>() - 1.0).abs());
    }
    ensure(worst_sum <= 1e-10, || format!("attention sums off by {worst_sum:e}"))?;
    let correct = val.iter().filter(|&&i| preds[i].label == data.slides[i].label).count();
    let acc = correct as f64 / val.len() as f64;
    let detail = format!(
        "perm drift {worst_perm:.1e}, simplex error {worst_sum:.1e}, val acc {acc} after {} epochs (best {:?})",
        out.history.len(),
        out.best_epoch
    );
    ensure(acc == 1.0 && out.history.len() <= 200, || detail.clone())?;
    Ok(detail)
}

fn c5_pruning() -> Outcome {
    let mut worst_excess = f64::NEG_INFINITY;
    for inst in 0..50u64 {
        let mut r = seeded(500 + inst);
        let n = 60 + r.random_range(0..60);
        let d = 10 + r.random_range(0..30);
        let k = 2 + r.random_range(0..6);
        let x = gaussian(n, k, &mut r) * gaussian(k, d, &mut r) + gaussian(n, d, &mut r) * 0.5;
        let mut labels: Vec<u8> = (0..n).map(|i| (i % 2) as u8).collect();
        labels.shuffle(&mut r);
        let m = matrix("x", x.clone());
        let mut grid: Vec<f64> = THETAS.to_vec();
        grid.extend((0..6).map(|_| r.random_range(0.0..1.0)));
        grid.sort_by(f64::total_cmp);
        let sweep = sweep_thetas(&m, &labels, &grid).map_err(|e| e.to_string())?;
        let mut prev: Option<BTreeSet<usize>> = None;
        for sig in &sweep.signatures {
            for (a, &i) in sig.retained.iter().enumerate() {
                for &j in &sig.retained[a + 1..] {
                    let rho = pearson(&column(&x, i), &column(&x, j)).abs();
                    worst_excess = worst_excess.max(rho - sig.theta);
                    ensure(rho <= sig.theta + 1e-12, || format!("instance {inst}: |r({i},{j})| = {rho} > θ {}", sig.theta))?;
                }
            }
            let set: BTreeSet<usize> = sig.retained.iter().copied().collect();
            if let Some(p) = &prev {
                ensure(p.is_subset(&set), || format!("instance {inst}: nesting broken at θ {}", sig.theta))?;
            }
            prev = Some(set);
        }
    }

    let mut r = seeded(550);
    let n = 400;
    let base = gaussian(n, 12, &mut r);
    let labels: Vec<u8> = (0..n).map(|i| u8::from(base[(i, 0)] + base[(i, 1)] > 0.0)).collect();
    let (dup, truth) = redundancy_ladder(
        &matrix("x", base.clone()),
        &[0, 1, 2, 3, 4, 5],
        &LadderConfig { duplication_factor: 4, noisy_correlation: None, seed: 1 },
    )
    .map_err(|e| e.to_string())?;
    let ranked = rank_features(&dup, &labels).map_err(|e| e.to_string())?;
    for theta in THETAS.iter().copied().chain([0.9, 0.999]) {
        let sig = correlation_prune(&dup, &ranked, theta).map_err(|e| e.to_string())?;
        for g in &truth.groups {
            let kept = g.iter().filter(|c| sig.retained.contains(c)).count();
            ensure(kept == 1, || format!("exact duplicates: group {g:?} keeps {kept} at θ {theta}"))?;
        }
    }

    let mut flips = Vec::new();
    for (step, &rho) in [0.3, 0.45, 0.6, 0.75, 0.9].iter().enumerate() {
        let (noisy, truth) = redundancy_ladder(
            &matrix("x", base.clone()),
            &[0, 1],
            &LadderConfig { duplication_factor: 2, noisy_correlation: Some(rho), seed: 10 + step as u64 },
        )
        .map_err(|e| e.to_string())?;
        let ranked = rank_features(&noisy, &labels).map_err(|e| e.to_string())?;
        for (below, above) in [(rho - 0.02, rho + 0.02)] {
            let lo = correlation_prune(&noisy, &ranked, below).map_err(|e| e.to_string())?;
            let hi = correlation_prune(&noisy, &ranked, above).map_err(|e| e.to_string())?;
            for g in &truth.groups {
                let kept_lo = g.iter().filter(|c| lo.retained.contains(c)).count();
                let kept_hi = g.iter().filter(|c| hi.retained.contains(c)).count();
                ensure(kept_lo == 1 && kept_hi == 2, || {
                    format!("noisy r={rho}: group {g:?} keeps {kept_lo} at θ {below:.2} and {kept_hi} at θ {above:.2}")
                })?;
            }
        }
        flips.push(rho);
    }
    Ok(format!(
        "50 instances decorrelated (max |r|−θ {worst_excess:.3}) and nested; exact groups keep 1; noisy ladder flips at r ∈ {flips:?} ±0.02"
    ))
}

/// L2-regularised logistic regression by Newton steps; returns test-set AUC.
fn logistic_oracle_auc(x: &DMatrix<f64>, labels: &[u8], train: &[usize], test: &[usize]) -> f64 {
    let d = x.ncols() + 1;
    let design = |rows: &[usize]| DMatrix::from_fn(rows.len(), d, |i, j| if j == 0 { 1.0 } else { x[(rows[i], j - 1)] });
    let a = design(train);
    let y = DVector::from_iterator(train.len(), train.iter().map(|&i| f64::from(labels[i])));
    let mut w = DVector::zeros(d);
    for _ in 0..50 {
        let p = (&a * &w).map(|z| 1.0 / (1.0 + (-z).exp()));
        let g = a.transpose() * (&p - &y) + &w * 1e-3;
        let s = p.map(|v| (v * (1.0 - v)).max(1e-12));
        let mut h = a.transpose() * DMatrix::from_diagonal(&s) * &a;
        for k in 0..d {
            h[(k, k)] += 1e-3;
        }
        let step = h.cholesky().expect("regularised Hessian is SPD").solve(&g);
        w -= &step;
        if step.norm() < 1e-10 {
            break;
        }
    }
    let scores: Vec<f64> = (design(test) * &w).iter().copied().collect();
    let ys: Vec<u8> = test.iter().map(|&i| labels[i]).collect();
    brute_auc(&scores, &ys).expect("both classes in test split")
}

struct FusionSeed {
    oracle_single: f64,
    oracle_fused: f64,
    singles: Vec<f64>,
    concat: f64,
    fusion: f64,
    theta: f64,
}

fn split_indices(n: usize, labels: &[u8], seed: u64) -> (Vec<usize>, Vec<usize>, Vec<usize>) {
    let mut r = substream(seed, 77);
    let mut by_class: [Vec<usize>; 2] = [vec![], vec![]];
    for i in 0..n {
        by_class[labels[i] as usize].push(i);
    }
    let (mut tr, mut va, mut te) = (vec![], vec![], vec![]);
    for c in &mut by_class {
        c.shuffle(&mut r);
        let n_te = c.len() / 5;
        let n_va = c.len() / 5;
        te.extend_from_slice(&c[..n_te]);
        va.extend_from_slice(&c[n_te..n_te + n_va]);
        tr.extend_from_slice(&c[n_te + n_va..]);
    }
    (tr, va, te)
}

fn head_auc(x: &EmbeddingMatrix, labels: &[u8], split: &(Vec<usize>, Vec<usize>, Vec<usize>), seed: u64) -> (f64, f64) {
    let (tr, va, te) = split;
    let (_, stats) = standardize(&x.select_rows(tr).unwrap(), None).unwrap();
    let (z, _) = standardize(x, Some(&stats)).unwrap();
    let arch = MlpArch { hidden: vec![32, 16], dropout: 0.1 };
    let cfg = TrainConfig { learning_rate: 1e-3, patience: 10, max_epochs: 150, seed, ..TrainConfig::default() };
    let model = train_mlp(&z, labels, tr, va, arch, &cfg).unwrap().model;
    let score = |idx: &[usize]| {
        let p: Vec<f64> = predict_rows(&model, &z, idx).unwrap().iter().map(|p| p.prob_high).collect();
        let y: Vec<u8> = idx.iter().map(|&i| labels[i]).collect();
        auc(&p, &y).unwrap().unwrap()
    };
    (score(va), score(te))
}

fn fusion_seed(seed: u64, mixing: Mixing) -> FusionSeed {
    let out = generate(&GeneratorConfig { mixing, ..GeneratorConfig::complementary(500, seed) }).unwrap();
    let labels = &out.labels;
    let n = labels.len();
    let split = split_indices(n, labels, seed);
    let a = &out.encoders["enc_a"];
    let b = &out.encoders["enc_b"];
    let concat = concat_encoders(&[a, b]).unwrap();

    let oracle_single = [a, b]
        .iter()
        .map(|m| logistic_oracle_auc(m.values(), labels, &split.0, &split.2))
        .fold(f64::NEG_INFINITY, f64::max);
    let oracle_fused = logistic_oracle_auc(concat.values(), labels, &split.0, &split.2);

    let singles = vec![head_auc(a, labels, &split, seed).1, head_auc(b, labels, &split, seed).1];
    let concat_auc = head_auc(&concat, labels, &split, seed).1;

    let train_rows = concat.select_rows(&split.0).unwrap();
    let train_labels: Vec<u8> = split.0.iter().map(|&i| labels[i]).collect();
    let ranked = rank_features(&train_rows, &train_labels).unwrap();
    let mut best = (f64::NEG_INFINITY, 0.0, 0.0);
    for theta in THETAS {
        let sig = correlation_prune(&train_rows, &ranked, theta).unwrap();
        let fused = apply_signature(&concat, &sig).unwrap();
        let (val, test) = head_auc(&fused, labels, &split, seed);
        if val > best.0 {
            best = (val, test, theta);
        }
    }
    FusionSeed { oracle_single, oracle_fused, singles, concat: concat_auc, fusion: best.1, theta: best.2 }
}

fn c6_fusion_oracle() -> Outcome {
    let t0 = Instant::now();
    let runs: Vec<FusionSeed> = (0..50u64).map(|s| fusion_seed(1000 + s, Mixing::Axis)).collect();
    let med = |f: &dyn Fn(&FusionSeed) -> f64| median(&runs.iter().map(f).collect::<Vec<_>>());
    let oracle_gap = med(&|s| s.oracle_fused - s.oracle_single);
    let m_if = med(&|s| s.fusion);
    let m_concat = med(&|s| s.concat);
    let m_a = med(&|s| s.singles[0]);
    let m_b = med(&|s| s.singles[1]);
    let gap = med(&|s| s.fusion - s.singles[0].max(s.singles[1]));
    let thetas: BTreeMap<String, usize> = runs.iter().fold(BTreeMap::new(), |mut m, s| {
        *m.entry(format!("{}", s.theta)).or_insert(0) += 1;
        m
    });
    // dense mixing spreads every latent over all columns; reported, not asserted
    let dense: Vec<FusionSeed> = (0..50u64).map(|s| fusion_seed(1000 + s, Mixing::Rotation)).collect();
    let dmed = |f: &dyn Fn(&FusionSeed) -> f64| median(&dense.iter().map(f).collect::<Vec<_>>());
    let detail = format!(
        "median test AUC IF {m_if:.4}, concat {m_concat:.4}, enc_a {m_a:.4}, enc_b {m_b:.4}; \
         median IF−best single {gap:.4}; logistic oracle gap {oracle_gap:.4}; chosen θ {thetas:?}; \
         rotation mixing: IF {:.4}, concat {:.4}, best single {:.4}; {:.0}s",
        dmed(&|s| s.fusion),
        dmed(&|s| s.concat),
        dmed(&|s| s.singles[0].max(s.singles[1])),
        t0.elapsed().as_secs_f64()
    );
    ensure(oracle_gap > 0.0, || format!("oracle baseline shows no fusion benefit: {detail}"))?;
    ensure(m_if >= m_concat && m_if >= m_a && m_if >= m_b && gap > 0.0, || detail.clone())?;
    Ok(detail)
}

fn c7_auc_oracle() -> Outcome {
    let mut r = seeded(707);
    let mut undefined = 0;
    for inst in 0..1000 {
        let n = r.random_range(1..=200);
        let levels = r.random_range(2..=50);
        let probs: Vec<f64> = (0..n).map(|_| f64::from(r.random_range(0..levels)) / f64::from(levels)).collect();
        let pos_rate: f64 = r.random_range(0.05..0.95);
        let labels: Vec<u8> = (0..n).map(|_| u8::from(r.random_bool(pos_rate))).collect();
        let got = auc(&probs, &labels).map_err(|e| e.to_string())?;
        let want = brute_auc(&probs, &labels);
        undefined += usize::from(want.is_none());
        ensure(got == want, || format!("instance {inst} (n={n}): rank {got:?} vs brute {want:?}"))?;
    }
    Ok(format!("1000 instances exact ({undefined} single-class)"))
}

fn c8_statistics() -> Outcome {
    let mut r = seeded(808);
    let n = 300;
    let labels: Vec<u8> = (0..n).map(|i| (i % 2) as u8).collect();
    let a: Vec<f64> = labels.iter().map(|&l| (f64::from(l) * 0.8 + r.random_range(0.0..1.0)) / 1.8).collect();
    let b: Vec<f64> = labels.iter().map(|&l| (f64::from(l) * 0.3 + r.random_range(0.0..1.0)) / 1.3).collect();
    let cfg = BootstrapConfig { iterations: 50, fraction: 0.8, n_comparisons: 6, seed: 42, ..BootstrapConfig::default() };
    let run = |threads: usize| {
        let pool = rayon::ThreadPoolBuilder::new().num_threads(threads).build().unwrap();
        pool.install(|| bootstrap_compare(&a, &b, &labels, Metric::Auc, &cfg).unwrap())
    };
    let first = run(1);
    let bits = |c: &embfuse::evalkit::ComparisonResult| -> Vec<u64> {
        c.values.iter().flatten().map(|v| v.to_bits()).chain([c.p_value.to_bits(), c.adjusted_p.to_bits()]).collect()
    };
    for threads in [1, 2, 4] {
        let again = run(threads);
        ensure(bits(&again) == bits(&first) && again.index_log == first.index_log, || {
            format!("bootstrap table differs with {threads} threads")
        })?;
    }
    let same = bootstrap_compare(&a, &a, &labels, Metric::Auc, &cfg).map_err(|e| e.to_string())?;
    ensure(same.p_value > 0.99 && same.tier == Tier::NotSignificant, || format!("identical models p = {}", same.p_value))?;

    let perfect: Vec<f64> = labels.iter().map(|&l| f64::from(l)).collect();
    let noise: Vec<f64> = (0..n).map(|_| r.random_range(0.0..1.0)).collect();
    let extreme = bootstrap_compare(&perfect, &noise, &labels, Metric::Auc, &cfg).map_err(|e| e.to_string())?;
    ensure(extreme.p_value < 0.05 / 6.0 && extreme.tier != Tier::NotSignificant, || {
        format!("extreme contrast p = {} tier {}", extreme.p_value, extreme.tier)
    })?;
    Ok(format!(
        "bitwise identical over 1/2/4 threads; identical models p = {:.3}; extreme contrast p = {:.2e} ({}, N=6)",
        same.p_value, extreme.p_value, extreme.tier
    ))
}

fn c9_lens() -> Outcome {
    const GRID: [f64; 6] = [25.0, 50.0, 60.0, 70.0, 80.0, 90.0];
    let mut r = seeded(909);
    for m in 0..50 {
        let t = 40 + r.random_range(0..200);
        let coords: Vec<(i64, i64)> = (0..t as i64).map(|k| (k / 16, k % 16)).collect();
        let values: Vec<f64> = (0..t).map(|_| f64::from(r.random_range(0..30u32))).collect();
        let a = AttentionMap::new(format!("s{m}"), coords.clone(), values).map_err(|e| e.to_string())?;
        let other: Vec<f64> = (0..t).map(|_| r.random_range(0.0..1.0)).collect();
        let b = AttentionMap::new(format!("s{m}"), coords.clone(), other).map_err(|e| e.to_string())?;
        let regions: Vec<Region> = (0..t)
            .map(|_| match r.random_range(0..3) {
                0 => Region::Tumor,
                1 => Region::Benign,
                _ => Region::Background,
            })
            .collect();
        let mask = RegionMask::new(coords, regions).map_err(|e| e.to_string())?;
        let mut prev_mask: Option<Vec<bool>> = None;
        let mut prev_cov: Option<(Option<f64>, Option<f64>)> = None;
        for &p in &GRID {
            let ma = percentile_mask(&a, p).map_err(|e| e.to_string())?;
            let mb = percentile_mask(&b, p).map_err(|e| e.to_string())?;
            if let Some(prev) = &prev_mask {
                ensure(ma.iter().zip(prev).all(|(now, before)| !now || *before), || format!("map {m}: mask at {p} not nested"))?;
            }
            ensure(dice(&ma, &ma).map_err(|e| e.to_string())?.value == 1.0, || format!("map {m}: self Dice ≠ 1"))?;
            let ab = dice(&ma, &mb).map_err(|e| e.to_string())?.value;
            let ba = dice(&mb, &ma).map_err(|e| e.to_string())?.value;
            ensure(ab == ba, || format!("map {m}: Dice asymmetric"))?;
            let cov = region_coverage(&a, &mask, p).map_err(|e| e.to_string())?;
            if let Some((pt, pb)) = prev_cov {
                let ok = |now: Option<f64>, before: Option<f64>| match (now, before) {
                    (Some(x), Some(y)) => x <= y,
                    (None, None) => true,
                    _ => false,
                };
                ensure(ok(cov.tumor, pt) && ok(cov.benign, pb), || format!("map {m}: coverage rises at {p}"))?;
            }
            prev_mask = Some(ma);
            prev_cov = Some((cov.tumor, cov.benign));
        }
    }

    let n = 400;
    let mut x = gaussian(n, 8, &mut r);
    let labels: Vec<u8> = (0..n).map(|i| (i % 2) as u8).collect();
    for i in 0..n {
        x[(i, 0)] += 3.0 * f64::from(labels[i]);
    }
    let real = silhouette(&x, &labels).map_err(|e| e.to_string())?;
    let mut shuffled = labels.clone();
    let mut null = Vec::new();
    for _ in 0..20 {
        shuffled.shuffle(&mut r);
        null.push(silhouette(&x, &shuffled).map_err(|e| e.to_string())?);
    }
    let null_mean = null.iter().sum::<f64>() / null.len() as f64;
    let null_max = null.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    ensure(null_max < 0.02, || format!("permutation-null silhouette up to {null_max}"))?;

    let mut worst_rel: f64 = 0.0;
    for d in [2usize, 8, 32, 128] {
        let per_class = 4000;
        let pts = gaussian(2 * per_class, d, &mut r);
        let labels: Vec<u8> = (0..2 * per_class).map(|i| u8::from(i >= per_class)).collect();
        let c = compactness(&pts, &labels).map_err(|e| e.to_string())?;
        let norms: Vec<f64> = (0..200_000).map(|_| (0..d).map(|_| StandardNormal.sample(&mut r)).map(|v: f64| v * v).sum::<f64>().sqrt()).collect();
        let simulated = median(&norms);
        let df = d as f64;
        let closed = (df * (1.0 - 2.0 / (9.0 * df)).powi(3)).sqrt();
        ensure((closed - simulated).abs() / simulated < 0.02, || format!("d={d}: closed form {closed} vs simulation {simulated}"))?;
        for v in c {
            let v = v.ok_or("compactness undefined")?;
            let rel = (v - simulated).abs() / simulated;
            worst_rel = worst_rel.max(rel);
            ensure(rel < 0.02, || format!("d={d}: compactness {v} vs simulated chi median {simulated}"))?;
        }
    }
    Ok(format!(
        "nesting, Dice and coverage hold on 50 maps; silhouette {real:.3} vs permuted mean {null_mean:.4} (max |s| {null_max:.4}); \
         compactness within {:.2}% of chi median",
        worst_rel * 100.0
    ))
}

fn c10_tsne() -> Outcome {
    let t0 = Instant::now();
    let mut r = seeded(1010);
    let n = 400;
    let mut x = gaussian(n, 10, &mut r);
    let labels: Vec<u8> = (0..n).map(|i| u8::from(i >= n / 2)).collect();
    for i in n / 2..n {
        for j in 0..10 {
            x[(i, j)] += 2.5;
        }
    }
    let cfg = TsneConfig { seed: 5, ..TsneConfig::default() };
    let p1 = tsne(&x, &cfg).map_err(|e| e.to_string())?;
    let secs = t0.elapsed().as_secs_f64();
    let p2 = tsne(&x, &cfg).map_err(|e| e.to_string())?;
    ensure(p1 == p2, || "two runs with one seed differ".into())?;
    let kl_post = p1.kl_at(cfg.exaggeration_iters).ok_or("no KL at end of exaggeration")?;
    let kl_final = p1.kl_at(cfg.iterations).ok_or("no final KL")?;
    let s = silhouette(&p1.coords, &labels).map_err(|e| e.to_string())?;
    let detail = format!("KL {kl_post:.3} → {kl_final:.3}, projection silhouette {s:.3}, {secs:.1}s per run");
    ensure(kl_final < kl_post && s > 0.6 && secs < 60.0, || detail.clone())?;
    Ok(detail)
}

fn c11_performance() -> Outcome {
    let mut r = seeded(1111);
    let n = 5000;
    let latent = gaussian(n, 64, &mut r);
    let dims = [1024usize, 768, 1024, 512, 384];
    let encoders: BTreeMap<String, EmbeddingMatrix> = dims
        .iter()
        .enumerate()
        .map(|(m, &d)| {
            let x = &latent * gaussian(64, d, &mut r) + gaussian(n, d, &mut r);
            (format!("enc{m}"), matrix(&format!("enc{m}"), x))
        })
        .collect();
    let t0 = Instant::now();
    let report = similarity_report(&encoders, &MetricConfig::default()).map_err(|e| e.to_string())?;
    let sim_secs = t0.elapsed().as_secs_f64();
    ensure(report.rows.len() == 10, || format!("{} rows", report.rows.len()))?;

    let wide = &latent * gaussian(64, 2048, &mut r) + gaussian(n, 2048, &mut r);
    let labels: Vec<u8> = (0..n).map(|i| u8::from(latent[(i, 0)] > 0.0)).collect();
    let m = matrix("concat", wide);
    let t1 = Instant::now();
    let sweep = sweep_thetas(&m, &labels, &THETAS).map_err(|e| e.to_string())?;
    let prune_secs = t1.elapsed().as_secs_f64();
    let threads = rayon::current_num_threads();
    let detail = format!(
        "similarity report 5 encoders N=5000 {sim_secs:.1}s; θ sweep 5000×2048 {prune_secs:.1}s ({} signatures); {threads} thread(s)",
        sweep.signatures.len()
    );
    ensure(sim_secs < 300.0 && prune_secs < 120.0, || detail.clone())?;
    Ok(detail)
}

fn c12_pipeline() -> Outcome {
    use embfuse::cli::{main_with_args, RunManifest, RUN_MANIFEST};
    let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
    let mut manifests = Vec::new();
    for run in ["first", "second"] {
        let out = tmp.path().join(run);
        let cfg = serde_json::json!({
            "task": "complementary",
            "seed": 12,
            "output_dir": out,
            "synth": {"preset": "complementary", "n_samples": 200},
            "steps": ["synth", "fuse", "train", "evaluate"],
            "train": {"config": {"max_epochs": 30, "patience": 5, "learning_rate": 1e-3},
                      "mlp": {"hidden": [16, 8], "dropout": 0.1}},
            "evaluate": {"bootstrap": {"iterations": 20}}
        });
        let path = tmp.path().join(format!("{run}.json"));
        std::fs::write(&path, cfg.to_string()).map_err(|e| e.to_string())?;
        let code = main_with_args(["embfuse", "run", "--config", path.to_str().unwrap()]);
        ensure(code == 0, || format!("run exited with {code}"))?;
        let metrics = std::fs::read_to_string(out.join("evaluate/metrics.csv")).map_err(|e| e.to_string())?;
        let models: BTreeSet<String> = metrics.lines().skip(1).filter_map(|l| l.split(',').next()).map(String::from).collect();
        let mut want: BTreeSet<String> = ["enc_a", "enc_b", "concat", "vote"].iter().map(|s| s.to_string()).collect();
        want.extend(THETAS.iter().map(|t| format!("if_{t}")));
        ensure(models == want, || format!("AUC table covers {models:?}"))?;
        ensure(out.join("report.json").exists(), || "no report.json".into())?;
        let text = std::fs::read_to_string(out.join(RUN_MANIFEST)).map_err(|e| e.to_string())?;
        manifests.push(serde_json::from_str::<RunManifest>(&text).map_err(|e| e.to_string())?);
    }
    ensure(manifests[0].outputs == manifests[1].outputs && manifests[0].config_sha256 == manifests[1].config_sha256, || {
        "artifact hashes differ between runs".into()
    })?;
    Ok(format!("{} artifacts hash-identical across two runs", manifests[0].outputs.len()))
}

fn main() {
    let criteria: [(&str, fn() -> Outcome); 12] = [
        ("similarity invariances", c1_similarity_invariance),
        ("null calibration", c2_null_calibration),
        ("gradient fidelity", c3_gradient_fidelity),
        ("MIL correctness", c4_mil_correctness),
        ("pruning correctness", c5_pruning),
        ("fusion benefit oracle", c6_fusion_oracle),
        ("AUC oracle equivalence", c7_auc_oracle),
        ("statistics determinism", c8_statistics),
        ("lens invariants", c9_lens),
        ("t-SNE sanity", c10_tsne),
        ("performance envelope", c11_performance),
        ("end-to-end pipeline", c12_pipeline),
    ];
    let selected: BTreeSet<usize> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let mut failed = 0;
    for (k, (name, f)) in criteria.iter().enumerate() {
        let id = k + 1;
        if !selected.is_empty() && !selected.contains(&id) {
            continue;
        }
        let t0 = Instant::now();
        let outcome = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
            Err(p.downcast_ref::<String>().cloned().or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string())).unwrap_or_default())
        });
        let secs = t0.elapsed().as_secs_f64();
        match outcome {
            Ok(d) => println!("criterion {id:>2} {name}: PASS [{secs:.1}s] {d}"),
            Err(d) => {
                failed += 1;
                println!("criterion {id:>2} {name}: FAIL [{secs:.1}s] {d}");
            }
        }
    }
    if failed > 0 {
        println!("{failed} criterion(s) failed");
        std::process::exit(1);
    }
}
