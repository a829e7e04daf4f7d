use std::collections::HashMap;

use distillkit::data::{generate_corpus, Corpus, SyntheticSpec};
use distillkit::distill::{adapt_tokens, calibrate_stats, AdapterHead};
use distillkit::encoder::{vit_forward, EncoderParams, ViTConfig};
use distillkit::eval::*;
use distillkit::pipeline::HeadRecord;
use distillkit::{rng, Error, Tensor};
use nalgebra::{DMatrix, SymmetricEigen};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

fn gaussian(rng: &mut impl Rng, n: usize) -> Vec<f32> {
    (0..n).map(|_| StandardNormal.sample(rng)).collect()
}

// ---------- KNN ----------

/// Full sort by (distance, index), explicit tally, explicit tie rules.
fn knn_oracle(features: &[Vec<f32>], labels: &[usize], q: &[f32], k: usize) -> usize {
    let mut all: Vec<(f64, usize)> = features
        .iter()
        .enumerate()
        .map(|(i, f)| (f.iter().zip(q).map(|(&a, &b)| ((a - b) as f64).powi(2)).sum::<f64>(), i))
        .collect();
    all.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let mut tally: HashMap<usize, (usize, f64)> = HashMap::new();
    for &(d2, i) in &all[..k] {
        let e = tally.entry(labels[i]).or_insert((0, 0.0));
        e.0 += 1;
        e.1 += d2.sqrt();
    }
    let top = tally.values().map(|v| v.0).max().unwrap();
    let mut cands: Vec<(f64, usize)> = tally.iter().filter(|(_, v)| v.0 == top).map(|(&c, v)| (v.1, c)).collect();
    cands.sort_by(|a, b| a.partial_cmp(b).unwrap());
    cands[0].1
}

fn bank_of(rows: &[Vec<f32>], labels: &[usize]) -> FeatureBank {
    let d = rows[0].len();
    FeatureBank::new(Tensor::new(vec![rows.len(), d], rows.concat()).unwrap(), labels.to_vec(), "test").unwrap()
}

#[test]
fn knn_exact_row_with_k1() {
    let mut r = rng::stream(1, 0);
    let rows: Vec<Vec<f32>> = (0..20).map(|_| gaussian(&mut r, 5)).collect();
    let labels: Vec<usize> = (0..20).map(|i| i % 4).collect();
    let bank = bank_of(&rows, &labels);
    for (i, row) in rows.iter().enumerate() {
        assert_eq!(knn_classify(&bank, row, 1).unwrap(), labels[i]);
    }
}

#[test]
fn knn_two_clusters() {
    let mut r = rng::stream(2, 0);
    let centers = [vec![0.0f32; 8], vec![10.0f32; 8].iter().map(|v| v / (8f32).sqrt()).collect::<Vec<_>>()];
    let sample = |c: usize, r: &mut _| -> Vec<f32> { gaussian(r, 8).iter().zip(&centers[c]).map(|(n, m)| n + m).collect() };
    let rows: Vec<Vec<f32>> = (0..400).map(|i| sample(i % 2, &mut r)).collect();
    let labels: Vec<usize> = (0..400).map(|i| i % 2).collect();
    let bank = bank_of(&rows, &labels);
    let mut correct = 0;
    for i in 0..200 {
        let q = sample(i % 2, &mut r);
        let pred = knn_classify(&bank, &q, DEFAULT_K).unwrap();
        assert_eq!(pred, knn_oracle(&rows, &labels, &q, DEFAULT_K));
        correct += (pred == i % 2) as usize;
    }
    assert!(correct as f64 / 200.0 >= 0.99, "{correct}");
}

#[test]
fn knn_matches_oracle_with_ties() {
    // Small integer features make distance and vote ties common.
    let mut r = rng::stream(3, 0);
    let rows: Vec<Vec<f32>> = (0..60).map(|_| (0..3).map(|_| r.random_range(0..4) as f32).collect()).collect();
    let labels: Vec<usize> = (0..60).map(|_| r.random_range(0..5)).collect();
    let bank = bank_of(&rows, &labels);
    for _ in 0..1000 {
        let q: Vec<f32> = (0..3).map(|_| r.random_range(0..4) as f32 + 0.5 * r.random_range(0..2) as f32).collect();
        let k = r.random_range(1..=12);
        assert_eq!(knn_classify(&bank, &q, k).unwrap(), knn_oracle(&rows, &labels, &q, k));
    }
}

#[test]
fn knn_tie_rules() {
    // Two votes each; class 3 is closer in total.
    let rows = vec![vec![1.0], vec![-1.0], vec![2.0], vec![-3.0]];
    let bank = bank_of(&rows, &[3, 3, 1, 1]);
    assert_eq!(knn_classify(&bank, &[0.0], 4).unwrap(), 3);
    // Same votes, same total distance: lower class id.
    let bank = bank_of(&[vec![1.0], vec![-1.0]], &[7, 2]);
    assert_eq!(knn_classify(&bank, &[0.0], 2).unwrap(), 2);
}

#[test]
fn knn_scale_invariance() {
    let mut r = rng::stream(4, 0);
    let rows: Vec<Vec<f32>> = (0..100).map(|_| gaussian(&mut r, 6)).collect();
    let labels: Vec<usize> = (0..100).map(|_| r.random_range(0..3)).collect();
    let bank = bank_of(&rows, &labels);
    for c in [4.0f32, 3.7] {
        let scaled: Vec<Vec<f32>> = rows.iter().map(|v| v.iter().map(|x| x * c).collect()).collect();
        let sbank = bank_of(&scaled, &labels);
        for _ in 0..100 {
            let q = gaussian(&mut r, 6);
            let sq: Vec<f32> = q.iter().map(|x| x * c).collect();
            assert_eq!(knn_classify(&bank, &q, 10).unwrap(), knn_classify(&sbank, &sq, 10).unwrap());
        }
    }
}

#[test]
fn knn_errors() {
    let empty = FeatureBank::new(Tensor::zeros(vec![0, 3]), vec![], "e").unwrap();
    assert!(matches!(knn_classify(&empty, &[0.0; 3], 1), Err(Error::Parameter(_))));
    let bank = bank_of(&[vec![0.0, 1.0]], &[0]);
    assert!(knn_classify(&bank, &[0.0, 0.0], 2).is_err());
    assert!(matches!(knn_classify(&bank, &[0.0], 1), Err(Error::Dimension(_))));
    assert!(FeatureBank::new(Tensor::zeros(vec![2, 3]), vec![0], "x").is_err());
    assert!(FeatureBank::new(Tensor::full(vec![1, 1], f32::NAN), vec![0], "x").is_err());
}

// ---------- zero-shot ----------

#[test]
fn prototypes_are_unit_class_means() {
    let tokens = Tensor::new(vec![4, 2], vec![1.0, 0.0, 3.0, 0.0, 0.0, 2.0, 0.0, -4.0]).unwrap();
    let p = PrototypeMatrix::from_class_means(&tokens, &[5, 5, 1, 1]).unwrap();
    assert_eq!(p.classes, vec![1, 5]);
    // class 1 mean (0, -1) -> (0, -1); class 5 mean (2, 0) -> (1, 0)
    assert_eq!(p.weights.data(), &[0.0, -1.0, 1.0, 0.0]);
    let mut r = rng::stream(5, 0);
    let p = PrototypeMatrix::new(&Tensor::new(vec![7, 9], gaussian(&mut r, 63)).unwrap(), (0..7).collect()).unwrap();
    for i in 0..7 {
        let n: f64 = p.weights.row(i).iter().map(|&x| (x as f64).powi(2)).sum::<f64>().sqrt();
        assert!((n - 1.0).abs() <= 1e-6);
    }
}

#[test]
fn zeroshot_recovers_the_matching_prototype() {
    let head = AdapterHead::init(6, 16, 5, 9, 0);
    let mut r = rng::stream(6, 0);
    let token = Tensor::from_vec(gaussian(&mut r, 6));
    let adapted = adapt_tokens(&head, &token).unwrap();
    let mut rows = gaussian(&mut r, 3 * 5);
    rows[5..10].copy_from_slice(adapted.data());
    let protos = PrototypeMatrix::new(&Tensor::new(vec![3, 5], rows).unwrap(), vec![10, 11, 12]).unwrap();
    assert_eq!(zeroshot_classify(&token, &head, &protos).unwrap(), 11);
}

#[test]
fn zeroshot_matches_cosine_argmax_oracle() {
    let mut r = rng::stream(7, 0);
    for trial in 0..1000 {
        let head = AdapterHead::init(4, 12, 6, trial, 1);
        let token = Tensor::from_vec(gaussian(&mut r, 4));
        let rows = Tensor::new(vec![5, 6], gaussian(&mut r, 30)).unwrap();
        let protos = PrototypeMatrix::new(&rows, (0..5).collect()).unwrap();
        let z = adapt_tokens(&head, &token).unwrap();
        let zn = z.data().iter().map(|&x| (x as f64).powi(2)).sum::<f64>().sqrt();
        let best = (0..5)
            .map(|c| {
                let row = rows.row(c);
                let rn = row.iter().map(|&x| (x as f64).powi(2)).sum::<f64>().sqrt();
                (row.iter().zip(z.data()).map(|(&a, &b)| a as f64 * b as f64).sum::<f64>() / (rn * zn), c)
            })
            .fold((f64::NEG_INFINITY, 0), |a, b| if b.0 > a.0 { b } else { a });
        assert_eq!(zeroshot_classify(&token, &head, &protos).unwrap(), best.1);
    }
}

#[test]
fn zeroshot_scale_invariance_and_errors() {
    let mut r = rng::stream(8, 0);
    let rows = Tensor::new(vec![4, 5], gaussian(&mut r, 20)).unwrap();
    let protos = PrototypeMatrix::new(&rows, (0..4).collect()).unwrap();
    let scaled_rows = Tensor::new(vec![4, 5], rows.data().iter().map(|x| x * 6.5).collect()).unwrap();
    let scaled = PrototypeMatrix::new(&scaled_rows, (0..4).collect()).unwrap();
    for _ in 0..200 {
        let q = gaussian(&mut r, 5);
        let base = prototype_classify(&q, &protos).unwrap();
        let q2: Vec<f32> = q.iter().map(|x| x * 0.03).collect();
        assert_eq!(prototype_classify(&q2, &protos).unwrap(), base);
        assert_eq!(prototype_classify(&q, &scaled).unwrap(), base);
    }
    let head = AdapterHead::init(4, 8, 3, 0, 0);
    assert!(matches!(zeroshot_classify(&Tensor::zeros(vec![4]), &head, &protos), Err(Error::Dimension(_))));
    let head = AdapterHead::init(4, 8, 5, 0, 0);
    assert!(matches!(zeroshot_classify(&Tensor::zeros(vec![3]), &head, &protos), Err(Error::Dimension(_))));
}

// ---------- linear probe ----------

#[test]
fn probe_separates_two_classes() {
    let mut r = rng::stream(9, 0);
    let w: Vec<f32> = gaussian(&mut r, 6);
    let mut feats = Vec::new();
    let mut labels = Vec::new();
    while labels.len() < 500 {
        let x = gaussian(&mut r, 6);
        let s: f32 = x.iter().zip(&w).map(|(a, b)| a * b).sum();
        if s.abs() < 0.3 {
            continue;
        }
        labels.push((s > 0.0) as usize);
        feats.extend(x);
    }
    let x = Tensor::new(vec![500, 6], feats).unwrap();
    let t = ProbeTargets::Classes { labels, num_classes: 2 };
    let probe = linear_probe(&x, &t, ProbeMode::Classify, &ProbeConfig::default(), 0).unwrap();
    let ProbeMetrics::Classify { accuracy, miou } = probe.evaluate(&x, &t).unwrap() else { panic!() };
    assert!(accuracy >= 0.99 && miou >= 0.98, "{accuracy} {miou}");
}

#[test]
fn probe_fits_a_realizable_linear_target() {
    let mut r = rng::stream(10, 0);
    let (m, d, t) = (400, 8, 2);
    let a = gaussian(&mut r, d * t);
    let x = gaussian(&mut r, m * d);
    let y: Vec<f32> = (0..m)
        .flat_map(|i| (0..t).map(|j| (0..d).map(|k| x[i * d + k] * a[k * t + j]).sum::<f32>() + 0.5 * j as f32).collect::<Vec<_>>())
        .collect();
    let xt = Tensor::new(vec![m, d], x).unwrap();
    let targets = ProbeTargets::Values(Tensor::new(vec![m, t], y).unwrap());
    let cfg = ProbeConfig { lr: 1e-2, weight_decay: 0.0, steps: 3000, batch_size: m };
    let probe = linear_probe(&xt, &targets, ProbeMode::Regress, &cfg, 0).unwrap();
    let ProbeMetrics::Regress { rmse } = probe.evaluate(&xt, &targets).unwrap() else { panic!() };
    assert!(rmse <= 1e-3, "{rmse}");
}

#[test]
fn probe_rejects_mismatched_targets() {
    let x = Tensor::zeros(vec![3, 2]);
    let classes = ProbeTargets::Classes { labels: vec![0, 1, 0], num_classes: 2 };
    let values = ProbeTargets::Values(Tensor::zeros(vec![3, 1]));
    let cfg = ProbeConfig::default();
    assert!(matches!(linear_probe(&x, &classes, ProbeMode::Regress, &cfg, 0), Err(Error::Contract(_))));
    assert!(matches!(linear_probe(&x, &values, ProbeMode::Classify, &cfg, 0), Err(Error::Contract(_))));
    let short = ProbeTargets::Classes { labels: vec![0], num_classes: 2 };
    assert!(matches!(linear_probe(&x, &short, ProbeMode::Classify, &cfg, 0), Err(Error::Dimension(_))));
}

#[test]
fn mean_iou_examples() {
    assert_eq!(mean_iou(&[0, 1, 1, 0], &[0, 1, 1, 0], 2).unwrap(), 1.0);
    // class 0: inter 1, union 2; class 1: inter 1, union 2
    assert_eq!(mean_iou(&[0, 0, 1], &[0, 1, 1], 3).unwrap(), 0.5);
    assert!(mean_iou(&[0], &[0, 1], 2).is_err());
}

// ---------- correspondence ----------

fn encoder() -> EncoderParams {
    EncoderParams::init(
        &ViTConfig { image_size: 32, patch_size: 8, dim: 16, depth: 1, heads: 2, num_registers: 0, mlp_ratio: 2.0 },
        3,
    )
    .unwrap()
}

#[test]
fn pck_self_match_is_exact() {
    let spec = SyntheticSpec { num_classes: 4, images_per_class: 3, image_size: 32, seed: 2, ..Default::default() };
    let samples = generate_corpus(&spec).unwrap();
    let enc = encoder();
    let mut r = rng::stream(11, 0);
    for s in &samples {
        let out = vit_forward(&enc, &distillkit::data::normalize_input(&s.image).unwrap()).unwrap();
        let view = DenseView { tokens: &out.patch_tokens, grid: out.grid, height: 32, width: 32 };
        let pairs: Vec<KeypointPair> = (0..40)
            .map(|_| {
                let p = (r.random_range(0..32) as f32, r.random_range(0..32) as f32);
                KeypointPair { src: p, tgt: p }
            })
            .collect();
        assert_eq!(pck_correspondence(&view, &view, &pairs, 10.0, 0.0).unwrap(), 1.0);
    }
}

/// Per-pixel bilinear sample with corner alignment, computed independently.
fn sample_at(tokens: &[f32], rows: usize, cols: usize, d: usize, h: usize, w: usize, x: usize, y: usize) -> Vec<f64> {
    let sy = y as f64 * (rows - 1) as f64 / (h - 1) as f64;
    let sx = x as f64 * (cols - 1) as f64 / (w - 1) as f64;
    let mut out = vec![0.0; d];
    for r in 0..rows {
        for c in 0..cols {
            let wy = (1.0 - (sy - r as f64).abs()).max(0.0);
            let wx = (1.0 - (sx - c as f64).abs()).max(0.0);
            for k in 0..d {
                out[k] += wy * wx * tokens[(r * cols + c) * d + k] as f64;
            }
        }
    }
    out
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    dot / (a.iter().map(|x| x * x).sum::<f64>().sqrt() * b.iter().map(|x| x * x).sum::<f64>().sqrt())
}

#[test]
fn pck_matches_brute_force_similarity_map() {
    let (rows, cols, d, h, w) = (4, 4, 16, 24, 24);
    // Orthogonal random features: one signed basis vector per cell.
    let mut r = rng::stream(12, 0);
    let make = |r: &mut rand_chacha::ChaCha8Rng| -> Vec<f32> {
        let mut perm: Vec<usize> = (0..d).collect();
        for i in (1..d).rev() {
            perm.swap(i, r.random_range(0..=i));
        }
        let mut t = vec![0.0f32; rows * cols * d];
        for cell in 0..rows * cols {
            t[cell * d + perm[cell]] = if r.random::<bool>() { 1.0 } else { -1.0 };
        }
        t
    };
    let (a, b) = (make(&mut r), make(&mut r));
    let (ta, tb) = (Tensor::new(vec![16, d], a.clone()).unwrap(), Tensor::new(vec![16, d], b.clone()).unwrap());
    let src = DenseView { tokens: &ta, grid: (rows, cols), height: h, width: w };
    let tgt = DenseView { tokens: &tb, grid: (rows, cols), height: h, width: w };
    let pairs: Vec<KeypointPair> = (0..60)
        .map(|_| KeypointPair {
            src: (r.random_range(0..w) as f32, r.random_range(0..h) as f32),
            tgt: (r.random_range(0..w) as f32, r.random_range(0..h) as f32),
        })
        .collect();
    let mut oracle_hits = 0;
    for p in &pairs {
        let q = sample_at(&a, rows, cols, d, h, w, p.src.0 as usize, p.src.1 as usize);
        let mut best = (f64::NEG_INFINITY, (0, 0));
        for y in 0..h {
            for x in 0..w {
                let s = cosine(&q, &sample_at(&b, rows, cols, d, h, w, x, y));
                if s > best.0 + 1e-12 {
                    best = (s, (x, y));
                }
            }
        }
        let got = match_keypoint(&src, &tgt, p.src).unwrap();
        let gs = cosine(&q, &sample_at(&b, rows, cols, d, h, w, got.0, got.1));
        assert!((gs - best.0).abs() <= 1e-9, "similarity {gs} vs oracle {}", best.0);
        if got == (p.tgt.0 as usize, p.tgt.1 as usize) {
            oracle_hits += 1;
        }
    }
    // With a sub-pixel radius only exact hits count.
    let pck = pck_correspondence(&src, &tgt, &pairs, 1.0, 0.5).unwrap();
    assert_eq!(pck, oracle_hits as f64 / pairs.len() as f64);
    assert!(pck <= 0.2);
}

#[test]
fn pck_is_monotone_in_threshold() {
    let mut r = rng::stream(13, 0);
    let (ta, tb) = (Tensor::new(vec![16, 8], gaussian(&mut r, 128)).unwrap(), Tensor::new(vec![16, 8], gaussian(&mut r, 128)).unwrap());
    let src = DenseView { tokens: &ta, grid: (4, 4), height: 32, width: 32 };
    let tgt = DenseView { tokens: &tb, grid: (4, 4), height: 32, width: 32 };
    let pairs: Vec<KeypointPair> = (0..50)
        .map(|_| KeypointPair {
            src: (r.random_range(0..32) as f32, r.random_range(0..32) as f32),
            tgt: (r.random_range(0..32) as f32, r.random_range(0..32) as f32),
        })
        .collect();
    let mut prev = 0.0;
    for i in 0..=20 {
        let v = pck_correspondence(&src, &tgt, &pairs, 20.0, i as f64 * 0.1).unwrap();
        assert!(v >= prev);
        prev = v;
    }
    assert_eq!(prev, 1.0);
    assert!(matches!(pck_correspondence(&src, &tgt, &[], 20.0, 0.1), Err(Error::Parameter(_))));
    let outside = [KeypointPair { src: (40.0, 0.0), tgt: (0.0, 0.0) }];
    assert!(pck_correspondence(&src, &tgt, &outside, 20.0, 0.1).is_err());
}

#[test]
fn upsampling_hits_tokens_at_corners() {
    let t = Tensor::from_fn(vec![6, 2], |i| i as f32);
    let view = DenseView { tokens: &t, grid: (2, 3), height: 5, width: 9 };
    let up = upsample_bilinear(&view).unwrap();
    assert_eq!(up.shape(), &[45, 2]);
    assert_eq!(up.row(0), t.row(0));
    assert_eq!(up.row(8), t.row(2));
    assert_eq!(up.row(36), t.row(3));
    assert_eq!(up.row(44), t.row(5));
    // Midway between tokens 0 and 1 along x.
    assert_eq!(up.row(2), &[1.0, 2.0]);
}

// ---------- PCA ----------

#[test]
fn pca_rank3_and_eigen_oracle() {
    let mut r = rng::stream(14, 0);
    let (n, d) = (64, 10);
    let basis = gaussian(&mut r, 3 * d);
    let coef = gaussian(&mut r, n * 3);
    let tokens: Vec<f32> = (0..n)
        .flat_map(|i| (0..d).map(|k| (0..3).map(|j| coef[i * 3 + j] * basis[j * d + k] * (j + 1) as f32).sum::<f32>() + 0.3).collect::<Vec<_>>())
        .collect();
    let t = Tensor::new(vec![n, d], tokens.clone()).unwrap();
    let p = pca_rgb(&t, (8, 8)).unwrap();
    assert!(p.explained_top3() >= 1.0 - 1e-6, "{}", p.explained_top3());
    assert_eq!(p.image.shape(), &[8, 8, 3]);
    assert!(p.image.data().iter().all(|&v| (0.0..=1.0).contains(&v)));

    // Covariance built independently, decomposed by nalgebra.
    let x = DMatrix::from_fn(n, d, |i, k| tokens[i * d + k] as f64);
    let mean = x.row_mean();
    let c = DMatrix::from_fn(n, d, |i, k| x[(i, k)] - mean[k]);
    let cov = c.transpose() * &c / n as f64;
    let eig = SymmetricEigen::new(cov.clone());
    let mut expect: Vec<f64> = eig.eigenvalues.iter().copied().collect();
    expect.sort_by(|a, b| b.partial_cmp(a).unwrap());
    for (got, want) in p.eigenvalues.iter().zip(&expect) {
        assert!((got - want).abs() <= 1e-9 * expect[0], "{got} vs {want}");
    }
}

#[test]
fn pca_identical_tokens_give_a_flat_image() {
    let t = Tensor::from_fn(vec![16, 5], |i| (i % 5) as f32 * 0.1);
    let p = pca_rgb(&t, (4, 4)).unwrap();
    assert!(p.image.data().iter().all(|&v| v == 0.5));
    assert_eq!(p.explained, [0.0; 3]);
    // Rank one: two padded channels stay flat.
    let t = Tensor::from_fn(vec![16, 5], |i| (i / 5) as f32 * ((i % 5) as f32 - 2.0));
    let p = pca_rgb(&t, (4, 4)).unwrap();
    let ch = |c: usize| -> Vec<f32> { p.image.data().iter().skip(c).step_by(3).copied().collect() };
    assert!(ch(1).iter().all(|&v| v == 0.5) && ch(2).iter().all(|&v| v == 0.5));
    assert_eq!(ch(0).iter().cloned().fold(f32::MAX, f32::min), 0.0);
    assert!(pca_rgb(&Tensor::zeros(vec![2, 5]), (1, 2)).is_err());
    assert!(pca_rgb(&Tensor::zeros(vec![4, 2]), (2, 2)).is_err());
}

#[test]
fn pca_rotation_invariance_up_to_inversion() {
    let mut r = rng::stream(15, 0);
    let (n, d) = (36, 6);
    let scales = [5.0f32, 3.0, 2.0, 0.5, 0.2, 0.1];
    let t: Vec<f32> = (0..n * d).map(|i| gaussian(&mut r, 1)[0] * scales[i % d]).collect();
    let q = nalgebra::linalg::QR::new(DMatrix::from_fn(d, d, |_, _| gaussian(&mut r, 1)[0] as f64)).q();
    let rotated: Vec<f32> = (0..n)
        .flat_map(|i| (0..d).map(|k| (0..d).map(|j| t[i * d + j] as f64 * q[(j, k)]).sum::<f64>() as f32).collect::<Vec<_>>())
        .collect();
    let a = pca_rgb(&Tensor::new(vec![n, d], t).unwrap(), (6, 6)).unwrap();
    let b = pca_rgb(&Tensor::new(vec![n, d], rotated).unwrap(), (6, 6)).unwrap();
    for c in 0..3 {
        let ca: Vec<f32> = a.image.data().iter().skip(c).step_by(3).copied().collect();
        let cb: Vec<f32> = b.image.data().iter().skip(c).step_by(3).copied().collect();
        let same = ca.iter().zip(&cb).all(|(x, y)| (x - y).abs() <= 1e-4);
        let inverted = ca.iter().zip(&cb).all(|(x, y)| (x - (1.0 - y)).abs() <= 1e-4);
        assert!(same || inverted, "channel {c}");
    }
}

#[test]
fn ppm_layout() {
    let img = Tensor::new(vec![1, 2, 3], vec![0.0, 0.5, 1.0, 2.0, -1.0, 0.2]).unwrap();
    let bytes = encode_ppm(&img).unwrap();
    let header = b"P6\n2 1\n255\n";
    assert_eq!(&bytes[..header.len()], header);
    assert_eq!(&bytes[header.len()..], &[0, 128, 255, 255, 0, 51]);
    assert!(encode_ppm(&Tensor::zeros(vec![2, 2])).is_err());
}

// ---------- runner and report ----------

#[test]
fn patch_label_majority() {
    let spec = SyntheticSpec { num_classes: 3, images_per_class: 1, image_size: 16, seed: 4, ..Default::default() };
    let s = &generate_corpus(&spec).unwrap()[2];
    let labels = patch_labels(s, (2, 2), 3);
    for cell in 0..4 {
        let (r0, c0) = (cell / 2 * 8, cell % 2 * 8);
        let mut counts = [0; 3];
        for y in r0..r0 + 8 {
            for x in c0..c0 + 8 {
                counts[s.dense_label[y * 16 + x] as usize] += 1;
            }
        }
        let best = (0..3).rev().max_by_key(|&k| counts[k]).unwrap();
        assert_eq!(labels[cell], best);
    }
    let depth = patch_depths(s, (1, 1));
    let mean = s.depth_map.data().iter().map(|&v| v as f64).sum::<f64>() / 256.0;
    assert!((depth[0] as f64 - mean).abs() < 1e-6);
}

#[test]
fn protocol_names() {
    for p in Protocol::ALL {
        assert_eq!(p.name().parse::<Protocol>().unwrap(), p);
    }
    let err = "segmentation".parse::<Protocol>().unwrap_err().to_string();
    assert!(err.contains("knn, zeroshot, probe, pck, pca"), "{err}");
}

#[test]
fn all_protocols_run_frozen_and_deterministic() {
    let spec = SyntheticSpec { num_classes: 4, images_per_class: 10, image_size: 32, seed: 6, ..Default::default() };
    let corpus = Corpus { num_classes: 4, samples: generate_corpus(&spec).unwrap() };
    let student = encoder();
    let teacher = EncoderParams::init(
        &ViTConfig { image_size: 32, patch_size: 8, dim: 24, depth: 1, heads: 2, num_registers: 0, mlp_ratio: 2.0 },
        8,
    )
    .unwrap();
    let imgs: Vec<Tensor> = corpus.samples.iter().map(|s| distillkit::data::normalize_input(&s.image).unwrap()).collect();
    let head = HeadRecord {
        name: "t".into(),
        gamma: 1.0,
        class_head: AdapterHead::init(16, 64, 24, 0, 100),
        patch_head: AdapterHead::init(16, 64, 24, 0, 101),
        stats: Some(calibrate_stats(&teacher, &imgs).unwrap()),
    };
    let (s0, t0) = (student.clone(), teacher.clone());
    let settings = EvalSettings {
        seg_probe: ProbeConfig { steps: 50, ..Default::default() },
        depth_probe: ProbeConfig { steps: 50, ..Default::default() },
        ..Default::default()
    };
    let zs = Some(ZeroShotTeacher { teacher: &teacher, head: &head });
    let a = run_protocols(&student, &corpus, &Protocol::ALL, &settings, zs, 1, "abc").unwrap();
    let b = run_protocols(&student, &corpus, &Protocol::ALL, &settings, zs, 1, "abc").unwrap();
    assert_eq!(a.to_csv(), b.to_csv());
    assert_eq!(student, s0);
    assert_eq!(teacher, t0);
    for (p, m) in [
        ("knn", "top1_accuracy"),
        ("zeroshot", "top1_accuracy"),
        ("probe", "seg_miou"),
        ("probe", "depth_rmse"),
        ("pck", "pck@0.1"),
        ("pca", "top3_explained"),
    ] {
        let v = a.get(p, m).unwrap_or_else(|| panic!("missing {p}/{m}"));
        assert!(v.is_finite() && v >= 0.0);
    }
    let csv = a.to_csv();
    assert!(csv.starts_with(REPORT_HEADER));
    assert!(csv.lines().nth(1).unwrap().starts_with("knn,top1_accuracy,"));
    assert!(csv.lines().nth(1).unwrap().ends_with(",1,abc"));
    assert!(a.summary().contains("knn/top1_accuracy"));

    let missing = run_protocols(&student, &corpus, &[Protocol::ZeroShot], &settings, None, 1, "abc");
    assert!(matches!(missing, Err(Error::State(_))));
}
