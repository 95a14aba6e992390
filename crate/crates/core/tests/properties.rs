use crossview_core::aae::{clip_discriminator, wgan_losses};
use crossview_core::channelsplit::{
    apply_split, overlap_split, parity_split, random_split, sequential_split, ChannelSplit,
    SplitStrategy,
};
use crossview_core::contrast::{
    conditional_loss, ema_update, joint_probability, mutual_info_loss, JointDistribution,
};
use crossview_core::datacube::{
    apply_pca, extract_patches, fit_pca, stratified_split, train_count, GroundTruth, HyperCube,
};
use crossview_core::evaluate::{classify, compute_metrics, train_svm, SvmConfig};
use crossview_core::nn::{Layer, Linear, Module, Sequential};
use crossview_core::rng;
use crossview_core::tensor::Tensor;
use crossview_core::vae::{kl_loss, reparameterize};
use proptest::prelude::*;
use rand::Rng;

fn cube_strategy() -> impl Strategy<Value = HyperCube> {
    (2usize..6, 2usize..6, 2usize..7).prop_flat_map(|(h, w, c)| {
        prop::collection::vec(-5.0f64..5.0, h * w * c)
            .prop_map(move |data| HyperCube::new(h, w, c, data).unwrap())
    })
}

fn matrix(n: usize, d: usize) -> impl Strategy<Value = Tensor> {
    prop::collection::vec(-4.0f64..4.0, n * d).prop_map(move |v| Tensor::new(vec![n, d], v).unwrap())
}

fn entropy(p: &[f64]) -> f64 {
    -p.iter().filter(|v| **v > 0.0).map(|v| v * v.ln()).sum::<f64>()
}

/// Mutual information of a joint table, straight from the definition.
fn textbook_mi(joint: &[Vec<f64>]) -> f64 {
    let d = joint.len();
    let row: Vec<f64> = joint.iter().map(|r| r.iter().sum()).collect();
    let col: Vec<f64> = (0..d).map(|j| joint.iter().map(|r| r[j]).sum()).collect();
    let mut mi = 0.0;
    for i in 0..d {
        for j in 0..d {
            let p = joint[i][j];
            if p > 0.0 {
                mi += p * (p / (row[i] * col[j])).ln();
            }
        }
    }
    mi
}

fn reconstruction_error(cube: &HyperCube, k: usize) -> f64 {
    let model = fit_pca(cube, k).unwrap();
    let back = model.reconstruct(&apply_pca(cube, &model).unwrap()).unwrap();
    cube.data
        .iter()
        .zip(&back.data)
        .map(|(a, b)| (a - b) * (a - b))
        .sum()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn pca_components_are_orthonormal(cube in cube_strategy()) {
        let model = fit_pca(&cube, cube.channels).unwrap();
        for (i, a) in model.components.iter().enumerate() {
            for (j, b) in model.components.iter().enumerate() {
                let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
                let expected = if i == j { 1.0 } else { 0.0 };
                prop_assert!((dot - expected).abs() < 1e-8);
            }
        }
        for w in model.explained_variance.windows(2) {
            prop_assert!(w[0] >= w[1]);
        }
        prop_assert!(model.explained_variance.iter().all(|v| *v >= 0.0));
    }

    #[test]
    fn pca_reconstruction_error_shrinks_with_k(cube in cube_strategy()) {
        let errors: Vec<f64> = (1..=cube.channels).map(|k| reconstruction_error(&cube, k)).collect();
        for w in errors.windows(2) {
            prop_assert!(w[1] <= w[0] + 1e-9);
        }
        prop_assert!(errors[cube.channels - 1] < 1e-12 * cube.data.len() as f64 + 1e-12);
    }

    #[test]
    fn patch_centres_are_source_pixels(cube in cube_strategy(), half in 0usize..3) {
        let s = 2 * half + 1;
        prop_assume!(s <= 2 * cube.height.min(cube.width));
        let labels = vec![1u16; cube.height * cube.width];
        let gt = GroundTruth::new(cube.height, cube.width, 1, labels, vec!["x".into()]).unwrap();
        let set = extract_patches(&cube, &gt, s).unwrap();
        prop_assert_eq!(set.len(), cube.pixels());
        let k = cube.channels;
        for i in 0..set.len() {
            let (r, c) = set.coords[i];
            let p = set.patch(i);
            let centre = (half * s + half) * k;
            prop_assert_eq!(&p[centre..centre + k], cube.pixel(r, c));
        }
    }

    #[test]
    fn stratified_split_partitions(
        labels in prop::collection::vec(1usize..5, 1..120),
        fraction in 0.01f64..=1.0,
        seed in any::<u64>(),
    ) {
        let split = stratified_split(&labels, fraction, seed).unwrap();
        let mut all: Vec<usize> = split.train_indices.iter().chain(&split.test_indices).copied().collect();
        all.sort_unstable();
        prop_assert_eq!(all, (0..labels.len()).collect::<Vec<_>>());
        for class in 1..5 {
            let n = labels.iter().filter(|&&l| l == class).count();
            if n == 0 {
                continue;
            }
            let taken = split.train_indices.iter().filter(|&&i| labels[i] == class).count();
            prop_assert_eq!(taken, train_count(fraction, n));
            prop_assert_eq!(taken, ((fraction * n as f64 + 1e-9).floor() as usize).max(1));
        }
        prop_assert_eq!(&split, &stratified_split(&labels, fraction, seed).unwrap());
    }

    #[test]
    fn splits_cover_every_channel(c in 3usize..=64, seed in any::<u64>()) {
        for strategy in [SplitStrategy::Parity, SplitStrategy::Sequential, SplitStrategy::Random, SplitStrategy::Overlap] {
            if c < strategy.min_channels() {
                continue;
            }
            let split = ChannelSplit::build(strategy, c, seed).unwrap();
            let mut union: Vec<usize> = split.indices1.iter().chain(&split.indices2).copied().collect();
            union.sort_unstable();
            union.dedup();
            prop_assert_eq!(union, (0..c).collect::<Vec<_>>());
            for list in [&split.indices1, &split.indices2] {
                prop_assert!(list.windows(2).all(|w| w[0] < w[1]));
            }
            let shared: Vec<usize> = split.indices1.iter().filter(|i| split.indices2.contains(i)).copied().collect();
            prop_assert_eq!(&shared, &split.overlap());
            if matches!(strategy, SplitStrategy::Parity | SplitStrategy::Sequential) {
                prop_assert!(shared.is_empty());
            }
        }
    }

    #[test]
    fn disjoint_views_reassemble_the_patch(c in 2usize..20, s in 1usize..4, seed in any::<u64>()) {
        let mut r = rng::seeded(seed);
        let patch: Vec<f64> = (0..s * s * c).map(|_| r.gen()).collect();
        for split in [parity_split(c).unwrap(), sequential_split(c).unwrap()] {
            let (x1, x2) = apply_split(&patch, s, &split).unwrap();
            let (n1, n2) = (split.indices1.len(), split.indices2.len());
            let mut rebuilt = vec![f64::NAN; patch.len()];
            for px in 0..s * s {
                for (j, &ch) in split.indices1.iter().enumerate() {
                    rebuilt[px * c + ch] = x1[px * n1 + j];
                }
                for (j, &ch) in split.indices2.iter().enumerate() {
                    rebuilt[px * c + ch] = x2[px * n2 + j];
                }
            }
            prop_assert_eq!(&rebuilt, &patch);
        }
    }

    #[test]
    fn joint_probability_is_a_symmetric_distribution(
        (z1, z2) in (1usize..12, 2usize..9).prop_flat_map(|(n, d)| (matrix(n, d), matrix(n, d))),
        perm_seed in any::<u64>(),
    ) {
        let joint = joint_probability(&z1, &z2).unwrap();
        let d = joint.dim;
        prop_assert!((joint.p.iter().sum::<f64>() - 1.0).abs() < 1e-6);
        for i in 0..d {
            for j in 0..d {
                prop_assert!((joint.get(i, j) - joint.get(j, i)).abs() < 1e-6);
            }
        }
        let mut perm: Vec<usize> = (0..d).collect();
        use rand::seq::SliceRandom;
        perm.shuffle(&mut rng::seeded(perm_seed));
        let permute = |z: &Tensor| {
            let rows: Vec<Vec<f64>> = z.rows().map(|r| perm.iter().map(|&p| r[p]).collect()).collect();
            Tensor::from_rows(&rows).unwrap()
        };
        let moved = joint_probability(&permute(&z1), &permute(&z2)).unwrap();
        for i in 0..d {
            for j in 0..d {
                prop_assert!((moved.get(i, j) - joint.get(perm[i], perm[j])).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn mutual_info_matches_definition_and_decomposes(
        (z1, z2) in (1usize..12, 2usize..9).prop_flat_map(|(n, d)| (matrix(n, d), matrix(n, d))),
        alpha in 0.0f64..12.0,
    ) {
        let joint = joint_probability(&z1, &z2).unwrap();
        let table: Vec<Vec<f64>> = joint.p.chunks(joint.dim).map(<[f64]>::to_vec).collect();
        let base = mutual_info_loss(&joint, 0.0);
        prop_assert!((base + textbook_mi(&table)).abs() < 1e-9);
        let h = entropy(&joint.row_marginal) + entropy(&joint.col_marginal);
        prop_assert!((mutual_info_loss(&joint, alpha) - (base - alpha * h)).abs() < 1e-9);
    }

    #[test]
    fn conditional_loss_ignores_scale(
        (q1, t1, q2, t2) in (1usize..6, 2usize..6).prop_flat_map(|(n, d)| (matrix(n, d), matrix(n, d), matrix(n, d), matrix(n, d))),
        scale in 0.01f64..100.0,
    ) {
        let nonzero = |t: &Tensor| t.rows().all(|r| r.iter().any(|v| *v != 0.0));
        prop_assume!(nonzero(&q1) && nonzero(&t1) && nonzero(&q2) && nonzero(&t2));
        let base = conditional_loss(&q1, &t1, &q2, &t2).unwrap();
        prop_assert!((-2.0 - 1e-12..=6.0 + 1e-12).contains(&base));
        let mut scaled = q1.clone();
        scaled.data_mut().iter_mut().for_each(|v| *v *= scale);
        let moved = conditional_loss(&scaled, &t1, &q2, &t2).unwrap();
        prop_assert!((moved - base).abs() < 1e-12);
        for i in 0..q1.batch() {
            let pick = |t: &Tensor| t.select_rows(&[i]);
            let row = conditional_loss(&pick(&q1), &pick(&t1), &pick(&q2), &pick(&t2)).unwrap();
            prop_assert!((-2.0 - 1e-12..=6.0 + 1e-12).contains(&row));
        }
    }

    #[test]
    fn ema_contracts_geometrically(
        target in prop::collection::vec(-3.0f64..3.0, 1..12),
        shift in prop::collection::vec(-3.0f64..3.0, 12),
        tau in 0.0f64..=1.0,
        steps in 0usize..50,
    ) {
        let mut online = Linear::zeroed(1, target.len());
        online.weight.value = target.iter().zip(&shift).map(|(a, b)| a + b).collect();
        let mut ema = Linear::zeroed(1, target.len());
        ema.weight.value = target.clone();
        let theta = online.weight.value.clone();
        let start: f64 = target.iter().zip(&theta).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
        for _ in 0..steps {
            ema_update(&mut ema, &online, tau).unwrap();
        }
        let now: f64 = ema.weight.value.iter().zip(&theta).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
        let expected = tau.powi(steps as i32) * start;
        prop_assert!((now - expected).abs() <= 1e-12 * start.max(1.0) * (steps as f64 + 1.0));
    }

    #[test]
    fn kl_is_nonnegative(
        mu in prop::collection::vec(-3.0f64..3.0, 1..10),
        logvar in prop::collection::vec(-4.0f64..4.0, 10),
    ) {
        let d = mu.len();
        let sigma: Vec<f64> = logvar[..d].iter().map(|v| (0.5 * v).exp()).collect();
        let kl = kl_loss(
            &Tensor::new(vec![1, d], mu.clone()).unwrap(),
            &Tensor::new(vec![1, d], sigma).unwrap(),
        ).unwrap();
        prop_assert!(kl >= 0.0);
    }

    #[test]
    fn reparameterization_is_linear_in_mean_and_scale(
        mu in prop::collection::vec(-3.0f64..3.0, 6),
        sigma in prop::collection::vec(0.01f64..3.0, 6),
        noise in prop::collection::vec(-3.0f64..3.0, 6),
        a in -2.0f64..2.0,
    ) {
        let z = reparameterize(&mu, &sigma, &noise).unwrap();
        let mu2: Vec<f64> = mu.iter().map(|v| a * v).collect();
        let sigma2: Vec<f64> = sigma.iter().map(|v| a * v).collect();
        let z2 = reparameterize(&mu2, &sigma2, &noise).unwrap();
        for (x, y) in z.iter().zip(&z2) {
            prop_assert!((a * x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn generator_objective_cancels_fake_mean(
        real in prop::collection::vec(-5.0f64..5.0, 1..20),
        fake in prop::collection::vec(-5.0f64..5.0, 1..20),
    ) {
        let stats = wgan_losses(&real, &fake).unwrap();
        prop_assert_eq!(stats.g_loss + stats.d_fake_mean, 0.0);
        prop_assert!((stats.d_loss - (stats.d_fake_mean - stats.d_real_mean)).abs() < 1e-12);
    }

    #[test]
    fn clipping_bounds_every_critic_weight(seed in any::<u64>(), bound in 0.001f64..0.5) {
        let mut r = rng::seeded(seed);
        let mut critic = Sequential::new(vec![
            Layer::Linear(Linear::new(4, 3, &mut r)),
            Layer::LeakyRelu(0.2),
            Layer::Linear(Linear::new(3, 1, &mut r)),
        ]);
        for p in critic.params_mut() {
            p.value.iter_mut().for_each(|v| *v *= 10.0);
        }
        clip_discriminator(&mut critic, bound).unwrap();
        prop_assert!(critic.flat_values().iter().all(|v| v.abs() <= bound));
    }

    #[test]
    fn balanced_classes_give_equal_oa_and_aa(
        k in 2usize..6,
        per in 1usize..20,
        seed in any::<u64>(),
    ) {
        let mut r = rng::seeded(seed);
        let actual: Vec<usize> = (1..=k).flat_map(|c| std::iter::repeat(c).take(per)).collect();
        let predicted: Vec<usize> = actual.iter().map(|_| r.gen_range(1..=k)).collect();
        let m = compute_metrics(&predicted, &actual, k).unwrap();
        prop_assert!((m.oa - m.aa).abs() < 1e-9);
        prop_assert!((0.0..=100.0).contains(&m.oa));
    }

    #[test]
    fn metrics_ignore_order_and_duplication(
        pairs in prop::collection::vec((1usize..5, 1usize..5), 1..60),
        dup_class in 1usize..5,
        seed in any::<u64>(),
    ) {
        let (pred, act): (Vec<usize>, Vec<usize>) = pairs.iter().copied().unzip();
        let m = compute_metrics(&pred, &act, 4).unwrap();
        let mut shuffled = pairs.clone();
        use rand::seq::SliceRandom;
        shuffled.shuffle(&mut rng::seeded(seed));
        let (p2, a2): (Vec<usize>, Vec<usize>) = shuffled.into_iter().unzip();
        prop_assert_eq!(&compute_metrics(&p2, &a2, 4).unwrap(), &m);
        let mut doubled = pairs.clone();
        doubled.extend(pairs.iter().filter(|(_, a)| *a == dup_class).copied());
        let (p3, a3): (Vec<usize>, Vec<usize>) = doubled.into_iter().unzip();
        let m3 = compute_metrics(&p3, &a3, 4).unwrap();
        prop_assert!((m3.aa - m.aa).abs() < 1e-9);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn svm_predictions_survive_feature_rescaling(
        seed in any::<u64>(),
        scales in prop::collection::vec(0.01f64..100.0, 3),
    ) {
        let mut r = rng::seeded(seed);
        let n = 60;
        let labels: Vec<usize> = (0..n).map(|i| i % 3 + 1).collect();
        let rows: Vec<Vec<f64>> = labels
            .iter()
            .map(|&l| (0..3).map(|d| if d + 1 == l { 1.5 } else { 0.0 } + r.gen_range(-1.0..1.0)).collect())
            .collect();
        let x = Tensor::from_rows(&rows).unwrap();
        let scaled_rows: Vec<Vec<f64>> = rows
            .iter()
            .map(|row| row.iter().zip(&scales).map(|(v, s)| v * s).collect())
            .collect();
        let xs = Tensor::from_rows(&scaled_rows).unwrap();
        let split = stratified_split(&labels, 0.5, seed).unwrap();
        let cfg = SvmConfig { epochs: 20, seed, ..SvmConfig::default() };
        let a = classify(&train_svm(&x, &labels, &split, &cfg).unwrap(), &x).unwrap();
        let b = classify(&train_svm(&xs, &labels, &split, &cfg).unwrap(), &xs).unwrap();
        prop_assert_eq!(a, b);
    }
}

#[test]
fn pca_variance_matches_projection_spread() {
    let mut r = rng::seeded(3);
    let (h, w, c) = (12, 10, 5);
    let data: Vec<f64> = (0..h * w)
        .flat_map(|_| {
            let base: f64 = r.gen_range(-1.0..1.0);
            (0..c).map(|ch| base * (ch as f64 + 1.0) + 0.3 * r.gen_range(-1.0..1.0)).collect::<Vec<_>>()
        })
        .collect();
    let cube = HyperCube::new(h, w, c, data).unwrap();
    let model = fit_pca(&cube, 3).unwrap();
    let reduced = apply_pca(&cube, &model).unwrap();
    for (i, ev) in model.explained_variance.iter().enumerate() {
        let vals: Vec<f64> = reduced.data.chunks(3).map(|p| p[i]).collect();
        let mean = vals.iter().sum::<f64>() / vals.len() as f64;
        let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / vals.len() as f64;
        assert!((var - ev).abs() <= 1e-6 * ev.max(1e-12), "component {i}: {var} vs {ev}");
    }
}

#[test]
fn random_split_frequencies_are_uniform() {
    let c = 30;
    let mut hits = vec![0usize; c];
    let trials = 1000;
    for seed in 0..trials {
        let split = random_split(c, seed).unwrap();
        for &i in split.indices1.iter().filter(|&&i| i >= c / 2) {
            hits[i] += 1;
        }
    }
    let expected = (c / 6) as f64 / (c - c / 2) as f64;
    for (ch, &h) in hits.iter().enumerate().skip(c / 2) {
        let freq = h as f64 / trials as f64;
        assert!((freq - expected).abs() <= 0.05, "channel {ch}: {freq}");
    }
}

#[test]
fn random_split_replays_its_stream() {
    // Independent replay: draw floor(C/6) positions from a shrinking pool by
    // swapping the pick with the last element.
    let (c, seed) = (30usize, 7u64);
    let mut r = rng::seeded(seed);
    let mut pool: Vec<usize> = (c / 2..c).collect();
    let mut picked = Vec::new();
    for _ in 0..c / 6 {
        let j = r.gen_range(0..pool.len());
        picked.push(pool[j]);
        let last = pool.len() - 1;
        pool.swap(j, last);
        pool.pop();
    }
    let mut expected: Vec<usize> = (0..c / 2).chain(picked).collect();
    expected.sort_unstable();
    let split = random_split(c, seed).unwrap();
    assert_eq!(split.indices1, expected);
    assert_eq!(split.indices1.len(), 20);
    assert_eq!(split.indices2, (10..30).collect::<Vec<_>>());
}

#[test]
fn overlap_views_share_the_middle_third() {
    let mut r = rng::seeded(5);
    let (s, c) = (3, 30);
    let patch: Vec<f64> = (0..s * s * c).map(|_| r.gen()).collect();
    let split = overlap_split(c).unwrap();
    let (x1, x2) = apply_split(&patch, s, &split).unwrap();
    let (n1, n2) = (split.indices1.len(), split.indices2.len());
    assert_eq!((n1, n2), (20, 20));
    for px in 0..s * s {
        assert_eq!(x1[px * n1 + 10..px * n1 + 20], x2[px * n2..px * n2 + 10]);
    }
}

#[test]
fn mutual_info_closed_forms() {
    let diag = JointDistribution::from_matrix(2, vec![0.5, 0.0, 0.0, 0.5]).unwrap();
    let uniform = JointDistribution::from_matrix(2, vec![0.25; 4]).unwrap();
    let ln2 = std::f64::consts::LN_2;
    assert!((mutual_info_loss(&diag, 0.0) + ln2).abs() < 1e-9);
    assert!(mutual_info_loss(&uniform, 0.0).abs() < 1e-9);
    assert!((mutual_info_loss(&diag, 9.0) + 19.0 * ln2).abs() < 1e-9);
}
