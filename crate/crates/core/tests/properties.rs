mod common;

use proptest::prelude::*;

use mia_bench::attacks::{extract_shadow_features, loss_attack};
use mia_bench::data::{
    parse_score_text, save_logits_file, save_probs_file, split_indices, LogitsRecord, Membership, ProbsRecord,
};
use mia_bench::defenses::{
    dynanoise_transform, noise_variance, sensitivity_score, DynaNoiseConfig, ExclusionMap, SensitivityScore,
};
use mia_bench::metrics::{compute_midput, EvalReport};
use mia_bench::models::{LogRegParams, MlpParams};
use mia_bench::numerics::{cross_entropy_loss, softmax, LogitVector, ProbVector, SeededRng};

fn logits(max_k: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-30.0..30.0f64, 2..max_k)
}

proptest! {
    #[test]
    fn split_is_a_partition(n in 10usize..2000, tf in 0.2..0.9f64, trf in 0.2..0.8f64, seed: u64) {
        let plan = split_indices(n, tf, trf, seed).unwrap();
        prop_assert!(plan.check_partition(n).is_ok());
        prop_assert_eq!(plan.total(), n);
        let n_target = (n as f64 * tf).round() as usize;
        prop_assert_eq!(plan.shadow_pool.len(), n - n_target);
    }

    #[test]
    fn sensitivity_in_unit_interval(z in logits(40)) {
        let r = sensitivity_score(&LogitVector::new(z).unwrap()).unwrap().value();
        prop_assert!((0.0..=1.0).contains(&r));
    }

    #[test]
    fn variance_is_monotone_in_risk(a in 0.0..=1.0f64, b in 0.0..=1.0f64, s0 in 0.0..5.0f64, lambda in 0.0..10.0f64) {
        let cfg = DynaNoiseConfig { base_variance: s0, lambda_scale: lambda, temperature: 2.0 };
        let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
        let v_lo = noise_variance(SensitivityScore::new(lo).unwrap(), &cfg);
        let v_hi = noise_variance(SensitivityScore::new(hi).unwrap(), &cfg);
        prop_assert!(v_lo <= v_hi);
        prop_assert!(v_lo >= s0 && v_hi <= s0 * (1.0 + lambda) + 1e-12);
    }

    #[test]
    fn dynanoise_output_is_a_distribution(
        z in logits(30),
        s0 in 0.0..3.0f64,
        lambda in 0.0..8.0f64,
        t in 0.1..10.0f64,
        seed: u64,
    ) {
        let cfg = DynaNoiseConfig { base_variance: s0, lambda_scale: lambda, temperature: t };
        let z = LogitVector::new(z).unwrap();
        let p = dynanoise_transform(&z, &cfg, &mut SeededRng::new(seed, 0)).unwrap();
        prop_assert_eq!(p.len(), z.len());
        let q = dynanoise_transform(&z, &cfg, &mut SeededRng::new(seed, 0)).unwrap();
        prop_assert_eq!(p, q);
    }

    #[test]
    fn loss_attack_agrees_with_cross_entropy(z in logits(10), label_seed: usize, gamma in 0.01..3.0f64) {
        let p = softmax(&LogitVector::new(z).unwrap(), 1.0).unwrap();
        let y = label_seed % p.len();
        let loss = cross_entropy_loss(&p, y).unwrap();
        let verdict = loss_attack(&p, y, gamma).unwrap();
        prop_assert_eq!(verdict == Membership::Member, loss < gamma);
        let f = extract_shadow_features(&p, y).unwrap();
        prop_assert_eq!(f.ce_loss, loss);
        prop_assert!(f.margin >= 0.0 && f.margin <= f.max_confidence);
    }

    #[test]
    fn midput_bounded_when_defense_only_lowers(
        base in prop::array::uniform4(0.0..=1.0f64),
        shrink in prop::array::uniform4(0.0..=1.0f64),
    ) {
        // Defended values no larger than the baseline: every delta in [0, 1].
        let none = EvalReport::new("None", base[0], base[1], base[2], base[3]).unwrap();
        let d: Vec<f64> = base.iter().zip(shrink).map(|(b, s)| b * s).collect();
        let defended = EvalReport::new("X", d[0], d[1], d[2], d[3]).unwrap();
        let m = compute_midput(&none, &defended).unwrap();
        prop_assert!(m.within_bounds(), "{:?}", m);
        let same = compute_midput(&none, &EvalReport { defense: "X".into(), ..none.clone() }).unwrap();
        prop_assert_eq!(same.values(), [0.0; 4]);
    }

    #[test]
    fn exclusion_map_counts(n in 1usize..300, k in 2usize..8, l_seed: usize, seed: u64) {
        let l = 1 + l_seed % (k - 1);
        let map = ExclusionMap::generate(n, k, l, seed);
        let total: usize = (0..k).map(|m| map.training_indices(m).len()).sum();
        prop_assert_eq!(total, n * (k - l));
        for (i, ex) in map.excluded_by.iter().enumerate() {
            prop_assert_eq!(ex.len(), l);
            for &m in ex {
                prop_assert!(!map.training_indices(m).contains(&i));
            }
        }
    }

    #[test]
    fn score_files_round_trip(
        rows in prop::collection::vec(("[a-z0-9_]([a-z0-9_,\" -]{0,10}[a-z0-9_])?", any::<bool>(), prop::collection::vec(-1e6..1e6f64, 3)), 1..20),
    ) {
        let dir = tempfile::tempdir().unwrap();
        let records: Vec<LogitsRecord> = rows
            .iter()
            .enumerate()
            .map(|(i, (id, member, z))| LogitsRecord {
                sample_id: id.clone(),
                membership: if *member { Membership::Member } else { Membership::Nonmember },
                true_label: i % 3,
                logits: LogitVector::new(z.clone()).unwrap(),
            })
            .collect();
        let path = dir.path().join("z.csv");
        save_logits_file(&path, 3, &records).unwrap();
        let (k, back) = parse_score_text(&std::fs::read_to_string(&path).unwrap()).unwrap().into_logits().unwrap();
        prop_assert_eq!(k, 3);
        prop_assert_eq!(&back, &records);

        let probs: Vec<ProbsRecord> = records
            .iter()
            .map(|r| ProbsRecord {
                sample_id: r.sample_id.clone(),
                membership: r.membership,
                true_label: r.true_label,
                probs: softmax(&r.logits, 1.0).unwrap(),
            })
            .collect();
        save_probs_file(&path, 3, &["defense=None".into()], &probs).unwrap();
        let file = parse_score_text(&std::fs::read_to_string(&path).unwrap()).unwrap();
        prop_assert_eq!(&file.metadata, &vec!["defense=None".to_string()]);
        prop_assert_eq!(file.into_probs().unwrap().1, probs);
    }

    #[test]
    fn mlp_gradient_matches_finite_differences(
        flat in prop::collection::vec(-1.0..1.0f64, 3 * 2 + 3 + 4 * 3 + 4),
        x in prop::collection::vec(-2.0..2.0f64, 2),
        label in 0usize..4,
    ) {
        let mut p = MlpParams::zeros(2, 3, 4);
        p.set_flat(&flat);
        prop_assume!(common::relu_margin(&p, &x) > 1e-3);
        let target: Vec<f64> = (0..4).map(|c| if c == label { 1.0 } else { 0.0 }).collect();
        prop_assert!(common::mlp_gradient_error(&p, &x, &target) <= 1e-4);
    }

    #[test]
    fn logreg_gradient_matches_finite_differences(
        w in prop::collection::vec(-3.0..3.0f64, 3),
        b in -2.0..2.0f64,
        x in prop::collection::vec(-5.0..5.0f64, 3),
        label: bool,
    ) {
        let p = LogRegParams { weights: w, bias: b, feature_mean: vec![0.1, -0.2, 0.0], feature_std: vec![1.0, 2.0, 0.5] };
        prop_assert!(common::logreg_gradient_error(&p, &x, label) <= 1e-4);
    }

    #[test]
    fn prob_vectors_reject_bad_input(v in prop::collection::vec(-1.0..2.0f64, 1..10)) {
        let sum: f64 = v.iter().sum();
        let valid = v.len() >= 2 && v.iter().all(|x| (0.0..=1.0).contains(x)) && (sum - 1.0).abs() <= 1e-9;
        prop_assert_eq!(ProbVector::new(v).is_ok(), valid);
    }
}
