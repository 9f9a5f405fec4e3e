use proptest::prelude::*;

use trc_core::attribution::{
    kernelshap, quantile, relative_positions, top_k_tokens, AttributionError, FnModel, SyntheticModel, TokenUnits,
};

fn bits(z: &[bool]) -> usize {
    z.iter().enumerate().filter(|(_, &b)| b).map(|(i, _)| 1 << i).sum()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    /// Swapping two features' roles swaps their attributions.
    #[test]
    fn symmetric_features_get_equal_phi(m in 3usize..9, seed in 0u64..1000, a in 0usize..9, b in 0usize..9) {
        let (a, b) = (a % m, b % m);
        prop_assume!(a != b);
        let w: Vec<f64> = (0..m).map(|i| ((i as u64 * 7 + seed) % 11) as f64 / 10.0).collect();
        let model = FnModel::new(m, |z: &[bool]| {
            let pair = z[a] as u8 as f64 + z[b] as u8 as f64;
            let rest: f64 = (0..m).filter(|&i| i != a && i != b && z[i]).map(|i| w[i]).sum();
            (pair * 0.8 + rest).sin() + pair * pair
        });
        let r = kernelshap::<f64, _>(&model, 1 << m, seed).unwrap();
        prop_assert!((r.phi[a] - r.phi[b]).abs() < 1e-9);
    }

    /// A feature the model ignores gets zero.
    #[test]
    fn dummy_feature_gets_zero(m in 2usize..9, seed in 0u64..1000, dummy in 0usize..9) {
        let dummy = dummy % m;
        let model = FnModel::new(m, |z: &[bool]| {
            let s: f64 = (0..m).filter(|&i| i != dummy && z[i]).map(|i| (i + 1) as f64).sum();
            (s / 3.0).exp() - (seed as f64 / 1000.0)
        });
        let r = kernelshap::<f64, _>(&model, 1 << m, seed).unwrap();
        prop_assert!(r.phi[dummy].abs() < 1e-9);
    }

    /// Linear models are recovered exactly from sampled coalitions.
    #[test]
    fn sampled_mode_is_exact_on_linear_models(m in 11usize..40, seed in 0u64..1000) {
        let model = SyntheticModel::uniform(m, seed);
        let SyntheticModel::Linear { weights } = &model else { unreachable!() };
        let r = kernelshap::<f64, _>(&model, 4 * m, seed).unwrap();
        prop_assert!(!r.exhaustive);
        for (p, w) in r.phi.iter().zip(weights) {
            prop_assert!((p - w).abs() < 1e-8);
        }
    }

    #[test]
    fn f32_tracks_f64(m in 2usize..8, seed in 0u64..1000) {
        let table: Vec<f64> = (0..1usize << m).map(|i| ((i as u64 * 2654435761 + seed) % 997) as f64 / 997.0).collect();
        let r64 = kernelshap::<f64, _>(&FnModel::new(m, |z: &[bool]| table[bits(z)]), 1 << m, seed).unwrap();
        let r32 = kernelshap::<f32, _>(&FnModel::new(m, |z: &[bool]| table[bits(z)] as f32), 1 << m, seed).unwrap();
        for (a, b) in r64.phi.iter().zip(&r32.phi) {
            prop_assert!((a - *b as f64).abs() < 1e-3);
        }
        prop_assert!(r32.additivity_gap() < 1e-4);
    }
}

#[test]
fn sampling_is_seeded() {
    let model = FnModel::new(20, |z: &[bool]| {
        let k = z.iter().filter(|&&b| b).count() as f64;
        (k / 4.0).tanh() * if z[3] { 2.0 } else { 1.0 }
    });
    let a = kernelshap::<f64, _>(&model, 300, 5).unwrap();
    let b = kernelshap::<f64, _>(&model, 300, 5).unwrap();
    let c = kernelshap::<f64, _>(&model, 300, 6).unwrap();
    assert_eq!(a, b);
    assert_ne!(a.phi, c.phi);
    assert!(a.additivity_gap() < 1e-9 && c.additivity_gap() < 1e-9);
}

#[test]
fn too_few_samples_is_an_error() {
    let model = SyntheticModel::uniform(20, 1);
    assert!(matches!(
        kernelshap::<f64, _>(&model, 10, 0),
        Err(AttributionError::InsufficientSamples { min: 40, .. })
    ));
}

#[test]
fn relative_positions_of_a_prompt() {
    let text = "a b c\n\nx y z w";
    let units = TokenUnits::from_text(text, 7);
    assert_eq!(units.target_offset, 3);
    assert_eq!(units.target_length(), 4);
    let d = relative_positions(&[6, 0, 3], units.target_offset, units.target_length());
    assert_eq!(d.positions, vec![1.0, 0.25]);
    assert_eq!(d.n_few_shot, 1);
    assert!((d.few_shot_fraction - 1.0 / 3.0).abs() < 1e-12);
}

#[test]
fn masking_replaces_dropped_tokens() {
    let units = TokenUnits::from_text("one two  three", 0);
    let (text, spans) = units.mask(&[true, false, true], "<mask>");
    assert_eq!(text, "one <mask>  three");
    assert_eq!(&text[spans[1].start..spans[1].end], "<mask>");
    let (text, _) = units.mask(&[false, true, false], "");
    assert_eq!(text, " two  ");
}

#[test]
fn ranking_and_quantiles() {
    assert_eq!(top_k_tokens(&[0.5, 0.5, 0.9, 0.1], 2), vec![2, 0]);
    assert_eq!(top_k_tokens::<f64>(&[0.3], 5), vec![0]);
    assert_eq!(quantile(&[0.0, 1.0, 2.0, 3.0], 0.5), Some(1.5));
    assert_eq!(quantile(&[], 0.5), None);
}
