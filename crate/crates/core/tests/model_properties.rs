use ndarray::Array4;
use nfcsi::model::{closed_form_fc, count_parameters, Architecture, Autoencoder, Checkpoint, ModelConfig, Parametric};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_images(n: usize, h: usize, w: usize, seed: u64) -> Array4<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Array4::from_shape_fn((n, 2, h, w), |_| rng.random_range(0.0..1.0))
}

fn architecture() -> impl Strategy<Value = Architecture> {
    prop_oneof![Just(Architecture::ExtendNlNet), Just(Architecture::CsiNet)]
}

fn divisors(n: usize) -> Vec<usize> {
    (1..=n).filter(|d| n.is_multiple_of(*d)).collect()
}

#[test]
fn default_grid_difference_law() {
    for arch in [Architecture::ExtendNlNet, Architecture::CsiNet] {
        let totals: Vec<usize> = [16, 32, 64]
            .iter()
            .map(|&cr| count_parameters(&Autoencoder::<f32>::new(ModelConfig::new(arch, cr), 0).unwrap()).total)
            .collect();
        assert_eq!(totals[0] - totals[1], 262_208, "{arch}");
        assert_eq!(totals[1] - totals[2], 131_104, "{arch}");
    }
}

#[test]
fn audited_dense_layers_match_closed_form() {
    for arch in [Architecture::ExtendNlNet, Architecture::CsiNet] {
        for cr in [4, 16, 32, 64] {
            let config = ModelConfig::new(arch, cr);
            let audit = count_parameters(&Autoencoder::<f32>::new(config.clone(), 0).unwrap());
            let (l, k) = (2048, 2048 / cr);
            assert_eq!(audit.fc_params, 2 * l * k + k + l);
            assert_eq!(closed_form_fc(&config), audit.fc_params);
            assert_eq!(audit.layers.iter().map(|c| c.params).sum::<usize>(), audit.total);
        }
    }
}

#[test]
fn checkpoint_round_trip_reproduces_outputs_bit_for_bit() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.ck");
    let model = Autoencoder::<f32>::new(ModelConfig::extend_nlnet(32).with_spatial(8, 8), 3).unwrap();
    Checkpoint::from_model(&model, serde_json::json!({"note": "fixture"})).save(&path).unwrap();
    let restored: Autoencoder<f32> = Checkpoint::load(&path).unwrap().to_model().unwrap();
    let x = random_images(4, 8, 8, 1);
    let (a, b) = (model.reconstruct(&x).unwrap(), restored.reconstruct(&x).unwrap());
    assert!(a.iter().zip(b.iter()).all(|(p, q)| p.to_bits() == q.to_bits()));
}

#[test]
fn corrupted_checkpoints_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.ck");
    let model = Autoencoder::<f32>::new(ModelConfig::csinet(16).with_spatial(4, 4), 3).unwrap();
    Checkpoint::from_model(&model, serde_json::Value::Null).save(&path).unwrap();
    let mut bytes = std::fs::read(&path).unwrap();
    let mid = bytes.len() / 2;
    bytes[mid] ^= 0x01;
    std::fs::write(&path, &bytes).unwrap();
    assert!(Checkpoint::load(&path).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn difference_law_holds_for_any_pair_of_ratios(
        arch in architecture(),
        side in prop::sample::select(vec![4usize, 6, 8]),
        picks in (any::<prop::sample::Index>(), any::<prop::sample::Index>()),
    ) {
        let l = 2 * side * side;
        let ratios = divisors(l);
        let (a, b) = (*picks.0.get(&ratios), *picks.1.get(&ratios));
        let total = |cr: usize| {
            count_parameters(&Autoencoder::<f32>::new(ModelConfig::new(arch, cr).with_spatial(side, side), 0).unwrap()).total as i64
        };
        let (ka, kb) = ((l / a) as i64, (l / b) as i64);
        prop_assert_eq!(total(a) - total(b), (2 * l as i64 + 1) * (ka - kb));
    }

    #[test]
    fn reconstruction_preserves_shape(
        arch in architecture(),
        half_h in 1usize..5,
        half_w in 1usize..5,
        batch in 1usize..4,
        pick in any::<prop::sample::Index>(),
        seed in any::<u64>(),
    ) {
        let (h, w) = (2 * half_h, 2 * half_w);
        let cr = *pick.get(&divisors(2 * h * w));
        let model = Autoencoder::<f32>::new(ModelConfig::new(arch, cr).with_spatial(h, w), seed).unwrap();
        let x = random_images(batch, h, w, seed);
        let code = model.encode(&x).unwrap();
        prop_assert_eq!(code.dim(), (batch, 2 * h * w / cr));
        let y = model.decode(&code).unwrap();
        prop_assert_eq!(y.dim(), x.dim());
        prop_assert!(y.iter().all(|v| v.is_finite() && (0.0..=1.0).contains(v)));
    }

    #[test]
    fn single_and_double_precision_agree(arch in architecture(), seed in any::<u64>()) {
        let model = Autoencoder::<f32>::new(ModelConfig::new(arch, 8).with_spatial(8, 8), seed).unwrap();
        let wide: Autoencoder<f64> = model.cast();
        let x = random_images(2, 8, 8, seed ^ 1);
        let narrow = model.reconstruct(&x).unwrap();
        let precise = wide.reconstruct(&x.mapv(f64::from)).unwrap();
        prop_assert!(narrow.iter().zip(precise.iter()).all(|(a, b)| (*a as f64 - b).abs() < 1e-4));
    }

    #[test]
    fn initialization_depends_only_on_the_seed(seed in any::<u64>()) {
        let config = ModelConfig::extend_nlnet(16).with_spatial(4, 4);
        let a = Autoencoder::<f32>::new(config.clone(), seed).unwrap();
        let b = Autoencoder::<f32>::new(config, seed).unwrap();
        let mut values = Vec::new();
        a.visit("", &mut |_, p| values.extend(p.value.iter().map(|v| v.to_bits())));
        let mut other = Vec::new();
        b.visit("", &mut |_, p| other.extend(p.value.iter().map(|v| v.to_bits())));
        prop_assert_eq!(values, other);
    }
}
