use phinet::autodiff::Tape;
use phinet::encoder::EncoderConfig;
use phinet::eval::{compute_eer, compute_min_dcf, fidelity_score, ScoreSet};
use phinet::explain::rank_weights;
use phinet::inventory::PhonemeInventory;
use phinet::model::{Model, ModelConfig, ParamVars};
use phinet::scoring::{normalize_weights, NormFn, WeightParams};
use phinet::synth::{generate, SynthConfig};
use phinet::training::{batch_forward, sample_batch, SpeakerIndex};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn grid_scores() -> impl Strategy<Value = ScoreSet> {
    (
        prop::collection::vec(0i32..64, 1..80),
        prop::collection::vec(0i32..64, 1..80),
    )
        .prop_map(|(t, n)| {
            ScoreSet::new(
                t.into_iter().map(|v| f64::from(v) / 64.0).collect(),
                n.into_iter().map(|v| f64::from(v) / 64.0).collect(),
            )
        })
}

proptest! {
    #[test]
    fn eer_ignores_increasing_transforms(s in grid_scores()) {
        let base = compute_eer(&s).unwrap().eer;
        let map = |f: fn(f64) -> f64| ScoreSet::new(s.target.iter().map(|&x| f(x)).collect(), s.nontarget.iter().map(|&x| f(x)).collect());
        prop_assert_eq!(compute_eer(&map(|x| 4.0 * x - 3.0)).unwrap().eer, base);
        prop_assert_eq!(compute_eer(&map(|x| x * x * x)).unwrap().eer, base);
        prop_assert!((0.0..=1.0).contains(&base));
    }

    #[test]
    fn min_dcf_never_exceeds_trivial_decisions(s in grid_scores(), p in 0.01f64..0.99) {
        let m = compute_min_dcf(&s, p, 1.0, 1.0).unwrap();
        let norm = p.min(1.0 - p);
        prop_assert!(m <= (1.0 - p) / norm + 1e-12);
        prop_assert!(m <= p / norm + 1e-12);
        prop_assert!(m >= 0.0);
    }

    #[test]
    fn fidelity_is_symmetric_and_zero_iff_equal(
        base in 0.0f64..0.5,
        a in prop::collection::vec(0.0f64..1.0, 1..12),
        offsets in prop::collection::vec(-0.2f64..0.2, 12),
    ) {
        let spec: Vec<Option<f64>> = a.iter().map(|&v| Some(v)).collect();
        let tr: Vec<Option<f64>> = a.iter().zip(&offsets).map(|(&v, &o)| Some(v + o)).collect();
        let f = fidelity_score(base, &spec, &tr).unwrap();
        prop_assert_eq!(f, fidelity_score(base, &tr, &spec).unwrap());
        prop_assert_eq!(fidelity_score(base, &spec, &spec).unwrap(), 0.0);
        prop_assert_eq!(f == 0.0, offsets[..a.len()].iter().all(|&o| o == 0.0));
    }

    #[test]
    fn global_order_survives_positive_affine_rescaling(
        w_hat in prop::collection::vec(-4.0f64..4.0, 3..15),
        scale in 0.1f64..10.0,
        shift in -5.0f64..5.0,
    ) {
        let inv = PhonemeInventory::cmu(w_hat.len()).unwrap();
        let norm = |w: Vec<f64>| normalize_weights(&WeightParams { w_hat: w, norm: NormFn::MinMax, epsilon: 1e-8 });
        let a = rank_weights(&norm(w_hat.clone()), &inv).order();
        let b = rank_weights(&norm(w_hat.iter().map(|w| scale * w + shift).collect()), &inv).order();
        let mut sorted = w_hat.clone();
        sorted.sort_by(f64::total_cmp);
        let distinct = sorted.windows(2).all(|p| (p[1] - p[0]) > 1e-6 * (sorted[sorted.len() - 1] - sorted[0]));
        prop_assume!(distinct);
        prop_assert_eq!(a, b);
    }
}

#[test]
fn phoneme_weights_receive_gradient() {
    let synth = SynthConfig {
        n_speakers: 6,
        utts_per_speaker: 3,
        n_phonemes: 5,
        feature_dim: 4,
        sigma_between: vec![0.1, 0.4, 0.7, 1.0, 1.3],
        ..SynthConfig::default()
    };
    let (_, utts, _) = generate(&synth).unwrap();
    let cfg = ModelConfig {
        encoder: EncoderConfig {
            input_dim: 4,
            output_dim: 6,
            hidden: vec![],
            context: 1,
        },
        n_phonemes: 5,
        ..ModelConfig::default()
    };
    for seed in 0..10 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let model = Model::init(cfg.clone(), &mut rng).unwrap();
        let batch = sample_batch(&utts, &SpeakerIndex::new(&utts), 3, 40, &mut rng).unwrap();
        let tape = Tape::new();
        let vars = ParamVars::record(&tape, &model.params);
        let losses = batch_forward(&tape, &vars, &cfg, &batch, 0.001, 0.0015, 0.5).unwrap();
        let g = tape.backward(losses.l_all).unwrap().wrt(vars.w_hat);
        assert!(g.data().iter().any(|&v| v != 0.0), "seed {seed}");
    }
}
