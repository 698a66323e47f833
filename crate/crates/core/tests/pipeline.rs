use phinet::encoder::EncoderConfig;
use phinet::eval::{compute_eer, evaluate, leave_one_out, score_trials, AblationMode, ScoreSet};
use phinet::explain::{centroid_heatmap, explain_global, explain_trial};
use phinet::inventory::Utterance;
use phinet::model::{Model, ModelConfig};
use phinet::synth::{generate, linspace, make_trials, SynthConfig};
use phinet::training::checkpoint::{load_checkpoint, save_checkpoint};
use phinet::training::{train, TrainConfig};
use phinet::trials::TrialLabel;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn small_corpus(seed: u64, sigma_between: Vec<f64>) -> SynthConfig {
    SynthConfig {
        n_speakers: 12,
        utts_per_speaker: 8,
        n_phonemes: 6,
        feature_dim: 8,
        sigma_between,
        seed,
        ..SynthConfig::default()
    }
}

fn small_model(context: usize) -> ModelConfig {
    ModelConfig {
        encoder: EncoderConfig {
            input_dim: 8,
            output_dim: 12,
            hidden: vec![12],
            context,
        },
        n_phonemes: 6,
        ..ModelConfig::default()
    }
}

fn held_out(cfg: &SynthConfig) -> Vec<Utterance> {
    let held = SynthConfig {
        first_speaker: cfg.n_speakers,
        ..cfg.clone()
    };
    generate(&held).unwrap().1
}

#[test]
fn checkpoint_reload_scores_identically() {
    let cfg = small_corpus(3, linspace(0.0, 1.0, 6));
    let (_, utts, _) = generate(&cfg).unwrap();
    let tc = TrainConfig {
        steps: 40,
        k: 4,
        ..TrainConfig::default()
    };
    let out = train(&utts, &small_model(3), &tc).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.phim");
    save_checkpoint(&out.model, &tc, &path).unwrap();
    let (loaded, tc2) = load_checkpoint(&path).unwrap();
    assert_eq!(tc, tc2);
    for pair in utts.windows(2).take(20) {
        let a = out.model.score(&pair[0], &pair[1]).unwrap();
        let b = loaded.score(&pair[0], &pair[1]).unwrap();
        assert_eq!(a.y.to_bits(), b.y.to_bits());
    }
}

#[test]
fn self_trial_explanation_has_unit_cosines_and_reaggregates() {
    let cfg = small_corpus(5, linspace(0.0, 1.0, 6));
    let (inv, utts, _) = generate(&cfg).unwrap();
    let model = Model::init(small_model(1), &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
    let r = explain_trial(&model, &inv, &utts[0], &utts[0]).unwrap();
    assert!(!r.phonemes.is_empty());
    for row in &r.phonemes {
        assert_eq!(row.d, 1.0);
        assert_eq!(row.enroll_span, row.test_span);
    }
    assert_eq!(r.reaggregate(model.config.epsilon).unwrap(), r.y);
    let other = explain_trial(&model, &inv, &utts[0], &utts[9]).unwrap();
    assert_eq!(other.y, model.score(&utts[0], &utts[9]).unwrap().y);
    let shared = utts[0].alignment().phonemes().intersection(&utts[9].alignment().phonemes()).count();
    assert_eq!(other.phonemes.len(), shared);
}

#[test]
fn global_report_follows_weight_order() {
    let inv = phinet::inventory::PhonemeInventory::cmu(6).unwrap();
    let mut model = Model::init(small_model(1), &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
    model.params.weights.w_hat = vec![0.1, 0.2, 0.3, 0.4, 0.5, 0.6];
    assert_eq!(explain_global(&model, &inv).unwrap().order(), vec![5, 4, 3, 2, 1, 0]);
    model.params.weights.w_hat = [0.1, 0.2, 0.3, 0.4, 0.5, 0.6].iter().map(|w| 3.0 * w + 7.0).collect();
    assert_eq!(explain_global(&model, &inv).unwrap().order(), vec![5, 4, 3, 2, 1, 0]);
}

#[test]
fn distinctive_speaker_heatmap_is_diagonal_dominant() {
    let cfg = small_corpus(2, vec![1.5; 6]);
    let (inv, utts, _) = generate(&cfg).unwrap();
    let model = Model::init(small_model(1), &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
    let spk: Vec<Utterance> = utts.iter().filter(|u| u.speaker_id == "spk000").cloned().collect();
    let h = centroid_heatmap(&model, &inv, &spk).unwrap();
    assert!(h.diagonal_mean().unwrap() > h.off_diagonal_mean().unwrap());
    for v in h.values.iter().flatten().flatten() {
        assert!((0.0..=1.0 + 1e-12).contains(v));
    }
    assert!(centroid_heatmap(&model, &inv, &utts[..9]).is_err());
}

#[test]
fn indistinct_speakers_stay_at_chance() {
    let cfg = small_corpus(9, vec![0.0; 6]);
    let (_, utts, _) = generate(&cfg).unwrap();
    let test = held_out(&cfg);
    let tc = TrainConfig {
        steps: 200,
        k: 6,
        ..TrainConfig::default()
    };
    let model = train(&utts, &small_model(1), &tc).unwrap().model;
    let trials = make_trials(&test, 300, 300, 9).unwrap().resolve(&test).unwrap();
    let scored = score_trials(&model, &test, &trials).unwrap();
    let eer = compute_eer(&scored.scores).unwrap().eer;
    assert!((eer - 0.5).abs() <= 0.05, "EER {eer}");

    let mut all: Vec<(f64, bool)> = scored.scores.target.iter().map(|&s| (s, true)).collect();
    all.extend(scored.scores.nontarget.iter().map(|&s| (s, false)));
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut labels: Vec<bool> = all.iter().map(|p| p.1).collect();
    let mut below = 0;
    for _ in 0..200 {
        labels.shuffle(&mut rng);
        let mut s = ScoreSet::default();
        for ((v, _), &l) in all.iter().zip(&labels) {
            s.push(if l { TrialLabel::Target } else { TrialLabel::Nontarget }, *v);
        }
        if compute_eer(&s).unwrap().eer <= eer {
            below += 1;
        }
    }
    assert!(below >= 2, "observed EER {eer} beats {} of 200 permutations", 200 - below);
}

#[test]
fn zero_leakage_encoder_gives_matching_ablations() {
    let cfg = small_corpus(4, linspace(0.0, 1.2, 6));
    let (inv, utts, _) = generate(&cfg).unwrap();
    let trials = make_trials(&utts, 150, 150, 4).unwrap().resolve(&utts).unwrap();
    let model = Model::init(small_model(1), &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
    let spec = leave_one_out(&model, &utts, &trials, AblationMode::Spectrogram).unwrap();
    let tr = leave_one_out(&model, &utts, &trials, AblationMode::Trait).unwrap();
    assert_eq!(spec.rows, tr.rows);
    let report = evaluate(&model, &inv, &utts, &trials, 0.05).unwrap();
    assert_eq!(report.fidelity, Some(0.0));

    let wide = Model::init(small_model(3), &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
    let report = evaluate(&wide, &inv, &utts, &trials, 0.05).unwrap();
    assert!(report.fidelity.unwrap() > 0.0);
}

#[test]
fn absent_phoneme_ablation_is_a_no_op() {
    let cfg = SynthConfig {
        n_phonemes: 6,
        ..small_corpus(6, linspace(0.0, 1.0, 6))
    };
    let (inv, mut utts, _) = generate(&cfg).unwrap();
    let strip = |u: &Utterance| phinet::encoder::remove_phoneme_frames(u, 2).unwrap();
    utts = utts.iter().map(strip).collect();
    let trials = make_trials(&utts, 100, 100, 6).unwrap().resolve(&utts).unwrap();
    let model = Model::init(small_model(3), &mut ChaCha8Rng::seed_from_u64(6)).unwrap();
    let report = evaluate(&model, &inv, &utts, &trials, 0.05).unwrap();
    assert_eq!(report.ablation[2].eer_spec, Some(report.eer));
    assert_eq!(report.ablation[2].eer_trait, Some(report.eer));
    let csv = report.to_csv();
    assert_eq!(csv.lines().count(), 7);
    let json: serde_json::Value = serde_json::from_str(&report.to_json().unwrap()).unwrap();
    assert_eq!(json["ablation"].as_array().unwrap().len(), 6);
}
