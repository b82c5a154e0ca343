//! Algebraic properties of logit averaging and top-1 scoring.

use std::collections::BTreeMap;

use mmvt_core::eval::{self, EnsembleConfig, LogitsRecord};
use mmvt_core::gradcheck::randomized_model;
use mmvt_core::synthetic::{make_synthetic, SyntheticConfig};
use mmvt_core::trainer::argmax;
use mmvt_core::{parse_model_spec, EncoderDims, Modality, ModelConfig};
use proptest::prelude::*;

type Labels = BTreeMap<String, (usize, usize)>;

/// `models × clips` records with 3 verbs and 4 nouns, plus labels.
fn arb_run(models: usize) -> impl Strategy<Value = (Vec<LogitsRecord>, Labels)> {
    let clip = (
        prop::collection::vec(prop::collection::vec(-4.0f32..4.0, 7), models),
        0usize..3,
        0usize..4,
    );
    prop::collection::vec(clip, 1..12).prop_map(move |clips| {
        let mut records = Vec::new();
        let mut labels = BTreeMap::new();
        for (c, (per_model, v, n)) in clips.into_iter().enumerate() {
            let id = format!("clip{c:02}");
            labels.insert(id.clone(), (v, n));
            for (m, l) in per_model.into_iter().enumerate() {
                records.push(LogitsRecord {
                    model_id: m.to_string(),
                    clip_id: id.clone(),
                    verb_logits: l[..3].to_vec(),
                    noun_logits: l[3..].to_vec(),
                });
            }
        }
        (records, labels)
    })
}

fn preds(r: &eval::EvalReport) -> Vec<(usize, usize)> {
    r.predictions.iter().map(|p| (p.verb, p.noun)).collect()
}

proptest! {
    #[test]
    fn action_never_beats_either_head((records, labels) in arb_run(3)) {
        let r = eval::evaluate(&records, &EnsembleConfig::new(["0", "2"], ["1"]), &labels).unwrap();
        prop_assert!(r.top1_action <= r.top1_verb.min(r.top1_noun));
    }

    #[test]
    fn record_order_does_not_matter((records, labels) in arb_run(3)) {
        let cfg = EnsembleConfig::new(["0", "1", "2"], ["2", "0"]);
        let mut reversed = records.clone();
        reversed.reverse();
        prop_assert_eq!(eval::evaluate(&records, &cfg, &labels).unwrap(), eval::evaluate(&reversed, &cfg, &labels).unwrap());
    }

    #[test]
    fn positive_scaling_keeps_every_prediction((records, labels) in arb_run(2), k in prop::sample::select(vec![0.25f32, 0.5, 2.0, 4.0])) {
        let cfg = EnsembleConfig::new(["0", "1"], ["0", "1"]);
        let scaled: Vec<_> = records.iter().map(|r| LogitsRecord {
            verb_logits: r.verb_logits.iter().map(|x| x * k).collect(),
            noun_logits: r.noun_logits.iter().map(|x| x * k).collect(),
            ..r.clone()
        }).collect();
        prop_assert_eq!(eval::evaluate(&records, &cfg, &labels).unwrap(), eval::evaluate(&scaled, &cfg, &labels).unwrap());
    }

    #[test]
    fn a_zero_model_only_rescales((records, labels) in arb_run(2)) {
        let mut with_zero = records.clone();
        for clip in labels.keys() {
            with_zero.push(LogitsRecord { model_id: "zero".into(), clip_id: clip.clone(), verb_logits: vec![0.0; 3], noun_logits: vec![0.0; 4] });
        }
        let base = eval::evaluate(&records, &EnsembleConfig::new(["0", "1"], ["0", "1"]), &labels).unwrap();
        let more = eval::evaluate(&with_zero, &EnsembleConfig::new(["0", "1", "zero"], ["0", "1", "zero"]), &labels).unwrap();
        prop_assert_eq!(preds(&base), preds(&more));
    }

    #[test]
    fn copies_of_one_model_change_nothing((records, labels) in arb_run(1), k in 2usize..5) {
        let mut copies = Vec::new();
        for r in &records {
            for i in 0..k {
                copies.push(LogitsRecord { model_id: format!("copy{i}"), ..r.clone() });
            }
        }
        let ids: Vec<String> = (0..k).map(|i| format!("copy{i}")).collect();
        let single = eval::evaluate(&records, &EnsembleConfig::single("0"), &labels).unwrap();
        let many = eval::evaluate(&copies, &EnsembleConfig::new(ids.clone(), ids), &labels).unwrap();
        prop_assert_eq!(single, many);
    }
}

#[test]
fn missing_records_and_clips_are_errors() {
    let r = |m: &str, c: &str| LogitsRecord {
        model_id: m.into(),
        clip_id: c.into(),
        verb_logits: vec![0.0, 1.0],
        noun_logits: vec![1.0, 0.0],
    };
    let labels: Labels = BTreeMap::from([("a".into(), (1, 0)), ("b".into(), (1, 0))]);
    let cfg = EnsembleConfig::new(["x", "y"], ["x"]);
    assert!(eval::evaluate(&[r("x", "a"), r("y", "a"), r("x", "b")], &cfg, &labels).is_err());
    let all = [r("x", "a"), r("y", "a"), r("x", "b"), r("y", "b")];
    assert_eq!(eval::evaluate(&all, &cfg, &labels).unwrap().top1_action, 1.0);
}

#[test]
fn dumped_logits_round_trip_to_the_single_model_report() {
    let mut c = ModelConfig::new(parse_model_spec("Ti/2:R+Ti/4:F").unwrap(), 8, 32, 32);
    let d = EncoderDims {
        layers: 2,
        heads: 2,
        hidden: 8,
        mlp_dim: 16,
    };
    c.view_dims = Some(d);
    c.global_dims = Some(EncoderDims { layers: 1, ..d });
    c.n_verbs = 3;
    c.n_nouns = 4;
    let model = randomized_model(c, 9).unwrap().cast::<f32>();
    let mut clips = make_synthetic(&SyntheticConfig {
        n_clips: 7,
        n_verbs: 3,
        n_nouns: 4,
        frames: 12,
        height: 32,
        width: 32,
        modalities: vec![Modality::Rgb, Modality::Flow],
        seed: 2,
    })
    .unwrap();
    clips.reverse();
    let records = eval::dump_logits(&model, "solo", &clips).unwrap();
    assert_eq!(records.len(), clips.len());
    assert!(records.windows(2).all(|w| w[0].clip_id < w[1].clip_id));

    let mut bytes = Vec::new();
    eval::write_records(&mut bytes, &records).unwrap();
    let mut again = Vec::new();
    eval::write_records(&mut again, &eval::dump_logits(&model, "solo", &clips).unwrap()).unwrap();
    assert_eq!(bytes, again);
    let parsed = eval::read_records(bytes.as_slice()).unwrap();
    assert_eq!(parsed, records);

    let labels: Labels = clips.iter().map(|c| (c.clip_id.clone(), (c.verb, c.noun))).collect();
    let report = eval::evaluate(&parsed, &EnsembleConfig::single("solo"), &labels).unwrap();
    for p in &report.predictions {
        let clip = clips.iter().find(|c| c.clip_id == p.clip_id).unwrap();
        let (v, n) = eval::infer_clip(&model, clip).unwrap();
        assert_eq!((p.verb, p.noun), (argmax(&v), argmax(&n)));
    }
}
