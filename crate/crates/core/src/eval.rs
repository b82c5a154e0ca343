//! Four-crop inference, logit-averaging ensembles and top-1 metrics.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::io::{BufRead, Write};
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Deserializer, Serialize};

use crate::error::{invalid, CoreError, Result};
use crate::model::MMModel;
use crate::trainer::{argmax, eval_inputs, ClipData};
use crate::visual::four_crop_starts;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogitsRecord {
    pub model_id: String,
    pub clip_id: String,
    pub verb_logits: Vec<f32>,
    pub noun_logits: Vec<f32>,
}

/// Model ids may be written as strings or bare integers (`4` ≡ `"4"`).
fn ids<'de, D: Deserializer<'de>>(d: D) -> std::result::Result<BTreeSet<String>, D::Error> {
    #[derive(Deserialize)]
    #[serde(untagged)]
    enum Id {
        Num(u64),
        Str(String),
    }
    let raw = Vec::<Id>::deserialize(d)?;
    Ok(raw
        .into_iter()
        .map(|id| match id {
            Id::Num(n) => n.to_string(),
            Id::Str(s) => s,
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnsembleConfig {
    #[serde(deserialize_with = "ids")]
    pub verb_models: BTreeSet<String>,
    #[serde(deserialize_with = "ids")]
    pub noun_models: BTreeSet<String>,
}

impl EnsembleConfig {
    pub fn new<I: IntoIterator<Item = S>, S: Into<String>>(verb: I, noun: impl IntoIterator<Item = S>) -> Self {
        Self {
            verb_models: verb.into_iter().map(Into::into).collect(),
            noun_models: noun.into_iter().map(Into::into).collect(),
        }
    }

    /// One model for both tasks.
    pub fn single(id: &str) -> Self {
        Self::new([id], [id])
    }

    pub fn validate(&self) -> Result<()> {
        if self.verb_models.is_empty() || self.noun_models.is_empty() {
            return Err(invalid("ensemble needs at least one verb model and one noun model"));
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|_| CoreError::MissingFile(path.to_path_buf()))?;
        let cfg: Self = serde_json::from_str(&text)?;
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClipPrediction {
    pub clip_id: String,
    pub verb: usize,
    pub noun: usize,
    pub verb_label: usize,
    pub noun_label: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub top1_action: f64,
    pub top1_noun: f64,
    pub top1_verb: f64,
    pub predictions: Vec<ClipPrediction>,
}

/// Mean verb and noun logits over the four evenly spaced temporal crops.
pub fn infer_clip(model: &MMModel<f32>, clip: &ClipData) -> Result<(Vec<f32>, Vec<f32>)> {
    let c = &model.config;
    let n = clip.frames().max(c.frames);
    let mut verb = vec![0.0f64; c.n_verbs];
    let mut noun = vec![0.0f64; c.n_nouns];
    for start in four_crop_starts(n, c.frames) {
        let inputs = eval_inputs(clip, start, c.frames, c.height, c.width)?;
        let (v, no) = model.predict(&inputs)?;
        for (acc, x) in verb.iter_mut().zip(&v).chain(noun.iter_mut().zip(&no)) {
            *acc += f64::from(*x);
        }
    }
    let mean = |xs: Vec<f64>| xs.into_iter().map(|x| (x / 4.0) as f32).collect();
    Ok((mean(verb), mean(noun)))
}

/// Logits of every clip, sorted by clip id.
pub fn dump_logits(model: &MMModel<f32>, model_id: &str, clips: &[ClipData]) -> Result<Vec<LogitsRecord>> {
    let mut records = clips
        .par_iter()
        .map(|clip| {
            let (verb_logits, noun_logits) = infer_clip(model, clip)?;
            Ok(LogitsRecord {
                model_id: model_id.to_string(),
                clip_id: clip.clip_id.clone(),
                verb_logits,
                noun_logits,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    records.sort_by(|a, b| a.clip_id.cmp(&b.clip_id));
    Ok(records)
}

pub fn write_records(out: &mut impl Write, records: &[LogitsRecord]) -> Result<()> {
    for r in records {
        serde_json::to_writer(&mut *out, r)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

pub fn read_records(input: impl BufRead) -> Result<Vec<LogitsRecord>> {
    let mut out = Vec::new();
    for line in input.lines() {
        let line = line?;
        if !line.trim().is_empty() {
            out.push(serde_json::from_str(&line)?);
        }
    }
    Ok(out)
}

/// Every `*.jsonl` file in `dir`, in file-name order.
pub fn read_records_dir(dir: &Path) -> Result<Vec<LogitsRecord>> {
    if !dir.is_dir() {
        return Err(CoreError::MissingFile(dir.to_path_buf()));
    }
    let mut files: Vec<_> = std::fs::read_dir(dir)?
        .map(|e| e.map(|e| e.path()))
        .collect::<std::io::Result<_>>()?;
    files.retain(|p| p.extension().is_some_and(|e| e == "jsonl"));
    files.sort();
    let mut out = Vec::new();
    for f in files {
        out.extend(read_records(std::io::BufReader::new(std::fs::File::open(f)?))?);
    }
    Ok(out)
}

/// Records indexed by `(clip_id, model_id)`.
pub struct RecordIndex<'a> {
    by_clip: HashMap<&'a str, HashMap<&'a str, &'a LogitsRecord>>,
    verbs: usize,
    nouns: usize,
}

impl<'a> RecordIndex<'a> {
    pub fn new(records: &'a [LogitsRecord]) -> Result<Self> {
        let first = records.first().ok_or_else(|| invalid("no logit records"))?;
        let (verbs, nouns) = (first.verb_logits.len(), first.noun_logits.len());
        let mut by_clip: HashMap<&str, HashMap<&str, &LogitsRecord>> = HashMap::new();
        for r in records {
            if r.verb_logits.len() != verbs || r.noun_logits.len() != nouns {
                return Err(invalid(format!(
                    "record {}/{} has {}+{} classes, expected {verbs}+{nouns}",
                    r.model_id,
                    r.clip_id,
                    r.verb_logits.len(),
                    r.noun_logits.len()
                )));
            }
            if r.verb_logits.iter().chain(&r.noun_logits).any(|x| !x.is_finite()) {
                return Err(invalid(format!("record {}/{} has non-finite logits", r.model_id, r.clip_id)));
            }
            if by_clip.entry(&r.clip_id).or_default().insert(&r.model_id, r).is_some() {
                return Err(invalid(format!("duplicate record {}/{}", r.model_id, r.clip_id)));
            }
        }
        Ok(Self { by_clip, verbs, nouns })
    }

    pub fn model_ids(&self) -> BTreeSet<String> {
        self.by_clip.values().flat_map(|m| m.keys().map(|k| k.to_string())).collect()
    }

    fn get(&self, clip: &str, model: &str) -> Result<&'a LogitsRecord> {
        self.by_clip
            .get(clip)
            .and_then(|m| m.get(model))
            .copied()
            .ok_or_else(|| CoreError::Missing(format!("logits of model {model} for clip {clip}")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Head {
    Verb,
    Noun,
}

/// Unweighted mean of one head's logits over `models` for a clip.
pub fn ensemble_logits<'m>(
    index: &RecordIndex<'_>,
    clip_id: &str,
    models: impl IntoIterator<Item = &'m String>,
    head: Head,
) -> Result<Vec<f64>> {
    let width = match head {
        Head::Verb => index.verbs,
        Head::Noun => index.nouns,
    };
    let mut sum = vec![0.0f64; width];
    let mut count = 0usize;
    for m in models {
        let r = index.get(clip_id, m)?;
        let logits = match head {
            Head::Verb => &r.verb_logits,
            Head::Noun => &r.noun_logits,
        };
        for (s, &x) in sum.iter_mut().zip(logits) {
            *s += f64::from(x);
        }
        count += 1;
    }
    if count == 0 {
        return Err(invalid("empty model subset"));
    }
    Ok(sum.into_iter().map(|s| s / count as f64).collect())
}

/// Top-1 verb, noun and action accuracy of the ensemble over every
/// labelled clip; an action is correct iff both heads are.
pub fn evaluate(
    records: &[LogitsRecord],
    cfg: &EnsembleConfig,
    labels: &BTreeMap<String, (usize, usize)>,
) -> Result<EvalReport> {
    cfg.validate()?;
    if labels.is_empty() {
        return Err(invalid("no labelled clips to evaluate"));
    }
    let index = RecordIndex::new(records)?;
    let mut predictions = Vec::with_capacity(labels.len());
    let (mut verb_hits, mut noun_hits, mut action_hits) = (0usize, 0usize, 0usize);
    for (clip_id, &(verb_label, noun_label)) in labels {
        let verb = argmax(&ensemble_logits(&index, clip_id, &cfg.verb_models, Head::Verb)?);
        let noun = argmax(&ensemble_logits(&index, clip_id, &cfg.noun_models, Head::Noun)?);
        verb_hits += usize::from(verb == verb_label);
        noun_hits += usize::from(noun == noun_label);
        action_hits += usize::from(verb == verb_label && noun == noun_label);
        predictions.push(ClipPrediction {
            clip_id: clip_id.clone(),
            verb,
            noun,
            verb_label,
            noun_label,
        });
    }
    let n = labels.len() as f64;
    Ok(EvalReport {
        top1_action: action_hits as f64 / n,
        top1_noun: noun_hits as f64 / n,
        top1_verb: verb_hits as f64 / n,
        predictions,
    })
}

/// Grows a subset one model at a time, each round adding the candidate that
/// most improves `head` top-1 (ties go to the smaller id); stops when no
/// candidate helps.
pub fn greedy_subset(
    records: &[LogitsRecord],
    labels: &BTreeMap<String, (usize, usize)>,
    head: Head,
) -> Result<(BTreeSet<String>, f64)> {
    let index = RecordIndex::new(records)?;
    let candidates = index.model_ids();
    let score = |subset: &BTreeSet<String>| -> Result<f64> {
        let mut hits = 0usize;
        for (clip_id, &(v, n)) in labels {
            let want = if head == Head::Verb { v } else { n };
            hits += usize::from(argmax(&ensemble_logits(&index, clip_id, subset, head)?) == want);
        }
        Ok(hits as f64 / labels.len().max(1) as f64)
    };
    let mut chosen = BTreeSet::new();
    let mut best = f64::NEG_INFINITY;
    loop {
        let mut round: Option<(String, f64)> = None;
        for c in candidates.difference(&chosen) {
            let mut trial = chosen.clone();
            trial.insert(c.clone());
            let s = score(&trial)?;
            if round.as_ref().is_none_or(|(_, r)| s > *r) {
                round = Some((c.clone(), s));
            }
        }
        match round {
            Some((c, s)) if s > best => {
                chosen.insert(c);
                best = s;
            }
            _ => break,
        }
    }
    Ok((chosen, best))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(model: &str, clip: &str, v: &[f32], n: &[f32]) -> LogitsRecord {
        LogitsRecord {
            model_id: model.into(),
            clip_id: clip.into(),
            verb_logits: v.to_vec(),
            noun_logits: n.to_vec(),
        }
    }

    #[test]
    fn two_model_average() {
        let rs = [rec("a", "c", &[1.0, 0.0], &[0.0]), rec("b", "c", &[0.0, 1.0], &[0.0])];
        let idx = RecordIndex::new(&rs).unwrap();
        let models = ["a".to_string(), "b".to_string()];
        assert_eq!(ensemble_logits(&idx, "c", &models, Head::Verb).unwrap(), vec![0.5, 0.5]);
        assert!(ensemble_logits(&idx, "c", &["z".to_string()], Head::Verb).is_err());
    }

    #[test]
    fn numeric_ids_parse() {
        let cfg: EnsembleConfig = serde_json::from_str(r#"{"verb_models":[4,5,"x"],"noun_models":[0]}"#).unwrap();
        assert!(cfg.verb_models.contains("4") && cfg.verb_models.contains("x"));
        let empty: EnsembleConfig = serde_json::from_str(r#"{"verb_models":[],"noun_models":[0]}"#).unwrap();
        assert!(empty.validate().is_err());
    }

    #[test]
    fn verb_right_noun_wrong() {
        let rs = [rec("m", "c1", &[1.0, 0.0], &[1.0, 0.0]), rec("m", "c2", &[0.0, 1.0], &[1.0, 0.0])];
        let labels = BTreeMap::from([("c1".to_string(), (0, 1)), ("c2".to_string(), (1, 1))]);
        let r = evaluate(&rs, &EnsembleConfig::single("m"), &labels).unwrap();
        assert_eq!((r.top1_action, r.top1_noun, r.top1_verb), (0.0, 0.0, 1.0));
    }

    #[test]
    fn class_count_mismatch_is_rejected() {
        let rs = [rec("a", "c", &[1.0, 0.0], &[0.0]), rec("b", "c", &[0.0], &[0.0])];
        assert!(RecordIndex::new(&rs).is_err());
    }

    #[test]
    fn greedy_picks_the_informative_model() {
        let rs = [
            rec("good", "c1", &[1.0, 0.0], &[0.0]),
            rec("good", "c2", &[0.0, 1.0], &[0.0]),
            rec("bad", "c1", &[0.0, 3.0], &[0.0]),
            rec("bad", "c2", &[3.0, 0.0], &[0.0]),
        ];
        let labels = BTreeMap::from([("c1".to_string(), (0, 0)), ("c2".to_string(), (1, 0))]);
        let (set, score) = greedy_subset(&rs, &labels, Head::Verb).unwrap();
        assert_eq!(set, BTreeSet::from(["good".to_string()]));
        assert_eq!(score, 1.0);
    }
}
