//! Caption evaluation: CIDEr, CHAIR-style hallucination, recalls,
//! element-level F1, length and a grammar-based coherence proxy.

mod cider;
mod grounding;

pub use cider::{cider, CorpusStats, MAX_ORDER};
pub use grounding::{
    capture_f1, category_mentions, chair_and_recall, coherence_proxy, repeated_trigram_rate, set_f1,
    unigram_recall, MentionCounts,
};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::synthworld::{Caption, Sample};

/// Version of the JSON evaluation report layout.
pub const REPORT_SCHEMA_VERSION: u32 = 1;

/// Corpus-level summary. `chair` pools mentions over all captions
/// (instance-level); every other field is a per-caption mean.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub cider: f64,
    pub chair: f64,
    pub object_recall: f64,
    pub unigram_recall: f64,
    pub capture_f1: f64,
    pub mean_length: f64,
    pub coherence_proxy: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleMetrics {
    pub index: usize,
    pub scene_seed: u64,
    pub caption: String,
    pub length: usize,
    pub terminated: bool,
    pub cider: f64,
    pub chair: f64,
    pub object_recall: f64,
    pub unigram_recall: f64,
    pub capture_f1: f64,
    pub coherence_proxy: f64,
}

/// Caption length as reported everywhere: tokens excluding specials.
pub fn caption_length(caption: &Caption) -> usize {
    caption.words().count()
}

/// Scores `captions[i]` against `samples[i]`; CIDEr statistics come from
/// the samples' full references.
pub fn evaluate(captions: &[Caption], samples: &[Sample]) -> Result<(MetricsReport, Vec<SampleMetrics>)> {
    if captions.len() != samples.len() {
        return Err(Error::Contract(format!(
            "{} captions for {} samples",
            captions.len(),
            samples.len()
        )));
    }
    let refs: Vec<[Caption; 1]> = samples.iter().map(|s| [s.full.clone()]).collect();
    let stats = CorpusStats::from_references(refs.iter().map(|r| &r[..]));
    let rows: Vec<(SampleMetrics, MentionCounts)> = captions
        .par_iter()
        .zip(samples.par_iter())
        .zip(refs.par_iter())
        .enumerate()
        .map(|(index, ((c, s), r))| {
            let counts = MentionCounts::of(c, &s.scene);
            let row = SampleMetrics {
                index,
                scene_seed: s.scene.seed,
                caption: c.render(),
                length: caption_length(c),
                terminated: c.terminated(),
                cider: cider(c, r, &stats),
                chair: counts.chair(),
                object_recall: counts.object_recall(),
                unigram_recall: unigram_recall(c, &s.full),
                capture_f1: capture_f1(c, &s.scene),
                coherence_proxy: coherence_proxy(c),
            };
            (row, counts)
        })
        .collect();
    let n = rows.len().max(1) as f64;
    let mean = |f: fn(&SampleMetrics) -> f64| rows.iter().map(|(r, _)| f(r)).sum::<f64>() / n;
    let mentions: usize = rows.iter().map(|(_, m)| m.mentions).sum();
    let hallucinated: usize = rows.iter().map(|(_, m)| m.hallucinated).sum();
    let report = MetricsReport {
        cider: mean(|r| r.cider),
        chair: if mentions == 0 {
            0.0
        } else {
            hallucinated as f64 / mentions as f64
        },
        object_recall: mean(|r| r.object_recall),
        unigram_recall: mean(|r| r.unigram_recall),
        capture_f1: mean(|r| r.capture_f1),
        mean_length: mean(|r| r.length as f64),
        coherence_proxy: mean(|r| r.coherence_proxy),
    };
    Ok((report, rows.into_iter().map(|(r, _)| r).collect()))
}

/// One evaluated system on one dataset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SystemReport {
    pub name: String,
    pub checkpoint: Option<String>,
    pub decoding: crate::decoding::DecodeConfig,
    pub summary: MetricsReport,
    pub samples: Vec<SampleMetrics>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub schema_version: u32,
    pub dataset: String,
    pub systems: Vec<SystemReport>,
}

impl EvalReport {
    pub fn new(dataset: impl Into<String>) -> Self {
        Self {
            schema_version: REPORT_SCHEMA_VERSION,
            dataset: dataset.into(),
            systems: Vec::new(),
        }
    }

    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self).map_err(|e| Error::Data(format!("serialising report: {e}")))
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let report: Self = serde_json::from_str(text).map_err(|e| Error::Data(format!("parsing report: {e}")))?;
        if report.schema_version != REPORT_SCHEMA_VERSION {
            return Err(Error::Data(format!(
                "report schema version {} (expected {REPORT_SCHEMA_VERSION})",
                report.schema_version
            )));
        }
        Ok(report)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::decoding::DecodeConfig;
    use crate::synthworld::{generate_scene, SceneConfig};

    fn samples(n: u64) -> Vec<Sample> {
        (0..n)
            .map(|s| Sample::from_scene(generate_scene(s, &SceneConfig::default()).unwrap()))
            .collect()
    }

    #[test]
    fn references_score_perfectly() {
        let data = samples(50);
        let caps: Vec<Caption> = data.iter().map(|s| s.full.clone()).collect();
        let (report, rows) = evaluate(&caps, &data).unwrap();
        assert_eq!(report.chair, 0.0);
        assert_eq!(report.object_recall, 1.0);
        assert_eq!(report.capture_f1, 1.0);
        assert_eq!(report.coherence_proxy, 1.0);
        assert_eq!(report.unigram_recall, 1.0);
        assert!((report.cider - 10.0).abs() < 1e-9, "{}", report.cider);
        assert_eq!(rows.len(), 50);
        assert!(rows.iter().all(|r| r.terminated));
    }

    #[test]
    fn short_captions_collapse_cider_and_recall() {
        let data = samples(100);
        let short: Vec<Caption> = data.iter().map(|s| s.short.clone()).collect();
        let full: Vec<Caption> = data.iter().map(|s| s.full.clone()).collect();
        let (s, _) = evaluate(&short, &data).unwrap();
        let (f, _) = evaluate(&full, &data).unwrap();
        assert!(s.cider < 0.2 * f.cider, "{} vs {}", s.cider, f.cider);
        assert!(s.mean_length < f.mean_length);
        assert!(s.object_recall < f.object_recall);
        assert_eq!(s.chair, 0.0);
    }

    #[test]
    fn mismatched_lengths_are_rejected() {
        assert!(evaluate(&[], &samples(1)).is_err());
    }

    #[test]
    fn report_json_round_trip() {
        let data = samples(3);
        let caps: Vec<Caption> = data.iter().map(|s| s.short.clone()).collect();
        let (summary, rows) = evaluate(&caps, &data).unwrap();
        let mut report = EvalReport::new("val");
        report.systems.push(SystemReport {
            name: "base".into(),
            checkpoint: None,
            decoding: DecodeConfig::default(),
            summary,
            samples: rows,
        });
        let text = report.to_json().unwrap();
        assert!(text.contains("\"schema_version\": 1"));
        assert_eq!(EvalReport::from_json(&text).unwrap(), report);
        let bumped = text.replace("\"schema_version\": 1", "\"schema_version\": 9");
        assert!(EvalReport::from_json(&bumped).is_err());
    }
}
