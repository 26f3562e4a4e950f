//! Scene-grounded caption metrics: hallucination rate, recalls, element F1
//! and a grammar-based coherence score.

use std::collections::{BTreeSet, HashSet};

use crate::synthworld::{parse_caption, Caption, Category, Element, Scene, TokenClass, TokenId, Vocabulary};

/// Category mentions in a caption, in order, counting repeats.
pub fn category_mentions(candidate: &Caption) -> Vec<Category> {
    candidate
        .tokens()
        .iter()
        .filter_map(|&t| match Vocabulary::classify(t) {
            Some(TokenClass::Category(c)) => Some(c),
            _ => None,
        })
        .collect()
}

/// Mention counts behind [`chair_and_recall`], for corpus-level pooling.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct MentionCounts {
    pub mentions: usize,
    pub hallucinated: usize,
    pub recalled: usize,
    pub scene_categories: usize,
}

impl MentionCounts {
    pub fn of(candidate: &Caption, scene: &Scene) -> Self {
        let present = scene.categories();
        let mentions = category_mentions(candidate);
        let hallucinated = mentions.iter().filter(|c| !present.contains(c)).count();
        let recalled = mentions
            .iter()
            .filter(|c| present.contains(c))
            .collect::<BTreeSet<_>>()
            .len();
        Self {
            mentions: mentions.len(),
            hallucinated,
            recalled,
            scene_categories: present.len(),
        }
    }

    pub fn chair(&self) -> f64 {
        ratio(self.hallucinated, self.mentions)
    }

    pub fn object_recall(&self) -> f64 {
        ratio(self.recalled, self.scene_categories)
    }
}

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

/// `(chair, object_recall)`: hallucinated share of category mentions, and
/// share of the scene's categories mentioned at least once.
pub fn chair_and_recall(candidate: &Caption, scene: &Scene) -> (f64, f64) {
    let m = MentionCounts::of(candidate, scene);
    (m.chair(), m.object_recall())
}

/// Exact-match F1 between two element sets; 0 when either is empty.
pub fn set_f1(predicted: &BTreeSet<Element>, truth: &BTreeSet<Element>) -> f64 {
    if predicted.is_empty() || truth.is_empty() {
        return 0.0;
    }
    let hits = predicted.intersection(truth).count() as f64;
    if hits == 0.0 {
        return 0.0;
    }
    let p = hits / predicted.len() as f64;
    let r = hits / truth.len() as f64;
    2.0 * p * r / (p + r)
}

/// Element tuples parsed from the caption against the scene's element set.
pub fn capture_f1(candidate: &Caption, scene: &Scene) -> f64 {
    set_f1(&parse_caption(candidate.tokens()).elements, &scene.elements())
}

/// Share of trigram windows (over non-special tokens) that repeat an
/// earlier window.
pub fn repeated_trigram_rate(candidate: &Caption) -> f64 {
    let words: Vec<TokenId> = candidate.words().collect();
    if words.len() < 3 {
        return 0.0;
    }
    let mut seen = HashSet::new();
    let windows = words.windows(3);
    let total = windows.len();
    let repeats = windows.filter(|w| !seen.insert(*w)).count();
    repeats as f64 / total as f64
}

/// Parsed-clause share times `1 - repeated_trigram_rate`. Captions with no
/// clause slots score 0.
pub fn coherence_proxy(candidate: &Caption) -> f64 {
    let parsed = parse_caption(candidate.tokens());
    let slots = parsed.clause_slots();
    if slots == 0 {
        return 0.0;
    }
    (parsed.clauses.len() as f64 / slots as f64) * (1.0 - repeated_trigram_rate(candidate))
}

/// Distinct non-special reference tokens that appear in the candidate.
pub fn unigram_recall(candidate: &Caption, reference: &Caption) -> f64 {
    let wanted: BTreeSet<TokenId> = reference.words().collect();
    if wanted.is_empty() {
        return 0.0;
    }
    let have: BTreeSet<TokenId> = candidate.words().collect();
    wanted.intersection(&have).count() as f64 / wanted.len() as f64
}
