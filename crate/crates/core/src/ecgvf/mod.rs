//! Prompt-pair dataset construction: propose pairs, render both prompts with
//! the pretrained generator, and keep only pairs where the target image shows
//! the concept and the surrogate image does not.

mod classifier;
mod source;

use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::erasure::PromptPair;
use crate::error::{Error, Result};
use crate::image::{decode_image, PixelGrid};
use crate::model::{generate, ModelParams, Sampling, Vocab};
use crate::world::Codebook;

pub use classifier::{ConceptClassifier, MotifClassifier, Verdict};
pub use source::{
    format_request, generate_pairs, parse_reply, CommandTransport, EndpointSource, PromptSource,
    SyntheticSource, Transport,
};

/// How images are drawn while filtering.
#[derive(Clone, Copy, Debug, PartialEq, Default)]
pub enum FilterSampling {
    #[default]
    Greedy,
    /// Temperature sampling seeded by each pair's `seed`.
    Temperature(f64),
}

/// Renders prompts to images.
pub trait ImageSource {
    fn image(&self, prompt: &str, seed: u64) -> Result<PixelGrid>;
}

/// The generator plus decoder.
pub struct ModelImages<'a> {
    pub params: &'a ModelParams,
    pub vocab: &'a Vocab,
    pub codebook: &'a Codebook,
    pub sampling: FilterSampling,
}

impl ModelImages<'_> {
    pub fn tokens(&self, prompt: &str, seed: u64) -> Result<Vec<u32>> {
        let sampling = match self.sampling {
            FilterSampling::Greedy => Sampling::Greedy,
            FilterSampling::Temperature(tau) => Sampling::Temperature { tau, seed },
        };
        let prompt = self.vocab.tokenize(prompt)?;
        generate(self.params, &prompt, self.params.config().image_tokens, sampling)
    }
}

impl ImageSource for ModelImages<'_> {
    fn image(&self, prompt: &str, seed: u64) -> Result<PixelGrid> {
        decode_image(&self.tokens(prompt, seed)?, self.codebook)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ErroredPair {
    pub pair: PromptPair,
    pub error: String,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct FilterCounts {
    pub input: usize,
    pub kept: usize,
    pub false_negative: usize,
    pub false_positive: usize,
    pub errored: usize,
}

/// Outcome of [`visual_filter`]; every category preserves input order.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct FilterReport {
    pub kept: Vec<PromptPair>,
    /// The target prompt did not show the concept.
    pub false_negative: Vec<PromptPair>,
    /// The surrogate prompt showed the concept.
    pub false_positive: Vec<PromptPair>,
    pub errored: Vec<ErroredPair>,
    pub counts: FilterCounts,
}

impl FilterReport {
    pub fn total(&self) -> usize {
        self.kept.len() + self.false_negative.len() + self.false_positive.len() + self.errored.len()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let json = serde_json::to_string_pretty(self)?;
        std::fs::write(path, json + "\n").map_err(|e| Error::io(path, e))
    }
}

/// Renders both prompts of each pair with the pair's seed and sorts the pair
/// into kept or one rejection category. A missing concept in the target image
/// takes precedence over a concept leaking into the surrogate image.
pub fn visual_filter(
    pairs: &[PromptPair],
    images: &dyn ImageSource,
    classifier: &dyn ConceptClassifier,
    concept: usize,
) -> FilterReport {
    let mut report = FilterReport::default();
    for pair in pairs {
        let verdicts = images
            .image(&pair.target_prompt, pair.seed)
            .and_then(|t| Ok((t, images.image(&pair.surrogate_prompt, pair.seed)?)))
            .map(|(t, s)| (classifier.classify(&t, concept), classifier.classify(&s, concept)));
        match verdicts {
            Err(e) => report.errored.push(ErroredPair {
                pair: pair.clone(),
                error: e.to_string(),
            }),
            Ok((tar, _)) if !tar.present => report.false_negative.push(pair.clone()),
            Ok((_, sur)) if sur.present => report.false_positive.push(pair.clone()),
            Ok(_) => report.kept.push(pair.clone()),
        }
    }
    report.counts = FilterCounts {
        input: pairs.len(),
        kept: report.kept.len(),
        false_negative: report.false_negative.len(),
        false_positive: report.false_positive.len(),
        errored: report.errored.len(),
    };
    report
}

pub fn save_dataset(pairs: &[PromptPair], path: &Path) -> Result<()> {
    let json = serde_json::to_string_pretty(pairs)?;
    std::fs::write(path, json + "\n").map_err(|e| Error::io(path, e))
}

fn schema(index: usize, field: &str, message: impl Into<String>) -> Error {
    Error::Schema {
        index,
        field: field.to_owned(),
        message: message.into(),
    }
}

fn text_field(record: &serde_json::Map<String, Value>, index: usize, field: &str) -> Result<String> {
    match record.get(field) {
        None => Err(schema(index, field, "missing")),
        Some(Value::String(s)) if !s.trim().is_empty() => Ok(s.clone()),
        Some(Value::String(_)) => Err(schema(index, field, "empty")),
        Some(_) => Err(schema(index, field, "expected a string")),
    }
}

fn int_field(record: &serde_json::Map<String, Value>, index: usize, field: &str) -> Result<u64> {
    match record.get(field) {
        None => Err(schema(index, field, "missing")),
        Some(v) => v
            .as_u64()
            .ok_or_else(|| schema(index, field, "expected a non-negative integer")),
    }
}

/// Parses a dataset, reporting the first bad record and field.
pub fn parse_dataset(text: &str) -> Result<Vec<PromptPair>> {
    let value: Value = serde_json::from_str(text)?;
    let Value::Array(records) = value else {
        return Err(schema(0, "<root>", "expected an array of records"));
    };
    records
        .iter()
        .enumerate()
        .map(|(i, rec)| {
            let Value::Object(rec) = rec else {
                return Err(schema(i, "<record>", "expected an object"));
            };
            let pair = PromptPair {
                concept: text_field(rec, i, "concept")?,
                target_prompt: text_field(rec, i, "target_prompt")?,
                surrogate_prompt: text_field(rec, i, "surrogate_prompt")?,
                source: text_field(rec, i, "source")?,
                iteration: int_field(rec, i, "iteration")? as usize,
                seed: int_field(rec, i, "seed")?,
            };
            if pair.surrogate_prompt.split_whitespace().any(|w| w == pair.concept) {
                return Err(schema(i, "surrogate_prompt", "mentions the target concept"));
            }
            Ok(pair)
        })
        .collect()
}

pub fn load_dataset(path: &Path) -> Result<Vec<PromptPair>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_dataset(&text)
}

#[cfg(test)]
mod tests {
    use std::collections::HashMap;

    use super::*;
    use crate::world::SyntheticWorld;

    fn pair(tar: &str, sur: &str) -> PromptPair {
        PromptPair {
            concept: "church".into(),
            target_prompt: tar.into(),
            surrogate_prompt: sur.into(),
            source: "fixture".into(),
            iteration: 1,
            seed: 7,
        }
    }

    /// Each prompt renders to its own bytes; verdicts come from a lookup.
    struct Stub(HashMap<String, bool>);

    struct StubImages;

    impl ImageSource for StubImages {
        fn image(&self, prompt: &str, _: u64) -> Result<PixelGrid> {
            if prompt.contains("broken") {
                return Err(Error::invalid("generation failed"));
            }
            PixelGrid::new(4, prompt.bytes().cycle().take(48).collect())
        }
    }

    impl ConceptClassifier for Stub {
        fn classify(&self, image: &PixelGrid, _: usize) -> Verdict {
            let present = self
                .0
                .iter()
                .any(|(p, &v)| v && StubImages.image(p, 0).unwrap() == *image);
            Verdict {
                present,
                score: if present { 1.0 } else { 0.0 },
            }
        }
    }

    #[test]
    fn verdict_table() {
        let table = [(true, false), (false, false), (true, true), (false, true)];
        let mut verdicts = HashMap::new();
        let mut pairs = Vec::new();
        for (i, (t, s)) in table.into_iter().enumerate() {
            let p = pair(&format!("t{i}"), &format!("s{i}"));
            verdicts.insert(p.target_prompt.clone(), t);
            verdicts.insert(p.surrogate_prompt.clone(), s);
            pairs.push(p);
        }
        let report = visual_filter(&pairs, &StubImages, &Stub(verdicts), 0);
        assert_eq!(report.kept, vec![pairs[0].clone()]);
        assert_eq!(report.false_negative, vec![pairs[1].clone(), pairs[3].clone()]);
        assert_eq!(report.false_positive, vec![pairs[2].clone()]);
        assert_eq!(report.total(), 4);
    }

    #[test]
    fn generation_errors_are_counted_separately() {
        let pairs = vec![pair("t", "s"), pair("broken t", "s")];
        let report = visual_filter(&pairs, &StubImages, &Stub(HashMap::new()), 0);
        assert_eq!(report.counts.errored, 1);
        assert_eq!(report.errored[0].pair, pairs[1]);
        assert_eq!(report.total(), 2);
    }

    #[test]
    fn dataset_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("pairs.json");
        let pairs = vec![
            pair("a church on sky", "a tree on sky"),
            pair("a church at center on sand", "a blue-circle at center on sand"),
        ];
        save_dataset(&pairs, &path).unwrap();
        assert_eq!(load_dataset(&path).unwrap(), pairs);
        let text = std::fs::read_to_string(&path).unwrap();
        let order: Vec<usize> = ["concept", "target_prompt", "surrogate_prompt", "source", "iteration", "seed"]
            .iter()
            .map(|k| text.find(&format!("\"{k}\"")).unwrap())
            .collect();
        assert!(order.windows(2).all(|w| w[0] < w[1]));

        save_dataset(&[], &path).unwrap();
        assert_eq!(std::fs::read_to_string(&path).unwrap().trim(), "[]");
        assert!(load_dataset(&path).unwrap().is_empty());
    }

    #[test]
    fn schema_errors_name_index_and_field() {
        let text = r#"[
            {"concept": "church", "target_prompt": "a church", "surrogate_prompt": "a tree",
             "source": "s", "iteration": 0, "seed": 1},
            {"concept": "church", "target_prompt": "a church", "source": "s",
             "iteration": 0, "seed": 1}
        ]"#;
        match parse_dataset(text).unwrap_err() {
            Error::Schema { index, field, .. } => {
                assert_eq!(index, 1);
                assert_eq!(field, "surrogate_prompt");
            }
            e => panic!("{e}"),
        }
        let text = r#"[{"concept": "church", "target_prompt": "a church", "surrogate_prompt": "a tree",
             "source": "s", "iteration": -1, "seed": 1}]"#;
        assert!(parse_dataset(text).unwrap_err().to_string().contains("iteration"));
    }

    #[test]
    fn filter_on_ground_truth_renderings() {
        let world = SyntheticWorld::new(0);
        struct Truth<'a>(&'a SyntheticWorld);
        impl ImageSource for Truth<'_> {
            fn image(&self, prompt: &str, _: u64) -> Result<PixelGrid> {
                decode_image(&self.0.render_prompt(prompt), &self.0.codebook)
            }
        }
        let clf = MotifClassifier::new(&world);
        let church = world.concept_index("church").unwrap();
        let pairs = vec![
            pair("a church on sky", "a tree on sky"),
            pair("a tree on sky", "a blue-circle on sky"),
            pair("a church on sky", "a church on sand"),
        ];
        let report = visual_filter(&pairs, &Truth(&world), &clf, church);
        assert_eq!(report.counts.kept, 1);
        assert_eq!(report.counts.false_negative, 1);
        assert_eq!(report.counts.false_positive, 1);
        let again = visual_filter(&report.kept, &Truth(&world), &clf, church);
        assert_eq!(again.kept, report.kept);
    }
}
