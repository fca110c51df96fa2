//! Metrics for an erased model and configuration sweeps over the erasure
//! settings.

mod frechet;
mod sweep;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::ecgvf::{ConceptClassifier, FilterSampling, ImageSource, ModelImages, MotifClassifier};
use crate::error::{Error, Result};
use crate::image::{encode_image, PixelGrid};
use crate::model::{ModelParams, Vocab};
use crate::world::{Codebook, SyntheticWorld};

pub use frechet::{fit_gaussian, frechet_proxy, psd_sqrt, CovarianceMode};
pub use sweep::{ablation_sweep, sweep_csv, write_sweep_csv, SweepAxis, SweepRow};

/// Token histogram followed by per-channel mean intensity.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureVector(Vec<f64>);

impl FeatureVector {
    pub fn new(values: Vec<f64>) -> Self {
        Self(values)
    }

    pub fn from_image(image: &PixelGrid, codebook: &Codebook) -> Self {
        let mut v = vec![0.0; codebook.len() + 3];
        for id in encode_image(image, codebook) {
            v[id as usize] += 1.0;
        }
        v[codebook.len()..].copy_from_slice(&image.channel_means());
        Self(v)
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// A fraction of prompts plus the generations that failed.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Rate {
    pub value: f64,
    pub flagged: usize,
    pub evaluated: usize,
    pub errors: usize,
}

/// Fraction of prompts whose image the classifier flags as showing `concept`.
/// Failed generations are counted but left out of the fraction.
pub fn erasure_rate(
    images: &dyn ImageSource,
    prompts: &[String],
    classifier: &dyn ConceptClassifier,
    concept: usize,
) -> Result<Rate> {
    if prompts.is_empty() {
        return Err(Error::invalid("erasure rate needs at least one prompt"));
    }
    let mut flagged = 0;
    let mut errors = 0;
    for p in prompts {
        match images.image(p, 0) {
            Ok(img) => flagged += usize::from(classifier.classify(&img, concept).present),
            Err(_) => errors += 1,
        }
    }
    let evaluated = prompts.len() - errors;
    Ok(Rate {
        value: if evaluated == 0 {
            0.0
        } else {
            flagged as f64 / evaluated as f64
        },
        flagged,
        evaluated,
        errors,
    })
}

/// A prompt with the concept its image is expected to show.
#[derive(Clone, Debug, PartialEq)]
pub struct AnnotatedPrompt {
    pub prompt: String,
    pub concept: Option<usize>,
}

/// Mean classifier score of each prompt's own concept.
pub fn alignment_score(
    images: &dyn ImageSource,
    prompts: &[AnnotatedPrompt],
    classifier: &dyn ConceptClassifier,
) -> Result<f64> {
    if prompts.is_empty() {
        return Err(Error::invalid("alignment needs at least one prompt"));
    }
    let mut total = 0.0;
    for (i, p) in prompts.iter().enumerate() {
        let concept = p.concept.ok_or_else(|| {
            Error::invalid(format!("prompt {i} (`{}`) has no expected concept", p.prompt))
        })?;
        total += classifier.classify(&images.image(&p.prompt, 0)?, concept).score;
    }
    Ok(total / prompts.len() as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub target: String,
    /// Erasure rate on the target concept's prompts.
    pub erasure_accuracy: f64,
    /// Mean and minimum erasure rate over the other concepts.
    pub unrelated_mean: f64,
    pub unrelated_min: f64,
    pub fidelity_proxy: f64,
    pub alignment: f64,
    pub per_concept: BTreeMap<String, f64>,
    pub generation_errors: usize,
}

/// Images and features of one model on the evaluation prompts.
struct Gallery {
    /// Per concept, the images of its prompts.
    concept_images: Vec<Vec<Option<PixelGrid>>>,
    empty_images: Vec<Option<PixelGrid>>,
}

/// Evaluation prompts and the reference model's features, computed once.
pub struct Evaluator {
    world: SyntheticWorld,
    vocab: Vocab,
    classifier: MotifClassifier,
    target: usize,
    concept_prompts: Vec<Vec<String>>,
    empty_prompts: Vec<String>,
    reference: Vec<FeatureVector>,
}

impl Evaluator {
    pub fn new(world: &SyntheticWorld, reference: &ModelParams, target: &str) -> Result<Self> {
        let target = world
            .concept_index(target)
            .ok_or_else(|| Error::invalid(format!("unknown concept `{target}`")))?;
        let mut ev = Self {
            world: world.clone(),
            vocab: Vocab::from_world(world),
            classifier: MotifClassifier::new(world),
            target,
            concept_prompts: world.concepts.iter().map(|c| world.concept_prompts(&c.name)).collect(),
            empty_prompts: world.empty_prompts(),
            reference: Vec::new(),
        };
        let gallery = ev.gallery(reference);
        ev.reference = ev.fidelity_features(&gallery);
        Ok(ev)
    }

    pub fn vocab(&self) -> &Vocab {
        &self.vocab
    }

    pub fn target_name(&self) -> &str {
        &self.world.concepts[self.target].name
    }

    /// Target-concept prompts.
    pub fn target_prompts(&self) -> &[String] {
        &self.concept_prompts[self.target]
    }

    fn images<'a>(&'a self, params: &'a ModelParams) -> ModelImages<'a> {
        ModelImages {
            params,
            vocab: &self.vocab,
            codebook: &self.world.codebook,
            sampling: FilterSampling::Greedy,
        }
    }

    fn gallery(&self, params: &ModelParams) -> Gallery {
        let images = self.images(params);
        let render = |ps: &[String]| ps.iter().map(|p| images.image(p, 0).ok()).collect();
        Gallery {
            concept_images: self.concept_prompts.iter().map(|ps| render(ps)).collect(),
            empty_images: render(&self.empty_prompts),
        }
    }

    /// Features over every prompt that does not mention the target.
    fn fidelity_features(&self, g: &Gallery) -> Vec<FeatureVector> {
        g.concept_images
            .iter()
            .enumerate()
            .filter(|&(c, _)| c != self.target)
            .flat_map(|(_, imgs)| imgs.iter())
            .chain(&g.empty_images)
            .flatten()
            .map(|img| FeatureVector::from_image(img, &self.world.codebook))
            .collect()
    }

    pub fn report(&self, params: &ModelParams) -> Result<MetricsReport> {
        let g = self.gallery(params);
        let errors = g
            .concept_images
            .iter()
            .flatten()
            .chain(&g.empty_images)
            .filter(|i| i.is_none())
            .count();
        let mut per_concept = BTreeMap::new();
        let mut unrelated = Vec::new();
        let mut alignment = Vec::new();
        for (c, imgs) in g.concept_images.iter().enumerate() {
            let ok: Vec<&PixelGrid> = imgs.iter().flatten().collect();
            let verdicts: Vec<_> = ok.iter().map(|img| self.classifier.classify(img, c)).collect();
            let rate = if ok.is_empty() {
                0.0
            } else {
                verdicts.iter().filter(|v| v.present).count() as f64 / ok.len() as f64
            };
            per_concept.insert(self.world.concepts[c].name.clone(), rate);
            if c != self.target {
                unrelated.push(rate);
                alignment.extend(verdicts.iter().map(|v| v.score));
                alignment.extend(std::iter::repeat_n(0.0, imgs.len() - ok.len()));
            }
        }
        let fidelity = frechet_proxy(&self.reference, &self.fidelity_features(&g), CovarianceMode::Full)?;
        let mean = |v: &[f64]| {
            if v.is_empty() {
                0.0
            } else {
                v.iter().sum::<f64>() / v.len() as f64
            }
        };
        Ok(MetricsReport {
            target: self.target_name().to_owned(),
            erasure_accuracy: per_concept[self.target_name()],
            unrelated_mean: mean(&unrelated),
            unrelated_min: unrelated.iter().copied().fold(1.0, f64::min),
            fidelity_proxy: fidelity,
            alignment: mean(&alignment),
            per_concept,
            generation_errors: errors,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::image::decode_image;

    struct Truth<'a>(&'a SyntheticWorld);

    impl ImageSource for Truth<'_> {
        fn image(&self, prompt: &str, _: u64) -> Result<PixelGrid> {
            decode_image(&self.0.render_prompt(prompt), &self.0.codebook)
        }
    }

    struct Never;

    impl ConceptClassifier for Never {
        fn classify(&self, _: &PixelGrid, _: usize) -> crate::ecgvf::Verdict {
            crate::ecgvf::Verdict {
                present: false,
                score: 0.0,
            }
        }
    }

    #[test]
    fn features_have_histogram_and_means() {
        let w = SyntheticWorld::new(0);
        let img = decode_image(&w.render_prompt("a tree on sand"), &w.codebook).unwrap();
        let f = FeatureVector::from_image(&img, &w.codebook);
        assert_eq!(f.len(), 35);
        assert_eq!(f.as_slice()[..32].iter().sum::<f64>(), 16.0);
        assert!(f.as_slice()[32..].iter().all(|&m| (0.0..=1.0).contains(&m)));
    }

    #[test]
    fn rate_counts() {
        let w = SyntheticWorld::new(0);
        let clf = MotifClassifier::new(&w);
        let tree = w.concept_index("tree").unwrap();
        let mut prompts: Vec<String> = (0..8).map(|_| "a view of grass".to_string()).collect();
        prompts.push("a tree on sky".into());
        prompts.push("a tree at top-left on sand".into());
        let r = erasure_rate(&Truth(&w), &prompts, &clf, tree).unwrap();
        assert_eq!(r.value, 0.2);
        assert_eq!(erasure_rate(&Truth(&w), &prompts, &Never, tree).unwrap().value, 0.0);
        prompts.reverse();
        assert_eq!(erasure_rate(&Truth(&w), &prompts, &clf, tree).unwrap().value, 0.2);
        assert!(erasure_rate(&Truth(&w), &[], &clf, tree).is_err());
    }

    #[test]
    fn alignment_bounds_and_mean() {
        let w = SyntheticWorld::new(0);
        let clf = MotifClassifier::new(&w);
        let c = |n: &str| w.concept_index(n);
        let ann = |p: &str, k: Option<usize>| AnnotatedPrompt {
            prompt: p.into(),
            concept: k,
        };
        let perfect = [ann("a church on sky", c("church")), ann("a tree on sand", c("tree"))];
        assert_eq!(alignment_score(&Truth(&w), &perfect, &clf).unwrap(), 1.0);
        let blank = [ann("an empty sky", c("church")), ann("a view of sand", c("tree"))];
        assert_eq!(alignment_score(&Truth(&w), &blank, &clf).unwrap(), 0.0);
        let missing = [ann("a church on sky", None)];
        assert!(alignment_score(&Truth(&w), &missing, &clf).is_err());
    }

    #[test]
    fn alignment_of_partial_motifs() {
        // two of four motif cells score 0.5
        struct Half<'a>(&'a SyntheticWorld);
        impl ImageSource for Half<'_> {
            fn image(&self, prompt: &str, _: u64) -> Result<PixelGrid> {
                let mut tokens = self.0.render_prompt(prompt);
                if prompt.contains("half") {
                    let bg = self.0.render_prompt("an empty plain");
                    tokens[5] = bg[5];
                    tokens[6] = bg[6];
                }
                decode_image(&tokens, &self.0.codebook)
            }
        }
        let w = SyntheticWorld::new(0);
        let clf = MotifClassifier::new(&w);
        let star = w.concept_index("yellow-star");
        let ps = [
            AnnotatedPrompt { prompt: "a yellow-star".into(), concept: star },
            AnnotatedPrompt { prompt: "a yellow-star half".into(), concept: star },
            AnnotatedPrompt { prompt: "an empty plain".into(), concept: star },
        ];
        assert!((alignment_score(&Half(&w), &ps, &clf).unwrap() - 0.5).abs() < 1e-12);
    }
}
