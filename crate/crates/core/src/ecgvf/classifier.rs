use serde::{Deserialize, Serialize};

use crate::image::PixelGrid;
use crate::world::{Codebook, SyntheticWorld};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Verdict {
    pub present: bool,
    /// In `[0, 1]`, reaching 1 exactly at the presence threshold.
    pub score: f64,
}

/// Decides whether a concept is visible in an image.
pub trait ConceptClassifier {
    fn classify(&self, image: &PixelGrid, concept: usize) -> Verdict;
}

/// Counts grid cells whose nearest codebook patch belongs to the concept's
/// motif.
#[derive(Clone, Debug)]
pub struct MotifClassifier {
    codebook: Codebook,
    motifs: Vec<[u32; 4]>,
    threshold: f64,
}

impl MotifClassifier {
    pub fn new(world: &SyntheticWorld) -> Self {
        Self {
            codebook: world.codebook.clone(),
            motifs: world.concepts.iter().map(|c| c.motif).collect(),
            threshold: world.presence_threshold,
        }
    }

    pub fn threshold(&self) -> f64 {
        self.threshold
    }

    pub fn motif_cells(&self, image: &PixelGrid, concept: usize) -> usize {
        let motif = &self.motifs[concept];
        let side = image.cells();
        (0..side * side)
            .filter(|&i| {
                let id = self.codebook.nearest(&image.patch(i / side, i % side));
                motif.contains(&id)
            })
            .count()
    }
}

impl ConceptClassifier for MotifClassifier {
    fn classify(&self, image: &PixelGrid, concept: usize) -> Verdict {
        let cells = image.cells() * image.cells();
        let fraction = self.motif_cells(image, concept) as f64 / cells as f64;
        Verdict {
            present: fraction >= self.threshold,
            score: (fraction / self.threshold).min(1.0),
        }
    }
}
