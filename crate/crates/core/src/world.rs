//! The closed synthetic universe the toy generator lives in.
//!
//! Every image is a `GRID × GRID` arrangement of codebook patches: a
//! background checkerboard with at most one concept motif (a 2×2 block of
//! concept-specific patches) stamped at a named position. Prompts are drawn
//! from a small template grammar, so the ground-truth image for any prompt is
//! a pure function of the words it contains.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::image::PATCH;

/// Side of the patch grid; images carry `GRID * GRID` tokens.
pub const GRID: usize = 4;

pub const IMAGE_TOKENS: usize = GRID * GRID;

const FILLER_WORDS: [&str; 13] = [
    "a", "an", "the", "of", "on", "at", "in", "photo", "painting", "picture", "view", "empty",
    "with",
];

const CONCEPTS: [&str; 6] = [
    "red-square",
    "blue-circle",
    "green-triangle",
    "yellow-star",
    "church",
    "tree",
];

const BACKGROUNDS: [&str; 4] = ["plain", "grass", "sky", "sand"];

const POSITIONS: [(&str, usize, usize); 5] = [
    ("top-left", 0, 0),
    ("top-right", 0, 2),
    ("bottom-left", 2, 0),
    ("bottom-right", 2, 2),
    ("center", 1, 1),
];

/// Templates for prompts that mention a concept.
pub const CONCEPT_TEMPLATES: [&str; 4] = [
    "a {concept} on {background}",
    "a photo of a {concept} on {background}",
    "a {concept} at {position} on {background}",
    "a painting of a {concept} at {position} on {background}",
];

/// Templates for prompts without any concept.
pub const EMPTY_TEMPLATES: [&str; 2] = ["a view of {background}", "an empty {background}"];

const DEFAULT_POSITION: &str = "center";
const DEFAULT_BACKGROUND: &str = "plain";

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Concept {
    pub name: String,
    /// Codebook ids of the motif in row-major order: TL, TR, BL, BR.
    pub motif: [u32; 4],
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Background {
    pub name: String,
    /// Checkerboard tiles; cell `(r, c)` uses `tiles[(r + c) % 2]`.
    pub tiles: [u32; 2],
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Position {
    pub name: String,
    pub row: usize,
    pub col: usize,
}

/// `K` fixed RGB patches of `PATCH × PATCH` pixels.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Codebook {
    entries: Vec<Vec<u8>>,
}

impl Codebook {
    pub fn new(entries: Vec<Vec<u8>>) -> Result<Self> {
        let want = PATCH * PATCH * 3;
        if entries.is_empty() || entries.iter().any(|e| e.len() != want) {
            return Err(Error::invalid(format!(
                "codebook entries must each hold {want} bytes"
            )));
        }
        for i in 0..entries.len() {
            if entries[..i].contains(&entries[i]) {
                return Err(Error::invalid(format!("codebook entry {i} is a duplicate")));
            }
        }
        Ok(Self { entries })
    }

    fn random(size: usize, rng: &mut ChaCha8Rng) -> Self {
        let mut entries: Vec<Vec<u8>> = Vec::with_capacity(size);
        while entries.len() < size {
            let candidate: Vec<u8> = (0..PATCH * PATCH * 3).map(|_| rng.gen()).collect();
            if !entries.contains(&candidate) {
                entries.push(candidate);
            }
        }
        Self { entries }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entry(&self, id: u32) -> Option<&[u8]> {
        self.entries.get(id as usize).map(Vec::as_slice)
    }

    /// Id of the entry closest to `patch` in squared error; ties go to the
    /// lowest id.
    pub fn nearest(&self, patch: &[u8]) -> u32 {
        let mut best = (u64::MAX, 0u32);
        for (id, e) in self.entries.iter().enumerate() {
            let dist: u64 = e
                .iter()
                .zip(patch)
                .map(|(&a, &b)| {
                    let d = a as i64 - b as i64;
                    (d * d) as u64
                })
                .sum();
            if dist < best.0 {
                best = (dist, id as u32);
            }
        }
        best.1
    }
}

/// What a prompt asks for, as far as the renderer is concerned.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Scene {
    pub concept: Option<usize>,
    pub background: usize,
    pub position: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticWorld {
    pub seed: u64,
    pub filler_words: Vec<String>,
    pub concepts: Vec<Concept>,
    pub backgrounds: Vec<Background>,
    pub positions: Vec<Position>,
    pub codebook: Codebook,
    /// Fraction of grid cells that must show a concept's motif for the
    /// classifier to call it present.
    pub presence_threshold: f64,
}

impl SyntheticWorld {
    /// The default world: six concepts, four backgrounds, 32 codebook patches
    /// whose pixels are drawn from `seed`.
    pub fn new(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut next = 0u32;
        let mut take = || {
            next += 1;
            next - 1
        };
        let concepts = CONCEPTS
            .iter()
            .map(|name| Concept {
                name: name.to_string(),
                motif: [take(), take(), take(), take()],
            })
            .collect();
        let backgrounds = BACKGROUNDS
            .iter()
            .map(|name| Background {
                name: name.to_string(),
                tiles: [take(), take()],
            })
            .collect();
        let size = next as usize;
        Self {
            seed,
            filler_words: FILLER_WORDS.iter().map(|s| s.to_string()).collect(),
            concepts,
            backgrounds,
            positions: POSITIONS
                .iter()
                .map(|&(name, row, col)| Position {
                    name: name.to_string(),
                    row,
                    col,
                })
                .collect(),
            codebook: Codebook::random(size, &mut rng),
            presence_threshold: 0.25,
        }
    }

    pub fn codebook_size(&self) -> usize {
        self.codebook.len()
    }

    /// All text words, in vocabulary order.
    pub fn words(&self) -> Vec<String> {
        let mut words = self.filler_words.clone();
        words.extend(self.concepts.iter().map(|c| c.name.clone()));
        words.extend(self.backgrounds.iter().map(|b| b.name.clone()));
        words.extend(self.positions.iter().map(|p| p.name.clone()));
        words
    }

    pub fn concept_index(&self, name: &str) -> Option<usize> {
        self.concepts.iter().position(|c| c.name == name)
    }

    pub fn concept(&self, name: &str) -> Result<&Concept> {
        self.concepts
            .iter()
            .find(|c| c.name == name)
            .ok_or_else(|| Error::invalid(format!("unknown concept `{name}`")))
    }

    pub fn concept_names(&self) -> impl Iterator<Item = &str> {
        self.concepts.iter().map(|c| c.name.as_str())
    }

    /// Reads the scene a prompt describes: first concept word, first
    /// background word, first position word, with defaults for the latter two.
    pub fn parse_scene(&self, prompt: &str) -> Scene {
        let words: Vec<&str> = prompt.split_whitespace().collect();
        let find = |names: &mut dyn Iterator<Item = &str>| {
            let names: Vec<&str> = names.collect();
            words
                .iter()
                .find_map(|w| names.iter().position(|n| n == w))
        };
        let concept = find(&mut self.concepts.iter().map(|c| c.name.as_str()));
        let background = find(&mut self.backgrounds.iter().map(|b| b.name.as_str()))
            .or_else(|| self.backgrounds.iter().position(|b| b.name == DEFAULT_BACKGROUND))
            .unwrap_or(0);
        let position = find(&mut self.positions.iter().map(|p| p.name.as_str()))
            .or_else(|| self.positions.iter().position(|p| p.name == DEFAULT_POSITION))
            .unwrap_or(0);
        Scene {
            concept,
            background,
            position,
        }
    }

    /// Ground-truth image tokens for a scene, row-major.
    pub fn render(&self, scene: &Scene) -> Vec<u32> {
        let bg = &self.backgrounds[scene.background];
        let mut tokens: Vec<u32> = (0..IMAGE_TOKENS)
            .map(|i| bg.tiles[(i / GRID + i % GRID) % 2])
            .collect();
        if let Some(c) = scene.concept {
            let motif = &self.concepts[c].motif;
            let pos = &self.positions[scene.position];
            for (k, &id) in motif.iter().enumerate() {
                let (r, col) = (pos.row + k / 2, pos.col + k % 2);
                tokens[r * GRID + col] = id;
            }
        }
        tokens
    }

    pub fn render_prompt(&self, prompt: &str) -> Vec<u32> {
        self.render(&self.parse_scene(prompt))
    }

    /// Expands a template. Unused placeholders are ignored.
    pub fn fill_template(template: &str, concept: &str, background: &str, position: &str) -> String {
        template
            .replace("{concept}", concept)
            .replace("{background}", background)
            .replace("{position}", position)
    }

    /// Every prompt the grammar produces: all concept templates over all
    /// concepts, backgrounds and positions, followed by the concept-free ones.
    pub fn all_prompts(&self) -> Vec<String> {
        let mut out = Vec::new();
        for t in CONCEPT_TEMPLATES {
            for c in &self.concepts {
                for b in &self.backgrounds {
                    if t.contains("{position}") {
                        for p in &self.positions {
                            out.push(Self::fill_template(t, &c.name, &b.name, &p.name));
                        }
                    } else {
                        out.push(Self::fill_template(t, &c.name, &b.name, ""));
                    }
                }
            }
        }
        out.extend(self.empty_prompts());
        out
    }

    /// One prompt per (background, position) for `concept`, using the
    /// positioned template.
    pub fn concept_prompts(&self, concept: &str) -> Vec<String> {
        let t = CONCEPT_TEMPLATES[2];
        self.backgrounds
            .iter()
            .flat_map(|b| {
                self.positions
                    .iter()
                    .map(move |p| Self::fill_template(t, concept, &b.name, &p.name))
            })
            .collect()
    }

    pub fn empty_prompts(&self) -> Vec<String> {
        EMPTY_TEMPLATES
            .iter()
            .flat_map(|t| {
                self.backgrounds
                    .iter()
                    .map(move |b| Self::fill_template(t, "", &b.name, ""))
            })
            .collect()
    }

    /// Stable content hash, hex encoded.
    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("world serializes");
        let digest = Sha256::digest(&json);
        digest.iter().take(8).map(|b| format!("{b:02x}")).collect()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let json = serde_json::to_string_pretty(self)?;
        std::fs::write(path, json).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let world: Self = serde_json::from_str(&text)?;
        world.validate()?;
        Ok(world)
    }

    fn validate(&self) -> Result<()> {
        Codebook::new(self.codebook.entries.clone())?;
        let k = self.codebook.len() as u32;
        let ids_ok = self.concepts.iter().all(|c| c.motif.iter().all(|&i| i < k))
            && self.backgrounds.iter().all(|b| b.tiles.iter().all(|&i| i < k));
        let pos_ok = self
            .positions
            .iter()
            .all(|p| p.row + 1 < GRID && p.col + 1 < GRID);
        if !ids_ok || !pos_ok || self.backgrounds.is_empty() {
            return Err(Error::invalid("world references out-of-range ids or cells"));
        }
        Ok(())
    }
}
