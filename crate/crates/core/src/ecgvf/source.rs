use std::collections::HashSet;
use std::io::Write;
use std::process::{Command, Stdio};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::erasure::PromptPair;
use crate::error::{Error, Result};
use crate::world::SyntheticWorld;

/// Something that proposes prompt pairs for a concept.
pub trait PromptSource {
    fn name(&self) -> &str;

    fn pairs(
        &mut self,
        concept: &str,
        template: &str,
        iteration: usize,
        count: usize,
    ) -> Result<Vec<PromptPair>>;
}

fn mix(a: u64, b: u64) -> u64 {
    let mut z = a ^ b.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Offline source that fills templates from the world's grammar.
#[derive(Clone, Debug)]
pub struct SyntheticSource {
    name: String,
    seed: u64,
    surrogate: String,
    backgrounds: Vec<String>,
    positions: Vec<String>,
}

impl SyntheticSource {
    pub fn new(world: &SyntheticWorld, name: impl Into<String>, seed: u64, surrogate: &str) -> Result<Self> {
        world.concept(surrogate)?;
        Ok(Self {
            name: name.into(),
            seed,
            surrogate: surrogate.to_owned(),
            backgrounds: world.backgrounds.iter().map(|b| b.name.clone()).collect(),
            positions: world.positions.iter().map(|p| p.name.clone()).collect(),
        })
    }

    /// `n` differently seeded variants, named `grammar-0`, `grammar-1`, ...
    pub fn variants(world: &SyntheticWorld, n: usize, seed: u64, surrogate: &str) -> Result<Vec<Self>> {
        (0..n)
            .map(|i| Self::new(world, format!("grammar-{i}"), mix(seed, i as u64 + 1), surrogate))
            .collect()
    }
}

impl PromptSource for SyntheticSource {
    fn name(&self) -> &str {
        &self.name
    }

    fn pairs(
        &mut self,
        concept: &str,
        template: &str,
        iteration: usize,
        count: usize,
    ) -> Result<Vec<PromptPair>> {
        if concept == self.surrogate {
            return Err(Error::Source {
                source_name: self.name.clone(),
                message: format!("surrogate equals target `{concept}`"),
            });
        }
        let mut rng = ChaCha8Rng::seed_from_u64(mix(self.seed, iteration as u64));
        Ok((0..count)
            .map(|k| {
                let bg = self.backgrounds.choose(&mut rng).unwrap();
                let pos = self.positions.choose(&mut rng).unwrap();
                PromptPair {
                    concept: concept.to_owned(),
                    target_prompt: SyntheticWorld::fill_template(template, concept, bg, pos),
                    surrogate_prompt: SyntheticWorld::fill_template(
                        template,
                        &self.surrogate,
                        bg,
                        pos,
                    ),
                    source: self.name.clone(),
                    iteration,
                    seed: mix(self.seed ^ iteration as u64, k as u64),
                }
            })
            .collect())
    }
}

/// Moves one plain-text request to an endpoint and returns its reply.
pub trait Transport {
    fn exchange(&mut self, request: &str) -> std::result::Result<String, String>;
}

/// Runs a local program with the request on stdin and reads stdout.
#[derive(Clone, Debug)]
pub struct CommandTransport {
    pub program: String,
    pub args: Vec<String>,
}

impl Transport for CommandTransport {
    fn exchange(&mut self, request: &str) -> std::result::Result<String, String> {
        let mut child = Command::new(&self.program)
            .args(&self.args)
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .stderr(Stdio::piped())
            .spawn()
            .map_err(|e| format!("cannot start `{}`: {e}", self.program))?;
        child
            .stdin
            .take()
            .expect("stdin is piped")
            .write_all(request.as_bytes())
            .map_err(|e| e.to_string())?;
        let out = child.wait_with_output().map_err(|e| e.to_string())?;
        if !out.status.success() {
            return Err(format!(
                "`{}` exited with {}: {}",
                self.program,
                out.status,
                String::from_utf8_lossy(&out.stderr).trim()
            ));
        }
        String::from_utf8(out.stdout).map_err(|_| "reply is not UTF-8".to_string())
    }
}

/// Source backed by an external text endpoint.
///
/// Request:
///
/// ```text
/// concept: <name>
/// template: <template>
/// iteration: <n>
/// count: <n>
/// ```
///
/// The reply is a numbered list, one pair per line, target and surrogate
/// separated by `=>`, `|` or a tab. Numbering, quotes and blank or malformed
/// lines are tolerated.
pub struct EndpointSource<T> {
    name: String,
    transport: T,
    seed: u64,
}

impl<T: Transport> EndpointSource<T> {
    pub fn new(name: impl Into<String>, transport: T, seed: u64) -> Self {
        Self {
            name: name.into(),
            transport,
            seed,
        }
    }
}

pub fn format_request(concept: &str, template: &str, iteration: usize, count: usize) -> String {
    format!("concept: {concept}\ntemplate: {template}\niteration: {iteration}\ncount: {count}\n")
}

/// Extracts `(target, surrogate)` pairs from a numbered list.
pub fn parse_reply(reply: &str) -> Vec<(String, String)> {
    let clean = |s: &str| {
        s.trim()
            .trim_matches(|c| c == '"' || c == '\'' || c == '`')
            .split_whitespace()
            .collect::<Vec<_>>()
            .join(" ")
    };
    reply
        .lines()
        .filter_map(|line| {
            let line = line.trim();
            let body = line.trim_start_matches(|c: char| c.is_ascii_digit());
            let body = if body.len() < line.len() {
                body.trim_start_matches(['.', ')', ':']).trim_start()
            } else {
                body.trim_start_matches(['-', '*']).trim_start()
            };
            let (a, b) = ["=>", "|", "\t"]
                .iter()
                .find_map(|sep| body.split_once(sep))?;
            let (a, b) = (clean(a), clean(b));
            (!a.is_empty() && !b.is_empty()).then_some((a, b))
        })
        .collect()
}

impl<T: Transport> PromptSource for EndpointSource<T> {
    fn name(&self) -> &str {
        &self.name
    }

    fn pairs(
        &mut self,
        concept: &str,
        template: &str,
        iteration: usize,
        count: usize,
    ) -> Result<Vec<PromptPair>> {
        let fail = |message: String| Error::Source {
            source_name: self.name.clone(),
            message,
        };
        let reply = self
            .transport
            .exchange(&format_request(concept, template, iteration, count))
            .map_err(fail)?;
        let pairs: Vec<PromptPair> = parse_reply(&reply)
            .into_iter()
            .filter(|(tar, sur)| {
                tar.split_whitespace().any(|w| w == concept)
                    && !sur.split_whitespace().any(|w| w == concept)
            })
            .take(count)
            .enumerate()
            .map(|(k, (tar, sur))| PromptPair {
                concept: concept.to_owned(),
                target_prompt: tar,
                surrogate_prompt: sur,
                source: self.name.clone(),
                iteration,
                seed: mix(self.seed ^ iteration as u64, k as u64),
            })
            .collect();
        if pairs.is_empty() {
            return Err(Error::Source {
                source_name: self.name.clone(),
                message: "reply contained no usable pairs".into(),
            });
        }
        Ok(pairs)
    }
}

/// Collects `iterations × count` pairs from every source, cycling through
/// `templates` by iteration, and drops repeated `(target, surrogate)` prompts.
pub fn generate_pairs(
    sources: &mut [&mut dyn PromptSource],
    concept: &str,
    templates: &[&str],
    iterations: usize,
    count: usize,
) -> Result<Vec<PromptPair>> {
    if count == 0 {
        return Err(Error::invalid("per-iteration count must be at least 1"));
    }
    if templates.is_empty() {
        return Err(Error::invalid("no templates given"));
    }
    let mut seen = HashSet::new();
    let mut out = Vec::new();
    for source in sources.iter_mut() {
        for it in 0..iterations {
            let template = templates[it % templates.len()];
            for pair in source.pairs(concept, template, it, count)? {
                if seen.insert((pair.target_prompt.clone(), pair.surrogate_prompt.clone())) {
                    out.push(pair);
                }
            }
        }
    }
    if out.is_empty() {
        return Err(Error::invalid(format!("no prompt pairs produced for `{concept}`")));
    }
    Ok(out)
}
