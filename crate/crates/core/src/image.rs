//! Pixel grids and the codebook decoder/encoder pair.

use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::world::Codebook;

/// Side of one codebook patch in pixels.
pub const PATCH: usize = 4;

/// Square RGB image, row-major, 3 bytes per pixel.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PixelGrid {
    side: usize,
    data: Vec<u8>,
}

impl PixelGrid {
    pub fn new(side: usize, data: Vec<u8>) -> Result<Self> {
        if side == 0 || !side.is_multiple_of(PATCH) || data.len() != side * side * 3 {
            return Err(Error::invalid(format!(
                "pixel grid of side {side} needs {} bytes, got {}",
                side * side * 3,
                data.len()
            )));
        }
        Ok(Self { side, data })
    }

    pub fn side(&self) -> usize {
        self.side
    }

    /// Number of patch cells along one side.
    pub fn cells(&self) -> usize {
        self.side / PATCH
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn pixel(&self, row: usize, col: usize) -> [u8; 3] {
        let o = (row * self.side + col) * 3;
        [self.data[o], self.data[o + 1], self.data[o + 2]]
    }

    /// The `PATCH × PATCH × 3` bytes of cell `(r, c)`, row-major.
    pub fn patch(&self, r: usize, c: usize) -> Vec<u8> {
        let mut out = Vec::with_capacity(PATCH * PATCH * 3);
        for y in 0..PATCH {
            let row = r * PATCH + y;
            let start = (row * self.side + c * PATCH) * 3;
            out.extend_from_slice(&self.data[start..start + PATCH * 3]);
        }
        out
    }

    /// Mean of each channel over all pixels, scaled to `[0, 1]`.
    pub fn channel_means(&self) -> [f64; 3] {
        let mut sums = [0u64; 3];
        for px in self.data.chunks_exact(3) {
            for (s, &v) in sums.iter_mut().zip(px) {
                *s += v as u64;
            }
        }
        let n = (self.side * self.side) as f64 * 255.0;
        sums.map(|s| s as f64 / n)
    }

    /// Binary PPM (P6).
    pub fn write_ppm(&self, path: &Path) -> Result<()> {
        let mut file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        write!(file, "P6\n{} {}\n255\n", self.side, self.side)
            .and_then(|_| file.write_all(&self.data))
            .map_err(|e| Error::io(path, e))
    }
}

/// Tiles codebook patches into a `(4g) × (4g)` image; token `i` fills cell
/// `(i / g, i % g)`.
pub fn decode_image(tokens: &[u32], codebook: &Codebook) -> Result<PixelGrid> {
    let g = (tokens.len() as f64).sqrt().round() as usize;
    if tokens.is_empty() || g * g != tokens.len() {
        return Err(Error::invalid(format!(
            "token count {} is not a perfect square",
            tokens.len()
        )));
    }
    let side = g * PATCH;
    let mut data = vec![0u8; side * side * 3];
    for (i, &tok) in tokens.iter().enumerate() {
        let entry = codebook
            .entry(tok)
            .ok_or_else(|| Error::invalid(format!("token {tok} outside the codebook")))?;
        let (r, c) = (i / g, i % g);
        for y in 0..PATCH {
            let dst = ((r * PATCH + y) * side + c * PATCH) * 3;
            let src = y * PATCH * 3;
            data[dst..dst + PATCH * 3].copy_from_slice(&entry[src..src + PATCH * 3]);
        }
    }
    PixelGrid::new(side, data)
}

/// Nearest-patch encoder; exact inverse of [`decode_image`] on decoded images.
pub fn encode_image(image: &PixelGrid, codebook: &Codebook) -> Vec<u32> {
    let g = image.cells();
    (0..g * g)
        .map(|i| codebook.nearest(&image.patch(i / g, i % g)))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::world::SyntheticWorld;

    #[test]
    fn uniform_tokens_tile_one_entry() {
        let w = SyntheticWorld::new(1);
        let img = decode_image(&[5; 16], &w.codebook).unwrap();
        assert_eq!(img.side(), 16);
        for r in 0..4 {
            for c in 0..4 {
                assert_eq!(img.patch(r, c), w.codebook.entry(5).unwrap());
            }
        }
    }

    #[test]
    fn single_token_is_the_patch_itself() {
        let w = SyntheticWorld::new(1);
        let img = decode_image(&[9], &w.codebook).unwrap();
        assert_eq!(img.side(), PATCH);
        assert_eq!(img.data(), w.codebook.entry(9).unwrap());
    }

    #[test]
    fn non_square_count_rejected() {
        let w = SyntheticWorld::new(1);
        assert!(decode_image(&[0; 15], &w.codebook).is_err());
        assert!(decode_image(&[], &w.codebook).is_err());
    }

    #[test]
    fn corpus_images_round_trip() {
        let w = SyntheticWorld::new(1);
        for prompt in w.all_prompts() {
            let tokens = w.render_prompt(&prompt);
            let img = decode_image(&tokens, &w.codebook).unwrap();
            let back = encode_image(&img, &w.codebook);
            assert_eq!(back, tokens, "{prompt}");
            assert_eq!(decode_image(&back, &w.codebook).unwrap(), img);
        }
    }

    #[test]
    fn row_major_cell_layout() {
        let w = SyntheticWorld::new(1);
        let tokens: Vec<u32> = (0..16).collect();
        let img = decode_image(&tokens, &w.codebook).unwrap();
        assert_eq!(img.patch(1, 2), w.codebook.entry(6).unwrap());
    }
}
