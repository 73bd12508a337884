//! Whole-frame inference and the color-coded overlay.

use patchgrid_core::tiler::tile_image;
use patchgrid_core::{GridSpec, ImageBuffer, Taxonomy, TaxonomyMode, Tensor};
use serde::{Deserialize, Serialize};

use crate::data::prepare_patch;
use crate::error::{PipelineError, Result};
use crate::traineval::{argmax, Classifier};

pub const DEFAULT_ALPHA: f64 = 0.35;

pub const YELLOW: [u8; 3] = [255, 255, 0];
pub const RED: [u8; 3] = [255, 0, 0];
pub const BLUE: [u8; 3] = [0, 0, 255];
pub const PINK: [u8; 3] = [255, 192, 203];
pub const CYAN: [u8; 3] = [0, 255, 255];

/// Class colors (opaque RGB) and the tint opacity.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Palette {
    pub colors: Vec<[u8; 3]>,
    pub alpha: f64,
}

impl Palette {
    /// Strappy yellow, Ferny red, Rounded blue, then Background pink, or
    /// Substrate pink and Water cyan.
    pub fn for_taxonomy(mode: TaxonomyMode) -> Self {
        let colors = match mode {
            TaxonomyMode::Four => vec![YELLOW, RED, BLUE, PINK],
            TaxonomyMode::Five => vec![YELLOW, RED, BLUE, PINK, CYAN],
        };
        Self { colors, alpha: DEFAULT_ALPHA }
    }

    pub fn with_alpha(mut self, alpha: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&alpha) {
            return Err(PipelineError::Config(format!("overlay alpha {alpha} outside [0, 1]")));
        }
        self.alpha = alpha;
        Ok(self)
    }

    /// Class whose color is exactly `rgb`.
    pub fn decode(&self, rgb: [u8; 3]) -> Option<usize> {
        self.colors.iter().position(|&c| c == rgb)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CellPrediction {
    pub class: usize,
    pub probabilities: Vec<f32>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LabelCell {
    pub row: u32,
    pub col: u32,
    /// `None` for cells in a discarded row.
    pub prediction: Option<CellPrediction>,
}

/// Per-cell predictions for one frame, row-major over the whole grid.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LabelGrid {
    pub width: u32,
    pub height: u32,
    pub grid: GridSpec,
    pub taxonomy: TaxonomyMode,
    pub cells: Vec<LabelCell>,
}

impl LabelGrid {
    pub fn cell(&self, row: u32, col: u32) -> &LabelCell {
        &self.cells[(row * self.grid.cols + col) as usize]
    }

    /// Predicted class per cell, `None` where skipped.
    pub fn classes(&self) -> Vec<Option<usize>> {
        self.cells.iter().map(|c| c.prediction.as_ref().map(|p| p.class)).collect()
    }
}

/// Classifies every grid cell of `image` in evaluation mode. The top row is
/// skipped only when `grid.discard_top` is set.
pub fn classify_frame<C: Classifier>(
    model: &C,
    image: &ImageBuffer,
    grid: &GridSpec,
    input: (usize, usize),
) -> Result<LabelGrid> {
    let tiles = tile_image(image, grid)?;
    let taxonomy: Taxonomy = model.taxonomy();
    let mut cells: Vec<LabelCell> = (0..grid.rows)
        .flat_map(|row| (0..grid.cols).map(move |col| LabelCell { row, col, prediction: None }))
        .collect();
    let prepared = tiles.iter().map(|t| prepare_patch(&t.pixels, input)).collect::<Result<Vec<_>>>()?;
    let c = taxonomy.len();
    for (chunk_tiles, chunk) in tiles.chunks(32).zip(prepared.chunks(32)) {
        let batch = Tensor::stack(&chunk.iter().collect::<Vec<_>>())?;
        let probs = model.probabilities(&batch)?;
        if probs.shape() != [chunk.len(), c] {
            return Err(PipelineError::TaxonomyMismatch {
                model: format!("output shape {:?}", probs.shape()),
                data: format!("{:?}", taxonomy.mode()),
            });
        }
        for (tile, row) in chunk_tiles.iter().zip(probs.data().chunks(c)) {
            cells[(tile.row * grid.cols + tile.col) as usize].prediction =
                Some(CellPrediction { class: argmax(row), probabilities: row.to_vec() });
        }
    }
    Ok(LabelGrid { width: image.width(), height: image.height(), grid: *grid, taxonomy: taxonomy.mode(), cells })
}

fn blend(c: u8, p: u8, alpha: f64) -> u8 {
    ((1.0 - alpha) * c as f64 + alpha * p as f64).round() as u8
}

/// Tints every predicted cell with its class color and draws a 1-pixel
/// opaque border in the same color. Nothing is drawn at alpha 0.
pub fn render_overlay(image: &ImageBuffer, labels: &LabelGrid, palette: &Palette) -> Result<ImageBuffer> {
    if (image.width(), image.height()) != (labels.width, labels.height) {
        return Err(PipelineError::Data(format!(
            "labels are for a {}x{} frame, image is {}x{}",
            labels.width,
            labels.height,
            image.width(),
            image.height()
        )));
    }
    let classes = Taxonomy::new(labels.taxonomy).len();
    if palette.colors.len() < classes {
        return Err(PipelineError::Config(format!(
            "palette has {} colors for {classes} classes",
            palette.colors.len()
        )));
    }
    let mut out = image.clone();
    if palette.alpha == 0.0 {
        return Ok(out);
    }
    for cell in &labels.cells {
        let Some(pred) = &cell.prediction else { continue };
        let color = palette.colors[pred.class];
        let (x0, y0, w, h) = labels.grid.cell_rect(image.width(), image.height(), cell.row, cell.col)?;
        for y in y0..y0 + h {
            for x in x0..x0 + w {
                let border = x == x0 || y == y0 || x == x0 + w - 1 || y == y0 + h - 1;
                let rgb = if border {
                    color
                } else {
                    let c = image.pixel(x, y);
                    [
                        blend(c[0], color[0], palette.alpha),
                        blend(c[1], color[1], palette.alpha),
                        blend(c[2], color[2], palette.alpha),
                    ]
                };
                out.put_pixel(x, y, rgb);
            }
        }
    }
    Ok(out)
}
