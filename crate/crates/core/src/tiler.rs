//! Grid tiling with weak label propagation.

use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::manifest::{Manifest, Split};
use crate::raster::ImageBuffer;
use crate::taxonomy::Taxonomy;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct GridSpec {
    pub rows: u32,
    pub cols: u32,
    pub discard_top: bool,
}

impl GridSpec {
    pub fn new(rows: u32, cols: u32, discard_top: bool) -> Result<Self> {
        if rows == 0 || cols == 0 {
            return Err(Error::Invalid(format!("grid {rows}x{cols} has an empty axis")));
        }
        if discard_top && rows < 2 {
            return Err(Error::Invalid("discarding the top row needs at least 2 rows".into()));
        }
        Ok(Self { rows, cols, discard_top })
    }

    /// 5 rows × 8 columns with the top row dropped: 32 training patches per frame.
    pub const fn survey() -> Self {
        Self { rows: 5, cols: 8, discard_top: true }
    }

    /// Parses `ROWSxCOLS`, e.g. `5x8`.
    pub fn parse(text: &str, discard_top: bool) -> Result<Self> {
        let (r, c) =
            text.split_once(['x', 'X']).ok_or_else(|| Error::Invalid(format!("grid `{text}` is not ROWSxCOLS")))?;
        let parse =
            |s: &str| s.trim().parse::<u32>().map_err(|_| Error::Invalid(format!("grid `{text}` is not ROWSxCOLS")));
        Self::new(parse(r)?, parse(c)?, discard_top)
    }

    pub fn first_row(&self) -> u32 {
        u32::from(self.discard_top)
    }

    pub fn patches_per_image(&self) -> usize {
        ((self.rows - self.first_row()) * self.cols) as usize
    }

    /// `(width, height)` of every cell of a `width × height` frame.
    pub fn cell_size(&self, width: u32, height: u32) -> Result<(u32, u32)> {
        if width < self.cols || height < self.rows {
            return Err(Error::Invalid(format!(
                "{width}x{height} image is smaller than a {}x{} grid",
                self.rows, self.cols
            )));
        }
        Ok((width / self.cols, height / self.rows))
    }

    /// Pixel rectangle `(x, y, w, h)` of cell `(row, col)`.
    pub fn cell_rect(&self, width: u32, height: u32, row: u32, col: u32) -> Result<(u32, u32, u32, u32)> {
        let (pw, ph) = self.cell_size(width, height)?;
        Ok((col * pw, row * ph, pw, ph))
    }

    /// Cells that produce patches, row-major.
    pub fn cells(&self) -> impl Iterator<Item = (u32, u32)> + '_ {
        (self.first_row()..self.rows).flat_map(move |r| (0..self.cols).map(move |c| (r, c)))
    }
}

impl fmt::Display for GridSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}x{}", self.rows, self.cols)
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Tile {
    pub row: u32,
    pub col: u32,
    pub pixels: ImageBuffer,
}

/// Cuts `image` into `rows × cols` cells of `floor(W / cols) × floor(H / rows)`
/// pixels. Leftover pixels at the right and bottom edges are dropped.
pub fn tile_image(image: &ImageBuffer, grid: &GridSpec) -> Result<Vec<Tile>> {
    let (pw, ph) = grid.cell_size(image.width(), image.height())?;
    grid.cells().map(|(row, col)| Ok(Tile { row, col, pixels: image.crop(col * pw, row * ph, pw, ph)? })).collect()
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabeledPatch {
    pub pixels: ImageBuffer,
    pub label: usize,
    pub row: u32,
    pub col: u32,
    pub source_path: String,
    pub split: Split,
}

/// One line of the patch index file.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PatchIndexEntry {
    pub source_path: String,
    pub row: u32,
    pub col: u32,
    pub label: usize,
    pub split: Split,
}

impl From<&LabeledPatch> for PatchIndexEntry {
    fn from(p: &LabeledPatch) -> Self {
        Self { source_path: p.source_path.clone(), row: p.row, col: p.col, label: p.label, split: p.split }
    }
}

/// Patch index for a manifest without decoding pixels.
pub fn patch_index(manifest: &Manifest, grid: &GridSpec) -> Vec<PatchIndexEntry> {
    manifest
        .records
        .iter()
        .flat_map(|r| {
            grid.cells().map(move |(row, col)| PatchIndexEntry {
                source_path: r.image_path.clone(),
                row,
                col,
                label: r.class_label,
                split: r.split,
            })
        })
        .collect()
}

/// JSON lines, one entry per patch.
pub fn patch_index_jsonl(entries: &[PatchIndexEntry]) -> Result<String> {
    let mut out = String::new();
    for e in entries {
        out.push_str(&serde_json::to_string(e)?);
        out.push('\n');
    }
    Ok(out)
}

/// Patch counts per class, split into the train/test columns of a dataset
/// summary table.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PatchCounts {
    pub classes: Vec<String>,
    pub train: Vec<usize>,
    pub test: Vec<usize>,
    pub unassigned: Vec<usize>,
}

impl PatchCounts {
    pub fn empty(taxonomy: Taxonomy) -> Self {
        let n = taxonomy.len();
        Self {
            classes: taxonomy.names().iter().map(|s| s.to_string()).collect(),
            train: vec![0; n],
            test: vec![0; n],
            unassigned: vec![0; n],
        }
    }

    pub fn add(&mut self, label: usize, split: Split) {
        match split {
            Split::Train => self.train[label] += 1,
            Split::Test => self.test[label] += 1,
            Split::Unassigned => self.unassigned[label] += 1,
        }
    }

    pub fn total(&self) -> usize {
        self.train.iter().chain(&self.test).chain(&self.unassigned).sum()
    }
}

impl fmt::Display for PatchCounts {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let show_unassigned = self.unassigned.iter().any(|&c| c > 0);
        write!(f, "{:<12}{:>10}{:>10}", "Class", "Train", "Test")?;
        if show_unassigned {
            write!(f, "{:>12}", "Unassigned")?;
        }
        writeln!(f)?;
        for (i, name) in self.classes.iter().enumerate() {
            write!(f, "{:<12}{:>10}{:>10}", name, self.train[i], self.test[i])?;
            if show_unassigned {
                write!(f, "{:>12}", self.unassigned[i])?;
            }
            writeln!(f)?;
        }
        write!(f, "{:<12}{:>10}{:>10}", "Total", self.train.iter().sum::<usize>(), self.test.iter().sum::<usize>())?;
        if show_unassigned {
            write!(f, "{:>12}", self.unassigned.iter().sum::<usize>())?;
        }
        writeln!(f)
    }
}

#[derive(Clone, Debug)]
pub struct PatchDataset {
    pub taxonomy: Taxonomy,
    pub grid: GridSpec,
    pub patches: Vec<LabeledPatch>,
    pub counts: PatchCounts,
}

impl PatchDataset {
    pub fn len(&self) -> usize {
        self.patches.len()
    }

    pub fn is_empty(&self) -> bool {
        self.patches.is_empty()
    }

    pub fn in_split(&self, split: Split) -> impl Iterator<Item = &LabeledPatch> {
        self.patches.iter().filter(move |p| p.split == split)
    }
}

/// Tiles every manifest frame (paths relative to `root`) and labels each
/// surviving patch with its frame's class and split.
pub fn build_patch_dataset(manifest: &Manifest, root: &Path, grid: &GridSpec) -> Result<PatchDataset> {
    let mut patches = Vec::with_capacity(manifest.len() * grid.patches_per_image());
    let mut counts = PatchCounts::empty(manifest.taxonomy);
    for record in &manifest.records {
        let image = ImageBuffer::load(&root.join(&record.image_path))?;
        for tile in tile_image(&image, grid)? {
            counts.add(record.class_label, record.split);
            patches.push(LabeledPatch {
                pixels: tile.pixels,
                label: record.class_label,
                row: tile.row,
                col: tile.col,
                source_path: record.image_path.clone(),
                split: record.split,
            });
        }
    }
    Ok(PatchDataset { taxonomy: manifest.taxonomy, grid: *grid, patches, counts })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::manifest::{Density, SampleRecord};
    use proptest::prelude::*;

    fn gradient_image(w: u32, h: u32) -> ImageBuffer {
        ImageBuffer::from_fn(w, h, |x, y| [(x % 251) as u8, (y % 241) as u8, ((x * 7 + y * 3) % 256) as u8])
    }

    #[test]
    fn survey_frame_geometry() {
        let img = gradient_image(4624, 2600);
        let full = tile_image(&img, &GridSpec::new(5, 8, false).unwrap()).unwrap();
        assert_eq!(full.len(), 40);
        for t in &full {
            assert_eq!((t.pixels.width(), t.pixels.height()), (578, 520));
            assert_eq!(t.pixels.pixel(0, 0), img.pixel(t.col * 578, t.row * 520));
        }
        let kept = tile_image(&img, &GridSpec::survey()).unwrap();
        assert_eq!(kept.len(), 32);
        assert!(kept.iter().all(|t| t.row >= 1));
    }

    #[test]
    fn single_cell_is_identity() {
        let img = gradient_image(578, 520);
        let tiles = tile_image(&img, &GridSpec::new(1, 1, false).unwrap()).unwrap();
        assert_eq!(tiles.len(), 1);
        assert_eq!(tiles[0].pixels, img);
    }

    #[test]
    fn remainder_pixels_are_dropped() {
        let img = gradient_image(100, 100);
        let tiles = tile_image(&img, &GridSpec::new(3, 3, false).unwrap()).unwrap();
        assert_eq!(tiles.len(), 9);
        assert!(tiles.iter().all(|t| t.pixels.width() == 33 && t.pixels.height() == 33));
        let last = tiles.last().unwrap();
        assert_eq!((last.row, last.col), (2, 2));
        assert_eq!(last.pixels.pixel(32, 32), img.pixel(98, 98));
    }

    #[test]
    fn rejects_bad_grids() {
        assert!(GridSpec::new(0, 3, false).is_err());
        assert!(GridSpec::new(1, 3, true).is_err());
        assert!(tile_image(&gradient_image(4, 4), &GridSpec::new(5, 2, false).unwrap()).is_err());
        assert_eq!(GridSpec::parse("5x8", true).unwrap(), GridSpec::survey());
        assert!(GridSpec::parse("5by8", true).is_err());
    }

    fn write_manifest(root: &Path, labels: &[usize]) -> Manifest {
        let records = labels
            .iter()
            .enumerate()
            .map(|(i, &label)| {
                let path = format!("c{label}/a/{i}.png");
                std::fs::create_dir_all(root.join(format!("c{label}/a"))).unwrap();
                gradient_image(80, 50).save(&root.join(&path)).unwrap();
                SampleRecord {
                    image_path: path,
                    sub_area_id: format!("area{}", i % 3),
                    collection_date: None,
                    class_label: label,
                    density: if label < 3 { Density::Dense } else { Density::NotApplicable },
                    split: if i % 3 == 0 { Split::Test } else { Split::Train },
                }
            })
            .collect();
        Manifest::new(Taxonomy::four(), records).unwrap()
    }

    #[test]
    fn ten_frames_give_320_patches() {
        let dir = tempfile::tempdir().unwrap();
        let m = write_manifest(dir.path(), &[2; 10]);
        let ds = build_patch_dataset(&m, dir.path(), &GridSpec::survey()).unwrap();
        assert_eq!(ds.len(), 320);
        assert!(ds.patches.iter().all(|p| p.label == 2));
        assert_eq!(ds.counts.total(), 320);
    }

    #[test]
    fn counts_match_recount() {
        let dir = tempfile::tempdir().unwrap();
        let labels = [0, 1, 3, 3, 2, 0, 1];
        let m = write_manifest(dir.path(), &labels);
        let ds = build_patch_dataset(&m, dir.path(), &GridSpec::survey()).unwrap();
        let mut expected = PatchCounts::empty(Taxonomy::four());
        for p in &ds.patches {
            expected.add(p.label, p.split);
        }
        assert_eq!(ds.counts, expected);
        let index = patch_index(&m, &GridSpec::survey());
        assert_eq!(index, ds.patches.iter().map(PatchIndexEntry::from).collect::<Vec<_>>());
        let table = ds.counts.to_string();
        assert!(table.starts_with("Class"));
        assert!(table.contains("Background"));
    }

    #[test]
    fn empty_manifest_gives_empty_dataset() {
        let m = Manifest::new(Taxonomy::four(), vec![]).unwrap();
        let ds = build_patch_dataset(&m, Path::new("/nonexistent"), &GridSpec::survey()).unwrap();
        assert!(ds.is_empty());
        assert_eq!(ds.counts.total(), 0);
    }

    #[test]
    fn unreadable_frame_names_path() {
        let dir = tempfile::tempdir().unwrap();
        let mut m = write_manifest(dir.path(), &[0]);
        m.records[0].image_path = "missing.png".into();
        let err = build_patch_dataset(&m, dir.path(), &GridSpec::survey()).unwrap_err();
        assert!(err.to_string().contains("missing.png"));
    }

    proptest! {
        #[test]
        fn tiles_reassemble_and_do_not_overlap(
            w in 1u32..60, h in 1u32..60, rows in 1u32..6, cols in 1u32..6
        ) {
            prop_assume!(w >= cols && h >= rows);
            let img = gradient_image(w, h);
            let grid = GridSpec::new(rows, cols, false).unwrap();
            let tiles = tile_image(&img, &grid).unwrap();
            prop_assert_eq!(tiles.len(), grid.patches_per_image());
            let (pw, ph) = (w / cols, h / rows);
            let mut covered = vec![0u8; (w * h) as usize];
            for t in &tiles {
                for y in 0..ph {
                    for x in 0..pw {
                        let (gx, gy) = (t.col * pw + x, t.row * ph + y);
                        prop_assert_eq!(t.pixels.pixel(x, y), img.pixel(gx, gy));
                        covered[(gy * w + gx) as usize] += 1;
                    }
                }
            }
            prop_assert!(covered.iter().all(|&c| c <= 1));
            prop_assert_eq!(covered.iter().filter(|&&c| c == 1).count(), (pw * cols * ph * rows) as usize);
        }
    }
}
