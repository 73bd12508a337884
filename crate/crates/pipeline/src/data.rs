//! Model-ready patch tensors.

use patchgrid_core::{resize_bilinear, ImageBuffer, LabeledPatch, PatchDataset, Split, Taxonomy, Tensor};

use crate::error::{PipelineError, Result};

/// Converts a patch to a `(height, width, 3)` tensor in [0, 1] at the model
/// input size. Training, evaluation and whole-frame inference all go through
/// this function.
pub fn prepare_patch(pixels: &ImageBuffer, input: (usize, usize)) -> Result<Tensor<f32>> {
    let t = pixels.to_tensor::<f64>();
    let resized = resize_bilinear(&t, input.1, input.0)?;
    Ok(resized.cast())
}

pub fn patch_id(patch: &LabeledPatch) -> String {
    format!("{}#r{}c{}", patch.source_path, patch.row, patch.col)
}

/// Labeled patches resized to the model input.
#[derive(Clone, Debug)]
pub struct PatchSet {
    pub taxonomy: Taxonomy,
    pub input: (usize, usize),
    pub tensors: Vec<Tensor<f32>>,
    pub labels: Vec<usize>,
    pub ids: Vec<String>,
}

impl PatchSet {
    pub fn empty(taxonomy: Taxonomy, input: (usize, usize)) -> Self {
        Self { taxonomy, input, tensors: Vec::new(), labels: Vec::new(), ids: Vec::new() }
    }

    pub fn from_patches<'a>(
        taxonomy: Taxonomy,
        input: (usize, usize),
        patches: impl IntoIterator<Item = &'a LabeledPatch>,
    ) -> Result<Self> {
        let mut set = Self::empty(taxonomy, input);
        for p in patches {
            set.push(prepare_patch(&p.pixels, input)?, p.label, patch_id(p))?;
        }
        Ok(set)
    }

    pub fn from_dataset(dataset: &PatchDataset, split: Split, input: (usize, usize)) -> Result<Self> {
        Self::from_patches(dataset.taxonomy, input, dataset.in_split(split))
    }

    pub fn push(&mut self, tensor: Tensor<f32>, label: usize, id: String) -> Result<()> {
        if tensor.shape() != [self.input.0, self.input.1, 3] {
            return Err(PipelineError::Data(format!(
                "patch {id} has shape {:?}, expected {:?}",
                tensor.shape(),
                [self.input.0, self.input.1, 3]
            )));
        }
        self.taxonomy.check_label(label)?;
        self.tensors.push(tensor);
        self.labels.push(label);
        self.ids.push(id);
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    /// The rows at `indices`, in that order.
    pub fn subset(&self, indices: &[usize]) -> Self {
        Self {
            taxonomy: self.taxonomy,
            input: self.input,
            tensors: indices.iter().map(|&i| self.tensors[i].clone()).collect(),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            ids: indices.iter().map(|&i| self.ids[i].clone()).collect(),
        }
    }

    /// `(N, H, W, 3)` batch of the rows at `indices`.
    pub fn batch(&self, indices: &[usize]) -> Result<Tensor<f32>> {
        let items: Vec<&Tensor<f32>> = indices.iter().map(|&i| &self.tensors[i]).collect();
        Ok(Tensor::stack(&items)?)
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.taxonomy.len()];
        for &l in &self.labels {
            counts[l] += 1;
        }
        counts
    }
}
