//! Declarative model descriptions.

use serde::{Deserialize, Serialize};

use crate::error::{NnError, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LayerSpec {
    Conv {
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
    },
    Relu,
    MaxPool {
        kernel: usize,
        stride: usize,
    },
    /// `x + block(x)`; the block must preserve the activation shape.
    Residual(Vec<LayerSpec>),
    Flatten,
    Dense {
        nodes: usize,
    },
    Dropout {
        probability: f64,
    },
    Softmax,
}

impl LayerSpec {
    pub fn conv3(out_channels: usize) -> Self {
        Self::Conv { out_channels, kernel: 3, stride: 1, padding: 1 }
    }

    pub fn pool2() -> Self {
        Self::MaxPool { kernel: 2, stride: 2 }
    }

    pub fn dense(nodes: usize) -> Self {
        Self::Dense { nodes }
    }

    pub fn dropout(probability: f64) -> Self {
        Self::Dropout { probability }
    }

    /// Activation shape (without the batch axis) produced from `input`.
    pub fn output_shape(&self, input: &[usize]) -> Result<Vec<usize>> {
        let spatial = |what: &str| -> Result<(usize, usize, usize)> {
            match *input {
                [h, w, c] => Ok((h, w, c)),
                _ => Err(NnError::Shape(format!("{what} expects (H, W, C), got {input:?}"))),
            }
        };
        match *self {
            Self::Conv { out_channels, kernel, stride, padding } => {
                let (h, w, _) = spatial("conv")?;
                if kernel == 0 || stride == 0 || out_channels == 0 {
                    return Err(NnError::Spec("conv with zero kernel, stride or channels".into()));
                }
                if h + 2 * padding < kernel || w + 2 * padding < kernel {
                    return Err(NnError::Shape(format!("{kernel}x{kernel} conv does not fit {input:?}")));
                }
                Ok(vec![(h + 2 * padding - kernel) / stride + 1, (w + 2 * padding - kernel) / stride + 1, out_channels])
            }
            Self::MaxPool { kernel, stride } => {
                let (h, w, c) = spatial("max pool")?;
                if kernel == 0 || stride == 0 {
                    return Err(NnError::Spec("max pool with zero kernel or stride".into()));
                }
                if h < kernel || w < kernel {
                    return Err(NnError::Shape(format!("{kernel}x{kernel} pool does not fit {input:?}")));
                }
                Ok(vec![(h - kernel) / stride + 1, (w - kernel) / stride + 1, c])
            }
            Self::Residual(ref block) => {
                let mut shape = input.to_vec();
                for layer in block {
                    shape = layer.output_shape(&shape)?;
                }
                if shape != input {
                    return Err(NnError::Shape(format!("residual block maps {input:?} to {shape:?}")));
                }
                Ok(shape)
            }
            Self::Flatten => Ok(vec![input.iter().product()]),
            Self::Dense { nodes } => match *input {
                [_] if nodes > 0 => Ok(vec![nodes]),
                [_] => Err(NnError::Spec("dense layer with zero nodes".into())),
                _ => Err(NnError::Shape(format!("dense expects a flat input, got {input:?}"))),
            },
            Self::Dropout { probability } => {
                if !(0.0..1.0).contains(&probability) {
                    return Err(NnError::Spec(format!("dropout probability {probability} outside [0, 1)")));
                }
                Ok(input.to_vec())
            }
            Self::Relu | Self::Softmax => Ok(input.to_vec()),
        }
    }
}

/// Convolutional feature extractors.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Backbone {
    /// Four 3×3 conv + ReLU + 2×2 max-pool blocks with 16/32/64/128 channels.
    SmallVgg,
    /// The thirteen-conv VGG-16 layout.
    Vgg16,
    /// Conv stem followed by shape-preserving residual blocks.
    Residual,
}

impl Backbone {
    pub fn layers(&self) -> Vec<LayerSpec> {
        use LayerSpec::*;
        let vgg = |plan: &[&[usize]]| -> Vec<LayerSpec> {
            let mut layers = Vec::new();
            for block in plan {
                for &c in *block {
                    layers.push(LayerSpec::conv3(c));
                    layers.push(Relu);
                }
                layers.push(LayerSpec::pool2());
            }
            layers
        };
        match self {
            Self::SmallVgg => vgg(&[&[16], &[32], &[64], &[128]]),
            Self::Vgg16 => vgg(&[&[64, 64], &[128, 128], &[256, 256, 256], &[512, 512, 512], &[512, 512, 512]]),
            Self::Residual => {
                let mut layers = Vec::new();
                for c in [16, 32, 64, 128] {
                    layers.push(LayerSpec::conv3(c));
                    layers.push(Relu);
                    layers.push(Residual(vec![LayerSpec::conv3(c), Relu, LayerSpec::conv3(c)]));
                    layers.push(Relu);
                    layers.push(LayerSpec::pool2());
                }
                layers
            }
        }
    }
}

/// Classification heads placed after the flattened backbone output.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Head {
    /// Dense(512)+ReLU, Dropout(0.05), Dense(512)+ReLU, Dropout(0.15),
    /// Dense(classes), Softmax.
    DenseDropout,
    /// Dense(16)+ReLU, Dense(14)+ReLU, Dense(classes), Softmax.
    TwoLayer,
    /// Non-parametric vote over flattened backbone features. The spec keeps
    /// a Dense(classes)+Softmax tail so the network stays well formed; it is
    /// not trained.
    Knn { k: usize },
}

impl Head {
    pub fn layers(&self, class_count: usize) -> Vec<LayerSpec> {
        use LayerSpec::*;
        let mut layers = match self {
            Self::DenseDropout => vec![
                LayerSpec::dense(512),
                Relu,
                LayerSpec::dropout(0.05),
                LayerSpec::dense(512),
                Relu,
                LayerSpec::dropout(0.15),
            ],
            Self::TwoLayer => vec![LayerSpec::dense(16), Relu, LayerSpec::dense(14), Relu],
            Self::Knn { .. } => vec![],
        };
        layers.push(LayerSpec::dense(class_count));
        layers.push(Softmax);
        layers
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    /// `(height, width, channels)` of one input sample.
    pub input_size: (usize, usize, usize),
    pub layers: Vec<LayerSpec>,
    pub class_count: usize,
}

impl ModelSpec {
    pub fn new(input_size: (usize, usize, usize), layers: Vec<LayerSpec>, class_count: usize) -> Result<Self> {
        let spec = Self { input_size, layers, class_count };
        spec.validate()?;
        Ok(spec)
    }

    /// Backbone, flatten, then the head.
    pub fn build(
        input_size: (usize, usize, usize),
        backbone: Backbone,
        head: Head,
        class_count: usize,
    ) -> Result<Self> {
        let mut layers = backbone.layers();
        layers.push(LayerSpec::Flatten);
        layers.extend(head.layers(class_count));
        Self::new(input_size, layers, class_count)
    }

    /// Small VGG backbone with the dense/dropout head.
    pub fn default_classifier(height: usize, width: usize, class_count: usize) -> Result<Self> {
        Self::build((height, width, 3), Backbone::SmallVgg, Head::DenseDropout, class_count)
    }

    pub fn input_shape(&self) -> Vec<usize> {
        vec![self.input_size.0, self.input_size.1, self.input_size.2]
    }

    /// Per-layer output shapes (batch axis omitted).
    pub fn shapes(&self) -> Result<Vec<Vec<usize>>> {
        let mut shape = self.input_shape();
        let mut out = Vec::with_capacity(self.layers.len());
        for (i, layer) in self.layers.iter().enumerate() {
            shape = layer.output_shape(&shape).map_err(|e| NnError::Shape(format!("layer {i} ({layer:?}): {e}")))?;
            out.push(shape.clone());
        }
        Ok(out)
    }

    pub fn validate(&self) -> Result<()> {
        if self.class_count < 2 {
            return Err(NnError::Spec("need at least two classes".into()));
        }
        match self.layers.as_slice() {
            [.., LayerSpec::Dense { nodes }, LayerSpec::Softmax] if *nodes == self.class_count => {}
            _ => return Err(NnError::Spec(format!("model must end with Dense({}), Softmax", self.class_count))),
        }
        self.shapes()?;
        Ok(())
    }

    /// Index of the layer whose output feeds the final dense layer.
    pub fn feature_layer(&self) -> Result<usize> {
        let final_dense = self.layers.len() - 2;
        final_dense
            .checked_sub(1)
            .ok_or_else(|| NnError::Spec("model has no layer before its classification layer".into()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_head_matches_the_survey_classifier() {
        let spec = ModelSpec::default_classifier(224, 224, 4).unwrap();
        let head = &spec.layers[spec.layers.len() - 9..];
        assert_eq!(
            head,
            &[
                LayerSpec::Flatten,
                LayerSpec::Dense { nodes: 512 },
                LayerSpec::Relu,
                LayerSpec::Dropout { probability: 0.05 },
                LayerSpec::Dense { nodes: 512 },
                LayerSpec::Relu,
                LayerSpec::Dropout { probability: 0.15 },
                LayerSpec::Dense { nodes: 4 },
                LayerSpec::Softmax,
            ]
        );
        assert_eq!(spec.shapes().unwrap()[spec.feature_layer().unwrap()], vec![512]);
    }

    #[test]
    fn backbone_shapes() {
        let small = ModelSpec::default_classifier(32, 32, 5).unwrap();
        let shapes = small.shapes().unwrap();
        assert_eq!(shapes[11], vec![2, 2, 128]);
        let vgg = ModelSpec::build((224, 224, 3), Backbone::Vgg16, Head::DenseDropout, 4).unwrap();
        let flat = vgg.layers.iter().position(|l| *l == LayerSpec::Flatten).unwrap();
        assert_eq!(vgg.shapes().unwrap()[flat], vec![7 * 7 * 512]);
        let res = ModelSpec::build((32, 32, 3), Backbone::Residual, Head::TwoLayer, 4).unwrap();
        assert!(res.layers.iter().any(|l| matches!(l, LayerSpec::Residual(_))));
    }

    #[test]
    fn rejects_malformed_specs() {
        let flat = (4, 4, 3);
        assert!(ModelSpec::new(flat, vec![LayerSpec::Flatten, LayerSpec::dense(3)], 3).is_err());
        assert!(ModelSpec::new(flat, vec![LayerSpec::dense(3), LayerSpec::Softmax], 3).is_err());
        assert!(ModelSpec::new(
            flat,
            vec![LayerSpec::Flatten, LayerSpec::dropout(1.0), LayerSpec::dense(3), LayerSpec::Softmax],
            3
        )
        .is_err());
        assert!(ModelSpec::new(
            flat,
            vec![
                LayerSpec::Residual(vec![LayerSpec::Conv { out_channels: 2, kernel: 3, stride: 1, padding: 1 }]),
                LayerSpec::Flatten,
                LayerSpec::dense(3),
                LayerSpec::Softmax
            ],
            3
        )
        .is_err());
        let ok = ModelSpec::new(flat, vec![LayerSpec::Flatten, LayerSpec::dense(3), LayerSpec::Softmax], 3).unwrap();
        assert_eq!(ok.feature_layer().unwrap(), 0);
    }

    #[test]
    fn spec_json_round_trip() {
        let spec = ModelSpec::build((16, 16, 3), Backbone::Residual, Head::Knn { k: 3 }, 4).unwrap();
        let text = serde_json::to_string(&spec).unwrap();
        assert_eq!(serde_json::from_str::<ModelSpec>(&text).unwrap(), spec);
    }
}
