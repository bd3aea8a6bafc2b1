//! Multi-scale feature samples: the FMAP container, task manifests and a
//! synthetic generator.

mod fmap;
mod manifest;
mod synth;

pub use fmap::{
    encoded_len, read_fmap, read_fmap_file, write_fmap, write_fmap_with_dims, FmapFile, FMAP_MAGIC, FMAP_VERSION,
};
pub use manifest::TaskManifest;
pub use synth::{gen_synthetic, gen_synthetic_splits, SyntheticSpec};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// `(channels, height, width)` of one scale.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ScaleDims {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
}

impl ScaleDims {
    pub fn new(channels: usize, height: usize, width: usize) -> Self {
        ScaleDims {
            channels,
            height,
            width,
        }
    }

    pub fn len(&self) -> usize {
        self.channels * self.height * self.width
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// One `(C, H, W)` feature map, channel-major then row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMap {
    dims: ScaleDims,
    data: Vec<f64>,
}

impl FeatureMap {
    pub fn new(dims: ScaleDims, data: Vec<f64>) -> Result<Self> {
        if dims.is_empty() {
            return Err(Error::Contract(format!("feature map with empty dims {dims:?}")));
        }
        if dims.len() != data.len() {
            return Err(Error::Contract(format!(
                "feature map {:?} needs {} values, got {}",
                dims,
                dims.len(),
                data.len()
            )));
        }
        Ok(FeatureMap { dims, data })
    }

    pub fn dims(&self) -> ScaleDims {
        self.dims
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn at(&self, c: usize, y: usize, x: usize) -> f64 {
        let d = self.dims;
        self.data[(c * d.height + y) * d.width + x]
    }
}

/// Feature maps of one image at every scale, finest first, plus its label.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureSample {
    pub scales: Vec<FeatureMap>,
    pub label: u32,
}

impl FeatureSample {
    pub fn new(scales: Vec<FeatureMap>, label: u32) -> Result<Self> {
        let sample = FeatureSample { scales, label };
        validate_dims(&sample.dims())?;
        Ok(sample)
    }

    pub fn dims(&self) -> Vec<ScaleDims> {
        self.scales.iter().map(FeatureMap::dims).collect()
    }
}

/// Checks the scale ordering rules: at least one scale, spatial dims
/// non-increasing, each coarser grid dividing the finest.
pub fn validate_dims(dims: &[ScaleDims]) -> Result<()> {
    let Some(finest) = dims.first() else {
        return Err(Error::contract("sample has no scales"));
    };
    for (s, pair) in dims.windows(2).enumerate() {
        if pair[1].height > pair[0].height || pair[1].width > pair[0].width {
            return Err(Error::Contract(format!(
                "scale {} ({}x{}) is larger than scale {} ({}x{})",
                s + 1,
                pair[1].height,
                pair[1].width,
                s,
                pair[0].height,
                pair[0].width
            )));
        }
    }
    for (s, d) in dims.iter().enumerate() {
        if d.is_empty() {
            return Err(Error::Contract(format!("scale {s} has empty dims {d:?}")));
        }
        if finest.height % d.height != 0 || finest.width % d.width != 0 {
            return Err(Error::Contract(format!(
                "scale {s} ({}x{}) does not divide the finest scale ({}x{})",
                d.height, d.width, finest.height, finest.width
            )));
        }
    }
    Ok(())
}

/// Verifies that every sample shares `dims`.
pub fn check_homogeneous(dims: &[ScaleDims], samples: &[FeatureSample]) -> Result<()> {
    for (i, s) in samples.iter().enumerate() {
        if s.dims() != dims {
            return Err(Error::Contract(format!(
                "sample {i} has dims {:?}, expected {:?}",
                s.dims(),
                dims
            )));
        }
    }
    Ok(())
}
