//! Shared domain vocabulary: tiles, masks, predictions and their validity rules.

use serde::{Deserialize, Serialize};

/// Sentinel label for pixels excluded from supervision and scoring.
pub const IGNORE: u8 = 255;

/// Which collection a tile belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Location {
    Source,
    Target,
}

/// Binary domain label fed to a discriminator loss. The semantics depend on
/// the flow: for the feature flow `Source` means source location, for the
/// scale flow it means source scale.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DomainLabel {
    /// z = 0
    Target,
    /// z = 1
    Source,
}

impl DomainLabel {
    pub fn z(self) -> f64 {
        match self {
            DomainLabel::Target => 0.0,
            DomainLabel::Source => 1.0,
        }
    }
}

/// Dense C x H x W float raster, row-major within each channel.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Raster {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<f32>,
}

impl Raster {
    pub fn new(channels: usize, height: usize, width: usize, data: Vec<f32>) -> Self {
        assert_eq!(data.len(), channels * height * width, "raster data length");
        Raster { channels, height, width, data }
    }

    pub fn zeros(channels: usize, height: usize, width: usize) -> Self {
        Raster { channels, height, width, data: vec![0.0; channels * height * width] }
    }

    pub fn constant(channels: usize, height: usize, width: usize, value: f32) -> Self {
        Raster { channels, height, width, data: vec![value; channels * height * width] }
    }

    #[inline]
    pub fn at(&self, c: usize, y: usize, x: usize) -> f32 {
        self.data[(c * self.height + y) * self.width + x]
    }

    #[inline]
    pub fn at_mut(&mut self, c: usize, y: usize, x: usize) -> &mut f32 {
        &mut self.data[(c * self.height + y) * self.width + x]
    }

    /// One channel as a contiguous slice.
    pub fn channel(&self, c: usize) -> &[f32] {
        let plane = self.height * self.width;
        &self.data[c * plane..(c + 1) * plane]
    }

    pub fn channel_mut(&mut self, c: usize) -> &mut [f32] {
        let plane = self.height * self.width;
        &mut self.data[c * plane..(c + 1) * plane]
    }
}

/// One image tile with its ground sample distance and location tag.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tile {
    /// 3-channel raster, values in [0, 1].
    pub pixels: Raster,
    /// Meters per pixel.
    pub gsd_m: f64,
    pub location: Location,
    pub id: String,
}

impl Tile {
    pub fn height(&self) -> usize {
        self.pixels.height
    }

    pub fn width(&self) -> usize {
        self.pixels.width
    }
}

/// Integer class raster paired with a tile.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SegMask {
    /// H x W labels, each in [0, num_classes) or [`IGNORE`].
    pub labels: Vec<u8>,
    pub height: usize,
    pub width: usize,
    pub num_classes: usize,
}

impl SegMask {
    pub fn new(labels: Vec<u8>, height: usize, width: usize, num_classes: usize) -> Self {
        assert_eq!(labels.len(), height * width, "mask label count");
        SegMask { labels, height, width, num_classes }
    }

    #[inline]
    pub fn at(&self, y: usize, x: usize) -> u8 {
        self.labels[y * self.width + x]
    }

    /// Labels that violate the class range.
    pub fn invalid_labels(&self) -> Vec<u8> {
        let mut bad: Vec<u8> = self
            .labels
            .iter()
            .copied()
            .filter(|&l| l != IGNORE && l as usize >= self.num_classes)
            .collect();
        bad.sort_unstable();
        bad.dedup();
        bad
    }
}

/// Per-pixel class probability raster produced by the segmentation network.
#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    /// K x H x W probabilities; each pixel's channel values sum to 1.
    pub probs: Raster,
    pub source_tile_id: String,
}

impl Prediction {
    pub fn num_classes(&self) -> usize {
        self.probs.channels
    }

    /// Per-pixel argmax with ties broken toward the lowest class index.
    pub fn argmax_mask(&self) -> SegMask {
        let (k, h, w) = (self.probs.channels, self.probs.height, self.probs.width);
        let mut labels = vec![0u8; h * w];
        for p in 0..h * w {
            let mut best = 0usize;
            let mut best_v = self.probs.data[p];
            for c in 1..k {
                let v = self.probs.data[c * h * w + p];
                if v > best_v {
                    best_v = v;
                    best = c;
                }
            }
            labels[p] = best as u8;
        }
        SegMask::new(labels, h, w, k)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
}

/// An ordered tile collection, optionally with one mask per tile.
///
/// All tiles in a dataset share a GSD and location: overhead collections have
/// uniform ground sample distance.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub tiles: Vec<Tile>,
    pub masks: Option<Vec<SegMask>>,
    pub split: Split,
}

impl Dataset {
    pub fn gsd_m(&self) -> Option<f64> {
        self.tiles.first().map(|t| t.gsd_m)
    }

    pub fn location(&self) -> Option<Location> {
        self.tiles.first().map(|t| t.location)
    }

    /// Structural violations, empty if the dataset is well formed.
    pub fn validate(&self) -> Vec<String> {
        let mut v = Vec::new();
        for t in &self.tiles {
            for msg in validate_tile(t) {
                v.push(format!("tile {}: {msg}", t.id));
            }
        }
        if let (Some(g), Some(loc)) = (self.gsd_m(), self.location()) {
            for t in &self.tiles {
                if t.gsd_m != g {
                    v.push(format!("tile {}: gsd_m {} differs from dataset gsd_m {}", t.id, t.gsd_m, g));
                }
                if t.location != loc {
                    v.push(format!("tile {}: location differs within dataset", t.id));
                }
            }
        }
        if let Some(masks) = &self.masks {
            if masks.len() != self.tiles.len() {
                v.push(format!("{} masks for {} tiles", masks.len(), self.tiles.len()));
            }
            for (t, m) in self.tiles.iter().zip(masks) {
                if (m.height, m.width) != (t.height(), t.width()) {
                    v.push(format!(
                        "tile {}: mask {}x{} does not match tile {}x{}",
                        t.id,
                        m.height,
                        m.width,
                        t.height(),
                        t.width()
                    ));
                }
            }
        }
        v
    }
}

/// Check every tile invariant; returns one message per violated rule.
/// Validation never fails, it only reports.
pub fn validate_tile(tile: &Tile) -> Vec<String> {
    let mut v = Vec::new();
    if tile.pixels.channels != 3 {
        v.push(format!("pixels must have 3 channels, got {}", tile.pixels.channels));
    }
    if tile.height() < 8 || tile.width() < 8 {
        v.push(format!("tile must be at least 8x8, got {}x{}", tile.height(), tile.width()));
    }
    if tile.pixels.data.iter().any(|p| !p.is_finite()) {
        v.push("pixels must be finite".to_string());
    } else if tile.pixels.data.iter().any(|&p| !(0.0..=1.0).contains(&p)) {
        v.push("pixels must lie in [0, 1]".to_string());
    }
    if !(tile.gsd_m > 0.0) || !tile.gsd_m.is_finite() {
        v.push("gsd_m must be > 0".to_string());
    }
    v
}

#[derive(Debug, thiserror::Error)]
pub enum TypeError {
    #[error("mask contains labels {labels:?} >= num_classes {num_classes}")]
    LabelOutOfRange { labels: Vec<u8>, num_classes: usize },
}

/// Expand a mask into a K x H x W one-hot raster. IGNORE pixels are all-zero.
pub fn one_hot(mask: &SegMask) -> Result<Raster, TypeError> {
    let bad = mask.invalid_labels();
    if !bad.is_empty() {
        return Err(TypeError::LabelOutOfRange { labels: bad, num_classes: mask.num_classes });
    }
    let (k, h, w) = (mask.num_classes, mask.height, mask.width);
    let mut out = Raster::zeros(k, h, w);
    for (p, &l) in mask.labels.iter().enumerate() {
        if l != IGNORE {
            out.data[l as usize * h * w + p] = 1.0;
        }
    }
    Ok(out)
}

/// Convenience constructor for a uniform-valued test tile.
pub fn constant_tile(id: &str, size: usize, value: f32, gsd_m: f64, location: Location) -> Tile {
    Tile {
        pixels: Raster::constant(3, size, size, value),
        gsd_m,
        location,
        id: id.to_string(),
    }
}
