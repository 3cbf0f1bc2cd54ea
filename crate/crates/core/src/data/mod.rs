//! Paired-stain patch datasets: types, image I/O, sampling, augmentation
//! and the procedural tissue generator.

pub mod augment;
pub mod color;
pub mod manifest;
pub mod netpbm;
pub mod sampling;
pub mod synthetic;

use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use crate::error::{Error, Result};

pub use augment::{augment, AugmentParams, AugmentRanges};
pub use color::{hsv_to_rgb, rgb_to_hsv};
pub use manifest::{load_manifest, save_manifest, MANIFEST_HEADER};
pub use sampling::{
    balanced_counts, center_pixel_label, sample_balanced, sample_random, TISSUE_RATIOS,
};
pub use synthetic::{generate_region, generate_synthetic, SyntheticConfig, SyntheticRegion};

/// Metadata default: pixel spacing of the source patches, in micrometres.
pub const DEFAULT_PIXEL_RESOLUTION_UM: f64 = 0.96;

/// Tissue class. The discriminant is the class index used everywhere.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Label {
    Stroma = 0,
    BenignEpithelium = 1,
    Tumour = 2,
}

impl Label {
    pub const ALL: [Label; 3] = [Label::Stroma, Label::BenignEpithelium, Label::Tumour];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Result<Label> {
        Label::ALL
            .get(i)
            .copied()
            .ok_or_else(|| Error::Input(format!("class index {i} is not one of 0, 1, 2")))
    }

    /// Tumour versus everything else.
    pub fn is_tumour(self) -> bool {
        self == Label::Tumour
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Label::Stroma => "stroma",
            Label::BenignEpithelium => "benign",
            Label::Tumour => "tumour",
        }
    }
}

impl fmt::Display for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Label {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "stroma" | "0" => Ok(Label::Stroma),
            "benign" | "benign_epithelium" | "benign epithelium" | "1" => {
                Ok(Label::BenignEpithelium)
            }
            "tumour" | "tumor" | "2" => Ok(Label::Tumour),
            other => Err(Error::Input(format!("unknown label {other:?}"))),
        }
    }
}

/// Which stain of a pair to read.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Stain {
    He,
    Ihc,
}

impl fmt::Display for Stain {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Stain::He => "he",
            Stain::Ihc => "ihc",
        })
    }
}

impl FromStr for Stain {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "he" | "h&e" => Ok(Stain::He),
            "ihc" => Ok(Stain::Ihc),
            other => Err(Error::Config(format!(
                "unknown stain {other:?} (expected he or ihc)"
            ))),
        }
    }
}

/// Planar (`C x H x W`) image with values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<f64>,
}

impl Image {
    pub fn new(channels: usize, height: usize, width: usize, data: Vec<f64>) -> Result<Image> {
        if data.len() != channels * height * width {
            return Err(Error::Input(format!(
                "image {channels}x{height}x{width} needs {} values, got {}",
                channels * height * width,
                data.len()
            )));
        }
        Ok(Image {
            channels,
            height,
            width,
            data,
        })
    }

    pub fn filled(channels: usize, height: usize, width: usize, value: f64) -> Image {
        Image {
            channels,
            height,
            width,
            data: vec![value; channels * height * width],
        }
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        (self.channels, self.height, self.width)
    }

    pub fn get(&self, c: usize, y: usize, x: usize) -> f64 {
        self.data[(c * self.height + y) * self.width + x]
    }

    pub fn set(&mut self, c: usize, y: usize, x: usize, v: f64) {
        self.data[(c * self.height + y) * self.width + x] = v;
    }

    pub fn pixel(&self, y: usize, x: usize) -> [f64; 3] {
        [self.get(0, y, x), self.get(1, y, x), self.get(2, y, x)]
    }

    pub fn set_pixel(&mut self, y: usize, x: usize, rgb: [f64; 3]) {
        for (c, v) in rgb.into_iter().enumerate() {
            self.set(c, y, x, v);
        }
    }

    pub fn in_unit_range(&self) -> bool {
        self.data.iter().all(|v| (0.0..=1.0).contains(v))
    }

    /// Copies the `size x size` window whose top-left corner is `(top, left)`.
    pub fn crop(&self, top: usize, left: usize, height: usize, width: usize) -> Result<Image> {
        if top + height > self.height || left + width > self.width {
            return Err(Error::Input(format!(
                "crop {height}x{width} at ({top}, {left}) exceeds image {}x{}",
                self.height, self.width
            )));
        }
        let mut data = Vec::with_capacity(self.channels * height * width);
        for c in 0..self.channels {
            for y in top..top + height {
                let row = (c * self.height + y) * self.width;
                data.extend_from_slice(&self.data[row + left..row + left + width]);
            }
        }
        Image::new(self.channels, height, width, data)
    }

    pub fn flip_horizontal(&mut self) {
        let w = self.width;
        for row in self.data.chunks_exact_mut(w) {
            row.reverse();
        }
    }

    pub fn flip_vertical(&mut self) {
        let (h, w) = (self.height, self.width);
        for plane in self.data.chunks_exact_mut(h * w) {
            for y in 0..h / 2 {
                let (top, bottom) = plane.split_at_mut((h - 1 - y) * w);
                top[y * w..(y + 1) * w].swap_with_slice(&mut bottom[..w]);
            }
        }
    }
}

/// Per-pixel class indices, row-major `H x W`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ClassMask {
    pub height: usize,
    pub width: usize,
    pub data: Vec<u8>,
}

impl ClassMask {
    pub fn new(height: usize, width: usize, data: Vec<u8>) -> Result<ClassMask> {
        if data.len() != height * width {
            return Err(Error::Input(format!(
                "mask {height}x{width} needs {} entries, got {}",
                height * width,
                data.len()
            )));
        }
        Ok(ClassMask {
            height,
            width,
            data,
        })
    }

    pub fn get(&self, y: usize, x: usize) -> u8 {
        self.data[y * self.width + x]
    }

    pub fn crop(&self, top: usize, left: usize, height: usize, width: usize) -> Result<ClassMask> {
        if top + height > self.height || left + width > self.width {
            return Err(Error::Input(format!(
                "crop {height}x{width} at ({top}, {left}) exceeds mask {}x{}",
                self.height, self.width
            )));
        }
        let data = (top..top + height)
            .flat_map(|y| {
                self.data[y * self.width + left..y * self.width + left + width]
                    .iter()
                    .copied()
            })
            .collect();
        ClassMask::new(height, width, data)
    }
}

/// One registered H&E / IHC patch pair. Pixel buffers are shared, so
/// cloning a record (e.g. when sampling subsets) is cheap.
#[derive(Clone, Debug, PartialEq)]
pub struct PatchRecord {
    pub he_image: Arc<Image>,
    pub ihc_image: Option<Arc<Image>>,
    pub label: Option<Label>,
    pub mask: Option<Arc<ClassMask>>,
    pub source_id: String,
    pub pixel_resolution_um: f64,
}

impl PatchRecord {
    pub fn new(he_image: Image, source_id: impl Into<String>) -> PatchRecord {
        PatchRecord {
            he_image: Arc::new(he_image),
            ihc_image: None,
            label: None,
            mask: None,
            source_id: source_id.into(),
            pixel_resolution_um: DEFAULT_PIXEL_RESOLUTION_UM,
        }
    }

    pub fn image(&self, stain: Stain) -> Option<&Image> {
        match stain {
            Stain::He => Some(&self.he_image),
            Stain::Ihc => self.ihc_image.as_deref(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if let Some(ihc) = &self.ihc_image {
            if ihc.dims() != self.he_image.dims() {
                return Err(Error::Input(format!(
                    "{}: H&E {:?} and IHC {:?} differ in shape",
                    self.source_id,
                    self.he_image.dims(),
                    ihc.dims()
                )));
            }
        }
        if !self.he_image.in_unit_range()
            || !self.ihc_image.as_ref().is_none_or(|i| i.in_unit_range())
        {
            return Err(Error::Input(format!(
                "{}: pixel values outside [0, 1]",
                self.source_id
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SetRole {
    /// Pool that subsets are drawn from; labels present where known.
    Source,
    /// Unlabelled pretraining set.
    RandomUnlabeled,
    /// Labelled set with fixed class proportions.
    BalancedLabeled,
    Test,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PatchSet {
    pub records: Vec<PatchRecord>,
    pub role: SetRole,
}

impl PatchSet {
    pub fn new(records: Vec<PatchRecord>, role: SetRole) -> Result<PatchSet> {
        let set = PatchSet { records, role };
        set.validate()?;
        Ok(set)
    }

    pub fn empty(role: SetRole) -> PatchSet {
        PatchSet {
            records: Vec::new(),
            role,
        }
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        if matches!(self.role, SetRole::BalancedLabeled | SetRole::Test) {
            if let Some(r) = self.records.iter().find(|r| r.label.is_none()) {
                return Err(Error::Input(format!(
                    "{} has no label but the set requires labels",
                    r.source_id
                )));
            }
        }
        Ok(())
    }

    pub fn labels(&self) -> Result<Vec<Label>> {
        self.records
            .iter()
            .map(|r| {
                r.label
                    .ok_or_else(|| Error::Input(format!("{} is unlabelled", r.source_id)))
            })
            .collect()
    }

    pub fn class_counts(&self) -> [usize; 3] {
        let mut counts = [0; 3];
        for l in self.records.iter().filter_map(|r| r.label) {
            counts[l.index()] += 1;
        }
        counts
    }

    pub fn has_stain(&self, stain: Stain) -> bool {
        self.records.iter().all(|r| r.image(stain).is_some())
    }

    pub fn patch_size(&self) -> Option<usize> {
        self.records.first().map(|r| r.he_image.height)
    }

    /// Subset by position, keeping the role.
    pub fn select(&self, indices: &[usize], role: SetRole) -> PatchSet {
        PatchSet {
            records: indices.iter().map(|&i| self.records[i].clone()).collect(),
            role,
        }
    }
}
