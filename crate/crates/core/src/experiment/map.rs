//! Sliding-window classification maps: transparent stroma, green benign
//! epithelium, red tumour.

use crate::data::netpbm::{quantize, Rgba};
use crate::data::{ClassMask, Image, Label};
use crate::error::{Error, Result};

pub fn label_color(label: Label) -> [u8; 4] {
    match label {
        Label::Stroma => [0, 0, 0, 0],
        Label::BenignEpithelium => [0, 255, 0, 255],
        Label::Tumour => [255, 0, 0, 255],
    }
}

/// Top-left offsets along one axis: `floor((extent - patch) / stride) + 1`.
pub fn window_offsets(extent: usize, patch: usize, stride: usize) -> Vec<usize> {
    if patch > extent || stride == 0 {
        return Vec::new();
    }
    (0..=(extent - patch) / stride)
        .map(|i| i * stride)
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Window {
    pub top: usize,
    pub left: usize,
    pub label: Label,
}

impl Window {
    pub fn center(&self, patch: usize) -> (usize, usize) {
        (self.top + patch / 2, self.left + patch / 2)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClassificationMap {
    pub patch_size: usize,
    pub stride: usize,
    pub windows: Vec<Window>,
    pub map: Rgba,
    /// The map alpha-blended at half opacity over the H&E region.
    pub overlay: Image,
}

impl ClassificationMap {
    /// Fraction of windows whose prediction equals the mask class at the
    /// window centre.
    pub fn agreement(&self, mask: &ClassMask) -> f64 {
        if self.windows.is_empty() {
            return 0.0;
        }
        let hits = self
            .windows
            .iter()
            .filter(|w| {
                let (y, x) = w.center(self.patch_size);
                usize::from(mask.get(y, x)) == w.label.index()
            })
            .count();
        hits as f64 / self.windows.len() as f64
    }
}

/// Classifies every `patch x patch` window at the given stride and paints
/// the `stride x stride` block centred on each window's centre.
pub fn render_classification_map(
    predict: impl FnOnce(&[&Image]) -> Result<Vec<Label>>,
    region: &Image,
    patch: usize,
    stride: usize,
) -> Result<ClassificationMap> {
    if stride == 0 {
        return Err(Error::Input("stride must be positive".into()));
    }
    if region.height < patch || region.width < patch {
        return Err(Error::Input(format!(
            "region {}x{} is smaller than the {patch}x{patch} patch",
            region.height, region.width
        )));
    }
    let ys = window_offsets(region.height, patch, stride);
    let xs = window_offsets(region.width, patch, stride);
    let mut crops = Vec::with_capacity(ys.len() * xs.len());
    let mut positions = Vec::with_capacity(ys.len() * xs.len());
    for &top in &ys {
        for &left in &xs {
            crops.push(region.crop(top, left, patch, patch)?);
            positions.push((top, left));
        }
    }
    let refs: Vec<&Image> = crops.iter().collect();
    let labels = predict(&refs)?;
    if labels.len() != positions.len() {
        return Err(Error::Input(format!(
            "predictor returned {} labels for {} windows",
            labels.len(),
            positions.len()
        )));
    }
    let windows: Vec<Window> = positions
        .into_iter()
        .zip(labels)
        .map(|((top, left), label)| Window { top, left, label })
        .collect();

    let mut map = Rgba::transparent(region.width, region.height);
    let half = stride / 2;
    for w in &windows {
        let (cy, cx) = w.center(patch);
        let color = label_color(w.label);
        for y in cy.saturating_sub(half)..(cy.saturating_sub(half) + stride).min(region.height) {
            for x in cx.saturating_sub(half)..(cx.saturating_sub(half) + stride).min(region.width) {
                map.data[y * region.width + x] = color;
            }
        }
    }

    let mut overlay = region.clone();
    for y in 0..region.height {
        for x in 0..region.width {
            let [r, g, b, a] = map.get(y, x);
            if a == 0 {
                continue;
            }
            let rgb = region.pixel(y, x);
            let paint = [r, g, b].map(|c| f64::from(c) / 255.0);
            let blended =
                [0, 1, 2].map(|c| f64::from(quantize(0.5 * rgb[c] + 0.5 * paint[c])) / 255.0);
            overlay.set_pixel(y, x, blended);
        }
    }
    Ok(ClassificationMap {
        patch_size: patch,
        stride,
        windows,
        map,
        overlay,
    })
}
