//! Procedural stand-in for registered H&E / IHC tissue patches.
//!
//! Each patch gets a small region layout (a weighted Voronoi partition with
//! the centre region's class drawn from the tissue field ratio) and is
//! rendered with one texture per class:
//!
//! * stroma: low-frequency fibrous pink noise with sparse nuclei,
//! * benign epithelium: glands drawn as lumen + epithelial ring,
//! * tumour: dense high-frequency purple speckle.
//!
//! The IHC image shares the geometry but recolours epithelium brown on a
//! blue counterstain, so it carries a stronger class signal than H&E.
//! Patches are grouped into slides which share an H&E stain cast.

use rand::Rng as _;

use super::netpbm::quantize;
use super::sampling::center_pixel_label;
use super::{ClassMask, Image, Label, PatchRecord, PatchSet, SetRole};
use crate::error::{Error, Result};
use crate::rng::{derive_seed, derive_seed_indexed, rng, Rng};

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticConfig {
    pub patch_size: usize,
    pub train_count: usize,
    pub test_count: usize,
    /// Probability of each class at a patch centre.
    pub field_ratios: [f64; 3],
    /// Probability that a patch contains regions of other classes.
    pub mix_probability: f64,
    pub patches_per_slide: usize,
    /// Maximum per-channel multiplicative stain cast between slides.
    pub stain_variation: f64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        SyntheticConfig {
            patch_size: 64,
            train_count: 4500,
            test_count: 1500,
            field_ratios: [0.35, 0.25, 0.40],
            mix_probability: 0.85,
            patches_per_slide: 50,
            stain_variation: 0.25,
        }
    }
}

impl SyntheticConfig {
    pub fn validate(&self) -> Result<()> {
        let s = self.patch_size;
        if s < 4 || !s.is_power_of_two() {
            return Err(Error::Config(format!(
                "patch size must be a power of two, got {s}"
            )));
        }
        if self
            .field_ratios
            .iter()
            .any(|r| !(r.is_finite() && *r >= 0.0))
            || self.field_ratios.iter().sum::<f64>() <= 0.0
        {
            return Err(Error::Config(format!(
                "invalid field ratios {:?}",
                self.field_ratios
            )));
        }
        if !(0.0..=1.0).contains(&self.mix_probability) {
            return Err(Error::Config("mix probability must lie in [0, 1]".into()));
        }
        if self.patches_per_slide == 0 {
            return Err(Error::Config("patches per slide must be positive".into()));
        }
        Ok(())
    }
}

/// A large field of view with a ground-truth mask, for map rendering.
#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticRegion {
    pub he_image: Image,
    pub ihc_image: Image,
    pub mask: ClassMask,
}

/// Returns `(train pool, test pool)`. Both are labelled from the centre
/// pixel and carry masks; the train pool has role `Source`.
pub fn generate_synthetic(config: &SyntheticConfig, seed: u64) -> Result<(PatchSet, PatchSet)> {
    config.validate()?;
    let train = generate_split(config, seed, "train", config.train_count, SetRole::Source)?;
    let test = generate_split(config, seed, "test", config.test_count, SetRole::Test)?;
    Ok((train, test))
}

fn generate_split(
    config: &SyntheticConfig,
    seed: u64,
    split: &str,
    count: usize,
    role: SetRole,
) -> Result<PatchSet> {
    let mut records = Vec::with_capacity(count);
    for i in 0..count {
        let slide = (i / config.patches_per_slide) as u64;
        let cast = SlideCast::sample(
            derive_seed_indexed(seed, &format!("{split}.slide"), slide),
            config.stain_variation,
        );
        let mut r = rng(derive_seed_indexed(
            seed,
            &format!("{split}.patch"),
            i as u64,
        ));
        let layout = Layout::sample(&mut r, config);
        let (he, ihc) = render(&layout, &cast, config.patch_size);
        let label = center_pixel_label(&layout.mask)?;
        let mut record = PatchRecord::new(he, format!("{split}-{i:06}"));
        record.ihc_image = Some(ihc.into());
        record.mask = Some(layout.mask.into());
        record.label = Some(label);
        records.push(record);
    }
    PatchSet::new(records, role)
}

/// Left half stroma, right half tumour.
pub fn generate_region(width: usize, height: usize, seed: u64) -> Result<SyntheticRegion> {
    if width < 2 || height < 1 {
        return Err(Error::Input(format!(
            "region {width}x{height} is too small"
        )));
    }
    let mut data = vec![Label::Stroma as u8; width * height];
    for row in data.chunks_exact_mut(width) {
        row[width / 2..].fill(Label::Tumour as u8);
    }
    let mask = ClassMask::new(height, width, data)?;
    let mut r = rng(derive_seed(seed, "region"));
    let layout = Layout {
        mask,
        origin: (r.gen_range(0..1 << 16), r.gen_range(0..1 << 16)),
        texture_seed: r.gen(),
    };
    let cast = SlideCast::sample(derive_seed(seed, "region.slide"), 0.0);
    let (he, ihc) = render_rect(&layout, &cast, height, width);
    Ok(SyntheticRegion {
        he_image: he,
        ihc_image: ihc,
        mask: layout.mask,
    })
}

struct SlideCast {
    gain: [f64; 3],
    offset: f64,
}

impl SlideCast {
    fn sample(seed: u64, variation: f64) -> SlideCast {
        let mut r = rng(seed);
        let mut draw = |scale: f64| {
            if scale > 0.0 {
                r.gen_range(-scale..=scale)
            } else {
                0.0
            }
        };
        let gain = [
            1.0 + draw(variation),
            1.0 + draw(variation),
            1.0 + draw(variation),
        ];
        SlideCast {
            gain,
            offset: draw(variation * 0.6),
        }
    }
}

struct Layout {
    mask: ClassMask,
    origin: (i64, i64),
    texture_seed: u64,
}

impl Layout {
    fn sample(r: &mut Rng, config: &SyntheticConfig) -> Layout {
        let s = config.patch_size;
        let sf = s as f64;
        let centre_class = pick_class(r, config.field_ratios);
        // (x, y, class, weight)
        let jitter = sf / 8.0;
        let mut seeds = vec![(
            sf / 2.0 + r.gen_range(-jitter..=jitter),
            sf / 2.0 + r.gen_range(-jitter..=jitter),
            centre_class,
            1.0,
        )];
        if r.gen_bool(config.mix_probability) {
            let extra = r.gen_range(1..=2);
            for _ in 0..extra {
                let angle = r.gen_range(0.0..std::f64::consts::TAU);
                let dist = r.gen_range(0.3..0.7) * sf;
                let other = (centre_class + r.gen_range(1..3)) % 3;
                seeds.push((
                    sf / 2.0 + dist * angle.cos(),
                    sf / 2.0 + dist * angle.sin(),
                    other,
                    r.gen_range(0.8..1.2),
                ));
            }
        }
        let warp_seed: u64 = r.gen();
        let mut data = vec![0u8; s * s];
        for y in 0..s {
            for x in 0..s {
                let wx = x as f64
                    + 6.0 * (value_noise(x as f64 / 14.0, y as f64 / 14.0, warp_seed) - 0.5);
                let wy = y as f64
                    + 6.0 * (value_noise(x as f64 / 14.0, y as f64 / 14.0, warp_seed ^ 1) - 0.5);
                let nearest = seeds
                    .iter()
                    .map(|&(sx, sy, class, w)| {
                        (((wx - sx).powi(2) + (wy - sy).powi(2)).sqrt() / w, class)
                    })
                    .min_by(|a, b| a.0.total_cmp(&b.0))
                    .map(|(_, class)| class)
                    .unwrap_or(centre_class);
                data[y * s + x] = nearest as u8;
            }
        }
        Layout {
            mask: ClassMask {
                height: s,
                width: s,
                data,
            },
            origin: (r.gen_range(0..1 << 16), r.gen_range(0..1 << 16)),
            texture_seed: r.gen(),
        }
    }
}

fn pick_class(r: &mut Rng, ratios: [f64; 3]) -> usize {
    let total: f64 = ratios.iter().sum();
    let mut u = r.gen_range(0.0..total);
    for (c, &p) in ratios.iter().enumerate() {
        if u < p {
            return c;
        }
        u -= p;
    }
    2
}

fn render(layout: &Layout, cast: &SlideCast, s: usize) -> (Image, Image) {
    render_rect(layout, cast, s, s)
}

fn render_rect(layout: &Layout, cast: &SlideCast, height: usize, width: usize) -> (Image, Image) {
    let mut he = Image::filled(3, height, width, 0.0);
    let mut ihc = Image::filled(3, height, width, 0.0);
    for y in 0..height {
        for x in 0..width {
            let gx = layout.origin.0 + x as i64;
            let gy = layout.origin.1 + y as i64;
            let class = layout.mask.get(y, x);
            let (h, i) = shade(class, gx, gy, layout.texture_seed);
            let grain = 0.04 * (hash_unit(gx, gy, layout.texture_seed ^ 0x5eed) - 0.5);
            let h = [0, 1, 2].map(|c| quantize_unit((h[c] + grain) * cast.gain[c] + cast.offset));
            let i = [0, 1, 2].map(|c| quantize_unit(i[c] + grain * 0.5));
            he.set_pixel(y, x, h);
            ihc.set_pixel(y, x, i);
        }
    }
    (he, ihc)
}

fn quantize_unit(v: f64) -> f64 {
    f64::from(quantize(v)) / 255.0
}

fn lerp3(a: [f64; 3], b: [f64; 3], t: f64) -> [f64; 3] {
    [0, 1, 2].map(|c| a[c] + (b[c] - a[c]) * t)
}

const NUCLEUS_HE: [f64; 3] = [0.40, 0.24, 0.56];
const EPITHELIUM_HE: [f64; 3] = [0.80, 0.60, 0.82];
const LUMEN_HE: [f64; 3] = [0.96, 0.93, 0.96];

/// Gland lattice: cell pitch, lumen radius range, ring
/// thickness range and nuclear density on the ring.
struct GlandSpec {
    cell: f64,
    lumen: (f64, f64),
    ring: (f64, f64),
    nuclei: f64,
    salt: u64,
}

const BENIGN_GLANDS: GlandSpec = GlandSpec {
    cell: 22.0,
    lumen: (3.5, 7.0),
    ring: (3.0, 4.5),
    nuclei: 0.3,
    salt: 0x100,
};

/// Colours `(H&E, IHC)` of one pixel of the given class. The IHC recolours
/// epithelium brown.
fn shade(class: u8, gx: i64, gy: i64, seed: u64) -> ([f64; 3], [f64; 3]) {
    let (fx, fy) = (gx as f64, gy as f64);
    // fibres run along a per-texture direction
    let fibre = 0.6 * value_noise(fx / 20.0, fy / 4.0, seed)
        + 0.4 * value_noise(fx / 7.0, fy / 2.5, seed ^ 7);
    let stroma_he = lerp3([0.94, 0.72, 0.84], [0.84, 0.52, 0.70], fibre);
    let stroma_ihc = lerp3([0.88, 0.90, 0.96], [0.70, 0.76, 0.90], fibre);
    let stromal_nucleus = hash_unit(gx.div_euclid(5), gy.div_euclid(2), seed ^ 0x5a) < 0.07;
    match class {
        0 => {
            if stromal_nucleus {
                (NUCLEUS_HE, [0.40, 0.45, 0.75])
            } else {
                (stroma_he, stroma_ihc)
            }
        }
        1 => epithelium(
            &BENIGN_GLANDS,
            gx,
            gy,
            seed,
            (stroma_he, stroma_ihc),
            [0.68, 0.50, 0.32],
        ),
        _ => {
            // solid sheet of crowded cells
            let nucleus = hash_unit(gx.div_euclid(2), gy.div_euclid(2), seed ^ 0x200) < 0.45;
            if nucleus {
                (NUCLEUS_HE, [0.36, 0.24, 0.16])
            } else {
                (lerp3(EPITHELIUM_HE, stroma_he, 0.3), [0.62, 0.46, 0.30])
            }
        }
    }
}

fn epithelium(
    spec: &GlandSpec,
    gx: i64,
    gy: i64,
    seed: u64,
    stroma: ([f64; 3], [f64; 3]),
    brown: [f64; 3],
) -> ([f64; 3], [f64; 3]) {
    let (d, lumen, ring) = nearest_gland(gx as f64, gy as f64, seed ^ spec.salt, spec);
    if d < lumen {
        (LUMEN_HE, [0.97, 0.97, 0.98])
    } else if d < lumen + ring {
        let nuclei = d > lumen + ring * 0.4
            && hash_unit(gx.div_euclid(2), gy.div_euclid(2), seed ^ spec.salt ^ 0xa1) < spec.nuclei;
        if nuclei {
            (NUCLEUS_HE, lerp3(brown, [0.25, 0.15, 0.10], 0.5))
        } else {
            (EPITHELIUM_HE, brown)
        }
    } else {
        stroma
    }
}

/// Distance to the nearest gland centre plus that gland's lumen radius and
/// ring thickness.
fn nearest_gland(fx: f64, fy: f64, seed: u64, spec: &GlandSpec) -> (f64, f64, f64) {
    let cx = (fx / spec.cell).floor() as i64;
    let cy = (fy / spec.cell).floor() as i64;
    let mut best = (f64::INFINITY, 0.0, 0.0);
    for dy in -1..=1 {
        for dx in -1..=1 {
            let (ix, iy) = (cx + dx, cy + dy);
            let px = (ix as f64 + 0.25 + 0.5 * hash_unit(ix, iy, seed ^ 0x11)) * spec.cell;
            let py = (iy as f64 + 0.25 + 0.5 * hash_unit(ix, iy, seed ^ 0x22)) * spec.cell;
            let d = ((fx - px).powi(2) + (fy - py).powi(2)).sqrt();
            if d < best.0 {
                let lumen =
                    spec.lumen.0 + (spec.lumen.1 - spec.lumen.0) * hash_unit(ix, iy, seed ^ 0x33);
                let ring =
                    spec.ring.0 + (spec.ring.1 - spec.ring.0) * hash_unit(ix, iy, seed ^ 0x44);
                best = (d, lumen, ring);
            }
        }
    }
    best
}

fn hash_unit(x: i64, y: i64, seed: u64) -> f64 {
    let mut h = seed
        ^ (x as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15)
        ^ (y as u64).wrapping_mul(0xc2b2_ae3d_27d4_eb4f);
    h = (h ^ (h >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    h = (h ^ (h >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    h ^= h >> 31;
    (h >> 11) as f64 / (1u64 << 53) as f64
}

/// Bilinear value noise with smoothstep weights, in `[0, 1)`.
fn value_noise(x: f64, y: f64, seed: u64) -> f64 {
    let (x0, y0) = (x.floor(), y.floor());
    let (tx, ty) = (x - x0, y - y0);
    let (sx, sy) = (tx * tx * (3.0 - 2.0 * tx), ty * ty * (3.0 - 2.0 * ty));
    let (ix, iy) = (x0 as i64, y0 as i64);
    let a = hash_unit(ix, iy, seed);
    let b = hash_unit(ix + 1, iy, seed);
    let c = hash_unit(ix, iy + 1, seed);
    let d = hash_unit(ix + 1, iy + 1, seed);
    let top = a + (b - a) * sx;
    let bottom = c + (d - c) * sx;
    top + (bottom - top) * sy
}
