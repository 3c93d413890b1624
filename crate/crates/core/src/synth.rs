//! Deterministic synthetic visible/infrared identity stream.
//!
//! Every identity owns a silhouette (head, torso and legs) shared by both
//! modalities. The visible renderer paints the silhouette with the identity's
//! three-colour palette; the infrared renderer ignores the palette and fills
//! the same silhouette with seeded heat blobs on a near-grayscale canvas.
//! Each stage applies its own affine style shift (gain, bias, background tone).

use std::fs;
use std::io::Write as _;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{CkdaError, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    Visible,
    Infrared,
}

impl Modality {
    pub fn other(self) -> Modality {
        match self {
            Modality::Visible => Modality::Infrared,
            Modality::Infrared => Modality::Visible,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Modality::Visible => "visible",
            Modality::Infrared => "infrared",
        }
    }
}

/// Silhouette parameters in image-relative units.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SilhouetteParams {
    pub center_x: f64,
    pub head_radius: f64,
    pub torso_width: f64,
    pub torso_height: f64,
    pub leg_width: f64,
    pub leg_gap: f64,
    pub leg_length: f64,
}

const TOP_MARGIN: f64 = 0.06;

/// Body part covering a pixel.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BodyPart {
    Head,
    Torso,
    Legs,
}

impl SilhouetteParams {
    fn sample<R: Rng + ?Sized>(rng: &mut R) -> Self {
        Self {
            center_x: rng.gen_range(0.40..0.60),
            head_radius: rng.gen_range(0.06..0.11),
            torso_width: rng.gen_range(0.22..0.42),
            torso_height: rng.gen_range(0.25..0.40),
            leg_width: rng.gen_range(0.05..0.10),
            leg_gap: rng.gen_range(0.0..0.08),
            leg_length: rng.gen_range(0.15..0.30),
        }
    }

    pub fn as_vec(&self) -> [f64; 7] {
        [
            self.center_x,
            self.head_radius,
            self.torso_width,
            self.torso_height,
            self.leg_width,
            self.leg_gap,
            self.leg_length,
        ]
    }

    /// Body part at relative coordinates `(u, v)` (x right, y down).
    pub fn part_at(&self, u: f64, v: f64) -> Option<BodyPart> {
        let head_cy = TOP_MARGIN + self.head_radius;
        let torso_cy = TOP_MARGIN + 2.0 * self.head_radius + 0.01 + self.torso_height / 2.0;
        let (du, dv) = (u - self.center_x, v - head_cy);
        if du * du + dv * dv <= self.head_radius * self.head_radius {
            return Some(BodyPart::Head);
        }
        let (a, b) = (self.torso_width / 2.0, self.torso_height / 2.0);
        let (eu, ev) = ((u - self.center_x) / a, (v - torso_cy) / b);
        if eu * eu + ev * ev <= 1.0 {
            return Some(BodyPart::Torso);
        }
        let leg_end = torso_cy + b + self.leg_length;
        if v >= torso_cy && v <= leg_end {
            let off = (u - self.center_x).abs();
            let inner = self.leg_gap / 2.0;
            if off >= inner && off <= inner + self.leg_width {
                return Some(BodyPart::Legs);
            }
        }
        None
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IdentitySpec {
    pub identity_id: u64,
    pub silhouette_params: SilhouetteParams,
    /// Upper body, lower body, head colours.
    pub visible_palette: [[f64; 3]; 3],
    pub thermal_seed: u64,
}

impl IdentitySpec {
    /// Binary body mask, row-major `H×W`; identical for both modalities.
    pub fn mask(&self, geom: &ImageGeometry) -> Vec<bool> {
        self.parts(geom).into_iter().map(|p| p.is_some()).collect()
    }

    pub fn parts(&self, geom: &ImageGeometry) -> Vec<Option<BodyPart>> {
        let mut out = Vec::with_capacity(geom.height * geom.width);
        for y in 0..geom.height {
            for x in 0..geom.width {
                let u = (x as f64 + 0.5) / geom.width as f64;
                let v = (y as f64 + 0.5) / geom.height as f64;
                out.push(self.silhouette_params.part_at(u, v));
            }
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ImageGeometry {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
}

impl Default for ImageGeometry {
    fn default() -> Self {
        Self {
            height: 32,
            width: 32,
            channels: 3,
        }
    }
}

impl ImageGeometry {
    pub fn shape(&self) -> [usize; 3] {
        [self.height, self.width, self.channels]
    }

    pub fn pixels(&self) -> usize {
        self.height * self.width
    }
}

/// Per-stage affine pixel transform.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StyleShift {
    pub gain: f64,
    pub bias: f64,
    pub background_tone: f64,
}

impl Default for StyleShift {
    fn default() -> Self {
        Self {
            gain: 1.0,
            bias: 0.0,
            background_tone: 0.3,
        }
    }
}

impl StyleShift {
    fn apply(&self, v: f64) -> f64 {
        (self.gain * v + self.bias).clamp(0.0, 1.0)
    }
}

/// Pixel noise settings shared by both renderers.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NoiseConfig {
    /// Half-width of the uniform per-pixel noise.
    pub amplitude: f64,
    /// Half-width of the per-sample multiplicative illumination jitter.
    pub illumination_jitter: f64,
    /// Bound on per-channel deviation from gray in infrared renders.
    pub infrared_channel_deviation: f64,
}

impl Default for NoiseConfig {
    fn default() -> Self {
        Self {
            amplitude: 0.08,
            illumination_jitter: 0.1,
            infrared_channel_deviation: 0.02,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StageConfig {
    pub stage_index: usize,
    pub num_identities: usize,
    pub samples_per_identity_per_modality: usize,
    pub style_shift: StyleShift,
    /// Scale of the seeded per-stage perturbation of `style_shift` in
    /// [`make_stream`]; zero keeps every stage at the template style.
    pub style_variation: f64,
    pub geometry: ImageGeometry,
    pub patch_size: usize,
    pub noise: NoiseConfig,
}

impl Default for StageConfig {
    fn default() -> Self {
        Self {
            stage_index: 1,
            num_identities: 20,
            samples_per_identity_per_modality: 6,
            style_shift: StyleShift::default(),
            style_variation: 1.0,
            geometry: ImageGeometry::default(),
            patch_size: 8,
            noise: NoiseConfig::default(),
        }
    }
}

/// Number of samples per identity and modality withheld for query/gallery.
pub const HELD_OUT_PER_MODALITY: usize = 2;

impl StageConfig {
    pub fn validate(&self) -> Result<()> {
        let g = &self.geometry;
        if self.stage_index < 1 {
            return Err(CkdaError::config("stage_index", "must be >= 1"));
        }
        if self.num_identities < 2 {
            return Err(CkdaError::config("num_identities", "must be >= 2"));
        }
        if self.samples_per_identity_per_modality < HELD_OUT_PER_MODALITY + 1 {
            return Err(CkdaError::config(
                "samples_per_identity_per_modality",
                format!(
                    "must be >= {} ({} held out per modality plus at least one training sample)",
                    HELD_OUT_PER_MODALITY + 1,
                    HELD_OUT_PER_MODALITY
                ),
            ));
        }
        if self.patch_size == 0 {
            return Err(CkdaError::config("patch_size", "must be positive"));
        }
        if g.height == 0 || !g.height.is_multiple_of(self.patch_size) {
            return Err(CkdaError::config(
                "image_height",
                format!("{} is not divisible by patch size {}", g.height, self.patch_size),
            ));
        }
        if g.width == 0 || !g.width.is_multiple_of(self.patch_size) {
            return Err(CkdaError::config(
                "image_width",
                format!("{} is not divisible by patch size {}", g.width, self.patch_size),
            ));
        }
        if g.channels != 3 {
            return Err(CkdaError::config("channels", "renderers emit 3 channels"));
        }
        let n = &self.noise;
        if !(0.0..=0.5).contains(&n.amplitude) {
            return Err(CkdaError::config("noise.amplitude", "must lie in [0, 0.5]"));
        }
        if !(0.0..1.0).contains(&n.illumination_jitter) {
            return Err(CkdaError::config("noise.illumination_jitter", "must lie in [0, 1)"));
        }
        if !(0.0..=0.5).contains(&n.infrared_channel_deviation) {
            return Err(CkdaError::config(
                "noise.infrared_channel_deviation",
                "must lie in [0, 0.5]",
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    /// `H×W×C`, entries in `[0,1]`.
    pub image: Tensor,
    pub identity: u64,
    /// Index of `identity` within its stage roster; the classifier target.
    pub label: usize,
    pub modality: Modality,
    pub stage: usize,
    pub sample_index: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Query,
    Gallery,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StageDataset {
    pub stage: usize,
    pub geometry: ImageGeometry,
    pub style: StyleShift,
    pub train: Vec<Sample>,
    pub query: Vec<Sample>,
    pub gallery: Vec<Sample>,
    pub identity_roster: Vec<IdentitySpec>,
}

impl StageDataset {
    pub fn query_modality(&self) -> Option<Modality> {
        self.query.first().map(|s| s.modality)
    }

    pub fn num_identities(&self) -> usize {
        self.identity_roster.len()
    }
}

/// Read access to one stage's data. The trainer consumes stages only
/// through this trait so tests can observe which stage is touched when.
pub trait StageData {
    fn stage_index(&self) -> usize;
    fn train(&self) -> &[Sample];
    fn query(&self) -> &[Sample];
    fn gallery(&self) -> &[Sample];
    fn roster(&self) -> &[IdentitySpec];
    fn geometry(&self) -> ImageGeometry;
}

impl StageData for StageDataset {
    fn stage_index(&self) -> usize {
        self.stage
    }
    fn train(&self) -> &[Sample] {
        &self.train
    }
    fn query(&self) -> &[Sample] {
        &self.query
    }
    fn gallery(&self) -> &[Sample] {
        &self.gallery
    }
    fn roster(&self) -> &[IdentitySpec] {
        &self.identity_roster
    }
    fn geometry(&self) -> ImageGeometry {
        self.geometry
    }
}

fn derive_seed(master: u64, a: u64, b: u64) -> u64 {
    // splitmix64 finaliser over the mixed inputs
    let mut z = master
        .wrapping_add(a.wrapping_mul(0x9E37_79B9_7F4A_7C15))
        .wrapping_add(b.wrapping_mul(0xD1B5_4A32_D192_ED03));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn sample_identity<R: Rng + ?Sized>(identity_id: u64, rng: &mut R) -> IdentitySpec {
    let silhouette_params = SilhouetteParams::sample(rng);
    let mut palette = [[0.0; 3]; 3];
    for color in palette.iter_mut() {
        for c in color.iter_mut() {
            *c = rng.gen_range(0.1..0.9);
        }
    }
    IdentitySpec {
        identity_id,
        silhouette_params,
        visible_palette: palette,
        thermal_seed: rng.gen(),
    }
}

fn illumination<R: Rng + ?Sized>(noise: &NoiseConfig, rng: &mut R) -> f64 {
    if noise.illumination_jitter > 0.0 {
        1.0 + rng.gen_range(-noise.illumination_jitter..=noise.illumination_jitter)
    } else {
        1.0
    }
}

fn pixel_noise<R: Rng + ?Sized>(amplitude: f64, rng: &mut R) -> f64 {
    if amplitude > 0.0 {
        rng.gen_range(-amplitude..=amplitude)
    } else {
        0.0
    }
}

/// Visible render: palette colours inside the silhouette, style-toned
/// background outside, bounded uniform noise everywhere.
pub fn render_visible<R: Rng + ?Sized>(
    spec: &IdentitySpec,
    style: &StyleShift,
    geom: &ImageGeometry,
    noise: &NoiseConfig,
    rng: &mut R,
) -> Tensor {
    let parts = spec.parts(geom);
    let light = illumination(noise, rng);
    let mut data = Vec::with_capacity(geom.pixels() * geom.channels);
    for part in parts {
        for c in 0..geom.channels {
            let base = match part {
                Some(BodyPart::Torso) => spec.visible_palette[0][c] * light,
                Some(BodyPart::Legs) => spec.visible_palette[1][c] * light,
                Some(BodyPart::Head) => spec.visible_palette[2][c] * light,
                None => style.background_tone,
            };
            let v = base + pixel_noise(noise.amplitude, rng);
            data.push(style.apply(v.clamp(0.0, 1.0)));
        }
    }
    Tensor::from_parts(geom.shape().to_vec(), data)
}

/// Heat blobs of one identity: `(u, v, sigma, amplitude)` in relative units.
pub fn heat_blobs(spec: &IdentitySpec) -> Vec<(f64, f64, f64, f64)> {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.thermal_seed);
    let p = &spec.silhouette_params;
    let bottom = TOP_MARGIN + 2.0 * p.head_radius + 0.01 + p.torso_height + p.leg_length;
    let half_w = p.torso_width / 2.0;
    (0..3)
        .map(|_| {
            let u = rng.gen_range(p.center_x - half_w..p.center_x + half_w);
            let v = rng.gen_range(TOP_MARGIN..bottom);
            let sigma = rng.gen_range(0.05..0.12);
            let amp = rng.gen_range(0.2..0.45);
            (u, v, sigma, amp)
        })
        .collect()
}

/// Infrared render: base body heat plus seeded blobs inside the silhouette,
/// cool background outside, near-grayscale channels.
pub fn render_infrared<R: Rng + ?Sized>(
    spec: &IdentitySpec,
    style: &StyleShift,
    geom: &ImageGeometry,
    noise: &NoiseConfig,
    rng: &mut R,
) -> Tensor {
    let mask = spec.mask(geom);
    let blobs = heat_blobs(spec);
    let light = illumination(noise, rng);
    let background = 0.5 * style.background_tone;
    let mut data = Vec::with_capacity(geom.pixels() * geom.channels);
    for (i, inside) in mask.into_iter().enumerate() {
        let (y, x) = (i / geom.width, i % geom.width);
        let u = (x as f64 + 0.5) / geom.width as f64;
        let v = (y as f64 + 0.5) / geom.height as f64;
        let heat = if inside {
            let blob: f64 = blobs
                .iter()
                .map(|&(bu, bv, s, a)| {
                    let d2 = (u - bu).powi(2) + (v - bv).powi(2);
                    a * (-d2 / (2.0 * s * s)).exp()
                })
                .sum();
            (0.4 + blob) * light
        } else {
            background
        };
        let gray = (heat + pixel_noise(noise.amplitude, rng)).clamp(0.0, 1.0);
        let gray = style.apply(gray);
        for _ in 0..geom.channels {
            let dev = pixel_noise(noise.infrared_channel_deviation, rng);
            data.push((gray + dev).clamp(0.0, 1.0));
        }
    }
    Tensor::from_parts(geom.shape().to_vec(), data)
}

/// Style of stage `stage` (1-based) in a stream built from `template`.
pub fn stage_style(template: &StageConfig, master_seed: u64, stage: usize) -> StyleShift {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(master_seed, stage as u64, 0xC0FFEE));
    let v = template.style_variation;
    let base = template.style_shift;
    StyleShift {
        gain: base.gain + v * rng.gen_range(-0.25..0.25),
        bias: base.bias + v * rng.gen_range(-0.1..0.1),
        background_tone: (base.background_tone + v * rng.gen_range(-0.2..0.2)).clamp(0.0, 1.0),
    }
}

/// Query modality of a stage: visible→infrared retrieval on odd stages,
/// infrared→visible on even stages.
pub fn query_modality_for_stage(stage: usize) -> Modality {
    if stage % 2 == 1 {
        Modality::Visible
    } else {
        Modality::Infrared
    }
}

/// Build one stage with the given identity id offset.
pub fn make_stage(
    cfg: &StageConfig,
    style: StyleShift,
    first_identity_id: u64,
    seed: u64,
) -> Result<StageDataset> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let roster: Vec<IdentitySpec> = (0..cfg.num_identities)
        .map(|k| sample_identity(first_identity_id + k as u64, &mut rng))
        .collect();
    let qm = query_modality_for_stage(cfg.stage_index);
    let n = cfg.samples_per_identity_per_modality;
    let n_train = n - HELD_OUT_PER_MODALITY;
    let (mut train, mut query, mut gallery) = (Vec::new(), Vec::new(), Vec::new());
    for (label, spec) in roster.iter().enumerate() {
        for modality in [Modality::Visible, Modality::Infrared] {
            for sample_index in 0..n {
                let image = match modality {
                    Modality::Visible => {
                        render_visible(spec, &style, &cfg.geometry, &cfg.noise, &mut rng)
                    }
                    Modality::Infrared => {
                        render_infrared(spec, &style, &cfg.geometry, &cfg.noise, &mut rng)
                    }
                };
                let s = Sample {
                    image,
                    identity: spec.identity_id,
                    label,
                    modality,
                    stage: cfg.stage_index,
                    sample_index,
                };
                if sample_index < n_train {
                    train.push(s);
                } else if modality == qm {
                    query.push(s);
                } else {
                    gallery.push(s);
                }
            }
        }
    }
    Ok(StageDataset {
        stage: cfg.stage_index,
        geometry: cfg.geometry,
        style,
        train,
        query,
        gallery,
        identity_roster: roster,
    })
}

/// `num_stages` stages with pairwise-disjoint identities; fully determined
/// by `(template, master_seed)`.
pub fn make_stream(
    num_stages: usize,
    template: &StageConfig,
    master_seed: u64,
) -> Result<Vec<StageDataset>> {
    if num_stages < 1 {
        return Err(CkdaError::config("num_stages", "must be >= 1"));
    }
    template.validate()?;
    (1..=num_stages)
        .map(|s| {
            let cfg = StageConfig {
                stage_index: s,
                ..template.clone()
            };
            let style = stage_style(template, master_seed, s);
            let first = ((s - 1) * template.num_identities) as u64;
            make_stage(&cfg, style, first, derive_seed(master_seed, s as u64, 1))
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestRecord {
    pub file: String,
    pub identity: u64,
    pub label: usize,
    pub modality: Modality,
    pub stage: usize,
    pub split: Split,
    pub sample_index: usize,
}

/// Encode an `H×W×C` image in `[0,1]` as 8-bit RGB PNG bytes.
pub fn encode_png(image: &Tensor) -> Result<Vec<u8>> {
    let s = image.shape();
    if s.len() != 3 || (s[2] != 3 && s[2] != 1) {
        return Err(CkdaError::shape("encode_png", &[0, 0, 3], s));
    }
    let bytes: Vec<u8> = image
        .data()
        .iter()
        .map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
        .collect();
    let mut out = Vec::new();
    {
        let mut enc = png::Encoder::new(&mut out, s[1] as u32, s[0] as u32);
        enc.set_color(if s[2] == 3 {
            png::ColorType::Rgb
        } else {
            png::ColorType::Grayscale
        });
        enc.set_depth(png::BitDepth::Eight);
        let mut w = enc
            .write_header()
            .map_err(|e| CkdaError::Serde(e.to_string()))?;
        w.write_image_data(&bytes)
            .map_err(|e| CkdaError::Serde(e.to_string()))?;
    }
    Ok(out)
}

/// Write every sample as `stage{s}/{split}/{identity}_{modality}_{index}.png`
/// plus `manifest.jsonl` with one [`ManifestRecord`] per line.
pub fn export_stream(stream: &[StageDataset], dir: &Path) -> Result<Vec<ManifestRecord>> {
    fs::create_dir_all(dir)?;
    let mut records = Vec::new();
    let mut manifest = fs::File::create(dir.join("manifest.jsonl"))?;
    for ds in stream {
        for (split, samples) in [
            (Split::Train, &ds.train),
            (Split::Query, &ds.query),
            (Split::Gallery, &ds.gallery),
        ] {
            let split_name = serde_json::to_value(split)?;
            let sub = format!("stage{}/{}", ds.stage, split_name.as_str().unwrap_or("x"));
            fs::create_dir_all(dir.join(&sub))?;
            for s in samples {
                let file = format!(
                    "{sub}/{:05}_{}_{}.png",
                    s.identity,
                    s.modality.name(),
                    s.sample_index
                );
                fs::write(dir.join(&file), encode_png(&s.image)?)?;
                let rec = ManifestRecord {
                    file,
                    identity: s.identity,
                    label: s.label,
                    modality: s.modality,
                    stage: s.stage,
                    split,
                    sample_index: s.sample_index,
                };
                writeln!(manifest, "{}", serde_json::to_string(&rec)?)?;
                records.push(rec);
            }
        }
    }
    Ok(records)
}
