//! Procedural scene generator. Replaces real capture data and external
//! teacher networks with synthetic faces whose depth, reflection, material,
//! identity and attribute ground truth is exact by construction.
//!
//! A scene is fully determined by (seed, identity, attack, sample index);
//! the domain only applies photometric effects (gain, tone, noise, blur)
//! to the image, never to ground-truth maps or labels.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{FasError, Result};
use crate::rng::Rng;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Liveness {
    Genuine,
    Spoof,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttackType {
    None,
    Print,
    Replay,
    CutPhoto,
}

impl AttackType {
    pub const ATTACKS: [AttackType; 3] =
        [AttackType::Print, AttackType::Replay, AttackType::CutPhoto];
    pub const ALL: [AttackType; 4] = [
        AttackType::None,
        AttackType::Print,
        AttackType::Replay,
        AttackType::CutPhoto,
    ];

    pub fn liveness(&self) -> Liveness {
        match self {
            AttackType::None => Liveness::Genuine,
            _ => Liveness::Spoof,
        }
    }

    /// Presentation material implied by the attack medium.
    pub fn material(&self) -> MaterialLabel {
        match self {
            AttackType::None => MaterialLabel::Skin,
            AttackType::Replay => MaterialLabel::Glass,
            AttackType::Print | AttackType::CutPhoto => MaterialLabel::Paper,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            AttackType::None => "none",
            AttackType::Print => "print",
            AttackType::Replay => "replay",
            AttackType::CutPhoto => "cut_photo",
        }
    }

    fn index(&self) -> u64 {
        match self {
            AttackType::None => 0,
            AttackType::Print => 1,
            AttackType::Replay => 2,
            AttackType::CutPhoto => 3,
        }
    }
}

/// Spoof-medium material classes of the 3-way classifier.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaterialLabel {
    Skin,
    Glass,
    Paper,
}

impl MaterialLabel {
    pub fn index(&self) -> usize {
        match self {
            MaterialLabel::Skin => 0,
            MaterialLabel::Glass => 1,
            MaterialLabel::Paper => 2,
        }
    }
}

/// One synthetic scene request.
#[derive(Debug, Clone)]
pub struct SceneSpec {
    pub attack: AttackType,
    pub domain: usize,
    pub identity: usize,
    pub sample_index: usize,
    pub seed: u64,
    pub image_size: usize,
}

impl SceneSpec {
    pub fn liveness(&self) -> Liveness {
        self.attack.liveness()
    }
}

/// One rendered sample with exact ground truth.
#[derive(Debug, Clone)]
pub struct Sample {
    pub id: String,
    pub image: Tensor,
    pub depth_gt: Tensor,
    pub reflection_gt: Tensor,
    pub material: MaterialLabel,
    pub liveness: Liveness,
    pub attack: AttackType,
    pub identity: usize,
    /// [glasses in {0,1}, tone in {0,1,2}]
    pub attributes: Vec<usize>,
    pub domain: usize,
}

/// Generation counts and knobs; serialized into every manifest.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    /// Load an existing dataset directory instead of generating.
    pub path: Option<String>,
    pub domains: usize,
    pub identities: usize,
    /// Samples per (domain, attack-or-genuine, identity) cell.
    pub samples_per_cell: usize,
    pub image_size: usize,
    pub material_patches_per_class: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            path: None,
            domains: 4,
            identities: 8,
            samples_per_cell: 5,
            image_size: 32,
            material_patches_per_class: 20,
        }
    }
}

impl DataConfig {
    pub fn validate(&self) -> Result<()> {
        if self.domains < 1 || self.identities < 1 || self.samples_per_cell < 1 {
            return Err(FasError::Config("data counts must be positive".into()));
        }
        if !self.image_size.is_multiple_of(16) || self.image_size < 16 {
            return Err(FasError::Config(format!(
                "image_size must be a multiple of 16, got {}",
                self.image_size
            )));
        }
        Ok(())
    }

    pub fn total_samples(&self) -> usize {
        self.domains * AttackType::ALL.len() * self.identities * self.samples_per_cell
    }
}

// ---------------------------------------------------------------------------
// Face geometry and rendering
// ---------------------------------------------------------------------------

struct FaceGeom {
    cx: f64,
    cy: f64,
    rx: f64,
    ry: f64,
    eye_dx: f64,
    eye_dy: f64,
    eye_r: f64,
    mouth_dy: f64,
    mouth_w: f64,
    mouth_h: f64,
    tone: usize,
}

fn identity_geometry(seed: u64, identity: usize) -> FaceGeom {
    let mut rng = Rng::new(seed).derive(0xface).derive(identity as u64);
    FaceGeom {
        cx: rng.uniform_in(0.44, 0.56),
        cy: rng.uniform_in(0.44, 0.56),
        rx: rng.uniform_in(0.30, 0.40),
        ry: rng.uniform_in(0.34, 0.44),
        eye_dx: rng.uniform_in(0.10, 0.15),
        eye_dy: rng.uniform_in(0.06, 0.12),
        eye_r: rng.uniform_in(0.035, 0.055),
        mouth_dy: rng.uniform_in(0.14, 0.20),
        mouth_w: rng.uniform_in(0.10, 0.16),
        mouth_h: rng.uniform_in(0.025, 0.045),
        tone: rng.below(3),
    }
}

const SKIN_TONES: [[f64; 3]; 3] = [[0.86, 0.68, 0.55], [0.72, 0.52, 0.38], [0.55, 0.38, 0.27]];

struct SceneDraw {
    geom: FaceGeom,
    glasses: bool,
    light: (f64, f64),
}

/// Scene-level randomness keyed by (seed, identity, attack, k); shared by
/// the genuine render and every spoof derived from it, and independent of
/// the domain by construction.
fn scene_draw(spec: &SceneSpec) -> (SceneDraw, Rng) {
    let mut geom = identity_geometry(spec.seed, spec.identity);
    let mut rng = Rng::new(spec.seed)
        .derive(0x5ce0e)
        .derive(spec.identity as u64)
        .derive(spec.attack.index())
        .derive(spec.sample_index as u64);
    geom.cx += rng.uniform_in(-0.015, 0.015);
    geom.cy += rng.uniform_in(-0.015, 0.015);
    geom.rx *= rng.uniform_in(0.96, 1.04);
    geom.ry *= rng.uniform_in(0.96, 1.04);
    let angle = rng.uniform_in(0.0, std::f64::consts::TAU);
    let glasses = rng.uniform() < 0.5;
    (
        SceneDraw {
            geom,
            glasses,
            light: (angle.cos(), angle.sin()),
        },
        rng,
    )
}

struct Canvas {
    n: usize,
    rgb: Vec<f64>,   // [3, n, n]
    depth: Vec<f64>, // [n, n]
}

fn render_genuine(draw: &SceneDraw, n: usize) -> Canvas {
    let g = &draw.geom;
    let skin = SKIN_TONES[g.tone];
    let mut rgb = vec![0.0; 3 * n * n];
    let mut depth = vec![0.0; n * n];
    for py in 0..n {
        for px in 0..n {
            let u = (px as f64 + 0.5) / n as f64;
            let v = (py as f64 + 0.5) / n as f64;
            let du = (u - g.cx) / g.rx;
            let dv = (v - g.cy) / g.ry;
            let e = 1.0 - du * du - dv * dv;
            let idx = py * n + px;
            let mut color;
            if e > 0.0 {
                let h = e.sqrt();
                depth[idx] = h;
                let shade = 0.30 + 0.60 * h + 0.10 * (du * draw.light.0 + dv * draw.light.1);
                color = [skin[0] * shade, skin[1] * shade, skin[2] * shade];
                // eyes
                for side in [-1.0, 1.0] {
                    let ex = g.cx + side * g.eye_dx;
                    let ey = g.cy - g.eye_dy;
                    let d2 = ((u - ex) / g.eye_r).powi(2) + ((v - ey) / (0.6 * g.eye_r)).powi(2);
                    if d2 < 1.0 {
                        color = [0.10, 0.08, 0.08];
                    }
                    if draw.glasses {
                        let ring = d2.sqrt();
                        if (1.25..1.65).contains(&ring) {
                            color = [0.08, 0.08, 0.10];
                        }
                    }
                }
                if draw.glasses {
                    // bridge between the lenses
                    if (v - (g.cy - g.eye_dy)).abs() < 0.012 && (u - g.cx).abs() < g.eye_dx * 0.6 {
                        color = [0.08, 0.08, 0.10];
                    }
                }
                // mouth
                let md = ((u - g.cx) / g.mouth_w).powi(2)
                    + ((v - (g.cy + g.mouth_dy)) / g.mouth_h).powi(2);
                if md < 1.0 {
                    color = [0.55 * shade, 0.22 * shade, 0.22 * shade];
                }
            } else {
                let bg = 0.12 + 0.06 * v;
                color = [bg, bg, bg * 1.05];
            }
            rgb[idx] = color[0];
            rgb[n * n + idx] = color[1];
            rgb[2 * n * n + idx] = color[2];
        }
    }
    Canvas { n, rgb, depth }
}

fn apply_print_texture(canvas: &mut Canvas, rng: &mut Rng) {
    let n = canvas.n;
    let (ox, oy) = (rng.below(3), rng.below(3));
    for py in 0..n {
        for px in 0..n {
            let idx = py * n + px;
            let gray =
                (canvas.rgb[idx] + canvas.rgb[n * n + idx] + canvas.rgb[2 * n * n + idx]) / 3.0;
            let dot = if (px + ox) % 3 == 0 && (py + oy) % 3 == 0 {
                0.05
            } else {
                -0.015
            };
            for c in 0..3 {
                let v = canvas.rgb[c * n * n + idx];
                // mild flattening toward paper plus halftone dots; subtle
                // enough that heavier domain noise and blur degrade it
                let tinted = 0.90 * (0.90 * v + 0.10 * gray) + 0.06;
                canvas.rgb[c * n * n + idx] = tinted + dot;
            }
        }
    }
}

fn apply_replay_texture(canvas: &mut Canvas, rng: &mut Rng) -> Vec<f64> {
    let n = canvas.n;
    let fx = rng.uniform_in(0.08, 0.18);
    let fy = rng.uniform_in(0.08, 0.18);
    let phase = rng.uniform_in(0.0, std::f64::consts::TAU);
    // 1-3 specular blobs
    let blob_count = 1 + rng.below(3);
    let blobs: Vec<(f64, f64, f64, f64)> = (0..blob_count)
        .map(|_| {
            (
                rng.uniform_in(0.2, 0.8) * n as f64,
                rng.uniform_in(0.2, 0.8) * n as f64,
                rng.uniform_in(2.0, 5.0),
                rng.uniform_in(0.4, 0.9),
            )
        })
        .collect();
    let tint = [0.92, 0.95, 1.05];
    let mut reflection = vec![0.0; n * n];
    for py in 0..n {
        for px in 0..n {
            let idx = py * n + px;
            let moire = (std::f64::consts::TAU * (fx * px as f64 + fy * py as f64) + phase).sin();
            let mut glare = 0.0;
            for &(bx, by, sigma, amp) in &blobs {
                let d2 = (px as f64 - bx).powi(2) + (py as f64 - by).powi(2);
                glare += amp * (-d2 / (2.0 * sigma * sigma)).exp();
            }
            let glare = glare.min(1.0);
            reflection[idx] = glare;
            for (c, t) in tint.iter().enumerate() {
                let v = canvas.rgb[c * n * n + idx];
                let fringed = v * t + 0.02 + 0.03 * (moire + 0.8 * c as f64).sin();
                // glare saturates the display locally, which survives any
                // later gain, blur or noise
                canvas.rgb[c * n * n + idx] = fringed * (1.0 - glare) + 1.35 * glare;
            }
        }
    }
    reflection
}

fn apply_cut_photo_texture(canvas: &mut Canvas, draw: &SceneDraw, rng: &mut Rng) {
    let n = canvas.n;
    let genuine = canvas.rgb.clone();
    apply_print_texture(canvas, rng);
    let g = &draw.geom;
    let hole_r = g.eye_r * 1.6;
    for py in 0..n {
        for px in 0..n {
            let u = (px as f64 + 0.5) / n as f64;
            let v = (py as f64 + 0.5) / n as f64;
            let idx = py * n + px;
            for side in [-1.0, 1.0] {
                let ex = g.cx + side * g.eye_dx;
                let ey = g.cy - g.eye_dy;
                let d = (((u - ex) / hole_r).powi(2) + ((v - ey) / (0.7 * hole_r)).powi(2)).sqrt();
                if d < 1.0 {
                    // hole exposes the genuine pixels behind the print
                    for c in 0..3 {
                        canvas.rgb[c * n * n + idx] = genuine[c * n * n + idx];
                    }
                } else if d < 1.25 {
                    // shadowed rim around the cut
                    for c in 0..3 {
                        canvas.rgb[c * n * n + idx] *= 0.6;
                    }
                }
            }
        }
    }
}

struct DomainParams {
    gain: f64,
    tone: [f64; 3],
    noise_sigma: f64,
    blur: bool,
}

fn domain_params(domain: usize) -> DomainParams {
    // photometric-only domain table; cycles past four
    const GAINS: [f64; 4] = [1.0, 0.85, 1.15, 0.75];
    const TONES: [[f64; 3]; 4] = [
        [1.0, 1.0, 1.0],
        [1.06, 1.00, 0.92],
        [0.94, 1.00, 1.08],
        [0.98, 1.04, 0.98],
    ];
    const NOISE: [f64; 4] = [0.0, 0.02, 0.05, 0.08];
    const BLUR: [bool; 4] = [false, false, true, true];
    let i = domain % 4;
    DomainParams {
        gain: GAINS[i],
        tone: TONES[i],
        noise_sigma: NOISE[i],
        blur: BLUR[i],
    }
}

fn box_blur3(rgb: &mut [f64], n: usize) {
    let src = rgb.to_vec();
    for c in 0..3 {
        for py in 0..n {
            for px in 0..n {
                let mut sum = 0.0;
                let mut cnt = 0.0;
                for dy in -1i64..=1 {
                    for dx in -1i64..=1 {
                        let y = py as i64 + dy;
                        let x = px as i64 + dx;
                        if y >= 0 && y < n as i64 && x >= 0 && x < n as i64 {
                            sum += src[c * n * n + y as usize * n + x as usize];
                            cnt += 1.0;
                        }
                    }
                }
                rgb[c * n * n + py * n + px] = sum / cnt;
            }
        }
    }
}

fn apply_domain(canvas: &mut Canvas, spec: &SceneSpec) {
    let params = domain_params(spec.domain);
    let n = canvas.n;
    let mut rng = Rng::new(spec.seed)
        .derive(0xd0_0d)
        .derive(spec.domain as u64)
        .derive(spec.identity as u64)
        .derive(spec.attack.index())
        .derive(spec.sample_index as u64);
    for c in 0..3 {
        let m = params.gain * params.tone[c];
        for v in &mut canvas.rgb[c * n * n..(c + 1) * n * n] {
            *v *= m;
        }
    }
    if params.blur {
        box_blur3(&mut canvas.rgb, n);
    }
    if params.noise_sigma > 0.0 {
        for v in &mut canvas.rgb {
            *v += params.noise_sigma * rng.normal();
        }
    }
    for v in &mut canvas.rgb {
        *v = v.clamp(0.0, 1.0);
    }
}

fn sample_id(spec: &SceneSpec) -> String {
    format!(
        "d{}_{}_i{:03}_k{:03}",
        spec.domain,
        spec.attack.name(),
        spec.identity,
        spec.sample_index
    )
}

/// Renders one scene. Spoof scenes re-texture the genuine render of the
/// same identity: print and cut-photo become paper, replay becomes glass
/// with specular glare written into the reflection ground truth; every
/// spoof has an all-zero depth ground truth, every genuine scene an
/// all-zero reflection ground truth.
pub fn render_scene(spec: &SceneSpec) -> Result<Sample> {
    let n = spec.image_size;
    if n < 8 {
        return Err(FasError::Contract(format!(
            "image_size {n} too small to render"
        )));
    }
    let (draw, mut scene_rng) = scene_draw(spec);
    let mut canvas = render_genuine(&draw, n);
    let mut reflection = vec![0.0; n * n];

    match spec.attack {
        AttackType::None => {}
        AttackType::Print => {
            canvas.depth = vec![0.0; n * n];
            apply_print_texture(&mut canvas, &mut scene_rng);
        }
        AttackType::Replay => {
            canvas.depth = vec![0.0; n * n];
            reflection = apply_replay_texture(&mut canvas, &mut scene_rng);
        }
        AttackType::CutPhoto => {
            canvas.depth = vec![0.0; n * n];
            apply_cut_photo_texture(&mut canvas, &draw, &mut scene_rng);
        }
    }

    apply_domain(&mut canvas, spec);

    let attributes = vec![usize::from(draw.glasses), draw.geom.tone];
    Ok(Sample {
        id: sample_id(spec),
        image: Tensor::from_vec(&[3, n, n], canvas.rgb)?,
        depth_gt: Tensor::from_vec(&[1, n, n], canvas.depth)?,
        reflection_gt: Tensor::from_vec(&[1, n, n], reflection)?,
        material: spec.attack.material(),
        liveness: spec.liveness(),
        attack: spec.attack,
        identity: spec.identity,
        attributes,
        domain: spec.domain,
    })
}

/// Scene specs in manifest order: domain, attack, identity, sample index.
pub fn scene_specs(cfg: &DataConfig, seed: u64) -> Vec<SceneSpec> {
    let mut specs = Vec::with_capacity(cfg.total_samples());
    for domain in 0..cfg.domains {
        for attack in AttackType::ALL {
            for identity in 0..cfg.identities {
                for k in 0..cfg.samples_per_cell {
                    specs.push(SceneSpec {
                        attack,
                        domain,
                        identity,
                        sample_index: k,
                        seed,
                        image_size: cfg.image_size,
                    });
                }
            }
        }
    }
    specs
}

/// Renders the full corpus into memory.
pub fn generate_samples(cfg: &DataConfig, seed: u64) -> Result<Vec<Sample>> {
    cfg.validate()?;
    scene_specs(cfg, seed).iter().map(render_scene).collect()
}

// ---------------------------------------------------------------------------
// General material patches (23 classes)
// ---------------------------------------------------------------------------

pub const MATERIAL_CLASS_NAMES: [&str; 23] = [
    "brick",
    "carpet",
    "ceramic",
    "fabric",
    "foliage",
    "food",
    "glass",
    "hair",
    "leather",
    "metal",
    "mirror",
    "painted",
    "paper",
    "plastic",
    "polished_stone",
    "skin",
    "sky",
    "stone",
    "tile",
    "wallpaper",
    "water",
    "wood",
    "other",
];

#[derive(Debug, Clone)]
pub struct MaterialSample {
    pub id: String,
    pub image: Tensor,
    pub class: usize,
}

/// One procedural texture recipe per class: a distinct base color plus a
/// distinct spatial pattern, separable by construction.
fn render_material_patch(class: usize, n: usize, rng: &mut Rng) -> Vec<f64> {
    const BASES: [[f64; 3]; 23] = [
        [0.62, 0.28, 0.20], // brick
        [0.45, 0.35, 0.50], // carpet
        [0.92, 0.90, 0.86], // ceramic
        [0.30, 0.45, 0.60], // fabric
        [0.20, 0.50, 0.22], // foliage
        [0.85, 0.55, 0.25], // food
        [0.70, 0.85, 0.92], // glass
        [0.22, 0.16, 0.12], // hair
        [0.48, 0.30, 0.18], // leather
        [0.62, 0.64, 0.68], // metal
        [0.80, 0.82, 0.88], // mirror
        [0.75, 0.35, 0.55], // painted
        [0.94, 0.93, 0.88], // paper
        [0.95, 0.45, 0.15], // plastic
        [0.55, 0.55, 0.48], // polished_stone
        [0.82, 0.62, 0.50], // skin
        [0.55, 0.70, 0.92], // sky
        [0.52, 0.50, 0.46], // stone
        [0.30, 0.60, 0.60], // tile
        [0.85, 0.75, 0.40], // wallpaper
        [0.15, 0.35, 0.65], // water
        [0.55, 0.38, 0.20], // wood
        [0.50, 0.50, 0.50], // other
    ];
    let base = BASES[class];
    let phase = rng.uniform_in(0.0, std::f64::consts::TAU);
    let freq = rng.uniform_in(0.9, 1.1);
    let mut out = vec![0.0; 3 * n * n];
    for py in 0..n {
        for px in 0..n {
            let x = px as f64;
            let y = py as f64;
            let t = match class % 8 {
                // several pattern families; class pairs that share a family
                // differ strongly in base color
                0 => 0.20 * ((x * 0.9 * freq + phase).sin()), // vertical stripes
                1 => 0.20 * ((y * 0.9 * freq + phase).sin()), // horizontal stripes
                2 => 0.18 * (((x + y) * 0.7 * freq + phase).sin()), // diagonal waves
                3 => {
                    // checker
                    if ((px / 4) + (py / 4)) % 2 == 0 {
                        0.15
                    } else {
                        -0.15
                    }
                }
                4 => 0.25 * (y / n as f64 - 0.5), // gradient
                5 => {
                    // speckle grid
                    if (px % 3 == 0) ^ (py % 3 == 0) {
                        0.12
                    } else {
                        -0.08
                    }
                }
                6 => 0.18 * ((x * 0.5 * freq + phase).sin() * (y * 0.5 * freq).cos()), // plaid
                _ => {
                    // rings
                    let cx = n as f64 / 2.0;
                    let d = ((x - cx).powi(2) + (y - cx).powi(2)).sqrt();
                    0.18 * ((d * 0.8 * freq + phase).sin())
                }
            };
            let grain = 0.02 * rng.normal();
            let idx = py * n + px;
            for c in 0..3 {
                out[c * n * n + idx] = (base[c] + t + grain).clamp(0.0, 1.0);
            }
        }
    }
    out
}

/// Texture patches for the 23-way general material head.
pub fn generate_materials(cfg: &DataConfig, seed: u64) -> Result<Vec<MaterialSample>> {
    cfg.validate()?;
    let n = cfg.image_size;
    let mut out = Vec::with_capacity(23 * cfg.material_patches_per_class);
    for class in 0..23 {
        for k in 0..cfg.material_patches_per_class {
            let mut rng = Rng::new(seed)
                .derive(0x7a7e)
                .derive(class as u64)
                .derive(k as u64);
            let rgb = render_material_patch(class, n, &mut rng);
            out.push(MaterialSample {
                id: format!("m{class:02}_k{k:03}"),
                image: Tensor::from_vec(&[3, n, n], rgb)?,
                class,
            });
        }
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// On-disk dataset format: manifest.json + one .bin blob per tensor
// ---------------------------------------------------------------------------

pub const MANIFEST_VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FileRefs {
    pub image: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub depth: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub reflection: Option<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SampleLabels {
    pub liveness: Liveness,
    pub attack: AttackType,
    pub material: MaterialLabel,
    pub identity: usize,
    pub attributes: BTreeMap<String, usize>,
    pub domain: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ManifestSample {
    pub id: String,
    pub files: FileRefs,
    pub image_shape: [usize; 3],
    pub map_shape: [usize; 3],
    pub labels: SampleLabels,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub version: u32,
    pub seed: u64,
    pub generator_config: DataConfig,
    pub samples: Vec<ManifestSample>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MaterialLabels {
    pub general_material: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MaterialManifestSample {
    pub id: String,
    pub files: FileRefs,
    pub image_shape: [usize; 3],
    pub labels: MaterialLabels,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MaterialManifest {
    pub version: u32,
    pub kind: String,
    pub seed: u64,
    pub generator_config: DataConfig,
    pub samples: Vec<MaterialManifestSample>,
}

fn write_blob(dir: &Path, name: &str, tensor: &Tensor) -> Result<()> {
    fs::write(dir.join(name), tensor.to_le_bytes())
        .map_err(|e| FasError::Io(format!("writing {name}: {e}")))
}

fn read_blob(dir: &Path, name: &str, shape: &[usize]) -> Result<Tensor> {
    let bytes =
        fs::read(dir.join(name)).map_err(|e| FasError::Io(format!("reading {name}: {e}")))?;
    Tensor::from_le_bytes(shape, &bytes)
}

/// Renders the corpus straight to disk and returns the manifest.
pub fn write_dataset(dir: &Path, cfg: &DataConfig, seed: u64) -> Result<DatasetManifest> {
    cfg.validate()?;
    fs::create_dir_all(dir).map_err(|e| FasError::Io(format!("creating {dir:?}: {e}")))?;
    let mut entries = Vec::new();
    for spec in scene_specs(cfg, seed) {
        let sample = render_scene(&spec)?;
        let files = FileRefs {
            image: format!("{}.image.bin", sample.id),
            depth: Some(format!("{}.depth.bin", sample.id)),
            reflection: Some(format!("{}.reflection.bin", sample.id)),
        };
        write_blob(dir, &files.image, &sample.image)?;
        write_blob(
            dir,
            files.depth.as_ref().expect("depth file"),
            &sample.depth_gt,
        )?;
        write_blob(
            dir,
            files.reflection.as_ref().expect("reflection file"),
            &sample.reflection_gt,
        )?;
        let mut attributes = BTreeMap::new();
        attributes.insert("glasses".to_string(), sample.attributes[0]);
        attributes.insert("tone".to_string(), sample.attributes[1]);
        entries.push(ManifestSample {
            id: sample.id.clone(),
            files,
            image_shape: [3, cfg.image_size, cfg.image_size],
            map_shape: [1, cfg.image_size, cfg.image_size],
            labels: SampleLabels {
                liveness: sample.liveness,
                attack: sample.attack,
                material: sample.material,
                identity: sample.identity,
                attributes,
                domain: sample.domain,
            },
        });
    }
    let manifest = DatasetManifest {
        version: MANIFEST_VERSION,
        seed,
        generator_config: cfg.clone(),
        samples: entries,
    };
    let json = serde_json::to_string_pretty(&manifest)
        .map_err(|e| FasError::Io(format!("serializing manifest: {e}")))?;
    fs::write(dir.join("manifest.json"), json)
        .map_err(|e| FasError::Io(format!("writing manifest: {e}")))?;
    Ok(manifest)
}

pub fn read_manifest(dir: &Path) -> Result<DatasetManifest> {
    let text = fs::read_to_string(dir.join("manifest.json"))
        .map_err(|e| FasError::Io(format!("reading manifest: {e}")))?;
    let manifest: DatasetManifest = serde_json::from_str(&text)
        .map_err(|e| FasError::Integrity(format!("manifest parse: {e}")))?;
    if manifest.version != MANIFEST_VERSION {
        return Err(FasError::Version {
            found: manifest.version,
            supported: MANIFEST_VERSION,
        });
    }
    Ok(manifest)
}

/// Loads a dataset directory written by `write_dataset`.
pub fn load_dataset(dir: &Path) -> Result<(DatasetManifest, Vec<Sample>)> {
    let manifest = read_manifest(dir)?;
    let mut samples = Vec::with_capacity(manifest.samples.len());
    for entry in &manifest.samples {
        let depth_file = entry.files.depth.as_ref().ok_or_else(|| {
            FasError::Integrity(format!("sample {} lacks a depth blob", entry.id))
        })?;
        let refl_file = entry.files.reflection.as_ref().ok_or_else(|| {
            FasError::Integrity(format!("sample {} lacks a reflection blob", entry.id))
        })?;
        samples.push(Sample {
            id: entry.id.clone(),
            image: read_blob(dir, &entry.files.image, &entry.image_shape)?,
            depth_gt: read_blob(dir, depth_file, &entry.map_shape)?,
            reflection_gt: read_blob(dir, refl_file, &entry.map_shape)?,
            material: entry.labels.material,
            liveness: entry.labels.liveness,
            attack: entry.labels.attack,
            identity: entry.labels.identity,
            attributes: vec![
                entry.labels.attributes.get("glasses").copied().unwrap_or(0),
                entry.labels.attributes.get("tone").copied().unwrap_or(0),
            ],
            domain: entry.labels.domain,
        });
    }
    Ok((manifest, samples))
}

/// Writes the material patch set with its own manifest.
pub fn write_materials(dir: &Path, cfg: &DataConfig, seed: u64) -> Result<MaterialManifest> {
    fs::create_dir_all(dir).map_err(|e| FasError::Io(format!("creating {dir:?}: {e}")))?;
    let patches = generate_materials(cfg, seed)?;
    let mut entries = Vec::new();
    for patch in &patches {
        let files = FileRefs {
            image: format!("{}.image.bin", patch.id),
            depth: None,
            reflection: None,
        };
        write_blob(dir, &files.image, &patch.image)?;
        entries.push(MaterialManifestSample {
            id: patch.id.clone(),
            files,
            image_shape: [3, cfg.image_size, cfg.image_size],
            labels: MaterialLabels {
                general_material: patch.class,
            },
        });
    }
    let manifest = MaterialManifest {
        version: MANIFEST_VERSION,
        kind: "materials".to_string(),
        seed,
        generator_config: cfg.clone(),
        samples: entries,
    };
    let json = serde_json::to_string_pretty(&manifest)
        .map_err(|e| FasError::Io(format!("serializing material manifest: {e}")))?;
    fs::write(dir.join("manifest.json"), json)
        .map_err(|e| FasError::Io(format!("writing material manifest: {e}")))?;
    Ok(manifest)
}

pub fn load_materials(dir: &Path) -> Result<Vec<MaterialSample>> {
    let text = fs::read_to_string(dir.join("manifest.json"))
        .map_err(|e| FasError::Io(format!("reading material manifest: {e}")))?;
    let manifest: MaterialManifest = serde_json::from_str(&text)
        .map_err(|e| FasError::Integrity(format!("material manifest parse: {e}")))?;
    if manifest.version != MANIFEST_VERSION {
        return Err(FasError::Version {
            found: manifest.version,
            supported: MANIFEST_VERSION,
        });
    }
    manifest
        .samples
        .iter()
        .map(|entry| {
            Ok(MaterialSample {
                id: entry.id.clone(),
                image: read_blob(dir, &entry.files.image, &entry.image_shape)?,
                class: entry.labels.general_material,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(attack: AttackType, domain: usize, identity: usize, k: usize) -> SceneSpec {
        SceneSpec {
            attack,
            domain,
            identity,
            sample_index: k,
            seed: 7,
            image_size: 32,
        }
    }

    #[test]
    fn spoof_depth_ground_truth_is_all_zero() {
        for attack in AttackType::ATTACKS {
            let s = render_scene(&spec(attack, 1, 2, 0)).unwrap();
            assert!(s.depth_gt.data().iter().all(|&v| v == 0.0), "{attack:?}");
        }
    }

    #[test]
    fn genuine_reflection_ground_truth_is_all_zero() {
        let s = render_scene(&spec(AttackType::None, 0, 3, 1)).unwrap();
        assert!(s.reflection_gt.data().iter().all(|&v| v == 0.0));
        assert!(s.depth_gt.data().iter().any(|&v| v > 0.0));
    }

    #[test]
    fn replay_writes_reflection_blobs() {
        let s = render_scene(&spec(AttackType::Replay, 0, 3, 1)).unwrap();
        let peak = s.reflection_gt.data().iter().cloned().fold(0.0, f64::max);
        assert!(peak >= 0.4 - 1e-9, "peak glare {peak}");
    }

    #[test]
    fn material_follows_attack_medium() {
        assert_eq!(
            render_scene(&spec(AttackType::None, 0, 0, 0))
                .unwrap()
                .material,
            MaterialLabel::Skin
        );
        assert_eq!(
            render_scene(&spec(AttackType::Replay, 0, 0, 0))
                .unwrap()
                .material,
            MaterialLabel::Glass
        );
        assert_eq!(
            render_scene(&spec(AttackType::Print, 0, 0, 0))
                .unwrap()
                .material,
            MaterialLabel::Paper
        );
        assert_eq!(
            render_scene(&spec(AttackType::CutPhoto, 0, 0, 0))
                .unwrap()
                .material,
            MaterialLabel::Paper
        );
    }

    #[test]
    fn render_is_deterministic() {
        let a = render_scene(&spec(AttackType::Replay, 2, 4, 3)).unwrap();
        let b = render_scene(&spec(AttackType::Replay, 2, 4, 3)).unwrap();
        assert_eq!(a.image.to_le_bytes(), b.image.to_le_bytes());
        assert_eq!(a.reflection_gt.to_le_bytes(), b.reflection_gt.to_le_bytes());
    }

    #[test]
    fn ground_truth_is_domain_invariant() {
        // same (identity, attack, k) across domains: identical maps and
        // labels, differing image photometrics
        let a = render_scene(&spec(AttackType::None, 0, 5, 2)).unwrap();
        let b = render_scene(&spec(AttackType::None, 3, 5, 2)).unwrap();
        assert_eq!(a.depth_gt.to_le_bytes(), b.depth_gt.to_le_bytes());
        assert_eq!(a.reflection_gt.to_le_bytes(), b.reflection_gt.to_le_bytes());
        assert_eq!(a.attributes, b.attributes);
        assert_ne!(a.image.to_le_bytes(), b.image.to_le_bytes());
    }

    #[test]
    fn images_stay_in_unit_range() {
        for attack in AttackType::ALL {
            for domain in 0..4 {
                let s = render_scene(&spec(attack, domain, 1, 0)).unwrap();
                assert!(s.image.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
                assert!(s.depth_gt.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
                assert!(s
                    .reflection_gt
                    .data()
                    .iter()
                    .all(|&v| (0.0..=1.0).contains(&v)));
            }
        }
    }

    #[test]
    fn corpus_counts_match_config() {
        let cfg = DataConfig {
            identities: 4,
            samples_per_cell: 2,
            ..Default::default()
        };
        let samples = generate_samples(&cfg, 3).unwrap();
        assert_eq!(samples.len(), 4 * 4 * 4 * 2);
        let spoof_count = samples
            .iter()
            .filter(|s| s.liveness == Liveness::Spoof)
            .count();
        let zero_depth = samples
            .iter()
            .filter(|s| s.depth_gt.data().iter().all(|&v| v == 0.0))
            .count();
        assert_eq!(spoof_count, zero_depth);
    }

    #[test]
    fn default_config_yields_640_samples() {
        // 4 domains x 4 types x 8 identities x 5 per cell
        let cfg = DataConfig::default();
        assert_eq!(cfg.total_samples(), 640);
        let specs = scene_specs(&cfg, 1);
        assert_eq!(specs.len(), 640);
    }

    #[test]
    fn material_set_covers_every_class() {
        let cfg = DataConfig {
            material_patches_per_class: 20,
            ..Default::default()
        };
        let patches = generate_materials(&cfg, 11).unwrap();
        assert_eq!(patches.len(), 23 * 20);
        for class in 0..23 {
            assert!(patches.iter().any(|p| p.class == class));
        }
        let again = generate_materials(&cfg, 11).unwrap();
        assert_eq!(
            patches[100].image.to_le_bytes(),
            again[100].image.to_le_bytes()
        );
    }

    #[test]
    fn dataset_round_trips_through_disk() {
        let dir = std::env::temp_dir().join(format!("fas_synth_test_{}", std::process::id()));
        let _ = fs::remove_dir_all(&dir);
        let cfg = DataConfig {
            domains: 2,
            identities: 4,
            samples_per_cell: 1,
            ..Default::default()
        };
        let manifest = write_dataset(&dir, &cfg, 5).unwrap();
        assert_eq!(manifest.samples.len(), cfg.total_samples());
        let (loaded_manifest, samples) = load_dataset(&dir).unwrap();
        assert_eq!(loaded_manifest.samples.len(), samples.len());
        let direct = generate_samples(&cfg, 5).unwrap();
        for (on_disk, fresh) in samples.iter().zip(&direct) {
            assert_eq!(on_disk.id, fresh.id);
            assert_eq!(on_disk.image.to_le_bytes(), fresh.image.to_le_bytes());
            assert_eq!(on_disk.depth_gt.to_le_bytes(), fresh.depth_gt.to_le_bytes());
        }
        fs::remove_dir_all(&dir).unwrap();
    }
}
