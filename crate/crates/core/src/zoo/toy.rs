//! Deterministic toy world: a synthetic shapes dataset and an analytic,
//! differentiable encoder bundle over it.
//!
//! The encoder's features are smooth closed forms in the input (channel
//! statistics, a per-channel pooled grid, and fixed signed block patterns), so
//! input gradients are exact and verifiable against finite differences. Class
//! contrast is kept deliberately low so that attack budgets quoted as
//! fractions of the dynamic range are meaningful at desk scale.

use ndarray::{Array1, Array2, Array3, ArrayView1};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;
use crate::tensor::Image;
use crate::zoo::{check_input_shape, Encoder, LossSpec};

/// Shape palette for class rendering.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Shape {
    Circle,
    Square,
    Triangle,
    Diamond,
    Cross,
    Ring,
}

impl Shape {
    pub fn name(&self) -> &'static str {
        match self {
            Shape::Circle => "circle",
            Shape::Square => "square",
            Shape::Triangle => "triangle",
            Shape::Diamond => "diamond",
            Shape::Cross => "cross",
            Shape::Ring => "ring",
        }
    }

    /// Home position as a fraction of the image side. Each shape renders in
    /// its own region so that class signatures occupy distinct pooled blocks.
    fn anchor(&self) -> (f64, f64) {
        match self {
            Shape::Circle => (0.30, 0.30),
            Shape::Square => (0.30, 0.70),
            Shape::Triangle => (0.70, 0.30),
            Shape::Diamond => (0.70, 0.70),
            Shape::Cross => (0.50, 0.50),
            Shape::Ring => (0.50, 0.50),
        }
    }

    fn contains(&self, di: f64, dj: f64, r: f64) -> bool {
        match self {
            Shape::Circle => di * di + dj * dj <= r * r,
            Shape::Square => di.abs() <= r * 0.88 && dj.abs() <= r * 0.88,
            Shape::Triangle => {
                // apex up; di measured down from center
                let u = (di + r) / (2.0 * r);
                (0.0..=1.0).contains(&u) && dj.abs() <= u * r
            }
            Shape::Diamond => di.abs() + dj.abs() <= r * 1.15,
            Shape::Cross => {
                (di.abs() <= r * 0.35 && dj.abs() <= r) || (dj.abs() <= r * 0.35 && di.abs() <= r)
            }
            Shape::Ring => {
                let d2 = di * di + dj * dj;
                d2 <= r * r && d2 >= (0.55 * r) * (0.55 * r)
            }
        }
    }
}

/// A named RGB tint direction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Color {
    pub name: String,
    pub rgb: [f64; 3],
}

/// Out-of-distribution sample kinds; disjoint from the ID shape–color pairs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum OodKind {
    /// Every pixel independently uniform on [0, 1].
    UniformNoise,
    /// Background texture only, no shape.
    FlatNoise,
    /// A shape–color pair withheld from the ID class set.
    HeldOutPair { shape: Shape, color: Color },
}

impl OodKind {
    pub fn name(&self) -> String {
        match self {
            OodKind::UniformNoise => "uniform_noise".into(),
            OodKind::FlatNoise => "flat_noise".into(),
            OodKind::HeldOutPair { shape, color } => {
                format!("held_out_{}_{}", color.name, shape.name())
            }
        }
    }
}

/// Configuration of the synthetic world: class palettes, rendering constants,
/// and OOD sources.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ToyWorldSpec {
    pub num_id_classes: usize,
    pub image_size: usize,
    pub shapes: Vec<Shape>,
    pub colors: Vec<Color>,
    pub ood_kinds: Vec<OodKind>,
    pub samples_per_class: usize,
    /// Background noise half-amplitude around 0.5.
    pub background_amplitude: f64,
    /// Shape tint strength added on top of the background.
    pub tint_amplitude: f64,
}

fn default_colors() -> Vec<Color> {
    // unit tints with pairwise cosine in [0, 0.71]: nonnegative correlations
    // keep a reversed class signature anti-aligned with every prototype,
    // while the shape-dependent pooled features pull the cosines down.
    [
        ("red", [1.0, 0.0, 0.0]),
        ("green", [0.0, 1.0, 0.0]),
        ("blue", [0.0, 0.0, 1.0]),
        ("yellow", [0.707, 0.707, 0.0]),
        ("violet", [0.707, 0.0, 0.707]),
        ("teal", [0.0, 0.707, 0.707]),
    ]
    .iter()
    .map(|(n, rgb)| Color { name: (*n).into(), rgb: *rgb })
    .collect()
}

impl Default for ToyWorldSpec {
    fn default() -> Self {
        let colors = default_colors();
        ToyWorldSpec {
            num_id_classes: 5,
            image_size: 32,
            shapes: vec![
                Shape::Circle,
                Shape::Square,
                Shape::Triangle,
                Shape::Diamond,
                Shape::Cross,
            ],
            ood_kinds: vec![
                OodKind::UniformNoise,
                OodKind::FlatNoise,
                OodKind::HeldOutPair { shape: Shape::Ring, color: colors[0].clone() },
            ],
            colors,
            samples_per_class: 40,
            background_amplitude: 0.03,
            tint_amplitude: 0.03,
        }
    }
}

impl ToyWorldSpec {
    pub fn validate(&self) -> Result<()> {
        if self.num_id_classes < 2 {
            return Err(Error::Config("toy world needs at least 2 ID classes".into()));
        }
        if self.shapes.len() < self.num_id_classes || self.colors.len() < self.num_id_classes {
            return Err(Error::Config(
                "shape/color palettes shorter than the class count".into(),
            ));
        }
        let id_pairs: Vec<(Shape, &Color)> = (0..self.num_id_classes)
            .map(|k| (self.shapes[k], &self.colors[k]))
            .collect();
        for (i, a) in id_pairs.iter().enumerate() {
            for b in id_pairs.iter().skip(i + 1) {
                if a.0 == b.0 && a.1 == b.1 {
                    return Err(Error::Config("duplicate ID shape-color pair".into()));
                }
            }
        }
        for kind in &self.ood_kinds {
            if let OodKind::HeldOutPair { shape, color } = kind {
                if id_pairs.iter().any(|(s, c)| s == shape && *c == color) {
                    return Err(Error::Config(format!(
                        "OOD pair {} collides with an ID class",
                        kind.name()
                    )));
                }
            }
        }
        if !(self.background_amplitude > 0.0 && self.tint_amplitude > 0.0) {
            return Err(Error::Config("amplitudes must be positive".into()));
        }
        Ok(())
    }

    pub fn class_name(&self, class: usize) -> String {
        format!("{}_{}", self.colors[class].name, self.shapes[class].name())
    }

    pub fn class_names(&self) -> Vec<String> {
        (0..self.num_id_classes).map(|k| self.class_name(k)).collect()
    }
}

/// Dataset split selector.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
    Test,
    Ood,
}

impl Split {
    fn tag(&self) -> u64 {
        match self {
            Split::Train => 0x71,
            Split::Val => 0x72,
            Split::Test => 0x73,
            Split::Ood => 0x74,
        }
    }
}

/// Ground-truth label.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Label {
    Id(usize),
    Ood(String),
}

/// One generated sample.
#[derive(Debug, Clone)]
pub struct Sample {
    pub id: String,
    pub image: Image,
    pub label: Label,
}

fn render_background(spec: &ToyWorldSpec, rng: &mut impl Rng) -> Image {
    let n = spec.image_size;
    let b = spec.background_amplitude;
    Array3::from_shape_fn((3, n, n), |_| 0.5 + rng.gen_range(-b..=b))
}

fn render_shape(spec: &ToyWorldSpec, shape: Shape, color: &Color, rng: &mut impl Rng) -> Image {
    let n = spec.image_size as f64;
    let mut img = render_background(spec, rng);
    let jitter = n * 0.05;
    let (ay, ax) = shape.anchor();
    let cy = n * ay + rng.gen_range(-jitter..=jitter);
    let cx = n * ax + rng.gen_range(-jitter..=jitter);
    let r = n * 0.22 * (1.0 + rng.gen_range(-0.1..=0.1));
    for i in 0..spec.image_size {
        for j in 0..spec.image_size {
            if shape.contains(i as f64 - cy, j as f64 - cx, r) {
                for ch in 0..3 {
                    let v = img[[ch, i, j]] + spec.tint_amplitude * color.rgb[ch];
                    img[[ch, i, j]] = v.clamp(0.0, 1.0);
                }
            }
        }
    }
    img
}

fn render_ood(spec: &ToyWorldSpec, kind: &OodKind, rng: &mut impl Rng) -> Image {
    let n = spec.image_size;
    match kind {
        OodKind::UniformNoise => Array3::from_shape_fn((3, n, n), |_| rng.gen::<f64>()),
        OodKind::FlatNoise => render_background(spec, rng),
        OodKind::HeldOutPair { shape, color } => render_shape(spec, *shape, color, rng),
    }
}

/// Generate a deterministic dataset split. ID splits are balanced across
/// classes; the OOD split draws `samples_per_class` images per OOD kind.
pub fn generate_toy_dataset(spec: &ToyWorldSpec, split: Split, seed: u64) -> Result<Vec<Sample>> {
    spec.validate()?;
    let mut out = Vec::new();
    match split {
        Split::Ood => {
            for (kidx, kind) in spec.ood_kinds.iter().enumerate() {
                for idx in 0..spec.samples_per_class {
                    let mut r = rng::stream(&[seed, split.tag(), 0x0dd, kidx as u64, idx as u64]);
                    out.push(Sample {
                        id: format!("ood/{}/{idx}", kind.name()),
                        image: render_ood(spec, kind, &mut r),
                        label: Label::Ood(kind.name()),
                    });
                }
            }
        }
        _ => {
            for class in 0..spec.num_id_classes {
                for idx in 0..spec.samples_per_class {
                    let mut r = rng::stream(&[seed, split.tag(), class as u64, idx as u64]);
                    out.push(Sample {
                        id: format!("{:?}/{}/{idx}", split, spec.class_name(class)).to_lowercase(),
                        image: render_shape(
                            spec,
                            spec.shapes[class],
                            &spec.colors[class],
                            &mut r,
                        ),
                        label: Label::Id(class),
                    });
                }
            }
        }
    }
    Ok(out)
}

/// Export a dataset split as a `<split>/<class_name>/<index>.png` tree.
pub fn export_split(samples: &[Sample], root: &std::path::Path) -> Result<()> {
    for sample in samples {
        let rel = std::path::Path::new(&sample.id);
        let path = root.join(rel).with_extension("png");
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent)?;
        }
        crate::tensor::save_png(&sample.image, &path)?;
    }
    Ok(())
}

/// Feature scaling and layout of the analytic encoder.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToyBundleConfig {
    pub seed: u64,
    /// Side of the pooled luminance grid; must divide the image size.
    pub pool_grid: usize,
    /// Number of fixed signed block patterns.
    pub num_patterns: usize,
    pub embed_dim: usize,
    pub scale_mean: f64,
    pub scale_var: f64,
    pub scale_pool: f64,
    pub scale_pattern: f64,
}

impl ToyBundleConfig {
    pub fn with_seed(seed: u64) -> Self {
        ToyBundleConfig {
            seed,
            pool_grid: 4,
            num_patterns: 32,
            embed_dim: 128,
            scale_mean: 4.0,
            scale_var: 0.2,
            scale_pool: 4.0,
            scale_pattern: 0.5,
        }
    }
}

/// The analytic differentiable bundle over the toy world.
pub struct ToyBundle {
    id: String,
    world: ToyWorldSpec,
    cfg: ToyBundleConfig,
    /// num_patterns × 3·pool_grid² signs.
    patterns: Array2<f64>,
    /// embed_dim × feature_dim projector.
    projector: Array2<f64>,
    class_names: Vec<String>,
    /// K × embed_dim unit rows.
    prototypes: Array2<f64>,
}

struct FeatureCache {
    means: [f64; 3],
}

impl ToyBundle {
    pub fn world(&self) -> &ToyWorldSpec {
        &self.world
    }

    pub fn config(&self) -> &ToyBundleConfig {
        &self.cfg
    }

    pub fn class_names(&self) -> &[String] {
        &self.class_names
    }

    /// K × embed_dim prototype matrix (projected class centroids, unit rows).
    pub fn prototypes(&self) -> &Array2<f64> {
        &self.prototypes
    }

    /// Per-channel block means: 3 × pool_grid² values.
    fn pool_channels(&self, x: &Image) -> Array3<f64> {
        let p = self.cfg.pool_grid;
        let n = self.world.image_size;
        let block = n / p;
        let mut pool = Array3::zeros((3, p, p));
        for ch in 0..3 {
            for bi in 0..p {
                for bj in 0..p {
                    let mut acc = 0.0;
                    for i in bi * block..(bi + 1) * block {
                        for j in bj * block..(bj + 1) * block {
                            acc += x[[ch, i, j]];
                        }
                    }
                    pool[[ch, bi, bj]] = acc / (block * block) as f64;
                }
            }
        }
        pool
    }

    fn feature_forward(&self, x: &Image) -> (Array1<f64>, FeatureCache) {
        let (_, h, w) = x.dim();
        let npix = (h * w) as f64;
        let mut means = [0.0f64; 3];
        let mut vars = [0.0f64; 3];
        for c in 0..3 {
            let ch = x.index_axis(ndarray::Axis(0), c);
            let m = ch.sum() / npix;
            means[c] = m;
            vars[c] = ch.iter().map(|&v| (v - m) * (v - m)).sum::<f64>() / npix;
        }
        let pool = self.pool_channels(x);
        let p3 = 3 * self.cfg.pool_grid * self.cfg.pool_grid;
        let mut f = Vec::with_capacity(self.feature_dim());
        for c in 0..3 {
            f.push(self.cfg.scale_mean * (means[c] - 0.5));
        }
        for c in 0..3 {
            f.push(self.cfg.scale_var * (vars[c] - 0.005));
        }
        let centered: Vec<f64> = pool.iter().map(|&v| v - 0.5).collect();
        for &v in &centered {
            f.push(self.cfg.scale_pool * v);
        }
        for k in 0..self.cfg.num_patterns {
            let mut acc = 0.0;
            for (b, &v) in centered.iter().enumerate() {
                acc += self.patterns[[k, b]] * v;
            }
            f.push(self.cfg.scale_pattern * acc / p3 as f64);
        }
        (Array1::from(f), FeatureCache { means })
    }

    /// Scatter a feature-space gradient back to pixel space.
    fn feature_adjoint(&self, x: &Image, cache: &FeatureCache, g: &Array1<f64>) -> Image {
        let (c, h, w) = x.dim();
        let npix = (h * w) as f64;
        let p = self.cfg.pool_grid;
        let p2 = p * p;
        let block = h / p;
        let block_px = (block * block) as f64;
        let mut dx = Array3::zeros((c, h, w));

        // channel means and variances
        for ch in 0..3 {
            let gm = self.cfg.scale_mean * g[ch] / npix;
            let gv = self.cfg.scale_var * g[3 + ch];
            for i in 0..h {
                for j in 0..w {
                    dx[[ch, i, j]] +=
                        gm + gv * 2.0 * (x[[ch, i, j]] - cache.means[ch]) / npix;
                }
            }
        }

        // pooled grid receives both its direct gradient and the pattern pullback
        let p3 = 3 * p2;
        for ch in 0..3 {
            for bi in 0..p {
                for bj in 0..p {
                    let b = ch * p2 + bi * p + bj;
                    let mut acc = self.cfg.scale_pool * g[6 + b];
                    for k in 0..self.cfg.num_patterns {
                        acc += self.cfg.scale_pattern * g[6 + p3 + k] * self.patterns[[k, b]]
                            / p3 as f64;
                    }
                    let spread = acc / block_px;
                    for i in bi * block..(bi + 1) * block {
                        for j in bj * block..(bj + 1) * block {
                            dx[[ch, i, j]] += spread;
                        }
                    }
                }
            }
        }
        dx
    }
}

const NORM_FLOOR: f64 = 1e-12;

fn unit(v: ArrayView1<f64>) -> Array1<f64> {
    let n = v.dot(&v).sqrt().max(NORM_FLOOR);
    v.mapv(|x| x / n)
}

impl Encoder for ToyBundle {
    fn id(&self) -> &str {
        &self.id
    }

    fn input_shape(&self) -> (usize, usize, usize) {
        (3, self.world.image_size, self.world.image_size)
    }

    fn feature_dim(&self) -> usize {
        6 + 3 * self.cfg.pool_grid * self.cfg.pool_grid + self.cfg.num_patterns
    }

    fn embed_dim(&self) -> usize {
        self.cfg.embed_dim
    }

    fn has_text_tower(&self) -> bool {
        true
    }

    fn differentiable(&self) -> bool {
        true
    }

    fn features(&self, x: &Image) -> Result<Array1<f64>> {
        check_input_shape(self, x)?;
        Ok(self.feature_forward(x).0)
    }

    fn project(&self, features: ArrayView1<f64>) -> Result<Array1<f64>> {
        if features.len() != self.feature_dim() {
            return Err(Error::Config(format!(
                "bundle {}: feature length {} != {}",
                self.id,
                features.len(),
                self.feature_dim()
            )));
        }
        Ok(unit(self.projector.dot(&features).view()))
    }

    fn encode_text(&self, prompt: &str) -> Result<Array1<f64>> {
        let key = prompt
            .strip_prefix("this is a photo of a ")
            .unwrap_or(prompt)
            .replace(' ', "_");
        match self.class_names.iter().position(|n| *n == key) {
            Some(k) => Ok(self.prototypes.row(k).to_owned()),
            None => Err(Error::NotFound(format!(
                "bundle {}: unknown toy class '{key}'",
                self.id
            ))),
        }
    }

    fn value_and_grad(&self, loss: &LossSpec, x: &Image) -> Result<(f64, Image)> {
        check_input_shape(self, x)?;
        let (f, cache) = self.feature_forward(x);
        let (value, df, pixel_w) =
            crate::zoo::loss_value_and_feature_grad(loss, &f, &self.projector, x)?;
        let mut grad = self.feature_adjoint(x, &cache, &df);
        if pixel_w != 0.0 {
            grad += pixel_w;
        }
        if !value.is_finite() || grad.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric(format!(
                "nonfinite loss or gradient on bundle {}",
                self.id
            )));
        }
        Ok((value, grad))
    }
}

/// Build the analytic toy bundle for a world, gated on zero-shot separability.
pub fn build_toy_bundle(world: &ToyWorldSpec, seed: u64) -> Result<ToyBundle> {
    build_toy_bundle_with(world, &ToyBundleConfig::with_seed(seed))
}

/// As [`build_toy_bundle`] with explicit feature configuration.
pub fn build_toy_bundle_with(world: &ToyWorldSpec, cfg: &ToyBundleConfig) -> Result<ToyBundle> {
    world.validate()?;
    if cfg.pool_grid == 0 || world.image_size % cfg.pool_grid != 0 {
        return Err(Error::Config(format!(
            "pool grid {} must divide image size {}",
            cfg.pool_grid, world.image_size
        )));
    }
    if cfg.embed_dim == 0 {
        return Err(Error::Config("embed_dim must be positive".into()));
    }
    let p3 = 3 * cfg.pool_grid * cfg.pool_grid;
    let feature_dim = 6 + p3 + cfg.num_patterns;

    let mut r = rng::stream(&[cfg.seed, 0xba7]);
    let patterns = Array2::from_shape_fn((cfg.num_patterns, p3), |_| {
        if r.gen::<bool>() {
            1.0
        } else {
            -1.0
        }
    });
    let mut r = rng::stream(&[cfg.seed, 0x9a0]);
    let scale = 1.0 / (feature_dim as f64).sqrt();
    let projector =
        Array2::from_shape_fn((cfg.embed_dim, feature_dim), |_| r.gen_range(-1.0..1.0) * scale);

    let mut bundle = ToyBundle {
        id: format!("toy-s{}-p{}-m{}", cfg.seed, cfg.pool_grid, cfg.num_patterns),
        world: world.clone(),
        cfg: cfg.clone(),
        patterns,
        projector,
        class_names: world.class_names(),
        prototypes: Array2::zeros((world.num_id_classes, cfg.embed_dim)),
    };

    // prototypes: projected class centroids over a seeded reference batch
    let n_proto = 64;
    for class in 0..world.num_id_classes {
        let mut centroid: Array1<f64> = Array1::zeros(cfg.embed_dim);
        for idx in 0..n_proto {
            let mut sr = rng::stream(&[cfg.seed, 0x9907, class as u64, idx as u64]);
            let img = render_shape(world, world.shapes[class], &world.colors[class], &mut sr);
            let feats = bundle.feature_forward(&img).0;
            centroid += &bundle.project(feats.view())?;
        }
        let proto = unit(centroid.view());
        bundle.prototypes.row_mut(class).assign(&proto);
    }

    // separability gate: zero-shot accuracy on a held-out validation split
    let val = generate_toy_dataset(world, Split::Val, cfg.seed ^ 0x5a5a)?;
    let mut hits = 0usize;
    for sample in &val {
        let enc = crate::zoo::encode_image(&bundle, &sample.image)?;
        let sims = bundle.prototypes.dot(&enc.projected);
        let pred = argmax(sims.view());
        if matches!(sample.label, Label::Id(k) if k == pred) {
            hits += 1;
        }
    }
    let acc = hits as f64 / val.len() as f64;
    if acc <= 0.90 {
        return Err(Error::Config(format!(
            "toy bundle accuracy gate failed: zero-shot accuracy {acc:.3} <= 0.90; \
             the world's classes are not separable, regenerate palettes"
        )));
    }
    Ok(bundle)
}

/// Argmax with lowest-index tie-break.
pub fn argmax(v: ArrayView1<f64>) -> usize {
    let mut best = 0;
    for i in 1..v.len() {
        if v[i] > v[best] {
            best = i;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::zoo::{encode_image, format_prompt, LossSpec, LossTerm};

    fn small_world() -> ToyWorldSpec {
        let mut w = ToyWorldSpec::default();
        w.samples_per_class = 8;
        w
    }

    #[test]
    fn dataset_is_deterministic_and_balanced() {
        let w = small_world();
        let a = generate_toy_dataset(&w, Split::Test, 0).unwrap();
        let b = generate_toy_dataset(&w, Split::Test, 0).unwrap();
        let c = generate_toy_dataset(&w, Split::Test, 1).unwrap();
        assert_eq!(a.len(), w.num_id_classes * w.samples_per_class);
        assert!(a.iter().zip(&b).all(|(x, y)| x.image == y.image && x.id == y.id));
        assert!(a.iter().zip(&c).any(|(x, y)| x.image != y.image));
        for k in 0..w.num_id_classes {
            let n = a.iter().filter(|s| s.label == Label::Id(k)).count();
            assert_eq!(n, w.samples_per_class);
        }
    }

    #[test]
    fn splits_are_disjoint_streams() {
        let w = small_world();
        let tr = generate_toy_dataset(&w, Split::Train, 0).unwrap();
        let te = generate_toy_dataset(&w, Split::Test, 0).unwrap();
        assert!(tr.iter().zip(&te).any(|(a, b)| a.image != b.image));
    }

    #[test]
    fn ood_split_covers_all_kinds() {
        let w = small_world();
        let ood = generate_toy_dataset(&w, Split::Ood, 0).unwrap();
        assert_eq!(ood.len(), w.ood_kinds.len() * w.samples_per_class);
        for kind in &w.ood_kinds {
            assert!(ood.iter().any(|s| s.label == Label::Ood(kind.name())));
        }
    }

    #[test]
    fn images_stay_in_unit_range() {
        let w = small_world();
        for split in [Split::Test, Split::Ood] {
            for s in generate_toy_dataset(&w, split, 0).unwrap() {
                assert!(s.image.iter().all(|&v| (0.0..=1.0).contains(&v)));
            }
        }
    }

    #[test]
    fn world_validation_rejects_bad_specs() {
        let mut w = ToyWorldSpec::default();
        w.num_id_classes = 1;
        assert!(w.validate().is_err());
        let mut w = ToyWorldSpec::default();
        w.num_id_classes = 6;
        w.shapes.push(Shape::Ring);
        w.colors[5] = w.colors[0].clone(); // ring_red collides with the OOD pair
        assert!(w.validate().is_err());
        let mut w = ToyWorldSpec::default();
        w.tint_amplitude = 0.0;
        assert!(w.validate().is_err());
    }

    #[test]
    fn bundle_is_deterministic_per_seed() {
        let w = small_world();
        let a = build_toy_bundle(&w, 1).unwrap();
        let b = build_toy_bundle(&w, 1).unwrap();
        let c = build_toy_bundle(&w, 2).unwrap();
        assert_eq!(a.prototypes(), b.prototypes());
        assert_ne!(a.prototypes(), c.prototypes());
        let x = generate_toy_dataset(&w, Split::Test, 0).unwrap()[0].image.clone();
        assert_eq!(a.features(&x).unwrap(), b.features(&x).unwrap());
    }

    #[test]
    fn prototypes_are_unit_and_separated() {
        let w = small_world();
        let b = build_toy_bundle(&w, 1).unwrap();
        let p = b.prototypes();
        for i in 0..p.nrows() {
            assert!((p.row(i).dot(&p.row(i)) - 1.0).abs() < 1e-9);
            for j in 0..i {
                let c = p.row(i).dot(&p.row(j));
                assert!(c.abs() < 0.5, "prototypes {i},{j} too correlated: {c}");
            }
        }
    }

    #[test]
    fn encode_text_returns_class_prototypes() {
        let w = small_world();
        let b = build_toy_bundle(&w, 1).unwrap();
        for (k, name) in w.class_names().iter().enumerate() {
            let e = b.encode_text(&format_prompt(name).unwrap()).unwrap();
            assert_eq!(e, b.prototypes().row(k).to_owned());
        }
        assert!(b.encode_text("this is a photo of a warthog").is_err());
    }

    #[test]
    fn accuracy_gate_rejects_inseparable_worlds() {
        // a vanishing tint makes classes indistinguishable from background
        let mut w = small_world();
        w.tint_amplitude = 1e-6;
        match build_toy_bundle(&w, 1) {
            Err(e) => assert!(e.to_string().contains("accuracy gate"), "got: {e}"),
            Ok(_) => panic!("gate should reject a vanishing tint"),
        }
    }

    /// Central finite differences over a random subset of pixels.
    fn fd_grad(b: &ToyBundle, loss: &LossSpec, x: &Image, picks: &[(usize, usize, usize)]) -> Vec<f64> {
        let h = 1e-6;
        picks
            .iter()
            .map(|&(c, i, j)| {
                let mut xp = x.clone();
                xp[[c, i, j]] += h;
                let mut xm = x.clone();
                xm[[c, i, j]] -= h;
                let (vp, _) = b.value_and_grad(loss, &xp).unwrap();
                let (vm, _) = b.value_and_grad(loss, &xm).unwrap();
                (vp - vm) / (2.0 * h)
            })
            .collect()
    }

    #[test]
    fn analytic_gradient_matches_finite_differences() {
        use rand::Rng;
        let w = small_world();
        let b = build_toy_bundle(&w, 1).unwrap();
        let x = generate_toy_dataset(&w, Split::Test, 0).unwrap()[3].image.clone();
        let mut r = crate::rng::stream(&[0xfd]);
        let picks: Vec<(usize, usize, usize)> = (0..24)
            .map(|_| (r.gen_range(0..3), r.gen_range(0..32), r.gen_range(0..32)))
            .collect();
        let anchor = b.features(&x).unwrap();
        let e0 = encode_image(&b, &x).unwrap().projected;
        let specs = [
            LossSpec::single(LossTerm::PixelMean),
            LossSpec::single(LossTerm::FeatureCosine { anchor: anchor.mapv(|v| v + 0.1) }),
            LossSpec {
                terms: vec![
                    (1.0, LossTerm::EmbedCosine { target: e0.mapv(|v| -v) }),
                    (-0.25, LossTerm::EmbedCosine { target: e0 }),
                ],
            },
        ];
        for loss in &specs {
            let (_, g) = b.value_and_grad(loss, &x).unwrap();
            let fd = fd_grad(&b, loss, &x, &picks);
            for (&(c, i, j), &f) in picks.iter().zip(&fd) {
                let a = g[[c, i, j]];
                let denom = f.abs().max(a.abs());
                // absolute floor absorbs finite-difference cancellation noise
                assert!(
                    (a - f).abs() < 1e-8 || (a - f).abs() / denom < 1e-4,
                    "grad mismatch at ({c},{i},{j}): analytic {a} vs fd {f}"
                );
            }
        }
    }

    #[test]
    fn export_split_writes_png_tree() {
        let w = small_world();
        let samples = generate_toy_dataset(&w, Split::Test, 0).unwrap();
        let dir = tempfile::tempdir().unwrap();
        export_split(&samples[..3], dir.path()).unwrap();
        let first = dir.path().join(format!("{}.png", samples[0].id));
        assert!(first.exists(), "missing {}", first.display());
    }

    #[test]
    fn argmax_breaks_ties_low() {
        use ndarray::arr1;
        assert_eq!(argmax(arr1(&[1.0, 3.0, 3.0]).view()), 1);
        assert_eq!(argmax(arr1(&[5.0]).view()), 0);
    }
}
