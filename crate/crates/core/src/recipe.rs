//! Edit recipes: a flat `key = value` document naming a pipeline, its
//! hyperparameters and its input assets, plus the runner shared by every
//! front end.
//!
//! ```text
//! kind = inpaint
//! image = photo.png
//! mask = hole.png
//! variations = 3
//! ```

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};

use crate::apps::{self, Init, Pipeline, StyleSource};
use crate::blocks::Networks;
use crate::error::{Error, Result};
use crate::image_buf::ImageBuffer;
use crate::latent_file;
use crate::masks::{self, BlurConfig, Mask};
use crate::optim::{Progress, StageRecord};
use crate::synthesis::{NoiseBank, StyleCode};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum EditKind {
    Reconstruct,
    Crossover,
    Inpaint,
    Scribble,
    LocalStyle,
    AttributeTransfer,
    ChannelAverage,
    MaskedInterpolation,
}

impl EditKind {
    pub const ALL: [EditKind; 8] = [
        EditKind::Reconstruct,
        EditKind::Crossover,
        EditKind::Inpaint,
        EditKind::Scribble,
        EditKind::LocalStyle,
        EditKind::AttributeTransfer,
        EditKind::ChannelAverage,
        EditKind::MaskedInterpolation,
    ];

    pub fn name(self) -> &'static str {
        match self {
            EditKind::Reconstruct => "reconstruct",
            EditKind::Crossover => "crossover",
            EditKind::Inpaint => "inpaint",
            EditKind::Scribble => "scribble",
            EditKind::LocalStyle => "local_style",
            EditKind::AttributeTransfer => "attribute_transfer",
            EditKind::ChannelAverage => "channel_average",
            EditKind::MaskedInterpolation => "masked_interpolation",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::recipe("kind", format!("unknown kind `{s}`")))
    }

    /// Documented keys for this kind, common keys included.
    pub fn fields(self) -> Vec<FieldSpec> {
        let mut out = common_fields();
        out.extend(kind_fields(self));
        out
    }
}

impl fmt::Display for EditKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum FieldType {
    /// A reference resolved by the front end: a path or a content address.
    Asset,
    Count { min: usize, max: usize },
    Real { min: f64, max: f64 },
    Seed,
    Choice(&'static [&'static str]),
    Flag,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Presence {
    Required,
    Optional,
    Default(&'static str),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FieldSpec {
    pub key: &'static str,
    pub ty: FieldType,
    pub presence: Presence,
    pub help: &'static str,
}

const fn field(key: &'static str, ty: FieldType, presence: Presence, help: &'static str) -> FieldSpec {
    FieldSpec { key, ty, presence, help }
}

const MAX_ITERATIONS: usize = 1_000_000;
const ITERS: FieldType = FieldType::Count { min: 1, max: MAX_ITERATIONS };
const POSITIVE: FieldType = FieldType::Count { min: 1, max: 4096 };
const INIT_CHOICES: &[&str] = &["face", "random"];
const STYLE_CHOICES: &[&str] = &["first", "second"];
const SCRIBBLE_LAYER_RANGE: std::ops::RangeInclusive<usize> = 4..=6;

fn common_fields() -> Vec<FieldSpec> {
    vec![
        field("seed", FieldType::Seed, Presence::Default("0"), "seed for the initial noise maps"),
        field(
            "iteration_divisor",
            FieldType::Count { min: 1, max: 10_000 },
            Presence::Default("1"),
            "divides every iteration count (5 in toy mode)",
        ),
        field("progress_stride", POSITIVE, Presence::Default("25"), "iterations between progress reports"),
    ]
}

fn blur_fields() -> Vec<FieldSpec> {
    vec![
        field(
            "blur_sigma",
            FieldType::Real { min: 1e-3, max: 1e3 },
            Presence::Optional,
            "mask blur sigma (default resolution/64)",
        ),
        field("blur_radius", POSITIVE, Presence::Optional, "mask blur kernel radius (default ceil(2 sigma))"),
    ]
}

fn embed_field() -> FieldSpec {
    field("embed_iterations", ITERS, Presence::Default("5000"), "style code embedding iterations")
}

fn pair_fields() -> Vec<FieldSpec> {
    vec![
        field("image1", FieldType::Asset, Presence::Required, "first image"),
        field("image2", FieldType::Asset, Presence::Required, "second image"),
    ]
}

fn edit_iteration_fields() -> Vec<FieldSpec> {
    vec![
        field("w_iterations", ITERS, Presence::Default("1000"), "style code iterations"),
        field("n_iterations", ITERS, Presence::Default("1000"), "noise iterations"),
    ]
}

fn kind_fields(kind: EditKind) -> Vec<FieldSpec> {
    use FieldType::*;
    use Presence::*;
    let mut v = Vec::new();
    match kind {
        EditKind::Reconstruct => {
            v.push(field("image", Asset, Required, "image to reconstruct"));
            v.push(field("init", Choice(INIT_CHOICES), Default("face"), "initial style code"));
            v.push(field("w_iterations", ITERS, Default("5000"), "style code iterations"));
            v.push(field("n_iterations", ITERS, Default("3000"), "noise iterations"));
        }
        EditKind::Crossover | EditKind::LocalStyle => {
            v.extend(pair_fields());
            v.push(field("mask", Asset, Required, "region kept from the first image"));
            v.push(embed_field());
            v.extend(edit_iteration_fields());
            v.extend(blur_fields());
        }
        EditKind::Inpaint => {
            v.push(field("image", Asset, Required, "defective image"));
            v.push(field("mask", Asset, Required, "defect region (1 = missing)"));
            v.push(field("init", Choice(INIT_CHOICES), Default("face"), "initial style code"));
            v.push(field("offset_seed", Seed, Optional, "seed of the initial code offset"));
            v.push(field("variations", Count { min: 1, max: 64 }, Default("1"), "number of solutions"));
            v.push(field("w_iterations", ITERS, Default("200"), "gradient descent steps"));
            v.push(field("n_iterations", ITERS, Default("1000"), "noise iterations"));
            v.push(field("dilation_radius", POSITIVE, Optional, "defect mask dilation (default resolution/32)"));
            v.extend(blur_fields());
        }
        EditKind::Scribble => {
            v.push(field("image", Asset, Required, "scribbled image"));
            v.push(field("mask", Asset, Required, "scribble region"));
            v.push(field("base", Asset, Optional, "unscribbled image, embedded for the anchor code"));
            v.push(field("base_latent", Asset, Optional, "latent file of the unscribbled image"));
            v.push(field("k_layers", Count { min: 1, max: 64 }, Default("5"), "style layers optimized (4 to 6)"));
            v.push(field("allow_any_layers", Flag, Default("false"), "accept k_layers outside 4 to 6"));
            v.push(field(
                "lambda_anchor",
                Real { min: 0.0, max: 1e6 },
                Default("1e-6"),
                "weight of the distance to the anchor code",
            ));
            v.push(embed_field());
            v.extend(edit_iteration_fields());
            v.extend(blur_fields());
        }
        EditKind::AttributeTransfer => {
            v.extend(pair_fields());
            v.push(field("mask", Asset, Required, "region copied from the first image"));
            v.push(embed_field());
        }
        EditKind::ChannelAverage => {
            v.extend(pair_fields());
            v.push(field("style", Choice(STYLE_CHOICES), Default("first"), "image providing the style code"));
            v.push(embed_field());
        }
        EditKind::MaskedInterpolation => {
            v.extend(pair_fields());
            v.push(field("mask", Asset, Required, "region being interpolated"));
            v.push(field("steps", Count { min: 2, max: 1024 }, Default("8"), "number of frames"));
            v.push(embed_field());
        }
    }
    v
}

fn parse_value(spec: &FieldSpec, raw: &str) -> Result<()> {
    let bad = |reason: String| Err(Error::recipe(spec.key, reason));
    match spec.ty {
        FieldType::Asset => {
            if raw.is_empty() {
                return bad("asset reference is empty".into());
            }
        }
        FieldType::Count { min, max } => match raw.parse::<usize>() {
            Ok(v) if (min..=max).contains(&v) => {}
            Ok(v) => return bad(format!("{v} is outside {min}..={max}")),
            Err(_) => return bad(format!("`{raw}` is not a non-negative integer")),
        },
        FieldType::Real { min, max } => match raw.parse::<f64>() {
            Ok(v) if v.is_finite() && v >= min && v <= max => {}
            Ok(v) => return bad(format!("{v} is outside [{min}, {max}]")),
            Err(_) => return bad(format!("`{raw}` is not a number")),
        },
        FieldType::Seed => {
            if raw.parse::<u64>().is_err() {
                return bad(format!("`{raw}` is not an unsigned 64-bit integer"));
            }
        }
        FieldType::Choice(options) => {
            if !options.contains(&raw) {
                return bad(format!("`{raw}` is not one of {}", options.join(", ")));
            }
        }
        FieldType::Flag => {
            if raw != "true" && raw != "false" {
                return bad(format!("`{raw}` is not true or false"));
            }
        }
    }
    Ok(())
}

/// A validated recipe. Values are kept as text and every key is known to
/// the kind's schema.
#[derive(Debug, Clone, PartialEq)]
pub struct EditRecipe {
    kind: EditKind,
    values: BTreeMap<String, String>,
}

impl EditRecipe {
    pub fn new(kind: EditKind) -> Self {
        Self {
            kind,
            values: BTreeMap::new(),
        }
    }

    pub fn kind(&self) -> EditKind {
        self.kind
    }

    pub fn values(&self) -> &BTreeMap<String, String> {
        &self.values
    }

    /// Sets a field without validating it; see [`EditRecipe::validate`].
    pub fn set(&mut self, key: impl Into<String>, value: impl Into<String>) -> &mut Self {
        self.values.insert(key.into(), value.into());
        self
    }

    pub fn with(mut self, key: impl Into<String>, value: impl Into<String>) -> Self {
        self.set(key, value);
        self
    }

    /// Sets a field only when it is absent.
    pub fn set_default(&mut self, key: &str, value: impl Into<String>) {
        self.values.entry(key.to_string()).or_insert_with(|| value.into());
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut kind = None;
        let mut values = BTreeMap::new();
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let Some((k, v)) = line.split_once('=') else {
                return Err(Error::recipe(format!("line {}", i + 1), "expected `key = value`"));
            };
            let (k, v) = (k.trim(), v.trim());
            if k == "kind" {
                if kind.is_some() {
                    return Err(Error::recipe("kind", "given more than once"));
                }
                kind = Some(EditKind::parse(v)?);
            } else if values.insert(k.to_string(), v.to_string()).is_some() {
                return Err(Error::recipe(k, "given more than once"));
            }
        }
        let kind = kind.ok_or_else(|| Error::recipe("kind", "missing"))?;
        let recipe = Self { kind, values };
        recipe.validate()?;
        Ok(recipe)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    /// Checks every key against the schema: unknown keys, missing required
    /// keys, value ranges and cross-field rules.
    pub fn validate(&self) -> Result<()> {
        let specs = self.kind.fields();
        for (k, v) in &self.values {
            let spec = specs
                .iter()
                .find(|s| s.key == k)
                .ok_or_else(|| Error::recipe(k.as_str(), format!("not a field of `{}` recipes", self.kind)))?;
            parse_value(spec, v)?;
        }
        for spec in &specs {
            if spec.presence == Presence::Required && !self.values.contains_key(spec.key) {
                return Err(Error::recipe(spec.key, "required"));
            }
        }
        if self.kind == EditKind::Scribble {
            let k = self.count("k_layers")?;
            if !self.flag("allow_any_layers")? && !SCRIBBLE_LAYER_RANGE.contains(&k) {
                return Err(Error::recipe(
                    "k_layers",
                    format!("{k} is outside 4..=6 (set allow_any_layers = true to override)"),
                ));
            }
            match (self.values.contains_key("base"), self.values.contains_key("base_latent")) {
                (true, true) => return Err(Error::recipe("base_latent", "give either base or base_latent, not both")),
                (false, false) => return Err(Error::recipe("base", "either base or base_latent is required")),
                _ => {}
            }
        }
        Ok(())
    }

    fn spec(&self, key: &str) -> FieldSpec {
        *self
            .kind
            .fields()
            .iter()
            .find(|s| s.key == key)
            .unwrap_or_else(|| panic!("`{key}` is not a field of {}", self.kind))
    }

    /// The raw value, falling back to the schema default.
    pub fn get(&self, key: &str) -> Option<&str> {
        match self.values.get(key) {
            Some(v) => Some(v.as_str()),
            None => match self.spec(key).presence {
                Presence::Default(d) => Some(d),
                _ => None,
            },
        }
    }

    fn parsed<T: std::str::FromStr>(&self, key: &str) -> Result<Option<T>> {
        self.get(key)
            .map(|raw| raw.parse::<T>().map_err(|_| Error::recipe(key, format!("cannot parse `{raw}`"))))
            .transpose()
    }

    pub fn count(&self, key: &str) -> Result<usize> {
        self.parsed(key)?.ok_or_else(|| Error::recipe(key, "required"))
    }

    pub fn real(&self, key: &str) -> Result<f64> {
        self.parsed(key)?.ok_or_else(|| Error::recipe(key, "required"))
    }

    pub fn seed(&self, key: &str) -> Result<Option<u64>> {
        self.parsed(key)
    }

    pub fn flag(&self, key: &str) -> Result<bool> {
        Ok(self.get(key) == Some("true"))
    }

    pub fn asset(&self, key: &str) -> Option<&str> {
        self.values.get(key).map(String::as_str)
    }

    /// Asset references of this recipe, keyed by field.
    pub fn assets(&self) -> Vec<(&'static str, &str)> {
        self.kind
            .fields()
            .into_iter()
            .filter(|s| s.ty == FieldType::Asset)
            .filter_map(|s| self.values.get(s.key).map(|v| (s.key, v.as_str())))
            .collect()
    }

    /// Rewrites asset references, e.g. from paths to content addresses.
    pub fn map_assets(&self, mut f: impl FnMut(&str, &str) -> Result<String>) -> Result<Self> {
        let mut out = self.clone();
        for (key, value) in self.assets() {
            let mapped = f(key, value)?;
            out.values.insert(key.to_string(), mapped);
        }
        Ok(out)
    }

    fn blur_config(&self, resolution: usize) -> Result<BlurConfig> {
        let mut cfg = BlurConfig::for_resolution(resolution);
        if let Some(sigma) = self.parsed::<f64>("blur_sigma")? {
            cfg.sigma = sigma;
            cfg.radius = ((2.0 * sigma).ceil() as usize).max(1);
        }
        if let Some(r) = self.parsed::<usize>("blur_radius")? {
            cfg.radius = r;
        }
        Ok(cfg)
    }
}

impl fmt::Display for EditRecipe {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "kind = {}", self.kind)?;
        for (k, v) in &self.values {
            writeln!(f, "{k} = {v}")?;
        }
        Ok(())
    }
}

/// Resolves asset references to bytes.
pub trait AssetSource {
    fn fetch(&self, reference: &str) -> Result<Vec<u8>>;
}

/// Asset references are file paths, relative ones resolved against `root`.
pub struct FileAssets {
    pub root: PathBuf,
}

impl AssetSource for FileAssets {
    fn fetch(&self, reference: &str) -> Result<Vec<u8>> {
        let path = self.root.join(reference);
        std::fs::read(&path).map_err(|e| Error::Image {
            path: Some(path),
            reason: e.to_string(),
        })
    }
}

fn with_field(field: &str, e: Error) -> Error {
    match e {
        Error::Recipe { .. } => e,
        other => Error::recipe(field, other.to_string()),
    }
}

struct Inputs<'s> {
    recipe: &'s EditRecipe,
    source: &'s dyn AssetSource,
    resolution: usize,
}

impl Inputs<'_> {
    fn image(&self, field: &str) -> Result<ImageBuffer> {
        let reference = self.recipe.asset(field).ok_or_else(|| Error::recipe(field, "required"))?;
        let img = self
            .source
            .fetch(reference)
            .and_then(|b| ImageBuffer::decode_png(&b))
            .map_err(|e| with_field(field, e))?;
        if img.height() != self.resolution || img.width() != self.resolution {
            return Err(Error::recipe(
                field,
                format!(
                    "image is {}x{}, generator resolution is {r}x{r}",
                    img.height(),
                    img.width(),
                    r = self.resolution
                ),
            ));
        }
        Ok(img)
    }

    fn mask(&self, field: &str) -> Result<Mask> {
        let reference = self.recipe.asset(field).ok_or_else(|| Error::recipe(field, "required"))?;
        let m = self
            .source
            .fetch(reference)
            .and_then(|b| Mask::decode_png(&b))
            .map_err(|e| with_field(field, e))?;
        m.ensure_size(self.resolution, self.resolution, "mask")
            .map_err(|e| with_field(field, e))?;
        Ok(m)
    }

    fn latent(&self, field: &str) -> Result<(StyleCode, NoiseBank)> {
        let reference = self.recipe.asset(field).ok_or_else(|| Error::recipe(field, "required"))?;
        self.source
            .fetch(reference)
            .and_then(|b| latent_file::decode(&b))
            .map_err(|e| with_field(field, e))
    }
}

/// Everything a recipe run produces.
#[derive(Debug, Clone)]
pub struct RunOutput {
    pub images: Vec<ImageBuffer>,
    /// One `(w, n)` per image when the image is exactly `G(w, n)`; empty for
    /// the activation editing kinds.
    pub latents: Vec<(StyleCode, NoiseBank)>,
    pub stages: Vec<StageRecord>,
}

pub const STAGE_LOG: &str = "stages.log";

impl RunOutput {
    pub fn final_loss(&self) -> Option<f64> {
        self.stages.last().map(|s| s.final_loss)
    }

    /// Tab-separated stage log: name, PSNR in dB, final loss.
    pub fn stage_log(&self) -> String {
        let mut out = String::from("stage\tpsnr_db\tfinal_loss\n");
        for s in &self.stages {
            out.push_str(&format!("{}\t{:.4}\t{:e}\n", s.name, s.psnr, s.final_loss));
        }
        out
    }

    /// File names of the result bundle, in order: images, latents, log.
    pub fn file_names(&self) -> Vec<String> {
        let single = self.images.len() == 1;
        let name = |i: usize, ext: &str| {
            if single {
                format!("result.{ext}")
            } else {
                format!("result_{:02}.{ext}", i + 1)
            }
        };
        let mut out: Vec<String> = (0..self.images.len()).map(|i| name(i, "png")).collect();
        out.extend((0..self.latents.len()).map(|i| name(i, "i2sl")));
        out.push(STAGE_LOG.to_string());
        out
    }

    /// The bundle as named byte blobs.
    pub fn files(&self) -> Vec<(String, Vec<u8>)> {
        let mut blobs: Vec<Vec<u8>> = self.images.iter().map(ImageBuffer::encode_png).collect();
        blobs.extend(self.latents.iter().map(|(w, n)| latent_file::encode(w, n)));
        blobs.push(self.stage_log().into_bytes());
        self.file_names().into_iter().zip(blobs).collect()
    }

    pub fn write_dir(&self, dir: &Path) -> Result<Vec<PathBuf>> {
        std::fs::create_dir_all(dir)?;
        let mut out = Vec::new();
        for (name, bytes) in self.files() {
            let path = dir.join(name);
            std::fs::write(&path, bytes)?;
            out.push(path);
        }
        Ok(out)
    }
}

/// What an asset field must decode to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AssetKind {
    Image,
    Mask,
    Latent,
}

impl AssetKind {
    pub fn of_field(key: &str) -> Self {
        match key {
            "mask" => AssetKind::Mask,
            "base_latent" => AssetKind::Latent,
            _ => AssetKind::Image,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            AssetKind::Image => "image",
            AssetKind::Mask => "mask",
            AssetKind::Latent => "latent",
        }
    }
}

/// Validates the recipe and decodes every referenced asset, checking sizes
/// against the generator. Nothing is optimized.
pub fn preflight(nets: Networks<'_>, recipe: &EditRecipe, source: &dyn AssetSource) -> Result<()> {
    recipe.validate()?;
    let g = nets.generator;
    let inputs = Inputs {
        recipe,
        source,
        resolution: nets.side(),
    };
    for (key, _) in recipe.assets() {
        match AssetKind::of_field(key) {
            AssetKind::Image => drop(inputs.image(key)?),
            AssetKind::Mask => drop(inputs.mask(key)?),
            AssetKind::Latent => {
                let (w, n) = inputs.latent(key)?;
                if w.layers() != g.num_layers() || w.dim() != g.style_dim() || n.len() != g.num_layers() {
                    return Err(Error::recipe(key, "latent shape does not match the generator"));
                }
            }
        }
    }
    if recipe.kind() == EditKind::Scribble && recipe.count("k_layers")? > g.num_layers() {
        return Err(Error::recipe("k_layers", format!("generator has only {} layers", g.num_layers())));
    }
    if recipe.kind() == EditKind::Inpaint && inputs.mask("mask")?.is_all(1.0) {
        return Err(Error::recipe("mask", "defect mask covers the whole image"));
    }
    Ok(())
}

/// Runs a recipe against the given networks. Front ends only differ in how
/// they resolve assets, so equal recipes give byte-identical results.
pub fn run_recipe(
    nets: Networks<'_>,
    recipe: &EditRecipe,
    source: &dyn AssetSource,
    on_progress: &mut dyn FnMut(&str, Progress),
) -> Result<RunOutput> {
    preflight(nets, recipe, source)?;
    let r = nets.side();
    let inputs = Inputs {
        recipe,
        source,
        resolution: r,
    };
    let seed = recipe.seed("seed")?.unwrap_or(0);
    let mut p = Pipeline::new(nets, seed, recipe.count("iteration_divisor")?, on_progress);
    p.progress_stride = recipe.count("progress_stride")?;
    let init = || match recipe.get("init") {
        Some("random") => Init::Random,
        _ => Init::Face,
    };
    let blurred = |m: &Mask| -> Result<Mask> {
        let cfg = recipe.blur_config(r)?;
        masks::blur(m, cfg.sigma, cfg.radius)
    };
    let g = nets.generator;

    let mut images = Vec::new();
    let mut latents = Vec::new();
    let mut push = |(w, n, img): (StyleCode, NoiseBank, ImageBuffer)| {
        images.push(img);
        latents.push((w, n));
    };

    match recipe.kind() {
        EditKind::Reconstruct => {
            let img = inputs.image("image")?;
            push(p.reconstruct(&img, init(), recipe.count("w_iterations")?, recipe.count("n_iterations")?)?);
        }
        EditKind::Crossover => {
            let (x, y) = (inputs.image("image1")?, inputs.image("image2")?);
            let m_blur = blurred(&inputs.mask("mask")?)?;
            push(p.crossover(
                &x,
                &y,
                &m_blur,
                recipe.count("embed_iterations")?,
                recipe.count("w_iterations")?,
                recipe.count("n_iterations")?,
            )?);
        }
        EditKind::LocalStyle => {
            let (x, y) = (inputs.image("image1")?, inputs.image("image2")?);
            let m_blur = blurred(&inputs.mask("mask")?)?;
            push(p.local_style(
                &x,
                &y,
                &m_blur,
                recipe.count("embed_iterations")?,
                recipe.count("w_iterations")?,
                recipe.count("n_iterations")?,
            )?);
        }
        EditKind::Inpaint => {
            let img = inputs.image("image")?;
            let m = inputs.mask("mask")?;
            let cfg = recipe.blur_config(r)?;
            let radius = match recipe.parsed::<usize>("dilation_radius")? {
                Some(v) => v,
                None => masks::default_dilation_radius(r),
            };
            let m_plus = masks::dilate_then_blur(&m, radius, cfg.sigma, cfg.radius)?;
            let k = recipe.count("variations")?;
            let offset = recipe.seed("offset_seed")?;
            for i in 0..k {
                let seed = match (offset, k) {
                    (None, 1) => None,
                    (base, _) => Some(base.unwrap_or(seed).wrapping_add(i as u64)),
                };
                let before = p.stages.len();
                push(p.inpaint(
                    &img,
                    &m,
                    &m_plus,
                    init(),
                    seed,
                    recipe.count("w_iterations")?,
                    recipe.count("n_iterations")?,
                )?);
                if k > 1 {
                    for s in &mut p.stages[before..] {
                        s.name = format!("v{}/{}", i + 1, s.name);
                    }
                }
            }
        }
        EditKind::Scribble => {
            let i_scr = inputs.image("image")?;
            let m_blur = blurred(&inputs.mask("mask")?)?;
            let w_star = if recipe.asset("base_latent").is_some() {
                inputs.latent("base_latent")?.0
            } else {
                let base = inputs.image("base")?;
                let n_ini = p.noise_ini();
                p.embed_w("embed", &base, Init::Face, &n_ini, recipe.count("embed_iterations")?)?
            };
            let k = recipe.count("k_layers")?;
            push(p.scribble(
                &i_scr,
                &w_star,
                &m_blur,
                k,
                recipe.real("lambda_anchor")?,
                recipe.count("w_iterations")?,
                recipe.count("n_iterations")?,
            )?);
        }
        EditKind::AttributeTransfer | EditKind::ChannelAverage | EditKind::MaskedInterpolation => {
            let (i1, i2) = (inputs.image("image1")?, inputs.image("image2")?);
            let n = p.noise_ini();
            let iters = recipe.count("embed_iterations")?;
            let w1 = p.embed_w("embed1", &i1, Init::Face, &n, iters)?;
            let w2 = p.embed_w("embed2", &i2, Init::Face, &n, iters)?;
            match recipe.kind() {
                EditKind::AttributeTransfer => {
                    images.push(apps::attribute_transfer(g, &w1, &w2, &n, &inputs.mask("mask")?)?);
                }
                EditKind::ChannelAverage => {
                    let style = match recipe.get("style") {
                        Some("second") => StyleSource::Second,
                        _ => StyleSource::First,
                    };
                    images.push(apps::channel_average(g, &w1, &w2, &n, style)?);
                }
                _ => {
                    let m = inputs.mask("mask")?;
                    images.extend(apps::masked_interpolation(g, &w1, &w2, &n, &m, recipe.count("steps")?)?);
                }
            }
        }
    }
    let stages = std::mem::take(&mut p.stages);
    Ok(RunOutput {
        images,
        latents,
        stages,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parse_and_print_round_trip() {
        let text = "# a comment\nkind = inpaint\nimage = a.png\nmask = m.png\nvariations = 3\n";
        let r = EditRecipe::parse(text).unwrap();
        assert_eq!(r.kind(), EditKind::Inpaint);
        assert_eq!(r.count("variations").unwrap(), 3);
        assert_eq!(r.count("w_iterations").unwrap(), 200);
        assert_eq!(EditRecipe::parse(&r.to_string()).unwrap(), r);
    }

    #[test]
    fn scribble_layer_count_is_checked() {
        let base = "kind = scribble\nimage = s.png\nmask = m.png\nbase = b.png\n";
        let err = EditRecipe::parse(&format!("{base}k_layers = 9\n")).unwrap_err();
        assert!(matches!(err, Error::Recipe { ref field, .. } if field == "k_layers"), "{err}");
        EditRecipe::parse(&format!("{base}k_layers = 9\nallow_any_layers = true\n")).unwrap();
        EditRecipe::parse(&format!("{base}k_layers = 4\n")).unwrap();
    }

    #[test]
    fn field_errors_name_the_field() {
        let cases = [
            ("kind = reconstruct\n", "image"),
            ("kind = reconstruct\nimage = a.png\ncolour = red\n", "colour"),
            ("kind = reconstruct\nimage = a.png\nw_iterations = 0\n", "w_iterations"),
            ("kind = reconstruct\nimage = a.png\ninit = cat\n", "init"),
            ("kind = reconstruct\nimage = a.png\nimage = b.png\n", "image"),
            ("kind = teleport\n", "kind"),
            ("image = a.png\n", "kind"),
            ("kind = scribble\nimage = s.png\nmask = m.png\n", "base"),
        ];
        for (text, expected) in cases {
            match EditRecipe::parse(text) {
                Err(Error::Recipe { field, .. }) => assert_eq!(field, expected, "{text}"),
                other => panic!("{text}: {other:?}"),
            }
        }
    }

    #[test]
    fn every_kind_has_unique_keys() {
        for kind in EditKind::ALL {
            let fields = kind.fields();
            for (i, a) in fields.iter().enumerate() {
                assert!(fields[i + 1..].iter().all(|b| b.key != a.key), "{kind}: {}", a.key);
                if let Presence::Default(d) = a.presence {
                    parse_value(a, d).unwrap();
                }
            }
            assert_eq!(EditKind::parse(kind.name()).unwrap(), kind);
        }
    }

    #[test]
    fn bundle_names() {
        let out = RunOutput {
            images: vec![ImageBuffer::filled(2, 2, 0.0); 2],
            latents: vec![],
            stages: vec![],
        };
        assert_eq!(out.file_names(), vec!["result_01.png", "result_02.png", "stages.log"]);
    }
}
