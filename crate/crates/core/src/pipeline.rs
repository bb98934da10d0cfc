//! Stage orchestration: flat key=value configuration, content-addressed
//! caching of stage outputs and the run manifest.
//!
//! Stages run in the order weights → phantom → forward → recon → render and
//! communicate only through files in the output directory. Each stage's cache
//! key hashes its parameters together with the bytes of its input files; a
//! stage is skipped when the previous manifest recorded the same key and every
//! output still hashes to the recorded value.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::io;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::binio::sha256_hex;
use crate::forward::{decode_sinogram, default_quant_delta, encode_sinogram, quantize, simulate_sweep, SensorGeometry};
use crate::greenfn::{GreenCoefficients, DEFAULT_EPS0, DEFAULT_ORDER};
use crate::phantom::{rasterize, PermittivityField, PhantomSpec, RasterGeometry};
use crate::recon::{reconstruct_layers, FilterSpec, Interp, Layer, Window};
use crate::render::{render_pgm, Mapping};
use crate::weights::{condition_weight, decode_weight, encode_weight, synthesize_weight, WeightGridSpec};

/// The two-box phantom used when `phantom = builtin`.
pub const BUILTIN_PHANTOM: &str = include_str!("../data/two_box.txt");
pub const MANIFEST_NAME: &str = "manifest.json";
pub const MANIFEST_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("config error: {0}")]
    Config(String),
    #[error("stage {stage} failed: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: crate::Error,
    },
}

impl PipelineError {
    /// Process exit code: 2 for configuration errors, 3 for stage failures.
    pub fn exit_code(&self) -> i32 {
        match self {
            PipelineError::Config(_) => 2,
            PipelineError::Stage { .. } => 3,
        }
    }
}

fn config_err(msg: impl Into<String>) -> PipelineError {
    PipelineError::Config(msg.into())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Stage {
    Weights,
    Phantom,
    Forward,
    Recon,
    Render,
}

impl Stage {
    pub const ALL: [Stage; 5] = [Stage::Weights, Stage::Phantom, Stage::Forward, Stage::Recon, Stage::Render];

    pub fn name(self) -> &'static str {
        match self {
            Stage::Weights => "weights",
            Stage::Phantom => "phantom",
            Stage::Forward => "forward",
            Stage::Recon => "recon",
            Stage::Render => "render",
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Stage {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        Stage::ALL.into_iter().find(|st| st.name() == s).ok_or_else(|| format!("unknown stage {s:?}"))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum PhantomSource {
    Builtin,
    File(PathBuf),
}

/// Every configuration key with its default and meaning.
pub const KEYS: &[(&str, &str, &str)] = &[
    ("n", "27", "half electrode count; the array has 2n+1 electrodes"),
    ("pitch_mm", "2.5", "electrode pitch d"),
    ("angles", "180", "angular steps over [0, pi)"),
    ("standoff_mm", "2", "height z0 of the object bottom above the electrodes"),
    ("gaps", "1,2,3,4", "transmitter-receiver gaps, one layer each"),
    ("green_order", "16", "number of image charges N in the interpolated potential"),
    ("green_eps0", "0.1", "electrode half-width in pitch units"),
    ("weight_margin", "4", "weight grid extent beyond [0, k], pitch units"),
    ("weight_z_min", "0.05", "lowest weight sample height, pitch units"),
    ("weight_z_max", "8", "highest weight sample height, pitch units"),
    ("weight_dx", "0.05", "weight sample spacing along x, pitch units"),
    ("weight_dz", "0.05", "weight sample spacing along z, pitch units"),
    ("weight_zcut", "auto", "truncation height in pitch units; auto = standoff_mm / pitch_mm"),
    ("phantom", "builtin", "phantom text file, or builtin for the two-box phantom"),
    ("raster_spacing_mm", "auto", "voxel spacing of the rasterized phantom; auto = pitch_mm / 4"),
    ("filter_window", "hamming", "ram-lak | hamming | hann | none"),
    ("interpolation", "linear", "linear | nearest"),
    ("image_size", "auto", "layer image side in pixels; auto = 4n+1"),
    ("image_pitch_mm", "auto", "layer pixel pitch; auto = pitch_mm / 2"),
    ("output_dir", "ect_out", "directory receiving every artifact and the manifest"),
    ("quantize", "true", "round readings to 140 levels of the largest reading"),
    ("quant_delta", "auto", "quantization step; auto = max|reading| / 140"),
    ("render_mapping", "symmetric", "minmax | symmetric | fixed:LO:HI"),
    ("threads", "0", "worker threads; 0 uses every core"),
];

#[derive(Debug, Clone, PartialEq)]
pub struct PipelineConfig {
    pub n: usize,
    pub pitch_mm: f64,
    pub angles: usize,
    pub standoff_mm: f64,
    pub gaps: Vec<u32>,
    pub green_order: usize,
    pub green_eps0: f64,
    pub weight_grid: WeightGridSpec<f64>,
    pub weight_zcut: Option<f64>,
    pub phantom: PhantomSource,
    pub raster_spacing_mm: Option<f64>,
    pub window: Window,
    pub interpolation: Interp,
    pub image_size: Option<usize>,
    pub image_pitch_mm: Option<f64>,
    pub output_dir: PathBuf,
    pub quantize: bool,
    pub quant_delta: Option<f64>,
    pub render_mapping: Mapping,
    pub threads: usize,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            n: 27,
            pitch_mm: 2.5,
            angles: 180,
            standoff_mm: 2.0,
            gaps: vec![1, 2, 3, 4],
            green_order: DEFAULT_ORDER,
            green_eps0: DEFAULT_EPS0,
            weight_grid: WeightGridSpec::default(),
            weight_zcut: None,
            phantom: PhantomSource::Builtin,
            raster_spacing_mm: None,
            window: Window::Hamming,
            interpolation: Interp::Linear,
            image_size: None,
            image_pitch_mm: None,
            output_dir: PathBuf::from("ect_out"),
            quantize: true,
            quant_delta: None,
            render_mapping: Mapping::Symmetric,
            threads: 0,
        }
    }
}

fn parse_num<V: FromStr>(key: &str, v: &str) -> Result<V, PipelineError> {
    v.parse().map_err(|_| config_err(format!("{key}: cannot parse {v:?}")))
}

fn parse_auto<V: FromStr>(key: &str, v: &str) -> Result<Option<V>, PipelineError> {
    if v == "auto" {
        Ok(None)
    } else {
        parse_num(key, v).map(Some)
    }
}

fn show_auto<V: ToString>(v: &Option<V>) -> String {
    v.as_ref().map_or_else(|| "auto".to_string(), V::to_string)
}

impl PipelineConfig {
    /// Parses a key=value file body. `#` starts a comment; blank lines are ignored.
    pub fn parse(text: &str) -> Result<Self, PipelineError> {
        let mut cfg = Self::default();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) =
                line.split_once('=').ok_or_else(|| config_err(format!("line {}: expected key = value", i + 1)))?;
            cfg.set(k.trim(), v.trim()).map_err(|e| {
                config_err(format!("line {}: {}", i + 1, e.to_string().trim_start_matches("config error: ")))
            })?;
        }
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, PipelineError> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| config_err(format!("{}: {e}", path.display())))?;
        Self::parse(&text)
    }

    /// Applies one `key=value` override.
    pub fn apply_override(&mut self, kv: &str) -> Result<(), PipelineError> {
        let (k, v) = kv.split_once('=').ok_or_else(|| config_err(format!("override {kv:?} is not key=value")))?;
        self.set(k.trim(), v.trim())
    }

    pub fn set(&mut self, key: &str, v: &str) -> Result<(), PipelineError> {
        match key {
            "n" => self.n = parse_num(key, v)?,
            "pitch_mm" => self.pitch_mm = parse_num(key, v)?,
            "angles" => self.angles = parse_num(key, v)?,
            "standoff_mm" => self.standoff_mm = parse_num(key, v)?,
            "gaps" => self.gaps = v.split(',').map(|g| parse_num(key, g.trim())).collect::<Result<_, _>>()?,
            "green_order" => self.green_order = parse_num(key, v)?,
            "green_eps0" => self.green_eps0 = parse_num(key, v)?,
            "weight_margin" => self.weight_grid.margin = parse_num(key, v)?,
            "weight_z_min" => self.weight_grid.z_min = parse_num(key, v)?,
            "weight_z_max" => self.weight_grid.z_max = parse_num(key, v)?,
            "weight_dx" => self.weight_grid.dx = parse_num(key, v)?,
            "weight_dz" => self.weight_grid.dz = parse_num(key, v)?,
            "weight_zcut" => self.weight_zcut = parse_auto(key, v)?,
            "phantom" => {
                self.phantom =
                    if v == "builtin" { PhantomSource::Builtin } else { PhantomSource::File(PathBuf::from(v)) }
            }
            "raster_spacing_mm" => self.raster_spacing_mm = parse_auto(key, v)?,
            "filter_window" => self.window = v.parse().map_err(config_err)?,
            "interpolation" => self.interpolation = v.parse().map_err(config_err)?,
            "image_size" => self.image_size = parse_auto(key, v)?,
            "image_pitch_mm" => self.image_pitch_mm = parse_auto(key, v)?,
            "output_dir" => self.output_dir = PathBuf::from(v),
            "quantize" => self.quantize = parse_num(key, v)?,
            "quant_delta" => self.quant_delta = parse_auto(key, v)?,
            "render_mapping" => self.render_mapping = v.parse().map_err(config_err)?,
            "threads" => self.threads = parse_num(key, v)?,
            _ => return Err(config_err(format!("unknown key {key:?}"))),
        }
        Ok(())
    }

    pub fn get(&self, key: &str) -> Option<String> {
        let g = &self.weight_grid;
        Some(match key {
            "n" => self.n.to_string(),
            "pitch_mm" => self.pitch_mm.to_string(),
            "angles" => self.angles.to_string(),
            "standoff_mm" => self.standoff_mm.to_string(),
            "gaps" => self.gaps.iter().map(u32::to_string).collect::<Vec<_>>().join(","),
            "green_order" => self.green_order.to_string(),
            "green_eps0" => self.green_eps0.to_string(),
            "weight_margin" => g.margin.to_string(),
            "weight_z_min" => g.z_min.to_string(),
            "weight_z_max" => g.z_max.to_string(),
            "weight_dx" => g.dx.to_string(),
            "weight_dz" => g.dz.to_string(),
            "weight_zcut" => show_auto(&self.weight_zcut),
            "phantom" => match &self.phantom {
                PhantomSource::Builtin => "builtin".to_string(),
                PhantomSource::File(p) => p.display().to_string(),
            },
            "raster_spacing_mm" => show_auto(&self.raster_spacing_mm),
            "filter_window" => self.window.name().to_string(),
            "interpolation" => match self.interpolation {
                Interp::Linear => "linear".to_string(),
                Interp::Nearest => "nearest".to_string(),
            },
            "image_size" => show_auto(&self.image_size),
            "image_pitch_mm" => show_auto(&self.image_pitch_mm),
            "output_dir" => self.output_dir.display().to_string(),
            "quantize" => self.quantize.to_string(),
            "quant_delta" => show_auto(&self.quant_delta),
            "render_mapping" => self.render_mapping.to_string(),
            "threads" => self.threads.to_string(),
            _ => return None,
        })
    }

    /// Every key with its current value, in documentation order.
    pub fn to_map(&self) -> BTreeMap<String, String> {
        KEYS.iter().map(|(k, _, _)| (k.to_string(), self.get(k).expect("listed key"))).collect()
    }

    /// A config file reproducing `self`, with each key's description.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for (k, default, doc) in KEYS {
            s.push_str(&format!("# {doc} (default {default})\n{k} = {}\n", self.get(k).expect("listed key")));
        }
        s
    }

    pub fn z_cut(&self) -> f64 {
        self.weight_zcut.unwrap_or(self.standoff_mm / self.pitch_mm)
    }

    pub fn raster_spacing(&self) -> f64 {
        self.raster_spacing_mm.unwrap_or(self.pitch_mm / 4.0)
    }

    pub fn geometry(&self) -> Result<SensorGeometry<f64>, PipelineError> {
        SensorGeometry::new(self.n, self.pitch_mm, self.angles, self.standoff_mm, self.gaps.clone())
            .map_err(|e| config_err(e.to_string()))
    }

    pub fn filter_spec(&self) -> FilterSpec<f64> {
        FilterSpec {
            window: self.window,
            interpolation: self.interpolation,
            size: self.image_size.unwrap_or(4 * self.n + 1),
            pitch: self.image_pitch_mm.unwrap_or(self.pitch_mm / 2.0),
        }
    }

    pub fn validate(&self) -> Result<(), PipelineError> {
        self.geometry()?;
        self.filter_spec().validate().map_err(|e| config_err(e.to_string()))?;
        GreenCoefficients::<f64>::new(self.green_order, self.green_eps0).map_err(|e| config_err(e.to_string()))?;
        self.weight_grid.validate().map_err(|e| config_err(e.to_string()))?;
        if let Some(&k) = self.gaps.iter().find(|&&k| k as usize > self.green_order) {
            return Err(config_err(format!("gap {k} exceeds green_order {}", self.green_order)));
        }
        let zc = self.z_cut();
        if !(zc >= 0.0) || !zc.is_finite() {
            return Err(config_err(format!("weight_zcut {zc}")));
        }
        let rs = self.raster_spacing();
        if !(rs > 0.0) || !rs.is_finite() {
            return Err(config_err(format!("raster_spacing_mm {rs}")));
        }
        if let Some(q) = self.quant_delta {
            if !(q >= 0.0) || !q.is_finite() {
                return Err(config_err(format!("quant_delta {q}")));
            }
        }
        if let PhantomSource::File(p) = &self.phantom {
            if !p.is_file() {
                return Err(config_err(format!("phantom file {} does not exist", p.display())));
            }
        }
        Ok(())
    }

    fn phantom_text(&self) -> io::Result<String> {
        match &self.phantom {
            PhantomSource::Builtin => Ok(BUILTIN_PHANTOM.to_string()),
            PhantomSource::File(p) => fs::read_to_string(p),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    pub stage: String,
    pub key: String,
    /// Parameters (`param:NAME`) and input files (`file:NAME` → sha256).
    pub inputs: BTreeMap<String, String>,
    /// Output file name → sha256.
    pub outputs: BTreeMap<String, String>,
    pub cached: bool,
    pub seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub version: u32,
    pub config: BTreeMap<String, String>,
    pub stages: Vec<StageRecord>,
}

impl Manifest {
    pub fn stage(&self, s: Stage) -> Option<&StageRecord> {
        self.stages.iter().find(|r| r.stage == s.name())
    }

    /// Every output file with its hash, across stages.
    pub fn output_hashes(&self) -> BTreeMap<String, String> {
        self.stages.iter().flat_map(|r| r.outputs.clone()).collect()
    }

    pub fn load(dir: &Path) -> Option<Self> {
        let text = fs::read_to_string(dir.join(MANIFEST_NAME)).ok()?;
        serde_json::from_str::<Manifest>(&text).ok().filter(|m| m.version == MANIFEST_VERSION)
    }
}

fn weight_name(k: u32) -> String {
    format!("weights_k{k}.ectw")
}

fn layer_name(k: u32) -> String {
    format!("layer_k{k}.ectl")
}

fn pgm_name(k: u32) -> String {
    format!("layer_k{k}.pgm")
}

pub const PHANTOM_TEXT: &str = "phantom.txt";
pub const PHANTOM_VOXELS: &str = "phantom.ectv";
pub const SINOGRAM: &str = "sinogram.ects";

fn input_files(cfg: &PipelineConfig, s: Stage) -> Vec<String> {
    match s {
        Stage::Weights | Stage::Phantom => vec![],
        Stage::Forward => {
            let mut v: Vec<String> = cfg.gaps.iter().map(|&k| weight_name(k)).collect();
            v.push(PHANTOM_TEXT.to_string());
            v
        }
        Stage::Recon => vec![SINOGRAM.to_string()],
        Stage::Render => cfg.gaps.iter().map(|&k| layer_name(k)).collect(),
    }
}

fn output_files(cfg: &PipelineConfig, s: Stage) -> Vec<String> {
    match s {
        Stage::Weights => cfg.gaps.iter().map(|&k| weight_name(k)).collect(),
        Stage::Phantom => vec![PHANTOM_TEXT.to_string(), PHANTOM_VOXELS.to_string()],
        Stage::Forward => vec![SINOGRAM.to_string()],
        Stage::Recon => cfg.gaps.iter().map(|&k| layer_name(k)).collect(),
        Stage::Render => cfg.gaps.iter().map(|&k| pgm_name(k)).collect(),
    }
}

fn stage_params(cfg: &PipelineConfig, s: Stage) -> Result<Vec<(&'static str, String)>, io::Error> {
    let keys: &[&str] = match s {
        Stage::Weights => &[
            "gaps",
            "green_order",
            "green_eps0",
            "weight_margin",
            "weight_z_min",
            "weight_z_max",
            "weight_dx",
            "weight_dz",
        ],
        Stage::Phantom => &[],
        Stage::Forward => &["n", "pitch_mm", "angles", "standoff_mm", "gaps", "quantize", "quant_delta"],
        Stage::Recon => &["filter_window", "interpolation"],
        Stage::Render => &["render_mapping"],
    };
    let mut out: Vec<(&'static str, String)> = KEYS
        .iter()
        .filter(|(k, _, _)| keys.contains(k))
        .map(|(k, _, _)| (*k, cfg.get(k).expect("listed key")))
        .collect();
    match s {
        Stage::Weights => out.push(("weight_zcut", cfg.z_cut().to_string())),
        Stage::Phantom => {
            out.push(("phantom_sha256", sha256_hex(cfg.phantom_text()?.as_bytes())));
            out.push(("raster_spacing_mm", cfg.raster_spacing().to_string()));
        }
        Stage::Recon => {
            let f = cfg.filter_spec();
            out.push(("image_size", f.size.to_string()));
            out.push(("image_pitch_mm", f.pitch.to_string()));
        }
        _ => {}
    }
    Ok(out)
}

fn read_input(dir: &Path, name: &str, s: Stage) -> io::Result<Vec<u8>> {
    fs::read(dir.join(name))
        .map_err(|e| io::Error::new(e.kind(), format!("{name}: {e} (run the stages before {s} first)")))
}

fn produce(cfg: &PipelineConfig, s: Stage, dir: &Path) -> Result<Vec<(String, Vec<u8>)>, crate::Error> {
    match s {
        Stage::Weights => {
            let coeffs = GreenCoefficients::new(cfg.green_order, cfg.green_eps0)?;
            let mut out = Vec::new();
            for &k in &cfg.gaps {
                let raw = synthesize_weight(&coeffs, k, &cfg.weight_grid)?;
                let w = condition_weight(&raw, cfg.z_cut())?;
                out.push((weight_name(k), encode_weight(&w)?));
            }
            Ok(out)
        }
        Stage::Phantom => {
            let spec = PhantomSpec::<f64>::parse(&cfg.phantom_text()?)?;
            let h = cfg.raster_spacing();
            let voxels = match spec.bounds() {
                Some(b) => {
                    let geom = RasterGeometry::covering(&b, h, h);
                    rasterize(&spec, &geom, false)?
                }
                None => {
                    let geom = RasterGeometry { dims: [1, 1, 1], spacing: [h; 3], origin: [0.0; 3] };
                    rasterize(&spec, &geom, false)?
                }
            };
            Ok(vec![
                (PHANTOM_TEXT.to_string(), spec.to_text().into_bytes()),
                (PHANTOM_VOXELS.to_string(), voxels.encode()),
            ])
        }
        Stage::Forward => {
            let geom = cfg.geometry().map_err(|e| crate::forward::ForwardError::InvalidGeometry(e.to_string()))?;
            let weights = cfg
                .gaps
                .iter()
                .map(|&k| Ok(decode_weight::<f64>(&read_input(dir, &weight_name(k), s)?)?))
                .collect::<Result<Vec<_>, crate::Error>>()?;
            let text = String::from_utf8_lossy(&read_input(dir, PHANTOM_TEXT, s)?).into_owned();
            let spec = PhantomSpec::<f64>::parse(&text)?;
            let mut set = simulate_sweep(&spec, &weights, &geom)?;
            if cfg.quantize {
                let delta = cfg.quant_delta.unwrap_or_else(|| default_quant_delta(&set));
                set = quantize(&set, delta)?;
            }
            Ok(vec![(SINOGRAM.to_string(), encode_sinogram(&set)?)])
        }
        Stage::Recon => {
            let set = decode_sinogram::<f64>(&read_input(dir, SINOGRAM, s)?)?;
            let stack = reconstruct_layers(&set, &cfg.filter_spec())?;
            Ok(stack.layers.iter().map(|l| (layer_name(l.gap), l.encode())).collect())
        }
        Stage::Render => cfg
            .gaps
            .iter()
            .map(|&k| {
                let layer = Layer::<f64>::decode(&read_input(dir, &layer_name(k), s)?)?;
                Ok((pgm_name(k), render_layer(&layer, cfg.render_mapping)))
            })
            .collect(),
    }
}

/// PGM bytes for one layer.
pub fn render_layer(layer: &Layer<f64>, mapping: Mapping) -> Vec<u8> {
    render_pgm(&layer.values, layer.size, layer.size, mapping)
}

/// Writes `bytes` to `path` through a sibling temporary file and a rename.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> io::Result<()> {
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".partial");
    let tmp = PathBuf::from(tmp);
    fs::write(&tmp, bytes).and_then(|_| fs::rename(&tmp, path)).inspect_err(|_| {
        let _ = fs::remove_file(&tmp);
    })
}

fn hash_file(path: &Path) -> Option<String> {
    fs::read(path).ok().map(|b| sha256_hex(&b))
}

fn run_stage(cfg: &PipelineConfig, s: Stage, prev: Option<&StageRecord>) -> Result<StageRecord, PipelineError> {
    let dir = &cfg.output_dir;
    let fail = |e: crate::Error| PipelineError::Stage { stage: s.name(), source: e };

    let mut inputs = BTreeMap::new();
    for (k, v) in stage_params(cfg, s).map_err(|e| fail(e.into()))? {
        inputs.insert(format!("param:{k}"), v);
    }
    for name in input_files(cfg, s) {
        let bytes = read_input(dir, &name, s).map_err(|e| fail(e.into()))?;
        inputs.insert(format!("file:{name}"), sha256_hex(&bytes));
    }
    let key_text: String = inputs.iter().map(|(k, v)| format!("{k}={v}\n")).collect();
    let key = sha256_hex(format!("stage={s}\n{key_text}").as_bytes());

    if let Some(p) = prev.filter(|p| p.key == key) {
        let intact = p.outputs.iter().all(|(name, h)| hash_file(&dir.join(name)).as_deref() == Some(h));
        if intact && !p.outputs.is_empty() {
            log::info!("{s}: cached");
            return Ok(StageRecord { cached: true, seconds: 0.0, ..p.clone() });
        }
    }

    log::info!("{s}: running");
    let start = Instant::now();
    let expected = output_files(cfg, s);
    let remove_outputs = || {
        let stale = prev.into_iter().flat_map(|p| p.outputs.keys().cloned());
        for name in expected.iter().cloned().chain(stale) {
            let _ = fs::remove_file(dir.join(&name));
        }
    };
    let files = match produce(cfg, s, dir) {
        Ok(f) => f,
        Err(e) => {
            remove_outputs();
            return Err(fail(e));
        }
    };
    let mut outputs = BTreeMap::new();
    for (name, bytes) in &files {
        if let Err(e) = write_atomic(&dir.join(name), bytes) {
            remove_outputs();
            return Err(fail(e.into()));
        }
        outputs.insert(name.clone(), sha256_hex(bytes));
    }
    let seconds = start.elapsed().as_secs_f64();
    log::info!("{s}: {} files in {seconds:.3} s", outputs.len());
    Ok(StageRecord { stage: s.name().to_string(), key, inputs, outputs, cached: false, seconds })
}

/// Runs `stages` in order against `cfg.output_dir`, reusing cached outputs,
/// and rewrites the manifest. Records of stages not run are kept.
pub fn run_stages(cfg: &PipelineConfig, stages: &[Stage]) -> Result<Manifest, PipelineError> {
    cfg.validate()?;
    let dir = &cfg.output_dir;
    fs::create_dir_all(dir).map_err(|e| config_err(format!("output_dir {}: {e}", dir.display())))?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.threads)
        .build()
        .map_err(|e| config_err(format!("threads: {e}")))?;

    let prev = Manifest::load(dir);
    let mut records: BTreeMap<Stage, StageRecord> =
        prev.iter().flat_map(|m| m.stages.iter()).filter_map(|r| Some((r.stage.parse().ok()?, r.clone()))).collect();

    let mut order = stages.to_vec();
    order.sort();
    order.dedup();
    let mut result = Ok(());
    for s in order {
        match pool.install(|| run_stage(cfg, s, records.get(&s))) {
            Ok(r) => {
                records.insert(s, r);
            }
            Err(e) => {
                records.remove(&s);
                result = Err(e);
                break;
            }
        }
    }
    let manifest =
        Manifest { version: MANIFEST_VERSION, config: cfg.to_map(), stages: records.into_values().collect() };
    let json = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    let written = write_atomic(&dir.join(MANIFEST_NAME), format!("{json}\n").as_bytes());
    result?;
    written.map_err(|e| PipelineError::Stage { stage: "manifest", source: e.into() })?;
    Ok(manifest)
}

/// Runs every stage.
pub fn run_pipeline(cfg: &PipelineConfig) -> Result<Manifest, PipelineError> {
    run_stages(cfg, &Stage::ALL)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(dir: &Path) -> PipelineConfig {
        let mut cfg = PipelineConfig::default();
        for kv in [
            "n=10",
            "angles=12",
            "weight_margin=2",
            "weight_z_max=6",
            "weight_dx=0.1",
            "weight_dz=0.1",
            "image_size=21",
            "image_pitch_mm=2.5",
        ] {
            cfg.apply_override(kv).unwrap();
        }
        cfg.output_dir = dir.to_path_buf();
        cfg
    }

    #[test]
    fn defaults_round_trip_through_text() {
        let cfg = PipelineConfig::default();
        assert_eq!(PipelineConfig::parse(&cfg.to_text()).unwrap(), cfg);
        for (k, default, _) in KEYS {
            assert_eq!(cfg.get(k).as_deref(), Some(*default), "{k}");
        }
        assert_eq!(cfg.z_cut(), 0.8);
        assert_eq!(cfg.filter_spec().size, 109);
        assert_eq!(cfg.filter_spec().pitch, 1.25);
    }

    #[test]
    fn parse_errors_name_the_line() {
        let err = PipelineConfig::parse("n = 3\n\n# c\nangles = many\n").unwrap_err();
        assert_eq!(err.exit_code(), 2);
        assert!(err.to_string().contains("line 4"), "{err}");
        assert!(PipelineConfig::parse("bogus = 1").is_err());
        assert!(PipelineConfig::parse("n 3").is_err());
    }

    #[test]
    fn overrides_last_wins() {
        let mut cfg = PipelineConfig::default();
        cfg.apply_override("angles=90").unwrap();
        cfg.apply_override("angles = 36").unwrap();
        assert_eq!(cfg.angles, 36);
        cfg.apply_override("render_mapping=fixed:-1:1").unwrap();
        assert_eq!(cfg.render_mapping, Mapping::Fixed(-1.0, 1.0));
        assert!(cfg.apply_override("angles").is_err());
    }

    #[test]
    fn validation_rejects_bad_ranges() {
        for kv in ["n=0", "pitch_mm=-1", "gaps=5", "green_eps0=0", "weight_dx=0", "image_size=1"] {
            let mut cfg = PipelineConfig::default();
            cfg.apply_override(kv).unwrap();
            assert!(matches!(cfg.validate(), Err(PipelineError::Config(_))), "{kv}");
        }
        let mut cfg = PipelineConfig::default();
        cfg.apply_override("phantom=/nonexistent/phantom.txt").unwrap();
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn builtin_phantom_sits_above_standoff() {
        let spec = PhantomSpec::<f64>::parse(BUILTIN_PHANTOM).unwrap();
        assert_eq!(spec.primitives().len(), 2);
        let b = spec.bounds().unwrap();
        assert!(b.min[2] >= 2.0);
        assert!(b.max_radius() <= 13.0 * 2.5);
    }

    #[test]
    fn pipeline_caches_and_invalidates() {
        let tmp = tempfile::tempdir().unwrap();
        let cfg = small(tmp.path());
        let first = run_pipeline(&cfg).unwrap();
        assert!(first.stages.iter().all(|r| !r.cached));
        assert_eq!(first.stages.len(), 5);
        for k in 1..=4 {
            assert!(tmp.path().join(layer_name(k)).is_file());
        }

        let second = run_pipeline(&cfg).unwrap();
        assert!(second.stages.iter().all(|r| r.cached));
        assert_eq!(first.output_hashes(), second.output_hashes());

        let mut changed = cfg.clone();
        changed.render_mapping = Mapping::MinMax;
        let third = run_pipeline(&changed).unwrap();
        let cached: Vec<bool> = Stage::ALL.iter().map(|&s| third.stage(s).unwrap().cached).collect();
        assert_eq!(cached, vec![true, true, true, true, false]);

        fs::write(tmp.path().join(SINOGRAM), b"tampered").unwrap();
        let fourth = run_pipeline(&changed).unwrap();
        assert!(!fourth.stage(Stage::Forward).unwrap().cached);
        assert!(fourth.stage(Stage::Recon).unwrap().cached);
        assert_eq!(fourth.output_hashes(), third.output_hashes());
    }

    #[test]
    fn stage_failure_removes_outputs() {
        let tmp = tempfile::tempdir().unwrap();
        let mut cfg = small(tmp.path());
        run_pipeline(&cfg).unwrap();
        let phantom = tmp.path().join("wide.txt");
        fs::write(&phantom, "box 0 0 10 30 1 1 0 2\n").unwrap();
        cfg.phantom = PhantomSource::File(phantom);
        let err = run_pipeline(&cfg).unwrap_err();
        assert_eq!(err.exit_code(), 3);
        assert!(matches!(err, PipelineError::Stage { stage: "forward", .. }), "{err}");
        assert!(!tmp.path().join(SINOGRAM).exists());
        let m = Manifest::load(tmp.path()).unwrap();
        assert!(m.stage(Stage::Forward).is_none());
        assert!(m.stage(Stage::Phantom).is_some());
    }

    #[test]
    fn missing_inputs_fail_the_stage() {
        let tmp = tempfile::tempdir().unwrap();
        let cfg = small(tmp.path());
        let err = run_stages(&cfg, &[Stage::Recon]).unwrap_err();
        assert!(matches!(err, PipelineError::Stage { stage: "recon", .. }));
    }

    proptest::proptest! {
        #[test]
        fn numeric_keys_round_trip(n in 4usize..200, pitch in 0.1f64..10.0, angles in 1usize..720, dz in 0.01f64..0.5) {
            let mut cfg = PipelineConfig::default();
            cfg.apply_override(&format!("n={n}")).unwrap();
            cfg.apply_override(&format!("pitch_mm={pitch}")).unwrap();
            cfg.apply_override(&format!("angles={angles}")).unwrap();
            cfg.apply_override(&format!("weight_dz={dz}")).unwrap();
            proptest::prop_assert_eq!(PipelineConfig::parse(&cfg.to_text()).unwrap(), cfg);
        }
    }
}
