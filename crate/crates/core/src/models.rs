//! Network construction: the shallow baseline, the AlexNet-style and
//! GoogLeNet-style backbones adapted to two classes, weight
//! initialization, and per-group learning-rate multiplier schemes.
//!
//! The adapted backbones keep their reference layer stacks but end in a
//! fresh 2-way classifier; the GoogLeNet variant carries no auxiliary
//! classifier heads, so exactly one loss head exists. Parameter tensors
//! are addressed by stable names (see `docs/layer_names.md`) which is also
//! the naming contract for pretrained weight archives.

use std::collections::{BTreeMap, HashMap};
use std::io::{Read, Write};
use std::path::Path;
use std::str::FromStr;

use ndarray::{ArrayD, IxDyn};
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;

use crate::error::{Error, Result};
use crate::nn::{
    xavier_fill, xavier_param, BatchNorm2d, Conv2d, Dropout, Flatten, GlobalAvgPool, Inception,
    Layer, Linear, MaxPool2d, Network, Param, ReLU,
};

/// The three supported architectures.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Arch {
    Baseline,
    Alexnet,
    Googlenet,
}

impl FromStr for Arch {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "baseline" => Ok(Arch::Baseline),
            "alexnet" => Ok(Arch::Alexnet),
            "googlenet" => Ok(Arch::Googlenet),
            other => Err(Error::Model(format!("unknown architecture {other:?}"))),
        }
    }
}

impl std::fmt::Display for Arch {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Arch::Baseline => "baseline",
            Arch::Alexnet => "alexnet",
            Arch::Googlenet => "googlenet",
        })
    }
}

/// Weight initialization scheme.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InitScheme {
    XavierScratch,
    PretrainedImagenet,
}

impl FromStr for InitScheme {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "xavier_scratch" | "xavier" | "scratch" => Ok(InitScheme::XavierScratch),
            "pretrained_imagenet" | "pretrained" => Ok(InitScheme::PretrainedImagenet),
            other => Err(Error::Model(format!("unknown init scheme {other:?}"))),
        }
    }
}

impl std::fmt::Display for InitScheme {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            InitScheme::XavierScratch => "xavier_scratch",
            InitScheme::PretrainedImagenet => "pretrained_imagenet",
        })
    }
}

/// Architecture choice plus the knobs shared by all three networks.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub arch: Arch,
    pub num_classes: usize,
    pub dropout_rate: f64,
    pub init: InitScheme,
    pub input_side: usize,
    pub input_channels: usize,
}

impl ModelConfig {
    pub fn new(arch: Arch) -> Self {
        ModelConfig {
            arch,
            num_classes: 2,
            dropout_rate: 0.0,
            init: InitScheme::XavierScratch,
            input_side: 224,
            input_channels: 3,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_classes != 2 {
            return Err(Error::Model("num_classes is fixed at 2".into()));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(Error::Model(format!(
                "dropout rate {} must be in [0, 1)",
                self.dropout_rate
            )));
        }
        if self.arch == Arch::Baseline && self.init == InitScheme::PretrainedImagenet {
            return Err(Error::Model(
                "pretrained initialization is not available for the baseline".into(),
            ));
        }
        if self.input_channels != 3 {
            return Err(Error::Model("input_channels is fixed at 3".into()));
        }
        if self.input_side < 8 || self.input_side % 8 != 0 {
            return Err(Error::Model(format!(
                "input side {} must be a positive multiple of 8",
                self.input_side
            )));
        }
        Ok(())
    }

    /// Builds the network with a fresh Xavier initialization.
    pub fn build(&self, seed: u64) -> Result<Network> {
        self.validate()?;
        match self.arch {
            Arch::Baseline => Ok(build_baseline(self.input_side, seed)),
            arch => adapt_backbone(arch, self.num_classes, self.dropout_rate, self.input_side, seed),
        }
    }
}

fn conv_layer(
    name: &str,
    group: &str,
    c_in: usize,
    c_out: usize,
    kernel: usize,
    stride: usize,
    pad: usize,
    rng: &mut ChaCha12Rng,
) -> Layer {
    let weight = xavier_param(
        &format!("{name}.weight"),
        group,
        &[c_out, c_in, kernel, kernel],
        rng,
    );
    let bias = Param::new(
        format!("{name}.bias"),
        group,
        ArrayD::zeros(IxDyn(&[c_out])),
    );
    Layer::Conv2d(Conv2d::new(weight, bias, stride, pad))
}

fn linear_layer(name: &str, group: &str, f_in: usize, f_out: usize, rng: &mut ChaCha12Rng) -> Layer {
    let weight = xavier_param(&format!("{name}.weight"), group, &[f_in, f_out], rng);
    let bias = Param::new(format!("{name}.bias"), group, ArrayD::zeros(IxDyn(&[f_out])));
    Layer::Linear(Linear::new(weight, bias))
}

/// The shallow scratch network: three conv–batchnorm–relu–maxpool blocks
/// with 32, 32 and 64 filters, then fully-connected layers of 128, 64 and
/// 2 units. No dropout. Xavier initialization throughout.
pub fn build_baseline(input_side: usize, seed: u64) -> Network {
    assert!(input_side % 8 == 0, "baseline needs a side divisible by 8");
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let mut layers = Vec::new();
    let filters = [32usize, 32, 64];
    let mut c_in = 3;
    for (i, &c_out) in filters.iter().enumerate() {
        let idx = i + 1;
        let group = format!("conv{idx}");
        layers.push(conv_layer(&format!("conv{idx}"), &group, c_in, c_out, 3, 1, 1, &mut rng));
        layers.push(Layer::BatchNorm2d(BatchNorm2d::new(
            &format!("bn{idx}"),
            &group,
            c_out,
        )));
        layers.push(Layer::ReLU(ReLU::new()));
        layers.push(Layer::MaxPool2d(MaxPool2d::new(2, 2, 0, false)));
        c_in = c_out;
    }
    layers.push(Layer::Flatten(Flatten::new()));
    let side_out = input_side / 8;
    let flat = side_out * side_out * 64;
    layers.push(linear_layer("fc1", "fc1", flat, 128, &mut rng));
    layers.push(Layer::ReLU(ReLU::new()));
    layers.push(linear_layer("fc2", "fc2", 128, 64, &mut rng));
    layers.push(Layer::ReLU(ReLU::new()));
    layers.push(linear_layer("fc3", "fc3", 64, 2, &mut rng));
    Network::from_layers("baseline", input_side, layers)
}

/// Adapts a reference backbone to a fresh `num_classes`-way classifier.
/// The GoogLeNet variant is built without its auxiliary classifier
/// branches. Weights start Xavier-initialized; see [`init_weights`] for
/// pretrained loading.
pub fn adapt_backbone(
    arch: Arch,
    num_classes: usize,
    dropout_rate: f64,
    input_side: usize,
    seed: u64,
) -> Result<Network> {
    if num_classes != 2 {
        return Err(Error::Model("num_classes is fixed at 2".into()));
    }
    match arch {
        Arch::Baseline => Err(Error::Model(
            "baseline has nothing to adapt; build it directly".into(),
        )),
        Arch::Alexnet => Ok(build_alexnet(num_classes, dropout_rate, input_side, seed)),
        Arch::Googlenet => Ok(build_googlenet(num_classes, dropout_rate, input_side, seed)),
    }
}

fn pool_step(side: usize, kernel: usize, stride: usize, pad: usize, ceil: bool) -> usize {
    let span = side + 2 * pad - kernel;
    let mut out = if ceil { span.div_ceil(stride) + 1 } else { span / stride + 1 };
    if ceil && (out - 1) * stride >= side + pad {
        out -= 1;
    }
    out
}

/// Single-tower AlexNet: original filter counts (96/256/384/384/256),
/// fully-connected 4096-4096-`num_classes`, dropout before the first two
/// FC layers.
fn build_alexnet(num_classes: usize, dropout_rate: f64, input_side: usize, seed: u64) -> Network {
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let mut layers = Vec::new();
    layers.push(conv_layer("conv1", "conv1", 3, 96, 11, 4, 2, &mut rng));
    layers.push(Layer::ReLU(ReLU::new()));
    layers.push(Layer::MaxPool2d(MaxPool2d::new(3, 2, 0, false)));
    layers.push(conv_layer("conv2", "conv2", 96, 256, 5, 1, 2, &mut rng));
    layers.push(Layer::ReLU(ReLU::new()));
    layers.push(Layer::MaxPool2d(MaxPool2d::new(3, 2, 0, false)));
    layers.push(conv_layer("conv3", "conv3", 256, 384, 3, 1, 1, &mut rng));
    layers.push(Layer::ReLU(ReLU::new()));
    layers.push(conv_layer("conv4", "conv4", 384, 384, 3, 1, 1, &mut rng));
    layers.push(Layer::ReLU(ReLU::new()));
    layers.push(conv_layer("conv5", "conv5", 384, 256, 3, 1, 1, &mut rng));
    layers.push(Layer::ReLU(ReLU::new()));
    layers.push(Layer::MaxPool2d(MaxPool2d::new(3, 2, 0, false)));
    layers.push(Layer::Flatten(Flatten::new()));

    let mut side = pool_step(input_side, 11, 4, 2, false); // conv1
    side = pool_step(side, 3, 2, 0, false); // pool1
    side = pool_step(side, 3, 2, 0, false); // pool2 (conv2 preserves size)
    side = pool_step(side, 3, 2, 0, false); // pool5 (conv3..5 preserve size)
    let flat = side * side * 256;
    layers.push(Layer::Dropout(Dropout::new(dropout_rate)));
    layers.push(linear_layer("fc6", "fc6", flat, 4096, &mut rng));
    layers.push(Layer::ReLU(ReLU::new()));
    layers.push(Layer::Dropout(Dropout::new(dropout_rate)));
    layers.push(linear_layer("fc7", "fc7", 4096, 4096, &mut rng));
    layers.push(Layer::ReLU(ReLU::new()));
    layers.push(linear_layer("fc8", "fc8", 4096, num_classes, &mut rng));
    Network::from_layers("alexnet", input_side, layers)
}

/// Per-block inception channel table: (1x1, 3x3 reduce, 3x3, 5x5 reduce,
/// 5x5, pool proj), keyed by block name with its input channel count.
const INCEPTION_TABLE: &[(&str, usize, [usize; 6])] = &[
    ("inception_3a", 192, [64, 96, 128, 16, 32, 32]),
    ("inception_3b", 256, [128, 128, 192, 32, 96, 64]),
    ("inception_4a", 480, [192, 96, 208, 16, 48, 64]),
    ("inception_4b", 512, [160, 112, 224, 24, 64, 64]),
    ("inception_4c", 512, [128, 128, 256, 24, 64, 64]),
    ("inception_4d", 512, [112, 144, 288, 32, 64, 64]),
    ("inception_4e", 528, [256, 160, 320, 32, 128, 128]),
    ("inception_5a", 832, [256, 160, 320, 32, 128, 128]),
    ("inception_5b", 832, [384, 192, 384, 48, 128, 128]),
];

fn inception_block(name: &str, c_in: usize, cfg: [usize; 6], rng: &mut ChaCha12Rng) -> Layer {
    let [c1, r3, c3, r5, c5, pp] = cfg;
    let b1 = vec![
        conv_layer(&format!("{name}.b1"), name, c_in, c1, 1, 1, 0, rng),
        Layer::ReLU(ReLU::new()),
    ];
    let b2 = vec![
        conv_layer(&format!("{name}.b2reduce"), name, c_in, r3, 1, 1, 0, rng),
        Layer::ReLU(ReLU::new()),
        conv_layer(&format!("{name}.b2"), name, r3, c3, 3, 1, 1, rng),
        Layer::ReLU(ReLU::new()),
    ];
    let b3 = vec![
        conv_layer(&format!("{name}.b3reduce"), name, c_in, r5, 1, 1, 0, rng),
        Layer::ReLU(ReLU::new()),
        conv_layer(&format!("{name}.b3"), name, r5, c5, 5, 1, 2, rng),
        Layer::ReLU(ReLU::new()),
    ];
    let b4 = vec![
        Layer::MaxPool2d(MaxPool2d::new(3, 1, 1, false)),
        conv_layer(&format!("{name}.b4"), name, c_in, pp, 1, 1, 0, rng),
        Layer::ReLU(ReLU::new()),
    ];
    Layer::Inception(Box::new(Inception::new(name, vec![b1, b2, b3, b4])))
}

/// GoogLeNet main branch: stem, nine inception blocks, global average
/// pooling, dropout, and a single `num_classes`-way classifier head (no
/// auxiliary heads).
fn build_googlenet(num_classes: usize, dropout_rate: f64, input_side: usize, seed: u64) -> Network {
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let mut layers = Vec::new();
    layers.push(conv_layer("conv1", "conv1", 3, 64, 7, 2, 3, &mut rng));
    layers.push(Layer::ReLU(ReLU::new()));
    layers.push(Layer::MaxPool2d(MaxPool2d::new(3, 2, 0, true)));
    layers.push(conv_layer("conv2reduce", "conv2", 64, 64, 1, 1, 0, &mut rng));
    layers.push(Layer::ReLU(ReLU::new()));
    layers.push(conv_layer("conv2", "conv2", 64, 192, 3, 1, 1, &mut rng));
    layers.push(Layer::ReLU(ReLU::new()));
    layers.push(Layer::MaxPool2d(MaxPool2d::new(3, 2, 0, true)));
    for &(name, c_in, cfg) in &INCEPTION_TABLE[0..2] {
        layers.push(inception_block(name, c_in, cfg, &mut rng));
    }
    layers.push(Layer::MaxPool2d(MaxPool2d::new(3, 2, 0, true)));
    for &(name, c_in, cfg) in &INCEPTION_TABLE[2..7] {
        layers.push(inception_block(name, c_in, cfg, &mut rng));
    }
    layers.push(Layer::MaxPool2d(MaxPool2d::new(3, 2, 0, true)));
    for &(name, c_in, cfg) in &INCEPTION_TABLE[7..9] {
        layers.push(inception_block(name, c_in, cfg, &mut rng));
    }
    layers.push(Layer::GlobalAvgPool(GlobalAvgPool::new()));
    layers.push(Layer::Dropout(Dropout::new(dropout_rate)));
    layers.push(linear_layer("fc", "fc", 1024, num_classes, &mut rng));
    Network::from_layers("googlenet", input_side, layers)
}

// ---------------------------------------------------------------------------
// Initialization
// ---------------------------------------------------------------------------

/// Which layers were loaded from an archive and which were freshly
/// initialized.
#[derive(Debug, Clone, Default)]
pub struct InitReport {
    pub loaded: Vec<String>,
    pub fresh: Vec<String>,
}

/// Layer groups that stay freshly initialized under pretrained loading.
pub fn fresh_groups(arch: Arch) -> &'static [&'static str] {
    match arch {
        Arch::Baseline => &[],
        Arch::Alexnet => &["fc6", "fc7", "fc8"],
        Arch::Googlenet => &["fc"],
    }
}

/// Applies an initialization scheme in place.
///
/// Xavier re-initializes every weight tensor (biases to zero, batch-norm
/// scale to one). Pretrained loading fills every backbone parameter from
/// the archive by name — a missing or shape-mismatched backbone tensor is
/// a hard error naming the layer — and Xavier-initializes the fresh
/// classifier layers.
pub fn init_weights(
    net: &mut Network,
    scheme: InitScheme,
    archive_path: Option<&Path>,
    seed: u64,
) -> Result<InitReport> {
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    match scheme {
        InitScheme::XavierScratch => {
            let mut report = InitReport::default();
            net.visit_params_mut(&mut |p| {
                apply_fresh_init(p, &mut rng);
                report.fresh.push(p.name.clone());
            });
            Ok(report)
        }
        InitScheme::PretrainedImagenet => {
            let path = archive_path.ok_or_else(|| {
                Error::Model("pretrained initialization requires a weight archive".into())
            })?;
            let arch: Arch = net.arch_name.parse()?;
            let archive = load_archive(path)?;
            let fresh = fresh_groups(arch);
            let mut report = InitReport::default();
            let mut missing: Option<String> = None;
            net.visit_params_mut(&mut |p| {
                if missing.is_some() {
                    return;
                }
                if fresh.contains(&p.group.as_str()) {
                    apply_fresh_init(p, &mut rng);
                    report.fresh.push(p.name.clone());
                    return;
                }
                match archive.tensors.get(&p.name) {
                    Some(t) if t.shape() == p.values.shape() => {
                        p.values.assign(t);
                        report.loaded.push(p.name.clone());
                    }
                    _ => missing = Some(p.name.clone()),
                }
            });
            if let Some(layer) = missing {
                return Err(Error::MissingWeight {
                    path: path.to_path_buf(),
                    layer,
                });
            }
            // running statistics ride along when the archive has them
            net.visit_buffers_mut(&mut |name, values| {
                if let Some(t) = archive.tensors.get(name) {
                    if t.len() == values.len() {
                        for (dst, src) in values.iter_mut().zip(t.iter()) {
                            *dst = *src;
                        }
                    }
                }
            });
            if let Some(means) = archive.meta.get("channel_means") {
                let parts: Vec<f64> = means
                    .split(',')
                    .filter_map(|v| v.trim().parse().ok())
                    .collect();
                if parts.len() == 3 {
                    net.channel_means = [parts[0], parts[1], parts[2]];
                }
            }
            Ok(report)
        }
    }
}

fn apply_fresh_init(p: &mut Param, rng: &mut ChaCha12Rng) {
    if p.name.ends_with(".weight") {
        xavier_fill(&mut p.values, rng);
    } else if p.name.ends_with(".gamma") {
        p.values.fill(1.0);
    } else {
        p.values.fill(0.0);
    }
}

// ---------------------------------------------------------------------------
// Learning-rate multiplier schemes
// ---------------------------------------------------------------------------

/// Ordered (layer-group, multiplier) pairs; every trainable group of the
/// target network must match exactly one entry.
#[derive(Debug, Clone, PartialEq)]
pub struct LRMultiplierScheme {
    pub entries: Vec<(String, f64)>,
}

impl LRMultiplierScheme {
    pub fn uniform(groups: &[String]) -> Self {
        LRMultiplierScheme {
            entries: groups.iter().map(|g| (g.clone(), 1.0)).collect(),
        }
    }

    pub fn multiplier_for(&self, group: &str) -> Option<f64> {
        self.entries
            .iter()
            .find(|(g, _)| g == group)
            .map(|(_, m)| *m)
    }

    /// Every network group matches exactly one entry; multipliers are
    /// nonnegative.
    pub fn validate_coverage(&self, net: &Network) -> Result<()> {
        for (g, m) in &self.entries {
            if *m < 0.0 {
                return Err(Error::Model(format!("multiplier for group {g} is negative")));
            }
        }
        for group in net.groups() {
            let matches = self.entries.iter().filter(|(g, _)| *g == group).count();
            if matches != 1 {
                return Err(Error::Model(format!(
                    "group {group} matches {matches} multiplier entries, expected exactly 1"
                )));
            }
        }
        Ok(())
    }
}

/// The fine-tuning multiplier presets: AlexNet trains its convolutional
/// groups at 0.1 of the base rate and its FC stack at 1; GoogLeNet trains
/// everything before inception_5a at 0.1, inception_5a/5b at 1, and the
/// classifier head at 10.
pub fn multiplier_scheme(arch: Arch) -> Result<LRMultiplierScheme> {
    match arch {
        Arch::Baseline => Err(Error::Model(
            "the baseline trains with a uniform multiplier of 1".into(),
        )),
        Arch::Alexnet => {
            let mut entries = Vec::new();
            for g in ["conv1", "conv2", "conv3", "conv4", "conv5"] {
                entries.push((g.to_string(), 0.1));
            }
            for g in ["fc6", "fc7", "fc8"] {
                entries.push((g.to_string(), 1.0));
            }
            Ok(LRMultiplierScheme { entries })
        }
        Arch::Googlenet => {
            let mut entries = vec![("conv1".to_string(), 0.1), ("conv2".to_string(), 0.1)];
            for &(name, _, _) in INCEPTION_TABLE {
                let mult = if name.starts_with("inception_5") { 1.0 } else { 0.1 };
                entries.push((name.to_string(), mult));
            }
            entries.push(("fc".to_string(), 10.0));
            Ok(LRMultiplierScheme { entries })
        }
    }
}

// ---------------------------------------------------------------------------
// Tensor archives (pretrained weights; also the checkpoint payload)
// ---------------------------------------------------------------------------

const ARCHIVE_MAGIC: &[u8; 6] = b"MNET1\n";

/// Named f64 tensors plus free-form metadata, stored as a little-endian
/// binary file. Tensors serialize in name order so files are byte-stable.
#[derive(Debug, Clone, Default)]
pub struct TensorArchive {
    pub meta: BTreeMap<String, String>,
    pub tensors: HashMap<String, ArrayD<f64>>,
}

impl TensorArchive {
    /// Snapshot of a network: parameters and batch-norm running buffers.
    pub fn from_network(net: &Network) -> Self {
        let mut archive = TensorArchive::default();
        net.visit_params(&mut |p| {
            archive.tensors.insert(p.name.clone(), p.values.clone());
        });
        net.visit_buffers(&mut |name, values| {
            archive.tensors.insert(
                name.to_string(),
                ArrayD::from_shape_vec(IxDyn(&[values.len()]), values.to_vec()).unwrap(),
            );
        });
        archive
    }
}

pub fn save_archive(archive: &TensorArchive, path: &Path) -> Result<()> {
    let mut buf: Vec<u8> = Vec::new();
    buf.extend_from_slice(ARCHIVE_MAGIC);
    let meta: String = archive
        .meta
        .iter()
        .map(|(k, v)| format!("{k} = {v}\n"))
        .collect();
    buf.extend_from_slice(&(meta.len() as u32).to_le_bytes());
    buf.extend_from_slice(meta.as_bytes());
    let mut names: Vec<&String> = archive.tensors.keys().collect();
    names.sort();
    buf.extend_from_slice(&(names.len() as u32).to_le_bytes());
    for name in names {
        let tensor = &archive.tensors[name];
        buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
        buf.extend_from_slice(name.as_bytes());
        buf.extend_from_slice(&(tensor.ndim() as u32).to_le_bytes());
        for d in tensor.shape() {
            buf.extend_from_slice(&(*d as u64).to_le_bytes());
        }
        for v in tensor.iter() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&buf).map_err(|e| Error::io(path, e))?;
    Ok(())
}

pub fn load_archive(path: &Path) -> Result<TensorArchive> {
    let mut f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut buf = Vec::new();
    f.read_to_end(&mut buf).map_err(|e| Error::io(path, e))?;
    let mut pos = 0usize;
    let take = |pos: &mut usize, n: usize| -> Result<&[u8]> {
        if *pos + n > buf.len() {
            return Err(Error::parse("archive", "truncated file"));
        }
        let s = &buf[*pos..*pos + n];
        *pos += n;
        Ok(s)
    };
    if take(&mut pos, 6)? != ARCHIVE_MAGIC {
        return Err(Error::parse("archive", "bad magic"));
    }
    let read_u32 = |pos: &mut usize| -> Result<u32> {
        let b = take(pos, 4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    };
    let meta_len = read_u32(&mut pos)? as usize;
    let meta_str = std::str::from_utf8(take(&mut pos, meta_len)?)
        .map_err(|_| Error::parse("archive", "meta is not utf-8"))?
        .to_string();
    let mut meta = BTreeMap::new();
    for line in meta_str.lines() {
        if let Some((k, v)) = line.split_once('=') {
            meta.insert(k.trim().to_string(), v.trim().to_string());
        }
    }
    let n_tensors = read_u32(&mut pos)? as usize;
    let mut tensors = HashMap::with_capacity(n_tensors);
    for _ in 0..n_tensors {
        let name_len = read_u32(&mut pos)? as usize;
        let name = std::str::from_utf8(take(&mut pos, name_len)?)
            .map_err(|_| Error::parse("archive", "tensor name is not utf-8"))?
            .to_string();
        let ndim = read_u32(&mut pos)? as usize;
        let mut dims = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            let b = take(&mut pos, 8)?;
            dims.push(u64::from_le_bytes(b.try_into().unwrap()) as usize);
        }
        let len: usize = dims.iter().product();
        let raw = take(&mut pos, len * 8)?;
        let data: Vec<f64> = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let tensor = ArrayD::from_shape_vec(IxDyn(&dims), data)
            .map_err(|e| Error::parse("archive", e.to_string()))?;
        tensors.insert(name, tensor);
    }
    Ok(TensorArchive { meta, tensors })
}
