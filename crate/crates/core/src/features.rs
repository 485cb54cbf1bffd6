//! Perceptual feature providers `φ`.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::pool::AreaPool;
use crate::nn::{Activation, Conv2d, Padding};
use crate::params::{ParamBlock, ParamFile};
use crate::types::{FeatureMap, Image, Tensor3};

pub const FEATURE_MAGIC: [u8; 4] = *b"PFEA";
pub const FEATURE_VERSION: u32 = 1;
pub const FEATURE_HEADER_LEN: usize = 20;
pub const TOY_CNN_MAGIC: [u8; 4] = *b"PTCN";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ProviderKind {
    ToyCnn,
    ExternalPretrained,
    PrecomputedFile,
    RawColor,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FeatureProviderSpec {
    pub kind: ProviderKind,
    #[serde(default)]
    pub layer_names: Vec<String>,
    #[serde(default = "default_frozen")]
    pub frozen: bool,
    /// Seed for the toy CNN's random weights when no weights file is given.
    #[serde(default)]
    pub seed: u64,
    /// Toy CNN weights file.
    #[serde(default)]
    pub weights: Option<PathBuf>,
    /// Directory of `<sample id>.pfea` files for the precomputed kind.
    #[serde(default)]
    pub directory: Option<PathBuf>,
}

fn default_frozen() -> bool {
    true
}

impl FeatureProviderSpec {
    pub fn toy_cnn(layers: &[&str], seed: u64) -> Self {
        Self {
            kind: ProviderKind::ToyCnn,
            layer_names: layers.iter().map(|s| s.to_string()).collect(),
            frozen: true,
            seed,
            weights: None,
            directory: None,
        }
    }

    pub fn raw_color() -> Self {
        Self { kind: ProviderKind::RawColor, layer_names: Vec::new(), frozen: true, seed: 0, weights: None, directory: None }
    }

    pub fn precomputed(directory: impl Into<PathBuf>) -> Self {
        Self { directory: Some(directory.into()), ..Self { kind: ProviderKind::PrecomputedFile, ..Self::raw_color() } }
    }

    pub fn validate(&self) -> Result<()> {
        if !self.frozen {
            return Err(Error::config("provider.frozen", "perceptual providers must be frozen"));
        }
        match self.kind {
            ProviderKind::ExternalPretrained if self.layer_names.is_empty() => {
                Err(Error::config("provider.layer_names", "external providers need at least one layer"))
            }
            ProviderKind::ToyCnn => {
                for name in &self.layer_names {
                    if ToyCnn::layer_index(name).is_none() {
                        return Err(Error::config("provider.layer_names", format!("unknown toy-cnn layer `{name}`")));
                    }
                }
                Ok(())
            }
            ProviderKind::PrecomputedFile if self.directory.is_none() => {
                Err(Error::config("provider.directory", "precomputed features need a directory"))
            }
            _ => Ok(()),
        }
    }
}

/// A pretrained network outside this crate: image in, named maps out.
pub trait ExternalBackbone: Send + Sync {
    fn layers(&self, image: &Image, names: &[String]) -> Result<Vec<FeatureMap>>;
}

/// Something that turns an image into a feature map. `key` identifies the
/// sample for backends that look features up rather than compute them.
pub trait FeatureProvider: Send + Sync {
    fn extract(&self, image: &Image, key: Option<&str>) -> Result<FeatureMap>;
}

/// Frozen random four-block CNN with tanh activations; block `i` has output
/// stride `2^(i-1)`.
#[derive(Debug, Clone, PartialEq)]
pub struct ToyCnn {
    pub blocks: Vec<Conv2d>,
}

impl ToyCnn {
    pub const WIDTHS: [usize; 4] = [16, 32, 64, 64];
    pub const STRIDES: [usize; 4] = [1, 2, 2, 2];
    pub const ARCHITECTURE: &'static str = "toy-cnn/16-32-64-64/tanh";

    pub fn random(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut inc = 3;
        let blocks = Self::WIDTHS
            .iter()
            .zip(Self::STRIDES)
            .map(|(&out, stride)| {
                let conv = Conv2d::init_uniform(inc, out, 3, stride, Padding::Reflect, &mut rng);
                inc = out;
                conv
            })
            .collect();
        Self { blocks }
    }

    pub fn layer_index(name: &str) -> Option<usize> {
        match name {
            "block1" => Some(0),
            "block2" => Some(1),
            "block3" => Some(2),
            "block4" => Some(3),
            _ => None,
        }
    }

    /// Outputs of every block up to and including `last`.
    pub fn forward(&self, image: &Image, last: usize) -> Vec<Tensor3> {
        let mut x = image.tensor().clone();
        x.data_mut().iter_mut().for_each(|v| *v = 2.0 * *v - 1.0);
        let mut outs = Vec::with_capacity(last + 1);
        for conv in &self.blocks[..=last] {
            let (mut y, _) = conv.forward(&x);
            Activation::Tanh.apply(&mut y);
            outs.push(y.clone());
            x = y;
        }
        outs
    }

    pub fn to_param_file(&self) -> ParamFile {
        let blocks = self
            .blocks
            .iter()
            .enumerate()
            .flat_map(|(i, c)| {
                [
                    ParamBlock::new(format!("block{}.weight", i + 1), vec![c.out_channels, c.in_channels, 3, 3], c.weight.clone()),
                    ParamBlock::new(format!("block{}.bias", i + 1), vec![c.out_channels], c.bias.clone()),
                ]
            })
            .collect();
        ParamFile { magic: TOY_CNN_MAGIC, architecture: Self::ARCHITECTURE.into(), parts: 0, step: 0, blocks }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_param_file().save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = ParamFile::load(path, TOY_CNN_MAGIC)?;
        if file.architecture != Self::ARCHITECTURE {
            return Err(Error::Architecture(format!(
                "{} holds `{}`, expected `{}`",
                path.display(),
                file.architecture,
                Self::ARCHITECTURE
            )));
        }
        let mut net = Self::random(0);
        for (i, conv) in net.blocks.iter_mut().enumerate() {
            for (suffix, dst) in [("weight", &mut conv.weight), ("bias", &mut conv.bias)] {
                let name = format!("block{}.{suffix}", i + 1);
                let block = file.block(&name).ok_or_else(|| Error::format(path, format!("missing block `{name}`")))?;
                if block.data.len() != dst.len() {
                    return Err(Error::format(path, format!("block `{name}` has {} values, expected {}", block.data.len(), dst.len())));
                }
                dst.copy_from_slice(&block.data);
            }
        }
        Ok(net)
    }
}

/// Resizes every map to the coarsest grid and stacks the channels.
pub fn concat_layers(maps: &[Tensor3]) -> Result<FeatureMap> {
    let coarsest = maps
        .iter()
        .min_by_key(|m| m.height() * m.width())
        .ok_or_else(|| Error::InvalidValue("no feature layers".into()))?;
    let (h, w) = (coarsest.height(), coarsest.width());
    let mut data = Vec::new();
    let mut d = 0;
    for m in maps {
        let resized = if (m.height(), m.width()) == (h, w) { m.clone() } else { AreaPool::new(m.height(), m.width(), h, w).apply(m) };
        d += resized.channels();
        data.extend(resized.into_vec());
    }
    FeatureMap::new(Tensor3::from_vec(d, h, w, data)?)
}

pub struct Provider {
    spec: FeatureProviderSpec,
    toy: Option<ToyCnn>,
    external: Option<Box<dyn ExternalBackbone>>,
}

impl std::fmt::Debug for Provider {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Provider").field("spec", &self.spec).finish_non_exhaustive()
    }
}

impl Provider {
    pub fn new(spec: FeatureProviderSpec) -> Result<Self> {
        spec.validate()?;
        let toy = match spec.kind {
            ProviderKind::ToyCnn => Some(match &spec.weights {
                Some(path) => ToyCnn::load(path)?,
                None => ToyCnn::random(spec.seed),
            }),
            _ => None,
        };
        Ok(Self { spec, toy, external: None })
    }

    pub fn with_backbone(spec: FeatureProviderSpec, backbone: Box<dyn ExternalBackbone>) -> Result<Self> {
        let mut p = Self::new(spec)?;
        p.external = Some(backbone);
        Ok(p)
    }

    pub fn spec(&self) -> &FeatureProviderSpec {
        &self.spec
    }

    fn toy_layers(&self) -> Vec<usize> {
        if self.spec.layer_names.is_empty() {
            vec![3]
        } else {
            self.spec.layer_names.iter().map(|n| ToyCnn::layer_index(n).expect("validated")).collect()
        }
    }
}

impl FeatureProvider for Provider {
    fn extract(&self, image: &Image, key: Option<&str>) -> Result<FeatureMap> {
        match self.spec.kind {
            ProviderKind::RawColor => Ok(FeatureMap::from_image(image)),
            ProviderKind::ToyCnn => {
                let net = self.toy.as_ref().expect("toy cnn built");
                let layers = self.toy_layers();
                let outs = net.forward(image, *layers.iter().max().expect("non-empty"));
                let picked: Vec<Tensor3> = layers.iter().map(|&i| outs[i].clone()).collect();
                concat_layers(&picked)
            }
            ProviderKind::PrecomputedFile => {
                let key = key.ok_or_else(|| Error::InvalidValue("precomputed features need a sample id".into()))?;
                let dir = self.spec.directory.as_ref().expect("validated");
                load_features(&dir.join(format!("{key}.pfea")))
            }
            ProviderKind::ExternalPretrained => {
                let backbone = self.external.as_ref().ok_or_else(|| {
                    Error::config("provider.kind", "external-pretrained needs a backbone adapter, none is registered")
                })?;
                let maps = backbone.layers(image, &self.spec.layer_names)?;
                let tensors: Vec<Tensor3> = maps.into_iter().map(FeatureMap::into_tensor).collect();
                concat_layers(&tensors)
            }
        }
    }
}

pub fn encode_features(features: &FeatureMap) -> Vec<u8> {
    let (d, h, w) = features.tensor().shape();
    let mut out = Vec::with_capacity(FEATURE_HEADER_LEN + 8 * d * h * w);
    out.extend_from_slice(&FEATURE_MAGIC);
    out.extend_from_slice(&FEATURE_VERSION.to_le_bytes());
    for n in [d, h, w] {
        out.extend_from_slice(&(n as u32).to_le_bytes());
    }
    for v in features.tensor().data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn decode_features(bytes: &[u8], path: &Path) -> Result<FeatureMap> {
    if bytes.len() < FEATURE_HEADER_LEN {
        return Err(Error::format(path, "file shorter than the feature header"));
    }
    if bytes[..4] != FEATURE_MAGIC {
        return Err(Error::format(path, "bad magic, expected PFEA"));
    }
    let word = |i: usize| u32::from_le_bytes(bytes[4 + 4 * i..8 + 4 * i].try_into().expect("4 bytes")) as usize;
    if word(0) != FEATURE_VERSION as usize {
        return Err(Error::format(path, format!("unsupported version {}", word(0))));
    }
    let (d, h, w) = (word(1), word(2), word(3));
    let expected = d.checked_mul(h).and_then(|n| n.checked_mul(w)).and_then(|n| n.checked_mul(8));
    if expected != Some(bytes.len() - FEATURE_HEADER_LEN) {
        return Err(Error::format(path, format!("payload does not match shape ({d}, {h}, {w})")));
    }
    let data = bytes[FEATURE_HEADER_LEN..].chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
    FeatureMap::new(Tensor3::from_vec(d, h, w, data)?).map_err(|e| Error::format(path, e.to_string()))
}

pub fn save_features(path: &Path, features: &FeatureMap) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    w.write_all(&encode_features(features)).and_then(|_| w.flush()).map_err(|e| Error::io(path, e))
}

pub fn load_features(path: &Path) -> Result<FeatureMap> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut bytes = Vec::new();
    BufReader::new(file).read_to_end(&mut bytes).map_err(|e| Error::io(path, e))?;
    decode_features(&bytes, path)
}
