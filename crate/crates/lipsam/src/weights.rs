//! Versioned binary weight files with a SHA-256 trailer, and the JSON
//! architecture sidecar that references them.
//!
//! Binary layout (little-endian):
//!
//! ```text
//! magic "LPAMWGT\0" | version u32 | scale f64 | layer count u32
//! per layer:
//!   kernel kind u8 (0 line, 1 square) | kernel size u32
//!   in_channels u32 | out_channels u32
//!   activation u8 (0 identity, 1 leaky relu, 2 softplus) | slope f64
//!   has bias u8 | has certificate u8 | certificate f64
//!   weights f64 x (out * in * taps), row-major | bias f64 x out
//! sha256 of everything above (32 bytes)
//! ```

use std::fs;
use std::path::{Path, PathBuf};

use lipsam_core::modifier::{AmplitudeMap, ArchitectureKind, ModifierArchitecture, NetLayout};
use lipsam_core::network::{Activation, ConvLayer, ConvNet, Kernel};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{AppError, AppResult};

pub const MAGIC: &[u8; 8] = b"LPAMWGT\0";
pub const VERSION: u32 = 1;
const DIGEST_LEN: usize = 32;

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

pub fn save_weights(net: &ConvNet) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&net.scale.to_le_bytes());
    out.extend_from_slice(&(net.layers.len() as u32).to_le_bytes());
    for layer in &net.layers {
        let (kind, size) = match layer.kernel {
            Kernel::Line(k) => (0u8, k),
            Kernel::Square(k) => (1u8, k),
        };
        out.push(kind);
        out.extend_from_slice(&(size as u32).to_le_bytes());
        out.extend_from_slice(&(layer.in_channels as u32).to_le_bytes());
        out.extend_from_slice(&(layer.out_channels as u32).to_le_bytes());
        let (act, slope) = match layer.activation {
            Activation::Identity => (0u8, 0.0),
            Activation::LeakyRelu(s) => (1u8, s),
            Activation::SoftPlus => (2u8, 0.0),
        };
        out.push(act);
        out.extend_from_slice(&slope.to_le_bytes());
        out.push(layer.bias.is_some() as u8);
        out.push(layer.norm_certificate.is_some() as u8);
        out.extend_from_slice(&layer.norm_certificate.unwrap_or(0.0).to_le_bytes());
        for w in layer.weights.iter().chain(layer.bias.iter().flatten()) {
            out.extend_from_slice(&w.to_le_bytes());
        }
    }
    let digest = Sha256::digest(&out);
    out.extend_from_slice(&digest);
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    at: usize,
}

impl Reader<'_> {
    fn take(&mut self, n: usize) -> AppResult<&[u8]> {
        let end = self.at.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| AppError::Format(format!("truncated at byte {}", self.at)))?;
        let slice = &self.bytes[self.at..end];
        self.at = end;
        Ok(slice)
    }

    fn u8(&mut self) -> AppResult<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> AppResult<usize> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")) as usize)
    }

    fn f64(&mut self) -> AppResult<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn flag(&mut self) -> AppResult<bool> {
        match self.u8()? {
            0 => Ok(false),
            1 => Ok(true),
            v => Err(AppError::Format(format!("invalid flag byte {v}"))),
        }
    }

    fn vec(&mut self, n: usize) -> AppResult<Vec<f64>> {
        (0..n).map(|_| self.f64()).collect()
    }
}

pub fn load_weights(bytes: &[u8]) -> AppResult<ConvNet> {
    if bytes.len() < MAGIC.len() + 4 + DIGEST_LEN {
        return Err(AppError::Format("truncated header".into()));
    }
    if &bytes[..MAGIC.len()] != MAGIC {
        return Err(AppError::Format("bad magic".into()));
    }
    let (body, digest) = bytes.split_at(bytes.len() - DIGEST_LEN);
    let mut r = Reader { bytes: body, at: MAGIC.len() };
    let version = r.u32()?;
    if version as u32 != VERSION {
        return Err(AppError::Format(format!("unsupported version {version}")));
    }
    if Sha256::digest(body).as_slice() != digest {
        return Err(AppError::Format("checksum mismatch".into()));
    }
    let scale = r.f64()?;
    let count = r.u32()?;
    let mut layers = Vec::with_capacity(count.min(1024));
    for _ in 0..count {
        let kernel = match (r.u8()?, r.u32()?) {
            (0, k) => Kernel::Line(k),
            (1, k) => Kernel::Square(k),
            (tag, _) => return Err(AppError::Format(format!("unknown kernel kind {tag}"))),
        };
        let in_channels = r.u32()?;
        let out_channels = r.u32()?;
        let activation = match (r.u8()?, r.f64()?) {
            (0, _) => Activation::Identity,
            (1, slope) => Activation::LeakyRelu(slope),
            (2, _) => Activation::SoftPlus,
            (tag, _) => return Err(AppError::Format(format!("unknown activation {tag}"))),
        };
        let has_bias = r.flag()?;
        let has_cert = r.flag()?;
        let cert = r.f64()?;
        let n = out_channels
            .checked_mul(in_channels)
            .and_then(|v| v.checked_mul(kernel.taps()))
            .filter(|&n| n * 8 <= body.len())
            .ok_or_else(|| AppError::Format("layer shape exceeds the file size".into()))?;
        let weights = r.vec(n)?;
        let bias = if has_bias { Some(r.vec(out_channels)?) } else { None };
        layers.push(ConvLayer {
            in_channels,
            out_channels,
            kernel,
            weights,
            bias,
            activation,
            norm_certificate: has_cert.then_some(cert),
        });
    }
    if r.at != body.len() {
        return Err(AppError::Format(format!("{} trailing bytes", body.len() - r.at)));
    }
    ConvNet::new(layers, scale).map_err(|e| AppError::Format(e.to_string()))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum KindName {
    #[serde(rename = "AM-SE")]
    AmSe,
    #[serde(rename = "AM-RE")]
    AmRe,
    #[serde(rename = "LipsAM-SE")]
    LipsAmSe,
    #[serde(rename = "LipsAM-RE")]
    LipsAmRe,
}

impl From<ArchitectureKind> for KindName {
    fn from(kind: ArchitectureKind) -> Self {
        match kind {
            ArchitectureKind::AmSe => KindName::AmSe,
            ArchitectureKind::AmRe => KindName::AmRe,
            ArchitectureKind::LipsAmSe => KindName::LipsAmSe,
            ArchitectureKind::LipsAmRe => KindName::LipsAmRe,
        }
    }
}

impl From<KindName> for ArchitectureKind {
    fn from(kind: KindName) -> Self {
        match kind {
            KindName::AmSe => ArchitectureKind::AmSe,
            KindName::AmRe => ArchitectureKind::AmRe,
            KindName::LipsAmSe => ArchitectureKind::LipsAmSe,
            KindName::LipsAmRe => ArchitectureKind::LipsAmRe,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LayoutName {
    FrequencyChannels,
    Image,
}

impl From<NetLayout> for LayoutName {
    fn from(layout: NetLayout) -> Self {
        match layout {
            NetLayout::FrequencyChannels => LayoutName::FrequencyChannels,
            NetLayout::Image => LayoutName::Image,
        }
    }
}

impl From<LayoutName> for NetLayout {
    fn from(layout: LayoutName) -> Self {
        match layout {
            LayoutName::FrequencyChannels => NetLayout::FrequencyChannels,
            LayoutName::Image => NetLayout::Image,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum InnerSpec {
    Net {
        /// Weight file, relative to the sidecar's directory.
        weights: String,
        sha256: String,
        layout: LayoutName,
        /// Spatial width the certificates were measured at; they hold for
        /// this width and its divisors.
        #[serde(default)]
        certified_width: Option<usize>,
    },
    SoftThreshold {
        tau: f64,
    },
    BiasAdd {
        b: f64,
    },
    Permutation {
        map: Vec<usize>,
    },
    Identity,
    Zero,
}

pub const SIDECAR_FORMAT: &str = "lipsam-architecture";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArchitectureFile {
    pub format: String,
    pub version: u32,
    pub kind: KindName,
    pub inner: InnerSpec,
}

/// A modifier loaded from disk with its sidecar description.
#[derive(Debug, Clone)]
pub struct LoadedModel {
    pub architecture: ModifierArchitecture,
    pub file: ArchitectureFile,
}

impl LoadedModel {
    pub fn certified_width(&self) -> Option<usize> {
        match &self.file.inner {
            InnerSpec::Net { certified_width, .. } => *certified_width,
            _ => None,
        }
    }
}

fn write_file(path: &Path, bytes: &[u8]) -> AppResult<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| AppError::io(dir, e))?;
    }
    fs::write(path, bytes).map_err(|e| AppError::io(path, e))
}

pub fn sidecar_path(weights: &Path) -> PathBuf {
    weights.with_extension("json")
}

/// Writes the architecture: the weight file at `weights_path` (for net inner
/// maps) and the sidecar next to it. Returns the sidecar path.
pub fn save_model(arch: &ModifierArchitecture, weights_path: &Path, certified_width: Option<usize>) -> AppResult<PathBuf> {
    let inner = match arch.inner() {
        AmplitudeMap::Net { net, layout } => {
            let bytes = save_weights(net);
            write_file(weights_path, &bytes)?;
            let name = weights_path
                .file_name()
                .ok_or_else(|| AppError::usage(format!("{} is not a file path", weights_path.display())))?
                .to_string_lossy()
                .into_owned();
            InnerSpec::Net { weights: name, sha256: sha256_hex(&bytes), layout: (*layout).into(), certified_width }
        }
        AmplitudeMap::SoftThreshConstant(tau) => InnerSpec::SoftThreshold { tau: *tau },
        AmplitudeMap::BiasAdd(b) => InnerSpec::BiasAdd { b: *b },
        AmplitudeMap::Permutation(map) => InnerSpec::Permutation { map: map.clone() },
        AmplitudeMap::Identity => InnerSpec::Identity,
        AmplitudeMap::Zero => InnerSpec::Zero,
    };
    let file = ArchitectureFile { format: SIDECAR_FORMAT.into(), version: VERSION, kind: arch.kind().into(), inner };
    let sidecar = sidecar_path(weights_path);
    let mut json = serde_json::to_string_pretty(&file).expect("sidecar serialises");
    json.push('\n');
    write_file(&sidecar, json.as_bytes())?;
    Ok(sidecar)
}

pub fn load_model(sidecar: &Path) -> AppResult<LoadedModel> {
    let text = fs::read_to_string(sidecar).map_err(|e| AppError::io(sidecar, e))?;
    let file: ArchitectureFile =
        serde_json::from_str(&text).map_err(|e| AppError::Json { path: sidecar.to_path_buf(), source: e })?;
    if file.format != SIDECAR_FORMAT || file.version != VERSION {
        return Err(AppError::Format(format!(
            "{}: expected {SIDECAR_FORMAT} version {VERSION}, found {} version {}",
            sidecar.display(),
            file.format,
            file.version
        )));
    }
    let inner = match &file.inner {
        InnerSpec::Net { weights, sha256, layout, .. } => {
            let path = sidecar.parent().unwrap_or(Path::new("")).join(weights);
            let bytes = fs::read(&path).map_err(|e| AppError::io(&path, e))?;
            if &sha256_hex(&bytes) != sha256 {
                return Err(AppError::Format(format!("{} does not match the sidecar digest", path.display())));
            }
            AmplitudeMap::Net { net: load_weights(&bytes)?, layout: (*layout).into() }
        }
        InnerSpec::SoftThreshold { tau } => AmplitudeMap::SoftThreshConstant(*tau),
        InnerSpec::BiasAdd { b } => AmplitudeMap::BiasAdd(*b),
        InnerSpec::Permutation { map } => AmplitudeMap::Permutation(map.clone()),
        InnerSpec::Identity => AmplitudeMap::Identity,
        InnerSpec::Zero => AmplitudeMap::Zero,
    };
    let architecture = ModifierArchitecture::new(file.kind.into(), inner)?;
    Ok(LoadedModel { architecture, file })
}
