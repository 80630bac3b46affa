use alloc::format;
use alloc::vec::Vec;
use core::fmt;
use core::str::FromStr;

use crate::error::{Error, Result};

/// Normalization applied at one site, always followed by the style affine.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum NormKind {
    /// Instance norm, then `gamma * y + beta`.
    InStyle,
    /// Pixel norm, then `gamma * y + beta`.
    PnStyle,
    /// Pixel-instance norm with trainable `rho`, then `gamma * y + beta`.
    PinStyle,
    /// `sigma_y * IN(x) + mu_y`.
    Adain,
}

impl NormKind {
    pub const ALL: [NormKind; 4] = [
        NormKind::InStyle,
        NormKind::PnStyle,
        NormKind::PinStyle,
        NormKind::Adain,
    ];

    pub fn name(self) -> &'static str {
        match self {
            NormKind::InStyle => "IN",
            NormKind::PnStyle => "PN",
            NormKind::PinStyle => "PIN",
            NormKind::Adain => "AdaIN",
        }
    }

    fn code(self) -> u8 {
        match self {
            NormKind::InStyle => 0,
            NormKind::PnStyle => 1,
            NormKind::PinStyle => 2,
            NormKind::Adain => 3,
        }
    }
}

impl fmt::Display for NormKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for NormKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_uppercase().as_str() {
            "IN" | "IN+STYLE" => Ok(NormKind::InStyle),
            "PN" | "PN+STYLE" => Ok(NormKind::PnStyle),
            "PIN" | "PIN+STYLE" => Ok(NormKind::PinStyle),
            "ADAIN" => Ok(NormKind::Adain),
            _ => Err(Error::Config(format!(
                "unknown normalization kind {s:?} (expected IN, PN, PIN or AdaIN)"
            ))),
        }
    }
}

/// Shape and per-site choices of the synthesis network.
///
/// Resolutions run 4, 8, ..., `max_resolution`, with two normalization
/// sites per resolution; site `s` lives at resolution `4 << (s / 2)`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GeneratorConfig {
    pub max_resolution: usize,
    /// Channel count per resolution, index 0 is 4x4.
    pub channels: Vec<usize>,
    pub latent_dim: usize,
    pub mapping_layers: usize,
    /// One entry per normalization site.
    pub norm_kinds: Vec<NormKind>,
    pub noise_enabled: bool,
    pub seed: u64,
}

impl GeneratorConfig {
    pub fn default_channels(resolution: usize) -> usize {
        match resolution {
            4 | 8 => 64,
            16 => 32,
            32 => 16,
            _ => 8,
        }
    }

    pub fn new(max_resolution: usize, kind: NormKind) -> Result<Self> {
        let levels = levels_for(max_resolution)?;
        let cfg = Self {
            max_resolution,
            channels: (0..levels).map(|i| Self::default_channels(4 << i)).collect(),
            latent_dim: 64,
            mapping_layers: 3,
            norm_kinds: alloc::vec![kind; 2 * levels],
            noise_enabled: true,
            seed: 0,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let levels = levels_for(self.max_resolution)?;
        if self.channels.len() != levels {
            return Err(Error::Config(format!(
                "expected channel counts for {levels} resolutions, got {}",
                self.channels.len()
            )));
        }
        if self.channels.iter().any(|&c| c == 0) {
            return Err(Error::Config("channel counts must be positive".into()));
        }
        if self.latent_dim == 0 || self.mapping_layers == 0 {
            return Err(Error::Config(
                "latent_dim and mapping_layers must be positive".into(),
            ));
        }
        if self.norm_kinds.len() != 2 * levels {
            return Err(Error::Config(format!(
                "expected {} normalization kinds, got {}",
                2 * levels,
                self.norm_kinds.len()
            )));
        }
        Ok(())
    }

    pub fn with_uniform_norm(mut self, kind: NormKind) -> Self {
        self.norm_kinds.iter_mut().for_each(|k| *k = kind);
        self
    }

    pub fn levels(&self) -> usize {
        self.channels.len()
    }

    pub fn resolutions(&self) -> Vec<usize> {
        (0..self.levels()).map(|i| 4 << i).collect()
    }

    pub fn num_sites(&self) -> usize {
        2 * self.levels()
    }

    pub fn site_resolution(&self, site: usize) -> usize {
        4 << (site / 2)
    }

    pub fn site_channels(&self, site: usize) -> usize {
        self.channels[site / 2]
    }

    /// Channels entering the site's convolution.
    pub fn site_in_channels(&self, site: usize) -> usize {
        if site == 0 {
            self.channels[0]
        } else {
            self.channels[(site - 1) / 2]
        }
    }

    pub fn final_site(&self) -> usize {
        self.num_sites() - 1
    }

    pub fn check_site(&self, site: usize) -> Result<()> {
        if site < self.num_sites() {
            Ok(())
        } else {
            Err(Error::OutOfRange {
                what: "site",
                index: site,
                limit: self.num_sites(),
            })
        }
    }

    /// Stable 64-bit FNV-1a hash of everything that determines parameter
    /// shapes and the forward graph (the init seed is excluded).
    pub fn structure_hash(&self) -> u64 {
        let mut h = Fnv::new();
        h.write(b"pinlab-generator-v1");
        h.write_u64(self.max_resolution as u64);
        h.write_u64(self.channels.len() as u64);
        for &c in &self.channels {
            h.write_u64(c as u64);
        }
        h.write_u64(self.latent_dim as u64);
        h.write_u64(self.mapping_layers as u64);
        h.write_u64(self.norm_kinds.len() as u64);
        for k in &self.norm_kinds {
            h.write(&[k.code()]);
        }
        h.write(&[self.noise_enabled as u8]);
        h.finish()
    }
}

fn levels_for(max_resolution: usize) -> Result<usize> {
    if !(8..=64).contains(&max_resolution) || !max_resolution.is_power_of_two() {
        return Err(Error::Config(format!(
            "max_resolution must be a power of two in [8, 64], got {max_resolution}"
        )));
    }
    Ok(max_resolution.trailing_zeros() as usize - 1)
}

struct Fnv(u64);

impl Fnv {
    fn new() -> Self {
        Fnv(0xcbf2_9ce4_8422_2325)
    }

    fn write(&mut self, bytes: &[u8]) {
        for &b in bytes {
            self.0 ^= b as u64;
            self.0 = self.0.wrapping_mul(0x0000_0100_0000_01b3);
        }
    }

    fn write_u64(&mut self, v: u64) {
        self.write(&v.to_le_bytes());
    }

    fn finish(&self) -> u64 {
        self.0
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_layout() {
        let cfg = GeneratorConfig::new(32, NormKind::Adain).unwrap();
        assert_eq!(cfg.channels, [64, 64, 32, 16]);
        assert_eq!(cfg.resolutions(), [4, 8, 16, 32]);
        assert_eq!(cfg.num_sites(), 8);
        assert_eq!(cfg.site_resolution(5), 16);
        assert_eq!(cfg.site_in_channels(2), 64);
        assert_eq!(cfg.site_in_channels(4), 64);
        assert_eq!(cfg.site_in_channels(6), 32);
    }

    #[test]
    fn rejects_bad_resolution() {
        for r in [4, 12, 128] {
            assert!(GeneratorConfig::new(r, NormKind::InStyle).is_err());
        }
    }

    #[test]
    fn hash_tracks_structure_not_seed() {
        let a = GeneratorConfig::new(16, NormKind::InStyle).unwrap();
        let mut b = a.clone();
        b.seed = 99;
        assert_eq!(a.structure_hash(), b.structure_hash());
        let c = a.clone().with_uniform_norm(NormKind::PinStyle);
        assert_ne!(a.structure_hash(), c.structure_hash());
    }

    #[test]
    fn parses_kinds() {
        assert_eq!("pin".parse::<NormKind>().unwrap(), NormKind::PinStyle);
        assert_eq!("AdaIN".parse::<NormKind>().unwrap(), NormKind::Adain);
        assert!("BN".parse::<NormKind>().is_err());
    }
}
