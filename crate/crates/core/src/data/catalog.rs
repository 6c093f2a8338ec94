use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const CATALOG_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Texture {
    /// Steady level for the whole event.
    Tonal,
    /// Repeating two-frames-loud, two-frames-soft pattern.
    Pulsed,
}

impl Texture {
    pub const PULSE: [f64; 4] = [1.0, 1.0, 0.4, 0.4];

    /// Texture gain `offset` frames after onset.
    pub fn gain(self, offset: usize) -> f64 {
        match self {
            Texture::Tonal => 1.0,
            Texture::Pulsed => Self::PULSE[offset % Self::PULSE.len()],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EventType {
    pub id: usize,
    pub name: String,
    /// Characteristic band `[freq_lo, freq_hi)` in bins.
    pub freq_lo: usize,
    pub freq_hi: usize,
    pub texture: Texture,
}

/// Fixed set of synthetic sound-event types. Bands are laid out in equal
/// slots of `bins / types` rows; the first row of each slot is left empty so
/// every band has a silent guard row below it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Catalog {
    pub version: u32,
    pub bins: usize,
    pub types: Vec<EventType>,
}

const NAMES: [(&str, Texture); 8] = [
    ("dog", Texture::Pulsed),
    ("siren", Texture::Tonal),
    ("beep", Texture::Pulsed),
    ("engine", Texture::Tonal),
    ("bird", Texture::Pulsed),
    ("bell", Texture::Tonal),
    ("drum", Texture::Pulsed),
    ("hum", Texture::Tonal),
];

impl Catalog {
    pub fn standard(bins: usize) -> Result<Self> {
        let n = NAMES.len();
        if bins < 2 * n || !bins.is_multiple_of(n) {
            return Err(Error::Config(format!(
                "catalog of {n} types needs a multiple of {n} bins, at least {}; got {bins}",
                2 * n
            )));
        }
        let slot = bins / n;
        let types = NAMES
            .iter()
            .enumerate()
            .map(|(id, (name, texture))| EventType {
                id,
                name: (*name).to_string(),
                freq_lo: id * slot + 1,
                freq_hi: (id + 1) * slot,
                texture: *texture,
            })
            .collect();
        Ok(Self {
            version: CATALOG_VERSION,
            bins,
            types,
        })
    }

    pub fn len(&self) -> usize {
        self.types.len()
    }

    pub fn is_empty(&self) -> bool {
        self.types.is_empty()
    }

    pub fn get(&self, id: usize) -> Result<&EventType> {
        self.types
            .get(id)
            .ok_or_else(|| Error::InvalidEvent(format!("unknown event type {id}")))
    }

    pub fn by_name(&self, name: &str) -> Option<&EventType> {
        self.types
            .iter()
            .find(|t| t.name.eq_ignore_ascii_case(name))
    }
}
