use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use super::catalog::Catalog;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Envelope {
    Rect,
    /// Linear rise from half level over the first quarter, then linear fall back to half.
    AttackDecay,
}

impl Envelope {
    pub fn gain(self, offset: usize, duration: usize) -> f64 {
        match self {
            Envelope::Rect => 1.0,
            Envelope::AttackDecay => {
                let attack = (duration / 4).max(1);
                if offset < attack {
                    0.5 + 0.5 * offset as f64 / attack as f64
                } else {
                    let tail = (duration - attack).max(1) as f64;
                    1.0 - 0.5 * (offset - attack) as f64 / tail
                }
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EventSpec {
    pub event_type: usize,
    pub onset: usize,
    pub duration: usize,
    pub freq_lo: usize,
    pub freq_hi: usize,
    pub peak_amplitude: f64,
    pub envelope: Envelope,
}

impl EventSpec {
    /// An event of `event_type` in its catalog band.
    pub fn of_type(
        catalog: &Catalog,
        event_type: usize,
        onset: usize,
        duration: usize,
        peak_amplitude: f64,
        envelope: Envelope,
    ) -> Result<Self> {
        let ty = catalog.get(event_type)?;
        Ok(Self {
            event_type,
            onset,
            duration,
            freq_lo: ty.freq_lo,
            freq_hi: ty.freq_hi,
            peak_amplitude,
            envelope,
        })
    }

    pub fn validate(&self, frames: usize, bins: usize) -> Result<()> {
        if self.duration == 0 || self.onset + self.duration > frames {
            return Err(Error::InvalidEvent(format!(
                "time span [{}, {}) outside [0, {frames})",
                self.onset,
                self.onset + self.duration
            )));
        }
        if self.freq_lo >= self.freq_hi || self.freq_hi > bins {
            return Err(Error::InvalidEvent(format!(
                "band [{}, {}) outside [0, {bins})",
                self.freq_lo, self.freq_hi
            )));
        }
        if !(self.peak_amplitude > 0.0 && self.peak_amplitude <= 1.0) {
            return Err(Error::InvalidEvent(format!(
                "amplitude {} outside (0, 1]",
                self.peak_amplitude
            )));
        }
        Ok(())
    }

    pub fn frames(&self) -> std::ops::Range<usize> {
        self.onset..self.onset + self.duration
    }

    pub fn bins(&self) -> std::ops::Range<usize> {
        self.freq_lo..self.freq_hi
    }

    pub fn contains(&self, frame: usize, bin: usize) -> bool {
        self.frames().contains(&frame) && self.bins().contains(&bin)
    }
}

/// Additive superposition of event templates on a `[frames, bins]` grid,
/// clamped to `[0, 1]`.
pub fn render_scene(
    events: &[EventSpec],
    catalog: &Catalog,
    frames: usize,
    bins: usize,
) -> Result<Tensor> {
    let mut data = vec![0.0; frames * bins];
    for e in events {
        e.validate(frames, bins)?;
        let texture = catalog.get(e.event_type)?.texture;
        for (offset, f) in e.frames().enumerate() {
            let level =
                e.peak_amplitude * e.envelope.gain(offset, e.duration) * texture.gain(offset);
            for b in e.bins() {
                data[f * bins + b] += level;
            }
        }
    }
    data.iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0));
    Tensor::new(vec![frames, bins], data)
}

/// Events plus their rendering. The spectrogram is re-rendered whenever the
/// event list changes, so the two never disagree.
#[derive(Clone, Debug, PartialEq)]
pub struct Scene {
    events: Vec<EventSpec>,
    spectrogram: Tensor,
}

impl Scene {
    pub fn new(
        events: Vec<EventSpec>,
        catalog: &Catalog,
        frames: usize,
        bins: usize,
    ) -> Result<Self> {
        let spectrogram = render_scene(&events, catalog, frames, bins)?;
        Ok(Self {
            events,
            spectrogram,
        })
    }

    pub fn empty(frames: usize, bins: usize) -> Self {
        Self {
            events: Vec::new(),
            spectrogram: Tensor::zeros(&[frames, bins]),
        }
    }

    pub fn events(&self) -> &[EventSpec] {
        &self.events
    }

    pub fn spectrogram(&self) -> &Tensor {
        &self.spectrogram
    }

    pub fn frames(&self) -> usize {
        self.spectrogram.shape()[0]
    }

    pub fn bins(&self) -> usize {
        self.spectrogram.shape()[1]
    }

    pub fn caption_events(&self) -> BTreeSet<usize> {
        self.events.iter().map(|e| e.event_type).collect()
    }

    pub fn with_event(&self, event: EventSpec, catalog: &Catalog) -> Result<Self> {
        let mut events = self.events.clone();
        events.push(event);
        Self::new(events, catalog, self.frames(), self.bins())
    }

    pub fn without_type(&self, event_type: usize, catalog: &Catalog) -> Result<Self> {
        let events = self
            .events
            .iter()
            .copied()
            .filter(|e| e.event_type != event_type)
            .collect();
        Self::new(events, catalog, self.frames(), self.bins())
    }
}
