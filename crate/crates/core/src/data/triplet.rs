use std::collections::BTreeSet;

use super::catalog::Catalog;
use super::detect::{proxy_similarity, DetectorConfig};
use super::instruction::{tokenize_instruction, Task};
use super::scene::{EventSpec, Scene};
use crate::error::{Error, Result};

pub const MAX_SCENE_EVENTS: usize = 3;
pub const DEFAULT_SIMILARITY_THRESHOLD: f64 = 0.35;

#[derive(Clone, Debug, PartialEq)]
pub struct EditTriplet {
    pub base_id: u64,
    pub input: Scene,
    pub edited: Scene,
    pub instruction_tokens: Vec<usize>,
    pub task: Task,
    pub target_caption_events: BTreeSet<usize>,
}

impl EditTriplet {
    /// The event named first in the instruction: added for add, removed for
    /// remove and replace.
    pub fn primary_event(&self) -> Option<&EventSpec> {
        let (a_in, a_out) = (self.input.caption_events(), self.edited.caption_events());
        let pick = match self.task {
            Task::Add => a_out.difference(&a_in).next().copied(),
            Task::Remove | Task::Replace => a_in.difference(&a_out).next().copied(),
        }?;
        self.input
            .events()
            .iter()
            .chain(self.edited.events())
            .find(|e| e.event_type == pick)
    }

    /// Events present on exactly one side of the edit.
    pub fn changed_events(&self) -> Vec<EventSpec> {
        let (a, b) = (self.input.events(), self.edited.events());
        a.iter()
            .filter(|e| !b.contains(e))
            .chain(b.iter().filter(|e| !a.contains(e)))
            .copied()
            .collect()
    }

    /// Row-major `[frames, bins]` mask of the cells covered by a changed event's box.
    pub fn edit_mask(&self) -> Vec<bool> {
        let (frames, bins) = (self.input.frames(), self.input.bins());
        let mut mask = vec![false; frames * bins];
        for e in self.changed_events() {
            for f in e.frames() {
                for b in e.bins() {
                    mask[f * bins + b] = true;
                }
            }
        }
        mask
    }
}

pub fn scene_event_count_filter(scene: &Scene) -> bool {
    scene.events().len() <= MAX_SCENE_EVENTS
}

/// Strict `>` on both sides of the pair.
pub fn filter_triplet(
    t: &EditTriplet,
    threshold: f64,
    catalog: &Catalog,
    detector: &DetectorConfig,
) -> bool {
    let input_sim = proxy_similarity(
        t.input.spectrogram(),
        &t.input.caption_events(),
        catalog,
        detector,
    );
    if input_sim <= threshold {
        return false;
    }
    proxy_similarity(
        t.edited.spectrogram(),
        &t.target_caption_events,
        catalog,
        detector,
    ) > threshold
}

/// The six add/remove/replace triplets obtained by mixing `a` or `b` into `base`.
pub fn build_triplets(
    base: &Scene,
    base_id: u64,
    a: &EventSpec,
    b: &EventSpec,
    catalog: &Catalog,
) -> Result<Vec<EditTriplet>> {
    if a.event_type == b.event_type {
        return Err(Error::InvalidTriplet(format!(
            "A and B share type {}",
            a.event_type
        )));
    }
    let present = base.caption_events();
    for e in [a, b] {
        if present.contains(&e.event_type) {
            return Err(Error::InvalidTriplet(format!(
                "type {} already in base scene",
                e.event_type
            )));
        }
    }
    if base.events().len() + 1 > MAX_SCENE_EVENTS {
        return Err(Error::InvalidTriplet(format!(
            "base scene has {} events; mixing one more exceeds the cap of {MAX_SCENE_EVENTS}",
            base.events().len()
        )));
    }
    let with_a = base.with_event(*a, catalog)?;
    let with_b = base.with_event(*b, catalog)?;
    let (ta, tb) = (a.event_type, b.event_type);
    let make = |input: &Scene, edited: &Scene, task, x, y| -> Result<EditTriplet> {
        Ok(EditTriplet {
            base_id,
            input: input.clone(),
            edited: edited.clone(),
            instruction_tokens: tokenize_instruction(task, x, y)?,
            task,
            target_caption_events: edited.caption_events(),
        })
    };
    Ok(vec![
        make(base, &with_a, Task::Add, ta, None)?,
        make(base, &with_b, Task::Add, tb, None)?,
        make(&with_a, base, Task::Remove, ta, None)?,
        make(&with_b, base, Task::Remove, tb, None)?,
        make(&with_a, &with_b, Task::Replace, ta, Some(tb))?,
        make(&with_b, &with_a, Task::Replace, tb, Some(ta))?,
    ])
}
