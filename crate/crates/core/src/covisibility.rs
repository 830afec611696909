//! Keyframe covisibility: which keyframes observe which primitives, and which
//! keyframes share at least one observed primitive.

use std::collections::{BTreeMap, BTreeSet};

use crate::error::{Error, Result};

pub type KeyframeId = u64;

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct CovisibilityGraph {
    /// Insertion order.
    pub keyframe_ids: Vec<KeyframeId>,
    /// Unordered pairs stored as `(min, max)`.
    pub edges: BTreeSet<(KeyframeId, KeyframeId)>,
    /// Gaussian index → keyframes that observed it.
    pub visibility: BTreeMap<usize, BTreeSet<KeyframeId>>,
    observed: BTreeMap<KeyframeId, BTreeSet<usize>>,
}

impl CovisibilityGraph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn contains(&self, id: KeyframeId) -> bool {
        self.observed.contains_key(&id)
    }

    /// Primitives observed by keyframe `id`.
    pub fn observed_by(&self, id: KeyframeId) -> Option<&BTreeSet<usize>> {
        self.observed.get(&id)
    }

    /// Adds a keyframe and connects it to every existing keyframe sharing at
    /// least one visible primitive.
    pub fn insert_keyframe(&mut self, id: KeyframeId, visible: &BTreeSet<usize>) -> Result<()> {
        if self.contains(id) {
            return Err(Error::invalid(format!("keyframe {id} already present")));
        }
        for (&other, seen) in &self.observed {
            if !seen.is_disjoint(visible) {
                self.edges.insert((other.min(id), other.max(id)));
            }
        }
        for &g in visible {
            self.visibility.entry(g).or_default().insert(id);
        }
        self.observed.insert(id, visible.clone());
        self.keyframe_ids.push(id);
        Ok(())
    }

    /// The `window` most recently inserted keyframes, oldest first.
    pub fn active_window(&self, window: usize) -> &[KeyframeId] {
        let n = self.keyframe_ids.len();
        &self.keyframe_ids[n.saturating_sub(window)..]
    }

    pub fn neighbors(&self, id: KeyframeId) -> impl Iterator<Item = KeyframeId> + '_ {
        self.edges.iter().filter_map(move |&(a, b)| {
            if a == id {
                Some(b)
            } else if b == id {
                Some(a)
            } else {
                None
            }
        })
    }
}

/// Functional form of [`CovisibilityGraph::insert_keyframe`].
pub fn update_covisibility(
    mut graph: CovisibilityGraph,
    keyframe_id: KeyframeId,
    visible: &BTreeSet<usize>,
) -> Result<CovisibilityGraph> {
    graph.insert_keyframe(keyframe_id, visible)?;
    Ok(graph)
}
