//! Ground-truth HOI instances: the unit of annotation and supervision.

use alloc::vec::Vec;

use crate::geometry::BBox;

/// One annotated interaction: subject box, object box with class, and a
/// multi-hot set of verbs (at least one).
#[derive(Clone, Debug, PartialEq)]
pub struct HoiInstance {
    pub subject: BBox,
    pub object: BBox,
    pub object_class: usize,
    /// Multi-hot over the verb vocabulary.
    pub verbs: Vec<bool>,
}

impl HoiInstance {
    pub fn verb_indices(&self) -> Vec<usize> {
        self.verbs
            .iter()
            .enumerate()
            .filter_map(|(i, &on)| on.then_some(i))
            .collect()
    }
}

/// Multi-hot vector from a set of indices.
pub fn multi_hot(indices: &[usize], len: usize) -> Vec<bool> {
    let mut v = alloc::vec![false; len];
    for &i in indices {
        v[i] = true;
    }
    v
}
