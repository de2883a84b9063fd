use super::tensor::Tensor;
use serde::{Deserialize, Serialize};

/// Which part of the pipeline a trainable value belongs to. Gradient-routing
/// assertions and optimizer filtering key off this.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Group {
    Encoder,
    EntropyModel,
    Decoder,
    AuxBranch,
    Recognizer,
}

impl Group {
    pub const ALL: [Group; 5] = [
        Group::Encoder,
        Group::EntropyModel,
        Group::Decoder,
        Group::AuxBranch,
        Group::Recognizer,
    ];

    pub fn as_u8(self) -> u8 {
        match self {
            Group::Encoder => 0,
            Group::EntropyModel => 1,
            Group::Decoder => 2,
            Group::AuxBranch => 3,
            Group::Recognizer => 4,
        }
    }

    pub fn from_u8(v: u8) -> Option<Group> {
        Some(match v {
            0 => Group::Encoder,
            1 => Group::EntropyModel,
            2 => Group::Decoder,
            3 => Group::AuxBranch,
            4 => Group::Recognizer,
            _ => return None,
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ParamId(pub(crate) u32);

impl ParamId {
    pub fn index(self) -> usize {
        self.0 as usize
    }
}

#[derive(Clone, Debug)]
pub struct ParamEntry {
    pub name: String,
    pub group: Group,
    pub value: Tensor<f32>,
}

/// Registry of every trainable tensor in an experiment. Models hold
/// `ParamId`s; values live here so the optimizer and checkpoints see one
/// flat, ordered view.
#[derive(Clone, Debug, Default)]
pub struct Params {
    entries: Vec<ParamEntry>,
}

impl Params {
    pub fn new() -> Self {
        Params::default()
    }

    pub fn add(&mut self, name: impl Into<String>, group: Group, value: Tensor<f32>) -> ParamId {
        let name = name.into();
        assert!(
            self.find(&name).is_none(),
            "duplicate parameter name {name}"
        );
        self.entries.push(ParamEntry { name, group, value });
        ParamId(self.entries.len() as u32 - 1)
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.entries
            .iter()
            .position(|e| e.name == name)
            .map(|i| ParamId(i as u32))
    }

    pub fn get(&self, id: ParamId) -> &ParamEntry {
        &self.entries[id.index()]
    }

    pub fn value(&self, id: ParamId) -> &Tensor<f32> {
        &self.entries[id.index()].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor<f32> {
        &mut self.entries[id.index()].value
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &ParamEntry)> {
        self.entries
            .iter()
            .enumerate()
            .map(|(i, e)| (ParamId(i as u32), e))
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        (0..self.entries.len()).map(|i| ParamId(i as u32))
    }

    pub fn ids_in_group(&self, group: Group) -> Vec<ParamId> {
        self.iter()
            .filter(|(_, e)| e.group == group)
            .map(|(id, _)| id)
            .collect()
    }

    pub fn count_in_group(&self, group: Group) -> usize {
        self.iter()
            .filter(|(_, e)| e.group == group)
            .map(|(_, e)| e.value.numel())
            .sum()
    }

    /// Remove every parameter in `group`, e.g. to strip a training-only
    /// branch from a checkpoint. Ids held elsewhere are invalidated.
    pub fn strip_group(&mut self, group: Group) {
        self.entries.retain(|e| e.group != group);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn groups_roundtrip_u8() {
        for g in Group::ALL {
            assert_eq!(Group::from_u8(g.as_u8()), Some(g));
        }
        assert_eq!(Group::from_u8(9), None);
    }

    #[test]
    #[should_panic(expected = "duplicate parameter name")]
    fn duplicate_names_rejected() {
        let mut p = Params::new();
        p.add("w", Group::Encoder, Tensor::zeros(&[2]));
        p.add("w", Group::Decoder, Tensor::zeros(&[2]));
    }

    #[test]
    fn group_param_counts() {
        let mut p = Params::new();
        p.add("a", Group::Encoder, Tensor::zeros(&[2, 3]));
        p.add("b", Group::Encoder, Tensor::zeros(&[4]));
        p.add("c", Group::Decoder, Tensor::zeros(&[5]));
        assert_eq!(p.count_in_group(Group::Encoder), 10);
        assert_eq!(p.count_in_group(Group::Decoder), 5);
        p.strip_group(Group::Encoder);
        assert_eq!(p.count_in_group(Group::Encoder), 0);
        assert_eq!(p.len(), 1);
    }
}
