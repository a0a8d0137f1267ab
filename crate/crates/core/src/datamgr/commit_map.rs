use serde::{Deserialize, Serialize};

use crate::error::ConfigError;
use crate::memory::AllocId;
use crate::workload::ObjectId;

pub const DEFAULT_MAP_WIDTH: usize = 16;

/// Two address maps and a bit map selecting, per object, which map holds
/// the current persistent copy.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CommitMap {
    maps: [Vec<AllocId>; 2],
    bits: u64,
    width: usize,
}

impl CommitMap {
    pub fn new(width: usize, map0: Vec<AllocId>, map1: Vec<AllocId>) -> Result<Self, ConfigError> {
        if width == 0 || width > 64 {
            return Err(ConfigError::Invalid(format!("bit map width {width} outside 1..=64")));
        }
        if map0.len() > width {
            return Err(ConfigError::TooManyObjects {
                count: map0.len(),
                width,
            });
        }
        assert_eq!(map0.len(), map1.len());
        Ok(Self {
            maps: [map0, map1],
            bits: 0,
            width,
        })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn bits(&self) -> u64 {
        self.bits
    }

    pub fn bit(&self, obj: ObjectId) -> usize {
        ((self.bits >> obj) & 1) as usize
    }

    pub fn current(&self, obj: ObjectId) -> AllocId {
        self.maps[self.bit(obj)][obj as usize]
    }

    pub fn entry(&self, map: usize, obj: ObjectId) -> AllocId {
        self.maps[map][obj as usize]
    }

    pub fn spare_index(&self, obj: ObjectId) -> usize {
        1 - self.bit(obj)
    }

    /// Points the non-current entry of `obj` at `addr`.
    pub fn write_spare(&mut self, obj: ObjectId, addr: AllocId) {
        let m = self.spare_index(obj);
        self.maps[m][obj as usize] = addr;
    }

    /// Flips the bits of every object in `modified` in one step.
    pub fn toggle(&mut self, modified: &[ObjectId]) -> Result<(), ConfigError> {
        if modified.len() > self.width {
            return Err(ConfigError::TooManyObjects {
                count: modified.len(),
                width: self.width,
            });
        }
        let mask = modified.iter().fold(0u64, |m, o| m | 1 << o);
        self.bits ^= mask;
        Ok(())
    }
}
