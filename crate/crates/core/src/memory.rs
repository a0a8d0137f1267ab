//! Hybrid volatile/non-volatile memory with per-region capacity accounting.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::kernel::TaskId;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum RegionKind {
    Vm,
    Nvm,
}

impl fmt::Display for RegionKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            RegionKind::Vm => "VM",
            RegionKind::Nvm => "NVM",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Purpose {
    Stack,
    Heap,
    WorkingCopy,
    TemporaryCopy,
    PersistentCopy,
    ShadowCopy,
    Metadata,
}

impl Purpose {
    fn requires_nvm(self) -> bool {
        matches!(
            self,
            Purpose::PersistentCopy | Purpose::ShadowCopy | Purpose::Metadata
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Owner {
    System,
    Task(TaskId),
    Object(u16),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct AllocId(pub u32);

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum MemoryError {
    #[error("out of memory in {region}: requested {requested} bytes, {available} available")]
    OutOfMemory {
        region: RegionKind,
        requested: usize,
        available: usize,
    },
    #[error("{purpose:?} allocations must live in NVM")]
    Placement { purpose: Purpose },
    #[error("zero-sized allocation")]
    ZeroSize,
    #[error("no live allocation {0:?}")]
    Dangling(AllocId),
    #[error("write of {got} bytes into a {size}-byte allocation")]
    SizeMismatch { size: usize, got: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Region {
    pub kind: RegionKind,
    pub capacity_bytes: usize,
    pub used_bytes: usize,
    /// Scales the execution time of work resident in this region.
    pub time_multiplier: f64,
    /// Scales the energy of work resident in this region.
    pub energy_multiplier: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MemoryConfig {
    pub vm_capacity: usize,
    pub nvm_capacity: usize,
    pub nvm_time_multiplier: f64,
    pub nvm_energy_multiplier: f64,
    pub object_size: usize,
}

impl Default for MemoryConfig {
    fn default() -> Self {
        Self {
            vm_capacity: 8 * 1024,
            nvm_capacity: 256 * 1024,
            nvm_time_multiplier: 1.0,
            nvm_energy_multiplier: 1.0,
            object_size: 64,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Allocation {
    pub id: AllocId,
    pub region: RegionKind,
    pub size_bytes: usize,
    pub owner: Owner,
    pub purpose: Purpose,
    data: Vec<u8>,
}

/// The volatile half of memory; captured by whole-system snapshots.
#[derive(Debug, Clone, PartialEq)]
pub struct VmImage {
    allocs: Vec<Allocation>,
    used: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Memory {
    vm: Region,
    nvm: Region,
    allocs: BTreeMap<AllocId, Allocation>,
    next_id: u32,
}

impl Memory {
    pub fn new(cfg: &MemoryConfig) -> Self {
        Self {
            vm: Region {
                kind: RegionKind::Vm,
                capacity_bytes: cfg.vm_capacity,
                used_bytes: 0,
                time_multiplier: 1.0,
                energy_multiplier: 1.0,
            },
            nvm: Region {
                kind: RegionKind::Nvm,
                capacity_bytes: cfg.nvm_capacity,
                used_bytes: 0,
                time_multiplier: cfg.nvm_time_multiplier.max(1.0),
                energy_multiplier: cfg.nvm_energy_multiplier.max(1.0),
            },
            allocs: BTreeMap::new(),
            next_id: 1,
        }
    }

    pub fn region(&self, kind: RegionKind) -> &Region {
        match kind {
            RegionKind::Vm => &self.vm,
            RegionKind::Nvm => &self.nvm,
        }
    }

    fn region_mut(&mut self, kind: RegionKind) -> &mut Region {
        match kind {
            RegionKind::Vm => &mut self.vm,
            RegionKind::Nvm => &mut self.nvm,
        }
    }

    pub fn allocate(
        &mut self,
        region: RegionKind,
        size: usize,
        owner: Owner,
        purpose: Purpose,
    ) -> Result<AllocId, MemoryError> {
        if size == 0 {
            return Err(MemoryError::ZeroSize);
        }
        if purpose.requires_nvm() && region != RegionKind::Nvm {
            return Err(MemoryError::Placement { purpose });
        }
        let r = self.region_mut(region);
        let available = r.capacity_bytes - r.used_bytes;
        if size > available {
            return Err(MemoryError::OutOfMemory {
                region,
                requested: size,
                available,
            });
        }
        r.used_bytes += size;
        let id = AllocId(self.next_id);
        self.next_id += 1;
        self.allocs.insert(
            id,
            Allocation {
                id,
                region,
                size_bytes: size,
                owner,
                purpose,
                data: vec![0; size],
            },
        );
        Ok(id)
    }

    /// Allocates and fills in one step.
    pub fn allocate_with(
        &mut self,
        region: RegionKind,
        owner: Owner,
        purpose: Purpose,
        bytes: &[u8],
    ) -> Result<AllocId, MemoryError> {
        let id = self.allocate(region, bytes.len(), owner, purpose)?;
        self.write(id, bytes)?;
        Ok(id)
    }

    pub fn free(&mut self, id: AllocId) -> Result<(), MemoryError> {
        let a = self.allocs.remove(&id).ok_or(MemoryError::Dangling(id))?;
        self.region_mut(a.region).used_bytes -= a.size_bytes;
        Ok(())
    }

    pub fn contains(&self, id: AllocId) -> bool {
        self.allocs.contains_key(&id)
    }

    pub fn get(&self, id: AllocId) -> Option<&Allocation> {
        self.allocs.get(&id)
    }

    pub fn read(&self, id: AllocId) -> Result<&[u8], MemoryError> {
        self.allocs
            .get(&id)
            .map(|a| a.data.as_slice())
            .ok_or(MemoryError::Dangling(id))
    }

    pub fn write(&mut self, id: AllocId, bytes: &[u8]) -> Result<(), MemoryError> {
        let a = self.allocs.get_mut(&id).ok_or(MemoryError::Dangling(id))?;
        if a.size_bytes != bytes.len() {
            return Err(MemoryError::SizeMismatch {
                size: a.size_bytes,
                got: bytes.len(),
            });
        }
        a.data.copy_from_slice(bytes);
        Ok(())
    }

    /// Re-labels an allocation, e.g. when a working copy becomes a persistent copy.
    pub fn retag(&mut self, id: AllocId, owner: Owner, purpose: Purpose) -> Result<(), MemoryError> {
        let a = self.allocs.get_mut(&id).ok_or(MemoryError::Dangling(id))?;
        if purpose.requires_nvm() && a.region != RegionKind::Nvm {
            return Err(MemoryError::Placement { purpose });
        }
        a.owner = owner;
        a.purpose = purpose;
        Ok(())
    }

    /// Volatile memory loses its contents; NVM is untouched.
    pub fn on_power_failure(&mut self) {
        self.allocs.retain(|_, a| a.region == RegionKind::Nvm);
        self.vm.used_bytes = 0;
    }

    pub fn vm_image(&self) -> VmImage {
        VmImage {
            allocs: self
                .allocs
                .values()
                .filter(|a| a.region == RegionKind::Vm)
                .cloned()
                .collect(),
            used: self.vm.used_bytes,
        }
    }

    /// Replaces all VM contents with `image`.
    pub fn restore_vm(&mut self, image: &VmImage) {
        self.on_power_failure();
        for a in &image.allocs {
            self.next_id = self.next_id.max(a.id.0 + 1);
            self.allocs.insert(a.id, a.clone());
        }
        self.vm.used_bytes = image.used;
    }

    pub fn live(&self, region: RegionKind) -> impl Iterator<Item = &Allocation> {
        self.allocs.values().filter(move |a| a.region == region)
    }

    /// Checks that per-region `used_bytes` equals the sum of live allocations.
    pub fn check_accounting(&self) -> Result<(), String> {
        for kind in [RegionKind::Vm, RegionKind::Nvm] {
            let sum: usize = self.live(kind).map(|a| a.size_bytes).sum();
            let r = self.region(kind);
            if sum != r.used_bytes {
                return Err(format!("{kind}: used_bytes {} but live sum {sum}", r.used_bytes));
            }
            if r.used_bytes > r.capacity_bytes {
                return Err(format!("{kind}: over capacity"));
            }
        }
        Ok(())
    }

    /// Digest-friendly dump of all NVM contents.
    pub fn nvm_snapshot(&self) -> Vec<(AllocId, Vec<u8>)> {
        self.live(RegionKind::Nvm).map(|a| (a.id, a.data.clone())).collect()
    }
}
