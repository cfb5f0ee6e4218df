use std::path::Path;
use std::sync::Arc;

use crate::checkpoint::Bundle;
use crate::error::{Error, Result};
use crate::model::{Backbone, ClassifierHead};
use crate::numerics::rng;
use crate::pet::{PetConfig, PetSet};

/// Everything the protocol carries between tasks.
#[derive(Clone, Debug)]
pub struct LaeState {
    pub backbone: Arc<Backbone>,
    pub pet_online: PetSet,
    /// θ_pet^off; present once the first task has been learned.
    pub pet_offline: Option<PetSet>,
    pub head: ClassifierHead,
    /// Number of tasks learned so far.
    pub task_index: usize,
}

impl LaeState {
    /// Fresh state over a frozen backbone with a newly initialised online PET.
    pub fn new(backbone: Arc<Backbone>, pet: &PetConfig, seed: u64) -> Result<Self> {
        if !backbone.is_frozen() {
            return Err(Error::Config("the LAE protocol needs a frozen backbone".into()));
        }
        let mut r = rng::derive(seed, 0x9e70);
        let pet_online = PetSet::new(pet, backbone.config(), &mut r)?;
        let head = ClassifierHead::new(backbone.config().dim);
        Ok(Self { backbone, pet_online, pet_offline: None, head, task_index: 0 })
    }

    /// Checkpoint bundle: backbone checksum reference, both PET sets, head and
    /// task cursor. The backbone itself is stored separately.
    pub fn to_bundle(&self) -> Bundle {
        let meta = serde_json::json!({
            "task_index": self.task_index,
            "backbone_checksum": self.backbone.checksum(),
            "has_offline": self.pet_offline.is_some(),
            "online": self.pet_online.to_bundle().meta,
            "offline": self.pet_offline.as_ref().map(|p| p.to_bundle().meta),
            "head": self.head.to_bundle().meta,
        });
        let mut b = Bundle::new("lae-state", meta);
        b.nest("online", self.pet_online.to_bundle());
        if let Some(off) = &self.pet_offline {
            b.nest("offline", off.to_bundle());
        }
        b.nest("head", self.head.to_bundle());
        b
    }

    /// Restores a state saved by [`LaeState::to_bundle`] on top of `backbone`,
    /// which must match the recorded checksum.
    pub fn from_bundle(b: &Bundle, backbone: Arc<Backbone>) -> Result<Self> {
        b.expect_kind("lae-state")?;
        let recorded = b.meta["backbone_checksum"].as_str().unwrap_or_default();
        if recorded != backbone.checksum() {
            return Err(Error::Checkpoint("state was saved against a different backbone".into()));
        }
        let pet_online = PetSet::from_bundle(&b.sub("online", "pet", b.meta["online"].clone()))?;
        let pet_offline = if b.meta["has_offline"].as_bool().unwrap_or(false) {
            Some(PetSet::from_bundle(&b.sub("offline", "pet", b.meta["offline"].clone()))?)
        } else {
            None
        };
        let head = ClassifierHead::from_bundle(&b.sub("head", "head", b.meta["head"].clone()))?;
        let task_index = b.meta["task_index"]
            .as_u64()
            .ok_or_else(|| Error::Checkpoint("missing task cursor".into()))? as usize;
        if pet_offline.is_some() != (task_index >= 1) || head.task_ranges().len() != task_index {
            return Err(Error::Checkpoint("state checkpoint is internally inconsistent".into()));
        }
        Ok(Self { backbone, pet_online, pet_offline, head, task_index })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_bundle().save(path)
    }

    pub fn load(path: &Path, backbone: Arc<Backbone>) -> Result<Self> {
        Self::from_bundle(&Bundle::load(path)?, backbone)
    }
}
