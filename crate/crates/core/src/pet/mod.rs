//! Parameter-efficient tuning modules: adapters, LoRA and (calibrated) prefixes.

mod modules;
mod set;

pub use modules::{
    adapter_forward, calibrated_prefix_attention, lora_forward, lora_merge, prefix_as_adapter_form, prefix_attention,
    prefix_branch, prefix_lambda, AdapterMode, AdapterParams, BoundAdapter, BoundLora, BoundLoraFactor, BoundPrefix,
    LoraFactor, LoraParams, PrefixParams, PrefixVariant,
};
pub use set::{AttachmentPoint, BoundModule, BoundPetSet, Layout, PetConfig, PetKind, PetModule, PetSet, Site};

/// Flat parameter vector and layout of `pets`.
pub fn pet_flatten(pets: &PetSet) -> (Vec<f64>, Layout) {
    pets.flatten()
}

/// Writes `flat` back into `pets`; the layout must match.
pub fn pet_unflatten(pets: &mut PetSet, flat: &[f64], layout: &Layout) -> crate::Result<()> {
    pets.unflatten(flat, layout)
}
