//! Room acoustics: image-method impulse responses, reverberation, SNR
//! mixing, and the augmentation recipes built on top of them.

pub mod augment;
pub mod mix;
pub mod rir;

pub use augment::{
    build_rir_bank, build_training_manifest, augment_utterance, AugMode, AugmentResources,
    Augmented, AugmentationRecipe, NoiseEntry, NoiseKind, NoisePool, RirBank, RirPolicy,
};
pub use mix::{mix_at_snr, mix_at_snr_masked, reverberate, Reverberated};
pub use rir::{
    generate_rir, generate_rir_with, sabine_t60, sample_room_setup, schroeder_t60, Placement,
    PointSource, Rir, RirOptions, RoomSpec,
};
