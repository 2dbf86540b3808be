//! Dialogue structures, label spaces, the feature-store container and the
//! synthetic corpus generator.

pub mod conversation;
pub mod features;
pub mod labels;
pub mod manifest;
pub mod synth;

pub use conversation::{of_split, Conversation, Modality, RawPayloads, Split, Utterance};
pub use features::{
    read_feature_store, read_feature_store_checked, write_feature_store, FeatureRecord,
    FeatureStore, Provenance,
};
pub use labels::{EmotionLabel, LabelSpace};
pub use manifest::{load_conversation_manifest, parse_manifest, render_manifest, write_manifest};
pub use synth::{generate_synth_corpus, Separability, SplitCounts, SynthCorpus, SynthCorpusSpec};
