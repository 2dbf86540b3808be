//! Embedding dumps for external 2-D projection: an `N × d` matrix in the
//! feature-store container plus an aligned label CSV.

use std::path::Path;

use crate::datamodel::{Conversation, FeatureStore, Modality, Provenance, Split};
use crate::error::{Error, Result};
use crate::magt::{magt_forward, MagtModel, SequenceBatch};
use crate::scalar::Scalar;

#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingDump {
    pub utterance_ids: Vec<String>,
    pub labels: Vec<(usize, String)>,
    pub rows: Vec<Vec<f32>>,
}

impl EmbeddingDump {
    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }
}

fn in_split(convs: &[Conversation], split: Split) -> impl Iterator<Item = &Conversation> {
    convs.iter().filter(move |c| c.split() == split)
}

/// Rows of `store` for every utterance of `split`, in manifest order.
pub fn store_embeddings(
    store: &FeatureStore,
    convs: &[Conversation],
    split: Split,
) -> Result<EmbeddingDump> {
    let mut dump = EmbeddingDump {
        utterance_ids: Vec::new(),
        labels: Vec::new(),
        rows: Vec::new(),
    };
    for conv in in_split(convs, split) {
        for u in conv.utterances() {
            let v = store.get(&u.utterance_id).ok_or_else(|| {
                Error::Dataset(format!(
                    "utterance {} has no {} feature",
                    u.utterance_id,
                    store.modality()
                ))
            })?;
            dump.utterance_ids.push(u.utterance_id.clone());
            dump.labels.push((u.label.id, u.label.name.clone()));
            dump.rows.push(v.to_vec());
        }
    }
    Ok(dump)
}

/// Fused `t′` rows of a stage-2 model for every utterance of `split`.
pub fn model_embeddings<T: Scalar>(
    model: &MagtModel<T>,
    convs: &[Conversation],
    stores: [&FeatureStore; 3],
    split: Split,
) -> Result<EmbeddingDump> {
    let mut dump = EmbeddingDump {
        utterance_ids: Vec::new(),
        labels: Vec::new(),
        rows: Vec::new(),
    };
    for conv in in_split(convs, split) {
        let seq = SequenceBatch::<T>::from_conversation(conv, stores)?;
        let out = magt_forward(&seq, model)?;
        for (i, u) in conv.utterances().iter().enumerate() {
            dump.utterance_ids.push(u.utterance_id.clone());
            dump.labels.push((u.label.id, u.label.name.clone()));
            dump.rows.push(
                out.fused
                    .row(i)
                    .iter()
                    .map(|v| v.to_f64_lossy() as f32)
                    .collect(),
            );
        }
    }
    Ok(dump)
}

/// Writes the matrix (stream tag in the modality byte) and `labels_path` CSV
/// with header `row,utterance_id,label_id,label`.
pub fn write_embedding_dump(
    dump: &EmbeddingDump,
    stream: Modality,
    provenance: Provenance,
    matrix_path: impl AsRef<Path>,
    labels_path: impl AsRef<Path>,
) -> Result<()> {
    let dim = dump.rows.first().map_or(1, Vec::len);
    let mut store = FeatureStore::new(stream, dim, provenance);
    for (id, row) in dump.utterance_ids.iter().zip(&dump.rows) {
        store.insert(id.clone(), row.clone())?;
    }
    crate::datamodel::write_feature_store(&store, matrix_path)?;
    let mut csv = String::from("row,utterance_id,label_id,label\n");
    for (i, (id, (lid, name))) in dump.utterance_ids.iter().zip(&dump.labels).enumerate() {
        csv.push_str(&format!("{i},{id},{lid},{name}\n"));
    }
    super::metrics::write_csv(labels_path, &csv)
}
