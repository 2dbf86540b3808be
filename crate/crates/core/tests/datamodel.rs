//! Corpus generator behaviour seen through a linear probe, plus on-disk
//! store properties.

use magtkd_core::datamodel::{
    generate_synth_corpus, read_feature_store, write_feature_store, Conversation, FeatureStore,
    Modality, Provenance, Split, SynthCorpusSpec,
};
use magtkd_core::evalbench::{LinearProbe, ProbeConfig};
use magtkd_core::{Error, Mat64};
use proptest::prelude::*;

fn rows(convs: &[Conversation], store: &FeatureStore, splits: &[Split]) -> (Mat64, Vec<usize>) {
    let picked: Vec<&Conversation> = convs
        .iter()
        .filter(|c| splits.contains(&c.split()))
        .collect();
    let ids: Vec<&str> = picked
        .iter()
        .flat_map(|c| c.utterances().iter().map(|u| u.utterance_id.as_str()))
        .collect();
    let labels = picked.iter().flat_map(|c| c.labels()).collect();
    (store.matrix(&ids).unwrap(), labels)
}

/// Held-out (dev + test) accuracy of a probe fitted on the train split.
fn probe_accuracy(spec: &SynthCorpusSpec, m: Modality) -> f64 {
    let corpus = generate_synth_corpus(spec).unwrap();
    let store = corpus.store(m);
    let (x, y) = rows(&corpus.conversations, store, &[Split::Train]);
    let (xh, yh) = rows(&corpus.conversations, store, &[Split::Dev, Split::Test]);
    let probe = LinearProbe::fit(&x, &y, spec.label_space.len(), &ProbeConfig::default()).unwrap();
    probe.accuracy(&xh, &yh).unwrap()
}

fn with_separability(seed: u64, s: f64) -> SynthCorpusSpec {
    let mut spec = SynthCorpusSpec {
        seed,
        ..Default::default()
    };
    for m in Modality::ALL {
        spec.separability.set(m, s);
    }
    spec
}

#[test]
fn zero_separability_probe_is_at_chance() {
    let spec = with_separability(3, 0.0);
    let chance = 1.0 / spec.label_space.len() as f64;
    for m in Modality::ALL {
        let acc = probe_accuracy(&spec, m);
        assert!(
            (acc - chance).abs() <= 0.05,
            "{m}: {acc} vs chance {chance}"
        );
    }
}

#[test]
fn default_separabilities_order_the_modalities() {
    let spec = SynthCorpusSpec::default();
    let [t, a, v] = Modality::ALL.map(|m| probe_accuracy(&spec, m));
    assert!(t > a && a > v, "text {t}, audio {a}, video {v}");
}

#[test]
fn probe_accuracy_is_monotone_in_separability() {
    let mean = |s: f64| {
        (0..5)
            .map(|seed| probe_accuracy(&with_separability(seed, s), Modality::Audio))
            .sum::<f64>()
            / 5.0
    };
    let means = [0.0, 0.5, 1.0].map(mean);
    assert!(means[0] <= means[1] && means[1] <= means[2], "{means:?}");
}

#[test]
fn generator_rejects_bad_specs() {
    let mut spec = SynthCorpusSpec::default();
    spec.separability.set(Modality::Video, 1.5);
    assert!(matches!(
        generate_synth_corpus(&spec),
        Err(Error::Validation(_))
    ));
}

#[test]
fn feature_file_size_follows_layout() {
    let dir = tempfile::tempdir().unwrap();
    let mut store = FeatureStore::new(Modality::Audio, 768, Provenance::default());
    for i in 0..100 {
        store.insert(format!("u{i:03}"), vec![0.25; 768]).unwrap();
    }
    let path = dir.path().join("a.feat");
    write_feature_store(&store, &path).unwrap();
    let bytes = std::fs::read(&path).unwrap();
    assert_eq!(&bytes[..4], b"MAGF");
    // Header: magic, version u16, modality u8, dimension u32, count u64.
    // Record: id length u16, id bytes, 768 f32 values.
    let header = 4 + 2 + 1 + 4 + 8;
    assert_eq!(bytes.len(), header + 100 * (2 + 4 + 768 * 4));
    assert_eq!(read_feature_store(&path).unwrap(), store);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn stores_survive_the_disk(
        dim in 1usize..9,
        values in prop::collection::vec(any::<f32>().prop_filter("finite", |v| v.is_finite()), 0..64),
    ) {
        let mut store = FeatureStore::new(Modality::Video, dim, Provenance::default());
        for (i, chunk) in values.chunks_exact(dim).enumerate() {
            store.insert(format!("utt-{i}"), chunk.to_vec()).unwrap();
        }
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("v.feat");
        write_feature_store(&store, &path).unwrap();
        prop_assert_eq!(read_feature_store(&path).unwrap(), store);
    }
}
