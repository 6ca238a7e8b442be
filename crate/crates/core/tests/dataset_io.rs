//! On-disk round trips, load-time error paths and generator statistics.

use std::fs;

use boostret::dataset::{
    generate, identity_centroids, Corpus, Dataset, SynthConfig, IMAGES_FILE, MANIFEST_FILE, META_FILE,
};
use boostret::Error;

fn small(seed: u64) -> SynthConfig {
    SynthConfig {
        n_identities: 30,
        images_per_id: 3,
        texts_per_image: 2,
        seed,
        ..SynthConfig::default()
    }
}

#[test]
fn corpus_round_trip_is_bit_exact() {
    let corpus = generate(&small(1)).unwrap();
    let dir = tempfile::tempdir().unwrap();
    corpus.save(dir.path()).unwrap();
    let back = Corpus::load(dir.path()).unwrap();
    assert_eq!(back.train, corpus.train);
    assert_eq!(back.val, corpus.val);
    assert_eq!(back.test, corpus.test);
    for (a, b) in back.train.images().iter().zip(corpus.train.images()) {
        assert_eq!(a.to_bits(), b.to_bits());
    }
    // Saving again reproduces the same bytes.
    let again = tempfile::tempdir().unwrap();
    back.save(again.path()).unwrap();
    for f in [IMAGES_FILE, MANIFEST_FILE, META_FILE] {
        let p = |d: &std::path::Path| fs::read(d.join("train").join(f)).unwrap();
        assert_eq!(p(dir.path()), p(again.path()), "{f}");
    }
}

#[test]
fn generation_is_deterministic() {
    assert_eq!(generate(&small(9)).unwrap(), generate(&small(9)).unwrap());
    assert_ne!(
        generate(&small(9)).unwrap().train,
        generate(&small(10)).unwrap().train
    );
}

fn saved_split() -> (tempfile::TempDir, std::path::PathBuf) {
    let corpus = generate(&small(2)).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let split = dir.path().join("test");
    corpus.test.save(&split).unwrap();
    (dir, split)
}

#[test]
fn truncated_feature_file_names_byte_counts() {
    let (_dir, split) = saved_split();
    let path = split.join(IMAGES_FILE);
    let bytes = fs::read(&path).unwrap();
    fs::write(&path, &bytes[..bytes.len() - 3]).unwrap();
    match Dataset::load(&split) {
        Err(Error::LengthMismatch { expected, actual }) => {
            assert_eq!(expected, bytes.len() - 16);
            assert_eq!(actual, bytes.len() - 19);
        }
        other => panic!("unexpected {other:?}"),
    }
}

#[test]
fn manifest_pointing_past_feature_rows_fails() {
    let (_dir, split) = saved_split();
    let path = split.join(MANIFEST_FILE);
    let text = fs::read_to_string(&path).unwrap();
    let first = text.lines().next().unwrap();
    let mut sample: serde_json::Value = serde_json::from_str(first).unwrap();
    sample["text_row"] = serde_json::json!(1_000_000);
    let edited = text.replacen(first, &sample.to_string(), 1);
    fs::write(&path, edited).unwrap();
    let err = Dataset::load(&split).unwrap_err();
    assert!(err.to_string().contains("1000000"), "{err}");
}

#[test]
fn bad_header_and_version_fail() {
    let (_dir, split) = saved_split();
    let path = split.join(IMAGES_FILE);
    let mut bytes = fs::read(&path).unwrap();
    bytes[0] = b'X';
    fs::write(&path, &bytes).unwrap();
    assert!(matches!(Dataset::load(&split), Err(Error::BadMagic { .. })));

    let (_dir, split) = saved_split();
    let path = split.join(META_FILE);
    let meta = fs::read_to_string(&path)
        .unwrap()
        .replace("\"format_version\": 1", "\"format_version\": 7");
    fs::write(&path, meta).unwrap();
    assert!(matches!(Dataset::load(&split), Err(Error::UnknownVersion(7))));
}

#[test]
fn missing_file_reports_path() {
    let (_dir, split) = saved_split();
    fs::remove_file(split.join(IMAGES_FILE)).unwrap();
    let err = Dataset::load(&split).unwrap_err();
    assert!(err.to_string().contains(IMAGES_FILE), "{err}");
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    dot / (na * nb)
}

/// Blended identities sit closer to their confuser than unrelated identity
/// pairs sit to each other, averaged over seeds.
#[test]
fn confused_identities_are_more_similar() {
    let mut confused = Vec::new();
    let mut unconfused = Vec::new();
    for seed in 1..=5 {
        let corpus = generate(&SynthConfig {
            seed,
            ..SynthConfig::default()
        })
        .unwrap();
        assert!(!corpus.confusions.is_empty());
        for ds in corpus.splits() {
            let centroids = identity_centroids(ds);
            let linked: std::collections::HashSet<(u64, u64)> = corpus
                .confusions
                .iter()
                .flat_map(|c| [(c.identity, c.confuser), (c.confuser, c.identity)])
                .collect();
            for c in &corpus.confusions {
                if let (Some(a), Some(b)) = (centroids.get(&c.identity), centroids.get(&c.confuser)) {
                    confused.push(cosine(a, b));
                }
            }
            let mut ids: Vec<u64> = centroids.keys().copied().collect();
            ids.sort_unstable();
            for (i, a) in ids.iter().enumerate() {
                for b in &ids[i + 1..] {
                    if !linked.contains(&(*a, *b)) {
                        unconfused.push(cosine(&centroids[a], &centroids[b]));
                    }
                }
            }
        }
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let (c, u) = (mean(&confused), mean(&unconfused));
    assert!(c > u, "confused {c} vs unconfused {u}");
}

#[test]
fn zero_noise_pairs_share_latent() {
    let corpus = generate(&SynthConfig {
        n_identities: 2,
        noise_img: 0.0,
        noise_txt: 0.0,
        confusion_rate: 0.0,
        val_fraction: 0.0,
        test_fraction: 0.5,
        ..SynthConfig::default()
    })
    .unwrap();
    let ds = &corpus.train;
    let imgs = ds.image_matrix();
    for a in 0..imgs.nrows() {
        for b in 0..imgs.nrows() {
            assert_eq!(imgs.row(a), imgs.row(b));
        }
    }
}
