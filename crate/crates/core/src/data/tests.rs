use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::textproc::extract_attributes;

fn small(dir: &std::path::Path, n_ids: usize) -> GenerationSummary {
    let opts = GenerateOptions { n_ids, images_per_id: 2, captions_per_image: 2, ..Default::default() };
    generate_dataset(&opts, dir).unwrap()
}

#[test]
fn two_identity_dataset() {
    let dir = tempfile::tempdir().unwrap();
    let opts = GenerateOptions { n_ids: 2, images_per_id: 1, captions_per_image: 1, ..Default::default() };
    let s = generate_dataset(&opts, dir.path()).unwrap();
    assert_eq!(s.records.len(), 2);
    let data = load_dataset(dir.path()).unwrap();
    for r in 0..2 {
        let t = tokenize_with_attributes(&data.records[r].caption, &data.vocab, &data.lexicon, 24, Leading::Cls).unwrap();
        assert!(extract_attributes(&t, &data.vocab, &data.lexicon).len() >= 2);
    }
}

#[test]
fn generation_is_deterministic() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let sa = small(a.path(), 6);
    let sb = small(b.path(), 6);
    assert_eq!(sa.manifest_sha256, sb.manifest_sha256);
    let ma = std::fs::read(a.path().join(store::MANIFEST)).unwrap();
    let mb = std::fs::read(b.path().join(store::MANIFEST)).unwrap();
    assert_eq!(ma, mb);
    let c = tempfile::tempdir().unwrap();
    let opts = GenerateOptions { n_ids: 6, images_per_id: 2, captions_per_image: 2, seed: 8, ..Default::default() };
    assert_ne!(generate_dataset(&opts, c.path()).unwrap().manifest_sha256, sa.manifest_sha256);
}

#[test]
fn load_round_trip_and_splits() {
    let dir = tempfile::tempdir().unwrap();
    let s = small(dir.path(), 10);
    let data = load_dataset(dir.path()).unwrap();
    assert_eq!(data.records, s.records);
    assert_eq!(data.manifest_sha256, s.manifest_sha256);
    let train = data.split_records(Split::Train);
    let test = data.split_records(Split::Test);
    assert_eq!(train.len() + test.len(), data.records.len());
    let train_ids: HashSet<_> = train.iter().map(|&r| data.records[r].id).collect();
    let test_ids: HashSet<_> = test.iter().map(|&r| data.records[r].id).collect();
    assert!(train_ids.is_disjoint(&test_ids));
    assert_eq!((train_ids.len(), test_ids.len()), (8, 2));
    assert_eq!(data.images.len(), 20);
}

#[test]
fn truncated_blob_names_the_record() {
    let dir = tempfile::tempdir().unwrap();
    let s = small(dir.path(), 3);
    let victim = &s.records[3];
    let path = dir.path().join(&victim.image_path);
    let bytes = std::fs::read(&path).unwrap();
    std::fs::write(&path, &bytes[..bytes.len() / 2]).unwrap();
    let err = load_dataset(dir.path()).unwrap_err();
    assert!(matches!(err, CadaError::Load(_)));
    assert!(err.to_string().contains(&victim.image_path), "{err}");

    std::fs::remove_file(&path).unwrap();
    assert!(load_dataset(dir.path()).unwrap_err().to_string().contains("cannot read blob"));
}

#[test]
fn batches_respect_invariants() {
    let dir = tempfile::tempdir().unwrap();
    small(dir.path(), 2);
    let data = load_dataset(dir.path()).unwrap();
    let pool = data.split_records(Split::Train);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    for _ in 0..20 {
        let b = make_batch(&data, &pool, 2, 24, 0.0, &mut rng).unwrap();
        assert_eq!(b.len(), 2);
        assert!(b.distinct_identities() >= 2);
        assert_eq!(b.masked_texts, b.dec_texts);
        for i in 0..2 {
            assert_eq!(b.identities[i], data.records[b.records[i]].id);
            assert_eq!(b.texts[i].leading(), Some(Leading::Cls));
            assert_eq!(b.dec_texts[i].leading(), Some(Leading::Enc));
        }
    }
    let b = make_batch(&data, &pool, 4, 24, 1.0, &mut rng).unwrap();
    assert!(b.masked.iter().all(|m| m.num_masked() > 0));
    assert!(make_batch(&data, &pool, 1, 24, 0.5, &mut rng).is_err());
}

#[test]
fn single_identity_pool_is_batch_error() {
    let dir = tempfile::tempdir().unwrap();
    small(dir.path(), 2);
    let data = load_dataset(dir.path()).unwrap();
    let pool: Vec<usize> = (0..data.records.len()).filter(|&r| data.records[r].id == 0).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    assert!(matches!(make_batch(&data, &pool, 2, 24, 0.5, &mut rng), Err(CadaError::Batch(_))));
}
