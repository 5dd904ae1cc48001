use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use reg2rg::synth::{synthesize_dataset, SynthConfig};
use reg2rg::volume::{
    load_manifest, load_volume, read_manifest_entries, save_volume, write_manifest_entries, Volume,
};
use reg2rg::Error;

#[test]
fn large_random_volume_round_trips_bit_exactly() {
    let dims = [256, 256, 64];
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let data: Vec<f32> = (0..dims.iter().product::<usize>()).map(|_| rng.gen()).collect();
    let v = Volume::new(dims, [0.7, 0.7, 2.5], data).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("big.vol");
    save_volume(&v, &path).unwrap();
    let back = load_volume(&path).unwrap();
    assert_eq!(back.dims(), dims);
    assert_eq!(back.spacing(), v.spacing());
    assert!(back.data().iter().zip(v.data()).all(|(a, b)| a.to_bits() == b.to_bits()));

    let again = dir.path().join("again.vol");
    save_volume(&back, &again).unwrap();
    assert_eq!(fs::read(&path).unwrap(), fs::read(&again).unwrap());
}

fn small_cfg(samples: usize) -> SynthConfig {
    SynthConfig {
        samples,
        dims: [16, 16, 8],
        regions_per_sample: 2,
        ..SynthConfig::default()
    }
}

#[test]
fn manifest_preserves_file_order() {
    let dir = tempfile::tempdir().unwrap();
    let out = synthesize_dataset(&small_cfg(2), 3, dir.path()).unwrap();
    let mut entries = read_manifest_entries(&out.manifest).unwrap();
    entries.reverse();
    write_manifest_entries(&out.manifest, &entries).unwrap();
    let records = load_manifest(&out.manifest).unwrap();
    let ids: Vec<_> = records.iter().map(|r| r.sample_id.clone()).collect();
    let want: Vec<_> = entries.iter().map(|e| e.sample_id.clone()).collect();
    assert_eq!(ids, want);
    assert_eq!(records.len(), 2);
}

#[test]
fn unknown_area_names_the_record() {
    let dir = tempfile::tempdir().unwrap();
    let out = synthesize_dataset(&small_cfg(2), 3, dir.path()).unwrap();
    let mut entries = read_manifest_entries(&out.manifest).unwrap();
    let bad = entries[1].sample_id.clone();
    entries[1].masks[0].area = "kidney".into();
    write_manifest_entries(&out.manifest, &entries).unwrap();
    match load_manifest(&out.manifest) {
        Err(e @ Error::UnknownArea { .. }) => {
            let msg = e.to_string();
            assert!(msg.contains("kidney") && msg.contains(&bad), "{msg}");
            assert!(e.is_validation());
        }
        other => panic!("expected unknown-area error, got {other:?}"),
    }
}

#[test]
fn training_split_sized_manifest_loads_without_reading_volumes() {
    let dir = tempfile::tempdir().unwrap();
    let out = synthesize_dataset(&small_cfg(1), 3, dir.path()).unwrap();
    let template = read_manifest_entries(&out.manifest).unwrap().remove(0);
    let entries: Vec<_> = (0..24_128)
        .map(|i| {
            let mut e = template.clone();
            e.sample_id = format!("train_{i:05}");
            e
        })
        .collect();
    write_manifest_entries(&out.manifest, &entries).unwrap();
    // A volume that cannot be parsed proves loading never touches payloads.
    let vol = dir.path().join(&template.volume);
    fs::write(&vol, b"not a volume").unwrap();
    let records = load_manifest(&out.manifest).unwrap();
    assert_eq!(records.len(), 24_128);
    assert_eq!(records[24_127].sample_id, "train_24127");
    assert!(records[0].load_volume().is_err());
}

fn tree_digest(root: &Path) -> Vec<(String, String)> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                let rel = p.strip_prefix(root).unwrap().display().to_string();
                out.push((rel, hex::encode(Sha256::digest(fs::read(&p).unwrap()))));
            }
        }
    }
    out.sort();
    out
}

#[test]
fn synthesis_is_byte_deterministic() {
    let cfg = SynthConfig {
        samples: 3,
        p_abnormal: 0.3,
        ..SynthConfig::default()
    };
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    synthesize_dataset(&cfg, 42, a.path()).unwrap();
    synthesize_dataset(&cfg, 42, b.path()).unwrap();
    let (da, db) = (tree_digest(a.path()), tree_digest(b.path()));
    assert!(da.len() > 3);
    assert_eq!(da, db);

    let c = tempfile::tempdir().unwrap();
    synthesize_dataset(&cfg, 43, c.path()).unwrap();
    assert_ne!(da, tree_digest(c.path()));
}

#[test]
fn abnormality_rate_matches_injection_probability() {
    let cfg = SynthConfig {
        samples: 100,
        regions_per_sample: 3,
        p_abnormal: 0.3,
        ..SynthConfig::default()
    };
    let dir = tempfile::tempdir().unwrap();
    let out = synthesize_dataset(&cfg, 7, dir.path()).unwrap();
    let vocab = cfg.abnormalities.len();
    let (mut injected, mut pairs) = (0usize, 0usize);
    for t in &out.truth {
        for o in &t.organs {
            injected += o.abnormalities.len();
            pairs += vocab;
        }
    }
    let rate = injected as f64 / pairs as f64;
    assert!((rate - 0.3).abs() <= 0.1, "rate {rate}");

    // The manifest labels are the per-sample union of injected types.
    for (e, t) in read_manifest_entries(&out.manifest).unwrap().iter().zip(&out.truth) {
        for (k, &flag) in e.labels.iter().enumerate() {
            assert_eq!(flag, t.organs.iter().any(|o| o.abnormalities.contains(&k)));
        }
    }
}
