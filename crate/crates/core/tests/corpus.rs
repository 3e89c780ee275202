use std::collections::HashSet;

use ima_core::corpus::{
    decode_features, encode_features, generate_corpus, read_manifest, synth_features, token_name,
    type_token_ratio, vocab_overlap, write_features, write_manifest, DomainSpec, ManifestRow,
    PrototypeBank, Split,
};
use ima_core::datapool::{cosine_similarity, pool_vector};
use ima_core::error::{Error, FormatError};
use ima_core::tensor::Tensor;

fn toks(ids: &[usize]) -> Vec<String> {
    ids.iter().map(|&i| token_name(i)).collect()
}

fn quiet(spec: DomainSpec) -> DomainSpec {
    DomainSpec {
        noise_sigma: 0.0,
        speaker_offset_sigma: 0.0,
        ..spec
    }
}

#[test]
fn noiseless_frames_equal_prototypes() {
    let spec = quiet(DomainSpec::over_tokens("T", 0..8, 16));
    let bank = PrototypeBank::new(16, 8);
    let tokens = toks(&[3, 1, 3]);
    let f = synth_features(&tokens, &spec, 7).unwrap();
    let rows: Vec<&[f64]> = f.data().chunks(16).collect();
    // Frames come in runs; every frame must equal the prototype of its run's token.
    let mut t = 0;
    let mut i = 0;
    while i < rows.len() {
        let p = bank.get(&tokens[t]).unwrap();
        let mut run = 0;
        while i < rows.len() && rows[i] == p {
            run += 1;
            i += 1;
        }
        let (lo, hi) = spec.frames_per_token;
        assert!(run >= lo && run <= hi, "token {t} run {run}");
        t += 1;
    }
    assert_eq!(t, tokens.len());
}

#[test]
fn prototypes_are_orthogonal_with_norm_sqrt_dim() {
    let bank = PrototypeBank::new(12, 12);
    for i in 0..12 {
        let a = bank.get(&token_name(i)).unwrap();
        let n: f64 = a.iter().map(|x| x * x).sum::<f64>();
        assert!((n - 12.0).abs() < 1e-9);
        for j in 0..i {
            let b = bank.get(&token_name(j)).unwrap();
            let d: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
            assert!(d.abs() < 1e-9, "{i} {j} {d}");
        }
    }
}

#[test]
fn generation_is_deterministic() {
    let spec = DomainSpec::preset_b();
    let a = generate_corpus(&spec, 40, 3).unwrap();
    let b = generate_corpus(&spec, 40, 3).unwrap();
    assert_eq!(a, b);
    let c = generate_corpus(&spec, 40, 4).unwrap();
    assert_ne!(a, c);
}

#[test]
fn same_tokens_pool_close_disjoint_tokens_pool_apart() {
    let spec = DomainSpec {
        noise_sigma: 0.1,
        speaker_offset_sigma: 0.0,
        frames_per_token: (5, 5),
        ..DomainSpec::over_tokens("T", 0..16, 32)
    };
    let s = toks(&[0, 1, 2, 3]);
    let a = pool_vector(&synth_features(&s, &spec, 1).unwrap()).unwrap();
    let b = pool_vector(&synth_features(&s, &spec, 2).unwrap()).unwrap();
    let c = pool_vector(&synth_features(&toks(&[8, 9, 10, 11]), &spec, 3).unwrap()).unwrap();
    assert!(cosine_similarity(&a, &b).unwrap() > 0.99);
    assert!(cosine_similarity(&a, &c).unwrap().abs() < 0.1);
}

#[test]
fn similarity_grows_with_token_overlap() {
    let spec = DomainSpec {
        noise_sigma: 0.0,
        speaker_offset_sigma: 0.0,
        frames_per_token: (4, 4),
        ..DomainSpec::over_tokens("T", 0..16, 32)
    };
    let base = pool_vector(&synth_features(&toks(&[0, 1, 2, 3]), &spec, 1).unwrap()).unwrap();
    let mut last = f64::INFINITY;
    for shared in (0..=4).rev() {
        let ids: Vec<usize> = (0..4).map(|i| if i < shared { i } else { 8 + i }).collect();
        let z = pool_vector(&synth_features(&toks(&ids), &spec, 9).unwrap()).unwrap();
        let cos = cosine_similarity(&base, &z).unwrap();
        // With equal run lengths and orthogonal prototypes the cosine is shared / 4.
        assert!((cos - shared as f64 / 4.0).abs() < 1e-9, "{shared}: {cos}");
        assert!(cos < last);
        last = cos;
    }
}

#[test]
fn corpus_has_requested_size_and_unique_ids() {
    let utts = generate_corpus(&DomainSpec::preset_a(), 100, 1).unwrap();
    assert_eq!(utts.len(), 100);
    let ids: HashSet<_> = utts.iter().map(|u| &u.id).collect();
    assert_eq!(ids.len(), 100);
    assert_eq!(utts[0].id, "A-00000");
    for u in &utts {
        assert_eq!(u.features.shape()[1], 32);
        assert_eq!(u.split, Split::of(&u.id));
        assert_eq!(u.target.split_whitespace().count(), u.tokens.len());
    }
}

#[test]
fn single_template_without_substitution_repeats_one_target() {
    let spec = DomainSpec {
        template_count: 1,
        substitution_rate: 0.0,
        ..DomainSpec::over_tokens("T", 0..10, 8)
    };
    let utts = generate_corpus(&spec, 30, 5).unwrap();
    assert!(utts.iter().all(|u| u.target == utts[0].target));
}

#[test]
fn fewer_templates_lower_type_token_ratio() {
    let ttr = |templates| {
        let spec = DomainSpec {
            template_count: templates,
            substitution_rate: 0.0,
            ..DomainSpec::over_tokens("T", 0..60, 8)
        };
        let utts = generate_corpus(&spec, 300, 2).unwrap();
        type_token_ratio(utts.iter().map(|u| u.target.as_str()))
    };
    let (a, b, c) = (ttr(1), ttr(5), ttr(60));
    assert!(a < b && b < c, "{a} {b} {c}");
}

#[test]
fn vocab_overlap_examples() {
    assert_eq!(vocab_overlap(["a b", "c"], ["c b a"]).unwrap(), 1.0);
    assert_eq!(vocab_overlap(["a b"], ["c d"]).unwrap(), 0.0);
    assert_eq!(vocab_overlap(["a b c d"], ["a b"]).unwrap(), 0.5);
    assert!(matches!(vocab_overlap([""], ["a"]), Err(Error::Empty(_))));
}

#[test]
fn presets_share_part_of_their_vocabulary() {
    let a = generate_corpus(&DomainSpec::preset_a(), 400, 1).unwrap();
    let b = generate_corpus(&DomainSpec::preset_b(), 400, 1).unwrap();
    let ov = vocab_overlap(
        b.iter().map(|u| u.target.as_str()),
        a.iter().map(|u| u.target.as_str()),
    )
    .unwrap();
    assert!(ov > 0.2 && ov < 0.8, "{ov}");
}

#[test]
fn splits_partition_the_corpus() {
    let utts = generate_corpus(&DomainSpec::preset_a(), 1000, 1).unwrap();
    let count = |s| utts.iter().filter(|u| u.split == s).count();
    let (tr, va, te) = (count(Split::Train), count(Split::Valid), count(Split::Test));
    assert_eq!(tr + va + te, 1000);
    assert!(va > 50 && te > 50 && tr > 700);
}

#[test]
fn feature_file_round_trip() {
    let t = Tensor::new(vec![3, 2], vec![1.0, -2.5, 0.0, 1e-300, f64::MAX, 7.0]).unwrap();
    let bytes = encode_features(&t).unwrap();
    assert_eq!(&bytes[..4], b"FBNK");
    assert_eq!(bytes.len(), 16 + 6 * 8);
    assert_eq!(decode_features(&bytes).unwrap(), t);
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("x.fbnk");
    write_features(&p, &t).unwrap();
    assert_eq!(ima_core::corpus::read_features(&p).unwrap(), t);
}

#[test]
fn feature_file_errors() {
    let t = Tensor::new(vec![2, 2], vec![1.0; 4]).unwrap();
    let good = encode_features(&t).unwrap();
    let mut bad = good.clone();
    bad[0] = b'X';
    assert!(matches!(
        decode_features(&bad),
        Err(Error::Format(FormatError::BadMagic { .. }))
    ));
    assert!(matches!(
        decode_features(&good[..good.len() - 3]),
        Err(Error::Format(FormatError::Truncated { .. }))
    ));
    assert!(matches!(
        decode_features(&good[..10]),
        Err(Error::Format(FormatError::Truncated { .. }))
    ));
    let mut huge = good[..16].to_vec();
    huge[8..12].copy_from_slice(&u32::MAX.to_le_bytes());
    huge[12..16].copy_from_slice(&u32::MAX.to_le_bytes());
    assert!(decode_features(&huge).is_err());
    let mut version = good.clone();
    version[4] = 9;
    assert!(matches!(
        decode_features(&version),
        Err(Error::Format(FormatError::UnsupportedVersion(9)))
    ));
}

#[test]
fn manifest_round_trip_and_duplicates() {
    let dir = tempfile::tempdir().unwrap();
    let rows = vec![
        ManifestRow {
            id: "A-00000".into(),
            features: dir.path().join("feats/A-00000.fbnk"),
            target: "aqoyiv moca".into(),
            domain: "A".into(),
            split: Split::Train,
        },
        ManifestRow {
            id: "A-00001".into(),
            features: dir.path().join("feats/A-00001.fbnk"),
            target: "tom".into(),
            domain: "A".into(),
            split: Split::Test,
        },
    ];
    let path = dir.path().join("m.tsv");
    write_manifest(&path, &rows).unwrap();
    let text = std::fs::read_to_string(&path).unwrap();
    assert!(text.starts_with("A-00000\tfeats/A-00000.fbnk\taqoyiv moca\tA\ttrain\n"));
    assert_eq!(read_manifest(&path).unwrap(), rows);

    std::fs::write(&path, format!("{text}{}", text.lines().next().unwrap())).unwrap();
    assert!(matches!(read_manifest(&path), Err(Error::DuplicateId(id)) if id == "A-00000"));
    std::fs::write(&path, "x\ty\n").unwrap();
    assert!(read_manifest(&path).is_err());
}

#[test]
fn invalid_domain_specs_are_rejected() {
    let base = DomainSpec::over_tokens("T", 0..4, 8);
    assert!(DomainSpec {
        template_count: 0,
        ..base.clone()
    }
    .validate()
    .is_err());
    assert!(DomainSpec {
        template_len: (3, 2),
        ..base.clone()
    }
    .validate()
    .is_err());
    assert!(DomainSpec {
        noise_sigma: -1.0,
        ..base.clone()
    }
    .validate()
    .is_err());
    assert!(DomainSpec {
        vocab: vec!["bogus".into()],
        ..base.clone()
    }
    .validate()
    .is_err());
    assert!(generate_corpus(&base, 0, 1).is_err());
    assert!(matches!(
        synth_features(&toks(&[9]), &base, 1),
        Err(Error::UnknownToken(_))
    ));
}
