use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use xlm_core::data::*;
use xlm_core::Error;

/// Digits of 0..2^n: one for 0, then k digits for each of the 2^(k-1)
/// numbers with k bits.
fn binary_count_oracle(n: u32) -> (u64, u64) {
    let digits = 1 + (1..=n as u64).map(|k| k << (k - 1)).sum::<u64>();
    (digits, 1 << n)
}

#[test]
fn binary_corpus_token_count() {
    let c = gen_binary_corpus(14).unwrap();
    let (digits, seps) = binary_count_oracle(14);
    assert_eq!(digits, 212_994);
    assert_eq!(seps, 16_384);
    assert_eq!(c.len() as u64, digits + seps);
    assert_eq!(c.len(), 229_378);
    assert_eq!(c.tokens().iter().filter(|&&t| t == SEMICOLON).count(), 16_384);
}

#[test]
fn binary_corpus_parses_back_to_counting() {
    let c = gen_binary_corpus(10).unwrap();
    let text = binary_text(c.tokens());
    let numbers: Vec<u64> = text
        .trim_end_matches(';')
        .split(';')
        .map(|s| {
            assert!(s == "0" || !s.starts_with('0'), "leading zero in {s}");
            u64::from_str_radix(s, 2).unwrap()
        })
        .collect();
    assert_eq!(numbers, (0..1024).collect::<Vec<_>>());
}

#[test]
fn binary_text_round_trip() {
    let c = gen_binary_corpus(6).unwrap();
    assert_eq!(binary_tokens(&binary_text(c.tokens())).unwrap(), c.tokens());
    assert_eq!(binary_tokens(" 10 ;\n1").unwrap(), [ONE, ZERO, SEMICOLON, ONE]);
    assert!(binary_tokens("102").is_err());
}

#[test]
fn binary_corpus_is_reproducible() {
    assert_eq!(gen_binary_corpus(12).unwrap(), gen_binary_corpus(12).unwrap());
}

#[test]
fn token_stream_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("c.xtc");
    let c = Corpus::new(vec![0, 4999, 17, 3, 3], 5000, "synthetic").unwrap();
    write_token_stream(&c, &path).unwrap();
    let back = load_token_stream(&path, 5000).unwrap();
    assert_eq!(back.tokens(), c.tokens());
    assert_eq!(back.vocab_size(), 5000);
}

#[test]
fn large_stream_loads_with_full_length() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("big.xtc");
    let n = 8_400_000;
    let tokens: Vec<u32> = (0..n).map(|i| (i * 7919 % 5000) as u32).collect();
    write_token_stream(&Corpus::new(tokens, 5000, "big").unwrap(), &path).unwrap();
    let back = load_token_stream(&path, 5000).unwrap();
    assert_eq!(back.len(), n);
}

fn encoded(vocab: u32, ids: &[u32]) -> Vec<u8> {
    let mut b = CORPUS_MAGIC.to_vec();
    b.extend(vocab.to_le_bytes());
    b.extend((ids.len() as u64).to_le_bytes());
    for id in ids {
        b.extend(id.to_le_bytes());
    }
    b
}

#[test]
fn loader_errors_are_distinct() {
    let p = std::path::Path::new("corpus.xtc");

    let mut bad = encoded(5, &[1, 2, 3]);
    bad[0] = b'Y';
    assert!(matches!(decode_token_stream(p, &bad, 5), Err(Error::BadMagic { .. })));

    let full = encoded(5, &[1, 2, 3]);
    let cut = &full[..full.len() - 2];
    assert!(matches!(decode_token_stream(p, cut, 5), Err(Error::Truncated { .. })));

    assert!(matches!(
        decode_token_stream(p, &encoded(5, &[1, 2, 5, 0]), 5),
        Err(Error::TokenOutOfRange { id: 5, offset: 2, vocab_size: 5 })
    ));

    assert!(matches!(
        decode_token_stream(p, &encoded(6, &[1, 2]), 5),
        Err(Error::VocabMismatch { expected: 5, found: 6, .. })
    ));

    assert!(matches!(
        decode_token_stream(p, &encoded(5, &[]), 5),
        Err(Error::CorpusTooShort { len: 0, .. })
    ));

    let mut extra = encoded(5, &[1, 2]);
    extra.push(0);
    assert!(matches!(decode_token_stream(p, &extra, 5), Err(Error::Malformed { .. })));

    assert!(matches!(decode_token_stream(p, b"XT", 5), Err(Error::BadMagic { .. })));
}

#[test]
fn same_seed_same_batches() {
    let c = gen_binary_corpus(8).unwrap();
    let mut a = ChaCha8Rng::seed_from_u64(5);
    let mut b = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..5 {
        assert_eq!(
            sample_batch(&c, 16, 8, &mut a).unwrap(),
            sample_batch(&c, 16, 8, &mut b).unwrap()
        );
    }
}

#[test]
fn exact_length_corpus_has_one_window() {
    let c = Corpus::new(vec![0, 1, 2, 1, 0], 3, "tiny").unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    for _ in 0..20 {
        let b = sample_batch(&c, 4, 3, &mut rng).unwrap();
        assert_eq!(b.starts, vec![0, 0, 0]);
        assert_eq!(b.inputs, [0, 1, 2, 1].repeat(3));
        assert_eq!(b.targets, [1, 2, 1, 0].repeat(3));
    }
}

#[test]
fn short_corpus_rejected() {
    let c = Corpus::new(vec![0, 1, 2], 3, "tiny").unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    assert!(matches!(
        sample_batch(&c, 3, 1, &mut rng),
        Err(Error::CorpusTooShort { len: 3, needed: 4 })
    ));
}

#[test]
fn targets_follow_inputs_in_the_stream() {
    let c = gen_binary_corpus(9).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for _ in 0..200 {
        let b = sample_batch(&c, 32, 16, &mut rng).unwrap();
        for (k, &s) in b.starts.iter().enumerate() {
            assert!(s <= c.len() - 33);
            for i in 0..32 {
                assert_eq!(b.input(k, i), c.tokens()[s + i] as usize);
                assert_eq!(b.target(k, i), c.tokens()[s + i + 1] as usize);
            }
        }
        let (ti, tt) = b.time_major();
        for i in 0..32 {
            for k in 0..16 {
                assert_eq!(ti[i * 16 + k], b.input(k, i));
                assert_eq!(tt[i * 16 + k], b.target(k, i));
            }
        }
    }
}

#[test]
fn corpus_rejects_out_of_range_ids() {
    assert!(matches!(
        Corpus::new(vec![0, 3], 3, "x"),
        Err(Error::TokenOutOfRange { id: 3, offset: 1, .. })
    ));
}
