use canids::canio::{AddressWidth, CanFrame, Label};
use canids::training::{mask_count, mask_sequence, plan_epoch, MaskedBatch};
use canids::windowing::{
    detokenize, read_shard, slide_windows, split_train_valid, tokenize, window_count, write_shard,
    IdVocabulary, TokenStream,
};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn stream() -> impl Strategy<Value = TokenStream> {
    proptest::collection::vec((0u32..12, prop::bool::weighted(0.1)), 2..200).prop_map(|rows| TokenStream {
        tokens: rows.iter().map(|r| r.0).collect(),
        labels: rows.iter().map(|r| r.1 as u8).collect(),
    })
}

proptest! {
    #[test]
    fn windows_follow_the_sliding_rule(s in stream(), t in 2usize..40, stride in 1usize..10) {
        prop_assume!(t <= s.len());
        let ws = slide_windows(&s, t, stride).unwrap();
        prop_assert_eq!(ws.len(), (s.len() - t) / stride + 1);
        prop_assert_eq!(ws.len(), window_count(s.len(), t, stride));
        for w in &ws {
            prop_assert_eq!(w.len(), t);
            prop_assert_eq!(&w.tokens[..], &s.tokens[w.origin..w.origin + t]);
            let any = s.labels[w.origin..w.origin + t].iter().any(|&l| l == 1);
            prop_assert_eq!(w.is_abnormal(), any);
            prop_assert_eq!(w.sequence_label, any as u8);
        }
        if stride == 1 {
            prop_assert_eq!(ws.len(), s.len() - t + 1);
            for pair in ws.windows(2) {
                prop_assert_eq!(&pair[0].tokens[1..], &pair[1].tokens[..t - 1]);
            }
        }
    }

    #[test]
    fn tokenize_then_detokenize_recovers_known_ids(
        ids in proptest::collection::vec(0u32..0x7FF, 1..100),
        extra in proptest::collection::vec(0u32..0x7FF, 0..20),
    ) {
        let vocab = IdVocabulary::from_ids(ids.iter().copied()).unwrap();
        let frames: Vec<CanFrame> = ids
            .iter()
            .chain(&extra)
            .enumerate()
            .map(|(i, &id)| CanFrame::new(i as f64, id, &[], Label::Normal, AddressWidth::Standard).unwrap())
            .collect();
        let stream = tokenize(&frames, &vocab);
        let back = detokenize(&stream.tokens, &vocab);
        for (f, b) in frames.iter().zip(back) {
            match vocab.token(f.can_id()) {
                Some(_) => prop_assert_eq!(b, Some(f.can_id())),
                None => prop_assert_eq!(b, None),
            }
        }
        prop_assert!(stream.tokens.iter().all(|&t| t < vocab.mask_token() || t == vocab.unk_token()));
        // Token order follows id order.
        prop_assert!(vocab.ids().windows(2).all(|p| p[0] < p[1]));
    }

    #[test]
    fn masking_hits_exactly_r_distinct_positions(
        tokens in proptest::collection::vec(0u32..20, 1..128),
        m in 0.01f64..0.99,
        seed in any::<u64>(),
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let masked = mask_sequence(&tokens, m, 99, &mut rng);
        let r = mask_count(tokens.len(), m);
        prop_assert!(r >= 1 && r <= tokens.len());
        prop_assert_eq!(r, ((m * tokens.len() as f64).round() as usize).clamp(1, tokens.len()));
        prop_assert_eq!(masked.positions.len(), r);
        prop_assert!(masked.positions.windows(2).all(|p| p[0] < p[1]));
        prop_assert_eq!(masked.inputs.iter().filter(|&&t| t == 99).count(), r);
        prop_assert_eq!(masked.restore(), tokens);
    }

    #[test]
    fn epoch_plan_is_a_partition(n in 1usize..300, b in 1usize..40, seed in any::<u64>(), epoch in 0usize..5) {
        let plan = plan_epoch(n, b, seed, epoch);
        let mut seen: Vec<usize> = plan.iter().flatten().copied().collect();
        seen.sort_unstable();
        seen.dedup();
        prop_assert_eq!(seen.len(), plan.iter().map(Vec::len).sum::<usize>());
        let dropped = n - seen.len();
        prop_assert!(dropped == 0 || (dropped == 1 && n % b == 1 && n > 1));
        prop_assert!(plan.iter().all(|batch| batch.len() <= b));
        prop_assert_eq!(plan, plan_epoch(n, b, seed, epoch));
    }

    #[test]
    fn validation_tail_is_disjoint_and_contiguous(n in 2usize..200, frac in 0.01f64..0.9) {
        let s = TokenStream { tokens: (0..n as u32 + 3).collect(), labels: vec![0; n + 3] };
        let ws = slide_windows(&s, 4, 1).unwrap();
        prop_assert_eq!(ws.len(), n);
        let expected = (n as f64 * frac - 1e-9).ceil() as usize;
        let split = split_train_valid(ws, frac);
        if expected >= n {
            prop_assert!(split.is_err());
            return Ok(());
        }
        let (train, valid) = split.unwrap();
        prop_assert_eq!(train.len() + valid.len(), n);
        prop_assert_eq!(valid.len(), expected);
        prop_assert!(train.iter().chain(&valid).map(|w| w.origin).eq(0..n));
    }
}

#[test]
fn mask_count_anchor() {
    assert_eq!(mask_count(32, 0.45), 14);
    assert_eq!(mask_count(64, 0.45), 29);
    assert_eq!(mask_count(4, 0.01), 1);
}

#[test]
fn batch_rows_index_stacked_positions() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let seqs: Vec<_> = (0..3).map(|i| mask_sequence(&[i, i + 1, i + 2, i + 3], 0.5, 9, &mut rng)).collect();
    let batch = MaskedBatch::new(&seqs);
    assert_eq!(batch.len(), 3);
    assert_eq!(batch.masked_positions(), 6);
    for (&row, &target) in batch.rows.iter().zip(&batch.targets) {
        assert_eq!(batch.inputs[row], 9);
        let (b, p) = (row / 4, row % 4);
        assert_eq!(target, b + p);
    }
}

#[test]
fn shards_round_trip_and_detect_tampering() {
    let vocab = IdVocabulary::from_ids([0x10, 0x20, 0x30]).unwrap();
    let s = TokenStream {
        tokens: (0..50).map(|i| i % 3).collect(),
        labels: (0..50).map(|i| u8::from(i == 20)).collect(),
    };
    let ws = slide_windows(&s, 8, 3).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let base = dir.path().join("normal");
    write_shard(&base, &ws, 3, &vocab).unwrap();
    let (manifest, back) = read_shard(&base).unwrap();
    assert_eq!(back, ws);
    assert_eq!(manifest.count, ws.len());
    assert_eq!(manifest.vocab_hash, vocab.hash());

    let bin = base.with_extension("bin");
    let mut bytes = std::fs::read(&bin).unwrap();
    bytes[5] ^= 0x40;
    std::fs::write(&bin, bytes).unwrap();
    assert!(read_shard(&base).is_err());
}
