use pame_core::codec;
use pame_core::pme::{aggregate, bit_cost, sample_coordinates, SparseMessage};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn message_strategy(n: usize, sender: usize) -> impl Strategy<Value = SparseMessage> {
    (proptest::collection::vec(-1e6f64..1e6, n), proptest::sample::subsequence((0..n).collect::<Vec<_>>(), 1..=n))
        .prop_map(move |(mut w, idx)| {
            for (k, v) in w.iter_mut().enumerate() {
                if k % 3 == 0 {
                    *v = 0.0;
                }
            }
            SparseMessage::from_selection(sender, &w, idx).unwrap()
        })
}

proptest! {
    #[test]
    fn sampled_coordinates_are_sorted_and_distinct(n in 1usize..200, frac in 0.0f64..1.0, seed: u64) {
        let s = ((frac * n as f64) as usize).clamp(1, n);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let idx = sample_coordinates(n, s, &mut rng).unwrap();
        prop_assert_eq!(idx.len(), s);
        prop_assert!(idx.windows(2).all(|w| w[0] < w[1]));
        prop_assert!(idx.iter().all(|&i| i < n));
    }

    #[test]
    fn aggregation_matches_direct_average(
        own in proptest::collection::vec(-10f64..10.0, 6),
        msgs in (message_strategy(6, 1), message_strategy(6, 4), message_strategy(6, 9)),
    ) {
        let msgs = vec![msgs.2, msgs.0, msgs.1];
        let res = aggregate(&own, &msgs).unwrap();
        for l in 0..6 {
            let mut sum = 0.0;
            let mut count = 0;
            for sender in [1, 4, 9] {
                let m = msgs.iter().find(|m| m.sender() == sender).unwrap();
                if let Ok(pos) = m.indices().binary_search(&l) {
                    sum += m.values()[pos];
                    count += 1;
                }
            }
            prop_assert_eq!(res.lambda[l], count);
            prop_assert_eq!(res.fallback_mask[l], count == 0);
            let want = if count == 0 { own[l] } else { sum / count as f64 };
            prop_assert_eq!(res.vbar[l], want);
        }
    }

    #[test]
    fn bit_cost_counts_each_part(msg in message_strategy(37, 0)) {
        let n = 37u64;
        let s = msg.len() as u64;
        let z = msg.values().iter().filter(|v| **v == 0.0).count() as u64;
        prop_assert_eq!(bit_cost(&msg), (n - s) + 64 * (s - z) + 8 * z);
    }

    #[test]
    fn codec_round_trip(msg in message_strategy(21, 7)) {
        let bytes = codec::encode(&msg).unwrap();
        prop_assert_eq!(bytes.len(), codec::encoded_len(&msg));
        prop_assert_eq!(codec::decode(&bytes).unwrap(), msg);
    }

    #[test]
    fn json_round_trip(msg in message_strategy(12, 3)) {
        let back = SparseMessage::from_json(&msg.to_json(), 12).unwrap();
        prop_assert_eq!(back, msg);
    }

    #[test]
    fn decode_never_panics(bytes in proptest::collection::vec(any::<u8>(), 0..64)) {
        let _ = codec::decode(&bytes);
    }
}

#[test]
fn inclusion_frequency_is_s_over_n() {
    let (n, s, trials) = (20usize, 7usize, 50_000usize);
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    let mut hits = vec![0usize; n];
    for _ in 0..trials {
        for i in sample_coordinates(n, s, &mut rng).unwrap() {
            hits[i] += 1;
        }
    }
    let p = s as f64 / n as f64;
    let sd = (p * (1.0 - p) / trials as f64).sqrt();
    for (i, h) in hits.iter().enumerate() {
        let freq = *h as f64 / trials as f64;
        assert!((freq - p).abs() < 5.0 * sd, "coordinate {i}: {freq} vs {p}");
    }
}

#[test]
fn lambda_is_binomial() {
    // With q senders each choosing s of n coordinates, lambda_l ~ Bin(q, s/n).
    let (q, n, s, trials) = (3usize, 10usize, 4usize, 20_000usize);
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let w = vec![1.0; n];
    let mut counts = [0usize; 4];
    for _ in 0..trials {
        let msgs: Vec<SparseMessage> = (0..q)
            .map(|j| SparseMessage::from_selection(j, &w, sample_coordinates(n, s, &mut rng).unwrap()).unwrap())
            .collect();
        counts[aggregate(&w, &msgs).unwrap().lambda[0] as usize] += 1;
    }
    let p: f64 = s as f64 / n as f64;
    let binom = [1.0, 3.0, 3.0, 1.0];
    let chi2: f64 = (0..=q)
        .map(|k| {
            let expected = trials as f64 * binom[k] * p.powi(k as i32) * (1.0 - p).powi((q - k) as i32);
            (counts[k] as f64 - expected).powi(2) / expected
        })
        .sum();
    // 0.999 quantile of chi-square with 3 degrees of freedom.
    assert!(chi2 < 16.27, "chi2 = {chi2}, counts {counts:?}");
}

#[test]
fn selected_zero_counts_toward_lambda() {
    let own = [9.0, 9.0];
    let a = SparseMessage::from_selection(0, &[0.0, 4.0], vec![0, 1]).unwrap();
    let b = SparseMessage::from_selection(1, &[2.0, 2.0], vec![0]).unwrap();
    let res = aggregate(&own, &[a, b]).unwrap();
    assert_eq!(res.lambda, vec![2, 1]);
    assert_eq!(res.vbar, vec![1.0, 4.0]);
}
