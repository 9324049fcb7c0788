use num_bigint::BigInt;
use num_rational::BigRational;
use num_traits::{Signed, ToPrimitive, Zero};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::tensor::Tensor;

fn tap(batch: usize, seq: usize, hidden: usize, data: Vec<f32>) -> ActivationTap {
    ActivationTap::new(0, Tensor::new(vec![batch, seq, hidden], data).unwrap()).unwrap()
}

fn random_values(rng: &mut ChaCha8Rng, n: usize, density: f64) -> Vec<f32> {
    (0..n)
        .map(|_| if rng.gen_bool(density) { rng.gen_range(0.01f32..3.0) } else { 0.0 })
        .collect()
}

// Oracles: direct index enumeration over [b][s][u].

fn oracle_token_counts(data: &[f32], batch: usize, seq: usize, hidden: usize) -> u64 {
    let mut n = 0;
    for b in 0..batch {
        for s in 0..seq {
            for u in 0..hidden {
                if data[(b * seq + s) * hidden + u] > 0.0 {
                    n += 1;
                }
            }
        }
    }
    n
}

fn oracle_sequence_set(data: &[f32], b: usize, seq: usize, hidden: usize) -> Vec<usize> {
    (0..hidden)
        .filter(|&u| (0..seq).any(|s| data[(b * seq + s) * hidden + u] > 0.0))
        .collect()
}

fn oracle_batch_union(data: &[f32], batch: usize, seq: usize, hidden: usize) -> usize {
    let mut set = std::collections::BTreeSet::new();
    for b in 0..batch {
        set.extend(oracle_sequence_set(data, b, seq, hidden));
    }
    set.len()
}

/// Nearest-rank percentile of the nonzero counts using integer arithmetic
/// only: rank = ceil(p * m / 100).
fn oracle_subset_percentile(counts: &[u32], p: u32) -> Option<(u32, usize, Vec<u32>)> {
    let mut nz: Vec<u32> = counts.iter().copied().filter(|&c| c > 0).collect();
    if nz.is_empty() {
        return None;
    }
    nz.sort();
    let m = nz.len();
    let rank = (p as usize * m).div_ceil(100).max(1);
    Some((nz[rank - 1], rank, nz))
}

/// `[seq, hidden]` block where unit `u` fires on its first `counts[u]` tokens.
fn block_from_counts(counts: &[u32], seq: usize) -> Vec<f32> {
    let hidden = counts.len();
    let mut v = vec![0.0f32; seq * hidden];
    for (u, &c) in counts.iter().enumerate() {
        for s in 0..c as usize {
            v[s * hidden + u] = 1.0;
        }
    }
    v
}

#[test]
fn token_use_examples() {
    assert_eq!(token_use(&tap(1, 2, 4, vec![0.0; 8])).unwrap(), 0.0);
    let mut v = vec![0.0; 2 * 3 * 4];
    for pos in 0..6 {
        v[pos * 4 + pos % 4] = 0.7;
    }
    assert_eq!(token_use(&tap(2, 3, 4, v)).unwrap(), 0.25);
}

#[test]
fn token_use_matches_count_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..50 {
        let data: Vec<f32> = (0..48).map(|_| rng.gen_range(0..2) as f32).collect();
        let expected = oracle_token_counts(&data, 2, 3, 8) as f64 / 48.0;
        assert_eq!(token_use(&tap(2, 3, 8, data)).unwrap(), expected);
    }
}

#[test]
fn sequence_dimensions_examples() {
    assert_eq!(sequence_dimensions_used(&[0.0; 12], 4).unwrap(), 0);
    for i in 0..12 {
        let mut v = vec![0.0; 12];
        v[i] = 1e-30;
        assert_eq!(sequence_dimensions_used(&v, 4).unwrap(), 1);
    }
}

#[test]
fn sequence_dimensions_match_column_scan() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for _ in 0..50 {
        let v = random_values(&mut rng, 16 * 32, 0.03);
        assert_eq!(
            sequence_dimensions_used(&v, 32).unwrap(),
            oracle_sequence_set(&v, 0, 16, 32).len()
        );
    }
}

#[test]
fn negative_input_is_rejected() {
    let v = [0.0, 1.0, -0.5, 0.0];
    assert_eq!(
        sequence_dimensions_used(&v, 2),
        Err(MetricsError::NegativeActivation { index: 2, value: -0.5 })
    );
    assert!(matches!(
        measure(0, &tap(1, 2, 2, v.to_vec())),
        Err(MetricsError::NegativeActivation { .. })
    ));
    assert!(percentile_used_dimension_count(&v, 2, 50.0).is_err());
}

#[test]
fn batch_union_examples() {
    let (b, s, h) = (4, 2, 5);
    let mut v = vec![0.0; b * s * h];
    v[(3 * s + 1) * h + 2] = 1.0;
    assert_eq!(batch_dimensions_used(&tap(b, s, h, v)).unwrap(), 1);

    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let one = random_values(&mut rng, s * h, 0.2);
    let repeated: Vec<f32> = one.iter().copied().cycle().take(b * s * h).collect();
    assert_eq!(
        batch_dimensions_used(&tap(b, s, h, repeated)).unwrap(),
        sequence_dimensions_used(&one, h).unwrap()
    );
}

#[test]
fn batch_union_matches_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    for _ in 0..50 {
        let v = random_values(&mut rng, 4 * 16 * 32, 0.004);
        let expected = oracle_batch_union(&v, 4, 16, 32);
        assert_eq!(batch_dimensions_used(&tap(4, 16, 32, v)).unwrap(), expected);
    }
}

#[test]
fn batch_active_agrees_with_count() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let t = tap(3, 4, 20, random_values(&mut rng, 240, 0.02));
    let active = batch_active(&t);
    assert_eq!(active.iter().filter(|&&a| a).count(), batch_dimensions_used(&t).unwrap());
}

#[test]
fn rescaled_percentile_examples() {
    assert_eq!(rescaled_percentile(1.0, 50.0).unwrap(), 50.0);
    for p in [0.0, 37.0, 50.0, 100.0] {
        assert_eq!(rescaled_percentile(0.0, p).unwrap(), 100.0);
    }
    assert_eq!(rescaled_percentile(0.5, 50.0).unwrap(), 75.0);
    assert!(rescaled_percentile(1.1, 50.0).is_err());
    assert!(rescaled_percentile(-0.1, 50.0).is_err());
    assert!(rescaled_percentile(0.5, 100.5).is_err());
    assert!(rescaled_percentile(f64::NAN, 50.0).is_err());
}

#[test]
fn percentile_full_use_is_one() {
    for p in PERCENTILES {
        assert_eq!(percentile_used_dimension_count(&[1.0; 12], 3, p).unwrap(), 1.0);
    }
}

#[test]
fn percentile_small_case_is_nearest_rank() {
    // Nonzero subset {1, 3}: the nearest-rank median is the first element.
    let v = block_from_counts(&[0, 0, 1, 3], 4);
    let got = percentile_used_dimension_count(&v, 4, 50.0).unwrap();
    assert_eq!(got, 0.25);
    let (value, _, _) = oracle_subset_percentile(&[0, 0, 1, 3], 50).unwrap();
    assert_eq!(got, value as f64 / 4.0);
}

#[test]
fn percentile_all_zero_is_undefined() {
    assert_eq!(
        percentile_used_dimension_count(&[0.0; 8], 4, 50.0),
        Err(MetricsError::UndefinedPercentile)
    );
}

#[test]
fn percentile_matches_subset_oracle_on_random_counts() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    for _ in 0..200 {
        let seq = rng.gen_range(1..=16);
        let hidden = rng.gen_range(1..=32);
        let mut counts: Vec<u32> = (0..hidden).map(|_| rng.gen_range(0..=seq as u32)).collect();
        if counts.iter().all(|&c| c == 0) {
            counts[0] = 1;
        }
        let block = block_from_counts(&counts, seq);
        for p in [50u32, 65, 75, 90] {
            let got = percentile_used_dimension_count(&block, hidden, p as f64).unwrap();
            let (value, _, _) = oracle_subset_percentile(&counts, p).unwrap();
            assert_eq!(got, value as f64 / seq as f64, "counts {:?} p {}", counts, p);
        }
    }
}

#[test]
fn nearest_rank_edges() {
    assert_eq!(nearest_rank(0.0, 5), 1);
    assert_eq!(nearest_rank(100.0, 5), 5);
    assert_eq!(nearest_rank(65.0, 20), 13);
    assert_eq!(nearest_rank(50.0, 3), 2);
    assert_eq!(nearest_rank_percentile::<u32>(&[], 50.0), None);
}

#[test]
fn measure_record_fields() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let (b, s, h) = (3, 5, 16);
    let data = random_values(&mut rng, b * s * h, 0.1);
    let t = tap(b, s, h, data.clone());
    let r = measure(7, &t).unwrap();
    assert_eq!(r.step, 7);
    assert_eq!(r.token_use_fraction, oracle_token_counts(&data, b, s, h) as f64 / (b * s * h) as f64);
    let seq_total: usize = (0..b).map(|i| oracle_sequence_set(&data, i, s, h).len()).sum();
    assert_eq!(r.sequence_use_fraction, seq_total as f64 / (b * h) as f64);
    assert_eq!(r.batch_use_fraction, oracle_batch_union(&data, b, s, h) as f64 / h as f64);
    assert!(r.chain_holds());
    assert_eq!(measure(7, &t).unwrap(), r);
}

#[test]
fn measure_skips_silent_sequences_in_percentiles() {
    let (s, h) = (2, 4);
    let mut data = vec![0.0; 2 * s * h];
    data[0] = 1.0;
    data[h] = 1.0;
    let r = measure(0, &tap(2, s, h, data)).unwrap();
    assert_eq!(r.p50, Some(1.0));
    let r = measure(0, &tap(2, s, h, vec![0.0; 2 * s * h])).unwrap();
    assert_eq!(r.p50, None);
    assert_eq!(r.batch_use_fraction, 0.0);
}

#[test]
fn record_json_field_names() {
    let r = SparsityRecord {
        step: 50,
        layer: 2,
        token_use_fraction: 0.1,
        sequence_use_fraction: 0.2,
        batch_use_fraction: 0.3,
        p50: Some(0.5),
        p65: None,
        p75: Some(0.75),
        p90: Some(0.9),
        config_hash: None,
    };
    let v: serde_json::Value = serde_json::to_value(&r).unwrap();
    for key in ["step", "layer", "token_use", "seq_use", "batch_use", "p50", "p65", "p75", "p90"] {
        assert!(v.get(key).is_some(), "missing {}", key);
    }
    assert!(v["p65"].is_null());
    let back: SparsityRecord = serde_json::from_value(v).unwrap();
    assert_eq!(back, r);
}

// Lifecycle

fn observe(t: &mut NeuronLifecycle, pattern: &[&[bool]]) {
    for (i, a) in pattern.iter().enumerate() {
        t.update(a, i as u64 * 10).unwrap();
    }
}

#[test]
fn lifecycle_steady_on() {
    let mut t = NeuronLifecycle::new(0, 1);
    observe(&mut t, &[&[true], &[true], &[true]]);
    assert!(t.active_first[0] && t.active_final[0]);
    assert!(!t.ever_off_after_on[0] && !t.ever_on_after_off[0]);
    assert_eq!((t.first_step, t.final_step), (Some(0), Some(20)));
}

#[test]
fn lifecycle_transient_death() {
    let mut t = NeuronLifecycle::new(0, 1);
    observe(&mut t, &[&[true], &[false], &[true]]);
    assert!(t.active_first[0] && t.active_final[0]);
    assert!(t.ever_off_after_on[0]);
    assert!(t.ever_on_after_off[0]);
    let c = t.counts();
    assert_eq!((c.turned_on, c.turned_off, c.transient_off), (0, 0, 1));
}

#[test]
fn lifecycle_rejects_bad_input() {
    let mut t = NeuronLifecycle::new(0, 3);
    assert!(t.update(&[true, false], 0).is_err());
    t.update(&[true, false, true], 5).unwrap();
    assert!(t.update(&[true, false, true], 5).is_err());
    assert!(t.update(&[true, false, true], 4).is_err());
}

#[test]
fn lifecycle_table_two_arithmetic() {
    // Layer-0 shape: 97.0% on first, 0.05% turned on, 83.8% turned off.
    let h = 10_000;
    let mut first = vec![false; h];
    let mut last = vec![false; h];
    for u in 0..9_700 {
        first[u] = true;
        last[u] = u >= 8_380;
    }
    for u in 9_700..9_705 {
        last[u] = true;
    }
    let mut t = NeuronLifecycle::new(0, h);
    t.update(&first, 0).unwrap();
    t.update(&last, 100).unwrap();
    let c = t.counts();
    assert!(c.identity_holds());
    assert_eq!(c.percent(c.on_first), 97.0);
    assert_eq!(c.percent(c.turned_on), 0.05);
    assert_eq!(c.percent(c.turned_off), 83.8);
    let fin = c.percent(c.on_final);
    assert!((fin - 13.25).abs() < 1e-9);
    assert_eq!(format!("{:.1}", fin - 1e-9), "13.2");
}

// Summary

fn record(step: u64, layer: usize, token: f64, seq: f64, batch: f64) -> SparsityRecord {
    SparsityRecord {
        step,
        layer,
        token_use_fraction: token,
        sequence_use_fraction: seq,
        batch_use_fraction: batch,
        p50: Some(token),
        p65: Some(seq),
        p75: Some(seq),
        p90: Some(batch),
        config_hash: None,
    }
}

/// Exact Pearson: r^2 as a rational, sign from the exact covariance.
fn oracle_pearson(xs: &[f64], ys: &[f64]) -> Option<f64> {
    let q = |v: f64| BigRational::from_float(v).unwrap();
    let n = BigRational::from_integer(BigInt::from(xs.len()));
    let mx = xs.iter().map(|&v| q(v)).fold(BigRational::zero(), |a, b| a + b) / &n;
    let my = ys.iter().map(|&v| q(v)).fold(BigRational::zero(), |a, b| a + b) / &n;
    let (mut sxy, mut sxx, mut syy) = (BigRational::zero(), BigRational::zero(), BigRational::zero());
    for (&x, &y) in xs.iter().zip(ys) {
        let dx = q(x) - &mx;
        let dy = q(y) - &my;
        sxy += &dx * &dy;
        sxx += &dx * &dx;
        syy += &dy * &dy;
    }
    if sxx.is_zero() || syy.is_zero() {
        return None;
    }
    let r2 = (&sxy * &sxy) / (sxx * syy);
    let r = r2.to_f64().unwrap().sqrt();
    Some(if sxy.is_negative() { -r } else { r })
}

#[test]
fn correlation_degenerate_is_none() {
    let recs: Vec<_> = (0..3).map(|l| record(0, l, 0.1, 0.2, 0.3)).collect();
    assert_eq!(summarize(&recs, &[]).token_batch_correlation, None);
    let one = [record(0, 0, 0.1, 0.2, 0.3)];
    assert_eq!(summarize(&one, &[]).token_batch_correlation, None);
}

#[test]
fn correlation_two_points_opposite() {
    let recs = [record(0, 0, 0.1, 0.5, 0.9), record(0, 1, 0.2, 0.5, 0.8)];
    let r = summarize(&recs, &[]).token_batch_correlation.unwrap();
    assert!((r + 1.0).abs() < 1e-12);
}

#[test]
fn correlation_matches_exact_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    for _ in 0..20 {
        let mut recs = Vec::new();
        for step in 0..40u64 {
            for layer in 0..6 {
                let t: f64 = rng.gen_range(0.0..0.3);
                let b: f64 = rng.gen_range(0.3..1.0);
                recs.push(record(step * 50, layer, t, (t + b) / 2.0, b));
            }
        }
        let s = summarize(&recs, &[]);
        // 40 logged steps: the window is the last 2.
        assert_eq!(s.window, Some((1900, 1950)));
        let xs: Vec<f64> = s.converged.iter().map(|c| c.token_use).collect();
        let ys: Vec<f64> = s.converged.iter().map(|c| c.batch_use).collect();
        let expected = oracle_pearson(&xs, &ys).unwrap();
        assert!((s.token_batch_correlation.unwrap() - expected).abs() <= 1e-9);
    }
}

#[test]
fn converged_values_average_the_window() {
    let mut recs = Vec::new();
    for step in 0..100u64 {
        recs.push(record(step, 0, step as f64 / 1000.0, 0.5, 0.9));
    }
    let s = summarize(&recs, &[]);
    assert_eq!(s.window, Some((95, 99)));
    assert!((s.converged[0].token_use - 0.097).abs() < 1e-12);
    assert_eq!(s.converged[0].samples, 5);
    let row = &s.use_rows[0];
    assert!((row.token_pct - 9.7).abs() < 1e-9);
    assert!((row.seq_batch_ratio - 0.5 / 0.9).abs() < 1e-12);
    assert_eq!(convergence_window(&recs[..1]), vec![0]);
    assert!(convergence_window(&[]).is_empty());
}

#[test]
fn lifecycle_rows_in_summary() {
    let mut t = NeuronLifecycle::new(3, 4);
    t.update(&[true, true, false, false], 0).unwrap();
    t.update(&[true, false, true, false], 50).unwrap();
    let s = summarize(&[], &[t]);
    let row = &s.lifecycle_rows[0];
    assert_eq!(row.layer, 3);
    assert_eq!((row.on_first_pct, row.turned_on_pct, row.turned_off_pct, row.on_final_pct), (50.0, 25.0, 25.0, 50.0));
}

// Properties

fn tap_strategy() -> impl Strategy<Value = (usize, usize, usize, Vec<f32>)> {
    (1usize..=4, 1usize..=16, 1usize..=32).prop_flat_map(|(b, s, h)| {
        let cell = prop_oneof![3 => Just(0.0f32), 1 => 0.001f32..5.0];
        (Just(b), Just(s), Just(h), prop::collection::vec(cell, b * s * h))
    })
}

proptest! {
    #[test]
    fn union_equivalence((b, s, h, data) in tap_strategy()) {
        let t = tap(b, s, h, data.clone());
        prop_assert_eq!(batch_dimensions_used(&t).unwrap(), oracle_batch_union(&data, b, s, h));
    }

    #[test]
    fn chain_inequality((b, s, h, data) in tap_strategy()) {
        let r = measure(0, &tap(b, s, h, data)).unwrap();
        prop_assert!(r.chain_holds(), "{:?}", r);
    }

    #[test]
    fn percentiles_non_decreasing((b, s, h, data) in tap_strategy()) {
        let r = measure(0, &tap(b, s, h, data)).unwrap();
        let ps: Vec<f64> = r.percentile_use().iter().filter_map(|(_, v)| *v).collect();
        prop_assert!(ps.windows(2).all(|w| w[0] <= w[1]));
        prop_assert!(ps.iter().all(|&v| (0.0..=1.0).contains(&v)));
    }

    #[test]
    fn rescaled_percentile_hits_subset_rank(
        tenths in 1usize..=10,
        scale in 1usize..=8,
        pi in 0usize..4,
        seed in any::<u64>(),
    ) {
        let p = [50u32, 65, 75, 90][pi];
        let n = 10 * scale;
        let m = tenths * scale;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let seq = 16;
        let mut counts: Vec<u32> = (0..n).map(|i| if i < m { rng.gen_range(1..=seq as u32) } else { 0 }).collect();
        counts.reverse();
        let block = block_from_counts(&counts, seq);
        let got = percentile_used_dimension_count(&block, n, p as f64).unwrap();
        let (_, rank, subset) = oracle_subset_percentile(&counts, p).unwrap();
        let lo = rank.saturating_sub(2);
        let hi = rank.min(subset.len() - 1);
        prop_assert!(subset[lo..=hi].iter().any(|&c| c as f64 / seq as f64 == got));
    }

    #[test]
    fn lifecycle_identity(h in 1usize..40, steps in 1usize..12, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut t = NeuronLifecycle::new(0, h);
        for i in 0..steps {
            let a: Vec<bool> = (0..h).map(|_| rng.gen_bool(0.5)).collect();
            t.update(&a, i as u64).unwrap();
        }
        let c = t.counts();
        prop_assert!(c.identity_holds());
        prop_assert!(c.transient_off <= c.flipped_off && c.transient_on <= c.flipped_on);
    }

    #[test]
    fn metrics_are_pure((b, s, h, data) in tap_strategy()) {
        let t = tap(b, s, h, data);
        let before = t.clone();
        let a = measure(3, &t).unwrap();
        let again = measure(3, &t).unwrap();
        prop_assert_eq!(a, again);
        prop_assert_eq!(t, before);
    }
}
