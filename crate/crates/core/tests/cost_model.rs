use lsattn_core::attention::{attention_flops, LsLayout};
use lsattn_core::kvsim::{bench_batch_forward, cache_entries, CacheLayout, CachePolicy, HeadCache};
use lsattn_core::lm::{AttentionKind, ModelConfig};

#[test]
fn flop_ratio_is_non_decreasing_in_n() {
    for (s, l, p) in [(5, 1, 100), (1, 1, 3), (3, 2, 16), (7, 1, 0)] {
        let layout = LsLayout::ls(s, l, p.max(1));
        let mut prev = 0.0;
        for n in (1..3000).step_by(7) {
            let r = attention_flops(&layout, n, 32, 32).ratio;
            assert!(r >= prev - 1e-12, "{s},{l},{p} n={n}");
            prev = r;
        }
    }
}

#[test]
fn cache_ratio_tends_to_heads_over_global() {
    let cache = CacheLayout::from_ls(&LsLayout::ls(5, 1, 100), 32, 32);
    for n in [10_100, 20_000, 100_000, 1_000_000] {
        let (_, _, r) = cache_entries(&cache, n);
        assert!((r - 6.0).abs() / 6.0 < 0.05, "n={n} ratio {r}");
    }
    assert_eq!(cache_entries(&cache, 101).2, 1.0);
}

#[test]
fn ring_never_exceeds_capacity_over_long_decode() {
    let mut c = HeadCache::new(CachePolicy::Ring { capacity: 17 }, 2, 2).unwrap();
    let mut peak = 0;
    for t in 0..100_000 {
        c.push(&[t as f64, 0.0], &[0.0, t as f64]).unwrap();
        peak = peak.max(c.len());
    }
    assert_eq!(peak, 17);
}

#[test]
fn ls_without_local_heads_costs_the_same_as_vanilla() {
    let base = ModelConfig {
        n_layers: 1,
        d: 24,
        heads: 3,
        d_ffn: 48,
        vocab: 257,
        seq_len: 64,
        attention: AttentionKind::Vanilla,
        init_std: 0.02,
        seed: 3,
    };
    let ls = ModelConfig {
        attention: AttentionKind::Ls(LsLayout::ls(0, 3, 8)),
        ..base
    };
    let a = bench_batch_forward(&base, 2, 3).unwrap();
    let b = bench_batch_forward(&ls, 2, 3).unwrap();
    assert_eq!(a.flops_ls, b.flops_ls);
    assert_eq!(a.flops_vanilla, b.flops_vanilla);
    assert_eq!(a.cache_entries_ls, b.cache_entries_ls);
}
