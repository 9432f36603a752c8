//! Incremental decoding with per-head KV caches and the cost reports built
//! on top of them.
//!
//! Global heads keep every key and value. Local heads keep a ring of
//! `span + 1` slots, which is exactly the window the causal local mask
//! allows, so decoding never needs to look further back.

use std::io::Write;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::attention::kernel::online_softmax_row;
use crate::attention::qknorm::normalize_rows;
use crate::attention::{attention_flops, mhsa_forward_with, Kernel, LsLayout, MultiHeadWeights};
use crate::error::{shape, Error, Result};
use crate::lm::{init_params, lm_forward_with, AttentionKind, ModelConfig};
use crate::matrix::{matmul, Matrix};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CachePolicy {
    /// Append-only.
    Full,
    /// Overwrites the oldest slot once `capacity` entries are held.
    Ring { capacity: usize },
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CacheLayout {
    pub policies: Vec<CachePolicy>,
    pub d_k: usize,
    pub d_v: usize,
}

impl CacheLayout {
    /// Local heads get a ring of `local_span + 1`, global heads a full cache.
    pub fn from_ls(layout: &LsLayout, d_k: usize, d_v: usize) -> Self {
        let policies = (0..layout.heads())
            .map(|h| {
                if layout.is_local(h) {
                    CachePolicy::Ring {
                        capacity: layout.local_span + 1,
                    }
                } else {
                    CachePolicy::Full
                }
            })
            .collect();
        Self { policies, d_k, d_v }
    }

    /// Every head full.
    pub fn vanilla(heads: usize, d_k: usize, d_v: usize) -> Self {
        Self {
            policies: vec![CachePolicy::Full; heads],
            d_k,
            d_v,
        }
    }

    /// Scalars held after `n` tokens.
    pub fn entries(&self, n: usize) -> u64 {
        let width = (self.d_k + self.d_v) as u64;
        self.policies
            .iter()
            .map(|p| match *p {
                CachePolicy::Full => n as u64 * width,
                CachePolicy::Ring { capacity } => n.min(capacity) as u64 * width,
            })
            .sum()
    }
}

/// Returns `(ls_entries, vanilla_entries, vanilla / ls)` after `n` tokens.
pub fn cache_entries(layout: &CacheLayout, n: usize) -> (u64, u64, f64) {
    let ls = layout.entries(n);
    let vanilla = CacheLayout::vanilla(layout.policies.len(), layout.d_k, layout.d_v).entries(n);
    (ls, vanilla, vanilla as f64 / ls as f64)
}

/// Keys and values of one head.
#[derive(Clone, Debug)]
pub struct HeadCache {
    policy: CachePolicy,
    d_k: usize,
    d_v: usize,
    keys: Vec<f64>,
    values: Vec<f64>,
    /// Tokens pushed so far.
    seen: usize,
}

impl HeadCache {
    pub fn new(policy: CachePolicy, d_k: usize, d_v: usize) -> Result<Self> {
        if let CachePolicy::Ring { capacity: 0 } = policy {
            return Err(Error::InvalidArgument(
                "ring capacity must be at least 1".into(),
            ));
        }
        Ok(Self {
            policy,
            d_k,
            d_v,
            keys: Vec::new(),
            values: Vec::new(),
            seen: 0,
        })
    }

    /// Entries currently held.
    pub fn len(&self) -> usize {
        self.keys.len() / self.d_k.max(1)
    }

    pub fn is_empty(&self) -> bool {
        self.seen == 0
    }

    pub fn tokens_seen(&self) -> usize {
        self.seen
    }

    pub fn push(&mut self, k: &[f64], v: &[f64]) -> Result<()> {
        if k.len() != self.d_k || v.len() != self.d_v {
            return Err(shape(
                "HeadCache::push",
                format!(
                    "k/v widths {}/{} vs {}/{}",
                    k.len(),
                    v.len(),
                    self.d_k,
                    self.d_v
                ),
            ));
        }
        match self.policy {
            CachePolicy::Ring { capacity } if self.seen >= capacity => {
                let slot = self.seen % capacity;
                self.keys[slot * self.d_k..(slot + 1) * self.d_k].copy_from_slice(k);
                self.values[slot * self.d_v..(slot + 1) * self.d_v].copy_from_slice(v);
            }
            _ => {
                self.keys.extend_from_slice(k);
                self.values.extend_from_slice(v);
            }
        }
        self.seen += 1;
        Ok(())
    }

    /// Held `(key, value)` rows, oldest first.
    pub fn iter(&self) -> impl Iterator<Item = (&[f64], &[f64])> {
        let len = self.len();
        let start = match self.policy {
            CachePolicy::Ring { capacity } if self.seen > capacity => self.seen % capacity,
            _ => 0,
        };
        (0..len).map(move |i| {
            let s = (start + i) % len;
            (
                &self.keys[s * self.d_k..(s + 1) * self.d_k],
                &self.values[s * self.d_v..(s + 1) * self.d_v],
            )
        })
    }
}

/// One head's new query, key and value rows.
#[derive(Clone, Copy, Debug)]
pub struct HeadRow<'a> {
    pub q: &'a [f64],
    pub k: &'a [f64],
    pub v: &'a [f64],
}

/// Appends each head's key and value, then attends its query over the cache.
/// Returns one output row per head.
pub fn decode_step(
    caches: &mut [HeadCache],
    rows: &[HeadRow<'_>],
    scale: f64,
) -> Result<Vec<Vec<f64>>> {
    if caches.len() != rows.len() {
        return Err(shape(
            "decode_step",
            format!("{} caches for {} heads", caches.len(), rows.len()),
        ));
    }
    if !(scale > 0.0 && scale.is_finite()) {
        return Err(Error::InvalidArgument(format!("scale {scale}")));
    }
    let mut outs = Vec::with_capacity(rows.len());
    for (cache, row) in caches.iter_mut().zip(rows) {
        if row.q.len() != cache.d_k {
            return Err(shape(
                "decode_step",
                format!(
                    "query width {} vs cache key width {}",
                    row.q.len(),
                    cache.d_k
                ),
            ));
        }
        cache.push(row.k, row.v)?;
        let mut out = vec![0.0; cache.d_v];
        online_softmax_row(row.q, cache.iter(), scale, &mut out);
        outs.push(out);
    }
    Ok(outs)
}

/// Token-by-token decoder for one multi-head attention layer.
pub struct MhsaDecoder<'w> {
    weights: &'w MultiHeadWeights,
    layout: LsLayout,
    scale: f64,
    caches: Vec<HeadCache>,
}

impl<'w> MhsaDecoder<'w> {
    pub fn new(weights: &'w MultiHeadWeights, layout: LsLayout, scale: f64) -> Result<Self> {
        let (_, d_k, d_v) = weights.dims()?;
        layout.check_heads(weights.num_heads())?;
        let cl = CacheLayout::from_ls(&layout, d_k, d_v);
        let caches = cl
            .policies
            .iter()
            .map(|&p| HeadCache::new(p, d_k, d_v))
            .collect::<Result<_>>()?;
        Ok(Self {
            weights,
            layout,
            scale,
            caches,
        })
    }

    pub fn caches(&self) -> &[HeadCache] {
        &self.caches
    }

    /// Output row for the next token given its input row.
    pub fn step(&mut self, x: &[f64]) -> Result<Vec<f64>> {
        let (d, _, _) = self.weights.dims()?;
        if x.len() != d {
            return Err(shape(
                "MhsaDecoder::step",
                format!("input width {} vs {d}", x.len()),
            ));
        }
        let xm = Matrix::from_vec(1, d, x.to_vec())?;
        let mut qkv = Vec::with_capacity(self.caches.len());
        for (h, hw) in self.weights.heads.iter().enumerate() {
            let mut q = matmul(&xm, &hw.w_q)?;
            let mut k = matmul(&xm, &hw.w_k)?;
            if self.layout.qk_norm {
                let g = self.weights.qk_gain.get(0, h);
                q = normalize_rows(&q, g)?;
                k = normalize_rows(&k, g)?;
            }
            qkv.push((q, k, matmul(&xm, &hw.w_v)?));
        }
        let rows: Vec<HeadRow<'_>> = qkv
            .iter()
            .map(|(q, k, v)| HeadRow {
                q: q.as_slice(),
                k: k.as_slice(),
                v: v.as_slice(),
            })
            .collect();
        let heads = decode_step(&mut self.caches, &rows, self.scale)?;
        let concat = Matrix::from_vec(1, heads.iter().map(Vec::len).sum(), heads.concat())?;
        Ok(matmul(&concat, &self.weights.w_o)?.into_vec())
    }
}

/// Cost of one model configuration at one sequence length.
#[derive(Clone, Debug, PartialEq)]
pub struct CostReport {
    pub n: usize,
    pub layout: String,
    pub flops_ls: u64,
    pub flops_vanilla: u64,
    pub cache_entries_ls: u64,
    pub cache_entries_vanilla: u64,
    /// Median wall time per sequence.
    pub wall_ms: Option<f64>,
}

impl CostReport {
    pub fn flop_ratio(&self) -> f64 {
        self.flops_vanilla as f64 / self.flops_ls as f64
    }

    pub fn cache_ratio(&self) -> f64 {
        self.cache_entries_vanilla as f64 / self.cache_entries_ls as f64
    }
}

pub const COST_CSV_HEADER: &str =
    "n,layout,flops_ls,flops_vanilla,cache_ls,cache_vanilla,wall_ms_median";

pub fn layout_label(kind: &AttentionKind) -> String {
    match kind {
        AttentionKind::Vanilla => "vanilla".into(),
        AttentionKind::QkNorm => "qk_norm".into(),
        AttentionKind::Ls(l) => format!("ls-s{}-l{}-p{}", l.n_local, l.n_global, l.local_span),
    }
}

/// Deterministic counts for `model` at its sequence length, summed over layers.
pub fn cost_model(model: &ModelConfig) -> CostReport {
    let n = model.seq_len;
    let layout = model.layout();
    let dk = model.head_dim();
    let layers = model.n_layers as u64;
    let f = attention_flops(&layout, n, dk, dk);
    let (cache_ls, cache_vanilla, _) = cache_entries(&CacheLayout::from_ls(&layout, dk, dk), n);
    CostReport {
        n,
        layout: layout_label(&model.attention),
        flops_ls: f.ls_flops * layers,
        flops_vanilla: f.vanilla_flops * layers,
        cache_entries_ls: cache_ls * layers,
        cache_entries_vanilla: cache_vanilla * layers,
        wall_ms: None,
    }
}

/// Times the streaming forward pass over `batch` random sequences of the
/// model's full length. One untimed warmup pass precedes `repeats` timed ones.
pub fn bench_batch_forward(
    model: &ModelConfig,
    batch: usize,
    repeats: usize,
) -> Result<CostReport> {
    Ok(bench_interleaved(std::slice::from_ref(model), batch, repeats)?.remove(0))
}

/// [`bench_batch_forward`] for several models with their timed repeats
/// interleaved, so slow drift in machine load hits every model alike.
pub fn bench_interleaved(
    models: &[ModelConfig],
    batch: usize,
    repeats: usize,
) -> Result<Vec<CostReport>> {
    if repeats < 3 {
        return Err(Error::InvalidArgument(format!(
            "repeats {repeats} must be at least 3"
        )));
    }
    if batch == 0 {
        return Err(Error::InvalidArgument("batch must be positive".into()));
    }
    let mut setups = Vec::with_capacity(models.len());
    for model in models {
        let params = init_params(model)?;
        let mut rng = ChaCha8Rng::seed_from_u64(model.seed);
        let seqs: Vec<Vec<usize>> = (0..batch)
            .map(|_| {
                (0..model.seq_len)
                    .map(|_| rng.gen_range(0..model.vocab.min(256)))
                    .collect()
            })
            .collect();
        lm_forward_with(&params, &seqs, Kernel::Streaming)?;
        setups.push((params, seqs));
    }
    let mut times = vec![Vec::with_capacity(repeats); models.len()];
    for _ in 0..repeats {
        for ((params, seqs), t) in setups.iter().zip(&mut times) {
            let start = Instant::now();
            let out = lm_forward_with(params, seqs, Kernel::Streaming)?;
            t.push(start.elapsed().as_secs_f64() * 1e3 / batch as f64);
            std::hint::black_box(out);
        }
    }
    Ok(models
        .iter()
        .zip(times)
        .map(|(model, mut t)| {
            t.sort_by(f64::total_cmp);
            let mut report = cost_model(model);
            report.wall_ms = Some(t[t.len() / 2]);
            report
        })
        .collect())
}

/// Single attention layer forward, exposed for kernel timing.
pub fn bench_mhsa_forward(
    x: &Matrix,
    w: &MultiHeadWeights,
    layout: &LsLayout,
    scale: f64,
) -> Result<Matrix> {
    Ok(mhsa_forward_with(x, w, layout, scale, Kernel::Streaming)?.0)
}

pub fn write_cost_csv<W: Write>(mut w: W, reports: &[CostReport]) -> Result<()> {
    writeln!(w, "{COST_CSV_HEADER}")?;
    for r in reports {
        let wall = r.wall_ms.map(|x| format!("{x:.6}")).unwrap_or_default();
        writeln!(
            w,
            "{},{},{},{},{},{},{}",
            r.n,
            r.layout,
            r.flops_ls,
            r.flops_vanilla,
            r.cache_entries_ls,
            r.cache_entries_vanilla,
            wall
        )?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attention::mhsa_forward;

    #[test]
    fn first_step_returns_v0() {
        for policy in [
            CachePolicy::Full,
            CachePolicy::Ring { capacity: 1 },
            CachePolicy::Ring { capacity: 4 },
        ] {
            let mut caches = vec![HeadCache::new(policy, 2, 3).unwrap()];
            let v = [0.3, -1.0, 2.0];
            let out = decode_step(
                &mut caches,
                &[HeadRow {
                    q: &[1.0, 5.0],
                    k: &[-2.0, 0.5],
                    v: &v,
                }],
                1.0,
            )
            .unwrap();
            assert_eq!(out[0], v);
        }
    }

    #[test]
    fn ring_holds_min_t_c() {
        let c = 5;
        let mut cache = HeadCache::new(CachePolicy::Ring { capacity: c }, 1, 1).unwrap();
        let mut peak = 0;
        for t in 1..=1000 {
            cache.push(&[t as f64], &[t as f64]).unwrap();
            assert_eq!(cache.len(), t.min(c));
            peak = peak.max(cache.len());
        }
        assert_eq!(peak, c);
        let held: Vec<f64> = cache.iter().map(|(k, _)| k[0]).collect();
        assert_eq!(held, vec![996.0, 997.0, 998.0, 999.0, 1000.0]);
        assert!(HeadCache::new(CachePolicy::Ring { capacity: 0 }, 1, 1).is_err());
    }

    #[test]
    fn width_mismatch_is_an_error() {
        let mut caches = vec![HeadCache::new(CachePolicy::Full, 2, 2).unwrap()];
        let bad = decode_step(
            &mut caches,
            &[HeadRow {
                q: &[1.0],
                k: &[1.0, 2.0],
                v: &[0.0, 0.0],
            }],
            1.0,
        );
        assert!(matches!(bad, Err(Error::ShapeMismatch { .. })));
    }

    #[test]
    fn decode_matches_full_forward_n12() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let n = 12;
        let layout = LsLayout::ls(2, 1, 3).with_qk_norm(true);
        let w = MultiHeadWeights::random(6, 3, 4, 2, 0.6, &mut rng);
        let x = Matrix::randn(n, 6, 1.0, &mut rng);
        let (full, _) = mhsa_forward(&x, &w, &layout, 2.0).unwrap();
        let mut dec = MhsaDecoder::new(&w, layout, 2.0).unwrap();
        for t in 0..n {
            let y = dec.step(x.row(t)).unwrap();
            for (a, b) in y.iter().zip(full.row(t)) {
                assert!((a - b).abs() < 1e-10);
            }
        }
        assert_eq!(dec.caches()[0].len(), 4);
        assert_eq!(dec.caches()[2].len(), 12);
    }

    #[test]
    fn cache_entry_examples() {
        let local = CacheLayout {
            policies: vec![CachePolicy::Ring { capacity: 101 }],
            d_k: 32,
            d_v: 32,
        };
        assert_eq!(local.entries(8192), 6464);
        let ls = CacheLayout::from_ls(&LsLayout::ls(5, 1, 100), 32, 32);
        for n in [1, 50, 101] {
            assert_eq!(cache_entries(&ls, n).2, 1.0);
        }
        let (_, _, r) = cache_entries(&ls, 100 * 101);
        assert!((r - 6.0).abs() / 6.0 < 0.05, "{r}");
        let (_, _, far) = cache_entries(&ls, 10_000_000);
        assert!((far - 6.0).abs() < 1e-3);
    }

    #[test]
    fn csv_layout() {
        let model = ModelConfig {
            n_layers: 2,
            d: 12,
            heads: 3,
            d_ffn: 24,
            vocab: 257,
            seq_len: 16,
            attention: AttentionKind::Ls(LsLayout::ls(2, 1, 3)),
            init_std: 0.02,
            seed: 0,
        };
        let r = bench_batch_forward(&model, 2, 3).unwrap();
        assert!(r.wall_ms.unwrap() > 0.0);
        let mut buf = Vec::new();
        write_cost_csv(&mut buf, std::slice::from_ref(&r)).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let mut lines = text.lines();
        assert_eq!(lines.next(), Some(COST_CSV_HEADER));
        assert!(lines
            .next()
            .unwrap()
            .starts_with(&format!("16,ls-s2-l1-p3,{},", r.flops_ls)));
        assert!(bench_batch_forward(&model, 2, 2).is_err());
    }
}
