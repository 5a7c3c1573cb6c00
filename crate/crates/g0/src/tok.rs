//! Invertible action-chunk codec: per-dim quantile normalization, an
//! orthonormal cosine transform over time, coefficient quantization, and
//! byte-pair merging over the quantized symbol stream. Encoding is
//! deterministic; decoding inverts merging and quantization exactly up to the
//! quantization rounding, then clamps to [-1, 1].
//!
//! The normalizer folds in a 1/sqrt(H) factor so every transform coefficient
//! of a [-1, 1] signal fits the fixed quantizer range; decode multiplies it
//! back out, so the pair stays exactly inverse.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"G0TK";
const VERSION: u32 = 1;
/// Quantized coefficients clamp to [-QMAX, QMAX].
const QMAX: i32 = 128;
/// Base alphabet: one symbol per quantizer level.
pub const BASE_SYMBOLS: usize = (2 * QMAX + 1) as usize;
/// Minimum chunks required to fit.
pub const MIN_FIT_CHUNKS: usize = 1000;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenizerConfig {
    pub chunk_horizon: usize,
    pub action_dim: usize,
    pub quant_scale: f64,
    pub dct_keep: usize,
    pub bpe_vocab: usize,
}

impl TokenizerConfig {
    pub fn from_config(cfg: &crate::cfg::Config, action_dim: usize) -> Result<TokenizerConfig> {
        let t = cfg.require_section("tokenizer")?;
        let out = TokenizerConfig {
            chunk_horizon: t.usize_or("horizon", 16)?,
            action_dim,
            quant_scale: t.f64_or("quant_scale", 64.0)?,
            dct_keep: t.usize_or("dct_keep", 8)?,
            bpe_vocab: t.usize_or("bpe_vocab", 512)?,
        };
        out.validate()?;
        Ok(out)
    }

    pub fn validate(&self) -> Result<()> {
        if self.dct_keep > self.chunk_horizon {
            return Err(Error::contract("dct_keep must not exceed the chunk horizon"));
        }
        if self.bpe_vocab <= BASE_SYMBOLS {
            return Err(Error::contract(format!(
                "bpe_vocab {} must exceed the {BASE_SYMBOLS} base symbols",
                self.bpe_vocab
            )));
        }
        if self.quant_scale <= 0.0 {
            return Err(Error::contract("quant_scale must be positive"));
        }
        Ok(())
    }

    /// Pre-merge symbol count per chunk.
    pub fn raw_symbols(&self) -> usize {
        self.dct_keep * self.action_dim
    }
}

/// Fitted codec. Immutable after fit; encode/decode are pure.
#[derive(Debug, Clone, PartialEq)]
pub struct Tokenizer {
    pub config: TokenizerConfig,
    /// Per-dim (1st percentile, 99th percentile).
    pub norm_stats: Vec<(f32, f32)>,
    /// (left, right, new) in creation order.
    pub merges: Vec<(u16, u16, u16)>,
    /// Fit-time notes (degenerate dims and the like).
    pub warnings: Vec<String>,
    /// Derived: token id -> base symbol expansion.
    expansions: Vec<Vec<u16>>,
}

impl Tokenizer {
    pub fn vocab_size(&self) -> usize {
        BASE_SYMBOLS + self.merges.len()
    }

    /// Number of base symbols a token expands to.
    pub fn expansion_len(&self, token: u16) -> Option<usize> {
        self.expansions.get(token as usize).map(|e| e.len())
    }

    /// Learn normalization quantiles and the merge table from sample chunks
    /// (each `chunk_horizon * action_dim`, row-major over time).
    pub fn fit(chunks: &[Vec<f32>], config: TokenizerConfig) -> Result<Tokenizer> {
        config.validate()?;
        if chunks.len() < MIN_FIT_CHUNKS {
            return Err(Error::contract(format!(
                "tokenizer fit needs at least {MIN_FIT_CHUNKS} chunks, got {}",
                chunks.len()
            )));
        }
        let h = config.chunk_horizon;
        let d = config.action_dim;
        for (i, c) in chunks.iter().enumerate() {
            if c.len() != h * d {
                return Err(Error::contract(format!(
                    "fit chunk {i} has {} entries, expected {}",
                    c.len(),
                    h * d
                )));
            }
        }
        let mut warnings = Vec::new();
        let mut norm_stats = Vec::with_capacity(d);
        let mut column = Vec::with_capacity(chunks.len() * h);
        for dim in 0..d {
            column.clear();
            for c in chunks {
                for t in 0..h {
                    column.push(c[t * d + dim]);
                }
            }
            column.sort_by(|a, b| a.partial_cmp(b).unwrap());
            let pick = |p: f64| -> f32 {
                let idx = ((column.len() - 1) as f64 * p).round() as usize;
                column[idx]
            };
            let (q1, q99) = (pick(0.01), pick(0.99));
            if (q99 - q1) < 1e-6 {
                warnings.push(format!(
                    "dim {dim} is degenerate (q1 == q99 == {q1}); normalized to 0 with unit scale"
                ));
            }
            norm_stats.push((q1, q99));
        }

        let mut tok = Tokenizer {
            config,
            norm_stats,
            merges: Vec::new(),
            warnings,
            expansions: Vec::new(),
        };
        tok.rebuild_expansions();

        // Byte-pair merges over the quantized symbol streams.
        let mut seqs: Vec<Vec<u16>> = chunks.iter().map(|c| tok.base_symbols(c)).collect();
        let max_merges = tok.config.bpe_vocab - BASE_SYMBOLS;
        for _ in 0..max_merges {
            let mut counts: std::collections::BTreeMap<(u16, u16), u32> =
                std::collections::BTreeMap::new();
            for s in &seqs {
                for w in s.windows(2) {
                    *counts.entry((w[0], w[1])).or_insert(0) += 1;
                }
            }
            // Highest count; ties break toward the smallest pair for
            // determinism (BTreeMap iterates in key order).
            let mut best: Option<((u16, u16), u32)> = None;
            for (pair, count) in counts {
                match best {
                    Some((_, c)) if c >= count => {}
                    _ => best = Some((pair, count)),
                }
            }
            let Some((pair, count)) = best else { break };
            if count < 2 {
                break;
            }
            let new_id = (BASE_SYMBOLS + tok.merges.len()) as u16;
            tok.merges.push((pair.0, pair.1, new_id));
            for s in seqs.iter_mut() {
                merge_in_place(s, pair.0, pair.1, new_id);
            }
        }
        tok.rebuild_expansions();
        Ok(tok)
    }

    fn rebuild_expansions(&mut self) {
        let mut exp: Vec<Vec<u16>> = (0..BASE_SYMBOLS as u16).map(|i| vec![i]).collect();
        for (l, r, id) in &self.merges {
            debug_assert_eq!(*id as usize, exp.len());
            let mut e = exp[*l as usize].clone();
            e.extend_from_slice(&exp[*r as usize]);
            exp.push(e);
        }
        self.expansions = exp;
    }

    fn normalize(&self, x: f32, dim: usize) -> f64 {
        let (q1, q99) = self.norm_stats[dim];
        let scale_h = (self.config.chunk_horizon as f64).sqrt();
        let span = (q99 - q1) as f64;
        if span < 1e-6 {
            (x - q1) as f64 / scale_h
        } else {
            let unit = 2.0 * (x - q1) as f64 / span - 1.0;
            unit / scale_h
        }
    }

    fn denormalize(&self, y: f64, dim: usize) -> f32 {
        let (q1, q99) = self.norm_stats[dim];
        let scale_h = (self.config.chunk_horizon as f64).sqrt();
        let span = (q99 - q1) as f64;
        let v = if span < 1e-6 {
            y * scale_h + q1 as f64
        } else {
            let unit = y * scale_h;
            (unit + 1.0) * span / 2.0 + q1 as f64
        };
        v as f32
    }

    /// Quantized transform symbols, interleaved frequency-major,
    /// dimension-minor.
    fn base_symbols(&self, chunk: &[f32]) -> Vec<u16> {
        let h = self.config.chunk_horizon;
        let d = self.config.action_dim;
        let keep = self.config.dct_keep;
        let mut per_dim = vec![vec![0.0f64; h]; d];
        let mut signal = vec![0.0f64; h];
        for (dim, coeffs) in per_dim.iter_mut().enumerate() {
            for t in 0..h {
                signal[t] = self.normalize(chunk[t * d + dim], dim);
            }
            *coeffs = dct_forward(&signal);
        }
        let mut out = Vec::with_capacity(keep * d);
        for f in 0..keep {
            for coeffs in per_dim.iter() {
                let q = (coeffs[f] * self.config.quant_scale).round() as i32;
                let q = q.clamp(-QMAX, QMAX);
                out.push((q + QMAX) as u16);
            }
        }
        out
    }

    pub fn encode(&self, chunk: &[f32]) -> Result<Vec<u16>> {
        let expect = self.config.chunk_horizon * self.config.action_dim;
        if chunk.len() != expect {
            return Err(Error::contract(format!(
                "encode: chunk has {} entries, expected {expect}",
                chunk.len()
            )));
        }
        let mut seq = self.base_symbols(chunk);
        for (l, r, id) in &self.merges {
            merge_in_place(&mut seq, *l, *r, *id);
        }
        Ok(seq)
    }

    pub fn decode(&self, tokens: &[u16]) -> Result<Vec<f32>> {
        let vocab = self.vocab_size() as u16;
        let mut base = Vec::new();
        for t in tokens {
            if *t >= vocab {
                return Err(Error::contract(format!(
                    "decode: token {t} outside vocabulary of {vocab}"
                )));
            }
            base.extend_from_slice(&self.expansions[*t as usize]);
        }
        let h = self.config.chunk_horizon;
        let d = self.config.action_dim;
        let keep = self.config.dct_keep;
        let expect = keep * d;
        if base.len() != expect {
            return Err(Error::contract(format!(
                "decode: sequence expands to {} symbols, expected exactly {expect}",
                base.len()
            )));
        }
        let mut out = vec![0.0f32; h * d];
        let mut coeffs = vec![0.0f64; h];
        for dim in 0..d {
            for c in coeffs.iter_mut() {
                *c = 0.0;
            }
            for (f, c) in coeffs.iter_mut().enumerate().take(keep) {
                let sym = base[f * d + dim] as i32 - QMAX;
                *c = sym as f64 / self.config.quant_scale;
            }
            let signal = dct_inverse(&coeffs);
            for t in 0..h {
                out[t * d + dim] = self.denormalize(signal[t], dim).clamp(-1.0, 1.0);
            }
        }
        Ok(out)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut buf = Vec::new();
        buf.extend_from_slice(MAGIC);
        buf.extend_from_slice(&VERSION.to_le_bytes());
        buf.extend_from_slice(&(self.config.chunk_horizon as u32).to_le_bytes());
        buf.extend_from_slice(&(self.config.action_dim as u32).to_le_bytes());
        buf.extend_from_slice(&(self.config.quant_scale as f32).to_le_bytes());
        buf.extend_from_slice(&(self.config.dct_keep as u32).to_le_bytes());
        buf.extend_from_slice(&(self.config.bpe_vocab as u32).to_le_bytes());
        for (q1, q99) in &self.norm_stats {
            buf.extend_from_slice(&q1.to_le_bytes());
            buf.extend_from_slice(&q99.to_le_bytes());
        }
        buf.extend_from_slice(&(self.merges.len() as u32).to_le_bytes());
        for (l, r, id) in &self.merges {
            buf.extend_from_slice(&l.to_le_bytes());
            buf.extend_from_slice(&r.to_le_bytes());
            buf.extend_from_slice(&id.to_le_bytes());
        }
        fs::File::create(path)
            .and_then(|mut f| f.write_all(&buf))
            .map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Tokenizer> {
        let mut data = Vec::new();
        fs::File::open(path)
            .map_err(|e| Error::io(path, e))?
            .read_to_end(&mut data)
            .map_err(|e| Error::io(path, e))?;
        let need = |pos: usize, n: usize| -> Result<&[u8]> {
            data.get(pos..pos + n)
                .ok_or_else(|| Error::format(path, pos as u64, "truncated"))
        };
        if need(0, 4)? != MAGIC {
            return Err(Error::format(path, 0, "bad magic, expected G0TK"));
        }
        let ver = u32::from_le_bytes(need(4, 4)?.try_into().unwrap());
        if ver != VERSION {
            return Err(Error::format(path, 4, format!("unsupported version {ver}")));
        }
        let mut pos = 8;
        let u32_at = |p: &mut usize| -> Result<u32> {
            let v = u32::from_le_bytes(need(*p, 4)?.try_into().unwrap());
            *p += 4;
            Ok(v)
        };
        let h = u32_at(&mut pos)? as usize;
        let d = u32_at(&mut pos)? as usize;
        let quant_scale = f32::from_le_bytes(need(pos, 4)?.try_into().unwrap()) as f64;
        pos += 4;
        let dct_keep = u32_at(&mut pos)? as usize;
        let bpe_vocab = u32_at(&mut pos)? as usize;
        let mut norm_stats = Vec::with_capacity(d);
        for _ in 0..d {
            let q1 = f32::from_le_bytes(need(pos, 4)?.try_into().unwrap());
            let q99 = f32::from_le_bytes(need(pos + 4, 4)?.try_into().unwrap());
            pos += 8;
            norm_stats.push((q1, q99));
        }
        let n_merges = u32_at(&mut pos)? as usize;
        let mut merges = Vec::with_capacity(n_merges);
        for _ in 0..n_merges {
            let l = u16::from_le_bytes(need(pos, 2)?.try_into().unwrap());
            let r = u16::from_le_bytes(need(pos + 2, 2)?.try_into().unwrap());
            let id = u16::from_le_bytes(need(pos + 4, 2)?.try_into().unwrap());
            pos += 6;
            merges.push((l, r, id));
        }
        let config = TokenizerConfig {
            chunk_horizon: h,
            action_dim: d,
            quant_scale,
            dct_keep,
            bpe_vocab,
        };
        config.validate()?;
        let mut tok = Tokenizer {
            config,
            norm_stats,
            merges,
            warnings: Vec::new(),
            expansions: Vec::new(),
        };
        tok.rebuild_expansions();
        Ok(tok)
    }
}

fn merge_in_place(seq: &mut Vec<u16>, l: u16, r: u16, id: u16) {
    let mut write = 0usize;
    let mut read = 0usize;
    while read < seq.len() {
        if read + 1 < seq.len() && seq[read] == l && seq[read + 1] == r {
            seq[write] = id;
            read += 2;
        } else {
            seq[write] = seq[read];
            read += 1;
        }
        write += 1;
    }
    seq.truncate(write);
}

/// Orthonormal DCT-II.
pub(crate) fn dct_forward(x: &[f64]) -> Vec<f64> {
    let h = x.len();
    let mut out = vec![0.0f64; h];
    for (k, o) in out.iter_mut().enumerate() {
        let mut acc = 0.0;
        for (n, v) in x.iter().enumerate() {
            acc += v * (std::f64::consts::PI * (2.0 * n as f64 + 1.0) * k as f64 / (2.0 * h as f64)).cos();
        }
        let s = if k == 0 {
            (1.0 / h as f64).sqrt()
        } else {
            (2.0 / h as f64).sqrt()
        };
        *o = s * acc;
    }
    out
}

/// Inverse of `dct_forward` (orthonormal DCT-III).
pub(crate) fn dct_inverse(coeffs: &[f64]) -> Vec<f64> {
    let h = coeffs.len();
    let mut out = vec![0.0f64; h];
    for (n, o) in out.iter_mut().enumerate() {
        let mut acc = 0.0;
        for (k, c) in coeffs.iter().enumerate() {
            let s = if k == 0 {
                (1.0 / h as f64).sqrt()
            } else {
                (2.0 / h as f64).sqrt()
            };
            acc += s * c * (std::f64::consts::PI * (2.0 * n as f64 + 1.0) * k as f64 / (2.0 * h as f64)).cos();
        }
        *o = acc;
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand_chacha::rand_core::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn test_config(d: usize) -> TokenizerConfig {
        TokenizerConfig {
            chunk_horizon: 16,
            action_dim: d,
            quant_scale: 64.0,
            dct_keep: 8,
            bpe_vocab: 512,
        }
    }

    /// Smooth pseudo-expert chunks: sum of low-frequency ramps.
    pub(crate) fn smooth_chunks(n: usize, d: usize, seed: u64) -> Vec<Vec<f32>> {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let h = 16;
        (0..n)
            .map(|_| {
                let mut c = vec![0.0f32; h * d];
                for dim in 0..d {
                    let a: f64 = rng.gen_range(-1.0..1.0);
                    let b: f64 = rng.gen_range(-1.0..1.0);
                    let phase: f64 = rng.gen_range(0.0..std::f64::consts::PI);
                    for t in 0..h {
                        let x = t as f64 / h as f64;
                        let v = a * (1.0 - x) + b * x + 0.2 * (2.0 * x + phase).sin();
                        c[t * d + dim] = (v as f32).clamp(-1.0, 1.0);
                    }
                }
                c
            })
            .collect()
    }

    #[test]
    fn dct_round_trips() {
        let x: Vec<f64> = (0..16).map(|i| (i as f64 * 0.3).sin()).collect();
        let back = dct_inverse(&dct_forward(&x));
        for (a, b) in x.iter().zip(&back) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn constant_signal_has_dc_only() {
        let x = vec![0.4f64; 16];
        let c = dct_forward(&x);
        assert!(c[0].abs() > 1e-9);
        for v in &c[1..] {
            assert!(v.abs() < 1e-12, "non-DC coefficient {v}");
        }
    }

    #[test]
    fn fit_needs_enough_chunks() {
        let chunks = smooth_chunks(10, 3, 0);
        assert!(Tokenizer::fit(&chunks, test_config(3)).is_err());
    }

    #[test]
    fn zero_chunks_fit_with_warnings_and_decode_exactly() {
        let chunks: Vec<Vec<f32>> = (0..1000).map(|_| vec![0.0f32; 16 * 3]).collect();
        let tok = Tokenizer::fit(&chunks, test_config(3)).unwrap();
        assert_eq!(tok.warnings.len(), 3, "all dims degenerate");
        let toks = tok.encode(&chunks[0]).unwrap();
        assert!(toks.len() < tok.config.raw_symbols(), "merging compresses");
        let back = tok.decode(&toks).unwrap();
        assert_eq!(back, chunks[0]);
    }

    #[test]
    fn vocabulary_respects_cap() {
        let chunks = smooth_chunks(1200, 3, 1);
        let tok = Tokenizer::fit(&chunks, test_config(3)).unwrap();
        assert!(tok.vocab_size() <= tok.config.bpe_vocab);
    }

    #[test]
    fn merges_shorten_sequences_on_fit_sample() {
        let chunks = smooth_chunks(1200, 3, 2);
        let tok = Tokenizer::fit(&chunks, test_config(3)).unwrap();
        let raw = tok.config.raw_symbols() as f64;
        let mean: f64 = chunks
            .iter()
            .map(|c| tok.encode(c).unwrap().len() as f64)
            .sum::<f64>()
            / chunks.len() as f64;
        assert!(mean < raw, "mean tokens {mean} must beat no-merge {raw}");
    }

    #[test]
    fn encode_is_deterministic_and_round_trip_is_tight() {
        let chunks = smooth_chunks(1200, 4, 3);
        let tok = Tokenizer::fit(&chunks, test_config(4)).unwrap();
        let a = tok.encode(&chunks[7]).unwrap();
        let b = tok.encode(&chunks[7]).unwrap();
        assert_eq!(a, b);
        let mut worst = 0.0f64;
        for c in chunks.iter().take(200) {
            let back = tok.decode(&tok.encode(c).unwrap()).unwrap();
            let mse: f64 = c
                .iter()
                .zip(&back)
                .map(|(x, y)| ((x - y) as f64).powi(2))
                .sum::<f64>()
                / c.len() as f64;
            worst = worst.max(mse.sqrt());
        }
        assert!(worst < 0.2, "round-trip rmse {worst}");
    }

    #[test]
    fn decode_rejects_bad_input() {
        let chunks = smooth_chunks(1000, 2, 4);
        let tok = Tokenizer::fit(&chunks, test_config(2)).unwrap();
        let oov = vec![tok.vocab_size() as u16];
        assert!(tok.decode(&oov).is_err());
        let mut toks = tok.encode(&chunks[0]).unwrap();
        toks.pop();
        let err = tok.decode(&toks).unwrap_err();
        assert!(format!("{err}").contains("expected exactly"));
    }

    #[test]
    fn save_load_preserves_behavior() {
        let chunks = smooth_chunks(1000, 3, 5);
        let tok = Tokenizer::fit(&chunks, test_config(3)).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.g0tk");
        tok.save(&path).unwrap();
        let loaded = Tokenizer::load(&path).unwrap();
        assert_eq!(loaded.merges, tok.merges);
        assert_eq!(loaded.norm_stats, tok.norm_stats);
        assert_eq!(
            loaded.encode(&chunks[3]).unwrap(),
            tok.encode(&chunks[3]).unwrap()
        );
    }
}
