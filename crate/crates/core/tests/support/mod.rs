//! Shared helpers for the integration tests: an independent 64-bit
//! reference forward pass, synthetic corpora and published table values.

#![allow(dead_code)]

use qe_core::corpus::{zscore_normalize, AnnotatedPair, Dataset, Split};
use qe_core::encoder::{EncoderConfig, PoolingStrategy, TokenSequence};
use qe_core::metrics::CorrelationReport;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Row-major f64 matrix.
#[derive(Clone, Debug)]
pub struct M {
    pub r: usize,
    pub c: usize,
    pub d: Vec<f64>,
}

impl M {
    fn at(&self, i: usize, j: usize) -> f64 {
        self.d[i * self.c + j]
    }
}

fn mat(p: &[f64], r: usize, c: usize) -> M {
    assert_eq!(p.len(), r * c);
    M { r, c, d: p.to_vec() }
}

fn matmul(a: &M, b: &M) -> M {
    assert_eq!(a.c, b.r);
    let mut d = vec![0.0; a.r * b.c];
    for i in 0..a.r {
        for j in 0..b.c {
            d[i * b.c + j] = (0..a.c).map(|k| a.at(i, k) * b.at(k, j)).sum();
        }
    }
    M { r: a.r, c: b.c, d }
}

fn linear(x: &M, w: &[f64], b: &[f64]) -> M {
    let mut y = matmul(x, &mat(w, x.c, b.len()));
    for row in y.d.chunks_mut(y.c) {
        for (v, bj) in row.iter_mut().zip(b) {
            *v += bj;
        }
    }
    y
}

fn layer_norm(x: &M, g: &[f64], b: &[f64]) -> M {
    let mut y = x.clone();
    for i in 0..x.r {
        let row = &x.d[i * x.c..(i + 1) * x.c];
        let mean = row.iter().sum::<f64>() / x.c as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / x.c as f64;
        let s = 1.0 / (var + 1e-5).sqrt();
        for j in 0..x.c {
            y.d[i * x.c + j] = (row[j] - mean) * s * g[j] + b[j];
        }
    }
    y
}

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + ((2.0 / std::f64::consts::PI).sqrt() * (x + 0.044715 * x * x * x)).tanh())
}

/// Score of `seq` under the parameters `p`, given in the model's storage
/// order, for the dropout-free forward pass.
pub fn reference_score(
    p: &[Vec<f64>],
    cfg: &EncoderConfig,
    pooling: PoolingStrategy,
    seq: &TokenSequence,
) -> f64 {
    let d = cfg.d_model;
    let n = seq.len();
    let mut x = M {
        r: n,
        c: d,
        d: vec![0.0; n * d],
    };
    for (i, &id) in seq.ids.iter().enumerate() {
        for j in 0..d {
            x.d[i * d + j] = p[0][id as usize * d + j] + p[1][i * d + j];
        }
    }
    let dh = d / cfg.n_heads;
    for l in 0..cfg.n_layers {
        let w = &p[2 + 16 * l..2 + 16 * (l + 1)];
        let h = layer_norm(&x, &w[0], &w[1]);
        let q = linear(&h, &w[2], &w[3]);
        let k = linear(&h, &w[4], &w[5]);
        let v = linear(&h, &w[6], &w[7]);
        let mut ctx = M {
            r: n,
            c: d,
            d: vec![0.0; n * d],
        };
        for head in 0..cfg.n_heads {
            let off = head * dh;
            for i in 0..n {
                let mut s: Vec<f64> = (0..n)
                    .map(|j| {
                        if seq.attention_mask[j] == 0 {
                            f64::NEG_INFINITY
                        } else {
                            (0..dh).map(|t| q.at(i, off + t) * k.at(j, off + t)).sum::<f64>()
                                / (dh as f64).sqrt()
                        }
                    })
                    .collect();
                let m = s.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let mut z = 0.0;
                for e in &mut s {
                    *e = (*e - m).exp();
                    z += *e;
                }
                for t in 0..dh {
                    ctx.d[i * d + off + t] = (0..n).map(|j| s[j] / z * v.at(j, off + t)).sum();
                }
            }
        }
        let a = linear(&ctx, &w[8], &w[9]);
        for (xi, ai) in x.d.iter_mut().zip(&a.d) {
            *xi += ai;
        }
        let h = layer_norm(&x, &w[10], &w[11]);
        let mut f = linear(&h, &w[12], &w[13]);
        for v in &mut f.d {
            *v = gelu(*v);
        }
        let f = linear(&f, &w[14], &w[15]);
        for (xi, fi) in x.d.iter_mut().zip(&f.d) {
            *xi += fi;
        }
    }
    let base = 2 + 16 * cfg.n_layers;
    let hidden = layer_norm(&x, &p[base], &p[base + 1]);
    let real: Vec<usize> = (0..n).filter(|&i| seq.attention_mask[i] != 0).collect();
    let pooled: Vec<f64> = (0..d)
        .map(|j| match pooling {
            PoolingStrategy::Cls => hidden.at(0, j),
            PoolingStrategy::Mean => real.iter().map(|&i| hidden.at(i, j)).sum::<f64>() / real.len() as f64,
            PoolingStrategy::Max => real
                .iter()
                .map(|&i| hidden.at(i, j))
                .fold(f64::NEG_INFINITY, f64::max),
        })
        .collect();
    let head_w = &p[base + 2];
    let head_b = p[base + 3][0];
    pooled.iter().zip(head_w).map(|(a, b)| a * b).sum::<f64>() + head_b
}

/// Mean squared error of the reference scores against `gold`.
pub fn reference_loss(
    p: &[Vec<f64>],
    cfg: &EncoderConfig,
    pooling: PoolingStrategy,
    batch: &[(TokenSequence, f64)],
) -> f64 {
    batch
        .iter()
        .map(|(s, g)| {
            let e = reference_score(p, cfg, pooling, s) - g;
            e * e
        })
        .sum::<f64>()
        / batch.len() as f64
}

const ALPHABET: &[u8] = b"abcdefghijklmnopqrstuvwxyz";

pub const SYNTH_LEN: usize = 12;

/// Source: 12 distinct random lowercase letters. Target: a copy in which
/// each position is, with a per-pair probability drawn from U(0, 1),
/// replaced by a letter absent from the source, so aligned matches and
/// byte-bag overlap coincide. The raw score is 100 times the fraction of
/// matching positions; the label is its z-score.
pub fn corrupted_copies(n: usize, seed: u64, id_prefix: &str, split: Split) -> Dataset {
    use rand::seq::SliceRandom;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut pairs = Vec::with_capacity(n);
    let mut raw = Vec::with_capacity(n);
    for i in 0..n {
        let mut letters = ALPHABET.to_vec();
        letters.shuffle(&mut rng);
        let (source, unused) = letters.split_at(SYNTH_LEN);
        let p: f64 = rng.gen();
        let mut matches = 0;
        let target: Vec<u8> = source
            .iter()
            .map(|&c| {
                if rng.gen::<f64>() < p {
                    unused[rng.gen_range(0..unused.len())]
                } else {
                    matches += 1;
                    c
                }
            })
            .collect();
        let score = 100.0 * matches as f64 / SYNTH_LEN as f64;
        raw.push(score);
        pairs.push(AnnotatedPair {
            segment_id: format!("{id_prefix}{i}"),
            source: String::from_utf8(source.to_vec()).unwrap(),
            target: String::from_utf8(target).unwrap(),
            raw_scores: vec![score],
            z_mean: None,
        });
    }
    let z = zscore_normalize(&[raw]).expect("scores vary");
    for (pair, z) in pairs.iter_mut().zip(z) {
        pair.z_mean = Some(z);
    }
    Dataset::new(split, "src-tgt", pairs).unwrap()
}

pub const TABLE1_PAIRS: [&str; 5] = ["en-gu", "en-hi", "en-mr", "en-ta", "en-te"];

/// Published (method, [(rho, r); 5]) rows.
pub const TABLE1: [(&str, [(f64, f64); 5]); 5] = [
    (
        "Baseline",
        [
            (0.337, 0.307),
            (0.281, 0.245),
            (0.392, 0.427),
            (0.507, 0.402),
            (0.193, 0.153),
        ],
    ),
    (
        "MonoTQ-XLMV",
        [
            (0.673, 0.536),
            (0.572, 0.687),
            (0.642, 0.425),
            (0.670, 0.559),
            (0.464, 0.642),
        ],
    ),
    (
        "MonoTQ-InfoXLM-large",
        [
            (0.713, 0.656),
            (0.624, 0.726),
            (0.470, 0.030),
            (0.726, 0.662),
            (0.462, 0.719),
        ],
    ),
    (
        "MonoTQ-XLMR-large",
        [
            (0.438, 0.299),
            (0.440, 0.430),
            (0.395, -0.117),
            (0.482, 0.454),
            (0.345, 0.211),
        ],
    ),
    (
        "ensembleTQ",
        [
            (0.649, 0.700),
            (0.551, 0.668),
            (0.596, 0.668),
            (0.674, 0.710),
            (0.349, 0.376),
        ],
    ),
];

/// Bold entries of the published table.
pub const TABLE1_BEST: [(&str, &str, f64); 5] = [
    ("en-gu", "MonoTQ-InfoXLM-large", 0.713),
    ("en-hi", "MonoTQ-InfoXLM-large", 0.624),
    ("en-mr", "MonoTQ-XLMV", 0.642),
    ("en-ta", "MonoTQ-InfoXLM-large", 0.726),
    ("en-te", "MonoTQ-XLMV", 0.464),
];

pub fn table1_reports() -> Vec<CorrelationReport> {
    TABLE1
        .iter()
        .flat_map(|(method, cells)| {
            TABLE1_PAIRS
                .iter()
                .zip(cells)
                .map(move |(pair, &(rho, r))| CorrelationReport {
                    method_name: method.to_string(),
                    language_pair: pair.to_string(),
                    spearman_rho: rho,
                    pearson_r: r,
                    n: 1000,
                })
        })
        .collect()
}

/// Table 3 rows, in bytes.
pub const TABLE3: [(&str, u64); 8] = [
    ("Unbabel-IST", 42_868_104_221),
    ("IOL Research", 2_357_242_105),
    ("HW-TSC", 27_730_527_504),
    ("MMT", 2_448_132_038),
    ("SurreyAI-ensembleTQ", 7_945_689_496),
    ("SurreyAI-MonoTQ-XLMV", 3_221_225_472),
    ("SurreyAI-MonoTQ-InfoXLM-large", 2_362_232_012),
    ("SurreyAI-MonoTQ-XLMR-large", 2_254_857_830),
];
