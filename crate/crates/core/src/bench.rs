//! Tabular evaluation oracles: a seeded synthetic benchmark over a fully
//! enumerated space, and a CSV loader for external tables.

use std::collections::{BTreeMap, BTreeSet};
use std::io::{Read, Write};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::arch::{canonical_key, depth_profile, validate, Architecture, Vocabulary, INPUT, OUTPUT};
use crate::pool::SpaceSpec;

#[derive(Debug, Error)]
pub enum BenchError {
    #[error("space has {0} architectures, more than the enumeration limit")]
    SpaceTooLarge(usize),
    #[error("parse error on line {0}: {1}")]
    ParseError(u64, String),
    #[error("invalid architecture on line {0}: {1}")]
    InvalidArchitecture(u64, String),
    #[error("architecture `{0}` is not in the table")]
    UnknownArchitecture(String),
    #[error("could not draw an objective without a dominant feature")]
    DegenerateObjective,
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

/// Upper bound on the number of architectures [`synth_space`] enumerates.
pub const MAX_SYNTH_SIZE: usize = 50_000;

pub const CSV_HEADER: [&str; 6] = ["key", "ops", "adj_bits", "val_score", "test_score", "cost"];

/// Cost charged per synthetic evaluation (GPU hours).
pub const SYNTH_COST: f64 = 0.7;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Evaluation {
    pub val_score: f64,
    pub test_score: f64,
    pub cost: f64,
}

#[derive(Clone, Debug)]
pub struct BenchmarkOracle {
    table: BTreeMap<String, (Architecture, Evaluation)>,
    space: SpaceSpec,
}

impl BenchmarkOracle {
    pub fn space(&self) -> &SpaceSpec {
        &self.space
    }

    pub fn len(&self) -> usize {
        self.table.len()
    }

    pub fn is_empty(&self) -> bool {
        self.table.is_empty()
    }

    pub fn contains(&self, arch: &Architecture) -> bool {
        self.table.contains_key(&canonical_key(arch))
    }

    pub fn contains_key(&self, key: &str) -> bool {
        self.table.contains_key(key)
    }

    /// Table lookup by the key of `arch`, which should be in validated form.
    pub fn query(&self, arch: &Architecture) -> Result<Evaluation, BenchError> {
        let key = canonical_key(arch);
        self.table.get(&key).map(|(_, e)| *e).ok_or(BenchError::UnknownArchitecture(key))
    }

    /// Entries in key order.
    pub fn entries(&self) -> impl Iterator<Item = (&str, &Architecture, &Evaluation)> {
        self.table.iter().map(|(k, (a, e))| (k.as_str(), a, e))
    }

    pub fn architectures(&self) -> Vec<Architecture> {
        self.table.values().map(|(a, _)| a.clone()).collect()
    }

    /// Entry with the highest validation score (first key on ties).
    pub fn best(&self) -> Option<(&Architecture, &Evaluation)> {
        let mut best: Option<(&Architecture, &Evaluation)> = None;
        for (a, e) in self.table.values() {
            if best.is_none_or(|(_, b)| e.val_score > b.val_score) {
                best = Some((a, e));
            }
        }
        best
    }

    pub fn write_csv<W: Write>(&self, w: W) -> Result<(), BenchError> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(CSV_HEADER)?;
        for (key, (arch, e)) in &self.table {
            out.write_record([
                key.clone(),
                arch.ops().join(";"),
                arch.adj_bits(),
                e.val_score.to_string(),
                e.test_score.to_string(),
                e.cost.to_string(),
            ])?;
        }
        out.flush()?;
        Ok(())
    }

    pub fn export(&self, path: impl AsRef<Path>) -> Result<(), BenchError> {
        self.write_csv(std::fs::File::create(path)?)
    }
}

/// Every valid architecture in `space`: upper-triangular DAGs in which each
/// node lies on an input-output path, with every interior labelling.
pub fn enumerate_space(space: &SpaceSpec) -> Result<Vec<Architecture>, BenchError> {
    let k = space.vocab().len();
    let mut structures: Vec<(usize, Vec<Vec<bool>>)> = Vec::new();
    for n in space.min_nodes()..=space.max_nodes() {
        let pairs: Vec<(usize, usize)> = (0..n).flat_map(|i| (i + 1..n).map(move |j| (i, j))).collect();
        for mask in 0u64..(1u64 << pairs.len()) {
            if mask.count_ones() as usize > space.max_edges() {
                continue;
            }
            let mut adj = vec![vec![false; n]; n];
            for (b, &(i, j)) in pairs.iter().enumerate() {
                adj[i][j] = mask >> b & 1 == 1;
            }
            let fed = (1..n).all(|j| (0..j).any(|i| adj[i][j]));
            let drained = (0..n - 1).all(|i| (i + 1..n).any(|j| adj[i][j]));
            if fed && drained {
                structures.push((n, adj));
            }
        }
    }
    let total: usize = structures.iter().map(|(n, _)| k.pow((*n - 2) as u32)).sum();
    if total > MAX_SYNTH_SIZE {
        return Err(BenchError::SpaceTooLarge(total));
    }
    let mut out = Vec::with_capacity(total);
    for (n, adj) in structures {
        let interior = n - 2;
        for code in 0..k.pow(interior as u32) {
            let mut ops = vec![INPUT.to_string()];
            let mut c = code;
            for _ in 0..interior {
                ops.push(space.vocab().ops()[c % k].clone());
                c /= k;
            }
            ops.push(OUTPUT.to_string());
            out.push(Architecture::from_parts(ops, adj.clone()).expect("shape is consistent"));
        }
    }
    Ok(out)
}

/// Features the synthetic objective is built from: interior label
/// frequencies, edge density and normalized longest-path depth.
pub fn synth_features(arch: &Architecture, space: &SpaceSpec) -> Vec<f64> {
    let ops = space.vocab().ops();
    let interior = arch.interior().len();
    let mut f: Vec<f64> = ops
        .iter()
        .map(|o| {
            if interior == 0 {
                0.0
            } else {
                arch.interior().filter(|&i| &arch.ops()[i] == o).count() as f64 / interior as f64
            }
        })
        .collect();
    let n = arch.num_nodes();
    f.push(arch.num_edges() as f64 / (n * (n - 1) / 2) as f64);
    f.push(depth_profile(arch).m as f64 / (space.max_nodes() - 1) as f64);
    f
}

// Uniform in [-1, 1) from a hash of the seed, a salt, the key and a tag.
fn hashed_unit(seed: u64, salt: u64, key: &str, tag: &str) -> f64 {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(salt.to_le_bytes());
    h.update(tag.as_bytes());
    h.update([0u8]);
    h.update(key.as_bytes());
    let d = h.finalize();
    let v = u64::from_le_bytes(d[..8].try_into().expect("digest has 32 bytes"));
    (v >> 11) as f64 / (1u64 << 53) as f64 * 2.0 - 1.0
}

fn logistic(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn pearson(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
    let mut cov = 0.0;
    let (mut va, mut vb) = (0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        cov += (x - ma) * (y - mb);
        va += (x - ma).powi(2);
        vb += (y - mb).powi(2);
    }
    if va <= 0.0 || vb <= 0.0 {
        0.0
    } else {
        cov / (va * vb).sqrt()
    }
}

/// Scale of the seeded feature weights.
const WEIGHT_SCALE: f64 = 3.0;
/// Key-hashed perturbation of the logit.
const VAL_NOISE: f64 = 0.02;
const TEST_NOISE: f64 = 0.01;

/// Deterministic synthetic benchmark over every architecture in `space`.
///
/// `val = logistic(w . f(x) + b + eps(key))` with `w` drawn from `seed`, `b`
/// centring the logits and `eps` a hashed perturbation in `[-0.02, 0.02]`;
/// `test = val` plus hashed noise in `[-0.01, 0.01]`, clamped to `[0, 1]`.
pub fn synth_space(space: &SpaceSpec, seed: u64) -> Result<BenchmarkOracle, BenchError> {
    let archs = enumerate_space(space)?;
    let keys: Vec<String> = archs.iter().map(canonical_key).collect();
    let feats: Vec<Vec<f64>> = archs.iter().map(|a| synth_features(a, space)).collect();
    let dim = feats.first().map_or(0, Vec::len);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, WEIGHT_SCALE).expect("scale is positive");

    for _ in 0..100 {
        let w: Vec<f64> = (0..dim).map(|_| normal.sample(&mut rng)).collect();
        let raw: Vec<f64> = feats.iter().map(|f| f.iter().zip(&w).map(|(a, b)| a * b).sum()).collect();
        let bias = -raw.iter().sum::<f64>() / raw.len().max(1) as f64;
        let mut salt = 0u64;
        let vals = loop {
            let vals: Vec<f64> = raw
                .iter()
                .zip(&keys)
                .map(|(r, k)| logistic(r + bias + VAL_NOISE * hashed_unit(seed, salt, k, "val")))
                .collect();
            let mut sorted = vals.clone();
            sorted.sort_by(|a, b| b.total_cmp(a));
            if sorted.len() < 2 || sorted[0] > sorted[1] {
                break vals;
            }
            salt += 1;
        };
        let dominated = (0..dim).any(|d| {
            let col: Vec<f64> = feats.iter().map(|f| f[d]).collect();
            pearson(&col, &vals).abs() >= 0.95
        });
        if dominated {
            continue;
        }
        let table = archs
            .iter()
            .zip(&keys)
            .zip(&vals)
            .map(|((a, k), &v)| {
                let test = (v + TEST_NOISE * hashed_unit(seed, salt, k, "test")).clamp(0.0, 1.0);
                (k.clone(), (a.clone(), Evaluation { val_score: v, test_score: test, cost: SYNTH_COST }))
            })
            .collect();
        return Ok(BenchmarkOracle { table, space: space.clone() });
    }
    Err(BenchError::DegenerateObjective)
}

fn parse_score(s: &str, line: u64, what: &str, unit: bool) -> Result<f64, BenchError> {
    let v: f64 = s.trim().parse().map_err(|_| BenchError::ParseError(line, format!("bad {what} `{s}`")))?;
    let ok = v.is_finite() && v >= 0.0 && (!unit || v <= 1.0);
    if ok {
        Ok(v)
    } else {
        Err(BenchError::ParseError(line, format!("{what} {v} out of range")))
    }
}

/// Reads a table in the `key,ops,adj_bits,val_score,test_score,cost` schema.
/// Rows are keyed by the canonical key of their validated architecture; the
/// vocabulary and space bounds are inferred from the rows.
pub fn read_tabular<R: Read>(input: R) -> Result<BenchmarkOracle, BenchError> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(input);
    let header = rdr.headers().map_err(|e| BenchError::ParseError(1, e.to_string()))?.clone();
    if header.iter().map(str::trim).ne(CSV_HEADER) {
        return Err(BenchError::ParseError(1, format!("expected header {}", CSV_HEADER.join(","))));
    }
    let mut rows = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| {
            let line = e.position().map_or(0, |p| p.line());
            BenchError::ParseError(line, e.to_string())
        })?;
        let line = rec.position().map_or(0, |p| p.line());
        let ops: Vec<String> = rec[1].split(';').map(|s| s.trim().to_string()).collect();
        let eval = Evaluation {
            val_score: parse_score(&rec[3], line, "val_score", true)?,
            test_score: parse_score(&rec[4], line, "test_score", true)?,
            cost: parse_score(&rec[5], line, "cost", false)?,
        };
        rows.push((line, ops, rec[2].trim().to_string(), eval));
    }

    let labels: BTreeSet<String> =
        rows.iter().flat_map(|(_, ops, _, _)| ops.iter().filter(|o| *o != INPUT && *o != OUTPUT).cloned()).collect();
    let vocab = Vocabulary::new(labels);
    let mut table = BTreeMap::new();
    let (mut min_n, mut max_n, mut max_e) = (usize::MAX, 2usize, 1usize);
    for (line, ops, bits, eval) in rows {
        let arch = Architecture::from_bits(ops, &bits)
            .and_then(|a| validate(&a, &vocab))
            .map_err(|e| BenchError::InvalidArchitecture(line, e.to_string()))?;
        min_n = min_n.min(arch.num_nodes());
        max_n = max_n.max(arch.num_nodes());
        max_e = max_e.max(arch.num_edges());
        let key = canonical_key(&arch);
        if table.insert(key.clone(), (arch, eval)).is_some() {
            return Err(BenchError::ParseError(line, format!("duplicate architecture `{key}`")));
        }
    }
    let min_n = min_n.min(max_n);
    let space = SpaceSpec::new(vocab, min_n.max(2), max_n, max_e.max(max_n - 1))
        .map_err(|e| BenchError::ParseError(1, e.to_string()))?;
    Ok(BenchmarkOracle { table, space })
}

pub fn load_tabular(path: impl AsRef<Path>) -> Result<BenchmarkOracle, BenchError> {
    read_tabular(std::fs::File::open(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashSet;

    fn space(max: usize, edges: usize) -> SpaceSpec {
        SpaceSpec::new(Vocabulary::new(["cv1", "cv3", "mp3"]), 2, max, edges).unwrap()
    }

    // every n x n 0/1 matrix with input first and output last, validated
    fn brute_force_keys(max_nodes: usize, ops: &[&str]) -> HashSet<String> {
        let vocab = Vocabulary::new(ops.iter().copied());
        let mut keys = HashSet::new();
        for n in 2..=max_nodes {
            let interior = n - 2;
            for labels in 0..ops.len().pow(interior as u32) {
                let mut names = vec![INPUT.to_string()];
                let mut c = labels;
                for _ in 0..interior {
                    names.push(ops[c % ops.len()].to_string());
                    c /= ops.len();
                }
                names.push(OUTPUT.to_string());
                for mask in 0u64..(1 << (n * n)) {
                    let adj = (0..n).map(|i| (0..n).map(|j| mask >> (i * n + j) & 1 == 1).collect()).collect();
                    let a = Architecture::from_parts(names.clone(), adj).unwrap();
                    if let Ok(v) = validate(&a, &vocab) {
                        keys.insert(canonical_key(&v));
                    }
                }
            }
        }
        keys
    }

    #[test]
    fn enumeration_matches_brute_force() {
        let s = space(4, 6);
        let oracle = synth_space(&s, 0).unwrap();
        let keys = brute_force_keys(4, &["cv1", "cv3", "mp3"]);
        assert_eq!(oracle.len(), keys.len());
        assert_eq!(oracle.len(), 97);
        assert!(oracle.entries().all(|(k, _, _)| keys.contains(k)));
    }

    #[test]
    fn five_node_six_edge_size() {
        let s = space(5, 6);
        assert_eq!(enumerate_space(&s).unwrap().len(), 45 * 27 + 97);
    }

    #[test]
    fn too_large_is_refused() {
        let s = SpaceSpec::new(Vocabulary::new(["a", "b", "c", "d", "e"]), 2, 7, 21).unwrap();
        assert!(matches!(synth_space(&s, 0), Err(BenchError::SpaceTooLarge(_))));
    }

    #[test]
    fn synthetic_table_properties() {
        let s = space(5, 6);
        let a = synth_space(&s, 3).unwrap();
        let b = synth_space(&s, 3).unwrap();
        let (mut ea, mut eb) = (Vec::new(), Vec::new());
        a.write_csv(&mut ea).unwrap();
        b.write_csv(&mut eb).unwrap();
        assert_eq!(ea, eb);

        let vals: Vec<f64> = a.entries().map(|(_, _, e)| e.val_score).collect();
        assert!(a.entries().all(|(_, _, e)| (0.0..=1.0).contains(&e.val_score) && (0.0..=1.0).contains(&e.test_score)));
        assert!(a.entries().all(|(_, _, e)| e.cost == SYNTH_COST));
        let top = vals.iter().copied().fold(f64::MIN, f64::max);
        assert_eq!(vals.iter().filter(|&&v| v == top).count(), 1);
        for d in 0..5 {
            let col: Vec<f64> = a.entries().map(|(_, x, _)| synth_features(x, &s)[d]).collect();
            assert!(pearson(&col, &vals).abs() < 0.95);
        }
        let (best, e) = a.best().unwrap();
        assert_eq!(a.query(best).unwrap(), *e);
    }

    #[test]
    fn round_trip_through_csv() {
        let s = space(4, 6);
        let oracle = synth_space(&s, 1).unwrap();
        let mut bytes = Vec::new();
        oracle.write_csv(&mut bytes).unwrap();
        let back = read_tabular(bytes.as_slice()).unwrap();
        assert_eq!(back.len(), oracle.len());
        for ((k1, a1, e1), (k2, a2, e2)) in oracle.entries().zip(back.entries()) {
            assert_eq!((k1, a1, e1), (k2, a2, e2));
        }
        let mut again = Vec::new();
        back.write_csv(&mut again).unwrap();
        assert_eq!(bytes, again);
    }

    #[test]
    fn handcrafted_file() {
        let text = "key,ops,adj_bits,val_score,test_score,cost\n\
                    a,input;output,1,0.5,0.4,1.0\n\
                    b,input;cv3;output,101,0.7,0.6,1.2\n\
                    c,input;cv1;output,111,0.2,0.3,0.8\n";
        let o = read_tabular(text.as_bytes()).unwrap();
        assert_eq!(o.len(), 3);
        let e = o.query(&Architecture::chain(&["cv3"])).unwrap();
        assert_eq!(e, Evaluation { val_score: 0.7, test_score: 0.6, cost: 1.2 });
        assert!(matches!(o.query(&Architecture::chain(&["mp3"])), Err(BenchError::UnknownArchitecture(_))));
    }

    #[test]
    fn bad_rows_report_their_line() {
        let cyclic = "key,ops,adj_bits,val_score,test_score,cost\n\
                      a,input;output,1,0.5,0.4,1.0\n\
                      b,input;cv3;output,011101000,0.7,0.6,1.2\n";
        assert!(matches!(read_tabular(cyclic.as_bytes()), Err(BenchError::InvalidArchitecture(3, _))));
        let bad = "key,ops,adj_bits,val_score,test_score,cost\n\
                   a,input;output,1,high,0.4,1.0\n";
        assert!(matches!(read_tabular(bad.as_bytes()), Err(BenchError::ParseError(2, _))));
        let header = "key,ops,bits,val_score,test_score,cost\n";
        assert!(matches!(read_tabular(header.as_bytes()), Err(BenchError::ParseError(1, _))));
    }
}
