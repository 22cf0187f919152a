//! Value types shared by every layer of the store: vectors, distances, ids and scopes.
//!
//! All ranking code uses one convention: smaller distance is closer. Inner
//! product similarity is therefore negated, and cosine similarity is turned
//! into `1 - cos`.

use std::fmt;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Shared, immutable embedding storage.
pub type Vector = Arc<[f32]>;

/// Globally unique item identifier. Never reused after delete.
pub type ItemId = u64;

/// Identifier of an L2 cluster. Never reused after the cluster is retired.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct ClusterId(pub u64);

impl fmt::Display for ClusterId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "c{}", self.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct AgentId(pub u32);

impl fmt::Display for AgentId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "agent:{}", self.0)
    }
}

/// A memory partition: the shared static base, or one agent's private memory.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum ScopeId {
    Static,
    Agent(AgentId),
}

impl ScopeId {
    pub fn agent(&self) -> Option<AgentId> {
        match self {
            ScopeId::Static => None,
            ScopeId::Agent(a) => Some(*a),
        }
    }

    pub fn is_static(&self) -> bool {
        matches!(self, ScopeId::Static)
    }
}

impl fmt::Display for ScopeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ScopeId::Static => f.write_str("static"),
            ScopeId::Agent(a) => a.fmt(f),
        }
    }
}

impl std::str::FromStr for ScopeId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s == "static" {
            return Ok(ScopeId::Static);
        }
        let id = s
            .strip_prefix("agent:")
            .and_then(|n| n.parse::<u32>().ok())
            .ok_or_else(|| Error::usage(format!("invalid scope `{s}` (expected `static` or `agent:<n>`)")))?;
        Ok(ScopeId::Agent(AgentId(id)))
    }
}

/// The unit of insert, search and delete.
#[derive(Debug, Clone, PartialEq)]
pub struct MemoryItem {
    pub id: ItemId,
    pub vector: Vector,
    pub payload: Vec<u8>,
    pub scope: ScopeId,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Metric {
    #[default]
    SquaredEuclidean,
    InnerProduct,
    Cosine,
}

impl Metric {
    pub fn to_u8(self) -> u8 {
        match self {
            Metric::SquaredEuclidean => 0,
            Metric::InnerProduct => 1,
            Metric::Cosine => 2,
        }
    }

    pub fn from_u8(v: u8) -> Option<Self> {
        match v {
            0 => Some(Metric::SquaredEuclidean),
            1 => Some(Metric::InnerProduct),
            2 => Some(Metric::Cosine),
            _ => None,
        }
    }

    /// Converts a raw distance into embedding-length units (square root for
    /// squared Euclidean, identity otherwise).
    #[inline]
    pub fn to_length(self, d: f32) -> f32 {
        match self {
            Metric::SquaredEuclidean => d.max(0.0).sqrt(),
            _ => d,
        }
    }

    /// Unchecked distance. Callers guarantee equal lengths.
    #[inline]
    pub fn distance(self, a: &[f32], b: &[f32]) -> f32 {
        debug_assert_eq!(a.len(), b.len());
        match self {
            Metric::SquaredEuclidean => squared_l2(a, b),
            Metric::InnerProduct => -dot(a, b),
            Metric::Cosine => {
                let na = dot(a, a).sqrt();
                let nb = dot(b, b).sqrt();
                if na == 0.0 || nb == 0.0 {
                    return 1.0;
                }
                (1.0 - dot(a, b) / (na * nb)).max(0.0)
            }
        }
    }

    /// Distance in embedding-length units.
    #[inline]
    pub fn length(self, a: &[f32], b: &[f32]) -> f32 {
        self.to_length(self.distance(a, b))
    }
}

impl fmt::Display for Metric {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Metric::SquaredEuclidean => "squared-euclidean",
            Metric::InnerProduct => "inner-product",
            Metric::Cosine => "cosine",
        };
        f.write_str(s)
    }
}

#[inline]
fn squared_l2(a: &[f32], b: &[f32]) -> f32 {
    // Eight independent accumulators so the loop vectorizes.
    let mut acc = [0.0f32; 8];
    let chunks = a.len() / 8;
    for i in 0..chunks {
        let base = i * 8;
        for j in 0..8 {
            let d = a[base + j] - b[base + j];
            acc[j] += d * d;
        }
    }
    let mut sum: f32 = acc.iter().sum();
    for i in chunks * 8..a.len() {
        let d = a[i] - b[i];
        sum += d * d;
    }
    sum
}

#[inline]
fn dot(a: &[f32], b: &[f32]) -> f32 {
    let mut acc = [0.0f32; 8];
    let chunks = a.len() / 8;
    for i in 0..chunks {
        let base = i * 8;
        for j in 0..8 {
            acc[j] += a[base + j] * b[base + j];
        }
    }
    let mut sum: f32 = acc.iter().sum();
    for i in chunks * 8..a.len() {
        sum += a[i] * b[i];
    }
    sum
}

/// Checks length and finiteness of an embedding.
pub fn validate(v: &[f32], dimension: usize) -> Result<()> {
    if v.len() != dimension {
        return Err(Error::DimensionMismatch {
            expected: dimension,
            got: v.len(),
        });
    }
    if let Some(index) = v.iter().position(|x| !x.is_finite()) {
        return Err(Error::NonFinite { index });
    }
    Ok(())
}

/// Checked distance between two embeddings.
pub fn distance(a: &[f32], b: &[f32], metric: Metric) -> Result<f32> {
    validate(b, a.len())?;
    validate(a, a.len())?;
    if metric == Metric::Cosine && (a.iter().all(|x| *x == 0.0) || b.iter().all(|x| *x == 0.0)) {
        return Err(Error::usage("cosine distance is undefined for zero vectors"));
    }
    Ok(metric.distance(a, b))
}

/// Componentwise arithmetic mean.
pub fn centroid<V: AsRef<[f32]>>(vs: &[V]) -> Result<Vec<f32>> {
    let first = vs
        .first()
        .ok_or_else(|| Error::usage("centroid of an empty vector list"))?;
    let dim = first.as_ref().len();
    let mut sum = vec![0.0f64; dim];
    for v in vs {
        let v = v.as_ref();
        if v.len() != dim {
            return Err(Error::DimensionMismatch {
                expected: dim,
                got: v.len(),
            });
        }
        for (s, x) in sum.iter_mut().zip(v) {
            *s += f64::from(*x);
        }
    }
    let n = vs.len() as f64;
    Ok(sum.into_iter().map(|s| (s / n) as f32).collect())
}

/// Mean distance of `vs` about `c`, in embedding-length units.
pub fn deviation<V: AsRef<[f32]>>(vs: &[V], c: &[f32], metric: Metric) -> Result<f32> {
    if vs.is_empty() {
        return Err(Error::usage("deviation of an empty vector list"));
    }
    let mut total = 0.0f64;
    for v in vs {
        let v = v.as_ref();
        if v.len() != c.len() {
            return Err(Error::DimensionMismatch {
                expected: c.len(),
                got: v.len(),
            });
        }
        total += f64::from(metric.length(v, c));
    }
    Ok((total / vs.len() as f64) as f32)
}

/// Ordering used by every ranked list: distance ascending, then id ascending.
/// Serializes an ordered map as a sequence of pairs, for key types that
/// text formats cannot use as object keys.
pub(crate) mod map_as_pairs {
    use std::collections::BTreeMap;

    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    pub fn serialize<K: Serialize, V: Serialize, S: Serializer>(m: &BTreeMap<K, V>, s: S) -> Result<S::Ok, S::Error> {
        s.collect_seq(m.iter())
    }

    pub fn deserialize<'de, K, V, D>(d: D) -> Result<BTreeMap<K, V>, D::Error>
    where
        K: Deserialize<'de> + Ord,
        V: Deserialize<'de>,
        D: Deserializer<'de>,
    {
        Ok(Vec::<(K, V)>::deserialize(d)?.into_iter().collect())
    }
}

#[inline]
pub(crate) fn rank_cmp(a: (f32, u64), b: (f32, u64)) -> std::cmp::Ordering {
    a.0.total_cmp(&b.0).then(a.1.cmp(&b.1))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_vec(rng: &mut ChaCha8Rng, d: usize) -> Vec<f32> {
        (0..d).map(|_| rng.random_range(-1.0f32..1.0)).collect()
    }

    #[test]
    fn squared_euclidean_identity_and_triangle() {
        assert_eq!(distance(&[1.0, 0.0], &[1.0, 0.0], Metric::SquaredEuclidean).unwrap(), 0.0);
        assert_eq!(distance(&[0.0, 0.0], &[3.0, 4.0], Metric::SquaredEuclidean).unwrap(), 25.0);
    }

    #[test]
    fn distance_matches_scalar_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..50 {
            let a = rand_vec(&mut rng, 64);
            let b = rand_vec(&mut rng, 64);
            let mut naive = 0.0f64;
            for i in 0..64 {
                let d = f64::from(a[i]) - f64::from(b[i]);
                naive += d * d;
            }
            let got = f64::from(distance(&a, &b, Metric::SquaredEuclidean).unwrap());
            assert!((got - naive).abs() <= 1e-5 * naive.max(1e-12));

            let naive_dot: f64 = a.iter().zip(&b).map(|(x, y)| f64::from(*x) * f64::from(*y)).sum();
            let got = f64::from(distance(&a, &b, Metric::InnerProduct).unwrap());
            assert!((got + naive_dot).abs() <= 1e-5 * naive_dot.abs().max(1e-3));
        }
    }

    #[test]
    fn distance_errors() {
        assert!(distance(&[1.0], &[1.0, 2.0], Metric::SquaredEuclidean)
            .unwrap_err()
            .is_usage());
        assert!(distance(&[f32::NAN, 0.0], &[1.0, 2.0], Metric::SquaredEuclidean)
            .unwrap_err()
            .is_usage());
        assert!(distance(&[0.0, 0.0], &[1.0, 2.0], Metric::Cosine).is_err());
    }

    #[test]
    fn centroid_examples() {
        assert_eq!(centroid(&[vec![2.0, 0.0], vec![0.0, 2.0]]).unwrap(), vec![1.0, 1.0]);
        assert_eq!(centroid(&[vec![0.3, -7.25]]).unwrap(), vec![0.3, -7.25]);
        assert!(centroid::<Vec<f32>>(&[]).is_err());

        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let vs: Vec<Vec<f32>> = (0..100).map(|_| rand_vec(&mut rng, 16)).collect();
        let got = centroid(&vs).unwrap();
        for (j, g) in got.iter().enumerate() {
            let mut acc = 0.0f64;
            for v in &vs {
                acc += f64::from(v[j]);
            }
            let want = acc / 100.0;
            assert!((f64::from(*g) - want).abs() <= 1e-5 * want.abs().max(1e-3));
        }
    }

    #[test]
    fn deviation_examples() {
        assert_eq!(deviation(&[vec![1.0, 2.0]], &[1.0, 2.0], Metric::SquaredEuclidean).unwrap(), 0.0);
        let d = deviation(&[vec![0.0, 0.0], vec![2.0, 0.0]], &[1.0, 0.0], Metric::SquaredEuclidean).unwrap();
        assert_eq!(d, 1.0);
        assert!(deviation::<Vec<f32>>(&[], &[0.0], Metric::SquaredEuclidean).is_err());

        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let vs: Vec<Vec<f32>> = (0..200).map(|_| rand_vec(&mut rng, 8)).collect();
        let c = centroid(&vs).unwrap();
        let mut acc = 0.0f64;
        for v in &vs {
            let mut s = 0.0f64;
            for j in 0..8 {
                let d = f64::from(v[j]) - f64::from(c[j]);
                s += d * d;
            }
            acc += s.sqrt();
        }
        let want = acc / 200.0;
        let got = f64::from(deviation(&vs, &c, Metric::SquaredEuclidean).unwrap());
        assert!((got - want).abs() <= 1e-5 * want);
    }

    #[test]
    fn scope_parse_roundtrip() {
        for s in [ScopeId::Static, ScopeId::Agent(AgentId(42))] {
            assert_eq!(s.to_string().parse::<ScopeId>().unwrap(), s);
        }
        assert!("agent:x".parse::<ScopeId>().is_err());
    }

    proptest! {
        #[test]
        fn symmetric_metrics(a in proptest::collection::vec(-10.0f32..10.0, 12),
                             b in proptest::collection::vec(-10.0f32..10.0, 12)) {
            prop_assert_eq!(Metric::SquaredEuclidean.distance(&a, &b), Metric::SquaredEuclidean.distance(&b, &a));
            let c1 = Metric::Cosine.distance(&a, &b);
            let c2 = Metric::Cosine.distance(&b, &a);
            prop_assert!((c1 - c2).abs() <= 1e-6);
            prop_assert!(Metric::SquaredEuclidean.distance(&a, &a) == 0.0);
        }

        #[test]
        fn centroid_of_copies_is_exact(v in proptest::collection::vec(-100.0f32..100.0, 1..24), k in 1usize..50) {
            let copies = vec![v.clone(); k];
            prop_assert_eq!(centroid(&copies).unwrap(), v);
        }
    }
}
