//! Paired comparison of two runs of the same trace.

use agentmem::{Error, Result};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::run::{OpRecord, RunReport};
use crate::workload::OpKind;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Metric {
    SearchLatency,
    InsertLatency,
    Scanned,
    Coarse,
    ScannedToRecall,
    Recall,
}

impl Metric {
    pub const ALL: [Metric; 6] = [
        Metric::SearchLatency,
        Metric::InsertLatency,
        Metric::Scanned,
        Metric::Coarse,
        Metric::ScannedToRecall,
        Metric::Recall,
    ];

    fn kind(self) -> OpKind {
        match self {
            Metric::InsertLatency => OpKind::Insert,
            _ => OpKind::Search,
        }
    }

    fn value(self, r: &OpRecord) -> Option<f64> {
        match self {
            Metric::SearchLatency | Metric::InsertLatency => r.latency_ns.map(|x| x as f64),
            Metric::Scanned => Some(r.scanned as f64),
            Metric::Coarse => Some(r.coarse as f64),
            Metric::ScannedToRecall => r.scanned_to_recall.map(|x| x as f64),
            Metric::Recall => r.recall,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Ratio {
    pub metric: Metric,
    pub samples: usize,
    pub mean_a: f64,
    pub mean_b: f64,
    /// `mean_a / mean_b`.
    pub ratio: f64,
    pub ci_low: f64,
    pub ci_high: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BootstrapOptions {
    pub resamples: usize,
    /// Two-sided confidence level in percent.
    pub confidence: u32,
    pub seed: u64,
}

impl Default for BootstrapOptions {
    fn default() -> Self {
        Self {
            resamples: 1000,
            confidence: 95,
            seed: 0,
        }
    }
}

/// Ratios `a / b` for every metric both runs recorded, with paired
/// bootstrap intervals. The runs must replay the same trace.
pub fn compare(a: &RunReport, b: &RunReport, opts: &BootstrapOptions) -> Result<Vec<Ratio>> {
    if a.meta.spec != b.meta.spec {
        return Err(Error::Usage("runs replay different workloads".into()));
    }
    if a.records.len() != b.records.len() || a.records.iter().zip(&b.records).any(|(x, y)| x.seq != y.seq || x.kind != y.kind) {
        return Err(Error::Usage("runs have different operation sequences".into()));
    }
    if opts.resamples == 0 || !(1..100).contains(&opts.confidence) {
        return Err(Error::Usage("resamples must be positive and confidence in 1..100".into()));
    }
    let mut out = Vec::new();
    for m in Metric::ALL {
        let pairs: Vec<(f64, f64)> = a
            .records
            .iter()
            .zip(&b.records)
            .filter(|(x, _)| x.kind == m.kind())
            .filter_map(|(x, y)| Some((m.value(x)?, m.value(y)?)))
            .collect();
        if pairs.is_empty() {
            continue;
        }
        let ratio_of = |idx: &mut dyn Iterator<Item = usize>| {
            let (mut sa, mut sb) = (0.0, 0.0);
            for i in idx {
                sa += pairs[i].0;
                sb += pairs[i].1;
            }
            (sa, sb)
        };
        let n = pairs.len();
        let (sa, sb) = ratio_of(&mut (0..n));
        let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
        let mut boots: Vec<f64> = (0..opts.resamples)
            .map(|_| {
                let (x, y) = ratio_of(&mut (0..n).map(|_| rng.random_range(0..n)));
                x / y
            })
            .collect();
        boots.sort_by(f64::total_cmp);
        let tail = (100 - opts.confidence) as f64 / 200.0;
        let pick = |q: f64| boots[((q * (boots.len() - 1) as f64).round() as usize).min(boots.len() - 1)];
        out.push(Ratio {
            metric: m,
            samples: n,
            mean_a: sa / n as f64,
            mean_b: sb / n as f64,
            ratio: sa / sb,
            ci_low: pick(tail),
            ci_high: pick(1.0 - tail),
        });
    }
    Ok(out)
}

pub fn format_table(rows: &[Ratio]) -> String {
    let mut s = format!("{:<18} {:>8} {:>14} {:>14} {:>8} {:>18}\n", "metric", "n", "mean a", "mean b", "a/b", "interval");
    for r in rows {
        s += &format!(
            "{:<18} {:>8} {:>14.3} {:>14.3} {:>8.3} [{:>7.3}, {:>7.3}]\n",
            format!("{:?}", r.metric),
            r.samples,
            r.mean_a,
            r.mean_b,
            r.ratio,
            r.ci_low,
            r.ci_high
        );
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::run::{run, RunOptions};
    use crate::strategy::Strategy;
    use crate::workload::{generate_workload, Pattern, WorkloadSpec};
    use agentmem::StoreConfig;

    fn report() -> RunReport {
        let spec = WorkloadSpec::stepwise(Pattern::OneSearchOneInsert, 2, 20, 3, 8, 1);
        let trace = generate_workload(&spec).unwrap();
        let opts = RunOptions {
            static_base: 500,
            timing: true,
            ..RunOptions::default()
        };
        run(&trace, Strategy::Full, &opts, &StoreConfig::new(8)).unwrap()
    }

    #[test]
    fn self_comparison_is_unity() {
        let r = report();
        let rows = compare(&r, &r, &BootstrapOptions::default()).unwrap();
        assert!(rows.iter().any(|x| x.metric == Metric::SearchLatency));
        for row in rows.iter().filter(|x| x.mean_b > 0.0) {
            assert_eq!(row.ratio, 1.0, "{row:?}");
            assert_eq!((row.ci_low, row.ci_high), (1.0, 1.0));
        }
    }

    #[test]
    fn injected_slowdown_is_recovered() {
        let b = report();
        let mut a = b.clone();
        for r in &mut a.records {
            r.latency_ns = r.latency_ns.map(|x| 2 * x);
        }
        let rows = compare(&a, &b, &BootstrapOptions::default()).unwrap();
        for m in [Metric::SearchLatency, Metric::InsertLatency] {
            let row = rows.iter().find(|x| x.metric == m).unwrap();
            assert!((row.ratio - 2.0).abs() < 1e-12);
            assert!((row.ci_low - 2.0).abs() < 1e-12 && (row.ci_high - 2.0).abs() < 1e-12);
        }
        let scanned = rows.iter().find(|x| x.metric == Metric::Scanned).unwrap();
        assert_eq!(scanned.ratio, 1.0);
    }

    #[test]
    fn different_workloads_are_rejected() {
        let a = report();
        let mut b = a.clone();
        b.meta.spec.seed += 1;
        assert!(compare(&a, &b, &BootstrapOptions::default()).unwrap_err().is_usage());
    }
}
