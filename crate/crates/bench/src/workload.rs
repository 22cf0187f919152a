//! Operation traces for the four agent access patterns.

use std::fmt;
use std::path::PathBuf;
use std::str::FromStr;

use agentmem::engine::read_fvecs;
use agentmem::{Error, Result};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Pattern {
    /// Every step searches, then inserts.
    OneSearchOneInsert,
    /// Every step searches; one insert closes the request.
    StepSearchThenInsert,
    /// Only the first step searches; every step inserts.
    SearchThenStepInsert,
    SearchOnly,
}

impl Pattern {
    pub const ALL: [Pattern; 4] = [
        Pattern::OneSearchOneInsert,
        Pattern::StepSearchThenInsert,
        Pattern::SearchThenStepInsert,
        Pattern::SearchOnly,
    ];

    /// `(step, kind)` sequence of one request.
    pub fn request_ops(self, steps: usize) -> Vec<(usize, OpKind)> {
        use OpKind::{Insert, Search};
        let mut out = Vec::new();
        match self {
            Pattern::OneSearchOneInsert => {
                for s in 0..steps {
                    out.push((s, Search));
                    out.push((s, Insert));
                }
            }
            Pattern::StepSearchThenInsert => {
                out.extend((0..steps).map(|s| (s, Search)));
                out.push((steps - 1, Insert));
            }
            Pattern::SearchThenStepInsert => {
                out.push((0, Search));
                out.extend((0..steps).map(|s| (s, Insert)));
            }
            Pattern::SearchOnly => out.extend((0..steps).map(|s| (s, Search))),
        }
        out
    }
}

impl fmt::Display for Pattern {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Pattern::OneSearchOneInsert => "one-search-one-insert",
            Pattern::StepSearchThenInsert => "step-search-then-insert",
            Pattern::SearchThenStepInsert => "search-then-step-insert",
            Pattern::SearchOnly => "search-only",
        })
    }
}

impl FromStr for Pattern {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let norm: String = s.chars().filter(|c| c.is_ascii_alphanumeric()).collect::<String>().to_ascii_lowercase();
        Pattern::ALL
            .into_iter()
            .find(|p| p.to_string().replace('-', "") == norm)
            .ok_or_else(|| Error::Usage(format!("unknown pattern `{s}`")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum OpKind {
    Search,
    Insert,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Generator {
    /// `groups` centers on the unit sphere; step `s` draws around center
    /// `s mod groups` with per-coordinate standard deviation `sigma`.
    /// `None` picks `0.2 * mean center distance / sqrt(d)`, so the expected
    /// offset length is a fifth of the center spacing.
    Stepwise { groups: usize, sigma: Option<f32> },
    /// Vectors read in order (cyclically) from an fvecs file.
    FileTrace(PathBuf),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorkloadSpec {
    pub pattern: Pattern,
    pub agents: usize,
    /// Requests per agent.
    pub requests: usize,
    pub steps: usize,
    pub dimension: usize,
    pub generator: Generator,
    pub seed: u64,
}

impl WorkloadSpec {
    pub fn stepwise(pattern: Pattern, agents: usize, requests: usize, steps: usize, dimension: usize, seed: u64) -> Self {
        Self {
            pattern,
            agents,
            requests,
            steps,
            dimension,
            generator: Generator::Stepwise {
                groups: steps.max(1),
                sigma: None,
            },
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.agents == 0 || self.requests == 0 || self.steps == 0 || self.dimension == 0 {
            return Err(Error::Usage("agents, requests, steps and dimension must be at least 1".into()));
        }
        if let Generator::Stepwise { groups, sigma } = &self.generator {
            if *groups == 0 {
                return Err(Error::Usage("groups must be at least 1".into()));
            }
            if sigma.is_some_and(|s| !(s > 0.0 && s.is_finite())) {
                return Err(Error::Usage("sigma must be positive".into()));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceOp {
    pub seq: usize,
    pub agent: u32,
    pub request: u32,
    pub step: u32,
    pub kind: OpKind,
    /// Generating group, `u32::MAX` for file traces.
    pub group: u32,
    pub vector: Vec<f32>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trace {
    pub spec: WorkloadSpec,
    pub centers: Vec<Vec<f32>>,
    /// Resolved per-coordinate spread (0 for file traces).
    pub sigma: f32,
    pub ops: Vec<TraceOp>,
}

impl Trace {
    pub fn searches(&self) -> usize {
        self.ops.iter().filter(|o| o.kind == OpKind::Search).count()
    }

    pub fn inserts(&self) -> usize {
        self.ops.len() - self.searches()
    }

    /// Request boundaries: index one past the last op of each request.
    pub fn request_ends(&self) -> Vec<usize> {
        let mut out = Vec::new();
        for (i, w) in self.ops.windows(2).enumerate() {
            if (w[0].agent, w[0].request) != (w[1].agent, w[1].request) {
                out.push(i + 1);
            }
        }
        if !self.ops.is_empty() {
            out.push(self.ops.len());
        }
        out
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("trace serializes")
    }

    pub fn from_json(s: &str) -> Result<Self> {
        serde_json::from_str(s).map_err(|e| Error::Parse {
            offset: 0,
            msg: format!("trace: {e}"),
        })
    }
}

/// Unit vector with a uniformly random direction.
pub fn unit_vector(rng: &mut impl Rng, d: usize) -> Vec<f32> {
    loop {
        let v: Vec<f32> = (0..d).map(|_| rng.sample::<f32, _>(StandardNormal)).collect();
        let n = v.iter().map(|x| x * x).sum::<f32>().sqrt();
        if n > 1e-6 {
            return v.into_iter().map(|x| x / n).collect();
        }
    }
}

pub fn around(rng: &mut impl Rng, center: &[f32], sigma: f32) -> Vec<f32> {
    center
        .iter()
        .map(|c| c + sigma * rng.sample::<f32, _>(StandardNormal))
        .collect()
}

fn mean_pair_distance(vs: &[Vec<f32>]) -> f32 {
    let mut sum = 0.0f64;
    let mut n = 0u64;
    for i in 0..vs.len() {
        for j in i + 1..vs.len() {
            let d: f32 = vs[i].iter().zip(&vs[j]).map(|(a, b)| (a - b) * (a - b)).sum();
            sum += f64::from(d.sqrt());
            n += 1;
        }
    }
    if n == 0 {
        std::f32::consts::SQRT_2
    } else {
        (sum / n as f64) as f32
    }
}

/// Requests are emitted round-robin over agents: request 0 of every agent,
/// then request 1, and so on. Deterministic per spec.
pub fn generate_workload(spec: &WorkloadSpec) -> Result<Trace> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let d = spec.dimension;
    let (centers, sigma, file) = match &spec.generator {
        Generator::Stepwise { groups, sigma } => {
            let centers: Vec<Vec<f32>> = (0..*groups).map(|_| unit_vector(&mut rng, d)).collect();
            let sigma = sigma.unwrap_or_else(|| 0.2 * mean_pair_distance(&centers) / (d as f32).sqrt());
            (centers, sigma, None)
        }
        Generator::FileTrace(path) => {
            let vs = read_fvecs(path)?;
            if vs.is_empty() {
                return Err(Error::Usage(format!("{} holds no vectors", path.display())));
            }
            if vs[0].len() != d {
                return Err(Error::DimensionMismatch {
                    expected: d,
                    got: vs[0].len(),
                });
            }
            (Vec::new(), 0.0, Some(vs))
        }
    };
    let shape = spec.pattern.request_ops(spec.steps);
    let mut ops = Vec::with_capacity(spec.agents * spec.requests * shape.len());
    for request in 0..spec.requests {
        for agent in 0..spec.agents {
            for &(step, kind) in &shape {
                let seq = ops.len();
                let (group, vector) = match &file {
                    Some(vs) => (u32::MAX, vs[seq % vs.len()].clone()),
                    None => {
                        let g = step % centers.len();
                        (g as u32, around(&mut rng, &centers[g], sigma))
                    }
                };
                ops.push(TraceOp {
                    seq,
                    agent: agent as u32,
                    request: request as u32,
                    step: step as u32,
                    kind,
                    group,
                    vector,
                });
            }
        }
    }
    Ok(Trace {
        spec: spec.clone(),
        centers,
        sigma,
        ops,
    })
}

/// `n` unit vectors: the shared static base.
pub fn static_base(n: usize, d: usize, seed: u64) -> Vec<Vec<f32>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5717_1c0b_a5e0_0001);
    (0..n).map(|_| unit_vector(&mut rng, d)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn kinds(p: Pattern, steps: usize) -> String {
        let spec = WorkloadSpec::stepwise(p, 1, 1, steps, 4, 1);
        generate_workload(&spec)
            .unwrap()
            .ops
            .iter()
            .map(|o| if o.kind == OpKind::Search { 'S' } else { 'I' })
            .collect()
    }

    #[test]
    fn pattern_shapes() {
        assert_eq!(kinds(Pattern::OneSearchOneInsert, 3), "SISISI");
        assert_eq!(kinds(Pattern::StepSearchThenInsert, 3), "SSSI");
        assert_eq!(kinds(Pattern::SearchThenStepInsert, 3), "SIII");
        assert_eq!(kinds(Pattern::SearchOnly, 3), "SSS");
    }

    #[test]
    fn deterministic_and_grouped() {
        let spec = WorkloadSpec::stepwise(Pattern::OneSearchOneInsert, 2, 20, 3, 16, 9);
        let a = generate_workload(&spec).unwrap();
        assert_eq!(a.to_json(), generate_workload(&spec).unwrap().to_json());
        assert_eq!(a.ops.len(), 2 * 20 * 6);
        for op in &a.ops {
            assert_eq!(op.group, op.step % 3);
        }
        // Expected offset length is a fifth of the center spacing.
        let spacing = mean_pair_distance(&a.centers);
        let offsets: f32 = a
            .ops
            .iter()
            .map(|o| {
                o.vector
                    .iter()
                    .zip(&a.centers[o.group as usize])
                    .map(|(x, c)| (x - c) * (x - c))
                    .sum::<f32>()
                    .sqrt()
            })
            .sum::<f32>()
            / a.ops.len() as f32;
        assert!((offsets / spacing - 0.2).abs() < 0.03, "{}", offsets / spacing);
        assert_eq!(a.request_ends().len(), 40);
    }

    #[test]
    fn pattern_names_parse() {
        for p in Pattern::ALL {
            assert_eq!(p.to_string().parse::<Pattern>().unwrap(), p);
        }
        assert_eq!("OneSearchOneInsert".parse::<Pattern>().unwrap(), Pattern::OneSearchOneInsert);
        assert!("sometimes".parse::<Pattern>().is_err());
    }

    #[test]
    fn invalid_specs_rejected() {
        let mut spec = WorkloadSpec::stepwise(Pattern::SearchOnly, 1, 1, 1, 4, 0);
        spec.agents = 0;
        assert!(generate_workload(&spec).is_err());
        let mut spec = WorkloadSpec::stepwise(Pattern::SearchOnly, 1, 1, 1, 4, 0);
        spec.generator = Generator::Stepwise {
            groups: 2,
            sigma: Some(0.0),
        };
        assert!(generate_workload(&spec).is_err());
    }
}
