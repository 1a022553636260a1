//! Deterministic request streams.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use flame_api::{ContextValue, ScoreRequest};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Zipf};
use thiserror::Error;

/// Items are drawn from ids `1..=ITEM_UNIVERSE`.
pub const ITEM_UNIVERSE: u64 = 100_000;
pub const USER_UNIVERSE: u64 = 10_000;
pub const MIXED_CANDIDATES: [usize; 4] = [128, 256, 512, 1024];

#[derive(Debug, Error, PartialEq)]
pub enum WorkloadError {
    #[error("invalid workload: {0}")]
    Invalid(String),
    #[error("unknown {kind} `{value}`")]
    Parse { kind: &'static str, value: String },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Scenario {
    Base,
    Long,
    Mixed,
}

impl Scenario {
    pub fn history_len(self) -> usize {
        match self {
            Scenario::Base => 512,
            Scenario::Long | Scenario::Mixed => 1024,
        }
    }

    fn candidates(self, rng: &mut ChaCha8Rng) -> usize {
        match self {
            Scenario::Base => 128,
            Scenario::Long => 512,
            Scenario::Mixed => MIXED_CANDIDATES[rng.random_range(0..MIXED_CANDIDATES.len())],
        }
    }
}

impl fmt::Display for Scenario {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Scenario::Base => "base",
            Scenario::Long => "long",
            Scenario::Mixed => "mixed",
        })
    }
}

impl FromStr for Scenario {
    type Err = WorkloadError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "base" => Ok(Scenario::Base),
            "long" => Ok(Scenario::Long),
            "mixed" => Ok(Scenario::Mixed),
            _ => Err(WorkloadError::Parse { kind: "scenario", value: s.into() }),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum KeyDistribution {
    Uniform,
    /// Rank-`k` item drawn with probability proportional to `k^-s`.
    Zipf(f64),
}

impl Default for KeyDistribution {
    fn default() -> Self {
        KeyDistribution::Zipf(1.0)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct WorkloadSpec {
    pub scenario: Scenario,
    pub duration_s: f64,
    pub concurrency: usize,
    pub key_distribution: KeyDistribution,
    pub seed: u64,
    /// Stop after this many requests even if time remains.
    pub max_requests: Option<usize>,
}

impl WorkloadSpec {
    pub fn new(scenario: Scenario) -> Self {
        Self {
            scenario,
            duration_s: 10.0,
            concurrency: 4,
            key_distribution: KeyDistribution::default(),
            seed: 0,
            max_requests: None,
        }
    }

    /// A zero duration is allowed and yields an empty run.
    pub fn validate(&self) -> Result<(), WorkloadError> {
        if !self.duration_s.is_finite() || self.duration_s < 0.0 {
            return Err(WorkloadError::Invalid(format!("duration_s must be >= 0, got {}", self.duration_s)));
        }
        if self.concurrency == 0 {
            return Err(WorkloadError::Invalid("concurrency must be positive".into()));
        }
        if let KeyDistribution::Zipf(s) = self.key_distribution {
            if !(s.is_finite() && s > 0.0) {
                return Err(WorkloadError::Invalid(format!("zipf exponent must be positive, got {s}")));
            }
        }
        Ok(())
    }
}

/// Random access into the request stream of a spec: request `i` depends only
/// on the seed and `i`.
#[derive(Clone, Debug)]
pub struct Workload {
    spec: WorkloadSpec,
    zipf: Option<Zipf<f64>>,
}

impl Workload {
    pub fn new(spec: WorkloadSpec) -> Result<Self, WorkloadError> {
        spec.validate()?;
        let zipf = match spec.key_distribution {
            KeyDistribution::Uniform => None,
            KeyDistribution::Zipf(s) => {
                Some(Zipf::new(ITEM_UNIVERSE as f64, s).map_err(|e| WorkloadError::Invalid(e.to_string()))?)
            }
        };
        Ok(Self { spec, zipf })
    }

    pub fn spec(&self) -> &WorkloadSpec {
        &self.spec
    }

    fn item(&self, rng: &mut ChaCha8Rng) -> u64 {
        match &self.zipf {
            Some(z) => z.sample(rng) as u64,
            None => rng.random_range(1..=ITEM_UNIVERSE),
        }
    }

    pub fn request(&self, index: u64) -> ScoreRequest {
        let mut rng = ChaCha8Rng::seed_from_u64(self.spec.seed);
        rng.set_stream(index);
        let scenario = self.spec.scenario;
        let candidates = scenario.candidates(&mut rng);
        let user_id = rng.random_range(0..USER_UNIVERSE);
        let history = (0..scenario.history_len()).map(|_| self.item(&mut rng)).collect();
        let candidates = (0..candidates).map(|_| self.item(&mut rng)).collect();
        let mut context = BTreeMap::new();
        context.insert("hour".into(), ContextValue::Number(rng.random_range(0..24) as f64));
        context.insert("mobile".into(), ContextValue::Bool(rng.random_bool(0.7)));
        ScoreRequest { user_id, history, candidates, context }
    }

    pub fn iter(&self) -> impl Iterator<Item = ScoreRequest> + '_ {
        (0..).map(|i| self.request(i))
    }
}

/// The request stream for `spec`, without end.
pub fn generate_workload(spec: WorkloadSpec) -> Result<impl Iterator<Item = ScoreRequest>, WorkloadError> {
    let workload = Workload::new(spec)?;
    Ok((0..).map(move |i| workload.request(i)))
}
