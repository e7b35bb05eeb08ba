use std::collections::BTreeMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{InteractionRecord, TaskDataset};
use crate::error::{Error, Result};
use crate::numcore::keyed_rng;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SyntheticRule {
    /// Each problem carries a parity bit and each learner a latent bit; the
    /// response is correct iff they match, flipped with probability `noise`.
    #[default]
    ParityMatchesUserBit,
}

/// Recipe for a reproducible multi-school fixture.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticSpec {
    pub num_schools: usize,
    pub users_per_school: usize,
    pub problems_per_school: usize,
    pub responses_per_user: usize,
    /// Fraction of each school's vocabulary drawn from a pool shared by all schools.
    pub overlap_fraction: f64,
    pub noise: f64,
    pub rule: SyntheticRule,
    pub seed: u64,
    /// Namespaces school, user and problem ids so separately generated fixtures never collide.
    pub prefix: String,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            num_schools: 2,
            users_per_school: 50,
            problems_per_school: 20,
            responses_per_user: 120,
            overlap_fraction: 0.5,
            noise: 0.1,
            rule: SyntheticRule::ParityMatchesUserBit,
            seed: 0,
            prefix: "syn".into(),
        }
    }
}

impl SyntheticSpec {
    pub fn school_id(&self, s: usize) -> String {
        format!("{}{}", self.prefix, s + 1)
    }
}

pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<BTreeMap<String, TaskDataset>> {
    if !(0.0..=1.0).contains(&spec.overlap_fraction) {
        return Err(Error::Parameter(format!(
            "overlap_fraction {} outside [0,1]",
            spec.overlap_fraction
        )));
    }
    if !(0.0..=1.0).contains(&spec.noise) {
        return Err(Error::Parameter(format!("noise {} outside [0,1]", spec.noise)));
    }
    if spec.problems_per_school == 0 {
        return Err(Error::Parameter("problems_per_school must be positive".into()));
    }
    let shared = (spec.overlap_fraction * spec.problems_per_school as f64).round() as usize;
    let shared_pool: Vec<(String, u8)> = (0..shared)
        .map(|k| (format!("{}-shared-{k}", spec.prefix), (k % 2) as u8))
        .collect();

    let mut out = BTreeMap::new();
    for s in 0..spec.num_schools {
        let school = spec.school_id(s);
        let mut vocab = shared_pool.clone();
        vocab.extend(
            (0..spec.problems_per_school - shared)
                .map(|k| (format!("{school}-own-{k}"), (k % 2) as u8)),
        );
        let mut ds = TaskDataset::new(school.clone());
        for u in 0..spec.users_per_school {
            let user = format!("{school}-u{u:03}");
            let mut rng = keyed_rng(spec.seed, &[s as u64, u as u64]);
            let user_bit: u8 = rng.random_range(0..2);
            let history = (0..spec.responses_per_user)
                .map(|t| {
                    let (problem, parity) = &vocab[rng.random_range(0..vocab.len())];
                    let mut correct = match spec.rule {
                        SyntheticRule::ParityMatchesUserBit => u8::from(*parity == user_bit),
                    };
                    if rng.random::<f64>() < spec.noise {
                        correct ^= 1;
                    }
                    InteractionRecord {
                        user_id: user.clone(),
                        problem_id: problem.clone(),
                        school_id: school.clone(),
                        correct,
                        order_index: t as u32,
                    }
                })
                .collect();
            ds.users.insert(user, history);
        }
        out.insert(school, ds);
    }
    Ok(out)
}
