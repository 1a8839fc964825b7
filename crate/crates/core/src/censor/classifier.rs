//! Naive-Bayes flow classifier over discretized packet lengths and
//! inter-arrival times.

use std::collections::BTreeMap;

use thiserror::Error;

use crate::time::SimDuration;

pub const LEN_BUCKET: usize = 50;
pub const IAT_BUCKET_US: u64 = 5_000;
const LEN_BUCKETS: usize = 1500 / LEN_BUCKET + 1;
/// Inter-arrival times beyond one second share the last bucket.
const IAT_BUCKETS: u64 = 201;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ClassifierError {
    #[error("need at least two labelled classes, got {0}")]
    TooFewClasses(usize),
    #[error("class `{0}` has no samples")]
    EmptyClass(String),
}

/// Packet features of a flow, in arrival order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct FlowSample {
    pub lengths: Vec<usize>,
    /// Gaps between consecutive packets; one fewer than `lengths`.
    pub iats: Vec<SimDuration>,
}

impl FlowSample {
    pub fn push(&mut self, len: usize, gap: Option<SimDuration>) {
        self.lengths.push(len);
        if let Some(g) = gap {
            self.iats.push(g);
        }
    }
}

fn len_bucket(len: usize) -> usize {
    (len / LEN_BUCKET).min(LEN_BUCKETS - 1)
}

fn iat_bucket(gap: SimDuration) -> u64 {
    (gap.as_micros() / IAT_BUCKET_US).min(IAT_BUCKETS - 1)
}

#[derive(Debug, Clone, PartialEq)]
struct ClassModel {
    label: String,
    len_logp: Vec<f64>,
    iat_logp: Vec<f64>,
}

fn laplace_log(counts: &[u64]) -> Vec<f64> {
    let total: u64 = counts.iter().sum();
    let denom = (total + counts.len() as u64) as f64;
    counts.iter().map(|&c| ((c + 1) as f64 / denom).ln()).collect()
}

/// Per-class log-likelihoods of one flow.
#[derive(Debug, Clone, PartialEq)]
pub struct Scores {
    pub labels: Vec<String>,
    pub length: Vec<f64>,
    pub timing: Vec<f64>,
}

impl Scores {
    fn margin(values: &[f64], k: usize) -> f64 {
        let best_other = values
            .iter()
            .enumerate()
            .filter(|&(j, _)| j != k)
            .map(|(_, &v)| v)
            .fold(f64::NEG_INFINITY, f64::max);
        values[k] - best_other
    }

    /// Lead of class `k` over the runner-up on length features alone.
    pub fn length_margin(&self, k: usize) -> f64 {
        Self::margin(&self.length, k)
    }

    pub fn timing_margin(&self, k: usize) -> f64 {
        Self::margin(&self.timing, k)
    }

    pub fn total(&self) -> Vec<f64> {
        self.length.iter().zip(&self.timing).map(|(a, b)| a + b).collect()
    }
}

/// Immutable trained model; share it behind an `Arc`.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassifierModel {
    classes: Vec<ClassModel>,
}

/// Trains one class per distinct label. Equal class priors are assumed.
pub fn train_flow_classifier(labelled: &[(String, FlowSample)]) -> Result<ClassifierModel, ClassifierError> {
    let mut grouped: BTreeMap<&str, (Vec<u64>, Vec<u64>)> = BTreeMap::new();
    for (label, sample) in labelled {
        let (lc, ic) = grouped
            .entry(label.as_str())
            .or_insert_with(|| (vec![0; LEN_BUCKETS], vec![0; IAT_BUCKETS as usize]));
        for &l in &sample.lengths {
            lc[len_bucket(l)] += 1;
        }
        for &g in &sample.iats {
            ic[iat_bucket(g) as usize] += 1;
        }
    }
    if grouped.len() < 2 {
        return Err(ClassifierError::TooFewClasses(grouped.len()));
    }
    let mut classes = Vec::new();
    for (label, (lc, ic)) in grouped {
        if lc.iter().sum::<u64>() == 0 {
            return Err(ClassifierError::EmptyClass(label.to_string()));
        }
        classes.push(ClassModel {
            label: label.to_string(),
            len_logp: laplace_log(&lc),
            iat_logp: laplace_log(&ic),
        });
    }
    Ok(ClassifierModel { classes })
}

impl ClassifierModel {
    pub fn labels(&self) -> Vec<&str> {
        self.classes.iter().map(|c| c.label.as_str()).collect()
    }

    pub fn index_of(&self, label: &str) -> Option<usize> {
        self.classes.iter().position(|c| c.label == label)
    }

    pub fn scores(&self, flow: &FlowSample) -> Scores {
        let mut s = Scores {
            labels: self.classes.iter().map(|c| c.label.clone()).collect(),
            length: vec![0.0; self.classes.len()],
            timing: vec![0.0; self.classes.len()],
        };
        for (k, c) in self.classes.iter().enumerate() {
            s.length[k] = flow.lengths.iter().map(|&l| c.len_logp[len_bucket(l)]).sum();
            s.timing[k] = flow.iats.iter().map(|&g| c.iat_logp[iat_bucket(g) as usize]).sum();
        }
        s
    }
}

/// Most likely class and its total log-likelihood.
pub fn classify_flow(model: &ClassifierModel, flow: &FlowSample) -> (String, f64) {
    let s = model.scores(flow);
    let total = s.total();
    let (k, v) = total
        .iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |acc, (i, &v)| if v > acc.1 { (i, v) } else { acc });
    (s.labels[k].clone(), v)
}
