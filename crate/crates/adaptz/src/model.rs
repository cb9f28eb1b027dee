//! Shared data model: links, samples, datasets, and their CSV form.
//!
//! A sample is one round of an adaptive experiment: the arm that was pulled
//! (index 0 is the all-zeros reference arm, index k ≥ 1 the basis vector
//! e_k), the nuisance covariates observed before the pull, the response,
//! and the selection probabilities the experimenter used for that round.
//! Estimators never see how the probabilities were produced — only their
//! values — so logged bandit data can be replayed from CSV.

use std::io::{BufRead, Write};

use nalgebra::DVector;

use crate::error::{Error, Result};
use crate::probvec::SelectionProbs;

/// Response link. `Identity` carries the (known) noise standard deviation
/// of the additive Gaussian error; `Logistic` has Bernoulli responses whose
/// conditional variance is determined by the mean.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LinkKind {
    Identity { noise_sd: f64 },
    Logistic,
}

impl LinkKind {
    /// Known response standard deviation entering the confidence intervals:
    /// the noise level for the identity link, 1 for the logistic link whose
    /// scores are already variance-normalized.
    pub fn response_sd(&self) -> f64 {
        match self {
            LinkKind::Identity { noise_sd } => *noise_sd,
            LinkKind::Logistic => 1.0,
        }
    }
}

/// Evaluates the link at linear predictor `eta`, returning the mean
/// `g(eta)`, the derivative `g'(eta)`, and the conditional response
/// variance at that mean.
///
/// The logistic branch is numerically stable for any finite `eta`: both the
/// mean and the derivative are computed from `exp(-|eta|)`, which never
/// overflows, so `g'` stays positive far beyond the range where the naive
/// `g(1-g)` product underflows to zero.
pub fn link_eval(link: LinkKind, eta: f64) -> (f64, f64, f64) {
    match link {
        LinkKind::Identity { noise_sd } => (eta, 1.0, noise_sd * noise_sd),
        LinkKind::Logistic => {
            let t = (-eta.abs()).exp();
            let denom = 1.0 + t;
            let g = if eta >= 0.0 { 1.0 / denom } else { t / denom };
            let g_prime = t / (denom * denom);
            (g, g_prime, g_prime)
        }
    }
}

/// Covariate vector for an arm: the zero vector for the reference arm 0,
/// the basis vector e_k for arm k ∈ 1..=d0.
pub fn covariate_vector(arm: usize, d0: usize) -> Result<DVector<f64>> {
    if arm > d0 {
        return Err(Error::Config(format!(
            "arm index {arm} out of range for {d0} non-reference arms"
        )));
    }
    let mut x = DVector::zeros(d0);
    if arm > 0 {
        x[arm - 1] = 1.0;
    }
    Ok(x)
}

/// The arm pulled in one round.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ArmDraw {
    pub index: usize,
}

/// One logged round of an adaptive experiment.
#[derive(Debug, Clone)]
pub struct Sample {
    pub arm: ArmDraw,
    pub z: DVector<f64>,
    pub y: f64,
    pub probs: SelectionProbs,
}

impl Sample {
    /// Covariate vector of the pulled arm.
    pub fn covariate(&self) -> DVector<f64> {
        covariate_vector(self.arm.index, self.probs.d0())
            .expect("arm index validated at dataset construction")
    }
}

/// A full adaptive dataset split into a pilot fold (`samples[..split_at]`)
/// and an inference fold (`samples[split_at..]`).
#[derive(Debug, Clone)]
pub struct Dataset {
    samples: Vec<Sample>,
    d0: usize,
    d1: usize,
    split_at: usize,
}

impl Dataset {
    /// Validates dimension agreement across rounds and the fold split.
    pub fn new(samples: Vec<Sample>, split_at: usize) -> Result<Self> {
        let first = samples
            .first()
            .ok_or_else(|| Error::Usage("dataset must contain at least one sample".into()))?;
        let d0 = first.probs.d0();
        let d1 = first.z.len();
        for (i, s) in samples.iter().enumerate() {
            if s.probs.d0() != d0 || s.z.len() != d1 {
                return Err(Error::Config(format!(
                    "sample {} has dimensions (d0 = {}, d1 = {}), expected ({d0}, {d1})",
                    i + 1,
                    s.probs.d0(),
                    s.z.len()
                )));
            }
            if s.arm.index > d0 {
                return Err(Error::Config(format!(
                    "sample {} pulls arm {} but there are only {d0} non-reference arms",
                    i + 1,
                    s.arm.index
                )));
            }
        }
        if split_at == 0 || split_at >= samples.len() {
            return Err(Error::Usage(format!(
                "fold split {split_at} must leave both folds non-empty (n = {})",
                samples.len()
            )));
        }
        Ok(Self { samples, d0, d1, split_at })
    }

    pub fn samples(&self) -> &[Sample] {
        &self.samples
    }

    /// Pilot fold: the first `split_at` rounds.
    pub fn fold1(&self) -> &[Sample] {
        &self.samples[..self.split_at]
    }

    /// Inference fold: the remaining rounds.
    pub fn fold2(&self) -> &[Sample] {
        &self.samples[self.split_at..]
    }

    pub fn n(&self) -> usize {
        self.samples.len()
    }

    pub fn n1(&self) -> usize {
        self.split_at
    }

    pub fn n2(&self) -> usize {
        self.samples.len() - self.split_at
    }

    pub fn d0(&self) -> usize {
        self.d0
    }

    pub fn d1(&self) -> usize {
        self.d1
    }

    pub fn split_at(&self) -> usize {
        self.split_at
    }

    /// Rebuilds the dataset with a different fold split.
    pub fn with_split(&self, split_at: usize) -> Result<Self> {
        Self::new(self.samples.clone(), split_at)
    }
}

/// Ground-truth parameters used by the generators and by coverage checks.
#[derive(Debug, Clone)]
pub struct TrueModel {
    pub theta_star: DVector<f64>,
    pub beta_star: DVector<f64>,
    pub link: LinkKind,
}

impl TrueModel {
    /// Linear predictor θ*_arm + ⟨β*, z⟩ (θ*_0 = 0 for the reference arm).
    pub fn eta(&self, arm: usize, z: &DVector<f64>) -> f64 {
        let arm_effect = if arm == 0 { 0.0 } else { self.theta_star[arm - 1] };
        arm_effect + self.beta_star.dot(z)
    }

    /// Mean response for an arm and nuisance covariates.
    pub fn mean(&self, arm: usize, z: &DVector<f64>) -> f64 {
        link_eval(self.link, self.eta(arm, z)).0
    }
}

/// Writes a dataset as CSV with header `i,arm,y,z_1..z_{d1},p_1..p_{d0}`.
///
/// The reference-arm probability is implied by the simplex constraint and
/// not stored. Floats are written in shortest round-trip form, so reading
/// the file back reproduces every stored value bit for bit.
pub fn write_csv<W: Write>(dataset: &Dataset, out: &mut W) -> Result<()> {
    let mut header = String::from("i,arm,y");
    for j in 1..=dataset.d1() {
        header.push_str(&format!(",z_{j}"));
    }
    for k in 1..=dataset.d0() {
        header.push_str(&format!(",p_{k}"));
    }
    writeln!(out, "{header}")?;
    for (i, s) in dataset.samples().iter().enumerate() {
        let mut line = format!("{},{},{}", i + 1, s.arm.index, s.y);
        for zj in s.z.iter() {
            line.push_str(&format!(",{zj}"));
        }
        for pk in s.probs.arm_probs() {
            line.push_str(&format!(",{pk}"));
        }
        writeln!(out, "{line}")?;
    }
    Ok(())
}

/// Reads a dataset written by [`write_csv`], recomputing each round's
/// reference-arm probability as 1 minus the stored arm probabilities.
/// Dimensions are inferred from the header; `split_at` sets the fold split.
pub fn read_csv<R: BufRead>(input: R, split_at: usize) -> Result<Dataset> {
    let mut lines = input.lines();
    let header = lines
        .next()
        .ok_or_else(|| Error::Parse("empty input: missing CSV header".into()))?
        .map_err(Error::Io)?;
    let fields: Vec<&str> = header.trim_end().split(',').collect();
    if fields.len() < 3 || fields[0] != "i" || fields[1] != "arm" || fields[2] != "y" {
        return Err(Error::Parse(format!(
            "unexpected CSV header, expected `i,arm,y,z_*,p_*`: {header}"
        )));
    }
    let d1 = fields[3..].iter().take_while(|f| f.starts_with("z_")).count();
    let d0 = fields[3 + d1..].iter().take_while(|f| f.starts_with("p_")).count();
    if d0 == 0 || fields.len() != 3 + d1 + d0 {
        return Err(Error::Parse(format!(
            "unexpected CSV header, expected `i,arm,y,z_*,p_*`: {header}"
        )));
    }
    for (j, f) in fields[3..3 + d1].iter().enumerate() {
        if **f != format!("z_{}", j + 1) {
            return Err(Error::Parse(format!("unexpected covariate column `{f}`")));
        }
    }
    for (k, f) in fields[3 + d1..].iter().enumerate() {
        if **f != format!("p_{}", k + 1) {
            return Err(Error::Parse(format!("unexpected probability column `{f}`")));
        }
    }

    let mut samples = Vec::new();
    for (row_idx, line) in lines.enumerate() {
        let line = line.map_err(Error::Io)?;
        if line.trim().is_empty() {
            continue;
        }
        let row = row_idx + 1;
        let cells: Vec<&str> = line.trim_end().split(',').collect();
        if cells.len() != 3 + d1 + d0 {
            return Err(Error::Parse(format!(
                "row {row}: expected {} fields, found {}",
                3 + d1 + d0,
                cells.len()
            )));
        }
        let parse_f64 = |cell: &str, what: &str| -> Result<f64> {
            cell.parse::<f64>()
                .map_err(|_| Error::Parse(format!("row {row}: invalid {what} `{cell}`")))
        };
        let i: usize = cells[0]
            .parse()
            .map_err(|_| Error::Parse(format!("row {row}: invalid round index `{}`", cells[0])))?;
        if i != row {
            return Err(Error::Parse(format!(
                "row {row}: round index {i} out of order"
            )));
        }
        let arm: usize = cells[1]
            .parse()
            .map_err(|_| Error::Parse(format!("row {row}: invalid arm `{}`", cells[1])))?;
        let y = parse_f64(cells[2], "response")?;
        let mut z = DVector::zeros(d1);
        for j in 0..d1 {
            z[j] = parse_f64(cells[3 + j], "covariate")?;
        }
        let mut p = Vec::with_capacity(d0);
        for k in 0..d0 {
            p.push(parse_f64(cells[3 + d1 + k], "probability")?);
        }
        let p0 = 1.0 - p.iter().sum::<f64>();
        let probs = SelectionProbs::new(p0, p)
            .map_err(|e| Error::Parse(format!("row {row}: {e}")))?;
        samples.push(Sample { arm: ArmDraw { index: arm }, z, y, probs });
    }
    Dataset::new(samples, split_at)
}
