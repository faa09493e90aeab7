//! Synthetic survey generator with planted group structure.
//!
//! Each group cell gets its own proportional-odds outcome model and a
//! controllable miscalibration knob: reported probabilities are the
//! true class probabilities raised to a per-group power γ and
//! renormalized. γ = 1 reports the truth, γ > 1 sharpens (overconfident),
//! γ < 1 flattens (underconfident). Because every respondent's data is
//! derived from a counter-based stream keyed by the group label, cells
//! are independent: adding, removing, or permuting groups never changes
//! another group's respondents.

use std::collections::BTreeMap;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::data::{ProbabilityMatrix, RespondentRecord, SurveyDataset};
use crate::error::{AuditError, Result};
use crate::rng::{counter_seed, fnv1a64};

/// How respondent survey weights are drawn.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "law", rename_all = "snake_case")]
pub enum WeightLaw {
    /// Every respondent gets the same weight.
    Constant { value: f64 },
    /// exp(mu + sigma·Z) with Z standard normal.
    Lognormal { mu: f64, sigma: f64 },
}

impl Default for WeightLaw {
    fn default() -> Self {
        WeightLaw::Constant { value: 1.0 }
    }
}

/// One planted group cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CellSpec {
    pub label: String,
    pub size: usize,
    /// Miscalibration power: reported p̃ ∝ p^γ.
    pub gamma: f64,
    /// Proportional-odds cutpoints, strictly increasing, length K−1.
    pub cutpoints: Vec<f64>,
    /// Multiplies the shared informativeness when forming this group's
    /// coefficient vector.
    pub coef_scale: f64,
}

/// Full generator specification; two identical configs produce
/// byte-identical output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GeneratorConfig {
    pub groups: Vec<CellSpec>,
    pub n_classes: usize,
    pub covariate_dim: usize,
    /// Scales every group's coefficient vector; 0 makes covariates
    /// carry no signal, so each group's class distribution is exactly
    /// its cutpoint-implied marginal.
    pub informativeness: f64,
    #[serde(default)]
    pub weight_law: WeightLaw,
    pub master_seed: u64,
}

/// What the generator planted, for downstream verification.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GeneratorManifest {
    pub config: GeneratorConfig,
    /// Class distribution at zero linear predictor per group. Exact
    /// marginal when informativeness = 0.
    pub class_probs_at_zero_eta: BTreeMap<String, Vec<f64>>,
    /// Expected (confidence − accuracy) of the reported argmax at
    /// informativeness 0, per group: positive for γ > 1.
    pub expected_overconfidence_at_zero_info: BTreeMap<String, f64>,
}

impl GeneratorManifest {
    pub fn save_json(&self, path: &Path) -> Result<()> {
        Ok(std::fs::write(path, serde_json::to_string_pretty(self)?)?)
    }
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Proportional-odds class probabilities at linear predictor `eta`.
fn class_probs_at_eta(cutpoints: &[f64], eta: f64) -> Vec<f64> {
    let k = cutpoints.len() + 1;
    let mut probs = Vec::with_capacity(k);
    let mut prev = 0.0;
    for &theta in cutpoints {
        let cdf = sigmoid(theta - eta);
        probs.push((cdf - prev).max(0.0));
        prev = cdf;
    }
    probs.push((1.0 - prev).max(0.0));
    probs
}

/// Power-distort a probability row: p̃_c = p_c^γ / Σ_d p_d^γ.
pub fn distort(row: &[f64], gamma: f64) -> Vec<f64> {
    let powed: Vec<f64> = row.iter().map(|p| p.powf(gamma)).collect();
    let total: f64 = powed.iter().sum();
    powed.iter().map(|p| p / total).collect()
}

fn validate(config: &GeneratorConfig) -> Result<()> {
    if config.n_classes < 2 {
        return Err(AuditError::Config(format!(
            "n_classes must be at least 2, got {}",
            config.n_classes
        )));
    }
    if config.groups.is_empty() {
        return Err(AuditError::Config("generator needs at least one group".into()));
    }
    if !(config.informativeness >= 0.0 && config.informativeness.is_finite()) {
        return Err(AuditError::Config(format!(
            "informativeness must be finite and non-negative, got {}",
            config.informativeness
        )));
    }
    let mut seen = std::collections::HashSet::new();
    for cell in &config.groups {
        if cell.label.is_empty() || !seen.insert(cell.label.as_str()) {
            return Err(AuditError::Config(format!(
                "group labels must be unique and non-empty: '{}'",
                cell.label
            )));
        }
        if cell.size == 0 {
            return Err(AuditError::Config(format!(
                "group '{}' has size 0",
                cell.label
            )));
        }
        if !(cell.gamma > 0.0 && cell.gamma.is_finite()) {
            return Err(AuditError::Config(format!(
                "group '{}': gamma must be finite and positive, got {}",
                cell.label, cell.gamma
            )));
        }
        if cell.cutpoints.len() != config.n_classes - 1 {
            return Err(AuditError::Config(format!(
                "group '{}': expected {} cutpoints, got {}",
                cell.label,
                config.n_classes - 1,
                cell.cutpoints.len()
            )));
        }
        if cell.cutpoints.windows(2).any(|w| w[0] >= w[1]) {
            return Err(AuditError::Config(format!(
                "group '{}': cutpoints must be strictly increasing",
                cell.label
            )));
        }
    }
    match config.weight_law {
        WeightLaw::Constant { value } => {
            if !(value > 0.0 && value.is_finite()) {
                return Err(AuditError::Config(format!(
                    "constant weight must be finite and positive, got {value}"
                )));
            }
        }
        WeightLaw::Lognormal { mu, sigma } => {
            if !mu.is_finite() || !(sigma >= 0.0 && sigma.is_finite()) {
                return Err(AuditError::Config(format!(
                    "lognormal weight law needs finite mu and non-negative sigma, got mu={mu} sigma={sigma}"
                )));
            }
        }
    }
    Ok(())
}

/// Per-coordinate coefficient for a cell: all coordinates share
/// coef_scale·informativeness/√dim so the linear predictor's variance
/// is dim-invariant.
fn coefficient(config: &GeneratorConfig, cell: &CellSpec) -> f64 {
    if config.covariate_dim == 0 {
        return 0.0;
    }
    cell.coef_scale * config.informativeness / (config.covariate_dim as f64).sqrt()
}

struct DrawnRespondent {
    covariates: Vec<f64>,
    outcome: usize,
    weight: f64,
    true_probs: Vec<f64>,
    reported_probs: Vec<f64>,
}

/// Draw one respondent for `cell` from `rng`. Consumes a fixed number
/// of RNG values per call for a given config, so streams are
/// prefix-stable.
fn draw_respondent(
    config: &GeneratorConfig,
    cell: &CellSpec,
    rng: &mut ChaCha8Rng,
) -> DrawnRespondent {
    let beta = coefficient(config, cell);
    let covariates: Vec<f64> = (0..config.covariate_dim)
        .map(|_| rng.sample::<f64, _>(StandardNormal))
        .collect();
    let eta: f64 = covariates.iter().map(|x| beta * x).sum();
    let true_probs = class_probs_at_eta(&cell.cutpoints, eta);
    let u: f64 = rng.random();
    let mut outcome = config.n_classes;
    let mut cum = 0.0;
    for (c, p) in true_probs.iter().enumerate() {
        cum += p;
        if u < cum {
            outcome = c + 1;
            break;
        }
    }
    let weight = match config.weight_law {
        WeightLaw::Constant { value } => value,
        WeightLaw::Lognormal { mu, sigma } => {
            let z: f64 = rng.sample(StandardNormal);
            (mu + sigma * z).exp()
        }
    };
    let reported_probs = distort(&true_probs, cell.gamma);
    DrawnRespondent {
        covariates,
        outcome,
        weight,
        true_probs,
        reported_probs,
    }
}

fn manifest_for(config: &GeneratorConfig) -> GeneratorManifest {
    let mut class_probs_at_zero_eta = BTreeMap::new();
    let mut expected_overconfidence_at_zero_info = BTreeMap::new();
    for cell in &config.groups {
        let p0 = class_probs_at_eta(&cell.cutpoints, 0.0);
        let reported = distort(&p0, cell.gamma);
        let yhat = crate::evaluation::argmax_label(&reported);
        // At informativeness 0 every respondent shares p0, so expected
        // argmax accuracy is p0[ŷ] and expected confidence p̃[ŷ].
        expected_overconfidence_at_zero_info
            .insert(cell.label.clone(), reported[yhat - 1] - p0[yhat - 1]);
        class_probs_at_zero_eta.insert(cell.label.clone(), p0);
    }
    GeneratorManifest {
        config: config.clone(),
        class_probs_at_zero_eta,
        expected_overconfidence_at_zero_info,
    }
}

/// Generate the full planted population: dataset, reported
/// probabilities, and the manifest describing what was planted.
pub fn generate(
    config: &GeneratorConfig,
) -> Result<(SurveyDataset, ProbabilityMatrix, GeneratorManifest)> {
    let (ds, probs, manifest, _truth) = generate_with_truth(config)?;
    Ok((ds, probs, manifest))
}

/// Like [`generate`], additionally returning each respondent's true
/// (undistorted) class probabilities in dataset row order.
pub fn generate_with_truth(
    config: &GeneratorConfig,
) -> Result<(SurveyDataset, ProbabilityMatrix, GeneratorManifest, Vec<Vec<f64>>)> {
    validate(config)?;
    let mut respondents = Vec::new();
    let mut ids = Vec::new();
    let mut reported_rows = Vec::new();
    let mut true_rows = Vec::new();
    for (gi, cell) in config.groups.iter().enumerate() {
        // Key the stream by label, not ordinal, so reordering or
        // adding groups leaves this cell's draws untouched.
        let mut rng =
            ChaCha8Rng::seed_from_u64(counter_seed(config.master_seed, fnv1a64(cell.label.as_bytes())));
        for i in 0..cell.size {
            let d = draw_respondent(config, cell, &mut rng);
            let id = format!("{}-{:05}", cell.label, i);
            respondents.push(RespondentRecord {
                id: id.clone(),
                outcome: d.outcome,
                group: gi + 1,
                weight: d.weight,
                covariates: Some(d.covariates),
            });
            ids.push(id);
            reported_rows.push(d.reported_probs);
            true_rows.push(d.true_probs);
        }
    }
    let labels: Vec<String> = config.groups.iter().map(|c| c.label.clone()).collect();
    let ds = SurveyDataset::new(respondents, config.n_classes, labels)?;
    let probs = ProbabilityMatrix::new(
        "synthetic-oracle",
        ids,
        reported_rows,
        ProbabilityMatrix::STRICT_TOLERANCE,
    )?;
    Ok((ds, probs, manifest_for(config), true_rows))
}

/// I.i.d. respondent sampler over the mixture implied by the group
/// sizes. Draws with the same seed are prefix-stable: the first n
/// respondents of draw(n+m) equal draw(n).
pub struct ExchangeableSampler {
    config: GeneratorConfig,
    cum_sizes: Vec<usize>,
    total: usize,
}

impl ExchangeableSampler {
    pub fn new(config: GeneratorConfig) -> Result<Self> {
        validate(&config)?;
        let mut cum = Vec::with_capacity(config.groups.len());
        let mut total = 0usize;
        for cell in &config.groups {
            total += cell.size;
            cum.push(total);
        }
        Ok(ExchangeableSampler {
            config,
            cum_sizes: cum,
            total,
        })
    }

    pub fn config(&self) -> &GeneratorConfig {
        &self.config
    }

    /// Draw n i.i.d. respondents; group choice is proportional to the
    /// planted sizes. Returns the dataset and reported probabilities.
    pub fn draw(&self, n: usize, seed: u64) -> Result<(SurveyDataset, ProbabilityMatrix)> {
        if n == 0 {
            return Err(AuditError::Config("cannot draw 0 respondents".into()));
        }
        let mut rng =
            ChaCha8Rng::seed_from_u64(counter_seed(self.config.master_seed, seed));
        let mut respondents = Vec::with_capacity(n);
        let mut ids = Vec::with_capacity(n);
        let mut rows = Vec::with_capacity(n);
        for i in 0..n {
            let pick: f64 = rng.random::<f64>() * self.total as f64;
            let gi = self
                .cum_sizes
                .iter()
                .position(|&c| pick < c as f64)
                .unwrap_or(self.config.groups.len() - 1);
            let cell = &self.config.groups[gi];
            let d = draw_respondent(&self.config, cell, &mut rng);
            let id = format!("x{i:06}");
            respondents.push(RespondentRecord {
                id: id.clone(),
                outcome: d.outcome,
                group: gi + 1,
                weight: d.weight,
                covariates: Some(d.covariates),
            });
            ids.push(id);
            rows.push(d.reported_probs);
        }
        let labels: Vec<String> =
            self.config.groups.iter().map(|c| c.label.clone()).collect();
        let ds = SurveyDataset::new(respondents, self.config.n_classes, labels)?;
        let probs = ProbabilityMatrix::new(
            "synthetic-oracle",
            ids,
            rows,
            ProbabilityMatrix::STRICT_TOLERANCE,
        )?;
        Ok((ds, probs))
    }
}
