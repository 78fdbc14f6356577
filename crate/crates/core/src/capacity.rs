//! Margins, spectral capacity scores and bound terms.
//!
//! With per-layer spectral norms `s_i = ‖W_i‖₂`, Frobenius norms `f_i`,
//! `P = Π s_i` and `F = Σ f_i² / s_i²`:
//!
//! ```text
//! lip_bar = P · Σ_i Π_{j≤i} s_j
//! Φ_erm   = P² F
//! Φ_fgm   = (P (1 + (ε/κ) lip_bar))² F
//! Φ_pgm   = (P (1 + (α/κ) S_r(q) lip_bar))² F,   q = (2α/κ) lip_bar,  S_r(q) = Σ_{i<r} q^i
//! Φ_wrm   = (P (1 + lip_bar / (λ − lip_bar)))² F
//! ```
//!
//! A zero layer contributes 0 to `F` (its ratio is taken as 0). All spectral
//! norms are evaluation-grade estimates.

use std::fmt::Write as _;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal, Uniform};
use serde::{Deserialize, Serialize};

use crate::attacks::{perturb_flat, AttackConfig, AttackFamily};
use crate::error::{Error, Result};
use crate::harness::LabeledDataset;
use crate::netcore::{argmax, norm_l2, Loss, Network};
use crate::specnorm::{layer_sigma, SnConfig};

/// Default lower floor for `κ`.
pub const KAPPA_MIN: f64 = 1e-8;

/// Rows per batched forward/gradient pass over a dataset.
const CHUNK: usize = 512;

/// `f[y] − max_{j≠y} f[j]`.
pub fn margin(logits: &[f64], y: usize) -> Result<f64> {
    if logits.len() < 2 {
        return Err(Error::input(format!("margin needs at least 2 logits, got {}", logits.len())));
    }
    if y >= logits.len() {
        return Err(Error::input(format!("label {y} out of range for {} logits", logits.len())));
    }
    let other = logits
        .iter()
        .enumerate()
        .filter(|&(j, _)| j != y)
        .map(|(_, &v)| v)
        .fold(f64::NEG_INFINITY, f64::max);
    Ok(logits[y] - other)
}

/// Per-sample margins at `x + δ(x)` (δ = 0 for family `none`).
pub fn margins(net: &Network, dataset: &LabeledDataset, attack: &AttackConfig) -> Result<Vec<f64>> {
    let d = net.input_len();
    let m = net.classes();
    let mut out = Vec::with_capacity(dataset.len());
    for (xs, ys) in dataset.samples().chunks(CHUNK * d).zip(dataset.labels().chunks(CHUNK)) {
        let pts = perturb_flat(net, Loss::CrossEntropy, xs, ys, attack)?;
        let logits = net.forward_batch(&pts, ys.len())?;
        for (row, &y) in logits.chunks_exact(m).zip(ys) {
            out.push(margin(row, y)?);
        }
    }
    Ok(out)
}

/// Fraction of samples whose (attacked) margin is at most `gamma`.
pub fn margin_loss(net: &Network, dataset: &LabeledDataset, gamma: f64, attack: &AttackConfig) -> Result<f64> {
    if !(gamma >= 0.0) {
        return Err(Error::input(format!("gamma must be >= 0, got {gamma}")));
    }
    if dataset.is_empty() {
        return Err(Error::input("empty dataset"));
    }
    let ms = margins(net, dataset, attack)?;
    Ok(ms.iter().filter(|&&m| m <= gamma).count() as f64 / ms.len() as f64)
}

/// Classification accuracy at `x + δ(x)`; ties resolve to the lowest class.
pub fn accuracy(net: &Network, dataset: &LabeledDataset, attack: &AttackConfig) -> Result<f64> {
    if dataset.is_empty() {
        return Err(Error::input("empty dataset"));
    }
    let d = net.input_len();
    let m = net.classes();
    let mut correct = 0usize;
    for (xs, ys) in dataset.samples().chunks(CHUNK * d).zip(dataset.labels().chunks(CHUNK)) {
        let pts = perturb_flat(net, Loss::CrossEntropy, xs, ys, attack)?;
        let logits = net.forward_batch(&pts, ys.len())?;
        correct += logits
            .chunks_exact(m)
            .zip(ys)
            .filter(|(row, &y)| argmax(row) == y)
            .count();
    }
    Ok(correct as f64 / dataset.len() as f64)
}

/// Evaluation-grade spectral and Frobenius norms of every layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerNorms {
    pub spectral: Vec<f64>,
    pub frobenius: Vec<f64>,
}

impl LayerNorms {
    pub fn of(net: &Network) -> Self {
        let cfg = SnConfig::new(f64::INFINITY);
        Self {
            spectral: net.layers().iter().map(|l| layer_sigma(l, &cfg).sigma).collect(),
            frobenius: net.layers().iter().map(|l| l.frobenius_norm()).collect(),
        }
    }

    /// `Π s_i`.
    pub fn product(&self) -> f64 {
        self.spectral.iter().product()
    }

    /// Geometric mean `β_w` of the spectral norms.
    pub fn geometric_mean(&self) -> f64 {
        let d = self.spectral.len() as f64;
        if self.spectral.iter().any(|&s| s == 0.0) {
            return 0.0;
        }
        (self.spectral.iter().map(|s| s.ln()).sum::<f64>() / d).exp()
    }

    /// `Σ f_i² / s_i²`, with zero layers contributing 0.
    pub fn frobenius_ratio_sum(&self) -> f64 {
        self.spectral
            .iter()
            .zip(&self.frobenius)
            .map(|(&s, &f)| if s == 0.0 { 0.0 } else { (f / s) * (f / s) })
            .sum()
    }

    /// `P · Σ_i Π_{j≤i} s_j`.
    pub fn lip_bar(&self) -> f64 {
        let mut prefix = 1.0;
        let mut sum = 0.0;
        for &s in &self.spectral {
            prefix *= s;
            sum += prefix;
        }
        self.product() * sum
    }

    fn phi_with_factor(&self, factor: f64) -> f64 {
        let p = self.product() * factor;
        p * p * self.frobenius_ratio_sum()
    }

    pub fn phi_erm(&self) -> f64 {
        self.phi_with_factor(1.0)
    }

    pub fn phi_fgm(&self, epsilon: f64, kappa: f64) -> Result<f64> {
        check_kappa(kappa)?;
        Ok(self.phi_with_factor(1.0 + (epsilon / kappa) * self.lip_bar()))
    }

    pub fn phi_pgm(&self, kappa: f64, steps: usize, alpha: f64) -> Result<f64> {
        check_kappa(kappa)?;
        if steps == 0 {
            return Err(Error::input("pgm steps must be >= 1"));
        }
        let lip = self.lip_bar();
        let q = 2.0 * alpha / kappa * lip;
        let series = geometric_sum(q, steps);
        Ok(self.phi_with_factor(1.0 + (alpha / kappa) * series * lip))
    }

    pub fn phi_wrm(&self, lambda: f64) -> Result<f64> {
        let lip = self.lip_bar();
        if !(lambda > lip) {
            return Err(Error::Validity(format!(
                "wrm capacity needs lambda > lip_bar, got lambda {lambda} <= {lip}"
            )));
        }
        Ok(self.phi_with_factor(1.0 + lip / (lambda - lip)))
    }

    /// Smallest `M ≥ 1` with `1/M ≤ s_i/β_w ≤ M` for every layer.
    pub fn default_m(&self) -> f64 {
        let bw = self.geometric_mean();
        if bw == 0.0 {
            return 1.0;
        }
        self.spectral
            .iter()
            .map(|&s| (s / bw).max(bw / s))
            .fold(1.0, f64::max)
    }
}

fn check_kappa(kappa: f64) -> Result<()> {
    if !(kappa > 0.0) {
        return Err(Error::input(format!("kappa must be > 0, got {kappa}")));
    }
    Ok(())
}

/// `Σ_{i=0}^{r−1} q^i`, summed term by term.
pub fn geometric_sum(q: f64, r: usize) -> f64 {
    let mut term = 1.0;
    let mut sum = 0.0;
    for _ in 0..r {
        sum += term;
        term *= q;
    }
    sum
}

pub fn lip_bar(net: &Network) -> f64 {
    LayerNorms::of(net).lip_bar()
}

pub fn phi_erm(net: &Network) -> f64 {
    LayerNorms::of(net).phi_erm()
}

pub fn phi_fgm(net: &Network, epsilon: f64, kappa: f64) -> Result<f64> {
    LayerNorms::of(net).phi_fgm(epsilon, kappa)
}

/// `epsilon` does not enter the score itself (only the bound's radius).
pub fn phi_pgm(net: &Network, _epsilon: f64, kappa: f64, steps: usize, alpha: f64) -> Result<f64> {
    LayerNorms::of(net).phi_pgm(kappa, steps, alpha)
}

pub fn phi_wrm(net: &Network, lambda: f64) -> Result<f64> {
    LayerNorms::of(net).phi_wrm(lambda)
}

/// `B = max ‖x‖₂` over the dataset, recomputed from the samples.
pub fn data_radius(dataset: &LabeledDataset) -> f64 {
    dataset.recompute_radius()
}

/// Outcome of [`estimate_kappa`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KappaEstimate {
    /// `max(raw_min, floor)`.
    pub kappa: f64,
    /// Smallest gradient norm observed.
    pub raw_min: f64,
}

/// Minimum of `‖∇ₓ ℓ‖₂` over every sample and `probes` uniform points of the
/// ℓ₂ ball of radius `attack_radius` around it, floored at `floor`.
pub fn estimate_kappa_with(
    net: &Network,
    dataset: &LabeledDataset,
    attack_radius: f64,
    probes: usize,
    seed: u64,
    floor: f64,
) -> Result<KappaEstimate> {
    if dataset.is_empty() {
        return Err(Error::input("empty dataset"));
    }
    let d = net.input_len();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let unit = Uniform::new(0.0f64, 1.0).expect("valid range");
    let mut raw_min = f64::INFINITY;
    for (xs, ys) in dataset.samples().chunks(CHUNK * d).zip(dataset.labels().chunks(CHUNK)) {
        let n = ys.len();
        let mut pts = xs.to_vec();
        let mut labels = ys.to_vec();
        if attack_radius > 0.0 {
            for _ in 0..probes {
                for x in xs.chunks_exact(d) {
                    let mut dir: Vec<f64> = (0..d).map(|_| StandardNormal.sample(&mut rng)).collect();
                    let norm = norm_l2(&dir);
                    let radius = attack_radius * unit.sample(&mut rng).powf(1.0 / d as f64);
                    dir.iter_mut().for_each(|v| *v *= radius / norm);
                    pts.extend(x.iter().zip(&dir).map(|(a, b)| a + b));
                }
                labels.extend_from_slice(ys);
            }
        }
        debug_assert_eq!(labels.len() % n, 0);
        let (g, _) = net.grad_input_batch(Loss::CrossEntropy, &pts, &labels)?;
        for row in g.chunks_exact(d) {
            raw_min = raw_min.min(norm_l2(row));
        }
    }
    Ok(KappaEstimate {
        kappa: raw_min.max(floor),
        raw_min,
    })
}

/// [`estimate_kappa_with`] using 2 probes per sample and the default floor.
pub fn estimate_kappa(net: &Network, dataset: &LabeledDataset, attack_radius: f64) -> Result<KappaEstimate> {
    estimate_kappa_with(net, dataset, attack_radius, 2, 0x6b61_7070_61, KAPPA_MIN)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Theorem {
    Erm,
    Fgm,
    Pgm,
    Wrm,
}

/// Parameters of the bound expressions.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoundParams {
    pub gamma: f64,
    pub eta: f64,
    pub n: usize,
    /// Spectral-norm ratio bound; `None` uses [`LayerNorms::default_m`].
    pub m: Option<f64>,
    pub tau: f64,
    /// Width `h`; `None` takes it from the report.
    pub h: Option<usize>,
    /// Depth `d`; `None` takes it from the report.
    pub d: Option<usize>,
}

impl BoundParams {
    pub fn new(gamma: f64, n: usize) -> Self {
        Self {
            gamma,
            eta: 0.05,
            n,
            m: None,
            tau: 0.5,
            h: None,
            d: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.gamma > 0.0) {
            return Err(Error::config(format!("gamma must be > 0, got {}", self.gamma)));
        }
        if !(self.eta > 0.0 && self.eta < 1.0) {
            return Err(Error::config(format!("eta must be in (0, 1), got {}", self.eta)));
        }
        if self.n == 0 {
            return Err(Error::config("n must be >= 1"));
        }
        if let Some(m) = self.m {
            if !(m >= 1.0) {
                return Err(Error::config(format!("M must be >= 1, got {m}")));
            }
        }
        if !(self.tau > 0.0 && self.tau < 1.0) {
            return Err(Error::config(format!("tau must be in (0, 1), got {}", self.tau)));
        }
        Ok(())
    }
}

/// A bound right-hand side with all hidden constants set to 1:
/// `value = √((capacity_part + log_part) / (γ² n))`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoundTerm {
    /// `R² d² h log(dh) Φ`.
    pub capacity_part: f64,
    /// `d log(c · d n log M / η)` with the theorem's extra factor `c`.
    pub log_part: f64,
    pub value: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoundTerms {
    pub erm: BoundTerm,
    pub fgm: BoundTerm,
    pub pgm: BoundTerm,
    /// Absent when the WRM standing assumption fails.
    pub wrm: Option<BoundTerm>,
}

/// Settings for [`CapacityReport::compute`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CapacitySettings {
    pub epsilon: f64,
    pub pgm_steps: usize,
    pub pgm_stepsize: f64,
    pub wrm_lambda: f64,
    pub gamma: f64,
    pub eta: f64,
    pub tau: f64,
    pub kappa_probes: usize,
    pub kappa_floor: f64,
    pub seed: u64,
}

impl CapacitySettings {
    /// Settings matched to an attack: `ε`, `r`, `α` and `λ` come from the
    /// config when it sets them, else from the given defaults.
    pub fn new(epsilon: f64, wrm_lambda: f64) -> Self {
        let pgm = AttackConfig::pgm(crate::attacks::Norm::L2, epsilon);
        Self {
            epsilon,
            pgm_steps: pgm.pgm_steps,
            pgm_stepsize: pgm.stepsize(),
            wrm_lambda,
            gamma: 1.0,
            eta: 0.05,
            tau: 0.5,
            kappa_probes: 2,
            kappa_floor: KAPPA_MIN,
            seed: 0x6b61_7070_61,
        }
    }
}

/// Capacity quantities of one network on one dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CapacityReport {
    pub spectral_norms: Vec<f64>,
    pub frobenius_norms: Vec<f64>,
    pub beta_w: f64,
    pub spectral_product: f64,
    pub lip_bar: f64,
    pub kappa: f64,
    pub kappa_raw: f64,
    pub radius: f64,
    pub depth: usize,
    pub width: usize,
    pub n: usize,
    pub epsilon: f64,
    pub pgm_steps: usize,
    pub pgm_stepsize: f64,
    pub wrm_lambda: f64,
    pub phi_erm: f64,
    pub phi_fgm: f64,
    pub phi_pgm: f64,
    /// Absent when `λ ≤ lip_bar`.
    pub phi_wrm: Option<f64>,
    pub bound_params: BoundParams,
    pub bound_terms: BoundTerms,
}

impl CapacityReport {
    pub fn compute(net: &Network, dataset: &LabeledDataset, s: &CapacitySettings) -> Result<Self> {
        let norms = LayerNorms::of(net);
        let k = estimate_kappa_with(net, dataset, s.epsilon, s.kappa_probes, s.seed, s.kappa_floor)?;
        let phi_wrm = match norms.phi_wrm(s.wrm_lambda) {
            Ok(v) => Some(v),
            Err(Error::Validity(_)) => None,
            Err(e) => return Err(e),
        };
        let params = BoundParams {
            gamma: s.gamma,
            eta: s.eta,
            tau: s.tau,
            ..BoundParams::new(s.gamma, dataset.len())
        };
        let mut report = Self {
            beta_w: norms.geometric_mean(),
            spectral_product: norms.product(),
            lip_bar: norms.lip_bar(),
            kappa: k.kappa,
            kappa_raw: k.raw_min,
            radius: data_radius(dataset),
            depth: net.depth(),
            width: net.width(),
            n: dataset.len(),
            epsilon: s.epsilon,
            pgm_steps: s.pgm_steps,
            pgm_stepsize: s.pgm_stepsize,
            wrm_lambda: s.wrm_lambda,
            phi_erm: norms.phi_erm(),
            phi_fgm: norms.phi_fgm(s.epsilon, k.kappa)?,
            phi_pgm: norms.phi_pgm(k.kappa, s.pgm_steps, s.pgm_stepsize)?,
            phi_wrm,
            bound_params: params,
            bound_terms: BoundTerms {
                erm: zero_term(),
                fgm: zero_term(),
                pgm: zero_term(),
                wrm: None,
            },
            spectral_norms: norms.spectral,
            frobenius_norms: norms.frobenius,
        };
        report.bound_terms = BoundTerms {
            erm: bound_term(Theorem::Erm, &report, &params)?,
            fgm: bound_term(Theorem::Fgm, &report, &params)?,
            pgm: bound_term(Theorem::Pgm, &report, &params)?,
            wrm: match bound_term(Theorem::Wrm, &report, &params) {
                Ok(t) => Some(t),
                Err(Error::Validity(_)) => None,
                Err(e) => return Err(e),
            },
        };
        Ok(report)
    }

    pub fn norms(&self) -> LayerNorms {
        LayerNorms {
            spectral: self.spectral_norms.clone(),
            frobenius: self.frobenius_norms.clone(),
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

fn zero_term() -> BoundTerm {
    BoundTerm {
        capacity_part: 0.0,
        log_part: 0.0,
        value: 0.0,
    }
}

/// Evaluate one theorem's right-hand side (hidden constants = 1). `log M` is
/// floored at 1 so that `M = 1` keeps the logarithm finite.
pub fn bound_term(theorem: Theorem, report: &CapacityReport, params: &BoundParams) -> Result<BoundTerm> {
    params.validate()?;
    let norms = report.norms();
    let d = params.d.unwrap_or(report.depth) as f64;
    let h = params.h.unwrap_or(report.width) as f64;
    let n = params.n as f64;
    let log_m = params.m.unwrap_or_else(|| norms.default_m()).ln().max(1.0);
    let base = d * n * log_m / params.eta;
    let (radius, phi, log_arg) = match theorem {
        Theorem::Erm => (report.radius, report.phi_erm, base),
        Theorem::Fgm => (report.radius + report.epsilon, report.phi_fgm, base),
        Theorem::Pgm => (report.radius + report.epsilon, report.phi_pgm, report.pgm_steps as f64 * base),
        Theorem::Wrm => {
            if !(report.wrm_lambda * (1.0 - params.tau) >= report.lip_bar) {
                return Err(Error::Validity(format!(
                    "wrm bound needs lambda (1 - tau) >= lip_bar: {} * {} < {}",
                    report.wrm_lambda,
                    1.0 - params.tau,
                    report.lip_bar
                )));
            }
            let phi = norms.phi_wrm(report.wrm_lambda)?;
            (
                report.radius + report.spectral_product / report.wrm_lambda,
                phi,
                base / params.tau,
            )
        }
    };
    let capacity_part = radius * radius * d * d * h * (d * h).ln() * phi;
    let log_part = d * log_arg.ln();
    let value = ((capacity_part + log_part) / (params.gamma * params.gamma * n)).sqrt();
    Ok(BoundTerm {
        capacity_part,
        log_part,
        value,
    })
}

/// Equal-width histogram over `[min, max]` of the values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Histogram {
    pub edges: Vec<f64>,
    pub counts: Vec<usize>,
}

impl Histogram {
    /// `bins` equal-width bins spanning the data; identical values collapse
    /// into a single zero-width bin.
    pub fn new(values: &[f64], bins: usize) -> Result<Self> {
        if bins == 0 {
            return Err(Error::input("histogram needs at least one bin"));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::input("histogram values must be finite"));
        }
        if values.is_empty() {
            return Ok(Self { edges: vec![0.0, 0.0], counts: vec![0] });
        }
        let lo = values.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        if lo == hi {
            return Ok(Self {
                edges: vec![lo, hi],
                counts: vec![values.len()],
            });
        }
        let width = (hi - lo) / bins as f64;
        let mut edges: Vec<f64> = (0..bins).map(|i| lo + i as f64 * width).collect();
        edges.push(hi);
        let mut counts = vec![0; bins];
        for &v in values {
            let idx = (((v - lo) / width) as usize).min(bins - 1);
            counts[idx] += 1;
        }
        Ok(Self { edges, counts })
    }

    pub fn total(&self) -> usize {
        self.counts.iter().sum()
    }

    /// `bin_left,bin_right,count` rows under a header.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("bin_left,bin_right,count\n");
        for (i, c) in self.counts.iter().enumerate() {
            writeln!(s, "{},{},{}", self.edges[i], self.edges[i + 1], c).unwrap();
        }
        s
    }
}

/// Raw and normalized margins with their histograms.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MarginHistograms {
    /// `√Φ` for the attack family.
    pub normalizer: f64,
    pub raw_margins: Vec<f64>,
    pub normalized_margins: Vec<f64>,
    pub raw: Histogram,
    pub normalized: Histogram,
}

/// `Φ` matching an attack family: `Φ_erm` for none, otherwise the attack's own
/// score with `κ` estimated on `dataset`.
pub fn phi_for_attack(net: &Network, dataset: &LabeledDataset, attack: &AttackConfig) -> Result<f64> {
    let norms = LayerNorms::of(net);
    match attack.family {
        AttackFamily::None => Ok(norms.phi_erm()),
        AttackFamily::Fgm => {
            let k = estimate_kappa(net, dataset, attack.epsilon)?;
            norms.phi_fgm(attack.epsilon, k.kappa)
        }
        AttackFamily::Pgm => {
            let k = estimate_kappa(net, dataset, attack.epsilon)?;
            norms.phi_pgm(k.kappa, attack.pgm_steps, attack.stepsize())
        }
        AttackFamily::Wrm => norms.phi_wrm(attack.wrm_lambda),
    }
}

/// Histograms of `margin(f(x+δ), y)` and of the same margins divided by `√Φ`.
pub fn normalized_margin_histogram(
    net: &Network,
    dataset: &LabeledDataset,
    attack: &AttackConfig,
    bins: usize,
) -> Result<MarginHistograms> {
    let phi = phi_for_attack(net, dataset, attack)?;
    let raw = margins(net, dataset, attack)?;
    margin_histograms(raw, phi.sqrt(), bins)
}

/// Build both histograms from precomputed margins and a normalizer. A zero
/// normalizer is only accepted when every margin is zero.
pub fn margin_histograms(raw_margins: Vec<f64>, normalizer: f64, bins: usize) -> Result<MarginHistograms> {
    let normalized_margins: Vec<f64> = if normalizer > 0.0 {
        raw_margins.iter().map(|m| m / normalizer).collect()
    } else if raw_margins.iter().all(|&m| m == 0.0) {
        raw_margins.clone()
    } else {
        return Err(Error::Validity("capacity score is zero but margins are not".into()));
    };
    Ok(MarginHistograms {
        normalizer,
        raw: Histogram::new(&raw_margins, bins)?,
        normalized: Histogram::new(&normalized_margins, bins)?,
        raw_margins,
        normalized_margins,
    })
}
