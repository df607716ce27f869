//! Synthetic four-way stress corpora with controlled anisotropic geometry,
//! and a Monte-Carlo oracle for the separability an ideal scorer achieves.
//!
//! Generative model per seed:
//!
//! * evidence `e = c_j + σ_e g` from one of `n_clusters` Gaussian clusters
//!   whose centers are `4 σ_e` apart;
//! * faithful answer state `v = A e + b + R diag(√λ) z`, with `R` a random
//!   rotation and `λ` the configured eigen-spectrum;
//! * contradicted / partial add a shift to `v`; retrieval-miss adds its shift
//!   and reports evidence drawn from a different cluster.
//!
//! Answers carry content tokens (salient, their activations average to `v`)
//! and filler tokens present in every answer (zero idf, junk activations).

use nalgebra::DMatrix;
use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::evalharness::{auroc, auroc_stderr};
use crate::records::{ActivationRecord, ConditionLabel};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShiftPolicy {
    /// Along the eigenvector of the smallest eigenvalue.
    LowestVariance,
    /// Along the eigenvector of the largest eigenvalue.
    HighestVariance,
    /// Uniform direction, drawn per record.
    Random,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub d: usize,
    pub m: usize,
    /// Eigenvalues of the faithful residual covariance (length `d`).
    pub eigen_spectrum: Vec<f64>,
    pub shift_contradicted: f64,
    pub shift_miss: f64,
    pub shift_partial: f64,
    pub contradicted_policy: ShiftPolicy,
    pub miss_policy: ShiftPolicy,
    pub partial_policy: ShiftPolicy,
    pub n_seeds: usize,
    pub seed: u64,
    pub n_clusters: usize,
    /// Per-coordinate std of evidence within a cluster.
    pub cluster_std: f64,
    /// Scale of the evidence-to-activation map.
    pub projection_gain: f64,
    /// Std of per-token deviations around the answer state.
    pub token_noise: f64,
    pub vocab_size: usize,
    pub content_tokens: usize,
    /// Householder reflections composing the rotation.
    pub reflections: usize,
    pub layer_index: i64,
    pub dataset: String,
    pub model: String,
}

/// `n` log-spaced values from `hi` down to `lo`.
pub fn logspace(hi: f64, lo: f64, n: usize) -> Vec<f64> {
    if n == 1 {
        return vec![hi];
    }
    let (a, b) = (hi.ln(), lo.ln());
    (0..n)
        .map(|i| (a + (b - a) * i as f64 / (n - 1) as f64).exp())
        .collect()
}

const FILLER: [&str; 4] = ["the", "of", "is", "answer"];
const EOS: &str = "</s>";

impl SynthConfig {
    /// Default geometry at the given dimensions: a spectrum spanning three
    /// orders of magnitude, the largest shift along the rarest direction,
    /// the smallest shift random.
    pub fn with_dims(d: usize, m: usize) -> Self {
        Self {
            d,
            m,
            eigen_spectrum: logspace(1e-2, 1e-5, d),
            shift_contradicted: 0.2,
            shift_miss: 0.02,
            shift_partial: 0.1,
            contradicted_policy: ShiftPolicy::LowestVariance,
            miss_policy: ShiftPolicy::Random,
            partial_policy: ShiftPolicy::Random,
            n_seeds: 500,
            seed: 0,
            n_clusters: 8.min(m.max(2)),
            cluster_std: 1.0,
            projection_gain: 0.01,
            token_noise: 0.05,
            vocab_size: 64,
            content_tokens: 8,
            reflections: 12,
            layer_index: 16,
            dataset: "synth".into(),
            model: "synthetic-gaussian".into(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Argument(msg));
        if self.d == 0 || self.m == 0 {
            return bad("d and m must be positive".into());
        }
        if self.eigen_spectrum.len() != self.d {
            return bad(format!("eigen_spectrum has {} values, d = {}", self.eigen_spectrum.len(), self.d));
        }
        if self.eigen_spectrum.iter().any(|l| !(l.is_finite() && *l > 0.0)) {
            return bad("eigenvalues must be finite and positive".into());
        }
        for (name, s) in [
            ("shift_contradicted", self.shift_contradicted),
            ("shift_miss", self.shift_miss),
            ("shift_partial", self.shift_partial),
        ] {
            if !(s.is_finite() && s >= 0.0) {
                return bad(format!("{name} must be finite and non-negative"));
            }
        }
        if self.n_clusters < 2 || self.n_clusters > self.m {
            return bad(format!("n_clusters must lie in [2, m = {}], got {}", self.m, self.n_clusters));
        }
        if !(self.cluster_std > 0.0 && self.projection_gain >= 0.0 && self.token_noise >= 0.0) {
            return bad("cluster_std must be positive, gains and noise non-negative".into());
        }
        if self.content_tokens == 0 || self.content_tokens > self.vocab_size {
            return bad("content_tokens must lie in [1, vocab_size]".into());
        }
        Ok(())
    }
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self::with_dims(64, 16)
    }
}

/// The latent geometry shared by the generator and the oracle.
struct World {
    sqrt_lambda: Vec<f64>,
    /// Unit Householder vectors; `R = H_1 H_2 ... H_K`.
    householder: Vec<Vec<f64>>,
    centers: Vec<Vec<f64>>,
    proj: DMatrix<f64>,
    bias: Vec<f64>,
    lowest: Vec<f64>,
    highest: Vec<f64>,
}

fn gaussian_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.sample::<f64, _>(StandardNormal)).collect()
}

fn unit_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    loop {
        let v = gaussian_vec(rng, n);
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-12 {
            return v.into_iter().map(|x| x / norm).collect();
        }
    }
}

fn reflect(h: &[f64], x: &mut [f64]) {
    let dot: f64 = h.iter().zip(x.iter()).map(|(a, b)| a * b).sum();
    for (xi, hi) in x.iter_mut().zip(h) {
        *xi -= 2.0 * dot * hi;
    }
}

impl World {
    fn new(cfg: &SynthConfig) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let (d, m) = (cfg.d, cfg.m);
        let householder = if d > 1 {
            (0..cfg.reflections).map(|_| unit_vec(&mut rng, d)).collect()
        } else {
            Vec::new()
        };
        let spacing = 4.0 * cfg.cluster_std / std::f64::consts::SQRT_2;
        let centers = (0..cfg.n_clusters)
            .map(|j| {
                let mut c = vec![0.0; m];
                c[j] = spacing;
                c
            })
            .collect();
        let scale = cfg.projection_gain / (m as f64).sqrt();
        let proj = DMatrix::from_fn(d, m, |_, _| scale * rng.sample::<f64, _>(StandardNormal));
        let bias = gaussian_vec(&mut rng, d).into_iter().map(|x| 0.1 * x).collect();
        let axis = |i: usize| {
            let mut e = vec![0.0; d];
            e[i] = 1.0;
            e
        };
        let (lo, hi) = cfg.eigen_spectrum.iter().enumerate().fold((0, 0), |(lo, hi), (i, &l)| {
            (
                if l < cfg.eigen_spectrum[lo] { i } else { lo },
                if l > cfg.eigen_spectrum[hi] { i } else { hi },
            )
        });
        let mut world = World {
            sqrt_lambda: cfg.eigen_spectrum.iter().map(|l| l.sqrt()).collect(),
            householder,
            centers,
            proj,
            bias,
            lowest: axis(lo),
            highest: axis(hi),
        };
        let mut lowest = std::mem::take(&mut world.lowest);
        let mut highest = std::mem::take(&mut world.highest);
        world.rotate(&mut lowest);
        world.rotate(&mut highest);
        world.lowest = lowest;
        world.highest = highest;
        world
    }

    /// `x <- R x`.
    fn rotate(&self, x: &mut [f64]) {
        for h in self.householder.iter().rev() {
            reflect(h, x);
        }
    }

    /// `x <- R^T x`.
    fn unrotate(&self, x: &mut [f64]) {
        for h in &self.householder {
            reflect(h, x);
        }
    }

    fn noise(&self, rng: &mut ChaCha8Rng) -> Vec<f64> {
        let mut z: Vec<f64> = self
            .sqrt_lambda
            .iter()
            .map(|s| s * rng.sample::<f64, _>(StandardNormal))
            .collect();
        self.rotate(&mut z);
        z
    }

    fn evidence(&self, rng: &mut ChaCha8Rng, cluster: usize, std: f64) -> Vec<f64> {
        self.centers[cluster]
            .iter()
            .map(|c| c + std * rng.sample::<f64, _>(StandardNormal))
            .collect()
    }

    fn project(&self, e: &[f64]) -> Vec<f64> {
        let e = nalgebra::DVectorView::from_slice(e, e.len());
        let y = &self.proj * e;
        y.iter().zip(&self.bias).map(|(a, b)| a + b).collect()
    }

    fn direction(&self, policy: ShiftPolicy, rng: &mut ChaCha8Rng) -> Vec<f64> {
        match policy {
            ShiftPolicy::LowestVariance => self.lowest.clone(),
            ShiftPolicy::HighestVariance => self.highest.clone(),
            ShiftPolicy::Random => unit_vec(rng, self.sqrt_lambda.len()),
        }
    }

    /// Squared Mahalanobis norm under the true covariance.
    fn mahalanobis_sq(&self, r: &[f64]) -> f64 {
        let mut w = r.to_vec();
        self.unrotate(&mut w);
        w.iter().zip(&self.sqrt_lambda).map(|(x, s)| (x / s).powi(2)).sum()
    }
}

fn other_cluster(rng: &mut ChaCha8Rng, n: usize, j: usize) -> usize {
    let k = rng.random_range(0..n - 1);
    if k >= j {
        k + 1
    } else {
        k
    }
}

fn add_scaled(v: &mut [f64], dir: &[f64], s: f64) {
    for (x, u) in v.iter_mut().zip(dir) {
        *x += s * u;
    }
}

fn shift_for(cfg: &SynthConfig, cond: ConditionLabel) -> (f64, ShiftPolicy) {
    match cond {
        ConditionLabel::Faithful => (0.0, ShiftPolicy::Random),
        ConditionLabel::Contradicted => (cfg.shift_contradicted, cfg.contradicted_policy),
        ConditionLabel::RetrievalMiss => (cfg.shift_miss, cfg.miss_policy),
        ConditionLabel::Partial => (cfg.shift_partial, cfg.partial_policy),
    }
}

/// `4 n_seeds` records, four per seed in condition order.
pub fn generate(cfg: &SynthConfig) -> Result<Vec<ActivationRecord>> {
    cfg.validate()?;
    let world = World::new(cfg);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(1);
    let vocab: Vec<String> = (0..cfg.vocab_size).map(|i| format!("w{i:03}")).collect();
    let mut out = Vec::with_capacity(4 * cfg.n_seeds);
    for s in 0..cfg.n_seeds {
        let cluster = rng.random_range(0..cfg.n_clusters);
        let e = world.evidence(&mut rng, cluster, cfg.cluster_std);
        let target = world.project(&e);
        for cond in ConditionLabel::ALL {
            let mut v = target.clone();
            add_scaled(&mut v, &world.noise(&mut rng), 1.0);
            let (shift, policy) = shift_for(cfg, cond);
            if shift > 0.0 {
                let dir = world.direction(policy, &mut rng);
                add_scaled(&mut v, &dir, shift);
            }
            let evidence = if cond == ConditionLabel::RetrievalMiss {
                let j = other_cluster(&mut rng, cfg.n_clusters, cluster);
                world.evidence(&mut rng, j, cfg.cluster_std)
            } else {
                e.clone()
            };
            let (tokens, acts) = answer_tokens(cfg, &world, &vocab, &v, &mut rng);
            out.push(ActivationRecord {
                id: format!("{}-{s:05}-{}", cfg.dataset, cond.short()),
                dataset: cfg.dataset.clone(),
                model: cfg.model.clone(),
                condition: cond,
                answer_tokens: tokens,
                answer_activations: acts,
                evidence_embedding: evidence,
                layer_index: cfg.layer_index,
                pooled_override: None,
            });
        }
    }
    Ok(out)
}

/// Content tokens interleaved with filler, closed by an end-of-sequence
/// token. Content activations deviate from `v` by zero-mean offsets.
fn answer_tokens(
    cfg: &SynthConfig,
    world: &World,
    vocab: &[String],
    v: &[f64],
    rng: &mut ChaCha8Rng,
) -> (Vec<String>, Vec<Vec<f64>>) {
    let k = cfg.content_tokens;
    let words: Vec<&String> = vocab.choose_multiple(rng, k).collect();
    let mut offsets: Vec<Vec<f64>> = (0..k)
        .map(|_| gaussian_vec(rng, cfg.d).into_iter().map(|x| cfg.token_noise * x).collect())
        .collect();
    for j in 0..cfg.d {
        let mean = offsets.iter().map(|o| o[j]).sum::<f64>() / k as f64;
        for o in offsets.iter_mut() {
            o[j] -= mean;
        }
    }
    let junk = |rng: &mut ChaCha8Rng| -> Vec<f64> {
        world
            .bias
            .iter()
            .map(|b| b + 3.0 * cfg.token_noise * rng.sample::<f64, _>(StandardNormal))
            .collect()
    };
    let mut tokens = Vec::with_capacity(k + k / 2 + 2);
    let mut acts = Vec::with_capacity(tokens.capacity());
    for (i, (w, o)) in words.iter().zip(&offsets).enumerate() {
        if i % 2 == 0 {
            tokens.push(FILLER[(i / 2) % FILLER.len()].to_string());
            acts.push(junk(rng));
        }
        tokens.push((*w).clone());
        acts.push(v.iter().zip(o).map(|(a, b)| a + b).collect());
    }
    tokens.push(EOS.to_string());
    acts.push(junk(rng));
    (tokens, acts)
}

/// Expected separability of one condition pair.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairOracle {
    pub mahalanobis: f64,
    pub mahalanobis_stderr: f64,
    pub euclidean: f64,
    pub euclidean_stderr: f64,
    /// Linear discriminant `μᵀ Σ⁻¹ r`, defined when the shift direction is fixed.
    pub discriminant: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OracleReport {
    pub mc_samples: usize,
    /// Keyed `F/C`, `F/RM`, `F/P`.
    pub pairs: std::collections::BTreeMap<String, PairOracle>,
}

/// Samples residuals `v_act - (A e + b)` straight from the generative model
/// and scores them with the true covariance.
pub fn mc_oracle(cfg: &SynthConfig, n_mc: usize) -> Result<OracleReport> {
    cfg.validate()?;
    if n_mc < 10_000 {
        return Err(Error::Argument(format!("mc_oracle needs at least 10^4 samples, got {n_mc}")));
    }
    let world = World::new(cfg);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(2);

    let sample = |rng: &mut ChaCha8Rng, cond: ConditionLabel| -> Vec<f64> {
        let mut r = world.noise(rng);
        let (shift, policy) = shift_for(cfg, cond);
        if shift > 0.0 {
            let dir = world.direction(policy, rng);
            add_scaled(&mut r, &dir, shift);
        }
        if cond == ConditionLabel::RetrievalMiss {
            let j = rng.random_range(0..cfg.n_clusters);
            let e = world.evidence(rng, j, cfg.cluster_std);
            let j2 = other_cluster(rng, cfg.n_clusters, j);
            let e2 = world.evidence(rng, j2, cfg.cluster_std);
            let (a, b) = (world.project(&e), world.project(&e2));
            for ((x, p), q) in r.iter_mut().zip(&a).zip(&b) {
                *x += p - q;
            }
        }
        r
    };

    let faithful: Vec<Vec<f64>> = (0..n_mc).map(|_| sample(&mut rng, ConditionLabel::Faithful)).collect();
    let mut pairs = std::collections::BTreeMap::new();
    for cond in ConditionLabel::ALL.into_iter().skip(1) {
        let negatives: Vec<Vec<f64>> = (0..n_mc).map(|_| sample(&mut rng, cond)).collect();
        let scored = |f: &dyn Fn(&[f64]) -> f64| -> Result<f64> {
            let s: Vec<(f64, bool)> = faithful
                .iter()
                .map(|r| (f(r), false))
                .chain(negatives.iter().map(|r| (f(r), true)))
                .collect();
            auroc(&s)
        };
        let maha = scored(&|r| world.mahalanobis_sq(r))?;
        let eucl = scored(&|r| r.iter().map(|x| x * x).sum())?;
        let (shift, policy) = shift_for(cfg, cond);
        let discriminant = match policy {
            ShiftPolicy::Random => None,
            _ if cond == ConditionLabel::RetrievalMiss || shift == 0.0 => None,
            fixed => {
                // Σ⁻¹ μ via the eigen-decomposition
                let mut w = world.direction(fixed, &mut rng);
                world.unrotate(&mut w);
                for (x, s) in w.iter_mut().zip(&world.sqrt_lambda) {
                    *x *= shift / (s * s);
                }
                world.rotate(&mut w);
                Some(scored(&|r| r.iter().zip(&w).map(|(a, b)| a * b).sum())?)
            }
        };
        pairs.insert(
            format!("F/{}", cond.short()),
            PairOracle {
                mahalanobis: maha,
                mahalanobis_stderr: auroc_stderr(maha, n_mc, n_mc),
                euclidean: eucl,
                euclidean_stderr: auroc_stderr(eucl, n_mc, n_mc),
                discriminant,
            },
        );
    }
    Ok(OracleReport { mc_samples: n_mc, pairs })
}
