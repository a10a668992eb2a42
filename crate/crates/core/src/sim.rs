//! Synthetic annotator populations with affine perception functions and
//! planted source/target pairings.

use rand::seq::index;
use rand::Rng as _;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::corpus::{Annotation, Dataset, Dimension, Sample};
use crate::error::{Error, Result};
use crate::net::{Branch, Head, Linear, ModelConfig, ModelParams};
use crate::seeding::{self, Rng};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProfileDistribution {
    pub scale_mean: f64,
    pub scale_sd: f64,
    pub bias_mean: f64,
    pub bias_sd: f64,
    /// Label noise sd shared by every annotator.
    pub noise_sd: f64,
}

impl Default for ProfileDistribution {
    fn default() -> Self {
        Self {
            scale_mean: 1.0,
            scale_sd: 0.4,
            bias_mean: 0.0,
            bias_sd: 0.4,
            noise_sd: 0.05,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Assignment {
    Uniform,
    /// Annotator `i` is drawn with weight `(i + 1)^-exponent`.
    PowerLaw { exponent: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimConfig {
    /// Samples in the source (pre-training) corpus.
    pub n_samples: usize,
    pub n_target_samples: usize,
    pub n_source_annotators: usize,
    pub n_target_annotators: usize,
    pub annotations_per_sample: usize,
    pub feature_dim: usize,
    pub feature_noise_sd: f64,
    pub n_sessions: usize,
    pub profile: ProfileDistribution,
    pub clone_noise_sd: f64,
    pub assignment: Assignment,
    pub rng_seed: u64,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            n_samples: 4000,
            n_target_samples: 2500,
            n_source_annotators: 50,
            n_target_annotators: 100,
            annotations_per_sample: 3,
            feature_dim: 64,
            feature_noise_sd: 0.3,
            n_sessions: 20,
            profile: ProfileDistribution::default(),
            clone_noise_sd: 0.02,
            assignment: Assignment::Uniform,
            rng_seed: 0,
        }
    }
}

impl SimConfig {
    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("n_samples", self.n_samples),
            ("n_target_samples", self.n_target_samples),
            ("n_source_annotators", self.n_source_annotators),
            ("n_target_annotators", self.n_target_annotators),
            ("annotations_per_sample", self.annotations_per_sample),
            ("feature_dim", self.feature_dim),
            ("n_sessions", self.n_sessions),
        ];
        for (name, v) in counts {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if self.annotations_per_sample > self.n_source_annotators.min(self.n_target_annotators) {
            return Err(Error::Config(
                "annotations_per_sample exceeds the annotator count".into(),
            ));
        }
        let p = &self.profile;
        let reals = [
            ("feature_noise_sd", self.feature_noise_sd),
            ("clone_noise_sd", self.clone_noise_sd),
            ("profile.scale_sd", p.scale_sd),
            ("profile.bias_sd", p.bias_sd),
            ("profile.noise_sd", p.noise_sd),
        ];
        for (name, v) in reals {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::Config(format!("{name} must be finite and non-negative")));
            }
        }
        if !(p.scale_mean.is_finite() && p.bias_mean.is_finite()) {
            return Err(Error::Config("profile means must be finite".into()));
        }
        if let Assignment::PowerLaw { exponent } = self.assignment {
            if !(exponent.is_finite() && exponent >= 0.0) {
                return Err(Error::Config("power-law exponent must be non-negative".into()));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnnotatorProfile {
    pub annotator_id: String,
    pub scale_act: f64,
    pub scale_val: f64,
    pub bias_act: f64,
    pub bias_val: f64,
    pub noise_sd: f64,
    pub planted_source: Option<String>,
}

impl AnnotatorProfile {
    pub fn scale(&self, dim: Dimension) -> f64 {
        match dim {
            Dimension::Activation => self.scale_act,
            Dimension::Valence => self.scale_val,
        }
    }

    pub fn bias(&self, dim: Dimension) -> f64 {
        match dim {
            Dimension::Activation => self.bias_act,
            Dimension::Valence => self.bias_val,
        }
    }

    /// Noise-free label for a latent value.
    pub fn perceive(&self, dim: Dimension, latent: f64) -> f64 {
        (self.scale(dim) * latent + self.bias(dim)).clamp(-1.0, 1.0)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LatentSample {
    pub sample_id: String,
    pub latent_act: f64,
    pub latent_val: f64,
    pub features: Vec<f64>,
    pub group_key: String,
}

/// Which corpus of the benchmark to generate.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Role {
    Source,
    Target,
}

impl Role {
    fn prefix(self) -> &'static str {
        match self {
            Role::Source => "src",
            Role::Target => "tgt",
        }
    }

    fn tag(self) -> u64 {
        match self {
            Role::Source => 0,
            Role::Target => 1,
        }
    }
}

fn gauss(rng: &mut Rng, sd: f64) -> f64 {
    let z: f64 = rng.sample(StandardNormal);
    sd * z
}

fn id_width(n: usize) -> usize {
    n.saturating_sub(1).to_string().len().max(3)
}

fn annotator_ids(prefix: char, n: usize) -> Vec<String> {
    let w = id_width(n);
    (0..n).map(|i| format!("{prefix}{i:0w$}")).collect()
}

pub fn gen_population(config: &SimConfig) -> Result<Vec<AnnotatorProfile>> {
    config.validate()?;
    let mut rng = seeding::rng(config.rng_seed, &[seeding::TAG_POPULATION]);
    let p = config.profile;
    Ok(annotator_ids('s', config.n_source_annotators)
        .into_iter()
        .map(|annotator_id| AnnotatorProfile {
            annotator_id,
            scale_act: p.scale_mean + gauss(&mut rng, p.scale_sd),
            scale_val: p.scale_mean + gauss(&mut rng, p.scale_sd),
            bias_act: p.bias_mean + gauss(&mut rng, p.bias_sd),
            bias_val: p.bias_mean + gauss(&mut rng, p.bias_sd),
            noise_sd: p.noise_sd,
            planted_source: None,
        })
        .collect())
}

/// Targets copy a uniformly chosen source profile, with each scale and bias
/// perturbed by `Normal(0, clone_noise_sd)`.
pub fn plant_targets(
    sources: &[AnnotatorProfile],
    n_targets: usize,
    clone_noise_sd: f64,
    rng_seed: u64,
) -> Result<Vec<AnnotatorProfile>> {
    if sources.is_empty() {
        return Err(Error::InvalidInput("cannot plant targets without sources".into()));
    }
    if !(clone_noise_sd.is_finite() && clone_noise_sd >= 0.0) {
        return Err(Error::InvalidInput("clone_noise_sd must be finite and non-negative".into()));
    }
    let mut rng = seeding::rng(rng_seed, &[seeding::TAG_PLANT]);
    Ok(annotator_ids('t', n_targets)
        .into_iter()
        .map(|annotator_id| {
            let src = &sources[rng.random_range(0..sources.len())];
            AnnotatorProfile {
                annotator_id,
                scale_act: src.scale_act + gauss(&mut rng, clone_noise_sd),
                scale_val: src.scale_val + gauss(&mut rng, clone_noise_sd),
                bias_act: src.bias_act + gauss(&mut rng, clone_noise_sd),
                bias_val: src.bias_val + gauss(&mut rng, clone_noise_sd),
                noise_sd: src.noise_sd,
                planted_source: Some(src.annotator_id.clone()),
            }
        })
        .collect())
}

/// The seeded `feature_dim x 2` map from latent (act, val) to features,
/// shared by the source and target corpora.
pub fn feature_map(config: &SimConfig) -> Vec<[f64; 2]> {
    let mut rng = seeding::rng(config.rng_seed, &[seeding::TAG_FEATURE_MAP]);
    (0..config.feature_dim)
        .map(|_| [gauss(&mut rng, 1.0), gauss(&mut rng, 1.0)])
        .collect()
}

pub fn gen_latent_samples(config: &SimConfig, role: Role) -> Result<Vec<LatentSample>> {
    config.validate()?;
    let map = feature_map(config);
    let n = match role {
        Role::Source => config.n_samples,
        Role::Target => config.n_target_samples,
    };
    let w = id_width(n).max(5);
    let mut rng = seeding::rng(config.rng_seed, &[seeding::TAG_SAMPLES, role.tag()]);
    Ok((0..n)
        .map(|i| {
            let la: f64 = rng.random_range(-1.0..=1.0);
            let lv: f64 = rng.random_range(-1.0..=1.0);
            // Stored as f32 so datasets survive the on-disk format unchanged.
            let features = map
                .iter()
                .map(|row| (row[0] * la + row[1] * lv + gauss(&mut rng, config.feature_noise_sd)) as f32 as f64)
                .collect();
            LatentSample {
                sample_id: format!("{}{i:0w$}", role.prefix()),
                latent_act: la,
                latent_val: lv,
                features,
                group_key: format!("{}-session{:02}", role.prefix(), i % config.n_sessions),
            }
        })
        .collect())
}

/// Label the role's latent samples with `population`. Each sample gets
/// `annotations_per_sample` distinct annotators.
pub fn gen_dataset(population: &[AnnotatorProfile], config: &SimConfig, role: Role) -> Result<Dataset> {
    let latents = gen_latent_samples(config, role)?;
    let k = config.annotations_per_sample;
    if population.len() < k {
        return Err(Error::InvalidInput(format!(
            "population of {} cannot give {k} annotations per sample",
            population.len()
        )));
    }
    let mut rng = seeding::rng(config.rng_seed, &[seeding::TAG_SAMPLES, role.tag(), 1]);
    let mut annotations = Vec::with_capacity(latents.len() * k);
    for s in &latents {
        let chosen = match config.assignment {
            Assignment::Uniform => index::sample(&mut rng, population.len(), k).into_vec(),
            Assignment::PowerLaw { exponent } => {
                index::sample_weighted(&mut rng, population.len(), |i| ((i + 1) as f64).powf(-exponent), k)
                    .map_err(|e| Error::InvalidInput(format!("power-law assignment: {e}")))?
                    .into_vec()
            }
        };
        for i in chosen {
            let p = &population[i];
            let mut label = |dim: Dimension, latent: f64| {
                (p.scale(dim) * latent + p.bias(dim) + gauss(&mut rng, p.noise_sd)).clamp(-1.0, 1.0)
            };
            let activation = label(Dimension::Activation, s.latent_act);
            let valence = label(Dimension::Valence, s.latent_val);
            annotations.push(Annotation {
                sample_id: s.sample_id.clone(),
                annotator_id: p.annotator_id.clone(),
                activation,
                valence,
            });
        }
    }
    let samples = latents
        .into_iter()
        .map(|s| Sample {
            id: s.sample_id,
            features: s.features,
            group_key: s.group_key,
            split: None,
        })
        .collect();
    let name = match role {
        Role::Source => "sim-source",
        Role::Target => "sim-target",
    };
    Dataset::new(name, config.feature_dim, samples, annotations)
}

#[derive(Debug, Clone)]
pub struct Benchmark {
    pub sources: Vec<AnnotatorProfile>,
    pub targets: Vec<AnnotatorProfile>,
    pub source: Dataset,
    pub target: Dataset,
}

/// Source population and corpus plus planted targets and their corpus.
pub fn gen_benchmark(config: &SimConfig) -> Result<Benchmark> {
    let sources = gen_population(config)?;
    let targets = plant_targets(&sources, config.n_target_annotators, config.clone_noise_sd, config.rng_seed)?;
    let source = gen_dataset(&sources, config, Role::Source)?;
    let target = gen_dataset(&targets, config, Role::Target)?;
    Ok(Benchmark {
        sources,
        targets,
        source,
        target,
    })
}

/// Breakpoints of `clamp(s * l + b)` strictly inside (-1, 1).
fn kinks(scale: f64, bias: f64) -> Vec<f64> {
    if scale == 0.0 {
        return Vec::new();
    }
    let mut out: Vec<f64> = [(-1.0 - bias) / scale, (1.0 - bias) / scale]
        .into_iter()
        .filter(|c| *c > -1.0 && *c < 1.0)
        .collect();
    out.sort_by(f64::total_cmp);
    out
}

/// A network whose annotator heads reproduce the noise-free perception
/// functions of `sources` exactly (up to f32 feature rounding) when features
/// carry no noise. Every clamped affine function is piecewise linear in the
/// latent, so a ReLU basis with one unit per breakpoint represents it.
pub fn exact_model(config: &SimConfig, sources: &[AnnotatorProfile]) -> Result<ModelParams> {
    config.validate()?;
    if config.feature_dim < 2 {
        return Err(Error::Config("exact model needs feature_dim >= 2".into()));
    }
    let map = feature_map(config);
    // Pseudo-inverse of the feature map: (A^T A)^-1 A^T.
    let mut ata = [[0.0; 2]; 2];
    for row in &map {
        for i in 0..2 {
            for j in 0..2 {
                ata[i][j] += row[i] * row[j];
            }
        }
    }
    let det = ata[0][0] * ata[1][1] - ata[0][1] * ata[1][0];
    if det.abs() < 1e-12 {
        return Err(Error::Degenerate("feature map is not injective".into()));
    }
    let inv = [[ata[1][1] / det, -ata[0][1] / det], [-ata[1][0] / det, ata[0][0] / det]];
    let pinv: Vec<[f64; 2]> = map
        .iter()
        .map(|r| [inv[0][0] * r[0] + inv[0][1] * r[1], inv[1][0] * r[0] + inv[1][1] * r[1]])
        .collect();

    let per_dim_kinks: [Vec<Vec<f64>>; 2] = Dimension::BOTH.map(|d| {
        sources.iter().map(|p| kinks(p.scale(d), p.bias(d))).collect()
    });
    let width = 2.max(
        per_dim_kinks
            .iter()
            .map(|k| 1 + k.iter().map(Vec::len).sum::<usize>())
            .max()
            .unwrap_or(1),
    );
    let f = config.feature_dim;

    // Trunk unit d holds latent_d + 1 (non-negative on [-1, 1]).
    let mut trunk = Linear::zeros(f, width);
    for d in 0..2 {
        for (c, p) in pinv.iter().enumerate() {
            trunk.weight[d * f + c] = p[d];
        }
        trunk.bias[d] = 1.0;
    }

    let mut branches = Vec::with_capacity(2);
    let mut heads: [Vec<Head>; 2] = [Vec::new(), Vec::new()];
    for dim in Dimension::BOTH {
        let d = dim.index();
        let all_kinks: Vec<(usize, f64)> = per_dim_kinks[d]
            .iter()
            .enumerate()
            .flat_map(|(j, ks)| ks.iter().map(move |&c| (j, c)))
            .collect();
        // Unit 0: latent + 1; unit u > 0: relu(latent - c_u).
        let mut first = Linear::zeros(width, width);
        first.weight[d] = 1.0;
        for (u, &(_, c)) in all_kinks.iter().enumerate() {
            first.weight[(u + 1) * width + d] = 1.0;
            first.bias[u + 1] = -1.0 - c;
        }
        let mut second = Linear::zeros(width, width);
        for u in 0..width {
            second.weight[u * width + u] = 1.0;
        }
        branches.push(Branch { first, second });

        for (j, p) in sources.iter().enumerate() {
            let (s, b) = (p.scale(dim), p.bias(dim));
            let slope_at = |l: f64| if (s * l + b).abs() < 1.0 { s } else { 0.0 };
            let ks = &per_dim_kinks[d][j];
            let mut head = Head::zeros(width);
            head.bias = p.perceive(dim, -1.0);
            let mut edges = vec![-1.0];
            edges.extend(ks.iter().copied());
            edges.push(1.0);
            let slopes: Vec<f64> = edges.windows(2).map(|w| slope_at(0.5 * (w[0] + w[1]))).collect();
            head.weight[0] = slopes[0];
            let mut seen = 0;
            for (u, &(owner, _)) in all_kinks.iter().enumerate() {
                if owner == j {
                    head.weight[u + 1] = slopes[seen + 1] - slopes[seen];
                    seen += 1;
                }
            }
            heads[d].push(head);
        }
    }

    let aggregate = [0, 1].map(|d| {
        let mut h = Head::zeros(width);
        let n = heads[d].len().max(1) as f64;
        for head in &heads[d] {
            for (a, w) in h.weight.iter_mut().zip(&head.weight) {
                *a += w / n;
            }
            h.bias += head.bias / n;
        }
        h
    });
    let model_config = ModelConfig {
        feature_dim: f,
        hidden_width: width,
        dropout_rate: 0.0,
        annotator_ids: sources.iter().map(|p| p.annotator_id.clone()).collect(),
    };
    let [b0, b1]: [Branch; 2] = branches.try_into().expect("two branches");
    Ok(ModelParams::assemble(trunk, [b0, b1], heads, aggregate, model_config))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> SimConfig {
        SimConfig {
            n_samples: 200,
            n_target_samples: 100,
            n_source_annotators: 10,
            n_target_annotators: 6,
            annotations_per_sample: 3,
            feature_dim: 6,
            n_sessions: 4,
            rng_seed: 9,
            ..SimConfig::default()
        }
    }

    #[test]
    fn population_deterministic() {
        let c = small();
        assert_eq!(gen_population(&c).unwrap(), gen_population(&c).unwrap());
        let other = SimConfig { rng_seed: 10, ..small() };
        assert_ne!(gen_population(&c).unwrap(), gen_population(&other).unwrap());
    }

    #[test]
    fn zero_variance_population_is_identical() {
        let mut c = small();
        c.profile.scale_sd = 0.0;
        c.profile.bias_sd = 0.0;
        let pop = gen_population(&c).unwrap();
        assert!(pop.windows(2).all(|w| w[0].scale_act == w[1].scale_act && w[0].bias_val == w[1].bias_val));
        assert_eq!(pop[0].scale_act, 1.0);
    }

    #[test]
    fn large_population() {
        let c = SimConfig {
            n_source_annotators: 1998,
            ..SimConfig::default()
        };
        let pop = gen_population(&c).unwrap();
        assert_eq!(pop.len(), 1998);
        assert_eq!(pop[1997].annotator_id, "s1997");
    }

    #[test]
    fn planted_clones() {
        let c = small();
        let src = gen_population(&c).unwrap();
        let exact = plant_targets(&src, 20, 0.0, 1).unwrap();
        for t in &exact {
            let s = src
                .iter()
                .find(|s| Some(&s.annotator_id) == t.planted_source.as_ref())
                .expect("valid planted source");
            assert_eq!((s.scale_act, s.bias_act, s.scale_val, s.bias_val), (t.scale_act, t.bias_act, t.scale_val, t.bias_val));
        }
        let assignments: std::collections::BTreeSet<Vec<Option<String>>> = (0..10)
            .map(|seed| {
                plant_targets(&src, 20, 0.02, seed)
                    .unwrap()
                    .into_iter()
                    .map(|t| t.planted_source)
                    .collect()
            })
            .collect();
        assert_eq!(assignments.len(), 10);
        assert!(plant_targets(&[], 3, 0.0, 0).is_err());
    }

    #[test]
    fn noiseless_identity_labels_equal_latents() {
        let mut c = small();
        c.profile = ProfileDistribution {
            scale_mean: 1.0,
            scale_sd: 0.0,
            bias_mean: 0.0,
            bias_sd: 0.0,
            noise_sd: 0.0,
        };
        let pop = gen_population(&c).unwrap();
        let ds = gen_dataset(&pop, &c, Role::Source).unwrap();
        let latents = gen_latent_samples(&c, Role::Source).unwrap();
        for a in ds.annotations() {
            let l = latents.iter().find(|l| l.sample_id == a.sample_id).unwrap();
            assert_eq!(a.activation, l.latent_act);
            assert_eq!(a.valence, l.latent_val);
        }
    }

    #[test]
    fn every_sample_gets_k_labels_in_range() {
        for assignment in [Assignment::Uniform, Assignment::PowerLaw { exponent: 1.0 }] {
            let c = SimConfig { assignment, ..small() };
            let pop = gen_population(&c).unwrap();
            let ds = gen_dataset(&pop, &c, Role::Source).unwrap();
            let mut per_sample = std::collections::BTreeMap::new();
            for a in ds.annotations() {
                *per_sample.entry(a.sample_id.as_str()).or_insert(0) += 1;
                assert!((-1.0..=1.0).contains(&a.activation) && (-1.0..=1.0).contains(&a.valence));
            }
            assert_eq!(per_sample.len(), c.n_samples);
            assert!(per_sample.values().all(|&n| n == c.annotations_per_sample));
            assert_eq!(ds.group_keys().len(), c.n_sessions);
        }
    }

    #[test]
    fn power_law_skews_assignment() {
        let c = SimConfig {
            assignment: Assignment::PowerLaw { exponent: 1.5 },
            ..small()
        };
        let pop = gen_population(&c).unwrap();
        let ds = gen_dataset(&pop, &c, Role::Source).unwrap();
        let by = ds.annotations_by_annotator();
        assert!(by["s000"].len() > 2 * by["s009"].len());
    }

    #[test]
    fn feature_map_has_full_rank() {
        let c = small();
        let m = feature_map(&c);
        let ata00: f64 = m.iter().map(|r| r[0] * r[0]).sum();
        let ata11: f64 = m.iter().map(|r| r[1] * r[1]).sum();
        let ata01: f64 = m.iter().map(|r| r[0] * r[1]).sum();
        assert!(ata00 * ata11 - ata01 * ata01 > 1e-6);
    }

    #[test]
    fn config_validation() {
        assert!(SimConfig::default().validate().is_ok());
        let bad = SimConfig {
            annotations_per_sample: 11,
            ..small()
        };
        assert!(bad.validate().is_err());
        let bad = SimConfig {
            feature_noise_sd: -1.0,
            ..small()
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn exact_model_reproduces_perception() {
        let c = SimConfig {
            feature_noise_sd: 0.0,
            ..small()
        };
        let pop = gen_population(&c).unwrap();
        let model = exact_model(&c, &pop).unwrap();
        for s in gen_latent_samples(&c, Role::Source).unwrap().iter().take(50) {
            let e = model.embed(&s.features).unwrap();
            for (j, p) in pop.iter().enumerate() {
                for dim in Dimension::BOTH {
                    let d = dim.index();
                    let latent = [s.latent_act, s.latent_val][d];
                    let got = model.heads[d][j].apply(&e.dims[d]);
                    assert!((got - p.perceive(dim, latent)).abs() < 1e-5, "{got} vs {}", p.perceive(dim, latent));
                }
            }
        }
    }
}
