//! The residual CNN family: encoder, performers and context classifier.

mod checkpoint;
mod layers;
mod part;
mod tensor;

pub use checkpoint::{read_checkpoint, write_checkpoint, CheckpointManifest, PartEntry};
pub use layers::{Activation, Mode};
pub use part::{
    build_part, gcd, round_half_up, stack_channels, BlockSpec, Layout, Part, PartCache, PartSpec,
    StackSpec,
};
pub use tensor::Tensor;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::separation::{FEATURE_COLS, FEATURE_ROWS};
use crate::{Error, Result};

pub const K1: usize = 4;
pub const N_CONTEXTS: usize = 6;
pub const K0_VALUES: [usize; 2] = [3, 5];
pub const K2_ENCODER_VALUES: [usize; 3] = [1, 2, 3];
pub const K2_PERFORMER_VALUES: [usize; 3] = [1, 2, 4];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ModelConfig {
    pub k0_encoder: usize,
    pub k0_performer: usize,
    pub k2_encoder: usize,
    pub k2_performer: usize,
    pub k1: usize,
}

impl ModelConfig {
    pub fn new(
        k0_encoder: usize,
        k0_performer: usize,
        k2_encoder: usize,
        k2_performer: usize,
    ) -> Self {
        ModelConfig {
            k0_encoder,
            k0_performer,
            k2_encoder,
            k2_performer,
            k1: K1,
        }
    }

    pub fn label(&self) -> String {
        format!(
            "k0e{}-k0p{}-k2e{}-k2p{}-k1{}",
            self.k0_encoder, self.k0_performer, self.k2_encoder, self.k2_performer, self.k1
        )
    }

    /// Short stable identifier used for run directories.
    pub fn hash(&self) -> String {
        crate::rng::sha256_hex(self.label().as_bytes())[..12].to_string()
    }

    pub fn validate(&self) -> Result<()> {
        if self.k0_encoder == 0
            || self.k0_performer == 0
            || self.k2_encoder == 0
            || self.k2_performer == 0
            || self.k1 == 0
        {
            return Err(Error::Config(format!(
                "degenerate model config {}",
                self.label()
            )));
        }
        Ok(())
    }

    /// Classifier `(k1, k2)`: one more block per stack and 1.25x the
    /// performer's width knob, rounded half away from zero.
    pub fn classifier_knobs(&self) -> (usize, usize) {
        classifier_knobs(self.k1, self.k2_performer)
    }
}

pub fn classifier_knobs(k1: usize, k2_performer: usize) -> (usize, usize) {
    (k1 + 1, round_half_up(1.25 * k2_performer as f64))
}

/// The 36 configurations in lexicographic order of
/// `(k0_encoder, k0_performer, k2_encoder, k2_performer)`.
pub fn enumerate_grid() -> Vec<ModelConfig> {
    let mut out = Vec::with_capacity(36);
    for k0e in K0_VALUES {
        for k0p in K0_VALUES {
            for k2e in K2_ENCODER_VALUES {
                for k2p in K2_PERFORMER_VALUES {
                    out.push(ModelConfig::new(k0e, k0p, k2e, k2p));
                }
            }
        }
    }
    out
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Strategy {
    SingleWithout,
    MultipleWithout,
    SingleWith,
    MultipleWith,
}

impl Strategy {
    pub const ALL: [Strategy; 4] = [
        Strategy::SingleWithout,
        Strategy::MultipleWithout,
        Strategy::SingleWith,
        Strategy::MultipleWith,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            Strategy::SingleWithout => "single-without",
            Strategy::MultipleWithout => "multiple-without",
            Strategy::SingleWith => "single-with",
            Strategy::MultipleWith => "multiple-with",
        }
    }

    pub fn short(&self) -> &'static str {
        match self {
            Strategy::SingleWithout => "SW",
            Strategy::MultipleWithout => "MW",
            Strategy::SingleWith => "Sw",
            Strategy::MultipleWith => "Mw",
        }
    }

    pub fn parse(s: &str) -> Result<Strategy> {
        Strategy::ALL
            .into_iter()
            .find(|k| k.name() == s || k.short() == s)
            .ok_or_else(|| Error::Config(format!("unknown strategy {s:?}")))
    }

    pub fn multiple(&self) -> bool {
        matches!(self, Strategy::MultipleWithout | Strategy::MultipleWith)
    }

    pub fn with_classifier(&self) -> bool {
        matches!(self, Strategy::SingleWith | Strategy::MultipleWith)
    }

    pub fn n_performers(&self) -> usize {
        if self.multiple() {
            N_CONTEXTS
        } else {
            1
        }
    }
}

/// Parameter gradients shaped like a model's parts.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelGrads {
    pub encoder: Vec<f64>,
    pub performers: Vec<Vec<f64>>,
    pub classifier: Option<Vec<f64>>,
}

impl ModelGrads {
    pub fn flat(&self) -> Vec<f64> {
        let mut out = self.encoder.clone();
        self.performers.iter().for_each(|p| out.extend(p));
        if let Some(c) = &self.classifier {
            out.extend(c);
        }
        out
    }
}

pub struct BatchOutput {
    /// Per-sample velocity estimates in (0, 1).
    pub velocity: Vec<f64>,
    /// Per-sample context probabilities, when the classifier exists.
    pub class_probs: Option<Vec<[f64; N_CONTEXTS]>>,
    pub cache: ModelCache,
}

pub struct ModelCache {
    encoder: PartCache,
    latent: Tensor,
    rotated: Vec<Tensor>,
    performer_groups: Vec<(usize, Vec<usize>, PartCache)>,
    classifier: Option<PartCache>,
    n: usize,
}

/// Latent-space signals needed by the rotation update.
pub struct LatentGrads {
    /// Encoder output `z`, `[L][N][1][1]`.
    pub latent: Tensor,
    /// Gradient of each task's loss w.r.t. its rotated latent `R_k z`.
    pub task: Vec<Tensor>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct VelocityModel {
    pub config: ModelConfig,
    pub strategy: Strategy,
    pub seed: u64,
    pub encoder: Part,
    pub performers: Vec<Part>,
    pub classifier: Option<Part>,
    /// One rotation per task (velocity, context) when the classifier exists.
    pub rotations: Vec<Array2<f64>>,
}

fn select(t: &Tensor, idx: &[usize]) -> Tensor {
    let mut out = Tensor::zeros(t.c, idx.len(), t.h, t.w);
    let s = t.h * t.w;
    for c in 0..t.c {
        for (j, &i) in idx.iter().enumerate() {
            out.data[(c * idx.len() + j) * s..][..s]
                .copy_from_slice(&t.data[(c * t.n + i) * s..][..s]);
        }
    }
    out
}

fn rotate(r: &Array2<f64>, z: &Tensor, transpose: bool) -> Tensor {
    let l = z.c;
    let mut out = Tensor::zeros(l, z.n, 1, 1);
    let rs = r.as_slice().expect("standard layout");
    tensor::gemm(l, l, z.n, rs, transpose, &z.data, false, 0.0, &mut out.data);
    out
}

impl VelocityModel {
    pub fn new(config: ModelConfig, strategy: Strategy, seed: u64) -> Result<Self> {
        config.validate()?;
        let enc_spec = build_part(
            Layout::Image,
            1,
            (FEATURE_ROWS, FEATURE_COLS),
            config.k0_encoder,
            config.k1,
            config.k2_encoder as f64,
            1,
            Activation::Relu,
        )?;
        let latent = enc_spec.head_channels;
        let enc_spec = PartSpec {
            out_channels: latent,
            ..enc_spec
        };
        let encoder = Part::new(enc_spec, &mut crate::rng::substream(seed, "init/encoder"));
        let perf_spec = build_part(
            Layout::Sequence,
            1,
            (1, latent),
            config.k0_performer,
            config.k1,
            config.k2_performer as f64,
            1,
            Activation::Sigmoid,
        )?;
        let performers = (0..strategy.n_performers())
            .map(|i| {
                Part::new(
                    perf_spec.clone(),
                    &mut crate::rng::substream(seed, &format!("init/performer/{i}")),
                )
            })
            .collect();
        let classifier = if strategy.with_classifier() {
            let (k1, k2) = config.classifier_knobs();
            let spec = build_part(
                Layout::Sequence,
                1,
                (1, latent),
                config.k0_performer,
                k1,
                k2 as f64,
                N_CONTEXTS,
                Activation::Softmax,
            )?;
            Some(Part::new(
                spec,
                &mut crate::rng::substream(seed, "init/classifier"),
            ))
        } else {
            None
        };
        let rotations = if strategy.with_classifier() {
            vec![Array2::eye(latent); 2]
        } else {
            Vec::new()
        };
        Ok(VelocityModel {
            config,
            strategy,
            seed,
            encoder,
            performers,
            classifier,
            rotations,
        })
    }

    pub fn latent_len(&self) -> usize {
        self.encoder.spec.out_channels
    }

    pub fn n_params(&self) -> usize {
        self.encoder.n_params()
            + self.performers.iter().map(Part::n_params).sum::<usize>()
            + self.classifier.as_ref().map_or(0, Part::n_params)
    }

    pub fn zero_grads(&self) -> ModelGrads {
        ModelGrads {
            encoder: vec![0.0; self.encoder.n_params()],
            performers: self
                .performers
                .iter()
                .map(|p| vec![0.0; p.n_params()])
                .collect(),
            classifier: self.classifier.as_ref().map(|c| vec![0.0; c.n_params()]),
        }
    }

    /// Flat view over all trainable parameters in gradient order.
    pub fn params_flat(&self) -> Vec<f64> {
        let mut out = self.encoder.params.clone();
        self.performers.iter().for_each(|p| out.extend(&p.params));
        if let Some(c) = &self.classifier {
            out.extend(&c.params);
        }
        out
    }

    pub fn set_params_flat(&mut self, flat: &[f64]) {
        let mut rest = flat;
        let mut take = |dst: &mut Vec<f64>| {
            let (a, b) = rest.split_at(dst.len());
            dst.copy_from_slice(a);
            rest = b;
        };
        take(&mut self.encoder.params);
        self.performers.iter_mut().for_each(|p| take(&mut p.params));
        if let Some(c) = &mut self.classifier {
            take(&mut c.params);
        }
    }

    /// Encoder output for a batch of 13x30 feature matrices.
    pub fn encode(&self, x: &Tensor, mode: Mode) -> Result<Tensor> {
        Ok(self.encoder.forward(x, mode)?.0)
    }

    /// One performer applied to latents `[L][N][1][1]`. Single strategies
    /// ignore `context`; Multiple strategies require it.
    pub fn perform(&self, latent: &Tensor, context: Option<usize>, mode: Mode) -> Result<Vec<f64>> {
        let idx = match (self.strategy.multiple(), context) {
            (false, _) => 0,
            (true, Some(c)) if c < N_CONTEXTS => c,
            (true, Some(c)) => return Err(Error::Domain(format!("context {c} out of range"))),
            (true, None) => {
                return Err(Error::Domain(
                    "Multiple strategies need a context id".into(),
                ))
            }
        };
        let z = match self.rotations.first() {
            Some(r) => rotate(r, latent, false),
            None => latent.clone(),
        };
        Ok(self.performers[idx]
            .forward(&z.channels_to_sequence(), mode)?
            .0
            .data)
    }

    /// Context probabilities for latents `[L][N][1][1]`.
    pub fn classify(&self, latent: &Tensor, mode: Mode) -> Result<Vec<[f64; N_CONTEXTS]>> {
        let c = self
            .classifier
            .as_ref()
            .ok_or_else(|| Error::Domain(format!("{} has no classifier", self.strategy.name())))?;
        let z = rotate(&self.rotations[1], latent, false);
        let y = c.forward(&z.channels_to_sequence(), mode)?.0;
        Ok(probs_per_sample(&y))
    }

    pub fn forward(&self, x: &Tensor, contexts: &[usize], mode: Mode) -> Result<BatchOutput> {
        let n = x.n;
        if contexts.len() != n {
            return Err(Error::Shape(format!(
                "{} contexts for a batch of {n}",
                contexts.len()
            )));
        }
        if let Some(&bad) = contexts.iter().find(|&&c| c >= N_CONTEXTS) {
            return Err(Error::Domain(format!("context {bad} out of range")));
        }
        let (latent, enc_cache) = self.encoder.forward(x, mode)?;
        let rotated: Vec<Tensor> = self
            .rotations
            .iter()
            .map(|r| rotate(r, &latent, false))
            .collect();
        let z_vel = rotated.first().unwrap_or(&latent);
        let mut groups: Vec<(usize, Vec<usize>)> = Vec::new();
        if self.strategy.multiple() {
            for k in 0..N_CONTEXTS {
                let idx: Vec<usize> = (0..n).filter(|&i| contexts[i] == k).collect();
                if !idx.is_empty() {
                    groups.push((k, idx));
                }
            }
        } else {
            groups.push((0, (0..n).collect()));
        }
        let mut velocity = vec![0.0; n];
        let mut performer_groups = Vec::with_capacity(groups.len());
        for (k, idx) in groups {
            let sub = if idx.len() == n {
                z_vel.clone()
            } else {
                select(z_vel, &idx)
            };
            let (y, cache) = self.performers[k].forward(&sub.channels_to_sequence(), mode)?;
            for (j, &i) in idx.iter().enumerate() {
                velocity[i] = y.data[j];
            }
            performer_groups.push((k, idx, cache));
        }
        let (class_probs, classifier) = match &self.classifier {
            Some(c) => {
                let (y, cache) = c.forward(&rotated[1].channels_to_sequence(), mode)?;
                (Some(probs_per_sample(&y)), Some(cache))
            }
            None => (None, None),
        };
        Ok(BatchOutput {
            velocity,
            class_probs,
            cache: ModelCache {
                encoder: enc_cache,
                latent,
                rotated,
                performer_groups,
                classifier,
                n,
            },
        })
    }

    /// Folds a training pass's batch statistics into the running ones.
    pub fn absorb_stats(&mut self, cache: &ModelCache) {
        self.encoder.absorb_stats(&cache.encoder);
        for (k, _, c) in &cache.performer_groups {
            self.performers[*k].absorb_stats(c);
        }
        if let (Some(part), Some(c)) = (&mut self.classifier, &cache.classifier) {
            part.absorb_stats(c);
        }
    }

    /// Backpropagates `d_velocity` (dL/d estimate) and `d_probs`
    /// (dL/d probabilities) into `grads`; the task losses are summed.
    pub fn backward(
        &self,
        cache: &ModelCache,
        d_velocity: &[f64],
        d_probs: Option<&[[f64; N_CONTEXTS]]>,
        grads: &mut ModelGrads,
    ) -> LatentGrads {
        let l = self.latent_len();
        let n = cache.n;
        let mut dz_vel = Tensor::zeros(l, n, 1, 1);
        for (k, idx, pc) in &cache.performer_groups {
            let dy = Tensor::from_data(
                1,
                idx.len(),
                1,
                1,
                idx.iter().map(|&i| d_velocity[i]).collect(),
            );
            let ds = self.performers[*k].backward(pc, &dy, &mut grads.performers[*k]);
            let dc = ds.sequence_to_channels();
            for c in 0..l {
                for (j, &i) in idx.iter().enumerate() {
                    dz_vel.data[c * n + i] = dc.data[c * idx.len() + j];
                }
            }
        }
        let mut task = vec![dz_vel];
        if let (Some(part), Some(pc), Some(dp)) = (&self.classifier, &cache.classifier, d_probs) {
            let mut dy = Tensor::zeros(N_CONTEXTS, n, 1, 1);
            for (i, row) in dp.iter().enumerate() {
                for c in 0..N_CONTEXTS {
                    dy.data[c * n + i] = row[c];
                }
            }
            let ds = part.backward(
                pc,
                &dy,
                grads.classifier.as_mut().expect("classifier grads"),
            );
            task.push(ds.sequence_to_channels());
        }
        let dz = if self.rotations.is_empty() {
            task[0].clone()
        } else {
            let mut acc = Tensor::zeros(l, n, 1, 1);
            for (r, g) in self.rotations.iter().zip(&task) {
                let back = rotate(r, g, true);
                acc.data
                    .iter_mut()
                    .zip(&back.data)
                    .for_each(|(a, b)| *a += b);
            }
            acc
        };
        self.encoder
            .backward(&cache.encoder, &dz, &mut grads.encoder);
        LatentGrads {
            latent: cache.latent.clone(),
            task,
        }
    }

    /// Rotated latents of the last forward pass, one per task.
    pub fn rotated_latents<'a>(&self, cache: &'a ModelCache) -> &'a [Tensor] {
        &cache.rotated
    }
}

fn probs_per_sample(y: &Tensor) -> Vec<[f64; N_CONTEXTS]> {
    (0..y.n)
        .map(|i| {
            let mut row = [0.0; N_CONTEXTS];
            for (c, r) in row.iter_mut().enumerate() {
                *r = y.data[c * y.n + i];
            }
            row
        })
        .collect()
}
