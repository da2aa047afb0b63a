//! Two-phase optimization of the atlas and both spatial transformers.
//!
//! Phase 1 (bootstrap) trains the rigid network and the atlas with the flow
//! held at zero. Phase 2 runs two objectives per epoch: a rigid-only one that
//! updates the rigid network against a frozen atlas, then the composed one
//! that updates the non-rigid network and the atlas against a frozen rigid
//! estimate.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use candle_core::{backprop::GradStore, DType, Device, Tensor};
use log::{info, warn};
use ndarray::Array3;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::atlas::{select_seed_image, Atlas};
use crate::error::{Error, Result};
use crate::features::FeatureSet;
use crate::io_config::images::{resize_rgb, save_png};
use crate::io_config::{save_checkpoint, Checkpoint, ImageSet, Manifest, RunConfig, SCHEMA_VERSION};
use crate::losses::{
    atlas_terms, keys_loss, per_image_terms, total_objective, LossReport, LossWeights, ObjectiveMask, PerImageTerms,
    TermInputs,
};
use crate::mapping::{base_grid, compose_tensor, sample_bilinear, ImageMapping, NonRigidStn, RigidStn, SimilarityTensor};
use crate::nn::{Adam, ParamStore};

/// Local and global rigidity scaled by 0.25, global weight set to 0.9.
pub fn apply_extreme_mode(w: &LossWeights) -> LossWeights {
    LossWeights { rigidity_multiplier: 0.25, lambda_global_rigidity: 0.9, ..w.clone() }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Bootstrap,
    Joint,
}

/// One line of the progress log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    /// Number of completed epochs, starting at 1.
    pub epoch: usize,
    pub phase: Phase,
    /// Objective that updated the atlas this epoch.
    pub report: LossReport,
    /// Rigid-only objective of the joint phase.
    pub rigid: Option<LossReport>,
    /// Chosen orientation per image; empty without flips.
    pub flipped: Vec<bool>,
    /// Per-image keys loss of the unchosen orientation; empty without flips.
    pub rejected_keys: Vec<f64>,
    pub active: usize,
}

/// Network inputs prepared once per image set.
#[derive(Debug, Clone)]
struct StnInputs {
    n: usize,
    res: usize,
    flips: bool,
    /// `(N, R, R, 3)` images in `[0, 1]`, sampled to build congealed inputs.
    small: Tensor,
    /// `(E, 3, R, R)` in `[-1, 1]`; mirrored copies follow the originals when flips are on.
    rigid_in: Tensor,
    /// `(R * R, 2)`.
    base: Tensor,
}

impl StnInputs {
    fn new(images: &ImageSet, res: usize, flips: bool) -> Result<Self> {
        let n = images.len();
        let small: Vec<Array3<f32>> = images.images.iter().map(|im| resize_rgb(im, res)).collect();
        let flat: Vec<f32> = small.iter().flat_map(|a| a.iter().copied()).collect();
        let small = Tensor::from_vec(flat, (n, res, res, 3), &Device::Cpu)?;
        let chw = small.permute((0, 3, 1, 2))?.affine(2.0, -1.0)?.contiguous()?;
        let rigid_in = if flips { Tensor::cat(&[&chw, &chw.flip(&[3])?], 0)? } else { chw };
        Ok(Self { n, res, flips, small, rigid_in, base: base_grid(res, res, DType::F32)? })
    }

    fn entries(&self) -> usize {
        if self.flips {
            2 * self.n
        } else {
            self.n
        }
    }

    fn sources(&self) -> Vec<usize> {
        (0..self.entries()).map(|e| e % self.n).collect()
    }

    fn mirror(&self) -> Vec<bool> {
        (0..self.entries()).map(|e| e >= self.n).collect()
    }

    /// Images backward-warped by the given rigid mapping, as non-rigid network input.
    fn congealed(&self, sim: &SimilarityTensor, sources: &[usize], mirror: &[bool]) -> Result<Tensor> {
        let coords = compose_tensor(sim, &self.base, None, mirror)?;
        let s = sample_bilinear(&self.small, sources, &coords)?;
        let b = sources.len();
        Ok(s.values
            .reshape((b, self.res, self.res, 3))?
            .permute((0, 3, 1, 2))?
            .affine(2.0, -1.0)?
            .contiguous()?)
    }
}

/// Atlas, networks and per-image orientation: everything needed to map points.
#[derive(Debug, Clone)]
pub struct Model {
    pub config: RunConfig,
    pub atlas: Atlas,
    rigid: RigidStn,
    pub rigid_params: ParamStore,
    nonrigid: NonRigidStn,
    pub nonrigid_params: ParamStore,
    inputs: StnInputs,
    /// Completed epochs.
    pub epoch: usize,
    /// Chosen orientation per image (`true` = mirrored).
    pub orientation: Vec<bool>,
}

impl Model {
    /// Fresh parameters from `config.seed`: atlas first, then rigid, then non-rigid.
    pub fn new(config: &RunConfig, images: &ImageSet, features: &[FeatureSet]) -> Result<Self> {
        config.validate()?;
        if images.len() != features.len() {
            return Err(Error::InvalidInput(format!(
                "{} images but {} feature sets",
                images.len(),
                features.len()
            )));
        }
        let res = config.atlas_res;
        for f in features {
            f.check()?;
            if f.keys.dim().0 != res || f.keys.dim().1 != res {
                return Err(Error::shape(format!("features of {}", f.name), format!("{res}x{res}"), format!("{:?}", f.keys.dim())));
            }
        }
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut atlas = Atlas::init(res, res, features, config.gradual_atlas, &mut rng)?;
        if config.fixed_atlas {
            let seed = select_seed_image(features);
            info!("fixed atlas from image {}", features[seed].name);
            atlas.init_fixed(&features[seed])?;
        }
        if flip_warmup(config) > 0 {
            atlas.active_set = vec![0];
        }
        Self::with_atlas(config, images, atlas, &mut rng)
    }

    fn with_atlas(config: &RunConfig, images: &ImageSet, atlas: Atlas, rng: &mut ChaCha8Rng) -> Result<Self> {
        let mut rigid_params = ParamStore::new();
        let rigid = RigidStn::new(&mut rigid_params, &config.stn, rng)?;
        let mut nonrigid_params = ParamStore::new();
        let nonrigid = NonRigidStn::new(&mut nonrigid_params, &config.stn, config.atlas_res, rng)?;
        let inputs = StnInputs::new(images, config.stn_input_res(), config.allow_flips)?;
        Ok(Self {
            config: config.clone(),
            atlas,
            rigid,
            rigid_params,
            nonrigid,
            nonrigid_params,
            inputs,
            epoch: 0,
            orientation: vec![false; images.len()],
        })
    }

    /// Rebuild a model from a checkpoint for the same image set.
    pub fn from_checkpoint(ckpt: &Checkpoint, images: &ImageSet) -> Result<Self> {
        let config = RunConfig::from_toml_str(&ckpt.manifest.config)?;
        let state: TrainerState = serde_json::from_value(ckpt.manifest.state.clone())
            .map_err(|e| Error::Schema(format!("malformed trainer state: {e}")))?;
        if state.orientation.len() != images.len() {
            return Err(Error::InvalidInput(format!(
                "checkpoint covers {} images, got {}",
                state.orientation.len(),
                images.len()
            )));
        }
        ckpt.require(&["atlas.keys", "atlas.saliency_logits"])?;
        let keys = ckpt.tensor("atlas.keys")?;
        let [h, w, d] = keys.shape[..] else {
            return Err(Error::Schema("atlas.keys must be 3-dimensional".into()));
        };
        let mut params = ParamStore::new();
        params.zeros("keys", &[h, w, d])?;
        params.zeros("saliency_logits", &[h, w])?;
        let atlas = Atlas { height: h, width: w, dim: d, params, active_set: state.active_set.clone(), fixed: state.fixed };
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut model = Self::with_atlas(&config, images, atlas, &mut rng)?;
        model.atlas.params.restore("atlas", &ckpt.tensors)?;
        model.rigid_params.restore("rigid", &ckpt.tensors)?;
        model.nonrigid_params.restore("nonrigid", &ckpt.tensors)?;
        model.epoch = ckpt.manifest.epoch;
        model.orientation = state.orientation;
        Ok(model)
    }

    pub fn num_images(&self) -> usize {
        self.inputs.n
    }

    pub fn is_trained(&self) -> bool {
        self.epoch > 0
    }

    /// Whether the non-rigid network has been trained at all.
    fn flow_active(&self) -> bool {
        self.epoch > self.config.bootstrap_epochs
    }

    /// Per-image mappings at atlas resolution in the chosen orientation.
    pub fn mappings(&self) -> Result<Vec<ImageMapping>> {
        let n = self.inputs.n;
        let entries: Vec<u32> = (0..n).map(|i| if self.orientation[i] { (n + i) as u32 } else { i as u32 }).collect();
        let ids = Tensor::from_vec(entries, n, &Device::Cpu)?;
        let input = self.inputs.rigid_in.index_select(&ids, 0)?;
        let sim = SimilarityTensor::from_logits(&self.rigid.forward(&input)?.detach())?;
        let params = sim.to_params()?;
        let flows = if self.flow_active() {
            let sources: Vec<usize> = (0..n).collect();
            let congealed = self.inputs.congealed(&sim, &sources, &self.orientation)?;
            let pts = self.nonrigid.forward(&congealed)?.points()?.detach();
            let v = pts.to_dtype(DType::F64)?.to_vec3::<f64>()?;
            v.into_iter().map(|img| Some(img.into_iter().map(|p| [p[0], p[1]]).collect())).collect()
        } else {
            vec![None; n]
        };
        let res = self.config.atlas_res;
        Ok(params
            .into_iter()
            .zip(flows)
            .enumerate()
            .map(|(i, (p, f))| ImageMapping::new(p, f, self.orientation[i], res, res))
            .collect())
    }
}

/// Bookkeeping stored in the checkpoint manifest.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
struct TrainerState {
    active_set: Vec<usize>,
    fixed: bool,
    orientation: Vec<bool>,
    last_keys: Vec<f64>,
    adam_steps: BTreeMap<String, BTreeMap<String, u64>>,
}

/// Sampled batch for one objective evaluation.
struct Batch {
    keys: Tensor,
    saliency: Tensor,
    validity: Tensor,
    coords: Tensor,
    flow: Option<Tensor>,
    scale: Tensor,
}

impl Batch {
    fn select(&self, idx: &[usize]) -> Result<Self> {
        let ids = Tensor::from_vec(idx.iter().map(|&i| i as u32).collect::<Vec<_>>(), idx.len(), &Device::Cpu)?;
        let s = |t: &Tensor| -> Result<Tensor> { Ok(t.contiguous()?.index_select(&ids, 0)?) };
        Ok(Self {
            keys: s(&self.keys)?,
            saliency: s(&self.saliency)?,
            validity: s(&self.validity)?,
            coords: s(&self.coords)?,
            flow: self.flow.as_ref().map(s).transpose()?,
            scale: s(&self.scale)?,
        })
    }
}

/// Result of the atlas-updating objective of one epoch.
struct Composed {
    total: Tensor,
    report: LossReport,
    flipped: Vec<bool>,
    rejected_keys: Vec<f64>,
}

pub struct Trainer {
    pub model: Model,
    weights: LossWeights,
    /// `(N, H_A, W_A, D + 1)`: keys with the initial saliency appended.
    field: Tensor,
    /// `(H_A * W_A, 2)` atlas pixel centers.
    grid: Tensor,
    opt_rigid: Adam,
    opt_nonrigid: Adam,
    opt_atlas: Adam,
    /// Keys loss per image in the chosen orientation, from the last epoch.
    pub last_keys: Vec<f64>,
    pub history: Vec<EpochRecord>,
}

impl Trainer {
    pub fn new(config: &RunConfig, images: &ImageSet, features: &[FeatureSet]) -> Result<Self> {
        let model = Model::new(config, images, features)?;
        Self::from_model(model, features)
    }

    /// Resume from a checkpoint; the run continues up to `config.epochs` of the stored config.
    pub fn resume(ckpt: &Checkpoint, images: &ImageSet, features: &[FeatureSet]) -> Result<Self> {
        let model = Model::from_checkpoint(ckpt, images)?;
        let state: TrainerState = serde_json::from_value(ckpt.manifest.state.clone())
            .map_err(|e| Error::Schema(format!("malformed trainer state: {e}")))?;
        let mut t = Self::from_model(model, features)?;
        let steps = |g: &str| state.adam_steps.get(g).cloned().unwrap_or_default();
        t.opt_rigid.restore("adam.rigid", &t.model.rigid_params, &steps("rigid"), &ckpt.tensors)?;
        t.opt_nonrigid.restore("adam.nonrigid", &t.model.nonrigid_params, &steps("nonrigid"), &ckpt.tensors)?;
        t.opt_atlas.restore("adam.atlas", &t.model.atlas.params, &steps("atlas"), &ckpt.tensors)?;
        t.last_keys = state.last_keys;
        Ok(t)
    }

    fn from_model(model: Model, features: &[FeatureSet]) -> Result<Self> {
        let cfg = &model.config;
        let (h, w, d) = features[0].keys.dim();
        let mut data = Vec::with_capacity(features.len() * h * w * (d + 1));
        for f in features {
            for i in 0..h {
                for j in 0..w {
                    data.extend(f.keys.slice(ndarray::s![i, j, ..]).iter().copied());
                    data.push(f.saliency[[i, j]]);
                }
            }
        }
        let field = Tensor::from_vec(data, (features.len(), h, w, d + 1), &Device::Cpu)?;
        let n = features.len();
        Ok(Self {
            weights: cfg.effective_weights(),
            field,
            grid: base_grid(h, w, DType::F32)?,
            opt_rigid: Adam::new(cfg.lr_stn, &cfg.optimizer),
            opt_nonrigid: Adam::new(cfg.lr_stn, &cfg.optimizer),
            opt_atlas: Adam::new(cfg.lr_atlas, &cfg.optimizer),
            last_keys: vec![0.0; n],
            history: Vec::new(),
            model,
        })
    }

    fn dim(&self) -> usize {
        self.model.atlas.dim
    }

    fn atlas_trainable(&self) -> bool {
        !self.model.atlas.fixed
    }

    /// `(P, D)` keys and `(P,)` saliency, the latter pinned to one under the saliency ablation.
    fn atlas_tensors(&self) -> Result<(Tensor, Tensor)> {
        let keys = self.model.atlas.keys_flat()?;
        let sal = if self.model.config.ablation.no_saliency {
            Tensor::ones(self.model.atlas.height * self.model.atlas.width, DType::F32, &Device::Cpu)?
        } else {
            self.model.atlas.saliency_flat()?
        };
        Ok((keys, sal))
    }

    fn sample(&self, coords: &Tensor, flow: Option<Tensor>, scale: &Tensor) -> Result<Batch> {
        let s = sample_bilinear(&self.field, &self.model.inputs.sources(), coords)?;
        let d = self.dim();
        Ok(Batch {
            keys: s.values.narrow(2, 0, d)?,
            saliency: s.values.narrow(2, d, 1)?.squeeze(2)?,
            validity: s.validity,
            coords: coords.clone(),
            flow,
            scale: scale.clone(),
        })
    }

    fn terms(&self, b: &Batch, keys: &Tensor, sal: &Tensor) -> Result<PerImageTerms> {
        let inp = TermInputs {
            warped_keys: &b.keys,
            warped_saliency: &b.saliency,
            validity: &b.validity,
            coords: &b.coords,
            flow: b.flow.as_ref(),
            scale: &b.scale,
            atlas_keys: keys,
            atlas_saliency: sal,
            grid: &self.grid,
            height: self.model.atlas.height,
            width: self.model.atlas.width,
        };
        per_image_terms(&inp, &self.weights, self.model.config.saliency_normalizer)
    }

    /// Per-entry terms where only `live` entries see a differentiable atlas.
    fn gated_terms(&self, b: &Batch, live: &[bool]) -> Result<PerImageTerms> {
        let (keys, sal) = self.atlas_tensors()?;
        let (kd, sd) = (keys.detach(), sal.detach());
        if live.iter().all(|&l| l) {
            return self.terms(b, &keys, &sal);
        }
        if live.iter().all(|&l| !l) {
            return self.terms(b, &kd, &sd);
        }
        let on: Vec<usize> = (0..live.len()).filter(|&e| live[e]).collect();
        let off: Vec<usize> = (0..live.len()).filter(|&e| !live[e]).collect();
        let t_on = self.terms(&b.select(&on)?, &keys, &sal)?;
        let t_off = self.terms(&b.select(&off)?, &kd, &sd)?;
        let mut pos = vec![0usize; live.len()];
        for (k, &e) in on.iter().chain(&off).enumerate() {
            pos[e] = k;
        }
        PerImageTerms::cat(&[&t_on, &t_off])?.select(&pos)
    }

    fn mask<'a>(&self, center: Option<&'a [bool]>) -> ObjectiveMask<'a> {
        ObjectiveMask { keys: !self.model.config.ablation.no_keys, center }
    }

    /// Objective that updates the atlas, with orientation selection when flips are on.
    fn composed(&self, b: &Batch) -> Result<Composed> {
        let n = self.model.inputs.n;
        let flips = self.model.inputs.flips;
        let (keys, sal) = self.atlas_tensors()?;
        let flipped: Vec<bool> = if flips {
            let k = keys_loss(
                &b.keys.detach(),
                &keys.detach(),
                &sal.detach(),
                &b.validity,
                self.weights.lambda_l2,
                self.model.config.saliency_normalizer,
            )?
            .to_dtype(DType::F64)?
            .to_vec1::<f64>()?;
            // a learned atlas may settle in either orientation; the first active
            // image keeps its own so the choice is unambiguous
            let anchor = if self.model.atlas.fixed { None } else { self.model.atlas.active_set.first().copied() };
            (0..n).map(|i| Some(i) != anchor && k[n + i] < k[i]).collect()
        } else {
            vec![false; n]
        };
        let chosen: Vec<usize> = (0..n).map(|i| if flipped[i] { n + i } else { i }).collect();
        let active: Vec<bool> = (0..n).map(|i| self.model.atlas.is_active(i)).collect();
        let mut live = vec![false; self.model.inputs.entries()];
        if self.atlas_trainable() {
            for i in 0..n {
                live[chosen[i]] = active[i];
            }
        }
        let terms = self.gated_terms(b, &live)?;
        let at = atlas_terms(&keys, &sal, &self.weights)?;
        let chosen_terms = if flips { terms.select(&chosen)? } else { terms.clone() };
        let main = total_objective(&chosen_terms, Some(&at), self.mask(Some(&active)), &self.weights)?;
        if !flips {
            return Ok(Composed { total: main.total, report: main.report, flipped, rejected_keys: Vec::new() });
        }
        let rejected: Vec<usize> = (0..n).map(|i| if flipped[i] { i } else { n + i }).collect();
        let other = total_objective(&terms.select(&rejected)?, None, self.mask(None), &self.weights)?;
        Ok(Composed {
            total: (main.total + other.total)?,
            report: main.report,
            flipped,
            rejected_keys: other.report.per_image_keys,
        })
    }

    /// Rigid-only objective of the joint phase, atlas held constant.
    fn rigid_only(&self, b: &Batch) -> Result<(Tensor, LossReport)> {
        let n = self.model.inputs.n;
        let terms = self.gated_terms(b, &vec![false; b.scale.dim(0)?])?;
        if !self.model.inputs.flips {
            let o = total_objective(&terms, None, self.mask(None), &self.weights)?;
            return Ok((o.total, o.report));
        }
        let orig = total_objective(&terms.select(&(0..n).collect::<Vec<_>>())?, None, self.mask(None), &self.weights)?;
        let mirr = total_objective(&terms.select(&(n..2 * n).collect::<Vec<_>>())?, None, self.mask(None), &self.weights)?;
        Ok(((orig.total + mirr.total)?, orig.report))
    }

    fn step_atlas(&mut self, grads: &GradStore) -> Result<()> {
        if self.atlas_trainable() {
            self.opt_atlas.step(&self.model.atlas.params, grads)?;
        }
        Ok(())
    }

    /// One full-batch epoch.
    pub fn step(&mut self) -> Result<EpochRecord> {
        let epoch = self.model.epoch;
        let tag = |e: Error| match e {
            Error::NonFinite { component, .. } => Error::NonFinite { component, epoch },
            other => other,
        };
        let inputs = self.model.inputs.clone();
        let mirror = inputs.mirror();
        let grid = self.grid.clone();
        let phase = if epoch < self.model.config.bootstrap_epochs { Phase::Bootstrap } else { Phase::Joint };

        let sim = SimilarityTensor::from_logits(&self.model.rigid.forward(&inputs.rigid_in)?)?;
        let (composed, rigid_report) = match phase {
            Phase::Bootstrap => {
                let coords = compose_tensor(&sim, &grid, None, &mirror)?;
                let batch = self.sample(&coords, None, &sim.scale)?;
                let c = self.composed(&batch).map_err(tag)?;
                let grads = c.total.backward()?;
                self.opt_rigid.step(&self.model.rigid_params, &grads)?;
                self.step_atlas(&grads)?;
                (c, None)
            }
            Phase::Joint => {
                let coords = compose_tensor(&sim, &grid, None, &mirror)?;
                let batch = self.sample(&coords, None, &sim.scale)?;
                let (total, report) = self.rigid_only(&batch).map_err(tag)?;
                let grads = total.backward()?;
                self.opt_rigid.step(&self.model.rigid_params, &grads)?;

                let sim = SimilarityTensor::from_logits(&self.model.rigid.forward(&inputs.rigid_in)?.detach())?;
                let congealed = inputs.congealed(&sim, &inputs.sources(), &mirror)?;
                let flow = self.model.nonrigid.forward(&congealed)?.points()?;
                let coords = compose_tensor(&sim, &grid, Some(&flow), &mirror)?;
                let batch = self.sample(&coords, Some(flow), &sim.scale)?;
                let c = self.composed(&batch).map_err(tag)?;
                let grads = c.total.backward()?;
                self.opt_nonrigid.step(&self.model.nonrigid_params, &grads)?;
                self.step_atlas(&grads)?;
                (c, Some(report))
            }
        };

        self.model.epoch += 1;
        if inputs.flips {
            self.model.orientation = composed.flipped.clone();
        }
        self.last_keys = composed.report.per_image_keys.clone();
        let cfg = &self.model.config;
        let warmup = flip_warmup(cfg);
        if warmup > 0 && self.model.epoch == warmup {
            self.model.atlas.active_set = (0..inputs.n).collect();
            info!("epoch {}: flip warm-up over, all images update the atlas", self.model.epoch);
        }
        if cfg.gradual_atlas && self.model.epoch % cfg.gradual_interval == 0 {
            if let Some(i) = self.model.atlas.grow_active_set(&self.last_keys) {
                info!("epoch {}: image {i} joins the atlas ({} active)", self.model.epoch, self.model.atlas.active_set.len());
            }
        }
        if composed.report.inverse_clamped > 0 {
            warn!("epoch {}: {} inverse-Jacobian terms clamped", self.model.epoch, composed.report.inverse_clamped);
        }
        let record = EpochRecord {
            epoch: self.model.epoch,
            phase,
            report: composed.report,
            rigid: rigid_report,
            flipped: if inputs.flips { composed.flipped } else { Vec::new() },
            rejected_keys: composed.rejected_keys,
            active: self.model.atlas.active_set.len(),
        };
        self.history.push(record.clone());
        Ok(record)
    }

    /// Train up to `config.epochs`, logging and snapshotting into `run_dir` when given.
    ///
    /// A non-finite loss aborts the run after writing `checkpoint_last_finite.safetensors`.
    pub fn run(&mut self, run_dir: Option<&Path>) -> Result<()> {
        let total = self.model.config.epochs;
        let every = self.model.config.snapshot_every;
        let mut log = match run_dir {
            Some(dir) => {
                std::fs::create_dir_all(dir)?;
                Some(std::fs::OpenOptions::new().create(true).append(true).open(dir.join("history.jsonl"))?)
            }
            None => None,
        };
        while self.model.epoch < total {
            let rec = match self.step() {
                Ok(r) => r,
                Err(e @ Error::NonFinite { .. }) => {
                    if let Some(dir) = run_dir {
                        save_checkpoint(&self.checkpoint()?, &dir.join("checkpoint_last_finite.safetensors"))?;
                    }
                    return Err(e);
                }
                Err(e) => return Err(e),
            };
            if let Some(f) = log.as_mut() {
                writeln!(f, "{}", serde_json::to_string(&rec)?)?;
            }
            if rec.epoch % 100 == 0 || rec.epoch == total {
                info!("epoch {}/{total} {:?} loss {:.5} keys {:.5}", rec.epoch, rec.phase, rec.report.total, rec.report.keys);
            }
            if let Some(dir) = run_dir {
                if every > 0 && rec.epoch % every == 0 {
                    self.snapshot(&dir.join("snapshots").join(format!("epoch_{:05}", rec.epoch)))?;
                }
            }
        }
        Ok(())
    }

    /// Checkpoint, atlas saliency and average congealed image.
    pub fn snapshot(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        save_checkpoint(&self.checkpoint()?, &dir.join("checkpoint.safetensors"))?;
        self.model.atlas.save_saliency_png(&dir.join("atlas_saliency.png"))?;
        let images: Vec<Array3<f32>> = self.images_at_atlas()?;
        let avg = crate::apps::average_congealed(&images, &self.model.mappings()?);
        save_png(&avg, &dir.join("average.png"))
    }

    fn images_at_atlas(&self) -> Result<Vec<Array3<f32>>> {
        let n = self.model.inputs.n;
        let r = self.model.inputs.res;
        let v = self.model.inputs.small.flatten_all()?.to_vec1::<f32>()?;
        Ok((0..n)
            .map(|i| Array3::from_shape_vec((r, r, 3), v[i * r * r * 3..(i + 1) * r * r * 3].to_vec()).expect("image shape"))
            .collect())
    }

    pub fn checkpoint(&self) -> Result<Checkpoint> {
        let mut tensors = BTreeMap::new();
        self.model.atlas.params.export("atlas", &mut tensors)?;
        self.model.rigid_params.export("rigid", &mut tensors)?;
        self.model.nonrigid_params.export("nonrigid", &mut tensors)?;
        let mut adam_steps = BTreeMap::new();
        adam_steps.insert("rigid".to_string(), self.opt_rigid.export("adam.rigid", &mut tensors)?);
        adam_steps.insert("nonrigid".to_string(), self.opt_nonrigid.export("adam.nonrigid", &mut tensors)?);
        adam_steps.insert("atlas".to_string(), self.opt_atlas.export("adam.atlas", &mut tensors)?);
        let state = TrainerState {
            active_set: self.model.atlas.active_set.clone(),
            fixed: self.model.atlas.fixed,
            orientation: self.model.orientation.clone(),
            last_keys: self.last_keys.clone(),
            adam_steps,
        };
        let cfg = &self.model.config;
        Ok(Checkpoint {
            manifest: Manifest {
                schema_version: SCHEMA_VERSION,
                epoch: self.model.epoch,
                config_hash: cfg.hash(),
                config: cfg.to_toml_string(),
                state: serde_json::to_value(state)?,
            },
            tensors,
        })
    }
}

/// Everything a finished run hands to the applications.
pub struct TrainOutput {
    pub model: Model,
    pub mappings: Vec<ImageMapping>,
    pub history: Vec<EpochRecord>,
    pub checkpoint: Checkpoint,
}

/// Train from scratch without writing artifacts.
pub fn train(images: &ImageSet, features: &[FeatureSet], config: &RunConfig) -> Result<TrainOutput> {
    let mut t = Trainer::new(config, images, features)?;
    t.run(None)?;
    let checkpoint = t.checkpoint()?;
    let mappings = t.model.mappings()?;
    Ok(TrainOutput { mappings, history: t.history, checkpoint, model: t.model })
}

/// Warm-up length; only plain flip runs need one, gradual and fixed atlases
/// already start from a single image.
fn flip_warmup(config: &RunConfig) -> usize {
    if config.allow_flips && !config.gradual_atlas && !config.fixed_atlas {
        config.flip_warmup
    } else {
        0
    }
}
