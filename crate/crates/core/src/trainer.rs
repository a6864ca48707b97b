//! Training procedure.
//!
//! Each iteration draws one sample per source domain, weak-augments them,
//! builds worst-case strong replicas, then applies the losses in a fixed
//! order with per-loss gradient routing:
//!
//! 1. supervised segmentation (weak + worst-case strong) → student
//! 2. dual-view teacher consistency ×γ → student
//! 3. classmate boundary regression → classmates + encoder (never the
//!    student decoder)
//! 4. task-level consistency ×γ → classmates + student
//! 5. EMA update of the teacher
//!
//! `accumulate_losses` switches to a single summed objective with one
//! optimizer step. All randomness is derived from the run seed through
//! labeled streams, so runs are bit-reproducible; parallelism only ever
//! spans independent runs.

use crate::error::{Error, Result};
use crate::fourier::{self, AugConfig, MaskMode};
use crate::losses::{self, LossConfig};
use crate::nn::{hash_entries, ClassmateTask, Group, ModelConfig, NormMode, ParamEntry, SegModel};
use crate::optim::{Adam, AdamConfig};
use crate::raster::ImageTensor;
use crate::rng;
use crate::scalar::Scalar;
use crate::sdf::{self, BinaryMask};
use crate::synthdata::{loo_splits, DomainSet, Sample};
use crate::tensor::Tensor;
use ndarray::{Array3, Array4, Axis, Ix4};
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};

// ---------------------------------------------------------------------------
// configuration
// ---------------------------------------------------------------------------

/// Strong-augmentation arm used for the worst-case supervised loss.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StrongAug {
    /// No strong replicas at all (plain supervised baseline).
    None,
    /// Constant-λ amplitude interpolation.
    Am,
    /// Gaussian-mask amplitude mixing.
    Ag,
}

/// Feature switches for the ablation grid.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(default)]
pub struct ModeFlags {
    pub strong_aug: StrongAug,
    /// Teacher model plus dual-view KL consistency.
    pub use_ec: bool,
    pub use_classmates: bool,
    /// Classmates regress boundaries and consistency runs through the smooth
    /// Heaviside; off = classmates do plain segmentation (same-task arm).
    pub use_ic_dual_task: bool,
    pub use_feature_perturbation: bool,
    /// Single summed objective with one optimizer step instead of the
    /// per-loss update sequence.
    pub accumulate_losses: bool,
}

impl Default for ModeFlags {
    fn default() -> Self {
        Self {
            strong_aug: StrongAug::Ag,
            use_ec: true,
            use_classmates: true,
            use_ic_dual_task: true,
            use_feature_perturbation: true,
            accumulate_losses: false,
        }
    }
}

impl ModeFlags {
    pub fn all_off() -> Self {
        Self {
            strong_aug: StrongAug::None,
            use_ec: false,
            use_classmates: false,
            use_ic_dual_task: false,
            use_feature_perturbation: false,
            accumulate_losses: false,
        }
    }
}

/// Weak augmentation: random scaling with crop/pad back, horizontal flip,
/// brightness. Geometric transforms hit the image and its mask identically;
/// the photometric one touches the image only.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(default)]
pub struct WeakAugConfig {
    pub scale: (f64, f64),
    pub flip_p: f64,
    pub brightness: (f64, f64),
}

impl Default for WeakAugConfig {
    fn default() -> Self {
        Self {
            scale: (0.9, 1.1),
            flip_p: 0.5,
            brightness: (0.9, 1.1),
        }
    }
}

/// Numeric precision of a training run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    F32,
    F64,
}

impl Default for Precision {
    fn default() -> Self {
        Precision::F32
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: u32,
    pub lr: f64,
    /// lr is multiplied by this factor once, at `lr_decay_at_frac·epochs`.
    pub lr_decay_factor: f64,
    pub lr_decay_at_frac: f64,
    /// EMA decay rate of the teacher.
    pub ema_momentum: f64,
    pub seed: u64,
    pub flags: ModeFlags,
    pub model: ModelConfig,
    pub loss: LossConfig,
    pub aug: AugConfig,
    pub weak_aug: WeakAugConfig,
    pub adam: AdamConfig,
    /// Iterations per epoch; default covers the largest source domain once.
    pub iters_per_epoch: Option<usize>,
    /// Supervised-only warm-start epochs before the full framework runs.
    pub pretrain_epochs: u32,
    /// Checkpoint cadence in epochs; 0 = final epoch only.
    pub checkpoint_every: u32,
    /// Held-out evaluation cadence in epochs.
    pub eval_every: u32,
    /// Which precision `train_run` dispatches to.
    pub precision: Precision,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 40,
            lr: 1e-3,
            lr_decay_factor: 0.5,
            lr_decay_at_frac: 2.0 / 3.0,
            ema_momentum: 0.9995,
            seed: 0,
            flags: ModeFlags::default(),
            model: ModelConfig::default(),
            loss: LossConfig::default(),
            aug: AugConfig::default(),
            weak_aug: WeakAugConfig::default(),
            adam: AdamConfig::default(),
            iters_per_epoch: None,
            pretrain_epochs: 0,
            checkpoint_every: 0,
            eval_every: 1,
            precision: Precision::F32,
        }
    }
}

impl TrainConfig {
    /// Defaults sized for the synthetic benchmark: a slimmer network than the
    /// generic default so the full leave-one-domain-out grid fits the CPU
    /// budget, and f32 math for throughput.
    pub fn benchmark_profile() -> Self {
        Self {
            model: ModelConfig {
                encoder_widths: [8, 16, 32, 32],
                decoder_widths: [16, 8, 4],
                ..ModelConfig::default()
            },
            precision: Precision::F32,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::config("epochs must be positive"));
        }
        if self.lr <= 0.0 {
            return Err(Error::config("lr must be positive"));
        }
        if !(0.0..=1.0).contains(&self.ema_momentum) {
            return Err(Error::config("ema_momentum must lie in [0, 1]"));
        }
        self.model.validate()?;
        self.loss.validate()?;
        self.aug.validate()?;
        Ok(())
    }

    /// Canonical JSON plus its hash; the resolved snapshot a run writes.
    pub fn canonical(&self) -> Result<(String, String)> {
        let json = serde_json::to_string_pretty(self)?;
        let hash = crate::nn::hex_string(&Sha256::digest(json.as_bytes()));
        Ok((json, hash))
    }

    fn lr_at(&self, epoch: u32) -> f64 {
        let cut = (self.epochs as f64 * self.lr_decay_at_frac).floor() as u32;
        if epoch >= cut && self.lr_decay_factor != 1.0 {
            self.lr * self.lr_decay_factor
        } else {
            self.lr
        }
    }

    fn mask_mode(&self) -> MaskMode {
        match self.flags.strong_aug {
            StrongAug::Am => MaskMode::Am,
            _ => MaskMode::Ag,
        }
    }
}

/// Table-4-style ablation variants.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Baseline,
    ModelA,
    ModelB,
    ModelC,
    ModelD,
    ModelE,
    Hcdg,
}

pub const ALL_VARIANTS: [Variant; 7] = [
    Variant::Baseline,
    Variant::ModelA,
    Variant::ModelB,
    Variant::ModelC,
    Variant::ModelD,
    Variant::ModelE,
    Variant::Hcdg,
];

impl Variant {
    pub fn name(&self) -> &'static str {
        match self {
            Variant::Baseline => "Baseline",
            Variant::ModelA => "Model A",
            Variant::ModelB => "Model B",
            Variant::ModelC => "Model C",
            Variant::ModelD => "Model D",
            Variant::ModelE => "Model E",
            Variant::Hcdg => "HCDG",
        }
    }

    pub fn parse(s: &str) -> Option<Variant> {
        match s.to_ascii_lowercase().replace([' ', '_'], "").as_str() {
            "baseline" => Some(Variant::Baseline),
            "modela" | "a" => Some(Variant::ModelA),
            "modelb" | "b" => Some(Variant::ModelB),
            "modelc" | "c" => Some(Variant::ModelC),
            "modeld" | "d" => Some(Variant::ModelD),
            "modele" | "e" => Some(Variant::ModelE),
            "hcdg" => Some(Variant::Hcdg),
            _ => None,
        }
    }

    /// Flag assignment of each grid row.
    pub fn flags(&self) -> ModeFlags {
        let mut f = ModeFlags::all_off();
        match self {
            Variant::Baseline => {}
            Variant::ModelA => {
                f.strong_aug = StrongAug::Am;
                f.use_ec = true;
            }
            Variant::ModelB => {
                f.strong_aug = StrongAug::Ag;
                f.use_ec = true;
            }
            Variant::ModelC => {
                f.strong_aug = StrongAug::Am;
                f.use_ec = true;
                f.use_classmates = true;
                f.use_feature_perturbation = true;
            }
            Variant::ModelD => {
                f.strong_aug = StrongAug::Am;
                f.use_ec = true;
                f.use_classmates = true;
                f.use_ic_dual_task = true;
                f.use_feature_perturbation = true;
            }
            Variant::ModelE => {
                f.strong_aug = StrongAug::Ag;
                f.use_classmates = true;
                f.use_ic_dual_task = true;
                f.use_feature_perturbation = true;
            }
            Variant::Hcdg => {
                f.strong_aug = StrongAug::Ag;
                f.use_ec = true;
                f.use_classmates = true;
                f.use_ic_dual_task = true;
                f.use_feature_perturbation = true;
            }
        }
        f
    }
}

// ---------------------------------------------------------------------------
// weak augmentation and batch assembly
// ---------------------------------------------------------------------------

fn bilinear_resize(src: &Array3<f64>, nh: usize, nw: usize) -> Array3<f64> {
    let (h, w, c) = src.dim();
    let mut out = Array3::zeros((nh, nw, c));
    for i in 0..nh {
        let fy = ((i as f64 + 0.5) * h as f64 / nh as f64 - 0.5).clamp(0.0, (h - 1) as f64);
        let y0 = fy.floor() as usize;
        let y1 = (y0 + 1).min(h - 1);
        let dy = fy - y0 as f64;
        for j in 0..nw {
            let fx = ((j as f64 + 0.5) * w as f64 / nw as f64 - 0.5).clamp(0.0, (w - 1) as f64);
            let x0 = fx.floor() as usize;
            let x1 = (x0 + 1).min(w - 1);
            let dx = fx - x0 as f64;
            for ch in 0..c {
                let v00 = src[[y0, x0, ch]];
                let v01 = src[[y0, x1, ch]];
                let v10 = src[[y1, x0, ch]];
                let v11 = src[[y1, x1, ch]];
                out[[i, j, ch]] =
                    v00 * (1.0 - dy) * (1.0 - dx) + v01 * (1.0 - dy) * dx + v10 * dy * (1.0 - dx)
                        + v11 * dy * dx;
            }
        }
    }
    out
}

fn nearest_resize_mask(src: &BinaryMask, nh: usize, nw: usize) -> BinaryMask {
    let (h, w, c) = src.dim();
    let mut out = BinaryMask::zeros(nh, nw, c);
    for i in 0..nh {
        let y = (((i as f64 + 0.5) * h as f64 / nh as f64 - 0.5).round() as isize)
            .clamp(0, h as isize - 1) as usize;
        for j in 0..nw {
            let x = (((j as f64 + 0.5) * w as f64 / nw as f64 - 0.5).round() as isize)
                .clamp(0, w as isize - 1) as usize;
            for ch in 0..c {
                out.data_mut()[[i, j, ch]] = src.data()[[y, x, ch]];
            }
        }
    }
    out
}

fn center_fit(img: Array3<f64>, mask: BinaryMask, res: usize) -> (Array3<f64>, BinaryMask) {
    let (h, w, c) = img.dim();
    if h == res && w == res {
        return (img, mask);
    }
    let mut oi = Array3::zeros((res, res, c));
    let cm = mask.dim().2;
    let mut om = BinaryMask::zeros(res, res, cm);
    if h >= res {
        // center crop
        let off = (h - res) / 2;
        for i in 0..res {
            for j in 0..res {
                for ch in 0..c {
                    oi[[i, j, ch]] = img[[i + off, j + off, ch]];
                }
                for ch in 0..cm {
                    om.data_mut()[[i, j, ch]] = mask.data()[[i + off, j + off, ch]];
                }
            }
        }
    } else {
        // center pad with zeros
        let off = (res - h) / 2;
        for i in 0..h {
            for j in 0..w {
                for ch in 0..c {
                    oi[[i + off, j + off, ch]] = img[[i, j, ch]];
                }
                for ch in 0..cm {
                    om.data_mut()[[i + off, j + off, ch]] = mask.data()[[i, j, ch]];
                }
            }
        }
    }
    (oi, om)
}

/// Weak augmentation of one sample; draw order is scale, flip, brightness.
pub fn weak_augment(
    image: &ImageTensor<f64>,
    mask: &BinaryMask,
    cfg: &WeakAugConfig,
    rng: &mut impl Rng,
) -> Result<(ImageTensor<f64>, BinaryMask)> {
    let res = image.height();
    let s = rng.random_range(cfg.scale.0..cfg.scale.1);
    let flip = rng.random_range(0.0..1.0) < cfg.flip_p;
    let b = rng.random_range(cfg.brightness.0..cfg.brightness.1);

    let n = ((res as f64 * s).round() as usize).max(8);
    let (mut img, mut msk) = if n == res {
        (image.data().clone(), mask.clone())
    } else {
        (
            bilinear_resize(image.data(), n, n),
            nearest_resize_mask(mask, n, n),
        )
    };
    let fitted = center_fit(img, msk, res);
    img = fitted.0;
    msk = fitted.1;

    if flip {
        let (h, w, c) = img.dim();
        let mut fi = Array3::zeros((h, w, c));
        let cm = msk.dim().2;
        let mut fm = BinaryMask::zeros(h, w, cm);
        for i in 0..h {
            for j in 0..w {
                for ch in 0..c {
                    fi[[i, j, ch]] = img[[i, w - 1 - j, ch]];
                }
                for ch in 0..cm {
                    fm.data_mut()[[i, j, ch]] = msk.data()[[i, w - 1 - j, ch]];
                }
            }
        }
        img = fi;
        msk = fm;
    }

    let img = img.mapv(|v| (v * b).clamp(0.0, 1.0));
    Ok((ImageTensor::new(img)?, msk))
}

/// HWC unit-range image → CHW scalar array.
pub fn image_chw<T: Scalar>(img: &ImageTensor<f64>) -> Array3<T> {
    let (h, w, c) = img.data().dim();
    Array3::from_shape_fn((c, h, w), |(ch, i, j)| T::cast(img.data()[[i, j, ch]]))
}

fn batch_images<T: Scalar>(images: &[ImageTensor<f64>]) -> Tensor<T> {
    let (h, w, c) = images[0].data().dim();
    let mut out = Array4::<T>::zeros((images.len(), c, h, w));
    for (b, img) in images.iter().enumerate() {
        out.index_axis_mut(Axis(0), b).assign(&image_chw::<T>(img));
    }
    Tensor::from_array(out, false)
}

fn batch_masks<T: Scalar>(masks: &[BinaryMask]) -> Tensor<T> {
    let (h, w, c) = masks[0].dim();
    let mut out = Array4::<T>::zeros((masks.len(), c, h, w));
    for (b, m) in masks.iter().enumerate() {
        for ch in 0..c {
            for i in 0..h {
                for j in 0..w {
                    out[[b, ch, i, j]] = T::cast(m.data()[[i, j, ch]] as f64);
                }
            }
        }
    }
    Tensor::from_array(out, false)
}

fn batch_boundaries<T: Scalar>(masks: &[BinaryMask]) -> Tensor<T> {
    let (h, w, c) = masks[0].dim();
    let mut out = Array4::<T>::zeros((masks.len(), c, h, w));
    for (b, m) in masks.iter().enumerate() {
        let bd = sdf::mask_to_boundary::<T>(m);
        for ch in 0..c {
            for i in 0..h {
                for j in 0..w {
                    out[[b, ch, i, j]] = bd.data[[i, j, ch]];
                }
            }
        }
    }
    Tensor::from_array(out, false)
}

/// Deterministic per-epoch visit order of one domain's samples.
pub fn epoch_order(seed: u64, domain: usize, epoch: u32, n: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    let mut r = rng::indexed_stream(seed, &format!("sampler/{domain}"), epoch as u64);
    idx.shuffle(&mut r);
    idx
}

// ---------------------------------------------------------------------------
// evaluation
// ---------------------------------------------------------------------------

/// Aggregated segmentation quality over a sample set.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct EvalReport {
    pub n_images: usize,
    /// Mean Dice per channel, percent.
    pub dice_pct: Vec<f64>,
    pub dice_mean_pct: f64,
    /// Mean ASD in pixels per channel; `None` if undefined for every image.
    pub asd_px: Vec<Option<f64>>,
    /// Number of per-image, per-channel ASD values skipped as undefined.
    pub asd_warnings: usize,
}

/// Threshold logits at probability 0.5 (ties map to background).
fn logits_to_mask<T: Scalar>(logits: &Tensor<T>, b: usize) -> BinaryMask {
    let ld = logits.data();
    let l4 = ld.view().into_dimensionality::<Ix4>().unwrap();
    let (_, c, h, w) = l4.dim();
    let mut m = BinaryMask::zeros(h, w, c);
    for ch in 0..c {
        for i in 0..h {
            for j in 0..w {
                // sigmoid(z) > 0.5 ⇔ z > 0
                if l4[[b, ch, i, j]] > T::zero() {
                    m.data_mut()[[i, j, ch]] = 1;
                }
            }
        }
    }
    m
}

/// Deterministic full-resolution evaluation: per-image Dice/ASD, averaged.
pub fn evaluate<T: Scalar>(
    model: &SegModel<T>,
    samples: &[Sample],
    use_student: bool,
) -> Result<EvalReport> {
    if samples.is_empty() {
        return Err(Error::data("no samples to evaluate"));
    }
    let c_cls = samples[0].mask.dim().2;
    let mut dice_sum = vec![0.0f64; c_cls];
    let mut asd_sum = vec![0.0f64; c_cls];
    let mut asd_n = vec![0usize; c_cls];
    let mut warnings = 0usize;
    for s in samples {
        let x = batch_images::<T>(std::slice::from_ref(&s.image));
        let logits = if use_student {
            crate::tensor::no_grad(|| {
                let z = model.encode(&x, NormMode::Eval)?;
                Ok::<_, Error>(model.decode_student(&z, NormMode::Eval))
            })?
        } else {
            model.forward_teacher(&x)?
        };
        let pred = logits_to_mask(&logits, 0);
        let dice = sdf::dice::<f64>(&pred, &s.mask)?;
        let asd = sdf::asd::<f64>(&pred, &s.mask)?;
        for ch in 0..c_cls {
            dice_sum[ch] += dice[ch];
            match asd[ch] {
                Some(d) => {
                    asd_sum[ch] += d;
                    asd_n[ch] += 1;
                }
                None => warnings += 1,
            }
        }
    }
    let n = samples.len() as f64;
    let dice_pct: Vec<f64> = dice_sum.iter().map(|d| 100.0 * d / n).collect();
    let dice_mean_pct = dice_pct.iter().sum::<f64>() / c_cls as f64;
    let asd_px: Vec<Option<f64>> = (0..c_cls)
        .map(|ch| {
            if asd_n[ch] > 0 {
                Some(asd_sum[ch] / asd_n[ch] as f64)
            } else {
                None
            }
        })
        .collect();
    Ok(EvalReport {
        n_images: samples.len(),
        dice_pct,
        dice_mean_pct,
        asd_px,
        asd_warnings: warnings,
    })
}

// ---------------------------------------------------------------------------
// run record
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EpochRow {
    pub epoch: u32,
    pub lr: f64,
    pub gamma: f64,
    pub l_seg_w: f64,
    pub l_seg_s: f64,
    pub l_ec: f64,
    pub l_b: f64,
    pub l_ic: f64,
    pub heldout_dice_mean_pct: Option<f64>,
}

/// Everything one training run produced.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunRecord {
    pub config_hash: String,
    pub dataset_hash: String,
    pub epochs: Vec<EpochRow>,
    pub winner_histogram: BTreeMap<usize, u64>,
    /// Held-out evaluation of the student at the final epoch, if a domain is
    /// held out.
    pub final_heldout: Option<EvalReport>,
    /// In-domain evaluation (test splits of the training domains).
    pub final_in_domain: EvalReport,
    pub final_student_hash: String,
    pub wall_seconds: f64,
    pub out_dir: Option<PathBuf>,
}

/// Fingerprint of a dataset's full content.
pub fn dataset_fingerprint(ds: &DomainSet) -> String {
    let mut h = Sha256::new();
    for group in ds.train.iter().chain(ds.test.iter()) {
        for s in group {
            h.update(s.sample_id.as_bytes());
            for v in s.image.data().iter() {
                h.update(v.to_le_bytes());
            }
            for v in s.mask.data().iter() {
                h.update([*v]);
            }
        }
    }
    crate::nn::hex_string(&h.finalize())
}

/// Observer invoked at audit-relevant points of a run.
pub trait TrainHook<T: Scalar> {
    /// Right after candidate scoring, before any gradient pass of the
    /// iteration: the model state still matches the logged scores.
    #[allow(clippy::too_many_arguments)]
    fn on_domainup(
        &mut self,
        _model: &SegModel<T>,
        _candidates: &[Vec<Array3<T>>],
        _targets: &Tensor<T>,
        _scores: &[Vec<T>],
        _winners: &[usize],
    ) {
    }

    /// After the optimizer steps of one iteration, before the EMA update.
    fn on_iteration_end(&mut self, _model: &SegModel<T>, _step: u64) {}
}

struct NoHook;
impl<T: Scalar> TrainHook<T> for NoHook {}

// ---------------------------------------------------------------------------
// the training loop
// ---------------------------------------------------------------------------

fn finite_or_abort(name: &str, v: f64, step: u64, out_dir: Option<&Path>) -> Result<()> {
    if v.is_finite() {
        return Ok(());
    }
    if let Some(dir) = out_dir {
        let diag = serde_json::json!({ "step": step, "loss": name, "value": format!("{v}") });
        let _ = std::fs::write(dir.join("diagnostic.json"), diag.to_string());
    }
    Err(Error::Numerical(format!(
        "{name} became non-finite ({v}) at step {step}"
    )))
}

/// Train on the non-held-out domains of `ds`.
pub fn train<T: Scalar>(
    ds: &DomainSet,
    cfg: &TrainConfig,
    out_dir: Option<&Path>,
) -> Result<RunRecord> {
    train_with_hook::<T>(ds, cfg, out_dir, &mut NoHook)
}

pub fn train_with_hook<T: Scalar>(
    ds: &DomainSet,
    cfg: &TrainConfig,
    out_dir: Option<&Path>,
    hook: &mut dyn TrainHook<T>,
) -> Result<RunRecord> {
    cfg.validate()?;
    let t_start = std::time::Instant::now();
    let train_ids = ds.train_domain_ids();
    let k_tr = train_ids.len();
    if k_tr < 2 {
        return Err(Error::config(format!(
            "need at least 2 training domains, got {k_tr}"
        )));
    }
    for &k in &train_ids {
        if ds.train[k].is_empty() {
            return Err(Error::config(format!("domain {k} has zero samples")));
        }
    }

    let (config_json, config_hash) = cfg.canonical()?;
    let dataset_hash = dataset_fingerprint(ds);
    let mut losses_file = match out_dir {
        Some(dir) => {
            std::fs::create_dir_all(dir.join("checkpoints"))?;
            std::fs::write(dir.join("config.json"), &config_json)?;
            Some(std::io::BufWriter::new(std::fs::File::create(
                dir.join("losses.jsonl"),
            )?))
        }
        None => None,
    };

    let seed = cfg.seed;
    let mut init_rng = rng::stream(seed, "init");
    let model = SegModel::<T>::new(cfg.model.clone(), &mut init_rng)?;
    let mut adam = Adam::<T>::new(cfg.adam);

    let student_params = model.student_entries();
    let encoder_params = model.group(Group::Encoder);
    let classmate_params = model.group(Group::Classmates);
    let mut cla_and_encoder: Vec<ParamEntry<T>> = classmate_params.clone();
    cla_and_encoder.extend(encoder_params.iter().cloned());
    let mut cla_and_student: Vec<ParamEntry<T>> = classmate_params.clone();
    cla_and_student.extend(student_params.iter().cloned());
    let mut everything: Vec<ParamEntry<T>> = student_params.clone();
    everything.extend(classmate_params.iter().cloned());

    let zero_all = |params: &[ParamEntry<T>]| {
        for e in params {
            e.tensor.zero_grad();
        }
    };

    let iters = cfg
        .iters_per_epoch
        .unwrap_or_else(|| train_ids.iter().map(|&k| ds.train[k].len()).max().unwrap());
    let flags = cfg.flags;
    let use_domainup = flags.strong_aug != StrongAug::None;
    let mut aug_cfg = cfg.aug.clone();
    aug_cfg.mask_mode = cfg.mask_mode();
    let omega = cfg.loss.omega as usize;
    let temperature = T::cast(cfg.loss.temperature);
    let delta = T::cast(cfg.loss.delta);
    let classmate_task = if flags.use_ic_dual_task {
        ClassmateTask::Boundary
    } else {
        ClassmateTask::Segmentation
    };

    let mut rows: Vec<EpochRow> = Vec::new();
    let mut winner_hist: BTreeMap<usize, u64> = BTreeMap::new();
    let mut step: u64 = 0;

    for epoch in 0..cfg.epochs {
        let pretraining = epoch < cfg.pretrain_epochs;
        if cfg.pretrain_epochs > 0 && epoch == cfg.pretrain_epochs {
            // hand the warm-started weights to the teacher before the
            // framework phase begins
            model.ema_update(T::zero())?;
        }
        let framework_epoch = epoch.saturating_sub(cfg.pretrain_epochs);
        let gamma_f64 = losses::rampup_gamma(framework_epoch, &cfg.loss);
        let gamma = T::cast(gamma_f64);
        let lr = T::cast(cfg.lr_at(epoch));

        let orders: BTreeMap<usize, Vec<usize>> = train_ids
            .iter()
            .map(|&k| (k, epoch_order(seed, k, epoch, ds.train[k].len())))
            .collect();

        let mut sums = [0.0f64; 5]; // l_seg_w, l_seg_s, l_ec, l_b, l_ic

        for it in 0..iters {
            // --- assemble the mini-batch: one primary per source domain ---
            let primaries: Vec<&Sample> = train_ids
                .iter()
                .map(|&k| {
                    let ord = &orders[&k];
                    &ds.train[k][ord[it % ord.len()]]
                })
                .collect();

            let mut weak_rng = rng::indexed_stream(seed, "weakaug", step);
            let mut weak_imgs: Vec<ImageTensor<f64>> = Vec::with_capacity(k_tr);
            let mut weak_masks: Vec<BinaryMask> = Vec::with_capacity(k_tr);
            for s in &primaries {
                let (wi, wm) = weak_augment(&s.image, &s.mask, &cfg.weak_aug, &mut weak_rng)?;
                weak_imgs.push(wi);
                weak_masks.push(wm);
            }

            let weak_batch = batch_images::<T>(&weak_imgs);
            let targets = batch_masks::<T>(&weak_masks);

            // --- strong candidates: one per (primary, counterpart) pair ---
            let mut candidates: Vec<Vec<Array3<T>>> = Vec::new();
            let mut winners: Vec<usize> = Vec::new();
            if use_domainup && !pretraining {
                // counterpart pool: the batch primaries plus ω-1 extra
                // weak-augmented draws per domain
                let mut extra_rng = rng::indexed_stream(seed, "counterpart", step);
                let mut pool: Vec<ImageTensor<f64>> = Vec::with_capacity(omega * k_tr);
                for (slot, &k) in train_ids.iter().enumerate() {
                    pool.push(weak_imgs[slot].clone());
                    for _ in 1..omega {
                        let pick = extra_rng.random_range(0..ds.train[k].len());
                        let s = &ds.train[k][pick];
                        let (wi, _) = weak_augment(&s.image, &s.mask, &cfg.weak_aug, &mut extra_rng)?;
                        pool.push(wi);
                    }
                }
                let pool_spectra: Vec<_> = pool
                    .iter()
                    .map(|img| fourier::decompose(&to_scalar_image::<T>(img)))
                    .collect::<Result<Vec<_>>>()?;
                let weak_spectra: Vec<_> = weak_imgs
                    .iter()
                    .map(|img| fourier::decompose(&to_scalar_image::<T>(img)))
                    .collect::<Result<Vec<_>>>()?;

                let mut strong_rng = rng::indexed_stream(seed, "strongaug", step);
                let res = ds.resolution;
                for spec_i in &weak_spectra {
                    let mut cands = Vec::with_capacity(pool.len());
                    for spec_r in &pool_spectra {
                        let mask =
                            fourier::sample_sigmask::<T>(res, res, &aug_cfg, &mut strong_rng)?;
                        let mixed = fourier::mix_amplitude(spec_i, spec_r, &mask)?;
                        let img = fourier::reconstruct(&mixed)?;
                        cands.push(image_to_chw_t(&img));
                    }
                    candidates.push(cands);
                }
            }

            // --- losses with per-loss routing (or one accumulated step) ---
            let mut perturb_rng = rng::indexed_stream(seed, "perturb", step);
            let ema_m = T::cast(cfg.ema_momentum);
            let run_ec = flags.use_ec && !pretraining;
            let run_cla = flags.use_classmates && !pretraining;
            // a zero-weighted consistency pass is a no-op; skipping it keeps
            // optimizer state and statistics bit-identical to a run without it
            let gamma_live = gamma_f64 > 0.0;

            let boundary_targets = if run_cla && flags.use_ic_dual_task {
                Some(batch_boundaries::<T>(&weak_masks))
            } else {
                None
            };

            let l_seg_w;
            let mut l_seg_s = 0.0f64;
            let mut l_ec_val = 0.0f64;
            let mut l_b_val = 0.0f64;
            let mut l_ic_val = 0.0f64;
            let mut ec_parts = (0.0f64, 0.0f64);

            if flags.accumulate_losses && !pretraining {
                // single summed objective, one optimizer step
                zero_all(&everything);
                let (strong_batch, outcome_winners) = if use_domainup {
                    let scores = losses::score_candidates(&model, &candidates, &targets)?;
                    let w = losses::select_winners(&scores);
                    hook.on_domainup(&model, &candidates, &targets, &scores, &w);
                    (Some(build_strong_batch(&candidates, &w)), w)
                } else {
                    (None, Vec::new())
                };
                winners = outcome_winners;

                let (weak_logits, z) = model.forward_student(&weak_batch, NormMode::Train)?;
                let seg_w = losses::bce_seg(&weak_logits, &targets);
                l_seg_w = seg_w.item().as_();
                let mut l_seg = seg_w;
                let mut strong_logits = None;
                if let Some(sb) = &strong_batch {
                    let (sl, _) = model.forward_student(sb, NormMode::Train)?;
                    let seg_s = losses::bce_seg(&sl, &targets);
                    l_seg_s = seg_s.item().as_();
                    l_seg = l_seg.add(&seg_s);
                    strong_logits = Some(sl);
                }

                let ec = if run_ec && gamma_live {
                    let sb = strong_batch
                        .as_ref()
                        .ok_or_else(|| Error::config("EC needs a strong augmentation arm"))?;
                    let tea_w = model.forward_teacher(&weak_batch)?;
                    let tea_s = model.forward_teacher(sb)?;
                    let w2s = losses::kl_consistency(&weak_logits, &tea_s, temperature);
                    let s2w = losses::kl_consistency(
                        strong_logits.as_ref().unwrap(),
                        &tea_w,
                        temperature,
                    );
                    ec_parts = (w2s.item().as_(), s2w.item().as_());
                    let ec = w2s.add(&s2w);
                    l_ec_val = ec.item().as_();
                    Some(ec)
                } else {
                    None
                };

                let (lb, ic) = if run_cla {
                    let prng = flags.use_feature_perturbation.then_some(&mut perturb_rng);
                    let preds = model.forward_classmates(&z, NormMode::Train, classmate_task, prng);
                    let lb = match (&boundary_targets, classmate_task) {
                        (Some(bt), ClassmateTask::Boundary) => losses::boundary_mse(&preds, bt),
                        _ => {
                            let mut sum: Option<Tensor<T>> = None;
                            for p in &preds {
                                let t = losses::bce_seg(p, &targets);
                                sum = Some(match sum {
                                    Some(acc) => acc.add(&t),
                                    None => t,
                                });
                            }
                            sum.unwrap()
                        }
                    };
                    l_b_val = lb.item().as_();
                    let ic = if gamma_live {
                        let ic = match classmate_task {
                            ClassmateTask::Boundary => {
                                losses::ic_consistency(&weak_logits, &preds, delta)
                            }
                            ClassmateTask::Segmentation => {
                                losses::same_task_consistency(&weak_logits, &preds)
                            }
                        };
                        l_ic_val = ic.item().as_();
                        Some(ic)
                    } else {
                        None
                    };
                    (Some(lb), ic)
                } else {
                    (None, None)
                };

                let total = losses::total_loss(&l_seg, ec.as_ref(), lb.as_ref(), ic.as_ref(), gamma);
                finite_or_abort("l_total", total.item().as_(), step, out_dir)?;
                total.backward()?;
                adam.step(lr, &everything);
            } else {
                // Per-loss sequence with routed updates.
                // 1. supervised segmentation → student
                zero_all(&everything);
                if use_domainup && !pretraining {
                    let scores = losses::score_candidates(&model, &candidates, &targets)?;
                    let w = losses::select_winners(&scores);
                    hook.on_domainup(&model, &candidates, &targets, &scores, &w);
                    let (l_seg, lw, ls) =
                        losses::domainup_with_winners(&model, &weak_batch, &candidates, &w, &targets)?;
                    winners = w;
                    l_seg_w = lw.as_();
                    l_seg_s = ls.as_();
                    finite_or_abort("l_seg", l_seg.item().as_(), step, out_dir)?;
                    l_seg.backward()?;
                } else {
                    let (weak_logits, _) = model.forward_student(&weak_batch, NormMode::Train)?;
                    let l_seg = losses::bce_seg(&weak_logits, &targets);
                    l_seg_w = l_seg.item().as_();
                    finite_or_abort("l_seg", l_seg_w, step, out_dir)?;
                    l_seg.backward()?;
                }
                adam.step(lr, &student_params);

                // 2. dual-view consistency ×γ → student
                if run_ec && gamma_live {
                    let strong_batch = build_strong_batch(&candidates, &winners);
                    zero_all(&everything);
                    let (s_w, _) = model.forward_student(&weak_batch, NormMode::Train)?;
                    let (s_s, _) = model.forward_student(&strong_batch, NormMode::Train)?;
                    let t_w = model.forward_teacher(&weak_batch)?;
                    let t_s = model.forward_teacher(&strong_batch)?;
                    let w2s = losses::kl_consistency(&s_w, &t_s, temperature);
                    let s2w = losses::kl_consistency(&s_s, &t_w, temperature);
                    ec_parts = (w2s.item().as_(), s2w.item().as_());
                    let ec = w2s.add(&s2w);
                    l_ec_val = ec.item().as_();
                    finite_or_abort("l_ec", l_ec_val, step, out_dir)?;
                    let weighted = ec.mul_scalar(gamma);
                    weighted.backward()?;
                    adam.step(lr, &student_params);
                }

                // 3. classmate supervision → classmates + encoder only
                if run_cla {
                    zero_all(&everything);
                    let z = model.encode(&weak_batch, NormMode::Train)?;
                    let prng = flags.use_feature_perturbation.then_some(&mut perturb_rng);
                    let preds = model.forward_classmates(&z, NormMode::Train, classmate_task, prng);
                    let lb = match (&boundary_targets, classmate_task) {
                        (Some(bt), ClassmateTask::Boundary) => losses::boundary_mse(&preds, bt),
                        _ => {
                            let mut sum: Option<Tensor<T>> = None;
                            for p in &preds {
                                let t = losses::bce_seg(p, &targets);
                                sum = Some(match sum {
                                    Some(acc) => acc.add(&t),
                                    None => t,
                                });
                            }
                            sum.unwrap()
                        }
                    };
                    l_b_val = lb.item().as_();
                    finite_or_abort("l_b", l_b_val, step, out_dir)?;
                    lb.backward()?;
                    adam.step(lr, &cla_and_encoder);

                    // 4. task-level consistency ×γ → classmates + student
                    if gamma_live {
                        zero_all(&everything);
                        let (stu_logits, z) = model.forward_student(&weak_batch, NormMode::Train)?;
                        let prng2 = flags.use_feature_perturbation.then_some(&mut perturb_rng);
                        let preds =
                            model.forward_classmates(&z, NormMode::Train, classmate_task, prng2);
                        let ic = match classmate_task {
                            ClassmateTask::Boundary => {
                                losses::ic_consistency(&stu_logits, &preds, delta)
                            }
                            ClassmateTask::Segmentation => {
                                losses::same_task_consistency(&stu_logits, &preds)
                            }
                        };
                        l_ic_val = ic.item().as_();
                        finite_or_abort("l_ic", l_ic_val, step, out_dir)?;
                        let weighted = ic.mul_scalar(gamma);
                        weighted.backward()?;
                        adam.step(lr, &cla_and_student);
                    }
                }
            }

            hook.on_iteration_end(&model, step);

            // 5. EMA teacher update, once per iteration, after all steps
            if flags.use_ec && !pretraining {
                model.ema_update(ema_m)?;
            }

            for &w in &winners {
                *winner_hist.entry(w).or_insert(0) += 1;
            }
            sums[0] += l_seg_w;
            sums[1] += l_seg_s;
            sums[2] += l_ec_val;
            sums[3] += l_b_val;
            sums[4] += l_ic_val;

            if let Some(f) = losses_file.as_mut() {
                let line = serde_json::json!({
                    "step": step,
                    "epoch": epoch,
                    "l_seg_w": l_seg_w,
                    "l_seg_s": l_seg_s,
                    "winner_index": winners,
                    "l_ec_w2s": ec_parts.0,
                    "l_ec_s2w": ec_parts.1,
                    "l_b": l_b_val,
                    "l_ic_cla": l_ic_val,
                    "gamma": gamma_f64,
                });
                writeln!(f, "{line}")?;
            }
            step += 1;
        }

        // end of epoch: evaluation + checkpointing
        let heldout_eval = match ds.held_out {
            Some(k) if cfg.eval_every > 0 && (epoch + 1) % cfg.eval_every == 0 => {
                Some(evaluate(&model, &ds.test[k], true)?)
            }
            _ => None,
        };
        rows.push(EpochRow {
            epoch,
            lr: cfg.lr_at(epoch),
            gamma: gamma_f64,
            l_seg_w: sums[0] / iters as f64,
            l_seg_s: sums[1] / iters as f64,
            l_ec: sums[2] / iters as f64,
            l_b: sums[3] / iters as f64,
            l_ic: sums[4] / iters as f64,
            heldout_dice_mean_pct: heldout_eval.as_ref().map(|e| e.dice_mean_pct),
        });
        if let Some(dir) = out_dir {
            let last = epoch + 1 == cfg.epochs;
            let cadence = cfg.checkpoint_every > 0 && (epoch + 1) % cfg.checkpoint_every == 0;
            if last || cadence {
                crate::checkpoint::save_model(
                    &model,
                    &config_hash,
                    &dir.join(format!("checkpoints/epoch_{}.bin", epoch + 1)),
                )?;
            }
        }
    }

    // final evaluations
    let final_heldout = match ds.held_out {
        Some(k) => Some(evaluate(&model, &ds.test[k], true)?),
        None => None,
    };
    let in_domain_samples: Vec<Sample> = train_ids
        .iter()
        .flat_map(|&k| ds.test[k].iter().cloned())
        .collect();
    let final_in_domain = evaluate(&model, &in_domain_samples, true)?;
    let final_student_hash = hash_entries(&model.student_entries());

    let record = RunRecord {
        config_hash,
        dataset_hash,
        epochs: rows,
        winner_histogram: winner_hist,
        final_heldout,
        final_in_domain,
        final_student_hash,
        wall_seconds: t_start.elapsed().as_secs_f64(),
        out_dir: out_dir.map(|p| p.to_path_buf()),
    };
    if let Some(dir) = out_dir {
        drop(losses_file);
        write_metrics_csv(&record, &dir.join("metrics.csv"))?;
        write_report_md(&record, cfg, &dir.join("report.md"))?;
        std::fs::write(dir.join("run_record.json"), serde_json::to_vec_pretty(&record)?)?;
    }
    Ok(record)
}

fn to_scalar_image<T: Scalar>(img: &ImageTensor<f64>) -> ImageTensor<T> {
    ImageTensor::new(img.data().mapv(T::cast)).expect("unit-range image stays valid")
}

fn image_to_chw_t<T: Scalar>(img: &ImageTensor<T>) -> Array3<T> {
    let (h, w, c) = img.data().dim();
    Array3::from_shape_fn((c, h, w), |(ch, i, j)| img.data()[[i, j, ch]])
}

fn build_strong_batch<T: Scalar>(candidates: &[Vec<Array3<T>>], winners: &[usize]) -> Tensor<T> {
    let (c, h, w) = candidates[0][0].dim();
    let mut out = Array4::<T>::zeros((candidates.len(), c, h, w));
    for (i, &win) in winners.iter().enumerate() {
        out.index_axis_mut(Axis(0), i).assign(&candidates[i][win]);
    }
    Tensor::from_array(out, false)
}

fn write_metrics_csv(record: &RunRecord, path: &Path) -> Result<()> {
    let mut out = String::from(
        "epoch,lr,gamma,l_seg_w,l_seg_s,l_ec,l_b,l_ic,heldout_dice_mean_pct\n",
    );
    for r in &record.epochs {
        let heldout = r
            .heldout_dice_mean_pct
            .map_or(String::new(), |v| format!("{v}"));
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{},{}\n",
            r.epoch, r.lr, r.gamma, r.l_seg_w, r.l_seg_s, r.l_ec, r.l_b, r.l_ic, heldout
        ));
    }
    std::fs::write(path, out)?;
    Ok(())
}

fn write_report_md(record: &RunRecord, cfg: &TrainConfig, path: &Path) -> Result<()> {
    let mut md = String::new();
    md.push_str("# Training run\n\n");
    md.push_str(&format!("- config hash: `{}`\n", record.config_hash));
    md.push_str(&format!("- dataset hash: `{}`\n", record.dataset_hash));
    md.push_str(&format!("- epochs: {}\n", cfg.epochs));
    md.push_str(&format!("- wall time: {:.1} s\n", record.wall_seconds));
    md.push_str(&format!(
        "- final student hash: `{}`\n\n",
        record.final_student_hash
    ));
    if let Some(h) = &record.final_heldout {
        md.push_str(&format!(
            "Held-out: Dice {:.2}% (per channel {:?}), ASD {:?} px, {} ASD warnings over {} images\n\n",
            h.dice_mean_pct, h.dice_pct, h.asd_px, h.asd_warnings, h.n_images
        ));
    }
    let d = &record.final_in_domain;
    md.push_str(&format!(
        "In-domain: Dice {:.2}% (per channel {:?}), ASD {:?} px, {} ASD warnings over {} images\n\n",
        d.dice_mean_pct, d.dice_pct, d.asd_px, d.asd_warnings, d.n_images
    ));
    md.push_str(&format!("Winner histogram: {:?}\n", record.winner_histogram));
    std::fs::write(path, md)?;
    Ok(())
}

// ---------------------------------------------------------------------------
// precision dispatch and the ablation grid
// ---------------------------------------------------------------------------

/// Run `train` at the precision the config names.
pub fn train_run(ds: &DomainSet, cfg: &TrainConfig, out_dir: Option<&Path>) -> Result<RunRecord> {
    match cfg.precision {
        Precision::F32 => train::<f32>(ds, cfg, out_dir),
        Precision::F64 => train::<f64>(ds, cfg, out_dir),
    }
}

/// Cap the global worker pool used for parallel runs.
pub fn set_worker_threads(n: usize) -> Result<()> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| Error::config(format!("thread pool: {e}")))
}

/// One cell of the ablation grid.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GridCell {
    pub variant: String,
    pub seed: u64,
    pub held_out: usize,
    pub heldout_dice_mean_pct: f64,
    pub heldout_dice_pct: Vec<f64>,
    pub in_domain_dice_mean_pct: f64,
    pub wall_seconds: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GridReport {
    pub cells: Vec<GridCell>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GridRow {
    pub variant: String,
    /// Mean held-out Dice per held-out domain (averaged over seeds), percent.
    pub per_domain_mean: Vec<f64>,
    pub mean: f64,
    pub std: f64,
}

impl GridReport {
    /// Per-variant mean±std over seeds of the LOO-averaged held-out Dice.
    pub fn summarize(&self, variants: &[Variant], k: usize) -> Vec<GridRow> {
        let mut rows = Vec::new();
        for v in variants {
            let name = v.name().to_string();
            let mut per_domain = vec![Vec::new(); k];
            for c in self.cells.iter().filter(|c| c.variant == name) {
                per_domain[c.held_out].push(c.heldout_dice_mean_pct);
            }
            let per_domain_mean: Vec<f64> = per_domain
                .iter()
                .map(|v| v.iter().sum::<f64>() / v.len().max(1) as f64)
                .collect();
            // per-seed LOO average → mean and std over seeds
            let mut seeds: BTreeMap<u64, Vec<f64>> = BTreeMap::new();
            for c in self.cells.iter().filter(|c| c.variant == name) {
                seeds.entry(c.seed).or_default().push(c.heldout_dice_mean_pct);
            }
            let per_seed: Vec<f64> = seeds
                .values()
                .map(|v| v.iter().sum::<f64>() / v.len() as f64)
                .collect();
            let mean = per_seed.iter().sum::<f64>() / per_seed.len().max(1) as f64;
            let var = if per_seed.len() > 1 {
                per_seed.iter().map(|x| (x - mean).powi(2)).sum::<f64>()
                    / (per_seed.len() - 1) as f64
            } else {
                0.0
            };
            rows.push(GridRow {
                variant: name,
                per_domain_mean,
                mean,
                std: var.sqrt(),
            });
        }
        rows
    }

    /// Markdown table in the ablation-grid row layout.
    pub fn to_markdown(&self, variants: &[Variant], k: usize) -> String {
        let rows = self.summarize(variants, k);
        let mut md = String::from("| Method |");
        for d in 0..k {
            md.push_str(&format!(" Domain {d} |"));
        }
        md.push_str(" Avg (mean±std) |\n|---|");
        for _ in 0..k {
            md.push_str("---|");
        }
        md.push_str("---|\n");
        for r in rows {
            md.push_str(&format!("| {} |", r.variant));
            for d in &r.per_domain_mean {
                md.push_str(&format!(" {d:.2} |"));
            }
            md.push_str(&format!(" {:.2}±{:.2} |\n", r.mean, r.std));
        }
        md
    }
}

/// Train every (variant, seed, held-out domain) combination, in parallel
/// across runs.
pub fn run_ablation_grid(
    ds: &DomainSet,
    base_cfg: &TrainConfig,
    variants: &[Variant],
    seeds: &[u64],
    out_dir: Option<&Path>,
) -> Result<GridReport> {
    use rayon::prelude::*;
    let k = ds.num_domains();
    let mut jobs = Vec::new();
    for &variant in variants {
        for &seed in seeds {
            for split in loo_splits(k) {
                jobs.push((variant, seed, split.held_out));
            }
        }
    }
    let cells: Result<Vec<GridCell>> = jobs
        .par_iter()
        .map(|&(variant, seed, held_out)| {
            let mut cfg = base_cfg.clone();
            cfg.flags = variant.flags();
            cfg.seed = seed;
            let run_dir = out_dir.map(|d| {
                d.join(format!(
                    "runs/{}/seed{}/holdout{}",
                    variant.name().to_lowercase().replace(' ', "_"),
                    seed,
                    held_out
                ))
            });
            if let Some(dir) = &run_dir {
                std::fs::create_dir_all(dir)?;
            }
            let held = ds.with_held_out(held_out);
            let record = train_run(&held, &cfg, run_dir.as_deref())?;
            let heldout = record
                .final_heldout
                .as_ref()
                .expect("held-out eval present");
            Ok(GridCell {
                variant: variant.name().to_string(),
                seed,
                held_out,
                heldout_dice_mean_pct: heldout.dice_mean_pct,
                heldout_dice_pct: heldout.dice_pct.clone(),
                in_domain_dice_mean_pct: record.final_in_domain.dice_mean_pct,
                wall_seconds: record.wall_seconds,
            })
        })
        .collect();
    let report = GridReport { cells: cells? };
    if let Some(dir) = out_dir {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join("grid.json"), serde_json::to_vec_pretty(&report)?)?;
        std::fs::write(dir.join("grid.md"), report.to_markdown(variants, k))?;
    }
    Ok(report)
}


#[cfg(test)]
mod timing {
    use super::*;
    use crate::synthdata::generate_benchmark;

    // manual profiling helper: cargo test -p hcdg-core --release timing -- --ignored --nocapture
    #[test]
    #[ignore]
    fn profile_one_iteration() {
        let mut spec = crate::synthdata::benchmark_v1();
        spec.n_train = 8;
        spec.n_test = 4;
        let ds = generate_benchmark(&spec).unwrap().with_held_out(3);
        for (widths, dec) in [([16usize, 32, 64, 64], [32usize, 16, 8]), ([8, 16, 32, 32], [16, 8, 4]), ([6, 12, 24, 24], [12, 6, 4])] {
            for precision in [Precision::F32, Precision::F64] {
                let cfg = TrainConfig {
                    epochs: 1,
                    iters_per_epoch: Some(8),
                    model: ModelConfig {
                        encoder_widths: widths,
                        decoder_widths: dec,
                        ..ModelConfig::default()
                    },
                    precision,
                    seed: 1,
                    ..TrainConfig::default()
                };
                let t = std::time::Instant::now();
                let r = train_run(&ds, &cfg, None).unwrap();
                println!(
                    "widths {widths:?} {precision:?}: {:.1} ms/iter (total {:.2}s)",
                    t.elapsed().as_secs_f64() / 8.0 * 1000.0,
                    r.wall_seconds
                );
            }
        }
    }
}

#[cfg(test)]
mod timing2 {
    use super::*;
    use crate::synthdata::generate_benchmark;

    #[test]
    #[ignore]
    fn profile_variants() {
        let mut spec = crate::synthdata::benchmark_v1();
        spec.n_train = 8;
        spec.n_test = 4;
        let ds = generate_benchmark(&spec).unwrap().with_held_out(3);
        for variant in [Variant::Baseline, Variant::ModelA, Variant::Hcdg] {
            let cfg = TrainConfig {
                epochs: 1,
                iters_per_epoch: Some(8),
                model: ModelConfig {
                    encoder_widths: [8, 16, 32, 32],
                    decoder_widths: [16, 8, 4],
                    ..ModelConfig::default()
                },
                flags: variant.flags(),
                precision: Precision::F32,
                seed: 1,
                ..TrainConfig::default()
            };
            let t = std::time::Instant::now();
            train_run(&ds, &cfg, None).unwrap();
            println!("{}: {:.1} ms/iter", variant.name(), t.elapsed().as_secs_f64() / 8.0 * 1000.0);
        }
    }
}
