//! Adversarial training loop: discriminator warmup, alternating
//! generator/discriminator updates, run logging and checkpointing.

use crate::checkpoint;
use crate::config::{Mode, TrainConfig};
use crate::error::{AldmError, Result};
use crate::losses::{self, LossBreakdown};
use crate::nets::{
    denoise, denoiser_forward, init_denoiser, init_discriminator, onehot_labels, segnet_forward,
    DenoiserSpec, DiscriminatorSpec, NetSpec, ParameterTree, TapedParams,
};
use crate::optim::AdamW;
use crate::schedule::{make_schedule, NoiseSchedule};
use crate::synthdata::Dataset;
use crate::tape::Tape;
use crate::unroll::accumulate_step_gradients;
use ndarray::{Array3, Array4};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

const TAG_GEN: u64 = 0x67656e5f;
const TAG_DISC: u64 = 0x64697363;
const TAG_DATA: u64 = 0x64617461;
const TAG_WARM: u64 = 0x7761726d;
const TAG_INIT_GEN: u64 = 0x1111;
const TAG_INIT_DISC: u64 = 0x2222;

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e3779b97f4a7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
    z ^ (z >> 31)
}

/// Independent per-iteration stream so that resume and mode changes that
/// skip phases never shift another phase's random draws.
fn stream(seed: u64, tag: u64, iter: usize) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(splitmix(seed ^ splitmix(tag) ^ (iter as u64)))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Warmup,
    Gen,
    Disc,
    Eval,
    Abort,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunRecord {
    pub iter: usize,
    pub phase: Phase,
    pub breakdown: Option<LossBreakdown>,
    pub l_dis: Option<f64>,
    pub unix_ms: u64,
    pub wall_ms: f64,
    pub config_hash: String,
    #[serde(default)]
    pub snapshot: Option<String>,
    #[serde(default)]
    pub note: Option<String>,
}

#[derive(Debug, Default)]
pub struct RunLog {
    pub records: Vec<RunRecord>,
    path: Option<PathBuf>,
}

impl RunLog {
    pub fn in_memory() -> Self {
        RunLog::default()
    }

    pub fn at(path: &Path) -> Result<Self> {
        let mut log = RunLog { records: Vec::new(), path: Some(path.to_path_buf()) };
        if path.exists() {
            for line in std::fs::read_to_string(path)?.lines() {
                if line.trim().is_empty() {
                    continue;
                }
                log.records.push(serde_json::from_str(line)?);
            }
        }
        Ok(log)
    }

    pub fn push(&mut self, rec: RunRecord) -> Result<()> {
        if let Some(path) = &self.path {
            let mut f = std::fs::OpenOptions::new().create(true).append(true).open(path)?;
            writeln!(f, "{}", serde_json::to_string(&rec)?)?;
        }
        self.records.push(rec);
        Ok(())
    }

    pub fn last_train_iter(&self) -> Option<usize> {
        self.records
            .iter()
            .filter(|r| matches!(r.phase, Phase::Gen | Phase::Warmup))
            .map(|r| r.iter)
            .max()
    }
}

fn now_ms() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_millis() as u64).unwrap_or(0)
}

/// One training batch in network layout.
#[derive(Debug, Clone)]
pub struct Batch {
    pub x0: Array4<f64>,
    pub labels: Array3<usize>,
    pub styles: Vec<usize>,
}

pub struct Trainer {
    pub cfg: TrainConfig,
    pub dataset: Dataset,
    pub sched: NoiseSchedule,
    pub dspec: DenoiserSpec,
    pub disc_spec: Option<DiscriminatorSpec>,
    pub gen: ParameterTree,
    pub disc: Option<ParameterTree>,
    gen_opt: AdamW,
    disc_opt: Option<AdamW>,
    pub call_trace: Vec<Phase>,
    config_hash: String,
}

impl Trainer {
    pub fn new(cfg: TrainConfig, dataset: Dataset) -> Result<Self> {
        cfg.validate()?;
        let m = &dataset.manifest;
        let dspec = DenoiserSpec {
            in_channels: 3,
            base_width: cfg.model.base_width,
            depth: cfg.model.depth,
            conditioning: cfg.model.conditioning,
            num_styles: m.num_styles,
            num_classes: m.num_classes,
        };
        let sched = make_schedule(cfg.model.t_max, cfg.model.schedule)?;
        let gen = init_denoiser(&dspec, splitmix(cfg.train.seed ^ TAG_INIT_GEN))?;
        let gen_opt = AdamW::new(&gen, cfg.train.lr_generator);
        let (disc_spec, disc, disc_opt) = if cfg.train.mode == Mode::Baseline {
            (None, None, None)
        } else {
            let ds = DiscriminatorSpec {
                num_classes: m.num_classes,
                base_width: cfg.model.disc_base_width,
                depth: cfg.model.disc_depth,
            };
            let dp = init_discriminator(&ds, splitmix(cfg.train.seed ^ TAG_INIT_DISC))?;
            let opt = AdamW::new(&dp, cfg.train.lr_discriminator);
            (Some(ds), Some(dp), Some(opt))
        };
        let config_hash = cfg.config_hash();
        Ok(Trainer {
            cfg,
            dataset,
            sched,
            dspec,
            disc_spec,
            disc,
            gen,
            gen_opt,
            disc_opt,
            call_trace: Vec::new(),
            config_hash,
        })
    }

    pub fn config_hash(&self) -> &str {
        &self.config_hash
    }

    pub fn sample_batch(&self, tag: u64, iter: usize) -> Result<Batch> {
        let idx = self.dataset.train_indices();
        if idx.is_empty() {
            return Err(AldmError::invalid("dataset has no training samples"));
        }
        let mut rng = stream(self.cfg.train.seed, tag, iter);
        let b = self.cfg.train.batch_size;
        let res = self.dataset.manifest.resolution;
        let mut x0 = Array4::<f64>::zeros((b, 3, res, res));
        let mut labels = Array3::<usize>::zeros((b, res, res));
        let mut styles = Vec::with_capacity(b);
        for bi in 0..b {
            let s = self.dataset.load(idx[rng.gen_range(0..idx.len())])?;
            let img = s.image_chw();
            x0.index_axis_mut(ndarray::Axis(0), bi).assign(&img);
            for i in 0..res {
                for j in 0..res {
                    labels[[bi, i, j]] = s.labels[[i, j]];
                }
            }
            styles.push(s.style_id);
        }
        Ok(Batch { x0, labels, styles })
    }

    fn draw_timesteps_and_noise(
        &self,
        rng: &mut ChaCha8Rng,
        shape: (usize, usize, usize, usize),
    ) -> (Vec<usize>, Array4<f64>) {
        let ts: Vec<usize> =
            (0..shape.0).map(|_| rng.gen_range(1..=self.sched.t_max())).collect();
        let mut eps = Array4::<f64>::zeros(shape);
        for v in eps.iter_mut() {
            *v = StandardNormal.sample(rng);
        }
        (ts, eps)
    }

    fn corrupt(&self, x0: &Array4<f64>, eps: &Array4<f64>, ts: &[usize]) -> (Array4<f64>, Vec<f64>, Vec<f64>) {
        let mut x_t = x0.clone();
        let mut sa = Vec::with_capacity(ts.len());
        let mut sn = Vec::with_capacity(ts.len());
        for (bi, &t) in ts.iter().enumerate() {
            let ab = self.sched.alpha_bar(t);
            let (a, n) = (ab.sqrt(), (1.0 - ab).sqrt());
            sa.push(a);
            sn.push(n);
            let mut row = x_t.index_axis_mut(ndarray::Axis(0), bi);
            let e = eps.index_axis(ndarray::Axis(0), bi);
            row.zip_mut_with(&e, |x, &ev| *x = a * *x + n * ev);
        }
        (x_t, sa, sn)
    }

    /// Whether this iteration's generator step uses the unrolled loss.
    pub fn unroll_fires(&self, iter: usize) -> bool {
        self.cfg.train.mode == Mode::AdvUnroll && iter % self.cfg.unroll.unroll_every == 0
    }

    /// One generator update; discriminator parameters are constants.
    pub fn generator_step(&mut self, batch: &Batch, iter: usize) -> Result<LossBreakdown> {
        self.call_trace.push(Phase::Gen);
        let mode = self.cfg.train.mode;
        let lambda = self.cfg.train.lambda_adv;
        let mut rng = stream(self.cfg.train.seed, TAG_GEN, iter);
        let (ts, eps) = self.draw_timesteps_and_noise(&mut rng, batch.x0.dim());
        let (x_t, sa, sn) = self.corrupt(&batch.x0, &eps, &ts);
        let y_onehot = onehot_labels(&batch.labels, self.dspec.num_classes);

        let adversarial = mode != Mode::Baseline;
        let gamma = if adversarial {
            Some(losses::class_weights(&batch.labels, self.dspec.num_classes)?)
        } else {
            None
        };

        let tape = Tape::new();
        let tp = TapedParams::lift(&tape, &self.gen);
        let xv = tape.leaf(x_t.clone().into_dyn());
        let eps_hat =
            denoiser_forward(&self.dspec, &tp, xv, &y_onehot, &batch.styles, &ts, self.sched.t_max())?;
        let l_noise = losses::noise_loss(eps_hat, &eps)?;
        let l_noise_v = l_noise.scalar();

        let mut l_adv_v: Option<f64> = None;
        let mut extra_grads: Option<ParameterTree> = None;
        let total = if adversarial && !self.unroll_fires(iter) {
            let gamma = gamma.as_ref().unwrap();
            let disc_spec = self.disc_spec.as_ref().unwrap();
            let dp = TapedParams::lift(&tape, self.disc.as_ref().unwrap());
            let inv_sa: Vec<f64> = sa.iter().map(|a| 1.0 / a).collect();
            let x0_hat = xv.sub(eps_hat.scale_per_batch(&sn)).scale_per_batch(&inv_sa);
            let logits = segnet_forward(&disc_spec.segnet(), &dp, x0_hat)?;
            let l_adv = losses::adversarial_loss(logits, &batch.labels, gamma)?;
            l_adv_v = Some(l_adv.scalar());
            l_noise.add(l_adv.scale(lambda))
        } else if adversarial {
            // Unrolled window on a shared timestep; adversarial gradients are
            // accumulated per step off this tape and added after scaling.
            let gamma = gamma.as_ref().unwrap();
            let disc_spec = self.disc_spec.as_ref().unwrap();
            let t_u = rng.gen_range(1..=self.sched.t_max());
            let mut eps_u = Array4::<f64>::zeros(batch.x0.dim());
            for v in eps_u.iter_mut() {
                *v = StandardNormal.sample(&mut rng);
            }
            let ts_u = vec![t_u; batch.x0.dim().0];
            let (x_tu, _, _) = self.corrupt(&batch.x0, &eps_u, &ts_u);
            let (g_adv, mean_adv, _) = accumulate_step_gradients(
                &self.dspec,
                &self.gen,
                disc_spec,
                self.disc.as_ref().unwrap(),
                &x_tu,
                &y_onehot,
                &batch.styles,
                &batch.labels,
                gamma,
                t_u,
                &self.cfg.unroll,
                &self.sched,
            )?;
            l_adv_v = Some(mean_adv);
            extra_grads = Some(g_adv);
            l_noise
        } else {
            l_noise
        };

        let total_v = total.scalar();
        if !total_v.is_finite() {
            return Err(AldmError::Numerical(format!(
                "non-finite generator loss at iter {iter}: l_noise={l_noise_v}"
            )));
        }
        let mut grads = tp.gradients(&tape.backward(total));
        if let Some(extra) = extra_grads {
            for ((_, g), (_, e)) in grads.iter_mut().zip(extra.iter()) {
                ndarray::Zip::from(&mut *g).and(e).for_each(|g, &e| *g += lambda * e);
            }
        }
        self.gen_opt.step(&mut self.gen, &grads)?;

        let breakdown = match l_adv_v {
            Some(a) => losses::combined_loss(l_noise_v, a, lambda)?,
            None => LossBreakdown {
                l_noise: l_noise_v,
                l_adv: None,
                l_dm: l_noise_v,
                l_dis: None,
                lambda_adv: lambda,
            },
        };
        Ok(breakdown)
    }

    /// One discriminator update; the generator only produces constants.
    pub fn discriminator_step(&mut self, batch: &Batch, iter: usize) -> Result<f64> {
        self.call_trace.push(Phase::Disc);
        if self.cfg.train.mode == Mode::Baseline {
            return Err(AldmError::invalid("baseline mode has no discriminator"));
        }
        let tag = if self.cfg.train.fresh_fake_sample { TAG_DISC } else { TAG_GEN };
        let mut rng = stream(self.cfg.train.seed, tag, iter);
        let (ts, eps) = self.draw_timesteps_and_noise(&mut rng, batch.x0.dim());
        let (x_t, sa, sn) = self.corrupt(&batch.x0, &eps, &ts);
        let y_onehot = onehot_labels(&batch.labels, self.dspec.num_classes);
        let eps_hat = denoise(
            &self.dspec,
            &self.gen,
            &x_t,
            &y_onehot,
            &batch.styles,
            &ts,
            self.sched.t_max(),
        )?;
        let mut x0_hat = x_t;
        for (bi, (&a, &n)) in sa.iter().zip(sn.iter()).enumerate() {
            let mut row = x0_hat.index_axis_mut(ndarray::Axis(0), bi);
            let e = eps_hat.index_axis(ndarray::Axis(0), bi);
            row.zip_mut_with(&e, |x, &ev| *x = (*x - n * ev) / a);
        }
        let gamma = losses::class_weights(&batch.labels, self.dspec.num_classes)?;
        let disc_spec = self.disc_spec.as_ref().unwrap().clone();
        let disc = self.disc.as_mut().unwrap();
        let tape = Tape::new();
        let dp = TapedParams::lift(&tape, disc);
        let real = tape.leaf(batch.x0.clone().into_dyn());
        let fake = tape.leaf(x0_hat.into_dyn());
        let logits_real = segnet_forward(&disc_spec.segnet(), &dp, real)?;
        let logits_fake = segnet_forward(&disc_spec.segnet(), &dp, fake)?;
        let loss = losses::discriminator_loss(logits_real, &batch.labels, logits_fake, &gamma)?;
        let lv = loss.scalar();
        if !lv.is_finite() {
            return Err(AldmError::Numerical(format!(
                "non-finite discriminator loss at iter {iter}"
            )));
        }
        let grads = dp.gradients(&tape.backward(loss));
        self.disc_opt.as_mut().unwrap().step(disc, &grads)?;
        Ok(lv)
    }

    /// One warmup update: discriminator (or segmenter) only, generator untouched.
    ///
    /// In frozen_segmenter mode warmup trains the net as a plain segmenter on
    /// real images; the fake class never receives supervision.
    pub fn warmup_step(&mut self, iter: usize) -> Result<f64> {
        self.call_trace.push(Phase::Warmup);
        if self.cfg.train.mode == Mode::Baseline {
            return Err(AldmError::invalid("baseline mode has no discriminator"));
        }
        let batch = self.sample_batch(TAG_WARM, iter)?;
        let gamma = losses::class_weights(&batch.labels, self.dspec.num_classes)?;
        let disc_spec = self.disc_spec.as_ref().unwrap().clone();
        if self.cfg.train.mode == Mode::FrozenSegmenter {
            let disc = self.disc.as_mut().unwrap();
            let tape = Tape::new();
            let dp = TapedParams::lift(&tape, disc);
            let real = tape.leaf(batch.x0.clone().into_dyn());
            let logits = segnet_forward(&disc_spec.segnet(), &dp, real)?;
            let loss = losses::adversarial_loss(logits, &batch.labels, &gamma)?;
            let lv = loss.scalar();
            if !lv.is_finite() {
                return Err(AldmError::Numerical(format!("non-finite warmup loss at iter {iter}")));
            }
            let grads = dp.gradients(&tape.backward(loss));
            self.disc_opt.as_mut().unwrap().step(disc, &grads)?;
            Ok(lv)
        } else {
            self.discriminator_step(&batch, iter)
        }
    }

    /// Discriminator loss on a held-out batch without updating anything.
    pub fn probe_discriminator_loss(&self, batch: &Batch, iter: usize) -> Result<f64> {
        let disc_spec = self
            .disc_spec
            .as_ref()
            .ok_or_else(|| AldmError::invalid("no discriminator in this mode"))?;
        let tag = if self.cfg.train.fresh_fake_sample { TAG_DISC } else { TAG_GEN };
        let mut rng = stream(self.cfg.train.seed, tag, iter);
        let (ts, eps) = self.draw_timesteps_and_noise(&mut rng, batch.x0.dim());
        let (x_t, sa, sn) = self.corrupt(&batch.x0, &eps, &ts);
        let y_onehot = onehot_labels(&batch.labels, self.dspec.num_classes);
        let eps_hat = denoise(
            &self.dspec,
            &self.gen,
            &x_t,
            &y_onehot,
            &batch.styles,
            &ts,
            self.sched.t_max(),
        )?;
        let mut x0_hat = x_t;
        for (bi, (&a, &n)) in sa.iter().zip(sn.iter()).enumerate() {
            let mut row = x0_hat.index_axis_mut(ndarray::Axis(0), bi);
            let e = eps_hat.index_axis(ndarray::Axis(0), bi);
            row.zip_mut_with(&e, |x, &ev| *x = (*x - n * ev) / a);
        }
        let gamma = losses::class_weights(&batch.labels, self.dspec.num_classes)?;
        let tape = Tape::no_grad();
        let dp = TapedParams::lift(&tape, self.disc.as_ref().unwrap());
        let real = tape.leaf(batch.x0.clone().into_dyn());
        let fake = tape.leaf(x0_hat.into_dyn());
        let logits_real = segnet_forward(&disc_spec.segnet(), &dp, real)?;
        let logits_fake = segnet_forward(&disc_spec.segnet(), &dp, fake)?;
        let loss = losses::discriminator_loss(logits_real, &batch.labels, logits_fake, &gamma)?;
        Ok(loss.scalar())
    }

    /// One main-loop iteration: generator update, then discriminator update
    /// in the modes that train one.
    pub fn train_iteration(&mut self, iter: usize) -> Result<(LossBreakdown, Option<f64>)> {
        let batch = self.sample_batch(TAG_DATA, iter)?;
        let breakdown = self.generator_step(&batch, iter)?;
        let l_dis = match self.cfg.train.mode {
            Mode::Adv | Mode::AdvUnroll => Some(self.discriminator_step(&batch, iter)?),
            Mode::Baseline | Mode::FrozenSegmenter => None,
        };
        Ok((breakdown, l_dis))
    }
}

#[derive(Debug)]
pub struct TrainOutcome {
    pub gen_path: PathBuf,
    pub disc_path: Option<PathBuf>,
    pub runlog_path: PathBuf,
    pub iters_run: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct TrainState {
    iter: usize,
    config_hash: String,
}

fn save_state(dir: &Path, state: &TrainState) -> Result<()> {
    Ok(std::fs::write(dir.join("state.json"), serde_json::to_string_pretty(state)?)?)
}

fn save_nets(trainer: &Trainer, dir: &Path, iter: usize) -> Result<()> {
    checkpoint::save(
        &dir.join("gen.ckpt"),
        &trainer.gen,
        &NetSpec::Denoiser(trainer.dspec.clone()),
        trainer.cfg.train.seed,
        iter as u64,
        Some(trainer.config_hash()),
    )?;
    if let (Some(disc), Some(ds)) = (&trainer.disc, &trainer.disc_spec) {
        checkpoint::save(
            &dir.join("disc.ckpt"),
            disc,
            &NetSpec::Discriminator(ds.clone()),
            trainer.cfg.train.seed,
            iter as u64,
            Some(trainer.config_hash()),
        )?;
    }
    Ok(())
}

/// Full training run with on-disk artifacts. Resumes from `out_dir` when a
/// state file with a matching config hash is present.
pub fn train(cfg: &TrainConfig, out_dir: &Path) -> Result<(Trainer, TrainOutcome)> {
    cfg.validate()?;
    std::fs::create_dir_all(out_dir)?;
    let dataset = Dataset::open(&cfg.data.dataset)?;
    let mut trainer = Trainer::new(cfg.clone(), dataset)?;
    std::fs::write(out_dir.join("config.toml"), cfg.to_toml_string())?;

    let state_path = out_dir.join("state.json");
    let mut start = 0usize;
    if state_path.exists() {
        let state: TrainState = serde_json::from_str(&std::fs::read_to_string(&state_path)?)?;
        if state.config_hash != trainer.config_hash() {
            return Err(AldmError::Config {
                field: "<resume>".into(),
                msg: format!(
                    "existing run in {} has config hash {}, current config hashes to {}",
                    out_dir.display(),
                    state.config_hash,
                    trainer.config_hash()
                ),
            });
        }
        let (gen, _) = checkpoint::load(&out_dir.join("gen.ckpt"))?;
        trainer.gen = gen;
        if trainer.disc.is_some() {
            let (disc, _) = checkpoint::load(&out_dir.join("disc.ckpt"))?;
            trainer.disc = Some(disc);
        }
        start = state.iter + 1;
    }
    let mut log = RunLog::at(&out_dir.join("runlog.ndjson"))?;

    let warmup =
        if trainer.cfg.train.mode == Mode::Baseline { 0 } else { trainer.cfg.train.warmup_iters };
    let total = trainer.cfg.train.total_iters;
    let hash = trainer.config_hash().to_string();
    let mut iters_run = 0usize;
    for iter in start..total {
        let t0 = std::time::Instant::now();
        let rec = if iter < warmup {
            match trainer.warmup_step(iter) {
                Ok(l) => RunRecord {
                    iter,
                    phase: Phase::Warmup,
                    breakdown: None,
                    l_dis: Some(l),
                    unix_ms: now_ms(),
                    wall_ms: t0.elapsed().as_secs_f64() * 1e3,
                    config_hash: hash.clone(),
                    snapshot: None,
                    note: None,
                },
                Err(e) => return abort(&mut log, iter, &hash, e),
            }
        } else {
            match trainer.train_iteration(iter) {
                Ok((breakdown, l_dis)) => RunRecord {
                    iter,
                    phase: Phase::Gen,
                    breakdown: Some(breakdown),
                    l_dis,
                    unix_ms: now_ms(),
                    wall_ms: t0.elapsed().as_secs_f64() * 1e3,
                    config_hash: hash.clone(),
                    snapshot: None,
                    note: None,
                },
                Err(e) => return abort(&mut log, iter, &hash, e),
            }
        };
        log.push(rec)?;
        iters_run += 1;
        let ee = trainer.cfg.train.eval_every;
        if ee > 0 && iter >= warmup && (iter - warmup + 1) % ee == 0 {
            let snap = format!("snapshot_{iter}.ckpt");
            checkpoint::save(
                &out_dir.join(&snap),
                &trainer.gen,
                &NetSpec::Denoiser(trainer.dspec.clone()),
                trainer.cfg.train.seed,
                iter as u64,
                Some(&hash),
            )?;
            log.push(RunRecord {
                iter,
                phase: Phase::Eval,
                breakdown: None,
                l_dis: None,
                unix_ms: now_ms(),
                wall_ms: 0.0,
                config_hash: hash.clone(),
                snapshot: Some(snap),
                note: None,
            })?;
        }
        save_nets(&trainer, out_dir, iter)?;
        save_state(out_dir, &TrainState { iter, config_hash: hash.clone() })?;
    }
    if start >= total {
        save_nets(&trainer, out_dir, total.saturating_sub(1))?;
    }
    let outcome = TrainOutcome {
        gen_path: out_dir.join("gen.ckpt"),
        disc_path: trainer.disc.as_ref().map(|_| out_dir.join("disc.ckpt")),
        runlog_path: out_dir.join("runlog.ndjson"),
        iters_run,
    };
    Ok((trainer, outcome))
}

fn abort(
    log: &mut RunLog,
    iter: usize,
    hash: &str,
    e: AldmError,
) -> Result<(Trainer, TrainOutcome)> {
    log.push(RunRecord {
        iter,
        phase: Phase::Abort,
        breakdown: None,
        l_dis: None,
        unix_ms: now_ms(),
        wall_ms: 0.0,
        config_hash: hash.to_string(),
        snapshot: None,
        note: Some(e.to_string()),
    })?;
    Err(e)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::{DataSection, ModelSection, TrainSection};
    use crate::nets::Conditioning;
    use crate::synthdata::generate_dataset;
    use crate::unroll::UnrollConfig;

    fn tiny_dataset(dir: &Path) -> Dataset {
        generate_dataset(6, 2, &[0, 1], 5, 16, 4, dir, false).unwrap();
        Dataset::open(dir).unwrap()
    }

    fn tiny_config(mode: Mode, dataset: &Path) -> TrainConfig {
        TrainConfig {
            train: TrainSection {
                mode,
                total_iters: 4,
                lambda_adv: 0.1,
                lr_generator: 1e-3,
                lr_discriminator: 1e-3,
                batch_size: 2,
                warmup_iters: 2,
                seed: 11,
                eval_every: 0,
                ema: false,
                fresh_fake_sample: true,
            },
            unroll: UnrollConfig { k: 2, unroll_every: 2, detach_between_steps: true },
            model: ModelSection {
                base_width: 8,
                depth: 2,
                conditioning: Conditioning::Concat,
                disc_base_width: 8,
                disc_depth: 2,
                t_max: 20,
                schedule: crate::schedule::ScheduleKind::Cosine,
                sample_steps: 4,
                ..ModelSection::default()
            },
            data: DataSection { dataset: dataset.to_path_buf(), eval_layouts: 2 },
        }
    }

    #[test]
    fn baseline_has_no_discriminator() {
        let dir = tempfile::tempdir().unwrap();
        let ds = tiny_dataset(&dir.path().join("ds"));
        let cfg = tiny_config(Mode::Baseline, &dir.path().join("ds"));
        let mut tr = Trainer::new(cfg, ds).unwrap();
        assert!(tr.disc.is_none());
        assert!(tr.disc_spec.is_none());
        let batch = tr.sample_batch(TAG_DATA, 0).unwrap();
        let bd = tr.generator_step(&batch, 0).unwrap();
        assert!(bd.l_adv.is_none());
        assert_eq!(bd.l_dm, bd.l_noise);
        assert!(tr.discriminator_step(&batch, 0).is_err());
    }

    #[test]
    fn generator_step_is_deterministic() {
        let dir = tempfile::tempdir().unwrap();
        let ds = tiny_dataset(&dir.path().join("ds"));
        let cfg = tiny_config(Mode::Adv, &dir.path().join("ds"));
        let mut a = Trainer::new(cfg.clone(), ds.clone()).unwrap();
        let mut b = Trainer::new(cfg, ds).unwrap();
        let batch = a.sample_batch(TAG_DATA, 0).unwrap();
        let ra = a.generator_step(&batch, 0).unwrap();
        let rb = b.generator_step(&batch, 0).unwrap();
        assert_eq!(ra, rb);
        for ((_, x), (_, y)) in a.gen.iter().zip(b.gen.iter()) {
            assert_eq!(x, y);
        }
    }

    #[test]
    fn steps_never_cross_mutate() {
        let dir = tempfile::tempdir().unwrap();
        let ds = tiny_dataset(&dir.path().join("ds"));
        let cfg = tiny_config(Mode::Adv, &dir.path().join("ds"));
        let mut tr = Trainer::new(cfg, ds).unwrap();
        let batch = tr.sample_batch(TAG_DATA, 0).unwrap();
        let disc_before = tr.disc.clone().unwrap();
        tr.generator_step(&batch, 0).unwrap();
        for ((_, a), (_, b)) in disc_before.iter().zip(tr.disc.as_ref().unwrap().iter()) {
            assert_eq!(a, b);
        }
        let gen_before = tr.gen.clone();
        tr.discriminator_step(&batch, 0).unwrap();
        for ((_, a), (_, b)) in gen_before.iter().zip(tr.gen.iter()) {
            assert_eq!(a, b);
        }
        let changed = disc_before
            .iter()
            .zip(tr.disc.as_ref().unwrap().iter())
            .any(|((_, a), (_, b))| a != b);
        assert!(changed);
    }

    #[test]
    fn lambda_zero_matches_baseline_trajectory() {
        let dir = tempfile::tempdir().unwrap();
        let ds = tiny_dataset(&dir.path().join("ds"));
        let mut cfg_adv = tiny_config(Mode::Adv, &dir.path().join("ds"));
        cfg_adv.train.lambda_adv = 0.0;
        cfg_adv.train.warmup_iters = 0;
        let mut cfg_base = cfg_adv.clone();
        cfg_base.train.mode = Mode::Baseline;
        let mut adv = Trainer::new(cfg_adv, ds.clone()).unwrap();
        let mut base = Trainer::new(cfg_base, ds).unwrap();
        for iter in 0..3 {
            adv.train_iteration(iter).unwrap();
            base.train_iteration(iter).unwrap();
        }
        for ((na, a), (nb, b)) in adv.gen.iter().zip(base.gen.iter()) {
            assert_eq!(na, nb);
            assert_eq!(a, b, "parameter `{na}` diverged");
        }
    }

    #[test]
    fn unroll_fires_on_schedule() {
        let dir = tempfile::tempdir().unwrap();
        let ds = tiny_dataset(&dir.path().join("ds"));
        let cfg = tiny_config(Mode::AdvUnroll, &dir.path().join("ds"));
        let tr = Trainer::new(cfg, ds).unwrap();
        assert!(tr.unroll_fires(0));
        assert!(!tr.unroll_fires(1));
        assert!(tr.unroll_fires(2));
    }

    #[test]
    fn unrolled_generator_step_runs() {
        let dir = tempfile::tempdir().unwrap();
        let ds = tiny_dataset(&dir.path().join("ds"));
        let cfg = tiny_config(Mode::AdvUnroll, &dir.path().join("ds"));
        let mut tr = Trainer::new(cfg, ds).unwrap();
        let batch = tr.sample_batch(TAG_DATA, 2).unwrap();
        let bd = tr.generator_step(&batch, 2).unwrap();
        assert!(bd.l_adv.is_some());
        assert!(bd.l_dm.is_finite());
    }

    #[test]
    fn alternation_order_is_gen_then_disc() {
        let dir = tempfile::tempdir().unwrap();
        let ds = tiny_dataset(&dir.path().join("ds"));
        let cfg = tiny_config(Mode::Adv, &dir.path().join("ds"));
        let mut tr = Trainer::new(cfg, ds).unwrap();
        tr.train_iteration(0).unwrap();
        assert_eq!(tr.call_trace, vec![Phase::Gen, Phase::Disc]);
    }

    #[test]
    fn frozen_segmenter_leaves_discriminator_untouched() {
        let dir = tempfile::tempdir().unwrap();
        let ds = tiny_dataset(&dir.path().join("ds"));
        let cfg = tiny_config(Mode::FrozenSegmenter, &dir.path().join("ds"));
        let mut tr = Trainer::new(cfg, ds).unwrap();
        tr.warmup_step(0).unwrap();
        let frozen = tr.disc.clone().unwrap();
        for iter in 2..4 {
            tr.train_iteration(iter).unwrap();
        }
        for ((_, a), (_, b)) in frozen.iter().zip(tr.disc.as_ref().unwrap().iter()) {
            assert_eq!(a, b);
        }
    }

    #[test]
    fn train_writes_artifacts_and_resumes() {
        let dir = tempfile::tempdir().unwrap();
        tiny_dataset(&dir.path().join("ds"));
        let cfg = tiny_config(Mode::Adv, &dir.path().join("ds"));
        let out = dir.path().join("run");
        let (_, outcome) = train(&cfg, &out).unwrap();
        assert_eq!(outcome.iters_run, 4);
        assert!(outcome.gen_path.exists());
        assert!(outcome.disc_path.as_ref().unwrap().exists());
        let log = RunLog::at(&outcome.runlog_path).unwrap();
        assert_eq!(log.records.len(), 4);
        let iters: Vec<usize> = log.records.iter().map(|r| r.iter).collect();
        assert!(iters.windows(2).all(|w| w[0] < w[1]));
        assert!(log.records.iter().all(|r| r.config_hash == cfg.config_hash()));

        let mut cfg2 = cfg.clone();
        cfg2.train.total_iters = 6;
        let err = match train(&cfg2, &out) {
            Err(e) => e,
            Ok(_) => panic!("expected config hash mismatch"),
        };
        assert!(err.to_string().contains("config hash"));

        let (_, outcome2) = train(&cfg, &out).unwrap();
        assert_eq!(outcome2.iters_run, 0);
        let log2 = RunLog::at(&outcome.runlog_path).unwrap();
        assert_eq!(log2.records.len(), 4);
    }

    #[test]
    fn warmup_reduces_heldout_discriminator_loss() {
        let dir = tempfile::tempdir().unwrap();
        let ds = tiny_dataset(&dir.path().join("ds"));
        let mut cfg = tiny_config(Mode::Adv, &dir.path().join("ds"));
        cfg.train.lr_discriminator = 3e-3;
        let mut tr = Trainer::new(cfg, ds).unwrap();
        let held = tr.sample_batch(0xbeef, 999).unwrap();
        let before = tr.probe_discriminator_loss(&held, 999).unwrap();
        for iter in 0..30 {
            tr.warmup_step(iter).unwrap();
        }
        let after = tr.probe_discriminator_loss(&held, 999).unwrap();
        assert!(after < before, "warmup did not reduce held-out loss: {before} -> {after}");
    }
}
