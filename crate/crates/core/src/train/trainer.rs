use std::io::Write;
use std::path::Path;
use std::time::Instant;

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::adam::{Adam, StepOutcome};
use super::config::RunConfig;
use super::head::{surrogate_loss, SurrogateHead};
use crate::autodiff::{load_checkpoint, save_checkpoint, Graph, ParamStore};
use crate::error::{Error, Result};
use crate::frontend::{init_weights, Frontend, FrontendInput, Variant};
use crate::synth::{make_dataset, SceneItem};
use crate::tensor::Tensor;

/// Dropout streams live on their own ChaCha stream so they never overlap the
/// initialization draws.
const DROPOUT_STREAM: u64 = 1;

/// One utterance: front-end input and the clean stacked features it should
/// reconstruct.
#[derive(Debug, Clone, PartialEq)]
pub struct Example {
    pub input: FrontendInput,
    /// `[S, F*B*2]`
    pub target: Tensor,
}

impl Example {
    pub fn from_scene(item: &SceneItem, cfg: &RunConfig) -> Result<Self> {
        let input = FrontendInput::from_waveform(&item.noisy, &cfg.features)?;
        let clean = cfg.features.extract(&item.clean)?;
        Ok(Self {
            input,
            target: clean[0].data.clone(),
        })
    }
}

/// Renders the configured dataset and extracts features.
pub fn build_examples(cfg: &RunConfig) -> Result<Vec<Example>> {
    let geometry = cfg.geometry.picked()?;
    make_dataset(&cfg.scene, &geometry, cfg.dataset_size)?
        .iter()
        .map(|item| Example::from_scene(item, cfg))
        .collect()
}

/// A front-end together with its surrogate head.
#[derive(Debug, Clone)]
pub struct Model {
    pub frontend: Frontend,
    pub head: SurrogateHead,
}

impl Model {
    pub fn new(cfg: &RunConfig) -> Result<Self> {
        let frontend = cfg.frontend()?;
        let head = SurrogateHead::for_frontend(&frontend);
        Ok(Self { frontend, head })
    }

    pub fn init(&self, cfg: &RunConfig) -> Result<ParamStore> {
        let geometry = cfg.geometry.picked()?;
        let mut params = init_weights(&self.frontend, cfg.seed, Some(&geometry))?;
        self.head.init_into(&mut params, cfg.seed);
        params.round_to(cfg.precision);
        Ok(params)
    }

    /// Checks that `params` holds exactly this model's tensors.
    pub fn check_params(&self, params: &ParamStore) -> Result<()> {
        let specs: Vec<_> = self.frontend.param_specs().into_iter().chain(self.head.param_specs()).collect();
        for s in &specs {
            let t = params.get(&s.name).ok_or_else(|| Error::MissingParam(s.name.clone()))?;
            if t.shape() != s.shape.as_slice() {
                return Err(Error::Checkpoint(format!(
                    "{} has shape {:?}, model expects {:?}",
                    s.name,
                    t.shape(),
                    s.shape
                )));
            }
        }
        if params.len() != specs.len() {
            let extra: Vec<&str> = params.names().filter(|n| !specs.iter().any(|s| s.name == *n)).collect();
            return Err(Error::Checkpoint(format!("unexpected tensors {extra:?}")));
        }
        Ok(())
    }

    /// Surrogate loss of `examples` (mean over utterances). Passing `rng`
    /// enables dropout.
    pub fn loss(
        &self,
        g: &mut Graph,
        params: &ParamStore,
        examples: &[&Example],
        mut rng: Option<&mut (dyn RngCore + '_)>,
    ) -> Result<crate::autodiff::Var> {
        let mut losses = Vec::with_capacity(examples.len());
        for ex in examples {
            let out = self.frontend.forward(g, params, &ex.input, rng.as_deref_mut())?;
            let decoded = self.head.forward(g, params, out.output)?;
            losses.push(surrogate_loss(g, decoded, &ex.target)?);
        }
        let total = g.add_n(&losses)?;
        g.scale(total, 1.0 / examples.len() as f64)
    }

    /// Evaluation-mode loss over `examples`, one utterance at a time.
    pub fn evaluate(&self, params: &ParamStore, examples: &[Example], cfg: &RunConfig) -> Result<f64> {
        let mut acc = 0.0;
        for ex in examples {
            let mut g = Graph::new(cfg.precision);
            let l = self.loss(&mut g, params, &[ex], None)?;
            acc += g.value(l).data()[0];
        }
        Ok(acc / examples.len() as f64)
    }

    /// Decoded output of one utterance in evaluation mode.
    pub fn decode(&self, params: &ParamStore, input: &FrontendInput, cfg: &RunConfig) -> Result<Tensor> {
        let mut g = Graph::new(cfg.precision);
        let out = self.frontend.forward(&mut g, params, input, None)?;
        let y = self.head.forward(&mut g, params, out.output)?;
        Ok(g.value(y).clone())
    }
}

#[derive(Debug, Clone)]
pub struct TrainReport {
    pub variant: Variant,
    /// Evaluation-mode loss of the initial weights.
    pub initial_loss: f64,
    /// Training loss of every step, before its update.
    pub step_losses: Vec<f64>,
    /// Evaluation-mode loss of the final weights.
    pub final_loss: f64,
    pub skipped_steps: usize,
    pub params: ParamStore,
    /// Log lines as written, without trailing newlines.
    pub log: Vec<String>,
}

impl TrainReport {
    /// Log lines with the wall-clock column removed.
    pub fn log_without_time(&self) -> Vec<String> {
        strip_wall_time(&self.log)
    }
}

pub fn strip_wall_time(lines: &[String]) -> Vec<String> {
    lines
        .iter()
        .map(|l| l.rsplit_once('\t').map_or(l.as_str(), |(head, _)| head).to_string())
        .collect()
}

/// Trains on pre-built examples. Writes one `step\tloss\twall_ms` line per
/// step to `log`, then `eval\t<final loss>\t<wall_ms>`. With
/// `cfg.checkpoint` set the final weights are saved there (for zero steps,
/// the initial ones).
pub fn train_with(cfg: &RunConfig, examples: &[Example], mut log: Option<&mut dyn Write>) -> Result<TrainReport> {
    cfg.validate()?;
    if examples.is_empty() {
        return Err(Error::config("dataset_size", "no examples"));
    }
    let model = Model::new(cfg)?;
    let mut params = model.init(cfg)?;
    let initial_loss = model.evaluate(&params, examples, cfg)?;
    let mut opt = Adam::new(cfg.optimizer.clone());
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(DROPOUT_STREAM);
    let start = Instant::now();
    let mut lines = Vec::with_capacity(cfg.steps + 1);
    let mut emit = |line: String, log: &mut Option<&mut dyn Write>| -> Result<()> {
        if let Some(w) = log.as_deref_mut() {
            writeln!(w, "{line}")?;
        }
        lines.push(line);
        Ok(())
    };
    let mut step_losses = Vec::with_capacity(cfg.steps);
    let mut skipped = 0;
    for step in 0..cfg.steps {
        let batch: Vec<&Example> = (0..cfg.batch_size)
            .map(|j| &examples[(step * cfg.batch_size + j) % examples.len()])
            .collect();
        let mut g = Graph::new(cfg.precision);
        let loss = model.loss(&mut g, &params, &batch, Some(&mut rng as &mut dyn RngCore))?;
        let value = g.value(loss).data()[0];
        let grads = g.backward(loss)?;
        if opt.step(&mut params, grads.params()) == StepOutcome::Skipped {
            skipped += 1;
        }
        params.round_to(cfg.precision);
        step_losses.push(value);
        emit(format!("{step}\t{value:.9e}\t{}", start.elapsed().as_millis()), &mut log)?;
    }
    let final_loss = model.evaluate(&params, examples, cfg)?;
    emit(format!("eval\t{final_loss:.9e}\t{}", start.elapsed().as_millis()), &mut log)?;
    if let Some(path) = &cfg.checkpoint {
        save_checkpoint(path, &params)?;
    }
    Ok(TrainReport {
        variant: cfg.variant,
        initial_loss,
        step_losses,
        final_loss,
        skipped_steps: skipped,
        params,
        log: lines,
    })
}

/// Builds the dataset, trains and writes the log to `cfg.log` if set.
pub fn train(cfg: &RunConfig) -> Result<TrainReport> {
    cfg.validate()?;
    let examples = build_examples(cfg)?;
    match &cfg.log {
        Some(path) => {
            let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
            let r = train_with(cfg, &examples, Some(&mut f))?;
            f.flush()?;
            Ok(r)
        }
        None => train_with(cfg, &examples, None),
    }
}

/// Loads a checkpoint for the configured variant and evaluates it on the
/// configured dataset.
pub fn evaluate_checkpoint(cfg: &RunConfig, path: &Path, examples: &[Example]) -> Result<f64> {
    let model = Model::new(cfg)?;
    let params = load_checkpoint(path)?;
    model.check_params(&params)?;
    model.evaluate(&params, examples, cfg)
}

/// One row of a comparison table.
#[derive(Debug, Clone, PartialEq)]
pub struct TableRow {
    pub variant: Variant,
    pub initial_loss: f64,
    pub final_loss: f64,
    /// Percent change of the final loss against the reference row; negative
    /// is better.
    pub relative: Option<f64>,
}

pub fn relative_change(loss: f64, reference: f64) -> f64 {
    100.0 * (loss - reference) / reference
}

/// Rows relative to `reference` (when present among the reports).
pub fn relative_table(reports: &[TrainReport], reference: Variant) -> Vec<TableRow> {
    let base = reports.iter().find(|r| r.variant == reference).map(|r| r.final_loss);
    reports
        .iter()
        .map(|r| TableRow {
            variant: r.variant,
            initial_loss: r.initial_loss,
            final_loss: r.final_loss,
            relative: base.map(|b| relative_change(r.final_loss, b)),
        })
        .collect()
}

pub fn format_table(rows: &[TableRow], reference: Variant) -> String {
    let mut s = format!(
        "{:<28} {:>14} {:>14} {:>12}\n",
        "variant",
        "initial loss",
        "final loss",
        format!("rel. {}", reference.name())
    );
    for r in rows {
        let rel = r.relative.map_or("n/a".to_string(), |v| format!("{v:+.1}%"));
        s.push_str(&format!(
            "{:<28} {:>14.6e} {:>14.6e} {:>12}\n",
            r.variant.label(),
            r.initial_loss,
            r.final_loss,
            rel
        ));
    }
    s.push_str("(surrogate reconstruction loss; negative relative values are improvements)\n");
    s
}

/// Trains each variant under the same budget, data and seed.
pub fn train_variants(cfg: &RunConfig, variants: &[Variant], examples: &[Example]) -> Result<Vec<TrainReport>> {
    variants
        .iter()
        .map(|&v| {
            let mut c = cfg.with_variant(v);
            c.checkpoint = cfg.checkpoint.as_ref().map(|p| variant_path(p, v));
            log::info!("training {}", v.name());
            train_with(&c, examples, None)
        })
        .collect()
}

/// `run.ckpt` becomes `run.<variant>.ckpt`.
pub fn variant_path(base: &Path, v: Variant) -> std::path::PathBuf {
    let stem = base.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    let name = match base.extension() {
        Some(ext) => format!("{stem}.{}.{}", v.name(), ext.to_string_lossy()),
        None => format!("{stem}.{}", v.name()),
    };
    base.with_file_name(name)
}

/// The full conv-attention model and its four ablations, relative to the full
/// model.
pub fn ablate(cfg: &RunConfig) -> Result<(Vec<TrainReport>, String)> {
    let examples = build_examples(cfg)?;
    let reports = train_variants(cfg, &Variant::ABLATIONS, &examples)?;
    let table = format_table(&relative_table(&reports, Variant::Conv2d), Variant::Conv2d);
    Ok((reports, table))
}

/// Writes every rendered scene as `noisy_<i>.wav` and `clean_<i>.wav`.
pub fn make_data(cfg: &RunConfig, dir: &Path) -> Result<Vec<SceneItem>> {
    std::fs::create_dir_all(dir)?;
    let items = make_dataset(&cfg.scene, &cfg.geometry.picked()?, cfg.dataset_size)?;
    for (i, item) in items.iter().enumerate() {
        item.noisy.write_wav(dir.join(format!("noisy_{i:03}.wav")))?;
        item.clean.write_wav(dir.join(format!("clean_{i:03}.wav")))?;
    }
    Ok(items)
}

/// Human-readable listing of a checkpoint.
pub fn inspect_checkpoint(path: &Path) -> Result<String> {
    let params = load_checkpoint(path)?;
    let mut s = String::new();
    for (name, t) in params.iter() {
        s.push_str(&format!("{name:<24} {:<18} {}\n", format!("{:?}", t.shape()), t.len()));
    }
    s.push_str(&format!("{} tensors, {} parameters\n", params.len(), params.param_count()));
    Ok(s)
}
