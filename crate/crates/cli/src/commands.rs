use std::fs::{self, File};
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use compact_core::analysis::{
    mi_trace_rows, mi_trajectory_export, pca_shift_sweep, svg::{LineChart, Series}, weight_trajectory_summary, ExportPaths,
};
use compact_core::corpus::{generate_dataset, load_jsonl, reversal_probe_corpus, save_jsonl, task_probe_corpus, Instance, Vocabulary};
use compact_core::model::{load_checkpoint_for, StudentModel};
use compact_core::scoring::{score_instance, PreparedInstance};
use compact_core::trainer::{evaluate, train, verify_gradient_equivalence, MetricLedger};
use log::info;
use serde_json::json;

use crate::config::{ProbeKind, RunConfig};

pub const GRAD_CHECK_TOL: f64 = 1e-10;

/// Optional paths shared across subcommands.
#[derive(Debug, Clone, Default, serde::Serialize)]
pub struct Inputs {
    pub checkpoint: Option<PathBuf>,
    pub baseline: Option<PathBuf>,
    pub ledger: Option<PathBuf>,
    pub instance: Option<String>,
}

pub struct Ctx<'a> {
    pub config: &'a RunConfig,
    pub inputs: &'a Inputs,
    pub out: &'a Path,
    pub vocab: Vocabulary,
    pub outputs: Vec<PathBuf>,
}

impl Ctx<'_> {
    fn record(&mut self, p: PathBuf) {
        self.outputs.push(p);
    }

    fn record_export(&mut self, e: ExportPaths) {
        self.record(e.csv);
        if let Some(svg) = e.svg {
            self.record(svg);
        }
    }

    fn split(&self, split: &str) -> Result<Vec<Instance>> {
        let d = &self.config.data;
        let (path, n) = match split {
            "train" => (&d.train_path, d.train_n),
            _ => (&d.test_path, d.test_n),
        };
        match path {
            Some(p) => Ok(load_jsonl(p, &self.vocab).with_context(|| format!("loading {}", p.display()))?),
            None => Ok(generate_dataset(n, &d.teachers, &d.task, self.config.data_seed(split), &self.vocab)?),
        }
    }

    fn prepared(&self, insts: &[Instance]) -> Result<Vec<PreparedInstance>> {
        Ok(insts.iter().map(|i| PreparedInstance::new(i, &self.vocab)).collect::<Result<_, _>>()?)
    }

    fn load_model(&self, path: Option<&Path>) -> Result<StudentModel> {
        match path {
            Some(p) => {
                let bytes = fs::read(p).with_context(|| format!("reading {}", p.display()))?;
                Ok(load_checkpoint_for(&bytes, &self.config.model).with_context(|| format!("checkpoint {}", p.display()))?)
            }
            None => Ok(StudentModel::new(self.config.model.clone())?),
        }
    }

    fn write_json(&mut self, name: &str, value: &serde_json::Value) -> Result<()> {
        let p = self.out.join(name);
        fs::write(&p, serde_json::to_string_pretty(value)? + "\n")?;
        self.record(p);
        Ok(())
    }
}

pub fn gen_data(ctx: &mut Ctx) -> Result<()> {
    for split in ["train", "test"] {
        let insts = ctx.split(split)?;
        let p = ctx.out.join(format!("{split}.jsonl"));
        save_jsonl(&insts, &p)?;
        info!("wrote {} instances to {}", insts.len(), p.display());
        ctx.record(p);
    }
    Ok(())
}

pub fn train_cmd(ctx: &mut Ctx) -> Result<()> {
    let insts = ctx.split("train")?;
    let data = ctx.prepared(&insts)?;
    let model = ctx.load_model(ctx.inputs.checkpoint.as_deref())?;
    let ckpt_dir = ctx.out.join("checkpoints");
    fs::create_dir_all(&ckpt_dir)?;
    let c = ctx.config;
    let outcome = train(model, &data, &c.trainer, &c.weighting, &c.loss, Some(&ckpt_dir))?;
    for p in &outcome.checkpoints {
        ctx.record(p.clone());
    }
    let ledger_path = ctx.out.join("ledger.csv");
    outcome.ledger.write_csv(BufWriter::new(File::create(&ledger_path)?))?;
    ctx.record(ledger_path);
    if !outcome.ledger.is_empty() {
        let export = weight_trajectory_summary(&outcome.ledger)?.export(&ctx.out.join("weights"))?;
        ctx.record_export(export);
    }
    let summary = json!({
        "epoch_losses": outcome.epoch_losses,
        "final_checkpoint": outcome.checkpoints.last(),
        "steps": outcome.ledger.rows().last().map_or(0, |r| r.step),
    });
    ctx.write_json("train_summary.json", &summary)?;
    println!("trained {} epochs; final checkpoint {}", c.trainer.epochs, outcome.checkpoints.last().map_or("-".into(), |p| p.display().to_string()));
    Ok(())
}

pub fn eval_cmd(ctx: &mut Ctx) -> Result<()> {
    let model = ctx.load_model(ctx.inputs.checkpoint.as_deref())?;
    let test = ctx.split("test")?;
    let acc = evaluate(&model, &test, &ctx.vocab)?;
    println!("accuracy {acc:.4} on {} instances", test.len());
    ctx.write_json("eval.json", &json!({ "accuracy": acc, "n": test.len() }))
}

pub fn grad_check(ctx: &mut Ctx) -> Result<()> {
    let model = ctx.load_model(ctx.inputs.checkpoint.as_deref())?;
    let insts = ctx.split("train")?;
    let n = ctx.config.analysis.grad_check_instances.min(insts.len());
    let data = ctx.prepared(&insts[..n])?;
    let mut worst: f64 = 0.0;
    for p in &data {
        let alpha = score_instance(&model, p, &ctx.config.weighting)?.alpha;
        worst = worst.max(verify_gradient_equivalence(&model, p, &alpha, &ctx.config.loss)?);
    }
    println!("max relative difference {worst:.3e} over {n} instances");
    ctx.write_json("grad_check.json", &json!({ "max_relative_difference": worst, "instances": n, "tolerance": GRAD_CHECK_TOL }))?;
    if !(worst < GRAD_CHECK_TOL) {
        bail!("gradient equivalence gap {worst:e} exceeds {GRAD_CHECK_TOL:e}");
    }
    Ok(())
}

pub fn pca_shift_cmd(ctx: &mut Ctx) -> Result<()> {
    let Some(after_path) = ctx.inputs.checkpoint.clone() else { bail!("pca-shift needs --checkpoint") };
    let after = ctx.load_model(Some(&after_path))?;
    let before = ctx.load_model(ctx.inputs.baseline.as_deref())?;
    let a = &ctx.config.analysis;
    let probe = match a.probe {
        ProbeKind::Ood => reversal_probe_corpus(a.probe_n, ctx.config.data_seed("probe"), &ctx.vocab)?,
        ProbeKind::Id => {
            let d = &ctx.config.data;
            let insts = generate_dataset(a.probe_n, &d.teachers, &d.task, ctx.config.data_seed("probe"), &ctx.vocab)?;
            task_probe_corpus(&insts, &ctx.vocab)?
        }
    };
    let reports = pca_shift_sweep(&before, &after, &probe, a.space)?;
    let csv_path = ctx.out.join("pca_shift.csv");
    let mut w = csv::Writer::from_path(&csv_path)?;
    w.write_record(["layer", "shift", "centroid_before", "centroid_after"])?;
    let fmt = |v: &[f64]| v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(" ");
    for r in &reports {
        w.write_record([r.layer.to_string(), r.shift.to_string(), fmt(&r.centroid_before), fmt(&r.centroid_after)])?;
    }
    w.flush()?;
    ctx.record(csv_path);
    if a.charts {
        let chart = LineChart {
            title: "PCA shift per layer".into(),
            x_label: "layer".into(),
            y_label: "shift".into(),
            series: vec![Series { name: "shift".into(), points: reports.iter().map(|r| (r.layer as f64, r.shift)).collect(), markers: Vec::new() }],
        };
        let p = ctx.out.join("pca_shift.svg");
        fs::write(&p, chart.render())?;
        ctx.record(p);
    }
    let mean = reports.iter().map(|r| r.shift).sum::<f64>() / reports.len() as f64;
    println!("mean layer-wise shift {mean:.6}");
    Ok(())
}

pub fn mi_trace(ctx: &mut Ctx) -> Result<()> {
    let model = ctx.load_model(ctx.inputs.checkpoint.as_deref())?;
    let insts = ctx.split("train")?;
    let data = ctx.prepared(&insts)?;
    let id = ctx.inputs.instance.clone().unwrap_or_else(|| data[0].instance_id.clone());
    let rows = mi_trace_rows(&model, &data, &id, &ctx.vocab, &ctx.config.weighting, 0)?;
    let export = mi_trajectory_export(&rows, &ctx.out.join("mi_trace"), ctx.config.analysis.charts)?;
    ctx.record_export(export);
    println!("exported {} trace rows for {id}", rows.len());
    Ok(())
}

pub fn weights_plot(ctx: &mut Ctx) -> Result<()> {
    let Some(path) = ctx.inputs.ledger.clone() else { bail!("weights-plot needs --ledger") };
    let ledger = MetricLedger::read_csv(File::open(&path).with_context(|| format!("opening {}", path.display()))?)?;
    let table = weight_trajectory_summary(&ledger)?;
    let export = table.export(&ctx.out.join("weights"))?;
    ctx.record_export(export);
    println!("{} epochs x {} teachers", table.epochs.len(), table.teachers.len());
    Ok(())
}
