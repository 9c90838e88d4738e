use std::fmt::Write as _;
use std::path::Path;

use hybridst::checkpoint::{load_checkpoint, store_checkpoint};
use hybridst::diffnum::Tensor;
use hybridst::ensemble::{apply_stage2, train_stage2, EnsembleModel};
use hybridst::evalkit::{compare_report, denormalize, run_baseline, targets_kmh, BaselineKind, NamedPredictions};
use hybridst::gradsuite::run_gradient_suite;
use hybridst::graph::{load_distance_csv, load_graph, store_graph, SensorGraph};
use hybridst::hybrid::{predict_normalized, train_stage1, HybridModel};
use hybridst::panel::{load_exog_csv, load_panel, ExogTable, PanelFormat, SeriesPanel};
use hybridst::pipeline::{build_graph, preprocess as run_preprocess, RunConfig};
use hybridst::preprocess::{load_windows, store_windows, Split, WindowSet};
use hybridst::synthgen::{generate_corpus, write_corpus, SynthConfig};
use hybridst::{Error, Result};
use serde_json::{json, Value};

use crate::{
    EnsembleArgs, EvaluateArgs, FormatArg, GradcheckArgs, GraphArgs, PredictArgs, PreprocessArgs, SynthArgs, TrainArgs,
};

/// Missing inputs are usage mistakes rather than I/O failures.
fn require(path: &Path, what: &str) -> Result<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(Error::Validation(format!("{what} file {} not found", path.display())))
    }
}

fn write_json(path: &Path, value: &impl serde::Serialize) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).expect("value serializes");
    text.push('\n');
    write_text(path, &text)
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn config_value(cfg: &RunConfig) -> Value {
    serde_json::to_value(cfg).expect("config serializes")
}

fn load_config(path: &Path) -> Result<RunConfig> {
    require(path, "config")?;
    RunConfig::load(path)
}

fn read_panel(path: &Path, format: Option<FormatArg>) -> Result<SeriesPanel> {
    require(path, "panel")?;
    let format = match format {
        Some(FormatArg::Csv) => PanelFormat::Csv,
        Some(FormatArg::Bin) => PanelFormat::Bin,
        None if path.extension().is_some_and(|e| e == "bin") => PanelFormat::Bin,
        None => PanelFormat::Csv,
    };
    load_panel(path, format)
}

fn read_windows(path: &Path) -> Result<WindowSet> {
    require(path, "windows")?;
    load_windows(path)
}

fn read_graph(path: &Path, ws: &WindowSet) -> Result<SensorGraph> {
    require(path, "graph")?;
    let g = load_graph(path)?;
    if g.node_ids() != ws.sensor_ids.as_slice() {
        return Err(Error::Incompatible(format!(
            "graph {} covers different sensors than the windows",
            path.display()
        )));
    }
    Ok(g)
}

fn read_checkpoint(path: &Path, ws: &WindowSet) -> Result<(HybridModel, Option<EnsembleModel>)> {
    require(path, "checkpoint")?;
    let ck = load_checkpoint(path)?;
    ck.model.dims.check(ws)?;
    if ck.model.sensor_ids != ws.sensor_ids {
        return Err(Error::Incompatible(format!(
            "checkpoint {} was trained on different sensors",
            path.display()
        )));
    }
    if ck.model.norm.as_ref() != Some(ws.norm()?) {
        return Err(Error::Incompatible(format!(
            "checkpoint {} was trained with different normalization statistics",
            path.display()
        )));
    }
    Ok((ck.model, ck.ensemble))
}

fn read_exog(path: Option<&Path>) -> Result<Option<ExogTable>> {
    path.map(|p| {
        require(p, "exogenous")?;
        load_exog_csv(p)
    })
    .transpose()
}

/// Exogenous table for applying a fitted ensemble, which needs the same columns.
fn exog_for(ens: Option<&EnsembleModel>, path: Option<&Path>) -> Result<Option<ExogTable>> {
    let table = read_exog(path)?;
    if let Some(e) = ens {
        let have = table.as_ref().map(|t| t.names().to_vec()).unwrap_or_default();
        if have != e.schema.exog {
            return Err(Error::Validation(format!(
                "the ensemble was fitted with exogenous columns {:?}, got {have:?} (see --exog)",
                e.schema.exog
            )));
        }
    }
    Ok(table)
}

/// Deep forecasts in km/h, `[k, N, H]`.
fn deep_kmh(model: &HybridModel, ws: &WindowSet, a_hat: &Tensor, indices: &[usize]) -> Result<Vec<f64>> {
    let z = predict_normalized(model, ws, a_hat, indices)?;
    denormalize(ws.norm()?, &z, ws.nodes, ws.horizon)
}

fn split_name(s: Split) -> &'static str {
    match s {
        Split::Train => "train",
        Split::Val => "val",
        Split::Test => "test",
    }
}

pub fn synth(a: SynthArgs) -> Result<()> {
    let mut cfg = match &a.config {
        Some(p) => {
            require(p, "synth config")?;
            let text = std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
            serde_json::from_str::<SynthConfig>(&text).map_err(|e| Error::Schema(format!("synth config: {e}")))?
        }
        None => SynthConfig::default(),
    };
    if let Some(seed) = a.seed {
        cfg.seed = seed;
    }
    let corpus = generate_corpus(&cfg)?;
    write_corpus(&corpus, &a.out)?;
    log::info!(
        "wrote {} sensors × {} steps to {}",
        corpus.panel.n_sensors(),
        corpus.panel.len(),
        a.out.display()
    );
    Ok(())
}

pub fn preprocess(a: PreprocessArgs) -> Result<()> {
    let cfg = load_config(&a.config)?;
    let panel = read_panel(&a.panel, a.format)?;
    require(&a.graph, "graph")?;
    let graph = load_graph(&a.graph)?;
    let (mut ws, stats) = run_preprocess(&panel, &graph, &cfg.preprocess)?;
    ws.provenance = cfg.canonical_json();
    store_windows(&ws, &a.out)?;
    log::info!(
        "{} samples; {} missing and {} outlier cells of {}",
        ws.samples,
        stats.missing,
        stats.outliers,
        stats.cells
    );
    if let Some(p) = &a.stats {
        write_json(p, &json!({ "config": config_value(&cfg), "stats": stats }))?;
    }
    Ok(())
}

pub fn graph(a: GraphArgs) -> Result<()> {
    let cfg = load_config(&a.config)?;
    let panel = read_panel(&a.panel, a.format)?;
    let distances = match &a.distances {
        Some(p) => {
            require(p, "distance")?;
            Some(load_distance_csv(p, panel.sensor_ids())?)
        }
        None => None,
    };
    let g = build_graph(&cfg.graph, &panel, distances.as_ref(), &cfg.preprocess.windows)?;
    store_graph(&g, &a.out)
}

pub fn train(a: TrainArgs) -> Result<()> {
    let mut cfg = load_config(&a.config)?;
    if let Some(v) = a.variant {
        cfg.model.variant = v.into();
    }
    let ws = read_windows(&a.windows)?;
    let g = read_graph(&a.graph, &ws)?;
    let (mut model, report) = train_stage1(&ws, g.normalized(), &cfg.model, &cfg.train, cfg.seed)?;
    model.provenance = cfg.canonical_json();
    store_checkpoint(&a.out, &model, None)?;
    let best = report.best();
    log::info!(
        "{}: best epoch {} of {}, val MAE {:.4}, {:.1}s",
        report.model,
        report.best_epoch,
        report.epochs.len(),
        best.val_mae,
        report.wall_clock_secs
    );
    if let Some(p) = &a.report {
        write_json(p, &json!({ "config": config_value(&cfg), "training": report }))?;
    }
    Ok(())
}

pub fn train_ensemble(a: EnsembleArgs) -> Result<()> {
    let mut cfg = load_config(&a.config)?;
    let ws = read_windows(&a.windows)?;
    let g = read_graph(&a.graph, &ws)?;
    let (mut model, _) = read_checkpoint(&a.checkpoint, &ws)?;
    let exog = read_exog(a.exog.as_deref())?;
    cfg.model = model.config;
    let val = ws.indices(Split::Val);
    let y_dl = deep_kmh(&model, &ws, g.normalized(), &val)?;
    let (ens, report) = train_stage2(&ws, &y_dl, exog.as_ref(), &cfg.ensemble, cfg.seed)?;
    log::info!(
        "α = {}; selection MAE {:.4} → {:.4}",
        report.alpha,
        report.select_mae_dl,
        report.select_mae_final
    );
    model.provenance = cfg.canonical_json();
    store_checkpoint(&a.out, &model, Some(&ens))?;
    if let Some(p) = &a.report {
        write_json(p, &json!({ "config": config_value(&cfg), "stage2": report }))?;
    }
    Ok(())
}

pub fn predict(a: PredictArgs) -> Result<()> {
    let ws = read_windows(&a.windows)?;
    let g = read_graph(&a.graph, &ws)?;
    let (model, ens) = read_checkpoint(&a.checkpoint, &ws)?;
    let exog = exog_for(ens.as_ref(), a.exog.as_deref())?;
    let split: Split = a.split.into();
    let idx = ws.indices(split);
    if idx.is_empty() {
        return Err(Error::Validation(format!(
            "the {} split has no samples",
            split_name(split)
        )));
    }
    let y_dl = deep_kmh(&model, &ws, g.normalized(), &idx)?;
    let y_final = match &ens {
        Some(e) => apply_stage2(e, &ws, &idx, &y_dl, exog.as_ref())?.1,
        None => y_dl.clone(),
    };
    let (n, h) = (ws.nodes, ws.horizon);
    let mut out = String::from("timestamp,sensor,horizon,y_dl,y_final\n");
    for (k, &s) in idx.iter().enumerate() {
        for node in 0..n {
            for step in 0..h {
                let c = (k * n + node) * h + step;
                let ts = ws.origin_timestamp(s) + (step as i64 + 1) * ws.step;
                writeln!(
                    out,
                    "{ts},{},{},{},{}",
                    ws.sensor_ids[node],
                    step + 1,
                    y_dl[c],
                    y_final[c]
                )
                .expect("writing to a string");
            }
        }
    }
    write_text(&a.out, &out)
}

pub fn evaluate(a: EvaluateArgs) -> Result<()> {
    let ws = read_windows(&a.windows)?;
    let g = read_graph(&a.graph, &ws)?;
    let (model, ens) = read_checkpoint(&a.checkpoint, &ws)?;
    let exog = exog_for(ens.as_ref(), a.exog.as_deref())?;
    let split: Split = a.split.into();
    let idx = ws.indices(split);
    if idx.is_empty() {
        return Err(Error::Validation(format!(
            "the {} split has no samples",
            split_name(split)
        )));
    }
    let a_hat = g.normalized();
    let mut rows: Vec<(String, Vec<f64>)> = Vec::new();
    let y_dl = deep_kmh(&model, &ws, a_hat, &idx)?;
    match &ens {
        Some(e) => {
            let (_, y_final) = apply_stage2(e, &ws, &idx, &y_dl, exog.as_ref())?;
            rows.push(("hybridst".into(), y_final));
            rows.push(("hybridst_dl".into(), y_dl));
        }
        None => rows.push((model.config.variant.name().into(), y_dl)),
    }
    for p in &a.ablation {
        let (m, _) = read_checkpoint(p, &ws)?;
        rows.push((m.config.variant.name().into(), deep_kmh(&m, &ws, a_hat, &idx)?));
    }
    for kind in [BaselineKind::Persistence, BaselineKind::HistoricalAverage] {
        rows.push((kind.name().into(), run_baseline(kind, &ws, &idx)?));
    }
    let named: Vec<NamedPredictions<'_>> = rows
        .iter()
        .map(|(name, values)| NamedPredictions { name, values })
        .collect();
    let (truth, mask) = targets_kmh(&ws, &idx)?;
    let dataset = format!("{}/{}", a.dataset, split_name(split));
    let mut report = compare_report(&named, &truth, &mask, ws.horizon, &a.reference, &dataset, model.seed)?;
    report.config = Some(serde_json::from_str(&model.provenance).unwrap_or(Value::String(model.provenance.clone())));
    write_text(&a.out, &report.to_json())?;
    if let Some(p) = &a.table {
        write_text(p, &report.to_table())?;
    }
    if let Some(p) = &a.plot {
        write_text(p, &report.plot_csv())?;
    }
    print!("{}", report.to_table());
    Ok(())
}

pub fn gradcheck(a: GradcheckArgs) -> Result<()> {
    let cases = run_gradient_suite(a.seed)?;
    for c in &cases {
        println!(
            "{:<32} {:>10.3e}  {}",
            c.name,
            c.max_rel_error,
            if c.passed { "pass" } else { "FAIL" }
        );
    }
    if let Some(p) = &a.out {
        write_json(p, &cases)?;
    }
    let failed = cases.iter().filter(|c| !c.passed).count();
    if failed > 0 {
        return Err(Error::Computation(format!("{failed} gradient checks failed")));
    }
    Ok(())
}
