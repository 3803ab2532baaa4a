use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::Args;

use ibgc_core::attack::{parse_kappa, random_targets, run_attacks, summarize, AttackConfig};
use ibgc_core::checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
use ibgc_core::config::parse_config;
use ibgc_core::data::{read_dataset, synth_bars_range, synth_ood, write_dataset, Dataset, OodKind};
use ibgc_core::explain::{class_heatmap, project_decision_space, saliency_heatmap, similarity_matrix};
use ibgc_core::metrics::{
    calibration_curve, corruption_suite, ece, effective_receptive_field, mce, oce, per_class_pairs, top1_pairs,
    CalibrationCurve, Corruption, CorruptionReport, DEFAULT_C_CRIT,
};
use ibgc_core::ood::{atypicality, fit_test, rejection_rate, roc_auc, ScoreSet, TestKind};
use ibgc_core::rng::{stream, Purpose};
use ibgc_core::trainer::{evaluate, train as run_training, EpochStats};
use ibgc_core::{Error, Result};

/// 1 usage, 2 data, 3 numeric failure.
pub fn exit_code(e: &Error) -> u8 {
    match e {
        _ if e.is_numeric() => 3,
        Error::InvalidArgument(_) => 1,
        _ => 2,
    }
}

fn write_csv(path: Option<&Path>, header: &str, rows: &[String]) -> Result<()> {
    let mut text = String::with_capacity(64 * (rows.len() + 1));
    text.push_str(header);
    text.push_str("\r\n");
    for r in rows {
        text.push_str(r);
        text.push_str("\r\n");
    }
    match path {
        Some(p) => fs::write(p, text)?,
        None => std::io::stdout().write_all(text.as_bytes())?,
    }
    Ok(())
}

fn f(v: f64) -> String {
    if v.is_finite() {
        format!("{:.10e}", v)
    } else if v.is_nan() {
        String::new()
    } else if v > 0.0 {
        "inf".into()
    } else {
        "-inf".into()
    }
}

fn opt(v: Option<f64>) -> String {
    v.map_or(String::new(), f)
}

fn load(path: &Path) -> Result<Checkpoint> {
    load_checkpoint(path)
}

fn check_data(ck: &Checkpoint, data: &Dataset) -> Result<()> {
    if data.image_shape() != ck.model.arch.input {
        return Err(Error::Shape(format!(
            "dataset images are {:?}, model expects {:?}",
            data.image_shape(),
            ck.model.arch.input
        )));
    }
    if data.classes != ck.model.head.classes {
        return Err(Error::Format(format!(
            "dataset has {} classes, model {}",
            data.classes, ck.model.head.classes
        )));
    }
    Ok(())
}

fn refs_of(ck: &Checkpoint) -> Result<&ScoreSet> {
    ck.refs
        .as_ref()
        .ok_or_else(|| Error::Format("checkpoint carries no reference scores".into()))
}

#[derive(Args, Debug)]
pub struct SynthArgs {
    /// `bars`, or an OoD kind (uniform_noise, inverted, shuffled) built from --base.
    #[arg(long, default_value = "bars")]
    pub kind: String,
    #[arg(long, default_value_t = 4000)]
    pub n: usize,
    #[arg(long, default_value_t = 4)]
    pub classes: usize,
    #[arg(long, default_value_t = 16)]
    pub side: usize,
    #[arg(long, default_value_t = 1)]
    pub channels: usize,
    /// Index of the first sample; disjoint ranges give disjoint splits.
    #[arg(long, default_value_t = 0)]
    pub start: usize,
    /// Dataset the OoD kinds are derived from.
    #[arg(long)]
    pub base: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
}

pub fn synth_data(a: SynthArgs, seed: Option<u64>) -> Result<()> {
    let seed = seed.unwrap_or(0);
    let ds = if a.kind == "bars" {
        synth_bars_range(a.start, a.n, a.classes, [a.channels, a.side, a.side], seed)?
    } else {
        let kind: OodKind = a.kind.parse()?;
        let base = match &a.base {
            Some(p) => read_dataset(p)?,
            None => synth_bars_range(a.start, a.n, a.classes, [a.channels, a.side, a.side], seed)?,
        };
        synth_ood(kind, &base, seed)?
    };
    write_dataset(&ds, &a.out)?;
    eprintln!("wrote {} images of {:?} to {}", ds.len(), ds.image_shape(), a.out.display());
    Ok(())
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Per-epoch statistics CSV (stdout when absent).
    #[arg(long)]
    pub log: Option<PathBuf>,
}

pub fn train(a: TrainArgs, seed: Option<u64>) -> Result<()> {
    let mut cfg = parse_config(&a.config)?;
    if let Some(s) = seed {
        cfg.train.seed = s;
    }
    let data = read_dataset(&a.data)?;
    let mut model = ibgc_core::model::FlowModel::new(cfg.arch()?)?;
    let history = run_training(&mut model, &data, &cfg.train, |s| {
        eprintln!("epoch {} lr {:.3e} l_x {:.4} l_y {:.4} acc {:.4}", s.epoch, s.lr, s.l_x, s.l_y, s.acc);
    })?;
    let refs = ScoreSet::new(model.marginal_log_likelihood(&data.images)?)?;
    let ck = Checkpoint {
        model,
        train: Some(cfg.train.clone()),
        refs: Some(refs),
    };
    save_checkpoint(&ck, &a.out)?;
    let rows: Vec<String> = history.iter().map(EpochStats::csv_row).collect();
    write_csv(a.log.as_deref(), EpochStats::CSV_HEADER, &rows)
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

pub fn eval(a: EvalArgs) -> Result<()> {
    let ck = load(&a.model)?;
    let data = read_dataset(&a.data)?;
    check_data(&ck, &data)?;
    let (acc, bpd) = evaluate(&ck.model, &data)?;
    let preds = ck.model.predict(&data.images)?;
    let (pc, pok) = per_class_pairs(&preds.iter().map(|p| p.posterior.clone()).collect::<Vec<_>>(), &data.labels);
    let curve = calibration_curve(&pc, &pok, 15)?;
    let (tc, tok) = top1_pairs(&preds, &data.labels);
    let o = oce(&tc, &tok, DEFAULT_C_CRIT)?;
    write_csv(
        a.out.as_deref(),
        "n,accuracy,bits_per_dim_continuous,ece_per_class_15bins,mce_per_class_15bins,oce_top1_ccrit0.997",
        &[format!("{},{},{},{},{},{}", data.len(), f(acc), f(bpd), f(ece(&curve)), f(mce(&curve)), opt(o))],
    )
}

#[derive(Args, Debug)]
pub struct OodArgs {
    #[arg(long)]
    pub model: PathBuf,
    /// Held-out in-distribution data.
    #[arg(long = "in")]
    pub in_data: PathBuf,
    #[arg(long)]
    pub ood: PathBuf,
    /// single_threshold, typicality or two_tailed.
    #[arg(long, default_value = "two_tailed")]
    pub test: String,
    #[arg(long, default_value_t = 0.01)]
    pub p: f64,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

pub fn ood(a: OodArgs) -> Result<()> {
    let ck = load(&a.model)?;
    let refs = refs_of(&ck)?;
    let kind: TestKind = a.test.parse()?;
    let ind = read_dataset(&a.in_data)?;
    let out = read_dataset(&a.ood)?;
    check_data(&ck, &ind)?;
    if out.image_shape() != ind.image_shape() {
        return Err(Error::Shape("OoD and in-distribution images differ in shape".into()));
    }
    let test = fit_test(refs, kind, a.p)?;
    let s_in = ck.model.marginal_log_likelihood(&ind.images)?;
    let s_out = ck.model.marginal_log_likelihood(&out.images)?;
    let st_in: Vec<f64> = s_in.iter().map(|&s| atypicality(refs, kind, s)).collect();
    let st_out: Vec<f64> = s_out.iter().map(|&s| atypicality(refs, kind, s)).collect();
    let auc = roc_auc(&st_in, &st_out)?;
    write_csv(
        a.out.as_deref(),
        "test,p,lower_nats,upper_nats,degenerate,fpr_refs,fpr_in,tpr_ood,auc_pct",
        &[format!(
            "{},{},{},{},{},{},{},{},{:.6}",
            kind.name(),
            a.p,
            f(test.lower),
            f(test.upper),
            test.degenerate,
            f(rejection_rate(&test, refs.scores())),
            f(rejection_rate(&test, &s_in)),
            f(rejection_rate(&test, &s_out)),
            auc
        )],
    )
}

#[derive(Args, Debug)]
pub struct AttackArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    /// Margin; `inf` removes the clamp.
    #[arg(long, default_value = "0.01")]
    pub kappa: String,
    #[arg(long, default_value_t = 0.0)]
    pub d: f64,
    #[arg(long, default_value_t = 10.0)]
    pub c: f64,
    #[arg(long, default_value_t = 50)]
    pub n: usize,
    #[arg(long, default_value_t = 1000)]
    pub max_steps: usize,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

pub const ATTACK_HEADER: &str = "row,index,target,predicted,success_pct,margin_success_pct,steps,l2,l2_per_pixel,target_confidence,entropy_nats,log_q_nats,detection_two_tailed,auc_single_pct,auc_two_tailed_pct";

pub fn attack(a: AttackArgs, seed: Option<u64>) -> Result<()> {
    let ck = load(&a.model)?;
    let refs = refs_of(&ck)?;
    let data = read_dataset(&a.data)?;
    check_data(&ck, &data)?;
    let kappa = parse_kappa(&a.kappa).map_err(Error::InvalidArgument)?;
    let cfg = AttackConfig {
        kappa,
        c: a.c,
        d: a.d,
        max_steps: a.max_steps,
        ..Default::default()
    };
    let n = a.n.min(data.len());
    let sub = data.subset(0, n)?;
    let targets = random_targets(&sub.labels, sub.classes, &mut stream(seed.unwrap_or(0), Purpose::Attack, 0));
    let results = run_attacks(&ck.model, &sub.images, &targets, &cfg, refs)?;
    let clean = ck.model.marginal_log_likelihood(&sub.images)?;
    let s = summarize(&results, &cfg, refs, &clean)?;
    let mut rows: Vec<String> = results
        .iter()
        .enumerate()
        .map(|(i, r)| {
            format!(
                "image,{},{},{},{},{},{},{},{},{},{},{},{},,",
                i,
                r.target,
                r.predicted,
                if r.success { 100 } else { 0 },
                if r.margin_success { 100 } else { 0 },
                r.steps,
                f(r.l2),
                f(r.l2_per_pixel),
                f(r.target_confidence),
                f(r.entropy),
                f(r.log_q),
                f(r.detection_score)
            )
        })
        .collect();
    let mean_steps = results.iter().map(|r| r.steps as f64).sum::<f64>() / n as f64;
    let mean_det = results.iter().map(|r| r.detection_score).sum::<f64>() / n as f64;
    let mean_logq = results.iter().map(|r| r.log_q).sum::<f64>() / n as f64;
    rows.push(format!(
        "summary,,,,{:.4},{:.4},{},{},{},{},{},{},{},{:.6},{:.6}",
        s.success_pct,
        s.margin_success_pct,
        f(mean_steps),
        f(s.mean_l2),
        f(s.mean_l2_per_pixel),
        f(s.mean_confidence),
        f(s.mean_entropy),
        f(mean_logq),
        f(mean_det),
        s.auc_single,
        s.auc_two_tailed
    ));
    write_csv(a.out.as_deref(), ATTACK_HEADER, &rows)
}

#[derive(Args, Debug)]
pub struct ExplainArgs {
    #[arg(long)]
    pub model: PathBuf,
    /// Dataset file holding the image.
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub index: usize,
    #[arg(long, default_value_t = 5)]
    pub top: usize,
    #[arg(long, default_value_t = 0.03)]
    pub contrast: f64,
    /// Directory for the CSV and PGM outputs.
    #[arg(long)]
    pub out_dir: PathBuf,
}

pub fn explain(a: ExplainArgs) -> Result<()> {
    let ck = load(&a.model)?;
    let data = read_dataset(&a.input)?;
    check_data(&ck, &data)?;
    if a.index >= data.len() {
        return Err(Error::InvalidArgument(format!("index {} of {}", a.index, data.len())));
    }
    fs::create_dir_all(&a.out_dir)?;
    let model = &ck.model;
    let x = data.subset(a.index, 1)?.images;
    let (z, ld) = model.encode(&x)?;
    let pred = &model.predict_latent(&z, &ld)[0];
    let mu = model.head.mu(&model.params);
    let d = model.latent_dim();
    let mut order: Vec<usize> = (0..model.head.classes).collect();
    order.sort_by(|&p, &q| pred.posterior[q].total_cmp(&pred.posterior[p]));
    order.truncate(a.top.clamp(2, model.head.classes.max(2)));
    let top_mus: Vec<Vec<f64>> = order.iter().map(|&y| mu.data()[y * d..(y + 1) * d].to_vec()).collect();
    let proj = project_decision_space(z.data(), &top_mus)?;
    let classes: Vec<String> = order.iter().map(|y| y.to_string()).collect();
    write_csv(
        Some(&a.out_dir.join("projection.csv")),
        "top_classes,h,v,delta_mu,span_dim,h_mark_90pct,v_mark_90pct_chi",
        &[format!(
            "{},{},{},{},{},{},{}",
            classes.join(" "),
            f(proj.h),
            f(proj.v),
            f(proj.delta_mu),
            proj.span_dim,
            f(proj.h_mark),
            f(proj.v_mark)
        )],
    )?;
    let sim = similarity_matrix(&mu)?;
    let mut rows = Vec::new();
    for &ya in &order {
        for &yb in &order {
            let e = &sim[ya][yb];
            rows.push(format!(
                "{},{},{},{},{},{}",
                ya,
                yb,
                f(e.delta_mu),
                f(e.expected_confidence),
                f(e.expected_uncertainty),
                e.diagonal
            ));
        }
    }
    write_csv(
        Some(&a.out_dir.join("similarity.csv")),
        "class_a,class_b,delta_mu,expected_confidence,expected_uncertainty,diagonal",
        &rows,
    )?;
    let priors = &model.head.log_priors;
    let sal = saliency_heatmap(z.data(), &mu, priors, model.pooled)?;
    fs::write(a.out_dir.join("saliency.csv"), sal.csv())?;
    fs::write(a.out_dir.join("saliency.pgm"), sal.pgm())?;
    for &y in &order {
        let h = class_heatmap(z.data(), &mu, priors, model.pooled, y, a.contrast)?;
        fs::write(a.out_dir.join(format!("class_{}.csv", y)), h.csv())?;
        fs::write(a.out_dir.join(format!("class_{}.pgm", y)), h.pgm())?;
    }
    println!("label {} predicted {} confidence {:.6}", data.labels[a.index], pred.argmax, pred.confidence);
    Ok(())
}

#[derive(Args, Debug)]
pub struct CalibrateArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, default_value_t = 15)]
    pub bins: usize,
    /// `per_class` (one pair per class and image) or `top1`.
    #[arg(long, default_value = "per_class")]
    pub convention: String,
    #[arg(long, default_value_t = DEFAULT_C_CRIT)]
    pub c_crit: f64,
    /// Reliability curve CSV; the summary goes to stdout.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

pub fn calibrate(a: CalibrateArgs) -> Result<()> {
    let ck = load(&a.model)?;
    let data = read_dataset(&a.data)?;
    check_data(&ck, &data)?;
    let preds = ck.model.predict(&data.images)?;
    let (conf, ok) = match a.convention.as_str() {
        "per_class" => per_class_pairs(&preds.iter().map(|p| p.posterior.clone()).collect::<Vec<_>>(), &data.labels),
        "top1" => top1_pairs(&preds, &data.labels),
        other => return Err(Error::InvalidArgument(format!("unknown convention '{}'", other))),
    };
    let curve = calibration_curve(&conf, &ok, a.bins)?;
    let (tc, tok) = top1_pairs(&preds, &data.labels);
    let o = oce(&tc, &tok, a.c_crit)?;
    if let Some(p) = &a.out {
        write_csv(Some(p), CalibrationCurve::CSV_HEADER, &curve.csv_rows())?;
    }
    write_csv(
        None,
        "convention,bins,n_pairs,ece_midpoint,mce_midpoint,c_crit,oce_top1",
        &[format!(
            "{},{},{},{},{},{},{}",
            a.convention,
            a.bins,
            curve.total,
            f(ece(&curve)),
            f(mce(&curve)),
            a.c_crit,
            opt(o)
        )],
    )
}

#[derive(Args, Debug)]
pub struct RfArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, default_value_t = 8)]
    pub n: usize,
    /// Sensitivity map CSV; the summary goes to stdout.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

pub fn rf(a: RfArgs) -> Result<()> {
    let ck = load(&a.model)?;
    let data = read_dataset(&a.data)?;
    check_data(&ck, &data)?;
    let x = data.subset(0, a.n.min(data.len()).max(1))?.images;
    let s = effective_receptive_field(&ck.model, &x)?;
    if let Some(p) = &a.out {
        let rows: Vec<String> = (0..s.rows)
            .map(|r| s.map[r * s.cols..(r + 1) * s.cols].iter().map(|v| f(*v)).collect::<Vec<_>>().join(","))
            .collect();
        let header: Vec<String> = (0..s.cols).map(|c| format!("col{}", c)).collect();
        write_csv(Some(p), &header.join(","), &rows)?;
    }
    write_csv(None, "images,support_width_px,fwhm_px", &[format!("{},{},{}", x.shape()[0], s.support_width(), s.fwhm())])
}

#[derive(Args, Debug)]
pub struct CorruptArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    /// Model whose errors normalise the corruption errors.
    #[arg(long)]
    pub baseline: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

pub fn corrupt(a: CorruptArgs, seed: Option<u64>) -> Result<()> {
    let ck = load(&a.model)?;
    let data = read_dataset(&a.data)?;
    check_data(&ck, &data)?;
    let base = match &a.baseline {
        Some(p) => Some(load(p)?),
        None => None,
    };
    let rep: CorruptionReport = corruption_suite(&ck.model, &data, base.as_ref().map(|b| &b.model), seed.unwrap_or(0))?;
    write_csv(a.out.as_deref(), CorruptionReport::CSV_HEADER, &rep.csv_rows())?;
    let mut rows: Vec<String> = rep.ce.iter().map(|(k, v)| format!("{},{}", k.name(), opt(*v))).collect();
    rows.push(format!("mce_ratio,{}", opt(rep.mce)));
    rows.push(format!("rel_mce_ratio,{}", opt(rep.rel_mce)));
    eprintln!("severity tables: {}", Corruption::table());
    write_csv(None, "aggregate,value_vs_baseline", &rows)
}
