use std::fs;
use std::path::Path;

use anyhow::{Context, Result};
use core_ood::feature_store::{atomic_write, subsample_indices, FeatureMatrix};
use core_ood::linalg;
use core_ood::metrics::{alignment_gap, markdown_table, EvalReport, GapReport, MIN_N_BOOT};
use core_ood::scorers::{BaselineParams, CombineMode, CoreConfig, FittedScorer, ScorerKind, ScorerSpec, ScorerState};
use core_ood::subspace::{fit_residual_directions, ResidualDirections};
use core_ood::sweep::{run_sweep, sweep_csv, sweep_reports, EvalData, Sweep, ALPHA_PRESET, BUDGET_PRESET};
use core_ood::synthetic::{generate, SynthConfig};
use core_ood::{CalibrationBudget, ClassifierWeights, DatasetManifest};

use crate::{
    BudgetOpts, CalibrateArgs, CombineArg, EvalArgs, Format, Missing, NcArgs, ScorerOpts, SweepArgs, SweepKind,
    SynthArgs, Usage,
};

const DEFAULT_TAU: f64 = 5.0;

fn usage(msg: impl Into<String>) -> anyhow::Error {
    Usage(msg.into()).into()
}

fn core_config(o: &ScorerOpts) -> Result<CoreConfig> {
    if o.tau.is_some() && !matches!(o.combine, CombineArg::Softmin) {
        return Err(usage("--tau only applies to --combine softmin"));
    }
    if o.argwise_max && !matches!(o.combine, CombineArg::Max) {
        return Err(usage("--argwise-max only applies to --combine max"));
    }
    let combine = match o.combine {
        CombineArg::Sum => CombineMode::Sum,
        CombineArg::Softmin => CombineMode::Softmin {
            tau: o.tau.unwrap_or(DEFAULT_TAU),
        },
        CombineArg::Max => CombineMode::Max { argwise: o.argwise_max },
    };
    let config = CoreConfig {
        alpha: o.alpha,
        norm: o.norm.parse()?,
        combine,
        conf: o.conf.parse()?,
        correct_only: !o.all_labeled,
    };
    config.validate()?;
    Ok(config)
}

fn spec(kind: ScorerKind, o: &ScorerOpts) -> Result<ScorerSpec> {
    Ok(ScorerSpec {
        kind,
        core: core_config(o)?,
        params: BaselineParams {
            k: o.k,
            percentile: o.percentile,
            ridge: o.ridge,
            vim_dim: o.vim_dim,
        },
    })
}

fn budget(o: &BudgetOpts) -> Result<CalibrationBudget> {
    Ok(match (o.budget, o.per_class) {
        (Some(f), _) => CalibrationBudget::fraction(f, o.seed)?,
        (None, Some(k)) => CalibrationBudget::per_class(k, o.seed)?,
        (None, None) => CalibrationBudget {
            seed: o.seed,
            ..CalibrationBudget::full()
        },
    })
}

fn load_manifest(path: &Path) -> Result<DatasetManifest> {
    DatasetManifest::load(path).with_context(|| format!("loading manifest {}", path.display()))
}

fn load_data(manifest: &Path, ood: &[String]) -> Result<EvalData> {
    let data = EvalData::load(&load_manifest(manifest)?)?;
    if ood.is_empty() {
        return Ok(data);
    }
    for name in ood {
        if !data.ood.iter().any(|(n, _, _)| n == name) {
            return Err(Missing(format!("manifest has no OOD set named {name:?}")).into());
        }
    }
    let names: Vec<&str> = ood.iter().map(String::as_str).collect();
    Ok(data.restrict(&names))
}

fn out_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

fn write(path: &Path, text: &str) -> Result<()> {
    atomic_write(path, text.as_bytes())?;
    log::info!("wrote {}", path.display());
    Ok(())
}

pub fn synth(a: SynthArgs) -> Result<()> {
    let config = SynthConfig {
        n_classes: a.classes,
        dim: a.dim,
        calib_per_class: a.calib_per_class,
        test_per_class: a.test_per_class,
        ood_per_type: a.ood_per_type,
        conf_mean: a.conf_mean,
        residual_strength: a.residual_strength,
        split_jitter: a.split_jitter,
        noise_sigma: a.noise_sigma,
        low_conf_factor: a.low_conf_factor,
        seed: a.seed,
    };
    config.validate()?;
    let bench = generate(&config)?;
    let manifest = bench.write_dir(&a.out)?;
    println!(
        "{} (label consistency {:.4}, effective seed {})",
        manifest.display(),
        bench.label_consistency,
        bench.effective_seed
    );
    Ok(())
}

pub fn calibrate(a: CalibrateArgs) -> Result<()> {
    let kind: ScorerKind = a.scorer.parse()?;
    let spec = spec(kind, &a.scorer_opts)?;
    let budget = budget(&a.budget)?;
    if FittedScorer::exists(&a.out) && !a.force {
        return Err(usage(format!(
            "{} already holds a fitted state; pass --force to overwrite",
            a.out.display()
        )));
    }
    let manifest = load_manifest(&a.manifest)?;
    let data = EvalData::load(&manifest)?;
    let (f, l) = data.calibration(&budget)?;
    let fitted = FittedScorer::fit(&spec, &f, &l, &data.weights)?;
    fitted.save(&a.out)?;
    println!(
        "{} fitted on {} calibration rows -> {}",
        kind,
        f.n_rows(),
        a.out.display()
    );
    Ok(())
}

pub fn eval(a: EvalArgs) -> Result<()> {
    if a.scorer.is_empty() && a.state.is_empty() {
        return Err(usage("give at least one --scorer or --state"));
    }
    let specs = a
        .scorer
        .iter()
        .map(|s| spec(s.parse()?, &a.scorer_opts))
        .collect::<Result<Vec<_>>>()?;
    let budget = budget(&a.budget)?;

    let data = load_data(&a.manifest, &a.ood)?;
    let mut reports = Vec::new();
    if !specs.is_empty() {
        let (f, l) = data.calibration(&budget)?;
        for s in &specs {
            let fitted = FittedScorer::fit(s, &f, &l, &data.weights)?;
            reports.push(data.evaluate(&fitted)?);
        }
    }
    for dir in &a.state {
        let fitted = FittedScorer::load(dir, &data.weights).with_context(|| format!("loading {}", dir.display()))?;
        reports.push(data.evaluate(&fitted)?);
    }

    out_dir(&a.out)?;
    let table = markdown_table(&reports);
    if a.format != Format::Markdown {
        write(&a.out.join("eval.csv"), &EvalReport::to_csv(&reports))?;
    }
    if a.format != Format::Csv {
        write(&a.out.join("eval.md"), &table)?;
    }
    print!("{table}");
    Ok(())
}

fn parse_grid(text: &str) -> Result<Vec<f64>> {
    text.split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| s.parse::<f64>().map_err(|_| usage(format!("bad grid value {s:?}"))))
        .collect()
}

pub fn sweep(a: SweepArgs) -> Result<()> {
    // the combine sweep takes its softmin temperature from --tau
    let mut base_opts = a.scorer_opts.clone();
    if a.kind == SweepKind::Combine {
        base_opts.tau = None;
    }
    let base = core_config(&base_opts)?;
    let budget = budget(&a.budget)?;
    let grid = match (&a.grid, a.kind) {
        (Some(g), SweepKind::Alpha | SweepKind::Budget) => Some(parse_grid(g)?),
        (Some(_), _) => return Err(usage("--grid only applies to alpha and budget sweeps")),
        (None, _) => None,
    };
    if grid.as_ref().is_some_and(Vec::is_empty) {
        return Err(usage("sweep grid is empty"));
    }
    let sweep = match a.kind {
        SweepKind::Alpha => Sweep::Alpha(grid.unwrap_or_else(|| ALPHA_PRESET.to_vec())),
        SweepKind::Budget => Sweep::Budget(grid.unwrap_or_else(|| BUDGET_PRESET.to_vec())),
        SweepKind::Ablation => Sweep::Ablation,
        SweepKind::Combine => Sweep::Combine {
            tau: a.scorer_opts.tau.unwrap_or(DEFAULT_TAU),
        },
        SweepKind::Norm => Sweep::Norm,
        SweepKind::Conf => Sweep::Conf,
    };
    // validate the grid values themselves before touching the data
    match &sweep {
        Sweep::Alpha(g) => {
            for &x in g {
                CoreConfig { alpha: x, ..base }.validate()?;
            }
        }
        Sweep::Budget(g) => {
            for &x in g {
                CalibrationBudget::fraction(x, budget.seed)?;
            }
        }
        _ => {}
    }

    let data = load_data(&a.manifest, &a.ood)?;
    let rows = run_sweep(&data, &sweep, base, &budget)?;
    out_dir(&a.out)?;
    let summary = sweep_csv(&rows);
    write(&a.out.join("sweep.csv"), &summary)?;
    write(
        &a.out.join("sweep_detail.csv"),
        &EvalReport::to_csv(&sweep_reports(&rows)),
    )?;
    print!("{summary}");
    Ok(())
}

fn membership(dirs: &ResidualDirections, weights: &ClassifierWeights, m: &FeatureMatrix, rows: &[usize]) -> Vec<f64> {
    rows.iter()
        .map(|&i| {
            let z = m.row(i);
            dirs.membership_fused(z, weights, linalg::argmax(&weights.logits(z)))
        })
        .collect()
}

fn residual_directions(a: &NcArgs, data: &EvalData, budget: &CalibrationBudget) -> Result<ResidualDirections> {
    if let Some(dir) = &a.state {
        let fitted = FittedScorer::load(dir, &data.weights).with_context(|| format!("loading {}", dir.display()))?;
        return match fitted.state {
            ScorerState::Core(c) => Ok(c.dirs),
            ScorerState::Membership(d) => Ok(d),
            _ => Err(usage(format!(
                "{} holds a {} state without residual directions",
                dir.display(),
                fitted.kind
            ))),
        };
    }
    let (f, l) = data.calibration(budget)?;
    let w = &data.weights;
    let preds: Vec<usize> = w
        .logits_batch(&f)?
        .chunks_exact(w.n_classes())
        .map(linalg::argmax)
        .collect();
    Ok(fit_residual_directions(&f, &l, &preds, w, !a.all_labeled)?)
}

fn gap_csv(name: &str, g: &GapReport) -> String {
    format!(
        "dataset,id_mean,ood_mean,delta,ci_low,ci_high,level,t_stat,df,p_value,n_boot,n_id,n_ood\n\
         {name},{},{},{},{},{},{},{},{},{},{},{},{}\n",
        g.id_mean,
        g.ood_mean,
        g.delta,
        g.ci_low,
        g.ci_high,
        g.level,
        g.t_stat,
        g.df,
        g.p_value,
        g.n_boot,
        g.n_id,
        g.n_ood
    )
}

pub fn nc_verify(a: NcArgs) -> Result<()> {
    if a.n_boot < MIN_N_BOOT {
        return Err(usage(format!("--n-boot must be at least {MIN_N_BOOT}")));
    }
    if !(a.level > 0.0 && a.level < 1.0) {
        return Err(usage("--level must lie in (0, 1)"));
    }
    if a.ood.as_deref().is_some_and(|n| n.contains(',')) {
        return Err(usage("--ood takes a single set name"));
    }
    let budget = budget(&a.budget)?;

    let data = load_data(&a.manifest, a.ood.as_slice())?;
    let dirs = residual_directions(&a, &data, &budget)?;
    let w = &data.weights;
    let all_test: Vec<usize> = (0..data.id_test.n_rows()).collect();
    let (name, id, ood) = if a.null {
        let zeros = vec![0usize; all_test.len()];
        let (half, _) = subsample_indices(&zeros, 1, &CalibrationBudget::fraction(0.5, a.budget.seed)?)?;
        let rest: Vec<usize> = all_test
            .iter()
            .copied()
            .filter(|i| half.binary_search(i).is_err())
            .collect();
        (
            "id-vs-id".to_string(),
            membership(&dirs, w, &data.id_test, &half),
            membership(&dirs, w, &data.id_test, &rest),
        )
    } else {
        let (name, _, m) = &data.ood[0];
        let rows: Vec<usize> = (0..m.n_rows()).collect();
        (
            name.clone(),
            membership(&dirs, w, &data.id_test, &all_test),
            membership(&dirs, w, m, &rows),
        )
    };
    let gap = alignment_gap(&id, &ood, a.n_boot, a.level, a.budget.seed)?;

    out_dir(&a.out)?;
    let mut json = serde_json::to_value(&gap)?;
    json["dataset"] = name.clone().into();
    write(&a.out.join("nc_verify.json"), &serde_json::to_string_pretty(&json)?)?;
    let csv = gap_csv(&name, &gap);
    write(&a.out.join("nc_verify.csv"), &csv)?;
    print!("{csv}");
    Ok(())
}
