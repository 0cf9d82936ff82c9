use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;
use serde_json::{json, Value};

use inflens_core::attribution::{attribution_map, encode_pgm, Centering};
use inflens_core::eval::{
    ablate_noise, ablation_table, evaluate, overlap, render_table, sweep, AblationScope,
    AblationTarget, EvalReport, NoiseModel,
};
use inflens_core::finetune::{fit, halving_learning_rate, history_csv, TrainConfig};
use inflens_core::head::{cost_report, decompose, CostReport};
use inflens_core::influence::{
    choose_k1_by_coverage, class_histograms, coverage_fraction, influence_map_from_histograms,
    CoverageMode,
};
use inflens_core::planted::{complement_sample, generate_planted, PlantedSpec};
use inflens_core::rng::{stream_rng, streams};
use inflens_core::tensorio::{load_manifest, save_bundle, LoadedManifest, NonNegativity};
use inflens_core::InfluenceMap;

use crate::output::{CliError, Result, RunDir};
use crate::{
    AblateArgs, AttribArgs, CenteringArg, Cli, Command, CoverageModeArg, DataArgs, EvalArgs,
    ExtractArgs, FinetuneArgs, GenPlantedArgs, KArgs, MapArgs, NoiseModeArg, OverlapArgs,
    ScopeArg, SweepArgs, TargetArg,
};

pub fn run(cli: &Cli) -> Result<PathBuf> {
    let ctx = Ctx {
        seed: cli.global.seed,
        out: &cli.global.out,
        mode: if cli.global.lenient {
            NonNegativity::Lenient
        } else {
            NonNegativity::Strict
        },
    };
    match &cli.command {
        Command::GenPlanted(a) => gen_planted(&ctx, a),
        Command::Extract(a) => extract(&ctx, a),
        Command::Eval(a) => eval(&ctx, a),
        Command::Sweep(a) => sweep_cmd(&ctx, a),
        Command::Ablate(a) => ablate(&ctx, a),
        Command::Overlap(a) => overlap_cmd(&ctx, a),
        Command::Finetune(a) => finetune(&ctx, a),
        Command::Attrib(a) => attrib(&ctx, a),
    }
}

struct Ctx<'a> {
    seed: u64,
    out: &'a Path,
    mode: NonNegativity,
}

impl Ctx<'_> {
    fn run_dir(&self, name: &'static str) -> Result<RunDir> {
        RunDir::create(self.out, name, self.seed)
    }

    fn load(&self, run: &mut RunDir, role: &str, path: &Path) -> Result<LoadedManifest> {
        let loaded = load_manifest(path, self.mode).map_err(CliError::input)?;
        if loaded.clamped > 0 {
            log::warn!("{}: clamped {} negative values", path.display(), loaded.clamped);
        }
        run.record_manifest(role, path, &loaded.manifest)?;
        Ok(loaded)
    }

    /// Training manifest plus the evaluation split (the same data when no
    /// separate manifest is given).
    fn load_pair(&self, run: &mut RunDir, data: &DataArgs) -> Result<(LoadedManifest, LoadedManifest)> {
        let train = self.load(run, "train", &data.manifest)?;
        let test = match &data.eval_manifest {
            Some(p) => {
                let test = self.load(run, "eval", p)?;
                if test.head.width() != train.head.width() || test.head.classes() != train.head.classes() {
                    return Err(CliError::Input(format!(
                        "{}: head shape differs from the training manifest",
                        p.display()
                    )));
                }
                test
            }
            None => train.clone(),
        };
        Ok((train, test))
    }
}

fn coverage_mode(m: CoverageModeArg) -> CoverageMode {
    match m {
        CoverageModeArg::InstanceMean => CoverageMode::InstanceMean,
        CoverageModeArg::ClassMean => CoverageMode::ClassMean,
    }
}

#[derive(Debug, Serialize)]
struct KChoice {
    k1: usize,
    k2: usize,
    /// `explicit` or `coverage`.
    k1_source: &'static str,
    #[serde(skip_serializing_if = "Option::is_none")]
    coverage_target: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    coverage_mode: Option<CoverageMode>,
}

fn choose_k(k: &KArgs, importance: &[(usize, Vec<Vec<f64>>)]) -> Result<KChoice> {
    let (k1, source) = match (k.k1, k.coverage) {
        (Some(k1), _) => (k1, "explicit"),
        (None, Some(target)) => {
            let k1 = choose_k1_by_coverage(importance, target, coverage_mode(k.coverage_mode))
                .map_err(CliError::input)?;
            (k1, "coverage")
        }
        (None, None) => {
            return Err(CliError::Input("one of --k1 or --coverage is required".into()));
        }
    };
    Ok(KChoice {
        k1,
        k2: k.k2.unwrap_or(k1),
        k1_source: source,
        coverage_target: k.coverage.filter(|_| source == "coverage"),
        coverage_mode: (source == "coverage").then(|| coverage_mode(k.coverage_mode)),
    })
}

fn check_k(choice: &KChoice, m: usize) -> Result<()> {
    if choice.k1 == 0 || choice.k1 > m || choice.k2 == 0 || choice.k2 > m {
        return Err(CliError::Input(format!(
            "k1 = {} and k2 = {} must lie in [1, {m}]",
            choice.k1, choice.k2
        )));
    }
    Ok(())
}

fn extract_map(k: &KArgs, train: &LoadedManifest) -> Result<(InfluenceMap, KChoice)> {
    let importance = train.dataset.importance_by_class();
    let choice = choose_k(k, &importance)?;
    check_k(&choice, train.dataset.width())?;
    let hists = class_histograms(&importance, choice.k1).map_err(CliError::compute)?;
    let imap = influence_map_from_histograms(&hists, choice.k1, choice.k2).map_err(CliError::compute)?;
    Ok((imap, choice))
}

/// The map named by `--map`, all indices with `--full`, or a fresh extraction.
fn resolve_map(
    args: &MapArgs,
    train: Option<&LoadedManifest>,
    run: &mut RunDir,
) -> Result<(InfluenceMap, Value)> {
    if let Some(path) = &args.map {
        let text = fs::read_to_string(path)
            .map_err(|e| CliError::Input(format!("{}: {e}", path.display())))?;
        let imap = InfluenceMap::from_json(&text)
            .map_err(|e| CliError::Input(format!("{}: {e}", path.display())))?;
        run.record_input("map", path)?;
        return Ok((imap, json!({"source": "file"})));
    }
    let train = train.ok_or_else(|| CliError::Input("--manifest is required without --map".into()))?;
    if args.full {
        let m = train.dataset.width();
        let labels = train.dataset.classes().iter().map(|c| c.label);
        return Ok((InfluenceMap::full(m, labels), json!({"source": "full"})));
    }
    let (imap, choice) = extract_map(&args.k, train)?;
    Ok((imap, json!({"source": "extracted", "selection": choice})))
}

fn check_map(imap: &InfluenceMap, loaded: &LoadedManifest) -> Result<()> {
    if imap.m != loaded.head.width() {
        return Err(CliError::Input(format!(
            "influence map width {} does not match head width {}",
            imap.m,
            loaded.head.width()
        )));
    }
    Ok(())
}

fn gen_planted(ctx: &Ctx, a: &GenPlantedArgs) -> Result<PathBuf> {
    let spec = PlantedSpec {
        classes: a.classes,
        width: a.width,
        planted_per_class: a.planted,
        n_per_class: a.n_per_class,
        signal_mean: a.signal_mean,
        noise_mean: a.noise_mean,
        seed: ctx.seed,
    };
    let data = generate_planted(&spec).map_err(CliError::input)?;
    let mut run = ctx.run_dir("gen-planted")?;
    let mut meta = serde_json::Map::new();
    meta.insert("generator".into(), json!("planted"));
    meta.insert("spec".into(), json!(spec));
    let holdout = data.sample(a.holdout_per_class, 1);
    for (split, dataset) in [("train", &data.train), ("holdout", &holdout)] {
        let mut meta = meta.clone();
        meta.insert("split".into(), json!(split));
        let manifest = save_bundle(run.path().join(split), dataset, &data.head, meta)
            .map_err(CliError::compute)?;
        for c in &manifest.classes {
            run.note(&format!("{split}/{}", c.features.display()));
        }
        run.note(&format!("{split}/{}", manifest.weights.display()));
        run.note(&format!("{split}/manifest.json"));
    }
    let planted: serde_json::Map<String, Value> = data
        .planted
        .iter()
        .enumerate()
        .map(|(l, set)| (l.to_string(), json!(set)))
        .collect();
    run.write_json("planted.json", &json!({"spec": spec, "classes": planted}))?;
    run.finish(json!({"spec": spec, "holdout_per_class": a.holdout_per_class}))
}

fn extract(ctx: &Ctx, a: &ExtractArgs) -> Result<PathBuf> {
    let mut run = ctx.run_dir("extract")?;
    let train = ctx.load(&mut run, "train", &a.manifest)?;
    let importance = train.dataset.importance_by_class();
    let choice = choose_k(&a.k, &importance)?;
    check_k(&choice, train.dataset.width())?;
    let hists = class_histograms(&importance, choice.k1).map_err(CliError::compute)?;
    let imap = influence_map_from_histograms(&hists, choice.k1, choice.k2).map_err(CliError::compute)?;

    let mut csv = String::from("class,index,count,mass\n");
    for (label, h) in &hists {
        for j in h.ranked() {
            let _ = writeln!(csv, "{label},{j},{},{}", h.counts[j], h.mass[j]);
        }
    }
    let mut rows = Vec::new();
    for ((label, rows_of), (_, h)) in importance.iter().zip(&hists) {
        let selected = imap.get(*label).unwrap_or_default();
        let cov = rows_of
            .iter()
            .map(|r| coverage_fraction(r, choice.k1).unwrap_or(1.0))
            .sum::<f64>()
            / rows_of.len().max(1) as f64;
        let name = train.dataset.class(*label).map_or("", |c| c.name.as_str());
        let hits: u64 = selected.iter().map(|&j| h.counts[j]).sum();
        rows.push(vec![
            label.to_string(),
            name.to_owned(),
            h.num_instances.to_string(),
            format!("{cov:.4}"),
            format!("{:.4}", hits as f64 / h.total().max(1) as f64),
            format!("{selected:?}"),
        ]);
    }
    let mut table = format!("k1 = {} ({}), k2 = {}\n\n", choice.k1, choice.k1_source, choice.k2);
    table.push_str(&render_table(
        &["class", "name", "instances", "coverage@k1", "selected share", "indices"],
        &rows,
    ));

    run.write("influence_map.json", imap.to_json() + "\n")?;
    run.write("histograms.csv", csv)?;
    run.write("extract.txt", table)?;
    run.write_json("selection.json", &choice)?;
    run.finish(json!({"selection": choice}))
}

#[derive(Serialize)]
struct EvalOutput<'a> {
    report: &'a EvalReport,
    cost: CostReport,
}

fn eval(ctx: &Ctx, a: &EvalArgs) -> Result<PathBuf> {
    let mut run = ctx.run_dir("eval")?;
    let (train, test) = ctx.load_pair(&mut run, &a.data)?;
    let (imap, map_params) = resolve_map(&a.map, Some(&train), &mut run)?;
    check_map(&imap, &train)?;
    let dhead = decompose(&train.head, &imap).map_err(CliError::input)?;
    let mut report = evaluate(&test.dataset.labeled(), &train.head, &dhead).map_err(CliError::compute)?;
    report.k1 = Some(imap.k1);
    report.seed = Some(ctx.seed);
    let cost = cost_report(dhead.width(), dhead.classes(), &dhead.subspace_sizes());

    let mut table = report.to_table();
    let _ = write!(
        table,
        "\nmultiplies: dense {}, decomposed {} (ratio {:.4})\n",
        cost.full_mults, cost.decomposed_mults, cost.ratio
    );
    run.write_json("eval.json", &EvalOutput { report: &report, cost })?;
    run.write("eval.txt", table)?;
    run.finish(json!({"map": map_params}))
}

fn sweep_cmd(ctx: &Ctx, a: &SweepArgs) -> Result<PathBuf> {
    let mut run = ctx.run_dir("sweep")?;
    let (train, test) = ctx.load_pair(&mut run, &a.data)?;
    let grid = sweep(
        &train.dataset.importance_by_class(),
        &test.dataset.labeled(),
        &train.head,
        &a.k1_grid,
        &a.k2_grid,
    )
    .map_err(|e| match e {
        inflens_core::eval::EvalError::BadGrid(_) => CliError::input(e),
        other => CliError::compute(other),
    })?;
    run.write_json("sweep.json", &grid)?;
    run.write("sweep.csv", grid.to_csv())?;
    run.write("sweep.txt", format!("r_A by (k1, k2)\n\n{}", grid.to_table()))?;
    run.finish(json!({"k1_grid": a.k1_grid, "k2_grid": a.k2_grid}))
}

fn ablate(ctx: &Ctx, a: &AblateArgs) -> Result<PathBuf> {
    let mut run = ctx.run_dir("ablate")?;
    let (train, test) = ctx.load_pair(&mut run, &a.data)?;
    let (imap, map_params) = resolve_map(&a.map, Some(&train), &mut run)?;
    check_map(&imap, &train)?;
    let noise = match a.noise_mode {
        NoiseModeArg::Fitted => NoiseModel::fitted(&train.dataset.labeled()),
        NoiseModeArg::Unit => NoiseModel::Unit,
        NoiseModeArg::Zero => NoiseModel::Zero,
    };
    let scopes: &[AblationScope] = match a.scope {
        ScopeArg::TrueLabel => &[AblationScope::TrueLabel],
        ScopeArg::Union => &[AblationScope::Union],
        ScopeArg::Both => &[AblationScope::TrueLabel, AblationScope::Union],
    };
    let targets: &[AblationTarget] = match a.ablate_target {
        Some(TargetArg::Influential) => &[AblationTarget::Influential],
        Some(TargetArg::Complement) => &[AblationTarget::Complement],
        None => &[AblationTarget::Influential, AblationTarget::Complement],
    };
    let data = test.dataset.labeled();
    let mut reports = Vec::new();
    for &scope in scopes {
        for &target in targets {
            let r = ablate_noise(&data, &train.head, &imap, target, scope, &noise, ctx.seed)
                .map_err(CliError::compute)?;
            reports.push(r);
        }
    }
    run.write_json("ablation.json", &reports)?;
    run.write("ablation.txt", ablation_table(&reports))?;
    run.finish(json!({"map": map_params, "noise": noise.kind()}))
}

fn overlap_cmd(ctx: &Ctx, a: &OverlapArgs) -> Result<PathBuf> {
    let mut run = ctx.run_dir("overlap")?;
    let train = match &a.manifest {
        Some(p) if a.map.map.is_none() => Some(ctx.load(&mut run, "train", p)?),
        _ => None,
    };
    let (imap, map_params) = resolve_map(&a.map, train.as_ref(), &mut run)?;
    let o = overlap(&imap);
    run.write_json("overlap.json", &o)?;
    run.write("overlap.txt", o.to_table())?;
    run.finish(json!({"map": map_params}))
}

fn finetune(ctx: &Ctx, a: &FinetuneArgs) -> Result<PathBuf> {
    let mut run = ctx.run_dir("finetune")?;
    let (train, test) = ctx.load_pair(&mut run, &a.data)?;
    let (imap, map_params) = resolve_map(&a.map, Some(&train), &mut run)?;
    check_map(&imap, &train)?;
    let dhead = decompose(&train.head, &imap).map_err(CliError::input)?;
    let train_set = train.dataset.labeled();
    let test_set = test.dataset.labeled();
    let (lr, lr_source) = match a.lr {
        Some(lr) => (lr, "explicit"),
        None => (
            halving_learning_rate(&dhead, &train_set, a.l2, 1.0).map_err(CliError::compute)?,
            "halving",
        ),
    };
    let config = TrainConfig {
        learning_rate: lr,
        epochs: a.epochs,
        batch_size: a.batch_size,
        l2_penalty: a.l2,
        seed: ctx.seed,
    };
    config.validate().map_err(CliError::input)?;
    let before = evaluate(&test_set, &train.head, &dhead).map_err(CliError::compute)?;
    let outcome = fit(&dhead, &train_set, &config, Some(&test_set)).map_err(CliError::compute)?;
    let after = evaluate(&test_set, &train.head, &outcome.head).map_err(CliError::compute)?;

    outcome.head.save(run.path().join("head")).map_err(CliError::compute)?;
    run.note("head/");
    run.write("history.csv", history_csv(&outcome.history))?;
    let rows = vec![
        vec!["before".to_owned(), format!("{:.6}", before.decomposed_accuracy), format!("{:.6}", before.full_accuracy)],
        vec!["after".to_owned(), format!("{:.6}", after.decomposed_accuracy), format!("{:.6}", after.full_accuracy)],
    ];
    let mut table = format!("learning rate {lr} ({lr_source}), {} epochs\n\n", a.epochs);
    table.push_str(&render_table(&["head", "A_d", "A_f"], &rows));
    run.write("finetune.txt", table)?;
    run.write_json(
        "finetune.json",
        &json!({
            "config": config,
            "learning_rate_source": lr_source,
            "before": before,
            "after": after,
            "history": outcome.history,
        }),
    )?;
    run.finish(json!({"map": map_params, "config": config}))
}

fn parse_size(s: &str) -> Result<(usize, usize)> {
    let bad = || CliError::Input(format!("--target {s:?}: expected HEIGHTxWIDTH"));
    let (h, w) = s.split_once(['x', 'X']).ok_or_else(bad)?;
    Ok((h.trim().parse().map_err(|_| bad())?, w.trim().parse().map_err(|_| bad())?))
}

#[derive(Serialize)]
struct AttribEntry {
    instance: usize,
    kind: &'static str,
    file: String,
    indices: Vec<usize>,
}

fn attrib(ctx: &Ctx, a: &AttribArgs) -> Result<PathBuf> {
    let mut run = ctx.run_dir("attrib")?;
    let loaded = ctx.load(&mut run, "features", &a.manifest)?;
    let (imap, map_params) = resolve_map(&a.map, Some(&loaded), &mut run)?;
    check_map(&imap, &loaded)?;
    let target = parse_size(&a.target)?;
    let class = loaded
        .dataset
        .class(a.class)
        .ok_or_else(|| CliError::Input(format!("class {} not in manifest", a.class)))?;
    let block = &class.block;
    if !block.is_spatial() {
        return Err(CliError::Input(format!(
            "class {} features are pooled; attribution needs rank-4 features",
            a.class
        )));
    }
    let influential = imap
        .get(a.class)
        .ok_or_else(|| CliError::Input(format!("class {} not in influence map", a.class)))?
        .to_vec();
    let mut rng = stream_rng(ctx.seed, streams::COMPLEMENT + a.class as u64);
    let complement = complement_sample(block.width(), &influential, influential.len(), &mut rng);
    let centering = match a.centering {
        CenteringArg::SpatialMean => Centering::SpatialMean,
        CenteringArg::CrossChannelMean => Centering::CrossChannelMean,
    };
    let source = (block.map_height(), block.map_width());
    let mut entries = Vec::new();
    for &i in &a.instances {
        if i >= block.len() {
            return Err(CliError::Input(format!(
                "instance {i} out of range; class {} has {}",
                a.class,
                block.len()
            )));
        }
        for (kind, set) in [("influential", &influential), ("complement", &complement)] {
            if set.is_empty() {
                continue;
            }
            let mut map = attribution_map(block.instance(i), block.width(), source, set, target, centering)
                .map_err(CliError::input)?;
            map.label = Some(a.class);
            let file = format!("class{}_inst{i}_{kind}.pgm", a.class);
            run.write(&file, encode_pgm(&map))?;
            entries.push(AttribEntry {
                instance: i,
                kind,
                file,
                indices: set.clone(),
            });
        }
    }
    run.write_json("attrib.json", &json!({"class": a.class, "target_size": target, "maps": entries}))?;
    run.finish(json!({
        "map": map_params,
        "class": a.class,
        "instances": a.instances,
        "target": target,
        "centering": centering,
    }))
}
