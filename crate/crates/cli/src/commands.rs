use std::path::{Path, PathBuf};
use std::time::Instant;

use lgc3d_core::checkpoint::{plan_container, plan_from_container, Container};
use lgc3d_core::compiler::{bench, compile, run_compiled, FrozenNetwork};
use lgc3d_core::densenet::{build_model, count_costs, predefined, ModelConfig, REFERENCE_COSTS};
use lgc3d_core::hsi::{
    cube_from_csv, cube_from_raw, load_band_list, normalize, remove_bands, stratified_split, synth_cube, HsiCube,
    SampleSplit, SynthParams,
};
use lgc3d_core::render::write_ppm;
use lgc3d_core::report::{append_record, mean_std, read_records, summarize, summary_csv, RunRecord};
use lgc3d_core::train::{evaluate, predict_frozen, train, Checkpoint, TrainConfig};
use lgc3d_core::{Error, NdArray, Result};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde_json::{json, Value};

use crate::{
    BenchArgs, Cli, Command, CompileArgs, ConvertArgs, EvalArgs, FlopsArgs, InputFormat, MapArgs, ReportArgs,
    SplitArgs, SynthArgs, TrainArgs,
};

/// Probe batch used to confirm a freshly compiled plan.
const COMPILE_PROBE: usize = 4;
const COMPILE_TOLERANCE: f64 = 1e-4;

pub fn run(cli: &Cli) -> Result<()> {
    let out = match &cli.command {
        Command::Convert(a) => convert(a)?,
        Command::Synth(a) => synth(cli, a)?,
        Command::Split(a) => split(cli, a)?,
        Command::Train(a) => train_cmd(cli, a)?,
        Command::Eval(a) => eval(a)?,
        Command::Compile(a) => compile_cmd(cli, a)?,
        Command::Bench(a) => bench_cmd(cli, a)?,
        Command::Flops(a) => flops(cli, a)?,
        Command::Map(a) => map(a)?,
        Command::Report(a) => report(a)?,
    };
    if cli.json {
        println!("{}", out.json);
    } else {
        print!("{}", out.text);
    }
    Ok(())
}

struct Output {
    json: Value,
    text: String,
}

fn read(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| Error::io(path, e))
}

fn read_text(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

fn cube_summary(cube: &HsiCube, out: &Path) -> Output {
    let labeled = cube.labeled().len();
    Output {
        json: json!({
            "out": out,
            "name": cube.name,
            "height": cube.height,
            "width": cube.width,
            "bands": cube.bands,
            "classes": cube.classes,
            "labeled": labeled,
        }),
        text: format!(
            "wrote {}: {}x{} pixels, {} bands, {} classes, {labeled} labeled\n",
            out.display(),
            cube.height,
            cube.width,
            cube.bands,
            cube.classes
        ),
    }
}

fn convert(a: &ConvertArgs) -> Result<Output> {
    let mut cube = match a.format {
        InputFormat::Raw => {
            let dims = a
                .dims
                .as_deref()
                .ok_or_else(|| Error::Config("--dims H,W,B is required for raw input".into()))?;
            cube_from_raw(
                &a.name,
                [dims[0], dims[1], dims[2]],
                a.layout.into(),
                &read(&a.data)?,
                &read(&a.labels)?,
            )?
        }
        InputFormat::Csv => cube_from_csv(&a.name, &read_text(&a.data)?, &read_text(&a.labels)?)?,
    };
    if let Some(list) = &a.remove_bands {
        cube = remove_bands(&cube, &load_band_list(list)?)?;
    }
    cube.save(&a.out)?;
    Ok(cube_summary(&cube, &a.out))
}

fn synth(cli: &Cli, a: &SynthArgs) -> Result<Output> {
    let params = SynthParams {
        size: a.size,
        bands: a.bands,
        classes: a.classes,
        noise: a.noise,
        seed: cli.seed.unwrap_or(SynthParams::default().seed),
    };
    let cube = synth_cube(&params)?;
    cube.save(&a.out)?;
    Ok(cube_summary(&cube, &a.out))
}

fn parse_ratio(s: &str) -> Result<[u32; 3]> {
    let parts: Vec<u32> = s
        .split(':')
        .map(|p| p.trim().parse::<u32>())
        .collect::<std::result::Result<_, _>>()
        .map_err(|_| Error::Config(format!("ratio {s:?} is not of the form a:b:c")))?;
    parts
        .try_into()
        .map_err(|_| Error::Config(format!("ratio {s:?} needs exactly three parts")))
}

fn split(cli: &Cli, a: &SplitArgs) -> Result<Output> {
    let cube = HsiCube::load(&a.cube)?;
    let s = stratified_split(&cube, parse_ratio(&a.ratio)?, cli.seed.unwrap_or(0))?;
    s.save(&a.out)?;
    Ok(Output {
        json: json!({
            "out": a.out,
            "ratios": s.ratios,
            "seed": s.seed,
            "train": s.train.len(),
            "val": s.val.len(),
            "test": s.test.len(),
            "unsplit_classes": s.unsplit_classes,
        }),
        text: format!(
            "wrote {}: train {}, val {}, test {}\n",
            a.out.display(),
            s.train.len(),
            s.val.len(),
            s.test.len()
        ),
    })
}

fn resolve_config(spec: &str) -> Result<ModelConfig> {
    let path = Path::new(spec);
    if path.exists() {
        return ModelConfig::load(path);
    }
    predefined(spec).ok_or_else(|| Error::Config(format!("no config file or predefined model named {spec:?}")))
}

fn run_path(out: &Path, run: usize, runs: usize) -> PathBuf {
    if runs == 1 {
        return out.to_path_buf();
    }
    let stem = out
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    let name = match out.extension() {
        Some(ext) => format!("{stem}.run{run}.{}", ext.to_string_lossy()),
        None => format!("{stem}.run{run}"),
    };
    out.with_file_name(name)
}

fn ratio_label(r: [u32; 3]) -> String {
    format!("{}:{}:{}", r[0], r[1], r[2])
}

fn train_cmd(cli: &Cli, a: &TrainArgs) -> Result<Output> {
    if a.runs == 0 {
        return Err(Error::Config("--runs must be at least 1".into()));
    }
    let cube = normalize(&HsiCube::load(&a.cube)?);
    let split = SampleSplit::load(&a.split)?;
    let base = resolve_config(&a.config)?;
    let model = base.with_input(cube.bands, a.patch.unwrap_or(base.patch));
    let mut cfg = match &a.train_config {
        Some(p) => TrainConfig::load(p)?,
        None => TrainConfig::default(),
    };
    if let Some(e) = a.epochs {
        cfg.epochs = e;
    }
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    let first_seed = cfg.seed;
    let mut runs = Vec::with_capacity(a.runs);
    let mut text = String::new();
    let mut test_oas = Vec::new();
    for r in 0..a.runs {
        cfg.seed = first_seed + r as u64;
        let path = run_path(&a.out, r, a.runs);
        let started = Instant::now();
        let outcome = train(&cube, &split, &model, &cfg, Some(&path))?;
        let seconds = started.elapsed().as_secs_f64();
        let ck = &outcome.checkpoint;
        let test = if split.test.is_empty() {
            None
        } else {
            Some(evaluate(
                &ck.network,
                &cube,
                &split.test,
                model.patch,
                false,
                cfg.eval_batch,
            )?)
        };
        let mut hard = ck.network.clone();
        hard.harden();
        let costs = count_costs(&hard)?;
        if let Some(t) = &test {
            test_oas.push(t.oa);
            if let Some(rec) = &a.record {
                append_record(
                    rec,
                    &RunRecord {
                        dataset: a.dataset.clone().unwrap_or_else(|| cube.name.clone()),
                        ratio: ratio_label(split.ratios),
                        patch: model.patch,
                        config: model.name.clone(),
                        seed: cfg.seed,
                        best_epoch: ck.epoch,
                        val_oa: ck.best_val_oa,
                        oa: t.oa,
                        aa: t.aa,
                        kappa: t.kappa,
                        params: costs.frozen_params,
                        madds: costs.madds,
                        seconds,
                    },
                )?;
            }
        }
        text.push_str(&format!(
            "run {r} (seed {}): best epoch {} val OA {:.4}{} -> {} ({seconds:.1}s)\n",
            cfg.seed,
            ck.epoch,
            ck.best_val_oa,
            test.as_ref()
                .map(|t| format!(", test OA {:.4} AA {:.4} kappa {:.4}", t.oa, t.aa, t.kappa))
                .unwrap_or_default(),
            path.display()
        ));
        runs.push(json!({
            "run": r,
            "seed": cfg.seed,
            "checkpoint": path,
            "best_epoch": ck.epoch,
            "best_val_oa": ck.best_val_oa,
            "history": ck.history,
            "test": test,
            "frozen_params": costs.frozen_params,
            "madds": costs.madds,
            "seconds": seconds,
        }));
    }
    let summary = (test_oas.len() > 1).then(|| mean_std(&test_oas));
    if let Some((m, s)) = summary {
        text.push_str(&format!("test OA over {} runs: {m:.4} ± {s:.4}\n", test_oas.len()));
    }
    Ok(Output {
        json: json!({
            "config": model.name,
            "train": cfg,
            "runs": runs,
            "test_oa_mean": summary.map(|s| s.0),
            "test_oa_std": summary.map(|s| s.1),
        }),
        text,
    })
}

fn eval(a: &EvalArgs) -> Result<Output> {
    let ck = Checkpoint::load(&a.checkpoint)?;
    let cube = normalize(&HsiCube::load(&a.cube)?);
    let split = SampleSplit::load(&a.split)?;
    let coords = split.part(&a.part)?;
    let r = evaluate(
        &ck.network,
        &cube,
        coords,
        ck.model.patch,
        a.compiled,
        ck.train.eval_batch,
    )?;
    let mut text = format!(
        "{} samples ({}): OA {:.4}  AA {:.4}  kappa {:.4}{}\n",
        r.samples,
        a.part,
        r.oa,
        r.aa,
        r.kappa,
        if a.compiled { "  [compiled path identical]" } else { "" }
    );
    for (k, acc) in r.per_class.iter().enumerate() {
        if let Some(acc) = acc {
            text.push_str(&format!("  class {:>2}: {acc:.4}\n", k + 1));
        }
    }
    let mut json = serde_json::to_value(&r)?;
    json["part"] = json!(a.part);
    json["compiled_checked"] = json!(a.compiled);
    Ok(Output { json, text })
}

fn probe_input(net_channels: usize, dims: [usize; 3], batch: usize, seed: u64) -> NdArray<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    NdArray::randn(&[batch, net_channels, dims[0], dims[1], dims[2]], 1.0, &mut rng)
}

fn compile_cmd(cli: &Cli, a: &CompileArgs) -> Result<Output> {
    let ck = Checkpoint::load(&a.checkpoint)?;
    let frozen = FrozenNetwork::from_network(&ck.network)?;
    let plan = compile(&frozen)?;
    let x = probe_input(
        frozen.input_channels,
        frozen.input_dims,
        COMPILE_PROBE,
        cli.seed.unwrap_or(0),
    );
    let (naive, _) = frozen.forward_naive(&x)?;
    let (fast, stats) = run_compiled(&x, &plan)?;
    let diff = naive.max_abs_diff(&fast);
    if diff.is_nan() || diff > COMPILE_TOLERANCE {
        return Err(Error::Equivalence {
            diff,
            tol: COMPILE_TOLERANCE,
        });
    }
    plan_container(&frozen, &plan, Some(&ck.model))?.save(&a.out)?;
    Ok(Output {
        json: json!({
            "out": a.out,
            "layers": plan.layers.len(),
            "layer_gathers": stats.layer_gathers,
            "restorations": stats.restorations,
            "permutation_builds": stats.permutation_builds,
            "probe_max_abs_diff": diff,
        }),
        text: format!(
            "wrote {}: {} layers, {} layer gathers + {} restoration per forward, probe diff {diff:.2e}\n",
            a.out.display(),
            plan.layers.len(),
            stats.layer_gathers.iter().sum::<usize>(),
            stats.restorations
        ),
    })
}

fn bench_cmd(cli: &Cli, a: &BenchArgs) -> Result<Output> {
    let c = Container::<f32>::load(&a.model)?;
    let (frozen, plan) = if c.kind == "plan" {
        let (f, p, _) = plan_from_container(&c)?;
        (f, p)
    } else {
        let ck = Checkpoint::from_container(c)?;
        let f = FrozenNetwork::from_network(&ck.network)?;
        let p = compile(&f)?;
        (f, p)
    };
    let x = probe_input(frozen.input_channels, frozen.input_dims, a.batch, cli.seed.unwrap_or(0));
    let r = bench(&frozen, &plan, &x, a.reps, a.tolerance)?;
    let speedup = r.naive_median_ms / r.compiled_median_ms;
    let mut json = serde_json::to_value(&r)?;
    json["speedup"] = json!(speedup);
    Ok(Output {
        json,
        text: format!(
            "batch {} x {} reps: naive {:.2} ms ({} gathers), compiled {:.2} ms ({} gathers), speedup {speedup:.2}x, max diff {:.2e}\n",
            r.batch, r.reps, r.naive_median_ms, r.naive_gathers, r.compiled_median_ms, r.compiled_gathers, r.max_abs_diff
        ),
    })
}

fn delta_pct(computed: u64, reference: u64) -> f64 {
    (computed as f64 - reference as f64) / reference as f64 * 100.0
}

fn flops(cli: &Cli, a: &FlopsArgs) -> Result<Output> {
    let base = resolve_config(&a.config)?;
    let cfg = base.with_input(a.bands.unwrap_or(base.bands), a.patch.unwrap_or(base.patch));
    let mut rng = ChaCha8Rng::seed_from_u64(cli.seed.unwrap_or(0));
    let net = build_model::<f32, _>(&cfg, &mut rng)?;
    let costs = count_costs(&net)?;
    // the deployed model is the grouped one; training adds dense weights and selection logits
    let layer_params: u64 = costs.layers.iter().map(|l| l.frozen_params).sum();
    let layer_training: u64 = costs.layers.iter().map(|l| l.params).sum();
    let layer_madds: u64 = costs.layers.iter().map(|l| l.madds_grouped).sum();
    let consistent =
        layer_params == costs.frozen_params && layer_training == costs.params && layer_madds == costs.madds;
    let reference = REFERENCE_COSTS
        .iter()
        .find(|(name, ..)| *name == cfg.name)
        .map(|&(_, params, madds)| {
            json!({
                "params": params,
                "madds": madds,
                "params_delta_pct": delta_pct(costs.frozen_params, params),
                "madds_delta_pct": delta_pct(costs.madds, madds),
            })
        });
    let mut text = format!(
        "{} on {} bands, patch {}: params {} (training {}, of which selection logits {}), madds {} (ungrouped {})\n",
        cfg.name,
        cfg.bands,
        cfg.patch,
        costs.frozen_params,
        costs.params,
        costs.params - costs.params_without_selection,
        costs.madds,
        costs.madds_dense
    );
    if let Some(r) = &reference {
        text.push_str(&format!(
            "reference: params {} ({:+.2}%), madds {} ({:+.2}%)\n",
            r["params"],
            r["params_delta_pct"].as_f64().unwrap_or(f64::NAN),
            r["madds"],
            r["madds_delta_pct"].as_f64().unwrap_or(f64::NAN)
        ));
    }
    text.push_str(&format!("per-layer sums match totals: {consistent}\n"));
    if a.layers {
        for l in &costs.layers {
            text.push_str(&format!(
                "  {:<12} {:>4} -> {:<4} G={} params {:>8} madds {:>10}\n",
                l.name, l.in_channels, l.out_channels, l.groups, l.frozen_params, l.madds_grouped
            ));
        }
    }
    let mut json = json!({
        "config": cfg.name,
        "bands": cfg.bands,
        "patch": cfg.patch,
        "params": costs.frozen_params,
        "training_params": costs.params,
        "training_params_without_selection": costs.params_without_selection,
        "madds": costs.madds,
        "madds_ungrouped": costs.madds_dense,
        "reference": reference,
        "consistent": consistent,
    });
    if a.layers {
        json["layers"] = serde_json::to_value(&costs.layers)?;
    }
    Ok(Output { json, text })
}

fn map(a: &MapArgs) -> Result<Output> {
    let ck = Checkpoint::load(&a.checkpoint)?;
    let cube = normalize(&HsiCube::load(&a.cube)?);
    let coords = cube.labeled();
    if coords.is_empty() {
        return Err(Error::Empty("cube has no labeled pixels to classify".into()));
    }
    let frozen = FrozenNetwork::from_network(&ck.network)?;
    let pred = predict_frozen(&frozen, &cube, &coords, ck.model.patch, ck.train.eval_batch)?;
    let mut grid = vec![0u16; cube.height * cube.width];
    for (&(r, c), &p) in coords.iter().zip(&pred) {
        grid[r * cube.width + c] = u16::try_from(p + 1).map_err(|_| Error::Range(format!("class {p}")))?;
    }
    write_ppm(&a.out, &grid, cube.height, cube.width)?;
    Ok(Output {
        json: json!({ "out": a.out, "height": cube.height, "width": cube.width, "pixels": coords.len() }),
        text: format!(
            "wrote {}: {}x{}, {} classified pixels\n",
            a.out.display(),
            cube.width,
            cube.height,
            coords.len()
        ),
    })
}

fn report(a: &ReportArgs) -> Result<Output> {
    let mut records = Vec::new();
    if a.runs.is_dir() {
        let mut files: Vec<PathBuf> = std::fs::read_dir(&a.runs)
            .map_err(|e| Error::io(&a.runs, e))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|x| x == "jsonl"))
            .collect();
        files.sort();
        for f in files {
            records.extend(read_records(&f)?);
        }
    } else {
        records = read_records(&a.runs)?;
    }
    if records.is_empty() {
        return Err(Error::Empty(format!("no run records under {}", a.runs.display())));
    }
    let rows = summarize(&records);
    let csv = summary_csv(&rows);
    if let Some(p) = &a.csv {
        std::fs::write(p, &csv).map_err(|e| Error::io(p, e))?;
    }
    let json = serde_json::to_value(&rows)?;
    if let Some(p) = &a.json_out {
        std::fs::write(p, serde_json::to_string_pretty(&json)?).map_err(|e| Error::io(p, e))?;
    }
    Ok(Output {
        json: json!({ "runs": records.len(), "rows": json }),
        text: csv,
    })
}
