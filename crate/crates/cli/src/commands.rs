//! Subcommand bodies. Every artifact lands under `--out`.

use std::fs;
use std::path::{Path, PathBuf};

use suprim_core::evaluator::{read_label_cache, write_label_cache};
use suprim_core::harness::{
    configure_threads, evaluate, fov_sweep, generate_dataset, heading_histogram, label_cache_key, label_dataset,
    oracle_study, random_baseline, rotated_labels, split_eval, FovTable, Plot, ScenarioRows, Tabular,
};
use suprim_core::planner::{train, TrainOptions};
use suprim_core::scenario::{load_dataset, save_dataset, DatasetHeader, SplitTag, FORMAT_VERSION};
use suprim_core::{Checkpoint, LabelSet, Scenario, Selector, SuprimConfig, TrajectoryVocabulary};

use crate::{Cli, CliError, Command, DataArgs, ModelArgs, SplitArg};

type Result<T> = std::result::Result<T, CliError>;

struct Ctx<'a> {
    cfg: SuprimConfig,
    seed: u64,
    out: &'a Path,
    plots: bool,
}

impl Ctx<'_> {
    fn path(&self, given: &Option<PathBuf>, default: &str) -> PathBuf {
        given.clone().unwrap_or_else(|| self.out.join(default))
    }

    fn write(&self, name: &str, contents: &str) -> Result<()> {
        fs::write(self.out.join(name), contents)?;
        Ok(())
    }

    /// Writes `<stem>.txt` and `<stem>.csv`, plus `<stem>.svg` under `--plots`.
    fn emit<T: Tabular + Plot>(&self, stem: &str, table: &T) -> Result<()> {
        let text = table.to_text();
        print!("{text}");
        self.write(&format!("{stem}.txt"), &text)?;
        self.write(&format!("{stem}.csv"), &table.to_csv()?)?;
        if self.plots {
            self.write(&format!("{stem}.svg"), &table.to_svg())?;
        }
        Ok(())
    }

    fn vocab(&self) -> Result<TrajectoryVocabulary> {
        Ok(TrajectoryVocabulary::build(&self.cfg.planner.vocab)?)
    }

    /// Scenes of a dataset file plus their labels, from the cache when given.
    fn labelled(&self, data: &DataArgs, vocab: &TrajectoryVocabulary) -> Result<(Vec<Scenario>, Vec<LabelSet>)> {
        let path = self.path(&data.dataset, "dataset.jsonl");
        let scenes = read_scenes(&path)?;
        let labels = match &data.labels {
            Some(cache) => {
                let key = label_cache_key(&fs::read(&path)?, &self.cfg.evaluator, vocab.spec());
                read_label_cache(cache, &key, &self.cfg.evaluator)?
            }
            None => label_dataset(&scenes, vocab, &self.cfg.evaluator),
        };
        if labels.len() != scenes.len() {
            return Err(CliError::Runtime(format!("{} label sets for {} scenarios", labels.len(), scenes.len()).into()));
        }
        Ok((scenes, labels))
    }

    fn selector(&self, args: &ModelArgs, command: &str) -> Result<(Selector, String)> {
        let path = args
            .checkpoint
            .as_ref()
            .ok_or_else(|| CliError::Usage(format!("{command} requires --checkpoint <PATH>")))?;
        let ck = Checkpoint::load(path)?;
        let id = ck.id()?;
        Ok((Selector::from_checkpoint(&ck, self.cfg.inference.use_teacher)?, id))
    }
}

fn read_scenes(path: &Path) -> Result<Vec<Scenario>> {
    let (_, records) = load_dataset(path)?;
    Ok(records.into_iter().map(|r| r.scenario).collect())
}

pub fn run(cli: &Cli) -> Result<()> {
    let g = &cli.global;
    let cfg = match &g.config {
        Some(p) => SuprimConfig::load(p)?,
        None => SuprimConfig::default(),
    };
    configure_threads()?;
    fs::create_dir_all(&g.out)?;
    let ctx = Ctx { cfg, seed: g.seed, out: &g.out, plots: g.plots };
    match &cli.command {
        Command::Gen { count, split, dataset } => gen(&ctx, *count, *split, dataset),
        Command::Labels { dataset, labels } => labels_cmd(&ctx, dataset, labels),
        Command::Train { data, checkpoint } => train_cmd(&ctx, data, checkpoint),
        Command::Eval(args) => eval_cmd(&ctx, args),
        Command::Oracle(args) => oracle_cmd(&ctx, args),
        Command::SplitEval(args) => split_cmd(&ctx, args),
        Command::DistHist(data) => dist_hist(&ctx, data),
        Command::FovSweep { train_dataset, test_dataset } => fov_cmd(&ctx, train_dataset, test_dataset),
        Command::Infer { checkpoint, dataset } => infer_cmd(&ctx, checkpoint, dataset),
    }
}

fn gen(ctx: &Ctx, count: u64, split: SplitArg, dataset: &Option<PathBuf>) -> Result<()> {
    if count == 0 {
        return Err(CliError::Usage("--count must be positive".into()));
    }
    let end = ctx.seed.checked_add(count).ok_or_else(|| CliError::Usage("seed range overflows".into()))?;
    let split = match split {
        SplitArg::Train => SplitTag::Train,
        SplitArg::Test => SplitTag::Test,
    };
    let vocab = ctx.vocab()?;
    let records = generate_dataset(ctx.seed..end, split, &ctx.cfg.generator, &vocab, &ctx.cfg.evaluator)?;
    let header =
        DatasetHeader { format_version: FORMAT_VERSION, gen_config: ctx.cfg.generator.clone(), seed_range: [ctx.seed, end] };
    let path = ctx.path(dataset, "dataset.jsonl");
    save_dataset(&path, &header, &records)?;
    println!("wrote {} scenarios to {}", records.len(), path.display());
    Ok(())
}

fn labels_cmd(ctx: &Ctx, dataset: &Option<PathBuf>, labels: &Option<PathBuf>) -> Result<()> {
    let data_path = ctx.path(dataset, "dataset.jsonl");
    let scenes = read_scenes(&data_path)?;
    let vocab = ctx.vocab()?;
    let sets = label_dataset(&scenes, &vocab, &ctx.cfg.evaluator);
    let key = label_cache_key(&fs::read(&data_path)?, &ctx.cfg.evaluator, vocab.spec());
    let path = ctx.path(labels, "labels.bin");
    write_label_cache(&path, &key, &sets)?;
    println!("wrote labels for {} scenarios x {} entries to {}", sets.len(), vocab.len(), path.display());
    Ok(())
}

fn train_cmd(ctx: &Ctx, data: &DataArgs, checkpoint: &Option<PathBuf>) -> Result<()> {
    let vocab = ctx.vocab()?;
    let (scenes, labels) = ctx.labelled(data, &vocab)?;
    let path = ctx.path(checkpoint, "checkpoint.bin");
    let opts = TrainOptions {
        eval: ctx.cfg.evaluator.clone(),
        config_hash: ctx.cfg.hash(),
        log_path: Some(ctx.out.join("train_log.jsonl")),
        checkpoint_path: Some(path.clone()),
        ..TrainOptions::new(ctx.seed)
    };
    let report = train(&scenes, Some(&labels), &vocab, &ctx.cfg.planner, &opts)?;
    report.checkpoint.save(&path)?;
    println!(
        "trained {} steps over {} scenarios; checkpoint {} written to {}",
        report.log.len(),
        scenes.len(),
        report.checkpoint.id()?,
        path.display()
    );
    Ok(())
}

fn eval_cmd(ctx: &Ctx, args: &ModelArgs) -> Result<()> {
    let (selector, id) = ctx.selector(args, "eval")?;
    let (scenes, labels) = ctx.labelled(&args.data, selector.vocab())?;
    let inf = &ctx.cfg.inference;
    let (report, _) = evaluate(&selector, &scenes, &labels, inf.version, &ctx.cfg.hash(), &id)?;
    let text = report.to_text();
    let random = random_baseline(&labels, inf.random_samples, ctx.seed, inf.version)?;
    let text = format!("{text}random selection: {random:.3}\n");
    print!("{text}");
    ctx.write("eval.txt", &text)?;
    ctx.write("eval.csv", &report.to_csv()?)?;
    ctx.write("eval_scenarios.csv", &ScenarioRows(&report).to_csv()?)?;
    Ok(())
}

fn oracle_cmd(ctx: &Ctx, args: &ModelArgs) -> Result<()> {
    let (selector, id) = ctx.selector(args, "oracle")?;
    let (scenes, labels) = ctx.labelled(&args.data, selector.vocab())?;
    let inf = &ctx.cfg.inference;
    let (_, inferences) = evaluate(&selector, &scenes, &labels, inf.version, &ctx.cfg.hash(), &id)?;
    let table = oracle_study(&inferences, &labels, &inf.oracle_ks, inf.version)?;
    ctx.emit("oracle", &table)
}

fn split_cmd(ctx: &Ctx, args: &ModelArgs) -> Result<()> {
    let (selector, id) = ctx.selector(args, "split-eval")?;
    let (scenes, labels) = ctx.labelled(&args.data, selector.vocab())?;
    let (report, _) = evaluate(&selector, &scenes, &labels, ctx.cfg.inference.version, &ctx.cfg.hash(), &id)?;
    ctx.emit("splits", &split_eval(&report))
}

fn dist_hist(ctx: &Ctx, data: &DataArgs) -> Result<()> {
    let vocab = ctx.vocab()?;
    let (scenes, labels) = ctx.labelled(data, &vocab)?;
    let inf = &ctx.cfg.inference;
    let original = heading_histogram(&labels, &vocab, inf.heading_bins, inf.version)?;
    let mut augmented_labels = labels;
    augmented_labels.extend(rotated_labels(&scenes, ctx.cfg.planner.rotation_max, ctx.seed, &vocab, &ctx.cfg.evaluator));
    let augmented = heading_histogram(&augmented_labels, &vocab, inf.heading_bins, inf.version)?;
    ctx.emit("hist_original", &original)?;
    ctx.emit("hist_augmented", &augmented)
}

fn fov_cmd(ctx: &Ctx, train_path: &Path, test_path: &Path) -> Result<()> {
    let vocab = ctx.vocab()?;
    let train_scenes = read_scenes(train_path)?;
    let test_scenes = read_scenes(test_path)?;
    let train_labels = label_dataset(&train_scenes, &vocab, &ctx.cfg.evaluator);
    let test_labels = label_dataset(&test_scenes, &vocab, &ctx.cfg.evaluator);
    let rows = fov_sweep(&train_scenes, &train_labels, &test_scenes, &test_labels, &vocab, &ctx.cfg, ctx.seed)?;
    ctx.emit("fov", &FovTable(&rows))
}

fn infer_cmd(ctx: &Ctx, checkpoint: &Option<PathBuf>, dataset: &Option<PathBuf>) -> Result<()> {
    let args = ModelArgs { checkpoint: checkpoint.clone(), data: DataArgs { dataset: dataset.clone(), labels: None } };
    let (selector, _) = ctx.selector(&args, "infer")?;
    let scenes = read_scenes(&ctx.path(dataset, "dataset.jsonl"))?;
    let inferences = suprim_core::harness::run_inference(&selector, &scenes)?;
    let mut lines = String::new();
    for (s, inf) in scenes.iter().zip(&inferences) {
        let line = serde_json::json!({
            "seed": s.seed,
            "selected": inf.selected,
            "topk": inf.topk,
            "final_scores": inf.final_scores,
        });
        lines.push_str(&line.to_string());
        lines.push('\n');
    }
    print!("{lines}");
    ctx.write("inferences.jsonl", &lines)
}
