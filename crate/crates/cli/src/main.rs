use previr::commands::{
    cmd_analyze, cmd_bench, cmd_gen_data, cmd_restore, cmd_train_stage1, cmd_train_stage2,
    AnalyzeOptions, RestoreOptions,
};
use previr::error::{usage, CliError};
use previr::RunConfig;

const HELP: &str = "\
previr - pixel-space diffusion restoration with preview-adaptive sampling

USAGE:
    previr <COMMAND> [--config FILE] [--set section.key=value]... [OPTIONS]

COMMANDS:
    gen-data             write the dataset manifest
    train-stage1         train denoiser + compact encoder + class embeddings
    distill-previewer    consistency-distill the preview adapter
    train-stage2         train the aggregator
    restore              restore a test set or a directory of PGM images
    analyze              trajectory diagnostics across degradation levels
    bench                time the heavy code paths

OPTIONS:
    --config FILE        load a config file (defaults apply otherwise)
    --set KEY=VALUE      override a config entry, e.g. --set sampler.steps=20
    train-stage1:  --resume CKPT | --steps N
    distill-previewer:   --ckpt STAGE1_CKPT
    train-stage2:  --ckpt PREVIEWER_CKPT | --noisy-previews
    restore:  --ckpt FILE | --level TAG | --input DIR | --class ID |
              --out DIR | --threads N | --creative TARGET_CLASS,CUTOFF
    analyze:  --ckpt FILE | --eta-sweep A,B,... | --threads N

Exit codes: 0 success, 1 runtime failure, 2 usage or config error.
";

struct Args {
    items: Vec<String>,
    pos: usize,
}

impl Args {
    fn next_value(&mut self, flag: &str) -> Result<String, CliError> {
        self.pos += 1;
        self.items
            .get(self.pos)
            .cloned()
            .ok_or_else(|| usage(format!("{flag} expects a value")))
    }
}

fn run() -> Result<(), CliError> {
    let items: Vec<String> = std::env::args().skip(1).collect();
    if items.is_empty() || items[0] == "--help" || items[0] == "-h" || items[0] == "help" {
        print!("{HELP}");
        return Ok(());
    }
    let command = items[0].clone();
    let mut args = Args { items, pos: 0 };

    let mut cfg = RunConfig::default();
    let mut config_loaded = false;
    let mut sets: Vec<String> = Vec::new();

    let mut resume: Option<String> = None;
    let mut steps_cap: Option<usize> = None;
    let mut ckpt: Option<String> = None;
    let mut noisy = false;
    let mut restore = RestoreOptions::default();
    let mut analyze = AnalyzeOptions::default();

    while args.pos + 1 < args.items.len() {
        args.pos += 1;
        let flag = args.items[args.pos].clone();
        match flag.as_str() {
            "--config" => {
                cfg = RunConfig::load(&args.next_value("--config")?)?;
                config_loaded = true;
            }
            "--set" => sets.push(args.next_value("--set")?),
            "--resume" => resume = Some(args.next_value("--resume")?),
            "--steps" => {
                steps_cap = Some(
                    args.next_value("--steps")?
                        .parse()
                        .map_err(|_| usage("--steps expects an integer"))?,
                )
            }
            "--ckpt" => ckpt = Some(args.next_value("--ckpt")?),
            "--noisy-previews" => noisy = true,
            "--level" => restore.level = Some(args.next_value("--level")?),
            "--input" => restore.input_dir = Some(args.next_value("--input")?),
            "--class" => {
                restore.class_id = Some(
                    args.next_value("--class")?
                        .parse()
                        .map_err(|_| usage("--class expects an integer"))?,
                )
            }
            "--out" => restore.out = Some(args.next_value("--out")?),
            "--threads" => {
                let n: usize = args
                    .next_value("--threads")?
                    .parse()
                    .map_err(|_| usage("--threads expects an integer"))?;
                restore.threads = n;
                analyze.threads = n;
            }
            "--creative" => {
                let spec = args.next_value("--creative")?;
                let (a, b) = spec
                    .split_once(',')
                    .ok_or_else(|| usage("--creative expects TARGET_CLASS,CUTOFF"))?;
                restore.creative = Some((
                    a.trim().parse().map_err(|_| usage("--creative: bad class"))?,
                    b.trim().parse().map_err(|_| usage("--creative: bad cutoff"))?,
                ));
            }
            "--eta-sweep" => {
                for part in args.next_value("--eta-sweep")?.split(',') {
                    analyze.eta_sweep.push(
                        part.trim().parse().map_err(|_| usage("--eta-sweep expects integers"))?,
                    );
                }
            }
            other => return Err(usage(format!("unknown flag '{other}'"))),
        }
    }
    let _ = config_loaded;
    for set in &sets {
        cfg.apply_set(set)?;
    }

    match command.as_str() {
        "gen-data" => cmd_gen_data(&cfg),
        "train-stage1" => cmd_train_stage1(&cfg, resume.as_deref(), steps_cap),
        "distill-previewer" => cmd_distill_previewer_entry(&cfg, ckpt.as_deref()),
        "train-stage2" => cmd_train_stage2(&cfg, ckpt.as_deref(), noisy),
        "restore" => {
            restore.ckpt = restore.ckpt.or(ckpt);
            cmd_restore(&cfg, &restore).map(|_| ())
        }
        "analyze" => {
            analyze.ckpt = ckpt;
            cmd_analyze(&cfg, &analyze).map(|_| ())
        }
        "bench" => cmd_bench(&cfg),
        other => Err(usage(format!("unknown command '{other}'; see --help"))),
    }
}

fn cmd_distill_previewer_entry(cfg: &RunConfig, ckpt: Option<&str>) -> Result<(), CliError> {
    previr::commands::cmd_distill_previewer(cfg, ckpt)
}

fn main() {
    if let Err(e) = run() {
        eprintln!("{e}");
        std::process::exit(e.exit_code());
    }
}
