use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::json;

use onerec_harness::compare::{compare, table, write_comparison};
use onerec_harness::error::ErrorRecord;
use onerec_harness::pipeline::full_pipeline;
use onerec_harness::sweep::{run_sweep, SweepAxis, SweepSpec};
use onerec_harness::{run_stage, PolicySource, Result, RunConfig, Stage};

#[derive(Parser)]
#[command(
    name = "onerec",
    version,
    about = "Generative recommendation pipeline on a synthetic world"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args)]
struct Common {
    /// Run configuration (TOML). Defaults apply to anything left out.
    #[arg(long, short)]
    config: Option<PathBuf>,
    /// Run directory; each stage writes a fresh subdirectory.
    #[arg(long, short)]
    out: PathBuf,
    /// Override a configuration field, e.g. `posttrain.group_size=512`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Master seed.
    #[arg(long)]
    seed: Option<u64>,
}

impl Common {
    fn config(&self) -> Result<RunConfig> {
        let base = match &self.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::default(),
        };
        let mut sets = self.set.clone();
        if let Some(s) = self.seed {
            sets.push(format!("seed={s}"));
        }
        base.with_overrides(&sets)
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum PolicyArg {
    Pretrain,
    Posttrain,
}

impl From<PolicyArg> for PolicySource {
    fn from(p: PolicyArg) -> Self {
        match p {
            PolicyArg::Pretrain => PolicySource::Pretrain,
            PolicyArg::Posttrain => PolicySource::Posttrain,
        }
    }
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate the synthetic world and its interaction log.
    GenWorld(Common),
    /// Fit the RQ-Kmeans codebook on item content.
    FitTokenizer(Common),
    /// Re-encode every item with the fitted codebook.
    Tokenize(Common),
    /// Next-token pre-training of the policy.
    Pretrain(Common),
    /// Train the P-Score reward model.
    TrainPscore(Common),
    /// Joint RSFT and ECPO post-training.
    Posttrain(Common),
    /// Generate semantic-ID recommendations for the evaluation users.
    Generate {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_enum, default_value = "posttrain")]
        policy: PolicyArg,
    },
    /// Evaluate a policy: legality, Pass@K per objective, viral exposure.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_enum, default_value = "posttrain")]
        policy: PolicyArg,
    },
    /// Run a stage list over a grid of overrides and seeds.
    Sweep {
        #[command(flatten)]
        common: Common,
        /// Sweep axis `key=v1,v2` (repeatable; use `;` between values that contain commas).
        #[arg(long = "axis", value_name = "KEY=V1,V2")]
        axes: Vec<String>,
        #[arg(long, value_delimiter = ',', default_value = "1")]
        seeds: Vec<u64>,
        /// Stage names in order; defaults to the full pipeline.
        #[arg(long, value_delimiter = ',')]
        stages: Vec<String>,
    },
    /// Relative improvement of run B over run A with paired confidence intervals.
    Compare {
        dir_a: PathBuf,
        dir_b: PathBuf,
        #[arg(long, value_delimiter = ',', required = true)]
        metrics: Vec<String>,
        /// Evaluation stage to read inside each run.
        #[arg(long, default_value = "eval-posttrain")]
        eval: String,
        /// Also write comparison.csv / comparison.json into this new directory.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn stage_cmd(common: &Common, stage: Stage) -> Result<()> {
    let cfg = common.config()?;
    let m = run_stage(&common.out, stage, &cfg)?;
    println!(
        "{}",
        json!({ "status": "ok", "stage": m.stage, "dir": common.out.join(&m.stage), "config_hash": m.config_hash })
    );
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.cmd {
        Cmd::GenWorld(c) => stage_cmd(&c, Stage::GenWorld),
        Cmd::FitTokenizer(c) => stage_cmd(&c, Stage::FitTokenizer),
        Cmd::Tokenize(c) => stage_cmd(&c, Stage::Tokenize),
        Cmd::Pretrain(c) => stage_cmd(&c, Stage::Pretrain),
        Cmd::TrainPscore(c) => stage_cmd(&c, Stage::TrainPscore),
        Cmd::Posttrain(c) => stage_cmd(&c, Stage::Posttrain),
        Cmd::Generate { common, policy } => stage_cmd(&common, Stage::Generate(policy.into())),
        Cmd::Eval { common, policy } => stage_cmd(&common, Stage::Eval(policy.into())),
        Cmd::Sweep {
            common,
            axes,
            seeds,
            stages,
        } => {
            let cfg = common.config()?;
            let stages = if stages.is_empty() {
                full_pipeline(&cfg).iter().map(Stage::to_string).collect()
            } else {
                stages
            };
            let spec = SweepSpec {
                axes: axes
                    .iter()
                    .map(|a| SweepAxis::parse(a))
                    .collect::<Result<_>>()?,
                seeds,
                stages,
            };
            let results = run_sweep(&common.out, &cfg, &spec)?;
            println!(
                "{}",
                json!({ "status": "ok", "dir": common.out, "runs": results.len() })
            );
            Ok(())
        }
        Cmd::Compare {
            dir_a,
            dir_b,
            metrics,
            eval,
            out,
        } => {
            let rows = compare(&dir_a, &dir_b, &metrics, &eval)?;
            let (header, body) = table(&rows);
            println!("{}", header.join(","));
            for r in body {
                println!("{}", r.join(","));
            }
            if let Some(o) = out {
                write_comparison(&o, &rows)?;
            }
            Ok(())
        }
    }
}

fn fail(record: &ErrorRecord) -> ExitCode {
    eprintln!(
        "{}",
        serde_json::to_string(record).unwrap_or_else(|_| record.message.clone())
    );
    ExitCode::from(record.exit_code.clamp(1, 255) as u8)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            // --help and --version
            print!("{e}");
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            return fail(&ErrorRecord {
                error: "usage".into(),
                message: e.to_string().trim().to_string(),
                exit_code: 2,
            })
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => fail(&e.record()),
    }
}
