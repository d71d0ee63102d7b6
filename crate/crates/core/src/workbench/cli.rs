//! `thematic` command line. Exit status: 0 success, 1 usage error, 2 runtime error.

use std::ffi::OsString;
use std::io::Write;
use std::path::PathBuf;

use clap::{Parser, Subcommand, ValueEnum};

use crate::prompting::StrategyKind;

use super::config::Settings;
use super::{replay, WorkbenchError, Workspace};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_RUNTIME: i32 = 2;

#[derive(Debug, Parser)]
#[command(name = "thematic", version, about = "LLM-assisted deductive thematic analysis of interview transcripts")]
struct Cli {
    /// Workspace directory holding the corpus, index and runs.
    #[arg(long, global = true, default_value = ".")]
    workspace: PathBuf,
    /// TOML config file (falls back to $THEMATIC_CONFIG).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum ReportFormat {
    Csv,
    Json,
    Table,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Load transcripts (files or directories) into the workspace corpus.
    Ingest {
        #[arg(required = true)]
        paths: Vec<PathBuf>,
    },
    /// Chunk and embed the corpus into the knowledge-base index.
    Index,
    /// Extract topics with one or more prompting strategies.
    Analyze {
        /// zero_shot, few_shot, chain_of_thought or rag; repeat or comma-separate.
        #[arg(long, required = true, value_delimiter = ',', value_parser = parse_strategy)]
        strategy: Vec<StrategyKind>,
        /// Research questions (JSON object or list).
        #[arg(long)]
        questions: PathBuf,
        #[arg(long)]
        run_id: Option<String>,
    },
    /// Score a run's topics against gold topics.
    Evaluate {
        #[arg(long)]
        gold: PathBuf,
        /// Embedding model ids, comma-separated.
        #[arg(long, required = true, value_delimiter = ',')]
        models: Vec<String>,
        #[arg(long)]
        run: Option<String>,
    },
    /// Fit the LDA baseline and print its keyword table.
    Lda {
        #[arg(long)]
        topics: usize,
    },
    /// Print the score report of an evaluated run.
    Report {
        #[arg(long)]
        run: Option<String>,
        #[arg(long, value_enum, default_value = "csv")]
        format: ReportFormat,
    },
    /// Ask the model why it extracted a topic (`strategy/question/index`).
    Rationale {
        #[arg(long)]
        topic: String,
        #[arg(long)]
        run: Option<String>,
    },
    /// Re-execute a scripted run and check its outputs are identical.
    Replay {
        #[arg(long)]
        manifest: PathBuf,
    },
}

fn parse_strategy(s: &str) -> Result<StrategyKind, String> {
    s.parse().map_err(|e: crate::prompting::PromptError| e.to_string())
}

pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    run_with(args, &mut std::io::stdout(), &mut std::io::stderr())
}

pub fn run_with<I, T>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let text = e.render().to_string();
            let _ = if e.use_stderr() { err.write_all(text.as_bytes()) } else { out.write_all(text.as_bytes()) };
            return code;
        }
    };
    match execute(cli, out) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            let _ = writeln!(err, "error: {e}");
            EXIT_RUNTIME
        }
    }
}

fn execute(cli: Cli, out: &mut dyn Write) -> Result<(), WorkbenchError> {
    let settings = Settings::discover(cli.config.as_deref())?;
    let ws = Workspace::new(cli.workspace, settings);
    let say = |out: &mut dyn Write, text: &str| out.write_all(text.as_bytes()).map_err(|e| WorkbenchError::io(std::path::Path::new("<stdout>"), e));
    match cli.command {
        Command::Ingest { paths } => {
            let store = ws.ingest(&paths)?;
            say(out, &format!("ingested {} transcripts\n", store.corpus.len()))
        }
        Command::Index => {
            let index = ws.index()?;
            say(out, &format!("indexed {} chunks with {}\n", index.len(), index.model_id))
        }
        Command::Analyze {
            strategy,
            questions,
            run_id,
        } => {
            let summary = ws.analyze(&strategy, &questions, run_id.as_deref())?;
            let topics: usize = summary.outputs.topic_sets.iter().map(|s| s.topics.len()).sum();
            let ungrounded = summary
                .outputs
                .topic_sets
                .iter()
                .flat_map(|s| &s.topics)
                .filter(|t| t.grounding == crate::prompting::Grounding::Ungrounded)
                .count();
            say(
                out,
                &format!(
                    "run {}: {} topic sets, {} topics ({} ungrounded), {} themes\n",
                    summary.run_id,
                    summary.outputs.topic_sets.len(),
                    topics,
                    ungrounded,
                    summary.outputs.themes.len()
                ),
            )
        }
        Command::Evaluate { gold, models, run } => {
            let evaluation = ws.evaluate(run.as_deref(), &gold, &models)?;
            say(out, &evaluation.report.render_table())
        }
        Command::Lda { topics } => {
            let (model, warnings) = ws.lda(topics)?;
            let mut text = String::new();
            for w in warnings {
                text.push_str(&format!("warning: {w}\n"));
            }
            text.push_str(&model.keywords_csv(ws.settings().lda.top_n));
            say(out, &text)
        }
        Command::Report { run, format } => {
            let report = ws.report(run.as_deref())?;
            let text = match format {
                ReportFormat::Csv => report.to_csv(),
                ReportFormat::Json => report.to_json(),
                ReportFormat::Table => report.render_table(),
            };
            say(out, &text)
        }
        Command::Rationale { topic, run } => {
            let text = ws.rationale(run.as_deref(), &topic)?;
            say(out, &format!("{text}\n"))
        }
        Command::Replay { manifest } => {
            let outcome = replay(&manifest)?;
            say(
                out,
                &format!(
                    "replay identical ({}) in {}\n",
                    outcome.compared.join(", "),
                    outcome.run_dir.display()
                ),
            )
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn run_args(args: &[&str]) -> (i32, String, String) {
        let (mut out, mut err) = (Vec::new(), Vec::new());
        let code = run_with(args.iter().copied(), &mut out, &mut err);
        (code, String::from_utf8(out).unwrap(), String::from_utf8(err).unwrap())
    }

    #[test]
    fn usage_errors_exit_one() {
        let (code, _, err) = run_args(&["thematic", "analyze", "--bogus"]);
        assert_eq!(code, EXIT_USAGE);
        assert!(err.contains("Usage"));
        let (code, _, err) = run_args(&["thematic", "analyze", "--strategy", "tree_of_thought", "--questions", "q.json"]);
        assert_eq!(code, EXIT_USAGE);
        assert!(err.contains("tree_of_thought"));
    }

    #[test]
    fn help_and_version_exit_zero() {
        let (code, out, _) = run_args(&["thematic", "--help"]);
        assert_eq!(code, EXIT_OK);
        assert!(out.contains("analyze"));
        assert_eq!(run_args(&["thematic", "--version"]).0, EXIT_OK);
    }

    #[test]
    fn missing_corpus_is_a_runtime_error() {
        let dir = tempfile::tempdir().unwrap();
        let ws = dir.path().to_str().unwrap();
        let (code, _, err) = run_args(&["thematic", "--workspace", ws, "index"]);
        assert_eq!(code, EXIT_RUNTIME);
        assert!(err.contains("ingest"));
    }
}
