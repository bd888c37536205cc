//! `flowmt`: generate cipher data, train, translate, evaluate and inspect
//! flow-adapter translation models.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use flowmt::bleu::{bleu_text, BleuOptions, BleuReport};
use flowmt::checkpoint;
use flowmt::config::Config;
use flowmt::corpus::{build_vocab, encode_corpus, generate_cipher_pair, load_parallel, CipherSpec, DataDir, RawCorpus};
use flowmt::density::density_report;
use flowmt::seq2seq::TranslationModel;
use flowmt::trainer::{train, MetricsRecord, ValidSet};
use flowmt::vocab::Lang;
use flowmt::{Error, Result};

/// Upper bound on vocabulary entries built by `train`.
const MAX_VOCAB: usize = 1 << 20;

#[derive(Parser)]
#[command(name = "flowmt", version, about = "Unsupervised translation with flow adapters")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic cipher language pair.
    GenCipher {
        /// TOML file with cipher fields; defaults apply when omitted.
        #[arg(long)]
        spec: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a model on `train.l1`/`train.l2` (and `valid.tsv`) in a data directory.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Translate a file line by line.
    Translate {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        src: PathBuf,
        #[arg(long)]
        from: String,
        #[arg(long)]
        to: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// Corpus BLEU of a checkpoint on a parallel file, or of two text files.
    Evaluate {
        #[arg(long, requires_all = ["test", "direction"], conflicts_with_all = ["hyp", "reference"])]
        ckpt: Option<PathBuf>,
        #[arg(long)]
        test: Option<PathBuf>,
        /// `l1-l2` or `l2-l1`.
        #[arg(long)]
        direction: Option<String>,
        #[arg(long, requires = "reference")]
        hyp: Option<PathBuf>,
        #[arg(long = "ref")]
        reference: Option<PathBuf>,
        #[arg(long, default_value_t = 4)]
        max_n: usize,
        #[arg(long)]
        smooth: bool,
    },
    /// Likelihood of pooled training latents under each language's flow.
    InspectFlow {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
    },
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("flowmt: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

fn run(command: Command) -> Result<()> {
    match command {
        Command::GenCipher { spec, out } => gen_cipher(spec.as_deref(), &out),
        Command::Train { config, data, out } => run_train(config.as_deref(), &data, &out),
        Command::Translate { ckpt, src, from, to, out } => {
            translate_file(&ckpt, &src, Lang::parse(&from)?, Lang::parse(&to)?, &out)
        }
        Command::Evaluate { ckpt, test, direction, hyp, reference, max_n, smooth } => {
            let opts = BleuOptions { max_n, smooth };
            let report = match (ckpt, hyp, reference) {
                (Some(ckpt), None, None) => {
                    let test = test.expect("clap enforces --test");
                    evaluate_ckpt(&ckpt, &test, &direction.expect("clap enforces --direction"), opts)?
                }
                (None, Some(h), Some(r)) => bleu_text(&read_lines(&h)?, &read_lines(&r)?, opts)?,
                _ => return Err(Error::Usage("evaluate needs --ckpt/--test/--direction or --hyp/--ref".into())),
            };
            print_report(&report);
            Ok(())
        }
        Command::InspectFlow { ckpt, data } => inspect_flow(&ckpt, &data),
    }
}

fn gen_cipher(spec_path: Option<&Path>, out: &Path) -> Result<()> {
    let spec = match spec_path {
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
            toml::from_str::<CipherSpec>(&text).map_err(|e| Error::Config(format!("{}: {e}", p.display())))?
        }
        None => CipherSpec::default(),
    };
    let data = generate_cipher_pair(&spec)?;
    data.write(out, &spec)?;
    println!(
        "wrote {} + {} monolingual sentences, {} valid and {} test pairs to {}",
        data.l1.sentences.len(),
        data.l2.sentences.len(),
        data.valid.len(),
        data.test.len(),
        out.display()
    );
    Ok(())
}

fn run_train(config: Option<&Path>, data_dir: &Path, out: &Path) -> Result<()> {
    let cfg = match config {
        Some(p) => Config::load(p)?,
        None => Config::default(),
    };
    let data = DataDir::load(data_dir)?;
    let vocab = build_vocab(&[&data.l1, &data.l2], MAX_VOCAB, 1)?;
    let model = TranslationModel::new(&cfg, vocab)?;
    let max_len = cfg.model.max_len;
    let l1 = encode_corpus(model.vocab(), &data.l1, max_len);
    let l2 = encode_corpus(model.vocab(), &data.l2, max_len);
    let valid = ValidSet::from_pairs(&model, &data.valid, cfg.train.valid_limit);

    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let metrics_path = out.join("metrics.jsonl");
    let mut log = fs::File::create(&metrics_path).map_err(|e| Error::io(&metrics_path, e))?;
    let best_path = out.join("best.ckpt");
    let mut written = 0usize;
    let mut on_epoch = |m: &TranslationModel, rec: &MetricsRecord, is_best: bool| -> Result<()> {
        writeln!(log, "{}", rec.to_json_line()).map_err(|e| Error::io(&metrics_path, e))?;
        written += 1;
        checkpoint::save(&out.join("last.ckpt"), m, &cfg, written)?;
        if is_best {
            checkpoint::save(&best_path, m, &cfg, written)?;
        }
        eprintln!(
            "epoch {:>3}  dae {:.3}/{:.3}  bt {}/{}  valid bleu {}/{}{}",
            rec.epoch,
            rec.dae_loss_l1,
            rec.dae_loss_l2,
            fmt_opt(rec.bt_l1l2),
            fmt_opt(rec.bt_l2l1),
            fmt_opt(rec.valid_bleu_l1l2),
            fmt_opt(rec.valid_bleu_l2l1),
            if is_best { "  *" } else { "" }
        );
        Ok(())
    };
    let result = train(model, &l1, &l2, &valid, &cfg, &mut on_epoch)?;
    // The returned model is the best-on-validation one (or the initial or
    // last one when there was nothing to select on).
    checkpoint::save(&out.join("model.ckpt"), &result.model, &cfg, result.metrics.len())?;
    println!(
        "trained {} epochs ({} iterations); best epoch {}; checkpoint {}",
        result.metrics.len(),
        result.iterations,
        result.best_epoch.map_or("-".into(), |e| e.to_string()),
        out.join("model.ckpt").display()
    );
    Ok(())
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or("-".into(), |x| format!("{x:.3}"))
}

/// Lines of a UTF-8 file, keeping blank lines so outputs stay aligned.
fn read_lines(path: &Path) -> Result<Vec<String>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let text =
        String::from_utf8(bytes).map_err(|e| Error::Input(format!("{}: invalid UTF-8 ({e})", path.display())))?;
    Ok(text.lines().map(flowmt::corpus::normalize).collect())
}

fn translate_lines(model: &TranslationModel, lines: Vec<String>, from: Lang, to: Lang) -> Result<Vec<String>> {
    let corpus = RawCorpus { lang: from, sentences: lines };
    let seqs = encode_corpus(model.vocab(), &corpus, model.config().max_len);
    let out = model.translate(&seqs, from, to)?;
    Ok(out.iter().map(|s| model.vocab().decode(s)).collect())
}

fn translate_file(ckpt: &Path, src: &Path, from: Lang, to: Lang, out: &Path) -> Result<()> {
    let model = checkpoint::load(ckpt)?.model;
    let hyps = translate_lines(&model, read_lines(src)?, from, to)?;
    flowmt::corpus::write_lines(out, &hyps)
}

fn parse_direction(s: &str) -> Result<(Lang, Lang)> {
    let (a, b) = s.split_once('-').ok_or_else(|| Error::Usage(format!("direction '{s}' must look like l1-l2")))?;
    let (from, to) = (Lang::parse(a)?, Lang::parse(b)?);
    if from == to {
        return Err(Error::Usage(format!("direction '{s}' must name two different languages")));
    }
    Ok((from, to))
}

fn evaluate_ckpt(ckpt: &Path, test: &Path, direction: &str, opts: BleuOptions) -> Result<BleuReport> {
    let (from, to) = parse_direction(direction)?;
    let model = checkpoint::load(ckpt)?.model;
    let pairs = load_parallel(test)?;
    if pairs.is_empty() {
        return Err(Error::Input(format!("{}: no sentence pairs", test.display())));
    }
    let (src, refs): (Vec<String>, Vec<String>) =
        if from == Lang::L1 { pairs.into_iter().unzip() } else { pairs.into_iter().map(|(a, b)| (b, a)).unzip() };
    let hyps = translate_lines(&model, src, from, to)?;
    bleu_text(&hyps, &refs, opts)
}

fn print_report(r: &BleuReport) {
    println!("BLEU = {:.2}", r.bleu);
    let p: Vec<String> = r.precisions.iter().map(|x| format!("{:.4}", x)).collect();
    println!("precisions = {}", p.join(" / "));
    println!("brevity_penalty = {:.4}", r.brevity_penalty);
    println!("hyp_len = {}", r.hyp_len);
    println!("ref_len = {}", r.ref_len);
}

fn inspect_flow(ckpt: &Path, data_dir: &Path) -> Result<()> {
    let model = checkpoint::load(ckpt)?.model;
    let data = DataDir::load(data_dir)?;
    for corpus in [&data.l1, &data.l2] {
        let seqs = encode_corpus(model.vocab(), corpus, model.config().max_len);
        let r = density_report(&model, &seqs, corpus.lang)?;
        println!(
            "{}: sentences {}  mean log-likelihood {:.4}  min {:.4}  max {:.4}  transformed into {} {:.4}",
            r.lang,
            r.sentences,
            r.mean_log_likelihood,
            r.min_log_likelihood,
            r.max_log_likelihood,
            r.lang.other(),
            r.cross_mean_log_likelihood
        );
    }
    Ok(())
}
