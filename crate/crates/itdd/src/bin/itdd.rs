use std::io::{BufRead, Write};
use std::path::PathBuf;

use clap::{Parser, Subcommand};

use itdd::config::RunConfig;
use itdd::data::{build_vocab, gen_fact_copy_task, load_corpus, save_corpus, FactCopyConfig};
use itdd::decode::{
    compare_variants, evaluate, respond, ChatSession, DEFAULT_BEAM, DEFAULT_MAX_LEN,
};
use itdd::gradsuite::{op_suite, variant_suite, SuiteEntry, SUITE_TOL};
use itdd::model::Variant;
use itdd::train::{load_checkpoint, prepare_examples, split_train_val, train};
use itdd::{Error, Result};

#[derive(Parser)]
#[command(
    name = "itdd",
    version,
    about = "Document-grounded conversation: incremental encoder, two-pass decoder"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Train on a JSONL corpus, keeping the best-validation checkpoint.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Report perplexity and BLEU for a checkpoint on a corpus.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
        /// Assert the checkpoint holds this variant (ITE+DD, ITE+CKAD, KAT).
        #[arg(long)]
        variant: Option<String>,
        #[arg(long, default_value_t = DEFAULT_BEAM)]
        beam: usize,
        #[arg(long, default_value_t = DEFAULT_MAX_LEN)]
        max_len: usize,
    },
    /// Decode a reply for every example and write them as JSON lines.
    Decode {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = DEFAULT_BEAM)]
        beam: usize,
        #[arg(long, default_value_t = DEFAULT_MAX_LEN)]
        max_len: usize,
    },
    /// Converse with a checkpoint, grounded in a document file.
    Chat {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        doc: PathBuf,
        #[arg(long, default_value_t = DEFAULT_BEAM)]
        beam: usize,
        #[arg(long, default_value_t = DEFAULT_MAX_LEN)]
        max_len: usize,
    },
    /// Finite-difference check of every graph op; --full adds all three
    /// model variants end to end.
    Gradcheck {
        #[arg(long)]
        full: bool,
    },
    /// Generate the synthetic fact-copy corpus.
    GenSynth {
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 500)]
        count: usize,
        #[arg(long, default_value_t = 8)]
        facts: usize,
        #[arg(long, default_value_t = 64)]
        vocab: usize,
    },
    /// Train every variant on the same split and print the result table.
    Compare {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long, default_value = "compare")]
        out: PathBuf,
    },
}

fn main() {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = e.print();
            std::process::exit(code);
        }
    };
    if let Err(e) = run(cli.cmd) {
        eprintln!("{e}");
        let code = match e {
            Error::Numeric(_) => 3,
            _ => 2,
        };
        std::process::exit(code);
    }
}

fn run(cmd: Cmd) -> Result<()> {
    match cmd {
        Cmd::Train { config, corpus, out } => cmd_train(&config, &corpus, out),
        Cmd::Eval { ckpt, corpus, variant, beam, max_len } => {
            cmd_eval(&ckpt, &corpus, variant.as_deref(), beam, max_len)
        }
        Cmd::Decode { ckpt, corpus, out, beam, max_len } => {
            cmd_decode(&ckpt, &corpus, &out, beam, max_len)
        }
        Cmd::Chat { ckpt, doc, beam, max_len } => cmd_chat(&ckpt, &doc, beam, max_len),
        Cmd::Gradcheck { full } => cmd_gradcheck(full),
        Cmd::GenSynth { seed, out, count, facts, vocab } => {
            let cfg = FactCopyConfig {
                seed,
                n_conversations: count,
                n_facts: facts,
                vocab_size: vocab,
            };
            let corpus = gen_fact_copy_task(&cfg)?;
            save_corpus(&out, &corpus)?;
            println!("wrote {} conversations to {}", corpus.len(), out.display());
            Ok(())
        }
        Cmd::Compare { config, corpus, out } => cmd_compare(&config, &corpus, out),
    }
}

fn cmd_train(config: &PathBuf, corpus: &PathBuf, out: PathBuf) -> Result<()> {
    let rc = RunConfig::from_file(config)?;
    let corpus = load_corpus(corpus)?;
    let vocab = build_vocab(&corpus, rc.min_count, rc.max_vocab)?;
    let mcfg = rc.model_config(vocab.len());
    let (train_set, val_set) = split_train_val(prepare_examples(&corpus, &vocab, &mcfg)?);
    println!(
        "{} {} examples ({} train, {} validation), vocab {}",
        mcfg.variant,
        train_set.len() + val_set.len(),
        train_set.len(),
        val_set.len(),
        vocab.len()
    );
    let outcome = train(&mcfg, &rc.train_config(out), &vocab, &train_set, &val_set)?;
    for r in &outcome.records {
        println!(
            "step {:>6}  L {:8.4} (p1 {:8.4}, p2 {:8.4})  val ppl {:10.4}/{:10.4}  {:>7} ms",
            r.step, r.l_mle, r.l_mle1, r.l_mle2, r.val_ppl_pass1, r.val_ppl_pass2, r.wall_ms
        );
    }
    println!("best validation perplexity {:.4}", outcome.best_val_ppl);
    println!("checkpoint {}", outcome.checkpoint_dir.display());
    println!("metrics    {}", outcome.metrics_path.display());
    Ok(())
}

fn cmd_eval(
    ckpt: &PathBuf,
    corpus: &PathBuf,
    variant: Option<&str>,
    beam: usize,
    max_len: usize,
) -> Result<()> {
    let ck = load_checkpoint(ckpt)?;
    if let Some(tag) = variant {
        let want = Variant::parse(tag)?;
        if want != ck.model.variant {
            return Err(Error::Data(format!(
                "checkpoint holds {}, not {want}",
                ck.model.variant
            )));
        }
    }
    let corpus = load_corpus(corpus)?;
    let examples = prepare_examples(&corpus, &ck.vocab, &ck.model)?;
    let report = evaluate(&ck.model, &ck.params, &ck.vocab, &examples, beam, max_len)?;
    println!("variant      {}", report.variant);
    println!("examples     {}", examples.len());
    println!("ppl (pass 1) {:.4}", report.ppl.pass1);
    println!("ppl (final)  {:.4}", report.ppl.final_pass());
    println!("bleu         {:.2}", report.bleu);
    Ok(())
}

fn cmd_decode(
    ckpt: &PathBuf,
    corpus: &PathBuf,
    out: &PathBuf,
    beam: usize,
    max_len: usize,
) -> Result<()> {
    let ck = load_checkpoint(ckpt)?;
    let corpus = load_corpus(corpus)?;
    let examples = prepare_examples(&corpus, &ck.vocab, &ck.model)?;
    let mut file = std::io::BufWriter::new(std::fs::File::create(out)?);
    for ex in &examples {
        let r = respond(
            &ck.model,
            &ck.params,
            &ck.vocab,
            &ex.context,
            &ex.response_doc,
            beam,
            max_len,
        )?;
        let line = serde_json::json!({
            "reference": ck.vocab.decode_to_text(ex.gold())?,
            "draft": r.first_text,
            "response": r.final_text,
        });
        writeln!(file, "{line}")?;
    }
    file.flush()?;
    println!("wrote {} responses to {}", examples.len(), out.display());
    Ok(())
}

fn cmd_chat(ckpt: &PathBuf, doc: &PathBuf, beam: usize, max_len: usize) -> Result<()> {
    let ck = load_checkpoint(ckpt)?;
    let doc_text = std::fs::read_to_string(doc)?;
    let mut session = ChatSession::new(&ck, &doc_text, beam, max_len);
    println!("{} loaded; commands: :doc PATH, :reset, :quit", ck.model.variant);
    let stdin = std::io::stdin();
    loop {
        print!("you> ");
        std::io::stdout().flush()?;
        let mut line = String::new();
        if stdin.lock().read_line(&mut line)? == 0 {
            break;
        }
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        if line == ":quit" {
            break;
        }
        if line == ":reset" {
            session.reset();
            println!("context cleared");
            continue;
        }
        if let Some(path) = line.strip_prefix(":doc ") {
            let text = std::fs::read_to_string(path.trim())?;
            session.set_doc(&text);
            println!("document replaced");
            continue;
        }
        let r = session.say(line)?;
        if r.first_text != r.final_text {
            println!("draft> {}", r.first_text);
        }
        println!("bot>   {}", r.final_text);
    }
    Ok(())
}

fn print_suite(entries: &[SuiteEntry]) -> usize {
    let mut failures = 0;
    for e in entries {
        let ok = e.report.pass(SUITE_TOL);
        if !ok {
            failures += 1;
        }
        println!(
            "{:<22} max rel err {:>10.3e} over {:>5} elements (worst {}) {}",
            e.name,
            e.report.max_rel_err,
            e.report.n_checked,
            e.report.worst,
            if ok { "ok" } else { "FAIL" }
        );
    }
    failures
}

fn cmd_gradcheck(full: bool) -> Result<()> {
    let started = std::time::Instant::now();
    let mut failures = print_suite(&op_suite(7)?);
    if full {
        failures += print_suite(&variant_suite(7)?);
    }
    println!("elapsed {:.1}s", started.elapsed().as_secs_f64());
    if failures > 0 {
        return Err(Error::Numeric(format!(
            "{failures} gradient check(s) exceeded tolerance {SUITE_TOL:e}"
        )));
    }
    Ok(())
}

fn cmd_compare(config: &PathBuf, corpus: &PathBuf, out: PathBuf) -> Result<()> {
    let rc = RunConfig::from_file(config)?;
    let corpus = load_corpus(corpus)?;
    let vocab = build_vocab(&corpus, rc.min_count, rc.max_vocab)?;
    let mcfg = rc.model_config(vocab.len());
    let (train_set, val_set) = split_train_val(prepare_examples(&corpus, &vocab, &mcfg)?);
    println!(
        "{} train / {} validation examples, vocab {}",
        train_set.len(),
        val_set.len(),
        vocab.len()
    );
    let report = compare_variants(
        &mcfg,
        &rc.train_config(out),
        &vocab,
        &train_set,
        &val_set,
        &[Variant::IteDd, Variant::IteCkad, Variant::Kat],
        rc.beam,
        rc.max_len,
    )?;
    print!("{report}");
    Ok(())
}
