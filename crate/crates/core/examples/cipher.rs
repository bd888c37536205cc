//! Train on a generated cipher pair and print per-epoch metrics.
//!
//! `cargo run --release -p flowmt --example cipher -- [config.toml]`

use std::time::Instant;

use flowmt::config::Config;
use flowmt::corpus::{build_vocab, encode_corpus, generate_cipher_pair};
use flowmt::seq2seq::TranslationModel;
use flowmt::trainer::{evaluate_bleu, train, ValidSet};
use flowmt::vocab::Lang;

fn main() -> flowmt::Result<()> {
    let cfg = match std::env::args().nth(1) {
        Some(p) => Config::load(p.as_ref())?,
        None => Config::default(),
    };
    let data = generate_cipher_pair(&cfg.cipher)?;
    let vocab = build_vocab(&[&data.l1, &data.l2], usize::MAX, 1)?;
    let model = TranslationModel::new(&cfg, vocab)?;
    let l1 = encode_corpus(model.vocab(), &data.l1, cfg.model.max_len);
    let l2 = encode_corpus(model.vocab(), &data.l2, cfg.model.max_len);
    let valid = ValidSet::from_pairs(&model, &data.valid, cfg.train.valid_limit);
    let test = ValidSet::from_pairs(&model, &data.test, 0);
    let start = Instant::now();
    let out = train(model, &l1, &l2, &valid, &cfg, &mut |_, rec, best| {
        println!("{:>7.1}s {} {}", start.elapsed().as_secs_f64(), rec.to_json_line(), if best { "*" } else { "" });
        Ok(())
    })?;
    let b12 = evaluate_bleu(&out.model, &test.l1, &test.l2, Lang::L1, Lang::L2)?;
    let b21 = evaluate_bleu(&out.model, &test.l2, &test.l1, Lang::L2, Lang::L1)?;
    let hyps = out.model.translate(&test.l1, Lang::L1, Lang::L2)?;
    let v = out.model.vocab();
    let (mut hit, mut tot) = (0usize, 0usize);
    for (i, (h, r)) in hyps.iter().zip(&test.l2).enumerate() {
        if i < 5 {
            println!("src {}\nref {}\nhyp {}\n", v.decode(&test.l1[i]), v.decode(r), v.decode(h));
        }
        for (a, b) in h.interior().iter().zip(r.interior()) {
            hit += (a == b) as usize;
            tot += 1;
        }
    }
    println!("positional token accuracy {:.3}", hit as f64 / tot.max(1) as f64);
    println!("test bleu l1→l2 {b12:.2}  l2→l1 {b21:.2}  ({:.1}s)", start.elapsed().as_secs_f64());
    Ok(())
}
