//! Tokenizes a plain-text corpus, packs it into fixed-length chunks and shows
//! the first batch. Also segments a sentence with a small unigram vocabulary
//! to show digit splitting and byte fallback.
//!
//! `cargo run --example pack_corpus -- [corpus.txt] [context] [batch]`

use std::path::PathBuf;

use pldr::data::{pack, read_documents, tokenize_documents, TokenizerHandle};

fn unigram_vocab() -> String {
    let mut v = String::from("[PAD]\t0\n[END]\t0\n<unk>\t0\n");
    for (piece, score) in [("▁the", -2.0), ("▁route", -4.0), ("▁at", -3.0), ("▁pm", -5.0), ("▁", -3.5), ("s", -3.0)]
    {
        v.push_str(&format!("{piece}\t{score}\n"));
    }
    for d in 0..10 {
        v.push_str(&format!("{d}\t-4\n"));
    }
    for b in 0..256 {
        v.push_str(&format!("<0x{b:02X}>\t-10\n"));
    }
    v
}

fn main() -> pldr::Result<()> {
    let mut args = std::env::args().skip(1);
    let corpus = args
        .next()
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("examples/data/toy.txt"));
    let context: usize = args.next().map(|s| s.parse().expect("context")).unwrap_or(64);
    let batch: usize = args.next().map(|s| s.parse().expect("batch")).unwrap_or(2);

    let tok = TokenizerHandle::byte_level();
    let docs = read_documents(&corpus)?;
    let tokens = tokenize_documents(&docs, &tok)?;
    let stream = pack(&tokens, context, batch, tok.pad_id())?;
    println!(
        "{}: {} documents, {} tokens, {} chunks of {context}, {} batches of {batch}",
        corpus.display(),
        docs.len(),
        tokens.len(),
        stream.chunks.len(),
        stream.num_batches()
    );
    let last = stream.chunks.len() - 1;
    println!("last chunk has {} real tokens and {} pads", stream.pad_start[last], context - stream.pad_start[last]);

    let first = stream.batch(0).expect("at least one batch");
    let shifted = first.shifted()?;
    println!(
        "first batch: {} rows, {} inputs per row, {} real targets",
        first.rows,
        first.cols - 1,
        shifted.real_targets()
    );
    for row in first.ids.chunks(first.cols) {
        let text = tok.decode(row)?;
        println!("  {:?}", text.replace('\n', "⏎"));
    }

    let unigram = TokenizerHandle::parse_vocab(&unigram_vocab(), true, true)?;
    let sentence = "the route 66 at 9pm ☕";
    let ids = unigram.encode_plain(sentence)?;
    println!("\nunigram ids for {sentence:?}: {ids:?}");
    println!("decoded back: {:?}", unigram.decode(&ids)?);
    Ok(())
}
