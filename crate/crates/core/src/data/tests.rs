use std::io::Write;

use proptest::prelude::*;

use super::*;

#[test]
fn tokenize_examples() {
    assert_eq!(tokenize_bytes("hi", 4), vec![BOS_ID, 104, 105, PAD_ID]);
    assert_eq!(tokenize_bytes("", 3), vec![BOS_ID, PAD_ID, PAD_ID]);
    let text: String = (0..600).map(|i| (b'a' + (i % 26) as u8) as char).collect();
    let ids = tokenize_bytes(&text, 512);
    assert_eq!(ids.len(), 512);
    assert_eq!(ids[511], text.as_bytes()[510] as usize);
}

#[test]
fn render_example() {
    let line = r#"{"messages":[{"role":"user","content":"a"},{"role":"assistant","content":"b"}]}"#;
    assert_eq!(render_messages_line(line).unwrap(), "user: a\nassistant: b\n");
    assert_eq!(render_messages_line(r#"{"messages":[]}"#).unwrap(), "");
    assert!(render_messages_line("{not json").is_none());
}

#[test]
fn jsonl_counts_malformed_and_bytes() {
    let mut f = tempfile::NamedTempFile::new().unwrap();
    writeln!(f, r#"{{"messages":[{{"role":"user","content":"hello"}}]}}"#).unwrap();
    writeln!(f, "garbage").unwrap();
    writeln!(f, r#"{{"messages":[]}}"#).unwrap();
    let mut stats = CorpusStats::default();
    let docs = parse_messages_jsonl(f.path(), &mut stats).unwrap();
    assert_eq!(docs.len(), 2);
    assert_eq!(stats.malformed_lines, 1);
    assert_eq!(stats.empty_documents, 1);
    assert_eq!(stats.bytes_read, std::fs::metadata(f.path()).unwrap().len());
    assert!(parse_messages_jsonl(Path::new("/nonexistent/file.jsonl"), &mut stats).is_err());
}

#[test]
fn synth_is_seeded() {
    assert_eq!(synth_corpus(7, 3, (5, 9))[0], synth_corpus(7, 3, (5, 9))[0]);
    assert_ne!(synth_corpus(7, 3, (5, 9)), synth_corpus(8, 3, (5, 9)));
    let docs = synth_corpus(1, 100, (5, 9));
    assert_eq!(docs.len(), 100);
    assert!(docs.iter().all(|d| d.is_ascii() && !d.is_empty()));
}

#[test]
fn batcher_passes_and_accounting() {
    let docs = synth_corpus(3, 32, (3, 6));
    let mut b = Batcher::new(&docs, 16, 24, 5).unwrap();
    assert_eq!(b.batches_per_pass(), 2);
    let epoch = b.epoch(5);
    assert_eq!(b.stats.tokens, 5 * 16 * 24);
    for batch in &epoch {
        for i in 0..16 {
            let row = batch.row(i);
            assert_eq!(row[0], BOS_ID);
            let first_pad = batch.lengths[i];
            assert!(row[..first_pad].iter().all(|&t| t != PAD_ID));
            assert!(row[first_pad..].iter().all(|&t| t == PAD_ID));
        }
    }
    let mut again = Batcher::new(&docs, 16, 24, 5).unwrap();
    assert_eq!(again.epoch(5), epoch);
    let mut other = Batcher::new(&docs, 16, 24, 6).unwrap();
    assert_ne!(other.epoch(5), epoch);
}

#[test]
fn batcher_skips_empty_and_rejects_small_corpora() {
    let mut docs = synth_corpus(3, 15, (3, 6));
    docs.push(String::new());
    assert!(matches!(Batcher::new(&docs, 16, 8, 0), Err(Error::Data(_))));
    assert!(Batcher::new(&docs, 0, 8, 0).is_err());
}

#[test]
fn data_source_parses() {
    assert_eq!("synth".parse::<DataSource>().unwrap(), DataSource::Synth);
    assert_eq!(
        "data/x.jsonl".parse::<DataSource>().unwrap(),
        DataSource::Jsonl(PathBuf::from("data/x.jsonl"))
    );
}

proptest! {
    #[test]
    fn tokenize_shape_and_pad_discipline(text in ".{0,40}", max_len in 1usize..48) {
        let ids = tokenize_bytes(&text, max_len);
        prop_assert_eq!(ids.len(), max_len);
        prop_assert_eq!(ids[0], BOS_ID);
        prop_assert!(ids.iter().all(|&t| t < VOCAB_SIZE));
        if let Some(p) = ids.iter().position(|&t| t == PAD_ID) {
            prop_assert!(ids[p..].iter().all(|&t| t == PAD_ID));
        }
    }
}
