mod common;

use common::{tiny, tiny_pretrained};
use tabimg_harness::pipeline::finetune_checkpoint;
use tabimg_harness::{Checkpoint, HarnessError};

#[test]
fn pretrained_checkpoint_round_trips_byte_for_byte() {
    let (_, _, ckpt) = tiny_pretrained(0);
    let bytes = ckpt.encode().unwrap();
    let back = Checkpoint::decode(&bytes).unwrap();
    assert_eq!(back.encode().unwrap(), bytes);
    assert_eq!(back.config, ckpt.config);
    assert_eq!(back.model.schema, ckpt.model.schema);
    assert_eq!(back.optimizer, ckpt.optimizer);
    for ((_, a), (_, b)) in ckpt.model.params.iter().zip(back.model.params.iter()) {
        assert_eq!(a.name, b.name);
        assert_eq!(a.value, b.value);
    }
    assert_eq!(Checkpoint::peek_digest(&bytes).unwrap(), ckpt.digest());
}

#[test]
fn finetuned_checkpoint_keeps_its_classifiers() {
    let (cfg, split, pre) = tiny_pretrained(1);
    let (ft, _) = finetune_checkpoint(&cfg, &pre, &split).unwrap();
    let bytes = ft.encode().unwrap();
    let back = Checkpoint::decode(&bytes).unwrap();
    assert_eq!(back.model.classes(), Some(4));
    assert!(back.optimizer.is_none());
    assert_eq!(back.encode().unwrap(), bytes);
}

#[test]
fn identical_seeds_give_identical_checkpoints() {
    let a = tiny_pretrained(2).2.encode().unwrap();
    let b = tiny_pretrained(2).2.encode().unwrap();
    assert_eq!(a, b);
    let c = tiny_pretrained(3).2.encode().unwrap();
    assert_ne!(a, c);
}

#[test]
fn digest_ignores_paths_but_not_settings() {
    let mut a = tiny(0);
    let d0 = tabimg_harness::config::digest(&a.to_text());
    a.data = Some("elsewhere".into());
    assert_eq!(tabimg_harness::config::digest(&a.to_text()), d0);
    a.set("lr", "0.5").unwrap();
    assert_ne!(tabimg_harness::config::digest(&a.to_text()), d0);
}

fn checkpoint_error(bytes: &[u8]) -> bool {
    matches!(Checkpoint::decode(bytes), Err(HarnessError::Checkpoint(_)))
}

#[test]
fn corrupted_containers_are_rejected() {
    let (_, _, ckpt) = tiny_pretrained(4);
    let bytes = ckpt.encode().unwrap();

    let mut magic = bytes.clone();
    magic[0] = b'X';
    assert!(checkpoint_error(&magic));

    // the config text starts after magic, version, digest and its length
    let mut tampered = bytes.clone();
    tampered[48] ^= 1;
    assert!(checkpoint_error(&tampered));

    assert!(checkpoint_error(&bytes[..bytes.len() - 1]));
    let mut longer = bytes.clone();
    longer.push(0);
    assert!(checkpoint_error(&longer));
}

fn rename_slot(bytes: &[u8], from: &str, to: &str) -> Vec<u8> {
    assert_eq!(from.len(), to.len());
    let mut needle = (from.len() as u16).to_le_bytes().to_vec();
    needle.extend_from_slice(from.as_bytes());
    let at = bytes
        .windows(needle.len())
        .position(|w| w == needle)
        .expect("slot in entry table");
    let mut out = bytes.to_vec();
    out[at + 2..at + 2 + to.len()].copy_from_slice(to.as_bytes());
    out
}

#[test]
fn slot_table_must_match_the_model() {
    let (_, _, mut ckpt) = tiny_pretrained(5);
    ckpt.optimizer = None;
    let bytes = ckpt.encode().unwrap();
    // a slot outside every parameter group
    assert!(checkpoint_error(&rename_slot(&bytes, "img.pos", "xyz.pos")));
    // a known group but the expected slot is then absent
    assert!(Checkpoint::decode(&rename_slot(&bytes, "img.pos", "img.poz")).is_err());
    // two entries with one name
    assert!(checkpoint_error(&rename_slot(&bytes, "tab.embed.cls", "tab.embed.msk")));
}
