use std::fs;
use std::path::Path;

use rand::RngCore;

use super::{io_err, HarnessError};
use crate::bacap::{derive_box, seal_with_keys, WriteCapability, CTX_IN, CTX_OUT};
use crate::mixnet::{RngStreams, Stream};

/// One derivation vector: inputs followed by the derived values.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct VectorLine {
    pub seed: [u8; 64],
    pub index: u64,
    pub ctx: Vec<u8>,
    pub box_id: [u8; 32],
    pub enc_key: [u8; 32],
    pub nonce: [u8; 12],
    /// Record sealing `plaintext_for(index)`.
    pub record: Vec<u8>,
}

impl VectorLine {
    pub fn plaintext_for(index: u64) -> Vec<u8> {
        format!("vector plaintext {index}").into_bytes()
    }

    /// Space-separated hex fields:
    /// `seed index ctx box_id enc_key nonce record`.
    pub fn to_line(&self) -> String {
        format!(
            "{} {} {} {} {} {} {}",
            hex::encode(self.seed),
            self.index,
            hex::encode(&self.ctx),
            hex::encode(self.box_id),
            hex::encode(self.enc_key),
            hex::encode(self.nonce),
            hex::encode(&self.record)
        )
    }
}

/// `count` seeds, each expanded at indices 1, 2, 3 and 100 under both
/// contexts.
pub fn bacap_vectors(seed: u64, count: u64) -> Vec<VectorLine> {
    let streams = RngStreams::new(seed);
    let mut out = Vec::new();
    for i in 0..count {
        let mut material = [0u8; 64];
        streams.rng(Stream::Workload, i).fill_bytes(&mut material);
        let cap = WriteCapability::from_seed(&material);
        for index in [1u64, 2, 3, 100] {
            for ctx in [CTX_IN, CTX_OUT] {
                let keys = derive_box(&cap, index, ctx).expect("valid index and context");
                let record = seal_with_keys(&keys, &VectorLine::plaintext_for(index))
                    .expect("short plaintext");
                out.push(VectorLine {
                    seed: material,
                    index,
                    ctx: ctx.to_vec(),
                    box_id: keys.box_id,
                    enc_key: keys.enc_key,
                    nonce: keys.nonce,
                    record: record.to_bytes(),
                });
            }
        }
    }
    out
}

/// Writes `bacap_vectors.txt` into `out_dir`.
pub fn write_bacap_vectors(out_dir: &Path, seed: u64, count: u64) -> Result<std::path::PathBuf, HarnessError> {
    fs::create_dir_all(out_dir).map_err(io_err(out_dir))?;
    let path = out_dir.join("bacap_vectors.txt");
    let mut text = String::new();
    for v in bacap_vectors(seed, count) {
        text.push_str(&v.to_line());
        text.push('\n');
    }
    fs::write(&path, text).map_err(io_err(&path))?;
    Ok(path)
}
