use crate::error::Result;
use crate::numerics::{Checkpoint, ParamStore, Real};

/// Parameters kept fixed after a transfer: the pillar encoder and the
/// downsampling stages of the backbone.
pub const FROZEN_PREFIXES: [&str; 2] = ["encoder.", "backbone.down"];

#[derive(Debug, Clone, PartialEq)]
pub struct TransferReport {
    pub copied: Vec<String>,
    /// Target parameters absent from the checkpoint, left at initialization.
    pub fresh: Vec<String>,
    pub frozen: usize,
}

/// Loads a single-frame checkpoint into a (recurrent) model's parameters and
/// freezes the encoder and downsampling stages. Every checkpoint key must
/// exist in `store` with the same shape; keys only the target has stay fresh.
pub fn transfer_weights<T: Real>(
    store: &mut ParamStore<T>,
    ck: &Checkpoint,
) -> Result<TransferReport> {
    let copied = ck.load_into(store)?;
    let fresh = store
        .iter()
        .filter(|p| ck.get(&p.name).is_none())
        .map(|p| p.name.clone())
        .collect();
    let frozen = store.freeze_prefixes(&FROZEN_PREFIXES);
    Ok(TransferReport {
        copied,
        fresh,
        frozen,
    })
}
