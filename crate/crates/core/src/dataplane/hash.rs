use thiserror::Error;

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

/// 64-bit FNV-1a.
pub fn fnv1a64(bytes: &[u8]) -> u64 {
    bytes
        .iter()
        .fold(FNV_OFFSET, |h, &b| (h ^ b as u64).wrapping_mul(FNV_PRIME))
}

/// Backend-selection value of a flow, kept in per-flow state so the rewrite
/// stage picks the same backend for every packet of the flow.
pub fn flow_pin(canonical: &[u8]) -> u64 {
    // Salted so backend choice is not correlated with replica choice.
    fnv1a64(canonical).rotate_left(29) ^ 0x9e37_79b9_7f4a_7c15
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
#[error("replica list is empty")]
pub struct LbError;

/// Replica owning `partition_key_bytes`. `replicas` must be ordered by switch id.
pub fn lb_select<'a, T>(partition_key_bytes: &[u8], replicas: &'a [T]) -> Result<&'a T, LbError> {
    if replicas.is_empty() {
        return Err(LbError);
    }
    let idx = fnv1a64(partition_key_bytes) % replicas.len() as u64;
    Ok(&replicas[idx as usize])
}
