use super::InteractionLog;
use crate::error::{contract_err, Error, Result};

/// Iterated k-core filter: drop items with fewer than `item_core`
/// interactions, then users with fewer than `user_core`, until neither step
/// removes anything. ID maps are rebuilt contiguously.
pub fn core_filter(log: &InteractionLog, user_core: usize, item_core: usize) -> Result<InteractionLog> {
    if user_core < 1 || item_core < 1 {
        return contract_err(format!(
            "core thresholds must be >= 1, got user_core={user_core}, item_core={item_core}"
        ));
    }
    let mut alive = vec![true; log.records.len()];
    loop {
        let mut changed = false;

        let mut item_counts = vec![0usize; log.n_items()];
        for (r, _) in log.records.iter().zip(&alive).filter(|(_, a)| **a) {
            item_counts[r.item as usize] += 1;
        }
        for (r, a) in log.records.iter().zip(alive.iter_mut()) {
            if *a && item_counts[r.item as usize] < item_core {
                *a = false;
                changed = true;
            }
        }

        let mut user_counts = vec![0usize; log.n_users()];
        for (r, _) in log.records.iter().zip(&alive).filter(|(_, a)| **a) {
            user_counts[r.user as usize] += 1;
        }
        for (r, a) in log.records.iter().zip(alive.iter_mut()) {
            if *a && user_counts[r.user as usize] < user_core {
                *a = false;
                changed = true;
            }
        }

        if !changed {
            break;
        }
    }
    let mut keep = alive.into_iter();
    let out = log.retain_remapped(|_| keep.next().expect("one flag per record"));
    if out.is_empty() {
        return Err(Error::EmptyAfterFilter);
    }
    Ok(out)
}
