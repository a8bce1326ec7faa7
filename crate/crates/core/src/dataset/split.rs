//! Deterministic train/val manifest splitting.

use super::{DatasetError, DatasetManifest, SplitTag};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Split a manifest into disjoint, exhaustive train/val manifests.
/// `fractions = (train, val)` must sum to 1 within 1e-9.
pub fn split(
    manifest: &DatasetManifest,
    fractions: (f64, f64),
    seed: u64,
) -> Result<(DatasetManifest, DatasetManifest), DatasetError> {
    let sum = fractions.0 + fractions.1;
    if (sum - 1.0).abs() > 1e-9 {
        return Err(DatasetError::BadSplitFractions { sum });
    }
    let mut ids = manifest.track_ids();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    ids.shuffle(&mut rng);
    let n_train = (fractions.0 * ids.len() as f64).round() as usize;
    let n_train = n_train.min(ids.len());

    let mut train = DatasetManifest::new(SplitTag::Train);
    let mut val = DatasetManifest::new(SplitTag::Val);
    for (i, id) in ids.iter().enumerate() {
        let dst = if i < n_train { &mut train } else { &mut val };
        dst.tracks
            .insert(id.clone(), manifest.tracks[id].clone());
        if let Some(g) = manifest.descriptions.get(id) {
            dst.descriptions.insert(id.clone(), g.clone());
        }
    }
    Ok((train, val))
}
