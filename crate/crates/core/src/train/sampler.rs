//! Batch sampling: distinct classes per batch so every off-diagonal InfoNCE
//! pair is a true negative.

use super::data::TrainData;
use super::TrainError;
use crate::image::Image;
use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use std::collections::BTreeMap;

/// One training triple drawn from a track.
pub struct TrainSample {
    pub track_id: String,
    pub class_index: usize,
    pub crop: Image,
    pub motion: Image,
    pub sentence: String,
}

/// Draw `m` samples from distinct classes: for each class, a uniformly random
/// member track, a uniformly random frame crop, the track's motion image, and
/// a uniformly random sentence from its pool.
pub fn sample_batch(
    data: &TrainData,
    m: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<TrainSample>, TrainError> {
    if m == 0 {
        return Err(TrainError::BadBatchSize {
            batch_size: 0,
            available: data.num_classes,
        });
    }
    if m > data.num_classes {
        return Err(TrainError::BadBatchSize {
            batch_size: m,
            available: data.num_classes,
        });
    }
    let mut by_class: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, t) in data.tracks.iter().enumerate() {
        by_class.entry(t.class_index).or_default().push(i);
    }
    let mut classes: Vec<usize> = by_class.keys().copied().collect();
    classes.shuffle(rng);
    classes.truncate(m);

    let mut out = Vec::with_capacity(m);
    for class in classes {
        let members = &by_class[&class];
        let track = &data.tracks[members[rng.random_range(0..members.len())]];
        let crop = track.crops[rng.random_range(0..track.crops.len())].clone();
        let sentence = track.sentences[rng.random_range(0..track.sentences.len())].clone();
        out.push(TrainSample {
            track_id: track.track_id.clone(),
            class_index: track.class_index,
            crop,
            motion: track.motion.clone(),
            sentence,
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::train::data::PreparedTrack;
    use rand::SeedableRng;

    fn fake_data(n_tracks: usize, crops_per_track: usize) -> TrainData {
        let tracks = (0..n_tracks)
            .map(|i| PreparedTrack {
                track_id: format!("t{i:03}"),
                class_index: i,
                crops: (0..crops_per_track).map(|_| Image::zeros(4, 4)).collect(),
                motion: Image::zeros(4, 4),
                sentences: vec![
                    format!("s0 of {i}"),
                    format!("s1 of {i}"),
                    format!("s2 of {i}"),
                ],
            })
            .collect();
        TrainData {
            tracks,
            num_classes: n_tracks,
        }
    }

    #[test]
    fn full_batch_covers_every_track_exactly_once() {
        let data = fake_data(6, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let batch = sample_batch(&data, 6, &mut rng).unwrap();
        let mut ids: Vec<_> = batch.iter().map(|s| s.track_id.clone()).collect();
        ids.sort();
        ids.dedup();
        assert_eq!(ids.len(), 6);
    }

    #[test]
    fn class_indices_are_distinct_within_a_batch() {
        let data = fake_data(8, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..50 {
            let batch = sample_batch(&data, 5, &mut rng).unwrap();
            let mut classes: Vec<_> = batch.iter().map(|s| s.class_index).collect();
            classes.sort();
            classes.dedup();
            assert_eq!(classes.len(), 5);
        }
    }

    #[test]
    fn same_rng_state_gives_identical_batches() {
        let data = fake_data(8, 3);
        let batch = |seed| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            sample_batch(&data, 4, &mut rng)
                .unwrap()
                .iter()
                .map(|s| (s.track_id.clone(), s.sentence.clone()))
                .collect::<Vec<_>>()
        };
        assert_eq!(batch(7), batch(7));
    }

    #[test]
    fn oversized_batch_is_rejected() {
        let data = fake_data(3, 1);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        assert!(matches!(
            sample_batch(&data, 4, &mut rng),
            Err(TrainError::BadBatchSize { .. })
        ));
    }

    #[test]
    fn sentences_are_sampled_uniformly() {
        // 1000 batches over 8 tracks: each of the 3 sentences should appear
        // with frequency 1/3 +- 0.05.
        let data = fake_data(8, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut counts = vec![[0usize; 3]; 8];
        let mut totals = vec![0usize; 8];
        for _ in 0..1000 {
            let batch = sample_batch(&data, 8, &mut rng).unwrap();
            for s in batch {
                let track: usize = s.track_id[1..].parse().unwrap();
                let sentence_idx: usize = s.sentence[1..2].parse().unwrap();
                counts[track][sentence_idx] += 1;
                totals[track] += 1;
            }
        }
        for t in 0..8 {
            for k in 0..3 {
                let freq = counts[t][k] as f64 / totals[t] as f64;
                assert!(
                    (freq - 1.0 / 3.0).abs() <= 0.05,
                    "track {t} sentence {k}: frequency {freq}"
                );
            }
        }
    }
}
