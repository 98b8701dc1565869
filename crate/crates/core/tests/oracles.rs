// SPDX-License-Identifier: MIT OR Apache-2.0

//! Worked examples for every public operation, checked against closed-form
//! or brute-force answers.

mod common;

use std::collections::BTreeSet;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use common::{bytes_of, pooled_tape, random_tape, random_vec};
use trus::grid::{Cell, CellGrid, GridShape};
use trus::hook::SteeringHook;
use trus::prototype::{build_prototype, load_prototype, save_prototype, sidecar_path};
use trus::registry::{OptOutPool, OptOutRecord, RegistryStore};
use trus::selection::{compute_profile, select_all_layers, select_mask, Band, InterventionMask, SimilarityProfile};
use trus::steering::{apply_steering, compute_steering_grid, compute_steering_vector, SteeringGrid};
use trus::tape::{read_tape, write_tape, ActivationTape, TapeHeader};
use trus::tensor::{cosine_sim, l2_normalize, pool_frames, squared_norm, ChannelVector, FrameMatrix};
use trus::toy::{content_error_vectors, identity_similarity, ToyConfig, ToyModel, ToySpeaker, DEFAULT_CHANNELS};
use trus::TrusError;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

mod tensor {
    use super::*;

    #[test]
    fn cosine_examples() {
        assert_eq!(cosine_sim(&[1.0, 0.0], &[1.0, 0.0]).unwrap(), 1.0);
        assert_eq!(cosine_sim(&[1.0, 0.0], &[0.0, 1.0]).unwrap(), 0.0);
        assert!((cosine_sim(&[1.0, 1.0], &[1.0, 0.0]).unwrap() - std::f64::consts::FRAC_1_SQRT_2).abs() < 1e-6);
        assert!(matches!(
            cosine_sim(&[0.0, 0.0], &[1.0, 0.0]),
            Err(TrusError::DegenerateVector(_))
        ));
    }

    #[test]
    fn pooling_examples() {
        let m = FrameMatrix::from_rows(&[vec![1.0, 3.0], vec![3.0, 1.0]]).unwrap();
        assert_eq!(pool_frames(&m).unwrap().as_slice(), &[2.0, 2.0]);
        let single = FrameMatrix::from_rows(&[vec![5.0, 7.0]]).unwrap();
        assert_eq!(pool_frames(&single).unwrap().as_slice(), &[5.0, 7.0]);
        assert!(matches!(
            pool_frames(&FrameMatrix::zeros(0, 3)),
            Err(TrusError::EmptyMatrix)
        ));
    }

    #[test]
    fn pooling_matches_summation_oracle() {
        let mut r = rng(1);
        let data = random_vec(&mut r, 32, 5.0);
        let m = FrameMatrix::new(4, 8, data.clone()).unwrap();
        let pooled = pool_frames(&m).unwrap();
        for c in 0..8 {
            let mut s = 0.0f64;
            for f in 0..4 {
                s += f64::from(data[f * 8 + c]);
            }
            assert!((f64::from(pooled[c]) - s / 4.0).abs() < 1e-6);
        }
    }

    #[test]
    fn normalize_examples() {
        assert_eq!(l2_normalize(&[3.0, 4.0]).unwrap().as_slice(), &[0.6, 0.8]);
        assert!(matches!(l2_normalize(&[0.0, 0.0]), Err(TrusError::DegenerateVector(_))));
        let v = random_vec(&mut rng(2), 64, 3.0);
        let n = l2_normalize(&v).unwrap();
        assert!((squared_norm(&n).sqrt() - 1.0).abs() < 1e-6);
        assert!((cosine_sim(&n, &v).unwrap() - 1.0).abs() < 1e-6);
    }
}

mod tape_io {
    use super::*;

    #[test]
    fn single_cell_payload_is_little_endian() {
        let tape = pooled_tape("s", GridShape::new(1, 1), |_| vec![1.0, 2.0]);
        let bytes = bytes_of(&tape);
        let payload = &bytes[bytes.len() - 8..];
        let mut want = 1.0f32.to_le_bytes().to_vec();
        want.extend_from_slice(&2.0f32.to_le_bytes());
        assert_eq!(payload, &want[..]);
        assert_eq!(bytes.len(), tape.header().header_bytes() + 8);
    }

    #[test]
    fn byte_count_is_header_plus_payload() {
        let tape = random_tape(&mut rng(3), "abc", GridShape::new(2, 3), 4, 5, false);
        let written = write_tape(&tape, &mut Vec::new()).unwrap();
        assert_eq!(tape.header().payload_bytes(), 480);
        assert_eq!(written, tape.header().header_bytes() as u64 + 480);
        assert_eq!(written, tape.header().tape_bytes());
    }

    #[test]
    fn round_trip_and_failure_modes() {
        let tape = random_tape(&mut rng(4), "spk", GridShape::new(3, 2), 5, 3, false);
        let bytes = bytes_of(&tape);
        let back = read_tape(&mut bytes.as_slice()).unwrap();
        assert_eq!(back, tape);
        assert_eq!(bytes_of(&back), bytes);

        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(read_tape(&mut bad.as_slice()), Err(TrusError::BadMagic(_))));
        let short = &bytes[..bytes.len() - 1];
        assert!(matches!(
            read_tape(&mut &short[..]),
            Err(TrusError::TruncatedPayload(_))
        ));
    }

    #[test]
    fn pooled_header_requires_one_frame() {
        let h = TapeHeader::new("x", 1, 1, 2, 3, true);
        assert!(h.validate().is_err());
    }
}

mod prototype {
    use super::*;

    #[test]
    fn two_point_mean_and_identity_case() {
        let shape = GridShape::new(2, 2);
        let a = pooled_tape("a", shape, |_| vec![1.0, 0.0]);
        let b = pooled_tape("b", shape, |_| vec![0.0, 1.0]);
        let p = build_prototype([&a, &b]).unwrap();
        for (_, v) in p.grid().iter() {
            assert_eq!(v.as_slice(), &[0.5, 0.5]);
        }
        let single = build_prototype([&a]).unwrap();
        assert_eq!(single.grid(), &a.pooled_grid().unwrap());
    }

    #[test]
    fn thirty_tapes_match_sum_oracle() {
        let mut r = rng(5);
        let shape = GridShape::new(4, 8);
        let tapes: Vec<ActivationTape> = (0..30)
            .map(|i| random_tape(&mut r, &format!("s{i}"), shape, 16, 3, false))
            .collect();
        let p = build_prototype(&tapes).unwrap();
        for cell in shape.cells() {
            for ch in 0..16 {
                let mut s = 0.0f64;
                for t in &tapes {
                    let m = t.cell(cell).unwrap();
                    let col: f64 = m.iter_rows().map(|row| f64::from(row[ch])).sum::<f64>() / m.rows() as f64;
                    s += col;
                }
                assert!((f64::from(p.cell(cell).unwrap()[ch]) - s / 30.0).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn preconditions() {
        let shape = GridShape::new(1, 2);
        let a = pooled_tape("a", shape, |_| vec![1.0]);
        let a2 = pooled_tape("a", shape, |_| vec![2.0]);
        let wide = pooled_tape("w", shape, |_| vec![1.0, 2.0]);
        assert!(matches!(
            build_prototype([&a, &a2]),
            Err(TrusError::DuplicateSpeaker(_))
        ));
        assert!(matches!(build_prototype([&a, &wide]), Err(TrusError::ShapeMismatch(_))));
        assert!(matches!(
            build_prototype(Vec::<&ActivationTape>::new()),
            Err(TrusError::EmptyPool)
        ));
    }

    #[test]
    fn persistence() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("p.tape");
        let tapes: Vec<_> = (0..3)
            .map(|i| random_tape(&mut rng(6 + i), &format!("r{i}"), GridShape::new(2, 3), 4, 2, false))
            .collect();
        let p = build_prototype(&tapes).unwrap();
        save_prototype(&p, &path).unwrap();
        assert_eq!(load_prototype(&path).unwrap(), p);

        std::fs::write(sidecar_path(&path), r#"{"n": 2, "source_ids": ["r0", "r1", "r2"]}"#).unwrap();
        assert!(matches!(load_prototype(&path), Err(TrusError::Validation(_))));
        std::fs::remove_file(sidecar_path(&path)).unwrap();
        assert!(matches!(load_prototype(&path), Err(TrusError::MissingMetadata(_))));
    }
}

mod steering {
    use super::*;

    #[test]
    fn direction_examples() {
        assert_eq!(
            compute_steering_vector(&[2.0, 0.0], &[0.0, 0.0]).unwrap().as_slice(),
            &[1.0, 0.0]
        );
        assert!(matches!(
            compute_steering_vector(&[1.0, 2.0], &[1.0, 2.0]),
            Err(TrusError::DegenerateDirection)
        ));
        let mut r = rng(7);
        let (x, p) = (random_vec(&mut r, 16, 1.0), random_vec(&mut r, 16, 1.0));
        let s = compute_steering_vector(&x, &p).unwrap();
        let diff: Vec<f32> = x.iter().zip(&p).map(|(a, b)| a - b).collect();
        assert!((squared_norm(&s).sqrt() - 1.0).abs() < 1e-6);
        assert!((cosine_sim(&s, &diff).unwrap() - 1.0).abs() < 1e-6);
    }

    #[test]
    fn grid_examples() {
        let shape = GridShape::new(2, 2);
        let t = pooled_tape("t", shape, |c| vec![c.layer as f32, c.step as f32, 1.0]);
        let same = build_prototype([&t]).unwrap();
        assert_eq!(compute_steering_grid(&t, &same, 1.2).unwrap().present_count(), 0);

        let other = pooled_tape("o", shape, |c| vec![-(c.layer as f32), 2.0 * c.step as f32, 0.5]);
        let grid = compute_steering_grid(&other, &same, 1.2).unwrap();
        assert_eq!(grid.present_count(), 4);
        for cell in shape.cells() {
            let s = grid.direction(cell).unwrap();
            let want = compute_steering_vector(&other.pooled_cell(cell).unwrap(), same.cell(cell).unwrap()).unwrap();
            assert_eq!(s, &want);
        }
        for alpha in [0.0, -1.0] {
            assert!(matches!(
                compute_steering_grid(&other, &same, alpha),
                Err(TrusError::InvalidStrength(_))
            ));
        }
    }

    #[test]
    fn projection_examples() {
        let x = FrameMatrix::from_rows(&[vec![3.0, 4.0]]).unwrap();
        let s = [1.0, 0.0];
        assert_eq!(apply_steering(&x, &s, 1.0).unwrap().as_slice(), &[0.0, 4.0]);
        let over = apply_steering(&x, &s, 1.2).unwrap();
        assert!((over.as_slice()[0] + 0.6).abs() < 1e-6 && over.as_slice()[1] == 4.0);
        assert_eq!(apply_steering(&x, &s, 0.0).unwrap(), x);
        assert!(matches!(
            apply_steering(&x, &[2.0, 0.0], 1.0),
            Err(TrusError::NonUnitDirection(_))
        ));
        assert!(matches!(
            apply_steering(&x, &[1.0, 0.0, 0.0], 1.0),
            Err(TrusError::ShapeMismatch(_))
        ));
    }

    #[test]
    fn absent_cell_hook_is_noop() {
        use trus::hook::ActivationHook;
        let shape = GridShape::new(1, 2);
        let grid = SteeringGrid::new(
            CellGrid::from_vec(shape, vec![None, Some(ChannelVector::new(vec![1.0, 0.0]))]),
            1.0,
        )
        .unwrap();
        let mask = InterventionMask::new(shape.cells().collect(), BTreeSet::from([1])).unwrap();
        let mut hook = SteeringHook::new(&grid, &mask);
        let x = FrameMatrix::from_rows(&[vec![3.0, 4.0]]).unwrap();
        assert!(hook.intervene(Cell::new(1, 2), &x).unwrap().is_none());
        assert!(hook.intervene(Cell::new(1, 1), &x).unwrap().is_some());
    }
}

mod selection {
    use super::*;

    /// Profile whose layer `l` is constant at `means[l-1]` except for an
    /// optional perturbation of step 1 and 2.
    fn profile(means: &[f64], steps: usize, k: f64) -> SimilarityProfile {
        let shape = GridShape::new(means.len(), steps);
        SimilarityProfile::from_similarities(CellGrid::from_fn(shape, |c| Some(means[c.layer - 1])), k).unwrap()
    }

    #[test]
    fn worked_statistics() {
        let p = profile(&[0.2, 0.4, 0.6], 2, 1.0);
        assert!((p.mu() - 0.4).abs() < 1e-12);
        assert!((p.sigma() - 0.163_299_32).abs() < 1e-6);
        assert!((p.tau() - 0.563_299_32).abs() < 1e-6);
        let one = profile(&[0.7], 3, 1.0);
        assert_eq!(one.sigma(), 0.0);
        assert_eq!(one.tau(), 0.7);
    }

    #[test]
    fn self_similarity() {
        let t = pooled_tape("t", GridShape::new(3, 4), |c| {
            vec![1.0, c.layer as f32, -(c.step as f32)]
        });
        let p = compute_profile(&t, &build_prototype([&t]).unwrap(), 1.0).unwrap();
        assert!(p
            .similarities()
            .values()
            .iter()
            .all(|c| (c.unwrap() - 1.0).abs() < 1e-12));
        assert!(p.sigma() < 1e-12);
    }

    /// Layer means [0.2, 0.4, 0.6] with one dip per layer so that a
    /// selected layer has exactly one selected step.
    fn dipped(k: f64) -> SimilarityProfile {
        let shape = GridShape::new(3, 2);
        let vals = [[0.1, 0.3], [0.3, 0.5], [0.5, 0.7]];
        SimilarityProfile::from_similarities(CellGrid::from_fn(shape, |c| Some(vals[c.layer - 1][c.step - 1])), k)
            .unwrap()
    }

    #[test]
    fn layer_sets_follow_tau() {
        let layers = |k| {
            select_mask(&dipped(k))
                .selected_layers()
                .iter()
                .copied()
                .collect::<Vec<_>>()
        };
        assert_eq!(layers(1.0), vec![1, 2]);
        assert_eq!(layers(0.0), vec![1]);
        // the dip at step 1 is the only cell below its layer mean
        let m = select_mask(&dipped(1.0));
        assert_eq!(
            m.cells().iter().copied().collect::<Vec<_>>(),
            vec![Cell::new(1, 1), Cell::new(2, 1)]
        );
    }

    #[test]
    fn strict_step_filter() {
        let shape = GridShape::new(2, 2);
        let vals = [[0.1, 0.5], [0.9, 0.9]];
        let p = SimilarityProfile::from_similarities(
            CellGrid::from_fn(shape, |c| Some(vals[c.layer - 1][2 - c.step])),
            0.0,
        )
        .unwrap();
        assert_eq!(
            select_mask(&p).cells().iter().copied().collect::<Vec<_>>(),
            vec![Cell::new(1, 2)]
        );
    }

    #[test]
    fn uniform_means_select_nothing() {
        let p = profile(&[0.5, 0.5, 0.5], 4, 1.0);
        assert_eq!((p.sigma(), p.tau()), (0.0, 0.5));
        assert!(select_mask(&p).is_empty() && select_mask(&p).selected_layers().is_empty());
    }

    #[test]
    fn bands_are_nested_and_all_covers_every_dipped_layer() {
        let p = dipped(1.0);
        let masks: Vec<InterventionMask> = Band::ALL.iter().map(|b| b.mask(&p)).collect();
        for w in masks.windows(2) {
            assert!(w[0].is_subset(&w[1]));
        }
        let all = select_all_layers(&p);
        assert_eq!(all.selected_layers().iter().copied().collect::<Vec<_>>(), vec![1, 2, 3]);
        assert_eq!(all.len(), 3);
    }
}

mod registry {
    use super::*;

    fn setup() -> (trus::IdPrototype, Vec<ActivationTape>) {
        let shape = GridShape::new(3, 4);
        let mut r = rng(11);
        let retain: Vec<_> = (0..5)
            .map(|i| random_tape(&mut r, &format!("r{i}"), shape, 8, 2, true))
            .collect();
        let proto = build_prototype(&retain).unwrap();
        let opt: Vec<_> = (0..6)
            .map(|i| random_tape(&mut r, &format!("o{i}"), shape, 8, 2, true))
            .collect();
        (proto, opt)
    }

    #[test]
    fn register_lookup_and_versions() {
        let dir = tempfile::tempdir().unwrap();
        let (proto, opt) = setup();
        let mut reg = RegistryStore::open_or_create(dir.path()).unwrap();
        let a = reg.register_optout("a", &opt[0], &proto, 1.0, 1.2).unwrap();
        let b = reg.register_optout("b", &opt[1], &proto, 1.0, 1.2).unwrap();
        assert_eq!(reg.version(), 2);
        assert_eq!(reg.lookup("a"), Some(a.record()));
        assert_eq!(reg.lookup("b"), Some(b.record()));
        let reopened = RegistryStore::open(dir.path()).unwrap();
        assert_eq!(reopened.lookup("a"), Some(a.record()));
    }

    #[test]
    fn prototype_twin_registers_with_nothing_to_steer() {
        let dir = tempfile::tempdir().unwrap();
        let t = pooled_tape("t", GridShape::new(2, 2), |c| vec![c.layer as f32, 1.0]);
        let proto = build_prototype([&t]).unwrap();
        let mut reg = RegistryStore::open_or_create(dir.path()).unwrap();
        let rec = reg.register_optout("t", &t, &proto, 1.0, 1.2).unwrap();
        assert!(rec.record().mask.is_empty());
        assert_eq!(rec.record().steering.present_count(), 0);
    }

    #[test]
    fn matching_examples() {
        let (proto, opt) = setup();
        let mut pool = OptOutPool::default();
        for (i, t) in opt.iter().enumerate() {
            pool.insert(OptOutRecord::build(&format!("o{i}"), t, &proto, 1.0, 1.2).unwrap());
        }
        assert_eq!(pool.match_reference(&opt[2]).unwrap().speaker_id, "o2");

        // 1% relative noise keeps the match, and agrees with brute force
        let mut r = rng(12);
        let noisy = {
            let grid = opt[3].pooled_grid().unwrap().map(|_, v| {
                let n = v.norm() as f32 * 0.01 / (v.len() as f32).sqrt();
                ChannelVector::new(v.iter().map(|x| x + r.random_range(-n..n)).collect())
            });
            ActivationTape::from_pooled("noisy", grid).unwrap()
        };
        let fp = trus::registry::fingerprint(&noisy).unwrap();
        let brute = pool
            .records()
            .max_by(|a, b| {
                cosine_sim(&fp, &a.fingerprint)
                    .unwrap()
                    .total_cmp(&cosine_sim(&fp, &b.fingerprint).unwrap())
            })
            .unwrap();
        let hit = pool.match_reference(&noisy).unwrap();
        assert_eq!(hit.speaker_id, "o3");
        assert_eq!(hit.speaker_id, brute.speaker_id);

        // a fingerprint orthogonal to every record matches nothing
        let mut lone = OptOutPool::default();
        let x = pooled_tape("x", GridShape::new(1, 1), |_| vec![1.0, 0.0]);
        let y = pooled_tape("y", GridShape::new(1, 1), |_| vec![0.0, 1.0]);
        let p = build_prototype([&y]).unwrap();
        lone.insert(OptOutRecord::build("x", &x, &p, 1.0, 1.2).unwrap());
        assert!(lone.match_reference(&y).is_none());
    }

    #[test]
    fn remove_semantics() {
        let dir = tempfile::tempdir().unwrap();
        let (proto, opt) = setup();
        let mut reg = RegistryStore::open_or_create(dir.path()).unwrap();
        reg.register_optout("a", &opt[0], &proto, 1.0, 1.2).unwrap();
        assert!(reg.remove_optout("a").unwrap());
        assert!(!reg.remove_optout("a").unwrap());
        assert!(reg.match_reference(&opt[0]).is_none());
    }
}

mod toy_model {
    use super::*;
    use trus::hook::ActivationHook;
    use trus::steering::apply_steering as steer;

    fn model() -> ToyModel {
        ToyModel::new(ToyConfig::default()).unwrap()
    }

    #[test]
    fn determinism() {
        let m = model();
        let s = ToySpeaker::from_id("alice", DEFAULT_CHANNELS);
        let a = m.synthesize(&s, 3, None).unwrap();
        let b = m.synthesize(&s, 3, None).unwrap();
        assert_eq!(a.tape, b.tape);
        assert_eq!(a.output_embedding, b.output_embedding);
    }

    #[test]
    fn zero_gain_erases_speaker() {
        let mut cfg = ToyConfig::default();
        cfg.identity_gain = vec![0.0; cfg.layers];
        let m = ToyModel::new(cfg).unwrap();
        let a = m
            .synthesize(&ToySpeaker::from_id("a", DEFAULT_CHANNELS), 9, None)
            .unwrap();
        let b = m
            .synthesize(&ToySpeaker::from_id("b", DEFAULT_CHANNELS), 9, None)
            .unwrap();
        assert_eq!(a.output_embedding, b.output_embedding);
    }

    #[test]
    fn removing_identity_everywhere_lowers_similarity() {
        let m = model();
        let s = ToySpeaker::from_id("carol", DEFAULT_CHANNELS);
        let base = m.synthesize(&s, 4, None).unwrap();
        let id = s.identity.clone();
        let mut hook = |_: Cell, x: &FrameMatrix| steer(x, &id, 1.0).map(Some);
        let steered = m.synthesize(&s, 4, Some(&mut hook as &mut dyn ActivationHook)).unwrap();
        assert_eq!(steered.steered_cells_applied.len(), 8 * 16);
        assert!(identity_similarity(&steered, &s).unwrap() < identity_similarity(&base, &s).unwrap());
    }

    #[test]
    fn similarity_prefers_own_identity() {
        let m = model();
        let s = ToySpeaker::from_id("dan", DEFAULT_CHANNELS);
        let other = ToySpeaker::from_id("erin", DEFAULT_CHANNELS);
        let out = m.synthesize(&s, 5, None).unwrap();
        assert!(identity_similarity(&out, &s).unwrap() > identity_similarity(&out, &other).unwrap());
    }

    #[test]
    fn content_error_examples() {
        let id = l2_normalize(&[1.0, 2.0, 2.0]).unwrap();
        let a = [0.5f32, -1.0, 3.0];
        assert_eq!(content_error_vectors(&a, &a, &id).unwrap(), 0.0);
        let b: Vec<f32> = a.iter().zip(id.iter()).map(|(x, u)| x + 4.0 * u).collect();
        assert!(content_error_vectors(&a, &b, &id).unwrap() < 1e-6);
    }

    #[test]
    fn similarity_extremes() {
        let id = ChannelVector::new(vec![0.0, 1.0]);
        assert_eq!(cosine_sim(&id, &id).unwrap(), 1.0);
        assert_eq!(cosine_sim(&[1.0, 0.0], &id).unwrap(), 0.0);
    }
}
