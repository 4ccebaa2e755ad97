#![allow(clippy::field_reassign_with_default)]

use std::path::Path;

use svg_core::config::{ExperimentConfig, Mode};
use svg_core::data::{SmMnist, Split};
use svg_core::models::Component;
use svg_core::training::*;

fn config(mode: Mode) -> ExperimentConfig {
    let mut c = ExperimentConfig::default();
    c.seed = 31;
    c.data.mnist_dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../data/mnist-sample");
    c.model.mode = mode;
    c.model.channels = vec![2, 4, 4];
    c.model.embed_dim = 6;
    c.model.predictor_out = 6;
    c.model.latent_dim = 2;
    c.model.predictor_cells = 8;
    c.model.posterior_cells = 8;
    c.model.prior_cells = 8;
    c.train.batch_size = 2;
    c.train.seq_len = 6;
    c.train.context = 2;
    c
}

fn data(c: &ExperimentConfig) -> SmMnist {
    SmMnist::load(&c.data, Split::Train).unwrap()
}

fn run(tr: &mut Trainer, data: &SmMnist, until: u64) -> Vec<String> {
    let src = OnTheFly {
        data,
        seed: tr.config.seed,
        batch_size: tr.config.train.batch_size,
        seq_len: tr.config.train.seq_len,
    };
    let mut rows = Vec::new();
    tr.train(&src, until, |_, m| {
        // wallclock is the one column allowed to differ between runs
        let mut cols: Vec<&str> = Vec::new();
        let row = m.csv_row();
        cols.extend(row.split(','));
        cols.remove(4);
        rows.push(cols.join(","));
        Ok(())
    })
    .unwrap();
    rows
}

#[test]
fn resumed_training_is_bit_identical() {
    for mode in [Mode::Lp, Mode::Deterministic] {
        let c = config(mode);
        let d = data(&c);
        let mut straight = Trainer::new(c.clone()).unwrap();
        let all = run(&mut straight, &d, 20);

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ck.svgc");
        let mut first = Trainer::new(c).unwrap();
        let mut rows = run(&mut first, &d, 10);
        save_checkpoint(&first, &path).unwrap();
        drop(first);
        let mut resumed = load_checkpoint(&path).unwrap();
        assert_eq!(resumed.step, 10);
        rows.extend(run(&mut resumed, &d, 20));

        assert_eq!(rows, all, "{}", mode.name());
        assert_eq!(checkpoint_bytes(&resumed), checkpoint_bytes(&straight));
    }
}

#[test]
fn checkpoint_round_trip_is_byte_identical() {
    let c = config(Mode::Fp);
    let mut tr = Trainer::new(c.clone()).unwrap();
    run(&mut tr, &data(&c), 3);
    let bytes = checkpoint_bytes(&tr);
    let back = checkpoint_from_bytes(&bytes).unwrap();
    assert_eq!(checkpoint_bytes(&back), bytes);
    assert_eq!(back.params, tr.params);
    assert_eq!(back.adam, tr.adam);
    assert_eq!(back.config, tr.config);
}

#[test]
fn damaged_checkpoints_are_rejected() {
    let tr = Trainer::new(config(Mode::Lp)).unwrap();
    let bytes = checkpoint_bytes(&tr);
    for cut in [0, 10, bytes.len() / 2, bytes.len() - 1] {
        assert!(checkpoint_from_bytes(&bytes[..cut]).is_err(), "cut at {cut}");
    }
    let mut flipped = bytes.clone();
    flipped[bytes.len() / 2] ^= 1;
    let msg = checkpoint_from_bytes(&flipped).unwrap_err().to_string();
    assert!(msg.contains("checksum"), "{msg}");
    let mut wrong = bytes;
    wrong[0] = b'X';
    assert!(checkpoint_from_bytes(&wrong).is_err());
}

#[test]
fn zero_steps_checkpoint_is_the_seeded_init() {
    let c = config(Mode::Lp);
    let mut tr = Trainer::new(c.clone()).unwrap();
    run(&mut tr, &data(&c), 0);
    let fresh = Trainer::new(c).unwrap();
    assert_eq!(tr.step, 0);
    assert_eq!(checkpoint_bytes(&tr), checkpoint_bytes(&fresh));
    assert!(tr.adam.m.iter().all(|m| m.data().iter().all(|&v| v == 0.0)));
}

#[test]
fn fp_and_lp_checkpoints_differ_by_the_prior() {
    let fp = Trainer::new(config(Mode::Fp)).unwrap();
    let lp = Trainer::new(config(Mode::Lp)).unwrap();
    let det = Trainer::new(config(Mode::Deterministic)).unwrap();
    assert_eq!(
        present_components(&lp),
        vec![Component::Encoder, Component::Decoder, Component::Predictor, Component::Posterior, Component::Prior]
    );
    assert_eq!(&present_components(&lp)[..4], &present_components(&fp)[..]);
    assert_eq!(present_components(&det).len(), 3);
    assert_eq!(
        lp.params.num_elements() - fp.params.num_elements(),
        lp.params.prior.as_ref().unwrap().num_elements()
    );
}

#[test]
fn training_reduces_loss_on_a_fixed_batch() {
    let c = config(Mode::Fp);
    let d = data(&c);
    let seqs = d.sequences(c.seed, svg_core::rng::Domain::TrainData, 0, 2, 6).unwrap();
    let batch = FixedBatch(svg_core::data::batch_frames(&seqs).unwrap());
    let mut tr = Trainer::new(c).unwrap();
    let mut recon = Vec::new();
    tr.train(&batch, 60, |_, m| {
        recon.push(m.report.recon());
        Ok(())
    })
    .unwrap();
    let head: f64 = recon[..5].iter().sum();
    let tail: f64 = recon[55..].iter().sum();
    assert!(tail < 0.8 * head, "{head} -> {tail}");
}
