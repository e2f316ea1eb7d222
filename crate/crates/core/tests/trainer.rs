//! Optimizer, batching, schedule and checkpoint behaviour.

mod common;

use common::*;
use unseen_nmt::model::{Gradients, Session};
use unseen_nmt::numerics::Mode;
use unseen_nmt::parallel::Parallelism;
use unseen_nmt::trainer::*;

fn first_params(model: &unseen_nmt::model::Seq2Seq) -> Vec<Vec<f64>> {
    model.params().map(|(_, t)| t.data().to_vec()).collect()
}

#[test]
fn first_adam_step_moves_by_the_learning_rate() {
    let mut model = gradcheck_model(1, true);
    model.fill_params(1.0);
    let cfg = TrainConfig::default();
    let mut state = OptimizerState::new(&model, &cfg);
    let mut g = Gradients::zeros(&model);
    g.dense.iter_mut().flatten().for_each(|x| *x = 0.5);
    adam_step(&mut model, &g, &mut state).unwrap();
    for (_, t) in model.params() {
        for &x in t.data() {
            assert!((x - 0.9998).abs() < 1e-9, "{x}");
        }
    }
    assert_eq!(state.step, 1);
}

#[test]
fn missing_row_gradient_counts_as_zero() {
    let mut model = gradcheck_model(2, true);
    let before = model.embeddings().row(7).to_vec();
    let cfg = TrainConfig::default();
    let mut state = OptimizerState::new(&model, &cfg);
    let zero = Gradients::zeros(&model);
    adam_step(&mut model, &zero, &mut state).unwrap();
    assert_eq!(model.embeddings().row(7), &before[..]);
}

#[test]
fn single_pair_batch_loss_is_the_sentence_mean() {
    let setup = copy_setup(20, 5, 3);
    let pair = &setup.train[4];
    let (_, loss, tokens) = batch_gradients(&setup.model, &setup.train, &[4], 1, 0, Parallelism::Sequential).unwrap();
    let mut s = Session::new(&setup.model, Mode::Infer, false, 0);
    let l = s.forward_loss(&pair.source, &pair.target).unwrap();
    assert!((loss / tokens as f64 - s.tape.value(l)[0]).abs() < 1e-12);
    assert_eq!(tokens, pair.target.len() - 1);
}

#[test]
fn frozen_rows_never_move_and_trainable_rows_do() {
    let mut setup = copy_setup(64, 5, 3);
    let before = setup.model.embeddings().clone();
    let cfg = TrainConfig { max_epochs: 2, ..copy_train_config() };
    let mut trainer = Trainer::new(&setup.model, cfg).unwrap();
    trainer.fit(&mut setup.model, &setup.train, None, Parallelism::Rayon, |_, _, _| Ok(())).unwrap();
    let after = setup.model.embeddings();
    let mut moved = 0;
    for id in 0..before.rows() {
        if before.is_trainable(id) {
            moved += usize::from(before.row(id) != after.row(id));
        } else {
            assert_eq!(before.row(id), after.row(id), "frozen row {id} changed");
        }
    }
    assert!(moved > 0);
}

#[test]
fn parallel_and_sequential_epochs_agree_bitwise() {
    let setup = copy_setup(48, 5, 3);
    let cfg = TrainConfig { max_epochs: 1, ..copy_train_config() };
    let run = |par| {
        let mut model = setup.model.clone();
        let mut trainer = Trainer::new(&model, cfg.clone()).unwrap();
        trainer.run_epoch(&mut model, &setup.train, None, par).unwrap();
        first_params(&model)
    };
    assert_eq!(run(Parallelism::Sequential), run(Parallelism::Rayon));
}

#[test]
fn resuming_from_a_checkpoint_matches_uninterrupted_training() {
    let setup = copy_setup(40, 5, 3);
    let cfg = TrainConfig { max_epochs: 2, ..copy_train_config() };
    let mut straight = setup.model.clone();
    let mut t = Trainer::new(&straight, cfg.clone()).unwrap();
    t.run_epoch(&mut straight, &setup.train, None, Parallelism::Rayon).unwrap();
    t.run_epoch(&mut straight, &setup.train, None, Parallelism::Rayon).unwrap();

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("ck.json");
    let mut model = setup.model.clone();
    let mut t1 = Trainer::new(&model, cfg).unwrap();
    t1.run_epoch(&mut model, &setup.train, None, Parallelism::Rayon).unwrap();
    Checkpoint::capture(&model, &t1, &setup.vocab).save(&path).unwrap();
    let (mut resumed, mut t2, vocab) = Checkpoint::load(&path, Some(setup.vocab.len())).unwrap().restore().unwrap();
    assert_eq!(vocab, setup.vocab);
    t2.run_epoch(&mut resumed, &setup.train, None, Parallelism::Rayon).unwrap();

    assert_eq!(first_params(&resumed), first_params(&straight));
    assert_eq!(t2.optimizer, t.optimizer);
    assert_eq!(t2.schedule, t.schedule);
}

#[test]
fn checkpoint_with_other_vocab_size_is_rejected() {
    let setup = copy_setup(10, 5, 3);
    let t = Trainer::new(&setup.model, copy_train_config()).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("ck.json");
    Checkpoint::capture(&setup.model, &t, &setup.vocab).save(&path).unwrap();
    let err = Checkpoint::load(&path, Some(setup.vocab.len() + 1)).unwrap_err();
    assert!(matches!(err, CheckpointError::VocabMismatch { .. }), "{err}");
}

#[test]
fn schedule_decays_and_stops_after_patience() {
    let cfg = TrainConfig { initial_lr: 0.0002, decay_factor: 0.5, patience: 3, ..Default::default() };
    let mut s = cfg.schedule();
    assert_eq!(end_of_epoch(0.10, &mut s), Decision::Continue);
    assert_eq!(end_of_epoch(0.12, &mut s), Decision::Continue);
    assert_eq!(end_of_epoch(0.11, &mut s), Decision::Decay);
    assert!((s.lr - 0.0001).abs() < 1e-15);
    assert_eq!(end_of_epoch(0.12, &mut s), Decision::Decay);
    assert_eq!(end_of_epoch(0.05, &mut s), Decision::Stop);
    assert!((s.lr - 0.000025).abs() < 1e-15);
}

#[test]
fn fixed_epoch_mode_runs_every_epoch() {
    let mut setup = copy_setup(16, 5, 3);
    let cfg = TrainConfig { max_epochs: 3, early_stopping: false, ..copy_train_config() };
    let mut trainer = Trainer::new(&setup.model, cfg).unwrap();
    let dev = |_: &unseen_nmt::model::Seq2Seq| Ok(0.0);
    let recs = trainer.fit(&mut setup.model, &setup.train, Some(&dev), Parallelism::Rayon, |_, _, _| Ok(())).unwrap();
    assert_eq!(recs.len(), 3);
    assert!(recs.iter().all(|r| r.lr == 0.005));
    assert_eq!(recs.last().unwrap().decision, Decision::Stop);
}
