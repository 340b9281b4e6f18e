use super::*;
use crate::corpus::{generate_dataset, Instance, Operator, Style, TaskConfig, TeacherProfile, Vocabulary};
use crate::model::ModelConfig;

fn model(seed: u64) -> StudentModel {
    StudentModel::new(ModelConfig {
        n_layers: 1,
        n_heads: 2,
        d_model: 16,
        d_ff: 32,
        vocab_size: Vocabulary::standard().len(),
        max_seq_len: 96,
        adapter_rank: 0,
        seed,
    })
    .unwrap()
}

fn task() -> TaskConfig {
    TaskConfig { min_steps: 2, max_steps: 2, operand_max: 10, modulus: 10, ops: vec![Operator::Add, Operator::Mul] }
}

fn profiles() -> Vec<TeacherProfile> {
    vec![
        TeacherProfile::new("concise", Style::Concise, 0.0),
        TeacherProfile::new("verbose", Style::Verbose, 0.0),
        TeacherProfile::new("stylized", Style::Stylized, 0.0),
        TeacherProfile::new("noisy", Style::Concise, 0.5),
    ]
}

fn data(n: usize, seed: u64) -> (Vec<Instance>, Vec<PreparedInstance>) {
    let v = Vocabulary::standard();
    let insts = generate_dataset(n, &profiles(), &task(), seed, &v).unwrap();
    let prepared = insts.iter().map(|i| PreparedInstance::new(i, &v).unwrap()).collect();
    (insts, prepared)
}

fn cfg(epochs: usize, mode: TrainMode) -> TrainerConfig {
    TrainerConfig { epochs, mode, learning_rate: 3e-3, ..Default::default() }
}

fn run(m: StudentModel, d: &[PreparedInstance], t: &TrainerConfig) -> TrainOutcome {
    train(m, d, t, &WeightingConfig::default(), &LossConfig::default(), None).unwrap()
}

#[test]
fn zero_epochs_is_identity() {
    let (_, d) = data(4, 1);
    let m = model(1);
    let out = run(m.clone(), &d, &cfg(0, TrainMode::Compact));
    assert_eq!(out.model, m);
    assert!(out.ledger.is_empty());
}

#[test]
fn single_teacher_ledger_is_one_hot() {
    let (_, d) = data(6, 2);
    let out = run(model(2), &d, &cfg(1, TrainMode::SingleTeacher("verbose".into())));
    assert_eq!(out.ledger.len(), 6 * 4);
    for r in out.ledger.rows() {
        assert_eq!(r.alpha, if r.teacher_id == "verbose" { 1.0 } else { 0.0 });
    }
}

#[test]
fn unknown_single_teacher_is_rejected() {
    let (_, d) = data(2, 2);
    let err = train(model(2), &d, &cfg(1, TrainMode::SingleTeacher("ghost".into())), &WeightingConfig::default(), &LossConfig::default(), None)
        .unwrap_err();
    assert!(err.to_string().contains("ghost"));
}

#[test]
fn direct_average_is_uniform() {
    let (_, d) = data(5, 3);
    let out = run(model(3), &d, &cfg(1, TrainMode::DirectAverage));
    assert!(out.ledger.rows().iter().all(|r| r.alpha == 0.25));
}

#[test]
fn zero_betas_degenerate_to_direct_average() {
    let (_, d) = data(5, 4);
    let w = WeightingConfig { beta1: 0.0, beta2: 0.0, beta3: 0.0, ..Default::default() };
    let compact = train(model(4), &d, &cfg(1, TrainMode::Compact), &w, &LossConfig::default(), None).unwrap();
    let avg = train(model(4), &d, &cfg(1, TrainMode::DirectAverage), &w, &LossConfig::default(), None).unwrap();
    assert_eq!(compact.model, avg.model);
    assert!(compact.ledger.rows().iter().all(|r| r.alpha == 0.25));
}

#[test]
fn same_seed_same_run() {
    let (_, d) = data(6, 5);
    let t = TrainerConfig { batch_size: 4, ..cfg(2, TrainMode::Compact) };
    let a = run(model(5), &d, &t);
    let b = run(model(5), &d, &t);
    assert_eq!(a.ledger, b.ledger);
    assert_eq!(crate::model::save_checkpoint(&a.model), crate::model::save_checkpoint(&b.model));
    let mut steps = a.ledger.rows().iter().map(|r| r.step).collect::<Vec<_>>();
    steps.dedup();
    assert_eq!(steps, vec![1, 2, 3, 4]);
    for r in a.ledger.rows() {
        assert!((r.l_total - (r.l_sft + 0.1 * r.l_mcon)).abs() < 1e-12);
    }
}

#[test]
fn ledger_alpha_sums_to_one_per_instance() {
    let (_, d) = data(6, 6);
    let out = run(model(6), &d, &cfg(1, TrainMode::AblatePpl));
    for chunk in out.ledger.rows().chunks(4) {
        assert!(chunk.iter().all(|r| r.instance_id == chunk[0].instance_id));
        assert!((chunk.iter().map(|r| r.alpha).sum::<f64>() - 1.0).abs() < 1e-9);
    }
}

#[test]
fn overfit_loss_decreases() {
    let (_, d) = data(16, 7);
    let out = run(model(7), &d, &TrainerConfig { learning_rate: 1e-2, ..cfg(6, TrainMode::Compact) });
    assert!(out.epoch_losses.last().unwrap() < out.epoch_losses.first().unwrap(), "{:?}", out.epoch_losses);
}

#[test]
fn non_finite_parameters_abort_with_step() {
    let (_, d) = data(4, 8);
    let mut m = model(8);
    m.param_mut("lm_head").unwrap().data_mut()[0] = f64::NAN;
    let err = train(m, &d, &cfg(1, TrainMode::Compact), &WeightingConfig::default(), &LossConfig::default(), None)
        .unwrap_err();
    assert!(matches!(err, TrainError::Divergence { step: 1, .. }), "{err}");
}

#[test]
fn per_epoch_scores_are_reused_within_epoch() {
    let (_, d) = data(8, 9);
    let t = TrainerConfig { score_refresh: ScoreRefresh::PerEpoch, ..cfg(1, TrainMode::Compact) };
    let m = model(9);
    let out = run(m.clone(), &d, &t);
    for chunk in out.ledger.rows().chunks(4) {
        let p = d.iter().find(|p| p.instance_id == chunk[0].instance_id).unwrap();
        let fresh = score_instance(&m, p, &WeightingConfig::default()).unwrap();
        for (k, r) in chunk.iter().enumerate() {
            assert_eq!(r.alpha, fresh.alpha[k]);
        }
    }
}

#[test]
fn checkpoints_per_epoch() {
    let (_, d) = data(4, 10);
    let dir = tempfile::tempdir().unwrap();
    let m = model(10);
    let out = train(m.clone(), &d, &cfg(2, TrainMode::Compact), &WeightingConfig::default(), &LossConfig::default(), Some(dir.path()))
        .unwrap();
    assert_eq!(out.checkpoints.len(), 3);
    assert_eq!(StudentModel::load(&checkpoint_path(dir.path(), 0)).unwrap(), m);
    assert_eq!(StudentModel::load(&checkpoint_path(dir.path(), 2)).unwrap(), out.model);
}

#[test]
fn ledger_csv_round_trip() {
    let (_, d) = data(3, 11);
    let out = run(model(11), &d, &cfg(1, TrainMode::Compact));
    let mut buf = Vec::new();
    out.ledger.write_csv(&mut buf).unwrap();
    let header = String::from_utf8(buf.clone()).unwrap().lines().next().unwrap().to_string();
    assert_eq!(header, "step,epoch,instance_id,teacher_id,s_mi,s_cons,s_ppl,score,alpha,l_sft,l_mcon,l_total,l_final");
    assert_eq!(MetricLedger::read_csv(buf.as_slice()).unwrap(), out.ledger);
}

#[test]
fn gradient_equivalence_on_instances() {
    let (_, d) = data(3, 12);
    let m = model(12);
    for p in &d {
        let bundle = score_instance(&m, p, &WeightingConfig::default()).unwrap();
        let gap = verify_gradient_equivalence(&m, p, &bundle.alpha, &LossConfig::default()).unwrap();
        assert!(gap < 1e-10, "{gap}");
    }
    let hot = [0.0, 1.0, 0.0, 0.0];
    assert!(verify_gradient_equivalence(&m, &d[0], &hot, &LossConfig::default()).unwrap() < 1e-12);
}

#[test]
fn evaluate_empty_is_error() {
    assert!(matches!(evaluate(&model(0), &[], &Vocabulary::standard()), Err(TrainError::EmptyDataset)));
}

#[test]
fn untrained_model_is_near_chance() {
    let v = Vocabulary::standard();
    let wide = TaskConfig { modulus: 100, operand_max: 100, ..task() };
    let insts = generate_dataset(100, &profiles(), &wide, 13, &v).unwrap();
    let distinct: std::collections::HashSet<_> = insts.iter().map(|i| &i.gold_answer).collect();
    assert!(distinct.len() >= 50);
    assert!(evaluate(&model(13), &insts, &v).unwrap() < 0.2);
}

#[test]
fn memorizes_a_single_instance() {
    let v = Vocabulary::standard();
    let (insts, d) = data(1, 14);
    let t = TrainerConfig { learning_rate: 2e-2, batch_size: 1, ..cfg(150, TrainMode::SingleTeacher("concise".into())) };
    let out = run(model(14), &d, &t);
    assert_eq!(evaluate(&out.model, &insts, &v).unwrap(), 1.0);
}

#[test]
fn answer_extraction() {
    let v = Vocabulary::standard();
    let ids = v.tokenize("So 4 . #### 1 2").unwrap();
    assert_eq!(extract_answer(&ids, &v).as_deref(), Some("12"));
    assert_eq!(extract_answer(&v.tokenize("So 4 .").unwrap(), &v), None);
}
