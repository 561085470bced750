use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::model::Mlp;
use crate::tasks::{generate_synthetic_task, SyntheticSpec};

fn score(id: usize, entropy: f64) -> UncertaintyScore {
    UncertaintyScore {
        sample_id: id,
        mc_mean_probs: vec![0.5, 0.5],
        entropy,
        passes: 2,
    }
}

fn pool(ids: &[usize], budget: usize) -> PoolState {
    PoolState {
        unlabeled: ids.to_vec(),
        budget_remaining: budget,
        ..PoolState::default()
    }
}

fn tiny_task(seed: u64) -> Arc<TaskDataset> {
    let spec = SyntheticSpec {
        blob_sigma: 1.0,
        center_jitter: 1.0,
        ..SyntheticSpec::marker(5, 8, 60)
    };
    Arc::new(generate_synthetic_task("tiny", &spec, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap())
}

fn learner() -> Mlp {
    Mlp::new(vec![8 * 8 * 7, 6, 2]).unwrap().with_dropout_rate(0.1).unwrap()
}

fn theta() -> ParamSet {
    learner().init(&mut ChaCha8Rng::seed_from_u64(3)).unwrap()
}

fn config(budget: usize) -> ActiveConfig {
    ActiveConfig {
        budget,
        mc_passes: 4,
        candidates: 10,
        ..ActiveConfig::default()
    }
}

fn finished(result: LoopResult<Mlp>) -> ActiveOutcome {
    match result {
        LoopResult::Finished(o) => o,
        LoopResult::Suspended(_) => panic!("loop suspended"),
    }
}

#[test]
fn mc_average_of_hand_fed_passes() {
    let mean = mc_average(&[vec![0.8, 0.2], vec![0.6, 0.4]]).unwrap();
    assert!((mean[0] - 0.7).abs() < 1e-12 && (mean[1] - 0.3).abs() < 1e-12);
    let same = vec![0.123456789, 0.876543211];
    assert_eq!(mc_average(&vec![same.clone(); 7]).unwrap(), same);
    assert!(mc_average(&[]).is_err());
}

#[test]
fn entropy_values() {
    assert!((predictive_entropy(&[0.5, 0.5]).unwrap() - std::f64::consts::LN_2).abs() < 1e-12);
    assert_eq!(predictive_entropy(&[1.0, 0.0]).unwrap(), 0.0);
    let h = predictive_entropy(&[0.7, 0.3]).unwrap();
    assert!((h - (-(0.7f64 * 0.7f64.ln()) - 0.3 * 0.3f64.ln())).abs() < 1e-15);
    assert!(matches!(predictive_entropy(&[-0.1, 1.1]), Err(Error::Data(_))));
}

#[test]
fn selection_picks_highest_entropy() {
    let mut p = pool(&[0, 1, 2], 5);
    let chosen = select_queries(&mut p, &[score(0, 0.1), score(1, 0.69), score(2, 0.3)], 1);
    assert_eq!(chosen[0].sample_id, 1);
    assert_eq!(p.unlabeled, vec![0, 2]);
    assert_eq!(p.budget_remaining, 4);
}

#[test]
fn selection_ties_go_to_lowest_ids() {
    let mut p = pool(&[9, 4, 7, 5], 5);
    let scores: Vec<_> = [9, 4, 7, 5].iter().map(|&i| score(i, 0.4)).collect();
    let ids: Vec<_> = select_queries(&mut p, &scores, 2).iter().map(|s| s.sample_id).collect();
    assert_eq!(ids, vec![4, 5]);
}

#[test]
fn selection_respects_pool_and_budget() {
    let mut p = pool(&[1, 2, 3], 10);
    let scores = [score(3, 0.2), score(1, 0.2), score(2, 0.5), score(8, 0.6)];
    let ids: Vec<_> = select_queries(&mut p, &scores, 3).iter().map(|s| s.sample_id).collect();
    assert_eq!(ids, vec![2, 1, 3]);
    assert!(p.unlabeled.is_empty());
    assert!(select_queries(&mut p, &scores, 3).is_empty());

    let mut q = pool(&[1, 2, 3], 1);
    assert_eq!(select_queries(&mut q, &scores, 3).len(), 1);
    assert!(select_queries(&mut q, &scores, 3).is_empty());
}

#[test]
fn mc_predict_without_dropout_matches_eval_forward() {
    let task = tiny_task(1);
    let plain = Mlp::new(vec![8 * 8 * 7, 6, 2]).unwrap();
    let params = theta();
    let ids = &task.train_pool()[..5];
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mc = mc_predict(&plain, &params, &task, ids, 5, &mut rng).unwrap();
    let x = task.inputs(ids).unwrap();
    let det = crate::model::predict_probs(&plain, &params, &x, crate::model::ForwardMode::Eval, &mut rng, 64).unwrap();
    let flat: Vec<f64> = mc.concat();
    assert_eq!(flat, det.data());
}

#[test]
fn oracle_loop_spends_the_budget_without_repeats() {
    let task = tiny_task(2);
    let out = finished(active_loop(learner(), &theta(), task.clone(), config(9), 5, &mut OracleLabeler, None).unwrap());
    assert_eq!(out.pool.labeled.len(), 9);
    assert_eq!(out.pool.budget_remaining, 0);
    let mut ids = out.pool.labeled_ids();
    ids.sort_unstable();
    ids.dedup();
    assert_eq!(ids.len(), 9);
    assert!(out.pool.labeled.iter().all(|&(id, y)| task.label(id) == y));
    assert!(ids.iter().all(|id| !out.pool.unlabeled.contains(id)));
    // Seeds, then rounds of 2, 2, 2 and a final single query.
    let rounds: Vec<usize> = out.pool.history.iter().map(|r| r.round).collect();
    assert_eq!(rounds, vec![0, 0, 1, 1, 2, 2, 3, 3, 4]);
    assert_eq!(out.log.len(), 5);
    assert!(out.pool.history[2..].iter().all(|r| r.entropy.is_some()));
    assert_eq!(out.evaluation.labels.len(), task.test_pool().len());
}

#[test]
fn oracle_loop_is_deterministic() {
    let task = tiny_task(3);
    let a = finished(active_loop(learner(), &theta(), task.clone(), config(8), 9, &mut OracleLabeler, None).unwrap());
    let b = finished(active_loop(learner(), &theta(), task, config(8), 9, &mut OracleLabeler, None).unwrap());
    assert_eq!(a.pool, b.pool);
    assert_eq!(a.evaluation, b.evaluation);
    assert!(a.params.bit_eq(&b.params));
}

#[test]
fn random_strategy_records_no_entropy() {
    let task = tiny_task(4);
    let cfg = ActiveConfig {
        strategy: Strategy::Random,
        ..config(6)
    };
    let out = finished(active_loop(learner(), &theta(), task, cfg, 1, &mut OracleLabeler, None).unwrap());
    assert_eq!(out.pool.labeled.len(), 6);
    assert!(out.pool.history.iter().all(|r| r.entropy.is_none()));
}

#[test]
fn submissions_are_validated() {
    let task = tiny_task(5);
    let mut s = ActiveSession::new(learner(), &theta(), task.clone(), config(6), 2).unwrap();
    assert_eq!(s.status(), SessionStatus::AwaitingLabels);
    let pending: Vec<usize> = s.pending().iter().map(|q| q.sample_id).collect();
    assert_eq!(pending.len(), 2);
    let stranger = *task.train_pool().iter().find(|id| !pending.contains(id)).unwrap();
    assert!(matches!(s.submit(stranger, 0, LabelSource::Human), Err(Error::Usage(_))));
    assert!(matches!(s.submit(pending[0], 2, LabelSource::Human), Err(Error::Parameter(_))));
    assert!(s.advance().is_err());

    let first = s.submit(pending[0], 1, LabelSource::Human).unwrap();
    assert!(first.accepted && !first.conflict);
    let again = s.submit(pending[0], 0, LabelSource::Human).unwrap();
    assert!(!again.accepted && again.conflict);
    let last = s.submit(pending[1], 0, LabelSource::Human).unwrap();
    assert_eq!(last.status, SessionStatus::Adapting);
    s.advance().unwrap();
    assert_eq!(s.pool().labeled, vec![(pending[0], 1), (pending[1], 0)]);
    assert!(s.submit(pending[0], 1, LabelSource::Human).unwrap().conflict);
}

#[test]
fn mismatched_dropout_is_rejected() {
    let plain = Mlp::new(vec![8 * 8 * 7, 6, 2]).unwrap();
    assert!(ActiveSession::new(plain, &theta(), tiny_task(6), config(6), 0).is_err());
    assert!(ActiveSession::new(learner(), &theta(), tiny_task(6), config(1), 0).is_err());
}

/// Answers one batch, then defers.
struct OneShot {
    answered: bool,
}

impl Labeler for OneShot {
    fn source(&self) -> LabelSource {
        LabelSource::Oracle
    }

    fn label(&mut self, task: &TaskDataset, ids: &[usize]) -> Result<Option<Vec<usize>>> {
        if self.answered {
            return Ok(None);
        }
        self.answered = true;
        Ok(Some(task.labels(ids)))
    }
}

#[test]
fn suspended_session_resumes_identically() {
    let task = tiny_task(7);
    let cfg = ActiveConfig {
        continue_from_phi: true,
        ..config(8)
    };
    let full = finished(active_loop(learner(), &theta(), task.clone(), cfg.clone(), 4, &mut OracleLabeler, None).unwrap());

    let dir = tempfile::tempdir().unwrap();
    let mut once = OneShot { answered: false };
    let suspended = active_loop(learner(), &theta(), task.clone(), cfg, 4, &mut once, Some(dir.path())).unwrap();
    assert!(matches!(suspended, LoopResult::Suspended(_)));
    let resumed = ActiveSession::load(dir.path(), learner(), &theta(), task.clone()).unwrap();
    let out = finished(resumed.run(&mut OracleLabeler, None).unwrap());
    assert_eq!(out.pool, full.pool);
    assert!(out.params.bit_eq(&full.params));

    let other = tiny_task(8).as_ref().clone().with_task_id("other");
    assert!(ActiveSession::load(dir.path(), learner(), &theta(), Arc::new(other)).is_err());
}

#[test]
fn query_log_csv() {
    let task = tiny_task(9);
    let out = finished(active_loop(learner(), &theta(), task, config(6), 3, &mut OracleLabeler, None).unwrap());
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("queries.csv");
    out.pool.write_query_log(&path).unwrap();
    let text = std::fs::read_to_string(path).unwrap();
    assert_eq!(text.lines().count(), 7);
    assert!(text.starts_with("round,sample_id,entropy,label_source,label\n0,"));
    assert!(text.lines().nth(3).unwrap().contains(",oracle,"));
}
