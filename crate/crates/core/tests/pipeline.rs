//! Full library pipeline at moderate scale: simulate, clean, blend, train,
//! evaluate.

use timegazer::augmentation::{blend_corpus, AugmentConfig};
use timegazer::evaluation::{evaluate_corpus, EvalConfig};
use timegazer::gaze::FixationConfig;
use timegazer::model::ModelConfig;
use timegazer::segmentation::{clean_corpus, CleaningRules};
use timegazer::simulator::{simulate_corpus, SimConfig};
use timegazer::training::{train, LossConfig, TrainConfig};

#[test]
fn simulate_train_evaluate_improves_over_raw() {
    let t0 = std::time::Instant::now();
    let sim = SimConfig { n_trials: 80, rng_seed: 7, ..Default::default() };
    let corpus = simulate_corpus(&sim).unwrap();
    let eval_sim = SimConfig { n_trials: 20, rng_seed: 1007, ..Default::default() };
    let eval_trials = simulate_corpus(&eval_sim).unwrap();

    let rules = CleaningRules::default();
    let fix = FixationConfig::default();
    let (kept, _) = clean_corpus(&corpus, &rules, &fix).unwrap();
    let (eval_kept, _) = clean_corpus(&eval_trials, &rules, &fix).unwrap();
    assert_eq!(kept.len(), 80);
    eprintln!("[pipeline] simulated+cleaned in {:.1?}", t0.elapsed());

    let blended = blend_corpus(&kept, &AugmentConfig::default()).unwrap();
    assert_eq!(blended.len(), 160);

    let mcfg = ModelConfig::default();
    let tcfg = TrainConfig {
        lr0: 0.003,
        epochs: 30,
        patience: 30,
        batch_size: 16,
        seed: 7,
        ..Default::default()
    };
    let t1 = std::time::Instant::now();
    let (model, log) = train(&blended, &mcfg, &tcfg, &LossConfig::default()).unwrap();
    eprintln!(
        "[pipeline] trained {} epochs in {:.1?} ({} train / {} val samples), best val {:.5} at epoch {}",
        log.epochs.len(),
        t1.elapsed(),
        log.n_train,
        log.n_val,
        log.best_val,
        log.best_epoch
    );
    for e in &log.epochs {
        eprintln!(
            "[pipeline]   epoch {}: train {:.5} val {:.5} lr {:.6} alpha {:.3}",
            e.epoch, e.train_loss, e.val_loss, e.lr, e.alpha
        );
    }

    let t2 = std::time::Instant::now();
    let out = evaluate_corpus(&model, &eval_kept, &mcfg, &EvalConfig { timing: false, ..Default::default() }).unwrap();
    let a = &out.report.aggregate;
    eprintln!(
        "[pipeline] evaluated {} trials in {:.1?}: AI {:.3}+/-{:.3} CI {:.3}+/-{:.3} AD {:.4} raw AD {:.4}",
        out.report.per_trial.len(),
        t2.elapsed(),
        a.ai.mean,
        a.ai.std,
        a.ci.mean,
        a.ci.std,
        a.ad_pred.mean,
        a.ad_raw.mean
    );
    assert!(a.ai.mean > 1.0, "trained model should beat raw gaze, AI = {}", a.ai.mean);
}
