//! Behaviour of the pipeline on mid-size worlds.

use xvkd_core::baselines::{self, EmConfig, EmMode};
use xvkd_core::distill::{self, PseudoGtVariant};
use xvkd_core::evalkit;
use xvkd_core::experiments::{self, ExperimentConfig};
use xvkd_core::synthcv::{generate_world, SplitCounts, WorldGeometry};
use xvkd_core::{DomainSpec, Variant};

/// Reference hyperparameters on a 32x32 patch with fewer pairs.
fn mid() -> ExperimentConfig {
    let mut c = ExperimentConfig::reference();
    c.world.geometry = WorldGeometry {
        rows: 32,
        cols: 32,
        levels: 3,
    };
    c.world.counts = SplitCounts {
        teacher_train: 400,
        source_val: 100,
        adapt_train: 400,
        validation: 100,
        test: 300,
    };
    c.teacher.train.epochs = 6;
    c.distill.student.epochs = 6;
    c
}

fn zero_gap(seed: u64) -> ExperimentConfig {
    let mut c = mid().reseeded(seed);
    let target_seed = c.world.target.seed;
    c.world.target = DomainSpec {
        domain_id: "target".into(),
        seed: target_seed,
        ..c.world.source.clone()
    };
    c
}

fn mean_se(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let m = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0);
    (m, (var / n).sqrt())
}

#[test]
fn without_a_gap_source_and_target_errors_agree() {
    let (mut src, mut tgt) = (Vec::new(), Vec::new());
    for seed in 0..5 {
        let c = zero_gap(seed);
        let w = generate_world(&c.world).unwrap();
        let (teacher, _) = experiments::teacher(&c, &w).unwrap();
        src.extend(evalkit::evaluate(&teacher, &w.source_val).unwrap().errors());
        tgt.extend(evalkit::evaluate(&teacher, &w.validation.unlock_gt()).unwrap().errors());
    }
    let (ms, ss) = mean_se(&src);
    let (mt, st) = mean_se(&tgt);
    let pooled = (ss * ss + st * st).sqrt();
    eprintln!("source {ms:.3} target {mt:.3} pooled se {pooled:.3}");
    assert!((ms - mt).abs() <= 2.0 * pooled, "source {ms}, target {mt}, se {pooled}");
}

#[test]
fn teacher_target_error_grows_with_the_gap() {
    let mut errors = Vec::new();
    for noise in [0.2, 0.8, 1.6] {
        let mut c = mid();
        c.world.source.gain = vec![1.0; 8];
        c.world.source.noise_std = 0.2;
        c.world.target.gain = vec![1.0; 8];
        c.world.target.noise_std = noise;
        let w = generate_world(&c.world).unwrap();
        let (teacher, _) = experiments::teacher(&c, &w).unwrap();
        errors.push(evalkit::evaluate(&teacher, &w.test).unwrap().mean());
    }
    eprintln!("teacher target error by noise {errors:?}");
    assert!(errors.windows(2).all(|p| p[0] < p[1]), "{errors:?}");
}

#[test]
fn without_a_gap_the_aux_student_keeps_teacher_accuracy() {
    let c = zero_gap(0);
    let w = generate_world(&c.world).unwrap();
    let (teacher, _) = experiments::teacher(&c, &w).unwrap();
    let pseudo = distill::make_pseudo_gt(&teacher, &w.adapt_train, PseudoGtVariant::ModeBased, c.distill.sigma).unwrap();
    let aux = distill::train_aux_student(&teacher, &w.adapt_train, &pseudo, &c.distill.student, None).unwrap();
    let val = w.validation.unlock_gt();
    let t = evalkit::evaluate(&teacher, &val).unwrap().mean();
    let a = evalkit::evaluate(&aux.params, &val).unwrap().mean();
    eprintln!("zero gap teacher {t:.3} aux {a:.3}");
    assert!(a <= 1.1 * t, "teacher {t}, aux {a}");
}

// The distillation effect needs the full reference world; on the 32x32
// world above the student drifts away from the teacher instead.
#[test]
fn on_the_reference_world_distillation_helps() {
    let c = ExperimentConfig::reference();
    let start = std::time::Instant::now();
    let (_, out) = experiments::run_pipeline(&c, &[Variant::StModeFiltered]).unwrap();
    let secs = start.elapsed().as_secs_f64();
    let d = out.diagnostics.as_ref().unwrap();

    let adapt = &d.adapt_teacher_vs_aux;
    let n = adapt.pairs.len() as f64;
    let t = adapt.pairs.iter().map(|p| p.eps_a).sum::<f64>() / n;
    let a = adapt.pairs.iter().map(|p| p.eps_b).sum::<f64>() / n;
    assert!(a <= t, "adapt teacher {t}, aux {a}");

    let cmp = d.test_teacher_vs_final.as_ref().unwrap();
    let teacher = out.test_mean(Variant::Teacher).unwrap();
    let student = out.test_mean(Variant::StModeFiltered).unwrap();
    eprintln!(
        "adapt teacher {t:.3} aux {a:.3}; test teacher {teacher:.3} student {student:.3}, improved {} worsened {}, spearman {:.3}, {secs:.1}s",
        cmp.improved, cmp.worsened, d.d_error_spearman
    );
    assert!(cmp.improved > cmp.worsened);
    assert!(student < teacher);
    assert!(d.d_error_spearman > 0.0);
    assert!(secs < 300.0);
}

#[test]
fn entropy_finetuning_alone_does_not_help_on_the_target() {
    let c = mid();
    let w = generate_world(&c.world).unwrap();
    let (teacher, _) = experiments::teacher(&c, &w).unwrap();
    let val = w.validation.unlock_gt();
    let before = evalkit::evaluate(&teacher, &val).unwrap().mean();
    for omega in [0.1, 1.0] {
        let em = EmConfig {
            omega,
            mode: EmMode::FinetuneOnly,
            sigma: c.teacher.sigma,
        };
        let out = baselines::train_entropy_min(&teacher, None, &w.adapt_train, &em, &c.em.train, None).unwrap();
        let after = evalkit::evaluate(&out.params, &val).unwrap().mean();
        eprintln!("omega {omega}: teacher {before:.3} entropy-finetuned {after:.3}");
        assert!(after >= before, "omega {omega}: {before} -> {after}");
    }
}
