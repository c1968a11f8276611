//! Iterate-level attack invariants, checked through the attack observer.

use fssentry::attacks::{support_attack, AttackConfig, AttackMethod};
use fssentry::data::{Dataset, Split};
use fssentry::fewshot::FewShotModel;
use fssentry::numcore::RngStream;

/// One f32 ulp at 1.0: the rounding slack of `clean ± ε`.
const ULP: f64 = f32::EPSILON as f64;

fn base_support(ds: &Dataset, class: usize, n: usize, rng: &mut RngStream) -> Vec<usize> {
    let pool = ds.samples_of(class);
    rng.choose_distinct(pool.len(), n).into_iter().map(|i| pool[i]).collect()
}

/// Runs `runs` PGD attacks over test classes with budgets cycling through
/// 3, 6 and 12/255 and `n_attacked` cycling through 1..=n_shot. Returns the
/// number of iterates checked, or the first violation of the ℓ∞ budget,
/// the [0, 1] domain or the zero perturbation of unattacked slots.
pub fn pgd_runs(model: &FewShotModel<f32>, ds: &Dataset, runs: usize, iterations: usize, seed: u64) -> Result<usize, String> {
    let classes = ds.classes_in(Split::Test);
    let mut rng = RngStream::new(seed, 0xa77);
    let mut checked = 0;
    for run in 0..runs {
        let mut cfg = AttackConfig::pgd([3.0, 6.0, 12.0][run % 3] / 255.0);
        cfg.iterations = iterations;
        cfg.k_way = model.k_way;
        cfg.n_shot = model.n_shot;
        cfg.n_attacked = 1 + run % model.n_shot;
        cfg.seed = seed + run as u64;
        let class = classes[run % classes.len()];
        let support = base_support(ds, class, cfg.n_shot, &mut rng);
        let eps = cfg.eps as f32 as f64;
        let mut violation: Option<String> = None;
        let mut observe = |rec: &fssentry::attacks::IterationRecord<'_>| {
            for (&a, &c) in rec.x_adv.data().iter().zip(rec.clean.data()) {
                let (a, c) = (a as f64, c as f64);
                if violation.is_none() && (!(0.0..=1.0).contains(&a) || (a - c).abs() > eps + ULP) {
                    violation = Some(format!("run {run} iteration {}: x {a} clean {c} eps {eps}", rec.iteration));
                }
            }
            checked += 1;
        };
        let set = support_attack(model, ds, class, &support, &cfg, &mut rng.child(run as u64), &mut observe)
            .map_err(|e| e.to_string())?;
        if let Some(v) = violation {
            return Err(v);
        }
        let nonzero = set.attacked_slots();
        if nonzero.iter().any(|&s| s >= cfg.n_attacked) {
            return Err(format!("run {run}: unattacked slot perturbed ({nonzero:?})"));
        }
        let x = set.images(ds);
        if x.data().iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(format!("run {run}: final set leaves [0, 1]"));
        }
        if set.delta.linf_norm() as f64 > eps + ULP {
            return Err(format!("run {run}: final ‖δ‖∞ {} > {eps}", set.delta.linf_norm()));
        }
    }
    Ok(checked)
}

/// CW-SGD runs over the configured `(κ, η)` pairs; every iteration's smallest
/// margin term must be at least −κ. Returns the number of iterations checked.
pub fn cw_margin_runs(model: &FewShotModel<f32>, ds: &Dataset, runs: usize, iterations: usize, seed: u64) -> Result<usize, String> {
    let classes = ds.classes_in(Split::Test);
    let mut rng = RngStream::new(seed, 0xc3);
    let mut checked = 0;
    for run in 0..runs {
        let [kappa, eta] = [[0.0, 25.0], [0.0, 50.0], [0.1, 50.0]][run % 3];
        let mut cfg = AttackConfig::cw_sgd(kappa, eta);
        cfg.iterations = iterations;
        cfg.k_way = model.k_way;
        cfg.n_shot = model.n_shot;
        cfg.seed = seed + run as u64;
        assert_eq!(cfg.method, AttackMethod::CwSgd);
        let class = classes[run % classes.len()];
        let support = base_support(ds, class, cfg.n_shot, &mut rng);
        let mut violation: Option<String> = None;
        let mut observe = |rec: &fssentry::attacks::IterationRecord<'_>| {
            let m = rec.min_margin_term.expect("cw reports margins");
            if violation.is_none() && m < -(kappa as f32 as f64) {
                violation = Some(format!("run {run} iteration {}: margin term {m} < -{kappa}", rec.iteration));
            }
            checked += 1;
        };
        let set = support_attack(model, ds, class, &support, &cfg, &mut rng.child(run as u64), &mut observe)
            .map_err(|e| e.to_string())?;
        if let Some(v) = violation {
            return Err(v);
        }
        if set.images(ds).data().iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(format!("run {run}: final set leaves [0, 1]"));
        }
    }
    Ok(checked)
}
