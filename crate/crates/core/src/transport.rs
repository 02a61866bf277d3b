//! Patch-class entropic optimal transport.
//!
//! For each condition the adapted patch embeddings are matched against that
//! condition's class embeddings: a cost matrix and a semantic-importance row
//! marginal are built from the similarities, Sinkhorn iteration solves the
//! entropy-regularized coupling, and the plan is contracted against the
//! similarities into one prediction per class.
//!
//! The plan itself is treated as non-differentiable: gradients reach the
//! predictions only through the similarity map, never through the Sinkhorn
//! iterations.

use crate::adapt::ConditionAdapter;
use crate::encoders::TextEncoder;
use crate::error::{Error, Result};
use crate::param::ParamStore;
use crate::prompt::ConditionPromptBank;
use crate::tape::{Tape, Var};
use crate::tensor::{self, Tensor};

/// One patch-class transport instance: cost, marginals, regularization.
#[derive(Debug, Clone)]
pub struct TransportProblem {
    /// M×C cost, 1 − column-softmaxed similarity, entries in [0, 1).
    pub cost: Tensor,
    /// M×C similarity 1 − cost (the softmax weights themselves).
    pub similarity: Tensor,
    /// Row marginal over patches (semantic importance), sums to 1.
    pub row_marginal: Tensor,
    /// Column marginal over classes, uniform 1/C.
    pub col_marginal: Tensor,
    pub lambda: f64,
    pub tau: f64,
}

/// Solved coupling with its scaling vectors and convergence state.
#[derive(Debug, Clone)]
pub struct TransportPlan {
    pub plan: Tensor,
    pub u: Tensor,
    pub v: Tensor,
    pub kernel: Tensor,
    pub iterations_used: usize,
    pub converged: bool,
}

/// Sinkhorn iteration limits.
#[derive(Debug, Clone, Copy)]
pub struct SinkhornOptions {
    pub max_iters: usize,
    pub tol: f64,
}

impl Default for SinkhornOptions {
    fn default() -> Self {
        SinkhornOptions {
            max_iters: 200,
            tol: 1e-8,
        }
    }
}

/// Build the transport problem from adapted patches and condition text
/// embeddings (both unit-norm rows).
///
/// `sim_scale` is the frozen logit scale applied to raw cosine similarities
/// before every softmax, standing in for the similarity scale of pretrained
/// dual encoders; without it, unit-vector dot products divided by the
/// temperature leave all softmaxes near-uniform.
///
/// Returns the on-tape similarity map (which carries all gradients) together
/// with the detached numeric problem.
pub fn build_cost(
    tape: &mut Tape,
    adapted: Var,
    cond_text: Var,
    tau: f64,
    lambda: f64,
    sim_scale: f64,
) -> Result<(Var, TransportProblem)> {
    if tau <= 0.0 {
        return Err(Error::InvalidParameter(format!(
            "similarity temperature must be positive, got {tau}"
        )));
    }
    if lambda <= 0.0 {
        return Err(Error::InvalidParameter(format!(
            "entropic regularizer must be positive, got {lambda}"
        )));
    }
    if tape.value(adapted).cols() != tape.value(cond_text).cols() {
        return Err(Error::ShapeMismatch {
            op: "build_cost",
            lhs: tape.value(adapted).shape().to_vec(),
            rhs: tape.value(cond_text).shape().to_vec(),
        });
    }
    if sim_scale <= 0.0 {
        return Err(Error::InvalidParameter(format!(
            "similarity scale must be positive, got {sim_scale}"
        )));
    }
    let text_t = tape.transpose(cond_text);
    let cos = tape.matmul(adapted, text_t)?; // M×C dot products
    let raw = tape.affine(cos, sim_scale, 0.0);
    let sim = tape.softmax(raw, 0, tau)?; // column-wise over patches

    // detached pieces: cost, marginals
    let sim_val = tape.value(sim).clone();
    let mut cost = sim_val.clone();
    for v in cost.values_mut() {
        *v = 1.0 - *v;
    }
    let raw_val = tape.value(raw);
    let m = raw_val.rows();
    let c = raw_val.cols();
    let mut row_max = Tensor::zeros(&[m, 1]);
    for i in 0..m {
        let mx = raw_val
            .row_slice(i)
            .iter()
            .cloned()
            .fold(f64::NEG_INFINITY, f64::max);
        row_max.set2(i, 0, mx);
    }
    let row_marginal_2d = tensor::softmax(&row_max, 0, tau)?;
    let row_marginal = Tensor::vector(row_marginal_2d.values().to_vec());
    let col_marginal = Tensor::vector(vec![1.0 / c as f64; c]);

    Ok((
        sim,
        TransportProblem {
            cost,
            similarity: sim_val,
            row_marginal,
            col_marginal,
            lambda,
            tau,
        },
    ))
}

/// Sinkhorn iteration: kernel = exp(−cost/λ), alternating scalings
/// u ← a ⊘ (K v) and v ← b ⊘ (Kᵀ u) from v = 1, stopping when both plan
/// marginals are within `tol` of the prescribed ones.
pub fn sinkhorn(prob: &TransportProblem, opts: &SinkhornOptions) -> Result<TransportPlan> {
    if opts.max_iters < 1 {
        return Err(Error::InvalidParameter(
            "sinkhorn needs max_iters >= 1".into(),
        ));
    }
    if opts.tol <= 0.0 {
        return Err(Error::InvalidParameter(format!(
            "sinkhorn tolerance must be positive, got {}",
            opts.tol
        )));
    }
    let m = prob.cost.rows();
    let c = prob.cost.cols();
    let lambda = prob.lambda;

    let mut kernel = prob.cost.clone();
    for v in kernel.values_mut() {
        *v = (-*v / lambda).exp();
    }
    // a kernel with an all-zero row or column cannot satisfy its marginal
    for i in 0..m {
        if kernel.row_slice(i).iter().all(|&k| k == 0.0) {
            return Err(Error::NumericalFailure(format!(
                "sinkhorn kernel row {i} underflowed to zero at lambda={lambda}"
            )));
        }
    }
    for j in 0..c {
        if (0..m).all(|i| kernel.get2(i, j) == 0.0) {
            return Err(Error::NumericalFailure(format!(
                "sinkhorn kernel column {j} underflowed to zero at lambda={lambda}"
            )));
        }
    }

    let a = prob.row_marginal.values();
    let b = prob.col_marginal.values();
    let mut u = vec![1.0; m];
    let mut v = vec![1.0; c];
    let mut iterations_used = 0;
    let mut converged = false;

    for it in 0..opts.max_iters {
        iterations_used = it + 1;
        // u ← a ⊘ (K v)
        for i in 0..m {
            let kv: f64 = kernel
                .row_slice(i)
                .iter()
                .zip(v.iter())
                .map(|(k, vv)| k * vv)
                .sum();
            if kv == 0.0 || !kv.is_finite() {
                return Err(Error::NumericalFailure(format!(
                    "sinkhorn scaling diverged in row {i} at lambda={lambda}"
                )));
            }
            u[i] = a[i] / kv;
        }
        // v ← b ⊘ (Kᵀ u)
        for j in 0..c {
            let ktu: f64 = (0..m).map(|i| kernel.get2(i, j) * u[i]).sum();
            if ktu == 0.0 || !ktu.is_finite() {
                return Err(Error::NumericalFailure(format!(
                    "sinkhorn scaling diverged in column {j} at lambda={lambda}"
                )));
            }
            v[j] = b[j] / ktu;
        }
        // marginal violation of P = diag(u) K diag(v)
        let mut worst: f64 = 0.0;
        for i in 0..m {
            let row_sum: f64 = kernel
                .row_slice(i)
                .iter()
                .zip(v.iter())
                .map(|(k, vv)| u[i] * k * vv)
                .sum();
            worst = worst.max((row_sum - a[i]).abs());
        }
        for j in 0..c {
            let col_sum: f64 = (0..m).map(|i| u[i] * kernel.get2(i, j) * v[j]).sum();
            worst = worst.max((col_sum - b[j]).abs());
        }
        if worst < opts.tol {
            converged = true;
            break;
        }
    }

    let mut plan = Tensor::zeros(&[m, c]);
    for i in 0..m {
        for j in 0..c {
            plan.set2(i, j, u[i] * kernel.get2(i, j) * v[j]);
        }
    }
    if !plan.all_finite() {
        return Err(Error::NumericalFailure(format!(
            "sinkhorn plan is not finite at lambda={lambda}"
        )));
    }
    Ok(TransportPlan {
        plan,
        u: Tensor::vector(u),
        v: Tensor::vector(v),
        kernel,
        iterations_used,
        converged,
    })
}

/// ψ_c = Σ_m P_{m,c}·S_{m,c} as a 1×C on-tape row; the plan enters as a
/// constant so gradient flows through the similarities only.
pub fn conditioned_prediction(tape: &mut Tape, plan: &TransportPlan, sim: Var) -> Result<Var> {
    if tape.value(sim).shape() != plan.plan.shape() {
        return Err(Error::ShapeMismatch {
            op: "conditioned_prediction",
            lhs: tape.value(sim).shape().to_vec(),
            rhs: plan.plan.shape().to_vec(),
        });
    }
    let p = tape.constant(plan.plan.clone());
    let weighted = tape.mul(p, sim)?;
    tape.sum_axis(weighted, 0)
}

/// Run adapt → cost → Sinkhorn → prediction for one condition given its
/// precomputed text embeddings.
#[allow(clippy::too_many_arguments)]
pub fn predict_condition(
    tape: &mut Tape,
    store: &ParamStore,
    patches: Var,
    adapter: &ConditionAdapter,
    cond_text: Var,
    tau: f64,
    lambda: f64,
    sim_scale: f64,
    opts: &SinkhornOptions,
) -> Result<Var> {
    let adapted = adapter.adapt(tape, store, patches)?;
    let (sim, prob) = build_cost(tape, adapted, cond_text, tau, lambda, sim_scale)?;
    let plan = sinkhorn(&prob, opts)?;
    conditioned_prediction(tape, &plan, sim)
}

/// All conditions for one sample, stacked into an N×C prediction matrix,
/// with text embeddings supplied by the caller (they are sample-independent
/// and are shared across a batch).
#[allow(clippy::too_many_arguments)]
pub fn predict_conditions_with_text(
    tape: &mut Tape,
    store: &ParamStore,
    patches: Var,
    adapters: &[ConditionAdapter],
    cond_text: &[Var],
    tau: f64,
    lambda: f64,
    sim_scale: f64,
    opts: &SinkhornOptions,
) -> Result<Var> {
    if adapters.len() != cond_text.len() {
        return Err(Error::Contract(format!(
            "{} adapters but {} condition text embeddings",
            adapters.len(),
            cond_text.len()
        )));
    }
    let mut rows = Vec::with_capacity(adapters.len());
    for (adapter, &text) in adapters.iter().zip(cond_text.iter()) {
        rows.push(predict_condition(
            tape, store, patches, adapter, text, tau, lambda, sim_scale, opts,
        )?);
    }
    tape.concat_rows(&rows)
}

/// Full per-sample conditioned prediction: embeds the prompt bank and runs
/// every condition.
#[allow(clippy::too_many_arguments)]
pub fn predict_all_conditions(
    tape: &mut Tape,
    store: &ParamStore,
    patches: &Tensor,
    adapters: &[ConditionAdapter],
    bank: &ConditionPromptBank,
    enc: &TextEncoder,
    tau: f64,
    lambda: f64,
    sim_scale: f64,
    opts: &SinkhornOptions,
) -> Result<Var> {
    let text = bank.embed_all(tape, store, enc)?;
    let patches = tape.constant(patches.clone());
    predict_conditions_with_text(tape, store, patches, adapters, &text, tau, lambda, sim_scale, opts)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;
    use crate::tensor::l2_normalize_rows;

    fn problem_from_unit_rows(m: usize, c: usize, d: usize, seed: u64, tau: f64, lambda: f64) -> (Tape, Var, TransportProblem) {
        let mut tape = Tape::new();
        let patches = tape.constant(l2_normalize_rows(&rng::normal_tensor(seed, &[m, d], 1.0)));
        let text = tape.constant(l2_normalize_rows(&rng::normal_tensor(seed ^ 0xabc, &[c, d], 1.0)));
        let (sim, prob) = build_cost(&mut tape, patches, text, tau, lambda, 1.0).unwrap();
        (tape, sim, prob)
    }

    #[test]
    fn equal_similarities_give_uniform_cost_and_marginal() {
        let mut tape = Tape::new();
        // all patches identical ⇒ every dot product identical per class
        let row: Vec<f64> = l2_normalize_rows(&rng::normal_tensor(3, &[1, 6], 1.0))
            .values()
            .to_vec();
        let mut vals = Vec::new();
        for _ in 0..4 {
            vals.extend_from_slice(&row);
        }
        let patches = tape.constant(Tensor::matrix(4, 6, vals).unwrap());
        let text = tape.constant(l2_normalize_rows(&rng::normal_tensor(9, &[3, 6], 1.0)));
        let (_sim, prob) = build_cost(&mut tape, patches, text, 4.0, 0.2, 1.0).unwrap();
        for v in prob.cost.values() {
            assert!((v - (1.0 - 0.25)).abs() < 1e-12);
        }
        for a in prob.row_marginal.values() {
            assert!((a - 0.25).abs() < 1e-12);
        }
    }

    #[test]
    fn single_patch_cost_is_zero_and_marginal_one() {
        let (_tape, _sim, prob) = problem_from_unit_rows(1, 3, 6, 5, 4.0, 0.2);
        for v in prob.cost.values() {
            assert!(v.abs() < 1e-12);
        }
        assert_eq!(prob.row_marginal.values(), &[1.0]);
    }

    #[test]
    fn similarity_columns_sum_to_one() {
        let (_tape, _sim, prob) = problem_from_unit_rows(5, 4, 8, 17, 4.0, 0.2);
        for j in 0..4 {
            let s: f64 = (0..5).map(|i| prob.similarity.get2(i, j)).sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn build_cost_rejects_bad_tau() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::matrix(2, 3, vec![0.0; 6]).unwrap());
        let b = tape.constant(Tensor::matrix(2, 3, vec![0.0; 6]).unwrap());
        assert!(build_cost(&mut tape, a, b, 0.0, 0.2, 1.0).is_err());
        assert!(build_cost(&mut tape, a, b, 4.0, 0.0, 1.0).is_err());
        assert!(build_cost(&mut tape, a, b, 4.0, 0.2, 0.0).is_err());
    }

    #[test]
    fn sinkhorn_forced_mass_1x1() {
        let prob = TransportProblem {
            cost: Tensor::matrix(1, 1, vec![0.3]).unwrap(),
            similarity: Tensor::matrix(1, 1, vec![0.7]).unwrap(),
            row_marginal: Tensor::vector(vec![1.0]),
            col_marginal: Tensor::vector(vec![1.0]),
            lambda: 0.2,
            tau: 4.0,
        };
        let plan = sinkhorn(&prob, &SinkhornOptions::default()).unwrap();
        assert!((plan.plan.first() - 1.0).abs() < 1e-12);
        assert!(plan.converged);
    }

    #[test]
    fn sinkhorn_uniform_everything_gives_product_measure() {
        let (m, c) = (4, 3);
        let prob = TransportProblem {
            cost: Tensor::full(&[m, c], 0.5),
            similarity: Tensor::full(&[m, c], 0.5),
            row_marginal: Tensor::vector(vec![1.0 / m as f64; m]),
            col_marginal: Tensor::vector(vec![1.0 / c as f64; c]),
            lambda: 0.2,
            tau: 4.0,
        };
        let plan = sinkhorn(&prob, &SinkhornOptions::default()).unwrap();
        for v in plan.plan.values() {
            assert!((v - 1.0 / (m * c) as f64).abs() < 1e-12);
        }
    }

    #[test]
    fn sinkhorn_marginals_match_within_tolerance() {
        let (_tape, _sim, prob) = problem_from_unit_rows(6, 4, 8, 23, 4.0, 0.2);
        let opts = SinkhornOptions {
            max_iters: 500,
            tol: 1e-9,
        };
        let plan = sinkhorn(&prob, &opts).unwrap();
        assert!(plan.converged);
        for i in 0..6 {
            let rs: f64 = plan.plan.row_slice(i).iter().sum();
            assert!((rs - prob.row_marginal.values()[i]).abs() < 1e-8);
        }
        for j in 0..4 {
            let cs: f64 = (0..6).map(|i| plan.plan.get2(i, j)).sum();
            assert!((cs - prob.col_marginal.values()[j]).abs() < 1e-8);
        }
        assert!(plan.plan.values().iter().all(|&p| p >= 0.0));
    }

    #[test]
    fn sinkhorn_underflowed_kernel_fails_loudly() {
        let mut cost = Tensor::full(&[2, 2], 1.0);
        cost.set2(0, 0, 0.0);
        // at this lambda, exp(-1/λ) underflows to exactly 0, leaving row 1 all-zero
        let prob = TransportProblem {
            cost,
            similarity: Tensor::full(&[2, 2], 0.5),
            row_marginal: Tensor::vector(vec![0.5, 0.5]),
            col_marginal: Tensor::vector(vec![0.5, 0.5]),
            lambda: 1e-3,
            tau: 4.0,
        };
        let err = sinkhorn(&prob, &SinkhornOptions::default()).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("lambda=0.001"), "{msg}");
    }

    #[test]
    fn prediction_uniform_plan_constant_similarity() {
        let (m, c) = (4, 2);
        let s = 0.37;
        let prob = TransportProblem {
            cost: Tensor::full(&[m, c], 1.0 - s),
            similarity: Tensor::full(&[m, c], s),
            row_marginal: Tensor::vector(vec![1.0 / m as f64; m]),
            col_marginal: Tensor::vector(vec![1.0 / c as f64; c]),
            lambda: 0.2,
            tau: 4.0,
        };
        let plan = sinkhorn(&prob, &SinkhornOptions::default()).unwrap();
        let mut tape = Tape::new();
        let sim = tape.constant(prob.similarity.clone());
        let psi = conditioned_prediction(&mut tape, &plan, sim).unwrap();
        for v in tape.value(psi).values() {
            assert!((v - s / c as f64).abs() < 1e-10);
        }
    }

    #[test]
    fn prediction_equals_column_mass_when_similarity_is_one() {
        let (_tape, _sim, prob) = problem_from_unit_rows(5, 4, 8, 31, 4.0, 0.2);
        let plan = sinkhorn(&prob, &SinkhornOptions::default()).unwrap();
        let mut tape = Tape::new();
        let ones = tape.constant(Tensor::ones(&[5, 4]));
        let psi = conditioned_prediction(&mut tape, &plan, ones).unwrap();
        for v in tape.value(psi).values() {
            assert!((v - 0.25).abs() < 1e-7);
        }
    }

    #[test]
    fn prediction_bounded_by_column_mass_times_max_similarity() {
        for seed in 0..20 {
            let (mut tape, sim, prob) = problem_from_unit_rows(5, 3, 8, 100 + seed, 4.0, 0.2);
            let plan = sinkhorn(&prob, &SinkhornOptions::default()).unwrap();
            let psi = conditioned_prediction(&mut tape, &plan, sim).unwrap();
            for j in 0..3 {
                let col_mass: f64 = (0..5).map(|i| plan.plan.get2(i, j)).sum();
                let max_sim = (0..5)
                    .map(|i| prob.similarity.get2(i, j))
                    .fold(f64::NEG_INFINITY, f64::max);
                let v = tape.value(psi).values()[j];
                assert!(v >= -1e-15);
                assert!(v <= col_mass * max_sim + 1e-12);
            }
        }
    }

    #[test]
    fn predict_single_condition_matches_composition() {
        use crate::adapt::ConditionAdapter;
        let mut store = ParamStore::new();
        let adapter = ConditionAdapter::new(&mut store, 0, 8, 4, 5).unwrap();
        let patches_t = l2_normalize_rows(&rng::normal_tensor(41, &[5, 8], 1.0));
        let text_t = l2_normalize_rows(&rng::normal_tensor(42, &[3, 8], 1.0));
        let opts = SinkhornOptions::default();

        let mut tape = Tape::new();
        let patches = tape.constant(patches_t.clone());
        let text = tape.constant(text_t.clone());
        let stacked = predict_conditions_with_text(
            &mut tape, &store, patches, std::slice::from_ref(&adapter), &[text], 4.0, 0.2, 1.0, &opts,
        )
        .unwrap();
        assert_eq!(tape.value(stacked).shape(), &[1, 3]);

        let mut tape2 = Tape::new();
        let patches2 = tape2.constant(patches_t);
        let text2 = tape2.constant(text_t);
        let single =
            predict_condition(&mut tape2, &store, patches2, &adapter, text2, 4.0, 0.2, 1.0, &opts)
                .unwrap();
        assert_eq!(tape.value(stacked).values(), tape2.value(single).values());
    }

    #[test]
    fn permuting_conditions_permutes_rows() {
        use crate::adapt::ConditionAdapter;
        let mut store = ParamStore::new();
        let a0 = ConditionAdapter::new(&mut store, 0, 8, 4, 5).unwrap();
        let a1 = ConditionAdapter::new(&mut store, 1, 8, 4, 5).unwrap();
        let patches_t = l2_normalize_rows(&rng::normal_tensor(51, &[4, 8], 1.0));
        let t0 = l2_normalize_rows(&rng::normal_tensor(52, &[3, 8], 1.0));
        let t1 = l2_normalize_rows(&rng::normal_tensor(53, &[3, 8], 1.0));
        let opts = SinkhornOptions::default();

        let run = |order: [usize; 2], store: &ParamStore| {
            let adapters = [a0.clone(), a1.clone()];
            let texts = [t0.clone(), t1.clone()];
            let mut tape = Tape::new();
            let patches = tape.constant(patches_t.clone());
            let text_vars: Vec<Var> = order
                .iter()
                .map(|&i| tape.constant(texts[i].clone()))
                .collect();
            let picked: Vec<ConditionAdapter> =
                order.iter().map(|&i| adapters[i].clone()).collect();
            let out = predict_conditions_with_text(
                &mut tape, store, patches, &picked, &text_vars, 4.0, 0.2, 1.0, &opts,
            )
            .unwrap();
            (
                tape.value(out).row_slice(0).to_vec(),
                tape.value(out).row_slice(1).to_vec(),
            )
        };
        let (f0, f1) = run([0, 1], &store);
        let (r0, r1) = run([1, 0], &store);
        assert_eq!(f0, r1);
        assert_eq!(f1, r0);
    }

    #[test]
    fn similarity_bump_under_fixed_plan_does_not_decrease_prediction() {
        // ψ is what the optimizer sees: the plan is detached, so raising the
        // similarities of one class must raise (or hold) its prediction. Each
        // ψ is crosschecked against a brute-force Σ_m P·S recomputation.
        for seed in 0..50u64 {
            let (mut tape, sim, prob) = problem_from_unit_rows(3, 3, 8, 700 + seed, 4.0, 0.2);
            let plan = sinkhorn(&prob, &SinkhornOptions::default()).unwrap();
            let psi = conditioned_prediction(&mut tape, &plan, sim).unwrap();
            let base = tape.value(psi).values()[0];

            let brute: f64 = (0..3)
                .map(|i| plan.plan.get2(i, 0) * prob.similarity.get2(i, 0))
                .sum();
            assert!((base - brute).abs() < 1e-14);

            let mut bumped = prob.similarity.clone();
            let mut delta_rng = rng::chacha(900 + seed);
            use rand::Rng;
            for i in 0..3 {
                let v = bumped.get2(i, 0) + delta_rng.gen_range(0.0..0.2);
                bumped.set2(i, 0, v);
            }
            let s2 = tape.constant(bumped);
            let psi2 = conditioned_prediction(&mut tape, &plan, s2).unwrap();
            let after = tape.value(psi2).values()[0];
            assert!(
                after >= base - 1e-15,
                "seed {seed}: psi dropped from {base} to {after}"
            );
        }
    }
}
