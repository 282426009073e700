//! Elastic weight consolidation.
//!
//! After training on a task, [`estimate_fisher`] records the task optimum
//! theta* together with a diagonal Fisher estimate F (empirical mean of
//! squared log-likelihood gradients against the true labels). Training on
//! later tasks then adds [`penalty_on`] to the data loss:
//!
//! ```text
//! sum over snapshots, parameters i:  (lambda / 2) * F_i * (theta_i - theta*_i)^2
//! ```
//!
//! High-Fisher parameters are anchored near their old values while
//! low-Fisher ones stay free to learn the new task. The subset of
//! parameters covered by a snapshot depends on the mode: the full model
//! when tasks share a label set, only the shared body when output heads
//! are swapped between tasks.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::autodiff::{NodeId, Source, Tape, Tensor};
use crate::corpus::EncodedSentence;
use crate::error::{CoreError, Result};
use crate::rng::Rng;
use crate::tagger::TaggerModel;

/// Which parameters consolidation covers.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EwcMode {
    /// Anchor every parameter, output head included. Requires all tasks to
    /// share one label set.
    FullModel,
    /// Anchor only the shared body; heads are per-task and unconstrained.
    SharedOnly,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EwcConfig {
    /// Weight of the old tasks relative to the new one.
    pub lambda: f64,
    pub mode: EwcMode,
    /// Max sentences used for Fisher estimation.
    pub fisher_sample_cap: usize,
}

impl EwcConfig {
    pub fn validate(&self) -> Result<()> {
        if !self.lambda.is_finite() || self.lambda < 0.0 {
            return Err(CoreError::config(format!(
                "lambda must be finite and >= 0 (got {})",
                self.lambda
            )));
        }
        if self.fisher_sample_cap < 1 {
            return Err(CoreError::config("fisher_sample_cap must be >= 1"));
        }
        Ok(())
    }
}

/// Per-task anchor: theta* and diagonal Fisher over a named parameter subset.
///
/// Immutable after creation; the key sets of `theta_star` and `fisher` are
/// identical and define the subset.
#[derive(Debug, Clone)]
pub struct FisherSnapshot {
    task_name: String,
    theta_star: BTreeMap<String, Tensor>,
    fisher: BTreeMap<String, Tensor>,
}

impl FisherSnapshot {
    pub fn from_parts(
        task_name: String,
        theta_star: BTreeMap<String, Tensor>,
        fisher: BTreeMap<String, Tensor>,
    ) -> Result<Self> {
        if theta_star.len() != fisher.len()
            || !theta_star.keys().eq(fisher.keys())
        {
            return Err(CoreError::usage(
                "snapshot theta_star and fisher must cover the same parameter names",
            ));
        }
        for (name, anchor) in &theta_star {
            let f = &fisher[name];
            if f.shape() != anchor.shape() {
                return Err(CoreError::Consolidation {
                    param: name.clone(),
                    message: format!(
                        "fisher shape {} differs from anchor shape {}",
                        f.shape_string(),
                        anchor.shape_string()
                    ),
                });
            }
            if f.data().iter().any(|&v| v < 0.0) {
                return Err(CoreError::Consolidation {
                    param: name.clone(),
                    message: "fisher entries must be non-negative".into(),
                });
            }
        }
        Ok(FisherSnapshot {
            task_name,
            theta_star,
            fisher,
        })
    }

    pub fn task_name(&self) -> &str {
        &self.task_name
    }

    pub fn param_subset(&self) -> impl Iterator<Item = &str> {
        self.theta_star.keys().map(String::as_str)
    }

    pub fn theta_star(&self) -> &BTreeMap<String, Tensor> {
        &self.theta_star
    }

    pub fn fisher(&self) -> &BTreeMap<String, Tensor> {
        &self.fisher
    }
}

/// Parameter names covered by a mode on this model.
pub fn subset_for_mode(model: &TaggerModel, mode: EwcMode) -> Vec<String> {
    match mode {
        EwcMode::FullModel => model.all_param_names(),
        EwcMode::SharedOnly => TaggerModel::shared_param_names(),
    }
}

/// Empirical diagonal Fisher at the model's current parameters.
///
/// Takes sentences in dataset order after a seeded shuffle, up to `cap`.
/// For each sentence the gradient of the mean per-token NLL against the
/// TRUE labels is computed in isolation, squared elementwise, and the
/// squares are averaged over sentences. theta* is a deep copy of the
/// current values restricted to `subset`. Gradients are zeroed on exit.
pub fn estimate_fisher(
    model: &mut TaggerModel,
    sentences: &[EncodedSentence],
    subset: &[String],
    cap: usize,
    seed: u64,
    task_name: &str,
) -> Result<FisherSnapshot> {
    if sentences.is_empty() {
        return Err(CoreError::usage("estimate_fisher on empty dataset"));
    }
    if subset.is_empty() {
        return Err(CoreError::usage("estimate_fisher with empty parameter subset"));
    }
    if cap < 1 {
        return Err(CoreError::usage("estimate_fisher cap must be >= 1"));
    }
    for name in subset {
        if !model.store().contains(name) {
            return Err(CoreError::usage(format!(
                "estimate_fisher subset names unknown parameter {name:?}"
            )));
        }
    }

    let mut order: Vec<usize> = (0..sentences.len()).collect();
    Rng::seed_from(seed).shuffle(&mut order);
    order.truncate(cap.min(sentences.len()));

    let mut sum_sq: BTreeMap<String, Tensor> = subset
        .iter()
        .map(|name| {
            let shape = model
                .store()
                .value(model.store().id(name).expect("checked above"))
                .shape()
                .to_vec();
            (name.clone(), Tensor::zeros(shape))
        })
        .collect();

    let mut tape = Tape::new();
    for &idx in &order {
        let sentence = &sentences[idx];
        model.store_mut().zero_grad();
        let loss = model.nll_on(&mut tape, &sentence.tokens, &sentence.labels)?;
        tape.backward(loss, model.store_mut())?;
        for (name, acc) in sum_sq.iter_mut() {
            let id = model.store().id(name)?;
            let grad = model.store().grad(id);
            for (a, &g) in acc.data_mut().iter_mut().zip(grad.data()) {
                *a += g * g;
            }
        }
    }
    model.store_mut().zero_grad();

    let n = order.len() as f64;
    let mut fisher = sum_sq;
    for t in fisher.values_mut() {
        for v in t.data_mut() {
            *v /= n;
        }
    }
    let theta_star: BTreeMap<String, Tensor> = subset
        .iter()
        .map(|name| {
            let id = model.store().id(name).expect("checked above");
            (name.clone(), model.store().value(id).clone())
        })
        .collect();

    FisherSnapshot::from_parts(task_name.to_string(), theta_star, fisher)
}

/// Record the consolidation penalty on the tape:
/// sum over snapshots and their parameters of (lambda/2) * F * (theta - theta*)^2.
///
/// Returns a scalar node; its backward pass contributes
/// lambda * F * (theta - theta*) to each covered parameter's gradient.
/// Each snapshot contributes one subtotal node, so the total is exactly
/// the f64 sum of per-snapshot penalties.
pub fn penalty_on(
    tape: &mut Tape,
    model: &TaggerModel,
    snapshots: &[FisherSnapshot],
    lambda: f64,
) -> Result<NodeId> {
    let mut subtotals: Vec<Source> = Vec::with_capacity(snapshots.len());
    for snap in snapshots {
        let mut terms: Vec<Source> = Vec::new();
        for (name, anchor) in &snap.theta_star {
            let id = model.store().id(name).map_err(|_| CoreError::Consolidation {
                param: name.clone(),
                message: "snapshot parameter missing from model".into(),
            })?;
            let live = model.store().value(id);
            if live.shape() != anchor.shape() {
                return Err(CoreError::Consolidation {
                    param: name.clone(),
                    message: format!(
                        "live shape {} differs from snapshot shape {}",
                        live.shape_string(),
                        anchor.shape_string()
                    ),
                });
            }
            let node = tape.quad_penalty(model.store(), id, &snap.fisher[name], anchor, lambda / 2.0)?;
            terms.push(node.into());
        }
        if !terms.is_empty() {
            subtotals.push(tape.add_n(model.store(), &terms)?.into());
        }
    }
    if subtotals.is_empty() {
        return Ok(tape.input(Tensor::scalar(0.0)));
    }
    tape.add_n(model.store(), &subtotals)
}

/// Data loss plus consolidation penalty: the training objective for every
/// task after the first. With no snapshots or lambda == 0 this IS the data
/// loss node, bit-exactly.
pub fn consolidated_loss_on(
    tape: &mut Tape,
    model: &TaggerModel,
    tokens: &[usize],
    labels: &[usize],
    snapshots: &[FisherSnapshot],
    config: &EwcConfig,
) -> Result<NodeId> {
    let nll = model.nll_on(tape, tokens, labels)?;
    if snapshots.is_empty() || config.lambda == 0.0 {
        return Ok(nll);
    }
    let penalty = penalty_on(tape, model, snapshots, config.lambda)?;
    tape.add_n(model.store(), &[nll.into(), penalty.into()])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tagger::{TaggerConfig, B1, EMBEDDING, W1};

    fn tiny_model(seed: u64) -> TaggerModel {
        TaggerModel::init(TaggerConfig {
            vocab_size: 5,
            embed_dim: 2,
            window: 1,
            hidden_dim: 3,
            num_labels: 2,
            seed,
        })
        .unwrap()
    }

    fn sent(tokens: &[usize], labels: &[usize]) -> EncodedSentence {
        EncodedSentence {
            tokens: tokens.to_vec(),
            labels: labels.to_vec(),
        }
    }

    fn snapshot_at_current(model: &mut TaggerModel, data: &[EncodedSentence]) -> FisherSnapshot {
        let subset = subset_for_mode(model, EwcMode::FullModel);
        estimate_fisher(model, data, &subset, 100, 7, "taskA").unwrap()
    }

    #[test]
    fn subset_for_mode_matches_partition() {
        let model = tiny_model(1);
        let full = subset_for_mode(&model, EwcMode::FullModel);
        assert_eq!(full.len(), 5);
        let shared = subset_for_mode(&model, EwcMode::SharedOnly);
        assert_eq!(shared, vec![EMBEDDING.to_string(), W1.to_string(), B1.to_string()]);
        for head in TaggerModel::head_param_names() {
            assert!(!shared.contains(&head));
        }
    }

    #[test]
    fn fisher_entries_nonnegative_and_deterministic() {
        let mut model = tiny_model(2);
        let data = vec![sent(&[1, 2, 3], &[0, 1, 0]), sent(&[2, 4], &[1, 1])];
        let subset = subset_for_mode(&model, EwcMode::FullModel);
        let a = estimate_fisher(&mut model, &data, &subset, 10, 3, "t").unwrap();
        let b = estimate_fisher(&mut model, &data, &subset, 10, 3, "t").unwrap();
        for (name, t) in a.fisher() {
            assert!(t.data().iter().all(|&v| v >= 0.0), "{name}");
            assert_eq!(t.data(), b.fisher()[name].data(), "{name}");
        }
        // grads restored to zero on exit
        assert!(model.store().iter().all(|p| p.grad().data().iter().all(|&g| g == 0.0)));
    }

    #[test]
    fn fisher_zero_when_loss_constant_in_subset() {
        // With W1 zeroed the hidden layer ignores the embedding, so the
        // loss is constant in it and the embedding Fisher is exactly zero.
        let mut model = tiny_model(3);
        let id = model.store().id(W1).unwrap();
        model.store_mut().value_mut(id).fill(0.0);
        let data = vec![sent(&[1, 2], &[0, 1])];
        let snap =
            estimate_fisher(&mut model, &data, &[EMBEDDING.to_string()], 10, 0, "t").unwrap();
        assert!(snap.fisher()[EMBEDDING].data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn fisher_two_sentence_oracle() {
        // estimate_fisher must equal the mean of per-sentence squared
        // gradients computed by two isolated backward passes.
        let mut model = tiny_model(4);
        let data = vec![sent(&[1, 2, 3], &[0, 1, 1]), sent(&[4, 1], &[1, 0])];
        let subset = subset_for_mode(&model, EwcMode::FullModel);

        let mut expected: BTreeMap<String, Vec<f64>> = BTreeMap::new();
        for s in &data {
            model.store_mut().zero_grad();
            let mut tape = Tape::new();
            let loss = model.nll_on(&mut tape, &s.tokens, &s.labels).unwrap();
            tape.backward(loss, model.store_mut()).unwrap();
            for name in &subset {
                let id = model.store().id(name).unwrap();
                let grad = model.store().grad(id);
                let acc = expected
                    .entry(name.clone())
                    .or_insert_with(|| vec![0.0; grad.numel()]);
                for (a, &g) in acc.iter_mut().zip(grad.data()) {
                    *a += g * g / data.len() as f64;
                }
            }
        }
        model.store_mut().zero_grad();

        let snap = estimate_fisher(&mut model, &data, &subset, 10, 9, "t").unwrap();
        for name in &subset {
            for (got, want) in snap.fisher()[name].data().iter().zip(&expected[name]) {
                assert!((got - want).abs() < 1e-12, "{name}: {got} vs {want}");
            }
        }
    }

    #[test]
    fn fisher_usage_errors() {
        let mut model = tiny_model(5);
        let subset = subset_for_mode(&model, EwcMode::FullModel);
        assert!(matches!(
            estimate_fisher(&mut model, &[], &subset, 10, 0, "t"),
            Err(CoreError::Usage(_))
        ));
        let data = vec![sent(&[1], &[0])];
        assert!(matches!(
            estimate_fisher(&mut model, &data, &["nope".to_string()], 10, 0, "t"),
            Err(CoreError::Usage(_))
        ));
        assert!(matches!(
            estimate_fisher(&mut model, &data, &[], 10, 0, "t"),
            Err(CoreError::Usage(_))
        ));
    }

    #[test]
    fn penalty_zero_at_anchor() {
        let mut model = tiny_model(6);
        let data = vec![sent(&[1, 2], &[0, 1])];
        let snap = snapshot_at_current(&mut model, &data);
        let mut tape = Tape::new();
        let p = penalty_on(&mut tape, &model, &[snap], 100.0).unwrap();
        assert_eq!(tape.scalar_value(p), 0.0);
    }

    #[test]
    fn penalty_hand_example() {
        // F=[1,2], theta=[3,4], theta*=[1,1], lambda=2 -> 22
        let mut model = TaggerModel::init(TaggerConfig {
            vocab_size: 3,
            embed_dim: 1,
            window: 0,
            hidden_dim: 2,
            num_labels: 2,
            seed: 0,
        })
        .unwrap();
        let b1 = model.store().id(B1).unwrap();
        *model.store_mut().value_mut(b1) = Tensor::vector(vec![3.0, 4.0]);
        let snap = FisherSnapshot::from_parts(
            "A".into(),
            BTreeMap::from([(B1.to_string(), Tensor::vector(vec![1.0, 1.0]))]),
            BTreeMap::from([(B1.to_string(), Tensor::vector(vec![1.0, 2.0]))]),
        )
        .unwrap();
        let mut tape = Tape::new();
        let p = penalty_on(&mut tape, &model, &[snap], 2.0).unwrap();
        assert_eq!(tape.scalar_value(p), 22.0);
    }

    #[test]
    fn penalty_additive_over_snapshots_and_linear_in_fisher() {
        let mut model = tiny_model(7);
        let data1 = vec![sent(&[1, 2], &[0, 1])];
        let data2 = vec![sent(&[3, 4], &[1, 0])];
        let snap1 = snapshot_at_current(&mut model, &data1);
        let snap2 = snapshot_at_current(&mut model, &data2);
        // move away from the anchor so penalties are nonzero
        let id = model.store().id(W1).unwrap();
        for v in model.store_mut().value_mut(id).data_mut() {
            *v += 0.3;
        }

        let eval = |model: &TaggerModel, snaps: &[FisherSnapshot]| {
            let mut tape = Tape::new();
            let p = penalty_on(&mut tape, model, snaps, 5.0).unwrap();
            tape.scalar_value(p)
        };
        let p1 = eval(&model, std::slice::from_ref(&snap1));
        let p2 = eval(&model, std::slice::from_ref(&snap2));
        let both = eval(&model, &[snap1.clone(), snap2.clone()]);
        assert_eq!(both, p1 + p2);
        assert!(p1 > 0.0);

        // scaling a snapshot's fisher by c scales its contribution by c
        let scaled = FisherSnapshot::from_parts(
            snap1.task_name().to_string(),
            snap1.theta_star().clone(),
            snap1
                .fisher()
                .iter()
                .map(|(k, v)| {
                    let mut t = v.clone();
                    for x in t.data_mut() {
                        *x *= 3.0;
                    }
                    (k.clone(), t)
                })
                .collect(),
        )
        .unwrap();
        let p_scaled = eval(&model, &[scaled]);
        assert!((p_scaled - 3.0 * p1).abs() <= 1e-12 * p1.abs().max(1.0));
    }

    #[test]
    fn penalty_shape_mismatch_names_parameter() {
        let mut model = tiny_model(8);
        let data = vec![sent(&[1, 2], &[0, 1])];
        let snap = snapshot_at_current(&mut model, &data);
        // replacing the head changes W_head's shape; the FullModel snapshot
        // no longer applies
        let model = model.replace_head(4, 99).unwrap();
        let mut tape = Tape::new();
        let err = penalty_on(&mut tape, &model, &[snap], 1.0).unwrap_err();
        match err {
            CoreError::Consolidation { param, .. } => assert_eq!(param, "W_head"),
            other => panic!("expected consolidation error, got {other}"),
        }
    }

    #[test]
    fn consolidated_loss_degenerate_cases() {
        let mut model = tiny_model(9);
        let data = vec![sent(&[1, 2, 3], &[0, 1, 0])];
        let snap = snapshot_at_current(&mut model, &data);
        // nudge away from the anchor
        let id = model.store().id(W1).unwrap();
        for v in model.store_mut().value_mut(id).data_mut() {
            *v += 0.1;
        }
        let cfg_zero = EwcConfig {
            lambda: 0.0,
            mode: EwcMode::FullModel,
            fisher_sample_cap: 10,
        };
        let nll = model.nll_value(&data[0].tokens, &data[0].labels).unwrap();

        let mut tape = Tape::new();
        let no_snaps = consolidated_loss_on(&mut tape, &model, &data[0].tokens, &data[0].labels, &[], &cfg_zero)
            .unwrap();
        assert_eq!(tape.scalar_value(no_snaps).to_bits(), nll.to_bits());

        let mut tape = Tape::new();
        let zero_lambda = consolidated_loss_on(
            &mut tape,
            &model,
            &data[0].tokens,
            &data[0].labels,
            std::slice::from_ref(&snap),
            &cfg_zero,
        )
        .unwrap();
        assert_eq!(tape.scalar_value(zero_lambda).to_bits(), nll.to_bits());

        // doubling lambda doubles the penalty part
        let mut cfg = cfg_zero.clone();
        cfg.lambda = 10.0;
        let mut tape = Tape::new();
        let l10 = consolidated_loss_on(
            &mut tape,
            &model,
            &data[0].tokens,
            &data[0].labels,
            std::slice::from_ref(&snap),
            &cfg,
        )
        .unwrap();
        let v10 = tape.scalar_value(l10);
        cfg.lambda = 20.0;
        let mut tape = Tape::new();
        let l20 = consolidated_loss_on(
            &mut tape,
            &model,
            &data[0].tokens,
            &data[0].labels,
            std::slice::from_ref(&snap),
            &cfg,
        )
        .unwrap();
        let v20 = tape.scalar_value(l20);
        let pen10 = v10 - nll;
        let pen20 = v20 - nll;
        assert!(pen10 > 0.0);
        assert!((pen20 - 2.0 * pen10).abs() < 1e-9 * pen10.max(1.0));
    }

    #[test]
    fn penalty_gradient_is_lambda_f_diff() {
        let mut model = tiny_model(10);
        let data = vec![sent(&[1, 2], &[1, 0])];
        let snap = snapshot_at_current(&mut model, &data);
        let w1 = model.store().id(W1).unwrap();
        for v in model.store_mut().value_mut(w1).data_mut() {
            *v += 0.25;
        }
        let lambda = 4.0;
        model.store_mut().zero_grad();
        let mut tape = Tape::new();
        let p = penalty_on(&mut tape, &model, std::slice::from_ref(&snap), lambda).unwrap();
        tape.backward(p, model.store_mut()).unwrap();

        let live = model.store().value(w1).clone();
        let anchor = &snap.theta_star()[W1];
        let fisher = &snap.fisher()[W1];
        for i in 0..live.numel() {
            let want = lambda * fisher.data()[i] * (live.data()[i] - anchor.data()[i]);
            let got = model.store().grad(w1).data()[i];
            assert!((got - want).abs() < 1e-12, "{got} vs {want}");
        }
    }

    #[test]
    fn ewc_config_validation() {
        let ok = EwcConfig {
            lambda: 0.0,
            mode: EwcMode::SharedOnly,
            fisher_sample_cap: 1,
        };
        assert!(ok.validate().is_ok());
        let bad = EwcConfig {
            lambda: -1.0,
            ..ok.clone()
        };
        assert!(bad.validate().is_err());
        let bad = EwcConfig {
            fisher_sample_cap: 0,
            ..ok
        };
        assert!(bad.validate().is_err());
    }
}
