//! Unsupervised training of [`GnnModel`] over a corpus of conflict graphs.
//!
//! Every example is a short run of iterative inference from a random one-hot
//! start. Earlier passes run without recording; only the final pass is taped,
//! so gradients flow through one application of the model. By default the
//! run length is drawn per example, so the model is fitted on states from
//! every depth it meets at inference.

use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gnn::{clamp_anchors, random_one_hot, EdgeIndex, GnnModel};
use crate::graph::ConflictGraph;
use crate::losses::{BetaConfig, LossConfig, LossContext, LossTerm};
use crate::nn::{Adam, AdamConfig, Matrix, Tape};
use crate::rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scheme {
    /// One objective `L1 + beta * L2`, beta adapted from the L1 trend.
    DynamicWeighting,
    /// Separate gradients of L1 and L2 combined as `dL1 + beta * dL2`.
    GradientReweighting,
    /// One step on L1 with one optimizer, then one on L2 with another.
    DualOptimizer,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    /// Fixed `L1 + L2`.
    JointInit,
    /// The selected scheme with the beta controller.
    FineTune,
}

/// How many passes an example runs before the taped one.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Unroll {
    /// Always `forward_passes`.
    Fixed,
    /// Uniform in `1..=forward_passes`, drawn per example and epoch.
    Uniform,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub scheme: Scheme,
    pub stage: Stage,
    /// Total epochs of this run.
    pub epochs: usize,
    /// With `stage = fine_tune`, the first this many epochs run the joint
    /// initialization objective.
    pub joint_init_epochs: usize,
    pub lr: f64,
    /// Learning rate of the balance optimizer under `dual_optimizer`.
    pub lr_secondary: Option<f64>,
    /// Iterative passes per example; the last one carries gradients.
    pub forward_passes: usize,
    pub unroll: Unroll,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            scheme: Scheme::DynamicWeighting,
            stage: Stage::FineTune,
            epochs: 500,
            joint_init_epochs: 100,
            lr: 3e-4,
            lr_secondary: None,
            forward_passes: 10,
            unroll: Unroll::Uniform,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("invalid learning rate {}", self.lr)));
        }
        if self.forward_passes == 0 {
            return Err(Error::Config("forward_passes must be at least 1".into()));
        }
        match (self.scheme, self.lr_secondary) {
            (Scheme::DualOptimizer, None) => {
                Err(Error::Config("dual_optimizer needs lr_secondary".into()))
            }
            (_, Some(lr)) if !(lr >= 0.0 && lr.is_finite()) => Err(Error::Config(format!(
                "invalid secondary learning rate {lr}"
            ))),
            _ => Ok(()),
        }
    }

    fn stage_at(&self, epoch: usize) -> Stage {
        match self.stage {
            Stage::FineTune if epoch < self.joint_init_epochs => Stage::JointInit,
            s => s,
        }
    }
}

/// Decays beta when the colorability loss stops improving.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BetaController {
    pub config: BetaConfig,
    pub beta: f64,
    /// Infinite until the first observation; stored as `null`.
    #[serde(with = "unbounded")]
    pub best: f64,
    pub stale: usize,
}

mod unbounded {
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
        v.is_finite().then_some(*v).serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        Ok(Option::<f64>::deserialize(d)?.unwrap_or(f64::INFINITY))
    }
}

impl BetaController {
    pub fn new(config: BetaConfig) -> Self {
        Self {
            beta: config.initial,
            config,
            best: f64::INFINITY,
            stale: 0,
        }
    }

    /// Feeds one epoch-mean L1 and returns the beta for the next epoch.
    pub fn observe(&mut self, l1: f64) -> f64 {
        if l1 <= self.best {
            self.best = l1;
            self.stale = 0;
        } else if l1 > self.best * (1.0 + self.config.tolerance) {
            self.stale += 1;
            if self.stale >= self.config.patience {
                self.beta = (self.beta * self.config.decay)
                    .max(self.config.min)
                    .min(self.beta);
                self.stale = 0;
            }
        }
        self.beta
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub stage: Stage,
    /// Corpus-mean unweighted value of every enabled term.
    pub terms: Vec<(LossTerm, f64)>,
    pub l1: f64,
    pub l2: f64,
    /// Beta in effect during this epoch.
    pub beta: f64,
}

/// Resumable progress, stored in checkpoint metadata.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainState {
    pub epochs_completed: usize,
    pub controller: BetaController,
}

pub struct Trainer<'m> {
    model: &'m mut GnnModel,
    loss: LossConfig,
    config: TrainConfig,
    primary: Adam,
    secondary: Adam,
    state: TrainState,
}

struct Example<'g> {
    edges: EdgeIndex,
    ctx: LossContext<'g>,
}

impl<'m> Trainer<'m> {
    pub fn new(model: &'m mut GnnModel, loss: LossConfig, config: TrainConfig) -> Result<Self> {
        loss.validate()?;
        config.validate()?;
        let adam = |lr| {
            Adam::new(AdamConfig {
                lr,
                ..AdamConfig::default()
            })
        };
        let primary = adam(config.lr);
        let secondary = adam(config.lr_secondary.unwrap_or(config.lr));
        let state = TrainState {
            epochs_completed: 0,
            controller: BetaController::new(loss.beta.clone()),
        };
        Ok(Self {
            model,
            loss,
            config,
            primary,
            secondary,
            state,
        })
    }

    /// Continues from earlier progress; epoch numbering picks up where it
    /// stopped. Optimizer moments start fresh.
    pub fn resume(mut self, state: TrainState) -> Self {
        self.state = state;
        self
    }

    pub fn state(&self) -> &TrainState {
        &self.state
    }

    /// Runs `config.epochs` epochs over `corpus`, returning their records.
    pub fn run(&mut self, corpus: &[ConflictGraph]) -> Result<Vec<EpochRecord>> {
        self.run_with(corpus, |_| {})
    }

    /// As [`Trainer::run`], calling `on_epoch` after every epoch.
    pub fn run_with(
        &mut self,
        corpus: &[ConflictGraph],
        mut on_epoch: impl FnMut(&EpochRecord),
    ) -> Result<Vec<EpochRecord>> {
        if corpus.is_empty() {
            return Err(Error::InvalidParameter("training corpus is empty".into()));
        }
        if let Some(g) = corpus.iter().find(|g| g.k() != self.model.k()) {
            return Err(Error::Contract(format!(
                "model has k = {}, corpus graph has k = {}",
                self.model.k(),
                g.k()
            )));
        }
        let examples: Vec<Example> = corpus
            .iter()
            .map(|g| Example {
                edges: EdgeIndex::new(g),
                ctx: LossContext::new(g, self.loss.delta_loss),
            })
            .collect();
        let mut history = Vec::with_capacity(self.config.epochs);
        for _ in 0..self.config.epochs {
            let rec = self.epoch(&examples)?;
            on_epoch(&rec);
            history.push(rec);
        }
        Ok(history)
    }

    fn epoch(&mut self, examples: &[Example]) -> Result<EpochRecord> {
        let epoch = self.state.epochs_completed;
        let stage = self.config.stage_at(epoch);
        let beta = match stage {
            Stage::JointInit => 1.0,
            Stage::FineTune => self.state.controller.beta,
        };
        let mut order: Vec<usize> = (0..examples.len()).collect();
        order.shuffle(&mut rng::stream(
            self.config.seed,
            "epoch-order",
            epoch as u64,
        ));

        let enabled: Vec<LossTerm> = self.loss.weights.enabled().collect();
        let mut sums = vec![0.0; enabled.len()];
        let (mut l1, mut l2) = (0.0, 0.0);
        for &i in &order {
            let init_seed = rng::derive_seed(
                self.config.seed,
                "train-init",
                ((epoch as u64) << 32) | i as u64,
            );
            let ev = self.step(&examples[i], init_seed, beta, epoch)?;
            for (s, (_, v)) in sums.iter_mut().zip(&ev.terms) {
                *s += v;
            }
            l1 += ev.primary;
            l2 += ev.secondary;
        }
        let n = examples.len() as f64;
        let rec = EpochRecord {
            epoch,
            stage,
            terms: enabled
                .into_iter()
                .zip(sums.into_iter().map(|s| s / n))
                .collect(),
            l1: l1 / n,
            l2: l2 / n,
            beta,
        };
        if stage == Stage::FineTune && self.config.scheme == Scheme::DynamicWeighting {
            self.state.controller.observe(rec.l1);
        }
        self.state.epochs_completed += 1;
        Ok(rec)
    }

    fn warm_start(&self, ex: &Example, init_seed: u64) -> Result<Matrix> {
        let g = ex.ctx.graph;
        let mut f1 = random_one_hot(g.node_count(), g.k(), init_seed);
        let passes = match self.config.unroll {
            Unroll::Fixed => self.config.forward_passes,
            Unroll::Uniform => {
                rng::stream(init_seed, "train-unroll", 0).gen_range(1..=self.config.forward_passes)
            }
        };
        for _ in 1..passes {
            clamp_anchors(g, &mut f1);
            f1 = self.model.forward_indexed(&ex.edges, &f1)?;
        }
        clamp_anchors(g, &mut f1);
        Ok(f1)
    }

    fn step(
        &mut self,
        ex: &Example,
        init_seed: u64,
        beta: f64,
        epoch: usize,
    ) -> Result<crate::losses::Evaluation> {
        let f1 = self.warm_start(ex, init_seed)?;
        let mut tape = Tape::new();
        let x = tape.input(f1.clone());
        let out = self.model.forward_on_tape(&mut tape, &ex.edges, x)?;
        let ev = ex.ctx.evaluate(&self.loss.weights, tape.value(out));
        check_finite(&ev, epoch)?;
        let params = self.model.params_mut();
        match self.config.scheme {
            Scheme::DynamicWeighting => {
                let mut seed = ev.grad_primary.clone();
                seed.add_scaled(&ev.grad_secondary, beta);
                tape.backward_with(out, seed, params)?;
                self.finish_step(epoch, false)?;
            }
            Scheme::GradientReweighting => {
                tape.backward_with(out, ev.grad_secondary.clone(), params)?;
                params.scale_grads(beta);
                tape.backward_with(out, ev.grad_primary.clone(), params)?;
                self.finish_step(epoch, false)?;
            }
            Scheme::DualOptimizer => {
                tape.backward_with(out, ev.grad_primary.clone(), params)?;
                self.finish_step(epoch, false)?;
                if self.loss.weights.enabled().any(LossTerm::is_balance) {
                    let mut tape = Tape::new();
                    let x = tape.input(f1);
                    let out = self.model.forward_on_tape(&mut tape, &ex.edges, x)?;
                    let second = ex.ctx.evaluate(&self.loss.weights, tape.value(out));
                    check_finite(&second, epoch)?;
                    let mut seed = second.grad_secondary;
                    seed.scale(beta);
                    tape.backward_with(out, seed, self.model.params_mut())?;
                    self.finish_step(epoch, true)?;
                }
            }
        }
        Ok(ev)
    }

    fn finish_step(&mut self, epoch: usize, secondary: bool) -> Result<()> {
        let params = self.model.params_mut();
        if !params.grads_finite() {
            return Err(Error::Diverged {
                epoch,
                term: "gradient".into(),
            });
        }
        if secondary {
            self.secondary.step(params);
        } else {
            self.primary.step(params);
        }
        Ok(())
    }
}

fn check_finite(ev: &crate::losses::Evaluation, epoch: usize) -> Result<()> {
    if let Some((t, _)) = ev.terms.iter().find(|(_, v)| !v.is_finite()) {
        return Err(Error::Diverged {
            epoch,
            term: t.name().into(),
        });
    }
    Ok(())
}

/// Loss history as CSV: epoch, stage, every enabled term, l1, l2, beta.
pub fn history_csv(history: &[EpochRecord]) -> String {
    let mut out = String::from("epoch,stage");
    if let Some(first) = history.first() {
        for (t, _) in &first.terms {
            out.push(',');
            out.push_str(t.name());
        }
    }
    out.push_str(",l1,l2,beta\n");
    for r in history {
        let stage = match r.stage {
            Stage::JointInit => "joint_init",
            Stage::FineTune => "fine_tune",
        };
        write!(out, "{},{stage}", r.epoch).unwrap();
        for (_, v) in &r.terms {
            write!(out, ",{v}").unwrap();
        }
        writeln!(out, ",{},{},{}", r.l1, r.l2, r.beta).unwrap();
    }
    out
}

/// Convenience wrapper: a fresh trainer run from epoch zero.
pub fn train(
    model: &mut GnnModel,
    corpus: &[ConflictGraph],
    loss: &LossConfig,
    config: &TrainConfig,
) -> Result<(Vec<EpochRecord>, TrainState)> {
    let mut t = Trainer::new(model, loss.clone(), config.clone())?;
    let history = t.run(corpus)?;
    Ok((history, t.state().clone()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gnn::Architecture;
    use crate::graph::{conflict_count, harden, Coloring, SoftAssignment};
    use crate::losses::LossWeights;

    fn small_arch(k: usize) -> Architecture {
        Architecture {
            k,
            d_embed: 8,
            attention_hidden: 8,
            update_hidden: 16,
            layers: crate::gnn::LAYER_COUNT,
        }
    }

    fn triangle() -> ConflictGraph {
        ConflictGraph::new(3, 3, [(0, 1), (1, 2), (0, 2)], []).unwrap()
    }

    fn cycle(n: usize) -> ConflictGraph {
        ConflictGraph::new(n, 3, (0..n).map(|i| (i, (i + 1) % n)), []).unwrap()
    }

    #[test]
    fn controller_decays_when_l1_regresses() {
        let mut c = BetaController::new(BetaConfig::default());
        assert_eq!(c.observe(1.0), 1.0);
        for l in [1.1, 1.2] {
            assert_eq!(c.observe(l), 1.0);
        }
        assert_eq!(c.observe(1.3), 0.5);
        for l in [1.4, 1.5, 1.6] {
            c.observe(l);
        }
        assert_eq!(c.beta, 0.25);
    }

    #[test]
    fn controller_never_increases_and_respects_floor() {
        let mut c = BetaController::new(BetaConfig {
            patience: 1,
            ..BetaConfig::default()
        });
        let mut prev = c.beta;
        for i in 0..40 {
            let l = if i % 3 == 0 { 0.5 } else { 2.0 + i as f64 };
            let b = c.observe(l);
            assert!(b <= prev);
            assert!(b >= 1e-3);
            prev = b;
        }
        assert_eq!(prev, 1e-3);
    }

    #[test]
    fn controller_tolerance_absorbs_small_regressions() {
        let mut c = BetaController::new(BetaConfig {
            patience: 1,
            tolerance: 0.1,
            ..BetaConfig::default()
        });
        c.observe(1.0);
        assert_eq!(c.observe(1.05), 1.0);
        assert_eq!(c.observe(1.2), 0.5);
    }

    #[test]
    fn dual_optimizer_needs_second_rate() {
        let tc = TrainConfig {
            scheme: Scheme::DualOptimizer,
            ..TrainConfig::default()
        };
        assert!(matches!(tc.validate(), Err(Error::Config(_))));
    }

    fn permutation_starts() -> Vec<SoftAssignment> {
        let perms = [
            [0, 1, 2],
            [0, 2, 1],
            [1, 0, 2],
            [1, 2, 0],
            [2, 0, 1],
            [2, 1, 0],
        ];
        perms
            .iter()
            .map(|p| SoftAssignment::one_hot(&Coloring::new(p.to_vec()), 3))
            .collect()
    }

    #[test]
    fn single_triangle_pairwise_training_colors_it() {
        let g = triangle();
        let mut model = GnnModel::new(Architecture::new(3), 1).unwrap();
        let lc = LossConfig {
            weights: LossWeights::only(&[LossTerm::Pairwise]),
            ..LossConfig::default()
        };
        let tc = TrainConfig {
            epochs: 500,
            joint_init_epochs: 0,
            forward_passes: 1,
            ..TrainConfig::default()
        };
        let (history, _) = train(&mut model, std::slice::from_ref(&g), &lc, &tc).unwrap();
        assert!(history.last().unwrap().l1 < history[0].l1);
        for start in permutation_starts() {
            let c = harden(&model.model_forward(&g, &start).unwrap());
            assert_eq!(
                conflict_count(&g, &c).unwrap(),
                0,
                "start {:?}",
                start.probs()
            );
        }
    }

    /// Two triangle nodes with the same start are exchanged by an
    /// automorphism that fixes the input, so they receive identical outputs
    /// and the pair always conflicts after hardening.
    #[test]
    fn repeated_start_colors_on_a_triangle_cannot_be_separated() {
        let g = triangle();
        let model = GnnModel::new(Architecture::new(3), 4).unwrap();
        let start = SoftAssignment::one_hot(&Coloring::new(vec![2, 1, 2]), 3);
        let out = model.model_forward(&g, &start).unwrap();
        assert_eq!(out.row(0), out.row(2));
    }

    #[test]
    fn zeroed_model_starts_at_edges_over_k() {
        let corpus = [cycle(5), cycle(8), triangle()];
        let mut model = GnnModel::new(small_arch(3), 1).unwrap();
        model.params_mut().set_all(0.0);
        let tc = TrainConfig {
            epochs: 1,
            lr: 0.0,
            ..TrainConfig::default()
        };
        let lc = LossConfig {
            weights: LossWeights::only(&[LossTerm::Pairwise]),
            ..LossConfig::default()
        };
        let (h, _) = train(&mut model, &corpus, &lc, &tc).unwrap();
        let expect = (5.0 + 8.0 + 3.0) / 3.0 / 3.0;
        assert!((h[0].l1 - expect).abs() < 1e-12);
    }

    fn run_scheme(scheme: Scheme, beta: f64) -> (Vec<EpochRecord>, Vec<Matrix>) {
        let corpus = [cycle(5), triangle(), cycle(6)];
        let mut model = GnnModel::new(small_arch(3), 3).unwrap();
        let mut lc = LossConfig::default();
        lc.beta.initial = beta;
        let tc = TrainConfig {
            scheme,
            epochs: 4,
            joint_init_epochs: 0,
            forward_passes: 3,
            seed: 9,
            lr_secondary: Some(1e-3),
            ..TrainConfig::default()
        };
        let (h, _) = train(&mut model, &corpus, &lc, &tc).unwrap();
        let ps = model.params();
        (h, ps.ids().map(|id| ps.value(id).clone()).collect())
    }

    #[test]
    fn reweighting_equals_dynamic_weighting_at_zero_beta() {
        let (ha, pa) = run_scheme(Scheme::DynamicWeighting, 0.0);
        let (hb, pb) = run_scheme(Scheme::GradientReweighting, 0.0);
        assert_eq!(pa, pb);
        assert_eq!(
            ha.iter().map(|r| r.l1).collect::<Vec<_>>(),
            hb.iter().map(|r| r.l1).collect::<Vec<_>>()
        );
    }

    #[test]
    fn training_is_deterministic() {
        for scheme in [
            Scheme::DynamicWeighting,
            Scheme::GradientReweighting,
            Scheme::DualOptimizer,
        ] {
            assert_eq!(run_scheme(scheme, 1.0), run_scheme(scheme, 1.0));
        }
    }

    #[test]
    fn joint_init_epochs_hold_beta_at_one() {
        let corpus = [cycle(5)];
        let mut model = GnnModel::new(small_arch(3), 3).unwrap();
        let mut lc = LossConfig::default();
        lc.beta.initial = 0.25;
        let tc = TrainConfig {
            epochs: 4,
            joint_init_epochs: 2,
            forward_passes: 2,
            ..TrainConfig::default()
        };
        let (h, _) = train(&mut model, &corpus, &lc, &tc).unwrap();
        let stages: Vec<(Stage, f64)> = h.iter().map(|r| (r.stage, r.beta)).collect();
        assert_eq!(
            stages,
            vec![
                (Stage::JointInit, 1.0),
                (Stage::JointInit, 1.0),
                (Stage::FineTune, 0.25),
                (Stage::FineTune, 0.25)
            ]
        );
    }

    #[test]
    fn fresh_state_survives_json() {
        let st = TrainState {
            epochs_completed: 0,
            controller: BetaController::new(BetaConfig::default()),
        };
        let back: TrainState = serde_json::from_str(&serde_json::to_string(&st).unwrap()).unwrap();
        assert_eq!(back, st);
        assert!(back.controller.best.is_infinite());
    }

    #[test]
    fn resume_continues_epoch_numbering() {
        let corpus = [cycle(5)];
        let mut model = GnnModel::new(small_arch(3), 3).unwrap();
        let tc = TrainConfig {
            epochs: 3,
            forward_passes: 2,
            ..TrainConfig::default()
        };
        let (h1, state) = train(&mut model, &corpus, &LossConfig::default(), &tc).unwrap();
        let mut t = Trainer::new(&mut model, LossConfig::default(), tc)
            .unwrap()
            .resume(state);
        let h2 = t.run(&corpus).unwrap();
        let epochs: Vec<usize> = h1.iter().chain(&h2).map(|r| r.epoch).collect();
        assert_eq!(epochs, (0..6).collect::<Vec<_>>());
    }

    #[test]
    fn nan_parameters_report_divergence_with_epoch() {
        let corpus = [cycle(5)];
        let mut model = GnnModel::new(small_arch(3), 3).unwrap();
        model.params_mut().set_all(f64::NAN);
        let tc = TrainConfig {
            epochs: 2,
            forward_passes: 1,
            ..TrainConfig::default()
        };
        let err = train(&mut model, &corpus, &LossConfig::default(), &tc).unwrap_err();
        assert!(matches!(err, Error::Diverged { epoch: 0, .. }), "{err}");
    }

    #[test]
    fn history_csv_has_header_and_rows() {
        let corpus = [cycle(4)];
        let mut model = GnnModel::new(small_arch(3), 3).unwrap();
        let tc = TrainConfig {
            epochs: 2,
            joint_init_epochs: 1,
            forward_passes: 1,
            ..TrainConfig::default()
        };
        let (h, _) = train(&mut model, &corpus, &LossConfig::default(), &tc).unwrap();
        let csv = history_csv(&h);
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(
            lines[0],
            "epoch,stage,pairwise,balance_js,anchor,l1,l2,beta"
        );
        assert_eq!(lines.len(), 3);
        assert!(lines[1].starts_with("0,joint_init,"));
        assert!(lines[2].starts_with("1,fine_tune,"));
    }
}
