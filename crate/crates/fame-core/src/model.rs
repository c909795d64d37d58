//! The fusion model: per-modality projections, disparity-driven modality
//! weights, sigmoid feature gate, frozen fairness probes, and the classifier
//! head. All ablation variants run through the same forward.

use std::cell::Cell;

use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::cohort::{Cohort, ModalityDef, SensitiveAttributes};
use crate::error::{Error, Result};
use crate::metrics::{eddi_overall, PredictionSet};
use crate::optim::Parameter;
use crate::tape::{NodeId, Tape};
use crate::tensor::{sigmoid_scalar, Tensor2};

pub const DEMOGRAPHIC_MODALITY: &str = "demographic";

/// Fusion variants. `Fame` combines disparity weighting and the feature gate;
/// the others ablate one or both components, and `Dfc` drops the demographic
/// modality entirely.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum FusionMode {
    Fame,
    EddiOnly,
    SigmoidOnly,
    Average,
    Dfc,
}

impl FusionMode {
    pub const ALL: [FusionMode; 5] = [
        FusionMode::Average,
        FusionMode::SigmoidOnly,
        FusionMode::EddiOnly,
        FusionMode::Fame,
        FusionMode::Dfc,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            FusionMode::Fame => "fame",
            FusionMode::EddiOnly => "eddi_only",
            FusionMode::SigmoidOnly => "sigmoid_only",
            FusionMode::Average => "average",
            FusionMode::Dfc => "dfc",
        }
    }

    pub fn parse(s: &str) -> Result<FusionMode> {
        match s {
            "fame" => Ok(FusionMode::Fame),
            "eddi_only" => Ok(FusionMode::EddiOnly),
            "sigmoid_only" => Ok(FusionMode::SigmoidOnly),
            "average" => Ok(FusionMode::Average),
            "dfc" => Ok(FusionMode::Dfc),
            other => Err(Error::config(format!("unknown fusion mode '{other}'"))),
        }
    }

    /// Does the mode apply the sigmoid feature gate?
    pub fn uses_gate(&self) -> bool {
        matches!(self, FusionMode::Fame | FusionMode::SigmoidOnly)
    }

    /// Does the mode update modality weights from probe disparity?
    pub fn updates_weights(&self) -> bool {
        matches!(self, FusionMode::Fame | FusionMode::EddiOnly)
    }

    /// Do the projected modalities get averaged rather than concatenated?
    fn averages(&self) -> bool {
        matches!(self, FusionMode::Average | FusionMode::Dfc)
    }
}

impl std::fmt::Display for FusionMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Frozen per-modality affine probe over the projected embedding.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeHead {
    /// proj_dim x 1
    pub weights: Tensor2,
    pub bias: f64,
}

/// Mean disparity of each modality's frozen probe, averaged over the
/// sensitive attributes and tasks. Values are non-negative.
#[derive(Clone, Debug, PartialEq)]
pub struct ModalityEddi {
    pub per_modality: Vec<f64>,
}

/// One minibatch (or full split) of per-modality embeddings with labels and
/// attributes. Modality reads are counted so unawareness contracts can be
/// checked.
pub struct Batch {
    tensors: Vec<Tensor2>,
    counts: Vec<Cell<usize>>,
    pub ids: Vec<String>,
    /// N x T matrix of 0/1 labels.
    pub targets: Tensor2,
    pub attrs: Vec<SensitiveAttributes>,
}

impl Batch {
    pub fn from_cohort(cohort: &Cohort, ids: &[String]) -> Result<Batch> {
        let index = cohort.id_index();
        let t = cohort.schema.task_count;
        let n = ids.len();
        if n == 0 {
            return Err(Error::input("empty id list".to_string()));
        }
        let mut tensors: Vec<Tensor2> = cohort
            .schema
            .modalities
            .iter()
            .map(|m| Tensor2::zeros(n, m.width))
            .collect();
        let mut targets = Tensor2::zeros(n, t);
        let mut attrs = Vec::with_capacity(n);
        for (row, id) in ids.iter().enumerate() {
            let &rec_idx = index
                .get(id.as_str())
                .ok_or_else(|| Error::input(format!("id '{id}' not in cohort")))?;
            let rec = &cohort.records[rec_idx];
            for (m, def) in cohort.schema.modalities.iter().enumerate() {
                let vec = &rec.modalities[&def.name];
                for (c, v) in vec.iter().enumerate() {
                    tensors[m].set(row, c, *v);
                }
            }
            for (c, l) in rec.labels.iter().enumerate() {
                targets.set(row, c, *l as f64);
            }
            attrs.push(rec.attrs);
        }
        let counts = (0..tensors.len()).map(|_| Cell::new(0)).collect();
        Ok(Batch { tensors, counts, ids: ids.to_vec(), targets, attrs })
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn modality_count(&self) -> usize {
        self.tensors.len()
    }

    /// Read one modality's embedding block, bumping its access counter.
    pub fn modality(&self, m: usize) -> &Tensor2 {
        self.counts[m].set(self.counts[m].get() + 1);
        &self.tensors[m]
    }

    /// How many times a modality has been read.
    pub fn access_count(&self, m: usize) -> usize {
        self.counts[m].get()
    }

    pub fn reset_access_counts(&self) {
        for c in &self.counts {
            c.set(0);
        }
    }
}

/// Which trainable parameter a tape leaf corresponds to.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamRef {
    Projection(usize),
    Gate,
    Hidden,
    HiddenBias,
    Output,
    OutputBias,
}

/// Tape handles produced by one forward pass.
pub struct ForwardPass {
    pub logits: NodeId,
    /// Concatenated weighted projections, before the gate (concat modes only).
    pub z_concat: Option<NodeId>,
    /// sigmoid(gate parameters), 1 x (M*k) (gated modes only).
    pub gate_activation: Option<NodeId>,
    /// The representation the classifier consumed.
    pub fused: NodeId,
    pub param_nodes: Vec<(ParamRef, NodeId)>,
}

/// Full model state. Probe heads are initialized from the seed and never
/// receive gradients.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FusionState {
    pub modalities: Vec<ModalityDef>,
    pub proj_dim: usize,
    pub hidden_dim: usize,
    pub task_count: usize,
    pub mode: FusionMode,
    pub seed: u64,
    pub epoch: usize,
    pub dropout_rate: f64,
    /// Raw (unnormalized) modality weights w_m, all positive.
    pub raw_weights: Vec<f64>,
    pub projections: Vec<Parameter>,
    pub gate: Option<Parameter>,
    pub hidden: Parameter,
    pub hidden_bias: Parameter,
    pub output: Parameter,
    pub output_bias: Parameter,
    pub probes: Vec<ProbeHead>,
}

fn glorot(rng: &mut StdRng, rows: usize, cols: usize) -> Tensor2 {
    let bound = (6.0 / (rows + cols) as f64).sqrt();
    let data = (0..rows * cols).map(|_| rng.random_range(-bound..bound)).collect();
    Tensor2::from_vec(rows, cols, data).unwrap()
}

impl FusionState {
    /// Initialize a fresh state: equal modality weights 1/M, zero gate (so
    /// gate activations start at 0.5), seeded uniform projections and
    /// classifier, and frozen random probes.
    pub fn init(
        modalities: &[ModalityDef],
        proj_dim: usize,
        hidden_dim: usize,
        task_count: usize,
        mode: FusionMode,
        dropout_rate: f64,
        seed: u64,
    ) -> Result<FusionState> {
        if modalities.is_empty() {
            return Err(Error::config("model needs at least one modality".to_string()));
        }
        if proj_dim == 0 || hidden_dim == 0 || task_count == 0 {
            return Err(Error::config("model dimensions must be positive".to_string()));
        }
        if modalities.iter().any(|m| m.width == 0) {
            return Err(Error::config("modality widths must be positive".to_string()));
        }
        if mode == FusionMode::Dfc {
            if !modalities.iter().any(|m| m.name == DEMOGRAPHIC_MODALITY) {
                return Err(Error::config(
                    "dfc mode requires a modality named 'demographic'".to_string(),
                ));
            }
            if modalities.len() < 2 {
                return Err(Error::config("dfc mode needs a non-demographic modality".to_string()));
            }
        }
        let m_count = modalities.len();
        let mut rng = StdRng::seed_from_u64(seed);
        let projections: Vec<Parameter> = modalities
            .iter()
            .map(|m| Parameter::new(glorot(&mut rng, m.width, proj_dim)))
            .collect();

        let active = match mode {
            FusionMode::Dfc => modalities.iter().filter(|m| m.name != DEMOGRAPHIC_MODALITY).count(),
            _ => m_count,
        };
        let fused_width = if mode.averages() { proj_dim } else { active * proj_dim };

        let hidden = Parameter::new(glorot(&mut rng, fused_width, hidden_dim));
        let hidden_bias = Parameter::new(Tensor2::zeros(1, hidden_dim));
        let output = Parameter::new(glorot(&mut rng, hidden_dim, task_count));
        let output_bias = Parameter::new(Tensor2::zeros(1, task_count));
        let gate = if mode.uses_gate() {
            Some(Parameter::new(Tensor2::zeros(1, active * proj_dim)))
        } else {
            None
        };
        let probes = (0..m_count)
            .map(|_| ProbeHead {
                weights: glorot(&mut rng, proj_dim, 1),
                bias: {
                    let bound = (6.0 / (proj_dim + 1) as f64).sqrt();
                    rng.random_range(-bound..bound)
                },
            })
            .collect();

        Ok(FusionState {
            modalities: modalities.to_vec(),
            proj_dim,
            hidden_dim,
            task_count,
            mode,
            seed,
            epoch: 0,
            dropout_rate,
            raw_weights: vec![1.0 / m_count as f64; m_count],
            projections,
            gate,
            hidden,
            hidden_bias,
            output,
            output_bias,
            probes,
        })
    }

    /// Indices of the modalities this mode fuses.
    pub fn active_modalities(&self) -> Vec<usize> {
        match self.mode {
            FusionMode::Dfc => self
                .modalities
                .iter()
                .enumerate()
                .filter(|(_, m)| m.name != DEMOGRAPHIC_MODALITY)
                .map(|(i, _)| i)
                .collect(),
            _ => (0..self.modalities.len()).collect(),
        }
    }

    /// Normalized modality weights, summing to one.
    pub fn normalized_weights(&self) -> Vec<f64> {
        let sum: f64 = self.raw_weights.iter().sum();
        self.raw_weights.iter().map(|w| w / sum).collect()
    }

    /// The weight each modality effectively carries into fusion under the
    /// current mode (zero for an excluded modality).
    pub fn effective_weights(&self) -> Vec<f64> {
        let m = self.modalities.len();
        match self.mode {
            FusionMode::Fame | FusionMode::EddiOnly => self.normalized_weights(),
            FusionMode::Average | FusionMode::SigmoidOnly => vec![1.0 / m as f64; m],
            FusionMode::Dfc => {
                let active = self.active_modalities();
                let share = 1.0 / active.len() as f64;
                (0..m).map(|i| if active.contains(&i) { share } else { 0.0 }).collect()
            }
        }
    }

    /// Mean gate activation per modality block; 1.0 for fused ungated blocks,
    /// 0.0 for a modality excluded from fusion.
    pub fn gate_block_means(&self) -> Vec<f64> {
        let active = self.active_modalities();
        match &self.gate {
            Some(gate) => {
                let k = self.proj_dim;
                let mut out = vec![0.0; self.modalities.len()];
                for (slot, m) in active.iter().enumerate() {
                    let block = &gate.value.data()[slot * k..(slot + 1) * k];
                    out[*m] = block.iter().map(|v| sigmoid_scalar(*v)).sum::<f64>() / k as f64;
                }
                out
            }
            None => (0..self.modalities.len())
                .map(|m| if active.contains(&m) { 1.0 } else { 0.0 })
                .collect(),
        }
    }

    /// Trainable parameters for the current mode, in a fixed order.
    pub fn trainable_refs(&self) -> Vec<ParamRef> {
        let mut refs: Vec<ParamRef> =
            self.active_modalities().into_iter().map(ParamRef::Projection).collect();
        if self.gate.is_some() {
            refs.push(ParamRef::Gate);
        }
        refs.extend([ParamRef::Hidden, ParamRef::HiddenBias, ParamRef::Output, ParamRef::OutputBias]);
        refs
    }

    pub fn param(&self, r: ParamRef) -> &Parameter {
        match r {
            ParamRef::Projection(m) => &self.projections[m],
            ParamRef::Gate => self.gate.as_ref().expect("mode has no gate"),
            ParamRef::Hidden => &self.hidden,
            ParamRef::HiddenBias => &self.hidden_bias,
            ParamRef::Output => &self.output,
            ParamRef::OutputBias => &self.output_bias,
        }
    }

    pub fn param_mut(&mut self, r: ParamRef) -> &mut Parameter {
        match r {
            ParamRef::Projection(m) => &mut self.projections[m],
            ParamRef::Gate => self.gate.as_mut().expect("mode has no gate"),
            ParamRef::Hidden => &mut self.hidden,
            ParamRef::HiddenBias => &mut self.hidden_bias,
            ParamRef::Output => &mut self.output,
            ParamRef::OutputBias => &mut self.output_bias,
        }
    }

    fn check_batch(&self, batch: &Batch) -> Result<()> {
        if batch.modality_count() != self.modalities.len() {
            return Err(Error::shape(format!(
                "batch has {} modalities, model expects {}",
                batch.modality_count(),
                self.modalities.len()
            )));
        }
        Ok(())
    }

    /// One forward pass on the tape. `dropout_rng: Some(_)` selects training
    /// mode (dropout active); `None` is evaluation mode.
    pub fn forward(
        &self,
        tape: &mut Tape,
        batch: &Batch,
        dropout_rng: Option<&mut StdRng>,
    ) -> Result<ForwardPass> {
        self.check_batch(batch)?;
        let active = self.active_modalities();
        let mut param_nodes = Vec::new();

        let mut projected = Vec::with_capacity(active.len());
        for &m in &active {
            let input = batch.modality(m);
            if input.cols() != self.modalities[m].width {
                return Err(Error::shape(format!(
                    "modality '{}' has width {}, model expects {}",
                    self.modalities[m].name,
                    input.cols(),
                    self.modalities[m].width
                )));
            }
            let z = tape.leaf(input.clone());
            let w = tape.leaf(self.projections[m].value.clone());
            param_nodes.push((ParamRef::Projection(m), w));
            projected.push(tape.matmul(z, w)?);
        }

        let weights = self.normalized_weights();
        let (fused, z_concat, gate_activation) = if self.mode.averages() {
            let mut sum = projected[0];
            for p in &projected[1..] {
                sum = tape.add(sum, *p)?;
            }
            (tape.scale(sum, 1.0 / active.len() as f64), None, None)
        } else {
            let share = 1.0 / active.len() as f64;
            let parts: Vec<NodeId> = active
                .iter()
                .zip(&projected)
                .map(|(&m, &p)| {
                    let w = match self.mode {
                        FusionMode::SigmoidOnly => share,
                        _ => weights[m],
                    };
                    tape.scale(p, w)
                })
                .collect();
            let zcat = tape.concat_cols(&parts)?;
            if let Some(gate) = &self.gate {
                let g = tape.leaf(gate.value.clone());
                param_nodes.push((ParamRef::Gate, g));
                let act = tape.sigmoid(g);
                let gated = tape.gate_rows(act, zcat)?;
                (gated, Some(zcat), Some(act))
            } else {
                (zcat, Some(zcat), None)
            }
        };

        let wh = tape.leaf(self.hidden.value.clone());
        param_nodes.push((ParamRef::Hidden, wh));
        let bh = tape.leaf(self.hidden_bias.value.clone());
        param_nodes.push((ParamRef::HiddenBias, bh));
        let wo = tape.leaf(self.output.value.clone());
        param_nodes.push((ParamRef::Output, wo));
        let bo = tape.leaf(self.output_bias.value.clone());
        param_nodes.push((ParamRef::OutputBias, bo));

        let h = tape.matmul(fused, wh)?;
        let h = tape.add_bias(h, bh)?;
        let h = tape.relu(h);
        let h = match dropout_rng {
            Some(rng) => tape.dropout(h, self.dropout_rate, true, rng)?,
            None => h,
        };
        let logits = tape.matmul(h, wo)?;
        let logits = tape.add_bias(logits, bo)?;

        Ok(ForwardPass { logits, z_concat, gate_activation, fused, param_nodes })
    }

    /// Evaluation-mode probabilities, sharded to bound memory. Deterministic
    /// for a fixed id order.
    pub fn predict_probabilities(&self, cohort: &Cohort, ids: &[String]) -> Result<Tensor2> {
        const SHARD: usize = 2048;
        let mut out = Tensor2::zeros(ids.len(), self.task_count);
        let mut row = 0;
        for chunk in ids.chunks(SHARD) {
            let batch = Batch::from_cohort(cohort, chunk)?;
            let mut tape = Tape::new();
            let fwd = self.forward(&mut tape, &batch, None)?;
            let probs = tape.sigmoid(fwd.logits);
            let values = tape.value(probs);
            for r in 0..chunk.len() {
                for c in 0..self.task_count {
                    out.set(row + r, c, values.get(r, c));
                }
            }
            row += chunk.len();
        }
        Ok(out)
    }

    /// Per-modality probe scores: sigmoid(z_m W_m a_m + b_m), one score per
    /// sample, computed without gradient recording.
    pub fn probe_scores(&self, batch: &Batch) -> Result<Vec<Vec<f64>>> {
        self.check_batch(batch)?;
        let mut out = Vec::with_capacity(self.modalities.len());
        for m in 0..self.modalities.len() {
            let projected = batch.modality(m).matmul(&self.projections[m].value)?;
            let scored = projected.matmul(&self.probes[m].weights)?;
            let scores: Vec<f64> = scored
                .data()
                .iter()
                .map(|v| sigmoid_scalar(v + self.probes[m].bias))
                .collect();
            out.push(scores);
        }
        Ok(out)
    }

    /// Run the frozen probes over a split and compute each modality's mean
    /// disparity across attributes and tasks. Probe parameters are never
    /// modified.
    pub fn probe_eddi(&self, batch: &Batch, threshold: f64) -> Result<ModalityEddi> {
        let task_names = crate::cohort::task_names(self.task_count);
        let truth: Vec<Vec<bool>> = (0..self.task_count)
            .map(|t| (0..batch.len()).map(|i| batch.targets.get(i, t) == 1.0).collect())
            .collect();
        let scores = self.probe_scores(batch)?;
        let mut per_modality = Vec::with_capacity(scores.len());
        for modality_scores in scores {
            let pred = PredictionSet::from_scores(
                task_names.clone(),
                vec![modality_scores; self.task_count],
                truth.clone(),
                batch.attrs.clone(),
                threshold,
            )?;
            let (value, _) = eddi_overall(&pred)?;
            per_modality.push(value);
        }
        Ok(ModalityEddi { per_modality })
    }

    /// Disparity-driven weight update: each modality gains
    /// min(clip, gamma * (max disparity - own disparity)), so the most biased
    /// modality's raw weight is unchanged; weights are then renormalized on
    /// read.
    pub fn update_weights(&mut self, eddi: &ModalityEddi, gamma: f64, clip: f64) -> Result<()> {
        if eddi.per_modality.len() != self.raw_weights.len() {
            return Err(Error::shape(format!(
                "{} disparity values for {} modalities",
                eddi.per_modality.len(),
                self.raw_weights.len()
            )));
        }
        if gamma < 0.0 || clip <= 0.0 {
            return Err(Error::config("update needs gamma >= 0 and clip > 0".to_string()));
        }
        let max = eddi.per_modality.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        for (w, e) in self.raw_weights.iter_mut().zip(&eddi.per_modality) {
            let increment = (gamma * (max - e)).min(clip);
            *w += increment;
        }
        Ok(())
    }

    /// Content hash of all probe parameters; constant across training by the
    /// freeze contract.
    pub fn probe_hash(&self) -> String {
        let mut hasher = Sha256::new();
        for probe in &self.probes {
            for v in probe.weights.data() {
                hasher.update(v.to_le_bytes());
            }
            hasher.update(probe.bias.to_le_bytes());
        }
        hasher.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cohort::{generate_cohort, GeneratorConfig};

    fn small_cohort(n: usize, seed: u64) -> Cohort {
        generate_cohort(&GeneratorConfig {
            n,
            modalities: vec![
                ModalityDef { name: "demographic".into(), width: 4 },
                ModalityDef { name: "structured".into(), width: 4 },
                ModalityDef { name: "notes".into(), width: 4 },
            ],
            signal: vec![1.0, 1.0, 1.0],
            seed,
            ..GeneratorConfig::default()
        })
        .unwrap()
    }

    fn defs(cohort: &Cohort) -> Vec<ModalityDef> {
        cohort.schema.modalities.clone()
    }

    #[test]
    fn init_is_uniform_and_deterministic() {
        let cohort = small_cohort(8, 1);
        let a = FusionState::init(&defs(&cohort), 4, 8, 3, FusionMode::Fame, 0.2, 11).unwrap();
        let b = FusionState::init(&defs(&cohort), 4, 8, 3, FusionMode::Fame, 0.2, 11).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.normalized_weights(), vec![1.0 / 3.0; 3]);
        // zero gate -> activations exactly 0.5
        for g in a.gate_block_means() {
            assert_eq!(g, 0.5);
        }
    }

    #[test]
    fn average_mode_with_identity_projections_is_plain_mean() {
        let modalities = vec![
            ModalityDef { name: "a".into(), width: 2 },
            ModalityDef { name: "b".into(), width: 2 },
        ];
        let mut state =
            FusionState::init(&modalities, 2, 4, 1, FusionMode::Average, 0.0, 5).unwrap();
        for p in &mut state.projections {
            p.value = Tensor2::identity(2);
        }
        let cohort = Cohort {
            schema: crate::cohort::CohortSchema { modalities: modalities.clone(), task_count: 1 },
            records: vec![crate::cohort::CohortRecord {
                id: "p1".into(),
                attrs: SensitiveAttributes {
                    ethnicity: crate::cohort::Ethnicity::White,
                    insurance: crate::cohort::Insurance::Private,
                    age_bucket: crate::cohort::AgeBucket::Age30To49,
                },
                labels: vec![1],
                modalities: [
                    ("a".to_string(), vec![2.0, 0.0]),
                    ("b".to_string(), vec![0.0, 2.0]),
                ]
                .into_iter()
                .collect(),
            }],
        };
        let batch = Batch::from_cohort(&cohort, &["p1".to_string()]).unwrap();
        let mut tape = Tape::new();
        let fwd = state.forward(&mut tape, &batch, None).unwrap();
        assert_eq!(tape.value(fwd.fused).data(), &[1.0, 1.0]);
    }

    #[test]
    fn dfc_never_reads_demographic() {
        let cohort = small_cohort(6, 2);
        let state = FusionState::init(&defs(&cohort), 4, 8, 3, FusionMode::Dfc, 0.0, 3).unwrap();
        let ids: Vec<String> = cohort.records.iter().map(|r| r.id.clone()).collect();
        let batch = Batch::from_cohort(&cohort, &ids).unwrap();
        let mut tape = Tape::new();
        state.forward(&mut tape, &batch, None).unwrap();
        assert_eq!(batch.access_count(0), 0, "demographic tensor was read");
        assert!(batch.access_count(1) > 0 && batch.access_count(2) > 0);
    }

    #[test]
    fn update_weights_examples() {
        let cohort = small_cohort(6, 2);
        let mut state = FusionState::init(&defs(&cohort), 4, 8, 3, FusionMode::Fame, 0.0, 3).unwrap();

        // gamma = 0 leaves the uniform weights untouched
        state
            .update_weights(&ModalityEddi { per_modality: vec![0.3, 0.1, 0.2] }, 0.0, 0.05)
            .unwrap();
        assert_eq!(state.normalized_weights(), vec![1.0 / 3.0; 3]);

        // clip binds the first increment at exactly 0.05
        state
            .update_weights(&ModalityEddi { per_modality: vec![0.10, 0.16, 0.20] }, 0.5, 0.05)
            .unwrap();
        let expected_raw = [1.0 / 3.0 + 0.05, 1.0 / 3.0 + 0.02, 1.0 / 3.0];
        for (w, e) in state.raw_weights.iter().zip(expected_raw) {
            assert!((w - e).abs() < 1e-12);
        }
        let weights = state.normalized_weights();
        // exact rationals: (1/3 + 1/20)/1.07 etc.
        let expected = [115.0 / 321.0, 106.0 / 321.0, 100.0 / 321.0];
        for (w, e) in weights.iter().zip(expected) {
            assert!((w - e).abs() < 1e-12, "{w} vs {e}");
        }
    }

    #[test]
    fn update_weights_clip_case() {
        let cohort = small_cohort(6, 2);
        let mut state = FusionState::init(&defs(&cohort), 4, 8, 3, FusionMode::Fame, 0.0, 3).unwrap();
        state
            .update_weights(&ModalityEddi { per_modality: vec![0.0, 0.3, 0.3] }, 1.0, 0.05)
            .unwrap();
        let weights = state.normalized_weights();
        let expected = [23.0 / 63.0, 20.0 / 63.0, 20.0 / 63.0];
        for (w, e) in weights.iter().zip(expected) {
            assert!((w - e).abs() < 1e-12, "{w} vs {e}");
        }
        // the max-disparity modalities received zero increment
        assert!((state.raw_weights[1] - 1.0 / 3.0).abs() < 1e-15);
        assert!((state.raw_weights[2] - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn weights_stay_normalized_and_positive() {
        let cohort = small_cohort(6, 2);
        let mut state = FusionState::init(&defs(&cohort), 4, 8, 3, FusionMode::Fame, 0.0, 3).unwrap();
        let mut prev = state.raw_weights.clone();
        for step in 0..50 {
            let eddi = ModalityEddi {
                per_modality: vec![
                    0.1 + 0.01 * (step % 3) as f64,
                    0.2,
                    0.05 * ((step + 1) % 4) as f64,
                ],
            };
            state.update_weights(&eddi, 0.7, 0.05).unwrap();
            let weights = state.normalized_weights();
            assert!((weights.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            assert!(weights.iter().all(|w| *w > 0.0));
            // raw weights never decrease
            for (now, before) in state.raw_weights.iter().zip(&prev) {
                assert!(now >= before);
            }
            prev = state.raw_weights.clone();
        }
    }

    #[test]
    fn monotone_response_to_disparity() {
        let cohort = small_cohort(6, 2);
        let mut state = FusionState::init(&defs(&cohort), 4, 8, 3, FusionMode::Fame, 0.0, 3).unwrap();
        // distinct disparities, increments strictly below the clip
        let eddi = vec![0.06, 0.02, 0.04];
        state.update_weights(&ModalityEddi { per_modality: eddi.clone() }, 0.5, 0.05).unwrap();
        let weights = state.normalized_weights();
        // ordering of weights is exactly inverse to disparity ordering
        assert!(weights[1] > weights[2] && weights[2] > weights[0]);
        // max-disparity modality unchanged
        assert!((state.raw_weights[0] - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn probe_eddi_is_deterministic_and_nonnegative() {
        let cohort = small_cohort(40, 9);
        let state = FusionState::init(&defs(&cohort), 4, 8, 3, FusionMode::Fame, 0.0, 3).unwrap();
        let ids: Vec<String> = cohort.records.iter().map(|r| r.id.clone()).collect();
        let batch = Batch::from_cohort(&cohort, &ids).unwrap();
        let a = state.probe_eddi(&batch, 0.5).unwrap();
        let b = state.probe_eddi(&batch, 0.5).unwrap();
        assert_eq!(a, b);
        assert!(a.per_modality.iter().all(|v| *v >= 0.0));
    }

    #[test]
    fn identical_modalities_and_probes_give_equal_disparity() {
        // two modalities with identical embeddings and identical probe/projection
        // parameters measure identical disparity
        let modalities = vec![
            ModalityDef { name: "a".into(), width: 4 },
            ModalityDef { name: "b".into(), width: 4 },
        ];
        let mut state = FusionState::init(&modalities, 4, 8, 3, FusionMode::Fame, 0.0, 3).unwrap();
        state.projections[1] = state.projections[0].clone();
        state.probes[1] = state.probes[0].clone();

        let base = small_cohort(30, 4);
        let records: Vec<crate::cohort::CohortRecord> = base
            .records
            .iter()
            .map(|r| {
                let demo = r.modalities["demographic"].clone();
                crate::cohort::CohortRecord {
                    id: r.id.clone(),
                    attrs: r.attrs,
                    labels: r.labels.clone(),
                    modalities: [("a".to_string(), demo.clone()), ("b".to_string(), demo)]
                        .into_iter()
                        .collect(),
                }
            })
            .collect();
        let cohort = Cohort {
            schema: crate::cohort::CohortSchema { modalities, task_count: 3 },
            records,
        };
        let ids: Vec<String> = cohort.records.iter().map(|r| r.id.clone()).collect();
        let batch = Batch::from_cohort(&cohort, &ids).unwrap();
        let eddi = state.probe_eddi(&batch, 0.5).unwrap();
        assert_eq!(eddi.per_modality[0], eddi.per_modality[1]);
    }

    #[test]
    fn constant_probe_on_balanced_subgroups_measures_zero() {
        // identical label composition per subgroup + constant prediction
        // -> every subgroup error rate equals the overall rate
        let modalities = vec![ModalityDef { name: "only".into(), width: 2 }];
        let mut state = FusionState::init(&modalities, 2, 4, 1, FusionMode::Average, 0.0, 3).unwrap();
        state.probes[0].weights = Tensor2::zeros(2, 1);
        state.probes[0].bias = 2.0; // constant positive prediction

        let mut records = Vec::new();
        for (i, (eth, label)) in [
            (crate::cohort::Ethnicity::White, 1u8),
            (crate::cohort::Ethnicity::White, 0),
            (crate::cohort::Ethnicity::Black, 1),
            (crate::cohort::Ethnicity::Black, 0),
        ]
        .iter()
        .enumerate()
        {
            records.push(crate::cohort::CohortRecord {
                id: format!("p{i}"),
                attrs: SensitiveAttributes {
                    ethnicity: *eth,
                    insurance: crate::cohort::Insurance::Private,
                    age_bucket: crate::cohort::AgeBucket::Age30To49,
                },
                labels: vec![*label],
                modalities: [("only".to_string(), vec![i as f64, -(i as f64)])]
                    .into_iter()
                    .collect(),
            });
        }
        let cohort = Cohort {
            schema: crate::cohort::CohortSchema { modalities, task_count: 1 },
            records,
        };
        let ids: Vec<String> = cohort.records.iter().map(|r| r.id.clone()).collect();
        let batch = Batch::from_cohort(&cohort, &ids).unwrap();
        let eddi = state.probe_eddi(&batch, 0.5).unwrap();
        assert_eq!(eddi.per_modality[0], 0.0);
    }

    #[test]
    fn probe_hash_ignores_trainable_parameters() {
        let cohort = small_cohort(6, 2);
        let mut state = FusionState::init(&defs(&cohort), 4, 8, 3, FusionMode::Fame, 0.0, 3).unwrap();
        let before = state.probe_hash();
        state.hidden.value.data_mut()[0] += 1.0;
        state.projections[0].value.data_mut()[0] -= 0.5;
        assert_eq!(before, state.probe_hash());
        state.probes[0].bias += 1e-9;
        assert_ne!(before, state.probe_hash());
    }
}
