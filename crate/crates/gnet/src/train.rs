//! Mini-batch training and evaluation for the reference tasks.
//!
//! Each optimization step draws its batch from a per-step RNG stream, so a
//! run resumed from a checkpoint consumes exactly the randomness an
//! uninterrupted run would — checkpoints and metrics are bit-identical
//! either way. A non-finite loss aborts before the parameter update, so the
//! checkpoint keeps the last good state.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::block::batch_to_vals;
use crate::compose::{encode_process_decode, epd_vals, EpdSpec};
use crate::graph::{self, Graph};
use crate::nn::{Optimizer, ParameterStore};
use crate::tape::Tape;
use crate::tasks::physics::{physics_step, predicted_next_state, rollout, state_to_graph, PhysicsState};
use crate::tasks::{Sample, TaskKind};
use crate::tensor::Tensor;

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TrainConfig {
    /// Total optimization steps the run should reach (absolute, so a resumed
    /// run passes the same value and continues toward it).
    pub steps: usize,
    pub batch_size: usize,
    pub seed: u64,
    /// A metrics row is recorded every `log_every` steps and at the end.
    pub log_every: usize,
    /// Physics only: integrator timestep used to turn predicted velocities
    /// into positions; must match the timestep the dataset was generated
    /// with. Ignored by the label tasks.
    pub dt: f64,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), String> {
        if self.batch_size == 0 {
            return Err("batch size must be positive".into());
        }
        if self.log_every == 0 {
            return Err("log interval must be positive".into());
        }
        if !(self.dt > 0.0) {
            return Err("timestep must be positive".into());
        }
        Ok(())
    }
}

/// Everything that changes during training; serializing all three fields is
/// a resumable checkpoint.
pub struct TrainState {
    pub params: ParameterStore,
    pub optimizer: Optimizer,
    pub step: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricsRow {
    pub step: usize,
    pub loss: f64,
    pub node_acc: Option<f64>,
    pub edge_acc: Option<f64>,
    pub rmse: Option<f64>,
}

pub fn metrics_csv_header(task: TaskKind) -> &'static str {
    if task.is_label_task() {
        "step,loss,node_acc,edge_acc"
    } else {
        "step,loss,rmse"
    }
}

impl MetricsRow {
    pub fn csv_line(&self) -> String {
        let mut fields = vec![self.step.to_string(), self.loss.to_string()];
        for v in [self.node_acc, self.edge_acc, self.rmse].into_iter().flatten() {
            fields.push(v.to_string());
        }
        fields.join(",")
    }
}

#[derive(Debug, Default)]
pub struct TrainOutcome {
    pub history: Vec<MetricsRow>,
    /// Step index whose loss came out non-finite; the update for that step
    /// was not applied.
    pub diverged_at: Option<usize>,
}

/// RNG used once, for parameter initialization.
pub fn init_rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// RNG for one optimization step: stream `step + 1` of the run seed
/// (stream 0 is reserved for initialization).
pub fn step_rng(seed: u64, step: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(step as u64 + 1);
    rng
}

fn rows_tensor(rows: &[Vec<f64>], fallback_width: usize) -> Result<Tensor, String> {
    let width = rows.first().map_or(fallback_width, Vec::len);
    Tensor::from_rows(rows, width).map_err(|e| e.to_string())
}

/// Fraction of entries whose sign-thresholded prediction (`logit > 0`)
/// matches the 0/1 target. Empty tensors count as fully correct.
fn sign_accuracy(pred: &Tensor, target: &Tensor) -> f64 {
    if pred.data.is_empty() {
        return 1.0;
    }
    let correct = pred
        .data
        .iter()
        .zip(target.data.iter())
        .filter(|&(&p, &t)| (p > 0.0) == (t == 1.0))
        .count();
    correct as f64 / pred.data.len() as f64
}

/// Root-mean-square Euclidean error over the first two columns (positions)
/// of 4-wide state rows.
fn position_rmse(pred: &Tensor, target: &Tensor) -> f64 {
    let rows = pred.rows();
    if rows == 0 {
        return 0.0;
    }
    let mut sq = 0.0;
    for r in 0..rows {
        let p = pred.row_slice(r);
        let t = target.row_slice(r);
        sq += (p[0] - t[0]).powi(2) + (p[1] - t[1]).powi(2);
    }
    (sq / rows as f64).sqrt()
}

/// Runs optimization steps `state.step .. cfg.steps` over `data`, mutating
/// `state` in place. Returns the recorded metrics rows and, if the loss
/// stopped being finite, the step at which that happened (that step's
/// update is skipped and training stops).
pub fn train(
    task: TaskKind,
    spec: &EpdSpec,
    state: &mut TrainState,
    data: &[Sample],
    cfg: &TrainConfig,
) -> Result<TrainOutcome, String> {
    cfg.validate()?;
    if data.is_empty() {
        return Err("no samples".into());
    }
    let mut outcome = TrainOutcome::default();
    while state.step < cfg.steps {
        let mut rng = step_rng(cfg.seed, state.step);
        let picks: Vec<usize> = (0..cfg.batch_size)
            .map(|_| rng.gen_range(0..data.len()))
            .collect();
        let inputs: Vec<Graph> = picks.iter().map(|&i| data[i].input.clone()).collect();
        let targets: Vec<Graph> = picks.iter().map(|&i| data[i].target.clone()).collect();
        let bin = graph::batch(&inputs).map_err(|e| e.to_string())?;
        let btg = graph::batch(&targets).map_err(|e| e.to_string())?;

        let mut tape = Tape::new();
        let (st, vals) = batch_to_vals(&mut tape, &bin).map_err(|e| e.to_string())?;
        let (out, _) =
            epd_vals(&mut tape, &state.params, spec, &st, &vals).map_err(|e| e.to_string())?;

        let tgt_nodes = rows_tensor(&btg.merged.nodes, task.target_dims().node)?;
        let mut row = MetricsRow {
            step: state.step + 1,
            loss: f64::NAN,
            node_acc: None,
            edge_acc: None,
            rmse: None,
        };
        let loss = if task.is_label_task() {
            let edge_attrs: Vec<Vec<f64>> =
                btg.merged.edges.iter().map(|e| e.attr.clone()).collect();
            let tgt_edges = rows_tensor(&edge_attrs, task.target_dims().edge)?;
            let ln = tape
                .sigmoid_cross_entropy(out.nodes, &tgt_nodes)
                .map_err(|e| e.to_string())?;
            let le = tape
                .sigmoid_cross_entropy(out.edges, &tgt_edges)
                .map_err(|e| e.to_string())?;
            row.node_acc = Some(sign_accuracy(tape.value(out.nodes), &tgt_nodes));
            row.edge_acc = Some(sign_accuracy(tape.value(out.edges), &tgt_edges));
            tape.add(ln, le).map_err(|e| e.to_string())?
        } else {
            // The model's node outputs are velocity changes; the predicted
            // next state integrates them exactly like the simulator
            // (v' = v + Δv, p' = p + Δt·v'), and the loss is the squared
            // error of that state against the true next state. The network
            // only has to regress the effect of the forces.
            let col_pair = |lo: usize| -> Result<Vec<Vec<f64>>, String> {
                bin.merged
                    .nodes
                    .iter()
                    .map(|r| {
                        r.get(lo..lo + 2).map(<[f64]>::to_vec).ok_or_else(|| {
                            "physics input nodes need at least 4 state values".to_string()
                        })
                    })
                    .collect()
            };
            let p_base = tape.constant(rows_tensor(&col_pair(0)?, 2)?);
            let v_base = tape.constant(rows_tensor(&col_pair(2)?, 2)?);
            let v_next = tape.add(out.nodes, v_base).map_err(|e| e.to_string())?;
            let step = tape.affine(v_next, cfg.dt, 0.0);
            let p_next = tape.add(p_base, step).map_err(|e| e.to_string())?;
            let predicted = tape
                .concat_cols(&[p_next, v_next])
                .map_err(|e| e.to_string())?;
            row.rmse = Some(position_rmse(tape.value(predicted), &tgt_nodes));
            tape.mean_squared_error(predicted, &tgt_nodes)
                .map_err(|e| e.to_string())?
        };
        row.loss = tape.value(loss).data[0];
        if !row.loss.is_finite() {
            outcome.diverged_at = Some(state.step);
            break;
        }
        let grads = tape.backward(loss).map_err(|e| e.to_string())?;
        state.params.zero_grads();
        state.params.accumulate(grads).map_err(|e| e.to_string())?;
        state.optimizer.step(&mut state.params);
        state.step += 1;
        if state.step % cfg.log_every == 0 || state.step == cfg.steps {
            outcome.history.push(row);
        }
    }
    Ok(outcome)
}

/// Evaluation metrics, serialized with only the fields that apply.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub node_acc: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub edge_acc: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub graph_solved: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub rmse: Option<f64>,
}

impl Metrics {
    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("metrics serialization")
    }
}

/// Per-element accuracy of a predictor on labeled graphs. Predictions are
/// graphs whose node/edge attributes are logits; an entry counts as "1"
/// when its logit is positive. Also reports the fraction of samples with
/// every entry correct.
pub fn evaluate_label_task(
    predict: impl Fn(&Graph) -> Result<Graph, String>,
    data: &[Sample],
) -> Result<Metrics, String> {
    if data.is_empty() {
        return Err("no samples".into());
    }
    let (mut node_c, mut node_t) = (0usize, 0usize);
    let (mut edge_c, mut edge_t) = (0usize, 0usize);
    let mut solved = 0usize;
    for (si, s) in data.iter().enumerate() {
        let pred = predict(&s.input)?;
        if pred.nodes.len() != s.target.nodes.len() || pred.edges.len() != s.target.edges.len() {
            return Err(format!(
                "sample {si}: prediction shape ({} nodes, {} edges) disagrees with target ({} nodes, {} edges)",
                pred.nodes.len(),
                pred.edges.len(),
                s.target.nodes.len(),
                s.target.edges.len()
            ));
        }
        let mut all = true;
        for (p, t) in pred.nodes.iter().zip(s.target.nodes.iter()) {
            if p.len() != t.len() {
                return Err(format!(
                    "sample {si}: node label width {} vs prediction width {}",
                    t.len(),
                    p.len()
                ));
            }
            for (&pv, &tv) in p.iter().zip(t.iter()) {
                let ok = (pv > 0.0) == (tv == 1.0);
                node_c += ok as usize;
                node_t += 1;
                all &= ok;
            }
        }
        for (p, t) in pred.edges.iter().zip(s.target.edges.iter()) {
            if p.attr.len() != t.attr.len() {
                return Err(format!(
                    "sample {si}: edge label width {} vs prediction width {}",
                    t.attr.len(),
                    p.attr.len()
                ));
            }
            for (&pv, &tv) in p.attr.iter().zip(t.attr.iter()) {
                let ok = (pv > 0.0) == (tv == 1.0);
                edge_c += ok as usize;
                edge_t += 1;
                all &= ok;
            }
        }
        solved += all as usize;
    }
    Ok(Metrics {
        node_acc: Some(node_c as f64 / node_t.max(1) as f64),
        edge_acc: Some(edge_c as f64 / edge_t.max(1) as f64),
        graph_solved: Some(solved as f64 / data.len() as f64),
        rmse: None,
    })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PhysicsEval {
    /// Root-mean-square Euclidean position error at the horizon, over all
    /// masses of all samples.
    pub rmse: f64,
    /// Mean distance the masses actually travelled to the horizon — the
    /// scale against which the error is judged.
    pub mean_displacement: f64,
}

/// Rolls the predictor and the reference simulator to `horizon` steps from
/// each start state and compares final positions.
pub fn evaluate_physics(
    predict: impl Fn(&PhysicsState) -> Result<PhysicsState, String>,
    states: &[PhysicsState],
    horizon: usize,
) -> Result<PhysicsEval, String> {
    if states.is_empty() {
        return Err("no samples".into());
    }
    let mut sq_sum = 0.0;
    let mut disp_sum = 0.0;
    let mut points = 0usize;
    for s0 in states {
        let (traj, diag) = rollout(&predict, s0, horizon);
        if let Some(d) = diag {
            return Err(format!("prediction rollout: {d}"));
        }
        let mut truth = s0.clone();
        for _ in 0..horizon {
            truth = physics_step(&truth);
        }
        let pred = traj.last().expect("rollout returns at least the start");
        for i in 0..truth.num_masses() {
            let dx = pred.positions[i][0] - truth.positions[i][0];
            let dy = pred.positions[i][1] - truth.positions[i][1];
            sq_sum += dx * dx + dy * dy;
            let mx = truth.positions[i][0] - s0.positions[i][0];
            let my = truth.positions[i][1] - s0.positions[i][1];
            disp_sum += (mx * mx + my * my).sqrt();
            points += 1;
        }
    }
    Ok(PhysicsEval {
        rmse: (sq_sum / points.max(1) as f64).sqrt(),
        mean_displacement: disp_sum / points.max(1) as f64,
    })
}

/// Inference closure over a trained model, for label-task evaluation.
pub fn graph_predictor<'a>(
    spec: &'a EpdSpec,
    params: &'a ParameterStore,
) -> impl Fn(&Graph) -> Result<Graph, String> + 'a {
    move |g| {
        encode_process_decode(g, spec, params)
            .map(|(out, _)| out)
            .map_err(|e| e.to_string())
    }
}

/// One-step state predictor over a trained model: encodes the state as a
/// graph, runs the model, and rebuilds a state from the predicted node
/// rows (fixed masses stay frozen).
pub fn physics_predictor<'a>(
    spec: &'a EpdSpec,
    params: &'a ParameterStore,
) -> impl Fn(&PhysicsState) -> Result<PhysicsState, String> + 'a {
    move |s| {
        let g = state_to_graph(s);
        let (out, _) = encode_process_decode(&g, spec, params).map_err(|e| e.to_string())?;
        predicted_next_state(s, &out.nodes)
    }
}
