//! Multi-block architectures: sequential chains, repeated cores with shared
//! or per-step parameters, encode-process-decode, recurrent processing with
//! a hidden graph, and graph skip connections.
//!
//! Parameter scoping convention: an encoder's parameters live under `enc.`,
//! a decoder's under `dec.`, a shared core's under `core.`, and an unshared
//! core's step-i parameters under `core.s{i}.`. Sequential chains scope step
//! i under `b{i}.`.

use serde::{Deserialize, Serialize};

use crate::block::{
    apply_block_scoped, init_block_params, BlockConfig, BlockStats, EdgeUpdate, GlobalUpdate,
    GraphDims, NodeUpdate,
};
use crate::error::{BlockError, ConfigError, GraphError};
use crate::graph::{self, Edge, Graph};
use crate::nn::ParameterStore;

/// A repeated processing core: the same structural block applied `m` times,
/// either reusing one parameter set or holding one per step.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CoreSpec {
    /// one entry when `shared`, otherwise exactly `m` entries
    pub config: Vec<BlockConfig>,
    #[serde(rename = "M")]
    pub m: usize,
    pub shared: bool,
}

impl CoreSpec {
    pub fn shared(config: BlockConfig, m: usize) -> Self {
        CoreSpec {
            config: vec![config],
            m,
            shared: true,
        }
    }

    pub fn unshared(configs: Vec<BlockConfig>) -> Self {
        CoreSpec {
            m: configs.len(),
            config: configs,
            shared: false,
        }
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.m < 1 {
            return Err(ConfigError::Invalid("core needs at least one step".into()));
        }
        let want = if self.shared { 1 } else { self.m };
        if self.config.len() != want {
            return Err(ConfigError::Invalid(format!(
                "core with {} steps ({}) needs {} config(s), got {}",
                self.m,
                if self.shared { "shared" } else { "unshared" },
                want,
                self.config.len()
            )));
        }
        for c in &self.config {
            c.validate()?;
        }
        Ok(())
    }

    /// Block config used at step `i`.
    pub fn step_config(&self, i: usize) -> &BlockConfig {
        if self.shared {
            &self.config[0]
        } else {
            &self.config[i]
        }
    }

    /// Parameter scope for step `i` under `prefix`.
    pub fn step_scope(&self, prefix: &str, i: usize) -> String {
        if self.shared {
            prefix.to_string()
        } else {
            format!("{prefix}s{i}.")
        }
    }

    /// Output dims after all steps, checking that the chain is consistent.
    pub fn output_dims(&self, dims: GraphDims) -> Result<GraphDims, ConfigError> {
        self.validate()?;
        if self.shared {
            let out = self.config[0].output_dims(dims);
            if self.m > 1 && out != dims {
                return Err(ConfigError::Invalid(format!(
                    "shared core must preserve dims to repeat: {dims:?} -> {out:?}"
                )));
            }
            Ok(out)
        } else {
            let mut d = dims;
            for c in &self.config {
                d = c.output_dims(d);
            }
            Ok(d)
        }
    }
}

/// Which decoded attributes carry the prediction. Non-focused updates in the
/// decoder are replaced by pass-throughs.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OutputFocus {
    Edges,
    Nodes,
    Globals,
    Mix,
}

/// Restricts a decoder config to its focused outputs; everything else
/// passes through.
pub fn focused_decoder(cfg: &BlockConfig, focus: OutputFocus) -> BlockConfig {
    let mut out = cfg.clone();
    match focus {
        OutputFocus::Mix => {}
        OutputFocus::Edges => {
            out.node = NodeUpdate::PassThrough;
            out.global = GlobalUpdate::PassThrough;
        }
        OutputFocus::Nodes => {
            out.edge = EdgeUpdate::PassThrough;
            out.global = GlobalUpdate::PassThrough;
        }
        OutputFocus::Globals => {
            out.edge = EdgeUpdate::PassThrough;
            out.node = NodeUpdate::PassThrough;
        }
    }
    out
}

/// Encoder -> repeated core -> decoder. Serializes to the JSON architecture
/// format the command-line tools consume.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpdSpec {
    pub encoder: BlockConfig,
    pub core: CoreSpec,
    pub decoder: BlockConfig,
    pub output_focus: OutputFocus,
}

impl EpdSpec {
    pub fn validate(&self) -> Result<(), ConfigError> {
        self.encoder.validate()?;
        self.core.validate()?;
        self.decoder.validate()?;
        Ok(())
    }

    fn decoder_config(&self) -> BlockConfig {
        focused_decoder(&self.decoder, self.output_focus)
    }

    /// Output dims of the whole architecture, validating the dim chain.
    pub fn output_dims(&self, dims: GraphDims) -> Result<GraphDims, ConfigError> {
        let enc = self.encoder.output_dims(dims);
        let core = self.core.output_dims(enc)?;
        Ok(self.decoder_config().output_dims(core))
    }
}

/// A linear chain of blocks, applied first-to-last.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Sequential {
    pub blocks: Vec<BlockConfig>,
}

/// Validates each block of a chain up front.
pub fn compose_sequential(blocks: Vec<BlockConfig>) -> Result<Sequential, ConfigError> {
    if blocks.is_empty() {
        return Err(ConfigError::Invalid("empty block chain".into()));
    }
    for b in &blocks {
        b.validate()?;
    }
    Ok(Sequential { blocks })
}

impl Sequential {
    pub fn scope(prefix: &str, i: usize) -> String {
        format!("{prefix}b{i}.")
    }

    /// Creates every chained block's parameters; returns the final dims.
    pub fn init_params(
        &self,
        store: &mut ParameterStore,
        rng: &mut impl rand::Rng,
        prefix: &str,
        dims: GraphDims,
    ) -> Result<GraphDims, ConfigError> {
        let mut d = dims;
        for (i, cfg) in self.blocks.iter().enumerate() {
            init_block_params(store, rng, &Self::scope(prefix, i), cfg, d)?;
            d = cfg.output_dims(d);
        }
        Ok(d)
    }

    pub fn apply(
        &self,
        g: &Graph,
        params: &ParameterStore,
        prefix: &str,
    ) -> Result<(Graph, BlockStats), BlockError> {
        let mut out = g.clone();
        let mut stats = BlockStats::default();
        for (i, cfg) in self.blocks.iter().enumerate() {
            let (next, s) = apply_block_scoped(&out, cfg, params, &Self::scope(prefix, i))?;
            stats.absorb(s);
            out = next;
        }
        Ok((out, stats))
    }
}

/// Creates a core's parameters under `prefix`; returns the core's output
/// dims. A shared core creates one parameter set regardless of `m`.
pub fn init_core_params(
    store: &mut ParameterStore,
    rng: &mut impl rand::Rng,
    prefix: &str,
    core: &CoreSpec,
    dims: GraphDims,
) -> Result<GraphDims, ConfigError> {
    let out = core.output_dims(dims)?;
    if core.shared {
        init_block_params(store, rng, prefix, &core.config[0], dims)?;
    } else {
        let mut d = dims;
        for (i, cfg) in core.config.iter().enumerate() {
            init_block_params(store, rng, &core.step_scope(prefix, i), cfg, d)?;
            d = cfg.output_dims(d);
        }
    }
    Ok(out)
}

/// Applies the core's `m` steps in sequence.
pub fn run_core(
    g: &Graph,
    core: &CoreSpec,
    params: &ParameterStore,
    prefix: &str,
) -> Result<(Graph, BlockStats), BlockError> {
    core.validate()?;
    let mut out = g.clone();
    let mut stats = BlockStats::default();
    for i in 0..core.m {
        let (next, s) = apply_block_scoped(
            &out,
            core.step_config(i),
            params,
            &core.step_scope(prefix, i),
        )?;
        stats.absorb(s);
        out = next;
    }
    Ok((out, stats))
}

/// Creates all encode-process-decode parameters; returns the output dims.
pub fn init_epd_params(
    store: &mut ParameterStore,
    rng: &mut impl rand::Rng,
    spec: &EpdSpec,
    dims: GraphDims,
) -> Result<GraphDims, ConfigError> {
    spec.validate()?;
    init_block_params(store, rng, "enc.", &spec.encoder, dims)?;
    let enc = spec.encoder.output_dims(dims);
    let core_out = init_core_params(store, rng, "core.", &spec.core, enc)?;
    let dec = focused_decoder(&spec.decoder, spec.output_focus);
    init_block_params(store, rng, "dec.", &dec, core_out)?;
    Ok(dec.output_dims(core_out))
}

/// Tape-level encode-process-decode: every step stays on one tape, so the
/// result is differentiable end to end. `st`/`vals` may be batched.
pub fn epd_vals(
    tape: &mut crate::tape::Tape,
    params: &ParameterStore,
    spec: &EpdSpec,
    st: &crate::block::Structure,
    vals: &crate::block::GraphVals,
) -> Result<(crate::block::GraphVals, BlockStats), BlockError> {
    spec.validate()?;
    let mut stats = BlockStats::default();
    let (mut cur, s) = crate::block::apply_block_vals(tape, params, "enc.", &spec.encoder, st, vals)?;
    stats.absorb(s);
    for i in 0..spec.core.m {
        let (next, s) = crate::block::apply_block_vals(
            tape,
            params,
            &spec.core.step_scope("core.", i),
            spec.core.step_config(i),
            st,
            &cur,
        )?;
        stats.absorb(s);
        cur = next;
    }
    let dec = focused_decoder(&spec.decoder, spec.output_focus);
    let (out, s) = crate::block::apply_block_vals(tape, params, "dec.", &dec, st, &cur)?;
    stats.absorb(s);
    Ok((out, stats))
}

/// Encoder, `m` core steps, decoder.
pub fn encode_process_decode(
    g: &Graph,
    spec: &EpdSpec,
    params: &ParameterStore,
) -> Result<(Graph, BlockStats), BlockError> {
    let mut stats = BlockStats::default();
    let (enc, s) = apply_block_scoped(g, &spec.encoder, params, "enc.")?;
    stats.absorb(s);
    let (core, s) = run_core(&enc, &spec.core, params, "core.")?;
    stats.absorb(s);
    let dec = focused_decoder(&spec.decoder, spec.output_focus);
    let (out, s) = apply_block_scoped(&core, &dec, params, "dec.")?;
    stats.absorb(s);
    Ok((out, stats))
}

/// A zero-attribute graph with the same connectivity as `g` and the given
/// attribute widths — the initial hidden graph for recurrent processing.
pub fn zeros_like_structure(g: &Graph, dims: GraphDims) -> Graph {
    Graph::new(
        vec![0.0; dims.global],
        vec![vec![0.0; dims.node]; g.num_nodes()],
        g.edges
            .iter()
            .map(|e| Edge::typed(e.sender, e.receiver, vec![0.0; dims.edge], e.edge_type))
            .collect(),
    )
}

/// One step of recurrent processing: encode the input, concatenate it with
/// the hidden graph attribute-wise, run the core, keep the core output as
/// the next hidden graph, and decode a copy of it for the step's output.
pub fn recurrent_step(
    g_inp: &Graph,
    g_hid: &Graph,
    spec: &EpdSpec,
    params: &ParameterStore,
) -> Result<(Graph, Graph, BlockStats), BlockError> {
    let mut stats = BlockStats::default();
    let (enc, s) = apply_block_scoped(g_inp, &spec.encoder, params, "enc.")?;
    stats.absorb(s);
    let merged = graph::concat_attributes(&enc, g_hid).map_err(BlockError::Graph)?;
    let (hidden_next, s) = run_core(&merged, &spec.core, params, "core.")?;
    stats.absorb(s);
    let dec = focused_decoder(&spec.decoder, spec.output_focus);
    let (out, s) = apply_block_scoped(&hidden_next, &dec, params, "dec.")?;
    stats.absorb(s);
    Ok((out, hidden_next, stats))
}

/// Concatenates a block's input graph with its output graph attribute-wise
/// (a graph skip connection).
pub fn skip_connect(g_in: &Graph, g_out: &Graph) -> Result<Graph, GraphError> {
    graph::concat_attributes(g_in, g_out)
}
