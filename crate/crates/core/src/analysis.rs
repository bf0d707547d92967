//! Attention inspection and ablation sweeps.

use std::fmt::Write as _;

use serde::Serialize;

use crate::config::{BranchId, FusionBase, GesaVariant, ModelConfig, TrainConfig};
use crate::error::{GevstError, Result};
use crate::metrics::evaluate;
use crate::model::{Gevst, PreparedSample};
use crate::params::Graph;
use crate::tensor::{Tape, Var};
use crate::train::train_xe;
use crate::vocab::{Vocabulary, EOS};

/// Plot-ready CSV text for one sample.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionDump {
    /// `direction,cell,kind,row,col,value`
    pub fusion: String,
    /// `branch,layer,c1,c2,c3`
    pub gesa_gates: String,
    /// `step,token,layer,branch,mean_gate`
    pub decoder_gates: String,
    pub caption: String,
}

fn push_map(out: &mut String, direction: &str, cell: usize, kind: &str, map: Option<Var<'_>>) {
    let Some(map) = map else { return };
    let v = map.value();
    let cols = v.last_dim();
    for (i, row) in v.data().chunks(cols).enumerate() {
        for (j, x) in row.iter().enumerate() {
            writeln!(out, "{direction},{cell},{kind},{i},{j},{x}").expect("write to string");
        }
    }
}

/// Fusion maps per cell, GESA gates per layer and branch, and decoder
/// modulation gates per generated token of the greedy caption.
pub fn dump_attention(
    model: &Gevst,
    store: &crate::params::ParamStore,
    s: &PreparedSample,
    vocab: &Vocabulary,
) -> Result<AttentionDump> {
    let state = model.caption(store, s, 1)?;
    let tape = Tape::new();
    let g = Graph::frozen(&tape, store);
    let enc = model.encode(&g, s)?;

    let mut fusion = String::from("direction,cell,kind,row,col,value\n");
    for (name, f) in [("vs", &enc.vs_fusion), ("sv", &enc.sv_fusion)] {
        for (c, cell) in f.iter().flat_map(|f| f.cells.iter().enumerate()) {
            push_map(&mut fusion, name, c, "content", cell.content_attention);
            push_map(&mut fusion, name, c, "geometry", cell.geometry_attention);
        }
    }

    let mut gesa_gates = String::from("branch,layer,c1,c2,c3\n");
    for (b, traces) in &enc.layer_traces {
        for (l, t) in traces.iter().enumerate() {
            let c = t.gates.value();
            let c = c.data();
            writeln!(gesa_gates, "{},{l},{},{},{}", b.name(), c[0], c[1], c[2])
                .expect("write to string");
        }
    }

    let inputs = &state.tokens[..state.tokens.len() - 1];
    let (_, trace) = model.decoder.forward_traced(&g, inputs, &enc.outputs)?;
    let mut decoder_gates = String::from("step,token,layer,branch,mean_gate\n");
    for (l, gates) in trace.gates.iter().enumerate() {
        for (b, alpha) in gates {
            let a = alpha.value();
            let d = a.last_dim();
            for (t, row) in a.data().chunks(d).enumerate() {
                let word = vocab.word(state.tokens[t + 1])?;
                let mean = row.iter().map(|x| x.abs()).sum::<f64>() / d as f64;
                writeln!(decoder_gates, "{},{word},{l},{},{mean}", t + 1, b.name())
                    .expect("write to string");
            }
        }
    }
    Ok(AttentionDump {
        fusion,
        gesa_gates,
        decoder_gates,
        caption: vocab.detokenize(state.words(EOS))?,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AblationAxis {
    M,
    Base,
    Layers,
    Gesa,
    Branches,
}

impl AblationAxis {
    pub fn parse(s: &str) -> Result<Self> {
        Ok(match s {
            "m" => AblationAxis::M,
            "base" => AblationAxis::Base,
            "layers" => AblationAxis::Layers,
            "gesa" => AblationAxis::Gesa,
            "branches" => AblationAxis::Branches,
            _ => {
                return Err(GevstError::Config(format!(
                    "unknown ablation axis {s:?}; expected m, base, layers, gesa or branches"
                )))
            }
        })
    }

    pub fn name(self) -> &'static str {
        match self {
            AblationAxis::M => "m",
            AblationAxis::Base => "base",
            AblationAxis::Layers => "layers",
            AblationAxis::Gesa => "gesa",
            AblationAxis::Branches => "branches",
        }
    }

    fn column(self) -> &'static str {
        match self {
            AblationAxis::M => "fusion cells",
            AblationAxis::Base => "fusion base",
            AblationAxis::Layers => "layers",
            AblationAxis::Gesa => "geometry",
            AblationAxis::Branches => "branches",
        }
    }
}

/// Labelled configurations of one axis, all other settings from `base`.
pub fn ablation_grid(axis: AblationAxis, base: &ModelConfig) -> Vec<(String, ModelConfig)> {
    let with = |f: &dyn Fn(&mut ModelConfig)| {
        let mut c = base.clone();
        f(&mut c);
        c
    };
    use BranchId::*;
    match axis {
        AblationAxis::M => (1..=3)
            .map(|m| (m.to_string(), with(&|c| c.fusion_cells = m)))
            .collect(),
        AblationAxis::Base => [FusionBase::C, FusionBase::G, FusionBase::CG]
            .into_iter()
            .map(|b| (format!("{b:?}"), with(&|c| c.fusion_base = b)))
            .collect(),
        AblationAxis::Layers => (2..=5)
            .map(|l| (l.to_string(), with(&|c| c.layers = l)))
            .collect(),
        AblationAxis::Gesa => [
            GesaVariant::Con,
            GesaVariant::ConIntra,
            GesaVariant::ConIntraInter,
        ]
        .into_iter()
        .map(|v| (v.label().to_string(), with(&|c| c.gesa_variant = v)))
        .collect(),
        AblationAxis::Branches => {
            let rows: [(&str, &[BranchId]); 7] = [
                ("SS", &[SS]),
                ("SV", &[SV]),
                ("VS", &[VS]),
                ("VV", &[VV]),
                ("+VS", &[VV, VS]),
                ("+SV", &[VV, VS, SV]),
                ("+SS", &[VV, VS, SV, SS]),
            ];
            rows.iter()
                .map(|(l, b)| (l.to_string(), with(&|c| c.branches = b.to_vec())))
                .collect()
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AblationRow {
    pub label: String,
    pub branches: String,
    pub bleu4: f64,
    pub rouge_l: f64,
    pub cider_d: f64,
    pub best_epoch: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AblationTable {
    pub axis: String,
    pub rows: Vec<AblationRow>,
    /// Outcome of the geometry sweep's directional check.
    pub check: Option<String>,
}

impl AblationTable {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("label,branches,bleu4,rouge_l,cider_d,best_epoch\n");
        for r in &self.rows {
            writeln!(
                s,
                "{},{},{},{},{},{}",
                r.label, r.branches, r.bleu4, r.rouge_l, r.cider_d, r.best_epoch
            )
            .expect("write to string");
        }
        s
    }

    pub fn to_markdown(&self, axis: AblationAxis) -> String {
        let mut s = format!(
            "| {} | BLEU-4 | ROUGE-L | CIDEr-D |\n|---|---|---|---|\n",
            axis.column()
        );
        for r in &self.rows {
            let label = if axis == AblationAxis::Branches {
                format!("{} ({})", r.label, r.branches)
            } else {
                r.label.clone()
            };
            writeln!(
                s,
                "| {label} | {:.4} | {:.4} | {:.4} |",
                r.bleu4, r.rouge_l, r.cider_d
            )
            .expect("write to string");
        }
        if let Some(c) = &self.check {
            writeln!(s, "\n{c}").expect("write to string");
        }
        s
    }
}

/// Validation scores of the best-by-validation checkpoint, decoded with
/// the configured beam.
pub fn train_and_score(
    label: &str,
    model_cfg: &ModelConfig,
    cfg: &TrainConfig,
    vocab: &Vocabulary,
    train: &[PreparedSample],
    val: &[PreparedSample],
) -> Result<AblationRow> {
    let cfg = TrainConfig {
        model: model_cfg.clone(),
        ..cfg.clone()
    };
    let (model, mut store) = Gevst::new(&cfg.model, vocab.len(), cfg.seed)?;
    let out = train_xe(&model, &mut store, train, val, &cfg, &mut |_| {})?;
    let cands = val
        .iter()
        .map(|s| Ok(model.caption(&out.best, s, cfg.beam)?.words(EOS).to_vec()))
        .collect::<Result<Vec<_>>>()?;
    let refs: Vec<Vec<Vec<usize>>> = val.iter().map(|s| s.references.clone()).collect();
    let report = evaluate(&cands, &refs);
    log::info!("ablation {label}: CIDEr-D {:.4}", report.cider_d);
    Ok(AblationRow {
        label: label.to_string(),
        branches: model_cfg
            .active_branches()
            .iter()
            .map(|b| b.name())
            .collect::<Vec<_>>()
            .join("+"),
        bleu4: report.bleu4,
        rouge_l: report.rouge_l,
        cider_d: report.cider_d,
        best_epoch: out.best_epoch,
    })
}

/// Trains every configuration of `axis` on the same data and seed, at
/// most `threads` at a time. Rows keep grid order whatever the thread
/// count.
pub fn run_ablation(
    axis: AblationAxis,
    cfg: &TrainConfig,
    vocab: &Vocabulary,
    train: &[PreparedSample],
    val: &[PreparedSample],
    threads: usize,
) -> Result<AblationTable> {
    if val.is_empty() {
        return Err(GevstError::Config(
            "ablation needs a validation split".into(),
        ));
    }
    let grid = ablation_grid(axis, &cfg.model);
    let mut rows: Vec<Option<Result<AblationRow>>> = (0..grid.len()).map(|_| None).collect();
    for (chunk_idx, chunk) in grid.chunks(threads.max(1)).enumerate() {
        let results: Vec<Result<AblationRow>> = std::thread::scope(|scope| {
            let handles: Vec<_> = chunk
                .iter()
                .map(|(label, mc)| {
                    scope.spawn(move || train_and_score(label, mc, cfg, vocab, train, val))
                })
                .collect();
            handles
                .into_iter()
                .map(|h| {
                    h.join().unwrap_or_else(|_| {
                        Err(GevstError::Contract("ablation worker panicked".into()))
                    })
                })
                .collect()
        });
        for (i, r) in results.into_iter().enumerate() {
            rows[chunk_idx * threads.max(1) + i] = Some(r);
        }
    }
    let rows = rows
        .into_iter()
        .map(|r| r.expect("every configuration ran"))
        .collect::<Result<Vec<_>>>()?;
    let check = (axis == AblationAxis::Gesa).then(|| {
        let (con, inter) = (rows[0].cider_d, rows[rows.len() - 1].cider_d);
        let verdict = if inter >= con { "PASS" } else { "INVESTIGATE" };
        format!("+Inter >= Con on validation CIDEr-D: {verdict} ({inter:.4} vs {con:.4})")
    });
    Ok(AblationTable {
        axis: axis.name().to_string(),
        rows,
        check,
    })
}
