//! Shape-only forward passes and the reference table of named tensor shapes
//! at full scale (T=16, C=2048, 16×16 map, three segments of eight frames).

use std::fmt::Write as _;

use crate::error::Result;
use crate::model::{ModelConfig, StepNet};
use crate::params::ParamStore;
use crate::tensor::{shape_string, Tape};

/// Frames per clip at full scale.
pub const FULL_SCALE_FRAMES: usize = 16;

/// Expected full-scale shapes, keyed by feature name.
pub fn reference_shapes() -> Vec<(&'static str, Vec<usize>)> {
    let (t, c, d) = (FULL_SCALE_FRAMES, 2048, 1024);
    let mut rows = vec![("M", vec![t, c, 16, 16])];
    for name in ["g_sg", "h_l", "h_r", "h_t", "h_b", "g_lr", "g_tb"] {
        rows.push((name, vec![t, c]));
    }
    rows.push(("f_s", vec![t, d]));
    for name in ["g_1", "g_2", "g_3"] {
        rows.push((name, vec![8, d]));
    }
    rows.push(("g_t", vec![t, c]));
    rows.push(("f_t", vec![t, d]));
    rows.push(("f_st", vec![t, c]));
    rows
}

/// Every named feature of `cfg` on a `frames`-long clip, without arithmetic.
pub fn propagate(cfg: &ModelConfig, frames: usize) -> Result<Vec<(String, Vec<usize>)>> {
    let mut store = ParamStore::<f32>::symbolic();
    let net = StepNet::new(&mut store, cfg)?;
    let mut tape = Tape::shape_only();
    let p = store.bind(&mut tape)?;
    let [h, w] = cfg.backbone.input_size(1);
    let clip = tape.symbolic_leaf(&[frames, cfg.backbone.in_channels, h, w], false)?;
    let fwd = net.forward(&mut tape, &p, clip)?;
    Ok(fwd
        .features
        .iter()
        .map(|(name, v)| (name.clone(), tape.shape(*v).to_vec()))
        .collect())
}

#[derive(Debug, Clone, PartialEq)]
pub struct ShapeRow {
    pub name: String,
    pub expected: Vec<usize>,
    /// `None` when the model produced no tensor of that name.
    pub actual: Option<Vec<usize>>,
}

impl ShapeRow {
    pub fn matches(&self) -> bool {
        self.actual.as_ref() == Some(&self.expected)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ShapeReport {
    pub rows: Vec<ShapeRow>,
}

impl ShapeReport {
    pub fn compare(table: &[(&str, Vec<usize>)], actual: &[(String, Vec<usize>)]) -> Self {
        let rows = table
            .iter()
            .map(|(name, expected)| ShapeRow {
                name: name.to_string(),
                expected: expected.clone(),
                actual: actual.iter().find(|a| a.0 == *name).map(|a| a.1.clone()),
            })
            .collect();
        ShapeReport { rows }
    }

    pub fn mismatches(&self) -> Vec<&ShapeRow> {
        self.rows.iter().filter(|r| !r.matches()).collect()
    }

    /// One `name: shape` line per tensor; mismatches name the expected shape.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for r in &self.rows {
            let shown = r.actual.as_deref().map_or("missing".to_string(), shape_string);
            if r.matches() {
                let _ = writeln!(out, "{}: {shown}", r.name);
            } else {
                let _ = writeln!(out, "{}: {shown} (expected {})", r.name, shape_string(&r.expected));
            }
        }
        let ok = self.rows.len() - self.mismatches().len();
        let _ = writeln!(out, "{ok}/{} shapes match", self.rows.len());
        out
    }
}

/// Full-scale model against [`reference_shapes`].
pub fn full_scale_report() -> Result<ShapeReport> {
    let cfg = ModelConfig::full_scale(3, 2000);
    Ok(ShapeReport::compare(
        &reference_shapes(),
        &propagate(&cfg, FULL_SCALE_FRAMES)?,
    ))
}
