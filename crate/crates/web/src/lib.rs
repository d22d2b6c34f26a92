//! Browser bindings for three cheap operations: parameter accounting,
//! synthetic slice generation and confusion-matrix metrics.

use wasm_bindgen::prelude::*;

use evl_core::data::{synth_generate, Label};
use evl_core::eval::{compute_metrics, ConfusionMatrix};
use evl_core::lora::BlockSelection;
use evl_core::model::{count_trainable, ModelConfig, ModelKind};

/// Trainable parameters by component as `component,count` lines.
/// `placement` is `all` or `last2`.
#[wasm_bindgen(js_name = paramCount)]
pub fn param_count(model: &str, reference_scale: bool, rank: usize, placement: &str) -> Result<String, String> {
    let kind: ModelKind = model.parse().map_err(|e: evl_core::Error| e.to_string())?;
    let mut cfg = if reference_scale { ModelConfig::reference(kind) } else { ModelConfig::toy(kind) };
    cfg.vit.lora.rank = rank;
    cfg.vit.lora.blocks = match placement {
        "all" => BlockSelection::All,
        "last2" => BlockSelection::LastTwo,
        other => return Err(format!("unknown placement `{other}`")),
    };
    let b = count_trainable(&cfg).map_err(|e| e.to_string())?;
    Ok([
        ("lora", b.lora),
        ("head", b.head),
        ("bridge", b.bridge),
        ("backbone", b.backbone),
        ("total", b.total),
        ("frozen", b.frozen),
    ]
    .iter()
    .map(|(k, v)| format!("{k},{v}\n"))
    .collect())
}

/// One synthetic slice of class `label` (AD, MCI or CN) as `size²`
/// row-major intensities.
#[wasm_bindgen(js_name = synthSlice)]
pub fn synth_slice(label: &str, seed: u32, size: usize) -> Result<Vec<f64>, String> {
    let label: Label = label.parse().map_err(|e: evl_core::Error| e.to_string())?;
    let (ds, _) = synth_generate(1, seed as u64, size).map_err(|e| e.to_string())?;
    let sample = ds.samples.iter().find(|s| s.label == label).ok_or("class missing from the set")?;
    Ok(sample.image.data()[..size * size].to_vec())
}

/// Accuracy / precision / recall / F1 (macro, percent) of a square
/// confusion matrix given as rows of counts separated by `;` or newlines,
/// followed by one line per class.
#[wasm_bindgen]
pub fn metrics(matrix: &str) -> Result<String, String> {
    let rows = matrix
        .split([';', '\n'])
        .map(str::trim)
        .filter(|r| !r.is_empty())
        .map(|r| {
            r.split([',', ' ', '\t'])
                .filter(|c| !c.is_empty())
                .map(|c| c.parse::<u64>().map_err(|e| format!("`{c}`: {e}")))
                .collect::<Result<Vec<_>, _>>()
        })
        .collect::<Result<Vec<_>, _>>()?;
    let cm = ConfusionMatrix::from_rows(&rows).map_err(|e| e.to_string())?;
    let r = compute_metrics(&cm).map_err(|e| e.to_string())?;
    let mut out = format!("accuracy / precision / recall / F1: {}\n", r.summary());
    for (i, c) in r.per_class.iter().enumerate() {
        let name = Label::from_index(i).map_or_else(|_| format!("class {i}"), |l| l.to_string());
        out.push_str(&format!(
            "{name}: precision {:.4} recall {:.4} F1 {:.4}{}\n",
            c.precision,
            c.recall,
            c.f1,
            if c.zero_division { " (zero division)" } else { "" }
        ));
    }
    Ok(out)
}
