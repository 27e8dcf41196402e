//! Browser bindings for three toolkit operations. Every export takes plain
//! numbers or strings and returns a JSON document, so the page needs no
//! glue beyond `JSON.parse`.
//!
//! The `*_json` functions hold the logic and are what the tests call; the
//! exported wrappers only convert errors into JavaScript exceptions.

use hybridlm::cost;
use hybridlm::fp8::{self, Fp8Format};
use hybridlm::model::{ArchSpec, Dims};
use hybridlm::{Error, Result, Tensor};
use serde::Serialize;
use wasm_bindgen::prelude::*;

fn format(name: &str) -> Result<Fp8Format> {
    match name.to_ascii_lowercase().as_str() {
        "e4m3" => Ok(Fp8Format::E4M3),
        "e5m2" => Ok(Fp8Format::E5M2),
        other => Err(Error::InvalidArgument(format!("unknown FP8 format {other:?}"))),
    }
}

#[derive(Serialize)]
struct QuantizedValue {
    input: f64,
    code: u8,
    bits: String,
    dequantized: f64,
    abs_error: f64,
}

#[derive(Serialize)]
struct Quantized {
    format: &'static str,
    max_finite: f64,
    amax: f64,
    scale: f64,
    values: Vec<QuantizedValue>,
}

/// Per-tensor current scaling of `values`, element by element.
pub fn quantize_json(values: &[f64], format_name: &str) -> Result<String> {
    let f = format(format_name)?;
    if values.is_empty() {
        return Err(Error::InvalidArgument("no values to quantize".into()));
    }
    let t = Tensor::new(vec![values.len()], values.to_vec())?;
    let q = fp8::quantize(&t, f)?;
    let back = q.dequantize();
    let values = values
        .iter()
        .zip(q.payload())
        .zip(back.data())
        .map(|((&input, &code), &dequantized)| QuantizedValue {
            input,
            code,
            bits: format!("{code:08b}"),
            dequantized,
            abs_error: (dequantized - input).abs(),
        })
        .collect();
    let out = Quantized {
        format: if f == Fp8Format::E4M3 { "E4M3" } else { "E5M2" },
        max_finite: f.max_finite(),
        amax: t.max_abs(),
        scale: q.scale(),
        values,
    };
    Ok(serde_json::to_string(&out)?)
}

#[derive(Serialize)]
struct Pattern {
    pattern: String,
    attention: usize,
    mamba: usize,
    ffn: usize,
    params: u64,
}

fn desk_dims(d_model: usize) -> Dims {
    Dims {
        d_model,
        d_ffn: 2 * d_model,
        ..Dims::default()
    }
}

/// Layer sequence the builder produces for a depth and attention share.
pub fn pattern_json(total_layers: usize, attn_fraction: f64, d_model: usize) -> Result<String> {
    let spec = ArchSpec::hybrid(total_layers, attn_fraction, &desk_dims(d_model))?;
    use hybridlm::model::LayerKind::*;
    let out = Pattern {
        pattern: spec.pattern(),
        attention: spec.count(Attention),
        mamba: spec.count(Mamba2),
        ffn: spec.count(Ffn),
        params: spec.count_params(),
    };
    Ok(serde_json::to_string(&out)?)
}

#[derive(Serialize)]
struct CurvePoint {
    seq: u64,
    hybrid_kv: u64,
    hybrid_state: u64,
    baseline_kv: u64,
    hybrid_flops: u64,
    baseline_flops: u64,
}

#[derive(Serialize)]
struct Curves {
    hybrid: String,
    baseline: String,
    points: Vec<CurvePoint>,
}

/// Decode-time cache bytes (16-bit elements, batch 1) and per-token FLOPs of
/// a hybrid against a pure-attention model of the same depth, at context
/// lengths doubling from 256 to `max_seq`.
pub fn curves_json(total_layers: usize, attn_fraction: f64, d_model: usize, max_seq: u64) -> Result<String> {
    let dims = desk_dims(d_model);
    let hybrid = ArchSpec::hybrid(total_layers, attn_fraction, &dims)?;
    let baseline = ArchSpec::transformer(total_layers.div_ceil(2), &dims)?;
    let mut points = Vec::new();
    let mut seq = 256;
    while seq <= max_seq.max(256) {
        points.push(CurvePoint {
            seq,
            hybrid_kv: cost::kv_bytes(&hybrid, seq, 1, 2),
            hybrid_state: cost::state_bytes(&hybrid, 1, 2),
            baseline_kv: cost::kv_bytes(&baseline, seq, 1, 2),
            hybrid_flops: cost::decode_step_flops(&hybrid, seq - 1).total(),
            baseline_flops: cost::decode_step_flops(&baseline, seq - 1).total(),
        });
        seq *= 2;
    }
    let out = Curves {
        hybrid: hybrid.pattern(),
        baseline: baseline.pattern(),
        points,
    };
    Ok(serde_json::to_string(&out)?)
}

fn js(r: Result<String>) -> std::result::Result<String, JsError> {
    r.map_err(|e| JsError::new(&e.to_string()))
}

#[wasm_bindgen]
pub fn quantize(values: Vec<f64>, format: &str) -> std::result::Result<String, JsError> {
    js(quantize_json(&values, format))
}

#[wasm_bindgen]
pub fn layer_pattern(total_layers: usize, attn_fraction: f64, d_model: usize) -> std::result::Result<String, JsError> {
    js(pattern_json(total_layers, attn_fraction, d_model))
}

#[wasm_bindgen]
pub fn memory_curves(total_layers: usize, attn_fraction: f64, d_model: usize, max_seq: u32) -> std::result::Result<String, JsError> {
    js(curves_json(total_layers, attn_fraction, d_model, max_seq as u64))
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::Value;

    #[test]
    fn quantize_reports_scale_and_codes() {
        let v: Value = serde_json::from_str(&quantize_json(&[1.0, -896.0, 0.0], "e4m3").unwrap()).unwrap();
        assert_eq!(v["scale"], 0.5);
        assert_eq!(v["values"][1]["dequantized"], -896.0);
        assert_eq!(v["values"][2]["code"], 0);
        assert!(quantize_json(&[1.0], "e3m4").is_err());
        assert!(quantize_json(&[], "e5m2").is_err());
    }

    #[test]
    fn pattern_counts() {
        let v: Value = serde_json::from_str(&pattern_json(52, 0.08, 32).unwrap()).unwrap();
        assert_eq!((v["attention"].as_u64(), v["mamba"].as_u64(), v["ffn"].as_u64()), (Some(4), Some(24), Some(24)));
        assert!(pattern_json(2, 0.5, 32).is_err());
    }

    #[test]
    fn state_is_flat_and_kv_grows() {
        let v: Value = serde_json::from_str(&curves_json(26, 0.08, 32, 8192).unwrap()).unwrap();
        let pts = v["points"].as_array().unwrap();
        assert_eq!(pts.len(), 6);
        assert!(pts.iter().all(|p| p["hybrid_state"] == pts[0]["hybrid_state"]));
        assert!(pts.windows(2).all(|w| w[1]["baseline_kv"].as_u64() == w[0]["baseline_kv"].as_u64().map(|x| 2 * x)));
    }
}
