//! File formats: raw tensor payloads with JSON sidecars, diagnostic CSVs,
//! and atomic writes.
//!
//! A tensor `name` is stored as `name.json`
//! (`{"shape": [...], "dtype": "f32" | "f64", "order": "row-major",
//! "endianness": "little", ...}`) next to `name.bin`, the packed
//! little-endian payload. Extra sidecar keys (the effective run config, for
//! example) are ignored on read.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use ndarray::{ArrayD, IxDyn};
use serde_json::{json, Map, Value};

use ndarray::{Array4, Axis};

use crate::analysis::{
    bias_heatmap, dominant_head_map, head_entropy_selected, BiasHeatmap, DominantHeadMap, EntropySelection,
    HeadEntropyReport,
};
use crate::attention::TokenPosition;
use crate::config::{Precision, RunConfig};
use crate::error::{Error, Result};
use crate::geometry::ProjectedPixel;
use crate::scene::Scene;

/// Writes `bytes` to `path` through a temporary file in the same directory.
/// Refuses to replace an existing file unless `force` is set.
pub fn write_atomic(path: &Path, bytes: &[u8], force: bool) -> Result<()> {
    if !force && path.exists() {
        return Err(Error::Io(std::io::Error::new(
            std::io::ErrorKind::AlreadyExists,
            format!("{} exists (pass --force to overwrite)", path.display()),
        )));
    }
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
    tmp.write_all(bytes)?;
    tmp.flush()?;
    #[cfg(unix)]
    {
        use std::os::unix::fs::PermissionsExt;
        // temp files are created 0600; give the result ordinary file modes
        let mode = fs::metadata(path).map(|m| m.permissions().mode()).unwrap_or(0o644);
        tmp.as_file().set_permissions(fs::Permissions::from_mode(mode))?;
    }
    tmp.persist(path).map_err(|e| Error::Io(e.error))?;
    Ok(())
}

/// Payload path for a sidecar: `x.json` -> `x.bin`.
pub fn payload_path(sidecar: &Path) -> PathBuf {
    sidecar.with_extension("bin")
}

/// Encodes a tensor as (sidecar JSON text, payload bytes).
pub fn encode_tensor(
    data: &ArrayD<f64>,
    precision: Precision,
    extra: Option<&Map<String, Value>>,
) -> (String, Vec<u8>) {
    let mut side = Map::new();
    side.insert("shape".into(), json!(data.shape()));
    side.insert("dtype".into(), json!(precision.as_str()));
    side.insert("order".into(), json!("row-major"));
    side.insert("endianness".into(), json!("little"));
    if let Some(extra) = extra {
        for (k, v) in extra {
            side.insert(k.clone(), v.clone());
        }
    }
    let std = data.as_standard_layout();
    let mut bytes = Vec::with_capacity(data.len() * 8);
    for &x in std.iter() {
        match precision {
            Precision::F64 => bytes.extend_from_slice(&x.to_le_bytes()),
            Precision::F32 => bytes.extend_from_slice(&(x as f32).to_le_bytes()),
        }
    }
    let mut text = serde_json::to_string_pretty(&Value::Object(side)).expect("sidecar serializes");
    text.push('\n');
    (text, bytes)
}

/// Parses a sidecar and its payload into an f64 tensor.
pub fn decode_tensor(sidecar: &str, payload: &[u8]) -> Result<ArrayD<f64>> {
    let v: Value = serde_json::from_str(sidecar)?;
    let obj = v.as_object().ok_or_else(|| Error::Format("tensor header is not an object".into()))?;
    let shape: Vec<usize> = obj
        .get("shape")
        .and_then(Value::as_array)
        .ok_or_else(|| Error::Format("tensor header lacks 'shape'".into()))?
        .iter()
        .map(|d| d.as_u64().map(|d| d as usize))
        .collect::<Option<_>>()
        .ok_or_else(|| Error::Format("tensor shape must be non-negative integers".into()))?;
    let dtype = obj.get("dtype").and_then(Value::as_str).unwrap_or("");
    let width = match dtype {
        "f64" => 8,
        "f32" => 4,
        other => return Err(Error::Format(format!("unsupported dtype '{other}'"))),
    };
    if obj.get("order").and_then(Value::as_str) != Some("row-major") {
        return Err(Error::Format("tensor order must be \"row-major\"".into()));
    }
    if obj.get("endianness").and_then(Value::as_str) != Some("little") {
        return Err(Error::Format("tensor endianness must be \"little\"".into()));
    }
    let count: usize = shape.iter().product();
    if payload.len() != count * width {
        return Err(Error::Format(format!(
            "payload has {} bytes, shape {shape:?} of {dtype} needs {}",
            payload.len(),
            count * width
        )));
    }
    let values: Vec<f64> = if width == 8 {
        payload.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect()
    } else {
        payload.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64).collect()
    };
    ArrayD::from_shape_vec(IxDyn(&shape), values).map_err(|e| Error::Format(e.to_string()))
}

pub fn write_tensor(
    sidecar: &Path,
    data: &ArrayD<f64>,
    precision: Precision,
    extra: Option<&Map<String, Value>>,
    force: bool,
) -> Result<()> {
    let (text, bytes) = encode_tensor(data, precision, extra);
    write_atomic(&payload_path(sidecar), &bytes, force)?;
    write_atomic(sidecar, text.as_bytes(), force)
}

pub fn read_tensor(sidecar: &Path) -> Result<ArrayD<f64>> {
    let text = fs::read_to_string(sidecar)?;
    let payload = fs::read(payload_path(sidecar))?;
    decode_tensor(&text, &payload)
}

/// `depth,u,v,w_tilde,valid` rows.
pub fn projection_csv(depths: &[f64], rows: &[ProjectedPixel]) -> String {
    let mut s = String::from("depth,u,v,w_tilde,valid\n");
    for (d, p) in depths.iter().zip(rows) {
        s.push_str(&format!("{d},{},{},{},{}\n", p.u, p.v, p.w_tilde, p.valid));
    }
    s
}

/// One row per (layer, batch entry, token, metric).
pub fn entropy_csv(reports: &[HeadEntropyReport]) -> String {
    let mut s = String::from("layer,batch,token,metric,value\n");
    for (layer, r) in reports.iter().enumerate() {
        for t in &r.tokens {
            s.push_str(&format!("{layer},{},{},entropy,{}\n", t.batch, t.key, t.entropy));
        }
        for (b, k) in &r.skipped {
            s.push_str(&format!("{layer},{b},{k},skipped,\n"));
        }
        s.push_str(&format!("{layer},all,all,mean,{}\n", r.mean));
        s.push_str(&format!("{layer},all,all,pooled_mean,{}\n", r.pooled_mean));
    }
    s
}

pub fn dominant_csv(maps: &[DominantHeadMap]) -> String {
    let mut s = String::from("layer,view,row,col,head\n");
    for (layer, m) in maps.iter().enumerate() {
        let cols = m.grid.0;
        for (view, heads) in m.per_view.iter().enumerate() {
            for (i, h) in heads.iter().enumerate() {
                s.push_str(&format!("{layer},{view},{},{},{h}\n", i / cols, i % cols));
            }
        }
    }
    s
}

/// Score grid of one head: `rows` lines of `cols` comma-separated values.
pub fn heatmap_grid_csv(map: &BiasHeatmap, head: usize) -> String {
    let cols = map.grid.0;
    let mut s = String::new();
    for row in map.scores[head].chunks(cols) {
        let line: Vec<String> = row.iter().map(|x| x.to_string()).collect();
        s.push_str(&line.join(","));
        s.push('\n');
    }
    s
}

/// Sidecar naming each head's anchors and grid file.
pub fn heatmap_sidecar(map: &BiasHeatmap, files: &[String], config: Option<&Value>) -> String {
    let heads: Vec<Value> = map
        .anchors
        .iter()
        .enumerate()
        .map(|(h, d)| json!({ "head": h, "anchors": d, "file": files[h] }))
        .collect();
    let mut v = json!({
        "query": { "view": map.query.view, "u": map.query.u, "v": map.query.v },
        "key_view": map.key_view,
        "grid": [map.grid.0, map.grid.1],
        "probe": "lowest-frequency channel pair of each axis block",
        "heads": heads,
    });
    if let Some(c) = config {
        v["config"] = c.clone();
    }
    let mut s = serde_json::to_string_pretty(&v).expect("sidecar serializes");
    s.push('\n');
    s
}

/// `b,l,h,c,value` rows of a `(B, L, H, C)` tensor.
pub fn tensor4_csv(x: &Array4<f64>) -> String {
    let mut s = String::from("b,l,h,c,value\n");
    for ((b, l, h, c), v) in x.indexed_iter() {
        s.push_str(&format!("{b},{l},{h},{c},{v}\n"));
    }
    s
}

/// Which query rows and which heatmap query/key the diagnostics use.
#[derive(Debug, Clone, Copy, Default)]
pub struct DiagnosticTarget {
    /// View whose query tokens enter entropy, dominant map and heatmap.
    pub query_view: usize,
    /// Heatmap query patch; the centre patch when `None`.
    pub query_patch: Option<usize>,
    /// Heatmap key view; the next view when `None`.
    pub key_view: Option<usize>,
}

/// Entropy, dominant-head and heatmap files for sequence-order weights
/// `(B, H, L, L)` of one or more layers, as `(file name, contents)`.
pub fn diagnostic_files(
    layers: &[Array4<f64>],
    scene: &Scene,
    cfg: &RunConfig,
    target: DiagnosticTarget,
) -> Result<Vec<(String, String)>> {
    let layout = scene.layout()?;
    let n = layout.n_views();
    if layers.is_empty() {
        return Err(Error::InvalidArgument("no attention weights given".into()));
    }
    if target.query_view >= n {
        return Err(Error::InvalidArgument(format!(
            "query view {} out of range ({n} views)",
            target.query_view
        )));
    }
    let lv = layout.tokens_per_view();
    let queries: Vec<usize> = (target.query_view * lv..(target.query_view + 1) * lv).collect();
    let mut reports = Vec::with_capacity(layers.len());
    let mut maps = Vec::with_capacity(layers.len());
    for w in layers {
        let (_, heads, lq, lk) = w.dim();
        if lq != layout.len() || lk != layout.len() || heads != cfg.heads {
            return Err(Error::ShapeMismatch(format!(
                "weights shape {:?} does not match {} heads over the scene's {} tokens",
                w.dim(),
                cfg.heads,
                layout.len()
            )));
        }
        let sel = EntropySelection { queries: Some(queries.clone()), ..Default::default() };
        reports.push(head_entropy_selected(w, &sel)?);
        maps.push(dominant_head_map(&w.select(Axis(2), &queries), &layout)?);
    }

    let patch = target.query_patch.unwrap_or(lv / 2 + scene.grid_dims(target.query_view).0 / 2);
    let &(u, v) = scene.patch_grid[target.query_view]
        .get(patch)
        .ok_or_else(|| Error::InvalidArgument(format!("query patch {patch} out of range ({lv} patches)")))?;
    let key_view = target.key_view.unwrap_or((target.query_view + 1) % n);
    let heat = bias_heatmap(
        TokenPosition { view: target.query_view, u, v },
        key_view,
        scene,
        &cfg.assignment()?,
        &cfg.rope_config()?,
        cfg.proj_eps,
    )?;

    let mut files = vec![
        ("entropy.csv".to_string(), entropy_csv(&reports)),
        ("dominant.csv".to_string(), dominant_csv(&maps)),
    ];
    let names: Vec<String> = (0..cfg.heads).map(|h| format!("heatmap_h{h}.csv")).collect();
    for (h, name) in names.iter().enumerate() {
        files.push((name.clone(), heatmap_grid_csv(&heat, h)));
    }
    files.push(("heatmap.json".to_string(), heatmap_sidecar(&heat, &names, Some(&cfg.to_json_value()))));
    Ok(files)
}

/// Compares two CSV texts cell by cell: numeric cells within `tol`
/// (absolute or relative), everything else exactly. Returns a description
/// of the first difference.
pub fn csv_diff(expected: &str, actual: &str, tol: f64) -> Option<String> {
    let (el, al): (Vec<&str>, Vec<&str>) = (expected.lines().collect(), actual.lines().collect());
    if el.len() != al.len() {
        return Some(format!("line count {} != {}", al.len(), el.len()));
    }
    for (n, (e, a)) in el.iter().zip(&al).enumerate() {
        let (ec, ac): (Vec<&str>, Vec<&str>) = (e.split(',').collect(), a.split(',').collect());
        if ec.len() != ac.len() {
            return Some(format!("line {}: column count differs", n + 1));
        }
        for (x, y) in ec.iter().zip(&ac) {
            let same = match (x.parse::<f64>(), y.parse::<f64>()) {
                (Ok(x), Ok(y)) => {
                    (x.is_nan() && y.is_nan()) || (x - y).abs() <= tol * x.abs().max(y.abs()).max(1.0)
                }
                _ => x == y,
            };
            if !same {
                return Some(format!("line {}: expected '{x}', got '{y}'", n + 1));
            }
        }
    }
    None
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn header_errors() {
        let good = r#"{"shape":[2],"dtype":"f64","order":"row-major","endianness":"little"}"#;
        assert!(decode_tensor(good, &[0u8; 16]).is_ok());
        assert!(decode_tensor(good, &[0u8; 15]).is_err());
        assert!(decode_tensor(&good.replace("f64", "i8"), &[0u8; 2]).is_err());
        assert!(decode_tensor(&good.replace("little", "big"), &[0u8; 16]).is_err());
        assert!(decode_tensor(&good.replace("row-major", "col-major"), &[0u8; 16]).is_err());
        assert!(decode_tensor(r#"{"dtype":"f64"}"#, &[]).is_err());
        assert!(decode_tensor("not json", &[]).is_err());
    }

    #[test]
    fn atomic_write_refuses_overwrite() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.txt");
        write_atomic(&p, b"one", false).unwrap();
        assert!(write_atomic(&p, b"two", false).unwrap_err().is_io());
        write_atomic(&p, b"two", true).unwrap();
        assert_eq!(fs::read(&p).unwrap(), b"two");
    }

    #[test]
    fn csv_diff_tolerance() {
        assert!(csv_diff("a,b\n1,x\n", "a,b\n1.0000000001,x\n", 1e-9).is_none());
        assert!(csv_diff("a,b\n1,x\n", "a,b\n1.1,x\n", 1e-9).is_some());
        assert!(csv_diff("a,b\n1,x\n", "a,b\n1,y\n", 1e-9).is_some());
        assert!(csv_diff("a\n", "a\n1\n", 1e-9).is_some());
    }

    proptest! {
        #[test]
        fn tensor_round_trip(values in proptest::collection::vec(-1e6f64..1e6, 1..40)) {
            let n = values.len();
            let t = ArrayD::from_shape_vec(IxDyn(&[1, n]), values).unwrap();
            let (side, bytes) = encode_tensor(&t, Precision::F64, None);
            prop_assert_eq!(decode_tensor(&side, &bytes).unwrap(), t.clone());
            let (side, bytes) = encode_tensor(&t, Precision::F32, None);
            let back = decode_tensor(&side, &bytes).unwrap();
            for (a, b) in back.iter().zip(t.iter()) {
                prop_assert!((a - b).abs() <= 1e-6 * b.abs().max(1.0));
            }
        }
    }
}
