//! Attention maps as CSV heat-map blocks.
//!
//! One block per head: a `head,<k>` line, then `H` lines of `W` comma-separated
//! values, then a blank line. Values use the shortest representation that
//! parses back to the same float.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::diffmath::Tensor;
use crate::error::{bail, Error, Result};
use crate::scalar::Scalar;

pub fn attention_csv<T: Scalar>(attention: &Tensor<T>) -> Result<String> {
    if attention.ndim() != 3 {
        bail!(Shape, "attention must be [K,H,W], got {:?}", attention.shape());
    }
    let (k, h, w) = (attention.shape()[0], attention.shape()[1], attention.shape()[2]);
    let mut out = String::new();
    for head in 0..k {
        writeln!(out, "head,{head}").unwrap();
        let block = attention.row(head);
        for r in 0..h {
            let line: Vec<String> = block[r * w..(r + 1) * w].iter().map(|v| v.to_string()).collect();
            writeln!(out, "{}", line.join(",")).unwrap();
        }
        out.push('\n');
    }
    Ok(out)
}

pub fn export_attention<T: Scalar>(attention: &Tensor<T>, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, attention_csv(attention)?)?;
    Ok(())
}

/// Parses the output of [`attention_csv`] back into a `[K, H, W]` tensor.
pub fn parse_attention_csv(text: &str) -> Result<Tensor<f64>> {
    let mut blocks: Vec<Vec<Vec<f64>>> = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        if line.is_empty() {
            continue;
        }
        if let Some(rest) = line.strip_prefix("head,") {
            let idx: usize = rest
                .parse()
                .map_err(|_| Error::InvalidInput(format!("line {}: bad head index", lineno + 1)))?;
            if idx != blocks.len() {
                bail!(InvalidInput, "line {}: expected head {}", lineno + 1, blocks.len());
            }
            blocks.push(Vec::new());
            continue;
        }
        let Some(block) = blocks.last_mut() else {
            bail!(InvalidInput, "line {}: values before first head", lineno + 1);
        };
        let row = line
            .split(',')
            .map(|v| v.parse::<f64>())
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|e| Error::InvalidInput(format!("line {}: {e}", lineno + 1)))?;
        block.push(row);
    }
    let Some(first) = blocks.first() else {
        bail!(InvalidInput, "no attention blocks");
    };
    let (h, w) = (first.len(), first.first().map_or(0, Vec::len));
    if blocks.iter().any(|b| b.len() != h || b.iter().any(|r| r.len() != w)) {
        bail!(Shape, "ragged attention blocks");
    }
    let k = blocks.len();
    let data = blocks.into_iter().flatten().flatten().collect();
    Tensor::new(vec![k, h, w], data)
}

pub fn read_attention(path: impl AsRef<Path>) -> Result<Tensor<f64>> {
    parse_attention_csv(&fs::read_to_string(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn uniform_map_cells() {
        let a = Tensor::<f64>::filled(&[1, 2, 2], 0.25);
        assert_eq!(attention_csv(&a).unwrap(), "head,0\n0.25,0.25\n0.25,0.25\n\n");
    }

    #[test]
    fn three_heads_three_blocks() {
        let a = Tensor::<f64>::from_fn(&[3, 2, 4], |i| i as f64 / 7.0);
        let text = attention_csv(&a).unwrap();
        assert_eq!(text.matches("head,").count(), 3);
        let back = parse_attention_csv(&text).unwrap();
        assert_eq!(back.shape(), &[3, 2, 4]);
        assert_eq!(back, a);
    }

    #[test]
    fn round_trip_through_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("attn.csv");
        let a = Tensor::<f64>::from_fn(&[2, 3, 3], |i| ((i as f64) * 1.3).sin().abs() / 9.0);
        export_attention(&a, &path).unwrap();
        let back = read_attention(&path).unwrap();
        for (x, y) in a.data().iter().zip(back.data()) {
            assert!((x - y).abs() <= 1e-12);
        }
    }

    #[test]
    fn unwritable_path_is_io_error() {
        let a = Tensor::<f64>::filled(&[1, 1, 1], 1.0);
        let r = export_attention(&a, "/nonexistent-dir/sub/attn.csv");
        assert!(matches!(r, Err(Error::Io(_))));
    }
}
