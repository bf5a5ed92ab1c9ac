//! Row-major nested-array encoding for dense tensors.

use ndarray::{ArrayD, IxDyn};
use serde_json::Value;

use crate::error::{Error, Result};

pub fn to_value(t: &ArrayD<f64>) -> Value {
    fn rec(t: &ArrayD<f64>, prefix: &mut Vec<usize>) -> Value {
        let depth = prefix.len();
        if depth == t.ndim() {
            return serde_json::json!(t[IxDyn(prefix)]);
        }
        let mut items = Vec::with_capacity(t.shape()[depth]);
        for i in 0..t.shape()[depth] {
            prefix.push(i);
            items.push(rec(t, prefix));
            prefix.pop();
        }
        Value::Array(items)
    }
    rec(t, &mut Vec::new())
}

pub fn from_value(v: &Value) -> Result<ArrayD<f64>> {
    let mut shape = Vec::new();
    let mut cursor = v;
    while let Value::Array(items) = cursor {
        shape.push(items.len());
        match items.first() {
            Some(first) => cursor = first,
            None => break,
        }
    }
    let mut data = Vec::new();
    flatten(v, &shape, 0, &mut data)?;
    ArrayD::from_shape_vec(IxDyn(&shape), data)
        .map_err(|e| Error::Serialisation(format!("ragged tensor: {e}")))
}

fn flatten(v: &Value, shape: &[usize], depth: usize, out: &mut Vec<f64>) -> Result<()> {
    if depth == shape.len() {
        let x = v
            .as_f64()
            .ok_or_else(|| Error::Serialisation(format!("expected number, got {v}")))?;
        out.push(x);
        return Ok(());
    }
    match v {
        Value::Array(items) if items.len() == shape[depth] => {
            for item in items {
                flatten(item, shape, depth + 1, out)?;
            }
            Ok(())
        }
        _ => Err(Error::Serialisation(format!(
            "ragged tensor at depth {depth}"
        ))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::arr3;

    #[test]
    fn nested_arrays_are_row_major() {
        let t = arr3(&[[[1.0, 2.0], [3.0, 4.0]], [[5.0, 6.0], [7.0, 0.1]]]).into_dyn();
        let v = to_value(&t);
        assert_eq!(v[1][0][1], serde_json::json!(6.0));
        assert_eq!(from_value(&v).unwrap(), t);
    }

    #[test]
    fn ragged_input_rejected() {
        let v: Value = serde_json::from_str("[[1.0, 2.0], [3.0]]").unwrap();
        assert!(from_value(&v).is_err());
    }
}
