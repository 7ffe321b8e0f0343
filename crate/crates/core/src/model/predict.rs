use super::{EvalOutput, ModelError};
use crate::numerics::TensorData;

/// Projected class-label embeddings for every candidate class, rows sorted
/// by ascending class id.
#[derive(Clone, Debug)]
pub struct ClassTable {
    class_ids: Vec<u32>,
    theta_w: TensorData<f32>,
}

impl ClassTable {
    pub fn new(class_ids: Vec<u32>, theta_w: TensorData<f32>) -> Result<Self, ModelError> {
        if class_ids.is_empty() {
            return Err(ModelError::EmptyClassTable);
        }
        assert_eq!(class_ids.len(), theta_w.rows(), "one row per class");
        let mut order: Vec<usize> = (0..class_ids.len()).collect();
        order.sort_by_key(|&i| class_ids[i]);
        let cols = theta_w.cols();
        let mut ids = Vec::with_capacity(class_ids.len());
        let mut data = Vec::with_capacity(theta_w.numel());
        for &i in &order {
            ids.push(class_ids[i]);
            data.extend_from_slice(theta_w.row(i));
        }
        Ok(Self {
            class_ids: ids,
            theta_w: TensorData::matrix(order.len(), cols, data).unwrap(),
        })
    }

    pub fn class_ids(&self) -> &[u32] {
        &self.class_ids
    }

    pub fn theta_w(&self) -> &TensorData<f32> {
        &self.theta_w
    }

    pub fn len(&self) -> usize {
        self.class_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.class_ids.is_empty()
    }
}

fn euclidean_rows(theta: &TensorData<f32>, table: &TensorData<f32>) -> Vec<Vec<f32>> {
    let k = theta.cols();
    assert_eq!(k, table.cols(), "embedding widths differ");
    (0..theta.rows())
        .map(|b| {
            let sample = theta.row(b);
            (0..table.rows())
                .map(|c| {
                    let row = table.row(c);
                    sample
                        .iter()
                        .zip(row)
                        .map(|(s, t)| (s - t) * (s - t))
                        .sum::<f32>()
                        .sqrt()
                })
                .collect()
        })
        .collect()
}

/// Per-sample distances to every class under the chosen output variant:
/// `theta_v`/`theta_a` use one branch, `sum` adds both branch distances,
/// `min` takes their per-class minimum.
pub fn combined_distances(
    theta_a: Option<&TensorData<f32>>,
    theta_v: Option<&TensorData<f32>>,
    table: &ClassTable,
    output: EvalOutput,
) -> Result<Vec<Vec<f32>>, ModelError> {
    fn need<'a>(
        t: Option<&'a TensorData<f32>>,
        which: &str,
        output: EvalOutput,
    ) -> Result<&'a TensorData<f32>, ModelError> {
        t.ok_or_else(|| ModelError::InvalidConfig {
            reason: format!("eval output {output:?} needs {which} outputs"),
        })
    }
    match output {
        EvalOutput::ThetaV => Ok(euclidean_rows(
            need(theta_v, "visual-branch", output)?,
            table.theta_w(),
        )),
        EvalOutput::ThetaA => Ok(euclidean_rows(
            need(theta_a, "audio-branch", output)?,
            table.theta_w(),
        )),
        EvalOutput::Sum | EvalOutput::Min => {
            let da = euclidean_rows(need(theta_a, "audio-branch", output)?, table.theta_w());
            let dv = euclidean_rows(need(theta_v, "visual-branch", output)?, table.theta_w());
            Ok(da
                .into_iter()
                .zip(dv)
                .map(|(ra, rv)| {
                    ra.into_iter()
                        .zip(rv)
                        .map(|(a, v)| match output {
                            EvalOutput::Sum => a + v,
                            _ => a.min(v),
                        })
                        .collect()
                })
                .collect())
        }
    }
}

/// Argmin class per distance row; equidistant classes resolve to the lowest
/// class id (rows are in ascending id order and the scan keeps strict
/// improvements only).
pub fn predict(distances: &[Vec<f32>], table: &ClassTable) -> Vec<u32> {
    distances
        .iter()
        .map(|row| {
            debug_assert_eq!(row.len(), table.len());
            let mut best = 0usize;
            for (j, d) in row.iter().enumerate() {
                if *d < row[best] {
                    best = j;
                }
            }
            table.class_ids()[best]
        })
        .collect()
}
