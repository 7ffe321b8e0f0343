//! CSV export of the learnt embedding space for external visualisation
//! tools: one `theta_a` and one `theta_v` row per sample (active branches
//! only) plus one `theta_w` row per class in the embedding table.

use std::fmt::Write as _;
use std::path::Path;

use super::train::{class_table, embed_features};
use super::ProtocolError;
use crate::dataio::{ClassEmbeddingTable, DataError, FeatureRecord};
use crate::model::{AvcaConfig, AvcaParams};

fn push_row(out: &mut String, sample_id: u64, class_id: u32, kind: &str, row: &[f32]) {
    write!(out, "{sample_id},{class_id},{kind}").unwrap();
    for v in row {
        write!(out, ",{v}").unwrap();
    }
    out.push('\n');
}

/// Writes `sample_id,class_id,kind,e0..e{k_proj-1}` rows (with a header
/// line). `theta_w` rows use sample id 0 and cover every class in the
/// table. Eval-mode determinism makes re-exports byte-identical.
pub fn export_embeddings(
    params: &mut AvcaParams<f32>,
    config: &AvcaConfig,
    records: &[FeatureRecord],
    embeddings: &ClassEmbeddingTable,
    batch: usize,
    path: &Path,
) -> Result<(), ProtocolError> {
    let (theta_a, theta_v) = embed_features(params, config, records, embeddings, batch)?;
    let table = class_table(params, config, embeddings, &embeddings.class_ids())?;

    let mut out = String::from("sample_id,class_id,kind");
    for i in 0..config.k_proj {
        write!(out, ",e{i}").unwrap();
    }
    out.push('\n');

    for (theta, kind) in [(&theta_a, "theta_a"), (&theta_v, "theta_v")] {
        if let Some(theta) = theta {
            for (i, r) in records.iter().enumerate() {
                push_row(&mut out, r.sample_id, r.class_id, kind, theta.row(i));
            }
        }
    }
    for (i, class_id) in table.class_ids().iter().enumerate() {
        push_row(&mut out, 0, *class_id, "theta_w", table.theta_w().row(i));
    }
    std::fs::write(path, out).map_err(|e| ProtocolError::Data(DataError::io(path, e)))
}
