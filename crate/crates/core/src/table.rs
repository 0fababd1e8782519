//! Item-keyed embedding tables (semantic features, CF vectors).

use std::collections::HashMap;
use std::path::Path;

use ndarray::{Array2, ArrayView1, Axis};
use serde::{Deserialize, Serialize};

use crate::autograd::Mat;
use crate::checkpoint::{self, ArrayEntry, Manifest};
use crate::data::ItemId;
use crate::error::{DactError, Result};

/// Dense table with one row per item, in a fixed item order.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingTable {
    ids: Vec<ItemId>,
    data: Mat,
    index: HashMap<ItemId, usize>,
}

#[derive(Debug, Serialize, Deserialize)]
struct TableMeta {
    item_ids: Vec<ItemId>,
    #[serde(default)]
    period_index: Option<usize>,
}

impl EmbeddingTable {
    pub fn new(ids: Vec<ItemId>, data: Mat) -> Result<Self> {
        if ids.len() != data.nrows() {
            return Err(DactError::Dimension {
                expected: ids.len(),
                got: data.nrows(),
            });
        }
        let mut index = HashMap::with_capacity(ids.len());
        for (row, id) in ids.iter().enumerate() {
            if index.insert(*id, row).is_some() {
                return Err(DactError::config(format!("duplicate item {id} in table")));
            }
        }
        Ok(Self { ids, data, index })
    }

    pub fn empty(dim: usize) -> Self {
        Self {
            ids: Vec::new(),
            data: Array2::zeros((0, dim)),
            index: HashMap::new(),
        }
    }

    pub fn dim(&self) -> usize {
        self.data.ncols()
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn ids(&self) -> &[ItemId] {
        &self.ids
    }

    pub fn matrix(&self) -> &Mat {
        &self.data
    }

    pub fn contains(&self, id: ItemId) -> bool {
        self.index.contains_key(&id)
    }

    pub fn get(&self, id: ItemId) -> Option<ArrayView1<'_, f64>> {
        self.index.get(&id).map(|&r| self.data.row(r))
    }

    /// Stacks the rows for `items` in the given order.
    pub fn rows(&self, items: &[ItemId]) -> Result<Mat> {
        let idx: Vec<usize> = items
            .iter()
            .map(|id| {
                self.index
                    .get(id)
                    .copied()
                    .ok_or_else(|| DactError::Missing(format!("item {id} in embedding table")))
            })
            .collect::<Result<_>>()?;
        Ok(self.data.select(Axis(0), &idx))
    }

    /// Inserts or replaces a row.
    pub fn upsert(&mut self, id: ItemId, row: ArrayView1<f64>) -> Result<()> {
        crate::error::check_dim(self.dim(), row.len())?;
        match self.index.get(&id) {
            Some(&r) => self.data.row_mut(r).assign(&row),
            None => {
                self.data
                    .push_row(row)
                    .map_err(|e| DactError::config(e.to_string()))?;
                self.ids.push(id);
                self.index.insert(id, self.ids.len() - 1);
            }
        }
        Ok(())
    }

    /// Rounds every value through `f32`, matching a save/load round trip.
    pub fn round_to_f32(&mut self) {
        self.data.mapv_inplace(|v| v as f32 as f64);
    }

    /// Writes `manifest.json` plus one flat little-endian `f32` array.
    pub fn save(&self, dir: &Path, kind: &str, period_index: Option<usize>) -> Result<()> {
        let meta = TableMeta {
            item_ids: self.ids.clone(),
            period_index,
        };
        checkpoint::write_arrays(
            dir,
            kind,
            period_index,
            serde_json::to_value(meta)?,
            &[("vectors", &self.data)],
        )
    }

    pub fn load(dir: &Path) -> Result<(Self, Manifest)> {
        let (manifest, arrays) = checkpoint::read_arrays(dir)?;
        let meta: TableMeta = serde_json::from_value(manifest.meta.clone())?;
        let (_, data) = arrays
            .into_iter()
            .find(|(n, _)| n == "vectors")
            .ok_or_else(|| DactError::Missing("`vectors` array in table".into()))?;
        Ok((Self::new(meta.item_ids, data)?, manifest))
    }

    /// Entry describing the single array of a saved table.
    pub fn array_entry(manifest: &Manifest) -> Option<&ArrayEntry> {
        manifest.arrays.iter().find(|a| a.name == "vectors")
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn save_load_preserves_order() {
        let dir = tempfile::tempdir().unwrap();
        let t = EmbeddingTable::new(vec![ItemId(9), ItemId(2)], array![[0.5, 1.0], [2.0, -1.0]]).unwrap();
        t.save(dir.path(), "cf", Some(3)).unwrap();
        let (back, manifest) = EmbeddingTable::load(dir.path()).unwrap();
        assert_eq!(back, t);
        assert_eq!(manifest.period_index, Some(3));
        assert_eq!(EmbeddingTable::array_entry(&manifest).unwrap().shape, [2, 2]);
    }

    #[test]
    fn upsert_and_rows() {
        let mut t = EmbeddingTable::empty(2);
        t.upsert(ItemId(1), array![1.0, 2.0].view()).unwrap();
        t.upsert(ItemId(4), array![3.0, 4.0].view()).unwrap();
        t.upsert(ItemId(1), array![5.0, 6.0].view()).unwrap();
        assert_eq!(t.rows(&[ItemId(4), ItemId(1)]).unwrap(), array![[3.0, 4.0], [5.0, 6.0]]);
        assert!(t.rows(&[ItemId(7)]).is_err());
        assert!(EmbeddingTable::new(vec![ItemId(1), ItemId(1)], Array2::zeros((2, 1))).is_err());
    }
}
