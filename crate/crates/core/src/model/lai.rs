//! Learnable camera/view side embeddings added to each unit embedding.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{ParamGroup, ParamId, ParamStore};
use crate::tensor::Tensor;

/// Camera and view labels of one image. Datasets without view labels use
/// `view = 0` with a one-view table.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct CamView {
    pub camera: usize,
    pub view: usize,
}

/// Zero-initialized table `A` of shape `[units, dim, n_cam, n_view]`.
#[derive(Debug)]
pub struct LaiTable {
    pub table: ParamId,
    pub units: usize,
    pub dim: usize,
    pub n_cam: usize,
    pub n_view: usize,
}

impl LaiTable {
    pub fn new(store: &mut ParamStore, units: usize, dim: usize, n_cam: usize, n_view: usize) -> Self {
        let shape = [units, dim, n_cam, n_view];
        let table = store.param("lai.table".into(), &shape, vec![0.0; shape.iter().product()], ParamGroup::Lai);
        Self { table, units, dim, n_cam, n_view }
    }

    pub fn param_count(units: usize, dim: usize, n_cam: usize, n_view: usize) -> usize {
        units * dim * n_cam * n_view
    }

    fn check(&self, meta: &[CamView]) -> Result<()> {
        for (i, m) in meta.iter().enumerate() {
            if m.camera >= self.n_cam || m.view >= self.n_view {
                return Err(Error::Metadata(format!(
                    "sample {i}: camera {} / view {} outside table of {} cameras x {} views",
                    m.camera, m.view, self.n_cam, self.n_view
                )));
            }
        }
        Ok(())
    }

    #[inline]
    fn offset(&self, unit: usize, d: usize, m: CamView) -> usize {
        ((unit * self.dim + d) * self.n_cam + m.camera) * self.n_view + m.view
    }

    /// `unit_n[b] += A[n, :, cam_b, view_b]` for every unit and sample.
    pub fn apply(&self, store: &ParamStore, units: &mut [Tensor], meta: &[CamView]) -> Result<()> {
        self.check(meta)?;
        if units.len() != self.units {
            return Err(Error::Shape(format!("table has {} units, got {}", self.units, units.len())));
        }
        let a = store.value(self.table);
        for (n, u) in units.iter_mut().enumerate() {
            let (b, dim) = u.dims2()?;
            if dim != self.dim || b != meta.len() {
                return Err(Error::Shape(format!("unit {n} is {b}x{dim}, table expects {}x{}", meta.len(), self.dim)));
            }
            for (row, &m) in u.data_mut().chunks_mut(dim).zip(meta) {
                for (d, v) in row.iter_mut().enumerate() {
                    *v += a[self.offset(n, d, m)];
                }
            }
        }
        Ok(())
    }

    pub fn backward(&self, store: &mut ParamStore, grads: &[Option<Tensor>], meta: &[CamView]) {
        let offsets: Vec<Vec<usize>> = (0..self.units)
            .map(|n| meta.iter().flat_map(|&m| (0..self.dim).map(move |d| (d, m))).map(|(d, m)| self.offset(n, d, m)).collect())
            .collect();
        let ga = store.grad_mut(self.table);
        for (n, g) in grads.iter().enumerate() {
            if let Some(g) = g {
                for (o, v) in offsets[n].iter().zip(g.data()) {
                    ga[*o] += v;
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_table_is_a_no_op_and_rows_pick_their_slot() {
        let mut store = ParamStore::new();
        let lai = LaiTable::new(&mut store, 2, 3, 4, 2);
        let meta = [CamView { camera: 1, view: 0 }, CamView { camera: 3, view: 1 }];
        let mut units = vec![Tensor::full(&[2, 3], 1.0), Tensor::full(&[2, 3], 2.0)];
        let before = units.clone();
        lai.apply(&store, &mut units, &meta).unwrap();
        assert_eq!(units, before);

        let off = lai.offset(1, 2, meta[1]);
        store.value_mut(lai.table)[off] = 5.0;
        lai.apply(&store, &mut units, &meta).unwrap();
        assert_eq!(units[1].data(), &[2.0, 2.0, 2.0, 2.0, 2.0, 7.0]);
        assert_eq!(units[0], before[0]);
    }

    #[test]
    fn out_of_range_metadata_is_rejected() {
        let mut store = ParamStore::new();
        let lai = LaiTable::new(&mut store, 1, 2, 2, 1);
        let mut units = vec![Tensor::zeros(&[1, 2])];
        let err = lai.apply(&store, &mut units, &[CamView { camera: 2, view: 0 }]);
        assert!(matches!(err, Err(Error::Metadata(_))));
    }

    #[test]
    fn veri776_table_size() {
        assert_eq!(LaiTable::param_count(1, 2048, 20, 8), 327_680);
        assert_eq!(LaiTable::param_count(4, 512, 20, 8), 327_680);
    }
}
