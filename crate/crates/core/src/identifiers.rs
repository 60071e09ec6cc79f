//! Identifier pool, injective entity-to-identifier assignments and the learned
//! identifier embedding table.
//!
//! Entities carry no intrinsic order. Each one is given a unique identifier
//! drawn from a fixed pool, and the embedding of that identifier is what the
//! encoder sees and what the decoder queries with. An injective assignment into
//! a pool of size `u` exists exactly when `N <= u`, and there are then
//! `u! / (u - N)!` of them.

use candle_core::{Tensor, D};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::ParamStore;

/// Identifiers `0..size`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct IdentifierPool {
    size: usize,
}

impl IdentifierPool {
    pub fn new(size: usize) -> Result<Self> {
        if size == 0 {
            return Err(Error::Config("identifier pool must hold at least one identifier".into()));
        }
        Ok(Self { size })
    }

    pub fn size(&self) -> usize {
        self.size
    }
}

/// Injective map from entity index to identifier.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct IdentifierAssignment {
    ids: Vec<usize>,
}

impl IdentifierAssignment {
    /// Checks injectivity and range against `pool`.
    pub fn new(ids: Vec<usize>, pool: IdentifierPool) -> Result<Self> {
        let mut seen = vec![false; pool.size()];
        for &id in &ids {
            if id >= pool.size() {
                return Err(Error::IdentifierIndex {
                    id,
                    rows: pool.size(),
                });
            }
            if std::mem::replace(&mut seen[id], true) {
                return Err(Error::DuplicateIdentifier(id));
            }
        }
        Ok(Self { ids })
    }

    /// Entities `0..n` mapped to identifiers `0..n`.
    pub fn sequential(n: usize, pool: IdentifierPool) -> Result<Self> {
        if n > pool.size() {
            return Err(Error::PoolExhausted {
                entities: n,
                pool: pool.size(),
            });
        }
        Ok(Self { ids: (0..n).collect() })
    }

    pub fn ids(&self) -> &[usize] {
        &self.ids
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    /// Identifier `ida(e_n)` of entity `n`.
    pub fn of(&self, n: usize) -> usize {
        self.ids[n]
    }
}

/// Draws one assignment uniformly from all injective maps `{0..n} -> pool`.
///
/// Each entity in turn takes a uniformly random identifier among those not yet
/// used, which yields every injective map with probability `(u - N)! / u!`.
pub fn sample_assignment<R: Rng + ?Sized>(
    n: usize,
    pool: IdentifierPool,
    rng: &mut R,
) -> Result<IdentifierAssignment> {
    if n > pool.size() {
        return Err(Error::PoolExhausted {
            entities: n,
            pool: pool.size(),
        });
    }
    let mut available: Vec<usize> = (0..pool.size()).collect();
    let mut ids = Vec::with_capacity(n);
    for _ in 0..n {
        let pick = rng.random_range(0..available.len());
        ids.push(available.swap_remove(pick));
    }
    Ok(IdentifierAssignment { ids })
}

/// Number of injective maps from `n` entities into a pool of `u` identifiers,
/// the falling factorial `u (u-1) ... (u-n+1)`; zero when `n > u`.
/// Saturates at `u128::MAX`.
pub fn count_assignments(n: usize, u: usize) -> u128 {
    if n > u {
        return 0;
    }
    ((u - n + 1)..=u).fold(1u128, |acc, k| acc.saturating_mul(k as u128))
}

/// Learned `u x D_u` table of identifier embeddings.
#[derive(Debug, Clone)]
pub struct IdentifierEmbeddingTable {
    table: Tensor,
}

impl IdentifierEmbeddingTable {
    /// Rows drawn from `N(0, 0.02^2)`.
    pub fn new(store: &mut ParamStore, name: &str, pool: IdentifierPool, dim: usize) -> Result<Self> {
        let table = store.normal(format!("{name}.table"), &[pool.size(), dim], 0.02)?;
        Ok(Self { table })
    }

    pub fn from_tensor(table: Tensor) -> Result<Self> {
        table.dims2()?;
        Ok(Self { table })
    }

    pub fn rows(&self) -> usize {
        self.table.dims()[0]
    }

    pub fn dim(&self) -> usize {
        self.table.dims()[1]
    }

    pub fn tensor(&self) -> &Tensor {
        &self.table
    }

    /// `U[n] = table[ids[n]]`, shape `N x D_u`.
    pub fn embed(&self, assignment: &IdentifierAssignment) -> Result<Tensor> {
        self.gather(&[assignment.ids()])?.squeeze(0).map_err(Into::into)
    }

    /// Batched gather, shape `B x N x D_u`. All assignments must share `N`.
    pub fn gather(&self, assignments: &[&[usize]]) -> Result<Tensor> {
        let n = assignments.first().map(|a| a.len()).unwrap_or(0);
        let mut flat = Vec::with_capacity(assignments.len() * n);
        for ids in assignments {
            if ids.len() != n {
                return Err(Error::Shape("assignments in a batch must have equal length".into()));
            }
            for &id in *ids {
                if id >= self.rows() {
                    return Err(Error::IdentifierIndex {
                        id,
                        rows: self.rows(),
                    });
                }
                flat.push(id as u32);
            }
        }
        let index = Tensor::from_vec(flat, assignments.len() * n, self.table.device())?;
        let rows = self.table.index_select(&index, 0)?;
        Ok(rows.reshape((assignments.len(), n, self.table.dim(D::Minus1)?))?)
    }
}
