//! Integer-coded schemas, datasets, marginals and contingency histograms.
//!
//! Attribute values are dense codes `0..u_j`; category names live in the
//! harness. Cells of a marginal are flattened row-major with the first
//! attribute most significant, so `cell_index` and `cell_tuple` are mutual
//! inverses over `0..prod(u_j)`.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("schema must have at least one attribute")]
    EmptySchema,
    #[error("attribute `{0}` has domain size {1}, need at least 2")]
    DomainTooSmall(String, usize),
    #[error("duplicate attribute name `{0}`")]
    DuplicateAttribute(String),
    #[error("marginal attribute indices must be distinct")]
    DuplicateIndex,
    #[error("attribute index {0} out of range for schema with {1} attributes")]
    IndexOutOfRange(usize, usize),
    #[error("value {value} out of domain [0,{domain}) for attribute {attribute} (row {row})")]
    ValueOutOfDomain {
        attribute: usize,
        row: usize,
        value: u32,
        domain: usize,
    },
    #[error("tuple arity {0} does not match marginal arity {1}")]
    ArityMismatch(usize, usize),
    #[error("histogram length {0} does not match cell count {1}")]
    LengthMismatch(usize, usize),
    #[error("histograms cover different marginals")]
    MarginalMismatch,
    #[error("histogram is degenerate: {0}")]
    Degenerate(&'static str),
    #[error("cell space too large to enumerate ({0} cells)")]
    CellSpaceTooLarge(u128),
}

/// Ordered attribute list with domain sizes.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Schema {
    attributes: Vec<(String, usize)>,
}

impl Schema {
    pub fn new(attributes: Vec<(String, usize)>) -> Result<Self, DataError> {
        if attributes.is_empty() {
            return Err(DataError::EmptySchema);
        }
        for (name, size) in &attributes {
            if *size < 2 {
                return Err(DataError::DomainTooSmall(name.clone(), *size));
            }
        }
        for (i, (name, _)) in attributes.iter().enumerate() {
            if attributes[..i].iter().any(|(other, _)| other == name) {
                return Err(DataError::DuplicateAttribute(name.clone()));
            }
        }
        Ok(Self { attributes })
    }

    /// Unnamed schema from domain sizes alone.
    pub fn from_sizes(sizes: &[usize]) -> Result<Self, DataError> {
        Self::new(
            sizes
                .iter()
                .enumerate()
                .map(|(i, &u)| (format!("a{i}"), u))
                .collect(),
        )
    }

    pub fn attribute_count(&self) -> usize {
        self.attributes.len()
    }

    pub fn domain_size(&self, attribute: usize) -> usize {
        self.attributes[attribute].1
    }

    pub fn domain_sizes(&self) -> Vec<usize> {
        self.attributes.iter().map(|(_, u)| *u).collect()
    }

    pub fn name(&self, attribute: usize) -> &str {
        &self.attributes[attribute].0
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.attributes.iter().map(|(n, _)| n.as_str())
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.attributes.iter().position(|(n, _)| n == name)
    }

    /// Sub-schema over the given attribute indices, in the given order.
    pub fn project(&self, attributes: &[usize]) -> Result<Schema, DataError> {
        let mut out = Vec::with_capacity(attributes.len());
        for &a in attributes {
            if a >= self.attributes.len() {
                return Err(DataError::IndexOutOfRange(a, self.attributes.len()));
            }
            out.push(self.attributes[a].clone());
        }
        Schema::new(out)
    }
}

/// An n-by-d table of integer codes over a schema.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    schema: Schema,
    rows: Vec<u32>, // row-major, n * d
}

impl Dataset {
    pub fn new(schema: Schema, rows: Vec<Vec<u32>>) -> Result<Self, DataError> {
        let d = schema.attribute_count();
        let mut flat = Vec::with_capacity(rows.len() * d);
        for (r, row) in rows.iter().enumerate() {
            if row.len() != d {
                return Err(DataError::ArityMismatch(row.len(), d));
            }
            for (j, &v) in row.iter().enumerate() {
                if v as usize >= schema.domain_size(j) {
                    return Err(DataError::ValueOutOfDomain {
                        attribute: j,
                        row: r,
                        value: v,
                        domain: schema.domain_size(j),
                    });
                }
                flat.push(v);
            }
        }
        Ok(Self { schema, rows: flat })
    }

    pub fn from_flat(schema: Schema, flat: Vec<u32>) -> Result<Self, DataError> {
        let d = schema.attribute_count();
        if flat.len() % d != 0 {
            return Err(DataError::ArityMismatch(flat.len() % d, d));
        }
        for (i, &v) in flat.iter().enumerate() {
            let j = i % d;
            if v as usize >= schema.domain_size(j) {
                return Err(DataError::ValueOutOfDomain {
                    attribute: j,
                    row: i / d,
                    value: v,
                    domain: schema.domain_size(j),
                });
            }
        }
        Ok(Self { schema, rows: flat })
    }

    pub fn empty(schema: Schema) -> Self {
        Self {
            schema,
            rows: Vec::new(),
        }
    }

    pub fn schema(&self) -> &Schema {
        &self.schema
    }

    pub fn row_count(&self) -> usize {
        if self.schema.attribute_count() == 0 {
            0
        } else {
            self.rows.len() / self.schema.attribute_count()
        }
    }

    pub fn value(&self, row: usize, attribute: usize) -> u32 {
        self.rows[row * self.schema.attribute_count() + attribute]
    }

    pub fn row(&self, row: usize) -> &[u32] {
        let d = self.schema.attribute_count();
        &self.rows[row * d..(row + 1) * d]
    }

    pub fn column(&self, attribute: usize) -> Vec<u32> {
        (0..self.row_count()).map(|r| self.value(r, attribute)).collect()
    }

    /// Vertical slice: the named attributes become a new dataset with the
    /// same row order.
    pub fn project(&self, attributes: &[usize]) -> Result<Dataset, DataError> {
        let schema = self.schema.project(attributes)?;
        let mut flat = Vec::with_capacity(self.row_count() * attributes.len());
        for r in 0..self.row_count() {
            for &a in attributes {
                flat.push(self.value(r, a));
            }
        }
        Ok(Dataset { schema, rows: flat })
    }
}

/// Canonically ordered set of attribute indices.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Marginal {
    attributes: Vec<usize>,
}

impl Marginal {
    /// Canonicalizes to ascending order; duplicates are rejected.
    pub fn new(mut attributes: Vec<usize>) -> Result<Self, DataError> {
        attributes.sort_unstable();
        if attributes.windows(2).any(|w| w[0] == w[1]) {
            return Err(DataError::DuplicateIndex);
        }
        Ok(Self { attributes })
    }

    pub fn single(attribute: usize) -> Self {
        Self {
            attributes: vec![attribute],
        }
    }

    pub fn pair(a: usize, b: usize) -> Result<Self, DataError> {
        Self::new(vec![a, b])
    }

    pub fn attributes(&self) -> &[usize] {
        &self.attributes
    }

    pub fn arity(&self) -> usize {
        self.attributes.len()
    }

    pub fn contains(&self, attribute: usize) -> bool {
        self.attributes.binary_search(&attribute).is_ok()
    }

    pub fn is_subset_of(&self, other: &[usize]) -> bool {
        self.attributes.iter().all(|a| other.contains(a))
    }

    /// Rewrites each index through `map` (position -> new index).
    pub fn remap(&self, map: &[usize]) -> Result<Marginal, DataError> {
        let mut out = Vec::with_capacity(self.attributes.len());
        for &a in &self.attributes {
            if a >= map.len() {
                return Err(DataError::IndexOutOfRange(a, map.len()));
            }
            out.push(map[a]);
        }
        Marginal::new(out)
    }

    pub fn validate(&self, schema: &Schema) -> Result<(), DataError> {
        let d = schema.attribute_count();
        match self.attributes.iter().find(|&&a| a >= d) {
            Some(&a) => Err(DataError::IndexOutOfRange(a, d)),
            None => Ok(()),
        }
    }

    /// Product of domain sizes over the marginal.
    pub fn cell_count(&self, schema: &Schema) -> Result<usize, DataError> {
        self.validate(schema)?;
        let mut total: u128 = 1;
        for &a in &self.attributes {
            total *= schema.domain_size(a) as u128;
            if total > u128::from(u64::MAX) {
                return Err(DataError::CellSpaceTooLarge(total));
            }
        }
        usize::try_from(total).map_err(|_| DataError::CellSpaceTooLarge(total as u128))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum HistKind {
    /// Raw or noisy counts; entries may be negative for unbiased estimators.
    Counts,
    /// Non-negative entries summing to 1.
    Distribution,
}

/// Dense cell vector over a marginal's mixed-radix cell space.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContingencyHistogram {
    marginal: Marginal,
    cells: Vec<f64>,
    kind: HistKind,
}

impl ContingencyHistogram {
    pub fn new(
        marginal: Marginal,
        cells: Vec<f64>,
        kind: HistKind,
        schema: &Schema,
    ) -> Result<Self, DataError> {
        let expect = marginal.cell_count(schema)?;
        if cells.len() != expect {
            return Err(DataError::LengthMismatch(cells.len(), expect));
        }
        if kind == HistKind::Distribution {
            if cells.iter().any(|&c| c < 0.0) {
                return Err(DataError::Degenerate("negative entry in distribution"));
            }
            let sum: f64 = cells.iter().sum();
            if (sum - 1.0).abs() > 1e-9 {
                return Err(DataError::Degenerate("distribution does not sum to 1"));
            }
        }
        Ok(Self {
            marginal,
            cells,
            kind,
        })
    }

    pub fn zeros(marginal: Marginal, schema: &Schema) -> Result<Self, DataError> {
        let n = marginal.cell_count(schema)?;
        Ok(Self {
            marginal,
            cells: vec![0.0; n],
            kind: HistKind::Counts,
        })
    }

    pub fn marginal(&self) -> &Marginal {
        &self.marginal
    }

    pub fn cells(&self) -> &[f64] {
        &self.cells
    }

    pub fn cells_mut(&mut self) -> &mut [f64] {
        &mut self.cells
    }

    pub fn kind(&self) -> HistKind {
        self.kind
    }

    pub fn total(&self) -> f64 {
        self.cells.iter().sum()
    }

    /// Normalized copy. Requires non-negative entries with positive mass.
    pub fn to_distribution(&self, schema: &Schema) -> Result<ContingencyHistogram, DataError> {
        if self.cells.iter().any(|&c| c < 0.0) {
            return Err(DataError::Degenerate("negative entry"));
        }
        let sum = self.total();
        if sum <= 0.0 {
            return Err(DataError::Degenerate("zero total mass"));
        }
        ContingencyHistogram::new(
            self.marginal.clone(),
            self.cells.iter().map(|c| c / sum).collect(),
            HistKind::Distribution,
            schema,
        )
    }

    /// Scales every cell, turning the histogram into counts.
    pub fn scaled(&self, factor: f64) -> ContingencyHistogram {
        ContingencyHistogram {
            marginal: self.marginal.clone(),
            cells: self.cells.iter().map(|c| c * factor).collect(),
            kind: HistKind::Counts,
        }
    }

    /// Sums out the attributes not in `target`, which must be a subset of
    /// this histogram's marginal.
    pub fn marginalize_to(
        &self,
        target: &Marginal,
        schema: &Schema,
    ) -> Result<ContingencyHistogram, DataError> {
        if !target.is_subset_of(self.marginal.attributes()) {
            return Err(DataError::MarginalMismatch);
        }
        let mut out = ContingencyHistogram::zeros(target.clone(), schema)?;
        out.kind = self.kind;
        let positions: Vec<usize> = target
            .attributes()
            .iter()
            .map(|a| {
                self.marginal
                    .attributes()
                    .iter()
                    .position(|b| b == a)
                    .expect("subset checked")
            })
            .collect();
        let mut tuple = vec![0u32; self.marginal.arity()];
        for (idx, &mass) in self.cells.iter().enumerate() {
            cell_tuple_into(idx, &self.marginal, schema, &mut tuple);
            let sub: Vec<u32> = positions.iter().map(|&p| tuple[p]).collect();
            let out_idx = cell_index(&sub, target, schema)?;
            out.cells[out_idx] += mass;
        }
        Ok(out)
    }
}

/// Flattens a value tuple into the marginal's row-major cell index; the
/// first attribute is most significant.
pub fn cell_index(
    tuple: &[u32],
    marginal: &Marginal,
    schema: &Schema,
) -> Result<usize, DataError> {
    if tuple.len() != marginal.arity() {
        return Err(DataError::ArityMismatch(tuple.len(), marginal.arity()));
    }
    let mut idx = 0usize;
    for (&v, &a) in tuple.iter().zip(marginal.attributes()) {
        let u = schema.domain_size(a);
        if v as usize >= u {
            return Err(DataError::ValueOutOfDomain {
                attribute: a,
                row: 0,
                value: v,
                domain: u,
            });
        }
        idx = idx * u + v as usize;
    }
    Ok(idx)
}

/// Inverse of [`cell_index`].
pub fn cell_tuple(index: usize, marginal: &Marginal, schema: &Schema) -> Vec<u32> {
    let mut out = vec![0u32; marginal.arity()];
    cell_tuple_into(index, marginal, schema, &mut out);
    out
}

fn cell_tuple_into(index: usize, marginal: &Marginal, schema: &Schema, out: &mut [u32]) {
    let mut rest = index;
    for (slot, &a) in out.iter_mut().zip(marginal.attributes()).rev() {
        let u = schema.domain_size(a);
        *slot = (rest % u) as u32;
        rest /= u;
    }
}

/// Counts the occurrences of every value tuple of the marginal.
pub fn compute_histogram(
    data: &Dataset,
    marginal: &Marginal,
) -> Result<ContingencyHistogram, DataError> {
    let schema = data.schema();
    let mut hist = ContingencyHistogram::zeros(marginal.clone(), schema)?;
    let sizes: Vec<usize> = marginal
        .attributes()
        .iter()
        .map(|&a| schema.domain_size(a))
        .collect();
    for r in 0..data.row_count() {
        let mut idx = 0usize;
        for (&a, &u) in marginal.attributes().iter().zip(&sizes) {
            idx = idx * u + data.value(r, a) as usize;
        }
        hist.cells[idx] += 1.0;
    }
    Ok(hist)
}

/// Total variation distance between the normalized inputs: half the L1
/// distance, in [0, 1].
pub fn tvd(a: &ContingencyHistogram, b: &ContingencyHistogram) -> Result<f64, DataError> {
    if a.marginal() != b.marginal() {
        return Err(DataError::MarginalMismatch);
    }
    if a.cells.len() != b.cells.len() {
        return Err(DataError::LengthMismatch(a.cells.len(), b.cells.len()));
    }
    let norm = |h: &ContingencyHistogram| -> Result<f64, DataError> {
        if h.cells.iter().any(|&c| c < 0.0) {
            return Err(DataError::Degenerate("negative entry"));
        }
        let sum = h.total();
        if sum <= 0.0 {
            return Err(DataError::Degenerate("zero total mass"));
        }
        Ok(sum)
    };
    let (sa, sb) = (norm(a)?, norm(b)?);
    let l1: f64 = a
        .cells
        .iter()
        .zip(&b.cells)
        .map(|(&x, &y)| (x / sa - y / sb).abs())
        .sum();
    Ok(0.5 * l1)
}
