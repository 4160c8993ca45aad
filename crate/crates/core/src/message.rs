//! The single party-to-server payload and its wire format.
//!
//! A message carries the party's triangulated local graph, its marginal set
//! and fitted theta blocks, the encoded attributes (sketches or a perturbed
//! table), the binning spec's noisy value distributions and, for one party,
//! the noisy record count. Every numeric section is tagged with the
//! mechanism that produced it; raw values and exact counts never cross.
//!
//! Binary layout, version byte first, all integers little endian:
//!
//! ```text
//! u8  version (=1)
//! then 7 sections, each prefixed by a u32 byte length:
//!   header:     u32 party_id; u32 k; k x (u32 attr_id, u32 raw_domain)
//!   graph:      ceil(k*k/8) bytes, row-major adjacency bits over the
//!               header's attribute order
//!   marginals:  u32 count; per marginal: u32 arity, arity x u32 attr_id
//!   theta:      u32 blocks; per block: u32 cells, cells x f64
//!   encoding:   u8 kind (0 none, 1 sketches, 2 frequency oracle)
//!     kind 1:   f64 gamma, f64 eps_prime, u32 t, u64 k_p, u32 alpha_min,
//!               u32 attrs; per attr: u32 attr_id, u32 domain,
//!               domain*t x u32 alphas (hash-key ids are the repeat
//!               indices 0..t; no key material is serialized)
//!     kind 2:   f64 eps_prime, u32 attrs, u32 rows; per attr: u32 attr_id,
//!               u32 domain, rows x u32 values
//!   binning:    u32 attrs; per attr: u32 attr_id, u32 raw_domain, u32 bins;
//!               per bin: u32 values, values x f64
//!   count:      u8 present; if present: f64 noisy count
//! trailing provenance section (u32 length prefix):
//!   u32 entries; per entry: u8 section id, u8 mechanism id
//! ```

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::binning::BinningSpec;
use crate::fo::FoEncodedData;
use crate::mrf::AttributeGraph;
use crate::sketch::{SketchParams, SketchSet};
use crate::data::Marginal;

pub const WIRE_VERSION: u8 = 1;

#[derive(Debug, Error)]
pub enum MessageError {
    #[error("unsupported wire version {0}")]
    BadVersion(u8),
    #[error("truncated message while reading {0}")]
    Truncated(&'static str),
    #[error("malformed section {0}: {1}")]
    Malformed(&'static str, String),
    #[error("section {0} carries numeric data but no mechanism tag")]
    UntaggedSection(&'static str),
}

/// DP mechanism that produced a message section. There is no variant for
/// raw data: a section can only be tagged as some mechanism's output.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Mechanism {
    /// Structure chosen through Gaussian-noised scores.
    NoisyScoreSelection = 0,
    /// Parameters fitted against Gaussian-noised measurements.
    GaussianMeasurement = 1,
    /// DP Flajolet-Martin sketching.
    Dpfm = 2,
    /// Generalized randomized response.
    Grr = 3,
    /// Laplace perturbation.
    Laplace = 4,
}

impl Mechanism {
    fn from_id(id: u8) -> Option<Mechanism> {
        match id {
            0 => Some(Mechanism::NoisyScoreSelection),
            1 => Some(Mechanism::GaussianMeasurement),
            2 => Some(Mechanism::Dpfm),
            3 => Some(Mechanism::Grr),
            4 => Some(Mechanism::Laplace),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SectionId {
    Graph = 0,
    Marginals = 1,
    Theta = 2,
    Encoding = 3,
    Binning = 4,
    Count = 5,
}

impl SectionId {
    fn from_id(id: u8) -> Option<SectionId> {
        match id {
            0 => Some(SectionId::Graph),
            1 => Some(SectionId::Marginals),
            2 => Some(SectionId::Theta),
            3 => Some(SectionId::Encoding),
            4 => Some(SectionId::Binning),
            5 => Some(SectionId::Count),
            _ => None,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            SectionId::Graph => "graph",
            SectionId::Marginals => "marginals",
            SectionId::Theta => "theta",
            SectionId::Encoding => "encoding",
            SectionId::Binning => "binning",
            SectionId::Count => "count",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum EncodedAttributes {
    None,
    Sketches(SketchSet),
    FrequencyOracle(FoEncodedData),
}

/// Everything one party sends to the server.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PartyMessage {
    pub party_id: u32,
    /// Global ids of the party's attributes with their raw domain sizes.
    pub attributes: Vec<(usize, usize)>,
    /// Triangulated local attribute graph, in global ids.
    pub graph: AttributeGraph,
    /// Local marginal set, in global ids, aligned with `theta`.
    pub marginals: Vec<Marginal>,
    pub theta: Vec<Vec<f64>>,
    pub encoding: EncodedAttributes,
    pub binning: BinningSpec,
    pub noisy_count: Option<f64>,
    pub provenance: Vec<(SectionId, Mechanism)>,
}

impl PartyMessage {
    /// Structural audit: every populated section must carry a mechanism
    /// tag. Raw values cannot be tagged because no raw variant exists.
    pub fn audit(&self) -> Result<(), MessageError> {
        let tagged = |s: SectionId| self.provenance.iter().any(|(sec, _)| *sec == s);
        if !self.graph.edges().is_empty() && !tagged(SectionId::Graph) {
            return Err(MessageError::UntaggedSection("graph"));
        }
        if !self.marginals.is_empty() && !tagged(SectionId::Marginals) {
            return Err(MessageError::UntaggedSection("marginals"));
        }
        if self.theta.iter().any(|b| !b.is_empty()) && !tagged(SectionId::Theta) {
            return Err(MessageError::UntaggedSection("theta"));
        }
        if !matches!(self.encoding, EncodedAttributes::None) && !tagged(SectionId::Encoding) {
            return Err(MessageError::UntaggedSection("encoding"));
        }
        if !self.binning.attrs.is_empty() && !tagged(SectionId::Binning) {
            return Err(MessageError::UntaggedSection("binning"));
        }
        if self.noisy_count.is_some() && !tagged(SectionId::Count) {
            return Err(MessageError::UntaggedSection("count"));
        }
        Ok(())
    }

    /// Per-section byte lengths of the serialized form, for the
    /// communication accounting report.
    pub fn section_sizes(&self) -> SectionSizes {
        SectionSizes {
            header: self.encode_header().len(),
            graph: self.encode_graph().len(),
            marginals: self.encode_marginals().len(),
            theta: self.encode_theta().len(),
            encoding: self.encode_encoding().len(),
            binning: self.encode_binning().len(),
            count: self.encode_count().len(),
        }
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = vec![WIRE_VERSION];
        for section in [
            self.encode_header(),
            self.encode_graph(),
            self.encode_marginals(),
            self.encode_theta(),
            self.encode_encoding(),
            self.encode_binning(),
            self.encode_count(),
            self.encode_provenance(),
        ] {
            out.extend_from_slice(&(section.len() as u32).to_le_bytes());
            out.extend_from_slice(&section);
        }
        out
    }

    fn encode_header(&self) -> Vec<u8> {
        let mut w = Writer::new();
        w.u32(self.party_id);
        w.u32(self.attributes.len() as u32);
        for &(id, domain) in &self.attributes {
            w.u32(id as u32);
            w.u32(domain as u32);
        }
        w.0
    }

    fn encode_graph(&self) -> Vec<u8> {
        let k = self.attributes.len();
        let row_bytes = k.div_ceil(8);
        // Row-major bit matrix over the header's attribute order.
        let mut bits = vec![0u8; row_bytes * k];
        for (i, &(a, _)) in self.attributes.iter().enumerate() {
            for (j, &(b, _)) in self.attributes.iter().enumerate() {
                if self.graph.has_edge(a, b) {
                    bits[i * row_bytes + j / 8] |= 1 << (j % 8);
                }
            }
        }
        bits
    }

    fn encode_marginals(&self) -> Vec<u8> {
        let mut w = Writer::new();
        w.u32(self.marginals.len() as u32);
        for m in &self.marginals {
            w.u32(m.arity() as u32);
            for &a in m.attributes() {
                w.u32(a as u32);
            }
        }
        w.0
    }

    fn encode_theta(&self) -> Vec<u8> {
        let mut w = Writer::new();
        w.u32(self.theta.len() as u32);
        for block in &self.theta {
            w.u32(block.len() as u32);
            for &t in block {
                w.f64(t);
            }
        }
        w.0
    }

    fn encode_encoding(&self) -> Vec<u8> {
        let mut w = Writer::new();
        match &self.encoding {
            EncodedAttributes::None => w.0.push(0),
            EncodedAttributes::Sketches(set) => {
                w.0.push(1);
                w.f64(set.params.gamma);
                w.f64(set.params.eps_prime);
                w.u32(set.params.t);
                w.u64(set.params.k_p);
                w.u32(set.params.alpha_min);
                w.u32(set.attrs.len() as u32);
                for (&attr, sk) in &set.attrs {
                    w.u32(attr as u32);
                    w.u32(sk.domain as u32);
                    for &a in &sk.alphas {
                        w.u32(a);
                    }
                }
            }
            EncodedAttributes::FrequencyOracle(enc) => {
                w.0.push(2);
                w.f64(enc.eps_prime);
                w.u32(enc.columns.len() as u32);
                w.u32(enc.row_count() as u32);
                for (&attr, col) in &enc.columns {
                    w.u32(attr as u32);
                    w.u32(col.domain as u32);
                    for &v in &col.values {
                        w.u32(v);
                    }
                }
            }
        }
        w.0
    }

    fn encode_binning(&self) -> Vec<u8> {
        let mut w = Writer::new();
        w.u32(self.binning.attrs.len() as u32);
        for (&attr, b) in &self.binning.attrs {
            w.u32(attr as u32);
            w.u32(b.raw_domain as u32);
            w.u32(b.bins as u32);
            for dist in &b.distributions {
                w.u32(dist.len() as u32);
                for &p in dist {
                    w.f64(p);
                }
            }
        }
        w.0
    }

    fn encode_count(&self) -> Vec<u8> {
        let mut w = Writer::new();
        match self.noisy_count {
            None => w.0.push(0),
            Some(c) => {
                w.0.push(1);
                w.f64(c);
            }
        }
        w.0
    }

    fn encode_provenance(&self) -> Vec<u8> {
        let mut w = Writer::new();
        w.u32(self.provenance.len() as u32);
        for &(section, mechanism) in &self.provenance {
            w.0.push(section as u8);
            w.0.push(mechanism as u8);
        }
        w.0
    }

    pub fn decode(data: &[u8]) -> Result<PartyMessage, MessageError> {
        let mut r = Reader { data, pos: 0 };
        let version = r.u8("version")?;
        if version != WIRE_VERSION {
            return Err(MessageError::BadVersion(version));
        }
        let header = r.section("header")?;
        let graph_bytes = r.section("graph")?;
        let marginal_bytes = r.section("marginals")?;
        let theta_bytes = r.section("theta")?;
        let encoding_bytes = r.section("encoding")?;
        let binning_bytes = r.section("binning")?;
        let count_bytes = r.section("count")?;
        let provenance_bytes = r.section("provenance")?;

        let mut h = Reader::new(header);
        let party_id = h.u32("header")?;
        let k = h.u32("header")? as usize;
        let mut attributes = Vec::with_capacity(k);
        for _ in 0..k {
            let id = h.u32("header")? as usize;
            let domain = h.u32("header")? as usize;
            attributes.push((id, domain));
        }

        let row_bytes = k.div_ceil(8);
        if graph_bytes.len() != row_bytes * k {
            return Err(MessageError::Malformed("graph", "bad bitmatrix size".into()));
        }
        let mut graph = AttributeGraph::new(attributes.iter().map(|&(id, _)| id));
        for i in 0..k {
            for j in 0..k {
                if graph_bytes[i * row_bytes + j / 8] & (1 << (j % 8)) != 0 {
                    graph.add_edge(attributes[i].0, attributes[j].0);
                }
            }
        }

        let mut mr = Reader::new(marginal_bytes);
        let count = mr.u32("marginals")? as usize;
        let mut marginals = Vec::with_capacity(count);
        for _ in 0..count {
            let arity = mr.u32("marginals")? as usize;
            let mut ids = Vec::with_capacity(arity);
            for _ in 0..arity {
                ids.push(mr.u32("marginals")? as usize);
            }
            marginals.push(
                Marginal::new(ids)
                    .map_err(|e| MessageError::Malformed("marginals", e.to_string()))?,
            );
        }

        let mut tr = Reader::new(theta_bytes);
        let blocks = tr.u32("theta")? as usize;
        let mut theta = Vec::with_capacity(blocks);
        for _ in 0..blocks {
            let cells = tr.u32("theta")? as usize;
            let mut block = Vec::with_capacity(cells);
            for _ in 0..cells {
                block.push(tr.f64("theta")?);
            }
            theta.push(block);
        }

        let mut er = Reader::new(encoding_bytes);
        let kind = er.u8("encoding")?;
        let encoding = match kind {
            0 => EncodedAttributes::None,
            1 => {
                let gamma = er.f64("encoding")?;
                let eps_prime = er.f64("encoding")?;
                let t = er.u32("encoding")?;
                let k_p = er.u64("encoding")?;
                let alpha_min = er.u32("encoding")?;
                let attrs = er.u32("encoding")? as usize;
                let mut map = std::collections::BTreeMap::new();
                for _ in 0..attrs {
                    let attr = er.u32("encoding")? as usize;
                    let domain = er.u32("encoding")? as usize;
                    let mut alphas = Vec::with_capacity(domain * t as usize);
                    for _ in 0..domain * t as usize {
                        alphas.push(er.u32("encoding")?);
                    }
                    map.insert(attr, crate::sketch::AttributeSketches { domain, alphas });
                }
                let expected = SketchParams::derive(gamma, t, eps_prime)
                    .map_err(|e| MessageError::Malformed("encoding", e.to_string()))?;
                if expected.k_p != k_p || expected.alpha_min != alpha_min {
                    return Err(MessageError::Malformed(
                        "encoding",
                        "sketch parameters inconsistent with gamma/eps_prime".into(),
                    ));
                }
                EncodedAttributes::Sketches(SketchSet {
                    params: expected,
                    attrs: map,
                })
            }
            2 => {
                let eps_prime = er.f64("encoding")?;
                let attrs = er.u32("encoding")? as usize;
                let rows = er.u32("encoding")? as usize;
                let mut map = std::collections::BTreeMap::new();
                for _ in 0..attrs {
                    let attr = er.u32("encoding")? as usize;
                    let domain = er.u32("encoding")? as usize;
                    let mut values = Vec::with_capacity(rows);
                    for _ in 0..rows {
                        values.push(er.u32("encoding")?);
                    }
                    map.insert(attr, crate::fo::FoColumn { domain, values });
                }
                EncodedAttributes::FrequencyOracle(FoEncodedData {
                    eps_prime,
                    columns: map,
                })
            }
            other => {
                return Err(MessageError::Malformed(
                    "encoding",
                    format!("unknown kind {other}"),
                ))
            }
        };

        let mut br = Reader::new(binning_bytes);
        let battrs = br.u32("binning")? as usize;
        let mut binning = BinningSpec::default();
        for _ in 0..battrs {
            let attr = br.u32("binning")? as usize;
            let raw_domain = br.u32("binning")? as usize;
            let bins = br.u32("binning")? as usize;
            let mut distributions = Vec::with_capacity(bins);
            for _ in 0..bins {
                let values = br.u32("binning")? as usize;
                let mut dist = Vec::with_capacity(values);
                for _ in 0..values {
                    dist.push(br.f64("binning")?);
                }
                distributions.push(dist);
            }
            binning.attrs.insert(
                attr,
                crate::binning::AttributeBinning {
                    raw_domain,
                    bins,
                    distributions,
                },
            );
        }

        let mut cr = Reader::new(count_bytes);
        let noisy_count = match cr.u8("count")? {
            0 => None,
            _ => Some(cr.f64("count")?),
        };

        let mut pr = Reader::new(provenance_bytes);
        let entries = pr.u32("provenance")? as usize;
        let mut provenance = Vec::with_capacity(entries);
        for _ in 0..entries {
            let section = SectionId::from_id(pr.u8("provenance")?)
                .ok_or_else(|| MessageError::Malformed("provenance", "bad section id".into()))?;
            let mechanism = Mechanism::from_id(pr.u8("provenance")?)
                .ok_or_else(|| MessageError::Malformed("provenance", "bad mechanism id".into()))?;
            provenance.push((section, mechanism));
        }

        Ok(PartyMessage {
            party_id,
            attributes,
            graph,
            marginals,
            theta,
            encoding,
            binning,
            noisy_count,
            provenance,
        })
    }

    /// Human-readable JSON rendering for debugging.
    pub fn to_debug_json(&self) -> String {
        serde_json::to_string_pretty(self).unwrap_or_else(|e| format!("{{\"error\":\"{e}\"}}"))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SectionSizes {
    pub header: usize,
    pub graph: usize,
    pub marginals: usize,
    pub theta: usize,
    pub encoding: usize,
    pub binning: usize,
    pub count: usize,
}

impl SectionSizes {
    pub fn total_with_framing(&self) -> usize {
        // Version byte, 8 length prefixes (incl. provenance) handled by
        // encode(); callers should prefer encode().len() for exact totals.
        self.header
            + self.graph
            + self.marginals
            + self.theta
            + self.encoding
            + self.binning
            + self.count
    }
}

struct Writer(Vec<u8>);

impl Writer {
    fn new() -> Self {
        Writer(Vec::new())
    }
    fn u32(&mut self, v: u32) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn f64(&mut self, v: f64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
}

struct Reader<'a> {
    data: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn new(data: &'a [u8]) -> Self {
        Reader { data, pos: 0 }
    }

    fn take(&mut self, n: usize, what: &'static str) -> Result<&'a [u8], MessageError> {
        if self.pos + n > self.data.len() {
            return Err(MessageError::Truncated(what));
        }
        let out = &self.data[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn u8(&mut self, what: &'static str) -> Result<u8, MessageError> {
        Ok(self.take(1, what)?[0])
    }

    fn u32(&mut self, what: &'static str) -> Result<u32, MessageError> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &'static str) -> Result<u64, MessageError> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }

    fn f64(&mut self, what: &'static str) -> Result<f64, MessageError> {
        Ok(f64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }

    fn section(&mut self, what: &'static str) -> Result<&'a [u8], MessageError> {
        let len = self.u32(what)? as usize;
        self.take(len, what)
    }
}
