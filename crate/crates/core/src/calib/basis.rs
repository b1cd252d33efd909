use std::path::Path;

use serde::Serialize;

use crate::autonet::Role;
use crate::codec::{Reader, Writer};
use crate::error::{Error, Result};
use crate::numkit::{is_orthogonal, Matrix};

const MAGIC: &[u8; 4] = b"SGBA";
const VERSION: u32 = 1;
const ORTHO_TOL: f64 = 1e-8;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize)]
pub struct Provenance {
    pub n_steps: u32,
    pub n_blocks: u32,
    pub seed: u64,
    /// Seconds since the epoch. Kept in memory only; basis files carry no
    /// timestamp so reruns produce identical bytes.
    pub created_unix: Option<u64>,
}

/// Orthogonal pair `(u, v)` for one layer role. Weight-space gradients `G`
/// (gradients of `Wᵀ`, `d_in × d_out`) map to `u·G·vᵀ`.
#[derive(Clone, Debug, PartialEq)]
pub struct TransitionBasis {
    pub role: Role,
    u: Matrix,
    v: Matrix,
    u_t: Matrix,
    v_t: Matrix,
    pub provenance: Provenance,
}

impl TransitionBasis {
    pub fn new(role: Role, u: Matrix, v: Matrix, provenance: Provenance) -> Result<Self> {
        if !u.is_square() || !v.is_square() {
            return Err(Error::shape("TransitionBasis", u.shape(), v.shape()));
        }
        if !is_orthogonal(&u, ORTHO_TOL)? {
            return Err(Error::Corruption("u is not orthogonal".into()));
        }
        if !is_orthogonal(&v, ORTHO_TOL)? {
            return Err(Error::Corruption("v is not orthogonal".into()));
        }
        Ok(TransitionBasis::assemble(role, u, v, provenance))
    }

    fn assemble(role: Role, u: Matrix, v: Matrix, provenance: Provenance) -> Self {
        let (u_t, v_t) = (u.transpose(), v.transpose());
        TransitionBasis {
            role,
            u,
            v,
            u_t,
            v_t,
            provenance,
        }
    }

    pub fn identity(role: Role, d_in: usize, d_out: usize) -> Self {
        TransitionBasis::assemble(
            role,
            Matrix::identity(d_in),
            Matrix::identity(d_out),
            Provenance::default(),
        )
    }

    /// Skips the orthogonality check. Only for negative tests that need a
    /// deliberately broken basis.
    #[doc(hidden)]
    pub fn new_unchecked(role: Role, u: Matrix, v: Matrix) -> Self {
        TransitionBasis::assemble(role, u, v, Provenance::default())
    }

    pub fn u(&self) -> &Matrix {
        &self.u
    }

    pub fn v(&self) -> &Matrix {
        &self.v
    }

    /// `uᵀ`, kept alongside `u` so per-step products skip the transpose.
    pub fn u_t(&self) -> &Matrix {
        &self.u_t
    }

    pub fn v_t(&self) -> &Matrix {
        &self.v_t
    }

    /// In-memory size of the four stored matrices.
    pub fn stored_bytes(&self) -> usize {
        2 * 8 * (self.u.rows() * self.u.cols() + self.v.rows() * self.v.cols())
    }

    pub fn d_in(&self) -> usize {
        self.u.rows()
    }

    pub fn d_out(&self) -> usize {
        self.v.rows()
    }

    /// `u · g · vᵀ`
    pub fn transform(&self, g: &Matrix) -> Result<Matrix> {
        self.u.matmul(g)?.matmul(&self.v_t)
    }

    /// `uᵀ · g · v`
    pub fn inverse_transform(&self, g: &Matrix) -> Result<Matrix> {
        self.u_t.matmul(g)?.matmul(&self.v)
    }

    /// CRC-32 stored in the file trailer; layer checkpoints refer to the
    /// basis by this value.
    pub fn checksum(&self) -> u32 {
        let bytes = self.to_bytes();
        u32::from_le_bytes(bytes[bytes.len() - 4..].try_into().expect("4 bytes"))
    }

    /// `SGBA` layout: magic, version u32, role u8, d_in u32, d_out u32,
    /// `u` (d_in² f64 LE, row-major), `v` (d_out²), n_steps u32,
    /// n_blocks u32, seed u64, CRC-32 of everything before it.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer::new(MAGIC, VERSION);
        w.u8(self.role.tag());
        w.u32(self.d_in() as u32);
        w.u32(self.d_out() as u32);
        w.f64s(self.u.data());
        w.f64s(self.v.data());
        w.u32(self.provenance.n_steps);
        w.u32(self.provenance.n_blocks);
        w.u64(self.provenance.seed);
        w.finish()
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::open(bytes, MAGIC, VERSION, "basis file")?;
        let tag = r.u8()?;
        let role = Role::from_tag(tag)
            .ok_or_else(|| Error::Format(format!("basis file: unknown role tag {tag}")))?;
        let d_in = r.u32()? as usize;
        let d_out = r.u32()? as usize;
        if d_in == 0 || d_out == 0 {
            return Err(Error::Format("basis file: zero dimension".into()));
        }
        let need = d_in
            .checked_mul(d_in)
            .and_then(|a| d_out.checked_mul(d_out).and_then(|b| a.checked_add(b)))
            .and_then(|n| n.checked_mul(8))
            .and_then(|n| n.checked_add(16))
            .ok_or_else(|| Error::Format("basis file: dimension overflow".into()))?;
        if need != r.remaining() {
            return Err(Error::Format(format!(
                "basis file: {}x{} basis needs {need} payload bytes, found {}",
                d_in,
                d_out,
                r.remaining()
            )));
        }
        let u = Matrix::new(d_in, d_in, r.f64s(d_in * d_in)?)?;
        let v = Matrix::new(d_out, d_out, r.f64s(d_out * d_out)?)?;
        let provenance = Provenance {
            n_steps: r.u32()?,
            n_blocks: r.u32()?,
            seed: r.u64()?,
            created_unix: None,
        };
        r.finish()?;
        TransitionBasis::new(role, u, v, provenance)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        TransitionBasis::from_bytes(&bytes)
    }
}
