use std::path::{Path, PathBuf};
use std::sync::Arc;

use crate::autonet::{ModelDims, Role};
use crate::calib::TransitionBasis;
use crate::error::{Error, Result};

/// One transition basis per MLP role, shared by every block.
#[derive(Clone, Debug, PartialEq)]
pub struct BasisSet {
    pub up: Arc<TransitionBasis>,
    pub down: Arc<TransitionBasis>,
}

impl BasisSet {
    pub fn new(up: TransitionBasis, down: TransitionBasis) -> Result<Self> {
        if up.role != Role::Up || down.role != Role::Down {
            return Err(Error::Config(format!(
                "basis roles are {} and {}, expected up and down",
                up.role, down.role
            )));
        }
        if (up.d_in(), up.d_out()) != (down.d_out(), down.d_in()) {
            return Err(Error::Config(format!(
                "up basis is {}x{} but down basis is {}x{}",
                up.d_in(),
                up.d_out(),
                down.d_in(),
                down.d_out()
            )));
        }
        Ok(BasisSet {
            up: Arc::new(up),
            down: Arc::new(down),
        })
    }

    pub fn identity(dims: &ModelDims) -> Self {
        BasisSet {
            up: Arc::new(TransitionBasis::identity(Role::Up, dims.d, dims.h)),
            down: Arc::new(TransitionBasis::identity(Role::Down, dims.h, dims.d)),
        }
    }

    pub fn get(&self, role: Role) -> &Arc<TransitionBasis> {
        match role {
            Role::Up => &self.up,
            Role::Down => &self.down,
        }
    }

    pub fn file_name(role: Role) -> &'static str {
        match role {
            Role::Up => "up.sgba",
            Role::Down => "down.sgba",
        }
    }

    pub fn path(dir: &Path, role: Role) -> PathBuf {
        dir.join(BasisSet::file_name(role))
    }

    pub fn load_dir(dir: &Path) -> Result<Self> {
        let load = |role| {
            let p = BasisSet::path(dir, role);
            if !p.exists() {
                return Err(Error::Config(format!(
                    "basis directory {} has no {}; run `sparsegrad calibrate --out <dir>` first",
                    dir.display(),
                    BasisSet::file_name(role)
                )));
            }
            TransitionBasis::load(&p)
        };
        BasisSet::new(load(Role::Up)?, load(Role::Down)?)
    }

    pub fn save_dir(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        for role in Role::ALL {
            self.get(role).save(&BasisSet::path(dir, role))?;
        }
        Ok(())
    }

    pub fn check_dims(&self, dims: &ModelDims) -> Result<()> {
        if (self.up.d_in(), self.up.d_out()) != (dims.d, dims.h) {
            return Err(Error::Config(format!(
                "bases are for {}x{} layers, model has d = {}, h = {}",
                self.up.d_in(),
                self.up.d_out(),
                dims.d,
                dims.h
            )));
        }
        Ok(())
    }

    /// Bytes held by both bases, each stored with its transposes.
    pub fn stored_bytes(&self) -> usize {
        self.up.stored_bytes() + self.down.stored_bytes()
    }
}
