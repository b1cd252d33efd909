mod common;

use sparsegrad::autonet::Role;
use sparsegrad::calib::{hosvd_basis, GradientLog, TransitionBasis};
use sparsegrad::harness::{calibrate, BasisSet, RunConfig};
use sparsegrad::numkit::{is_orthogonal, random_orthogonal};
use sparsegrad::Error;

fn small() -> RunConfig {
    RunConfig {
        train_samples: 256,
        valid_samples: 64,
        input_dim: 8,
        d: 8,
        h: 24,
        n_blocks: 2,
        calibration_steps: 6,
        ..RunConfig::default()
    }
}

#[test]
fn planted_structure_concentrates() {
    for (d_in, d_out) in [(16, 48), (48, 16)] {
        let p = common::planted_hosvd(401, d_in, d_out, 6);
        assert!(p.orthogonal);
        assert!(p.mean_transformed > p.mean_original, "{} vs {}", p.mean_transformed, p.mean_original);
    }
}

#[test]
fn calibration_writes_orthogonal_bases() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = RunConfig {
        out: Some(dir.path().to_path_buf()),
        ..small()
    };
    let out = calibrate(&cfg).unwrap();
    let loaded = BasisSet::load_dir(dir.path()).unwrap();
    for role in Role::ALL {
        let b = loaded.get(role);
        assert_eq!(b.checksum(), out.bases.get(role).checksum());
        assert!(is_orthogonal(b.u(), 1e-8).unwrap() && is_orthogonal(b.v(), 1e-8).unwrap());
        assert_eq!(b.provenance.n_steps, 6);
    }
    assert!(dir.path().join("sparsity_report.json").exists());
}

#[test]
fn calibration_is_seeded() {
    let a = calibrate(&small()).unwrap();
    let b = calibrate(&small()).unwrap();
    for role in Role::ALL {
        assert_eq!(a.bases.get(role).to_bytes(), b.bases.get(role).to_bytes());
    }
}

#[test]
fn basis_file_detects_corruption_and_truncation() {
    let b = TransitionBasis::new_unchecked(
        Role::Down,
        random_orthogonal(5, 1).unwrap(),
        random_orthogonal(3, 2).unwrap(),
    );
    let bytes = b.to_bytes();
    assert_eq!(TransitionBasis::from_bytes(&bytes).unwrap(), b);
    let mut flipped = bytes.clone();
    flipped[bytes.len() / 2] ^= 1;
    assert!(matches!(TransitionBasis::from_bytes(&flipped), Err(Error::Checksum { .. })));
    assert!(TransitionBasis::from_bytes(&bytes[..bytes.len() - 3]).is_err());
}

#[test]
fn empty_log_is_rejected() {
    let log = GradientLog::new(Role::Up, 3, 4, 1);
    assert!(hosvd_basis(&log).is_err());
}
