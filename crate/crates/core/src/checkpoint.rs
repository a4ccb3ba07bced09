//! Binary checkpoints: magic + version header, architecture descriptor,
//! little-endian f64 parameters, training position, and RNG state.
//!
//! A round trip is bit-exact, so predictions from a restored checkpoint are
//! bitwise identical to pre-save predictions. The stored config hash refuses
//! resumes against a different experiment definition unless forced.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::field::{Activation, FieldArch};
use crate::tensor::Tensor;

const MAGIC: &[u8; 4] = b"MCNF";
const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub arch: FieldArch,
    /// θ_shared (or the single model's parameters).
    pub shared: Tensor,
    /// Per-module parameters of an adapted field, when saved.
    pub modules: Option<Vec<Tensor>>,
    pub outer_step: u64,
    pub rng_seed: u64,
    pub rng_stream: u64,
    pub rng_word_pos: u128,
    pub config_hash: [u8; 32],
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::Checkpoint("truncated checkpoint".to_string()));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn u128(&mut self) -> Result<u128> {
        Ok(u128::from_le_bytes(self.take(16)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f64_vec(&mut self) -> Result<Vec<f64>> {
        let n = self.u64()? as usize;
        let raw = self.take(n * 8)?;
        Ok(raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }
}

fn put_f64_vec(out: &mut Vec<u8>, data: &[f64]) {
    out.extend_from_slice(&(data.len() as u64).to_le_bytes());
    for &v in data {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

fn put_arch(out: &mut Vec<u8>, arch: &FieldArch) {
    out.extend_from_slice(&(arch.n_layers as u32).to_le_bytes());
    out.extend_from_slice(&(arch.hidden as u32).to_le_bytes());
    out.extend_from_slice(&(arch.d_in as u32).to_le_bytes());
    out.extend_from_slice(&(arch.d_out as u32).to_le_bytes());
    match arch.activation {
        Activation::Sine { omega0 } => {
            out.push(0);
            out.extend_from_slice(&omega0.to_le_bytes());
        }
        Activation::Relu => {
            out.push(1);
            out.extend_from_slice(&0f64.to_le_bytes());
        }
    }
    match arch.pos_enc {
        Some(n) => {
            out.push(1);
            out.extend_from_slice(&(n as u32).to_le_bytes());
        }
        None => {
            out.push(0);
            out.extend_from_slice(&0u32.to_le_bytes());
        }
    }
    out.push(arch.bias as u8);
}

fn read_arch(r: &mut Reader) -> Result<FieldArch> {
    let n_layers = r.u32()? as usize;
    let hidden = r.u32()? as usize;
    let d_in = r.u32()? as usize;
    let d_out = r.u32()? as usize;
    let act_tag = r.u8()?;
    let omega0 = r.f64()?;
    let activation = match act_tag {
        0 => Activation::Sine { omega0 },
        1 => Activation::Relu,
        t => return Err(Error::Checkpoint(format!("unknown activation tag {t}"))),
    };
    let pe_flag = r.u8()?;
    let pe = r.u32()? as usize;
    let bias = r.u8()? != 0;
    Ok(FieldArch {
        n_layers,
        hidden,
        d_in,
        d_out,
        activation,
        pos_enc: if pe_flag != 0 { Some(pe) } else { None },
        bias,
    })
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&self.config_hash);
        out.extend_from_slice(&self.outer_step.to_le_bytes());
        out.extend_from_slice(&self.rng_seed.to_le_bytes());
        out.extend_from_slice(&self.rng_stream.to_le_bytes());
        out.extend_from_slice(&self.rng_word_pos.to_le_bytes());
        put_arch(&mut out, &self.arch);
        put_f64_vec(&mut out, self.shared.data());
        match &self.modules {
            None => out.push(0),
            Some(mods) => {
                out.push(1);
                out.extend_from_slice(&(mods.len() as u32).to_le_bytes());
                for m in mods {
                    put_f64_vec(&mut out, m.data());
                }
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Checkpoint> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(Error::Checkpoint("bad magic (not a checkpoint)".to_string()));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported checkpoint version {version}"
            )));
        }
        let mut config_hash = [0u8; 32];
        config_hash.copy_from_slice(r.take(32)?);
        let outer_step = r.u64()?;
        let rng_seed = r.u64()?;
        let rng_stream = r.u64()?;
        let rng_word_pos = r.u128()?;
        let arch = read_arch(&mut r)?;
        let shared = Tensor::vector(r.f64_vec()?);
        if shared.len() != arch.param_count() {
            return Err(Error::Checkpoint(format!(
                "shared parameter count {} does not match arch ({})",
                shared.len(),
                arch.param_count()
            )));
        }
        let modules = match r.u8()? {
            0 => None,
            1 => {
                let count = r.u32()? as usize;
                let mut mods = Vec::with_capacity(count);
                for _ in 0..count {
                    let m = Tensor::vector(r.f64_vec()?);
                    if m.len() != arch.param_count() {
                        return Err(Error::Checkpoint(
                            "module parameter count does not match arch".to_string(),
                        ));
                    }
                    mods.push(m);
                }
                Some(mods)
            }
            t => return Err(Error::Checkpoint(format!("bad modules flag {t}"))),
        };
        Ok(Checkpoint {
            arch,
            shared,
            modules,
            outer_step,
            rng_seed,
            rng_stream,
            rng_word_pos,
            config_hash,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Checkpoint> {
        Checkpoint::from_bytes(&fs::read(path)?)
    }

    /// Refuses a resume when the stored hash disagrees, unless forced.
    pub fn verify_config(&self, expected: &[u8; 32], force: bool) -> Result<()> {
        if &self.config_hash != expected && !force {
            return Err(Error::Checkpoint(
                "config hash mismatch (pass --force to resume anyway)".to_string(),
            ));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::field::FieldModel;
    use crate::rng::Rng;

    fn sample() -> Checkpoint {
        let arch = FieldArch::sine(3, 8, 2, 1);
        let mut rng = Rng::with_stream(9, 4);
        let shared = crate::field::init_params(&arch, &mut rng).unwrap();
        let m1 = shared.scale(1.5);
        Checkpoint {
            arch,
            shared,
            modules: Some(vec![m1.clone(), m1]),
            outer_step: 1234,
            rng_seed: 9,
            rng_stream: 4,
            rng_word_pos: 77,
            config_hash: [3u8; 32],
        }
    }

    #[test]
    fn byte_round_trip_is_exact() {
        let ck = sample();
        let back = Checkpoint::from_bytes(&ck.to_bytes()).unwrap();
        assert_eq!(ck, back);
    }

    #[test]
    fn file_round_trip_preserves_predictions() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let ck = sample();
        ck.save(&path).unwrap();
        let back = Checkpoint::load(&path).unwrap();
        let probe = Tensor::matrix(4, 2, vec![0.1, 0.2, -0.3, 0.4, 0.9, -0.9, 0.0, 0.0]).unwrap();
        let before = FieldModel::new(ck.arch.clone(), ck.shared.clone())
            .unwrap()
            .predict(&probe);
        let after = FieldModel::new(back.arch, back.shared)
            .unwrap()
            .predict(&probe);
        assert_eq!(before.data(), after.data());
    }

    #[test]
    fn corrupt_magic_rejected() {
        let mut bytes = sample().to_bytes();
        bytes[0] = b'X';
        assert!(matches!(
            Checkpoint::from_bytes(&bytes),
            Err(Error::Checkpoint(_))
        ));
    }

    #[test]
    fn config_hash_guard() {
        let ck = sample();
        assert!(ck.verify_config(&[3u8; 32], false).is_ok());
        assert!(ck.verify_config(&[4u8; 32], false).is_err());
        assert!(ck.verify_config(&[4u8; 32], true).is_ok());
    }
}
