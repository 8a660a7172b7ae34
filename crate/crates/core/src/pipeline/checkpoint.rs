//! `DCKP` checkpoint (little-endian):
//!
//! ```text
//! "DCKP" | u32 version=1
//! metadata: u16 len + model name | u32 epoch | 32-byte config hash | u64 seed
//! u32 n_entries, then per entry: u16 len + name | u8 rank | rank × u32 dims | f32 payload
//! ```

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::models::{Architecture, StudentKind, StudentNet, TeacherNet2D, TrunkConfig};
use crate::tensor::{ParamKind, Tensor};

const MAGIC: &[u8; 4] = b"DCKP";
const VERSION: u32 = 1;
/// Model name of feature dumps, which share the container.
pub const FEATURES_MODEL: &str = "features";

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub model: String,
    pub epoch: u32,
    pub config_hash: [u8; 32],
    pub seed: u64,
    pub entries: Vec<(String, Tensor)>,
}

fn known_model(name: &str) -> bool {
    name == FEATURES_MODEL || name.parse::<Architecture>().is_ok()
}

/// Parameter role implied by the last component of a dotted name.
pub fn kind_from_name(name: &str) -> ParamKind {
    match name.rsplit('.').next().unwrap_or("") {
        "bias" => ParamKind::Bias,
        "gamma" => ParamKind::NormScale,
        "beta" => ParamKind::NormShift,
        "running_mean" => ParamKind::RunningMean,
        "running_var" => ParamKind::RunningVar,
        _ => ParamKind::Weight,
    }
}

struct Cursor<'a> {
    path: &'a Path,
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::Format {
                path: self.path.to_path_buf(),
                offset: self.bytes.len() as u64,
                msg: format!("truncated while reading {what} at byte {}", self.pos),
            });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().unwrap()))
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }

    fn string(&mut self, what: &str) -> Result<String> {
        let start = self.pos as u64;
        let n = self.u16(what)? as usize;
        let raw = self.take(n, what)?;
        String::from_utf8(raw.to_vec()).map_err(|_| self.fail(start, format!("{what} is not UTF-8")))
    }

    fn fail(&self, offset: u64, msg: String) -> Error {
        Error::Format { path: self.path.to_path_buf(), offset, msg }
    }
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut b = Vec::new();
        b.extend_from_slice(MAGIC);
        b.extend_from_slice(&VERSION.to_le_bytes());
        let put_str = |b: &mut Vec<u8>, s: &str| -> Result<()> {
            let n = u16::try_from(s.len()).map_err(|_| Error::invalid("checkpoint", format!("name too long: {s}")))?;
            b.extend_from_slice(&n.to_le_bytes());
            b.extend_from_slice(s.as_bytes());
            Ok(())
        };
        put_str(&mut b, &self.model)?;
        b.extend_from_slice(&self.epoch.to_le_bytes());
        b.extend_from_slice(&self.config_hash);
        b.extend_from_slice(&self.seed.to_le_bytes());
        b.extend_from_slice(&(self.entries.len() as u32).to_le_bytes());
        for (name, t) in &self.entries {
            put_str(&mut b, name)?;
            b.push(t.rank() as u8);
            for &d in t.shape() {
                b.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for v in t.data() {
                b.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(b)
    }

    pub fn from_bytes(path: &Path, bytes: &[u8]) -> Result<Self> {
        let mut c = Cursor { path, bytes, pos: 0 };
        if c.take(4, "magic")? != MAGIC {
            return Err(c.fail(0, "bad magic".into()));
        }
        let version = c.u32("version")?;
        if version != VERSION {
            return Err(c.fail(4, format!("unsupported version {version}")));
        }
        let model_at = c.pos as u64;
        let model = c.string("model name")?;
        if !known_model(&model) {
            return Err(c.fail(model_at, format!("unknown model `{model}`")));
        }
        let epoch = c.u32("epoch")?;
        let config_hash = c.take(32, "config hash")?.try_into().unwrap();
        let seed = c.u64("seed")?;
        let n = c.u32("entry count")?;
        let mut entries = Vec::with_capacity(n as usize);
        for _ in 0..n {
            let at = c.pos as u64;
            let name = c.string("entry name")?;
            let rank = c.u8("rank")? as usize;
            let dims = (0..rank).map(|_| c.u32("dims").map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let count: usize = dims.iter().product();
            if rank == 0 || count == 0 {
                return Err(c.fail(at, format!("entry `{name}` has empty shape {dims:?}")));
            }
            let raw = c.take(count * 4, "payload")?;
            let data = raw.chunks_exact(4).map(|w| f32::from_le_bytes(w.try_into().unwrap())).collect();
            entries.push((name, Tensor::new(dims, data)?));
        }
        if c.pos != bytes.len() {
            return Err(c.fail(c.pos as u64, format!("{} trailing bytes", bytes.len() - c.pos)));
        }
        Ok(Checkpoint { model, epoch, config_hash, seed, entries })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(path, &bytes)
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn from_teacher(net: &TeacherNet2D, epoch: u32, config_hash: [u8; 32], seed: u64) -> Self {
        Checkpoint {
            model: Architecture::Teacher2dTiny.name().to_string(),
            epoch,
            config_hash,
            seed,
            entries: net.params.iter().map(|(n, p)| (n.to_string(), p.value.clone())).collect(),
        }
    }

    pub fn from_student(net: &StudentNet, epoch: u32, config_hash: [u8; 32], seed: u64) -> Self {
        Checkpoint {
            model: net.architecture().name().to_string(),
            epoch,
            config_hash,
            seed,
            entries: net.params.iter().map(|(n, p)| (n.to_string(), p.value.clone())).collect(),
        }
    }

    fn architecture(&self) -> Result<Architecture> {
        self.model.parse().map_err(|_| Error::Config(format!("checkpoint holds `{}`, not a model", self.model)))
    }

    /// Rebuilds a teacher in eval mode; the trunk layout comes from `trunk`.
    pub fn to_teacher(&self, trunk: &TrunkConfig) -> Result<TeacherNet2D> {
        if self.architecture()? != Architecture::Teacher2dTiny {
            return Err(Error::Config(format!("expected a teacher checkpoint, found `{}`", self.model)));
        }
        let classes = self
            .get("head.weight")
            .ok_or_else(|| Error::TopologyMismatch(vec!["head.weight (missing)".into()]))?
            .shape()[0];
        let mut net = TeacherNet2D::new(trunk, classes, &mut ChaCha8Rng::seed_from_u64(0))?;
        let names: Vec<String> = net.params.names().map(str::to_string).collect();
        self.fill(&mut net.params, &names, |_| false)?;
        net.mode = crate::layers::Mode::Eval;
        Ok(net)
    }

    /// Rebuilds a student with every head found in the checkpoint.
    pub fn to_student(&self, trunk: &TrunkConfig) -> Result<StudentNet> {
        let kind = StudentKind::from_architecture(self.architecture()?)?;
        let mut net = StudentNet::new(kind, trunk, &mut ChaCha8Rng::seed_from_u64(0))?;
        let names: Vec<String> = net.params.names().map(str::to_string).collect();
        let mut heads = Vec::new();
        for (name, t) in &self.entries {
            if let Some(rest) = name.strip_prefix("heads.") {
                net.params.insert(name.clone(), t.clone(), kind_from_name(name));
                let id = rest.split('.').next().unwrap_or_default().to_string();
                if !heads.contains(&id) {
                    heads.push(id);
                }
            }
        }
        self.fill(&mut net.params, &names, |n| n.starts_with("heads."))?;
        for id in heads {
            net.attach_existing_head(&id)?;
        }
        Ok(net)
    }

    fn fill(&self, params: &mut crate::ParamStore, expected: &[String], skip: impl Fn(&str) -> bool) -> Result<()> {
        let mut bad: Vec<String> = self
            .entries
            .iter()
            .filter(|(n, _)| !skip(n) && !expected.contains(n))
            .map(|(n, _)| format!("{n} (unexpected)"))
            .collect();
        for name in expected {
            match self.get(name) {
                None => bad.push(format!("{name} (missing)")),
                Some(t) if t.shape() != params.value(name)?.shape() => {
                    bad.push(format!("{name} ({:?} vs {:?})", t.shape(), params.value(name)?.shape()))
                }
                Some(_) => {}
            }
        }
        if !bad.is_empty() {
            return Err(Error::TopologyMismatch(bad));
        }
        for name in expected {
            params.set_value(name, self.get(name).unwrap().clone())?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use tempfile::tempdir;

    fn sample() -> Checkpoint {
        Checkpoint {
            model: "res3d-tiny".into(),
            epoch: 3,
            config_hash: [7; 32],
            seed: 42,
            entries: vec![
                ("a.weight".into(), Tensor::from_fn([2, 3], |i| i as f32 * -0.5)),
                ("b".into(), Tensor::new([1], vec![f32::MIN_POSITIVE]).unwrap()),
            ],
        }
    }

    #[test]
    fn bytes_round_trip() {
        let c = sample();
        let b = c.to_bytes().unwrap();
        let back = Checkpoint::from_bytes(Path::new("x"), &b).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.to_bytes().unwrap(), b);
    }

    #[test]
    fn corrupt_or_unknown_rejected() {
        let b = sample().to_bytes().unwrap();
        let p = Path::new("x");
        assert!(matches!(Checkpoint::from_bytes(p, &b[..b.len() - 1]), Err(Error::Format { .. })));
        let mut bad = b.clone();
        bad[0] = b'X';
        assert!(matches!(Checkpoint::from_bytes(p, &bad), Err(Error::Format { offset: 0, .. })));
        let mut other = sample();
        other.model = "resnet50".into();
        let err = Checkpoint::from_bytes(p, &other.to_bytes().unwrap()).unwrap_err();
        assert!(err.to_string().contains("unknown model"), "{err}");
    }

    #[test]
    fn models_round_trip_bitwise() {
        let dir = tempdir().unwrap();
        let trunk = TrunkConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let t = TeacherNet2D::<f32>::new(&trunk, 5, &mut rng).unwrap();
        let ct = Checkpoint::from_teacher(&t, 1, [0; 32], 9);
        let pt = dir.path().join("t.ckpt");
        ct.save(&pt).unwrap();
        let t2 = Checkpoint::load(&pt).unwrap().to_teacher(&trunk).unwrap();
        for (n, p) in t.params.iter() {
            assert_eq!(t2.params.value(n).unwrap().data(), p.value.data());
        }
        for kind in [StudentKind::Res3d, StudentKind::R2Plus1d] {
            let mut s = StudentNet::<f32>::new(kind, &trunk, &mut rng).unwrap();
            s.add_head("teacher0", 5, &mut rng).unwrap();
            s.add_head("teacher1", 4, &mut rng).unwrap();
            let c = Checkpoint::from_student(&s, 2, [1; 32], 3);
            let p = dir.path().join("s.ckpt");
            c.save(&p).unwrap();
            let back = Checkpoint::load(&p).unwrap();
            let s2 = back.to_student(&trunk).unwrap();
            assert_eq!(s2.heads.keys().collect::<Vec<_>>(), vec!["teacher0", "teacher1"]);
            assert_eq!(Checkpoint::from_student(&s2, 2, [1; 32], 3).to_bytes().unwrap(), std::fs::read(&p).unwrap());
            for (n, p) in s.params.iter() {
                assert_eq!(s2.params.get(n).unwrap().kind, p.kind, "{n}");
            }
        }
    }

    #[test]
    fn wrong_layout_rejected() {
        let trunk = TrunkConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let s = StudentNet::<f32>::new(StudentKind::Res3d, &trunk, &mut rng).unwrap();
        let c = Checkpoint::from_student(&s, 0, [0; 32], 0);
        let wide = TrunkConfig { widths: [8, 12], ..trunk.clone() };
        assert!(matches!(c.to_student(&wide), Err(Error::TopologyMismatch(_))));
        assert!(c.to_teacher(&trunk).is_err());
    }
}
