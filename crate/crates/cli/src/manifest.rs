//! Text manifests describing a model bundle.
//!
//! ```text
//! bda-manifest v1
//! kind = mha
//! d = 64
//! d_h = 16
//! n_heads = 4
//! precision = p64
//!
//! [tensors]
//! w_q = model.w_q.bdt
//! ...
//! ```
//!
//! Tensor paths are relative to the manifest's directory. BDA manifests also
//! carry `qk_tag`, `vo_tag`, `mean_residual_qk` and `mean_residual_vo`.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use bda_core::{BasisTag, BdaWeights, Geometry, MhaWeights, Precision, Tensor2D};

use crate::format::{load_tensor, save_tensor};
use crate::CliError;

pub const HEADER: &str = "bda-manifest v1";
pub const MHA_ROLES: [&str; 4] = ["w_q", "w_k", "w_v", "w_o"];
pub const BDA_ROLES: [&str; 4] = ["b_qk", "c_qk", "c_vo", "b_vo"];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Kind {
    Mha,
    Bda,
}

impl Kind {
    pub fn name(self) -> &'static str {
        match self {
            Kind::Mha => "mha",
            Kind::Bda => "bda",
        }
    }

    pub fn roles(self) -> [&'static str; 4] {
        match self {
            Kind::Mha => MHA_ROLES,
            Kind::Bda => BDA_ROLES,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Manifest {
    pub kind: Kind,
    pub geometry: Geometry,
    pub precision: Precision,
    /// Keys beyond the required ones.
    pub fields: BTreeMap<String, String>,
    /// Role to path relative to the manifest.
    pub tensors: BTreeMap<String, String>,
}

fn bad(msg: impl Into<String>) -> CliError {
    CliError::Manifest(msg.into())
}

impl Manifest {
    pub fn parse(text: &str) -> Result<Self, CliError> {
        let mut lines = text
            .lines()
            .map(str::trim)
            .enumerate()
            .filter(|(_, l)| !l.is_empty() && !l.starts_with('#'));
        match lines.next() {
            Some((_, HEADER)) => {}
            Some((_, other)) => return Err(bad(format!("expected header '{HEADER}', found '{other}'"))),
            None => return Err(bad("empty manifest")),
        }

        let mut fields = BTreeMap::new();
        let mut tensors = BTreeMap::new();
        let mut in_tensors = false;
        for (no, line) in lines {
            if line == "[tensors]" {
                if in_tensors {
                    return Err(bad(format!("line {}: duplicate [tensors] section", no + 1)));
                }
                in_tensors = true;
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .map(|(k, v)| (k.trim().to_string(), v.trim().to_string()))
                .ok_or_else(|| bad(format!("line {}: expected 'key = value'", no + 1)))?;
            if k.is_empty() || v.is_empty() {
                return Err(bad(format!("line {}: empty key or value", no + 1)));
            }
            let map = if in_tensors { &mut tensors } else { &mut fields };
            if map.insert(k.clone(), v).is_some() {
                return Err(bad(format!("line {}: duplicate key '{k}'", no + 1)));
            }
        }

        let mut take = |key: &str| fields.remove(key).ok_or_else(|| bad(format!("missing key '{key}'")));
        let kind = match take("kind")?.as_str() {
            "mha" => Kind::Mha,
            "bda" => Kind::Bda,
            other => return Err(bad(format!("unknown kind '{other}'"))),
        };
        let count = |s: String, key: &str| {
            s.parse::<usize>()
                .map_err(|_| bad(format!("'{key}' must be a non-negative integer, got '{s}'")))
        };
        let d = count(take("d")?, "d")?;
        let d_h = count(take("d_h")?, "d_h")?;
        let n_heads = count(take("n_heads")?, "n_heads")?;
        let precision = Precision::from_str(&take("precision")?)?;
        let geometry = Geometry::new(d, d_h, n_heads)?;

        let roles = kind.roles();
        for role in roles {
            if !tensors.contains_key(role) {
                return Err(CliError::Role(format!(
                    "{} manifest is missing tensor role '{role}'",
                    kind.name()
                )));
            }
        }
        if let Some(extra) = tensors.keys().find(|k| !roles.contains(&k.as_str())) {
            return Err(CliError::Role(format!(
                "role '{extra}' does not belong in a {} manifest",
                kind.name()
            )));
        }
        Ok(Self {
            kind,
            geometry,
            precision,
            fields,
            tensors,
        })
    }

    pub fn render(&self) -> String {
        let g = self.geometry;
        let mut s = String::new();
        writeln!(s, "{HEADER}").unwrap();
        writeln!(s, "kind = {}", self.kind.name()).unwrap();
        writeln!(s, "d = {}", g.d).unwrap();
        writeln!(s, "d_h = {}", g.d_h).unwrap();
        writeln!(s, "n_heads = {}", g.n_heads).unwrap();
        writeln!(s, "precision = {}", self.precision).unwrap();
        for (k, v) in &self.fields {
            writeln!(s, "{k} = {v}").unwrap();
        }
        writeln!(s, "\n[tensors]").unwrap();
        for role in self.kind.roles() {
            writeln!(s, "{role} = {}", self.tensors[role]).unwrap();
        }
        s
    }

    pub fn read(path: &Path) -> Result<Self, CliError> {
        let text = fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        Self::parse(&text).map_err(|e| match e {
            CliError::Manifest(m) => CliError::Manifest(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    fn field<T: FromStr>(&self, key: &str) -> Result<T, CliError> {
        let v = self
            .fields
            .get(key)
            .ok_or_else(|| bad(format!("missing key '{key}'")))?;
        v.parse()
            .map_err(|_| bad(format!("invalid value '{v}' for '{key}'")))
    }

    fn load_roles(&self, path: &Path) -> Result<Vec<Tensor2D>, CliError> {
        let dir = base_dir(path);
        self.kind
            .roles()
            .iter()
            .map(|role| {
                let t = load_tensor(&dir.join(&self.tensors[*role]))?;
                if t.precision() != self.precision {
                    return Err(bad(format!(
                        "tensor '{role}' is {}, manifest declares {}",
                        t.precision(),
                        self.precision
                    )));
                }
                Ok(t)
            })
            .collect()
    }
}

fn base_dir(path: &Path) -> PathBuf {
    path.parent().map(Path::to_path_buf).unwrap_or_default()
}

fn stem(path: &Path) -> String {
    path.file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "model".into())
}

fn write_bundle(
    path: &Path,
    kind: Kind,
    geometry: Geometry,
    precision: Precision,
    fields: BTreeMap<String, String>,
    tensors: [&Tensor2D; 4],
) -> Result<Manifest, CliError> {
    let dir = base_dir(path);
    if !dir.as_os_str().is_empty() {
        fs::create_dir_all(&dir).map_err(|e| CliError::io(&dir, e))?;
    }
    let stem = stem(path);
    let mut files = BTreeMap::new();
    for (role, t) in kind.roles().iter().zip(tensors) {
        let name = format!("{stem}.{role}.bdt");
        save_tensor(&dir.join(&name), t)?;
        files.insert(role.to_string(), name);
    }
    let m = Manifest {
        kind,
        geometry,
        precision,
        fields,
        tensors: files,
    };
    fs::write(path, m.render()).map_err(|e| CliError::io(path, e))?;
    Ok(m)
}

pub fn save_mha(path: &Path, w: &MhaWeights) -> Result<Manifest, CliError> {
    write_bundle(
        path,
        Kind::Mha,
        w.geometry,
        w.precision(),
        BTreeMap::new(),
        [&w.w_q, &w.w_k, &w.w_v, &w.w_o],
    )
}

pub fn save_bda(path: &Path, w: &BdaWeights) -> Result<Manifest, CliError> {
    let fields = BTreeMap::from([
        ("qk_tag".to_string(), w.qk_tag.to_string()),
        ("vo_tag".to_string(), w.vo_tag.to_string()),
        ("mean_residual_qk".to_string(), format!("{:e}", w.mean_residual_qk)),
        ("mean_residual_vo".to_string(), format!("{:e}", w.mean_residual_vo)),
    ]);
    write_bundle(
        path,
        Kind::Bda,
        w.geometry,
        w.precision(),
        fields,
        [&w.b_qk, &w.c_qk, &w.c_vo, &w.b_vo],
    )
}

pub fn load_mha(path: &Path) -> Result<MhaWeights, CliError> {
    let m = Manifest::read(path)?;
    if m.kind != Kind::Mha {
        return Err(CliError::Role(format!(
            "{} holds {} tensors, expected mha roles {MHA_ROLES:?}",
            path.display(),
            m.kind.name()
        )));
    }
    let [w_q, w_k, w_v, w_o]: [Tensor2D; 4] = m.load_roles(path)?.try_into().unwrap();
    Ok(MhaWeights::new(m.geometry, w_q, w_k, w_v, w_o)?)
}

pub fn load_bda(path: &Path) -> Result<BdaWeights, CliError> {
    let m = Manifest::read(path)?;
    if m.kind != Kind::Bda {
        return Err(CliError::Role(format!(
            "{} holds {} tensors, expected bda roles {BDA_ROLES:?}",
            path.display(),
            m.kind.name()
        )));
    }
    let qk_tag: BasisTag = m.field("qk_tag")?;
    let vo_tag: BasisTag = m.field("vo_tag")?;
    let [b_qk, c_qk, c_vo, b_vo]: [Tensor2D; 4] = m.load_roles(path)?.try_into().unwrap();
    let mut w = BdaWeights::new(m.geometry, b_qk, c_qk, c_vo, b_vo, qk_tag, vo_tag)?;
    w.mean_residual_qk = m.field("mean_residual_qk").unwrap_or(f64::NAN);
    w.mean_residual_vo = m.field("mean_residual_vo").unwrap_or(f64::NAN);
    Ok(w)
}

#[cfg(test)]
mod tests {
    use super::*;
    use bda_core::verify::gen_random_mha;
    use bda_core::{bda_prepare, Rng};

    const SAMPLE: &str = "\
bda-manifest v1
# comment
kind = mha
d = 8
d_h = 2
n_heads = 2
precision = p32

[tensors]
w_q = a.bdt
w_k = b.bdt
w_v = c.bdt
w_o = d.bdt
";

    #[test]
    fn parse_and_render_round_trip() {
        let m = Manifest::parse(SAMPLE).unwrap();
        assert_eq!(m.kind, Kind::Mha);
        assert_eq!(m.geometry, Geometry::new(8, 2, 2).unwrap());
        assert_eq!(m.precision, Precision::P32);
        assert_eq!(m.tensors["w_o"], "d.bdt");
        assert_eq!(Manifest::parse(&m.render()).unwrap(), m);
    }

    #[test]
    fn parse_errors() {
        assert!(matches!(Manifest::parse(""), Err(CliError::Manifest(_))));
        let no_header = SAMPLE.replace("bda-manifest v1", "bda-manifest v2");
        assert!(matches!(Manifest::parse(&no_header), Err(CliError::Manifest(_))));
        let missing = SAMPLE.replace("d_h = 2\n", "");
        assert!(matches!(Manifest::parse(&missing), Err(CliError::Manifest(_))));
        let dup = SAMPLE.replace("d = 8\n", "d = 8\nd = 9\n");
        assert!(matches!(Manifest::parse(&dup), Err(CliError::Manifest(_))));
        let bad_geo = SAMPLE.replace("d_h = 2", "d_h = 8");
        assert!(matches!(Manifest::parse(&bad_geo), Err(CliError::Core(_))));
        let bad_role = SAMPLE.replace("w_o = d.bdt", "b_vo = d.bdt");
        assert!(matches!(Manifest::parse(&bad_role), Err(CliError::Role(_))));
        let junk = SAMPLE.replace("d = 8", "d 8");
        assert!(matches!(Manifest::parse(&junk), Err(CliError::Manifest(_))));
    }

    #[test]
    fn bundle_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let w = gen_random_mha(&mut Rng::new(3), 16, 4, 2, Precision::P64).unwrap();
        let path = dir.path().join("m.manifest");
        save_mha(&path, &w).unwrap();
        let back = load_mha(&path).unwrap();
        assert!(back.w_q.bit_eq(&w.w_q) && back.w_o.bit_eq(&w.w_o));

        let bda = bda_prepare(&w).unwrap();
        let bpath = dir.path().join("sub/p.manifest");
        save_bda(&bpath, &bda).unwrap();
        let bb = load_bda(&bpath).unwrap();
        assert!(bb.c_qk.bit_eq(&bda.c_qk));
        assert_eq!((bb.qk_tag, bb.vo_tag), (bda.qk_tag, bda.vo_tag));
        assert_eq!(bb.mean_residual_qk, bda.mean_residual_qk);

        assert!(matches!(load_mha(&bpath), Err(CliError::Role(_))));
        assert!(matches!(load_bda(&path), Err(CliError::Role(_))));
    }

    #[test]
    fn missing_or_mismatched_files() {
        let dir = tempfile::tempdir().unwrap();
        let w = gen_random_mha(&mut Rng::new(3), 16, 4, 2, Precision::P64).unwrap();
        let path = dir.path().join("m.manifest");
        save_mha(&path, &w).unwrap();

        fs::remove_file(dir.path().join("m.w_k.bdt")).unwrap();
        assert!(load_mha(&path).is_err());

        // Swap in a tensor of the wrong shape.
        save_mha(&path, &w).unwrap();
        save_tensor(&dir.path().join("m.w_k.bdt"), &w.w_o.slice_rows(0, 4).unwrap()).unwrap();
        assert!(matches!(load_mha(&path), Err(CliError::Core(_))));

        // And one of the wrong precision.
        save_tensor(&dir.path().join("m.w_k.bdt"), &w.w_k.cast(Precision::P32)).unwrap();
        assert!(matches!(load_mha(&path), Err(CliError::Manifest(_))));
    }
}
