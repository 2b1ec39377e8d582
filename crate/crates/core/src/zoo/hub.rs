//! External bundle adapter: a hub client that downloads and caches serialized
//! linear encoders behind the [`Encoder`] contract.
//!
//! The archive format is a JSON manifest plus a flat little-endian f64 weight
//! blob whose SHA-256 digest is pinned in the manifest. Sources can be a local
//! directory (a mounted or pre-synced hub) or an HTTP base URL.

use ndarray::{Array1, Array2, ArrayView1};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::collections::HashMap;
use std::io::Read;
use std::path::{Path, PathBuf};
use std::sync::{Mutex, OnceLock};

use crate::error::{Error, Result};
use crate::tensor::Image;
use crate::zoo::{check_input_shape, Encoder, LossSpec};

pub const ARCHIVE_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BundleManifest {
    pub schema_version: u32,
    pub model_id: String,
    pub input_shape: [usize; 3],
    pub feature_dim: usize,
    pub embed_dim: usize,
    pub has_text_tower: bool,
    pub class_names: Vec<String>,
    /// SHA-256 hex digest of the weight blob.
    pub weights_digest: String,
}

/// A frozen linear encoder loaded from an archive: features are an affine map
/// of centered pixels, projection a linear map plus L2 normalization.
pub struct LinearBundle {
    id: String,
    manifest: BundleManifest,
    /// feature_dim × (C·H·W)
    feature_matrix: Array2<f64>,
    feature_bias: Array1<f64>,
    /// embed_dim × feature_dim
    projector: Array2<f64>,
    /// K × embed_dim unit rows, present when the bundle has a text tower.
    prototypes: Option<Array2<f64>>,
}

fn sha256_hex(bytes: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(bytes);
    hex_string(&h.finalize())
}

fn hex_string(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

fn f64s_to_bytes(vals: impl Iterator<Item = f64>) -> Vec<u8> {
    let mut out = Vec::new();
    for v in vals {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

fn bytes_to_f64s(bytes: &[u8]) -> Result<Vec<f64>> {
    if bytes.len() % 8 != 0 {
        return Err(Error::Integrity("weight blob length not a multiple of 8".into()));
    }
    Ok(bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect())
}

impl LinearBundle {
    /// Assemble a bundle from raw parts (used by the archive writer and tests).
    pub fn from_parts(
        manifest: BundleManifest,
        feature_matrix: Array2<f64>,
        feature_bias: Array1<f64>,
        projector: Array2<f64>,
        prototypes: Option<Array2<f64>>,
    ) -> Result<Self> {
        let [c, h, w] = manifest.input_shape;
        if feature_matrix.dim() != (manifest.feature_dim, c * h * w)
            || feature_bias.len() != manifest.feature_dim
            || projector.dim() != (manifest.embed_dim, manifest.feature_dim)
        {
            return Err(Error::Config("bundle parts do not match manifest dims".into()));
        }
        if manifest.has_text_tower {
            match &prototypes {
                Some(p) if p.dim() == (manifest.class_names.len(), manifest.embed_dim) => {}
                _ => return Err(Error::Config("text tower requires a prototype table".into())),
            }
        }
        let digest = &manifest.weights_digest;
        let id = format!("{}@{}", manifest.model_id, &digest[..digest.len().min(12)]);
        Ok(LinearBundle { id, manifest, feature_matrix, feature_bias, projector, prototypes })
    }

    pub fn manifest(&self) -> &BundleManifest {
        &self.manifest
    }

    fn weight_blob(&self) -> Vec<u8> {
        let mut vals: Vec<f64> = Vec::new();
        vals.extend(self.feature_matrix.iter());
        vals.extend(self.feature_bias.iter());
        vals.extend(self.projector.iter());
        if let Some(p) = &self.prototypes {
            vals.extend(p.iter());
        }
        f64s_to_bytes(vals.into_iter())
    }

    /// Write this bundle as a hub archive under `dir/<model_id>/`.
    pub fn publish(&self, hub_dir: &Path) -> Result<()> {
        let dir = hub_dir.join(sanitize_id(&self.manifest.model_id));
        std::fs::create_dir_all(&dir)?;
        let blob = self.weight_blob();
        let mut manifest = self.manifest.clone();
        manifest.weights_digest = sha256_hex(&blob);
        std::fs::write(dir.join("weights.bin"), &blob)?;
        std::fs::write(dir.join("manifest.json"), serde_json::to_vec_pretty(&manifest)?)?;
        Ok(())
    }

    fn from_archive(manifest: BundleManifest, blob: &[u8]) -> Result<Self> {
        let vals = bytes_to_f64s(blob)?;
        let [c, h, w] = manifest.input_shape;
        let npix = c * h * w;
        let fd = manifest.feature_dim;
        let ed = manifest.embed_dim;
        let k = manifest.class_names.len();
        let mut expect = fd * npix + fd + ed * fd;
        if manifest.has_text_tower {
            expect += k * ed;
        }
        if vals.len() != expect {
            return Err(Error::Integrity(format!(
                "weight blob has {} values, expected {expect}",
                vals.len()
            )));
        }
        let mut off = 0;
        let take = |off: &mut usize, n: usize| {
            let s = vals[*off..*off + n].to_vec();
            *off += n;
            s
        };
        let feature_matrix = Array2::from_shape_vec((fd, npix), take(&mut off, fd * npix))
            .map_err(|e| Error::Integrity(e.to_string()))?;
        let feature_bias = Array1::from(take(&mut off, fd));
        let projector = Array2::from_shape_vec((ed, fd), take(&mut off, ed * fd))
            .map_err(|e| Error::Integrity(e.to_string()))?;
        let prototypes = if manifest.has_text_tower {
            Some(
                Array2::from_shape_vec((k, ed), take(&mut off, k * ed))
                    .map_err(|e| Error::Integrity(e.to_string()))?,
            )
        } else {
            None
        };
        LinearBundle::from_parts(manifest, feature_matrix, feature_bias, projector, prototypes)
    }
}

const NORM_FLOOR: f64 = 1e-12;

fn unit(v: ArrayView1<f64>) -> Array1<f64> {
    let n = v.dot(&v).sqrt().max(NORM_FLOOR);
    v.mapv(|x| x / n)
}

impl Encoder for LinearBundle {
    fn id(&self) -> &str {
        &self.id
    }

    fn input_shape(&self) -> (usize, usize, usize) {
        let [c, h, w] = self.manifest.input_shape;
        (c, h, w)
    }

    fn feature_dim(&self) -> usize {
        self.manifest.feature_dim
    }

    fn embed_dim(&self) -> usize {
        self.manifest.embed_dim
    }

    fn has_text_tower(&self) -> bool {
        self.manifest.has_text_tower
    }

    fn differentiable(&self) -> bool {
        true
    }

    fn features(&self, x: &Image) -> Result<Array1<f64>> {
        check_input_shape(self, x)?;
        let flat: Array1<f64> = x.iter().map(|&v| v - 0.5).collect();
        Ok(self.feature_matrix.dot(&flat) + &self.feature_bias)
    }

    fn project(&self, features: ArrayView1<f64>) -> Result<Array1<f64>> {
        if features.len() != self.manifest.feature_dim {
            return Err(Error::Config("feature length mismatch".into()));
        }
        Ok(unit(self.projector.dot(&features).view()))
    }

    fn encode_text(&self, prompt: &str) -> Result<Array1<f64>> {
        let protos = self.prototypes.as_ref().ok_or_else(|| {
            Error::UnsupportedBundle(format!("bundle {} has no text tower", self.id))
        })?;
        let key = prompt
            .strip_prefix("this is a photo of a ")
            .unwrap_or(prompt)
            .replace(' ', "_");
        match self.manifest.class_names.iter().position(|n| *n == key) {
            Some(k) => Ok(unit(protos.row(k))),
            None => Err(Error::NotFound(format!("unknown class '{key}'"))),
        }
    }

    fn value_and_grad(&self, loss: &LossSpec, x: &Image) -> Result<(f64, Image)> {
        check_input_shape(self, x)?;
        let f = self.features(x)?;
        let (value, df, pixel_w) =
            crate::zoo::loss_value_and_feature_grad(loss, &f, &self.projector, x)?;
        let flat = self.feature_matrix.t().dot(&df);
        let mut grad = Image::from_shape_vec(x.dim(), flat.to_vec())
            .map_err(|e| Error::Numeric(e.to_string()))?;
        if pixel_w != 0.0 {
            grad += pixel_w;
        }
        if !value.is_finite() || grad.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric(format!("nonfinite loss/gradient on {}", self.id)));
        }
        Ok((value, grad))
    }
}

/// Where archives are fetched from.
#[derive(Debug, Clone)]
pub enum HubSource {
    LocalDir(PathBuf),
    Http(String),
}

/// Downloads archives and maintains the content-addressed cache at
/// `cache_dir/<model_id>/<digest>/{manifest.json, weights.bin}`.
pub struct HubClient {
    source: HubSource,
    cache_dir: PathBuf,
}

fn sanitize_id(model_id: &str) -> String {
    model_id.replace('/', "__")
}

fn model_locks() -> &'static Mutex<HashMap<String, std::sync::Arc<Mutex<()>>>> {
    static LOCKS: OnceLock<Mutex<HashMap<String, std::sync::Arc<Mutex<()>>>>> = OnceLock::new();
    LOCKS.get_or_init(|| Mutex::new(HashMap::new()))
}

impl HubClient {
    pub fn new(source: HubSource, cache_dir: impl Into<PathBuf>) -> Self {
        HubClient { source, cache_dir: cache_dir.into() }
    }

    /// Source from the `OODATTACK_HUB` environment variable (path or URL).
    pub fn from_env(cache_dir: impl Into<PathBuf>) -> Result<Self> {
        let raw = std::env::var("OODATTACK_HUB")
            .map_err(|_| Error::Config("OODATTACK_HUB is not set".into()))?;
        let source = if raw.starts_with("http://") || raw.starts_with("https://") {
            HubSource::Http(raw)
        } else {
            HubSource::LocalDir(PathBuf::from(raw))
        };
        Ok(HubClient::new(source, cache_dir))
    }

    fn fetch_file(&self, model_id: &str, name: &str) -> Result<Vec<u8>> {
        match &self.source {
            HubSource::LocalDir(dir) => {
                let path = dir.join(sanitize_id(model_id)).join(name);
                if !path.exists() {
                    return Err(Error::NotFound(format!(
                        "hub entry {model_id}/{name} not found under {}",
                        dir.display()
                    )));
                }
                Ok(std::fs::read(path)?)
            }
            HubSource::Http(base) => {
                let url = format!("{}/{}/{name}", base.trim_end_matches('/'), sanitize_id(model_id));
                let resp = ureq::get(&url)
                    .call()
                    .map_err(|e| Error::Network(format!("GET {url}: {e}")))?;
                let mut buf = Vec::new();
                resp.into_reader()
                    .read_to_end(&mut buf)
                    .map_err(|e| Error::Network(format!("read {url}: {e}")))?;
                Ok(buf)
            }
        }
    }

    /// Return the verified local cache directory for `model_id`, downloading
    /// on a cold cache. Corrupt entries are evicted.
    pub fn ensure_cached(&self, model_id: &str) -> Result<PathBuf> {
        let lock = {
            let mut map = model_locks().lock().unwrap();
            map.entry(model_id.to_string()).or_default().clone()
        };
        let _guard = lock.lock().unwrap();

        let model_dir = self.cache_dir.join(sanitize_id(model_id));
        if model_dir.exists() {
            for entry in std::fs::read_dir(&model_dir)? {
                let dir = entry?.path();
                if !dir.is_dir() {
                    continue;
                }
                match verify_cache_entry(&dir) {
                    Ok(()) => return Ok(dir),
                    Err(_) => {
                        // evict corrupt entry
                        let _ = std::fs::remove_dir_all(&dir);
                    }
                }
            }
        }

        let manifest_bytes = self.fetch_file(model_id, "manifest.json")?;
        let manifest: BundleManifest = serde_json::from_slice(&manifest_bytes)?;
        if manifest.schema_version != ARCHIVE_SCHEMA_VERSION {
            return Err(Error::SchemaVersion {
                found: manifest.schema_version,
                expected: ARCHIVE_SCHEMA_VERSION,
            });
        }
        let blob = self.fetch_file(model_id, "weights.bin")?;
        let digest = sha256_hex(&blob);
        if digest != manifest.weights_digest {
            return Err(Error::Integrity(format!(
                "digest mismatch for {model_id}: got {digest}, manifest says {}",
                manifest.weights_digest
            )));
        }
        let dir = model_dir.join(&digest[..16]);
        std::fs::create_dir_all(&dir)?;
        std::fs::write(dir.join("weights.bin"), &blob)?;
        std::fs::write(dir.join("manifest.json"), &manifest_bytes)?;
        Ok(dir)
    }

    pub fn load(&self, model_id: &str) -> Result<LinearBundle> {
        let dir = self.ensure_cached(model_id)?;
        load_bundle_from_dir(&dir)
    }
}

fn verify_cache_entry(dir: &Path) -> Result<()> {
    let manifest: BundleManifest =
        serde_json::from_slice(&std::fs::read(dir.join("manifest.json"))?)?;
    let blob = std::fs::read(dir.join("weights.bin"))?;
    if sha256_hex(&blob) != manifest.weights_digest {
        return Err(Error::Integrity(format!("corrupt cache entry {}", dir.display())));
    }
    Ok(())
}

/// Load a bundle from a verified cache entry directory.
pub fn load_bundle_from_dir(dir: &Path) -> Result<LinearBundle> {
    let manifest: BundleManifest =
        serde_json::from_slice(&std::fs::read(dir.join("manifest.json"))?)?;
    if manifest.schema_version != ARCHIVE_SCHEMA_VERSION {
        return Err(Error::SchemaVersion {
            found: manifest.schema_version,
            expected: ARCHIVE_SCHEMA_VERSION,
        });
    }
    let blob = std::fs::read(dir.join("weights.bin"))?;
    if sha256_hex(&blob) != manifest.weights_digest {
        return Err(Error::Integrity(format!("digest mismatch in {}", dir.display())));
    }
    LinearBundle::from_archive(manifest, &blob)
}

/// Download (or reuse from cache) an external bundle. The hub source is taken
/// from the `OODATTACK_HUB` environment variable.
pub fn load_external_bundle(model_id: &str, cache_dir: &Path) -> Result<LinearBundle> {
    HubClient::from_env(cache_dir)?.load(model_id)
}

/// Build a seeded random linear bundle; used to author hub fixtures and tests.
pub fn random_linear_bundle(
    model_id: &str,
    input_shape: (usize, usize, usize),
    feature_dim: usize,
    embed_dim: usize,
    class_names: Vec<String>,
    seed: u64,
) -> Result<LinearBundle> {
    use rand::Rng;
    let (c, h, w) = input_shape;
    let npix = c * h * w;
    let mut r = crate::rng::stream(&[seed, 0xe27]);
    let scale = 1.0 / (npix as f64).sqrt();
    let feature_matrix =
        Array2::from_shape_fn((feature_dim, npix), |_| r.gen_range(-1.0..1.0) * scale);
    let feature_bias = Array1::from_shape_fn(feature_dim, |_| r.gen_range(-0.01..0.01));
    let pscale = 1.0 / (feature_dim as f64).sqrt();
    let projector =
        Array2::from_shape_fn((embed_dim, feature_dim), |_| r.gen_range(-1.0..1.0) * pscale);
    let has_text = !class_names.is_empty();
    let prototypes = if has_text {
        let mut p = Array2::from_shape_fn((class_names.len(), embed_dim), |_| {
            r.gen_range(-1.0..1.0)
        });
        for mut row in p.rows_mut() {
            let u = unit(row.view());
            row.assign(&u);
        }
        Some(p)
    } else {
        None
    };
    let mut vals: Vec<f64> = Vec::new();
    vals.extend(feature_matrix.iter());
    vals.extend(feature_bias.iter());
    vals.extend(projector.iter());
    if let Some(p) = &prototypes {
        vals.extend(p.iter());
    }
    let digest = sha256_hex(&f64s_to_bytes(vals.into_iter()));
    let manifest = BundleManifest {
        schema_version: ARCHIVE_SCHEMA_VERSION,
        model_id: model_id.to_string(),
        input_shape: [c, h, w],
        feature_dim,
        embed_dim,
        has_text_tower: has_text,
        class_names,
        weights_digest: digest,
    };
    LinearBundle::from_parts(manifest, feature_matrix, feature_bias, projector, prototypes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::zoo::LossTerm;

    fn fixture(seed: u64) -> LinearBundle {
        random_linear_bundle(
            "acme/clip-nano",
            (1, 4, 4),
            6,
            4,
            vec!["cat".into(), "dog".into()],
            seed,
        )
        .unwrap()
    }

    #[test]
    fn publish_then_load_roundtrips() {
        let hub = tempfile::tempdir().unwrap();
        let cache = tempfile::tempdir().unwrap();
        let b = fixture(1);
        b.publish(hub.path()).unwrap();
        let client = HubClient::new(HubSource::LocalDir(hub.path().into()), cache.path());
        let loaded = client.load("acme/clip-nano").unwrap();
        let x = crate::attack::make_distal_seed((1, 4, 4), 7);
        assert_eq!(b.features(&x).unwrap(), loaded.features(&x).unwrap());
        assert_eq!(
            b.encode_text("cat").unwrap(),
            loaded.encode_text("cat").unwrap()
        );
    }

    #[test]
    fn warm_cache_skips_the_source() {
        let hub = tempfile::tempdir().unwrap();
        let cache = tempfile::tempdir().unwrap();
        fixture(1).publish(hub.path()).unwrap();
        let client = HubClient::new(HubSource::LocalDir(hub.path().into()), cache.path());
        let dir1 = client.ensure_cached("acme/clip-nano").unwrap();
        // removing the source must not matter once the cache is warm
        drop(hub);
        let dir2 = client.ensure_cached("acme/clip-nano").unwrap();
        assert_eq!(dir1, dir2);
        assert!(client.load("acme/clip-nano").is_ok());
    }

    #[test]
    fn corrupt_cache_entry_is_evicted_and_refetched() {
        let hub = tempfile::tempdir().unwrap();
        let cache = tempfile::tempdir().unwrap();
        fixture(1).publish(hub.path()).unwrap();
        let client = HubClient::new(HubSource::LocalDir(hub.path().into()), cache.path());
        let dir = client.ensure_cached("acme/clip-nano").unwrap();
        std::fs::write(dir.join("weights.bin"), b"garbage").unwrap();
        let dir2 = client.ensure_cached("acme/clip-nano").unwrap();
        assert!(verify_cache_entry(&dir2).is_ok());
        assert!(client.load("acme/clip-nano").is_ok());
    }

    #[test]
    fn tampered_source_blob_is_rejected() {
        let hub = tempfile::tempdir().unwrap();
        let cache = tempfile::tempdir().unwrap();
        let b = fixture(1);
        b.publish(hub.path()).unwrap();
        let blob_path = hub
            .path()
            .join(sanitize_id("acme/clip-nano"))
            .join("weights.bin");
        let mut blob = std::fs::read(&blob_path).unwrap();
        blob[0] ^= 0xff;
        std::fs::write(&blob_path, &blob).unwrap();
        let client = HubClient::new(HubSource::LocalDir(hub.path().into()), cache.path());
        match client.load("acme/clip-nano") {
            Err(Error::Integrity(_)) => {}
            Err(other) => panic!("expected integrity error, got {other}"),
            Ok(_) => panic!("tampered blob must not load"),
        }
    }

    #[test]
    fn missing_model_reports_not_found() {
        let hub = tempfile::tempdir().unwrap();
        let cache = tempfile::tempdir().unwrap();
        let client = HubClient::new(HubSource::LocalDir(hub.path().into()), cache.path());
        match client.load("nobody/nothing") {
            Err(Error::NotFound(_)) => {}
            Err(other) => panic!("expected not-found error, got {other}"),
            Ok(_) => panic!("missing model must not load"),
        }
    }

    #[test]
    fn linear_bundle_gradient_matches_finite_differences() {
        let b = fixture(3);
        let x = crate::attack::make_distal_seed((1, 4, 4), 5);
        let anchor = b.features(&x).unwrap().mapv(|v| v + 0.2);
        let loss = LossSpec::single(LossTerm::FeatureCosine { anchor });
        let (_, g) = b.value_and_grad(&loss, &x).unwrap();
        let h = 1e-6;
        for idx in [(0usize, 0usize, 0usize), (0, 2, 3), (0, 3, 1)] {
            let mut xp = x.clone();
            xp[idx] += h;
            let mut xm = x.clone();
            xm[idx] -= h;
            let fd = (b.value_and_grad(&loss, &xp).unwrap().0
                - b.value_and_grad(&loss, &xm).unwrap().0)
                / (2.0 * h);
            assert!((g[idx] - fd).abs() < 1e-6, "at {idx:?}: {} vs {fd}", g[idx]);
        }
    }

    #[test]
    fn from_parts_rejects_mismatched_dims() {
        let b = fixture(1);
        let mut manifest = b.manifest().clone();
        manifest.feature_dim += 1;
        assert!(LinearBundle::from_parts(
            manifest,
            Array2::zeros((6, 16)),
            Array1::zeros(6),
            Array2::zeros((4, 6)),
            None,
        )
        .is_err());
    }
}
