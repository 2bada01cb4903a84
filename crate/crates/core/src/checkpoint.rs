//! Bit-exact binary checkpoints of server and client state.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "FEDH" | version: u32 = 1 | header_length: u64 | header (UTF-8 JSON) | payload
//! ```
//!
//! The JSON manifest carries the state kind, architecture, every scalar
//! field and metric history, and for each model the name, shape, byte offset
//! and length of its tensors. The payload is the tensors' `f32` values in
//! manifest order. The manifest stores a SHA-256 of the payload and a
//! SHA-256 of itself (computed with that field empty), so any corrupted byte
//! is reported instead of loaded.
//!
//! A global checkpoint also stores every client's model and metadata, so
//! loading it restores the complete server roster.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{CheckpointError, Result};
use crate::federation::{ClientState, Model, ServerState};
use crate::gcae::{ArchSpec, ModelState, Tensor};

pub const MAGIC: [u8; 4] = *b"FEDH";
pub const VERSION: u32 = 1;
const PREFIX_LEN: usize = 16;

/// File name of the global checkpoint inside a fold directory.
pub const GLOBAL_FILE: &str = "global.fedh";

/// File name of a client checkpoint inside a fold directory.
pub fn client_file(client_id: usize) -> String {
    format!("client_{client_id}.fedh")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    offset: u64,
    length: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ModelEntry {
    role: String,
    tensors: Vec<TensorEntry>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ClientFields {
    client_id: usize,
    train_indices: Vec<usize>,
    test_indices: Vec<usize>,
    train_slow: bool,
    send_slow: bool,
    train_time_cost: f64,
    send_time_cost: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct GlobalFields {
    selected_clients: Vec<usize>,
    train_slow_clients: Vec<usize>,
    send_slow_clients: Vec<usize>,
    rs_test_acc: Vec<f64>,
    rs_test_auc: Vec<f64>,
    rs_train_loss: Vec<f64>,
    clients: Vec<ClientFields>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
enum StateFields {
    Global(GlobalFields),
    Client(ClientFields),
}

impl StateFields {
    fn kind(&self) -> &'static str {
        match self {
            StateFields::Global(_) => "global",
            StateFields::Client(_) => "client",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Manifest {
    state: StateFields,
    arch: ArchSpec,
    models: Vec<ModelEntry>,
    payload_length: u64,
    payload_sha256: String,
    manifest_sha256: String,
}

fn hex_digest(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

impl Manifest {
    fn self_digest(&self) -> std::result::Result<String, CheckpointError> {
        let mut blank = self.clone();
        blank.manifest_sha256.clear();
        Ok(hex_digest(&serde_json::to_vec(&blank)?))
    }
}

fn client_fields(c: &ClientState) -> ClientFields {
    ClientFields {
        client_id: c.client_id,
        train_indices: c.train_indices.clone(),
        test_indices: c.test_indices.clone(),
        train_slow: c.train_slow,
        send_slow: c.send_slow,
        train_time_cost: c.train_time_cost,
        send_time_cost: c.send_time_cost,
    }
}

fn check_finite(what: &str, values: &[f64]) -> std::result::Result<(), CheckpointError> {
    if values.iter().any(|v| !v.is_finite()) {
        return Err(CheckpointError::NonFinite(what.into()));
    }
    Ok(())
}

fn check_client_finite(c: &ClientFields) -> std::result::Result<(), CheckpointError> {
    check_finite(
        &format!("client {} time costs", c.client_id),
        &[c.train_time_cost, c.send_time_cost],
    )
}

/// Serializes `models` (all sharing one architecture) with `state`.
fn encode(state: StateFields, models: &[(String, &Model)]) -> std::result::Result<Vec<u8>, CheckpointError> {
    let arch = models[0].1.arch.clone();
    let mut payload = Vec::new();
    let mut entries = Vec::with_capacity(models.len());
    for (role, m) in models {
        if m.arch != arch {
            return Err(CheckpointError::Inconsistent(format!(
                "model {role} has a different architecture"
            )));
        }
        let mut tensors = Vec::with_capacity(m.tensors.len());
        for t in &m.tensors {
            if t.values.iter().any(|v| !v.is_finite()) {
                return Err(CheckpointError::NonFinite(format!("{role}/{}", t.name)));
            }
            let offset = payload.len() as u64;
            for v in &t.values {
                payload.extend_from_slice(&v.to_le_bytes());
            }
            tensors.push(TensorEntry {
                name: t.name.clone(),
                shape: t.shape.clone(),
                offset,
                length: payload.len() as u64 - offset,
            });
        }
        entries.push(ModelEntry {
            role: role.clone(),
            tensors,
        });
    }
    let mut manifest = Manifest {
        state,
        arch,
        models: entries,
        payload_length: payload.len() as u64,
        payload_sha256: hex_digest(&payload),
        manifest_sha256: String::new(),
    };
    manifest.manifest_sha256 = manifest.self_digest()?;
    let header = serde_json::to_vec(&manifest)?;
    let mut out = Vec::with_capacity(PREFIX_LEN + header.len() + payload.len());
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(header.len() as u64).to_le_bytes());
    out.extend_from_slice(&header);
    out.extend_from_slice(&payload);
    Ok(out)
}

/// Parses and verifies a whole file, returning the manifest and the models
/// in manifest order.
fn decode(bytes: &[u8]) -> std::result::Result<(Manifest, Vec<(String, Model)>), CheckpointError> {
    if bytes.len() < PREFIX_LEN {
        return Err(CheckpointError::Truncated(format!(
            "{} bytes, shorter than the {PREFIX_LEN}-byte prefix",
            bytes.len()
        )));
    }
    let magic: [u8; 4] = bytes[0..4].try_into().unwrap();
    if magic != MAGIC {
        return Err(CheckpointError::BadMagic(magic));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != VERSION {
        return Err(CheckpointError::VersionMismatch(version));
    }
    let header_len = u64::from_le_bytes(bytes[8..16].try_into().unwrap());
    let body = &bytes[PREFIX_LEN..];
    if header_len > body.len() as u64 {
        return Err(CheckpointError::Truncated(format!(
            "header length {header_len} exceeds the {} remaining bytes",
            body.len()
        )));
    }
    let (header, payload) = body.split_at(header_len as usize);
    let manifest: Manifest = serde_json::from_slice(header)?;
    if manifest.self_digest()? != manifest.manifest_sha256 {
        return Err(CheckpointError::Integrity("manifest digest mismatch".into()));
    }
    if serde_json::to_vec(&manifest)? != header {
        return Err(CheckpointError::Integrity("manifest is not in canonical form".into()));
    }
    if payload.len() as u64 != manifest.payload_length {
        return Err(CheckpointError::Truncated(format!(
            "payload has {} bytes, manifest declares {}",
            payload.len(),
            manifest.payload_length
        )));
    }
    if hex_digest(payload) != manifest.payload_sha256 {
        return Err(CheckpointError::Integrity("payload digest mismatch".into()));
    }
    let template = ModelState::<f32>::zeros(&manifest.arch)
        .map_err(|e| CheckpointError::Inconsistent(e.to_string()))?;
    let mut cursor = 0u64;
    let mut models = Vec::with_capacity(manifest.models.len());
    for entry in &manifest.models {
        if entry.tensors.len() != template.tensors.len() {
            return Err(CheckpointError::Inconsistent(format!(
                "model {} has {} tensors, architecture needs {}",
                entry.role,
                entry.tensors.len(),
                template.tensors.len()
            )));
        }
        let mut tensors = Vec::with_capacity(entry.tensors.len());
        for (te, expected) in entry.tensors.iter().zip(&template.tensors) {
            let count: usize = te.shape.iter().product();
            if te.name != expected.name || te.shape != expected.shape {
                return Err(CheckpointError::Inconsistent(format!(
                    "tensor {} {:?} does not match architecture ({} {:?})",
                    te.name, te.shape, expected.name, expected.shape
                )));
            }
            if te.offset != cursor || te.length != 4 * count as u64 {
                return Err(CheckpointError::Inconsistent(format!(
                    "tensor {} has offset {} and length {}, expected {cursor} and {}",
                    te.name,
                    te.offset,
                    te.length,
                    4 * count
                )));
            }
            let start = te.offset as usize;
            let end = start + te.length as usize;
            if end > payload.len() {
                return Err(CheckpointError::Truncated(format!("tensor {} runs past the payload", te.name)));
            }
            let values: Vec<f32> = payload[start..end]
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect();
            if values.iter().any(|v| !v.is_finite()) {
                return Err(CheckpointError::Integrity(format!("tensor {} holds non-finite values", te.name)));
            }
            cursor = end as u64;
            tensors.push(Tensor {
                name: te.name.clone(),
                shape: te.shape.clone(),
                values,
            });
        }
        models.push((
            entry.role.clone(),
            ModelState {
                arch: manifest.arch.clone(),
                tensors,
            },
        ));
    }
    if cursor != manifest.payload_length {
        return Err(CheckpointError::Inconsistent(format!(
            "tensors cover {cursor} of {} payload bytes",
            manifest.payload_length
        )));
    }
    Ok((manifest, models))
}

fn client_role(id: usize) -> String {
    format!("client:{id}")
}

fn restore_client(fields: ClientFields, model: Model) -> ClientState {
    ClientState {
        client_id: fields.client_id,
        model,
        train_indices: fields.train_indices,
        test_indices: fields.test_indices,
        train_slow: fields.train_slow,
        send_slow: fields.send_slow,
        train_time_cost: fields.train_time_cost,
        send_time_cost: fields.send_time_cost,
    }
}

fn wrong_kind(expected: &str, found: &StateFields) -> CheckpointError {
    CheckpointError::WrongKind {
        expected: expected.into(),
        found: found.kind().into(),
    }
}

/// Serialized bytes of a server checkpoint.
pub fn encode_global(server: &ServerState) -> Result<Vec<u8>> {
    let clients: Vec<ClientFields> = server.clients.iter().map(client_fields).collect();
    for c in &clients {
        check_client_finite(c)?;
    }
    check_finite("rs_test_acc", &server.rs_test_acc)?;
    check_finite("rs_test_auc", &server.rs_test_auc)?;
    check_finite("rs_train_loss", &server.rs_train_loss)?;
    let state = StateFields::Global(GlobalFields {
        selected_clients: server.selected_clients.clone(),
        train_slow_clients: server.train_slow_clients.clone(),
        send_slow_clients: server.send_slow_clients.clone(),
        rs_test_acc: server.rs_test_acc.clone(),
        rs_test_auc: server.rs_test_auc.clone(),
        rs_train_loss: server.rs_train_loss.clone(),
        clients,
    });
    let mut models = vec![("global".to_string(), &server.global_model)];
    models.extend(server.clients.iter().map(|c| (client_role(c.client_id), &c.model)));
    Ok(encode(state, &models)?)
}

/// Parses bytes produced by [`encode_global`].
pub fn decode_global(bytes: &[u8]) -> Result<ServerState> {
    let (manifest, models) = decode(bytes)?;
    let StateFields::Global(g) = manifest.state else {
        return Err(wrong_kind("global", &manifest.state).into());
    };
    if models.len() != g.clients.len() + 1 {
        return Err(CheckpointError::Inconsistent(format!(
            "{} models for {} clients plus the global model",
            models.len(),
            g.clients.len()
        ))
        .into());
    }
    let mut models = models.into_iter();
    let (role, global_model) = models.next().unwrap();
    if role != "global" {
        return Err(CheckpointError::Inconsistent(format!("first model is {role}, expected global")).into());
    }
    let mut clients = Vec::with_capacity(g.clients.len());
    for (fields, (role, model)) in g.clients.into_iter().zip(models) {
        if role != client_role(fields.client_id) {
            return Err(CheckpointError::Inconsistent(format!(
                "model {role} stored for client {}",
                fields.client_id
            ))
            .into());
        }
        clients.push(restore_client(fields, model));
    }
    let server = ServerState {
        global_model,
        clients,
        selected_clients: g.selected_clients,
        train_slow_clients: g.train_slow_clients,
        send_slow_clients: g.send_slow_clients,
        rs_test_acc: g.rs_test_acc,
        rs_test_auc: g.rs_test_auc,
        rs_train_loss: g.rs_train_loss,
    };
    server
        .validate()
        .map_err(|e| CheckpointError::Inconsistent(e.to_string()))?;
    Ok(server)
}

/// Serialized bytes of a client checkpoint.
pub fn encode_client(client: &ClientState) -> Result<Vec<u8>> {
    let fields = client_fields(client);
    check_client_finite(&fields)?;
    Ok(encode(
        StateFields::Client(fields),
        &[(client_role(client.client_id), &client.model)],
    )?)
}

/// Parses bytes produced by [`encode_client`].
pub fn decode_client(bytes: &[u8]) -> Result<ClientState> {
    let (manifest, mut models) = decode(bytes)?;
    let StateFields::Client(fields) = manifest.state else {
        return Err(wrong_kind("client", &manifest.state).into());
    };
    if models.len() != 1 || models[0].0 != client_role(fields.client_id) {
        return Err(CheckpointError::Inconsistent("client checkpoint must hold exactly its own model".into()).into());
    }
    let (_, model) = models.pop().unwrap();
    let client = restore_client(fields, model);
    client
        .validate(&manifest.arch)
        .map_err(|e| CheckpointError::Inconsistent(e.to_string()))?;
    Ok(client)
}

fn io_err(path: &Path, source: std::io::Error) -> CheckpointError {
    CheckpointError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Writes `bytes` to a sibling temp file, syncs it, then renames it over
/// `path`, so readers never observe a partial file.
fn write_atomic(path: &Path, bytes: &[u8]) -> std::result::Result<(), CheckpointError> {
    let file_name = path
        .file_name()
        .ok_or_else(|| io_err(path, std::io::Error::other("path has no file name")))?;
    let mut tmp_name = std::ffi::OsString::from(".");
    tmp_name.push(file_name);
    tmp_name.push(".tmp");
    let tmp: PathBuf = path.with_file_name(tmp_name);
    let mut f = fs::File::create(&tmp).map_err(|e| io_err(&tmp, e))?;
    f.write_all(bytes).map_err(|e| io_err(&tmp, e))?;
    f.sync_all().map_err(|e| io_err(&tmp, e))?;
    drop(f);
    fs::rename(&tmp, path).map_err(|e| io_err(path, e))
}

fn read(path: &Path) -> std::result::Result<Vec<u8>, CheckpointError> {
    fs::read(path).map_err(|e| io_err(path, e))
}

pub fn save_global(server: &ServerState, path: impl AsRef<Path>) -> Result<()> {
    let bytes = encode_global(server)?;
    Ok(write_atomic(path.as_ref(), &bytes)?)
}

pub fn load_global(path: impl AsRef<Path>) -> Result<ServerState> {
    let path = path.as_ref();
    decode_global(&read(path)?).map_err(|e| e.context(format!("loading {}", path.display())))
}

pub fn save_client(client: &ClientState, path: impl AsRef<Path>) -> Result<()> {
    let bytes = encode_client(client)?;
    Ok(write_atomic(path.as_ref(), &bytes)?)
}

pub fn load_client(path: impl AsRef<Path>) -> Result<ClientState> {
    let path = path.as_ref();
    decode_client(&read(path)?).map_err(|e| e.context(format!("loading {}", path.display())))
}
