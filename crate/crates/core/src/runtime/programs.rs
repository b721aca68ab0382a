//! Program registry: built-in inferlets by name, uploaded bytecode by
//! content hash, plus the compiled-program cache.

use std::collections::{BTreeMap, BTreeSet};
use std::future::Future;
use std::pin::Pin;
use std::rc::Rc;
use std::sync::Arc;

use sha2::{Digest, Sha256};

use super::Host;
use crate::error::InferletError;

pub type InferletFuture = Pin<Box<dyn Future<Output = Result<String, InferletError>>>>;

/// Entry point of a built-in inferlet.
pub type BuiltinFn = Rc<dyn Fn(Host) -> InferletFuture>;

#[derive(Clone)]
pub enum ProgramBody {
    Builtin(BuiltinFn),
    Bytecode(Arc<Vec<u8>>),
}

#[derive(Clone)]
pub struct Program {
    pub hash: String,
    pub name: String,
    pub body: ProgramBody,
}

/// Lowercase hex SHA-256.
pub fn program_hash(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

#[derive(Default)]
pub struct ProgramRegistry {
    programs: BTreeMap<String, Program>,
    names: BTreeMap<String, String>,
    loaded: BTreeSet<String>,
}

impl ProgramRegistry {
    pub fn register_builtin(&mut self, name: &str, f: BuiltinFn) -> String {
        let hash = program_hash(name.as_bytes());
        self.names.insert(name.to_string(), hash.clone());
        self.programs.insert(hash.clone(), Program { hash: hash.clone(), name: name.to_string(), body: ProgramBody::Builtin(f) });
        hash
    }

    /// Stores bytecode under its hash. Returns the hash and whether the
    /// bytes were already present.
    pub fn upload(&mut self, bytes: &[u8]) -> (String, bool) {
        let hash = program_hash(bytes);
        let existed = self.programs.contains_key(&hash);
        if !existed {
            self.programs.insert(
                hash.clone(),
                Program { hash: hash.clone(), name: "bytecode".into(), body: ProgramBody::Bytecode(Arc::new(bytes.to_vec())) },
            );
        }
        (hash, existed)
    }

    /// Looks a program up by built-in name or by content hash.
    pub fn resolve(&self, reference: &str) -> Option<&Program> {
        let hash = self.names.get(reference).map(String::as_str).unwrap_or(reference);
        self.programs.get(hash)
    }

    pub fn builtin_names(&self) -> Vec<String> {
        self.names.keys().cloned().collect()
    }

    /// Marks a program as loaded; returns whether it already was.
    pub fn mark_loaded(&mut self, hash: &str) -> bool {
        !self.loaded.insert(hash.to_string())
    }

    pub fn is_loaded(&self, hash: &str) -> bool {
        self.loaded.contains(hash)
    }
}
