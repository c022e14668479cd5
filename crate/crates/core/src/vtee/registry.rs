use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::sync::{Arc, OnceLock};

use thiserror::Error;

use super::{ext, gp, libc, ApiCall, TeeState};
use crate::emucore::{GuestState, HookFault};
use crate::outcome::CrashClass;

pub type Handler = Arc<dyn Fn(&mut ApiCall) -> Result<(), HookFault> + Send + Sync>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ApiCategory {
    Gp,
    Libc,
    TeeSpecific,
}

impl fmt::Display for ApiCategory {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ApiCategory::Gp => "GP",
            ApiCategory::Libc => "LIBC",
            ApiCategory::TeeSpecific => "TEE_SPECIFIC",
        })
    }
}

/// What happens when a TA calls an API without a handler.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum MissingApiPolicy {
    /// End the run with `Crash(MissingApi(name))`.
    #[default]
    Crash,
    /// Return 0 to the caller and keep going.
    ReturnZero,
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum RegistryError {
    #[error("`{0}` already has a handler")]
    DuplicateRegistration(String),
}

#[derive(Clone)]
pub struct ApiEntry {
    pub category: ApiCategory,
    pub handler: Option<Handler>,
}

impl ApiEntry {
    pub fn implemented(&self) -> bool {
        self.handler.is_some()
    }
}

impl fmt::Debug for ApiEntry {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("ApiEntry")
            .field("category", &self.category)
            .field("implemented", &self.implemented())
            .finish()
    }
}

fn parse_list(text: &str) -> BTreeSet<String> {
    text.lines()
        .map(|l| l.split('#').next().unwrap_or("").trim())
        .filter(|l| !l.is_empty())
        .map(str::to_string)
        .collect()
}

/// GP Internal Core API function names shipped in `data/gp_apis.txt`.
pub fn gp_api_names() -> &'static BTreeSet<String> {
    static NAMES: OnceLock<BTreeSet<String>> = OnceLock::new();
    NAMES.get_or_init(|| parse_list(include_str!("../../data/gp_apis.txt")))
}

/// C library function names shipped in `data/libc_apis.txt`.
pub fn libc_api_names() -> &'static BTreeSet<String> {
    static NAMES: OnceLock<BTreeSet<String>> = OnceLock::new();
    NAMES.get_or_init(|| parse_list(include_str!("../../data/libc_apis.txt")))
}

/// GP first, then libc, everything else is TEE-specific.
pub fn classify(name: &str) -> ApiCategory {
    if gp_api_names().contains(name) {
        ApiCategory::Gp
    } else if libc_api_names().contains(name) {
        ApiCategory::Libc
    } else {
        ApiCategory::TeeSpecific
    }
}

#[derive(Debug, Clone)]
pub struct ApiRegistry {
    entries: BTreeMap<String, ApiEntry>,
    pub policy: MissingApiPolicy,
}

impl Default for ApiRegistry {
    fn default() -> Self {
        ApiRegistry::new()
    }
}

impl ApiRegistry {
    /// GP and libc names with the built-in handlers. No TEE-specific API
    /// is implemented.
    pub fn new() -> Self {
        let mut entries = BTreeMap::new();
        for n in gp_api_names() {
            entries.insert(
                n.clone(),
                ApiEntry {
                    category: ApiCategory::Gp,
                    handler: None,
                },
            );
        }
        for n in libc_api_names() {
            entries.insert(
                n.clone(),
                ApiEntry {
                    category: ApiCategory::Libc,
                    handler: None,
                },
            );
        }
        let mut reg = ApiRegistry {
            entries,
            policy: MissingApiPolicy::Crash,
        };
        for (name, h) in gp::handlers().into_iter().chain(libc::handlers()) {
            reg.set_handler(name, h);
        }
        reg
    }

    /// [`ApiRegistry::new`] plus the shipped TEE-specific handlers.
    pub fn with_extensions() -> Self {
        let mut reg = Self::new();
        for (name, h) in ext::handlers() {
            reg.register_tee_specific(name, h)
                .expect("extension names are unique");
        }
        reg
    }

    fn set_handler(&mut self, name: &str, handler: Handler) {
        let category = classify(name);
        self.entries.insert(
            name.to_string(),
            ApiEntry {
                category,
                handler: Some(handler),
            },
        );
    }

    /// Makes sure `name` has an entry, creating an unimplemented
    /// TEE-specific one when it is unknown.
    pub fn ensure(&mut self, name: &str) -> &ApiEntry {
        self.entries
            .entry(name.to_string())
            .or_insert_with(|| ApiEntry {
                category: classify(name),
                handler: None,
            })
    }

    pub fn register_tee_specific(&mut self, name: &str, handler: Handler) -> Result<(), RegistryError> {
        if self.entries.get(name).is_some_and(ApiEntry::implemented) {
            return Err(RegistryError::DuplicateRegistration(name.to_string()));
        }
        self.set_handler(name, handler);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&ApiEntry> {
        self.entries.get(name)
    }

    pub fn is_implemented(&self, name: &str) -> bool {
        self.entries.get(name).is_some_and(ApiEntry::implemented)
    }

    /// `(name, category, implemented)` for every known API.
    pub fn list(&self) -> Vec<(String, ApiCategory, bool)> {
        self.entries
            .iter()
            .map(|(n, e)| (n.clone(), e.category, e.implemented()))
            .collect()
    }

    /// Runs the handler for `name`, or the missing-API default.
    pub fn call(&self, name: &str, tee: &mut TeeState, guest: &mut GuestState) -> Result<(), HookFault> {
        let handler = self.entries.get(name).and_then(|e| e.handler.clone());
        match handler {
            Some(h) => h(&mut ApiCall {
                tee,
                guest,
                api: name,
            }),
            None => self.missing(name, guest),
        }
    }

    fn missing(&self, name: &str, guest: &mut GuestState) -> Result<(), HookFault> {
        match self.policy {
            MissingApiPolicy::Crash => Err(HookFault::new(
                CrashClass::MissingApi(name.to_string()),
                guest.pc(),
            )),
            MissingApiPolicy::ReturnZero => {
                log::debug!("stubbing unimplemented {name}");
                guest.set_return(0);
                Ok(())
            }
        }
    }
}
