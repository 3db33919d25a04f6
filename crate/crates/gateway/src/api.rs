//! Request and response bodies of the JSON endpoints.
//!
//! Requests are internally tagged by `endpoint`; every request except
//! `login` carries the hex bearer token returned by login.

use std::collections::BTreeSet;

use dynaswap_core::hierarchy::NodeKind;
use dynaswap_core::recordstore::{ClinicalRecord, ReportDimension};
use dynaswap_core::{NodeId, UserId};
use serde::{Deserialize, Serialize};
use serde_json::Value;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "endpoint", rename_all = "snake_case", deny_unknown_fields)]
pub enum Request {
    Login {
        user: UserId,
        role: NodeId,
        sample: Vec<f64>,
    },
    Logout {
        token: String,
    },
    Whoami {
        token: String,
    },
    Admin {
        token: String,
        op: AdminOp,
    },
    RecordGet {
        token: String,
        record_id: String,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        role_key: Option<PresentedKey>,
    },
    RecordPut {
        token: String,
        record: ClinicalRecord,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        role_key: Option<PresentedKey>,
    },
    Cohort {
        token: String,
        diagnoses: BTreeSet<String>,
    },
    Report {
        token: String,
        cohort_id: String,
        dimension: ReportDimension,
    },
    Export {
        token: String,
        cohort_id: String,
    },
    Provenance {
        token: String,
        record_id: String,
    },
    TransferSend {
        token: String,
        record_id: String,
        receiver: UserId,
    },
    TransferReceive {
        token: String,
    },
    AuditVerify {
        token: String,
    },
}

impl Request {
    pub fn endpoint(&self) -> &'static str {
        match self {
            Request::Login { .. } => "login",
            Request::Logout { .. } => "logout",
            Request::Whoami { .. } => "whoami",
            Request::Admin { .. } => "admin",
            Request::RecordGet { .. } => "record_get",
            Request::RecordPut { .. } => "record_put",
            Request::Cohort { .. } => "cohort",
            Request::Report { .. } => "report",
            Request::Export { .. } => "export",
            Request::Provenance { .. } => "provenance",
            Request::TransferSend { .. } => "transfer_send",
            Request::TransferReceive { .. } => "transfer_receive",
            Request::AuditVerify { .. } => "audit_verify",
        }
    }

    pub fn token(&self) -> Option<&str> {
        match self {
            Request::Login { .. } => None,
            Request::Logout { token }
            | Request::Whoami { token }
            | Request::Admin { token, .. }
            | Request::RecordGet { token, .. }
            | Request::RecordPut { token, .. }
            | Request::Cohort { token, .. }
            | Request::Report { token, .. }
            | Request::Export { token, .. }
            | Request::Provenance { token, .. }
            | Request::TransferSend { token, .. }
            | Request::TransferReceive { token }
            | Request::AuditVerify { token } => Some(token),
        }
    }
}

/// A role key held by the client, presented instead of the server-side unwrap.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PresentedKey {
    pub node: NodeId,
    pub version: u32,
    /// 64 hex digits.
    pub key: String,
}

/// Hierarchy and membership mutations. Reachable through the `admin`
/// endpoint (admin role only) and from the local operator CLI.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case", deny_unknown_fields)]
pub enum AdminOp {
    AddRole {
        id: NodeId,
    },
    AddData {
        id: NodeId,
    },
    AddEdge {
        kind: NodeKind,
        parent: NodeId,
        child: NodeId,
    },
    RemoveEdge {
        kind: NodeKind,
        parent: NodeId,
        child: NodeId,
    },
    RemoveNode {
        id: NodeId,
    },
    Associate {
        role: NodeId,
        data: NodeId,
    },
    Dissociate {
        role: NodeId,
        data: NodeId,
    },
    AddUser {
        user: UserId,
        /// Seed of the simulated biometric source for this person.
        #[serde(default)]
        biometric_seed: Option<u64>,
    },
    Assign {
        user: UserId,
        role: NodeId,
    },
    Revoke {
        user: UserId,
        role: NodeId,
    },
    Enroll {
        user: UserId,
        role: NodeId,
        samples: Vec<Vec<f64>>,
    },
    ReissueRs {
        role: NodeId,
    },
    SetCareScoped {
        role: NodeId,
        scoped: bool,
    },
}

impl AdminOp {
    pub fn name(&self) -> &'static str {
        match self {
            AdminOp::AddRole { .. } => "add_role",
            AdminOp::AddData { .. } => "add_data",
            AdminOp::AddEdge { .. } => "add_edge",
            AdminOp::RemoveEdge { .. } => "remove_edge",
            AdminOp::RemoveNode { .. } => "remove_node",
            AdminOp::Associate { .. } => "associate",
            AdminOp::Dissociate { .. } => "dissociate",
            AdminOp::AddUser { .. } => "add_user",
            AdminOp::Assign { .. } => "assign",
            AdminOp::Revoke { .. } => "revoke",
            AdminOp::Enroll { .. } => "enroll",
            AdminOp::ReissueRs { .. } => "reissue_rs",
            AdminOp::SetCareScoped { .. } => "set_care_scoped",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ErrorKind {
    /// Missing, unknown or expired session token.
    AuthRequired,
    /// Authenticated but not permitted.
    Unauthorized,
    RateLimited,
    /// Tampering or corruption detected.
    Integrity,
    BadRequest,
    NotFound,
    Internal,
}

impl ErrorKind {
    /// CLI exit status for this kind.
    pub fn exit_code(self) -> u8 {
        match self {
            ErrorKind::AuthRequired | ErrorKind::Unauthorized | ErrorKind::RateLimited => 2,
            ErrorKind::Integrity => 3,
            ErrorKind::BadRequest | ErrorKind::NotFound | ErrorKind::Internal => 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ErrorBody {
    pub kind: ErrorKind,
    pub message: String,
    /// Which check produced the error, for example `mac` or `care-scope`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub check: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Response {
    pub ok: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub data: Option<Value>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<ErrorBody>,
}

impl Response {
    pub fn success(data: Value) -> Self {
        Self {
            ok: true,
            data: Some(data),
            error: None,
        }
    }

    pub fn failure(kind: ErrorKind, message: impl Into<String>, check: Option<&str>) -> Self {
        Self {
            ok: false,
            data: None,
            error: Some(ErrorBody {
                kind,
                message: message.into(),
                check: check.map(str::to_string),
            }),
        }
    }

    pub fn kind(&self) -> Option<ErrorKind> {
        self.error.as_ref().map(|e| e.kind)
    }

    pub fn check(&self) -> Option<&str> {
        self.error.as_ref().and_then(|e| e.check.as_deref())
    }

    pub fn exit_code(&self) -> u8 {
        self.kind().map_or(0, ErrorKind::exit_code)
    }
}
