//! Role and data hierarchies.
//!
//! Two DAGs share one identifier space: role edges point senior → junior and
//! data edges point parent (more sensitive) → child (less sensitive). Roles
//! are associated with data nodes. A role reaches every junior role, every
//! data node associated with itself or a junior, and every descendant of
//! those data nodes.
//!
//! Mutations validate fully before touching any state, so a failed call
//! leaves the graph unchanged.

use alloc::collections::{BTreeMap, BTreeSet, VecDeque};
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ids::{NodeId, UserId};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NodeKind {
    Role,
    Data,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum HierarchyError {
    #[error("node {0} already exists")]
    DuplicateNode(NodeId),
    #[error("node id {0} belonged to a deleted node and cannot be reused")]
    RetiredNode(NodeId),
    #[error("unknown node {0}")]
    UnknownNode(NodeId),
    #[error("node {node} is not a {expected:?} node")]
    KindMismatch { node: NodeId, expected: NodeKind },
    #[error("edge {parent} -> {child} would create a cycle")]
    CycleDetected { parent: NodeId, child: NodeId },
    #[error("edge {parent} -> {child} already exists")]
    DuplicateEdge { parent: NodeId, child: NodeId },
    #[error("edge {parent} -> {child} does not exist")]
    UnknownEdge { parent: NodeId, child: NodeId },
    #[error("role {node} still has {users} assigned user(s)")]
    NodeInUse { node: NodeId, users: usize },
    #[error("association {role} -> {data} already exists")]
    DuplicateAssociation { role: NodeId, data: NodeId },
    #[error("association {role} -> {data} does not exist")]
    UnknownAssociation { role: NodeId, data: NodeId },
    #[error("unknown user {0}")]
    UnknownUser(UserId),
    #[error("user {0} already registered")]
    DuplicateUser(UserId),
    #[error("user {user} already holds role {role}")]
    AlreadyAssigned { user: UserId, role: NodeId },
    #[error("user {user} does not hold role {role}")]
    NotAssigned { user: UserId, role: NodeId },
}

type Adjacency = BTreeMap<NodeId, BTreeSet<NodeId>>;

/// The dual DAG of role and data nodes plus associations and user assignments.
///
/// All collections are ordered by id, so iteration (and anything serialized
/// from it) is deterministic.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct HierarchyGraph {
    roles: BTreeSet<NodeId>,
    data: BTreeSet<NodeId>,
    role_edges: Adjacency,
    data_edges: Adjacency,
    associations: Adjacency,
    user_roles: BTreeMap<UserId, BTreeSet<NodeId>>,
    retired: BTreeSet<NodeId>,
}

impl HierarchyGraph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn kind_of(&self, id: &NodeId) -> Option<NodeKind> {
        if self.roles.contains(id) {
            Some(NodeKind::Role)
        } else if self.data.contains(id) {
            Some(NodeKind::Data)
        } else {
            None
        }
    }

    pub fn contains(&self, id: &NodeId) -> bool {
        self.kind_of(id).is_some()
    }

    pub fn roles(&self) -> impl Iterator<Item = &NodeId> {
        self.roles.iter()
    }

    pub fn data_nodes(&self) -> impl Iterator<Item = &NodeId> {
        self.data.iter()
    }

    pub fn node_count(&self) -> usize {
        self.roles.len() + self.data.len()
    }

    /// Ids of deleted nodes; they can never be added again.
    pub fn retired(&self) -> impl Iterator<Item = &NodeId> {
        self.retired.iter()
    }

    pub fn edges(&self, kind: NodeKind) -> impl Iterator<Item = (&NodeId, &NodeId)> {
        flatten(self.adjacency(kind))
    }

    pub fn associations(&self) -> impl Iterator<Item = (&NodeId, &NodeId)> {
        flatten(&self.associations)
    }

    pub fn users(&self) -> impl Iterator<Item = (&UserId, &BTreeSet<NodeId>)> {
        self.user_roles.iter()
    }

    pub fn has_user(&self, user: &UserId) -> bool {
        self.user_roles.contains_key(user)
    }

    pub fn roles_of(&self, user: &UserId) -> Option<&BTreeSet<NodeId>> {
        self.user_roles.get(user)
    }

    pub fn holds_role(&self, user: &UserId, role: &NodeId) -> bool {
        self.user_roles
            .get(user)
            .is_some_and(|roles| roles.contains(role))
    }

    /// Users currently assigned to `role`.
    pub fn members_of<'a>(&'a self, role: &'a NodeId) -> impl Iterator<Item = &'a UserId> + 'a {
        self.user_roles
            .iter()
            .filter(move |(_, roles)| roles.contains(role))
            .map(|(user, _)| user)
    }

    pub fn add_node(&mut self, kind: NodeKind, id: NodeId) -> Result<(), HierarchyError> {
        if self.contains(&id) {
            return Err(HierarchyError::DuplicateNode(id));
        }
        if self.retired.contains(&id) {
            return Err(HierarchyError::RetiredNode(id));
        }
        match kind {
            NodeKind::Role => self.roles.insert(id),
            NodeKind::Data => self.data.insert(id),
        };
        Ok(())
    }

    pub fn add_edge(
        &mut self,
        kind: NodeKind,
        parent: NodeId,
        child: NodeId,
    ) -> Result<(), HierarchyError> {
        self.expect_kind(&parent, kind)?;
        self.expect_kind(&child, kind)?;
        if parent == child || self.reaches(kind, &child, &parent) {
            return Err(HierarchyError::CycleDetected { parent, child });
        }
        let children = self.adjacency_mut(kind).entry(parent.clone()).or_default();
        if children.contains(&child) {
            return Err(HierarchyError::DuplicateEdge { parent, child });
        }
        children.insert(child);
        Ok(())
    }

    pub fn remove_edge(
        &mut self,
        kind: NodeKind,
        parent: &NodeId,
        child: &NodeId,
    ) -> Result<(), HierarchyError> {
        self.expect_kind(parent, kind)?;
        self.expect_kind(child, kind)?;
        if !remove_from(self.adjacency_mut(kind), parent, child) {
            return Err(HierarchyError::UnknownEdge {
                parent: parent.clone(),
                child: child.clone(),
            });
        }
        Ok(())
    }

    /// Removes a node with all incident edges and associations.
    ///
    /// Returns the node's former direct successors (junior roles, associated
    /// data, or child data), which are the nodes whose keys a holder of the
    /// removed node's key could still derive.
    pub fn remove_node(&mut self, id: &NodeId) -> Result<BTreeSet<NodeId>, HierarchyError> {
        let kind = self
            .kind_of(id)
            .ok_or_else(|| HierarchyError::UnknownNode(id.clone()))?;
        let successors: BTreeSet<NodeId> = self.key_successors(id).cloned().collect();
        match kind {
            NodeKind::Role => {
                let users = self.members_of(id).count();
                if users > 0 {
                    return Err(HierarchyError::NodeInUse {
                        node: id.clone(),
                        users,
                    });
                }
                self.roles.remove(id);
                detach(&mut self.role_edges, id);
                self.associations.remove(id);
            }
            NodeKind::Data => {
                self.data.remove(id);
                detach(&mut self.data_edges, id);
                detach(&mut self.associations, id);
            }
        }
        self.retired.insert(id.clone());
        Ok(successors)
    }

    /// Marks an id as belonging to a deleted node (used when restoring a persisted graph).
    pub fn retire(&mut self, id: NodeId) -> Result<(), HierarchyError> {
        if self.contains(&id) {
            return Err(HierarchyError::DuplicateNode(id));
        }
        self.retired.insert(id);
        Ok(())
    }

    pub fn associate(&mut self, role: NodeId, data: NodeId) -> Result<(), HierarchyError> {
        self.expect_kind(&role, NodeKind::Role)?;
        self.expect_kind(&data, NodeKind::Data)?;
        let assoc = self.associations.entry(role.clone()).or_default();
        if assoc.contains(&data) {
            return Err(HierarchyError::DuplicateAssociation { role, data });
        }
        assoc.insert(data);
        Ok(())
    }

    pub fn dissociate(&mut self, role: &NodeId, data: &NodeId) -> Result<(), HierarchyError> {
        self.expect_kind(role, NodeKind::Role)?;
        self.expect_kind(data, NodeKind::Data)?;
        if !remove_from(&mut self.associations, role, data) {
            return Err(HierarchyError::UnknownAssociation {
                role: role.clone(),
                data: data.clone(),
            });
        }
        Ok(())
    }

    pub fn add_user(&mut self, user: UserId) -> Result<(), HierarchyError> {
        if self.user_roles.contains_key(&user) {
            return Err(HierarchyError::DuplicateUser(user));
        }
        self.user_roles.insert(user, BTreeSet::new());
        Ok(())
    }

    pub fn assign(&mut self, user: &UserId, role: NodeId) -> Result<(), HierarchyError> {
        self.expect_kind(&role, NodeKind::Role)?;
        let roles = self
            .user_roles
            .get_mut(user)
            .ok_or_else(|| HierarchyError::UnknownUser(user.clone()))?;
        if roles.contains(&role) {
            return Err(HierarchyError::AlreadyAssigned {
                user: user.clone(),
                role,
            });
        }
        roles.insert(role);
        Ok(())
    }

    pub fn revoke(&mut self, user: &UserId, role: &NodeId) -> Result<(), HierarchyError> {
        let roles = self
            .user_roles
            .get_mut(user)
            .ok_or_else(|| HierarchyError::UnknownUser(user.clone()))?;
        if !roles.remove(role) {
            return Err(HierarchyError::NotAssigned {
                user: user.clone(),
                role: role.clone(),
            });
        }
        Ok(())
    }

    /// Strict descendants of `id` inside its own hierarchy (role or data edges only).
    pub fn descendants(&self, id: &NodeId) -> Result<BTreeSet<NodeId>, HierarchyError> {
        let kind = self
            .kind_of(id)
            .ok_or_else(|| HierarchyError::UnknownNode(id.clone()))?;
        let adjacency = self.adjacency(kind);
        let mut seen = bfs(core::iter::once(id), |n| {
            adjacency.get(n).into_iter().flatten()
        });
        seen.remove(id);
        Ok(seen)
    }

    /// Every data node reachable from `role`: data associated with the role or
    /// any junior role, plus all of their data descendants.
    pub fn accessible_data(&self, role: &NodeId) -> Result<BTreeSet<NodeId>, HierarchyError> {
        self.expect_kind(role, NodeKind::Role)?;
        let roles = bfs(core::iter::once(role), |n| {
            self.role_edges.get(n).into_iter().flatten()
        });
        let seeds = roles
            .iter()
            .filter_map(|r| self.associations.get(r))
            .flatten();
        Ok(bfs(seeds, |n| self.data_edges.get(n).into_iter().flatten()))
    }

    /// True iff some role held by `user` reaches `data`.
    pub fn can_access(&self, user: &UserId, data: &NodeId) -> Result<bool, HierarchyError> {
        self.expect_kind(data, NodeKind::Data)?;
        let roles = self
            .user_roles
            .get(user)
            .ok_or_else(|| HierarchyError::UnknownUser(user.clone()))?;
        for role in roles {
            if self.accessible_data(role)?.contains(data) {
                return Ok(true);
            }
        }
        Ok(false)
    }

    /// Direct successors of `id` along edges that carry key-derivation tokens:
    /// junior roles and associated data for a role, child data for a data node.
    pub fn key_successors<'a>(&'a self, id: &NodeId) -> impl Iterator<Item = &'a NodeId> + 'a {
        let (first, second) = match self.kind_of(id) {
            Some(NodeKind::Role) => (self.role_edges.get(id), self.associations.get(id)),
            Some(NodeKind::Data) => (self.data_edges.get(id), None),
            None => (None, None),
        };
        first
            .into_iter()
            .flatten()
            .chain(second.into_iter().flatten())
    }

    /// Every (parent, child) pair that carries an edge token: role edges,
    /// associations and data edges.
    pub fn key_edges(&self) -> impl Iterator<Item = (&NodeId, &NodeId)> {
        flatten(&self.role_edges)
            .chain(flatten(&self.associations))
            .chain(flatten(&self.data_edges))
    }

    pub fn has_key_edge(&self, parent: &NodeId, child: &NodeId) -> bool {
        [&self.role_edges, &self.associations, &self.data_edges]
            .iter()
            .any(|adj| adj.get(parent).is_some_and(|c| c.contains(child)))
    }

    /// `id` together with everything reachable from it along key edges.
    pub fn key_closure(&self, id: &NodeId) -> Result<BTreeSet<NodeId>, HierarchyError> {
        if !self.contains(id) {
            return Err(HierarchyError::UnknownNode(id.clone()));
        }
        Ok(bfs(core::iter::once(id), |n| self.key_successors(n)))
    }

    fn expect_kind(&self, id: &NodeId, expected: NodeKind) -> Result<(), HierarchyError> {
        match self.kind_of(id) {
            None => Err(HierarchyError::UnknownNode(id.clone())),
            Some(kind) if kind != expected => Err(HierarchyError::KindMismatch {
                node: id.clone(),
                expected,
            }),
            Some(_) => Ok(()),
        }
    }

    fn reaches(&self, kind: NodeKind, from: &NodeId, to: &NodeId) -> bool {
        let adjacency = self.adjacency(kind);
        bfs(core::iter::once(from), |n| {
            adjacency.get(n).into_iter().flatten()
        })
        .contains(to)
    }

    fn adjacency(&self, kind: NodeKind) -> &Adjacency {
        match kind {
            NodeKind::Role => &self.role_edges,
            NodeKind::Data => &self.data_edges,
        }
    }

    fn adjacency_mut(&mut self, kind: NodeKind) -> &mut Adjacency {
        match kind {
            NodeKind::Role => &mut self.role_edges,
            NodeKind::Data => &mut self.data_edges,
        }
    }
}

fn flatten(adjacency: &Adjacency) -> impl Iterator<Item = (&NodeId, &NodeId)> {
    adjacency
        .iter()
        .flat_map(|(parent, children)| children.iter().map(move |child| (parent, child)))
}

fn remove_from(adjacency: &mut Adjacency, parent: &NodeId, child: &NodeId) -> bool {
    let Some(children) = adjacency.get_mut(parent) else {
        return false;
    };
    let removed = children.remove(child);
    if children.is_empty() {
        adjacency.remove(parent);
    }
    removed
}

/// Drops `id` as a source and as a target.
fn detach(adjacency: &mut Adjacency, id: &NodeId) {
    adjacency.remove(id);
    adjacency.retain(|_, children| {
        children.remove(id);
        !children.is_empty()
    });
}

/// Reflexive breadth-first reachability from `seeds`.
fn bfs<'a, S, F, I>(seeds: S, mut successors: F) -> BTreeSet<NodeId>
where
    S: IntoIterator<Item = &'a NodeId>,
    F: FnMut(&NodeId) -> I,
    I: Iterator<Item = &'a NodeId>,
{
    let mut seen = BTreeSet::new();
    let mut queue: VecDeque<&NodeId> = VecDeque::new();
    for seed in seeds {
        if seen.insert(seed.clone()) {
            queue.push_back(seed);
        }
    }
    while let Some(node) = queue.pop_front() {
        for next in successors(node) {
            if seen.insert(next.clone()) {
                queue.push_back(next);
            }
        }
    }
    seen
}

/// Edges as a plain list, handy for rebuilding or comparing graphs.
pub fn edge_list(graph: &HierarchyGraph, kind: NodeKind) -> Vec<(NodeId, NodeId)> {
    graph
        .edges(kind)
        .map(|(p, c)| (p.clone(), c.clone()))
        .collect()
}
