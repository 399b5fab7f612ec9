//! Directed acyclic graphs with d-separation, manipulated graphs, the
//! graphical conditions of the three do-calculus rules, backdoor
//! admissibility and the instrumental-variable criteria.
//!
//! Node names are opaque strings. d-separation uses the reachability
//! ("Bayes ball") traversal, linear in the graph size.

use std::collections::{BTreeSet, HashMap, VecDeque};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// JSON form: `{"nodes": ["A", ...], "edges": [["A", "B"], ...]}`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GraphSpec {
    pub nodes: Vec<String>,
    pub edges: Vec<(String, String)>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Dag {
    names: Vec<String>,
    index: HashMap<String, usize>,
    edges: BTreeSet<(usize, usize)>,
    parents: Vec<Vec<usize>>,
    children: Vec<Vec<usize>>,
}

/// Names of the shipped graphs accepted by [`Dag::builtin`].
pub const BUILTIN_GRAPHS: [&str; 3] = ["confounded", "many-shot", "few-shot"];

impl Dag {
    pub fn new<N, A, B>(nodes: &[N], edges: &[(A, B)]) -> Result<Self>
    where
        N: AsRef<str>,
        A: AsRef<str>,
        B: AsRef<str>,
    {
        let names: Vec<String> = nodes.iter().map(|n| n.as_ref().to_owned()).collect();
        let mut index = HashMap::with_capacity(names.len());
        for (i, n) in names.iter().enumerate() {
            if index.insert(n.clone(), i).is_some() {
                return Err(Error::invalid(format!("duplicate node {n:?}")));
            }
        }
        let lookup = |n: &str| {
            index
                .get(n)
                .copied()
                .ok_or_else(|| Error::invalid(format!("edge endpoint {n:?} is not a node")))
        };
        let mut edge_set = BTreeSet::new();
        for (a, b) in edges {
            let (a, b) = (lookup(a.as_ref())?, lookup(b.as_ref())?);
            if a == b {
                return Err(Error::invalid(format!("self-loop on {:?}", names[a])));
            }
            edge_set.insert((a, b));
        }
        let dag = Self::from_parts(names, index, edge_set);
        if let Some(node) = dag.find_cycle() {
            return Err(Error::invalid(format!(
                "graph has a directed cycle through {:?}",
                dag.names[node]
            )));
        }
        Ok(dag)
    }

    fn from_parts(names: Vec<String>, index: HashMap<String, usize>, edges: BTreeSet<(usize, usize)>) -> Self {
        let mut parents = vec![Vec::new(); names.len()];
        let mut children = vec![Vec::new(); names.len()];
        for &(a, b) in &edges {
            parents[b].push(a);
            children[a].push(b);
        }
        Dag {
            names,
            index,
            edges,
            parents,
            children,
        }
    }

    fn find_cycle(&self) -> Option<usize> {
        // Kahn's algorithm; anything left over sits on or behind a cycle
        let mut indegree: Vec<usize> = self.parents.iter().map(Vec::len).collect();
        let mut queue: VecDeque<usize> = (0..self.len()).filter(|&v| indegree[v] == 0).collect();
        let mut seen = 0;
        while let Some(v) = queue.pop_front() {
            seen += 1;
            for &c in &self.children[v] {
                indegree[c] -= 1;
                if indegree[c] == 0 {
                    queue.push_back(c);
                }
            }
        }
        (seen < self.len()).then(|| indegree.iter().position(|&d| d > 0).unwrap())
    }

    pub fn from_spec(spec: &GraphSpec) -> Result<Self> {
        Self::new(&spec.nodes, &spec.edges)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let spec: GraphSpec = serde_json::from_str(text).map_err(|e| {
            // serde_json reports 1-based line/column; convert to a byte offset
            let offset: usize = text
                .split_inclusive('\n')
                .take(e.line().saturating_sub(1))
                .map(str::len)
                .sum();
            Error::format(
                (offset + e.column().saturating_sub(1)) as u64,
                format!("graph JSON: {e}"),
            )
        })?;
        Self::from_spec(&spec)
    }

    pub fn to_spec(&self) -> GraphSpec {
        GraphSpec {
            nodes: self.names.clone(),
            edges: self
                .edges
                .iter()
                .map(|&(a, b)| (self.names[a].clone(), self.names[b].clone()))
                .collect(),
        }
    }

    /// The shipped graphs:
    ///
    /// * `confounded`: knowledge `D` confounds feature `X` and label `Y`
    ///   through the mediator `C` (`D→X, D→C, X→C, X→Y, C→Y`).
    /// * `many-shot`: `confounded` plus a sample id `I→X`.
    /// * `few-shot`: `confounded` plus `X→I` (the id is recoverable from the feature).
    pub fn builtin(name: &str) -> Result<Self> {
        let base = [("D", "X"), ("D", "C"), ("X", "C"), ("X", "Y"), ("C", "Y")];
        match name {
            "confounded" => Self::new(&["D", "X", "C", "Y"], &base),
            "many-shot" => Self::new(&["D", "X", "C", "Y", "I"], &[&base[..], &[("I", "X")]].concat()),
            "few-shot" => Self::new(&["D", "X", "C", "Y", "I"], &[&base[..], &[("X", "I")]].concat()),
            other => Err(Error::invalid(format!(
                "unknown built-in graph {other:?} (expected one of {BUILTIN_GRAPHS:?})"
            ))),
        }
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn nodes(&self) -> &[String] {
        &self.names
    }

    pub fn edges(&self) -> impl Iterator<Item = (&str, &str)> {
        self.edges
            .iter()
            .map(|&(a, b)| (self.names[a].as_str(), self.names[b].as_str()))
    }

    pub fn num_edges(&self) -> usize {
        self.edges.len()
    }

    pub fn has_edge(&self, from: &str, to: &str) -> bool {
        match (self.index.get(from), self.index.get(to)) {
            (Some(&a), Some(&b)) => self.edges.contains(&(a, b)),
            _ => false,
        }
    }

    fn id(&self, name: &str) -> Result<usize> {
        self.index
            .get(name)
            .copied()
            .ok_or_else(|| Error::invalid(format!("unknown node {name:?}")))
    }

    fn mask<S: AsRef<str>>(&self, set: &[S]) -> Result<Vec<bool>> {
        let mut m = vec![false; self.len()];
        for n in set {
            m[self.id(n.as_ref())?] = true;
        }
        Ok(m)
    }

    fn closure(&self, start: &[bool], next: &[Vec<usize>]) -> Vec<bool> {
        let mut seen = start.to_vec();
        let mut stack: Vec<usize> = (0..self.len()).filter(|&v| start[v]).collect();
        while let Some(v) = stack.pop() {
            for &u in &next[v] {
                if !seen[u] {
                    seen[u] = true;
                    stack.push(u);
                }
            }
        }
        seen
    }

    /// Nodes with a directed path into `set`, including `set` itself.
    fn ancestors_mask(&self, set: &[bool]) -> Vec<bool> {
        self.closure(set, &self.parents)
    }

    fn descendants_mask(&self, set: &[bool]) -> Vec<bool> {
        self.closure(set, &self.children)
    }

    pub fn descendants(&self, node: &str) -> Result<Vec<&str>> {
        let m = self.descendants_mask(&self.mask(&[node])?);
        Ok(self.names_of(&m))
    }

    pub fn ancestors(&self, node: &str) -> Result<Vec<&str>> {
        let m = self.ancestors_mask(&self.mask(&[node])?);
        Ok(self.names_of(&m))
    }

    fn names_of(&self, m: &[bool]) -> Vec<&str> {
        (0..self.len())
            .filter(|&v| m[v])
            .map(|v| self.names[v].as_str())
            .collect()
    }

    /// Whether every path between `x` and `y` is blocked by `z`.
    pub fn d_separated<A, B, C>(&self, x: &[A], y: &[B], z: &[C]) -> Result<bool>
    where
        A: AsRef<str>,
        B: AsRef<str>,
        C: AsRef<str>,
    {
        let (xm, ym, zm) = (self.mask(x)?, self.mask(y)?, self.mask(z)?);
        for v in 0..self.len() {
            if (xm[v] && ym[v]) || (xm[v] && zm[v]) || (ym[v] && zm[v]) {
                return Err(Error::invalid(format!(
                    "node {:?} appears in more than one of X, Y, Z",
                    self.names[v]
                )));
            }
        }
        Ok(self.separated(&xm, &ym, &zm))
    }

    fn separated(&self, xm: &[bool], ym: &[bool], zm: &[bool]) -> bool {
        // colliders open iff they have a descendant in Z, i.e. they are ancestors of Z
        let opens = self.ancestors_mask(zm);
        // visited[v][0]: entered from a child (moving up); [1]: from a parent (moving down)
        let mut visited = vec![[false; 2]; self.len()];
        let mut queue: VecDeque<(usize, usize)> = (0..self.len()).filter(|&v| xm[v]).map(|v| (v, 0)).collect();
        while let Some((v, dir)) = queue.pop_front() {
            if visited[v][dir] {
                continue;
            }
            visited[v][dir] = true;
            if !zm[v] && ym[v] {
                return false;
            }
            if dir == 0 {
                if !zm[v] {
                    queue.extend(self.parents[v].iter().map(|&p| (p, 0)));
                    queue.extend(self.children[v].iter().map(|&c| (c, 1)));
                }
            } else {
                if !zm[v] {
                    queue.extend(self.children[v].iter().map(|&c| (c, 1)));
                }
                if opens[v] {
                    queue.extend(self.parents[v].iter().map(|&p| (p, 0)));
                }
            }
        }
        true
    }

    /// Copy with every edge into `cut_incoming` and out of `cut_outgoing` removed.
    pub fn manipulate<A: AsRef<str>, B: AsRef<str>>(&self, cut_incoming: &[A], cut_outgoing: &[B]) -> Result<Dag> {
        let inc = self.mask(cut_incoming)?;
        let out = self.mask(cut_outgoing)?;
        Ok(self.manipulate_masks(&inc, &out))
    }

    fn manipulate_masks(&self, inc: &[bool], out: &[bool]) -> Dag {
        let edges = self
            .edges
            .iter()
            .copied()
            .filter(|&(a, b)| !inc[b] && !out[a])
            .collect();
        Self::from_parts(self.names.clone(), self.index.clone(), edges)
    }

    /// The d-separation condition licensing do-calculus rule `rule` (1, 2 or 3):
    ///
    /// 1. `(Y ⫫ Z | X, W)` in `G` with edges into `X` cut;
    /// 2. the same in `G` with edges into `X` and out of `Z` cut;
    /// 3. the same in `G` with edges into `X` and into `Z(W)` cut, where
    ///    `Z(W)` holds the `Z` nodes that are not ancestors of any `W` node
    ///    once edges into `X` are cut.
    pub fn rule_condition<S: AsRef<str>>(&self, rule: u8, x: &[S], y: &[S], z: &[S], w: &[S]) -> Result<bool> {
        let (xm, ym, zm, wm) = (self.mask(x)?, self.mask(y)?, self.mask(z)?, self.mask(w)?);
        let sets = [&xm, &ym, &zm, &wm];
        for v in 0..self.len() {
            if sets.iter().filter(|s| s[v]).count() > 1 {
                return Err(Error::invalid(format!(
                    "node {:?} appears in more than one of X, Y, Z, W",
                    self.names[v]
                )));
            }
        }
        let none = vec![false; self.len()];
        let graph = match rule {
            1 => self.manipulate_masks(&xm, &none),
            2 => self.manipulate_masks(&xm, &zm),
            3 => {
                let g_x = self.manipulate_masks(&xm, &none);
                let w_ancestors = g_x.ancestors_mask(&wm);
                let z_w: Vec<bool> = (0..self.len()).map(|v| zm[v] && !w_ancestors[v]).collect();
                let cut: Vec<bool> = (0..self.len()).map(|v| xm[v] || z_w[v]).collect();
                self.manipulate_masks(&cut, &none)
            }
            other => return Err(Error::invalid(format!("unknown do-calculus rule {other}"))),
        };
        let given: Vec<bool> = (0..self.len()).map(|v| xm[v] || wm[v]).collect();
        Ok(graph.separated(&ym, &zm, &given))
    }

    /// Graphical instrument test for the effect `x → y`: `z` is independent of
    /// `y` once edges into `x` are cut, and `z` is not independent of `x`.
    pub fn is_instrumental(&self, z: &str, x: &str, y: &str) -> Result<bool> {
        if z == x || z == y || x == y {
            return Err(Error::invalid("instrument, treatment and outcome must be distinct"));
        }
        let g_x = self.manipulate(&[x], &[] as &[&str])?;
        Ok(g_x.d_separated(&[z], &[y], &[] as &[&str])? && !self.d_separated(&[z], &[x], &[] as &[&str])?)
    }

    /// Backdoor criterion: no node of `z` descends from `x`, and `z` blocks
    /// every path between `x` and `y` that starts with an edge into `x`.
    pub fn backdoor_admissible<S: AsRef<str>>(&self, z: &[S], x: &str, y: &str) -> Result<bool> {
        let zm = self.mask(z)?;
        let (xi, yi) = (self.id(x)?, self.id(y)?);
        if zm[xi] || zm[yi] {
            return Err(Error::invalid(
                "treatment and outcome must not be in the adjustment set",
            ));
        }
        let desc = self.descendants_mask(&self.mask(&[x])?);
        if (0..self.len()).any(|v| zm[v] && desc[v]) {
            return Ok(false);
        }
        let g = self.manipulate(&[] as &[&str], &[x])?;
        g.d_separated(&[x], &[y], z)
    }
}
