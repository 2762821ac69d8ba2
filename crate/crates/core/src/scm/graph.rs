use std::collections::VecDeque;

/// A directed graph stored as parent lists.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Dag {
    parents: Vec<Vec<usize>>,
}

impl Dag {
    /// `None` when an index is out of range or the graph has a cycle.
    pub fn new(parents: Vec<Vec<usize>>) -> Option<Self> {
        let n = parents.len();
        if parents.iter().flatten().any(|&p| p >= n) {
            return None;
        }
        let dag = Self { parents };
        dag.topological_order().map(|_| dag)
    }

    pub fn len(&self) -> usize {
        self.parents.len()
    }

    pub fn is_empty(&self) -> bool {
        self.parents.is_empty()
    }

    pub fn parents(&self, v: usize) -> &[usize] {
        &self.parents[v]
    }

    pub fn children(&self, v: usize) -> Vec<usize> {
        (0..self.len()).filter(|&c| self.parents[c].contains(&v)).collect()
    }

    /// Kahn's algorithm; `None` on a cycle.
    pub fn topological_order(&self) -> Option<Vec<usize>> {
        let n = self.len();
        let mut indegree: Vec<usize> = self.parents.iter().map(Vec::len).collect();
        let mut queue: VecDeque<usize> = (0..n).filter(|&v| indegree[v] == 0).collect();
        let mut order = Vec::with_capacity(n);
        while let Some(v) = queue.pop_front() {
            order.push(v);
            for c in self.children(v) {
                indegree[c] -= 1;
                if indegree[c] == 0 {
                    queue.push_back(c);
                }
            }
        }
        (order.len() == n).then_some(order)
    }

    /// `nodes` together with all their ancestors.
    pub fn ancestors_of(&self, nodes: &[usize]) -> Vec<bool> {
        let mut seen = vec![false; self.len()];
        let mut stack: Vec<usize> = nodes.to_vec();
        while let Some(v) = stack.pop() {
            if !std::mem::replace(&mut seen[v], true) {
                stack.extend_from_slice(&self.parents[v]);
            }
        }
        seen
    }

    /// Removes every edge pointing into `nodes`.
    pub fn without_incoming(&self, nodes: &[usize]) -> Self {
        let mut parents = self.parents.clone();
        for &v in nodes {
            parents[v].clear();
        }
        Self { parents }
    }

    /// Removes every edge leaving `nodes`.
    pub fn without_outgoing(&self, nodes: &[usize]) -> Self {
        let parents = self
            .parents
            .iter()
            .map(|ps| ps.iter().copied().filter(|p| !nodes.contains(p)).collect())
            .collect();
        Self { parents }
    }

    /// Whether every path between `xs` and `ys` is blocked by `zs`.
    ///
    /// Reachability over (node, direction) pairs: a trail may pass a
    /// non-collider outside `zs`, and a collider that is in `zs` or has a
    /// descendant in `zs`.
    pub fn d_separated(&self, xs: &[usize], ys: &[usize], zs: &[usize]) -> bool {
        let n = self.len();
        let in_z: Vec<bool> = (0..n).map(|v| zs.contains(&v)).collect();
        let anc_z = self.ancestors_of(zs);
        let children: Vec<Vec<usize>> = (0..n).map(|v| self.children(v)).collect();
        // visited[v][0]: arrived from a child (moving up); [1]: from a parent.
        let mut visited = vec![[false; 2]; n];
        let mut queue: VecDeque<(usize, usize)> = xs.iter().map(|&x| (x, 0)).collect();
        while let Some((v, dir)) = queue.pop_front() {
            if std::mem::replace(&mut visited[v][dir], true) {
                continue;
            }
            if !in_z[v] && ys.contains(&v) {
                return false;
            }
            if dir == 0 {
                if !in_z[v] {
                    queue.extend(self.parents[v].iter().map(|&p| (p, 0)));
                    queue.extend(children[v].iter().map(|&c| (c, 1)));
                }
            } else {
                if !in_z[v] {
                    queue.extend(children[v].iter().map(|&c| (c, 1)));
                }
                if anc_z[v] {
                    queue.extend(self.parents[v].iter().map(|&p| (p, 0)));
                }
            }
        }
        true
    }
}
