//! Finite-domain factor graphs: the compiler's input.
//!
//! On disk a graph is a JSON object
//!
//! ```json
//! {
//!   "variables": [{"name": "A", "arity": 2}, ...],
//!   "factors":   [{"name": "pB", "vars": ["A", "B"], "table": [0.8, 0.2, 0.3, 0.7]}, ...],
//!   "evidence":  {"C": 1}
//! }
//! ```
//!
//! Tables hold nonnegative linear weights in row-major order with the LAST
//! listed variable varying fastest. `evidence` is optional.

use std::collections::{BTreeMap, BTreeSet, HashMap};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Largest joint state space the exact enumerator will walk.
pub const ENUMERATION_LIMIT: u128 = 1 << 20;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Variable {
    pub name: String,
    pub arity: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Factor {
    pub name: String,
    pub vars: Vec<usize>,
    pub table: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FactorGraph {
    variables: Vec<Variable>,
    factors: Vec<Factor>,
    evidence: BTreeMap<usize, usize>,
    index: HashMap<String, usize>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawVariable {
    name: String,
    arity: usize,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawFactor {
    name: String,
    vars: Vec<String>,
    table: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawGraph {
    variables: Vec<RawVariable>,
    factors: Vec<RawFactor>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    evidence: BTreeMap<String, usize>,
}

impl FactorGraph {
    /// Builds and validates a graph. `factors` name their variables by index.
    pub fn new(
        variables: Vec<Variable>,
        factors: Vec<Factor>,
        evidence: BTreeMap<usize, usize>,
    ) -> Result<Self> {
        let mut index = HashMap::new();
        for (i, v) in variables.iter().enumerate() {
            if index.insert(v.name.clone(), i).is_some() {
                return Err(Error::DuplicateName(v.name.clone()));
            }
            if v.arity == 0 {
                return Err(Error::Config(format!("variable `{}` has arity 0", v.name)));
            }
        }
        let mut factor_names = BTreeSet::new();
        for f in &factors {
            if !factor_names.insert(f.name.as_str()) {
                return Err(Error::DuplicateName(f.name.clone()));
            }
            let mut seen = BTreeSet::new();
            for &v in &f.vars {
                if v >= variables.len() {
                    return Err(Error::UnknownVariable {
                        factor: f.name.clone(),
                        variable: format!("#{v}"),
                    });
                }
                if !seen.insert(v) {
                    return Err(Error::DuplicateName(format!(
                        "{} (repeated in factor `{}`)",
                        variables[v].name, f.name
                    )));
                }
            }
            let expected: usize = f.vars.iter().map(|&v| variables[v].arity).product();
            if f.table.len() != expected {
                return Err(Error::TableLength {
                    factor: f.name.clone(),
                    expected,
                    actual: f.table.len(),
                });
            }
            if let Some((i, &w)) = f
                .table
                .iter()
                .enumerate()
                .find(|(_, w)| !(w.is_finite() && **w >= 0.0))
            {
                return Err(Error::NegativeWeight {
                    factor: f.name.clone(),
                    index: i,
                    value: w,
                });
            }
        }
        for (&v, &value) in &evidence {
            let var = variables
                .get(v)
                .ok_or_else(|| Error::UnknownName(format!("#{v}")))?;
            if value >= var.arity {
                return Err(Error::ValueOutOfRange {
                    variable: var.name.clone(),
                    value,
                    arity: var.arity,
                });
            }
        }
        let graph = Self {
            variables,
            factors,
            evidence,
            index,
        };
        if graph.state_count() <= ENUMERATION_LIMIT && !graph.has_positive_configuration() {
            return Err(Error::NoPositiveConfiguration);
        }
        Ok(graph)
    }

    pub fn parse(text: &str) -> Result<Self> {
        let raw: RawGraph = serde_json::from_str(text)?;
        let variables: Vec<Variable> = raw
            .variables
            .into_iter()
            .map(|v| Variable {
                name: v.name,
                arity: v.arity,
            })
            .collect();
        let mut lookup: HashMap<&str, usize> = HashMap::new();
        for (i, v) in variables.iter().enumerate() {
            if lookup.insert(v.name.as_str(), i).is_some() {
                return Err(Error::DuplicateName(v.name.clone()));
            }
        }
        let factors = raw
            .factors
            .into_iter()
            .map(|f| {
                let vars = f
                    .vars
                    .iter()
                    .map(|n| {
                        lookup.get(n.as_str()).copied().ok_or_else(|| Error::UnknownVariable {
                            factor: f.name.clone(),
                            variable: n.clone(),
                        })
                    })
                    .collect::<Result<Vec<_>>>()?;
                Ok(Factor {
                    name: f.name,
                    vars,
                    table: f.table,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let evidence = raw
            .evidence
            .into_iter()
            .map(|(name, value)| {
                lookup
                    .get(name.as_str())
                    .map(|&i| (i, value))
                    .ok_or(Error::UnknownName(name))
            })
            .collect::<Result<BTreeMap<_, _>>>()?;
        Self::new(variables, factors, evidence)
    }

    pub fn to_json(&self) -> String {
        let raw = RawGraph {
            variables: self
                .variables
                .iter()
                .map(|v| RawVariable {
                    name: v.name.clone(),
                    arity: v.arity,
                })
                .collect(),
            factors: self
                .factors
                .iter()
                .map(|f| RawFactor {
                    name: f.name.clone(),
                    vars: f.vars.iter().map(|&v| self.variables[v].name.clone()).collect(),
                    table: f.table.clone(),
                })
                .collect(),
            evidence: self
                .evidence
                .iter()
                .map(|(&v, &x)| (self.variables[v].name.clone(), x))
                .collect(),
        };
        serde_json::to_string_pretty(&raw).expect("graph serializes")
    }

    pub fn variables(&self) -> &[Variable] {
        &self.variables
    }

    pub fn factors(&self) -> &[Factor] {
        &self.factors
    }

    pub fn evidence(&self) -> &BTreeMap<usize, usize> {
        &self.evidence
    }

    pub fn arities(&self) -> Vec<usize> {
        self.variables.iter().map(|v| v.arity).collect()
    }

    pub fn names(&self) -> Vec<String> {
        self.variables.iter().map(|v| v.name.clone()).collect()
    }

    pub fn variable_index(&self, name: &str) -> Result<usize> {
        self.index
            .get(name)
            .copied()
            .ok_or_else(|| Error::UnknownName(name.to_string()))
    }

    /// Replaces the evidence, validating names and values.
    pub fn with_evidence(&self, evidence: &[(String, usize)]) -> Result<Self> {
        let mut map = BTreeMap::new();
        for (name, value) in evidence {
            map.insert(self.variable_index(name)?, *value);
        }
        Self::new(self.variables.clone(), self.factors.clone(), map)
    }

    pub fn state_count(&self) -> u128 {
        self.variables
            .iter()
            .map(|v| v.arity as u128)
            .try_fold(1u128, |acc, a| acc.checked_mul(a))
            .unwrap_or(u128::MAX)
    }

    /// Neighbor sets: two variables interact iff they share a factor.
    pub fn interaction_neighbors(&self) -> Vec<BTreeSet<usize>> {
        let mut nbrs = vec![BTreeSet::new(); self.variables.len()];
        for f in &self.factors {
            for &a in &f.vars {
                for &b in &f.vars {
                    if a != b {
                        nbrs[a].insert(b);
                    }
                }
            }
        }
        nbrs
    }

    pub fn factors_touching(&self, var: usize) -> Vec<usize> {
        self.factors
            .iter()
            .enumerate()
            .filter(|(_, f)| f.vars.contains(&var))
            .map(|(i, _)| i)
            .collect()
    }

    /// Row-major offset of `config` within `factor`'s table.
    pub fn factor_offset(&self, factor: &Factor, config: &[usize]) -> usize {
        factor
            .vars
            .iter()
            .fold(0, |acc, &v| acc * self.variables[v].arity + config[v])
    }

    /// Unnormalized weight of a full configuration, ignoring evidence.
    pub fn joint_weight(&self, config: &[usize]) -> f64 {
        self.factors
            .iter()
            .map(|f| f.table[self.factor_offset(f, config)])
            .product()
    }

    fn has_positive_configuration(&self) -> bool {
        let arities = self.arities();
        let mut config = vec![0; arities.len()];
        for (&v, &x) in &self.evidence {
            config[v] = x;
        }
        loop {
            if self.joint_weight(&config) > 0.0 {
                return true;
            }
            if !advance(&mut config, &arities, &self.evidence) {
                return false;
            }
        }
    }

    /// Exact normalized joint with evidence applied (inconsistent
    /// configurations get probability zero).
    pub fn enumerate_joint(&self) -> Result<JointTable> {
        let states = self.state_count();
        if states > ENUMERATION_LIMIT {
            return Err(Error::StateSpaceTooLarge {
                states,
                limit: ENUMERATION_LIMIT,
            });
        }
        let arities = self.arities();
        let mut probs = vec![0.0; states as usize];
        let mut config = vec![0; arities.len()];
        for (&v, &x) in &self.evidence {
            config[v] = x;
        }
        let mut total = 0.0;
        loop {
            let w = self.joint_weight(&config);
            let idx = config.iter().zip(&arities).fold(0, |acc, (&x, &a)| acc * a + x);
            probs[idx] = w;
            total += w;
            if !advance(&mut config, &arities, &self.evidence) {
                break;
            }
        }
        if total.is_nan() || total <= 0.0 {
            return Err(Error::NoPositiveConfiguration);
        }
        for p in &mut probs {
            *p /= total;
        }
        Ok(JointTable { arities, probs })
    }
}

/// Odometer step over the free variables, last variable fastest.
fn advance(config: &mut [usize], arities: &[usize], fixed: &BTreeMap<usize, usize>) -> bool {
    for v in (0..config.len()).rev() {
        if fixed.contains_key(&v) {
            continue;
        }
        config[v] += 1;
        if config[v] < arities[v] {
            return true;
        }
        config[v] = 0;
    }
    false
}

#[derive(Clone, Debug, PartialEq)]
pub struct JointTable {
    arities: Vec<usize>,
    probs: Vec<f64>,
}

impl JointTable {
    pub fn arities(&self) -> &[usize] {
        &self.arities
    }

    /// Probabilities indexed row-major, last variable fastest.
    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn index_of(&self, config: &[usize]) -> usize {
        config
            .iter()
            .zip(&self.arities)
            .fold(0, |acc, (&x, &a)| acc * a + x)
    }

    pub fn probability(&self, config: &[usize]) -> f64 {
        self.probs[self.index_of(config)]
    }

    pub fn marginal(&self, var: usize) -> Vec<f64> {
        let mut out = vec![0.0; self.arities[var]];
        let inner: usize = self.arities[var + 1..].iter().product();
        for (i, &p) in self.probs.iter().enumerate() {
            out[(i / inner) % self.arities[var]] += p;
        }
        out
    }

    /// Joint over `vars` (in the given order), last fastest.
    pub fn marginal_over(&self, vars: &[usize]) -> Vec<f64> {
        let size: usize = vars.iter().map(|&v| self.arities[v]).product();
        let mut out = vec![0.0; size];
        let n = self.arities.len();
        let mut config = vec![0; n];
        for &p in &self.probs {
            let idx = vars
                .iter()
                .fold(0, |acc, &v| acc * self.arities[v] + config[v]);
            out[idx] += p;
            for v in (0..n).rev() {
                config[v] += 1;
                if config[v] < self.arities[v] {
                    break;
                }
                config[v] = 0;
            }
        }
        out
    }
}

/// A directed model; each CPT is row-major over `(parents..., node)` with the
/// node fastest, i.e. one normalized row per parent configuration.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BayesNode {
    pub name: String,
    pub arity: usize,
    #[serde(default)]
    pub parents: Vec<String>,
    pub cpt: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BayesNet {
    pub nodes: Vec<BayesNode>,
}

impl BayesNet {
    /// Topological order of node indices, or the name of a node on a cycle.
    pub fn topological_order(&self) -> Result<Vec<usize>> {
        let index: HashMap<&str, usize> = self
            .nodes
            .iter()
            .enumerate()
            .map(|(i, n)| (n.name.as_str(), i))
            .collect();
        let mut indegree = vec![0usize; self.nodes.len()];
        let mut children = vec![Vec::new(); self.nodes.len()];
        for (i, node) in self.nodes.iter().enumerate() {
            for p in &node.parents {
                let &pi = index.get(p.as_str()).ok_or_else(|| Error::UnknownVariable {
                    factor: node.name.clone(),
                    variable: p.clone(),
                })?;
                indegree[i] += 1;
                children[pi].push(i);
            }
        }
        let mut ready: Vec<usize> = (0..self.nodes.len()).filter(|&i| indegree[i] == 0).collect();
        let mut order = Vec::with_capacity(self.nodes.len());
        while let Some(i) = ready.pop() {
            order.push(i);
            for &c in &children[i] {
                indegree[c] -= 1;
                if indegree[c] == 0 {
                    ready.push(c);
                }
            }
        }
        if order.len() < self.nodes.len() {
            let stuck = (0..self.nodes.len()).find(|&i| indegree[i] > 0).unwrap();
            return Err(Error::Cycle(self.nodes[stuck].name.clone()));
        }
        Ok(order)
    }
}

/// One factor per node over `(parents..., node)` holding its CPT.
pub fn from_bayes_net(net: &BayesNet) -> Result<FactorGraph> {
    net.topological_order()?;
    let variables: Vec<Variable> = net
        .nodes
        .iter()
        .map(|n| Variable {
            name: n.name.clone(),
            arity: n.arity,
        })
        .collect();
    let lookup: HashMap<&str, usize> = variables
        .iter()
        .enumerate()
        .map(|(i, v)| (v.name.as_str(), i))
        .collect();
    let mut factors = Vec::with_capacity(net.nodes.len());
    for (i, node) in net.nodes.iter().enumerate() {
        let mut vars: Vec<usize> = node.parents.iter().map(|p| lookup[p.as_str()]).collect();
        vars.push(i);
        let expected: usize = vars.iter().map(|&v| variables[v].arity).product();
        if node.cpt.len() != expected {
            return Err(Error::TableLength {
                factor: node.name.clone(),
                expected,
                actual: node.cpt.len(),
            });
        }
        for (r, row) in node.cpt.chunks(node.arity).enumerate() {
            let s: f64 = row.iter().sum();
            if (s - 1.0).abs() > 1e-9 {
                return Err(Error::InvalidCpt(format!(
                    "node `{}` row {r} sums to {s}",
                    node.name
                )));
            }
        }
        factors.push(Factor {
            name: format!("p_{}", node.name),
            vars,
            table: node.cpt.clone(),
        });
    }
    FactorGraph::new(variables, factors, BTreeMap::new())
}
