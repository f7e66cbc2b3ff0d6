use std::cmp::Ordering;
use std::fmt;

use serde::{Deserialize, Serialize};

use super::RunSpec;
use crate::error::{Error, Result};
use crate::strategies::OptimizerKind;

/// A grid coordinate value.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum GridValue {
    Num(f64),
    Text(String),
}

impl GridValue {
    fn cmp_total(&self, other: &GridValue) -> Ordering {
        match (self, other) {
            (GridValue::Num(a), GridValue::Num(b)) => a.total_cmp(b),
            (GridValue::Text(a), GridValue::Text(b)) => a.cmp(b),
            (GridValue::Num(_), GridValue::Text(_)) => Ordering::Less,
            (GridValue::Text(_), GridValue::Num(_)) => Ordering::Greater,
        }
    }

    fn num(&self, key: &str) -> Result<f64> {
        match self {
            GridValue::Num(v) => Ok(*v),
            GridValue::Text(t) => Err(Error::Configuration(format!("grid.{key}: expected a number, got {t:?}"))),
        }
    }

    fn count(&self, key: &str) -> Result<usize> {
        let v = self.num(key)?;
        if v < 0.0 || v.fract() != 0.0 {
            return Err(Error::Configuration(format!("grid.{key}: expected a count, got {v}")));
        }
        Ok(v as usize)
    }
}

impl fmt::Display for GridValue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            GridValue::Num(v) => write!(f, "{v}"),
            GridValue::Text(t) => f.write_str(t),
        }
    }
}

/// One point of a grid: hyperparameter assignments in key order.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct GridPoint(pub Vec<(String, GridValue)>);

impl Eq for GridPoint {}

impl Ord for GridPoint {
    fn cmp(&self, other: &Self) -> Ordering {
        for ((ka, va), (kb, vb)) in self.0.iter().zip(&other.0) {
            let o = ka.cmp(kb).then_with(|| va.cmp_total(vb));
            if o != Ordering::Equal {
                return o;
            }
        }
        self.0.len().cmp(&other.0.len())
    }
}

impl PartialOrd for GridPoint {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl fmt::Display for GridPoint {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.0.is_empty() {
            return f.write_str("base");
        }
        let parts: Vec<String> = self.0.iter().map(|(k, v)| format!("{k}={v}")).collect();
        f.write_str(&parts.join(","))
    }
}

/// Value lists per hyperparameter. Unset lists keep the base value; an
/// empty list makes the grid empty.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GridSpec {
    pub gamma: Option<Vec<f64>>,
    pub hidden_size: Option<Vec<usize>>,
    pub k: Option<Vec<usize>>,
    pub lambda: Option<Vec<f64>>,
    pub learning_rate: Option<Vec<f64>>,
    pub minibatch: Option<Vec<usize>>,
    pub num_layers: Option<Vec<usize>>,
    pub optimizer: Option<Vec<OptimizerKind>>,
    pub p: Option<Vec<usize>>,
    pub patterns_per_step: Option<Vec<usize>>,
    pub sample_size: Option<Vec<usize>>,
    pub temperature: Option<Vec<f64>>,
}

fn optimizer_name(o: OptimizerKind) -> String {
    match o {
        OptimizerKind::Adam => "adam".into(),
        OptimizerKind::Sgd => "sgd".into(),
    }
}

impl GridSpec {
    fn axes(&self) -> Vec<(&'static str, Vec<GridValue>)> {
        let nums = |v: &Option<Vec<f64>>| v.as_ref().map(|v| v.iter().map(|&x| GridValue::Num(x)).collect::<Vec<_>>());
        let counts =
            |v: &Option<Vec<usize>>| v.as_ref().map(|v| v.iter().map(|&x| GridValue::Num(x as f64)).collect::<Vec<_>>());
        vec![
            ("gamma", nums(&self.gamma)),
            ("hidden_size", counts(&self.hidden_size)),
            ("k", counts(&self.k)),
            ("lambda", nums(&self.lambda)),
            ("learning_rate", nums(&self.learning_rate)),
            ("minibatch", counts(&self.minibatch)),
            ("num_layers", counts(&self.num_layers)),
            (
                "optimizer",
                self.optimizer
                    .as_ref()
                    .map(|v| v.iter().map(|&o| GridValue::Text(optimizer_name(o))).collect()),
            ),
            ("p", counts(&self.p)),
            ("patterns_per_step", counts(&self.patterns_per_step)),
            ("sample_size", counts(&self.sample_size)),
            ("temperature", nums(&self.temperature)),
        ]
        .into_iter()
        .filter_map(|(k, v)| v.map(|v| (k, v)))
        .collect()
    }

    /// Cartesian product in sorted order. A grid with no lists has one
    /// empty point (the base configuration).
    pub fn points(&self) -> Vec<GridPoint> {
        let mut points = vec![GridPoint::default()];
        for (key, values) in self.axes() {
            points = points
                .into_iter()
                .flat_map(|p| {
                    values.iter().map(move |v| {
                        let mut q = p.clone();
                        q.0.push((key.to_string(), v.clone()));
                        q
                    })
                })
                .collect();
        }
        points.sort();
        points
    }

    /// `base` with the assignments of `point` applied.
    pub fn apply(&self, point: &GridPoint, base: &RunSpec) -> Result<RunSpec> {
        let mut s = base.clone();
        for (key, v) in &point.0 {
            let k = key.as_str();
            match k {
                "gamma" => s.strategy.gamma = v.num(k)?,
                "hidden_size" => s.model.hidden_size = v.count(k)?,
                "k" => s.strategy.k = v.count(k)?,
                "lambda" => s.strategy.lambda = v.num(k)?,
                "learning_rate" => s.train.learning_rate = v.num(k)?,
                "minibatch" => s.train.minibatch = v.count(k)?,
                "num_layers" => s.model.num_layers = v.count(k)?,
                "optimizer" => {
                    s.train.optimizer = match v.to_string().as_str() {
                        "adam" => OptimizerKind::Adam,
                        "sgd" => OptimizerKind::Sgd,
                        other => return Err(Error::Configuration(format!("grid.optimizer: unknown {other:?}"))),
                    }
                }
                "p" => s.strategy.p = v.count(k)?,
                "patterns_per_step" => s.strategy.patterns_per_step = v.count(k)?,
                "sample_size" => s.strategy.sample_size = v.count(k)?,
                "temperature" => s.strategy.temperature = v.num(k)?,
                other => return Err(Error::Configuration(format!("unknown grid key {other:?}"))),
            }
        }
        Ok(s)
    }

    pub fn len(&self) -> usize {
        self.axes().iter().map(|(_, v)| v.len()).product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn product_is_sorted_and_complete() {
        let g = GridSpec {
            lambda: Some(vec![10.0, 0.1]),
            hidden_size: Some(vec![64, 32]),
            optimizer: Some(vec![OptimizerKind::Sgd, OptimizerKind::Adam]),
            ..Default::default()
        };
        let pts = g.points();
        assert_eq!(pts.len(), 8);
        assert_eq!(g.len(), 8);
        assert_eq!(pts[0].to_string(), "hidden_size=32,lambda=0.1,optimizer=adam");
        assert_eq!(pts[7].to_string(), "hidden_size=64,lambda=10,optimizer=sgd");
        assert!(pts.windows(2).all(|w| w[0] < w[1]));
        let spec = g.apply(&pts[7], &RunSpec::default()).unwrap();
        assert_eq!(spec.model.hidden_size, 64);
        assert_eq!(spec.strategy.lambda, 10.0);
        assert_eq!(spec.train.optimizer, OptimizerKind::Sgd);
    }

    #[test]
    fn empty_spec_has_base_point() {
        let g = GridSpec::default();
        assert_eq!(g.points(), vec![GridPoint::default()]);
        assert_eq!(g.apply(&GridPoint::default(), &RunSpec::default()).unwrap(), RunSpec::default());
    }

    #[test]
    fn explicit_empty_list_empties_grid() {
        let g = GridSpec {
            lambda: Some(vec![]),
            k: Some(vec![5]),
            ..Default::default()
        };
        assert!(g.points().is_empty());
        assert!(g.is_empty());
    }

    #[test]
    fn bad_assignments() {
        let g = GridSpec::default();
        let bad = GridPoint(vec![("hidden_size".into(), GridValue::Num(1.5))]);
        assert!(g.apply(&bad, &RunSpec::default()).is_err());
        let unknown = GridPoint(vec![("depth".into(), GridValue::Num(1.0))]);
        assert!(g.apply(&unknown, &RunSpec::default()).is_err());
    }
}
