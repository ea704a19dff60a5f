use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::EnvKind;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "train" => Ok(Split::Train),
            "test" => Ok(Split::Test),
            other => Err(Error::Config(format!("unknown split {other:?} (expected train or test)"))),
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Test => "test",
        })
    }
}

/// Allowed values of one confounder.
#[derive(Clone, Debug, PartialEq)]
pub struct ConfounderGrid {
    pub name: String,
    pub train: Vec<f64>,
    pub test: Vec<f64>,
}

impl ConfounderGrid {
    pub fn values(&self, split: Split) -> &[f64] {
        match split {
            Split::Train => &self.train,
            Split::Test => &self.test,
        }
    }

    /// Position of `value` in `train ++ test`.
    fn global_index(&self, split: Split, local: usize) -> usize {
        match split {
            Split::Train => local,
            Split::Test => self.train.len() + local,
        }
    }

    fn radix(&self) -> usize {
        self.train.len() + self.test.len()
    }
}

/// One combination of confounder values, fixed for a whole episode.
#[derive(Clone, Debug, PartialEq)]
pub struct ConfounderSetting {
    pub values: Vec<(String, f64)>,
    pub setting_id: u64,
    pub split: Split,
}

impl ConfounderSetting {
    pub fn get(&self, name: &str) -> Option<f64> {
        self.values.iter().find(|(n, _)| n == name).map(|(_, v)| *v)
    }

    /// A setting outside any registry, for probes and tests.
    pub fn custom(values: &[(&str, f64)]) -> Self {
        Self {
            values: values.iter().map(|(n, v)| (n.to_string(), *v)).collect(),
            setting_id: u64::MAX,
            split: Split::Test,
        }
    }
}

/// Train/test grids for every confounder of an environment.
#[derive(Clone, Debug, PartialEq)]
pub struct Registry {
    pub env: EnvKind,
    pub grids: Vec<ConfounderGrid>,
}

fn steps(lo: f64, step: f64, n: usize) -> Vec<f64> {
    (0..n).map(|i| ((lo + step * i as f64) * 1e6).round() / 1e6).collect()
}

impl Registry {
    /// The default multi-confounder grids.
    pub fn standard(env: EnvKind) -> Self {
        let grids = match env {
            EnvKind::Pendulum => vec![
                ConfounderGrid { name: "m".into(), train: steps(0.75, 0.05, 11), test: vec![0.50, 0.70, 1.30, 1.50] },
                ConfounderGrid { name: "l".into(), train: steps(0.75, 0.05, 11), test: vec![0.50, 0.70, 1.30, 1.50] },
            ],
            EnvKind::CartPole => vec![
                ConfounderGrid { name: "f".into(), train: steps(5.0, 1.0, 11), test: vec![3.0, 3.5, 16.5, 17.0] },
                ConfounderGrid { name: "l".into(), train: steps(0.40, 0.05, 5), test: vec![0.25, 0.30, 0.70, 0.75] },
            ],
        };
        Self { env, grids }
    }

    /// Parses `name.split = v1, v2, ...` lines; `#` starts a comment.
    pub fn parse(env: EnvKind, text: &str) -> Result<Self> {
        let mut grids: Vec<ConfounderGrid> = env
            .confounders()
            .iter()
            .map(|n| ConfounderGrid { name: n.to_string(), train: vec![], test: vec![] })
            .collect();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key = value", lineno + 1)))?;
            let (name, split) = key
                .trim()
                .rsplit_once('.')
                .ok_or_else(|| Error::Config(format!("line {}: key must be <confounder>.<split>", lineno + 1)))?;
            let split: Split = split.parse()?;
            let grid = grids
                .iter_mut()
                .find(|g| g.name == name)
                .ok_or_else(|| Error::Config(format!("line {}: {env} has no confounder {name:?}", lineno + 1)))?;
            let values = value
                .split(',')
                .map(|v| v.trim().parse::<f64>().map_err(|_| Error::Config(format!("line {}: bad number {v:?}", lineno + 1))))
                .collect::<Result<Vec<_>>>()?;
            match split {
                Split::Train => grid.train = values,
                Split::Test => grid.test = values,
            }
        }
        let reg = Self { env, grids };
        reg.validate()?;
        Ok(reg)
    }

    pub fn load(env: EnvKind, path: impl AsRef<Path>) -> Result<Self> {
        Self::parse(env, &std::fs::read_to_string(path)?)
    }

    pub fn validate(&self) -> Result<()> {
        for g in &self.grids {
            if g.train.is_empty() || g.test.is_empty() {
                return Err(Error::Config(format!("confounder {} needs both train and test values", g.name)));
            }
            if g.train.iter().chain(&g.test).any(|v| !v.is_finite() || *v <= 0.0) {
                return Err(Error::Config(format!("confounder {} values must be positive", g.name)));
            }
            if g.train.iter().any(|v| g.test.contains(v)) {
                return Err(Error::Config(format!("confounder {} train and test grids overlap", g.name)));
            }
        }
        Ok(())
    }

    pub fn grid(&self, name: &str) -> Option<&ConfounderGrid> {
        self.grids.iter().find(|g| g.name == name)
    }

    fn make(&self, split: Split, locals: &[usize]) -> ConfounderSetting {
        let mut id = 0u64;
        let mut values = Vec::with_capacity(self.grids.len());
        for (g, &i) in self.grids.iter().zip(locals) {
            id = id * g.radix() as u64 + g.global_index(split, i) as u64;
            values.push((g.name.clone(), g.values(split)[i]));
        }
        ConfounderSetting { values, setting_id: id, split }
    }

    /// Independent uniform draw per confounder.
    pub fn sample<R: Rng + ?Sized>(&self, split: Split, rng: &mut R) -> ConfounderSetting {
        let locals: Vec<usize> = self.grids.iter().map(|g| rng.random_range(0..g.values(split).len())).collect();
        self.make(split, &locals)
    }

    /// Every combination of the split's grid values, in mixed-radix order.
    pub fn enumerate(&self, split: Split) -> Vec<ConfounderSetting> {
        let sizes: Vec<usize> = self.grids.iter().map(|g| g.values(split).len()).collect();
        let total: usize = sizes.iter().product();
        (0..total)
            .map(|mut k| {
                let mut locals = vec![0; sizes.len()];
                for (slot, &s) in locals.iter_mut().zip(&sizes).rev() {
                    *slot = k % s;
                    k /= s;
                }
                self.make(split, &locals)
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn pendulum_grids() {
        let r = Registry::standard(EnvKind::Pendulum);
        let m = r.grid("m").unwrap();
        assert_eq!(m.train, vec![0.75, 0.80, 0.85, 0.90, 0.95, 1.0, 1.05, 1.10, 1.15, 1.20, 1.25]);
        assert_eq!(m.test, vec![0.50, 0.70, 1.30, 1.50]);
        assert_eq!(r.grid("l").unwrap().train, m.train);
        assert_eq!(r.grid("l").unwrap().test, m.test);
    }

    #[test]
    fn cartpole_grids() {
        let r = Registry::standard(EnvKind::CartPole);
        assert_eq!(r.grid("f").unwrap().train, vec![5.0, 6.0, 7.0, 8.0, 9.0, 10.0, 11.0, 12.0, 13.0, 14.0, 15.0]);
        assert_eq!(r.grid("f").unwrap().test, vec![3.0, 3.5, 16.5, 17.0]);
        assert_eq!(r.grid("l").unwrap().train, vec![0.40, 0.45, 0.50, 0.55, 0.60]);
        assert_eq!(r.grid("l").unwrap().test, vec![0.25, 0.30, 0.70, 0.75]);
    }

    #[test]
    fn train_and_test_are_disjoint() {
        for env in [EnvKind::Pendulum, EnvKind::CartPole] {
            Registry::standard(env).validate().unwrap();
        }
    }

    #[test]
    fn samples_come_from_the_declared_split() {
        let r = Registry::standard(EnvKind::Pendulum);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for split in [Split::Train, Split::Test] {
            for _ in 0..200 {
                let s = r.sample(split, &mut rng);
                assert_eq!(s.split, split);
                for (name, v) in &s.values {
                    assert!(r.grid(name).unwrap().values(split).contains(v));
                }
            }
        }
    }

    #[test]
    fn setting_ids_are_stable_and_unique() {
        let r = Registry::standard(EnvKind::CartPole);
        let mut ids: Vec<u64> = r.enumerate(Split::Train).iter().chain(&r.enumerate(Split::Test)).map(|s| s.setting_id).collect();
        let n = ids.len();
        assert_eq!(n, 11 * 5 + 4 * 4);
        ids.sort_unstable();
        ids.dedup();
        assert_eq!(ids.len(), n);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let s = r.sample(Split::Test, &mut rng);
        let again = r.enumerate(Split::Test).into_iter().find(|e| e.values == s.values).unwrap();
        assert_eq!(again.setting_id, s.setting_id);
    }

    #[test]
    fn parse_config_and_reject_bad_input() {
        let text = "# pendulum grids\nm.train = 0.9, 1.0\nm.test = 2.0\nl.train = 1.0\nl.test = 0.5 # short\n";
        let r = Registry::parse(EnvKind::Pendulum, text).unwrap();
        assert_eq!(r.grid("m").unwrap().train, vec![0.9, 1.0]);
        assert!(Registry::parse(EnvKind::Pendulum, "m.valid = 1.0").is_err());
        assert!(Registry::parse(EnvKind::Pendulum, "x.train = 1.0").is_err());
        let overlap = "m.train = 1.0\nm.test = 1.0\nl.train = 1.0\nl.test = 2.0";
        assert!(Registry::parse(EnvKind::Pendulum, overlap).is_err());
        assert!("validation".parse::<Split>().is_err());
    }
}
