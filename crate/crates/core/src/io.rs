//! File formats: per-environment CSV, instance JSON and weight JSON.
//!
//! A CSV file holds one environment with header `x1,…,xd,y`. Instance JSON
//! stores exact moments with every rational written as `"p/q"` (or `"p"`).

use std::fs;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{IgrError, Result};
use crate::lab::{LisInstance, Provenance};
use crate::moments::{Environment, MultiEnvDataset};
use crate::scalar::{format_rational, parse_rational, Rational, Scalar};
use crate::scm::ScmOracle;
use crate::subset::IndexSet;
use crate::variation::{WeightConvention, WeightTable};

pub fn read_environment_csv(path: &Path) -> Result<Environment> {
    let id = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| path.display().to_string());
    let text = fs::read_to_string(path)?;
    parse_environment_csv(&text, id)
}

pub fn parse_environment_csv(text: &str, id: impl Into<String>) -> Result<Environment> {
    let mut reader = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(text.as_bytes());
    let header: Vec<String> = reader.headers()?.iter().map(str::to_string).collect();
    let d = header.len().checked_sub(1).filter(|&d| d > 0).ok_or_else(|| IgrError::Parse {
        line: 1,
        msg: "header needs at least one covariate and y".into(),
    })?;
    for (j, name) in header.iter().enumerate() {
        let expect = if j == d { "y".to_string() } else { format!("x{}", j + 1) };
        if *name != expect {
            return Err(IgrError::Parse {
                line: 1,
                msg: format!("column {} is `{name}`, expected `{expect}`", j + 1),
            });
        }
    }
    let mut xs = Vec::new();
    let mut ys = Vec::new();
    for (r, record) in reader.records().enumerate() {
        let record = record?;
        let line = r + 2;
        if record.len() != d + 1 {
            return Err(IgrError::Parse { line, msg: format!("{} fields, expected {}", record.len(), d + 1) });
        }
        for (j, field) in record.iter().enumerate() {
            let v: f64 = field
                .parse()
                .map_err(|_| IgrError::Parse { line, msg: format!("`{field}` is not a number") })?;
            if j == d {
                ys.push(v);
            } else {
                xs.push(v);
            }
        }
    }
    let n = ys.len();
    Environment::new(id, DMatrix::from_row_slice(n, d, &xs), DVector::from_vec(ys))
}

pub fn write_environment_csv(path: &Path, env: &Environment) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    let d = env.d();
    let mut header: Vec<String> = (1..=d).map(|j| format!("x{j}")).collect();
    header.push("y".into());
    w.write_record(&header)?;
    for i in 0..env.n() {
        let mut row: Vec<String> = (0..d).map(|j| env.x[(i, j)].to_string()).collect();
        row.push(env.y[i].to_string());
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

/// Every `*.csv` file of a directory, in file-name order, one environment each.
pub fn read_environment_dir(dir: &Path) -> Result<MultiEnvDataset> {
    let mut paths: Vec<_> = fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "csv"))
        .collect();
    paths.sort();
    if paths.is_empty() {
        return Err(IgrError::InvalidInput(format!("no .csv files in {}", dir.display())));
    }
    let envs = paths.iter().map(|p| read_environment_csv(p)).collect::<Result<Vec<_>>>()?;
    MultiEnvDataset::new(envs)
}

pub fn write_environment_dir(dir: &Path, data: &MultiEnvDataset) -> Result<()> {
    fs::create_dir_all(dir)?;
    for env in data.environments() {
        write_environment_csv(&dir.join(format!("{}.csv", env.id)), env)?;
    }
    Ok(())
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct InstanceJson {
    pub d: usize,
    /// One matrix per environment, row by row.
    pub sigma: Vec<Vec<Vec<String>>>,
    pub u: Vec<Vec<String>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub provenance: Option<Provenance>,
}

impl InstanceJson {
    pub fn from_instance(inst: &LisInstance) -> Self {
        let m = inst.moments();
        let d = m.d();
        InstanceJson {
            d,
            sigma: (0..m.n_envs())
                .map(|e| (0..d).map(|i| (0..d).map(|j| format_rational(&m.sigma(e)[(i, j)])).collect()).collect())
                .collect(),
            u: (0..m.n_envs()).map(|e| m.u(e).iter().map(format_rational).collect()).collect(),
            provenance: Some(inst.provenance()),
        }
    }

    pub fn to_instance(&self) -> Result<LisInstance> {
        let d = self.d;
        if self.sigma.len() != self.u.len() || self.sigma.is_empty() {
            return Err(IgrError::InvalidInput("sigma and u must list the same, nonzero number of environments".into()));
        }
        let parse = |s: &String| {
            parse_rational(s).ok_or_else(|| IgrError::InvalidInput(format!("`{s}` is not a rational number")))
        };
        let mut sigma = Vec::new();
        for (e, rows) in self.sigma.iter().enumerate() {
            if rows.len() != d || rows.iter().any(|r| r.len() != d) {
                return Err(IgrError::DimensionMismatch(format!("sigma {} is not {d}×{d}", e + 1)));
            }
            let flat: Vec<Rational> = rows.iter().flatten().map(parse).collect::<Result<_>>()?;
            sigma.push(DMatrix::from_row_slice(d, d, &flat));
        }
        let mut u = Vec::new();
        for (e, v) in self.u.iter().enumerate() {
            if v.len() != d {
                return Err(IgrError::DimensionMismatch(format!("u {} has length {}, expected {d}", e + 1, v.len())));
            }
            u.push(DVector::from_vec(v.iter().map(parse).collect::<Result<_>>()?));
        }
        LisInstance::new(sigma, u, self.provenance.unwrap_or(Provenance::HandBuilt))
    }
}

pub fn instance_to_json(inst: &LisInstance) -> Result<String> {
    Ok(serde_json::to_string_pretty(&InstanceJson::from_instance(inst))?)
}

pub fn instance_from_json(text: &str) -> Result<LisInstance> {
    serde_json::from_str::<InstanceJson>(text)?.to_instance()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WeightsJson {
    pub k: usize,
    pub convention: WeightConvention,
    pub weights: Vec<f64>,
    pub argmin_sets: Vec<IndexSet>,
}

impl WeightsJson {
    pub fn from_table<T: Scalar>(w: &WeightTable<T>) -> Self {
        WeightsJson {
            k: w.k(),
            convention: w.convention(),
            // an exact zero may surface as -0.0
            weights: w.reported().into_iter().map(|v| v + 0.0).collect(),
            argmin_sets: w.argmin_sets().to_vec(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OracleEnvironment {
    pub id: String,
    /// Row by row.
    pub sigma: Vec<Vec<f64>>,
    pub u: Vec<f64>,
    pub second_moment_y: Option<f64>,
    /// `E[X ε]` with `ε = Y − β*ᵀX`.
    pub noise_cov: Vec<f64>,
}

/// Population quantities written next to sampled data.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OracleJson {
    pub d: usize,
    pub beta_star: Vec<f64>,
    pub s_star: IndexSet,
    pub endogenous: IndexSet,
    pub environments: Vec<OracleEnvironment>,
}

impl OracleJson {
    pub fn from_oracle<T: Scalar>(o: &ScmOracle<T>) -> Self {
        let m = &o.moments;
        let d = m.d();
        let environments = (0..m.n_envs())
            .map(|e| OracleEnvironment {
                id: m.ids()[e].clone(),
                sigma: (0..d).map(|i| (0..d).map(|j| m.sigma(e)[(i, j)].to_f64()).collect()).collect(),
                u: m.u(e).iter().map(Scalar::to_f64).collect(),
                second_moment_y: m.second_moment_y().map(|v| v[e].to_f64()),
                noise_cov: o.noise_cov[e].iter().map(Scalar::to_f64).collect(),
            })
            .collect();
        OracleJson {
            d,
            beta_star: o.beta_star.iter().map(Scalar::to_f64).collect(),
            s_star: o.s_star.clone(),
            endogenous: o.endogenous.clone(),
            environments,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lab::{parse_dimacs, reduce_3sat};

    #[test]
    fn csv_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let env = Environment::new(
            "a",
            DMatrix::from_row_slice(2, 2, &[1.0, 2.5, -3.0, 4.0]),
            DVector::from_vec(vec![0.5, 1e-3]),
        )
        .unwrap();
        let data = MultiEnvDataset::new(vec![env.clone()]).unwrap();
        write_environment_dir(dir.path(), &data).unwrap();
        let back = read_environment_dir(dir.path()).unwrap();
        assert_eq!(back.environments()[0].x, env.x);
        assert_eq!(back.environments()[0].y, env.y);
        assert_eq!(back.environments()[0].id, "a");
    }

    #[test]
    fn csv_header_and_fields_checked() {
        assert!(parse_environment_csv("x1,x2,y\n1,2,3\n", "e").is_ok());
        assert!(parse_environment_csv("x1,z,y\n1,2,3\n", "e").is_err());
        assert!(parse_environment_csv("y\n1\n", "e").is_err());
        assert!(parse_environment_csv("x1,y\n1,abc\n", "e").is_err());
        assert!(parse_environment_csv("x1,y\n", "e").is_err());
    }

    #[test]
    fn instance_round_trip() {
        let inst = reduce_3sat(&parse_dimacs("p cnf 3 1\n1 2 3 0").unwrap());
        let text = instance_to_json(&inst).unwrap();
        assert!(text.contains("\"81/2\""));
        let back = instance_from_json(&text).unwrap();
        assert_eq!(back.provenance(), inst.provenance());
        assert_eq!(back.moments().sigma(1), inst.moments().sigma(1));
        assert!(instance_from_json(r#"{"d":1,"sigma":[[["x"]]],"u":[["1"]]}"#).is_err());
        assert!(instance_from_json(r#"{"d":1,"sigma":[[["-1"]]],"u":[["1"]]}"#).is_err());
        let hand = instance_from_json(r#"{"d":1,"sigma":[[["2"]]],"u":[["1/3"]]}"#).unwrap();
        assert_eq!(hand.provenance(), Provenance::HandBuilt);
    }

    #[test]
    fn oracle_of_example() {
        use crate::scm::{make_example, population_moments, ExampleName};
        let o = OracleJson::from_oracle(&population_moments(&make_example(ExampleName::Ex3_1)).unwrap());
        assert_eq!(o.beta_star, vec![1.0, 0.0, 0.0]);
        assert_eq!(o.s_star.one_based(), vec![1]);
        assert_eq!(o.environments.len(), 2);
        let text = serde_json::to_string(&o).unwrap();
        assert_eq!(serde_json::from_str::<OracleJson>(&text).unwrap(), o);
    }
}
