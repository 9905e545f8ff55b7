use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::cohort::{CohortTable, ColumnKind};
use crate::error::{invalid, Error, Result};

/// A factor entering the design as treatment-coded dummies.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FactorTerm {
    pub column: String,
    /// Baseline level; defaults to the first declared category.
    #[serde(default)]
    pub reference: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct DesignSpec {
    #[serde(default)]
    pub factors: Vec<FactorTerm>,
    /// Continuous or binary columns entering linearly.
    #[serde(default)]
    pub covariates: Vec<String>,
    /// Clustering column; defaults to the schema's cluster column.
    #[serde(default)]
    pub cluster: Option<String>,
}

impl DesignSpec {
    pub fn factor(mut self, column: &str, reference: Option<&str>) -> Self {
        self.factors.push(FactorTerm {
            column: column.to_string(),
            reference: reference.map(str::to_string),
        });
        self
    }

    pub fn covariate(mut self, column: &str) -> Self {
        self.covariates.push(column.to_string());
        self
    }

    /// The same spec without any term built from `column`.
    pub fn without(&self, column: &str) -> Self {
        Self {
            factors: self.factors.iter().filter(|f| f.column != column).cloned().collect(),
            covariates: self.covariates.iter().filter(|c| *c != column).cloned().collect(),
            cluster: self.cluster.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DesignMatrix {
    pub names: Vec<String>,
    pub x: DMatrix<f64>,
    /// Dense cluster index per row, in first-appearance order of the labels.
    pub cluster_ids: Vec<usize>,
    pub cluster_labels: Vec<String>,
    /// `(factor, reference level)` for every factor term.
    pub reference_levels: Vec<(String, String)>,
}

impl DesignMatrix {
    /// Builds a design from a raw matrix; clusters are given per row.
    pub fn from_parts(names: Vec<String>, x: DMatrix<f64>, clusters: &[usize]) -> Result<Self> {
        if names.len() != x.ncols() || clusters.len() != x.nrows() {
            return invalid("design names or cluster ids do not match the matrix shape");
        }
        let mut labels: Vec<usize> = Vec::new();
        let ids = clusters
            .iter()
            .map(|c| match labels.iter().position(|l| l == c) {
                Some(p) => p,
                None => {
                    labels.push(*c);
                    labels.len() - 1
                }
            })
            .collect();
        Ok(Self {
            names,
            x,
            cluster_ids: ids,
            cluster_labels: labels.iter().map(|c| c.to_string()).collect(),
            reference_levels: Vec::new(),
        })
    }

    pub fn n(&self) -> usize {
        self.x.nrows()
    }

    pub fn k(&self) -> usize {
        self.x.ncols()
    }

    pub fn n_clusters(&self) -> usize {
        self.cluster_labels.len()
    }

    pub fn column_index(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    /// Rows at the given indices; cluster ids are renumbered densely.
    pub fn select_rows(&self, rows: &[usize]) -> Self {
        let x = DMatrix::from_fn(rows.len(), self.k(), |i, j| self.x[(rows[i], j)]);
        let mut map: Vec<Option<usize>> = vec![None; self.n_clusters()];
        let mut labels = Vec::new();
        let ids = rows
            .iter()
            .map(|&r| {
                let g = self.cluster_ids[r];
                *map[g].get_or_insert_with(|| {
                    labels.push(self.cluster_labels[g].clone());
                    labels.len() - 1
                })
            })
            .collect();
        Self {
            names: self.names.clone(),
            x,
            cluster_ids: ids,
            cluster_labels: labels,
            reference_levels: self.reference_levels.clone(),
        }
    }

    /// Copy with column `j` removed.
    pub fn drop_column(&self, j: usize) -> Self {
        let mut out = self.clone();
        out.x = self.x.clone().remove_column(j);
        out.names.remove(j);
        out
    }

    /// Copy with a column appended.
    pub fn with_column(&self, name: &str, values: &[f64]) -> Self {
        let mut out = self.clone();
        let k = self.k();
        out.x = self.x.clone().insert_column(k, 0.0);
        for (i, v) in values.iter().enumerate() {
            out.x[(i, k)] = *v;
        }
        out.names.push(name.to_string());
        out
    }

    /// Errors naming every column that is linearly dependent on earlier ones.
    pub fn check_rank(&self) -> Result<()> {
        let bad = dependent_columns(&self.x);
        if bad.is_empty() {
            Ok(())
        } else {
            Err(Error::RankDeficient(
                bad.into_iter().map(|j| self.names[j].clone()).collect(),
            ))
        }
    }
}

/// Columns whose residual after projection on the preceding independent
/// columns is negligible (modified Gram-Schmidt).
pub(crate) fn dependent_columns(x: &DMatrix<f64>) -> Vec<usize> {
    let mut basis: Vec<nalgebra::DVector<f64>> = Vec::new();
    let mut bad = Vec::new();
    for j in 0..x.ncols() {
        let col = x.column(j).into_owned();
        let scale = col.norm();
        let mut v = col;
        for q in &basis {
            let proj = q.dot(&v);
            v -= q * proj;
        }
        let norm = v.norm();
        if scale == 0.0 || norm <= 1e-9 * scale.max(1.0) {
            bad.push(j);
        } else {
            basis.push(v / norm);
        }
    }
    bad
}

/// Intercept, treatment-coded factor dummies, then linear covariates.
pub fn build_design(table: &CohortTable, spec: &DesignSpec) -> Result<DesignMatrix> {
    let schema = table.schema();
    let n = table.n_rows();
    let mut names = vec!["(Intercept)".to_string()];
    let mut cols: Vec<Vec<f64>> = vec![vec![1.0; n]];
    let mut refs = Vec::new();

    let check_complete = |j: usize| -> Result<()> {
        if table.missing_count(j) > 0 {
            return invalid(format!("design column `{}` has missing cells", schema.column(j).name));
        }
        Ok(())
    };

    for f in &spec.factors {
        let j = schema.require(&f.column)?;
        check_complete(j)?;
        let c = schema.column(j);
        let levels: Vec<String> = match c.kind {
            ColumnKind::Categorical => c.categories.clone(),
            ColumnKind::Binary if c.categories.len() == 2 => c.categories.clone(),
            ColumnKind::Binary => vec!["0".into(), "1".into()],
            ColumnKind::Continuous => {
                return invalid(format!("factor `{}` is continuous", f.column));
            }
        };
        let reference = match &f.reference {
            Some(r) => levels
                .iter()
                .position(|l| l == r)
                .ok_or_else(|| Error::InvalidArgument(format!("reference `{r}` is not a level of `{}`", f.column)))?,
            None => 0,
        };
        refs.push((f.column.clone(), levels[reference].clone()));
        let v = table.column(j);
        for (l, label) in levels.iter().enumerate() {
            if l == reference {
                continue;
            }
            names.push(format!("{}: {}", f.column, label));
            cols.push(v.iter().map(|&x| f64::from(x as usize == l)).collect());
        }
    }
    for name in &spec.covariates {
        let j = schema.require(name)?;
        check_complete(j)?;
        if schema.column(j).kind == ColumnKind::Categorical {
            return invalid(format!("covariate `{name}` is categorical; declare it as a factor"));
        }
        names.push(name.clone());
        cols.push(table.column(j).to_vec());
    }

    let cj = match &spec.cluster {
        Some(c) => schema.require(c)?,
        None => schema.cluster_index(),
    };
    check_complete(cj)?;
    let cluster_values: Vec<usize> = table.column(cj).iter().map(|&v| v as usize).collect();
    let mut design = DesignMatrix::from_parts(names, crate::linalg::from_columns(&cols, n), &cluster_values)?;
    let cspec = schema.column(cj);
    design.cluster_labels = {
        let mut seen: Vec<usize> = Vec::new();
        for &c in &cluster_values {
            if !seen.contains(&c) {
                seen.push(c);
            }
        }
        seen.iter().map(|&c| cspec.format_cell(c as f64)).collect()
    };
    design.reference_levels = refs;
    design.check_rank()?;
    Ok(design)
}
